//! Acceptance suite: one PASS/FAIL line per criterion. Exits non-zero when
//! any criterion fails.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use cropref_core::cropmapper::{forward_select, MapperConfig, PixelDataset};
use cropref_core::geocore::{geo_distance, offset_point, shift_to_parcel, GeoPoint, Heading, ShiftParams};
use cropref_core::metrics::{AgreementReport, ConfusionMatrix};
use cropref_core::neuralnet::{gradient_check_params, Network, NetworkSpec, Shape, Tensor, TrainConfig};
use cropref_core::rasterstack::{compute_index, BandName, FeatureName, FeatureStack, GridGeometry, RasterGrid};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn report(id: u32, name: &str, limit: Duration, f: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let mut o = f();
    let took = start.elapsed();
    if took > limit {
        o.pass = false;
        o.detail = format!("{}; runtime {:.1}s over the {:.0}s limit", o.detail, took.as_secs_f64(), limit.as_secs_f64());
    }
    println!(
        "{} C{id} {name}: {} [{:.2}s]",
        if o.pass { "PASS" } else { "FAIL" },
        o.detail,
        took.as_secs_f64()
    );
    o.pass
}

fn round2(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}

/// Checks printed two-decimal PA/UA/OA values against a matrix; returns the
/// mismatching cells.
fn printed_mismatches(cm: &ConfusionMatrix, ua: &[f64], pa: &[f64], oa: f64) -> Vec<String> {
    let mut bad = Vec::new();
    for i in 0..cm.len() {
        let name = &cm.class_names()[i];
        let u = cm.user_accuracy(i).unwrap();
        let p = cm.producer_accuracy(i).unwrap();
        if (round2(u) - ua[i]).abs() > 1e-9 {
            bad.push(format!("{name} UA {}/{} = {u:.4} vs printed {:.2}", cm.get(i, i), cm.row_sum(i), ua[i]));
        }
        if (round2(p) - pa[i]).abs() > 1e-9 {
            bad.push(format!("{name} PA {}/{} = {p:.4} vs printed {:.2}", cm.get(i, i), cm.col_sum(i), pa[i]));
        }
    }
    let o = cm.overall_accuracy().unwrap();
    if (round2(o) - oa).abs() > 1e-9 {
        bad.push(format!("OA {o:.4} vs printed {oa:.2}"));
    }
    bad
}

fn c1_metrics() -> Outcome {
    // Rows predicted, columns reference, as printed.
    let ca = ConfusionMatrix::from_counts(
        &["alfalfa", "almond", "corn", "cotton", "grape", "others", "pistachio"],
        vec![
            vec![174, 0, 3, 11, 0, 0, 0],
            vec![0, 129, 0, 1, 2, 0, 2],
            vec![1, 1, 101, 16, 0, 0, 1],
            vec![0, 0, 0, 116, 0, 0, 0],
            vec![0, 1, 1, 1, 118, 0, 1],
            vec![1, 1, 0, 0, 0, 142, 0],
            vec![0, 10, 3, 0, 4, 1, 109],
        ],
    )
    .unwrap();
    let il = ConfusionMatrix::from_counts(
        &["corn", "others", "soybean"],
        vec![vec![118, 3, 5], vec![0, 139, 0], vec![1, 4, 119]],
    )
    .unwrap();
    let mut bad = printed_mismatches(
        &ca,
        &[0.94, 0.96, 0.84, 1.0, 0.97, 0.99, 0.86],
        &[0.99, 0.91, 0.94, 0.80, 0.94, 0.99, 0.96],
        0.93,
    );
    bad.extend(printed_mismatches(&il, &[0.94, 1.0, 0.96], &[0.99, 0.95, 0.96], 0.97));
    let corn_pa = il.producer_accuracy(0).unwrap();
    let corn_ua = il.user_accuracy(0).unwrap();
    if corn_pa != 118.0 / 119.0 || corn_ua != 118.0 / 126.0 {
        bad.push(format!("IL corn PA {corn_pa} UA {corn_ua}"));
    }
    let detail = format!(
        "CA OA {:.4}, IL OA {:.4}",
        ca.overall_accuracy().unwrap(),
        il.overall_accuracy().unwrap()
    );
    if bad.is_empty() {
        outcome(true, format!("{detail}; all 31 printed values reproduced"))
    } else {
        outcome(false, format!("{detail}; {} of 31 printed values differ: {}", bad.len(), bad.join("; ")))
    }
}

fn c2_agreement() -> Outcome {
    let names = ["corn", "alfalfa", "grape", "pistachio", "almond", "cotton"];
    let matching = [1002, 1077, 173, 955, 1943, 980];
    let total = [1115, 1120, 195, 994, 1984, 1001];
    let printed = [90, 96, 89, 96, 98, 98];
    let r = AgreementReport::from_counts(&names, &matching, &total);
    let got: Vec<u64> = names.iter().map(|n| r.class(n).unwrap().percent()).collect();
    let pass = got == printed;
    outcome(pass, format!("percentages {got:?}, expected {printed:?}"))
}

fn oracle(kind: FeatureName, b: &[f64; 6]) -> Option<f64> {
    let (blue, green, red, nir, swir1) = (b[0], b[1], b[2], b[3], b[4]);
    let (num, den) = match kind {
        FeatureName::NDVI => (nir - red, nir + red),
        FeatureName::EVI => (2.5 * (nir - red), nir + 6.0 * red - 7.0 * blue + 1.0),
        FeatureName::ENDVI => ((nir + green) - 2.0 * blue, (nir + green) + 2.0 * blue),
        FeatureName::LSWI => (nir - swir1, nir + swir1),
        _ => unreachable!(),
    };
    (den.abs() >= 1e-12).then(|| num / den)
}

fn c3_indices() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let geo = GridGeometry::new(40, 25, 0.0, 0.0, 1.0).unwrap();
    let tuples: Vec<[f64; 6]> = (0..1000)
        .map(|_| std::array::from_fn(|_| rng.random_range(0.0..1.0)))
        .collect();
    let bands = BandName::ALL
        .iter()
        .map(|&b| {
            let values = tuples.iter().map(|t| t[b.index()]).collect();
            (b, RasterGrid::new(geo, -9999.0, values).unwrap())
        })
        .collect();
    let mut max_err: f64 = 0.0;
    let mut problems = Vec::new();
    for kind in [FeatureName::NDVI, FeatureName::EVI, FeatureName::ENDVI, FeatureName::LSWI] {
        let grid = compute_index(kind, &bands).unwrap();
        for (i, t) in tuples.iter().enumerate() {
            let got = grid.value(i / 40, i % 40);
            match (got, oracle(kind, t)) {
                (Some(g), Some(o)) => {
                    max_err = max_err.max((g - o).abs());
                    if kind != FeatureName::EVI && !(-1.0..=1.0).contains(&g) {
                        problems.push(format!("{kind} out of range: {g}"));
                    }
                }
                (None, None) => {}
                (g, o) => problems.push(format!("{kind} cell {i}: {g:?} vs {o:?}")),
            }
        }
    }
    let pass = max_err <= 1e-12 && problems.is_empty();
    outcome(
        pass,
        format!("max abs error {max_err:.2e} (limit 1e-12) over 4000 values; {} range/validity problems", problems.len()),
    )
}

/// Up to `per_layer` seeded parameter indices from every parameterised layer.
fn sample_params(net: &Network, per_layer: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut out = Vec::new();
    for (_, range) in net.layer_params() {
        let n = range.len();
        if n <= per_layer {
            out.extend(range);
        } else {
            let mut picked = std::collections::BTreeSet::new();
            while picked.len() < per_layer {
                picked.insert(range.start + rng.random_range(0..n));
            }
            out.extend(picked);
        }
    }
    out
}

fn c4_gradients() -> Outcome {
    let mut worst: f64 = 0.0;
    let (mut checked, mut skipped) = (0, 0);
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let specs = [
            (NetworkSpec::image_default(Shape::new(3, 32, 32), 7, 0.3), 60),
            (NetworkSpec::pixel_default(10, 4, 3, 0.3), 120),
        ];
        for (spec, per_layer) in specs {
            let net = Network::build(spec, seed).unwrap();
            let shape = net.input_shape();
            let x = Tensor::new(shape, (0..shape.len()).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap();
            let label = (seed as usize) % net.classes();
            let idx = sample_params(&net, per_layer, &mut rng);
            let r = gradient_check_params(&net, &x, label, 1e-5, &idx).unwrap();
            worst = worst.max(r.max_relative_error);
            checked += r.checked;
            skipped += r.skipped;
        }
    }
    outcome(
        worst < 1e-4 && checked > 0,
        format!("max relative error {worst:.2e} (limit 1e-4) over {checked} parameters, {skipped} skipped at kinks, 10 seeds x 2 architectures"),
    )
}

fn c5_geometry() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst_rel: f64 = 0.0;
    let mut worst_shift: f64 = 0.0;
    for _ in 0..2000 {
        let p = GeoPoint::new(rng.random_range(-70.0..=70.0), rng.random_range(-179.0..179.0)).unwrap();
        let h = Heading::ALL[rng.random_range(0..4)];
        let d: f64 = rng.random_range(0.01..=1000.0);
        let q = offset_point(p, h, d).unwrap();
        let back = geo_distance(p, q).unwrap();
        worst_rel = worst_rel.max((back - d).abs() / d);
        let r = offset_point(q, h.opposite(), d).unwrap();
        worst_rel = worst_rel.max(geo_distance(p, r).unwrap() / d);
        let y = rng.random_range(0.0..40.0);
        let x = rng.random_range(1.0..60.0);
        let e = rng.random_range(0..4);
        let sp = ShiftParams::new(y, x, e).unwrap();
        let moved = geo_distance(p, shift_to_parcel(p, h, &sp).unwrap()).unwrap();
        worst_shift = worst_shift.max((moved - (0.5 * y + x * (1.0 + e as f64))).abs());
    }
    outcome(
        worst_rel <= 1e-6 && worst_shift <= 1e-2,
        format!("round-trip relative error {worst_rel:.2e} (limit 1e-6), shift error {worst_shift:.2e} m (limit 1e-2)"),
    )
}

const CHAIN: [&str; 12] = [
    "synth",
    "grid",
    "fetch",
    "train-images",
    "classify-images",
    "qc",
    "make-refs",
    "validate-refs",
    "select-features",
    "train-mapper",
    "map",
    "evaluate",
];

fn run_cmd(cmd: &str, config: &Path, out: &Path) -> Result<(), String> {
    let code = cropref_cli::run([
        "cropref",
        cmd,
        "--config",
        config.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    if code == 0 {
        Ok(())
    } else {
        Err(format!("{cmd} exited with {code}"))
    }
}

fn files_under(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

const SMALL_CONFIG: &str = "\
seed = 7
region = illinois
synth.rows = 60
synth.cols = 60
synth.image_size = 24
synth.train_images_per_class = 30
images.epochs = 10
refs.min_per_class = 20
mapper.epochs = 3
mapper.max_per_class = 30
mapper.candidates = NDVI,LSWI,SWIR1
mapper.dropout_rates = 0.2
";

fn c6_determinism(tmp: &Path) -> Outcome {
    let config = tmp.join("small.conf");
    fs::write(&config, SMALL_CONFIG).unwrap();
    let dirs = [tmp.join("small_a"), tmp.join("small_b")];
    for d in &dirs {
        for cmd in CHAIN {
            if let Err(e) = run_cmd(cmd, &config, d) {
                return outcome(false, e);
            }
        }
    }
    // Rerunning a command in place must reproduce its artifacts too.
    let before = files_under(&dirs[0]);
    for cmd in ["train-images", "select-features", "map"] {
        if let Err(e) = run_cmd(cmd, &config, &dirs[0]) {
            return outcome(false, e);
        }
    }
    let a = files_under(&dirs[0]);
    let b = files_under(&dirs[1]);
    let mut diffs: Vec<String> = a
        .iter()
        .filter(|(k, v)| b.get(*k) != Some(v) || before.get(*k) != Some(v))
        .map(|(k, _)| k.display().to_string())
        .collect();
    diffs.extend(b.keys().filter(|k| !a.contains_key(*k)).map(|k| k.display().to_string()));
    outcome(
        diffs.is_empty() && a.len() > 20,
        if diffs.is_empty() {
            format!("{} files compared across two runs and an in-place rerun; none differ", a.len())
        } else {
            format!("{} files compared; {} differ, e.g. {:?}", a.len(), diffs.len(), diffs.iter().take(5).collect::<Vec<_>>())
        },
    )
}

fn read_counts_csv(path: &Path) -> ConfusionMatrix {
    let text = fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').skip(1).collect();
    let counts = lines
        .filter(|l| !l.is_empty())
        .map(|l| l.split(',').skip(1).map(|v| v.parse().unwrap()).collect())
        .collect();
    ConfusionMatrix::from_counts(&header, counts).unwrap()
}

fn c7_images(run: &Path, chain: &Result<Duration, String>) -> Outcome {
    if let Err(e) = chain {
        return outcome(false, e.clone());
    }
    let cm = read_counts_csv(&run.join("image_test_confusion.csv"));
    let per_class: Vec<u64> = (0..cm.len()).map(|i| cm.col_sum(i)).collect();
    let oa = cm.overall_accuracy().unwrap();
    let catalog = fs::read_to_string(run.join("world/train_catalog.csv")).unwrap();
    let images = catalog.lines().count() - 1;
    outcome(
        oa >= 0.90 && cm.len() == 7 && images >= 7 * 200,
        format!("held-out OA {oa:.4} (min 0.90), {} classes, {images} images, test images per class {per_class:?}", cm.len()),
    )
}

fn c8_refs(run: &Path, chain: &Result<Duration, String>) -> Outcome {
    if let Err(e) = chain {
        return outcome(false, e.clone());
    }
    let text = fs::read_to_string(run.join("refs_agreement.csv")).unwrap();
    let mut worst = (String::new(), 1.0);
    let mut classes = 0;
    for l in text.lines().skip(1) {
        let f: Vec<&str> = l.split(',').collect();
        if f[0] == "overall" {
            continue;
        }
        let frac: f64 = f[3].parse().unwrap();
        classes += 1;
        if frac < worst.1 || worst.0.is_empty() {
            worst = (f[0].to_string(), frac);
        }
    }
    // Parcels of 13 cells of 30 m against the largest shift 6 + 30 * 4 m.
    let parcel_m = 13.0 * 30.0;
    let max_shift = 0.5 * 12.0 + 30.0 * 4.0;
    outcome(
        worst.1 >= 0.94 && classes == 7 && parcel_m >= 3.0 * max_shift,
        format!(
            "lowest per-class agreement {:.4} ({}) over {classes} classes (min 0.94); parcel {parcel_m} m vs max shift {max_shift} m",
            worst.1, worst.0
        ),
    )
}

/// Three classes separated only by SWIR1; every other feature is noise.
fn planted_dataset(cfg: &MapperConfig) -> PixelDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let times = 5;
    let classes: Vec<String> = ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
    let mut stacks = Vec::new();
    let mut labels = Vec::new();
    for i in 0..180 {
        let label = i % 3;
        let mut matrix = Vec::with_capacity(times * 10);
        for t in 0..times {
            for f in FeatureName::ALL {
                let v = if f == FeatureName::SWIR1 {
                    0.2 + 0.15 * label as f64 + 0.02 * t as f64 + rng.random_range(-0.02..0.02)
                } else {
                    rng.random_range(0.0..1.0)
                };
                matrix.push(v);
            }
        }
        stacks.push(FeatureStack {
            point: GeoPoint::new(0.0, 0.0).unwrap(),
            features: FeatureName::ALL.to_vec(),
            times,
            matrix,
            valid_mask: vec![true; times * 10],
        });
        labels.push(label);
    }
    let cells = (0..labels.len()).map(|i| (i, 0)).collect();
    PixelDataset::from_stacks(&classes, stacks, labels, cells, cfg).unwrap()
}

fn c9_mapping(run: &Path, chain: &Result<Duration, String>) -> Outcome {
    let cfg = MapperConfig {
        train: TrainConfig {
            epochs: 20,
            seed: 11,
            ..TrainConfig::default()
        },
        ..MapperConfig::default()
    };
    let ds = planted_dataset(&cfg);
    let k = FeatureName::ALL.len();
    let sel = forward_select(&FeatureName::ALL, &ds, &cfg).unwrap();
    let mut history = vec![sel.baseline];
    history.extend(sel.accepted_history());
    let increasing = history.windows(2).all(|w| w[1] > w[0]);
    let planted_first = sel.selected.first() == Some(&FeatureName::SWIR1);
    let bounded = sel.models_trained <= k * (k + 1) / 2;
    let mut detail = format!(
        "planted run: selected {:?}, history {:?}, {} models (max {}); ",
        sel.selected,
        history.iter().map(|h| format!("{h:.3}")).collect::<Vec<_>>(),
        sel.models_trained,
        k * (k + 1) / 2
    );
    let mut pass = increasing && planted_first && bounded;
    match chain {
        Err(e) => {
            detail.push_str(e);
            pass = false;
        }
        Ok(_) => {
            let cm = read_counts_csv(&run.join("evaluation_confusion.csv"));
            let oa = cm.overall_accuracy().unwrap();
            let area = fs::read_to_string(run.join("evaluation_area.csv")).unwrap();
            let mut worst_area: f64 = 0.0;
            for l in area.lines().skip(1) {
                let e: f64 = l.rsplit(',').next().unwrap().parse().unwrap_or(f64::INFINITY);
                worst_area = worst_area.max(e);
            }
            let summary = fs::read_to_string(run.join("selection.txt")).unwrap();
            let chain_models: usize = summary
                .lines()
                .find_map(|l| l.strip_prefix("selected: "))
                .and_then(|l| l.split(", ").nth(1))
                .and_then(|s| s.split_whitespace().next())
                .and_then(|s| s.parse().ok())
                .unwrap_or(usize::MAX);
            pass &= oa >= 0.90 && worst_area <= 0.10 && chain_models <= k * (k + 1) / 2;
            detail.push_str(&format!(
                "default chain: map OA {oa:.4} (min 0.90), worst area difference {:.2}% (max 10%), {chain_models} selection models",
                worst_area * 100.0
            ));
        }
    }
    outcome(pass, detail)
}

fn main() {
    let tmp = tempfile::tempdir().unwrap();
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/default.conf");
    let mut all = true;
    all &= report(1, "metric reproduction", Duration::from_secs(1), c1_metrics);
    all &= report(2, "agreement reproduction", Duration::from_secs(1), c2_agreement);
    all &= report(3, "vegetation index oracle", Duration::from_secs(1), c3_indices);
    all &= report(4, "gradient correctness", Duration::from_secs(120), c4_gradients);
    all &= report(5, "geometry", Duration::from_secs(60), c5_geometry);
    all &= report(6, "determinism", Duration::from_secs(600), || c6_determinism(tmp.path()));

    // Default synthetic chain shared by criteria 7 to 9; stage times count
    // toward each criterion's limit.
    let run = tmp.path().join("default");
    let mut stage = BTreeMap::new();
    let chain: Result<Duration, String> = (|| {
        let start = Instant::now();
        for cmd in CHAIN {
            let t = Instant::now();
            run_cmd(cmd, &root, &run)?;
            stage.insert(cmd, t.elapsed());
        }
        Ok(start.elapsed())
    })();
    let took = |cmds: &[&str]| cmds.iter().filter_map(|c| stage.get(c)).sum::<Duration>();
    let timed = |limit: u64, spent: Duration, f: &dyn Fn() -> Outcome| {
        let mut o = f();
        if spent > Duration::from_secs(limit) {
            o.pass = false;
        }
        o.detail = format!("{}; pipeline stages {:.1}s (limit {limit}s)", o.detail, spent.as_secs_f64());
        o
    };
    let c7 = timed(600, took(&["synth", "train-images"]), &|| c7_images(&run, &chain));
    all &= report(7, "synthetic image classification", Duration::from_secs(600), || c7);
    let c8 = timed(60, took(&["grid", "fetch", "classify-images", "qc", "make-refs", "validate-refs"]), &|| {
        c8_refs(&run, &chain)
    });
    all &= report(8, "synthetic referencing", Duration::from_secs(60), || c8);
    let c9_stages = took(&["select-features", "train-mapper", "map", "evaluate"]);
    all &= report(9, "synthetic mapping and selection", Duration::from_secs(1200), || {
        timed(1200, c9_stages, &|| c9_mapping(&run, &chain))
    });

    if !all {
        std::process::exit(1);
    }
}
