//! Pipeline commands behind the `cropref` binary.

pub mod config;

use std::collections::BTreeSet;
use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use chrono::NaiveDate;
use clap::{Parser, Subcommand};

use cropref_core::cropmapper::{
    build_dataset, evaluate_crop_map, forward_select, parse_legend, predict_crop_map, sweep_dropout, CropMap, MapperConfig,
    PixelDataset, PixelModel,
};
use cropref_core::geocore::{BoundingBox, GeoPoint, Heading, ShiftParams};
use cropref_core::imageclassifier::{
    classify_images, load_catalog_records, load_labeled, qc_filter, read_catalog, read_rejection_list, split_dataset,
    train_image_classifier, write_catalog, CatalogEntry, LabelTaxonomy, LabeledImage,
};
use cropref_core::imagery::{encode_ppm, fetch_street_image, FixtureIndex, ImageSource, ImageryError, StreetRequest};
use cropref_core::metrics::confusion_matrix;
use cropref_core::neuralnet::{deserialize_model, serialize_model, NnError, TrainConfig};
use cropref_core::rasterstack::{
    format_feature_list, parse_feature_list, read_grid, read_manifest_dir, write_grid, FeatureName, SceneStack,
};
use cropref_core::refgen::{
    disagreements_csv, generate_reference_points, read_reference_points, validate_reference_points, write_reference_points,
};
use cropref_core::synthworld::{
    capture_points, generate_world, synthesize_scenes, training_views, write_capture_fixtures, write_scenes, WorldConfig,
};

use config::RunConfig;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_INTERNAL: i32 = 3;

#[derive(Parser, Debug)]
#[command(name = "cropref", version, about = "Street-level ground referencing and pixel-based crop mapping")]
struct Cli {
    /// Run configuration (`key = value` lines).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run directory holding all stage artifacts.
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug, Clone, Copy, PartialEq, Eq)]
enum Command {
    /// Build a synthetic world: truth raster, scenes, street fixtures, training images.
    Synth,
    /// Write the sampling grid of capture points.
    Grid,
    /// Retrieve four street images per grid point.
    Fetch,
    /// Train the street image classifier on the hand-labeled catalog.
    TrainImages,
    /// Label fetched images with the trained classifier.
    ClassifyImages,
    /// Drop rejected, "others" and low-confidence images.
    Qc,
    /// Shift kept images into their parcels as reference points.
    MakeRefs,
    /// Compare reference points against the truth raster.
    ValidateRefs,
    /// Greedy forward selection of temporal features.
    SelectFeatures,
    /// Train the pixel classifier with a dropout sweep.
    TrainMapper,
    /// Predict a crop map over the scene extent.
    Map,
    /// Compare the crop map with the truth raster.
    Evaluate,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Synth => "synth",
            Command::Grid => "grid",
            Command::Fetch => "fetch",
            Command::TrainImages => "train-images",
            Command::ClassifyImages => "classify-images",
            Command::Qc => "qc",
            Command::MakeRefs => "make-refs",
            Command::ValidateRefs => "validate-refs",
            Command::SelectFeatures => "select-features",
            Command::TrainMapper => "train-mapper",
            Command::Map => "map",
            Command::Evaluate => "evaluate",
        }
    }
}

/// Errors that are the user's fault at the command line.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn exit_code(e: &anyhow::Error) -> i32 {
    if e.chain().any(|c| c.is::<UsageError>()) {
        return EXIT_USAGE;
    }
    let internal = e.chain().any(|c| matches!(c.downcast_ref::<NnError>(), Some(NnError::Diverged { .. })));
    if internal {
        EXIT_INTERNAL
    } else {
        EXIT_DATA
    }
}

/// Parses arguments, runs one command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match std::panic::catch_unwind(|| execute(&cli)) {
        Ok(Ok(())) => EXIT_OK,
        Ok(Err(e)) => {
            eprintln!("error: {e:#}");
            exit_code(&e)
        }
        Err(_) => {
            eprintln!("error: internal failure in {}", cli.command.name());
            EXIT_INTERNAL
        }
    }
}

fn execute(cli: &Cli) -> Result<()> {
    let cfg = match &cli.config {
        Some(p) => RunConfig::load(p, cli.seed)?,
        None => RunConfig::parse("", None, cli.seed).map_err(|e| UsageError(e.to_string()))?,
    };
    fs::create_dir_all(&cli.out).with_context(|| format!("creating {}", cli.out.display()))?;
    let mut run = Run {
        command: cli.command.name(),
        cfg,
        dir: cli.out.clone(),
        inputs: Vec::new(),
        outputs: Vec::new(),
    };
    match cli.command {
        Command::Synth => synth(&mut run)?,
        Command::Grid => grid(&mut run)?,
        Command::Fetch => fetch(&mut run)?,
        Command::TrainImages => train_images(&mut run)?,
        Command::ClassifyImages => classify(&mut run)?,
        Command::Qc => qc(&mut run)?,
        Command::MakeRefs => make_refs(&mut run)?,
        Command::ValidateRefs => validate_refs(&mut run)?,
        Command::SelectFeatures => select_features(&mut run)?,
        Command::TrainMapper => train_mapper(&mut run)?,
        Command::Map => map(&mut run)?,
        Command::Evaluate => evaluate(&mut run)?,
    }
    run.write_manifest()
}

/// One command invocation: config, run directory and the files it touched.
struct Run {
    command: &'static str,
    cfg: RunConfig,
    dir: PathBuf,
    inputs: Vec<String>,
    outputs: Vec<String>,
}

impl Run {
    fn rel(&self, p: &Path) -> String {
        p.strip_prefix(&self.dir).unwrap_or(p).display().to_string()
    }

    /// Resolves a path key and checks that it exists.
    fn input_path(&mut self, key: &str) -> Result<PathBuf> {
        let p = self
            .cfg
            .path(key, &self.dir)
            .ok_or_else(|| anyhow!("{key} is not set"))?;
        self.input(&p)?;
        Ok(p)
    }

    /// Records an input file in the run directory; it must exist.
    fn input(&mut self, p: &Path) -> Result<()> {
        if !p.exists() {
            bail!("missing input {}", p.display());
        }
        self.inputs.push(self.rel(p));
        Ok(())
    }

    fn artifact(&mut self, name: &str) -> Result<PathBuf> {
        self.input(&self.dir.join(name))?;
        Ok(self.dir.join(name))
    }

    fn output(&mut self, p: &Path) -> PathBuf {
        self.outputs.push(self.rel(p));
        p.to_path_buf()
    }

    fn output_name(&mut self, name: &str) -> PathBuf {
        let p = self.dir.join(name);
        self.output(&p)
    }

    fn write(&mut self, name: &str, text: &str) -> Result<()> {
        let p = self.output_name(name);
        fs::write(&p, text).with_context(|| format!("writing {}", p.display()))
    }

    fn taxonomy(&self) -> Result<LabelTaxonomy> {
        Ok(LabelTaxonomy::for_region(self.cfg.str("region"))?)
    }

    fn train_config(&self, section: &str, dropout: f64) -> Result<TrainConfig> {
        let c = &self.cfg;
        Ok(TrainConfig {
            epochs: c.get(&format!("{section}.epochs"))?,
            learning_rate: c.get(&format!("{section}.learning_rate"))?,
            momentum: c.get(&format!("{section}.momentum"))?,
            batch_size: c.get(&format!("{section}.batch_size"))?,
            dropout_rate: dropout,
            seed: c.seed,
        })
    }

    fn write_manifest(&self) -> Result<()> {
        let dir = self.dir.join("manifests");
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        let mut s = format!(
            "command = {}\nconfig_sha256 = {}\nseed = {}\n",
            self.command,
            self.cfg.sha256(),
            self.cfg.seed
        );
        for i in &self.inputs {
            let _ = writeln!(s, "input = {i}");
        }
        for o in &self.outputs {
            let _ = writeln!(s, "output = {o}");
        }
        s.push_str("\n[config]\n");
        s.push_str(&self.cfg.canonical());
        let p = dir.join(format!("{}.manifest", self.command));
        fs::write(&p, s).with_context(|| format!("writing {}", p.display()))
    }
}

fn parse_bbox(s: &str) -> Result<BoundingBox> {
    let v: Vec<f64> = s
        .split(',')
        .map(|t| t.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|_| anyhow!("bbox {s:?}: expected min_lat,max_lat,min_lon,max_lon"))?;
    if v.len() != 4 {
        bail!("bbox {s:?}: expected 4 numbers");
    }
    Ok(BoundingBox::new(v[0], v[1], v[2], v[3])?)
}

fn world_config(run: &Run) -> Result<WorldConfig> {
    let c = &run.cfg;
    let taxonomy = run.taxonomy()?;
    let k = taxonomy.len();
    let first: NaiveDate = c.get("synth.first_date")?;
    let step: i64 = c.get("synth.date_step_days")?;
    let n: i64 = c.get("synth.dates")?;
    let mut proportions: Vec<f64> = c.list("synth.proportions")?;
    if proportions.is_empty() {
        proportions = vec![1.0 / k as f64; k];
    }
    Ok(WorldConfig {
        origin: GeoPoint::new(c.get("synth.origin_lat")?, c.get("synth.origin_lon")?)?,
        rows: c.get("synth.rows")?,
        cols: c.get("synth.cols")?,
        cell_m: c.get("synth.cell_m")?,
        parcel_cells: c.get("synth.parcel_cells")?,
        road_width_y_m: c.get("shift.road_width_y_m")?,
        proportions,
        scene_dates: (0..n).map(|i| first + chrono::Duration::days(step * i)).collect(),
        noise_sigma: c.get("synth.noise_sigma")?,
        cloud_fraction: c.get("synth.cloud_fraction")?,
        jitter_days: c.get("synth.jitter_days")?,
        jitter_scale: c.get("synth.jitter_scale")?,
        quantum: 1e-4,
        view_range_cells: c.get("synth.view_range_cells")?,
        seed: c.seed,
        ..WorldConfig::default_for(taxonomy, c.seed)
    })
}

fn grid_bbox(run: &Run) -> Result<BoundingBox> {
    match run.cfg.str("grid.bbox") {
        "synth" => Ok(world_config(run)?.cell_center_bbox()?),
        s => parse_bbox(s),
    }
}

/// Removes files with the given extensions so stale outputs cannot linger.
fn clear_files(dir: &Path, exts: &[&str]) -> Result<()> {
    if !dir.is_dir() {
        return Ok(());
    }
    for e in fs::read_dir(dir).with_context(|| format!("listing {}", dir.display()))? {
        let p = e?.path();
        if p.extension().and_then(|x| x.to_str()).is_some_and(|x| exts.contains(&x)) {
            fs::remove_file(&p).with_context(|| format!("removing {}", p.display()))?;
        }
    }
    Ok(())
}

fn synth(run: &mut Run) -> Result<()> {
    let wc = world_config(run)?;
    let world = generate_world(&wc)?;
    let taxonomy = wc.taxonomy.clone();
    let c = run.cfg.clone();
    let seed = c.seed;

    let world_dir = c.path("synth.dir", &run.dir).ok_or_else(|| anyhow!("synth.dir is not set"))?;
    fs::create_dir_all(&world_dir).with_context(|| format!("creating {}", world_dir.display()))?;
    let truth = c.path("paths.truth", &run.dir).ok_or_else(|| anyhow!("paths.truth is not set"))?;
    if let Some(parent) = truth.parent() {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    write_grid(&world.truth, run.output(&truth))?;
    let legend = truth.with_extension("legend");
    fs::write(run.output(&legend), taxonomy.legend()).with_context(|| format!("writing {}", legend.display()))?;
    write_grid(&world.road, run.output(&world_dir.join("road.asc")))?;

    let scenes_dir = c.path("paths.scenes", &run.dir).ok_or_else(|| anyhow!("paths.scenes is not set"))?;
    clear_files(&scenes_dir, &["asc", "scene"])?;
    let scenes = synthesize_scenes(&world)?;
    let manifests = write_scenes(&scenes_dir, &scenes)?;
    run.output(&scenes_dir);

    let fixtures = c.path("paths.fixtures", &run.dir).ok_or_else(|| anyhow!("paths.fixtures is not set"))?;
    clear_files(&fixtures, &["ppm", "meta"])?;
    let points = capture_points(&world, &grid_bbox(run)?, c.get("grid.spacing_m")?, c.get("synth.capture_margin_cells")?)?;
    let size: usize = c.get("synth.image_size")?;
    let n_fixtures = write_capture_fixtures(
        &world,
        &fixtures,
        &points,
        size,
        c.get("synth.capture_date")?,
        c.get("synth.fixture_jitter_m")?,
        seed ^ 0xF1C7,
    )?;
    run.output(&fixtures);

    let catalog = c
        .path("paths.training_catalog", &run.dir)
        .ok_or_else(|| anyhow!("paths.training_catalog is not set"))?;
    let catalog_dir = catalog.parent().unwrap_or(&run.dir).to_path_buf();
    let train_dir = catalog_dir.join("train");
    fs::create_dir_all(&train_dir).with_context(|| format!("creating {}", train_dir.display()))?;
    clear_files(&train_dir, &["ppm"])?;
    let views = training_views(&world, c.get("synth.train_images_per_class")?, size, seed ^ 0x7EA1)?;
    let mut entries = Vec::with_capacity(views.len());
    for (rec, class) in &views {
        let rel = PathBuf::from("train").join(format!("{}.ppm", rec.id));
        let path = catalog_dir.join(&rel);
        fs::write(&path, encode_ppm(&rec.image)).with_context(|| format!("writing {}", path.display()))?;
        entries.push(CatalogEntry {
            id: rec.id.clone(),
            path: rel,
            label: Some(taxonomy.name(*class).to_string()),
            confidence: None,
            point: rec.capture_point,
            heading: rec.heading,
            date: rec.capture_date,
        });
    }
    write_catalog(run.output(&catalog).as_path(), &entries)?;
    run.output(&train_dir);

    let mut per_class = vec![0usize; taxonomy.len()];
    for p in &world.parcels {
        per_class[p.class] += 1;
    }
    let mut summary = format!(
        "world {}x{} cells, {} parcels, {} scenes, {} capture points, {} fixtures, {} training images\n",
        wc.rows,
        wc.cols,
        world.parcels.len(),
        manifests.len(),
        points.len(),
        n_fixtures,
        entries.len()
    );
    for (i, n) in per_class.iter().enumerate() {
        let _ = writeln!(summary, "  {:<10} {n} parcels", taxonomy.name(i));
    }
    print!("{summary}");
    run.write(&format!("{}/world.txt", run.rel(&world_dir)), &summary)
}

const GRID_FILE: &str = "grid.csv";

fn grid(run: &mut Run) -> Result<()> {
    let bbox = grid_bbox(run)?;
    let points = cropref_core::geocore::make_sampling_grid(&bbox, run.cfg.get("grid.spacing_m")?)?;
    let mut s = String::from("lat,lon\n");
    for p in &points {
        let _ = writeln!(s, "{:.7},{:.7}", p.lat_deg, p.lon_deg);
    }
    run.write(GRID_FILE, &s)?;
    println!("{} sampling points", points.len());
    Ok(())
}

fn read_points(path: &Path) -> Result<Vec<GeoPoint>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut lines = text.lines();
    if lines.next() != Some("lat,lon") {
        bail!("{}: expected header lat,lon", path.display());
    }
    lines
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| {
            let bad = || anyhow!("{}: line {}: bad point {l:?}", path.display(), n + 2);
            let (a, b) = l.split_once(',').ok_or_else(bad)?;
            let lat = a.trim().parse().map_err(|_| bad())?;
            let lon = b.trim().parse().map_err(|_| bad())?;
            GeoPoint::new(lat, lon).map_err(|_| bad())
        })
        .collect()
}

const IMAGES_DIR: &str = "images";
const IMAGES_CATALOG: &str = "images.csv";

fn fetch(run: &mut Run) -> Result<()> {
    let grid = run.artifact(GRID_FILE)?;
    let points = read_points(&grid)?;
    let size: u32 = run.cfg.get("fetch.size")?;
    let source = match run.cfg.str("fetch.source") {
        "fixtures" => ImageSource::Fixtures(FixtureIndex::open(run.input_path("paths.fixtures")?)?),
        #[cfg(feature = "live")]
        "live" => ImageSource::Live,
        other => return Err(UsageError(format!("fetch.source {other:?} is not available in this build")).into()),
    };
    let dir = run.dir.join(IMAGES_DIR);
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    clear_files(&dir, &["ppm"])?;
    let mut seen = BTreeSet::new();
    let mut entries = Vec::new();
    let mut missing = 0;
    for p in &points {
        for h in Heading::ALL {
            let req = StreetRequest::new(*p, h, size, size)?;
            let rec = match fetch_street_image(&req, &source) {
                Ok(r) => r,
                Err(ImageryError::NotFound { .. }) => {
                    missing += 1;
                    continue;
                }
                Err(e) => return Err(e.into()),
            };
            if !seen.insert(rec.id.clone()) {
                continue;
            }
            let rel = PathBuf::from(IMAGES_DIR).join(format!("{}.ppm", rec.id));
            let path = run.dir.join(&rel);
            fs::write(&path, encode_ppm(&rec.image)).with_context(|| format!("writing {}", path.display()))?;
            entries.push(CatalogEntry {
                id: rec.id,
                path: rel,
                label: None,
                confidence: None,
                point: rec.capture_point,
                heading: rec.heading,
                date: rec.capture_date,
            });
        }
    }
    let catalog = run.output_name(IMAGES_CATALOG);
    run.output_name(IMAGES_DIR);
    write_catalog(&catalog, &entries)?;
    println!(
        "{} images from {} points ({} views without imagery)",
        entries.len(),
        points.len(),
        missing
    );
    Ok(())
}

const IMAGE_MODEL: &str = "image_model.rtnn";

fn train_images(run: &mut Run) -> Result<()> {
    let taxonomy = run.taxonomy()?;
    let catalog = run.input_path("paths.training_catalog")?;
    let base = catalog.parent().unwrap_or(Path::new(".")).to_path_buf();
    let labeled = load_labeled(&read_catalog(&catalog)?, &base, &taxonomy)?;
    let ratios: Vec<f64> = run.cfg.list("images.split")?;
    if ratios.len() != 3 {
        bail!("images.split needs three ratios");
    }
    let split = split_dataset(&labeled, |li| li.label, (ratios[0], ratios[1], ratios[2]), run.cfg.seed)?;
    let tc = run.train_config("images", run.cfg.get("images.dropout")?)?;
    let (net, history) = train_image_classifier(&split.train, &split.val, &taxonomy, &tc)?;
    serialize_model(&net, run.output_name(IMAGE_MODEL))?;

    let test_records: Vec<_> = split.test.iter().map(|li| li.record.clone()).collect();
    let preds: Vec<usize> = classify_images(&net, &test_records)?.iter().map(|li| li.label).collect();
    let truth: Vec<usize> = split.test.iter().map(|li| li.label).collect();
    let cm = confusion_matrix(&preds, &truth, taxonomy.classes())?;
    let oa = cm.overall_accuracy()?;

    let mut report = format!(
        "images: {} train, {} validation, {} test\n\nepoch  train_loss  train_acc  val_acc\n",
        split.train.len(),
        split.val.len(),
        split.test.len()
    );
    for e in &history.epochs {
        let _ = writeln!(
            report,
            "{:>5}  {:>10.6}  {:>9.4}  {:>7.4}",
            e.epoch, e.train_loss, e.train_accuracy, e.val_accuracy
        );
    }
    let _ = write!(report, "\ntest confusion (rows predicted, columns reference)\n{}", cm.to_table());
    let _ = writeln!(report, "test overall accuracy {oa:.4}");
    run.write("image_training.txt", &report)?;
    run.write("image_test_accuracy.csv", &cm.to_csv())?;
    run.write("image_test_confusion.csv", &cm.counts_csv())?;
    println!("image classifier test OA {oa:.4} on {} images", split.test.len());
    Ok(())
}

const LABELED_CATALOG: &str = "labeled.csv";

fn classify(run: &mut Run) -> Result<()> {
    let taxonomy = run.taxonomy()?;
    let net = deserialize_model(run.artifact(IMAGE_MODEL)?)?;
    if net.classes() != taxonomy.len() {
        bail!(
            "{IMAGE_MODEL} predicts {} classes but region {} has {}",
            net.classes(),
            taxonomy.region(),
            taxonomy.len()
        );
    }
    let catalog = run.artifact(IMAGES_CATALOG)?;
    let entries = read_catalog(&catalog)?;
    let records = load_catalog_records(&entries, &run.dir)?;
    let labeled = classify_images(&net, &records)?;
    let out: Vec<CatalogEntry> = entries
        .iter()
        .zip(&labeled)
        .map(|(e, li)| CatalogEntry::for_image(li, e.path.clone(), &taxonomy))
        .collect();
    write_catalog(&run.output_name(LABELED_CATALOG), &out)?;
    let mut counts = vec![0usize; taxonomy.len()];
    for li in &labeled {
        counts[li.label] += 1;
    }
    println!("classified {} images", labeled.len());
    for (i, n) in counts.iter().enumerate() {
        println!("  {:<10} {n}", taxonomy.name(i));
    }
    Ok(())
}

const KEPT_CATALOG: &str = "kept.csv";
const DROPPED_LIST: &str = "dropped.csv";

fn qc(run: &mut Run) -> Result<()> {
    let taxonomy = run.taxonomy()?;
    let catalog = run.artifact(LABELED_CATALOG)?;
    let entries = read_catalog(&catalog)?;
    let labeled = load_labeled(&entries, &run.dir, &taxonomy)?;
    let rejections = match run.cfg.path("paths.rejections", &run.dir) {
        Some(p) => {
            run.input(&p)?;
            read_rejection_list(&p)?
        }
        None => BTreeSet::new(),
    };
    let outcome = qc_filter(labeled, &taxonomy, run.cfg.get("qc.min_confidence")?, &rejections)?;
    let path_of = |id: &str| entries.iter().find(|e| e.id == id).map(|e| e.path.clone()).unwrap();
    let kept: Vec<CatalogEntry> = outcome
        .kept
        .iter()
        .map(|li| CatalogEntry::for_image(li, path_of(&li.record.id), &taxonomy))
        .collect();
    write_catalog(&run.output_name(KEPT_CATALOG), &kept)?;
    let mut dropped = String::from("id,reason\n");
    for (li, reason) in &outcome.dropped {
        let _ = writeln!(dropped, "{},{}", li.record.id, reason.as_str());
    }
    run.write(DROPPED_LIST, &dropped)?;
    println!("kept {} images, dropped {}", outcome.kept.len(), outcome.dropped.len());
    for id in &outcome.unmatched_rejections {
        println!("  rejection id {id} matched no image");
    }
    Ok(())
}

fn read_dropped(path: &Path) -> Result<Vec<(String, String)>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut lines = text.lines();
    if lines.next() != Some("id,reason") {
        bail!("{}: expected header id,reason", path.display());
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            l.split_once(',')
                .map(|(a, b)| (a.to_string(), b.to_string()))
                .ok_or_else(|| anyhow!("{}: bad line {l:?}", path.display()))
        })
        .collect()
}

const REFPOINTS: &str = "refpoints.csv";

fn make_refs(run: &mut Run) -> Result<()> {
    let taxonomy = run.taxonomy()?;
    let kept_path = run.artifact(KEPT_CATALOG)?;
    let mut images: Vec<LabeledImage> = load_labeled(&read_catalog(&kept_path)?, &run.dir, &taxonomy)?;
    if run.cfg.flag("refs.include_others")? {
        let dropped = read_dropped(&run.artifact(DROPPED_LIST)?)?;
        let others: BTreeSet<&str> = dropped
            .iter()
            .filter(|(_, r)| r == "others")
            .map(|(id, _)| id.as_str())
            .collect();
        let labeled = read_catalog(&run.artifact(LABELED_CATALOG)?)?;
        let chosen: Vec<CatalogEntry> = labeled.into_iter().filter(|e| others.contains(e.id.as_str())).collect();
        images.extend(load_labeled(&chosen, &run.dir, &taxonomy)?);
    }
    let sp = ShiftParams::new(
        run.cfg.get("shift.road_width_y_m")?,
        run.cfg.get("shift.pixel_size_x_m")?,
        0,
    )?;
    let min: usize = run.cfg.get("refs.min_per_class")?;
    let out = generate_reference_points(&images, &sp, min, taxonomy.len())?;
    write_reference_points(&run.output_name(REFPOINTS), &out.points, &taxonomy)?;
    let mut report = format!(
        "{} reference points from {} images (shift {:.1} m, minimum {min} per class)\n",
        out.points.len(),
        images.len(),
        sp.distance_m()
    );
    for c in 0..taxonomy.len() {
        let n = out.points.iter().filter(|p| p.label == c).count();
        let extra = out.points.iter().filter(|p| p.label == c && p.extra_steps > 0).count();
        let _ = writeln!(report, "  {:<10} {n:>6} points ({extra} from extra steps)", taxonomy.name(c));
    }
    for s in &out.shortfalls {
        let _ = writeln!(
            report,
            "  shortfall: {} has {} of {} points",
            taxonomy.name(s.class),
            s.produced,
            s.wanted
        );
    }
    print!("{report}");
    run.write("refs_report.txt", &report)
}

fn validate_refs(run: &mut Run) -> Result<()> {
    let taxonomy = run.taxonomy()?;
    let points = read_reference_points(&run.artifact(REFPOINTS)?, &taxonomy)?;
    let truth = read_grid(run.input_path("paths.truth")?)?;
    let (report, disagreements) = validate_reference_points(&points, &truth, &taxonomy)?;
    run.write("refs_agreement.csv", &report.to_csv())?;
    run.write("refs_disagreements.csv", &disagreements_csv(&disagreements, &taxonomy))?;
    print!("{}", report.to_table());
    Ok(())
}

fn load_scenes(run: &mut Run) -> Result<SceneStack> {
    let dir = run.input_path("paths.scenes")?;
    let manifests = read_manifest_dir(&dir)?;
    Ok(SceneStack::load(&manifests, run.cfg.get("scenes.reflectance_scale")?)?)
}

fn mapper_config(run: &Run, dropout: f64) -> Result<MapperConfig> {
    Ok(MapperConfig {
        train: run.train_config("mapper", dropout)?,
        max_per_class: run.cfg.get("mapper.max_per_class")?,
        holdout: run.cfg.get("mapper.holdout")?,
        min_per_class: run.cfg.get("mapper.min_per_class")?,
    })
}

fn pixel_dataset(run: &mut Run, mc: &MapperConfig) -> Result<PixelDataset> {
    let taxonomy = run.taxonomy()?;
    let points = read_reference_points(&run.artifact(REFPOINTS)?, &taxonomy)?;
    let scenes = load_scenes(run)?;
    Ok(build_dataset(&points, &scenes, taxonomy.classes(), mc)?)
}

const SELECTED_FEATURES: &str = "selected_features.txt";

fn select_features(run: &mut Run) -> Result<()> {
    let mc = mapper_config(run, run.cfg.get("mapper.selection_dropout")?)?;
    let ds = pixel_dataset(run, &mc)?;
    let candidates = parse_feature_list(run.cfg.str("mapper.candidates"))?;
    let result = forward_select(&candidates, &ds, &mc)?;
    let report = format!("{}\n\n{}", ds.report.summary(), result.to_table());
    run.write("selection.txt", &report)?;
    run.write(SELECTED_FEATURES, &format!("{}\n", format_feature_list(&result.selected)))?;
    print!("{report}");
    Ok(())
}

const PIXEL_MODEL: &str = "pixel_model.cropmap";

fn train_mapper(run: &mut Run) -> Result<()> {
    let features: Vec<FeatureName> = match run.cfg.str("mapper.features") {
        "" => {
            let p = run.artifact(SELECTED_FEATURES)?;
            let text = fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?;
            parse_feature_list(text.trim())?
        }
        s => parse_feature_list(s)?,
    };
    if features.is_empty() {
        bail!("no features selected; set mapper.features or rerun select-features");
    }
    let mc = mapper_config(run, 0.0)?;
    let ds = pixel_dataset(run, &mc)?;
    let rates: Vec<f64> = run.cfg.list("mapper.dropout_rates")?;
    let (rate, trained, scores) = sweep_dropout(&features, &ds, &mc, &rates)?;
    trained.model.save(&run.output_name(PIXEL_MODEL))?;
    let mut report = format!("features {}\n{}\n\ndropout  val_acc\n", format_feature_list(&features), ds.report.summary());
    for (r, a) in &scores {
        let _ = writeln!(report, "{r:>7.2}  {a:.4}");
    }
    let _ = write!(
        report,
        "chosen dropout {rate:.2}\n\nheld-out confusion (rows predicted, columns reference)\n{}",
        trained.heldout.to_table()
    );
    let _ = writeln!(report, "held-out overall accuracy {:.4}", trained.val_accuracy);
    run.write("mapper_report.txt", &report)?;
    run.write("mapper_heldout_accuracy.csv", &trained.heldout.to_csv())?;
    print!("{report}");
    Ok(())
}

const CROP_MAP: &str = "crop_map.asc";

fn map(run: &mut Run) -> Result<()> {
    let model = PixelModel::load(&run.artifact(PIXEL_MODEL)?)?;
    let scenes = load_scenes(run)?;
    let extent = match run.cfg.str("map.bbox") {
        "" => None,
        s => Some(parse_bbox(s)?),
    };
    let map = predict_crop_map(&model, &scenes, extent.as_ref())?;
    let path = run.output_name(CROP_MAP);
    let legend = map.write(&path)?;
    run.output(&legend);
    let counts = cropref_core::metrics::area_counts(&map.grid, map.classes.len())?;
    println!("mapped {} cells", counts.iter().sum::<u64>());
    for (c, n) in map.classes.iter().zip(&counts) {
        println!("  {c:<10} {n}");
    }
    Ok(())
}

fn evaluate(run: &mut Run) -> Result<()> {
    let map_path = run.artifact(CROP_MAP)?;
    let legend_path = cropref_core::cropmapper::legend_path(&map_path);
    run.input(&legend_path)?;
    let classes = parse_legend(&fs::read_to_string(&legend_path).with_context(|| format!("reading {}", legend_path.display()))?)?;
    let taxonomy = run.taxonomy()?;
    if classes != taxonomy.classes() {
        bail!("{} classes do not match region {}", legend_path.display(), taxonomy.region());
    }
    let map = CropMap {
        grid: read_grid(&map_path)?,
        classes,
    };
    let truth = read_grid(run.input_path("paths.truth")?)?;
    let ev = evaluate_crop_map(&map, &truth)?;
    let oa = ev.confusion.overall_accuracy()?;
    let mut report = format!("confusion (rows mapped, columns truth)\n{}", ev.confusion.to_table());
    let _ = write!(report, "overall accuracy {oa:.4}\n\n{}", ev.area_table(&map.classes));
    run.write("evaluation.txt", &report)?;
    run.write("evaluation_accuracy.csv", &ev.confusion.to_csv())?;
    run.write("evaluation_confusion.csv", &ev.confusion.counts_csv())?;
    run.write("evaluation_area.csv", &ev.area_table(&map.classes))?;
    print!("{report}");
    Ok(())
}
