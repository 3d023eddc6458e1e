//! Pixel classification from reference points: dataset assembly, greedy
//! forward feature selection, training, map prediction and evaluation.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::geocore::BoundingBox;
use crate::metrics::{area_counts, class_at, AgreementReport, ConfusionMatrix, MetricsError};
use crate::neuralnet::{self, Network, NetworkSpec, NnError, Sample, Shape, Tensor, TrainConfig, TrainHistory};
use crate::rasterstack::{
    format_feature_list, parse_feature_list, write_grid, FeatureName, FeatureStack, RasterError, RasterGrid,
    SceneStack, DEFAULT_NODATA,
};
use crate::refgen::ReferencePoint;

/// Magic line of a pixel-model file.
pub const PIXEL_MODEL_MAGIC: &str = "CROPMAP1";

#[derive(Debug, Error)]
pub enum MapperError {
    #[error("class {class:?} has {count} usable points; at least {min} are needed")]
    TooFewPoints { class: String, count: usize, min: usize },
    #[error("class {0:?} has no samples in the training split")]
    ClassMissingFromTrain(String),
    #[error("need at least 2 candidate features, got {0}")]
    TooFewCandidates(usize),
    #[error("feature {0} is not in the dataset")]
    MissingFeature(FeatureName),
    #[error("invalid mapper config: {0}")]
    Config(String),
    #[error("scene stack has {got} dates but the model was trained on {expected}")]
    TimeMismatch { got: usize, expected: usize },
    #[error("model file: {0}")]
    Format(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error(transparent)]
    Network(#[from] NnError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MapperConfig {
    pub train: TrainConfig,
    /// Points kept per class after pixel de-duplication (seeded subsample).
    pub max_per_class: usize,
    /// Share of each class held out for validation.
    pub holdout: f64,
    pub min_per_class: usize,
}

impl Default for MapperConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            max_per_class: 150,
            holdout: 0.2,
            min_per_class: 5,
        }
    }
}

impl MapperConfig {
    fn validate(&self) -> Result<(), MapperError> {
        self.train.validate()?;
        if !(self.holdout > 0.0 && self.holdout < 1.0) {
            return Err(MapperError::Config(format!("holdout {} outside (0, 1)", self.holdout)));
        }
        if self.min_per_class < 2 {
            return Err(MapperError::Config("min_per_class must be >= 2".into()));
        }
        if self.max_per_class < self.min_per_class {
            return Err(MapperError::Config("max_per_class below min_per_class".into()));
        }
        Ok(())
    }
}

/// Labeled pixel stacks carrying every feature, split once into training and
/// validation parts.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelDataset {
    pub classes: Vec<String>,
    pub stacks: Vec<FeatureStack>,
    pub labels: Vec<usize>,
    pub cells: Vec<(usize, usize)>,
    pub train_idx: Vec<usize>,
    pub val_idx: Vec<usize>,
    pub report: DatasetReport,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DatasetReport {
    pub input_points: usize,
    pub outside_extent: usize,
    pub duplicate_pixels: usize,
    pub unusable: usize,
    pub capped: usize,
}

impl DatasetReport {
    pub fn summary(&self) -> String {
        format!(
            "{} points: {} outside the scenes, {} duplicate pixels, {} unusable pixels, {} dropped by the per-class cap",
            self.input_points, self.outside_extent, self.duplicate_pixels, self.unusable, self.capped
        )
    }
}

impl PixelDataset {
    /// Assembles a dataset from existing stacks and splits it.
    pub fn from_stacks(
        classes: &[String],
        stacks: Vec<FeatureStack>,
        labels: Vec<usize>,
        cells: Vec<(usize, usize)>,
        cfg: &MapperConfig,
    ) -> Result<Self, MapperError> {
        cfg.validate()?;
        let k = classes.len();
        let mut counts = vec![0usize; k];
        for &l in &labels {
            if l >= k {
                return Err(NnError::Label { label: l, classes: k }.into());
            }
            counts[l] += 1;
        }
        for (c, &n) in counts.iter().enumerate() {
            if n < cfg.min_per_class {
                return Err(MapperError::TooFewPoints {
                    class: classes[c].clone(),
                    count: n,
                    min: cfg.min_per_class,
                });
            }
        }
        let (train_idx, val_idx) = stratified_holdout(&labels, k, cfg.holdout, cfg.train.seed);
        Ok(Self {
            classes: classes.to_vec(),
            stacks,
            labels,
            cells,
            train_idx,
            val_idx,
            report: DatasetReport::default(),
        })
    }

    pub fn times(&self) -> usize {
        self.stacks.first().map_or(0, |s| s.times)
    }

    fn samples(&self, idx: &[usize], features: &[FeatureName], norm: &Normalizer) -> Result<Vec<Sample>, MapperError> {
        idx.iter()
            .map(|&i| {
                let s = self.stacks[i]
                    .select(features)
                    .ok_or_else(|| MapperError::MissingFeature(features[0]))?;
                Ok(Sample {
                    input: norm.tensor(&s),
                    label: self.labels[i],
                })
            })
            .collect()
    }

    fn majority_baseline(&self) -> f64 {
        let mut counts = vec![0usize; self.classes.len()];
        for &i in &self.train_idx {
            counts[self.labels[i]] += 1;
        }
        let majority = (0..counts.len()).max_by_key(|&c| (counts[c], std::cmp::Reverse(c))).unwrap();
        self.val_idx.iter().filter(|&&i| self.labels[i] == majority).count() as f64 / self.val_idx.len() as f64
    }
}

/// Per-class seeded holdout; each class keeps at least one sample on each side.
fn stratified_holdout(labels: &[usize], classes: usize, holdout: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x005E_ED0F_5917);
    let mut is_val = vec![false; labels.len()];
    for c in 0..classes {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        if idx.len() < 2 {
            continue;
        }
        idx.shuffle(&mut rng);
        let n_val = ((holdout * idx.len() as f64).round() as usize).clamp(1, idx.len() - 1);
        for &i in &idx[..n_val] {
            is_val[i] = true;
        }
    }
    let (val, train): (Vec<usize>, Vec<usize>) = (0..labels.len()).partition(|&i| is_val[i]);
    (train, val)
}

/// Extracts all candidate features at every reference point. Points outside
/// the scenes, repeated pixels (first point wins) and all-masked pixels are
/// dropped and counted; classes above `max_per_class` are subsampled.
pub fn build_dataset(
    refpoints: &[ReferencePoint],
    scenes: &SceneStack,
    classes: &[String],
    cfg: &MapperConfig,
) -> Result<PixelDataset, MapperError> {
    cfg.validate()?;
    let mut report = DatasetReport {
        input_points: refpoints.len(),
        ..DatasetReport::default()
    };
    let mut seen = BTreeSet::new();
    let mut cells = Vec::new();
    let mut labels = Vec::new();
    for p in refpoints {
        if p.label >= classes.len() {
            return Err(NnError::Label {
                label: p.label,
                classes: classes.len(),
            }
            .into());
        }
        match scenes.geometry().cell_of(p.location) {
            None => report.outside_extent += 1,
            Some(cell) if !seen.insert(cell) => report.duplicate_pixels += 1,
            Some(cell) => {
                cells.push(cell);
                labels.push(p.label);
            }
        }
    }
    let stacks: Vec<Result<FeatureStack, RasterError>> = cells
        .par_iter()
        .map(|&(r, c)| scenes.pixel_stack(r, c, &FeatureName::ALL))
        .collect();
    let mut kept_stacks = Vec::new();
    let mut kept_labels = Vec::new();
    let mut kept_cells = Vec::new();
    for ((s, l), cell) in stacks.into_iter().zip(labels).zip(cells) {
        match s {
            Ok(s) => {
                kept_stacks.push(s);
                kept_labels.push(l);
                kept_cells.push(cell);
            }
            Err(RasterError::UnusablePixel { .. }) => report.unusable += 1,
            Err(e) => return Err(e.into()),
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    let mut keep = vec![true; kept_labels.len()];
    for c in 0..classes.len() {
        let mut idx: Vec<usize> = (0..kept_labels.len()).filter(|&i| kept_labels[i] == c).collect();
        if idx.len() > cfg.max_per_class {
            idx.shuffle(&mut rng);
            for &i in &idx[cfg.max_per_class..] {
                keep[i] = false;
                report.capped += 1;
            }
        }
    }
    let mut stacks = Vec::new();
    let mut labels = Vec::new();
    let mut cells = Vec::new();
    for (i, s) in kept_stacks.into_iter().enumerate() {
        if keep[i] {
            stacks.push(s);
            labels.push(kept_labels[i]);
            cells.push(kept_cells[i]);
        }
    }
    let mut ds = PixelDataset::from_stacks(classes, stacks, labels, cells, cfg)?;
    ds.report = report;
    Ok(ds)
}

/// Per-feature standardisation fitted on training stacks.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalizer {
    fn fit(stacks: &[&FeatureStack]) -> Self {
        let f = stacks[0].features.len();
        let mut sum = vec![0.0; f];
        let mut sq = vec![0.0; f];
        let mut n = 0.0;
        for s in stacks {
            for t in 0..s.times {
                for j in 0..f {
                    let v = s.get(t, j);
                    sum[j] += v;
                    sq[j] += v * v;
                }
                n += 1.0;
            }
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| {
                let var = (q / n - m * m).max(0.0);
                if var > 1e-18 {
                    var.sqrt()
                } else {
                    1.0
                }
            })
            .collect();
        Self { mean, std }
    }

    fn tensor(&self, s: &FeatureStack) -> Tensor {
        let f = s.features.len();
        let values = s
            .matrix
            .iter()
            .enumerate()
            .map(|(i, v)| (v - self.mean[i % f]) / self.std[i % f])
            .collect();
        Tensor::new(Shape::new(1, s.times, f), values).expect("stack values are finite")
    }
}

/// Trained pixel classifier with the feature order and scaling it expects.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelModel {
    pub features: Vec<FeatureName>,
    pub classes: Vec<String>,
    pub normalizer: Normalizer,
    pub net: Network,
}

impl PixelModel {
    pub fn times(&self) -> usize {
        self.net.input_shape().h
    }

    /// Class and confidence for one stack holding at least the model's features.
    pub fn predict(&self, stack: &FeatureStack) -> Result<(usize, f64), MapperError> {
        let s = stack.select(&self.features).ok_or(MapperError::MissingFeature(self.features[0]))?;
        Ok(self.net.predict(&self.normalizer.tensor(&s))?)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let join = |v: &[f64]| v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(",");
        let mut out = format!(
            "{PIXEL_MODEL_MAGIC}\nfeatures {}\nclasses {}\nmean {}\nstd {}\n",
            format_feature_list(&self.features),
            self.classes.join(","),
            join(&self.normalizer.mean),
            join(&self.normalizer.std)
        )
        .into_bytes();
        out.extend(self.net.serialize());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, MapperError> {
        let ferr = |m: &str| MapperError::Format(m.to_string());
        let mut pos = 0;
        let mut lines = Vec::new();
        for _ in 0..5 {
            let end = bytes[pos..]
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| ferr("truncated header"))?;
            lines.push(std::str::from_utf8(&bytes[pos..pos + end]).map_err(|_| ferr("header is not UTF-8"))?);
            pos += end + 1;
        }
        if lines[0] != PIXEL_MODEL_MAGIC {
            return Err(ferr("bad magic"));
        }
        let field = |i: usize, key: &str| -> Result<&str, MapperError> {
            lines[i]
                .strip_prefix(key)
                .and_then(|r| r.strip_prefix(' '))
                .ok_or_else(|| MapperError::Format(format!("expected {key} line")))
        };
        let floats = |s: &str| -> Result<Vec<f64>, MapperError> {
            s.split(',')
                .map(|x| x.parse().map_err(|_| MapperError::Format(format!("bad number {x:?}"))))
                .collect()
        };
        let features = parse_feature_list(field(1, "features")?)?;
        let classes: Vec<String> = field(2, "classes")?.split(',').map(str::to_string).collect();
        let normalizer = Normalizer {
            mean: floats(field(3, "mean")?)?,
            std: floats(field(4, "std")?)?,
        };
        let net = Network::deserialize(&bytes[pos..])?;
        let input = net.input_shape();
        if input.c != 1 || input.w != features.len() || normalizer.mean.len() != features.len()
            || normalizer.std.len() != features.len()
            || net.classes() != classes.len()
        {
            return Err(ferr("header does not match the network"));
        }
        Ok(Self {
            features,
            classes,
            normalizer,
            net,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), MapperError> {
        fs::write(path, self.to_bytes()).map_err(|source| MapperError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, MapperError> {
        let bytes = fs::read(path).map_err(|source| MapperError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedMapper {
    pub model: PixelModel,
    pub history: TrainHistory,
    /// Predictions on the validation split, in `val_idx` order.
    pub heldout_predictions: Vec<usize>,
    pub heldout: ConfusionMatrix,
    pub val_accuracy: f64,
}

fn fit(ds: &PixelDataset, features: &[FeatureName], train: &TrainConfig) -> Result<TrainedMapper, MapperError> {
    if let Some(&f) = features.iter().find(|f| !ds.stacks[0].features.contains(f)) {
        return Err(MapperError::MissingFeature(f));
    }
    let mut present = vec![false; ds.classes.len()];
    for &i in &ds.train_idx {
        present[ds.labels[i]] = true;
    }
    if let Some(c) = present.iter().position(|p| !p) {
        return Err(MapperError::ClassMissingFromTrain(ds.classes[c].clone()));
    }
    let train_stacks: Vec<FeatureStack> = ds
        .train_idx
        .iter()
        .map(|&i| ds.stacks[i].select(features).unwrap())
        .collect();
    let normalizer = Normalizer::fit(&train_stacks.iter().collect::<Vec<_>>());
    let train_set = ds.samples(&ds.train_idx, features, &normalizer)?;
    let val_set = ds.samples(&ds.val_idx, features, &normalizer)?;
    let spec = NetworkSpec::pixel_default(ds.times(), features.len(), ds.classes.len(), train.dropout_rate);
    let mut net = Network::build(spec, train.seed)?;
    let history = neuralnet::train(&mut net, &train_set, &val_set, train)?;
    let inputs: Vec<&Tensor> = val_set.iter().map(|s| &s.input).collect();
    let preds: Vec<usize> = neuralnet::predict_all(&net, &inputs)?.into_iter().map(|p| p.0).collect();
    let truth: Vec<usize> = val_set.iter().map(|s| s.label).collect();
    let heldout = crate::metrics::confusion_matrix(&preds, &truth, &ds.classes)?;
    let val_accuracy = heldout.overall_accuracy()?;
    Ok(TrainedMapper {
        model: PixelModel {
            features: features.to_vec(),
            classes: ds.classes.clone(),
            normalizer,
            net,
        },
        history,
        heldout_predictions: preds,
        heldout,
        val_accuracy,
    })
}

/// Trains the default pixel network on the dataset's training split and
/// scores it on the held-out split.
pub fn train_pixel_classifier(
    features: &[FeatureName],
    ds: &PixelDataset,
    cfg: &MapperConfig,
) -> Result<TrainedMapper, MapperError> {
    cfg.validate()?;
    if features.is_empty() {
        return Err(MapperError::Config("no features selected".into()));
    }
    fit(ds, features, &cfg.train)
}

/// Best rate, its model, and `(rate, validation accuracy)` per rate tried.
pub type DropoutSweep = (f64, TrainedMapper, Vec<(f64, f64)>);

/// Tries each dropout rate and keeps the best validation accuracy; the
/// earliest rate wins ties.
pub fn sweep_dropout(
    features: &[FeatureName],
    ds: &PixelDataset,
    cfg: &MapperConfig,
    rates: &[f64],
) -> Result<DropoutSweep, MapperError> {
    if rates.is_empty() {
        return Err(MapperError::Config("no dropout rates to try".into()));
    }
    let mut scores = Vec::new();
    let mut best: Option<(f64, TrainedMapper)> = None;
    for &rate in rates {
        let c = MapperConfig {
            train: TrainConfig {
                dropout_rate: rate,
                ..cfg.train
            },
            ..*cfg
        };
        let t = train_pixel_classifier(features, ds, &c)?;
        scores.push((rate, t.val_accuracy));
        if best.as_ref().is_none_or(|(_, b)| t.val_accuracy > b.val_accuracy) {
            best = Some((rate, t));
        }
    }
    let (rate, t) = best.unwrap();
    Ok((rate, t, scores))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    NoImprovement,
    Exhausted,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectionStep {
    /// Validation accuracy of the current set plus each remaining candidate,
    /// in enumeration order.
    pub candidates: Vec<(FeatureName, f64)>,
    pub accepted: Option<FeatureName>,
    /// Incumbent accuracy after the step.
    pub incumbent: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSelectionResult {
    pub selected: Vec<FeatureName>,
    pub baseline: f64,
    pub steps: Vec<SelectionStep>,
    pub stop: StopReason,
    pub models_trained: usize,
}

impl FeatureSelectionResult {
    /// Incumbent accuracy after each accepted step.
    pub fn accepted_history(&self) -> Vec<f64> {
        self.steps.iter().filter(|s| s.accepted.is_some()).map(|s| s.incumbent).collect()
    }

    pub fn final_accuracy(&self) -> f64 {
        self.accepted_history().last().copied().unwrap_or(self.baseline)
    }

    /// Every evaluated feature set with its validation accuracy.
    pub fn to_table(&self) -> String {
        let mut s = format!("{:<6} {:<48} {:>8}\n", "step", "features", "val_acc");
        let _ = writeln!(s, "{:<6} {:<48} {:>8.4}", 0, "(majority class)", self.baseline);
        let mut base: Vec<FeatureName> = Vec::new();
        for (i, step) in self.steps.iter().enumerate() {
            for &(f, acc) in &step.candidates {
                let mut set = base.clone();
                set.push(f);
                let mark = if step.accepted == Some(f) { " *" } else { "" };
                let _ = writeln!(s, "{:<6} {:<48} {:>8.4}{mark}", i + 1, format_feature_list(&set), acc);
            }
            if let Some(f) = step.accepted {
                base.push(f);
            }
        }
        let _ = writeln!(
            s,
            "selected: {} ({:.4}, {} models, stop: {})",
            format_feature_list(&self.selected),
            self.final_accuracy(),
            self.models_trained,
            match self.stop {
                StopReason::NoImprovement => "no improvement",
                StopReason::Exhausted => "candidates exhausted",
            }
        );
        s
    }
}

/// Greedy forward selection. Each step trains one model per remaining
/// candidate with the same step seed and keeps the best one only if it beats
/// the incumbent strictly. The incumbent starts at the majority-class
/// validation accuracy.
pub fn forward_select(
    candidates: &[FeatureName],
    ds: &PixelDataset,
    cfg: &MapperConfig,
) -> Result<FeatureSelectionResult, MapperError> {
    cfg.validate()?;
    let mut remaining: Vec<FeatureName> = candidates.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
    if remaining.len() < 2 {
        return Err(MapperError::TooFewCandidates(remaining.len()));
    }
    let baseline = ds.majority_baseline();
    let mut selected: Vec<FeatureName> = Vec::new();
    let mut incumbent = baseline;
    let mut steps = Vec::new();
    let mut models_trained = 0;
    let stop = loop {
        if remaining.is_empty() {
            break StopReason::Exhausted;
        }
        let step_cfg = TrainConfig {
            seed: step_seed(cfg.train.seed, steps.len()),
            ..cfg.train
        };
        let scores: Vec<f64> = remaining
            .par_iter()
            .map(|&f| {
                let mut set = selected.clone();
                set.push(f);
                fit(ds, &set, &step_cfg).map(|t| t.val_accuracy)
            })
            .collect::<Result<_, _>>()?;
        models_trained += remaining.len();
        let mut best = 0;
        for i in 1..scores.len() {
            if scores[i] > scores[best] {
                best = i;
            }
        }
        let candidates: Vec<(FeatureName, f64)> = remaining.iter().copied().zip(scores.iter().copied()).collect();
        if scores[best] > incumbent {
            incumbent = scores[best];
            let f = remaining.remove(best);
            selected.push(f);
            steps.push(SelectionStep {
                candidates,
                accepted: Some(f),
                incumbent,
            });
        } else {
            steps.push(SelectionStep {
                candidates,
                accepted: None,
                incumbent,
            });
            break StopReason::NoImprovement;
        }
    };
    Ok(FeatureSelectionResult {
        selected,
        baseline,
        steps,
        stop,
        models_trained,
    })
}

fn step_seed(seed: u64, step: usize) -> u64 {
    seed.wrapping_add((step as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

#[derive(Debug, Clone, PartialEq)]
pub struct CropMap {
    pub grid: RasterGrid,
    pub classes: Vec<String>,
}

impl CropMap {
    pub fn legend(&self) -> String {
        self.classes.iter().enumerate().map(|(i, c)| format!("{i}={c}\n")).collect()
    }

    /// Writes the grid and an `index=name` legend next to it.
    pub fn write(&self, path: &Path) -> Result<PathBuf, MapperError> {
        write_grid(&self.grid, path)?;
        let legend = legend_path(path);
        fs::write(&legend, self.legend()).map_err(|source| MapperError::Io {
            path: legend.clone(),
            source,
        })?;
        Ok(legend)
    }
}

pub fn legend_path(map_path: &Path) -> PathBuf {
    map_path.with_extension("legend")
}

/// Parses `index=name` legend lines into class names in index order.
pub fn parse_legend(text: &str) -> Result<Vec<String>, MapperError> {
    let mut m = BTreeMap::new();
    for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
        let (i, name) = line
            .split_once('=')
            .ok_or_else(|| MapperError::Format(format!("bad legend line {line:?}")))?;
        let i: usize = i
            .trim()
            .parse()
            .map_err(|_| MapperError::Format(format!("bad legend index {i:?}")))?;
        m.insert(i, name.trim().to_string());
    }
    if m.keys().copied().ne(0..m.len()) {
        return Err(MapperError::Format("legend indices must be 0..n".into()));
    }
    Ok(m.into_values().collect())
}

/// Predicts every pixel whose centre lies in `extent` (all pixels when
/// `None`). All-masked pixels and pixels outside the extent are nodata.
pub fn predict_crop_map(model: &PixelModel, scenes: &SceneStack, extent: Option<&BoundingBox>) -> Result<CropMap, MapperError> {
    if scenes.len() != model.times() {
        return Err(MapperError::TimeMismatch {
            got: scenes.len(),
            expected: model.times(),
        });
    }
    let geo = *scenes.geometry();
    let rows: Vec<Vec<f64>> = (0..geo.nrows)
        .into_par_iter()
        .map(|r| {
            (0..geo.ncols)
                .map(|c| {
                    if extent.is_some_and(|b| !b.contains(geo.cell_center(r, c))) {
                        return Ok(DEFAULT_NODATA);
                    }
                    match scenes.pixel_stack(r, c, &model.features) {
                        Ok(s) => Ok(model.net.predict(&model.normalizer.tensor(&s))?.0 as f64),
                        Err(RasterError::UnusablePixel { .. }) => Ok(DEFAULT_NODATA),
                        Err(e) => Err(e.into()),
                    }
                })
                .collect::<Result<Vec<f64>, MapperError>>()
        })
        .collect::<Result<_, _>>()?;
    let grid = RasterGrid::new(geo, DEFAULT_NODATA, rows.concat())?;
    Ok(CropMap {
        grid,
        classes: model.classes.clone(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct MapEvaluation {
    pub confusion: ConfusionMatrix,
    /// Per mapped class, the share of its cells that the truth agrees with.
    pub agreement: AgreementReport,
    pub map_counts: Vec<u64>,
    pub truth_counts: Vec<u64>,
}

impl MapEvaluation {
    /// Relative difference of mapped vs truth cell counts per class.
    pub fn area_errors(&self) -> Vec<Option<f64>> {
        self.map_counts
            .iter()
            .zip(&self.truth_counts)
            .map(|(&m, &t)| (t > 0).then(|| (m as f64 - t as f64).abs() / t as f64))
            .collect()
    }

    pub fn area_table(&self, classes: &[String]) -> String {
        let mut s = String::from("class,map_cells,truth_cells,relative_difference\n");
        for (i, c) in classes.iter().enumerate() {
            let _ = writeln!(
                s,
                "{c},{},{},{}",
                self.map_counts[i],
                self.truth_counts[i],
                self.area_errors()[i].map_or("NA".into(), |e| format!("{e:.4}"))
            );
        }
        s
    }
}

/// Pixelwise comparison over cells valid in both grids.
pub fn evaluate_crop_map(map: &CropMap, truth: &RasterGrid) -> Result<MapEvaluation, MapperError> {
    map.grid.check_georef(truth)?;
    let k = map.classes.len();
    let mut confusion = ConfusionMatrix::new(&map.classes);
    for r in 0..truth.nrows() {
        for c in 0..truth.ncols() {
            if let (Some(p), Some(t)) = (class_at(&map.grid, r, c)?, class_at(truth, r, c)?) {
                confusion.record(p, t)?;
            }
        }
    }
    let matching: Vec<u64> = (0..k).map(|i| confusion.get(i, i)).collect();
    let totals: Vec<u64> = (0..k).map(|i| confusion.row_sum(i)).collect();
    Ok(MapEvaluation {
        agreement: AgreementReport::from_counts(&map.classes, &matching, &totals),
        map_counts: area_counts(&map.grid, k)?,
        truth_counts: area_counts(truth, k)?,
        confusion,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geocore::GeoPoint;
    use rand::Rng;

    fn names(k: usize) -> Vec<String> {
        (0..k).map(|i| format!("c{i}")).collect()
    }

    /// Stacks over two features: the first separates classes, the second is noise.
    fn planted(n_per_class: usize, classes: usize, seed: u64) -> (Vec<FeatureStack>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let features = vec![FeatureName::NDVI, FeatureName::EVI];
        let times = 4;
        let mut stacks = Vec::new();
        let mut labels = Vec::new();
        for i in 0..n_per_class * classes {
            let label = i % classes;
            let mut matrix = Vec::new();
            for t in 0..times {
                let signal = if t % 2 == 0 { label as f64 * 0.3 } else { -(label as f64) * 0.2 };
                matrix.push(signal + rng.random_range(-0.05..0.05));
                matrix.push(rng.random_range(-1.0..1.0));
            }
            stacks.push(FeatureStack {
                point: GeoPoint::new(0.0, 0.0).unwrap(),
                features: features.clone(),
                times,
                matrix,
                valid_mask: vec![true; times * 2],
            });
            labels.push(label);
        }
        (stacks, labels)
    }

    fn small_cfg(seed: u64) -> MapperConfig {
        MapperConfig {
            train: TrainConfig {
                epochs: 15,
                batch_size: 16,
                seed,
                dropout_rate: 0.1,
                ..TrainConfig::default()
            },
            ..MapperConfig::default()
        }
    }

    fn planted_dataset(seed: u64) -> PixelDataset {
        let (stacks, labels) = planted(40, 3, seed);
        let cells = (0..labels.len()).map(|i| (i, 0)).collect();
        PixelDataset::from_stacks(&names(3), stacks, labels, cells, &small_cfg(seed)).unwrap()
    }

    #[test]
    fn informative_feature_selected_noise_rejected() {
        let ds = planted_dataset(3);
        let r = forward_select(&[FeatureName::EVI, FeatureName::NDVI], &ds, &small_cfg(3)).unwrap();
        assert_eq!(r.selected, [FeatureName::NDVI]);
        assert_eq!(r.stop, StopReason::NoImprovement);
        assert!(r.models_trained <= 3);
        let h = r.accepted_history();
        assert!(h[0] > r.baseline);
        assert!(h.windows(2).all(|w| w[1] > w[0]));
        assert!(r.to_table().contains("NDVI"));
    }

    #[test]
    fn selection_needs_two_candidates() {
        let ds = planted_dataset(1);
        assert!(matches!(
            forward_select(&[FeatureName::NDVI], &ds, &small_cfg(1)),
            Err(MapperError::TooFewCandidates(1))
        ));
    }

    #[test]
    fn training_is_deterministic() {
        let ds = planted_dataset(5);
        let a = train_pixel_classifier(&[FeatureName::NDVI], &ds, &small_cfg(5)).unwrap();
        let b = train_pixel_classifier(&[FeatureName::NDVI], &ds, &small_cfg(5)).unwrap();
        assert_eq!(a.heldout, b.heldout);
        assert!(a.val_accuracy > 0.9, "{}", a.val_accuracy);
    }

    #[test]
    fn one_class_rejected() {
        let (stacks, _) = planted(10, 1, 1);
        let labels = vec![0; stacks.len()];
        let cells = (0..labels.len()).map(|i| (i, 0)).collect();
        let r = PixelDataset::from_stacks(&names(3), stacks, labels, cells, &small_cfg(1));
        assert!(matches!(r, Err(MapperError::TooFewPoints { .. })));
    }

    #[test]
    fn holdout_is_stratified() {
        let labels: Vec<usize> = (0..100).map(|i| i % 4).collect();
        let (train, val) = stratified_holdout(&labels, 4, 0.2, 9);
        assert_eq!(train.len() + val.len(), 100);
        for c in 0..4 {
            assert_eq!(val.iter().filter(|&&i| labels[i] == c).count(), 5);
        }
    }

    #[test]
    fn pixel_model_round_trip() {
        let ds = planted_dataset(2);
        let t = train_pixel_classifier(&[FeatureName::NDVI, FeatureName::EVI], &ds, &small_cfg(2)).unwrap();
        let bytes = t.model.to_bytes();
        let back = PixelModel::from_bytes(&bytes).unwrap();
        assert_eq!(back, t.model);
        assert!(PixelModel::from_bytes(&bytes[1..]).is_err());
    }

    #[test]
    fn legend_parsing() {
        assert_eq!(parse_legend("0=corn\n1=soybean\n").unwrap(), ["corn", "soybean"]);
        assert!(parse_legend("1=corn\n").is_err());
    }
}
