//! Street-image datasets, CNN training and classification, and quality
//! control before reference generation.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::geocore::{GeoPoint, Heading};
use crate::imagery::{decode_image, CaptureDate, ImageTensor, ImageryError, StreetImageRecord};
use crate::neuralnet::{self, Network, NetworkSpec, NnError, Sample, Shape, Tensor, TrainConfig, TrainHistory};

pub const OTHERS: &str = "others";

/// Confidence threshold used when none is configured.
pub const DEFAULT_MIN_CONFIDENCE: f64 = 0.5;

#[derive(Debug, Error)]
pub enum ClassifierError {
    #[error("invalid taxonomy: {0}")]
    Taxonomy(String),
    #[error("unknown class {0:?}")]
    UnknownClass(String),
    #[error("unknown region {0:?} (expected california or illinois)")]
    UnknownRegion(String),
    #[error("invalid split ratios: {0}")]
    Ratios(String),
    #[error("class {class:?} has {count} items; stratified splitting needs at least 3")]
    TooFewForSplit { class: String, count: usize },
    #[error("class {0:?} has no training images")]
    MissingClass(String),
    #[error("image {id} is {got} but the network expects {expected}")]
    ImageShape { id: String, got: String, expected: String },
    #[error("confidence threshold {0} outside [0, 1]")]
    Threshold(f64),
    #[error("{path}: {message}")]
    Catalog { path: PathBuf, message: String },
    #[error(transparent)]
    Network(#[from] NnError),
    #[error(transparent)]
    Imagery(#[from] ImageryError),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelTaxonomy {
    region: String,
    classes: Vec<String>,
}

impl LabelTaxonomy {
    pub fn new(region: &str, classes: &[&str]) -> Result<Self, ClassifierError> {
        let set: BTreeSet<&str> = classes.iter().copied().collect();
        if set.len() != classes.len() {
            return Err(ClassifierError::Taxonomy("duplicate class names".into()));
        }
        if !set.contains(OTHERS) {
            return Err(ClassifierError::Taxonomy(format!("no {OTHERS:?} class")));
        }
        if classes.iter().any(|c| c.is_empty() || c.contains([',', '=', '\n'])) {
            return Err(ClassifierError::Taxonomy("class names must be non-empty without ',' or '='".into()));
        }
        Ok(Self {
            region: region.to_string(),
            classes: classes.iter().map(|s| s.to_string()).collect(),
        })
    }

    pub fn california() -> Self {
        Self::new(
            "california",
            &["alfalfa", "almond", "corn", "cotton", "grape", "pistachio", OTHERS],
        )
        .unwrap()
    }

    pub fn illinois() -> Self {
        Self::new("illinois", &["corn", "soybean", OTHERS]).unwrap()
    }

    pub fn for_region(region: &str) -> Result<Self, ClassifierError> {
        match region.to_ascii_lowercase().as_str() {
            "california" => Ok(Self::california()),
            "illinois" => Ok(Self::illinois()),
            _ => Err(ClassifierError::UnknownRegion(region.to_string())),
        }
    }

    pub fn region(&self) -> &str {
        &self.region
    }

    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn name(&self, index: usize) -> &str {
        &self.classes[index]
    }

    pub fn index_of(&self, name: &str) -> Result<usize, ClassifierError> {
        self.classes
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| ClassifierError::UnknownClass(name.to_string()))
    }

    pub fn others(&self) -> usize {
        self.index_of(OTHERS).unwrap()
    }

    /// `index=name` lines, the legend format used next to class maps.
    pub fn legend(&self) -> String {
        self.classes
            .iter()
            .enumerate()
            .map(|(i, c)| format!("{i}={c}\n"))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImage {
    pub record: StreetImageRecord,
    pub label: usize,
    /// Classifier confidence; `None` for hand labels.
    pub confidence: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit<T> {
    pub train: Vec<T>,
    pub val: Vec<T>,
    pub test: Vec<T>,
}

/// Stratified random split. Within each class the shuffled items are cut at
/// `round(r_train * n)` and `round((r_train + r_val) * n)`, with every part
/// kept non-empty. Each part preserves the input order.
pub fn split_dataset<T: Clone>(
    items: &[T],
    label_of: impl Fn(&T) -> usize,
    ratios: (f64, f64, f64),
    seed: u64,
) -> Result<DatasetSplit<T>, ClassifierError> {
    let (a, b, c) = ratios;
    if !(a > 0.0 && b > 0.0 && c > 0.0) {
        return Err(ClassifierError::Ratios(format!("{a}, {b}, {c}: all must be positive")));
    }
    if (a + b + c - 1.0).abs() > 1e-9 {
        return Err(ClassifierError::Ratios(format!("{a} + {b} + {c} != 1")));
    }
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, it) in items.iter().enumerate() {
        by_class.entry(label_of(it)).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut part = vec![0u8; items.len()];
    for (&class, idx) in &mut by_class {
        let n = idx.len();
        if n < 3 {
            return Err(ClassifierError::TooFewForSplit {
                class: class.to_string(),
                count: n,
            });
        }
        idx.shuffle(&mut rng);
        let cut1 = ((a * n as f64).round() as usize).clamp(1, n - 2);
        let cut2 = (((a + b) * n as f64).round() as usize).clamp(cut1 + 1, n - 1);
        for (k, &i) in idx.iter().enumerate() {
            part[i] = if k < cut1 {
                0
            } else if k < cut2 {
                1
            } else {
                2
            };
        }
    }
    let mut out = DatasetSplit {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    for (it, p) in items.iter().zip(part) {
        match p {
            0 => out.train.push(it.clone()),
            1 => out.val.push(it.clone()),
            _ => out.test.push(it.clone()),
        }
    }
    Ok(out)
}

pub fn image_to_tensor(image: &ImageTensor) -> Tensor {
    let shape = Shape::new(ImageTensor::CHANNELS, image.height(), image.width());
    Tensor::new(shape, image.to_planar()).expect("image values are finite")
}

fn check_image(net: &Network, rec: &StreetImageRecord) -> Result<Tensor, ClassifierError> {
    let t = image_to_tensor(&rec.image);
    if t.shape() != net.input_shape() {
        return Err(ClassifierError::ImageShape {
            id: rec.id.clone(),
            got: t.shape().to_string(),
            expected: net.input_shape().to_string(),
        });
    }
    Ok(t)
}

fn to_samples(images: &[LabeledImage]) -> Vec<Sample> {
    images
        .iter()
        .map(|li| Sample {
            input: image_to_tensor(&li.record.image),
            label: li.label,
        })
        .collect()
}

/// Builds the default image network for the taxonomy and trains it.
pub fn train_image_classifier(
    train: &[LabeledImage],
    val: &[LabeledImage],
    taxonomy: &LabelTaxonomy,
    cfg: &TrainConfig,
) -> Result<(Network, TrainHistory), ClassifierError> {
    let first = train.first().ok_or(NnError::EmptyDataset("training"))?;
    let mut seen = vec![false; taxonomy.len()];
    for li in train {
        if li.label >= taxonomy.len() {
            return Err(NnError::Label {
                label: li.label,
                classes: taxonomy.len(),
            }
            .into());
        }
        seen[li.label] = true;
    }
    if let Some(missing) = seen.iter().position(|s| !s) {
        return Err(ClassifierError::MissingClass(taxonomy.name(missing).to_string()));
    }
    let input = image_to_tensor(&first.record.image).shape();
    let spec = NetworkSpec::image_default(input, taxonomy.len(), cfg.dropout_rate);
    let mut net = Network::build(spec, cfg.seed)?;
    for li in train.iter().chain(val) {
        check_image(&net, &li.record)?;
    }
    let history = neuralnet::train(&mut net, &to_samples(train), &to_samples(val), cfg)?;
    Ok((net, history))
}

/// Classifies every record; output order matches input order.
pub fn classify_images(net: &Network, images: &[StreetImageRecord]) -> Result<Vec<LabeledImage>, ClassifierError> {
    images
        .par_iter()
        .map(|rec| {
            let t = check_image(net, rec)?;
            let (label, confidence) = net.predict(&t)?;
            Ok(LabeledImage {
                record: rec.clone(),
                label,
                confidence: Some(confidence),
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum DropReason {
    Rejected,
    Others,
    LowConfidence,
}

impl DropReason {
    pub fn as_str(self) -> &'static str {
        match self {
            DropReason::Rejected => "rejected",
            DropReason::Others => "others",
            DropReason::LowConfidence => "low_confidence",
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct QcOutcome {
    pub kept: Vec<LabeledImage>,
    pub dropped: Vec<(LabeledImage, DropReason)>,
    /// Rejection-list ids that matched no input image.
    pub unmatched_rejections: Vec<String>,
}

/// Drops rejected ids first, then "others", then anything below the
/// confidence threshold. Hand labels count as fully confident.
pub fn qc_filter(
    labeled: Vec<LabeledImage>,
    taxonomy: &LabelTaxonomy,
    min_confidence: f64,
    rejection_list: &BTreeSet<String>,
) -> Result<QcOutcome, ClassifierError> {
    if !(0.0..=1.0).contains(&min_confidence) {
        return Err(ClassifierError::Threshold(min_confidence));
    }
    let others = taxonomy.others();
    let mut matched = BTreeSet::new();
    let mut out = QcOutcome::default();
    for li in labeled {
        let reason = if rejection_list.contains(&li.record.id) {
            matched.insert(li.record.id.clone());
            Some(DropReason::Rejected)
        } else if li.label == others {
            Some(DropReason::Others)
        } else if li.confidence.unwrap_or(1.0) < min_confidence {
            Some(DropReason::LowConfidence)
        } else {
            None
        };
        match reason {
            Some(r) => out.dropped.push((li, r)),
            None => out.kept.push(li),
        }
    }
    out.unmatched_rejections = rejection_list.difference(&matched).cloned().collect();
    for id in &out.unmatched_rejections {
        log::warn!("rejection list id {id:?} matches no image");
    }
    Ok(out)
}

/// One image id per line; blank lines and `#` comments are ignored.
pub fn parse_rejection_list(text: &str) -> BTreeSet<String> {
    text.lines()
        .map(|l| l.split('#').next().unwrap_or("").trim())
        .filter(|l| !l.is_empty())
        .map(str::to_string)
        .collect()
}

pub fn read_rejection_list(path: &Path) -> Result<BTreeSet<String>, ClassifierError> {
    let text = fs::read_to_string(path).map_err(|e| ClassifierError::Catalog {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    Ok(parse_rejection_list(&text))
}

pub const CATALOG_HEADER: [&str; 8] = ["id", "path", "label", "confidence", "lat", "lon", "heading", "date"];

/// One catalog row. `label` and `confidence` are empty for unlabeled images
/// and `confidence` is empty for hand labels.
#[derive(Debug, Clone, PartialEq)]
pub struct CatalogEntry {
    pub id: String,
    pub path: PathBuf,
    pub label: Option<String>,
    pub confidence: Option<f64>,
    pub point: GeoPoint,
    pub heading: Heading,
    pub date: Option<CaptureDate>,
}

impl CatalogEntry {
    pub fn for_image(li: &LabeledImage, path: PathBuf, taxonomy: &LabelTaxonomy) -> Self {
        Self {
            id: li.record.id.clone(),
            path,
            label: Some(taxonomy.name(li.label).to_string()),
            confidence: li.confidence,
            point: li.record.capture_point,
            heading: li.record.heading,
            date: li.record.capture_date,
        }
    }
}

pub fn write_catalog(path: &Path, entries: &[CatalogEntry]) -> Result<(), ClassifierError> {
    let err = |m: String| ClassifierError::Catalog {
        path: path.to_path_buf(),
        message: m,
    };
    let mut w = csv::Writer::from_path(path).map_err(|e| err(e.to_string()))?;
    w.write_record(CATALOG_HEADER).map_err(|e| err(e.to_string()))?;
    for e in entries {
        w.write_record([
            e.id.clone(),
            e.path.to_string_lossy().into_owned(),
            e.label.clone().unwrap_or_default(),
            e.confidence.map(|c| format!("{c:.6}")).unwrap_or_default(),
            format!("{:.6}", e.point.lat_deg),
            format!("{:.6}", e.point.lon_deg),
            e.heading.degrees().to_string(),
            e.date.map(|d| d.to_string()).unwrap_or_default(),
        ])
        .map_err(|e| err(e.to_string()))?;
    }
    w.flush().map_err(|e| err(e.to_string()))
}

pub fn read_catalog(path: &Path) -> Result<Vec<CatalogEntry>, ClassifierError> {
    let err = |m: String| ClassifierError::Catalog {
        path: path.to_path_buf(),
        message: m,
    };
    let mut r = csv::Reader::from_path(path).map_err(|e| err(e.to_string()))?;
    let header = r.headers().map_err(|e| err(e.to_string()))?;
    if header.iter().ne(CATALOG_HEADER) {
        return Err(err(format!("expected header {}", CATALOG_HEADER.join(","))));
    }
    let mut out = Vec::new();
    for (n, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| err(e.to_string()))?;
        let line = n + 2;
        let bad = |what: &str| err(format!("line {line}: bad {what}"));
        let opt = |s: &str| (!s.is_empty()).then(|| s.to_string());
        let confidence = match &rec[3] {
            "" => None,
            s => Some(s.parse::<f64>().map_err(|_| bad("confidence"))?),
        };
        let lat = rec[4].parse().map_err(|_| bad("lat"))?;
        let lon = rec[5].parse().map_err(|_| bad("lon"))?;
        out.push(CatalogEntry {
            id: rec[0].to_string(),
            path: PathBuf::from(&rec[1]),
            label: opt(&rec[2]),
            confidence,
            point: GeoPoint::new(lat, lon).map_err(|_| bad("coordinate"))?,
            heading: rec[6].parse().map_err(|_| bad("heading"))?,
            date: match &rec[7] {
                "" => None,
                s => Some(s.parse().map_err(|_| bad("date"))?),
            },
        });
    }
    Ok(out)
}

/// Loads the image behind each entry; relative paths resolve against `base`.
pub fn load_catalog_records(entries: &[CatalogEntry], base: &Path) -> Result<Vec<StreetImageRecord>, ClassifierError> {
    entries
        .par_iter()
        .map(|e| {
            let path = base.join(&e.path);
            let bytes = fs::read(&path).map_err(|source| ImageryError::Io {
                path: path.clone(),
                source,
            })?;
            Ok(StreetImageRecord {
                id: e.id.clone(),
                capture_point: e.point,
                heading: e.heading,
                capture_date: e.date,
                image: decode_image(&bytes)?,
            })
        })
        .collect()
}

/// Entries with labels become labeled images; unlabeled entries are an error.
pub fn load_labeled(
    entries: &[CatalogEntry],
    base: &Path,
    taxonomy: &LabelTaxonomy,
) -> Result<Vec<LabeledImage>, ClassifierError> {
    let records = load_catalog_records(entries, base)?;
    entries
        .iter()
        .zip(records)
        .map(|(e, record)| {
            let name = e.label.as_deref().ok_or_else(|| ClassifierError::Catalog {
                path: base.to_path_buf(),
                message: format!("image {} has no label", e.id),
            })?;
            Ok(LabeledImage {
                record,
                label: taxonomy.index_of(name)?,
                confidence: e.confidence,
            })
        })
        .collect()
}
