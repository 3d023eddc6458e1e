//! Flat `key = value` run configuration with section prefixes.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sha2::{Digest, Sha256};

/// Every recognised key with its default. `seed` has no default.
pub const DEFAULTS: &[(&str, &str)] = &[
    ("region", "california"),
    ("paths.fixtures", "world/fixtures"),
    ("paths.scenes", "world/scenes"),
    ("paths.truth", "world/truth.asc"),
    ("paths.training_catalog", "world/train_catalog.csv"),
    ("paths.rejections", ""),
    ("synth.dir", "world"),
    ("synth.rows", "200"),
    ("synth.cols", "200"),
    ("synth.cell_m", "30"),
    ("synth.origin_lat", "0.05"),
    ("synth.origin_lon", "20.0"),
    ("synth.parcel_cells", "13"),
    ("synth.proportions", ""),
    ("synth.first_date", "2019-03-15"),
    ("synth.date_step_days", "22"),
    ("synth.dates", "10"),
    ("synth.noise_sigma", "0.02"),
    ("synth.cloud_fraction", "0.1"),
    ("synth.jitter_days", "5"),
    ("synth.jitter_scale", "0.03"),
    ("synth.view_range_cells", "4"),
    ("synth.image_size", "32"),
    ("synth.capture_date", "2019-07"),
    ("synth.capture_margin_cells", "5"),
    ("synth.fixture_jitter_m", "2"),
    ("synth.train_images_per_class", "200"),
    ("grid.bbox", "synth"),
    ("grid.spacing_m", "90"),
    ("fetch.source", "fixtures"),
    ("fetch.size", "640"),
    ("images.split", "0.6,0.2,0.2"),
    ("images.epochs", "30"),
    ("images.learning_rate", "0.01"),
    ("images.momentum", "0.9"),
    ("images.batch_size", "32"),
    ("images.dropout", "0.2"),
    ("qc.min_confidence", "0.5"),
    ("shift.road_width_y_m", "12"),
    ("shift.pixel_size_x_m", "30"),
    ("refs.min_per_class", "200"),
    ("refs.include_others", "true"),
    ("scenes.reflectance_scale", "1.0"),
    ("mapper.epochs", "20"),
    ("mapper.learning_rate", "0.01"),
    ("mapper.momentum", "0.9"),
    ("mapper.batch_size", "32"),
    ("mapper.selection_dropout", "0.2"),
    ("mapper.dropout_rates", "0.1,0.2,0.3,0.5"),
    ("mapper.holdout", "0.2"),
    ("mapper.max_per_class", "80"),
    ("mapper.min_per_class", "5"),
    ("mapper.candidates", "NDVI,EVI,ENDVI,LSWI,Blue,Green,Red,NIR,SWIR1,SWIR2"),
    ("mapper.features", ""),
    ("map.bbox", ""),
];

#[derive(Debug)]
pub struct ConfigError {
    pub path: Option<PathBuf>,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.path {
            Some(p) => write!(f, "{}: {}", p.display(), self.message),
            None => write!(f, "config: {}", self.message),
        }
    }
}

impl std::error::Error for ConfigError {}

/// Effective configuration: defaults overlaid with the file, then the seed
/// override.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
    pub seed: u64,
    source: Option<PathBuf>,
}

impl RunConfig {
    pub fn parse(text: &str, source: Option<&Path>, seed_override: Option<u64>) -> Result<Self, ConfigError> {
        let err = |m: String| ConfigError {
            path: source.map(Path::to_path_buf),
            message: m,
        };
        let mut values: BTreeMap<String, String> =
            DEFAULTS.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect();
        let mut seen = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split_once('#').map_or(raw, |(l, _)| l).trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| err(format!("line {}: expected key = value", n + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if k != "seed" && !values.contains_key(k) {
                return Err(err(format!("line {}: unknown key {k:?}", n + 1)));
            }
            if let Some(prev) = seen.insert(k.to_string(), n + 1) {
                return Err(err(format!("line {}: {k:?} already set on line {prev}", n + 1)));
            }
            values.insert(k.to_string(), v.to_string());
        }
        let seed = match (seed_override, values.remove("seed")) {
            (Some(s), _) => s,
            (None, Some(s)) => s.parse().map_err(|_| err(format!("seed {s:?} is not an unsigned integer")))?,
            (None, None) => return Err(err("seed is required (set `seed = N` or pass --seed)".into())),
        };
        Ok(Self {
            values,
            seed,
            source: source.map(Path::to_path_buf),
        })
    }

    pub fn load(path: &Path, seed_override: Option<u64>) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError {
            path: Some(path.to_path_buf()),
            message: e.to_string(),
        })?;
        Self::parse(&text, Some(path), seed_override)
    }

    fn err(&self, key: &str, message: String) -> ConfigError {
        ConfigError {
            path: self.source.clone(),
            message: format!("{key}: {message}"),
        }
    }

    pub fn str(&self, key: &str) -> &str {
        self.values
            .get(key)
            .unwrap_or_else(|| panic!("config key {key} has no default"))
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T, ConfigError>
    where
        T::Err: fmt::Display,
    {
        self.str(key)
            .parse()
            .map_err(|e: T::Err| self.err(key, format!("{:?}: {e}", self.str(key))))
    }

    pub fn list<T: FromStr>(&self, key: &str) -> Result<Vec<T>, ConfigError>
    where
        T::Err: fmt::Display,
    {
        self.str(key)
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| s.parse().map_err(|e: T::Err| self.err(key, format!("{s:?}: {e}"))))
            .collect()
    }

    pub fn flag(&self, key: &str) -> Result<bool, ConfigError> {
        match self.str(key) {
            "true" | "yes" | "1" => Ok(true),
            "false" | "no" | "0" => Ok(false),
            v => Err(self.err(key, format!("{v:?} is not a boolean"))),
        }
    }

    /// Path-valued key; relative paths resolve against the run directory.
    /// Empty means unset.
    pub fn path(&self, key: &str, run_dir: &Path) -> Option<PathBuf> {
        match self.str(key) {
            "" => None,
            v => Some(run_dir.join(v)),
        }
    }

    /// Canonical `key = value` text of the effective config, seed included.
    pub fn canonical(&self) -> String {
        let mut s = format!("seed = {}\n", self.seed);
        for (k, v) in &self.values {
            s.push_str(&format!("{k} = {v}\n"));
        }
        s
    }

    pub fn sha256(&self) -> String {
        hex::encode(Sha256::digest(self.canonical().as_bytes()))
    }
}
