//! Deterministic synthetic landscapes for desk-scale runs: a grid of
//! rectangular parcels separated by one-cell roads, procedural street-level
//! images, and multi-date reflectance scenes with per-class phenology.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use chrono::{Datelike, NaiveDate};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use thiserror::Error;

use crate::geocore::{make_sampling_grid, BoundingBox, GeoError, GeoPoint, Heading, METERS_PER_DEGREE};
use crate::imageclassifier::{LabelTaxonomy, OTHERS};
use crate::imagery::{write_fixture, CaptureDate, ImageTensor, ImageryError, StreetImageRecord};
use crate::rasterstack::{write_grid, BandName, BandSet, GridGeometry, RasterError, RasterGrid, SceneManifest};

const NO_PARCEL: u32 = u32::MAX;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid world config: {0}")]
    Config(String),
    #[error("no phenology or texture defined for class {0:?}")]
    UnknownClass(String),
    #[error("{0} is not on a road cell")]
    NotOnRoad(GeoPoint),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Geo(#[from] GeoError),
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error(transparent)]
    Imagery(#[from] ImageryError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorldConfig {
    /// South-west corner of the grid.
    pub origin: GeoPoint,
    pub rows: usize,
    pub cols: usize,
    pub cell_m: f64,
    /// Parcel side in cells; a one-cell road follows every parcel.
    pub parcel_cells: usize,
    pub road_width_y_m: f64,
    pub taxonomy: LabelTaxonomy,
    /// Share of parcels per taxonomy class.
    pub proportions: Vec<f64>,
    pub scene_dates: Vec<NaiveDate>,
    pub noise_sigma: f64,
    pub cloud_fraction: f64,
    /// Per-parcel phenology offset range, days.
    pub jitter_days: f64,
    /// Per-parcel multiplicative reflectance jitter range.
    pub jitter_scale: f64,
    /// Round reflectance to this step (0 keeps full precision).
    pub quantum: f64,
    /// How far a camera sees along its heading, in cells.
    pub view_range_cells: usize,
    pub seed: u64,
}

impl WorldConfig {
    /// 200 x 200 cells of 30 m near the equator (cells are square in degrees
    /// there), 13-cell parcels, ten dates from mid-March to early October.
    pub fn default_for(taxonomy: LabelTaxonomy, seed: u64) -> Self {
        let k = taxonomy.len();
        let start = NaiveDate::from_ymd_opt(2019, 3, 15).unwrap();
        Self {
            origin: GeoPoint::new(0.05, 20.0).unwrap(),
            rows: 200,
            cols: 200,
            cell_m: 30.0,
            parcel_cells: 13,
            road_width_y_m: 12.0,
            taxonomy,
            proportions: vec![1.0 / k as f64; k],
            scene_dates: (0..10).map(|i| start + chrono::Duration::days(22 * i)).collect(),
            noise_sigma: 0.02,
            cloud_fraction: 0.1,
            jitter_days: 5.0,
            jitter_scale: 0.03,
            quantum: 1e-4,
            view_range_cells: 4,
            seed,
        }
    }

    pub fn cellsize_deg(&self) -> f64 {
        self.cell_m / METERS_PER_DEGREE
    }

    pub fn geometry(&self) -> Result<GridGeometry, SynthError> {
        Ok(GridGeometry::new(
            self.cols,
            self.rows,
            self.origin.lon_deg,
            self.origin.lat_deg,
            self.cellsize_deg(),
        )?)
    }

    /// Box through the outermost cell centres, the natural sampling extent.
    pub fn cell_center_bbox(&self) -> Result<BoundingBox, SynthError> {
        let cs = self.cellsize_deg();
        Ok(BoundingBox::new(
            self.origin.lat_deg + 0.5 * cs,
            self.origin.lat_deg + (self.rows as f64 - 0.5) * cs,
            self.origin.lon_deg + 0.5 * cs,
            self.origin.lon_deg + (self.cols as f64 - 0.5) * cs,
        )?)
    }

    fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::Config(m));
        if self.parcel_cells < 2 {
            return bad(format!("parcels of {} cells are below the 2-cell minimum", self.parcel_cells));
        }
        if self.rows <= self.parcel_cells || self.cols <= self.parcel_cells {
            return bad("grid must be larger than one parcel".into());
        }
        if self.cell_m.is_nan() || self.cell_m <= 0.0 || self.road_width_y_m.is_nan() || self.road_width_y_m <= 0.0 {
            return bad("cell size and road width must be positive".into());
        }
        if self.proportions.len() != self.taxonomy.len() || self.proportions.iter().any(|p| p.is_nan() || *p < 0.0) {
            return bad("one non-negative proportion per class is required".into());
        }
        if (self.proportions.iter().sum::<f64>() - 1.0).abs() > 1e-6 {
            return bad("proportions must sum to 1".into());
        }
        if self.noise_sigma.is_nan() || self.noise_sigma < 0.0 {
            return bad("noise sigma must be >= 0".into());
        }
        if !(0.0..1.0).contains(&self.cloud_fraction) {
            return bad("cloud fraction must be in [0, 1)".into());
        }
        if self.scene_dates.len() < 3 {
            return bad("at least 3 scene dates are needed".into());
        }
        if !(self.jitter_days >= 0.0 && self.jitter_scale >= 0.0 && self.quantum >= 0.0) {
            return bad("jitter and quantum must be >= 0".into());
        }
        for c in self.taxonomy.classes() {
            phenology(c)?;
            texture(c)?;
        }
        Ok(())
    }
}

/// Piecewise-linear reflectance per band over day of year.
#[derive(Debug, Clone, PartialEq)]
pub struct PhenologyCurve {
    pub days: Vec<f64>,
    /// `values[band][knot]`, bands in [`BandName::ALL`] order.
    pub values: [Vec<f64>; 6],
}

impl PhenologyCurve {
    pub fn value(&self, band: BandName, doy: f64) -> f64 {
        let v = &self.values[band.index()];
        let d = &self.days;
        if doy <= d[0] {
            return v[0];
        }
        for i in 1..d.len() {
            if doy <= d[i] {
                let w = (doy - d[i - 1]) / (d[i] - d[i - 1]);
                return v[i - 1] + w * (v[i] - v[i - 1]);
            }
        }
        v[v.len() - 1]
    }
}

const SOIL: [f64; 6] = [0.10, 0.13, 0.17, 0.24, 0.33, 0.27];
const LEAF: [f64; 6] = [0.03, 0.07, 0.04, 0.48, 0.20, 0.09];

/// Class curve built from a greenness trajectory mixed between soil and
/// leaf spectra, plus a fixed per-band offset.
pub fn phenology(class: &str) -> Result<PhenologyCurve, SynthError> {
    let (green, offset): (&[(f64, f64)], [f64; 6]) = match class {
        "corn" => (
            &[(60.0, 0.05), (130.0, 0.08), (170.0, 0.5), (200.0, 0.92), (230.0, 0.85), (260.0, 0.4), (290.0, 0.1)],
            [0.0; 6],
        ),
        "soybean" => (
            &[(60.0, 0.05), (150.0, 0.06), (185.0, 0.35), (220.0, 0.88), (245.0, 0.8), (270.0, 0.35), (295.0, 0.08)],
            [0.0, 0.0, 0.0, 0.0, 0.07, 0.0],
        ),
        "cotton" => (
            &[(60.0, 0.05), (140.0, 0.05), (180.0, 0.25), (220.0, 0.65), (250.0, 0.75), (280.0, 0.55), (310.0, 0.2)],
            [0.02, 0.02, 0.02, 0.0, 0.0, 0.06],
        ),
        "alfalfa" => (
            &[
                (60.0, 0.6),
                (110.0, 0.75),
                (125.0, 0.3),
                (150.0, 0.75),
                (165.0, 0.3),
                (190.0, 0.75),
                (205.0, 0.3),
                (230.0, 0.7),
                (300.0, 0.6),
            ],
            [0.0; 6],
        ),
        "almond" => (
            &[(60.0, 0.25), (90.0, 0.55), (120.0, 0.6), (270.0, 0.55), (300.0, 0.35)],
            [0.0, 0.0, 0.0, 0.0, 0.09, 0.0],
        ),
        "pistachio" => (
            &[(60.0, 0.1), (110.0, 0.15), (140.0, 0.5), (250.0, 0.5), (290.0, 0.3)],
            [0.0, 0.0, 0.0, 0.0, -0.05, 0.04],
        ),
        "grape" => (
            &[(60.0, 0.1), (100.0, 0.12), (140.0, 0.45), (240.0, 0.5), (280.0, 0.3)],
            [0.0, 0.0, 0.0, 0.0, 0.0, -0.07],
        ),
        OTHERS => (
            &[(60.0, 0.4), (100.0, 0.5), (150.0, 0.2), (200.0, 0.12), (280.0, 0.15)],
            [0.04, 0.04, 0.04, 0.0, 0.0, 0.0],
        ),
        _ => return Err(SynthError::UnknownClass(class.to_string())),
    };
    let days = green.iter().map(|k| k.0).collect();
    let values = std::array::from_fn(|b| {
        green
            .iter()
            .map(|&(_, g)| (SOIL[b] * (1.0 - g) + LEAF[b] * g + offset[b]).clamp(0.0, 1.0))
            .collect()
    });
    Ok(PhenologyCurve { days, values })
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Pattern {
    Vertical(usize),
    Horizontal(usize),
    Diagonal(usize),
    Dots,
    Blotch,
    Plain,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Texture {
    base: [f64; 3],
    pattern: Pattern,
    amplitude: f64,
    speckle: f64,
}

fn texture(class: &str) -> Result<Texture, SynthError> {
    let t = |base, pattern, amplitude, speckle| Texture {
        base,
        pattern,
        amplitude,
        speckle,
    };
    Ok(match class {
        "corn" => t([0.22, 0.50, 0.12], Pattern::Vertical(4), 0.10, 0.05),
        "soybean" => t([0.30, 0.58, 0.22], Pattern::Horizontal(3), 0.06, 0.05),
        "cotton" => t([0.36, 0.48, 0.28], Pattern::Dots, 0.0, 0.05),
        "alfalfa" => t([0.26, 0.62, 0.30], Pattern::Plain, 0.0, 0.10),
        "almond" => t([0.32, 0.40, 0.22], Pattern::Vertical(8), 0.15, 0.05),
        "pistachio" => t([0.42, 0.44, 0.26], Pattern::Diagonal(6), 0.10, 0.05),
        "grape" => t([0.28, 0.44, 0.18], Pattern::Horizontal(5), 0.12, 0.05),
        OTHERS => t([0.52, 0.47, 0.36], Pattern::Blotch, 0.10, 0.06),
        _ => return Err(SynthError::UnknownClass(class.to_string())),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Parcel {
    pub row0: usize,
    pub col0: usize,
    pub rows: usize,
    pub cols: usize,
    pub class: usize,
    /// Phenology offset in days.
    pub shift_days: f64,
    /// Multiplicative reflectance factor.
    pub scale: f64,
}

#[derive(Debug, Clone)]
pub struct World {
    pub config: WorldConfig,
    pub geometry: GridGeometry,
    /// Class index per cell; roads belong to "others".
    pub truth: RasterGrid,
    /// 1 on road cells, 0 elsewhere.
    pub road: RasterGrid,
    pub parcels: Vec<Parcel>,
    parcel_of: Vec<u32>,
    curves: Vec<PhenologyCurve>,
}

impl World {
    pub fn is_road(&self, row: usize, col: usize) -> bool {
        self.parcel_of[row * self.geometry.ncols + col] == NO_PARCEL
    }

    pub fn class_at(&self, row: usize, col: usize) -> usize {
        self.truth.get(row, col) as usize
    }

    pub fn curve(&self, class: usize) -> &PhenologyCurve {
        &self.curves[class]
    }

    /// Noise-free reflectance of a cell on a day of year.
    pub fn reflectance(&self, row: usize, col: usize, band: BandName, doy: f64) -> f64 {
        match self.parcel_of[row * self.geometry.ncols + col] {
            NO_PARCEL => self.curves[self.config.taxonomy.others()].value(band, doy),
            p => {
                let p = &self.parcels[p as usize];
                (self.curves[p.class].value(band, doy - p.shift_days) * p.scale).clamp(0.0, 1.0)
            }
        }
    }

    /// Class of the first non-road cell within view range along `h`, or
    /// "others" when the camera sees only road or leaves the grid.
    pub fn view_class(&self, p: GeoPoint, h: Heading) -> Result<usize, SynthError> {
        let (row, col) = self.geometry.cell_of(p).ok_or(SynthError::NotOnRoad(p))?;
        if !self.is_road(row, col) {
            return Err(SynthError::NotOnRoad(p));
        }
        let (north, east) = h.unit();
        let (dr, dc) = (-north as i64, east as i64);
        for k in 1..=self.config.view_range_cells as i64 {
            let (r, c) = (row as i64 + dr * k, col as i64 + dc * k);
            if r < 0 || c < 0 || r >= self.geometry.nrows as i64 || c >= self.geometry.ncols as i64 {
                break;
            }
            if !self.is_road(r as usize, c as usize) {
                return Ok(self.class_at(r as usize, c as usize));
            }
        }
        Ok(self.config.taxonomy.others())
    }
}

/// Lays out parcels and roads and assigns classes by largest-remainder
/// quotas shuffled with the seed.
pub fn generate_world(cfg: &WorldConfig) -> Result<World, SynthError> {
    cfg.validate()?;
    let geometry = cfg.geometry()?;
    let period = cfg.parcel_cells + 1;
    let mut parcels = Vec::new();
    let mut row0 = 0;
    while row0 < cfg.rows {
        let rows = cfg.parcel_cells.min(cfg.rows - row0);
        let mut col0 = 0;
        while col0 < cfg.cols {
            let cols = cfg.parcel_cells.min(cfg.cols - col0);
            parcels.push(Parcel {
                row0,
                col0,
                rows,
                cols,
                class: 0,
                shift_days: 0.0,
                scale: 1.0,
            });
            col0 += period;
        }
        row0 += period;
    }
    let n = parcels.len();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let labels = quota_labels(&cfg.proportions, n, &mut rng);
    for (p, &class) in parcels.iter_mut().zip(&labels) {
        p.class = class;
        p.shift_days = rng.random_range(-1.0..=1.0) * cfg.jitter_days;
        p.scale = 1.0 + rng.random_range(-1.0..=1.0) * cfg.jitter_scale;
    }
    let others = cfg.taxonomy.others() as f64;
    let mut parcel_of = vec![NO_PARCEL; geometry.len()];
    let mut truth = RasterGrid::filled(geometry, -9999.0, others);
    let mut road = RasterGrid::filled(geometry, -9999.0, 1.0);
    for (i, p) in parcels.iter().enumerate() {
        for r in p.row0..p.row0 + p.rows {
            for c in p.col0..p.col0 + p.cols {
                parcel_of[r * cfg.cols + c] = i as u32;
                truth.set(r, c, p.class as f64);
                road.set(r, c, 0.0);
            }
        }
    }
    let curves = cfg
        .taxonomy
        .classes()
        .iter()
        .map(|c| phenology(c))
        .collect::<Result<_, _>>()?;
    Ok(World {
        config: cfg.clone(),
        geometry,
        truth,
        road,
        parcels,
        parcel_of,
        curves,
    })
}

fn quota_labels(proportions: &[f64], n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let exact: Vec<f64> = proportions.iter().map(|p| p * n as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut order: Vec<usize> = (0..proportions.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    let mut left = n - counts.iter().sum::<usize>();
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        counts[i] += 1;
        left -= 1;
    }
    let mut labels: Vec<usize> = counts.iter().enumerate().flat_map(|(c, &k)| std::iter::repeat_n(c, k)).collect();
    labels.shuffle(rng);
    labels
}

fn mix(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(0x6A09_E667_F3BC_C909);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Procedural view of the texture for `class`: sky band on top, field
/// texture below, road strip at the bottom.
pub fn render_class_image(class_name: &str, size: usize, seed: u64) -> Result<ImageTensor, SynthError> {
    let tex = texture(class_name)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sky_rows = (size as f64 * 0.35).round() as usize;
    let road_rows = (size as f64 * 0.1).round() as usize;
    let brightness = rng.random_range(0.85..1.15);
    let sky_tint = rng.random_range(-0.05..0.05);
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    let phase2 = rng.random_range(0.0..std::f64::consts::TAU);
    let mut values = Vec::with_capacity(size * size * 3);
    for y in 0..size {
        for x in 0..size {
            let px: [f64; 3] = if y < sky_rows {
                let g = y as f64 / size as f64;
                [0.62 + sky_tint + 0.1 * g, 0.75 + sky_tint + 0.05 * g, 0.92]
            } else if y >= size - road_rows {
                let v = 0.4 + rng.random_range(-0.03..0.03);
                [v, v, v + 0.02]
            } else {
                let wave = |coord: usize, period: usize| {
                    let s = (std::f64::consts::TAU * coord as f64 / period as f64 + phase).sin();
                    if s >= 0.0 {
                        tex.amplitude
                    } else {
                        -tex.amplitude
                    }
                };
                let m = match tex.pattern {
                    Pattern::Vertical(p) => wave(x, p),
                    Pattern::Horizontal(p) => wave(y, p),
                    Pattern::Diagonal(p) => wave(x + y, p),
                    Pattern::Blotch => tex.amplitude * (x as f64 / 5.0 + phase).sin() * (y as f64 / 4.0 + phase2).sin(),
                    Pattern::Dots | Pattern::Plain => 0.0,
                };
                if tex.pattern == Pattern::Dots && rng.random::<f64>() < 0.12 {
                    [0.95, 0.95, 0.92]
                } else {
                    let s = tex.speckle;
                    std::array::from_fn(|ch| tex.base[ch] * brightness + m + rng.random_range(-s..=s))
                }
            };
            values.extend(px.iter().map(|v| v.clamp(0.0, 1.0)));
        }
    }
    Ok(ImageTensor::new(size, size, values)?)
}

/// Street image seen from road point `p` facing `h`.
pub fn render_street_image(world: &World, p: GeoPoint, h: Heading, size: usize, seed: u64) -> Result<ImageTensor, SynthError> {
    let class = world.view_class(p, h)?;
    render_class_image(world.config.taxonomy.name(class), size, seed)
}

/// One synthetic acquisition held in memory.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub date: NaiveDate,
    pub bands: BandSet,
    pub qa: RasterGrid,
}

/// Band grids are phenology plus Gaussian noise, clipped to [0, 1]; QA cells
/// are set to 1 (cloud) with probability `cloud_fraction`.
pub fn synthesize_scenes(world: &World) -> Result<Vec<SyntheticScene>, SynthError> {
    let cfg = &world.config;
    let noise = Normal::new(0.0, cfg.noise_sigma).map_err(|e| SynthError::Config(e.to_string()))?;
    let geo = world.geometry;
    let scenes = cfg
        .scene_dates
        .par_iter()
        .enumerate()
        .map(|(i, &date)| {
            let mut rng = ChaCha8Rng::seed_from_u64(mix(cfg.seed, 1000 + i as u64));
            let doy = date.ordinal() as f64;
            let mut bands = BTreeMap::new();
            for band in BandName::ALL {
                let mut values = Vec::with_capacity(geo.len());
                for r in 0..geo.nrows {
                    for c in 0..geo.ncols {
                        let mut v = world.reflectance(r, c, band, doy);
                        if cfg.noise_sigma > 0.0 {
                            v += noise.sample(&mut rng);
                        }
                        v = v.clamp(0.0, 1.0);
                        if cfg.quantum > 0.0 {
                            v = (v / cfg.quantum).round() * cfg.quantum;
                        }
                        values.push(v);
                    }
                }
                bands.insert(band, RasterGrid::new(geo, -9999.0, values)?);
            }
            let qa_values = (0..geo.len())
                .map(|_| if rng.random::<f64>() < cfg.cloud_fraction { 1.0 } else { 0.0 })
                .collect();
            Ok(SyntheticScene {
                date,
                bands,
                qa: RasterGrid::new(geo, -9999.0, qa_values)?,
            })
        })
        .collect::<Result<Vec<_>, SynthError>>()?;
    Ok(scenes)
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> SynthError + '_ {
    move |source| SynthError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes each scene as six band grids, a QA grid and a `.scene` manifest.
pub fn write_scenes(dir: &Path, scenes: &[SyntheticScene]) -> Result<Vec<PathBuf>, SynthError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    scenes
        .par_iter()
        .map(|s| {
            let stem = s.date.format("%Y%m%d").to_string();
            let mut band_paths = BTreeMap::new();
            for (band, g) in &s.bands {
                let p = dir.join(format!("{stem}_{band}.asc"));
                write_grid(g, &p)?;
                band_paths.insert(*band, p);
            }
            let qa_path = dir.join(format!("{stem}_qa.asc"));
            write_grid(&s.qa, &qa_path)?;
            let manifest = dir.join(format!("{stem}.scene"));
            SceneManifest {
                scene_date: s.date,
                band_paths,
                qa_path,
            }
            .write(&manifest)?;
            Ok(manifest)
        })
        .collect()
}

/// Sampling-grid points that fall on road cells at least `margin` cells
/// from the grid edge.
pub fn capture_points(world: &World, bbox: &BoundingBox, spacing_m: f64, margin: usize) -> Result<Vec<GeoPoint>, SynthError> {
    let g = world.geometry;
    Ok(make_sampling_grid(bbox, spacing_m)?
        .into_iter()
        .filter(|&p| match g.cell_of(p) {
            Some((r, c)) => {
                r >= margin && c >= margin && r + margin < g.nrows && c + margin < g.ncols && world.is_road(r, c)
            }
            None => false,
        })
        .collect())
}

/// Renders all four views at every capture point into fixture files. Each
/// fixture sits up to `jitter_m` from the requested point, like a snapped
/// panorama.
pub fn write_capture_fixtures(
    world: &World,
    dir: &Path,
    points: &[GeoPoint],
    size: usize,
    date: CaptureDate,
    jitter_m: f64,
    seed: u64,
) -> Result<usize, SynthError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let views: Vec<(usize, GeoPoint, Heading)> = points
        .iter()
        .enumerate()
        .flat_map(|(i, &p)| Heading::ALL.into_iter().map(move |h| (i, p, h)))
        .collect();
    views
        .par_iter()
        .enumerate()
        .map(|(k, &(i, p, h))| {
            let img = render_street_image(world, p, h, size, mix(seed, k as u64))?;
            let mut rng = ChaCha8Rng::seed_from_u64(mix(seed ^ 0xF1, i as u64));
            let d = jitter_m / METERS_PER_DEGREE;
            let q = GeoPoint::new(p.lat_deg + rng.random_range(-d..=d), p.lon_deg + rng.random_range(-d..=d))?;
            write_fixture(dir, q, h, &img, Some(date))?;
            Ok(())
        })
        .collect::<Result<Vec<()>, SynthError>>()
        .map(|v| v.len())
}

/// Hand-labeled training views: road cells and headings in seeded order,
/// keeping the first `per_class` views of each class.
pub fn training_views(world: &World, per_class: usize, size: usize, seed: u64) -> Result<Vec<(StreetImageRecord, usize)>, SynthError> {
    let g = world.geometry;
    let mut views: Vec<(usize, usize, Heading)> = Vec::new();
    for r in 0..g.nrows {
        for c in 0..g.ncols {
            if world.is_road(r, c) {
                views.extend(Heading::ALL.into_iter().map(|h| (r, c, h)));
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    views.shuffle(&mut rng);
    let k = world.config.taxonomy.len();
    let mut counts = vec![0usize; k];
    let mut chosen = Vec::new();
    for (r, c, h) in views {
        let p = g.cell_center(r, c);
        let class = world.view_class(p, h)?;
        if counts[class] < per_class {
            counts[class] += 1;
            chosen.push((p, h, class, counts[class]));
        }
        if counts.iter().all(|&n| n >= per_class) {
            break;
        }
    }
    let taxonomy = &world.config.taxonomy;
    chosen
        .par_iter()
        .enumerate()
        .map(|(i, &(p, h, class, n))| {
            let image = render_class_image(taxonomy.name(class), size, mix(seed, i as u64))?;
            Ok((
                StreetImageRecord {
                    id: format!("train_{}_{n:04}", taxonomy.name(class)),
                    capture_point: p,
                    heading: h,
                    capture_date: None,
                    image,
                },
                class,
            ))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rasterstack::{FeatureName, LoadedScene};

    fn small(taxonomy: LabelTaxonomy, seed: u64) -> WorldConfig {
        WorldConfig {
            rows: 40,
            cols: 40,
            parcel_cells: 6,
            ..WorldConfig::default_for(taxonomy, seed)
        }
    }

    #[test]
    fn layout_and_roads() {
        let w = generate_world(&small(LabelTaxonomy::illinois(), 1)).unwrap();
        // Period 7: rows 6, 13, ... are roads.
        assert!(w.is_road(6, 0));
        assert!(w.is_road(0, 13));
        assert!(!w.is_road(0, 0));
        assert_eq!(w.class_at(6, 0), w.config.taxonomy.others());
        assert!(w.truth.check_georef(&w.road).is_ok());
        assert_eq!(w.parcels.len(), 36);
    }

    #[test]
    fn proportions_are_met() {
        let tax = LabelTaxonomy::new("two", &["corn", OTHERS]).unwrap();
        let cfg = WorldConfig {
            rows: 69,
            cols: 69,
            parcel_cells: 6,
            proportions: vec![0.5, 0.5],
            ..WorldConfig::default_for(tax, 3)
        };
        let w = generate_world(&cfg).unwrap();
        // 69 cells with period 7 gives 10 x 10 parcels.
        assert_eq!(w.parcels.len(), 100);
        let corn = w.parcels.iter().filter(|p| p.class == 0).count();
        assert!((48..=52).contains(&corn));
    }

    #[test]
    fn config_errors() {
        let mut cfg = small(LabelTaxonomy::illinois(), 1);
        cfg.parcel_cells = 1;
        assert!(matches!(generate_world(&cfg), Err(SynthError::Config(_))));
        let mut cfg = small(LabelTaxonomy::illinois(), 1);
        cfg.proportions = vec![0.5, 0.5, 0.5];
        assert!(generate_world(&cfg).is_err());
        let tax = LabelTaxonomy::new("x", &["rice", OTHERS]).unwrap();
        assert!(matches!(
            generate_world(&small(tax, 1)),
            Err(SynthError::UnknownClass(_))
        ));
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = small(LabelTaxonomy::california(), 8);
        let a = generate_world(&cfg).unwrap();
        let b = generate_world(&cfg).unwrap();
        assert_eq!(a.truth, b.truth);
        assert_eq!(a.parcels, b.parcels);
        assert_eq!(synthesize_scenes(&a).unwrap(), synthesize_scenes(&b).unwrap());
    }

    #[test]
    fn noiseless_scenes_match_curves() {
        let cfg = WorldConfig {
            noise_sigma: 0.0,
            cloud_fraction: 0.0,
            jitter_days: 0.0,
            jitter_scale: 0.0,
            quantum: 0.0,
            ..small(LabelTaxonomy::california(), 2)
        };
        let w = generate_world(&cfg).unwrap();
        let scenes = synthesize_scenes(&w).unwrap();
        let s = &scenes[4];
        let doy = s.date.ordinal() as f64;
        assert!(s.qa.values().iter().all(|&v| v == 0.0));
        let loaded = LoadedScene::from_grids(s.date, &s.bands, &s.qa, 1.0).unwrap();
        for (r, c) in [(0, 0), (3, 20), (6, 6), (30, 33)] {
            let class = w.class_at(r, c);
            let curve = w.curve(class);
            let red = curve.value(BandName::Red, doy);
            let nir = curve.value(BandName::NIR, doy);
            assert_eq!(s.bands[&BandName::Red].get(r, c), red);
            let ndvi = loaded.feature(FeatureName::NDVI).get(r, c);
            assert!((ndvi - (nir - red) / (nir + red)).abs() < 1e-12);
        }
    }

    #[test]
    fn cloud_fraction_and_clipping() {
        let cfg = WorldConfig {
            cloud_fraction: 0.2,
            noise_sigma: 0.3,
            rows: 100,
            cols: 100,
            ..small(LabelTaxonomy::illinois(), 5)
        };
        let w = generate_world(&cfg).unwrap();
        for s in synthesize_scenes(&w).unwrap() {
            let cloudy = s.qa.values().iter().filter(|&&v| v != 0.0).count() as f64 / 10_000.0;
            assert!((cloudy - 0.2).abs() <= 0.02, "{cloudy}");
            for g in s.bands.values() {
                assert!(g.values().iter().all(|v| (0.0..=1.0).contains(v)));
            }
        }
    }

    #[test]
    fn default_curves_are_separable() {
        let cfg = WorldConfig::default_for(LabelTaxonomy::california(), 0);
        let mut names: Vec<String> = cfg.taxonomy.classes().to_vec();
        names.push("soybean".into());
        let curves: Vec<_> = names.iter().map(|n| phenology(n).unwrap()).collect();
        let curves = &curves;
        let mut weak = Vec::new();
        for i in 0..curves.len() {
            for j in i + 1..curves.len() {
                let gap = cfg
                    .scene_dates
                    .iter()
                    .flat_map(|d| {
                        let doy = d.ordinal() as f64;
                        BandName::ALL
                            .iter()
                            .map(move |&b| (curves[i].value(b, doy) - curves[j].value(b, doy)).abs())
                    })
                    .fold(0.0, f64::max);
                if gap < 5.0 * cfg.noise_sigma {
                    weak.push(format!("{} vs {}: {gap:.4}", names[i], names[j]));
                }
            }
        }
        assert!(weak.is_empty(), "{weak:?}");
    }

    #[test]
    fn views_and_rendering() {
        let w = generate_world(&small(LabelTaxonomy::california(), 4)).unwrap();
        // Road row 6 at column 2 looks north into the parcel at rows 0..6.
        let p = w.geometry.cell_center(6, 2);
        assert_eq!(w.view_class(p, Heading::North).unwrap(), w.class_at(5, 2));
        // Looking along the road sees only road.
        assert_eq!(w.view_class(p, Heading::East).unwrap(), w.config.taxonomy.others());
        assert!(matches!(
            w.view_class(w.geometry.cell_center(0, 0), Heading::North),
            Err(SynthError::NotOnRoad(_))
        ));
        let a = render_street_image(&w, p, Heading::North, 16, 7).unwrap();
        assert_eq!(a, render_street_image(&w, p, Heading::North, 16, 7).unwrap());
        // Field colour tracks the class base colour.
        let corn = render_class_image("corn", 32, 1).unwrap();
        let field = corn.mean_color(12..28);
        assert!(field[1] > field[0] && field[1] > field[2]);
        let others = render_class_image(OTHERS, 32, 1).unwrap();
        assert!(others.mean_color(12..28)[0] > field[0]);
    }

    #[test]
    fn training_views_fill_quotas() {
        let w = generate_world(&small(LabelTaxonomy::illinois(), 6)).unwrap();
        let views = training_views(&w, 10, 8, 3).unwrap();
        for c in 0..3 {
            assert_eq!(views.iter().filter(|v| v.1 == c).count(), 10);
        }
        assert_eq!(views, training_views(&w, 10, 8, 3).unwrap());
    }
}
