//! Georeferenced band grids, QA masking, vegetation indices and per-pixel
//! temporal feature stacks.
//!
//! Grids are stored as ESRI-ASCII-style text: a six-line header followed by
//! one line of whitespace-separated values per row, northernmost row first.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use chrono::NaiveDate;
use rayon::prelude::*;
use thiserror::Error;

use crate::geocore::{BoundingBox, GeoPoint};

pub const DEFAULT_NODATA: f64 = -9999.0;

/// Scale factor turning raw surface-reflectance integers into reflectance.
pub const RAW_SR_SCALE: f64 = 0.0001;

/// Denominators smaller than this yield nodata.
const MIN_DENOMINATOR: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum RasterError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}: parse error: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("grids are not co-registered: {0}")]
    GeorefMismatch(String),
    #[error("point {0} is outside the grid extent")]
    OutOfExtent(GeoPoint),
    #[error("{feature} needs band {band}, which is missing")]
    MissingBand { feature: FeatureName, band: BandName },
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("no valid observation of {feature} at {point}")]
    UnusablePixel { feature: FeatureName, point: GeoPoint },
    #[error("scene manifest {path}: {message}")]
    Manifest { path: PathBuf, message: String },
    #[error("unknown feature or band name {0:?}")]
    UnknownName(String),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> RasterError + '_ {
    move |source| RasterError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Placement of a grid: lower-left corner and square cell size, in degrees.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridGeometry {
    pub ncols: usize,
    pub nrows: usize,
    pub xll: f64,
    pub yll: f64,
    pub cellsize: f64,
}

impl GridGeometry {
    pub fn new(ncols: usize, nrows: usize, xll: f64, yll: f64, cellsize: f64) -> Result<Self, RasterError> {
        if ncols == 0 || nrows == 0 {
            return Err(RasterError::InvalidGrid("grid needs at least one row and column".into()));
        }
        if !(cellsize.is_finite() && cellsize > 0.0) || !xll.is_finite() || !yll.is_finite() {
            return Err(RasterError::InvalidGrid(format!(
                "bad georeferencing xll={xll} yll={yll} cellsize={cellsize}"
            )));
        }
        Ok(Self {
            ncols,
            nrows,
            xll,
            yll,
            cellsize,
        })
    }

    pub fn len(&self) -> usize {
        self.ncols * self.nrows
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn bbox(&self) -> BoundingBox {
        BoundingBox {
            min_lat: self.yll,
            max_lat: self.yll + self.nrows as f64 * self.cellsize,
            min_lon: self.xll,
            max_lon: self.xll + self.ncols as f64 * self.cellsize,
        }
    }

    /// Row (0 = north) and column of the cell containing `p`. Points on the
    /// outer east or north edge belong to the last cell.
    pub fn cell_of(&self, p: GeoPoint) -> Option<(usize, usize)> {
        let fx = (p.lon_deg - self.xll) / self.cellsize;
        let fy = (p.lat_deg - self.yll) / self.cellsize;
        if !(0.0..=self.ncols as f64).contains(&fx) || !(0.0..=self.nrows as f64).contains(&fy) {
            return None;
        }
        let col = (fx.floor() as usize).min(self.ncols - 1);
        let from_south = (fy.floor() as usize).min(self.nrows - 1);
        Some((self.nrows - 1 - from_south, col))
    }

    pub fn cell_center(&self, row: usize, col: usize) -> GeoPoint {
        GeoPoint {
            lat_deg: self.yll + (self.nrows - row) as f64 * self.cellsize - 0.5 * self.cellsize,
            lon_deg: self.xll + (col as f64 + 0.5) * self.cellsize,
        }
    }

    pub fn same_as(&self, other: &GridGeometry) -> bool {
        let tol = 1e-9 * self.cellsize;
        self.ncols == other.ncols
            && self.nrows == other.nrows
            && (self.xll - other.xll).abs() <= tol
            && (self.yll - other.yll).abs() <= tol
            && (self.cellsize - other.cellsize).abs() <= tol * 1e-3
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RasterGrid {
    geometry: GridGeometry,
    nodata: f64,
    values: Vec<f64>,
}

impl RasterGrid {
    pub fn new(geometry: GridGeometry, nodata: f64, values: Vec<f64>) -> Result<Self, RasterError> {
        if values.len() != geometry.len() {
            return Err(RasterError::InvalidGrid(format!(
                "{} values for a {}x{} grid",
                values.len(),
                geometry.nrows,
                geometry.ncols
            )));
        }
        if !nodata.is_finite() {
            return Err(RasterError::InvalidGrid("nodata sentinel must be finite".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(RasterError::InvalidGrid("non-finite cell value".into()));
        }
        Ok(Self {
            geometry,
            nodata,
            values,
        })
    }

    pub fn filled(geometry: GridGeometry, nodata: f64, value: f64) -> Self {
        Self {
            geometry,
            nodata,
            values: vec![value; geometry.len()],
        }
    }

    pub fn geometry(&self) -> &GridGeometry {
        &self.geometry
    }

    pub fn nodata(&self) -> f64 {
        self.nodata
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn ncols(&self) -> usize {
        self.geometry.ncols
    }

    pub fn nrows(&self) -> usize {
        self.geometry.nrows
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.geometry.ncols + col]
    }

    pub fn set(&mut self, row: usize, col: usize, v: f64) {
        debug_assert!(v.is_finite());
        self.values[row * self.geometry.ncols + col] = v;
    }

    /// Cell value, or `None` for nodata.
    pub fn value(&self, row: usize, col: usize) -> Option<f64> {
        let v = self.get(row, col);
        (v != self.nodata).then_some(v)
    }

    pub fn is_nodata(&self, v: f64) -> bool {
        v == self.nodata
    }

    pub fn valid_count(&self) -> usize {
        self.values.iter().filter(|&&v| v != self.nodata).count()
    }

    pub fn check_georef(&self, other: &RasterGrid) -> Result<(), RasterError> {
        if self.geometry.same_as(&other.geometry) {
            Ok(())
        } else {
            Err(RasterError::GeorefMismatch(format!(
                "{:?} vs {:?}",
                self.geometry, other.geometry
            )))
        }
    }

    /// Applies `f` to every valid cell; `None` results become nodata.
    pub fn map_valid(&self, f: impl Fn(f64) -> Option<f64>) -> RasterGrid {
        let values = self
            .values
            .iter()
            .map(|&v| {
                if v == self.nodata {
                    self.nodata
                } else {
                    f(v).unwrap_or(self.nodata)
                }
            })
            .collect();
        RasterGrid {
            geometry: self.geometry,
            nodata: self.nodata,
            values,
        }
    }
}

/// Value of the cell containing `p`, without interpolation.
pub fn sample_pixel(grid: &RasterGrid, p: GeoPoint) -> Result<f64, RasterError> {
    let (r, c) = grid.geometry.cell_of(p).ok_or(RasterError::OutOfExtent(p))?;
    Ok(grid.get(r, c))
}

pub fn read_grid(path: impl AsRef<Path>) -> Result<RasterGrid, RasterError> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(io_err(path))?;
    let perr = |message: String| RasterError::Parse {
        path: path.to_path_buf(),
        message,
    };
    let mut lines = BufReader::new(file).lines();
    let mut header: BTreeMap<String, String> = BTreeMap::new();
    let mut first_data: Option<String> = None;
    while header.len() < 6 {
        let Some(line) = lines.next() else { break };
        let line = line.map_err(io_err(path))?;
        let t = line.trim();
        if t.is_empty() {
            continue;
        }
        let mut it = t.split_whitespace();
        let key = it.next().unwrap_or_default();
        if key.parse::<f64>().is_ok() {
            first_data = Some(line);
            break;
        }
        let value = it.next().ok_or_else(|| perr(format!("header key {key} has no value")))?;
        header.insert(key.to_ascii_lowercase(), value.to_string());
    }
    let num = |keys: &[&str]| -> Result<Option<f64>, RasterError> {
        for k in keys {
            if let Some(v) = header.get(*k) {
                return v
                    .parse::<f64>()
                    .map(Some)
                    .map_err(|_| perr(format!("header {k} has non-numeric value {v:?}")));
            }
        }
        Ok(None)
    };
    let req = |keys: &[&str]| -> Result<f64, RasterError> {
        num(keys)?.ok_or_else(|| perr(format!("missing header key {}", keys[0])))
    };
    let ncols = req(&["ncols"])?;
    let nrows = req(&["nrows"])?;
    let cellsize = req(&["cellsize"])?;
    if ncols.fract() != 0.0 || nrows.fract() != 0.0 || ncols < 1.0 || nrows < 1.0 {
        return Err(perr(format!("bad dimensions {ncols}x{nrows}")));
    }
    let xll = match num(&["xllcorner"])? {
        Some(v) => v,
        None => req(&["xllcenter"])? - 0.5 * cellsize,
    };
    let yll = match num(&["yllcorner"])? {
        Some(v) => v,
        None => req(&["yllcenter"])? - 0.5 * cellsize,
    };
    let nodata = num(&["nodata_value"])?.unwrap_or(DEFAULT_NODATA);
    let geometry = GridGeometry::new(ncols as usize, nrows as usize, xll, yll, cellsize)?;

    let mut values = Vec::with_capacity(geometry.len());
    let mut row = 0usize;
    let rest = first_data.into_iter().map(Ok).chain(lines);
    for line in rest {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        row += 1;
        if row > geometry.nrows {
            return Err(perr(format!("more than {} data rows", geometry.nrows)));
        }
        let before = values.len();
        for tok in line.split_whitespace() {
            let v: f64 = tok
                .parse()
                .map_err(|_| perr(format!("row {row}: bad value {tok:?}")))?;
            values.push(v);
        }
        let got = values.len() - before;
        if got != geometry.ncols {
            return Err(perr(format!("row {row} has {got} values, header says ncols={}", geometry.ncols)));
        }
    }
    if row != geometry.nrows {
        return Err(perr(format!("{row} data rows, header says nrows={}", geometry.nrows)));
    }
    RasterGrid::new(geometry, nodata, values).map_err(|e| perr(e.to_string()))
}

/// Writes with shortest round-trip float formatting, so reading the file
/// back reproduces every value exactly.
pub fn write_grid(grid: &RasterGrid, path: impl AsRef<Path>) -> Result<(), RasterError> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    let g = &grid.geometry;
    let write = |w: &mut BufWriter<fs::File>| -> io::Result<()> {
        writeln!(w, "ncols {}", g.ncols)?;
        writeln!(w, "nrows {}", g.nrows)?;
        writeln!(w, "xllcorner {}", g.xll)?;
        writeln!(w, "yllcorner {}", g.yll)?;
        writeln!(w, "cellsize {}", g.cellsize)?;
        writeln!(w, "NODATA_value {}", grid.nodata)?;
        for row in grid.values.chunks(g.ncols) {
            let mut first = true;
            for v in row {
                if !first {
                    w.write_all(b" ")?;
                }
                first = false;
                write!(w, "{v}")?;
            }
            w.write_all(b"\n")?;
        }
        w.flush()
    };
    write(&mut w).map_err(io_err(path))
}

/// Masks every cell whose QA value is nonzero (bit 0 cloud, bit 1 shadow,
/// bit 2 snow; any flag masks).
pub fn apply_qa_mask(band: &RasterGrid, qa: &RasterGrid) -> Result<RasterGrid, RasterError> {
    band.check_georef(qa)?;
    let values = band
        .values
        .iter()
        .zip(&qa.values)
        .map(|(&v, &q)| if q == 0.0 { v } else { band.nodata })
        .collect();
    Ok(RasterGrid {
        geometry: band.geometry,
        nodata: band.nodata,
        values,
    })
}

/// Surface-reflectance bands.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum BandName {
    Blue,
    Green,
    Red,
    NIR,
    SWIR1,
    SWIR2,
}

impl BandName {
    pub const ALL: [BandName; 6] = [
        BandName::Blue,
        BandName::Green,
        BandName::Red,
        BandName::NIR,
        BandName::SWIR1,
        BandName::SWIR2,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            BandName::Blue => "Blue",
            BandName::Green => "Green",
            BandName::Red => "Red",
            BandName::NIR => "NIR",
            BandName::SWIR1 => "SWIR1",
            BandName::SWIR2 => "SWIR2",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for BandName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BandName {
    type Err = RasterError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        BandName::ALL
            .into_iter()
            .find(|b| b.as_str().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| RasterError::UnknownName(s.to_string()))
    }
}

/// Candidate model inputs. Declaration order is the tie-break order used by
/// feature selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum FeatureName {
    NDVI,
    EVI,
    ENDVI,
    LSWI,
    Red,
    Blue,
    Green,
    NIR,
    SWIR1,
    SWIR2,
}

impl FeatureName {
    pub const ALL: [FeatureName; 10] = [
        FeatureName::NDVI,
        FeatureName::EVI,
        FeatureName::ENDVI,
        FeatureName::LSWI,
        FeatureName::Red,
        FeatureName::Blue,
        FeatureName::Green,
        FeatureName::NIR,
        FeatureName::SWIR1,
        FeatureName::SWIR2,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            FeatureName::NDVI => "NDVI",
            FeatureName::EVI => "EVI",
            FeatureName::ENDVI => "ENDVI",
            FeatureName::LSWI => "LSWI",
            FeatureName::Red => "Red",
            FeatureName::Blue => "Blue",
            FeatureName::Green => "Green",
            FeatureName::NIR => "NIR",
            FeatureName::SWIR1 => "SWIR1",
            FeatureName::SWIR2 => "SWIR2",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn is_index(self) -> bool {
        matches!(
            self,
            FeatureName::NDVI | FeatureName::EVI | FeatureName::ENDVI | FeatureName::LSWI
        )
    }

    pub fn as_band(self) -> Option<BandName> {
        match self {
            FeatureName::Red => Some(BandName::Red),
            FeatureName::Blue => Some(BandName::Blue),
            FeatureName::Green => Some(BandName::Green),
            FeatureName::NIR => Some(BandName::NIR),
            FeatureName::SWIR1 => Some(BandName::SWIR1),
            FeatureName::SWIR2 => Some(BandName::SWIR2),
            _ => None,
        }
    }

    pub fn required_bands(self) -> &'static [BandName] {
        use BandName::*;
        match self {
            FeatureName::NDVI => &[NIR, Red],
            FeatureName::EVI => &[NIR, Red, Blue],
            FeatureName::ENDVI => &[NIR, Green, Blue],
            FeatureName::LSWI => &[NIR, SWIR1],
            FeatureName::Red => &[Red],
            FeatureName::Blue => &[Blue],
            FeatureName::Green => &[Green],
            FeatureName::NIR => &[NIR],
            FeatureName::SWIR1 => &[SWIR1],
            FeatureName::SWIR2 => &[SWIR2],
        }
    }

    /// Per-pixel value from a full reflectance tuple ordered as
    /// [`BandName::ALL`]. `None` when the denominator vanishes.
    pub fn evaluate(self, r: &[f64; 6]) -> Option<f64> {
        let b = |band: BandName| r[band.index()];
        let ratio = |num: f64, den: f64| (den.abs() >= MIN_DENOMINATOR).then(|| num / den);
        let (nir, red, blue, green, swir1) = (
            b(BandName::NIR),
            b(BandName::Red),
            b(BandName::Blue),
            b(BandName::Green),
            b(BandName::SWIR1),
        );
        match self {
            FeatureName::NDVI => ratio(nir - red, nir + red),
            // Blue coefficient 7, not the MODIS 7.5.
            FeatureName::EVI => ratio(2.5 * (nir - red), nir + 6.0 * red - 7.0 * blue + 1.0),
            FeatureName::ENDVI => ratio((nir + green) - 2.0 * blue, (nir + green) + 2.0 * blue),
            FeatureName::LSWI => ratio(nir - swir1, nir + swir1),
            other => Some(b(other.as_band().expect("band feature"))),
        }
    }
}

impl fmt::Display for FeatureName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FeatureName {
    type Err = RasterError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        FeatureName::ALL
            .into_iter()
            .find(|b| b.as_str().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| RasterError::UnknownName(s.to_string()))
    }
}

pub fn parse_feature_list(s: &str) -> Result<Vec<FeatureName>, RasterError> {
    s.split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(str::parse)
        .collect()
}

pub fn format_feature_list(features: &[FeatureName]) -> String {
    features.iter().map(|f| f.as_str()).collect::<Vec<_>>().join(",")
}

pub type BandSet = BTreeMap<BandName, RasterGrid>;

/// Evaluates a vegetation index (or passes a band through) cell by cell.
/// Nodata in any required band, or a vanishing denominator, gives nodata.
pub fn compute_index(kind: FeatureName, bands: &BandSet) -> Result<RasterGrid, RasterError> {
    let required = kind.required_bands();
    let mut grids = Vec::with_capacity(required.len());
    for &band in required {
        let g = bands.get(&band).ok_or(RasterError::MissingBand { feature: kind, band })?;
        grids.push((band, g));
    }
    let (_, first) = grids[0];
    for (_, g) in &grids[1..] {
        first.check_georef(g)?;
    }
    let nodata = first.nodata;
    let values = (0..first.values.len())
        .into_par_iter()
        .map(|i| {
            let mut tuple = [0.0; 6];
            for (band, g) in &grids {
                let v = g.values[i];
                if v == g.nodata {
                    return nodata;
                }
                tuple[band.index()] = v;
            }
            kind.evaluate(&tuple).unwrap_or(nodata)
        })
        .collect();
    Ok(RasterGrid {
        geometry: first.geometry,
        nodata,
        values,
    })
}

/// Parsed scene manifest: acquisition date, six band grids and a QA grid.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneManifest {
    pub scene_date: NaiveDate,
    pub band_paths: BTreeMap<BandName, PathBuf>,
    pub qa_path: PathBuf,
}

impl SceneManifest {
    /// Relative paths in the file are resolved against its directory.
    pub fn read(path: impl AsRef<Path>) -> Result<Self, RasterError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let merr = |message: String| RasterError::Manifest {
            path: path.to_path_buf(),
            message,
        };
        let mut date = None;
        let mut band_paths = BTreeMap::new();
        let mut qa = None;
        for (n, line) in text.lines().enumerate() {
            let t = line.trim();
            if t.is_empty() || t.starts_with('#') {
                continue;
            }
            let (k, v) = t
                .split_once('=')
                .ok_or_else(|| merr(format!("line {}: expected key=value", n + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if k == "date" {
                date = Some(
                    NaiveDate::parse_from_str(v, "%Y-%m-%d")
                        .map_err(|e| merr(format!("bad date {v:?}: {e}")))?,
                );
            } else if k == "qa" {
                qa = Some(base.join(v));
            } else if let Some(b) = k.strip_prefix("band.") {
                let band: BandName = b.parse().map_err(|_| merr(format!("unknown band {b:?}")))?;
                band_paths.insert(band, base.join(v));
            } else {
                return Err(merr(format!("unknown key {k:?}")));
            }
        }
        let scene_date = date.ok_or_else(|| merr("missing date".into()))?;
        let qa_path = qa.ok_or_else(|| merr("missing qa".into()))?;
        for band in BandName::ALL {
            if !band_paths.contains_key(&band) {
                return Err(merr(format!("missing band.{band}")));
            }
        }
        Ok(Self {
            scene_date,
            band_paths,
            qa_path,
        })
    }

    /// Writes the manifest with paths relative to `path`'s directory when
    /// possible.
    pub fn write(&self, path: impl AsRef<Path>) -> Result<(), RasterError> {
        let path = path.as_ref();
        let base = path.parent().unwrap_or(Path::new(""));
        let rel = |p: &Path| -> String {
            p.strip_prefix(base).unwrap_or(p).to_string_lossy().into_owned()
        };
        let mut out = format!("date={}\n", self.scene_date.format("%Y-%m-%d"));
        for (band, p) in &self.band_paths {
            out.push_str(&format!("band.{band}={}\n", rel(p)));
        }
        out.push_str(&format!("qa={}\n", rel(&self.qa_path)));
        fs::write(path, out).map_err(io_err(path))
    }
}

/// Manifest file extension used when scanning a scene directory.
pub const MANIFEST_EXT: &str = "scene";

/// Reads every `*.scene` manifest in `dir`, sorted by date.
pub fn read_manifest_dir(dir: impl AsRef<Path>) -> Result<Vec<SceneManifest>, RasterError> {
    let dir = dir.as_ref();
    let mut manifests = Vec::new();
    for entry in fs::read_dir(dir).map_err(io_err(dir))? {
        let p = entry.map_err(io_err(dir))?.path();
        if p.extension().and_then(|e| e.to_str()) == Some(MANIFEST_EXT) {
            manifests.push(SceneManifest::read(&p)?);
        }
    }
    manifests.sort_by_key(|m| m.scene_date);
    if manifests.is_empty() {
        return Err(RasterError::Manifest {
            path: dir.to_path_buf(),
            message: "no scene manifests found".into(),
        });
    }
    Ok(manifests)
}

/// One QA-masked acquisition with every candidate feature precomputed.
#[derive(Debug, Clone)]
pub struct LoadedScene {
    pub date: NaiveDate,
    features: Vec<RasterGrid>,
}

impl LoadedScene {
    /// Builds a scene from in-memory band and QA grids. Band values are
    /// multiplied by `reflectance_scale` before any index is computed.
    pub fn from_grids(
        date: NaiveDate,
        bands: &BandSet,
        qa: &RasterGrid,
        reflectance_scale: f64,
    ) -> Result<Self, RasterError> {
        let mut masked = BandSet::new();
        for band in BandName::ALL {
            let g = bands.get(&band).ok_or(RasterError::MissingBand {
                feature: FeatureName::ALL[0],
                band,
            })?;
            let g = apply_qa_mask(g, qa)?;
            let g = if reflectance_scale == 1.0 {
                g
            } else {
                g.map_valid(|v| Some(v * reflectance_scale))
            };
            masked.insert(band, g);
        }
        let features = FeatureName::ALL
            .iter()
            .map(|&f| match f.as_band() {
                Some(b) => Ok(masked[&b].clone()),
                None => compute_index(f, &masked),
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self { date, features })
    }

    pub fn feature(&self, f: FeatureName) -> &RasterGrid {
        &self.features[f.index()]
    }
}

/// Time-ordered, co-registered scenes ready for per-pixel extraction.
#[derive(Debug, Clone)]
pub struct SceneStack {
    geometry: GridGeometry,
    scenes: Vec<LoadedScene>,
}

impl SceneStack {
    pub fn new(mut scenes: Vec<LoadedScene>) -> Result<Self, RasterError> {
        if scenes.is_empty() {
            return Err(RasterError::InvalidGrid("scene stack is empty".into()));
        }
        scenes.sort_by_key(|s| s.date);
        let geometry = *scenes[0].features[0].geometry();
        for s in &scenes {
            for g in &s.features {
                if !g.geometry.same_as(&geometry) {
                    return Err(RasterError::GeorefMismatch(format!(
                        "scene {} does not match the first scene's grid",
                        s.date
                    )));
                }
            }
        }
        Ok(Self { geometry, scenes })
    }

    pub fn load(manifests: &[SceneManifest], reflectance_scale: f64) -> Result<Self, RasterError> {
        let scenes = manifests
            .iter()
            .map(|m| {
                let mut bands = BandSet::new();
                for (&band, p) in &m.band_paths {
                    bands.insert(band, read_grid(p)?);
                }
                let qa = read_grid(&m.qa_path)?;
                LoadedScene::from_grids(m.scene_date, &bands, &qa, reflectance_scale)
            })
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(scenes)
    }

    pub fn geometry(&self) -> &GridGeometry {
        &self.geometry
    }

    pub fn len(&self) -> usize {
        self.scenes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scenes.is_empty()
    }

    pub fn dates(&self) -> Vec<NaiveDate> {
        self.scenes.iter().map(|s| s.date).collect()
    }

    pub fn scene(&self, i: usize) -> &LoadedScene {
        &self.scenes[i]
    }

    /// Stack for the pixel at (`row`, `col`).
    pub fn pixel_stack(&self, row: usize, col: usize, features: &[FeatureName]) -> Result<FeatureStack, RasterError> {
        let point = self.geometry.cell_center(row, col);
        let t = self.scenes.len();
        let days: Vec<i64> = self
            .scenes
            .iter()
            .map(|s| s.date.signed_duration_since(NaiveDate::MIN).num_days())
            .collect();
        let mut matrix = vec![0.0; t * features.len()];
        let mut valid_mask = vec![false; t * features.len()];
        let mut column = vec![None; t];
        for (j, &f) in features.iter().enumerate() {
            for (i, s) in self.scenes.iter().enumerate() {
                column[i] = s.feature(f).value(row, col);
            }
            let filled = fill_gaps(&days, &column).ok_or(RasterError::UnusablePixel { feature: f, point })?;
            for i in 0..t {
                matrix[i * features.len() + j] = filled[i];
                valid_mask[i * features.len() + j] = column[i].is_some();
            }
        }
        Ok(FeatureStack {
            point,
            features: features.to_vec(),
            times: t,
            matrix,
            valid_mask,
        })
    }
}

/// Linear interpolation in time across gaps; leading and trailing gaps take
/// the nearest valid value. `None` if the series has no valid value at all.
pub fn fill_gaps(days: &[i64], values: &[Option<f64>]) -> Option<Vec<f64>> {
    let valid: Vec<usize> = (0..values.len()).filter(|&i| values[i].is_some()).collect();
    let (&first, &last) = (valid.first()?, valid.last()?);
    let mut out = Vec::with_capacity(values.len());
    let mut k = 0usize;
    for i in 0..values.len() {
        if let Some(v) = values[i] {
            out.push(v);
            continue;
        }
        if i < first {
            out.push(values[first].unwrap());
        } else if i > last {
            out.push(values[last].unwrap());
        } else {
            while valid[k + 1] < i {
                k += 1;
            }
            let (a, b) = (valid[k], valid[k + 1]);
            let (va, vb) = (values[a].unwrap(), values[b].unwrap());
            let w = (days[i] - days[a]) as f64 / (days[b] - days[a]) as f64;
            out.push(va + w * (vb - va));
        }
    }
    Some(out)
}

/// `T x F` matrix of features at one location (rows = scenes in date order).
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStack {
    pub point: GeoPoint,
    pub features: Vec<FeatureName>,
    pub times: usize,
    pub matrix: Vec<f64>,
    pub valid_mask: Vec<bool>,
}

impl FeatureStack {
    pub fn get(&self, t: usize, f: usize) -> f64 {
        self.matrix[t * self.features.len() + f]
    }

    /// Keeps only the listed columns, in the given order.
    pub fn select(&self, features: &[FeatureName]) -> Option<FeatureStack> {
        let cols: Vec<usize> = features
            .iter()
            .map(|f| self.features.iter().position(|g| g == f))
            .collect::<Option<_>>()?;
        let mut matrix = Vec::with_capacity(self.times * cols.len());
        let mut valid_mask = Vec::with_capacity(self.times * cols.len());
        for t in 0..self.times {
            for &c in &cols {
                matrix.push(self.matrix[t * self.features.len() + c]);
                valid_mask.push(self.valid_mask[t * self.features.len() + c]);
            }
        }
        Some(FeatureStack {
            point: self.point,
            features: features.to_vec(),
            times: self.times,
            matrix,
            valid_mask,
        })
    }
}

/// Gap-filled `T x F` stack at `p`, scenes in date order.
pub fn extract_feature_stack(
    scenes: &SceneStack,
    features: &[FeatureName],
    p: GeoPoint,
) -> Result<FeatureStack, RasterError> {
    if features.is_empty() {
        return Err(RasterError::InvalidGrid("feature list is empty".into()));
    }
    let (row, col) = scenes.geometry.cell_of(p).ok_or(RasterError::OutOfExtent(p))?;
    let mut stack = scenes.pixel_stack(row, col, features)?;
    stack.point = p;
    Ok(stack)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn geom(ncols: usize, nrows: usize) -> GridGeometry {
        GridGeometry::new(ncols, nrows, -90.0, 40.0, 0.001).unwrap()
    }

    fn grid(ncols: usize, nrows: usize, values: Vec<f64>) -> RasterGrid {
        RasterGrid::new(geom(ncols, nrows), DEFAULT_NODATA, values).unwrap()
    }

    fn single(v: f64) -> RasterGrid {
        grid(1, 1, vec![v])
    }

    fn bands(pairs: &[(BandName, f64)]) -> BandSet {
        pairs.iter().map(|&(b, v)| (b, single(v))).collect()
    }

    fn index_value(kind: FeatureName, pairs: &[(BandName, f64)]) -> f64 {
        compute_index(kind, &bands(pairs)).unwrap().get(0, 0)
    }

    #[test]
    fn index_examples() {
        use BandName::*;
        let ndvi = index_value(FeatureName::NDVI, &[(NIR, 0.5), (Red, 0.1)]);
        assert!((ndvi - 0.4 / 0.6).abs() < 1e-12);
        assert!((ndvi - 0.666667).abs() < 1e-6);
        assert_eq!(index_value(FeatureName::NDVI, &[(NIR, 0.3), (Red, 0.3)]), 0.0);
        let evi = index_value(FeatureName::EVI, &[(NIR, 0.5), (Red, 0.1), (Blue, 0.05)]);
        assert!((evi - 1.0 / 1.75).abs() < 1e-12);
        assert!((evi - 0.571429).abs() < 1e-6);
        let endvi = index_value(FeatureName::ENDVI, &[(NIR, 0.5), (Green, 0.1), (Blue, 0.1)]);
        assert!((endvi - 0.5).abs() < 1e-12);
        let lswi = index_value(FeatureName::LSWI, &[(NIR, 0.4), (SWIR1, 0.2)]);
        assert!((lswi - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn index_nodata_and_zero_denominator() {
        use BandName::*;
        let nd = index_value(FeatureName::NDVI, &[(NIR, DEFAULT_NODATA), (Red, 0.1)]);
        assert_eq!(nd, DEFAULT_NODATA);
        let zero = index_value(FeatureName::NDVI, &[(NIR, 0.0), (Red, 0.0)]);
        assert_eq!(zero, DEFAULT_NODATA);
    }

    #[test]
    fn index_missing_band() {
        let err = compute_index(FeatureName::LSWI, &bands(&[(BandName::NIR, 0.4)])).unwrap_err();
        assert!(matches!(
            err,
            RasterError::MissingBand {
                band: BandName::SWIR1,
                ..
            }
        ));
    }

    // Written out independently of FeatureName::evaluate.
    fn oracle(kind: FeatureName, blue: f64, green: f64, red: f64, nir: f64, swir1: f64) -> f64 {
        match kind {
            FeatureName::NDVI => (nir - red) / (nir + red),
            FeatureName::EVI => 2.5 * (nir - red) / (nir + 6.0 * red - 7.0 * blue + 1.0),
            FeatureName::ENDVI => ((nir + green) - (2.0 * blue)) / ((nir + green) + (2.0 * blue)),
            FeatureName::LSWI => (nir - swir1) / (nir + swir1),
            _ => unreachable!(),
        }
    }

    #[test]
    fn indices_match_scalar_oracle_on_random_tuples() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 1000;
        let mut draws: Vec<[f64; 6]> = Vec::new();
        for _ in 0..n {
            draws.push(std::array::from_fn(|_| rng.random_range(0.001..1.0)));
        }
        let g = geom(n, 1);
        let band_set: BandSet = BandName::ALL
            .iter()
            .map(|&b| {
                let vals = draws.iter().map(|d| d[b.index()]).collect();
                (b, RasterGrid::new(g, DEFAULT_NODATA, vals).unwrap())
            })
            .collect();
        for kind in [FeatureName::NDVI, FeatureName::EVI, FeatureName::ENDVI, FeatureName::LSWI] {
            let out = compute_index(kind, &band_set).unwrap();
            for (i, d) in draws.iter().enumerate() {
                let want = oracle(kind, d[0], d[1], d[2], d[3], d[4]);
                assert!((out.get(0, i) - want).abs() < 1e-12, "{kind} #{i}");
                if kind != FeatureName::EVI {
                    assert!((-1.0..=1.0).contains(&out.get(0, i)));
                }
            }
        }
    }

    #[test]
    fn qa_mask_cases() {
        let band = grid(2, 2, vec![0.1, 0.2, 0.3, 0.4]);
        let clear = grid(2, 2, vec![0.0; 4]);
        assert_eq!(apply_qa_mask(&band, &clear).unwrap(), band);
        let cloudy = grid(2, 2, vec![1.0, 2.0, 4.0, 7.0]);
        assert_eq!(apply_qa_mask(&band, &cloudy).unwrap().valid_count(), 0);
        let checker = grid(2, 2, vec![0.0, 1.0, 1.0, 0.0]);
        let masked = apply_qa_mask(&band, &checker).unwrap();
        assert_eq!(masked.valid_count(), 2);
        // Idempotent.
        assert_eq!(apply_qa_mask(&masked, &checker).unwrap(), masked);
        let other = RasterGrid::new(GridGeometry::new(2, 2, 0.0, 0.0, 0.001).unwrap(), DEFAULT_NODATA, vec![0.0; 4])
            .unwrap();
        assert!(matches!(apply_qa_mask(&band, &other), Err(RasterError::GeorefMismatch(_))));
    }

    #[test]
    fn checkerboard_masks_half() {
        let n = 8;
        let band = grid(n, n, vec![0.5; n * n]);
        let qa = grid(n, n, (0..n * n).map(|i| ((i / n + i % n) % 2) as f64).collect());
        assert_eq!(apply_qa_mask(&band, &qa).unwrap().valid_count(), n * n / 2);
    }

    #[test]
    fn sample_pixel_cases() {
        let g = grid(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let geo = g.geometry();
        let c = geo.cell_center(1, 2);
        assert_eq!(sample_pixel(&g, c).unwrap(), 6.0);
        // North-west corner cell, just inside the outer boundary.
        let nw = GeoPoint::new(geo.bbox().max_lat - 1e-9, geo.xll + 1e-9).unwrap();
        assert_eq!(sample_pixel(&g, nw).unwrap(), 1.0);
        let se = GeoPoint::new(geo.yll + 1e-9, geo.bbox().max_lon - 1e-9).unwrap();
        assert_eq!(sample_pixel(&g, se).unwrap(), 6.0);
        let out = GeoPoint::new(geo.yll - 1e-6, geo.xll).unwrap();
        assert!(matches!(sample_pixel(&g, out), Err(RasterError::OutOfExtent(_))));
    }

    #[test]
    fn gap_fill_rules() {
        let days = [0, 10, 20, 40];
        let filled = fill_gaps(&days, &[Some(0.2), None, Some(0.4), Some(1.0)]).unwrap();
        for (a, b) in filled.iter().zip([0.2, 0.3, 0.4, 1.0]) {
            assert!((a - b).abs() < 1e-12);
        }
        // Interpolation uses dates, not positions.
        let filled = fill_gaps(&days, &[Some(0.0), Some(1.0), None, Some(3.0)]).unwrap();
        assert!((filled[2] - 5.0 / 3.0).abs() < 1e-12);
        assert_eq!(
            fill_gaps(&days, &[None, Some(0.5), Some(0.7), None]).unwrap(),
            vec![0.5, 0.5, 0.7, 0.7]
        );
        assert!(fill_gaps(&days, &[None, None, None, None]).is_none());
    }

    #[test]
    fn feature_names_round_trip() {
        for f in FeatureName::ALL {
            assert_eq!(f.as_str().parse::<FeatureName>().unwrap(), f);
        }
        assert_eq!(
            parse_feature_list("EVI, ENDVI,swir1").unwrap(),
            vec![FeatureName::EVI, FeatureName::ENDVI, FeatureName::SWIR1]
        );
        assert!(parse_feature_list("EVI,XYZ").is_err());
    }
}
