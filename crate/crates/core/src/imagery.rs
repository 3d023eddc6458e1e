//! Street-level image requests, retrieval and decoding.
//!
//! Images travel as binary PPM (P6, maxval 255). Offline runs resolve
//! requests against a fixture directory whose files are named
//! `<lat>_<lon>_<headingDeg>.ppm` (six-decimal coordinates), each with an
//! optional `<same>.meta` sidecar holding `date=YYYY-MM`.

use std::fmt;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use thiserror::Error;

use crate::geocore::{geo_distance, GeoPoint, Heading};

/// Static street-level imagery endpoint.
pub const STREET_VIEW_ENDPOINT: &str = "https://maps.googleapis.com/maps/api/streetview";

/// Environment variable holding the API key for live retrieval.
pub const API_KEY_ENV: &str = "STREET_VIEW_API_KEY";

/// Maximum distance between a request and a fixture that still matches.
pub const FIXTURE_TOLERANCE_M: f64 = 5.0;

pub const MAX_IMAGE_SIDE: u32 = 640;

#[derive(Debug, Error)]
pub enum ImageryError {
    #[error("image decode error: {0}")]
    Decode(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("no fixture within {tolerance_m} m of {point} facing {heading}")]
    NotFound {
        point: GeoPoint,
        heading: Heading,
        tolerance_m: f64,
    },
    #[error("transport error (status {status:?}): {message}")]
    Transport { status: Option<u16>, message: String },
    #[error("fixture directory {0} does not exist")]
    MissingFixtureDir(PathBuf),
    #[error("invalid capture date {0:?}, expected YYYY-MM")]
    InvalidDate(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> ImageryError + '_ {
    move |source| ImageryError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// RGB image with values in `[0, 1]`, row-major, channels interleaved.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl ImageTensor {
    pub const CHANNELS: usize = 3;

    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self, ImageryError> {
        if values.len() != height * width * Self::CHANNELS {
            return Err(ImageryError::Decode(format!(
                "expected {} values for {}x{} RGB, got {}",
                height * width * Self::CHANNELS,
                width,
                height,
                values.len()
            )));
        }
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(ImageryError::Decode(format!("value {v} outside [0, 1]")));
        }
        Ok(Self { height, width, values })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn pixel(&self, row: usize, col: usize) -> [f64; 3] {
        let i = (row * self.width + col) * 3;
        [self.values[i], self.values[i + 1], self.values[i + 2]]
    }

    /// Channel-major copy (`C x H x W`), the layout the network consumes.
    pub fn to_planar(&self) -> Vec<f64> {
        let n = self.height * self.width;
        let mut out = vec![0.0; n * 3];
        for (i, px) in self.values.chunks_exact(3).enumerate() {
            out[i] = px[0];
            out[n + i] = px[1];
            out[2 * n + i] = px[2];
        }
        out
    }

    /// Per-channel mean over the given row range.
    pub fn mean_color(&self, rows: std::ops::Range<usize>) -> [f64; 3] {
        let mut acc = [0.0; 3];
        let mut n = 0usize;
        for r in rows {
            for c in 0..self.width {
                let p = self.pixel(r, c);
                for k in 0..3 {
                    acc[k] += p[k];
                }
                n += 1;
            }
        }
        acc.map(|a| a / n.max(1) as f64)
    }
}

/// Month-resolution capture date.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct CaptureDate {
    pub year: i32,
    pub month: u32,
}

impl fmt::Display for CaptureDate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:04}-{:02}", self.year, self.month)
    }
}

impl FromStr for CaptureDate {
    type Err = ImageryError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || ImageryError::InvalidDate(s.to_string());
        let (y, m) = s.trim().split_once('-').ok_or_else(bad)?;
        if y.len() != 4 || m.len() != 2 {
            return Err(bad());
        }
        let year = y.parse().map_err(|_| bad())?;
        let month: u32 = m.parse().map_err(|_| bad())?;
        if !(1..=12).contains(&month) {
            return Err(bad());
        }
        Ok(Self { year, month })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StreetRequest {
    pub point: GeoPoint,
    pub heading: Heading,
    pub width: u32,
    pub height: u32,
    pub api_key: Option<String>,
}

impl StreetRequest {
    pub fn new(point: GeoPoint, heading: Heading, width: u32, height: u32) -> Result<Self, ImageryError> {
        let ok = |s: u32| (1..=MAX_IMAGE_SIDE).contains(&s);
        if !ok(width) || !ok(height) {
            return Err(ImageryError::InvalidRequest(format!(
                "image size {width}x{height} outside 1..={MAX_IMAGE_SIDE}"
            )));
        }
        Ok(Self {
            point,
            heading,
            width,
            height,
            api_key: None,
        })
    }

    pub fn with_key(mut self, key: impl Into<String>) -> Self {
        self.api_key = Some(key.into());
        self
    }

    pub fn url(&self) -> String {
        let mut url = build_street_request(self.point, self.heading, (self.width, self.height));
        if let Some(key) = &self.api_key {
            url.push_str("&key=");
            url.push_str(key);
        }
        url
    }

    /// File stem used for fixtures of this request's location and heading.
    pub fn fixture_stem(&self) -> String {
        fixture_stem(self.point, self.heading)
    }
}

/// Request URL for one cardinal view. Deterministic: identical inputs give
/// byte-identical strings.
pub fn build_street_request(p: GeoPoint, h: Heading, size: (u32, u32)) -> String {
    format!(
        "{STREET_VIEW_ENDPOINT}?size={}x{}&location={:.6},{:.6}&heading={}",
        size.0,
        size.1,
        p.lat_deg,
        p.lon_deg,
        h.degrees()
    )
}

pub fn fixture_stem(p: GeoPoint, h: Heading) -> String {
    format!("{:.6}_{:.6}_{}", p.lat_deg, p.lon_deg, h.degrees())
}

fn parse_fixture_stem(stem: &str) -> Option<(GeoPoint, Heading)> {
    // Longitudes may be negative, so split from the right.
    let mut parts = stem.rsplitn(3, '_');
    let heading = parts.next()?.parse::<u16>().ok().and_then(Heading::from_degrees)?;
    let lon = parts.next()?.parse::<f64>().ok()?;
    let lat = parts.next()?.parse::<f64>().ok()?;
    Some((GeoPoint::new(lat, lon).ok()?, heading))
}

#[derive(Debug, Clone, PartialEq)]
pub struct StreetImageRecord {
    pub id: String,
    pub capture_point: GeoPoint,
    pub heading: Heading,
    pub capture_date: Option<CaptureDate>,
    pub image: ImageTensor,
}

/// Where [`fetch_street_image`] gets its pixels from.
#[derive(Debug, Clone)]
pub enum ImageSource {
    Fixtures(FixtureIndex),
    #[cfg(feature = "live")]
    Live,
}

/// Parsed listing of a fixture directory.
#[derive(Debug, Clone)]
pub struct FixtureIndex {
    dir: PathBuf,
    entries: Vec<FixtureEntry>,
}

#[derive(Debug, Clone)]
struct FixtureEntry {
    stem: String,
    point: GeoPoint,
    heading: Heading,
}

impl FixtureIndex {
    /// Scans `dir` for fixture PPMs. Files that do not follow the naming
    /// scheme are ignored.
    pub fn open(dir: impl AsRef<Path>) -> Result<Self, ImageryError> {
        let dir = dir.as_ref();
        if !dir.is_dir() {
            return Err(ImageryError::MissingFixtureDir(dir.to_path_buf()));
        }
        let mut entries = Vec::new();
        for entry in fs::read_dir(dir).map_err(io_err(dir))? {
            let path = entry.map_err(io_err(dir))?.path();
            if path.extension().and_then(|e| e.to_str()) != Some("ppm") {
                continue;
            }
            let Some(stem) = path.file_stem().and_then(|s| s.to_str()) else {
                continue;
            };
            if let Some((point, heading)) = parse_fixture_stem(stem) {
                entries.push(FixtureEntry {
                    stem: stem.to_string(),
                    point,
                    heading,
                });
            }
        }
        // read_dir order is platform dependent.
        entries.sort_by(|a, b| a.stem.cmp(&b.stem));
        Ok(Self {
            dir: dir.to_path_buf(),
            entries,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    /// Nearest fixture with the same heading within the tolerance; ties go to
    /// the lexicographically smallest name.
    pub fn resolve(&self, p: GeoPoint, h: Heading) -> Result<(String, PathBuf), ImageryError> {
        let mut best: Option<(f64, &FixtureEntry)> = None;
        for e in self.entries.iter().filter(|e| e.heading == h) {
            let Ok(d) = geo_distance(p, e.point) else {
                continue;
            };
            if d <= FIXTURE_TOLERANCE_M && best.is_none_or(|(bd, _)| d < bd) {
                best = Some((d, e));
            }
        }
        best.map(|(_, e)| (e.stem.clone(), self.dir.join(format!("{}.ppm", e.stem))))
            .ok_or(ImageryError::NotFound {
                point: p,
                heading: h,
                tolerance_m: FIXTURE_TOLERANCE_M,
            })
    }
}

/// Writes a fixture image (and its date sidecar) under the canonical name.
pub fn write_fixture(
    dir: &Path,
    p: GeoPoint,
    h: Heading,
    image: &ImageTensor,
    date: Option<CaptureDate>,
) -> Result<PathBuf, ImageryError> {
    let stem = fixture_stem(p, h);
    let path = dir.join(format!("{stem}.ppm"));
    fs::write(&path, encode_ppm(image)).map_err(io_err(&path))?;
    if let Some(d) = date {
        let meta = dir.join(format!("{stem}.meta"));
        fs::write(&meta, format!("date={d}\n")).map_err(io_err(&meta))?;
    }
    Ok(path)
}

fn read_sidecar(path: &Path) -> Result<Option<CaptureDate>, ImageryError> {
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(None),
        Err(e) => return Err(io_err(path)(e)),
    };
    for line in text.lines() {
        if let Some(v) = line.trim().strip_prefix("date=") {
            return v.parse().map(Some);
        }
    }
    Ok(None)
}

/// Reads one PPM plus optional sidecar into a record.
pub fn load_record(
    id: &str,
    ppm_path: &Path,
    capture_point: GeoPoint,
    heading: Heading,
) -> Result<StreetImageRecord, ImageryError> {
    let bytes = fs::read(ppm_path).map_err(io_err(ppm_path))?;
    let image = decode_image(&bytes)?;
    let capture_date = read_sidecar(&ppm_path.with_extension("meta"))?;
    Ok(StreetImageRecord {
        id: id.to_string(),
        capture_point,
        heading,
        capture_date,
        image,
    })
}

pub fn fetch_street_image(req: &StreetRequest, source: &ImageSource) -> Result<StreetImageRecord, ImageryError> {
    match source {
        ImageSource::Fixtures(index) => {
            let (id, path) = index.resolve(req.point, req.heading)?;
            let (point, heading) = parse_fixture_stem(&id).expect("indexed stems parse");
            load_record(&id, &path, point, heading)
        }
        #[cfg(feature = "live")]
        ImageSource::Live => live::fetch(req),
    }
}

#[cfg(feature = "live")]
mod live {
    use super::*;

    pub(super) fn fetch(req: &StreetRequest) -> Result<StreetImageRecord, ImageryError> {
        let key = match &req.api_key {
            Some(k) => k.clone(),
            None => std::env::var(API_KEY_ENV).map_err(|_| {
                ImageryError::InvalidRequest(format!("live mode needs an API key ({API_KEY_ENV})"))
            })?,
        };
        let url = req.clone().with_key(key).url();
        let resp = reqwest::blocking::get(&url).map_err(|e| ImageryError::Transport {
            status: e.status().map(|s| s.as_u16()),
            message: e.to_string(),
        })?;
        let status = resp.status();
        if !status.is_success() {
            return Err(ImageryError::Transport {
                status: Some(status.as_u16()),
                message: format!("request for {} failed", req.fixture_stem()),
            });
        }
        let bytes = resp.bytes().map_err(|e| ImageryError::Transport {
            status: Some(status.as_u16()),
            message: e.to_string(),
        })?;
        let rgb = image::load_from_memory(&bytes)
            .map_err(|e| ImageryError::Decode(e.to_string()))?
            .to_rgb8();
        let (w, h) = rgb.dimensions();
        let values = rgb.as_raw().iter().map(|&b| f64::from(b) / 255.0).collect();
        Ok(StreetImageRecord {
            id: req.fixture_stem(),
            capture_point: req.point,
            heading: req.heading,
            capture_date: None,
            image: ImageTensor::new(h as usize, w as usize, values)?,
        })
    }
}

/// Encodes as P6 with maxval 255, rounding each value to the nearest step.
pub fn encode_ppm(t: &ImageTensor) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", t.width, t.height).into_bytes();
    out.extend(t.values.iter().map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8));
    out
}

/// Decodes a binary P6 PPM stream with maxval 255.
pub fn decode_image(bytes: &[u8]) -> Result<ImageTensor, ImageryError> {
    let mut pos = 0usize;
    let mut next_token = |bytes: &[u8]| -> Result<String, ImageryError> {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() && bytes[pos] != b'#' {
            pos += 1;
        }
        if start == pos {
            return Err(ImageryError::Decode("truncated header".into()));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    let magic = next_token(bytes)?;
    if magic != "P6" {
        return Err(ImageryError::Decode(format!("bad magic {magic:?}, expected P6")));
    }
    let mut dim = |name: &str| -> Result<usize, ImageryError> {
        let tok = next_token(bytes)?;
        tok.parse::<usize>()
            .ok()
            .filter(|&v| v > 0)
            .ok_or_else(|| ImageryError::Decode(format!("bad {name} {tok:?}")))
    };
    let width = dim("width")?;
    let height = dim("height")?;
    let maxval = dim("maxval")?;
    if maxval != 255 {
        return Err(ImageryError::Decode(format!("unsupported maxval {maxval}")));
    }
    // Exactly one whitespace byte separates the header from the raster.
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(ImageryError::Decode("missing raster data".into()));
    }
    let payload = &bytes[pos + 1..];
    let expected = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(3))
        .ok_or_else(|| ImageryError::Decode("dimensions overflow".into()))?;
    if payload.len() < expected {
        return Err(ImageryError::Decode(format!(
            "short payload: {} bytes for {width}x{height} (need {expected})",
            payload.len()
        )));
    }
    if payload.len() > expected {
        return Err(ImageryError::Decode(format!(
            "payload has {} trailing bytes",
            payload.len() - expected
        )));
    }
    let values = payload.iter().map(|&b| f64::from(b) / 255.0).collect();
    ImageTensor::new(height, width, values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ppm(w: usize, h: usize, data: &[u8]) -> Vec<u8> {
        let mut v = format!("P6\n{w} {h}\n255\n").into_bytes();
        v.extend_from_slice(data);
        v
    }

    #[test]
    fn request_url_examples() {
        let p = GeoPoint::new(35.5, -119.3).unwrap();
        let url = build_street_request(p, Heading::North, (640, 640));
        assert!(url.contains("heading=0"), "{url}");
        assert!(url.contains("size=640x640"), "{url}");
        assert!(url.contains("location=35.500000,-119.300000"), "{url}");
        assert!(build_street_request(p, Heading::West, (640, 640)).contains("heading=270"));
        assert_eq!(url, build_street_request(p, Heading::North, (640, 640)));
    }

    #[test]
    fn request_size_validated() {
        let p = GeoPoint::new(35.5, -119.3).unwrap();
        assert!(StreetRequest::new(p, Heading::East, 641, 100).is_err());
        assert!(StreetRequest::new(p, Heading::East, 0, 100).is_err());
        let r = StreetRequest::new(p, Heading::East, 64, 64).unwrap().with_key("abc");
        assert!(r.url().ends_with("&key=abc"));
    }

    #[test]
    fn decode_examples() {
        let t = decode_image(&ppm(1, 1, &[255, 255, 255])).unwrap();
        assert_eq!(t.values(), &[1.0, 1.0, 1.0]);
        let t = decode_image(&ppm(2, 1, &[0, 0, 0, 255, 255, 255])).unwrap();
        assert_eq!(t.values(), &[0.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
        assert_eq!((t.width(), t.height()), (2, 1));
    }

    #[test]
    fn decode_errors() {
        // Header says four pixels, payload holds three.
        assert!(matches!(decode_image(&ppm(2, 2, &[0; 9])), Err(ImageryError::Decode(_))));
        assert!(matches!(decode_image(b"P3\n1 1\n255\n000"), Err(ImageryError::Decode(_))));
        assert!(matches!(decode_image(b"P6\n1 1\n65535\n\0\0\0\0\0\0"), Err(ImageryError::Decode(_))));
        assert!(matches!(decode_image(b"P6\n1"), Err(ImageryError::Decode(_))));
        assert!(matches!(decode_image(b""), Err(ImageryError::Decode(_))));
    }

    #[test]
    fn decode_skips_comments() {
        let mut v = b"P6 # comment\n# another\n1 1 255\n".to_vec();
        v.extend_from_slice(&[0, 51, 255]);
        let t = decode_image(&v).unwrap();
        assert_eq!(t.values(), &[0.0, 0.2, 1.0]);
    }

    #[test]
    fn capture_date_parsing() {
        let d: CaptureDate = "2013-07".parse().unwrap();
        assert_eq!(d, CaptureDate { year: 2013, month: 7 });
        assert_eq!(d.to_string(), "2013-07");
        assert!("2013-13".parse::<CaptureDate>().is_err());
        assert!("2013-7".parse::<CaptureDate>().is_err());
    }

    #[test]
    fn fixture_stem_parses_negative_longitudes() {
        let p = GeoPoint::new(35.123456, -119.654321).unwrap();
        let stem = fixture_stem(p, Heading::South);
        assert_eq!(stem, "35.123456_-119.654321_180");
        let (q, h) = parse_fixture_stem(&stem).unwrap();
        assert_eq!(h, Heading::South);
        assert!((q.lat_deg - p.lat_deg).abs() < 1e-9 && (q.lon_deg - p.lon_deg).abs() < 1e-9);
    }

    fn quantized_tensor() -> impl Strategy<Value = ImageTensor> {
        (1usize..6, 1usize..6).prop_flat_map(|(h, w)| {
            proptest::collection::vec(0u8..=255, h * w * 3).prop_map(move |bytes| {
                ImageTensor::new(h, w, bytes.iter().map(|&b| f64::from(b) / 255.0).collect()).unwrap()
            })
        })
    }

    proptest! {
        #[test]
        fn ppm_round_trip(t in quantized_tensor()) {
            let back = decode_image(&encode_ppm(&t)).unwrap();
            prop_assert_eq!(back, t);
        }
    }
}
