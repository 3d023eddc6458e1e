//! Geographic primitives: points, cardinal headings, metric offsets,
//! sampling grids and the camera-to-parcel coordinate shift.
//!
//! All metric conversions use a local equirectangular model with a fixed
//! 111 320 m per degree of latitude. Longitude degrees shrink with
//! `cos(lat)`. Study areas are a few tens of kilometres across, so the
//! model error is far below a Landsat pixel.

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

/// Metres per degree of latitude (and of longitude at the equator).
pub const METERS_PER_DEGREE: f64 = 111_320.0;

/// Offsets are refused poleward of this latitude where `cos(lat)` degenerates.
pub const MAX_METRIC_LATITUDE: f64 = 85.0;

/// Largest single offset accepted by [`offset_point`], in metres. Roughly
/// two degrees of latitude; beyond that the local model is not meaningful.
pub const MAX_OFFSET_M: f64 = 200_000.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeoError {
    #[error("invalid coordinate ({lat}, {lon})")]
    InvalidCoordinate { lat: f64, lon: f64 },
    #[error("latitude {0} is outside the supported metric range of +/-85 degrees")]
    UnsupportedLatitude(f64),
    #[error("offset distance {0} m is outside [0, 200000]")]
    InvalidDistance(f64),
    #[error("invalid heading {0:?}; expected one of 0, 90, 180, 270 or N/E/S/W")]
    InvalidHeading(String),
    #[error("invalid shift parameters: {0}")]
    InvalidShift(String),
    #[error("bounding box has zero or negative extent")]
    EmptyGrid,
    #[error("grid spacing {0} m is outside [1, 10000]")]
    InvalidSpacing(f64),
}

/// A WGS84 latitude/longitude pair in degrees.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeoPoint {
    pub lat_deg: f64,
    pub lon_deg: f64,
}

impl GeoPoint {
    pub fn new(lat_deg: f64, lon_deg: f64) -> Result<Self, GeoError> {
        let valid = lat_deg.is_finite()
            && lon_deg.is_finite()
            && (-90.0..=90.0).contains(&lat_deg)
            && (-180.0..=180.0).contains(&lon_deg);
        if valid {
            Ok(Self { lat_deg, lon_deg })
        } else {
            Err(GeoError::InvalidCoordinate {
                lat: lat_deg,
                lon: lon_deg,
            })
        }
    }
}

impl fmt::Display for GeoPoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({:.6}, {:.6})", self.lat_deg, self.lon_deg)
    }
}

/// Camera facing direction, restricted to the four cardinal directions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Heading {
    North,
    East,
    South,
    West,
}

impl Heading {
    pub const ALL: [Heading; 4] = [Heading::North, Heading::East, Heading::South, Heading::West];

    pub fn degrees(self) -> u16 {
        match self {
            Heading::North => 0,
            Heading::East => 90,
            Heading::South => 180,
            Heading::West => 270,
        }
    }

    pub fn from_degrees(deg: u16) -> Option<Self> {
        match deg {
            0 => Some(Heading::North),
            90 => Some(Heading::East),
            180 => Some(Heading::South),
            270 => Some(Heading::West),
            _ => None,
        }
    }

    pub fn opposite(self) -> Self {
        match self {
            Heading::North => Heading::South,
            Heading::East => Heading::West,
            Heading::South => Heading::North,
            Heading::West => Heading::East,
        }
    }

    /// Unit displacement as (north, east).
    pub fn unit(self) -> (f64, f64) {
        match self {
            Heading::North => (1.0, 0.0),
            Heading::East => (0.0, 1.0),
            Heading::South => (-1.0, 0.0),
            Heading::West => (0.0, -1.0),
        }
    }
}

impl fmt::Display for Heading {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.degrees())
    }
}

impl FromStr for Heading {
    type Err = GeoError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let t = s.trim();
        match t.to_ascii_lowercase().as_str() {
            "n" | "north" => return Ok(Heading::North),
            "e" | "east" => return Ok(Heading::East),
            "s" | "south" => return Ok(Heading::South),
            "w" | "west" => return Ok(Heading::West),
            _ => {}
        }
        t.parse::<u16>()
            .ok()
            .and_then(Heading::from_degrees)
            .ok_or_else(|| GeoError::InvalidHeading(s.to_string()))
    }
}

/// Empirical shift coefficients: road width `y` and pixel size `x`, plus the
/// number of additional whole-pixel steps beyond the first.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShiftParams {
    pub road_width_y_m: f64,
    pub pixel_size_x_m: f64,
    pub extra_steps: u32,
}

impl ShiftParams {
    pub fn new(road_width_y_m: f64, pixel_size_x_m: f64, extra_steps: u32) -> Result<Self, GeoError> {
        if !road_width_y_m.is_finite() || road_width_y_m < 0.0 {
            return Err(GeoError::InvalidShift(format!(
                "road width must be >= 0, got {road_width_y_m}"
            )));
        }
        if !pixel_size_x_m.is_finite() || pixel_size_x_m <= 0.0 {
            return Err(GeoError::InvalidShift(format!(
                "pixel size must be > 0, got {pixel_size_x_m}"
            )));
        }
        Ok(Self {
            road_width_y_m,
            pixel_size_x_m,
            extra_steps,
        })
    }

    pub fn with_extra_steps(self, extra_steps: u32) -> Self {
        Self { extra_steps, ..self }
    }

    /// Half the road width to reach the parcel edge, then one pixel of buffer
    /// plus `extra_steps` further pixels.
    pub fn distance_m(&self) -> f64 {
        0.5 * self.road_width_y_m + self.pixel_size_x_m * (1.0 + f64::from(self.extra_steps))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundingBox {
    pub min_lat: f64,
    pub max_lat: f64,
    pub min_lon: f64,
    pub max_lon: f64,
}

impl BoundingBox {
    pub fn new(min_lat: f64, max_lat: f64, min_lon: f64, max_lon: f64) -> Result<Self, GeoError> {
        GeoPoint::new(min_lat, min_lon)?;
        GeoPoint::new(max_lat, max_lon)?;
        if min_lat >= max_lat || min_lon >= max_lon {
            return Err(GeoError::EmptyGrid);
        }
        Ok(Self {
            min_lat,
            max_lat,
            min_lon,
            max_lon,
        })
    }

    pub fn contains(&self, p: GeoPoint) -> bool {
        (self.min_lat..=self.max_lat).contains(&p.lat_deg)
            && (self.min_lon..=self.max_lon).contains(&p.lon_deg)
    }

    pub fn center(&self) -> GeoPoint {
        GeoPoint {
            lat_deg: 0.5 * (self.min_lat + self.max_lat),
            lon_deg: 0.5 * (self.min_lon + self.max_lon),
        }
    }
}

fn metric_cos(lat_deg: f64) -> Result<f64, GeoError> {
    if lat_deg.abs() > MAX_METRIC_LATITUDE {
        return Err(GeoError::UnsupportedLatitude(lat_deg));
    }
    Ok(lat_deg.to_radians().cos())
}

/// Moves `p` by `d` metres along heading `h`. Only the axis matching the
/// heading changes.
pub fn offset_point(p: GeoPoint, h: Heading, d: f64) -> Result<GeoPoint, GeoError> {
    if !d.is_finite() || !(0.0..=MAX_OFFSET_M).contains(&d) {
        return Err(GeoError::InvalidDistance(d));
    }
    let cos_lat = metric_cos(p.lat_deg)?;
    let (north, east) = h.unit();
    let lat = p.lat_deg + north * d / METERS_PER_DEGREE;
    let lon = p.lon_deg + east * d / (METERS_PER_DEGREE * cos_lat);
    GeoPoint::new(lat, lon)
}

/// Equirectangular distance in metres, using the mean latitude of the pair.
pub fn geo_distance(a: GeoPoint, b: GeoPoint) -> Result<f64, GeoError> {
    metric_cos(a.lat_deg)?;
    metric_cos(b.lat_deg)?;
    let cos_mean = (0.5 * (a.lat_deg + b.lat_deg)).to_radians().cos();
    let dy = (b.lat_deg - a.lat_deg) * METERS_PER_DEGREE;
    let dx = (b.lon_deg - a.lon_deg) * METERS_PER_DEGREE * cos_mean;
    Ok(dx.hypot(dy))
}

/// Camera position shifted into the parcel it faces.
pub fn shift_to_parcel(camera: GeoPoint, h: Heading, sp: &ShiftParams) -> Result<GeoPoint, GeoError> {
    offset_point(camera, h, sp.distance_m())
}

// Slack for floor() so extents that are whole multiples of the spacing are
// not lost to rounding.
const GRID_SLACK: f64 = 1e-6;

/// Regular grid over `bbox`, row-major from the north-west corner.
///
/// Rows step south by `spacing_m`. Within a row, points step east by
/// `spacing_m` measured at that row's latitude, so rows further from the
/// equator can hold more points.
pub fn make_sampling_grid(bbox: &BoundingBox, spacing_m: f64) -> Result<Vec<GeoPoint>, GeoError> {
    if !spacing_m.is_finite() || !(1.0..=10_000.0).contains(&spacing_m) {
        return Err(GeoError::InvalidSpacing(spacing_m));
    }
    if bbox.min_lat >= bbox.max_lat || bbox.min_lon >= bbox.max_lon {
        return Err(GeoError::EmptyGrid);
    }
    let dlat = spacing_m / METERS_PER_DEGREE;
    let height_steps = ((bbox.max_lat - bbox.min_lat) / dlat + GRID_SLACK).floor() as usize;
    // One longitude step for the whole box, taken at its central latitude, so
    // columns stay aligned.
    let dlon = spacing_m / (METERS_PER_DEGREE * metric_cos(bbox.center().lat_deg)?);
    let width_steps = ((bbox.max_lon - bbox.min_lon) / dlon + GRID_SLACK).floor() as usize;
    let mut points = Vec::with_capacity((height_steps + 1) * (width_steps + 1));
    for row in 0..=height_steps {
        let lat = (bbox.max_lat - row as f64 * dlat).max(bbox.min_lat);
        for col in 0..=width_steps {
            let lon = (bbox.min_lon + col as f64 * dlon).min(bbox.max_lon);
            points.push(GeoPoint::new(lat, lon)?);
        }
    }
    Ok(points)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pt(lat: f64, lon: f64) -> GeoPoint {
        GeoPoint::new(lat, lon).unwrap()
    }

    fn box_of_meters(lat0: f64, lon0: f64, height_m: f64, width_m: f64) -> BoundingBox {
        let dlat = height_m / METERS_PER_DEGREE;
        let mid = lat0 + dlat / 2.0;
        let dlon = width_m / (METERS_PER_DEGREE * mid.to_radians().cos());
        BoundingBox::new(lat0, lat0 + dlat, lon0, lon0 + dlon).unwrap()
    }

    #[test]
    fn offset_formula_examples() {
        let q = offset_point(pt(0.0, 0.0), Heading::East, 111_320.0).unwrap();
        assert_eq!(q.lat_deg, 0.0);
        assert!((q.lon_deg - 1.0).abs() < 1e-12);
        // cos(60) = 0.5 doubles the longitude step.
        let q = offset_point(pt(60.0, 0.0), Heading::East, 55_660.0).unwrap();
        assert_eq!(q.lat_deg, 60.0);
        assert!((q.lon_deg - 1.0).abs() < 1e-12, "{}", q.lon_deg);
        let q = offset_point(pt(10.0, 5.0), Heading::South, 11_132.0).unwrap();
        assert!((q.lat_deg - 9.9).abs() < 1e-12);
        assert_eq!(q.lon_deg, 5.0);
    }

    #[test]
    fn zero_offset_is_identity() {
        let p = pt(45.0, 10.0);
        assert_eq!(offset_point(p, Heading::North, 0.0).unwrap(), p);
    }

    #[test]
    fn offset_rejects_polar_latitudes_and_bad_distances() {
        assert_eq!(
            offset_point(pt(86.0, 0.0), Heading::East, 10.0),
            Err(GeoError::UnsupportedLatitude(86.0))
        );
        assert!(offset_point(pt(0.0, 0.0), Heading::East, -1.0).is_err());
        assert!(offset_point(pt(0.0, 0.0), Heading::East, 200_001.0).is_err());
        assert!(offset_point(pt(0.0, 0.0), Heading::East, f64::NAN).is_err());
    }

    #[test]
    fn distance_examples() {
        let a = pt(12.0, -7.5);
        assert_eq!(geo_distance(a, a).unwrap(), 0.0);
        assert!((geo_distance(pt(0.0, 0.0), pt(0.0, 1.0)).unwrap() - 111_320.0).abs() < 1e-9);
        let b = offset_point(a, Heading::East, 500.0).unwrap();
        assert!((geo_distance(a, b).unwrap() - 500.0).abs() < 0.01);
    }

    #[test]
    fn shift_distance_examples() {
        let sp = ShiftParams::new(12.0, 30.0, 0).unwrap();
        assert!((sp.distance_m() - 36.0).abs() < 1e-12);
        assert!((sp.with_extra_steps(2).distance_m() - 96.0).abs() < 1e-12);
        assert!((ShiftParams::new(0.0, 10.0, 0).unwrap().distance_m() - 10.0).abs() < 1e-12);

        let cam = pt(40.2, -89.6);
        let q = shift_to_parcel(cam, Heading::East, &sp).unwrap();
        assert_eq!(q.lat_deg, cam.lat_deg);
        assert!(q.lon_deg > cam.lon_deg);
        assert!((geo_distance(cam, q).unwrap() - 36.0).abs() < 1e-6);
    }

    #[test]
    fn shift_params_validation() {
        assert!(ShiftParams::new(-1.0, 30.0, 0).is_err());
        assert!(ShiftParams::new(12.0, 0.0, 0).is_err());
    }

    #[test]
    fn heading_parsing() {
        assert_eq!("270".parse::<Heading>().unwrap(), Heading::West);
        assert_eq!("north".parse::<Heading>().unwrap(), Heading::North);
        assert!("45".parse::<Heading>().is_err());
        for h in Heading::ALL {
            assert_eq!(Heading::from_degrees(h.degrees()), Some(h));
        }
    }

    #[test]
    fn minimal_grid_has_four_corners() {
        let bbox = box_of_meters(35.0, -119.0, 30.0, 30.0);
        let g = make_sampling_grid(&bbox, 30.0).unwrap();
        assert_eq!(g.len(), 4);
        // North-west origin, row-major.
        assert_eq!(g[0].lat_deg, bbox.max_lat);
        assert_eq!(g[0].lon_deg, bbox.min_lon);
        assert!(g[1].lon_deg > g[0].lon_deg);
        assert!(g[2].lat_deg < g[0].lat_deg);
    }

    #[test]
    fn grid_counts_follow_floor_rule() {
        // floor(90/30)+1 = 4 per axis.
        let bbox = box_of_meters(0.0, 0.0, 90.0, 90.0);
        assert_eq!(make_sampling_grid(&bbox, 30.0).unwrap().len(), 16);

        let bbox = box_of_meters(40.0, -89.0, 600.0, 600.0);
        let fine = make_sampling_grid(&bbox, 30.0).unwrap().len() as f64;
        let coarse = make_sampling_grid(&bbox, 60.0).unwrap().len() as f64;
        // 21x21 vs 11x11 points.
        let per_axis_fine = fine.sqrt();
        let per_axis_coarse = coarse.sqrt();
        assert!((per_axis_fine / 2.0 - per_axis_coarse).abs() <= 1.0);
    }

    #[test]
    fn grid_adjacent_points_are_spacing_apart() {
        let bbox = box_of_meters(35.4, -119.4, 300.0, 300.0);
        let g = make_sampling_grid(&bbox, 60.0).unwrap();
        let per_row = g.iter().filter(|p| p.lat_deg == g[0].lat_deg).count();
        // Along a column the step is exact.
        let d = geo_distance(g[0], g[per_row]).unwrap();
        assert!((d - 60.0).abs() < 1e-6);
        // Along a row the longitude step is set at the box centre latitude.
        let d = geo_distance(g[0], g[1]).unwrap();
        assert!((d - 60.0).abs() < 1e-2);
    }

    #[test]
    fn grid_errors() {
        let bbox = BoundingBox {
            min_lat: 1.0,
            max_lat: 1.0,
            min_lon: 0.0,
            max_lon: 1.0,
        };
        assert_eq!(make_sampling_grid(&bbox, 30.0), Err(GeoError::EmptyGrid));
        let bbox = box_of_meters(0.0, 0.0, 90.0, 90.0);
        assert!(matches!(make_sampling_grid(&bbox, 0.5), Err(GeoError::InvalidSpacing(_))));
    }

    fn heading() -> impl Strategy<Value = Heading> {
        prop_oneof![
            Just(Heading::North),
            Just(Heading::East),
            Just(Heading::South),
            Just(Heading::West)
        ]
    }

    proptest! {
        #[test]
        fn round_trip_distance(lat in -70.0f64..70.0, lon in -170.0f64..170.0, h in heading(), d in 0.001f64..1000.0) {
            let p = pt(lat, lon);
            let q = offset_point(p, h, d).unwrap();
            let back = geo_distance(p, q).unwrap();
            prop_assert!(((back - d) / d).abs() < 1e-6);
        }

        #[test]
        fn opposite_headings_cancel(lat in -70.0f64..70.0, lon in -170.0f64..170.0, h in heading(), d in 0.0f64..1000.0) {
            let p = pt(lat, lon);
            let q = offset_point(offset_point(p, h, d).unwrap(), h.opposite(), d).unwrap();
            prop_assert!((q.lat_deg - p.lat_deg).abs() < 1e-9);
            prop_assert!((q.lon_deg - p.lon_deg).abs() < 1e-9);
        }

        #[test]
        fn shift_monotone_in_extra_steps(y in 0.0f64..40.0, x in 1.0f64..60.0, k in 0u32..10) {
            let sp = ShiftParams::new(y, x, k).unwrap();
            prop_assert!(sp.with_extra_steps(k + 1).distance_m() > sp.distance_m());
        }

        #[test]
        fn grid_points_inside_bbox(lat in -60.0f64..60.0, lon in -170.0f64..170.0,
                                   h in 20.0f64..800.0, w in 20.0f64..800.0, s in 10.0f64..120.0) {
            let bbox = box_of_meters(lat, lon, h, w);
            let g = make_sampling_grid(&bbox, s).unwrap();
            prop_assert!(!g.is_empty());
            for p in g {
                prop_assert!(bbox.contains(p));
            }
        }
    }
}
