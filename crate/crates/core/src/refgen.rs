//! Reference points: labeled images moved from the camera position into the
//! parcel they show, plus validation against a truth raster.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use thiserror::Error;

use crate::geocore::{shift_to_parcel, GeoError, GeoPoint, ShiftParams};
use crate::imageclassifier::{LabelTaxonomy, LabeledImage};
use crate::metrics::{agreement_report, class_at, AgreementReport, MetricsError};
use crate::rasterstack::RasterGrid;

/// Largest number of extra pixel-size steps used to top up short classes.
pub const MAX_EXTRA_STEPS: u32 = 3;

pub const REFPOINT_HEADER: [&str; 7] = ["lat", "lon", "label", "source_image", "confidence", "shift_m", "extra_steps"];

#[derive(Debug, Error)]
pub enum RefGenError {
    #[error(transparent)]
    Geo(#[from] GeoError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("label {label} out of range for {classes} classes")]
    Label { label: usize, classes: usize },
    #[error("{path}: {message}")]
    Csv { path: PathBuf, message: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReferencePoint {
    pub location: GeoPoint,
    pub label: usize,
    pub source_image_id: String,
    pub confidence: Option<f64>,
    pub shift_m: f64,
    pub extra_steps: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassShortfall {
    pub class: usize,
    pub produced: usize,
    pub wanted: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefGenOutput {
    pub points: Vec<ReferencePoint>,
    /// Classes still under `min_per_class` after all extra steps.
    pub shortfalls: Vec<ClassShortfall>,
}

fn point_for(li: &LabeledImage, sp: &ShiftParams, extra_steps: u32) -> Result<ReferencePoint, GeoError> {
    let sp = sp.with_extra_steps(extra_steps);
    Ok(ReferencePoint {
        location: shift_to_parcel(li.record.capture_point, li.record.heading, &sp)?,
        label: li.label,
        source_image_id: li.record.id.clone(),
        confidence: li.confidence,
        shift_m: sp.distance_m(),
        extra_steps,
    })
}

/// One point per image at `extra_steps = 0`. Any class with fewer than
/// `min_per_class` points is topped up from its own images, in input order,
/// one extra step at a time up to [`MAX_EXTRA_STEPS`].
pub fn generate_reference_points(
    kept: &[LabeledImage],
    sp: &ShiftParams,
    min_per_class: usize,
    classes: usize,
) -> Result<RefGenOutput, RefGenError> {
    if let Some(li) = kept.iter().find(|li| li.label >= classes) {
        return Err(RefGenError::Label {
            label: li.label,
            classes,
        });
    }
    let base: Vec<ReferencePoint> = kept
        .par_iter()
        .map(|li| point_for(li, sp, 0))
        .collect::<Result<_, _>>()?;
    let mut points = base;
    let mut shortfalls = Vec::new();
    for class in 0..classes {
        let images: Vec<&LabeledImage> = kept.iter().filter(|li| li.label == class).collect();
        let mut count = images.len();
        if images.is_empty() || count >= min_per_class {
            continue;
        }
        'steps: for step in 1..=MAX_EXTRA_STEPS {
            for li in &images {
                if count >= min_per_class {
                    break 'steps;
                }
                points.push(point_for(li, sp, step)?);
                count += 1;
            }
        }
        if count < min_per_class {
            shortfalls.push(ClassShortfall {
                class,
                produced: count,
                wanted: min_per_class,
            });
        }
    }
    for class in 0..classes {
        if min_per_class > 0 && !kept.iter().any(|li| li.label == class) {
            shortfalls.push(ClassShortfall {
                class,
                produced: 0,
                wanted: min_per_class,
            });
        }
    }
    shortfalls.sort_by_key(|s| s.class);
    Ok(RefGenOutput { points, shortfalls })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Disagreement {
    pub point: ReferencePoint,
    /// Truth class at the point; `None` on nodata cells.
    pub truth: Option<usize>,
}

pub fn validate_reference_points(
    points: &[ReferencePoint],
    truth: &RasterGrid,
    taxonomy: &LabelTaxonomy,
) -> Result<(AgreementReport, Vec<Disagreement>), RefGenError> {
    let labeled: Vec<(GeoPoint, usize)> = points.iter().map(|p| (p.location, p.label)).collect();
    let report = agreement_report(&labeled, truth, taxonomy.classes())?;
    let mut disagreements = Vec::new();
    for p in points {
        let (row, col) = truth
            .geometry()
            .cell_of(p.location)
            .expect("agreement_report rejected out-of-extent points");
        let t = class_at(truth, row, col)?;
        if t != Some(p.label) {
            disagreements.push(Disagreement {
                point: p.clone(),
                truth: t,
            });
        }
    }
    Ok((report, disagreements))
}

pub fn disagreements_csv(items: &[Disagreement], taxonomy: &LabelTaxonomy) -> String {
    let mut s = String::from("lat,lon,label,truth,source_image\n");
    for d in items {
        let _ = writeln!(
            s,
            "{:.6},{:.6},{},{},{}",
            d.point.location.lat_deg,
            d.point.location.lon_deg,
            taxonomy.name(d.point.label),
            d.truth.map_or("nodata", |t| taxonomy.classes().get(t).map_or("invalid", |n| n.as_str())),
            d.point.source_image_id
        );
    }
    s
}

pub fn write_reference_points(path: &Path, points: &[ReferencePoint], taxonomy: &LabelTaxonomy) -> Result<(), RefGenError> {
    let err = |m: String| RefGenError::Csv {
        path: path.to_path_buf(),
        message: m,
    };
    let mut w = csv::Writer::from_path(path).map_err(|e| err(e.to_string()))?;
    w.write_record(REFPOINT_HEADER).map_err(|e| err(e.to_string()))?;
    for p in points {
        w.write_record([
            format!("{:.6}", p.location.lat_deg),
            format!("{:.6}", p.location.lon_deg),
            taxonomy.name(p.label).to_string(),
            p.source_image_id.clone(),
            p.confidence.map(|c| format!("{c:.6}")).unwrap_or_default(),
            format!("{:.3}", p.shift_m),
            p.extra_steps.to_string(),
        ])
        .map_err(|e| err(e.to_string()))?;
    }
    w.flush().map_err(|e| err(e.to_string()))
}

pub fn read_reference_points(path: &Path, taxonomy: &LabelTaxonomy) -> Result<Vec<ReferencePoint>, RefGenError> {
    let err = |m: String| RefGenError::Csv {
        path: path.to_path_buf(),
        message: m,
    };
    let mut r = csv::Reader::from_path(path).map_err(|e| err(e.to_string()))?;
    let header = r.headers().map_err(|e| err(e.to_string()))?;
    if header.iter().ne(REFPOINT_HEADER) {
        return Err(err(format!("expected header {}", REFPOINT_HEADER.join(","))));
    }
    let mut out = Vec::new();
    for (n, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| err(e.to_string()))?;
        let bad = |what: &str| err(format!("line {}: bad {what}", n + 2));
        let lat = rec[0].parse().map_err(|_| bad("lat"))?;
        let lon = rec[1].parse().map_err(|_| bad("lon"))?;
        out.push(ReferencePoint {
            location: GeoPoint::new(lat, lon).map_err(|_| bad("coordinate"))?,
            label: taxonomy.index_of(&rec[2]).map_err(|_| bad("label"))?,
            source_image_id: rec[3].to_string(),
            confidence: match &rec[4] {
                "" => None,
                s => Some(s.parse().map_err(|_| bad("confidence"))?),
            },
            shift_m: rec[5].parse().map_err(|_| bad("shift_m"))?,
            extra_steps: rec[6].parse().map_err(|_| bad("extra_steps"))?,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geocore::{geo_distance, Heading};
    use crate::imagery::{ImageTensor, StreetImageRecord};
    use crate::rasterstack::GridGeometry;
    use proptest::prelude::*;
    use std::collections::BTreeSet;

    fn image(id: usize, label: usize, p: GeoPoint, h: Heading) -> LabeledImage {
        LabeledImage {
            record: StreetImageRecord {
                id: format!("img{id}"),
                capture_point: p,
                heading: h,
                capture_date: None,
                image: ImageTensor::new(1, 1, vec![0.0; 3]).unwrap(),
            },
            label,
            confidence: Some(0.9),
        }
    }

    fn sp() -> ShiftParams {
        ShiftParams::new(12.0, 30.0, 0).unwrap()
    }

    fn camera(i: usize) -> GeoPoint {
        GeoPoint::new(40.0 + i as f64 * 0.001, -88.0).unwrap()
    }

    #[test]
    fn no_augmentation_when_enough() {
        let imgs: Vec<_> = (0..10).map(|i| image(i, 0, camera(i), Heading::North)).collect();
        let out = generate_reference_points(&imgs, &sp(), 10, 3).unwrap();
        assert_eq!(out.points.len(), 10);
        assert!(out.points.iter().all(|p| p.extra_steps == 0 && p.shift_m == 36.0));
        assert_eq!(out.shortfalls.len(), 2, "classes 1 and 2 have no images");
    }

    #[test]
    fn short_class_gets_one_extra_step() {
        let imgs: Vec<_> = (0..5).map(|i| image(i, 1, camera(i), Heading::West)).collect();
        let out = generate_reference_points(&imgs, &sp(), 10, 2).unwrap();
        assert_eq!(out.points.len(), 10);
        assert_eq!(out.points.iter().filter(|p| p.extra_steps == 0).count(), 5);
        assert_eq!(out.points.iter().filter(|p| p.extra_steps == 1).count(), 5);
        assert!(out.points.iter().filter(|p| p.extra_steps == 1).all(|p| p.shift_m == 66.0));
        assert!(out.shortfalls.iter().all(|s| s.class == 0));
    }

    #[test]
    fn shortfall_after_cap() {
        let imgs = vec![image(0, 0, camera(0), Heading::South)];
        let out = generate_reference_points(&imgs, &sp(), 10, 1).unwrap();
        assert_eq!(out.points.len(), 1 + MAX_EXTRA_STEPS as usize);
        assert_eq!(
            out.shortfalls,
            [ClassShortfall {
                class: 0,
                produced: 4,
                wanted: 10
            }]
        );
    }

    #[test]
    fn east_heading_moves_east() {
        let c = camera(0);
        let out = generate_reference_points(&[image(0, 0, c, Heading::East)], &sp(), 1, 1).unwrap();
        let p = out.points[0].location;
        assert_eq!(p.lat_deg, c.lat_deg);
        assert!(p.lon_deg > c.lon_deg);
    }

    #[test]
    fn validation_lists_disagreements() {
        let tax = LabelTaxonomy::illinois();
        // 3x3 grid of 0.001 deg cells; the middle column is soybean.
        let geo = GridGeometry::new(3, 3, 0.0, 0.0, 0.001).unwrap();
        let vals: Vec<f64> = (0..9).map(|i| if i % 3 == 1 { 1.0 } else { 0.0 }).collect();
        let truth = RasterGrid::new(geo, -9999.0, vals).unwrap();
        let mk = |lon: f64, label: usize| ReferencePoint {
            location: GeoPoint::new(0.0015, lon).unwrap(),
            label,
            source_image_id: "x".into(),
            confidence: None,
            shift_m: 36.0,
            extra_steps: 0,
        };
        let pts = [mk(0.0005, 0), mk(0.0015, 1), mk(0.0025, 1)];
        let (report, dis) = validate_reference_points(&pts, &truth, &tax).unwrap();
        assert_eq!(report.class("corn").unwrap().fraction(), 1.0);
        assert_eq!(report.class("soybean").unwrap().fraction(), 0.5);
        assert_eq!(dis.len(), 1);
        assert_eq!(dis[0].truth, Some(0));
        let (all_good, none) = validate_reference_points(&pts[..2], &truth, &tax).unwrap();
        assert!(all_good.classes.iter().all(|c| c.fraction() == 1.0));
        assert!(none.is_empty());
        assert!(validate_reference_points(&[mk(0.5, 0)], &truth, &tax).is_err());
    }

    proptest! {
        #[test]
        fn points_sit_at_the_shift_distance(
            n in 1usize..12,
            min in 0usize..40,
            hs in proptest::collection::vec(0usize..4, 12),
            y in 4.0f64..30.0,
            x in 10.0f64..60.0,
        ) {
            let sp = ShiftParams::new(y, x, 0).unwrap();
            let imgs: Vec<_> = (0..n).map(|i| image(i, i % 2, camera(i), Heading::ALL[hs[i]])).collect();
            let out = generate_reference_points(&imgs, &sp, min, 2).unwrap();
            prop_assert!(out.points.len() >= n);
            let mut seen = BTreeSet::new();
            for p in &out.points {
                prop_assert!(seen.insert((p.source_image_id.clone(), p.extra_steps)));
                prop_assert!((p.shift_m - (0.5 * y + x * (1.0 + p.extra_steps as f64))).abs() < 1e-9);
                let src = imgs.iter().find(|li| li.record.id == p.source_image_id).unwrap();
                let d = geo_distance(src.record.capture_point, p.location).unwrap();
                prop_assert!((d - p.shift_m).abs() < 1e-2);
                // Collinear along the heading: only one axis moves.
                let c = src.record.capture_point;
                match src.record.heading {
                    Heading::North | Heading::South => prop_assert_eq!(p.location.lon_deg, c.lon_deg),
                    _ => prop_assert_eq!(p.location.lat_deg, c.lat_deg),
                }
            }
        }
    }
}
