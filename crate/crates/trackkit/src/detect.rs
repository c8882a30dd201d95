//! Detection records, box geometry, cross-modality NMS fusion, and
//! test-time-augmentation detection fusion.

use crate::assign::{hungarian, CostMatrix, Orientation};
use crate::mask::{Box2D, RleMask};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum DetectError {
    #[error("augmentation groups contain no identity (reference) group")]
    NoReferenceGroup,
    #[error("inverse-mapped box is degenerate after clipping")]
    DegenerateResult,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Frame,
    Event,
}

/// A single per-frame detection: box, confidence, optional mask, and the
/// sensing modality it came from.
#[derive(Debug, Clone)]
pub struct Detection {
    pub frame_index: u64,
    pub bbox: Box2D,
    pub score: f64,
    pub mask: Option<RleMask>,
    pub modality: Modality,
}

/// Geometric test-time augmentation applied to an image of `image_size`
/// (height, width) before detection.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugTransform {
    pub kind: AugKind,
    pub image_size: (usize, usize),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AugKind {
    Identity,
    HorizontalFlip,
    Scale(f64),
    Rotate(f64),
}

impl AugTransform {
    pub fn validate(&self) -> Result<(), String> {
        match self.kind {
            AugKind::Scale(s) if s <= 0.0 => Err(format!("scale factor must be positive, got {s}")),
            AugKind::Rotate(d) if d.abs() > 45.0 => {
                Err(format!("rotation must stay within ±45°, got {d}"))
            }
            _ => Ok(()),
        }
    }
}

/// Standard axis-aligned IoU; 0 when the boxes are disjoint.
pub fn box_iou(a: &Box2D, b: &Box2D) -> f64 {
    let x1 = a.x.max(b.x);
    let y1 = a.y.max(b.y);
    let x2 = (a.x + a.w).min(b.x + b.w);
    let y2 = (a.y + a.h).min(b.y + b.h);
    let inter = (x2 - x1).max(0.0) * (y2 - y1).max(0.0);
    if inter <= 0.0 {
        return 0.0;
    }
    inter / (a.area() + b.area() - inter)
}

/// Greedy non-maximum suppression by descending score (ties broken by the
/// lower original index). A detection is suppressed when its IoU with any
/// already-kept detection exceeds `iou_threshold`.
pub fn nms(dets: &[Detection], iou_threshold: f64) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| {
        dets[b]
            .score
            .partial_cmp(&dets[a].score)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut kept: Vec<Detection> = Vec::new();
    for &i in &order {
        let suppressed = kept
            .iter()
            .any(|k| box_iou(&k.bbox, &dets[i].bbox) > iou_threshold);
        if !suppressed {
            kept.push(dets[i].clone());
        }
    }
    kept
}

fn rotate_point(x: f64, y: f64, cx: f64, cy: f64, radians: f64) -> (f64, f64) {
    let (sin, cos) = radians.sin_cos();
    let dx = x - cx;
    let dy = y - cy;
    (cx + dx * cos - dy * sin, cy + dx * sin + dy * cos)
}

/// Map a box from original coordinates into the augmented image (used by
/// tests and synthetic TTA pipelines; the fusion path applies the inverse).
pub fn map_box(b: &Box2D, t: &AugTransform) -> Box2D {
    let (h, w) = (t.image_size.0 as f64, t.image_size.1 as f64);
    match t.kind {
        AugKind::Identity => *b,
        AugKind::HorizontalFlip => Box2D::new(w - b.x - b.w, b.y, b.w, b.h),
        AugKind::Scale(s) => Box2D::new(b.x * s, b.y * s, b.w * s, b.h * s),
        AugKind::Rotate(degrees) => {
            let rad = degrees.to_radians();
            axis_aligned_hull(b, w / 2.0, h / 2.0, rad)
        }
    }
}

fn axis_aligned_hull(b: &Box2D, cx: f64, cy: f64, radians: f64) -> Box2D {
    let corners = [
        (b.x, b.y),
        (b.x + b.w, b.y),
        (b.x, b.y + b.h),
        (b.x + b.w, b.y + b.h),
    ];
    let mut min_x = f64::INFINITY;
    let mut min_y = f64::INFINITY;
    let mut max_x = f64::NEG_INFINITY;
    let mut max_y = f64::NEG_INFINITY;
    for (x, y) in corners {
        let (rx, ry) = rotate_point(x, y, cx, cy, radians);
        min_x = min_x.min(rx);
        min_y = min_y.min(ry);
        max_x = max_x.max(rx);
        max_y = max_y.max(ry);
    }
    Box2D::new(min_x, min_y, max_x - min_x, max_y - min_y)
}

/// Map a box detected in a transformed image back to original coordinates.
/// Rotation maps the corners by the opposite angle, takes the axis-aligned
/// hull, and clips to the image.
pub fn inverse_map_box(b: &Box2D, t: &AugTransform) -> Result<Box2D, DetectError> {
    let (h, w) = (t.image_size.0 as f64, t.image_size.1 as f64);
    let out = match t.kind {
        AugKind::Identity => *b,
        AugKind::HorizontalFlip => Box2D::new(w - b.x - b.w, b.y, b.w, b.h),
        AugKind::Scale(s) => Box2D::new(b.x / s, b.y / s, b.w / s, b.h / s),
        AugKind::Rotate(degrees) => {
            let rad = (-degrees).to_radians();
            let hull = axis_aligned_hull(b, w / 2.0, h / 2.0, rad);
            let x1 = hull.x.max(0.0);
            let y1 = hull.y.max(0.0);
            let x2 = (hull.x + hull.w).min(w);
            let y2 = (hull.y + hull.h).min(h);
            Box2D::new(x1, y1, x2 - x1, y2 - y1)
        }
    };
    if out.w <= 0.0 || out.h <= 0.0 {
        return Err(DetectError::DegenerateResult);
    }
    Ok(out)
}

/// Fuse detections from augmented views into the identity (reference)
/// view. Each augmented group is inverse-mapped, matched to the reference
/// detections by maximum-IoU assignment, and pairs passing the IoU gate
/// and area-ratio bounds contribute to a confidence-weighted box average.
/// The fused score is the maximum over the matched set; unmatched
/// reference detections pass through, unmatched augmented ones are
/// dropped.
pub fn fuse_tta(
    groups: &[(AugTransform, Vec<Detection>)],
    iou_gate: f64,
    area_ratio_bounds: (f64, f64),
) -> Result<Vec<Detection>, DetectError> {
    let reference_idx = groups
        .iter()
        .position(|(t, _)| t.kind == AugKind::Identity)
        .ok_or(DetectError::NoReferenceGroup)?;
    let reference = &groups[reference_idx].1;
    // every reference detection starts with its own box in the average
    let mut matched: Vec<Vec<(Box2D, f64)>> = reference
        .iter()
        .map(|d| vec![(d.bbox, d.score)])
        .collect();

    for (gi, (transform, dets)) in groups.iter().enumerate() {
        if gi == reference_idx {
            continue;
        }
        let mut mapped: Vec<(Box2D, f64)> = Vec::with_capacity(dets.len());
        for d in dets {
            match inverse_map_box(&d.bbox, transform) {
                Ok(b) => mapped.push((b, d.score)),
                Err(_) => log::warn!("dropping augmented detection with degenerate inverse map"),
            }
        }
        if reference.is_empty() || mapped.is_empty() {
            continue;
        }
        let mut sim = Vec::with_capacity(reference.len() * mapped.len());
        for r in reference {
            for (mb, _) in &mapped {
                sim.push(box_iou(&r.bbox, mb));
            }
        }
        let matrix = CostMatrix::new(
            reference.len(),
            mapped.len(),
            sim,
            Orientation::MaximizeSimilarity,
        );
        for (ri, mi) in hungarian(&matrix).expect("similarities are finite") {
            let iou = matrix.get(ri, mi);
            let ratio = mapped[mi].0.area() / reference[ri].bbox.area();
            if iou > iou_gate && ratio >= area_ratio_bounds.0 && ratio <= area_ratio_bounds.1 {
                matched[ri].push(mapped[mi]);
            }
        }
    }

    let mut fused = Vec::with_capacity(reference.len());
    for (det, contributions) in reference.iter().zip(&matched) {
        let weight: f64 = contributions.iter().map(|&(_, s)| s).sum();
        let mut out = det.clone();
        if weight > 0.0 {
            let mut acc = [0.0f64; 4];
            for &(b, s) in contributions {
                acc[0] += b.x * s;
                acc[1] += b.y * s;
                acc[2] += b.w * s;
                acc[3] += b.h * s;
            }
            out.bbox = Box2D::new(
                acc[0] / weight,
                acc[1] / weight,
                acc[2] / weight,
                acc[3] / weight,
            );
        }
        out.score = contributions
            .iter()
            .map(|&(_, s)| s)
            .fold(f64::NEG_INFINITY, f64::max);
        fused.push(out);
    }
    Ok(fused)
}
