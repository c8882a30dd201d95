//! Mask-based multi-object tracking evaluation: HOTA (with DetA/AssA),
//! CLEAR-MOT (MOTA, identity switches), and IDF1, per sequence and pooled.

use crate::assign::{hungarian, CostMatrix, Orientation};
use crate::mask::{rle_iou, RleMask};
use serde::Serialize;
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("mask sizes differ within one frame")]
    SizeMismatch,
    #[error("sequence lengths differ: gt {0}, prediction {1}")]
    LengthMismatch(usize, usize),
    #[error("sequence id sets differ: {0}")]
    UnknownSequenceId(String),
}

/// One annotated identity: a mask per frame, absent frames are None.
#[derive(Debug, Clone)]
pub struct GtInstance {
    pub id: i64,
    pub masks: Vec<Option<RleMask>>,
}

#[derive(Debug, Clone)]
pub struct GtSequence {
    pub id: String,
    pub length: usize,
    pub instances: Vec<GtInstance>,
}

#[derive(Debug, Clone)]
pub struct PredInstance {
    pub id: i64,
    pub score: f64,
    pub masks: Vec<Option<RleMask>>,
}

#[derive(Debug, Clone)]
pub struct PredSequence {
    pub id: String,
    pub length: usize,
    pub instances: Vec<PredInstance>,
}

/// IoU thresholds HOTA averages over: 0.05, 0.10, ..., 0.95.
pub fn hota_alphas() -> Vec<f64> {
    (1..=19).map(|i| i as f64 * 0.05).collect()
}

/// Maximum-total-IoU matching restricted to pairs with IoU >= alpha.
/// `sim` is row-major rows x cols. Returns (row, col) pairs.
fn gated_max_matching(sim: &[f64], rows: usize, cols: usize, alpha: f64) -> Vec<(usize, usize)> {
    if rows == 0 || cols == 0 {
        return Vec::new();
    }
    let gated: Vec<f64> = sim
        .iter()
        .map(|&v| if v >= alpha { v } else { 0.0 })
        .collect();
    let matrix = CostMatrix::new(rows, cols, gated, Orientation::MaximizeSimilarity);
    hungarian(&matrix)
        .expect("IoU values are finite")
        .into_iter()
        .filter(|&(r, c)| sim[r * cols + c] >= alpha)
        .collect()
}

/// Match one frame's GT and prediction masks by maximum total IoU, gated
/// at `alpha`. Unmatched GT are misses, unmatched predictions are false
/// positives.
pub fn match_frame(
    gt_masks: &[&RleMask],
    pred_masks: &[&RleMask],
    alpha: f64,
) -> Result<Vec<(usize, usize)>, MetricsError> {
    let mut sim = Vec::with_capacity(gt_masks.len() * pred_masks.len());
    for g in gt_masks {
        for p in pred_masks {
            sim.push(rle_iou(g, p).map_err(|_| MetricsError::SizeMismatch)?);
        }
    }
    Ok(gated_max_matching(
        &sim,
        gt_masks.len(),
        pred_masks.len(),
        alpha,
    ))
}

/// Per-frame presence lists and the IoU matrix between present instances.
struct FrameOverlaps {
    gt_present: Vec<usize>,
    pred_present: Vec<usize>,
    /// row-major gt_present.len() x pred_present.len()
    sim: Vec<f64>,
}

fn frame_overlaps(gt: &GtSequence, pred: &PredSequence) -> Result<Vec<FrameOverlaps>, MetricsError> {
    if gt.length != pred.length {
        return Err(MetricsError::LengthMismatch(gt.length, pred.length));
    }
    let mut frames = Vec::with_capacity(gt.length);
    for f in 0..gt.length {
        let gt_present: Vec<usize> = (0..gt.instances.len())
            .filter(|&i| gt.instances[i].masks[f].is_some())
            .collect();
        let pred_present: Vec<usize> = (0..pred.instances.len())
            .filter(|&i| pred.instances[i].masks[f].is_some())
            .collect();
        let mut sim = Vec::with_capacity(gt_present.len() * pred_present.len());
        for &gi in &gt_present {
            for &pi in &pred_present {
                let g = gt.instances[gi].masks[f].as_ref().unwrap();
                let p = pred.instances[pi].masks[f].as_ref().unwrap();
                sim.push(rle_iou(g, p).map_err(|_| MetricsError::SizeMismatch)?);
            }
        }
        frames.push(FrameOverlaps {
            gt_present,
            pred_present,
            sim,
        });
    }
    Ok(frames)
}

/// Pooled HOTA counts at one alpha.
#[derive(Debug, Clone, Copy, Default)]
pub struct HotaAlphaCounts {
    pub tp: u64,
    pub fn_count: u64,
    pub fp: u64,
    /// Sum of the association score A(c) over true positives.
    pub ass_sum: f64,
}

impl HotaAlphaCounts {
    fn det_a(&self) -> f64 {
        let denom = self.tp + self.fn_count + self.fp;
        if denom == 0 {
            0.0
        } else {
            self.tp as f64 / denom as f64
        }
    }

    fn ass_a(&self) -> f64 {
        if self.tp == 0 {
            0.0
        } else {
            self.ass_sum / self.tp as f64
        }
    }

    fn hota(&self) -> f64 {
        let denom = self.tp + self.fn_count + self.fp;
        if denom == 0 {
            return 0.0;
        }
        let h = (self.ass_sum / denom as f64).sqrt();
        debug_assert!(h * h <= self.det_a() * self.ass_a() + 1e-9);
        h
    }
}

fn hota_counts(frames: &[FrameOverlaps], gt: &GtSequence, pred: &PredSequence) -> Vec<HotaAlphaCounts> {
    let gt_total: u64 = frames.iter().map(|f| f.gt_present.len() as u64).sum();
    let pred_total: u64 = frames.iter().map(|f| f.pred_present.len() as u64).sum();
    let gt_frames: Vec<u64> = (0..gt.instances.len())
        .map(|i| gt.instances[i].masks.iter().filter(|m| m.is_some()).count() as u64)
        .collect();
    let pred_frames: Vec<u64> = (0..pred.instances.len())
        .map(|i| pred.instances[i].masks.iter().filter(|m| m.is_some()).count() as u64)
        .collect();

    hota_alphas()
        .iter()
        .map(|&alpha| {
            let mut tp = 0u64;
            let mut tpa: BTreeMap<(usize, usize), u64> = BTreeMap::new();
            for frame in frames {
                let pairs = gated_max_matching(
                    &frame.sim,
                    frame.gt_present.len(),
                    frame.pred_present.len(),
                    alpha,
                );
                tp += pairs.len() as u64;
                for (r, c) in pairs {
                    *tpa
                        .entry((frame.gt_present[r], frame.pred_present[c]))
                        .or_insert(0) += 1;
                }
            }
            let mut ass_sum = 0.0;
            for (&(gi, pi), &count) in &tpa {
                let union = gt_frames[gi] + pred_frames[pi] - count;
                ass_sum += count as f64 * (count as f64 / union as f64);
            }
            HotaAlphaCounts {
                tp,
                fn_count: gt_total - tp,
                fp: pred_total - tp,
                ass_sum,
            }
        })
        .collect()
}

fn finalize_hota(per_alpha: &[HotaAlphaCounts]) -> (f64, f64, f64) {
    let n = per_alpha.len() as f64;
    let hota = per_alpha.iter().map(|c| c.hota()).sum::<f64>() / n;
    let det_a = per_alpha.iter().map(|c| c.det_a()).sum::<f64>() / n;
    let ass_a = per_alpha.iter().map(|c| c.ass_a()).sum::<f64>() / n;
    (hota, det_a, ass_a)
}

/// HOTA with its detection and association sub-scores, averaged over the
/// standard alpha thresholds.
pub fn hota(gt: &GtSequence, pred: &PredSequence) -> Result<(f64, f64, f64), MetricsError> {
    let frames = frame_overlaps(gt, pred)?;
    if gt.instances.is_empty() && pred.instances.is_empty() {
        log::warn!("sequence {}: empty GT and predictions score 0 by convention", gt.id);
    }
    Ok(finalize_hota(&hota_counts(&frames, gt, pred)))
}

/// Pooled CLEAR counts.
#[derive(Debug, Clone, Copy, Default)]
pub struct ClearCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_count: u64,
    pub idsw: u64,
    pub gt_total: u64,
}

impl ClearCounts {
    pub fn mota(&self) -> f64 {
        if self.gt_total == 0 {
            return 0.0;
        }
        1.0 - (self.fn_count + self.fp + self.idsw) as f64 / self.gt_total as f64
    }
}

fn clear_counts(frames: &[FrameOverlaps], gt: &GtSequence, pred: &PredSequence, match_iou: f64) -> ClearCounts {
    let mut counts = ClearCounts::default();
    // correspondence carried from the previous frame, gt idx -> pred idx
    let mut prev: BTreeMap<usize, usize> = BTreeMap::new();
    // last matched pred id per gt idx, across gaps, for switch counting
    let mut last_pred: BTreeMap<usize, usize> = BTreeMap::new();
    for frame in frames {
        counts.gt_total += frame.gt_present.len() as u64;
        let rows = frame.gt_present.len();
        let cols = frame.pred_present.len();
        let sim_at = |gi: usize, pi: usize| -> Option<f64> {
            let r = frame.gt_present.iter().position(|&g| g == gi)?;
            let c = frame.pred_present.iter().position(|&p| p == pi)?;
            Some(frame.sim[r * cols + c])
        };
        // keep still-valid previous correspondences first
        let mut matched: Vec<(usize, usize)> = Vec::new();
        let mut used_g = vec![false; rows];
        let mut used_p = vec![false; cols];
        for (&gi, &pi) in &prev {
            if let Some(s) = sim_at(gi, pi) {
                if s >= match_iou {
                    let r = frame.gt_present.iter().position(|&g| g == gi).unwrap();
                    let c = frame.pred_present.iter().position(|&p| p == pi).unwrap();
                    used_g[r] = true;
                    used_p[c] = true;
                    matched.push((gi, pi));
                }
            }
        }
        // optimal matching on the remainder
        let free_g: Vec<usize> = (0..rows).filter(|&r| !used_g[r]).collect();
        let free_p: Vec<usize> = (0..cols).filter(|&c| !used_p[c]).collect();
        let mut sub = Vec::with_capacity(free_g.len() * free_p.len());
        for &r in &free_g {
            for &c in &free_p {
                sub.push(frame.sim[r * cols + c]);
            }
        }
        for (sr, sc) in gated_max_matching(&sub, free_g.len(), free_p.len(), match_iou) {
            matched.push((frame.gt_present[free_g[sr]], frame.pred_present[free_p[sc]]));
        }

        counts.tp += matched.len() as u64;
        counts.fn_count += (rows - matched.len()) as u64;
        counts.fp += (cols - matched.len()) as u64;
        for &(gi, pi) in &matched {
            if let Some(&prev_pi) = last_pred.get(&gi) {
                if prev_pi != pi {
                    counts.idsw += 1;
                }
            }
            last_pred.insert(gi, pi);
        }
        prev = matched.into_iter().collect();
    }
    counts
}

/// CLEAR-MOT accuracy: returns (MOTA, identity switches, FP, FN).
pub fn clear_mot(
    gt: &GtSequence,
    pred: &PredSequence,
    match_iou: f64,
) -> Result<(f64, u64, u64, u64), MetricsError> {
    let frames = frame_overlaps(gt, pred)?;
    let c = clear_counts(&frames, gt, pred, match_iou);
    Ok((c.mota(), c.idsw, c.fp, c.fn_count))
}

#[derive(Debug, Clone, Copy, Default)]
pub struct IdCounts {
    pub idtp: u64,
    pub idfp: u64,
    pub idfn: u64,
}

impl IdCounts {
    pub fn idf1(&self) -> f64 {
        let denom = 2 * self.idtp + self.idfp + self.idfn;
        if denom == 0 {
            0.0
        } else {
            2.0 * self.idtp as f64 / denom as f64
        }
    }
}

fn id_counts(frames: &[FrameOverlaps], gt: &GtSequence, pred: &PredSequence, match_iou: f64) -> IdCounts {
    let n_gt = gt.instances.len();
    let n_pred = pred.instances.len();
    let gt_total: u64 = frames.iter().map(|f| f.gt_present.len() as u64).sum();
    let pred_total: u64 = frames.iter().map(|f| f.pred_present.len() as u64).sum();
    // trajectory-level weights: frames where the pair overlaps at or above
    // the threshold
    let mut weights = vec![0.0f64; n_gt * n_pred];
    for frame in frames {
        let cols = frame.pred_present.len();
        for (r, &gi) in frame.gt_present.iter().enumerate() {
            for (c, &pi) in frame.pred_present.iter().enumerate() {
                if frame.sim[r * cols + c] >= match_iou {
                    weights[gi * n_pred + pi] += 1.0;
                }
            }
        }
    }
    let mut idtp = 0u64;
    if n_gt > 0 && n_pred > 0 {
        let matrix = CostMatrix::new(n_gt, n_pred, weights.clone(), Orientation::MaximizeSimilarity);
        for (g, p) in hungarian(&matrix).expect("weights are finite") {
            idtp += weights[g * n_pred + p] as u64;
        }
    }
    IdCounts {
        idtp,
        idfp: pred_total - idtp,
        idfn: gt_total - idtp,
    }
}

/// Identity F1: optimal trajectory-level bipartite matching of GT and
/// predicted identities weighted by per-frame overlap counts.
pub fn idf1(gt: &GtSequence, pred: &PredSequence, match_iou: f64) -> Result<f64, MetricsError> {
    let frames = frame_overlaps(gt, pred)?;
    Ok(id_counts(&frames, gt, pred, match_iou).idf1())
}

/// Scores of one sequence (or of the pooled combination).
#[derive(Debug, Clone, Serialize)]
pub struct Scores {
    pub sequence: String,
    pub hota: f64,
    pub det_a: f64,
    pub ass_a: f64,
    pub mota: f64,
    pub idf1: f64,
    pub idsw: u64,
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_count: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub per_sequence: Vec<Scores>,
    pub combined: Scores,
}

/// Evaluate matched GT/prediction sequences. Combined scores pool the
/// underlying counts across sequences before taking ratios; they are not
/// averages of per-sequence scores.
pub fn evaluate(
    gts: &[GtSequence],
    preds: &[PredSequence],
    match_iou: f64,
) -> Result<EvalReport, MetricsError> {
    let mut pred_by_id: BTreeMap<&str, &PredSequence> = BTreeMap::new();
    for p in preds {
        pred_by_id.insert(&p.id, p);
    }
    if gts.len() != preds.len() {
        let gt_ids: Vec<&str> = gts.iter().map(|g| g.id.as_str()).collect();
        let pred_ids: Vec<&str> = preds.iter().map(|p| p.id.as_str()).collect();
        return Err(MetricsError::UnknownSequenceId(format!(
            "gt has {gt_ids:?}, predictions have {pred_ids:?}"
        )));
    }

    let mut per_sequence = Vec::with_capacity(gts.len());
    let mut pooled_hota: Vec<HotaAlphaCounts> = vec![HotaAlphaCounts::default(); hota_alphas().len()];
    let mut pooled_clear = ClearCounts::default();
    let mut pooled_id = IdCounts::default();

    for gt in gts {
        let pred = pred_by_id
            .get(gt.id.as_str())
            .ok_or_else(|| MetricsError::UnknownSequenceId(gt.id.clone()))?;
        let frames = frame_overlaps(gt, pred)?;
        let h = hota_counts(&frames, gt, pred);
        let c = clear_counts(&frames, gt, pred, match_iou);
        let i = id_counts(&frames, gt, pred, match_iou);

        let (hota_v, det_a, ass_a) = finalize_hota(&h);
        per_sequence.push(Scores {
            sequence: gt.id.clone(),
            hota: hota_v,
            det_a,
            ass_a,
            mota: c.mota(),
            idf1: i.idf1(),
            idsw: c.idsw,
            tp: c.tp,
            fp: c.fp,
            fn_count: c.fn_count,
        });

        for (pooled, counts) in pooled_hota.iter_mut().zip(&h) {
            pooled.tp += counts.tp;
            pooled.fn_count += counts.fn_count;
            pooled.fp += counts.fp;
            pooled.ass_sum += counts.ass_sum;
        }
        pooled_clear.tp += c.tp;
        pooled_clear.fp += c.fp;
        pooled_clear.fn_count += c.fn_count;
        pooled_clear.idsw += c.idsw;
        pooled_clear.gt_total += c.gt_total;
        pooled_id.idtp += i.idtp;
        pooled_id.idfp += i.idfp;
        pooled_id.idfn += i.idfn;
    }

    let (hota_v, det_a, ass_a) = finalize_hota(&pooled_hota);
    let combined = Scores {
        sequence: "combined".to_string(),
        hota: hota_v,
        det_a,
        ass_a,
        mota: pooled_clear.mota(),
        idf1: pooled_id.idf1(),
        idsw: pooled_clear.idsw,
        tp: pooled_clear.tp,
        fp: pooled_clear.fp,
        fn_count: pooled_clear.fn_count,
    };
    Ok(EvalReport {
        per_sequence,
        combined,
    })
}

impl EvalReport {
    /// Aligned-column text table, sequences first, pooled result last.
    pub fn format_table(&self) -> String {
        let mut rows = vec![format!(
            "{:<12} {:>7} {:>7} {:>7} {:>7} {:>7} {:>6} {:>6} {:>6} {:>6}",
            "sequence", "HOTA", "DetA", "AssA", "MOTA", "IDF1", "IDSW", "TP", "FP", "FN"
        )];
        for s in self.per_sequence.iter().chain(std::iter::once(&self.combined)) {
            rows.push(format!(
                "{:<12} {:>7.4} {:>7.4} {:>7.4} {:>7.4} {:>7.4} {:>6} {:>6} {:>6} {:>6}",
                s.sequence, s.hota, s.det_a, s.ass_a, s.mota, s.idf1, s.idsw, s.tp, s.fp, s.fn_count
            ));
        }
        rows.join("\n")
    }
}
