//! Offline track refinement: greedy tracklet merging by temporal and
//! spatial continuity, gap interpolation via centroid translation, and
//! mask smoothing.

use crate::detect::box_iou;
use crate::mask::{
    box_from_mask, centroid, decode_rle, encode_rle, morph_smooth, translate_mask,
};
use crate::track::{TrackEntry, Tracklet};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Temporal window and IoU gate for linking tracklet fragments.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MergeConfig {
    /// Smallest allowed frame gap (exclusive); may be negative to permit
    /// overlapping fragments.
    pub delta_min: i64,
    /// Largest allowed frame gap (inclusive).
    pub delta_max: i64,
    /// Minimum IoU between the first fragment's last box and the second
    /// fragment's first box.
    pub theta: f64,
}

impl Default for MergeConfig {
    fn default() -> Self {
        Self {
            delta_min: -15,
            delta_max: 15,
            theta: 0.1,
        }
    }
}

impl MergeConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.delta_min >= self.delta_max {
            return Err("delta_min must be less than delta_max".into());
        }
        if !(0.0..=1.0).contains(&self.theta) {
            return Err("theta must lie in [0, 1]".into());
        }
        Ok(())
    }
}

/// Greedily merge tracklet pairs whose frame gap lies in
/// (delta_min, delta_max] and whose boundary boxes overlap at IoU >= theta.
/// Candidates are taken in order of descending IoU (ties broken by the
/// pair's ids) and each tracklet joins at most one merge per pass. The
/// merged tracklet keeps the earlier fragment's id; on frame overlap the
/// earlier fragment's entries win.
pub fn merge_tracklets(tracklets: Vec<Tracklet>, cfg: &MergeConfig) -> Vec<Tracklet> {
    let n = tracklets.len();
    let mut candidates: Vec<(f64, u64, u64, usize, usize)> = Vec::new();
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let delta = tracklets[j].s as i64 - tracklets[i].e as i64;
            if delta <= cfg.delta_min || delta > cfg.delta_max {
                continue;
            }
            let iou = box_iou(&tracklets[i].b_last, &tracklets[j].b_first);
            if iou >= cfg.theta {
                candidates.push((iou, tracklets[i].id, tracklets[j].id, i, j));
            }
        }
    }
    candidates.sort_by(|a, b| {
        b.0.partial_cmp(&a.0)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then((a.1, a.2).cmp(&(b.1, b.2)))
    });

    let mut merged_flag = vec![false; n];
    let mut merges: Vec<(usize, usize)> = Vec::new();
    for &(_, _, _, i, j) in &candidates {
        if merged_flag[i] || merged_flag[j] {
            continue;
        }
        merged_flag[i] = true;
        merged_flag[j] = true;
        merges.push((i, j));
    }

    let mut consumed = vec![false; n];
    let mut out: Vec<Tracklet> = Vec::new();
    for (i, j) in merges {
        consumed[i] = true;
        consumed[j] = true;
        out.push(merge_pair(&tracklets[i], &tracklets[j]));
    }
    for (i, t) in tracklets.into_iter().enumerate() {
        if !consumed[i] {
            out.push(t);
        }
    }
    out.sort_by_key(|t| (t.s, t.id));
    out
}

fn merge_pair(a: &Tracklet, b: &Tracklet) -> Tracklet {
    let (earlier, later) = if (a.s, a.id) <= (b.s, b.id) {
        (a, b)
    } else {
        (b, a)
    };
    let mut by_frame: BTreeMap<u64, TrackEntry> = BTreeMap::new();
    for entry in &later.entries {
        by_frame.insert(entry.frame, entry.clone());
    }
    for entry in &earlier.entries {
        by_frame.insert(entry.frame, entry.clone());
    }
    Tracklet::from_entries(earlier.id, by_frame.into_values().collect())
}

/// Fill every gap between consecutive present frames by translating the
/// gap-opening mask along the linear interpolation of the border
/// centroids. Gaps whose border masks are missing or empty are skipped
/// with a warning. Interpolated entries get the smaller border score.
pub fn interpolate_gaps(tracklet: Tracklet) -> Tracklet {
    let id = tracklet.id;
    let entries = tracklet.entries;
    let mut filled: Vec<TrackEntry> = Vec::with_capacity(entries.len());
    for k in 0..entries.len() {
        if k > 0 {
            let prev = &entries[k - 1];
            let next = &entries[k];
            if next.frame > prev.frame + 1 {
                if let Some(mut gap_entries) = interpolate_one_gap(id, prev, next) {
                    filled.append(&mut gap_entries);
                }
            }
        }
        filled.push(entries[k].clone());
    }
    Tracklet::from_entries(id, filled)
}

fn interpolate_one_gap(id: u64, start: &TrackEntry, end: &TrackEntry) -> Option<Vec<TrackEntry>> {
    let (m1, m2) = match (&start.mask, &end.mask) {
        (Some(a), Some(b)) => match (decode_rle(a), decode_rle(b)) {
            (Ok(a), Ok(b)) => (a, b),
            _ => {
                log::warn!(
                    "track {id}: undecodable border mask, gap {}..{} left open",
                    start.frame,
                    end.frame
                );
                return None;
            }
        },
        _ => {
            log::warn!(
                "track {id}: missing border mask, gap {}..{} left open",
                start.frame,
                end.frame
            );
            return None;
        }
    };
    let (c1, c2) = match (centroid(&m1), centroid(&m2)) {
        (Ok(a), Ok(b)) => (a, b),
        _ => {
            log::warn!(
                "track {id}: empty border mask, gap {}..{} left open",
                start.frame,
                end.frame
            );
            return None;
        }
    };
    let t1 = start.frame as f64;
    let t2 = end.frame as f64;
    let score = start.score.min(end.score);
    let mut out = Vec::new();
    for frame in start.frame + 1..end.frame {
        let alpha = (frame as f64 - t1) / (t2 - t1);
        let cx = (1.0 - alpha) * c1.0 + alpha * c2.0;
        let cy = (1.0 - alpha) * c1.1 + alpha * c2.1;
        let dx = cx - c1.0;
        let dy = cy - c1.1;
        let mask = translate_mask(&m1, dx, dy);
        let bbox = match box_from_mask(&mask) {
            Ok(b) => b,
            Err(_) => {
                log::warn!("track {id}: interpolated mask left the image at frame {frame}");
                continue;
            }
        };
        out.push(TrackEntry {
            frame,
            bbox,
            mask: Some(encode_rle(&mask)),
            score,
        });
    }
    Some(out)
}

/// Morphologically smooth every mask of a tracklet and recompute the
/// boxes from the smoothed masks. Entries without masks (or whose masks
/// smooth to empty) keep their boxes.
pub fn smooth_tracklet_masks(
    tracklet: Tracklet,
    dilate_iters: usize,
    erode_iters: usize,
) -> Tracklet {
    let id = tracklet.id;
    let entries = tracklet
        .entries
        .into_iter()
        .map(|mut entry| {
            if let Some(rle) = &entry.mask {
                match decode_rle(rle) {
                    Ok(mask) => {
                        let smoothed = morph_smooth(&mask, dilate_iters, erode_iters);
                        if let Ok(bbox) = box_from_mask(&smoothed) {
                            entry.bbox = bbox;
                        }
                        entry.mask = Some(encode_rle(&smoothed));
                    }
                    Err(err) => {
                        log::warn!("track {id}: mask at frame {} not smoothed: {err}", entry.frame)
                    }
                }
            }
            entry
        })
        .collect();
    Tracklet::from_entries(id, entries)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mask::{BinaryMask, Box2D};

    fn entry(frame: u64, x: f64, y: f64) -> TrackEntry {
        TrackEntry {
            frame,
            bbox: Box2D::new(x, y, 10.0, 10.0),
            mask: None,
            score: 0.9,
        }
    }

    fn tracklet(id: u64, entries: Vec<TrackEntry>) -> Tracklet {
        Tracklet::from_entries(id, entries)
    }

    fn rect_mask(h: usize, w: usize, r0: usize, c0: usize, rh: usize, cw: usize) -> BinaryMask {
        let mut m = BinaryMask::zeros(h, w);
        for r in r0..r0 + rh {
            for c in c0..c0 + cw {
                m.set(r, c, 1);
            }
        }
        m
    }

    #[test]
    fn merge_joins_close_fragments() {
        let a = tracklet(1, (0..=10).map(|f| entry(f, 0.0, 0.0)).collect());
        // starts 2 frames after a ends, half-overlapping box
        let b = tracklet(2, (12..=20).map(|f| entry(f, 5.0, 0.0)).collect());
        assert!(box_iou(&a.b_last, &b.b_first) >= 0.1);
        let merged = merge_tracklets(vec![a, b], &MergeConfig::default());
        assert_eq!(merged.len(), 1);
        assert_eq!(merged[0].id, 1, "earlier fragment's id survives");
        assert_eq!((merged[0].s, merged[0].e), (0, 20));
    }

    #[test]
    fn merge_respects_iou_gate() {
        let a = tracklet(1, (0..=10).map(|f| entry(f, 0.0, 0.0)).collect());
        let b = tracklet(2, (12..=20).map(|f| entry(f, 9.5, 9.5)).collect());
        assert!(box_iou(&a.b_last, &b.b_first) < 0.1);
        let merged = merge_tracklets(vec![a, b], &MergeConfig::default());
        assert_eq!(merged.len(), 2);
    }

    #[test]
    fn merge_respects_gap_window() {
        let a = tracklet(1, (0..=10).map(|f| entry(f, 0.0, 0.0)).collect());
        let b = tracklet(2, (40..=50).map(|f| entry(f, 0.0, 0.0)).collect());
        let merged = merge_tracklets(vec![a, b], &MergeConfig::default());
        assert_eq!(merged.len(), 2, "gap of 30 exceeds delta_max");
    }

    #[test]
    fn merge_empty_input() {
        assert!(merge_tracklets(vec![], &MergeConfig::default()).is_empty());
    }

    #[test]
    fn merge_single_pass_no_chains() {
        // a->b and b->c are both candidates; after a-b merges, b is taken
        // and c stays separate in this pass.
        let a = tracklet(1, (0..=5).map(|f| entry(f, 0.0, 0.0)).collect());
        let b = tracklet(2, (7..=12).map(|f| entry(f, 1.0, 0.0)).collect());
        let c = tracklet(3, (14..=20).map(|f| entry(f, 2.0, 0.0)).collect());
        let merged = merge_tracklets(vec![a, b, c], &MergeConfig::default());
        assert_eq!(merged.len(), 2);
        let ids: Vec<u64> = merged.iter().map(|t| t.id).collect();
        assert!(ids.contains(&1) && ids.contains(&3));
    }

    #[test]
    fn merge_overlap_earlier_entries_win() {
        let mut early = Vec::new();
        for f in 0..=10 {
            let mut e = entry(f, 0.0, 0.0);
            e.score = 0.9;
            early.push(e);
        }
        let mut late = Vec::new();
        for f in 8..=15 {
            let mut e = entry(f, 1.0, 0.0);
            e.score = 0.2;
            late.push(e);
        }
        let a = tracklet(1, early);
        let b = tracklet(2, late);
        // delta = 8 - 10 = -2, inside (-15, 15]
        let merged = merge_tracklets(vec![a, b], &MergeConfig::default());
        assert_eq!(merged.len(), 1);
        let overlap_entry = merged[0].entries.iter().find(|e| e.frame == 9).unwrap();
        assert_eq!(overlap_entry.score, 0.9, "earlier tracklet wins overlap");
        assert_eq!(merged[0].e, 15);
    }

    #[test]
    fn merge_order_independent() {
        let mk = || {
            vec![
                tracklet(1, (0..=5).map(|f| entry(f, 0.0, 0.0)).collect()),
                tracklet(2, (7..=12).map(|f| entry(f, 1.0, 0.0)).collect()),
                tracklet(3, (14..=20).map(|f| entry(f, 2.0, 0.0)).collect()),
            ]
        };
        let forward = merge_tracklets(mk(), &MergeConfig::default());
        let mut reversed_in = mk();
        reversed_in.reverse();
        let reversed = merge_tracklets(reversed_in, &MergeConfig::default());
        let f_ids: Vec<(u64, u64, u64)> = forward.iter().map(|t| (t.id, t.s, t.e)).collect();
        let r_ids: Vec<(u64, u64, u64)> = reversed.iter().map(|t| (t.id, t.s, t.e)).collect();
        assert_eq!(f_ids, r_ids);
    }

    fn masked_entry(frame: u64, mask: &BinaryMask, score: f64) -> TrackEntry {
        TrackEntry {
            frame,
            bbox: box_from_mask(mask).unwrap(),
            mask: Some(encode_rle(mask)),
            score,
        }
    }

    #[test]
    fn interpolate_no_gap_is_identity() {
        let m = rect_mask(32, 32, 4, 4, 6, 6);
        let t = tracklet(
            1,
            vec![masked_entry(0, &m, 0.9), masked_entry(1, &m, 0.9)],
        );
        let out = interpolate_gaps(t);
        assert_eq!(out.entries.len(), 2);
    }

    #[test]
    fn interpolate_linear_shift() {
        // centroid moves +4 px in x from frame 0 to frame 4; at frame 2 the
        // shift is exactly +2.
        let m1 = rect_mask(32, 32, 8, 8, 4, 4); // centroid (9.5, 9.5)
        let m2 = rect_mask(32, 32, 8, 12, 4, 4); // centroid (13.5, 9.5)
        let t = tracklet(
            1,
            vec![masked_entry(0, &m1, 0.8), masked_entry(4, &m2, 0.6)],
        );
        let out = interpolate_gaps(t);
        assert_eq!(out.entries.len(), 5);
        let mid = out.entries.iter().find(|e| e.frame == 2).unwrap();
        let mid_mask = decode_rle(mid.mask.as_ref().unwrap()).unwrap();
        assert_eq!(mid_mask, rect_mask(32, 32, 8, 10, 4, 4));
        assert_eq!(mid.score, 0.6, "interpolated score is the border minimum");
        // frame set is now the full interval
        let frames: Vec<u64> = out.entries.iter().map(|e| e.frame).collect();
        assert_eq!(frames, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn interpolate_alpha_zero_boundary() {
        // a 1-frame interior means alpha of that frame is 0.5; the alpha=0
        // endpoint is the original entry and must stay bit-identical.
        let m1 = rect_mask(16, 16, 2, 2, 3, 3);
        let m2 = rect_mask(16, 16, 2, 2, 3, 3);
        let t = tracklet(
            1,
            vec![masked_entry(3, &m1, 0.9), masked_entry(5, &m2, 0.9)],
        );
        let out = interpolate_gaps(t);
        assert_eq!(out.entries[0].frame, 3);
        assert_eq!(
            decode_rle(out.entries[0].mask.as_ref().unwrap()).unwrap(),
            m1
        );
        // stationary borders: the interpolated mask equals the opener
        assert_eq!(
            decode_rle(out.entries[1].mask.as_ref().unwrap()).unwrap(),
            m1
        );
    }

    #[test]
    fn interpolate_missing_border_mask_skips_gap() {
        let m = rect_mask(16, 16, 2, 2, 3, 3);
        let mut broken = masked_entry(4, &m, 0.9);
        broken.mask = None;
        let t = tracklet(1, vec![masked_entry(0, &m, 0.9), broken]);
        let out = interpolate_gaps(t);
        assert_eq!(out.entries.len(), 2, "gap left open");
    }

    #[test]
    fn smooth_zero_iterations_is_identity() {
        let m = rect_mask(16, 16, 4, 4, 5, 5);
        let t = tracklet(1, vec![masked_entry(0, &m, 0.9)]);
        let out = smooth_tracklet_masks(t, 0, 0);
        assert_eq!(decode_rle(out.entries[0].mask.as_ref().unwrap()).unwrap(), m);
    }

    #[test]
    fn smooth_fills_hole_and_updates_box() {
        let mut ring = BinaryMask::zeros(24, 24);
        for r in 10..13 {
            for c in 10..13 {
                if (r, c) != (11, 11) {
                    ring.set(r, c, 1);
                }
            }
        }
        let t = tracklet(1, vec![masked_entry(0, &ring, 0.9)]);
        let out = smooth_tracklet_masks(t, 4, 3);
        let smoothed = decode_rle(out.entries[0].mask.as_ref().unwrap()).unwrap();
        assert_eq!(smoothed.get(11, 11), 1, "hole filled");
        let b = out.entries[0].bbox;
        assert_eq!(b, box_from_mask(&smoothed).unwrap());
    }

    #[test]
    fn smooth_keeps_maskless_entries() {
        let t = tracklet(1, vec![entry(0, 1.0, 1.0)]);
        let out = smooth_tracklet_masks(t, 4, 3);
        assert!(out.entries[0].mask.is_none());
        assert_eq!(out.entries[0].bbox, Box2D::new(1.0, 1.0, 10.0, 10.0));
    }
}
