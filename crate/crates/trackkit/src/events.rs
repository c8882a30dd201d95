//! Event-stream windowing, count-based two-component GMM denoising, and
//! voxel-grid construction.

use std::collections::{BTreeMap, HashMap};
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EventError {
    #[error("event stream is empty")]
    EmptyStream,
    #[error("window size must be at least 1")]
    ZeroWindow,
    #[error("voxel time range is empty: t_start {0} >= t_end {1}")]
    EmptyTimeRange(u64, u64),
}

/// A single camera event: pixel position, microsecond timestamp, and
/// polarity (+1 or -1).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Event {
    pub x: u16,
    pub y: u16,
    pub t: u64,
    pub p: i8,
}

/// A contiguous slice of a stream around an anchor event.
#[derive(Debug, Clone, Copy)]
pub struct EventWindow<'a> {
    pub events: &'a [Event],
    /// Index of the anchor event within `events`.
    pub anchor_index: usize,
    /// Set when the stream boundary truncated the requested size.
    pub clipped: bool,
}

impl EventWindow<'_> {
    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }
}

/// Cut a fixed-count window centered on the first event at or after
/// `frame_time`: floor(size/2) events before the anchor and ceil(size/2)
/// from the anchor onward, truncated at the stream ends.
pub fn window_at(stream: &[Event], frame_time: u64, size: usize) -> Result<EventWindow<'_>, EventError> {
    if stream.is_empty() {
        return Err(EventError::EmptyStream);
    }
    if size == 0 {
        return Err(EventError::ZeroWindow);
    }
    let mut anchor = stream.partition_point(|e| e.t < frame_time);
    if anchor == stream.len() {
        anchor = stream.len() - 1;
    }
    let begin = anchor.saturating_sub(size / 2);
    let end = (anchor + size.div_ceil(2)).min(stream.len());
    Ok(EventWindow {
        events: &stream[begin..end],
        anchor_index: anchor - begin,
        clipped: end - begin < size,
    })
}

/// Per-pixel soft assignment produced by the count mixture fit.
#[derive(Debug, Clone, Copy)]
pub struct PixelResponsibility {
    pub x: u16,
    pub y: u16,
    /// Responsibility of the low-mean component at this pixel.
    pub low: f64,
}

/// Two-component 1-D Gaussian mixture over per-pixel event counts.
/// Components are sorted so `mu1 <= mu2` (component 1 is low-frequency).
#[derive(Debug, Clone)]
pub struct GmmFit {
    pub mu1: f64,
    pub mu2: f64,
    pub sigma1: f64,
    pub sigma2: f64,
    pub w1: f64,
    pub w2: f64,
    pub responsibilities: Vec<PixelResponsibility>,
    /// Log-likelihood after every EM iteration; non-decreasing.
    pub log_likelihoods: Vec<f64>,
}

impl GmmFit {
    pub fn delta_mu(&self) -> f64 {
        (self.mu1 - self.mu2).abs()
    }
}

const VARIANCE_FLOOR: f64 = 1e-4;
const EM_MAX_ITERS: usize = 200;
const EM_TOLERANCE: f64 = 1e-6;

fn normal_pdf(x: f64, mean: f64, sigma: f64) -> f64 {
    let z = (x - mean) / sigma;
    (-0.5 * z * z).exp() / (sigma * (2.0 * std::f64::consts::PI).sqrt())
}

/// Fit the count mixture by EM with k-means++-style seeding. Pixels with
/// no events are excluded from the histogram. Fewer than two distinct
/// count values yield a degenerate single-cluster fit with `mu1 == mu2`.
pub fn fit_count_gmm(window: &EventWindow<'_>, seed: u64) -> GmmFit {
    use rand::{Rng, SeedableRng};

    let mut histogram: BTreeMap<(u16, u16), u32> = BTreeMap::new();
    for e in window.events {
        *histogram.entry((e.x, e.y)).or_insert(0) += 1;
    }
    let pixels: Vec<(u16, u16)> = histogram.keys().copied().collect();
    let values: Vec<f64> = histogram.values().map(|&c| c as f64).collect();
    let n = values.len();

    let mut distinct = values.clone();
    distinct.sort_by(|a, b| a.partial_cmp(b).unwrap());
    distinct.dedup();
    if distinct.len() < 2 {
        let mu = distinct.first().copied().unwrap_or(0.0);
        return GmmFit {
            mu1: mu,
            mu2: mu,
            sigma1: VARIANCE_FLOOR.sqrt(),
            sigma2: VARIANCE_FLOOR.sqrt(),
            w1: 0.5,
            w2: 0.5,
            responsibilities: pixels
                .iter()
                .map(|&(x, y)| PixelResponsibility { x, y, low: 0.5 })
                .collect(),
            log_likelihoods: Vec::new(),
        };
    }

    // k-means++-style seeding: first center uniform, second weighted by
    // squared distance from the first.
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let c1 = values[rng.gen_range(0..n)];
    let weights: Vec<f64> = values.iter().map(|v| (v - c1) * (v - c1)).collect();
    let total_weight: f64 = weights.iter().sum();
    let c2 = if total_weight > 0.0 {
        let mut pick = rng.gen::<f64>() * total_weight;
        let mut chosen = values[n - 1];
        for (v, w) in values.iter().zip(&weights) {
            pick -= w;
            if pick <= 0.0 {
                chosen = *v;
                break;
            }
        }
        chosen
    } else {
        c1
    };

    let mean_all: f64 = values.iter().sum::<f64>() / n as f64;
    let var_all = values
        .iter()
        .map(|v| (v - mean_all) * (v - mean_all))
        .sum::<f64>()
        / n as f64;
    let sigma0 = var_all.max(VARIANCE_FLOOR).sqrt();

    let mut mu = [c1.min(c2), c1.max(c2)];
    let mut sigma = [sigma0, sigma0];
    let mut weight = [0.5, 0.5];
    let mut resp = vec![0.5f64; n]; // responsibility of component 0
    let mut log_likelihoods: Vec<f64> = Vec::new();

    for _ in 0..EM_MAX_ITERS {
        // E-step
        let mut ll = 0.0;
        for (i, &v) in values.iter().enumerate() {
            let p0 = weight[0] * normal_pdf(v, mu[0], sigma[0]);
            let p1 = weight[1] * normal_pdf(v, mu[1], sigma[1]);
            let total = (p0 + p1).max(f64::MIN_POSITIVE);
            resp[i] = p0 / total;
            ll += total.ln();
        }
        if let Some(&prev) = log_likelihoods.last() {
            debug_assert!(ll + 1e-9 >= prev, "EM log-likelihood decreased: {prev} -> {ll}");
            log_likelihoods.push(ll);
            if (ll - prev).abs() < EM_TOLERANCE {
                break;
            }
        } else {
            log_likelihoods.push(ll);
        }
        // M-step
        for k in 0..2 {
            let rk: Vec<f64> = resp
                .iter()
                .map(|&r| if k == 0 { r } else { 1.0 - r })
                .collect();
            let mass: f64 = rk.iter().sum();
            if mass <= f64::MIN_POSITIVE {
                continue;
            }
            weight[k] = mass / n as f64;
            mu[k] = values.iter().zip(&rk).map(|(v, r)| v * r).sum::<f64>() / mass;
            let var = values
                .iter()
                .zip(&rk)
                .map(|(v, r)| r * (v - mu[k]) * (v - mu[k]))
                .sum::<f64>()
                / mass;
            sigma[k] = var.max(VARIANCE_FLOOR).sqrt();
        }
    }

    // component 1 is the low-frequency (low-mean) cluster
    let (lo, hi, flip) = if mu[0] <= mu[1] { (0, 1, false) } else { (1, 0, true) };
    GmmFit {
        mu1: mu[lo],
        mu2: mu[hi],
        sigma1: sigma[lo],
        sigma2: sigma[hi],
        w1: weight[lo],
        w2: weight[hi],
        responsibilities: pixels
            .iter()
            .zip(&resp)
            .map(|(&(x, y), &r0)| PixelResponsibility {
                x,
                y,
                low: if flip { 1.0 - r0 } else { r0 },
            })
            .collect(),
        log_likelihoods,
    }
}

/// Apply the cluster-selection rule: when the means differ by at least
/// `tau`, keep only events at pixels assigned to the low-frequency
/// cluster (ties go to the low cluster); otherwise keep everything.
pub fn select_events(window: &EventWindow<'_>, fit: &GmmFit, tau: f64) -> Vec<Event> {
    if fit.delta_mu() < tau {
        return window.events.to_vec();
    }
    let low_pixels: HashMap<(u16, u16), bool> = fit
        .responsibilities
        .iter()
        .map(|r| ((r.x, r.y), r.low >= 0.5))
        .collect();
    window
        .events
        .iter()
        .filter(|e| low_pixels.get(&(e.x, e.y)).copied().unwrap_or(false))
        .copied()
        .collect()
}

/// H x W x B grid of polarity-signed event mass.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelGrid {
    pub h: usize,
    pub w: usize,
    pub bins: usize,
    /// Flat values indexed (y * w + x) * bins + b.
    pub values: Vec<f64>,
}

impl VoxelGrid {
    pub fn zeros(h: usize, w: usize, bins: usize) -> Self {
        Self {
            h,
            w,
            bins,
            values: vec![0.0; h * w * bins],
        }
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, b: usize) -> f64 {
        self.values[(y * self.w + x) * self.bins + b]
    }

    #[inline]
    fn add(&mut self, y: usize, x: usize, b: usize, v: f64) {
        self.values[(y * self.w + x) * self.bins + b] += v;
    }
}

/// Accumulate events into B temporal bins with linear interpolation: the
/// normalized time t* = (B-1)(t - t_start)/(t_end - t_start) splits each
/// event between bins floor(t*) and ceil(t*) with weights summing to one.
/// Polarity signs the contribution. Events outside the range or image are
/// ignored.
pub fn voxelize(
    events: &[Event],
    h: usize,
    w: usize,
    bins: usize,
    t_start: u64,
    t_end: u64,
) -> Result<VoxelGrid, EventError> {
    if t_start >= t_end {
        return Err(EventError::EmptyTimeRange(t_start, t_end));
    }
    assert!(bins >= 1, "voxel grid needs at least one bin");
    let mut grid = VoxelGrid::zeros(h, w, bins);
    let span = (t_end - t_start) as f64;
    for e in events {
        if e.t < t_start || e.t > t_end || (e.x as usize) >= w || (e.y as usize) >= h {
            continue;
        }
        let t_star = (bins - 1) as f64 * (e.t - t_start) as f64 / span;
        let b0 = t_star.floor() as usize;
        let frac = t_star - b0 as f64;
        let p = e.p as f64;
        if frac == 0.0 {
            grid.add(e.y as usize, e.x as usize, b0, p);
        } else {
            grid.add(e.y as usize, e.x as usize, b0, p * (1.0 - frac));
            grid.add(e.y as usize, e.x as usize, b0 + 1, p * frac);
        }
    }
    Ok(grid)
}

/// Unsigned per-polarity variant: positive and negative events accumulate
/// into separate grids with |p| = 1 weights.
pub fn voxelize_split(
    events: &[Event],
    h: usize,
    w: usize,
    bins: usize,
    t_start: u64,
    t_end: u64,
) -> Result<(VoxelGrid, VoxelGrid), EventError> {
    let positive: Vec<Event> = events
        .iter()
        .filter(|e| e.p > 0)
        .map(|e| Event { p: 1, ..*e })
        .collect();
    let negative: Vec<Event> = events
        .iter()
        .filter(|e| e.p < 0)
        .map(|e| Event { p: 1, ..*e })
        .collect();
    Ok((
        voxelize(&positive, h, w, bins, t_start, t_end)?,
        voxelize(&negative, h, w, bins, t_start, t_end)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn stream(n: usize) -> Vec<Event> {
        (0..n)
            .map(|i| Event {
                x: (i % 13) as u16,
                y: (i % 7) as u16,
                t: i as u64 * 10,
                p: if i % 2 == 0 { 1 } else { -1 },
            })
            .collect()
    }

    #[test]
    fn window_exact_size() {
        let s = stream(100_000);
        let win = window_at(&s, 500_000, 30_000).unwrap();
        assert_eq!(win.len(), 30_000);
        assert!(!win.clipped);
        assert_eq!(win.events[win.anchor_index].t, 500_000);
    }

    #[test]
    fn window_before_first_event_right_heavy() {
        let s = stream(100);
        let win = window_at(&s, 0, 10).unwrap();
        assert_eq!(win.anchor_index, 0);
        assert_eq!(win.len(), 5, "only the onward half fits");
        assert!(win.clipped);
    }

    #[test]
    fn window_short_stream_clips() {
        let s = stream(10);
        let win = window_at(&s, 50, 30_000).unwrap();
        assert_eq!(win.len(), 10);
        assert!(win.clipped);
    }

    #[test]
    fn window_empty_stream_errors() {
        assert_eq!(window_at(&[], 0, 10).unwrap_err(), EventError::EmptyStream);
    }

    #[test]
    fn window_after_last_event_clamps_anchor() {
        let s = stream(100);
        let win = window_at(&s, 10_000_000, 10).unwrap();
        assert_eq!(win.events[win.anchor_index].t, s.last().unwrap().t);
    }

    /// Synthetic two-population stream: `signal` pixels fire `lo` times,
    /// `noise` pixels fire `hi` times. Returns the stream sorted by time.
    fn two_group_stream(
        signal_pixels: usize,
        noise_pixels: usize,
        lo: u32,
        hi: u32,
        seed: u64,
    ) -> (Vec<Event>, Vec<(u16, u16)>) {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut events = Vec::new();
        let mut noise = Vec::new();
        for i in 0..signal_pixels {
            let x = (i % 256) as u16;
            let y = (i / 256) as u16;
            let jitter = rng.gen_range(0..=1);
            for _ in 0..lo + jitter {
                events.push(Event { x, y, t: 0, p: 1 });
            }
        }
        for i in 0..noise_pixels {
            let x = (i % 256) as u16;
            let y = (200 + i / 256) as u16;
            noise.push((x, y));
            let jitter = rng.gen_range(0..=4);
            for _ in 0..hi + jitter {
                events.push(Event { x, y, t: 0, p: 1 });
            }
        }
        for (i, e) in events.iter_mut().enumerate() {
            e.t = i as u64;
        }
        (events, noise)
    }

    #[test]
    fn gmm_recovers_separated_means() {
        let (events, _) = two_group_stream(300, 300, 2, 50, 3);
        let win = EventWindow {
            events: &events,
            anchor_index: 0,
            clipped: false,
        };
        let fit = fit_count_gmm(&win, 42);
        assert!((fit.mu1 - 2.5).abs() / 2.5 < 0.3, "mu1 = {}", fit.mu1);
        assert!((fit.mu2 - 52.0).abs() / 52.0 < 0.1, "mu2 = {}", fit.mu2);
        assert!(fit.mu1 <= fit.mu2);
        assert!((fit.w1 + fit.w2 - 1.0).abs() < 1e-9);
        for pair in fit.log_likelihoods.windows(2) {
            assert!(pair[1] + 1e-9 >= pair[0], "log-likelihood decreased");
        }
    }

    #[test]
    fn gmm_degenerate_single_value() {
        let events: Vec<Event> = (0..30)
            .map(|i| Event {
                x: (i % 10) as u16,
                y: (i / 10) as u16,
                t: i as u64,
                p: 1,
            })
            .collect();
        // every pixel fires exactly once
        let win = EventWindow {
            events: &events,
            anchor_index: 0,
            clipped: false,
        };
        let fit = fit_count_gmm(&win, 42);
        assert_eq!(fit.mu1, fit.mu2);
        assert_eq!(fit.mu1, 1.0);
    }

    #[test]
    fn gmm_two_distinct_values_ordered() {
        let mut events = Vec::new();
        for i in 0..20u16 {
            events.push(Event { x: i, y: 0, t: 0, p: 1 });
        }
        for i in 0..20u16 {
            events.push(Event { x: i, y: 1, t: 0, p: 1 });
            events.push(Event { x: i, y: 1, t: 0, p: 1 });
        }
        let win = EventWindow {
            events: &events,
            anchor_index: 0,
            clipped: false,
        };
        let fit = fit_count_gmm(&win, 42);
        assert!(fit.mu1 <= fit.mu2);
    }

    #[test]
    fn gmm_deterministic_for_fixed_seed() {
        let (events, _) = two_group_stream(100, 100, 2, 50, 9);
        let win = EventWindow {
            events: &events,
            anchor_index: 0,
            clipped: false,
        };
        let a = fit_count_gmm(&win, 42);
        let b = fit_count_gmm(&win, 42);
        assert_eq!(a.mu1.to_bits(), b.mu1.to_bits());
        assert_eq!(a.mu2.to_bits(), b.mu2.to_bits());
    }

    #[test]
    fn select_keeps_low_cluster_when_separated() {
        let (events, noise_pixels) = two_group_stream(300, 300, 2, 50, 5);
        let win = EventWindow {
            events: &events,
            anchor_index: 0,
            clipped: false,
        };
        let fit = fit_count_gmm(&win, 42);
        assert!(fit.delta_mu() >= 2.5);
        let kept = select_events(&win, &fit, 2.5);
        assert!(!kept.is_empty());
        assert!(kept.len() < events.len());
        let noise: std::collections::HashSet<(u16, u16)> = noise_pixels.into_iter().collect();
        let leaked = kept.iter().filter(|e| noise.contains(&(e.x, e.y))).count();
        assert_eq!(leaked, 0, "no high-frequency events survive");
    }

    #[test]
    fn select_keeps_all_when_degenerate() {
        let events: Vec<Event> = (0..10)
            .map(|i| Event { x: i, y: 0, t: i as u64, p: 1 })
            .collect();
        let win = EventWindow {
            events: &events,
            anchor_index: 0,
            clipped: false,
        };
        let fit = fit_count_gmm(&win, 42);
        let kept = select_events(&win, &fit, 2.5);
        assert_eq!(kept.len(), events.len(), "delta_mu = 0 keeps everything");
    }

    #[test]
    fn voxel_empty_grid() {
        let g = voxelize(&[], 4, 4, 10, 0, 100).unwrap();
        assert!(g.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn voxel_integer_t_star_single_bin() {
        // t such that t* = 4.0 exactly: with B = 10, span 9000, t = 4000
        let e = Event { x: 1, y: 2, t: 4000, p: 1 };
        let g = voxelize(&[e], 4, 4, 10, 0, 9000).unwrap();
        assert_eq!(g.get(2, 1, 4), 1.0);
        let total: f64 = g.values.iter().map(|v| v.abs()).sum();
        assert_eq!(total, 1.0);
    }

    #[test]
    fn voxel_fractional_t_star_splits() {
        // t* = 3.5 with B = 10 over [0, 9000]: t = 3500
        let e = Event { x: 0, y: 0, t: 3500, p: 1 };
        let g = voxelize(&[e], 2, 2, 10, 0, 9000).unwrap();
        assert!((g.get(0, 0, 3) - 0.5).abs() < 1e-12);
        assert!((g.get(0, 0, 4) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn voxel_t_end_lands_in_last_bin() {
        let e = Event { x: 0, y: 0, t: 900, p: -1 };
        let g = voxelize(&[e], 2, 2, 10, 0, 900).unwrap();
        assert_eq!(g.get(0, 0, 9), -1.0);
    }

    #[test]
    fn voxel_partition_of_unity() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
        for _ in 0..1000 {
            let t = rng.gen_range(0..=1_000_000u64);
            let e = Event { x: 0, y: 0, t, p: 1 };
            let g = voxelize(&[e], 1, 1, 10, 0, 1_000_000).unwrap();
            let total: f64 = g.values.iter().sum();
            assert!((total - 1.0).abs() < 1e-12, "weights must sum to 1");
        }
    }

    #[test]
    fn voxel_empty_range_errors() {
        assert_eq!(
            voxelize(&[], 2, 2, 10, 5, 5).unwrap_err(),
            EventError::EmptyTimeRange(5, 5)
        );
    }

    #[test]
    fn voxel_split_by_polarity() {
        let events = [
            Event { x: 0, y: 0, t: 0, p: 1 },
            Event { x: 1, y: 0, t: 500, p: -1 },
        ];
        let (pos, neg) = voxelize_split(&events, 2, 2, 2, 0, 1000).unwrap();
        assert_eq!(pos.get(0, 0, 0), 1.0);
        assert_eq!(neg.get(0, 1, 1), 0.5);
        assert_eq!(neg.get(0, 1, 0), 0.5);
    }
}
