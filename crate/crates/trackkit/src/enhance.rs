//! Grayscale contrast enhancement: global histogram equalization and
//! contrast-limited adaptive histogram equalization (CLAHE).

use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EnhanceError {
    #[error("tile grid {0}x{1} larger than image {2}x{3}")]
    GridLargerThanImage(usize, usize, usize, usize),
}

/// 8-bit grayscale frame, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayFrame {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl GrayFrame {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Self {
        assert_eq!(data.len(), height * width);
        Self {
            height,
            width,
            data,
        }
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.data[row * self.width + col]
    }
}

/// Equalization LUT from a (possibly clipped) histogram:
/// v -> round((cdf(v) - cdf_min) / (N - cdf_min) * 255) where cdf_min is
/// the CDF at the lowest occupied intensity. A histogram with a single
/// occupied bin maps every intensity to itself.
fn equalization_lut(hist: &[f64; 256]) -> [u8; 256] {
    let mut lut = [0u8; 256];
    let occupied = hist.iter().filter(|&&c| c > 0.0).count();
    if occupied <= 1 {
        for (v, slot) in lut.iter_mut().enumerate() {
            *slot = v as u8;
        }
        return lut;
    }
    let total: f64 = hist.iter().sum();
    let cdf_min = hist
        .iter()
        .find(|&&c| c > 0.0)
        .copied()
        .unwrap_or(0.0);
    let denom = total - cdf_min;
    let mut cdf = 0.0;
    for v in 0..256 {
        cdf += hist[v];
        let mapped = ((cdf - cdf_min) / denom * 255.0).round();
        lut[v] = mapped.clamp(0.0, 255.0) as u8;
    }
    lut
}

/// Global histogram equalization. Constant frames map to themselves.
pub fn hist_equalize(frame: &GrayFrame) -> GrayFrame {
    let mut hist = [0.0f64; 256];
    for &v in &frame.data {
        hist[v as usize] += 1.0;
    }
    let lut = equalization_lut(&hist);
    GrayFrame::new(
        frame.height,
        frame.width,
        frame.data.iter().map(|&v| lut[v as usize]).collect(),
    )
}

/// Clip a tile histogram at clip_limit * tile_pixels / 256 and spread the
/// excess: one uniform pass over all bins, with the residual handed out
/// round-robin from bin 0.
fn clip_histogram(hist: &mut [f64; 256], clip_limit: f64, tile_pixels: usize) {
    let limit = ((clip_limit * tile_pixels as f64 / 256.0).floor()).max(1.0);
    let mut excess = 0.0;
    for bin in hist.iter_mut() {
        if *bin > limit {
            excess += *bin - limit;
            *bin = limit;
        }
    }
    if excess <= 0.0 {
        return;
    }
    let batch = (excess / 256.0).floor();
    let mut residual = (excess - batch * 256.0).round() as usize;
    for bin in hist.iter_mut() {
        *bin += batch;
    }
    let mut i = 0;
    while residual > 0 {
        hist[i % 256] += 1.0;
        residual -= 1;
        i += 1;
    }
}

/// Contrast-limited adaptive histogram equalization. The image is split
/// into a grid of tiles (the last row/column absorbs remainders), each
/// tile gets a clipped equalization LUT, and every output pixel blends
/// the four nearest tile mappings bilinearly by its distance to the tile
/// centers. A tile whose raw histogram is constant keeps the identity
/// mapping so flat regions stay untouched.
pub fn clahe(
    frame: &GrayFrame,
    clip_limit: f64,
    grid: (usize, usize),
) -> Result<GrayFrame, EnhanceError> {
    let (grid_rows, grid_cols) = grid;
    assert!(grid_rows >= 1 && grid_cols >= 1, "grid dims must be >= 1");
    assert!(clip_limit > 0.0, "clip limit must be positive");
    if grid_rows > frame.height || grid_cols > frame.width {
        return Err(EnhanceError::GridLargerThanImage(
            grid_rows,
            grid_cols,
            frame.height,
            frame.width,
        ));
    }

    let tile_h = frame.height / grid_rows;
    let tile_w = frame.width / grid_cols;
    // tile boundaries; the last tile absorbs the remainder
    let row_start = |tr: usize| tr * tile_h;
    let row_end = |tr: usize| {
        if tr + 1 == grid_rows {
            frame.height
        } else {
            (tr + 1) * tile_h
        }
    };
    let col_start = |tc: usize| tc * tile_w;
    let col_end = |tc: usize| {
        if tc + 1 == grid_cols {
            frame.width
        } else {
            (tc + 1) * tile_w
        }
    };

    let mut luts: Vec<[u8; 256]> = Vec::with_capacity(grid_rows * grid_cols);
    let mut centers_r: Vec<f64> = Vec::with_capacity(grid_rows);
    let mut centers_c: Vec<f64> = Vec::with_capacity(grid_cols);
    for tr in 0..grid_rows {
        centers_r.push((row_start(tr) + row_end(tr)) as f64 / 2.0 - 0.5);
    }
    for tc in 0..grid_cols {
        centers_c.push((col_start(tc) + col_end(tc)) as f64 / 2.0 - 0.5);
    }
    for tr in 0..grid_rows {
        for tc in 0..grid_cols {
            let mut hist = [0.0f64; 256];
            let mut pixels = 0usize;
            for r in row_start(tr)..row_end(tr) {
                for c in col_start(tc)..col_end(tc) {
                    hist[frame.get(r, c) as usize] += 1.0;
                    pixels += 1;
                }
            }
            let occupied = hist.iter().filter(|&&c| c > 0.0).count();
            if occupied > 1 {
                clip_histogram(&mut hist, clip_limit, pixels);
            }
            luts.push(equalization_lut(&hist));
        }
    }

    let lut_at = |tr: usize, tc: usize| -> &[u8; 256] { &luts[tr * grid_cols + tc] };
    let mut out = vec![0u8; frame.height * frame.width];
    for r in 0..frame.height {
        // neighbor tile rows above/below this pixel, clamped at the edges
        let rf = r as f64;
        let (tr0, tr1, wr) = neighbor_weights(&centers_r, rf);
        for c in 0..frame.width {
            let cf = c as f64;
            let (tc0, tc1, wc) = neighbor_weights(&centers_c, cf);
            let v = frame.get(r, c) as usize;
            let top = (1.0 - wc) * lut_at(tr0, tc0)[v] as f64 + wc * lut_at(tr0, tc1)[v] as f64;
            let bottom = (1.0 - wc) * lut_at(tr1, tc0)[v] as f64 + wc * lut_at(tr1, tc1)[v] as f64;
            let value = (1.0 - wr) * top + wr * bottom;
            out[r * frame.width + c] = value.round().clamp(0.0, 255.0) as u8;
        }
    }
    Ok(GrayFrame::new(frame.height, frame.width, out))
}

/// Indices of the two tile centers bracketing `pos` and the blend weight
/// of the second one. Positions beyond the first/last center clamp.
fn neighbor_weights(centers: &[f64], pos: f64) -> (usize, usize, f64) {
    if pos <= centers[0] {
        return (0, 0, 0.0);
    }
    if pos >= *centers.last().unwrap() {
        let last = centers.len() - 1;
        return (last, last, 0.0);
    }
    let hi = centers.partition_point(|&c| c <= pos);
    let lo = hi - 1;
    let w = (pos - centers[lo]) / (centers[hi] - centers[lo]);
    (lo, hi, w)
}
