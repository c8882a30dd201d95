//! Dense binary masks, the RLE codec (counts array and compressed string
//! forms), mask geometry, translation warping, and binary morphology.

use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MaskError {
    #[error("mask sizes differ: {0}x{1} vs {2}x{3}")]
    SizeMismatch(usize, usize, usize, usize),
    #[error("operation requires a non-empty mask")]
    EmptyMask,
    #[error("RLE counts sum to {got}, expected {expected}")]
    SumMismatch { got: u64, expected: u64 },
    #[error("malformed RLE runs: {0}")]
    MalformedRuns(&'static str),
    #[error("invalid character {0:#x} in compressed RLE string")]
    BadCharacter(u8),
    #[error("compressed RLE string ends with continuation bit set")]
    TruncatedStream,
}

/// Dense binary mask stored row-major, one byte per pixel, values 0 or 1.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl BinaryMask {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0; height * width],
        }
    }

    pub fn from_data(height: usize, width: usize, data: Vec<u8>) -> Self {
        assert_eq!(data.len(), height * width, "data length must be h*w");
        debug_assert!(data.iter().all(|&v| v <= 1), "mask values must be 0 or 1");
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

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: u8) {
        self.data[row * self.width + col] = value;
    }

    /// Number of foreground pixels (the zeroth image moment).
    pub fn area(&self) -> usize {
        self.data.iter().map(|&v| v as usize).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.data.iter().all(|&v| v == 0)
    }
}

/// Run-length encoded mask. Runs alternate background/foreground starting
/// with background; only `counts[0]` may be zero. The scan order is
/// column-major (top-to-bottom, then left-to-right).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RleMask {
    /// (height, width)
    pub size: (usize, usize),
    pub counts: Vec<u32>,
}

impl RleMask {
    /// Check the run-structure and pixel-sum invariants without decoding.
    pub fn validate(&self) -> Result<(), MaskError> {
        let (h, w) = self.size;
        let expected = (h * w) as u64;
        if self.counts.is_empty() {
            if expected == 0 {
                return Ok(());
            }
            return Err(MaskError::MalformedRuns("empty counts for non-empty size"));
        }
        if self.counts[1..].iter().any(|&c| c == 0) {
            return Err(MaskError::MalformedRuns("interior zero-length run"));
        }
        let got: u64 = self.counts.iter().map(|&c| c as u64).sum();
        if got != expected {
            return Err(MaskError::SumMismatch { got, expected });
        }
        Ok(())
    }

    /// Foreground pixel count, summed from the odd-indexed runs.
    pub fn area(&self) -> u64 {
        self.counts
            .iter()
            .skip(1)
            .step_by(2)
            .map(|&c| c as u64)
            .sum()
    }
}

/// Encode a dense mask as column-major RLE. Total function: every mask has
/// exactly one encoding and `decode_rle(encode_rle(m)) == m`.
pub fn encode_rle(mask: &BinaryMask) -> RleMask {
    let mut counts = Vec::new();
    let mut current = 0u8;
    let mut run = 0u32;
    for col in 0..mask.width {
        for row in 0..mask.height {
            let v = mask.get(row, col);
            if v != current {
                counts.push(run);
                run = 0;
                current = v;
            }
            run += 1;
        }
    }
    counts.push(run);
    if mask.height * mask.width == 0 {
        counts.clear();
    }
    RleMask {
        size: (mask.height, mask.width),
        counts,
    }
}

/// Decode an RLE back to a dense mask. Malformed inputs are rejected, not
/// repaired.
pub fn decode_rle(rle: &RleMask) -> Result<BinaryMask, MaskError> {
    rle.validate()?;
    let (h, w) = rle.size;
    let mut mask = BinaryMask::zeros(h, w);
    let mut idx = 0usize;
    let mut value = 0u8;
    for &c in &rle.counts {
        if value == 1 {
            for k in idx..idx + c as usize {
                // column-major flat index k -> (row, col)
                let col = k / h;
                let row = k % h;
                mask.set(row, col, 1);
            }
        }
        idx += c as usize;
        value = 1 - value;
    }
    Ok(mask)
}

/// Serialize RLE counts into the compressed string form: 5 data bits per
/// character plus a 0x20 continuation flag, offset by 48, with runs after
/// the first two delta-encoded against the count two positions back.
pub fn rle_to_string(rle: &RleMask) -> Result<String, MaskError> {
    rle.validate()?;
    let mut s = String::new();
    for (i, &count) in rle.counts.iter().enumerate() {
        let mut x = if i > 2 {
            count as i64 - rle.counts[i - 2] as i64
        } else {
            count as i64
        };
        loop {
            let mut c = (x & 0x1f) as u8;
            x >>= 5;
            let more = if c & 0x10 != 0 { x != -1 } else { x != 0 };
            if more {
                c |= 0x20;
            }
            s.push((c + 48) as char);
            if !more {
                break;
            }
        }
    }
    Ok(s)
}

/// Parse the compressed string form back into an RLE with the given size.
pub fn rle_from_string(text: &str, size: (usize, usize)) -> Result<RleMask, MaskError> {
    let bytes = text.as_bytes();
    let mut counts: Vec<u32> = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let mut x: i64 = 0;
        let mut shift = 0u32;
        loop {
            if i >= bytes.len() {
                return Err(MaskError::TruncatedStream);
            }
            let b = bytes[i];
            if !(48..=111).contains(&b) {
                return Err(MaskError::BadCharacter(b));
            }
            let c = (b - 48) as i64;
            i += 1;
            x |= (c & 0x1f) << shift;
            shift += 5;
            if c & 0x20 == 0 {
                break;
            }
        }
        // sign-extend from the top data bit of the last group
        if x & (1 << (shift - 1)) != 0 {
            x |= !0i64 << shift;
        }
        if counts.len() > 2 {
            x += counts[counts.len() - 2] as i64;
        }
        if x < 0 {
            return Err(MaskError::MalformedRuns("negative run length"));
        }
        counts.push(x as u32);
    }
    let rle = RleMask { size, counts };
    rle.validate()?;
    Ok(rle)
}

/// Axis-aligned box with continuous coordinates; `x`/`y` are the left/top
/// edge and `w`/`h` must be positive.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Box2D {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl Box2D {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        Self { x, y, w, h }
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x + self.w / 2.0, self.y + self.h / 2.0)
    }
}

/// Intersection-over-union of two same-size masks. Defined as 0 when both
/// masks are empty.
pub fn mask_iou(a: &BinaryMask, b: &BinaryMask) -> Result<f64, MaskError> {
    if a.height != b.height || a.width != b.width {
        return Err(MaskError::SizeMismatch(a.height, a.width, b.height, b.width));
    }
    let mut inter = 0u64;
    let mut union = 0u64;
    for (&x, &y) in a.data.iter().zip(&b.data) {
        inter += (x & y) as u64;
        union += (x | y) as u64;
    }
    if union == 0 {
        return Ok(0.0);
    }
    Ok(inter as f64 / union as f64)
}

/// Intersection area of two RLE masks via a two-pointer walk over the run
/// streams; no decoding. Sizes must match.
pub fn rle_intersection(a: &RleMask, b: &RleMask) -> u64 {
    let mut ca = 0u64;
    let mut cb = 0u64;
    let mut va = false;
    let mut vb = false;
    let mut ai = 0usize;
    let mut bi = 0usize;
    let mut inter = 0u64;
    loop {
        while ca == 0 && ai < a.counts.len() {
            ca = a.counts[ai] as u64;
            va = ai % 2 == 1;
            ai += 1;
        }
        while cb == 0 && bi < b.counts.len() {
            cb = b.counts[bi] as u64;
            vb = bi % 2 == 1;
            bi += 1;
        }
        let step = if ca > 0 && cb > 0 {
            ca.min(cb)
        } else {
            break;
        };
        if va && vb {
            inter += step;
        }
        ca -= step;
        cb -= step;
    }
    inter
}

/// IoU of two RLE masks without decoding.
pub fn rle_iou(a: &RleMask, b: &RleMask) -> Result<f64, MaskError> {
    if a.size != b.size {
        return Err(MaskError::SizeMismatch(a.size.0, a.size.1, b.size.0, b.size.1));
    }
    let inter = rle_intersection(a, b);
    let union = a.area() + b.area() - inter;
    if union == 0 {
        return Ok(0.0);
    }
    Ok(inter as f64 / union as f64)
}

/// Tight axis-aligned bounds of the foreground.
pub fn box_from_mask(mask: &BinaryMask) -> Result<Box2D, MaskError> {
    let mut min_row = usize::MAX;
    let mut max_row = 0usize;
    let mut min_col = usize::MAX;
    let mut max_col = 0usize;
    let mut any = false;
    for row in 0..mask.height {
        for col in 0..mask.width {
            if mask.get(row, col) == 1 {
                any = true;
                min_row = min_row.min(row);
                max_row = max_row.max(row);
                min_col = min_col.min(col);
                max_col = max_col.max(col);
            }
        }
    }
    if !any {
        return Err(MaskError::EmptyMask);
    }
    Ok(Box2D::new(
        min_col as f64,
        min_row as f64,
        (max_col - min_col + 1) as f64,
        (max_row - min_row + 1) as f64,
    ))
}

/// Foreground centroid from image moments: (M10/M00, M01/M00), i.e. the
/// mean column and mean row.
pub fn centroid(mask: &BinaryMask) -> Result<(f64, f64), MaskError> {
    let mut m00 = 0u64;
    let mut m10 = 0u64;
    let mut m01 = 0u64;
    for row in 0..mask.height {
        for col in 0..mask.width {
            if mask.get(row, col) == 1 {
                m00 += 1;
                m10 += col as u64;
                m01 += row as u64;
            }
        }
    }
    if m00 == 0 {
        return Err(MaskError::EmptyMask);
    }
    Ok((m10 as f64 / m00 as f64, m01 as f64 / m00 as f64))
}

/// Translate a mask by (dx, dy) with nearest-neighbor inverse warping:
/// output(x, y) = input(round(x - dx), round(y - dy)). Out-of-bounds source
/// reads are background. Sub-pixel shifts are rounded at lookup time, not
/// pre-rounded.
pub fn translate_mask(mask: &BinaryMask, dx: f64, dy: f64) -> BinaryMask {
    let mut out = BinaryMask::zeros(mask.height, mask.width);
    for row in 0..mask.height {
        let src_row = (row as f64 - dy).round();
        if src_row < 0.0 || src_row >= mask.height as f64 {
            continue;
        }
        for col in 0..mask.width {
            let src_col = (col as f64 - dx).round();
            if src_col < 0.0 || src_col >= mask.width as f64 {
                continue;
            }
            out.set(row, col, mask.get(src_row as usize, src_col as usize));
        }
    }
    out
}

fn dilate_once(mask: &BinaryMask) -> BinaryMask {
    let mut out = BinaryMask::zeros(mask.height, mask.width);
    for row in 0..mask.height {
        for col in 0..mask.width {
            'neighbors: for dr in -1i64..=1 {
                for dc in -1i64..=1 {
                    let r = row as i64 + dr;
                    let c = col as i64 + dc;
                    if r >= 0
                        && c >= 0
                        && (r as usize) < mask.height
                        && (c as usize) < mask.width
                        && mask.get(r as usize, c as usize) == 1
                    {
                        out.set(row, col, 1);
                        break 'neighbors;
                    }
                }
            }
        }
    }
    out
}

fn erode_once(mask: &BinaryMask) -> BinaryMask {
    let mut out = BinaryMask::zeros(mask.height, mask.width);
    for row in 0..mask.height {
        for col in 0..mask.width {
            let mut all = true;
            'neighbors: for dr in -1i64..=1 {
                for dc in -1i64..=1 {
                    let r = row as i64 + dr;
                    let c = col as i64 + dc;
                    // outside the image counts as background
                    if r < 0
                        || c < 0
                        || r as usize >= mask.height
                        || c as usize >= mask.width
                        || mask.get(r as usize, c as usize) == 0
                    {
                        all = false;
                        break 'neighbors;
                    }
                }
            }
            if all {
                out.set(row, col, 1);
            }
        }
    }
    out
}

/// Dilate with the full 3x3 structuring element `dilate_iters` times, then
/// erode `erode_iters` times. Smooths boundaries and fills small holes.
pub fn morph_smooth(mask: &BinaryMask, dilate_iters: usize, erode_iters: usize) -> BinaryMask {
    let mut m = mask.clone();
    for _ in 0..dilate_iters {
        m = dilate_once(&m);
    }
    for _ in 0..erode_iters {
        m = erode_once(&m);
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn mask_from_pixels(h: usize, w: usize, pixels: &[(usize, usize)]) -> BinaryMask {
        let mut m = BinaryMask::zeros(h, w);
        for &(r, c) in pixels {
            m.set(r, c, 1);
        }
        m
    }

    #[test]
    fn encode_all_zero() {
        let m = BinaryMask::zeros(2, 2);
        assert_eq!(encode_rle(&m).counts, vec![4]);
    }

    #[test]
    fn encode_all_one() {
        let m = BinaryMask::from_data(2, 2, vec![1; 4]);
        assert_eq!(encode_rle(&m).counts, vec![0, 4]);
    }

    #[test]
    fn encode_single_pixel_column_major() {
        // pixel at row 0, col 0 of a 3x3: first in the column-major scan
        let m = mask_from_pixels(3, 3, &[(0, 0)]);
        assert_eq!(encode_rle(&m).counts, vec![0, 1, 8]);
    }

    #[test]
    fn decode_golden_vectors() {
        let all_zero = decode_rle(&RleMask {
            size: (2, 2),
            counts: vec![4],
        })
        .unwrap();
        assert!(all_zero.is_empty());

        let single = decode_rle(&RleMask {
            size: (3, 3),
            counts: vec![0, 1, 8],
        })
        .unwrap();
        assert_eq!(single, mask_from_pixels(3, 3, &[(0, 0)]));
    }

    #[test]
    fn decode_rejects_sum_mismatch() {
        let err = decode_rle(&RleMask {
            size: (2, 2),
            counts: vec![3, 2],
        })
        .unwrap_err();
        assert_eq!(err, MaskError::SumMismatch { got: 5, expected: 4 });
    }

    #[test]
    fn decode_rejects_interior_zero() {
        let err = decode_rle(&RleMask {
            size: (2, 2),
            counts: vec![2, 0, 2],
        })
        .unwrap_err();
        assert!(matches!(err, MaskError::MalformedRuns(_)));
    }

    #[test]
    fn to_string_rejects_empty_counts() {
        let err = rle_to_string(&RleMask {
            size: (2, 2),
            counts: vec![],
        })
        .unwrap_err();
        assert!(matches!(err, MaskError::MalformedRuns(_)));
    }

    #[test]
    fn string_codec_golden_roundtrip() {
        let rle = RleMask {
            size: (3, 3),
            counts: vec![0, 1, 8],
        };
        let s = rle_to_string(&rle).unwrap();
        assert_eq!(rle_from_string(&s, (3, 3)).unwrap(), rle);
    }

    #[test]
    fn string_codec_bad_character() {
        let err = rle_from_string("a b", (10, 10)).unwrap_err();
        assert!(matches!(err, MaskError::BadCharacter(_)));
    }

    #[test]
    fn string_codec_truncated() {
        // 'P' = 80 has the continuation bit (0x20) set, so a lone 'P' is cut off
        let err = rle_from_string("P", (10, 10)).unwrap_err();
        assert_eq!(err, MaskError::TruncatedStream);
    }

    #[test]
    fn iou_identical_and_disjoint() {
        let a = mask_from_pixels(2, 2, &[(0, 0), (0, 1)]);
        assert_eq!(mask_iou(&a, &a).unwrap(), 1.0);
        let b = mask_from_pixels(2, 2, &[(1, 0), (1, 1)]);
        assert_eq!(mask_iou(&a, &b).unwrap(), 0.0);
    }

    #[test]
    fn iou_one_third() {
        // overlap 1 pixel, union 3 pixels
        let a = mask_from_pixels(2, 2, &[(0, 0), (0, 1)]);
        let b = mask_from_pixels(2, 2, &[(0, 1), (1, 1)]);
        let v = mask_iou(&a, &b).unwrap();
        assert!((v - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn iou_both_empty_is_zero() {
        let a = BinaryMask::zeros(2, 2);
        assert_eq!(mask_iou(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn iou_size_mismatch() {
        let a = BinaryMask::zeros(2, 2);
        let b = BinaryMask::zeros(3, 2);
        assert!(mask_iou(&a, &b).is_err());
    }

    #[test]
    fn box_from_mask_cases() {
        let single = mask_from_pixels(5, 5, &[(2, 3)]);
        let b = box_from_mask(&single).unwrap();
        assert_eq!((b.x, b.y, b.w, b.h), (3.0, 2.0, 1.0, 1.0));

        let full = BinaryMask::from_data(4, 6, vec![1; 24]);
        let b = box_from_mask(&full).unwrap();
        assert_eq!((b.x, b.y, b.w, b.h), (0.0, 0.0, 6.0, 4.0));

        let ell = mask_from_pixels(3, 3, &[(0, 0), (1, 0), (1, 1)]);
        let b = box_from_mask(&ell).unwrap();
        assert_eq!((b.x, b.y, b.w, b.h), (0.0, 0.0, 2.0, 2.0));

        assert_eq!(
            box_from_mask(&BinaryMask::zeros(2, 2)).unwrap_err(),
            MaskError::EmptyMask
        );
    }

    #[test]
    fn centroid_cases() {
        let full = BinaryMask::from_data(2, 2, vec![1; 4]);
        assert_eq!(centroid(&full).unwrap(), (0.5, 0.5));

        let single = mask_from_pixels(5, 5, &[(3, 1)]);
        assert_eq!(centroid(&single).unwrap(), (1.0, 3.0));

        let pair = mask_from_pixels(3, 3, &[(0, 0), (0, 2)]);
        assert_eq!(centroid(&pair).unwrap(), (1.0, 0.0));

        assert_eq!(
            centroid(&BinaryMask::zeros(2, 2)).unwrap_err(),
            MaskError::EmptyMask
        );
    }

    #[test]
    fn translate_identity_and_shift() {
        let m = mask_from_pixels(4, 4, &[(0, 0)]);
        assert_eq!(translate_mask(&m, 0.0, 0.0), m);

        let shifted = translate_mask(&m, 2.0, 1.0);
        assert_eq!(shifted, mask_from_pixels(4, 4, &[(1, 2)]));

        let gone = translate_mask(&m, 10.0, 10.0);
        assert!(gone.is_empty());
    }

    #[test]
    fn translate_centroid_follows_shift() {
        let m = mask_from_pixels(20, 20, &[(9, 9), (9, 10), (10, 9), (10, 10)]);
        let (cx, cy) = centroid(&m).unwrap();
        let t = translate_mask(&m, 3.0, -2.0);
        let (tx, ty) = centroid(&t).unwrap();
        assert_eq!((tx, ty), (cx + 3.0, cy - 2.0));
    }

    #[test]
    fn morph_empty_stays_empty() {
        let m = BinaryMask::zeros(5, 5);
        assert!(morph_smooth(&m, 4, 3).is_empty());
    }

    #[test]
    fn morph_open_close_single_pixel() {
        let m = mask_from_pixels(5, 5, &[(2, 2)]);
        assert_eq!(morph_smooth(&m, 1, 1), m);
    }

    #[test]
    fn morph_fills_one_pixel_hole() {
        // 3x3 ring with a hole in the middle, placed away from the border
        let mut ring = Vec::new();
        for r in 6..9 {
            for c in 6..9 {
                if (r, c) != (7, 7) {
                    ring.push((r, c));
                }
            }
        }
        let m = mask_from_pixels(15, 15, &ring);
        let out = morph_smooth(&m, 4, 3);
        assert_eq!(out.get(7, 7), 1, "hole must be filled");
        for &(r, c) in &ring {
            assert_eq!(out.get(r, c), 1, "smoothing must not remove the ring");
        }
    }

    #[test]
    fn dilation_extensive_erosion_anti_extensive() {
        let m = mask_from_pixels(8, 8, &[(3, 3), (3, 4), (4, 3), (4, 4), (1, 6)]);
        let d = dilate_once(&m);
        let e = erode_once(&m);
        for i in 0..m.data.len() {
            assert!(d.data[i] >= m.data[i]);
            assert!(e.data[i] <= m.data[i]);
        }
    }

    proptest! {
        #[test]
        fn rle_roundtrip(h in 1usize..32, w in 1usize..32, seed in any::<u64>()) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let data: Vec<u8> = (0..h * w).map(|_| rng.gen_range(0..=1u8)).collect();
            let m = BinaryMask::from_data(h, w, data);
            let rle = encode_rle(&m);
            prop_assert_eq!(decode_rle(&rle).unwrap(), m.clone());
            let s = rle_to_string(&rle).unwrap();
            prop_assert_eq!(rle_from_string(&s, (h, w)).unwrap(), rle);
        }

        #[test]
        fn iou_symmetric_bounded(h in 1usize..16, w in 1usize..16, seed in any::<u64>()) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let a = BinaryMask::from_data(h, w, (0..h * w).map(|_| rng.gen_range(0..=1u8)).collect());
            let b = BinaryMask::from_data(h, w, (0..h * w).map(|_| rng.gen_range(0..=1u8)).collect());
            let ab = mask_iou(&a, &b).unwrap();
            let ba = mask_iou(&b, &a).unwrap();
            prop_assert_eq!(ab, ba);
            prop_assert!((0.0..=1.0).contains(&ab));
            // rle fast path agrees with the dense computation
            let r = rle_iou(&encode_rle(&a), &encode_rle(&b)).unwrap();
            prop_assert!((r - ab).abs() < 1e-12);
            if ab == 1.0 {
                prop_assert_eq!(&a, &b);
                prop_assert!(!a.is_empty());
            }
        }
    }
}
