//! Binary instance masks, the COCO/MOTS compressed RLE codec, and the pixel
//! geometry used by fusion and short-term association.
//!
//! Pixels are stored column-major (`x * height + y`) so that run-length
//! encoding is a single linear scan, matching the COCO mask API.

use crate::error::{Error, Result};

/// Dense binary pixel grid.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl std::fmt::Debug for BinaryMask {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("BinaryMask")
            .field("height", &self.height)
            .field("width", &self.width)
            .field("area", &self.area())
            .finish()
    }
}

impl BinaryMask {
    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            bits: vec![false; height * width],
        }
    }

    pub fn full(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            bits: vec![true; height * width],
        }
    }

    /// Builds a mask by evaluating `f(y, x)` at every pixel.
    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(height * width);
        for x in 0..width {
            for y in 0..height {
                bits.push(f(y, x));
            }
        }
        Self { height, width, bits }
    }

    /// Wraps column-major pixel data.
    pub fn from_column_major(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != height * width {
            return Err(Error::InvalidValue(format!(
                "mask data has {} pixels, expected {}x{}",
                bits.len(),
                height,
                width
            )));
        }
        Ok(Self { height, width, bits })
    }

    /// Axis-aligned filled rectangle covering rows `top..top+h` and columns
    /// `left..left+w`, clipped to the frame.
    pub fn rect(height: usize, width: usize, top: i64, left: i64, h: i64, w: i64) -> Self {
        Self::from_fn(height, width, |y, x| {
            let (y, x) = (y as i64, x as i64);
            y >= top && y < top + h && x >= left && x < left + w
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    /// Column-major pixel slice.
    pub fn as_column_major(&self) -> &[bool] {
        &self.bits
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> bool {
        self.bits[x * self.height + y]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, value: bool) {
        self.bits[x * self.height + y] = value;
    }

    pub fn area(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    pub(crate) fn check_dims(&self, other_h: usize, other_w: usize) -> Result<()> {
        if self.height != other_h || self.width != other_w {
            return Err(Error::DimensionMismatch {
                left_h: self.height,
                left_w: self.width,
                right_h: other_h,
                right_w: other_w,
            });
        }
        Ok(())
    }

    pub fn intersection_area(&self, other: &BinaryMask) -> Result<usize> {
        self.check_dims(other.height, other.width)?;
        Ok(self.bits.iter().zip(&other.bits).filter(|(&a, &b)| a && b).count())
    }

    /// Clears every pixel that is set in `other`.
    pub fn subtract(&mut self, other: &BinaryMask) -> Result<()> {
        self.check_dims(other.height, other.width)?;
        for (a, &b) in self.bits.iter_mut().zip(&other.bits) {
            *a &= !b;
        }
        Ok(())
    }

    /// Sets every pixel that is set in `other`.
    pub fn union_with(&mut self, other: &BinaryMask) -> Result<()> {
        self.check_dims(other.height, other.width)?;
        for (a, &b) in self.bits.iter_mut().zip(&other.bits) {
            *a |= b;
        }
        Ok(())
    }

    /// Inclusive bounding box `(top, left, bottom, right)`, or `None` when empty.
    pub fn bbox(&self) -> Option<(usize, usize, usize, usize)> {
        let mut out: Option<(usize, usize, usize, usize)> = None;
        for x in 0..self.width {
            let col = &self.bits[x * self.height..(x + 1) * self.height];
            for (y, _) in col.iter().enumerate().filter(|(_, &b)| b) {
                out = Some(match out {
                    None => (y, x, y, x),
                    Some((t, l, b, r)) => (t.min(y), l.min(x), b.max(y), r.max(x)),
                });
            }
        }
        out
    }

    /// Run lengths in column-major order, starting with a (possibly empty)
    /// background run. Runs after the first are never zero.
    pub fn runs(&self) -> Vec<u32> {
        let mut runs = Vec::new();
        let mut current = false;
        let mut count = 0u32;
        for &b in &self.bits {
            if b != current {
                runs.push(count);
                count = 0;
                current = b;
            }
            count += 1;
        }
        runs.push(count);
        runs
    }

    pub fn from_runs(height: usize, width: usize, runs: &[u32]) -> Result<Self> {
        let total: u64 = runs.iter().map(|&r| r as u64).sum();
        if total != (height * width) as u64 {
            return Err(Error::InvalidValue(format!(
                "runs sum to {total}, expected {}",
                height * width
            )));
        }
        let mut bits = Vec::with_capacity(height * width);
        for (i, &r) in runs.iter().enumerate() {
            bits.extend(std::iter::repeat_n(i % 2 == 1, r as usize));
        }
        Ok(Self { height, width, bits })
    }
}

/// Compressed run-length mask as it appears in MOTS text files.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct RleMask {
    pub height: usize,
    pub width: usize,
    pub counts: String,
}

impl RleMask {
    pub fn new(height: usize, width: usize, counts: impl Into<String>) -> Self {
        Self {
            height,
            width,
            counts: counts.into(),
        }
    }
}

fn push_varint(out: &mut String, mut x: i64) {
    loop {
        let mut c = (x & 0x1f) as u8;
        x >>= 5;
        let more = if c & 0x10 != 0 { x != -1 } else { x != 0 };
        if more {
            c |= 0x20;
        }
        out.push((c + 48) as char);
        if !more {
            break;
        }
    }
}

/// Encodes run lengths into the compressed string. From the fourth run on,
/// each value is stored as the difference to the run two positions back.
pub fn runs_to_string(runs: &[u32]) -> String {
    let mut out = String::with_capacity(runs.len() * 2);
    for (i, &r) in runs.iter().enumerate() {
        let mut x = r as i64;
        if i > 2 {
            x -= runs[i - 2] as i64;
        }
        push_varint(&mut out, x);
    }
    out
}

/// Parses the compressed string back into run lengths.
pub fn string_to_runs(counts: &str) -> Result<Vec<u32>> {
    let bytes = counts.as_bytes();
    let mut runs: Vec<u32> = Vec::new();
    let mut p = 0;
    while p < bytes.len() {
        let start = p;
        let mut x: i64 = 0;
        let mut k = 0u32;
        loop {
            let Some(&byte) = bytes.get(p) else {
                return Err(Error::RleDecode {
                    offset: p,
                    reason: format!("varint starting at byte {start} is truncated"),
                });
            };
            if !(48..48 + 64).contains(&byte) {
                return Err(Error::RleDecode {
                    offset: p,
                    reason: format!("character {:?} outside the RLE alphabet", byte as char),
                });
            }
            if k >= 12 {
                return Err(Error::RleDecode {
                    offset: p,
                    reason: "varint too long".into(),
                });
            }
            let c = (byte - 48) as i64;
            x |= (c & 0x1f) << (5 * k);
            p += 1;
            k += 1;
            if c & 0x20 == 0 {
                if c & 0x10 != 0 {
                    x |= -1i64 << (5 * k);
                }
                break;
            }
        }
        if runs.len() > 2 {
            x += runs[runs.len() - 2] as i64;
        }
        if x < 0 || x > u32::MAX as i64 {
            return Err(Error::RleDecode {
                offset: start,
                reason: format!("run length {x} out of range"),
            });
        }
        runs.push(x as u32);
    }
    Ok(runs)
}

pub fn encode_rle(mask: &BinaryMask) -> RleMask {
    RleMask {
        height: mask.height,
        width: mask.width,
        counts: runs_to_string(&mask.runs()),
    }
}

pub fn decode_rle(rle: &RleMask) -> Result<BinaryMask> {
    let runs = string_to_runs(&rle.counts)?;
    let total: u64 = runs.iter().map(|&r| r as u64).sum();
    let expected = (rle.height * rle.width) as u64;
    if total != expected {
        return Err(Error::RleDecode {
            offset: rle.counts.len(),
            reason: format!("runs sum to {total}, expected {expected}"),
        });
    }
    BinaryMask::from_runs(rle.height, rle.width, &runs)
}

/// Intersection over union; 0 when both masks are empty.
pub fn iou(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    a.check_dims(b.height, b.width)?;
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.bits.iter().zip(&b.bits) {
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    if union == 0 {
        return Ok(0.0);
    }
    Ok(inter as f64 / union as f64)
}

/// Intersection over the smaller of the two areas.
pub fn iom(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    a.check_dims(b.height, b.width)?;
    let (mut inter, mut area_a, mut area_b) = (0usize, 0usize, 0usize);
    for (&x, &y) in a.bits.iter().zip(&b.bits) {
        inter += (x && y) as usize;
        area_a += x as usize;
        area_b += y as usize;
    }
    if area_a == 0 && area_b == 0 {
        return Err(Error::EmptyMasks);
    }
    let min = area_a.min(area_b);
    if min == 0 {
        return Ok(0.0);
    }
    Ok(inter as f64 / min as f64)
}

/// Dense per-pixel displacement from one frame to the next, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowField {
    height: usize,
    width: usize,
    dx: Vec<f32>,
    dy: Vec<f32>,
}

impl FlowField {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            dx: vec![0.0; height * width],
            dy: vec![0.0; height * width],
        }
    }

    pub fn uniform(height: usize, width: usize, dx: f32, dy: f32) -> Self {
        Self {
            height,
            width,
            dx: vec![dx; height * width],
            dy: vec![dy; height * width],
        }
    }

    pub fn from_parts(height: usize, width: usize, dx: Vec<f32>, dy: Vec<f32>) -> Result<Self> {
        if dx.len() != height * width || dy.len() != height * width {
            return Err(Error::InvalidValue(format!(
                "flow components must have {} entries",
                height * width
            )));
        }
        if dx.iter().chain(&dy).any(|v| !v.is_finite()) {
            return Err(Error::InvalidValue("flow contains non-finite values".into()));
        }
        Ok(Self { height, width, dx, dy })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize) -> (f32, f32) {
        let i = y * self.width + x;
        (self.dx[i], self.dy[i])
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, dx: f32, dy: f32) {
        let i = y * self.width + x;
        self.dx[i] = dx;
        self.dy[i] = dy;
    }

    pub fn dx(&self) -> &[f32] {
        &self.dx
    }

    pub fn dy(&self) -> &[f32] {
        &self.dy
    }
}

/// Forward nearest-neighbour warp: every foreground pixel moves to its
/// rounded displaced position; targets outside the frame are dropped.
pub fn warp_mask(mask: &BinaryMask, flow: &FlowField) -> Result<BinaryMask> {
    mask.check_dims(flow.height, flow.width)?;
    let (h, w) = (mask.height as i64, mask.width as i64);
    let mut out = BinaryMask::empty(mask.height, mask.width);
    for x in 0..mask.width {
        for y in 0..mask.height {
            if !mask.get(y, x) {
                continue;
            }
            let (dx, dy) = flow.at(y, x);
            let tx = (x as f64 + dx as f64).round() as i64;
            let ty = (y as f64 + dy as f64).round() as i64;
            if (0..w).contains(&tx) && (0..h).contains(&ty) {
                out.set(ty as usize, tx as usize, true);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn runs_of(rle: &RleMask) -> Vec<u32> {
        string_to_runs(&rle.counts).unwrap()
    }

    #[test]
    fn empty_and_full_runs() {
        assert_eq!(runs_of(&encode_rle(&BinaryMask::empty(2, 2))), vec![4]);
        assert_eq!(runs_of(&encode_rle(&BinaryMask::full(2, 2))), vec![0, 4]);

        let empty = decode_rle(&RleMask::new(4, 3, runs_to_string(&[12]))).unwrap();
        assert_eq!(empty.area(), 0);
        let full = decode_rle(&RleMask::new(4, 3, runs_to_string(&[0, 12]))).unwrap();
        assert_eq!(full.area(), 12);
    }

    #[test]
    fn column_major_layout() {
        // Single pixel at row 0, column 1 of a 2x2 frame is the third pixel.
        let mut m = BinaryMask::empty(2, 2);
        m.set(0, 1, true);
        assert_eq!(m.runs(), vec![2, 1, 1]);
    }

    #[test]
    fn decode_rejects_bad_alphabet() {
        let err = decode_rle(&RleMask::new(2, 2, "4~")).unwrap_err();
        match err {
            Error::RleDecode { offset, .. } => assert_eq!(offset, 1),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn decode_rejects_truncated_varint() {
        // 0x20 continuation bit set on the last byte.
        let s = ((0x20u8 | 1) + 48) as char;
        let err = decode_rle(&RleMask::new(2, 2, s.to_string())).unwrap_err();
        assert!(matches!(err, Error::RleDecode { offset: 1, .. }));
    }

    #[test]
    fn decode_rejects_sum_mismatch() {
        let err = decode_rle(&RleMask::new(2, 2, runs_to_string(&[3]))).unwrap_err();
        assert!(matches!(err, Error::RleDecode { .. }));
    }

    #[test]
    fn square_overlaps() {
        let a = BinaryMask::rect(20, 20, 0, 0, 10, 10);
        let b = BinaryMask::rect(20, 20, 0, 5, 10, 10);
        assert!((iou(&a, &b).unwrap() - 50.0 / 150.0).abs() < 1e-15);
        assert_eq!(iom(&a, &b).unwrap(), 0.5);
        assert_eq!(iou(&a, &a).unwrap(), 1.0);
        assert_eq!(iom(&a, &a).unwrap(), 1.0);
    }

    #[test]
    fn disjoint_and_contained() {
        let a = BinaryMask::rect(20, 20, 0, 0, 5, 5);
        let b = BinaryMask::rect(20, 20, 10, 10, 5, 5);
        assert_eq!(iou(&a, &b).unwrap(), 0.0);
        let big = BinaryMask::rect(20, 20, 0, 0, 12, 12);
        let small = BinaryMask::rect(20, 20, 3, 3, 2, 4);
        assert_eq!(iom(&big, &small).unwrap(), 1.0);
        assert_eq!(iom(&small, &big).unwrap(), 1.0);
    }

    #[test]
    fn iom_two_empty_masks_is_an_error() {
        let e = BinaryMask::empty(3, 3);
        assert!(matches!(iom(&e, &e), Err(Error::EmptyMasks)));
        assert_eq!(iou(&e, &e).unwrap(), 0.0);
    }

    #[test]
    fn dimension_mismatch() {
        let a = BinaryMask::empty(3, 3);
        let b = BinaryMask::empty(3, 4);
        assert!(matches!(iou(&a, &b), Err(Error::DimensionMismatch { .. })));
        assert!(warp_mask(&a, &FlowField::zeros(4, 3)).is_err());
    }

    #[test]
    fn warp_translates_and_clips() {
        let sq = BinaryMask::rect(20, 20, 4, 10, 6, 6);
        let moved = warp_mask(&sq, &FlowField::uniform(20, 20, 5.0, 0.0)).unwrap();
        // Pixel-shift oracle: columns 15..21 clipped to 15..20.
        let expected = BinaryMask::from_fn(20, 20, |y, x| (4..10).contains(&y) && (15..20).contains(&x));
        assert_eq!(moved, expected);

        let gone = warp_mask(&sq, &FlowField::uniform(20, 20, 0.0, 30.0)).unwrap();
        assert!(gone.is_empty());

        assert_eq!(warp_mask(&sq, &FlowField::zeros(20, 20)).unwrap(), sq);
    }
}
