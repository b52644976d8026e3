//! Exact binary mathematical morphology.
//!
//! Two implementations of the same operator algebra live here:
//!
//! - [`BitImage`]: a word-packed raster where dilation/erosion are computed
//!   with row shifts and bitwise OR/AND. This is the execution engine used by
//!   binarized pipelines and the speed-critical paths.
//! - [`oracle`]: a naive per-pixel set implementation used as the reference
//!   in tests. The engine must agree with it exactly.
//!
//! Conventions, fixed globally:
//!
//! - Images live on a finite grid; everything outside is 0 (zero padding).
//! - `dilate(x, s)(i) = 1` iff there is `k in S` with `x(i - k) = 1`.
//! - `erode(x, s)(i) = 1` iff `x(i - k) = 1` for every `k in S`.
//!
//! These match the index convention of the smooth convolution in
//! [`crate::layers`], so a thresholded convolution and the corresponding
//! morphological operator agree pixel for pixel, borders included.

mod pbm;

pub mod oracle;

pub use pbm::{read_pbm, write_pbm};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum MorphologyError {
    #[error("structuring element must contain at least one cell")]
    EmptySe,
    #[error("kernel extents must be odd, got {0}x{1}")]
    EvenKernel(usize, usize),
    #[error("mask length {got} does not match kernel extents {h}x{w}")]
    MaskShape { got: usize, h: usize, w: usize },
    #[error("shape mismatch: {0}x{1} vs {2}x{3}")]
    ShapeMismatch(usize, usize, usize, usize),
    #[error("pbm: {0}")]
    Pbm(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Flat structuring element on an odd, origin-centered kernel grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StructuringElement {
    kh: usize,
    kw: usize,
    mask: Vec<bool>,
}

impl StructuringElement {
    /// Builds an SE from a row-major membership mask over a `kh x kw` kernel.
    ///
    /// Extents must be odd and the mask nonempty.
    pub fn from_mask(kh: usize, kw: usize, mask: Vec<bool>) -> Result<Self, MorphologyError> {
        if kh % 2 == 0 || kw % 2 == 0 || kh == 0 || kw == 0 {
            return Err(MorphologyError::EvenKernel(kh, kw));
        }
        if mask.len() != kh * kw {
            return Err(MorphologyError::MaskShape { got: mask.len(), h: kh, w: kw });
        }
        if !mask.iter().any(|&m| m) {
            return Err(MorphologyError::EmptySe);
        }
        Ok(Self { kh, kw, mask })
    }

    /// SE containing only the origin; the identity element for dilate/erode.
    pub fn singleton() -> Self {
        Self { kh: 1, kw: 1, mask: vec![true] }
    }

    /// Full `k x k` square.
    pub fn full(k: usize) -> Self {
        assert!(k % 2 == 1, "kernel extent must be odd");
        Self { kh: k, kw: k, mask: vec![true; k * k] }
    }

    /// 4-connected cross in a 3x3 kernel.
    pub fn cross3() -> Self {
        let mut mask = vec![false; 9];
        for idx in [1, 3, 4, 5, 7] {
            mask[idx] = true;
        }
        Self { kh: 3, kw: 3, mask }
    }

    /// Straight segment of `len` cells through the origin.
    ///
    /// `angle_deg` must be one of 0 (horizontal), 90 (vertical) or -45
    /// (down-right diagonal). `len` must be odd so the segment is centered.
    pub fn line(len: usize, angle_deg: i32) -> Self {
        assert!(len % 2 == 1, "line length must be odd");
        let r = (len / 2) as i32;
        let offsets: Vec<(i32, i32)> = match angle_deg {
            0 => (-r..=r).map(|i| (0, i)).collect(),
            90 => (-r..=r).map(|i| (i, 0)).collect(),
            -45 => (-r..=r).map(|i| (i, i)).collect(),
            other => panic!("unsupported line angle {other}"),
        };
        Self::from_offsets(&offsets).expect("line SE is nonempty")
    }

    /// Builds the smallest odd kernel containing the given `(dy, dx)` offsets.
    pub fn from_offsets(offsets: &[(i32, i32)]) -> Result<Self, MorphologyError> {
        if offsets.is_empty() {
            return Err(MorphologyError::EmptySe);
        }
        let max_dy = offsets.iter().map(|o| o.0.unsigned_abs()).max().unwrap() as usize;
        let max_dx = offsets.iter().map(|o| o.1.unsigned_abs()).max().unwrap() as usize;
        let (kh, kw) = (2 * max_dy + 1, 2 * max_dx + 1);
        let mut mask = vec![false; kh * kw];
        for &(dy, dx) in offsets {
            let u = (dy + max_dy as i32) as usize;
            let v = (dx + max_dx as i32) as usize;
            mask[u * kw + v] = true;
        }
        Self::from_mask(kh, kw, mask)
    }

    pub fn kernel_extents(&self) -> (usize, usize) {
        (self.kh, self.kw)
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    /// Member offsets `(dy, dx)` relative to the kernel center.
    pub fn offsets(&self) -> Vec<(i32, i32)> {
        let (ch, cw) = (self.kh as i32 / 2, self.kw as i32 / 2);
        let mut out = Vec::new();
        for u in 0..self.kh {
            for v in 0..self.kw {
                if self.mask[u * self.kw + v] {
                    out.push((u as i32 - ch, v as i32 - cw));
                }
            }
        }
        out
    }

    /// Point reflection through the origin: `reflect(S) = { -k : k in S }`.
    pub fn reflect(&self) -> Self {
        let mut mask = vec![false; self.mask.len()];
        for (i, &m) in self.mask.iter().enumerate() {
            if m {
                mask[self.mask.len() - 1 - i] = true;
            }
        }
        Self { kh: self.kh, kw: self.kw, mask }
    }

    pub fn cell_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

const WORD_BITS: usize = 64;

/// Binary raster packed one bit per pixel into 64-bit words, row by row.
///
/// Bit `c` of row `r` lives in word `r * words_per_row + c / 64` at position
/// `c % 64`. Padding bits beyond `width` in the last word of each row are
/// kept zero by every operation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BitImage {
    width: usize,
    height: usize,
    words_per_row: usize,
    rows: Vec<u64>,
}

impl BitImage {
    pub fn new(width: usize, height: usize) -> Self {
        let words_per_row = width.div_ceil(WORD_BITS).max(1);
        Self { width, height, words_per_row, rows: vec![0; words_per_row * height] }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut img = Self::new(width, height);
        for r in 0..height {
            for c in 0..width {
                if f(r, c) {
                    img.set(r, c, true);
                }
            }
        }
        img
    }

    pub fn from_bools(width: usize, height: usize, bits: &[bool]) -> Self {
        assert_eq!(bits.len(), width * height);
        Self::from_fn(width, height, |r, c| bits[r * width + c])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> bool {
        debug_assert!(r < self.height && c < self.width);
        let w = self.rows[r * self.words_per_row + c / WORD_BITS];
        (w >> (c % WORD_BITS)) & 1 == 1
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: bool) {
        debug_assert!(r < self.height && c < self.width);
        let word = &mut self.rows[r * self.words_per_row + c / WORD_BITS];
        let bit = 1u64 << (c % WORD_BITS);
        if v {
            *word |= bit;
        } else {
            *word &= !bit;
        }
    }

    /// Number of set pixels.
    pub fn count_ones(&self) -> usize {
        self.rows.iter().map(|w| w.count_ones() as usize).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.iter().all(|&w| w == 0)
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.width == other.width && self.height == other.height
    }

    fn row(&self, r: usize) -> &[u64] {
        &self.rows[r * self.words_per_row..(r + 1) * self.words_per_row]
    }

    /// Mask of valid bits in the last word of a row (all-ones when the width
    /// is word-aligned).
    fn tail_mask(&self) -> u64 {
        let rem = self.width % WORD_BITS;
        if rem == 0 {
            u64::MAX
        } else {
            (1u64 << rem) - 1
        }
    }

    fn clear_padding(&mut self) {
        let mask = self.tail_mask();
        for r in 0..self.height {
            self.rows[r * self.words_per_row + self.words_per_row - 1] &= mask;
        }
    }

    /// Check used by tests: padding bits must stay zero.
    pub fn padding_is_zero(&self) -> bool {
        let mask = self.tail_mask();
        (0..self.height)
            .all(|r| self.rows[r * self.words_per_row + self.words_per_row - 1] & !mask == 0)
    }

    /// Dilation by `s`: OR of the image translated by every SE offset.
    pub fn dilate(&self, s: &StructuringElement) -> BitImage {
        let mut out = BitImage::new(self.width, self.height);
        for (dy, dx) in s.offsets() {
            for r in 0..self.height as i32 {
                let src_r = r - dy;
                if src_r < 0 || src_r >= self.height as i32 {
                    continue;
                }
                let (dst, src) = (r as usize, src_r as usize);
                let src_row = self.row(src).to_vec();
                let dst_row = &mut out.rows[dst * out.words_per_row..(dst + 1) * out.words_per_row];
                or_shifted(dst_row, &src_row, dx);
            }
        }
        out.clear_padding();
        out
    }

    /// Erosion by `s`: AND of the image translated by every SE offset, with
    /// zero fill outside the domain (border translates cannot survive).
    pub fn erode(&self, s: &StructuringElement) -> BitImage {
        let mut out = BitImage::new(self.width, self.height);
        // Start from all-ones, then AND in each shifted copy.
        for w in out.rows.iter_mut() {
            *w = u64::MAX;
        }
        let mut shifted = vec![0u64; self.words_per_row];
        for (dy, dx) in s.offsets() {
            for r in 0..self.height as i32 {
                let dst = r as usize;
                let src_r = r - dy;
                shifted.iter_mut().for_each(|w| *w = 0);
                if src_r >= 0 && src_r < self.height as i32 {
                    or_shifted(&mut shifted, self.row(src_r as usize), dx);
                }
                let dst_row = &mut out.rows[dst * out.words_per_row..(dst + 1) * out.words_per_row];
                for (d, s) in dst_row.iter_mut().zip(shifted.iter()) {
                    *d &= *s;
                }
            }
        }
        out.clear_padding();
        out
    }

    /// Opening: erosion followed by dilation with the reflected SE. Removes
    /// structures that contain no translate of the reflected SE.
    pub fn opening(&self, s: &StructuringElement) -> BitImage {
        self.erode(s).dilate(&s.reflect())
    }

    pub fn complement(&self) -> BitImage {
        let mut out = self.clone();
        for w in out.rows.iter_mut() {
            *w = !*w;
        }
        out.clear_padding();
        out
    }

    pub fn union(&self, other: &Self) -> Result<BitImage, MorphologyError> {
        self.zip_words(other, |a, b| a | b)
    }

    pub fn intersection(&self, other: &Self) -> Result<BitImage, MorphologyError> {
        self.zip_words(other, |a, b| a & b)
    }

    fn zip_words(&self, other: &Self, f: impl Fn(u64, u64) -> u64) -> Result<BitImage, MorphologyError> {
        if !self.same_shape(other) {
            return Err(MorphologyError::ShapeMismatch(self.height, self.width, other.height, other.width));
        }
        let mut out = self.clone();
        for (a, b) in out.rows.iter_mut().zip(other.rows.iter()) {
            *a = f(*a, *b);
        }
        out.clear_padding();
        Ok(out)
    }

    /// `true` where this image and the set of coordinates agree exactly.
    pub fn oracle_equal(&self, coords: &std::collections::BTreeSet<(usize, usize)>) -> bool {
        if coords.iter().any(|&(r, c)| r >= self.height || c >= self.width) {
            return false;
        }
        self.count_ones() == coords.len() && coords.iter().all(|&(r, c)| self.get(r, c))
    }

    pub fn to_bools(&self) -> Vec<bool> {
        let mut out = Vec::with_capacity(self.width * self.height);
        for r in 0..self.height {
            for c in 0..self.width {
                out.push(self.get(r, c));
            }
        }
        out
    }
}

/// Pointwise combination of several equally shaped images.
pub enum PointwiseOp {
    Union,
    Intersection,
    Complement,
}

pub fn pointwise(op: PointwiseOp, images: &[&BitImage]) -> Result<BitImage, MorphologyError> {
    match op {
        PointwiseOp::Complement => {
            if images.len() != 1 {
                return Err(MorphologyError::Pbm(format!(
                    "complement takes exactly one image, got {}",
                    images.len()
                )));
            }
            Ok(images[0].complement())
        }
        PointwiseOp::Union | PointwiseOp::Intersection => {
            let first = images.first().ok_or(MorphologyError::EmptySe)?;
            let mut acc = (*first).clone();
            for img in &images[1..] {
                acc = match op {
                    PointwiseOp::Union => acc.union(img)?,
                    PointwiseOp::Intersection => acc.intersection(img)?,
                    PointwiseOp::Complement => unreachable!(),
                };
            }
            Ok(acc)
        }
    }
}

/// OR `src` shifted by `dx` columns into `dst` (positive `dx` moves bits
/// toward higher column indices). Bits shifted in from outside are zero.
fn or_shifted(dst: &mut [u64], src: &[u64], dx: i32) {
    let n = dst.len();
    debug_assert_eq!(n, src.len());
    if dx == 0 {
        for (d, s) in dst.iter_mut().zip(src.iter()) {
            *d |= *s;
        }
        return;
    }
    let shift = dx.unsigned_abs() as usize;
    let (word_shift, bit_shift) = (shift / WORD_BITS, shift % WORD_BITS);
    if dx > 0 {
        // dst bit c takes src bit c - dx.
        for i in (0..n).rev() {
            if i < word_shift {
                break;
            }
            let lo = src[i - word_shift] << bit_shift;
            let hi = if bit_shift > 0 && i > word_shift {
                src[i - word_shift - 1] >> (WORD_BITS - bit_shift)
            } else {
                0
            };
            dst[i] |= lo | hi;
        }
    } else {
        // dst bit c takes src bit c + |dx|.
        for i in 0..n {
            if i + word_shift >= n {
                break;
            }
            let lo = src[i + word_shift] >> bit_shift;
            let hi = if bit_shift > 0 && i + word_shift + 1 < n {
                src[i + word_shift + 1] << (WORD_BITS - bit_shift)
            } else {
                0
            };
            dst[i] |= lo | hi;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use oracle::SetImage;
    use proptest::prelude::*;
    use rand::{Rng as _, SeedableRng as _};
    use rand_chacha::ChaCha8Rng;

    fn random_image(rng: &mut ChaCha8Rng, w: usize, h: usize, density: f64) -> BitImage {
        BitImage::from_fn(w, h, |_, _| rng.gen_bool(density))
    }

    fn random_se(rng: &mut ChaCha8Rng, k: usize) -> StructuringElement {
        loop {
            let mask: Vec<bool> = (0..k * k).map(|_| rng.gen_bool(0.4)).collect();
            if let Ok(se) = StructuringElement::from_mask(k, k, mask) {
                return se;
            }
        }
    }

    #[test]
    fn identity_se_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_image(&mut rng, 37, 12, 0.3);
        let id = StructuringElement::singleton();
        assert_eq!(x.dilate(&id), x);
        assert_eq!(x.erode(&id), x);
        assert_eq!(x.opening(&id), x);
    }

    #[test]
    fn single_pixel_dilated_by_cross() {
        let mut x = BitImage::new(5, 5);
        x.set(2, 2, true);
        let y = x.dilate(&StructuringElement::cross3());
        let expected: Vec<(usize, usize)> = vec![(1, 2), (2, 1), (2, 2), (2, 3), (3, 2)];
        assert_eq!(y.count_ones(), 5);
        for (r, c) in expected {
            assert!(y.get(r, c));
        }
    }

    #[test]
    fn empty_image_stays_empty() {
        let x = BitImage::new(8, 8);
        assert!(x.dilate(&StructuringElement::full(3)).is_empty());
    }

    #[test]
    fn erosion_of_ones_by_full_square_keeps_interior() {
        let x = BitImage::from_fn(5, 5, |_, _| true);
        let y = x.erode(&StructuringElement::full(3));
        for r in 0..5 {
            for c in 0..5 {
                let interior = (1..4).contains(&r) && (1..4).contains(&c);
                assert_eq!(y.get(r, c), interior, "pixel ({r},{c})");
            }
        }
    }

    #[test]
    fn dilation_erosion_complement_duality_on_interior() {
        // erode(x, S) == complement(dilate(complement(x), S)) away from the
        // border, for arbitrary (asymmetric) S.
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let x = random_image(&mut rng, 8, 8, 0.5);
            let se = random_se(&mut rng, 3);
            let lhs = x.erode(&se);
            let rhs = x.complement().dilate(&se).complement();
            for r in 1..7 {
                for c in 1..7 {
                    assert_eq!(lhs.get(r, c), rhs.get(r, c), "pixel ({r},{c})");
                }
            }
        }
    }

    #[test]
    fn opening_removes_isolated_pixel_keeps_long_segment() {
        let se = StructuringElement::line(5, 0);
        let mut lone = BitImage::new(16, 7);
        lone.set(3, 8, true);
        assert!(lone.opening(&se).is_empty());

        let segment = BitImage::from_fn(16, 7, |r, c| r == 3 && (2..12).contains(&c));
        assert_eq!(segment.opening(&se), segment);
    }

    #[test]
    fn pointwise_ops_basic_identities() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random_image(&mut rng, 70, 9, 0.4);
        let empty = BitImage::new(70, 9);
        assert_eq!(x.union(&empty).unwrap(), x);
        assert_eq!(x.intersection(&x).unwrap(), x);
        assert_eq!(x.complement().complement(), x);
        assert!(x
            .union(&BitImage::new(3, 3))
            .is_err());
    }

    #[test]
    fn oracle_equal_detects_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = random_image(&mut rng, 10, 10, 0.5);
        let set = SetImage::from_bit_image(&x);
        assert!(x.oracle_equal(&set.coords));
        assert!(!x.complement().oracle_equal(&set.coords));
        assert!(BitImage::new(4, 4).oracle_equal(&std::collections::BTreeSet::new()));
    }

    #[test]
    fn engine_matches_oracle_on_random_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for case in 0..500 {
            let density = rng.gen_range(0.1..0.9);
            let x = random_image(&mut rng, 16, 16, density);
            let se = random_se(&mut rng, if case % 2 == 0 { 3 } else { 5 });
            let set = SetImage::from_bit_image(&x);
            assert!(
                x.dilate(&se).oracle_equal(&set.dilate(&se).coords),
                "dilation mismatch in case {case}"
            );
            assert!(
                x.erode(&se).oracle_equal(&set.erode(&se).coords),
                "erosion mismatch in case {case}"
            );
        }
    }

    #[test]
    fn wide_images_cross_word_boundaries() {
        // Shifts larger than a word and widths straddling word boundaries.
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for &w in &[63usize, 64, 65, 130, 200] {
            let x = random_image(&mut rng, w, 5, 0.5);
            let se = StructuringElement::from_offsets(&[(0, -70), (0, 0), (1, 66)]).unwrap();
            let set = SetImage::from_bit_image(&x);
            assert!(x.dilate(&se).oracle_equal(&set.dilate(&se).coords), "width {w}");
            assert!(x.erode(&se).oracle_equal(&set.erode(&se).coords), "width {w}");
        }
    }

    proptest! {
        #[test]
        fn opening_is_idempotent_and_anti_extensive(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = random_image(&mut rng, 24, 24, 0.5);
            let se = random_se(&mut rng, 3);
            let once = x.opening(&se);
            prop_assert_eq!(&once.opening(&se), &once);
            // anti-extensive: opening(x) is a subset of x
            prop_assert_eq!(&once.intersection(&x).unwrap(), &once);
        }

        #[test]
        fn extensivity_with_origin(seed in 0u64..200) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = random_image(&mut rng, 20, 20, 0.4);
            let mut offsets = vec![(0, 0)];
            offsets.push((rng.gen_range(-1..=1), rng.gen_range(-1..=1)));
            let se = StructuringElement::from_offsets(&offsets).unwrap();
            let d = x.dilate(&se);
            let e = x.erode(&se);
            // x subset of dilate(x), erode(x) subset of x
            prop_assert_eq!(&d.union(&x).unwrap(), &d);
            prop_assert_eq!(&e.intersection(&x).unwrap(), &e);
        }

        #[test]
        fn padding_stays_zero(seed in 0u64..200, w in 1usize..90) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = random_image(&mut rng, w, 6, 0.5);
            let se = random_se(&mut rng, 3);
            prop_assert!(x.dilate(&se).padding_is_zero());
            prop_assert!(x.erode(&se).padding_is_zero());
            prop_assert!(x.complement().padding_is_zero());
            prop_assert!(x.opening(&se).padding_is_zero());
        }
    }
}
