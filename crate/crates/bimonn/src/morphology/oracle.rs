//! Naive set-based reference for the bit engine.
//!
//! Operators are written directly from their set definitions with explicit
//! per-pixel loops. Slow on purpose; used to validate [`super::BitImage`].

use std::collections::BTreeSet;

use super::{BitImage, StructuringElement};

/// A binary image as an explicit set of `(row, col)` coordinates on a finite
/// domain, everything outside the domain being 0.
#[derive(Debug, Clone)]
pub struct SetImage {
    pub width: usize,
    pub height: usize,
    pub coords: BTreeSet<(usize, usize)>,
}

impl SetImage {
    pub fn from_bit_image(img: &BitImage) -> Self {
        let mut coords = BTreeSet::new();
        for r in 0..img.height() {
            for c in 0..img.width() {
                if img.get(r, c) {
                    coords.insert((r, c));
                }
            }
        }
        Self { width: img.width(), height: img.height(), coords }
    }

    fn contains(&self, r: i32, c: i32) -> bool {
        r >= 0
            && c >= 0
            && (r as usize) < self.height
            && (c as usize) < self.width
            && self.coords.contains(&(r as usize, c as usize))
    }

    /// out(i) = 1 iff some k in S has x(i - k) = 1.
    pub fn dilate(&self, s: &StructuringElement) -> SetImage {
        let offsets = s.offsets();
        self.map(|r, c| offsets.iter().any(|&(dy, dx)| self.contains(r - dy, c - dx)))
    }

    /// out(i) = 1 iff every k in S has x(i - k) = 1 (zero padding outside).
    pub fn erode(&self, s: &StructuringElement) -> SetImage {
        let offsets = s.offsets();
        self.map(|r, c| offsets.iter().all(|&(dy, dx)| self.contains(r - dy, c - dx)))
    }

    pub fn opening(&self, s: &StructuringElement) -> SetImage {
        self.erode(s).dilate(&s.reflect())
    }

    pub fn complement(&self) -> SetImage {
        self.map(|r, c| !self.coords.contains(&(r as usize, c as usize)))
    }

    pub fn union(&self, other: &SetImage) -> SetImage {
        let coords = self.coords.union(&other.coords).copied().collect();
        SetImage { width: self.width, height: self.height, coords }
    }

    pub fn intersection(&self, other: &SetImage) -> SetImage {
        let coords = self.coords.intersection(&other.coords).copied().collect();
        SetImage { width: self.width, height: self.height, coords }
    }

    pub fn to_bit_image(&self) -> BitImage {
        BitImage::from_fn(self.width, self.height, |r, c| self.coords.contains(&(r, c)))
    }

    fn map(&self, mut f: impl FnMut(i32, i32) -> bool) -> SetImage {
        let mut coords = BTreeSet::new();
        for r in 0..self.height {
            for c in 0..self.width {
                if f(r as i32, c as i32) {
                    coords.insert((r, c));
                }
            }
        }
        SetImage { width: self.width, height: self.height, coords }
    }
}
