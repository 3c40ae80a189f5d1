//! Binary instance masks and their run-length encoding.
//!
//! Masks are stored column-major (pixel `(x, y)` lives at `x * height + y`),
//! which is the order the run-length encoding walks. The encoded form is the
//! compressed string variant used by COCO tooling: runs alternate starting
//! with zeros, each run is delta-coded against the run two positions back
//! (from the fourth run on) and packed into 6-bit characters offset by 48.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum RleError {
    #[error("mask size must be [height, width] with both > 0, got {0:?}")]
    BadSize(Vec<usize>),
    #[error("invalid character {0:?} in run-length counts")]
    BadChar(char),
    #[error("truncated run-length counts")]
    Truncated,
    #[error("negative run length at run {0}")]
    NegativeRun(usize),
    #[error("run lengths sum to {got}, expected {expected} pixels")]
    LengthMismatch { got: u64, expected: u64 },
}

/// Serialized form of a mask: `{"size": [h, w], "counts": "..."}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RleMask {
    pub size: Vec<usize>,
    pub counts: String,
}

#[derive(Clone, PartialEq, Eq)]
pub struct Mask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl std::fmt::Debug for Mask {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Mask")
            .field("height", &self.height)
            .field("width", &self.width)
            .field("area", &self.area())
            .finish()
    }
}

impl Mask {
    pub fn empty(height: usize, width: usize) -> Self {
        Self { height, width, bits: vec![false; height * width] }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(height * width);
        for x in 0..width {
            for y in 0..height {
                bits.push(f(x, y));
            }
        }
        Self { height, width, bits }
    }

    /// Axis-aligned filled rectangle covering columns `x0..x1` and rows `y0..y1`.
    pub fn rect(height: usize, width: usize, x0: usize, y0: usize, x1: usize, y1: usize) -> Self {
        Self::from_fn(height, width, |x, y| x >= x0 && x < x1 && y >= y0 && y < y1)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn same_size(&self, other: &Mask) -> bool {
        self.height == other.height && self.width == other.width
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        x < self.width && y < self.height && self.bits[x * self.height + y]
    }

    pub fn set(&mut self, x: usize, y: usize, value: bool) {
        assert!(x < self.width && y < self.height, "pixel ({x}, {y}) out of mask bounds");
        self.bits[x * self.height + y] = value;
    }

    /// Whether the continuous point `(u, v)` falls on a set pixel. Pixel
    /// `(x, y)` covers `[x, x + 1) × [y, y + 1)`.
    pub fn contains_point(&self, u: f64, v: f64) -> bool {
        if !(u >= 0.0 && v >= 0.0) {
            return false;
        }
        let (x, y) = (u.floor() as usize, v.floor() as usize);
        self.get(x, y)
    }

    pub fn area(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|b| *b)
    }

    /// Set pixels as `(x, y)` in column-major order.
    pub fn pixels(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let h = self.height;
        self.bits.iter().enumerate().filter(|(_, b)| **b).map(move |(i, _)| (i / h, i % h))
    }

    /// Inclusive pixel bounding box `(x_min, y_min, x_max, y_max)`.
    pub fn bounding_box(&self) -> Option<(usize, usize, usize, usize)> {
        self.pixels().fold(None, |acc, (x, y)| match acc {
            None => Some((x, y, x, y)),
            Some((x0, y0, x1, y1)) => Some((x0.min(x), y0.min(y), x1.max(x), y1.max(y))),
        })
    }

    /// Panics when sizes differ; callers check [`Mask::same_size`] first.
    pub fn intersection_area(&self, other: &Mask) -> usize {
        assert!(self.same_size(other));
        self.bits.iter().zip(&other.bits).filter(|(a, b)| **a && **b).count()
    }

    pub fn union_area(&self, other: &Mask) -> usize {
        assert!(self.same_size(other));
        self.bits.iter().zip(&other.bits).filter(|(a, b)| **a || **b).count()
    }

    /// True when every set pixel of `other` is also set here.
    pub fn covers(&self, other: &Mask) -> bool {
        self.same_size(other) && other.bits.iter().zip(&self.bits).all(|(o, s)| !*o || *s)
    }

    pub fn union(&self, other: &Mask) -> Mask {
        assert!(self.same_size(other));
        Mask {
            height: self.height,
            width: self.width,
            bits: self.bits.iter().zip(&other.bits).map(|(a, b)| *a || *b).collect(),
        }
    }

    /// Run lengths in column-major order, starting with a (possibly empty) run of zeros.
    pub fn runs(&self) -> Vec<u64> {
        let mut runs = Vec::new();
        let mut current = false;
        let mut len = 0u64;
        for &b in &self.bits {
            if b != current {
                runs.push(len);
                len = 0;
                current = b;
            }
            len += 1;
        }
        runs.push(len);
        runs
    }

    pub fn from_runs(height: usize, width: usize, runs: &[u64]) -> Result<Self, RleError> {
        let expected = (height * width) as u64;
        let got: u64 = runs.iter().sum();
        if got != expected {
            return Err(RleError::LengthMismatch { got, expected });
        }
        let mut bits = Vec::with_capacity(height * width);
        let mut value = false;
        for &r in runs {
            bits.extend(std::iter::repeat_n(value, r as usize));
            value = !value;
        }
        Ok(Self { height, width, bits })
    }

    pub fn to_rle(&self) -> RleMask {
        RleMask { size: vec![self.height, self.width], counts: encode_counts(&self.runs()) }
    }

    pub fn from_rle(rle: &RleMask) -> Result<Self, RleError> {
        let (h, w) = match rle.size.as_slice() {
            [h, w] if *h > 0 && *w > 0 => (*h, *w),
            _ => return Err(RleError::BadSize(rle.size.clone())),
        };
        let runs = decode_counts(&rle.counts)?;
        Self::from_runs(h, w, &runs)
    }
}

impl Serialize for Mask {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        self.to_rle().serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for Mask {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let rle = RleMask::deserialize(deserializer)?;
        Mask::from_rle(&rle).map_err(serde::de::Error::custom)
    }
}

pub fn encode_counts(runs: &[u64]) -> String {
    let mut out = String::new();
    for (i, &run) in runs.iter().enumerate() {
        let mut x = run as i64;
        if i > 2 {
            x -= runs[i - 2] as i64;
        }
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
    out
}

pub fn decode_counts(s: &str) -> Result<Vec<u64>, RleError> {
    let mut runs: Vec<u64> = Vec::new();
    let mut chars = s.chars();
    while let Some(first) = chars.next() {
        let mut x: i64 = 0;
        let mut k = 0;
        let mut ch = Some(first);
        loop {
            let c = match ch {
                Some(c) if ('0'..='o').contains(&c) => c as i64 - 48,
                Some(c) => return Err(RleError::BadChar(c)),
                None => return Err(RleError::Truncated),
            };
            if k >= 12 {
                return Err(RleError::Truncated);
            }
            x |= (c & 0x1f) << (5 * k);
            k += 1;
            if c & 0x20 == 0 {
                if c & 0x10 != 0 {
                    x |= -1i64 << (5 * k);
                }
                break;
            }
            ch = chars.next();
        }
        let m = runs.len();
        if m > 2 {
            x += runs[m - 2] as i64;
        }
        if x < 0 {
            return Err(RleError::NegativeRun(m));
        }
        runs.push(x as u64);
    }
    Ok(runs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn rectangle_runs_and_counts() {
        // 4x5, rows 1..3, cols 1..4: columns 0000 0110 0110 0110 0000
        let m = Mask::rect(4, 5, 1, 1, 4, 3);
        assert_eq!(m.runs(), vec![5, 2, 2, 2, 2, 2, 5]);
        assert_eq!(m.to_rle().counts, "5220003");
    }

    #[test]
    fn negative_delta_and_multichar_runs() {
        // run 3 = 1 - 3 = -2 -> 'N'; 100 -> 'T3'
        assert_eq!(encode_counts(&[1, 3, 4, 1]), "134N");
        assert_eq!(decode_counts("134N").unwrap(), vec![1, 3, 4, 1]);
        assert_eq!(encode_counts(&[100]), "T3");
        assert_eq!(decode_counts("T3").unwrap(), vec![100]);
    }

    #[test]
    fn length_mismatch_is_rejected() {
        let rle = RleMask { size: vec![4, 5], counts: "5220002".into() };
        assert!(matches!(Mask::from_rle(&rle), Err(RleError::LengthMismatch { .. })));
        let bad = RleMask { size: vec![4, 5], counts: "5~".into() };
        assert_eq!(Mask::from_rle(&bad), Err(RleError::BadChar('~')));
    }

    #[test]
    fn mask_starting_with_ones_has_empty_zero_run() {
        let m = Mask::rect(2, 2, 0, 0, 1, 2);
        assert_eq!(m.runs(), vec![0, 2, 2]);
        assert_eq!(Mask::from_rle(&m.to_rle()).unwrap(), m);
    }

    #[test]
    fn contains_point_uses_floor() {
        let m = Mask::rect(10, 10, 2, 2, 4, 4);
        assert!(m.contains_point(2.0, 3.99));
        assert!(!m.contains_point(4.0, 3.0));
        assert!(!m.contains_point(-0.5, 3.0));
    }

    proptest! {
        #[test]
        fn rle_roundtrip(h in 1usize..12, w in 1usize..12, seed in any::<u64>()) {
            let mut state = seed | 1;
            let m = Mask::from_fn(h, w, |_, _| {
                state ^= state << 13; state ^= state >> 7; state ^= state << 17;
                state % 3 == 0
            });
            let rle = m.to_rle();
            prop_assert_eq!(Mask::from_rle(&rle).unwrap(), m);
        }
    }
}
