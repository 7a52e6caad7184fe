//! Deterministic low-discrepancy sampling over boxes.

use crate::error::{invalid, Result};
use serde::{Deserialize, Serialize};

pub const DEFAULT_SAMPLES: usize = 256;

const PRIMES: [u64; 24] = [
    2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53, 59, 61, 67, 71, 73, 79, 83, 89,
];

/// Radical inverse of `i` in base `b`.
fn radical_inverse(mut i: u64, b: u64) -> f64 {
    let inv = 1.0 / b as f64;
    let mut f = inv;
    let mut r = 0.0;
    while i > 0 {
        r += f * (i % b) as f64;
        i /= b;
        f *= inv;
    }
    r
}

/// The Halton point with index `i` (starting at 1 to skip the origin) in the
/// unit cube of dimension `dim`. Dimensions past the prime table reuse bases
/// with a fixed index offset.
pub fn halton(i: usize, dim: usize) -> Vec<f64> {
    (0..dim)
        .map(|k| {
            let base = PRIMES[k % PRIMES.len()];
            let shift = (k / PRIMES.len()) as u64 * 409;
            radical_inverse(i as u64 + 1 + shift, base)
        })
        .collect()
}

/// Axis-aligned box `[lower, upper]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleBox {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl SampleBox {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.len() != upper.len() || lower.is_empty() {
            return Err(invalid("sample box bounds must be nonempty and of equal length"));
        }
        if lower
            .iter()
            .zip(&upper)
            .any(|(l, u)| !(l <= u) || !l.is_finite() || !u.is_finite())
        {
            return Err(invalid("sample box needs finite bounds with lower <= upper"));
        }
        Ok(Self { lower, upper })
    }

    /// Cube `[-r, r]^dim`.
    pub fn cube(dim: usize, r: f64) -> Self {
        Self {
            lower: vec![-r; dim],
            upper: vec![r; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    fn map(&self, u: &[f64]) -> Vec<f64> {
        u.iter()
            .zip(self.lower.iter().zip(&self.upper))
            .map(|(t, (l, h))| l + t * (h - l))
            .collect()
    }
}

/// A list of points filling a product of boxes. Each point is split into one
/// vector per box, so `(z, xi, eta)` triples come from a single Halton stream.
pub fn sample_product(boxes: &[&SampleBox], count: usize) -> Vec<Vec<Vec<f64>>> {
    let total: usize = boxes.iter().map(|b| b.dim()).sum();
    (0..count)
        .map(|i| {
            let u = halton(i, total);
            let mut off = 0;
            boxes
                .iter()
                .map(|b| {
                    let part = b.map(&u[off..off + b.dim()]);
                    off += b.dim();
                    part
                })
                .collect()
        })
        .collect()
}

pub fn sample_box(b: &SampleBox, count: usize) -> Vec<Vec<f64>> {
    sample_product(&[b], count)
        .into_iter()
        .map(|mut v| v.remove(0))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn radical_inverse_base_two() {
        assert_eq!(radical_inverse(1, 2), 0.5);
        assert_eq!(radical_inverse(2, 2), 0.25);
        assert_eq!(radical_inverse(3, 2), 0.75);
        assert_eq!(radical_inverse(1, 3), 1.0 / 3.0);
    }

    #[test]
    fn samples_stay_in_box_and_repeat() {
        let b = SampleBox::new(vec![-1.0, 2.0], vec![1.0, 3.0]).unwrap();
        let a = sample_box(&b, 100);
        assert_eq!(a, sample_box(&b, 100));
        for p in &a {
            assert!((-1.0..=1.0).contains(&p[0]) && (2.0..=3.0).contains(&p[1]));
        }
    }

    #[test]
    fn halton_mean_is_near_half() {
        let n = 1000;
        let m: f64 = (0..n).map(|i| halton(i, 3)[2]).sum::<f64>() / n as f64;
        assert!((m - 0.5).abs() < 0.01);
    }
}
