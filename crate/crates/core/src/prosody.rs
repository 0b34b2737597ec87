//! Phoneme-level prosody matrices and their normalization.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const PITCH: usize = 0;
pub const DURATION: usize = 1;
pub const ENERGY: usize = 2;
pub const FEATURE_NAMES: [&str; 3] = ["pitch", "duration", "energy"];

/// `N x 3` prosody in linear units: pitch (Hz), duration (frames), energy (RMS).
#[derive(Clone, Debug, PartialEq)]
pub struct ProsodyMatrix(Tensor);

impl ProsodyMatrix {
    pub fn from_rows(rows: &[[f64; 3]]) -> Self {
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Self(Tensor::from_vec(rows.len(), 3, data))
    }

    pub fn from_tensor(t: Tensor) -> Result<Self> {
        if t.cols() != 3 {
            return Err(Error::input(format!(
                "prosody needs 3 columns, got {}",
                t.cols()
            )));
        }
        Ok(Self(t))
    }

    pub fn as_tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.0.rows() == 0
    }

    pub fn pitch(&self, i: usize) -> f64 {
        self.0.get(i, PITCH)
    }

    pub fn duration(&self, i: usize) -> f64 {
        self.0.get(i, DURATION)
    }

    pub fn energy(&self, i: usize) -> f64 {
        self.0.get(i, ENERGY)
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        self.0.column(c)
    }

    pub fn durations_frames(&self) -> Vec<usize> {
        (0..self.len()).map(|i| self.duration(i).round() as usize).collect()
    }

    pub fn scale_column(&mut self, c: usize, s: f64) {
        for i in 0..self.len() {
            let v = self.0.get(i, c);
            self.0.set(i, c, v * s);
        }
    }

    pub fn set(&mut self, i: usize, c: usize, v: f64) {
        self.0.set(i, c, v);
    }

    /// Checks the invariants of ground-truth prosody: positive integer
    /// durations and strictly positive, finite pitch and energy.
    pub fn validate_linear(&self) -> Result<()> {
        if self.is_empty() {
            return Err(Error::input("prosody matrix has no phonemes"));
        }
        for i in 0..self.len() {
            let (p, d, e) = (self.pitch(i), self.duration(i), self.energy(i));
            if !(p.is_finite() && p > 0.0) {
                return Err(Error::input(format!("phoneme {i}: pitch {p} must be positive")));
            }
            if !(d.is_finite() && d >= 1.0 && d.fract() == 0.0) {
                return Err(Error::input(format!(
                    "phoneme {i}: duration {d} must be a positive integer"
                )));
            }
            if !(e.is_finite() && e > 0.0) {
                return Err(Error::input(format!("phoneme {i}: energy {e} must be positive")));
            }
        }
        Ok(())
    }
}

/// Corpus-global mean and standard deviation of log pitch, log duration and
/// log energy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl NormStats {
    pub fn compute<'a>(matrices: impl IntoIterator<Item = &'a ProsodyMatrix>) -> Result<Self> {
        let mut sum = [0.0; 3];
        let mut sq = [0.0; 3];
        let mut count = 0usize;
        for m in matrices {
            for i in 0..m.len() {
                for c in 0..3 {
                    let v = m.0.get(i, c).ln();
                    sum[c] += v;
                    sq[c] += v * v;
                }
                count += 1;
            }
        }
        if count == 0 {
            return Err(Error::config("corpus", "no training phonemes to compute statistics from"));
        }
        let n = count as f64;
        let mut mean = [0.0; 3];
        let mut std = [0.0; 3];
        for c in 0..3 {
            mean[c] = sum[c] / n;
            std[c] = (sq[c] / n - mean[c] * mean[c]).max(0.0).sqrt();
            if !(std[c] > 1e-12) {
                return Err(Error::config(
                    format!("corpus.{}", FEATURE_NAMES[c]),
                    "zero standard deviation (degenerate corpus)",
                ));
            }
        }
        Ok(Self { mean, std })
    }

    pub fn normalize(&self, p: &ProsodyMatrix) -> Tensor {
        let mut out = p.0.clone();
        for i in 0..out.rows() {
            for c in 0..3 {
                out.set(i, c, (p.0.get(i, c).ln() - self.mean[c]) / self.std[c]);
            }
        }
        out
    }

    pub fn denormalize(&self, normed: &Tensor) -> ProsodyMatrix {
        let mut out = normed.clone();
        for i in 0..out.rows() {
            for c in 0..3 {
                out.set(i, c, (normed.get(i, c) * self.std[c] + self.mean[c]).exp());
            }
        }
        ProsodyMatrix(out)
    }

    /// Denormalize and round durations half-up to whole frames (at least 1).
    pub fn denormalize_frames(&self, normed: &Tensor) -> ProsodyMatrix {
        let mut p = self.denormalize(normed);
        for i in 0..p.len() {
            let d = round_frames(p.duration(i));
            p.set(i, DURATION, d);
        }
        p
    }
}

/// Round half up, floor at one frame.
pub fn round_frames(d: f64) -> f64 {
    (d + 0.5).floor().max(1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn stats() -> NormStats {
        let a = ProsodyMatrix::from_rows(&[[120.0, 3.0, 1.0], [180.0, 5.0, 2.5]]);
        let b = ProsodyMatrix::from_rows(&[[210.0, 2.0, 4.0]]);
        NormStats::compute([&a, &b]).unwrap()
    }

    #[test]
    fn mean_maps_to_zero() {
        let s = stats();
        let at_mean = ProsodyMatrix::from_rows(&[[s.mean[0].exp(), s.mean[1].exp(), s.mean[2].exp()]; 4]);
        let z = s.normalize(&at_mean);
        assert!(z.max_abs() < 1e-12);
    }

    #[test]
    fn degenerate_corpus_is_rejected() {
        let a = ProsodyMatrix::from_rows(&[[120.0, 3.0, 1.0], [180.0, 3.0, 2.5]]);
        let err = NormStats::compute([&a]).unwrap_err();
        assert!(err.to_string().contains("corpus.duration"), "{err}");
    }

    #[test]
    fn rounding_rule() {
        assert_eq!(round_frames(1.5), 2.0);
        assert_eq!(round_frames(0.5), 1.0);
        assert_eq!(round_frames(0.2), 1.0);
        assert_eq!(round_frames(2.49), 2.0);
    }

    proptest! {
        #[test]
        fn normalize_round_trip(rows in proptest::collection::vec((50.0f64..500.0, 1.0f64..20.0, 0.05f64..10.0), 1..30)) {
            let s = stats();
            let data: Vec<[f64; 3]> = rows.iter().map(|&(a, b, c)| [a, b, c]).collect();
            let p = ProsodyMatrix::from_rows(&data);
            let back = s.denormalize(&s.normalize(&p));
            for (x, y) in back.as_tensor().data().iter().zip(p.as_tensor().data()) {
                prop_assert!((x - y).abs() <= 1e-9 * y.abs());
            }
        }
    }
}
