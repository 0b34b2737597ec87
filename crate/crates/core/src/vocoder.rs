//! Waveform stub: mel frames mapped to a linear magnitude spectrogram with
//! the pseudo-inverse of a filterbank on the corpus frequency axis, then
//! Griffin-Lim phase reconstruction.

use std::f64::consts::PI;
use std::sync::Arc;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::corpus::{BinAxis, SAMPLE_RATE_HZ};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const N_FFT: usize = 2048;
pub const GRIFFIN_LIM_ITERATIONS: usize = 60;

/// Triangular filters centred on the bin-axis frequencies, `mel_bins x (N_FFT/2 + 1)`.
pub fn filterbank(mel_bins: usize) -> DMatrix<f64> {
    let axis = BinAxis::new(mel_bins);
    let n_freq = N_FFT / 2 + 1;
    let hz_per_bin = SAMPLE_RATE_HZ as f64 / N_FFT as f64;
    let mut fb = DMatrix::zeros(mel_bins, n_freq);
    for k in 0..mel_bins {
        let lo = axis.frequency(k as f64 - 1.0);
        let mid = axis.frequency(k as f64);
        let hi = axis.frequency(k as f64 + 1.0);
        for j in 0..n_freq {
            let f = j as f64 * hz_per_bin;
            let w = if f > lo && f <= mid {
                (f - lo) / (mid - lo)
            } else if f > mid && f < hi {
                (hi - f) / (hi - mid)
            } else {
                0.0
            };
            fb[(k, j)] = w;
        }
    }
    fb
}

struct Stft {
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
    window: Vec<f64>,
    hop: usize,
}

impl Stft {
    fn new(hop: usize) -> Self {
        let mut planner = FftPlanner::new();
        let window = (0..N_FFT)
            .map(|n| 0.5 - 0.5 * (2.0 * PI * n as f64 / N_FFT as f64).cos())
            .collect();
        Self {
            fwd: planner.plan_fft_forward(N_FFT),
            inv: planner.plan_fft_inverse(N_FFT),
            window,
            hop,
        }
    }

    /// Centred frames: frame `t` covers samples `t*hop - N_FFT/2 ..`.
    fn analyze(&self, signal: &[f64], frames: usize) -> Vec<Vec<Complex64>> {
        let half = N_FFT / 2;
        (0..frames)
            .map(|t| {
                let start = (t * self.hop) as isize - half as isize;
                let mut buf: Vec<Complex64> = (0..N_FFT)
                    .map(|n| {
                        let i = start + n as isize;
                        let x = if i >= 0 && (i as usize) < signal.len() {
                            signal[i as usize]
                        } else {
                            0.0
                        };
                        Complex64::new(x * self.window[n], 0.0)
                    })
                    .collect();
                self.fwd.process(&mut buf);
                buf.truncate(half + 1);
                buf
            })
            .collect()
    }

    /// Weighted overlap-add inverse of [`Stft::analyze`].
    fn synthesize(&self, spec: &[Vec<Complex64>], len: usize) -> Vec<f64> {
        let half = N_FFT / 2;
        let mut out = vec![0.0; len];
        let mut norm = vec![0.0; len];
        let mut buf = vec![Complex64::new(0.0, 0.0); N_FFT];
        for (t, frame) in spec.iter().enumerate() {
            for j in 0..=half {
                buf[j] = frame[j];
            }
            for j in 1..half {
                buf[N_FFT - j] = frame[j].conj();
            }
            self.inv.process(&mut buf);
            let start = (t * self.hop) as isize - half as isize;
            for n in 0..N_FFT {
                let i = start + n as isize;
                if i >= 0 && (i as usize) < len {
                    let w = self.window[n];
                    out[i as usize] += buf[n].re / N_FFT as f64 * w;
                    norm[i as usize] += w * w;
                }
            }
        }
        for (o, n) in out.iter_mut().zip(&norm) {
            if *n > 1e-8 {
                *o /= n;
            }
        }
        out
    }
}

/// Linear magnitude spectrogram (`T x (N_FFT/2 + 1)`) from mel frames.
pub fn mel_to_linear(mel: &Tensor) -> Tensor {
    let fb = filterbank(mel.cols());
    let pinv = fb.clone().pseudo_inverse(1e-10).expect("pseudo-inverse with non-negative epsilon");
    let m = DMatrix::from_row_slice(mel.rows(), mel.cols(), mel.data());
    let lin = m * pinv.transpose();
    let mut out = Tensor::zeros(lin.nrows(), lin.ncols());
    for r in 0..lin.nrows() {
        for c in 0..lin.ncols() {
            out.set(r, c, lin[(r, c)].max(0.0));
        }
    }
    out
}

/// Deterministic Griffin-Lim reconstruction; `T * hop_length` samples at 16 kHz.
pub fn mel_to_waveform(mel: &Tensor, hop_length: usize) -> Result<Vec<f64>> {
    if !mel.all_finite() {
        return Err(Error::Numeric("mel contains non-finite values".into()));
    }
    if hop_length == 0 {
        return Err(Error::input("hop length must be positive"));
    }
    let frames = mel.rows();
    let len = frames * hop_length;
    if frames == 0 {
        return Ok(Vec::new());
    }
    let mag = mel_to_linear(mel);
    let stft = Stft::new(hop_length);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut phase: Vec<Vec<Complex64>> = (0..frames)
        .map(|_| {
            (0..mag.cols())
                .map(|_| Complex64::from_polar(1.0, rng.gen_range(-PI..PI)))
                .collect()
        })
        .collect();
    let combine = |phase: &[Vec<Complex64>]| -> Vec<Vec<Complex64>> {
        phase
            .iter()
            .enumerate()
            .map(|(t, p)| p.iter().zip(mag.row(t)).map(|(ph, m)| ph * *m).collect())
            .collect()
    };
    let mut signal = stft.synthesize(&combine(&phase), len);
    for _ in 0..GRIFFIN_LIM_ITERATIONS {
        let spec = stft.analyze(&signal, frames);
        for (p, s) in phase.iter_mut().zip(&spec) {
            for (pj, sj) in p.iter_mut().zip(s) {
                let n = sj.norm();
                *pj = if n > 1e-12 { sj / n } else { Complex64::new(1.0, 0.0) };
            }
        }
        signal = stft.synthesize(&combine(&phase), len);
    }
    Ok(signal)
}

/// Peak-normalize to 16-bit PCM.
pub fn to_pcm16(signal: &[f64]) -> Vec<i16> {
    let peak = signal.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let gain = if peak > 1e-12 { 0.9 / peak } else { 0.0 };
    signal
        .iter()
        .map(|x| (x * gain * i16::MAX as f64).round() as i16)
        .collect()
}

pub fn write_wav(path: &std::path::Path, signal: &[f64]) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: SAMPLE_RATE_HZ,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let io = |e: hound::Error| match e {
        hound::Error::IoError(e) => Error::io(path, e),
        other => Error::io(path, std::io::Error::other(other.to_string())),
    };
    let mut w = hound::WavWriter::create(path, spec).map_err(io)?;
    for s in to_pcm16(signal) {
        w.write_sample(s).map_err(io)?;
    }
    w.finalize().map_err(io)
}
