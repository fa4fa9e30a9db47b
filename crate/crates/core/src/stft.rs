//! Short-time Fourier transform magnitudes, plain and differentiable.

use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};
use crate::tensor::{Function, Graph, Tensor, Var};

/// Magnitudes below this are treated as zero when differentiating `|z|`.
pub const MAG_GUARD: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StftResolution {
    pub fft_size: usize,
    pub hop_size: usize,
    pub window_size: usize,
}

impl StftResolution {
    pub fn new(fft_size: usize, hop_size: usize, window_size: usize) -> Result<Self> {
        if hop_size == 0 || hop_size > window_size || window_size > fft_size {
            return Err(Error::Parameter(format!(
                "STFT needs 0 < hop ≤ window ≤ fft, got fft={fft_size} hop={hop_size} window={window_size}"
            )));
        }
        Ok(StftResolution {
            fft_size,
            hop_size,
            window_size,
        })
    }

    pub fn bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    /// Number of full frames in a signal of `n` samples.
    pub fn frames(&self, n: usize) -> Result<usize> {
        if n < self.window_size {
            return Err(Error::Contract(format!(
                "signal of {n} samples is shorter than the {}-sample STFT window",
                self.window_size
            )));
        }
        Ok(1 + (n - self.window_size) / self.hop_size)
    }
}

/// Periodic Hann window.
pub fn hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
        .collect()
}

fn frame_spectra(
    signal: &[f64],
    res: &StftResolution,
    window: &[f64],
    fft: &Arc<dyn Fft<f64>>,
) -> Result<(usize, Vec<Complex<f64>>)> {
    let frames = res.frames(signal.len())?;
    let (nfft, bins) = (res.fft_size, res.bins());
    let mut buf = vec![Complex::new(0.0, 0.0); nfft];
    let mut out = Vec::with_capacity(frames * bins);
    for f in 0..frames {
        let start = f * res.hop_size;
        buf.fill(Complex::new(0.0, 0.0));
        for (j, (b, &w)) in buf.iter_mut().zip(window).enumerate() {
            b.re = signal[start + j] * w;
        }
        fft.process(&mut buf);
        out.extend_from_slice(&buf[..bins]);
    }
    Ok((frames, out))
}

/// Complex one-sided spectra, `frames × bins`, using an explicit analysis window.
pub fn stft_with_window(
    signal: &[f64],
    res: &StftResolution,
    window: &[f64],
) -> Result<(usize, Vec<Complex<f64>>)> {
    if window.len() != res.window_size {
        return Err(Error::Shape(format!(
            "window has {} samples, resolution expects {}",
            window.len(),
            res.window_size
        )));
    }
    let fft = FftPlanner::new().plan_fft_forward(res.fft_size);
    frame_spectra(signal, res, window, &fft)
}

/// Hann-windowed magnitude spectrogram as a `frames × bins` tensor.
pub fn magnitude(signal: &[f64], res: &StftResolution) -> Result<Tensor> {
    let (frames, spec) = stft_with_window(signal, res, &hann(res.window_size))?;
    Tensor::new(vec![frames, res.bins()], spec.iter().map(|z| z.norm()).collect())
}

struct StftMagFn {
    res: StftResolution,
    window: Vec<f64>,
    spectra: Vec<Complex<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl Function for StftMagFn {
    fn name(&self) -> &'static str {
        "stft_mag"
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        grad: &Tensor,
        needs: &[bool],
    ) -> Vec<Option<Tensor>> {
        if !needs[0] {
            return vec![None];
        }
        let signal = inputs[0];
        let (nfft, bins, hop) = (self.res.fft_size, self.res.bins(), self.res.hop_size);
        let frames = output.shape()[0];
        let mut dx = vec![0.0; signal.len()];
        let mut buf = vec![Complex::new(0.0, 0.0); nfft];
        for f in 0..frames {
            buf.fill(Complex::new(0.0, 0.0));
            for k in 0..bins {
                let mag = output.data()[f * bins + k];
                if mag > MAG_GUARD {
                    buf[k] = self.spectra[f * bins + k] * (grad.data()[f * bins + k] / mag);
                }
            }
            // d|X_k|/dy_n = Re(X_k e^{+2πikn/N}) / |X_k|: an unnormalized inverse DFT
            self.inverse.process(&mut buf);
            let start = f * hop;
            for (j, &w) in self.window.iter().enumerate() {
                dx[start + j] += w * buf[j].re;
            }
        }
        vec![Some(Tensor::new(signal.shape().to_vec(), dx).unwrap())]
    }
}

/// Differentiable Hann-windowed STFT magnitude of a 1-D signal, `frames × bins`.
pub fn stft_mag(g: &mut Graph, signal: Var, res: &StftResolution) -> Result<Var> {
    let x = g.value(signal);
    if x.rank() != 1 {
        return Err(Error::Shape(format!(
            "stft_mag needs a 1-D signal, got {:?}",
            x.shape()
        )));
    }
    let window = hann(res.window_size);
    let mut planner = FftPlanner::new();
    let forward = planner.plan_fft_forward(res.fft_size);
    let inverse = planner.plan_fft_inverse(res.fft_size);
    let (frames, spectra) = frame_spectra(x.data(), res, &window, &forward)?;
    let out = Tensor::new(
        vec![frames, res.bins()],
        spectra.iter().map(|z| z.norm()).collect(),
    )?;
    g.apply(
        &[signal],
        out,
        StftMagFn {
            res: *res,
            window,
            spectra,
            inverse,
        },
    )
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::tensor::{grad_check, GradCheck};
    use std::f64::consts::PI;

    /// O(n²) DFT of a real frame, one-sided.
    pub(crate) fn naive_dft(frame: &[f64], nfft: usize) -> Vec<(f64, f64)> {
        (0..=nfft / 2)
            .map(|k| {
                let mut re = 0.0;
                let mut im = 0.0;
                for (n, &x) in frame.iter().enumerate() {
                    let th = 2.0 * PI * (k * n) as f64 / nfft as f64;
                    re += x * th.cos();
                    im -= x * th.sin();
                }
                (re, im)
            })
            .collect()
    }

    #[test]
    fn resolution_validation() {
        assert!(StftResolution::new(512, 128, 512).is_ok());
        assert!(StftResolution::new(512, 600, 512).is_err());
        assert!(StftResolution::new(256, 128, 512).is_err());
        assert!(StftResolution::new(512, 0, 512).is_err());
    }

    #[test]
    fn short_signal_is_contract_error() {
        let res = StftResolution::new(512, 128, 512).unwrap();
        assert!(matches!(magnitude(&[0.0; 100], &res), Err(Error::Contract(_))));
    }

    #[test]
    fn matches_naive_dft() {
        let res = StftResolution::new(64, 16, 48).unwrap();
        let x: Vec<f64> = (0..200).map(|i| ((i * 37 % 23) as f64 - 11.0) / 7.0).collect();
        let m = magnitude(&x, &res).unwrap();
        let w = hann(48);
        let frames = res.frames(200).unwrap();
        assert_eq!(m.shape(), &[frames, 33]);
        for f in 0..frames {
            let fr: Vec<f64> = (0..48).map(|j| x[f * 16 + j] * w[j]).collect();
            for (k, (re, im)) in naive_dft(&fr, 64).into_iter().enumerate() {
                let want = (re * re + im * im).sqrt();
                assert!((m.data()[f * 33 + k] - want).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn bin_exact_sine_peaks_at_its_bin() {
        let (sr, nfft, k) = (22050.0, 512, 20);
        let freq = k as f64 * sr / nfft as f64;
        let x: Vec<f64> = (0..4096)
            .map(|n| (2.0 * PI * freq * n as f64 / sr).sin())
            .collect();
        let res = StftResolution::new(nfft, 128, nfft).unwrap();
        let m = magnitude(&x, &res).unwrap();
        let bins = res.bins();
        for f in 0..m.shape()[0] {
            let row = &m.data()[f * bins..(f + 1) * bins];
            let peak = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            assert_eq!(peak, k);
        }
    }

    #[test]
    fn zero_signal_gives_zero_magnitudes() {
        let res = StftResolution::new(256, 64, 256).unwrap();
        let m = magnitude(&[0.0; 1000], &res).unwrap();
        assert!(m.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn parseval_rectangular_frame() {
        let n = 256;
        let res = StftResolution::new(n, n, n).unwrap();
        let x: Vec<f64> = (0..n).map(|i| ((i * i) % 17) as f64 / 17.0 - 0.4).collect();
        let (_, spec) = stft_with_window(&x, &res, &vec![1.0; n]).unwrap();
        let half: Vec<f64> = spec.iter().map(|z| z.norm_sqr()).collect();
        let full = half[0] + half[n / 2] + 2.0 * half[1..n / 2].iter().sum::<f64>();
        let energy: f64 = x.iter().map(|v| v * v).sum();
        assert!((full - n as f64 * energy).abs() < 1e-9 * full.max(1.0));
    }

    #[test]
    fn stft_mag_gradient() {
        let res = StftResolution::new(32, 8, 24).unwrap();
        let x = Tensor::from_vec(
            (0..80)
                .map(|i| (i as f64 * 0.731).sin() + 0.3 * (i as f64 * 2.19).cos())
                .collect(),
        );
        let report = grad_check(
            |g, v| {
                let m = stft_mag(g, v[0], &res)?;
                let m = g.square(m)?;
                let m = g.sqrt(m)?;
                g.sum(m)
            },
            &[x],
            &GradCheck {
                coords_per_tensor: None,
                ..GradCheck::default()
            },
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }
}
