//! Browser bindings for the demo page: B-spline basis curves, an interactive INR fit
//! on a synthetic clip, and spectrogram/spectral-distance inspection.

use wasm_bindgen::prelude::*;

use inr_audio::audio::{three_sine_mixture, TARGET_RATE};
use inr_audio::bspline::SplineGrid;
use inr_audio::inr::{time_grid, Arch, InrConfig, InrModel};
use inr_audio::metrics::{mse_psnr, spectral_wasserstein, spectrogram_db};
use inr_audio::stft::StftResolution;
use inr_audio::trainer::{Fitter, TrainConfig};

fn js(e: inr_audio::Error) -> JsError {
    JsError::new(&e.to_string())
}

/// Every basis function of a `(grid_size, order)` spline on `[-1, 1]`, sampled at
/// `points` evenly spaced inputs; row-major `[points × (grid_size + order)]`.
#[wasm_bindgen]
pub fn spline_basis(grid_size: usize, order: usize, points: usize) -> Result<Vec<f64>, JsError> {
    let grid = SplineGrid::unit(grid_size, order).map_err(js)?;
    Ok(time_grid(points)
        .into_iter()
        .flat_map(|x| grid.basis(x))
        .collect())
}

/// Seeded three-sine target clip of `samples` samples at 22.05 kHz.
#[wasm_bindgen]
pub fn sine_target(samples: usize, seed: u32) -> Vec<f64> {
    three_sine_mixture(samples, TARGET_RATE, seed as u64).samples
}

/// Spectrogram in dB, row-major `[frames × (fft/2 + 1)]`.
#[wasm_bindgen]
pub fn spectrogram(samples: &[f64], fft: usize, hop: usize) -> Result<Vec<f64>, JsError> {
    let res = StftResolution::new(fft, hop, fft).map_err(js)?;
    Ok(spectrogram_db(samples, &res).map_err(js)?.1)
}

/// High-frequency-weighted spectral Wasserstein distance between two signals.
#[wasm_bindgen]
pub fn spectral_distance(a: &[f64], b: &[f64]) -> Result<f64, JsError> {
    spectral_wasserstein(a, b).map_err(js)
}

/// Incremental fit of one architecture to a seeded sine mixture.
#[wasm_bindgen]
pub struct FitSession {
    fitter: Fitter,
    target: Vec<f64>,
    times: Vec<f64>,
    params: usize,
    last_loss: f64,
}

#[wasm_bindgen]
impl FitSession {
    /// `arch` is one of nerf, siren, finer, wire, rff, kan. Hidden layers are kept
    /// small so a step fits in an animation frame.
    #[wasm_bindgen(constructor)]
    pub fn new(arch: &str, samples: usize, seed: u32, lambda_f: f64) -> Result<FitSession, JsError> {
        let arch: Arch = arch.parse().map_err(js)?;
        let layers: &[usize] = if arch == Arch::Kan { &[16, 8] } else { &[48, 48] };
        let cfg = InrConfig::new(arch).with_layers(layers).with_seed(seed as u64);
        let clip = three_sine_mixture(samples, TARGET_RATE, seed as u64);
        let train = TrainConfig {
            lambda_f,
            ..TrainConfig::default()
        };
        let model = InrModel::build(&cfg).map_err(js)?;
        let params = model.param_count();
        Ok(FitSession {
            fitter: Fitter::new(model, &clip, &train).map_err(js)?,
            target: clip.samples,
            times: time_grid(samples),
            params,
            last_loss: f64::NAN,
        })
    }

    /// Runs `n` optimizer steps and returns the loss before the last one.
    pub fn step(&mut self, n: u32) -> Result<f64, JsError> {
        for _ in 0..n {
            self.last_loss = self.fitter.step().map_err(js)?;
        }
        Ok(self.last_loss)
    }

    pub fn steps(&self) -> usize {
        self.fitter.steps()
    }

    pub fn param_count(&self) -> usize {
        self.params
    }

    pub fn target(&self) -> Vec<f64> {
        self.target.clone()
    }

    /// Current reconstruction of the target.
    pub fn prediction(&self) -> Result<Vec<f64>, JsError> {
        self.fitter
            .model()
            .and_then(|m| m.forward(&self.times))
            .map_err(js)
    }

    pub fn psnr(&self) -> Result<f64, JsError> {
        let y = self.prediction()?;
        Ok(mse_psnr(&self.target, &y).map_err(js)?.1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn basis_rows_sum_to_one() {
        let b = spline_basis(5, 3, 50).unwrap();
        for row in b.chunks(8) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn session_reduces_loss() {
        let mut s = FitSession::new("kan", 512, 3, 0.0).unwrap();
        let first = s.step(1).unwrap();
        let later = s.step(30).unwrap();
        assert!(later < first);
        assert_eq!(s.steps(), 31);
        assert_eq!(s.prediction().unwrap().len(), 512);
    }
}
