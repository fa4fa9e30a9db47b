//! Training objective: L1 in time plus a multi-resolution mel-STFT term.

use crate::error::{Error, Result};
use crate::stft::{stft_mag, StftResolution};
use crate::tensor::{Graph, Tensor, Var};

/// Added inside the log of mel magnitudes.
pub const LOG_EPS: f64 = 1e-7;

/// Lower bound on `‖M‖_F` in the spectral-convergence denominator (silent targets).
pub const SC_FLOOR: f64 = 1e-7;

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular filters spaced evenly on the mel scale, `n_mels × (fft/2 + 1)`.
#[derive(Clone, Debug, PartialEq)]
pub struct MelFilterbank {
    n_mels: usize,
    sample_rate: f64,
    fft_size: usize,
    f_min: f64,
    f_max: f64,
    weights: Tensor,
}

impl MelFilterbank {
    pub fn new(n_mels: usize, sample_rate: f64, fft_size: usize, f_min: f64, f_max: f64) -> Result<Self> {
        if n_mels == 0 || fft_size < 2 || !(sample_rate > 0.0) {
            return Err(Error::Parameter(format!(
                "mel filterbank needs n_mels ≥ 1, fft ≥ 2 and a positive rate; got {n_mels}, {fft_size}, {sample_rate}"
            )));
        }
        if !(0.0 <= f_min && f_min < f_max && f_max <= sample_rate / 2.0) {
            return Err(Error::Parameter(format!(
                "mel band edges must satisfy 0 ≤ f_min < f_max ≤ sr/2, got {f_min}..{f_max}"
            )));
        }
        let bins = fft_size / 2 + 1;
        let (m0, m1) = (hz_to_mel(f_min), hz_to_mel(f_max));
        let edges: Vec<f64> = (0..n_mels + 2)
            .map(|i| mel_to_hz(m0 + (m1 - m0) * i as f64 / (n_mels + 1) as f64))
            .collect();
        let mut w = vec![0.0; n_mels * bins];
        for m in 0..n_mels {
            let (l, c, r) = (edges[m], edges[m + 1], edges[m + 2]);
            for k in 0..bins {
                let f = k as f64 * sample_rate / fft_size as f64;
                let up = (f - l) / (c - l);
                let down = (r - f) / (r - c);
                w[m * bins + k] = up.min(down).max(0.0);
            }
        }
        Ok(MelFilterbank {
            n_mels,
            sample_rate,
            fft_size,
            f_min,
            f_max,
            weights: Tensor::new(vec![n_mels, bins], w)?,
        })
    }

    /// Filters covering `0..sr/2`.
    pub fn full_band(n_mels: usize, sample_rate: f64, fft_size: usize) -> Result<Self> {
        Self::new(n_mels, sample_rate, fft_size, 0.0, sample_rate / 2.0)
    }

    pub fn n_mels(&self) -> usize {
        self.n_mels
    }

    pub fn bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    pub fn sample_rate(&self) -> f64 {
        self.sample_rate
    }

    pub fn band(&self) -> (f64, f64) {
        (self.f_min, self.f_max)
    }

    /// `n_mels × bins` weights.
    pub fn weights(&self) -> &Tensor {
        &self.weights
    }
}

/// Projects magnitudes `[frames × bins]` onto mel bands, `[frames × n_mels]`.
pub fn mel_project(g: &mut Graph, mag: Var, fb: &MelFilterbank) -> Result<Var> {
    let s = g.shape(mag);
    if s.len() != 2 || s[1] != fb.bins() {
        return Err(Error::Shape(format!(
            "magnitudes {s:?} do not match a {}-bin filterbank",
            fb.bins()
        )));
    }
    let w = g.constant(fb.weights().clone());
    let wt = g.transpose(w)?;
    g.matmul(mag, wt)
}

/// Weights and resolutions of the combined objective.
#[derive(Clone, Debug, PartialEq)]
pub struct LossConfig {
    pub lambda_t: f64,
    pub lambda_f: f64,
    pub sample_rate: f64,
    pub n_mels: usize,
    pub resolutions: Vec<StftResolution>,
}

impl LossConfig {
    pub fn new(sample_rate: f64) -> Self {
        LossConfig {
            lambda_t: 1.0,
            lambda_f: 1.0,
            sample_rate,
            n_mels: 80,
            resolutions: default_resolutions(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_t >= 0.0 && self.lambda_f >= 0.0)
            || !self.lambda_t.is_finite()
            || !self.lambda_f.is_finite()
        {
            return Err(Error::Parameter(format!(
                "loss weights must be finite and non-negative, got λt={} λf={}",
                self.lambda_t, self.lambda_f
            )));
        }
        if self.lambda_f > 0.0 && self.resolutions.is_empty() {
            return Err(Error::Parameter("no STFT resolutions configured".into()));
        }
        Ok(())
    }
}

/// (fft, hop, window) = (512, 128, 512), (1024, 256, 1024), (2048, 512, 2048).
pub fn default_resolutions() -> Vec<StftResolution> {
    [(512, 128, 512), (1024, 256, 1024), (2048, 512, 2048)]
        .iter()
        .map(|&(f, h, w)| StftResolution::new(f, h, w).expect("valid default"))
        .collect()
}

fn check_pair(g: &Graph, x: Var, xhat: Var) -> Result<usize> {
    let (a, b) = (g.shape(x), g.shape(xhat));
    if a.len() != 1 || a != b {
        return Err(Error::Shape(format!(
            "loss needs two 1-D signals of equal length, got {a:?} and {b:?}"
        )));
    }
    Ok(a[0])
}

fn frobenius(g: &mut Graph, a: Var) -> Result<Var> {
    let sq = g.square(a)?;
    let s = g.sum(sq)?;
    g.sqrt(s)
}

/// Mean over resolutions of spectral convergence plus mean log-magnitude L1 on mel
/// spectrograms. `x` is the reference.
///
/// Resolutions whose window is longer than the signal are skipped; if none fit this is
/// a contract error.
pub fn mr_mel_stft_loss(
    g: &mut Graph,
    x: Var,
    xhat: Var,
    sample_rate: f64,
    n_mels: usize,
    resolutions: &[StftResolution],
) -> Result<Var> {
    let n = check_pair(g, x, xhat)?;
    let usable: Vec<&StftResolution> = resolutions.iter().filter(|r| r.window_size <= n).collect();
    if usable.is_empty() {
        return Err(Error::Contract(format!(
            "signal of {n} samples is shorter than every STFT window"
        )));
    }
    let mut terms = Vec::with_capacity(usable.len());
    for res in &usable {
        let fb = MelFilterbank::full_band(n_mels, sample_rate, res.fft_size)?;
        let sx = stft_mag(g, x, res)?;
        let m = mel_project(g, sx, &fb)?;
        let sy = stft_mag(g, xhat, res)?;
        let mh = mel_project(g, sy, &fb)?;

        let diff = g.sub(m, mh)?;
        let num = frobenius(g, diff)?;
        let den = frobenius(g, m)?;
        let sc = if g.value(den).item() >= SC_FLOOR {
            g.div(num, den)?
        } else {
            g.scale(num, 1.0 / SC_FLOOR)?
        };

        let lm = g.shift(m, LOG_EPS)?;
        let lm = g.log(lm)?;
        let lh = g.shift(mh, LOG_EPS)?;
        let lh = g.log(lh)?;
        let ld = g.sub(lm, lh)?;
        let ld = g.abs(ld)?;
        let ld = g.mean(ld)?;
        terms.push(g.add(sc, ld)?);
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = g.add(total, t)?;
    }
    g.scale(total, 1.0 / terms.len() as f64)
}

/// `λt·mean|x − x̂| + λf·mr_mel_stft_loss(x, x̂)`. The spectral term is omitted when
/// `λf = 0`.
pub fn combined_loss(g: &mut Graph, x: Var, xhat: Var, cfg: &LossConfig) -> Result<Var> {
    cfg.validate()?;
    check_pair(g, x, xhat)?;
    let d = g.sub(x, xhat)?;
    let d = g.abs(d)?;
    let l1 = g.mean(d)?;
    let mut loss = g.scale(l1, cfg.lambda_t)?;
    if cfg.lambda_f > 0.0 {
        let f = mr_mel_stft_loss(g, x, xhat, cfg.sample_rate, cfg.n_mels, &cfg.resolutions)?;
        let f = g.scale(f, cfg.lambda_f)?;
        loss = g.add(loss, f)?;
    }
    Ok(loss)
}

/// Value of [`combined_loss`] for plain signals.
pub fn combined_loss_value(x: &[f64], xhat: &[f64], cfg: &LossConfig) -> Result<f64> {
    let mut g = Graph::new();
    let a = g.constant(Tensor::from_vec(x.to_vec()));
    let b = g.constant(Tensor::from_vec(xhat.to_vec()));
    let l = combined_loss(&mut g, a, b, cfg)?;
    Ok(g.value(l).item())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{grad_check, GradCheck};
    use proptest::prelude::*;

    /// Sine mixtures whose frequencies depend on `seed`, so different seeds have
    /// different magnitude spectra (a time shift alone would not).
    fn signal(n: usize, seed: u64) -> Vec<f64> {
        let s = seed as f64;
        (0..n)
            .map(|i| {
                let t = i as f64;
                0.5 * (t * (0.0731 + 0.011 * s)).sin()
                    + 0.3 * (t * (0.517 + 0.037 * s)).cos()
                    + 0.1 * (t * (1.91 - 0.05 * s)).sin()
            })
            .collect()
    }

    fn small_cfg() -> LossConfig {
        LossConfig {
            resolutions: vec![
                StftResolution::new(64, 16, 64).unwrap(),
                StftResolution::new(128, 32, 128).unwrap(),
            ],
            n_mels: 16,
            ..LossConfig::new(16000.0)
        }
    }

    #[test]
    fn mel_scale_roundtrip() {
        for f in [0.0, 100.0, 700.0, 4000.0, 11025.0] {
            assert!((mel_to_hz(hz_to_mel(f)) - f).abs() < 1e-9);
        }
        assert!((hz_to_mel(700.0) - 2595.0 * 2f64.log10()).abs() < 1e-12);
    }

    #[test]
    fn filterbank_rows_nonnegative_and_interior_bins_covered() {
        for (sr, fft) in [(22050.0, 512), (22050.0, 2048), (16000.0, 1024)] {
            let fb = MelFilterbank::full_band(80, sr, fft).unwrap();
            let bins = fb.bins();
            let w = fb.weights().data();
            assert!(w.iter().all(|&v| (0.0..=1.0).contains(&v)));
            for k in 1..bins - 1 {
                let col: f64 = (0..80).map(|m| w[m * bins + k]).sum();
                assert!(col > 0.0, "bin {k} uncovered at sr={sr} fft={fft}");
            }
        }
    }

    #[test]
    fn mel_project_examples() {
        let fb = MelFilterbank::full_band(10, 8000.0, 64).unwrap();
        let bins = fb.bins();
        let w = fb.weights().data().to_vec();
        let mut g = Graph::new();

        let ones = g.constant(Tensor::full(&[1, bins], 1.0));
        let y = mel_project(&mut g, ones, &fb).unwrap();
        for m in 0..10 {
            let row: f64 = w[m * bins..(m + 1) * bins].iter().sum();
            assert!((g.value(y).data()[m] - row).abs() < 1e-12);
        }

        let zeros = g.constant(Tensor::zeros(&[3, bins]));
        let y = mel_project(&mut g, zeros, &fb).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));

        let mut imp = vec![0.0; bins];
        imp[7] = 1.0;
        let imp = g.constant(Tensor::new(vec![1, bins], imp).unwrap());
        let y = mel_project(&mut g, imp, &fb).unwrap();
        for m in 0..10 {
            assert_eq!(g.value(y).data()[m], w[m * bins + 7]);
        }

        let bad = g.constant(Tensor::zeros(&[2, bins + 1]));
        assert!(matches!(mel_project(&mut g, bad, &fb), Err(Error::Shape(_))));
    }

    #[test]
    fn identical_signals_give_zero() {
        let x = signal(512, 1);
        assert_eq!(combined_loss_value(&x, &x, &small_cfg()).unwrap(), 0.0);
        assert_eq!(
            combined_loss_value(&x, &x, &LossConfig::new(22050.0)).unwrap(),
            0.0
        );
    }

    #[test]
    fn lambda_f_zero_is_mae() {
        let x = signal(300, 2);
        let y = signal(300, 5);
        let cfg = LossConfig {
            lambda_f: 0.0,
            ..small_cfg()
        };
        let mae = x.iter().zip(&y).map(|(a, b)| (a - b).abs()).sum::<f64>() / 300.0;
        assert!((combined_loss_value(&x, &y, &cfg).unwrap() - mae).abs() < 1e-15);
    }

    #[test]
    fn constant_offset_l1_term() {
        let x = signal(512, 3);
        let y: Vec<f64> = x.iter().map(|v| v + 0.1).collect();
        let l1_only = LossConfig {
            lambda_f: 0.0,
            ..small_cfg()
        };
        assert!((combined_loss_value(&x, &y, &l1_only).unwrap() - 0.1).abs() < 1e-12);
        assert!(combined_loss_value(&x, &y, &small_cfg()).unwrap() >= 0.1);
    }

    #[test]
    fn length_mismatch_and_short_signals() {
        let cfg = small_cfg();
        assert!(matches!(
            combined_loss_value(&[0.0; 200], &[0.0; 201], &cfg),
            Err(Error::Shape(_))
        ));
        assert!(matches!(
            combined_loss_value(&[0.1; 50], &[0.0; 50], &cfg),
            Err(Error::Contract(_))
        ));
        // only the 64-sample resolution fits
        assert!(combined_loss_value(&signal(100, 1), &signal(100, 2), &cfg).unwrap() > 0.0);
    }

    #[test]
    fn lambda_t_scales_l1_gradient() {
        let x = signal(256, 1);
        let y = signal(256, 4);
        let grad_for = |lt: f64| {
            let cfg = LossConfig {
                lambda_t: lt,
                lambda_f: 0.0,
                ..small_cfg()
            };
            let mut g = Graph::new();
            let a = g.constant(Tensor::from_vec(x.clone()));
            let b = g.param(Tensor::from_vec(y.clone()));
            let l = combined_loss(&mut g, a, b, &cfg).unwrap();
            g.backward(l).unwrap().get(b).unwrap().data().to_vec()
        };
        let (g1, g3) = (grad_for(1.0), grad_for(3.0));
        for (a, b) in g1.iter().zip(&g3) {
            assert_eq!(3.0 * a, *b);
        }
    }

    fn noise(n: usize, seed: u64) -> Vec<f64> {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn mr_loss_gradient_on_512_samples() {
        let x = noise(512, 7);
        let y = Tensor::from_vec(noise(512, 11));
        let cfg = LossConfig::new(22050.0);
        let report = grad_check(
            |g, v| {
                let t = g.constant(Tensor::from_vec(x.clone()));
                combined_loss(g, t, v[0], &cfg)
            },
            &[y],
            &GradCheck {
                coords_per_tensor: Some(40),
                ..GradCheck::default()
            },
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-3, "{report:?}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn loss_is_nonnegative(a in proptest::collection::vec(-1.0f64..1.0, 160),
                               b in proptest::collection::vec(-1.0f64..1.0, 160)) {
            let l = combined_loss_value(&a, &b, &small_cfg()).unwrap();
            prop_assert!(l >= 0.0 && l.is_finite());
            if a != b {
                prop_assert!(l > 0.0);
            }
        }
    }
}
