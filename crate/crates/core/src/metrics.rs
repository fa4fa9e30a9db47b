//! Reconstruction metrics, the frequency-weighted spectral Wasserstein distance,
//! spectrogram export and the per-clip report.

use std::fmt::Write as _;
use std::path::Path;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::modelfile::write_atomic;
use crate::stft::{hann, stft_with_window, StftResolution};

/// PSNR reported for a perfect reconstruction.
pub const PSNR_PERFECT: f64 = 999.0;
/// SI-SNR is clamped to `[-SI_SNR_CAP, SI_SNR_CAP]` dB.
pub const SI_SNR_CAP: f64 = 100.0;
pub const LSD_EPS: f64 = 1e-8;
/// Magnitude offset before converting spectrograms to dB.
pub const DB_EPS: f64 = 1e-7;

fn check_pair(x: &[f64], xhat: &[f64]) -> Result<()> {
    if x.len() != xhat.len() {
        return Err(Error::Shape(format!(
            "signals differ in length: {} vs {}",
            x.len(),
            xhat.len()
        )));
    }
    if x.is_empty() {
        return Err(Error::Shape("empty signal".into()));
    }
    Ok(())
}

/// Mean squared error and PSNR with peak amplitude 1; PSNR is [`PSNR_PERFECT`] when the
/// error is zero.
pub fn mse_psnr(x: &[f64], xhat: &[f64]) -> Result<(f64, f64)> {
    check_pair(x, xhat)?;
    let mse = x.iter().zip(xhat).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / x.len() as f64;
    let psnr = if mse == 0.0 {
        PSNR_PERFECT
    } else {
        10.0 * (1.0 / mse).log10()
    };
    Ok((mse, psnr))
}

/// STFT used by [`lsd`]: fft 2048, hop 512, Hann window 2048.
pub fn lsd_resolution() -> StftResolution {
    StftResolution::new(2048, 512, 2048).expect("valid")
}

/// Log-spectral distance: mean over frames of the RMS over bins of
/// `log10(|X|² + ε) − log10(|X̂|² + ε)`.
pub fn lsd(x: &[f64], xhat: &[f64]) -> Result<f64> {
    check_pair(x, xhat)?;
    let res = lsd_resolution();
    let w = hann(res.window_size);
    let (frames, a) = stft_with_window(x, &res, &w)?;
    let (_, b) = stft_with_window(xhat, &res, &w)?;
    let bins = res.bins();
    let mut total = 0.0;
    for f in 0..frames {
        let mut acc = 0.0;
        for k in f * bins..(f + 1) * bins {
            let d = (a[k].norm_sqr() + LSD_EPS).log10() - (b[k].norm_sqr() + LSD_EPS).log10();
            acc += d * d;
        }
        total += (acc / bins as f64).sqrt();
    }
    Ok(total / frames as f64)
}

/// Scale-invariant SNR in dB, clamped to `±100`.
///
/// Both signals are made zero-mean; the target is the projection of `x̂` onto `x`. A
/// prediction with no component along `x` scores the lower cap.
pub fn si_snr(x: &[f64], xhat: &[f64]) -> Result<f64> {
    check_pair(x, xhat)?;
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = xhat.iter().sum::<f64>() / n;
    let xs: Vec<f64> = x.iter().map(|v| v - mx).collect();
    let ys: Vec<f64> = xhat.iter().map(|v| v - my).collect();
    let energy: f64 = xs.iter().map(|v| v * v).sum();
    if energy == 0.0 {
        return Err(Error::Domain(
            "SI-SNR reference is constant (zero after mean removal)".into(),
        ));
    }
    let alpha = xs.iter().zip(&ys).map(|(a, b)| a * b).sum::<f64>() / energy;
    let mut ps = 0.0;
    let mut pe = 0.0;
    for (a, b) in xs.iter().zip(&ys) {
        let s = alpha * a;
        ps += s * s;
        pe += (b - s) * (b - s);
    }
    if pe == 0.0 {
        return Ok(if ps == 0.0 { -SI_SNR_CAP } else { SI_SNR_CAP });
    }
    if ps == 0.0 {
        return Ok(-SI_SNR_CAP);
    }
    Ok((10.0 * (ps / pe).log10()).clamp(-SI_SNR_CAP, SI_SNR_CAP))
}

/// 1-D Wasserstein-1 distance between two distributions on an increasing support:
/// `Σ_i |CDF_p(i) − CDF_q(i)|·(s_{i+1} − s_i)`.
pub fn wasserstein_on_support(p: &[f64], q: &[f64], support: &[f64]) -> Result<f64> {
    if p.len() != q.len() || p.len() != support.len() || p.is_empty() {
        return Err(Error::Shape(format!(
            "distributions and support must share a non-zero length: {}, {}, {}",
            p.len(),
            q.len(),
            support.len()
        )));
    }
    let (mut cp, mut cq, mut w) = (0.0, 0.0, 0.0);
    for i in 0..p.len() - 1 {
        cp += p[i];
        cq += q[i];
        w += (cp - cq).abs() * (support[i + 1] - support[i]);
    }
    Ok(w)
}

fn normalized(mags: &[f64], what: &str) -> Result<Vec<f64>> {
    let total: f64 = mags.iter().sum();
    if !(total > 0.0) {
        return Err(Error::Domain(format!(
            "{what} has no spectral energy to normalize"
        )));
    }
    Ok(mags.iter().map(|m| m / total).collect())
}

/// Wasserstein distance between two magnitude spectra on the support `i²`, after
/// normalizing each to unit mass, divided by the spectrum length.
pub fn spectral_wasserstein_from_spectra(p: &[f64], q: &[f64]) -> Result<f64> {
    let p = normalized(p, "first spectrum")?;
    let q = normalized(q, "second spectrum")?;
    let support: Vec<f64> = (0..p.len()).map(|i| (i * i) as f64).collect();
    Ok(wasserstein_on_support(&p, &q, &support)? / p.len() as f64)
}

/// Full-length FFT magnitudes of a real signal, all `N` bins.
pub fn fft_magnitudes(x: &[f64]) -> Vec<f64> {
    let mut buf: Vec<Complex<f64>> = x.iter().map(|&v| Complex::new(v, 0.0)).collect();
    FftPlanner::new().plan_fft_forward(x.len()).process(&mut buf);
    buf.iter().map(|z| z.norm()).collect()
}

/// Frequency-weighted spectral Wasserstein distance between two equal-length signals.
pub fn spectral_wasserstein(x: &[f64], xhat: &[f64]) -> Result<f64> {
    check_pair(x, xhat)?;
    spectral_wasserstein_from_spectra(&fft_magnitudes(x), &fft_magnitudes(xhat))
}

/// Every metric of one reconstruction.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Metrics {
    pub mse: f64,
    pub psnr: f64,
    pub lsd: f64,
    pub sisnr: f64,
    pub wd: f64,
}

impl Metrics {
    pub const NAMES: [&'static str; 5] = ["mse", "psnr", "lsd", "sisnr", "wd"];

    pub fn values(&self) -> [f64; 5] {
        [self.mse, self.psnr, self.lsd, self.sisnr, self.wd]
    }

    pub fn from_values(v: [f64; 5]) -> Self {
        Metrics {
            mse: v[0],
            psnr: v[1],
            lsd: v[2],
            sisnr: v[3],
            wd: v[4],
        }
    }
}

pub fn evaluate(x: &[f64], xhat: &[f64]) -> Result<Metrics> {
    let (mse, psnr) = mse_psnr(x, xhat)?;
    Ok(Metrics {
        mse,
        psnr,
        lsd: lsd(x, xhat)?,
        sisnr: si_snr(x, xhat)?,
        wd: spectral_wasserstein(x, xhat)?,
    })
}

/// Hann STFT magnitudes in dB, `frames × bins` row-major: `20·log10(|X| + 1e-7)`.
pub fn spectrogram_db(x: &[f64], res: &StftResolution) -> Result<(usize, Vec<f64>)> {
    let (frames, spec) = stft_with_window(x, res, &hann(res.window_size))?;
    Ok((
        frames,
        spec.iter().map(|z| 20.0 * (z.norm() + DB_EPS).log10()).collect(),
    ))
}

/// CSV of a `frames × bins` matrix, one frame per line.
pub fn spectrogram_csv(frames: usize, bins: usize, db: &[f64]) -> String {
    let mut out = String::new();
    for f in 0..frames {
        let row = &db[f * bins..(f + 1) * bins];
        for (k, v) in row.iter().enumerate() {
            if k > 0 {
                out.push(',');
            }
            write!(out, "{v}").unwrap();
        }
        out.push('\n');
    }
    out
}

/// Binary PGM (P5, maxval 255): time runs left to right, frequency bottom to top,
/// intensity spans `[min, max]` dB. A constant spectrogram maps to black.
pub fn spectrogram_pgm(frames: usize, bins: usize, db: &[f64]) -> Vec<u8> {
    let lo = db.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = db.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out = format!("P5\n{frames} {bins}\n255\n").into_bytes();
    for row in 0..bins {
        let k = bins - 1 - row;
        for f in 0..frames {
            let v = if hi > lo {
                ((db[f * bins + k] - lo) / (hi - lo) * 255.0).round() as u8
            } else {
                0
            };
            out.push(v);
        }
    }
    out
}

/// Writes the dB spectrogram of `x` as CSV and PGM.
pub fn spectrogram_export(x: &[f64], csv_path: &Path, pgm_path: &Path, res: &StftResolution) -> Result<()> {
    let (frames, db) = spectrogram_db(x, res)?;
    let bins = res.bins();
    write_atomic(csv_path, spectrogram_csv(frames, bins, &db).as_bytes())?;
    write_atomic(pgm_path, &spectrogram_pgm(frames, bins, &db))
}

/// Metrics of one (clip, architecture) fit.
#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub clip_id: String,
    pub arch: String,
    pub metrics: Metrics,
    pub params: usize,
}

/// Mean and population standard deviation of each metric for one architecture.
#[derive(Clone, Debug, PartialEq)]
pub struct Aggregate {
    pub arch: String,
    pub mean: Metrics,
    pub std: Metrics,
    pub params: usize,
    pub clips: usize,
}

/// Per-clip rows plus per-architecture aggregates, in insertion order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsReport {
    pub rows: Vec<ReportRow>,
    /// (clip id, architecture or empty, reason) for fits that did not produce a row.
    pub skipped: Vec<(String, String, String)>,
}

impl MetricsReport {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, row: ReportRow) {
        self.rows.push(row);
    }

    /// Architectures in order of first appearance.
    pub fn archs(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for r in &self.rows {
            if !out.contains(&r.arch) {
                out.push(r.arch.clone());
            }
        }
        out
    }

    pub fn aggregates(&self) -> Vec<Aggregate> {
        self.archs()
            .into_iter()
            .map(|arch| {
                let rows: Vec<&ReportRow> = self.rows.iter().filter(|r| r.arch == arch).collect();
                let n = rows.len() as f64;
                let mut mean = [0.0; 5];
                for r in &rows {
                    for (m, v) in mean.iter_mut().zip(r.metrics.values()) {
                        *m += v;
                    }
                }
                mean.iter_mut().for_each(|m| *m /= n);
                let mut var = [0.0; 5];
                for r in &rows {
                    for ((s, v), m) in var.iter_mut().zip(r.metrics.values()).zip(mean) {
                        *s += (v - m) * (v - m);
                    }
                }
                let std = var.map(|s| (s / n).sqrt());
                Aggregate {
                    params: rows[0].params,
                    clips: rows.len(),
                    arch,
                    mean: Metrics::from_values(mean),
                    std: Metrics::from_values(std),
                }
            })
            .collect()
    }

    /// `clip_id,arch,mse,psnr,lsd,sisnr,wd,params`, one row per fit, then a `mean` and a
    /// `std` row per architecture.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("clip_id,arch,mse,psnr,lsd,sisnr,wd,params\n");
        let mut line = |id: &str, arch: &str, m: &Metrics, params: usize| {
            write!(out, "{id},{arch}").unwrap();
            for v in m.values() {
                write!(out, ",{v}").unwrap();
            }
            writeln!(out, ",{params}").unwrap();
        };
        for r in &self.rows {
            line(&r.clip_id, &r.arch, &r.metrics, r.params);
        }
        for a in self.aggregates() {
            line("mean", &a.arch, &a.mean, a.params);
            line("std", &a.arch, &a.std, a.params);
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_csv().as_bytes())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stft::tests::naive_dft;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn noise(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    /// W1 as the integral of |F_p⁻¹(u) − F_q⁻¹(u)| over u ∈ [0, 1], by merging the
    /// breakpoints of both step quantile functions.
    fn quantile_oracle(p: &[f64], q: &[f64], support: &[f64]) -> f64 {
        let cum = |d: &[f64]| {
            let mut c = 0.0;
            d.iter()
                .map(|v| {
                    c += v;
                    c
                })
                .collect::<Vec<f64>>()
        };
        let (cp, cq) = (cum(p), cum(q));
        let mut cuts: Vec<f64> = cp.iter().chain(&cq).cloned().filter(|&c| c < 1.0).collect();
        cuts.push(0.0);
        cuts.push(1.0);
        cuts.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let quantile = |c: &[f64], u: f64| {
            let i = c.iter().position(|&x| x > u).unwrap_or(c.len() - 1);
            support[i]
        };
        let mut w = 0.0;
        for pair in cuts.windows(2) {
            let (a, b) = (pair[0], pair[1]);
            if b > a {
                let mid = 0.5 * (a + b);
                w += (b - a) * (quantile(&cp, mid) - quantile(&cq, mid)).abs();
            }
        }
        w
    }

    #[test]
    fn psnr_examples() {
        assert_eq!(mse_psnr(&[1.0, 0.0, 1.0, 0.0], &[0.0; 4]).unwrap().0, 0.5);
        let (_, p) = mse_psnr(&[1.0, 0.0, 1.0, 0.0], &[0.0; 4]).unwrap();
        assert!((p - 3.010299956639812).abs() < 1e-12);
        assert_eq!(mse_psnr(&[0.3, 0.1], &[0.3, 0.1]).unwrap(), (0.0, PSNR_PERFECT));
        let x = noise(100, 1);
        let y: Vec<f64> = x.iter().map(|v| v + 0.2).collect();
        let z: Vec<f64> = x.iter().map(|v| v + 0.1).collect();
        let gain = mse_psnr(&x, &z).unwrap().1 - mse_psnr(&x, &y).unwrap().1;
        assert!((gain - 20.0 * 2f64.log10()).abs() < 1e-9);
        assert!(mse_psnr(&[], &[]).is_err());
    }

    #[test]
    fn psnr_is_monotone_in_mse() {
        let x = vec![0.0; 50];
        let mut last = f64::INFINITY;
        for i in 1..40 {
            let y = vec![i as f64 * 0.01; 50];
            let p = mse_psnr(&x, &y).unwrap().1;
            assert!(p < last);
            last = p;
        }
    }

    #[test]
    fn lsd_examples() {
        let x = noise(8192, 2);
        assert_eq!(lsd(&x, &x).unwrap(), 0.0);
        let y: Vec<f64> = x.iter().map(|v| 10.0 * v).collect();
        assert!((lsd(&x, &y).unwrap() - 2.0).abs() < 1e-6);
        let z = noise(8192, 3);
        let (a, b) = (lsd(&x, &z).unwrap(), lsd(&z, &x).unwrap());
        assert_eq!(a, b);
        assert!(a > 0.0);
        assert!(matches!(lsd(&[0.0; 100], &[0.0; 100]), Err(Error::Contract(_))));
    }

    #[test]
    fn si_snr_examples() {
        let x = noise(500, 4);
        assert_eq!(si_snr(&x, &x).unwrap(), 100.0);
        let y: Vec<f64> = x.iter().map(|v| 3.0 * v).collect();
        assert_eq!(si_snr(&x, &y).unwrap(), 100.0);
        // projection 0.5·x, error of equal energy
        assert!(
            si_snr(&[1.0, -1.0, 1.0, -1.0], &[1.0, -1.0, 0.0, 0.0])
                .unwrap()
                .abs()
                < 1e-12
        );
        assert!(matches!(si_snr(&[0.0; 4], &[1.0; 4]), Err(Error::Domain(_))));
        assert!(matches!(si_snr(&[2.0; 4], &[1.0; 4]), Err(Error::Domain(_))));
        assert_eq!(si_snr(&x, &vec![0.0; 500]).unwrap(), -100.0);
    }

    #[test]
    fn wasserstein_toy_case() {
        let w = spectral_wasserstein_from_spectra(&[1.0, 0.0, 0.0, 0.0], &[0.0, 1.0, 0.0, 0.0]).unwrap();
        assert_eq!(w, 0.25);
        let x = noise(64, 5);
        assert_eq!(spectral_wasserstein(&x, &x).unwrap(), 0.0);
        assert!(matches!(
            spectral_wasserstein(&x, &[0.0; 64]),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn wasserstein_matches_quantile_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let support: Vec<f64> = (0..32).map(|i| (i * i) as f64).collect();
        for _ in 0..100 {
            let raw_p: Vec<f64> = (0..32).map(|_| rng.random::<f64>()).collect();
            let raw_q: Vec<f64> = (0..32).map(|_| rng.random::<f64>()).collect();
            let p = normalized(&raw_p, "p").unwrap();
            let q = normalized(&raw_q, "q").unwrap();
            let w = wasserstein_on_support(&p, &q, &support).unwrap();
            assert!((w - quantile_oracle(&p, &q, &support)).abs() <= 1e-9);
            let scaled = spectral_wasserstein_from_spectra(&raw_p, &raw_q).unwrap();
            assert!((scaled - w / 32.0).abs() <= 1e-12);
        }
    }

    proptest! {
        #[test]
        fn wasserstein_is_a_metric(
            a in proptest::collection::vec(0.01f64..1.0, 16),
            b in proptest::collection::vec(0.01f64..1.0, 16),
            c in proptest::collection::vec(0.01f64..1.0, 16),
        ) {
            let ab = spectral_wasserstein_from_spectra(&a, &b).unwrap();
            let ba = spectral_wasserstein_from_spectra(&b, &a).unwrap();
            let ac = spectral_wasserstein_from_spectra(&a, &c).unwrap();
            let cb = spectral_wasserstein_from_spectra(&c, &b).unwrap();
            prop_assert!(ab >= 0.0);
            prop_assert!((ab - ba).abs() < 1e-12);
            prop_assert!(ab <= ac + cb + 1e-12);
        }

        #[test]
        fn si_snr_is_scale_invariant(seed in 0u64..1000, alpha in 0.01f64..100.0) {
            let x = noise(64, seed);
            let y = noise(64, seed + 1);
            let ys: Vec<f64> = y.iter().map(|v| alpha * v).collect();
            let (a, b) = (si_snr(&x, &y).unwrap(), si_snr(&x, &ys).unwrap());
            prop_assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn spectrogram_exports() {
        let dir = tempfile::tempdir().unwrap();
        let (csv, pgm) = (dir.path().join("s.csv"), dir.path().join("s.pgm"));
        let res = StftResolution::new(256, 64, 256).unwrap();
        let bins = res.bins();

        spectrogram_export(&[0.0; 1024], &csv, &pgm, &res).unwrap();
        let img = std::fs::read(&pgm).unwrap();
        let frames = res.frames(1024).unwrap();
        let header = format!("P5\n{frames} {bins}\n255\n");
        assert!(img.starts_with(header.as_bytes()));
        let pixels = &img[header.len()..];
        assert_eq!(pixels.len(), frames * bins);
        assert!(pixels.iter().all(|&p| p == pixels[0]));

        let k = 10;
        let x: Vec<f64> = (0..2048)
            .map(|n| (2.0 * PI * k as f64 * n as f64 / 256.0).sin())
            .collect();
        spectrogram_export(&x, &csv, &pgm, &res).unwrap();
        let (frames, db) = spectrogram_db(&x, &res).unwrap();
        let text = std::fs::read_to_string(&csv).unwrap();
        let back: Vec<f64> = text
            .lines()
            .flat_map(|l| l.split(',').map(|v| v.parse::<f64>().unwrap()))
            .collect();
        assert_eq!(back.len(), db.len());
        assert!(back.iter().zip(&db).all(|(a, b)| (a - b).abs() <= 1e-6));

        // oracle: brightest bin from a naive DFT of the first frame
        let w = hann(256);
        let frame: Vec<f64> = (0..256).map(|j| x[j] * w[j]).collect();
        let spec = naive_dft(&frame, 256);
        let peak = (0..bins)
            .max_by(|&a, &b| {
                let m = |i: usize| spec[i].0.hypot(spec[i].1);
                m(a).partial_cmp(&m(b)).unwrap()
            })
            .unwrap();
        assert_eq!(peak, k);
        let img = std::fs::read(&pgm).unwrap();
        let pixels = &img[img.len() - frames * bins..];
        let row = bins - 1 - k;
        assert!(pixels[row * frames..(row + 1) * frames].iter().all(|&p| p == 255));
    }

    #[test]
    fn report_aggregates() {
        let mut rep = MetricsReport::new();
        let m = |v: f64| Metrics::from_values([v, 2.0 * v, 3.0, v * v, 0.5]);
        for (clip, arch, v) in [
            ("a", "kan", 1.0),
            ("b", "kan", 3.0),
            ("a", "siren", 2.0),
            ("b", "siren", 2.0),
        ] {
            rep.push(ReportRow {
                clip_id: clip.into(),
                arch: arch.into(),
                metrics: m(v),
                params: 10,
            });
        }
        let agg = rep.aggregates();
        assert_eq!(agg.len(), 2);
        assert_eq!(agg[0].mean.mse, 2.0);
        assert_eq!(agg[0].std.mse, 1.0);
        assert_eq!(agg[0].mean.sisnr, 5.0);
        assert_eq!(agg[1].std.psnr, 0.0);
        let csv = rep.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "clip_id,arch,mse,psnr,lsd,sisnr,wd,params");
        assert_eq!(lines.len(), 1 + 4 + 4);
        assert_eq!(lines[5], "mean,kan,2,4,3,5,0.5,10");
        assert_eq!(lines[6], "std,kan,1,2,0,4,0,10");
    }
}
