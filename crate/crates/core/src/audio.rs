//! WAV I/O, resampling and dataset preparation.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::modelfile::write_atomic;

/// Sample rate every clip is brought to before fitting.
pub const TARGET_RATE: u32 = 22_050;

/// Mono audio with amplitudes nominally in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AudioClip {
    pub sample_rate: u32,
    pub samples: Vec<f64>,
    pub source_id: String,
}

impl AudioClip {
    pub fn new(sample_rate: u32, samples: Vec<f64>, source_id: impl Into<String>) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::Parameter("sample rate must be positive".into()));
        }
        if let Some(i) = samples.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("sample {i}")));
        }
        Ok(AudioClip {
            sample_rate,
            samples,
            source_id: source_id.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

/// Sample encoding of written WAV files.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum WavFormat {
    #[default]
    Float32,
    /// 16-bit PCM; samples are clamped to `[-1, 1)` first.
    Pcm16,
}

const FORMAT_PCM: u16 = 1;
const FORMAT_FLOAT: u16 = 3;
const FORMAT_EXTENSIBLE: u16 = 0xFFFE;

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn fail<T>(&self, offset: usize, message: impl Into<String>) -> Result<T> {
        Err(Error::Parse {
            offset: offset as u64,
            message: message.into(),
        })
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return self.fail(self.pos, format!("unexpected end of file, needed {n} more bytes"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

struct Fmt {
    format: u16,
    channels: u16,
    rate: u32,
    bits: u16,
}

/// Decodes a RIFF/WAVE byte buffer: PCM-16 or float-32, one or two channels. Stereo is
/// averaged to mono; PCM-16 is scaled by `1/32768`.
pub fn wav_decode(bytes: &[u8], source_id: &str) -> Result<AudioClip> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != b"RIFF" {
        return r.fail(0, "missing RIFF tag");
    }
    r.u32()?;
    if r.take(4)? != b"WAVE" {
        return r.fail(8, "missing WAVE tag");
    }
    let mut fmt: Option<Fmt> = None;
    loop {
        let at = r.pos;
        if r.pos == bytes.len() {
            return r.fail(at, "no data chunk");
        }
        let id: [u8; 4] = r.take(4)?.try_into().unwrap();
        let size = r.u32()? as usize;
        let body_at = r.pos;
        match &id {
            b"fmt " => {
                if size < 16 {
                    return r.fail(at, format!("fmt chunk of {size} bytes is too short"));
                }
                let body = r.take(size)?;
                let le16 = |o: usize| u16::from_le_bytes([body[o], body[o + 1]]);
                let mut format = le16(0);
                if format == FORMAT_EXTENSIBLE {
                    if size < 40 {
                        return r.fail(body_at, "extensible fmt chunk is too short");
                    }
                    format = le16(24);
                }
                fmt = Some(Fmt {
                    format,
                    channels: le16(2),
                    rate: u32::from_le_bytes(body[4..8].try_into().unwrap()),
                    bits: le16(14),
                });
            }
            b"data" => {
                let Some(f) = fmt.as_ref() else {
                    return r.fail(at, "data chunk before fmt chunk");
                };
                let width = match (f.format, f.bits) {
                    (FORMAT_PCM, 16) => 2,
                    (FORMAT_FLOAT, 32) => 4,
                    (fmt_tag, bits) => {
                        return r.fail(
                            body_at - 8,
                            format!("unsupported encoding: format tag {fmt_tag} with {bits} bits"),
                        )
                    }
                };
                if !(1..=2).contains(&f.channels) {
                    return r.fail(
                        body_at - 8,
                        format!("{} channels; only mono and stereo are supported", f.channels),
                    );
                }
                if f.rate == 0 {
                    return r.fail(body_at - 8, "sample rate is zero");
                }
                let ch = f.channels as usize;
                let frame = width * ch;
                let size = size.min(bytes.len() - body_at) / frame * frame;
                let data = r.take(size)?;
                let mut samples = Vec::with_capacity(size / frame);
                for fr in data.chunks_exact(frame) {
                    let mut acc = 0.0;
                    for c in fr.chunks_exact(width) {
                        acc += if width == 2 {
                            i16::from_le_bytes([c[0], c[1]]) as f64 / 32768.0
                        } else {
                            f32::from_le_bytes(c.try_into().unwrap()) as f64
                        };
                    }
                    samples.push(if ch == 1 { acc } else { acc / ch as f64 });
                }
                if let Some(i) = samples.iter().position(|v| !v.is_finite()) {
                    return r.fail(body_at + i * frame, "non-finite sample");
                }
                return AudioClip::new(f.rate, samples, source_id);
            }
            _ => {
                r.take(size)?;
            }
        }
        if size % 2 == 1 && r.pos < bytes.len() {
            r.take(1)?;
        }
    }
}

/// Encodes mono audio as a RIFF/WAVE buffer.
pub fn wav_encode(clip: &AudioClip, format: WavFormat) -> Vec<u8> {
    let (tag, bits) = match format {
        WavFormat::Float32 => (FORMAT_FLOAT, 32u16),
        WavFormat::Pcm16 => (FORMAT_PCM, 16u16),
    };
    let width = bits as usize / 8;
    let data_len = clip.samples.len() * width;
    let mut out = Vec::with_capacity(44 + data_len);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_len as u32).to_le_bytes());
    out.extend_from_slice(b"WAVEfmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&tag.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&clip.sample_rate.to_le_bytes());
    out.extend_from_slice(&(clip.sample_rate * width as u32).to_le_bytes());
    out.extend_from_slice(&(width as u16).to_le_bytes());
    out.extend_from_slice(&bits.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&(data_len as u32).to_le_bytes());
    for &v in &clip.samples {
        match format {
            WavFormat::Float32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
            WavFormat::Pcm16 => {
                let q = (v * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
                out.extend_from_slice(&q.to_le_bytes());
            }
        }
    }
    out
}

pub fn wav_read(path: &Path) -> Result<AudioClip> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    wav_decode(&bytes, &path.to_string_lossy())
}

pub fn wav_write(path: &Path, clip: &AudioClip, format: WavFormat) -> Result<()> {
    write_atomic(path, &wav_encode(clip, format))
}

/// Kaiser window shape parameter of the resampling filter.
pub const KAISER_BETA: f64 = 8.555;
/// Filter taps per polyphase branch.
pub const TAPS_PER_PHASE: usize = 64;
/// Largest number of phases whose filters are tabulated up front.
const MAX_TABLE_PHASES: usize = 4096;

fn bessel_i0(x: f64) -> f64 {
    let (mut sum, mut term, mut k) = (1.0, 1.0, 1.0);
    let q = x * x / 4.0;
    loop {
        term *= q / (k * k);
        sum += term;
        if term < sum * 1e-17 {
            return sum;
        }
        k += 1.0;
    }
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Windowed-sinc taps for fractional delay `frac ∈ [0, 1)`, normalized to unit DC gain.
/// Tap `j` multiplies input sample `i + j − (TAPS/2 − 1)`.
fn phase_taps(frac: f64, cutoff: f64, i0_beta: f64) -> [f64; TAPS_PER_PHASE] {
    let half = (TAPS_PER_PHASE / 2) as f64;
    let mut taps = [0.0; TAPS_PER_PHASE];
    for (j, tap) in taps.iter_mut().enumerate() {
        let t = j as f64 - (half - 1.0) - frac;
        let x = t / half;
        let w = if x.abs() >= 1.0 {
            0.0
        } else {
            bessel_i0(KAISER_BETA * (1.0 - x * x).sqrt()) / i0_beta
        };
        let arg = 2.0 * cutoff * t;
        let sinc = if arg == 0.0 {
            1.0
        } else {
            (PI * arg).sin() / (PI * arg)
        };
        *tap = 2.0 * cutoff * sinc * w;
    }
    let sum: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= sum);
    taps
}

/// Polyphase windowed-sinc resampling (Kaiser β = 8.555, 64 taps per phase, cutoff
/// `0.9·min(sr, target)/2`). Equal rates return the clip unchanged.
pub fn resample(clip: &AudioClip, target_rate: u32) -> Result<AudioClip> {
    if target_rate == 0 {
        return Err(Error::Parameter("target sample rate must be positive".into()));
    }
    if clip.sample_rate == target_rate || clip.is_empty() {
        return Ok(AudioClip {
            sample_rate: target_rate,
            ..clip.clone()
        });
    }
    let g = gcd(clip.sample_rate as u64, target_rate as u64);
    let up = target_rate as u64 / g;
    let down = clip.sample_rate as u64 / g;
    // cycles per input sample
    let cutoff = 0.9 * clip.sample_rate.min(target_rate) as f64 / 2.0 / clip.sample_rate as f64;
    let i0_beta = bessel_i0(KAISER_BETA);
    let table: Option<Vec<[f64; TAPS_PER_PHASE]>> = (up as usize <= MAX_TABLE_PHASES).then(|| {
        (0..up)
            .map(|p| phase_taps(p as f64 / up as f64, cutoff, i0_beta))
            .collect()
    });
    let n = clip.samples.len();
    let out_len = ((n as u64 * up).div_ceil(down)) as usize;
    let offset = TAPS_PER_PHASE as i64 / 2 - 1;
    let x = &clip.samples;
    let mut out = Vec::with_capacity(out_len);
    for k in 0..out_len as u64 {
        let pos = k * down;
        let (i, p) = ((pos / up) as i64, (pos % up) as usize);
        let computed;
        let taps = match &table {
            Some(t) => &t[p],
            None => {
                computed = phase_taps(p as f64 / up as f64, cutoff, i0_beta);
                &computed
            }
        };
        let mut acc = 0.0;
        for (j, &h) in taps.iter().enumerate() {
            let idx = i + j as i64 - offset;
            if idx >= 0 && (idx as usize) < n {
                acc += h * x[idx as usize];
            }
        }
        out.push(acc);
    }
    AudioClip::new(target_rate, out, clip.source_id.clone())
}

/// WAV files under `dir`, recursively, in sorted order.
pub fn list_wavs(dir: &Path) -> Result<Vec<PathBuf>> {
    if !dir.is_dir() {
        return Err(Error::io(
            dir,
            std::io::Error::new(std::io::ErrorKind::NotFound, "not a directory"),
        ));
    }
    let mut out = Vec::new();
    for entry in walkdir::WalkDir::new(dir).sort_by_file_name() {
        let entry = entry.map_err(|e| {
            let path = e.path().unwrap_or(dir).to_path_buf();
            Error::io(path, e.into())
        })?;
        let is_wav = entry
            .path()
            .extension()
            .is_some_and(|e| e.eq_ignore_ascii_case("wav"));
        if entry.file_type().is_file() && is_wav {
            out.push(entry.into_path());
        }
    }
    Ok(out)
}

/// Clips loaded by [`prepare_dataset`] together with the files that were skipped.
#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub clips: Vec<AudioClip>,
    pub skipped: Vec<(PathBuf, String)>,
}

/// Loads every WAV under `dir`, resamples to `sample_rate` and takes a seeded random
/// crop of `crop_len` samples (`None` keeps whole clips). Shorter clips are zero-padded.
/// Unreadable files are skipped with a warning.
pub fn prepare_dataset(dir: &Path, crop_len: Option<usize>, sample_rate: u32, seed: u64) -> Result<Dataset> {
    let files = list_wavs(dir)?;
    if files.is_empty() {
        return Err(Error::Config(format!("no WAV files under {}", dir.display())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ds = Dataset::default();
    for path in files {
        let id = path
            .strip_prefix(dir)
            .unwrap_or(&path)
            .to_string_lossy()
            .into_owned();
        let clip = match wav_read(&path).and_then(|c| resample(&c, sample_rate)) {
            Ok(c) => c,
            Err(e) => {
                warn!("skipping {}: {e}", path.display());
                ds.skipped.push((path, e.to_string()));
                continue;
            }
        };
        let mut samples = clip.samples;
        if let Some(len) = crop_len {
            if samples.len() >= len {
                let start = rng.random_range(0..=samples.len() - len);
                samples = samples[start..start + len].to_vec();
            } else {
                warn!("{id}: {} samples, zero-padding to {len}", samples.len());
                samples.resize(len, 0.0);
            }
        }
        ds.clips.push(AudioClip::new(sample_rate, samples, id)?);
    }
    if ds.clips.is_empty() {
        return Err(Error::Config(format!(
            "no readable WAV files under {}",
            dir.display()
        )));
    }
    Ok(ds)
}

/// Three deterministic synthetic clips (a chirp, a decaying harmonic tone and an
/// amplitude-modulated two-tone), each `len` samples at 22.05 kHz.
pub fn toy_clips(len: usize) -> Vec<AudioClip> {
    let sr = TARGET_RATE as f64;
    let t = |n: usize| n as f64 / sr;
    let chirp = (0..len)
        .map(|n| {
            let tt = t(n);
            0.6 * (2.0 * PI * (220.0 * tt + 1500.0 * tt * tt)).sin()
        })
        .collect();
    let harmonic = (0..len)
        .map(|n| {
            let tt = t(n);
            let env = (-8.0 * tt).exp();
            env * (0.5 * (2.0 * PI * 330.0 * tt).sin()
                + 0.25 * (2.0 * PI * 660.0 * tt).sin()
                + 0.12 * (2.0 * PI * 990.0 * tt).sin())
        })
        .collect();
    let am = (0..len)
        .map(|n| {
            let tt = t(n);
            let m = 0.5 + 0.5 * (2.0 * PI * 12.0 * tt).sin();
            m * (0.4 * (2.0 * PI * 440.0 * tt).sin() + 0.3 * (2.0 * PI * 523.25 * tt).sin())
        })
        .collect();
    [("toy_chirp", chirp), ("toy_harmonic", harmonic), ("toy_am", am)]
        .into_iter()
        .map(|(id, s)| AudioClip::new(TARGET_RATE, s, id).expect("finite"))
        .collect()
}

/// Seeded mixture of three sines with random frequencies (100 Hz to 2 kHz), amplitudes
/// and phases, peak amplitude below 1.
pub fn three_sine_mixture(len: usize, sample_rate: u32, seed: u64) -> AudioClip {
    sine_mixture(len, sample_rate, seed, 100.0..2000.0)
}

/// Three sines with frequencies drawn from `band` (Hz), amplitudes in `[0.1, 0.3)` and
/// random phases.
pub fn sine_mixture(len: usize, sample_rate: u32, seed: u64, band: std::ops::Range<f64>) -> AudioClip {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let comps: Vec<(f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.random_range(band.clone()),
                rng.random_range(0.1..0.3),
                rng.random_range(0.0..2.0 * PI),
            )
        })
        .collect();
    let samples = (0..len)
        .map(|n| {
            let tt = n as f64 / sample_rate as f64;
            comps
                .iter()
                .map(|&(f, a, ph)| a * (2.0 * PI * f * tt + ph).sin())
                .sum()
        })
        .collect();
    AudioClip::new(sample_rate, samples, format!("three_sine_{seed}")).expect("finite")
}
