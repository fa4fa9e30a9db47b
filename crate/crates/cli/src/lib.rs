//! Command-line front end: fitting, evaluation, comparison, meta-training,
//! long-audio reconstruction, spectrogram export and parameter counting.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::warn;

use inr_audio::audio::{
    prepare_dataset, resample, toy_clips, wav_read, wav_write, AudioClip, WavFormat, TARGET_RATE,
};
use inr_audio::fewsound::{meta_train, reconstruct_long, toy_dataset, FewSoundConfig};
use inr_audio::inr::{param_count, time_grid, Arch, InrConfig, InrModel};
use inr_audio::metrics::{evaluate, spectrogram_export, Metrics};
use inr_audio::modelfile::{load_model, load_state, save_model, save_state, write_atomic};
use inr_audio::stft::StftResolution;
use inr_audio::tensor::Precision;
use inr_audio::trainer::{compare_archs, fit_inr, TrainConfig};
use inr_audio::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Parser, Debug)]
#[command(name = "ainr", version, about = "Implicit neural representations for audio")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Fit one INR to a WAV clip and save the model.
    Fit(FitArgs),
    /// Evaluate a saved model against a WAV clip.
    Eval(EvalArgs),
    /// Fit several architectures to every clip of a dataset and report metrics.
    Compare(CompareArgs),
    /// Meta-train a hypernetwork state on a dataset.
    MetaTrain(MetaTrainArgs),
    /// Render a WAV of any length through a meta-trained state.
    Reconstruct(ReconstructArgs),
    /// Export a dB magnitude spectrogram as CSV and PGM.
    Spectrogram(SpectrogramArgs),
    /// Print the parameter count of a configuration.
    Paramcount(ParamcountArgs),
}

/// Hyperparameter overrides on top of each architecture's defaults.
#[derive(Args, Debug, Clone, Default)]
struct InrArgs {
    /// Hidden layer widths, comma separated.
    #[arg(long, value_delimiter = ',')]
    layers: Option<Vec<usize>>,
    /// Positional-encoding octaves (nerf, kan).
    #[arg(long)]
    encoding_length: Option<usize>,
    /// Random Fourier features (rff).
    #[arg(long)]
    rff_features: Option<usize>,
    #[arg(long)]
    rff_sigma: Option<f64>,
    /// Frequency factor (siren, finer, wire).
    #[arg(long)]
    omega0: Option<f64>,
    /// Gaussian envelope scale (wire).
    #[arg(long)]
    wire_scale: Option<f64>,
    /// First-layer bias bound (finer).
    #[arg(long)]
    finer_bias_bound: Option<f64>,
    #[arg(long)]
    grid_size: Option<usize>,
    #[arg(long)]
    spline_order: Option<usize>,
    /// Drop the learnable spline scale of KAN edges.
    #[arg(long)]
    no_spline_scale: bool,
}

impl InrArgs {
    fn config(&self, arch: Arch, seed: u64) -> InrConfig {
        let mut c = InrConfig::new(arch).with_seed(seed);
        if let Some(l) = &self.layers {
            c.layers = l.clone();
        }
        macro_rules! set {
            ($($f:ident),*) => { $(if let Some(v) = self.$f { c.$f = v; })* };
        }
        set!(
            encoding_length,
            rff_features,
            rff_sigma,
            omega0,
            wire_scale,
            finer_bias_bound,
            grid_size,
            spline_order
        );
        if self.no_spline_scale {
            c.scale_spline = false;
        }
        c
    }
}

#[derive(Args, Debug, Clone)]
struct TrainArgs {
    #[arg(long, default_value_t = 10_000)]
    steps: usize,
    /// Learning rate; defaults to 5e-3 for kan and 1e-4 otherwise.
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long, default_value_t = 1.0)]
    lambda_t: f64,
    #[arg(long, default_value_t = 1.0)]
    lambda_f: f64,
    #[arg(long)]
    weight_decay: Option<f64>,
    /// Cosine-anneal the learning rate to 1e-4 of its initial value over the run.
    #[arg(long)]
    anneal: bool,
    /// Round every graph value through f32.
    #[arg(long)]
    f32: bool,
    #[arg(long, default_value_t = 42)]
    seed: u64,
}

impl TrainArgs {
    fn config(&self) -> TrainConfig {
        let d = TrainConfig::default();
        TrainConfig {
            steps: self.steps,
            lr: self.lr,
            lambda_t: self.lambda_t,
            lambda_f: self.lambda_f,
            seed: Some(self.seed),
            precision: if self.f32 { Precision::F32 } else { Precision::F64 },
            weight_decay: self.weight_decay.unwrap_or(d.weight_decay),
            anneal: self.anneal,
        }
    }
}

#[derive(Args, Debug)]
struct FitArgs {
    /// Input WAV.
    input: PathBuf,
    /// Model file to write.
    #[arg(long, short)]
    out: PathBuf,
    #[arg(long, default_value = "kan")]
    arch: Arch,
    #[command(flatten)]
    inr: InrArgs,
    #[command(flatten)]
    train: TrainArgs,
    /// Also write the metrics row here.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Write the per-step loss trace as CSV.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Write the reconstruction as WAV.
    #[arg(long)]
    render: Option<PathBuf>,
    #[arg(long, default_value_t = TARGET_RATE)]
    sample_rate: u32,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Model file.
    model: PathBuf,
    /// Reference WAV.
    input: PathBuf,
    #[arg(long, default_value_t = TARGET_RATE)]
    sample_rate: u32,
}

/// Where clips come from: a directory of WAVs or the built-in synthetic set.
#[derive(Args, Debug)]
#[group(required = true, multiple = false)]
struct Source {
    /// Directory searched recursively for WAV files.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Use built-in synthetic clips instead of a directory.
    #[arg(long)]
    toy: bool,
}

#[derive(Args, Debug)]
struct CompareArgs {
    #[command(flatten)]
    source: Source,
    /// Architectures to fit, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "nerf,siren,finer,wire,rff,kan")]
    archs: Vec<Arch>,
    /// Random crop length in samples; whole clips when absent.
    #[arg(long)]
    crop_len: Option<usize>,
    /// Length of the built-in clips.
    #[arg(long, default_value_t = 2048)]
    toy_len: usize,
    #[command(flatten)]
    inr: InrArgs,
    #[command(flatten)]
    train: TrainArgs,
    /// CSV output; stdout when absent.
    #[arg(long, short)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = TARGET_RATE)]
    sample_rate: u32,
}

#[derive(Args, Debug)]
struct MetaTrainArgs {
    #[command(flatten)]
    source: Source,
    /// Number of built-in clips.
    #[arg(long, default_value_t = 16)]
    toy_clips: usize,
    /// State file to write.
    #[arg(long, short)]
    out: PathBuf,
    /// Start from the small desk-scale configuration instead of the full one.
    #[arg(long)]
    small: bool,
    /// Target architecture.
    #[arg(long, default_value = "kan")]
    arch: Arch,
    #[command(flatten)]
    inr: InrArgs,
    #[arg(long)]
    window: Option<usize>,
    #[arg(long)]
    embedding_dim: Option<usize>,
    #[arg(long)]
    stem_channels: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    block_channels: Option<Vec<usize>>,
    #[arg(long)]
    weight_hidden: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    hyper_hidden: Option<Vec<usize>>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Peak one-cycle learning rate; 1e-5 by default, 1e-6 for siren.
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    lambda_t: Option<f64>,
    #[arg(long)]
    lambda_f: Option<f64>,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Write the per-epoch loss trace as CSV.
    #[arg(long)]
    trace: Option<PathBuf>,
    #[arg(long, default_value_t = TARGET_RATE)]
    sample_rate: u32,
}

#[derive(Args, Debug)]
struct ReconstructArgs {
    /// State file.
    state: PathBuf,
    /// Input WAV.
    input: PathBuf,
    /// Output WAV.
    #[arg(long, short)]
    out: PathBuf,
    /// Write 16-bit PCM (clamped to [-1, 1]) instead of 32-bit float.
    #[arg(long)]
    pcm16: bool,
}

#[derive(Args, Debug)]
struct SpectrogramArgs {
    /// Input WAV.
    input: PathBuf,
    #[arg(long)]
    csv: PathBuf,
    #[arg(long)]
    pgm: PathBuf,
    #[arg(long, default_value_t = 2048)]
    fft: usize,
    #[arg(long, default_value_t = 512)]
    hop: usize,
    /// Window length; the FFT size when absent.
    #[arg(long)]
    window: Option<usize>,
}

#[derive(Args, Debug)]
struct ParamcountArgs {
    #[arg(long, default_value = "kan")]
    arch: Arch,
    #[command(flatten)]
    inr: InrArgs,
}

/// Parses `argv` (program name first), runs the command and returns the exit code.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match run(cli.command) {
        Ok(out) => {
            print!("{out}");
            EXIT_OK
        }
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_RUNTIME
        }
    }
}

type Outcome = Result<String, Error>;

fn run(cmd: Command) -> Outcome {
    match cmd {
        Command::Fit(a) => fit(a),
        Command::Eval(a) => eval(a),
        Command::Compare(a) => compare(a),
        Command::MetaTrain(a) => meta(a),
        Command::Reconstruct(a) => reconstruct(a),
        Command::Spectrogram(a) => spectrogram(a),
        Command::Paramcount(a) => Ok(format!("{}\n", param_count(&a.inr.config(a.arch, 0)))),
    }
}

fn read_clip(path: &Path, sample_rate: u32) -> Result<AudioClip, Error> {
    resample(&wav_read(path)?, sample_rate)
}

const METRICS_HEADER: &str = "clip_id,arch,mse,psnr,lsd,sisnr,wd,params\n";

fn metrics_row(clip: &str, model: &InrModel, m: &Metrics) -> String {
    let mut s = format!("{clip},{}", model.config().arch);
    for v in m.values() {
        write!(s, ",{v}").unwrap();
    }
    writeln!(s, ",{}", model.param_count()).unwrap();
    s
}

fn fit(a: FitArgs) -> Outcome {
    let clip = read_clip(&a.input, a.sample_rate)?;
    let cfg = a.inr.config(a.arch, a.train.seed);
    let r = fit_inr(&clip, &cfg, &a.train.config())?;
    save_model(&a.out, &r.model)?;
    if let Some(p) = &a.trace {
        write_atomic(p, r.trace_csv().as_bytes())?;
    }
    if let Some(p) = &a.render {
        let y = r.model.forward(&time_grid(clip.len()))?;
        wav_write(
            p,
            &AudioClip::new(clip.sample_rate, y, "render")?,
            WavFormat::Float32,
        )?;
    }
    let m = r.metrics.ok_or_else(|| {
        Error::Contract(format!(
            "metrics need at least 2048 samples, clip has {}",
            clip.len()
        ))
    })?;
    let out = format!("{METRICS_HEADER}{}", metrics_row(&clip.source_id, &r.model, &m));
    if let Some(p) = &a.report {
        write_atomic(p, out.as_bytes())?;
    }
    Ok(out)
}

fn eval(a: EvalArgs) -> Outcome {
    let model = load_model(&a.model)?;
    let clip = read_clip(&a.input, a.sample_rate)?;
    let y = model.forward(&time_grid(clip.len()))?;
    let m = evaluate(&clip.samples, &y)?;
    Ok(format!(
        "{METRICS_HEADER}{}",
        metrics_row(&clip.source_id, &model, &m)
    ))
}

fn load_source(
    source: &Source,
    crop: Option<usize>,
    sample_rate: u32,
    seed: u64,
    toy: impl FnOnce() -> Vec<AudioClip>,
) -> Result<Vec<AudioClip>, Error> {
    match &source.data {
        Some(dir) => {
            let ds = prepare_dataset(dir, crop, sample_rate, seed)?;
            for (p, why) in &ds.skipped {
                warn!("skipped {}: {why}", p.display());
            }
            Ok(ds.clips)
        }
        None => {
            let clips = toy();
            if clips.iter().any(|c| c.sample_rate != sample_rate) {
                return clips.iter().map(|c| resample(c, sample_rate)).collect();
            }
            Ok(clips)
        }
    }
}

fn compare(a: CompareArgs) -> Outcome {
    let clips = load_source(&a.source, a.crop_len, a.sample_rate, a.train.seed, || {
        toy_clips(a.toy_len)
    })?;
    let configs: Vec<InrConfig> = a
        .archs
        .iter()
        .map(|&arch| a.inr.config(arch, a.train.seed))
        .collect();
    let (report, _) = compare_archs(&clips, &configs, &a.train.config())?;
    for (clip, arch, why) in &report.skipped {
        warn!("no metrics for {clip} / {arch}: {why}");
    }
    match &a.out {
        Some(p) => {
            report.write_csv(p)?;
            Ok(format!("{} rows written to {}\n", report.rows.len(), p.display()))
        }
        None => Ok(report.to_csv()),
    }
}

fn meta(a: MetaTrainArgs) -> Outcome {
    let target = a.inr.config(a.arch, a.seed);
    let mut cfg = if a.small {
        let toy = FewSoundConfig::toy();
        let t = if a.arch == Arch::Kan && a.inr.layers.is_none() {
            toy.target.clone()
        } else {
            target
        };
        FewSoundConfig { target: t, ..toy }
    } else {
        FewSoundConfig::new(target)
    };
    macro_rules! set {
        ($($f:ident),*) => { $(if let Some(v) = a.$f.clone() { cfg.$f = v; })* };
    }
    set!(
        window,
        embedding_dim,
        stem_channels,
        block_channels,
        weight_hidden,
        hyper_hidden,
        epochs,
        batch_size,
        weight_decay,
        lambda_t,
        lambda_f
    );
    if a.lr.is_some() {
        cfg.lr = a.lr;
    }
    cfg.sample_rate = a.sample_rate;
    cfg.seed = a.seed;
    cfg.target.seed = a.seed;
    let clips = load_source(&a.source, Some(cfg.window), a.sample_rate, a.seed, || {
        toy_dataset(a.toy_clips, cfg.window, a.seed)
    })?;
    let r = meta_train(&clips, &cfg)?;
    save_state(&a.out, &r.state)?;
    if let Some(p) = &a.trace {
        let mut s = String::from("epoch,loss\n");
        for (i, l) in r.trace.iter().enumerate() {
            writeln!(s, "{i},{l}").unwrap();
        }
        write_atomic(p, s.as_bytes())?;
    }
    Ok(format!(
        "{} clips, {} epochs, mean loss {} -> {}\n",
        clips.len(),
        r.trace.len(),
        r.trace.first().copied().unwrap_or(f64::NAN),
        r.trace.last().copied().unwrap_or(f64::NAN)
    ))
}

fn reconstruct(a: ReconstructArgs) -> Outcome {
    let state = load_state(&a.state)?;
    let clip = read_clip(&a.input, state.config().sample_rate)?;
    let y = reconstruct_long(&state, &clip.samples)?;
    let format = if a.pcm16 {
        WavFormat::Pcm16
    } else {
        WavFormat::Float32
    };
    wav_write(
        &a.out,
        &AudioClip::new(clip.sample_rate, y, clip.source_id)?,
        format,
    )?;
    Ok(format!(
        "{} samples written to {}\n",
        clip.samples.len(),
        a.out.display()
    ))
}

fn spectrogram(a: SpectrogramArgs) -> Outcome {
    let clip = wav_read(&a.input)?;
    let res = StftResolution::new(a.fft, a.hop, a.window.unwrap_or(a.fft))?;
    spectrogram_export(&clip.samples, &a.csv, &a.pgm, &res)?;
    Ok(format!("wrote {} and {}\n", a.csv.display(), a.pgm.display()))
}
