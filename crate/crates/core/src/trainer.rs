//! Single-clip INR fitting and the multi-architecture comparison harness.

use std::time::Instant;

use log::{debug, warn};

use crate::audio::AudioClip;
use crate::error::{Error, Result};
use crate::inr::{time_grid, Arch, InrConfig, InrModel};
use crate::loss::{combined_loss, LossConfig};
use crate::metrics::{evaluate, Metrics, MetricsReport, ReportRow};
use crate::optim::{AdamW, AdamWConfig, OneCycle};
use crate::tensor::{Graph, Precision, Tensor};

/// Learning rate used when none is configured.
pub fn default_lr(arch: Arch) -> f64 {
    match arch {
        Arch::Kan => 5e-3,
        _ => 1e-4,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    /// `None` picks [`default_lr`] for the architecture.
    pub lr: Option<f64>,
    pub lambda_t: f64,
    pub lambda_f: f64,
    /// Overrides the model seed when set.
    pub seed: Option<u64>,
    pub precision: Precision,
    pub weight_decay: f64,
    /// Cosine-anneal from `lr` down to `lr / 1e4` over `steps` instead of holding `lr`
    /// constant (a one-cycle schedule without warm-up).
    pub anneal: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 10_000,
            lr: None,
            lambda_t: 1.0,
            lambda_f: 1.0,
            seed: None,
            precision: Precision::F64,
            weight_decay: AdamWConfig::default().weight_decay,
            anneal: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("steps must be at least 1".into()));
        }
        if let Some(lr) = self.lr {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::Config(format!("learning rate must be positive, got {lr}")));
            }
        }
        Ok(())
    }

    pub fn loss_config(&self, sample_rate: u32) -> LossConfig {
        LossConfig {
            lambda_t: self.lambda_t,
            lambda_f: self.lambda_f,
            ..LossConfig::new(sample_rate as f64)
        }
    }
}

#[derive(Clone, Debug)]
pub struct FitResult {
    pub model: InrModel,
    /// Loss before each update; one entry per step.
    pub trace: Vec<f64>,
    /// Learning rate used at each step.
    pub lrs: Vec<f64>,
    /// Metrics of the final model; `None` when the clip does not admit them (for
    /// example a silent reference or a clip shorter than the LSD window).
    pub metrics: Option<Metrics>,
    pub seconds: f64,
}

impl FitResult {
    /// `step,loss,lr` lines.
    pub fn trace_csv(&self) -> String {
        let mut out = String::from("step,loss,lr\n");
        for (i, (l, lr)) in self.trace.iter().zip(&self.lrs).enumerate() {
            out.push_str(&format!("{i},{l},{lr}\n"));
        }
        out
    }
}

/// Loss of `model` on `clip` under `train`'s objective.
pub fn loss_of(model: &InrModel, clip: &AudioClip, train: &TrainConfig) -> Result<f64> {
    let cfg = train.loss_config(clip.sample_rate);
    let mut g = Graph::with_precision(train.precision);
    let params: Vec<_> = model.params().iter().map(|p| g.constant(p.clone())).collect();
    let y = model.forward_graph(&mut g, &params, &time_grid(clip.len()))?;
    let x = g.constant(Tensor::from_vec(clip.samples.clone()));
    let l = combined_loss(&mut g, x, y, &cfg)?;
    Ok(g.value(l).item())
}

/// Full-batch fit of a freshly initialized model to `clip`, one time point per sample
/// on `[-1, 1]`.
pub fn fit_inr(clip: &AudioClip, inr: &InrConfig, train: &TrainConfig) -> Result<FitResult> {
    fit_from(InrModel::build(&seeded(inr, train))?, clip, train)
}

fn seeded(inr: &InrConfig, train: &TrainConfig) -> InrConfig {
    let mut c = inr.clone();
    if let Some(s) = train.seed {
        c.seed = s;
    }
    c
}

/// Stepwise full-batch optimisation of one model on one clip; optimizer state persists
/// across calls, so stepping in chunks is identical to one long run.
pub struct Fitter {
    model: InrModel,
    params: Vec<Tensor>,
    opt: AdamW,
    loss_cfg: LossConfig,
    times: Vec<f64>,
    target: Tensor,
    precision: Precision,
    lr: f64,
    schedule: Option<OneCycle>,
    step: usize,
}

impl Fitter {
    pub fn new(model: InrModel, clip: &AudioClip, train: &TrainConfig) -> Result<Self> {
        train.validate()?;
        if clip.is_empty() {
            return Err(Error::Contract("cannot fit an empty clip".into()));
        }
        let lr = train.lr.unwrap_or_else(|| default_lr(model.config().arch));
        let schedule = if train.anneal && train.steps >= 2 {
            let s = OneCycle {
                warmup_fraction: 0.0,
                ..OneCycle::new(lr, train.steps)?
            };
            s.validate()?;
            Some(s)
        } else {
            None
        };
        let params = model.params().to_vec();
        let opt = AdamW::for_params(
            AdamWConfig {
                lr,
                weight_decay: train.weight_decay,
                ..AdamWConfig::default()
            },
            &params,
        )?;
        Ok(Fitter {
            model,
            params,
            opt,
            loss_cfg: train.loss_config(clip.sample_rate),
            times: time_grid(clip.len()),
            target: Tensor::from_vec(clip.samples.clone()),
            precision: train.precision,
            lr,
            schedule,
            step: 0,
        })
    }

    /// Steps taken so far.
    pub fn steps(&self) -> usize {
        self.step
    }

    /// Learning rate of the next step. A scheduled fitter stepped past its planned
    /// length stays at the final rate.
    pub fn lr(&self) -> f64 {
        match &self.schedule {
            Some(s) => s
                .lr(self.step.min(s.total_steps))
                .expect("step clamped to the schedule"),
            None => self.lr,
        }
    }

    /// One update; returns the loss before it.
    pub fn step(&mut self) -> Result<f64> {
        let step = self.step;
        let mut g = Graph::with_precision(self.precision);
        let vars: Vec<_> = self.params.iter().map(|p| g.param(p.clone())).collect();
        let y = self
            .model
            .forward_graph(&mut g, &vars, &self.times)
            .map_err(|e| at_step(e, step))?;
        let x = g.constant(self.target.clone());
        let loss = combined_loss(&mut g, x, y, &self.loss_cfg).map_err(|e| at_step(e, step))?;
        let value = g.value(loss).item();
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("loss at step {step}")));
        }
        let lr = self.lr();
        self.opt.set_lr(lr);
        let mut grads = g.backward(loss)?;
        let grads: Vec<Tensor> = vars
            .iter()
            .map(|&v| grads.take(v).expect("leaf gradient"))
            .collect();
        self.opt
            .step(&mut self.params, &grads)
            .map_err(|e| at_step(e, step))?;
        if step % 500 == 0 {
            debug!("{} step {step}: loss {value:.6}", self.model.config().arch);
        }
        self.step += 1;
        Ok(value)
    }

    /// The model with the current parameters.
    pub fn model(&self) -> Result<InrModel> {
        self.model.with_params(self.params.clone())
    }
}

/// Continues fitting an existing model.
pub fn fit_from(model: InrModel, clip: &AudioClip, train: &TrainConfig) -> Result<FitResult> {
    let start = Instant::now();
    let mut fitter = Fitter::new(model, clip, train)?;
    let mut lrs = Vec::with_capacity(train.steps);
    let trace = (0..train.steps)
        .map(|_| {
            lrs.push(fitter.lr());
            fitter.step()
        })
        .collect::<Result<Vec<f64>>>()?;
    let current = fitter.model()?;
    let pred = current.forward(&time_grid(clip.len()))?;
    let metrics = match evaluate(&clip.samples, &pred) {
        Ok(m) => Some(m),
        Err(e) => {
            warn!("{}: metrics unavailable: {e}", clip.source_id);
            None
        }
    };
    Ok(FitResult {
        model: current,
        trace,
        lrs,
        metrics,
        seconds: start.elapsed().as_secs_f64(),
    })
}

fn at_step(e: Error, step: usize) -> Error {
    match e {
        Error::NonFinite(what) => Error::NonFinite(format!("{what} at step {step}")),
        other => other,
    }
}

/// Fraction of consecutive 100-step (`window`) block means that do not increase.
///
/// Returns 1 when the trace has fewer than two full blocks.
pub fn moving_average_monotone_fraction(trace: &[f64], window: usize) -> f64 {
    let means: Vec<f64> = trace
        .chunks_exact(window.max(1))
        .map(|c| c.iter().sum::<f64>() / c.len() as f64)
        .collect();
    if means.len() < 2 {
        return 1.0;
    }
    let ok = means.windows(2).filter(|w| w[1] <= w[0]).count();
    ok as f64 / (means.len() - 1) as f64
}

/// Result of one (clip, architecture) fit in [`compare_archs`].
#[derive(Clone, Debug)]
pub struct CompareFit {
    pub clip_id: String,
    pub arch: Arch,
    pub params: usize,
    pub result: std::result::Result<FitResult, String>,
}

fn run_pairs<T: Send, F>(n: usize, f: F) -> Vec<T>
where
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        (0..n).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n).map(f).collect()
    }
}

/// Fits every (clip, configuration) pair independently and collects a report in clip
/// then configuration order. Failed fits are recorded as skipped.
pub fn compare_archs(
    clips: &[AudioClip],
    configs: &[InrConfig],
    train: &TrainConfig,
) -> Result<(MetricsReport, Vec<CompareFit>)> {
    if clips.is_empty() || configs.is_empty() {
        return Err(Error::Config(
            "comparison needs at least one clip and one architecture".into(),
        ));
    }
    train.validate()?;
    for c in configs {
        c.validate()?;
    }
    let pairs: Vec<(usize, usize)> = (0..clips.len())
        .flat_map(|i| (0..configs.len()).map(move |j| (i, j)))
        .collect();
    let fits = run_pairs(pairs.len(), |k| {
        let (i, j) = pairs[k];
        let (clip, cfg) = (&clips[i], &configs[j]);
        CompareFit {
            clip_id: clip.source_id.clone(),
            arch: cfg.arch,
            params: crate::inr::param_count(cfg),
            result: fit_inr(clip, cfg, train).map_err(|e| e.to_string()),
        }
    });
    let mut report = MetricsReport::new();
    for f in &fits {
        match &f.result {
            Ok(r) => match r.metrics {
                Some(m) => report.push(ReportRow {
                    clip_id: f.clip_id.clone(),
                    arch: f.arch.name().to_string(),
                    metrics: m,
                    params: f.params,
                }),
                None => report.skipped.push((
                    f.clip_id.clone(),
                    f.arch.name().into(),
                    "metrics unavailable".into(),
                )),
            },
            Err(e) => {
                warn!("{} / {}: {e}", f.clip_id, f.arch);
                report
                    .skipped
                    .push((f.clip_id.clone(), f.arch.name().into(), e.clone()));
            }
        }
    }
    Ok((report, fits))
}
