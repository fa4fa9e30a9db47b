//! Hypernetwork meta-learning of per-clip INR weight updates.
//!
//! A convolutional encoder `E` (parameters γ) embeds a fixed-length audio window, a
//! weight encoder `G` (δ) embeds the flattened universal weights θ, and a hypernetwork
//! `H` (η) maps the concatenated embeddings to an update Δθ. The adapted INR uses
//! `θ + Δθ`. All four groups are trained jointly on the summed per-clip loss.
//!
//! Longer signals are rendered window by window with 50% overlap and blended with a
//! normalized sine-squared crossfade.

use std::f64::consts::PI;

use log::debug;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};

use crate::audio::{sine_mixture, AudioClip, TARGET_RATE};
use crate::error::{Error, Result};
use crate::inr::{affine, param_count, time_grid, Arch, InrConfig, InrModel};
use crate::loss::{combined_loss, LossConfig};
use crate::optim::{AdamW, AdamWConfig, OneCycle};
use crate::tensor::{matmul_into, transpose_data, Function, Graph, Reduction, Tensor, Var};

const STEM_KERNEL: usize = 7;
const RES_KERNEL: usize = 3;
const DOWN_STRIDE: usize = 2;
const DOWN_KERNEL: usize = 2 * DOWN_STRIDE;
const FINAL_KERNEL: usize = 3;

/// Default meta learning rate for `arch`; SIREN targets train ten times slower.
pub fn default_meta_lr(arch: Arch) -> f64 {
    match arch {
        Arch::Siren => 1e-6,
        _ => 1e-5,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FewSoundConfig {
    /// Samples per input window.
    pub window: usize,
    /// Width of both the audio and the weight embedding.
    pub embedding_dim: usize,
    /// Channels of the first convolution.
    pub stem_channels: usize,
    /// Output channels of each stride-2 residual block.
    pub block_channels: Vec<usize>,
    /// Hidden width of the weight encoder.
    pub weight_hidden: usize,
    /// Hidden widths of the hypernetwork; its output layer starts at zero.
    pub hyper_hidden: Vec<usize>,
    pub target: InrConfig,
    pub lambda_t: f64,
    pub lambda_f: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Peak of the one-cycle schedule; `None` picks [`default_meta_lr`].
    pub lr: Option<f64>,
    pub weight_decay: f64,
    pub sample_rate: u32,
    pub seed: u64,
}

impl FewSoundConfig {
    /// Full-size configuration around `target`.
    pub fn new(target: InrConfig) -> Self {
        FewSoundConfig {
            window: 32_768,
            embedding_dim: 64,
            stem_channels: 16,
            block_channels: vec![16, 32, 32, 64],
            weight_hidden: 256,
            hyper_hidden: vec![256],
            target,
            lambda_t: 1.0,
            lambda_f: 1.0,
            epochs: 100,
            batch_size: 4,
            lr: None,
            weight_decay: AdamWConfig::default().weight_decay,
            sample_rate: TARGET_RATE,
            seed: 0,
        }
    }

    /// Small configuration that trains in minutes: 2,048-sample windows, a narrow
    /// encoder and a KAN target of 3,280 parameters.
    pub fn toy() -> Self {
        let target = InrConfig {
            encoding_length: 6,
            grid_size: 6,
            ..InrConfig::new(Arch::Kan).with_layers(&[16, 8])
        };
        FewSoundConfig {
            window: 2048,
            embedding_dim: 16,
            stem_channels: 4,
            block_channels: vec![4, 8, 8, 16],
            weight_hidden: 32,
            hyper_hidden: vec![64],
            epochs: 300,
            batch_size: 4,
            lr: Some(2e-3),
            ..FewSoundConfig::new(target)
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.target.validate()?;
        let min_window = DOWN_STRIDE.pow(self.block_channels.len() as u32);
        if self.window < min_window.max(2) {
            return Err(Error::Config(format!(
                "window of {} samples is too short for {} downsampling blocks",
                self.window,
                self.block_channels.len()
            )));
        }
        let widths = [self.embedding_dim, self.stem_channels, self.weight_hidden];
        if widths.contains(&0) || self.block_channels.contains(&0) || self.hyper_hidden.contains(&0) {
            return Err(Error::Config("all widths must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if let Some(lr) = self.lr {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::Config(format!("learning rate must be positive, got {lr}")));
            }
        }
        if self.sample_rate == 0 {
            return Err(Error::Config("sample rate must be positive".into()));
        }
        self.loss_config().validate()
    }

    pub fn max_lr(&self) -> f64 {
        self.lr.unwrap_or_else(|| default_meta_lr(self.target.arch))
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            lambda_t: self.lambda_t,
            lambda_f: self.lambda_f,
            ..LossConfig::new(self.sample_rate as f64)
        }
    }

    /// Length of θ and Δθ.
    pub fn target_params(&self) -> usize {
        param_count(&self.target)
    }

    /// Encoder tensors: stem conv, per block two residual convs and a downsampling
    /// conv, the final conv, then the embedding projection. Convs are `[out×in×k]`
    /// followed by a bias.
    pub fn encoder_shapes(&self) -> Vec<Vec<usize>> {
        let mut s = vec![vec![self.stem_channels, 1, STEM_KERNEL], vec![self.stem_channels]];
        let mut cin = self.stem_channels;
        for &cout in &self.block_channels {
            s.push(vec![cin, cin, RES_KERNEL]);
            s.push(vec![cin]);
            s.push(vec![cin, cin, 1]);
            s.push(vec![cin]);
            s.push(vec![cout, cin, DOWN_KERNEL]);
            s.push(vec![cout]);
            cin = cout;
        }
        s.push(vec![cin, cin, FINAL_KERNEL]);
        s.push(vec![cin]);
        s.push(vec![self.embedding_dim, cin]);
        s.push(vec![self.embedding_dim]);
        s
    }

    pub fn weight_encoder_shapes(&self) -> Vec<Vec<usize>> {
        let p = self.target_params();
        vec![
            vec![self.weight_hidden, p],
            vec![self.weight_hidden],
            vec![self.embedding_dim, self.weight_hidden],
            vec![self.embedding_dim],
        ]
    }

    pub fn hyper_shapes(&self) -> Vec<Vec<usize>> {
        let mut s = Vec::new();
        let mut fan_in = 2 * self.embedding_dim;
        for &h in self
            .hyper_hidden
            .iter()
            .chain(std::iter::once(&self.target_params()))
        {
            s.push(vec![h, fan_in]);
            s.push(vec![h]);
            fan_in = h;
        }
        s
    }
}

/// Meta-learned parameters: encoder γ, weight encoder δ, hypernetwork η and the
/// universal INR weights θ (flat, in the target's flatten order).
#[derive(Clone, Debug, PartialEq)]
pub struct FewSoundState {
    config: FewSoundConfig,
    encoder: Vec<Tensor>,
    weight_encoder: Vec<Tensor>,
    hyper: Vec<Tensor>,
    theta: Tensor,
}

fn check_shapes(what: &str, tensors: &[Tensor], shapes: &[Vec<usize>]) -> Result<()> {
    if tensors.len() != shapes.len() || tensors.iter().zip(shapes).any(|(t, s)| t.shape() != &s[..]) {
        return Err(Error::Shape(format!(
            "{what} tensors do not match the configuration"
        )));
    }
    Ok(())
}

/// Uniform `±sqrt(3/fan_in)` weights (unit-variance preserving) and zero biases; the
/// fan-in of a `[out×in×k]` conv is `in·k`.
fn init_group(shapes: &[Vec<usize>], rng: &mut ChaCha8Rng) -> Vec<Tensor> {
    shapes
        .iter()
        .map(|s| {
            let n: usize = s.iter().product();
            if s.len() == 1 {
                return Tensor::zeros(s);
            }
            let fan_in: usize = s[1..].iter().product();
            let bound = (3.0 / fan_in as f64).sqrt();
            let u = Uniform::new_inclusive(-bound, bound).expect("finite bound");
            Tensor::new(s.clone(), (0..n).map(|_| u.sample(rng)).collect()).expect("shape")
        })
        .collect()
}

impl FewSoundState {
    /// Fresh state: θ from the target's own initializer, γ δ η seeded from
    /// `config.seed`, and the hypernetwork output layer at zero so that Δθ = 0.
    pub fn init(config: &FewSoundConfig) -> Result<Self> {
        config.validate()?;
        let universal = InrModel::build(&config.target)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x6a09_e667_f3bc_c908);
        let encoder = init_group(&config.encoder_shapes(), &mut rng);
        let weight_encoder = init_group(&config.weight_encoder_shapes(), &mut rng);
        let hyper_shapes = config.hyper_shapes();
        let mut hyper = init_group(&hyper_shapes, &mut rng);
        let last = hyper.len() - 2;
        hyper[last] = Tensor::zeros(&hyper_shapes[last]);
        Ok(FewSoundState {
            config: config.clone(),
            encoder,
            weight_encoder,
            hyper,
            theta: Tensor::from_vec(universal.flatten()),
        })
    }

    /// Reassembles a state from its four parameter groups.
    pub fn from_parts(
        config: FewSoundConfig,
        encoder: Vec<Tensor>,
        weight_encoder: Vec<Tensor>,
        hyper: Vec<Tensor>,
        theta: Vec<f64>,
    ) -> Result<Self> {
        config.validate()?;
        check_shapes("encoder", &encoder, &config.encoder_shapes())?;
        check_shapes("weight encoder", &weight_encoder, &config.weight_encoder_shapes())?;
        check_shapes("hypernetwork", &hyper, &config.hyper_shapes())?;
        if theta.len() != config.target_params() {
            return Err(Error::Shape(format!(
                "θ has {} values, target needs {}",
                theta.len(),
                config.target_params()
            )));
        }
        Ok(FewSoundState {
            config,
            encoder,
            weight_encoder,
            hyper,
            theta: Tensor::from_vec(theta),
        })
    }

    pub fn config(&self) -> &FewSoundConfig {
        &self.config
    }

    pub fn encoder_params(&self) -> &[Tensor] {
        &self.encoder
    }

    pub fn weight_encoder_params(&self) -> &[Tensor] {
        &self.weight_encoder
    }

    pub fn hyper_params(&self) -> &[Tensor] {
        &self.hyper
    }

    pub fn theta(&self) -> &[f64] {
        self.theta.data()
    }

    /// All tensors in optimizer order: γ, δ, η, then θ.
    fn all_params(&self) -> Vec<Tensor> {
        let mut v = self.encoder.clone();
        v.extend(self.weight_encoder.iter().cloned());
        v.extend(self.hyper.iter().cloned());
        v.push(self.theta.clone());
        v
    }

    fn set_all_params(&mut self, mut all: Vec<Tensor>) {
        self.theta = all.pop().expect("θ");
        let (ne, nw) = (self.encoder.len(), self.weight_encoder.len());
        self.hyper = all.split_off(ne + nw);
        self.weight_encoder = all.split_off(ne);
        self.encoder = all;
    }

    /// The INR with the universal weights θ.
    pub fn universal(&self) -> Result<InrModel> {
        InrModel::unflatten(&self.config.target, self.theta.data())
    }

    /// Registers every parameter on `g`, as trainable leaves or as constants.
    pub fn register(&self, g: &mut Graph, trainable: bool) -> MetaVars {
        let mut reg = |t: &Tensor| {
            if trainable {
                g.param(t.clone())
            } else {
                g.constant(t.clone())
            }
        };
        MetaVars {
            encoder: self.encoder.iter().map(&mut reg).collect(),
            weight_encoder: self.weight_encoder.iter().map(&mut reg).collect(),
            hyper: self.hyper.iter().map(&mut reg).collect(),
            theta: reg(&self.theta),
        }
    }

    fn check_window(&self, window: &[f64]) -> Result<()> {
        if window.len() != self.config.window {
            return Err(Error::Contract(format!(
                "encoder expects exactly {} samples, got {}",
                self.config.window,
                window.len()
            )));
        }
        Ok(())
    }

    /// `E_S` on the graph, shape `[1×D]`.
    pub fn encode_audio_graph(&self, g: &mut Graph, gamma: &[Var], window: &[f64]) -> Result<Var> {
        self.check_window(window)?;
        let x = g.constant(Tensor::new(vec![1, window.len()], window.to_vec())?);
        let mut p = gamma.iter().copied();
        let mut next = || p.next().expect("encoder parameter");
        let stem = conv1d(g, x, next(), next(), 1, STEM_KERNEL / 2)?;
        let mut h = g.silu(stem)?;
        for _ in &self.config.block_channels {
            let a = g.silu(h)?;
            let r = conv1d(g, a, next(), next(), 1, RES_KERNEL / 2)?;
            let r = g.silu(r)?;
            let r = conv1d(g, r, next(), next(), 1, 0)?;
            h = g.add(h, r)?;
            let d = conv1d(g, h, next(), next(), DOWN_STRIDE, (DOWN_KERNEL - DOWN_STRIDE) / 2)?;
            h = g.silu(d)?;
        }
        let f = conv1d(g, h, next(), next(), 1, FINAL_KERNEL / 2)?;
        let pooled = g.reduce(Reduction::Mean, f, Some(1))?;
        let c = g.shape(pooled)[0];
        let pooled = g.reshape(pooled, &[1, c])?;
        affine(g, pooled, next(), Some(next()))
    }

    /// `E_θ` on the graph, shape `[1×D]`.
    pub fn encode_weights_graph(&self, g: &mut Graph, delta: &[Var], theta: Var) -> Result<Var> {
        let p = g.shape(theta)[0];
        let t = g.reshape(theta, &[1, p])?;
        let h = affine(g, t, delta[0], Some(delta[1]))?;
        let h = g.silu(h)?;
        affine(g, h, delta[2], Some(delta[3]))
    }

    /// Δθ on the graph, shape `[P]`.
    pub fn predict_update_graph(&self, g: &mut Graph, eta: &[Var], es: Var, et: Var) -> Result<Var> {
        let d = self.config.embedding_dim;
        if g.value(es).len() != d || g.value(et).len() != d {
            return Err(Error::Shape(format!(
                "embeddings of sizes {} and {} given, both must be {d}",
                g.value(es).len(),
                g.value(et).len()
            )));
        }
        let z = g.concat(&[es, et])?;
        let mut h = g.reshape(z, &[1, 2 * d])?;
        let layers = eta.len() / 2;
        for l in 0..layers {
            h = affine(g, h, eta[2 * l], Some(eta[2 * l + 1]))?;
            if l + 1 < layers {
                h = g.silu(h)?;
            }
        }
        g.reshape(h, &[self.config.target_params()])
    }

    /// Splits `θ + Δθ` into the target's parameter tensors.
    fn adapted_vars(&self, g: &mut Graph, theta: Var, delta: Var) -> Result<Vec<Var>> {
        let sum = g.add(theta, delta)?;
        let mut off = 0;
        let mut out = Vec::new();
        for s in self.config.target.param_shapes() {
            out.push(g.slice(sum, off, &s)?);
            off += s.iter().product::<usize>();
        }
        Ok(out)
    }

    /// Audio embedding `E_S` of one window.
    pub fn encode_audio(&self, window: &[f64]) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let v = self.register(&mut g, false);
        let e = self.encode_audio_graph(&mut g, &v.encoder, window)?;
        Ok(g.value(e).data().to_vec())
    }

    /// Weight embedding `E_θ` of the universal weights.
    pub fn encode_weights(&self) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let v = self.register(&mut g, false);
        let e = self.encode_weights_graph(&mut g, &v.weight_encoder, v.theta)?;
        Ok(g.value(e).data().to_vec())
    }

    /// Δθ from the two embeddings.
    pub fn predict_update(&self, es: &[f64], et: &[f64]) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let v = self.register(&mut g, false);
        let es = g.constant(Tensor::from_vec(es.to_vec()));
        let et = g.constant(Tensor::from_vec(et.to_vec()));
        let d = self.predict_update_graph(&mut g, &v.hyper, es, et)?;
        Ok(g.value(d).data().to_vec())
    }

    /// The INR specialised to `window`: `θ + H(E(window), G(θ))`.
    pub fn adapt(&self, window: &[f64]) -> Result<InrModel> {
        let es = self.encode_audio(window)?;
        let et = self.encode_weights()?;
        let delta = self.predict_update(&es, &et)?;
        self.universal()?.apply_delta(&delta)
    }

    /// Objective of one window under the adapted (or, with `adapted = false`, the
    /// universal) weights.
    pub fn window_loss(&self, window: &[f64], adapted: bool) -> Result<f64> {
        self.check_window(window)?;
        let model = if adapted {
            self.adapt(window)?
        } else {
            self.universal()?
        };
        let mut g = Graph::new();
        let params: Vec<Var> = model.params().iter().map(|p| g.constant(p.clone())).collect();
        let y = model.forward_graph(&mut g, &params, &time_grid(window.len()))?;
        let x = g.constant(Tensor::from_vec(window.to_vec()));
        let l = combined_loss(&mut g, x, y, &self.config.loss_config())?;
        Ok(g.value(l).item())
    }

    /// Summed objective over `windows` and its gradient for every parameter group.
    pub fn meta_loss_and_grads(&self, windows: &[&[f64]]) -> Result<(f64, MetaGradients)> {
        if windows.is_empty() {
            return Err(Error::Contract("meta batch is empty".into()));
        }
        let template = self.universal()?;
        let loss_cfg = self.config.loss_config();
        let times = time_grid(self.config.window);
        let mut g = Graph::new();
        let v = self.register(&mut g, true);
        let et = self.encode_weights_graph(&mut g, &v.weight_encoder, v.theta)?;
        let mut total: Option<Var> = None;
        for w in windows {
            let es = self.encode_audio_graph(&mut g, &v.encoder, w)?;
            let delta = self.predict_update_graph(&mut g, &v.hyper, es, et)?;
            let params = self.adapted_vars(&mut g, v.theta, delta)?;
            let y = template.forward_graph(&mut g, &params, &times)?;
            let x = g.constant(Tensor::from_vec(w.to_vec()));
            let l = combined_loss(&mut g, x, y, &loss_cfg)?;
            total = Some(match total {
                Some(t) => g.add(t, l)?,
                None => l,
            });
        }
        let total = total.expect("non-empty batch");
        let value = g.value(total).item();
        let mut grads = g.backward(total)?;
        let mut take = |vars: &[Var]| -> Vec<Tensor> {
            vars.iter()
                .map(|&x| grads.take(x).expect("leaf gradient"))
                .collect()
        };
        let encoder = take(&v.encoder);
        let weight_encoder = take(&v.weight_encoder);
        let hyper = take(&v.hyper);
        let theta = take(&[v.theta]).pop().expect("θ gradient");
        Ok((
            value,
            MetaGradients {
                encoder,
                weight_encoder,
                hyper,
                theta,
            },
        ))
    }
}

/// Graph handles of a state's parameters.
#[derive(Clone, Debug)]
pub struct MetaVars {
    pub encoder: Vec<Var>,
    pub weight_encoder: Vec<Var>,
    pub hyper: Vec<Var>,
    pub theta: Var,
}

/// Gradients of the meta objective, grouped like [`FewSoundState`].
#[derive(Clone, Debug)]
pub struct MetaGradients {
    pub encoder: Vec<Tensor>,
    pub weight_encoder: Vec<Tensor>,
    pub hyper: Vec<Tensor>,
    pub theta: Tensor,
}

fn max_abs(ts: &[Tensor]) -> f64 {
    ts.iter()
        .flat_map(|t| t.data().iter())
        .fold(0.0, |m, v| m.max(v.abs()))
}

impl MetaGradients {
    /// Largest absolute gradient per group: (γ, δ, η, θ).
    pub fn max_abs(&self) -> [f64; 4] {
        [
            max_abs(&self.encoder),
            max_abs(&self.weight_encoder),
            max_abs(&self.hyper),
            max_abs(std::slice::from_ref(&self.theta)),
        ]
    }

    fn into_vec(self) -> Vec<Tensor> {
        let mut v = self.encoder;
        v.extend(self.weight_encoder);
        v.extend(self.hyper);
        v.push(self.theta);
        v
    }
}

/// Joint AdamW + one-cycle optimisation of all four parameter groups.
pub struct MetaTrainer {
    state: FewSoundState,
    params: Vec<Tensor>,
    opt: AdamW,
    schedule: Option<OneCycle>,
    step: usize,
}

impl MetaTrainer {
    /// Trainer for `total_steps` optimizer steps. With a single step the schedule
    /// degenerates to the peak rate.
    pub fn new(state: FewSoundState, total_steps: usize) -> Result<Self> {
        let max_lr = state.config.max_lr();
        let schedule = if total_steps >= 2 {
            Some(OneCycle::new(max_lr, total_steps)?)
        } else {
            None
        };
        let params = state.all_params();
        let opt = AdamW::for_params(
            AdamWConfig {
                lr: max_lr,
                weight_decay: state.config.weight_decay,
                ..AdamWConfig::default()
            },
            &params,
        )?;
        Ok(MetaTrainer {
            state,
            params,
            opt,
            schedule,
            step: 0,
        })
    }

    pub fn state(&self) -> &FewSoundState {
        &self.state
    }

    pub fn into_state(self) -> FewSoundState {
        self.state
    }

    /// Learning rate of the next step.
    pub fn lr(&self) -> Result<f64> {
        match &self.schedule {
            Some(s) => s.lr(self.step),
            None => Ok(self.state.config.max_lr()),
        }
    }

    /// One optimizer step on the summed loss of `windows`; returns that loss.
    pub fn step(&mut self, windows: &[&[f64]]) -> Result<f64> {
        let lr = self.lr()?;
        let (loss, grads) = self.state.meta_loss_and_grads(windows)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("meta-loss at step {}", self.step)));
        }
        self.opt.set_lr(lr);
        self.opt.step(&mut self.params, &grads.into_vec())?;
        self.state.set_all_params(self.params.clone());
        self.step += 1;
        Ok(loss)
    }
}

#[derive(Clone, Debug)]
pub struct MetaTrainResult {
    pub state: FewSoundState,
    /// Mean per-clip loss of each epoch.
    pub trace: Vec<f64>,
}

/// Meta-trains a fresh state on `clips`.
pub fn meta_train(clips: &[AudioClip], config: &FewSoundConfig) -> Result<MetaTrainResult> {
    meta_train_from(FewSoundState::init(config)?, clips)
}

/// Continues meta-training `state` on `clips` for `state.config().epochs` epochs.
///
/// Each clip contributes its first `window` samples. Clips are visited in a seeded
/// shuffled order per epoch and grouped into batches of `batch_size`.
pub fn meta_train_from(state: FewSoundState, clips: &[AudioClip]) -> Result<MetaTrainResult> {
    let cfg = state.config.clone();
    if clips.is_empty() {
        return Err(Error::Contract("meta-training needs at least one clip".into()));
    }
    for c in clips {
        if c.sample_rate != cfg.sample_rate {
            return Err(Error::Contract(format!(
                "{} is at {} Hz, expected {} Hz",
                c.source_id, c.sample_rate, cfg.sample_rate
            )));
        }
        if c.len() < cfg.window {
            return Err(Error::Contract(format!(
                "{} has {} samples, fewer than the {}-sample window",
                c.source_id,
                c.len(),
                cfg.window
            )));
        }
    }
    let windows: Vec<&[f64]> = clips.iter().map(|c| &c.samples[..cfg.window]).collect();
    let per_epoch = windows.len().div_ceil(cfg.batch_size);
    let mut trainer = MetaTrainer::new(state, cfg.epochs * per_epoch)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..windows.len()).collect();
    let mut trace = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&[f64]> = chunk.iter().map(|&i| windows[i]).collect();
            sum += trainer.step(&batch).map_err(|e| match e {
                Error::NonFinite(what) => Error::NonFinite(format!("{what} (epoch {epoch}, batch {b})")),
                other => other,
            })?;
        }
        let mean = sum / windows.len() as f64;
        if epoch % 10 == 0 {
            debug!("meta epoch {epoch}: mean loss {mean:.6}");
        }
        trace.push(mean);
    }
    Ok(MetaTrainResult {
        state: trainer.into_state(),
        trace,
    })
}

/// `n` seeded three-sine clips of `len` samples at 22.05 kHz with partials between 50
/// and 350 Hz, slow enough for the toy target's positional encoding to resolve.
pub fn toy_dataset(n: usize, len: usize, seed: u64) -> Vec<AudioClip> {
    (0..n)
        .map(|i| sine_mixture(len, TARGET_RATE, seed.wrapping_add(i as u64), 50.0..350.0))
        .collect()
}

/// Window placement for rendering a signal of `len` samples with `window`-sample
/// pieces at 50% overlap; the last piece is right-aligned with the end.
#[derive(Clone, Debug, PartialEq)]
pub struct OverlapAdd {
    len: usize,
    window: usize,
    starts: Vec<usize>,
}

/// `sin²(π(j + ½)/W)`: strictly positive on every index, so normalisation never
/// divides by zero.
pub fn crossfade(window: usize) -> Vec<f64> {
    (0..window)
        .map(|j| {
            let s = (PI * (j as f64 + 0.5) / window as f64).sin();
            s * s
        })
        .collect()
}

impl OverlapAdd {
    pub fn new(len: usize, window: usize) -> Result<Self> {
        if len == 0 || window == 0 {
            return Err(Error::Contract(
                "overlap-add needs a positive length and window".into(),
            ));
        }
        let mut starts = Vec::new();
        if len <= window {
            starts.push(0);
        } else {
            let hop = (window / 2).max(1);
            let mut s = 0;
            while s + window < len {
                starts.push(s);
                s += hop;
            }
            starts.push(len - window);
        }
        Ok(OverlapAdd { len, window, starts })
    }

    pub fn starts(&self) -> &[usize] {
        &self.starts
    }

    fn denominators(&self) -> Vec<f64> {
        let c = crossfade(self.window);
        let mut den = vec![0.0; self.len];
        for &s in &self.starts {
            for (d, w) in den[s..].iter_mut().zip(&c) {
                *d += w;
            }
        }
        den
    }

    /// Normalized blend weight of every window at every covered sample; entries past
    /// the signal end (single short window) are zero.
    pub fn weights(&self) -> Vec<Vec<f64>> {
        let c = crossfade(self.window);
        let den = self.denominators();
        self.starts
            .iter()
            .map(|&s| {
                (0..self.window)
                    .map(|j| if s + j < self.len { c[j] / den[s + j] } else { 0.0 })
                    .collect()
            })
            .collect()
    }

    /// Per-sample sum of the normalized weights.
    pub fn weight_sums(&self) -> Vec<f64> {
        let mut sums = vec![0.0; self.len];
        for (w, &s) in self.weights().iter().zip(&self.starts) {
            for (acc, v) in sums[s..].iter_mut().zip(w) {
                *acc += v;
            }
        }
        sums
    }

    /// Blends `render(window_samples)` over all windows. Each rendered piece must have
    /// `window` samples; the input window is zero-padded when the signal is shorter.
    pub fn reconstruct_with<F>(&self, signal: &[f64], mut render: F) -> Result<Vec<f64>>
    where
        F: FnMut(&[f64]) -> Result<Vec<f64>>,
    {
        if signal.len() != self.len {
            return Err(Error::Shape(format!(
                "plan is for {} samples, signal has {}",
                self.len,
                signal.len()
            )));
        }
        let mut out = vec![0.0; self.len];
        let mut buf = vec![0.0; self.window];
        for (w, &s) in self.weights().iter().zip(&self.starts) {
            let end = (s + self.window).min(self.len);
            buf.fill(0.0);
            buf[..end - s].copy_from_slice(&signal[s..end]);
            let piece = render(&buf)?;
            if piece.len() != self.window {
                return Err(Error::Shape(format!(
                    "renderer returned {} samples for a {}-sample window",
                    piece.len(),
                    self.window
                )));
            }
            for j in 0..end - s {
                out[s + j] += w[j] * piece[j];
            }
        }
        Ok(out)
    }
}

/// Renders a signal of any length through per-window adapted INRs.
pub fn reconstruct_long(state: &FewSoundState, signal: &[f64]) -> Result<Vec<f64>> {
    let w = state.config.window;
    let times = time_grid(w);
    OverlapAdd::new(signal.len(), w)?.reconstruct_with(signal, |piece| state.adapt(piece)?.forward(&times))
}

/// 1-D convolution of `x [cin×len]` with `w [cout×cin×k]` plus bias `b [cout]`, zero
/// padding `pad` on both sides.
pub fn conv1d(g: &mut Graph, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
    let (xs, ws) = (g.shape(x), g.shape(w));
    if xs.len() != 2 || ws.len() != 3 || ws[1] != xs[0] || g.shape(b) != [ws[0]] || stride == 0 {
        return Err(Error::Shape(format!(
            "conv1d of input {xs:?} with weights {ws:?} and bias {:?}",
            g.shape(b)
        )));
    }
    let geo = ConvGeometry {
        cin: xs[0],
        len: xs[1],
        cout: ws[0],
        k: ws[2],
        stride,
        pad,
    };
    if geo.len + 2 * pad < geo.k {
        return Err(Error::Shape(format!(
            "conv1d kernel {} longer than padded input {}",
            geo.k,
            geo.len + 2 * pad
        )));
    }
    let lout = geo.lout();
    let cols = geo.im2col(g.value(x).data());
    let mut out = vec![0.0; geo.cout * lout];
    matmul_into(
        g.value(w).data(),
        &cols,
        &mut out,
        geo.cout,
        geo.cin * geo.k,
        lout,
    );
    for (row, &bias) in out.chunks_mut(lout).zip(g.value(b).data()) {
        for v in row {
            *v += bias;
        }
    }
    let out = Tensor::new(vec![geo.cout, lout], out)?;
    g.apply(&[x, w, b], out, Conv1dFn(geo))
}

#[derive(Clone, Copy, Debug)]
struct ConvGeometry {
    cin: usize,
    len: usize,
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
}

impl ConvGeometry {
    fn lout(&self) -> usize {
        (self.len + 2 * self.pad - self.k) / self.stride + 1
    }

    /// Input position feeding output `o` through tap `t`, if inside the signal.
    fn source(&self, o: usize, t: usize) -> Option<usize> {
        (o * self.stride + t)
            .checked_sub(self.pad)
            .filter(|&p| p < self.len)
    }

    /// `[cin·k × lout]` patch matrix.
    fn im2col(&self, x: &[f64]) -> Vec<f64> {
        let lout = self.lout();
        let mut cols = vec![0.0; self.cin * self.k * lout];
        for c in 0..self.cin {
            for t in 0..self.k {
                let row = &mut cols[(c * self.k + t) * lout..(c * self.k + t + 1) * lout];
                for (o, v) in row.iter_mut().enumerate() {
                    if let Some(p) = self.source(o, t) {
                        *v = x[c * self.len + p];
                    }
                }
            }
        }
        cols
    }
}

struct Conv1dFn(ConvGeometry);

impl Function for Conv1dFn {
    fn name(&self) -> &'static str {
        "conv1d"
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        grad: &Tensor,
        needs: &[bool],
    ) -> Vec<Option<Tensor>> {
        let geo = self.0;
        let lout = geo.lout();
        let ck = geo.cin * geo.k;
        let gy = grad.data();
        let gx = needs[0].then(|| {
            let wt = transpose_data(inputs[1].data(), geo.cout, ck);
            let mut gcols = vec![0.0; ck * lout];
            matmul_into(&wt, gy, &mut gcols, ck, geo.cout, lout);
            let mut gx = vec![0.0; geo.cin * geo.len];
            for c in 0..geo.cin {
                for t in 0..geo.k {
                    let row = &gcols[(c * geo.k + t) * lout..(c * geo.k + t + 1) * lout];
                    for (o, &v) in row.iter().enumerate() {
                        if let Some(p) = geo.source(o, t) {
                            gx[c * geo.len + p] += v;
                        }
                    }
                }
            }
            Tensor::new(inputs[0].shape().to_vec(), gx).expect("shape")
        });
        let gw = needs[1].then(|| {
            let cols_t = transpose_data(&geo.im2col(inputs[0].data()), ck, lout);
            let mut gw = vec![0.0; geo.cout * ck];
            matmul_into(gy, &cols_t, &mut gw, geo.cout, lout, ck);
            Tensor::new(inputs[1].shape().to_vec(), gw).expect("shape")
        });
        let gb = needs[2].then(|| Tensor::from_vec(gy.chunks(lout).map(|r| r.iter().sum()).collect()));
        vec![gx, gw, gb]
    }
}
