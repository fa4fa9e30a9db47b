//! The six INR architectures: construction, evaluation and parameter bookkeeping.

mod config;
mod encoding;
mod layers;

pub use config::{param_count, Arch, InrConfig};
pub use encoding::{PositionalEncoding, RffEmbedding};
pub use layers::{activate, affine, gabor, kan_layer, Activation, Layer};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::bspline::SplineGrid;
use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
enum Embedding {
    Raw,
    Positional(PositionalEncoding),
    Fourier(RffEmbedding),
}

/// A parameterized INR `f(t)`: time in `[-1, 1]` to amplitude.
#[derive(Clone, Debug, PartialEq)]
pub struct InrModel {
    config: InrConfig,
    params: Vec<Tensor>,
    embedding: Embedding,
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, bound: f64) -> Vec<f64> {
    if bound == 0.0 {
        return vec![0.0; n];
    }
    let u = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    (0..n).map(|_| u.sample(rng)).collect()
}

fn normal(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Vec<f64> {
    let d = Normal::new(0.0, std).expect("finite std");
    (0..n).map(|_| d.sample(rng)).collect()
}

fn make_embedding(config: &InrConfig, rng: &mut ChaCha8Rng) -> Embedding {
    match config.arch {
        Arch::Nerf | Arch::Kan => Embedding::Positional(PositionalEncoding::new(config.encoding_length)),
        Arch::Rff => Embedding::Fourier(RffEmbedding::sample(config.rff_features, config.rff_sigma, rng)),
        Arch::Siren | Arch::Wire | Arch::Finer => Embedding::Raw,
    }
}

impl InrModel {
    /// Builds and initializes a model from `config`, seeded by `config.seed`.
    ///
    /// The random Fourier projection (rff) is drawn first, then layer parameters in
    /// flatten order.
    pub fn build(config: &InrConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let embedding = make_embedding(config, &mut rng);
        let dims = config.dims();
        let mut params = Vec::new();
        for (li, w) in dims.windows(2).enumerate() {
            let (fan_in, fan_out) = (w[0], w[1]);
            let nw = fan_in * fan_out;
            let bias_bound = 1.0 / (fan_in as f64).sqrt();
            let (weights, bias) = match config.arch {
                Arch::Kan => {
                    let xavier = (6.0 / (fan_in + fan_out) as f64).sqrt();
                    params.push(Tensor::new(vec![fan_out, fan_in], uniform(&mut rng, nw, xavier))?);
                    if config.scale_spline {
                        params.push(Tensor::new(vec![fan_out, fan_in], uniform(&mut rng, nw, xavier))?);
                    }
                    let nb = config.grid_size + config.spline_order;
                    let std = 0.1 / (nb as f64).sqrt();
                    params.push(Tensor::new(
                        vec![fan_out, fan_in, nb],
                        normal(&mut rng, nw * nb, std),
                    )?);
                    continue;
                }
                Arch::Nerf | Arch::Rff => {
                    let kaiming = (6.0 / fan_in as f64).sqrt();
                    (
                        uniform(&mut rng, nw, kaiming),
                        uniform(&mut rng, fan_out, bias_bound),
                    )
                }
                Arch::Siren | Arch::Finer => {
                    let bound = if li == 0 {
                        1.0 / fan_in as f64
                    } else {
                        (6.0 / fan_in as f64).sqrt() / config.omega0
                    };
                    let weights = uniform(&mut rng, nw, bound);
                    let bias = if config.arch == Arch::Finer && li == 0 {
                        uniform(&mut rng, fan_out, config.finer_bias_bound)
                    } else {
                        uniform(&mut rng, fan_out, bias_bound)
                    };
                    (weights, bias)
                }
                Arch::Wire => {
                    let weights = normal(&mut rng, nw, 1.0)
                        .into_iter()
                        .map(|v| v / (fan_in as f64).sqrt())
                        .collect();
                    (weights, uniform(&mut rng, fan_out, bias_bound))
                }
            };
            params.push(Tensor::new(vec![fan_out, fan_in], weights)?);
            params.push(Tensor::new(vec![fan_out], bias)?);
        }
        Ok(InrModel {
            config: config.clone(),
            params,
            embedding,
        })
    }

    pub fn config(&self) -> &InrConfig {
        &self.config
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    /// Frozen random Fourier projection, for rff models.
    pub fn rff_projection(&self) -> Option<&[f64]> {
        match &self.embedding {
            Embedding::Fourier(r) => Some(r.projection()),
            _ => None,
        }
    }

    /// Layer structure from input to output.
    pub fn layers(&self) -> Result<Vec<Layer>> {
        let c = &self.config;
        let dims = c.dims();
        let n = dims.len() - 1;
        let mut out = Vec::with_capacity(n);
        for (li, w) in dims.windows(2).enumerate() {
            let (inputs, outputs) = (w[0], w[1]);
            let last = li + 1 == n;
            out.push(match c.arch {
                Arch::Kan => Layer::Kan {
                    inputs,
                    outputs,
                    grid: SplineGrid::unit(c.grid_size, c.spline_order)?,
                    scale_spline: c.scale_spline,
                },
                arch => Layer::Dense {
                    inputs,
                    outputs,
                    activation: if last {
                        Activation::Identity
                    } else {
                        match arch {
                            Arch::Nerf | Arch::Rff => Activation::Relu,
                            Arch::Siren => Activation::Sine(c.omega0),
                            Arch::Finer => Activation::Finer(c.omega0),
                            Arch::Wire => Activation::Gabor {
                                omega0: c.omega0,
                                scale: c.wire_scale,
                            },
                            Arch::Kan => unreachable!(),
                        }
                    },
                },
            });
        }
        Ok(out)
    }

    /// Embedded time coordinates, `[batch × input_dim]`. Times are clamped to `[-1, 1]`.
    pub fn embed(&self, times: &[f64]) -> Result<Tensor> {
        if times.is_empty() {
            return Err(Error::Shape("no time coordinates given".into()));
        }
        let t: Vec<f64> = times.iter().map(|t| t.clamp(-1.0, 1.0)).collect();
        match &self.embedding {
            Embedding::Raw => Tensor::new(vec![t.len(), 1], t),
            Embedding::Positional(pe) => pe.encode(&t),
            Embedding::Fourier(rff) => rff.encode(&t),
        }
    }

    /// Registers the model's parameters as graph leaves, in flatten order.
    pub fn register(&self, g: &mut Graph) -> Vec<Var> {
        self.params.iter().map(|p| g.param(p.clone())).collect()
    }

    /// Forward pass with externally supplied parameter nodes (e.g. `θ + Δθ` slices).
    /// Returns a `[batch]` node of amplitudes.
    pub fn forward_graph(&self, g: &mut Graph, params: &[Var], times: &[f64]) -> Result<Var> {
        self.run(g, params, times, None)
    }

    /// Outputs of every hidden layer (real part for wire), for inspection.
    pub fn hidden_activations(&self, times: &[f64]) -> Result<Vec<Tensor>> {
        let mut g = Graph::new();
        let params: Vec<Var> = self.params.iter().map(|p| g.constant(p.clone())).collect();
        let mut trace = Vec::new();
        self.run(&mut g, &params, times, Some(&mut trace))?;
        Ok(trace.into_iter().map(|v| g.value(v).clone()).collect())
    }

    fn run(
        &self,
        g: &mut Graph,
        params: &[Var],
        times: &[f64],
        mut trace: Option<&mut Vec<Var>>,
    ) -> Result<Var> {
        let shapes = self.config.param_shapes();
        if params.len() != shapes.len() {
            return Err(Error::Shape(format!(
                "model has {} parameter tensors, got {}",
                shapes.len(),
                params.len()
            )));
        }
        for (p, s) in params.iter().zip(&shapes) {
            if g.shape(*p) != &s[..] {
                return Err(Error::Shape(format!(
                    "parameter shape {:?}, expected {s:?}",
                    g.shape(*p)
                )));
            }
        }
        let batch = times.len();
        let input = self.embed(times)?;
        let mut x = g.constant(input);
        let layers = self.layers()?;
        let n = layers.len();
        let mut cursor = 0;
        let mut imag: Option<Var> = None;
        for (li, layer) in layers.iter().enumerate() {
            match layer {
                Layer::Kan {
                    grid, scale_spline, ..
                } => {
                    let wb = params[cursor];
                    let ws = scale_spline.then(|| params[cursor + 1]);
                    let c = params[cursor + 1 + usize::from(*scale_spline)];
                    cursor += 2 + usize::from(*scale_spline);
                    x = kan_layer(g, grid, x, wb, ws, c)?;
                }
                Layer::Dense { activation, .. } => {
                    let (w, b) = (params[cursor], params[cursor + 1]);
                    cursor += 2;
                    let re = affine(g, x, w, Some(b))?;
                    match *activation {
                        Activation::Gabor { omega0, scale } => {
                            let im = match imag {
                                Some(v) => Some(affine(g, v, w, None)?),
                                None => None,
                            };
                            let (r, i) = gabor(g, re, im, omega0, scale)?;
                            x = r;
                            imag = Some(i);
                        }
                        // complex input to the output layer: keep the real part
                        act => x = activate(g, re, act)?,
                    }
                }
            }
            if li + 1 < n {
                if let Some(t) = trace.as_deref_mut() {
                    t.push(x);
                }
            }
        }
        g.reshape(x, &[batch])
    }

    /// Amplitudes at `times`.
    pub fn forward(&self, times: &[f64]) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let params: Vec<Var> = self.params.iter().map(|p| g.constant(p.clone())).collect();
        let y = self.forward_graph(&mut g, &params, times)?;
        Ok(g.value(y).data().to_vec())
    }

    /// All parameters in flatten order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for p in &self.params {
            out.extend_from_slice(p.data());
        }
        out
    }

    /// Rebuilds a model from a flat parameter vector; the rff projection is redrawn
    /// from `config.seed`.
    pub fn unflatten(config: &InrConfig, flat: &[f64]) -> Result<Self> {
        config.validate()?;
        let expected = param_count(config);
        if flat.len() != expected {
            return Err(Error::Shape(format!(
                "{} parameters given, configuration needs {expected}",
                flat.len()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let embedding = make_embedding(config, &mut rng);
        let mut params = Vec::new();
        let mut off = 0;
        for s in config.param_shapes() {
            let n: usize = s.iter().product();
            params.push(Tensor::new(s, flat[off..off + n].to_vec())?);
            off += n;
        }
        Ok(InrModel {
            config: config.clone(),
            params,
            embedding,
        })
    }

    /// `θ' = θ + Δθ` as a new model.
    pub fn apply_delta(&self, delta: &[f64]) -> Result<Self> {
        if delta.len() != self.param_count() {
            return Err(Error::Shape(format!(
                "update has {} values, model has {} parameters",
                delta.len(),
                self.param_count()
            )));
        }
        let mut out = self.clone();
        let mut off = 0;
        for p in out.params.iter_mut() {
            let n = p.len();
            for (v, d) in p.data_mut().iter_mut().zip(&delta[off..off + n]) {
                *v += d;
            }
            off += n;
        }
        Ok(out)
    }

    /// Replaces the parameters, keeping configuration and embedding.
    pub fn with_params(&self, params: Vec<Tensor>) -> Result<Self> {
        let shapes = self.config.param_shapes();
        if params.len() != shapes.len() || params.iter().zip(&shapes).any(|(p, s)| p.shape() != &s[..]) {
            return Err(Error::Shape(
                "parameter tensors do not match the configuration".into(),
            ));
        }
        Ok(InrModel {
            config: self.config.clone(),
            params,
            embedding: self.embedding.clone(),
        })
    }
}

/// Evenly spaced times over `[-1, 1]`, one per sample.
pub fn time_grid(n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![0.0],
        _ => (0..n).map(|i| -1.0 + 2.0 * i as f64 / (n - 1) as f64).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{grad_check, GradCheck};

    fn small(arch: Arch) -> InrConfig {
        let mut c = InrConfig::new(arch).with_layers(&[8, 6]).with_seed(5);
        c.encoding_length = 3;
        c.rff_features = 4;
        c.grid_size = 4;
        c.spline_order = 2;
        c
    }

    #[test]
    fn table_kan_builds_with_exact_count() {
        let mut c = InrConfig::new(Arch::Kan);
        c.encoding_length = 10;
        let m = InrModel::build(&c).unwrap();
        assert_eq!(m.param_count(), 33_768);
        assert_eq!(m.flatten().len(), 33_768);
    }

    #[test]
    fn build_is_deterministic() {
        for arch in Arch::ALL {
            let c = small(arch);
            let a = InrModel::build(&c).unwrap();
            let b = InrModel::build(&c).unwrap();
            let bits = |m: &InrModel| m.flatten().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&a), bits(&b), "{arch}");
        }
    }

    #[test]
    fn finer_first_layer_bias_within_bound() {
        let mut c = InrConfig::new(Arch::Finer).with_seed(11);
        c.finer_bias_bound = 0.25;
        let m = InrModel::build(&c).unwrap();
        assert!(m.params()[1].data().iter().all(|b| b.abs() <= 0.25));
    }

    #[test]
    fn zero_kan_is_zero_function() {
        let c = InrConfig::new(Arch::Kan);
        let m = InrModel::unflatten(&c, &vec![0.0; param_count(&c)]).unwrap();
        let y = m.forward(&time_grid(64)).unwrap();
        assert!(y.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn siren_hidden_activations_are_bounded() {
        let m = InrModel::build(&InrConfig::new(Arch::Siren).with_seed(3)).unwrap();
        let acts = m.hidden_activations(&time_grid(200)).unwrap();
        assert_eq!(acts.len(), 3);
        for a in acts {
            assert!(a.data().iter().all(|v| v.abs() <= 1.0));
        }
    }

    #[test]
    fn flatten_roundtrip_is_bitwise() {
        for arch in Arch::ALL {
            let m = InrModel::build(&small(arch)).unwrap();
            let flat = m.flatten();
            let back = InrModel::unflatten(m.config(), &flat).unwrap();
            assert_eq!(back, m);
            assert_eq!(back.flatten(), flat);
        }
    }

    #[test]
    fn unflatten_rejects_wrong_length() {
        let c = small(Arch::Kan);
        assert!(matches!(InrModel::unflatten(&c, &[0.0; 3]), Err(Error::Shape(_))));
    }

    #[test]
    fn apply_delta_laws() {
        let c = small(Arch::Siren);
        let m1 = InrModel::build(&c).unwrap();
        let times = time_grid(33);
        let zero = vec![0.0; m1.param_count()];
        assert_eq!(
            m1.apply_delta(&zero).unwrap().forward(&times).unwrap(),
            m1.forward(&times).unwrap()
        );

        let d: Vec<f64> = (0..m1.param_count())
            .map(|i| ((i % 7) as f64 - 3.0) * 0.01)
            .collect();
        let neg: Vec<f64> = d.iter().map(|v| -v).collect();
        let back = m1.apply_delta(&d).unwrap().apply_delta(&neg).unwrap();
        for (a, b) in back.flatten().iter().zip(m1.flatten()) {
            assert!((a - b).abs() <= 1e-15);
        }

        let m2 = InrModel::build(&c.clone().with_seed(99)).unwrap();
        let diff: Vec<f64> = m2
            .flatten()
            .iter()
            .zip(m1.flatten())
            .map(|(a, b)| a - b)
            .collect();
        let moved = m1.apply_delta(&diff).unwrap();
        for (a, b) in moved.flatten().iter().zip(m2.flatten()) {
            assert!((a - b).abs() <= 1e-15);
        }
        assert!(m1.apply_delta(&[1.0]).is_err());
    }

    #[test]
    fn wire_output_is_real_and_finite() {
        let m = InrModel::build(&InrConfig::new(Arch::Wire).with_seed(4)).unwrap();
        let y = m.forward(&time_grid(300)).unwrap();
        assert_eq!(y.len(), 300);
        assert!(y.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn rff_projection_is_frozen_across_calls() {
        let m = InrModel::build(&small(Arch::Rff)).unwrap();
        let b = m.rff_projection().unwrap().to_vec();
        let t = time_grid(10);
        assert_eq!(m.forward(&t).unwrap(), m.forward(&t).unwrap());
        assert_eq!(m.rff_projection().unwrap(), &b[..]);
        let back = InrModel::unflatten(m.config(), &m.flatten()).unwrap();
        assert_eq!(back.rff_projection().unwrap(), &b[..]);
    }

    #[test]
    fn times_outside_domain_are_clamped() {
        let m = InrModel::build(&small(Arch::Kan)).unwrap();
        assert_eq!(m.forward(&[1.5]).unwrap(), m.forward(&[1.0]).unwrap());
    }

    #[test]
    fn kan_layer_gradients_all_inputs() {
        for scale in [true, false] {
            let grid = SplineGrid::unit(5, 3).unwrap();
            let (b, i, o) = (7, 3, 4);
            let gen = |n: usize, seed: u64| -> Vec<f64> {
                (0..n)
                    .map(|j| (((j as u64 * 2654435761 + seed * 97) % 1000) as f64 / 500.0 - 1.0) * 0.9)
                    .collect()
            };
            let mut inputs = vec![
                Tensor::new(vec![b, i], gen(b * i, 1)).unwrap(),
                Tensor::new(vec![o, i], gen(o * i, 2)).unwrap(),
            ];
            if scale {
                inputs.push(Tensor::new(vec![o, i], gen(o * i, 3)).unwrap());
            }
            inputs.push(Tensor::new(vec![o, i, 8], gen(o * i * 8, 4)).unwrap());
            let report = grad_check(
                |g, v| {
                    let y = if scale {
                        kan_layer(g, &grid, v[0], v[1], Some(v[2]), v[3])?
                    } else {
                        kan_layer(g, &grid, v[0], v[1], None, v[2])?
                    };
                    let y = g.sin(y)?;
                    g.sum(y)
                },
                &inputs,
                &GradCheck {
                    coords_per_tensor: None,
                    ..GradCheck::default()
                },
            )
            .unwrap();
            assert!(report.max_rel_error < 1e-4, "scale={scale} {report:?}");
        }
    }

    #[test]
    fn every_arch_gradients_through_l1() {
        let times = time_grid(24);
        let target: Vec<f64> = times.iter().map(|t| (3.0 * t).sin() * 0.5).collect();
        for arch in Arch::ALL {
            let m = InrModel::build(&small(arch)).unwrap();
            let report = grad_check(
                |g, v| {
                    let y = m.forward_graph(g, v, &times)?;
                    let t = g.constant(Tensor::from_vec(target.clone()));
                    let d = g.sub(y, t)?;
                    let a = g.abs(d)?;
                    g.mean(a)
                },
                m.params(),
                &GradCheck::default(),
            )
            .unwrap();
            assert!(report.max_rel_error <= 1e-4, "{arch}: {report:?}");
        }
    }
}
