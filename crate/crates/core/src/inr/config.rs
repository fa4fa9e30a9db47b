use std::fmt;
use std::str::FromStr;

use crate::bspline::MAX_ORDER;
use crate::error::{Error, Result};

/// INR architecture family.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Arch {
    /// Positional encoding followed by a ReLU MLP.
    Nerf,
    /// MLP with `sin(ω0·x)` activations.
    Siren,
    /// Random Fourier feature embedding followed by a ReLU MLP.
    Rff,
    /// MLP with complex Gabor wavelet activations.
    Wire,
    /// MLP with the variable-periodic activation `sin(ω0·|x+1|·x)`.
    Finer,
    /// Positional encoding followed by Kolmogorov-Arnold layers.
    Kan,
}

impl Arch {
    pub const ALL: [Arch; 6] = [
        Arch::Nerf,
        Arch::Siren,
        Arch::Finer,
        Arch::Wire,
        Arch::Rff,
        Arch::Kan,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Arch::Nerf => "nerf",
            Arch::Siren => "siren",
            Arch::Rff => "rff",
            Arch::Wire => "wire",
            Arch::Finer => "finer",
            Arch::Kan => "kan",
        }
    }

    /// Tag byte used in model files.
    pub fn tag(self) -> u8 {
        match self {
            Arch::Nerf => 0,
            Arch::Siren => 1,
            Arch::Rff => 2,
            Arch::Wire => 3,
            Arch::Finer => 4,
            Arch::Kan => 5,
        }
    }

    pub fn from_tag(tag: u8) -> Result<Self> {
        Ok(match tag {
            0 => Arch::Nerf,
            1 => Arch::Siren,
            2 => Arch::Rff,
            3 => Arch::Wire,
            4 => Arch::Finer,
            5 => Arch::Kan,
            _ => return Err(Error::Config(format!("unknown architecture tag {tag}"))),
        })
    }

    /// Parameter counts of the reference configurations these baselines are compared
    /// against; the MLP widths behind them are not known, so fitted models report their
    /// own counts next to these.
    pub fn reference_param_count(self) -> usize {
        match self {
            Arch::Nerf => 33_261,
            Arch::Siren | Arch::Finer | Arch::Wire => 31_191,
            Arch::Rff => 39_201,
            Arch::Kan => 33_768,
        }
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "nerf" => Ok(Arch::Nerf),
            "siren" => Ok(Arch::Siren),
            "rff" => Ok(Arch::Rff),
            "wire" => Ok(Arch::Wire),
            "finer" => Ok(Arch::Finer),
            "kan" => Ok(Arch::Kan),
            other => Err(Error::Config(format!("unknown architecture '{other}'"))),
        }
    }
}

/// Architecture plus every hyperparameter needed to build an [`InrModel`](super::InrModel).
///
/// Fields that do not apply to `arch` are carried along and ignored.
#[derive(Clone, Debug, PartialEq)]
pub struct InrConfig {
    pub arch: Arch,
    /// Hidden layer widths; the output layer (width 1) is implicit.
    pub layers: Vec<usize>,
    /// Number of positional-encoding octaves `L` (nerf, kan).
    pub encoding_length: usize,
    /// Number of random Fourier features `m` (rff).
    pub rff_features: usize,
    /// Standard deviation of the random projection (rff).
    pub rff_sigma: f64,
    /// Frequency factor ω0 (siren, finer, wire).
    pub omega0: f64,
    /// Gaussian envelope scale s0 (wire).
    pub wire_scale: f64,
    /// First-layer bias bound `k` (finer).
    pub finer_bias_bound: f64,
    pub grid_size: usize,
    pub spline_order: usize,
    /// Whether KAN edges carry the learnable spline scale `w_s`.
    pub scale_spline: bool,
    pub seed: u64,
}

impl InrConfig {
    /// Default configuration of each architecture.
    pub fn new(arch: Arch) -> Self {
        let mut c = InrConfig {
            arch,
            layers: vec![128, 128, 128],
            encoding_length: 8,
            rff_features: 64,
            rff_sigma: 10.0,
            omega0: 30.0,
            wire_scale: 10.0,
            finer_bias_bound: 1.0,
            grid_size: 10,
            spline_order: 2,
            scale_spline: true,
            seed: 0,
        };
        match arch {
            Arch::Kan => c.layers = vec![48, 24, 12],
            Arch::Wire => c.omega0 = 20.0,
            _ => {}
        }
        c
    }

    pub fn with_layers(mut self, layers: &[usize]) -> Self {
        self.layers = layers.to_vec();
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() || self.layers.contains(&0) {
            return Err(Error::Config(format!(
                "hidden layer widths must be non-empty and positive, got {:?}",
                self.layers
            )));
        }
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must be positive, got {v}")))
            }
        };
        match self.arch {
            Arch::Nerf | Arch::Kan if self.encoding_length == 0 => {
                return Err(Error::Config("encoding length must be at least 1".into()));
            }
            Arch::Rff => {
                if self.rff_features == 0 {
                    return Err(Error::Config("rff needs at least one feature".into()));
                }
                positive("rff sigma", self.rff_sigma)?;
            }
            Arch::Siren => positive("omega0", self.omega0)?,
            Arch::Finer => {
                positive("omega0", self.omega0)?;
                if !(self.finer_bias_bound >= 0.0) {
                    return Err(Error::Config("finer bias bound must be non-negative".into()));
                }
            }
            Arch::Wire => {
                positive("omega0", self.omega0)?;
                positive("wire scale", self.wire_scale)?;
            }
            _ => {}
        }
        if self.arch == Arch::Kan {
            if self.grid_size == 0 {
                return Err(Error::Config("grid size must be at least 1".into()));
            }
            if self.spline_order > MAX_ORDER {
                return Err(Error::Config(format!("spline order must be at most {MAX_ORDER}")));
            }
        }
        Ok(())
    }

    /// Width of the embedded time coordinate fed to the first layer.
    pub fn input_dim(&self) -> usize {
        match self.arch {
            Arch::Nerf | Arch::Kan => 2 * self.encoding_length,
            Arch::Rff => 2 * self.rff_features,
            Arch::Siren | Arch::Wire | Arch::Finer => 1,
        }
    }

    /// Layer widths from input to output, including the input and the scalar output.
    pub fn dims(&self) -> Vec<usize> {
        let mut d = Vec::with_capacity(self.layers.len() + 2);
        d.push(self.input_dim());
        d.extend_from_slice(&self.layers);
        d.push(1);
        d
    }

    /// Shapes of the trainable tensors in flatten order.
    ///
    /// Layers come in order; a dense layer contributes `W [out×in]` then `b [out]`, a KAN
    /// layer `w_b [out×in]`, then `w_s [out×in]` when `scale_spline` is set, then the
    /// spline coefficients `[out×in×(G+k)]`.
    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        let dims = self.dims();
        let mut shapes = Vec::new();
        for w in dims.windows(2) {
            let (i, o) = (w[0], w[1]);
            if self.arch == Arch::Kan {
                shapes.push(vec![o, i]);
                if self.scale_spline {
                    shapes.push(vec![o, i]);
                }
                shapes.push(vec![o, i, self.grid_size + self.spline_order]);
            } else {
                shapes.push(vec![o, i]);
                shapes.push(vec![o]);
            }
        }
        shapes
    }
}

/// Number of trainable parameters of `config`.
///
/// For KAN this is `E·(2 + G + k)` with the spline scale and `E·(1 + G + k)` without,
/// where `E` is the number of edges `Σ in·out` over consecutive layers. KAN layers have
/// no biases. MLPs count `Σ (out·in + out)`.
pub fn param_count(config: &InrConfig) -> usize {
    let dims = config.dims();
    let edges: usize = dims.windows(2).map(|w| w[0] * w[1]).sum();
    match config.arch {
        Arch::Kan => {
            let per_edge = 1 + usize::from(config.scale_spline) + config.grid_size + config.spline_order;
            edges * per_edge
        }
        _ => edges + dims[1..].iter().sum::<usize>(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn kan(l: usize, layers: &[usize], g: usize, k: usize, scale: bool) -> usize {
        let mut c = InrConfig::new(Arch::Kan).with_layers(layers);
        c.encoding_length = l;
        c.grid_size = g;
        c.spline_order = k;
        c.scale_spline = scale;
        param_count(&c)
    }

    #[test]
    fn kan_counts() {
        assert_eq!(kan(8, &[48, 24, 12], 10, 2, true), 31_080);
        assert_eq!(kan(10, &[48, 24, 12], 10, 2, true), 33_768);
        assert_eq!(kan(8, &[24, 12, 6], 10, 2, true), 10_500);
        assert_eq!(kan(8, &[48, 24, 12], 10, 2, false), 28_860);
        assert_eq!(kan(8, &[48, 24, 12], 17, 2, true), 46_620);
    }

    #[test]
    fn shapes_agree_with_count() {
        for arch in Arch::ALL {
            for scale in [true, false] {
                let mut c = InrConfig::new(arch);
                c.scale_spline = scale;
                let n: usize = c.param_shapes().iter().map(|s| s.iter().product::<usize>()).sum();
                assert_eq!(n, param_count(&c), "{arch}");
            }
        }
    }

    #[test]
    fn mlp_count() {
        let c = InrConfig::new(Arch::Siren).with_layers(&[4, 3]);
        // 1→4→3→1: 4+4 + 12+3 + 3+1
        assert_eq!(param_count(&c), 27);
    }

    #[test]
    fn arch_parsing_and_tags() {
        for a in Arch::ALL {
            assert_eq!(a.name().parse::<Arch>().unwrap(), a);
            assert_eq!(Arch::from_tag(a.tag()).unwrap(), a);
        }
        assert!(matches!("mlp".parse::<Arch>(), Err(Error::Config(_))));
        assert!(Arch::from_tag(9).is_err());
    }

    #[test]
    fn validation() {
        assert!(InrConfig::new(Arch::Kan).with_layers(&[]).validate().is_err());
        let mut c = InrConfig::new(Arch::Siren);
        c.omega0 = 0.0;
        assert!(c.validate().is_err());
        for a in Arch::ALL {
            InrConfig::new(a).validate().unwrap();
        }
    }
}
