//! Uniform B-spline grids and Cox–de Boor basis evaluation.
//!
//! A grid with `G` intervals on `[lo, hi]` and order (degree) `k` has the extended knot
//! vector `t_j = lo + (j − k)·h`, `j = 0..=G+2k`, `h = (hi − lo)/G`, and `G + k` basis
//! functions. Their sum is one everywhere on `[lo, hi]`.
//!
//! Inputs outside the domain are clamped before evaluation.

use crate::error::{Error, Result};
use crate::tensor::{Function, Graph, Tensor, Var};

/// Largest supported spline order; local evaluation uses fixed-size scratch arrays.
pub const MAX_ORDER: usize = 30;

#[derive(Clone, Debug, PartialEq)]
pub struct SplineGrid {
    grid_size: usize,
    order: usize,
    lo: f64,
    hi: f64,
    knots: Vec<f64>,
}

impl SplineGrid {
    pub fn new(grid_size: usize, order: usize, lo: f64, hi: f64) -> Result<Self> {
        if grid_size < 1 {
            return Err(Error::Parameter("grid size must be at least 1".into()));
        }
        if order > MAX_ORDER {
            return Err(Error::Parameter(format!(
                "spline order {order} exceeds the supported maximum of {MAX_ORDER}"
            )));
        }
        if !(lo < hi) {
            return Err(Error::Parameter(format!(
                "spline domain needs lo < hi, got [{lo}, {hi}]"
            )));
        }
        let h = (hi - lo) / grid_size as f64;
        let knots = (0..=grid_size + 2 * order)
            .map(|j| lo + (j as f64 - order as f64) * h)
            .collect();
        Ok(SplineGrid {
            grid_size,
            order,
            lo,
            hi,
            knots,
        })
    }

    /// Grid on the default domain `[-1, 1]`.
    pub fn unit(grid_size: usize, order: usize) -> Result<Self> {
        Self::new(grid_size, order, -1.0, 1.0)
    }

    pub fn grid_size(&self) -> usize {
        self.grid_size
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn domain(&self) -> (f64, f64) {
        (self.lo, self.hi)
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    pub fn step(&self) -> f64 {
        (self.hi - self.lo) / self.grid_size as f64
    }

    pub fn num_basis(&self) -> usize {
        self.grid_size + self.order
    }

    pub fn clamp(&self, x: f64) -> f64 {
        x.clamp(self.lo, self.hi)
    }

    /// Index of the domain interval containing clamped `x`; `hi` belongs to the last one.
    fn interval(&self, x: f64) -> usize {
        // x ≥ lo after clamping, so truncation is floor
        (((x - self.lo) / self.step()).max(0.0) as usize).min(self.grid_size - 1)
    }

    /// Writes the `k + 1` possibly-nonzero basis values at `x` into `vals` and returns
    /// the global index of the first one.
    pub fn local_basis(&self, x: f64, vals: &mut [f64]) -> usize {
        let x = self.clamp(x);
        let s = self.interval(x);
        self.local_basis_at(s, self.order, x, vals);
        s
    }

    /// Like [`local_basis`](Self::local_basis), also writing `dB/dx` into `ders`.
    pub fn local_basis_with_deriv(&self, x: f64, vals: &mut [f64], ders: &mut [f64]) -> usize {
        let k = self.order;
        let x = self.clamp(x);
        let s = self.interval(x);
        if k == 0 {
            vals[0] = 1.0;
            ders[0] = 0.0;
            return s;
        }
        self.raise(s, 0, k - 1, x, vals);
        let h = self.step();
        // B'_{r,k} = (B_{r,k-1} − B_{r+1,k-1})/h on uniform knots
        ders[0] = -vals[0] / h;
        for m in 1..k {
            ders[m] = (vals[m - 1] - vals[m]) / h;
        }
        ders[k] = vals[k - 1] / h;
        self.raise(s, k - 1, k, x, vals);
        s
    }

    /// Non-zero degree-`deg` basis values on domain interval `s` (knot span `s + k`).
    fn local_basis_at(&self, s: usize, deg: usize, x: f64, vals: &mut [f64]) {
        self.raise(s, 0, deg, x, vals);
    }

    /// Raises `vals` from the degree-`from` to the degree-`to` local basis (Cox–de Boor
    /// triangle, one row per degree). `from = 0` initializes.
    fn raise(&self, s: usize, from: usize, to: usize, x: f64, vals: &mut [f64]) {
        let t = &self.knots;
        let span = s + self.order;
        if from == 0 {
            vals[0] = 1.0;
        }
        for j in from + 1..=to {
            let mut saved = 0.0;
            for r in 0..j {
                let right = t[span + r + 1] - x;
                let left = x - t[span + 1 + r - j];
                let tmp = vals[r] / (right + left);
                vals[r] = saved + right * tmp;
                saved = left * tmp;
            }
            vals[j] = saved;
        }
    }

    /// All `G + k` basis values at `x`.
    pub fn basis(&self, x: f64) -> Vec<f64> {
        let mut vals = vec![0.0; self.order + 1];
        let s = self.local_basis(x, &mut vals);
        let mut out = vec![0.0; self.num_basis()];
        out[s..s + self.order + 1].copy_from_slice(&vals);
        out
    }

    /// All `G + k` basis derivatives at `x`.
    pub fn basis_grad(&self, x: f64) -> Vec<f64> {
        let mut vals = vec![0.0; self.order + 1];
        let mut ders = vec![0.0; self.order + 1];
        let s = self.local_basis_with_deriv(x, &mut vals, &mut ders);
        let mut out = vec![0.0; self.num_basis()];
        out[s..s + self.order + 1].copy_from_slice(&ders);
        out
    }
}

struct SplineEvalFn {
    grid: SplineGrid,
}

impl Function for SplineEvalFn {
    fn name(&self) -> &'static str {
        "spline_eval"
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        grad: &Tensor,
        needs: &[bool],
    ) -> Vec<Option<Tensor>> {
        let (coeffs, x) = (inputs[0], inputs[1]);
        let k = self.grid.order;
        let (lo, hi) = self.grid.domain();
        let mut vals = vec![0.0; k + 1];
        let mut ders = vec![0.0; k + 1];
        let mut gc = needs[0].then(|| vec![0.0; coeffs.len()]);
        let mut gx = needs[1].then(|| vec![0.0; x.len()]);
        for (i, (&xi, &gi)) in x.data().iter().zip(grad.data()).enumerate() {
            let s = self.grid.local_basis_with_deriv(xi, &mut vals, &mut ders);
            if let Some(gc) = gc.as_mut() {
                for j in 0..=k {
                    gc[s + j] += gi * vals[j];
                }
            }
            if let Some(gx) = gx.as_mut() {
                if xi >= lo && xi <= hi {
                    let d: f64 = (0..=k).map(|j| coeffs.data()[s + j] * ders[j]).sum();
                    gx[i] = gi * d;
                }
            }
        }
        vec![
            gc.map(|d| Tensor::new(coeffs.shape().to_vec(), d).unwrap()),
            gx.map(|d| Tensor::new(x.shape().to_vec(), d).unwrap()),
        ]
    }
}

/// `spline(x) = Σ_i c_i B_i(x)` for each element of `x`, differentiable in both the
/// coefficients and `x`.
pub fn spline_eval(g: &mut Graph, grid: &SplineGrid, coeffs: Var, x: Var) -> Result<Var> {
    let c = g.value(coeffs);
    if c.len() != grid.num_basis() {
        return Err(Error::Shape(format!(
            "spline needs {} coefficients, got {}",
            grid.num_basis(),
            c.len()
        )));
    }
    let k = grid.order;
    let mut vals = vec![0.0; k + 1];
    let xs = g.value(x);
    let out: Vec<f64> = xs
        .data()
        .iter()
        .map(|&xi| {
            let s = grid.local_basis(xi, &mut vals);
            (0..=k).map(|j| c.data()[s + j] * vals[j]).sum()
        })
        .collect();
    let out = Tensor::new(xs.shape().to_vec(), out)?;
    g.apply(&[coeffs, x], out, SplineEvalFn { grid: grid.clone() })
}
