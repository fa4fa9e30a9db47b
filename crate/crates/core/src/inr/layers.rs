//! Dense and Kolmogorov-Arnold layers as graph operations.

use crate::bspline::SplineGrid;
use crate::error::{Error, Result};
use crate::tensor::{matmul_into, silu, silu_grad, Function, Graph, Tensor, Var};

/// Nonlinearity applied after a dense layer's affine map.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    Identity,
    Relu,
    /// `sin(ω0·x)`
    Sine(f64),
    /// `sin(ω0·|x+1|·x)`
    Finer(f64),
    /// `e^{iω0x}·e^{−|s0x|²}`; complex-valued, see [`gabor`].
    Gabor {
        omega0: f64,
        scale: f64,
    },
}

/// Structure of one layer of an INR.
#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    Dense {
        inputs: usize,
        outputs: usize,
        activation: Activation,
    },
    Kan {
        inputs: usize,
        outputs: usize,
        grid: SplineGrid,
        scale_spline: bool,
    },
}

impl Layer {
    pub fn param_count(&self) -> usize {
        match self {
            Layer::Dense { inputs, outputs, .. } => outputs * inputs + outputs,
            Layer::Kan {
                inputs,
                outputs,
                grid,
                scale_spline,
            } => inputs * outputs * (1 + usize::from(*scale_spline) + grid.num_basis()),
        }
    }
}

/// `x·Wᵀ + b` for `x [batch×in]`, `W [out×in]`, `b [out]`.
pub fn affine(g: &mut Graph, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
    let wt = g.transpose(w)?;
    let y = g.matmul(x, wt)?;
    match b {
        Some(b) => g.add(y, b),
        None => Ok(y),
    }
}

/// Applies a real activation. Gabor activations are complex; use [`gabor`].
pub fn activate(g: &mut Graph, z: Var, act: Activation) -> Result<Var> {
    match act {
        Activation::Identity => Ok(z),
        Activation::Relu => g.relu(z),
        Activation::Sine(w0) => {
            let s = g.scale(z, w0)?;
            g.sin(s)
        }
        Activation::Finer(w0) => {
            let shifted = g.shift(z, 1.0)?;
            let a = g.abs(shifted)?;
            let p = g.mul(a, z)?;
            let s = g.scale(p, w0)?;
            g.sin(s)
        }
        Activation::Gabor { .. } => Err(Error::Contract(
            "gabor activations are complex-valued and need the paired form".into(),
        )),
    }
}

/// Gabor wavelet of a complex pre-activation `u + iv`, returned as (real, imaginary):
/// `exp(−ω0·v − s0²(u² + v²))·(cos ω0u, sin ω0u)`. `v = None` means a real input.
pub fn gabor(g: &mut Graph, u: Var, v: Option<Var>, omega0: f64, scale: f64) -> Result<(Var, Var)> {
    let u2 = g.square(u)?;
    let mut exponent = g.scale(u2, -scale * scale)?;
    if let Some(v) = v {
        let v2 = g.square(v)?;
        let v2 = g.scale(v2, -scale * scale)?;
        let damp = g.scale(v, -omega0)?;
        exponent = g.add(exponent, v2)?;
        exponent = g.add(exponent, damp)?;
    }
    let env = g.exp(exponent)?;
    let phase = g.scale(u, omega0)?;
    let c = g.cos(phase)?;
    let s = g.sin(phase)?;
    Ok((g.mul(env, c)?, g.mul(env, s)?))
}

struct KanLayerFn {
    grid: SplineGrid,
    batch: usize,
    inputs: usize,
    outputs: usize,
    scale_spline: bool,
}

/// Per-row spline evaluation shared by the forward and backward kernels: input `p` has
/// `K1` nonzero basis values starting at basis index `span[p]`.
struct RowBasis<const K1: usize> {
    span: Vec<usize>,
    vals: Vec<[f64; K1]>,
    ders: Vec<[f64; K1]>,
}

impl<const K1: usize> RowBasis<K1> {
    fn new(ni: usize) -> Self {
        RowBasis {
            span: vec![0; ni],
            vals: vec![[0.0; K1]; ni],
            ders: vec![[0.0; K1]; ni],
        }
    }

    fn fill(&mut self, grid: &SplineGrid, row: &[f64], derivs: bool) {
        for (p, &xv) in row.iter().enumerate() {
            self.span[p] = if derivs {
                grid.local_basis_with_deriv(xv, &mut self.vals[p], &mut self.ders[p])
            } else {
                grid.local_basis(xv, &mut self.vals[p])
            };
        }
    }
}

/// Coefficients `[out×in×nb]` rearranged to `[in×nb×out]`, optionally multiplied by the
/// spline scale `w_s[q,p]`, so that each (input, basis) pair owns a contiguous row of
/// outputs.
fn to_input_major(coeffs: &[f64], ws: Option<&[f64]>, (ni, nb, no): (usize, usize, usize)) -> Vec<f64> {
    let mut out = vec![0.0; coeffs.len()];
    for q in 0..no {
        for p in 0..ni {
            let w = ws.map_or(1.0, |ws| ws[q * ni + p]);
            let src = &coeffs[(q * ni + p) * nb..(q * ni + p + 1) * nb];
            for (i, &c) in src.iter().enumerate() {
                out[(p * nb + i) * no + q] = c * w;
            }
        }
    }
    out
}

fn from_input_major(t: &[f64], (ni, nb, no): (usize, usize, usize)) -> Vec<f64> {
    let mut out = vec![0.0; t.len()];
    for p in 0..ni {
        for i in 0..nb {
            let row = &t[(p * nb + i) * no..(p * nb + i + 1) * no];
            for (q, &v) in row.iter().enumerate() {
                out[(q * ni + p) * nb + i] = v;
            }
        }
    }
    out
}

fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; a.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

fn kan_forward<const K1: usize>(
    grid: &SplineGrid,
    x: &[f64],
    (batch, ni, no): (usize, usize, usize),
    coef_t: &[f64],
    out: &mut [f64],
) {
    let nb = grid.num_basis();
    let mut rb = RowBasis::<K1>::new(ni);
    for b in 0..batch {
        rb.fill(grid, &x[b * ni..(b + 1) * ni], false);
        let orow = &mut out[b * no..(b + 1) * no];
        for p in 0..ni {
            let base = (p * nb + rb.span[p]) * no;
            let block = &coef_t[base..base + K1 * no];
            for (i, &v) in rb.vals[p].iter().enumerate() {
                for (o, &c) in orow.iter_mut().zip(&block[i * no..(i + 1) * no]) {
                    *o += v * c;
                }
            }
        }
    }
}

struct KanGrads {
    x: Vec<f64>,
    wb: Vec<f64>,
    ws: Vec<f64>,
    coeffs: Vec<f64>,
}

fn kan_backward<const K1: usize>(
    f: &KanLayerFn,
    x: &[f64],
    wb: &[f64],
    ws: Option<&[f64]>,
    coeffs: &[f64],
    gy: &[f64],
    need_x: bool,
) -> KanGrads {
    let (batch, ni, no, grid) = (f.batch, f.inputs, f.outputs, &f.grid);
    let nb = grid.num_basis();
    let dims = (ni, nb, no);
    let (lo, hi) = grid.domain();
    let raw_t = to_input_major(coeffs, None, dims);
    let scaled_t = ws.map(|w| to_input_major(coeffs, Some(w), dims));
    let scaled_t = scaled_t.as_deref().unwrap_or(&raw_t);
    let ws_t = ws.map(|w| transpose(w, no, ni));

    // base term: ∂w_b = gyᵀ·SiLU(x), ∂x += SiLU'(x)·(gy·w_b)
    let act: Vec<f64> = x.iter().map(|&v| silu(v)).collect();
    let mut gwb = vec![0.0; no * ni];
    matmul_into(&transpose(gy, batch, no), &act, &mut gwb, no, batch, ni);
    let mut gx = vec![0.0; if need_x { x.len() } else { 0 }];
    if need_x {
        matmul_into(gy, wb, &mut gx, batch, no, ni);
        for (g, &xv) in gx.iter_mut().zip(x) {
            *g *= silu_grad(xv);
        }
    }

    let mut gc_t = vec![0.0; coeffs.len()];
    let mut gws_t = vec![0.0; if ws.is_some() { ni * no } else { 0 }];
    let mut rb = RowBasis::<K1>::new(ni);
    let mut s = vec![0.0; no];
    let mut gyw = vec![0.0; no];
    for b in 0..batch {
        let row = &x[b * ni..(b + 1) * ni];
        let gyrow = &gy[b * no..(b + 1) * no];
        rb.fill(grid, row, need_x);
        for p in 0..ni {
            let base = (p * nb + rb.span[p]) * no;
            let v = &rb.vals[p];
            match &ws_t {
                Some(wst) => {
                    // ∂w_s[q,p] = gy_q·Σ_i c[q,p,i]·B_i
                    s.fill(0.0);
                    let block = &raw_t[base..base + K1 * no];
                    for (i, &vi) in v.iter().enumerate() {
                        for (sq, &c) in s.iter_mut().zip(&block[i * no..(i + 1) * no]) {
                            *sq += vi * c;
                        }
                    }
                    let gws = &mut gws_t[p * no..(p + 1) * no];
                    for ((g, &sq), &gq) in gws.iter_mut().zip(&s).zip(gyrow) {
                        *g += gq * sq;
                    }
                    for ((w, &gq), &sc) in gyw.iter_mut().zip(gyrow).zip(&wst[p * no..(p + 1) * no]) {
                        *w = gq * sc;
                    }
                }
                None => gyw.copy_from_slice(gyrow),
            }
            let gblock = &mut gc_t[base..base + K1 * no];
            for (i, &vi) in v.iter().enumerate() {
                for (g, &w) in gblock[i * no..(i + 1) * no].iter_mut().zip(&gyw) {
                    *g += vi * w;
                }
            }
            if need_x {
                let xv = row[p];
                if xv >= lo && xv <= hi {
                    let block = &scaled_t[base..base + K1 * no];
                    let mut acc = 0.0;
                    for (i, &di) in rb.ders[p].iter().enumerate() {
                        let dot: f64 = block[i * no..(i + 1) * no]
                            .iter()
                            .zip(gyrow)
                            .map(|(c, g)| c * g)
                            .sum();
                        acc += di * dot;
                    }
                    gx[b * ni + p] += acc;
                }
            }
        }
    }
    KanGrads {
        x: gx,
        wb: gwb,
        ws: if ws.is_some() {
            transpose(&gws_t, ni, no)
        } else {
            Vec::new()
        },
        coeffs: from_input_major(&gc_t, dims),
    }
}

macro_rules! dispatch_order {
    ($k1:expr, $f:ident, $($arg:expr),*) => {
        match $k1 {
            1 => $f::<1>($($arg),*),
            2 => $f::<2>($($arg),*),
            3 => $f::<3>($($arg),*),
            4 => $f::<4>($($arg),*),
            5 => $f::<5>($($arg),*),
            6 => $f::<6>($($arg),*),
            7 => $f::<7>($($arg),*),
            8 => $f::<8>($($arg),*),
            9 => $f::<9>($($arg),*),
            10 => $f::<10>($($arg),*),
            11 => $f::<11>($($arg),*),
            12 => $f::<12>($($arg),*),
            13 => $f::<13>($($arg),*),
            14 => $f::<14>($($arg),*),
            15 => $f::<15>($($arg),*),
            16 => $f::<16>($($arg),*),
            17 => $f::<17>($($arg),*),
            18 => $f::<18>($($arg),*),
            19 => $f::<19>($($arg),*),
            20 => $f::<20>($($arg),*),
            21 => $f::<21>($($arg),*),
            22 => $f::<22>($($arg),*),
            23 => $f::<23>($($arg),*),
            24 => $f::<24>($($arg),*),
            25 => $f::<25>($($arg),*),
            26 => $f::<26>($($arg),*),
            27 => $f::<27>($($arg),*),
            28 => $f::<28>($($arg),*),
            29 => $f::<29>($($arg),*),
            30 => $f::<30>($($arg),*),
            31 => $f::<31>($($arg),*),
            _ => unreachable!("spline order is bounded by MAX_ORDER"),
        }
    };
}

impl Function for KanLayerFn {
    fn name(&self) -> &'static str {
        "kan_layer"
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        grad: &Tensor,
        needs: &[bool],
    ) -> Vec<Option<Tensor>> {
        let x = inputs[0].data();
        let (wb, ws, coeffs) = if self.scale_spline {
            (inputs[1].data(), Some(inputs[2].data()), inputs[3].data())
        } else {
            (inputs[1].data(), None, inputs[2].data())
        };
        let k1 = self.grid.order() + 1;
        let g = dispatch_order!(k1, kan_backward, self, x, wb, ws, coeffs, grad.data(), needs[0]);
        let wrap =
            |need: bool, d: Vec<f64>, t: &Tensor| need.then(|| Tensor::new(t.shape().to_vec(), d).unwrap());
        let mut out = vec![wrap(needs[0], g.x, inputs[0]), wrap(needs[1], g.wb, inputs[1])];
        if self.scale_spline {
            out.push(wrap(needs[2], g.ws, inputs[2]));
            out.push(wrap(needs[3], g.coeffs, inputs[3]));
        } else {
            out.push(wrap(needs[2], g.coeffs, inputs[2]));
        }
        out
    }
}

/// One KAN layer: `y_q = Σ_p w_b[q,p]·SiLU(x_p) + w_s[q,p]·Σ_i c[q,p,i]·B_i(x_p)`.
///
/// `x [batch×in]`, `w_b [out×in]`, optional `w_s [out×in]`, `coeffs [out×in×(G+k)]`.
/// Spline inputs are clamped to the grid domain; SiLU sees the raw input.
pub fn kan_layer(
    g: &mut Graph,
    grid: &SplineGrid,
    x: Var,
    w_base: Var,
    w_spline: Option<Var>,
    coeffs: Var,
) -> Result<Var> {
    let xs = g.value(x);
    if xs.rank() != 2 {
        return Err(Error::Shape(format!(
            "kan layer input must be [batch×in], got {:?}",
            xs.shape()
        )));
    }
    let (batch, ni) = (xs.shape()[0], xs.shape()[1]);
    let wb = g.value(w_base);
    if wb.rank() != 2 || wb.shape()[1] != ni {
        return Err(Error::Shape(format!(
            "base weights {:?} do not match input width {ni}",
            wb.shape()
        )));
    }
    let no = wb.shape()[0];
    if let Some(ws) = w_spline {
        if g.shape(ws) != wb.shape() {
            return Err(Error::Shape(format!(
                "spline scale {:?} must match base weights {:?}",
                g.shape(ws),
                wb.shape()
            )));
        }
    }
    let nb = grid.num_basis();
    if g.value(coeffs).shape() != [no, ni, nb] {
        return Err(Error::Shape(format!(
            "spline coefficients {:?}, expected [{no}, {ni}, {nb}]",
            g.shape(coeffs)
        )));
    }

    let xd = xs.data();
    // base term as a matmul: SiLU(x)·w_bᵀ
    let act: Vec<f64> = xd.iter().map(|&v| silu(v)).collect();
    let wbd = g.value(w_base).data();
    let mut wbt = vec![0.0; ni * no];
    for q in 0..no {
        for p in 0..ni {
            wbt[p * no + q] = wbd[q * ni + p];
        }
    }
    let mut out = vec![0.0; batch * no];
    matmul_into(&act, &wbt, &mut out, batch, ni, no);
    let coef = to_input_major(
        g.value(coeffs).data(),
        w_spline.map(|v| g.value(v).data()),
        (ni, nb, no),
    );
    let k1 = grid.order() + 1;
    dispatch_order!(k1, kan_forward, grid, xd, (batch, ni, no), &coef, &mut out);

    let out = Tensor::new(vec![batch, no], out)?;
    let f = KanLayerFn {
        grid: grid.clone(),
        batch,
        inputs: ni,
        outputs: no,
        scale_spline: w_spline.is_some(),
    };
    match w_spline {
        Some(ws) => g.apply(&[x, w_base, ws, coeffs], out, f),
        None => g.apply(&[x, w_base, coeffs], out, f),
    }
}
