//! Monotone rational-quadratic splines on `[-bound, bound]` with identity tails.
//!
//! Each transformed coordinate reads `3B - 1` raw conditioner outputs laid out
//! as `[widths (B), heights (B), interior derivatives (B - 1)]`. Widths and
//! heights go through a softmax scaled to `2 * bound` with a floor; interior
//! derivatives through a softplus rescaled so a zero input gives slope 1.
//! Boundary derivatives are fixed at 1, so the map is C1 at the tails.
//!
//! The bin formulas are written as `input + correction`, where the correction
//! vanishes exactly for all-zero parameters; a fresh layer is then the
//! identity bit for bit, not just to rounding.
//!
//! The forward and inverse transforms are fused graph operations; their
//! backward passes differentiate the per-bin formula with a small forward-mode
//! dual over the seven bin-local quantities and chain through the knot
//! construction by hand.

use std::ops::{Add, Div, Mul, Sub};

use crate::autodiff::{sigmoid, softplus, CustomOp};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MIN_BIN_WIDTH: f64 = 1e-3;
pub const MIN_BIN_HEIGHT: f64 = 1e-3;
pub const MIN_DERIVATIVE: f64 = 1e-3;

/// Raw outputs consumed per transformed coordinate.
pub fn params_per_coord(bins: usize) -> usize {
    3 * bins - 1
}

// Interior derivative: 1 + (1 - min) * (softplus(v) / softplus(0) - 1).
fn derivative(v: f64) -> f64 {
    1.0 + (1.0 - MIN_DERIVATIVE) * (softplus(v) / softplus(0.0) - 1.0)
}

fn derivative_grad(v: f64) -> f64 {
    (1.0 - MIN_DERIVATIVE) * sigmoid(v) / softplus(0.0)
}

// Local variable slots of the per-bin formula.
const NL: usize = 7;
const X: usize = 0;
const XK: usize = 1;
const WK: usize = 2;
const YK: usize = 3;
const HK: usize = 4;
const DK: usize = 5;
const DK1: usize = 6;

trait Num:
    Copy + Add<Output = Self> + Sub<Output = Self> + Mul<Output = Self> + Div<Output = Self>
{
    fn c(v: f64) -> Self;
    fn ln(self) -> Self;
}

impl Num for f64 {
    fn c(v: f64) -> Self {
        v
    }
    fn ln(self) -> Self {
        f64::ln(self)
    }
}

#[derive(Clone, Copy, Debug)]
struct Dual {
    v: f64,
    d: [f64; NL],
}

impl Dual {
    fn var(v: f64, slot: usize) -> Self {
        let mut d = [0.0; NL];
        d[slot] = 1.0;
        Dual { v, d }
    }
}

impl Add for Dual {
    type Output = Dual;
    fn add(self, o: Dual) -> Dual {
        let mut d = self.d;
        for (a, b) in d.iter_mut().zip(o.d) {
            *a += b;
        }
        Dual { v: self.v + o.v, d }
    }
}

impl Sub for Dual {
    type Output = Dual;
    fn sub(self, o: Dual) -> Dual {
        let mut d = self.d;
        for (a, b) in d.iter_mut().zip(o.d) {
            *a -= b;
        }
        Dual { v: self.v - o.v, d }
    }
}

impl Mul for Dual {
    type Output = Dual;
    fn mul(self, o: Dual) -> Dual {
        let mut d = [0.0; NL];
        for i in 0..NL {
            d[i] = self.d[i] * o.v + self.v * o.d[i];
        }
        Dual { v: self.v * o.v, d }
    }
}

impl Div for Dual {
    type Output = Dual;
    fn div(self, o: Dual) -> Dual {
        let q = self.v / o.v;
        let mut d = [0.0; NL];
        for i in 0..NL {
            d[i] = (self.d[i] - q * o.d[i]) / o.v;
        }
        Dual { v: q, d }
    }
}

impl Num for Dual {
    fn c(v: f64) -> Self {
        Dual { v, d: [0.0; NL] }
    }
    fn ln(self) -> Self {
        let mut d = self.d;
        for a in &mut d {
            *a /= self.v;
        }
        Dual { v: self.v.ln(), d }
    }
}

/// Value and log-slope of the bin map at `x`.
fn rq<T: Num>(x: T, xk: T, wk: T, yk: T, hk: T, dk: T, dk1: T) -> (T, T) {
    let one = T::c(1.0);
    let two = T::c(2.0);
    let s = hk / wk;
    let xi = (x - xk) / wk;
    let om = one - xi;
    let xo = xi * om;
    let (a, b) = (dk - s, dk1 - s);
    let den = s + (a + b) * xo;
    // yk + hk (s xi^2 + dk xi om) / den, rearranged around x.
    let y = x + (yk - xk) + (s - one) * (x - xk) + hk * xo * (a * om - b * xi) / den;
    // s^2 (dk1 xi^2 + 2 s xi om + dk om^2) with xi + om = 1 used exactly.
    let num = s * s * (s + b * xi * xi + a * om * om);
    (y, num.ln() - two * den.ln())
}

/// Knot layout of one coordinate, rebuilt from its raw parameters.
#[derive(Default)]
struct Knots {
    xs: Vec<f64>,
    ws: Vec<f64>,
    pw: Vec<f64>,
    ys: Vec<f64>,
    hs: Vec<f64>,
    ph: Vec<f64>,
    ds: Vec<f64>,
    // Raw interior derivative inputs.
    dpre: Vec<f64>,
}

fn softmax_into(raw: &[f64], out: &mut Vec<f64>) {
    out.clear();
    let m = raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    out.extend(raw.iter().map(|v| (v - m).exp()));
    let s: f64 = out.iter().sum();
    for v in out.iter_mut() {
        *v /= s;
    }
}

fn sizes_into(p: &[f64], min: f64, bound: f64, sizes: &mut Vec<f64>, edges: &mut Vec<f64>) {
    let b = p.len() as f64;
    sizes.clear();
    sizes.extend(p.iter().map(|q| 2.0 * bound * (min + (1.0 - b * min) * q)));
    edges.clear();
    let mut acc = -bound;
    edges.push(acc);
    for s in sizes.iter() {
        acc += s;
        edges.push(acc);
    }
    *edges.last_mut().unwrap() = bound;
}

impl Knots {
    fn fill(&mut self, raw: &[f64], bins: usize, bound: f64) {
        let (uw, rest) = raw.split_at(bins);
        let (uh, ud) = rest.split_at(bins);
        softmax_into(uw, &mut self.pw);
        softmax_into(uh, &mut self.ph);
        sizes_into(&self.pw, MIN_BIN_WIDTH, bound, &mut self.ws, &mut self.xs);
        sizes_into(&self.ph, MIN_BIN_HEIGHT, bound, &mut self.hs, &mut self.ys);
        self.dpre.clear();
        self.dpre.extend_from_slice(ud);
        self.ds.clear();
        self.ds.push(1.0);
        self.ds.extend(ud.iter().map(|&v| derivative(v)));
        self.ds.push(1.0);
    }

    fn locals(&self, k: usize) -> [f64; 6] {
        [
            self.xs[k],
            self.ws[k],
            self.ys[k],
            self.hs[k],
            self.ds[k],
            self.ds[k + 1],
        ]
    }
}

/// Bin index with `edges[k] <= v`, clamped to the valid range.
fn locate(edges: &[f64], v: f64) -> usize {
    let bins = edges.len() - 1;
    let k = edges.partition_point(|&e| e <= v);
    k.saturating_sub(1).min(bins - 1)
}

fn inside(v: f64, bound: f64) -> bool {
    v >= -bound && v <= bound
}

fn forward_scalar(kn: &Knots, x: f64, bound: f64) -> (f64, f64) {
    if !inside(x, bound) {
        return (x, 0.0);
    }
    let k = locate(&kn.xs, x);
    let [xk, wk, yk, hk, dk, dk1] = kn.locals(k);
    rq(x, xk, wk, yk, hk, dk, dk1)
}

fn inverse_solve(kn: &Knots, y: f64, k: usize) -> f64 {
    let [xk, wk, yk, hk, dk, dk1] = kn.locals(k);
    let s = hk / wk;
    let dy = y - yk;
    let t = dk1 + dk - 2.0 * s;
    let a = hk * (s - dk) + dy * t;
    let b = hk * dk - dy * t;
    let c = -s * dy;
    let r = (b * b - 4.0 * a * c).max(0.0).sqrt();
    if b < 0.0 && a != 0.0 {
        // Conjugate root form; `b + r` would cancel here.
        let xi = (r - b) / (2.0 * a);
        return xk + xi.clamp(0.0, 1.0) * wk;
    }
    let xi = 2.0 * s * dy / (b + r);
    if (0.0..=1.0).contains(&xi) {
        // xk + xi wk, rearranged around y; uses s wk = hk.
        y + (xk - yk) + dy * (2.0 * hk - b - r) / (b + r)
    } else {
        xk + xi.clamp(0.0, 1.0) * wk
    }
}

fn inverse_scalar(kn: &Knots, y: f64, bound: f64) -> (f64, f64) {
    if !inside(y, bound) {
        return (y, 0.0);
    }
    let k = locate(&kn.ys, y);
    let x = inverse_solve(kn, y, k);
    let [xk, wk, yk, hk, dk, dk1] = kn.locals(k);
    let (_, l) = rq(x, xk, wk, yk, hk, dk, dk1);
    (x, -l)
}

/// Dual evaluation at bin `k`: derivatives of value and log-slope with
/// respect to `x` and the six bin-local quantities.
fn local_grads(kn: &Knots, x: f64, k: usize) -> (Dual, Dual) {
    let [xk, wk, yk, hk, dk, dk1] = kn.locals(k);
    rq(
        Dual::var(x, X),
        Dual::var(xk, XK),
        Dual::var(wk, WK),
        Dual::var(yk, YK),
        Dual::var(hk, HK),
        Dual::var(dk, DK),
        Dual::var(dk1, DK1),
    )
}

/// Pulls adjoints of the bin-local quantities back to the raw parameters.
fn chain_to_raw(kn: &Knots, k: usize, adj: &[f64; NL], bins: usize, bound: f64, out: &mut [f64]) {
    let (gw, rest) = out.split_at_mut(bins);
    let (gh, gd) = rest.split_at_mut(bins);
    softmax_pullback(&kn.pw, k, adj[XK], adj[WK], MIN_BIN_WIDTH, bound, gw);
    softmax_pullback(&kn.ph, k, adj[YK], adj[HK], MIN_BIN_HEIGHT, bound, gh);
    for (slot, idx) in [(DK, k), (DK1, k + 1)] {
        if idx >= 1 && idx < bins {
            gd[idx - 1] += adj[slot] * derivative_grad(kn.dpre[idx - 1]);
        }
    }
}

/// Adjoint of `(edge_k, size_k)` mapped through cumulative sums and the
/// scaled softmax back to the raw logits.
fn softmax_pullback(p: &[f64], k: usize, adj_edge: f64, adj_size: f64, min: f64, bound: f64, out: &mut [f64]) {
    let b = p.len();
    let scale = 2.0 * bound * (1.0 - b as f64 * min);
    // Adjoint on each size: edge_k = -bound + sum_{j<k} size_j.
    let adj_sizes = |j: usize| -> f64 {
        let mut a = 0.0;
        if j < k {
            a += adj_edge;
        }
        if j == k {
            a += adj_size;
        }
        a * scale
    };
    let dot: f64 = (0..b).map(|j| p[j] * adj_sizes(j)).sum();
    for i in 0..b {
        out[i] += p[i] * (adj_sizes(i) - dot);
    }
}

fn check_inputs(op: &'static str, x: &Tensor, raw: &Tensor, bins: usize) -> Result<(usize, usize)> {
    if x.rank() != 2 || raw.rank() != 2 || x.rows() != raw.rows() {
        return Err(Error::shape(op, format!("{:?} with params {:?}", x.shape(), raw.shape())));
    }
    let m = x.cols();
    if raw.cols() != m * params_per_coord(bins) {
        return Err(Error::shape(
            op,
            format!("{} coordinates need {} params, got {}", m, m * params_per_coord(bins), raw.cols()),
        ));
    }
    Ok((x.rows(), m))
}

/// Forward or inverse spline evaluation, output `[n, 2m]` = (values, log-slopes).
/// For the inverse the log-slope column holds the inverse map's log-slope.
pub fn spline_eval(x: &Tensor, raw: &Tensor, bins: usize, bound: f64, inverse: bool) -> Result<Tensor> {
    let op = if inverse { "rq_spline_inverse" } else { "rq_spline" };
    if bins < 1 || !(bound > 0.0) {
        return Err(Error::invalid(format!("spline needs bins >= 1 and bound > 0, got {} {}", bins, bound)));
    }
    let (n, m) = check_inputs(op, x, raw, bins)?;
    let pc = params_per_coord(bins);
    let mut out = vec![0.0; n * 2 * m];
    let mut kn = Knots::default();
    for r in 0..n {
        let xr = x.row(r);
        let pr = raw.row(r);
        for j in 0..m {
            kn.fill(&pr[j * pc..(j + 1) * pc], bins, bound);
            let (v, l) = if inverse {
                inverse_scalar(&kn, xr[j], bound)
            } else {
                forward_scalar(&kn, xr[j], bound)
            };
            out[r * 2 * m + j] = v;
            out[r * 2 * m + m + j] = l;
        }
    }
    Ok(Tensor::from_parts(vec![n, 2 * m], out))
}

/// Backward rule of the fused spline transform.
pub struct SplineOp {
    pub bins: usize,
    pub bound: f64,
    pub inverse: bool,
}

impl CustomOp for SplineOp {
    fn name(&self) -> &'static str {
        if self.inverse {
            "rq_spline_inverse"
        } else {
            "rq_spline"
        }
    }

    fn backward(&self, grad_out: &Tensor, inputs: &[&Tensor], needs: &[bool]) -> Result<Vec<Option<Tensor>>> {
        let (x, raw) = (inputs[0], inputs[1]);
        let (n, m) = check_inputs(self.name(), x, raw, self.bins)?;
        let pc = params_per_coord(self.bins);
        let mut gx = vec![0.0; n * m];
        let mut gp = vec![0.0; n * m * pc];
        let mut kn = Knots::default();
        for r in 0..n {
            let xr = x.row(r);
            let pr = raw.row(r);
            let gr = grad_out.row(r);
            for j in 0..m {
                let (g_val, g_log) = (gr[j], gr[m + j]);
                let v = xr[j];
                if !inside(v, self.bound) {
                    gx[r * m + j] = g_val;
                    continue;
                }
                kn.fill(&pr[j * pc..(j + 1) * pc], self.bins, self.bound);
                let mut adj = [0.0; NL];
                if self.inverse {
                    let k = locate(&kn.ys, v);
                    let xs = inverse_solve(&kn, v, k);
                    let (yd, ld) = local_grads(&kn, xs, k);
                    let fx = yd.d[X];
                    let lx = ld.d[X];
                    gx[r * m + j] = (g_val - g_log * lx) / fx;
                    for s in 1..NL {
                        let dxdp = -yd.d[s] / fx;
                        let dndp = -(lx * dxdp + ld.d[s]);
                        adj[s] = g_val * dxdp + g_log * dndp;
                    }
                    chain_to_raw(&kn, k, &adj, self.bins, self.bound, &mut gp[(r * m + j) * pc..(r * m + j + 1) * pc]);
                } else {
                    let k = locate(&kn.xs, v);
                    let (yd, ld) = local_grads(&kn, v, k);
                    for s in 0..NL {
                        adj[s] = g_val * yd.d[s] + g_log * ld.d[s];
                    }
                    gx[r * m + j] = adj[X];
                    chain_to_raw(&kn, k, &adj, self.bins, self.bound, &mut gp[(r * m + j) * pc..(r * m + j + 1) * pc]);
                }
            }
        }
        Ok(vec![
            needs[0].then(|| Tensor::from_parts(vec![n, m], gx)),
            needs[1].then(|| Tensor::from_parts(vec![n, m * pc], gp)),
        ])
    }
}
