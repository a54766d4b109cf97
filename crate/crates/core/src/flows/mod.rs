//! Invertible coupling layers and their composition into trajectories.
//!
//! A [`FlowStack`] is a list of [`LayerSpec`]s. Permutation layers do not move
//! points: they only relabel coordinates, so the stack folds them into the
//! index maps of the couplings that follow and keeps every intermediate in the
//! canonical coordinate frame. The transport steps of a stack are therefore
//! exactly its couplings, and `F_0 = id, F_k = f_k(F_{k-1})` for `k = 1..=K`.
//! A learned linear layer declared right after a coupling belongs to that
//! coupling's step.

pub mod linear;
mod mlp;
pub mod spline;

use std::ops::Range;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub use mlp::{Activation, Mlp};
use spline::{params_per_coord, spline_eval, SplineOp};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum CouplingKind {
    /// `y = x * exp(s) + t`; with `clamp = Some(c)` the scale is `c * tanh(s / c)`.
    Affine { clamp: Option<f64> },
    Spline { bins: usize, bound: f64 },
}

impl CouplingKind {
    fn outputs_per_coord(&self) -> usize {
        match self {
            CouplingKind::Affine { .. } => 2,
            CouplingKind::Spline { bins, .. } => params_per_coord(*bins),
        }
    }

    fn validate(&self) -> Result<()> {
        match *self {
            CouplingKind::Affine { clamp: Some(c) } if !(c > 0.0) => {
                Err(Error::invalid(format!("affine clamp must be > 0, got {}", c)))
            }
            CouplingKind::Spline { bins, bound } if bins < 1 || !(bound > 0.0) => Err(Error::invalid(format!(
                "spline needs bins >= 1 and bound > 0, got {} and {}",
                bins, bound
            ))),
            _ => Ok(()),
        }
    }
}

/// One layer as declared, in the layer's own coordinate frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "layer", rename_all = "snake_case")]
pub enum LayerSpec {
    /// Coordinates `< split` condition, the rest are transformed.
    Coupling {
        split: usize,
        kind: CouplingKind,
        hidden: Vec<usize>,
        activation: Activation,
    },
    /// `y[i] = x[perm[i]]`.
    Permutation { perm: Vec<usize> },
    /// Learned invertible linear map in canonical coordinates; joins the
    /// preceding coupling's step.
    Linear,
}

/// Default split point: `ceil(d / 2)`, except that a 1-d coupling transforms
/// its only coordinate with a constant conditioner.
pub fn default_split(dim: usize) -> usize {
    if dim == 1 {
        0
    } else {
        dim.div_ceil(2)
    }
}

pub fn reversal(dim: usize) -> Vec<usize> {
    (0..dim).rev().collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowConfig {
    pub dim: usize,
    /// Number of coupling layers `K`.
    pub steps: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub kind: CouplingKind,
    /// Follow every coupling with a learned linear layer.
    #[serde(default)]
    pub linear: bool,
}

impl FlowConfig {
    /// Couplings at the default split, each optionally followed by a linear
    /// layer, with a reversal between consecutive steps.
    pub fn layer_specs(&self) -> Vec<LayerSpec> {
        let mut out = Vec::new();
        for k in 0..self.steps {
            if k > 0 && self.dim > 1 {
                out.push(LayerSpec::Permutation {
                    perm: reversal(self.dim),
                });
            }
            out.push(LayerSpec::Coupling {
                split: default_split(self.dim),
                kind: self.kind.clone(),
                hidden: self.hidden.clone(),
                activation: self.activation,
            });
            if self.linear {
                out.push(LayerSpec::Linear);
            }
        }
        out
    }
}

/// Coordinate permutation as a standalone layer. Inside a stack it is folded away.
#[derive(Debug, Clone, PartialEq)]
pub struct PermutationLayer {
    perm: Vec<usize>,
    inv: Vec<usize>,
}

impl PermutationLayer {
    pub fn new(perm: Vec<usize>) -> Result<Self> {
        let d = perm.len();
        let mut inv = vec![usize::MAX; d];
        for (i, &p) in perm.iter().enumerate() {
            if p >= d || inv[p] != usize::MAX {
                return Err(Error::invalid(format!("{:?} is not a permutation", perm)));
            }
            inv[p] = i;
        }
        Ok(PermutationLayer { perm, inv })
    }

    pub fn perm(&self) -> &[usize] {
        &self.perm
    }

    /// Returns the permuted batch and its (zero) log-determinant.
    pub fn forward(&self, x: &Tensor) -> (Tensor, Vec<f64>) {
        (permute_cols(x, &self.perm), vec![0.0; x.rows()])
    }

    pub fn inverse(&self, y: &Tensor) -> (Tensor, Vec<f64>) {
        (permute_cols(y, &self.inv), vec![0.0; y.rows()])
    }
}

fn permute_cols(x: &Tensor, idx: &[usize]) -> Tensor {
    let rows: Vec<Vec<f64>> = (0..x.rows())
        .map(|r| idx.iter().map(|&j| x.get2(r, j)).collect())
        .collect();
    Tensor::matrix(x.rows(), idx.len(), rows.concat()).expect("permutation keeps shape")
}

/// A coupling with its index maps resolved to canonical coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct CouplingLayer {
    pub cond: Vec<usize>,
    pub trans: Vec<usize>,
    pub kind: CouplingKind,
    pub net: Mlp,
    params: Range<usize>,
    // Maps canonical column -> column of [cond, trans]; None when already in order.
    assemble: Option<Vec<usize>>,
}

fn gather(g: &mut Graph, x: Var, idx: &[usize]) -> Result<Var> {
    let contiguous = idx.windows(2).all(|w| w[1] == w[0] + 1);
    if contiguous && !idx.is_empty() {
        if idx[0] == 0 && idx.len() == g.value(x).cols() {
            return Ok(x);
        }
        g.slice_cols(x, idx[0], idx.len())
    } else {
        g.gather_cols(x, idx)
    }
}

impl CouplingLayer {
    pub fn param_range(&self) -> Range<usize> {
        self.params.clone()
    }

    /// Applies the layer (or its inverse), returning the output batch and the
    /// per-sample log-determinant of the applied map.
    pub fn apply(&self, g: &mut Graph, params: &[Var], x: Var, inverse: bool) -> Result<(Var, Var)> {
        let m = self.trans.len();
        let xc = gather(g, x, &self.cond)?;
        let xt = gather(g, x, &self.trans)?;
        let h = self.net.forward(g, params, xc)?;
        let (yt, ld) = match self.kind {
            CouplingKind::Affine { clamp } => {
                let st = g.split(h, &[m, m])?;
                let s = match clamp {
                    Some(c) => {
                        let r = g.scale(st[0], 1.0 / c)?;
                        let r = g.tanh(r)?;
                        g.scale(r, c)?
                    }
                    None => st[0],
                };
                let sum_s = g.sum_last(s)?;
                if inverse {
                    let shifted = g.sub(xt, st[1])?;
                    let neg = g.scale(s, -1.0)?;
                    let e = g.exp(neg)?;
                    (g.mul(shifted, e)?, g.scale(sum_s, -1.0)?)
                } else {
                    let e = g.exp(s)?;
                    let scaled = g.mul(xt, e)?;
                    (g.add(scaled, st[1])?, sum_s)
                }
            }
            CouplingKind::Spline { bins, bound } => {
                let out = spline_eval(g.value(xt), g.value(h), bins, bound, inverse)?;
                let fused = g.custom(&[xt, h], out, Box::new(SplineOp { bins, bound, inverse }))?;
                let parts = g.split(fused, &[m, m])?;
                (parts[0], g.sum_last(parts[1])?)
            }
        };
        let y = if self.cond.is_empty() {
            yt
        } else {
            let joined = g.concat(&[xc, yt])?;
            match &self.assemble {
                Some(idx) => g.gather_cols(joined, idx)?,
                None => joined,
            }
        };
        Ok((y, ld))
    }
}

/// States `F_0..F_K` (or `G_0..G_K` for the inverse direction) and the
/// log-determinant of each step in application order.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub states: Vec<Var>,
    pub logdets: Vec<Var>,
}

impl Trajectory {
    pub fn last(&self) -> Var {
        *self.states.last().expect("trajectory has at least the initial state")
    }

    /// Sum of the step log-determinants, `[n]`.
    pub fn total_logdet(&self, g: &mut Graph) -> Result<Var> {
        self.cumulative_logdet(g, self.logdets.len())
    }

    /// Log-determinant of the first `k` steps.
    pub fn cumulative_logdet(&self, g: &mut Graph, k: usize) -> Result<Var> {
        if k == 0 {
            let n = g.value(self.states[0]).rows();
            return Ok(g.constant(Tensor::zeros(&[n])));
        }
        let mut acc = self.logdets[0];
        for &l in &self.logdets[1..k] {
            acc = g.add(acc, l)?;
        }
        Ok(acc)
    }
}

/// Numeric states and total log-determinant of a trajectory.
#[derive(Debug, Clone)]
pub struct Evaluated {
    pub states: Vec<Tensor>,
    pub logdet: Vec<f64>,
}

impl Evaluated {
    pub fn last(&self) -> &Tensor {
        self.states.last().expect("at least one state")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowStack {
    dim: usize,
    specs: Vec<LayerSpec>,
    couplings: Vec<CouplingLayer>,
    // Parameter range of the linear layer of each step, if any.
    linears: Vec<Option<Range<usize>>>,
    params: Vec<Tensor>,
}

impl FlowStack {
    pub fn from_config(cfg: &FlowConfig, rng: &mut Rng) -> Result<Self> {
        if cfg.steps == 0 {
            return Err(Error::invalid("flow needs at least one step"));
        }
        Self::new(cfg.dim, cfg.layer_specs(), rng)
    }

    /// Builds a stack with freshly initialized (identity) couplings.
    pub fn new(dim: usize, specs: Vec<LayerSpec>, rng: &mut Rng) -> Result<Self> {
        let (couplings, linears) = Self::resolve(dim, &specs)?;
        let mut params = Vec::new();
        for (c, l) in couplings.iter().zip(&linears) {
            params.extend(c.net.init(rng));
            if l.is_some() {
                params.extend(linear::param_shapes(dim).iter().map(|s| Tensor::zeros(s)));
            }
        }
        Ok(FlowStack {
            dim,
            specs,
            couplings,
            linears,
            params,
        })
    }

    /// Builds a stack from declared layers and a flat parameter list.
    pub fn with_params(dim: usize, specs: Vec<LayerSpec>, params: Vec<Tensor>) -> Result<Self> {
        let (couplings, linears) = Self::resolve(dim, &specs)?;
        let mut s = FlowStack {
            dim,
            specs,
            couplings,
            linears,
            params: Vec::new(),
        };
        s.set_params(params)?;
        Ok(s)
    }

    #[allow(clippy::type_complexity)]
    fn resolve(dim: usize, specs: &[LayerSpec]) -> Result<(Vec<CouplingLayer>, Vec<Option<Range<usize>>>)> {
        if dim == 0 {
            return Err(Error::invalid("flow dimension must be >= 1"));
        }
        let mut frame: Vec<usize> = (0..dim).collect();
        let mut out = Vec::new();
        let mut linears: Vec<Option<Range<usize>>> = Vec::new();
        let mut offset = 0;
        for spec in specs {
            match spec {
                LayerSpec::Linear => {
                    match linears.last_mut() {
                        None => return Err(Error::invalid("a linear layer must follow a coupling")),
                        Some(Some(_)) => return Err(Error::invalid("at most one linear layer per coupling")),
                        Some(slot) => *slot = Some(offset..offset + linear::PARAM_NAMES.len()),
                    }
                    offset += linear::PARAM_NAMES.len();
                }
                LayerSpec::Permutation { perm } => {
                    if perm.len() != dim {
                        return Err(Error::invalid(format!("permutation of length {} in dimension {}", perm.len(), dim)));
                    }
                    PermutationLayer::new(perm.clone())?;
                    frame = perm.iter().map(|&i| frame[i]).collect();
                }
                LayerSpec::Coupling {
                    split,
                    kind,
                    hidden,
                    activation,
                } => {
                    kind.validate()?;
                    let ok = if dim == 1 { *split == 0 } else { *split >= 1 && *split < dim };
                    if !ok {
                        return Err(Error::invalid(format!("split {} invalid in dimension {}", split, dim)));
                    }
                    let cond = frame[..*split].to_vec();
                    let trans = frame[*split..].to_vec();
                    let net = Mlp::new(cond.len(), hidden, trans.len() * kind.outputs_per_coord(), *activation);
                    let n = net.param_count();
                    let order: Vec<usize> = cond.iter().chain(&trans).copied().collect();
                    let mut inv = vec![0; dim];
                    for (pos, &c) in order.iter().enumerate() {
                        inv[c] = pos;
                    }
                    let assemble = (inv.iter().enumerate().any(|(i, &p)| i != p)).then_some(inv);
                    out.push(CouplingLayer {
                        cond,
                        trans,
                        kind: kind.clone(),
                        net,
                        params: offset..offset + n,
                        assemble,
                    });
                    linears.push(None);
                    offset += n;
                }
            }
        }
        Ok((out, linears))
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Number of transport steps `K` (couplings).
    pub fn steps(&self) -> usize {
        self.couplings.len()
    }

    pub fn specs(&self) -> &[LayerSpec] {
        &self.specs
    }

    pub fn coupling(&self, k: usize) -> &CouplingLayer {
        &self.couplings[k]
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn set_params(&mut self, params: Vec<Tensor>) -> Result<()> {
        let expected: usize = self.couplings.iter().map(|c| c.params.len()).sum::<usize>()
            + self.linears.iter().flatten().map(|r| r.len()).sum::<usize>();
        if params.len() != expected {
            return Err(Error::shape("flow_params", format!("expected {} tensors, got {}", expected, params.len())));
        }
        for c in &self.couplings {
            c.net.check_params(&params[c.params.clone()])?;
        }
        for r in self.linears.iter().flatten() {
            linear::check_params(self.dim, &params[r.clone()])?;
        }
        self.params = params;
        Ok(())
    }

    /// Human-readable name of parameter tensor `idx`, e.g. `coupling2.w1`.
    pub fn param_name(&self, idx: usize) -> String {
        for (k, c) in self.couplings.iter().enumerate() {
            if c.params.contains(&idx) {
                let local = idx - c.params.start;
                let kind = if local % 2 == 0 { "w" } else { "b" };
                return format!("coupling{}.{}{}", k, kind, local / 2);
            }
            if let Some(r) = &self.linears[k] {
                if r.contains(&idx) {
                    return format!("linear{}.{}", k, linear::PARAM_NAMES[idx - r.start]);
                }
            }
        }
        format!("param{}", idx)
    }

    /// Overwrites every parameter with uniform noise in `[-scale, scale]`,
    /// giving a non-trivial map for checks.
    pub fn randomize(&mut self, rng: &mut Rng, scale: f64) {
        for p in &mut self.params {
            for v in p.data_mut() {
                *v = rng.random_range(-scale..scale);
            }
        }
    }

    pub fn scalar_param_count(&self) -> usize {
        self.params.iter().map(|p| p.len()).sum()
    }

    /// Registers the parameters as trainable leaves.
    pub fn bind(&self, g: &mut Graph) -> Vec<Var> {
        self.params.iter().map(|p| g.variable(p.clone())).collect()
    }

    pub fn bind_constant(&self, g: &mut Graph) -> Vec<Var> {
        self.params.iter().map(|p| g.constant(p.clone())).collect()
    }

    fn check_batch(&self, t: &Tensor) -> Result<()> {
        if t.rank() != 2 || t.cols() != self.dim {
            return Err(Error::shape("flow", format!("dimension {} given batch {:?}", self.dim, t.shape())));
        }
        Ok(())
    }

    /// Applies step `k` (0-based coupling index) or its inverse.
    pub fn step(&self, g: &mut Graph, params: &[Var], k: usize, x: Var, inverse: bool) -> Result<(Var, Var)> {
        if self.linears[k].is_none() {
            return self.coupling_step(g, params, k, x, inverse);
        }
        if inverse {
            let (u, l1) = self.linear_step(g, params, k, x, true)?;
            let (y, l2) = self.coupling_step(g, params, k, u, true)?;
            Ok((y, g.add(l1, l2)?))
        } else {
            let (u, l1) = self.coupling_step(g, params, k, x, false)?;
            let (y, l2) = self.linear_step(g, params, k, u, false)?;
            Ok((y, g.add(l1, l2)?))
        }
    }

    /// The coupling part of step `k` alone.
    pub fn coupling_step(&self, g: &mut Graph, params: &[Var], k: usize, x: Var, inverse: bool) -> Result<(Var, Var)> {
        let c = &self.couplings[k];
        c.apply(g, &params[c.params.clone()], x, inverse)
    }

    /// The linear part of step `k`; identity when the step has none.
    pub fn linear_step(&self, g: &mut Graph, params: &[Var], k: usize, x: Var, inverse: bool) -> Result<(Var, Var)> {
        match &self.linears[k] {
            Some(r) => linear::apply(g, &params[r.clone()], x, inverse),
            None => {
                let n = g.value(x).rows();
                Ok((x, g.constant(Tensor::zeros(&[n]))))
            }
        }
    }

    /// Matrix `M` of step `k`'s linear layer (`y = x M + b`).
    pub fn linear_matrix(&self, k: usize) -> Option<Tensor> {
        self.linears[k].as_ref().map(|r| linear::matrix_value(&self.params[r.clone()]))
    }

    pub fn forward(&self, g: &mut Graph, params: &[Var], z: Var) -> Result<Trajectory> {
        self.check_batch(g.value(z))?;
        let mut states = vec![z];
        let mut logdets = Vec::with_capacity(self.steps());
        for k in 0..self.steps() {
            let (y, ld) = self.step(g, params, k, states[k], false)?;
            states.push(y);
            logdets.push(ld);
        }
        Ok(Trajectory { states, logdets })
    }

    /// Inverse trajectory `G_0 = x, G_j = f_{K-j+1}^{-1}(G_{j-1})`.
    pub fn inverse(&self, g: &mut Graph, params: &[Var], x: Var) -> Result<Trajectory> {
        self.check_batch(g.value(x))?;
        let mut states = vec![x];
        let mut logdets = Vec::with_capacity(self.steps());
        for (j, k) in (0..self.steps()).rev().enumerate() {
            let (y, ld) = self.step(g, params, k, states[j], true)?;
            states.push(y);
            logdets.push(ld);
        }
        Ok(Trajectory { states, logdets })
    }

    fn eval(&self, x: &Tensor, inverse: bool) -> Result<Evaluated> {
        let mut g = Graph::new();
        let p = self.bind_constant(&mut g);
        let v = g.constant(x.clone());
        let tr = if inverse { self.inverse(&mut g, &p, v)? } else { self.forward(&mut g, &p, v)? };
        let ld = tr.total_logdet(&mut g)?;
        Ok(Evaluated {
            states: tr.states.iter().map(|&s| g.value(s).clone()).collect(),
            logdet: g.value(ld).data().to_vec(),
        })
    }

    pub fn forward_eval(&self, z: &Tensor) -> Result<Evaluated> {
        self.eval(z, false)
    }

    pub fn inverse_eval(&self, x: &Tensor) -> Result<Evaluated> {
        self.eval(x, true)
    }

    /// Numeric single-step evaluation: output batch and per-sample log-det.
    pub fn step_eval(&self, k: usize, x: &Tensor, inverse: bool) -> Result<(Tensor, Vec<f64>)> {
        self.check_batch(x)?;
        let mut g = Graph::new();
        let p = self.bind_constant(&mut g);
        let v = g.constant(x.clone());
        let (y, ld) = self.step(&mut g, &p, k, v, inverse)?;
        Ok((g.value(y).clone(), g.value(ld).data().to_vec()))
    }
}
