//! Adam optimization loops for MFG problems and regularized density estimation.
//!
//! Every iteration draws its randomness from `rng::stream(seed, iteration)`,
//! so a run restored from a checkpoint continues exactly as an uninterrupted one.

use std::time::Instant;

use log::{info, warn};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::analysis::{lipschitz_report, LipschitzReport, PowerIteration};
use crate::autodiff::{Graph, Var};
use crate::densities::DensitySpec;
use crate::error::{Error, Result};
use crate::flows::FlowStack;
use crate::objectives::{nf_objective, terminal_nll, total_objective, CostBreakdown, MfgProblem};
use crate::rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schedule {
    Constant,
    /// Cosine decay from `lr` to `lr_final` over the run.
    Cosine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub lr_final: f64,
    pub schedule: Schedule,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch: usize,
    pub iterations: u64,
    pub seed: u64,
    pub eval_interval: u64,
    /// 0 disables periodic checkpoints.
    pub checkpoint_interval: u64,
    pub clip_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            lr_final: 1e-5,
            schedule: Schedule::Cosine,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch: 512,
            iterations: 20_000,
            seed: 0,
            eval_interval: 100,
            checkpoint_interval: 0,
            clip_norm: Some(10.0),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !(self.lr_final > 0.0) {
            return Err(Error::Config("learning rates must be > 0".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        if !(self.eps > 0.0) {
            return Err(Error::Config("Adam eps must be > 0".into()));
        }
        if self.batch < 1 {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        if self.eval_interval < 1 {
            return Err(Error::Config("eval interval must be >= 1".into()));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(Error::Config("clip norm must be > 0".into()));
            }
        }
        Ok(())
    }

    /// Learning rate at iteration `t` of `total`.
    pub fn lr_at(&self, t: u64, total: u64) -> f64 {
        match self.schedule {
            Schedule::Constant => self.lr,
            Schedule::Cosine => {
                let frac = if total <= 1 { 0.0 } else { t as f64 / (total - 1) as f64 };
                self.lr_final + 0.5 * (self.lr - self.lr_final) * (1.0 + (std::f64::consts::PI * frac).cos())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimState {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl OptimState {
    pub fn new(params: &[Tensor]) -> Self {
        OptimState {
            step: 0,
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
        }
    }
}

/// One Adam update with bias correction. Gradients are clipped to the global
/// norm `cfg.clip_norm` before entering the moments. A non-finite gradient
/// leaves everything untouched and reports the index of the offending tensor.
pub fn adam_step(params: &mut [Tensor], grads: &[Tensor], state: &mut OptimState, cfg: &TrainConfig, lr: f64) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::invalid(format!(
            "{} parameters, {} gradients, {} moment buffers",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || p.shape() != state.m[i].shape() {
            return Err(Error::shape("adam", format!("parameter {} is {:?}, gradient {:?}", i, p.shape(), g.shape())));
        }
        if g.first_non_finite().is_some() {
            return Err(Error::NonFiniteGradient {
                iteration: state.step,
                param: format!("param{}", i),
            });
        }
    }
    let norm = grads.iter().map(|g| g.data().iter().map(|v| v * v).sum::<f64>()).sum::<f64>().sqrt();
    let clip = match cfg.clip_norm {
        Some(c) if norm > c => c / norm,
        _ => 1.0,
    };
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (i, p) in params.iter_mut().enumerate() {
        let (m, v) = (state.m[i].data_mut(), state.v[i].data_mut());
        for (j, (w, &g)) in p.data_mut().iter_mut().zip(grads[i].data()).enumerate() {
            let g = g * clip;
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g;
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g * g;
            let mh = m[j] / bc1;
            let vh = v[j] / bc2;
            *w -= lr * mh / (vh.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

/// Resumable state of an MFG run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    /// Number of completed iterations.
    pub iteration: u64,
    pub stacks: Vec<FlowStack>,
    pub optim: OptimState,
}

impl TrainState {
    pub fn new(stacks: Vec<FlowStack>) -> Self {
        let flat: Vec<Tensor> = stacks.iter().flat_map(|s| s.params().iter().cloned()).collect();
        TrainState {
            iteration: 0,
            stacks,
            optim: OptimState::new(&flat),
        }
    }

    fn param_name(&self, flat: usize) -> String {
        let mut idx = flat;
        for (i, s) in self.stacks.iter().enumerate() {
            if idx < s.params().len() {
                return format!("stack{}.{}", i, s.param_name(idx));
            }
            idx -= s.params().len();
        }
        format!("param{}", flat)
    }
}

/// One row of the cost history.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostRecord {
    pub costs: CostBreakdown,
    pub wall_ms: f64,
}

/// Hooks for streaming progress out of a training loop.
pub trait Observer {
    fn on_record(&mut self, _row: &CostRecord) -> Result<()> {
        Ok(())
    }

    fn on_checkpoint(&mut self, _state: &TrainState) -> Result<()> {
        Ok(())
    }

    fn on_epoch(&mut self, _row: &NfRecord, _lipschitz: Option<&LipschitzReport>) -> Result<()> {
        Ok(())
    }
}

pub struct Silent;

impl Observer for Silent {}

#[derive(Debug)]
pub struct MfgOutcome {
    /// Last state whose parameters produced finite losses and gradients.
    pub state: TrainState,
    pub history: Vec<CostRecord>,
    /// Set when the run stopped on a numerical failure.
    pub diverged: Option<Error>,
}

pub fn train_mfg(problem: &MfgProblem, stacks: Vec<FlowStack>, cfg: &TrainConfig, obs: &mut dyn Observer) -> Result<MfgOutcome> {
    train_mfg_from(problem, TrainState::new(stacks), cfg, obs)
}

/// Continues a run from `state` up to `cfg.iterations` total iterations.
pub fn train_mfg_from(problem: &MfgProblem, state: TrainState, cfg: &TrainConfig, obs: &mut dyn Observer) -> Result<MfgOutcome> {
    train_mfg_until(problem, state, cfg, cfg.iterations, obs)
}

/// Like [`train_mfg_from`] but stops after iteration `until`; the learning-rate
/// schedule still spans `cfg.iterations`.
pub fn train_mfg_until(
    problem: &MfgProblem,
    mut state: TrainState,
    cfg: &TrainConfig,
    until: u64,
    obs: &mut dyn Observer,
) -> Result<MfgOutcome> {
    problem.validate()?;
    cfg.validate()?;
    if state.stacks.len() != problem.populations.len() {
        return Err(Error::Config(format!(
            "{} populations need as many flows, got {}",
            problem.populations.len(),
            state.stacks.len()
        )));
    }
    let start = Instant::now();
    let mut history = Vec::new();
    let mut diverged = None;
    while state.iteration < until.min(cfg.iterations) {
        let it = state.iteration;
        let mut r = rng::stream(cfg.seed, it);
        let batches = problem.sample(cfg.batch, &mut r);
        let mut g = Graph::new();
        let params: Vec<Vec<Var>> = state.stacks.iter().map(|s| s.bind(&mut g)).collect();
        let step = total_objective(&mut g, problem, &state.stacks, &params, &batches).and_then(|(loss, bd)| {
            g.backward(loss)?;
            let grads: Vec<Tensor> = params.iter().flatten().map(|&v| g.grad_or_zeros(v)).collect();
            Ok((bd, grads))
        });
        let (mut bd, grads) = match step {
            Ok(v) => v,
            Err(e) if e.is_numerical() => {
                warn!("iteration {}: {}; stopping with the last finite state", it, e);
                diverged = Some(e);
                break;
            }
            Err(e) => return Err(e),
        };
        bd.iteration = it;
        let mut flat: Vec<Tensor> = state.stacks.iter().flat_map(|s| s.params().iter().cloned()).collect();
        let lr = cfg.lr_at(it, cfg.iterations);
        let saved = state.optim.clone();
        if let Err(e) = adam_step(&mut flat, &grads, &mut state.optim, cfg, lr) {
            let e = match e {
                Error::NonFiniteGradient { param, .. } => {
                    let idx: usize = param.trim_start_matches("param").parse().unwrap_or(0);
                    Error::NonFiniteGradient {
                        iteration: it,
                        param: state.param_name(idx),
                    }
                }
                other => return Err(other),
            };
            warn!("iteration {}: {}; stopping with the last finite state", it, e);
            state.optim = saved;
            diverged = Some(e);
            break;
        }
        let mut off = 0;
        for s in &mut state.stacks {
            let n = s.params().len();
            s.set_params(flat[off..off + n].to_vec())?;
            off += n;
        }
        state.iteration += 1;
        if it % cfg.eval_interval == 0 || state.iteration == cfg.iterations {
            let row = CostRecord {
                costs: bd,
                wall_ms: start.elapsed().as_secs_f64() * 1e3,
            };
            info!(
                "iter {:>6}  L {:.4}  I {:.4}  M {:.4}  total {:.4}",
                it, bd.transport, bd.interaction, bd.terminal, bd.total
            );
            obs.on_record(&row)?;
            history.push(row);
        }
        if cfg.checkpoint_interval > 0 && state.iteration % cfg.checkpoint_interval == 0 {
            obs.on_checkpoint(&state)?;
        }
    }
    if diverged.is_some() {
        obs.on_checkpoint(&state)?;
    }
    Ok(MfgOutcome {
        state,
        history,
        diverged,
    })
}

/// Per-column affine standardization fitted on training rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn fit(x: &Tensor) -> Self {
        let (n, d) = (x.rows() as f64, x.cols());
        let mut mean = vec![0.0; d];
        for r in 0..x.rows() {
            for (m, v) in mean.iter_mut().zip(x.row(r)) {
                *m += v / n;
            }
        }
        let mut var = vec![0.0; d];
        for r in 0..x.rows() {
            for j in 0..d {
                let c = x.get2(r, j) - mean[j];
                var[j] += c * c / n;
            }
        }
        let std = var.iter().map(|v| if *v > 0.0 { v.sqrt() } else { 1.0 }).collect();
        Standardizer { mean, std }
    }

    pub fn apply(&self, x: &Tensor) -> Tensor {
        let mut out = x.clone();
        for r in 0..out.rows() {
            for (j, v) in out.row_mut(r).iter_mut().enumerate() {
                *v = (*v - self.mean[j]) / self.std[j];
            }
        }
        out
    }

    /// Add to a standardized-space NLL to express it in data units.
    pub fn log_scale(&self) -> f64 {
        self.std.iter().map(|s| s.ln()).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NfConfig {
    pub train: TrainConfig,
    /// `lambda_L / lambda_M`; 0 gives plain maximum likelihood.
    pub ratio: f64,
    pub epochs: usize,
    pub val_fraction: f64,
    pub test_fraction: f64,
    /// Points used for the per-epoch Lipschitz report; 0 disables it.
    pub lipschitz_points: usize,
}

impl NfConfig {
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if !(self.ratio >= 0.0) {
            return Err(Error::Config("regularization ratio must be >= 0".into()));
        }
        if self.epochs < 1 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        let f = self.val_fraction + self.test_fraction;
        if !(self.val_fraction > 0.0 && self.test_fraction >= 0.0 && f < 1.0) {
            return Err(Error::Config("validation/test fractions must leave training data".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NfRecord {
    pub epoch: usize,
    pub iteration: u64,
    pub train_loss: f64,
    pub train_nll: f64,
    pub transport: f64,
    pub val_nll: f64,
    pub test_nll: f64,
    pub wall_ms: f64,
}

#[derive(Debug)]
pub struct NfOutcome {
    /// Parameters with the lowest validation NLL.
    pub best: FlowStack,
    pub best_epoch: usize,
    pub last: FlowStack,
    pub standardizer: Standardizer,
    pub history: Vec<NfRecord>,
    pub lipschitz: Vec<(usize, LipschitzReport)>,
    pub diverged: Option<Error>,
}

impl NfOutcome {
    pub fn best_record(&self) -> Option<&NfRecord> {
        self.history.iter().find(|r| r.epoch == self.best_epoch)
    }
}

/// Mean NLL of `x` under the model, evaluated in chunks.
pub fn mean_nll(stack: &FlowStack, base: &DensitySpec, x: &Tensor) -> Result<f64> {
    const CHUNK: usize = 4096;
    let mut total = 0.0;
    let mut start = 0;
    while start < x.rows() {
        let n = CHUNK.min(x.rows() - start);
        let mut g = Graph::new();
        let p = stack.bind_constant(&mut g);
        let xv = g.constant(x.slice_rows(start, n));
        let inv = stack.inverse(&mut g, &p, xv)?;
        let nll = terminal_nll(&mut g, base, &inv)?;
        total += g.scalar(nll) * n as f64;
        start += n;
    }
    Ok(total / x.rows() as f64)
}

/// Splits rows into (train, validation, test) after a seeded shuffle.
pub fn split_rows(data: &Tensor, val_fraction: f64, test_fraction: f64, seed: u64) -> (Tensor, Tensor, Tensor) {
    let n = data.rows();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng::stream(seed, u64::MAX));
    let n_val = ((n as f64) * val_fraction).round() as usize;
    let n_test = ((n as f64) * test_fraction).round() as usize;
    let n_train = n - n_val - n_test;
    (
        data.select_rows(&idx[..n_train]),
        data.select_rows(&idx[n_train..n_train + n_val]),
        data.select_rows(&idx[n_train + n_val..]),
    )
}

/// Trains a density model on `data` with optional trajectory regularization.
pub fn train_nf(
    data: &Tensor,
    base: &DensitySpec,
    stack: FlowStack,
    cfg: &NfConfig,
    power: &PowerIteration,
    obs: &mut dyn Observer,
) -> Result<NfOutcome> {
    cfg.validate()?;
    if data.rank() != 2 || data.cols() != stack.dim() || base.dim() != stack.dim() {
        return Err(Error::Config(format!(
            "data {:?}, base dim {}, flow dim {}",
            data.shape(),
            base.dim(),
            stack.dim()
        )));
    }
    let tc = &cfg.train;
    let (train_raw, val_raw, test_raw) = split_rows(data, cfg.val_fraction, cfg.test_fraction, tc.seed);
    if train_raw.rows() == 0 {
        return Err(Error::Config("no training rows".into()));
    }
    let standardizer = Standardizer::fit(&train_raw);
    let (train, val, test) = (
        standardizer.apply(&train_raw),
        standardizer.apply(&val_raw),
        standardizer.apply(&test_raw),
    );
    let per_epoch = train.rows().div_ceil(tc.batch);
    let total = (per_epoch * cfg.epochs) as u64;
    let lip_points = train.slice_rows(0, cfg.lipschitz_points.min(train.rows()));

    let mut stack = stack;
    let mut optim = OptimState::new(stack.params());
    let mut best = stack.clone();
    let mut best_val = f64::INFINITY;
    let mut best_epoch = 0;
    let mut history = Vec::new();
    let mut lipschitz = Vec::new();
    let mut diverged = None;
    let mut it: u64 = 0;
    let start = Instant::now();

    'epochs: for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..train.rows()).collect();
        order.shuffle(&mut rng::stream(tc.seed, epoch as u64));
        let (mut loss_sum, mut nll_sum, mut l_sum) = (0.0, 0.0, 0.0);
        let mut seen = 0usize;
        for chunk in order.chunks(tc.batch) {
            let x = train.select_rows(chunk);
            let mut g = Graph::new();
            let p = stack.bind(&mut g);
            let step = nf_objective(&mut g, &stack, &p, base, &x, cfg.ratio).and_then(|(loss, nll, l)| {
                g.backward(loss)?;
                Ok((g.scalar(loss), g.scalar(nll), g.scalar(l)))
            });
            let (loss, nll, l) = match step {
                Ok(v) => v,
                Err(e) if e.is_numerical() => {
                    warn!("epoch {} iteration {}: {}", epoch, it, e);
                    diverged = Some(e);
                    break 'epochs;
                }
                Err(e) => return Err(e),
            };
            let grads: Vec<Tensor> = p.iter().map(|&v| g.grad_or_zeros(v)).collect();
            let mut params = stack.params().to_vec();
            if let Err(e) = adam_step(&mut params, &grads, &mut optim, tc, tc.lr_at(it, total)) {
                let e = match e {
                    Error::NonFiniteGradient { param, .. } => {
                        let idx: usize = param.trim_start_matches("param").parse().unwrap_or(0);
                        Error::NonFiniteGradient {
                            iteration: it,
                            param: stack.param_name(idx),
                        }
                    }
                    other => return Err(other),
                };
                diverged = Some(e);
                break 'epochs;
            }
            stack.set_params(params)?;
            let n = chunk.len() as f64;
            loss_sum += loss * n;
            nll_sum += nll * n;
            l_sum += l * n;
            seen += chunk.len();
            it += 1;
        }
        let evaluated = (|| -> Result<(f64, f64)> {
            let v = if val.rows() > 0 { mean_nll(&stack, base, &val)? } else { f64::NAN };
            let t = if test.rows() > 0 { mean_nll(&stack, base, &test)? } else { f64::NAN };
            Ok((v, t))
        })();
        let (val_nll, test_nll) = match evaluated {
            Ok(v) => v,
            Err(e) if e.is_numerical() => {
                diverged = Some(e);
                break;
            }
            Err(e) => return Err(e),
        };
        let row = NfRecord {
            epoch,
            iteration: it,
            train_loss: loss_sum / seen as f64,
            train_nll: nll_sum / seen as f64,
            transport: l_sum / seen as f64,
            val_nll,
            test_nll,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        };
        if val_nll < best_val {
            best_val = val_nll;
            best = stack.clone();
            best_epoch = epoch;
        }
        let report = if lip_points.rows() > 0 {
            let z = stack.inverse_eval(&lip_points)?.last().clone();
            Some(lipschitz_report(&stack, &z, power)?)
        } else {
            None
        };
        info!(
            "epoch {:>3}  loss {:.4}  nll {:.4}  L {:.4}  val {:.4}{}",
            epoch,
            row.train_loss,
            row.train_nll,
            row.transport,
            val_nll,
            report.as_ref().map(|r| format!("  lip {:.3}", r.product)).unwrap_or_default()
        );
        obs.on_epoch(&row, report.as_ref())?;
        history.push(row);
        if let Some(r) = report {
            lipschitz.push((epoch, r));
        }
    }
    if best_epoch == 0 {
        best = stack.clone();
    }
    Ok(NfOutcome {
        best,
        best_epoch,
        last: stack,
        standardizer,
        history,
        lipschitz,
        diverged,
    })
}

#[cfg(test)]
mod tests;
