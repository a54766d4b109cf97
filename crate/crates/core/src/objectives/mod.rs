//! Cost terms of the discretized variational MFG and of regularized NF training.
//!
//! All costs act on [`Trajectory`] values so one forward (and, when needed,
//! one inverse) pass per population feeds every term.

mod kernel;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::densities::{DensitySpec, ObstacleSpec};
use crate::error::{Error, Result};
use crate::flows::{FlowStack, Trajectory};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub use kernel::{kernel_mean, kernel_value};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TransportQuadrature {
    /// `K * sum_k |F_{k+1} - F_k|^2`.
    ForwardDiff,
    /// Fourth-order one-sided velocity stencils integrated with Simpson's rule.
    Simpson4,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InteractionQuadrature {
    RightPoint,
    Simpson,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Terminal {
    /// Forward KL, `D(P1 || F_* P0)`, estimated from target samples.
    Kl,
    /// Symmetrized KL.
    Jeffreys,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Interaction {
    None,
    Obstacle {
        obstacle: ObstacleSpec,
        lambda_p: f64,
        lambda_e: f64,
    },
    Multigroup {
        bandwidth: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Weights {
    pub transport: f64,
    pub interaction: f64,
    pub terminal: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Population {
    pub base: DensitySpec,
    pub target: DensitySpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MfgProblem {
    pub dim: usize,
    pub steps: usize,
    pub populations: Vec<Population>,
    pub weights: Weights,
    pub interaction: Interaction,
    pub terminal: Terminal,
    pub transport_quadrature: TransportQuadrature,
    pub interaction_quadrature: InteractionQuadrature,
}

impl MfgProblem {
    pub fn validate(&self) -> Result<()> {
        let w = self.weights;
        if [w.transport, w.interaction, w.terminal].iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::Config("cost weights must be >= 0".into()));
        }
        if self.steps < 1 {
            return Err(Error::Config("step count K must be >= 1".into()));
        }
        if self.transport_quadrature == TransportQuadrature::Simpson4 && self.steps < 5 {
            return Err(Error::Config(format!(
                "fourth-order transport quadrature needs K >= 5, got {}",
                self.steps
            )));
        }
        if self.populations.is_empty() {
            return Err(Error::Config("problem has no population".into()));
        }
        for p in &self.populations {
            if p.base.dim() != self.dim || p.target.dim() != self.dim {
                return Err(Error::Config(format!("population densities must have dimension {}", self.dim)));
            }
        }
        match &self.interaction {
            Interaction::Obstacle {
                lambda_p, lambda_e, ..
            } => {
                if self.dim < 2 {
                    return Err(Error::Config("obstacle interaction needs d >= 2".into()));
                }
                if !(*lambda_p >= 0.0 && *lambda_e >= 0.0) {
                    return Err(Error::Config("obstacle weights must be >= 0".into()));
                }
            }
            Interaction::Multigroup { bandwidth } => {
                if self.populations.len() < 2 {
                    return Err(Error::Config("multi-group interaction needs >= 2 populations".into()));
                }
                if !(*bandwidth > 0.0) {
                    return Err(Error::Config("kernel bandwidth must be > 0".into()));
                }
            }
            Interaction::None => {}
        }
        Ok(())
    }

    /// Fresh samples from every population's base and target density.
    pub fn sample(&self, n: usize, rng: &mut Rng) -> Vec<PopulationBatch> {
        self.populations
            .iter()
            .map(|p| PopulationBatch {
                z: p.base.sample(n, rng),
                x: p.target.sample(n, rng),
            })
            .collect()
    }
}

/// `z` drawn from the base density, `x` from the target.
#[derive(Debug, Clone)]
pub struct PopulationBatch {
    pub z: Tensor,
    pub x: Tensor,
}

/// Unweighted cost values of one evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct CostBreakdown {
    pub iteration: u64,
    pub transport: f64,
    pub interaction: f64,
    pub terminal: f64,
    pub total: f64,
}

fn batch_rows(g: &Graph, v: Var) -> f64 {
    g.value(v).rows() as f64
}

/// `sum_i c_i v_i` over same-shape nodes.
fn lincomb(g: &mut Graph, terms: &[(Var, f64)]) -> Result<Var> {
    let mut acc = g.scale(terms[0].0, terms[0].1)?;
    for &(v, c) in &terms[1..] {
        let t = g.scale(v, c)?;
        acc = g.add(acc, t)?;
    }
    Ok(acc)
}

fn zero(g: &mut Graph) -> Var {
    g.constant(Tensor::scalar(0.0))
}

/// Composite Simpson weights for `int_0^1` on nodes `k / K`; odd `K` closes
/// with the 3/8 rule on the last three intervals.
pub fn simpson_weights(k: usize) -> Result<Vec<f64>> {
    if k < 2 {
        return Err(Error::invalid(format!("Simpson's rule needs K >= 2, got {}", k)));
    }
    let h = 1.0 / k as f64;
    let mut w = vec![0.0; k + 1];
    let even_part = if k % 2 == 0 { k } else { k - 3 };
    for i in (0..even_part).step_by(2) {
        w[i] += h / 3.0;
        w[i + 1] += 4.0 * h / 3.0;
        w[i + 2] += h / 3.0;
    }
    if k % 2 == 1 {
        for (j, c) in [1.0, 3.0, 3.0, 1.0].iter().enumerate() {
            w[even_part + j] += 3.0 * h / 8.0 * c;
        }
    }
    Ok(w)
}

/// Fourth-order first-derivative weights on five unit-spaced nodes, one row
/// per evaluation position within the window (times 12).
const STENCIL: [[f64; 5]; 5] = [
    [-25.0, 48.0, -36.0, 16.0, -3.0],
    [-3.0, -10.0, 18.0, -6.0, 1.0],
    [1.0, -8.0, 0.0, 8.0, -1.0],
    [-1.0, 6.0, -18.0, 10.0, 3.0],
    [3.0, -16.0, 36.0, -48.0, 25.0],
];

/// Discrete transport cost of a trajectory, mean over the batch.
pub fn transport_cost(g: &mut Graph, states: &[Var], quad: TransportQuadrature) -> Result<Var> {
    let k = states.len() - 1;
    if k == 0 {
        return Ok(zero(g));
    }
    let n = batch_rows(g, states[0]);
    match quad {
        TransportQuadrature::ForwardDiff => {
            let mut acc: Option<Var> = None;
            for w in states.windows(2) {
                let d = g.sub(w[1], w[0])?;
                let sq = g.square(d)?;
                let s = g.sum(sq)?;
                acc = Some(match acc {
                    Some(a) => g.add(a, s)?,
                    None => s,
                });
            }
            g.scale(acc.expect("k >= 1"), k as f64 / n)
        }
        TransportQuadrature::Simpson4 => {
            if k < 5 {
                return Err(Error::invalid(format!("fourth-order transport quadrature needs K >= 5, got {}", k)));
            }
            let weights = simpson_weights(k)?;
            let kf = k as f64;
            let mut acc: Option<Var> = None;
            for (i, wt) in weights.iter().enumerate() {
                // Forward one-sided stencil where five nodes fit, otherwise the
                // last five nodes (one-sided at the trailing boundary).
                let start = i.min(k - 4);
                let row = &STENCIL[i - start];
                // Weights sum to zero, so the stencil acts on offsets from the
                // window's first node; a motionless path then gives exactly 0.
                let mut terms = Vec::with_capacity(4);
                for j in 1..5 {
                    let d = g.sub(states[start + j], states[start])?;
                    terms.push((d, kf * row[j] / 12.0));
                }
                let v = lincomb(g, &terms)?;
                let sq = g.square(v)?;
                let s = g.sum(sq)?;
                let s = g.scale(s, wt / n)?;
                acc = Some(match acc {
                    Some(a) => g.add(a, s)?,
                    None => s,
                });
            }
            Ok(acc.expect("k >= 5"))
        }
    }
}

/// Transport cost on base samples, `traj` from [`FlowStack::forward`].
pub fn transport_cost_forward(g: &mut Graph, traj: &Trajectory, quad: TransportQuadrature) -> Result<Var> {
    transport_cost(g, &traj.states, quad)
}

/// Transport cost on target samples, `traj` from [`FlowStack::inverse`].
pub fn transport_cost_reverse(g: &mut Graph, traj: &Trajectory) -> Result<Var> {
    transport_cost(g, &traj.states, TransportQuadrature::ForwardDiff)
}

/// Numeric forward-difference transport cost of evaluated states.
pub fn transport_cost_value(states: &[Tensor]) -> f64 {
    let k = states.len() - 1;
    if k == 0 {
        return 0.0;
    }
    let n = states[0].rows() as f64;
    let s: f64 = states
        .windows(2)
        .map(|w| w[0].data().iter().zip(w[1].data()).map(|(a, b)| (b - a) * (b - a)).sum::<f64>())
        .sum();
    k as f64 * s / n
}

fn mean(g: &mut Graph, v: Var) -> Result<Var> {
    g.mean(v)
}

/// `mean -[log p0(G_K(x)) + log|det dG/dx|]`, `traj` from [`FlowStack::inverse`].
pub fn terminal_nll(g: &mut Graph, base: &DensitySpec, traj: &Trajectory) -> Result<Var> {
    let lp = base.log_prob_node(g, traj.last())?;
    let ld = traj.total_logdet(g)?;
    let s = g.add(lp, ld)?;
    let m = mean(g, s)?;
    g.scale(m, -1.0)
}

/// `D(P1 || F_* P0)`: NLL minus the Monte Carlo entropy of the target.
pub fn terminal_kl(g: &mut Graph, base: &DensitySpec, target: &DensitySpec, inv: &Trajectory) -> Result<Var> {
    let nll = terminal_nll(g, base, inv)?;
    let lp1 = target.log_prob(g.value(inv.states[0]))?;
    let h = lp1.iter().sum::<f64>() / lp1.len() as f64;
    g.add_scalar(nll, h)
}

/// Symmetrized KL from a forward pass on base samples and an inverse pass on
/// target samples.
pub fn terminal_jeffreys(
    g: &mut Graph,
    base: &DensitySpec,
    target: &DensitySpec,
    fwd: &Trajectory,
    inv: &Trajectory,
) -> Result<Var> {
    let kl_target = terminal_kl(g, base, target, inv)?;
    let lp0: Vec<f64> = base.log_prob(g.value(fwd.states[0]))?;
    let lp0_mean = lp0.iter().sum::<f64>() / lp0.len() as f64;
    let ld = fwd.total_logdet(g)?;
    let lp1 = target.log_prob_node(g, fwd.last())?;
    let s = g.add(ld, lp1)?;
    let m = mean(g, s)?;
    let kl_pushed = g.scale(m, -1.0)?;
    let kl_pushed = g.add_scalar(kl_pushed, lp0_mean)?;
    g.add(kl_target, kl_pushed)
}

/// Obstacle plus entropy running cost (including `lambda_p`, `lambda_e`, not
/// `lambda_I`), averaged over time with the chosen quadrature.
pub fn interaction_obstacle(
    g: &mut Graph,
    base: &DensitySpec,
    fwd: &Trajectory,
    obstacle: &ObstacleSpec,
    lambda_p: f64,
    lambda_e: f64,
    quad: InteractionQuadrature,
) -> Result<Var> {
    let k = fwd.states.len() - 1;
    if k == 0 || (lambda_p == 0.0 && lambda_e == 0.0) {
        return Ok(zero(g));
    }
    let weights: Vec<f64> = match quad {
        InteractionQuadrature::Simpson if k % 2 == 0 => simpson_weights(k)?,
        q => {
            if q == InteractionQuadrature::Simpson {
                warn!("Simpson interaction quadrature needs even K (got {}); using the right-point rule", k);
            }
            let mut w = vec![1.0 / k as f64; k + 1];
            w[0] = 0.0;
            w
        }
    };
    let lp0_mean = if lambda_e != 0.0 {
        let lp = base.log_prob(g.value(fwd.states[0]))?;
        lp.iter().sum::<f64>() / lp.len() as f64
    } else {
        0.0
    };
    let mut acc: Option<Var> = None;
    let mut cum: Option<Var> = None;
    let mut constant = 0.0;
    for (i, &w) in weights.iter().enumerate() {
        if i > 0 {
            let l = fwd.logdets[i - 1];
            cum = Some(match cum {
                Some(c) => g.add(c, l)?,
                None => l,
            });
        }
        if w == 0.0 {
            continue;
        }
        let mut terms = Vec::new();
        if lambda_p != 0.0 {
            let q = obstacle.eval_node(g, fwd.states[i])?;
            let q = mean(g, q)?;
            terms.push(g.scale(q, w * lambda_p)?);
        }
        if lambda_e != 0.0 {
            // log of the pushed density along the path: log p0(z) - log|det dF_i/dz|.
            constant += w * lambda_e * lp0_mean;
            if let Some(c) = cum {
                let c = mean(g, c)?;
                terms.push(g.scale(c, -w * lambda_e)?);
            }
        }
        for t in terms {
            acc = Some(match acc {
                Some(a) => g.add(a, t)?,
                None => t,
            });
        }
    }
    let base_term = acc.unwrap_or_else(|| zero(g));
    g.add_scalar(base_term, constant)
}

/// Kernel interaction summed over unordered population pairs and averaged
/// over steps `1..=K` with the right-point rule.
pub fn interaction_multigroup(g: &mut Graph, trajs: &[&Trajectory], bandwidth: f64) -> Result<Var> {
    if trajs.len() < 2 {
        return Err(Error::invalid("multi-group interaction needs >= 2 populations"));
    }
    let k = trajs[0].states.len() - 1;
    if trajs.iter().any(|t| t.states.len() - 1 != k) {
        return Err(Error::invalid("populations must share the step count"));
    }
    let d = g.value(trajs[0].states[0]).cols();
    if trajs.iter().any(|t| g.value(t.states[0]).cols() != d) {
        return Err(Error::shape("interaction_multigroup", "population dimensions differ"));
    }
    if k == 0 {
        return Ok(zero(g));
    }
    let mut acc: Option<Var> = None;
    for step in 1..=k {
        for i in 0..trajs.len() {
            for j in i + 1..trajs.len() {
                let v = kernel_mean(g, trajs[i].states[step], trajs[j].states[step], bandwidth)?;
                acc = Some(match acc {
                    Some(a) => g.add(a, v)?,
                    None => v,
                });
            }
        }
    }
    g.scale(acc.expect("k >= 1"), 1.0 / k as f64)
}

fn sum_nodes(g: &mut Graph, vs: &[Var]) -> Result<Var> {
    let mut acc = vs[0];
    for &v in &vs[1..] {
        acc = g.add(acc, v)?;
    }
    Ok(acc)
}

/// Weighted objective `lambda_L L + lambda_I I + lambda_M M` (per-population
/// `L` and `M` summed) and its unweighted breakdown.
pub fn total_objective(
    g: &mut Graph,
    problem: &MfgProblem,
    stacks: &[FlowStack],
    params: &[Vec<Var>],
    batches: &[PopulationBatch],
) -> Result<(Var, CostBreakdown)> {
    let np = problem.populations.len();
    if stacks.len() != np || params.len() != np || batches.len() != np {
        return Err(Error::invalid(format!(
            "{} populations but {} stacks, {} parameter sets, {} batches",
            np,
            stacks.len(),
            params.len(),
            batches.len()
        )));
    }
    let mut fwds = Vec::with_capacity(np);
    let mut ls = Vec::with_capacity(np);
    let mut ms = Vec::with_capacity(np);
    for ((pop, stack), (p, batch)) in problem.populations.iter().zip(stacks).zip(params.iter().zip(batches)) {
        if stack.steps() != problem.steps || stack.dim() != problem.dim {
            return Err(Error::invalid(format!(
                "stack has K={} d={}, problem has K={} d={}",
                stack.steps(),
                stack.dim(),
                problem.steps,
                problem.dim
            )));
        }
        let z = g.constant(batch.z.clone());
        let fwd = stack.forward(g, p, z)?;
        ls.push(transport_cost_forward(g, &fwd, problem.transport_quadrature)?);
        let x = g.constant(batch.x.clone());
        let inv = stack.inverse(g, p, x)?;
        ms.push(match problem.terminal {
            Terminal::Kl => terminal_kl(g, &pop.base, &pop.target, &inv)?,
            Terminal::Jeffreys => terminal_jeffreys(g, &pop.base, &pop.target, &fwd, &inv)?,
        });
        fwds.push(fwd);
    }
    let l = sum_nodes(g, &ls)?;
    let m = sum_nodes(g, &ms)?;
    let i = match &problem.interaction {
        Interaction::None => zero(g),
        Interaction::Obstacle {
            obstacle,
            lambda_p,
            lambda_e,
        } => {
            let mut parts = Vec::new();
            for (pop, fwd) in problem.populations.iter().zip(&fwds) {
                parts.push(interaction_obstacle(
                    g,
                    &pop.base,
                    fwd,
                    obstacle,
                    *lambda_p,
                    *lambda_e,
                    problem.interaction_quadrature,
                )?);
            }
            sum_nodes(g, &parts)?
        }
        Interaction::Multigroup { bandwidth } => {
            let refs: Vec<&Trajectory> = fwds.iter().collect();
            interaction_multigroup(g, &refs, *bandwidth)?
        }
    };
    let w = problem.weights;
    let wl = g.scale(l, w.transport)?;
    let wi = g.scale(i, w.interaction)?;
    let wm = g.scale(m, w.terminal)?;
    let t = g.add(wl, wi)?;
    let total = g.add(t, wm)?;
    let breakdown = CostBreakdown {
        iteration: 0,
        transport: g.scalar(l),
        interaction: g.scalar(i),
        terminal: g.scalar(m),
        total: g.scalar(total),
    };
    Ok((total, breakdown))
}

/// Evaluates the objective without recording gradients.
pub fn evaluate(problem: &MfgProblem, stacks: &[FlowStack], batches: &[PopulationBatch]) -> Result<CostBreakdown> {
    let mut g = Graph::new();
    let params: Vec<Vec<Var>> = stacks.iter().map(|s| s.bind_constant(&mut g)).collect();
    Ok(total_objective(&mut g, problem, stacks, &params, batches)?.1)
}

/// Regularized NF loss `NLL + ratio * reverse transport` on a data batch.
/// Returns `(loss, nll, transport)`.
pub fn nf_objective(
    g: &mut Graph,
    stack: &FlowStack,
    params: &[Var],
    base: &DensitySpec,
    x: &Tensor,
    ratio: f64,
) -> Result<(Var, Var, Var)> {
    let xv = g.constant(x.clone());
    let inv = stack.inverse(g, params, xv)?;
    let nll = terminal_nll(g, base, &inv)?;
    let l = transport_cost_reverse(g, &inv)?;
    let loss = if ratio == 0.0 {
        nll
    } else {
        let r = g.scale(l, ratio)?;
        g.add(nll, r)?
    };
    Ok((loss, nll, l))
}
