//! Diagnostics over trained flows: empirical Lipschitz bounds, trajectory
//! straightness and discretization-order probes.
//!
//! Lipschitz bounds here are maxima of Jacobian spectral norms over an
//! evaluation set. They are empirical lower estimates of the true constant,
//! not certified global bounds.

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::flows::{FlowStack, LayerSpec};
use crate::objectives::transport_cost_value;
use crate::rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerIteration {
    pub tol: f64,
    pub max_iters: usize,
    /// Step of the central difference used for Jacobian-vector products.
    pub jvp_step: f64,
}

impl Default for PowerIteration {
    fn default() -> Self {
        PowerIteration {
            tol: 1e-6,
            max_iters: 100,
            jvp_step: 1e-6,
        }
    }
}

/// A row-wise map `R^d -> R^d` applied to a batch.
pub trait RowMap {
    fn dim(&self) -> usize;
    fn apply(&self, x: &Tensor) -> Result<Tensor>;
    /// Row-wise `J(x_i)^T u_i`.
    fn vjp(&self, x: &Tensor, u: &Tensor) -> Result<Tensor>;
}

/// Step `k` of a stack, or only its coupling layer.
pub struct StackStep<'a> {
    pub stack: &'a FlowStack,
    pub k: usize,
    pub coupling_only: bool,
}

impl<'a> StackStep<'a> {
    pub fn new(stack: &'a FlowStack, k: usize) -> Self {
        StackStep {
            stack,
            k,
            coupling_only: false,
        }
    }

    fn run(&self, g: &mut Graph, x: crate::autodiff::Var) -> Result<crate::autodiff::Var> {
        let p = self.stack.bind_constant(g);
        let (y, _) = if self.coupling_only {
            self.stack.coupling_step(g, &p, self.k, x, false)?
        } else {
            self.stack.step(g, &p, self.k, x, false)?
        };
        Ok(y)
    }
}

impl RowMap for StackStep<'_> {
    fn dim(&self) -> usize {
        self.stack.dim()
    }

    fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let y = self.run(&mut g, xv)?;
        Ok(g.value(y).clone())
    }

    fn vjp(&self, x: &Tensor, u: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let xv = g.variable(x.clone());
        let y = self.run(&mut g, xv)?;
        let uv = g.constant(u.clone());
        let prod = g.mul(y, uv)?;
        let s = g.sum(prod)?;
        g.backward(s)?;
        Ok(g.grad_or_zeros(xv))
    }
}

/// `x -> x A^T` for a fixed square matrix `A`.
pub struct LinearMap(pub Tensor);

impl RowMap for LinearMap {
    fn dim(&self) -> usize {
        self.0.cols()
    }

    fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let (a, d) = (&self.0, self.0.cols());
        let mut out = Tensor::zeros(&[x.rows(), a.rows()]);
        for r in 0..x.rows() {
            for i in 0..a.rows() {
                out.row_mut(r)[i] = (0..d).map(|j| a.get2(i, j) * x.get2(r, j)).sum();
            }
        }
        Ok(out)
    }

    fn vjp(&self, x: &Tensor, u: &Tensor) -> Result<Tensor> {
        let a = &self.0;
        let mut out = Tensor::zeros(&[x.rows(), a.cols()]);
        for r in 0..x.rows() {
            for j in 0..a.cols() {
                out.row_mut(r)[j] = (0..a.rows()).map(|i| a.get2(i, j) * u.get2(r, i)).sum();
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpectralEstimate {
    pub value: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Fixed start direction shared by every point, so a point's estimate does
/// not depend on which other points are evaluated with it.
fn start_vector(d: usize) -> Vec<f64> {
    let mut r = rng::seeded(0x5eed_1ab5);
    let mut v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut r)).collect();
    let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    v.iter_mut().for_each(|a| *a /= n);
    v
}

fn jvp(map: &dyn RowMap, x: &Tensor, v: &Tensor, h: f64) -> Result<Tensor> {
    let plus = map.apply(&x.zip_map(v, |a, b| a + h * b))?;
    let minus = map.apply(&x.zip_map(v, |a, b| a - h * b))?;
    Ok(plus.zip_map(&minus, |a, b| (a - b) / (2.0 * h)))
}

fn row_norm(t: &Tensor, r: usize) -> f64 {
    t.row(r).iter().map(|a| a * a).sum::<f64>().sqrt()
}

/// Spectral norm of the Jacobian at every row of `x`, by power iteration on
/// `J^T J`. Each row is frozen once its estimate changes by less than `tol`
/// relatively; rows still moving after `max_iters` are flagged unconverged.
pub fn spectral_norms(map: &dyn RowMap, x: &Tensor, cfg: &PowerIteration) -> Result<Vec<SpectralEstimate>> {
    if !(cfg.tol > 0.0) || cfg.max_iters == 0 || !(cfg.jvp_step > 0.0) {
        return Err(Error::invalid("power iteration needs tol > 0, max_iters >= 1 and a positive step"));
    }
    if x.rank() != 2 || x.cols() != map.dim() {
        return Err(Error::shape("spectral_norms", format!("map dimension {} given {:?}", map.dim(), x.shape())));
    }
    let (n, d) = (x.rows(), x.cols());
    let start = start_vector(d);
    let mut out = vec![
        SpectralEstimate {
            value: 0.0,
            iterations: 0,
            converged: false,
        };
        n
    ];
    let mut active: Vec<usize> = (0..n).collect();
    let mut v = Tensor::matrix(n, d, start.iter().copied().cycle().take(n * d).collect())?;
    for it in 1..=cfg.max_iters {
        if active.is_empty() {
            break;
        }
        let xa = x.select_rows(&active);
        let jv = jvp(map, &xa, &v, cfg.jvp_step)?;
        let w = map.vjp(&xa, &jv)?;
        let mut next_active = Vec::new();
        let mut next_v = Vec::new();
        for (r, &i) in active.iter().enumerate() {
            let sigma = row_norm(&jv, r);
            let prev = out[i].value;
            out[i].value = sigma;
            out[i].iterations = it;
            let wn = row_norm(&w, r);
            let done = sigma == 0.0 || wn == 0.0 || (it > 1 && (sigma - prev).abs() <= cfg.tol * sigma);
            if done {
                out[i].converged = true;
            } else {
                next_active.push(i);
                next_v.extend(w.row(r).iter().map(|a| a / wn));
            }
        }
        active = next_active;
        if !active.is_empty() {
            v = Tensor::matrix(active.len(), d, next_v)?;
        }
    }
    Ok(out)
}

/// Spectral norm of `J(x)` at a single point.
pub fn jacobian_spectral_norm(map: &dyn RowMap, x: &[f64], cfg: &PowerIteration) -> Result<SpectralEstimate> {
    let t = Tensor::matrix(1, x.len(), x.to_vec())?;
    Ok(spectral_norms(map, &t, cfg)?[0])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LipschitzReport {
    /// One bound per declared layer; permutations report exactly 1.
    pub per_layer: Vec<f64>,
    pub product: f64,
    pub eval_size: usize,
    pub tol: f64,
    /// Evaluation points whose power iteration hit `max_iters`.
    pub unconverged: usize,
}

/// Per-layer maxima of the Jacobian spectral norm along the forward
/// trajectories of the evaluation points `z`. Linear layers have a constant
/// Jacobian and report its spectral norm.
pub fn lipschitz_report(stack: &FlowStack, z: &Tensor, cfg: &PowerIteration) -> Result<LipschitzReport> {
    if z.rank() != 2 || z.rows() == 0 {
        return Err(Error::invalid("Lipschitz report needs a nonempty evaluation set"));
    }
    let states = stack.forward_eval(z)?.states;
    let mut per_layer = Vec::with_capacity(stack.specs().len());
    let mut unconverged = 0;
    let mut k = 0;
    for spec in stack.specs() {
        match spec {
            LayerSpec::Permutation { .. } => per_layer.push(1.0),
            LayerSpec::Coupling { .. } => {
                let map = StackStep {
                    stack,
                    k,
                    coupling_only: true,
                };
                let est = spectral_norms(&map, &states[k], cfg)?;
                unconverged += est.iter().filter(|e| !e.converged).count();
                per_layer.push(est.iter().map(|e| e.value).fold(0.0, f64::max));
                k += 1;
            }
            LayerSpec::Linear => {
                let m = stack.linear_matrix(k - 1).expect("linear layer follows its coupling");
                let map = LinearMap(transpose(&m));
                let est = jacobian_spectral_norm(&map, &vec![0.0; stack.dim()], cfg)?;
                unconverged += usize::from(!est.converged);
                per_layer.push(est.value);
            }
        }
    }
    let product = per_layer.iter().product();
    Ok(LipschitzReport {
        per_layer,
        product,
        eval_size: z.rows(),
        tol: cfg.tol,
        unconverged,
    })
}

fn transpose(a: &Tensor) -> Tensor {
    let (r, c) = (a.rows(), a.cols());
    Tensor::from_parts(vec![c, r], (0..r * c).map(|i| a.get2(i % r, i / r)).collect())
}

/// Mean over the batch of the largest deviation of an intermediate state from
/// the straight chord between `z` and `F_K(z)`, relative to the chord length.
pub fn straightness_metric(stack: &FlowStack, z: &Tensor) -> Result<f64> {
    let k_total = stack.steps();
    if k_total < 2 {
        return Err(Error::invalid("straightness needs at least two steps"));
    }
    let states = stack.forward_eval(z)?.states;
    Ok(straightness_of(&states))
}

pub fn straightness_of(states: &[Tensor]) -> f64 {
    let k_total = states.len() - 1;
    let (z, end) = (&states[0], &states[k_total]);
    let n = z.rows();
    let mut acc = 0.0;
    for r in 0..n {
        let (z0, zk) = (z.row(r), end.row(r));
        let chord = z0.iter().zip(zk).map(|(a, b)| (b - a) * (b - a)).sum::<f64>().sqrt();
        let mut worst: f64 = 0.0;
        for (k, s) in states.iter().enumerate().take(k_total).skip(1) {
            let t = k as f64 / k_total as f64;
            let dev = s
                .row(r)
                .iter()
                .zip(z0.iter().zip(zk))
                .map(|(f, (a, b))| {
                    let e = f - ((1.0 - t) * a + t * b);
                    e * e
                })
                .sum::<f64>()
                .sqrt();
            worst = worst.max(dev);
        }
        acc += worst / chord.max(1e-8);
    }
    acc / n as f64
}

/// Analytic trajectories `F(z, t) = z + t^p u` with unit `u`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Probe {
    Linear,
    Quadratic,
    Cubic,
}

impl Probe {
    pub fn power(self) -> i32 {
        match self {
            Probe::Linear => 1,
            Probe::Quadratic => 2,
            Probe::Cubic => 3,
        }
    }

    /// `∫_0^1 |∂_t F|^2 dt = p^2 / (2p - 1)`.
    pub fn continuous_cost(self) -> f64 {
        let p = self.power() as f64;
        p * p / (2.0 * p - 1.0)
    }

    /// States `F_0..F_K` for a single point in `dim` dimensions.
    pub fn states(self, k: usize, dim: usize) -> Vec<Tensor> {
        let p = self.power();
        let u = 1.0 / (dim as f64).sqrt();
        (0..=k)
            .map(|i| {
                let t = (i as f64 / k as f64).powi(p);
                Tensor::matrix(1, dim, vec![t * u; dim]).expect("probe state")
            })
            .collect()
    }
}

impl std::str::FromStr for Probe {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(Probe::Linear),
            "quadratic" => Ok(Probe::Quadratic),
            "cubic" => Ok(Probe::Cubic),
            other => Err(Error::Config(format!("unknown probe '{}'", other))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ProbeRow {
    pub k: usize,
    pub discrete: f64,
    pub continuous: f64,
    pub error: f64,
    /// `log2(e_K / e_2K)` against the next row; infinite when the next error
    /// is at round-off level, absent on the last row.
    pub order: Option<f64>,
}

/// Forward-difference transport cost against its continuous value for each `K`.
pub fn discretization_order_probe(probe: Probe, ks: &[usize]) -> Result<Vec<ProbeRow>> {
    if ks.iter().any(|&k| k == 0) {
        return Err(Error::invalid("probe step counts must be >= 1"));
    }
    let continuous = probe.continuous_cost();
    let mut rows: Vec<ProbeRow> = ks
        .iter()
        .map(|&k| {
            let discrete = transport_cost_value(&probe.states(k, 2));
            ProbeRow {
                k,
                discrete,
                continuous,
                error: (discrete - continuous).abs(),
                order: None,
            }
        })
        .collect();
    for i in 0..rows.len().saturating_sub(1) {
        const ROUND_OFF: f64 = 1e-12;
        let (e0, e1) = (rows[i].error, rows[i + 1].error);
        let ratio = rows[i + 1].k as f64 / rows[i].k as f64;
        rows[i].order = Some(if e1 <= ROUND_OFF * continuous {
            f64::INFINITY
        } else if e0 <= ROUND_OFF * continuous {
            0.0
        } else {
            (e0 / e1).ln() / ratio.ln()
        });
    }
    Ok(rows)
}

/// `K * sum_k |F_k - F_{k-1}|^2` per row.
fn kinetic_per_row(states: &[Tensor]) -> Vec<f64> {
    let k = (states.len() - 1) as f64;
    let n = states[0].rows();
    (0..n)
        .map(|r| {
            k * states
                .windows(2)
                .map(|w| w[1].row(r).iter().zip(w[0].row(r)).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
                .sum::<f64>()
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TriangleCheck {
    /// Largest `lhs / rhs` over the pairs; the bound holds when this is <= 1.
    pub worst_ratio: f64,
    pub violations: usize,
}

/// Checks `|F_K(x) - F_K(y)|^2 <= c (|x - y|^2 + K sum|ΔF(x)|^2 + K sum|ΔF(y)|^2)`
/// row by row. With `c = 3` this always holds: the left side is the squared
/// norm of a sum of three vectors, and each displacement is bounded by its
/// discrete kinetic energy.
pub fn triangle_bound_check(stack: &FlowStack, x: &Tensor, y: &Tensor, c: f64) -> Result<TriangleCheck> {
    if x.shape() != y.shape() {
        return Err(Error::shape("triangle_bound_check", format!("{:?} vs {:?}", x.shape(), y.shape())));
    }
    let sx = stack.forward_eval(x)?.states;
    let sy = stack.forward_eval(y)?.states;
    let (kx, ky) = (kinetic_per_row(&sx), kinetic_per_row(&sy));
    let (fx, fy) = (sx.last().expect("states"), sy.last().expect("states"));
    let mut worst: f64 = 0.0;
    let mut violations = 0;
    for r in 0..x.rows() {
        let lhs: f64 = fx.row(r).iter().zip(fy.row(r)).map(|(a, b)| (a - b) * (a - b)).sum();
        let dxy: f64 = x.row(r).iter().zip(y.row(r)).map(|(a, b)| (a - b) * (a - b)).sum();
        let rhs = c * (dxy + kx[r] + ky[r]);
        if lhs > rhs * (1.0 + 1e-12) + 1e-300 {
            violations += 1;
        }
        if rhs > 0.0 {
            worst = worst.max(lhs / rhs);
        }
    }
    Ok(TriangleCheck {
        worst_ratio: worst,
        violations,
    })
}

/// Dense Jacobian of a row map at one point by central differences.
pub fn jacobian_fd(map: &dyn RowMap, x: &[f64], h: f64) -> Result<Vec<Vec<f64>>> {
    let d = x.len();
    let mut jac = vec![vec![0.0; d]; d];
    for j in 0..d {
        let mut p = x.to_vec();
        let mut m = x.to_vec();
        p[j] += h;
        m[j] -= h;
        let fp = map.apply(&Tensor::matrix(1, d, p)?)?;
        let fm = map.apply(&Tensor::matrix(1, d, m)?)?;
        for (i, row) in jac.iter_mut().enumerate() {
            row[j] = (fp.data()[i] - fm.data()[i]) / (2.0 * h);
        }
    }
    Ok(jac)
}

/// Largest singular value of a small dense matrix via Jacobi rotations on `A^T A`.
pub fn largest_singular_value(a: &[Vec<f64>]) -> f64 {
    let d = a.first().map_or(0, |r| r.len());
    let mut m = vec![vec![0.0; d]; d];
    for i in 0..d {
        for j in 0..d {
            m[i][j] = a.iter().map(|row| row[i] * row[j]).sum();
        }
    }
    for _sweep in 0..100 {
        let off: f64 = (0..d).flat_map(|i| (0..d).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| m[i][j] * m[i][j]).sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..d {
            for q in p + 1..d {
                if m[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (m[q][q] - m[p][p]) / (2.0 * m[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..d {
                    let (mkp, mkq) = (m[k][p], m[k][q]);
                    m[k][p] = c * mkp - s * mkq;
                    m[k][q] = s * mkp + c * mkq;
                }
                for k in 0..d {
                    let (mpk, mqk) = (m[p][k], m[q][k]);
                    m[p][k] = c * mpk - s * mqk;
                    m[q][k] = s * mpk + c * mqk;
                }
            }
        }
    }
    (0..d).map(|i| m[i][i]).fold(0.0, f64::max).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flows::{Activation, CouplingKind, FlowConfig};
    use crate::rng::seeded;
    use rand::Rng as _;

    fn mat(rows: usize, data: Vec<f64>) -> LinearMap {
        LinearMap(Tensor::matrix(rows, data.len() / rows, data).unwrap())
    }

    fn random_stack(d: usize, steps: usize, kind: CouplingKind, seed: u64) -> FlowStack {
        let cfg = FlowConfig {
            dim: d,
            steps,
            hidden: vec![8],
            activation: Activation::Tanh,
            kind,
            linear: false,
        };
        let mut r = seeded(seed);
        let mut s = FlowStack::from_config(&cfg, &mut r).unwrap();
        s.randomize(&mut r, 0.4);
        s
    }

    fn batch(n: usize, d: usize, seed: u64) -> Tensor {
        let mut r = seeded(seed);
        Tensor::matrix(n, d, (0..n * d).map(|_| r.random_range(-2.0..2.0)).collect()).unwrap()
    }

    #[test]
    fn linear_examples() {
        let cfg = PowerIteration::default();
        let e = jacobian_spectral_norm(&mat(2, vec![3.0, 0.0, 0.0, 0.5]), &[0.3, -0.1], &cfg).unwrap();
        assert!((e.value - 3.0).abs() < 1e-6 && e.converged, "{:?}", e);
        let e = jacobian_spectral_norm(&mat(2, vec![0.0, 2.0, 0.0, 0.0]), &[1.0, 1.0], &cfg).unwrap();
        assert!((e.value - 2.0).abs() < 1e-6, "{:?}", e);
    }

    #[test]
    fn constant_scale_coupling() {
        // s = ln 2 and t = 0.7 from the output bias of a zero-weight conditioner.
        let cfg = FlowConfig {
            dim: 2,
            steps: 1,
            hidden: vec![4],
            activation: Activation::Tanh,
            kind: CouplingKind::Affine { clamp: None },
            linear: false,
        };
        let mut s = FlowStack::from_config(&cfg, &mut seeded(1)).unwrap();
        let mut p = s.params().to_vec();
        let last = p.len() - 1;
        p[last] = Tensor::vector(vec![2f64.ln(), 0.7]);
        s.set_params(p).unwrap();
        let e = jacobian_spectral_norm(&StackStep::new(&s, 0), &[0.4, -1.2], &PowerIteration::default()).unwrap();
        assert!((e.value - 2.0).abs() < 1e-6, "{:?}", e);
    }

    #[test]
    fn identity_stack_report() {
        let cfg = FlowConfig {
            dim: 2,
            steps: 3,
            hidden: vec![8],
            activation: Activation::Relu,
            kind: CouplingKind::Spline { bins: 4, bound: 3.0 },
            linear: false,
        };
        let s = FlowStack::from_config(&cfg, &mut seeded(2)).unwrap();
        let r = lipschitz_report(&s, &batch(16, 2, 3), &PowerIteration::default()).unwrap();
        assert_eq!(r.per_layer.len(), 5);
        assert!(r.per_layer.iter().all(|b| (b - 1.0).abs() < 1e-8), "{:?}", r.per_layer);
        assert!((r.product - 1.0).abs() < 1e-8);
    }

    #[test]
    fn scaled_layers_multiply() {
        // x2 on the second coordinate, then (after reversal) x3 on the first.
        let cfg = FlowConfig {
            dim: 2,
            steps: 2,
            hidden: vec![4],
            activation: Activation::Tanh,
            kind: CouplingKind::Affine { clamp: None },
            linear: false,
        };
        let mut s = FlowStack::from_config(&cfg, &mut seeded(4)).unwrap();
        let mut p = s.params().to_vec();
        let half = p.len() / 2;
        p[half - 1] = Tensor::vector(vec![2f64.ln(), 0.0]);
        p[2 * half - 1] = Tensor::vector(vec![3f64.ln(), 0.0]);
        s.set_params(p).unwrap();
        let r = lipschitz_report(&s, &batch(8, 2, 5), &PowerIteration::default()).unwrap();
        assert_eq!(r.per_layer[1], 1.0);
        assert!((r.product - 6.0).abs() < 1e-6, "{:?}", r);
        let prod: f64 = r.per_layer.iter().product();
        assert!((prod - r.product).abs() <= 1e-12 * r.product);
    }

    #[test]
    fn power_iteration_matches_dense_svd() {
        for (d, kind) in [
            (2, CouplingKind::Affine { clamp: None }),
            (3, CouplingKind::Spline { bins: 5, bound: 3.0 }),
            (5, CouplingKind::Affine { clamp: Some(2.0) }),
        ] {
            let s = random_stack(d, 3, kind, 10 + d as u64);
            let x = batch(6, d, 20 + d as u64);
            let states = s.forward_eval(&x).unwrap().states;
            for k in 0..s.steps() {
                let map = StackStep::new(&s, k);
                let est = spectral_norms(&map, &states[k], &PowerIteration::default()).unwrap();
                for r in 0..x.rows() {
                    let jac = jacobian_fd(&map, states[k].row(r), 1e-6).unwrap();
                    let sv = largest_singular_value(&jac);
                    let rel = (est[r].value - sv).abs() / sv;
                    assert!(rel < 1e-4, "d={} k={} row={}: {} vs {}", d, k, r, est[r].value, sv);
                }
            }
        }
    }

    #[test]
    fn larger_eval_set_never_lowers_bounds() {
        let s = random_stack(2, 4, CouplingKind::Spline { bins: 6, bound: 3.0 }, 30);
        let all = batch(40, 2, 31);
        let cfg = PowerIteration::default();
        let small = lipschitz_report(&s, &all.slice_rows(0, 10), &cfg).unwrap();
        let big = lipschitz_report(&s, &all, &cfg).unwrap();
        for (a, b) in small.per_layer.iter().zip(&big.per_layer) {
            assert!(b >= a, "{} < {}", b, a);
        }
    }

    #[test]
    fn straightness_identity_and_linear() {
        let cfg = FlowConfig {
            dim: 2,
            steps: 4,
            hidden: vec![4],
            activation: Activation::Tanh,
            kind: CouplingKind::Affine { clamp: None },
            linear: false,
        };
        let s = FlowStack::from_config(&cfg, &mut seeded(7)).unwrap();
        assert_eq!(straightness_metric(&s, &batch(10, 2, 8)).unwrap(), 0.0);

        let z = batch(10, 2, 9);
        let shift = Tensor::matrix(1, 2, vec![1.5, -0.5]).unwrap();
        let states: Vec<Tensor> = (0..=5)
            .map(|k| {
                let t = k as f64 / 5.0;
                let mut s = z.clone();
                for r in 0..s.rows() {
                    for (j, v) in s.row_mut(r).iter_mut().enumerate() {
                        *v += t * shift.data()[j];
                    }
                }
                s
            })
            .collect();
        assert!(straightness_of(&states) < 1e-12);
    }

    #[test]
    fn order_probe_values() {
        let rows = discretization_order_probe(Probe::Cubic, &[4, 8]).unwrap();
        assert!((rows[0].error - 0.0617).abs() < 1e-3 && (rows[1].error - 0.0156).abs() < 1e-3);
        assert!((rows[0].discrete - 1.73828125).abs() < 1e-12);
        assert!((rows[1].discrete - 1.7844238281).abs() < 1e-9);
        assert!((rows[0].order.unwrap() - 1.99).abs() < 0.01);

        let lin = discretization_order_probe(Probe::Linear, &[4, 8, 16]).unwrap();
        assert!(lin.iter().all(|r| r.error < 1e-14));

        for p in [Probe::Linear, Probe::Quadratic, Probe::Cubic] {
            let rows = discretization_order_probe(p, &[4, 8, 16, 32]).unwrap();
            for r in &rows[..3] {
                assert!(r.order.unwrap() >= 1.0, "{:?} {:?}", p, r);
            }
        }
        // (4K^2 - 1) / (3K^2) in closed form
        let q = discretization_order_probe(Probe::Quadratic, &[4]).unwrap();
        assert!((q[0].discrete - 63.0 / 48.0).abs() < 1e-12);
    }

    #[test]
    fn triangle_bound_holds_with_three() {
        for (i, kind) in [CouplingKind::Affine { clamp: None }, CouplingKind::Spline { bins: 4, bound: 2.0 }].into_iter().enumerate() {
            let s = random_stack(2, 4, kind, 40 + i as u64);
            let x = batch(10_000, 2, 41 + i as u64);
            let y = batch(10_000, 2, 42 + i as u64);
            let c = triangle_bound_check(&s, &x, &y, 3.0).unwrap();
            assert_eq!(c.violations, 0, "worst ratio {}", c.worst_ratio);
        }
    }

    #[test]
    fn triangle_bound_with_two_can_fail() {
        // One step F(x) = 3x - 1 in d = 1: x = 1, y = 0 gives 9 on the left and
        // 2 + 1 + 1 = 4 on the right when the constant is 2.
        let fx: f64 = 3.0 * 1.0 - 1.0;
        let fy: f64 = 3.0 * 0.0 - 1.0;
        let lhs = (fx - fy).powi(2);
        let rhs2 = 2.0 * 1.0 + (fx - 1.0).powi(2) + (fy - 0.0).powi(2);
        let rhs3 = 3.0 * (1.0 + (fx - 1.0).powi(2) + (fy - 0.0).powi(2));
        assert!(lhs > rhs2);
        assert!(lhs <= rhs3);
    }

    #[test]
    fn invalid_inputs() {
        let cfg = PowerIteration { tol: 0.0, ..Default::default() };
        assert!(jacobian_spectral_norm(&mat(1, vec![1.0]), &[0.0], &cfg).is_err());
        let s = random_stack(2, 1, CouplingKind::Affine { clamp: None }, 50);
        assert!(straightness_metric(&s, &batch(2, 2, 1)).is_err());
        assert!(lipschitz_report(&s, &Tensor::zeros(&[0, 2]), &PowerIteration::default()).is_err());
    }
}
