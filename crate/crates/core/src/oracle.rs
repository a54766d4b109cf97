//! Ground truth for validating trained transports: exact discrete OT between
//! equal-size point clouds, closed-form Gaussian W2, and the equal-spacing
//! optimum of the discrete kinetic energy with fixed endpoints.

use serde::Serialize;
use thiserror::Error;

use crate::flows::FlowStack;
use crate::objectives::transport_cost_value;
use crate::tensor::Tensor;

/// Largest instance accepted by the cubic assignment solver.
pub const MAX_POINTS: usize = 2048;

#[derive(Debug, Error, PartialEq)]
pub enum OracleError {
    #[error("point sets differ: {0:?} vs {1:?}")]
    SizeMismatch(Vec<usize>, Vec<usize>),
    #[error("{0} points exceed the assignment limit of {MAX_POINTS}")]
    TooLarge(usize),
    #[error("empty point set")]
    Empty,
    #[error("negative or non-finite variance {0}")]
    Variance(f64),
    #[error("non-finite coordinate in input")]
    NonFinite,
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransportPlan {
    pub source: Tensor,
    pub target: Tensor,
    /// `source[i]` is matched to `target[assignment[i]]`.
    pub assignment: Vec<usize>,
    /// `sum_i |x_i - y_sigma(i)|^2 / n`, the empirical W2^2.
    pub cost: f64,
}

fn sqdist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum()
}

/// Minimum-cost perfect matching under squared Euclidean cost
/// (shortest augmenting paths with potentials, `O(n^3)`).
pub fn discrete_ot_exact(x: &Tensor, y: &Tensor) -> Result<TransportPlan, OracleError> {
    if x.rank() != 2 || x.shape() != y.shape() {
        return Err(OracleError::SizeMismatch(x.shape().to_vec(), y.shape().to_vec()));
    }
    let n = x.rows();
    if n == 0 {
        return Err(OracleError::Empty);
    }
    if n > MAX_POINTS {
        return Err(OracleError::TooLarge(n));
    }
    if x.first_non_finite().is_some() || y.first_non_finite().is_some() {
        return Err(OracleError::NonFinite);
    }
    let cost: Vec<f64> = (0..n).flat_map(|i| (0..n).map(move |j| (i, j))).map(|(i, j)| sqdist(x.row(i), y.row(j))).collect();
    let assignment = assign(&cost, n);
    let total: f64 = assignment.iter().enumerate().map(|(i, &j)| cost[i * n + j]).sum();
    Ok(TransportPlan {
        source: x.clone(),
        target: y.clone(),
        assignment,
        cost: total / n as f64,
    })
}

/// Hungarian algorithm on a dense row-major `n x n` cost matrix.
fn assign(cost: &[f64], n: usize) -> Vec<usize> {
    // 1-based rows/columns; column 0 is the virtual start.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    let mut minv = vec![0.0; n + 1];
    let mut used = vec![false; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        minv.iter_mut().for_each(|m| *m = f64::INFINITY);
        used.iter_mut().for_each(|b| *b = false);
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let row = &cost[(i0 - 1) * n..i0 * n];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = row[j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut out = vec![0; n];
    for j in 1..=n {
        out[p[j] - 1] = j - 1;
    }
    out
}

/// W2^2 between Gaussians with diagonal covariances (variances given).
pub fn gaussian_w2(mu1: &[f64], var1: &[f64], mu2: &[f64], var2: &[f64]) -> Result<f64, OracleError> {
    let d = mu1.len();
    if var1.len() != d || mu2.len() != d || var2.len() != d {
        return Err(OracleError::SizeMismatch(vec![d, var1.len()], vec![mu2.len(), var2.len()]));
    }
    if let Some(&bad) = var1.iter().chain(var2).find(|v| !(**v >= 0.0) || !v.is_finite()) {
        return Err(OracleError::Variance(bad));
    }
    Ok((0..d)
        .map(|j| (mu1[j] - mu2[j]).powi(2) + (var1[j].sqrt() - var2[j].sqrt()).powi(2))
        .sum())
}

#[derive(Debug, Clone, PartialEq)]
pub struct KktSolution {
    /// `F_1 .. F_{K-1}`.
    pub intermediates: Vec<Tensor>,
    /// `K * sum_k |F_k - F_{k-1}|^2`, averaged over rows.
    pub cost: f64,
}

/// Minimizes `sum_k |F_{k+1} - F_k|^2` with both endpoints fixed by solving the
/// stationarity system `2 F_i - F_{i-1} - F_{i+1} = 0` (tridiagonal, Thomas
/// algorithm) independently per coordinate.
pub fn kkt_equal_spacing(z: &Tensor, endpoint: &Tensor, k: usize) -> Result<KktSolution, OracleError> {
    if k < 2 {
        return Err(OracleError::Invalid(format!("need K >= 2, got {}", k)));
    }
    if z.rank() != 2 || z.shape() != endpoint.shape() {
        return Err(OracleError::SizeMismatch(z.shape().to_vec(), endpoint.shape().to_vec()));
    }
    let m = k - 1;
    // Forward sweep for the constant matrix tridiag(-1, 2, -1).
    let mut c_prime = vec![0.0; m];
    let mut denom = vec![0.0; m];
    for i in 0..m {
        denom[i] = if i == 0 { 2.0 } else { 2.0 + c_prime[i - 1] };
        c_prime[i] = -1.0 / denom[i];
    }
    // Solved for offsets from `z` so that a motionless instance stays exact.
    let mut inter = vec![Tensor::zeros(z.shape()); m];
    let mut d_prime = vec![0.0; m];
    for idx in 0..z.len() {
        let (a, b) = (z.data()[idx], endpoint.data()[idx]);
        let delta = b - a;
        for i in 0..m {
            let rhs = if i == m - 1 { delta } else { 0.0 };
            let prev = if i == 0 { 0.0 } else { d_prime[i - 1] };
            d_prime[i] = (rhs + prev) / denom[i];
        }
        let mut next = 0.0;
        for i in (0..m).rev() {
            let off = if i == m - 1 { d_prime[i] } else { d_prime[i] - c_prime[i] * next };
            inter[i].data_mut()[idx] = a + off;
            next = off;
        }
    }
    let mut states = Vec::with_capacity(k + 1);
    states.push(z.clone());
    states.extend(inter.iter().cloned());
    states.push(endpoint.clone());
    Ok(KktSolution {
        cost: transport_cost_value(&states),
        intermediates: inter,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StraightLineCheck {
    pub trained: f64,
    pub chord: f64,
    /// `trained / chord`, defined as 1 when both vanish.
    pub ratio: f64,
}

/// Compares the trained discrete transport cost with the straight chord cost
/// `mean |F_K(z) - z|^2`, its lower bound.
pub fn straight_line_cost_check(stack: &FlowStack, z: &Tensor) -> crate::Result<StraightLineCheck> {
    let states = stack.forward_eval(z)?.states;
    Ok(straight_line_of(&states))
}

pub fn straight_line_of(states: &[Tensor]) -> StraightLineCheck {
    let trained = transport_cost_value(states);
    let (z, end) = (&states[0], states.last().expect("states"));
    let chord = (0..z.rows()).map(|r| sqdist(z.row(r), end.row(r))).sum::<f64>() / z.rows() as f64;
    let ratio = if chord == 0.0 && trained == 0.0 { 1.0 } else { trained / chord };
    StraightLineCheck { trained, chord, ratio }
}
