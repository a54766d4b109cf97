//! Analytic densities with diagonal covariances, and the crowd-motion obstacle.

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

const LN_2PI: f64 = 1.837_877_066_409_345_3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Gaussian {
    mean: Vec<f64>,
    var: Vec<f64>,
}

impl Gaussian {
    pub fn new(mean: Vec<f64>, var: Vec<f64>) -> Result<Self> {
        if mean.len() != var.len() || mean.is_empty() {
            return Err(Error::invalid(format!(
                "gaussian mean/variance lengths {} and {}",
                mean.len(),
                var.len()
            )));
        }
        if let Some(v) = var.iter().find(|v| !(**v > 0.0 && v.is_finite())) {
            return Err(Error::invalid(format!("variance entries must be > 0, got {}", v)));
        }
        if mean.iter().any(|m| !m.is_finite()) {
            return Err(Error::invalid("gaussian mean must be finite"));
        }
        Ok(Gaussian { mean, var })
    }

    pub fn isotropic(mean: Vec<f64>, var: f64) -> Result<Self> {
        let d = mean.len();
        Self::new(mean, vec![var; d])
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn var(&self) -> &[f64] {
        &self.var
    }

    fn log_norm(&self) -> f64 {
        -0.5 * (self.dim() as f64 * LN_2PI + self.var.iter().map(|v| v.ln()).sum::<f64>())
    }

    fn log_prob_row(&self, x: &[f64]) -> f64 {
        let q: f64 = x
            .iter()
            .zip(&self.mean)
            .zip(&self.var)
            .map(|((x, m), v)| (x - m) * (x - m) / v)
            .sum();
        self.log_norm() - 0.5 * q
    }

    fn log_prob_node(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let n = g.value(x).rows();
        let mu = g.constant(Tensor::vector(self.mean.clone()));
        let mu = g.broadcast_rows(mu, n)?;
        let prec = g.constant(Tensor::vector(self.var.iter().map(|v| 1.0 / v.sqrt()).collect()));
        let prec = g.broadcast_rows(prec, n)?;
        let diff = g.sub(x, mu)?;
        let z = g.mul(diff, prec)?;
        let sq = g.square(z)?;
        let q = g.sum_last(sq)?;
        let half = g.scale(q, -0.5)?;
        g.add_scalar(half, self.log_norm())
    }

    fn sample_into(&self, rng: &mut Rng, out: &mut [f64]) {
        for ((o, m), v) in out.iter_mut().zip(&self.mean).zip(&self.var) {
            let e: f64 = rng.sample(StandardNormal);
            *o = m + v.sqrt() * e;
        }
    }
}

/// Base or target density of a problem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum DensitySpec {
    Gaussian(Gaussian),
    Mixture {
        weights: Vec<f64>,
        components: Vec<Gaussian>,
    },
}

impl DensitySpec {
    pub fn gaussian(mean: Vec<f64>, var: Vec<f64>) -> Result<Self> {
        Ok(DensitySpec::Gaussian(Gaussian::new(mean, var)?))
    }

    pub fn isotropic(mean: Vec<f64>, var: f64) -> Result<Self> {
        Ok(DensitySpec::Gaussian(Gaussian::isotropic(mean, var)?))
    }

    pub fn standard_normal(dim: usize) -> Self {
        DensitySpec::Gaussian(Gaussian {
            mean: vec![0.0; dim],
            var: vec![1.0; dim],
        })
    }

    pub fn mixture(weights: Vec<f64>, components: Vec<Gaussian>) -> Result<Self> {
        if weights.len() != components.len() || weights.is_empty() {
            return Err(Error::invalid("mixture needs one weight per component"));
        }
        let d = components[0].dim();
        if components.iter().any(|c| c.dim() != d) {
            return Err(Error::invalid("mixture components differ in dimension"));
        }
        if weights.iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::invalid("mixture weights must be non-negative"));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::invalid(format!("mixture weights sum to {}, not 1", total)));
        }
        Ok(DensitySpec::Mixture {
            weights,
            components,
        })
    }

    /// Equal-weight ring of `count` isotropic Gaussians in the first two
    /// coordinates, centers `radius * (cos(2 pi i / count), sin(2 pi i / count))`
    /// for `i = 1..=count`.
    pub fn ring(count: usize, radius: f64, var: f64, dim: usize) -> Result<Self> {
        if dim < 2 {
            return Err(Error::invalid("ring density needs dim >= 2"));
        }
        let comps = (1..=count)
            .map(|i| Gaussian::isotropic(ring_center(i, count, radius, dim), var))
            .collect::<Result<Vec<_>>>()?;
        Self::mixture(vec![1.0 / count as f64; count], comps)
    }

    pub fn dim(&self) -> usize {
        match self {
            DensitySpec::Gaussian(g) => g.dim(),
            DensitySpec::Mixture { components, .. } => components[0].dim(),
        }
    }

    fn check_dim(&self, x: &Tensor) -> Result<()> {
        if x.rank() != 2 || x.cols() != self.dim() {
            return Err(Error::shape(
                "log_prob",
                format!("density of dim {} given batch {:?}", self.dim(), x.shape()),
            ));
        }
        Ok(())
    }

    /// Exact log-density of each row.
    pub fn log_prob(&self, x: &Tensor) -> Result<Vec<f64>> {
        self.check_dim(x)?;
        Ok((0..x.rows()).map(|i| self.log_prob_row(x.row(i))).collect())
    }

    pub fn log_prob_row(&self, x: &[f64]) -> f64 {
        match self {
            DensitySpec::Gaussian(g) => g.log_prob_row(x),
            DensitySpec::Mixture {
                weights,
                components,
            } => {
                let terms: Vec<f64> = weights
                    .iter()
                    .zip(components)
                    .filter(|(w, _)| **w > 0.0)
                    .map(|(w, c)| w.ln() + c.log_prob_row(x))
                    .collect();
                let m = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                m + terms.iter().map(|t| (t - m).exp()).sum::<f64>().ln()
            }
        }
    }

    /// Differentiable log-density, `[n, d] -> [n]`.
    pub fn log_prob_node(&self, g: &mut Graph, x: Var) -> Result<Var> {
        self.check_dim(g.value(x))?;
        match self {
            DensitySpec::Gaussian(c) => c.log_prob_node(g, x),
            DensitySpec::Mixture {
                weights,
                components,
            } => {
                let n = g.value(x).rows();
                let mut cols = Vec::new();
                for (w, c) in weights.iter().zip(components) {
                    if *w <= 0.0 {
                        continue;
                    }
                    let lp = c.log_prob_node(g, x)?;
                    let lp = g.add_scalar(lp, w.ln())?;
                    cols.push(g.reshape(lp, vec![n, 1])?);
                }
                let all = g.concat(&cols)?;
                g.logsumexp(all)
            }
        }
    }

    pub fn sample(&self, n: usize, rng: &mut Rng) -> Tensor {
        self.sample_labeled(n, rng).0
    }

    /// Samples together with the mixture component each row came from.
    pub fn sample_labeled(&self, n: usize, rng: &mut Rng) -> (Tensor, Vec<usize>) {
        let d = self.dim();
        let mut data = vec![0.0; n * d];
        let mut labels = vec![0; n];
        for (i, row) in data.chunks_mut(d).enumerate() {
            match self {
                DensitySpec::Gaussian(g) => g.sample_into(rng, row),
                DensitySpec::Mixture {
                    weights,
                    components,
                } => {
                    let u: f64 = rng.random();
                    let mut acc = 0.0;
                    let mut k = weights.len() - 1;
                    for (j, w) in weights.iter().enumerate() {
                        acc += w;
                        if u < acc && *w > 0.0 {
                            k = j;
                            break;
                        }
                    }
                    while weights[k] == 0.0 && k > 0 {
                        k -= 1;
                    }
                    labels[i] = k;
                    components[k].sample_into(rng, row);
                }
            }
        }
        (Tensor::from_parts(vec![n, d], data), labels)
    }

    /// Mean and diagonal variance when the density is a single Gaussian.
    pub fn as_gaussian(&self) -> Option<&Gaussian> {
        match self {
            DensitySpec::Gaussian(g) => Some(g),
            DensitySpec::Mixture { .. } => None,
        }
    }
}

pub fn ring_center(i: usize, count: usize, radius: f64, dim: usize) -> Vec<f64> {
    let th = 2.0 * std::f64::consts::PI * i as f64 / count as f64;
    let mut c = vec![0.0; dim];
    c[0] = radius * th.cos();
    c[1] = radius * th.sin();
    c
}

/// Scaled bivariate normal density read from the first two coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObstacleSpec {
    pub magnitude: f64,
    pub mean: [f64; 2],
    pub var: [f64; 2],
}

impl Default for ObstacleSpec {
    fn default() -> Self {
        ObstacleSpec {
            magnitude: 50.0,
            mean: [0.0, 0.0],
            var: [1.0, 0.5],
        }
    }
}

impl ObstacleSpec {
    pub fn new(magnitude: f64, mean: [f64; 2], var: [f64; 2]) -> Result<Self> {
        if !(magnitude >= 0.0) {
            return Err(Error::invalid("obstacle magnitude must be >= 0"));
        }
        if var.iter().any(|v| !(*v > 0.0)) {
            return Err(Error::invalid("obstacle variances must be > 0"));
        }
        Ok(ObstacleSpec { magnitude, mean, var })
    }

    fn gaussian(&self) -> Gaussian {
        Gaussian {
            mean: self.mean.to_vec(),
            var: self.var.to_vec(),
        }
    }

    fn check(&self, cols: usize) -> Result<()> {
        if cols < 2 {
            return Err(Error::shape("obstacle", format!("needs d >= 2, got {}", cols)));
        }
        Ok(())
    }

    pub fn eval(&self, x: &Tensor) -> Result<Vec<f64>> {
        self.check(x.cols())?;
        let g = self.gaussian();
        Ok((0..x.rows())
            .map(|i| self.magnitude * g.log_prob_row(&x.row(i)[..2]).exp())
            .collect())
    }

    /// Differentiable obstacle values, `[n, d] -> [n]`.
    pub fn eval_node(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let cols = g.value(x).cols();
        self.check(cols)?;
        let xy = if cols == 2 { x } else { g.slice_cols(x, 0, 2)? };
        let lp = self.gaussian().log_prob_node(g, xy)?;
        let p = g.exp(lp)?;
        g.scale(p, self.magnitude)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use approx::assert_abs_diff_eq;

    fn point(v: &[f64]) -> Tensor {
        Tensor::matrix(1, v.len(), v.to_vec()).unwrap()
    }

    #[test]
    fn standard_normal_at_zero() {
        let p = DensitySpec::standard_normal(1);
        assert_abs_diff_eq!(p.log_prob(&point(&[0.0])).unwrap()[0], -0.918939, epsilon = 1e-6);
    }

    #[test]
    fn isotropic_at_mean() {
        let p = DensitySpec::isotropic(vec![0.0, 0.0], 0.3).unwrap();
        let expected = -(2.0 * std::f64::consts::PI * 0.3).ln();
        assert_abs_diff_eq!(p.log_prob(&point(&[0.0, 0.0])).unwrap()[0], expected, epsilon = 1e-12);
        assert_abs_diff_eq!(expected, -0.633878, epsilon = 1e-4);
    }

    #[test]
    fn degenerate_mixture_equals_component() {
        let c = Gaussian::new(vec![1.0, -2.0], vec![0.5, 2.0]).unwrap();
        let m = DensitySpec::mixture(vec![0.5, 0.5], vec![c.clone(), c.clone()]).unwrap();
        let s = DensitySpec::Gaussian(c);
        let x = Tensor::from_rows(&[vec![0.3, 0.1], vec![-4.0, 3.0]]).unwrap();
        for (a, b) in m.log_prob(&x).unwrap().iter().zip(s.log_prob(&x).unwrap()) {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let p = DensitySpec::standard_normal(3);
        assert!(p.log_prob(&point(&[0.0, 1.0])).is_err());
    }

    #[test]
    fn invalid_specs_rejected() {
        assert!(Gaussian::new(vec![0.0], vec![0.0]).is_err());
        let c = Gaussian::isotropic(vec![0.0], 1.0).unwrap();
        assert!(DensitySpec::mixture(vec![0.5, 0.6], vec![c.clone(), c.clone()]).is_err());
        assert!(ObstacleSpec::new(-1.0, [0.0; 2], [1.0; 2]).is_err());
    }

    #[test]
    fn graph_log_prob_matches_direct() {
        let ring = DensitySpec::ring(8, 4.0, 0.3, 2).unwrap();
        let x = Tensor::from_rows(&[vec![0.3, 0.1], vec![-4.0, 3.0], vec![2.8, 2.9]]).unwrap();
        let mut g = Graph::new();
        let v = g.constant(x.clone());
        let lp = ring.log_prob_node(&mut g, v).unwrap();
        for (a, b) in g.value(lp).data().iter().zip(ring.log_prob(&x).unwrap()) {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn sample_mean_is_near_zero() {
        let p = DensitySpec::standard_normal(2);
        let mut rng = seeded(42);
        let s = p.sample(100_000, &mut rng);
        for j in 0..2 {
            let m: f64 = (0..s.rows()).map(|i| s.get2(i, j)).sum::<f64>() / s.rows() as f64;
            assert!(m.abs() < 0.02, "coordinate {} mean {}", j, m);
        }
    }

    #[test]
    fn zero_weight_component_never_sampled() {
        let a = Gaussian::isotropic(vec![-5.0], 0.01).unwrap();
        let b = Gaussian::isotropic(vec![5.0], 0.01).unwrap();
        let m = DensitySpec::mixture(vec![1.0, 0.0], vec![a, b]).unwrap();
        let (s, labels) = m.sample_labeled(1000, &mut seeded(1));
        assert!(labels.iter().all(|&l| l == 0));
        assert!(s.data().iter().all(|&v| v < 0.0));
    }

    #[test]
    fn ring_component_counts_within_three_sigma() {
        let ring = DensitySpec::ring(8, 4.0, 0.3, 2).unwrap();
        let n = 80_000;
        let (_, labels) = ring.sample_labeled(n, &mut seeded(5));
        let mut counts = [0usize; 8];
        for l in labels {
            counts[l] += 1;
        }
        let p: f64 = 1.0 / 8.0;
        let sd = (n as f64 * p * (1.0 - p)).sqrt();
        for c in counts {
            assert!((c as f64 - n as f64 * p).abs() < 3.0 * sd, "{:?}", counts);
        }
        // centers at 4 cos(pi i / 4), 4 sin(pi i / 4)
        let c1 = ring_center(1, 8, 4.0, 2);
        assert_abs_diff_eq!(c1[0], 4.0 * (std::f64::consts::PI / 4.0).cos(), epsilon = 1e-12);
        assert_abs_diff_eq!(c1[1], 4.0 * (std::f64::consts::PI / 4.0).sin(), epsilon = 1e-12);
    }

    #[test]
    fn obstacle_values() {
        let q = ObstacleSpec::default();
        let v = q.eval(&Tensor::from_rows(&[vec![0.0, 0.0], vec![1.0, 0.0], vec![1e3, 1e3]]).unwrap()).unwrap();
        let peak = 50.0 / (2.0 * std::f64::consts::PI * 0.5f64.sqrt());
        assert_abs_diff_eq!(v[0], peak, epsilon = 1e-12);
        assert_abs_diff_eq!(v[0], 11.254, epsilon = 1e-3);
        assert_abs_diff_eq!(v[1], peak * (-0.5f64).exp(), epsilon = 1e-12);
        assert_abs_diff_eq!(v[1], 6.826, epsilon = 1e-3);
        assert!(v[2] < 1e-300);
    }

    #[test]
    fn obstacle_reads_first_two_coordinates_only() {
        let q = ObstacleSpec::default();
        let a = q.eval(&point(&[0.5, -0.2, 9.0, -3.0])).unwrap()[0];
        let b = q.eval(&point(&[0.5, -0.2])).unwrap()[0];
        assert_eq!(a, b);
        assert!(q.eval(&point(&[0.5])).is_err());
        let mut g = Graph::new();
        let x = g.constant(point(&[0.5, -0.2, 9.0, -3.0]));
        let v = q.eval_node(&mut g, x).unwrap();
        assert_abs_diff_eq!(g.value(v).data()[0], a, epsilon = 1e-12);
    }
}
