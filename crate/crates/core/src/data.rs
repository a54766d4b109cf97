//! Synthetic datasets for density-estimation runs.

use std::f64::consts::PI;
use std::str::FromStr;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Dataset {
    /// 2-d projection of an S-shaped curve with small noise.
    SShape,
    Swiss,
    TwoGauss,
    /// Two interleaved spiral arms.
    Spiral,
    /// 6-d correlated, skewed, heavy-tailed rows standing in for a real table.
    Tabular,
}

impl Dataset {
    pub fn dim(self) -> usize {
        match self {
            Dataset::Tabular => TABULAR_DIM,
            _ => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Dataset::SShape => "s-shape",
            Dataset::Swiss => "swiss",
            Dataset::TwoGauss => "two-gauss",
            Dataset::Spiral => "spiral",
            Dataset::Tabular => "tabular",
        }
    }

    pub fn sample(self, n: usize, rng: &mut Rng) -> Tensor {
        let d = self.dim();
        let mut out = Vec::with_capacity(n * d);
        for _ in 0..n {
            match self {
                Dataset::SShape => out.extend(s_shape(rng)),
                Dataset::Swiss => out.extend(swiss(rng)),
                Dataset::TwoGauss => out.extend(two_gauss(rng)),
                Dataset::Spiral => out.extend(spiral(rng)),
                Dataset::Tabular => out.extend(tabular(rng)),
            }
        }
        Tensor::from_parts(vec![n, d], out)
    }
}

impl FromStr for Dataset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "s-shape" => Ok(Dataset::SShape),
            "swiss" => Ok(Dataset::Swiss),
            "two-gauss" => Ok(Dataset::TwoGauss),
            "spiral" => Ok(Dataset::Spiral),
            "tabular" => Ok(Dataset::Tabular),
            other => Err(Error::Config(format!("unknown dataset '{}'", other))),
        }
    }
}

fn normal(rng: &mut Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn s_shape(rng: &mut Rng) -> [f64; 2] {
    let t = 3.0 * PI * (rng.random::<f64>() - 0.5);
    let x = t.sin();
    let y = t.signum() * (t.cos() - 1.0);
    [x + 0.1 * normal(rng), y + 0.1 * normal(rng)]
}

fn swiss(rng: &mut Rng) -> [f64; 2] {
    let t = 1.5 * PI * (1.0 + 2.0 * rng.random::<f64>());
    let s = 1.0 / 3.0;
    [s * t * t.cos() + 0.2 * normal(rng), s * t * t.sin() + 0.2 * normal(rng)]
}

fn two_gauss(rng: &mut Rng) -> [f64; 2] {
    let c = if rng.random::<bool>() { 2.0 } else { -2.0 };
    [c + 0.5 * normal(rng), c + 0.5 * normal(rng)]
}

fn spiral(rng: &mut Rng) -> [f64; 2] {
    let r = rng.random::<f64>().sqrt() * 3.0 * PI;
    let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
    let x = sign * -r.cos() * r;
    let y = sign * r.sin() * r;
    [x / 3.0 + 0.15 * normal(rng), y / 3.0 + 0.15 * normal(rng)]
}

const TABULAR_DIM: usize = 6;

/// Fixed mixing for the tabular stand-in.
const MIX: [[f64; 4]; TABULAR_DIM] = [
    [1.0, 0.0, 0.0, 0.0],
    [0.6, 0.8, 0.0, 0.0],
    [0.0, 0.5, 0.9, 0.0],
    [-0.4, 0.0, 0.3, 0.8],
    [0.3, -0.6, 0.0, 0.5],
    [0.0, 0.0, -0.7, 0.7],
];

fn tabular(rng: &mut Rng) -> [f64; TABULAR_DIM] {
    let z = [normal(rng), normal(rng), normal(rng), normal(rng)];
    // Nonlinear latent features: a skewed one, a bimodal one, a heavy-tailed one.
    let u = [
        z[0],
        (z[1] + 1.5 * z[0].signum()) * 0.7,
        z[2].sinh() * 0.5,
        z[3] + 0.3 * z[0] * z[0],
    ];
    let mut out = [0.0; TABULAR_DIM];
    for (o, row) in out.iter_mut().zip(&MIX) {
        *o = row.iter().zip(&u).map(|(a, b)| a * b).sum::<f64>() + 0.05 * normal(rng);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    #[test]
    fn shapes_and_determinism() {
        for ds in [Dataset::SShape, Dataset::Swiss, Dataset::TwoGauss, Dataset::Spiral, Dataset::Tabular] {
            let a = ds.sample(100, &mut seeded(1));
            let b = ds.sample(100, &mut seeded(1));
            assert_eq!(a, b);
            assert_eq!(a.shape(), &[100, ds.dim()]);
            assert!(a.first_non_finite().is_none());
            assert_eq!(ds.name().parse::<Dataset>().unwrap(), ds);
        }
        assert!("moons".parse::<Dataset>().is_err());
    }

    #[test]
    fn two_gauss_is_balanced() {
        let x = Dataset::TwoGauss.sample(4000, &mut seeded(2));
        let upper = (0..x.rows()).filter(|&r| x.get2(r, 0) > 0.0).count();
        // binomial(4000, 1/2) has sd ~31.6
        assert!((upper as f64 - 2000.0).abs() < 4.0 * 31.6, "{}", upper);
    }

    #[test]
    fn s_shape_spans_both_arms() {
        let x = Dataset::SShape.sample(2000, &mut seeded(3));
        let hi = (0..x.rows()).filter(|&r| x.get2(r, 1) > 1.0).count();
        let lo = (0..x.rows()).filter(|&r| x.get2(r, 1) < -1.0).count();
        assert!(hi > 400 && lo > 400, "{} {}", hi, lo);
    }
}
