//! Mean pairwise Gaussian kernel between two point sets, as a fused graph op.

use crate::autodiff::{CustomOp, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `mean_{a,b} exp(-|x_a - y_b|^2 / (2 h^2))` over all cross pairs.
pub fn kernel_mean(g: &mut Graph, x: Var, y: Var, bandwidth: f64) -> Result<Var> {
    let (xv, yv) = (g.value(x), g.value(y));
    check(xv, yv)?;
    if !(bandwidth > 0.0) {
        return Err(Error::invalid(format!("kernel bandwidth must be > 0, got {}", bandwidth)));
    }
    let v = kernel_value(xv, yv, bandwidth);
    g.custom(&[x, y], Tensor::scalar(v), Box::new(KernelMean { bandwidth }))
}

fn check(x: &Tensor, y: &Tensor) -> Result<()> {
    if x.rank() != 2 || y.rank() != 2 || x.cols() != y.cols() {
        return Err(Error::shape("kernel_mean", format!("{:?} vs {:?}", x.shape(), y.shape())));
    }
    if x.rows() == 0 || y.rows() == 0 {
        return Err(Error::shape("kernel_mean", "empty point set"));
    }
    Ok(())
}

fn sqdist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum()
}

pub fn kernel_value(x: &Tensor, y: &Tensor, bandwidth: f64) -> f64 {
    let c = -0.5 / (bandwidth * bandwidth);
    let mut acc = 0.0;
    for a in 0..x.rows() {
        let xa = x.row(a);
        for b in 0..y.rows() {
            acc += (c * sqdist(xa, y.row(b))).exp();
        }
    }
    acc / (x.rows() * y.rows()) as f64
}

struct KernelMean {
    bandwidth: f64,
}

impl CustomOp for KernelMean {
    fn name(&self) -> &'static str {
        "kernel_mean"
    }

    fn backward(&self, grad_out: &Tensor, inputs: &[&Tensor], needs: &[bool]) -> Result<Vec<Option<Tensor>>> {
        let (x, y) = (inputs[0], inputs[1]);
        let (n, m, d) = (x.rows(), y.rows(), x.cols());
        let inv_h2 = 1.0 / (self.bandwidth * self.bandwidth);
        let scale = grad_out.item() / (n * m) as f64;
        let mut gx = vec![0.0; n * d];
        let mut gy = vec![0.0; m * d];
        for a in 0..n {
            let xa = x.row(a);
            for b in 0..m {
                let yb = y.row(b);
                let k = (-0.5 * inv_h2 * sqdist(xa, yb)).exp();
                let w = scale * k * inv_h2;
                for j in 0..d {
                    // d/dx_a of exp(-|x_a - y_b|^2 / 2h^2) = -k (x_a - y_b) / h^2
                    let t = w * (xa[j] - yb[j]);
                    gx[a * d + j] -= t;
                    gy[b * d + j] += t;
                }
            }
        }
        Ok(vec![
            needs[0].then(|| Tensor::from_parts(vec![n, d], gx)),
            needs[1].then(|| Tensor::from_parts(vec![m, d], gy)),
        ])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::finite_diff_check_many;

    #[test]
    fn collapsed_and_separated_points() {
        let p = Tensor::matrix(3, 2, vec![1.0, 1.0, 1.0, 1.0, 1.0, 1.0]).unwrap();
        assert_eq!(kernel_value(&p, &p, 1.0), 1.0);
        let q = p.map(|v| v + 2f64.sqrt());
        assert!((kernel_value(&p, &q, 1.0) - 0.135335).abs() < 1e-6);
    }

    #[test]
    fn symmetric_under_swap() {
        let x = Tensor::matrix(3, 2, vec![0.1, 0.7, -1.0, 2.0, 0.3, 0.3]).unwrap();
        let y = Tensor::matrix(2, 2, vec![1.1, -0.4, 0.0, 0.9]).unwrap();
        assert_eq!(kernel_value(&x, &y, 0.8), kernel_value(&y, &x, 0.8));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let x = Tensor::matrix(3, 2, vec![0.1, 0.7, -1.0, 2.0, 0.3, 0.3]).unwrap();
        let y = Tensor::matrix(4, 2, vec![1.1, -0.4, 0.0, 0.9, 0.5, 0.5, -0.2, 1.3]).unwrap();
        let err = finite_diff_check_many(|g, v| kernel_mean(g, v[0], v[1], 0.9), &[x, y], 1e-5).unwrap();
        assert!(err < 1e-8, "{}", err);
    }

    #[test]
    fn mismatched_dimensions_rejected() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[2, 2]));
        let y = g.constant(Tensor::zeros(&[2, 3]));
        assert!(kernel_mean(&mut g, x, y, 1.0).is_err());
    }
}
