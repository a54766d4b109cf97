//! Learned invertible linear map `y = x M + b` with `M = A B`, where `A` is
//! lower triangular with diagonal `exp(s)` and `B` is unit upper triangular.
//! All-zero parameters give `M = I` exactly.

use crate::autodiff::{CustomOp, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const PARAM_NAMES: [&str; 4] = ["lower", "upper", "log_diag", "bias"];

pub fn param_shapes(d: usize) -> Vec<Vec<usize>> {
    vec![vec![d, d], vec![d, d], vec![d], vec![d]]
}

pub fn check_params(d: usize, params: &[Tensor]) -> Result<()> {
    let shapes = param_shapes(d);
    if params.len() != shapes.len() || params.iter().zip(&shapes).any(|(p, s)| p.shape() != s.as_slice()) {
        return Err(Error::shape(
            "linear_params",
            format!(
                "expected {:?}, got {:?}",
                shapes,
                params.iter().map(|p| p.shape().to_vec()).collect::<Vec<_>>()
            ),
        ));
    }
    Ok(())
}

fn mask(d: usize, keep: impl Fn(usize, usize) -> bool) -> Tensor {
    Tensor::from_parts(vec![d, d], (0..d * d).map(|k| if keep(k / d, k % d) { 1.0 } else { 0.0 }).collect())
}

/// Builds `M` as a graph node from `[lower, upper, log_diag]`.
fn matrix(g: &mut Graph, params: &[Var], d: usize) -> Result<Var> {
    let lo = g.constant(mask(d, |i, j| i > j));
    let up = g.constant(mask(d, |i, j| i < j));
    let eye = g.constant(mask(d, |i, j| i == j));
    let l = g.mul(params[0], lo)?;
    let e = g.exp(params[2])?;
    let e = g.broadcast_rows(e, d)?;
    let diag = g.mul(e, eye)?;
    let a = g.add(l, diag)?;
    let u = g.mul(params[1], up)?;
    let b = g.add(u, eye)?;
    g.matmul(a, b)
}

/// Applies the map (or its inverse) to `x: [n, d]`, returning the output and
/// the per-sample log-determinant `[n]`.
pub fn apply(g: &mut Graph, params: &[Var], x: Var, inverse: bool) -> Result<(Var, Var)> {
    let (n, d) = (g.value(x).rows(), g.value(x).cols());
    let m = matrix(g, params, d)?;
    let bias = g.broadcast_rows(params[3], n)?;
    let y = if inverse {
        let shifted = g.sub(x, bias)?;
        let value = solve_right(g.value(shifted), g.value(m))?;
        g.custom(&[shifted, m], value, Box::new(SolveRight))?
    } else {
        let xm = g.matmul(x, m)?;
        g.add(xm, bias)?
    };
    let s = g.sum(params[2])?;
    let s = if inverse { g.scale(s, -1.0)? } else { s };
    let s = g.reshape(s, vec![1])?;
    let ld = g.broadcast_rows(s, n)?;
    let ld = g.reshape(ld, vec![n])?;
    Ok((y, ld))
}

/// Numeric matrix `M` of a parameter set.
pub fn matrix_value(params: &[Tensor]) -> Tensor {
    let mut g = Graph::new();
    let p: Vec<Var> = params.iter().map(|t| g.constant(t.clone())).collect();
    let d = params[3].len();
    let m = matrix(&mut g, &p, d).expect("linear parameters were validated");
    g.value(m).clone()
}

/// LU factorization with partial pivoting of a small dense matrix.
struct Lu {
    n: usize,
    lu: Vec<f64>,
    piv: Vec<usize>,
}

impl Lu {
    fn new(a: &Tensor) -> Result<Self> {
        let n = a.rows();
        let mut lu = a.data().to_vec();
        let mut piv: Vec<usize> = (0..n).collect();
        for c in 0..n {
            let p = (c..n).max_by(|&i, &j| lu[i * n + c].abs().total_cmp(&lu[j * n + c].abs())).unwrap_or(c);
            if lu[p * n + c] == 0.0 {
                return Err(Error::NonFinite { op: "solve_right", index: c });
            }
            if p != c {
                for k in 0..n {
                    lu.swap(c * n + k, p * n + k);
                }
                piv.swap(c, p);
            }
            for r in c + 1..n {
                let f = lu[r * n + c] / lu[c * n + c];
                lu[r * n + c] = f;
                if f != 0.0 {
                    for k in c + 1..n {
                        lu[r * n + k] -= f * lu[c * n + k];
                    }
                }
            }
        }
        Ok(Lu { n, lu, piv })
    }

    /// Solves `A x = b` in place.
    fn solve(&self, b: &[f64]) -> Vec<f64> {
        let n = self.n;
        let mut x: Vec<f64> = self.piv.iter().map(|&p| b[p]).collect();
        for i in 0..n {
            for k in 0..i {
                x[i] -= self.lu[i * n + k] * x[k];
            }
        }
        for i in (0..n).rev() {
            for k in i + 1..n {
                x[i] -= self.lu[i * n + k] * x[k];
            }
            x[i] /= self.lu[i * n + i];
        }
        x
    }
}

fn transpose(a: &Tensor) -> Tensor {
    let (r, c) = (a.rows(), a.cols());
    Tensor::from_parts(vec![c, r], (0..r * c).map(|k| a.get2(k % r, k / r)).collect())
}

/// `X = B M^{-1}` row by row, i.e. `M^T x_i = b_i`.
pub fn solve_right(b: &Tensor, m: &Tensor) -> Result<Tensor> {
    if m.rank() != 2 || m.rows() != m.cols() || b.rank() != 2 || b.cols() != m.rows() {
        return Err(Error::shape("solve_right", format!("{:?} by {:?}", b.shape(), m.shape())));
    }
    let lu = Lu::new(&transpose(m))?;
    let mut out = Vec::with_capacity(b.len());
    for r in 0..b.rows() {
        out.extend(lu.solve(b.row(r)));
    }
    Ok(Tensor::from_parts(b.shape().to_vec(), out))
}

struct SolveRight;

impl CustomOp for SolveRight {
    fn name(&self) -> &'static str {
        "solve_right"
    }

    fn backward(&self, grad_out: &Tensor, inputs: &[&Tensor], needs: &[bool]) -> Result<Vec<Option<Tensor>>> {
        let (b, m) = (inputs[0], inputs[1]);
        // X = B M^{-1}:  dB = G M^{-T},  dM = -X^T G M^{-T}.
        let gm = solve_right(grad_out, &transpose(m))?;
        let gb = needs[0].then(|| gm.clone());
        let gmat = if needs[1] {
            let x = solve_right(b, m)?;
            let d = m.rows();
            let mut out = vec![0.0; d * d];
            for r in 0..x.rows() {
                let (xr, gr) = (x.row(r), gm.row(r));
                for i in 0..d {
                    for j in 0..d {
                        out[i * d + j] -= xr[i] * gr[j];
                    }
                }
            }
            Some(Tensor::from_parts(vec![d, d], out))
        } else {
            None
        };
        Ok(vec![gb, gmat])
    }
}
