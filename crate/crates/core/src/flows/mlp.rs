//! Fully connected conditioner networks.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
}

impl std::str::FromStr for Activation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "tanh" => Ok(Activation::Tanh),
            other => Err(Error::Config(format!("unknown activation '{}'", other))),
        }
    }
}

/// Layer widths from input to output; parameters are `(W [in, out], b [out])`
/// pairs in order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub widths: Vec<usize>,
    pub activation: Activation,
}

impl Mlp {
    pub fn new(input: usize, hidden: &[usize], output: usize, activation: Activation) -> Self {
        let mut widths = vec![input];
        widths.extend_from_slice(hidden);
        widths.push(output);
        Mlp { widths, activation }
    }

    pub fn param_count(&self) -> usize {
        2 * (self.widths.len() - 1)
    }

    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        self.widths
            .windows(2)
            .flat_map(|w| [vec![w[0], w[1]], vec![w[1]]])
            .collect()
    }

    /// Uniform fan-in initialization; the output layer starts at zero.
    pub fn init(&self, rng: &mut Rng) -> Vec<Tensor> {
        let last = self.widths.len() - 2;
        let mut out = Vec::new();
        for (l, w) in self.widths.windows(2).enumerate() {
            let (fan_in, fan_out) = (w[0], w[1]);
            if l == last {
                out.push(Tensor::zeros(&[fan_in, fan_out]));
                out.push(Tensor::zeros(&[fan_out]));
            } else {
                let b = 1.0 / (fan_in.max(1) as f64).sqrt();
                let mut draw = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.random_range(-b..b)).collect() };
                out.push(Tensor::from_parts(vec![fan_in, fan_out], draw(fan_in * fan_out)));
                out.push(Tensor::from_parts(vec![fan_out], draw(fan_out)));
            }
        }
        out
    }

    pub fn check_params(&self, params: &[Tensor]) -> Result<()> {
        let shapes = self.param_shapes();
        if params.len() != shapes.len() {
            return Err(Error::shape("mlp", format!("expected {} tensors, got {}", shapes.len(), params.len())));
        }
        for (p, s) in params.iter().zip(&shapes) {
            if p.shape() != s.as_slice() {
                return Err(Error::shape("mlp", format!("parameter {:?} declared {:?}", p.shape(), s)));
            }
        }
        Ok(())
    }

    pub fn forward(&self, g: &mut Graph, params: &[Var], x: Var) -> Result<Var> {
        let n = g.value(x).rows();
        let layers = self.widths.len() - 1;
        let mut h = x;
        for l in 0..layers {
            let z = g.matmul(h, params[2 * l])?;
            let b = g.broadcast_rows(params[2 * l + 1], n)?;
            h = g.add(z, b)?;
            if l + 1 < layers {
                h = match self.activation {
                    Activation::Relu => g.relu(h)?,
                    Activation::Tanh => g.tanh(h)?,
                };
            }
        }
        Ok(h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    #[test]
    fn fresh_network_outputs_zero() {
        let net = Mlp::new(3, &[8, 8], 4, Activation::Relu);
        let params = net.init(&mut seeded(0));
        net.check_params(&params).unwrap();
        let mut g = Graph::new();
        let vs: Vec<Var> = params.into_iter().map(|p| g.variable(p)).collect();
        let x = g.constant(Tensor::full(&[5, 3], 0.7));
        let y = net.forward(&mut g, &vs, x).unwrap();
        assert_eq!(g.value(y).shape(), &[5, 4]);
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn empty_input_gives_bias() {
        let net = Mlp::new(0, &[4], 2, Activation::Tanh);
        let mut params = net.init(&mut seeded(1));
        params[3] = Tensor::vector(vec![1.5, -2.0]);
        let mut g = Graph::new();
        let vs: Vec<Var> = params.into_iter().map(|p| g.constant(p)).collect();
        let x = g.constant(Tensor::zeros(&[3, 0]));
        let y = net.forward(&mut g, &vs, x).unwrap();
        assert_eq!(g.value(y).row(2), &[1.5, -2.0]);
    }

    #[test]
    fn mismatched_parameters_rejected() {
        let net = Mlp::new(2, &[3], 1, Activation::Relu);
        let mut params = net.init(&mut seeded(2));
        params[0] = Tensor::zeros(&[3, 3]);
        assert!(net.check_params(&params).is_err());
    }
}
