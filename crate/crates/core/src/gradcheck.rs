//! Registered finite-difference gradient checks: every graph primitive, every
//! layer type, and every full objective on small random instances.

use rand::Rng as _;

use crate::autodiff::{finite_diff_check_many, Graph, Var};
use crate::data::Dataset;
use crate::densities::{DensitySpec, ObstacleSpec};
use crate::error::Result;
use crate::flows::{Activation, CouplingKind, FlowConfig, FlowStack};
use crate::objectives::{
    kernel_mean, nf_objective, total_objective, Interaction, InteractionQuadrature, MfgProblem, Population, Terminal,
    TransportQuadrature, Weights,
};
use crate::rng::{stream, Rng};
use crate::tensor::Tensor;

/// Tolerance on primitives and layers.
pub const PRIMITIVE_TOL: f64 = 1e-6;
/// Tolerance on full objectives.
pub const OBJECTIVE_TOL: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Group {
    Primitive,
    Layer,
    Objective,
}

impl Group {
    pub fn name(self) -> &'static str {
        match self {
            Group::Primitive => "primitive",
            Group::Layer => "layer",
            Group::Objective => "objective",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCase {
    pub name: String,
    pub group: Group,
    /// Max relative deviation between analytic and central-difference gradients.
    pub error: f64,
    pub tol: f64,
}

impl GradCase {
    pub fn passed(&self) -> bool {
        self.error < self.tol
    }
}

type Fun = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>;

fn random(shape: &[usize], r: &mut Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_parts(shape.to_vec(), (0..n).map(|_| r.random_range(-1.0..1.0)).collect())
}

fn primitives(r: &mut Rng) -> Vec<(&'static str, Fun, Vec<Tensor>)> {
    let a = random(&[3, 4], r);
    let pos = a.map(|v| v.abs() + 0.5);
    let w = random(&[4, 2], r);
    let v = random(&[4], r);
    let b = random(&[5, 2], r);
    vec![
        ("add", Box::new(|g, x| { let y = g.add(x[0], x[1])?; let y = g.square(y)?; g.sum(y) }), vec![a.clone(), pos.clone()]),
        ("sub", Box::new(|g, x| { let y = g.sub(x[0], x[1])?; let y = g.square(y)?; g.sum(y) }), vec![a.clone(), pos.clone()]),
        ("mul", Box::new(|g, x| { let y = g.mul(x[0], x[1])?; g.sum(y) }), vec![a.clone(), pos.clone()]),
        ("div", Box::new(|g, x| { let y = g.div(x[0], x[1])?; g.sum(y) }), vec![a.clone(), pos.clone()]),
        ("matmul", Box::new(|g, x| { let y = g.matmul(x[0], x[1])?; let y = g.tanh(y)?; g.sum(y) }), vec![a.clone(), w]),
        ("exp", Box::new(|g, x| { let y = g.exp(x[0])?; g.sum(y) }), vec![a.clone()]),
        ("log", Box::new(|g, x| { let y = g.log(x[0])?; g.sum(y) }), vec![pos.clone()]),
        ("tanh", Box::new(|g, x| { let y = g.tanh(x[0])?; g.sum(y) }), vec![a.clone()]),
        ("relu", Box::new(|g, x| { let y = g.relu(x[0])?; let y = g.square(y)?; g.sum(y) }), vec![a.clone()]),
        ("softplus", Box::new(|g, x| { let y = g.softplus(x[0])?; g.sum(y) }), vec![a.clone()]),
        ("softmax", Box::new(|g, x| { let y = g.softmax(x[0])?; let y = g.mul(y, x[1])?; g.sum(y) }), vec![a.clone(), pos.clone()]),
        ("square", Box::new(|g, x| { let y = g.square(x[0])?; g.mean(y) }), vec![a.clone()]),
        ("sum_last", Box::new(|g, x| { let y = g.sum_last(x[0])?; let y = g.square(y)?; g.sum(y) }), vec![a.clone()]),
        ("logsumexp", Box::new(|g, x| { let y = g.logsumexp(x[0])?; let y = g.square(y)?; g.sum(y) }), vec![a.clone()]),
        ("concat_split", Box::new(|g, x| {
            let p = g.split(x[0], &[1, 3])?;
            let q = g.square(p[1])?;
            let y = g.concat(&[q, p[0]])?;
            let y = g.exp(y)?;
            g.sum(y)
        }), vec![a.clone()]),
        ("slice_cols", Box::new(|g, x| { let y = g.slice_cols(x[0], 1, 2)?; let y = g.exp(y)?; g.sum(y) }), vec![a.clone()]),
        ("broadcast_rows", Box::new(|g, x| {
            let b = g.broadcast_rows(x[1], 3)?;
            let y = g.mul(x[0], b)?;
            let y = g.square(y)?;
            g.sum(y)
        }), vec![a.clone(), v]),
        ("gather_cols", Box::new(|g, x| {
            let y = g.gather_cols(x[0], &[3, 0, 0, 2])?;
            let y = g.mul(y, x[1])?;
            let y = g.square(y)?;
            g.sum(y)
        }), vec![a.clone(), pos]),
        ("reshape", Box::new(|g, x| { let y = g.reshape(x[0], vec![12])?; let y = g.softmax(y)?; let y = g.square(y)?; g.sum(y) }), vec![a.clone()]),
        ("scale_shift", Box::new(|g, x| {
            let y = g.scale(x[0], -2.5)?;
            let y = g.add_scalar(y, 0.7)?;
            let y = g.square(y)?;
            g.sum(y)
        }), vec![a.clone()]),
        ("kernel_mean", Box::new(|g, x| kernel_mean(g, x[0], x[1], 0.8)), vec![random(&[3, 2], r), b]),
    ]
}

fn small_stack(dim: usize, kind: CouplingKind, linear: bool, steps: usize, r: &mut Rng) -> Result<FlowStack> {
    let cfg = FlowConfig {
        dim,
        steps,
        hidden: vec![5],
        activation: Activation::Tanh,
        kind,
        linear,
    };
    let mut s = FlowStack::from_config(&cfg, r)?;
    s.randomize(r, 0.4);
    Ok(s)
}

fn spline() -> CouplingKind {
    CouplingKind::Spline { bins: 4, bound: 5.0 }
}

/// Checks a function of a stack's parameters (and optionally its input).
fn stack_check<F>(stack: &FlowStack, extra: Option<&Tensor>, step: f64, f: F) -> Result<f64>
where
    F: Fn(&mut Graph, &FlowStack, &[Var], Option<Var>) -> Result<Var>,
{
    let n = stack.params().len();
    let mut inputs = stack.params().to_vec();
    if let Some(x) = extra {
        inputs.push(x.clone());
    }
    finite_diff_check_many(
        |g, vs| {
            let mut s = stack.clone();
            s.set_params(vs[..n].iter().map(|&v| g.value(v).clone()).collect())?;
            f(g, &s, &vs[..n], vs.get(n).copied())
        },
        &inputs,
        step,
    )
}

fn layer_loss(g: &mut Graph, s: &FlowStack, p: &[Var], x: Option<Var>, inverse: bool) -> Result<Var> {
    let x = x.expect("layer checks pass an input");
    let (y, ld) = s.step(g, p, 0, x, inverse)?;
    let y = g.square(y)?;
    let a = g.sum(y)?;
    let b = g.sum(ld)?;
    g.add(a, b)
}

fn objective_problem(populations: Vec<Population>, interaction: Interaction, steps: usize) -> MfgProblem {
    MfgProblem {
        dim: 2,
        steps,
        populations,
        weights: Weights {
            transport: 0.7,
            interaction: 1.3,
            terminal: 5.0,
        },
        interaction,
        terminal: Terminal::Jeffreys,
        transport_quadrature: TransportQuadrature::ForwardDiff,
        interaction_quadrature: InteractionQuadrature::RightPoint,
    }
}

fn iso(mean: Vec<f64>, var: f64) -> DensitySpec {
    DensitySpec::isotropic(mean, var).expect("valid density")
}

fn mfg_check(problem: &MfgProblem, stacks: &[FlowStack], r: &mut Rng) -> Result<f64> {
    let batches = problem.sample(8, r);
    let counts: Vec<usize> = stacks.iter().map(|s| s.params().len()).collect();
    let inputs: Vec<Tensor> = stacks.iter().flat_map(|s| s.params().iter().cloned()).collect();
    finite_diff_check_many(
        |g, vs| {
            let mut owned = Vec::with_capacity(stacks.len());
            let mut groups = Vec::with_capacity(stacks.len());
            let mut off = 0;
            for (s, &c) in stacks.iter().zip(&counts) {
                let mut st = s.clone();
                st.set_params(vs[off..off + c].iter().map(|&v| g.value(v).clone()).collect())?;
                owned.push(st);
                groups.push(vs[off..off + c].to_vec());
                off += c;
            }
            Ok(total_objective(g, problem, &owned, &groups, &batches)?.0)
        },
        &inputs,
        1e-6,
    )
}

/// Runs the whole suite; instances are drawn from `seed`.
pub fn suite(seed: u64) -> Result<Vec<GradCase>> {
    let mut r = stream(seed, 0);
    let mut out = Vec::new();
    for (name, f, inputs) in primitives(&mut r) {
        out.push(GradCase {
            name: name.into(),
            group: Group::Primitive,
            error: finite_diff_check_many(f, &inputs, 1e-5)?,
            tol: PRIMITIVE_TOL,
        });
    }

    let layers = [
        ("affine", CouplingKind::Affine { clamp: None }, false),
        ("affine_clamped", CouplingKind::Affine { clamp: Some(1.5) }, false),
        ("spline", spline(), false),
        ("spline_linear", spline(), true),
    ];
    for (name, kind, linear) in layers {
        let s = small_stack(3, kind, linear, 1, &mut r)?;
        let x = random(&[4, 3], &mut r);
        for inverse in [false, true] {
            let err = stack_check(&s, Some(&x), 1e-6, |g, s, p, x| layer_loss(g, s, p, x, inverse))?;
            out.push(GradCase {
                name: format!("{}_{}", name, if inverse { "inverse" } else { "forward" }),
                group: Group::Layer,
                error: err,
                tol: PRIMITIVE_TOL,
            });
        }
    }

    let ot = objective_problem(
        vec![Population {
            base: iso(vec![0.0, 0.0], 0.3),
            target: DensitySpec::ring(8, 4.0, 0.3, 2)?,
        }],
        Interaction::None,
        3,
    );
    let crowd = objective_problem(
        vec![Population {
            base: iso(vec![0.0, 3.0], 0.3),
            target: iso(vec![0.0, -3.0], 0.3),
        }],
        Interaction::Obstacle {
            obstacle: ObstacleSpec::default(),
            lambda_p: 1.0,
            lambda_e: 0.1,
        },
        3,
    );
    let mut crowd_simpson = crowd.clone();
    crowd_simpson.steps = 6;
    crowd_simpson.transport_quadrature = TransportQuadrature::Simpson4;
    crowd_simpson.interaction_quadrature = InteractionQuadrature::Simpson;
    let mut multigroup = objective_problem(
        vec![
            Population {
                base: iso(vec![0.0, 0.0], 0.01),
                target: iso(vec![1.0, 1.0], 0.01),
            },
            Population {
                base: iso(vec![1.0, 0.0], 0.01),
                target: iso(vec![0.0, 1.0], 0.01),
            },
        ],
        Interaction::Multigroup { bandwidth: 1.0 },
        3,
    );
    multigroup.terminal = Terminal::Kl;
    for (name, problem) in [
        ("ot", &ot),
        ("crowd", &crowd),
        ("crowd_simpson", &crowd_simpson),
        ("multigroup", &multigroup),
    ] {
        let stacks = problem
            .populations
            .iter()
            .map(|_| small_stack(2, spline(), true, problem.steps, &mut r))
            .collect::<Result<Vec<_>>>()?;
        out.push(GradCase {
            name: name.into(),
            group: Group::Objective,
            error: mfg_check(problem, &stacks, &mut r)?,
            tol: OBJECTIVE_TOL,
        });
    }

    let data = Dataset::SShape.sample(8, &mut r);
    let base = DensitySpec::standard_normal(2);
    for (name, kind) in [("nf_affine", CouplingKind::Affine { clamp: None }), ("nf_spline", spline())] {
        let s = small_stack(2, kind, false, 4, &mut r)?;
        let err = stack_check(&s, None, 1e-6, |g, s, p, _| Ok(nf_objective(g, s, p, &base, &data, 0.3)?.0))?;
        out.push(GradCase {
            name: name.into(),
            group: Group::Objective,
            error: err,
            tol: OBJECTIVE_TOL,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn whole_suite_passes() {
        let cases = suite(1).unwrap();
        assert!(cases.iter().filter(|c| c.group == Group::Objective).count() >= 6);
        for c in &cases {
            assert!(c.passed(), "{} ({}): {:e}", c.name, c.group.name(), c.error);
        }
    }
}
