//! Named experiment set-ups: densities, weights, flow architecture and
//! training budget. A preset plus a seed fully determines a run.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::densities::{ring_center, DensitySpec, ObstacleSpec};
use crate::error::{Error, Result};
use crate::flows::{Activation, CouplingKind, FlowConfig, FlowStack};
use crate::objectives::{Interaction, InteractionQuadrature, MfgProblem, Population, Terminal, TransportQuadrature, Weights};
use crate::rng;
use crate::trainer::{NfConfig, TrainConfig};

pub const NAMES: [&str; 7] = [
    "ot8gauss",
    "crowd",
    "multigroup-2d-2p",
    "multigroup-3d-2p",
    "multigroup-2d-8p",
    "nf-synthetic",
    "nf-tabular-sample",
];

/// Stream index reserved for parameter initialization, away from the
/// per-iteration streams.
const INIT_STREAM: u64 = u64::MAX - 1;
const DATA_STREAM: u64 = u64::MAX - 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Scale {
    /// Budgets sized for a single CPU core.
    #[default]
    Desk,
    /// The published budget: 1e5 iterations and 256-wide conditioners.
    Paper,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MfgPreset {
    pub name: String,
    pub problem: MfgProblem,
    pub flow: FlowConfig,
    pub train: TrainConfig,
}

impl MfgPreset {
    /// One freshly initialized stack per population.
    pub fn stacks(&self) -> Result<Vec<FlowStack>> {
        let mut r = rng::stream(self.train.seed, INIT_STREAM);
        self.problem
            .populations
            .iter()
            .map(|_| FlowStack::from_config(&self.flow, &mut r))
            .collect()
    }

    pub fn bases(&self) -> Vec<DensitySpec> {
        self.problem.populations.iter().map(|p| p.base.clone()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NfPreset {
    pub name: String,
    pub dataset: Dataset,
    /// Rows drawn before the train/validation/test split.
    pub rows: usize,
    pub flow: FlowConfig,
    pub nf: NfConfig,
}

impl NfPreset {
    pub fn data(&self) -> crate::Tensor {
        self.dataset.sample(self.rows, &mut rng::stream(self.nf.train.seed, DATA_STREAM))
    }

    pub fn stack(&self) -> Result<FlowStack> {
        FlowStack::from_config(&self.flow, &mut rng::stream(self.nf.train.seed, INIT_STREAM))
    }

    pub fn base(&self) -> DensitySpec {
        DensitySpec::standard_normal(self.flow.dim)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Preset {
    Mfg(MfgPreset),
    Nf(NfPreset),
}

impl Preset {
    pub fn name(&self) -> &str {
        match self {
            Preset::Mfg(p) => &p.name,
            Preset::Nf(p) => &p.name,
        }
    }

    pub fn train(&self) -> &TrainConfig {
        match self {
            Preset::Mfg(p) => &p.train,
            Preset::Nf(p) => &p.nf.train,
        }
    }

    pub fn train_mut(&mut self) -> &mut TrainConfig {
        match self {
            Preset::Mfg(p) => &mut p.train,
            Preset::Nf(p) => &mut p.nf.train,
        }
    }

    pub fn flow_mut(&mut self) -> &mut FlowConfig {
        match self {
            Preset::Mfg(p) => &mut p.flow,
            Preset::Nf(p) => &mut p.flow,
        }
    }
}

/// Neural-spline coupling stack used by every MFG preset.
fn spline_flow(dim: usize, scale: Scale) -> FlowConfig {
    FlowConfig {
        dim,
        steps: 10,
        hidden: match scale {
            Scale::Desk => vec![32, 32],
            Scale::Paper => vec![256, 256],
        },
        activation: Activation::Relu,
        kind: CouplingKind::Spline { bins: 8, bound: 8.0 },
        linear: true,
    }
}

fn mfg_train(scale: Scale, seed: u64) -> TrainConfig {
    TrainConfig {
        iterations: match scale {
            Scale::Desk => 20_000,
            Scale::Paper => 100_000,
        },
        seed,
        ..TrainConfig::default()
    }
}

fn iso(mean: Vec<f64>, var: f64) -> DensitySpec {
    DensitySpec::isotropic(mean, var).expect("preset densities are valid")
}

fn unit(dim: usize, axis: usize, scale: f64) -> Vec<f64> {
    let mut v = vec![0.0; dim];
    v[axis] = scale;
    v
}

fn problem(dim: usize, populations: Vec<Population>, weights: Weights, interaction: Interaction) -> MfgProblem {
    MfgProblem {
        dim,
        steps: 10,
        populations,
        weights,
        interaction,
        terminal: Terminal::Jeffreys,
        transport_quadrature: TransportQuadrature::ForwardDiff,
        interaction_quadrature: InteractionQuadrature::RightPoint,
    }
}

/// `N(0, 0.3 I)` to an equal mixture of eight `N(mu_i, 0.3 I)` on a radius-4 ring.
pub fn ot8gauss(dim: usize, scale: Scale, seed: u64) -> Result<MfgPreset> {
    if dim < 2 {
        return Err(Error::Config("ot8gauss needs dim >= 2".into()));
    }
    let pop = Population {
        base: iso(vec![0.0; dim], 0.3),
        target: DensitySpec::ring(8, 4.0, 0.3, dim)?,
    };
    let w = Weights {
        transport: 1.0,
        interaction: 0.0,
        terminal: 5.0,
    };
    Ok(MfgPreset {
        name: "ot8gauss".into(),
        problem: problem(dim, vec![pop], w, Interaction::None),
        flow: spline_flow(dim, scale),
        train: mfg_train(scale, seed),
    })
}

/// `N(3 e2, 0.3 I)` to `N(-3 e2, 0.3 I)` around an obstacle at the origin.
pub fn crowd(dim: usize, scale: Scale, seed: u64) -> Result<MfgPreset> {
    if dim < 2 {
        return Err(Error::Config("crowd needs dim >= 2".into()));
    }
    let pop = Population {
        base: iso(unit(dim, 1, 3.0), 0.3),
        target: iso(unit(dim, 1, -3.0), 0.3),
    };
    // At lambda_L = 1 a detour around the obstacle costs more transport than
    // it saves; 0.1 gives the avoidance behavior.
    let w = Weights {
        transport: 0.1,
        interaction: 1.0,
        terminal: 5.0,
    };
    let inter = Interaction::Obstacle {
        obstacle: ObstacleSpec::default(),
        lambda_p: 1.0,
        lambda_e: 0.01,
    };
    Ok(MfgPreset {
        name: "crowd".into(),
        problem: problem(dim, vec![pop], w, inter),
        flow: spline_flow(dim, scale),
        train: mfg_train(scale, seed),
    })
}

fn multigroup(name: &str, dim: usize, pairs: Vec<(Vec<f64>, Vec<f64>)>, var: f64, scale: Scale, seed: u64) -> MfgPreset {
    let pops = pairs
        .into_iter()
        .map(|(a, b)| Population {
            base: iso(a, var),
            target: iso(b, var),
        })
        .collect();
    let w = Weights {
        transport: 0.2,
        interaction: 3.0,
        terminal: 5.0,
    };
    let mut flow = spline_flow(dim, scale);
    if let CouplingKind::Spline { bound, .. } = &mut flow.kind {
        *bound = 6.0;
    }
    MfgPreset {
        name: name.into(),
        problem: problem(dim, pops, w, Interaction::Multigroup { bandwidth: 1.0 }),
        flow,
        // The kernel term is quadratic in the batch; 32 per population keeps
        // a run to minutes and still matches larger-batch costs.
        train: TrainConfig {
            batch: 32,
            ..mfg_train(scale, seed)
        },
    }
}

/// Two crossing populations in the unit square, covariance `0.01 I`.
pub fn multigroup_2d_2p(scale: Scale, seed: u64) -> MfgPreset {
    multigroup(
        "multigroup-2d-2p",
        2,
        vec![(vec![0.0, 0.0], vec![1.0, 1.0]), (vec![1.0, 0.0], vec![0.0, 1.0])],
        0.01,
        scale,
        seed,
    )
}

/// Two crossing populations in the unit cube, covariance `0.01 I`.
pub fn multigroup_3d_2p(scale: Scale, seed: u64) -> MfgPreset {
    multigroup(
        "multigroup-3d-2p",
        3,
        vec![
            (vec![0.0, 0.0, 0.0], vec![1.0, 1.0, 1.0]),
            (vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 1.0]),
        ],
        0.01,
        scale,
        seed,
    )
}

/// Eight populations on a radius-4 ring, each heading to its antipode.
pub fn multigroup_2d_8p(scale: Scale, seed: u64) -> MfgPreset {
    let pairs = (1..=8)
        .map(|i| (ring_center(i, 8, 4.0, 2), ring_center((i + 3) % 8 + 1, 8, 4.0, 2)))
        .collect();
    multigroup("multigroup-2d-8p", 2, pairs, 0.05, scale, seed)
}

/// RealNVP-style affine coupling stack for density estimation.
fn realnvp(dim: usize, scale: Scale) -> FlowConfig {
    FlowConfig {
        dim,
        steps: 6,
        hidden: match scale {
            Scale::Desk => vec![64, 64],
            Scale::Paper => vec![256, 256],
        },
        activation: Activation::Tanh,
        kind: CouplingKind::Affine { clamp: None },
        linear: false,
    }
}

fn nf_config(scale: Scale, seed: u64, ratio: f64, epochs: usize) -> NfConfig {
    NfConfig {
        train: TrainConfig {
            batch: 256,
            // NF runs are sized by epochs; the schedule spans all of them.
            iterations: 0,
            seed,
            ..TrainConfig::default()
        },
        ratio,
        epochs: match scale {
            Scale::Desk => epochs,
            Scale::Paper => 10 * epochs,
        },
        val_fraction: 0.2,
        test_fraction: 0.1,
        lipschitz_points: 512,
    }
}

/// 2-d synthetic density estimation.
pub fn nf_synthetic(dataset: Dataset, scale: Scale, seed: u64) -> Result<NfPreset> {
    if dataset == Dataset::Tabular {
        return Err(Error::Config("nf-synthetic takes a 2-d dataset".into()));
    }
    Ok(NfPreset {
        name: format!("nf-synthetic-{}", dataset.name()),
        dataset,
        rows: 20_000,
        flow: realnvp(2, scale),
        nf: nf_config(scale, seed, 0.1, 50),
    })
}

/// 6-d tabular stand-in, 1e4 rows.
pub fn nf_tabular_sample(scale: Scale, seed: u64) -> NfPreset {
    NfPreset {
        name: "nf-tabular-sample".into(),
        dataset: Dataset::Tabular,
        rows: 10_000,
        flow: realnvp(Dataset::Tabular.dim(), scale),
        nf: nf_config(scale, seed, 5e-5, 40),
    }
}

/// Resolves a preset by name. `nf-synthetic` takes its dataset as a suffix
/// (`nf-synthetic-swiss`) or via `dataset`; `dim` applies to the OT and
/// crowd problems only.
pub fn preset(name: &str, dim: Option<usize>, dataset: Option<Dataset>, scale: Scale, seed: u64) -> Result<Preset> {
    let fixed_dim = |d: usize| -> Result<()> {
        match dim {
            Some(x) if x != d => Err(Error::Config(format!("preset {} is {}-dimensional, got --dim {}", name, d, x))),
            _ => Ok(()),
        }
    };
    let p = match name {
        "ot8gauss" => Preset::Mfg(ot8gauss(dim.unwrap_or(2), scale, seed)?),
        "crowd" => Preset::Mfg(crowd(dim.unwrap_or(2), scale, seed)?),
        "multigroup-2d-2p" => {
            fixed_dim(2)?;
            Preset::Mfg(multigroup_2d_2p(scale, seed))
        }
        "multigroup-3d-2p" => {
            fixed_dim(3)?;
            Preset::Mfg(multigroup_3d_2p(scale, seed))
        }
        "multigroup-2d-8p" => {
            fixed_dim(2)?;
            Preset::Mfg(multigroup_2d_8p(scale, seed))
        }
        "nf-tabular-sample" => {
            fixed_dim(Dataset::Tabular.dim())?;
            Preset::Nf(nf_tabular_sample(scale, seed))
        }
        other => {
            let ds = match other.strip_prefix("nf-synthetic") {
                Some("") => dataset.unwrap_or(Dataset::SShape),
                Some(rest) => rest
                    .strip_prefix('-')
                    .ok_or_else(|| Error::Config(format!("unknown preset '{}'", other)))?
                    .parse()?,
                None => {
                    return Err(Error::Config(format!(
                        "unknown preset '{}' (expected one of {})",
                        other,
                        NAMES.join(", ")
                    )))
                }
            };
            fixed_dim(2)?;
            Preset::Nf(nf_synthetic(ds, scale, seed)?)
        }
    };
    Ok(p)
}
