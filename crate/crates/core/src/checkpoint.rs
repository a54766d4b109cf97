//! JSON checkpoints. Every `f64` is stored as the hex of its bit pattern, so a
//! save/load cycle reproduces parameters and optimizer moments bit-exactly.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::densities::DensitySpec;
use crate::error::{Error, Result};
use crate::flows::{FlowStack, LayerSpec};
use crate::tensor::Tensor;
use crate::trainer::{OptimState, Standardizer, TrainState};

pub const FORMAT: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct HexTensor {
    shape: Vec<usize>,
    data: String,
}

impl From<&Tensor> for HexTensor {
    fn from(t: &Tensor) -> Self {
        let mut data = String::with_capacity(16 * t.len());
        for v in t.data() {
            data.push_str(&format!("{:016x}", v.to_bits()));
        }
        HexTensor {
            shape: t.shape().to_vec(),
            data,
        }
    }
}

impl HexTensor {
    fn decode(&self) -> Result<Tensor> {
        let bad = || Error::Config("checkpoint: malformed tensor data".into());
        if self.data.len() % 16 != 0 || !self.data.is_ascii() {
            return Err(bad());
        }
        let data = (0..self.data.len() / 16)
            .map(|i| u64::from_str_radix(&self.data[16 * i..16 * i + 16], 16).map(f64::from_bits))
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| bad())?;
        Tensor::new(self.shape.clone(), data).map_err(|e| Error::Config(format!("checkpoint: {}", e)))
    }
}

fn encode_all(ts: &[Tensor]) -> Vec<HexTensor> {
    ts.iter().map(HexTensor::from).collect()
}

fn decode_all(ts: &[HexTensor]) -> Result<Vec<Tensor>> {
    ts.iter().map(HexTensor::decode).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct StackRecord {
    dim: usize,
    specs: Vec<LayerSpec>,
    params: Vec<HexTensor>,
    /// Density the flow's input is drawn from.
    base: DensitySpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct OptimRecord {
    step: u64,
    m: Vec<HexTensor>,
    v: Vec<HexTensor>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Raw {
    format: u32,
    iteration: u64,
    stacks: Vec<StackRecord>,
    optim: Option<OptimRecord>,
    standardizer: Option<Standardizer>,
}

/// Everything needed to resume a run or to analyze its flows.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub iteration: u64,
    pub stacks: Vec<FlowStack>,
    pub bases: Vec<DensitySpec>,
    pub optim: Option<OptimState>,
    pub standardizer: Option<Standardizer>,
}

impl Checkpoint {
    pub fn from_state(state: &TrainState, bases: Vec<DensitySpec>) -> Self {
        Checkpoint {
            iteration: state.iteration,
            stacks: state.stacks.clone(),
            bases,
            optim: Some(state.optim.clone()),
            standardizer: None,
        }
    }

    /// Resumable training state; fails if the checkpoint carries no optimizer.
    pub fn train_state(&self) -> Result<TrainState> {
        let optim = self
            .optim
            .clone()
            .ok_or_else(|| Error::Config("checkpoint has no optimizer state".into()))?;
        Ok(TrainState {
            iteration: self.iteration,
            stacks: self.stacks.clone(),
            optim,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        if self.bases.len() != self.stacks.len() {
            return Err(Error::invalid("one base density per stack"));
        }
        let raw = Raw {
            format: FORMAT,
            iteration: self.iteration,
            stacks: self
                .stacks
                .iter()
                .zip(&self.bases)
                .map(|(s, b)| StackRecord {
                    dim: s.dim(),
                    specs: s.specs().to_vec(),
                    params: encode_all(s.params()),
                    base: b.clone(),
                })
                .collect(),
            optim: self.optim.as_ref().map(|o| OptimRecord {
                step: o.step,
                m: encode_all(&o.m),
                v: encode_all(&o.v),
            }),
            standardizer: self.standardizer.clone(),
        };
        serde_json::to_string(&raw).map_err(|e| Error::Io(e.to_string()))
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let raw: Raw = serde_json::from_str(s).map_err(|e| Error::Config(format!("checkpoint: {}", e)))?;
        if raw.format != FORMAT {
            return Err(Error::Config(format!("checkpoint format {} unsupported", raw.format)));
        }
        let mut stacks = Vec::with_capacity(raw.stacks.len());
        let mut bases = Vec::with_capacity(raw.stacks.len());
        for r in raw.stacks {
            stacks.push(FlowStack::with_params(r.dim, r.specs, decode_all(&r.params)?)?);
            bases.push(r.base);
        }
        let optim = match raw.optim {
            Some(o) => {
                let state = OptimState {
                    step: o.step,
                    m: decode_all(&o.m)?,
                    v: decode_all(&o.v)?,
                };
                let expected: Vec<&[usize]> = stacks.iter().flat_map(|s| s.params().iter().map(|p| p.shape())).collect();
                let ok = |b: &[Tensor]| b.len() == expected.len() && b.iter().zip(&expected).all(|(t, s)| t.shape() == *s);
                if !ok(&state.m) || !ok(&state.v) {
                    return Err(Error::Config("checkpoint: optimizer buffers do not match parameters".into()));
                }
                Some(state)
            }
            None => None,
        };
        Ok(Checkpoint {
            iteration: raw.iteration,
            stacks,
            bases,
            optim,
            standardizer: raw.standardizer,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flows::{Activation, CouplingKind, FlowConfig};
    use crate::objectives::{Interaction, InteractionQuadrature, MfgProblem, Population, Terminal, TransportQuadrature, Weights};
    use crate::rng::seeded;
    use crate::trainer::{train_mfg, train_mfg_from, train_mfg_until, Silent, TrainConfig};

    fn stack(seed: u64) -> FlowStack {
        let cfg = FlowConfig {
            dim: 2,
            steps: 2,
            hidden: vec![6],
            activation: Activation::Tanh,
            kind: CouplingKind::Spline { bins: 3, bound: 4.0 },
            linear: true,
        };
        let mut s = FlowStack::from_config(&cfg, &mut seeded(seed)).unwrap();
        s.randomize(&mut seeded(seed + 1), 0.3);
        s
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let mut state = TrainState::new(vec![stack(1), stack(2)]);
        state.iteration = 17;
        state.optim.step = 17;
        for (i, m) in state.optim.m.iter_mut().enumerate() {
            *m = m.map(|_| (i as f64 + 0.1).sqrt() * 1e-300);
        }
        for v in &mut state.optim.v {
            *v = v.map(|_| f64::MIN_POSITIVE / 3.0);
        }
        let base = DensitySpec::standard_normal(2);
        let mut ck = Checkpoint::from_state(&state, vec![base.clone(), base]);
        ck.standardizer = Some(Standardizer {
            mean: vec![0.1, -0.0],
            std: vec![1.0 / 3.0, 7.0],
        });
        let back = Checkpoint::from_json(&ck.to_json().unwrap()).unwrap();
        assert_eq!(back, ck);
        let bits = |t: &[Tensor]| t.iter().flat_map(|x| x.data().iter().map(|v| v.to_bits())).collect::<Vec<_>>();
        assert_eq!(bits(back.stacks[0].params()), bits(ck.stacks[0].params()));
        assert_eq!(back.standardizer.as_ref().unwrap().mean[1].to_bits(), (-0.0f64).to_bits());
        assert_eq!(back.train_state().unwrap(), state);
    }

    #[test]
    fn save_load_then_step_matches_uninterrupted_run() {
        let problem = MfgProblem {
            dim: 2,
            steps: 2,
            populations: vec![Population {
                base: DensitySpec::isotropic(vec![0.0, 1.0], 0.3).unwrap(),
                target: DensitySpec::isotropic(vec![0.0, -1.0], 0.3).unwrap(),
            }],
            weights: Weights {
                transport: 0.1,
                interaction: 0.0,
                terminal: 1.0,
            },
            interaction: Interaction::None,
            terminal: Terminal::Jeffreys,
            transport_quadrature: TransportQuadrature::ForwardDiff,
            interaction_quadrature: InteractionQuadrature::RightPoint,
        };
        let cfg = TrainConfig {
            batch: 32,
            iterations: 4,
            eval_interval: 1,
            ..TrainConfig::default()
        };
        let full = train_mfg(&problem, vec![stack(3)], &cfg, &mut Silent).unwrap();
        let head = train_mfg_until(&problem, TrainState::new(vec![stack(3)]), &cfg, 3, &mut Silent).unwrap();
        let dir = std::env::temp_dir().join(format!("mfgflow-ck-{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        let path = dir.join("ck.json");
        Checkpoint::from_state(&head.state, vec![problem.populations[0].base.clone()]).save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap().train_state().unwrap();
        fs::remove_dir_all(&dir).ok();
        let tail = train_mfg_from(&problem, loaded, &cfg, &mut Silent).unwrap();
        assert_eq!(tail.state, full.state);
        assert_eq!(tail.history[0].costs, full.history[3].costs);
    }

    #[test]
    fn rejects_corrupt_input() {
        let state = TrainState::new(vec![stack(4)]);
        let ck = Checkpoint::from_state(&state, vec![DensitySpec::standard_normal(2)]);
        let json = ck.to_json().unwrap();
        assert!(Checkpoint::from_json(&json.replacen("\"format\":1", "\"format\":9", 1)).is_err());
        let mut raw: serde_json::Value = serde_json::from_str(&json).unwrap();
        raw["stacks"][0]["params"][0]["data"] = "zz".into();
        assert!(Checkpoint::from_json(&raw.to_string()).is_err());
        let mut raw: serde_json::Value = serde_json::from_str(&json).unwrap();
        raw["optim"]["m"].as_array_mut().unwrap().pop();
        assert!(Checkpoint::from_json(&raw.to_string()).is_err());
        assert!(Checkpoint::from_json("{").is_err());
    }
}
