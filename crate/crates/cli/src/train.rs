//! `mfg` and `nf` subcommands.

use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use mfgflow::analysis::{LipschitzReport, PowerIteration};
use mfgflow::checkpoint::Checkpoint;
use mfgflow::config::{self, RunKeys};
use mfgflow::flows::FlowStack;
use mfgflow::presets::{MfgPreset, NfPreset, Preset};
use mfgflow::rng;
use mfgflow::trainer::{self, CostRecord, NfRecord, Observer, TrainState};
use mfgflow::densities::DensitySpec;
use mfgflow::Tensor;

use crate::error::{CliError, Result};
use crate::io::{self, CostWriter, Manifest, NfWriter};

/// Stream reserved for the plotted sample paths.
const SAMPLE_STREAM: u64 = u64::MAX - 3;
const DENSITY_POINTS: usize = 512;

#[derive(Debug, Clone, clap::Args)]
pub struct TrainArgs {
    /// Preset name (see `--help` of the binary for the list).
    #[arg(long)]
    pub preset: Option<String>,
    /// Flat key=value config file; flags below override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Dataset for nf-synthetic (s-shape, swiss, two-gauss, spiral).
    #[arg(long)]
    pub dataset: Option<String>,
    #[arg(long)]
    pub iterations: Option<u64>,
    /// Use the published budgets (1e5 iterations, 256-wide conditioners).
    #[arg(long)]
    pub paper_scale: bool,
    /// Extra override, repeatable: --set train.lr=5e-4
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Write 0 in wall-clock columns so reruns are byte-identical.
    #[arg(long)]
    pub no_timing: bool,
    /// Output root; defaults to $MFGFLOW_OUT_DIR, then ./runs.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Number of sample paths written to the trajectory CSV.
    #[arg(long, default_value_t = 16)]
    pub trajectories: usize,
    /// Resume an MFG run from a checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

impl TrainArgs {
    pub fn entries(&self) -> Result<Vec<(String, String)>> {
        let mut e = match &self.config {
            Some(p) => {
                let text = fs::read_to_string(p)
                    .map_err(|err| CliError::Config(format!("cannot read {}: {}", p.display(), err)))?;
                config::parse(&text)?
            }
            None => Vec::new(),
        };
        let mut push = |k: &str, v: String| e.push((k.to_string(), v));
        if let Some(p) = &self.preset {
            push("run.preset", p.clone());
        }
        if let Some(d) = self.dim {
            push("run.dim", d.to_string());
        }
        if let Some(s) = self.seed {
            push("train.seed", s.to_string());
        }
        if let Some(ds) = &self.dataset {
            push("run.dataset", ds.clone());
        }
        if self.paper_scale {
            push("run.scale", "paper".into());
        }
        if let Some(n) = self.iterations {
            push("train.iterations", n.to_string());
        }
        for s in &self.set {
            e.push(config::parse_override(s)?);
        }
        Ok(e)
    }
}

pub struct Resolved {
    pub preset: Preset,
    pub effective: String,
    pub hash: String,
    pub dir: PathBuf,
}

pub fn resolve(args: &TrainArgs) -> Result<Resolved> {
    let entries = args.entries()?;
    let preset = config::resolve(&entries)?;
    let run = RunKeys::from_entries(&entries)?;
    let effective = config::render(&preset, &run);
    let hash = io::sha256_hex(&effective);
    let dir = io::out_root(args.out.as_deref()).join(format!("{}-seed{}", preset.name(), preset.train().seed));
    Ok(Resolved {
        preset,
        effective,
        hash,
        dir,
    })
}

fn sample_paths(stack: &FlowStack, base: &DensitySpec, n: usize, seed: u64) -> Result<Vec<Tensor>> {
    let z = base.sample(n, &mut rng::stream(seed, SAMPLE_STREAM));
    Ok(stack.forward_eval(&z)?.states)
}

fn suffix(i: usize, n: usize) -> String {
    if n == 1 {
        String::new()
    } else {
        format!("_p{}", i)
    }
}

fn write_paths(dir: &Path, stacks: &[FlowStack], bases: &[DensitySpec], paths: usize, seed: u64) -> Result<Vec<String>> {
    let mut out = Vec::new();
    for (i, (s, b)) in stacks.iter().zip(bases).enumerate() {
        let sfx = suffix(i, stacks.len());
        let traj = format!("trajectory{}.csv", sfx);
        io::write_trajectories(&dir.join(&traj), &sample_paths(s, b, paths, seed)?)?;
        let dens = format!("density{}.csv", sfx);
        io::write_density(&dir.join(&dens), &sample_paths(s, b, DENSITY_POINTS, seed ^ 1)?)?;
        out.push(traj);
        out.push(dens);
    }
    Ok(out)
}

struct MfgObserver<'a> {
    cost: CostWriter,
    dir: &'a Path,
    bases: Vec<DensitySpec>,
}

impl Observer for MfgObserver<'_> {
    fn on_record(&mut self, row: &CostRecord) -> mfgflow::Result<()> {
        self.cost.row(row).map_err(|e| mfgflow::Error::Io(e.to_string()))
    }

    fn on_checkpoint(&mut self, state: &TrainState) -> mfgflow::Result<()> {
        Checkpoint::from_state(state, self.bases.clone()).save(&self.dir.join("checkpoint.json"))
    }
}

pub fn run_mfg(args: &TrainArgs) -> Result<()> {
    let r = resolve(args)?;
    let p: &MfgPreset = match &r.preset {
        Preset::Mfg(p) => p,
        Preset::Nf(_) => return Err(CliError::Config(format!("{} is a density-estimation preset; use `nf`", r.preset.name()))),
    };
    io::ensure_dir(&r.dir)?;
    fs::write(r.dir.join("config.txt"), &r.effective)?;
    let state = match &args.resume {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            let st = ck.train_state()?;
            if st.stacks.len() != p.problem.populations.len() {
                return Err(CliError::Config("checkpoint does not match the preset's populations".into()));
            }
            info!("resuming from iteration {}", st.iteration);
            st
        }
        None => TrainState::new(p.stacks()?),
    };
    let mut obs = MfgObserver {
        cost: CostWriter::create(&r.dir.join("cost.csv"), !args.no_timing)?,
        dir: &r.dir,
        bases: p.bases(),
    };
    info!("{} -> {}", p.name, r.dir.display());
    let outcome = trainer::train_mfg_from(&p.problem, state, &p.train, &mut obs)?;
    Checkpoint::from_state(&outcome.state, p.bases()).save(&r.dir.join("checkpoint.json"))?;
    let mut outputs = vec!["config.txt".to_string(), "cost.csv".into(), "checkpoint.json".into()];
    outputs.extend(write_paths(&r.dir, &outcome.state.stacks, &p.bases(), args.trajectories, p.train.seed)?);
    let diverged = outcome.diverged.as_ref().map(|e| e.to_string());
    io::write_manifest(
        &r.dir,
        &Manifest {
            command: "mfg",
            preset: &p.name,
            seed: p.train.seed,
            config_hash: r.hash.clone(),
            version: env!("CARGO_PKG_VERSION"),
            config: r.effective.lines().collect(),
            iterations_completed: outcome.state.iteration,
            diverged: diverged.clone(),
            outputs,
        },
    )?;
    if let Some(last) = outcome.history.last() {
        let c = &last.costs;
        println!(
            "iteration {}: L {:.6} I {:.6} M {:.6} total {:.6}",
            c.iteration, c.transport, c.interaction, c.terminal, c.total
        );
    }
    println!("wrote {}", r.dir.display());
    match diverged {
        Some(msg) => Err(CliError::Diverged(msg)),
        None => Ok(()),
    }
}

struct NfObserver {
    w: NfWriter,
}

impl Observer for NfObserver {
    fn on_epoch(&mut self, row: &NfRecord, lip: Option<&LipschitzReport>) -> mfgflow::Result<()> {
        self.w.row(row, lip).map_err(|e| mfgflow::Error::Io(e.to_string()))
    }
}

pub fn run_nf(args: &TrainArgs) -> Result<()> {
    let r = resolve(args)?;
    let p: &NfPreset = match &r.preset {
        Preset::Nf(p) => p,
        Preset::Mfg(_) => return Err(CliError::Config(format!("{} is an MFG preset; use `mfg`", r.preset.name()))),
    };
    if args.resume.is_some() {
        return Err(CliError::Config("--resume applies to `mfg` runs only".into()));
    }
    io::ensure_dir(&r.dir)?;
    fs::write(r.dir.join("config.txt"), &r.effective)?;
    let mut obs = NfObserver {
        w: NfWriter::create(&r.dir.join("cost.csv"), &r.dir.join("lipschitz.csv"), !args.no_timing)?,
    };
    info!("{} -> {}", p.name, r.dir.display());
    let base = p.base();
    let outcome = trainer::train_nf(&p.data(), &base, p.stack()?, &p.nf, &PowerIteration::default(), &mut obs)?;
    let ck = Checkpoint {
        iteration: outcome.best_record().map(|r| r.iteration).unwrap_or(0),
        stacks: vec![outcome.best.clone()],
        bases: vec![base.clone()],
        optim: None,
        standardizer: Some(outcome.standardizer.clone()),
    };
    ck.save(&r.dir.join("checkpoint.json"))?;
    let mut outputs: Vec<String> = ["config.txt", "cost.csv", "lipschitz.csv", "checkpoint.json"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    outputs.extend(write_paths(&r.dir, &[outcome.best.clone()], &[base], args.trajectories, p.nf.train.seed)?);
    let diverged = outcome.diverged.as_ref().map(|e| e.to_string());
    io::write_manifest(
        &r.dir,
        &Manifest {
            command: "nf",
            preset: &p.name,
            seed: p.nf.train.seed,
            config_hash: r.hash.clone(),
            version: env!("CARGO_PKG_VERSION"),
            config: r.effective.lines().collect(),
            iterations_completed: outcome.history.last().map(|h| h.iteration).unwrap_or(0),
            diverged: diverged.clone(),
            outputs,
        },
    )?;
    if let Some(b) = outcome.best_record() {
        println!(
            "best epoch {}: val NLL {:.6} test NLL {:.6} (standardized units)",
            b.epoch, b.val_nll, b.test_nll
        );
    }
    if let Some((e, rep)) = outcome.lipschitz.last() {
        println!("epoch {} Lipschitz product {:.6}", e, rep.product);
    }
    println!("wrote {}", r.dir.display());
    match diverged {
        Some(msg) => Err(CliError::Diverged(msg)),
        None => Ok(()),
    }
}
