//! `lipschitz`, `oracle`, `gradcheck` and `probe` subcommands.

use std::path::PathBuf;

use mfgflow::analysis::{discretization_order_probe, lipschitz_report, PowerIteration, Probe};
use mfgflow::checkpoint::Checkpoint;
use mfgflow::gradcheck;
use mfgflow::oracle::{discrete_ot_exact, gaussian_w2, kkt_equal_spacing, OracleError};
use mfgflow::rng;
use mfgflow::Tensor;

use crate::error::{CliError, Result};
use crate::io;

#[derive(Debug, Clone, clap::Args)]
pub struct LipschitzArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Evaluation points drawn from the stack's base density.
    #[arg(long, default_value_t = 512)]
    pub points: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Population index for multi-population checkpoints.
    #[arg(long, default_value_t = 0)]
    pub stack: usize,
    #[arg(long, default_value_t = 1e-6)]
    pub tol: f64,
    /// Output CSV; defaults to lipschitz.csv next to the checkpoint.
    #[arg(long)]
    pub output: Option<PathBuf>,
}

pub fn run_lipschitz(a: &LipschitzArgs) -> Result<()> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let stack = ck
        .stacks
        .get(a.stack)
        .ok_or_else(|| CliError::Config(format!("checkpoint has {} stacks, asked for {}", ck.stacks.len(), a.stack)))?;
    if a.points == 0 {
        return Err(CliError::Config("--points must be >= 1".into()));
    }
    let z = ck.bases[a.stack].sample(a.points, &mut rng::stream(a.seed, 0));
    let cfg = PowerIteration {
        tol: a.tol,
        ..PowerIteration::default()
    };
    let rep = lipschitz_report(stack, &z, &cfg)?;
    let out = a
        .output
        .clone()
        .unwrap_or_else(|| a.checkpoint.with_file_name("lipschitz.csv"));
    io::write_lipschitz(&out, ck.iteration, &rep)?;
    for (i, b) in rep.per_layer.iter().enumerate() {
        println!("layer {:>2}: {:.6}", i, b);
    }
    println!("product {:.6} over {} points ({} unconverged)", rep.product, rep.eval_size, rep.unconverged);
    println!("wrote {}", out.display());
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum OracleMode {
    /// Exact discrete OT between two equal-size point sets.
    Exact,
    /// Equal-spacing KKT solution between start and end points.
    Kkt,
    /// Closed-form W2^2 between two diagonal Gaussians.
    Gaussian,
}

#[derive(Debug, Clone, clap::Args)]
pub struct OracleArgs {
    #[arg(long, value_enum)]
    pub mode: OracleMode,
    /// CSV of source points (exact) or start points (kkt).
    #[arg(long)]
    pub source: Option<PathBuf>,
    /// CSV of target points (exact) or end points (kkt).
    #[arg(long)]
    pub target: Option<PathBuf>,
    /// Step count for kkt.
    #[arg(long, default_value_t = 2)]
    pub k: usize,
    /// Start point for kkt, comma separated (default: origin).
    #[arg(long, allow_hyphen_values = true)]
    pub z: Option<String>,
    /// End point for kkt, comma separated.
    #[arg(long, allow_hyphen_values = true)]
    pub endpoint: Option<String>,
    /// Gaussian mode: mean1;var1;mean2;var2, each comma separated.
    #[arg(long, allow_hyphen_values = true)]
    pub gaussians: Option<String>,
}

fn vector(s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|v| v.trim().parse::<f64>())
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|_| CliError::Config(format!("cannot parse vector '{}'", s)))
}

fn row(v: Vec<f64>) -> Result<Tensor> {
    Ok(Tensor::matrix(1, v.len(), v)?)
}

fn fmt_point(p: &[f64]) -> String {
    p.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

pub fn run_oracle(a: &OracleArgs) -> Result<()> {
    match a.mode {
        OracleMode::Exact => {
            let (Some(s), Some(t)) = (&a.source, &a.target) else {
                return Err(CliError::Config("exact mode needs --source and --target".into()));
            };
            let plan = discrete_ot_exact(&io::read_points(s)?, &io::read_points(t)?)?;
            println!("source,target,sqdist");
            for (i, &j) in plan.assignment.iter().enumerate() {
                let d: f64 = plan.source.row(i).iter().zip(plan.target.row(j)).map(|(a, b)| (a - b) * (a - b)).sum();
                println!("{},{},{}", i, j, d);
            }
            eprintln!("cost {}", plan.cost);
        }
        OracleMode::Kkt => {
            let (z, end) = match (&a.source, &a.target, &a.endpoint) {
                (Some(s), Some(t), _) => (io::read_points(s)?, io::read_points(t)?),
                (None, None, Some(e)) => {
                    let e = vector(e)?;
                    let z = match &a.z {
                        Some(z) => vector(z)?,
                        None => vec![0.0; e.len()],
                    };
                    if z.len() != e.len() {
                        return Err(OracleError::SizeMismatch(vec![1, z.len()], vec![1, e.len()]).into());
                    }
                    (row(z)?, row(e)?)
                }
                _ => return Err(CliError::Config("kkt mode needs --endpoint or --source/--target".into())),
            };
            let sol = kkt_equal_spacing(&z, &end, a.k)?;
            let coords: Vec<String> = (1..=z.cols()).map(|i| format!("x{}", i)).collect();
            println!("row,k,{}", coords.join(","));
            for r in 0..z.rows() {
                for (k, f) in sol.intermediates.iter().enumerate() {
                    println!("{},{},{}", r, k + 1, fmt_point(f.row(r)));
                }
            }
            eprintln!("cost {}", sol.cost);
        }
        OracleMode::Gaussian => {
            let spec = a
                .gaussians
                .as_deref()
                .ok_or_else(|| CliError::Config("gaussian mode needs --gaussians m1;v1;m2;v2".into()))?;
            let parts = spec.split(';').map(vector).collect::<Result<Vec<_>>>()?;
            if parts.len() != 4 {
                return Err(CliError::Config("--gaussians takes four ';'-separated vectors".into()));
            }
            println!("{}", gaussian_w2(&parts[0], &parts[1], &parts[2], &parts[3])?);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, clap::Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

pub fn run_gradcheck(a: &GradcheckArgs) -> Result<()> {
    let cases = gradcheck::suite(a.seed)?;
    let mut failed = 0;
    for c in &cases {
        let status = if c.passed() { "ok" } else { "FAIL" };
        println!("{:<9} {:<22} {:.3e}  (tol {:.0e})  {}", c.group.name(), c.name, c.error, c.tol, status);
        failed += usize::from(!c.passed());
    }
    if failed > 0 {
        return Err(CliError::Failed(format!("{} of {} gradient checks failed", failed, cases.len())));
    }
    println!("all {} gradient checks passed", cases.len());
    Ok(())
}

#[derive(Debug, Clone, clap::Args)]
pub struct ProbeArgs {
    /// linear, quadratic or cubic; all three when omitted.
    #[arg(long)]
    pub probe: Option<String>,
    #[arg(long, value_delimiter = ',', default_values_t = vec![2usize, 4, 8, 16, 32, 64])]
    pub ks: Vec<usize>,
}

pub fn run_probe(a: &ProbeArgs) -> Result<()> {
    let probes = match &a.probe {
        Some(p) => vec![p.parse::<Probe>()?],
        None => vec![Probe::Linear, Probe::Quadratic, Probe::Cubic],
    };
    println!("probe,K,discrete,continuous,error,order");
    for p in probes {
        for r in discretization_order_probe(p, &a.ks)? {
            let order = r.order.map(|o| o.to_string()).unwrap_or_default();
            println!(
                "{},{},{},{},{},{}",
                format!("{:?}", p).to_lowercase(),
                r.k,
                r.discrete,
                r.continuous,
                r.error,
                order
            );
        }
    }
    Ok(())
}
