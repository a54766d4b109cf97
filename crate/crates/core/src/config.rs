//! Flat `section.key=value` run configuration.
//!
//! `run.*` keys pick the preset; every other key overrides one field of it.
//! Lines are applied in order, so later lines (and command-line overrides
//! appended after the file) win.

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::flows::CouplingKind;
use crate::objectives::Interaction;
use crate::presets::{preset, Preset, Scale};

/// Parses `key=value` lines; `#` starts a comment, blank lines are skipped.
pub fn parse(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got '{}'", n + 1, line)))?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() || !k.contains('.') {
            return Err(Error::Config(format!("line {}: key '{}' needs a section prefix", n + 1, k)));
        }
        out.push((k.to_string(), v.to_string()));
    }
    Ok(out)
}

/// Parses a `key=value` command-line override.
pub fn parse_override(s: &str) -> Result<(String, String)> {
    let mut v = parse(s)?;
    match (v.pop(), v.is_empty()) {
        (Some(kv), true) => Ok(kv),
        _ => Err(Error::Config(format!("bad override '{}'", s))),
    }
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("{}: cannot parse '{}'", key, v)))
}

fn opt_num(key: &str, v: &str) -> Result<Option<f64>> {
    if v == "none" {
        Ok(None)
    } else {
        num(key, v).map(Some)
    }
}

fn flag(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("{}: expected true/false, got '{}'", key, v))),
    }
}

/// Enum from its serialized (kebab/lowercase) name.
fn named<T: DeserializeOwned>(key: &str, v: &str) -> Result<T> {
    serde_json::from_value(serde_json::Value::String(v.to_string()))
        .map_err(|_| Error::Config(format!("{}: unknown value '{}'", key, v)))
}

fn name_of<T: Serialize>(x: &T) -> String {
    match serde_json::to_value(x) {
        Ok(serde_json::Value::String(s)) => s,
        other => format!("{:?}", other),
    }
}

fn list(key: &str, v: &str) -> Result<Vec<usize>> {
    if v.is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|s| num(key, s.trim())).collect()
}

/// Preset-selecting keys and their values, with defaults.
#[derive(Debug, Clone, PartialEq)]
pub struct RunKeys {
    pub preset: String,
    pub dim: Option<usize>,
    pub dataset: Option<Dataset>,
    pub scale: Scale,
    pub seed: u64,
}

impl RunKeys {
    pub fn from_entries(entries: &[(String, String)]) -> Result<Self> {
        let mut r = RunKeys {
            preset: String::new(),
            dim: None,
            dataset: None,
            scale: Scale::Desk,
            seed: 0,
        };
        for (k, v) in entries {
            match k.as_str() {
                "run.preset" => r.preset = v.clone(),
                "run.dim" => r.dim = Some(num(k, v)?),
                "run.dataset" => r.dataset = Some(v.parse()?),
                "run.scale" => r.scale = named(k, v)?,
                "run.seed" | "train.seed" => r.seed = num(k, v)?,
                _ => {}
            }
        }
        if r.preset.is_empty() {
            return Err(Error::Config("no preset given (run.preset)".into()));
        }
        Ok(r)
    }
}

/// Builds the preset named by the `run.*` keys and applies every other entry.
pub fn resolve(entries: &[(String, String)]) -> Result<Preset> {
    let run = RunKeys::from_entries(entries)?;
    let mut p = preset(&run.preset, run.dim, run.dataset, run.scale, run.seed)?;
    for (k, v) in entries {
        if !k.starts_with("run.") {
            apply(&mut p, k, v)?;
        }
    }
    Ok(p)
}

/// Overrides one field of a preset.
pub fn apply(p: &mut Preset, key: &str, v: &str) -> Result<()> {
    let (section, field) = key.split_once('.').unwrap_or(("", key));
    match section {
        "train" => {
            let t = p.train_mut();
            match field {
                "lr" => t.lr = num(key, v)?,
                "lr_final" => t.lr_final = num(key, v)?,
                "schedule" => t.schedule = named(key, v)?,
                "beta1" => t.beta1 = num(key, v)?,
                "beta2" => t.beta2 = num(key, v)?,
                "eps" => t.eps = num(key, v)?,
                "batch" => t.batch = num(key, v)?,
                "iterations" => t.iterations = num(key, v)?,
                "seed" => t.seed = num(key, v)?,
                "eval_interval" => t.eval_interval = num(key, v)?,
                "checkpoint_interval" => t.checkpoint_interval = num(key, v)?,
                "clip_norm" => t.clip_norm = opt_num(key, v)?,
                _ => return unknown(key),
            }
        }
        "flow" => {
            let f = p.flow_mut();
            match field {
                "K" => {
                    f.steps = num(key, v)?;
                    if let Preset::Mfg(m) = p {
                        m.problem.steps = m.flow.steps;
                    }
                }
                "hidden" => f.hidden = list(key, v)?,
                "activation" => f.activation = v.parse()?,
                "linear" => f.linear = flag(key, v)?,
                "coupling" => {
                    f.kind = match v {
                        "affine" => CouplingKind::Affine { clamp: None },
                        "spline" => CouplingKind::Spline { bins: 8, bound: 8.0 },
                        _ => return Err(Error::Config(format!("{}: unknown coupling '{}'", key, v))),
                    }
                }
                "bins" | "bound" => match &mut f.kind {
                    CouplingKind::Spline { bins, bound } => {
                        if field == "bins" {
                            *bins = num(key, v)?
                        } else {
                            *bound = num(key, v)?
                        }
                    }
                    _ => return Err(Error::Config(format!("{} applies to spline couplings only", key))),
                },
                "clamp" => match &mut f.kind {
                    CouplingKind::Affine { clamp } => *clamp = opt_num(key, v)?,
                    _ => return Err(Error::Config(format!("{} applies to affine couplings only", key))),
                },
                _ => return unknown(key),
            }
        }
        "problem" => {
            let m = match p {
                Preset::Mfg(m) => m,
                Preset::Nf(_) => return Err(Error::Config(format!("{} does not apply to density estimation", key))),
            };
            let pr = &mut m.problem;
            match field {
                "lambda_L" => pr.weights.transport = num(key, v)?,
                "lambda_I" => pr.weights.interaction = num(key, v)?,
                "lambda_M" => pr.weights.terminal = num(key, v)?,
                "K" => {
                    pr.steps = num(key, v)?;
                    m.flow.steps = pr.steps;
                }
                "terminal" => pr.terminal = named(key, v)?,
                "transport_quadrature" => pr.transport_quadrature = named(key, v)?,
                "interaction_quadrature" => pr.interaction_quadrature = named(key, v)?,
                "lambda_P" | "lambda_E" | "obstacle_magnitude" => match &mut pr.interaction {
                    Interaction::Obstacle {
                        obstacle,
                        lambda_p,
                        lambda_e,
                    } => {
                        let x = num(key, v)?;
                        match field {
                            "lambda_P" => *lambda_p = x,
                            "lambda_E" => *lambda_e = x,
                            _ => obstacle.magnitude = x,
                        }
                    }
                    _ => return Err(Error::Config(format!("{} applies to obstacle problems only", key))),
                },
                "bandwidth" => match &mut pr.interaction {
                    Interaction::Multigroup { bandwidth } => *bandwidth = num(key, v)?,
                    _ => return Err(Error::Config(format!("{} applies to multi-group problems only", key))),
                },
                _ => return unknown(key),
            }
        }
        "nf" => {
            let n = match p {
                Preset::Nf(n) => n,
                Preset::Mfg(_) => return Err(Error::Config(format!("{} applies to density estimation only", key))),
            };
            match field {
                "ratio" => n.nf.ratio = num(key, v)?,
                "epochs" => n.nf.epochs = num(key, v)?,
                "val_fraction" => n.nf.val_fraction = num(key, v)?,
                "test_fraction" => n.nf.test_fraction = num(key, v)?,
                "lipschitz_points" => n.nf.lipschitz_points = num(key, v)?,
                "rows" => n.rows = num(key, v)?,
                _ => return unknown(key),
            }
        }
        _ => return unknown(key),
    }
    Ok(())
}

fn unknown(key: &str) -> Result<()> {
    Err(Error::Config(format!("unknown key '{}'", key)))
}

fn opt(x: Option<f64>) -> String {
    x.map(|v| format!("{:?}", v)).unwrap_or_else(|| "none".into())
}

/// Full effective configuration as `key=value` lines, in a fixed order.
/// Resolving the output again reproduces `p` exactly.
pub fn render(p: &Preset, run: &RunKeys) -> String {
    let mut out: Vec<(String, String)> = vec![
        ("run.preset".into(), run.preset.clone()),
        ("run.scale".into(), name_of(&run.scale)),
    ];
    if let Some(d) = run.dim {
        out.push(("run.dim".into(), d.to_string()));
    }
    if let Some(ds) = run.dataset {
        out.push(("run.dataset".into(), ds.name().into()));
    }
    let (flow, train) = match p {
        Preset::Mfg(m) => {
            let pr = &m.problem;
            out.push(("problem.K".into(), pr.steps.to_string()));
            out.push(("problem.lambda_L".into(), format!("{:?}", pr.weights.transport)));
            out.push(("problem.lambda_I".into(), format!("{:?}", pr.weights.interaction)));
            out.push(("problem.lambda_M".into(), format!("{:?}", pr.weights.terminal)));
            match &pr.interaction {
                Interaction::Obstacle {
                    obstacle,
                    lambda_p,
                    lambda_e,
                } => {
                    out.push(("problem.lambda_P".into(), format!("{:?}", lambda_p)));
                    out.push(("problem.lambda_E".into(), format!("{:?}", lambda_e)));
                    out.push(("problem.obstacle_magnitude".into(), format!("{:?}", obstacle.magnitude)));
                }
                Interaction::Multigroup { bandwidth } => {
                    out.push(("problem.bandwidth".into(), format!("{:?}", bandwidth)));
                }
                Interaction::None => {}
            }
            out.push(("problem.terminal".into(), name_of(&pr.terminal)));
            out.push(("problem.transport_quadrature".into(), name_of(&pr.transport_quadrature)));
            out.push(("problem.interaction_quadrature".into(), name_of(&pr.interaction_quadrature)));
            (&m.flow, &m.train)
        }
        Preset::Nf(n) => {
            out.push(("nf.ratio".into(), format!("{:?}", n.nf.ratio)));
            out.push(("nf.epochs".into(), n.nf.epochs.to_string()));
            out.push(("nf.rows".into(), n.rows.to_string()));
            out.push(("nf.val_fraction".into(), format!("{:?}", n.nf.val_fraction)));
            out.push(("nf.test_fraction".into(), format!("{:?}", n.nf.test_fraction)));
            out.push(("nf.lipschitz_points".into(), n.nf.lipschitz_points.to_string()));
            out.push(("flow.K".into(), n.flow.steps.to_string()));
            (&n.flow, &n.nf.train)
        }
    };
    let hidden: Vec<String> = flow.hidden.iter().map(|h| h.to_string()).collect();
    out.push(("flow.hidden".into(), hidden.join(",")));
    out.push(("flow.activation".into(), name_of(&flow.activation)));
    out.push(("flow.linear".into(), flow.linear.to_string()));
    match &flow.kind {
        CouplingKind::Affine { clamp } => {
            out.push(("flow.coupling".into(), "affine".into()));
            out.push(("flow.clamp".into(), opt(*clamp)));
        }
        CouplingKind::Spline { bins, bound } => {
            out.push(("flow.coupling".into(), "spline".into()));
            out.push(("flow.bins".into(), bins.to_string()));
            out.push(("flow.bound".into(), format!("{:?}", bound)));
        }
    }
    for (k, v) in [
        ("lr", format!("{:?}", train.lr)),
        ("lr_final", format!("{:?}", train.lr_final)),
        ("schedule", name_of(&train.schedule)),
        ("beta1", format!("{:?}", train.beta1)),
        ("beta2", format!("{:?}", train.beta2)),
        ("eps", format!("{:?}", train.eps)),
        ("batch", train.batch.to_string()),
        ("iterations", train.iterations.to_string()),
        ("seed", train.seed.to_string()),
        ("eval_interval", train.eval_interval.to_string()),
        ("checkpoint_interval", train.checkpoint_interval.to_string()),
        ("clip_norm", opt(train.clip_norm)),
    ] {
        out.push((format!("train.{}", k), v));
    }
    out.iter().map(|(k, v)| format!("{}={}\n", k, v)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objectives::{Terminal, TransportQuadrature};
    use crate::trainer::Schedule;

    #[test]
    fn parses_comments_and_overrides() {
        let e = parse("# header\nrun.preset = crowd\n\ntrain.lr=2e-3 # faster\nproblem.lambda_I=0.5\n").unwrap();
        assert_eq!(e.len(), 3);
        assert_eq!(e[1], ("train.lr".into(), "2e-3".into()));
        assert!(parse("train.lr").is_err());
        assert!(parse("lr=1").is_err());
        assert_eq!(parse_override("flow.bins=4").unwrap(), ("flow.bins".into(), "4".into()));
        assert!(parse_override("").is_err());
    }

    #[test]
    fn overrides_reach_their_fields_and_later_lines_win() {
        let mut e = parse(
            "run.preset=crowd\nrun.dim=3\nrun.seed=9\nproblem.lambda_I=0.5\nproblem.lambda_E=0\nproblem.K=6\n\
             problem.terminal=kl\nproblem.transport_quadrature=simpson4\nflow.hidden=4,5\nflow.bins=3\n\
             train.schedule=constant\ntrain.clip_norm=none\ntrain.batch=64",
        )
        .unwrap();
        e.push(parse_override("train.batch=32").unwrap());
        let p = resolve(&e).unwrap();
        let Preset::Mfg(m) = &p else { panic!() };
        assert_eq!(m.problem.dim, 3);
        assert_eq!(m.problem.weights.interaction, 0.5);
        assert_eq!((m.problem.steps, m.flow.steps), (6, 6));
        assert_eq!(m.problem.terminal, Terminal::Kl);
        assert_eq!(m.problem.transport_quadrature, TransportQuadrature::Simpson4);
        assert_eq!(m.flow.hidden, vec![4, 5]);
        assert_eq!(m.flow.kind, CouplingKind::Spline { bins: 3, bound: 8.0 });
        assert_eq!(m.train.schedule, Schedule::Constant);
        assert_eq!(m.train.clip_norm, None);
        assert_eq!((m.train.batch, m.train.seed), (32, 9));
        match &m.problem.interaction {
            Interaction::Obstacle { lambda_e, .. } => assert_eq!(*lambda_e, 0.0),
            _ => panic!(),
        }
    }

    #[test]
    fn render_round_trips() {
        for text in [
            "run.preset=ot8gauss\ntrain.lr=0.1\nproblem.lambda_L=0.30000000000000004",
            "run.preset=crowd\nrun.dim=4",
            "run.preset=multigroup-2d-8p\nproblem.bandwidth=2",
            "run.preset=nf-synthetic\nrun.dataset=spiral\nflow.clamp=2.5\nnf.ratio=1e-7",
            "run.preset=nf-tabular-sample\nrun.scale=paper",
        ] {
            let e = parse(text).unwrap();
            let p = resolve(&e).unwrap();
            let shown = render(&p, &RunKeys::from_entries(&e).unwrap());
            let again = parse(&shown).unwrap();
            assert_eq!(resolve(&again).unwrap(), p, "{}", shown);
            assert_eq!(render(&resolve(&again).unwrap(), &RunKeys::from_entries(&again).unwrap()), shown);
        }
    }

    #[test]
    fn rejects_misplaced_or_unknown_keys() {
        for bad in [
            "run.preset=ot8gauss\nproblem.lambda_P=1",
            "run.preset=ot8gauss\nnf.ratio=1",
            "run.preset=nf-synthetic\nproblem.lambda_L=1",
            "run.preset=ot8gauss\nflow.clamp=1",
            "run.preset=ot8gauss\ntrain.momentum=1",
            "run.preset=ot8gauss\ntrain.lr=fast",
            "run.preset=ot8gauss\nproblem.terminal=tv",
            "run.preset=ot8gauss\nflow.linear=maybe",
            "run.preset=nowhere",
            "train.lr=1",
        ] {
            let e = parse(bad).unwrap();
            assert!(matches!(resolve(&e), Err(Error::Config(_))), "{}", bad);
        }
    }
}
