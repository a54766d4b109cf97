//! Minimal standalone SVG rendering of trajectory and density CSVs.
//!
//! Pure: the same input files always produce the same bytes.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::PathBuf;

use crate::error::{CliError, Result};
use crate::io::{self, Table};

const SIZE: f64 = 600.0;
const MARGIN: f64 = 40.0;
const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf", "#8c564b", "#e377c2"];
/// Auto mode draws polylines when a file holds at most this many samples.
const MAX_PATHS: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Mode {
    Auto,
    Trajectory,
    Scatter,
}

#[derive(Debug, Clone, clap::Args)]
pub struct PlotArgs {
    /// Trajectory or density CSVs; one color per file.
    #[arg(required = true)]
    pub inputs: Vec<PathBuf>,
    #[arg(long, short)]
    pub output: PathBuf,
    #[arg(long, value_enum, default_value_t = Mode::Auto)]
    pub mode: Mode,
    /// Only draw this step (scatter mode).
    #[arg(long)]
    pub step: Option<usize>,
    #[arg(long)]
    pub title: Option<String>,
}

struct Series {
    /// sample_id -> (step, x, y), in file order.
    samples: BTreeMap<u64, Vec<(usize, f64, f64)>>,
    max_step: usize,
}

fn series(t: &Table, path: &std::path::Path) -> Result<Series> {
    let col = |name: &str| {
        t.column(name)
            .ok_or_else(|| CliError::Config(format!("{}: missing column '{}'", path.display(), name)))
    };
    let (id, step, x, y) = (col("sample_id")?, col("step")?, col("x1")?, col("x2").ok());
    let mut samples: BTreeMap<u64, Vec<(usize, f64, f64)>> = BTreeMap::new();
    let mut max_step = 0;
    for r in &t.rows {
        let k = r[step] as usize;
        max_step = max_step.max(k);
        samples
            .entry(r[id] as u64)
            .or_default()
            .push((k, r[x], y.map(|c| r[c]).unwrap_or(0.0)));
    }
    for pts in samples.values_mut() {
        pts.sort_by_key(|p| p.0);
    }
    Ok(Series { samples, max_step })
}

/// Interpolates from a light tint to the series color along the path.
fn shade(color: &str, t: f64) -> String {
    let c = u32::from_str_radix(&color[1..], 16).unwrap_or(0);
    let ch = |shift: u32| {
        let v = ((c >> shift) & 0xff) as f64;
        (235.0 + (v - 235.0) * (0.25 + 0.75 * t)).round() as u8
    };
    format!("#{:02x}{:02x}{:02x}", ch(16), ch(8), ch(0))
}

struct Frame {
    lo: (f64, f64),
    scale: f64,
}

impl Frame {
    fn fit(all: &[Series]) -> Frame {
        let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
        for s in all {
            for &(_, x, y) in s.samples.values().flatten() {
                x0 = x0.min(x);
                x1 = x1.max(x);
                y0 = y0.min(y);
                y1 = y1.max(y);
            }
        }
        let span = (x1 - x0).max(y1 - y0).max(1e-9);
        let (cx, cy) = ((x0 + x1) / 2.0, (y0 + y1) / 2.0);
        Frame {
            lo: (cx - span / 2.0, cy - span / 2.0),
            scale: (SIZE - 2.0 * MARGIN) / span,
        }
    }

    fn map(&self, x: f64, y: f64) -> (f64, f64) {
        (
            MARGIN + (x - self.lo.0) * self.scale,
            SIZE - MARGIN - (y - self.lo.1) * self.scale,
        )
    }
}

fn render(all: &[Series], mode: Mode, step: Option<usize>, title: &str) -> String {
    let frame = Frame::fit(all);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{0}" height="{0}" viewBox="0 0 {0} {0}">"#,
        SIZE
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        s,
        r##"<rect x="{m}" y="{m}" width="{w}" height="{w}" fill="none" stroke="#999"/>"##,
        m = MARGIN,
        w = SIZE - 2.0 * MARGIN
    );
    if !title.is_empty() {
        let esc = title.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;");
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" font-family="sans-serif" font-size="14" text-anchor="middle">{}</text>"#,
            SIZE / 2.0,
            MARGIN / 2.0 + 5.0,
            esc
        );
    }
    for (i, ser) in all.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let lines = match mode {
            Mode::Trajectory => true,
            Mode::Scatter => false,
            Mode::Auto => ser.samples.len() <= MAX_PATHS,
        };
        let denom = ser.max_step.max(1) as f64;
        for pts in ser.samples.values() {
            if lines {
                let path: Vec<String> = pts
                    .iter()
                    .map(|&(_, x, y)| {
                        let (u, v) = frame.map(x, y);
                        format!("{:.2},{:.2}", u, v)
                    })
                    .collect();
                let _ = writeln!(
                    s,
                    r#"<polyline points="{}" fill="none" stroke="{}" stroke-width="1.2" stroke-opacity="0.8"/>"#,
                    path.join(" "),
                    color
                );
            }
            for &(k, x, y) in pts {
                if step.is_some_and(|want| want != k) {
                    continue;
                }
                let (u, v) = frame.map(x, y);
                let r = if lines { 2.0 } else { 1.5 };
                let _ = writeln!(
                    s,
                    r#"<circle cx="{:.2}" cy="{:.2}" r="{}" fill="{}"/>"#,
                    u,
                    v,
                    r,
                    shade(color, k as f64 / denom)
                );
            }
        }
    }
    s.push_str("</svg>\n");
    s
}

pub fn run_plot(a: &PlotArgs) -> Result<()> {
    let all = a
        .inputs
        .iter()
        .map(|p| series(&io::read_table(p)?, p))
        .collect::<Result<Vec<_>>>()?;
    if all.iter().all(|s| s.samples.is_empty()) {
        return Err(CliError::Config("no rows to plot".into()));
    }
    let svg = render(&all, a.mode, a.step, a.title.as_deref().unwrap_or(""));
    fs::write(&a.output, svg)?;
    println!("wrote {}", a.output.display());
    Ok(())
}
