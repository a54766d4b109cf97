//! CSV artifacts, output directories and the run manifest.
//!
//! Column orders are fixed:
//! - cost: `iteration,L,I,M,total,wall_ms`
//! - nf cost: `epoch,iteration,train_loss,train_nll,transport,val_nll,test_nll,wall_ms`
//! - trajectory: `sample_id,step,x1..xd`
//! - density scatter: `sample_id,step,x1,x2`
//! - lipschitz: `epoch,layer,bound,product`

use std::fs::{self, File};
use std::path::{Path, PathBuf};

use mfgflow::analysis::LipschitzReport;
use mfgflow::trainer::{CostRecord, NfRecord};
use mfgflow::Tensor;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

pub const OUT_ENV: &str = "MFGFLOW_OUT_DIR";

/// `--out`, else `$MFGFLOW_OUT_DIR`, else `./runs`.
pub fn out_root(flag: Option<&Path>) -> PathBuf {
    match flag {
        Some(p) => p.to_path_buf(),
        None => std::env::var_os(OUT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs")),
    }
}

pub fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    Ok(())
}

fn writer(path: &Path, header: &[String]) -> Result<csv::Writer<File>> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    Ok(w)
}

fn strings(xs: &[&str]) -> Vec<String> {
    xs.iter().map(|s| s.to_string()).collect()
}

fn coord_header(prefix: &[&str], d: usize) -> Vec<String> {
    let mut h = strings(prefix);
    h.extend((1..=d).map(|i| format!("x{}", i)));
    h
}

/// Streams cost rows as they are produced.
pub struct CostWriter {
    w: csv::Writer<File>,
    timing: bool,
}

impl CostWriter {
    pub fn create(path: &Path, timing: bool) -> Result<Self> {
        Ok(CostWriter {
            w: writer(path, &strings(&["iteration", "L", "I", "M", "total", "wall_ms"]))?,
            timing,
        })
    }

    pub fn row(&mut self, r: &CostRecord) -> Result<()> {
        let c = &r.costs;
        let wall = if self.timing { r.wall_ms } else { 0.0 };
        self.w.write_record([
            c.iteration.to_string(),
            c.transport.to_string(),
            c.interaction.to_string(),
            c.terminal.to_string(),
            c.total.to_string(),
            format!("{:.3}", wall),
        ])?;
        self.w.flush()?;
        Ok(())
    }
}

pub struct NfWriter {
    w: csv::Writer<File>,
    lip: csv::Writer<File>,
    timing: bool,
}

impl NfWriter {
    pub fn create(cost: &Path, lipschitz: &Path, timing: bool) -> Result<Self> {
        Ok(NfWriter {
            w: writer(
                cost,
                &strings(&["epoch", "iteration", "train_loss", "train_nll", "transport", "val_nll", "test_nll", "wall_ms"]),
            )?,
            lip: writer(lipschitz, &strings(&["epoch", "layer", "bound", "product"]))?,
            timing,
        })
    }

    pub fn row(&mut self, r: &NfRecord, report: Option<&LipschitzReport>) -> Result<()> {
        let wall = if self.timing { r.wall_ms } else { 0.0 };
        self.w.write_record([
            r.epoch.to_string(),
            r.iteration.to_string(),
            r.train_loss.to_string(),
            r.train_nll.to_string(),
            r.transport.to_string(),
            r.val_nll.to_string(),
            r.test_nll.to_string(),
            format!("{:.3}", wall),
        ])?;
        self.w.flush()?;
        if let Some(rep) = report {
            write_lipschitz_rows(&mut self.lip, r.epoch as u64, rep)?;
            self.lip.flush()?;
        }
        Ok(())
    }
}

fn write_lipschitz_rows(w: &mut csv::Writer<File>, epoch: u64, rep: &LipschitzReport) -> Result<()> {
    for (i, b) in rep.per_layer.iter().enumerate() {
        w.write_record([epoch.to_string(), i.to_string(), b.to_string(), rep.product.to_string()])?;
    }
    Ok(())
}

pub fn write_lipschitz(path: &Path, epoch: u64, rep: &LipschitzReport) -> Result<()> {
    let mut w = writer(path, &strings(&["epoch", "layer", "bound", "product"]))?;
    write_lipschitz_rows(&mut w, epoch, rep)?;
    w.flush()?;
    Ok(())
}

/// Every row of every state, grouped by sample.
pub fn write_trajectories(path: &Path, states: &[Tensor]) -> Result<()> {
    let d = states[0].cols();
    let mut w = writer(path, &coord_header(&["sample_id", "step"], d))?;
    for r in 0..states[0].rows() {
        for (k, s) in states.iter().enumerate() {
            let mut rec = vec![r.to_string(), k.to_string()];
            rec.extend(s.row(r).iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// First two coordinates of every state, grouped by step.
pub fn write_density(path: &Path, states: &[Tensor]) -> Result<()> {
    let mut w = writer(path, &strings(&["sample_id", "step", "x1", "x2"]))?;
    for (k, s) in states.iter().enumerate() {
        for r in 0..s.rows() {
            let row = s.row(r);
            let y = row.get(1).copied().unwrap_or(0.0);
            w.write_record([r.to_string(), k.to_string(), row[0].to_string(), y.to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Numeric table with a header row.
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl Table {
    pub fn column(&self, name: &str) -> Option<usize> {
        self.header.iter().position(|h| h == name)
    }
}

pub fn read_table(path: &Path) -> Result<Table> {
    let mut r = csv::Reader::from_path(path)?;
    let header: Vec<String> = r.headers()?.iter().map(|s| s.trim().to_string()).collect();
    let mut rows = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let row = rec
            .iter()
            .map(|s| s.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| CliError::Config(format!("{}: row {} is not numeric", path.display(), i + 1)))?;
        rows.push(row);
    }
    Ok(Table { header, rows })
}

/// Point set from a CSV: every column that is not an id/step column.
pub fn read_points(path: &Path) -> Result<Tensor> {
    let t = read_table(path)?;
    let keep: Vec<usize> = (0..t.header.len())
        .filter(|&i| !matches!(t.header[i].as_str(), "sample_id" | "step" | "id"))
        .collect();
    if keep.is_empty() {
        return Err(CliError::Config(format!("{}: no coordinate columns", path.display())));
    }
    let data: Vec<f64> = t.rows.iter().flat_map(|r| keep.iter().map(move |&i| r[i])).collect();
    Ok(Tensor::new(vec![t.rows.len(), keep.len()], data)?)
}

pub fn sha256_hex(text: &str) -> String {
    Sha256::digest(text.as_bytes()).iter().map(|b| format!("{:02x}", b)).collect()
}

#[derive(Debug, Serialize)]
pub struct Manifest<'a> {
    pub command: &'a str,
    pub preset: &'a str,
    pub seed: u64,
    pub config_hash: String,
    pub version: &'static str,
    pub config: Vec<&'a str>,
    pub iterations_completed: u64,
    pub diverged: Option<String>,
    pub outputs: Vec<String>,
}

pub fn write_manifest(dir: &Path, m: &Manifest) -> Result<()> {
    let text = serde_json::to_string_pretty(m).map_err(|e| CliError::Failed(e.to_string()))?;
    fs::write(dir.join("manifest.json"), text + "\n")?;
    Ok(())
}
