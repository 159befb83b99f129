use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};

use eco_core::harness::{run_training, MetricRow, TrainConfig};
use eco_core::optim::{ModeKind, OptimizerKind};
use eco_core::quantize::QuantGrid;
use eco_core::theory::{
    memory_bytes_per_param, monte_carlo_1d, stationary_model_sq, ByteFormat, MonteCarlo1d, Regime1d,
};
use eco_core::validation::{run_criterion, CriterionResult, CRITERIA};
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::config::{load_train_config, ConfigError};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Domain(#[from] eco_core::EcoError),
    #[error("cannot write {path}: {source}")]
    Write {
        path: String,
        source: std::io::Error,
    },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type CliResult<T> = std::result::Result<T, CliError>;

/// Fixed 17-significant-digit rendering used by every CSV.
pub fn fmt_real(x: f64) -> String {
    format!("{x:.16e}")
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map(fmt_real).unwrap_or_default()
}

fn csv_writer(path: &Path) -> CliResult<csv::Writer<File>> {
    let file = File::create(path).map_err(|source| CliError::Write {
        path: path.display().to_string(),
        source,
    })?;
    Ok(csv::Writer::from_writer(file))
}

pub const TRAIN_HEADER: [&str; 7] = [
    "step",
    "lr",
    "loss",
    "grad_norm_sq",
    "m_norm_sq",
    "err_cos",
    "err_relnorm",
];

pub fn write_train_csv(path: &Path, rows: &[MetricRow]) -> CliResult<()> {
    let mut w = csv_writer(path)?;
    w.write_record(TRAIN_HEADER)?;
    for r in rows {
        w.write_record([
            r.step.to_string(),
            fmt_real(r.lr),
            fmt_real(r.loss),
            fmt_opt(r.grad_norm_sq.is_finite().then_some(r.grad_norm_sq)),
            fmt_real(r.m_norm_sq),
            fmt_opt(r.err_cos),
            fmt_opt(r.err_relnorm),
        ])?;
    }
    w.flush().map_err(|source| CliError::Write {
        path: path.display().to_string(),
        source,
    })?;
    Ok(())
}

pub fn train(config: &Path, out: &Path) -> CliResult<i32> {
    let cfg = load_train_config(config)?;
    let rec = run_training(&cfg)?;
    write_train_csv(out, &rec.rows)?;
    if rec.diverged {
        eprintln!("run diverged after {} logged rows", rec.rows.len());
    }
    println!("final_loss {}", fmt_real(rec.final_loss));
    Ok(EXIT_OK)
}

/// Bytes per stored weight for a grid. Simulation grids without a fixed
/// storage format count as 8-bit.
fn weight_format_bytes(grid: &QuantGrid) -> f64 {
    match grid {
        QuantGrid::Identity => ByteFormat::Fp32.bytes(),
        QuantGrid::IntSymmetric { bits } => f64::from(*bits) / 8.0,
        QuantGrid::Fp8E4M3
        | QuantGrid::FixedStep { .. }
        | QuantGrid::UniformMax { .. }
        | QuantGrid::NoiseModel { .. } => ByteFormat::Fp8.bytes(),
    }
}

/// Persistent bytes per parameter of a configured run, averaged over groups
/// by parameter count.
pub fn config_bytes_per_param(cfg: &TrainConfig) -> CliResult<f64> {
    let (obj, _) = cfg.objective.build(cfg.seed)?;
    let fp32 = ByteFormat::Fp32;
    let v = (cfg.optimizer == OptimizerKind::Adam).then_some(fp32);
    let mut total = 0.0;
    let mut count = 0.0;
    for g in obj.groups() {
        let spec = match cfg.group_quant.get(&g.name) {
            Some(s) => *s,
            None if g.is_io && !cfg.quantize_io => eco_core::QuantSpec::identity(),
            None => cfg.quant,
        };
        let quantized = !spec.is_identity();
        let master = (quantized && cfg.mode == ModeKind::Mw).then_some(fp32);
        let mut bytes = memory_bytes_per_param(ByteFormat::None, master, fp32, v)
            + weight_format_bytes(&spec.grid);
        if quantized && cfg.mode == ModeKind::Exact {
            // previous-error buffer
            bytes += fp32.bytes();
        }
        let n: usize = g.shape.iter().product();
        total += bytes * n as f64;
        count += n as f64;
    }
    Ok(total / count)
}

pub fn compare(configs: &[PathBuf], out: &Path) -> CliResult<i32> {
    let loaded = configs
        .iter()
        .map(|p| load_train_config(p))
        .collect::<Result<Vec<_>, _>>()?;
    let results: Vec<CliResult<(f64, bool, f64)>> = loaded
        .par_iter()
        .map(|cfg| {
            let rec = run_training(cfg)?;
            Ok((rec.final_loss, rec.diverged, config_bytes_per_param(cfg)?))
        })
        .collect();
    let mut w = csv_writer(out)?;
    w.write_record(["index", "config", "final_loss", "diverged", "bytes_per_param"])?;
    for (i, (path, r)) in configs.iter().zip(results).enumerate() {
        let (loss, diverged, bytes) = r?;
        w.write_record([
            i.to_string(),
            path.display().to_string(),
            fmt_real(loss),
            diverged.to_string(),
            fmt_real(bytes),
        ])?;
        println!(
            "{i} {} final_loss={} diverged={diverged} bytes_per_param={bytes}",
            path.display(),
            fmt_real(loss)
        );
    }
    w.flush().map_err(|source| CliError::Write {
        path: out.display().to_string(),
        source,
    })?;
    Ok(EXIT_OK)
}

pub struct SimulateArgs {
    pub regimes: Vec<Regime1d>,
    pub l: f64,
    pub etas: Vec<f64>,
    pub betas: Vec<f64>,
    pub sigma2: f64,
    pub steps: u64,
    pub burn_in: Option<u64>,
    pub replicas: u64,
    pub seed: u64,
}

pub const SIMULATE_HEADER: [&str; 6] = [
    "eta",
    "beta",
    "regime",
    "closed_form_u",
    "monte_carlo_u",
    "rel_err",
];

/// Rows of `(eta, beta, regime, closed form E[x̂²], Monte Carlo E[x̂²], relative error)`
/// in eta-major, then beta, then regime order.
pub fn simulate_rows(a: &SimulateArgs) -> CliResult<Vec<(f64, f64, Regime1d, f64, f64, f64)>> {
    if !(a.sigma2.is_finite() && a.sigma2 >= 0.0) {
        return Err(eco_core::EcoError::Domain(format!("sigma2 must be >= 0, got {}", a.sigma2)).into());
    }
    let mut cases = Vec::new();
    for &eta in &a.etas {
        for &beta in &a.betas {
            for &regime in &a.regimes {
                cases.push((eta, beta, regime));
            }
        }
    }
    let delta = MonteCarlo1d::delta_for_sigma2(a.sigma2);
    cases
        .par_iter()
        .enumerate()
        .map(|(i, &(eta, beta, regime))| {
            let closed = stationary_model_sq(regime, a.l, eta, beta, a.sigma2)?;
            let mut mc = MonteCarlo1d::new(regime, a.l, eta, beta, delta, a.steps, a.seed.wrapping_add(i as u64))
                .with_replicas(a.replicas);
            mc.burn_in = a.burn_in;
            let empirical = monte_carlo_1d(&mc)?;
            let rel = if closed > 0.0 {
                (empirical - closed).abs() / closed
            } else {
                (empirical - closed).abs()
            };
            Ok((eta, beta, regime, closed, empirical, rel))
        })
        .collect()
}

pub fn simulate_1d(a: &SimulateArgs, out: &Path) -> CliResult<i32> {
    let rows = simulate_rows(a)?;
    let mut w = csv_writer(out)?;
    w.write_record(SIMULATE_HEADER)?;
    for (eta, beta, regime, closed, mc, rel) in rows {
        w.write_record([
            fmt_real(eta),
            fmt_real(beta),
            regime.name().to_string(),
            fmt_real(closed),
            fmt_real(mc),
            fmt_real(rel),
        ])?;
    }
    w.flush().map_err(|source| CliError::Write {
        path: out.display().to_string(),
        source,
    })?;
    Ok(EXIT_OK)
}

#[derive(Debug, Serialize)]
pub struct TheoryReport {
    pub passed: bool,
    pub criteria: Vec<CriterionResult>,
}

pub fn validate_theory(only: &[u32], out: Option<&Path>) -> CliResult<i32> {
    let ids: Vec<u32> = if only.is_empty() {
        CRITERIA.iter().map(|c| c.0).collect()
    } else {
        only.to_vec()
    };
    let mut criteria = Vec::new();
    for id in ids {
        let r = run_criterion(id)?;
        println!("{}", r.line());
        criteria.push(r);
    }
    let passed = criteria.iter().all(|c| c.passed);
    let report = TheoryReport { passed, criteria };
    if let Some(path) = out {
        let mut f = File::create(path).map_err(|source| CliError::Write {
            path: path.display().to_string(),
            source,
        })?;
        serde_json::to_writer_pretty(&mut f, &report)?;
        writeln!(f).map_err(|source| CliError::Write {
            path: path.display().to_string(),
            source,
        })?;
    }
    let failed = report.criteria.iter().filter(|c| !c.passed).count();
    println!(
        "{} of {} criteria passed",
        report.criteria.len() - failed,
        report.criteria.len()
    );
    Ok(if passed { EXIT_OK } else { EXIT_VALIDATION })
}

pub fn memory(weights: ByteFormat, master: ByteFormat, m: ByteFormat, v: ByteFormat) -> f64 {
    let opt = |f: ByteFormat| (f != ByteFormat::None).then_some(f);
    memory_bytes_per_param(weights, opt(master), m, opt(v))
}
