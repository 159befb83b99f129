//! The acceptance property suite run by `eco validate-theory`.
//!
//! Each check returns a [`CriterionResult`] with the measured quantity and the
//! threshold it is compared against, so a report can show how close a
//! property came to failing.

use std::collections::BTreeMap;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::harness::{run_training, LrSchedule, Objective, ObjectiveSpec, RunRecord, TrainConfig};
use crate::numerics::{keyed_uniform, RngKey, Tensor};
use crate::optim::{train_step, Hyper, ModeKind, OptimizerKind, ParamGroup};
use crate::quantize::{quantize, QuantGrid, QuantSpec, Rounding};
use crate::theory::{
    bounds, check_virtual_dynamics, convergence_envelope, memory_bytes_per_param, monte_carlo_1d,
    stationary_grad_sq, stationary_model_sq, virtual_point, ByteFormat, MonteCarlo1d, Regime1d,
    TheoryParams,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriterionResult {
    pub id: u32,
    pub name: String,
    pub passed: bool,
    pub measured: f64,
    pub threshold: f64,
    pub elapsed_s: f64,
    pub detail: String,
}

impl CriterionResult {
    /// One-line summary, e.g. `PASS  1 exact injection ...`.
    pub fn line(&self) -> String {
        format!(
            "{} {:>2} {:<34} measured={:.6e} threshold={:.6e} ({:.2}s) {}",
            if self.passed { "PASS" } else { "FAIL" },
            self.id,
            self.name,
            self.measured,
            self.threshold,
            self.elapsed_s,
            self.detail
        )
    }
}

/// Ordered list of every criterion.
pub const CRITERIA: [(u32, &str); 12] = [
    (1, "exact injection equivalence"),
    (2, "virtual sequence dynamics"),
    (3, "stationary moments vs monte carlo"),
    (4, "naive 1/eta law"),
    (5, "eco noise floor"),
    (6, "stochastic momentum bound"),
    (7, "deterministic momentum bound"),
    (8, "descent inequality"),
    (9, "convergence envelope"),
    (10, "mlp regime ordering"),
    (11, "memory accounting"),
    (12, "quantizer suite"),
];

/// Run criterion `id` (1-based).
pub fn run_criterion(id: u32) -> Result<CriterionResult> {
    let start = Instant::now();
    let (passed_value, measured, threshold, detail, budget) = match id {
        1 => exact_equivalence()?,
        2 => virtual_dynamics()?,
        3 => moments_vs_monte_carlo()?,
        4 => naive_inverse_eta()?,
        5 => eco_noise_floor()?,
        6 => stochastic_momentum_bound()?,
        7 => deterministic_momentum_bound()?,
        8 => descent_inequality()?,
        9 => convergence_envelope_check()?,
        10 => mlp_ordering()?,
        11 => memory_accounting()?,
        12 => quantizer_suite()?,
        other => {
            return Err(crate::error::domain(format!(
                "no criterion {other}; expected 1..=12"
            )))
        }
    };
    let elapsed_s = start.elapsed().as_secs_f64();
    let in_time = budget.is_none_or(|b| elapsed_s < b);
    let mut detail = detail;
    if !in_time {
        detail.push_str(&format!(" over time budget {:.0}s", budget.unwrap_or(0.0)));
    }
    Ok(CriterionResult {
        id,
        name: CRITERIA[(id - 1) as usize].1.to_string(),
        passed: passed_value && in_time,
        measured,
        threshold,
        elapsed_s,
        detail,
    })
}

/// Every criterion in order.
pub fn run_all() -> Result<Vec<CriterionResult>> {
    CRITERIA.iter().map(|&(id, _)| run_criterion(id)).collect()
}

/// `(passed, measured, threshold, detail, time budget in seconds)`
type Outcome = (bool, f64, f64, String, Option<f64>);

fn random_quadratic(dim: usize, l_min: f64, l_max: f64, init_scale: f64, seed: u64) -> Result<(Objective, Tensor)> {
    let (obj, mut init) = ObjectiveSpec::RandomQuadratic {
        dim,
        l_min,
        l_max,
        center_scale: 1.0,
        init_scale,
    }
    .build(seed)?;
    Ok((obj, init.remove(0)))
}

fn grad(obj: &Objective, theta: &Tensor) -> Result<(f64, Tensor)> {
    crate::harness::objective_eval(obj, theta)
}

/// A single-group run that exposes the state after every step.
struct Trace {
    theta_hat: Vec<Tensor>,
    m_hat: Vec<Tensor>,
    /// Unclipped gradients at `θ̂_t`.
    grads: Vec<Tensor>,
    /// Gradients actually fed to the optimizer.
    used: Vec<Tensor>,
}

fn trace(
    obj: &Objective,
    theta0: Tensor,
    spec: QuantSpec,
    mode: ModeKind,
    h: &Hyper,
    seed: u64,
    steps: u64,
) -> Result<Trace> {
    let mut group = ParamGroup::init("theta", 0, theta0, spec, OptimizerKind::Sgdm, mode, h, seed)?;
    let mut tr = Trace {
        theta_hat: vec![group.theta.clone()],
        m_hat: vec![group.state.momentum().clone()],
        grads: Vec::new(),
        used: Vec::new(),
    };
    for t in 0..steps {
        let (_, g) = grad(obj, &group.theta)?;
        let mut used = vec![g.clone()];
        if let Some(c) = h.clip_norm {
            crate::optim::clip_global_norm(&mut used, c);
        }
        tr.grads.push(g.clone());
        train_step(std::slice::from_mut(&mut group), vec![g], h, seed, t)?;
        tr.used.push(used.remove(0));
        tr.theta_hat.push(group.theta.clone());
        tr.m_hat.push(group.state.momentum().clone());
    }
    Ok(tr)
}

fn exact_equivalence() -> Result<Outcome> {
    let (obj, theta0) = random_quadratic(100, 0.1, 1.0, 1.0, 1)?;
    let h = Hyper::sgdm(0.05, 0.9);
    let mut worst = 0.0f64;
    for rounding in [Rounding::Rtn, Rounding::Sr] {
        let spec = QuantSpec::fixed_step(0.05, rounding);
        let mut mw = ParamGroup::init("theta", 0, theta0.clone(), spec, OptimizerKind::Sgdm, ModeKind::Mw, &h, 7)?;
        let mut ex =
            ParamGroup::init("theta", 0, theta0.clone(), spec, OptimizerKind::Sgdm, ModeKind::Exact, &h, 7)?;
        worst = worst.max(ex.theta.max_abs_diff(&mw.theta)?);
        for t in 0..1000 {
            let g_mw = grad(&obj, &mw.theta)?.1;
            let g_ex = grad(&obj, &ex.theta)?.1;
            train_step(std::slice::from_mut(&mut mw), vec![g_mw], &h, 7, t)?;
            train_step(std::slice::from_mut(&mut ex), vec![g_ex], &h, 7, t)?;
            // mw.theta is q(θ^MW) drawn with the same key as the injected run
            worst = worst.max(ex.theta.max_abs_diff(&mw.theta)?);
        }
    }
    Ok((worst <= 1e-9, worst, 1e-9, "rtn and sr, 1000 steps".into(), Some(5.0)))
}

fn virtual_dynamics() -> Result<Outcome> {
    let (obj, theta0) = random_quadratic(10, 0.1, 1.0, 1.0, 2)?;
    let (eta, beta, delta) = (0.05, 0.9, 0.01);
    let h = Hyper::sgdm(eta, beta);
    let spec = QuantSpec::fixed_step(delta, Rounding::Rtn);
    let eco = trace(&obj, theta0.clone(), spec, ModeKind::Eco, &h, 3, 1000)?;
    let eco_res = check_virtual_dynamics(&eco.theta_hat, &eco.m_hat, &eco.grads, eta, beta)?;
    let naive = trace(&obj, theta0, spec, ModeKind::Naive, &h, 3, 1000)?;
    let naive_res = check_virtual_dynamics(&naive.theta_hat, &naive.m_hat, &naive.grads, eta, beta)?;
    let naive_floor = delta / (2.0 * beta);
    let passed = eco_res <= 1e-10 && naive_res >= naive_floor;
    Ok((
        passed,
        eco_res,
        1e-10,
        format!(
            "eco residual {eco_res:.3e} (<= 1e-10); naive residual {naive_res:.6e} vs required >= {naive_floor:.6e}"
        ),
        Some(5.0),
    ))
}

fn moments_vs_monte_carlo() -> Result<Outcome> {
    let delta: f64 = 0.346;
    let sigma2 = delta * delta / 12.0;
    let mut cases = Vec::new();
    for eta in [0.2, 0.1, 0.05] {
        for beta in [0.5, 0.9] {
            for regime in Regime1d::ALL {
                cases.push((eta, beta, regime));
            }
        }
    }
    let rows: Vec<Result<(f64, String)>> = cases
        .par_iter()
        .enumerate()
        .map(|(i, &(eta, beta, regime))| {
            let closed = stationary_model_sq(regime, 1.0, eta, beta, sigma2)?;
            let mc = monte_carlo_1d(&MonteCarlo1d::new(regime, 1.0, eta, beta, delta, 10_000_000, 100 + i as u64))?;
            let rel = (mc - closed).abs() / closed;
            Ok((rel, format!("{}@eta={eta},beta={beta}", regime.name())))
        })
        .collect();
    let mut worst = (0.0, String::new());
    for r in rows {
        let (rel, name) = r?;
        if rel >= worst.0 {
            worst = (rel, name);
        }
    }
    Ok((
        worst.0 <= 0.03,
        worst.0,
        0.03,
        format!("18 cases, worst {}", worst.1),
        Some(60.0),
    ))
}

fn naive_inverse_eta() -> Result<Outcome> {
    let delta: f64 = 0.346;
    let sigma2 = delta * delta / 12.0;
    let mut worst_closed = 0.0f64;
    let mut worst_mc = 0.0f64;
    for beta in [0.5, 0.9] {
        let a = stationary_grad_sq(Regime1d::Naive, 1.0, 1e-3, beta, sigma2)?;
        let b = stationary_grad_sq(Regime1d::Naive, 1.0, 5e-4, beta, sigma2)?;
        worst_closed = worst_closed.max((b / a - 2.0).abs() / 2.0);
        let mc = |eta: f64, seed: u64| {
            monte_carlo_1d(&MonteCarlo1d::new(Regime1d::Naive, 1.0, eta, beta, delta, 16_000_000, seed).with_replicas(8))
        };
        let ratio = mc(5e-3, 41)? / mc(1e-2, 42)?;
        worst_mc = worst_mc.max((ratio - 2.0).abs() / 2.0);
    }
    let passed = worst_closed <= 0.01 && worst_mc <= 0.10;
    Ok((
        passed,
        worst_closed,
        0.01,
        format!("closed-form ratio error {worst_closed:.4e} (<= 1%); monte carlo ratio error {worst_mc:.4e} (<= 10%)"),
        None,
    ))
}

fn eco_noise_floor() -> Result<Outcome> {
    let delta: f64 = 0.346;
    let sigma2 = delta * delta / 12.0;
    let mut worst_closed = 0.0f64;
    let mut worst_mc = 0.0f64;
    for beta in [0.5, 0.9] {
        let limit = sigma2 / (1.0 - beta * beta);
        let closed = stationary_grad_sq(Regime1d::Eco, 1.0, 1e-4, beta, sigma2)?;
        worst_closed = worst_closed.max((closed - limit).abs() / limit);
        let mc = monte_carlo_1d(&MonteCarlo1d::new(Regime1d::Eco, 1.0, 1e-3, beta, delta, 16_000_000, 51).with_replicas(8))?;
        worst_mc = worst_mc.max((mc - limit).abs() / limit);
    }
    let passed = worst_closed <= 0.005 && worst_mc <= 0.05;
    Ok((
        passed,
        worst_closed,
        0.005,
        format!("closed-form error {worst_closed:.4e} (<= 0.5%); monte carlo error {worst_mc:.4e} (<= 5%)"),
        None,
    ))
}

/// `d Δ² / 4`, the largest `E‖e‖²` of stochastic rounding on a `Δ` grid.
fn sr_sigma2(dim: usize, delta: f64) -> f64 {
    dim as f64 * delta * delta / 4.0
}

fn stochastic_momentum_bound() -> Result<Outcome> {
    let (dim, delta, eta, beta, g_max) = (10, 0.01, 0.05, 0.9, 1.0);
    let (obj, theta0) = random_quadratic(dim, 0.1, 1.0, 10.0, 4)?;
    let h = Hyper::sgdm(eta, beta).with_clip_norm(g_max);
    let b = bounds(&TheoryParams {
        l: 1.0,
        g: g_max,
        sigma2: sr_sigma2(dim, delta),
        delta: 0.0,
        beta,
        eta,
        f_gap: 0.0,
    })?;
    let tr = trace(&obj, theta0, QuantSpec::fixed_step(delta, Rounding::Sr), ModeKind::Eco, &h, 5, 100_000)?;
    let mut sum = 0.0;
    let mut worst = 0.0f64;
    for (t, m) in tr.m_hat.iter().enumerate().skip(1) {
        sum += m.norm_sq();
        if t % 1000 == 0 {
            worst = worst.max(sum / t as f64);
        }
    }
    Ok((
        worst <= b.m2_stoch,
        worst,
        b.m2_stoch,
        "largest running mean of |m|^2 over 100 checkpoints".into(),
        None,
    ))
}

fn deterministic_momentum_bound() -> Result<Outcome> {
    let (dim, delta, eta, beta, g_max) = (10, 0.01, 0.05, 0.9, 1.0);
    let (obj, theta0) = random_quadratic(dim, 0.1, 1.0, 10.0, 6)?;
    let h = Hyper::sgdm(eta, beta).with_clip_norm(g_max);
    let b = bounds(&TheoryParams {
        l: 1.0,
        g: g_max,
        sigma2: 0.0,
        delta: delta * (dim as f64).sqrt() / 2.0,
        beta,
        eta,
        f_gap: 0.0,
    })?;
    let tr = trace(&obj, theta0, QuantSpec::fixed_step(delta, Rounding::Rtn), ModeKind::Eco, &h, 7, 100_000)?;
    let norms: Vec<f64> = tr.m_hat.iter().map(Tensor::norm).collect();
    let worst = norms.iter().copied().fold(0.0, f64::max);
    let violations = norms.iter().filter(|&&n| n > b.m_det).count();
    Ok((
        violations == 0,
        worst,
        b.m_det,
        format!("{violations} violations over 100000 steps"),
        None,
    ))
}

fn descent_inequality() -> Result<Outcome> {
    let mut worst = f64::NEG_INFINITY;
    let mut checked = 0usize;
    for (seed, rounding) in [(8u64, Rounding::Rtn), (9, Rounding::Sr)] {
        let l = 2.0;
        let (obj, theta0) = random_quadratic(20, 0.05, l, 3.0, seed)?;
        let (eta, beta) = (1.0 / (4.0 * l), 0.9);
        let c = eta * beta / (1.0 - beta);
        let h = Hyper::sgdm(eta, beta);
        let tr = trace(&obj, theta0, QuantSpec::fixed_step(0.02, rounding), ModeKind::Eco, &h, seed, 10_000)?;
        let f_virtual = |t: usize| -> Result<f64> {
            let v = virtual_point(&tr.theta_hat[t], &tr.m_hat[t], eta, beta)?;
            Ok(grad(&obj, &v)?.0)
        };
        let mut f_now = f_virtual(0)?;
        for t in 0..tr.grads.len() {
            let f_next = f_virtual(t + 1)?;
            let rhs = f_now - eta / 4.0 * tr.grads[t].norm_sq()
                + eta * l * l * c * c / 2.0 * tr.m_hat[t].norm_sq();
            worst = worst.max(f_next - rhs);
            f_now = f_next;
            checked += 1;
        }
    }
    Ok((
        worst <= 1e-9,
        worst,
        1e-9,
        format!("largest excess over {checked} steps (rtn and sr)"),
        None,
    ))
}

fn convergence_envelope_check() -> Result<Outcome> {
    let (dim, delta, l, beta) = (10, 0.01, 1.0, 0.9);
    let eta = 1.0 / (2.0 * l);
    let steps = 10_000usize;
    let (obj, theta0) = random_quadratic(dim, 0.1, l, 1.0, 10)?;
    let h = Hyper::sgdm(eta, beta);
    let spec = QuantSpec::fixed_step(delta, Rounding::Sr);
    let runs: Vec<Result<Trace>> = (0..20u64)
        .into_par_iter()
        .map(|seed| trace(&obj, theta0.clone(), spec, ModeKind::Eco, &h, 1000 + seed, steps as u64))
        .collect();
    let runs = runs.into_iter().collect::<Result<Vec<_>>>()?;
    let mut mean_sq = vec![0.0; steps];
    let mut g_max = 0.0f64;
    let mut f_gap = 0.0;
    for tr in &runs {
        f_gap += grad(&obj, &tr.theta_hat[0])?.0 / runs.len() as f64;
        for (t, g) in tr.grads.iter().enumerate() {
            mean_sq[t] += g.norm_sq() / runs.len() as f64;
            g_max = g_max.max(g.norm());
        }
    }
    let best = mean_sq.iter().copied().fold(f64::INFINITY, f64::min);
    let b = bounds(&TheoryParams {
        l,
        g: g_max,
        sigma2: sr_sigma2(dim, delta),
        delta: 0.0,
        beta,
        eta,
        f_gap,
    })?;
    let envelope = convergence_envelope(f_gap, eta, steps, b.noise_floor_stoch);
    Ok((
        best <= envelope,
        best,
        envelope,
        format!("20 seeds, G={g_max:.4}, f_gap={f_gap:.4}"),
        None,
    ))
}

/// Shared setup of the Mlp2 regime comparison.
pub fn mlp_ordering_config(mode: ModeKind, rounding: Rounding, seed: u64) -> TrainConfig {
    let eta = 0.05;
    TrainConfig {
        objective: ObjectiveSpec::Mlp2 {
            inputs: 8,
            hidden: 16,
            outputs: 1,
            samples: 256,
            noise: 0.0,
        },
        optimizer: OptimizerKind::Sgdm,
        mode,
        hyper: Hyper::sgdm(eta, 0.9),
        quant: QuantSpec::fixed_step(0.05, rounding),
        group_quant: BTreeMap::new(),
        quantize_io: true,
        steps: 20_000,
        seed,
        lr_schedule: LrSchedule::Cosine {
            peak: eta,
            floor: 0.01 * eta,
            warmup_frac: 0.0,
        },
        metrics_every: 100,
        batch_size: Some(2),
    }
}

/// Relative loss improvement between 10% of the run and its end.
pub fn late_improvement(rec: &RunRecord) -> f64 {
    let start = rec.rows[rec.rows.len() / 10].loss;
    (start - rec.final_loss) / start
}

fn mlp_ordering() -> Result<Outcome> {
    let seeds = [1u64, 2, 3];
    let arms = [
        (ModeKind::Mw, Rounding::Sr),
        (ModeKind::Eco, Rounding::Sr),
        (ModeKind::Naive, Rounding::Sr),
        (ModeKind::Naive, Rounding::Rtn),
    ];
    let jobs: Vec<(u64, usize)> = seeds.iter().flat_map(|&s| (0..arms.len()).map(move |a| (s, a))).collect();
    let recs: Vec<Result<RunRecord>> = jobs
        .par_iter()
        .map(|&(s, a)| run_training(&mlp_ordering_config(arms[a].0, arms[a].1, s)))
        .collect();
    let recs = recs.into_iter().collect::<Result<Vec<_>>>()?;
    let mut means = [0.0f64; 3];
    let mut diverged = false;
    let mut worst_stall = 0.0f64;
    let mut detail = String::new();
    for (i, &s) in seeds.iter().enumerate() {
        let r = &recs[i * arms.len()..(i + 1) * arms.len()];
        for (k, mean) in means.iter_mut().enumerate() {
            *mean += r[k].final_loss / seeds.len() as f64;
            diverged |= r[k].diverged;
        }
        let stall = if r[3].diverged { f64::INFINITY } else { late_improvement(&r[3]) };
        worst_stall = worst_stall.max(stall);
        detail.push_str(&format!(
            "seed {s}: mw={:.4e} eco_sr={:.4e} naive_sr={:.4e} naive_rtn_gain={stall:.2e}; ",
            r[0].final_loss, r[1].final_loss, r[2].final_loss
        ));
    }
    let [mw, eco, naive] = means;
    let ordered = !diverged && mw <= eco && eco <= naive;
    // negative when eco_sr beats mw
    let gap = (naive - eco) / (eco - mw);
    detail.push_str(&format!(
        "mean: mw={mw:.4e} eco_sr={eco:.4e} naive_sr={naive:.4e} ordered={ordered} worst_rtn_gain={worst_stall:.2e}"
    ));
    let passed = ordered && gap >= 5.0 && worst_stall < 0.01;
    Ok((passed, gap, 5.0, detail, None))
}

fn memory_accounting() -> Result<Outcome> {
    let fp32 = ByteFormat::Fp32;
    let master_state = memory_bytes_per_param(ByteFormat::None, Some(fp32), fp32, Some(fp32));
    let eco = memory_bytes_per_param(ByteFormat::Fp8, None, fp32, Some(fp32));
    let with_master = memory_bytes_per_param(ByteFormat::Fp8, Some(fp32), fp32, Some(fp32));
    let reduction = 1.0 - eco / master_state;
    let passed = master_state == 12.0 && eco == 9.0 && with_master == 13.0 && reduction == 0.25;
    Ok((
        passed,
        reduction,
        0.25,
        format!("{master_state} -> {eco} bytes/param; fp8 weights with master {with_master}"),
        None,
    ))
}

fn uniform_tensor(n: usize, lo: f64, hi: f64, seed: u64) -> Tensor {
    Tensor::from_vec(
        (0..n)
            .map(|i| lo + (hi - lo) * keyed_uniform(RngKey::new(seed, 0, 99, i as u64)))
            .collect(),
    )
}

fn quantizer_suite() -> Result<Outcome> {
    const N: usize = 1_000_000;
    let mut failures = Vec::new();

    // unbiasedness of stochastic rounding at a few offsets inside a cell
    let mut worst_z = 0.0f64;
    for (j, &x) in [0.137, 0.5, 0.913].iter().enumerate() {
        let delta = 0.25;
        let v = x * delta + 1.0;
        let out = quantize(
            &Tensor::from_vec(vec![v; N]),
            &QuantSpec::fixed_step(delta, Rounding::Sr),
            RngKey::new(12, 0, j as u64, 0),
        )?;
        let mean = out.quantized.values().iter().sum::<f64>() / N as f64;
        let se = (x * (1.0 - x)).sqrt() * delta / (N as f64).sqrt();
        worst_z = worst_z.max((mean - v).abs() / se);
    }
    if worst_z > 4.0 {
        failures.push(format!("sr bias z={worst_z:.2}"));
    }

    // round-to-nearest stays within half a step
    let x = uniform_tensor(10_000, -3.0, 3.0, 1);
    let mut worst_half = 0.0f64;
    for grid in [
        QuantGrid::FixedStep { delta: 0.1 },
        QuantGrid::UniformMax { rho: 7.0 },
        QuantGrid::IntSymmetric { bits: 8 },
    ] {
        let out = quantize(&x, &QuantSpec::new(grid, Rounding::Rtn), RngKey::default())?;
        let step = out.scale.values()[0];
        worst_half = worst_half.max(out.error.max_abs() / (step / 2.0));
    }
    if worst_half > 1.0 + 1e-12 {
        failures.push(format!("rtn error {worst_half:.6} half-steps"));
    }

    // a fixed grid is idempotent
    for rounding in [Rounding::Rtn, Rounding::Sr] {
        let spec = QuantSpec::fixed_step(0.1, rounding);
        let once = quantize(&x, &spec, RngKey::new(3, 0, 0, 0))?.quantized;
        let twice = quantize(&once, &spec, RngKey::new(4, 0, 0, 0))?.quantized;
        if once != twice {
            failures.push(format!("{rounding:?} fixed-step not idempotent"));
        }
    }

    // dither variance
    let delta = 0.346;
    let zeros = Tensor::zeros(&[N]);
    let out = quantize(&zeros, &QuantSpec::noise_model(delta), RngKey::new(13, 0, 0, 0))?;
    let e = out.error.values();
    let mean = e.iter().sum::<f64>() / N as f64;
    let var = e.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (N - 1) as f64;
    let target = delta * delta / 12.0;
    let var_err = (var - target).abs() / target;
    if var_err > 0.02 {
        failures.push(format!("noise variance off by {var_err:.4}"));
    }

    let detail = if failures.is_empty() {
        format!("sr max z={worst_z:.2}, rtn max {worst_half:.3} half-steps, idempotent, noise variance error {var_err:.2e}")
    } else {
        failures.join("; ")
    };
    Ok((failures.is_empty(), var_err, 0.02, detail, None))
}
