//! Executable bounds and the one-dimensional stationary analysis.
//!
//! Two families of results live here:
//!
//! - the virtual sequence `θ = θ̂ - (ηβ/(1-β)) m̂` of compensated SGDM, which
//!   follows plain gradient descent evaluated at the quantized point, and the
//!   constants of the resulting momentum bounds and noise floors;
//! - the quadratic `f(x) = (L/2) x²` under an additive quantization model
//!   `x̂ = x + ξ`, where each regime is a linear recursion
//!   `(x, m) <- A (x, m) + B ξ`. Its second moments `(u, v, w)` obey a linear
//!   map with a unique fixed point whenever `ρ(A) < 1`.
//!
//! Note the asymmetry of the gradient metric: with master weights the model
//! sees `x̂ = x + ξ`, so `E[x̂²] = u + σ²`; the naive and compensated regimes
//! store `x̂` itself, so `E[x̂²] = u`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{domain, EcoError, Result};
use crate::numerics::{RngKey, Tensor};
use crate::optim::injection_strength;
use crate::quantize::noise_sample;

/// Constants of the smoothness, gradient and error-variance assumptions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TheoryParams {
    /// Smoothness constant.
    pub l: f64,
    /// Gradient norm bound.
    pub g: f64,
    /// Bound on `E‖e‖²` for unbiased rounding.
    pub sigma2: f64,
    /// Bound on `‖e‖` for deterministic rounding.
    pub delta: f64,
    pub beta: f64,
    pub eta: f64,
    /// `f(θ₀) - f*`
    pub f_gap: f64,
}

impl TheoryParams {
    pub fn validate(&self) -> Result<()> {
        let pos = |n: &str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(domain(format!("{n} must be > 0, got {v}")))
            }
        };
        let nonneg = |n: &str, v: f64| {
            if v.is_finite() && v >= 0.0 {
                Ok(())
            } else {
                Err(domain(format!("{n} must be >= 0, got {v}")))
            }
        };
        pos("L", self.l)?;
        pos("G", self.g)?;
        pos("eta", self.eta)?;
        nonneg("sigma2", self.sigma2)?;
        nonneg("delta", self.delta)?;
        nonneg("f_gap", self.f_gap)?;
        if !(self.beta > 0.0 && self.beta < 1.0) {
            return Err(domain(format!("beta must lie in (0, 1), got {}", self.beta)));
        }
        Ok(())
    }
}

/// Constants derived from [`TheoryParams`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub alpha: f64,
    /// `C = ηβ/(1-β)`, the gap between quantized and virtual iterates per unit momentum.
    pub c: f64,
    /// Bound on `E‖m̂‖²` under stochastic rounding.
    pub m2_stoch: f64,
    /// Pathwise bound on `‖m̂‖` under deterministic rounding.
    pub m_det: f64,
    pub noise_floor_stoch: f64,
    pub noise_floor_det: f64,
}

pub fn bounds(p: &TheoryParams) -> Result<Bounds> {
    p.validate()?;
    let TheoryParams {
        l,
        g,
        sigma2,
        delta,
        beta,
        eta,
        ..
    } = *p;
    let alpha = injection_strength(eta, beta)?;
    let c = eta * beta / (1.0 - beta);
    let m2_stoch = 2.0 * g * g + 2.0 * alpha * alpha * sigma2 / (1.0 - beta * beta);
    let m_det = g + alpha.abs() * delta / (1.0 - beta);
    let noise_floor_stoch = 4.0 * eta * eta * beta * beta * l * l * g * g / (1.0 - beta).powi(2)
        + 4.0 * l * l * sigma2 / (1.0 - beta * beta);
    let noise_floor_det = 2.0 * l * l * c * c * m_det * m_det;
    Ok(Bounds {
        alpha,
        c,
        m2_stoch,
        m_det,
        noise_floor_stoch,
        noise_floor_det,
    })
}

/// Right-hand side of the convergence envelope: `4 f_gap / (ηT) + floor`.
pub fn convergence_envelope(f_gap: f64, eta: f64, steps: usize, floor: f64) -> f64 {
    4.0 * f_gap / (eta * steps as f64) + floor
}

/// `θ = θ̂ - (ηβ/(1-β)) m̂`.
pub fn virtual_point(theta_hat: &Tensor, m_hat: &Tensor, eta: f64, beta: f64) -> Result<Tensor> {
    if !(beta > 0.0 && beta < 1.0) {
        return Err(domain(format!("beta must lie in (0, 1), got {beta}")));
    }
    theta_hat.axpy(-eta * beta / (1.0 - beta), m_hat)
}

/// Largest deviation from `θ_{t+1} = θ_t - η ∇f(θ̂_t)` over a trajectory.
///
/// `theta_hat` and `m_hat` hold the states `0..=T`; `grads` holds the `T`
/// gradients evaluated at `θ̂_0 .. θ̂_{T-1}`. Returns the max-norm residual.
pub fn check_virtual_dynamics(
    theta_hat: &[Tensor],
    m_hat: &[Tensor],
    grads: &[Tensor],
    eta: f64,
    beta: f64,
) -> Result<f64> {
    if theta_hat.len() != m_hat.len() || theta_hat.len() != grads.len() + 1 {
        return Err(domain(format!(
            "trajectory lengths disagree: {} iterates, {} momenta, {} gradients",
            theta_hat.len(),
            m_hat.len(),
            grads.len()
        )));
    }
    let virt = theta_hat
        .iter()
        .zip(m_hat)
        .map(|(t, m)| virtual_point(t, m, eta, beta))
        .collect::<Result<Vec<_>>>()?;
    let mut worst = 0.0f64;
    for (t, g) in grads.iter().enumerate() {
        let predicted = virt[t].axpy(-eta, g)?;
        worst = worst.max(virt[t + 1].max_abs_diff(&predicted)?);
    }
    Ok(worst)
}

/// `0 < η < 2(1+β)/((1-β)L)`.
pub fn stability_check(l: f64, eta: f64, beta: f64) -> bool {
    l > 0.0 && eta > 0.0 && eta < 2.0 * (1.0 + beta) / ((1.0 - beta) * l)
}

/// Regimes of the one-dimensional analysis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime1d {
    Mw,
    Naive,
    Eco,
}

impl Regime1d {
    pub const ALL: [Regime1d; 3] = [Regime1d::Mw, Regime1d::Naive, Regime1d::Eco];

    pub fn name(self) -> &'static str {
        match self {
            Regime1d::Mw => "mw",
            Regime1d::Naive => "naive",
            Regime1d::Eco => "eco",
        }
    }
}

impl std::str::FromStr for Regime1d {
    type Err = EcoError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mw" => Ok(Regime1d::Mw),
            "naive" => Ok(Regime1d::Naive),
            "eco" => Ok(Regime1d::Eco),
            other => Err(domain(format!("unknown regime {other:?} (expected mw, naive or eco)"))),
        }
    }
}

/// `x' = a x + b m + B1 ξ`, `m' = c x + d m + B2 ξ`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegimeCoeffs {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub d: f64,
    pub b1: f64,
    pub b2: f64,
}

impl RegimeCoeffs {
    /// Largest eigenvalue modulus of `[[a, b], [c, d]]`.
    pub fn spectral_radius(&self) -> f64 {
        let tr = self.a + self.d;
        let det = self.a * self.d - self.b * self.c;
        let disc = tr * tr / 4.0 - det;
        if disc >= 0.0 {
            let r = disc.sqrt();
            (tr / 2.0 + r).abs().max((tr / 2.0 - r).abs())
        } else {
            det.sqrt()
        }
    }
}

pub fn regime_coeffs(regime: Regime1d, l: f64, eta: f64, beta: f64) -> Result<RegimeCoeffs> {
    if !(beta > 0.0 && beta < 1.0) {
        return Err(domain(format!("beta must lie in (0, 1), got {beta}")));
    }
    if !stability_check(l, eta, beta) {
        return Err(EcoError::Unstable(format!(
            "eta={eta} outside (0, 2(1+beta)/((1-beta)L)) for L={l}, beta={beta}"
        )));
    }
    let c = (1.0 - beta) * l;
    let (b1, b2) = match regime {
        Regime1d::Mw => (-eta * c, c),
        Regime1d::Naive => (1.0, 0.0),
        Regime1d::Eco => (1.0, (1.0 - beta) / (eta * beta)),
    };
    Ok(RegimeCoeffs {
        a: 1.0 - eta * c,
        b: -eta * beta,
        c,
        d: beta,
        b1,
        b2,
    })
}

/// Second moments `u = E[x²]`, `v = E[x m]`, `w = E[m²]`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RegimeMoments {
    pub u: f64,
    pub v: f64,
    pub w: f64,
}

pub fn moment_step(mom: &RegimeMoments, co: &RegimeCoeffs, sigma2: f64) -> RegimeMoments {
    let RegimeCoeffs { a, b, c, d, b1, b2 } = *co;
    let RegimeMoments { u, v, w } = *mom;
    RegimeMoments {
        u: a * a * u + 2.0 * a * b * v + b * b * w + b1 * b1 * sigma2,
        v: a * c * u + (a * d + b * c) * v + b * d * w + b1 * b2 * sigma2,
        w: c * c * u + 2.0 * c * d * v + d * d * w + b2 * b2 * sigma2,
    }
}

/// Iterate [`moment_step`] from zero until the estimated distance to the
/// fixed point falls below `tol` relative. Returns the moments and the
/// iteration count.
pub fn iterate_moments(co: &RegimeCoeffs, sigma2: f64, tol: f64) -> Result<(RegimeMoments, u64)> {
    let rho = co.spectral_radius();
    if rho >= 1.0 {
        return Err(EcoError::Unstable(format!("spectral radius {rho} >= 1")));
    }
    // the moment map contracts at rate rho^2; a step of size s leaves at most
    // s * rho^2 / (1 - rho^2) to go
    let gain = rho * rho / (1.0 - rho * rho);
    let mut m = RegimeMoments::default();
    const MAX_ITERS: u64 = 200_000_000;
    for i in 1..=MAX_ITERS {
        let next = moment_step(&m, co, sigma2);
        // each moment is judged on its own scale; |v| <= sqrt(u w)
        let tiny = f64::MIN_POSITIVE;
        let settled = |d: f64, s: f64| d == 0.0 || d * gain <= tol * s.max(tiny);
        let done = settled((next.u - m.u).abs(), next.u.abs())
            && settled((next.v - m.v).abs(), (next.u * next.w).abs().sqrt())
            && settled((next.w - m.w).abs(), next.w.abs());
        m = next;
        if done {
            return Ok((m, i));
        }
    }
    Err(EcoError::Unstable("moment iteration did not converge".into()))
}

/// Closed-form stationary `u` of each regime.
pub fn closed_form_u(regime: Regime1d, l: f64, eta: f64, beta: f64, sigma2: f64) -> Result<f64> {
    regime_coeffs(regime, l, eta, beta)?;
    let le = l * eta;
    let u = match regime {
        Regime1d::Mw => le * sigma2 * (1.0 + beta) / (2.0 * (1.0 + beta) - le * (1.0 - beta)),
        Regime1d::Naive => {
            sigma2 * ((1.0 - beta * beta) + 2.0 * beta * le)
                / (le * (2.0 * (1.0 - beta * beta) - le * (1.0 - beta).powi(2)))
        }
        Regime1d::Eco => 2.0 * sigma2 / (2.0 * (1.0 - beta * beta) - le * (1.0 - beta).powi(2)),
    };
    Ok(u)
}

/// Stationary `(v, w)` given `u`, from the `v` and `w` balance equations.
fn completing_vw(co: &RegimeCoeffs, u: f64, sigma2: f64) -> (f64, f64) {
    let RegimeCoeffs { a, b, c, d, b1, b2 } = *co;
    // (1 - ad - bc) v - bd w = ac u + B1 B2 σ²
    // -2cd v + (1 - d²) w   = c² u + B2² σ²
    let (p11, p12, r1) = (1.0 - a * d - b * c, -b * d, a * c * u + b1 * b2 * sigma2);
    let (p21, p22, r2) = (-2.0 * c * d, 1.0 - d * d, c * c * u + b2 * b2 * sigma2);
    let det = p11 * p22 - p12 * p21;
    ((r1 * p22 - p12 * r2) / det, (p11 * r2 - p21 * r1) / det)
}

/// Stationary moments from the closed form of `u`.
pub fn closed_form_moments(regime: Regime1d, l: f64, eta: f64, beta: f64, sigma2: f64) -> Result<RegimeMoments> {
    let co = regime_coeffs(regime, l, eta, beta)?;
    let u = closed_form_u(regime, l, eta, beta, sigma2)?;
    let (v, w) = completing_vw(&co, u, sigma2);
    Ok(RegimeMoments { u, v, w })
}

/// Relative tolerance of the fixed-point route.
pub const FIXED_POINT_TOL: f64 = 1e-12;

/// Stationary moments, computed in closed form and confirmed by fixed-point
/// iteration of the moment recursion. Disagreement beyond `1e-9` relative
/// in `u` is reported as an error.
pub fn stationary_moments(regime: Regime1d, l: f64, eta: f64, beta: f64, sigma2: f64) -> Result<RegimeMoments> {
    let closed = closed_form_moments(regime, l, eta, beta, sigma2)?;
    let co = regime_coeffs(regime, l, eta, beta)?;
    let (iterated, _) = iterate_moments(&co, sigma2, FIXED_POINT_TOL)?;
    let scale = closed.u.abs().max(f64::MIN_POSITIVE);
    if (closed.u - iterated.u).abs() > 1e-9 * scale {
        return Err(EcoError::Unstable(format!(
            "closed form u={} disagrees with fixed point u={}",
            closed.u, iterated.u
        )));
    }
    Ok(closed)
}

/// Stationary `E[(∇f(x̂))²]`: `L²(u + σ²)` with master weights, `L² u` otherwise.
pub fn stationary_grad_sq(regime: Regime1d, l: f64, eta: f64, beta: f64, sigma2: f64) -> Result<f64> {
    let u = stationary_moments(regime, l, eta, beta, sigma2)?.u;
    Ok(l * l * model_sight(regime, u, sigma2))
}

/// Stationary `E[x̂²]` of the parameter the model evaluates.
pub fn stationary_model_sq(regime: Regime1d, l: f64, eta: f64, beta: f64, sigma2: f64) -> Result<f64> {
    let u = stationary_moments(regime, l, eta, beta, sigma2)?.u;
    Ok(model_sight(regime, u, sigma2))
}

fn model_sight(regime: Regime1d, u: f64, sigma2: f64) -> f64 {
    match regime {
        Regime1d::Mw => u + sigma2,
        Regime1d::Naive | Regime1d::Eco => u,
    }
}

/// Configuration of a one-dimensional Monte Carlo run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MonteCarlo1d {
    pub regime: Regime1d,
    pub l: f64,
    pub eta: f64,
    pub beta: f64,
    /// Dither width; the noise variance is `delta² / 12`.
    pub delta: f64,
    /// Total steps across replicas.
    pub steps: u64,
    /// Steps discarded at the start of each replica; `None` means 20% of them.
    pub burn_in: Option<u64>,
    pub seed: u64,
    pub replicas: u64,
    pub x0: f64,
}

impl MonteCarlo1d {
    pub fn new(regime: Regime1d, l: f64, eta: f64, beta: f64, delta: f64, steps: u64, seed: u64) -> Self {
        Self {
            regime,
            l,
            eta,
            beta,
            delta,
            steps,
            burn_in: None,
            seed,
            replicas: 1,
            x0: 1.0,
        }
    }

    pub fn with_replicas(mut self, replicas: u64) -> Self {
        self.replicas = replicas;
        self
    }

    /// Dither width for a target noise variance.
    pub fn delta_for_sigma2(sigma2: f64) -> f64 {
        (12.0 * sigma2).sqrt()
    }
}

/// Magnitude past which a trajectory is declared divergent.
const DIVERGENCE_LIMIT: f64 = 1e150;

/// Time average of `x̂²` after burn-in, merged across replicas.
///
/// Replica `r` draws its noise from keys `(seed, step, 0, r)`, so replica 0
/// consumes exactly the draws of a single-group training run with the same seed.
pub fn monte_carlo_1d(cfg: &MonteCarlo1d) -> Result<f64> {
    if !stability_check(cfg.l, cfg.eta, cfg.beta) || !(cfg.beta > 0.0 && cfg.beta < 1.0) {
        return Err(EcoError::Unstable(format!(
            "eta={} beta={} L={} violates the stability condition",
            cfg.eta, cfg.beta, cfg.l
        )));
    }
    if !(cfg.delta >= 0.0 && cfg.delta.is_finite()) {
        return Err(domain(format!("delta must be >= 0, got {}", cfg.delta)));
    }
    let replicas = cfg.replicas.max(1);
    let per = cfg.steps / replicas;
    let burn = cfg.burn_in.unwrap_or(per / 5);
    if per <= burn {
        return Err(domain(format!(
            "steps per replica ({per}) must exceed burn-in ({burn})"
        )));
    }
    let results: Vec<Result<(f64, u64)>> = (0..replicas)
        .into_par_iter()
        .map(|r| simulate_replica(cfg, r, per, burn))
        .collect();
    let mut total = 0.0;
    let mut count = 0u64;
    for r in results {
        let (sum, n) = r?;
        total += sum;
        count += n;
    }
    Ok(total / count as f64)
}

fn simulate_replica(cfg: &MonteCarlo1d, replica: u64, steps: u64, burn: u64) -> Result<(f64, u64)> {
    let MonteCarlo1d {
        regime,
        l,
        eta,
        beta,
        delta,
        seed,
        x0,
        ..
    } = *cfg;
    let key = |t: u64| RngKey::new(seed, t, 0, replica);
    let alpha = injection_strength(eta, beta)?;
    let mut sum = 0.0;
    // x is the master weight for MW and the quantized state otherwise
    let mut x = x0;
    let mut m = 0.0;
    let mut x_hat = x0 + noise_sample(delta, key(0));
    if regime != Regime1d::Mw {
        x = x_hat;
    }
    for t in 0..steps {
        if t >= burn {
            sum += x_hat * x_hat;
        }
        let g = l * x_hat;
        let m_tilde = beta * m + (1.0 - beta) * g;
        match regime {
            Regime1d::Mw => {
                x += -eta * m_tilde;
                m = m_tilde;
                x_hat = x + noise_sample(delta, key(t + 1));
            }
            Regime1d::Naive | Regime1d::Eco => {
                let tilde = x_hat + -eta * m_tilde;
                let q = tilde + noise_sample(delta, key(t + 1));
                m = if regime == Regime1d::Eco {
                    m_tilde + alpha * (tilde - q)
                } else {
                    m_tilde
                };
                x_hat = q;
                x = q;
            }
        }
        if !(x.abs() < DIVERGENCE_LIMIT && m.abs() < DIVERGENCE_LIMIT) {
            return Err(EcoError::Unstable(format!(
                "{} trajectory diverged at step {t} (replica {replica})",
                regime.name()
            )));
        }
    }
    Ok((sum, steps - burn))
}

/// Storage formats for per-parameter byte accounting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ByteFormat {
    Fp32,
    Bf16,
    Fp8,
    Int4,
    None,
}

impl ByteFormat {
    pub fn bytes(self) -> f64 {
        match self {
            ByteFormat::Fp32 => 4.0,
            ByteFormat::Bf16 => 2.0,
            ByteFormat::Fp8 => 1.0,
            ByteFormat::Int4 => 0.5,
            ByteFormat::None => 0.0,
        }
    }
}

impl std::str::FromStr for ByteFormat {
    type Err = EcoError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fp32" => Ok(ByteFormat::Fp32),
            "bf16" => Ok(ByteFormat::Bf16),
            "fp8" => Ok(ByteFormat::Fp8),
            "int4" => Ok(ByteFormat::Int4),
            "none" => Ok(ByteFormat::None),
            other => Err(domain(format!(
                "unknown format {other:?} (expected fp32, bf16, fp8, int4 or none)"
            ))),
        }
    }
}

/// Persistent bytes per parameter: working weights, optional master copy and moments.
pub fn memory_bytes_per_param(
    weights: ByteFormat,
    master: Option<ByteFormat>,
    m: ByteFormat,
    v: Option<ByteFormat>,
) -> f64 {
    weights.bytes() + master.map_or(0.0, ByteFormat::bytes) + m.bytes() + v.map_or(0.0, ByteFormat::bytes)
}
