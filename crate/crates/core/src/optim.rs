//! SGDM and Adam on quantized parameters.
//!
//! Four regimes are supported:
//!
//! - **master weights**: a high-precision copy accumulates the updates and is
//!   requantized after every step for the next gradient evaluation;
//! - **naive**: the update is applied to the quantized parameters and the
//!   result is quantized again, losing whatever falls below the grid;
//! - **eco**: as naive, but the quantization error `e = θ̃ - q(θ̃)` is injected
//!   into the momentum with strength `α = (1/η)(1 - 1/β)` so that it is paid
//!   back on later steps. No extra buffer is stored;
//! - **exact injection** (SGDM only): also stores the previous error and
//!   reproduces the master-weight trajectory of quantized iterates exactly.
//!
//! Stochastic rounding draws are addressed by `(seed, step, group id, element)`.
//! The iterate produced by step `t` is quantized with step index `t + 1`, and
//! the initial quantization uses index 0, so master-weight and exact-injection
//! runs consume identical draws.

use serde::{Deserialize, Serialize};

use crate::error::{domain, EcoError, Result};
use crate::numerics::{RngKey, Tensor};
use crate::quantize::{quantize, QuantSpec};

/// Optimizer hyperparameters. `beta1` doubles as the SGDM momentum coefficient.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Hyper {
    pub eta: f64,
    #[serde(alias = "beta")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default)]
    pub clip_norm: Option<f64>,
}

fn default_beta2() -> f64 {
    0.999
}

fn default_epsilon() -> f64 {
    1e-8
}

impl Hyper {
    pub fn sgdm(eta: f64, beta: f64) -> Self {
        Self {
            eta,
            beta1: beta,
            beta2: default_beta2(),
            epsilon: default_epsilon(),
            weight_decay: 0.0,
            clip_norm: None,
        }
    }

    pub fn adam(eta: f64, beta1: f64, beta2: f64, epsilon: f64) -> Self {
        Self {
            eta,
            beta1,
            beta2,
            epsilon,
            weight_decay: 0.0,
            clip_norm: None,
        }
    }

    pub fn with_clip_norm(mut self, clip: f64) -> Self {
        self.clip_norm = Some(clip);
        self
    }

    pub fn with_weight_decay(mut self, wd: f64) -> Self {
        self.weight_decay = wd;
        self
    }

    pub fn with_eta(mut self, eta: f64) -> Self {
        self.eta = eta;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eta.is_finite() && self.eta > 0.0) {
            return Err(domain(format!("eta must be > 0, got {}", self.eta)));
        }
        check_beta("beta1", self.beta1)?;
        if !(0.0..1.0).contains(&self.beta2) {
            return Err(domain(format!("beta2 must lie in [0, 1), got {}", self.beta2)));
        }
        if !(self.epsilon.is_finite() && self.epsilon >= 0.0) {
            return Err(domain(format!("epsilon must be >= 0, got {}", self.epsilon)));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(domain(format!(
                "weight_decay must be >= 0, got {}",
                self.weight_decay
            )));
        }
        if let Some(c) = self.clip_norm {
            if !(c.is_finite() && c > 0.0) {
                return Err(domain(format!("clip_norm must be > 0, got {c}")));
            }
        }
        Ok(())
    }
}

fn check_beta(name: &str, beta: f64) -> Result<()> {
    if beta > 0.0 && beta < 1.0 {
        Ok(())
    } else {
        Err(domain(format!("{name} must lie strictly inside (0, 1), got {beta}")))
    }
}

/// Error injection strength `α = (1/η)(1 - 1/β)`; always negative.
pub fn injection_strength(eta: f64, beta: f64) -> Result<f64> {
    check_beta("beta", beta)?;
    if !(eta > 0.0) {
        return Err(domain(format!("eta must be > 0, got {eta}")));
    }
    Ok((1.0 / eta) * (1.0 - 1.0 / beta))
}

/// Parameter handling regime.
#[derive(Debug, Clone, PartialEq)]
pub enum Regime {
    MasterWeights { master: Tensor },
    Naive,
    Eco,
    ExactInjection { prev_error: Tensor },
}

impl Regime {
    pub fn kind(&self) -> ModeKind {
        match self {
            Regime::MasterWeights { .. } => ModeKind::Mw,
            Regime::Naive => ModeKind::Naive,
            Regime::Eco => ModeKind::Eco,
            Regime::ExactInjection { .. } => ModeKind::Exact,
        }
    }
}

/// Regime selector without attached buffers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModeKind {
    Mw,
    Naive,
    Eco,
    Exact,
}

impl ModeKind {
    pub fn name(self) -> &'static str {
        match self {
            ModeKind::Mw => "mw",
            ModeKind::Naive => "naive",
            ModeKind::Eco => "eco",
            ModeKind::Exact => "exact",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgdm,
    Adam,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SgdmState {
    pub m: Tensor,
    pub regime: Regime,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Tensor,
    pub v: Tensor,
    pub t: u64,
    pub regime: Regime,
}

#[derive(Debug, Clone, PartialEq)]
pub enum OptimState {
    Sgdm(SgdmState),
    Adam(AdamState),
}

impl OptimState {
    pub fn momentum(&self) -> &Tensor {
        match self {
            OptimState::Sgdm(s) => &s.m,
            OptimState::Adam(s) => &s.m,
        }
    }

    pub fn regime(&self) -> &Regime {
        match self {
            OptimState::Sgdm(s) => &s.regime,
            OptimState::Adam(s) => &s.regime,
        }
    }
}

/// `m̃ = β m + (1-β) g`, `θ̃ = θ - η m̃` (minus `η λ θ` under weight decay).
pub fn sgdm_update(theta: &Tensor, m: &Tensor, g: &Tensor, h: &Hyper) -> Result<(Tensor, Tensor)> {
    theta.ensure_same_shape(m)?;
    theta.ensure_same_shape(g)?;
    let beta = h.beta1;
    let m_tilde = m.zip_map(g, |mi, gi| beta * mi + (1.0 - beta) * gi)?;
    let mut theta_tilde = theta.axpy(-h.eta, &m_tilde)?;
    apply_decay(&mut theta_tilde, theta, h);
    Ok((theta_tilde, m_tilde))
}

fn apply_decay(theta_tilde: &mut Tensor, theta: &Tensor, h: &Hyper) {
    if h.weight_decay > 0.0 {
        let k = h.eta * h.weight_decay;
        for (t, p) in theta_tilde.values_mut().iter_mut().zip(theta.values()) {
            *t -= k * p;
        }
    }
}

/// Quantized parameters and corrected momentum after one compensated step.
#[derive(Debug, Clone, PartialEq)]
pub struct EcoQuantized {
    pub theta_hat: Tensor,
    pub m_hat: Tensor,
    /// `θ̃ - θ̂`
    pub error: Tensor,
}

/// Quantize `θ̃` and inject the error into the SGDM momentum: `m̂ = m̃ + α e`.
pub fn eco_quantize_sgdm(
    theta_tilde: &Tensor,
    m_tilde: &Tensor,
    h: &Hyper,
    spec: &QuantSpec,
    key: RngKey,
) -> Result<EcoQuantized> {
    theta_tilde.ensure_same_shape(m_tilde)?;
    let alpha = injection_strength(h.eta, h.beta1)?;
    let out = quantize(theta_tilde, spec, key)?;
    let m_hat = m_tilde.axpy(alpha, &out.error)?;
    Ok(EcoQuantized {
        theta_hat: out.quantized,
        m_hat,
        error: out.error,
    })
}

/// Output of one Adam step before quantization.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamUpdate {
    pub theta_tilde: Tensor,
    pub m_tilde: Tensor,
    pub v_next: Tensor,
    pub t_next: u64,
}

/// Bias-corrected Adam step with the incremented step counter.
pub fn adam_update(
    theta: &Tensor,
    m: &Tensor,
    v: &Tensor,
    t: u64,
    g: &Tensor,
    h: &Hyper,
) -> Result<AdamUpdate> {
    theta.ensure_same_shape(m)?;
    theta.ensure_same_shape(v)?;
    theta.ensure_same_shape(g)?;
    let t_next = t + 1;
    let (b1, b2) = (h.beta1, h.beta2);
    let bc1 = 1.0 - b1.powi(t_next as i32);
    let bc2 = 1.0 - b2.powi(t_next as i32);
    let m_tilde = m.zip_map(g, |mi, gi| b1 * mi + (1.0 - b1) * gi)?;
    let v_next = v.zip_map(g, |vi, gi| b2 * vi + (1.0 - b2) * gi * gi)?;
    let mut theta_tilde = theta.clone();
    for ((th, mi), vi) in theta_tilde
        .values_mut()
        .iter_mut()
        .zip(m_tilde.values())
        .zip(v_next.values())
    {
        *th -= h.eta * (mi / bc1) / ((vi / bc2).sqrt() + h.epsilon);
    }
    apply_decay(&mut theta_tilde, theta, h);
    Ok(AdamUpdate {
        theta_tilde,
        m_tilde,
        v_next,
        t_next,
    })
}

/// Quantize `θ̃` and inject the error into the Adam first moment using the
/// element-wise effective step `η / ((1-β₁ᵗ)(√(v/(1-β₂ᵗ)) + ε))` in place of `η`.
pub fn eco_quantize_adam(
    theta_tilde: &Tensor,
    m_tilde: &Tensor,
    v_next: &Tensor,
    t_next: u64,
    h: &Hyper,
    spec: &QuantSpec,
    key: RngKey,
) -> Result<EcoQuantized> {
    check_beta("beta1", h.beta1)?;
    if t_next == 0 {
        return Err(domain("Adam injection needs t_next >= 1"));
    }
    theta_tilde.ensure_same_shape(m_tilde)?;
    theta_tilde.ensure_same_shape(v_next)?;
    let bc1 = 1.0 - h.beta1.powi(t_next as i32);
    let bc2 = 1.0 - h.beta2.powi(t_next as i32);
    let base = bc1 / h.eta * (1.0 - 1.0 / h.beta1);
    let out = quantize(theta_tilde, spec, key)?;
    let mut m_hat = m_tilde.clone();
    for ((mh, e), v) in m_hat
        .values_mut()
        .iter_mut()
        .zip(out.error.values())
        .zip(v_next.values())
    {
        *mh += base * ((v / bc2).sqrt() + h.epsilon) * e;
    }
    Ok(EcoQuantized {
        theta_hat: out.quantized,
        m_hat,
        error: out.error,
    })
}

/// Starting state of exact injection: `θ̂₀ = q(θ₀)`, `e₀ = θ₀ - θ̂₀`,
/// `m₀ᴵᴹ = m₀ - e₀/(ηβ)`. Returns `(θ̂₀, m₀ᴵᴹ, e₀)`.
pub fn exact_injection_init(
    theta0: &Tensor,
    m0: &Tensor,
    h: &Hyper,
    spec: &QuantSpec,
    key: RngKey,
) -> Result<(Tensor, Tensor, Tensor)> {
    check_beta("beta1", h.beta1)?;
    theta0.ensure_same_shape(m0)?;
    let out = quantize(theta0, spec, key)?;
    let m_im = m0.axpy(-1.0 / (h.eta * h.beta1), &out.error)?;
    Ok((out.quantized, m_im, out.error))
}

/// One exact-injection step. Returns `(θ̂', m', e')` with
/// `m' = m̄ + e/η - e'/(ηβ)`.
pub fn exact_injection_sgdm_step(
    theta_hat: &Tensor,
    m_im: &Tensor,
    prev_error: &Tensor,
    g: &Tensor,
    h: &Hyper,
    spec: &QuantSpec,
    key: RngKey,
) -> Result<(Tensor, Tensor, Tensor)> {
    check_beta("beta1", h.beta1)?;
    theta_hat.ensure_same_shape(prev_error)?;
    let (theta_tilde, m_bar) = sgdm_update(theta_hat, m_im, g, h)?;
    let out = quantize(&theta_tilde, spec, key)?;
    let (a, b) = (1.0 / h.eta, 1.0 / (h.eta * h.beta1));
    let m_next = m_bar
        .zip_map(prev_error, |m, e| m + a * e)?
        .axpy(-b, &out.error)?;
    Ok((out.quantized, m_next, out.error))
}

/// A named parameter tensor with its optimizer state and quantizer.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGroup {
    pub name: String,
    pub id: u64,
    pub spec: QuantSpec,
    /// Parameters seen by the model (quantized unless the grid is the identity).
    pub theta: Tensor,
    pub state: OptimState,
}

impl ParamGroup {
    /// Quantize `theta0` (draw index 0) and set up zeroed optimizer state for `mode`.
    pub fn init(
        name: impl Into<String>,
        id: u64,
        theta0: Tensor,
        spec: QuantSpec,
        optimizer: OptimizerKind,
        mode: ModeKind,
        h: &Hyper,
        seed: u64,
    ) -> Result<Self> {
        spec.validate()?;
        let key = RngKey::new(seed, 0, id, 0);
        let zeros = Tensor::zeros_like(&theta0);
        let (theta, m, regime) = match mode {
            ModeKind::Exact => {
                if optimizer == OptimizerKind::Adam {
                    return Err(EcoError::State(
                        "exact injection is only defined for SGDM".into(),
                    ));
                }
                let (theta_hat, m_im, e0) = exact_injection_init(&theta0, &zeros, h, &spec, key)?;
                (theta_hat, m_im, Regime::ExactInjection { prev_error: e0 })
            }
            ModeKind::Mw => {
                let theta_hat = quantize(&theta0, &spec, key)?.quantized;
                (theta_hat, zeros.clone(), Regime::MasterWeights { master: theta0 })
            }
            ModeKind::Naive | ModeKind::Eco => {
                let theta_hat = quantize(&theta0, &spec, key)?.quantized;
                let regime = if mode == ModeKind::Eco {
                    Regime::Eco
                } else {
                    Regime::Naive
                };
                (theta_hat, zeros.clone(), regime)
            }
        };
        let state = match optimizer {
            OptimizerKind::Sgdm => OptimState::Sgdm(SgdmState { m, regime }),
            OptimizerKind::Adam => OptimState::Adam(AdamState {
                m,
                v: zeros,
                t: 0,
                regime,
            }),
        };
        Ok(Self {
            name: name.into(),
            id,
            spec,
            theta,
            state,
        })
    }

    /// High-precision weights if the regime keeps them, else the quantized ones.
    pub fn master(&self) -> &Tensor {
        match self.state.regime() {
            Regime::MasterWeights { master } => master,
            _ => &self.theta,
        }
    }

    /// Advance this group by one step with an already clipped gradient.
    /// Returns the quantization error produced by the step.
    pub fn step(&mut self, g: &Tensor, h: &Hyper, key: RngKey) -> Result<Tensor> {
        self.theta.ensure_same_shape(g)?;
        let spec = self.spec;
        match &mut self.state {
            OptimState::Sgdm(st) => match &mut st.regime {
                Regime::MasterWeights { master } => {
                    let (next, m) = sgdm_update(master, &st.m, g, h)?;
                    let out = quantize(&next, &spec, key)?;
                    *master = next;
                    st.m = m;
                    self.theta = out.quantized;
                    Ok(out.error)
                }
                Regime::Naive => {
                    let (tilde, m) = sgdm_update(&self.theta, &st.m, g, h)?;
                    let out = quantize(&tilde, &spec, key)?;
                    st.m = m;
                    self.theta = out.quantized;
                    Ok(out.error)
                }
                Regime::Eco => {
                    let (tilde, m) = sgdm_update(&self.theta, &st.m, g, h)?;
                    let q = eco_quantize_sgdm(&tilde, &m, h, &spec, key)?;
                    st.m = q.m_hat;
                    self.theta = q.theta_hat;
                    Ok(q.error)
                }
                Regime::ExactInjection { prev_error } => {
                    let (theta, m, e) =
                        exact_injection_sgdm_step(&self.theta, &st.m, prev_error, g, h, &spec, key)?;
                    self.theta = theta;
                    st.m = m;
                    *prev_error = e.clone();
                    Ok(e)
                }
            },
            OptimState::Adam(st) => match &mut st.regime {
                Regime::MasterWeights { master } => {
                    let up = adam_update(master, &st.m, &st.v, st.t, g, h)?;
                    let out = quantize(&up.theta_tilde, &spec, key)?;
                    *master = up.theta_tilde;
                    st.m = up.m_tilde;
                    st.v = up.v_next;
                    st.t = up.t_next;
                    self.theta = out.quantized;
                    Ok(out.error)
                }
                Regime::Naive => {
                    let up = adam_update(&self.theta, &st.m, &st.v, st.t, g, h)?;
                    let out = quantize(&up.theta_tilde, &spec, key)?;
                    st.m = up.m_tilde;
                    st.v = up.v_next;
                    st.t = up.t_next;
                    self.theta = out.quantized;
                    Ok(out.error)
                }
                Regime::Eco => {
                    let up = adam_update(&self.theta, &st.m, &st.v, st.t, g, h)?;
                    let q = eco_quantize_adam(
                        &up.theta_tilde,
                        &up.m_tilde,
                        &up.v_next,
                        up.t_next,
                        h,
                        &spec,
                        key,
                    )?;
                    st.m = q.m_hat;
                    st.v = up.v_next;
                    st.t = up.t_next;
                    self.theta = q.theta_hat;
                    Ok(q.error)
                }
                Regime::ExactInjection { .. } => Err(EcoError::State(
                    "exact injection is only defined for SGDM".into(),
                )),
            },
        }
    }
}

/// Scale `grads` in place so their joint Euclidean norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let total = grads.iter().map(Tensor::norm_sq).sum::<f64>().sqrt();
    if total > max_norm {
        let k = max_norm / total;
        for g in grads.iter_mut() {
            g.values_mut().iter_mut().for_each(|v| *v *= k);
        }
    }
    total
}

/// One training step over all groups: global-norm clipping, then each
/// group's optimizer step, quantization and (regime-dependent) injection.
///
/// `grads` must be evaluated at the current `theta` of each group. Returns the
/// quantization error of every group.
pub fn train_step(
    groups: &mut [ParamGroup],
    mut grads: Vec<Tensor>,
    h: &Hyper,
    seed: u64,
    step: u64,
) -> Result<Vec<Tensor>> {
    h.validate()?;
    if grads.len() != groups.len() {
        return Err(EcoError::State(format!(
            "{} gradients for {} parameter groups",
            grads.len(),
            groups.len()
        )));
    }
    if let Some(c) = h.clip_norm {
        clip_global_norm(&mut grads, c);
    }
    groups
        .iter_mut()
        .zip(&grads)
        .map(|(group, g)| group.step(g, h, RngKey::new(seed, step + 1, group.id, 0)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quantize::Rounding;
    use proptest::prelude::*;

    fn s(x: f64) -> Tensor {
        Tensor::scalar(x)
    }

    fn unit_grid() -> QuantSpec {
        QuantSpec::fixed_step(1.0, Rounding::Rtn)
    }

    fn k() -> RngKey {
        RngKey::new(1, 1, 0, 0)
    }

    #[test]
    fn sgdm_hand_example() {
        let h = Hyper::sgdm(0.5, 0.5);
        let (theta, m) = sgdm_update(&s(2.0), &s(0.0), &s(1.0), &h).unwrap();
        assert_eq!(m.values(), &[0.5]);
        assert_eq!(theta.values(), &[1.75]);
    }

    #[test]
    fn sgdm_small_beta_is_sgd() {
        let h = Hyper::sgdm(0.1, 1e-12);
        let (theta, m) = sgdm_update(&s(1.0), &s(5.0), &s(2.0), &h).unwrap();
        assert!((m.values()[0] - 2.0).abs() < 1e-10);
        assert!((theta.values()[0] - 0.8).abs() < 1e-10);
    }

    #[test]
    fn sgdm_zero_gradient_fixed_point() {
        let h = Hyper::sgdm(0.3, 0.9);
        let (theta, m) = sgdm_update(&s(4.2), &s(0.0), &s(0.0), &h).unwrap();
        assert_eq!(theta.values(), &[4.2]);
        assert_eq!(m.values(), &[0.0]);
    }

    #[test]
    fn sgdm_shape_mismatch() {
        let h = Hyper::sgdm(0.3, 0.9);
        let r = sgdm_update(&Tensor::zeros(&[2]), &Tensor::zeros(&[3]), &Tensor::zeros(&[2]), &h);
        assert!(matches!(r, Err(EcoError::ShapeMismatch { .. })));
    }

    #[test]
    fn alpha_values() {
        assert_eq!(injection_strength(0.5, 0.5).unwrap(), -2.0);
        assert!((injection_strength(0.1, 0.9).unwrap() + 10.0 / 9.0).abs() < 1e-12);
        assert!(injection_strength(0.1, 0.0).is_err());
        assert!(injection_strength(0.1, 1.0).is_err());
    }

    #[test]
    fn eco_sgdm_hand_example() {
        let h = Hyper::sgdm(0.5, 0.5);
        let q = eco_quantize_sgdm(&s(1.75), &s(0.5), &h, &unit_grid(), k()).unwrap();
        assert_eq!(q.theta_hat.values(), &[2.0]);
        assert_eq!(q.error.values(), &[-0.25]);
        assert_eq!(q.m_hat.values(), &[1.0]);
    }

    #[test]
    fn eco_identity_grid_leaves_momentum() {
        let h = Hyper::sgdm(0.5, 0.5);
        let m = Tensor::from_vec(vec![0.3, -0.2]);
        let th = Tensor::from_vec(vec![1.234, 5.0]);
        let q = eco_quantize_sgdm(&th, &m, &h, &QuantSpec::identity(), k()).unwrap();
        assert_eq!(q.m_hat, m);
        assert_eq!(q.theta_hat, th);
    }

    #[test]
    fn eco_rejects_degenerate_beta() {
        for beta in [0.0, 1.0, -0.1, 1.5] {
            let h = Hyper::sgdm(0.5, beta);
            assert!(eco_quantize_sgdm(&s(1.0), &s(0.0), &h, &unit_grid(), k()).is_err());
        }
    }

    #[test]
    fn adam_null_update() {
        let h = Hyper::adam(0.1, 0.9, 0.999, 1e-8);
        let up = adam_update(&s(3.0), &s(0.0), &s(0.0), 0, &s(0.0), &h).unwrap();
        assert_eq!(up.theta_tilde.values(), &[3.0]);
        assert_eq!(up.t_next, 1);
    }

    #[test]
    fn adam_hand_example_and_injection() {
        let h = Hyper::adam(0.25, 0.5, 0.5, 0.0);
        let up = adam_update(&s(1.0), &s(0.0), &s(0.0), 0, &s(1.0), &h).unwrap();
        assert_eq!(up.m_tilde.values(), &[0.5]);
        assert_eq!(up.v_next.values(), &[0.5]);
        assert_eq!(up.theta_tilde.values(), &[0.75]);
        let q = eco_quantize_adam(
            &up.theta_tilde,
            &up.m_tilde,
            &up.v_next,
            up.t_next,
            &h,
            &unit_grid(),
            k(),
        )
        .unwrap();
        assert_eq!(q.theta_hat.values(), &[1.0]);
        assert_eq!(q.error.values(), &[-0.25]);
        assert_eq!(q.m_hat.values(), &[1.0]);
    }

    #[test]
    fn adam_second_moment_matches_scalar_loop() {
        let h = Hyper::adam(0.01, 0.9, 0.99, 1e-8);
        let grads: Vec<f64> = (0..20).map(|i| ((i as f64) * 0.7).sin() + 0.1).collect();
        let (mut th, mut m, mut v, mut t) = (s(0.5), s(0.0), s(0.0), 0);
        for &g in &grads {
            let up = adam_update(&th, &m, &v, t, &s(g), &h).unwrap();
            th = up.theta_tilde;
            m = up.m_tilde;
            v = up.v_next;
            t = up.t_next;
        }
        let n = grads.len();
        let reference: f64 = grads
            .iter()
            .enumerate()
            .map(|(i, g)| (1.0 - h.beta2) * h.beta2.powi((n - 1 - i) as i32) * g * g)
            .sum();
        assert!((v.values()[0] - reference).abs() < 1e-15);
        assert_eq!(t, 20);
    }

    #[test]
    fn adam_injection_reduces_to_sgdm_with_effective_step() {
        // uniform v, beta2^t ~ 0, eps = 0
        let h = Hyper::adam(0.1, 0.9, 1e-6, 0.0);
        let th = Tensor::from_vec(vec![0.37, -1.12, 2.49]);
        let m = Tensor::from_vec(vec![0.1, 0.2, -0.3]);
        let v = Tensor::from_vec(vec![4.0; 3]);
        let t = 5u64;
        let spec = QuantSpec::fixed_step(0.25, Rounding::Rtn);
        let adam = eco_quantize_adam(&th, &m, &v, t, &h, &spec, k()).unwrap();
        let bc1 = 1.0 - 0.9f64.powi(5);
        let bc2 = 1.0 - 1e-6f64.powi(5);
        let eff = h.eta / (bc1 * (4.0 / bc2).sqrt());
        let sgdm = eco_quantize_sgdm(&th, &m, &Hyper::sgdm(eff, 0.9), &spec, k()).unwrap();
        assert!(adam.m_hat.max_abs_diff(&sgdm.m_hat).unwrap() < 1e-12);
        assert_eq!(adam.theta_hat, sgdm.theta_hat);
    }

    #[test]
    fn exact_init_hand_example() {
        let h = Hyper::sgdm(0.5, 0.5);
        let (th, m, e) = exact_injection_init(&s(1.75), &s(0.0), &h, &unit_grid(), k()).unwrap();
        assert_eq!(th.values(), &[2.0]);
        assert_eq!(e.values(), &[-0.25]);
        assert_eq!(m.values(), &[1.0]);
    }

    #[test]
    fn exact_init_on_grid_and_affine_in_momentum() {
        let h = Hyper::sgdm(0.1, 0.9);
        let (_, m, e) = exact_injection_init(&s(3.0), &s(0.7), &h, &unit_grid(), k()).unwrap();
        assert_eq!(e.values(), &[0.0]);
        assert_eq!(m.values(), &[0.7]);
        let (_, m1, _) = exact_injection_init(&s(3.3), &s(0.2), &h, &unit_grid(), k()).unwrap();
        let (_, m2, _) = exact_injection_init(&s(3.3), &s(1.7), &h, &unit_grid(), k()).unwrap();
        assert!((m2.values()[0] - m1.values()[0] - 1.5).abs() < 1e-12);
    }

    #[test]
    fn exact_step_identity_grid_is_sgdm() {
        let h = Hyper::sgdm(0.2, 0.8);
        let th = Tensor::from_vec(vec![1.0, -2.0]);
        let m = Tensor::from_vec(vec![0.5, 0.1]);
        let g = Tensor::from_vec(vec![0.3, -0.4]);
        let zero = Tensor::zeros(&[2]);
        let (th1, m1, e1) =
            exact_injection_sgdm_step(&th, &m, &zero, &g, &h, &QuantSpec::identity(), k()).unwrap();
        let (th2, m2) = sgdm_update(&th, &m, &g, &h).unwrap();
        assert_eq!(th1, th2);
        assert_eq!(m1, m2);
        assert_eq!(e1, zero);
    }

    #[test]
    fn exact_step_from_on_grid_start_matches_master_weights() {
        let h = Hyper::sgdm(0.3, 0.7);
        let spec = QuantSpec::fixed_step(0.5, Rounding::Rtn);
        let theta0 = Tensor::from_vec(vec![1.0, -0.5, 2.5]);
        let g = Tensor::from_vec(vec![0.4, -1.1, 0.05]);
        let mut mw = ParamGroup::init("w", 0, theta0.clone(), spec, OptimizerKind::Sgdm, ModeKind::Mw, &h, 9).unwrap();
        let mut ex = ParamGroup::init("w", 0, theta0, spec, OptimizerKind::Sgdm, ModeKind::Exact, &h, 9).unwrap();
        assert_eq!(mw.state.momentum(), ex.state.momentum());
        mw.step(&g, &h, RngKey::new(9, 1, 0, 0)).unwrap();
        ex.step(&g, &h, RngKey::new(9, 1, 0, 0)).unwrap();
        assert_eq!(mw.theta, ex.theta);
    }

    #[test]
    fn naive_step_hand_example() {
        // θ̂ = 2, m = 0, g = 1, η = β = 0.5: θ̃ = 1.75 -> q = 2, no injection
        let h = Hyper::sgdm(0.5, 0.5);
        let mut grp = ParamGroup::init("w", 0, s(2.0), unit_grid(), OptimizerKind::Sgdm, ModeKind::Naive, &h, 0).unwrap();
        let e = train_step(std::slice::from_mut(&mut grp), vec![s(1.0)], &h, 0, 0).unwrap();
        assert_eq!(grp.theta.values(), &[2.0]);
        assert_eq!(grp.state.momentum().values(), &[0.5]);
        assert_eq!(e[0].values(), &[-0.25]);
    }

    #[test]
    fn eco_step_hand_example() {
        let h = Hyper::sgdm(0.5, 0.5);
        let mut grp = ParamGroup::init("w", 0, s(2.0), unit_grid(), OptimizerKind::Sgdm, ModeKind::Eco, &h, 0).unwrap();
        train_step(std::slice::from_mut(&mut grp), vec![s(1.0)], &h, 0, 0).unwrap();
        assert_eq!(grp.theta.values(), &[2.0]);
        assert_eq!(grp.state.momentum().values(), &[1.0]);
    }

    #[test]
    fn adam_exact_injection_is_rejected() {
        let h = Hyper::adam(0.1, 0.9, 0.999, 1e-8);
        let r = ParamGroup::init("w", 0, s(1.0), unit_grid(), OptimizerKind::Adam, ModeKind::Exact, &h, 0);
        assert!(matches!(r, Err(EcoError::State(_))));
        let mut bad = ParamGroup::init("w", 0, s(1.0), unit_grid(), OptimizerKind::Adam, ModeKind::Eco, &h, 0).unwrap();
        if let OptimState::Adam(st) = &mut bad.state {
            st.regime = Regime::ExactInjection { prev_error: s(0.0) };
        }
        assert!(matches!(bad.step(&s(1.0), &h, k()), Err(EcoError::State(_))));
    }

    #[test]
    fn clipping_bounds_joint_norm() {
        let mut g = vec![Tensor::from_vec(vec![3.0, 0.0]), Tensor::from_vec(vec![4.0])];
        let before = clip_global_norm(&mut g, 1.0);
        assert_eq!(before, 5.0);
        let after: f64 = g.iter().map(Tensor::norm_sq).sum::<f64>().sqrt();
        assert!((after - 1.0).abs() < 1e-15);
        let mut small = vec![Tensor::from_vec(vec![0.1])];
        clip_global_norm(&mut small, 1.0);
        assert_eq!(small[0].values(), &[0.1]);
    }

    #[test]
    fn gradient_count_must_match_groups() {
        let h = Hyper::sgdm(0.1, 0.9);
        let mut grp = ParamGroup::init("w", 0, s(1.0), unit_grid(), OptimizerKind::Sgdm, ModeKind::Eco, &h, 0).unwrap();
        assert!(train_step(std::slice::from_mut(&mut grp), vec![], &h, 0, 0).is_err());
    }

    #[test]
    fn hyper_validation() {
        assert!(Hyper::sgdm(0.1, 0.9).validate().is_ok());
        assert!(Hyper::sgdm(-0.1, 0.9).validate().is_err());
        assert!(Hyper::sgdm(0.1, 1.0).validate().is_err());
        assert!(Hyper::sgdm(0.1, 0.9).with_clip_norm(0.0).validate().is_err());
        assert!(Hyper::sgdm(0.1, 0.9).with_weight_decay(-1.0).validate().is_err());
    }

    fn quad_grad(theta: &Tensor, diag: &[f64]) -> Tensor {
        Tensor::from_vec(theta.values().iter().zip(diag).map(|(t, d)| t * d).collect())
    }

    proptest! {
        #[test]
        fn eco_equals_plain_optimizer_on_identity_grid(
            x0 in prop::collection::vec(-3.0f64..3.0, 4),
            diag in prop::collection::vec(0.1f64..2.0, 4),
            adam in any::<bool>(),
        ) {
            let (opt, h) = if adam {
                (OptimizerKind::Adam, Hyper::adam(0.05, 0.9, 0.99, 1e-8))
            } else {
                (OptimizerKind::Sgdm, Hyper::sgdm(0.1, 0.9))
            };
            let theta0 = Tensor::from_vec(x0);
            let mut eco = ParamGroup::init("w", 0, theta0.clone(), QuantSpec::identity(), opt, ModeKind::Eco, &h, 3).unwrap();
            let mut plain = ParamGroup::init("w", 0, theta0, QuantSpec::identity(), opt, ModeKind::Mw, &h, 3).unwrap();
            for t in 0..50 {
                let g1 = quad_grad(&eco.theta, &diag);
                let g2 = quad_grad(&plain.theta, &diag);
                train_step(std::slice::from_mut(&mut eco), vec![g1], &h, 3, t).unwrap();
                train_step(std::slice::from_mut(&mut plain), vec![g2], &h, 3, t).unwrap();
                prop_assert_eq!(&eco.theta, &plain.theta);
                prop_assert_eq!(eco.state.momentum(), plain.state.momentum());
            }
        }

        #[test]
        fn closed_loop_identity_holds_every_step(
            x0 in prop::collection::vec(-3.0f64..3.0, 5),
            diag in prop::collection::vec(0.1f64..2.0, 5),
            sr in any::<bool>(),
        ) {
            let h = Hyper::sgdm(0.05, 0.9);
            let rounding = if sr { Rounding::Sr } else { Rounding::Rtn };
            let spec = QuantSpec::fixed_step(0.05, rounding);
            let mut grp = ParamGroup::init("w", 0, Tensor::from_vec(x0), spec, OptimizerKind::Sgdm, ModeKind::Eco, &h, 1).unwrap();
            for t in 0..100 {
                let prev = grp.theta.clone();
                let g = quad_grad(&grp.theta, &diag);
                let e = train_step(std::slice::from_mut(&mut grp), vec![g], &h, 1, t).unwrap().remove(0);
                // θ̂' = θ̂ - η m̂' - e'/β
                let rhs = prev
                    .axpy(-h.eta, grp.state.momentum()).unwrap()
                    .axpy(-1.0 / h.beta1, &e).unwrap();
                prop_assert!(grp.theta.max_abs_diff(&rhs).unwrap() <= 1e-12);
            }
        }
    }
}
