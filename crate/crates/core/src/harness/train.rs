use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::objective::{Objective, ObjectiveSpec};
use crate::error::{domain, EcoError, Result};
use crate::numerics::{cosine_similarity, keyed_u64, relative_norm, RngKey, Tensor};
use crate::optim::{train_step, Hyper, ModeKind, OptimizerKind, ParamGroup};
use crate::quantize::QuantSpec;

/// Loss above which a run is classified as diverged.
pub const DIVERGENCE_LOSS: f64 = 1e12;

/// Learning-rate schedule. `Constant` uses `hyper.eta` throughout.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Linear warmup from `floor` to `peak` over `warmup_frac` of the run,
    /// then cosine decay back to `floor`.
    Cosine {
        peak: f64,
        floor: f64,
        #[serde(default)]
        warmup_frac: f64,
    },
}

impl LrSchedule {
    pub fn validate(&self) -> Result<()> {
        if let LrSchedule::Cosine {
            peak,
            floor,
            warmup_frac,
        } = *self
        {
            if !(floor.is_finite() && floor > 0.0) {
                return Err(domain(format!("floor must be > 0, got {floor}")));
            }
            if !(peak.is_finite() && peak >= floor) {
                return Err(domain(format!("peak must be >= floor, got {peak}")));
            }
            if !(0.0..=1.0).contains(&warmup_frac) {
                return Err(domain(format!(
                    "warmup_frac must lie in [0, 1], got {warmup_frac}"
                )));
            }
        }
        Ok(())
    }

    /// Learning rate for step `t` of a `steps`-step run.
    pub fn lr(&self, base: f64, t: u64, steps: u64) -> f64 {
        match *self {
            LrSchedule::Constant => base,
            LrSchedule::Cosine {
                peak,
                floor,
                warmup_frac,
            } => {
                let warm = (warmup_frac * steps as f64).round() as u64;
                if t < warm {
                    return floor + (peak - floor) * (t + 1) as f64 / warm as f64;
                }
                let span = steps.saturating_sub(warm + 1).max(1);
                let p = ((t - warm) as f64 / span as f64).min(1.0);
                floor + 0.5 * (peak - floor) * (1.0 + (std::f64::consts::PI * p).cos())
            }
        }
    }
}

fn default_every() -> u64 {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub objective: ObjectiveSpec,
    pub optimizer: OptimizerKind,
    pub mode: ModeKind,
    pub hyper: Hyper,
    /// Quantizer for every body group.
    pub quant: QuantSpec,
    /// Per-group overrides by group name.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub group_quant: BTreeMap<String, QuantSpec>,
    /// Also quantize input/output layers with `quant`.
    #[serde(default)]
    pub quantize_io: bool,
    pub steps: u64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub lr_schedule: LrSchedule,
    #[serde(default = "default_every")]
    pub metrics_every: u64,
    /// Minibatch size for dataset objectives; full batch when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.objective.validate()?;
        self.hyper.validate()?;
        self.quant.validate()?;
        for spec in self.group_quant.values() {
            spec.validate()?;
        }
        self.lr_schedule.validate()?;
        if self.metrics_every == 0 {
            return Err(domain("metrics_every must be >= 1"));
        }
        if let Some(b) = self.batch_size {
            let n = match self.objective {
                ObjectiveSpec::LinearRegression { samples, .. } | ObjectiveSpec::Mlp2 { samples, .. } => samples,
                _ => return Err(domain("batch_size requires a dataset objective")),
            };
            if b == 0 || b > n {
                return Err(domain(format!("batch_size must lie in 1..={n}, got {b}")));
            }
        }
        if self.mode == ModeKind::Exact {
            if self.optimizer != OptimizerKind::Sgdm {
                return Err(domain("mode exact requires optimizer sgdm"));
            }
            if self.hyper.weight_decay != 0.0 {
                return Err(domain("mode exact requires weight_decay = 0"));
            }
            if self.lr_schedule != LrSchedule::Constant {
                return Err(domain("mode exact requires a constant lr_schedule"));
            }
        }
        Ok(())
    }
}

/// One row of the run log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub step: u64,
    pub lr: f64,
    /// `f(θ̂_t)` before the step.
    pub loss: f64,
    /// `‖∇f(θ̂_t)‖²` before clipping.
    pub grad_norm_sq: f64,
    /// `‖m̂_{t+1}‖²` summed over groups.
    pub m_norm_sq: f64,
    pub err_cos: Option<f64>,
    pub err_relnorm: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub rows: Vec<MetricRow>,
    pub diverged: bool,
    /// Model parameters (quantized where a grid applies) at the end of the run.
    pub final_params: Vec<Tensor>,
    pub final_loss: f64,
}

/// `(‖e_next‖ / ‖e_prev‖, cos(e_prev, e_next))`.
pub fn consecutive_error_metrics(e_prev: &Tensor, e_next: &Tensor) -> Result<(f64, f64)> {
    let rel = relative_norm(e_next, e_prev)?;
    let cos = cosine_similarity(e_prev, e_next)?;
    Ok((rel, cos))
}

fn build_groups(cfg: &TrainConfig, obj: &Objective, init: Vec<Tensor>) -> Result<Vec<ParamGroup>> {
    let infos = obj.groups();
    for name in cfg.group_quant.keys() {
        if !infos.iter().any(|g| &g.name == name) {
            return Err(domain(format!("group_quant names unknown group {name:?}")));
        }
    }
    infos
        .iter()
        .zip(init)
        .enumerate()
        .map(|(id, (info, theta0))| {
            let spec = match cfg.group_quant.get(&info.name) {
                Some(s) => *s,
                None if info.is_io && !cfg.quantize_io => QuantSpec::identity(),
                None => cfg.quant,
            };
            ParamGroup::init(
                info.name.clone(),
                id as u64,
                theta0,
                spec,
                cfg.optimizer,
                cfg.mode,
                &cfg.hyper.with_eta(cfg.lr_schedule.lr(cfg.hyper.eta, 0, cfg.steps)),
                cfg.seed,
            )
        })
        .collect()
}

/// Largest quantized group; its errors feed the similarity metrics.
fn error_stream(groups: &[ParamGroup]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, g) in groups.iter().enumerate() {
        if g.spec.is_identity() {
            continue;
        }
        if best.is_none_or(|b| g.theta.len() > groups[b].theta.len()) {
            best = Some(i);
        }
    }
    best
}

fn params(groups: &[ParamGroup]) -> Vec<Tensor> {
    groups.iter().map(|g| g.theta.clone()).collect()
}

/// Tensor id reserved for minibatch draws.
const BATCH_STREAM: u64 = u64::MAX;

/// Indices of the minibatch used at step `t`, sorted.
fn minibatch(seed: u64, t: u64, n: usize, b: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(keyed_u64(RngKey::new(seed, t + 1, BATCH_STREAM, 0)));
    let mut idx = sample(&mut rng, n, b).into_vec();
    idx.sort_unstable();
    idx
}

fn bad_loss(f: f64) -> bool {
    !f.is_finite() || f > DIVERGENCE_LOSS
}

/// Run `cfg.steps` training steps. Gradients are always taken at the model
/// parameters θ̂, which for master-weight runs is the quantized master copy.
pub fn run_training(cfg: &TrainConfig) -> Result<RunRecord> {
    cfg.validate()?;
    let (obj, init) = cfg.objective.build(cfg.seed)?;
    let mut groups = build_groups(cfg, &obj, init)?;
    let stream = error_stream(&groups);
    let mut rows = Vec::new();
    let mut prev_error: Option<Tensor> = None;
    let mut diverged = false;
    let mut last_loss = f64::NAN;

    for t in 0..cfg.steps {
        let lr = cfg.lr_schedule.lr(cfg.hyper.eta, t, cfg.steps);
        let h = cfg.hyper.with_eta(lr);
        let current = params(&groups);
        let record = (t + 1) % cfg.metrics_every == 0 || t + 1 == cfg.steps;
        // minibatch runs evaluate the full objective only on logged steps
        let (loss, grad_norm_sq, grads) = match (cfg.batch_size, obj.samples()) {
            (Some(b), Some(n)) if b < n => {
                let (batch_loss, grads) =
                    obj.eval_subset(&current, Some(&minibatch(cfg.seed, t, n, b)))?;
                if record {
                    let (f, full) = obj.eval(&current)?;
                    (f, full.iter().map(Tensor::norm_sq).sum(), grads)
                } else {
                    (batch_loss, f64::NAN, grads)
                }
            }
            _ => {
                let (f, full) = obj.eval(&current)?;
                (f, full.iter().map(Tensor::norm_sq).sum(), full)
            }
        };
        last_loss = loss;
        if bad_loss(loss) {
            diverged = true;
            break;
        }
        let errors = match train_step(&mut groups, grads, &h, cfg.seed, t) {
            Ok(e) => e,
            Err(EcoError::NonFinite { .. }) => {
                diverged = true;
                break;
            }
            Err(e) => return Err(e),
        };
        let (mut err_cos, mut err_relnorm) = (None, None);
        if let Some(i) = stream {
            if let Some(prev) = &prev_error {
                err_relnorm = relative_norm(&errors[i], prev).ok();
                err_cos = cosine_similarity(prev, &errors[i]).ok();
            }
            prev_error = Some(errors[i].clone());
        }
        if record {
            rows.push(MetricRow {
                step: t,
                lr,
                loss,
                grad_norm_sq,
                m_norm_sq: groups.iter().map(|g| g.state.momentum().norm_sq()).sum(),
                err_cos,
                err_relnorm,
            });
        }
    }

    let final_params = params(&groups);
    let final_loss = if diverged {
        last_loss
    } else {
        let f = obj.eval(&final_params)?.0;
        diverged = bad_loss(f);
        f
    };
    Ok(RunRecord {
        rows,
        diverged,
        final_params,
        final_loss,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quantize::Rounding;
    use crate::theory::{monte_carlo_1d, MonteCarlo1d, Regime1d};

    fn quad1d(mode: ModeKind, quant: QuantSpec, steps: u64) -> TrainConfig {
        TrainConfig {
            objective: ObjectiveSpec::Quadratic1d { l: 1.0, x0: 1.0 },
            optimizer: OptimizerKind::Sgdm,
            mode,
            hyper: Hyper::sgdm(0.1, 0.5),
            quant,
            group_quant: BTreeMap::new(),
            quantize_io: false,
            steps,
            seed: 11,
            lr_schedule: LrSchedule::Constant,
            metrics_every: 1,
            batch_size: None,
        }
    }

    /// `x_t` from the eigen-decomposition of the 2x2 SGDM transition matrix.
    fn closed_form_trajectory(l: f64, eta: f64, beta: f64, x0: f64, steps: usize) -> Vec<f64> {
        let c = (1.0 - beta) * l;
        let (a, b, d) = (1.0 - eta * c, -eta * beta, beta);
        let tr = a + d;
        let det = a * d - b * c;
        let disc = (tr * tr - 4.0 * det).sqrt();
        let (l1, l2) = ((tr + disc) / 2.0, (tr - disc) / 2.0);
        // x_t = [λ1^t (A - λ2 I) - λ2^t (A - λ1 I)] / (λ1 - λ2) applied to (x0, 0)
        (0..=steps)
            .map(|t| {
                let (p1, p2) = (l1.powi(t as i32), l2.powi(t as i32));
                (p1 * (a - l2) - p2 * (a - l1)) * x0 / (l1 - l2)
            })
            .collect()
    }

    #[test]
    fn identity_grid_matches_closed_form_sgdm() {
        let rec = run_training(&quad1d(ModeKind::Mw, QuantSpec::identity(), 100)).unwrap();
        let oracle = closed_form_trajectory(1.0, 0.1, 0.5, 1.0, 100);
        let mut worst = 0.0f64;
        for row in &rec.rows {
            let x = (2.0 * row.loss).sqrt();
            worst = worst.max((x - oracle[row.step as usize].abs()).abs());
        }
        worst = worst.max((rec.final_params[0].values()[0] - oracle[100]).abs());
        assert!(worst <= 1e-12, "max deviation {worst}");
    }

    #[test]
    fn eco_noise_model_reproduces_monte_carlo() {
        let delta = 0.346;
        let steps = 5000;
        let rec = run_training(&quad1d(ModeKind::Eco, QuantSpec::noise_model(delta), steps)).unwrap();
        let burn = steps / 5;
        let xs: Vec<f64> = rec.rows.iter().map(|r| 2.0 * r.loss).collect();
        let from_training = xs[burn as usize..].iter().sum::<f64>() / (steps - burn) as f64;
        let mc = MonteCarlo1d::new(Regime1d::Eco, 1.0, 0.1, 0.5, delta, steps, 11);
        let from_mc = monte_carlo_1d(&mc).unwrap();
        assert!(
            (from_training - from_mc).abs() <= 1e-12 * from_mc,
            "{from_training} vs {from_mc}"
        );
    }

    #[test]
    fn zero_steps_leave_parameters_untouched() {
        let cfg = quad1d(ModeKind::Mw, QuantSpec::identity(), 0);
        let rec = run_training(&cfg).unwrap();
        assert!(rec.rows.is_empty());
        assert!(!rec.diverged);
        assert_eq!(rec.final_params[0].values(), &[1.0]);
    }

    #[test]
    fn row_count_follows_metrics_every() {
        let mut cfg = quad1d(ModeKind::Eco, QuantSpec::fixed_step(0.01, Rounding::Sr), 103);
        cfg.metrics_every = 10;
        let rec = run_training(&cfg).unwrap();
        assert_eq!(rec.rows.len(), 11);
        assert_eq!(rec.rows.last().unwrap().step, 102);
    }

    #[test]
    fn runs_are_deterministic() {
        let cfg = TrainConfig {
            objective: ObjectiveSpec::Mlp2 {
                inputs: 4,
                hidden: 8,
                outputs: 2,
                samples: 32,
                noise: 0.01,
            },
            optimizer: OptimizerKind::Adam,
            mode: ModeKind::Eco,
            hyper: Hyper::adam(0.01, 0.9, 0.999, 1e-8),
            quant: QuantSpec::fixed_step(0.01, Rounding::Sr),
            group_quant: BTreeMap::new(),
            quantize_io: true,
            steps: 50,
            seed: 3,
            lr_schedule: LrSchedule::Cosine {
                peak: 0.01,
                floor: 1e-4,
                warmup_frac: 0.1,
            },
            metrics_every: 1,
            batch_size: None,
        };
        assert_eq!(run_training(&cfg).unwrap(), run_training(&cfg).unwrap());
    }

    #[test]
    fn divergence_is_flagged() {
        let mut cfg = quad1d(ModeKind::Mw, QuantSpec::identity(), 500);
        cfg.objective = ObjectiveSpec::Quadratic1d { l: 100.0, x0: 1.0 };
        cfg.hyper = Hyper::sgdm(1.0, 0.5);
        let rec = run_training(&cfg).unwrap();
        assert!(rec.diverged);
        assert!(rec.rows.len() < 500);
    }

    #[test]
    fn exact_mode_constraints() {
        let mut cfg = quad1d(ModeKind::Exact, QuantSpec::identity(), 1);
        cfg.optimizer = OptimizerKind::Adam;
        assert!(cfg.validate().is_err());
        cfg.optimizer = OptimizerKind::Sgdm;
        cfg.lr_schedule = LrSchedule::Cosine {
            peak: 0.1,
            floor: 0.01,
            warmup_frac: 0.0,
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn io_layers_stay_unquantized_by_default() {
        let cfg = TrainConfig {
            objective: ObjectiveSpec::Mlp2 {
                inputs: 2,
                hidden: 3,
                outputs: 1,
                samples: 4,
                noise: 0.0,
            },
            optimizer: OptimizerKind::Sgdm,
            mode: ModeKind::Eco,
            hyper: Hyper::sgdm(0.1, 0.9),
            quant: QuantSpec::fixed_step(0.5, Rounding::Rtn),
            group_quant: BTreeMap::new(),
            quantize_io: false,
            steps: 3,
            seed: 0,
            lr_schedule: LrSchedule::Constant,
            metrics_every: 1,
            batch_size: None,
        };
        let rec = run_training(&cfg).unwrap();
        let on_grid = |t: &Tensor| t.values().iter().all(|v| (v / 0.5).fract() == 0.0);
        assert!(on_grid(&rec.final_params[0]));
        assert!(!on_grid(&rec.final_params[2]));
    }

    #[test]
    fn error_metric_examples() {
        let e = Tensor::from_vec(vec![0.3, -0.1, 0.2]);
        assert_eq!(consecutive_error_metrics(&e, &e).unwrap(), (1.0, 1.0));
        let (rel, cos) = consecutive_error_metrics(&e, &e.scale(-1.0)).unwrap();
        assert_eq!(rel, 1.0);
        assert!((cos + 1.0).abs() < 1e-15);
        assert!(consecutive_error_metrics(&Tensor::zeros(&[3]), &e).is_err());
    }

    #[test]
    fn cosine_schedule_shape() {
        let s = LrSchedule::Cosine {
            peak: 1.0,
            floor: 0.1,
            warmup_frac: 0.1,
        };
        assert!((s.lr(1.0, 0, 100) - 0.19).abs() < 1e-12);
        assert_eq!(s.lr(1.0, 9, 100), 1.0);
        assert_eq!(s.lr(1.0, 10, 100), 1.0);
        assert!((s.lr(1.0, 99, 100) - 0.1).abs() < 1e-12);
        let lrs: Vec<f64> = (10..100).map(|t| s.lr(1.0, t, 100)).collect();
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn error_similarity_rises_as_lr_decays() {
        let cfg = TrainConfig {
            // still far from the minimum when the run ends, as in long runs
            objective: ObjectiveSpec::RandomQuadratic {
                dim: 256,
                l_min: 1e-3,
                l_max: 1e-2,
                center_scale: 1.0,
                init_scale: 1.0,
            },
            optimizer: OptimizerKind::Sgdm,
            mode: ModeKind::Mw,
            hyper: Hyper::sgdm(0.1, 0.9),
            quant: QuantSpec::fixed_step(1e-3, Rounding::Rtn),
            group_quant: BTreeMap::new(),
            quantize_io: false,
            steps: 3000,
            seed: 5,
            lr_schedule: LrSchedule::Cosine {
                peak: 0.1,
                floor: 1e-4,
                warmup_frac: 0.0,
            },
            metrics_every: 1,
            batch_size: None,
        };
        let rec = run_training(&cfg).unwrap();
        let third = rec.rows.len() / 3;
        let mean_cos = |rows: &[MetricRow]| {
            let v: Vec<f64> = rows.iter().filter_map(|r| r.err_cos).collect();
            v.iter().sum::<f64>() / v.len() as f64
        };
        let early = mean_cos(&rec.rows[..third]);
        let middle = mean_cos(&rec.rows[third..2 * third]);
        let late = mean_cos(&rec.rows[2 * third..]);
        assert!(early < middle && middle < late, "{early} {middle} {late}");
    }
}
