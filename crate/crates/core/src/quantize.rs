//! Weight quantizers.
//!
//! A [`QuantSpec`] fixes the grid, the rounding rule and which elements share a
//! scale. [`quantize`] returns the reconstructed (dequantized) values together
//! with the error `x - q(x)`; the optimizers only ever need those two.
//!
//! Grids with a dynamic scale use `s = max|x - z| / rho` per group, recomputed
//! on every call. An all-zero group gets the sentinel scale 0 and quantizes to
//! zeros. Round-to-nearest breaks ties to even.

use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::error::{domain, Result};
use crate::numerics::{keyed_uniform, RngKey, Tensor};

/// Largest finite FP8 E4M3 magnitude.
pub const FP8_E4M3_MAX: f64 = 448.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum QuantGrid {
    /// Symmetric uniform grid whose largest level is `rho` (in units of the scale).
    UniformMax { rho: f64 },
    /// Fixed absolute spacing: the grid is `delta * Z`.
    FixedStep { delta: f64 },
    /// FP8 E4M3 magnitudes, scaled so the group maximum maps to 448.
    #[serde(rename = "fp8_e4m3")]
    Fp8E4M3,
    /// Integer levels `-(2^(bits-1) - 1) ..= 2^(bits-1) - 1`.
    IntSymmetric { bits: u32 },
    /// Additive uniform dither on `[-delta/2, delta/2]`, variance `delta^2 / 12`.
    NoiseModel { delta: f64 },
    Identity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rounding {
    Rtn,
    Sr,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    TensorWise,
    RowWise,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuantSpec {
    pub grid: QuantGrid,
    pub rounding: Rounding,
    #[serde(default = "tensor_wise")]
    pub granularity: Granularity,
    #[serde(default)]
    pub zero_point: f64,
}

fn tensor_wise() -> Granularity {
    Granularity::TensorWise
}

impl QuantSpec {
    pub fn new(grid: QuantGrid, rounding: Rounding) -> Self {
        Self {
            grid,
            rounding,
            granularity: Granularity::TensorWise,
            zero_point: 0.0,
        }
    }

    pub fn identity() -> Self {
        Self::new(QuantGrid::Identity, Rounding::Rtn)
    }

    pub fn fixed_step(delta: f64, rounding: Rounding) -> Self {
        Self::new(QuantGrid::FixedStep { delta }, rounding)
    }

    pub fn noise_model(delta: f64) -> Self {
        Self::new(QuantGrid::NoiseModel { delta }, Rounding::Sr)
    }

    pub fn row_wise(mut self) -> Self {
        self.granularity = Granularity::RowWise;
        self
    }

    pub fn is_identity(&self) -> bool {
        matches!(self.grid, QuantGrid::Identity)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(domain(format!("{name} must be a positive finite number, got {v}")))
            }
        };
        match self.grid {
            QuantGrid::UniformMax { rho } => positive("rho", rho)?,
            QuantGrid::FixedStep { delta } | QuantGrid::NoiseModel { delta } => {
                positive("delta", delta)?
            }
            QuantGrid::IntSymmetric { bits } => {
                if !(2..=32).contains(&bits) {
                    return Err(domain(format!("bits must lie in 2..=32, got {bits}")));
                }
            }
            QuantGrid::Fp8E4M3 | QuantGrid::Identity => {}
        }
        if !self.zero_point.is_finite() {
            return Err(domain("zero_point must be finite"));
        }
        Ok(())
    }
}

/// Result of one quantization call.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantOutcome {
    pub quantized: Tensor,
    /// `input - quantized`
    pub error: Tensor,
    /// One entry per granularity group.
    pub scale: Tensor,
}

/// Row ranges sharing a scale.
fn groups(x: &Tensor, granularity: Granularity) -> Vec<std::ops::Range<usize>> {
    match granularity {
        Granularity::TensorWise => vec![0..x.len()],
        Granularity::RowWise => {
            let (rows, width) = x.rows();
            (0..rows).map(|r| r * width..(r + 1) * width).collect()
        }
    }
}

/// Per-group symmetric scale `max|x| / rho`; all-zero groups get 0.
pub fn compute_scale(x: &Tensor, rho: f64, granularity: Granularity) -> Result<Tensor> {
    if !(rho.is_finite() && rho > 0.0) {
        return Err(domain(format!("rho must be positive, got {rho}")));
    }
    x.ensure_finite()?;
    let scales = groups(x, granularity)
        .into_iter()
        .map(|g| x.values()[g].iter().fold(0.0f64, |m, v| m.max(v.abs())) / rho)
        .collect();
    Ok(Tensor::from_vec(scales))
}

/// Stochastic rounding of `y` to an adjacent integer: up with probability `frac(y)`.
#[inline]
pub fn round_sr(y: f64, u: f64) -> f64 {
    let lo = y.floor();
    if u < y - lo {
        lo + 1.0
    } else {
        lo
    }
}

#[inline]
pub fn round_rtn(y: f64) -> f64 {
    y.round_ties_even()
}

#[inline]
fn round_with(rounding: Rounding, y: f64, key: RngKey) -> f64 {
    match rounding {
        Rounding::Rtn => round_rtn(y),
        Rounding::Sr => round_sr(y, keyed_uniform(key)),
    }
}

/// Sorted non-negative finite E4M3 magnitudes, including zero and subnormals.
pub fn fp8_e4m3_magnitudes() -> &'static [f64] {
    static TABLE: OnceLock<Vec<f64>> = OnceLock::new();
    TABLE.get_or_init(|| {
        // codes 0x00..=0x7e of the positive half, in increasing order; 0x7f is NaN
        (0u32..0x7f)
            .map(|code| {
                let exp = (code >> 3) as i32;
                let man = (code & 7) as f64;
                if exp == 0 {
                    man / 8.0 * 2f64.powi(-6)
                } else {
                    (1.0 + man / 8.0) * 2f64.powi(exp - 7)
                }
            })
            .collect()
    })
}

/// Adjacent table entries bracketing `a >= 0` (clamped to the top of the table).
fn fp8_bracket(a: f64) -> (usize, usize) {
    let table = fp8_e4m3_magnitudes();
    let hi = table.partition_point(|&t| t < a).min(table.len() - 1);
    if table[hi] == a || hi == 0 {
        (hi, hi)
    } else {
        (hi - 1, hi)
    }
}

fn fp8_round(y: f64, rounding: Rounding, u: impl FnOnce() -> f64) -> f64 {
    let table = fp8_e4m3_magnitudes();
    let a = y.abs().min(FP8_E4M3_MAX);
    let (lo, hi) = fp8_bracket(a);
    let mag = if lo == hi {
        table[lo]
    } else {
        let (l, h) = (table[lo], table[hi]);
        match rounding {
            Rounding::Rtn => {
                let (dl, dh) = (a - l, h - a);
                if dl < dh || (dl == dh && lo % 2 == 0) {
                    l
                } else {
                    h
                }
            }
            Rounding::Sr => {
                if u() < (a - l) / (h - l) {
                    h
                } else {
                    l
                }
            }
        }
    };
    mag.copysign(y)
}

/// Nearest E4M3 value with ties to even; saturates at +/-448.
pub fn fp8_nearest(x: f64) -> Result<f64> {
    if x.is_nan() {
        return Err(domain("cannot quantize NaN to FP8"));
    }
    Ok(fp8_round(x, Rounding::Rtn, || 0.0))
}

/// Quantize `x` under `spec`. Stochastic draws use `key_base` with the flat
/// element index substituted.
pub fn quantize(x: &Tensor, spec: &QuantSpec, key_base: RngKey) -> Result<QuantOutcome> {
    spec.validate()?;
    x.ensure_finite()?;
    let z = spec.zero_point;
    let xs = x.values();
    let mut q = vec![0.0; xs.len()];
    let key = |i: usize| key_base.with_index(i as u64);

    let scales: Vec<f64> = match spec.grid {
        QuantGrid::Identity => {
            q.copy_from_slice(xs);
            vec![1.0; groups(x, spec.granularity).len()]
        }
        QuantGrid::NoiseModel { delta } => {
            for (i, (qi, &xi)) in q.iter_mut().zip(xs).enumerate() {
                *qi = xi + noise_sample(delta, key(i));
            }
            vec![delta; groups(x, spec.granularity).len()]
        }
        QuantGrid::FixedStep { delta } => {
            for (i, (qi, &xi)) in q.iter_mut().zip(xs).enumerate() {
                *qi = delta * round_with(spec.rounding, (xi - z) / delta, key(i)) + z;
            }
            vec![delta; groups(x, spec.granularity).len()]
        }
        QuantGrid::UniformMax { .. } | QuantGrid::IntSymmetric { .. } | QuantGrid::Fp8E4M3 => {
            let rho = match spec.grid {
                QuantGrid::UniformMax { rho } => rho,
                QuantGrid::IntSymmetric { bits } => ((1u64 << (bits - 1)) - 1) as f64,
                _ => FP8_E4M3_MAX,
            };
            let mut scales = Vec::new();
            for g in groups(x, spec.granularity) {
                let s = xs[g.clone()]
                    .iter()
                    .fold(0.0f64, |m, v| m.max((v - z).abs()))
                    / rho;
                scales.push(s);
                for i in g {
                    q[i] = if s == 0.0 {
                        z
                    } else {
                        let y = (xs[i] - z) / s;
                        let level = match spec.grid {
                            QuantGrid::Fp8E4M3 => {
                                fp8_round(y, spec.rounding, || keyed_uniform(key(i)))
                            }
                            _ => round_with(spec.rounding, y, key(i)).clamp(-rho, rho),
                        };
                        s * level + z
                    };
                }
            }
            scales
        }
    };

    let error: Vec<f64> = xs.iter().zip(&q).map(|(a, b)| a - b).collect();
    Ok(QuantOutcome {
        quantized: Tensor::new(q, x.shape().to_vec())?,
        error: Tensor::new(error, x.shape().to_vec())?,
        scale: Tensor::from_vec(scales),
    })
}

/// Zero-mean uniform dither on `[-delta/2, delta/2)`.
#[inline]
pub fn noise_sample(delta: f64, key: RngKey) -> f64 {
    (keyed_uniform(key) - 0.5) * delta
}
