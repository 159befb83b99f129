//! Dense tensors, keyed randomness and vector statistics.
//!
//! Everything here is `f64`. Randomness is a pure function of an [`RngKey`]:
//! there is no generator state to thread through a run, so two procedures that
//! quantize the same element at the same step see the same draw.

use serde::{Deserialize, Serialize};

use crate::error::{domain, EcoError, Result};

/// Flat row-major array of `f64` with a shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    values: Vec<f64>,
    shape: Vec<usize>,
}

impl Tensor {
    pub fn new(values: Vec<f64>, shape: Vec<usize>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if shape.contains(&0) || expected != values.len() {
            return Err(EcoError::InvalidShape {
                shape,
                len: values.len(),
            });
        }
        Ok(Self { values, shape })
    }

    /// One-dimensional tensor over `values`.
    pub fn from_vec(values: Vec<f64>) -> Self {
        let n = values.len();
        Self {
            values,
            shape: vec![n],
        }
    }

    pub fn scalar(x: f64) -> Self {
        Self::from_vec(vec![x])
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            values: vec![0.0; n],
            shape: shape.to_vec(),
        }
    }

    pub fn zeros_like(other: &Tensor) -> Self {
        Self::zeros(&other.shape)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Number of rows and the length of each row. A 1-D tensor is a single row.
    pub fn rows(&self) -> (usize, usize) {
        match self.shape.len() {
            0 => (1, self.values.len()),
            1 => (1, self.shape[0]),
            _ => {
                let r = self.shape[0];
                (r, if r == 0 { 0 } else { self.values.len() / r })
            }
        }
    }

    pub fn ensure_same_shape(&self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(EcoError::ShapeMismatch {
                expected: self.shape.clone(),
                actual: other.shape.clone(),
            });
        }
        Ok(())
    }

    /// Fails on the first NaN or infinity.
    pub fn ensure_finite(&self) -> Result<()> {
        match self.values.iter().position(|v| !v.is_finite()) {
            Some(index) => Err(EcoError::NonFinite { index }),
            None => Ok(()),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            values: self.values.iter().map(|&v| f(v)).collect(),
            shape: self.shape.clone(),
        }
    }

    /// Element-wise combination of two tensors of identical shape.
    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.ensure_same_shape(other)?;
        Ok(Tensor {
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(&a, &b)| f(a, b))
                .collect(),
            shape: self.shape.clone(),
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn scale(&self, k: f64) -> Tensor {
        self.map(|v| k * v)
    }

    /// `self + k * other`
    pub fn axpy(&self, k: f64, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a + k * b)
    }

    pub fn dot(&self, other: &Tensor) -> Result<f64> {
        self.ensure_same_shape(other)?;
        Ok(dot(&self.values, &other.values))
    }

    pub fn norm_sq(&self) -> f64 {
        dot(&self.values, &self.values)
    }

    pub fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Largest element-wise absolute difference.
    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        self.ensure_same_shape(other)?;
        Ok(self
            .values
            .iter()
            .zip(&other.values)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs())))
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Address of a single random draw: (seed, step, tensor, element).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct RngKey {
    pub seed: u64,
    pub step: u64,
    pub tensor_id: u64,
    pub index: u64,
}

impl RngKey {
    pub fn new(seed: u64, step: u64, tensor_id: u64, index: u64) -> Self {
        Self {
            seed,
            step,
            tensor_id,
            index,
        }
    }

    pub fn with_index(self, index: u64) -> Self {
        Self { index, ..self }
    }

    pub fn with_step(self, step: u64) -> Self {
        Self { step, ..self }
    }

    pub fn with_tensor(self, tensor_id: u64) -> Self {
        Self { tensor_id, ..self }
    }
}

// splitmix64 finalizer
#[inline]
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

/// 64-bit hash of a key; every field passes through a full avalanche round.
#[inline]
pub fn keyed_u64(key: RngKey) -> u64 {
    let mut h = mix64(key.seed.wrapping_add(GOLDEN));
    h = mix64(h ^ key.step.wrapping_add(GOLDEN.wrapping_mul(2)));
    h = mix64(h ^ key.tensor_id.wrapping_add(GOLDEN.wrapping_mul(3)));
    mix64(h ^ key.index.wrapping_add(GOLDEN.wrapping_mul(4)))
}

/// Uniform draw on `[0, 1)` with 53 bits of resolution, fully determined by `key`.
#[inline]
pub fn keyed_uniform(key: RngKey) -> f64 {
    (keyed_u64(key) >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// `<a, b> / (|a| |b|)`.
pub fn cosine_similarity(a: &Tensor, b: &Tensor) -> Result<f64> {
    a.ensure_same_shape(b)?;
    let (na, nb) = (a.norm(), b.norm());
    if na == 0.0 || nb == 0.0 {
        return Err(domain("cosine similarity of a zero-norm tensor"));
    }
    let c = dot(a.values(), b.values()) / (na * nb);
    Ok(c.clamp(-1.0, 1.0))
}

/// `|a| / |b|`.
pub fn relative_norm(a: &Tensor, b: &Tensor) -> Result<f64> {
    let nb = b.norm();
    if nb == 0.0 {
        return Err(domain("relative norm against a zero-norm tensor"));
    }
    Ok(a.norm() / nb)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn tensor_shape_must_match_length() {
        assert!(Tensor::new(vec![1.0, 2.0, 3.0], vec![3]).is_ok());
        assert!(Tensor::new(vec![1.0; 6], vec![2, 3]).is_ok());
        assert!(matches!(
            Tensor::new(vec![1.0; 5], vec![2, 3]),
            Err(EcoError::InvalidShape { .. })
        ));
    }

    #[test]
    fn rows_of_matrix_and_vector() {
        let m = Tensor::new(vec![0.0; 6], vec![2, 3]).unwrap();
        assert_eq!(m.rows(), (2, 3));
        assert_eq!(Tensor::from_vec(vec![1.0; 4]).rows(), (1, 4));
    }

    #[test]
    fn ensure_finite_reports_index() {
        let t = Tensor::from_vec(vec![1.0, f64::NAN]);
        assert_eq!(t.ensure_finite(), Err(EcoError::NonFinite { index: 1 }));
    }

    #[test]
    fn keyed_uniform_is_pure() {
        let k = RngKey::new(7, 3, 2, 11);
        assert_eq!(keyed_uniform(k), keyed_uniform(k));
        let u = keyed_uniform(k);
        assert!((0.0..1.0).contains(&u));
    }

    #[test]
    fn adjacent_indices_do_not_collide() {
        let base = RngKey::new(12345, 0, 0, 0);
        let collisions = (0..1_000_000u64)
            .filter(|&i| keyed_uniform(base.with_index(i)) == keyed_uniform(base.with_index(i + 1)))
            .count();
        assert_eq!(collisions, 0);
    }

    #[test]
    fn keyed_uniform_mean() {
        let n = 1_000_000u64;
        let base = RngKey::new(99, 5, 1, 0);
        let mean = (0..n).map(|i| keyed_uniform(base.with_index(i))).sum::<f64>() / n as f64;
        let tol = 3.0 / (12.0 * n as f64).sqrt();
        assert!((mean - 0.5).abs() <= tol, "mean {mean}");
    }

    #[test]
    fn keyed_uniform_chi_square_100_bins() {
        let n = 1_000_000u64;
        let base = RngKey::new(2024, 17, 4, 0);
        let mut bins = [0u64; 100];
        for i in 0..n {
            let u = keyed_uniform(base.with_index(i));
            bins[(u * 100.0) as usize] += 1;
        }
        let expected = n as f64 / 100.0;
        let chi2: f64 = bins
            .iter()
            .map(|&c| (c as f64 - expected).powi(2) / expected)
            .sum();
        // upper 1% point of chi-square with 99 degrees of freedom
        assert!(chi2 < 134.642, "chi2 {chi2}");
    }

    #[test]
    fn keys_differing_in_each_field_differ() {
        let k = RngKey::new(1, 2, 3, 4);
        let u = keyed_uniform(k);
        assert_ne!(u, keyed_uniform(RngKey { seed: 9, ..k }));
        assert_ne!(u, keyed_uniform(k.with_step(9)));
        assert_ne!(u, keyed_uniform(k.with_tensor(9)));
        assert_ne!(u, keyed_uniform(k.with_index(9)));
    }

    #[test]
    fn cosine_examples() {
        let v = Tensor::from_vec(vec![0.3, -1.2, 2.0]);
        assert!((cosine_similarity(&v, &v).unwrap() - 1.0).abs() < 1e-15);
        assert!((cosine_similarity(&v, &v.scale(-1.0)).unwrap() + 1.0).abs() < 1e-15);
        let e1 = Tensor::from_vec(vec![1.0, 0.0]);
        let e2 = Tensor::from_vec(vec![0.0, 1.0]);
        assert_eq!(cosine_similarity(&e1, &e2).unwrap(), 0.0);
    }

    #[test]
    fn cosine_rejects_zero_norm() {
        let z = Tensor::zeros(&[3]);
        let v = Tensor::from_vec(vec![1.0, 2.0, 3.0]);
        assert!(matches!(cosine_similarity(&z, &v), Err(EcoError::Domain(_))));
        assert!(matches!(cosine_similarity(&v, &z), Err(EcoError::Domain(_))));
    }

    #[test]
    fn relative_norm_examples() {
        let v = Tensor::from_vec(vec![0.5, -2.0]);
        assert_eq!(relative_norm(&v, &v).unwrap(), 1.0);
        assert!((relative_norm(&v.scale(2.0), &v).unwrap() - 2.0).abs() < 1e-15);
        let a = Tensor::from_vec(vec![3.0, 4.0]);
        let b = Tensor::from_vec(vec![1.0, 0.0]);
        assert_eq!(relative_norm(&a, &b).unwrap(), 5.0);
        assert!(relative_norm(&a, &Tensor::zeros(&[2])).is_err());
    }

    proptest! {
        #[test]
        fn cosine_is_scale_invariant(
            a in prop::collection::vec(-10.0f64..10.0, 5),
            b in prop::collection::vec(-10.0f64..10.0, 5),
            s in 0.01f64..100.0,
            r in 0.01f64..100.0,
        ) {
            let ta = Tensor::from_vec(a);
            let tb = Tensor::from_vec(b);
            prop_assume!(ta.norm() > 1e-3 && tb.norm() > 1e-3);
            let c0 = cosine_similarity(&ta, &tb).unwrap();
            let c1 = cosine_similarity(&ta.scale(s), &tb.scale(r)).unwrap();
            prop_assert!((c0 - c1).abs() <= 1e-12);
        }
    }
}
