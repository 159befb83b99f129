//! Objectives with analytic gradients.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{domain, EcoError, Result};
use crate::numerics::{dot, Tensor};

/// Serializable description of an objective; data and initial points are
/// generated from the run seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ObjectiveSpec {
    /// `f(x) = (L/2) x²`
    Quadratic1d { l: f64, x0: f64 },
    /// `f(θ) = ½ (θ - c)ᵀ H (θ - c)` with an explicit symmetric PSD `H`.
    QuadraticNd {
        hessian: Vec<Vec<f64>>,
        #[serde(default)]
        center: Option<Vec<f64>>,
        x0: Vec<f64>,
    },
    /// Random rotation of evenly spaced eigenvalues in `[l_min, l_max]`,
    /// Gaussian center and start.
    RandomQuadratic {
        dim: usize,
        l_min: f64,
        l_max: f64,
        #[serde(default = "unit")]
        center_scale: f64,
        #[serde(default = "unit")]
        init_scale: f64,
    },
    /// `f(θ) = (1/2n) ‖Xθ - y‖²` on Gaussian data.
    LinearRegression {
        samples: usize,
        features: usize,
        #[serde(default)]
        noise: f64,
    },
    /// Two-layer tanh network fitted to a random teacher of the same shape.
    Mlp2 {
        inputs: usize,
        hidden: usize,
        outputs: usize,
        samples: usize,
        #[serde(default)]
        noise: f64,
    },
}

fn unit() -> f64 {
    1.0
}

/// Name, shape and role of a parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupInfo {
    pub name: String,
    pub shape: Vec<usize>,
    /// Input or output layer; left unquantized unless asked otherwise.
    pub is_io: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Objective {
    Quadratic1d {
        l: f64,
    },
    QuadraticNd {
        dim: usize,
        /// Row-major `dim x dim`.
        hessian: Vec<f64>,
        center: Vec<f64>,
    },
    LinearRegression {
        samples: usize,
        features: usize,
        x: Vec<f64>,
        y: Vec<f64>,
    },
    Mlp2 {
        inputs: usize,
        hidden: usize,
        outputs: usize,
        samples: usize,
        x: Vec<f64>,
        y: Vec<f64>,
    },
}

fn normals(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            scale * z
        })
        .collect()
}

fn data_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ 0x6f62_6a65_6374_6976)
}

/// Haar-distributed orthogonal matrix: QR of a Gaussian matrix with the
/// signs of `R`'s diagonal folded into `Q`.
fn random_orthogonal(rng: &mut ChaCha8Rng, dim: usize) -> DMatrix<f64> {
    let g = DMatrix::from_vec(dim, dim, normals(rng, dim * dim, 1.0));
    let qr = g.qr();
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..dim {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}

fn positive(name: &str, v: f64) -> Result<()> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(domain(format!("{name} must be > 0, got {v}")))
    }
}

fn nonzero(name: &str, v: usize) -> Result<()> {
    if v > 0 {
        Ok(())
    } else {
        Err(domain(format!("{name} must be >= 1")))
    }
}

impl ObjectiveSpec {
    pub fn validate(&self) -> Result<()> {
        match self {
            ObjectiveSpec::Quadratic1d { l, x0 } => {
                if !(l.is_finite() && *l >= 0.0) {
                    return Err(domain(format!("l must be >= 0, got {l}")));
                }
                if !x0.is_finite() {
                    return Err(domain("x0 must be finite"));
                }
            }
            ObjectiveSpec::QuadraticNd {
                hessian,
                center,
                x0,
            } => {
                let d = x0.len();
                nonzero("x0 length", d)?;
                if hessian.len() != d || hessian.iter().any(|r| r.len() != d) {
                    return Err(domain(format!("hessian must be {d}x{d}")));
                }
                for i in 0..d {
                    for j in 0..d {
                        if !hessian[i][j].is_finite()
                            || (hessian[i][j] - hessian[j][i]).abs()
                                > 1e-12 * hessian[i][j].abs().max(1.0)
                        {
                            return Err(domain("hessian must be finite and symmetric"));
                        }
                    }
                }
                if let Some(c) = center {
                    if c.len() != d {
                        return Err(domain(format!("center must have length {d}")));
                    }
                }
                if min_eigenvalue(&flatten(hessian), d) < -1e-9 {
                    return Err(domain("hessian must be positive semidefinite"));
                }
            }
            ObjectiveSpec::RandomQuadratic {
                dim,
                l_min,
                l_max,
                center_scale,
                init_scale,
            } => {
                nonzero("dim", *dim)?;
                if !(l_min.is_finite() && *l_min >= 0.0 && l_max >= l_min && l_max.is_finite()) {
                    return Err(domain(format!(
                        "need 0 <= l_min <= l_max, got l_min={l_min} l_max={l_max}"
                    )));
                }
                if !(center_scale.is_finite() && *center_scale >= 0.0) {
                    return Err(domain("center_scale must be >= 0"));
                }
                positive("init_scale", *init_scale)?;
            }
            ObjectiveSpec::LinearRegression {
                samples,
                features,
                noise,
            } => {
                nonzero("samples", *samples)?;
                nonzero("features", *features)?;
                if !(noise.is_finite() && *noise >= 0.0) {
                    return Err(domain("noise must be >= 0"));
                }
            }
            ObjectiveSpec::Mlp2 {
                inputs,
                hidden,
                outputs,
                samples,
                noise,
            } => {
                nonzero("inputs", *inputs)?;
                nonzero("hidden", *hidden)?;
                nonzero("outputs", *outputs)?;
                nonzero("samples", *samples)?;
                if !(noise.is_finite() && *noise >= 0.0) {
                    return Err(domain("noise must be >= 0"));
                }
            }
        }
        Ok(())
    }

    /// Materialize the objective and its starting parameters.
    pub fn build(&self, seed: u64) -> Result<(Objective, Vec<Tensor>)> {
        self.validate()?;
        let mut rng = data_rng(seed);
        Ok(match self {
            ObjectiveSpec::Quadratic1d { l, x0 } => {
                (Objective::Quadratic1d { l: *l }, vec![Tensor::scalar(*x0)])
            }
            ObjectiveSpec::QuadraticNd {
                hessian,
                center,
                x0,
            } => {
                let d = x0.len();
                (
                    Objective::QuadraticNd {
                        dim: d,
                        hessian: flatten(hessian),
                        center: center.clone().unwrap_or_else(|| vec![0.0; d]),
                    },
                    vec![Tensor::from_vec(x0.clone())],
                )
            }
            ObjectiveSpec::RandomQuadratic {
                dim,
                l_min,
                l_max,
                center_scale,
                init_scale,
            } => {
                let d = *dim;
                let q = random_orthogonal(&mut rng, d);
                let eig: Vec<f64> = (0..d)
                    .map(|i| {
                        if d == 1 {
                            *l_max
                        } else {
                            l_min + (l_max - l_min) * i as f64 / (d - 1) as f64
                        }
                    })
                    .collect();
                let m = &q * DMatrix::from_diagonal(&DVector::from_vec(eig)) * q.transpose();
                let m = (&m + m.transpose()) * 0.5;
                let h: Vec<f64> = m.transpose().iter().copied().collect();
                let center = normals(&mut rng, d, *center_scale);
                let x0 = normals(&mut rng, d, *init_scale);
                (
                    Objective::QuadraticNd {
                        dim: d,
                        hessian: h,
                        center,
                    },
                    vec![Tensor::from_vec(x0)],
                )
            }
            ObjectiveSpec::LinearRegression {
                samples,
                features,
                noise,
            } => {
                let (n, d) = (*samples, *features);
                let x = normals(&mut rng, n * d, 1.0);
                let truth = normals(&mut rng, d, 1.0);
                let eps = normals(&mut rng, n, *noise);
                let y = (0..n)
                    .map(|i| dot(&x[i * d..(i + 1) * d], &truth) + eps[i])
                    .collect();
                (
                    Objective::LinearRegression {
                        samples: n,
                        features: d,
                        x,
                        y,
                    },
                    vec![Tensor::zeros(&[d])],
                )
            }
            ObjectiveSpec::Mlp2 {
                inputs,
                hidden,
                outputs,
                samples,
                noise,
            } => {
                let (i, h, o, n) = (*inputs, *hidden, *outputs, *samples);
                let x = normals(&mut rng, n * i, 1.0);
                let teacher = mlp_init(&mut rng, i, h, o, 1.0);
                let mut y = vec![0.0; n * o];
                let eps = normals(&mut rng, n * o, *noise);
                for s in 0..n {
                    let out = mlp_forward(&teacher, &x[s * i..(s + 1) * i], i, h, o).1;
                    for k in 0..o {
                        y[s * o + k] = out[k] + eps[s * o + k];
                    }
                }
                let student = mlp_init(&mut rng, i, h, o, 1.0);
                (
                    Objective::Mlp2 {
                        inputs: i,
                        hidden: h,
                        outputs: o,
                        samples: n,
                        x,
                        y,
                    },
                    student,
                )
            }
        })
    }
}

fn flatten(rows: &[Vec<f64>]) -> Vec<f64> {
    rows.iter().flatten().copied().collect()
}

fn eigenvalues(h: &[f64], d: usize) -> Vec<f64> {
    let m = DMatrix::from_row_slice(d, d, h);
    m.symmetric_eigenvalues().iter().copied().collect()
}

fn min_eigenvalue(h: &[f64], d: usize) -> f64 {
    eigenvalues(h, d).into_iter().fold(f64::INFINITY, f64::min)
}

fn max_eigenvalue(h: &[f64], d: usize) -> f64 {
    eigenvalues(h, d).into_iter().fold(f64::NEG_INFINITY, f64::max)
}

/// Xavier-style Gaussian initialization `[W1, b1, W2, b2]`.
fn mlp_init(rng: &mut ChaCha8Rng, i: usize, h: usize, o: usize, gain: f64) -> Vec<Tensor> {
    let w1 = normals(rng, h * i, gain / (i as f64).sqrt());
    let b1 = normals(rng, h, 0.1 * gain);
    let w2 = normals(rng, o * h, gain / (h as f64).sqrt());
    let b2 = normals(rng, o, 0.1 * gain);
    vec![
        Tensor::new(w1, vec![h, i]).expect("shape"),
        Tensor::from_vec(b1),
        Tensor::new(w2, vec![o, h]).expect("shape"),
        Tensor::from_vec(b2),
    ]
}

/// Hidden activations and outputs for one sample.
fn mlp_forward(p: &[Tensor], x: &[f64], i: usize, h: usize, o: usize) -> (Vec<f64>, Vec<f64>) {
    let (w1, b1, w2, b2) = (p[0].values(), p[1].values(), p[2].values(), p[3].values());
    let act: Vec<f64> = (0..h)
        .map(|j| (dot(&w1[j * i..(j + 1) * i], x) + b1[j]).tanh())
        .collect();
    let out = (0..o)
        .map(|k| dot(&w2[k * h..(k + 1) * h], &act) + b2[k])
        .collect();
    (act, out)
}

impl Objective {
    pub fn groups(&self) -> Vec<GroupInfo> {
        let g = |name: &str, shape: Vec<usize>, is_io: bool| GroupInfo {
            name: name.to_string(),
            shape,
            is_io,
        };
        match self {
            Objective::Quadratic1d { .. } => vec![g("theta", vec![1], false)],
            Objective::QuadraticNd { dim, .. } => vec![g("theta", vec![*dim], false)],
            Objective::LinearRegression { features, .. } => {
                vec![g("theta", vec![*features], false)]
            }
            // The hidden layer is the body of the network; the read-out layer
            // plays the role of the output layer.
            Objective::Mlp2 {
                inputs,
                hidden,
                outputs,
                ..
            } => vec![
                g("w1", vec![*hidden, *inputs], false),
                g("b1", vec![*hidden], false),
                g("w2", vec![*outputs, *hidden], true),
                g("b2", vec![*outputs], true),
            ],
        }
    }

    /// Largest Hessian eigenvalue of quadratic objectives.
    pub fn smoothness(&self) -> Option<f64> {
        match self {
            Objective::Quadratic1d { l } => Some(*l),
            Objective::QuadraticNd { dim, hessian, .. } => {
                Some(max_eigenvalue(hessian, *dim))
            }
            Objective::LinearRegression {
                samples,
                features,
                x,
                ..
            } => {
                let d = *features;
                let mut gram = vec![0.0; d * d];
                for s in 0..*samples {
                    let row = &x[s * d..(s + 1) * d];
                    for i in 0..d {
                        for j in 0..d {
                            gram[i * d + j] += row[i] * row[j] / *samples as f64;
                        }
                    }
                }
                Some(max_eigenvalue(&gram, d))
            }
            Objective::Mlp2 { .. } => None,
        }
    }

    /// Minimum value, where known in closed form.
    pub fn minimum(&self) -> Option<f64> {
        match self {
            Objective::Quadratic1d { .. } | Objective::QuadraticNd { .. } => Some(0.0),
            _ => None,
        }
    }

    fn check_shapes(&self, params: &[Tensor]) -> Result<()> {
        let groups = self.groups();
        if params.len() != groups.len() {
            return Err(domain(format!(
                "expected {} parameter tensors, got {}",
                groups.len(),
                params.len()
            )));
        }
        for (p, g) in params.iter().zip(&groups) {
            if p.shape() != g.shape.as_slice() {
                return Err(EcoError::ShapeMismatch {
                    expected: g.shape.clone(),
                    actual: p.shape().to_vec(),
                });
            }
        }
        Ok(())
    }

    /// Number of data points of dataset objectives.
    pub fn samples(&self) -> Option<usize> {
        match self {
            Objective::LinearRegression { samples, .. } | Objective::Mlp2 { samples, .. } => {
                Some(*samples)
            }
            _ => None,
        }
    }

    /// Value and gradient at `params`.
    pub fn eval(&self, params: &[Tensor]) -> Result<(f64, Vec<Tensor>)> {
        self.eval_subset(params, None)
    }

    /// Value and gradient of the mean loss over `subset` of the data points
    /// (all of them when `None`). Objectives without data ignore `subset`.
    pub fn eval_subset(&self, params: &[Tensor], subset: Option<&[usize]>) -> Result<(f64, Vec<Tensor>)> {
        self.check_shapes(params)?;
        if let (Some(idx), Some(n)) = (subset, self.samples()) {
            if idx.is_empty() || idx.iter().any(|&s| s >= n) {
                return Err(domain(format!("subset must be non-empty indices below {n}")));
            }
        }
        let all: Vec<usize>;
        let rows: &[usize] = match subset {
            Some(idx) => idx,
            None => {
                all = (0..self.samples().unwrap_or(0)).collect();
                &all
            }
        };
        match self {
            Objective::Quadratic1d { l } => {
                let x = params[0].values()[0];
                Ok((0.5 * l * x * x, vec![Tensor::scalar(l * x)]))
            }
            Objective::QuadraticNd {
                dim,
                hessian,
                center,
            } => {
                let d = *dim;
                let r: Vec<f64> = params[0]
                    .values()
                    .iter()
                    .zip(center)
                    .map(|(t, c)| t - c)
                    .collect();
                let g: Vec<f64> = (0..d).map(|i| dot(&hessian[i * d..(i + 1) * d], &r)).collect();
                Ok((0.5 * dot(&r, &g), vec![Tensor::from_vec(g)]))
            }
            Objective::LinearRegression {
                samples,
                features,
                x,
                y,
            } => {
                let (n, d) = (rows.len(), *features);
                debug_assert!(n <= *samples);
                let theta = params[0].values();
                let mut grad = vec![0.0; d];
                let mut loss = 0.0;
                for &s in rows {
                    let row = &x[s * d..(s + 1) * d];
                    let r = dot(row, theta) - y[s];
                    loss += r * r;
                    grad.iter_mut().zip(row).for_each(|(g, xi)| *g += r * xi);
                }
                let scale = 1.0 / n as f64;
                grad.iter_mut().for_each(|g| *g *= scale);
                Ok((0.5 * loss * scale, vec![Tensor::from_vec(grad)]))
            }
            Objective::Mlp2 {
                inputs,
                hidden,
                outputs,
                samples,
                x,
                y,
            } => {
                let (i, h, o, n) = (*inputs, *hidden, *outputs, rows.len());
                debug_assert!(n <= *samples);
                let w2 = params[2].values();
                let mut gw1 = vec![0.0; h * i];
                let mut gb1 = vec![0.0; h];
                let mut gw2 = vec![0.0; o * h];
                let mut gb2 = vec![0.0; o];
                let mut loss = 0.0;
                let scale = 1.0 / n as f64;
                for &s in rows {
                    let xs = &x[s * i..(s + 1) * i];
                    let (act, out) = mlp_forward(params, xs, i, h, o);
                    let resid: Vec<f64> = (0..o).map(|k| out[k] - y[s * o + k]).collect();
                    loss += dot(&resid, &resid);
                    for k in 0..o {
                        gb2[k] += resid[k] * scale;
                        for j in 0..h {
                            gw2[k * h + j] += resid[k] * act[j] * scale;
                        }
                    }
                    for j in 0..h {
                        let back: f64 = (0..o).map(|k| resid[k] * w2[k * h + j]).sum();
                        let delta = back * (1.0 - act[j] * act[j]) * scale;
                        gb1[j] += delta;
                        for c in 0..i {
                            gw1[j * i + c] += delta * xs[c];
                        }
                    }
                }
                Ok((
                    0.5 * loss * scale,
                    vec![
                        Tensor::new(gw1, vec![h, i])?,
                        Tensor::from_vec(gb1),
                        Tensor::new(gw2, vec![o, h])?,
                        Tensor::from_vec(gb2),
                    ],
                ))
            }
        }
    }

    pub fn value(&self, params: &[Tensor]) -> Result<f64> {
        // value-only evaluation shares the gradient path; objectives here are small
        Ok(self.eval(params)?.0)
    }
}

/// Value and gradient of a single-tensor objective.
pub fn objective_eval(obj: &Objective, theta: &Tensor) -> Result<(f64, Tensor)> {
    let (f, mut g) = obj.eval(std::slice::from_ref(theta))?;
    Ok((f, g.remove(0)))
}
