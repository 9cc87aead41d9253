//! Dense linear-algebra carriers and the scalar divergence measures.
//!
//! All divergence math runs in f64: KL on near-identical distributions is
//! cancellation-prone, so the wider type is used even where model weights
//! are stored in f32. Raw KL values are in nats.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default clamp applied to `q` entries inside the KL logarithm.
pub const KL_FLOOR_DEFAULT: f64 = 1e-10;
/// Default threshold below which a score row is treated as all-zero.
pub const NORM_EPSILON_DEFAULT: f64 = 1e-8;

/// Dense 64-bit float vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Vector {
    data: Vec<f64>,
}

impl Vector {
    pub fn new(data: Vec<f64>) -> Self {
        Vector { data }
    }

    pub fn zeros(dim: usize) -> Self {
        Vector { data: vec![0.0; dim] }
    }

    pub fn dim(&self) -> usize {
        self.data.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn dot(&self, other: &Vector) -> Result<f64> {
        if self.dim() != other.dim() {
            return Err(Error::Shape {
                context: "dot",
                expected: format!("dim {}", self.dim()),
                got: format!("dim {}", other.dim()),
            });
        }
        Ok(self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| a * b)
            .sum())
    }
}

impl std::ops::Index<usize> for Vector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.data[i]
    }
}

/// Dense row-major 64-bit float matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(Error::Shape {
                context: "matrix construction",
                expected: format!("{} elements for {rows}x{cols}", rows * cols),
                got: format!("{} elements", data.len()),
            });
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_vector(&self, r: usize) -> Vector {
        Vector::new(self.row(r).to_vec())
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }
}

/// A probability distribution over a finite support.
///
/// Entries lie in [0, 1] and sum to 1 within 1e-9; validated at construction.
#[derive(Debug, Clone, PartialEq)]
pub struct Distribution {
    probs: Vector,
}

impl Distribution {
    pub fn new(probs: Vector) -> Result<Self> {
        let mut sum = 0.0;
        for &p in probs.as_slice() {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Numeric {
                    context: "distribution entries must lie in [0,1]",
                });
            }
            sum += p;
        }
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Numeric {
                context: "distribution entries must sum to 1",
            });
        }
        Ok(Distribution { probs })
    }

    pub fn dim(&self) -> usize {
        self.probs.dim()
    }

    pub fn probs(&self) -> &Vector {
        &self.probs
    }

    pub fn as_slice(&self) -> &[f64] {
        self.probs.as_slice()
    }
}

/// Matrix-vector product `w · x`.
pub fn affine_apply(w: &Matrix, x: &Vector) -> Result<Vector> {
    if w.cols() != x.dim() {
        return Err(Error::Shape {
            context: "affine_apply",
            expected: format!("vector dim {}", w.cols()),
            got: format!("vector dim {}", x.dim()),
        });
    }
    let xs = x.as_slice();
    let mut out = Vec::with_capacity(w.rows());
    for r in 0..w.rows() {
        let row = w.row(r);
        let mut acc = 0.0;
        for (a, b) in row.iter().zip(xs.iter()) {
            acc += a * b;
        }
        out.push(acc);
    }
    Ok(Vector::new(out))
}

/// Numerically stable softmax (max-subtraction before exponentiation).
pub fn softmax(logits: &Vector) -> Result<Distribution> {
    if logits.dim() == 0 {
        return Err(Error::Input {
            message: "softmax of empty vector".to_string(),
        });
    }
    if !logits.is_finite() {
        return Err(Error::Numeric {
            context: "softmax requires finite logits",
        });
    }
    let max = logits
        .as_slice()
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.as_slice().iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let probs: Vec<f64> = exps.iter().map(|&e| e / sum).collect();
    Distribution::new(Vector::new(probs))
}

/// KL divergence `Σ p_i · ln(p_i / max(q_i, floor))` in nats.
///
/// Terms with `p_i == 0` are skipped; `q` entries are clamped to `floor`
/// inside the log because softmax outputs can underflow to zero in 32-bit
/// storage. The true divergence is non-negative; a sum driven negative by
/// the floor (q mass below it where p is also tiny) or by rounding is an
/// artifact and clamps to zero.
pub fn kl_divergence(p: &Distribution, q: &Distribution, floor: f64) -> Result<f64> {
    if p.dim() != q.dim() {
        return Err(Error::Shape {
            context: "kl_divergence",
            expected: format!("dim {}", p.dim()),
            got: format!("dim {}", q.dim()),
        });
    }
    if floor <= 0.0 {
        return Err(Error::Contract {
            message: format!("kl floor must be positive, got {floor}"),
        });
    }
    let mut sum = 0.0;
    for (&pi, &qi) in p.as_slice().iter().zip(q.as_slice().iter()) {
        if pi == 0.0 {
            continue;
        }
        sum += pi * (pi / qi.max(floor)).ln();
    }
    Ok(sum.max(0.0))
}

/// `1 − cos(u, v)`, clamped into [0, 2].
///
/// Zero-norm inputs have no direction; callers that use this as a divergence
/// map the error to 0.
pub fn cosine_distance(u: &Vector, v: &Vector) -> Result<f64> {
    if u.dim() != v.dim() {
        return Err(Error::Shape {
            context: "cosine_distance",
            expected: format!("dim {}", u.dim()),
            got: format!("dim {}", v.dim()),
        });
    }
    let nu = u.norm();
    let nv = v.norm();
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::DegenerateVector {
            context: "cosine_distance of zero-norm vector",
        });
    }
    let cos = u.dot(v)? / (nu * nv);
    Ok((1.0 - cos).clamp(0.0, 2.0))
}

/// Euclidean distance `‖u − v‖₂`.
pub fn euclidean_distance(u: &Vector, v: &Vector) -> Result<f64> {
    if u.dim() != v.dim() {
        return Err(Error::Shape {
            context: "euclidean_distance",
            expected: format!("dim {}", u.dim()),
            got: format!("dim {}", v.dim()),
        });
    }
    let sum: f64 = u
        .as_slice()
        .iter()
        .zip(v.as_slice().iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(sum.sqrt())
}

/// Normalize non-negative scores so they sum to 1.
///
/// A row whose total is at most `epsilon` carries no signal; it falls back
/// to the uniform vector so downstream fusion degrades toward static
/// weighting instead of dividing by zero.
pub fn normalize_scores(scores: &[f64], epsilon: f64) -> Result<Vec<f64>> {
    if scores.is_empty() {
        return Err(Error::Input {
            message: "normalize_scores of empty slice".to_string(),
        });
    }
    if epsilon <= 0.0 {
        return Err(Error::Contract {
            message: format!("epsilon must be positive, got {epsilon}"),
        });
    }
    for &s in scores {
        if !s.is_finite() || s < 0.0 {
            return Err(Error::Contract {
                message: format!("normalize_scores requires non-negative scores, got {s}"),
            });
        }
    }
    let total: f64 = scores.iter().sum();
    if total > epsilon {
        Ok(scores.iter().map(|&s| s / total).collect())
    } else {
        let k = scores.len() as f64;
        Ok(vec![1.0 / k; scores.len()])
    }
}
