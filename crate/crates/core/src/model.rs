//! L2-regularised logistic regression (binary and multinomial).
//!
//! Parameters are stored as `C − 1` blocks of length `d`; class 0 is the
//! reference class with logit fixed at zero, so the binary case reduces to
//! the usual sigmoid with `θ` of length `d`. The total objective is
//!
//! ```text
//! L(θ) = (1/n) Σᵢ ℓ(zᵢ, θ) + λ‖θ‖²,   ℓ(z, θ) = −log p_y(x, θ)
//! ```
//!
//! and every derivative below is analytic.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{axpy, conjugate_gradient, dot, norm2, norm_inf};
use crate::tabular::{TrainingRecord, TrainingSet};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("feature arity mismatch: model expects {expected}, got {found}")]
    Arity { expected: usize, found: usize },
    #[error("parameter vector length mismatch: expected {expected}, got {found}")]
    ParamLength { expected: usize, found: usize },
    #[error("cannot train on an empty training set")]
    EmptyTrainingSet,
    #[error("invalid hyper-parameters: {0}")]
    InvalidHyper(String),
    #[error("label {label} outside the model's {classes} classes")]
    Label { label: usize, classes: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hyper {
    pub lambda: f64,
    /// Sup-norm bound on the total-loss gradient.
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl Default for Hyper {
    fn default() -> Self {
        Self {
            lambda: 1e-3,
            tolerance: 1e-8,
            max_iterations: 500,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelState {
    pub dim: usize,
    pub classes: usize,
    pub lambda: f64,
    pub theta: Vec<f64>,
    pub converged: bool,
    pub grad_norm: f64,
    #[serde(default)]
    pub iterations: usize,
}

pub fn param_len(dim: usize, classes: usize) -> usize {
    dim * (classes - 1)
}

impl ModelState {
    pub fn zeros(dim: usize, classes: usize, lambda: f64) -> Self {
        Self {
            dim,
            classes,
            lambda,
            theta: vec![0.0; param_len(dim, classes)],
            converged: false,
            grad_norm: f64::MAX,
            iterations: 0,
        }
    }

    pub fn with_theta(dim: usize, classes: usize, lambda: f64, theta: Vec<f64>) -> Result<Self, ModelError> {
        let expected = param_len(dim, classes);
        if theta.len() != expected {
            return Err(ModelError::ParamLength {
                expected,
                found: theta.len(),
            });
        }
        Ok(Self {
            theta,
            ..Self::zeros(dim, classes, lambda)
        })
    }

    pub fn param_len(&self) -> usize {
        self.theta.len()
    }

    fn block(&self, k: usize) -> &[f64] {
        &self.theta[(k - 1) * self.dim..k * self.dim]
    }

    fn check_arity(&self, x: &[f64]) -> Result<(), ModelError> {
        if x.len() != self.dim {
            return Err(ModelError::Arity {
                expected: self.dim,
                found: x.len(),
            });
        }
        Ok(())
    }

    /// Logits with the reference class pinned at 0.
    fn logits(&self, x: &[f64]) -> Vec<f64> {
        let mut z = Vec::with_capacity(self.classes);
        z.push(0.0);
        for k in 1..self.classes {
            z.push(dot(self.block(k), x));
        }
        z
    }

    /// Softmax probabilities; assumes the arity has been checked.
    pub(crate) fn probs_unchecked(&self, x: &[f64]) -> Vec<f64> {
        let z = self.logits(x);
        let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut e: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
        let s: f64 = e.iter().sum();
        for v in &mut e {
            *v /= s;
        }
        e
    }

    /// `−log p_label(x)` computed through log-sum-exp.
    pub(crate) fn nll_unchecked(&self, x: &[f64], label: usize) -> f64 {
        let z = self.logits(x);
        let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        lse - z[label]
    }

    /// Accumulates `Σⱼ adj[j] ∇θ pⱼ(x)` into `out`, given `p = probs(x)`.
    pub(crate) fn backprop_probs(&self, x: &[f64], p: &[f64], adj: &[f64], out: &mut [f64]) {
        let mean: f64 = adj.iter().zip(p).map(|(a, q)| a * q).sum();
        for k in 1..self.classes {
            let w = p[k] * (adj[k] - mean);
            if w != 0.0 {
                axpy(w, x, &mut out[(k - 1) * self.dim..k * self.dim]);
            }
        }
    }

    /// Adds `scale · ∇θ ℓ(x, label)` into `out`.
    pub(crate) fn add_loss_grad(&self, x: &[f64], label: usize, scale: f64, out: &mut [f64]) {
        let p = self.probs_unchecked(x);
        for k in 1..self.classes {
            let r = p[k] - if k == label { 1.0 } else { 0.0 };
            if r != 0.0 {
                axpy(scale * r, x, &mut out[(k - 1) * self.dim..k * self.dim]);
            }
        }
    }
}

/// Class probabilities of a single feature vector.
pub fn predict_proba(m: &ModelState, x: &[f64]) -> Result<Vec<f64>, ModelError> {
    m.check_arity(x)?;
    Ok(m.probs_unchecked(x))
}

/// Most likely class with the lowest index winning ties.
pub fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (j, v) in p.iter().enumerate() {
        if *v > p[best] {
            best = j;
        }
    }
    best
}

fn check_record(m: &ModelState, z: &TrainingRecord) -> Result<(), ModelError> {
    m.check_arity(&z.features)?;
    if z.label >= m.classes {
        return Err(ModelError::Label {
            label: z.label,
            classes: m.classes,
        });
    }
    Ok(())
}

/// Per-record cross-entropy loss (no regulariser).
pub fn loss(m: &ModelState, z: &TrainingRecord) -> Result<f64, ModelError> {
    check_record(m, z)?;
    Ok(m.nll_unchecked(&z.features, z.label))
}

/// Gradient of the per-record loss with respect to θ.
pub fn loss_grad(m: &ModelState, z: &TrainingRecord) -> Result<Vec<f64>, ModelError> {
    check_record(m, z)?;
    let mut g = vec![0.0; m.param_len()];
    m.add_loss_grad(&z.features, z.label, 1.0, &mut g);
    Ok(g)
}

pub(crate) fn check_set(m: &ModelState, ts: &TrainingSet) -> Result<(), ModelError> {
    if ts.dim != m.dim {
        return Err(ModelError::Arity {
            expected: m.dim,
            found: ts.dim,
        });
    }
    if ts.classes != m.classes {
        return Err(ModelError::Label {
            label: ts.classes - 1,
            classes: m.classes,
        });
    }
    Ok(())
}

/// Total objective `L(θ)` including `λ‖θ‖²`.
pub fn total_loss(m: &ModelState, ts: &TrainingSet) -> Result<f64, ModelError> {
    check_set(m, ts)?;
    if ts.is_empty() {
        return Err(ModelError::EmptyTrainingSet);
    }
    let n = ts.len() as f64;
    let data: f64 = ts
        .records
        .iter()
        .map(|r| m.nll_unchecked(&r.features, r.label))
        .sum();
    Ok(data / n + m.lambda * dot(&m.theta, &m.theta))
}

/// Gradient of `L(θ)`.
pub fn total_grad(m: &ModelState, ts: &TrainingSet) -> Result<Vec<f64>, ModelError> {
    check_set(m, ts)?;
    if ts.is_empty() {
        return Err(ModelError::EmptyTrainingSet);
    }
    let inv_n = 1.0 / ts.len() as f64;
    let mut g: Vec<f64> = m.theta.iter().map(|t| 2.0 * m.lambda * t).collect();
    for r in &ts.records {
        m.add_loss_grad(&r.features, r.label, inv_n, &mut g);
    }
    Ok(g)
}

/// Hessian-vector product `∇²L(θ)·v`, including the `2λI` term. Runs in
/// `O(n·d·C)` and never forms the Hessian.
pub fn hvp(m: &ModelState, ts: &TrainingSet, v: &[f64]) -> Result<Vec<f64>, ModelError> {
    check_set(m, ts)?;
    if v.len() != m.param_len() {
        return Err(ModelError::ParamLength {
            expected: m.param_len(),
            found: v.len(),
        });
    }
    Ok(hvp_unchecked(m, ts, v))
}

pub(crate) fn hvp_unchecked(m: &ModelState, ts: &TrainingSet, v: &[f64]) -> Vec<f64> {
    let d = m.dim;
    let mut out: Vec<f64> = v.iter().map(|x| 2.0 * m.lambda * x).collect();
    if ts.is_empty() {
        return out;
    }
    let inv_n = 1.0 / ts.len() as f64;
    let mut a = vec![0.0; m.classes];
    for r in &ts.records {
        let x = &r.features;
        let p = m.probs_unchecked(x);
        for k in 1..m.classes {
            a[k] = dot(&v[(k - 1) * d..k * d], x);
        }
        let s: f64 = (1..m.classes).map(|k| p[k] * a[k]).sum();
        for k in 1..m.classes {
            let w = inv_n * p[k] * (a[k] - s);
            if w != 0.0 {
                axpy(w, x, &mut out[(k - 1) * d..k * d]);
            }
        }
    }
    out
}

/// Minimises `L(θ)` with a line-searched Newton–CG method.
///
/// Non-convergence within `max_iterations` is not an error: the returned
/// state carries `converged = false` and the achieved gradient norm.
pub fn train(
    ts: &TrainingSet,
    hyper: &Hyper,
    warm_start: Option<&ModelState>,
) -> Result<ModelState, ModelError> {
    if ts.is_empty() {
        return Err(ModelError::EmptyTrainingSet);
    }
    if !(hyper.lambda > 0.0) {
        return Err(ModelError::InvalidHyper(format!(
            "lambda must be positive, got {}",
            hyper.lambda
        )));
    }
    if !(hyper.tolerance > 0.0) {
        return Err(ModelError::InvalidHyper(format!(
            "tolerance must be positive, got {}",
            hyper.tolerance
        )));
    }
    let mut m = ModelState::zeros(ts.dim, ts.classes, hyper.lambda);
    if let Some(w) = warm_start {
        if w.dim == ts.dim && w.classes == ts.classes {
            m.theta.clone_from(&w.theta);
        }
    }
    let p = m.param_len();
    let mut f = total_loss(&m, ts)?;
    let mut g = total_grad(&m, ts)?;
    let mut iter = 0;
    while iter < hyper.max_iterations {
        let gnorm = norm_inf(&g);
        if gnorm <= hyper.tolerance {
            break;
        }
        iter += 1;
        // Inexact Newton: forcing term shrinks with the gradient.
        let g2 = norm2(&g);
        let forcing = 0.5f64.min(g2.sqrt()) * g2;
        let neg_g: Vec<f64> = g.iter().map(|x| -x).collect();
        let step = conjugate_gradient(
            |v| hvp_unchecked(&m, ts, v),
            &neg_g,
            forcing.max(1e-300),
            4 * p + 20,
        );
        let mut dir = step.x;
        let mut slope = dot(&g, &dir);
        if !(slope < 0.0) {
            dir = neg_g;
            slope = -g2 * g2;
        }
        let mut t = 1.0;
        let mut accepted = false;
        let mut trial = m.clone();
        for _ in 0..60 {
            for ((dst, src), d) in trial.theta.iter_mut().zip(&m.theta).zip(&dir) {
                *dst = src + t * d;
            }
            let ft = total_loss(&trial, ts)?;
            if ft <= f + 1e-4 * t * slope {
                accepted = true;
                f = ft;
                break;
            }
            // The predicted decrease is below rounding noise in f; judge the
            // full step by the gradient instead.
            if t == 1.0 && -slope <= 1e3 * f64::EPSILON * f.abs().max(1.0) {
                let gt = total_grad(&trial, ts)?;
                if norm_inf(&gt) < norm_inf(&g) {
                    accepted = true;
                    f = ft;
                    break;
                }
            }
            t *= 0.5;
        }
        if !accepted {
            // Line search failed at machine precision; take the last trial
            // only if it does not increase the objective.
            let ft = total_loss(&trial, ts)?;
            if ft <= f {
                m.theta.clone_from(&trial.theta);
                g = total_grad(&m, ts)?;
            }
            break;
        }
        m.theta.clone_from(&trial.theta);
        g = total_grad(&m, ts)?;
    }
    m.grad_norm = norm_inf(&g);
    m.converged = m.grad_norm <= hyper.tolerance;
    m.iterations = iter;
    Ok(m)
}
