//! Influence of individual training records on a differentiable function of
//! the trained parameters.
//!
//! With `H` the Hessian of the total loss at `θ*`, the score of record `z`
//! for a function `q` is `s(z) = −∇q(θ*)ᵀ H⁻¹ ∇ℓ(z, θ*)`. Deleting `z` from a
//! set of `n` records changes `q` by roughly `−s(z)/n`, so records with large
//! positive scores are the ones whose removal lowers `q` the most.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{conjugate_gradient, dot, norm2};
use crate::model::{check_set, hvp_unchecked, ModelError, ModelState};
use crate::tabular::TrainingSet;

#[derive(Debug, Error)]
pub enum InfluenceError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("conjugate gradient stopped after {iterations} iterations at residual {residual:e} (target {target:e})")]
    CgNotConverged {
        iterations: usize,
        residual: f64,
        target: f64,
    },
    #[error("vector length {found} does not match parameter count {expected}")]
    Dimension { expected: usize, found: usize },
    #[error("csv output: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CgSettings {
    /// Relative residual target `‖Hv − b‖ ≤ residual_tol·‖b‖`.
    pub residual_tol: f64,
    /// Defaults to ten times the parameter count.
    pub max_iters: Option<usize>,
    /// Extra `δ·I` added to the Hessian.
    pub damping: f64,
}

impl Default for CgSettings {
    fn default() -> Self {
        Self {
            residual_tol: 1e-6,
            max_iters: None,
            damping: 0.0,
        }
    }
}

/// A differentiable function of the model parameters.
pub trait QFunction: Send + Sync {
    fn value(&self, m: &ModelState) -> f64;
    fn grad(&self, m: &ModelState) -> Vec<f64>;
    fn description(&self) -> String;
}

/// `q ≡ c`.
#[derive(Debug, Clone, Copy)]
pub struct ConstantQ(pub f64);

impl QFunction for ConstantQ {
    fn value(&self, _: &ModelState) -> f64 {
        self.0
    }

    fn grad(&self, m: &ModelState) -> Vec<f64> {
        vec![0.0; m.param_len()]
    }

    fn description(&self) -> String {
        format!("constant {}", self.0)
    }
}

/// Sum of several functions.
pub struct SumQ(pub Vec<Box<dyn QFunction>>);

impl QFunction for SumQ {
    fn value(&self, m: &ModelState) -> f64 {
        self.0.iter().map(|q| q.value(m)).sum()
    }

    fn grad(&self, m: &ModelState) -> Vec<f64> {
        let mut g = vec![0.0; m.param_len()];
        for q in &self.0 {
            for (a, b) in g.iter_mut().zip(q.grad(m)) {
                *a += b;
            }
        }
        g
    }

    fn description(&self) -> String {
        let parts: Vec<String> = self.0.iter().map(|q| q.description()).collect();
        parts.join(" + ")
    }
}

/// Solves `(H + δI) v = b` with conjugate gradient using only
/// Hessian-vector products.
pub fn solve_inverse_hvp(
    m: &ModelState,
    ts: &TrainingSet,
    b: &[f64],
    cg: &CgSettings,
) -> Result<Vec<f64>, InfluenceError> {
    check_set(m, ts)?;
    let p = m.param_len();
    if b.len() != p {
        return Err(InfluenceError::Dimension {
            expected: p,
            found: b.len(),
        });
    }
    let target = cg.residual_tol * norm2(b);
    let max_iters = cg.max_iters.unwrap_or(10 * p);
    let out = conjugate_gradient(
        |v| {
            let mut hv = hvp_unchecked(m, ts, v);
            if cg.damping != 0.0 {
                for (h, x) in hv.iter_mut().zip(v) {
                    *h += cg.damping * x;
                }
            }
            hv
        },
        b,
        target,
        max_iters,
    );
    if !out.converged {
        return Err(InfluenceError::CgNotConverged {
            iterations: out.iterations,
            residual: out.residual,
            target,
        });
    }
    Ok(out.x)
}

/// Per-record scores in training-set order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InfluenceScores {
    pub ids: Vec<i64>,
    pub scores: Vec<f64>,
}

impl InfluenceScores {
    pub fn get(&self, id: i64) -> Option<f64> {
        self.ids.iter().position(|&i| i == id).map(|i| self.scores[i])
    }

    /// Highest score first, ties by ascending id.
    pub fn ranked_descending(&self) -> Vec<(i64, f64)> {
        let mut v: Vec<(i64, f64)> = self.ids.iter().copied().zip(self.scores.iter().copied()).collect();
        v.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        v
    }

    /// Lowest score first, ties by ascending id.
    pub fn ranked_ascending(&self) -> Vec<(i64, f64)> {
        let mut v: Vec<(i64, f64)> = self.ids.iter().copied().zip(self.scores.iter().copied()).collect();
        v.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        v
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), InfluenceError> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["record_id", "score"])?;
        for (id, s) in self.ids.iter().zip(&self.scores) {
            w.write_record([id.to_string(), format!("{s:e}")])?;
        }
        w.flush().map_err(csv::Error::from)?;
        Ok(())
    }
}

/// Scores every training record against `q` with a single CG solve.
pub fn score_training_records(
    m: &ModelState,
    ts: &TrainingSet,
    q: &dyn QFunction,
    cg: &CgSettings,
) -> Result<InfluenceScores, InfluenceError> {
    let g = q.grad(m);
    let v = solve_inverse_hvp(m, ts, &g, cg)?;
    score_with_direction(m, ts, &v)
}

/// `s(z) = −vᵀ∇ℓ(z)` for a precomputed `v = H⁻¹∇q`.
pub fn score_with_direction(
    m: &ModelState,
    ts: &TrainingSet,
    v: &[f64],
) -> Result<InfluenceScores, InfluenceError> {
    check_set(m, ts)?;
    let scores = ts
        .records
        .par_iter()
        .map(|z| {
            let mut g = vec![0.0; m.param_len()];
            m.add_loss_grad(&z.features, z.label, 1.0, &mut g);
            -dot(v, &g)
        })
        .collect();
    Ok(InfluenceScores {
        ids: ts.ids(),
        scores,
    })
}

/// `−∇ℓ(z)ᵀ H⁻¹ ∇ℓ(z)` per record; always ≤ 0.
///
/// When there are fewer parameters than records the inverse Hessian is
/// assembled column by column from `p` solves, otherwise each record gets
/// its own solve. Both give the same quadratic form.
pub fn self_influence_scores(
    m: &ModelState,
    ts: &TrainingSet,
    cg: &CgSettings,
) -> Result<InfluenceScores, InfluenceError> {
    check_set(m, ts)?;
    let p = m.param_len();
    let grads: Vec<Vec<f64>> = ts
        .records
        .par_iter()
        .map(|z| {
            let mut g = vec![0.0; p];
            m.add_loss_grad(&z.features, z.label, 1.0, &mut g);
            g
        })
        .collect();
    let scores = if p < ts.len() {
        let cols = (0..p)
            .into_par_iter()
            .map(|j| {
                let mut e = vec![0.0; p];
                e[j] = 1.0;
                solve_inverse_hvp(m, ts, &e, cg)
            })
            .collect::<Result<Vec<_>, _>>()?;
        grads
            .par_iter()
            .map(|g| {
                let hg: f64 = cols
                    .iter()
                    .zip(g)
                    .filter(|(_, gj)| **gj != 0.0)
                    .map(|(col, gj)| gj * dot(col, g))
                    .sum();
                -hg
            })
            .collect()
    } else {
        grads
            .par_iter()
            .map(|g| Ok(-dot(g, &solve_inverse_hvp(m, ts, g, cg)?)))
            .collect::<Result<Vec<_>, InfluenceError>>()?
    };
    Ok(InfluenceScores {
        ids: ts.ids(),
        scores,
    })
}

/// Per-record training loss `ℓ(z, θ)`.
pub fn loss_scores(m: &ModelState, ts: &TrainingSet) -> Result<InfluenceScores, InfluenceError> {
    check_set(m, ts)?;
    let scores = ts
        .records
        .par_iter()
        .map(|z| m.nll_unchecked(&z.features, z.label))
        .collect();
    Ok(InfluenceScores {
        ids: ts.ids(),
        scores,
    })
}
