//! Small dense-vector helpers and a matrix-free conjugate gradient solver.

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn norm_inf(a: &[f64]) -> f64 {
    a.iter().fold(0.0f64, |m, v| m.max(v.abs()))
}

/// `y += alpha * x`
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

#[derive(Debug, Clone)]
pub struct CgOutcome {
    pub x: Vec<f64>,
    pub iterations: usize,
    /// Final `‖A x − b‖₂`.
    pub residual: f64,
    pub converged: bool,
}

/// Solves `A x = b` for symmetric positive definite `A` given only the
/// product `x ↦ A x`. Stops once `‖r‖₂ ≤ abs_tol` or after `max_iters`.
pub fn conjugate_gradient<F>(apply: F, b: &[f64], abs_tol: f64, max_iters: usize) -> CgOutcome
where
    F: Fn(&[f64]) -> Vec<f64>,
{
    let n = b.len();
    let mut x = vec![0.0; n];
    let mut r = b.to_vec();
    let mut rr = dot(&r, &r);
    if rr.sqrt() <= abs_tol {
        return CgOutcome {
            x,
            iterations: 0,
            residual: rr.sqrt(),
            converged: true,
        };
    }
    let mut p = r.clone();
    let mut iterations = 0;
    while iterations < max_iters {
        let ap = apply(&p);
        let pap = dot(&p, &ap);
        if pap <= 0.0 || !pap.is_finite() {
            break;
        }
        let alpha = rr / pap;
        axpy(alpha, &p, &mut x);
        axpy(-alpha, &ap, &mut r);
        iterations += 1;
        let rr_next = dot(&r, &r);
        if rr_next.sqrt() <= abs_tol {
            rr = rr_next;
            break;
        }
        let beta = rr_next / rr;
        rr = rr_next;
        for (pi, ri) in p.iter_mut().zip(&r) {
            *pi = ri + beta * *pi;
        }
    }
    // Recompute the true residual; the recurrence drifts in long runs.
    let ax = apply(&x);
    let residual = ax
        .iter()
        .zip(b)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    CgOutcome {
        x,
        iterations,
        residual,
        converged: residual <= abs_tol || rr.sqrt() <= abs_tol,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cg_solves_small_spd_system() {
        let a = [[4.0, 1.0, 0.0], [1.0, 3.0, 0.5], [0.0, 0.5, 2.0]];
        let apply = |v: &[f64]| -> Vec<f64> { a.iter().map(|row| dot(row, v)).collect() };
        let b = [1.0, 2.0, 3.0];
        let out = conjugate_gradient(apply, &b, 1e-12, 50);
        assert!(out.converged);
        let ax = apply(&out.x);
        for (l, r) in ax.iter().zip(&b) {
            assert!((l - r).abs() < 1e-10);
        }
        assert!(out.iterations <= 3);
    }

    #[test]
    fn zero_rhs_takes_no_iterations() {
        let out = conjugate_gradient(|v| v.to_vec(), &[0.0; 4], 1e-12, 10);
        assert_eq!(out.iterations, 0);
        assert_eq!(out.x, vec![0.0; 4]);
    }
}
