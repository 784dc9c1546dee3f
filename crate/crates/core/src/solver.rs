//! Preconditioned conjugate gradient over real inner-product spaces, and
//! Lanczos tools built on it.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A real Hilbert space element the solver can work with.
pub trait InnerProductSpace: Clone {
    fn inner(&self, other: &Self) -> f64;
    /// `self += a * x`
    fn add_scaled(&mut self, a: f64, x: &Self);
    fn scale_mut(&mut self, a: f64);
    fn zeros_like(&self) -> Self;
    fn all_finite(&self) -> bool;

    fn norm2(&self) -> f64 {
        self.inner(self).sqrt()
    }
}

impl InnerProductSpace for DVector<f64> {
    fn inner(&self, other: &Self) -> f64 {
        self.dot(other)
    }
    fn add_scaled(&mut self, a: f64, x: &Self) {
        self.axpy(a, x, 1.0);
    }
    fn scale_mut(&mut self, a: f64) {
        *self *= a;
    }
    fn zeros_like(&self) -> Self {
        DVector::zeros(self.len())
    }
    fn all_finite(&self) -> bool {
        self.iter().all(|v| v.is_finite())
    }
}

/// Symmetric matrices with the Frobenius inner product.
impl InnerProductSpace for DMatrix<f64> {
    fn inner(&self, other: &Self) -> f64 {
        self.dot(other)
    }
    fn add_scaled(&mut self, a: f64, x: &Self) {
        for (s, v) in self.iter_mut().zip(x.iter()) {
            *s += a * v;
        }
    }
    fn scale_mut(&mut self, a: f64) {
        *self *= a;
    }
    fn zeros_like(&self) -> Self {
        DMatrix::zeros(self.nrows(), self.ncols())
    }
    fn all_finite(&self) -> bool {
        self.iter().all(|v| v.is_finite())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub iterations: usize,
    /// `‖r_k‖/‖b‖` for `k = 0..=iterations`.
    pub relative_residuals: Vec<f64>,
    pub converged: bool,
}

impl SolveReport {
    pub fn final_residual(&self) -> f64 {
        self.relative_residuals.last().copied().unwrap_or(0.0)
    }

    /// Iterations needed to first reach `tol`, if ever.
    pub fn iterations_to(&self, tol: f64) -> Option<usize> {
        self.relative_residuals.iter().position(|&r| r <= tol)
    }
}

/// Linear operator on a space, fallible so kernel errors propagate.
pub type Operator<'a, V> = dyn FnMut(&V) -> Result<V> + 'a;

struct CgTrace {
    alphas: Vec<f64>,
    betas: Vec<f64>,
}

fn check_finite<V: InnerProductSpace>(v: &V, what: &str) -> Result<()> {
    if v.all_finite() {
        Ok(())
    } else {
        Err(Error::Divergence(format!("non-finite {what}")))
    }
}

fn cg_core<V: InnerProductSpace>(
    op: &mut Operator<'_, V>,
    mut precond: Option<&mut Operator<'_, V>>,
    rhs: &V,
    tol: f64,
    maxiter: usize,
    trace: Option<&mut CgTrace>,
) -> Result<(V, SolveReport)> {
    if !(tol >= 0.0) {
        return Err(Error::InvalidParameter(format!("tolerance {tol} must be >= 0")));
    }
    check_finite(rhs, "right-hand side")?;
    let bnorm = rhs.norm2();
    let mut x = rhs.zeros_like();
    let mut report = SolveReport {
        iterations: 0,
        relative_residuals: vec![if bnorm == 0.0 { 0.0 } else { 1.0 }],
        converged: bnorm == 0.0,
    };
    if bnorm == 0.0 {
        return Ok((x, report));
    }
    let mut trace = trace;
    let mut r = rhs.clone();
    let mut z = match precond.as_mut() {
        Some(m) => m(&r)?,
        None => r.clone(),
    };
    let mut p = z.clone();
    let mut rz = r.inner(&z);
    for _ in 0..maxiter {
        let ap = op(&p)?;
        check_finite(&ap, "operator output")?;
        let pap = p.inner(&ap);
        if !(pap > 0.0) {
            if pap == 0.0 && rz == 0.0 {
                break;
            }
            return Err(Error::Divergence(format!(
                "search direction has non-positive curvature {pap:e}"
            )));
        }
        let alpha = rz / pap;
        x.add_scaled(alpha, &p);
        r.add_scaled(-alpha, &ap);
        report.iterations += 1;
        let mut rel = r.norm2() / bnorm;
        if !rel.is_finite() {
            return Err(Error::Divergence("residual became non-finite".into()));
        }
        if rel <= tol {
            // confirm against the true residual before stopping
            let mut tr = rhs.clone();
            tr.add_scaled(-1.0, &op(&x)?);
            let true_rel = tr.norm2() / bnorm;
            if true_rel <= tol {
                report.relative_residuals.push(true_rel);
                report.converged = true;
                if let Some(t) = trace.as_deref_mut() {
                    t.alphas.push(alpha);
                }
                return Ok((x, report));
            }
            r = tr;
            rel = true_rel;
        }
        report.relative_residuals.push(rel);
        z = match precond.as_mut() {
            Some(m) => m(&r)?,
            None => r.clone(),
        };
        let rz_new = r.inner(&z);
        let beta = rz_new / rz;
        if let Some(t) = trace.as_deref_mut() {
            t.alphas.push(alpha);
            t.betas.push(beta);
        }
        rz = rz_new;
        p.scale_mut(beta);
        p.add_scaled(1.0, &z);
    }
    Ok((x, report))
}

/// Solves `op(x) = rhs` for a self-adjoint positive operator, starting from
/// zero. Stops when the relative residual reaches `tol` or after `maxiter`
/// iterations, in which case `converged` is false.
pub fn pcg_solve<V: InnerProductSpace>(
    op: &mut Operator<'_, V>,
    precond: Option<&mut Operator<'_, V>>,
    rhs: &V,
    tol: f64,
    maxiter: usize,
) -> Result<(V, SolveReport)> {
    cg_core(op, precond, rhs, tol, maxiter, None)
}

/// Ratio of the extreme Ritz values of the (preconditioned) operator after
/// `steps` Lanczos steps from `start`.
pub fn estimate_condition_number<V: InnerProductSpace>(
    op: &mut Operator<'_, V>,
    precond: Option<&mut Operator<'_, V>>,
    start: &V,
    steps: usize,
) -> Result<f64> {
    let mut trace = CgTrace {
        alphas: Vec::new(),
        betas: Vec::new(),
    };
    cg_core(op, precond, start, 1e-14, steps.max(1), Some(&mut trace))?;
    let k = trace.alphas.len();
    if k == 0 {
        return Err(Error::InvalidParameter("condition estimate needs a nonzero start".into()));
    }
    let mut t = DMatrix::zeros(k, k);
    for j in 0..k {
        let a = trace.alphas[j];
        t[(j, j)] = 1.0 / a;
        if j > 0 {
            t[(j, j)] += trace.betas[j - 1] / trace.alphas[j - 1];
        }
        if j + 1 < k {
            let off = trace.betas[j].sqrt() / a;
            t[(j, j + 1)] = off;
            t[(j + 1, j)] = off;
        }
    }
    let eig = SymmetricEigen::new(t).eigenvalues;
    let max = eig.max();
    let min = eig.min();
    if !(min > 0.0) {
        return Err(Error::NotPositiveDefinite(format!("smallest Ritz value {min:e}")));
    }
    Ok(max / min)
}

/// Approximates `f(A) b` for symmetric `A` from a `k`-step Lanczos basis
/// with full reorthogonalization: `‖b‖ V_k f(T_k) e₁`.
pub fn lanczos_function(
    op: &mut dyn FnMut(&DVector<f64>) -> Result<DVector<f64>>,
    b: &DVector<f64>,
    k: usize,
    f: impl Fn(f64) -> f64,
) -> Result<DVector<f64>> {
    let bn = b.norm();
    if bn == 0.0 {
        return Ok(DVector::zeros(b.len()));
    }
    let (v, t) = lanczos(op, b, k)?;
    let m = t.nrows();
    let eig = SymmetricEigen::new(t);
    // f(T) e1 = U f(Λ) Uᵀ e1
    let mut coef = DVector::zeros(m);
    for i in 0..m {
        let ui0 = eig.eigenvectors[(0, i)];
        let fi = f(eig.eigenvalues[i]);
        for j in 0..m {
            coef[j] += eig.eigenvectors[(j, i)] * fi * ui0;
        }
    }
    Ok(v * coef * bn)
}

/// Lanczos tridiagonalization with full reorthogonalization. Returns the
/// orthonormal basis (columns) and the tridiagonal matrix; stops early on
/// an invariant subspace.
pub fn lanczos(
    op: &mut dyn FnMut(&DVector<f64>) -> Result<DVector<f64>>,
    b: &DVector<f64>,
    k: usize,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let n = b.len();
    let k = k.min(n).max(1);
    let mut basis: Vec<DVector<f64>> = vec![b / b.norm()];
    let mut alpha = Vec::new();
    let mut beta: Vec<f64> = Vec::new();
    for j in 0..k {
        let mut w = op(&basis[j])?;
        check_finite(&w, "Lanczos vector")?;
        let a = basis[j].dot(&w);
        alpha.push(a);
        // two passes of Gram-Schmidt against the whole basis
        for _ in 0..2 {
            for q in &basis {
                let c = q.dot(&w);
                w.axpy(-c, q, 1.0);
            }
        }
        let bnext = w.norm();
        if j + 1 == k || bnext <= 1e-12 * a.abs().max(1e-300) {
            break;
        }
        beta.push(bnext);
        basis.push(w / bnext);
    }
    let m = alpha.len();
    let mut v = DMatrix::zeros(n, m);
    for (j, q) in basis.iter().take(m).enumerate() {
        v.set_column(j, q);
    }
    let mut t = DMatrix::zeros(m, m);
    for j in 0..m {
        t[(j, j)] = alpha[j];
        if j + 1 < m {
            t[(j, j + 1)] = beta[j];
            t[(j + 1, j)] = beta[j];
        }
    }
    Ok((v, t))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn spd(p: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        let a = DMatrix::from_fn(p, p, |_, _| rng.random::<f64>() - 0.5);
        &a * a.transpose() + DMatrix::identity(p, p) * 0.5
    }

    #[test]
    fn identity_one_iteration() {
        let b = DVector::from_vec(vec![1.0, -2.0, 3.0]);
        let mut op = |x: &DVector<f64>| Ok(x.clone());
        let (x, rep) = pcg_solve(&mut op, None, &b, 1e-12, 10).unwrap();
        assert_eq!(rep.iterations, 1);
        assert!(rep.converged);
        assert!((x - b).norm() < 1e-15);
    }

    #[test]
    fn matches_dense_solve() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = spd(5, &mut rng);
        let b = DVector::from_fn(5, |_, _| rng.random::<f64>());
        let mut op = |x: &DVector<f64>| Ok(&a * x);
        let (x, rep) = pcg_solve(&mut op, None, &b, 1e-13, 50).unwrap();
        let want = a.clone().cholesky().unwrap().solve(&b);
        assert!(rep.converged);
        assert!((x - want).norm() < 1e-8);
    }

    #[test]
    fn finite_termination() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for p in [4, 16, 32] {
            // well-conditioned so roundoff does not delay termination
            let q = SymmetricEigen::new(spd(p, &mut rng)).eigenvectors;
            let d = DMatrix::from_diagonal(&DVector::from_fn(p, |i, _| 1.0 + i as f64 / p as f64));
            let a = &q * d * q.transpose();
            let b = DVector::from_fn(p, |_, _| rng.random::<f64>());
            let mut op = |x: &DVector<f64>| Ok(&a * x);
            let (_, rep) = pcg_solve(&mut op, None, &b, 1e-10, p).unwrap();
            assert!(rep.converged, "p = {p}");
        }
    }

    #[test]
    fn preconditioner_and_matrix_space() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let d = DVector::from_fn(6, |i, _| 10f64.powi(i as i32 % 4));
        let b = DMatrix::from_fn(6, 6, |_, _| rng.random::<f64>());
        let b = &b + b.transpose();
        let dd = d.clone();
        // S -> D S D on symmetric matrices
        let mut op = move |s: &DMatrix<f64>| Ok(DMatrix::from_fn(6, 6, |i, j| dd[i] * s[(i, j)] * dd[j]));
        let mut plain = op.clone();
        let mut pre = |s: &DMatrix<f64>| Ok(DMatrix::from_fn(6, 6, |i, j| s[(i, j)] / (d[i] * d[j])));
        let (x, rep) = pcg_solve(&mut op, Some(&mut pre), &b, 1e-12, 100).unwrap();
        assert!(rep.converged);
        assert_eq!(rep.iterations, 1);
        let (_, rep2) = pcg_solve(&mut plain, None, &b, 1e-12, 100).unwrap();
        assert!(rep2.iterations > 1);
        let check = DMatrix::from_fn(6, 6, |i, j| d[i] * x[(i, j)] * d[j]);
        assert!((check - b).norm() < 1e-9);
    }

    #[test]
    fn maxiter_and_divergence() {
        let a = DMatrix::from_diagonal(&DVector::from_fn(20, |i, _| 1.0 + i as f64));
        let b = DVector::from_element(20, 1.0);
        let mut op = |x: &DVector<f64>| Ok(&a * x);
        let (_, rep) = pcg_solve(&mut op, None, &b, 1e-14, 3).unwrap();
        assert!(!rep.converged);
        assert_eq!(rep.relative_residuals.len(), 4);
        let mut bad = |x: &DVector<f64>| Ok(x * f64::NAN);
        assert!(matches!(pcg_solve(&mut bad, None, &b, 1e-6, 3), Err(Error::Divergence(_))));
        let zero = DVector::zeros(20);
        let (x, rep) = pcg_solve(&mut op, None, &zero, 1e-6, 3).unwrap();
        assert!(rep.converged && x.norm() == 0.0);
    }

    #[test]
    fn condition_numbers() {
        let b = DVector::from_fn(10, |i, _| 1.0 + (i as f64).sin());
        let mut id = |x: &DVector<f64>| Ok(x.clone());
        let k = estimate_condition_number(&mut id, None, &b, 20).unwrap();
        assert!((k - 1.0).abs() < 1e-6);
        let a = DMatrix::from_diagonal(&DVector::from_fn(10, |i, _| 1.0 + i as f64));
        let mut op = |x: &DVector<f64>| Ok(&a * x);
        let k = estimate_condition_number(&mut op, None, &b, 30).unwrap();
        assert!((k - 10.0).abs() < 0.5, "{k}");
    }

    #[test]
    fn lanczos_sqrt_matches_dense() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = spd(12, &mut rng);
        let b = DVector::from_fn(12, |_, _| rng.random::<f64>());
        let eig = SymmetricEigen::new(a.clone());
        let sq = &eig.eigenvectors
            * DMatrix::from_diagonal(&eig.eigenvalues.map(f64::sqrt))
            * eig.eigenvectors.transpose();
        let mut op = |x: &DVector<f64>| Ok(&a * x);
        let got = lanczos_function(&mut op, &b, 12, f64::sqrt).unwrap();
        assert!((got - sq * &b).norm() < 1e-9 * b.norm());
    }
}
