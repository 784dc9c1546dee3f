//! Marčenko–Pastur spiked-model formulas and the Frobenius-optimal
//! eigenvalue shrinker, applied to the covariance right-hand side.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::solver::{lanczos, lanczos_function};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpikedModelParams {
    gamma: f64,
    sigma2: f64,
}

impl SpikedModelParams {
    pub fn new(gamma: f64, sigma2: f64) -> Result<Self> {
        if !(gamma > 0.0 && gamma.is_finite()) {
            return Err(Error::InvalidParameter(format!("aspect ratio {gamma} must be positive")));
        }
        if !(sigma2 > 0.0 && sigma2.is_finite()) {
            return Err(Error::InvalidParameter(format!("noise variance {sigma2} must be positive")));
        }
        Ok(Self { gamma, sigma2 })
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn sigma2(&self) -> f64 {
        self.sigma2
    }

    /// Upper edge of the noise bulk, `σ²(1+√γ)²`.
    pub fn edge(&self) -> f64 {
        self.sigma2 * (1.0 + self.gamma.sqrt()).powi(2)
    }

    /// Sample eigenvalue produced by a population spike `ℓ` (excess over
    /// `σ²`).
    pub fn lambda(&self, ell: f64) -> f64 {
        (self.sigma2 + ell) * (1.0 + self.gamma * self.sigma2 / ell)
    }

    /// Inverse of [`lambda`](Self::lambda) above the edge.
    pub fn ell(&self, lambda: f64) -> f64 {
        let s2 = self.sigma2;
        let t = lambda + s2 * (1.0 - self.gamma);
        // t² − 4σ²λ factored through the bulk edges to avoid cancellation
        let rg = self.gamma.sqrt();
        let disc = ((lambda - s2 * (1.0 + rg).powi(2)) * (lambda - s2 * (1.0 - rg).powi(2))).max(0.0);
        0.5 * (t + disc.sqrt()) - s2
    }

    /// Squared cosine between the sample and population eigenvectors.
    pub fn corr(&self, ell: f64) -> f64 {
        let (g, s2) = (self.gamma, self.sigma2);
        (1.0 - g * s2 * s2 / (ell * ell)) / (1.0 + g * s2 / ell)
    }
}

/// Frobenius-optimal shrinker: `ℓ(λ)·c(ℓ(λ))` above the edge, 0 below.
pub fn mp_shrinker(lambda: f64, params: &SpikedModelParams) -> Result<f64> {
    if !(lambda >= 0.0) {
        return Err(Error::InvalidEigenvalue(lambda));
    }
    if lambda <= params.edge() {
        return Ok(0.0);
    }
    let ell = params.ell(lambda);
    Ok((ell * params.corr(ell)).max(0.0))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShrinkOptions {
    /// Largest `p` handled by dense eigendecomposition of `A_n`.
    pub dense_cutoff: usize,
    /// Lanczos steps per matrix-function application on the Krylov path.
    pub lanczos_steps: usize,
}

impl Default for ShrinkOptions {
    fn default() -> Self {
        Self {
            dense_cutoff: 4096,
            lanczos_steps: 40,
        }
    }
}

/// Symmetric eigendecomposition sorted by descending eigenvalue, with
/// each eigenvector's first nonzero entry made positive.
pub fn sym_eigen_desc(s: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let eig = SymmetricEigen::new(s.clone());
    let p = s.nrows();
    let mut order: Vec<usize> = (0..p).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let vals = DVector::from_fn(p, |i, _| eig.eigenvalues[order[i]]);
    let mut vecs = DMatrix::zeros(p, p);
    for (j, &o) in order.iter().enumerate() {
        let mut col = eig.eigenvectors.column(o).into_owned();
        fix_sign(&mut col);
        vecs.set_column(j, &col);
    }
    (vals, vecs)
}

pub(crate) fn fix_sign(v: &mut DVector<f64>) {
    let tol = 1e-12 * v.amax();
    if let Some(first) = v.iter().find(|x| x.abs() > tol) {
        if *first < 0.0 {
            v.neg_mut();
        }
    }
}

/// `B^(s) = A^{1/2} ρ(A^{-1/2} B A^{-1/2} + σ²I) A^{1/2}` with `γ = p/n`.
///
/// `apply_a` applies the SPD matrix `A_n`. For `p` up to
/// `opts.dense_cutoff`, `A_n` is assembled densely; beyond it, `A^{±1/2}`
/// are applied through Lanczos matrix functions.
pub fn shrink_bn(
    bn: &DMatrix<f64>,
    apply_a: &mut dyn FnMut(&DVector<f64>) -> Result<DVector<f64>>,
    sigma: f64,
    gamma: f64,
    opts: &ShrinkOptions,
) -> Result<DMatrix<f64>> {
    let p = bn.nrows();
    let params = SpikedModelParams::new(gamma, sigma * sigma)?;
    if p <= opts.dense_cutoff {
        let mut a = DMatrix::zeros(p, p);
        let mut e = DVector::zeros(p);
        for j in 0..p {
            e[j] = 1.0;
            a.set_column(j, &apply_a(&e)?);
            e[j] = 0.0;
        }
        let a = (&a + a.transpose()) * 0.5;
        let eig = SymmetricEigen::new(a);
        let min = eig.eigenvalues.min();
        if !(min > 0.0) {
            return Err(Error::NotPositiveDefinite(format!(
                "A_n has eigenvalue {min:e}; shrinkage needs a positive regularizer"
            )));
        }
        let u = &eig.eigenvectors;
        let half = u * DMatrix::from_diagonal(&eig.eigenvalues.map(f64::sqrt)) * u.transpose();
        let inv_half = u * DMatrix::from_diagonal(&eig.eigenvalues.map(|l| 1.0 / l.sqrt())) * u.transpose();
        let whitened = &inv_half * bn * &inv_half;
        let kept = shrink_whitened(&whitened, &params)?;
        let mut out = DMatrix::zeros(p, p);
        for (rho, u) in kept {
            let w = &half * u;
            out.ger(rho, &w, &w, 1.0);
        }
        Ok((&out + out.transpose()) * 0.5)
    } else {
        let k = opts.lanczos_steps;
        let probe = DVector::from_fn(p, |i, _| 1.0 + (i as f64 * 0.618_033_988_749_895).fract());
        let (_, t) = lanczos(apply_a, &probe, k)?;
        let min = SymmetricEigen::new(t).eigenvalues.min();
        if !(min > 0.0) {
            return Err(Error::NotPositiveDefinite(format!(
                "A_n has Ritz value {min:e}; shrinkage needs a positive regularizer"
            )));
        }
        let mut whitened = DMatrix::zeros(p, p);
        // A^{-1/2} B A^{-1/2}: whiten columns, then rows
        let mut tmp = DMatrix::zeros(p, p);
        for j in 0..p {
            let col = bn.column(j).into_owned();
            let w = lanczos_function(apply_a, &col, k, |l| 1.0 / l.max(f64::MIN_POSITIVE).sqrt())?;
            tmp.set_column(j, &w);
        }
        let tmp_t = tmp.transpose();
        for j in 0..p {
            let col = tmp_t.column(j).into_owned();
            let w = lanczos_function(apply_a, &col, k, |l| 1.0 / l.max(f64::MIN_POSITIVE).sqrt())?;
            whitened.set_column(j, &w);
        }
        let whitened = (&whitened + whitened.transpose()) * 0.5;
        let kept = shrink_whitened(&whitened, &params)?;
        let mut out = DMatrix::zeros(p, p);
        for (rho, u) in kept {
            let w = lanczos_function(apply_a, &u, k, |l| l.max(0.0).sqrt())?;
            out.ger(rho, &w, &w, 1.0);
        }
        Ok((&out + out.transpose()) * 0.5)
    }
}

/// Eigenpairs of `W + σ²I` whose shrunk value is positive.
fn shrink_whitened(w: &DMatrix<f64>, params: &SpikedModelParams) -> Result<Vec<(f64, DVector<f64>)>> {
    let (vals, vecs) = sym_eigen_desc(w);
    let mut kept = Vec::new();
    for (i, &l) in vals.iter().enumerate() {
        let lam = l + params.sigma2();
        if lam <= params.edge() {
            break;
        }
        let rho = mp_shrinker(lam, params)?;
        if rho > 0.0 {
            kept.push((rho, vecs.column(i).into_owned()));
        }
    }
    Ok(kept)
}
