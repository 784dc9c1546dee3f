//! Least-squares mean and covariance estimators, eigen-analysis and rank
//! selection.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::basis::{BasisSpec, VolumeCoeffs};
use crate::error::{Error, Result};
use crate::imaging::{backproject, median, project, ImageStack, ImagingOperator};
use crate::kernel::{
    apply_an, apply_circulant_inverse, apply_circulant_inverse_matrix, apply_ln, circulant_approx3,
    circulant_approx6, covar_kernel, dense_an, mean_kernel, symmetrize, Kernel3D, Kernel6D, Precision,
};
use crate::shrinkage::{shrink_bn, sym_eigen_desc, ShrinkOptions};
use crate::solver::{pcg_solve, Operator, SolveReport};

/// Dense `p x p` symmetric covariance estimate.
pub type CovarianceMatrix = DMatrix<f64>;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolverOptions {
    pub tol: f64,
    pub maxiter: usize,
    pub precondition: bool,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            tol: 1e-6,
            maxiter: 500,
            precondition: true,
        }
    }
}

impl SolverOptions {
    fn validate(&self) -> Result<()> {
        if !(self.tol > 0.0) || self.maxiter < 1 {
            return Err(Error::InvalidParameter(format!(
                "need tol > 0 and maxiter >= 1, got {} and {}",
                self.tol, self.maxiter
            )));
        }
        Ok(())
    }
}

fn check_stack(basis: &BasisSpec, images: &ImageStack, ops: &[ImagingOperator]) -> Result<()> {
    if images.len() != ops.len() {
        return Err(Error::Dimension(format!(
            "{} images but {} operators",
            images.len(),
            ops.len()
        )));
    }
    if images.edge() != basis.n() {
        return Err(Error::Dimension(format!(
            "images are {}x{} but the basis grid is N={}",
            images.edge(),
            images.edge(),
            basis.n()
        )));
    }
    if ops.is_empty() {
        return Err(Error::InvalidParameter("no images".into()));
    }
    Ok(())
}

/// `b_n = (1/n) Σ Pᵀ y_s`.
pub fn compute_bn(basis: &BasisSpec, images: &ImageStack, ops: &[ImagingOperator]) -> Result<VolumeCoeffs> {
    check_stack(basis, images, ops)?;
    let mut b = VolumeCoeffs::zeros(basis.p());
    for (y, op) in images.iter().zip(ops) {
        b += backproject(basis, y, op)?;
    }
    Ok(b / ops.len() as f64)
}

/// Solves `A_n μ = b_n` given the mean kernel.
pub fn solve_mean(
    basis: &BasisSpec,
    f: &Kernel3D,
    nu: f64,
    bn: &VolumeCoeffs,
    opts: &SolverOptions,
) -> Result<(VolumeCoeffs, SolveReport)> {
    opts.validate()?;
    if !(nu >= 0.0) {
        return Err(Error::InvalidParameter(format!("nu {nu} must be >= 0")));
    }
    let mut op = |x: &DVector<f64>| apply_an(basis, f, nu, x);
    if opts.precondition {
        let g = circulant_approx3(f, nu);
        g.check_invertible()?;
        let mut pre = |x: &DVector<f64>| apply_circulant_inverse(basis, &g, x);
        pcg_solve(&mut op, Some(&mut pre as &mut Operator<'_, _>), bn, opts.tol, opts.maxiter)
    } else {
        pcg_solve(&mut op, None, bn, opts.tol, opts.maxiter)
    }
}

/// Least-squares mean: builds `f_n` and `b_n`, then runs PCG.
pub fn estimate_mean(
    basis: &BasisSpec,
    images: &ImageStack,
    ops: &[ImagingOperator],
    nu: f64,
    opts: &SolverOptions,
) -> Result<(VolumeCoeffs, SolveReport)> {
    let bn = compute_bn(basis, images, ops)?;
    let f = mean_kernel(basis, ops)?;
    solve_mean(basis, &f, nu, &bn, opts)
}

/// `B_n = (1/n) Σ [Pᵀ(y − Pμ)][Pᵀ(y − Pμ)]ᵀ − σ² Ā`, with `Ā` assembled
/// densely from the mean kernel.
pub fn compute_cov_rhs(
    basis: &BasisSpec,
    images: &ImageStack,
    ops: &[ImagingOperator],
    mean: &VolumeCoeffs,
    sigma: f64,
    f: &Kernel3D,
) -> Result<CovarianceMatrix> {
    check_stack(basis, images, ops)?;
    if !(sigma >= 0.0) {
        return Err(Error::InvalidParameter(format!("sigma {sigma} must be >= 0")));
    }
    let p = basis.p();
    const BLOCK: usize = 256;
    let mut b = DMatrix::zeros(p, p);
    let mut z = DMatrix::zeros(p, BLOCK);
    let n = ops.len();
    let inv = 1.0 / n as f64;
    for start in (0..n).step_by(BLOCK) {
        let end = (start + BLOCK).min(n);
        for s in start..end {
            let op = &ops[s];
            let pm = project(basis, mean.as_slice(), op)?;
            let resid: Vec<f64> = images.image(s).iter().zip(&pm).map(|(y, m)| y - m).collect();
            z.set_column(s - start, &backproject(basis, &resid, op)?);
        }
        let zb = z.columns(0, end - start);
        b.gemm(inv, &zb, &zb.transpose(), 1.0);
    }
    if sigma > 0.0 {
        b -= dense_an(basis, f, 0.0)? * (sigma * sigma);
    }
    symmetrize(&mut b);
    Ok(b)
}

/// Solves `L_n(Σ) = B` over symmetric matrices given the covariance kernel.
pub fn solve_covariance(
    basis: &BasisSpec,
    big_f: &Kernel6D,
    xi: f64,
    b: &CovarianceMatrix,
    opts: &SolverOptions,
) -> Result<(CovarianceMatrix, SolveReport)> {
    opts.validate()?;
    if !(xi >= 0.0) {
        return Err(Error::InvalidParameter(format!("xi {xi} must be >= 0")));
    }
    let mut op = |s: &DMatrix<f64>| apply_ln(basis, big_f, xi, s);
    let (mut sigma, report) = if opts.precondition {
        let g = circulant_approx6(big_f, xi);
        g.check_invertible()?;
        let mut pre = |s: &DMatrix<f64>| apply_circulant_inverse_matrix(basis, &g, s);
        pcg_solve(&mut op, Some(&mut pre as &mut Operator<'_, _>), b, opts.tol, opts.maxiter)?
    } else {
        pcg_solve(&mut op, None, b, opts.tol, opts.maxiter)?
    };
    symmetrize(&mut sigma);
    Ok((sigma, report))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CovarianceOptions {
    pub xi: f64,
    /// Regularizer of `A_n` used when whitening for shrinkage.
    pub nu: f64,
    pub shrink: bool,
    pub precision: Precision,
    pub solver: SolverOptions,
    pub shrink_opts: ShrinkOptions,
}

impl Default for CovarianceOptions {
    fn default() -> Self {
        Self {
            xi: 0.0,
            nu: 0.0,
            shrink: false,
            precision: Precision::F64,
            solver: SolverOptions::default(),
            shrink_opts: ShrinkOptions::default(),
        }
    }
}

/// Default covariance regularizer, `2⁻¹⁰` times the squared kernel peak.
pub fn default_xi(f: &Kernel3D) -> f64 {
    let peak = f.at([0, 0, 0]);
    peak * peak / 1024.0
}

/// Right-hand side, optionally shrunk, for the covariance normal equations.
pub fn covariance_rhs(
    basis: &BasisSpec,
    images: &ImageStack,
    ops: &[ImagingOperator],
    mean: &VolumeCoeffs,
    sigma: f64,
    f: &Kernel3D,
    opts: &CovarianceOptions,
) -> Result<CovarianceMatrix> {
    let b = compute_cov_rhs(basis, images, ops, mean, sigma, f)?;
    if !opts.shrink {
        return Ok(b);
    }
    if !(sigma > 0.0) {
        return Err(Error::UndefinedSnr);
    }
    let gamma = basis.p() as f64 / ops.len() as f64;
    let mut a = |x: &DVector<f64>| apply_an(basis, f, opts.nu, x);
    shrink_bn(&b, &mut a, sigma, gamma, &opts.shrink_opts)
}

/// Covariance estimate: builds `F_n`, `B_n` (or its shrunk variant) and
/// solves with the circulant-preconditioned CG.
pub fn estimate_covariance(
    basis: &BasisSpec,
    images: &ImageStack,
    ops: &[ImagingOperator],
    mean: &VolumeCoeffs,
    sigma: f64,
    opts: &CovarianceOptions,
) -> Result<(CovarianceMatrix, SolveReport)> {
    let f = mean_kernel(basis, ops)?;
    let b = covariance_rhs(basis, images, ops, mean, sigma, &f, opts)?;
    let big_f = covar_kernel(basis, ops, opts.precision)?;
    solve_covariance(basis, &big_f, opts.xi, &b, &opts.solver)
}

/// Top `r` eigenpairs by algebraic value, descending.
pub fn top_eigs(s: &CovarianceMatrix, r: usize) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let p = s.nrows();
    if r > p || s.ncols() != p {
        return Err(Error::Dimension(format!("cannot take {r} eigenpairs of a {}x{} matrix", p, s.ncols())));
    }
    let (vals, vecs) = sym_eigen_desc(s);
    Ok((vecs.columns(0, r).into_owned(), vals.rows(0, r).into_owned()))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RankSelection {
    Rank(usize),
    NoKnee,
}

/// Knee of a descending spectrum: the largest gap ratio `λ_m/λ_{m+1}` over
/// `m ≤ p/2`, with the denominator floored at the median eigenvalue
/// magnitude so that bulk values near or below zero do not produce spurious
/// gaps. A best ratio below 2 is no knee.
pub fn select_rank(eigvals: &[f64]) -> Result<RankSelection> {
    let p = eigvals.len();
    if p < 3 {
        return Err(Error::InvalidParameter("rank selection needs at least 3 eigenvalues".into()));
    }
    let mut mags: Vec<f64> = eigvals.iter().map(|x| x.abs()).collect();
    let floor = median(&mut mags).max(f64::MIN_POSITIVE);
    let mut best = (0usize, 0.0f64);
    for m in 1..=(p / 2) {
        let ratio = eigvals[m - 1] / eigvals[m].max(floor);
        if ratio > best.1 {
            best = (m, ratio);
        }
    }
    if best.0 == 0 || best.1 < 2.0 {
        return Ok(RankSelection::NoKnee);
    }
    Ok(RankSelection::Rank(best.0))
}

/// Mean plus the leading eigenpairs of a covariance estimate.
#[derive(Clone, Debug, PartialEq)]
pub struct LowRankModel {
    pub mean: VolumeCoeffs,
    pub eigvecs: DMatrix<f64>,
    pub eigvals: DVector<f64>,
}

impl LowRankModel {
    pub fn new(mean: VolumeCoeffs, eigvecs: DMatrix<f64>, eigvals: DVector<f64>) -> Result<Self> {
        if eigvecs.nrows() != mean.len() || eigvecs.ncols() != eigvals.len() {
            return Err(Error::Dimension("low-rank model shapes disagree".into()));
        }
        Ok(Self {
            mean,
            eigvecs,
            eigvals,
        })
    }

    /// Top `r` eigenpairs of `s`, dropping eigenvalues that are non-positive
    /// up to rounding (`p·ε·λ_max`).
    pub fn from_covariance(mean: VolumeCoeffs, s: &CovarianceMatrix, r: usize) -> Result<Self> {
        let (v, l) = top_eigs(s, r)?;
        let floor = l.iter().fold(0.0f64, |m, x| m.max(x.abs())) * s.nrows() as f64 * f64::EPSILON;
        let keep = l.iter().take_while(|&&x| x > floor).count();
        Self::new(mean, v.columns(0, keep).into_owned(), l.rows(0, keep).into_owned())
    }

    pub fn rank(&self) -> usize {
        self.eigvals.len()
    }
}
