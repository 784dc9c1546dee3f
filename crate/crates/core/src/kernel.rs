//! Convolution kernels for the projection-backprojection operators and
//! their circulant preconditioners.
//!
//! `A_n x = Qᵀ(Qx * f_n) + νx` and `L_n(Σ) = Qᵀ(QΣQᵀ * F_n)Q + ξΣ`, where
//! the convolutions are linear (zero padded) over the basis support box of
//! edge `s`. Kernels are stored on offsets `-(s-1)..=(s-1)` per axis.

use std::f64::consts::PI;
use std::fmt;
use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::basis::{check_grid, BasisSpec, VolumeCoeffs};
use crate::error::{Error, Result};
use crate::fft::{PaddedConv, PeriodicConv};
use crate::imaging::ImagingOperator;

/// Largest grid accepted for a double-precision 6D kernel.
pub const MAX_N_F64: usize = 10;
/// Largest grid accepted for a single-precision 6D kernel.
pub const MAX_N_F32: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F64,
    F32,
}

impl std::str::FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f64" | "double" => Ok(Precision::F64),
            "f32" | "single" => Ok(Precision::F32),
            other => Err(Error::InvalidParameter(format!("unknown precision '{other}'"))),
        }
    }
}

/// Offset `m` of flat index `i` along one axis of a `(2s-1)`-wide kernel.
#[inline]
fn offset(i: usize, s: usize) -> i64 {
    i as i64 - (s as i64 - 1)
}

fn check_even(values: &[f64], k: usize, dim: usize, what: &str) -> Result<()> {
    let total = values.len();
    let scale = values.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
    for (i, &v) in values.iter().enumerate() {
        // mirror of i: each digit d -> k-1-d
        let mut rem = i;
        let mut mirror = 0;
        let mut place = 1;
        for _ in 0..dim {
            let d = rem % k;
            rem /= k;
            mirror += (k - 1 - d) * place;
            place *= k;
        }
        debug_assert!(mirror < total);
        if (values[mirror] - v).abs() > 1e-10 * scale {
            return Err(Error::InvalidParameter(format!("{what} kernel is not even")));
        }
    }
    Ok(())
}

/// Mean kernel `f_n` on `(2s-1)^3` offsets.
pub struct Kernel3D {
    n: usize,
    s: usize,
    values: Vec<f64>,
    conv: OnceLock<PaddedConv<f64>>,
}

impl Clone for Kernel3D {
    fn clone(&self) -> Self {
        Self {
            n: self.n,
            s: self.s,
            values: self.values.clone(),
            conv: OnceLock::new(),
        }
    }
}

impl fmt::Debug for Kernel3D {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Kernel3D")
            .field("n", &self.n)
            .field("s", &self.s)
            .field("len", &self.values.len())
            .finish()
    }
}

impl Kernel3D {
    /// Builds a kernel from explicit values; they must be even.
    pub fn from_values(n: usize, s: usize, values: Vec<f64>) -> Result<Self> {
        let k = 2 * s - 1;
        if values.len() != k.pow(3) {
            return Err(Error::Dimension(format!(
                "3D kernel with support {s} needs {} values, got {}",
                k.pow(3),
                values.len()
            )));
        }
        check_even(&values, k, 3, "3D")?;
        Ok(Self {
            n,
            s,
            values,
            conv: OnceLock::new(),
        })
    }

    /// Unit impulse at the origin.
    pub fn delta(n: usize, s: usize) -> Self {
        let k = 2 * s - 1;
        let mut values = vec![0.0; k.pow(3)];
        values[k.pow(3) / 2] = 1.0;
        Self {
            n,
            s,
            values,
            conv: OnceLock::new(),
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Edge of the support box the kernel acts on.
    pub fn support_edge(&self) -> usize {
        self.s
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Value at offset `m`, each component in `-(s-1)..=(s-1)`.
    pub fn at(&self, m: [i64; 3]) -> f64 {
        let k = 2 * self.s - 1;
        let c = |v: i64| (v + self.s as i64 - 1) as usize;
        self.values[(c(m[0]) * k + c(m[1])) * k + c(m[2])]
    }

    fn conv(&self) -> &PaddedConv<f64> {
        self.conv.get_or_init(|| PaddedConv::new(3, self.s, &self.values))
    }

    /// Linear convolution of a support-box volume with the kernel.
    pub fn convolve(&self, v: &[f64]) -> Vec<f64> {
        self.conv().apply(v)
    }
}

#[derive(Clone)]
enum KernelData {
    F64(Vec<f64>),
    F32(Vec<f32>),
}

enum ConvCache {
    F64(PaddedConv<f64>),
    F32(PaddedConv<f32>),
}

/// Covariance kernel `F_n` on `(2s-1)^6` offsets, stored with the first
/// three axes for `i₁` and the last three for `i₂`.
pub struct Kernel6D {
    n: usize,
    s: usize,
    data: KernelData,
    conv: OnceLock<ConvCache>,
}

impl Clone for Kernel6D {
    fn clone(&self) -> Self {
        Self {
            n: self.n,
            s: self.s,
            data: self.data.clone(),
            conv: OnceLock::new(),
        }
    }
}

impl fmt::Debug for Kernel6D {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Kernel6D")
            .field("n", &self.n)
            .field("s", &self.s)
            .field("precision", &self.precision())
            .finish()
    }
}

impl Kernel6D {
    pub fn from_values(n: usize, s: usize, values: Vec<f64>, precision: Precision) -> Result<Self> {
        let k = 2 * s - 1;
        if values.len() != k.pow(6) {
            return Err(Error::Dimension(format!(
                "6D kernel with support {s} needs {} values, got {}",
                k.pow(6),
                values.len()
            )));
        }
        check_even(&values, k, 6, "6D")?;
        Ok(Self::wrap(n, s, values, precision))
    }

    fn wrap(n: usize, s: usize, values: Vec<f64>, precision: Precision) -> Self {
        let data = match precision {
            Precision::F64 => KernelData::F64(values),
            Precision::F32 => KernelData::F32(values.into_iter().map(|v| v as f32).collect()),
        };
        Self {
            n,
            s,
            data,
            conv: OnceLock::new(),
        }
    }

    pub fn delta(n: usize, s: usize, precision: Precision) -> Self {
        let k = 2 * s - 1;
        let mut values = vec![0.0; k.pow(6)];
        values[k.pow(6) / 2] = 1.0;
        Self::wrap(n, s, values, precision)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn support_edge(&self) -> usize {
        self.s
    }

    pub fn precision(&self) -> Precision {
        match self.data {
            KernelData::F64(_) => Precision::F64,
            KernelData::F32(_) => Precision::F32,
        }
    }

    pub fn len(&self) -> usize {
        (2 * self.s - 1).pow(6)
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Values widened to `f64`.
    pub fn values_f64(&self) -> Vec<f64> {
        match &self.data {
            KernelData::F64(v) => v.clone(),
            KernelData::F32(v) => v.iter().map(|&x| x as f64).collect(),
        }
    }

    /// Value at `(i₁, i₂)` offsets.
    pub fn at(&self, i1: [i64; 3], i2: [i64; 3]) -> f64 {
        let k = 2 * self.s - 1;
        let c = |v: i64| (v + self.s as i64 - 1) as usize;
        let a = (c(i1[0]) * k + c(i1[1])) * k + c(i1[2]);
        let b = (c(i2[0]) * k + c(i2[1])) * k + c(i2[2]);
        let idx = a * k.pow(3) + b;
        match &self.data {
            KernelData::F64(v) => v[idx],
            KernelData::F32(v) => v[idx] as f64,
        }
    }

    fn conv(&self) -> &ConvCache {
        self.conv.get_or_init(|| match &self.data {
            KernelData::F64(v) => ConvCache::F64(PaddedConv::new(6, self.s, v)),
            KernelData::F32(v) => ConvCache::F32(PaddedConv::new(6, self.s, v)),
        })
    }

    /// Linear 6D convolution of an `s^3 x s^3` array (C order).
    pub fn convolve(&self, v: &[f64]) -> Vec<f64> {
        match self.conv() {
            ConvCache::F64(c) => c.apply(v),
            ConvCache::F32(c) => {
                let x: Vec<f32> = v.iter().map(|&a| a as f32).collect();
                c.apply(&x).into_iter().map(|a| a as f64).collect()
            }
        }
    }
}

fn check_ops(basis: &BasisSpec, ops: &[ImagingOperator]) -> Result<()> {
    if ops.is_empty() {
        return Err(Error::InvalidParameter("kernel needs at least one image".into()));
    }
    for op in ops {
        check_grid(basis, op.grid)?;
    }
    Ok(())
}

/// Per-image kernel `k_s` on `(2s-1)^3` offsets, written into `out`.
fn image_kernel(op: &ImagingOperator, s: usize, out: &mut [f64]) {
    let n = op.grid.n() as f64;
    let k = 2 * s - 1;
    let ctf = op.ctf_grid();
    let freqs = op.grid.image_freqs();
    let mut acc = vec![Complex64::new(0.0, 0.0); k * k * k];
    let mut e = [
        vec![Complex64::new(0.0, 0.0); k],
        vec![Complex64::new(0.0, 0.0); k],
        vec![Complex64::new(0.0, 0.0); k],
    ];
    let mut e01 = vec![Complex64::new(0.0, 0.0); k * k];
    for (q, kk) in freqs.iter().enumerate() {
        let w2 = ctf[q] * ctf[q];
        if w2 == 0.0 {
            continue;
        }
        let w = op.rotation.slice_point(kk[0] as f64, kk[1] as f64);
        for a in 0..3 {
            for (i, v) in e[a].iter_mut().enumerate() {
                *v = Complex64::from_polar(1.0, 2.0 * PI * offset(i, s) as f64 * w[a] / n);
            }
        }
        for i0 in 0..k {
            let t = e[0][i0] * w2;
            for i1 in 0..k {
                e01[i0 * k + i1] = t * e[1][i1];
            }
        }
        for (ab, &t) in e01.iter().enumerate() {
            let row = &mut acc[ab * k..(ab + 1) * k];
            for (r, &c) in row.iter_mut().zip(&e[2]) {
                *r += t * c;
            }
        }
    }
    let scale = 1.0 / n.powi(4);
    for (o, a) in out.iter_mut().zip(&acc) {
        *o = a.re * scale;
    }
}

/// `f_n = (1/n) Σ_s k_s`.
pub fn mean_kernel(basis: &BasisSpec, ops: &[ImagingOperator]) -> Result<Kernel3D> {
    check_ops(basis, ops)?;
    let s = basis.support().edge;
    let len = (2 * s - 1).pow(3);
    let mut total = vec![0.0; len];
    let mut ks = vec![0.0; len];
    for op in ops {
        image_kernel(op, s, &mut ks);
        for (t, v) in total.iter_mut().zip(&ks) {
            *t += v;
        }
    }
    let inv = 1.0 / ops.len() as f64;
    total.iter_mut().for_each(|v| *v *= inv);
    Ok(Kernel3D {
        n: basis.n(),
        s,
        values: total,
        conv: OnceLock::new(),
    })
}

/// Refuses grids whose 6D kernel would exceed the memory policy.
pub fn check_kernel6_budget(n: usize, precision: Precision) -> Result<()> {
    let limit = match precision {
        Precision::F64 => MAX_N_F64,
        Precision::F32 => MAX_N_F32,
    };
    if n > limit {
        return Err(Error::Resource(format!(
            "6D kernel at N={n} exceeds the {precision:?} limit N <= {limit}"
        )));
    }
    Ok(())
}

/// `F_n = (1/n) Σ_s k_s ⊗ k_s`, accumulated in blocks of images.
pub fn covar_kernel(basis: &BasisSpec, ops: &[ImagingOperator], precision: Precision) -> Result<Kernel6D> {
    check_ops(basis, ops)?;
    check_kernel6_budget(basis.n(), precision)?;
    let s = basis.support().edge;
    let len = (2 * s - 1).pow(3);
    const BLOCK: usize = 256;
    let mut f = DMatrix::<f64>::zeros(len, len);
    let mut block = DMatrix::<f64>::zeros(len, BLOCK);
    let inv = 1.0 / ops.len() as f64;
    for chunk in ops.chunks(BLOCK) {
        for (c, op) in chunk.iter().enumerate() {
            let col = block.column_mut(c);
            let slice = col.data.into_slice_mut();
            image_kernel(op, s, slice);
        }
        let b = block.columns(0, chunk.len());
        f.gemm(inv, &b, &b.transpose(), 1.0);
    }
    // the GEMM is not bit-symmetric
    for i in 0..len {
        for j in 0..i {
            let m = 0.5 * (f[(i, j)] + f[(j, i)]);
            f[(i, j)] = m;
            f[(j, i)] = m;
        }
    }
    Ok(Kernel6D::wrap(basis.n(), s, f.as_slice().to_vec(), precision))
}

fn check_support(basis: &BasisSpec, s: usize) -> Result<()> {
    if basis.support().edge != s {
        return Err(Error::Dimension(format!(
            "kernel support {s} does not match basis support {}",
            basis.support().edge
        )));
    }
    Ok(())
}

/// `A_n x = Qᵀ(Qx * f) + νx`.
pub fn apply_an(basis: &BasisSpec, f: &Kernel3D, nu: f64, x: &VolumeCoeffs) -> Result<VolumeCoeffs> {
    check_support(basis, f.s)?;
    let v = basis.evaluate_support(x.as_slice())?;
    let w = f.convolve(&v);
    let mut out = basis.expand_support(&w)?;
    if nu != 0.0 {
        out.axpy(nu, x, 1.0);
    }
    Ok(out)
}

fn check_square(s: &DMatrix<f64>, p: usize) -> Result<()> {
    if s.nrows() != p || s.ncols() != p {
        return Err(Error::Dimension(format!(
            "expected {p}x{p} matrix, got {}x{}",
            s.nrows(),
            s.ncols()
        )));
    }
    Ok(())
}

pub(crate) fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in 0..i {
            let a = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = a;
            m[(j, i)] = a;
        }
    }
}

/// `L_n(S) = Qᵀ(QSQᵀ * F)Q + ξS`, symmetrized.
pub fn apply_ln(basis: &BasisSpec, f: &Kernel6D, xi: f64, s: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    check_support(basis, f.s)?;
    check_square(s, basis.p())?;
    let lifted = basis.lift_matrix(s);
    let m = lifted.nrows();
    // F is exchange-symmetric, so convolving the column-major buffer and
    // reading it back column-major gives the same result as row-major
    let conv = f.convolve(lifted.as_slice());
    let w = DMatrix::from_vec(m, m, conv);
    let mut out = basis.expand_matrix(&w);
    if xi != 0.0 {
        out += s * xi;
    }
    symmetrize(&mut out);
    Ok(out)
}

/// Dense `p x p` matrix of `A_n`, assembled column by column.
pub fn dense_an(basis: &BasisSpec, f: &Kernel3D, nu: f64) -> Result<DMatrix<f64>> {
    let p = basis.p();
    let mut a = DMatrix::zeros(p, p);
    let mut e = DVector::zeros(p);
    for j in 0..p {
        e[j] = 1.0;
        let col = apply_an(basis, f, nu, &e)?;
        a.set_column(j, &col);
        e[j] = 0.0;
    }
    symmetrize(&mut a);
    Ok(a)
}

/// Circulant kernel on the periodic `s^dim` box.
pub struct CirculantKernel {
    dim: usize,
    s: usize,
    values: Vec<f64>,
    conv: PeriodicConv<f64>,
}

impl fmt::Debug for CirculantKernel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CirculantKernel")
            .field("dim", &self.dim)
            .field("s", &self.s)
            .finish()
    }
}

impl CirculantKernel {
    pub fn from_values(dim: usize, s: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != s.pow(dim as u32) {
            return Err(Error::Dimension(format!(
                "circulant kernel needs {} values, got {}",
                s.pow(dim as u32),
                values.len()
            )));
        }
        let conv = PeriodicConv::new(dim, s, &values);
        Ok(Self {
            dim,
            s,
            values,
            conv,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn edge(&self) -> usize {
        self.s
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Real DFT of the kernel on the periodic box.
    pub fn spectrum(&self) -> &[f64] {
        self.conv.spectrum()
    }

    pub fn min_abs_spectrum(&self) -> f64 {
        self.spectrum().iter().fold(f64::INFINITY, |m, v| m.min(v.abs()))
    }

    /// Errors if any spectral value is numerically zero.
    pub fn check_invertible(&self) -> Result<()> {
        let max = self.spectrum().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let min = self.min_abs_spectrum();
        if !(min > 1e-12 * max) {
            return Err(Error::SingularPreconditioner { min_abs: min });
        }
        Ok(())
    }

    /// Circular convolution on the grid.
    pub fn apply_grid(&self, v: &[f64]) -> Vec<f64> {
        self.conv.apply(v)
    }

    pub fn apply_inverse_grid(&self, v: &[f64]) -> Result<Vec<f64>> {
        self.check_invertible()?;
        Ok(self.conv.apply_inverse(v))
    }
}

/// Weighted periodization of a kernel on `(2s-1)^dim` offsets.
fn periodize(dim: usize, s: usize, values: &[f64], reg: f64) -> Vec<f64> {
    let k = 2 * s - 1;
    let mut g = vec![0.0; s.pow(dim as u32)];
    let norm = 1.0 / (s as f64).powi(dim as i32);
    // per-axis weight (s - |m|) and periodic index m mod s
    let weight: Vec<f64> = (0..k).map(|i| (s as i64 - offset(i, s).abs()) as f64).collect();
    let wrap: Vec<usize> = (0..k).map(|i| offset(i, s).rem_euclid(s as i64) as usize).collect();
    let mut idx = vec![0usize; dim];
    for &v in values {
        let mut w = norm;
        let mut flat = 0;
        for &i in &idx {
            w *= weight[i];
            flat = flat * s + wrap[i];
        }
        g[flat] += w * v;
        for a in (0..dim).rev() {
            idx[a] += 1;
            if idx[a] < k {
                break;
            }
            idx[a] = 0;
        }
    }
    g[0] += reg;
    g
}

/// Frobenius-nearest circulant to `f + νδ₀` on the support box.
pub fn circulant_approx3(f: &Kernel3D, nu: f64) -> CirculantKernel {
    let g = periodize(3, f.s, &f.values, nu);
    CirculantKernel::from_values(3, f.s, g).expect("periodized size")
}

/// Frobenius-nearest circulant to `F + ξδ₀` on the 6D support box.
pub fn circulant_approx6(f: &Kernel6D, xi: f64) -> CirculantKernel {
    let g = periodize(6, f.s, &f.values_f64(), xi);
    CirculantKernel::from_values(6, f.s, g).expect("periodized size")
}

/// `C⁻¹ x = Qᵀ C̃⁻¹ Q x`.
pub fn apply_circulant_inverse(
    basis: &BasisSpec,
    c: &CirculantKernel,
    x: &VolumeCoeffs,
) -> Result<VolumeCoeffs> {
    if c.dim != 3 {
        return Err(Error::Dimension("expected a 3D circulant kernel".into()));
    }
    check_support(basis, c.s)?;
    let v = basis.evaluate_support(x.as_slice())?;
    basis.expand_support(&c.apply_inverse_grid(&v)?)
}

/// `D⁻¹ S = Qᵀ D̃⁻¹(QSQᵀ) Q`, symmetrized.
pub fn apply_circulant_inverse_matrix(
    basis: &BasisSpec,
    c: &CirculantKernel,
    s: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    if c.dim != 6 {
        return Err(Error::Dimension("expected a 6D circulant kernel".into()));
    }
    check_support(basis, c.s)?;
    check_square(s, basis.p())?;
    let lifted = basis.lift_matrix(s);
    let m = lifted.nrows();
    let w = DMatrix::from_vec(m, m, c.apply_inverse_grid(lifted.as_slice())?);
    let mut out = basis.expand_matrix(&w);
    symmetrize(&mut out);
    Ok(out)
}

/// `C x = Qᵀ C̃ Q x`, the forward circulant operator.
pub fn apply_circulant(basis: &BasisSpec, c: &CirculantKernel, x: &VolumeCoeffs) -> Result<VolumeCoeffs> {
    check_support(basis, c.s)?;
    let v = basis.evaluate_support(x.as_slice())?;
    basis.expand_support(&c.apply_grid(&v))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::BasisKind;
    use crate::geometry::{sample_rotations_uniform, GridSpec, Rotation};
    use crate::imaging::{backproject, project, CtfParams};
    use crate::simulate::operators_round_robin;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn ctfs() -> Vec<CtfParams> {
        vec![
            CtfParams::radial(1.0e4, 0.0197, 2.0, 0.07, 10.0).unwrap(),
            CtfParams::radial(1.7e4, 0.0197, 2.0, 0.07, 10.0).unwrap(),
            CtfParams::radial(2.5e4, 0.0197, 2.0, 0.07, 10.0).unwrap(),
        ]
    }

    fn ops(n: usize, count: usize, seed: u64) -> Vec<ImagingOperator> {
        let g = GridSpec::new(n).unwrap();
        operators_round_robin(g, &sample_rotations_uniform(count, seed), &ctfs()).unwrap()
    }

    fn dense_p(basis: &BasisSpec, op: &ImagingOperator) -> DMatrix<f64> {
        let p = basis.p();
        let n2 = op.grid.pixels();
        let mut m = DMatrix::zeros(n2, p);
        let mut e = vec![0.0; p];
        for j in 0..p {
            e[j] = 1.0;
            m.set_column(j, &DVector::from_vec(project(basis, &e, op).unwrap()));
            e[j] = 0.0;
        }
        m
    }

    fn rand_sym(p: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        let a = DMatrix::from_fn(p, p, |_, _| rng.random::<f64>() - 0.5);
        &a + a.transpose()
    }

    #[test]
    fn single_identity_image_kernel() {
        // R = I, ĥ = 1: the kernel is a product of in-plane Dirichlet sums
        // and is constant along the third axis
        let n = 5;
        let basis = BasisSpec::voxel(n).unwrap();
        let g = GridSpec::new(n).unwrap();
        let op = ImagingOperator::new(Rotation::identity(), CtfParams::Identity, g);
        let f = mean_kernel(&basis, &[op]).unwrap();
        let dir = |m: i64| -> f64 {
            g.freq_range()
                .map(|k| (2.0 * PI * (m * k) as f64 / n as f64).cos())
                .sum()
        };
        for a in -4i64..=4 {
            for b in -4i64..=4 {
                for c in -4i64..=4 {
                    let want = dir(a) * dir(b) / (n as f64).powi(4);
                    assert!((f.at([a, b, c]) - want).abs() < 1e-12);
                }
            }
        }
        let twice = mean_kernel(&basis, &[op, op]).unwrap();
        assert_eq!(twice.values(), f.values());
    }

    #[test]
    fn kernel_is_even() {
        let basis = BasisSpec::new(BasisKind::TruncFourier, 6).unwrap();
        let f = mean_kernel(&basis, &ops(6, 5, 2)).unwrap();
        for a in -3i64..=3 {
            for b in -3i64..=3 {
                for c in -3i64..=3 {
                    assert!((f.at([a, b, c]) - f.at([-a, -b, -c])).abs() < 1e-14);
                }
            }
        }
    }

    #[test]
    fn an_matches_per_image() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for kind in [BasisKind::Voxel, BasisKind::TruncFourier] {
            let n = if kind == BasisKind::Voxel { 4 } else { 6 };
            let basis = BasisSpec::new(kind, n).unwrap();
            let ops = ops(n, 8, 3);
            let f = mean_kernel(&basis, &ops).unwrap();
            let x = DVector::from_fn(basis.p(), |_, _| rng.random::<f64>() - 0.5);
            let nu = 0.3;
            let got = apply_an(&basis, &f, nu, &x).unwrap();
            let mut want = &x * nu;
            for op in &ops {
                let y = project(&basis, x.as_slice(), op).unwrap();
                want += backproject(&basis, &y, op).unwrap() / ops.len() as f64;
            }
            assert!((&got - &want).norm() <= 1e-10 * want.norm());
            let z = DVector::from_fn(basis.p(), |_, _| rng.random::<f64>() - 0.5);
            let az = apply_an(&basis, &f, nu, &z).unwrap();
            assert!((got.dot(&z) - x.dot(&az)).abs() < 1e-10);
        }
        let b = BasisSpec::voxel(4).unwrap();
        let d = Kernel3D::delta(4, 4);
        let x = DVector::from_fn(64, |i, _| i as f64);
        assert!((apply_an(&b, &d, 0.0, &x).unwrap() - &x).norm() < 1e-12);
    }

    #[test]
    fn ln_matches_dense() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 4;
        let basis = BasisSpec::voxel(n).unwrap();
        let ops = ops(n, 8, 7);
        let f = covar_kernel(&basis, &ops, Precision::F64).unwrap();
        let mats: Vec<DMatrix<f64>> = ops
            .iter()
            .map(|op| {
                let p = dense_p(&basis, op);
                p.transpose() * p
            })
            .collect();
        let xi = 0.1;
        for _ in 0..5 {
            let s = rand_sym(64, &mut rng);
            let got = apply_ln(&basis, &f, xi, &s).unwrap();
            let mut want = &s * xi;
            for m in &mats {
                want += m * &s * m / ops.len() as f64;
            }
            assert!((&got - &want).norm() <= 1e-10 * want.norm());
            assert!((&got - got.transpose()).norm() <= 1e-12 * got.norm());
        }
        let single = covar_kernel(&basis, &ops[..1], Precision::F64).unwrap();
        let k1 = mean_kernel(&basis, &ops[..1]).unwrap();
        for &(a, b) in &[([0, 0, 0], [1, -2, 3]), ([2, 1, -1], [-3, 0, 0])] {
            assert!((single.at(a, b) - k1.at(a) * k1.at(b)).abs() < 1e-15);
            assert!((f.at(a, b) - f.at(b, a)).abs() < 1e-15);
        }
    }

    #[test]
    fn ln_trunc_fourier_and_single_precision() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let n = 6;
        let basis = BasisSpec::new(BasisKind::TruncFourier, n).unwrap();
        let ops = ops(n, 6, 8);
        let f64k = covar_kernel(&basis, &ops, Precision::F64).unwrap();
        let f32k = covar_kernel(&basis, &ops, Precision::F32).unwrap();
        let mats: Vec<DMatrix<f64>> = ops
            .iter()
            .map(|op| {
                let p = dense_p(&basis, op);
                p.transpose() * p
            })
            .collect();
        let s = rand_sym(basis.p(), &mut rng);
        let mut want = DMatrix::zeros(basis.p(), basis.p());
        for m in &mats {
            want += m * &s * m / ops.len() as f64;
        }
        let got = apply_ln(&basis, &f64k, 0.0, &s).unwrap();
        assert!((&got - &want).norm() <= 1e-10 * want.norm());
        let got32 = apply_ln(&basis, &f32k, 0.0, &s).unwrap();
        assert!((&got32 - &want).norm() <= 1e-4 * want.norm());
    }

    #[test]
    fn delta_kernels_are_identity() {
        let b = BasisSpec::voxel(3).unwrap();
        let d = Kernel6D::delta(3, 3, Precision::F64);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s = rand_sym(27, &mut rng);
        assert!((apply_ln(&b, &d, 0.0, &s).unwrap() - &s).norm() < 1e-12);
        let g = circulant_approx6(&d, 0.0);
        assert!((g.values()[0] - 1.0).abs() < 1e-15);
        assert!(g.values()[1..].iter().all(|v| v.abs() < 1e-15));
        let g3 = circulant_approx3(&Kernel3D::delta(3, 3), 0.0);
        let x = DVector::from_fn(27, |i, _| (i as f64).sin());
        assert!((apply_circulant_inverse(&b, &g3, &x).unwrap() - &x).norm() < 1e-12);
    }

    #[test]
    fn budget_refuses_large_grids() {
        assert!(check_kernel6_budget(10, Precision::F64).is_ok());
        let e = check_kernel6_budget(12, Precision::F64).unwrap_err();
        assert_eq!(e.category(), "resource");
        assert!(e.to_string().contains("N <= 10"));
        assert!(check_kernel6_budget(12, Precision::F32).is_ok());
    }

    #[test]
    fn singular_preconditioner_is_refused() {
        let c = CirculantKernel::from_values(3, 2, vec![0.0; 8]).unwrap();
        let b = BasisSpec::voxel(2).unwrap();
        let err = apply_circulant_inverse(&b, &c, &DVector::zeros(8)).unwrap_err();
        assert!(matches!(err, Error::SingularPreconditioner { .. }));
    }

    #[test]
    fn nu_shifts_spectrum() {
        let basis = BasisSpec::voxel(4).unwrap();
        let f = mean_kernel(&basis, &ops(4, 3, 1)).unwrap();
        let a = circulant_approx3(&f, 0.0);
        let b = circulant_approx3(&f, 0.25);
        for (x, y) in a.spectrum().iter().zip(b.spectrum()) {
            assert!((y - x - 0.25).abs() < 1e-12);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = DVector::from_fn(64, |_, _| rng.random::<f64>() - 0.5);
        let back = apply_circulant(&basis, &b, &apply_circulant_inverse(&basis, &b, &x).unwrap()).unwrap();
        assert!((back - &x).norm() < 1e-10 * x.norm());
        assert!(x.dot(&apply_circulant_inverse(&basis, &b, &x).unwrap()) > 0.0);
    }

    #[test]
    fn circulant_is_frobenius_projection_at_n2() {
        // Toeplitz Ã[a,b] = f(a-b) on the 2^3 box; projection onto circulants
        // is g_i = <Ã, E_i> / 8 with E_i the indicator of a-b = i (mod 2)
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut vals = vec![0.0; 27];
        for i in 0..27 {
            if 26 - i >= i {
                let v = rng.random::<f64>();
                vals[i] = v;
                vals[26 - i] = v;
            }
        }
        let f = Kernel3D::from_values(2, 2, vals).unwrap();
        let g = circulant_approx3(&f, 0.0);
        let pts: Vec<[i64; 3]> = (0..8).map(|i| [(i >> 2) & 1, (i >> 1) & 1, i & 1]).collect();
        for (ci, want_idx) in pts.iter().enumerate() {
            let mut acc = 0.0;
            for a in &pts {
                for b in &pts {
                    let d = [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
                    if d.iter().zip(want_idx).all(|(x, y)| x.rem_euclid(2) == *y) {
                        acc += f.at(d);
                    }
                }
            }
            assert!((g.values()[ci] - acc / 8.0).abs() < 1e-14);
        }
    }
}
