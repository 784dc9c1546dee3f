//! Orthonormal volume bases: the voxel basis and the truncated Fourier
//! basis supported on the inner `(N-2)^3` box.
//!
//! A basis maps a coefficient vector `x` (length `p`) to a real `N^3` voxel
//! grid `v = Q x` and back through the adjoint `Qᵀ`. Both bases have all of
//! their energy inside a [`SupportBox`]; operators that only need voxels
//! inside that box use [`BasisSpec::evaluate_support`] and
//! [`BasisSpec::expand_support`] to avoid touching the zero padding.

use std::f64::consts::{PI, SQRT_2};
use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{centered_range, grid_lo, GridSpec};

/// Coefficients of a volume in a [`BasisSpec`].
pub type VolumeCoeffs = DVector<f64>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BasisKind {
    Voxel,
    TruncFourier,
}

impl std::str::FromStr for BasisKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "voxel" => Ok(BasisKind::Voxel),
            "trunc-fourier" => Ok(BasisKind::TruncFourier),
            other => Err(Error::InvalidParameter(format!("unknown basis kind '{other}'"))),
        }
    }
}

/// Cubic sub-box of the voxel grid, `edge^3` voxels whose array index 0
/// sits at centered coordinate `origin` along every axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SupportBox {
    pub edge: usize,
    pub origin: i64,
}

impl SupportBox {
    #[inline]
    pub fn len(&self) -> usize {
        self.edge.pow(3)
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.edge == 0
    }

    /// Centered coordinates along one axis.
    pub fn coords(&self) -> impl Iterator<Item = i64> + Clone {
        let o = self.origin;
        (0..self.edge as i64).map(move |a| a + o)
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
struct BasisDescriptor {
    kind: BasisKind,
    n: usize,
}

/// A volume basis on an `N^3` grid.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(try_from = "BasisDescriptor", into = "BasisDescriptor")]
pub struct BasisSpec {
    kind: BasisKind,
    grid: GridSpec,
    p: usize,
    support: SupportBox,
    /// Representative frequencies, one per `±k` pair (trunc-fourier only).
    freqs: Vec<[i64; 3]>,
    /// For each representative, flat index of `k` and `-k` in the
    /// `(N-2)^3` frequency box.
    pairing: Vec<(usize, usize)>,
    /// `exp(2πi j k / M) / M^{1/2}` for `j, k` in the centered `M` grid,
    /// row index `j`.
    twiddle: Vec<Complex64>,
    dense: OnceLock<DMatrix<f64>>,
}

impl TryFrom<BasisDescriptor> for BasisSpec {
    type Error = Error;

    fn try_from(d: BasisDescriptor) -> Result<Self> {
        BasisSpec::new(d.kind, d.n)
    }
}

impl From<BasisSpec> for BasisDescriptor {
    fn from(b: BasisSpec) -> Self {
        BasisDescriptor {
            kind: b.kind,
            n: b.grid.n(),
        }
    }
}

impl BasisSpec {
    pub fn new(kind: BasisKind, n: usize) -> Result<Self> {
        let grid = GridSpec::new(n)?;
        match kind {
            BasisKind::Voxel => Ok(Self {
                kind,
                grid,
                p: n.pow(3),
                support: SupportBox {
                    edge: n,
                    origin: grid_lo(n),
                },
                freqs: Vec::new(),
                pairing: Vec::new(),
                twiddle: Vec::new(),
                dense: OnceLock::new(),
            }),
            BasisKind::TruncFourier => Self::trunc_fourier(grid),
        }
    }

    pub fn voxel(n: usize) -> Result<Self> {
        Self::new(BasisKind::Voxel, n)
    }

    fn trunc_fourier(grid: GridSpec) -> Result<Self> {
        let n = grid.n();
        if n < 4 {
            return Err(Error::InvalidParameter(format!(
                "trunc-fourier basis needs N >= 4, got {n}"
            )));
        }
        let m = n - 2;
        let radius = (m as f64) / 2.0;
        let range = centered_range(m);
        let lo = grid_lo(m);
        let flat = |k: [i64; 3]| -> usize {
            let a = |c: i64| (c - lo) as usize;
            (a(k[0]) * m + a(k[1])) * m + a(k[2])
        };
        let mut freqs = Vec::new();
        for k0 in range.clone() {
            for k1 in range.clone() {
                for k2 in range.clone() {
                    let norm = ((k0 * k0 + k1 * k1 + k2 * k2) as f64).sqrt();
                    if norm >= radius {
                        continue;
                    }
                    let rep = k0 > 0 || (k0 == 0 && k1 > 0) || (k0 == 0 && k1 == 0 && k2 >= 0);
                    if rep {
                        freqs.push([k0, k1, k2]);
                    }
                }
            }
        }
        freqs.sort();
        let pairing: Vec<(usize, usize)> = freqs
            .iter()
            .map(|&k| (flat(k), flat([-k[0], -k[1], -k[2]])))
            .collect();
        let p = pairing
            .iter()
            .map(|&(a, b)| if a == b { 1 } else { 2 })
            .sum();

        let scale = 1.0 / (m as f64).sqrt();
        let mut twiddle = Vec::with_capacity(m * m);
        for j in range.clone() {
            for k in range.clone() {
                let phase = 2.0 * PI * (j * k) as f64 / m as f64;
                twiddle.push(Complex64::from_polar(scale, phase));
            }
        }
        Ok(Self {
            kind: BasisKind::TruncFourier,
            grid,
            p,
            support: SupportBox {
                edge: m,
                origin: grid_lo(n) + 1,
            },
            freqs,
            pairing,
            twiddle,
            dense: OnceLock::new(),
        })
    }

    #[inline]
    pub fn kind(&self) -> BasisKind {
        self.kind
    }

    #[inline]
    pub fn grid(&self) -> GridSpec {
        self.grid
    }

    #[inline]
    pub fn n(&self) -> usize {
        self.grid.n()
    }

    /// Number of coefficients.
    #[inline]
    pub fn p(&self) -> usize {
        self.p
    }

    #[inline]
    pub fn support(&self) -> SupportBox {
        self.support
    }

    /// Representative frequencies of the trunc-fourier basis, in
    /// coefficient order. Empty for the voxel basis.
    pub fn freq_list(&self) -> &[[i64; 3]] {
        &self.freqs
    }

    /// Flat indices of `k` and `-k` in the `(N-2)^3` frequency box, per
    /// representative.
    pub fn conjugate_pairing(&self) -> &[(usize, usize)] {
        &self.pairing
    }

    fn check_coeffs(&self, len: usize) -> Result<()> {
        if len != self.p {
            return Err(Error::Dimension(format!(
                "expected {} coefficients, got {len}",
                self.p
            )));
        }
        Ok(())
    }

    /// `Q x` restricted to the support box.
    pub fn evaluate_support(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_coeffs(x.len())?;
        match self.kind {
            BasisKind::Voxel => Ok(x.to_vec()),
            BasisKind::TruncFourier => {
                let m = self.support.edge;
                let mut spec = vec![Complex64::new(0.0, 0.0); m * m * m];
                let mut idx = 0;
                for &(pos, neg) in &self.pairing {
                    if pos == neg {
                        spec[pos] = Complex64::new(x[idx], 0.0);
                        idx += 1;
                    } else {
                        let (a, b) = (x[idx], x[idx + 1]);
                        spec[pos] = Complex64::new(a, -b) / SQRT_2;
                        spec[neg] = Complex64::new(a, b) / SQRT_2;
                        idx += 2;
                    }
                }
                // spec is indexed by frequency; transform to space (table rows are j)
                separable_transform(&mut spec, m, &self.twiddle, false);
                Ok(spec.into_iter().map(|c| c.re).collect())
            }
        }
    }

    /// `Qᵀ v` for `v` given on the support box only.
    pub fn expand_support(&self, v: &[f64]) -> Result<VolumeCoeffs> {
        if v.len() != self.support.len() {
            return Err(Error::Dimension(format!(
                "expected {} support voxels, got {}",
                self.support.len(),
                v.len()
            )));
        }
        match self.kind {
            BasisKind::Voxel => Ok(DVector::from_column_slice(v)),
            BasisKind::TruncFourier => {
                let m = self.support.edge;
                let mut buf: Vec<Complex64> = v.iter().map(|&r| Complex64::new(r, 0.0)).collect();
                separable_transform(&mut buf, m, &self.twiddle, true);
                let mut out = DVector::zeros(self.p);
                let mut idx = 0;
                for &(pos, neg) in &self.pairing {
                    let c = buf[pos];
                    if pos == neg {
                        out[idx] = c.re;
                        idx += 1;
                    } else {
                        out[idx] = SQRT_2 * c.re;
                        out[idx + 1] = -SQRT_2 * c.im;
                        idx += 2;
                    }
                }
                Ok(out)
            }
        }
    }

    /// Dense `s^3 x p` matrix of `Q` restricted to the support box, or
    /// `None` for the voxel basis where it is the identity.
    pub fn support_matrix(&self) -> Option<&DMatrix<f64>> {
        if self.kind == BasisKind::Voxel {
            return None;
        }
        Some(self.dense.get_or_init(|| {
            let mut q = DMatrix::zeros(self.support.len(), self.p);
            let mut e = vec![0.0; self.p];
            for i in 0..self.p {
                e[i] = 1.0;
                let col = self.evaluate_support(&e).expect("coefficient length");
                q.column_mut(i).copy_from_slice(&col);
                e[i] = 0.0;
            }
            q
        }))
    }

    /// `Q_s S Q_sᵀ` on the support box.
    pub fn lift_matrix(&self, s: &DMatrix<f64>) -> DMatrix<f64> {
        match self.support_matrix() {
            None => s.clone(),
            Some(q) => q * s * q.transpose(),
        }
    }

    /// `Q_sᵀ V Q_s`.
    pub fn expand_matrix(&self, v: &DMatrix<f64>) -> DMatrix<f64> {
        match self.support_matrix() {
            None => v.clone(),
            Some(q) => q.transpose() * v * q,
        }
    }

    /// Embeds a support-box array into the full `N^3` grid.
    pub fn embed(&self, inner: &[f64]) -> Vec<f64> {
        let n = self.n();
        let s = self.support.edge;
        let off = (self.support.origin - grid_lo(n)) as usize;
        let mut full = vec![0.0; n * n * n];
        for a in 0..s {
            for b in 0..s {
                let src = (a * s + b) * s;
                let dst = ((a + off) * n + (b + off)) * n + off;
                full[dst..dst + s].copy_from_slice(&inner[src..src + s]);
            }
        }
        full
    }

    /// Extracts the support box from a full `N^3` grid.
    pub fn restrict(&self, full: &[f64]) -> Vec<f64> {
        let n = self.n();
        let s = self.support.edge;
        let off = (self.support.origin - grid_lo(n)) as usize;
        let mut inner = vec![0.0; s * s * s];
        for a in 0..s {
            for b in 0..s {
                let dst = (a * s + b) * s;
                let src = ((a + off) * n + (b + off)) * n + off;
                inner[dst..dst + s].copy_from_slice(&full[src..src + s]);
            }
        }
        inner
    }

    /// `Q x` on the full `N^3` grid.
    pub fn evaluate(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.embed(&self.evaluate_support(x)?))
    }

    /// `Qᵀ v` for a full `N^3` grid.
    pub fn expand(&self, v: &[f64]) -> Result<VolumeCoeffs> {
        if v.len() != self.grid.voxels() {
            return Err(Error::Dimension(format!(
                "expected {} voxels, got {}",
                self.grid.voxels(),
                v.len()
            )));
        }
        self.expand_support(&self.restrict(v))
    }
}

/// Applies the 1D map `out[b] = Σ_a T[b][a] in[a]` (or its conjugate
/// transpose, `Σ_a conj(T[a][b]) in[a]`, when `adjoint`) along all three axes
/// of an `m^3` array.
fn separable_transform(data: &mut [Complex64], m: usize, table: &[Complex64], adjoint: bool) {
    let mut line = vec![Complex64::new(0.0, 0.0); m];
    let mut out = vec![Complex64::new(0.0, 0.0); m];
    for axis in 0..3 {
        let stride = m.pow(2 - axis as u32);
        let outer = m.pow(axis as u32);
        for hi in 0..outer {
            for lo in 0..stride {
                let base = hi * stride * m + lo;
                for (a, l) in line.iter_mut().enumerate() {
                    *l = data[base + a * stride];
                }
                for (b, o) in out.iter_mut().enumerate() {
                    let mut acc = Complex64::new(0.0, 0.0);
                    if adjoint {
                        for (a, l) in line.iter().enumerate() {
                            acc += table[a * m + b].conj() * l;
                        }
                    } else {
                        for (a, l) in line.iter().enumerate() {
                            acc += table[b * m + a] * l;
                        }
                    }
                    *o = acc;
                }
                for (a, o) in out.iter().enumerate() {
                    data[base + a * stride] = *o;
                }
            }
        }
    }
}

/// Validates a grid against a basis.
pub(crate) fn check_grid(basis: &BasisSpec, grid: GridSpec) -> Result<()> {
    if basis.grid() != grid {
        return Err(Error::Dimension(format!(
            "basis grid N={} does not match operator grid N={}",
            basis.n(),
            grid.n()
        )));
    }
    Ok(())
}
