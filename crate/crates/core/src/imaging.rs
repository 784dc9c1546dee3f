//! Projection of volumes into CTF-filtered images and its adjoint.
//!
//! The volume transform is evaluated exactly at the rotated central-plane
//! frequencies by separable direct summation, so `project` and
//! `backproject` are exact adjoints of each other up to roundoff.

use std::f64::consts::PI;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::basis::{check_grid, BasisSpec, SupportBox, VolumeCoeffs};
use crate::error::{Error, Result};
use crate::geometry::{GridSpec, Rotation};

/// Contrast transfer function parameters. Lengths are in Å, except the
/// spherical aberration which is given in mm.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum CtfParams {
    Identity,
    RadialParametric {
        defocus: f64,
        wavelength: f64,
        cs_mm: f64,
        alpha_contrast: f64,
        pixel_size: f64,
    },
}

impl CtfParams {
    pub fn radial(
        defocus: f64,
        wavelength: f64,
        cs_mm: f64,
        alpha_contrast: f64,
        pixel_size: f64,
    ) -> Result<Self> {
        let c = CtfParams::RadialParametric {
            defocus,
            wavelength,
            cs_mm,
            alpha_contrast,
            pixel_size,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if let CtfParams::RadialParametric {
            defocus,
            wavelength,
            cs_mm,
            alpha_contrast,
            pixel_size,
        } = *self
        {
            let all = [defocus, wavelength, cs_mm, alpha_contrast, pixel_size];
            if all.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidParameter("non-finite CTF parameter".into()));
            }
            if !(0.0..=1.0).contains(&alpha_contrast) {
                return Err(Error::InvalidParameter(format!(
                    "amplitude contrast {alpha_contrast} outside [0, 1]"
                )));
            }
            if pixel_size <= 0.0 || wavelength <= 0.0 {
                return Err(Error::InvalidParameter(
                    "pixel size and wavelength must be positive".into(),
                ));
            }
        }
        Ok(())
    }

    /// Value at spatial frequency `s` in Å⁻¹.
    pub fn evaluate_s(&self, s: f64) -> f64 {
        match *self {
            CtfParams::Identity => 1.0,
            CtfParams::RadialParametric {
                defocus,
                wavelength,
                cs_mm,
                alpha_contrast,
                ..
            } => {
                let cs = cs_mm * 1e7;
                let s2 = s * s;
                let chi = PI * wavelength * defocus * s2
                    - 0.5 * PI * cs * wavelength.powi(3) * s2 * s2;
                let w = alpha_contrast;
                -((1.0 - w * w).sqrt() * chi.sin() + w * chi.cos())
            }
        }
    }
}

/// CTF value at image frequency `k` (cycles per box) on an `N`-pixel grid.
pub fn ctf_evaluate(ctf: &CtfParams, k: [f64; 2], n: usize) -> f64 {
    match *ctf {
        CtfParams::Identity => 1.0,
        CtfParams::RadialParametric { pixel_size, .. } => {
            let s = (k[0] * k[0] + k[1] * k[1]).sqrt() / (n as f64 * pixel_size);
            ctf.evaluate_s(s)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ImagingOperator {
    pub rotation: Rotation,
    pub ctf: CtfParams,
    pub grid: GridSpec,
}

impl ImagingOperator {
    pub fn new(rotation: Rotation, ctf: CtfParams, grid: GridSpec) -> Self {
        Self {
            rotation,
            ctf,
            grid,
        }
    }

    /// CTF sampled on the image frequency grid, row-major over `(k0, k1)`.
    pub fn ctf_grid(&self) -> Vec<f64> {
        let n = self.grid.n();
        self.grid
            .image_freqs()
            .iter()
            .map(|k| ctf_evaluate(&self.ctf, [k[0] as f64, k[1] as f64], n))
            .collect()
    }
}

/// A stack of `n` real `N x N` images stored contiguously, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageStack {
    n_images: usize,
    edge: usize,
    data: Vec<f64>,
}

impl ImageStack {
    pub fn zeros(n_images: usize, edge: usize) -> Self {
        Self {
            n_images,
            edge,
            data: vec![0.0; n_images * edge * edge],
        }
    }

    pub fn from_vec(n_images: usize, edge: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n_images * edge * edge {
            return Err(Error::Dimension(format!(
                "{} values cannot form {n_images} images of {edge}x{edge}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("image stack".into()));
        }
        Ok(Self {
            n_images,
            edge,
            data,
        })
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.n_images
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.n_images == 0
    }

    #[inline]
    pub fn edge(&self) -> usize {
        self.edge
    }

    #[inline]
    pub fn pixels(&self) -> usize {
        self.edge * self.edge
    }

    pub fn image(&self, s: usize) -> &[f64] {
        let m = self.pixels();
        &self.data[s * m..(s + 1) * m]
    }

    pub fn image_mut(&mut self, s: usize) -> &mut [f64] {
        let m = self.pixels();
        &mut self.data[s * m..(s + 1) * m]
    }

    pub fn iter(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.pixels().max(1)).take(self.n_images)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }
}

/// Per-operator table of `exp(-2πi j ω_a / N)` for every image frequency,
/// axis `a` and support coordinate `j`. Layout `[freq][axis][j]`.
fn slice_factors(op: &ImagingOperator, support: SupportBox) -> Vec<Complex64> {
    let n = op.grid.n() as f64;
    let s = support.edge;
    let freqs = op.grid.image_freqs();
    let mut out = Vec::with_capacity(freqs.len() * 3 * s);
    for k in &freqs {
        let w = op.rotation.slice_point(k[0] as f64, k[1] as f64);
        for wa in w {
            for j in support.coords() {
                out.push(Complex64::from_polar(1.0, -2.0 * PI * j as f64 * wa / n));
            }
        }
    }
    out
}

/// `exp(2πi i k / N)` for `i` in the spatial grid (rows) and `k` in the
/// image frequency grid (columns).
fn image_dft_table(grid: GridSpec) -> Vec<Complex64> {
    let n = grid.n() as f64;
    let mut t = Vec::with_capacity(grid.n() * grid.freq_count());
    for i in grid.spatial_range() {
        for k in grid.freq_range() {
            t.push(Complex64::from_polar(1.0, 2.0 * PI * (i * k) as f64 / n));
        }
    }
    t
}

/// Projects a volume given on the basis support box.
pub(crate) fn project_support(op: &ImagingOperator, support: SupportBox, v: &[f64]) -> Vec<f64> {
    let grid = op.grid;
    let n = grid.n();
    let f = grid.freq_count();
    let s = support.edge;
    let factors = slice_factors(op, support);
    let ctf = op.ctf_grid();

    let mut spec = vec![Complex64::new(0.0, 0.0); f * f];
    let mut plane = vec![Complex64::new(0.0, 0.0); s];
    for (q, out) in spec.iter_mut().enumerate() {
        let e = &factors[q * 3 * s..(q + 1) * 3 * s];
        let (e0, rest) = e.split_at(s);
        let (e1, e2) = rest.split_at(s);
        let mut acc = Complex64::new(0.0, 0.0);
        for (a, &ea) in e0.iter().enumerate() {
            for (b, pl) in plane.iter_mut().enumerate() {
                let row = &v[(a * s + b) * s..(a * s + b + 1) * s];
                let mut t = Complex64::new(0.0, 0.0);
                for (c, &val) in row.iter().enumerate() {
                    t += e2[c] * val;
                }
                *pl = t;
            }
            let mut u = Complex64::new(0.0, 0.0);
            for (b, pl) in plane.iter().enumerate() {
                u += e1[b] * pl;
            }
            acc += ea * u;
        }
        *out = acc * (ctf[q] / n as f64);
    }

    // inverse 2D transform onto the spatial grid
    let table = image_dft_table(grid);
    let scale = 1.0 / (n * n) as f64;
    let mut half = vec![Complex64::new(0.0, 0.0); f * n];
    for k0 in 0..f {
        for i1 in 0..n {
            let mut t = Complex64::new(0.0, 0.0);
            for k1 in 0..f {
                t += table[i1 * f + k1] * spec[k0 * f + k1];
            }
            half[k0 * n + i1] = t;
        }
    }
    let mut img = vec![0.0; n * n];
    for i0 in 0..n {
        for i1 in 0..n {
            let mut t = Complex64::new(0.0, 0.0);
            for k0 in 0..f {
                t += table[i0 * f + k0] * half[k0 * n + i1];
            }
            img[i0 * n + i1] = t.re * scale;
        }
    }
    img
}

/// Adjoint of [`project_support`]; returns values on the support box.
pub(crate) fn backproject_support(
    op: &ImagingOperator,
    support: SupportBox,
    y: &[f64],
) -> Vec<f64> {
    let grid = op.grid;
    let n = grid.n();
    let f = grid.freq_count();
    let s = support.edge;
    let table = image_dft_table(grid);
    let ctf = op.ctf_grid();

    // adjoint of the inverse 2D transform
    let scale = 1.0 / (n * n) as f64;
    let mut half = vec![Complex64::new(0.0, 0.0); n * f];
    for i0 in 0..n {
        for k1 in 0..f {
            let mut t = Complex64::new(0.0, 0.0);
            for i1 in 0..n {
                t += table[i1 * f + k1].conj() * y[i0 * n + i1];
            }
            half[i0 * f + k1] = t;
        }
    }
    let mut spec = vec![Complex64::new(0.0, 0.0); f * f];
    for k0 in 0..f {
        for k1 in 0..f {
            let mut t = Complex64::new(0.0, 0.0);
            for i0 in 0..n {
                t += table[i0 * f + k0].conj() * half[i0 * f + k1];
            }
            spec[k0 * f + k1] = t * (scale * ctf[k0 * f + k1] / n as f64);
        }
    }

    let factors = slice_factors(op, support);
    let mut v = vec![0.0; s * s * s];
    let mut w0 = vec![Complex64::new(0.0, 0.0); s];
    let mut w01 = vec![Complex64::new(0.0, 0.0); s * s];
    for (q, &c) in spec.iter().enumerate() {
        let e = &factors[q * 3 * s..(q + 1) * 3 * s];
        let (e0, rest) = e.split_at(s);
        let (e1, e2) = rest.split_at(s);
        for (a, w) in w0.iter_mut().enumerate() {
            *w = e0[a].conj() * c;
        }
        for a in 0..s {
            for b in 0..s {
                w01[a * s + b] = w0[a] * e1[b].conj();
            }
        }
        for (ab, &w) in w01.iter().enumerate() {
            let row = &mut v[ab * s..(ab + 1) * s];
            for (c2, r) in row.iter_mut().enumerate() {
                *r += (w * e2[c2].conj()).re;
            }
        }
    }
    v
}

fn check_image(op: &ImagingOperator, y: &[f64]) -> Result<()> {
    if y.len() != op.grid.pixels() {
        return Err(Error::Dimension(format!(
            "expected {} pixels, got {}",
            op.grid.pixels(),
            y.len()
        )));
    }
    Ok(())
}

/// `P x`, an `N x N` row-major image.
pub fn project(basis: &BasisSpec, x: &[f64], op: &ImagingOperator) -> Result<Vec<f64>> {
    check_grid(basis, op.grid)?;
    let v = basis.evaluate_support(x)?;
    Ok(project_support(op, basis.support(), &v))
}

/// `Pᵀ y`.
pub fn backproject(basis: &BasisSpec, y: &[f64], op: &ImagingOperator) -> Result<VolumeCoeffs> {
    check_grid(basis, op.grid)?;
    check_image(op, y)?;
    let v = backproject_support(op, basis.support(), y);
    basis.expand_support(&v)
}

/// Heterogeneous SNR: energy of the mean-subtracted clean projections over
/// the noise energy.
pub fn snr_h(
    basis: &BasisSpec,
    ops: &[ImagingOperator],
    states: &[VolumeCoeffs],
    assignments: &[usize],
    sigma: f64,
    mean: &VolumeCoeffs,
) -> Result<f64> {
    if sigma <= 0.0 {
        return Err(Error::UndefinedSnr);
    }
    let energy = heterogeneous_energy(basis, ops, states, assignments, mean)?;
    let n = ops.len() as f64;
    let pix = basis.grid().pixels() as f64;
    Ok(energy / (n * pix * sigma * sigma))
}

/// `Σ_s ‖P_s(x_s − mean)‖²`.
pub fn heterogeneous_energy(
    basis: &BasisSpec,
    ops: &[ImagingOperator],
    states: &[VolumeCoeffs],
    assignments: &[usize],
    mean: &VolumeCoeffs,
) -> Result<f64> {
    if ops.len() != assignments.len() {
        return Err(Error::Dimension(format!(
            "{} operators but {} assignments",
            ops.len(),
            assignments.len()
        )));
    }
    // one support-box evaluation per state
    let centered: Vec<Vec<f64>> = states
        .iter()
        .map(|x| basis.evaluate_support((x - mean).as_slice()))
        .collect::<Result<_>>()?;
    let mut total = 0.0;
    for (op, &a) in ops.iter().zip(assignments) {
        check_grid(basis, op.grid)?;
        let v = centered.get(a).ok_or_else(|| {
            Error::InvalidParameter(format!("assignment {a} out of range"))
        })?;
        let img = project_support(op, basis.support(), v);
        total += img.iter().map(|p| p * p).sum::<f64>();
    }
    Ok(total)
}

/// Robust noise level from the median absolute deviation of the border
/// pixels of every image.
pub fn estimate_noise_sigma(images: &ImageStack) -> Result<f64> {
    let n = images.edge();
    if n < 4 {
        return Err(Error::InvalidParameter(format!(
            "noise estimation needs N >= 4, got {n}"
        )));
    }
    let mut vals = Vec::with_capacity(images.len() * 4 * n);
    for img in images.iter() {
        for a in 0..n {
            for b in 0..n {
                if a == 0 || b == 0 || a == n - 1 || b == n - 1 {
                    vals.push(img[a * n + b]);
                }
            }
        }
    }
    if vals.is_empty() {
        return Ok(0.0);
    }
    let med = median(&mut vals);
    let mut dev: Vec<f64> = vals.iter().map(|v| (v - med).abs()).collect();
    // 1/Φ⁻¹(3/4) makes the MAD consistent for Gaussian noise
    Ok(1.482_602_218_505_602 * median(&mut dev))
}

pub(crate) fn median(v: &mut [f64]) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    let m = v.len();
    if m % 2 == 1 {
        v[m / 2]
    } else {
        0.5 * (v[m / 2 - 1] + v[m / 2])
    }
}
