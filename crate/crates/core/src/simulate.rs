//! Synthetic heterogeneous datasets with known ground truth.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;

use crate::basis::{BasisSpec, VolumeCoeffs};
use crate::error::{Error, Result};
use crate::geometry::{centered_range, GridSpec, Rotation};
use crate::imaging::{heterogeneous_energy, project, CtfParams, ImageStack, ImagingOperator};

#[derive(Clone, Debug)]
pub struct SimulationTruth {
    pub states: Vec<VolumeCoeffs>,
    pub probabilities: Vec<f64>,
    pub assignments: Vec<usize>,
    pub sigma: f64,
    pub clean_images: ImageStack,
}

impl SimulationTruth {
    /// `Σ_c p_c x_c`.
    pub fn population_mean(&self) -> VolumeCoeffs {
        population_mean(&self.states, &self.probabilities)
    }
}

pub fn population_mean(states: &[VolumeCoeffs], probabilities: &[f64]) -> VolumeCoeffs {
    let p = states.first().map_or(0, |s| s.len());
    states
        .iter()
        .zip(probabilities)
        .fold(VolumeCoeffs::zeros(p), |acc, (x, &w)| acc + x * w)
}

/// Population covariance `Σ_c p_c (x_c − μ)(x_c − μ)ᵀ`.
pub fn population_covariance(states: &[VolumeCoeffs], probabilities: &[f64]) -> nalgebra::DMatrix<f64> {
    let mu = population_mean(states, probabilities);
    let p = mu.len();
    let mut cov = nalgebra::DMatrix::zeros(p, p);
    for (x, &w) in states.iter().zip(probabilities) {
        let d = x - &mu;
        cov.ger(w, &d, &d, 1.0);
    }
    cov
}

/// Isotropic Gaussian blob on the `N^3` voxel grid; `center` and `width` in
/// voxel units.
pub fn gaussian_blob(grid: GridSpec, center: [f64; 3], width: f64, amplitude: f64) -> Vec<f64> {
    let n = grid.n();
    let mut v = Vec::with_capacity(n * n * n);
    for a in centered_range(n) {
        for b in centered_range(n) {
            for c in centered_range(n) {
                let d2 = (a as f64 - center[0]).powi(2)
                    + (b as f64 - center[1]).powi(2)
                    + (c as f64 - center[2]).powi(2);
                v.push(amplitude * (-d2 / (2.0 * width * width)).exp());
            }
        }
    }
    v
}

fn add(into: &mut [f64], other: &[f64]) {
    for (a, b) in into.iter_mut().zip(other) {
        *a += b;
    }
}

/// Two states sharing a large central blob, each with one small satellite
/// blob on opposite sides.
pub fn two_state_phantom(basis: &BasisSpec) -> Result<Vec<VolumeCoeffs>> {
    multi_state_phantom(basis, 2)
}

/// `c` states: a large central blob plus one small satellite blob placed on
/// a ring, a different ring position per state.
pub fn multi_state_phantom(basis: &BasisSpec, c: usize) -> Result<Vec<VolumeCoeffs>> {
    if c < 1 {
        return Err(Error::InvalidParameter("phantom needs at least one state".into()));
    }
    let grid = basis.grid();
    let nf = grid.n() as f64;
    let core = gaussian_blob(grid, [0.0, 0.0, 0.0], 0.18 * nf, 1.0);
    let radius = 0.22 * nf;
    (0..c)
        .map(|i| {
            let t = 2.0 * std::f64::consts::PI * i as f64 / c as f64;
            let center = [radius * t.cos(), radius * t.sin(), 0.3 * radius * (2.0 * t).sin()];
            let mut v = core.clone();
            add(&mut v, &gaussian_blob(grid, center, 0.1 * nf, 0.8));
            basis.expand(&v)
        })
        .collect()
}

/// Pairs rotations with CTFs assigned round-robin from `ctfs`.
pub fn operators_round_robin(
    grid: GridSpec,
    rotations: &[Rotation],
    ctfs: &[CtfParams],
) -> Result<Vec<ImagingOperator>> {
    if ctfs.is_empty() {
        return Err(Error::InvalidParameter("empty CTF table".into()));
    }
    Ok(rotations
        .iter()
        .enumerate()
        .map(|(s, &r)| ImagingOperator::new(r, ctfs[s % ctfs.len()], grid))
        .collect())
}

/// Draws per-image state assignments.
pub fn draw_assignments(probabilities: &[f64], n: usize, seed: u64) -> Result<Vec<usize>> {
    check_probabilities(probabilities)?;
    let dist = WeightedIndex::new(probabilities)
        .map_err(|e| Error::InvalidParameter(format!("state probabilities: {e}")))?;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    Ok((0..n).map(|_| dist.sample(&mut rng)).collect())
}

fn check_probabilities(probabilities: &[f64]) -> Result<()> {
    let total: f64 = probabilities.iter().sum();
    if probabilities.iter().any(|&p| !(p >= 0.0)) || (total - 1.0).abs() > 1e-12 {
        return Err(Error::InvalidParameter(
            "state probabilities must be non-negative and sum to 1".into(),
        ));
    }
    Ok(())
}

/// Noise level that yields the requested heterogeneous SNR.
pub fn sigma_for_snr(
    basis: &BasisSpec,
    ops: &[ImagingOperator],
    states: &[VolumeCoeffs],
    assignments: &[usize],
    mean: &VolumeCoeffs,
    target: f64,
) -> Result<f64> {
    if !(target > 0.0) || !target.is_finite() {
        return Err(Error::InvalidParameter(format!("target SNR {target} must be positive")));
    }
    let energy = heterogeneous_energy(basis, ops, states, assignments, mean)?;
    if energy <= 0.0 {
        return Err(Error::InvalidParameter(
            "cannot reach a target SNR without heterogeneity".into(),
        ));
    }
    let denom = ops.len() as f64 * basis.grid().pixels() as f64 * target;
    Ok((energy / denom).sqrt())
}

/// Three defocus groups at 10 Å pixels, 300 kV, Cs 2 mm, 7% amplitude
/// contrast.
pub fn standard_ctf_table() -> Vec<CtfParams> {
    [1.0e4, 1.7e4, 2.5e4]
        .iter()
        .map(|&d| CtfParams::radial(d, 0.0197, 2.0, 0.07, 10.0).expect("valid constants"))
        .collect()
}

/// Clean images `P_s x_{a_s}` for given assignments.
pub fn clean_images(
    basis: &BasisSpec,
    ops: &[ImagingOperator],
    states: &[VolumeCoeffs],
    assignments: &[usize],
) -> Result<ImageStack> {
    let n = basis.n();
    let mut stack = ImageStack::zeros(ops.len(), n);
    for (s, (op, &a)) in ops.iter().zip(assignments).enumerate() {
        let x = states
            .get(a)
            .ok_or_else(|| Error::InvalidParameter(format!("assignment {a} out of range")))?;
        let img = project(basis, x.as_slice(), op)?;
        stack.image_mut(s).copy_from_slice(&img);
    }
    Ok(stack)
}

/// Adds `σ` times white Gaussian noise to a clean stack.
pub fn add_noise(clean: &ImageStack, sigma: f64, seed: u64) -> Result<ImageStack> {
    if !(sigma >= 0.0) {
        return Err(Error::InvalidParameter(format!("sigma {sigma} must be >= 0")));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let data = clean
        .as_slice()
        .iter()
        .map(|&c| {
            let e: f64 = StandardNormal.sample(&mut rng);
            c + sigma * e
        })
        .collect();
    ImageStack::from_vec(clean.len(), clean.edge(), data)
}

/// `y_s = P_s x_s + σ e_s` with states drawn from `probabilities`.
pub fn simulate_dataset(
    basis: &BasisSpec,
    states: Vec<VolumeCoeffs>,
    probabilities: Vec<f64>,
    ops: &[ImagingOperator],
    sigma: f64,
    seed: u64,
) -> Result<(ImageStack, SimulationTruth)> {
    if states.len() != probabilities.len() {
        return Err(Error::Dimension(format!(
            "{} states but {} probabilities",
            states.len(),
            probabilities.len()
        )));
    }
    let assignments = draw_assignments(&probabilities, ops.len(), seed)?;
    let clean = clean_images(basis, ops, &states, &assignments)?;
    let noisy = add_noise(&clean, sigma, seed.wrapping_add(0x9e37_79b9_7f4a_7c15))?;
    Ok((
        noisy,
        SimulationTruth {
            states,
            probabilities,
            assignments,
            sigma,
            clean_images: clean,
        },
    ))
}
