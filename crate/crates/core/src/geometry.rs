//! Sampling grids and rotations.
//!
//! Grid indices are centered: an edge of `n` samples covers
//! `{-floor(n/2), ..., ceil(n/2 - 1)}`. Arrays store index `a` in `0..n` for
//! centered coordinate `a - floor(n/2)`, in C order with the last axis
//! fastest. The third axis is the projection (viewing) axis.

use std::f64::consts::PI;
use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Lowest centered index of an `n`-point grid.
#[inline]
pub fn grid_lo(n: usize) -> i64 {
    -((n / 2) as i64)
}

/// Centered index range of an `n`-point grid.
pub fn centered_range(n: usize) -> Range<i64> {
    let lo = grid_lo(n);
    lo..lo + n as i64
}

/// Edge length of a volume/image grid together with its symmetric image
/// frequency grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridSpec {
    n: usize,
}

impl GridSpec {
    pub fn new(n: usize) -> Result<Self> {
        if n < 2 {
            return Err(Error::InvalidParameter(format!(
                "grid edge must be at least 2, got {n}"
            )));
        }
        Ok(Self { n })
    }

    #[inline]
    pub fn n(&self) -> usize {
        self.n
    }

    /// Size of the symmetric frequency grid, `2*ceil(N/2) - 1`.
    #[inline]
    pub fn freq_count(&self) -> usize {
        2 * self.n.div_ceil(2) - 1
    }

    pub fn spatial_range(&self) -> Range<i64> {
        centered_range(self.n)
    }

    /// Symmetric image frequency range. For even `N` this drops the
    /// unmatched Nyquist frequency `-N/2`.
    pub fn freq_range(&self) -> Range<i64> {
        centered_range(self.freq_count())
    }

    /// All 2D image frequencies, row-major.
    pub fn image_freqs(&self) -> Vec<[i64; 2]> {
        let r = self.freq_range();
        let mut out = Vec::with_capacity(self.freq_count().pow(2));
        for k0 in r.clone() {
            for k1 in r.clone() {
                out.push([k0, k1]);
            }
        }
        out
    }

    #[inline]
    pub fn voxels(&self) -> usize {
        self.n.pow(3)
    }

    #[inline]
    pub fn pixels(&self) -> usize {
        self.n.pow(2)
    }
}

/// A proper rotation of 3-space.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rotation {
    m: [[f64; 3]; 3],
}

const ROTATION_TOL: f64 = 1e-9;

impl Rotation {
    pub fn identity() -> Self {
        Self {
            m: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
        }
    }

    /// Validates orthonormality and orientation.
    pub fn from_matrix(m: [[f64; 3]; 3]) -> Result<Self> {
        let r = Self { m };
        let err = r.orthonormality_error();
        if !(err <= ROTATION_TOL) || (r.det() - 1.0).abs() > ROTATION_TOL {
            return Err(Error::InvalidParameter(format!(
                "not a rotation matrix (|RᵀR - I| = {err:e}, det = {})",
                r.det()
            )));
        }
        Ok(r)
    }

    pub fn from_row_major(v: &[f64]) -> Result<Self> {
        if v.len() != 9 {
            return Err(Error::Dimension(format!(
                "rotation record needs 9 values, got {}",
                v.len()
            )));
        }
        Self::from_matrix([[v[0], v[1], v[2]], [v[3], v[4], v[5]], [v[6], v[7], v[8]]])
    }

    pub fn to_row_major(&self) -> [f64; 9] {
        let m = &self.m;
        [
            m[0][0], m[0][1], m[0][2], m[1][0], m[1][1], m[1][2], m[2][0], m[2][1], m[2][2],
        ]
    }

    #[inline]
    pub fn matrix(&self) -> &[[f64; 3]; 3] {
        &self.m
    }

    /// Row `i` of the matrix. Rows 0 and 1 span the image plane in volume
    /// coordinates; row 2 is the viewing direction.
    #[inline]
    pub fn row(&self, i: usize) -> [f64; 3] {
        self.m[i]
    }

    pub fn transpose(&self) -> Self {
        let m = &self.m;
        Self {
            m: [
                [m[0][0], m[1][0], m[2][0]],
                [m[0][1], m[1][1], m[2][1]],
                [m[0][2], m[1][2], m[2][2]],
            ],
        }
    }

    pub fn compose(&self, other: &Rotation) -> Self {
        Self {
            m: matmul3(&self.m, &other.m),
        }
    }

    pub fn apply(&self, v: [f64; 3]) -> [f64; 3] {
        let m = &self.m;
        [
            m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
            m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
            m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
        ]
    }

    /// Volume frequency `Rᵀ[k; 0]` of image frequency `k`.
    #[inline]
    pub fn slice_point(&self, k0: f64, k1: f64) -> [f64; 3] {
        let (a, b) = (self.m[0], self.m[1]);
        [
            k0 * a[0] + k1 * b[0],
            k0 * a[1] + k1 * b[1],
            k0 * a[2] + k1 * b[2],
        ]
    }

    pub fn det(&self) -> f64 {
        let m = &self.m;
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
            - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    }

    /// Max-abs entry of `RᵀR - I`.
    pub fn orthonormality_error(&self) -> f64 {
        let g = matmul3(&self.transpose().m, &self.m);
        let mut e: f64 = 0.0;
        for (i, row) in g.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                let t = if i == j { 1.0 } else { 0.0 };
                e = e.max((v - t).abs());
            }
        }
        e
    }

    /// Polar angle between the viewing direction and the z axis.
    pub fn tilt(&self) -> f64 {
        self.m[2][2].clamp(-1.0, 1.0).acos()
    }
}

impl Serialize for Rotation {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_row_major().serialize(s)
    }
}

impl<'de> Deserialize<'de> for Rotation {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let v = <[f64; 9]>::deserialize(d)?;
        Rotation::from_row_major(&v).map_err(serde::de::Error::custom)
    }
}

fn matmul3(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut c = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            c[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j] + a[i][2] * b[2][j];
        }
    }
    c
}

fn rot_z(t: f64) -> [[f64; 3]; 3] {
    let (s, c) = t.sin_cos();
    [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]
}

fn rot_y(t: f64) -> [[f64; 3]; 3] {
    let (s, c) = t.sin_cos();
    [[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]]
}

/// `R_z(alpha) R_y(beta) R_z(gamma)`, relative z-y-z convention.
pub fn euler_to_matrix(alpha: f64, beta: f64, gamma: f64) -> Rotation {
    Rotation {
        m: matmul3(&matmul3(&rot_z(alpha), &rot_y(beta)), &rot_z(gamma)),
    }
}

fn quaternion_to_rotation(q: [f64; 4]) -> Rotation {
    let [w, x, y, z] = q;
    Rotation {
        m: [
            [
                1.0 - 2.0 * (y * y + z * z),
                2.0 * (x * y - w * z),
                2.0 * (x * z + w * y),
            ],
            [
                2.0 * (x * y + w * z),
                1.0 - 2.0 * (x * x + z * z),
                2.0 * (y * z - w * x),
            ],
            [
                2.0 * (x * z - w * y),
                2.0 * (y * z + w * x),
                1.0 - 2.0 * (x * x + y * y),
            ],
        ],
    }
}

/// Haar-uniform rotations from normalized Gaussian quaternions.
pub fn sample_rotations_uniform(n: usize, seed: u64) -> Vec<Rotation> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| loop {
            let q: [f64; 4] = std::array::from_fn(|_| rng.sample(StandardNormal));
            let norm = q.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 1e-12 {
                break quaternion_to_rotation(q.map(|v| v / norm));
            }
        })
        .collect()
}

/// Rotations whose viewing directions concentrate around the z axis as
/// `delta` grows; `delta = 1` is Haar-uniform.
///
/// `alpha, gamma ~ U[0, 2π]` and `cos(beta) = 1 - 2 U^delta`.
pub fn sample_rotations_skewed(n: usize, delta: f64, seed: u64) -> Result<Vec<Rotation>> {
    if !(delta >= 1.0) {
        return Err(Error::InvalidParameter(format!(
            "skew delta must be >= 1, got {delta}"
        )));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    Ok((0..n)
        .map(|_| {
            let alpha = 2.0 * PI * rng.random::<f64>();
            let u: f64 = rng.random();
            let beta = (1.0 - 2.0 * u.powf(delta)).clamp(-1.0, 1.0).acos();
            let gamma = 2.0 * PI * rng.random::<f64>();
            euler_to_matrix(alpha, beta, gamma)
        })
        .collect())
}
