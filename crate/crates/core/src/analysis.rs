//! Per-image heterogeneity analysis: Wiener coordinates, reconstruction,
//! distance matrices, k-means and diffusion maps.

use std::f64::consts::PI;

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};
use num_complex::Complex64;
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::basis::{BasisSpec, VolumeCoeffs};
use crate::error::{Error, Result};
use crate::estimators::LowRankModel;
use crate::geometry::{centered_range, grid_lo, Rotation};
use crate::imaging::{median, project, ImageStack, ImagingOperator};
use crate::shrinkage::fix_sign;

/// Per-image coordinates, one row per image.
#[derive(Clone, Debug, PartialEq)]
pub struct Coordinates(pub DMatrix<f64>);

impl Coordinates {
    pub fn new(values: DMatrix<f64>) -> Result<Self> {
        if !values.iter().all(|x| x.is_finite()) {
            return Err(Error::NonFinite("coordinates".into()));
        }
        Ok(Self(values))
    }

    pub fn n(&self) -> usize {
        self.0.nrows()
    }

    pub fn rank(&self) -> usize {
        self.0.ncols()
    }

    pub fn row(&self, s: usize) -> DVector<f64> {
        self.0.row(s).transpose()
    }
}

/// Symmetric, non-negative, zero-diagonal pairwise distances.
#[derive(Clone, Debug, PartialEq)]
pub struct DistanceMatrix(pub DMatrix<f64>);

impl DistanceMatrix {
    pub fn n(&self) -> usize {
        self.0.nrows()
    }

    pub fn get(&self, s: usize, t: usize) -> f64 {
        self.0[(s, t)]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionEmbedding {
    /// `n x dim`, column `i` is `λ_i^τ φ_i`.
    pub coordinates: DMatrix<f64>,
    pub eigvals: Vec<f64>,
    pub tau: f64,
    pub eps: f64,
}

/// Wiener filter estimate of each image's coordinates along the model's
/// eigenvolumes, via a thin QR of `P_s V` per image.
pub fn wiener_coordinates(
    basis: &BasisSpec,
    images: &ImageStack,
    ops: &[ImagingOperator],
    model: &LowRankModel,
    sigma: f64,
) -> Result<Coordinates> {
    if !(sigma > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "the Wiener filter needs sigma > 0, got {sigma}"
        )));
    }
    let r = model.rank();
    if r == 0 {
        return Err(Error::InvalidParameter("model has rank 0".into()));
    }
    if images.len() != ops.len() {
        return Err(Error::Dimension(format!("{} images but {} operators", images.len(), ops.len())));
    }
    if model.mean.len() != basis.p() {
        return Err(Error::Dimension("model and basis sizes disagree".into()));
    }
    let pixels = images.pixels();
    let lambda = DMatrix::from_diagonal(&model.eigvals);
    let s2 = sigma * sigma;
    let mut out = DMatrix::zeros(ops.len(), r);
    let mut pv = DMatrix::zeros(pixels, r);
    for (s, op) in ops.iter().enumerate() {
        for j in 0..r {
            let col = model.eigvecs.column(j).into_owned();
            pv.set_column(j, &DVector::from_vec(project(basis, col.as_slice(), op)?));
        }
        let pm = project(basis, model.mean.as_slice(), op)?;
        let resid = DVector::from_iterator(pixels, images.image(s).iter().zip(&pm).map(|(y, m)| y - m));
        let qr = pv.clone().qr();
        let (o, u) = (qr.q(), qr.r());
        let mut m = &u * &lambda * u.transpose();
        for i in 0..r {
            m[(i, i)] += s2;
        }
        let chol = Cholesky::new(m).ok_or_else(|| Error::NotPositiveDefinite("Wiener system".into()))?;
        let alpha = &lambda * u.transpose() * chol.solve(&(o.transpose() * resid));
        out.set_row(s, &alpha.transpose());
    }
    Coordinates::new(out)
}

/// `μ + V α`.
pub fn reconstruct_volume(alpha: &DVector<f64>, model: &LowRankModel) -> Result<VolumeCoeffs> {
    if alpha.len() != model.rank() {
        return Err(Error::Dimension(format!("{} coordinates for a rank {} model", alpha.len(), model.rank())));
    }
    Ok(&model.mean + &model.eigvecs * alpha)
}

/// Projection of the reconstructed volume under `op`.
pub fn denoise_image(
    basis: &BasisSpec,
    alpha: &DVector<f64>,
    model: &LowRankModel,
    op: &ImagingOperator,
) -> Result<Vec<f64>> {
    let x = reconstruct_volume(alpha, model)?;
    project(basis, x.as_slice(), op)
}

/// Pairwise Euclidean distances between coordinate rows. Coordinates are
/// isometric to the reconstructed volumes, so this is also the volume
/// distance.
pub fn dist_euclidean(coords: &Coordinates) -> DistanceMatrix {
    let n = coords.n();
    let mut d = DMatrix::zeros(n, n);
    for s in 0..n {
        for t in (s + 1)..n {
            let v = (coords.0.row(s) - coords.0.row(t)).norm();
            d[(s, t)] = v;
            d[(t, s)] = v;
        }
    }
    DistanceMatrix(d)
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

/// In-plane directions of the line shared by the central planes of two
/// views. Both describe the same 3D direction.
pub fn common_line_vectors(rs: &Rotation, rt: &Rotation) -> Result<([f64; 2], [f64; 2])> {
    let u = cross(rs.row(2), rt.row(2));
    let norm = dot(u, u).sqrt();
    if norm < 1e-10 {
        return Err(Error::DegeneratePair);
    }
    let u = [u[0] / norm, u[1] / norm, u[2] / norm];
    let c_st = [dot(rs.row(0), u), dot(rs.row(1), u)];
    let c_ts = [dot(rt.row(0), u), dot(rt.row(1), u)];
    Ok((c_st, c_ts))
}

/// Image Fourier transform sampled at `k c` for `k` in the centered range.
fn line_transform(image: &[f64], n: usize, c: [f64; 2]) -> Vec<Complex64> {
    let lo = grid_lo(n);
    let ks = centered_range(n);
    let mut out = vec![Complex64::new(0.0, 0.0); n];
    for i0 in 0..n {
        for i1 in 0..n {
            let y = image[i0 * n + i1];
            if y == 0.0 {
                continue;
            }
            let theta = -2.0 * PI * (c[0] * (lo + i0 as i64) as f64 + c[1] * (lo + i1 as i64) as f64) / n as f64;
            let step = Complex64::from_polar(1.0, theta);
            let mut w = Complex64::from_polar(y, theta * ks.start as f64);
            for o in out.iter_mut() {
                *o += w;
                w *= step;
            }
        }
    }
    out
}

/// Common-lines distance `Σ_k |ŷ_s(k c_st) − ŷ_t(k c_ts)|²`. Pairs with
/// parallel viewing axes use the Euclidean distance between `fallback`
/// rows instead.
pub fn dist_common_lines(images: &ImageStack, rotations: &[Rotation], fallback: &Coordinates) -> Result<DistanceMatrix> {
    let n_img = images.len();
    if rotations.len() != n_img || fallback.n() != n_img {
        return Err(Error::Dimension(format!(
            "{} images, {} rotations, {} coordinate rows",
            n_img,
            rotations.len(),
            fallback.n()
        )));
    }
    let n = images.edge();
    let mut d = DMatrix::zeros(n_img, n_img);
    for s in 0..n_img {
        for t in (s + 1)..n_img {
            let v = match common_line_vectors(&rotations[s], &rotations[t]) {
                Ok((c_st, c_ts)) => {
                    let a = line_transform(images.image(s), n, c_st);
                    let b = line_transform(images.image(t), n, c_ts);
                    a.iter().zip(&b).map(|(x, y)| (x - y).norm_sqr()).sum()
                }
                Err(Error::DegeneratePair) => (fallback.0.row(s) - fallback.0.row(t)).norm(),
                Err(e) => return Err(e),
            };
            d[(s, t)] = v;
            d[(t, s)] = v;
        }
    }
    Ok(DistanceMatrix(d))
}

#[derive(Clone, Debug, PartialEq)]
pub struct KMeansResult {
    pub labels: Vec<usize>,
    pub centers: DMatrix<f64>,
    pub inertia: f64,
}

pub const DEFAULT_RESTARTS: usize = 50;
const LLOYD_MAX_ITER: usize = 300;

fn sq_dist(points: &DMatrix<f64>, s: usize, centers: &DMatrix<f64>, c: usize) -> f64 {
    points.row(s).iter().zip(centers.row(c).iter()).map(|(a, b)| (a - b) * (a - b)).sum()
}

fn kmeans_pp(points: &DMatrix<f64>, c: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let n = points.nrows();
    let mut centers = DMatrix::zeros(c, points.ncols());
    centers.set_row(0, &points.row(rng.random_range(0..n)));
    let mut best: Vec<f64> = (0..n).map(|s| sq_dist(points, s, &centers, 0)).collect();
    for j in 1..c {
        let pick = match WeightedIndex::new(&best) {
            Ok(w) => w.sample(rng),
            // every point already sits on a center
            Err(_) => rng.random_range(0..n),
        };
        centers.set_row(j, &points.row(pick));
        for (s, b) in best.iter_mut().enumerate() {
            *b = b.min(sq_dist(points, s, &centers, j));
        }
    }
    centers
}

/// Assigns each point to its nearest center, lowest index on ties.
fn assign(points: &DMatrix<f64>, centers: &DMatrix<f64>, labels: &mut [usize]) -> (bool, f64) {
    let mut changed = false;
    let mut inertia = 0.0;
    for (s, l) in labels.iter_mut().enumerate() {
        let (mut arg, mut min) = (0, f64::INFINITY);
        for c in 0..centers.nrows() {
            let d = sq_dist(points, s, centers, c);
            if d < min {
                (arg, min) = (c, d);
            }
        }
        changed |= *l != arg;
        *l = arg;
        inertia += min;
    }
    (changed, inertia)
}

fn lloyd(points: &DMatrix<f64>, mut centers: DMatrix<f64>) -> KMeansResult {
    let (n, dim) = points.shape();
    let c = centers.nrows();
    let mut labels = vec![usize::MAX; n];
    let (_, mut inertia) = assign(points, &centers, &mut labels);
    for _ in 0..LLOYD_MAX_ITER {
        let mut sums = DMatrix::zeros(c, dim);
        let mut counts = vec![0usize; c];
        for (s, &l) in labels.iter().enumerate() {
            counts[l] += 1;
            let mut row = sums.row_mut(l);
            row += points.row(s);
        }
        for j in 0..c {
            if counts[j] > 0 {
                centers.set_row(j, &(sums.row(j) / counts[j] as f64));
            } else {
                // empty cluster: move it to the point farthest from its center
                let far = (0..n)
                    .max_by(|&a, &b| {
                        sq_dist(points, a, &centers, labels[a]).total_cmp(&sq_dist(points, b, &centers, labels[b]))
                    })
                    .unwrap_or(0);
                centers.set_row(j, &points.row(far));
                labels[far] = j;
            }
        }
        let (changed, new_inertia) = assign(points, &centers, &mut labels);
        inertia = new_inertia;
        if !changed {
            break;
        }
    }
    KMeansResult { labels, centers, inertia }
}

/// Best-of-`restarts` Lloyd iteration from k-means++ seeds. Rows of
/// `points` are observations.
pub fn kmeans_cluster(points: &DMatrix<f64>, c: usize, seed: u64, restarts: usize) -> Result<KMeansResult> {
    let n = points.nrows();
    if c < 2 {
        return Err(Error::InvalidParameter(format!("need at least 2 clusters, got {c}")));
    }
    if c > n {
        return Err(Error::InvalidParameter(format!("{c} clusters for {n} points")));
    }
    if restarts < 1 {
        return Err(Error::InvalidParameter("restarts must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<KMeansResult> = None;
    for _ in 0..restarts {
        let run = lloyd(points, kmeans_pp(points, c, &mut rng));
        if best.as_ref().is_none_or(|b| run.inertia < b.inertia) {
            best = Some(run);
        }
    }
    Ok(best.expect("restarts >= 1"))
}

/// Upper bound on the number of clusters implied by `rank` dominant
/// eigenvalues.
pub fn cluster_count_bound(rank: usize) -> usize {
    rank + 1
}

/// Default diffusion scale: median squared off-diagonal distance.
pub fn default_eps(dist: &DistanceMatrix) -> f64 {
    let n = dist.n();
    let mut sq: Vec<f64> = Vec::with_capacity(n * n.saturating_sub(1) / 2);
    for s in 0..n {
        for t in (s + 1)..n {
            sq.push(dist.get(s, t).powi(2));
        }
    }
    if sq.is_empty() {
        return 1.0;
    }
    let m = median(&mut sq);
    if m > 0.0 {
        m
    } else {
        1.0
    }
}

/// Spectrum of the Markov matrix `A = D⁻¹W`, `W = exp(−d²/ε)`: the trivial
/// eigenvalue first, then the rest by decreasing magnitude. Columns of the
/// returned matrix are right eigenvectors of `A`.
pub fn markov_spectrum(dist: &DistanceMatrix, eps: f64) -> Result<(Vec<f64>, DMatrix<f64>)> {
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::InvalidParameter(format!("diffusion scale {eps} must be positive")));
    }
    let n = dist.n();
    let w = dist.0.map(|d| (-d * d / eps).exp());
    let deg: Vec<f64> = (0..n).map(|s| w.row(s).sum()).collect();
    let half: Vec<f64> = deg.iter().map(|d| d.sqrt()).collect();
    let sym = DMatrix::from_fn(n, n, |s, t| w[(s, t)] / (half[s] * half[t]));
    // the trivial pair is known exactly; deflating it keeps it exact even
    // when nearly disconnected data put other eigenvalues next to 1
    let norm = half.iter().map(|h| h * h).sum::<f64>().sqrt();
    let psi0 = DVector::from_fn(n, |s, _| half[s] / norm);
    let mut deflated = sym;
    deflated.ger(-1.0, &psi0, &psi0, 1.0);
    let eig = SymmetricEigen::new(deflated);
    let drop = (0..n)
        .max_by(|&a, &b| {
            let ca = eig.eigenvectors.column(a).dot(&psi0).abs();
            let cb = eig.eigenvectors.column(b).dot(&psi0).abs();
            ca.total_cmp(&cb)
        })
        .expect("nonempty");
    let mut order: Vec<usize> = (0..n).filter(|&i| i != drop).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].abs().total_cmp(&eig.eigenvalues[a].abs()));
    let mut vals = vec![1.0];
    vals.extend(order.iter().map(|&i| eig.eigenvalues[i]));
    let mut vecs = DMatrix::zeros(n, n);
    vecs.set_column(0, &DVector::from_element(n, 1.0 / norm));
    for (j, &i) in order.iter().enumerate() {
        let mut phi = DVector::from_fn(n, |s, _| eig.eigenvectors[(s, i)] / half[s]);
        fix_sign(&mut phi);
        vecs.set_column(j + 1, &phi);
    }
    Ok((vals, vecs))
}

/// Diffusion coordinates `(λ_2^τ φ_2, …, λ_{dim+1}^τ φ_{dim+1})`.
pub fn diffusion_map(dist: &DistanceMatrix, eps: Option<f64>, tau: f64, dim: usize) -> Result<DiffusionEmbedding> {
    let n = dist.n();
    if dim == 0 || dim + 1 > n {
        return Err(Error::InvalidParameter(format!("embedding dimension {dim} for {n} points")));
    }
    if !(tau >= 0.0) {
        return Err(Error::InvalidParameter(format!("diffusion time {tau} must be >= 0")));
    }
    let eps = eps.unwrap_or_else(|| default_eps(dist));
    let (vals, vecs) = markov_spectrum(dist, eps)?;
    let eigvals: Vec<f64> = vals[1..=dim].to_vec();
    let coordinates = DMatrix::from_fn(n, dim, |s, i| eigvals[i].signum() * eigvals[i].abs().powf(tau) * vecs[(s, i + 1)]);
    Ok(DiffusionEmbedding {
        coordinates,
        eigvals,
        tau,
        eps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::BasisKind;
    use crate::geometry::{euler_to_matrix, sample_rotations_uniform, GridSpec};
    use crate::imaging::CtfParams;
    use crate::simulate::operators_round_robin;

    fn random_model(basis: &BasisSpec, r: usize, seed: u64) -> LowRankModel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = basis.p();
        let a = DMatrix::from_fn(p, r, |_, _| rng.random::<f64>() - 0.5);
        let q = a.qr().q();
        let vals = DVector::from_fn(r, |i, _| 2.0 / (i + 1) as f64);
        let mean = DVector::from_fn(p, |_, _| rng.random::<f64>());
        LowRankModel::new(mean, q, vals).unwrap()
    }

    fn dense_projection(basis: &BasisSpec, op: &ImagingOperator) -> DMatrix<f64> {
        let p = basis.p();
        let mut e = vec![0.0; p];
        let n2 = basis.n() * basis.n();
        let mut m = DMatrix::zeros(n2, p);
        for j in 0..p {
            e[j] = 1.0;
            m.set_column(j, &DVector::from_vec(project(basis, &e, op).unwrap()));
            e[j] = 0.0;
        }
        m
    }

    #[test]
    fn wiener_matches_dense_filter() {
        let basis = BasisSpec::voxel(4).unwrap();
        let g = GridSpec::new(4).unwrap();
        let ctfs = [CtfParams::Identity, CtfParams::radial(1.5e4, 0.0197, 2.0, 0.07, 10.0).unwrap()];
        let ops = operators_round_robin(g, &sample_rotations_uniform(4, 8), &ctfs).unwrap();
        let model = random_model(&basis, 3, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data: Vec<f64> = (0..4 * 16).map(|_| rng.random::<f64>()).collect();
        let y = ImageStack::from_vec(4, 4, data).unwrap();
        let sigma = 0.4;
        let got = wiener_coordinates(&basis, &y, &ops, &model, sigma).unwrap();
        let lam = DMatrix::from_diagonal(&model.eigvals);
        for (s, op) in ops.iter().enumerate() {
            let p = dense_projection(&basis, op);
            let pv = &p * &model.eigvecs;
            let mut c = &pv * &lam * pv.transpose();
            for i in 0..16 {
                c[(i, i)] += sigma * sigma;
            }
            let h = &lam * pv.transpose() * c.try_inverse().unwrap();
            let want = h * (DVector::from_column_slice(y.image(s)) - &p * &model.mean);
            let diff = (got.row(s) - &want).norm();
            assert!(diff <= 1e-8 * want.norm(), "image {s}: {diff}");
        }
    }

    #[test]
    fn wiener_zero_residual_and_scalar_gain() {
        let basis = BasisSpec::voxel(4).unwrap();
        let g = GridSpec::new(4).unwrap();
        let ops = operators_round_robin(g, &sample_rotations_uniform(3, 1), &[CtfParams::Identity]).unwrap();
        let model = random_model(&basis, 2, 5);
        let mut y = ImageStack::zeros(3, 4);
        for (s, op) in ops.iter().enumerate() {
            y.image_mut(s).copy_from_slice(&project(&basis, model.mean.as_slice(), op).unwrap());
        }
        let a = wiener_coordinates(&basis, &y, &ops, &model, 0.3).unwrap();
        assert!(a.0.norm() < 1e-12);
        assert!(wiener_coordinates(&basis, &y, &ops, &model, 0.0).is_err());

        // rank one: α = ℓ⟨Pv, r⟩/(ℓ‖Pv‖² + σ²), and shrinks as σ grows
        let model = random_model(&basis, 1, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let data: Vec<f64> = (0..48).map(|_| rng.random::<f64>()).collect();
        let y = ImageStack::from_vec(3, 4, data).unwrap();
        let l = model.eigvals[0];
        let mut prev = f64::INFINITY;
        for sigma in [0.1, 0.5, 1.0, 4.0] {
            let a = wiener_coordinates(&basis, &y, &ops, &model, sigma).unwrap();
            for (s, op) in ops.iter().enumerate() {
                let pv = DVector::from_vec(project(&basis, model.eigvecs.column(0).as_slice(), op).unwrap());
                let pm = DVector::from_vec(project(&basis, model.mean.as_slice(), op).unwrap());
                let r = DVector::from_column_slice(y.image(s)) - pm;
                let want = l * pv.dot(&r) / (l * pv.norm_squared() + sigma * sigma);
                assert!((a.0[(s, 0)] - want).abs() <= 1e-10 * want.abs().max(1.0));
            }
            let norm = a.0.norm();
            assert!(norm <= prev);
            prev = norm;
        }
    }

    #[test]
    fn reconstruct_and_denoise() {
        let basis = BasisSpec::new(BasisKind::TruncFourier, 6).unwrap();
        let model = random_model(&basis, 3, 11);
        let zero = DVector::zeros(3);
        assert_eq!(reconstruct_volume(&zero, &model).unwrap(), model.mean);
        let e1 = DVector::from_vec(vec![1.0, 0.0, 0.0]);
        let x = reconstruct_volume(&e1, &model).unwrap();
        assert!((&x - &model.mean - model.eigvecs.column(0)).norm() < 1e-14);
        let alpha = DVector::from_vec(vec![0.3, -1.2, 2.0]);
        let back = model.eigvecs.transpose() * (reconstruct_volume(&alpha, &model).unwrap() - &model.mean);
        assert!((back - &alpha).norm() < 1e-10);
        assert!(reconstruct_volume(&DVector::zeros(2), &model).is_err());

        let g = GridSpec::new(6).unwrap();
        let op = operators_round_robin(g, &sample_rotations_uniform(1, 4), &[CtfParams::Identity]).unwrap()[0];
        let y0 = denoise_image(&basis, &zero, &model, &op).unwrap();
        assert_eq!(y0, project(&basis, model.mean.as_slice(), &op).unwrap());
        let y1 = denoise_image(&basis, &alpha, &model, &op).unwrap();
        let y2 = denoise_image(&basis, &(&alpha * 2.0), &model, &op).unwrap();
        for i in 0..36 {
            assert!((y2[i] - y0[i] - 2.0 * (y1[i] - y0[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn euclidean_distances() {
        let c = Coordinates::new(DMatrix::from_row_slice(2, 1, &[0.0, 3.0])).unwrap();
        assert_eq!(dist_euclidean(&c).get(0, 1), 3.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let c = Coordinates::new(DMatrix::from_fn(5, 2, |_, _| rng.random())).unwrap();
        let d = dist_euclidean(&c);
        for s in 0..5 {
            assert_eq!(d.get(s, s), 0.0);
            for t in 0..5 {
                let dx = c.0[(s, 0)] - c.0[(t, 0)];
                let dy = c.0[(s, 1)] - c.0[(t, 1)];
                assert!((d.get(s, t) - (dx * dx + dy * dy).sqrt()).abs() < 1e-15);
                assert_eq!(d.get(s, t), d.get(t, s));
            }
        }
    }

    #[test]
    fn common_line_geometry() {
        let rt = Rotation::from_matrix([[1.0, 0.0, 0.0], [0.0, 0.0, -1.0], [0.0, 1.0, 0.0]]).unwrap();
        let (c_st, c_ts) = common_line_vectors(&Rotation::identity(), &rt).unwrap();
        assert!((c_st[0] + 1.0).abs() < 1e-15 && c_st[1].abs() < 1e-15);
        assert!((c_ts[0] + 1.0).abs() < 1e-15 && c_ts[1].abs() < 1e-15);
        assert!(matches!(
            common_line_vectors(&Rotation::identity(), &Rotation::identity()),
            Err(Error::DegeneratePair)
        ));
        let rots = sample_rotations_uniform(2, 9);
        let (a, b) = common_line_vectors(&rots[0], &rots[1]).unwrap();
        let (b2, a2) = common_line_vectors(&rots[1], &rots[0]).unwrap();
        for v in [a, b] {
            assert!(((v[0] * v[0] + v[1] * v[1]).sqrt() - 1.0).abs() < 1e-12);
        }
        // swapping flips the cross product, so both directions negate
        for (x, y) in [(a, a2), (b, b2)] {
            assert!((x[0] + y[0]).abs() < 1e-12 && (x[1] + y[1]).abs() < 1e-12);
        }
    }

    #[test]
    fn common_lines_consistency() {
        let n = 8;
        let basis = BasisSpec::new(BasisKind::TruncFourier, n).unwrap();
        let g = GridSpec::new(n).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = DVector::from_fn(basis.p(), |_, _| rng.random::<f64>() - 0.5);
        let rs = Rotation::identity();
        let rt = euler_to_matrix(0.0, PI / 2.0, 0.0);
        let ops: Vec<_> = [rs, rt].iter().map(|&r| ImagingOperator::new(r, CtfParams::Identity, g)).collect();
        let mut y = ImageStack::zeros(2, n);
        for (s, op) in ops.iter().enumerate() {
            y.image_mut(s).copy_from_slice(&project(&basis, x.as_slice(), op).unwrap());
        }
        let (c_st, _) = common_line_vectors(&rs, &rt).unwrap();
        let energy: f64 = line_transform(y.image(0), n, c_st).iter().map(|z| z.norm_sqr()).sum();
        let fb = Coordinates::new(DMatrix::zeros(2, 1)).unwrap();
        let d = dist_common_lines(&y, &[rs, rt], &fb).unwrap();
        assert!(energy > 0.0);
        assert!(d.get(0, 1) <= 1e-8 * energy, "{} vs {energy}", d.get(0, 1));

        // degenerate pair falls back to coordinates
        let fb = Coordinates::new(DMatrix::from_row_slice(2, 1, &[1.0, 4.0])).unwrap();
        let d = dist_common_lines(&y, &[rs, rs], &fb).unwrap();
        assert_eq!(d.get(0, 1), 3.0);
    }

    #[test]
    fn common_lines_disjoint_spectra() {
        // two images whose spectra along the line do not overlap: the
        // distance is the sum of both line energies
        let n = 8;
        let lo = grid_lo(n) as f64;
        let wave = |f: f64| -> Vec<f64> {
            (0..n * n).map(|i| (2.0 * PI * f * (lo + (i % n) as f64) / n as f64).cos()).collect()
        };
        let y = ImageStack::from_vec(2, n, [wave(1.0), wave(2.0)].concat()).unwrap();
        let rs = Rotation::identity();
        let rt = euler_to_matrix(0.0, PI / 2.0, 0.0);
        let (c_st, c_ts) = common_line_vectors(&rs, &rt).unwrap();
        let e = |img: &[f64], c| line_transform(img, n, c).iter().map(|z| z.norm_sqr()).sum::<f64>();
        let want = e(y.image(0), c_st) + e(y.image(1), c_ts);
        let fb = Coordinates::new(DMatrix::zeros(2, 1)).unwrap();
        let d = dist_common_lines(&y, &[rs, rt], &fb).unwrap();
        assert!(want > 0.0);
        assert!((d.get(0, 1) - want).abs() <= 1e-9 * want, "{} {want} {c_st:?} {c_ts:?}", d.get(0, 1));
    }

    #[test]
    fn kmeans_basics() {
        let pts = DMatrix::from_column_slice(6, 1, &[0.0, 0.1, 0.2, 10.0, 10.1, 10.2]);
        let r = kmeans_cluster(&pts, 2, 1, 5).unwrap();
        assert_eq!(r.labels[0], r.labels[1]);
        assert_eq!(r.labels[1], r.labels[2]);
        assert_eq!(r.labels[3], r.labels[4]);
        assert_ne!(r.labels[0], r.labels[3]);
        assert_eq!(r, kmeans_cluster(&pts, 2, 1, 5).unwrap());

        let same = DMatrix::from_element(5, 2, 1.5);
        let r = kmeans_cluster(&same, 3, 4, 3).unwrap();
        assert_eq!(r.inertia, 0.0);
        assert!(kmeans_cluster(&pts, 1, 0, 1).is_err());
        assert!(kmeans_cluster(&pts, 7, 0, 1).is_err());
    }

    #[test]
    fn diffusion_trivial_pair_and_tau() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let c = Coordinates::new(DMatrix::from_fn(12, 3, |_, _| rng.random())).unwrap();
        let d = dist_euclidean(&c);
        let eps = default_eps(&d);
        let (vals, vecs) = markov_spectrum(&d, eps).unwrap();
        assert!((vals[0] - 1.0).abs() < 1e-10);
        let phi = vecs.column(0);
        let spread = phi.max() - phi.min();
        assert!(spread <= 1e-10 * phi.amax());
        assert!(vals.iter().all(|v| v.abs() <= 1.0 + 1e-10));

        let e1 = diffusion_map(&d, None, 1.0, 3).unwrap();
        let e2 = diffusion_map(&d, None, 2.0, 3).unwrap();
        for i in 0..3 {
            for s in 0..12 {
                let want = e1.coordinates[(s, i)] * e1.eigvals[i];
                assert!((e2.coordinates[(s, i)] - want).abs() < 1e-12);
            }
        }
        assert!(diffusion_map(&d, None, 1.0, 12).is_err());
    }
}
