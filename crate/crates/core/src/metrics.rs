//! Evaluation metrics against known ground truth.

use nalgebra::{DMatrix, DVector};
use pathfinding::prelude::{kuhn_munkres, Matrix};

use crate::error::{Error, Result};

/// `|⟨a, b⟩| / (‖a‖‖b‖)`.
pub fn eigvec_correlation(a: &DVector<f64>, b: &DVector<f64>) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Dimension(format!("vectors of length {} and {}", a.len(), b.len())));
    }
    let denom = a.norm() * b.norm();
    if denom == 0.0 {
        return Err(Error::InvalidParameter("correlation with a zero vector".into()));
    }
    Ok((a.dot(b).abs() / denom).min(1.0))
}

/// Cosine of the largest principal angle between the column spans of `u`
/// and `v` (both re-orthonormalized).
pub fn principal_angle_cos(u: &DMatrix<f64>, v: &DMatrix<f64>) -> Result<f64> {
    if u.nrows() != v.nrows() || u.ncols() != v.ncols() || u.ncols() == 0 {
        return Err(Error::Dimension(format!(
            "subspaces {}x{} and {}x{}",
            u.nrows(),
            u.ncols(),
            v.nrows(),
            v.ncols()
        )));
    }
    let qu = u.clone().qr().q();
    let qv = v.clone().qr().q();
    let sv = (qu.transpose() * qv).singular_values();
    Ok(sv.min().min(1.0))
}

fn confusion(labels: &[usize], truth: &[usize]) -> (Vec<Vec<usize>>, usize) {
    let m = labels.iter().chain(truth).max().map_or(0, |x| x + 1);
    let mut c = vec![vec![0usize; m]; m];
    for (&l, &t) in labels.iter().zip(truth) {
        c[l][t] += 1;
    }
    (c, m)
}

fn best_permutation(c: &[Vec<usize>], perm: &mut Vec<usize>, used: &mut [bool], acc: usize, best: &mut usize) {
    let i = perm.len();
    if i == c.len() {
        *best = (*best).max(acc);
        return;
    }
    for j in 0..c.len() {
        if !used[j] {
            used[j] = true;
            perm.push(j);
            best_permutation(c, perm, used, acc + c[i][j], best);
            perm.pop();
            used[j] = false;
        }
    }
}

/// Fraction of images correctly labeled under the best matching of
/// predicted to true labels.
pub fn clustering_accuracy(labels: &[usize], truth: &[usize]) -> Result<f64> {
    if labels.len() != truth.len() {
        return Err(Error::Dimension(format!("{} labels for {} images", labels.len(), truth.len())));
    }
    if labels.is_empty() {
        return Err(Error::InvalidParameter("no labels".into()));
    }
    let (c, m) = confusion(labels, truth);
    let matched = if m <= 8 {
        let mut best = 0;
        best_permutation(&c, &mut Vec::with_capacity(m), &mut vec![false; m], 0, &mut best);
        best
    } else {
        let weights = Matrix::from_rows(c.iter().map(|r| r.iter().map(|&x| x as i64))).expect("square confusion");
        kuhn_munkres(&weights).0 as usize
    };
    Ok(matched as f64 / labels.len() as f64)
}

/// `‖est − truth‖ / ‖truth‖` over concatenated values.
pub fn nrmse(est: &[f64], truth: &[f64]) -> Result<f64> {
    if est.len() != truth.len() {
        return Err(Error::Dimension(format!("{} estimated vs {} true values", est.len(), truth.len())));
    }
    let t: f64 = truth.iter().map(|x| x * x).sum();
    if t == 0.0 {
        return Err(Error::InvalidParameter("NRMSE against a zero truth".into()));
    }
    let e: f64 = est.iter().zip(truth).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok((e / t).sqrt())
}

/// NRMSE aggregated over a stack of volumes.
pub fn nrmse_stack(est: &[DVector<f64>], truth: &[DVector<f64>]) -> Result<f64> {
    if est.len() != truth.len() {
        return Err(Error::Dimension(format!("{} estimated vs {} true volumes", est.len(), truth.len())));
    }
    let flat = |v: &[DVector<f64>]| v.iter().flat_map(|x| x.iter().copied()).collect::<Vec<_>>();
    nrmse(&flat(est), &flat(truth))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn correlation_cases() {
        let a = DVector::from_vec(vec![1.0, 2.0, 0.0]);
        assert!((eigvec_correlation(&a, &a).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(eigvec_correlation(&a, &DVector::from_vec(vec![-2.0, 1.0, 5.0])).unwrap(), 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let u = DVector::from_fn(8, |_, _| rng.random::<f64>() - 0.5);
        let v = DVector::from_fn(8, |_, _| rng.random::<f64>() - 0.5);
        let mut d = 0.0;
        let (mut nu, mut nv) = (0.0, 0.0);
        for i in 0..8 {
            d += u[i] * v[i];
            nu += u[i] * u[i];
            nv += v[i] * v[i];
        }
        let want = d.abs() / (nu * nv).sqrt();
        assert!((eigvec_correlation(&u, &v).unwrap() - want).abs() < 1e-14);
    }

    #[test]
    fn principal_angles() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let u = DMatrix::from_fn(6, 2, |_, _| rng.random::<f64>());
        assert!((principal_angle_cos(&u, &u).unwrap() - 1.0).abs() < 1e-12);
        // same span, different basis
        let mix = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, -1.0, 3.0]);
        assert!((principal_angle_cos(&u, &(&u * mix)).unwrap() - 1.0).abs() < 1e-12);
        let e = DMatrix::<f64>::identity(6, 6);
        let a = e.columns(0, 2).into_owned();
        let b = e.columns(2, 2).into_owned();
        assert!(principal_angle_cos(&a, &b).unwrap() < 1e-15);
        let x = u.column(0).into_owned();
        let y = DVector::from_fn(6, |_, _| rng.random::<f64>());
        let r1 = principal_angle_cos(&DMatrix::from_columns(&[x.clone()]), &DMatrix::from_columns(&[y.clone()])).unwrap();
        assert!((r1 - eigvec_correlation(&x, &y).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn accuracy_cases() {
        let t = [0, 0, 1, 1, 2, 2];
        assert_eq!(clustering_accuracy(&t, &t).unwrap(), 1.0);
        assert_eq!(clustering_accuracy(&[1, 1, 0, 0], &[0, 0, 1, 1]).unwrap(), 1.0);
        // confusion: predicted 0 -> {0,0,1}, 1 -> {1,1,0}; best matching gets 4/6
        assert!((clustering_accuracy(&[0, 0, 0, 1, 1, 1], &[0, 0, 1, 1, 1, 0]).unwrap() - 4.0 / 6.0).abs() < 1e-15);
        assert!(clustering_accuracy(&[0], &[0, 1]).is_err());
    }

    #[test]
    fn hungarian_agrees_with_exhaustive() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let truth: Vec<usize> = (0..60).map(|_| rng.random_range(0..8)).collect();
            let labels: Vec<usize> = truth
                .iter()
                .map(|&t| if rng.random::<f64>() < 0.6 { (t + 3) % 8 } else { rng.random_range(0..8) })
                .collect();
            let exhaustive = clustering_accuracy(&labels, &truth).unwrap();
            let (c, _) = confusion(&labels, &truth);
            let w = Matrix::from_rows(c.iter().map(|r| r.iter().map(|&x| x as i64))).unwrap();
            let hungarian = kuhn_munkres(&w).0 as f64 / 60.0;
            assert_eq!(exhaustive, hungarian);
        }
        // more than 8 labels goes through the assignment solver
        let truth: Vec<usize> = (0..30).map(|i| i % 10).collect();
        let labels: Vec<usize> = truth.iter().map(|&t| (t + 7) % 10).collect();
        assert_eq!(clustering_accuracy(&labels, &truth).unwrap(), 1.0);
    }

    #[test]
    fn nrmse_cases() {
        let t = [1.0, -2.0, 3.0];
        assert_eq!(nrmse(&t, &t).unwrap(), 0.0);
        assert_eq!(nrmse(&[0.0; 3], &t).unwrap(), 1.0);
        assert!((nrmse(&[2.0, -4.0, 6.0], &t).unwrap() - 1.0).abs() < 1e-15);
        let a = vec![DVector::from_vec(vec![1.0, 0.0]), DVector::from_vec(vec![0.0, 1.0])];
        let b = vec![DVector::from_vec(vec![1.0, 0.0]), DVector::from_vec(vec![0.0, 0.0])];
        assert!((nrmse_stack(&b, &a).unwrap() - (0.5f64).sqrt()).abs() < 1e-15);
    }
}
