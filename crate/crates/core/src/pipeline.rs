//! File-based pipeline stages. Each stage reads the artifacts of earlier
//! stages from the output directory and writes its own together with a
//! JSON report.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::analysis::{
    cluster_count_bound, denoise_image, diffusion_map, dist_common_lines, dist_euclidean, kmeans_cluster,
    reconstruct_volume, wiener_coordinates, Coordinates,
};
use crate::basis::{BasisKind, BasisSpec, VolumeCoeffs};
use crate::error::{Error, Result};
use crate::estimators::{
    covariance_rhs, default_xi, select_rank, solve_covariance, solve_mean, compute_bn, CovarianceOptions,
    LowRankModel, RankSelection,
};
use crate::geometry::{sample_rotations_skewed, sample_rotations_uniform};
use crate::imaging::{estimate_noise_sigma, snr_h, CtfParams, ImageStack};
use crate::io::{
    read_array, read_array_shaped, read_json, write_array, write_csv, write_indexed_csv, write_json, write_stack,
    write_volumes, read_volumes, fmt_f64, sidecar_path, ArrayHeader, Dataset, DatasetManifest, DistanceKind,
    ImageRecord, RunConfig, Seeds, TruthFiles, MANIFEST_VERSION,
};
use crate::kernel::{covar_kernel, mean_kernel, Kernel3D, Kernel6D};
use crate::metrics::{clustering_accuracy, eigvec_correlation, nrmse, nrmse_stack, principal_angle_cos};
use crate::shrinkage::sym_eigen_desc;
use crate::simulate::{
    draw_assignments, multi_state_phantom, operators_round_robin, population_covariance, population_mean,
    sigma_for_snr, simulate_dataset, two_state_phantom,
};
use crate::solver::SolveReport;

/// Exit status for a stage that wrote its outputs but did not converge.
pub const EXIT_NOT_CONVERGED: i32 = 9;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const IMAGES_FILE: &str = "images.f64";
pub const CLEAN_FILE: &str = "clean.f64";
pub const STATES_FILE: &str = "states.f64";
pub const KERNEL_MEAN_FILE: &str = "kernel_mean.f64";
pub const KERNEL_COV_FILE: &str = "kernel_cov.f64";
pub const MEAN_FILE: &str = "mean.f64";
pub const COVARIANCE_FILE: &str = "covariance.f64";
pub const EIGVALS_FILE: &str = "eigvals.csv";
pub const COORDS_FILE: &str = "coords.f64";
pub const COORDS_CSV: &str = "coords.csv";
pub const DISTANCES_FILE: &str = "distances.f64";
pub const LABELS_FILE: &str = "labels.csv";
pub const EMBEDDING_FILE: &str = "embedding.csv";
pub const METRICS_FILE: &str = "metrics.csv";
pub const SUMMARY_FILE: &str = "summary.json";

/// Wall-clock fields; the only part of a report that varies between
/// identical runs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub started_unix_s: f64,
    pub wall_clock_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: String,
    pub parameters: Value,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub solve: Option<SolveReport>,
    pub converged: bool,
    pub outputs: Vec<String>,
    pub results: Value,
    pub peak_memory_bytes: u64,
    pub timing: Timing,
}

impl StageReport {
    pub fn file_name(stage: &str) -> String {
        format!("{stage}_report.json")
    }
}

struct Stage {
    name: &'static str,
    start: Instant,
    started: f64,
    out: PathBuf,
    outputs: Vec<String>,
}

impl Stage {
    fn begin(name: &'static str, out: &Path) -> Result<Self> {
        fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        let started = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0.0, |d| d.as_secs_f64());
        Ok(Self {
            name,
            start: Instant::now(),
            started,
            out: out.to_path_buf(),
            outputs: Vec::new(),
        })
    }

    fn path(&mut self, file: &str) -> PathBuf {
        self.outputs.push(file.to_string());
        self.out.join(file)
    }

    fn finish(self, parameters: Value, solve: Option<SolveReport>, results: Value, memory: u64) -> Result<StageReport> {
        let converged = solve.as_ref().is_none_or(|s| s.converged);
        let report = StageReport {
            stage: self.name.into(),
            parameters,
            solve,
            converged,
            outputs: self.outputs,
            results,
            peak_memory_bytes: memory,
            timing: Timing {
                started_unix_s: self.started,
                wall_clock_s: self.start.elapsed().as_secs_f64(),
            },
        };
        write_json(&self.out.join(StageReport::file_name(self.name)), &report)?;
        Ok(report)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseSpec {
    SnrH(f64),
    Sigma(f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimulateConfig {
    pub n_images: usize,
    pub n: usize,
    pub basis: BasisKind,
    /// Number of built-in phantom states, ignored with `volumes`.
    pub states: usize,
    /// Uniform when absent.
    pub probabilities: Option<Vec<f64>>,
    /// `[count, p]` array of user volumes.
    pub volumes: Option<PathBuf>,
    pub noise: NoiseSpec,
    /// Skewed viewing directions when set.
    pub delta: Option<f64>,
    pub ctfs: Vec<CtfParams>,
    pub seed: u64,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        Self {
            n_images: 1024,
            n: 8,
            basis: BasisKind::TruncFourier,
            states: 2,
            probabilities: None,
            volumes: None,
            noise: NoiseSpec::SnrH(1e-2),
            delta: None,
            ctfs: vec![CtfParams::Identity],
            seed: 0,
        }
    }
}

/// Simulates a dataset and writes it with its manifest and ground truth.
pub fn run_simulate(cfg: &SimulateConfig, out: &Path) -> Result<StageReport> {
    let mut stage = Stage::begin("simulate", out)?;
    if cfg.n_images == 0 {
        return Err(Error::InvalidParameter("need at least one image".into()));
    }
    let basis = BasisSpec::new(cfg.basis, cfg.n)?;
    let states = match &cfg.volumes {
        Some(path) => read_volumes(path, basis.p())?,
        None if cfg.states == 2 => two_state_phantom(&basis)?,
        None => multi_state_phantom(&basis, cfg.states)?,
    };
    let c = states.len();
    let probabilities = cfg.probabilities.clone().unwrap_or_else(|| vec![1.0 / c as f64; c]);
    let rot_seed = cfg.seed;
    let asg_seed = cfg.seed.wrapping_add(1);
    let rotations = match cfg.delta {
        Some(delta) => sample_rotations_skewed(cfg.n_images, delta, rot_seed)?,
        None => sample_rotations_uniform(cfg.n_images, rot_seed),
    };
    let ops = operators_round_robin(basis.grid(), &rotations, &cfg.ctfs)?;
    let mean = population_mean(&states, &probabilities);
    let sigma = match cfg.noise {
        NoiseSpec::Sigma(s) => s,
        NoiseSpec::SnrH(target) => {
            let assignments = draw_assignments(&probabilities, cfg.n_images, asg_seed)?;
            sigma_for_snr(&basis, &ops, &states, &assignments, &mean, target)?
        }
    };
    let (images, truth) = simulate_dataset(&basis, states, probabilities, &ops, sigma, asg_seed)?;
    let achieved = if sigma > 0.0 {
        Some(snr_h(&basis, &ops, &truth.states, &truth.assignments, sigma, &mean)?)
    } else {
        None
    };

    write_stack(&stage.path(IMAGES_FILE), &images)?;
    write_stack(&stage.path(CLEAN_FILE), &truth.clean_images)?;
    write_volumes(&stage.path(STATES_FILE), &truth.states)?;
    let records = rotations
        .iter()
        .zip(&truth.assignments)
        .enumerate()
        .map(|(s, (r, &a))| ImageRecord {
            rotation: r.to_row_major(),
            ctf: s % cfg.ctfs.len(),
            state: Some(a),
        })
        .collect();
    let manifest = DatasetManifest {
        version: MANIFEST_VERSION.into(),
        n: cfg.n,
        basis: basis.clone(),
        images: IMAGES_FILE.into(),
        records,
        ctfs: cfg.ctfs.clone(),
        sigma: Some(sigma),
        seeds: Some(Seeds {
            rotations: rot_seed,
            assignments: asg_seed,
        }),
        truth: Some(TruthFiles {
            states: STATES_FILE.into(),
            probabilities: truth.probabilities.clone(),
            clean_images: Some(CLEAN_FILE.into()),
        }),
    };
    write_json(&stage.path(MANIFEST_FILE), &manifest)?;
    let memory = (2 * images.as_slice().len() + c * basis.p()) as u64 * 8;
    stage.finish(
        serde_json::to_value(cfg).expect("serializable config"),
        None,
        json!({ "sigma": sigma, "snr_h": achieved, "p": basis.p(), "states": c }),
        memory,
    )
}

fn images_checksum(ds: &Dataset) -> Result<u32> {
    let h: ArrayHeader = read_json(&sidecar_path(&ds.path(&ds.manifest.images)))?;
    Ok(h.checksum)
}

fn kernel_matches(ds: &Dataset, out: &Path) -> bool {
    let Ok(r) = read_json::<StageReport>(&out.join(StageReport::file_name("kernel"))) else {
        return false;
    };
    let want = images_checksum(ds).ok();
    r.results.get("images_checksum").and_then(Value::as_u64).map(|c| c as u32) == want
}

fn load_or_mean_kernel(ds: &Dataset, ops: &[crate::imaging::ImagingOperator], out: &Path) -> Result<Kernel3D> {
    let basis = &ds.manifest.basis;
    let s = basis.support().edge;
    let path = out.join(KERNEL_MEAN_FILE);
    if path.exists() && kernel_matches(ds, out) {
        let k = 2 * s - 1;
        return Kernel3D::from_values(basis.n(), s, read_array_shaped(&path, &[k, k, k])?);
    }
    mean_kernel(basis, ops)
}

fn load_or_covar_kernel(
    ds: &Dataset,
    ops: &[crate::imaging::ImagingOperator],
    cfg: &RunConfig,
    out: &Path,
) -> Result<Kernel6D> {
    let basis = &ds.manifest.basis;
    let s = basis.support().edge;
    let path = out.join(KERNEL_COV_FILE);
    if path.exists() && kernel_matches(ds, out) {
        let k = 2 * s - 1;
        return Kernel6D::from_values(basis.n(), s, read_array_shaped(&path, &[k, k, k, k, k, k])?, cfg.precision);
    }
    covar_kernel(basis, ops, cfg.precision)
}

fn kernel_box(basis: &BasisSpec) -> (usize, usize) {
    let s = basis.support().edge;
    ((2 * s - 1).pow(3), (2 * s).pow(3))
}

/// Precomputes the mean and covariance kernels. The covariance kernel is
/// skipped, with a note in the report, when it exceeds the memory policy.
pub fn run_kernel(manifest: &Path, cfg: &RunConfig, out: &Path) -> Result<StageReport> {
    cfg.validate()?;
    let mut stage = Stage::begin("kernel", out)?;
    let ds = Dataset::load(manifest)?;
    let ops = ds.operators()?;
    let basis = &ds.manifest.basis;
    let k = 2 * basis.support().edge - 1;
    let f = mean_kernel(basis, &ops)?;
    write_array(&stage.path(KERNEL_MEAN_FILE), f.values(), &[k, k, k])?;
    let (len3, box3) = kernel_box(basis);
    let mut memory = (len3 * 8 + box3 * 16) as u64;
    let cov = match covar_kernel(basis, &ops, cfg.precision) {
        Ok(big) => {
            write_array(&stage.path(KERNEL_COV_FILE), &big.values_f64(), &[k, k, k, k, k, k])?;
            memory += (len3 * len3 * 8 * 2) as u64;
            Value::Null
        }
        Err(Error::Resource(msg)) => Value::String(msg),
        Err(e) => return Err(e),
    };
    stage.finish(
        json!({ "precision": cfg.precision }),
        None,
        json!({
            "images_checksum": images_checksum(&ds)?,
            "kernel_edge": k,
            "covariance_kernel_skipped": cov,
        }),
        memory,
    )
}

/// Least-squares mean volume.
pub fn run_mean(manifest: &Path, cfg: &RunConfig, out: &Path) -> Result<StageReport> {
    cfg.validate()?;
    let mut stage = Stage::begin("mean", out)?;
    let ds = Dataset::load(manifest)?;
    let ops = ds.operators()?;
    let images = ds.images()?;
    let basis = &ds.manifest.basis;
    let f = load_or_mean_kernel(&ds, &ops, out)?;
    let bn = compute_bn(basis, &images, &ops)?;
    let (mu, solve) = solve_mean(basis, &f, cfg.nu, &bn, &cfg.solver())?;
    write_array(&stage.path(MEAN_FILE), mu.as_slice(), &[basis.p()])?;
    let (len3, box3) = kernel_box(basis);
    let memory = (images.as_slice().len() * 8 + len3 * 8 + 2 * box3 * 16 + 8 * basis.p() * 8) as u64;
    stage.finish(
        json!({ "nu": cfg.nu, "tol": cfg.tol, "maxiter": cfg.maxiter, "precondition": cfg.precondition,
                "threads": cfg.threads }),
        Some(solve),
        json!({ "p": basis.p(), "norm": mu.norm() }),
        memory,
    )
}

fn read_mean(out: &Path, p: usize) -> Result<VolumeCoeffs> {
    let path = out.join(MEAN_FILE);
    if !path.exists() {
        return Err(Error::MissingInput(format!(
            "{} (run the mean stage first)",
            path.display()
        )));
    }
    Ok(DVector::from_vec(read_array_shaped(&path, &[p])?))
}

fn read_covariance(out: &Path, p: usize) -> Result<DMatrix<f64>> {
    let path = out.join(COVARIANCE_FILE);
    if !path.exists() {
        return Err(Error::MissingInput(format!(
            "{} (run the covariance stage first)",
            path.display()
        )));
    }
    // symmetric, so row-major storage reads back unchanged
    Ok(DMatrix::from_vec(p, p, read_array_shaped(&path, &[p, p])?))
}

fn noise_sigma(ds: &Dataset, images: &ImageStack) -> Result<(f64, &'static str)> {
    match ds.manifest.sigma {
        Some(s) => Ok((s, "manifest")),
        None => Ok((estimate_noise_sigma(images)?, "estimated")),
    }
}

/// Least-squares covariance, optionally with the shrunk right-hand side.
pub fn run_covariance(manifest: &Path, cfg: &RunConfig, out: &Path) -> Result<StageReport> {
    cfg.validate()?;
    let ds = Dataset::load(manifest)?;
    let basis = &ds.manifest.basis;
    let p = basis.p();
    let mean = read_mean(out, p)?;
    let mut stage = Stage::begin("covariance", out)?;
    let ops = ds.operators()?;
    let images = ds.images()?;
    let (sigma, sigma_source) = noise_sigma(&ds, &images)?;
    let f = load_or_mean_kernel(&ds, &ops, out)?;
    let xi = cfg.xi.unwrap_or_else(|| default_xi(&f));
    let opts = CovarianceOptions {
        xi,
        nu: cfg.nu,
        shrink: cfg.shrink,
        precision: cfg.precision,
        solver: cfg.solver(),
        ..CovarianceOptions::default()
    };
    let b = covariance_rhs(basis, &images, &ops, &mean, sigma, &f, &opts)?;
    let big_f = load_or_covar_kernel(&ds, &ops, cfg, out)?;
    let (cov, solve) = solve_covariance(basis, &big_f, xi, &b, &opts.solver)?;
    write_array(&stage.path(COVARIANCE_FILE), cov.as_slice(), &[p, p])?;
    let (vals, _) = sym_eigen_desc(&cov);
    write_indexed_csv(&stage.path(EIGVALS_FILE), &["index", "eigenvalue"], vals.iter().map(|&v| vec![v]))?;
    let rank = match select_rank(vals.as_slice()) {
        Ok(RankSelection::Rank(r)) => json!(r),
        _ => Value::Null,
    };
    let (len3, box3) = kernel_box(basis);
    let elem = match cfg.precision {
        crate::kernel::Precision::F64 => 8,
        crate::kernel::Precision::F32 => 4,
    };
    let memory = (images.as_slice().len() * 8 + len3 * len3 * elem + 2 * box3 * box3 * elem * 2 + 8 * p * p * 8) as u64;
    stage.finish(
        json!({ "xi": xi, "nu": cfg.nu, "shrink": cfg.shrink, "precision": cfg.precision, "tol": cfg.tol,
                "maxiter": cfg.maxiter, "precondition": cfg.precondition, "threads": cfg.threads }),
        Some(solve),
        json!({ "sigma": sigma, "sigma_source": sigma_source, "selected_rank": rank,
                "top_eigenvalues": vals.iter().take(10).collect::<Vec<_>>() }),
        memory,
    )
}

fn model_rank(cfg: &RunConfig, cov: &DMatrix<f64>) -> Result<(usize, &'static str)> {
    if let Some(r) = cfg.rank {
        return Ok((r, "override"));
    }
    let (vals, _) = sym_eigen_desc(cov);
    Ok(match select_rank(vals.as_slice())? {
        RankSelection::Rank(r) => (r, "spectral-gap"),
        RankSelection::NoKnee => (1, "no-knee-default"),
    })
}

/// Wiener coordinates, distances, clustering and diffusion embedding.
pub fn run_analyze(manifest: &Path, cfg: &RunConfig, out: &Path) -> Result<StageReport> {
    cfg.validate()?;
    let ds = Dataset::load(manifest)?;
    let basis = &ds.manifest.basis;
    let p = basis.p();
    let mean = read_mean(out, p)?;
    let cov = read_covariance(out, p)?;
    let mut stage = Stage::begin("analyze", out)?;
    let ops = ds.operators()?;
    let images = ds.images()?;
    let n = images.len();
    let (sigma, _) = noise_sigma(&ds, &images)?;
    let (rank, rank_source) = model_rank(cfg, &cov)?;
    let model = LowRankModel::from_covariance(mean, &cov, rank.min(p))?;
    if model.rank() == 0 {
        return Err(Error::InvalidParameter("covariance estimate has no positive eigenvalues".into()));
    }
    let coords = wiener_coordinates(basis, &images, &ops, &model, sigma)?;
    let r = coords.rank();
    write_array(&stage.path(COORDS_FILE), coords_row_major(&coords).as_slice(), &[n, r])?;
    let mut header = vec!["image".to_string()];
    header.extend((1..=r).map(|i| format!("alpha_{i}")));
    let hdr: Vec<&str> = header.iter().map(String::as_str).collect();
    write_indexed_csv(&stage.path(COORDS_CSV), &hdr, (0..n).map(|s| coords.row(s).as_slice().to_vec()))?;

    let dist = match cfg.distance {
        DistanceKind::Euclidean => dist_euclidean(&coords),
        DistanceKind::CommonLines => {
            let mut denoised = ImageStack::zeros(n, images.edge());
            for (s, op) in ops.iter().enumerate() {
                denoised.image_mut(s).copy_from_slice(&denoise_image(basis, &coords.row(s), &model, op)?);
            }
            dist_common_lines(&denoised, &ds.rotations()?, &coords)?
        }
    };
    write_array(&stage.path(DISTANCES_FILE), dist.0.as_slice(), &[n, n])?;

    let clusters = cfg.clusters.unwrap_or_else(|| cluster_count_bound(r));
    let km = kmeans_cluster(&coords.0, clusters, cfg.seed, cfg.restarts)?;
    let rows: Vec<Vec<String>> = km.labels.iter().enumerate().map(|(s, l)| vec![s.to_string(), l.to_string()]).collect();
    write_csv(&stage.path(LABELS_FILE), &["image", "label"], &rows)?;

    let dim = cfg.dim.min(n.saturating_sub(1)).max(1);
    let emb = diffusion_map(&dist, cfg.eps, cfg.tau, dim)?;
    let mut header = vec!["image".to_string()];
    header.extend((1..=dim).map(|i| format!("psi_{i}")));
    let hdr: Vec<&str> = header.iter().map(String::as_str).collect();
    write_indexed_csv(&stage.path(EMBEDDING_FILE), &hdr, (0..n).map(|s| emb.coordinates.row(s).iter().copied().collect()))?;

    let memory = (images.as_slice().len() * 8 + 2 * p * p * 8 + n * n * 8 * 3) as u64;
    stage.finish(
        json!({ "rank": cfg.rank, "clusters": cfg.clusters, "seed": cfg.seed, "restarts": cfg.restarts,
                "distance": cfg.distance, "eps": cfg.eps, "tau": cfg.tau, "dim": cfg.dim, "threads": cfg.threads }),
        None,
        json!({ "rank": r, "rank_source": rank_source, "sigma": sigma, "clusters": clusters,
                "inertia": km.inertia, "diffusion_eps": emb.eps, "diffusion_eigenvalues": emb.eigvals,
                "eigenvalues": model.eigvals.as_slice() }),
        memory,
    )
}

fn coords_row_major(c: &Coordinates) -> Vec<f64> {
    c.0.transpose().as_slice().to_vec()
}

fn read_labels(path: &Path) -> Result<Vec<usize>> {
    let corrupt = |reason: String| Error::CorruptFile {
        path: path.into(),
        reason,
    };
    let mut r = csv::Reader::from_path(path).map_err(|e| corrupt(e.to_string()))?;
    r.records()
        .map(|rec| {
            let rec = rec.map_err(|e| corrupt(e.to_string()))?;
            rec.get(1)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| corrupt("bad label row".into()))
        })
        .collect()
}

/// Compares estimates against the dataset's recorded ground truth.
pub fn run_metrics(manifest: &Path, cfg: &RunConfig, out: &Path) -> Result<StageReport> {
    cfg.validate()?;
    let ds = Dataset::load(manifest)?;
    let basis = &ds.manifest.basis;
    let p = basis.p();
    let (Some(states), Some(truth)) = (ds.truth_states()?, ds.manifest.truth.clone()) else {
        return Err(Error::MissingInput("the dataset records no ground truth".into()));
    };
    let mean = read_mean(out, p)?;
    let mut stage = Stage::begin("metrics", out)?;
    let true_mean = population_mean(&states, &truth.probabilities);
    let true_cov = population_covariance(&states, &truth.probabilities);
    let mut rows: Vec<(String, f64)> = vec![("mean_nrmse".into(), nrmse(mean.as_slice(), true_mean.as_slice())?)];

    let cov_path = out.join(COVARIANCE_FILE);
    if cov_path.exists() {
        let cov = read_covariance(out, p)?;
        rows.push(("covariance_nrmse".into(), nrmse(cov.as_slice(), true_cov.as_slice())?));
        let (tv, tvec) = sym_eigen_desc(&true_cov);
        let true_rank = tv.iter().take_while(|&&v| v > 1e-12 * tv[0].abs().max(f64::MIN_POSITIVE)).count();
        let (_, evec) = sym_eigen_desc(&cov);
        if true_rank > 0 {
            let corr = eigvec_correlation(&evec.column(0).into_owned(), &tvec.column(0).into_owned())?;
            rows.push(("top_eigvec_correlation".into(), corr));
            let cos = principal_angle_cos(&evec.columns(0, true_rank).into_owned(), &tvec.columns(0, true_rank).into_owned())?;
            rows.push(("principal_angle_cos".into(), cos));
        }
    }

    let labels_path = out.join(LABELS_FILE);
    let assignments = ds.truth_assignments();
    if let (true, Some(asg)) = (labels_path.exists(), &assignments) {
        let labels = read_labels(&labels_path)?;
        rows.push(("clustering_accuracy".into(), clustering_accuracy(&labels, asg)?));
        let coords_path = out.join(COORDS_FILE);
        if coords_path.exists() && cov_path.exists() {
            let (c, shape) = read_array::<f64>(&coords_path)?;
            let (n, r) = (shape[0], shape[1]);
            let cov = read_covariance(out, p)?;
            let model = LowRankModel::from_covariance(mean.clone(), &cov, r)?;
            if model.rank() == r && n == asg.len() {
                let est: Vec<VolumeCoeffs> = (0..n)
                    .map(|s| reconstruct_volume(&DVector::from_column_slice(&c[s * r..(s + 1) * r]), &model))
                    .collect::<Result<_>>()?;
                let tru: Vec<VolumeCoeffs> = asg.iter().map(|&a| states[a].clone()).collect();
                rows.push(("reconstruction_nrmse".into(), nrmse_stack(&est, &tru)?));
            }
        }
    }

    let table = rows
        .iter()
        .map(|(k, v)| Ok(vec![k.clone(), fmt_f64(*v)?]))
        .collect::<Result<Vec<_>>>()?;
    write_csv(&stage.path(METRICS_FILE), &["metric", "value"], &table)?;
    let results: serde_json::Map<String, Value> = rows.into_iter().map(|(k, v)| (k, json!(v))).collect();
    stage.finish(json!({}), None, Value::Object(results), (3 * p * p * 8) as u64)
}

/// Collects every stage report in `out` into one summary.
pub fn run_report(out: &Path) -> Result<Value> {
    let mut stages = serde_json::Map::new();
    for name in ["simulate", "kernel", "mean", "covariance", "analyze", "metrics"] {
        let path = out.join(StageReport::file_name(name));
        if path.exists() {
            let r: StageReport = read_json(&path)?;
            stages.insert(
                name.into(),
                json!({ "converged": r.converged, "iterations": r.solve.as_ref().map(|s| s.iterations),
                        "final_residual": r.solve.as_ref().map(|s| s.final_residual()),
                        "results": r.results, "wall_clock_s": r.timing.wall_clock_s }),
            );
        }
    }
    if stages.is_empty() {
        return Err(Error::MissingInput(format!("no stage reports in {}", out.display())));
    }
    let summary = Value::Object(stages);
    write_json(&out.join(SUMMARY_FILE), &summary)?;
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SimulateConfig {
        SimulateConfig {
            n_images: 64,
            n: 6,
            noise: NoiseSpec::SnrH(0.5),
            ..SimulateConfig::default()
        }
    }

    #[test]
    fn simulate_hits_target_snr() {
        let dir = tempfile::tempdir().unwrap();
        let r = run_simulate(&small(), dir.path()).unwrap();
        let got = r.results["snr_h"].as_f64().unwrap();
        assert!((got - 0.5).abs() <= 0.01 * 0.5, "{got}");
        let ds = Dataset::load(&dir.path().join(MANIFEST_FILE)).unwrap();
        assert_eq!(ds.images().unwrap().len(), 64);
        assert_eq!(ds.truth_states().unwrap().unwrap().len(), 2);
    }

    #[test]
    fn explicit_sigma_is_verbatim() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SimulateConfig {
            noise: NoiseSpec::Sigma(0.125),
            ..small()
        };
        run_simulate(&cfg, dir.path()).unwrap();
        let ds = Dataset::load(&dir.path().join(MANIFEST_FILE)).unwrap();
        assert_eq!(ds.manifest.sigma, Some(0.125));
    }

    #[test]
    fn covariance_needs_mean() {
        let dir = tempfile::tempdir().unwrap();
        run_simulate(&small(), dir.path()).unwrap();
        let m = dir.path().join(MANIFEST_FILE);
        let err = run_covariance(&m, &RunConfig::default(), dir.path()).unwrap_err();
        assert!(matches!(err, Error::MissingInput(_)));
    }

    #[test]
    fn manifest_integrity() {
        let dir = tempfile::tempdir().unwrap();
        run_simulate(&small(), dir.path()).unwrap();
        let m = dir.path().join(MANIFEST_FILE);
        let mut man: DatasetManifest = read_json(&m).unwrap();
        man.records.pop();
        write_json(&m, &man).unwrap();
        assert!(matches!(Dataset::load(&m), Err(Error::Dimension(_))));
        fs::remove_file(dir.path().join(IMAGES_FILE)).unwrap();
        man.records.clear();
        write_json(&m, &man).unwrap();
        assert!(Dataset::load(&m).is_err());
    }

    #[test]
    fn unconverged_stage_still_writes() {
        let dir = tempfile::tempdir().unwrap();
        run_simulate(&small(), dir.path()).unwrap();
        let m = dir.path().join(MANIFEST_FILE);
        let cfg = RunConfig {
            maxiter: 1,
            tol: 1e-14,
            ..RunConfig::default()
        };
        let r = run_mean(&m, &cfg, dir.path()).unwrap();
        assert!(!r.converged);
        assert!(dir.path().join(MEAN_FILE).exists());
    }
}
