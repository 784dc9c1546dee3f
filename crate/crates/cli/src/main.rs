use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use cryocov_core::imaging::CtfParams;
use cryocov_core::io::{read_json, DistanceKind};
use cryocov_core::pipeline::{
    run_analyze, run_covariance, run_kernel, run_mean, run_metrics, run_report, run_simulate, NoiseSpec,
    SimulateConfig, StageReport, EXIT_NOT_CONVERGED, MANIFEST_FILE,
};
use cryocov_core::simulate::standard_ctf_table;
use cryocov_core::{BasisKind, Precision, Result, RunConfig};

/// Mean and covariance estimation for heterogeneous tomographic
/// projection data.
#[derive(Parser, Debug)]
#[command(name = "cryocov", version)]
struct Cli {
    /// Output directory for all artifacts.
    #[arg(long, global = true, env = "CRYOCOV_OUT", default_value = ".")]
    out: PathBuf,

    /// Recorded in reports; computation runs on one thread.
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate a dataset from built-in or supplied volumes.
    Simulate(SimulateArgs),
    /// Precompute the mean and covariance kernels.
    Kernel(StageArgs),
    /// Estimate the mean volume.
    Mean(StageArgs),
    /// Estimate the covariance matrix.
    Covariance(StageArgs),
    /// Wiener coordinates, distances, clustering and diffusion embedding.
    Analyze(StageArgs),
    /// Compare estimates with the dataset's ground truth.
    Metrics(StageArgs),
    /// Summarize all stage reports in the output directory.
    Report,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    /// Number of images.
    #[arg(long = "n", default_value_t = 1024)]
    n_images: usize,
    /// Grid edge length.
    #[arg(long = "N", default_value_t = 8)]
    grid: usize,
    #[arg(long, default_value = "trunc-fourier")]
    basis: BasisKind,
    /// Number of phantom states.
    #[arg(long, default_value_t = 2)]
    states: usize,
    /// `[count, p]` array of volumes to use instead of the phantom.
    #[arg(long)]
    volumes: Option<PathBuf>,
    /// Target heterogeneous SNR; the noise level is solved for.
    #[arg(long, conflicts_with = "sigma")]
    snr_h: Option<f64>,
    /// Noise standard deviation, used as given.
    #[arg(long)]
    sigma: Option<f64>,
    /// Skew exponent for non-uniform viewing directions.
    #[arg(long)]
    delta: Option<f64>,
    /// `identity`, `standard` (three defocus groups) or a JSON file with a
    /// list of CTF parameter sets.
    #[arg(long, default_value = "identity")]
    ctf_table: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct StageArgs {
    /// Dataset manifest; defaults to the one in the output directory.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// JSON run configuration; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    nu: Option<f64>,
    #[arg(long)]
    xi: Option<f64>,
    #[arg(long)]
    tol: Option<f64>,
    #[arg(long)]
    maxiter: Option<usize>,
    /// Disable the circulant preconditioner.
    #[arg(long)]
    no_precondition: bool,
    /// Shrink the covariance right-hand side.
    #[arg(long)]
    shrink: bool,
    #[arg(long)]
    rank: Option<usize>,
    #[arg(long)]
    precision: Option<Precision>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    clusters: Option<usize>,
    #[arg(long)]
    restarts: Option<usize>,
    /// `euclidean` or `common-lines`.
    #[arg(long, value_parser = parse_distance)]
    distance: Option<DistanceKind>,
    #[arg(long)]
    eps: Option<f64>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    dim: Option<usize>,
}

fn parse_distance(s: &str) -> std::result::Result<DistanceKind, String> {
    match s {
        "euclidean" => Ok(DistanceKind::Euclidean),
        "common-lines" => Ok(DistanceKind::CommonLines),
        _ => Err(format!("unknown distance {s:?}")),
    }
}

impl StageArgs {
    fn config(&self, threads: Option<usize>) -> Result<RunConfig> {
        let mut c = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        macro_rules! set {
            ($($f:ident),*) => { $(if let Some(v) = self.$f { c.$f = v; })* };
        }
        set!(nu, tol, maxiter, precision, seed, restarts, distance, tau, dim);
        if self.xi.is_some() {
            c.xi = self.xi;
        }
        if self.rank.is_some() {
            c.rank = self.rank;
        }
        if self.clusters.is_some() {
            c.clusters = self.clusters;
        }
        if self.eps.is_some() {
            c.eps = self.eps;
        }
        if self.no_precondition {
            c.precondition = false;
        }
        if self.shrink {
            c.shrink = true;
        }
        if threads.is_some() {
            c.threads = threads;
        }
        c.validate()?;
        Ok(c)
    }

    fn manifest(&self, out: &Path) -> PathBuf {
        self.manifest.clone().unwrap_or_else(|| out.join(MANIFEST_FILE))
    }
}

fn ctf_table(spec: &str) -> Result<Vec<CtfParams>> {
    match spec {
        "identity" => Ok(vec![CtfParams::Identity]),
        "standard" => Ok(standard_ctf_table()),
        path => read_json(Path::new(path)),
    }
}

fn simulate(args: &SimulateArgs, out: &Path) -> Result<StageReport> {
    let noise = match (args.snr_h, args.sigma) {
        (_, Some(s)) => NoiseSpec::Sigma(s),
        (Some(t), None) => NoiseSpec::SnrH(t),
        (None, None) => NoiseSpec::SnrH(1e-2),
    };
    let cfg = SimulateConfig {
        n_images: args.n_images,
        n: args.grid,
        basis: args.basis,
        states: args.states,
        probabilities: None,
        volumes: args.volumes.clone(),
        noise,
        delta: args.delta,
        ctfs: ctf_table(&args.ctf_table)?,
        seed: args.seed,
    };
    run_simulate(&cfg, out)
}

fn summarize(r: &StageReport) -> String {
    match &r.solve {
        Some(s) => format!(
            "{}: {} after {} iterations, relative residual {:.3e}",
            r.stage,
            if s.converged { "converged" } else { "NOT converged" },
            s.iterations,
            s.final_residual()
        ),
        None => format!("{}: wrote {}", r.stage, r.outputs.join(", ")),
    }
}

fn run(cli: &Cli) -> Result<i32> {
    let out = &cli.out;
    let stage = |f: fn(&Path, &RunConfig, &Path) -> Result<StageReport>, a: &StageArgs| -> Result<StageReport> {
        f(&a.manifest(out), &a.config(cli.threads)?, out)
    };
    let report = match &cli.command {
        Command::Simulate(a) => simulate(a, out)?,
        Command::Kernel(a) => stage(run_kernel, a)?,
        Command::Mean(a) => stage(run_mean, a)?,
        Command::Covariance(a) => stage(run_covariance, a)?,
        Command::Analyze(a) => stage(run_analyze, a)?,
        Command::Metrics(a) => stage(run_metrics, a)?,
        Command::Report => {
            let summary = run_report(out)?;
            println!("{}", serde_json::to_string_pretty(&summary).expect("valid json"));
            return Ok(0);
        }
    };
    println!("{}", summarize(&report));
    Ok(if report.converged { 0 } else { EXIT_NOT_CONVERGED })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            let msg = serde_json::json!({ "error": e.category(), "message": e.to_string() });
            eprintln!("{msg}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
