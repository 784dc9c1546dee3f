//! Covariance estimation for heterogeneous cryo-EM volumes.

pub mod analysis;
pub mod basis;
pub mod error;
pub mod estimators;
pub mod fft;
pub mod geometry;
pub mod imaging;
pub mod io;
pub mod kernel;
pub mod metrics;
pub mod pipeline;
pub mod shrinkage;
pub mod simulate;
pub mod solver;

pub use analysis::{Coordinates, DiffusionEmbedding, DistanceMatrix};
pub use basis::{BasisKind, BasisSpec, SupportBox, VolumeCoeffs};
pub use error::{Error, Result};
pub use estimators::{CovarianceMatrix, CovarianceOptions, LowRankModel, RankSelection, SolverOptions};
pub use geometry::{GridSpec, Rotation};
pub use imaging::{CtfParams, ImageStack, ImagingOperator};
pub use io::{DatasetManifest, RunConfig};
pub use kernel::{Kernel3D, Kernel6D, Precision};
pub use shrinkage::{ShrinkOptions, SpikedModelParams};
pub use simulate::SimulationTruth;
pub use solver::SolveReport;
