//! EarthNetScore evaluation for Earth surface forecasts.
//!
//! The crate covers the full desk-scale pipeline around the EarthNet2021
//! multicube format:
//!
//! - [`model`]: multicubes, predictions, challenge tracks and score vectors.
//! - [`io`]: the `.npz` multicube container, prediction directories,
//!   manifests and the data quality table.
//! - [`masking`]: NDVI and the rule-based data quality mask with its binary
//!   morphology kernels.
//! - [`scoring`]: the MAD, OLS, EMD and SSIM subscores with mask handling and
//!   rescaling.
//! - [`aggregate`]: per-cube and dataset EarthNetScore, best-of-ensemble
//!   selection and the parallel batch evaluator.
//! - [`curation`]: quality indicators, the quality score and the
//!   train/IID/OOD/extreme/seasonal split procedures.
//! - [`baseline`]: the cloud-free mean persistence forecast.
//! - [`synth`]: deterministic synthetic multicubes and quality-table corpora.

pub mod aggregate;
pub mod baseline;
pub mod curation;
pub mod io;
pub mod masking;
pub mod model;
pub mod scoring;
pub mod stats;
pub mod synth;

pub use aggregate::{cube_ens, dataset_ens, select_best, DatasetScore, EvaluationReport};
pub use model::{Multicube, Prediction, PredictionSupport, ScoreConfig, SubscoreVector, Track, TrackSpec};
