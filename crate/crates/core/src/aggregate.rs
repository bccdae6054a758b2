//! Per-cube and dataset EarthNetScore, best-of-ensemble selection and the
//! parallel batch evaluator.

use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::io::{read_cube, CubeIoError, DatasetManifest, PredictionIndex};
use crate::model::{slice_track, ModelError, Multicube, Prediction, ScoreConfig, SubscoreVector, Track, TrackSpec};
use crate::scoring::{score, ScoreError, ScoreInput};
use crate::stats::nan_mean;

/// Version of the JSON report layout.
pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum AggregateError {
    #[error("all subscores are missing")]
    AllSubscoresMissing,
    #[error("no trajectories to select from")]
    EmptyEnsemble,
    #[error("no cubes to aggregate")]
    NoCubes,
    #[error("every subscore mean is missing")]
    AllMeansMissing,
    #[error("no prediction for cube {0}")]
    MissingPrediction(String),
    #[error("prediction is for {found}, expected {expected}")]
    CubeMismatch { expected: String, found: String },
    #[error(transparent)]
    Io(#[from] CubeIoError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("trajectory {index}: {source}")]
    Score {
        index: usize,
        #[source]
        source: ScoreError,
    },
    #[error("worker pool: {0}")]
    Pool(String),
}

impl AggregateError {
    /// Stable machine-readable error category used in reports.
    pub fn kind(&self) -> &'static str {
        match self {
            Self::AllSubscoresMissing => "all_subscores_missing",
            Self::EmptyEnsemble => "empty_ensemble",
            Self::NoCubes => "no_cubes",
            Self::AllMeansMissing => "all_means_missing",
            Self::MissingPrediction(_) => "missing_prediction",
            Self::CubeMismatch { .. } => "cube_mismatch",
            Self::Io(CubeIoError::OrphanPrediction { .. }) => "orphan_prediction",
            Self::Io(CubeIoError::Shape { .. }) => "shape",
            Self::Io(_) => "io",
            Self::Model(ModelError::InsufficientFrames { .. }) => "insufficient_frames",
            Self::Model(_) => "shape",
            Self::Score { source: ScoreError::NonFinitePrediction(_), .. } => "non_finite_prediction",
            Self::Score { .. } => "shape",
            Self::Pool(_) => "pool",
        }
    }
}

/// Harmonic mean of the non-NaN values; 0 if any of them is 0.
///
/// Returns `None` when every value is NaN.
pub fn harmonic_mean(values: impl IntoIterator<Item = f64>) -> Option<f64> {
    let mut k = 0usize;
    let mut inverse_sum = 0.0;
    let mut zero = false;
    for v in values.into_iter().filter(|v| !v.is_nan()) {
        k += 1;
        if v == 0.0 {
            zero = true;
        } else {
            inverse_sum += 1.0 / v;
        }
    }
    match (k, zero) {
        (0, _) => None,
        (_, true) => Some(0.0),
        _ => Some(k as f64 / inverse_sum),
    }
}

/// EarthNetScore of one subscore vector.
pub fn cube_ens(sub: &SubscoreVector) -> Result<f64, AggregateError> {
    harmonic_mean(sub.components()).ok_or(AggregateError::AllSubscoresMissing)
}

/// Index and vector of the trajectory with the highest ENS.
///
/// Ties go to the lowest index; a NaN ENS ranks below every number.
pub fn select_best(subs: &[SubscoreVector]) -> Result<(usize, SubscoreVector), AggregateError> {
    let mut best: Option<(usize, SubscoreVector)> = None;
    for (i, s) in subs.iter().enumerate() {
        let better = match &best {
            None => true,
            Some((_, b)) => !s.ens.is_nan() && (b.ens.is_nan() || s.ens > b.ens),
        };
        if better {
            best = Some((i, *s));
        }
    }
    best.ok_or(AggregateError::EmptyEnsemble)
}

/// Dataset-level scores: per-subscore means and their harmonic mean.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DatasetScore {
    pub ens: f64,
    pub mad: f64,
    pub ols: f64,
    pub emd: f64,
    pub ssim: f64,
}

/// Averages each subscore over cubes, ignoring NaN, then takes the harmonic
/// mean of the four averages, ignoring NaN averages.
pub fn dataset_ens(per_cube: &[SubscoreVector]) -> Result<DatasetScore, AggregateError> {
    if per_cube.is_empty() {
        return Err(AggregateError::NoCubes);
    }
    let column = |f: fn(&SubscoreVector) -> f64| nan_mean(&per_cube.iter().map(f).collect::<Vec<_>>());
    let mad = column(|s| s.mad);
    let ols = column(|s| s.ols);
    let emd = column(|s| s.emd);
    let ssim = column(|s| s.ssim);
    let ens = harmonic_mean([mad, ols, emd, ssim]).ok_or(AggregateError::AllMeansMissing)?;
    Ok(DatasetScore { ens, mad, ols, emd, ssim })
}

/// Scores of every trajectory of one cube and the selected best one.
#[derive(Debug, Clone, PartialEq)]
pub struct CubeScores {
    pub per_trajectory: Vec<SubscoreVector>,
    pub best_trajectory: usize,
    pub best: SubscoreVector,
}

/// Scores every trajectory of `prediction` against the target frames of
/// `cube` for one track, in parallel over trajectories.
pub fn evaluate_cube(
    cube: &Multicube,
    prediction: &Prediction,
    track: &TrackSpec,
    cfg: &ScoreConfig,
) -> Result<CubeScores, AggregateError> {
    if prediction.cube_id() != cube.cube_id() {
        return Err(AggregateError::CubeMismatch {
            expected: cube.cube_id().to_string(),
            found: prediction.cube_id().to_string(),
        });
    }
    let slice = slice_track(cube, track)?;
    let per_trajectory = prediction
        .trajectories()
        .par_iter()
        .enumerate()
        .map(|(index, traj)| {
            ScoreInput::with_frame_mask(slice.target, slice.target_mask.view(), traj.view())
                .map(|input| score(&input, cfg))
                .map_err(|source| AggregateError::Score { index, source })
        })
        .collect::<Result<Vec<_>, _>>()?;
    let (best_trajectory, best) = select_best(&per_trajectory)?;
    Ok(CubeScores { per_trajectory, best_trajectory, best })
}

/// Where the evaluator gets ground truth and predictions from.
pub trait EvaluationSource: Sync {
    /// Cube ids to evaluate, in the order they appear in the report.
    fn cube_ids(&self) -> Vec<String>;
    fn load_cube(&self, cube_id: &str) -> Result<Multicube, AggregateError>;
    /// `Ok(None)` when the cube has no prediction at all.
    fn load_prediction(&self, cube_id: &str) -> Result<Option<Prediction>, AggregateError>;
    /// Prediction ids with no matching cube.
    fn orphans(&self) -> Vec<String> {
        Vec::new()
    }
}

/// Cubes listed in a manifest with predictions from a directory tree.
#[derive(Debug)]
pub struct FileSource {
    manifest: DatasetManifest,
    index: PredictionIndex,
}

impl FileSource {
    pub fn new(manifest: DatasetManifest, predictions: &Path) -> Result<Self, AggregateError> {
        let index = PredictionIndex::scan(predictions, &manifest)?;
        Ok(Self { manifest, index })
    }
}

impl EvaluationSource for FileSource {
    fn cube_ids(&self) -> Vec<String> {
        self.manifest.entries.iter().map(|e| e.cube_id.clone()).collect()
    }

    fn load_cube(&self, cube_id: &str) -> Result<Multicube, AggregateError> {
        let entry = self
            .manifest
            .get(cube_id)
            .ok_or_else(|| AggregateError::MissingPrediction(cube_id.to_string()))?;
        Ok(read_cube(&self.manifest.cube_path(entry))?)
    }

    fn load_prediction(&self, cube_id: &str) -> Result<Option<Prediction>, AggregateError> {
        self.index.load(cube_id).transpose().map_err(AggregateError::from)
    }

    fn orphans(&self) -> Vec<String> {
        self.index.orphans.clone()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CubeReport {
    pub cube_id: String,
    pub best_trajectory: usize,
    pub trajectories: usize,
    pub subscores: SubscoreVector,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ReportError {
    pub cube_id: Option<String>,
    pub kind: String,
    pub message: String,
}

/// Outcome of a batch evaluation.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvaluationReport {
    pub schema_version: u32,
    pub track: Track,
    /// `None` when no cube could be scored.
    pub summary: Option<DatasetScore>,
    /// Successfully scored cubes, sorted by cube id.
    pub cubes: Vec<CubeReport>,
    pub errors: Vec<ReportError>,
}

impl EvaluationReport {
    pub fn to_json(&self) -> String {
        let mut out = serde_json::to_string_pretty(self).expect("report serializes");
        out.push('\n');
        out
    }

    /// Summary as a table row with the columns test_set, ENS, MAD, OLS,
    /// EMD and SSIM. Missing values are empty cells.
    pub fn to_csv(&self) -> String {
        let cell = |v: f64| if v.is_nan() { String::new() } else { v.to_string() };
        let mut out = String::from("test_set,ENS,MAD,OLS,EMD,SSIM\n");
        if let Some(s) = &self.summary {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                self.track.label(),
                cell(s.ens),
                cell(s.mad),
                cell(s.ols),
                cell(s.emd),
                cell(s.ssim)
            ));
        }
        out
    }

    /// One human-readable line with four decimals per score.
    pub fn summary_line(&self) -> String {
        match &self.summary {
            Some(s) => format!(
                "{:<9} ENS {:.4}  MAD {:.4}  OLS {:.4}  EMD {:.4}  SSIM {:.4}",
                self.track.label(),
                s.ens,
                s.mad,
                s.ols,
                s.emd,
                s.ssim
            ),
            None => format!("{:<9} no scorable cubes", self.track.label()),
        }
    }
}

fn evaluate_one(
    src: &dyn EvaluationSource,
    cube_id: &str,
    track: &TrackSpec,
    cfg: &ScoreConfig,
) -> Result<CubeReport, AggregateError> {
    let prediction = src
        .load_prediction(cube_id)?
        .ok_or_else(|| AggregateError::MissingPrediction(cube_id.to_string()))?;
    let cube = src.load_cube(cube_id)?;
    let scores = evaluate_cube(&cube, &prediction, track, cfg)?;
    Ok(CubeReport {
        cube_id: cube_id.to_string(),
        best_trajectory: scores.best_trajectory,
        trajectories: scores.per_trajectory.len(),
        subscores: scores.best,
    })
}

/// Scores every cube of `src` on a pool of `workers` threads.
///
/// Per-cube failures are collected in the report. The output does not
/// depend on the worker count.
pub fn evaluate_source(
    src: &dyn EvaluationSource,
    track: Track,
    cfg: &ScoreConfig,
    workers: usize,
) -> Result<EvaluationReport, AggregateError> {
    let spec = track.spec();
    let mut ids = src.cube_ids();
    ids.sort();
    ids.dedup();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| AggregateError::Pool(e.to_string()))?;
    let outcomes: Vec<Result<CubeReport, AggregateError>> =
        pool.install(|| ids.par_iter().map(|id| evaluate_one(src, id, &spec, cfg)).collect());

    let mut cubes = Vec::new();
    let mut errors = Vec::new();
    for (id, outcome) in ids.iter().zip(outcomes) {
        match outcome {
            Ok(c) => cubes.push(c),
            Err(e) => errors.push(ReportError { cube_id: Some(id.clone()), kind: e.kind().into(), message: e.to_string() }),
        }
    }
    let mut orphans = src.orphans();
    orphans.sort();
    for id in orphans {
        let e = AggregateError::Io(CubeIoError::OrphanPrediction { cube_id: id.clone() });
        errors.push(ReportError { cube_id: Some(id), kind: e.kind().into(), message: e.to_string() });
    }

    let best: Vec<SubscoreVector> = cubes.iter().map(|c| c.subscores).collect();
    let summary = match dataset_ens(&best) {
        Ok(s) => Some(s),
        Err(AggregateError::NoCubes) => None,
        Err(e) => {
            errors.push(ReportError { cube_id: None, kind: e.kind().into(), message: e.to_string() });
            None
        }
    };
    Ok(EvaluationReport { schema_version: REPORT_SCHEMA_VERSION, track, summary, cubes, errors })
}

/// Evaluates the cubes of `manifest` against predictions stored under
/// `predictions`.
pub fn evaluate(
    manifest: DatasetManifest,
    predictions: &Path,
    track: Track,
    cfg: &ScoreConfig,
    workers: usize,
) -> Result<EvaluationReport, AggregateError> {
    let src = FileSource::new(manifest, predictions)?;
    evaluate_source(&src, track, cfg, workers)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::{write_cube, write_prediction, Split};
    use crate::synth::{synth_cube, SynthParams};
    use ndarray::{s, Array4};
    use proptest::prelude::*;
    use std::collections::BTreeMap;

    fn sv(mad: f64, ols: f64, emd: f64, ssim: f64) -> SubscoreVector {
        SubscoreVector::new(mad, ols, emd, ssim)
    }

    #[test]
    fn harmonic_mean_examples() {
        assert_eq!(cube_ens(&sv(1.0, 1.0, 1.0, 1.0)).unwrap(), 1.0);
        assert!((cube_ens(&sv(0.1, 0.1, 0.1, 0.1)).unwrap() - 0.1).abs() < 1e-15);
        assert!((cube_ens(&sv(0.5, f64::NAN, 0.5, 0.5)).unwrap() - 0.5).abs() < 1e-15);
        assert_eq!(cube_ens(&sv(0.0, 0.9, 0.9, 0.9)).unwrap(), 0.0);
        assert!(matches!(
            cube_ens(&sv(f64::NAN, f64::NAN, f64::NAN, f64::NAN)),
            Err(AggregateError::AllSubscoresMissing)
        ));
        assert!(sv(f64::NAN, f64::NAN, f64::NAN, f64::NAN).ens.is_nan());
    }

    #[test]
    fn select_best_rules() {
        let low = sv(0.2, 0.2, 0.2, 0.2);
        let high = sv(0.9, 0.9, 0.9, 0.9);
        assert_eq!(select_best(&[low, high]).unwrap(), (1, high));
        assert_eq!(select_best(&[low]).unwrap(), (0, low));
        assert_eq!(select_best(&[high, high]).unwrap().0, 0);
        let nan = sv(f64::NAN, f64::NAN, f64::NAN, f64::NAN);
        assert_eq!(select_best(&[nan, low]).unwrap().0, 1);
        assert!(matches!(select_best(&[]), Err(AggregateError::EmptyEnsemble)));
    }

    #[test]
    fn dataset_mean_then_harmonic() {
        let d = dataset_ens(&[sv(0.2, 1.0, 1.0, 1.0), sv(0.4, 1.0, 1.0, 1.0)]).unwrap();
        assert!((d.mad - 0.3).abs() < 1e-15);
        // 4 / (1/0.3 + 3), worked by hand
        assert!((d.ens - 0.631_578_947_368_421).abs() < 1e-12);
        let perfect = dataset_ens(&[sv(1.0, 1.0, 1.0, 1.0); 3]).unwrap();
        assert_eq!(perfect, DatasetScore { ens: 1.0, mad: 1.0, ols: 1.0, emd: 1.0, ssim: 1.0 });
        assert!(matches!(dataset_ens(&[]), Err(AggregateError::NoCubes)));
    }

    #[test]
    fn dataset_drops_missing_means() {
        let d = dataset_ens(&[sv(0.5, f64::NAN, 0.5, 0.5), sv(0.5, f64::NAN, 0.5, 0.5)]).unwrap();
        assert!(d.ols.is_nan());
        assert_eq!(d.ens, 0.5);
    }

    struct MemorySource {
        items: BTreeMap<String, (Multicube, Option<Prediction>)>,
    }

    impl EvaluationSource for MemorySource {
        fn cube_ids(&self) -> Vec<String> {
            self.items.keys().cloned().collect()
        }
        fn load_cube(&self, id: &str) -> Result<Multicube, AggregateError> {
            Ok(self.items[id].0.clone())
        }
        fn load_prediction(&self, id: &str) -> Result<Option<Prediction>, AggregateError> {
            Ok(self.items[id].1.clone())
        }
    }

    fn truth(cube: &Multicube) -> Array4<f32> {
        cube.hr_dynamic.slice(s![10..30, ..4, .., ..]).to_owned()
    }

    fn clear_cube(seed: u64) -> Multicube {
        let p = SynthParams { frames: 30, cloud_rate: 0.0, ..SynthParams::default() };
        synth_cube(seed, &p).unwrap().cube
    }

    #[test]
    fn memory_source_perfect_and_missing() {
        let mut items = BTreeMap::new();
        for seed in 0..3u64 {
            let cube = clear_cube(seed);
            let pred = Prediction::new(cube.cube_id(), vec![truth(&cube)]).unwrap();
            items.insert(cube.cube_id().to_string(), (cube, Some(pred)));
        }
        let missing = clear_cube(9);
        items.insert(missing.cube_id().to_string(), (missing.clone(), None));
        let src = MemorySource { items };
        let report = evaluate_source(&src, Track::Iid, &ScoreConfig::default(), 2).unwrap();
        assert_eq!(report.cubes.len(), 3);
        assert_eq!(report.summary.unwrap().ens, 1.0);
        assert_eq!(report.errors.len(), 1);
        assert_eq!(report.errors[0].kind, "missing_prediction");
        assert_eq!(report.errors[0].cube_id.as_deref(), Some(missing.cube_id()));
    }

    #[test]
    fn short_trajectory_is_a_per_cube_error() {
        let cube = clear_cube(4);
        let short = cube.hr_dynamic.slice(s![10..29, ..4, .., ..]).to_owned();
        let pred = Prediction::new(cube.cube_id(), vec![short]).unwrap();
        let mut items = BTreeMap::new();
        items.insert(cube.cube_id().to_string(), (cube, Some(pred)));
        let report = evaluate_source(&MemorySource { items }, Track::Iid, &ScoreConfig::default(), 1).unwrap();
        assert!(report.summary.is_none());
        assert_eq!(report.errors[0].kind, "shape");
    }

    #[test]
    fn file_backed_evaluation_is_worker_independent() {
        let dir = tempfile::tempdir().unwrap();
        let cubes_dir = dir.path().join("cubes");
        let preds = dir.path().join("preds");
        std::fs::create_dir_all(&cubes_dir).unwrap();
        for seed in 0..3u64 {
            let p = SynthParams { frames: 30, cloud_rate: 0.15, ..SynthParams::default() };
            let cube = synth_cube(100 + seed, &p).unwrap().cube;
            write_cube(&cube, &cubes_dir.join(format!("{}.npz", cube.cube_id()))).unwrap();
            let noisy = truth(&cube).mapv(|v| (v * 0.9).clamp(0.0, 1.0));
            write_prediction(&Prediction::new(cube.cube_id(), vec![noisy, truth(&cube)]).unwrap(), &preds).unwrap();
        }
        let manifest = DatasetManifest::scan(&cubes_dir, Split::IidTest).unwrap();
        let a = evaluate(manifest.clone(), &preds, Track::Iid, &ScoreConfig::default(), 1).unwrap();
        let b = evaluate(manifest, &preds, Track::Iid, &ScoreConfig::default(), 3).unwrap();
        assert_eq!(a.to_json(), b.to_json());
        assert!(a.cubes.iter().all(|c| c.trajectories == 2));
        assert!(a.errors.is_empty());
    }

    #[test]
    fn csv_row_layout() {
        let report = EvaluationReport {
            schema_version: 1,
            track: Track::Ood,
            summary: Some(DatasetScore { ens: 0.25, mad: 0.5, ols: f64::NAN, emd: 0.2, ssim: 0.3 }),
            cubes: vec![],
            errors: vec![],
        };
        assert_eq!(report.to_csv(), "test_set,ENS,MAD,OLS,EMD,SSIM\nOOD,0.25,0.5,,0.2,0.3\n");
        assert!(report.to_json().contains("\"ols\": null"));
    }

    fn unit_or_nan() -> impl Strategy<Value = f64> {
        prop_oneof![4 => 0.0f64..=1.0, 1 => Just(f64::NAN)]
    }

    proptest! {
        #[test]
        fn ens_between_min_and_arithmetic_mean(a in unit_or_nan(), b in unit_or_nan(), c in unit_or_nan(), d in unit_or_nan()) {
            let v = sv(a, b, c, d);
            let valid: Vec<f64> = v.components().into_iter().filter(|x| !x.is_nan()).collect();
            prop_assume!(!valid.is_empty());
            let min = valid.iter().copied().fold(f64::INFINITY, f64::min);
            let am = valid.iter().sum::<f64>() / valid.len() as f64;
            prop_assert!(v.ens >= min * (1.0 - 1e-12));
            prop_assert!(v.ens <= am * (1.0 + 1e-12));
        }

        #[test]
        fn select_best_is_transform_invariant(vals in proptest::collection::vec(0.01f64..1.0, 1..12)) {
            let subs: Vec<SubscoreVector> = vals.iter().map(|&x| sv(x, x, x, x)).collect();
            let warped: Vec<SubscoreVector> = vals.iter().map(|&x| { let y = x.powi(3); sv(y, y, y, y) }).collect();
            prop_assert_eq!(select_best(&subs).unwrap().0, select_best(&warped).unwrap().0);
        }

        #[test]
        fn dataset_ens_is_permutation_invariant(
            rows in proptest::collection::vec((unit_or_nan(), unit_or_nan(), 0.01f64..1.0, unit_or_nan()), 1..40),
            seed in any::<u64>(),
        ) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let subs: Vec<SubscoreVector> = rows.iter().map(|&(a, b, c, d)| sv(a, b, c, d)).collect();
            let mut shuffled = subs.clone();
            shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let x = dataset_ens(&subs).unwrap();
            let y = dataset_ens(&shuffled).unwrap();
            prop_assert!((x.ens - y.ens).abs() < 1e-12);
        }
    }
}
