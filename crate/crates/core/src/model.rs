//! Multicubes, predictions, challenge tracks and score containers.

use std::fmt;
use std::str::FromStr;

use ndarray::{s, Array2, Array3, Array4, ArrayView2, ArrayView4, Axis};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Spatial side length of the high-resolution imagery.
pub const HR_SIZE: usize = 128;
/// Spatial side length of the mesoscale climate grids.
pub const MESO_SIZE: usize = 80;
/// Daily meso frames per 5-daily high-resolution frame.
pub const MESO_PER_FRAME: usize = 5;
/// Number of mesoscale climate variables.
pub const MESO_VARIABLES: usize = 5;

/// Channel layout of `hr_dynamic`.
///
/// Blue, green, red and near-infrared reflectance come first, followed by the
/// cloud probability, the scene classification code and the final data
/// quality mask. Predictions carry only the first four channels, in the same
/// order.
pub mod channel {
    pub const BLUE: usize = 0;
    pub const GREEN: usize = 1;
    pub const RED: usize = 2;
    pub const NIR: usize = 3;
    pub const CLD: usize = 4;
    pub const SCL: usize = 5;
    pub const MASK: usize = 6;
    /// Total channel count of `hr_dynamic`.
    pub const COUNT: usize = 7;
    /// Number of reflectance channels (and prediction channels).
    pub const REFLECTANCE: usize = 4;
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("track {track} needs {needed} high-res frames, cube has {available}")]
    InsufficientFrames {
        track: Track,
        needed: usize,
        available: usize,
    },
    #[error("prediction for {cube_id} has no trajectories")]
    EmptyPrediction { cube_id: String },
    #[error("trajectory {index} of {cube_id} has shape {found:?}, expected {expected:?}")]
    TrajectoryShape {
        cube_id: String,
        index: usize,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("cannot parse cube metadata from {0:?}")]
    BadCubeId(String),
}

/// Position of a cube relative to the midline of the study extent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LatitudeBand {
    North,
    South,
}

impl LatitudeBand {
    /// Derives the band from an MGRS tile id such as `32UMC`.
    ///
    /// The latitude-band letter follows the UTM zone digits. Bands `U` and
    /// above lie north of the 50N midline of the 36N–64N study extent.
    pub fn from_tile(tile: &str) -> Option<Self> {
        let letter = tile.chars().find(|c| c.is_ascii_alphabetic())?;
        let letter = letter.to_ascii_uppercase();
        if !('C'..='X').contains(&letter) || letter == 'I' || letter == 'O' {
            return None;
        }
        Some(if letter >= 'U' { Self::North } else { Self::South })
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::North => "north",
            Self::South => "south",
        }
    }
}

impl fmt::Display for LatitudeBand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LatitudeBand {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "north" => Ok(Self::North),
            "south" => Ok(Self::South),
            other => Err(format!("unknown latitude band {other:?}")),
        }
    }
}

/// Identity and provenance of a multicube.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CubeMeta {
    pub cube_id: String,
    pub tile: String,
    pub latitude_band: LatitudeBand,
    pub start_month: u8,
}

impl CubeMeta {
    /// Parses an EarthNet-style cube id, `<TILE>_<YYYY-MM-DD>_<rest>`.
    pub fn parse(cube_id: &str) -> Result<Self, ModelError> {
        let bad = || ModelError::BadCubeId(cube_id.to_string());
        let mut parts = cube_id.split('_');
        let tile = parts.next().filter(|t| !t.is_empty()).ok_or_else(bad)?;
        let date = parts.next().ok_or_else(bad)?;
        let month: u8 = date
            .split('-')
            .nth(1)
            .and_then(|m| m.parse().ok())
            .filter(|m| (1..=12).contains(m))
            .ok_or_else(bad)?;
        let latitude_band = LatitudeBand::from_tile(tile).ok_or_else(bad)?;
        Ok(Self {
            cube_id: cube_id.to_string(),
            tile: tile.to_string(),
            latitude_band,
            start_month: month,
        })
    }
}

/// One spatio-temporal data sample.
///
/// Arrays are held in `[time, channel, height, width]` order.
#[derive(Debug, Clone, PartialEq)]
pub struct Multicube {
    pub meta: CubeMeta,
    /// `[t, 7, 128, 128]`, see [`channel`] for the layout.
    pub hr_dynamic: Array4<f32>,
    /// `[5t, 5, 80, 80]`, daily climate variables.
    pub meso_dynamic: Array4<f32>,
    /// `[128, 128]` normalized elevation.
    pub hr_static: Array2<f32>,
    /// `[80, 80]` normalized elevation.
    pub meso_static: Array2<f32>,
}

impl Multicube {
    pub fn cube_id(&self) -> &str {
        &self.meta.cube_id
    }

    pub fn frames(&self) -> usize {
        self.hr_dynamic.len_of(Axis(0))
    }

    /// The quality mask as booleans, `[t, h, w]`, `true` = masked.
    pub fn quality_mask(&self) -> Array3<bool> {
        self.hr_dynamic
            .index_axis(Axis(1), channel::MASK)
            .mapv(|v| v >= 0.5)
    }

    /// Reflectance channels `[t, 4, h, w]`.
    pub fn reflectance(&self) -> ArrayView4<'_, f32> {
        self.hr_dynamic.slice(s![.., ..channel::REFLECTANCE, .., ..])
    }
}

/// One rule a cube failed in [`validate_cube`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub field: &'static str,
    pub rule: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.rule)
    }
}

/// Checks every structural and value invariant of a multicube.
pub fn validate_cube(cube: &Multicube) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut push = |field, rule: String| out.push(Violation { field, rule });

    if cube.meta.cube_id.is_empty() {
        push("cube_id", "must not be empty".into());
    }
    if !(1..=12).contains(&cube.meta.start_month) {
        push("start_month", format!("{} not in 1..=12", cube.meta.start_month));
    }

    let hr = cube.hr_dynamic.shape();
    let t = hr[0];
    if t == 0 {
        push("hr_dynamic", "must contain at least one frame".into());
    }
    if hr[1] != channel::COUNT || hr[2] != HR_SIZE || hr[3] != HR_SIZE {
        push(
            "hr_dynamic",
            format!("shape {hr:?} must be [t, {}, {HR_SIZE}, {HR_SIZE}]", channel::COUNT),
        );
    }
    let meso = cube.meso_dynamic.shape();
    if meso[0] != MESO_PER_FRAME * t {
        push(
            "meso_dynamic",
            format!("time length {} must be 5 x {t} = {}", meso[0], MESO_PER_FRAME * t),
        );
    }
    if meso[1] != MESO_VARIABLES || meso[2] != MESO_SIZE || meso[3] != MESO_SIZE {
        push(
            "meso_dynamic",
            format!("shape {meso:?} must be [5t, {MESO_VARIABLES}, {MESO_SIZE}, {MESO_SIZE}]"),
        );
    }
    if cube.hr_static.shape() != [HR_SIZE, HR_SIZE] {
        push("hr_static", format!("shape {:?} must be [128, 128]", cube.hr_static.shape()));
    }
    if cube.meso_static.shape() != [MESO_SIZE, MESO_SIZE] {
        push("meso_static", format!("shape {:?} must be [80, 80]", cube.meso_static.shape()));
    }

    if hr[1] == channel::COUNT {
        let bad_reflectance = cube
            .reflectance()
            .iter()
            .filter(|v| !v.is_nan() && !(0.0..=1.0).contains(*v))
            .count();
        if bad_reflectance > 0 {
            push(
                "hr_dynamic",
                format!("{bad_reflectance} reflectance values outside [0, 1] and not NaN"),
            );
        }
        let mask = cube.hr_dynamic.index_axis(Axis(1), channel::MASK);
        let non_binary = mask.iter().filter(|v| **v != 0.0 && **v != 1.0).count();
        if non_binary > 0 {
            push("hr_dynamic", format!("mask channel has {non_binary} non-binary values"));
        }
        let scl = cube.hr_dynamic.index_axis(Axis(1), channel::SCL);
        let bad_scl = scl
            .iter()
            .filter(|v| !v.is_nan() && !(v.fract() == 0.0 && (0.0..=11.0).contains(*v)))
            .count();
        if bad_scl > 0 {
            push("hr_dynamic", format!("scene classification has {bad_scl} non-code values"));
        }
    }
    out
}

/// A candidate forecast for one cube, one or more trajectories.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    cube_id: String,
    trajectories: Vec<Array4<f32>>,
}

impl Prediction {
    /// Each trajectory is `[t_T, 4, 128, 128]`; all must share one shape.
    pub fn new(cube_id: impl Into<String>, trajectories: Vec<Array4<f32>>) -> Result<Self, ModelError> {
        let cube_id = cube_id.into();
        let first = trajectories
            .first()
            .ok_or_else(|| ModelError::EmptyPrediction { cube_id: cube_id.clone() })?
            .shape()
            .to_vec();
        for (index, traj) in trajectories.iter().enumerate() {
            let shape = traj.shape();
            if shape != first.as_slice() || shape[1] != channel::REFLECTANCE {
                let mut expected = first.clone();
                expected[1] = channel::REFLECTANCE;
                return Err(ModelError::TrajectoryShape {
                    cube_id,
                    index,
                    expected,
                    found: shape.to_vec(),
                });
            }
        }
        Ok(Self { cube_id, trajectories })
    }

    pub fn cube_id(&self) -> &str {
        &self.cube_id
    }

    pub fn trajectories(&self) -> &[Array4<f32>] {
        &self.trajectories
    }

    pub fn into_trajectories(self) -> Vec<Array4<f32>> {
        self.trajectories
    }
}

/// The four challenge tracks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Track {
    Iid,
    Ood,
    Extreme,
    Seasonal,
}

impl Track {
    pub const ALL: [Track; 4] = [Track::Iid, Track::Ood, Track::Extreme, Track::Seasonal];

    pub fn spec(self) -> TrackSpec {
        let (context_frames, target_frames) = match self {
            Track::Iid | Track::Ood => (10, 20),
            Track::Extreme => (20, 40),
            Track::Seasonal => (70, 140),
        };
        TrackSpec { track: self, context_frames, target_frames }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Track::Iid => "iid",
            Track::Ood => "ood",
            Track::Extreme => "extreme",
            Track::Seasonal => "seasonal",
        }
    }

    /// Row label used in summary tables.
    pub fn label(self) -> &'static str {
        match self {
            Track::Iid => "IID",
            Track::Ood => "OOD",
            Track::Extreme => "Extreme",
            Track::Seasonal => "Seasonal",
        }
    }
}

impl fmt::Display for Track {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Track {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Track::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| format!("unknown track {s:?} (expected iid, ood, extreme or seasonal)"))
    }
}

/// Context/target frame counts of a track.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrackSpec {
    pub track: Track,
    pub context_frames: usize,
    pub target_frames: usize,
}

impl TrackSpec {
    pub fn total_frames(&self) -> usize {
        self.context_frames + self.target_frames
    }

    /// Daily meso frames spanning context and target.
    pub fn meso_days(&self) -> usize {
        MESO_PER_FRAME * self.total_frames()
    }
}

/// Context and target partitions of a cube for one track.
#[derive(Debug)]
pub struct TrackSlice<'a> {
    /// `[t_C, 7, h, w]`
    pub context: ArrayView4<'a, f32>,
    /// `[t_C, h, w]`
    pub context_mask: Array3<bool>,
    /// Reflectance channels `[t_T, 4, h, w]`.
    pub target: ArrayView4<'a, f32>,
    /// `[t_T, h, w]`
    pub target_mask: Array3<bool>,
    /// `[5 (t_C + t_T), 5, 80, 80]`, covering context and target days.
    pub meso: ArrayView4<'a, f32>,
    pub hr_static: ArrayView2<'a, f32>,
    pub meso_static: ArrayView2<'a, f32>,
}

/// Splits a cube into context frames `[0, t_C)` and target frames
/// `[t_C, t_C + t_T)`.
pub fn slice_track<'a>(cube: &'a Multicube, track: &TrackSpec) -> Result<TrackSlice<'a>, ModelError> {
    let needed = track.total_frames();
    let available = cube.frames().min(cube.meso_dynamic.len_of(Axis(0)) / MESO_PER_FRAME);
    if available < needed {
        return Err(ModelError::InsufficientFrames { track: track.track, needed, available });
    }
    let tc = track.context_frames;
    let mask = cube.hr_dynamic.index_axis(Axis(1), channel::MASK);
    Ok(TrackSlice {
        context: cube.hr_dynamic.slice(s![..tc, .., .., ..]),
        context_mask: mask.slice(s![..tc, .., ..]).mapv(|v| v >= 0.5),
        target: cube
            .hr_dynamic
            .slice(s![tc..needed, ..channel::REFLECTANCE, .., ..]),
        target_mask: mask.slice(s![tc..needed, .., ..]).mapv(|v| v >= 0.5),
        meso: cube.meso_dynamic.slice(s![..track.meso_days(), .., .., ..]),
        hr_static: cube.hr_static.view(),
        meso_static: cube.meso_static.view(),
    })
}

/// Per-cube subscores and their harmonic mean.
///
/// Missing subscores are NaN and serialize as `null`. `ens` is NaN only
/// when all four subscores are missing.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SubscoreVector {
    pub mad: f64,
    pub ols: f64,
    pub emd: f64,
    pub ssim: f64,
    pub ens: f64,
}

impl SubscoreVector {
    pub fn new(mad: f64, ols: f64, emd: f64, ssim: f64) -> Self {
        let ens = crate::aggregate::harmonic_mean([mad, ols, emd, ssim]).unwrap_or(f64::NAN);
        Self { mad, ols, emd, ssim, ens }
    }

    pub fn components(&self) -> [f64; 4] {
        [self.mad, self.ols, self.emd, self.ssim]
    }
}

/// Rescaling exponents and thresholds of the subscores.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreConfig {
    pub sf_mad: f64,
    pub sf_ndvi: f64,
    pub sf_ssim: f64,
    /// Frames whose masked fraction reaches this value are skipped by SSIM.
    pub ssim_mask_threshold: f64,
    pub ndvi_eps: f64,
    pub prediction_support: PredictionSupport,
}

/// Which predicted NDVI values enter the trend and distribution scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictionSupport {
    /// Only timesteps where the target is unmasked.
    #[default]
    Unmasked,
    /// Every timestep between the first and last unmasked one (trend) or
    /// every timestep (distribution).
    Window,
}

impl Default for ScoreConfig {
    fn default() -> Self {
        Self {
            sf_mad: 0.066_493_469_710_875_26,
            sf_ndvi: 0.100_820_475_486_206_01,
            sf_ssim: 10.318_851_15,
            ssim_mask_threshold: 0.30,
            ndvi_eps: 1e-8,
            prediction_support: PredictionSupport::Unmasked,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{synth_cube, SynthParams};

    fn cube(frames: usize) -> Multicube {
        synth_cube(7, &SynthParams { frames, ..SynthParams::default() }).unwrap().cube
    }

    #[test]
    fn track_frame_counts() {
        assert_eq!((Track::Iid.spec().context_frames, Track::Iid.spec().target_frames), (10, 20));
        assert_eq!((Track::Ood.spec().context_frames, Track::Ood.spec().target_frames), (10, 20));
        assert_eq!(Track::Extreme.spec().total_frames(), 60);
        assert_eq!(Track::Seasonal.spec().total_frames(), 210);
        assert_eq!(Track::Iid.spec().meso_days(), 150);
    }

    #[test]
    fn synthetic_cube_is_valid() {
        assert!(validate_cube(&cube(4)).is_empty());
    }

    #[test]
    fn short_frames_violate_shape() {
        let mut c = cube(2);
        c.hr_dynamic = c.hr_dynamic.slice(s![.., .., ..127, ..]).to_owned();
        let report = validate_cube(&c);
        assert!(report.iter().any(|v| v.field == "hr_dynamic" && v.rule.contains("shape")));
    }

    #[test]
    fn fractional_mask_is_reported() {
        let mut c = cube(2);
        c.hr_dynamic[[0, channel::MASK, 3, 3]] = 0.5;
        let report = validate_cube(&c);
        assert!(report.iter().any(|v| v.rule.contains("non-binary")));
    }

    #[test]
    fn iid_slice_of_thirty_frames() {
        let c = cube(30);
        let sl = slice_track(&c, &Track::Iid.spec()).unwrap();
        assert_eq!(sl.context.shape(), &[10, 7, 128, 128]);
        assert_eq!(sl.target.shape(), &[20, 4, 128, 128]);
        assert_eq!(sl.target_mask.shape(), &[20, 128, 128]);
        assert_eq!(sl.meso.shape()[0], 150);
        // target starts right after the context
        assert_eq!(sl.target[[0, 0, 5, 5]], c.hr_dynamic[[10, 0, 5, 5]]);
        assert_eq!(sl.context[[9, 0, 5, 5]], c.hr_dynamic[[9, 0, 5, 5]]);
    }

    #[test]
    fn seasonal_slice_needs_210_frames() {
        let c = cube(30);
        assert_eq!(
            slice_track(&c, &Track::Seasonal.spec()).unwrap_err(),
            ModelError::InsufficientFrames { track: Track::Seasonal, needed: 210, available: 30 }
        );
    }

    #[test]
    fn seasonal_slice_of_210_frames() {
        let c = synth_cube(1, &SynthParams { frames: 210, cloud_rate: 0.0, ..SynthParams::default() })
            .unwrap()
            .cube;
        let sl = slice_track(&c, &Track::Seasonal.spec()).unwrap();
        assert_eq!(sl.context.shape()[0], 70);
        assert_eq!(sl.target.shape()[0], 140);
        assert_eq!(sl.meso.shape()[0], 1050);
    }

    #[test]
    fn cube_id_metadata() {
        let meta = CubeMeta::parse("32UMC_2018-02-01_0042").unwrap();
        assert_eq!(meta.tile, "32UMC");
        assert_eq!(meta.start_month, 2);
        assert_eq!(meta.latitude_band, LatitudeBand::North);
        let meta = CubeMeta::parse("29SND_2017-06-20_2017-11-16_2105_2233").unwrap();
        assert_eq!(meta.latitude_band, LatitudeBand::South);
        assert!(CubeMeta::parse("garbage").is_err());
        assert!(CubeMeta::parse("32UMC_2018-13-01").is_err());
    }

    #[test]
    fn prediction_shapes_must_agree() {
        let a = Array4::<f32>::zeros((20, 4, 8, 8));
        let b = Array4::<f32>::zeros((19, 4, 8, 8));
        assert!(Prediction::new("x", vec![a.clone(), a.clone()]).is_ok());
        assert!(matches!(
            Prediction::new("x", vec![a, b]),
            Err(ModelError::TrajectoryShape { index: 1, .. })
        ));
        assert!(matches!(Prediction::new("x", vec![]), Err(ModelError::EmptyPrediction { .. })));
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(16))]
        #[test]
        fn slice_is_partition_exact(tc in 1usize..6, tt in 1usize..6, extra in 0usize..3) {
            let frames = tc + tt + extra;
            let c = synth_cube(3, &SynthParams { frames, ..SynthParams::default() }).unwrap().cube;
            let spec = TrackSpec { track: Track::Iid, context_frames: tc, target_frames: tt };
            let sl = slice_track(&c, &spec).unwrap();
            proptest::prop_assert_eq!(sl.context.shape()[0], tc);
            proptest::prop_assert_eq!(sl.target.shape()[0], tt);
            for k in 0..tt {
                proptest::prop_assert_eq!(
                    sl.target.index_axis(Axis(0), k),
                    c.hr_dynamic.slice(s![tc + k, ..4, .., ..])
                );
            }
        }

        #[test]
        fn synth_cubes_always_validate(seed in 0u64..1000) {
            let c = synth_cube(seed, &SynthParams { frames: 3, ..SynthParams::default() }).unwrap().cube;
            proptest::prop_assert!(validate_cube(&c).is_empty());
        }
    }
}
