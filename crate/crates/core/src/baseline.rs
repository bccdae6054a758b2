//! Persistence forecasts from the context frames.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::{Array2, Array3, Array4, ArrayView3, ArrayView4, Axis};
use thiserror::Error;

use crate::io::{write_prediction, CubeIoError};
use crate::model::{channel, slice_track, ModelError, Multicube, Prediction, TrackSpec};

#[derive(Debug, Error)]
pub enum BaselineError {
    #[error("no valid context pixel in band {band}")]
    AllMasked { band: usize },
    #[error("context needs at least one frame")]
    NoContext,
    #[error("context has shape {context:?} but mask has {mask:?}")]
    ShapeMismatch { context: Vec<usize>, mask: Vec<usize> },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Io(#[from] CubeIoError),
}

/// How each pixel's value is derived from its unmasked context values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Method {
    /// Mean of the cloud-free context values.
    #[default]
    CloudFreeMean,
    /// The most recent cloud-free context value.
    LastValid,
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "mean" | "cloud-free-mean" => Ok(Self::CloudFreeMean),
            "last" | "last-valid" => Ok(Self::LastValid),
            other => Err(format!("unknown baseline method {other:?} (expected mean or last)")),
        }
    }
}

/// One forecast frame `[4, h, w]` from context reflectances `[t, c >= 4, h, w]`
/// and their mask `[t, h, w]` (true = masked).
///
/// Pixels without any valid context value take the band's mean over the
/// valid pixels of the latest context frame that has one.
pub fn persistence_frame(
    context: ArrayView4<f32>,
    mask: ArrayView3<bool>,
    method: Method,
) -> Result<Array3<f32>, BaselineError> {
    let (t, c, h, w) = context.dim();
    if t == 0 {
        return Err(BaselineError::NoContext);
    }
    if c < channel::REFLECTANCE || mask.dim() != (t, h, w) {
        return Err(BaselineError::ShapeMismatch { context: context.shape().to_vec(), mask: mask.shape().to_vec() });
    }
    let mut out = Array3::<f32>::zeros((channel::REFLECTANCE, h, w));
    for band in 0..channel::REFLECTANCE {
        let values = context.index_axis(Axis(1), band);
        let valid = |k: usize, i: usize, j: usize| !mask[[k, i, j]] && !values[[k, i, j]].is_nan();
        let mut missing = Array2::from_elem((h, w), false);
        for i in 0..h {
            for j in 0..w {
                let v = match method {
                    Method::CloudFreeMean => {
                        let (sum, n) = (0..t)
                            .filter(|&k| valid(k, i, j))
                            .fold((0.0f64, 0usize), |(s, n), k| (s + f64::from(values[[k, i, j]]), n + 1));
                        (n > 0).then(|| (sum / n as f64) as f32)
                    }
                    Method::LastValid => (0..t).rev().find(|&k| valid(k, i, j)).map(|k| values[[k, i, j]]),
                };
                match v {
                    Some(v) => out[[band, i, j]] = v,
                    None => missing[[i, j]] = true,
                }
            }
        }
        if missing.iter().any(|&m| m) {
            let fallback = (0..t)
                .rev()
                .find_map(|k| {
                    let (sum, n) = (0..h)
                        .flat_map(|i| (0..w).map(move |j| (i, j)))
                        .filter(|&(i, j)| valid(k, i, j))
                        .fold((0.0f64, 0usize), |(s, n), (i, j)| (s + f64::from(values[[k, i, j]]), n + 1));
                    (n > 0).then(|| (sum / n as f64) as f32)
                })
                .ok_or(BaselineError::AllMasked { band })?;
            let mut plane = out.index_axis_mut(Axis(0), band);
            for ((i, j), &m) in missing.indexed_iter() {
                if m {
                    plane[[i, j]] = fallback;
                }
            }
        }
    }
    Ok(out)
}

/// Repeats the persistence frame `target_frames` times, `[t_T, 4, h, w]`.
pub fn persistence_predict(
    context: ArrayView4<f32>,
    mask: ArrayView3<bool>,
    target_frames: usize,
    method: Method,
) -> Result<Array4<f32>, BaselineError> {
    let frame = persistence_frame(context, mask, method)?;
    let (c, h, w) = frame.dim();
    Ok(frame
        .insert_axis(Axis(0))
        .broadcast((target_frames, c, h, w))
        .expect("broadcast over time")
        .to_owned())
}

/// Single-trajectory baseline prediction for a cube on one track.
pub fn baseline_prediction(cube: &Multicube, track: &TrackSpec, method: Method) -> Result<Prediction, BaselineError> {
    let slice = slice_track(cube, track)?;
    let traj = persistence_predict(slice.context, slice.context_mask.view(), track.target_frames, method)?;
    Ok(Prediction::new(cube.cube_id(), vec![traj])?)
}

/// Computes and writes the baseline for one cube under `out`.
pub fn write_baseline(cube: &Multicube, track: &TrackSpec, method: Method, out: &Path) -> Result<Vec<PathBuf>, BaselineError> {
    let prediction = baseline_prediction(cube, track, method)?;
    Ok(write_prediction(&prediction, out)?)
}
