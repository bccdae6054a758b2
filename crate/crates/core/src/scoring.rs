//! The four EarthNetScore components.
//!
//! Every score compares a target `T`, a binary mask `M` (true = masked) and a
//! prediction `P`, all shaped `[t, 4, h, w]` with channels blue, green, red
//! and near-infrared. Each returns a value in `[0, 1]` (1 = perfect) or NaN
//! when no valid data point exists. Distances are rescaled with the
//! exponents from [`ScoreConfig`] before being turned into scores.
//!
//! Target values that are NaN count as masked.

use ndarray::{s, Array2, Array3, ArrayView2, ArrayView3, ArrayView4, Axis, CowArray, Ix4, Zip};
use thiserror::Error;

use crate::masking::ndvi_value;
use crate::model::{channel, PredictionSupport, ScoreConfig, SubscoreVector};
use crate::stats::{mean, median_in_place};

/// Side length of the uniform SSIM window.
pub const SSIM_WINDOW: usize = 7;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
pub const SSIM_DATA_RANGE: f64 = 1.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScoreError {
    #[error("{what} has shape {found:?}, expected {expected:?}")]
    ShapeMismatch {
        what: &'static str,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("expected {expected} channels, found {found}")]
    ChannelCount { expected: usize, found: usize },
    #[error("frames must be at least {min}x{min} pixels for SSIM, got {h}x{w}")]
    FrameTooSmall { min: usize, h: usize, w: usize },
    #[error("prediction contains {0} non-finite values")]
    NonFinitePrediction(usize),
}

/// Borrowed target, mask and prediction of one scoring call.
#[derive(Debug, Clone)]
pub struct ScoreInput<'a> {
    target: ArrayView4<'a, f32>,
    mask: CowArray<'a, bool, Ix4>,
    pred: ArrayView4<'a, f32>,
}

impl<'a> ScoreInput<'a> {
    pub fn new(
        target: ArrayView4<'a, f32>,
        mask: ArrayView4<'a, bool>,
        pred: ArrayView4<'a, f32>,
    ) -> Result<Self, ScoreError> {
        Self::build(target, mask.into(), pred)
    }

    fn build(
        target: ArrayView4<'a, f32>,
        mask: CowArray<'a, bool, Ix4>,
        pred: ArrayView4<'a, f32>,
    ) -> Result<Self, ScoreError> {
        let shape = target.shape();
        if shape[1] != channel::REFLECTANCE {
            return Err(ScoreError::ChannelCount { expected: channel::REFLECTANCE, found: shape[1] });
        }
        for (what, other) in [("mask", mask.shape()), ("prediction", pred.shape())] {
            if other != shape {
                return Err(ScoreError::ShapeMismatch {
                    what,
                    expected: shape.to_vec(),
                    found: other.to_vec(),
                });
            }
        }
        if shape[2] < SSIM_WINDOW || shape[3] < SSIM_WINDOW {
            return Err(ScoreError::FrameTooSmall { min: SSIM_WINDOW, h: shape[2], w: shape[3] });
        }
        let non_finite = pred.iter().filter(|v| !v.is_finite()).count();
        if non_finite > 0 {
            return Err(ScoreError::NonFinitePrediction(non_finite));
        }
        Ok(Self { target, mask, pred })
    }

    /// Uses one `[t, h, w]` mask for all four channels.
    pub fn with_frame_mask(
        target: ArrayView4<'a, f32>,
        frame_mask: ArrayView3<'a, bool>,
        pred: ArrayView4<'a, f32>,
    ) -> Result<Self, ScoreError> {
        let (t, h, w) = frame_mask.dim();
        let shape = (t, channel::REFLECTANCE, h, w);
        let mask = frame_mask
            .insert_axis(Axis(1))
            .broadcast(shape)
            .ok_or_else(|| ScoreError::ShapeMismatch {
                what: "mask",
                expected: target.shape().to_vec(),
                found: vec![t, 1, h, w],
            })?
            .to_owned();
        Self::build(target, mask.into(), pred)
    }

    fn valid(&self, t: f32, m: bool) -> bool {
        !m && !t.is_nan()
    }
}

/// Median absolute deviation score, `1 - mad^sf_mad`.
///
/// The median runs over all unmasked entries of the flattened arrays.
pub fn mad_score(input: &ScoreInput, cfg: &ScoreConfig) -> f64 {
    let mut deviations = Vec::with_capacity(input.target.len());
    Zip::from(&input.target)
        .and(&input.mask)
        .and(&input.pred)
        .for_each(|&t, &m, &p| {
            if input.valid(t, m) {
                deviations.push((p as f64 - t as f64).abs());
            }
        });
    if deviations.is_empty() {
        return f64::NAN;
    }
    let mad = median_in_place(&mut deviations);
    1.0 - mad.powf(cfg.sf_mad)
}

/// NDVI of target and prediction plus per-timestep target validity, `[t, h, w]`.
struct NdviCubes {
    target: Array3<f64>,
    valid: Array3<bool>,
    pred: Array3<f64>,
}

fn ndvi_cubes(input: &ScoreInput, eps: f64) -> NdviCubes {
    let ch = |a: &ArrayView4<'_, f32>, c: usize| a.index_axis(Axis(1), c).to_owned();
    let (t_red, t_nir) = (ch(&input.target, channel::RED), ch(&input.target, channel::NIR));
    let (p_red, p_nir) = (ch(&input.pred, channel::RED), ch(&input.pred, channel::NIR));
    let m_red = input.mask.index_axis(Axis(1), channel::RED);
    let m_nir = input.mask.index_axis(Axis(1), channel::NIR);

    let target = Zip::from(&t_red)
        .and(&t_nir)
        .map_collect(|&r, &n| ndvi_value(r as f64, n as f64, eps));
    let valid = Zip::from(&m_red)
        .and(&m_nir)
        .and(&target)
        .map_collect(|&mr, &mn, v| !mr && !mn && !v.is_nan());
    let pred = Zip::from(&p_red)
        .and(&p_nir)
        .map_collect(|&r, &n| ndvi_value(r as f64, n as f64, eps));
    NdviCubes { target, valid, pred }
}

/// Least-squares slope of `ys` against `xs`.
///
/// Uses the normal equations on `y - y[0]` so constant series give exactly
/// zero. `None` for fewer than two points or a degenerate regressor.
pub fn ols_slope(xs: &[f64], ys: &[f64]) -> Option<f64> {
    debug_assert_eq!(xs.len(), ys.len());
    if xs.len() < 2 {
        return None;
    }
    let y0 = ys[0];
    let n = xs.len() as f64;
    let (mut sx, mut sy, mut sxx, mut sxy) = (0.0, 0.0, 0.0, 0.0);
    for (&x, &y) in xs.iter().zip(ys) {
        let y = y - y0;
        sx += x;
        sy += y;
        sxx += x * x;
        sxy += x * y;
    }
    let denom = n * sxx - sx * sx;
    if denom <= 0.0 {
        return None;
    }
    Some((n * sxy - sx * sy) / denom)
}

/// Maps timestep `t` of the window `[first, last]` onto `[0, 2]`, so an NDVI
/// swing from -1 to 1 across the window has slope 1.
#[inline]
fn rescaled_time(t: usize, first: usize, last: usize) -> f64 {
    2.0 * (t - first) as f64 / (last - first) as f64
}

/// Pixelwise NDVI trend score.
///
/// Per pixel the target slope is fit on unmasked timesteps. The predicted
/// slope uses the same timesteps, or with [`PredictionSupport::Window`] every
/// timestep between the first and last unmasked one. Slopes are clamped to
/// `[-1, 1]`; the distance is `|b_pred - b_targ| / 2`.
pub fn ols_score(input: &ScoreInput, cfg: &ScoreConfig) -> f64 {
    let ndvi = ndvi_cubes(input, cfg.ndvi_eps);
    let (_, h, w) = ndvi.target.dim();
    let mut terms = Vec::with_capacity(h * w);
    let (mut xs, mut ys) = (Vec::new(), Vec::new());
    for i in 0..h {
        for j in 0..w {
            let valid = ndvi.valid.slice(s![.., i, j]);
            let steps: Vec<usize> = valid.iter().enumerate().filter(|(_, v)| **v).map(|(t, _)| t).collect();
            if steps.len() < 2 {
                continue;
            }
            let (first, last) = (steps[0], *steps.last().unwrap());

            xs.clear();
            ys.clear();
            for &t in &steps {
                xs.push(rescaled_time(t, first, last));
                ys.push(ndvi.target[[t, i, j]]);
            }
            let Some(b_targ) = ols_slope(&xs, &ys) else { continue };

            xs.clear();
            ys.clear();
            let mut push = |t: usize| {
                xs.push(rescaled_time(t, first, last));
                ys.push(ndvi.pred[[t, i, j]]);
            };
            match cfg.prediction_support {
                PredictionSupport::Unmasked => steps.iter().for_each(|&t| push(t)),
                PredictionSupport::Window => (first..=last).for_each(push),
            }
            let Some(b_pred) = ols_slope(&xs, &ys) else { continue };

            let dist = (b_pred.clamp(-1.0, 1.0) - b_targ.clamp(-1.0, 1.0)).abs() / 2.0;
            terms.push(dist.powf(cfg.sf_ndvi));
        }
    }
    if terms.is_empty() {
        return f64::NAN;
    }
    1.0 - mean(&terms)
}

/// Wasserstein-1 distance between two empirical distributions on the line.
///
/// Integrates the absolute difference of the two CDFs over the pooled
/// support. Both inputs must be non-empty and free of NaN.
pub fn wasserstein_1d(u: &[f64], v: &[f64]) -> f64 {
    assert!(!u.is_empty() && !v.is_empty(), "empty distribution");
    let mut u = u.to_vec();
    let mut v = v.to_vec();
    u.sort_by(f64::total_cmp);
    v.sort_by(f64::total_cmp);
    let (nu, nv) = (u.len() as f64, v.len() as f64);
    let (mut i, mut j) = (0, 0);
    let mut x = u[0].min(v[0]);
    let mut dist = 0.0;
    loop {
        while i < u.len() && u[i] <= x {
            i += 1;
        }
        while j < v.len() && v[j] <= x {
            j += 1;
        }
        let next = match (u.get(i), v.get(j)) {
            (None, None) => break,
            (Some(&a), None) => a,
            (None, Some(&b)) => b,
            (Some(&a), Some(&b)) => a.min(b),
        };
        dist += (i as f64 / nu - j as f64 / nv).abs() * (next - x);
        x = next;
    }
    dist
}

/// Pixelwise NDVI distribution score.
///
/// Per pixel, W1 between the unmasked target NDVI values and the predicted
/// NDVI values at the same timesteps (all timesteps with
/// [`PredictionSupport::Window`]). Pixels without an unmasked target value
/// are skipped.
pub fn emd_score(input: &ScoreInput, cfg: &ScoreConfig) -> f64 {
    let ndvi = ndvi_cubes(input, cfg.ndvi_eps);
    let (_, h, w) = ndvi.target.dim();
    let mut terms = Vec::with_capacity(h * w);
    let (mut targ, mut pred) = (Vec::new(), Vec::new());
    for i in 0..h {
        for j in 0..w {
            targ.clear();
            pred.clear();
            let valid = ndvi.valid.slice(s![.., i, j]);
            let values = ndvi.target.slice(s![.., i, j]);
            let predicted = ndvi.pred.slice(s![.., i, j]);
            for ((&x, &p), &v) in values.iter().zip(predicted.iter()).zip(valid.iter()) {
                if v {
                    targ.push(x);
                }
                if v || cfg.prediction_support == PredictionSupport::Window {
                    pred.push(p);
                }
            }
            if targ.is_empty() {
                continue;
            }
            let w1 = wasserstein_1d(&targ, &pred);
            terms.push(w1.powf(cfg.sf_ndvi).min(1.0));
        }
    }
    if terms.is_empty() {
        return f64::NAN;
    }
    1.0 - mean(&terms)
}

/// Summed-area table with a zero first row and column.
fn integral(a: &Array2<f64>) -> Array2<f64> {
    let (h, w) = a.dim();
    let mut out = Array2::<f64>::zeros((h + 1, w + 1));
    for i in 0..h {
        let mut row = 0.0;
        for j in 0..w {
            row += a[[i, j]];
            out[[i + 1, j + 1]] = out[[i, j + 1]] + row;
        }
    }
    out
}

#[inline]
fn window_sum(sat: &Array2<f64>, i: usize, j: usize, k: usize) -> f64 {
    sat[[i + k, j + k]] - sat[[i, j + k]] - sat[[i + k, j]] + sat[[i, j]]
}

/// Mean structural similarity of two frames.
///
/// Uniform 7×7 window, sample covariance, `K1 = 0.01`, `K2 = 0.03`, data
/// range 1. The local map is averaged over window positions lying fully
/// inside the frame.
pub fn ssim_frame(x: ArrayView2<f64>, y: ArrayView2<f64>) -> f64 {
    assert_eq!(x.shape(), y.shape());
    let (h, w) = x.dim();
    let k = SSIM_WINDOW;
    assert!(h >= k && w >= k, "frame smaller than the SSIM window");

    let xo = x.to_owned();
    let yo = y.to_owned();
    let sx = integral(&xo);
    let sy = integral(&yo);
    let sxx = integral(&(&xo * &xo));
    let syy = integral(&(&yo * &yo));
    let sxy = integral(&(&xo * &yo));

    let np = (k * k) as f64;
    let cov_norm = np / (np - 1.0);
    let c1 = (SSIM_K1 * SSIM_DATA_RANGE).powi(2);
    let c2 = (SSIM_K2 * SSIM_DATA_RANGE).powi(2);

    let mut local = Vec::with_capacity((h - k + 1) * (w - k + 1));
    for i in 0..=h - k {
        for j in 0..=w - k {
            let ux = window_sum(&sx, i, j, k) / np;
            let uy = window_sum(&sy, i, j, k) / np;
            let uxx = window_sum(&sxx, i, j, k) / np;
            let uyy = window_sum(&syy, i, j, k) / np;
            let uxy = window_sum(&sxy, i, j, k) / np;
            let vx = cov_norm * (uxx - ux * ux);
            let vy = cov_norm * (uyy - uy * uy);
            let vxy = cov_norm * (uxy - ux * uy);
            let a1 = 2.0 * ux * uy + c1;
            let a2 = 2.0 * vxy + c2;
            let b1 = ux * ux + uy * uy + c1;
            let b2 = vx + vy + c2;
            local.push((a1 * a2) / (b1 * b2));
        }
    }
    mean(&local)
}

/// Mean SSIM over admitted frames before clamping and rescaling, NaN if no
/// frame is admitted.
///
/// Each (timestep, channel) frame whose target is less than
/// `ssim_mask_threshold` masked is admitted; its masked target pixels are
/// replaced by the predicted ones.
pub fn ssim_raw(input: &ScoreInput, cfg: &ScoreConfig) -> f64 {
    let (t_len, c_len, h, w) = input.target.dim();
    let pixels = (h * w) as f64;
    let mut per_frame = Vec::new();
    for t in 0..t_len {
        for c in 0..c_len {
            let target = input.target.slice(s![t, c, .., ..]);
            let mask = input.mask.slice(s![t, c, .., ..]);
            let pred = input.pred.slice(s![t, c, .., ..]);
            let masked = Zip::from(&target)
                .and(&mask)
                .fold(0usize, |acc, &v, &m| acc + !input.valid(v, m) as usize);
            if masked as f64 / pixels >= cfg.ssim_mask_threshold {
                continue;
            }
            let filled = Zip::from(&target)
                .and(&mask)
                .and(&pred)
                .map_collect(|&v, &m, &p| if input.valid(v, m) { v as f64 } else { p as f64 });
            let pred = pred.mapv(f64::from);
            per_frame.push(ssim_frame(filled.view(), pred.view()));
        }
    }
    mean(&per_frame)
}

/// Structural similarity score, `clamp(mean SSIM, 0, 1)^sf_ssim`.
pub fn ssim_score(input: &ScoreInput, cfg: &ScoreConfig) -> f64 {
    rescale_ssim(ssim_raw(input, cfg), cfg)
}

/// Clamps a raw SSIM to `[0, 1]` and applies the rescaling exponent.
pub fn rescale_ssim(raw: f64, cfg: &ScoreConfig) -> f64 {
    if raw.is_nan() {
        return f64::NAN;
    }
    raw.clamp(0.0, 1.0).powf(cfg.sf_ssim)
}

/// All four subscores and their harmonic mean.
pub fn score(input: &ScoreInput, cfg: &ScoreConfig) -> SubscoreVector {
    SubscoreVector::new(
        mad_score(input, cfg),
        ols_score(input, cfg),
        emd_score(input, cfg),
        ssim_score(input, cfg),
    )
}
