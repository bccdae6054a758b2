//! NDVI and the rule-based data quality mask.

use ndarray::{Array2, ArrayView2, ArrayView3, Axis, Zip};
use thiserror::Error;

use crate::model::{channel, Multicube};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MaskError {
    #[error("structuring element size must be odd, got {0}")]
    EvenKernel(usize),
    #[error("shape mismatch: {left:?} vs {right:?}")]
    ShapeMismatch { left: Vec<usize>, right: Vec<usize> },
    #[error("frame needs at least {needed} channels, got {found}")]
    MissingChannels { needed: usize, found: usize },
}

/// Sentinel-2 scene classification codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum SceneClass {
    NoData = 0,
    SaturatedOrDefective = 1,
    DarkArea = 2,
    CloudShadow = 3,
    Vegetation = 4,
    NotVegetated = 5,
    Water = 6,
    /// Also labelled "unclassified" by newer processors.
    CloudLowProbability = 7,
    CloudMediumProbability = 8,
    CloudHighProbability = 9,
    ThinCirrus = 10,
    Snow = 11,
}

impl SceneClass {
    pub fn from_code(code: f32) -> Option<Self> {
        use SceneClass::*;
        if !code.is_finite() || code.fract() != 0.0 {
            return None;
        }
        Some(match code as i64 {
            0 => NoData,
            1 => SaturatedOrDefective,
            2 => DarkArea,
            3 => CloudShadow,
            4 => Vegetation,
            5 => NotVegetated,
            6 => Water,
            7 => CloudLowProbability,
            8 => CloudMediumProbability,
            9 => CloudHighProbability,
            10 => ThinCirrus,
            11 => Snow,
            _ => return None,
        })
    }

    pub fn code(self) -> f32 {
        self as u8 as f32
    }

    /// Classes that invalidate a pixel.
    pub fn is_masked(self) -> bool {
        use SceneClass::*;
        matches!(
            self,
            NoData
                | SaturatedOrDefective
                | DarkArea
                | CloudShadow
                | CloudLowProbability
                | CloudMediumProbability
                | CloudHighProbability
                | ThinCirrus
        )
    }
}

/// Normalized difference vegetation index of one pixel.
#[inline]
pub fn ndvi_value(red: f64, nir: f64, eps: f64) -> f64 {
    (nir - red) / (nir + red + eps)
}

/// Elementwise NDVI of two aligned frames. NaN propagates.
pub fn ndvi(red: ArrayView2<f32>, nir: ArrayView2<f32>, eps: f64) -> Result<Array2<f64>, MaskError> {
    if red.shape() != nir.shape() {
        return Err(MaskError::ShapeMismatch {
            left: red.shape().to_vec(),
            right: nir.shape().to_vec(),
        });
    }
    Ok(Zip::from(&red)
        .and(&nir)
        .map_collect(|&r, &n| ndvi_value(r as f64, n as f64, eps)))
}

/// The per-pixel part of the quality mask, before morphology.
///
/// A pixel is invalid when a reflectance value is missing, when it is bright
/// and bluish (`r + g + b > 0.435` and `b + 0.03 > g`), when blue exceeds
/// 0.35, or when its scene class is one of the masked classes.
pub fn pixel_is_invalid(blue: f32, green: f32, red: f32, nir: f32, scl: f32) -> bool {
    if !(blue.is_finite() && green.is_finite() && red.is_finite() && nir.is_finite()) {
        return true;
    }
    if red + green + blue > 0.435 && blue + 0.03 > green {
        return true;
    }
    if blue > 0.35 {
        return true;
    }
    // unknown codes do not mask
    SceneClass::from_code(scl).is_some_and(SceneClass::is_masked)
}

/// Binary erosion with a `k`×`k` square.
///
/// Pixels outside the image count as unmasked, so a pixel survives only when
/// its whole neighbourhood lies inside the image and is masked.
pub fn erode(mask: ArrayView2<bool>, k: usize) -> Result<Array2<bool>, MaskError> {
    separable(mask, k, |count, k| count == k)
}

/// Binary dilation with a `k`×`k` square. Pixels outside the image are unmasked.
pub fn dilate(mask: ArrayView2<bool>, k: usize) -> Result<Array2<bool>, MaskError> {
    separable(mask, k, |count, _| count > 0)
}

fn separable(
    mask: ArrayView2<bool>,
    k: usize,
    keep: impl Fn(usize, usize) -> bool + Copy,
) -> Result<Array2<bool>, MaskError> {
    if k.is_multiple_of(2) {
        return Err(MaskError::EvenKernel(k));
    }
    let rows = window_pass(mask, Axis(1), k, keep);
    Ok(window_pass(rows.view(), Axis(0), k, keep))
}

fn window_pass(src: ArrayView2<bool>, axis: Axis, k: usize, keep: impl Fn(usize, usize) -> bool) -> Array2<bool> {
    let r = k / 2;
    let mut out = Array2::from_elem(src.raw_dim(), false);
    let mut prefix = Vec::new();
    for (line, mut dst) in src.lanes(axis).into_iter().zip(out.lanes_mut(axis)) {
        let n = line.len();
        prefix.clear();
        prefix.push(0usize);
        for &v in line.iter() {
            prefix.push(prefix.last().unwrap() + v as usize);
        }
        for i in 0..n {
            let lo = i.saturating_sub(r);
            let hi = (i + r + 1).min(n);
            dst[i] = keep(prefix[hi] - prefix[lo], k);
        }
    }
    out
}

/// Size of the structuring element that removes small artifacts.
pub const ERODE_SIZE: usize = 3;
/// Size of the structuring element that smooths mask borders.
pub const DILATE_SIZE: usize = 7;

/// Builds the data quality mask of one high-resolution frame `[c, h, w]`.
///
/// `c` must cover at least blue, green, red, nir, cloud probability and
/// scene classification. Returns `true` for masked pixels.
pub fn build_quality_mask(frame: ArrayView3<f32>) -> Result<Array2<bool>, MaskError> {
    let needed = channel::SCL + 1;
    if frame.len_of(Axis(0)) < needed {
        return Err(MaskError::MissingChannels { needed, found: frame.len_of(Axis(0)) });
    }
    let raw = Zip::from(frame.index_axis(Axis(0), channel::BLUE))
        .and(frame.index_axis(Axis(0), channel::GREEN))
        .and(frame.index_axis(Axis(0), channel::RED))
        .and(frame.index_axis(Axis(0), channel::NIR))
        .and(frame.index_axis(Axis(0), channel::SCL))
        .map_collect(|&b, &g, &r, &n, &scl| pixel_is_invalid(b, g, r, n, scl));
    let eroded = erode(raw.view(), ERODE_SIZE)?;
    dilate(eroded.view(), DILATE_SIZE)
}

/// Recomputes the mask channel of every frame in place.
pub fn apply_quality_mask(cube: &mut Multicube) -> Result<(), MaskError> {
    for mut frame in cube.hr_dynamic.outer_iter_mut() {
        let mask = build_quality_mask(frame.view())?;
        frame
            .index_axis_mut(Axis(0), channel::MASK)
            .assign(&mask.mapv(|m| if m { 1.0f32 } else { 0.0 }));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array2, Array3};
    use proptest::prelude::*;

    /// Direct O(n² k²) morphology with the same border policy.
    fn naive_morph(mask: &Array2<bool>, k: usize, erode: bool) -> Array2<bool> {
        let (h, w) = mask.dim();
        let r = (k / 2) as isize;
        Array2::from_shape_fn((h, w), |(i, j)| {
            let mut all = true;
            let mut any = false;
            for di in -r..=r {
                for dj in -r..=r {
                    let (y, x) = (i as isize + di, j as isize + dj);
                    let v = y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w && mask[[y as usize, x as usize]];
                    all &= v;
                    any |= v;
                }
            }
            if erode { all } else { any }
        })
    }

    fn frame(h: usize, w: usize, b: f32, g: f32, r: f32, scl: SceneClass) -> Array3<f32> {
        let mut f = Array3::<f32>::zeros((channel::COUNT, h, w));
        f.index_axis_mut(Axis(0), channel::BLUE).fill(b);
        f.index_axis_mut(Axis(0), channel::GREEN).fill(g);
        f.index_axis_mut(Axis(0), channel::RED).fill(r);
        f.index_axis_mut(Axis(0), channel::NIR).fill(0.3);
        f.index_axis_mut(Axis(0), channel::SCL).fill(scl.code());
        f
    }

    #[test]
    fn ndvi_examples() {
        let z = Array2::<f32>::zeros((2, 2));
        assert!(ndvi(z.view(), z.view(), 1e-8).unwrap().iter().all(|v| *v == 0.0));
        assert!((ndvi_value(0.1, 0.3, 1e-8) - 0.5).abs() < 1e-7);
        assert_eq!(ndvi_value(0.2, 0.2, 1e-8), 0.0);
        assert!(ndvi_value(f64::NAN, 0.2, 1e-8).is_nan());
        let other = Array2::<f32>::zeros((2, 3));
        assert!(ndvi(z.view(), other.view(), 1e-8).is_err());
    }

    #[test]
    fn clear_frame_has_empty_mask() {
        let f = frame(16, 16, 0.05, 0.1, 0.08, SceneClass::Vegetation);
        assert!(build_quality_mask(f.view()).unwrap().iter().all(|m| !m));
    }

    #[test]
    fn bright_frame_is_fully_masked() {
        let f = frame(16, 16, 0.4, 0.4, 0.4, SceneClass::Vegetation);
        assert!(build_quality_mask(f.view()).unwrap().iter().all(|m| *m));
    }

    #[test]
    fn masked_scene_classes_fire() {
        for code in [0, 1, 2, 3, 7, 8, 9, 10] {
            let class = SceneClass::from_code(code as f32).unwrap();
            let f = frame(9, 9, 0.05, 0.1, 0.08, class);
            assert!(build_quality_mask(f.view()).unwrap().iter().all(|m| *m), "{class:?}");
        }
        for code in [4, 5, 6, 11] {
            let class = SceneClass::from_code(code as f32).unwrap();
            let f = frame(9, 9, 0.05, 0.1, 0.08, class);
            assert!(build_quality_mask(f.view()).unwrap().iter().all(|m| !m), "{class:?}");
        }
    }

    #[test]
    fn rgb_rule_needs_both_conditions() {
        // bright but green dominant: sum > 0.435, b + 0.03 <= g
        assert!(!pixel_is_invalid(0.1, 0.2, 0.2, 0.3, 4.0));
        // bluish but dark
        assert!(!pixel_is_invalid(0.1, 0.1, 0.1, 0.3, 4.0));
        assert!(pixel_is_invalid(0.15, 0.16, 0.2, 0.3, 4.0));
        assert!(pixel_is_invalid(f32::NAN, 0.1, 0.1, 0.3, 4.0));
    }

    #[test]
    fn isolated_pixel_is_removed() {
        // 9x9 clear frame with one bright pixel in the middle
        let mut f = frame(9, 9, 0.05, 0.1, 0.08, SceneClass::Vegetation);
        f[[channel::BLUE, 4, 4]] = 0.6;
        let raw = Array2::from_shape_fn((9, 9), |(i, j)| i == 4 && j == 4);
        let oracle = naive_morph(&naive_morph(&raw, 3, true), 7, false);
        assert!(oracle.iter().all(|m| !m));
        assert_eq!(build_quality_mask(f.view()).unwrap(), oracle);
    }

    #[test]
    fn erode_all_ones_clears_border() {
        let ones = Array2::from_elem((6, 6), true);
        let e = erode(ones.view(), 3).unwrap();
        assert_eq!(e, naive_morph(&ones, 3, true));
        for ((i, j), v) in e.indexed_iter() {
            assert_eq!(*v, (1..5).contains(&i) && (1..5).contains(&j));
        }
    }

    #[test]
    fn dilate_zeros_stays_zero() {
        let zeros = Array2::from_elem((10, 10), false);
        assert!(dilate(zeros.view(), 7).unwrap().iter().all(|m| !m));
        let single = Array2::from_shape_fn((10, 10), |(i, j)| i == 3 && j == 7);
        let opened = dilate(erode(single.view(), 3).unwrap().view(), 7).unwrap();
        assert!(opened.iter().all(|m| !m));
    }

    #[test]
    fn even_kernel_rejected() {
        let m = Array2::from_elem((4, 4), true);
        assert_eq!(erode(m.view(), 4).unwrap_err(), MaskError::EvenKernel(4));
        assert_eq!(dilate(m.view(), 2).unwrap_err(), MaskError::EvenKernel(2));
    }

    fn mask_strategy(n: usize) -> impl Strategy<Value = Array2<bool>> {
        proptest::collection::vec(proptest::bool::weighted(0.6), n * n)
            .prop_map(move |v| Array2::from_shape_vec((n, n), v).unwrap())
    }

    proptest! {
        #[test]
        fn morphology_matches_oracle(m in mask_strategy(12), k in prop_oneof![Just(1usize), Just(3), Just(5), Just(7)]) {
            prop_assert_eq!(erode(m.view(), k).unwrap(), naive_morph(&m, k, true));
            prop_assert_eq!(dilate(m.view(), k).unwrap(), naive_morph(&m, k, false));
        }

        #[test]
        fn erode_inside_mask_inside_dilate(m in mask_strategy(10), k in prop_oneof![Just(3usize), Just(5)]) {
            let e = erode(m.view(), k).unwrap();
            let d = dilate(m.view(), k).unwrap();
            for ((a, b), c) in e.iter().zip(m.iter()).zip(d.iter()) {
                prop_assert!(!a | b);
                prop_assert!(!b | c);
            }
        }

        #[test]
        fn ndvi_antisymmetric(r in 0f64..1.0, n in 0f64..1.0) {
            prop_assert_eq!(ndvi_value(r, n, 1e-8), -ndvi_value(n, r, 1e-8));
        }
    }
}
