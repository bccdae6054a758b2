//! Deterministic synthetic multicubes and quality-table corpora.
//!
//! All randomness comes from ChaCha8 (`rand_chacha`) seeded with
//! `seed_from_u64(seed)`. Draws happen in a fixed order, so a seed and a
//! parameter set always give the same output; [`GENERATOR_VERSION`] changes
//! whenever that order does.
//!
//! Spatial fields use midpoint displacement (diamond-square) on a 129x129
//! grid. Clear-sky reflectances stay far from every cloud rule of
//! [`build_quality_mask`]; clouds are unions of bright squares with a
//! half-width of at least two pixels, which survive the 3x3 erosion and are
//! fully covered again by the 7x7 dilation.

use std::f64::consts::TAU;

use ndarray::{s, Array2, Array3, Array4, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use thiserror::Error;

use crate::curation::{indicators_from_fractions, quality_score, CurationConfig, HardFilter};
use crate::io::{ManifestEntry, QualityTableRow};
use crate::masking::{build_quality_mask, SceneClass};
use crate::model::{
    channel, CubeMeta, LatitudeBand, Multicube, HR_SIZE, MESO_PER_FRAME, MESO_SIZE, MESO_VARIABLES,
};

pub const GENERATOR_VERSION: &str = "synth-v1";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SynthError {
    #[error("invalid synth parameter: {0}")]
    InvalidParams(String),
}

/// Knobs of [`synth_cube`].
#[derive(Debug, Clone, PartialEq)]
pub struct SynthParams {
    pub frames: usize,
    /// Mean fraction of cloud-covered pixels per frame, before dilation.
    pub cloud_rate: f64,
    /// Amplitude of the yearly NDVI cycle.
    pub season_amplitude: f64,
    /// Standard deviation of per-value reflectance noise.
    pub noise_sigma: f64,
    /// Fraction of pixels that are open water.
    pub water_fraction: f64,
    /// Derive the mask channel with [`build_quality_mask`] instead of using
    /// the raw cloud footprint.
    pub rule_consistent: bool,
    pub tile: String,
    pub start_month: u8,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            frames: 30,
            cloud_rate: 0.1,
            season_amplitude: 0.2,
            noise_sigma: 0.005,
            water_fraction: 0.05,
            rule_consistent: true,
            tile: "32UMC".into(),
            start_month: 3,
        }
    }
}

impl SynthParams {
    fn check(&self) -> Result<LatitudeBand, SynthError> {
        let bad = |m: String| Err(SynthError::InvalidParams(m));
        if self.frames == 0 {
            return bad("frames must be at least 1".into());
        }
        for (name, v) in [("cloud_rate", self.cloud_rate), ("water_fraction", self.water_fraction)] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} = {v} outside [0, 1]"));
            }
        }
        for (name, v) in [("season_amplitude", self.season_amplitude), ("noise_sigma", self.noise_sigma)] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} = {v} must be finite and non-negative"));
            }
        }
        if !(1..=12).contains(&self.start_month) {
            return bad(format!("start_month = {} outside 1..=12", self.start_month));
        }
        if self.tile.contains('_') {
            return bad(format!("tile {:?} must not contain '_'", self.tile));
        }
        LatitudeBand::from_tile(&self.tile)
            .map_or_else(|| bad(format!("tile {:?} has no latitude band letter", self.tile)), Ok)
    }
}

/// A synthetic cube together with its cloud-free reflectances.
#[derive(Debug, Clone)]
pub struct SynthCube {
    pub cube: Multicube,
    /// `[t, 4, 128, 128]` reflectances without clouds.
    pub clear_sky: Array4<f32>,
}

/// Diamond-square field on a `(2^n + 1)` square grid, scaled to `[0, 1]`.
pub fn diamond_square(rng: &mut impl Rng, n: u32, roughness: f64) -> Array2<f64> {
    let size = (1usize << n) + 1;
    let mut f = Array2::<f64>::zeros((size, size));
    for (i, j) in [(0, 0), (0, size - 1), (size - 1, 0), (size - 1, size - 1)] {
        f[[i, j]] = rng.random::<f64>();
    }
    let mut step = size - 1;
    let mut scale = 1.0;
    while step > 1 {
        let half = step / 2;
        for i in (half..size).step_by(step) {
            for j in (half..size).step_by(step) {
                let avg = (f[[i - half, j - half]] + f[[i - half, j + half]] + f[[i + half, j - half]] + f[[i + half, j + half]])
                    / 4.0;
                f[[i, j]] = avg + scale * (rng.random::<f64>() - 0.5);
            }
        }
        for i in (0..size).step_by(half) {
            let start = if (i / half).is_multiple_of(2) { half } else { 0 };
            for j in (start..size).step_by(step) {
                let mut sum = 0.0;
                let mut k = 0.0;
                if i >= half {
                    sum += f[[i - half, j]];
                    k += 1.0;
                }
                if i + half < size {
                    sum += f[[i + half, j]];
                    k += 1.0;
                }
                if j >= half {
                    sum += f[[i, j - half]];
                    k += 1.0;
                }
                if j + half < size {
                    sum += f[[i, j + half]];
                    k += 1.0;
                }
                f[[i, j]] = sum / k + scale * (rng.random::<f64>() - 0.5);
            }
        }
        step = half;
        scale *= roughness;
    }
    let lo = f.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = f.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    f.mapv(|v| (v - lo) / span)
}

fn field(rng: &mut ChaCha8Rng, side: usize) -> Array2<f64> {
    diamond_square(rng, 7, 0.55).slice(s![..side, ..side]).to_owned()
}

/// Value below which a `q` fraction of `values` lies.
fn quantile(values: &Array2<f64>, q: f64) -> f64 {
    let mut v: Vec<f64> = values.iter().copied().collect();
    v.sort_by(f64::total_cmp);
    let k = ((q * v.len() as f64).round() as usize).min(v.len());
    if k == 0 {
        f64::NEG_INFINITY
    } else {
        v[k - 1]
    }
}

/// Cloud footprint of one frame: squares of half-width 2..=8 centred inside
/// the image, added until `coverage` of the pixels is covered.
fn cloud_frame(rng: &mut ChaCha8Rng, coverage: f64) -> Array2<bool> {
    let n = HR_SIZE;
    let mut m = Array2::from_elem((n, n), false);
    let target = (coverage * (n * n) as f64).round() as usize;
    let mut covered = 0usize;
    while covered < target {
        let r = rng.random_range(2..=8usize);
        let ci = rng.random_range(0..n);
        let cj = rng.random_range(0..n);
        let mut block = m.slice_mut(s![ci.saturating_sub(r)..(ci + r + 1).min(n), cj.saturating_sub(r)..(cj + r + 1).min(n)]);
        for v in block.iter_mut() {
            if !*v {
                *v = true;
                covered += 1;
            }
        }
    }
    m
}

/// Generates one cube; see the module docs for the construction.
///
/// The cube id is `<tile>_2019-<MM>-01_<seed>`.
pub fn synth_cube(seed: u64, params: &SynthParams) -> Result<SynthCube, SynthError> {
    let latitude_band = params.check()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (t, n) = (params.frames, HR_SIZE);

    let vegetation = field(&mut rng, n);
    let phase = field(&mut rng, n);
    let water_field = field(&mut rng, n);
    let elevation = field(&mut rng, n);
    let meso_elevation = field(&mut rng, MESO_SIZE);
    let water_cut = quantile(&water_field, params.water_fraction);
    let water = water_field.mapv(|v| params.water_fraction > 0.0 && v <= water_cut);
    let noise = Normal::new(0.0, params.noise_sigma.max(f64::MIN_POSITIVE)).expect("valid sigma");
    let start_doy = 30.4 * f64::from(params.start_month - 1);

    let mut clear = Array4::<f32>::zeros((t, channel::REFLECTANCE, n, n));
    let mut scl = Array3::<f32>::zeros((t, n, n));
    for k in 0..t {
        let season = (TAU * (start_doy + 5.0 * k as f64) / 365.25).sin();
        for i in 0..n {
            for j in 0..n {
                let v = vegetation[[i, j]];
                let (b, g, r, nir, class) = if water[[i, j]] {
                    (0.05, 0.06, 0.03, 0.02, SceneClass::Water)
                } else {
                    let ndvi = (0.2 + 0.5 * v + params.season_amplitude * (season + 0.3 * phase[[i, j]])).clamp(0.0, 0.8);
                    let red = 0.03 + 0.07 * (1.0 - v);
                    let blue = 0.03 + 0.03 * v;
                    let class = if ndvi > 0.3 { SceneClass::Vegetation } else { SceneClass::NotVegetated };
                    (blue, blue + 0.04, red, red * (1.0 + ndvi) / (1.0 - ndvi), class)
                };
                for (c, base) in [b, g, r, nir].into_iter().enumerate() {
                    let jitter = if params.noise_sigma > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                    clear[[k, c, i, j]] = (base + jitter).clamp(0.0, 1.0) as f32;
                }
                scl[[k, i, j]] = class.code();
            }
        }
    }

    let mut hr = Array4::<f32>::zeros((t, channel::COUNT, n, n));
    hr.slice_mut(s![.., ..channel::REFLECTANCE, .., ..]).assign(&clear);
    hr.index_axis_mut(Axis(1), channel::SCL).assign(&scl);
    for k in 0..t {
        let coverage = if params.cloud_rate > 0.0 {
            (params.cloud_rate * 2.0 * rng.random::<f64>()).min(1.0)
        } else {
            0.0
        };
        let clouds = cloud_frame(&mut rng, coverage);
        let mut frame = hr.index_axis_mut(Axis(0), k);
        for ((i, j), &cloudy) in clouds.indexed_iter() {
            if cloudy {
                let glare = 0.1 * rng.random::<f32>();
                frame[[channel::BLUE, i, j]] = 0.5 + glare;
                frame[[channel::GREEN, i, j]] = 0.5 + glare;
                frame[[channel::RED, i, j]] = 0.5 + glare;
                frame[[channel::NIR, i, j]] = 0.55 + glare;
                frame[[channel::CLD, i, j]] = 0.9;
                frame[[channel::SCL, i, j]] = SceneClass::CloudHighProbability.code();
            }
        }
        let mask = if params.rule_consistent {
            build_quality_mask(frame.view()).expect("full frame")
        } else {
            clouds
        };
        frame
            .index_axis_mut(Axis(0), channel::MASK)
            .assign(&mask.mapv(|m| if m { 1.0 } else { 0.0 }));
    }

    let days = MESO_PER_FRAME * t;
    let mut meso = Array4::<f32>::zeros((days, MESO_VARIABLES, MESO_SIZE, MESO_SIZE));
    let offsets: Vec<f64> = (0..MESO_VARIABLES).map(|_| rng.random::<f64>()).collect();
    for d in 0..days {
        let season = (TAU * (start_doy + d as f64) / 365.25).sin();
        let weather: Vec<f64> = (0..MESO_VARIABLES).map(|_| rng.random::<f64>() - 0.5).collect();
        for var in 0..MESO_VARIABLES {
            // precipitation, pressure, mean/min/max temperature
            let (base, amp) = match var {
                0 => (2.0, 4.0),
                1 => (1013.0, 10.0),
                2 => (10.0, 10.0),
                3 => (5.0, 10.0),
                _ => (15.0, 10.0),
            };
            let value = base + amp * (0.5 * season + weather[var] + 0.1 * offsets[var]);
            let value = if var == 0 { value.max(0.0) } else { value };
            meso.slice_mut(s![d, var, .., ..])
                .assign(&meso_elevation.mapv(|e| (value - 2.0 * e * f64::from(var != 1 && var != 0)) as f32));
        }
    }

    let cube_id = format!("{}_2019-{:02}-01_{seed}", params.tile, params.start_month);
    let meta = CubeMeta {
        cube_id,
        tile: params.tile.clone(),
        latitude_band,
        start_month: params.start_month,
    };
    Ok(SynthCube {
        cube: Multicube {
            meta,
            hr_dynamic: hr,
            meso_dynamic: meso,
            hr_static: elevation.mapv(|v| v as f32),
            meso_static: meso_elevation.mapv(|v| v as f32),
        },
        clear_sky: clear,
    })
}

/// Generates many cubes in parallel; output order follows `seeds`.
pub fn synth_cubes(seeds: &[u64], params: &[SynthParams]) -> Result<Vec<SynthCube>, SynthError> {
    seeds
        .par_iter()
        .zip(params.par_iter())
        .map(|(&seed, p)| synth_cube(seed, p))
        .collect()
}

/// Seeds and parameters of `n` cubes for fixture directories.
///
/// Cubes cycle through four tiles (two northern, two southern) and through
/// the start months. `Clean` cubes are cloud-free; `Mixed` cubes get cloud
/// rates in `[0, 0.3)`.
pub fn cube_batch(seed: u64, n: usize, frames: usize, profile: Profile) -> Vec<(u64, SynthParams)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|k| {
            let cube_seed = rng.random::<u64>() >> 16;
            let cloud_rate = match profile {
                Profile::Clean => 0.0,
                Profile::Mixed => rng.random_range(0.0..0.3),
            };
            let params = SynthParams {
                frames,
                cloud_rate,
                tile: tile_name(k % 4),
                start_month: (k % 12) as u8 + 1,
                ..SynthParams::default()
            };
            (cube_seed, params)
        })
        .collect()
}

/// Indicator distribution of a synthetic corpus.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Profile {
    /// Every row passes every hard filter.
    Clean,
    /// 10% of each tile's rows have too much water; a few more rows each
    /// break exactly one other hard filter.
    Mixed,
}

impl std::str::FromStr for Profile {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "clean" => Ok(Self::Clean),
            "mixed" => Ok(Self::Mixed),
            other => Err(format!("unknown profile {other:?} (expected clean or mixed)")),
        }
    }
}

/// A quality-table corpus with its engineered filter violations.
#[derive(Debug, Clone)]
pub struct SynthCorpus {
    pub manifest: Vec<ManifestEntry>,
    pub rows: Vec<QualityTableRow>,
    /// Cube id and the single hard filter it was built to break.
    pub violators: Vec<(String, HardFilter)>,
}

/// Tile id number `i`: alternating north (U, V) and south (T, S) bands.
pub fn tile_name(i: usize) -> String {
    let band = ['U', 'T', 'V', 'S'][i % 4];
    let zone = 29 + (i / 4) % 8;
    let a = (b'A' + ((i / 26) % 26) as u8) as char;
    let b = (b'A' + (i % 26) as u8) as char;
    format!("{zone}{band}{a}{b}")
}

const CORPUS_FRAMES: usize = 30;
const CORPUS_CONTEXT: usize = 10;

fn masked_fractions(kind: Option<HardFilter>, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut f: Vec<f64> = (0..CORPUS_FRAMES)
        .map(|_| if rng.random_bool(0.2) { rng.random_range(0.0..0.6) } else { rng.random_range(0.0..0.05) })
        .collect();
    let mut set = |frames: &[usize], v: f64| {
        for x in f.iter_mut() {
            *x = 0.0;
        }
        for &k in frames {
            f[k] = v;
        }
    };
    match kind {
        // 16 days over 70%, 3 in the context, runs of at most 5
        Some(HardFilter::DaysOver70) => set(&[0, 2, 4, 10, 11, 12, 13, 14, 16, 17, 18, 19, 20, 22, 23, 24], 0.71),
        Some(HardFilter::ContextDaysOver70) => set(&[0, 1, 2, 4, 5, 6], 0.75),
        Some(HardFilter::ConsecutiveOver70) => set(&[12, 13, 14, 15, 16, 17], 0.75),
        Some(HardFilter::TotalMasked) => {
            for x in f.iter_mut() {
                *x = 0.45;
            }
        }
        Some(HardFilter::Water) | None => {}
    }
    f
}

/// A quality-table corpus of `n_tiles x cubes_per_tile` rows.
///
/// Start months cycle through the year within each tile.
pub fn synth_corpus(seed: u64, n_tiles: usize, cubes_per_tile: usize, profile: Profile) -> SynthCorpus {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = CurationConfig::default();
    let mut corpus = SynthCorpus { manifest: Vec::new(), rows: Vec::new(), violators: Vec::new() };
    for t in 0..n_tiles {
        let tile = tile_name(t);
        let band = LatitudeBand::from_tile(&tile).expect("generated tile");
        let mut kinds: Vec<Option<HardFilter>> = vec![None; cubes_per_tile];
        if profile == Profile::Mixed {
            let n_water = (cubes_per_tile as f64 * 0.1).round() as usize;
            let n_other = ((cubes_per_tile as f64 * 0.01).round() as usize).max(1);
            let mut labels = vec![HardFilter::Water; n_water];
            for f in [
                HardFilter::DaysOver70,
                HardFilter::ContextDaysOver70,
                HardFilter::TotalMasked,
                HardFilter::ConsecutiveOver70,
            ] {
                labels.extend(std::iter::repeat_n(f, n_other));
            }
            let mut slots: Vec<usize> = (0..cubes_per_tile).collect();
            slots.shuffle(&mut rng);
            for (slot, label) in slots.into_iter().zip(labels) {
                kinds[slot] = Some(label);
            }
        }
        for (k, kind) in kinds.into_iter().enumerate() {
            let month = (k % 12) as u8 + 1;
            let cube_id = format!("{tile}_2019-{month:02}-01_{k:05}");
            let fracs = masked_fractions(kind, &mut rng);
            let w = if kind == Some(HardFilter::Water) {
                rng.random_range(0.51..0.9)
            } else {
                rng.random_range(0.0..0.3)
            };
            let apct = rng.random_range(0.0..0.005);
            let pct = fracs.iter().sum::<f64>() / fracs.len() as f64;
            let indicators = indicators_from_fractions(&fracs, CORPUS_CONTEXT, w, apct, pct);
            if let Some(f) = kind {
                corpus.violators.push((cube_id.clone(), f));
            }
            corpus.manifest.push(ManifestEntry {
                cube_id: cube_id.clone(),
                path: format!("{cube_id}.npz").into(),
                tile: tile.clone(),
            });
            corpus.rows.push(QualityTableRow {
                cube_id,
                tile: tile.clone(),
                latitude_band: band,
                start_month: month,
                qs: quality_score(&indicators, &cfg),
                indicators,
            });
        }
    }
    corpus
}
