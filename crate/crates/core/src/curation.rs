//! Data quality indicators, the quality score and the dataset split
//! procedures.
//!
//! Rows of the quality table are referred to by their index into the
//! caller's slice; every selection is returned sorted by cube id.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, HashSet};

use ndarray::{s, Axis};
use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::io::QualityTableRow;
use crate::masking::SceneClass;
use crate::model::{channel, LatitudeBand, ModelError, Multicube, TrackSpec};

/// Per-cube data quality statistics.
///
/// `cd_x` counts context frames whose masked fraction exceeds x%, `d_x` all
/// frames, `mcd_x` the longest run of consecutive such frames. `w` is the
/// largest per-frame water fraction, `apct` the fraction of pixels masked in
/// every context frame and `pct` the masked fraction over all frames.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct QualityIndicators {
    pub cd_10: u32,
    pub cd_50: u32,
    pub cd_70: u32,
    pub cd_90: u32,
    pub mcd_10: u32,
    pub mcd_50: u32,
    pub mcd_70: u32,
    pub mcd_90: u32,
    pub d_10: u32,
    pub d_50: u32,
    pub d_70: u32,
    pub d_90: u32,
    pub w: f64,
    pub apct: f64,
    pub pct: f64,
}

impl QualityIndicators {
    /// Sum of the nine 10/50/90 day counts entering the quality score.
    pub fn day_count_sum(&self) -> u32 {
        self.cd_10 + self.cd_50 + self.cd_90 + self.mcd_10 + self.mcd_50 + self.mcd_90 + self.d_10 + self.d_50 + self.d_90
    }

    /// Checks the structural invariants.
    pub fn check(&self) -> Result<(), String> {
        let families = [
            (10, self.cd_10, self.mcd_10, self.d_10),
            (50, self.cd_50, self.mcd_50, self.d_50),
            (70, self.cd_70, self.mcd_70, self.d_70),
            (90, self.cd_90, self.mcd_90, self.d_90),
        ];
        for (x, cd, mcd, d) in families {
            if cd > d {
                return Err(format!("cd_{x} = {cd} exceeds d_{x} = {d}"));
            }
            if mcd > d {
                return Err(format!("mcd_{x} = {mcd} exceeds d_{x} = {d}"));
            }
        }
        for (name, v) in [("w", self.w), ("apct", self.apct), ("pct", self.pct)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(format!("{name} = {v} outside [0, 1]"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CurationError {
    #[error("corpus cannot supply {needed} {what} cubes, only {available} available")]
    InsufficientCorpus {
        what: &'static str,
        needed: usize,
        available: usize,
    },
    #[error("no acceptable OOD tile set found after {draws} draws")]
    SamplingExhausted { draws: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Thresholds and sizes of the curation procedure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurationConfig {
    pub eps: f64,
    /// Use `max(1 - eps, .)` inside the logarithms of the quality score.
    pub literal_guard: bool,
    /// Divisor of the day-count sum in the quality score.
    pub day_norm: f64,
    pub max_per_tile: usize,
    pub min_total: usize,
    pub max_days_over_70: u32,
    pub max_context_days_over_70: u32,
    pub max_water: f64,
    /// Rows with at least this total masked fraction are dropped.
    pub max_pct: f64,
    pub max_consecutive_over_70: u32,
    pub x_start: f64,
    pub x_step: f64,
    pub north_min_total: usize,
    pub ood_tile_count: usize,
    pub ood_bounds: (usize, usize),
    pub ood_north_min: usize,
    pub max_draws: usize,
    /// Share of the non-OOD corpus that goes to the IID test set.
    pub iid_fraction: f64,
    pub special_per_tile: usize,
    pub special_total: usize,
    pub special_max_water: f64,
    pub special_max_apct: f64,
}

impl Default for CurationConfig {
    fn default() -> Self {
        Self {
            eps: 1e-8,
            literal_guard: false,
            day_norm: 30.0,
            max_per_tile: 1500,
            min_total: 32000,
            max_days_over_70: 15,
            max_context_days_over_70: 5,
            max_water: 0.5,
            max_pct: 0.4,
            max_consecutive_over_70: 5,
            x_start: 0.5,
            x_step: 0.05,
            north_min_total: 10000,
            ood_tile_count: 16,
            ood_bounds: (4000, 4500),
            ood_north_min: 1500,
            max_draws: 10000,
            iid_fraction: 4219.0 / (23904.0 + 4219.0),
            special_per_tile: 300,
            special_total: 4000,
            special_max_water: 0.5,
            special_max_apct: 0.01,
        }
    }
}

impl CurationConfig {
    /// Shrinks every corpus-size target by `s` for corpora smaller than the
    /// original. Lower bounds round up, upper bounds round down.
    pub fn scaled(&self, s: f64) -> Self {
        let up = |v: usize| (v as f64 * s - 1e-9).ceil().max(0.0) as usize;
        let down = |v: usize| (v as f64 * s + 1e-9).floor() as usize;
        Self {
            min_total: up(self.min_total),
            north_min_total: up(self.north_min_total),
            ood_tile_count: ((self.ood_tile_count as f64 * s).round() as usize).max(1),
            ood_bounds: (up(self.ood_bounds.0), down(self.ood_bounds.1)),
            ood_north_min: up(self.ood_north_min),
            special_total: up(self.special_total),
            ..self.clone()
        }
    }

    fn guard(&self, v: f64) -> f64 {
        if self.literal_guard {
            v.max(1.0 - self.eps)
        } else {
            v.max(self.eps)
        }
    }
}

/// Masked-day statistics of one cube over the frames of a track window.
pub fn compute_indicators(cube: &Multicube, track: &TrackSpec) -> Result<QualityIndicators, CurationError> {
    let needed = track.total_frames();
    if cube.frames() < needed {
        return Err(ModelError::InsufficientFrames { track: track.track, needed, available: cube.frames() }.into());
    }
    let window = cube.hr_dynamic.slice(s![..needed, .., .., ..]);
    let mask = window.index_axis(Axis(1), channel::MASK).mapv(|v| v >= 0.5);
    let scl = window.index_axis(Axis(1), channel::SCL);
    let pixels = (mask.len_of(Axis(1)) * mask.len_of(Axis(2))) as f64;

    let masked_frac: Vec<f64> = mask
        .outer_iter()
        .map(|f| f.iter().filter(|&&m| m).count() as f64 / pixels)
        .collect();
    let water = SceneClass::Water.code();
    let w = scl
        .outer_iter()
        .map(|f| f.iter().filter(|&&c| c == water).count() as f64 / pixels)
        .fold(0.0, f64::max);
    let context = mask.slice(s![..track.context_frames, .., ..]);
    let always = context
        .lanes(Axis(0))
        .into_iter()
        .filter(|lane| lane.iter().all(|&m| m))
        .count();
    let apct = if track.context_frames == 0 { 0.0 } else { always as f64 / pixels };
    let pct = mask.iter().filter(|&&m| m).count() as f64 / mask.len() as f64;

    Ok(indicators_from_fractions(&masked_frac, track.context_frames, w, apct, pct))
}

/// Indicators from per-frame masked fractions; the first `context` frames
/// form the context.
pub fn indicators_from_fractions(masked_frac: &[f64], context: usize, w: f64, apct: f64, pct: f64) -> QualityIndicators {
    let family = |x: f64| {
        let over: Vec<bool> = masked_frac.iter().map(|&f| f > x).collect();
        let d = over.iter().filter(|&&o| o).count() as u32;
        let cd = over[..context.min(over.len())].iter().filter(|&&o| o).count() as u32;
        let mut run = 0u32;
        let mut mcd = 0u32;
        for &o in &over {
            run = if o { run + 1 } else { 0 };
            mcd = mcd.max(run);
        }
        (cd, mcd, d)
    };
    let (cd_10, mcd_10, d_10) = family(0.10);
    let (cd_50, mcd_50, d_50) = family(0.50);
    let (cd_70, mcd_70, d_70) = family(0.70);
    let (cd_90, mcd_90, d_90) = family(0.90);
    QualityIndicators {
        cd_10,
        cd_50,
        cd_70,
        cd_90,
        mcd_10,
        mcd_50,
        mcd_70,
        mcd_90,
        d_10,
        d_50,
        d_70,
        d_90,
        w,
        apct,
        pct,
    }
}

/// Quality score, lower is better.
pub fn quality_score(q: &QualityIndicators, cfg: &CurationConfig) -> f64 {
    f64::from(q.day_count_sum()) / cfg.day_norm - cfg.guard(1.0 - q.w).ln() - cfg.guard(1.0 - q.apct.powf(0.25)).ln()
        + 2.0 * q.pct * q.pct
}

/// Quality table row of a cube.
pub fn quality_row(cube: &Multicube, track: &TrackSpec, cfg: &CurationConfig) -> Result<QualityTableRow, CurationError> {
    let indicators = compute_indicators(cube, track)?;
    Ok(QualityTableRow {
        cube_id: cube.meta.cube_id.clone(),
        tile: cube.meta.tile.clone(),
        latitude_band: cube.meta.latitude_band,
        start_month: cube.meta.start_month,
        qs: quality_score(&indicators, cfg),
        indicators,
    })
}

/// The exclusion rules applied before ranking.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HardFilter {
    DaysOver70,
    ContextDaysOver70,
    Water,
    TotalMasked,
    ConsecutiveOver70,
}

impl HardFilter {
    pub const ALL: [HardFilter; 5] = [
        HardFilter::DaysOver70,
        HardFilter::ContextDaysOver70,
        HardFilter::Water,
        HardFilter::TotalMasked,
        HardFilter::ConsecutiveOver70,
    ];

    pub fn violated(self, q: &QualityIndicators, cfg: &CurationConfig) -> bool {
        match self {
            Self::DaysOver70 => q.d_70 > cfg.max_days_over_70,
            Self::ContextDaysOver70 => q.cd_70 > cfg.max_context_days_over_70,
            Self::Water => q.w > cfg.max_water,
            Self::TotalMasked => q.pct >= cfg.max_pct,
            Self::ConsecutiveOver70 => q.mcd_70 > cfg.max_consecutive_over_70,
        }
    }
}

/// Every hard filter a row violates.
pub fn violations(q: &QualityIndicators, cfg: &CurationConfig) -> Vec<HardFilter> {
    HardFilter::ALL.into_iter().filter(|f| f.violated(q, cfg)).collect()
}

pub fn passes_filters(q: &QualityIndicators, cfg: &CurationConfig) -> bool {
    HardFilter::ALL.iter().all(|f| !f.violated(q, cfg))
}

fn by_qs(rows: &[QualityTableRow]) -> impl Fn(&usize, &usize) -> Ordering + '_ {
    move |&a, &b| {
        rows[a]
            .qs
            .total_cmp(&rows[b].qs)
            .then_with(|| rows[a].cube_id.cmp(&rows[b].cube_id))
    }
}

fn by_pct(rows: &[QualityTableRow]) -> impl Fn(&usize, &usize) -> Ordering + '_ {
    move |&a, &b| {
        rows[a]
            .indicators
            .pct
            .total_cmp(&rows[b].indicators.pct)
            .then_with(|| rows[a].cube_id.cmp(&rows[b].cube_id))
    }
}

fn sort_by_id(rows: &[QualityTableRow], sel: &mut [usize]) {
    sel.sort_by(|&a, &b| rows[a].cube_id.cmp(&rows[b].cube_id));
}

/// Number of rows taken from a tile of `l` rows at quality restriction `x`.
pub fn tile_quota(x: f64, l: usize, cap: usize) -> usize {
    ((x * l as f64 - 1e-9).ceil().max(0.0) as usize).min(cap)
}

/// Per tile: drops hard-filter violators and keeps the best `ceil(x * l)`
/// rows by ascending QS, at most `max_per_tile`. `l` counts the tile's rows
/// before filtering. Each tile's list is in QS order.
pub fn filter_and_rank(rows: &[QualityTableRow], x: f64, cfg: &CurationConfig) -> BTreeMap<String, Vec<usize>> {
    let mut tiles: BTreeMap<String, (usize, Vec<usize>)> = BTreeMap::new();
    for (i, r) in rows.iter().enumerate() {
        let entry = tiles.entry(r.tile.clone()).or_default();
        entry.0 += 1;
        if passes_filters(&r.indicators, cfg) {
            entry.1.push(i);
        }
    }
    tiles
        .into_iter()
        .map(|(tile, (l, mut kept))| {
            kept.sort_by(by_qs(rows));
            kept.truncate(tile_quota(x, l, cfg.max_per_tile));
            (tile, kept)
        })
        .collect()
}

/// Tops up under-represented start months and the northern half.
///
/// Months holding fewer than half the cubes of the fullest month are filled
/// with the best remaining filter-passing rows of that month; then the
/// northern half is filled until it holds `north_min_total` cubes. Top-ups
/// respect the per-tile cap.
pub fn rebalance(
    selection: &BTreeMap<String, Vec<usize>>,
    rows: &[QualityTableRow],
    cfg: &CurationConfig,
) -> Result<Vec<usize>, CurationError> {
    let mut chosen: BTreeSet<usize> = selection.values().flatten().copied().collect();
    let mut per_tile: BTreeMap<&str, usize> = BTreeMap::new();
    for &i in &chosen {
        *per_tile.entry(rows[i].tile.as_str()).or_default() += 1;
    }
    let mut candidates: Vec<usize> = (0..rows.len())
        .filter(|i| !chosen.contains(i) && passes_filters(&rows[*i].indicators, cfg))
        .collect();
    candidates.sort_by(by_qs(rows));

    let mut month_counts = [0usize; 13];
    for &i in &chosen {
        month_counts[rows[i].start_month as usize] += 1;
    }
    let max_month = month_counts.iter().copied().max().unwrap_or(0);
    for month in 1..=12u8 {
        let m = month as usize;
        for &i in &candidates {
            if 2 * month_counts[m] >= max_month {
                break;
            }
            let r = &rows[i];
            if r.start_month != month || chosen.contains(&i) || per_tile.get(r.tile.as_str()).copied().unwrap_or(0) >= cfg.max_per_tile {
                continue;
            }
            chosen.insert(i);
            *per_tile.entry(r.tile.as_str()).or_default() += 1;
            month_counts[m] += 1;
        }
    }

    let mut north = chosen.iter().filter(|&&i| rows[i].latitude_band == LatitudeBand::North).count();
    for &i in &candidates {
        if north >= cfg.north_min_total {
            break;
        }
        let r = &rows[i];
        if r.latitude_band != LatitudeBand::North
            || chosen.contains(&i)
            || per_tile.get(r.tile.as_str()).copied().unwrap_or(0) >= cfg.max_per_tile
        {
            continue;
        }
        chosen.insert(i);
        *per_tile.entry(r.tile.as_str()).or_default() += 1;
        north += 1;
    }
    if north < cfg.north_min_total {
        return Err(CurationError::InsufficientCorpus {
            what: "northern",
            needed: cfg.north_min_total,
            available: north,
        });
    }
    let mut out: Vec<usize> = chosen.into_iter().collect();
    sort_by_id(rows, &mut out);
    Ok(out)
}

/// The curated corpus and the quality restriction that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct Curated {
    pub rows: Vec<usize>,
    pub x_final: f64,
}

/// Loosens `x` from `x_start` in steps of `x_step` until the rebalanced
/// selection holds at least `min_total` cubes.
pub fn curate(rows: &[QualityTableRow], cfg: &CurationConfig) -> Result<Curated, CurationError> {
    let mut step = 0u32;
    loop {
        let x = (cfg.x_start + f64::from(step) * cfg.x_step).min(1.0);
        let selection = rebalance(&filter_and_rank(rows, x, cfg), rows, cfg)?;
        if selection.len() >= cfg.min_total {
            return Ok(Curated { rows: selection, x_final: x });
        }
        if x >= 1.0 || cfg.x_step <= 0.0 {
            return Err(CurationError::InsufficientCorpus {
                what: "total",
                needed: cfg.min_total,
                available: selection.len(),
            });
        }
        step += 1;
    }
}

/// Train, IID and OOD membership by row index, each sorted by cube id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Partition {
    pub train: Vec<usize>,
    pub iid: Vec<usize>,
    pub ood: Vec<usize>,
    pub ood_tiles: Vec<String>,
    /// Tile sets drawn until one was accepted.
    pub draws: usize,
}

/// Draws OOD tile sets until one holds an acceptable number of cubes, then
/// splits the rest of `corpus` into train and IID test at `iid_fraction`.
pub fn sample_ood_split(
    rows: &[QualityTableRow],
    corpus: &[usize],
    seed: u64,
    cfg: &CurationConfig,
) -> Result<Partition, CurationError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut by_tile: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for &i in corpus {
        by_tile.entry(rows[i].tile.as_str()).or_default().push(i);
    }
    let tiles: Vec<&str> = by_tile.keys().copied().collect();
    if tiles.len() < cfg.ood_tile_count {
        return Err(CurationError::SamplingExhausted { draws: 0 });
    }
    let (lo, hi) = cfg.ood_bounds;
    for draw in 1..=cfg.max_draws {
        let mut picked: Vec<&str> = index::sample(&mut rng, tiles.len(), cfg.ood_tile_count)
            .into_iter()
            .map(|k| tiles[k])
            .collect();
        picked.sort_unstable();
        let members: Vec<usize> = picked.iter().flat_map(|t| by_tile[t].iter().copied()).collect();
        let north = members.iter().filter(|&&i| rows[i].latitude_band == LatitudeBand::North).count();
        if members.len() < lo || members.len() > hi || north < cfg.ood_north_min {
            continue;
        }
        let ood_tiles: HashSet<&str> = picked.iter().copied().collect();
        let mut rest: Vec<usize> = corpus
            .iter()
            .copied()
            .filter(|&i| !ood_tiles.contains(rows[i].tile.as_str()))
            .collect();
        sort_by_id(rows, &mut rest);
        rest.shuffle(&mut rng);
        let n_iid = (cfg.iid_fraction * rest.len() as f64).round() as usize;
        let mut iid = rest[..n_iid].to_vec();
        let mut train = rest[n_iid..].to_vec();
        let mut ood = members;
        sort_by_id(rows, &mut iid);
        sort_by_id(rows, &mut train);
        sort_by_id(rows, &mut ood);
        return Ok(Partition {
            train,
            iid,
            ood,
            ood_tiles: picked.into_iter().map(str::to_string).collect(),
            draws: draw,
        });
    }
    Err(CurationError::SamplingExhausted { draws: cfg.max_draws })
}

/// Selection rule of the extreme and seasonal test sets.
///
/// Drops rows with too much water or too many always-masked context pixels,
/// keeps the `special_per_tile` least-masked rows per tile and then the
/// `special_total` least-masked rows overall. Returns fewer rows when fewer
/// survive.
pub fn select_special_set(rows: &[QualityTableRow], cfg: &CurationConfig) -> Vec<usize> {
    let mut tiles: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, r) in rows.iter().enumerate() {
        if r.indicators.w > cfg.special_max_water || r.indicators.apct > cfg.special_max_apct {
            continue;
        }
        tiles.entry(r.tile.as_str()).or_default().push(i);
    }
    let mut pool: Vec<usize> = Vec::new();
    for (_, mut members) in tiles {
        members.sort_by(by_pct(rows));
        members.truncate(cfg.special_per_tile);
        pool.extend(members);
    }
    pool.sort_by(by_pct(rows));
    pool.truncate(cfg.special_total);
    sort_by_id(rows, &mut pool);
    pool
}

/// Contents of `split.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitFile {
    pub train: Vec<String>,
    pub iid: Vec<String>,
    pub ood: Vec<String>,
    pub seed: u64,
    pub x_final: f64,
}

/// Curation followed by OOD sampling.
pub fn split_dataset(rows: &[QualityTableRow], seed: u64, cfg: &CurationConfig) -> Result<SplitFile, CurationError> {
    let curated = curate(rows, cfg)?;
    let part = sample_ood_split(rows, &curated.rows, seed, cfg)?;
    let ids = |sel: &[usize]| sel.iter().map(|&i| rows[i].cube_id.clone()).collect::<Vec<_>>();
    Ok(SplitFile {
        train: ids(&part.train),
        iid: ids(&part.iid),
        ood: ids(&part.ood),
        seed,
        x_final: curated.x_final,
    })
}
