//! Multicube containers, prediction directories, manifests and the data
//! quality table.
//!
//! A multicube file is a ZIP archive of NPY arrays (`.npz`) holding
//! `highresdynamic` `[h, w, 7, t]`, `mesodynamic` `[h, w, 5, 5t]`,
//! `highresstatic` `[h, w]` and `mesostatic` `[h, w]`, all little-endian
//! float32. In memory the dynamic arrays are `[t, c, h, w]`. The cube id is
//! the file stem, `<TILE>_<YYYY-MM-DD>_<rest>`.
//!
//! Prediction files hold a single `highresdynamic` array `[h, w, 4, t]`
//! and live at `<dir>/<cube_id>/<trajectory>.npz`.

use std::collections::{BTreeMap, HashSet};
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array4, ArrayD, Ix2, Ix4};
use ndarray_npy::{NpzReader, NpzWriter, ReadNpyError, ReadNpzError};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::curation::QualityIndicators;
use crate::model::{
    channel, validate_cube, CubeMeta, LatitudeBand, ModelError, Multicube, Prediction, HR_SIZE, MESO_PER_FRAME,
    MESO_SIZE, MESO_VARIABLES,
};

pub const HIGHRES_DYNAMIC: &str = "highresdynamic";
pub const MESO_DYNAMIC: &str = "mesodynamic";
pub const HIGHRES_STATIC: &str = "highresstatic";
pub const MESO_STATIC: &str = "mesostatic";

/// Extension of cube and prediction containers.
pub const CONTAINER_EXT: &str = "npz";

#[derive(Debug, Error)]
pub enum CubeIoError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: malformed container: {message}")]
    Format { path: PathBuf, message: String },
    #[error("{path}: array {array} has shape {found:?}, expected {expected}")]
    Shape {
        path: PathBuf,
        array: &'static str,
        expected: String,
        found: Vec<usize>,
    },
    #[error("{path}: missing array {array}")]
    MissingArray { path: PathBuf, array: &'static str },
    #[error("{path}: invalid cube: {}", violations.join("; "))]
    InvalidCube { path: PathBuf, violations: Vec<String> },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("prediction directory {cube_id} has no matching cube")]
    OrphanPrediction { cube_id: String },
    #[error("{path}:{line}: {message}")]
    Manifest { path: PathBuf, line: usize, message: String },
    #[error("duplicate cube id {0} in manifest")]
    DuplicateCube(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CubeIoError + '_ {
    move |source| CubeIoError::Io { path: path.to_path_buf(), source }
}

fn format_err(path: &Path, message: impl ToString) -> CubeIoError {
    CubeIoError::Format { path: path.to_path_buf(), message: message.to_string() }
}

/// Stored `[h, w, c, t]` to internal `[t, c, h, w]`.
pub fn stored_to_internal(a: Array4<f32>) -> Array4<f32> {
    a.permuted_axes([3, 2, 0, 1]).as_standard_layout().into_owned()
}

/// Internal `[t, c, h, w]` to stored `[h, w, c, t]`.
pub fn internal_to_stored(a: &Array4<f32>) -> Array4<f32> {
    a.view().permuted_axes([2, 3, 1, 0]).as_standard_layout().into_owned()
}

fn read_array(npz: &mut NpzReader<File>, path: &Path, name: &'static str) -> Result<ArrayD<f32>, CubeIoError> {
    let names = npz.names().map_err(|e| format_err(path, e))?;
    if !names.iter().any(|n| n == name) {
        return Err(CubeIoError::MissingArray { path: path.to_path_buf(), array: name });
    }
    match npz.by_name::<_, ndarray::IxDyn>(name) {
        Ok(a) => Ok(a),
        Err(ReadNpzError::Npy(ReadNpyError::WrongDescriptor(_))) => {
            let a: ArrayD<f64> = npz.by_name(name).map_err(|e| format_err(path, e))?;
            Ok(a.mapv(|v| v as f32))
        }
        Err(e) => Err(format_err(path, e)),
    }
}

fn open_npz(path: &Path) -> Result<NpzReader<File>, CubeIoError> {
    let file = File::open(path).map_err(io_err(path))?;
    NpzReader::new(file).map_err(|e| format_err(path, e))
}

fn expect_dims<D: ndarray::Dimension>(
    a: ArrayD<f32>,
    path: &Path,
    array: &'static str,
    expected: &str,
    check: impl Fn(&[usize]) -> bool,
) -> Result<ndarray::Array<f32, D>, CubeIoError> {
    let shape = a.shape().to_vec();
    let shape_err = || CubeIoError::Shape {
        path: path.to_path_buf(),
        array,
        expected: expected.to_string(),
        found: shape.clone(),
    };
    if !check(&shape) {
        return Err(shape_err());
    }
    a.into_dimensionality::<D>().map_err(|_| shape_err())
}

/// Cube id of a container path: its file stem.
pub fn cube_id_of(path: &Path) -> Option<String> {
    path.file_stem().and_then(|s| s.to_str()).map(str::to_string)
}

/// Reads a multicube container. Mask values are binarized at 0.5.
pub fn read_cube(path: &Path) -> Result<Multicube, CubeIoError> {
    let stem = cube_id_of(path).ok_or_else(|| format_err(path, "no file stem"))?;
    let meta = CubeMeta::parse(&stem)?;
    let mut npz = open_npz(path)?;

    let hr = read_array(&mut npz, path, HIGHRES_DYNAMIC)?;
    let hr: Array4<f32> = expect_dims(hr, path, HIGHRES_DYNAMIC, "[128, 128, 7, t]", |s| {
        s.len() == 4 && s[0] == HR_SIZE && s[1] == HR_SIZE && s[2] == channel::COUNT && s[3] > 0
    })?;
    let t = hr.shape()[3];
    let meso = read_array(&mut npz, path, MESO_DYNAMIC)?;
    let meso: Array4<f32> = expect_dims(meso, path, MESO_DYNAMIC, "[80, 80, 5, 5t]", |s| {
        s.len() == 4 && s[0] == MESO_SIZE && s[1] == MESO_SIZE && s[2] == MESO_VARIABLES && s[3] == MESO_PER_FRAME * t
    })?;
    let hr_static = read_array(&mut npz, path, HIGHRES_STATIC)?;
    let hr_static: Array2<f32> = expect_dims::<Ix2>(hr_static, path, HIGHRES_STATIC, "[128, 128]", |s| {
        s == [HR_SIZE, HR_SIZE]
    })?;
    let meso_static = read_array(&mut npz, path, MESO_STATIC)?;
    let meso_static: Array2<f32> = expect_dims::<Ix2>(meso_static, path, MESO_STATIC, "[80, 80]", |s| {
        s == [MESO_SIZE, MESO_SIZE]
    })?;

    let mut hr_dynamic = stored_to_internal(hr);
    hr_dynamic
        .index_axis_mut(ndarray::Axis(1), channel::MASK)
        .mapv_inplace(|v| if v >= 0.5 { 1.0 } else { 0.0 });
    Ok(Multicube {
        meta,
        hr_dynamic,
        meso_dynamic: stored_to_internal(meso),
        hr_static,
        meso_static,
    })
}

/// Writes a multicube container; rejects cubes that fail validation.
pub fn write_cube(cube: &Multicube, path: &Path) -> Result<(), CubeIoError> {
    if cube.frames() == 0 {
        return Err(CubeIoError::Shape {
            path: path.to_path_buf(),
            array: HIGHRES_DYNAMIC,
            expected: "[128, 128, 7, t] with t >= 1".into(),
            found: cube.hr_dynamic.shape().to_vec(),
        });
    }
    let violations = validate_cube(cube);
    if !violations.is_empty() {
        return Err(CubeIoError::InvalidCube {
            path: path.to_path_buf(),
            violations: violations.iter().map(ToString::to_string).collect(),
        });
    }
    let file = File::create(path).map_err(io_err(path))?;
    let mut npz = NpzWriter::new_compressed(BufWriter::new(file));
    let put_err = |e: ndarray_npy::WriteNpzError| format_err(path, e);
    npz.add_array(HIGHRES_DYNAMIC, &internal_to_stored(&cube.hr_dynamic)).map_err(put_err)?;
    npz.add_array(MESO_DYNAMIC, &internal_to_stored(&cube.meso_dynamic)).map_err(put_err)?;
    npz.add_array(HIGHRES_STATIC, &cube.hr_static).map_err(put_err)?;
    npz.add_array(MESO_STATIC, &cube.meso_static).map_err(put_err)?;
    npz.finish().map_err(put_err)?;
    Ok(())
}

/// Reads one trajectory, returned as `[t, 4, h, w]`.
pub fn read_trajectory(path: &Path) -> Result<Array4<f32>, CubeIoError> {
    let mut npz = open_npz(path)?;
    let a = read_array(&mut npz, path, HIGHRES_DYNAMIC)?;
    let a: Array4<f32> = expect_dims::<Ix4>(a, path, HIGHRES_DYNAMIC, "[h, w, 4, t]", |s| {
        s.len() == 4 && s[2] == channel::REFLECTANCE
    })?;
    Ok(stored_to_internal(a))
}

/// Writes one `[t, 4, h, w]` trajectory.
pub fn write_trajectory(traj: &Array4<f32>, path: &Path) -> Result<(), CubeIoError> {
    if traj.shape()[1] != channel::REFLECTANCE {
        return Err(CubeIoError::Shape {
            path: path.to_path_buf(),
            array: HIGHRES_DYNAMIC,
            expected: "[t, 4, h, w]".into(),
            found: traj.shape().to_vec(),
        });
    }
    let file = File::create(path).map_err(io_err(path))?;
    let mut npz = NpzWriter::new_compressed(BufWriter::new(file));
    let put_err = |e: ndarray_npy::WriteNpzError| format_err(path, e);
    npz.add_array(HIGHRES_DYNAMIC, &internal_to_stored(traj)).map_err(put_err)?;
    npz.finish().map_err(put_err)?;
    Ok(())
}

/// Writes every trajectory of a prediction as `<dir>/<cube_id>/traj_NNN.npz`.
pub fn write_prediction(prediction: &Prediction, dir: &Path) -> Result<Vec<PathBuf>, CubeIoError> {
    let cube_dir = dir.join(prediction.cube_id());
    fs::create_dir_all(&cube_dir).map_err(io_err(&cube_dir))?;
    prediction
        .trajectories()
        .iter()
        .enumerate()
        .map(|(k, traj)| {
            let path = cube_dir.join(format!("traj_{k:03}.{CONTAINER_EXT}"));
            write_trajectory(traj, &path).map(|_| path)
        })
        .collect()
}

/// Dataset partitions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    IidTest,
    OodTest,
    ExtremeTest,
    SeasonalTest,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub cube_id: String,
    /// Relative to the manifest root.
    pub path: PathBuf,
    pub tile: String,
}

/// The cubes of one dataset split.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub split: Split,
    /// Sorted by cube id.
    pub entries: Vec<ManifestEntry>,
}

#[derive(Serialize, Deserialize)]
struct ManifestRecord {
    cube_id: String,
    path: PathBuf,
    tile: String,
    split: Split,
}

impl DatasetManifest {
    pub fn new(root: impl Into<PathBuf>, split: Split, mut entries: Vec<ManifestEntry>) -> Result<Self, CubeIoError> {
        entries.sort_by(|a, b| a.cube_id.cmp(&b.cube_id));
        let mut seen = HashSet::new();
        for e in &entries {
            if !seen.insert(e.cube_id.as_str()) {
                return Err(CubeIoError::DuplicateCube(e.cube_id.clone()));
            }
        }
        Ok(Self { root: root.into(), split, entries })
    }

    /// Lists every `*.npz` file directly inside `root`.
    pub fn scan(root: &Path, split: Split) -> Result<Self, CubeIoError> {
        let mut entries = Vec::new();
        for item in fs::read_dir(root).map_err(io_err(root))? {
            let path = item.map_err(io_err(root))?.path();
            if path.extension().and_then(|e| e.to_str()) != Some(CONTAINER_EXT) || !path.is_file() {
                continue;
            }
            let cube_id = cube_id_of(&path).ok_or_else(|| format_err(&path, "no file stem"))?;
            let tile = CubeMeta::parse(&cube_id)
                .map(|m| m.tile)
                .unwrap_or_else(|_| cube_id.split('_').next().unwrap_or_default().to_string());
            entries.push(ManifestEntry {
                path: PathBuf::from(path.file_name().unwrap()),
                cube_id,
                tile,
            });
        }
        Self::new(root, split, entries)
    }

    /// Loads newline-delimited JSON records; paths resolve against the
    /// manifest's directory and must exist.
    pub fn load(path: &Path) -> Result<Self, CubeIoError> {
        let root = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        let reader = BufReader::new(File::open(path).map_err(io_err(path))?);
        let mut entries = Vec::new();
        let mut split = None;
        for (idx, line) in reader.lines().enumerate() {
            let line = line.map_err(io_err(path))?;
            if line.trim().is_empty() {
                continue;
            }
            let bad = |message: String| CubeIoError::Manifest { path: path.to_path_buf(), line: idx + 1, message };
            let rec: ManifestRecord = serde_json::from_str(&line).map_err(|e| bad(e.to_string()))?;
            match split {
                None => split = Some(rec.split),
                Some(s) if s != rec.split => return Err(bad(format!("mixed splits {s:?} and {:?}", rec.split))),
                _ => {}
            }
            if !root.join(&rec.path).exists() {
                return Err(bad(format!("{} does not exist", rec.path.display())));
            }
            entries.push(ManifestEntry { cube_id: rec.cube_id, path: rec.path, tile: rec.tile });
        }
        Self::new(root, split.unwrap_or(Split::Train), entries)
    }

    pub fn save(&self, path: &Path) -> Result<(), CubeIoError> {
        let mut out = BufWriter::new(File::create(path).map_err(io_err(path))?);
        for e in &self.entries {
            let rec = ManifestRecord {
                cube_id: e.cube_id.clone(),
                path: e.path.clone(),
                tile: e.tile.clone(),
                split: self.split,
            };
            let line = serde_json::to_string(&rec).expect("manifest record serializes");
            writeln!(out, "{line}").map_err(io_err(path))?;
        }
        out.flush().map_err(io_err(path))
    }

    pub fn cube_path(&self, entry: &ManifestEntry) -> PathBuf {
        self.root.join(&entry.path)
    }

    pub fn get(&self, cube_id: &str) -> Option<&ManifestEntry> {
        self.entries
            .binary_search_by(|e| e.cube_id.as_str().cmp(cube_id))
            .ok()
            .map(|i| &self.entries[i])
    }
}

/// Trajectory files per cube found under a prediction directory.
#[derive(Debug, Clone, Default)]
pub struct PredictionIndex {
    /// Filename-sorted trajectory paths per cube id.
    pub by_cube: BTreeMap<String, Vec<PathBuf>>,
    /// Sub-directories whose name matches no manifest cube.
    pub orphans: Vec<String>,
}

impl PredictionIndex {
    pub fn scan(dir: &Path, manifest: &DatasetManifest) -> Result<Self, CubeIoError> {
        let mut index = Self::default();
        let mut subdirs: Vec<PathBuf> = fs::read_dir(dir)
            .map_err(io_err(dir))?
            .map(|e| e.map(|e| e.path()).map_err(io_err(dir)))
            .collect::<Result<_, _>>()?;
        subdirs.retain(|p| p.is_dir());
        subdirs.sort();
        for sub in subdirs {
            let Some(cube_id) = sub.file_name().and_then(|n| n.to_str()).map(str::to_string) else {
                continue;
            };
            let mut files: Vec<PathBuf> = fs::read_dir(&sub)
                .map_err(io_err(&sub))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.is_file() && p.extension().and_then(|e| e.to_str()) == Some(CONTAINER_EXT))
                .collect();
            if files.is_empty() {
                continue;
            }
            files.sort();
            if manifest.get(&cube_id).is_some() {
                index.by_cube.insert(cube_id, files);
            } else {
                index.orphans.push(cube_id);
            }
        }
        Ok(index)
    }

    pub fn load(&self, cube_id: &str) -> Option<Result<Prediction, CubeIoError>> {
        let files = self.by_cube.get(cube_id)?;
        Some(
            files
                .iter()
                .map(|p| read_trajectory(p))
                .collect::<Result<Vec<_>, _>>()
                .and_then(|trajs| Prediction::new(cube_id, trajs).map_err(CubeIoError::from)),
        )
    }
}

/// Streams the predictions of a directory in cube-id order.
///
/// Sub-directories that match no manifest cube yield
/// [`CubeIoError::OrphanPrediction`]. Files are read lazily.
pub fn read_predictions(
    dir: &Path,
    manifest: &DatasetManifest,
) -> Result<impl Iterator<Item = Result<Prediction, CubeIoError>>, CubeIoError> {
    let index = PredictionIndex::scan(dir, manifest)?;
    let mut ids: Vec<(String, bool)> = index.by_cube.keys().map(|k| (k.clone(), false)).collect();
    ids.extend(index.orphans.iter().map(|k| (k.clone(), true)));
    ids.sort();
    Ok(ids.into_iter().map(move |(cube_id, orphan)| {
        if orphan {
            Err(CubeIoError::OrphanPrediction { cube_id })
        } else {
            index.load(&cube_id).expect("indexed cube")
        }
    }))
}

/// One row of the data quality table.
#[derive(Debug, Clone, PartialEq)]
pub struct QualityTableRow {
    pub cube_id: String,
    pub tile: String,
    pub latitude_band: LatitudeBand,
    pub start_month: u8,
    pub indicators: QualityIndicators,
    pub qs: f64,
}

/// Column order of the quality table CSV.
pub const QUALITY_TABLE_HEADER: [&str; 20] = [
    "cube_id",
    "tile",
    "latitude_band",
    "start_month",
    "cd_10",
    "cd_50",
    "cd_70",
    "cd_90",
    "mcd_10",
    "mcd_50",
    "mcd_70",
    "mcd_90",
    "d_10",
    "d_50",
    "d_70",
    "d_90",
    "w",
    "apct",
    "pct",
    "qs",
];

#[derive(Serialize, Deserialize)]
struct QualityRecord {
    cube_id: String,
    tile: String,
    latitude_band: LatitudeBand,
    start_month: u8,
    cd_10: u32,
    cd_50: u32,
    cd_70: u32,
    cd_90: u32,
    mcd_10: u32,
    mcd_50: u32,
    mcd_70: u32,
    mcd_90: u32,
    d_10: u32,
    d_50: u32,
    d_70: u32,
    d_90: u32,
    w: f64,
    apct: f64,
    pct: f64,
    qs: f64,
}

impl From<&QualityTableRow> for QualityRecord {
    fn from(r: &QualityTableRow) -> Self {
        let q = &r.indicators;
        Self {
            cube_id: r.cube_id.clone(),
            tile: r.tile.clone(),
            latitude_band: r.latitude_band,
            start_month: r.start_month,
            cd_10: q.cd_10,
            cd_50: q.cd_50,
            cd_70: q.cd_70,
            cd_90: q.cd_90,
            mcd_10: q.mcd_10,
            mcd_50: q.mcd_50,
            mcd_70: q.mcd_70,
            mcd_90: q.mcd_90,
            d_10: q.d_10,
            d_50: q.d_50,
            d_70: q.d_70,
            d_90: q.d_90,
            w: q.w,
            apct: q.apct,
            pct: q.pct,
            qs: r.qs,
        }
    }
}

impl From<QualityRecord> for QualityTableRow {
    fn from(r: QualityRecord) -> Self {
        Self {
            cube_id: r.cube_id,
            tile: r.tile,
            latitude_band: r.latitude_band,
            start_month: r.start_month,
            indicators: QualityIndicators {
                cd_10: r.cd_10,
                cd_50: r.cd_50,
                cd_70: r.cd_70,
                cd_90: r.cd_90,
                mcd_10: r.mcd_10,
                mcd_50: r.mcd_50,
                mcd_70: r.mcd_70,
                mcd_90: r.mcd_90,
                d_10: r.d_10,
                d_50: r.d_50,
                d_70: r.d_70,
                d_90: r.d_90,
                w: r.w,
                apct: r.apct,
                pct: r.pct,
            },
            qs: r.qs,
        }
    }
}

#[derive(Debug, Error)]
pub enum QualityTableError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("header column {position}: expected {expected:?}, found {found:?}")]
    Header {
        position: usize,
        expected: String,
        found: String,
    },
    #[error("line {line}: {message}")]
    Parse { line: u64, message: String },
}

/// Writes the table as CSV with [`QUALITY_TABLE_HEADER`].
pub fn write_quality_table<W: Write>(rows: &[QualityTableRow], out: W) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    for row in rows {
        w.serialize(QualityRecord::from(row))?;
    }
    if rows.is_empty() {
        w.write_record(QUALITY_TABLE_HEADER)?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_quality_table(rows: &[QualityTableRow], path: &Path) -> Result<(), QualityTableError> {
    let file = File::create(path).map_err(|source| QualityTableError::Io { path: path.to_path_buf(), source })?;
    write_quality_table(rows, BufWriter::new(file)).map_err(|e| QualityTableError::Parse {
        line: 0,
        message: e.to_string(),
    })
}

/// Parses a quality table, checking the header and every row's invariants.
pub fn read_quality_table<R: std::io::Read>(input: R) -> Result<Vec<QualityTableRow>, QualityTableError> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(input);
    let headers = reader
        .headers()
        .map_err(|e| QualityTableError::Parse { line: 1, message: e.to_string() })?
        .clone();
    for position in 0..QUALITY_TABLE_HEADER.len().max(headers.len()) {
        let expected = QUALITY_TABLE_HEADER.get(position).copied().unwrap_or("");
        let found = headers.get(position).unwrap_or("");
        if expected != found {
            return Err(QualityTableError::Header {
                position,
                expected: expected.to_string(),
                found: found.to_string(),
            });
        }
    }
    let mut rows = Vec::new();
    for record in reader.deserialize::<QualityRecord>() {
        let record = record.map_err(|e| QualityTableError::Parse {
            line: e.position().map(|p| p.line()).unwrap_or(0),
            message: e.to_string(),
        })?;
        let row = QualityTableRow::from(record);
        if let Err(message) = row.indicators.check() {
            return Err(QualityTableError::Parse { line: rows.len() as u64 + 2, message });
        }
        rows.push(row);
    }
    Ok(rows)
}

pub fn load_quality_table(path: &Path) -> Result<Vec<QualityTableRow>, QualityTableError> {
    let file = File::open(path).map_err(|source| QualityTableError::Io { path: path.to_path_buf(), source })?;
    read_quality_table(BufReader::new(file))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{synth_cube, SynthParams};
    use ndarray::Axis;
    use proptest::prelude::*;

    fn small_cube(seed: u64, frames: usize) -> Multicube {
        synth_cube(seed, &SynthParams { frames, ..SynthParams::default() }).unwrap().cube
    }

    #[test]
    fn cube_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let mut cube = small_cube(11, 3);
        // NaN payloads survive
        cube.hr_dynamic[[1, channel::RED, 5, 6]] = f32::from_bits(0x7fc0_1234);
        cube.hr_dynamic[[1, channel::MASK, 5, 6]] = 1.0;
        let path = dir.path().join(format!("{}.npz", cube.cube_id()));
        write_cube(&cube, &path).unwrap();
        let back = read_cube(&path).unwrap();
        assert_eq!(back.meta, cube.meta);
        let bits = |a: &Array4<f32>| a.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back.hr_dynamic), bits(&cube.hr_dynamic));
        assert_eq!(bits(&back.meso_dynamic), bits(&cube.meso_dynamic));
        assert_eq!(back.hr_static, cube.hr_static);
        assert_eq!(back.meso_static, cube.meso_static);
    }

    #[test]
    fn container_holds_the_four_arrays() {
        let dir = tempfile::tempdir().unwrap();
        let cube = small_cube(12, 2);
        let path = dir.path().join(format!("{}.npz", cube.cube_id()));
        write_cube(&cube, &path).unwrap();
        let mut npz = NpzReader::new(File::open(&path).unwrap()).unwrap();
        let mut names = npz.names().unwrap();
        names.sort();
        assert_eq!(names, vec![HIGHRES_DYNAMIC, HIGHRES_STATIC, MESO_DYNAMIC, MESO_STATIC]);
        let hr: ArrayD<f32> = npz.by_name(HIGHRES_DYNAMIC).unwrap();
        assert_eq!(hr.shape(), &[128, 128, 7, 2]);
        let meso: ArrayD<f32> = npz.by_name(MESO_DYNAMIC).unwrap();
        assert_eq!(meso.shape(), &[80, 80, 5, 10]);
    }

    #[test]
    fn missing_array_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let cube = small_cube(13, 2);
        let path = dir.path().join(format!("{}.npz", cube.cube_id()));
        let mut npz = NpzWriter::new(File::create(&path).unwrap());
        npz.add_array(HIGHRES_DYNAMIC, &internal_to_stored(&cube.hr_dynamic)).unwrap();
        npz.add_array(MESO_DYNAMIC, &internal_to_stored(&cube.meso_dynamic)).unwrap();
        npz.add_array(HIGHRES_STATIC, &cube.hr_static).unwrap();
        npz.finish().unwrap();
        match read_cube(&path) {
            Err(CubeIoError::MissingArray { array, .. }) => assert_eq!(array, MESO_STATIC),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn wrong_dims_and_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let cube = small_cube(14, 2);
        let path = dir.path().join(format!("{}.npz", cube.cube_id()));
        let mut npz = NpzWriter::new(File::create(&path).unwrap());
        npz.add_array(HIGHRES_DYNAMIC, &Array4::<f32>::zeros((127, 128, 7, 2))).unwrap();
        npz.finish().unwrap();
        assert!(matches!(read_cube(&path), Err(CubeIoError::Shape { array: HIGHRES_DYNAMIC, .. })));

        let junk = dir.path().join("32UMC_2018-01-01_junk.npz");
        fs::write(&junk, b"not a zip").unwrap();
        assert!(matches!(read_cube(&junk), Err(CubeIoError::Format { .. })));
    }

    #[test]
    fn zero_frame_cube_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut cube = small_cube(15, 1);
        cube.hr_dynamic = Array4::zeros((0, 7, 128, 128));
        cube.meso_dynamic = Array4::zeros((0, 5, 80, 80));
        let path = dir.path().join("x.npz");
        assert!(matches!(write_cube(&cube, &path), Err(CubeIoError::Shape { .. })));
    }

    #[test]
    fn float64_arrays_are_accepted() {
        let dir = tempfile::tempdir().unwrap();
        let cube = small_cube(16, 1);
        let path = dir.path().join(format!("{}.npz", cube.cube_id()));
        let mut npz = NpzWriter::new(File::create(&path).unwrap());
        npz.add_array(HIGHRES_DYNAMIC, &internal_to_stored(&cube.hr_dynamic).mapv(f64::from)).unwrap();
        npz.add_array(MESO_DYNAMIC, &internal_to_stored(&cube.meso_dynamic)).unwrap();
        npz.add_array(HIGHRES_STATIC, &cube.hr_static).unwrap();
        npz.add_array(MESO_STATIC, &cube.meso_static).unwrap();
        npz.finish().unwrap();
        assert_eq!(read_cube(&path).unwrap().hr_dynamic, cube.hr_dynamic);
    }

    #[test]
    fn prediction_directory_grouping() {
        let dir = tempfile::tempdir().unwrap();
        let cubes_dir = dir.path().join("cubes");
        let preds = dir.path().join("preds");
        fs::create_dir_all(&cubes_dir).unwrap();
        fs::create_dir_all(&preds).unwrap();
        for id in ["32UMC_2018-01-01_0001", "32UMC_2018-01-01_0002"] {
            fs::write(cubes_dir.join(format!("{id}.npz")), b"").unwrap();
        }
        let manifest = DatasetManifest::scan(&cubes_dir, Split::IidTest).unwrap();
        assert_eq!(manifest.entries.len(), 2);
        assert_eq!(read_predictions(&preds, &manifest).unwrap().count(), 0);

        let traj = |v: f32| Array4::<f32>::from_elem((3, 4, 8, 8), v);
        let p = Prediction::new("32UMC_2018-01-01_0001", vec![traj(0.1), traj(0.2), traj(0.3)]).unwrap();
        write_prediction(&p, &preds).unwrap();
        let orphan = Prediction::new("33TUM_2019-05-01_0009", vec![traj(0.0)]).unwrap();
        write_prediction(&orphan, &preds).unwrap();

        let items: Vec<_> = read_predictions(&preds, &manifest).unwrap().collect();
        assert_eq!(items.len(), 2);
        let first = items[0].as_ref().unwrap();
        assert_eq!(first.trajectories().len(), 3);
        assert_eq!(first.trajectories()[2][[0, 0, 0, 0]], 0.3);
        assert!(matches!(items[1], Err(CubeIoError::OrphanPrediction { .. })));
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        for id in ["32UMC_2018-01-01_0002", "32UMC_2018-01-01_0001"] {
            fs::write(dir.path().join(format!("{id}.npz")), b"").unwrap();
        }
        let m = DatasetManifest::scan(dir.path(), Split::OodTest).unwrap();
        let path = dir.path().join("manifest.jsonl");
        m.save(&path).unwrap();
        let back = DatasetManifest::load(&path).unwrap();
        assert_eq!(back.entries, m.entries);
        assert_eq!(back.split, Split::OodTest);
        assert_eq!(back.entries[0].cube_id, "32UMC_2018-01-01_0001");

        fs::remove_file(dir.path().join("32UMC_2018-01-01_0002.npz")).unwrap();
        assert!(matches!(DatasetManifest::load(&path), Err(CubeIoError::Manifest { line: 2, .. })));
    }

    fn row(i: usize) -> QualityTableRow {
        QualityTableRow {
            cube_id: format!("32UMC_2018-03-01_{i:05}"),
            tile: "32UMC".into(),
            latitude_band: LatitudeBand::North,
            start_month: 3,
            indicators: QualityIndicators {
                cd_10: 3,
                cd_50: 2,
                cd_70: 1,
                cd_90: 1,
                mcd_10: 4,
                mcd_50: 2,
                mcd_70: 1,
                mcd_90: 1,
                d_10: 6,
                d_50: 4,
                d_70: 2,
                d_90: 1,
                w: 0.1 + i as f64 * 1e-7,
                apct: 1.0 / 3.0,
                pct: 0.123_456_789_012_345_67,
            },
            qs: std::f64::consts::PI * i as f64,
        }
    }

    #[test]
    fn quality_table_round_trip() {
        let mut buf = Vec::new();
        write_quality_table(&[row(1)], &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with(&QUALITY_TABLE_HEADER.join(",")));
        assert_eq!(read_quality_table(buf.as_slice()).unwrap(), vec![row(1)]);

        let rows: Vec<_> = (0..32337).map(row).collect();
        let mut buf = Vec::new();
        write_quality_table(&rows, &mut buf).unwrap();
        assert_eq!(read_quality_table(buf.as_slice()).unwrap().len(), 32337);
    }

    #[test]
    fn quality_table_header_mismatch_names_column() {
        let mut buf = Vec::new();
        write_quality_table(&[row(1)], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap().replacen("mcd_50", "mcd_55", 1);
        match read_quality_table(text.as_bytes()) {
            Err(QualityTableError::Header { expected, found, .. }) => {
                assert_eq!(expected, "mcd_50");
                assert_eq!(found, "mcd_55");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn quality_table_parse_error_has_line() {
        let mut buf = Vec::new();
        write_quality_table(&[row(1), row(2), row(3)], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines: Vec<String> = text.lines().map(str::to_string).collect();
        lines[3] = lines[3].replacen(",north,", ",nowhere,", 1);
        match read_quality_table(lines.join("\n").as_bytes()) {
            Err(QualityTableError::Parse { line, .. }) => assert_eq!(line, 4),
            other => panic!("unexpected {other:?}"),
        }
    }

    proptest! {
        #[test]
        fn axis_normalization_is_self_inverse(t in 1usize..4, c in 1usize..4, h in 1usize..5, w in 1usize..5) {
            let a = Array4::from_shape_fn((t, c, h, w), |(a, b, i, j)| (a * 1000 + b * 100 + i * 10 + j) as f32);
            let stored = internal_to_stored(&a);
            prop_assert_eq!(stored.shape(), &[h, w, c, t]);
            prop_assert_eq!(stored[[h - 1, 0, c - 1, 0]], a[[0, c - 1, h - 1, 0]]);
            prop_assert_eq!(stored_to_internal(stored), a.clone());
            prop_assert_eq!(a.len_of(Axis(0)), t);
        }
    }
}
