//! `earthnet`: score forecasts, build masks, curate splits, run the
//! persistence baseline and generate fixtures.
//!
//! Exit status is 0 on success, 2 when the run finished but some cubes
//! failed, and 1 on fatal errors including bad arguments.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use earthnet_core::aggregate::evaluate;
use earthnet_core::baseline::{write_baseline, Method};
use earthnet_core::curation::{quality_row, split_dataset, CurationConfig};
use earthnet_core::io::{
    load_quality_table, read_cube, save_quality_table, write_cube, DatasetManifest, ManifestEntry, Split,
};
use earthnet_core::masking::apply_quality_mask;
use earthnet_core::synth::{cube_batch, synth_corpus, synth_cube, Profile};
use earthnet_core::{ScoreConfig, Track};

const MANIFEST_FILE: &str = "manifest.jsonl";
const QUALITY_FILE: &str = "quality.csv";

#[derive(Parser)]
#[command(name = "earthnet", version, about = "EarthNetScore evaluation and dataset curation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Score predictions against target cubes.
    Evaluate(EvaluateArgs),
    /// Recompute the data quality mask of a cube.
    Mask(MaskArgs),
    /// Build train/IID/OOD splits from a quality table.
    Curate(CurateArgs),
    /// Write persistence-baseline predictions.
    Baseline(BaselineArgs),
    /// Generate synthetic cubes or a quality-table corpus.
    Synth(SynthArgs),
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    track: Track,
    /// Directory of cube files, or a manifest file.
    #[arg(long)]
    targets: PathBuf,
    /// Directory holding one sub-directory of trajectories per cube.
    #[arg(long)]
    predictions: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Worker threads (default: available parallelism).
    #[arg(long, env = "ENS_NUM_WORKERS")]
    workers: Option<usize>,
    /// Also write the summary row as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct MaskArgs {
    #[arg(long)]
    cube: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CurateArgs {
    #[arg(long)]
    quality_table: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Starting quality restriction.
    #[arg(long)]
    x: Option<f64>,
    /// Scale corpus-size targets for corpora smaller than the original.
    #[arg(long)]
    scale: Option<f64>,
    #[arg(long)]
    min_total: Option<usize>,
    #[arg(long)]
    north_min: Option<usize>,
    #[arg(long)]
    ood_tiles: Option<usize>,
    #[arg(long)]
    ood_min: Option<usize>,
    #[arg(long)]
    ood_max: Option<usize>,
    #[arg(long)]
    ood_north_min: Option<usize>,
    /// Use `max(1 - eps, .)` inside the quality score logarithms.
    #[arg(long)]
    literal_guard: bool,
}

#[derive(Args)]
struct BaselineArgs {
    #[arg(long)]
    track: Track,
    /// Directory of cube files, or a manifest file.
    #[arg(long)]
    cubes: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// `mean` (cloud-free mean) or `last` (last valid value).
    #[arg(long, default_value = "mean")]
    method: Method,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    seed: u64,
    /// Number of cubes (or quality-table rows with --table-only).
    #[arg(long)]
    n: usize,
    #[arg(long)]
    out: PathBuf,
    /// `clean` or `mixed`.
    #[arg(long, default_value = "mixed")]
    profile: Profile,
    /// Track whose window length sets the frame count.
    #[arg(long, default_value = "iid")]
    track: Track,
    /// Only write a quality table.
    #[arg(long)]
    table_only: bool,
    /// Tiles of the quality-table corpus.
    #[arg(long, default_value_t = 20)]
    tiles: usize,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Evaluate(a) => run_evaluate(a),
        Command::Mask(a) => run_mask(a),
        Command::Curate(a) => run_curate(a),
        Command::Baseline(a) => run_baseline(a),
        Command::Synth(a) => run_synth(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn load_targets(path: &Path, split: Split) -> Result<DatasetManifest> {
    if path.is_file() {
        return DatasetManifest::load(path).with_context(|| format!("loading manifest {}", path.display()));
    }
    if !path.is_dir() {
        bail!("{} is neither a directory nor a manifest file", path.display());
    }
    let manifest = path.join(MANIFEST_FILE);
    if manifest.is_file() {
        return DatasetManifest::load(&manifest).with_context(|| format!("loading manifest {}", manifest.display()));
    }
    DatasetManifest::scan(path, split).with_context(|| format!("scanning {}", path.display()))
}

fn split_of(track: Track) -> Split {
    match track {
        Track::Iid => Split::IidTest,
        Track::Ood => Split::OodTest,
        Track::Extreme => Split::ExtremeTest,
        Track::Seasonal => Split::SeasonalTest,
    }
}

fn default_workers() -> usize {
    std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
}

fn run_evaluate(a: EvaluateArgs) -> Result<ExitCode> {
    let manifest = load_targets(&a.targets, split_of(a.track))?;
    if !a.predictions.is_dir() {
        bail!("prediction directory {} does not exist", a.predictions.display());
    }
    let workers = a.workers.unwrap_or_else(default_workers);
    let report = evaluate(manifest, &a.predictions, a.track, &ScoreConfig::default(), workers)?;
    fs::write(&a.out, report.to_json()).with_context(|| format!("writing {}", a.out.display()))?;
    if let Some(csv) = &a.csv {
        fs::write(csv, report.to_csv()).with_context(|| format!("writing {}", csv.display()))?;
    }
    println!("{}", report.summary_line());
    for e in &report.errors {
        eprintln!("{}: {}", e.cube_id.as_deref().unwrap_or("-"), e.message);
    }
    Ok(if report.errors.is_empty() { ExitCode::SUCCESS } else { ExitCode::from(2) })
}

fn run_mask(a: MaskArgs) -> Result<ExitCode> {
    let mut cube = read_cube(&a.cube)?;
    apply_quality_mask(&mut cube)?;
    write_cube(&cube, &a.out)?;
    let masked = cube.quality_mask().iter().filter(|&&m| m).count();
    let total = cube.quality_mask().len();
    println!("{}: {masked} of {total} pixel-frames masked", cube.cube_id());
    Ok(ExitCode::SUCCESS)
}

fn run_curate(a: CurateArgs) -> Result<ExitCode> {
    let rows = load_quality_table(&a.quality_table)
        .with_context(|| format!("reading quality table {}", a.quality_table.display()))?;
    let mut cfg = CurationConfig::default();
    if let Some(s) = a.scale {
        cfg = cfg.scaled(s);
    }
    cfg.literal_guard = a.literal_guard;
    if let Some(x) = a.x {
        cfg.x_start = x;
    }
    if let Some(v) = a.min_total {
        cfg.min_total = v;
    }
    if let Some(v) = a.north_min {
        cfg.north_min_total = v;
    }
    if let Some(v) = a.ood_tiles {
        cfg.ood_tile_count = v;
    }
    if let Some(v) = a.ood_min {
        cfg.ood_bounds.0 = v;
    }
    if let Some(v) = a.ood_max {
        cfg.ood_bounds.1 = v;
    }
    if let Some(v) = a.ood_north_min {
        cfg.ood_north_min = v;
    }
    let split = split_dataset(&rows, a.seed, &cfg)?;
    let mut json = serde_json::to_string_pretty(&split)?;
    json.push('\n');
    fs::write(&a.out, json).with_context(|| format!("writing {}", a.out.display()))?;
    println!(
        "train {}  iid {}  ood {}  x {:.2}",
        split.train.len(),
        split.iid.len(),
        split.ood.len(),
        split.x_final
    );
    Ok(ExitCode::SUCCESS)
}

fn run_baseline(a: BaselineArgs) -> Result<ExitCode> {
    let manifest = load_targets(&a.cubes, split_of(a.track))?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let spec = a.track.spec();
    let mut failures = 0usize;
    for entry in &manifest.entries {
        let outcome = read_cube(&manifest.cube_path(entry))
            .map_err(anyhow::Error::from)
            .and_then(|cube| Ok(write_baseline(&cube, &spec, a.method, &a.out)?));
        if let Err(e) = outcome {
            failures += 1;
            eprintln!("{}: {e:#}", entry.cube_id);
        }
    }
    println!("{} of {} cubes predicted", manifest.entries.len() - failures, manifest.entries.len());
    Ok(if failures == 0 { ExitCode::SUCCESS } else { ExitCode::from(2) })
}

fn run_synth(a: SynthArgs) -> Result<ExitCode> {
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    if a.table_only {
        if a.tiles == 0 {
            bail!("--tiles must be positive");
        }
        let corpus = synth_corpus(a.seed, a.tiles, a.n / a.tiles, a.profile);
        save_quality_table(&corpus.rows, &a.out.join(QUALITY_FILE))?;
        println!("{} quality-table rows written", corpus.rows.len());
        return Ok(ExitCode::SUCCESS);
    }
    let spec = a.track.spec();
    let cfg = CurationConfig::default();
    let mut entries = Vec::new();
    let mut rows = Vec::new();
    for (seed, params) in cube_batch(a.seed, a.n, spec.total_frames(), a.profile) {
        let cube = synth_cube(seed, &params)?.cube;
        let file = PathBuf::from(format!("{}.npz", cube.cube_id()));
        write_cube(&cube, &a.out.join(&file))?;
        rows.push(quality_row(&cube, &spec, &cfg)?);
        entries.push(ManifestEntry { cube_id: cube.cube_id().to_string(), path: file, tile: cube.meta.tile.clone() });
    }
    let manifest = DatasetManifest::new(&a.out, split_of(a.track), entries)?;
    manifest.save(&a.out.join(MANIFEST_FILE))?;
    rows.sort_by(|x, y| x.cube_id.cmp(&y.cube_id));
    save_quality_table(&rows, &a.out.join(QUALITY_FILE))?;
    println!("{} cubes written to {}", manifest.entries.len(), a.out.display());
    Ok(ExitCode::SUCCESS)
}
