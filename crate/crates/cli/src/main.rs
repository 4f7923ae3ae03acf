use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand};

use lcls::cloud::{
    assemble_capture, config_resolution, expected_point_count, filter_duplicates, read_xyzit,
    write_xyzit,
};
use lcls::eco::{
    build_dtm, classify_and_nsr, detect_shco, normalize_heights, point_density_grid, shannon_index,
    summary_metrics, vegetation_histogram, DtmParams, StrataError, DEFAULT_SHCO_SEARCH_MAX_M,
};
use lcls::packet::decode_stream;
use lcls::sim::{parse_scene, run_capture, CaptureError, CaptureRecord, RigPose};
use lcls::{validate_config, GeoFix, PointCloud, ScanConfig};

const VERSION: &str = concat!(env!("CARGO_PKG_VERSION"), " (codec format 1)");
const SEED_ENV: &str = "LCLS_SEED";

#[derive(Parser)]
#[command(name = "lcls", version = VERSION, about = "Stationary LiDAR scanner twin")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Simulate a capture of a scene into a capture directory.
    Simulate(SimulateArgs),
    /// Decode a raw packet stream and report its contents.
    Decode {
        #[arg(long)]
        raw: PathBuf,
    },
    /// Assemble a capture directory into a levelled XYZIT cloud.
    Assemble {
        #[arg(long)]
        capture: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Keep coincident points.
        #[arg(long)]
        no_dedup: bool,
    },
    /// Ground model, height histogram, diversity and shrub metrics.
    Analyze {
        #[arg(long)]
        cloud: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Shrub cut-off in metres; detected from the histogram if omitted.
        #[arg(long)]
        shco: Option<f64>,
        #[arg(long, default_value_t = 0.2)]
        bin: f64,
        #[arg(long, default_value_t = 0.5)]
        class: f64,
        #[arg(long, default_value_t = 0.5)]
        dtm_cell: f64,
    },
    /// Point-density raster in points per square metre.
    Density {
        #[arg(long)]
        cloud: PathBuf,
        #[arg(long, default_value_t = 1.0)]
        cell: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Predicted point count and horizontal resolution of a configuration.
    ExpectedCount {
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        overrides: ConfigOverrides,
    },
}

#[derive(Args)]
struct ConfigOverrides {
    /// Override a configuration key, e.g. `--set rep=5`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long)]
    scene: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    overrides: ConfigOverrides,
    #[arg(long, default_value_t = 1.5)]
    height: f64,
    #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
    roll: f64,
    #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
    pitch: f64,
    #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
    heading: f64,
    #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
    compass_error: f64,
    #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
    lat: f64,
    #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
    lon: f64,
    #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
    alt: f64,
    #[arg(long, default_value_t = 0)]
    fix_time: i64,
}

enum Failure {
    Usage(String),
    Data(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Data(e)
    }
}

type CmdResult = Result<(), Failure>;

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Data(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run(cmd: Cmd) -> CmdResult {
    match cmd {
        Cmd::Simulate(args) => simulate(args),
        Cmd::Decode { raw } => decode(&raw),
        Cmd::Assemble {
            capture,
            out,
            no_dedup,
        } => assemble(&capture, &out, no_dedup),
        Cmd::Analyze {
            cloud,
            out,
            shco,
            bin,
            class,
            dtm_cell,
        } => analyze(&cloud, &out, shco, bin, class, dtm_cell),
        Cmd::Density { cloud, cell, out } => density(&cloud, cell, &out),
        Cmd::ExpectedCount { config, overrides } => expected_count(config.as_deref(), &overrides),
    }
}

fn read_text(path: &Path) -> anyhow::Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

/// Config file (if any) with `--set` overrides applied; also reports whether
/// a seed was given explicitly.
fn load_config(
    path: Option<&Path>,
    overrides: &ConfigOverrides,
) -> Result<(ScanConfig, bool), Failure> {
    let mut cfg = ScanConfig::default();
    let mut seeded = false;
    if let Some(path) = path {
        let text = read_text(path)?;
        cfg = ScanConfig::parse(&text).with_context(|| format!("config {}", path.display()))?;
        seeded = text
            .lines()
            .filter_map(|l| l.split_once('='))
            .any(|(k, _)| k.trim() == "seed");
    }
    for kv in &overrides.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| usage(format!("--set expects KEY=VALUE, got '{kv}'")))?;
        cfg.set(k, v)
            .map_err(|e| usage(format!("--set {kv}: {e}")))?;
        seeded |= k.trim() == "seed";
    }
    Ok((cfg, seeded))
}

fn check_positive(name: &str, v: f64) -> CmdResult {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(usage(format!("--{name} must be > 0, got {v}")))
    }
}

fn parent_dir(path: &Path) -> PathBuf {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

fn write_file_atomic(
    path: &Path,
    write: impl FnOnce(&mut dyn Write) -> std::io::Result<()>,
) -> anyhow::Result<()> {
    let mut tmp = tempfile::NamedTempFile::new_in(parent_dir(path))
        .with_context(|| format!("creating temporary file next to {}", path.display()))?;
    {
        let mut w = BufWriter::new(tmp.as_file_mut());
        write(&mut w).with_context(|| format!("writing {}", path.display()))?;
        w.flush()?;
    }
    tmp.persist(path)
        .with_context(|| format!("renaming into {}", path.display()))?;
    Ok(())
}

/// Builds the directory under a temporary name and renames it into place.
/// An existing target is only replaced when it is empty or was written by a
/// previous run with the same marker file.
fn write_dir_atomic(dir: &Path, marker: &str, files: &[(&str, Vec<u8>)]) -> anyhow::Result<()> {
    if dir.exists() {
        let replaceable =
            dir.is_dir() && (dir.join(marker).is_file() || fs::read_dir(dir)?.next().is_none());
        if !replaceable {
            bail!(
                "{} exists and is not a previous output directory",
                dir.display()
            );
        }
    }
    let tmp = tempfile::Builder::new()
        .prefix(".lcls-")
        .tempdir_in(parent_dir(dir))
        .with_context(|| format!("creating temporary directory next to {}", dir.display()))?;
    for (name, bytes) in files {
        fs::write(tmp.path().join(name), bytes).with_context(|| format!("writing {name}"))?;
    }
    if dir.exists() {
        fs::remove_dir_all(dir).with_context(|| format!("replacing {}", dir.display()))?;
    }
    let staged = tmp.keep();
    fs::rename(&staged, dir).with_context(|| format!("renaming into {}", dir.display()))?;
    Ok(())
}

fn simulate(a: SimulateArgs) -> CmdResult {
    let (mut cfg, seeded) = load_config(a.config.as_deref(), &a.overrides)?;
    if let Some(seed) = a.seed {
        cfg.rng_seed = seed;
    } else if !seeded {
        if let Ok(v) = std::env::var(SEED_ENV) {
            cfg.rng_seed = v
                .trim()
                .parse()
                .map_err(|_| usage(format!("{SEED_ENV}='{v}' is not an unsigned integer")))?;
        }
    }
    let cfg = validate_config(cfg).map_err(|e| usage(format!("config: {e}")))?;
    let scene_text = read_text(&a.scene)?;
    let scene = parse_scene(&scene_text).with_context(|| format!("scene {}", a.scene.display()))?;
    let geo = GeoFix::new(a.lat, a.lon, a.alt, a.fix_time).map_err(|e| usage(e.to_string()))?;
    let pose = RigPose {
        sensor_height_m: a.height,
        true_roll_deg: a.roll,
        true_pitch_deg: a.pitch,
        true_heading_deg: a.heading,
        compass_error_deg: a.compass_error,
        geo,
    };
    let rec = run_capture(&scene, &pose, &cfg).map_err(|e| match e {
        CaptureError::Pose(_) => usage(e.to_string()),
        other => Failure::Data(other.into()),
    })?;
    write_dir_atomic(&a.out, "meta.txt", &rec.to_files())?;
    println!("positions={}", cfg.positions());
    println!("sweeps={}", cfg.total_sweeps());
    println!("bytes={}", rec.raw.len());
    println!("expected_points={}", expected_point_count(&cfg));
    println!("seed={}", cfg.config().rng_seed);
    Ok(())
}

fn decode(raw: &Path) -> CmdResult {
    let bytes = fs::read(raw).with_context(|| format!("reading {}", raw.display()))?;
    let d = decode_stream(&bytes);
    let packets: usize = d.sweeps.iter().map(|s| s.packets().len()).sum();
    let returns: usize = d
        .sweeps
        .iter()
        .flat_map(|s| s.blocks())
        .map(|(b, _)| {
            b.channels
                .iter()
                .filter(|c| c.distance_m().is_some())
                .count()
        })
        .sum();
    println!("bytes={}", bytes.len());
    println!("sweeps={}", d.sweeps.len());
    println!("packets={packets}");
    println!("returns={returns}");
    println!("rejected_bytes={}", d.rejected_bytes);
    println!("diagnostics={}", d.diagnostics.len());
    for diag in &d.diagnostics {
        println!("diagnostic: {diag}");
    }
    if d.diagnostics.is_empty() {
        Ok(())
    } else {
        Err(Failure::Data(anyhow!(
            "{} decode diagnostics",
            d.diagnostics.len()
        )))
    }
}

fn read_capture(dir: &Path) -> anyhow::Result<CaptureRecord> {
    let raw = fs::read(dir.join("raw.lcraw"))
        .with_context(|| format!("reading {}/raw.lcraw", dir.display()))?;
    let imu = read_text(&dir.join("imu.csv"))?;
    let cal_path = dir.join("imu_cal.csv");
    let cal = if cal_path.exists() {
        Some(read_text(&cal_path)?)
    } else {
        None
    };
    let meta = read_text(&dir.join("meta.txt"))?;
    Ok(CaptureRecord::from_parts(raw, &imu, cal.as_deref(), &meta)?)
}

fn assemble(capture: &Path, out: &Path, no_dedup: bool) -> CmdResult {
    let rec = read_capture(capture)?;
    let asm = assemble_capture(&rec).map_err(anyhow::Error::from)?;
    let raw_points = asm.cloud.len();
    let cloud = if no_dedup {
        asm.cloud
    } else {
        filter_duplicates(asm.cloud)
    };
    write_file_atomic(out, |w| write_xyzit(&cloud, w))?;
    let att = &cloud.meta.attitude;
    println!("expected_points={}", expected_point_count(&rec.cfg));
    println!("assembled_points={raw_points}");
    println!("points={}", cloud.len());
    println!("roll={:.4}", att.roll_deg);
    println!("pitch={:.4}", att.pitch_deg);
    println!("heading={:.4}", att.heading_deg);
    println!("settled={}", asm.settle.settled);
    Ok(())
}

fn read_cloud(path: &Path) -> anyhow::Result<PointCloud> {
    let f = fs::File::open(path).with_context(|| format!("reading {}", path.display()))?;
    read_xyzit(BufReader::new(f)).with_context(|| format!("cloud {}", path.display()))
}

fn analyze(
    cloud: &Path,
    out: &Path,
    shco: Option<f64>,
    bin: f64,
    class: f64,
    dtm_cell: f64,
) -> CmdResult {
    check_positive("bin", bin)?;
    check_positive("class", class)?;
    check_positive("dtm-cell", dtm_cell)?;
    if let Some(s) = shco {
        if !(s > 0.2 && s.is_finite()) {
            return Err(usage(format!("--shco must be > 0.2, got {s}")));
        }
    }
    let cloud = read_cloud(cloud)?;
    if cloud.is_empty() {
        return Err(Failure::Data(anyhow!("empty cloud")));
    }
    let dtm =
        build_dtm(&cloud.points, &DtmParams::with_cell(dtm_cell)).map_err(anyhow::Error::from)?;
    let heights = normalize_heights(&cloud.points, &dtm);
    let hist = vegetation_histogram(&heights, bin).map_err(anyhow::Error::from)?;
    let shannon = match shannon_index(&heights, class) {
        Ok(h) => Some(h),
        Err(StrataError::NoVegetation) => None,
        Err(e) => return Err(Failure::Data(e.into())),
    };
    let shco = match shco {
        Some(s) => Some(s),
        None => match detect_shco(&hist, DEFAULT_SHCO_SEARCH_MAX_M) {
            Ok(s) => Some(s),
            Err(e) => {
                eprintln!("note: {e}; pass --shco to classify strata");
                None
            }
        },
    };
    let strata = match shco {
        Some(s) => match classify_and_nsr(&heights, s) {
            Ok((counts, nsr)) => Some((counts, s, Some(nsr))),
            Err(StrataError::NoShrubOrGround) => Some((
                lcls::eco::classify(&heights, s).map_err(anyhow::Error::from)?,
                s,
                None,
            )),
            Err(e) => return Err(Failure::Data(e.into())),
        },
        None => None,
    };
    let summary = summary_metrics(
        &heights,
        strata.as_ref().map(|(c, s, _)| (c, *s)),
        strata.as_ref().and_then(|(_, _, n)| *n),
        shannon,
    );
    let text = summary.to_text();
    write_dir_atomic(
        out,
        "summary.txt",
        &[
            ("dtm.asc", dtm.to_ascii().to_text(4).into_bytes()),
            ("histogram.csv", hist.to_csv().into_bytes()),
            ("summary.txt", text.clone().into_bytes()),
        ],
    )?;
    print!("{text}");
    Ok(())
}

fn density(cloud: &Path, cell: f64, out: &Path) -> CmdResult {
    check_positive("cell", cell)?;
    let cloud = read_cloud(cloud)?;
    let grid = point_density_grid(&cloud.points, cell);
    let text = grid.to_ascii().to_text(4);
    write_file_atomic(out, |w| w.write_all(text.as_bytes()))?;
    println!("ncols={}", grid.ncols);
    println!("nrows={}", grid.nrows);
    println!("points={}", grid.total());
    Ok(())
}

fn expected_count(config: Option<&Path>, overrides: &ConfigOverrides) -> CmdResult {
    let (cfg, _) = load_config(config, overrides)?;
    let resolution = config_resolution(&cfg).map_err(|e| usage(e.to_string()))?;
    let cfg = validate_config(cfg).map_err(|e| usage(format!("config: {e}")))?;
    println!("points={}", expected_point_count(&cfg));
    println!("positions={}", cfg.positions());
    println!("resolution_deg={resolution}");
    Ok(())
}
