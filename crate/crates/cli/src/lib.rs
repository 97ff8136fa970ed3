//! `vtcd`: generate phantom data, train, restore, evaluate and plot.
//!
//! Exit codes: 0 on success, 1 for invalid input (flags, missing or
//! malformed files, inconsistent configurations), 2 when a valid run fails.

mod plot;

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use vtcd_core::metrics::{evaluate_volume, write_report, MetricsReport};
use vtcd_core::phantom::{build_dataset, DatasetManifest, DegradationSpec, PhantomSpec};
use vtcd_core::resample::trilinear_upsample;
use vtcd_core::volume::{load_volume, save_volume};
use vtcd_core::PlaneId;
use vtcd_model::restore::{RestoreMode, Restorer};
use vtcd_model::trainer::{train, TrainConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INVALID: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

/// Environment variable capping internal worker threads.
pub const THREADS_ENV: &str = "VTCD_NUM_THREADS";

#[derive(Debug, Parser)]
#[command(name = "vtcd", version, about = "Unsupervised denoising and axial super-resolution of 3D volumes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate clean/degraded phantom pairs and a manifest.
    GenData(GenData),
    /// Train all networks on a dataset manifest.
    Train(Train),
    /// Restore a degraded volume with a trained checkpoint.
    Restore(Restore),
    /// Compare a prediction against ground truth and write a JSON report.
    Eval(Eval),
    /// Render a metrics report as a PNG bar chart.
    Plot(Plot),
}

#[derive(Debug, Args)]
struct GenData {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Number of volumes; the first 80% form the training split.
    #[arg(long, default_value_t = 20)]
    count: usize,
    /// Degraded volume size as HxWxC; the clean volume has depth C * scale.
    #[arg(long, default_value = "32x32x8", value_parser = parse_size)]
    size: [usize; 3],
    /// Cells per phantom.
    #[arg(long, default_value_t = 5)]
    cells: usize,
    /// Axial downsampling factor.
    #[arg(long, default_value_t = 4)]
    scale: usize,
    /// Noise std at the top and bottom of the stack, as SIGMA0,SIGMA1.
    #[arg(long, default_value = "0.03,0.12", value_parser = parse_noise)]
    noise: (f64, f64),
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args)]
struct Train {
    /// Dataset manifest.
    #[arg(long)]
    data: PathBuf,
    /// JSON training configuration; omitted keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory for the checkpoint and epoch log.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct Restore {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Skip super-resolution.
    #[arg(long, conflicts_with = "sr_only")]
    denoise_only: bool,
    /// Skip denoising.
    #[arg(long)]
    sr_only: bool,
    /// Seed of the reverse-chain noise.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args)]
struct Eval {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    #[arg(long)]
    report: PathBuf,
    /// Planes reported individually, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "xy,xz,yz")]
    planes: Vec<PlaneId>,
    /// Degraded input; adds its trilinear upsampling as the baseline entry.
    #[arg(long)]
    lr: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct Plot {
    #[arg(long)]
    report: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

fn parse_size(s: &str) -> Result<[usize; 3], String> {
    let parts: Vec<&str> = s.split('x').collect();
    if parts.len() != 3 {
        return Err(format!("expected HxWxC, got {s:?}"));
    }
    let mut out = [0; 3];
    for (o, p) in out.iter_mut().zip(parts) {
        *o = p.parse().map_err(|_| format!("bad dimension {p:?} in {s:?}"))?;
    }
    Ok(out)
}

fn parse_noise(s: &str) -> Result<(f64, f64), String> {
    let (a, b) = s.split_once(',').ok_or_else(|| format!("expected SIGMA0,SIGMA1, got {s:?}"))?;
    let p = |v: &str| v.trim().parse::<f64>().map_err(|_| format!("bad noise level {v:?}"));
    Ok((p(a)?, p(b)?))
}

/// Default phantom with the radius range shrunk, if needed, so cells fit
/// inside the smallest extent.
fn phantom_for(dims: [usize; 3], cells: usize, seed: u64) -> PhantomSpec {
    let base = PhantomSpec::default();
    let smallest = dims.iter().copied().min().unwrap_or(0) as f64;
    let fit = 0.5 * smallest - base.membrane_thickness;
    let [rmin, rmax] = base.radius_range;
    let radius_range = if fit > 0.0 && fit < rmax {
        [rmin.min(0.6 * fit), fit]
    } else {
        base.radius_range
    };
    PhantomSpec {
        dims,
        num_cells: cells,
        radius_range,
        seed,
        ..base
    }
}

fn gen_data(a: GenData) -> anyhow::Result<()> {
    if a.scale == 0 {
        bail!("--scale must be at least 1");
    }
    let [h, w, c] = a.size;
    let pspec = phantom_for([h, w, c * a.scale], a.cells, a.seed);
    let dspec = DegradationSpec {
        sigma0: a.noise.0,
        sigma1: a.noise.1,
        axial_factor: a.scale,
        seed: a.seed,
        ..DegradationSpec::default()
    };
    let m = build_dataset(a.count, &pspec, &dspec, &a.out)?;
    eprintln!(
        "wrote {} volumes ({} train, {} eval) to {}",
        m.entries.len(),
        m.split.train.len(),
        m.split.eval.len(),
        a.out.display()
    );
    Ok(())
}

fn train_cmd(a: Train) -> anyhow::Result<()> {
    let config = match &a.config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    let manifest = DatasetManifest::load(&a.data)?;
    let report = train(&config, &manifest, &a.out)?;
    if let Some(last) = report.log.last() {
        eprintln!("finished {} epoch {}: total loss {:.5}", last.phase, last.epoch, last.losses.total);
    }
    Ok(())
}

fn restore_cmd(a: Restore) -> anyhow::Result<()> {
    let mode = match (a.denoise_only, a.sr_only) {
        (true, _) => RestoreMode::DenoiseOnly,
        (_, true) => RestoreMode::SrOnly,
        _ => RestoreMode::Full,
    };
    let restorer = Restorer::load(&a.ckpt)?;
    let vol = load_volume(&a.input)?;
    let out = restorer.restore(&vol, mode, a.seed)?;
    save_volume(&out, &a.out)?;
    Ok(())
}

fn volume_id(path: &Path) -> String {
    path.file_stem().map_or_else(|| "volume".into(), |s| s.to_string_lossy().into_owned())
}

fn eval_cmd(a: Eval) -> anyhow::Result<()> {
    let pred = load_volume(&a.pred)?;
    let gt = load_volume(&a.gt)?;
    let id = volume_id(&a.pred);
    let entry = evaluate_volume(&id, &pred, &gt, &a.planes)?;
    let baseline = match &a.lr {
        Some(p) => {
            let lr = load_volume(p)?;
            let (c_lr, c_gt) = (lr.dims().2, gt.dims().2);
            if c_gt % c_lr != 0 {
                bail!("ground-truth depth {c_gt} is not a multiple of the input depth {c_lr}");
            }
            let up = trilinear_upsample(&lr, c_gt / c_lr)?;
            Some(vec![evaluate_volume(&id, &up, &gt, &a.planes)?])
        }
        None => None,
    };
    let report = MetricsReport::new(vec![entry], baseline);
    write_report(&report, &a.report)?;
    Ok(())
}

fn plot_cmd(a: Plot) -> anyhow::Result<()> {
    let report = vtcd_core::metrics::read_report(&a.report)?;
    plot::render(&report)
        .save(&a.out)
        .with_context(|| format!("cannot write {}", a.out.display()))?;
    Ok(())
}

/// Whether an error stems from the caller's input rather than a failed run.
fn is_invalid_input(err: &anyhow::Error) -> bool {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<vtcd_model::Error>() {
            return match e {
                vtcd_model::Error::Core(c) => core_invalid(c),
                vtcd_model::Error::Io { .. }
                | vtcd_model::Error::Format { .. }
                | vtcd_model::Error::Config(_)
                | vtcd_model::Error::Dimension(_) => true,
                vtcd_model::Error::Tensor(_) | vtcd_model::Error::Degenerate(_) | vtcd_model::Error::NonFinite { .. } => {
                    false
                }
            };
        }
        if let Some(e) = cause.downcast_ref::<vtcd_core::Error>() {
            return core_invalid(e);
        }
        if cause.downcast_ref::<image::ImageError>().is_some() {
            return false;
        }
    }
    true
}

fn core_invalid(e: &vtcd_core::Error) -> bool {
    !matches!(e, vtcd_core::Error::Contract(_))
}

fn apply_thread_cap() -> Result<(), String> {
    let Ok(v) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    match v.trim().parse::<usize>() {
        Ok(n) if n > 0 => {
            // The tensor backend sizes its worker pool from this variable.
            std::env::set_var("RAYON_NUM_THREADS", n.to_string());
            Ok(())
        }
        _ => Err(format!("{THREADS_ENV} must be a positive integer, got {v:?}")),
    }
}

fn one_line(s: &str) -> String {
    s.split('\n').map(str::trim).filter(|l| !l.is_empty()).collect::<Vec<_>>().join(" ")
}

/// Parses `argv` (program name first), runs the command and returns the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return EXIT_OK;
            }
            let text = e.to_string();
            let first = text.lines().find(|l| !l.trim().is_empty()).unwrap_or("invalid arguments");
            eprintln!("vtcd: {}", first.trim_start_matches("error: "));
            return EXIT_INVALID;
        }
    };
    if let Err(msg) = apply_thread_cap() {
        eprintln!("vtcd: {msg}");
        return EXIT_INVALID;
    }
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train_cmd(a),
        Command::Restore(a) => restore_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Plot(a) => plot_cmd(a),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("vtcd: {}", one_line(&format!("{e:#}")));
            if is_invalid_input(&e) {
                EXIT_INVALID
            } else {
                EXIT_RUNTIME
            }
        }
    }
}
