//! Command-line front end: layout rendering, two-stage training,
//! generation, self-checks, the lambda ablation harness, and metrics.
//!
//! Exit codes: 0 success, 1 check failure, 2 config/parse error,
//! 3 I/O error, 4 dataset error.

use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use forge_core::check::{self, Fault};
use forge_core::codec::PixelVideo;
use forge_core::denoiser::{load_checkpoint, save_checkpoint, CheckpointError, DenoiserWeights};
use forge_core::layout::{self, Palette};
use forge_core::metrics::{evaluate, MetricsError, PooledGray};
use forge_core::pipeline::{
    self, parse_config, PipelineError, RunConfig, SrMode,
};
use forge_core::pnc1::{self, Pnc1Error};
use forge_core::scene::{parse_scene, SceneSequence};

const EXIT_CHECK: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_IO: u8 = 3;
const EXIT_DATASET: u8 = 4;

#[derive(Parser)]
#[command(
    name = "panorama-forge",
    version,
    about = "Layout-conditioned panoramic multi-view video generation"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SrArg {
    None,
    Resize,
    Plugin,
}

impl From<SrArg> for SrMode {
    fn from(a: SrArg) -> SrMode {
        match a {
            SrArg::None => SrMode::None,
            SrArg::Resize => SrMode::Resize,
            SrArg::Plugin => SrMode::Plugin,
        }
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Rasterize a scene into the 19-channel control tensor (PNC1).
    RenderLayout {
        /// Scene JSON file.
        #[arg(long)]
        scene: PathBuf,
        /// Output PNC1 path.
        #[arg(long)]
        out: PathBuf,
        /// Per-view raster width in pixels.
        #[arg(long, default_value_t = 512)]
        width: usize,
        /// Per-view raster height in pixels.
        #[arg(long, default_value_t = 256)]
        height: usize,
        /// Depth range of the rasterizer bins, meters.
        #[arg(long, default_value_t = 60.0)]
        dmax: f64,
    },
    /// Train one stage of the pipeline and write a checkpoint.
    Train {
        /// Pipeline stage: 1 = multi-view image, 2 = video.
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
        stage: u8,
        /// Directory of scene JSON files.
        #[arg(long)]
        scenes: PathBuf,
        /// Run-config JSON file.
        #[arg(long)]
        config: PathBuf,
        /// Output checkpoint directory (also receives loss.csv).
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the two-stage sampler and write frames plus previews.
    Generate {
        /// Scene JSON file.
        #[arg(long)]
        scene: PathBuf,
        /// Stage-1 checkpoint directory.
        #[arg(long)]
        ckpt1: PathBuf,
        /// Stage-2 checkpoint directory.
        #[arg(long)]
        ckpt2: PathBuf,
        /// Run-config JSON file.
        #[arg(long)]
        config: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Override the config's super-resolution mode.
        #[arg(long, value_enum)]
        sr: Option<SrArg>,
    },
    /// Verify attention kernels and analytic gradients against oracles.
    OracleCheck {
        /// Number of randomized attention trials.
        #[arg(long, default_value_t = 100)]
        trials: usize,
        /// Base seed; trial k runs at seed + k.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Number of denoiser parameters probed by finite differences.
        #[arg(long, default_value_t = 50)]
        grad_params: usize,
        /// Test hook: corrupt one kernel to prove the checker fires.
        #[arg(long, hide = true)]
        inject_fault: bool,
    },
    /// Sweep the appearance-prior strength and tabulate metrics.
    AblateLambda {
        /// Comma-separated non-negative prior strengths.
        #[arg(long)]
        lambdas: String,
        /// Scene JSON file.
        #[arg(long)]
        scene: PathBuf,
        /// Stage-1 checkpoint directory.
        #[arg(long)]
        ckpt1: PathBuf,
        /// Stage-2 checkpoint directory.
        #[arg(long)]
        ckpt2: PathBuf,
        /// Run-config JSON file.
        #[arg(long)]
        config: PathBuf,
        /// Output CSV path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare two frame directories and print the metrics report.
    Metrics {
        /// Directory of generated frame_*.pnc1 tensors (V, H, W, 3).
        #[arg(long)]
        generated: PathBuf,
        /// Directory of reference frame_*.pnc1 tensors (V, H, W, 3).
        #[arg(long)]
        reference: PathBuf,
        /// Optional path for the JSON report (stdout either way).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Terminal failure: exit code plus the message printed to stderr.
struct Failure {
    code: u8,
    msg: String,
}

impl Failure {
    fn new(code: u8, msg: impl Into<String>) -> Self {
        Failure {
            code,
            msg: msg.into(),
        }
    }
}

type CliResult<T> = Result<T, Failure>;

fn io_fail(path: &Path, e: impl Display) -> Failure {
    Failure::new(EXIT_IO, format!("{}: {e}", path.display()))
}

fn pnc1_fail(path: &Path, e: Pnc1Error) -> Failure {
    let code = match e {
        Pnc1Error::Io(_) => EXIT_IO,
        _ => EXIT_CONFIG,
    };
    Failure::new(code, format!("{}: {e}", path.display()))
}

fn ckpt_fail(dir: &Path, e: CheckpointError) -> Failure {
    let code = match &e {
        CheckpointError::Io(_) | CheckpointError::Pnc1(Pnc1Error::Io(_)) => EXIT_IO,
        _ => EXIT_CONFIG,
    };
    Failure::new(code, format!("{}: {e}", dir.display()))
}

fn pipeline_fail(e: PipelineError) -> Failure {
    let code = match &e {
        PipelineError::Dataset(_) => EXIT_DATASET,
        PipelineError::Checkpoint(CheckpointError::Io(_)) => EXIT_IO,
        _ => EXIT_CONFIG,
    };
    Failure::new(code, e.to_string())
}

fn metrics_fail(e: MetricsError) -> Failure {
    Failure::new(EXIT_CONFIG, e.to_string())
}

fn load_scene(path: &Path) -> CliResult<SceneSequence> {
    let text = fs::read_to_string(path).map_err(|e| io_fail(path, e))?;
    parse_scene(&text).map_err(|e| Failure::new(EXIT_CONFIG, format!("{}: {e}", path.display())))
}

fn load_config(path: &Path) -> CliResult<RunConfig> {
    let text = fs::read_to_string(path).map_err(|e| io_fail(path, e))?;
    parse_config(&text)
        .map_err(|e| Failure::new(EXIT_CONFIG, format!("{}: {e}", path.display())))
}

/// Reads every .json scene in a directory, sorted by file name so runs
/// are order-independent of the underlying file system.
fn load_scene_dir(dir: &Path) -> CliResult<Vec<SceneSequence>> {
    let entries = fs::read_dir(dir).map_err(|e| io_fail(dir, e))?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    paths.iter().map(|p| load_scene(p)).collect()
}

fn load_weights(dir: &Path) -> CliResult<DenoiserWeights> {
    load_checkpoint(dir).map_err(|e| ckpt_fail(dir, e))
}

/// One frame across all views as a PNC1 tensor with dims (V, H, W, 3).
fn write_frame_pnc1(path: &Path, video: &PixelVideo, t: usize) -> CliResult<()> {
    let [views, _, height, width, ch] = video.dims();
    let mut data = Vec::with_capacity(views * height * width * ch);
    for v in 0..views {
        data.extend(video.frame(v, t).iter().map(|&x| x as f32));
    }
    pnc1::write(path, &[views, height, width, ch], &data).map_err(|e| pnc1_fail(path, e))
}

/// Panoramic preview: all views side by side, 8-bit binary PPM.
fn write_frame_ppm(path: &Path, video: &PixelVideo, t: usize) -> CliResult<()> {
    let [views, _, height, width, ch] = video.dims();
    let pano_w = views * width;
    let mut bytes = format!("P6\n{pano_w} {height}\n255\n").into_bytes();
    bytes.reserve(pano_w * height * 3);
    for y in 0..height {
        for v in 0..views {
            let frame = video.frame(v, t);
            for x in 0..width {
                for c in 0..3 {
                    let val = frame[(y * width + x) * ch + c];
                    bytes.push((val.clamp(0.0, 1.0) * 255.0).round() as u8);
                }
            }
        }
    }
    fs::write(path, bytes).map_err(|e| io_fail(path, e))
}

/// Reads a directory of frame PNC1 tensors, sorted by name, into a
/// (V, T, H, W, 3) video.
fn read_video_dir(dir: &Path) -> CliResult<PixelVideo> {
    let entries = fs::read_dir(dir).map_err(|e| io_fail(dir, e))?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "pnc1"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Failure::new(
            EXIT_CONFIG,
            format!("{}: no .pnc1 frames found", dir.display()),
        ));
    }
    let mut video: Option<PixelVideo> = None;
    for (t, path) in paths.iter().enumerate() {
        let (dims, data) = pnc1::read(path).map_err(|e| pnc1_fail(path, e))?;
        let [views, height, width, ch] = dims[..] else {
            return Err(Failure::new(
                EXIT_CONFIG,
                format!("{}: expected 4-d frame tensor, got {dims:?}", path.display()),
            ));
        };
        if ch != 3 {
            return Err(Failure::new(
                EXIT_CONFIG,
                format!("{}: expected 3 channels, got {ch}", path.display()),
            ));
        }
        let video = video.get_or_insert_with(|| {
            PixelVideo::zeros(views, paths.len(), height, width)
        });
        if video.dims()[0] != views || video.dims()[2] != height || video.dims()[3] != width {
            return Err(Failure::new(
                EXIT_CONFIG,
                format!("{}: frame dims differ from the first frame", path.display()),
            ));
        }
        let per_view = height * width * 3;
        for v in 0..views {
            let dst = video.frame_mut(v, t);
            for (i, &x) in data[v * per_view..(v + 1) * per_view].iter().enumerate() {
                dst[i] = x as f64;
            }
        }
    }
    Ok(video.expect("paths is non-empty"))
}

fn cmd_render_layout(
    scene: &Path,
    out: &Path,
    width: usize,
    height: usize,
    dmax: f64,
) -> CliResult<()> {
    if width == 0 || height == 0 || !(dmax > 0.0) {
        return Err(Failure::new(
            EXIT_CONFIG,
            "width/height must be positive and dmax > 0",
        ));
    }
    let scene = load_scene(scene)?;
    let control = layout::render_sequence(&scene, width, height, dmax, &Palette::default())
        .map_err(|e| Failure::new(EXIT_CONFIG, e.to_string()))?;
    let [v, t, h, w, c] = control.dims();
    pnc1::write(out, &[v, t, h, w, c], &control.data).map_err(|e| pnc1_fail(out, e))?;
    println!("wrote {} dims ({v}, {t}, {h}, {w}, {c})", out.display());
    Ok(())
}

fn cmd_train(stage: u8, scenes: &Path, config: &Path, out: &Path) -> CliResult<()> {
    let config = load_config(config)?;
    let scenes = load_scene_dir(scenes)?;
    let (weights, history) = match stage {
        1 => pipeline::train_stage1(&scenes, &config),
        _ => pipeline::train_stage2(&scenes, &config),
    }
    .map_err(pipeline_fail)?;
    fs::create_dir_all(out).map_err(|e| io_fail(out, e))?;
    save_checkpoint(out, &weights).map_err(|e| ckpt_fail(out, e))?;
    let mut csv = String::from("step,loss\n");
    for (i, loss) in history.iter().enumerate() {
        csv.push_str(&format!("{i},{loss}\n"));
    }
    let csv_path = out.join("loss.csv");
    fs::write(&csv_path, csv).map_err(|e| io_fail(&csv_path, e))?;
    println!(
        "stage {stage}: {} steps, loss {} -> {}",
        history.len(),
        history.first().unwrap(),
        history.last().unwrap()
    );
    println!("checkpoint written to {}", out.display());
    Ok(())
}

fn cmd_generate(
    scene: &Path,
    ckpt1: &Path,
    ckpt2: &Path,
    config: &Path,
    out: &Path,
    sr: Option<SrArg>,
) -> CliResult<()> {
    let mut config = load_config(config)?;
    if let Some(sr) = sr {
        config.sr = sr.into();
    }
    let scene = load_scene(scene)?;
    let w1 = load_weights(ckpt1)?;
    let w2 = load_weights(ckpt2)?;
    let result = pipeline::generate(&scene, &w1, &w2, &config, None).map_err(pipeline_fail)?;
    fs::create_dir_all(out).map_err(|e| io_fail(out, e))?;
    let frames = result.video.dims()[1];
    for t in 0..frames {
        write_frame_pnc1(&out.join(format!("frame_{t:03}.pnc1")), &result.video, t)?;
        write_frame_ppm(&out.join(format!("preview_{t:03}.ppm")), &result.video, t)?;
    }
    let log_path = out.join("run.json");
    let log = serde_json::to_string_pretty(&result.log).expect("log serializes");
    fs::write(&log_path, log).map_err(|e| io_fail(&log_path, e))?;
    let [v, _, h, w, _] = result.video.dims();
    println!(
        "lambda_infer={} steps={} seed={}",
        result.log.lambda_infer, result.log.steps, result.log.seed
    );
    println!("wrote {frames} frames x {v} views at {w}x{h} to {}", out.display());
    Ok(())
}

fn cmd_oracle_check(trials: usize, seed: u64, grad_params: usize, inject: bool) -> CliResult<()> {
    if trials < 1 || grad_params < 1 {
        return Err(Failure::new(EXIT_CONFIG, "trials and grad-params must be >= 1"));
    }
    let fault = inject.then_some(Fault::PerturbIntraKernel);
    let attn = check::attention_oracle_suite(trials, seed, fault);
    println!(
        "attention kernels: {} trials, max deviation {:.3e} (tol {:e})",
        attn.trials, attn.max_kernel_dev, check::ATTN_TOL
    );
    println!(
        "attention gradients: max relative error {:.3e} (tol {:e})",
        attn.max_grad_rel,
        check::ATTN_FD_TOL
    );
    let grad = check::denoiser_gradient_suite(grad_params, seed);
    println!(
        "denoiser gradients: {} parameters, max relative error {:.3e} (tol {:e})",
        grad.checks.len(),
        grad.max_rel,
        check::GRAD_REL_TOL
    );
    let mut failures = attn.failures.clone();
    failures.extend(grad.failures.iter().cloned());
    if failures.is_empty() {
        println!("all checks passed");
        return Ok(());
    }
    for (kind, n) in check::failure_histogram(&failures) {
        eprintln!("{n} failure(s) of kind {kind}");
    }
    for f in &failures {
        eprintln!("FAIL [{}] seed {}: {}", f.kind, f.seed, f.detail);
    }
    eprintln!("replay a failing seed with: oracle-check --trials 1 --seed <seed>");
    Err(Failure::new(
        EXIT_CHECK,
        format!("{} check failure(s)", failures.len()),
    ))
}

/// Parses the comma-separated lambda list; duplicates are dropped with a
/// warning, first occurrence wins, order preserved.
fn parse_lambdas(text: &str) -> CliResult<Vec<f64>> {
    let mut out: Vec<f64> = Vec::new();
    for part in text.split(',') {
        let part = part.trim();
        if part.is_empty() {
            continue;
        }
        let v: f64 = part.parse().map_err(|_| {
            Failure::new(EXIT_CONFIG, format!("bad lambda value: {part:?}"))
        })?;
        if !v.is_finite() || v < 0.0 {
            return Err(Failure::new(
                EXIT_CONFIG,
                format!("lambda must be a non-negative real, got {part}"),
            ));
        }
        if out.iter().any(|&x| x == v) {
            eprintln!("warning: duplicate lambda {part} ignored");
            continue;
        }
        out.push(v);
    }
    if out.is_empty() {
        return Err(Failure::new(EXIT_CONFIG, "empty lambda list"));
    }
    Ok(out)
}

fn cmd_ablate_lambda(
    lambdas: &str,
    scene: &Path,
    ckpt1: &Path,
    ckpt2: &Path,
    config: &Path,
    out: &Path,
) -> CliResult<()> {
    let lambdas = parse_lambdas(lambdas)?;
    let base = load_config(config)?;
    let scene = load_scene(scene)?;
    let w1 = load_weights(ckpt1)?;
    let w2 = load_weights(ckpt2)?;

    // Reference statistics come from the synthetic ground-truth frames
    // of the same scene window the sampler is conditioned on.
    let codec = forge_core::codec::LatentCodec::new(
        forge_core::codec::DEFAULT_FACTOR,
        forge_core::codec::DEFAULT_LATENT_CHANNELS,
    );
    let example =
        pipeline::prepare_example(&scene, &base, &codec, &pipeline::default_denoiser_config())
            .map_err(pipeline_fail)?;
    let extractor = PooledGray::default();

    let mut csv = String::from("lambda,fd,temporal_consistency,seam\n");
    for lambda in &lambdas {
        let cfg = RunConfig {
            lambda_infer: *lambda,
            ..base.clone()
        };
        let result = pipeline::generate(&scene, &w1, &w2, &cfg, None).map_err(pipeline_fail)?;
        let report = evaluate(&result.video, &example.frames, &extractor).map_err(metrics_fail)?;
        let row = format!(
            "{lambda},{},{},{}",
            report.fd, report.temporal_consistency, report.seam
        );
        println!("{row}");
        csv.push_str(&row);
        csv.push('\n');
    }
    fs::write(out, csv).map_err(|e| io_fail(out, e))?;
    println!("wrote {} rows to {}", lambdas.len(), out.display());
    Ok(())
}

fn cmd_metrics(generated: &Path, reference: &Path, out: Option<&Path>) -> CliResult<()> {
    let gen_video = read_video_dir(generated)?;
    let ref_video = read_video_dir(reference)?;
    let report = evaluate(&gen_video, &ref_video, &PooledGray::default()).map_err(metrics_fail)?;
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    println!("{json}");
    if let Some(path) = out {
        fs::write(path, json).map_err(|e| io_fail(path, e))?;
    }
    Ok(())
}

fn run(cli: Cli) -> CliResult<()> {
    match &cli.cmd {
        Cmd::RenderLayout {
            scene,
            out,
            width,
            height,
            dmax,
        } => cmd_render_layout(scene, out, *width, *height, *dmax),
        Cmd::Train {
            stage,
            scenes,
            config,
            out,
        } => cmd_train(*stage, scenes, config, out),
        Cmd::Generate {
            scene,
            ckpt1,
            ckpt2,
            config,
            out,
            sr,
        } => cmd_generate(scene, ckpt1, ckpt2, config, out, *sr),
        Cmd::OracleCheck {
            trials,
            seed,
            grad_params,
            inject_fault,
        } => cmd_oracle_check(*trials, *seed, *grad_params, *inject_fault),
        Cmd::AblateLambda {
            lambdas,
            scene,
            ckpt1,
            ckpt2,
            config,
            out,
        } => cmd_ablate_lambda(lambdas, scene, ckpt1, ckpt2, config, out),
        Cmd::Metrics {
            generated,
            reference,
            out,
        } => cmd_metrics(generated, reference, out.as_deref()),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}
