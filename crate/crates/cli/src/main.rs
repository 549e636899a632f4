//! `stereotap`: simulate stereo sequences, calibrate, track, evaluate, sweep and benchmark.

mod manifest;

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, CommandFactory, Parser, Subcommand};
use serde::Serialize;

use manifest::RunManifest;
use stereotap::adapter::{AdapterServer, TrackerBackend};
use stereotap::calibration::{self, TransformFile};
use stereotap::evaluation::{self, SweepConfig, DEFAULT_GRID_SIZES, DENSITY_VELOCITY_MM_S};
use stereotap::pipeline::{self, PipelineConfig};
use stereotap::sequence::{self, FrameSource, SequenceReader, StereoSequence};
use stereotap::simulator::{self, Axes, Mask, ScenePreset, Trajectory, TrajectoryParams};
use stereotap::trackers::TrackerConfig;

/// Raised for bad flag combinations clap cannot see; exits with status 2.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage<T>(msg: impl Into<String>) -> Result<T> {
    Err(UsageError(msg.into()).into())
}

#[derive(Parser, Debug)]
#[command(name = "stereotap", version, about = "Markerless 3D point tracking from rectified stereo video")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a synthetic stereo sequence with ground truth.
    Simulate(SimulateArgs),
    /// Generate camera/robot correspondences for calibration.
    CalibSet(CalibSetArgs),
    /// Fit the camera-to-robot affine transform.
    Calibrate(CalibrateArgs),
    /// Track the target through a sequence.
    Track(TrackArgs),
    /// Compare a tracked path against ground truth.
    Evaluate(EvaluateArgs),
    /// Run a velocity or grid-density sweep on synthetic scenes.
    Sweep(SweepArgs),
    /// Measure pipeline throughput.
    Bench(BenchArgs),
    /// Serve the reference tracker over the adapter protocol on stdin/stdout.
    AdapterServe(AdapterServeArgs),
    /// Re-run a command from its manifest.
    Replay { manifest: PathBuf },
}

fn positive(s: &str) -> Result<f64, String> {
    match s.parse::<f64>() {
        Ok(v) if v.is_finite() && v > 0.0 => Ok(v),
        Ok(v) => Err(format!("{v} is not positive")),
        Err(e) => Err(e.to_string()),
    }
}

fn non_negative(s: &str) -> Result<f64, String> {
    match s.parse::<f64>() {
        Ok(v) if v.is_finite() && v >= 0.0 => Ok(v),
        Ok(v) => Err(format!("{v} is negative")),
        Err(e) => Err(e.to_string()),
    }
}

fn preset(s: &str) -> Result<ScenePreset, String> {
    ScenePreset::by_name(s).ok_or_else(|| format!("unknown preset '{s}' (expected {})", ScenePreset::NAMES.join(", ")))
}

fn disparity_range(s: &str) -> Result<(u32, u32), String> {
    let (a, b) = s.split_once(':').ok_or("expected MIN:MAX")?;
    Ok((a.parse().map_err(|e| format!("{e}"))?, b.parse().map_err(|e| format!("{e}"))?))
}

#[derive(Debug, Clone, Serialize)]
struct Velocities(Vec<f64>);

#[derive(Debug, Clone, Serialize)]
struct GridSizes(Vec<usize>);

/// `10..80:10` (inclusive range with step) or a comma list `10,20,40`.
fn velocities(s: &str) -> Result<Velocities, String> {
    let out: Vec<f64> = if let Some((range, step)) = s.split_once(':') {
        let (a, b) = range.split_once("..").ok_or("expected START..END:STEP")?;
        let (a, b, step) = (positive(a)?, positive(b)?, positive(step)?);
        if b < a {
            return Err(format!("empty range {a}..{b}"));
        }
        let n = ((b - a) / step + 1e-9).floor() as usize;
        (0..=n).map(|k| a + step * k as f64).collect()
    } else {
        s.split(',').map(|v| positive(v.trim())).collect::<Result<_, _>>()?
    };
    if out.is_empty() {
        return Err("no velocities".into());
    }
    Ok(Velocities(out))
}

fn grid_sizes(s: &str) -> Result<GridSizes, String> {
    s.split(',')
        .map(|g| match g.trim().parse::<usize>() {
            Ok(n) if (1..=10).contains(&n) => Ok(n),
            Ok(n) => Err(format!("grid size {n} outside 1..=10")),
            Err(e) => Err(e.to_string()),
        })
        .collect::<Result<_, _>>()
        .map(GridSizes)
}

#[derive(Args, Debug, Clone, Serialize)]
struct SceneArgs {
    #[arg(long, value_parser = preset, default_value = "feature-rich")]
    preset: ScenePreset,
    /// Override the preset image size (principal point stays centred).
    #[arg(long)]
    width: Option<u32>,
    #[arg(long)]
    height: Option<u32>,
}

impl SceneArgs {
    fn resolve(&self) -> Result<ScenePreset> {
        let p = self.preset.clone();
        match (self.width, self.height) {
            (None, None) => Ok(p),
            (Some(w), Some(h)) if w > 0 && h > 0 => Ok(p.with_size(w, h)),
            _ => usage("--width and --height go together and must be positive"),
        }
    }
}

#[derive(Args, Debug, Clone, Serialize)]
struct TrackerArgs {
    /// Template half-size, pixels.
    #[arg(long, default_value_t = TrackerConfig::default().template_radius)]
    template_radius: usize,
    /// Temporal search radius, pixels per frame.
    #[arg(long, default_value_t = TrackerConfig::default().search_radius)]
    search_radius: usize,
    /// Stereo disparity search range MIN:MAX, pixels.
    #[arg(long, value_parser = disparity_range, default_value = "1:200")]
    disparity: (u32, u32),
    #[arg(long, default_value_t = TrackerConfig::default().min_confidence)]
    min_confidence: f64,
}

impl TrackerArgs {
    fn config(&self) -> Result<TrackerConfig> {
        let c = TrackerConfig {
            template_radius: self.template_radius,
            search_radius: self.search_radius,
            stereo_disparity_range: self.disparity,
            min_confidence: self.min_confidence,
        };
        c.validate().map_err(|e| UsageError(e.to_string()))?;
        Ok(c)
    }
}

#[derive(Args, Debug, Clone, Serialize)]
struct PipelineArgs {
    /// Points per side of the query grid.
    #[arg(long, default_value_t = 3)]
    grid: usize,
    /// Side of the square, centred on the first frame, that the grid spans.
    #[arg(long, default_value_t = 100)]
    template_px: u32,
    #[arg(long, default_value_t = 8)]
    window: usize,
    #[arg(long, default_value_t = 4)]
    stride: usize,
    /// Run stereo matching every N-th frame, reusing disparities in between.
    #[arg(long, default_value_t = 1)]
    stereo_every: usize,
    #[command(flatten)]
    tracker: TrackerArgs,
}

impl PipelineArgs {
    fn config(&self) -> Result<PipelineConfig> {
        let c = PipelineConfig {
            template_px: self.template_px,
            grid_n: self.grid,
            window: self.window,
            stride: self.stride,
            rig: None,
            stereo_every: self.stereo_every,
            tracker: self.tracker.config()?,
        };
        c.validate().map_err(|e| UsageError(e.to_string()))?;
        Ok(c)
    }
}

#[derive(Args, Debug, Serialize)]
struct SimulateArgs {
    #[command(flatten)]
    scene: SceneArgs,
    /// Target speed, mm/s.
    #[arg(long, value_parser = positive, default_value = "10", conflicts_with = "stationary")]
    velocity: f64,
    #[arg(long, default_value = "xyz")]
    axes: Axes,
    /// Sequence length, seconds.
    #[arg(long, value_parser = positive, default_value = "30")]
    duration: f64,
    /// Edge of the workspace cube, mm.
    #[arg(long, value_parser = positive, default_value = "30")]
    cube: f64,
    /// Keep the target still.
    #[arg(long)]
    stationary: bool,
    /// Raw width×height u8 occlusion mask (values below 128 hide the target).
    #[arg(long)]
    mask: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output prefix; writes PREFIX.ssq and PREFIX_gt.csv.
    #[arg(short, long)]
    out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct CalibSetArgs {
    #[arg(long, default_value_t = 125)]
    n: usize,
    /// 3D RMS noise on the camera-frame points, mm.
    #[arg(long, value_parser = non_negative, default_value = "0.1")]
    noise: f64,
    #[arg(long, value_parser = positive, default_value = "30")]
    cube: f64,
    #[arg(long, value_parser = positive, default_value = "100")]
    working_distance: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Correspondence CSV; the generating transform goes to <stem>_truth.json.
    #[arg(short, long)]
    out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct CalibrateArgs {
    /// Correspondence CSV (cam_x,cam_y,cam_z,rob_x,rob_y,rob_z).
    #[arg(long = "in")]
    input: PathBuf,
    /// Fraction of correspondences held out for validation.
    #[arg(long, value_parser = non_negative, default_value = "0")]
    holdout: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Transform JSON.
    #[arg(short, long)]
    out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct TrackArgs {
    sequence: PathBuf,
    /// `reference` or `adapter:<path-to-executable>`.
    #[arg(long, default_value = "reference")]
    tracker: String,
    /// Extra argument passed to the adapter process (repeatable).
    #[arg(long = "adapter-arg", allow_hyphen_values = true)]
    adapter_args: Vec<String>,
    #[command(flatten)]
    pipeline: PipelineArgs,
    /// Tracked-path CSV.
    #[arg(short, long)]
    out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct EvaluateArgs {
    /// Tracked-path CSV.
    #[arg(long)]
    tracked: PathBuf,
    /// Ground-truth CSV.
    #[arg(long)]
    truth: PathBuf,
    /// Camera-to-robot transform JSON applied to the tracked path.
    #[arg(long, conflicts_with = "sequence")]
    transform: Option<PathBuf>,
    /// Take the camera-to-robot transform from this sequence's metadata.
    #[arg(long)]
    sequence: Option<PathBuf>,
    #[arg(long, default_value = "xyz")]
    axes: Axes,
    /// Interpolate truth at the tracked timestamps instead of requiring equal lengths.
    #[arg(long)]
    resample: bool,
    /// Metrics JSON.
    #[arg(short, long)]
    out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct SweepArgs {
    #[arg(long, default_value = "xyz")]
    stage: Axes,
    /// `START..END:STEP` or a comma list, mm/s.
    #[arg(long, value_parser = velocities, default_value = "10..80:10")]
    velocities: Velocities,
    /// Trajectories per velocity (or per grid size).
    #[arg(long, default_value_t = 3)]
    trials: usize,
    /// Sweep grid density at `--velocity` instead of velocities.
    #[arg(long, value_parser = grid_sizes, num_args = 0..=1, default_missing_value = "1,2,3,4,5,6,8,10")]
    grid_sizes: Option<GridSizes>,
    /// Velocity of a density sweep, mm/s.
    #[arg(long, value_parser = positive, default_value_t = DENSITY_VELOCITY_MM_S)]
    velocity: f64,
    #[command(flatten)]
    scene: SceneArgs,
    #[arg(long, value_parser = positive, default_value = "30")]
    duration: f64,
    #[arg(long, value_parser = positive, default_value = "30")]
    cube: f64,
    #[command(flatten)]
    pipeline: PipelineArgs,
    /// Worker threads; 0 uses every core.
    #[arg(long, default_value_t = 0)]
    jobs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write each cell's tracked path and ground truth here.
    #[arg(long)]
    dump_frames: Option<PathBuf>,
    /// Sweep CSV; a JSON mirror goes beside it.
    #[arg(short, long)]
    out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct BenchArgs {
    /// Sequence to replay; a stationary synthetic scene is rendered when omitted.
    sequence: Option<PathBuf>,
    #[command(flatten)]
    scene: SceneArgs,
    /// Frames of the synthetic scene.
    #[arg(long, default_value_t = 300)]
    frames: usize,
    #[arg(long, default_value_t = 30)]
    warmup: usize,
    #[arg(long, default_value = "reference")]
    tracker: String,
    #[arg(long = "adapter-arg", allow_hyphen_values = true)]
    adapter_args: Vec<String>,
    #[command(flatten)]
    pipeline: PipelineArgs,
    /// Report JSON.
    #[arg(short, long)]
    out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct AdapterServeArgs {
    #[command(flatten)]
    tracker: TrackerArgs,
}

fn main() -> ExitCode {
    let argv: Vec<String> = std::env::args().collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => {
            let _ = e.print();
            let mut cmd = Cli::command();
            cmd.build();
            let usage = match argv.get(1).and_then(|name| cmd.find_subcommand_mut(name)) {
                Some(sub) => sub.render_usage(),
                None => cmd.render_usage(),
            };
            if !e.to_string().contains("Usage:") {
                eprintln!("\n{usage}");
            }
            return ExitCode::from(2);
        }
    };
    match dispatch(cli, &argv[1..]) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.is::<UsageError>() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}

fn dispatch(cli: Cli, args: &[String]) -> Result<()> {
    let started = chrono::Utc::now();
    match cli.command {
        Command::Simulate(a) => simulate(a, RunManifest::new("simulate", args, started)?),
        Command::CalibSet(a) => calib_set(a, RunManifest::new("calib-set", args, started)?),
        Command::Calibrate(a) => calibrate(a, RunManifest::new("calibrate", args, started)?),
        Command::Track(a) => track(a, RunManifest::new("track", args, started)?),
        Command::Evaluate(a) => evaluate(a, RunManifest::new("evaluate", args, started)?),
        Command::Sweep(a) => sweep(a, RunManifest::new("sweep", args, started)?),
        Command::Bench(a) => bench(a, RunManifest::new("bench", args, started)?),
        Command::AdapterServe(a) => {
            let config = a.tracker.config()?;
            AdapterServer::new(config).serve(std::io::stdin().lock(), std::io::stdout().lock())?;
            Ok(())
        }
        Command::Replay { manifest } => replay(&manifest),
    }
}

fn replay(path: &Path) -> Result<()> {
    let m = RunManifest::read(path)?;
    if m.argv.first().is_some_and(|c| c == "replay") {
        bail!("refusing to replay a replay");
    }
    std::env::set_current_dir(&m.cwd).with_context(|| format!("entering {}", m.cwd.display()))?;
    let argv: Vec<String> = std::iter::once("stereotap".to_string()).chain(m.argv.iter().cloned()).collect();
    let cli = Cli::try_parse_from(&argv).map_err(|e| UsageError(format!("manifest arguments no longer parse: {e}")))?;
    eprintln!("replaying: stereotap {}", m.argv.join(" "));
    dispatch(cli, &argv[1..])
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

fn open(path: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::new(File::open(path).with_context(|| format!("opening {}", path.display()))?))
}

fn with_suffix(prefix: &Path, suffix: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn simulate(a: SimulateArgs, m: RunManifest) -> Result<()> {
    let preset = a.scene.resolve()?;
    let traj = if a.stationary {
        Trajectory::stationary((a.duration * preset.fps).round() as usize + 1, preset.fps)
    } else {
        let params = TrajectoryParams { seed: a.seed, velocity_mm_s: a.velocity, duration_s: a.duration, cube_mm: a.cube, axes: a.axes, fps: preset.fps };
        params.validate().map_err(|e| UsageError(e.to_string()))?;
        simulator::gen_trajectory(params)?
    };
    let mask = a.mask.as_deref().map(|p| Mask::load(p, preset.width, preset.height)).transpose()?;
    let seq_path = with_suffix(&a.out, ".ssq");
    let gt_path = with_suffix(&a.out, "_gt.csv");
    let scene = simulator::render_sequence(&preset, &traj, mask)?;
    if let Some(dir) = seq_path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    sequence::write_sequence(&scene, &seq_path).with_context(|| format!("writing {}", seq_path.display()))?;
    simulator::write_ground_truth(create(&gt_path)?, &simulator::ground_truth(&traj))?;
    eprintln!("wrote {} ({} frames) and {}", seq_path.display(), scene.len(), gt_path.display());

    #[derive(Serialize)]
    struct Resolved<'a> {
        args: &'a SimulateArgs,
        preset: &'a ScenePreset,
        trajectory: &'a TrajectoryParams,
    }
    let mut m = m.config(&Resolved { args: &a, preset: &preset, trajectory: &traj.params })?.seed(a.seed);
    if let Some(p) = &a.mask {
        m = m.input(p);
    }
    m.output(&seq_path).output(&gt_path).write_beside(&seq_path)?;
    Ok(())
}

fn calib_set(a: CalibSetArgs, m: RunManifest) -> Result<()> {
    let set = simulator::gen_calibration_set(a.seed, a.n, a.noise, a.cube, a.working_distance).map_err(|e| UsageError(e.to_string()))?;
    calibration::write_correspondences(create(&a.out)?, &set.correspondences)?;
    let truth_path = a.out.with_file_name(format!("{}_truth.json", a.out.file_stem().unwrap_or_default().to_string_lossy()));
    let mut w = create(&truth_path)?;
    serde_json::to_writer_pretty(&mut w, &set.camera_to_robot)?;
    writeln!(w)?;
    w.flush()?;
    eprintln!("wrote {} correspondences to {}", set.correspondences.len(), a.out.display());
    m.config(&a)?.seed(a.seed).output(&a.out).output(&truth_path).write_beside(&a.out)?;
    Ok(())
}

fn calibrate(a: CalibrateArgs, m: RunManifest) -> Result<()> {
    if a.holdout >= 1.0 {
        return usage("--holdout must be below 1");
    }
    let corrs = calibration::read_correspondences(open(&a.input)?).with_context(|| format!("reading {}", a.input.display()))?;
    let report = calibration::fit_with_holdout(&corrs, a.holdout, a.seed)?;
    let file = TransformFile::from(&report);
    let mut w = create(&a.out)?;
    serde_json::to_writer_pretty(&mut w, &file)?;
    writeln!(w)?;
    w.flush()?;
    eprintln!(
        "fit on {} points: residual {:.4} ± {:.4} mm (max {:.4})",
        report.residual.n, report.residual.mean_mm, report.residual.std_mm, report.residual.max_mm
    );
    if let Some(h) = report.holdout {
        eprintln!("holdout on {} points: {:.4} ± {:.4} mm (max {:.4})", h.n, h.mean_mm, h.std_mm, h.max_mm);
    }
    m.config(&a)?.seed(a.seed).input(&a.input).output(&a.out).write_beside(&a.out)?;
    Ok(())
}

/// Resolves `--tracker`; STEREOTAP_ADAPTER, when set, replaces the adapter path.
fn backend(spec: &str, extra_args: &[String]) -> Result<TrackerBackend> {
    let env = std::env::var_os("STEREOTAP_ADAPTER").filter(|v| !v.is_empty()).map(PathBuf::from);
    let parsed = match (spec, &env) {
        ("adapter", Some(p)) => TrackerBackend::Adapter { program: p.clone(), args: Vec::new() },
        _ => TrackerBackend::parse(spec).map_err(UsageError)?,
    };
    Ok(match parsed {
        TrackerBackend::Adapter { program, .. } => TrackerBackend::Adapter { program: env.unwrap_or(program), args: extra_args.to_vec() },
        TrackerBackend::Reference if !extra_args.is_empty() => return usage("--adapter-arg needs an adapter tracker"),
        r => r,
    })
}

fn track(a: TrackArgs, m: RunManifest) -> Result<()> {
    let config = a.pipeline.config()?;
    let backend = backend(&a.tracker, &a.adapter_args)?;
    let reader = SequenceReader::open(&a.sequence).with_context(|| format!("reading {}", a.sequence.display()))?;
    let mut tracker = backend.open(&config.tracker, &a.sequence, reader.info(), config.window)?;
    let (path, stats) = pipeline::run(&reader, &config, tracker.as_mut())?;
    drop(tracker);
    pipeline::write_tracked_csv(create(&a.out)?, &path)?;
    let errors = path.frames.iter().filter(|f| f.flags.tracker_error).count();
    eprintln!(
        "tracked {} frames in {:.2} s ({:.1} fps); {} frames lost, {} tracker errors",
        stats.frames,
        stats.total.as_secs_f64(),
        stats.fps(),
        path.lost_frames(),
        errors
    );

    #[derive(Serialize)]
    struct Resolved<'a> {
        args: &'a TrackArgs,
        backend: &'a TrackerBackend,
        pipeline: &'a PipelineConfig,
    }
    m.config(&Resolved { args: &a, backend: &backend, pipeline: &config })?
        .input(&a.sequence)
        .output(&a.out)
        .write_beside(&a.out)?;
    Ok(())
}

fn evaluate(a: EvaluateArgs, m: RunManifest) -> Result<()> {
    let tracked = pipeline::read_tracked_csv(open(&a.tracked)?).with_context(|| format!("reading {}", a.tracked.display()))?;
    let truth = simulator::read_ground_truth(open(&a.truth)?).with_context(|| format!("reading {}", a.truth.display()))?;
    let transform = match (&a.transform, &a.sequence) {
        (Some(p), _) => Some(calibration::read_transform_json(p).with_context(|| format!("reading {}", p.display()))?),
        (None, Some(s)) => {
            let reader = SequenceReader::open(s).with_context(|| format!("reading {}", s.display()))?;
            match reader.info().metadata.camera_to_robot {
                Some(t) => Some(t),
                None => bail!("{} carries no camera-to-robot transform", s.display()),
            }
        }
        (None, None) => None,
    };
    let report = evaluation::compare_paths(&tracked, &truth, transform.as_ref(), a.axes, a.resample)?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    evaluation::write_json(&a.out, &report)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    let mut m = m.config(&a)?.input(&a.tracked).input(&a.truth);
    for p in a.transform.iter().chain(&a.sequence) {
        m = m.input(p);
    }
    m.output(&a.out).write_beside(&a.out)?;
    Ok(())
}

fn sweep(a: SweepArgs, m: RunManifest) -> Result<()> {
    if a.trials == 0 {
        return usage("--trials must be at least 1");
    }
    let cfg = SweepConfig {
        preset: a.scene.resolve()?,
        pipeline: a.pipeline.config()?,
        duration_s: a.duration,
        cube_mm: a.cube,
        base_seed: a.seed,
        trials: a.trials,
        jobs: a.jobs,
        dump_dir: a.dump_frames.clone(),
    };
    let rows = match &a.grid_sizes {
        Some(g) => evaluation::run_density_sweep(&g.0, a.velocity, a.stage, &cfg),
        None => evaluation::run_stage_sweep(a.stage, &a.velocities.0, &cfg),
    }
    .map_err(|e| match e {
        evaluation::EvalError::InvalidParameter(msg) => UsageError(msg).into(),
        e => anyhow::Error::from(e),
    })?;
    evaluation::write_sweep_csv(create(&a.out)?, &rows)?;
    let json_path = a.out.with_extension("json");
    evaluation::write_json(&json_path, &rows)?;

    let failed = rows.iter().filter(|r| r.failed()).count();
    for (v, mean) in evaluation::mean_by_velocity(&rows) {
        eprintln!("{v:>6} mm/s: mean error {mean:.3} mm");
    }
    eprintln!("{} cells, {failed} failed; wrote {} and {}", rows.len(), a.out.display(), json_path.display());

    #[derive(Serialize)]
    struct Resolved<'a> {
        args: &'a SweepArgs,
        sweep: &'a SweepConfig,
        default_grid_sizes: &'a [usize],
    }
    let mut m = m.config(&Resolved { args: &a, sweep: &cfg, default_grid_sizes: &DEFAULT_GRID_SIZES })?;
    for r in &rows {
        m = m.seed(r.seed);
    }
    m = m.output(&a.out).output(&json_path);
    if let Some(d) = &a.dump_frames {
        m = m.output(d);
    }
    m.write_beside(&a.out)?;
    if !rows.is_empty() && failed == rows.len() {
        bail!("every sweep cell failed");
    }
    Ok(())
}

fn bench(a: BenchArgs, m: RunManifest) -> Result<()> {
    let config = a.pipeline.config()?;
    let backend = backend(&a.tracker, &a.adapter_args)?;
    if a.sequence.is_none() && !matches!(backend, TrackerBackend::Reference) {
        return usage("adapter benchmarks need a sequence file the adapter can read");
    }
    // Benchmarks run alone on one worker so cells never compete for cores.
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build()?;
    let (loaded, info) = match &a.sequence {
        Some(p) => {
            let s = sequence::read_sequence(p).with_context(|| format!("reading {}", p.display()))?;
            let info = s.info().clone();
            (s, info)
        }
        None => {
            let preset = a.scene.resolve()?;
            eprintln!("rendering {} stationary {}x{} frames", a.frames, preset.width, preset.height);
            let scene = simulator::render_sequence(&preset, &Trajectory::stationary(a.frames, preset.fps), None)?;
            let s = StereoSequence::collect(&scene)?;
            let info = s.info().clone();
            (s, info)
        }
    };
    let seq_path = a.sequence.clone().unwrap_or_default();
    let mut tracker = backend.open(&config.tracker, &seq_path, &info, config.window)?;
    let report = pool.install(|| evaluation::bench_throughput(&loaded, &config, tracker.as_mut(), a.warmup))?;
    drop(tracker);
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    evaluation::write_json(&a.out, &report)?;
    let ms = |d: Duration| d.as_secs_f64() * 1e3 / report.stats.frames.max(1) as f64;
    eprintln!(
        "{:.1} fps over {} frames after {} warm-up ({} points); per frame: temporal {:.2} ms, stereo {:.2} ms, fusion {:.3} ms",
        report.fps,
        report.frames,
        report.warmup_frames,
        config.grid_n * config.grid_n,
        ms(report.stats.temporal),
        ms(report.stats.stereo),
        ms(report.stats.fusion)
    );

    #[derive(Serialize)]
    struct Resolved<'a> {
        args: &'a BenchArgs,
        pipeline: &'a PipelineConfig,
        jobs: usize,
    }
    let mut m = m.config(&Resolved { args: &a, pipeline: &config, jobs: 1 })?;
    if let Some(p) = &a.sequence {
        m = m.input(p);
    }
    m.output(&a.out).write_beside(&a.out)?;
    Ok(())
}
