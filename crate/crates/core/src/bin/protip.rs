use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};

use protip::eval::compare_to_gt;
use protip::keyval::KeyValues;
use protip::phantom::{default_phantom, rasterize_labelmap, PhantomSpec};
use protip::pipeline::{analyze_sweep, calibrate, evaluate_tips, PipelineConfig};
use protip::segment::MaskSource;
use protip::simulate::{simulate_pair, NoiseConfig, SimulationParams, SweepGroundTruth, TrackingNoise};
use protip::sweep::{ImagingGeometry, Sweep};
use protip::track::tips_tsv;
use protip::{Error, RigidTransform};

#[derive(Parser)]
#[command(name = "protip", version, about = "Automatic freehand ultrasound probe calibration with a cone phantom")]
struct Cli {
    /// Worker threads; results do not depend on it.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the phantom spec and its rasterized labelmap.
    Phantom(PhantomArgs),
    /// Simulate an axial and a sagittal tracked sweep.
    Simulate(SimulateArgs),
    /// Estimate the calibration from two sweeps.
    Calibrate(CalibrateArgs),
    /// Fiducial pair errors of a given calibration.
    Evaluate(EvaluateArgs),
}

#[derive(Args)]
struct PhantomArgs {
    #[arg(long)]
    out: PathBuf,
    /// Labelmap voxel size, mm.
    #[arg(long, default_value_t = 1.0)]
    spacing: f64,
    /// Phantom spec file, or `default`.
    #[arg(long, default_value = "default")]
    phantom: String,
}

#[derive(Clone, Copy, ValueEnum)]
enum GeometryKind {
    Linear,
    Convex,
}

#[derive(Args)]
struct SimulateArgs {
    /// Phantom spec file, or `default`.
    #[arg(long, default_value = "default")]
    phantom: String,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: u64,
    #[arg(long, default_value_t = 200)]
    frames: usize,
    /// Tracking noise as `mm,deg`.
    #[arg(long, value_parser = parse_pair)]
    tracking_noise: Option<(f64, f64)>,
    /// Speckle and noise level; 0 renders clean frames.
    #[arg(long, default_value_t = 0.0)]
    image_noise: f64,
    #[arg(long, value_enum, default_value_t = GeometryKind::Linear)]
    geometry: GeometryKind,
    /// Hidden calibration file; drawn from the seed when absent.
    #[arg(long)]
    calibration: Option<PathBuf>,
}

#[derive(Args)]
struct CalibrateArgs {
    #[arg(long)]
    sweep_a: PathBuf,
    #[arg(long)]
    sweep_b: PathBuf,
    /// `reference`, `true-labels` or `external:DIR`.
    #[arg(long)]
    seg: Option<String>,
    #[arg(long)]
    no_refine: bool,
    #[arg(long)]
    seed: Option<u64>,
    /// `key = value` pipeline configuration; flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Phantom used for the fiducial report, or `default`.
    #[arg(long, default_value = "default")]
    phantom: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    calibration: PathBuf,
    #[arg(long)]
    sweep_a: PathBuf,
    #[arg(long)]
    sweep_b: PathBuf,
    /// Phantom spec file, or `default`.
    #[arg(long, default_value = "default")]
    phantom: String,
    /// `reference`, `true-labels` or `external:DIR`.
    #[arg(long)]
    seg: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory for report.txt and pairs.tsv; stdout only when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_pair(s: &str) -> Result<(f64, f64), String> {
    let (a, b) = s.split_once(',').ok_or("expected `mm,deg`")?;
    let a = a.trim().parse::<f64>().map_err(|e| e.to_string())?;
    let b = b.trim().parse::<f64>().map_err(|e| e.to_string())?;
    Ok((a, b))
}

fn load_phantom(arg: &str) -> anyhow::Result<PhantomSpec> {
    if arg == "default" {
        return Ok(default_phantom());
    }
    Ok(PhantomSpec::load(Path::new(arg)).with_context(|| format!("loading phantom {arg}"))?)
}

fn write(path: &Path, text: &str) -> anyhow::Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn create_dir(path: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(path).with_context(|| format!("creating {}", path.display()))
}

fn pipeline_config(config: Option<&Path>, seg: Option<&str>, seed: Option<u64>) -> anyhow::Result<PipelineConfig> {
    let mut cfg = PipelineConfig::default();
    if let Some(path) = config {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let kv = KeyValues::parse(&text).with_context(|| format!("parsing {}", path.display()))?;
        cfg.apply_keyvalues(&kv).with_context(|| format!("applying {}", path.display()))?;
    }
    if let Some(seg) = seg {
        cfg = cfg.with_masks(seg.parse::<MaskSource>()?);
    }
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn read_sweep(dir: &Path) -> anyhow::Result<Sweep> {
    Ok(Sweep::read_dir(dir).with_context(|| format!("reading sweep {}", dir.display()))?)
}

fn read_ground_truth(dir: &Path) -> anyhow::Result<Option<SweepGroundTruth>> {
    let path = dir.join("groundtruth.txt");
    if !path.exists() {
        return Ok(None);
    }
    Ok(Some(SweepGroundTruth::read(&path).with_context(|| format!("reading {}", path.display()))?))
}

fn run_phantom(args: &PhantomArgs) -> anyhow::Result<()> {
    let spec = load_phantom(&args.phantom)?;
    create_dir(&args.out)?;
    write(&args.out.join("phantom.txt"), &spec.to_text())?;
    let volume = rasterize_labelmap(&spec, args.spacing).context("rasterizing labelmap")?;
    volume.write(&args.out, "labelmap").context("writing labelmap")?;
    log::info!("labelmap {:?} at {} mm", volume.dims, volume.spacing);
    Ok(())
}

fn run_simulate(args: &SimulateArgs) -> anyhow::Result<()> {
    let phantom = load_phantom(&args.phantom)?;
    let geometry = match args.geometry {
        GeometryKind::Linear => ImagingGeometry::default(),
        GeometryKind::Convex => ImagingGeometry::convex(128, 128, 1.0, 30.0, 90.0),
    };
    let calibration = match &args.calibration {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            Some(RigidTransform::from_text(&text).with_context(|| format!("parsing {}", p.display()))?)
        }
        None => None,
    };
    let (sigma_mm, sigma_deg) = args.tracking_noise.unwrap_or((0.0, 0.0));
    let params = SimulationParams {
        geometry,
        n_frames: args.frames,
        noise: if args.image_noise > 0.0 { NoiseConfig::level(args.image_noise) } else { NoiseConfig::none() },
        tracking_noise: TrackingNoise { sigma_mm, sigma_deg },
        calibration,
        seed: args.seed,
        ..Default::default()
    };
    let pair = simulate_pair(&phantom, &params).context("simulate")?;
    create_dir(&args.out)?;
    write(&args.out.join("phantom.txt"), &phantom.to_text())?;
    for (name, sweep, truth) in [
        ("axial", &pair.axial, &pair.axial_truth),
        ("sagittal", &pair.sagittal, &pair.sagittal_truth),
    ] {
        let dir = args.out.join(name);
        create_dir(&dir)?;
        sweep.write_dir(&dir).with_context(|| format!("writing sweep {}", dir.display()))?;
        truth.write(&dir.join("groundtruth.txt"))?;
    }
    write(&args.out.join("calibration_gt.txt"), &pair.calibration().to_text())?;
    Ok(())
}

fn run_calibrate(args: &CalibrateArgs) -> anyhow::Result<()> {
    let mut cfg = pipeline_config(args.config.as_deref(), args.seg.as_deref(), args.seed)?;
    if args.no_refine {
        cfg.refine_enabled = false;
    }
    let phantom = load_phantom(&args.phantom)?;
    let sweep_a = read_sweep(&args.sweep_a)?;
    let sweep_b = read_sweep(&args.sweep_b)?;
    let truth = read_ground_truth(&args.sweep_a)?;
    create_dir(&args.out)?;

    let run = calibrate(&sweep_a, &sweep_b, &cfg).context("calibrate")?;
    write(&args.out.join("calibration_initial.txt"), &run.initial().to_text())?;
    write(&args.out.join("calibration.txt"), &run.calibration().to_text())?;
    write(&args.out.join("tips_a.tsv"), &tips_tsv(&run.analysis_a.tips))?;
    write(&args.out.join("tips_b.tsv"), &tips_tsv(&run.analysis_b.tips))?;

    let mut kv = KeyValues::new();
    kv.push("seg_a", &cfg.masks_a);
    kv.push("seg_b", &cfg.masks_b);
    kv.push("seed", cfg.seed);
    for (k, v) in run.to_keyvalues().entries() {
        kv.push(k, v);
    }
    if let Some(gt) = &truth {
        for (name, c) in [("initial", run.initial()), ("final", run.calibration())] {
            let (t, r) = compare_to_gt(&c, &gt.calibration);
            kv.push(&format!("{name}_translation_error_mm"), format!("{t:.6}"));
            kv.push(&format!("{name}_rotation_error_deg"), format!("{r:.6}"));
        }
    }
    for (name, c) in [("initial", run.initial()), ("final", run.calibration())] {
        match evaluate_tips(&run.analysis_a, &sweep_a, &run.analysis_b, &sweep_b, &c, &phantom) {
            Ok(report) => {
                kv.push(&format!("{name}_median_pair_error_mm"), format!("{:.6}", report.median));
                kv.push(&format!("{name}_max_pair_error_mm"), format!("{:.6}", report.max));
                if name == "final" {
                    kv.push("identified_tips", report.n_tips_found);
                    write(&args.out.join("pairs.tsv"), &report.to_tsv())?;
                }
            }
            Err(e) => log::warn!("{name} fiducial report unavailable: {e}"),
        }
    }
    write(&args.out.join("report.txt"), &kv.to_text())?;
    print!("{}", run.calibration().to_text());
    Ok(())
}

fn run_evaluate(args: &EvaluateArgs) -> anyhow::Result<()> {
    let cfg = pipeline_config(args.config.as_deref(), args.seg.as_deref(), args.seed)?;
    let text = fs::read_to_string(&args.calibration)
        .with_context(|| format!("reading {}", args.calibration.display()))?;
    let c = RigidTransform::from_text(&text).with_context(|| format!("parsing {}", args.calibration.display()))?;
    let phantom = load_phantom(&args.phantom)?;
    let sweep_a = read_sweep(&args.sweep_a)?;
    let sweep_b = read_sweep(&args.sweep_b)?;
    let (a, b) = rayon::join(
        || analyze_sweep(&sweep_a, 0, &cfg.masks_a, &cfg),
        || analyze_sweep(&sweep_b, 1, &cfg.masks_b, &cfg),
    );
    let (a, b) = (a.context("evaluate: sweep A")?, b.context("evaluate: sweep B")?);
    let mut report = evaluate_tips(&a, &sweep_a, &b, &sweep_b, &c, &phantom).context("evaluate")?;
    if let Some(gt) = read_ground_truth(&args.sweep_a)? {
        report = report.with_pose_error(&c, &gt.calibration);
    }
    let text = report.to_keyvalues().to_text();
    if let Some(out) = &args.out {
        create_dir(out)?;
        write(&out.join("report.txt"), &text)?;
        write(&out.join("pairs.tsv"), &report.to_tsv())?;
    }
    print!("{text}");
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::NoConsensus) | Some(Error::DegenerateConfiguration(_)) => 2,
        Some(Error::InsufficientMatches { .. }) => 3,
        Some(Error::Format(_)) | Some(Error::Io { .. }) => 4,
        Some(Error::Coverage(_)) => 5,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = (|| -> anyhow::Result<()> {
        if let Some(jobs) = cli.jobs {
            if jobs == 0 {
                bail!("--jobs must be at least 1");
            }
            rayon::ThreadPoolBuilder::new()
                .num_threads(jobs)
                .build_global()
                .context("starting worker pool")?;
        }
        match &cli.command {
            Command::Phantom(a) => run_phantom(a),
            Command::Simulate(a) => run_simulate(a),
            Command::Calibrate(a) => run_calibrate(a),
            Command::Evaluate(a) => run_evaluate(a),
        }
    })();
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
