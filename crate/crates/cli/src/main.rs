use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};

use featslam::dataset::{generate_synthetic, FramePayload, PathKind, SceneConfig};
use featslam::evaluation::{align_trajectory, compute_ate, compute_rpe, trajectory_svg, MetricReport, RunMetrics, Trajectory, TrajectoryFormat};
use featslam::experiment::{path_fraction_lengths, run_experiment, write_atomic, RunConfig, SourceKind, EXIT_CONFIG};
use featslam::features::{Descriptor, FeatureFile, FeatureFrame};
use featslam::imaging::{distort_sequence, GammaParam};
use featslam::place_recognition::{train_vocabulary, validate_training, PlaceError};

#[derive(Parser)]
#[command(name = "featslam", version, about = "Monocular feature-based SLAM experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the pipeline over a sequence one or more times and evaluate each run.
    RunSlam(RunSlamArgs),
    /// Compare an estimated trajectory with a reference.
    Eval(EvalArgs),
    /// Apply a gamma curve to every image of a sequence directory.
    Distort(DistortArgs),
    /// Train a vocabulary tree from feature files.
    TrainVocab(TrainVocabArgs),
    /// Generate a synthetic sequence with ground truth and a ready-to-run config.
    Synth(SynthArgs),
}

#[derive(Args)]
struct RunSlamArgs {
    /// Dataset directory (KITTI or EuRoC layout) or the word `synthetic`.
    #[arg(long)]
    dataset: Option<String>,
    #[arg(long)]
    sequence: Option<String>,
    /// Precomputed feature file used instead of the built-in detector.
    #[arg(long)]
    features: Option<PathBuf>,
    #[arg(long)]
    vocab: Option<PathBuf>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    runs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// TOML run configuration; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    estimate: PathBuf,
    reference: PathBuf,
    /// Rigid alignment instead of similarity (for metric-scale estimates).
    #[arg(long)]
    rigid: bool,
    /// Comma-separated RPE segment lengths. Defaults to fractions of the path length.
    #[arg(long, value_delimiter = ',')]
    lengths: Vec<f64>,
    #[arg(long, default_value_t = 0.01)]
    tolerance: f64,
    /// Report file; the report is always printed.
    #[arg(long)]
    out: Option<PathBuf>,
    /// SVG plot of both trajectories in the xz plane.
    #[arg(long)]
    plot: Option<PathBuf>,
}

#[derive(Args)]
struct DistortArgs {
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// One or more gamma values; several produce one `gamma-<value>` subdirectory each.
    #[arg(long, required = true, num_args = 1.., allow_negative_numbers = true)]
    gamma: Vec<f64>,
}

#[derive(Args)]
struct TrainVocabArgs {
    /// Feature files forming the corpus, one document per frame.
    #[arg(long, required = true, num_args = 1..)]
    features: Vec<PathBuf>,
    #[arg(long, default_value_t = 10)]
    k: usize,
    #[arg(long, default_value_t = 6)]
    levels: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, required_unless_present = "validate_only")]
    out: Option<PathBuf>,
    /// Check parameters and corpus, then exit without training.
    #[arg(long)]
    validate_only: bool,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    /// TOML scene description; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_parser = parse_path_kind)]
    path: Option<PathKind>,
    #[arg(long)]
    frames: Option<usize>,
    #[arg(long)]
    landmarks: Option<usize>,
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    outliers: Option<f64>,
    /// Render images in a KITTI layout instead of writing features.
    #[arg(long)]
    render: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn parse_path_kind(s: &str) -> Result<PathKind, String> {
    match s {
        "line" => Ok(PathKind::Line),
        "arc" => Ok(PathKind::Arc),
        "loop" => Ok(PathKind::Loop),
        _ => Err(format!("unknown path {s:?}, expected line, arc or loop")),
    }
}

/// Error carrying the process exit code.
struct Failure {
    code: i32,
    error: anyhow::Error,
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        Self { code: 1, error: e.into() }
    }
}

fn config_failure(error: impl Into<anyhow::Error>) -> Failure {
    Failure {
        code: EXIT_CONFIG,
        error: error.into(),
    }
}

type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::RunSlam(a) => run_slam(a),
        Command::Eval(a) => eval(a),
        Command::Distort(a) => distort(a),
        Command::TrainVocab(a) => train_vocab(a),
        Command::Synth(a) => synth(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code.clamp(1, 255) as u8)
        }
    }
}

/// Guesses the layout of a dataset directory.
fn detect_source(path: &Path) -> Option<SourceKind> {
    if path.join("mav0").is_dir() {
        Some(SourceKind::Euroc)
    } else if path.join("sequences").is_dir() || path.join("image_0").is_dir() {
        Some(SourceKind::Kitti)
    } else {
        None
    }
}

fn run_slam(a: RunSlamArgs) -> CmdResult {
    let mut cfg = match &a.config {
        Some(p) => RunConfig::read(p).map_err(config_failure)?,
        None => RunConfig::default(),
    };
    match a.dataset.as_deref() {
        Some("synthetic") => {
            cfg.source = SourceKind::Synthetic;
            cfg.dataset = None;
        }
        Some(d) => {
            let path = PathBuf::from(d);
            cfg.source = detect_source(&path)
                .ok_or_else(|| config_failure(anyhow!("{d}: not a KITTI or EuRoC directory")))?;
            cfg.dataset = Some(path);
        }
        None => {}
    }
    if let Some(s) = a.sequence {
        cfg.sequence = s;
    }
    if a.features.is_some() {
        cfg.features = a.features;
    }
    if a.vocab.is_some() {
        cfg.vocab = a.vocab;
    }
    if a.gamma.is_some() {
        cfg.gamma = a.gamma;
    }
    if let Some(n) = a.runs {
        cfg.runs = n;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(o) = a.out {
        cfg.out = o;
    }
    let summary = run_experiment(&cfg).map_err(|e| Failure {
        code: e.exit_code(),
        error: e.into(),
    })?;
    for (run, path) in summary.runs.iter().zip(&summary.trajectory_files) {
        let status = match &run.metrics {
            Some(m) => format!("ate {:.6} coverage {:.3}", m.ate_rmse, m.coverage),
            None if run.initialized() => "not evaluated".to_string(),
            None => "never initialized".to_string(),
        };
        println!("seed {}: {} poses, {status} -> {}", run.seed, run.trajectory.len(), path.display());
    }
    match &summary.aggregate {
        Some(r) => print!("{}", r.to_text()),
        None => println!("no ground truth metrics"),
    }
    println!("report: {}", summary.report_file.display());
    Ok(())
}

fn eval(a: EvalArgs) -> CmdResult {
    let read = |p: &Path| Trajectory::read(p).with_context(|| p.display().to_string());
    let est = read(&a.estimate)?;
    let reference = read(&a.reference)?.0;
    let est = est.0;
    let ate = compute_ate(&est, &reference, !a.rigid, a.tolerance).context("absolute trajectory error")?;
    let lengths = if a.lengths.is_empty() {
        path_fraction_lengths(&reference)
    } else {
        a.lengths
    };
    let aligned = align_trajectory(&est, &ate.alignment);
    let rpe = if lengths.is_empty() {
        None
    } else {
        compute_rpe(&aligned, &reference, &lengths, a.tolerance).ok()
    };
    let report = MetricReport::single(RunMetrics {
        ate_rmse: ate.rmse,
        rpe_trans: rpe.as_ref().map(|r| r.trans_percent),
        rpe_rot: rpe.as_ref().map(|r| r.rot_deg_per_unit),
        coverage: ate.coverage,
    });
    let text = format!("associated: {}\nscale: {:.9}\n{}", ate.associated, ate.alignment.scale(), report.to_text());
    print!("{text}");
    if let Some(out) = &a.out {
        write_atomic(out, text.as_bytes()).with_context(|| out.display().to_string())?;
    }
    if let Some(plot) = &a.plot {
        let svg = trajectory_svg(&est, &reference, Some(&ate.alignment));
        write_atomic(plot, svg.as_bytes()).with_context(|| plot.display().to_string())?;
    }
    Ok(())
}

/// Builds `dest` in a staging directory and renames it into place.
fn stage_dir(dest: &Path, build: impl FnOnce(&Path) -> anyhow::Result<()>) -> anyhow::Result<()> {
    if dest.read_dir().is_ok_and(|mut d| d.next().is_some()) {
        return Err(anyhow!("{} already exists and is not empty", dest.display()));
    }
    let parent = dest.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(parent)?;
    let name = dest.file_name().ok_or_else(|| anyhow!("{}: no directory name", dest.display()))?;
    let staged = parent.join(format!(".{}.{}.tmp", name.to_string_lossy(), std::process::id()));
    let _ = std::fs::remove_dir_all(&staged);
    std::fs::create_dir_all(&staged)?;
    let result = build(&staged).and_then(|_| {
        if dest.is_dir() {
            std::fs::remove_dir(dest)?;
        }
        std::fs::rename(&staged, dest).with_context(|| dest.display().to_string())
    });
    if result.is_err() {
        let _ = std::fs::remove_dir_all(&staged);
    }
    result
}

fn distort(a: DistortArgs) -> CmdResult {
    let gammas = a
        .gamma
        .iter()
        .map(|&g| GammaParam::new(g))
        .collect::<Result<Vec<_>, _>>()
        .map_err(config_failure)?;
    if !a.input.is_dir() {
        return Err(config_failure(anyhow!("{}: not a directory", a.input.display())));
    }
    stage_dir(&a.out, |staged| {
        for g in &gammas {
            let dir = if gammas.len() == 1 {
                staged.to_path_buf()
            } else {
                staged.join(format!("gamma-{}", g.value()))
            };
            let n = distort_sequence(&a.input, &dir, *g)?;
            println!("gamma {}: {n} images", g.value());
        }
        Ok(())
    })?;
    Ok(())
}

fn train_vocab(a: TrainVocabArgs) -> CmdResult {
    let mut corpus: Vec<Vec<Descriptor>> = Vec::new();
    for path in &a.features {
        let file = FeatureFile::read(path)
            .with_context(|| path.display().to_string())
            .map_err(config_failure)?;
        corpus.extend(file.frames.into_iter().map(|f| f.descriptors));
    }
    let as_failure = |e: PlaceError| match e {
        PlaceError::InvalidParameters(_) | PlaceError::CorpusTooSmall { .. } | PlaceError::VariantMismatch(..) => {
            config_failure(e)
        }
        other => Failure::from(other),
    };
    let kind = validate_training(&corpus, a.k, a.levels).map_err(as_failure)?;
    let size: usize = corpus.iter().map(Vec::len).sum();
    if a.validate_only {
        println!(
            "valid: k={} levels={} corpus={} descriptors in {} documents, variant {:?}",
            a.k,
            a.levels,
            size,
            corpus.len(),
            kind
        );
        return Ok(());
    }
    let out = a.out.expect("required without --validate-only");
    let vocab = train_vocabulary(&corpus, a.k, a.levels, a.seed).map_err(as_failure)?;
    write_atomic(&out, &vocab.to_bytes()).with_context(|| out.display().to_string())?;
    println!("{} words, {} nodes -> {}", vocab.word_count(), vocab.nodes().len(), out.display());
    Ok(())
}

fn synth(a: SynthArgs) -> CmdResult {
    let mut scene = match &a.config {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .with_context(|| p.display().to_string())
                .map_err(config_failure)?;
            toml::from_str::<SceneConfig>(&text).map_err(config_failure)?
        }
        None => SceneConfig::default(),
    };
    if let Some(p) = a.path {
        scene.path = p;
    }
    if let Some(n) = a.frames {
        scene.frames = n;
    }
    if let Some(n) = a.landmarks {
        scene.landmarks = n;
    }
    if let Some(s) = a.noise {
        scene.noise_sigma = s;
    }
    if let Some(r) = a.outliers {
        scene.outlier_rate = r;
    }
    scene.render |= a.render;
    scene.validate().map_err(|e| config_failure(anyhow!(e)))?;
    let (truth, source) = generate_synthetic(&scene, a.seed).map_err(|e| config_failure(anyhow!(e)))?;

    stage_dir(&a.out, |dir| {
        let mut run = RunConfig {
            seed: a.seed,
            out: PathBuf::from("results"),
            scene: scene.clone(),
            ..RunConfig::default()
        };
        if scene.render {
            let seq = dir.join("sequences").join("00");
            let images = seq.join("image_0");
            std::fs::create_dir_all(&images)?;
            let mut times = String::new();
            for f in source.iter() {
                let FramePayload::Raster(img) = &f.payload else {
                    return Err(anyhow!("rendered scene produced no image for frame {}", f.index));
                };
                img.save(&images.join(format!("{:06}.png", f.index)))?;
                times.push_str(&format!("{:.6e}\n", f.timestamp));
            }
            let k = source.intrinsics;
            let calib = format!("P0: {} 0 {} 0 0 {} {} 0 0 0 1 0\n", k.fx, k.cx, k.fy, k.cy);
            std::fs::write(seq.join("calib.txt"), calib)?;
            std::fs::write(seq.join("times.txt"), times)?;
            std::fs::create_dir_all(dir.join("poses"))?;
            std::fs::write(dir.join("poses").join("00.txt"), truth.trajectory.to_text(TrajectoryFormat::Kitti))?;
            run.source = SourceKind::Kitti;
            run.dataset = Some(PathBuf::from("."));
        } else {
            let frames: Vec<FeatureFrame> = source
                .iter()
                .map(|f| match &f.payload {
                    FramePayload::Features { keypoints, descriptors } => Ok(FeatureFrame {
                        frame_id: f.index,
                        keypoints: keypoints.clone(),
                        descriptors: descriptors.clone(),
                    }),
                    _ => Err(anyhow!("frame {} has no features", f.index)),
                })
                .collect::<anyhow::Result<_>>()?;
            let kind = frames
                .iter()
                .find_map(|f| f.descriptors.first().map(Descriptor::kind))
                .ok_or_else(|| anyhow!("scene produced no features"))?;
            FeatureFile { kind, frames }.write(&dir.join("features.fslf"))?;
            std::fs::write(dir.join("groundtruth.txt"), truth.trajectory.to_text(TrajectoryFormat::Tum))?;
            run.source = SourceKind::FeatureFile;
            run.features = Some(PathBuf::from("features.fslf"));
            run.ground_truth = Some(PathBuf::from("groundtruth.txt"));
            run.intrinsics = Some(source.intrinsics);
            run.frame_interval = scene.frame_interval;
        }
        std::fs::write(dir.join("scene.toml"), toml::to_string(&scene)?)?;
        std::fs::write(dir.join("run.toml"), run.to_toml())?;
        Ok(())
    })?;
    println!("{} frames -> {}", source.len(), a.out.display());
    println!("run with: featslam run-slam --config {}", a.out.join("run.toml").display());
    Ok(())
}
