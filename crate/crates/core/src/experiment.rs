//! Batch experiments: load a sequence, run the pipeline several times with consecutive
//! seeds, evaluate each run against ground truth and aggregate. Every output file is
//! staged next to its destination and renamed into place.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{
    generate_synthetic, load_euroc, load_kitti, DatasetError, FramePayload, SceneConfig, SequenceSource, SourceFrame,
};
use crate::evaluation::{
    aggregate, align_trajectory, compute_ate, compute_rpe, trajectory_svg, MetricReport, RunMetrics, Trajectory,
    TrajectoryFormat, KITTI_LENGTHS,
};
use crate::features::{detect_and_describe, Descriptor, FeatureFile, Keypoint};
use crate::geometry::CameraIntrinsics;
use crate::imaging::{gamma_transform, GammaParam, GrayImage};
use crate::pipeline::{SlamConfig, SystemStats, System};
use crate::place_recognition::{train_vocabulary, Vocabulary};

/// Process exit code for configuration errors.
pub const EXIT_CONFIG: i32 = 2;
/// Process exit code when no run ever initialized a map.
pub const EXIT_NOT_INITIALIZED: i32 = 3;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("tracking never initialized in any of {0} runs")]
    NeverInitialized(usize),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("{0}")]
    Runtime(String),
    #[error("{path}: {message}")]
    Io { path: PathBuf, message: String },
}

impl ExperimentError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) => EXIT_CONFIG,
            Self::NeverInitialized(_) => EXIT_NOT_INITIALIZED,
            _ => 1,
        }
    }
}

fn config_err(msg: impl Into<String>) -> ExperimentError {
    ExperimentError::Config(msg.into())
}

/// Writes `bytes` to a hidden sibling file, then renames it over `path`, so readers never
/// observe a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir)?;
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let staged = dir.join(format!(".{name}.{}.tmp", std::process::id()));
    std::fs::write(&staged, bytes)?;
    std::fs::rename(&staged, path).inspect_err(|_| {
        let _ = std::fs::remove_file(&staged);
    })
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), ExperimentError> {
    write_atomic(path, bytes).map_err(|e| ExperimentError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SourceKind {
    Kitti,
    Euroc,
    #[default]
    Synthetic,
    /// Precomputed features only; camera and timing come from the config.
    FeatureFile,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub source: SourceKind,
    /// Dataset root for KITTI and EuRoC.
    pub dataset: Option<PathBuf>,
    pub sequence: String,
    /// Precomputed features used instead of the built-in detector.
    pub features: Option<PathBuf>,
    /// Vocabulary file; one is trained from the sequence when absent.
    pub vocab: Option<PathBuf>,
    /// Exposure distortion applied to every image before detection.
    pub gamma: Option<f64>,
    pub seed: u64,
    pub runs: usize,
    pub out: PathBuf,
    pub scene: SceneConfig,
    pub intrinsics: Option<CameraIntrinsics>,
    /// Seconds between frames of a feature-file source.
    pub frame_interval: f64,
    pub ground_truth: Option<PathBuf>,
    pub slam: SlamConfig,
    /// RPE segment lengths. When empty, KITTI sequences long enough for them use the
    /// benchmark lengths and everything else a tenth to four tenths of the path length.
    pub rpe_lengths: Vec<f64>,
    pub vocab_branching: usize,
    pub vocab_levels: usize,
    /// Timestamp association tolerance in seconds.
    pub association_tolerance: f64,
    pub plot: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            source: SourceKind::Synthetic,
            dataset: None,
            sequence: "00".into(),
            features: None,
            vocab: None,
            gamma: None,
            seed: 0,
            runs: 1,
            out: PathBuf::from("results"),
            scene: SceneConfig::default(),
            intrinsics: None,
            frame_interval: 0.1,
            ground_truth: None,
            slam: SlamConfig::default(),
            rpe_lengths: Vec::new(),
            vocab_branching: 10,
            vocab_levels: 3,
            association_tolerance: 0.01,
            plot: true,
        }
    }
}

fn require_path(what: &str, p: &Option<PathBuf>) -> Result<(), ExperimentError> {
    match p {
        Some(p) if !p.exists() => Err(config_err(format!("{what} {} does not exist", p.display()))),
        _ => Ok(()),
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, ExperimentError> {
        toml::from_str(text).map_err(|e| config_err(e.to_string()))
    }

    /// Reads a config file. Relative paths inside it are taken relative to the file.
    pub fn read(path: &Path) -> Result<Self, ExperimentError> {
        let text = std::fs::read_to_string(path).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        if let Some(base) = path.parent().filter(|b| !b.as_os_str().is_empty()) {
            cfg.rebase(base);
        }
        Ok(cfg)
    }

    /// Prefixes every relative path with `base`.
    pub fn rebase(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        for p in [&mut self.dataset, &mut self.features, &mut self.vocab, &mut self.ground_truth].into_iter().flatten() {
            fix(p);
        }
        fix(&mut self.out);
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).unwrap_or_default()
    }

    /// Checks ranges and that every referenced path exists.
    pub fn validate(&self) -> Result<(), ExperimentError> {
        if self.runs == 0 {
            return Err(config_err("run count must be at least 1"));
        }
        if let Some(g) = self.gamma {
            GammaParam::new(g).map_err(|e| config_err(e.to_string()))?;
        }
        if self.vocab_branching < 2 || self.vocab_levels == 0 {
            return Err(config_err("vocabulary needs branching >= 2 and at least one level"));
        }
        if self.rpe_lengths.iter().any(|l| !(*l > 0.0)) {
            return Err(config_err("RPE lengths must be positive"));
        }
        if !(self.association_tolerance >= 0.0) || !(self.frame_interval > 0.0) {
            return Err(config_err("tolerance must be non-negative and frame interval positive"));
        }
        self.slam.pyramid.validate().map_err(|e| config_err(e.to_string()))?;
        require_path("vocabulary", &self.vocab)?;
        require_path("feature file", &self.features)?;
        require_path("ground truth", &self.ground_truth)?;
        match self.source {
            SourceKind::Kitti | SourceKind::Euroc => {
                let Some(d) = &self.dataset else {
                    return Err(config_err("dataset path required for KITTI and EuRoC sources"));
                };
                require_path("dataset", &Some(d.clone()))?;
            }
            SourceKind::Synthetic => {
                self.scene.validate().map_err(config_err)?;
                if self.gamma.is_some() && !self.scene.render && self.features.is_none() {
                    return Err(config_err("gamma distortion needs image input (set scene.render)"));
                }
            }
            SourceKind::FeatureFile => {
                if self.features.is_none() {
                    return Err(config_err("feature-file source needs a feature file"));
                }
                let Some(k) = self.intrinsics else {
                    return Err(config_err("feature-file source needs intrinsics"));
                };
                k.validate().map_err(|e| config_err(e.to_string()))?;
                if self.gamma.is_some() {
                    return Err(config_err("gamma distortion needs image input"));
                }
            }
        }
        Ok(())
    }
}

/// Sequence plus ground truth ready for repeated runs.
pub struct PreparedSequence {
    pub source: SequenceSource,
    pub vocab: Vocabulary,
}

fn feature_file_source(cfg: &RunConfig) -> Result<SequenceSource, ExperimentError> {
    let path = cfg.features.as_ref().expect("validated");
    let file = FeatureFile::read(path).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
    let frames = file
        .frames
        .into_iter()
        .map(|f| SourceFrame {
            index: f.frame_id,
            timestamp: f.frame_id as f64 * cfg.frame_interval,
            payload: FramePayload::Features {
                keypoints: f.keypoints,
                descriptors: f.descriptors,
            },
        })
        .collect();
    let gt = match &cfg.ground_truth {
        Some(p) => Some(Trajectory::read(p).map_err(|e| config_err(format!("{}: {e}", p.display())))?.0),
        None => None,
    };
    Ok(SequenceSource::new("features", cfg.intrinsics.expect("validated"), frames, gt)?)
}

fn frame_features(cfg: &SlamConfig, payload: &FramePayload) -> Result<(Vec<Keypoint>, Vec<Descriptor>), ExperimentError> {
    let detect = |img: &GrayImage| {
        detect_and_describe(img, &cfg.pyramid, cfg.features_per_frame, &cfg.detector).map_err(|e| ExperimentError::Runtime(e.to_string()))
    };
    match payload {
        FramePayload::Features { keypoints, descriptors } => Ok((keypoints.clone(), descriptors.clone())),
        FramePayload::Raster(img) => detect(img),
        FramePayload::Image(p) => detect(&GrayImage::load(p).map_err(|e| ExperimentError::Io {
            path: p.clone(),
            message: e.to_string(),
        })?),
    }
}

/// Loads the sequence named by `cfg`, applies external features and distortion, and
/// loads or trains the vocabulary.
pub fn prepare(cfg: &RunConfig) -> Result<PreparedSequence, ExperimentError> {
    cfg.validate()?;
    let mut source = match cfg.source {
        SourceKind::Kitti => load_kitti(cfg.dataset.as_ref().expect("validated"), &cfg.sequence)?,
        SourceKind::Euroc => load_euroc(cfg.dataset.as_ref().expect("validated"))?,
        SourceKind::Synthetic => generate_synthetic(&cfg.scene, cfg.seed).map_err(config_err)?.1,
        SourceKind::FeatureFile => feature_file_source(cfg)?,
    };
    if cfg.source != SourceKind::FeatureFile {
        if let Some(path) = &cfg.features {
            let file = FeatureFile::read(path).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
            source = source.with_features(&file)?;
        }
    }
    if let Some(g) = cfg.gamma {
        let g = GammaParam::new(g).map_err(|e| config_err(e.to_string()))?;
        source = source.map_images(|img| gamma_transform(img, g))?;
    }
    let first_kind = match source.frames().first() {
        Some(f) => frame_features(&cfg.slam, &f.payload)?.1.first().map(Descriptor::kind),
        None => return Err(config_err("sequence has no frames")),
    };
    let vocab = match &cfg.vocab {
        Some(p) => Vocabulary::read(p).map_err(|e| config_err(format!("{}: {e}", p.display())))?,
        None => {
            let corpus = source
                .iter()
                .step_by(5)
                .map(|f| frame_features(&cfg.slam, &f.payload).map(|(_, d)| d))
                .collect::<Result<Vec<_>, _>>()?;
            train_vocabulary(&corpus, cfg.vocab_branching, cfg.vocab_levels, cfg.seed)
                .map_err(|e| config_err(format!("vocabulary training: {e}")))?
        }
    };
    if let Some(kind) = first_kind {
        if kind != vocab.kind() {
            return Err(config_err(format!(
                "vocabulary descriptors {:?} do not match the sequence's {:?}",
                vocab.kind(),
                kind
            )));
        }
    }
    Ok(PreparedSequence { source, vocab })
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub seed: u64,
    pub trajectory: Trajectory,
    pub stats: SystemStats,
    pub metrics: Option<RunMetrics>,
    pub elapsed: Duration,
}

impl RunOutcome {
    pub fn initialized(&self) -> bool {
        !self.trajectory.is_empty()
    }
}

/// Runs the pipeline once over the whole sequence.
pub fn run_once(cfg: &RunConfig, prepared: &PreparedSequence, seed: u64) -> Result<RunOutcome, ExperimentError> {
    let start = Instant::now();
    let source = &prepared.source;
    let mut system = System::new(cfg.slam.clone(), source.intrinsics, Some(prepared.vocab.clone()), seed);
    for f in source.iter() {
        let (kps, descs) = frame_features(&cfg.slam, &f.payload)?;
        system
            .process_features(f.index, f.timestamp, kps, descs)
            .map_err(|e| ExperimentError::Runtime(format!("frame {}: {e}", f.index)))?;
    }
    system.finish();
    let trajectory = system.trajectory();
    let metrics = source.ground_truth.as_ref().and_then(|gt| evaluate_run(cfg, &trajectory, gt));
    Ok(RunOutcome {
        seed,
        trajectory,
        stats: system.stats().clone(),
        metrics,
        elapsed: start.elapsed(),
    })
}

fn default_lengths(cfg: &RunConfig, reference: &Trajectory) -> Vec<f64> {
    if !cfg.rpe_lengths.is_empty() {
        return cfg.rpe_lengths.clone();
    }
    let fractions = path_fraction_lengths(reference);
    // Fractions are a tenth..four tenths of the path, so this tests for a path long
    // enough to hold the shortest benchmark segment.
    if cfg.source == SourceKind::Kitti && fractions.last().is_some_and(|l| *l * 2.5 >= KITTI_LENGTHS[0]) {
        return KITTI_LENGTHS.to_vec();
    }
    fractions
}

/// A tenth to four tenths of the reference path length, for sequences too short for the
/// fixed benchmark lengths.
pub fn path_fraction_lengths(reference: &Trajectory) -> Vec<f64> {
    let pos = reference.positions();
    let total: f64 = pos.windows(2).map(|w| (w[1] - w[0]).norm()).sum();
    [0.1, 0.2, 0.3, 0.4].iter().map(|f| f * total).filter(|l| *l > 0.0).collect()
}

/// ATE with similarity alignment and RPE on the aligned estimate. `None` when the run has
/// too few associated poses.
pub fn evaluate_run(cfg: &RunConfig, est: &Trajectory, reference: &Trajectory) -> Option<RunMetrics> {
    let ate = compute_ate(est, reference, true, cfg.association_tolerance).ok()?;
    let aligned = align_trajectory(est, &ate.alignment);
    let rpe = compute_rpe(&aligned, reference, &default_lengths(cfg, reference), cfg.association_tolerance).ok();
    Some(RunMetrics {
        ate_rmse: ate.rmse,
        rpe_trans: rpe.as_ref().map(|r| r.trans_percent),
        rpe_rot: rpe.as_ref().map(|r| r.rot_deg_per_unit),
        coverage: ate.coverage,
    })
}

#[derive(Clone, Debug)]
pub struct ExperimentSummary {
    pub runs: Vec<RunOutcome>,
    /// Mean over the runs that produced metrics.
    pub aggregate: Option<MetricReport>,
    pub trajectory_files: Vec<PathBuf>,
    pub report_file: PathBuf,
}

fn run_report(run: &RunOutcome) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "seed: {}", run.seed);
    let _ = writeln!(s, "status: {}", if run.metrics.is_some() { "evaluated" } else if run.initialized() { "unevaluated" } else { "failed" });
    let _ = writeln!(s, "poses: {}", run.trajectory.len());
    let st = &run.stats;
    let _ = writeln!(s, "frames: {}", st.frames);
    let _ = writeln!(s, "tracked: {}", st.tracked);
    let _ = writeln!(s, "lost: {}", st.lost);
    let _ = writeln!(s, "keyframes_inserted: {}", st.keyframes_inserted);
    let _ = writeln!(s, "relocalizations: {}", st.relocalizations);
    let _ = writeln!(s, "loop_closures: {}", st.loop_corrections.len());
    let _ = writeln!(s, "seconds: {:.3}", run.elapsed.as_secs_f64());
    if let Some(m) = &run.metrics {
        s.push_str(&MetricReport::single(m.clone()).to_text());
    }
    s
}

/// Runs `cfg.runs` seeded runs and writes `run-NN/trajectory.txt` (TUM format),
/// `run-NN/report.txt`, an optional `run-NN/plot.svg`, and the aggregate `report.txt`
/// under `cfg.out`.
pub fn run_experiment(cfg: &RunConfig) -> Result<ExperimentSummary, ExperimentError> {
    let prepared = prepare(cfg)?;
    let mut runs = Vec::with_capacity(cfg.runs);
    let mut trajectory_files = Vec::with_capacity(cfg.runs);
    for i in 0..cfg.runs {
        let seed = cfg.seed.wrapping_add(i as u64);
        let run = run_once(cfg, &prepared, seed)?;
        let dir = cfg.out.join(format!("run-{i:02}"));
        let traj_path = dir.join("trajectory.txt");
        write_file(&traj_path, run.trajectory.to_text(TrajectoryFormat::Tum).as_bytes())?;
        write_file(&dir.join("report.txt"), run_report(&run).as_bytes())?;
        if let (true, Some(gt)) = (cfg.plot, prepared.source.ground_truth.as_ref()) {
            if let Ok(ate) = compute_ate(&run.trajectory, gt, true, cfg.association_tolerance) {
                write_file(&dir.join("plot.svg"), trajectory_svg(&run.trajectory, gt, Some(&ate.alignment)).as_bytes())?;
            }
        }
        trajectory_files.push(traj_path);
        runs.push(run);
    }
    if runs.iter().all(|r| !r.initialized()) {
        return Err(ExperimentError::NeverInitialized(runs.len()));
    }
    let singles: Vec<MetricReport> = runs.iter().filter_map(|r| r.metrics.clone()).map(MetricReport::single).collect();
    let aggregate = aggregate(&singles).ok();

    let mut text = String::new();
    let _ = writeln!(text, "sequence: {}", prepared.source.name);
    let _ = writeln!(text, "seeds: {}..{}", cfg.seed, cfg.seed.wrapping_add(cfg.runs as u64 - 1));
    let _ = writeln!(text, "runs_requested: {}", cfg.runs);
    let _ = writeln!(text, "runs_initialized: {}", runs.iter().filter(|r| r.initialized()).count());
    let _ = writeln!(text, "runs_evaluated: {}", singles.len());
    if let Some(g) = cfg.gamma {
        let _ = writeln!(text, "gamma: {g}");
    }
    match &aggregate {
        Some(a) => text.push_str(&a.to_text()),
        None => text.push_str("metrics: n/a\n"),
    }
    let report_file = cfg.out.join("report.txt");
    write_file(&report_file, text.as_bytes())?;
    write_file(&cfg.out.join("config.toml"), cfg.to_toml().as_bytes())?;
    Ok(ExperimentSummary {
        runs,
        aggregate,
        trajectory_files,
        report_file,
    })
}
