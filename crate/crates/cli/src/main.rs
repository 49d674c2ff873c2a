//! `smear`: simulate, align, annotate, evaluate, export and fuse depth
//! sequences from the command line.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use log::info;
use serde_json::{json, Value};

use smear_core::alignment::{align_sequence, pose_errors, refine_with_labels, IcpConfig};
use smear_core::annotator::{annotate_sequence, Annotation};
use smear_core::baselines::{
    median_filter, statistical_scores, DEFAULT_MEDIAN_TAU_MM, DEFAULT_MEDIAN_WINDOW, DEFAULT_STAT_NEIGHBORS,
    DEFAULT_STAT_RATIO,
};
use smear_core::dataset::{self, LABELS_DIR, SCENE_FILE};
use smear_core::export::export_dataset;
use smear_core::fuse::{fuse_sequence, FuseFilter};
use smear_core::metrics::{mean_average_precision, EvaluationReport};
use smear_core::ply::{write_ply, PlyFormat};
use smear_core::simulator::{render_scene, write_simulation, SceneConfig, SyntheticScene};
use smear_core::{AnnotatorConfig, Error, LabelMap, SceneSequence};

#[derive(Parser)]
#[command(name = "smear", version, about = "Self-annotation of smeared depth pixels")]
struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Clone)]
struct AnnotateArgs {
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    delta: Option<f64>,
    /// Side of the all-empty window for see-through-empty.
    #[arg(long)]
    window: Option<usize>,
    /// Number of reference frames.
    #[arg(long)]
    m: Option<usize>,
}

impl AnnotateArgs {
    fn config(&self) -> AnnotatorConfig {
        let mut cfg = AnnotatorConfig::default();
        if let Some(e) = self.epsilon {
            cfg.epsilon_mm = e;
        }
        if let Some(d) = self.delta {
            cfg.delta_mm = d;
        }
        if let Some(w) = self.window {
            cfg.window = w;
        }
        if let Some(m) = self.m {
            cfg.m = m;
        }
        cfg
    }
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic dataset with ground truth.
    Simulate {
        /// Scene description (JSON, as written to scene.json).
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Use a randomised scene instead of the default one.
        #[arg(long, conflicts_with = "config")]
        random: bool,
        /// Smear rate q.
        #[arg(long)]
        rate: Option<f64>,
        /// Depth noise sigma in mm.
        #[arg(long)]
        noise: Option<f64>,
        /// Keep only the first N frames.
        #[arg(long)]
        frames: Option<usize>,
        out: PathBuf,
    },
    /// Estimate camera poses by chained ICP.
    Align {
        dataset: PathBuf,
        #[arg(long)]
        icp_config: Option<PathBuf>,
        /// Recompute poses even if the dataset already has them.
        #[arg(long)]
        force: bool,
    },
    /// Label every frame valid, smeared or unknown.
    Annotate {
        dataset: PathBuf,
        #[command(flatten)]
        args: AnnotateArgs,
        /// Re-align without smeared pixels, then annotate again.
        #[arg(long)]
        refine: bool,
        #[arg(long)]
        icp_config: Option<PathBuf>,
    },
    /// mAP of prediction rasters against ground-truth labels.
    Evaluate {
        pred_dir: PathBuf,
        gt_dir: PathBuf,
        /// Also write the report here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write 512x512 training samples and a manifest.
    Export {
        dataset: PathBuf,
        out: PathBuf,
        #[arg(long, default_value_t = 0.3)]
        alpha: f64,
        #[arg(long, default_value_t = 0.7)]
        beta: f64,
    },
    /// Merge all frames into one world-space point cloud.
    Fuse {
        dataset: PathBuf,
        #[arg(long, value_enum, default_value_t = FilterArg::None)]
        filter: FilterArg,
        out: PathBuf,
        #[arg(long, conflicts_with = "binary")]
        ascii: bool,
        #[arg(long)]
        binary: bool,
    },
    /// Score every frame with a single-frame detector.
    Baseline {
        dataset: PathBuf,
        #[arg(long, value_enum)]
        method: Method,
        out: PathBuf,
    },
    /// Annotate over a range of one parameter and report each run.
    Sweep {
        dataset: PathBuf,
        #[arg(long, value_enum, default_value_t = SweepParam::M)]
        param: SweepParam,
        /// Values to try (default: 2..=10 for m, 1 3 5 7 for window).
        #[arg(long, num_args = 1..)]
        values: Vec<usize>,
        #[command(flatten)]
        args: AnnotateArgs,
    },
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum FilterArg {
    None,
    Median,
    Statistical,
    Labels,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Method {
    Median,
    Statistical,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SweepParam {
    M,
    Window,
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Core(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

impl Failure {
    fn exit_code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Core(e) if e.is_data_error() => 3,
            Failure::Core(_) => 2,
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter) -> std::fmt::Result {
        match self {
            Failure::Usage(m) => f.write_str(m),
            Failure::Core(e) => write!(f, "{e}"),
        }
    }
}

type Outcome = std::result::Result<Value, Failure>;

fn print(value: &Value) {
    // a closed pipe (`| head`) is not an error worth reporting
    let _ = writeln!(
        std::io::stdout().lock(),
        "{}",
        serde_json::to_string_pretty(value).expect("json values serialise")
    );
}

/// Config files are the caller's responsibility, so any failure to read one
/// is a usage error.
fn read_config<T: for<'de> serde::Deserialize<'de>>(path: &Path) -> Result<T, Failure> {
    dataset::read_json(path).map_err(|e| Failure::Usage(e.to_string()))
}

fn icp_config(path: Option<&Path>) -> Result<IcpConfig, Failure> {
    let cfg = match path {
        Some(p) => read_config(p)?,
        None => IcpConfig::default(),
    };
    cfg.validate()?;
    Ok(cfg)
}

/// Ground-truth poses from the scene file of a simulated dataset.
fn scene_poses(root: &Path) -> Option<Vec<smear_core::RigidPose>> {
    let path = root.join(SCENE_FILE);
    path.is_file()
        .then(|| dataset::read_json::<SceneConfig>(&path).ok())
        .flatten()
        .map(|c| c.scene.trajectory)
}

fn simulate(
    config: Option<&Path>,
    seed: Option<u64>,
    random: bool,
    rate: Option<f64>,
    noise: Option<f64>,
    frames: Option<usize>,
    out: &Path,
) -> Outcome {
    let mut config = match config {
        Some(p) => read_config::<SceneConfig>(p)?,
        None if random => SceneConfig {
            camera: smear_core::simulator::default_camera(),
            scene: SyntheticScene::random_scene(seed.unwrap_or(0)),
        },
        None => SceneConfig::default_with_seed(seed.unwrap_or(0)),
    };
    if let Some(s) = seed {
        config.scene.seed = s;
    }
    if let Some(q) = rate {
        config.scene.smear.rate = q;
    }
    if let Some(s) = noise {
        config.scene.noise_sigma_mm = s;
    }
    if let Some(n) = frames {
        config.scene.trajectory.truncate(n);
    }
    let sim = render_scene(&config.scene, &config.camera)?;
    write_simulation(out, &config, &sim)?;
    let smeared: usize = sim.masks.iter().flatten().filter(|m| **m).count();
    Ok(json!({ "frames": sim.sequence.len(), "smeared_pixels": smeared, "out": out }))
}

fn align(root: &Path, icp: Option<&Path>, force: bool) -> Outcome {
    let cfg = icp_config(icp)?;
    let seq = dataset::load_sequence(root)?;
    if seq.len() < 2 {
        return Err(Failure::Usage(format!("alignment needs at least 2 frames, got {}", seq.len())));
    }
    if seq.is_posed() && !force {
        return Err(Failure::Usage(format!(
            "{} already has poses; pass --force to recompute",
            root.display()
        )));
    }
    let a = align_sequence(&seq.without_poses(), &cfg)?;
    dataset::write_poses(root, &a.sequence)?;
    for p in &a.pairs {
        info!("{} -> {}: rms {:.3} mm", p.source_id, p.target_id, p.rms_residual);
    }
    let mut report = json!({ "pairs": a.pairs });
    if let Some(truth) = scene_poses(root).filter(|t| t.len() == seq.len()) {
        let errors = pose_errors(&a.sequence.poses()?, &truth);
        let worst = errors.iter().fold((0.0f64, 0.0f64), |w, e| (w.0.max(e.0), w.1.max(e.1)));
        report["pose_errors"] = json!(errors
            .iter()
            .map(|(r, t)| json!({ "rotation_deg": r, "translation_mm": t }))
            .collect::<Vec<_>>());
        report["max_rotation_deg"] = json!(worst.0);
        report["max_translation_mm"] = json!(worst.1);
    }
    Ok(report)
}

fn label_maps(ann: &Annotation) -> Vec<LabelMap> {
    ann.frames.iter().map(|f| f.labels.clone()).collect()
}

fn write_annotation(root: &Path, ann: &Annotation) -> Result<(), Failure> {
    let dir = root.join(LABELS_DIR);
    for f in &ann.frames {
        dataset::save_labels(&f.labels, &dir, f.frame_id)?;
        dataset::save_flags(&dir, f.frame_id, f.labels.width, f.labels.height, f.flags.clone())?;
    }
    dataset::write_json(&dir.join("stats.json"), &ann.stats)?;
    Ok(())
}

fn annotate(root: &Path, args: &AnnotateArgs, refine: bool, icp: Option<&Path>) -> Outcome {
    let cfg = args.config();
    cfg.validate()?;
    let icp = if refine { Some(icp_config(icp)?) } else { None };
    let mut seq = dataset::load_sequence(root)?;
    let mut ann = annotate_sequence(&seq, &cfg)?;
    if let Some(icp) = icp {
        let refined = refine_with_labels(&seq.without_poses(), &label_maps(&ann), &icp)?;
        seq = refined.sequence;
        dataset::write_poses(root, &seq)?;
        ann = annotate_sequence(&seq, &cfg)?;
    }
    write_annotation(root, &ann)?;
    Ok(serde_json::to_value(&ann.stats).expect("stats serialise"))
}

fn evaluate_dirs(pred_dir: &Path, gt_dir: &Path) -> Result<EvaluationReport, Failure> {
    let ids = dataset::list_frame_ids(pred_dir)?;
    if ids.is_empty() {
        return Err(Failure::Usage(format!("no prediction rasters in {}", pred_dir.display())));
    }
    let mut frames = Vec::with_capacity(ids.len());
    for id in ids {
        let stem = dataset::frame_stem(id);
        let gt_path = gt_dir.join(format!("{stem}.png"));
        if !gt_path.is_file() {
            return Err(Failure::Usage(format!("missing ground truth {}", gt_path.display())));
        }
        let (w, h, scores) = dataset::load_scores(&pred_dir.join(format!("{stem}.png")))?;
        let (gw, gh, gt) = dataset::load_gt_file(&gt_path)?;
        if (w, h) != (gw, gh) {
            return Err(Error::DimensionMismatch {
                expected_w: gw,
                expected_h: gh,
                got_w: w,
                got_h: h,
                context: format!("prediction {stem}"),
            }
            .into());
        }
        frames.push((id, scores, gt));
    }
    Ok(mean_average_precision(frames.iter().map(|(id, s, g)| (*id, &s[..], &g[..])))?)
}

fn evaluate(pred_dir: &Path, gt_dir: &Path, out: Option<&Path>) -> Outcome {
    let report = evaluate_dirs(pred_dir, gt_dir)?;
    if let Some(out) = out {
        dataset::write_json(out, &report)?;
    }
    Ok(serde_json::to_value(&report).expect("report serialises"))
}

fn export(root: &Path, out: &Path, alpha: f64, beta: f64) -> Outcome {
    if !(0.0..=1.0).contains(&alpha) || !(0.0..=1.0).contains(&beta) {
        return Err(Failure::Usage(format!("alpha {alpha} and beta {beta} must lie in [0, 1]")));
    }
    let manifest = export_dataset(root, out, alpha, beta)?;
    Ok(json!({ "frames": manifest.frames.len(), "weights": manifest.weights, "counts": manifest.counts }))
}

fn load_labels(root: &Path, seq: &SceneSequence) -> Result<Vec<LabelMap>, Failure> {
    let dir = root.join(LABELS_DIR);
    Ok(seq
        .frames
        .iter()
        .map(|f| dataset::load_labels(&dir, f.frame_id))
        .collect::<smear_core::Result<_>>()?)
}

fn fuse(root: &Path, filter: FilterArg, out: &Path, ascii: bool) -> Outcome {
    let seq = dataset::load_sequence(root)?;
    let (filter, labels) = match filter {
        FilterArg::None => (FuseFilter::None, None),
        FilterArg::Median => (
            FuseFilter::Median { k: DEFAULT_MEDIAN_WINDOW, tau_mm: DEFAULT_MEDIAN_TAU_MM },
            None,
        ),
        FilterArg::Statistical => (
            FuseFilter::Statistical { n_neighbors: DEFAULT_STAT_NEIGHBORS, std_ratio: DEFAULT_STAT_RATIO },
            None,
        ),
        FilterArg::Labels => (FuseFilter::Labels, Some(load_labels(root, &seq)?)),
    };
    let cloud = fuse_sequence(&seq, filter, labels.as_deref())?;
    let format = if ascii { PlyFormat::Ascii } else { PlyFormat::BinaryLittleEndian };
    write_ply(out, &cloud.points, format)?;
    Ok(json!({ "frames": seq.len(), "points": cloud.len(), "out": out }))
}

fn baseline(root: &Path, method: Method, out: &Path) -> Outcome {
    let seq = dataset::load_sequence(root)?;
    let scored: Vec<Vec<f64>> = {
        use rayon::prelude::*;
        seq.frames
            .par_iter()
            .map(|f| match method {
                Method::Median => median_filter(f, DEFAULT_MEDIAN_WINDOW, DEFAULT_MEDIAN_TAU_MM),
                Method::Statistical => statistical_scores(f, DEFAULT_STAT_NEIGHBORS, DEFAULT_STAT_RATIO),
            })
            .collect::<smear_core::Result<_>>()?
    };
    for (frame, scores) in seq.frames.iter().zip(&scored) {
        let path = out.join(format!("{}.png", dataset::frame_stem(frame.frame_id)));
        dataset::save_scores(&path, frame.width(), frame.height(), scores)?;
    }
    Ok(json!({ "frames": seq.len(), "out": out }))
}

/// mAP of hard labels against the dataset's `gt/`, when present.
fn label_map_score(root: &Path, ann: &Annotation) -> Result<Option<f64>, Failure> {
    let mut frames = Vec::new();
    for f in &ann.frames {
        let path = dataset::gt_path(root, f.frame_id);
        if !path.is_file() {
            return Ok(None);
        }
        let scores: Vec<f64> = f.labels.labels.iter().map(|l| dataset::label_score(*l)).collect();
        frames.push((f.frame_id, scores, dataset::load_gt_file(&path)?.2));
    }
    Ok(mean_average_precision(frames.iter().map(|(id, s, g)| (*id, &s[..], &g[..])))?.map)
}

fn sweep(root: &Path, param: SweepParam, values: &[usize], args: &AnnotateArgs) -> Outcome {
    let values = match (values.is_empty(), param) {
        (false, _) => values.to_vec(),
        (true, SweepParam::M) => (2..=10).collect(),
        (true, SweepParam::Window) => vec![1, 3, 5, 7],
    };
    let seq = dataset::load_sequence(root)?;
    let mut rows = Vec::new();
    for value in values {
        let mut cfg = args.config();
        match param {
            SweepParam::M => cfg.m = value,
            SweepParam::Window => cfg.window = value,
        }
        cfg.validate()?;
        let ann = annotate_sequence(&seq, &cfg)?;
        let s = &ann.stats;
        let smeared_fraction = s.smeared as f64 / (s.valid + s.smeared).max(1) as f64;
        rows.push(json!({
            "m": cfg.m,
            "window": cfg.window,
            "valid": s.valid,
            "smeared": s.smeared,
            "unknown_fraction": s.unknown_fraction,
            "smeared_fraction": smeared_fraction,
            "flags": s.counts,
            "map": label_map_score(root, &ann)?,
        }));
    }
    Ok(Value::Array(rows))
}

fn run(cli: Cli) -> Outcome {
    if let Some(n) = cli.jobs {
        if n == 0 {
            return Err(Failure::Usage("--jobs must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::Usage(e.to_string()))?;
    }
    match cli.command {
        Command::Simulate { config, seed, random, rate, noise, frames, out } => {
            simulate(config.as_deref(), seed, random, rate, noise, frames, &out)
        }
        Command::Align { dataset, icp_config, force } => align(&dataset, icp_config.as_deref(), force),
        Command::Annotate { dataset, args, refine, icp_config } => {
            annotate(&dataset, &args, refine, icp_config.as_deref())
        }
        Command::Evaluate { pred_dir, gt_dir, out } => evaluate(&pred_dir, &gt_dir, out.as_deref()),
        Command::Export { dataset, out, alpha, beta } => export(&dataset, &out, alpha, beta),
        Command::Fuse { dataset, filter, out, ascii, binary: _ } => fuse(&dataset, filter, &out, ascii),
        Command::Baseline { dataset, method, out } => baseline(&dataset, method, &out),
        Command::Sweep { dataset, param, values, args } => sweep(&dataset, param, &values, &args),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(value) => {
            print(&value);
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
