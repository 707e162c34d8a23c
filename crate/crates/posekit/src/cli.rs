//! Command-line workflows: run configuration, training with checkpoints and
//! line-delimited logs, evaluation, inference over image files, and
//! attention-map export.
//!
//! Every command reads a [`RunConfig`] (TOML with a strict schema — unknown
//! keys are errors) optionally patched by dotted `--set key=value`
//! overrides, and writes all artifacts into one run directory. Commands
//! refuse to clobber a non-empty output directory unless told to overwrite.
//!
//! The commands train and run single-precision models; checkpoints store
//!`f64` values, so precision choices never leak into the file format.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data_eval::{
    draw_disc, draw_segment, evaluate_ap, image_to_array, joint_color, load_coco_keypoints,
    pad_to_multiple, synthetic_dataset, to_pose_records, ApMetrics, DatasetItem, EvalImage,
    PoseRecord, SyntheticConfig, MAX_DETECTIONS,
};
use crate::error::{Error, Result};
use crate::geometry::{PersonAnnotation, SKELETON_EDGES};
use crate::nn::Fwd;
use crate::pipeline::{
    select_poses, Model, ModelConfig, Sample, ScoredPose, TrainStats, DEFAULT_SCORE_THRESHOLD,
    DEFAULT_TOP_K,
};
use crate::scalar::Scalar as _;

/// Working precision of the command-line tools.
type S = f32;

// ---------------------------------------------------------------------------
// Run configuration
// ---------------------------------------------------------------------------

/// Which dataset a run reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DataKind {
    /// Procedurally generated scenes with exact annotations.
    #[default]
    Synthetic,
    /// A COCO-format keypoint annotation file plus an image directory.
    Coco,
}

/// Dataset selection. Synthetic runs draw `items` scenes from the generator;
/// COCO runs read `annotations` + `images`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub kind: DataKind,
    /// Scene count (synthetic only). Evaluation replays the same scenes.
    pub items: usize,
    /// Scene generator settings (synthetic only).
    pub scene: SyntheticConfig,
    /// Annotation JSON path (COCO only).
    pub annotations: Option<PathBuf>,
    /// Image directory (COCO only).
    pub images: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            kind: DataKind::Synthetic,
            items: 20,
            scene: SyntheticConfig::default(),
            annotations: None,
            images: None,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        match self.kind {
            DataKind::Synthetic => {
                if self.items == 0 {
                    return Err(Error::Config("data.items must be at least 1".into()));
                }
                self.scene.validate()
            }
            DataKind::Coco => {
                for (name, v) in [
                    ("data.annotations", &self.annotations),
                    ("data.images", &self.images),
                ] {
                    if v.is_none() {
                        return Err(Error::Config(format!(
                            "{name} is required when data.kind = \"coco\""
                        )));
                    }
                }
                Ok(())
            }
        }
    }
}

/// Training schedule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    /// Optimizer steps to run in total (resuming counts completed steps).
    pub steps: u64,
    pub batch_size: usize,
    /// Write a checkpoint every this many steps; 0 keeps only the final one.
    pub checkpoint_interval: u64,
    /// Print progress every this many steps; 0 silences progress (the
    /// line-delimited log always records every step).
    pub log_interval: u64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            steps: 200,
            batch_size: 2,
            checkpoint_interval: 100,
            log_interval: 10,
        }
    }
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("schedule.steps must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config(
                "schedule.batch_size must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// Everything one run needs: the model, the data, the schedule, the output
/// location and the seed. Serializes to TOML; unknown keys are rejected so
/// misspellings fail loudly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Seeds model initialization and batch order. The scene generator has
    /// its own seed under `data.scene`.
    pub seed: u64,
    /// Parent directory for auto-named run directories (ignored when a
    /// command is given an explicit output directory).
    pub out: PathBuf,
    /// Name fragment for auto-named run directories: `<timestamp>-<tag>`.
    pub tag: String,
    /// Default score threshold for inference-style commands.
    pub threshold: f64,
    pub model: ModelConfig,
    pub data: DataConfig,
    pub schedule: ScheduleConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out: PathBuf::from("runs"),
            tag: "run".into(),
            threshold: DEFAULT_SCORE_THRESHOLD,
            model: ModelConfig::default(),
            data: DataConfig::default(),
            schedule: ScheduleConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::Config(format!(
                "threshold must lie in [0, 1], got {}",
                self.threshold
            )));
        }
        self.model.validate()?;
        self.data.validate()?;
        self.schedule.validate()
    }
}

/// Loads a run configuration: the TOML file when given (otherwise the
/// built-in defaults), then each `key.path=value` override in order, then a
/// strict decode so unknown or ill-typed keys are reported by name.
pub fn load_run_config(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
    let mut tree: toml::Value = match path {
        Some(p) => {
            let text = fs::read_to_string(p)
                .map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())))?;
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
        }
        None => toml::Value::try_from(RunConfig::default())
            .expect("default run config serializes to TOML"),
    };
    for spec in overrides {
        apply_override(&mut tree, spec)?;
    }
    tree.try_into()
        .map_err(|e| Error::Config(format!("invalid run config: {e}")))
}

/// Applies one `dotted.path=value` override to a TOML tree, creating
/// intermediate tables as needed. The value is parsed as TOML (numbers,
/// booleans, arrays, quoted strings); anything unparsable is taken as a
/// bare string.
pub fn apply_override(tree: &mut toml::Value, spec: &str) -> Result<()> {
    let (path, raw) = spec.split_once('=').ok_or_else(|| {
        Error::Config(format!("--set expects key.path=value, got \"{spec}\""))
    })?;
    let path = path.trim();
    if path.is_empty() || path.split('.').any(|s| s.is_empty()) {
        return Err(Error::Config(format!("--set key path \"{path}\" is empty")));
    }
    let value = parse_scalar(raw.trim());

    let segments: Vec<&str> = path.split('.').collect();
    let (last, prefix) = segments.split_last().expect("path is non-empty");
    let mut cursor = tree;
    for (i, seg) in prefix.iter().enumerate() {
        let table = cursor.as_table_mut().ok_or_else(|| {
            Error::Config(format!(
                "--set path \"{path}\": \"{}\" is not a table",
                segments[..=i].join(".")
            ))
        })?;
        cursor = table
            .entry(seg.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    }
    let table = cursor.as_table_mut().ok_or_else(|| {
        Error::Config(format!(
            "--set path \"{path}\": \"{}\" is not a table",
            prefix.join(".")
        ))
    })?;
    table.insert(last.to_string(), value);
    Ok(())
}

fn parse_scalar(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|t| t.get("v").cloned())
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

// ---------------------------------------------------------------------------
// Run directories and artifacts
// ---------------------------------------------------------------------------

/// Picks and creates the run directory. An explicit path is used as-is;
/// otherwise a fresh `<out>/<timestamp>-<tag>` is chosen. A directory that
/// already has contents is refused unless `overwrite` is set, in which case
/// it is removed and recreated so reruns produce exactly the same artifacts.
pub fn prepare_run_dir(
    explicit: Option<&Path>,
    out_parent: &Path,
    tag: &str,
    overwrite: bool,
) -> Result<PathBuf> {
    let dir = match explicit {
        Some(p) => p.to_path_buf(),
        None => {
            let stamp = chrono::Utc::now().format("%Y%m%d-%H%M%S");
            let base = out_parent.join(format!("{stamp}-{tag}"));
            let mut dir = base.clone();
            let mut n = 1;
            while dir.exists() {
                dir = out_parent.join(format!("{stamp}-{tag}-{n}"));
                n += 1;
            }
            dir
        }
    };
    let has_contents = dir.is_dir()
        && dir
            .read_dir()
            .map(|mut entries| entries.next().is_some())
            .unwrap_or(false);
    if has_contents {
        if !overwrite {
            return Err(Error::Config(format!(
                "output directory {} already has contents; pass --overwrite to replace them",
                dir.display()
            )));
        }
        fs::remove_dir_all(&dir)?;
    }
    fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text)?;
    Ok(())
}

fn checkpoint_path(dir: &Path, step: u64) -> PathBuf {
    dir.join(format!("ckpt-{step:06}.pkcp"))
}

/// Resolves a checkpoint argument: a file is taken as-is; a directory yields
/// its highest-step `ckpt-*.pkcp`.
pub fn resolve_checkpoint(path: &Path) -> Result<PathBuf> {
    if !path.is_dir() {
        return Ok(path.to_path_buf());
    }
    let mut best: Option<(u64, PathBuf)> = None;
    for entry in fs::read_dir(path)? {
        let entry = entry?;
        let name = entry.file_name();
        let step = name
            .to_str()
            .and_then(|n| n.strip_prefix("ckpt-"))
            .and_then(|n| n.strip_suffix(".pkcp"))
            .and_then(|n| n.parse::<u64>().ok());
        if let Some(step) = step {
            if best.as_ref().is_none_or(|(b, _)| step > *b) {
                best = Some((step, entry.path()));
            }
        }
    }
    best.map(|(_, p)| p).ok_or_else(|| {
        Error::Checkpoint(format!(
            "no checkpoint files (ckpt-*.pkcp) in {}",
            path.display()
        ))
    })
}

// ---------------------------------------------------------------------------
// Data access
// ---------------------------------------------------------------------------

/// Materializes the configured dataset. COCO images are zero-padded so both
/// sides are multiples of 32.
pub fn load_dataset(data: &DataConfig) -> Result<Vec<DatasetItem<S>>> {
    data.validate()?;
    match data.kind {
        DataKind::Synthetic => synthetic_dataset(&data.scene, data.items),
        DataKind::Coco => {
            let annotations = data.annotations.as_ref().expect("validated above");
            let images = data.images.as_ref().expect("validated above");
            let mut items = load_coco_keypoints::<S>(annotations, images)?;
            for item in &mut items {
                item.sample.image = pad_to_multiple(&item.sample.image, 32)?;
            }
            Ok(items)
        }
    }
}

/// The dataset indices forming training batch `step`. Items are drawn from
/// per-epoch shuffles of the whole dataset, so every item appears exactly
/// once per epoch and the sequence is a pure function of `(seed, step)` —
/// resumed runs see the same batches a fresh run would.
pub fn batch_indices(step: u64, items: usize, batch_size: usize, seed: u64) -> Vec<usize> {
    assert!(items > 0 && batch_size > 0, "empty dataset or batch");
    let mut cache: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
    (0..batch_size as u64)
        .map(|j| {
            let global = step * batch_size as u64 + j;
            let epoch = global / items as u64;
            let position = (global % items as u64) as usize;
            cache.entry(epoch).or_insert_with(|| epoch_order(items, seed, epoch))[position]
        })
        .collect()
}

fn epoch_order(items: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&epoch.to_le_bytes());
    key[16] = 1; // domain separation from the scene generator's keys
    let mut rng = ChaCha8Rng::from_seed(key);
    let mut order: Vec<usize> = (0..items).collect();
    order.shuffle(&mut rng);
    order
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

#[derive(Debug, Default)]
pub struct TrainArgs {
    pub config: Option<PathBuf>,
    pub overrides: Vec<String>,
    /// Explicit run directory; defaults to an auto-named one under the
    /// config's `out`.
    pub out: Option<PathBuf>,
    /// Overrides the config's seed.
    pub seed: Option<u64>,
    /// Resume source: a checkpoint file or a run directory holding one.
    pub checkpoint: Option<PathBuf>,
    pub overwrite: bool,
}

/// One line of the training log.
#[derive(Debug, Serialize)]
pub struct LogRecord {
    /// Completed optimizer steps after this one (1-based).
    pub step: u64,
    pub learning_rate: f64,
    #[serde(flatten)]
    pub stats: TrainStats,
}

#[derive(Debug)]
pub struct TrainSummary {
    pub run_dir: PathBuf,
    /// Steps executed by this invocation (0 when the target was already
    /// reached by the resumed checkpoint).
    pub steps_run: u64,
    pub final_step: u64,
    pub final_loss: Option<f64>,
    pub final_checkpoint: Option<PathBuf>,
}

/// Trains per the config: writes the resolved `config.toml`, a
/// `train-log.jsonl` record per step, interval checkpoints and a final one.
/// With `checkpoint` set, training resumes from the recorded step with the
/// saved optimizer state.
pub fn cmd_train(args: &TrainArgs) -> Result<TrainSummary> {
    let mut config = load_run_config(args.config.as_deref(), &args.overrides)?;
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    config.validate()?;
    let run_dir = prepare_run_dir(args.out.as_deref(), &config.out, &config.tag, args.overwrite)?;
    let config_text =
        toml::to_string_pretty(&config).map_err(|e| Error::Serde(e.to_string()))?;
    fs::write(run_dir.join("config.toml"), config_text)?;

    let items = load_dataset(&config.data)?;
    if items.is_empty() {
        return Err(Error::Data("the configured dataset is empty".into()));
    }

    let (mut model, mut optimizer, start_step) = match &args.checkpoint {
        Some(source) => {
            let file = resolve_checkpoint(source)?;
            let loaded = Model::<S>::load_checkpoint(&file, Some(&config.model))?;
            let optimizer = loaded
                .optimizer
                .unwrap_or_else(|| loaded.model.optimizer());
            println!(
                "resuming from {} at step {}",
                file.display(),
                loaded.step
            );
            (loaded.model, optimizer, loaded.step)
        }
        None => {
            let model = Model::<S>::new(config.model.clone(), config.seed)?;
            let optimizer = model.optimizer();
            (model, optimizer, 0)
        }
    };

    let schedule = config.schedule;
    if start_step >= schedule.steps {
        println!(
            "checkpoint already at step {start_step} >= target {}; nothing to train",
            schedule.steps
        );
        return Ok(TrainSummary {
            run_dir,
            steps_run: 0,
            final_step: start_step,
            final_loss: None,
            final_checkpoint: None,
        });
    }

    let mut log = fs::File::create(run_dir.join("train-log.jsonl"))?;
    let learning_rate = config.model.optimizer.learning_rate;
    let mut last_loss = None;
    let mut last_checkpoint = None;
    for step in start_step..schedule.steps {
        let picks = batch_indices(step, items.len(), schedule.batch_size, config.seed);
        let batch: Vec<Sample<S>> = picks.iter().map(|&i| items[i].sample.clone()).collect();
        let stats = model.train_step(&mut optimizer, &batch)?;
        let done = step + 1;
        last_loss = Some(stats.total);
        let record = LogRecord {
            step: done,
            learning_rate,
            stats,
        };
        writeln!(log, "{}", serde_json::to_string(&record)?)?;
        if schedule.log_interval > 0 && (done % schedule.log_interval == 0 || done == schedule.steps)
        {
            println!(
                "step {done}/{} loss {:.4}",
                schedule.steps,
                record.stats.total
            );
        }
        let interval_hit =
            schedule.checkpoint_interval > 0 && done % schedule.checkpoint_interval == 0;
        if interval_hit || done == schedule.steps {
            let path = checkpoint_path(&run_dir, done);
            model.save_checkpoint(&path, Some(&optimizer), done)?;
            last_checkpoint = Some(path);
        }
    }
    println!(
        "finished at step {} in {}",
        schedule.steps,
        run_dir.display()
    );
    Ok(TrainSummary {
        run_dir,
        steps_run: schedule.steps - start_step,
        final_step: schedule.steps,
        final_loss: last_loss,
        final_checkpoint: last_checkpoint,
    })
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

#[derive(Debug, Default)]
pub struct EvalArgs {
    pub config: Option<PathBuf>,
    pub overrides: Vec<String>,
    pub out: Option<PathBuf>,
    /// Checkpoint file or run directory. Required unless `replay_gt`.
    pub checkpoint: Option<PathBuf>,
    /// Score cut applied before evaluation; default keeps everything.
    pub threshold: Option<f64>,
    /// Replays the ground truth as predictions instead of running a model —
    /// a debugging mode whose metrics must be perfect.
    pub replay_gt: bool,
    pub overwrite: bool,
}

/// Evaluates a checkpoint (or the ground-truth replay) on the configured
/// dataset; prints the metric row and writes `metrics.json` plus the
/// detection list `results.json`.
pub fn cmd_eval(args: &EvalArgs) -> Result<ApMetrics> {
    let config = load_run_config(args.config.as_deref(), &args.overrides)?;
    config.validate()?;
    if args.checkpoint.is_some() && args.replay_gt {
        return Err(Error::Config(
            "--replay-gt evaluates the ground truth; drop --checkpoint".into(),
        ));
    }
    let run_dir = prepare_run_dir(
        args.out.as_deref(),
        &config.out,
        &format!("{}-eval", config.tag),
        args.overwrite,
    )?;
    let items = load_dataset(&config.data)?;
    let threshold = args.threshold.unwrap_or(0.0);

    let model = match (&args.checkpoint, args.replay_gt) {
        (Some(source), false) => {
            let file = resolve_checkpoint(source)?;
            Some(Model::<S>::load_checkpoint(&file, None)?.model)
        }
        (None, true) => None,
        (None, false) => {
            return Err(Error::Config(
                "eval needs --checkpoint (or --replay-gt for the debug replay)".into(),
            ))
        }
        (Some(_), true) => unreachable!("rejected above"),
    };

    let mut eval_images = Vec::with_capacity(items.len());
    let mut per_image = Vec::with_capacity(items.len());
    for item in &items {
        let predictions = match &model {
            Some(m) => m.infer(&item.sample.image, threshold, MAX_DETECTIONS)?,
            None => replay_ground_truth(&item.sample.persons),
        };
        per_image.push((item.id, predictions.clone()));
        eval_images.push(EvalImage {
            predictions,
            ground_truth: item.sample.persons.clone(),
        });
    }
    let metrics = evaluate(&eval_images);
    write_json(&run_dir.join("metrics.json"), &metrics)?;
    write_json(&run_dir.join("results.json"), &to_pose_records(&per_image))?;
    println!("      AP    AP50    AP75    AP_M    AP_L      AR");
    println!(
        "{:8.4}{:8.4}{:8.4}{:8.4}{:8.4}{:8.4}",
        metrics.ap, metrics.ap50, metrics.ap75, metrics.ap_medium, metrics.ap_large, metrics.ar
    );
    println!("wrote {}", run_dir.display());
    Ok(metrics)
}

fn evaluate(images: &[EvalImage<S>]) -> ApMetrics {
    crate::data_eval::evaluate_ap(images)
}

/// Ground truth dressed up as detections: exact keypoints, full confidence.
fn replay_ground_truth(persons: &[PersonAnnotation<S>]) -> Vec<ScoredPose<S>> {
    persons
        .iter()
        .enumerate()
        .map(|(i, p)| ScoredPose {
            query_index: i,
            keypoints: p.keypoints.coords().clone(),
            score: 1.0,
            keypoint_scores: vec![1.0; p.keypoints.len()],
            bbox: p.bbox,
            instance_score: 1.0,
        })
        .collect()
}

// ---------------------------------------------------------------------------
// infer
// ---------------------------------------------------------------------------

#[derive(Debug, Default)]
pub struct InferArgs {
    /// Checkpoint file or run directory.
    pub checkpoint: PathBuf,
    pub images: Vec<PathBuf>,
    pub out: Option<PathBuf>,
    pub threshold: Option<f64>,
    /// Also write `render-<name>.png` skeleton overlays.
    pub render: bool,
    pub overwrite: bool,
}

#[derive(Debug)]
pub struct InferSummary {
    pub run_dir: PathBuf,
    pub poses: usize,
    /// Images that could not be read (skipped with a message).
    pub failures: usize,
}

/// Detects poses in the given image files. Unreadable files are reported
/// and skipped; the command fails only when every file fails. Results are
/// written as one flattened detection list (`image_id` = position in the
/// argument order, also recorded in `images.json`).
pub fn cmd_infer(args: &InferArgs) -> Result<InferSummary> {
    if args.images.is_empty() {
        return Err(Error::Config("infer needs at least one image path".into()));
    }
    let file = resolve_checkpoint(&args.checkpoint)?;
    let model = Model::<S>::load_checkpoint(&file, None)?.model;
    let run_dir = prepare_run_dir(
        args.out.as_deref(),
        Path::new("runs"),
        "infer",
        args.overwrite,
    )?;
    let threshold = args.threshold.unwrap_or(DEFAULT_SCORE_THRESHOLD);

    let mut records: Vec<PoseRecord> = Vec::new();
    let mut manifest = Vec::new();
    let mut poses_total = 0usize;
    let mut failures = 0usize;
    for (index, path) in args.images.iter().enumerate() {
        let decoded = match image::open(path) {
            Ok(d) => d.to_rgb8(),
            Err(e) => {
                eprintln!("error: image file {}: {e}", path.display());
                failures += 1;
                continue;
            }
        };
        let array = image_to_array::<S>(&decoded).into_dyn();
        let padded = pad_to_multiple(&array, 32)?;
        let poses = model.infer(&padded, threshold, DEFAULT_TOP_K)?;
        println!("{}: {} pose(s)", path.display(), poses.len());
        if args.render {
            let name = path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| format!("image{index}"));
            let mut canvas = image_to_array::<f64>(&decoded);
            render_poses(&mut canvas, &poses);
            let out = run_dir.join(format!("render-{name}.png"));
            array_to_image(&canvas)
                .save(&out)
                .map_err(|e| Error::Data(format!("cannot write {}: {e}", out.display())))?;
        }
        poses_total += poses.len();
        records.extend(to_pose_records(&[(index as i64, poses)]));
        manifest.push(serde_json::json!({ "id": index, "file": path }));
    }
    if failures == args.images.len() {
        return Err(Error::Data("no readable images".into()));
    }
    write_json(&run_dir.join("results.json"), &records)?;
    write_json(&run_dir.join("images.json"), &manifest)?;
    println!(
        "{} pose(s) across {} image(s); wrote {}",
        poses_total,
        args.images.len() - failures,
        run_dir.display()
    );
    Ok(InferSummary {
        run_dir,
        poses: poses_total,
        failures,
    })
}

// ---------------------------------------------------------------------------
// export-attn
// ---------------------------------------------------------------------------

#[derive(Debug, Default)]
pub struct ExportAttnArgs {
    /// Checkpoint file or run directory.
    pub checkpoint: PathBuf,
    pub image: PathBuf,
    /// Which retained detection to export, in descending score order.
    pub instance: usize,
    pub out: Option<PathBuf>,
    pub threshold: Option<f64>,
    pub overwrite: bool,
}

#[derive(Debug)]
pub struct ExportAttnSummary {
    pub run_dir: PathBuf,
    /// Part count — one map file and one overlay per part.
    pub parts: usize,
}

/// Exports the final stage's per-part spatial attention for one detection:
/// each part's map as a JSON grid (`attn-partNN.json`) and as a heat overlay
/// on the source image (`attn-partNN.png`). Every map is re-checked to sum
/// to 1 before export.
pub fn cmd_export_attention(args: &ExportAttnArgs) -> Result<ExportAttnSummary> {
    let file = resolve_checkpoint(&args.checkpoint)?;
    let model = Model::<S>::load_checkpoint(&file, None)?.model;
    let decoded = image::open(&args.image)
        .map_err(|e| Error::Data(format!("image file {}: {e}", args.image.display())))?
        .to_rgb8();
    let array = image_to_array::<S>(&decoded).into_dyn();
    let padded = pad_to_multiple(&array, 32)?;
    let threshold = args.threshold.unwrap_or(DEFAULT_SCORE_THRESHOLD);

    let mut f = Fwd::new(model.params());
    let image_var = f.tape.constant(padded);
    let out = model.forward(&mut f, image_var)?;
    let last = out.stages.last().expect("at least one stage");
    let poses = select_poses(
        f.tape.value(last.logits),
        f.tape.value(last.boxes),
        f.tape.value(last.keypoint_mu),
        f.tape.value(last.keypoint_sigma),
        threshold,
        DEFAULT_TOP_K,
    )?;
    if args.instance >= poses.len() {
        return Err(Error::Data(format!(
            "instance index {} out of range: {} detection(s) retained at threshold {threshold}",
            args.instance,
            poses.len()
        )));
    }
    let pose = &poses[args.instance];
    let attention = f.tape.value(last.spatial_attention);
    let parts = attention.shape()[1];
    let grid = model.config().keypoint_roi * 2;

    let run_dir = prepare_run_dir(
        args.out.as_deref(),
        Path::new("runs"),
        "attn",
        args.overwrite,
    )?;
    let corners = [
        pose.bbox.x1().as_f64(),
        pose.bbox.y1().as_f64(),
        pose.bbox.x2().as_f64(),
        pose.bbox.y2().as_f64(),
    ];
    for part in 0..parts {
        let mut map = Array2::<f64>::zeros((grid, grid));
        for gy in 0..grid {
            for gx in 0..grid {
                map[[gy, gx]] =
                    attention[[pose.query_index, part, gy * grid + gx]].as_f64();
            }
        }
        let sum: f64 = map.iter().sum();
        if (sum - 1.0).abs() > 1e-5 {
            return Err(Error::Numeric(format!(
                "attention map for part {part} sums to {sum}, expected 1"
            )));
        }
        let rows: Vec<Vec<f64>> = map.rows().into_iter().map(|r| r.to_vec()).collect();
        write_json(&run_dir.join(format!("attn-part{part:02}.json")), &rows)?;
        write_heat_overlay(
            &decoded,
            corners,
            &map,
            &run_dir.join(format!("attn-part{part:02}.png")),
        )?;
    }
    write_json(
        &run_dir.join("export.json"),
        &serde_json::json!({
            "image": args.image,
            "instance": args.instance,
            "query_index": pose.query_index,
            "score": pose.score,
            "parts": parts,
            "grid": grid,
        }),
    )?;
    println!(
        "wrote {parts} attention map(s) for instance {} to {}",
        args.instance,
        run_dir.display()
    );
    Ok(ExportAttnSummary { run_dir, parts })
}

// ---------------------------------------------------------------------------
// Rendering helpers
// ---------------------------------------------------------------------------

use crate::scalar::Scalar as _;

fn array_to_image(arr: &Array3<f64>) -> image::RgbImage {
    let (h, w) = (arr.shape()[1], arr.shape()[2]);
    image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let px = |c: usize| {
            (arr[[c, y as usize, x as usize]].clamp(0.0, 1.0) * 255.0).round() as u8
        };
        image::Rgb([px(0), px(1), px(2)])
    })
}

/// Draws each pose's skeleton, joints and box outline onto the canvas.
fn render_poses(canvas: &mut Array3<f64>, poses: &[ScoredPose<S>]) {
    for (i, pose) in poses.iter().enumerate() {
        let tint = joint_color(5 * i + 23);
        let at = |k: usize| {
            (
                pose.keypoints[[k, 0]].as_f64(),
                pose.keypoints[[k, 1]].as_f64(),
            )
        };
        for (a, b) in SKELETON_EDGES.iter() {
            draw_segment(canvas, at(*a), at(*b), 2.0, tint);
        }
        for k in 0..pose.keypoints.shape()[0] {
            draw_disc(canvas, at(k).0, at(k).1, 2.0, joint_color(k), 1.0);
        }
        let [x1, y1, x2, y2] = [
            pose.bbox.x1().as_f64(),
            pose.bbox.y1().as_f64(),
            pose.bbox.x2().as_f64(),
            pose.bbox.y2().as_f64(),
        ];
        for (a, b) in [
            ((x1, y1), (x2, y1)),
            ((x2, y1), (x2, y2)),
            ((x2, y2), (x1, y2)),
            ((x1, y2), (x1, y1)),
        ] {
            draw_segment(canvas, a, b, 1.0, tint);
        }
    }
}

/// Writes the source image with `map` (over the box region) blended in as a
/// heat layer; the map is peak-normalized for visibility and bilinearly
/// upsampled to the box size.
fn write_heat_overlay(
    base: &image::RgbImage,
    corners: [f64; 4],
    map: &Array2<f64>,
    path: &Path,
) -> Result<()> {
    let mut canvas = image_to_array::<f64>(base);
    let peak = map.iter().cloned().fold(f64::MIN, f64::max).max(1e-12);
    let [x1, y1, x2, y2] = corners;
    let (rows, cols) = (canvas.shape()[1], canvas.shape()[2]);
    let grid = map.shape()[0] as f64;
    let (bw, bh) = ((x2 - x1).max(1e-6), (y2 - y1).max(1e-6));
    let y_range = (y1.max(0.0).floor() as usize)..(y2.min(rows as f64).ceil() as usize);
    for y in y_range {
        let x_range = (x1.max(0.0).floor() as usize)..(x2.min(cols as f64).ceil() as usize);
        for x in x_range {
            let u = (x as f64 + 0.5 - x1) / bw * grid - 0.5;
            let v = (y as f64 + 0.5 - y1) / bh * grid - 0.5;
            let heat = (bilinear(map, u, v) / peak).clamp(0.0, 1.0);
            let color = [heat, 0.8 * heat * heat, 0.25 * (1.0 - heat)];
            let blend = 0.65 * heat;
            for c in 0..3 {
                let p = &mut canvas[[c, y, x]];
                *p = *p * (1.0 - blend) + color[c] * blend;
            }
        }
    }
    array_to_image(&canvas)
        .save(path)
        .map_err(|e| Error::Data(format!("cannot write {}: {e}", path.display())))
}

fn bilinear(map: &Array2<f64>, u: f64, v: f64) -> f64 {
    let side = map.shape()[0] as isize;
    let clamp = |t: isize| t.clamp(0, side - 1) as usize;
    let (u0, v0) = (u.floor() as isize, v.floor() as isize);
    let (fu, fv) = (u - u0 as f64, v - v0 as f64);
    let at = |vv: isize, uu: isize| map[[clamp(vv), clamp(uu)]];
    at(v0, u0) * (1.0 - fu) * (1.0 - fv)
        + at(v0, u0 + 1) * fu * (1.0 - fv)
        + at(v0 + 1, u0) * (1.0 - fu) * fv
        + at(v0 + 1, u0 + 1) * fu * fv
}

// Re-exported for the binary and tests: the padded image type commands feed
// to models.
pub use crate::pipeline::LoadedModel;
#[allow(unused_imports)]
use ArrayD as _ArrayDUsed;
