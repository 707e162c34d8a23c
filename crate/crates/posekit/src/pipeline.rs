//! The assembled model: backbone, cascaded box and keypoint decoders over
//! learnable queries, set-matched training, and suppression-free inference.
//!
//! Each cascade stage consumes the previous stage's boxes (treated as fixed
//! proposals), instance queries and part queries, and emits refined versions
//! of all three plus predictions. Training supervises every stage with an
//! independently matched set loss; inference reads the last stage only and
//! ranks candidates by a pose score with no non-maximum suppression or
//! grouping of any kind.

use std::cmp::Ordering;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array2, ArrayD, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneConfig, PYRAMID_STRIDES};
use crate::box_decoder::{BoxStage, BoxStageDims, LearnableQueries};
use crate::error::{Error, Result};
use crate::geometry::{denormalize_keypoints, BBox, PersonAnnotation};
use crate::keypoint_decoder::{
    InstanceUpdate, KeypointStage, KeypointStageDims, PartDivision, PartQueries, PartScheme,
    QueryIteration, NUM_KEYPOINTS,
};
use crate::matching::{stage_loss, SetLossConfig, StagePredictions};
use crate::nn::{AdamW, Fwd, ParamCtx, ParamSet};
use crate::rle_flow::{FlowConfig, FlowModel, LikelihoodMode};
use crate::scalar::Scalar;
use crate::tensor::Var;

/// Inference keeps poses scoring at least this much unless told otherwise.
pub const DEFAULT_SCORE_THRESHOLD: f64 = 0.3;
/// Inference returns at most this many poses unless told otherwise.
pub const DEFAULT_TOP_K: usize = 20;

/// Whether the instance queries flow through the keypoint decoder too.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InstanceIteration {
    /// Between stages, each stage's part queries are folded back into the
    /// instance-query stream, so the next box decoder sees keypoint
    /// evidence.
    #[default]
    Serial,
    /// Instance queries evolve through the box decoder only. The keypoint
    /// decoder still runs every stage but never writes back.
    BoxOnly,
}

/// Optimizer hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    /// Decoupled weight decay on matrix-shaped parameters.
    pub weight_decay: f64,
    /// Global gradient-norm clip; zero or negative disables clipping.
    pub clip_norm: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            learning_rate: 1e-4,
            weight_decay: 1e-4,
            clip_norm: 1.0,
        }
    }
}

impl OptimizerConfig {
    pub fn clip(&self) -> Option<f64> {
        (self.clip_norm > 0.0).then_some(self.clip_norm)
    }
}

/// Everything that determines the model's architecture and training setup.
///
/// Defaults follow the reference scale (six stages, one hundred queries,
/// 256-wide instance queries); [`ModelConfig::desk`] shrinks the stage and
/// query counts to something a CPU can train.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Cascade depth S.
    pub stages: usize,
    /// Instance query count N.
    pub queries: usize,
    /// Instance query width d.
    pub query_dim: usize,
    /// Part query width d_p.
    pub part_dim: usize,
    /// Preset partition of the skeleton into parts.
    pub part_scheme: PartScheme,
    /// Explicit part groups; overrides `part_scheme` when set.
    pub part_groups: Option<Vec<Vec<usize>>>,
    /// Serial instance-query iteration or box-decoder-only.
    pub iteration: InstanceIteration,
    /// Gated part-query iteration or embedding-only replacement.
    pub part_update: QueryIteration,
    /// Default side length of (square) input images; any size whose height
    /// and width are positive multiples of 32 is accepted at runtime.
    pub image_size: usize,
    pub backbone: BackboneConfig,
    /// Attention heads over the instance queries.
    pub box_heads: usize,
    /// Attention heads over the part queries.
    pub part_heads: usize,
    /// Hidden width of the per-instance dynamic channel MLP.
    pub dyn_hidden: usize,
    /// RoI grid side for box features.
    pub box_roi: usize,
    /// RoI grid side for keypoint features (pooled from the stride-4 level).
    pub keypoint_roi: usize,
    /// Convolution width inside the part-embedding generator.
    pub embed_width: usize,
    /// Bilinear samples per RoI cell axis.
    pub roi_samples: usize,
    pub loss: SetLossConfig,
    pub flow: FlowConfig,
    /// How the keypoint likelihood is assembled from the flow density.
    pub likelihood: LikelihoodMode,
    pub optimizer: OptimizerConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            stages: 6,
            queries: 100,
            query_dim: 256,
            part_dim: 128,
            part_scheme: PartScheme::RigidParts,
            part_groups: None,
            iteration: InstanceIteration::Serial,
            part_update: QueryIteration::Gated,
            image_size: 256,
            backbone: BackboneConfig::default(),
            box_heads: 8,
            part_heads: 8,
            dyn_hidden: 64,
            box_roi: 7,
            keypoint_roi: 14,
            embed_width: 256,
            roi_samples: 2,
            loss: SetLossConfig::default(),
            flow: FlowConfig::default(),
            likelihood: LikelihoodMode::Residual,
            optimizer: OptimizerConfig::default(),
        }
    }
}

impl ModelConfig {
    /// Desk-scale preset: three stages and twenty queries on 256×256 images.
    /// Module widths keep their reference values.
    pub fn desk() -> Self {
        ModelConfig {
            stages: 3,
            queries: 20,
            image_size: 256,
            ..ModelConfig::default()
        }
    }

    /// The part division this config selects.
    pub fn division(&self) -> Result<PartDivision> {
        match &self.part_groups {
            Some(groups) => PartDivision::from_groups(groups.clone(), NUM_KEYPOINTS),
            None => Ok(PartDivision::scheme(self.part_scheme)),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages == 0 {
            return Err(Error::Config("the cascade needs at least one stage".into()));
        }
        if self.queries == 0 {
            return Err(Error::Config("need at least one instance query".into()));
        }
        if self.image_size == 0 || self.image_size % 32 != 0 {
            return Err(Error::Config(format!(
                "image size must be a positive multiple of 32, got {}",
                self.image_size
            )));
        }
        if self.box_heads == 0 || self.query_dim % self.box_heads != 0 {
            return Err(Error::Config(format!(
                "instance query width {} is not divisible by {} attention heads",
                self.query_dim, self.box_heads
            )));
        }
        if self.part_heads == 0 || self.part_dim % self.part_heads != 0 {
            return Err(Error::Config(format!(
                "part query width {} is not divisible by {} attention heads",
                self.part_dim, self.part_heads
            )));
        }
        if self.box_roi == 0 || self.keypoint_roi == 0 || self.roi_samples == 0 {
            return Err(Error::Config(
                "RoI grid sides and sample counts must be positive".into(),
            ));
        }
        if self.dyn_hidden == 0 || self.embed_width == 0 {
            return Err(Error::Config(
                "dynamic MLP and embedding widths must be positive".into(),
            ));
        }
        self.division().map(|_| ())
    }

    /// Errors when `other` would build a different parameter set — the
    /// config conflict surfaced when a checkpoint does not match the
    /// architecture it is loaded into. Pure training settings (loss weights,
    /// optimizer, likelihood mode) may differ.
    pub fn ensure_same_architecture(&self, other: &ModelConfig) -> Result<()> {
        fn same<T: PartialEq + std::fmt::Debug>(field: &str, a: &T, b: &T) -> Result<()> {
            if a == b {
                Ok(())
            } else {
                Err(Error::Config(format!(
                    "config conflict: {field} differs ({a:?} vs {b:?})"
                )))
            }
        }
        same("stages", &self.stages, &other.stages)?;
        same("queries", &self.queries, &other.queries)?;
        same("query_dim", &self.query_dim, &other.query_dim)?;
        same("part_dim", &self.part_dim, &other.part_dim)?;
        same("part division", &self.division()?, &other.division()?)?;
        same("iteration", &self.iteration, &other.iteration)?;
        same("part_update", &self.part_update, &other.part_update)?;
        same("backbone", &self.backbone, &other.backbone)?;
        same("box_heads", &self.box_heads, &other.box_heads)?;
        same("part_heads", &self.part_heads, &other.part_heads)?;
        same("dyn_hidden", &self.dyn_hidden, &other.dyn_hidden)?;
        same("box_roi", &self.box_roi, &other.box_roi)?;
        same("keypoint_roi", &self.keypoint_roi, &other.keypoint_roi)?;
        same("embed_width", &self.embed_width, &other.embed_width)?;
        same("roi_samples", &self.roi_samples, &other.roi_samples)?;
        same("flow couplings", &self.flow.couplings, &other.flow.couplings)?;
        same("flow hidden width", &self.flow.hidden, &other.flow.hidden)?;
        Ok(())
    }
}

/// One training example: an image and its person annotations.
#[derive(Debug, Clone)]
pub struct Sample<S: Scalar> {
    /// `(3, H, W)` image tensor; H and W must be positive multiples of 32.
    pub image: ArrayD<S>,
    pub persons: Vec<PersonAnnotation<S>>,
}

/// One stage's predictions and inspection tensors.
pub struct StageOutput {
    /// Refined corner boxes `(N, 4)` in image pixels.
    pub boxes: Var,
    /// Person logits `(N,)`.
    pub logits: Var,
    /// Box-normalized keypoint means `(N, K, 2)`.
    pub keypoint_mu: Var,
    /// Keypoint scales `(N, K, 2)` in (0, 1); small means confident.
    pub keypoint_sigma: Var,
    /// Per-part spatial attention `(N, M, (2·roi)²)`; rows sum to 1.
    pub spatial_attention: Var,
    /// Part self-attention `(N, heads, M, M)`; rows sum to 1.
    pub part_attention: Var,
    /// Instance self-attention `(heads, N, N)`; rows sum to 1.
    pub box_attention: Var,
    /// Part-update `(embedding gate, query gate)` under gated iteration.
    pub gates: Option<(Var, Var)>,
}

impl StageOutput {
    /// The loss-facing view of this stage.
    pub fn predictions(&self) -> StagePredictions {
        StagePredictions {
            logits: self.logits,
            boxes: self.boxes,
            keypoint_mu: self.keypoint_mu,
            keypoint_sigma: self.keypoint_sigma,
        }
    }
}

/// All stages' outputs for one image, first stage first.
pub struct ForwardOutput {
    pub stages: Vec<StageOutput>,
}

/// Weighted loss contributions of one stage, averaged over the batch.
/// `total = cls + l1 + giou + keypoint` (the weights are already applied).
#[derive(Debug, Clone, Copy, Default, Serialize)]
pub struct StageTerms {
    pub cls: f64,
    pub l1: f64,
    pub giou: f64,
    pub keypoint: f64,
    pub total: f64,
}

/// One training step's bookkeeping.
#[derive(Debug, Clone, Serialize)]
pub struct TrainStats {
    /// Batch-mean total loss — the quantity the step descended.
    pub total: f64,
    /// Per-stage weighted terms; stage totals sum to `total`.
    pub stages: Vec<StageTerms>,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    /// Scale applied by gradient clipping (1.0 when inactive).
    pub clip_factor: f64,
    /// Matched instances with at least one supervised keypoint, summed over
    /// the batch and stages.
    pub supervised_instances: usize,
}

/// One detected pose.
#[derive(Debug, Clone)]
pub struct ScoredPose<S: Scalar> {
    /// Index of the query slot that produced this pose, for looking up
    /// per-instance diagnostics (attention maps, gates) in stage outputs.
    pub query_index: usize,
    /// `(K, 2)` keypoint positions in image pixels.
    pub keypoints: Array2<S>,
    /// Ranking score `(1/K)·Σ_k (1−σ̂_k)·C̄`, in [0, 1].
    pub score: f64,
    /// Per-keypoint certainty `1 − σ̂_k`, each in (0, 1).
    pub keypoint_scores: Vec<f64>,
    /// The predicted person box.
    pub bbox: BBox<S>,
    /// Person confidence `C̄ = sigmoid(logit)`.
    pub instance_score: f64,
}

/// The complete model: every trainable tensor plus the stage wiring.
pub struct Model<S: Scalar> {
    params: ParamSet<S>,
    backbone: Backbone,
    queries: LearnableQueries,
    part_queries: PartQueries,
    box_stages: Vec<BoxStage>,
    keypoint_stages: Vec<KeypointStage>,
    /// Per-boundary instance-query write-back (serial mode only): entry `s`
    /// folds stage `s`'s part queries into the instance queries feeding
    /// stage `s + 1`. The last stage has no boundary, so there are S − 1.
    folds: Vec<InstanceUpdate>,
    flow: FlowModel,
    config: ModelConfig,
}

impl<S: Scalar> Model<S> {
    /// Builds a freshly initialized model; `seed` fixes every random draw.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let division = config.division()?;
        let mut ctx = ParamCtx::<S>::new(ChaCha8Rng::seed_from_u64(seed));
        let backbone = Backbone::new(&mut ctx, "backbone", &config.backbone);
        let queries = LearnableQueries::new(&mut ctx, "queries", config.queries, config.query_dim);
        let part_queries =
            PartQueries::new(&mut ctx, "queries", division.num_parts(), config.part_dim);
        let box_dims = BoxStageDims {
            query_dim: config.query_dim,
            heads: config.box_heads,
            dyn_hidden: config.dyn_hidden,
            pyramid_channels: config.backbone.pyramid_channels,
            roi: config.box_roi,
            samples: config.roi_samples,
        };
        let kp_dims = KeypointStageDims {
            feat_channels: config.backbone.pyramid_channels,
            embed_width: config.embed_width,
            part_dim: config.part_dim,
            heads: config.part_heads,
            roi: config.keypoint_roi,
            samples: config.roi_samples,
        };
        let mut box_stages = Vec::with_capacity(config.stages);
        let mut keypoint_stages = Vec::with_capacity(config.stages);
        let mut folds = Vec::new();
        for s in 0..config.stages {
            box_stages.push(BoxStage::new(&mut ctx, &format!("box{s}"), &box_dims));
            keypoint_stages.push(KeypointStage::new(
                &mut ctx,
                &format!("kp{s}"),
                &kp_dims,
                &division,
                config.part_update,
            )?);
            if config.iteration == InstanceIteration::Serial && s + 1 < config.stages {
                folds.push(InstanceUpdate::new(
                    &mut ctx,
                    &format!("fold{s}"),
                    config.part_dim,
                    config.query_dim,
                ));
            }
        }
        let flow = FlowModel::new(&mut ctx, "flow", &config.flow);
        Ok(Model {
            params: ctx.set,
            backbone,
            queries,
            part_queries,
            box_stages,
            keypoint_stages,
            folds,
            flow,
            config,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet<S> {
        &self.params
    }

    pub fn flow(&self) -> &FlowModel {
        &self.flow
    }

    /// An optimizer matching this model's parameters and config.
    pub fn optimizer(&self) -> AdamW<S> {
        AdamW::new(
            &self.params,
            self.config.optimizer.weight_decay,
            self.config.optimizer.clip(),
        )
    }

    /// Runs the cascade on one `(3, H, W)` image (sides positive multiples
    /// of 32). `f` must wrap this model's parameter set.
    ///
    /// Stage `s` consumes the previous stage's boxes — detached at the
    /// boundary, so refined boxes act as fresh proposals — plus the instance
    /// and part queries, and emits refined versions of all three. In serial
    /// mode the part queries are folded back into the instance stream
    /// between stages; in box-only mode the keypoint decoder still runs but
    /// never writes back, so the box pathway is identical in both modes
    /// until a write-back could differ.
    pub fn forward(&self, f: &mut Fwd<S>, image: Var) -> Result<ForwardOutput> {
        let shape = f.tape.value(image).shape().to_vec();
        if shape.len() != 3 {
            return Err(Error::Shape(format!(
                "expected a (3, H, W) image, got {shape:?}"
            )));
        }
        let (h, w) = (shape[1] as f64, shape[2] as f64);
        let pyramid = self.backbone.forward(f, image)?;
        let n = self.config.queries;

        let mut boxes = self.queries.proposal_boxes(f, w, h);
        let mut instance_q = self.queries.instance_queries(f);
        let mut part_q = self.part_queries.initial(f, n);
        let mut stages = Vec::with_capacity(self.config.stages);
        for s in 0..self.config.stages {
            if s > 0 {
                boxes = f.tape.detach(boxes);
            }
            let b = self.box_stages[s].forward(f, &pyramid, boxes, instance_q, w, h)?;
            let k = self.keypoint_stages[s].forward(
                f,
                pyramid.levels[0],
                PYRAMID_STRIDES[0],
                b.boxes,
                part_q,
            )?;
            boxes = b.boxes;
            part_q = k.part_queries;
            instance_q = match self.folds.get(s) {
                Some(fold) => fold.forward(f, b.queries, k.part_queries),
                None => b.queries,
            };
            let logits = f.tape.reshape(b.logits, &[n]);
            stages.push(StageOutput {
                boxes: b.boxes,
                logits,
                keypoint_mu: k.mu,
                keypoint_sigma: k.sigma,
                spatial_attention: k.spatial_attention,
                part_attention: k.part_attention,
                box_attention: b.attention,
                gates: k.gates,
            });
        }
        Ok(ForwardOutput { stages })
    }

    /// One optimizer step on a batch: every stage's set loss (matched
    /// independently per stage and image) is summed, averaged over the
    /// batch, and backpropagated. A non-finite term aborts the step — named
    /// in the error — before any parameter changes.
    pub fn train_step(
        &mut self,
        optimizer: &mut AdamW<S>,
        batch: &[Sample<S>],
    ) -> Result<TrainStats> {
        if batch.is_empty() {
            return Err(Error::Data("training batch is empty".into()));
        }
        let lr = self.config.optimizer.learning_rate;
        let scale = 1.0 / batch.len() as f64;

        let (grads, mut stats) = {
            let mut f = Fwd::new(&self.params);
            let mut terms = vec![StageTerms::default(); self.config.stages];
            let mut supervised = 0usize;
            let mut total: Option<Var> = None;
            for sample in batch {
                let image = f.tape.constant(sample.image.clone());
                let out = self.forward(&mut f, image)?;
                let ishape = sample.image.shape();
                let (img_h, img_w) = (S::of(ishape[1] as f64), S::of(ishape[2] as f64));
                for (s, stage) in out.stages.iter().enumerate() {
                    let loss = stage_loss(
                        &mut f,
                        &self.flow,
                        &self.config.loss,
                        self.config.likelihood,
                        &stage.predictions(),
                        &sample.persons,
                        img_w,
                        img_h,
                    )?;
                    let cls =
                        f.tape.scalar_value(loss.cls).as_f64() * self.config.loss.cls_weight;
                    let l1 = f.tape.scalar_value(loss.l1).as_f64() * self.config.loss.l1_weight;
                    let giou =
                        f.tape.scalar_value(loss.giou).as_f64() * self.config.loss.giou_weight;
                    let keypoint = f.tape.scalar_value(loss.keypoint).as_f64();
                    for (name, v) in [
                        ("classification", cls),
                        ("box-l1", l1),
                        ("giou", giou),
                        ("keypoint", keypoint),
                    ] {
                        if !v.is_finite() {
                            return Err(Error::Numeric(format!(
                                "stage {s} {name} loss is non-finite ({v}); step aborted"
                            )));
                        }
                    }
                    terms[s].cls += cls * scale;
                    terms[s].l1 += l1 * scale;
                    terms[s].giou += giou * scale;
                    terms[s].keypoint += keypoint * scale;
                    terms[s].total += f.tape.scalar_value(loss.total).as_f64() * scale;
                    supervised += loss.supervised_instances;
                    total = Some(match total {
                        Some(t) => f.tape.add(t, loss.total),
                        None => loss.total,
                    });
                }
            }
            let total = total.expect("at least one stage");
            let total = f.tape.scale(total, S::of(scale));
            let total_value = f.tape.scalar_value(total).as_f64();
            let mut grads = f.tape.backward(total);
            (
                f.param_grads(&mut grads),
                TrainStats {
                    total: total_value,
                    stages: terms,
                    grad_norm: 0.0,
                    clip_factor: 1.0,
                    supervised_instances: supervised,
                },
            )
        };
        let step = optimizer.step(&mut self.params, &grads, lr);
        stats.grad_norm = step.grad_norm;
        stats.clip_factor = step.clip_factor;
        Ok(stats)
    }

    /// Detects poses in one `(3, H, W)` image from the last stage's
    /// predictions only: candidates are scored, thresholded, sorted and
    /// truncated to `top_k` — no suppression, so overlapping poses above
    /// threshold all appear.
    pub fn infer(
        &self,
        image: &ArrayD<S>,
        score_threshold: f64,
        top_k: usize,
    ) -> Result<Vec<ScoredPose<S>>> {
        let mut f = Fwd::new(&self.params);
        let image = f.tape.constant(image.clone());
        let out = self.forward(&mut f, image)?;
        let last = out.stages.last().expect("at least one stage");
        select_poses(
            f.tape.value(last.logits),
            f.tape.value(last.boxes),
            f.tape.value(last.keypoint_mu),
            f.tape.value(last.keypoint_sigma),
            score_threshold,
            top_k,
        )
    }
}

/// Scores and selects poses from one stage's raw outputs: `logits (N,)`,
/// `boxes (N,4)` corner boxes, `mu`/`sigma (N,K,2)` box-normalized keypoint
/// means and per-axis scales.
///
/// The pose score is `(1/K)·Σ_k (1−σ̂_k)·C̄` where `σ̂_k` averages keypoint
/// k's two per-axis scales and `C̄ = sigmoid(logit)`. Poses scoring at least
/// `score_threshold` are sorted by descending score (ties keep index order)
/// and truncated to `top_k`. Keypoints are denormalized by the predicted
/// box.
pub fn select_poses<S: Scalar>(
    logits: &ArrayD<S>,
    boxes: &ArrayD<S>,
    mu: &ArrayD<S>,
    sigma: &ArrayD<S>,
    score_threshold: f64,
    top_k: usize,
) -> Result<Vec<ScoredPose<S>>> {
    if logits.ndim() != 1 {
        return Err(Error::Shape(format!(
            "logits must be (N,), got {:?}",
            logits.shape()
        )));
    }
    let n = logits.shape()[0];
    if boxes.shape() != [n, 4] {
        return Err(Error::Shape(format!(
            "boxes must be ({n}, 4), got {:?}",
            boxes.shape()
        )));
    }
    if mu.ndim() != 3 || mu.shape()[0] != n || mu.shape()[1] == 0 || mu.shape()[2] != 2 {
        return Err(Error::Shape(format!(
            "keypoint means must be ({n}, K, 2), got {:?}",
            mu.shape()
        )));
    }
    if sigma.shape() != mu.shape() {
        return Err(Error::Shape(format!(
            "keypoint scales {:?} do not match means {:?}",
            sigma.shape(),
            mu.shape()
        )));
    }
    let k = mu.shape()[1];

    let mut picked = Vec::new();
    for i in 0..n {
        let confidence = 1.0 / (1.0 + (-logits[[i]].as_f64()).exp());
        let keypoint_scores: Vec<f64> = (0..k)
            .map(|j| 1.0 - 0.5 * (sigma[[i, j, 0]].as_f64() + sigma[[i, j, 1]].as_f64()))
            .collect();
        let score = keypoint_scores.iter().sum::<f64>() / k as f64 * confidence;
        if score < score_threshold {
            continue;
        }
        let bbox = BBox::new(
            boxes[[i, 0]],
            boxes[[i, 1]],
            boxes[[i, 2]],
            boxes[[i, 3]],
        )?;
        let mut normalized = Array2::<S>::zeros((k, 2));
        for j in 0..k {
            normalized[[j, 0]] = mu[[i, j, 0]];
            normalized[[j, 1]] = mu[[i, j, 1]];
        }
        picked.push(ScoredPose {
            query_index: i,
            keypoints: denormalize_keypoints(&normalized, &bbox),
            score,
            keypoint_scores,
            bbox,
            instance_score: confidence,
        });
    }
    picked.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap_or(Ordering::Equal));
    picked.truncate(top_k);
    Ok(picked)
}

const CHECKPOINT_MAGIC: [u8; 4] = *b"PKCP";
/// Format version written into every checkpoint.
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TensorMeta {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    config: ModelConfig,
    step: u64,
    tensors: Vec<TensorMeta>,
    optimizer: bool,
}

/// A model restored from a checkpoint, with its recorded training step and
/// (when saved) optimizer state.
pub struct LoadedModel<S: Scalar> {
    pub model: Model<S>,
    pub step: u64,
    pub optimizer: Option<AdamW<S>>,
}

impl<S: Scalar> Model<S> {
    /// Writes parameters — and the optimizer moments when given — together
    /// with the config, the training step and a format version. Values are
    /// stored as little-endian `f64`, so round-trips are bit-exact for both
    /// scalar types.
    pub fn save_checkpoint(
        &self,
        path: &Path,
        optimizer: Option<&AdamW<S>>,
        step: u64,
    ) -> Result<()> {
        let header = CheckpointHeader {
            config: self.config.clone(),
            step,
            tensors: self
                .params
                .entries()
                .iter()
                .map(|e| TensorMeta {
                    name: e.name.clone(),
                    shape: e.value.shape().to_vec(),
                })
                .collect(),
            optimizer: optimizer.is_some(),
        };
        let header_bytes = serde_json::to_vec(&header)?;
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(&CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&(header_bytes.len() as u64).to_le_bytes())?;
        w.write_all(&header_bytes)?;
        for entry in self.params.entries() {
            write_values(&mut w, &entry.value)?;
        }
        if let Some(opt) = optimizer {
            let (m, v) = opt.moments();
            for arr in m.iter().chain(v.iter()) {
                write_values(&mut w, arr)?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Loads a checkpoint written by [`Model::save_checkpoint`]. When
    /// `expected` is given, the stored config must describe the same
    /// architecture or loading fails with a config-conflict error.
    pub fn load_checkpoint(path: &Path, expected: Option<&ModelConfig>) -> Result<LoadedModel<S>> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 4];
        read_bytes(&mut r, &mut magic, "magic")?;
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint(
                "not a model checkpoint (bad magic bytes)".into(),
            ));
        }
        let mut version = [0u8; 4];
        read_bytes(&mut r, &mut version, "version")?;
        let version = u32::from_le_bytes(version);
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {version}; this build reads version {CHECKPOINT_VERSION}"
            )));
        }
        let mut len = [0u8; 8];
        read_bytes(&mut r, &mut len, "header length")?;
        let mut header_bytes = vec![0u8; u64::from_le_bytes(len) as usize];
        read_bytes(&mut r, &mut header_bytes, "header")?;
        let header: CheckpointHeader = serde_json::from_slice(&header_bytes)?;

        if let Some(expected) = expected {
            expected.ensure_same_architecture(&header.config)?;
        }
        let mut model = Model::<S>::new(header.config, 0)?;
        if header.tensors.len() != model.params.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint stores {} tensors but the architecture has {}",
                header.tensors.len(),
                model.params.len()
            )));
        }
        for (meta, entry) in header.tensors.iter().zip(model.params.entries_mut()) {
            if meta.name != entry.name || meta.shape != entry.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "checkpoint tensor {} {:?} does not match parameter {} {:?}",
                    meta.name,
                    meta.shape,
                    entry.name,
                    entry.value.shape()
                )));
            }
            entry.value = read_values(&mut r, &meta.shape)?;
        }
        let optimizer = if header.optimizer {
            let mut opt = model.optimizer();
            let shapes: Vec<Vec<usize>> =
                header.tensors.iter().map(|t| t.shape.clone()).collect();
            let mut read_moments = || -> Result<Vec<ArrayD<S>>> {
                shapes.iter().map(|s| read_values(&mut r, s)).collect()
            };
            let m = read_moments()?;
            let v = read_moments()?;
            opt.restore(m, v, header.step);
            Some(opt)
        } else {
            None
        };
        Ok(LoadedModel {
            model,
            step: header.step,
            optimizer,
        })
    }
}

fn write_values<S: Scalar, W: Write>(w: &mut W, arr: &ArrayD<S>) -> Result<()> {
    let mut buf = Vec::with_capacity(arr.len() * 8);
    for v in arr.iter() {
        buf.extend_from_slice(&v.as_f64().to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

fn read_values<S: Scalar, R: Read>(r: &mut R, shape: &[usize]) -> Result<ArrayD<S>> {
    let mut buf = vec![0u8; shape.iter().product::<usize>() * 8];
    read_bytes(r, &mut buf, "tensor data")?;
    let values = buf
        .chunks_exact(8)
        .map(|c| S::of(f64::from_le_bytes(c.try_into().expect("8-byte chunk"))))
        .collect();
    ArrayD::from_shape_vec(IxDyn(shape), values)
        .map_err(|e| Error::Checkpoint(format!("bad tensor shape in checkpoint: {e}")))
}

fn read_bytes<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf)
        .map_err(|e| Error::Checkpoint(format!("checkpoint truncated reading {what}: {e}")))
}
