//! Part-query keypoint regression.
//!
//! Each cascade stage pools a high-resolution RoI grid per person box,
//! distills it into one embedding per body part through learned spatial
//! attention, folds the embeddings into persistent part queries with a
//! sigmoid-gated update, relates the parts with self-attention, and
//! regresses a coordinate distribution (mean plus scale) per keypoint from
//! non-shared per-part linear heads. Keypoints are grouped into parts by a
//! configurable partition of the 17-keypoint skeleton.

use crate::error::{Error, Result};
use crate::nn::{
    Conv2d, Deconv2x2, Fwd, Init, LayerNorm, Linear, ParamCtx, ParamId, SelfAttentionBlock,
};
use crate::scalar::Scalar;
use crate::tensor::{Tape, Var};
use serde::{Deserialize, Serialize};

/// Keypoints in the standard 17-point human skeleton.
pub const NUM_KEYPOINTS: usize = 17;

// Canonical keypoint indices of the 17-point skeleton.
const NOSE: usize = 0;
const L_EYE: usize = 1;
const R_EYE: usize = 2;
const L_EAR: usize = 3;
const R_EAR: usize = 4;
const L_SHOULDER: usize = 5;
const R_SHOULDER: usize = 6;
const L_ELBOW: usize = 7;
const R_ELBOW: usize = 8;
const L_WRIST: usize = 9;
const R_WRIST: usize = 10;
const L_HIP: usize = 11;
const R_HIP: usize = 12;
const L_KNEE: usize = 13;
const R_KNEE: usize = 14;
const L_ANKLE: usize = 15;
const R_ANKLE: usize = 16;

/// Built-in groupings of the 17-keypoint skeleton into parts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PartScheme {
    /// Every keypoint is its own part (17 parts).
    PerKeypoint,
    /// The five head keypoints form one part; the rest stay singletons (13).
    MergedHead,
    /// Seven rigid groups: head, shoulders, hips, and each lower limb.
    RigidParts,
    /// Five coarse groups: head plus each whole arm and leg.
    HeadAndLimbs,
}

/// A partition of the skeleton into the keypoint groups that share one part
/// query. Groups are ordered and disjoint; every keypoint belongs to exactly
/// one group.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PartDivision {
    groups: Vec<Vec<usize>>,
    num_keypoints: usize,
}

impl PartDivision {
    /// Builds a division from explicit groups, validating that they form a
    /// partition of `0..num_keypoints`.
    pub fn from_groups(groups: Vec<Vec<usize>>, num_keypoints: usize) -> Result<Self> {
        if groups.is_empty() {
            return Err(Error::Config(
                "part division needs at least one part".into(),
            ));
        }
        let mut seen = vec![false; num_keypoints];
        for (m, group) in groups.iter().enumerate() {
            if group.is_empty() {
                return Err(Error::Config(format!("part {m} contains no keypoints")));
            }
            for &k in group {
                if k >= num_keypoints {
                    return Err(Error::Config(format!(
                        "part {m} references keypoint {k}, but there are only {num_keypoints}"
                    )));
                }
                if seen[k] {
                    return Err(Error::Config(format!(
                        "keypoint {k} is assigned to more than one part"
                    )));
                }
                seen[k] = true;
            }
        }
        if let Some(k) = seen.iter().position(|&s| !s) {
            return Err(Error::Config(format!(
                "keypoint {k} is not assigned to any part"
            )));
        }
        Ok(PartDivision {
            groups,
            num_keypoints,
        })
    }

    /// One of the preset partitions of the 17-keypoint skeleton.
    pub fn scheme(scheme: PartScheme) -> Self {
        let head = vec![NOSE, L_EYE, R_EYE, L_EAR, R_EAR];
        let groups = match scheme {
            PartScheme::PerKeypoint => (0..NUM_KEYPOINTS).map(|k| vec![k]).collect(),
            PartScheme::MergedHead => {
                let mut g = vec![head];
                g.extend((L_SHOULDER..=R_ANKLE).map(|k| vec![k]));
                g
            }
            PartScheme::RigidParts => vec![
                head,
                vec![L_SHOULDER, R_SHOULDER],
                vec![L_HIP, R_HIP],
                vec![L_ELBOW, L_WRIST],
                vec![R_ELBOW, R_WRIST],
                vec![L_KNEE, L_ANKLE],
                vec![R_KNEE, R_ANKLE],
            ],
            PartScheme::HeadAndLimbs => vec![
                head,
                vec![L_SHOULDER, L_ELBOW, L_WRIST],
                vec![R_SHOULDER, R_ELBOW, R_WRIST],
                vec![L_HIP, L_KNEE, L_ANKLE],
                vec![R_HIP, R_KNEE, R_ANKLE],
            ],
        };
        PartDivision::from_groups(groups, NUM_KEYPOINTS).expect("preset schemes are partitions")
    }

    pub fn num_parts(&self) -> usize {
        self.groups.len()
    }

    pub fn num_keypoints(&self) -> usize {
        self.num_keypoints
    }

    pub fn groups(&self) -> &[Vec<usize>] {
        &self.groups
    }

    /// For each canonical keypoint, its position in the concatenation of all
    /// groups in order; used to reassemble per-part head outputs.
    pub fn gather_indices(&self) -> Vec<usize> {
        let mut pos = vec![0usize; self.num_keypoints];
        for (i, &k) in self.groups.iter().flatten().enumerate() {
            pos[k] = i;
        }
        pos
    }
}

/// Normalizes per-part spatial logits `(N, M, P)` into attention
/// distributions and pools features `(N, P, C)` under them. Returns the
/// attention `(N, M, P)` (each row sums to 1) and the pooled features
/// `(N, M, C)`.
pub fn attention_pool<S: Scalar>(t: &mut Tape<S>, logits: Var, feats: Var) -> (Var, Var) {
    let ls = t.value(logits).shape().to_vec();
    let fs = t.value(feats).shape().to_vec();
    assert_eq!(ls.len(), 3, "logits must be (N,M,P)");
    assert_eq!(fs.len(), 3, "features must be (N,P,C)");
    assert_eq!(ls[0], fs[0], "batch sizes differ");
    assert_eq!(ls[2], fs[1], "spatial cell counts differ");
    let attention = t.softmax_last(logits);
    let pooled = t.bmm(attention, feats);
    (attention, pooled)
}

/// Per-part embeddings plus the spatial attention that produced them.
pub struct PartEmbeddingSet {
    /// `(N, M, d_p)` part embeddings.
    pub embeddings: Var,
    /// `(N, M, cells)` attention over the upsampled RoI grid; every row is a
    /// probability distribution.
    pub attention: Var,
}

/// Distills an RoI grid into one embedding per part. Two 3×3 convolutions
/// refine the grid, a learned 2× transposed convolution doubles its
/// resolution, and a 3×3 convolution emits one spatial logit map per part.
/// The logit convolution starts at zero, so attention begins as a uniform
/// average over the grid and sharpens onto its part as training proceeds.
/// Each embedding is the attention-weighted feature average projected to the
/// part-query width.
pub struct SpatialPartEmbedding {
    conv1: Conv2d,
    conv2: Conv2d,
    up: Deconv2x2,
    attn_conv: Conv2d,
    proj: Linear,
    in_channels: usize,
    width: usize,
    parts: usize,
}

impl SpatialPartEmbedding {
    pub fn new<S: Scalar>(
        ctx: &mut ParamCtx<S>,
        name: &str,
        in_channels: usize,
        width: usize,
        parts: usize,
        part_dim: usize,
    ) -> Self {
        assert!(parts > 0, "need at least one part");
        SpatialPartEmbedding {
            conv1: Conv2d::new(ctx, &format!("{name}.conv1"), in_channels, width, 3, 1, 1),
            conv2: Conv2d::new(ctx, &format!("{name}.conv2"), width, width, 3, 1, 1),
            up: Deconv2x2::new(ctx, &format!("{name}.up"), width, width),
            attn_conv: Conv2d::zeroed(ctx, &format!("{name}.attn_conv"), width, parts, 3, 1, 1),
            proj: Linear::new(ctx, &format!("{name}.proj"), width, part_dim),
            in_channels,
            width,
            parts,
        }
    }

    /// `roi (N, C, H, W)` → embeddings over the `2H × 2W` attention grid.
    pub fn forward<S: Scalar>(&self, f: &mut Fwd<S>, roi: Var) -> Result<PartEmbeddingSet> {
        let shape = f.tape.value(roi).shape().to_vec();
        if shape.len() != 4 || shape[1] != self.in_channels {
            return Err(Error::Config(format!(
                "part embedding expects (N,{},H,W) RoI grids, got {shape:?}",
                self.in_channels
            )));
        }
        let (n, h, w) = (shape[0], shape[2], shape[3]);

        let x = self.conv1.forward(f, roi);
        let x = f.tape.relu(x);
        let x = self.conv2.forward(f, x);
        let x = f.tape.relu(x);
        let x = self.up.forward(f, x); // (N, width, 2H, 2W)
        let x = f.tape.relu(x);

        let cells = 4 * h * w;
        let logits = self.attn_conv.forward(f, x); // (N, M, 2H, 2W)
        let logits = f.tape.reshape(logits, &[n, self.parts, cells]);
        let feats = f.tape.reshape(x, &[n, self.width, cells]);
        let feats = f.tape.permute(feats, &[0, 2, 1]); // (N, cells, width)
        let (attention, pooled) = attention_pool(&mut f.tape, logits, feats);
        let embeddings = self.proj.forward(f, pooled); // (N, M, d_p)
        Ok(PartEmbeddingSet {
            embeddings,
            attention,
        })
    }
}

/// The fused part queries plus both gate tensors.
pub struct GatedFusion {
    /// `g_e ⊙ embed + g_q ⊙ prev`, same shape as the inputs.
    pub updated: Var,
    /// Gate over the fresh embeddings, elementwise in (0,1).
    pub embed_gate: Var,
    /// Gate over the previous queries, elementwise in (0,1).
    pub query_gate: Var,
}

/// Sigmoid-gated fusion of the previous part queries with the embeddings
/// generated this stage: one MLP over their sum emits a per-channel gate for
/// each input. The gate layer starts at zero, so training begins from the
/// arithmetic mean of the two inputs and learns how far to trust each side.
pub struct GatedQueryUpdate {
    hidden: Linear,
    gates: Linear,
    dim: usize,
}

impl GatedQueryUpdate {
    pub fn new<S: Scalar>(ctx: &mut ParamCtx<S>, name: &str, dim: usize) -> Self {
        GatedQueryUpdate {
            hidden: Linear::new(ctx, &format!("{name}.hidden"), dim, dim),
            gates: Linear::zeroed(ctx, &format!("{name}.gates"), dim, 2 * dim),
            dim,
        }
    }

    /// `prev` and `embed` must share a shape whose last axis is the gate
    /// width; the first half of the gate layer drives the embedding gate,
    /// the second half the query gate.
    pub fn forward<S: Scalar>(&self, f: &mut Fwd<S>, prev: Var, embed: Var) -> Result<GatedFusion> {
        let ps = f.tape.value(prev).shape().to_vec();
        let es = f.tape.value(embed).shape().to_vec();
        if ps != es || ps.last() != Some(&self.dim) {
            return Err(Error::Shape(format!(
                "gated update needs matching (..., {}) inputs, got {ps:?} and {es:?}",
                self.dim
            )));
        }
        let axis = ps.len() - 1;
        let s = f.tape.add(prev, embed);
        let h = self.hidden.forward(f, s);
        let h = f.tape.relu(h);
        let g = self.gates.forward(f, h); // (..., 2d)
        let ge = f.tape.narrow(g, axis, 0, self.dim);
        let gq = f.tape.narrow(g, axis, self.dim, self.dim);
        let embed_gate = f.tape.sigmoid(ge);
        let query_gate = f.tape.sigmoid(gq);
        let we = f.tape.mul(embed_gate, embed);
        let wq = f.tape.mul(query_gate, prev);
        let updated = f.tape.add(we, wq);
        Ok(GatedFusion {
            updated,
            embed_gate,
            query_gate,
        })
    }
}

/// How part queries evolve across stages.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum QueryIteration {
    /// Gated fusion of the previous stage's queries with fresh embeddings.
    #[default]
    Gated,
    /// No iteration: each stage replaces the queries with its embeddings.
    EmbeddingOnly,
}

/// Keypoint distribution parameters for a batch of instances.
pub struct PoseOutput {
    /// `(N, K, 2)` box-normalized coordinate means.
    pub mu: Var,
    /// `(N, K, 2)` per-axis scales, sigmoid-bounded in (0,1).
    pub sigma: Var,
}

/// Non-shared per-part linear heads. Each part's head regresses, for every
/// keypoint in the part, a box-normalized mean and a raw scale per axis; the
/// scales pass through a sigmoid and the per-part outputs are reassembled
/// into canonical keypoint order.
pub struct PartHeads {
    heads: Vec<Linear>,
    division: PartDivision,
    part_dim: usize,
}

impl PartHeads {
    pub fn new<S: Scalar>(
        ctx: &mut ParamCtx<S>,
        name: &str,
        division: PartDivision,
        part_dim: usize,
    ) -> Self {
        let heads = division
            .groups()
            .iter()
            .enumerate()
            .map(|(m, g)| Linear::new(ctx, &format!("{name}.part{m}"), part_dim, g.len() * 4))
            .collect();
        PartHeads {
            heads,
            division,
            part_dim,
        }
    }

    pub fn division(&self) -> &PartDivision {
        &self.division
    }

    /// `part_queries (N, M, d_p)` → pose parameters, both `(N, K, 2)`.
    pub fn forward<S: Scalar>(&self, f: &mut Fwd<S>, part_queries: Var) -> PoseOutput {
        let shape = f.tape.value(part_queries).shape().to_vec();
        assert_eq!(shape.len(), 3, "part queries must be (N,M,d_p)");
        assert_eq!(shape[1], self.division.num_parts(), "part count mismatch");
        assert_eq!(shape[2], self.part_dim, "part query width mismatch");
        let n = shape[0];

        let mut grouped = Vec::with_capacity(self.heads.len());
        for (m, (head, group)) in self.heads.iter().zip(self.division.groups()).enumerate() {
            let q = f.tape.narrow(part_queries, 1, m, 1);
            let q = f.tape.reshape(q, &[n, self.part_dim]);
            let o = head.forward(f, q); // (N, k_m*4)
            grouped.push(f.tape.reshape(o, &[n, group.len(), 4]));
        }
        let cat = if grouped.len() == 1 {
            grouped[0]
        } else {
            f.tape.concat(&grouped, 1) // (N, K, 4) in part-grouped order
        };
        let canonical = f.tape.index_select(cat, 1, self.division.gather_indices());
        let mu = f.tape.narrow(canonical, 2, 0, 2);
        let raw = f.tape.narrow(canonical, 2, 2, 2);
        let sigma = f.tape.sigmoid(raw);
        PoseOutput { mu, sigma }
    }
}

/// Widths of one keypoint refinement stage.
#[derive(Debug, Clone, Copy)]
pub struct KeypointStageDims {
    /// Channel count of the pooled feature grid (the pyramid width).
    pub feat_channels: usize,
    /// Convolution width inside the part-embedding generator.
    pub embed_width: usize,
    /// Part query width d_p.
    pub part_dim: usize,
    /// Attention heads over the parts.
    pub heads: usize,
    /// RoI grid side pooled from the high-resolution level.
    pub roi: usize,
    /// Bilinear samples per RoI cell axis.
    pub samples: usize,
}

impl Default for KeypointStageDims {
    fn default() -> Self {
        KeypointStageDims {
            feat_channels: 256,
            embed_width: 256,
            part_dim: 128,
            heads: 8,
            roi: 14,
            samples: 2,
        }
    }
}

/// The learnable initial part queries: one `M × d_p` block shared by every
/// instance, iterated through the cascade thereafter.
pub struct PartQueries {
    pub queries: ParamId,
    parts: usize,
    dim: usize,
}

impl PartQueries {
    pub fn new<S: Scalar>(ctx: &mut ParamCtx<S>, name: &str, parts: usize, dim: usize) -> Self {
        assert!(parts > 0, "need at least one part");
        let queries = ctx.tensor_with(
            format!("{name}.part_queries"),
            &[parts, dim],
            Init::Normal { std: 0.1 },
            1.0,
            false,
        );
        PartQueries {
            queries,
            parts,
            dim,
        }
    }

    /// The shared initial queries broadcast to `n` instances: `(n, M, d_p)`.
    pub fn initial<S: Scalar>(&self, f: &mut Fwd<S>, n: usize) -> Var {
        let p = f.p(self.queries);
        let r = f.tape.reshape(p, &[1, self.parts, self.dim]);
        f.tape.broadcast_to(r, &[n, self.parts, self.dim])
    }
}

/// One keypoint stage's outputs for N instances.
pub struct StageKeypointOutput {
    /// Updated part queries `(N, M, d_p)`, the input to the next stage.
    pub part_queries: Var,
    /// Box-normalized keypoint means `(N, K, 2)`.
    pub mu: Var,
    /// Keypoint scales `(N, K, 2)` in (0,1); small means confident.
    pub sigma: Var,
    /// Spatial attention per part `(N, M, cells)` over the upsampled RoI
    /// grid, `cells = (2·roi)²`; every row sums to 1.
    pub spatial_attention: Var,
    /// Part self-attention weights `(N, heads, M, M)`.
    pub part_attention: Var,
    /// `(embedding gate, query gate)` when the stage iterates; `None` in
    /// embedding-only mode.
    pub gates: Option<(Var, Var)>,
}

/// One cascade keypoint stage: RoI pooling on the refined boxes → per-part
/// spatial attention embeddings → gated query update → part self-attention →
/// per-part regression heads.
pub struct KeypointStage {
    embed: SpatialPartEmbedding,
    update: Option<GatedQueryUpdate>,
    attn: SelfAttentionBlock,
    heads: PartHeads,
    dims: KeypointStageDims,
}

impl KeypointStage {
    pub fn new<S: Scalar>(
        ctx: &mut ParamCtx<S>,
        name: &str,
        dims: &KeypointStageDims,
        division: &PartDivision,
        iteration: QueryIteration,
    ) -> Result<Self> {
        if dims.heads == 0 || dims.part_dim % dims.heads != 0 {
            return Err(Error::Config(format!(
                "part query width {} is not divisible by {} attention heads",
                dims.part_dim, dims.heads
            )));
        }
        if dims.roi == 0 || dims.samples == 0 {
            return Err(Error::Config(
                "RoI grid side and sample count must be positive".into(),
            ));
        }
        let embed = SpatialPartEmbedding::new(
            ctx,
            &format!("{name}.embed"),
            dims.feat_channels,
            dims.embed_width,
            division.num_parts(),
            dims.part_dim,
        );
        let update = match iteration {
            QueryIteration::Gated => Some(GatedQueryUpdate::new(
                ctx,
                &format!("{name}.update"),
                dims.part_dim,
            )),
            QueryIteration::EmbeddingOnly => None,
        };
        let attn = SelfAttentionBlock::new(ctx, &format!("{name}.attn"), dims.part_dim, dims.heads);
        let heads = PartHeads::new(ctx, &format!("{name}.heads"), division.clone(), dims.part_dim);
        Ok(KeypointStage {
            embed,
            update,
            attn,
            heads,
            dims: *dims,
        })
    }

    pub fn division(&self) -> &PartDivision {
        self.heads.division()
    }

    /// Side length of the attention grid (`2·roi`), for reshaping
    /// [`StageKeypointOutput::spatial_attention`] into images.
    pub fn attention_grid(&self) -> usize {
        2 * self.dims.roi
    }

    /// Runs the stage on `feat (C,H,W)` — the stride-`stride`
    /// high-resolution pyramid level — with `boxes (N,4)` refined corner
    /// boxes in image pixels and `prev_queries (N, M, d_p)`.
    ///
    /// Box coordinates are detached before pooling, mirroring the box
    /// decoder: keypoint gradients shape features and queries, not the
    /// sampling positions.
    pub fn forward<S: Scalar>(
        &self,
        f: &mut Fwd<S>,
        feat: Var,
        stride: usize,
        boxes: Var,
        prev_queries: Var,
    ) -> Result<StageKeypointOutput> {
        let n = {
            let bs = f.tape.value(boxes).shape().to_vec();
            assert_eq!(bs.len(), 2, "boxes must be (N,4)");
            assert_eq!(bs[1], 4, "boxes must be (N,4)");
            bs[0]
        };
        let want = vec![n, self.division().num_parts(), self.dims.part_dim];
        let qs = f.tape.value(prev_queries).shape().to_vec();
        if qs != want {
            return Err(Error::Shape(format!(
                "part queries must be {want:?}, got {qs:?}"
            )));
        }

        let detached = f.tape.detach(boxes);
        let scale = S::of(1.0 / stride as f64);
        let roi = f.tape.roi_align(
            feat,
            detached,
            scale,
            (self.dims.roi, self.dims.roi),
            self.dims.samples,
        );
        let emb = self.embed.forward(f, roi)?;
        let (fused, gates) = match &self.update {
            Some(g) => {
                let fu = g.forward(f, prev_queries, emb.embeddings)?;
                (fu.updated, Some((fu.embed_gate, fu.query_gate)))
            }
            None => (emb.embeddings, None),
        };
        let att = self.attn.forward(f, fused);
        let pose = self.heads.forward(f, att.output);
        Ok(StageKeypointOutput {
            part_queries: att.output,
            mu: pose.mu,
            sigma: pose.sigma,
            spatial_attention: emb.attention,
            part_attention: att.weights,
            gates,
        })
    }
}

/// Folds a stage's part queries back into the instance-query stream: the
/// mean over parts is projected to the instance width and added residually
/// under a layer norm. The projection starts at zero so enabling the
/// fold-back does not perturb early box training.
pub struct InstanceUpdate {
    proj: Linear,
    norm: LayerNorm,
    part_dim: usize,
    dim: usize,
}

impl InstanceUpdate {
    pub fn new<S: Scalar>(ctx: &mut ParamCtx<S>, name: &str, part_dim: usize, dim: usize) -> Self {
        InstanceUpdate {
            proj: Linear::zeroed(ctx, &format!("{name}.proj"), part_dim, dim),
            norm: LayerNorm::new(ctx, &format!("{name}.norm"), dim),
            part_dim,
            dim,
        }
    }

    /// `instance_queries (N, d)` + `part_queries (N, M, d_p)` → `(N, d)`.
    pub fn forward<S: Scalar>(
        &self,
        f: &mut Fwd<S>,
        instance_queries: Var,
        part_queries: Var,
    ) -> Var {
        let qs = f.tape.value(instance_queries).shape().to_vec();
        let ps = f.tape.value(part_queries).shape().to_vec();
        assert_eq!(qs.len(), 2, "instance queries must be (N,d)");
        assert_eq!(qs[1], self.dim, "instance query width mismatch");
        assert_eq!(ps.len(), 3, "part queries must be (N,M,d_p)");
        assert_eq!(ps[0], qs[0], "instance counts differ");
        assert_eq!(ps[2], self.part_dim, "part query width mismatch");
        let pooled = f.tape.mean_axis(part_queries, 1, false); // (N, d_p)
        let delta = self.proj.forward(f, pooled);
        let res = f.tape.add(instance_queries, delta);
        self.norm.forward(f, res)
    }
}
