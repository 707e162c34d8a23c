//! Cascade box refinement over learnable instance queries.
//!
//! Each stage attends across the instance queries, pools a 7×7 RoI grid per
//! box from the pyramid level matching the box scale, fuses grid and query
//! through a per-instance dynamic channel MLP, and predicts one person logit
//! plus a center-shift/log-size box delta applied to the incoming proposal.
//! Boxes and queries start as learnable parameters: every proposal is the
//! full-image box and queries are a small random draw.

use ndarray::{Array2, ArrayD, IxDyn};

use crate::backbone::{FeaturePyramid, PYRAMID_LEVELS, PYRAMID_STRIDES};
use crate::error::{Error, Result};
use crate::nn::{Fwd, Init, LayerNorm, Linear, ParamCtx, ParamId, SelfAttentionBlock};
use crate::scalar::Scalar;
use crate::tensor::{Tape, Var};

/// Log-size deltas are clamped to ±ln(1000/16) so one refinement can scale a
/// side by at most 62.5×, the conventional bound for box-delta heads.
pub const DELTA_LOG_SIZE_CLAMP: f64 = 4.135166556742356;

/// Minimum box side after clipping, in pixels. Keeps every refined box
/// strictly valid so RoI pooling and size-based level assignment stay sound.
pub const MIN_BOX_SIZE: f64 = 1.0;

/// Initial positive probability of the classification head: its bias starts
/// at `-ln((1-p)/p)` so early focal loss is dominated by the (many) negatives.
pub const CLS_PRIOR: f64 = 0.01;

/// Pyramid level index (0 = stride 4 … 3 = stride 32) for a box of the given
/// pixel area, by the standard FPN assignment `floor(4 + log2(sqrt(a)/224))`
/// clamped to levels 2..=5.
pub fn assign_pyramid_level(area: f64) -> usize {
    if !(area > 0.0) {
        return 0;
    }
    let k = (4.0 + (area.sqrt() / 224.0).log2()).floor().clamp(2.0, 5.0);
    k as usize - 2
}

/// Clips corner boxes `(N,4)` to the image, enforcing a minimum side of
/// [`MIN_BOX_SIZE`]: `x1 ∈ [0, W-min]`, `x2 ∈ [x1+min, W]`, same for y.
/// The clamp passes gradients at the boundaries inclusively, so boxes sitting
/// exactly on the image border (like the initial full-image proposals) keep
/// learning.
pub fn clip_boxes<S: Scalar>(t: &mut Tape<S>, boxes: Var, img_w: f64, img_h: f64) -> Var {
    assert!(
        img_w >= MIN_BOX_SIZE && img_h >= MIN_BOX_SIZE,
        "image {img_w}x{img_h} smaller than the minimum box size"
    );
    let x1 = t.narrow(boxes, 1, 0, 1);
    let y1 = t.narrow(boxes, 1, 1, 1);
    let x2 = t.narrow(boxes, 1, 2, 1);
    let y2 = t.narrow(boxes, 1, 3, 1);
    let x1 = t.clamp(x1, S::zero(), S::of(img_w - MIN_BOX_SIZE));
    let y1 = t.clamp(y1, S::zero(), S::of(img_h - MIN_BOX_SIZE));
    let x2 = t.clamp(x2, S::zero(), S::of(img_w));
    let y2 = t.clamp(y2, S::zero(), S::of(img_h));
    let x_floor = t.add_scalar(x1, S::of(MIN_BOX_SIZE));
    let y_floor = t.add_scalar(y1, S::of(MIN_BOX_SIZE));
    let x2 = t.maximum(x2, x_floor);
    let y2 = t.maximum(y2, y_floor);
    t.concat(&[x1, y1, x2, y2], 1)
}

/// Refines corner boxes by center-shift/log-size deltas:
/// `cx' = cx + δx·w`, `cy' = cy + δy·h`, `w' = w·exp(δw)`, `h' = h·exp(δh)`,
/// with log-size deltas clamped to ±[`DELTA_LOG_SIZE_CLAMP`] and the result
/// clipped to the image. Errors on non-finite deltas.
pub fn apply_box_delta<S: Scalar>(
    t: &mut Tape<S>,
    deltas: Var,
    boxes: Var,
    img_w: f64,
    img_h: f64,
) -> Result<Var> {
    let dshape = t.value(deltas).shape().to_vec();
    let bshape = t.value(boxes).shape().to_vec();
    assert_eq!(dshape.len(), 2, "deltas must be (N,4)");
    assert_eq!(dshape[1], 4, "deltas must be (N,4)");
    assert_eq!(dshape, bshape, "deltas/boxes shape mismatch");
    if let Some(bad) = t.value(deltas).iter().find(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!(
            "non-finite box delta {:?}",
            bad.as_f64()
        )));
    }

    let dx = t.narrow(deltas, 1, 0, 1);
    let dy = t.narrow(deltas, 1, 1, 1);
    let dw = t.narrow(deltas, 1, 2, 1);
    let dh = t.narrow(deltas, 1, 3, 1);
    let lim = S::of(DELTA_LOG_SIZE_CLAMP);
    let dw = t.clamp(dw, -lim, lim);
    let dh = t.clamp(dh, -lim, lim);

    let x1 = t.narrow(boxes, 1, 0, 1);
    let y1 = t.narrow(boxes, 1, 1, 1);
    let x2 = t.narrow(boxes, 1, 2, 1);
    let y2 = t.narrow(boxes, 1, 3, 1);
    let w = t.sub(x2, x1);
    let h = t.sub(y2, y1);
    let half_w = t.scale(w, S::of(0.5));
    let half_h = t.scale(h, S::of(0.5));
    let cx = t.add(x1, half_w);
    let cy = t.add(y1, half_h);

    let shift_x = t.mul(dx, w);
    let shift_y = t.mul(dy, h);
    let cx = t.add(cx, shift_x);
    let cy = t.add(cy, shift_y);
    let ew = t.exp(dw);
    let eh = t.exp(dh);
    let nw = t.mul(w, ew);
    let nh = t.mul(h, eh);

    let half_nw = t.scale(nw, S::of(0.5));
    let half_nh = t.scale(nh, S::of(0.5));
    let rx1 = t.sub(cx, half_nw);
    let ry1 = t.sub(cy, half_nh);
    let rx2 = t.add(cx, half_nw);
    let ry2 = t.add(cy, half_nh);
    let raw = t.concat(&[rx1, ry1, rx2, ry2], 1);
    Ok(clip_boxes(t, raw, img_w, img_h))
}

/// Pools an `out × out` grid per box from the pyramid level assigned by
/// [`assign_pyramid_level`], preserving box order. Returns `(N, C, out, out)`.
///
/// Box coordinates are detached before pooling: boxes learn through the
/// delta parameterization and the matching losses, not through sampling
/// positions, matching the reference detector design.
pub fn multi_level_roi_align<S: Scalar>(
    t: &mut Tape<S>,
    pyramid: &FeaturePyramid,
    boxes: Var,
    out: usize,
    samples: usize,
) -> Var {
    let bv = t.value(boxes);
    assert_eq!(bv.ndim(), 2, "boxes must be (N,4)");
    assert_eq!(bv.shape()[1], 4, "boxes must be (N,4)");
    let n = bv.shape()[0];
    assert!(n > 0, "multi_level_roi_align: no boxes");
    let mut level_of = Vec::with_capacity(n);
    for i in 0..n {
        let w = (bv[[i, 2]] - bv[[i, 0]]).as_f64();
        let h = (bv[[i, 3]] - bv[[i, 1]]).as_f64();
        level_of.push(assign_pyramid_level(w * h));
    }

    let boxes = t.detach(boxes);
    let mut order: Vec<usize> = Vec::with_capacity(n);
    let mut parts: Vec<Var> = Vec::new();
    for lvl in 0..PYRAMID_LEVELS {
        let idxs: Vec<usize> = (0..n).filter(|&i| level_of[i] == lvl).collect();
        if idxs.is_empty() {
            continue;
        }
        let sel = t.index_select(boxes, 0, idxs.clone());
        let scale = S::of(1.0 / PYRAMID_STRIDES[lvl] as f64);
        parts.push(t.roi_align(pyramid.levels[lvl], sel, scale, (out, out), samples));
        order.extend(idxs);
    }
    let cat = if parts.len() == 1 {
        parts[0]
    } else {
        t.concat(&parts, 0)
    };
    if order.iter().enumerate().all(|(pos, &orig)| pos == orig) {
        return cat;
    }
    let mut inverse = vec![0usize; n];
    for (pos, &orig) in order.iter().enumerate() {
        inverse[orig] = pos;
    }
    t.index_select(cat, 0, inverse)
}

/// The learnable detection state iterated by the cascade: N proposal boxes
/// (stored center-size, normalized to [0,1], initialized to the full image)
/// and their N instance query vectors.
pub struct LearnableQueries {
    pub boxes: ParamId,
    pub queries: ParamId,
    count: usize,
}

impl LearnableQueries {
    pub fn new<S: Scalar>(ctx: &mut ParamCtx<S>, name: &str, count: usize, dim: usize) -> Self {
        assert!(count > 0, "need at least one query");
        let mut b = Array2::<S>::zeros((count, 4));
        for mut row in b.rows_mut() {
            row[0] = S::of(0.5);
            row[1] = S::of(0.5);
            row[2] = S::one();
            row[3] = S::one();
        }
        let boxes = ctx
            .set
            .add_with(format!("{name}.proposal_boxes"), b.into_dyn(), 1.0, false);
        let queries = ctx.tensor_with(
            format!("{name}.instance_queries"),
            &[count, dim],
            Init::Normal { std: 0.1 },
            1.0,
            false,
        );
        LearnableQueries {
            boxes,
            queries,
            count,
        }
    }

    pub fn count(&self) -> usize {
        self.count
    }

    /// Proposals as clipped corner boxes `(N,4)` in image pixels.
    pub fn proposal_boxes<S: Scalar>(&self, f: &mut Fwd<S>, img_w: f64, img_h: f64) -> Var {
        let p = f.p(self.boxes);
        let cx = f.tape.narrow(p, 1, 0, 1);
        let cy = f.tape.narrow(p, 1, 1, 1);
        let w = f.tape.narrow(p, 1, 2, 1);
        let h = f.tape.narrow(p, 1, 3, 1);
        let half_w = f.tape.scale(w, S::of(0.5));
        let half_h = f.tape.scale(h, S::of(0.5));
        let x1 = f.tape.sub(cx, half_w);
        let y1 = f.tape.sub(cy, half_h);
        let x2 = f.tape.add(cx, half_w);
        let y2 = f.tape.add(cy, half_h);
        let x1 = f.tape.scale(x1, S::of(img_w));
        let x2 = f.tape.scale(x2, S::of(img_w));
        let y1 = f.tape.scale(y1, S::of(img_h));
        let y2 = f.tape.scale(y2, S::of(img_h));
        let corners = f.tape.concat(&[x1, y1, x2, y2], 1);
        clip_boxes(&mut f.tape, corners, img_w, img_h)
    }

    pub fn instance_queries<S: Scalar>(&self, f: &mut Fwd<S>) -> Var {
        f.p(self.queries)
    }
}

/// Widths of one box refinement stage.
#[derive(Debug, Clone, Copy)]
pub struct BoxStageDims {
    /// Instance query width d.
    pub query_dim: usize,
    /// Attention heads over the instance queries.
    pub heads: usize,
    /// Hidden width of the per-instance dynamic channel MLP.
    pub dyn_hidden: usize,
    /// Channel count of the feature pyramid (projected to d when different).
    pub pyramid_channels: usize,
    /// RoI grid side for box features.
    pub roi: usize,
    /// Bilinear samples per RoI cell axis.
    pub samples: usize,
}

impl Default for BoxStageDims {
    fn default() -> Self {
        BoxStageDims {
            query_dim: 256,
            heads: 8,
            dyn_hidden: 64,
            pyramid_channels: 256,
            roi: 7,
            samples: 2,
        }
    }
}

/// Per-instance dynamic channel interaction: each query generates the
/// weights of a two-layer channel MLP (d → hidden → d) applied at every RoI
/// cell; the transformed grid is flattened, projected back to d, and fused
/// into the query with a residual add and layer norm.
pub struct DynamicInteraction {
    generator: Linear,
    norm_hidden: LayerNorm,
    norm_dim: LayerNorm,
    out: Linear,
    norm_fuse: LayerNorm,
    dim: usize,
    hidden: usize,
    cells: usize,
}

impl DynamicInteraction {
    pub fn new<S: Scalar>(
        ctx: &mut ParamCtx<S>,
        name: &str,
        dim: usize,
        hidden: usize,
        cells: usize,
    ) -> Self {
        DynamicInteraction {
            generator: Linear::new(ctx, &format!("{name}.gen"), dim, 2 * dim * hidden),
            norm_hidden: LayerNorm::new(ctx, &format!("{name}.norm_h"), hidden),
            norm_dim: LayerNorm::new(ctx, &format!("{name}.norm_d"), dim),
            out: Linear::new(ctx, &format!("{name}.out"), cells * dim, dim),
            norm_fuse: LayerNorm::new(ctx, &format!("{name}.norm_fuse"), dim),
            dim,
            hidden,
            cells,
        }
    }

    /// `queries (N,d)`, `tokens (N,cells,d)` → fused queries `(N,d)`.
    /// Instances never mix: all products are per-instance batched.
    pub fn forward<S: Scalar>(&self, f: &mut Fwd<S>, queries: Var, tokens: Var) -> Var {
        let qs = f.tape.value(queries).shape().to_vec();
        let ts = f.tape.value(tokens).shape().to_vec();
        assert_eq!(qs.len(), 2, "queries must be (N,d)");
        assert_eq!(ts.len(), 3, "tokens must be (N,cells,d)");
        assert_eq!(qs[1], self.dim, "query width mismatch");
        assert_eq!(ts[2], self.dim, "token width mismatch");
        assert_eq!(ts[1], self.cells, "token cell count mismatch");
        assert_eq!(qs[0], ts[0], "query/token instance counts differ");
        let n = qs[0];

        let gen = self.generator.forward(f, queries); // (N, 2*d*h)
        let p1 = f.tape.narrow(gen, 1, 0, self.dim * self.hidden);
        let p1 = f.tape.reshape(p1, &[n, self.dim, self.hidden]);
        let p2 = f.tape.narrow(gen, 1, self.dim * self.hidden, self.hidden * self.dim);
        let p2 = f.tape.reshape(p2, &[n, self.hidden, self.dim]);

        let y = f.tape.bmm(tokens, p1); // (N,cells,h)
        let y = self.norm_hidden.forward(f, y);
        let y = f.tape.relu(y);
        let y = f.tape.bmm(y, p2); // (N,cells,d)
        let y = self.norm_dim.forward(f, y);
        let y = f.tape.relu(y);
        let flat = f.tape.reshape(y, &[n, self.cells * self.dim]);
        let proj = self.out.forward(f, flat); // (N,d)
        let res = f.tape.add(queries, proj);
        self.norm_fuse.forward(f, res)
    }
}

/// One stage's outputs: refined boxes, person logits, updated queries, and
/// the instance self-attention map for inspection.
pub struct StageBoxOutput {
    /// Refined corner boxes `(N,4)`, clipped to the image.
    pub boxes: Var,
    /// Person/background logits `(N,1)`.
    pub logits: Var,
    /// Updated instance queries `(N,d)`.
    pub queries: Var,
    /// Self-attention weights `(heads,N,N)`; rows sum to 1.
    pub attention: Var,
}

/// One cascade stage: query self-attention → RoI pooling on the incoming
/// boxes → dynamic channel interaction → classification and box-delta heads.
pub struct BoxStage {
    attn: SelfAttentionBlock,
    roi_proj: Option<Linear>,
    interact: DynamicInteraction,
    cls: Linear,
    reg1: Linear,
    reg2: Linear,
    reg3: Linear,
    dims: BoxStageDims,
}

impl BoxStage {
    pub fn new<S: Scalar>(ctx: &mut ParamCtx<S>, name: &str, dims: &BoxStageDims) -> Self {
        let d = dims.query_dim;
        let attn = SelfAttentionBlock::new(ctx, &format!("{name}.attn"), d, dims.heads);
        let roi_proj = (dims.pyramid_channels != d)
            .then(|| Linear::new(ctx, &format!("{name}.roi_proj"), dims.pyramid_channels, d));
        let cells = dims.roi * dims.roi;
        let interact = DynamicInteraction::new(ctx, &format!("{name}.dyn"), d, dims.dyn_hidden, cells);
        let cls = Linear::new(ctx, &format!("{name}.cls"), d, 1);
        let prior_bias = -((1.0 - CLS_PRIOR) / CLS_PRIOR).ln();
        *ctx.set.value_mut(cls.b.expect("cls head has a bias")) =
            ArrayD::from_elem(IxDyn(&[1]), S::of(prior_bias));
        // Final delta layer starts at zero so stage outputs equal clipped
        // inputs before any training.
        let reg1 = Linear::new(ctx, &format!("{name}.reg1"), d, d);
        let reg2 = Linear::new(ctx, &format!("{name}.reg2"), d, d);
        let reg3 = Linear::zeroed(ctx, &format!("{name}.reg3"), d, 4);
        BoxStage {
            attn,
            roi_proj,
            interact,
            cls,
            reg1,
            reg2,
            reg3,
            dims: *dims,
        }
    }

    /// Runs the stage on `boxes (N,4)` corner proposals (assumed valid and
    /// clipped) and `queries (N,d)`.
    pub fn forward<S: Scalar>(
        &self,
        f: &mut Fwd<S>,
        pyramid: &FeaturePyramid,
        boxes: Var,
        queries: Var,
        img_w: f64,
        img_h: f64,
    ) -> Result<StageBoxOutput> {
        let n = {
            let bs = f.tape.value(boxes).shape().to_vec();
            let qs = f.tape.value(queries).shape().to_vec();
            assert_eq!(bs.len(), 2, "boxes must be (N,4)");
            assert_eq!(bs[1], 4, "boxes must be (N,4)");
            assert_eq!(qs, vec![bs[0], self.dims.query_dim], "queries must be (N,d)");
            bs[0]
        };
        let d = self.dims.query_dim;
        let cells = self.dims.roi * self.dims.roi;

        // RoI features from the incoming boxes (Eq. order: pool before refine).
        let roi = multi_level_roi_align(&mut f.tape, pyramid, boxes, self.dims.roi, self.dims.samples);
        let tok = f.tape.reshape(roi, &[n, self.dims.pyramid_channels, cells]);
        let tok = f.tape.permute(tok, &[0, 2, 1]); // (N,cells,pc)
        let tok = match &self.roi_proj {
            Some(p) => p.forward(f, tok),
            None => tok,
        };

        let q3 = f.tape.reshape(queries, &[1, n, d]);
        let att = self.attn.forward(f, q3);
        let q = f.tape.reshape(att.output, &[n, d]);
        let q = self.interact.forward(f, q, tok);

        let logits = self.cls.forward(f, q); // (N,1)
        let h1 = self.reg1.forward(f, q);
        let h1 = f.tape.relu(h1);
        let h2 = self.reg2.forward(f, h1);
        let h2 = f.tape.relu(h2);
        let deltas = self.reg3.forward(f, h2); // (N,4)
        let refined = apply_box_delta(&mut f.tape, deltas, boxes, img_w, img_h)?;

        let heads = self.dims.heads;
        let attention = f.tape.reshape(att.weights, &[heads, n, n]);
        Ok(StageBoxOutput {
            boxes: refined,
            logits,
            queries: q,
            attention,
        })
    }
}
