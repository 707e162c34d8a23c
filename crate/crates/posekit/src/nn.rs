//! Parameter storage, common layers and the optimizer.
//!
//! Parameters live in a [`ParamSet`] keyed by hierarchical names
//! (`"box.s0.attn.wq.w"`). A [`Fwd`] context lazily binds each parameter to
//! a tape leaf once per forward pass, so layer code reads naturally while
//! gradients map back to parameter indices after `backward`.

use std::collections::HashMap;

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::scalar::Scalar;
use crate::tensor::{Gradients, Tape, Var};

/// Stable handle to one parameter tensor in a [`ParamSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(usize);

pub struct ParamEntry<S: Scalar> {
    pub name: String,
    pub value: ArrayD<S>,
    /// Per-parameter learning-rate multiplier (flow parameters train faster).
    pub lr_mult: f64,
    /// Whether decoupled weight decay applies (off for biases and norms).
    pub decay: bool,
}

/// Named collection of trainable tensors.
pub struct ParamSet<S: Scalar> {
    entries: Vec<ParamEntry<S>>,
    index: HashMap<String, usize>,
}

impl<S: Scalar> Default for ParamSet<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> ParamSet<S> {
    pub fn new() -> Self {
        ParamSet {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: ArrayD<S>) -> ParamId {
        self.add_with(name, value, 1.0, true)
    }

    pub fn add_with(
        &mut self,
        name: impl Into<String>,
        value: ArrayD<S>,
        lr_mult: f64,
        decay: bool,
    ) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name {name:?}"
        );
        let id = ParamId(self.entries.len());
        self.index.insert(name.clone(), id.0);
        self.entries.push(ParamEntry {
            name,
            value,
            lr_mult,
            decay,
        });
        id
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn value(&self, id: ParamId) -> &ArrayD<S> {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut ArrayD<S> {
        &mut self.entries[id.0].value
    }

    pub fn entries(&self) -> &[ParamEntry<S>] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry<S>] {
        &mut self.entries
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    /// Total scalar count across all tensors.
    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }
}

/// Weight initialization schemes. Draws are made in `f64` and converted, so
/// a given seed produces the same parameters for every scalar type.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Const(f64),
    /// Uniform in `(-bound, bound)` with `bound = 1/sqrt(fan_in)`, the
    /// conventional default for linear and convolution weights.
    FanIn { fan_in: usize },
    Normal { std: f64 },
    Uniform { lo: f64, hi: f64 },
}

/// Couples a [`ParamSet`] with the RNG used for initialization.
pub struct ParamCtx<S: Scalar> {
    pub set: ParamSet<S>,
    pub rng: ChaCha8Rng,
}

impl<S: Scalar> ParamCtx<S> {
    pub fn new(rng: ChaCha8Rng) -> Self {
        ParamCtx {
            set: ParamSet::new(),
            rng,
        }
    }

    pub fn tensor(&mut self, name: impl Into<String>, shape: &[usize], init: Init) -> ParamId {
        self.tensor_with(name, shape, init, 1.0, true)
    }

    pub fn tensor_with(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        init: Init,
        lr_mult: f64,
        decay: bool,
    ) -> ParamId {
        let value = self.draw(shape, init);
        self.set.add_with(name, value, lr_mult, decay)
    }

    fn draw(&mut self, shape: &[usize], init: Init) -> ArrayD<S> {
        let dim = IxDyn(shape);
        match init {
            Init::Zeros => ArrayD::zeros(dim),
            Init::Const(c) => ArrayD::from_elem(dim, S::of(c)),
            Init::FanIn { fan_in } => {
                assert!(fan_in > 0, "fan_in must be positive");
                let bound = 1.0 / (fan_in as f64).sqrt();
                ArrayD::from_shape_fn(dim, |_| S::of(self.rng.random_range(-bound..bound)))
            }
            Init::Normal { std } => {
                let dist = rand_distr::Normal::new(0.0, std).expect("valid std");
                ArrayD::from_shape_fn(dim, |_| S::of(self.rng.sample(dist)))
            }
            Init::Uniform { lo, hi } => {
                ArrayD::from_shape_fn(dim, |_| S::of(self.rng.random_range(lo..hi)))
            }
        }
    }
}

/// One forward pass: a tape plus lazy parameter-to-leaf bindings.
pub struct Fwd<'p, S: Scalar> {
    pub tape: Tape<S>,
    params: &'p ParamSet<S>,
    bound: Vec<Option<Var>>,
}

impl<'p, S: Scalar> Fwd<'p, S> {
    pub fn new(params: &'p ParamSet<S>) -> Self {
        Fwd {
            tape: Tape::new(),
            params,
            bound: vec![None; params.len()],
        }
    }

    /// The tape leaf for a parameter, created on first use.
    pub fn p(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let var = self.tape.leaf(self.params.value(id).clone());
        self.bound[id.0] = Some(var);
        var
    }

    /// Collects per-parameter gradients (indexed like the [`ParamSet`])
    /// after a backward pass. Unbound or unreached parameters yield `None`.
    pub fn param_grads(&self, grads: &mut Gradients<S>) -> Vec<Option<ArrayD<S>>> {
        self.bound
            .iter()
            .map(|slot| slot.and_then(|v| grads.take(v)))
            .collect()
    }
}

/// Fully connected layer over the last axis; `w` is `(in, out)`.
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    in_dim: usize,
    out_dim: usize,
}

impl Linear {
    pub fn new<S: Scalar>(
        ctx: &mut ParamCtx<S>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
    ) -> Self {
        Self::with_init(ctx, name, in_dim, out_dim, Init::FanIn { fan_in: in_dim }, 1.0)
    }

    /// All-zero weights and bias; used for heads that must start neutral.
    pub fn zeroed<S: Scalar>(
        ctx: &mut ParamCtx<S>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
    ) -> Self {
        Self::with_init(ctx, name, in_dim, out_dim, Init::Zeros, 1.0)
    }

    pub fn with_init<S: Scalar>(
        ctx: &mut ParamCtx<S>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        init: Init,
        lr_mult: f64,
    ) -> Self {
        let w = ctx.tensor_with(format!("{name}.w"), &[in_dim, out_dim], init, lr_mult, true);
        let b = ctx.tensor_with(
            format!("{name}.b"),
            &[out_dim],
            Init::Zeros,
            lr_mult,
            false,
        );
        Linear {
            w,
            b: Some(b),
            in_dim,
            out_dim,
        }
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    /// Applies to `(..., in)` and returns `(..., out)`.
    pub fn forward<S: Scalar>(&self, f: &mut Fwd<S>, x: Var) -> Var {
        let shape = f.tape.value(x).shape().to_vec();
        let last = *shape.last().expect("linear input needs at least 1 axis");
        assert_eq!(last, self.in_dim, "linear: input dim {last} != {}", self.in_dim);
        let rows: usize = shape[..shape.len() - 1].iter().product();
        let flat = f.tape.reshape(x, &[rows, self.in_dim]);
        let w = self.p_w(f);
        let mut y = f.tape.matmul(flat, w);
        if let Some(bid) = self.b {
            let b = f.p(bid);
            let bb = f.tape.broadcast_to(b, &[rows, self.out_dim]);
            y = f.tape.add(y, bb);
        }
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = self.out_dim;
        f.tape.reshape(y, &out_shape)
    }

    fn p_w<S: Scalar>(&self, f: &mut Fwd<S>) -> Var {
        f.p(self.w)
    }
}

/// 2-D convolution layer; weight `(out_c, in_c, k, k)`.
pub struct Conv2d {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new<S: Scalar>(
        ctx: &mut ParamCtx<S>,
        name: &str,
        in_c: usize,
        out_c: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let fan_in = in_c * k * k;
        let w = ctx.tensor(format!("{name}.w"), &[out_c, in_c, k, k], Init::FanIn { fan_in });
        let b = ctx.tensor_with(format!("{name}.b"), &[out_c], Init::Zeros, 1.0, false);
        Conv2d { w, b, stride, pad }
    }

    /// All-zero weights and bias; used for heads that must start neutral.
    pub fn zeroed<S: Scalar>(
        ctx: &mut ParamCtx<S>,
        name: &str,
        in_c: usize,
        out_c: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let w = ctx.tensor(format!("{name}.w"), &[out_c, in_c, k, k], Init::Zeros);
        let b = ctx.tensor_with(format!("{name}.b"), &[out_c], Init::Zeros, 1.0, false);
        Conv2d { w, b, stride, pad }
    }

    pub fn forward<S: Scalar>(&self, f: &mut Fwd<S>, x: Var) -> Var {
        let w = f.p(self.w);
        let b = f.p(self.b);
        f.tape.conv2d(x, w, Some(b), self.stride, self.pad)
    }
}

/// Learnable x2 upsampling (2x2 transposed convolution, stride 2).
pub struct Deconv2x2 {
    pub w: ParamId,
    pub b: ParamId,
}

impl Deconv2x2 {
    pub fn new<S: Scalar>(ctx: &mut ParamCtx<S>, name: &str, in_c: usize, out_c: usize) -> Self {
        let w = ctx.tensor(
            format!("{name}.w"),
            &[in_c, out_c, 2, 2],
            Init::FanIn { fan_in: in_c * 4 },
        );
        let b = ctx.tensor_with(format!("{name}.b"), &[out_c], Init::Zeros, 1.0, false);
        Deconv2x2 { w, b }
    }

    pub fn forward<S: Scalar>(&self, f: &mut Fwd<S>, x: Var) -> Var {
        let w = f.p(self.w);
        let b = f.p(self.b);
        f.tape.conv_transpose2x2(x, w, Some(b))
    }
}

/// Layer normalization over the last axis.
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    dim: usize,
    eps: f64,
}

impl LayerNorm {
    pub fn new<S: Scalar>(ctx: &mut ParamCtx<S>, name: &str, dim: usize) -> Self {
        let gamma = ctx.tensor_with(format!("{name}.g"), &[dim], Init::Const(1.0), 1.0, false);
        let beta = ctx.tensor_with(format!("{name}.b"), &[dim], Init::Zeros, 1.0, false);
        LayerNorm {
            gamma,
            beta,
            dim,
            eps: 1e-5,
        }
    }

    pub fn forward<S: Scalar>(&self, f: &mut Fwd<S>, x: Var) -> Var {
        let shape = f.tape.value(x).shape().to_vec();
        assert_eq!(
            *shape.last().unwrap(),
            self.dim,
            "layer_norm: input dim mismatch"
        );
        let last_axis = shape.len() - 1;
        let mu = f.tape.mean_axis(x, last_axis, true);
        let mu_b = f.tape.broadcast_to(mu, &shape);
        let centered = f.tape.sub(x, mu_b);
        let sq = f.tape.square(centered);
        let var = f.tape.mean_axis(sq, last_axis, true);
        let var_eps = f.tape.add_scalar(var, S::of(self.eps));
        let inv_std = f.tape.powf(var_eps, S::of(-0.5));
        let inv_b = f.tape.broadcast_to(inv_std, &shape);
        let normed = f.tape.mul(centered, inv_b);
        let g = f.p(self.gamma);
        let g_b = f.tape.broadcast_to(g, &shape);
        let scaled = f.tape.mul(normed, g_b);
        let b = f.p(self.beta);
        let b_b = f.tape.broadcast_to(b, &shape);
        f.tape.add(scaled, b_b)
    }
}

/// Multi-head self-attention over `(B, T, D)`.
pub struct MultiHeadSelfAttention {
    wq: Linear,
    wk: Linear,
    wv: Linear,
    wo: Linear,
    heads: usize,
    dim: usize,
}

pub struct AttentionOutput {
    pub output: Var,
    /// Softmax attention weights, `(B, heads, T, T)`; each row sums to 1.
    pub weights: Var,
}

impl MultiHeadSelfAttention {
    pub fn new<S: Scalar>(ctx: &mut ParamCtx<S>, name: &str, dim: usize, heads: usize) -> Self {
        assert!(heads > 0 && dim % heads == 0, "dim {dim} not divisible by heads {heads}");
        MultiHeadSelfAttention {
            wq: Linear::new(ctx, &format!("{name}.wq"), dim, dim),
            wk: Linear::new(ctx, &format!("{name}.wk"), dim, dim),
            wv: Linear::new(ctx, &format!("{name}.wv"), dim, dim),
            wo: Linear::new(ctx, &format!("{name}.wo"), dim, dim),
            heads,
            dim,
        }
    }

    pub fn forward<S: Scalar>(&self, f: &mut Fwd<S>, x: Var) -> AttentionOutput {
        let shape = f.tape.value(x).shape().to_vec();
        assert_eq!(shape.len(), 3, "attention input must be (B,T,D)");
        let (b, tkn, d) = (shape[0], shape[1], shape[2]);
        assert_eq!(d, self.dim, "attention: dim mismatch");
        let hd = d / self.heads;
        let split = |f: &mut Fwd<S>, v: Var| {
            let r = f.tape.reshape(v, &[b, tkn, self.heads, hd]);
            let p = f.tape.permute(r, &[0, 2, 1, 3]);
            f.tape.reshape(p, &[b * self.heads, tkn, hd])
        };
        let q = self.wq.forward(f, x);
        let k = self.wk.forward(f, x);
        let v = self.wv.forward(f, x);
        let qh = split(f, q);
        let kh = split(f, k);
        let vh = split(f, v);
        let kt = f.tape.permute(kh, &[0, 2, 1]);
        let scores = f.tape.bmm(qh, kt);
        let scaled = f.tape.scale(scores, S::of(1.0 / (hd as f64).sqrt()));
        let weights = f.tape.softmax_last(scaled); // (B*h, T, T)
        let ctx = f.tape.bmm(weights, vh); // (B*h, T, hd)
        let merged = {
            let r = f.tape.reshape(ctx, &[b, self.heads, tkn, hd]);
            let p = f.tape.permute(r, &[0, 2, 1, 3]);
            f.tape.reshape(p, &[b, tkn, d])
        };
        let output = self.wo.forward(f, merged);
        let weights = f.tape.reshape(weights, &[b, self.heads, tkn, tkn]);
        AttentionOutput { output, weights }
    }
}

/// Self-attention followed by residual add and layer norm, the recurring
/// block in both decoders.
pub struct SelfAttentionBlock {
    pub attn: MultiHeadSelfAttention,
    pub norm: LayerNorm,
}

impl SelfAttentionBlock {
    pub fn new<S: Scalar>(ctx: &mut ParamCtx<S>, name: &str, dim: usize, heads: usize) -> Self {
        SelfAttentionBlock {
            attn: MultiHeadSelfAttention::new(ctx, &format!("{name}.attn"), dim, heads),
            norm: LayerNorm::new(ctx, &format!("{name}.norm"), dim),
        }
    }

    pub fn forward<S: Scalar>(&self, f: &mut Fwd<S>, x: Var) -> AttentionOutput {
        let att = self.attn.forward(f, x);
        let res = f.tape.add(x, att.output);
        let output = self.norm.forward(f, res);
        AttentionOutput {
            output,
            weights: att.weights,
        }
    }
}

/// Result of one optimizer step.
#[derive(Debug, Clone, Copy)]
pub struct StepStats {
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    /// Scale factor applied by clipping (1.0 when inactive).
    pub clip_factor: f64,
}

/// AdamW with decoupled weight decay, global-norm clipping and per-parameter
/// learning-rate multipliers. Parameters without a gradient this step are
/// treated as having a zero gradient (moments still decay).
pub struct AdamW<S: Scalar> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub clip_norm: Option<f64>,
    m: Vec<ArrayD<S>>,
    v: Vec<ArrayD<S>>,
    step: u64,
}

impl<S: Scalar> AdamW<S> {
    pub fn new(params: &ParamSet<S>, weight_decay: f64, clip_norm: Option<f64>) -> Self {
        let m = params
            .entries()
            .iter()
            .map(|e| ArrayD::zeros(e.value.raw_dim()))
            .collect();
        let v = params
            .entries()
            .iter()
            .map(|e| ArrayD::zeros(e.value.raw_dim()))
            .collect();
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            clip_norm,
            m,
            v,
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one update with base learning rate `lr`.
    pub fn step(
        &mut self,
        params: &mut ParamSet<S>,
        grads: &[Option<ArrayD<S>>],
        lr: f64,
    ) -> StepStats {
        assert_eq!(grads.len(), params.len(), "gradient count mismatch");
        self.step += 1;
        let mut sq_sum = 0.0f64;
        for g in grads.iter().flatten() {
            sq_sum += g.iter().map(|&v| v.as_f64() * v.as_f64()).sum::<f64>();
        }
        let grad_norm = sq_sum.sqrt();
        let clip_factor = match self.clip_norm {
            Some(c) if grad_norm > c && grad_norm > 0.0 => c / grad_norm,
            _ => 1.0,
        };
        let b1 = S::of(self.beta1);
        let b2 = S::of(self.beta2);
        let one_m_b1 = S::of(1.0 - self.beta1);
        let one_m_b2 = S::of(1.0 - self.beta2);
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let eps = S::of(self.eps);
        let clip = S::of(clip_factor);
        for (idx, entry) in params.entries_mut().iter_mut().enumerate() {
            let lr_eff = lr * entry.lr_mult;
            let lr_s = S::of(lr_eff / bc1);
            let inv_bc2 = S::of(1.0 / bc2);
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            match grads[idx].as_ref() {
                Some(g) => {
                    ndarray::Zip::from(&mut *m).and(g).for_each(|m, &g| {
                        *m = *m * b1 + g * clip * one_m_b1;
                    });
                    ndarray::Zip::from(&mut *v).and(g).for_each(|v, &g| {
                        let gc = g * clip;
                        *v = *v * b2 + gc * gc * one_m_b2;
                    });
                }
                None => {
                    m.mapv_inplace(|m| m * b1);
                    v.mapv_inplace(|v| v * b2);
                }
            }
            let decay = if entry.decay {
                S::of(lr_eff * self.weight_decay)
            } else {
                S::zero()
            };
            ndarray::Zip::from(&mut entry.value)
                .and(&*m)
                .and(&*v)
                .for_each(|p, &m, &v| {
                    let denom = (v * inv_bc2).sqrt() + eps;
                    let update = lr_s * m / denom;
                    *p = *p - update - decay * *p;
                });
        }
        StepStats {
            grad_norm,
            clip_factor,
        }
    }

    pub fn moments(&self) -> (&[ArrayD<S>], &[ArrayD<S>]) {
        (&self.m, &self.v)
    }

    /// Restores optimizer state from a checkpoint.
    pub fn restore(&mut self, m: Vec<ArrayD<S>>, v: Vec<ArrayD<S>>, step: u64) {
        assert_eq!(m.len(), self.m.len(), "moment count mismatch");
        assert_eq!(v.len(), self.v.len(), "moment count mismatch");
        self.m = m;
        self.v = v;
        self.step = step;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use ndarray::IxDyn;
    use rand::SeedableRng;

    fn ctx64(seed: u64) -> ParamCtx<f64> {
        ParamCtx::new(ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn layer_norm_output_has_zero_mean_unit_variance() {
        let mut ctx = ctx64(0);
        let ln = LayerNorm::new(&mut ctx, "ln", 8);
        let mut f = Fwd::new(&ctx.set);
        let x = f.tape.leaf(
            ArrayD::from_shape_fn(IxDyn(&[3, 8]), |ix| (ix[0] * 8 + ix[1]) as f64 * 0.37 - 1.0),
        );
        let y = ln.forward(&mut f, x);
        let yv = f.tape.value(y);
        for row in yv.rows() {
            let mean: f64 = row.mean().unwrap();
            let var: f64 = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 8.0;
            assert_relative_eq!(mean, 0.0, epsilon = 1e-10);
            assert_relative_eq!(var, 1.0, max_relative = 1e-4);
        }
    }

    #[test]
    fn attention_weights_rows_sum_to_one() {
        let mut ctx = ctx64(1);
        let attn = MultiHeadSelfAttention::new(&mut ctx, "a", 8, 2);
        let mut f = Fwd::new(&ctx.set);
        let x = f.tape.leaf(ArrayD::from_shape_fn(IxDyn(&[2, 5, 8]), |ix| {
            ((ix[0] + ix[1] * 3 + ix[2]) as f64 * 0.11).sin()
        }));
        let out = attn.forward(&mut f, x);
        assert_eq!(f.tape.value(out.output).shape(), &[2, 5, 8]);
        let w = f.tape.value(out.weights);
        assert_eq!(w.shape(), &[2, 2, 5, 5]);
        for b in 0..2 {
            for h in 0..2 {
                for t in 0..5 {
                    let s: f64 = (0..5).map(|t2| w[[b, h, t, t2]]).sum();
                    assert_relative_eq!(s, 1.0, epsilon = 1e-9);
                }
            }
        }
    }

    #[test]
    fn single_token_attention_weight_is_exactly_one() {
        let mut ctx = ctx64(2);
        let attn = MultiHeadSelfAttention::new(&mut ctx, "a", 4, 2);
        let mut f = Fwd::new(&ctx.set);
        let x = f.tape.leaf(ArrayD::from_shape_fn(IxDyn(&[1, 1, 4]), |ix| ix[2] as f64));
        let out = attn.forward(&mut f, x);
        let w = f.tape.value(out.weights);
        assert_eq!(w.shape(), &[1, 2, 1, 1]);
        assert_eq!(w[[0, 0, 0, 0]], 1.0);
        assert_eq!(w[[0, 1, 0, 0]], 1.0);
    }

    #[test]
    fn attention_block_gradients_match_finite_differences() {
        let mut ctx = ctx64(3);
        let block = SelfAttentionBlock::new(&mut ctx, "blk", 6, 2);
        let x0 = ArrayD::from_shape_fn(IxDyn(&[1, 4, 6]), |ix| {
            ((ix[1] * 6 + ix[2]) as f64 * 0.21).cos() * 0.5
        });
        // Check gradient w.r.t. the input; parameters are bound as constants
        // by using the raw values through a fresh context each evaluation.
        let set = ctx.set;
        crate::gradcheck::assert_gradients_close(
            |t, vs| {
                let mut f = Fwd {
                    tape: std::mem::take(t),
                    params: &set,
                    bound: vec![None; set.len()],
                };
                let out = block.forward(&mut f, vs[0]);
                let sq = f.tape.square(out.output);
                let r = f.tape.sum_all(sq);
                *t = std::mem::take(&mut f.tape);
                r
            },
            &[x0],
            1e-5,
            1e-6,
        );
    }

    #[test]
    fn adamw_descends_a_quadratic() {
        let mut ctx = ctx64(4);
        let p = ctx.tensor("p", &[3], Init::Const(2.0));
        let mut set = ctx.set;
        let mut opt = AdamW::new(&set, 0.0, None);
        for _ in 0..300 {
            // grad of 0.5*||p||^2 is p.
            let g = set.value(p).clone();
            opt.step(&mut set, &[Some(g)], 0.05);
        }
        for &v in set.value(p).iter() {
            assert!(v.abs() < 1e-2, "did not converge: {v}");
        }
    }

    #[test]
    fn adamw_weight_decay_shrinks_unreferenced_weights() {
        let mut ctx = ctx64(5);
        let decayed = ctx.tensor("w", &[1], Init::Const(1.0));
        let frozen = ctx.tensor_with("b", &[1], Init::Const(1.0), 1.0, false);
        let mut set = ctx.set;
        let mut opt = AdamW::new(&set, 0.1, None);
        opt.step(&mut set, &[None, None], 0.1);
        assert!(set.value(decayed)[0] < 1.0);
        assert_eq!(set.value(frozen)[0], 1.0);
    }

    #[test]
    fn gradient_clipping_rescales_to_requested_norm() {
        let mut ctx = ctx64(6);
        let _p = ctx.tensor("p", &[4], Init::Zeros);
        let mut set = ctx.set;
        let mut opt = AdamW::new(&set, 0.0, Some(1.0));
        let g = ArrayD::from_elem(IxDyn(&[4]), 3.0); // norm 6
        let stats = opt.step(&mut set, &[Some(g)], 0.0);
        assert_relative_eq!(stats.grad_norm, 6.0, max_relative = 1e-12);
        assert_relative_eq!(stats.clip_factor, 1.0 / 6.0, max_relative = 1e-12);
    }

    #[test]
    fn fan_in_init_is_seed_deterministic_and_bounded() {
        let a = {
            let mut ctx = ctx64(7);
            let id = ctx.tensor("w", &[64, 64], Init::FanIn { fan_in: 64 });
            ctx.set.value(id).clone()
        };
        let b = {
            let mut ctx = ctx64(7);
            let id = ctx.tensor("w", &[64, 64], Init::FanIn { fan_in: 64 });
            ctx.set.value(id).clone()
        };
        assert_eq!(a, b);
        let bound = 1.0 / 8.0;
        assert!(a.iter().all(|v| v.abs() < bound));
        assert!(a.iter().any(|v| v.abs() > bound * 0.5));
    }
}
