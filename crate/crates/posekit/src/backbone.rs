//! Convolutional trunk and feature pyramid.
//!
//! A compact 4-stage trunk (two stride-2 stem convolutions, then four stages
//! of two 3×3 conv+ReLU blocks with stride-2 downsampling between stages)
//! feeds a standard feature pyramid: 1×1 lateral projections to a common
//! channel width, nearest-neighbor top-down upsampling with elementwise
//! addition, and a 3×3 smoothing convolution per level. The output levels
//! P2–P5 sit at strides 4, 8, 16, and 32 of the input image.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Conv2d, Fwd, ParamCtx};
use crate::scalar::Scalar;
use crate::tensor::Var;

/// Number of pyramid levels (P2..P5).
pub const PYRAMID_LEVELS: usize = 4;

/// Image-to-feature stride of each pyramid level.
pub const PYRAMID_STRIDES: [usize; PYRAMID_LEVELS] = [4, 8, 16, 32];

/// Trunk and pyramid widths.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    /// Channel count of each trunk stage (strides 4, 8, 16, 32).
    pub stage_channels: [usize; 4],
    /// Channel count shared by every pyramid level.
    pub pyramid_channels: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            stage_channels: [32, 64, 128, 256],
            pyramid_channels: 256,
        }
    }
}

/// Multi-level image features, `levels[i]` of shape
/// `(pyramid_channels, H/stride_i, W/stride_i)` with strides 4, 8, 16, 32.
pub struct FeaturePyramid {
    pub levels: [Var; PYRAMID_LEVELS],
}

struct Stage {
    /// Stride-2 channel-expanding entry convolution (absent for the first
    /// stage, which starts at the stem's stride).
    down: Option<Conv2d>,
    conv1: Conv2d,
    conv2: Conv2d,
}

/// Trunk + pyramid with learnable parameters registered in a [`ParamCtx`].
pub struct Backbone {
    stem1: Conv2d,
    stem2: Conv2d,
    stages: Vec<Stage>,
    laterals: Vec<Conv2d>,
    smooth: Vec<Conv2d>,
    cfg: BackboneConfig,
}

impl Backbone {
    pub fn new<S: Scalar>(ctx: &mut ParamCtx<S>, name: &str, cfg: &BackboneConfig) -> Self {
        assert!(
            cfg.pyramid_channels > 0 && cfg.stage_channels.iter().all(|&c| c > 0),
            "backbone channel counts must be positive"
        );
        let c = cfg.stage_channels;
        let stem1 = Conv2d::new(ctx, &format!("{name}.stem1"), 3, c[0], 3, 2, 1);
        let stem2 = Conv2d::new(ctx, &format!("{name}.stem2"), c[0], c[0], 3, 2, 1);
        let mut stages = Vec::with_capacity(4);
        for (i, &ch) in c.iter().enumerate() {
            let down = if i == 0 {
                None
            } else {
                Some(Conv2d::new(
                    ctx,
                    &format!("{name}.s{i}.down"),
                    c[i - 1],
                    ch,
                    3,
                    2,
                    1,
                ))
            };
            stages.push(Stage {
                down,
                conv1: Conv2d::new(ctx, &format!("{name}.s{i}.conv1"), ch, ch, 3, 1, 1),
                conv2: Conv2d::new(ctx, &format!("{name}.s{i}.conv2"), ch, ch, 3, 1, 1),
            });
        }
        let laterals = c
            .iter()
            .enumerate()
            .map(|(i, &ch)| {
                Conv2d::new(
                    ctx,
                    &format!("{name}.lat{i}"),
                    ch,
                    cfg.pyramid_channels,
                    1,
                    1,
                    0,
                )
            })
            .collect();
        let smooth = (0..PYRAMID_LEVELS)
            .map(|i| {
                Conv2d::new(
                    ctx,
                    &format!("{name}.smooth{i}"),
                    cfg.pyramid_channels,
                    cfg.pyramid_channels,
                    3,
                    1,
                    1,
                )
            })
            .collect();
        Backbone {
            stem1,
            stem2,
            stages,
            laterals,
            smooth,
            cfg: *cfg,
        }
    }

    pub fn pyramid_channels(&self) -> usize {
        self.cfg.pyramid_channels
    }

    /// Extracts the P2–P5 pyramid from a normalized `(3, H, W)` image.
    /// `H` and `W` must be positive multiples of 32 so every level divides
    /// evenly.
    pub fn forward<S: Scalar>(&self, f: &mut Fwd<S>, image: Var) -> Result<FeaturePyramid> {
        let shape = f.tape.value(image).shape().to_vec();
        if shape.len() != 3 || shape[0] != 3 {
            return Err(Error::Shape(format!(
                "backbone expects a (3, H, W) image, got {shape:?}"
            )));
        }
        let (h, w) = (shape[1], shape[2]);
        if h < 32 || w < 32 || h % 32 != 0 || w % 32 != 0 {
            return Err(Error::Shape(format!(
                "image size {h}×{w} must be a positive multiple of 32 in both axes"
            )));
        }

        let x = f.tape.reshape(image, &[1, 3, h, w]);
        let x = self.stem1.forward(f, x);
        let x = f.tape.relu(x);
        let x = self.stem2.forward(f, x);
        let mut x = f.tape.relu(x);

        let mut trunk = Vec::with_capacity(4);
        for stage in &self.stages {
            if let Some(down) = &stage.down {
                x = down.forward(f, x);
                x = f.tape.relu(x);
            }
            let y = stage.conv1.forward(f, x);
            let y = f.tape.relu(y);
            let y = stage.conv2.forward(f, y);
            x = f.tape.relu(y);
            trunk.push(x);
        }

        // Top-down pathway over the lateral projections.
        let mut merged: Vec<Var> = vec![Var::default(); PYRAMID_LEVELS];
        let top = self.laterals[3].forward(f, trunk[3]);
        merged[3] = top;
        for lvl in (0..3).rev() {
            let lateral = self.laterals[lvl].forward(f, trunk[lvl]);
            let up = f.tape.upsample2x_nearest(merged[lvl + 1]);
            merged[lvl] = f.tape.add(lateral, up);
        }

        let pc = self.cfg.pyramid_channels;
        let mut levels = [Var::default(); PYRAMID_LEVELS];
        for lvl in 0..PYRAMID_LEVELS {
            let sm = self.smooth[lvl].forward(f, merged[lvl]);
            let s = PYRAMID_STRIDES[lvl];
            levels[lvl] = f.tape.reshape(sm, &[pc, h / s, w / s]);
        }
        Ok(FeaturePyramid { levels })
    }
}
