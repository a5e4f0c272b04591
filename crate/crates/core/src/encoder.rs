//! Hierarchical convolutional MetaFormer encoder producing a 4-level pyramid
//! at strides 4, 8, 16, 32.
//!
//! Stage 1 is a stem of two stride-2 3×3 convs with GELU between; stages 2–4
//! each open with a stride-2 3×3 conv. Every stage then runs its configured
//! number of Global Meta Blocks with a depthwise 3×3 token mixer.

use crate::attention::{MixerConfig, MixerKind};
use crate::error::{Error, Result};
use crate::metaformer::{gmb_graph, gmb_init, GmbConfig, DEFAULT_EXPANSION, DEFAULT_LN_EPS};
use crate::ops::ConvSpec;
use crate::params::{Init, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::{Shape, Tensor};

/// Output stride of each pyramid level.
pub const STAGE_STRIDES: [usize; 4] = [4, 8, 16, 32];
/// Input side lengths must be a multiple of this.
pub const ENCODER_DIVISOR: usize = 32;
pub const IMAGE_CHANNELS: usize = 3;

const DOWN: ConvSpec = ConvSpec::new(2, 1, 1);

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EncoderConfig {
    pub channels: [usize; 4],
    pub blocks: [usize; 4],
    pub expansion: usize,
    pub eps: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            channels: [32, 64, 160, 256],
            blocks: [1, 1, 1, 1],
            expansion: DEFAULT_EXPANSION,
            eps: DEFAULT_LN_EPS,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels.contains(&0) {
            return Err(Error::Config("encoder channels must be >= 1".into()));
        }
        if self.expansion == 0 {
            return Err(Error::Config("mlp expansion must be >= 1".into()));
        }
        Ok(())
    }

    pub fn block_config(&self, stage: usize) -> GmbConfig {
        let c = self.channels[stage - 1];
        GmbConfig {
            eps: self.eps,
            ..GmbConfig::new(MixerConfig::new(MixerKind::DepthwiseConv3, c, 1, 1)).with_expansion(self.expansion)
        }
    }
}

/// The four encoder outputs `F_1..F_4`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePyramid {
    features: [Tensor; 4],
}

impl FeaturePyramid {
    /// Checks that all levels share a batch size and that each level's side
    /// is half of the previous one.
    pub fn new(features: [Tensor; 4]) -> Result<Self> {
        let base = features[0].shape();
        for (i, pair) in features.windows(2).enumerate() {
            let (a, b) = (pair[0].shape(), pair[1].shape());
            if b.n != base.n || a.h != 2 * b.h || a.w != 2 * b.w {
                return Err(Error::shape(
                    "feature_pyramid",
                    format!("stage {} {a} and stage {} {b} are not a 2x pyramid", i + 1, i + 2),
                ));
            }
        }
        Ok(FeaturePyramid { features })
    }

    /// Level `stage` in `1..=4`.
    pub fn stage(&self, stage: usize) -> &Tensor {
        &self.features[stage - 1]
    }

    pub fn channels(&self) -> [usize; 4] {
        self.features.each_ref().map(|t| t.shape().c)
    }

    pub fn strides(&self) -> [usize; 4] {
        STAGE_STRIDES
    }

    /// Input image size implied by the stride-4 level.
    pub fn image_size(&self) -> (usize, usize) {
        let s = self.features[0].shape();
        (s.h * STAGE_STRIDES[0], s.w * STAGE_STRIDES[0])
    }

    pub fn into_features(self) -> [Tensor; 4] {
        self.features
    }
}

pub fn check_image(image: Shape) -> Result<()> {
    if image.c != IMAGE_CHANNELS {
        return Err(Error::Config(format!(
            "encoder expects {IMAGE_CHANNELS}-channel images, got {image}"
        )));
    }
    if !image.h.is_multiple_of(ENCODER_DIVISOR) || !image.w.is_multiple_of(ENCODER_DIVISOR) {
        return Err(Error::Config(format!(
            "image {}x{} must be divisible by {ENCODER_DIVISOR}",
            image.h, image.w
        )));
    }
    Ok(())
}

fn conv_init(store: &mut ParamStore, prefix: &str, cin: usize, cout: usize, init: &mut Init) -> Result<()> {
    store.insert(format!("{prefix}.weight"), init.conv(cout, cin, 3))?;
    store.insert(format!("{prefix}.bias"), Tensor::zeros(Shape::vector(cout)))
}

pub fn encoder_init(store: &mut ParamStore, cfg: &EncoderConfig, init: &mut Init) -> Result<()> {
    cfg.validate()?;
    let c = cfg.channels;
    conv_init(store, "encoder.stem.conv1", IMAGE_CHANNELS, c[0], init)?;
    conv_init(store, "encoder.stem.conv2", c[0], c[0], init)?;
    for stage in 1..=4 {
        if stage > 1 {
            conv_init(store, &format!("encoder.stage{stage}.down"), c[stage - 2], c[stage - 1], init)?;
        }
        let bcfg = cfg.block_config(stage);
        for b in 0..cfg.blocks[stage - 1] {
            gmb_init(store, &format!("encoder.stage{stage}.block{b}"), &bcfg, init)?;
        }
    }
    Ok(())
}

fn conv_graph(tape: &mut Tape, store: &ParamStore, prefix: &str, x: Var) -> Result<Var> {
    let w = tape.param(store, &format!("{prefix}.weight"))?;
    let b = tape.param(store, &format!("{prefix}.bias"))?;
    tape.conv2d(x, w, Some(b), DOWN)
}

/// Record the encoder on `tape`; returns `F_1..F_4`.
pub fn encode_graph(tape: &mut Tape, store: &ParamStore, cfg: &EncoderConfig, image: Var) -> Result<[Var; 4]> {
    cfg.validate()?;
    check_image(tape.value(image).shape())?;
    let mut x = conv_graph(tape, store, "encoder.stem.conv1", image)?;
    x = tape.gelu(x);
    x = conv_graph(tape, store, "encoder.stem.conv2", x)?;
    let mut outs = Vec::with_capacity(4);
    for stage in 1..=4 {
        if stage > 1 {
            x = conv_graph(tape, store, &format!("encoder.stage{stage}.down"), x)?;
        }
        let bcfg = cfg.block_config(stage);
        for b in 0..cfg.blocks[stage - 1] {
            x = gmb_graph(tape, store, &format!("encoder.stage{stage}.block{b}"), &bcfg, x)?.0;
        }
        outs.push(x);
    }
    Ok([outs[0], outs[1], outs[2], outs[3]])
}

/// Run the encoder on `image` (`n × 3 × H × W`).
pub fn encode(image: &Tensor, cfg: &EncoderConfig, store: &ParamStore) -> Result<FeaturePyramid> {
    let mut tape = Tape::new();
    let x = tape.input(image.clone());
    let outs = encode_graph(&mut tape, store, cfg, x)?;
    FeaturePyramid::new(outs.map(|v| tape.value(v).clone()))
}
