//! MetaSeg decoder head.
//!
//! Stages 2–4 of the pyramid each pass through a Global Meta Block (unless
//! disabled for ablation), are bilinearly resized to stride 8, concatenated,
//! fused by a `C_fuse → C_MLP` linear layer and classified by a
//! `C_MLP → N_cls` linear layer. Stage 1 never enters the decoder.

use crate::attention::{MixerConfig, MixerKind};
use crate::encoder::FeaturePyramid;
use crate::error::{Error, Result};
use crate::metaformer::{gmb_graph, gmb_init, GmbConfig, DEFAULT_EXPANSION, DEFAULT_LN_EPS};
use crate::ops;
use crate::params::{Init, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::{Shape, Tensor};

/// Pyramid levels the decoder consumes.
pub const DECODER_STAGES: [usize; 3] = [2, 3, 4];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DecoderConfig {
    /// Channels of `F_2, F_3, F_4`.
    pub stage_channels: [usize; 3],
    /// Whether stage 2/3/4 runs its GMB. A disabled stage still feeds the
    /// concat, unchanged.
    pub active: [bool; 3],
    pub ratios: [usize; 3],
    pub heads: usize,
    pub c_mlp: usize,
    pub num_classes: usize,
    pub mixer: MixerKind,
    pub expansion: usize,
    pub eps: f64,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            stage_channels: [64, 160, 256],
            active: [true; 3],
            ratios: [8, 4, 2],
            heads: 8,
            c_mlp: 256,
            num_classes: 2,
            mixer: MixerKind::Cra,
            expansion: DEFAULT_EXPANSION,
            eps: DEFAULT_LN_EPS,
        }
    }
}

impl DecoderConfig {
    /// Sum of the three stage widths; the fusion layer's input size.
    pub fn c_fuse(&self) -> usize {
        self.stage_channels.iter().sum()
    }

    /// Stage numbers (2..=4) whose GMB is enabled.
    pub fn active_stages(&self) -> Vec<usize> {
        DECODER_STAGES
            .into_iter()
            .zip(self.active)
            .filter_map(|(s, on)| on.then_some(s))
            .collect()
    }

    /// GMB configuration for stage `stage` in `2..=4`.
    pub fn block_config(&self, stage: usize) -> GmbConfig {
        let i = stage - 2;
        let mixer = MixerConfig::new(self.mixer, self.stage_channels[i], self.heads, self.ratios[i]);
        GmbConfig {
            eps: self.eps,
            ..GmbConfig::new(mixer).with_expansion(self.expansion)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.c_mlp == 0 {
            return Err(Error::Config("decoder c_mlp must be >= 1".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("num_classes must be >= 2".into()));
        }
        if self.stage_channels.contains(&0) {
            return Err(Error::Config("decoder stage channels must be >= 1".into()));
        }
        for stage in self.active_stages() {
            self.block_config(stage)
                .validate()
                .map_err(|e| Error::Config(format!("decoder stage {stage}: {e}")))?;
        }
        Ok(())
    }
}

pub fn decoder_init(store: &mut ParamStore, cfg: &DecoderConfig, init: &mut Init) -> Result<()> {
    cfg.validate()?;
    for stage in cfg.active_stages() {
        gmb_init(store, &format!("decoder.stage{stage}"), &cfg.block_config(stage), init)?;
    }
    store.insert("decoder.fuse.weight", init.linear(cfg.c_fuse(), cfg.c_mlp))?;
    store.insert("decoder.fuse.bias", Tensor::zeros(Shape::vector(cfg.c_mlp)))?;
    store.insert("decoder.head.weight", init.linear(cfg.c_mlp, cfg.num_classes))?;
    store.insert("decoder.head.bias", Tensor::zeros(Shape::vector(cfg.num_classes)))
}

#[derive(Clone, Debug)]
pub struct DecoderOutput {
    /// `n × N_cls × H/8 × W/8`.
    pub logits: Var,
    /// Attention probabilities per active attention stage.
    pub scores: Vec<(usize, Var)>,
}

/// Record the decoder on `tape`. `features` are `F_2, F_3, F_4`.
pub fn decode_graph(
    tape: &mut Tape,
    store: &ParamStore,
    cfg: &DecoderConfig,
    features: [Var; 3],
) -> Result<DecoderOutput> {
    cfg.validate()?;
    let base = tape.value(features[0]).shape();
    for (i, &f) in features.iter().enumerate() {
        let s = tape.value(f).shape();
        let scale = 1 << i;
        if s.c != cfg.stage_channels[i] || s.n != base.n || s.h * scale != base.h || s.w * scale != base.w {
            return Err(Error::Config(format!(
                "stage {} feature {s} does not fit decoder (expected {} channels at {}x{})",
                i + 2,
                cfg.stage_channels[i],
                base.h / scale,
                base.w / scale
            )));
        }
    }
    let (out_h, out_w) = (base.h, base.w);

    let mut upsampled = Vec::with_capacity(3);
    let mut scores = Vec::new();
    for (i, &f) in features.iter().enumerate() {
        let stage = DECODER_STAGES[i];
        let refined = if cfg.active[i] {
            let (out, probs) = gmb_graph(tape, store, &format!("decoder.stage{stage}"), &cfg.block_config(stage), f)?;
            if let Some(p) = probs {
                scores.push((stage, p));
            }
            out
        } else {
            f
        };
        upsampled.push(tape.upsample_bilinear(refined, out_h, out_w)?);
    }
    let fused_in = tape.concat_channels(&upsampled)?;
    let fw = tape.param(store, "decoder.fuse.weight")?;
    let fb = tape.param(store, "decoder.fuse.bias")?;
    let fused = tape.linear(fused_in, fw, Some(fb))?;
    let hw = tape.param(store, "decoder.head.weight")?;
    let hb = tape.param(store, "decoder.head.bias")?;
    let logits = tape.linear(fused, hw, Some(hb))?;
    Ok(DecoderOutput { logits, scores })
}

/// Logits at stride 8 for a precomputed pyramid.
pub fn decode(pyramid: &FeaturePyramid, cfg: &DecoderConfig, store: &ParamStore) -> Result<Tensor> {
    let mut tape = Tape::new();
    let feats = DECODER_STAGES.map(|s| tape.input(pyramid.stage(s).clone()));
    let out = decode_graph(&mut tape, store, cfg, feats)?;
    Ok(tape.value(out.logits).clone())
}

/// Per-pixel class indices, row-major per batch item.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub labels: Vec<usize>,
}

impl LabelMap {
    pub fn get(&self, n: usize, y: usize, x: usize) -> usize {
        self.labels[(n * self.h + y) * self.w + x]
    }

    /// Labels of one batch item.
    pub fn item(&self, n: usize) -> &[usize] {
        &self.labels[n * self.h * self.w..(n + 1) * self.h * self.w]
    }
}

/// Bilinearly resize logits to `out_h × out_w`, then argmax over classes
/// (ties resolve to the lowest class index).
pub fn predict_mask(logits: &Tensor, out_h: usize, out_w: usize) -> Result<LabelMap> {
    if !logits.is_finite() {
        return Err(Error::Numeric("non-finite logits".into()));
    }
    let up = ops::upsample_bilinear(logits, out_h, out_w)?;
    Ok(LabelMap {
        n: logits.shape().n,
        h: out_h,
        w: out_w,
        labels: ops::argmax_channels(&up),
    })
}
