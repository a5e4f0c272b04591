//! Full encoder + decoder network built from a [`ModelConfig`].

use crate::analyzer::{count_attention_macs, AttentionKind};
use crate::attention::{score_maps, MixerKind, ScoreMaps};
use crate::config::ModelConfig;
use crate::decoder::{decode_graph, decoder_init, predict_mask, LabelMap};
use crate::encoder::{encode_graph, encoder_init};
use crate::error::{Error, Result};
use crate::params::{Init, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Largest model [`MetaSeg::init_params`] will allocate (values plus
/// gradients come to 2 GiB of f64 at this size).
pub const MAX_PARAMETERS: usize = 1 << 27;

/// Cap on attention probabilities held by one forward pass.
pub const MAX_SCORE_ELEMENTS: u64 = 1 << 28;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MetaSeg {
    config: ModelConfig,
}

/// Nodes of one recorded forward pass.
#[derive(Clone, Debug)]
pub struct ModelGraph {
    pub pyramid: [Var; 4],
    pub logits: Var,
    pub scores: Vec<(usize, Var)>,
}

/// Attention probabilities of one decoder stage.
#[derive(Clone, Debug, PartialEq)]
pub struct StageScores {
    pub stage: usize,
    pub maps: ScoreMaps,
}

#[derive(Clone, Debug)]
pub struct Inference {
    pub logits: Tensor,
    pub mask: LabelMap,
    pub scores: Vec<StageScores>,
}

impl MetaSeg {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        Ok(MetaSeg { config })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Parameters drawn from the config seed.
    pub fn init_params(&self) -> Result<ParamStore> {
        let total = crate::analyzer::count_params(&self.config).total();
        if total > MAX_PARAMETERS {
            return Err(Error::Config(format!(
                "model has {total} parameters, more than the {MAX_PARAMETERS} this tool will allocate"
            )));
        }
        let mut store = ParamStore::new();
        let mut init = Init::new(self.config.seed);
        encoder_init(&mut store, &self.config.encoder(), &mut init)?;
        decoder_init(&mut store, &self.config.decoder(), &mut init)?;
        Ok(store)
    }

    pub fn forward_graph(&self, tape: &mut Tape, store: &ParamStore, image: Var) -> Result<ModelGraph> {
        let s = tape.value(image).shape();
        self.config.check_input(s.h, s.w)?;
        let kind = match self.config.mixer {
            MixerKind::Sra => Some(AttentionKind::Sra),
            MixerKind::Cra => Some(AttentionKind::Cra),
            _ => None,
        };
        if let Some(kind) = kind {
            let scores: u64 = count_attention_macs(&self.config, kind, s.h, s.w)
                .stages
                .iter()
                .map(|st| st.softmax_exps * s.n as u64)
                .sum();
            if scores > MAX_SCORE_ELEMENTS {
                return Err(Error::Config(format!(
                    "input {}x{}x{} needs {scores} attention weights, more than {MAX_SCORE_ELEMENTS}; \
                     use a smaller image or larger pool ratios",
                    s.n, s.h, s.w
                )));
            }
        }
        let pyramid = encode_graph(tape, store, &self.config.encoder(), image)?;
        let out = decode_graph(tape, store, &self.config.decoder(), [pyramid[1], pyramid[2], pyramid[3]])?;
        Ok(ModelGraph {
            pyramid,
            logits: out.logits,
            scores: out.scores,
        })
    }

    /// Stride-8 logits for `image` (`n × 3 × H × W`).
    pub fn forward(&self, store: &ParamStore, image: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let x = tape.input(image.clone());
        let g = self.forward_graph(&mut tape, store, x)?;
        Ok(tape.value(g.logits).clone())
    }

    /// Forward pass plus full-resolution mask and attention maps.
    pub fn infer(&self, store: &ParamStore, image: &Tensor) -> Result<Inference> {
        let mut tape = Tape::new();
        let x = tape.input(image.clone());
        let g = self.forward_graph(&mut tape, store, x)?;
        let logits = tape.value(g.logits).clone();
        if !logits.is_finite() {
            return Err(Error::Numeric("non-finite logits".into()));
        }
        let s = image.shape();
        let mask = predict_mask(&logits, s.h, s.w)?;
        let scores = g
            .scores
            .iter()
            .map(|&(stage, v)| {
                let f = tape.value(g.pyramid[stage - 1]).shape();
                StageScores {
                    stage,
                    maps: score_maps(tape.value(v), f.h, f.w, self.config.pool_ratios[stage - 2]),
                }
            })
            .collect();
        Ok(Inference { logits, mask, scores })
    }
}
