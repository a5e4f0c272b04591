//! Global Meta Block: `M = mixer(LN(F)) + F`, `out = MLP(LN(M)) + M`.

use crate::attention::{mixer_graph, MixerConfig, MixerParams};
use crate::error::{Error, Result};
use crate::params::{Init, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::{Shape, Tensor};

pub const DEFAULT_LN_EPS: f64 = 1e-6;
pub const DEFAULT_EXPANSION: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GmbConfig {
    pub channels: usize,
    pub mixer: MixerConfig,
    /// Hidden width of the channel MLP is `expansion · channels`.
    pub expansion: usize,
    pub eps: f64,
}

impl GmbConfig {
    pub fn new(mixer: MixerConfig) -> Self {
        GmbConfig {
            channels: mixer.channels,
            mixer,
            expansion: DEFAULT_EXPANSION,
            eps: DEFAULT_LN_EPS,
        }
    }

    pub fn with_expansion(mut self, expansion: usize) -> Self {
        self.expansion = expansion;
        self
    }

    pub fn hidden(&self) -> usize {
        self.expansion * self.channels
    }

    pub fn validate(&self) -> Result<()> {
        if self.mixer.channels != self.channels {
            return Err(Error::Config(format!(
                "block has {} channels but its mixer {}",
                self.channels, self.mixer.channels
            )));
        }
        if self.expansion == 0 {
            return Err(Error::Config("mlp expansion must be >= 1".into()));
        }
        if self.eps.is_nan() || self.eps <= 0.0 {
            return Err(Error::Config("layer norm eps must be > 0".into()));
        }
        self.mixer.validate()
    }
}

/// Two 1×1 convolutions (stored as `in×out` matrices) with GELU between.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpParams {
    pub fc1_weight: Tensor,
    pub fc1_bias: Tensor,
    pub fc2_weight: Tensor,
    pub fc2_bias: Tensor,
}

impl MlpParams {
    pub fn random(channels: usize, hidden: usize, init: &mut Init) -> Self {
        MlpParams {
            fc1_weight: init.linear(channels, hidden),
            fc1_bias: Tensor::zeros(Shape::vector(hidden)),
            fc2_weight: init.linear(hidden, channels),
            fc2_bias: Tensor::zeros(Shape::vector(channels)),
        }
    }

    pub fn zeros(channels: usize, hidden: usize) -> Self {
        MlpParams {
            fc1_weight: Tensor::zeros(Shape::matrix(channels, hidden)),
            fc1_bias: Tensor::zeros(Shape::vector(hidden)),
            fc2_weight: Tensor::zeros(Shape::matrix(hidden, channels)),
            fc2_bias: Tensor::zeros(Shape::vector(channels)),
        }
    }

    pub fn write_to(&self, store: &mut ParamStore, prefix: &str) -> Result<()> {
        store.insert(format!("{prefix}.fc1.weight"), self.fc1_weight.clone())?;
        store.insert(format!("{prefix}.fc1.bias"), self.fc1_bias.clone())?;
        store.insert(format!("{prefix}.fc2.weight"), self.fc2_weight.clone())?;
        store.insert(format!("{prefix}.fc2.bias"), self.fc2_bias.clone())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GmbParams {
    pub ln1_gamma: Tensor,
    pub ln1_beta: Tensor,
    pub mixer: MixerParams,
    pub ln2_gamma: Tensor,
    pub ln2_beta: Tensor,
    pub mlp: MlpParams,
}

impl GmbParams {
    pub fn random(cfg: &GmbConfig, init: &mut Init) -> Self {
        let c = cfg.channels;
        GmbParams {
            ln1_gamma: Tensor::full(Shape::vector(c), 1.0),
            ln1_beta: Tensor::zeros(Shape::vector(c)),
            mixer: MixerParams::random(&cfg.mixer, init),
            ln2_gamma: Tensor::full(Shape::vector(c), 1.0),
            ln2_beta: Tensor::zeros(Shape::vector(c)),
            mlp: MlpParams::random(c, cfg.hidden(), init),
        }
    }

    /// Every parameter zero, which makes the block an exact identity.
    pub fn zeros(cfg: &GmbConfig) -> Self {
        let c = cfg.channels;
        GmbParams {
            ln1_gamma: Tensor::zeros(Shape::vector(c)),
            ln1_beta: Tensor::zeros(Shape::vector(c)),
            mixer: MixerParams::zeros(&cfg.mixer),
            ln2_gamma: Tensor::zeros(Shape::vector(c)),
            ln2_beta: Tensor::zeros(Shape::vector(c)),
            mlp: MlpParams::zeros(c, cfg.hidden()),
        }
    }

    pub fn write_to(&self, store: &mut ParamStore, prefix: &str) -> Result<()> {
        store.insert(format!("{prefix}.ln1.gamma"), self.ln1_gamma.clone())?;
        store.insert(format!("{prefix}.ln1.beta"), self.ln1_beta.clone())?;
        self.mixer
            .write_to(store, &format!("{prefix}.{}", self.mixer.kind().name()))?;
        store.insert(format!("{prefix}.ln2.gamma"), self.ln2_gamma.clone())?;
        store.insert(format!("{prefix}.ln2.beta"), self.ln2_beta.clone())?;
        self.mlp.write_to(store, &format!("{prefix}.mlp"))
    }
}

pub fn gmb_init(store: &mut ParamStore, prefix: &str, cfg: &GmbConfig, init: &mut Init) -> Result<()> {
    cfg.validate()?;
    GmbParams::random(cfg, init).write_to(store, prefix)
}

pub fn mlp_graph(tape: &mut Tape, store: &ParamStore, prefix: &str, x: Var) -> Result<Var> {
    let w1 = tape.param(store, &format!("{prefix}.fc1.weight"))?;
    let b1 = tape.param(store, &format!("{prefix}.fc1.bias"))?;
    let w2 = tape.param(store, &format!("{prefix}.fc2.weight"))?;
    let b2 = tape.param(store, &format!("{prefix}.fc2.bias"))?;
    let hidden = tape.linear(x, w1, Some(b1))?;
    let act = tape.gelu(hidden);
    tape.linear(act, w2, Some(b2))
}

/// Record one block on `tape`. Also returns the attention probabilities node
/// when the mixer is CRA/SRA.
pub fn gmb_graph(
    tape: &mut Tape,
    store: &ParamStore,
    prefix: &str,
    cfg: &GmbConfig,
    x: Var,
) -> Result<(Var, Option<Var>)> {
    cfg.validate()?;
    let s = tape.value(x).shape();
    if s.c != cfg.channels {
        return Err(Error::shape(
            "gmb",
            format!("block built for {} channels got input {s}", cfg.channels),
        ));
    }
    let ln = |tape: &mut Tape, which: &str, input: Var| -> Result<Var> {
        let g = tape.param(store, &format!("{prefix}.{which}.gamma"))?;
        let b = tape.param(store, &format!("{prefix}.{which}.beta"))?;
        tape.layer_norm(input, g, b, cfg.eps)
    };

    let normed = ln(tape, "ln1", x)?;
    let mixed = mixer_graph(tape, store, &format!("{prefix}.{}", cfg.mixer.kind.name()), &cfg.mixer, normed)?;
    let m = tape.add(mixed.out, x)?;

    let normed = ln(tape, "ln2", m)?;
    let mlp = mlp_graph(tape, store, &format!("{prefix}.mlp"), normed)?;
    let out = tape.add(mlp, m)?;
    Ok((out, mixed.scores))
}

/// `Conv1×1(GELU(Conv1×1(x)))`.
pub fn channel_mlp(x: &Tensor, p: &MlpParams) -> Result<Tensor> {
    let mut store = ParamStore::new();
    p.write_to(&mut store, "mlp")?;
    let mut tape = Tape::new();
    let xv = tape.input(x.clone());
    let out = mlp_graph(&mut tape, &store, "mlp", xv)?;
    Ok(tape.value(out).clone())
}

pub fn gmb_forward(x: &Tensor, cfg: &GmbConfig, p: &GmbParams) -> Result<Tensor> {
    if p.mixer.kind() != cfg.mixer.kind {
        return Err(Error::Config(format!(
            "block configured for {} got {} parameters",
            cfg.mixer.kind,
            p.mixer.kind()
        )));
    }
    let mut store = ParamStore::new();
    p.write_to(&mut store, "gmb")?;
    let mut tape = Tape::new();
    let xv = tape.input(x.clone());
    let (out, _) = gmb_graph(&mut tape, &store, "gmb", cfg, xv)?;
    Ok(tape.value(out).clone())
}
