//! Finite-difference checks of every differentiable building block, sized
//! from a (small) model config.
//!
//! Each check builds the module on a fresh tape, reduces its output with a
//! fixed random weighting `Σ R ⊙ out` (a plain sum would make some
//! gradients vanish identically, e.g. through layer norm) and compares the
//! analytic gradient of every parameter against central differences. All
//! checks except linear, conv2d, encode and decode also check the input.

use std::fmt;
use std::str::FromStr;

use crate::attention::{mixer_graph, mixer_init, MixerConfig, MixerKind};
use crate::config::ModelConfig;
use crate::decoder::{decode_graph, decoder_init};
use crate::encoder::{encode_graph, encoder_init, IMAGE_CHANNELS};
use crate::error::{Error, Result};
use crate::gradcheck::{check_all, GradCheckReport};
use crate::metaformer::{gmb_graph, gmb_init, mlp_graph, GmbConfig, MlpParams};
use crate::ops::ConvSpec;
use crate::params::{Init, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::{Shape, Tensor};

/// Largest channel count a checked config may use.
pub const MAX_CHANNELS: usize = 16;
/// Largest side of the stride-8 grid a checked config may use.
pub const MAX_SIDE: usize = 8;
pub const DEFAULT_EPSILON: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CheckModule {
    Linear,
    Conv2d,
    LayerNorm,
    Gelu,
    ChannelMlp,
    Cra,
    Sra,
    Gmb,
    Encode,
    Decode,
}

impl CheckModule {
    pub const ALL: [CheckModule; 10] = [
        CheckModule::Linear,
        CheckModule::Conv2d,
        CheckModule::LayerNorm,
        CheckModule::Gelu,
        CheckModule::ChannelMlp,
        CheckModule::Cra,
        CheckModule::Sra,
        CheckModule::Gmb,
        CheckModule::Encode,
        CheckModule::Decode,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CheckModule::Linear => "linear",
            CheckModule::Conv2d => "conv2d",
            CheckModule::LayerNorm => "layer_norm",
            CheckModule::Gelu => "gelu",
            CheckModule::ChannelMlp => "channel_mlp",
            CheckModule::Cra => "cra",
            CheckModule::Sra => "sra",
            CheckModule::Gmb => "gmb",
            CheckModule::Encode => "encode",
            CheckModule::Decode => "decode",
        }
    }

    /// Pass threshold on the worst relative error. The linear layer is
    /// exactly linear in each argument, so central differences are exact up
    /// to roundoff.
    pub fn tolerance(self) -> f64 {
        match self {
            CheckModule::Linear => 1e-8,
            _ => 1e-5,
        }
    }
}

impl fmt::Display for CheckModule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CheckModule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        CheckModule::ALL.into_iter().find(|m| m.name() == s).ok_or_else(|| {
            let names: Vec<_> = CheckModule::ALL.iter().map(|m| m.name()).collect();
            Error::Config(format!("unknown module {s:?} (expected one of {})", names.join(", ")))
        })
    }
}

/// Reject configs too large to check in reasonable time.
pub fn check_toy_dims(cfg: &ModelConfig) -> Result<()> {
    let widest = cfg.encoder_channels.iter().copied().chain([cfg.c_mlp]).max().unwrap_or(0);
    if widest > MAX_CHANNELS {
        return Err(Error::Config(format!(
            "gradcheck needs channels and c_mlp <= {MAX_CHANNELS}, config uses {widest}"
        )));
    }
    let (h, w) = (cfg.input_h / 8, cfg.input_w / 8);
    if h > MAX_SIDE || w > MAX_SIDE {
        return Err(Error::Config(format!(
            "gradcheck needs a stride-8 grid of at most {MAX_SIDE}x{MAX_SIDE}, config gives {h}x{w}"
        )));
    }
    Ok(())
}

/// Result of one module's check.
#[derive(Clone, Debug)]
pub struct ModuleCheck {
    pub module: CheckModule,
    pub report: GradCheckReport,
}

impl ModuleCheck {
    pub fn passed(&self) -> bool {
        self.report.failures(self.module.tolerance()).is_empty()
    }

    pub fn failures(&self) -> Vec<&str> {
        self.report.failures(self.module.tolerance())
    }
}

struct Toy {
    channels: usize,
    h: usize,
    w: usize,
    heads: usize,
    ratio: usize,
    batch: usize,
}

impl Toy {
    fn from_config(cfg: &ModelConfig) -> Self {
        Toy {
            channels: cfg.encoder_channels[1],
            h: cfg.input_h / 8,
            w: cfg.input_w / 8,
            heads: cfg.heads,
            ratio: cfg.pool_ratios[0],
            batch: 2,
        }
    }

    fn input_shape(&self) -> Shape {
        Shape::new(self.batch, self.channels, self.h, self.w)
    }
}

/// `Σ R ⊙ out` with `R` drawn from `init`.
fn reduce(tape: &mut Tape, out: Var, weights: &Tensor) -> Result<Var> {
    tape.weighted_sum(out, weights.clone())
}

fn weights_for(init: &mut Init, shape: Shape) -> Tensor {
    init.uniform(shape, 1.0)
}

fn run<B>(store: &mut ParamStore, epsilon: f64, build: B) -> Result<GradCheckReport>
where
    B: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    check_all(store, epsilon, None, build)
}

/// Check one module at the dimensions implied by `cfg`.
pub fn check_module(module: CheckModule, cfg: &ModelConfig, epsilon: f64) -> Result<ModuleCheck> {
    check_toy_dims(cfg)?;
    let toy = Toy::from_config(cfg);
    let mut init = Init::new(cfg.seed);
    let mut store = ParamStore::new();
    let c = toy.channels;
    let xs = toy.input_shape();
    // Parameter-free ops are checked through their input; the linear and
    // convolution checks cover their parameters only.
    let x = init.uniform(xs, 1.0);
    let input_is_checked = !matches!(
        module,
        CheckModule::Linear | CheckModule::Conv2d | CheckModule::Encode | CheckModule::Decode
    );
    if input_is_checked {
        store.insert("input", x.clone())?;
    }

    let report = match module {
        CheckModule::Linear => {
            let cout = cfg.c_mlp;
            store.insert("weight", init.linear(c, cout))?;
            store.insert("bias", init.uniform(Shape::vector(cout), 0.5))?;
            let r = weights_for(&mut init, Shape::new(xs.n, cout, xs.h, xs.w));
            run(&mut store, epsilon, |t, s| {
                let (x, w, b) = (t.input(x.clone()), t.param(s, "weight")?, t.param(s, "bias")?);
                let y = t.linear(x, w, Some(b))?;
                reduce(t, y, &r)
            })?
        }
        CheckModule::Conv2d => {
            let cout = cfg.encoder_channels[2];
            let spec = ConvSpec::new(2, 1, 1);
            store.insert("weight", init.conv(cout, c, 3))?;
            store.insert("bias", init.uniform(Shape::vector(cout), 0.5))?;
            let r = weights_for(&mut init, Shape::new(xs.n, cout, xs.h.div_ceil(2), xs.w.div_ceil(2)));
            run(&mut store, epsilon, |t, s| {
                let (x, w, b) = (t.input(x.clone()), t.param(s, "weight")?, t.param(s, "bias")?);
                let y = t.conv2d(x, w, Some(b), spec)?;
                reduce(t, y, &r)
            })?
        }
        CheckModule::LayerNorm => {
            let gamma = init.uniform(Shape::vector(c), 0.5).map(|v| 1.0 + v);
            store.insert("gamma", gamma)?;
            store.insert("beta", init.uniform(Shape::vector(c), 0.5))?;
            let r = weights_for(&mut init, xs);
            run(&mut store, epsilon, |t, s| {
                let (x, g, b) = (t.param(s, "input")?, t.param(s, "gamma")?, t.param(s, "beta")?);
                let y = t.layer_norm(x, g, b, cfg.decoder().eps)?;
                reduce(t, y, &r)
            })?
        }
        CheckModule::Gelu => {
            let r = weights_for(&mut init, xs);
            run(&mut store, epsilon, |t, s| {
                let x = t.param(s, "input")?;
                let y = t.gelu(x);
                reduce(t, y, &r)
            })?
        }
        CheckModule::ChannelMlp => {
            let hidden = cfg.mlp_expansion * c;
            let mut p = MlpParams::random(c, hidden, &mut init);
            p.fc1_bias = init.uniform(Shape::vector(hidden), 0.5);
            p.fc2_bias = init.uniform(Shape::vector(c), 0.5);
            p.write_to(&mut store, "mlp")?;
            let r = weights_for(&mut init, xs);
            run(&mut store, epsilon, |t, s| {
                let x = t.param(s, "input")?;
                let y = mlp_graph(t, s, "mlp", x)?;
                reduce(t, y, &r)
            })?
        }
        CheckModule::Cra | CheckModule::Sra => {
            let kind = if module == CheckModule::Cra { MixerKind::Cra } else { MixerKind::Sra };
            let mcfg = MixerConfig::new(kind, c, toy.heads, toy.ratio);
            mixer_init(&mut store, "mixer", &mcfg, &mut init)?;
            let r = weights_for(&mut init, xs);
            run(&mut store, epsilon, |t, s| {
                let x = t.param(s, "input")?;
                let y = mixer_graph(t, s, "mixer", &mcfg, x)?.out;
                reduce(t, y, &r)
            })?
        }
        CheckModule::Gmb => {
            let mcfg = MixerConfig::new(cfg.mixer, c, toy.heads, toy.ratio);
            let bcfg = GmbConfig {
                eps: cfg.decoder().eps,
                ..GmbConfig::new(mcfg).with_expansion(cfg.mlp_expansion)
            };
            gmb_init(&mut store, "block", &bcfg, &mut init)?;
            perturb_affine(&mut store, &mut init)?;
            let r = weights_for(&mut init, xs);
            run(&mut store, epsilon, |t, s| {
                let x = t.param(s, "input")?;
                let y = gmb_graph(t, s, "block", &bcfg, x)?.0;
                reduce(t, y, &r)
            })?
        }
        CheckModule::Encode => {
            let ecfg = cfg.encoder();
            encoder_init(&mut store, &ecfg, &mut init)?;
            perturb_affine(&mut store, &mut init)?;
            let image = init.uniform(Shape::new(1, IMAGE_CHANNELS, cfg.input_h, cfg.input_w), 1.0);
            let rs: Vec<Tensor> = (0..4)
                .map(|i| {
                    let stride = 4 << i;
                    let shape = Shape::new(1, ecfg.channels[i], cfg.input_h / stride, cfg.input_w / stride);
                    weights_for(&mut init, shape)
                })
                .collect();
            run(&mut store, epsilon, |t, s| {
                let x = t.input(image.clone());
                let feats = encode_graph(t, s, &ecfg, x)?;
                let mut total = reduce(t, feats[0], &rs[0])?;
                for (f, r) in feats.iter().zip(&rs).skip(1) {
                    let part = reduce(t, *f, r)?;
                    total = t.add(total, part)?;
                }
                Ok(total)
            })?
        }
        CheckModule::Decode => {
            let dcfg = cfg.decoder();
            decoder_init(&mut store, &dcfg, &mut init)?;
            perturb_affine(&mut store, &mut init)?;
            let feats: Vec<Tensor> = (0..3)
                .map(|i| {
                    let stride = 8 << i;
                    let shape = Shape::new(1, dcfg.stage_channels[i], cfg.input_h / stride, cfg.input_w / stride);
                    init.uniform(shape, 1.0)
                })
                .collect();
            let r = weights_for(&mut init, Shape::new(1, dcfg.num_classes, cfg.input_h / 8, cfg.input_w / 8));
            run(&mut store, epsilon, |t, s| {
                let f = [0, 1, 2].map(|i| t.input(feats[i].clone()));
                let out = decode_graph(t, s, &dcfg, f)?;
                reduce(t, out.logits, &r)
            })?
        }
    };
    Ok(ModuleCheck { module, report })
}

/// Move zero biases and unit layer-norm gains off their initial values so
/// every parameter gets a generic gradient.
fn perturb_affine(store: &mut ParamStore, init: &mut Init) -> Result<()> {
    let names: Vec<String> = store
        .names()
        .filter(|n| n.ends_with("bias") || n.ends_with("gamma") || n.ends_with("beta"))
        .map(str::to_string)
        .collect();
    for name in names {
        let shape = store.value(&name)?.shape();
        let noise = init.uniform(shape, 0.2);
        store.value_mut(&name)?.add_assign(&noise)?;
    }
    Ok(())
}

/// Check `modules` (all of them when empty) in order.
pub fn check_modules(modules: &[CheckModule], cfg: &ModelConfig, epsilon: f64) -> Result<Vec<ModuleCheck>> {
    let list: &[CheckModule] = if modules.is_empty() { &CheckModule::ALL } else { modules };
    list.iter().map(|&m| check_module(m, cfg, epsilon)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn toy_config() -> ModelConfig {
        ModelConfig {
            input_h: 32,
            input_w: 32,
            encoder_channels: [4, 4, 8, 8],
            heads: 2,
            pool_ratios: [2, 2, 1],
            c_mlp: 8,
            mlp_expansion: 2,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn names_round_trip() {
        for m in CheckModule::ALL {
            assert_eq!(m.name().parse::<CheckModule>().unwrap(), m);
        }
        assert!("conv3d".parse::<CheckModule>().is_err());
    }

    #[test]
    fn large_configs_rejected() {
        assert!(check_toy_dims(&ModelConfig::default()).is_err());
        let big = ModelConfig {
            input_h: 128,
            ..toy_config()
        };
        assert!(check_toy_dims(&big).is_err());
        assert!(check_toy_dims(&toy_config()).is_ok());
    }

    #[test]
    fn single_op_modules_pass() {
        for m in [CheckModule::Linear, CheckModule::Gelu, CheckModule::LayerNorm] {
            let r = check_module(m, &toy_config(), DEFAULT_EPSILON).unwrap();
            assert!(r.passed(), "{m}: {:?}", r.report);
        }
    }
}
