//! Line-oriented `key = value` model configuration.
//!
//! Blank lines and `#` comments are ignored. Unknown or repeated keys are
//! errors; missing keys keep their defaults. Lists are comma separated.

use std::fmt::Write as _;
use std::str::FromStr;

use crate::attention::MixerKind;
use crate::decoder::{DecoderConfig, DECODER_STAGES};
use crate::encoder::{EncoderConfig, ENCODER_DIVISOR};
use crate::error::{Error, Result};
use crate::metaformer::DEFAULT_LN_EPS;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub seed: u64,
    pub input_h: usize,
    pub input_w: usize,
    pub num_classes: usize,
    pub encoder_channels: [usize; 4],
    pub encoder_blocks: [usize; 4],
    /// Decoder stages (subset of 2, 3, 4) that run a GMB.
    pub decoder_stages: Vec<usize>,
    pub mixer: MixerKind,
    pub heads: usize,
    pub pool_ratios: [usize; 3],
    pub c_mlp: usize,
    pub mlp_expansion: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            seed: 0,
            input_h: 64,
            input_w: 64,
            num_classes: 2,
            encoder_channels: [32, 64, 160, 256],
            encoder_blocks: [1, 1, 1, 1],
            decoder_stages: vec![2, 3, 4],
            mixer: MixerKind::Cra,
            heads: 8,
            pool_ratios: [8, 4, 2],
            c_mlp: 256,
            mlp_expansion: 4,
        }
    }
}

/// Upper bounds that keep every size, MAC and parameter count far inside
/// 64-bit arithmetic. They are generous for this model family.
pub const MAX_SIDE: usize = 4096;
pub const MAX_CHANNELS: usize = 1 << 16;
pub const MAX_BLOCKS: usize = 1024;
pub const MAX_POOL_RATIO: usize = 1024;
pub const MAX_EXPANSION: usize = 64;
pub const MAX_CLASSES: usize = 1 << 16;

pub const KEYS: [&str; 12] = [
    "seed",
    "input_h",
    "input_w",
    "num_classes",
    "encoder.channels",
    "encoder.blocks",
    "decoder.stages",
    "decoder.mixer",
    "decoder.heads",
    "decoder.pool_ratios",
    "decoder.c_mlp",
    "mlp.expansion",
];

fn parse_num<T: FromStr>(value: &str) -> std::result::Result<T, String> {
    value
        .parse::<T>()
        .map_err(|_| format!("expected a non-negative integer, got {value:?}"))
}

fn parse_list<const N: usize>(value: &str) -> std::result::Result<[usize; N], String> {
    let items = value
        .split(',')
        .map(|s| parse_num::<usize>(s.trim()))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    items
        .try_into()
        .map_err(|v: Vec<usize>| format!("expected {N} comma-separated values, got {}", v.len()))
}

fn parse_stages(value: &str) -> std::result::Result<Vec<usize>, String> {
    let mut stages = Vec::new();
    for part in value.split(',') {
        let s: usize = parse_num(part.trim())?;
        if !DECODER_STAGES.contains(&s) {
            return Err(format!("decoder stage {s} not in {{2, 3, 4}}"));
        }
        if stages.contains(&s) {
            return Err(format!("decoder stage {s} listed twice"));
        }
        stages.push(s);
    }
    stages.sort_unstable();
    Ok(stages)
}

fn join(values: &[usize]) -> String {
    values.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

impl ModelConfig {
    /// Parse and validate config text.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = ModelConfig::default();
        let mut seen: Vec<&str> = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |message: String| Error::ConfigLine { line: line_no, message };
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected key = value, got {line:?}")))?;
            let (key, value) = (key.trim(), value.trim());
            let known = KEYS
                .iter()
                .find(|k| **k == key)
                .ok_or_else(|| err(format!("unknown key {key:?}")))?;
            if seen.contains(known) {
                return Err(err(format!("duplicate key {key:?}")));
            }
            seen.push(known);
            cfg.set(key, value).map_err(err)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        match key {
            "seed" => self.seed = parse_num(value)?,
            "input_h" => self.input_h = parse_num(value)?,
            "input_w" => self.input_w = parse_num(value)?,
            "num_classes" => self.num_classes = parse_num(value)?,
            "encoder.channels" => self.encoder_channels = parse_list(value)?,
            "encoder.blocks" => self.encoder_blocks = parse_list(value)?,
            "decoder.stages" => self.decoder_stages = parse_stages(value)?,
            "decoder.mixer" => self.mixer = value.parse().map_err(|e: Error| e.to_string())?,
            "decoder.heads" => self.heads = parse_num(value)?,
            "decoder.pool_ratios" => self.pool_ratios = parse_list(value)?,
            "decoder.c_mlp" => self.c_mlp = parse_num(value)?,
            "mlp.expansion" => self.mlp_expansion = parse_num(value)?,
            _ => return Err(format!("unknown key {key:?}")),
        }
        Ok(())
    }

    /// Canonical text form; `parse(render(c)) == c`.
    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "input_h = {}", self.input_h);
        let _ = writeln!(s, "input_w = {}", self.input_w);
        let _ = writeln!(s, "num_classes = {}", self.num_classes);
        let _ = writeln!(s, "encoder.channels = {}", join(&self.encoder_channels));
        let _ = writeln!(s, "encoder.blocks = {}", join(&self.encoder_blocks));
        let _ = writeln!(s, "decoder.stages = {}", join(&self.decoder_stages));
        let _ = writeln!(s, "decoder.mixer = {}", self.mixer);
        let _ = writeln!(s, "decoder.heads = {}", self.heads);
        let _ = writeln!(s, "decoder.pool_ratios = {}", join(&self.pool_ratios));
        let _ = writeln!(s, "decoder.c_mlp = {}", self.c_mlp);
        let _ = writeln!(s, "mlp.expansion = {}", self.mlp_expansion);
        s
    }

    pub fn encoder(&self) -> EncoderConfig {
        EncoderConfig {
            channels: self.encoder_channels,
            blocks: self.encoder_blocks,
            expansion: self.mlp_expansion,
            eps: DEFAULT_LN_EPS,
        }
    }

    pub fn decoder(&self) -> DecoderConfig {
        let c = self.encoder_channels;
        DecoderConfig {
            stage_channels: [c[1], c[2], c[3]],
            active: DECODER_STAGES.map(|s| self.decoder_stages.contains(&s)),
            ratios: self.pool_ratios,
            heads: self.heads,
            c_mlp: self.c_mlp,
            num_classes: self.num_classes,
            mixer: self.mixer,
            expansion: self.mlp_expansion,
            eps: DEFAULT_LN_EPS,
        }
    }

    /// Smallest side length every input must divide into: the encoder's
    /// stride 32, and for each active attention stage `i`, its stride
    /// `2^(i+1)` times its pool ratio.
    pub fn required_divisor(&self) -> usize {
        let mut d = ENCODER_DIVISOR;
        if self.mixer.is_attention() {
            for &stage in &self.decoder_stages {
                let stride = 1usize << (stage + 1);
                d = lcm(d, stride * self.pool_ratios[stage - 2]);
            }
        }
        d
    }

    /// Check an input size against [`Self::required_divisor`].
    pub fn check_input(&self, h: usize, w: usize) -> Result<()> {
        let d = self.required_divisor();
        if h == 0 || w == 0 || !h.is_multiple_of(d) || !w.is_multiple_of(d) {
            return Err(Error::Config(format!(
                "input {h}x{w} must be a non-zero multiple of {d} in both dimensions"
            )));
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let limits = [
            ("input_h", self.input_h, MAX_SIDE),
            ("input_w", self.input_w, MAX_SIDE),
            ("num_classes", self.num_classes, MAX_CLASSES),
            ("decoder.heads", self.heads, MAX_CHANNELS),
            ("decoder.c_mlp", self.c_mlp, MAX_CHANNELS),
            ("mlp.expansion", self.mlp_expansion, MAX_EXPANSION),
        ];
        let lists = self
            .encoder_channels
            .iter()
            .map(|&c| ("encoder.channels", c, MAX_CHANNELS))
            .chain(self.encoder_blocks.iter().map(|&b| ("encoder.blocks", b, MAX_BLOCKS)))
            .chain(self.pool_ratios.iter().map(|&r| ("decoder.pool_ratios", r, MAX_POOL_RATIO)));
        for (key, value, max) in limits.into_iter().chain(lists) {
            if value > max {
                return Err(Error::Config(format!("{key} value {value} exceeds the limit {max}")));
            }
        }
        if self.decoder_stages.is_empty() {
            return Err(Error::Config("decoder.stages must list at least one of 2, 3, 4".into()));
        }
        if self.pool_ratios.contains(&0) {
            return Err(Error::Config("decoder.pool_ratios must be >= 1".into()));
        }
        if self.heads == 0 {
            return Err(Error::Config("decoder.heads must be >= 1".into()));
        }
        self.encoder().validate()?;
        self.decoder().validate()?;
        self.check_input(self.input_h, self.input_w)
    }
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

fn lcm(a: usize, b: usize) -> usize {
    a / gcd(a, b) * b
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_round_trip() {
        let cfg = ModelConfig::parse("").unwrap();
        assert_eq!(cfg, ModelConfig::default());
        assert_eq!(ModelConfig::parse(&cfg.render()).unwrap(), cfg);
    }

    #[test]
    fn parses_all_keys() {
        let text = "# comment\nseed = 9\ninput_h=128\ninput_w = 64 # trailing\nnum_classes=5\n\
                    encoder.channels = 8, 16,32,64\nencoder.blocks=1,2,3,4\ndecoder.stages=4,2\n\
                    decoder.mixer = sra\ndecoder.heads=4\ndecoder.pool_ratios=4,2,1\n\
                    decoder.c_mlp=32\nmlp.expansion=2\n";
        let cfg = ModelConfig::parse(text).unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!((cfg.input_h, cfg.input_w), (128, 64));
        assert_eq!(cfg.decoder_stages, vec![2, 4]);
        assert_eq!(cfg.mixer, MixerKind::Sra);
        assert_eq!(cfg.pool_ratios, [4, 2, 1]);
        assert_eq!(cfg.decoder().active, [true, false, true]);
    }

    #[test]
    fn errors_cite_line_numbers() {
        let cases = [
            ("seed = 1\nbogus = 2\n", 2),
            ("\n\nseed = x\n", 3),
            ("encoder.channels = 1,2,3\n", 1),
            ("decoder.stages = 1,2\n", 1),
            ("seed = 1\nseed = 2\n", 2),
            ("decoder.mixer = mamba\n", 1),
            ("no equals sign\n", 1),
        ];
        for (text, line) in cases {
            match ModelConfig::parse(text) {
                Err(Error::ConfigLine { line: l, .. }) => assert_eq!(l, line, "{text:?}"),
                other => panic!("{text:?}: {other:?}"),
            }
        }
    }

    #[test]
    fn semantic_validation() {
        assert!(ModelConfig::parse("num_classes = 1").is_err());
        assert!(ModelConfig::parse("decoder.heads = 3").is_err());
        assert!(ModelConfig::parse("input_h = 96").is_err());
        assert!(ModelConfig::parse("decoder.c_mlp = 0").is_err());
    }

    #[test]
    fn divisor_follows_active_stages() {
        let cfg = ModelConfig::default();
        assert_eq!(cfg.required_divisor(), 64);
        let cfg = ModelConfig {
            pool_ratios: [1, 1, 1],
            ..ModelConfig::default()
        };
        assert_eq!(cfg.required_divisor(), 32);
        let cfg = ModelConfig {
            mixer: MixerKind::DepthwiseConv3,
            ..ModelConfig::default()
        };
        assert_eq!(cfg.required_divisor(), 32);
    }
}
