//! Analytical multiply-accumulate (MAC) and parameter counting.
//!
//! Attention cost is counted from the true tensor shapes: a stage at stride
//! `s` has `N = (H/s)·(W/s)` query tokens and `N_k = N/r²` pooled keys.
//! The headline attention figure is the query-key product plus the
//! attention-value product. Projections, pooling and softmax are reported
//! alongside but kept out of the headline.

use std::fmt::{self, Write as _};

use crate::attention::MixerKind;
use crate::config::ModelConfig;

/// Attention variant being costed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttentionKind {
    Sra,
    Cra,
}

impl AttentionKind {
    pub fn name(self) -> &'static str {
        match self {
            AttentionKind::Sra => "sra",
            AttentionKind::Cra => "cra",
        }
    }
}

impl fmt::Display for AttentionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StageCost {
    pub stage: usize,
    pub tokens: u64,
    pub keys: u64,
    pub channels: u64,
    pub heads: u64,
    pub qk_macs: u64,
    pub av_macs: u64,
    pub proj_macs: u64,
    pub pool_adds: u64,
    pub softmax_exps: u64,
}

impl StageCost {
    /// `qk + av`, the headline attention cost.
    pub fn attention_macs(&self) -> u64 {
        self.qk_macs + self.av_macs
    }

    /// Attention plus projections.
    pub fn total_macs(&self) -> u64 {
        self.attention_macs() + self.proj_macs
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FlopReport {
    pub kind: AttentionKind,
    pub input_h: usize,
    pub input_w: usize,
    pub stages: Vec<StageCost>,
}

impl FlopReport {
    pub fn qk_macs(&self) -> u64 {
        self.stages.iter().map(|s| s.qk_macs).sum()
    }

    pub fn av_macs(&self) -> u64 {
        self.stages.iter().map(|s| s.av_macs).sum()
    }

    pub fn proj_macs(&self) -> u64 {
        self.stages.iter().map(|s| s.proj_macs).sum()
    }

    pub fn attention_macs(&self) -> u64 {
        self.qk_macs() + self.av_macs()
    }

    pub fn total_macs(&self) -> u64 {
        self.attention_macs() + self.proj_macs()
    }

    /// Human-readable table.
    pub fn render_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{} attention cost at {}x{} (MACs)",
            self.kind.name().to_uppercase(),
            self.input_h,
            self.input_w
        );
        let _ = writeln!(
            s,
            "{:>5} {:>7} {:>5} {:>5} {:>5} {:>12} {:>12} {:>12} {:>12}",
            "stage", "tokens", "keys", "C", "heads", "qk", "av", "qk+av", "proj"
        );
        for st in &self.stages {
            let _ = writeln!(
                s,
                "{:>5} {:>7} {:>5} {:>5} {:>5} {:>12} {:>12} {:>12} {:>12}",
                st.stage,
                st.tokens,
                st.keys,
                st.channels,
                st.heads,
                st.qk_macs,
                st.av_macs,
                st.attention_macs(),
                st.proj_macs
            );
        }
        let _ = writeln!(
            s,
            "attention (qk+av): {} MACs = {:.1}M",
            self.attention_macs(),
            millions(self.attention_macs())
        );
        let _ = writeln!(
            s,
            "projections: {} MACs (excluded from attention figure)",
            self.proj_macs()
        );
        s
    }

    /// Machine-readable `key=value` lines, keys prefixed with the mixer name.
    pub fn render_kv(&self) -> String {
        let k = self.kind.name();
        let mut s = String::new();
        for st in &self.stages {
            let p = format!("{k}.stage{}", st.stage);
            let _ = writeln!(s, "{p}.tokens={}", st.tokens);
            let _ = writeln!(s, "{p}.keys={}", st.keys);
            let _ = writeln!(s, "{p}.channels={}", st.channels);
            let _ = writeln!(s, "{p}.heads={}", st.heads);
            let _ = writeln!(s, "{p}.qk_macs={}", st.qk_macs);
            let _ = writeln!(s, "{p}.av_macs={}", st.av_macs);
            let _ = writeln!(s, "{p}.proj_macs={}", st.proj_macs);
            let _ = writeln!(s, "{p}.pool_adds={}", st.pool_adds);
            let _ = writeln!(s, "{p}.softmax_exps={}", st.softmax_exps);
        }
        let _ = writeln!(s, "{k}.qk_macs={}", self.qk_macs());
        let _ = writeln!(s, "{k}.av_macs={}", self.av_macs());
        let _ = writeln!(s, "{k}.proj_macs={}", self.proj_macs());
        let _ = writeln!(s, "{k}.attention_macs={}", self.attention_macs());
        let _ = writeln!(s, "{k}.total_macs={}", self.total_macs());
        s
    }
}

pub fn millions(v: u64) -> f64 {
    v as f64 / 1e6
}

/// Per-stage attention cost for the decoder stages listed in `cfg`.
///
/// SRA: `qk = N·N_k·C`, `av = N·N_k·C`. CRA: `qk = heads·N·N_k`,
/// `av = N·N_k·C`.
pub fn count_attention_macs(cfg: &ModelConfig, kind: AttentionKind, input_h: usize, input_w: usize) -> FlopReport {
    let heads = cfg.heads as u64;
    let stages = cfg
        .decoder_stages
        .iter()
        .map(|&stage| {
            let stride = 1usize << (stage + 1);
            let r = cfg.pool_ratios[stage - 2];
            let (h, w) = (input_h / stride, input_w / stride);
            let tokens = (h * w) as u64;
            let keys = ((h / r) * (w / r)) as u64;
            let c = cfg.encoder_channels[stage - 1] as u64;
            let (qk, proj) = match kind {
                AttentionKind::Sra => (tokens * keys * c, tokens * c * c + 2 * keys * c * c + tokens * c * c),
                AttentionKind::Cra => (
                    heads * tokens * keys,
                    tokens * c * heads + keys * c * heads + keys * c * c + tokens * c * c,
                ),
            };
            StageCost {
                stage,
                tokens,
                keys,
                channels: c,
                heads,
                qk_macs: qk,
                av_macs: tokens * keys * c,
                proj_macs: proj,
                pool_adds: tokens * c,
                softmax_exps: heads * tokens * keys,
            }
        })
        .collect();
    FlopReport {
        kind,
        input_h,
        input_w,
        stages,
    }
}

/// SRA and CRA side by side.
#[derive(Clone, Debug, PartialEq)]
pub struct Comparison {
    pub sra: FlopReport,
    pub cra: FlopReport,
}

impl Comparison {
    pub fn new(cfg: &ModelConfig, input_h: usize, input_w: usize) -> Self {
        Comparison {
            sra: count_attention_macs(cfg, AttentionKind::Sra, input_h, input_w),
            cra: count_attention_macs(cfg, AttentionKind::Cra, input_h, input_w),
        }
    }

    /// `100·(1 − cra/sra)` over the `qk+av` terms.
    pub fn reduction_percent(&self) -> f64 {
        let sra = self.sra.attention_macs();
        if sra == 0 {
            return 0.0;
        }
        100.0 * (1.0 - self.cra.attention_macs() as f64 / sra as f64)
    }
}

/// Idealized attention cost with `n = tokens / ratio` reduced tokens:
/// SRA pays `n²C` for query-key and `n²C` for value mixing, CRA pays `n²`
/// for query-key (one channel per head) and `n²C` for value mixing.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IdealizedCost {
    pub sra: f64,
    pub cra: f64,
}

impl IdealizedCost {
    /// CRA over SRA; `(1 + C) / (2C)`.
    pub fn ratio(&self) -> f64 {
        self.cra / self.sra
    }
}

pub fn idealized_cost(tokens: u64, ratio: u64, channels: u64) -> IdealizedCost {
    let reduced = tokens as f64 / ratio as f64;
    let sq = reduced * reduced;
    let c = channels as f64;
    IdealizedCost {
        sra: sq * c + sq * c,
        cra: sq + sq * c,
    }
}

/// Exact parameter totals per component.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamReport {
    pub encoder: usize,
    pub decoder_stages: Vec<(usize, usize)>,
    pub fusion: usize,
    pub head: usize,
}

impl ParamReport {
    pub fn decoder(&self) -> usize {
        self.decoder_stages.iter().map(|(_, n)| n).sum::<usize>() + self.fusion + self.head
    }

    pub fn total(&self) -> usize {
        self.encoder + self.decoder()
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "encoder={}", self.encoder);
        for (stage, n) in &self.decoder_stages {
            let _ = writeln!(s, "decoder.stage{stage}={n}");
        }
        let _ = writeln!(s, "decoder.fuse={}", self.fusion);
        let _ = writeln!(s, "decoder.head={}", self.head);
        let _ = writeln!(s, "decoder={}", self.decoder());
        let _ = writeln!(s, "total={}", self.total());
        s
    }
}

fn conv3_params(cin: usize, cout: usize) -> usize {
    cout * cin * 9 + cout
}

fn linear_params(cin: usize, cout: usize) -> usize {
    cin * cout + cout
}

fn mixer_params(kind: MixerKind, c: usize, heads: usize) -> usize {
    match kind {
        MixerKind::Cra => 2 * c * heads + 2 * c * c,
        MixerKind::Sra => 4 * c * c,
        MixerKind::AvgPool => 0,
        MixerKind::DepthwiseConv3 => 9 * c + c,
        MixerKind::Conv3 => 9 * c * c + c,
    }
}

fn block_params(kind: MixerKind, c: usize, heads: usize, expansion: usize) -> usize {
    let hidden = expansion * c;
    4 * c + mixer_params(kind, c, heads) + linear_params(c, hidden) + linear_params(hidden, c)
}

pub fn count_params(cfg: &ModelConfig) -> ParamReport {
    let c = cfg.encoder_channels;
    let e = cfg.mlp_expansion;
    let mut encoder = conv3_params(3, c[0]) + conv3_params(c[0], c[0]);
    for i in 0..4 {
        if i > 0 {
            encoder += conv3_params(c[i - 1], c[i]);
        }
        encoder += cfg.encoder_blocks[i] * block_params(MixerKind::DepthwiseConv3, c[i], 1, e);
    }
    let decoder_stages = cfg
        .decoder_stages
        .iter()
        .map(|&s| (s, block_params(cfg.mixer, c[s - 1], cfg.heads, e)))
        .collect();
    let c_fuse = c[1] + c[2] + c[3];
    ParamReport {
        encoder,
        decoder_stages,
        fusion: linear_params(c_fuse, cfg.c_mlp),
        head: linear_params(cfg.c_mlp, cfg.num_classes),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn metaseg_t() -> ModelConfig {
        ModelConfig {
            input_h: 512,
            input_w: 512,
            encoder_channels: [32, 64, 160, 256],
            ..ModelConfig::default()
        }
    }

    #[test]
    fn sra_matches_hand_sum() {
        let r = count_attention_macs(&metaseg_t(), AttentionKind::Sra, 512, 512);
        let want = 2 * 4096 * 64 * 64 + 2 * 1024 * 64 * 160 + 2 * 256 * 64 * 256;
        assert_eq!(r.attention_macs(), want);
        assert_eq!(r.attention_macs(), 62_914_560);
        assert!(r.stages.iter().all(|s| s.keys == 64));
    }

    #[test]
    fn cra_single_head() {
        let cfg = ModelConfig {
            heads: 1,
            ..metaseg_t()
        };
        let c = Comparison::new(&cfg, 512, 512);
        // qk: 64·(4096+1024+256); av: half of the SRA total
        assert_eq!(c.cra.qk_macs(), 344_064);
        assert_eq!(c.cra.av_macs(), 31_457_280);
        assert_eq!(c.cra.attention_macs(), 31_801_344);
        assert!((c.reduction_percent() - 49.453).abs() < 1e-3);
    }

    #[test]
    fn degenerate_single_channel() {
        let cfg = ModelConfig {
            encoder_channels: [1, 1, 1, 1],
            heads: 1,
            pool_ratios: [1, 1, 1],
            decoder_stages: vec![3],
            ..ModelConfig::default()
        };
        let c = Comparison::new(&cfg, 64, 64);
        assert_eq!(c.sra.attention_macs(), c.cra.attention_macs());
    }

    #[test]
    fn idealized_values() {
        let e = idealized_cost(64, 2, 4);
        assert_eq!((e.sra, e.cra), (8192.0, 5120.0));
        let e = idealized_cost(100, 3, 1);
        assert_eq!(e.sra, e.cra);
        assert!((idealized_cost(4096, 8, 256).ratio() - 0.501_953_125).abs() < 1e-15);
    }

    #[test]
    fn linear_only_param_count() {
        assert_eq!(linear_params(7, 3), 24);
    }

    #[test]
    fn report_renders() {
        let c = Comparison::new(&metaseg_t(), 512, 512);
        let kv = c.sra.render_kv();
        assert!(kv.contains("sra.attention_macs=62914560"));
        assert!(c.sra.render_text().contains("62.9M"));
    }
}
