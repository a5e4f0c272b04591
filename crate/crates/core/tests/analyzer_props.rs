mod common;

use common::load_config;
use metaseg_core::analyzer::{count_attention_macs, count_params, idealized_cost, AttentionKind, Comparison};
use metaseg_core::attention::MixerKind;
use metaseg_core::{MetaSeg, ModelConfig};
use proptest::prelude::*;

fn arb_config() -> impl Strategy<Value = ModelConfig> {
    (
        prop::sample::select(vec![1usize, 2, 4]),
        prop::array::uniform4(1usize..=4),
        prop::array::uniform4(0usize..=2),
        prop::array::uniform3(prop::sample::select(vec![1usize, 2, 4])),
        prop::sample::subsequence(vec![2usize, 3, 4], 1..=3),
        prop::sample::select(vec![MixerKind::Cra, MixerKind::Sra, MixerKind::DepthwiseConv3, MixerKind::AvgPool]),
        (1usize..=12, 2usize..=6, 1usize..=3, any::<u64>()),
    )
        .prop_map(|(heads, widths, blocks, ratios, stages, mixer, (c_mlp, classes, expansion, seed))| {
            let mut cfg = ModelConfig {
                seed,
                num_classes: classes,
                encoder_channels: widths.map(|w| w * heads),
                encoder_blocks: blocks,
                decoder_stages: stages,
                mixer,
                heads,
                pool_ratios: ratios,
                c_mlp,
                mlp_expansion: expansion,
                ..ModelConfig::default()
            };
            let d = cfg.required_divisor();
            cfg.input_h = d;
            cfg.input_w = d;
            cfg
        })
}

fn with_heads(cfg: &ModelConfig, heads: usize) -> ModelConfig {
    ModelConfig { heads, ..cfg.clone() }
}

#[test]
fn headline_configurations() {
    let t = load_config("metaseg-t.cfg");
    let b = load_config("metaseg-b.cfg");
    let ct = Comparison::new(&t, 512, 512);
    assert_eq!(ct.sra.attention_macs(), 62_914_560);
    let single = count_attention_macs(&with_heads(&t, 1), AttentionKind::Cra, 512, 512);
    assert_eq!(single.attention_macs(), 31_801_344);
    assert!((ct.reduction_percent() - 45.63).abs() < 0.01);
    let cb = Comparison::new(&b, 512, 512);
    assert_eq!(cb.sra.attention_macs(), 125_829_120);
    assert_eq!(cb.cra.attention_macs(), 65_667_072);
}

#[test]
fn idealized_cost_ratio_is_exact() {
    for c in [1u64, 4, 64, 256] {
        let cost = idealized_cost(4096, 8, c);
        assert_eq!(cost.ratio(), (1.0 + c as f64) / (2.0 * c as f64), "C={c}");
    }
    let mut prev = f64::INFINITY;
    for c in 1..=512u64 {
        let r = idealized_cost(1024, 4, c).ratio();
        assert!(r <= prev && r > 0.5);
        prev = r;
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(50))]

    #[test]
    fn attention_costs_are_ordered(cfg in arb_config(), k in 1usize..=2) {
        let cfg = ModelConfig { mixer: MixerKind::Cra, ..cfg };
        let (h, w) = (cfg.required_divisor() * k, cfg.required_divisor());
        let sra = count_attention_macs(&cfg, AttentionKind::Sra, h, w);
        let cra = count_attention_macs(&cfg, AttentionKind::Cra, h, w);
        let one = count_attention_macs(&with_heads(&cfg, 1), AttentionKind::Cra, h, w);
        prop_assert!(cra.qk_macs() <= sra.qk_macs());
        prop_assert_eq!(cra.av_macs(), sra.av_macs());
        for (s, o) in sra.stages.iter().zip(&one.stages) {
            prop_assert_eq!(o.qk_macs * s.channels, s.qk_macs);
        }
        prop_assert!(cra.attention_macs() <= sra.attention_macs());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn analytic_param_count_matches_model(cfg in arb_config()) {
        let model = MetaSeg::new(cfg.clone()).unwrap();
        let store = model.init_params().unwrap();
        let report = count_params(&cfg);
        prop_assert_eq!(report.total(), store.num_elements());
        prop_assert_eq!(report.encoder, store.num_elements_with_prefix("encoder."));
        for (stage, n) in &report.decoder_stages {
            prop_assert_eq!(*n, store.num_elements_with_prefix(&format!("decoder.stage{stage}.")));
        }
    }
}
