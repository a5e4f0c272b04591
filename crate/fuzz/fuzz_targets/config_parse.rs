#![no_main]

use libfuzzer_sys::fuzz_target;
use metaseg_core::ModelConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(cfg) = ModelConfig::parse(text) {
        let back = ModelConfig::parse(&cfg.render()).expect("rendered config must parse");
        assert_eq!(back, cfg);
    }
});
