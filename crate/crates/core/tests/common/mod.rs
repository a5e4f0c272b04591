#![allow(dead_code)]

pub mod oracle;

use std::path::PathBuf;

use metaseg_core::{Init, ModelConfig, Shape, Tensor};

pub fn config_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

pub fn load_config(name: &str) -> ModelConfig {
    let path = config_path(name);
    let text = std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    ModelConfig::parse(&text).unwrap()
}

pub fn random(shape: Shape, seed: u64, bound: f64) -> Tensor {
    Init::new(seed).uniform(shape, bound)
}

pub fn bitwise_eq(a: &Tensor, b: &Tensor) -> bool {
    a.shape() == b.shape() && a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits())
}
