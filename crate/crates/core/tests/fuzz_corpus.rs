//! Replays the checked-in fuzz seeds, plus every truncation and a byte flip
//! at every position, through the properties the fuzz targets assert. Runs
//! on stable without libFuzzer.

use std::path::PathBuf;

use metaseg_core::checkpoint;
use metaseg_core::image::{GrayImage, RgbImage};
use metaseg_core::ModelConfig;

fn seeds(target: &str) -> Vec<Vec<u8>> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fuzz/corpus").join(target);
    let mut out: Vec<Vec<u8>> = std::fs::read_dir(&dir)
        .unwrap_or_else(|e| panic!("{}: {e}", dir.display()))
        .map(|e| std::fs::read(e.unwrap().path()).unwrap())
        .collect();
    assert!(!out.is_empty(), "no seeds for {target}");
    out.sort();
    out
}

/// Every position of small seeds; large seeds are covered densely in the
/// first 512 bytes (all headers) and sparsely after.
fn positions(len: usize) -> impl Iterator<Item = usize> {
    let step = (len / 512).max(1);
    (0..len).filter(move |&i| i < 512 || i % step == 0)
}

fn variants(seed: &[u8]) -> impl Iterator<Item = Vec<u8>> + '_ {
    let cuts = positions(seed.len() + 1).map(|n| seed[..n].to_vec());
    let flips = positions(seed.len()).flat_map(move |i| {
        [0xffu8, 0x01, b'9'].into_iter().map(move |m| {
            let mut v = seed.to_vec();
            v[i] ^= m;
            v
        })
    });
    cuts.chain(flips)
}

#[test]
fn ppm_seeds() {
    for seed in seeds("ppm_decode") {
        for data in variants(&seed) {
            if let Ok(img) = RgbImage::decode_ppm(&data) {
                assert_eq!(img.pixels.len(), img.width * img.height * 3);
                assert_eq!(RgbImage::decode_ppm(&img.encode_ppm()).unwrap(), img);
            }
        }
    }
}

#[test]
fn pgm_seeds() {
    for seed in seeds("pgm_decode") {
        for data in variants(&seed) {
            if let Ok(img) = GrayImage::decode_pgm(&data) {
                assert_eq!(GrayImage::decode_pgm(&img.encode_pgm()).unwrap(), img);
            }
        }
    }
}

#[test]
fn config_seeds() {
    for seed in seeds("config_parse") {
        for data in variants(&seed) {
            let Ok(text) = std::str::from_utf8(&data) else { continue };
            if let Ok(cfg) = ModelConfig::parse(text) {
                assert_eq!(ModelConfig::parse(&cfg.render()).unwrap(), cfg);
            }
        }
    }
}

#[test]
fn checkpoint_seeds() {
    for seed in seeds("checkpoint_decode") {
        assert!(checkpoint::decode(&seed).is_ok());
        for data in variants(&seed) {
            if let Ok(store) = checkpoint::decode(&data) {
                let bytes = checkpoint::encode(&store).unwrap();
                let again = checkpoint::decode(&bytes).unwrap();
                assert_eq!(checkpoint::encode(&again).unwrap(), bytes);
            }
        }
    }
}
