#![no_main]

use libfuzzer_sys::fuzz_target;
use metaseg_core::image::GrayImage;

fuzz_target!(|data: &[u8]| {
    if let Ok(img) = GrayImage::decode_pgm(data) {
        assert_eq!(img.pixels.len(), img.width * img.height);
        assert_eq!(GrayImage::decode_pgm(&img.encode_pgm()).unwrap(), img);
    }
});
