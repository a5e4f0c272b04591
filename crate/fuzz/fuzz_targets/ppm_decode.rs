#![no_main]

use libfuzzer_sys::fuzz_target;
use metaseg_core::image::RgbImage;

fuzz_target!(|data: &[u8]| {
    if let Ok(img) = RgbImage::decode_ppm(data) {
        assert_eq!(img.pixels.len(), img.width * img.height * 3);
        let again = RgbImage::decode_ppm(&img.encode_ppm()).expect("re-encoded image must decode");
        assert_eq!(again, img);
    }
});
