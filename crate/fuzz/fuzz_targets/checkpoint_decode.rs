#![no_main]

use libfuzzer_sys::fuzz_target;
use metaseg_core::checkpoint;

fuzz_target!(|data: &[u8]| {
    if let Ok(store) = checkpoint::decode(data) {
        // encoding is canonical: one re-encode reaches a fixed point
        let bytes = checkpoint::encode(&store).unwrap();
        let again = checkpoint::decode(&bytes).expect("encoded checkpoint must decode");
        assert_eq!(checkpoint::encode(&again).unwrap(), bytes);
    }
});
