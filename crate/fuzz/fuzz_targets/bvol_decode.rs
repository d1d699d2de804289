#![no_main]

use bioptx::anatomy::{decode_volume, encode_volume};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(vol) = decode_volume(data) {
        let again = decode_volume(&encode_volume(&vol)).expect("re-encoded volume decodes");
        assert_eq!(again.voxels(), vol.voxels());
    }
});
