#![no_main]

use bioptx::policy::decode_checkpoint;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok((params, header)) = decode_checkpoint(data) {
        assert_eq!(params.len(), header.param_count);
    }
});
