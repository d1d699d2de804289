#![no_main]

use bioptx::harness::{decode_wire_observation, WireObservation};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(obs) = decode_wire_observation(data) {
        let wire = WireObservation::encode(&obs);
        assert_eq!(wire.decode().expect("re-encoded observation decodes"), obs);
    }
});
