#![no_main]

use std::sync::{Arc, OnceLock};

use bioptx::anatomy::LabelVolume;
use bioptx::env::EnvConfig;
use bioptx::harness::{BridgeSession, CaseStore};
use libfuzzer_sys::fuzz_target;

fn cases() -> Arc<CaseStore> {
    static CASES: OnceLock<Arc<CaseStore>> = OnceLock::new();
    CASES
        .get_or_init(|| {
            let mut vox = vec![0u8; 17 * 17 * 17];
            for (k, v) in vox.iter_mut().enumerate() {
                *v = if k % 7 == 0 { 2 } else { 1 };
            }
            let vol = LabelVolume::from_raw([17, 17, 17], [4.0; 3], [-32.0, 0.0, 0.0], vox).unwrap();
            Arc::new(CaseStore::from_volumes(vec![("c".to_string(), vol)]))
        })
        .clone()
}

// Each input line is one request; the session carries state across lines.
fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let mut session = BridgeSession::new(cases(), EnvConfig::default());
    for line in text.lines().take(64) {
        let (reply, closed) = session.handle_line(line);
        assert_eq!(reply.ok, reply.error.is_none());
        if closed {
            break;
        }
    }
});
