#![no_main]

use bioptx::harness::parse_line;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(line) = parse_line(text) {
        let again = parse_line(&line.to_line()).expect("serialized line parses");
        assert_eq!(again, line);
    }
});
