#![no_main]

use convqa::text::{parse_cache, write_cache};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(examples) = parse_cache(text, "fuzz") {
        let mut buf = Vec::new();
        write_cache(&mut buf, &examples).unwrap();
        let again = parse_cache(std::str::from_utf8(&buf).unwrap(), "again").unwrap();
        assert_eq!(again, examples);
    }
});
