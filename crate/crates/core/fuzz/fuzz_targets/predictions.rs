#![no_main]

use convqa::span::{parse_extended_predictions, parse_predictions, write_extended_predictions, write_predictions};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(answers) = parse_predictions(text, "fuzz") {
        let mut buf = Vec::new();
        write_predictions(&mut buf, &answers).unwrap();
        assert_eq!(parse_predictions(std::str::from_utf8(&buf).unwrap(), "again").unwrap(), answers);
    }
    if let Ok(preds) = parse_extended_predictions(text, "fuzz") {
        assert!(preds.values().all(|p| (0.0..=1.0).contains(&p.confidence)));
        let mut buf = Vec::new();
        write_extended_predictions(&mut buf, &preds).unwrap();
        let again = parse_extended_predictions(std::str::from_utf8(&buf).unwrap(), "again").unwrap();
        assert_eq!(again, preds);
    }
});
