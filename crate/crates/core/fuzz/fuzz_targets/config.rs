#![no_main]

use convqa::model::ModelConfig;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(cfg) = ModelConfig::parse(text, "fuzz") {
        let again = ModelConfig::parse(&cfg.to_config_string(), "again").unwrap();
        assert_eq!(again, cfg);
    }
});
