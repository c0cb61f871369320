#![no_main]

use convqa::text::parse_squad;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok((examples, stats)) = parse_squad(text, "fuzz") {
        assert!(examples.len() <= stats.questions);
        for ex in &examples {
            if let Some(g) = ex.gold {
                assert!(g.start <= g.end && g.end < ex.context_tokens.len());
            }
        }
    }
});
