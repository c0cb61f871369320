#![no_main]

use convqa::attention::Heatmap;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(h) = Heatmap::read_csv(data) {
        assert_eq!(h.weights.shape(), &[h.context_tokens.len(), h.question_tokens.len()]);
        let mut buf = Vec::new();
        h.write_csv(&mut buf).unwrap();
        let again = Heatmap::read_csv(buf.as_slice()).unwrap();
        assert_eq!(again.context_tokens, h.context_tokens);
        assert_eq!(again.question_tokens, h.question_tokens);
    }
});
