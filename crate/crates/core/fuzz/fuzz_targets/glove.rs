#![no_main]

use convqa::text::Vocab;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Some((&dim, rest)) = data.split_first() else { return };
    let dim = usize::from(dim % 8);
    if let Ok(v) = Vocab::parse_glove(rest, dim, "fuzz", None) {
        assert_eq!(v.embeddings().shape(), &[v.len(), dim]);
        assert!(v.embeddings().data().iter().all(|x| x.is_finite()));
    }
});
