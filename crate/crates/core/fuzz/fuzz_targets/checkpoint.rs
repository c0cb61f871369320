#![no_main]

use convqa::tensor::{read_checkpoint, write_checkpoint};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(ckpt) = read_checkpoint(data) {
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &ckpt).unwrap();
        let again = read_checkpoint(&buf).unwrap();
        assert_eq!(again.metadata, ckpt.metadata);
        assert_eq!(again.tensors.len(), ckpt.tensors.len());
    }
});
