#![no_main]
use libfuzzer_sys::fuzz_target;
use patchfm::train::{decode_checkpoint, encode_checkpoint, Dtype};

fuzz_target!(|data: &[u8]| {
    let Ok(ck) = decode_checkpoint(data) else { return };
    let back = decode_checkpoint(&encode_checkpoint(&ck, Dtype::F64)).expect("re-decode");
    assert_eq!(ck.step, back.step);
    assert_eq!(ck.model, back.model);
});
