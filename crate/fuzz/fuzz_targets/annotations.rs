#![no_main]

use gaze_core::data::annotation::{parse_annotations, write_annotations};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(records) = parse_annotations(data, "fuzz") else {
        return;
    };
    for r in &records {
        assert!(r.validate().is_ok());
    }
    let mut buf = Vec::new();
    write_annotations(&mut buf, &records).unwrap();
    assert_eq!(parse_annotations(buf.as_slice(), "fuzz").unwrap(), records);
});
