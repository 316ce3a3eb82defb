#![no_main]

use gaze_core::model::GazeNet;
use gaze_core::params::Checkpoint;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(ckpt) = Checkpoint::from_slice(data) else {
        return;
    };
    let bytes = serde_json::to_vec(&ckpt).unwrap();
    assert_eq!(Checkpoint::from_slice(&bytes).unwrap(), ckpt);
    // metadata may describe a network far too large to build; only small ones are tried
    let scalars: usize = ckpt.params.iter().map(|p| p.values.len()).sum();
    if scalars < 1 << 16 {
        let _ = GazeNet::from_checkpoint(&ckpt);
    }
});
