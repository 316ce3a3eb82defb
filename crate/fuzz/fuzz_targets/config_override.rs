#![no_main]

use gaze_cli::config::RunConfig;
use libfuzzer_sys::fuzz_target;

// First line: config file text (empty for none). Remaining lines: `key=value` overrides.
fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    let mut lines = text.split('\n');
    let file = lines.next().filter(|l| !l.is_empty());
    let set: Vec<String> = lines.map(str::to_string).collect();
    if let Ok(cfg) = RunConfig::from_layers(file, &set) {
        let echoed = serde_json::to_string(&cfg).unwrap();
        assert_eq!(RunConfig::from_layers(Some(&echoed), &[]).unwrap(), cfg);
    }
});
