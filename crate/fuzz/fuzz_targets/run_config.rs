#![no_main]

use libfuzzer_sys::fuzz_target;
use tabforge::config::RunConfig;

fuzz_target!(|data: &str| {
    if let Ok(cfg) = RunConfig::from_toml_str(data) {
        let _ = cfg.validate();
        if let Ok(text) = cfg.to_toml_string() {
            let again = RunConfig::from_toml_str(&text).expect("serialized config parses");
            assert_eq!(again, cfg);
        }
    }
});
