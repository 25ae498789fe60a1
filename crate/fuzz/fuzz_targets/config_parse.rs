#![no_main]

use hyperdiv::experiments::ExperimentConfig;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    // the last line doubles as a `--set` override
    let (body, last) = text.rsplit_once('\n').unwrap_or(("", text));
    for overrides in [vec![], vec![last.to_string()]] {
        if let Ok(cfg) = ExperimentConfig::parse(body, &overrides) {
            let _ = cfg.validate();
            ExperimentConfig::parse(&cfg.to_toml(), &[]).expect("serialized config parses");
        }
    }
});
