#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(map) = acol::config::parse_config(data) {
        let resolved = acol::config::resolve(None, &map).expect("a parsed config resolves");
        let _ = resolved.config.train().validate();
        let _ = resolved.config.synth().validate();
    }
});
