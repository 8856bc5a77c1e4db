#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(img) = acol::pngio::decode(data) {
        let bytes = acol::pngio::encode(&img).expect("decoded image re-encodes");
        assert_eq!(acol::pngio::decode(&bytes).expect("round trip"), img);
    }
});
