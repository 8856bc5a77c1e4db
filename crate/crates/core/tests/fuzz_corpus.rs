//! The checked-in fuzz seeds are valid inputs for their decoders.

use std::path::{Path, PathBuf};

fn seeds(target: &str) -> Vec<(PathBuf, Vec<u8>)> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fuzz/corpus").join(target);
    let mut out: Vec<_> = std::fs::read_dir(&dir)
        .unwrap_or_else(|e| panic!("{}: {e}", dir.display()))
        .map(|e| e.unwrap().path())
        .map(|p| {
            let bytes = std::fs::read(&p).unwrap();
            (p, bytes)
        })
        .collect();
    out.sort();
    assert!(!out.is_empty(), "no seeds for {target}");
    out
}

#[test]
fn tensor_file_seeds_decode() {
    for (p, b) in seeds("tensor_file") {
        acol::tensorfile::decode(&b).unwrap_or_else(|e| panic!("{}: {e}", p.display()));
    }
}

#[test]
fn manifest_seeds_parse() {
    for (p, b) in seeds("manifest") {
        acol::synthdata::parse_manifest(&b).unwrap_or_else(|e| panic!("{}: {e}", p.display()));
    }
}

#[test]
fn config_seeds_parse() {
    for (p, b) in seeds("config") {
        acol::config::parse_config(&b).unwrap_or_else(|e| panic!("{}: {e}", p.display()));
    }
}

#[test]
fn sidecar_seeds_parse() {
    for (p, b) in seeds("sidecar") {
        acol::checkpoint::parse_sidecar(&b).unwrap_or_else(|e| panic!("{}: {e}", p.display()));
    }
}

#[test]
fn png_seeds_decode_and_round_trip() {
    for (p, b) in seeds("png") {
        let img = acol::pngio::decode(&b).unwrap_or_else(|e| panic!("{}: {e}", p.display()));
        assert_eq!(acol::pngio::decode(&acol::pngio::encode(&img).unwrap()).unwrap(), img);
    }
}
