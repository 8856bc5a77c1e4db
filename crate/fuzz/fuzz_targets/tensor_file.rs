#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(tensors) = acol::tensorfile::decode(data) {
        for (_, t) in &tensors {
            let n: usize = t.shape().iter().product();
            assert_eq!(t.to::<f64>().len(), n);
        }
        // Anything that decodes re-encodes to a file that decodes the same way.
        let owned: Vec<(String, acol::Tensor<f64>)> = tensors.iter().map(|(k, t)| (k.clone(), t.to())).collect();
        let refs: Vec<(String, &acol::Tensor<f64>)> = owned.iter().map(|(k, t)| (k.clone(), t)).collect();
        let again = acol::tensorfile::decode(&acol::tensorfile::encode(&refs)).expect("re-encoded file decodes");
        assert_eq!(again.len(), tensors.len());
    }
});
