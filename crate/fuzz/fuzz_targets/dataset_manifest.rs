#![no_main]

use dualglow::data::DatasetManifest;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(m) = DatasetManifest::parse(text) {
        let again = DatasetManifest::parse(&serde_json::to_string(&m).unwrap()).expect("serialized manifest parses");
        assert_eq!(again, m);
    }
});
