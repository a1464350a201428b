#![no_main]

use dualglow::dgt;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(t) = dgt::decode::<f32>(data) {
        assert_eq!(dgt::encode(&t), data);
        let wide = dgt::decode::<f64>(data).expect("f32 decode succeeded");
        assert_eq!(wide.shape(), t.shape());
    }
});
