#![no_main]

use std::sync::OnceLock;

use dse_core::design_space::DesignSpace;
use libfuzzer_sys::fuzz_target;

fn space() -> &'static DesignSpace {
    static SPACE: OnceLock<DesignSpace> = OnceLock::new();
    SPACE.get_or_init(DesignSpace::builtin)
}

fuzz_target!(|data: &[u8]| {
    let values: Vec<f64> = data
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("eight bytes")))
        .collect();
    let _ = space().decode_flat(&values);
});
