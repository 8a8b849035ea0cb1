#![no_main]

use std::sync::OnceLock;

use dse_core::design_space::DesignSpace;
use libfuzzer_sys::fuzz_target;

fn space() -> &'static DesignSpace {
    static SPACE: OnceLock<DesignSpace> = OnceLock::new();
    SPACE.get_or_init(DesignSpace::builtin)
}

fuzz_target!(|data: &[u8]| {
    let _ = dse_core::harness::read_run_records(space(), data);
});
