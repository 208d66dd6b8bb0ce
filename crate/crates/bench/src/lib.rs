//! Benchmark-only crate; see `benches/`. Shared fixtures live here.

use smpc_core::design::ProblemConfig;

pub const REGION: &str = include_str!("../../../configs/region.json");
pub const FLAGSHIP: &str = include_str!("../../../configs/flagship.json");

pub fn config(text: &str) -> ProblemConfig {
    ProblemConfig::from_json(text).expect("bundled config")
}
