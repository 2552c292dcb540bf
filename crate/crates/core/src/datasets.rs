//! Bundled reference data.

use crate::netmodel::{Network, NetworkError, NetworkFile};

/// The Humber region network: 22 industry types with yearly financials, four
/// auto-capped export markets (fuel, chemicals, electricity, food).
pub const HUMBER_JSON: &str = include_str!("../data/humber.json");

pub fn humber_file() -> NetworkFile {
    NetworkFile::from_json(HUMBER_JSON).expect("bundled humber.json parses")
}

pub fn humber() -> Result<Network, NetworkError> {
    Network::from_file(&humber_file())
}
