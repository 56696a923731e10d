//! Shared inputs for the benchmarks.

use hloc_core::domainprep::{DomainRecord, Preprocessor};
use hloc_core::geodata::{GeoConfig, Location};
use hloc_core::pipeline::{build_locations, preprocess_corpus};
use hloc_core::simulate::{Scenario, ScenarioParams};

pub struct Corpus {
    pub locations: Vec<Location>,
    pub records: Vec<DomainRecord>,
}

/// Locations and preprocessed domains of a synthetic scenario.
pub fn corpus(seed: u64, routers: usize) -> Corpus {
    let scenario = Scenario::generate(ScenarioParams {
        routers,
        ..ScenarioParams::desk(seed)
    });
    let (locations, _) = build_locations(&scenario.raw_codes(), &GeoConfig::default());
    let (records, _) = preprocess_corpus(&Preprocessor::bundled(), &scenario.corpus());
    Corpus { locations, records }
}
