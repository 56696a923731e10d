//! Geolocation of network nodes from location hints embedded in reverse-DNS
//! names. Hints are found with a prefix tree over location codes and then
//! verified or falsified by latency measurements bounded by the speed of
//! light in fiber.

pub mod codetrie;
pub mod config;
pub mod domainprep;
pub mod evaluate;
pub mod geo;
pub mod geodata;
pub mod hintsearch;
pub mod measure;
pub mod pipeline;
pub mod simulate;
pub mod verdict;

pub use config::CampaignConfig;
pub use geo::Coord;
pub use pipeline::{Pipeline, PipelineError};
pub use verdict::{DomainVerdict, ValidationConfig, VerdictCategory};
