//! Measurement backends and the two measurement steps built on them:
//! the multi-vantage pre-scan and nearest-probe selection for pin-point
//! pings.
//!
//! Three backends implement [`MeasurementBackend`]:
//! [`SimWorld`] computes latencies from known router positions,
//! [`ReplayBackend`] replays a recorded-results file, and
//! [`remote::RemoteBackend`] talks to an HTTP probe-measurement service.

mod replay;
pub mod remote;
mod sim;

use std::collections::BTreeMap;
use std::io::{self, BufRead, BufReader, Read, Write};
use std::net::IpAddr;
use std::sync::atomic::{AtomicI64, Ordering};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geo::{great_circle_km, Coord, GeoError};

pub use replay::{read_recorded_results, write_recorded_results, RecordedResult, ReplayBackend};
pub use sim::{NoiseModel, SimRouter, SimWorld, SimWorldFile};

/// Kilometres light travels in fiber per millisecond, for c = 2/3.
pub const FIBER_KM_PER_MS: f64 = 2.0 / 3.0 * crate::geo::SPEED_OF_LIGHT_KM_PER_S / 1000.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Probe {
    pub probe_id: String,
    pub lat: f64,
    pub lon: f64,
    pub active: bool,
    #[serde(default)]
    pub framework: String,
}

impl Probe {
    pub fn coord(&self) -> Coord {
        Coord::new(self.lat, self.lon).expect("probe coordinates validated on load")
    }
}

/// A high-volume pre-scan origin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vantage {
    pub name: String,
    pub lat: f64,
    pub lon: f64,
}

impl Vantage {
    pub fn new(name: &str, lat: f64, lon: f64) -> Self {
        Vantage {
            name: name.to_string(),
            lat,
            lon,
        }
    }

    /// Dallas, Frankfurt and Singapore.
    pub fn default_set() -> Vec<Vantage> {
        vec![
            Vantage::new("dallas", 32.7767, -96.7970),
            Vantage::new("frankfurt", 50.1109, 8.6821),
            Vantage::new("singapore", 1.3521, 103.8198),
        ]
    }

    pub fn coord(&self) -> Coord {
        Coord::new(self.lat, self.lon).expect("vantage coordinates validated on load")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OriginKind {
    Probe,
    Vantage,
}

/// Where a measurement is sent from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Origin {
    pub id: String,
    pub kind: OriginKind,
    pub lat: f64,
    pub lon: f64,
}

impl Origin {
    pub fn coord(&self) -> Coord {
        Coord::new(self.lat, self.lon).expect("origin coordinates validated on load")
    }
}

impl From<&Probe> for Origin {
    fn from(p: &Probe) -> Self {
        Origin {
            id: p.probe_id.clone(),
            kind: OriginKind::Probe,
            lat: p.lat,
            lon: p.lon,
        }
    }
}

impl From<&Vantage> for Origin {
    fn from(v: &Vantage) -> Self {
        Origin {
            id: v.name.clone(),
            kind: OriginKind::Vantage,
            lat: v.lat,
            lon: v.lon,
        }
    }
}

/// One ping outcome. `rtt_ms` is `None` on timeout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasurementResult {
    pub target: IpAddr,
    pub origin: Origin,
    pub rtt_ms: Option<f64>,
    pub timestamp: i64,
}

impl MeasurementResult {
    pub fn is_timeout(&self) -> bool {
        self.rtt_ms.is_none()
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BackendError {
    #[error("origin {0:?} is not known to the backend")]
    UnknownOrigin(String),
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("measurement quota exhausted")]
    QuotaExceeded,
    #[error("service answered {status}: {message}")]
    Remote { status: u16, message: String },
    #[error("unexpected service response: {0}")]
    Protocol(String),
}

impl BackendError {
    /// Whether repeating the same request right away may succeed.
    pub fn is_retryable(&self) -> bool {
        match self {
            BackendError::Transport(_) => true,
            BackendError::Remote { status, .. } => *status >= 500,
            _ => false,
        }
    }
}

/// A source of latency measurements. Implementations must tolerate
/// concurrent calls.
pub trait MeasurementBackend: Send + Sync {
    /// Sends `packets` echo requests and reports the minimum RTT.
    fn ping(&self, origin: &Origin, target: IpAddr, packets: u32) -> Result<MeasurementResult, BackendError>;
}

impl<B: MeasurementBackend + ?Sized> MeasurementBackend for &B {
    fn ping(&self, origin: &Origin, target: IpAddr, packets: u32) -> Result<MeasurementResult, BackendError> {
        (**self).ping(origin, target, packets)
    }
}

impl<B: MeasurementBackend + ?Sized> MeasurementBackend for Box<B> {
    fn ping(&self, origin: &Origin, target: IpAddr, packets: u32) -> Result<MeasurementResult, BackendError> {
        (**self).ping(origin, target, packets)
    }
}

/// Wraps a backend with a fixed measurement allowance; once spent every
/// call fails with [`BackendError::QuotaExceeded`].
pub struct Budgeted<B> {
    inner: B,
    remaining: AtomicI64,
}

impl<B> Budgeted<B> {
    pub fn new(inner: B, budget: u64) -> Self {
        Budgeted {
            inner,
            remaining: AtomicI64::new(budget.min(i64::MAX as u64) as i64),
        }
    }

    pub fn remaining(&self) -> u64 {
        self.remaining.load(Ordering::SeqCst).max(0) as u64
    }
}

impl<B: MeasurementBackend> MeasurementBackend for Budgeted<B> {
    fn ping(&self, origin: &Origin, target: IpAddr, packets: u32) -> Result<MeasurementResult, BackendError> {
        if self.remaining.fetch_sub(1, Ordering::SeqCst) <= 0 {
            return Err(BackendError::QuotaExceeded);
        }
        self.inner.ping(origin, target, packets)
    }
}

/// Pre-scan measurements of one target from every vantage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrescanRecord {
    pub ip: IpAddr,
    pub results: Vec<MeasurementResult>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub errors: Vec<String>,
    /// Set when a quota or transient failure left some vantage unmeasured.
    #[serde(default)]
    pub incomplete: bool,
}

impl PrescanRecord {
    pub fn responsive(&self) -> bool {
        self.results.iter().any(|r| r.rtt_ms.is_some())
    }
}

/// Measures every target from every vantage. Backend errors are recorded
/// per target and never stop the sweep.
///
/// ```
/// use hloc_core::measure::{prescan, SimWorld, SimWorldFile, Vantage};
/// let world = SimWorld::new(SimWorldFile { seed: 1, noise: Default::default(), epoch: 0, routers: vec![] }, &[], &Vantage::default_set());
/// assert!(prescan(&world, &Vantage::default_set(), &[], 1).is_empty());
/// ```
pub fn prescan<B: MeasurementBackend + ?Sized>(
    backend: &B,
    vantages: &[Vantage],
    targets: &[IpAddr],
    packets: u32,
) -> BTreeMap<IpAddr, PrescanRecord> {
    let origins: Vec<Origin> = vantages.iter().map(Origin::from).collect();
    targets
        .par_iter()
        .map(|&ip| {
            let mut rec = PrescanRecord {
                ip,
                results: Vec::new(),
                errors: Vec::new(),
                incomplete: false,
            };
            for o in &origins {
                match backend.ping(o, ip, packets) {
                    Ok(r) => rec.results.push(r),
                    Err(e) => {
                        rec.incomplete |= e == BackendError::QuotaExceeded || e.is_retryable();
                        rec.errors.push(format!("{}: {e}", o.id));
                    }
                }
            }
            (ip, rec)
        })
        .collect()
}

/// The active probe closest to `hint`, with its distance, provided that
/// distance is strictly below `max_distance_km`. Equidistant probes are
/// broken by probe id.
pub fn nearest_probe(hint: Coord, probes: &[Probe], max_distance_km: f64) -> Option<(&Probe, f64)> {
    probes
        .iter()
        .filter(|p| p.active)
        .map(|p| (p, great_circle_km(p.coord(), hint)))
        .min_by(|a, b| a.1.total_cmp(&b.1).then_with(|| a.0.probe_id.cmp(&b.0.probe_id)))
        .filter(|&(_, d)| d < max_distance_km)
}

#[derive(Debug, Error)]
pub enum InventoryError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("line {line}: {message}")]
    Line { line: usize, message: String },
}

fn parse_bool(s: &str) -> Option<bool> {
    match s.trim().to_ascii_lowercase().as_str() {
        "1" | "true" | "yes" | "active" => Some(true),
        "0" | "false" | "no" | "inactive" => Some(false),
        _ => None,
    }
}

fn coord_fields(line: usize, lat: &str, lon: &str) -> Result<Coord, InventoryError> {
    let bad = |m: String| InventoryError::Line { line, message: m };
    let lat: f64 = lat.trim().parse().map_err(|_| bad(format!("bad latitude {lat:?}")))?;
    let lon: f64 = lon.trim().parse().map_err(|_| bad(format!("bad longitude {lon:?}")))?;
    Coord::new(lat, lon).map_err(|e: GeoError| bad(e.to_string()))
}

/// Reads `probe_id,lat,lon,active` lines; a header line starting with
/// `probe_id` and `#` comments are skipped.
pub fn read_probes<R: Read>(r: R) -> Result<Vec<Probe>, InventoryError> {
    let mut out = Vec::new();
    for (i, line) in BufReader::new(r).lines().enumerate() {
        let line = line?;
        let t = line.trim();
        if t.is_empty() || t.starts_with('#') || t.starts_with("probe_id") {
            continue;
        }
        let f: Vec<&str> = t.split(',').collect();
        if f.len() < 4 {
            return Err(InventoryError::Line {
                line: i + 1,
                message: "expected probe_id,lat,lon,active".into(),
            });
        }
        let c = coord_fields(i + 1, f[1], f[2])?;
        let active = parse_bool(f[3]).ok_or_else(|| InventoryError::Line {
            line: i + 1,
            message: format!("bad active flag {:?}", f[3]),
        })?;
        out.push(Probe {
            probe_id: f[0].trim().to_string(),
            lat: c.lat(),
            lon: c.lon(),
            active,
            framework: f.get(4).map(|s| s.trim().to_string()).unwrap_or_default(),
        });
    }
    Ok(out)
}

pub fn write_probes<W: Write>(mut w: W, probes: &[Probe]) -> io::Result<()> {
    writeln!(w, "probe_id,lat,lon,active")?;
    for p in probes {
        writeln!(w, "{},{},{},{}", p.probe_id, p.lat, p.lon, p.active)?;
    }
    w.flush()
}

/// Reads `name,lat,lon` lines.
pub fn read_vantages<R: Read>(r: R) -> Result<Vec<Vantage>, InventoryError> {
    let mut out = Vec::new();
    for (i, line) in BufReader::new(r).lines().enumerate() {
        let line = line?;
        let t = line.trim();
        if t.is_empty() || t.starts_with('#') || t.starts_with("name,") {
            continue;
        }
        let f: Vec<&str> = t.split(',').collect();
        if f.len() < 3 {
            return Err(InventoryError::Line {
                line: i + 1,
                message: "expected name,lat,lon".into(),
            });
        }
        let c = coord_fields(i + 1, f[1], f[2])?;
        out.push(Vantage::new(f[0].trim(), c.lat(), c.lon()));
    }
    Ok(out)
}
