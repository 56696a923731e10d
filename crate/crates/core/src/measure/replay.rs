use std::collections::HashMap;
use std::io::{self, BufRead, BufReader, Read, Write};
use std::net::IpAddr;

use super::{BackendError, InventoryError, MeasurementBackend, MeasurementResult, Origin, Probe, Vantage};

/// One line of a recorded-results file: `ip,origin_id,rtt_ms|timeout,timestamp`.
#[derive(Debug, Clone, PartialEq)]
pub struct RecordedResult {
    pub ip: IpAddr,
    pub origin_id: String,
    pub rtt_ms: Option<f64>,
    pub timestamp: i64,
}

pub fn read_recorded_results<R: Read>(r: R) -> Result<Vec<RecordedResult>, InventoryError> {
    let mut out = Vec::new();
    for (i, line) in BufReader::new(r).lines().enumerate() {
        let line = line?;
        let t = line.trim();
        if t.is_empty() || t.starts_with('#') || t.starts_with("ip,") {
            continue;
        }
        let bad = |m: String| InventoryError::Line { line: i + 1, message: m };
        let f: Vec<&str> = t.split(',').map(str::trim).collect();
        if f.len() != 4 {
            return Err(bad("expected ip,origin_id,rtt_ms,timestamp".into()));
        }
        let ip = f[0].parse().map_err(|_| bad(format!("bad address {:?}", f[0])))?;
        let rtt_ms = if f[2].eq_ignore_ascii_case("timeout") {
            None
        } else {
            let v: f64 = f[2].parse().map_err(|_| bad(format!("bad rtt {:?}", f[2])))?;
            if !v.is_finite() || v < 0.0 {
                return Err(bad(format!("bad rtt {:?}", f[2])));
            }
            Some(v)
        };
        let timestamp = f[3].parse().map_err(|_| bad(format!("bad timestamp {:?}", f[3])))?;
        out.push(RecordedResult {
            ip,
            origin_id: f[1].to_string(),
            rtt_ms,
            timestamp,
        });
    }
    Ok(out)
}

pub fn write_recorded_results<W: Write>(mut w: W, results: &[MeasurementResult]) -> io::Result<()> {
    writeln!(w, "ip,origin_id,rtt_ms,timestamp")?;
    for r in results {
        match r.rtt_ms {
            Some(v) => writeln!(w, "{},{},{},{}", r.target, r.origin.id, v, r.timestamp)?,
            None => writeln!(w, "{},{},timeout,{}", r.target, r.origin.id, r.timestamp)?,
        }
    }
    w.flush()
}

/// Answers pings from previously recorded results. Several records for the
/// same pair collapse to their minimum RTT; a pair never recorded reads as
/// a timeout.
#[derive(Debug, Clone)]
pub struct ReplayBackend {
    origins: HashMap<String, Origin>,
    records: HashMap<(IpAddr, String), (Option<f64>, i64)>,
}

impl ReplayBackend {
    pub fn new(records: Vec<RecordedResult>, probes: &[Probe], vantages: &[Vantage]) -> Self {
        let mut origins = HashMap::new();
        for p in probes {
            origins.insert(p.probe_id.clone(), Origin::from(p));
        }
        for v in vantages {
            origins.insert(v.name.clone(), Origin::from(v));
        }
        let mut merged: HashMap<(IpAddr, String), (Option<f64>, i64)> = HashMap::new();
        for r in records {
            let slot = merged.entry((r.ip, r.origin_id)).or_insert((None, r.timestamp));
            match (slot.0, r.rtt_ms) {
                (None, Some(v)) => *slot = (Some(v), r.timestamp),
                (Some(old), Some(v)) if v < old => *slot = (Some(v), r.timestamp),
                (None, None) => slot.1 = slot.1.max(r.timestamp),
                _ => {}
            }
        }
        ReplayBackend { origins, records: merged }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

impl MeasurementBackend for ReplayBackend {
    fn ping(&self, origin: &Origin, target: IpAddr, _packets: u32) -> Result<MeasurementResult, BackendError> {
        let known = self
            .origins
            .get(&origin.id)
            .ok_or_else(|| BackendError::UnknownOrigin(origin.id.clone()))?;
        let (rtt_ms, timestamp) = self
            .records
            .get(&(target, origin.id.clone()))
            .copied()
            .unwrap_or((None, 0));
        Ok(MeasurementResult {
            target,
            origin: known.clone(),
            rtt_ms,
            timestamp,
        })
    }
}
