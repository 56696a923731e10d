//! Hint validation: speed-of-light exclusion, the latency verification
//! test, and the per-domain state machine that assigns final categories.

use std::net::IpAddr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geo::{great_circle_km, Coord, SPEED_OF_LIGHT_KM_PER_S};
use crate::geodata::LocationId;
use crate::hintsearch::{DomainHints, HintStatus, LocationHint};
use crate::measure::{nearest_probe, BackendError, MeasurementBackend, MeasurementResult, Origin, PrescanRecord, Probe};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ValidationConfig {
    /// Maximum probe-to-hint distance.
    pub x_km: f64,
    /// Latency buffer.
    pub a_ms: f64,
    /// Fraction of the vacuum speed of light reached in fiber.
    pub c: f64,
    pub c0_km_per_s: f64,
    /// RTTs below this are treated as measurement artifacts.
    pub rtt_floor_ms: f64,
}

impl Default for ValidationConfig {
    fn default() -> Self {
        ValidationConfig {
            x_km: 1000.0,
            a_ms: 9.0,
            c: 2.0 / 3.0,
            c0_km_per_s: SPEED_OF_LIGHT_KM_PER_S,
            rtt_floor_ms: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
#[error("invalid validation config: {0}")]
pub struct ConfigError(pub String);

impl ValidationConfig {
    /// Distance light covers in fiber per millisecond.
    pub fn km_per_ms(&self) -> f64 {
        self.c * self.c0_km_per_s / 1000.0
    }

    /// The buffer expressed as a one-way distance.
    pub fn a_km(&self) -> f64 {
        self.a_ms * self.km_per_ms() / 2.0
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let positive = [
            ("x_km", self.x_km),
            ("c", self.c),
            ("c0_km_per_s", self.c0_km_per_s),
            ("rtt_floor_ms", self.rtt_floor_ms),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(ConfigError(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.a_ms.is_finite() && self.a_ms >= 0.0) {
            return Err(ConfigError(format!("a_ms must be non-negative, got {}", self.a_ms)));
        }
        if self.c > 1.0 {
            return Err(ConfigError(format!("c must not exceed 1, got {}", self.c)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Error)]
#[error("rtt {rtt_ms} ms is below the credible floor")]
pub struct SuspectRtt {
    pub rtt_ms: f64,
}

/// Farthest the target can be from the measuring origin given `rtt_ms`.
pub fn exclusion_radius_km(rtt_ms: f64, cfg: &ValidationConfig) -> Result<f64, SuspectRtt> {
    if rtt_ms.is_nan() || rtt_ms < cfg.rtt_floor_ms {
        return Err(SuspectRtt { rtt_ms });
    }
    Ok(rtt_ms / 2.0 * cfg.km_per_ms())
}

/// Error radius of a verification made from `d_probe_hint_km` away.
pub fn max_error_km(d_probe_hint_km: f64, cfg: &ValidationConfig) -> f64 {
    2.0 * d_probe_hint_km + cfg.a_km()
}

/// RTT below which a probe `d_probe_hint_km` from the hint verifies it.
pub fn verification_threshold_ms(d_probe_hint_km: f64, cfg: &ValidationConfig) -> f64 {
    cfg.a_ms + 2.0 * d_probe_hint_km / cfg.km_per_ms()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Inconclusive {
    LatencyTooHigh { excess_ms: f64 },
    Timeout,
    Suspect,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum PinpointOutcome {
    Verified { buffer_used_ms: f64 },
    Falsified,
    Inconclusive(Inconclusive),
}

/// Judges one pin-point measurement of a hint. Verification wins over
/// self-exclusion; the latter can only fire with a negative buffer.
/// Positive RTTs below the floor may still verify but never exclude.
pub fn verify_hint(hint: Coord, probe: Coord, rtt_ms: Option<f64>, cfg: &ValidationConfig) -> PinpointOutcome {
    let Some(rtt) = rtt_ms else {
        return PinpointOutcome::Inconclusive(Inconclusive::Timeout);
    };
    if !(rtt.is_finite() && rtt > 0.0) {
        return PinpointOutcome::Inconclusive(Inconclusive::Suspect);
    }
    let d = great_circle_km(probe, hint);
    let threshold = verification_threshold_ms(d, cfg);
    if rtt < threshold {
        return PinpointOutcome::Verified {
            buffer_used_ms: rtt - 2.0 * d / cfg.km_per_ms(),
        };
    }
    match exclusion_radius_km(rtt, cfg) {
        Ok(radius) if d > radius => PinpointOutcome::Falsified,
        Ok(_) => PinpointOutcome::Inconclusive(Inconclusive::LatencyTooHigh {
            excess_ms: rtt - threshold,
        }),
        Err(_) => PinpointOutcome::Inconclusive(Inconclusive::Suspect),
    }
}

/// Whether a measurement from `origin` with `rtt_ms` rules out `point`.
/// Timeouts and suspect RTTs exclude nothing.
pub fn excludes(origin: Coord, rtt_ms: Option<f64>, point: Coord, cfg: &ValidationConfig) -> bool {
    match rtt_ms.map(|r| exclusion_radius_km(r, cfg)) {
        Some(Ok(radius)) => great_circle_km(origin, point) > radius,
        _ => false,
    }
}

/// Marks every pending hint lying strictly outside some vantage's
/// exclusion disc as FALSIFIED. No buffer is applied. Returns, per
/// result, how many hints that result falsified first.
pub fn falsify_by_prescan(hints: &mut [LocationHint], results: &[MeasurementResult], cfg: &ValidationConfig) -> Vec<usize> {
    let mut counts = vec![0; results.len()];
    for h in hints.iter_mut().filter(|h| h.is_pending()) {
        let hc = h.coord();
        if let Some(i) = results
            .iter()
            .position(|r| excludes(r.origin.coord(), r.rtt_ms, hc, cfg))
        {
            h.set_status(HintStatus::Falsified).expect("hint is pending");
            counts[i] += 1;
        }
    }
    counts
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum VerdictCategory {
    Verified,
    AllFalsified,
    NoVerifiedHint,
    Unresponsive,
    Filtered,
}

impl VerdictCategory {
    pub const ALL: [VerdictCategory; 5] = [
        VerdictCategory::Verified,
        VerdictCategory::AllFalsified,
        VerdictCategory::NoVerifiedHint,
        VerdictCategory::Unresponsive,
        VerdictCategory::Filtered,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            VerdictCategory::Verified => "VERIFIED",
            VerdictCategory::AllFalsified => "ALL_FALSIFIED",
            VerdictCategory::NoVerifiedHint => "NO_VERIFIED_HINT",
            VerdictCategory::Unresponsive => "UNRESPONSIVE",
            VerdictCategory::Filtered => "FILTERED",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvidenceStage {
    Prescan,
    Pinpoint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "result", rename_all = "snake_case")]
pub enum EvidenceOutcome {
    /// A pre-scan measurement and the number of hints it falsified.
    Prescan { falsified: usize },
    Pinpoint(PinpointOutcome),
    Error { message: String },
}

/// One measurement consulted while validating a domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evidence {
    pub stage: EvidenceStage,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hint: Option<LocationId>,
    pub origin: Origin,
    pub rtt_ms: Option<f64>,
    pub timestamp: i64,
    pub outcome: EvidenceOutcome,
}

impl Evidence {
    /// Whether this measurement rules out `point`.
    pub fn excludes(&self, point: Coord, cfg: &ValidationConfig) -> bool {
        !matches!(self.outcome, EvidenceOutcome::Error { .. }) && excludes(self.origin.coord(), self.rtt_ms, point, cfg)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tallies {
    pub falsified: usize,
    pub no_probe: usize,
    pub latency_too_high: usize,
    pub pending: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifiedDetail {
    pub location_id: LocationId,
    pub location_name: String,
    pub lat: f64,
    pub lon: f64,
    pub code: String,
    pub probe_id: String,
    pub probe_distance_km: f64,
    pub rtt_ms: f64,
    pub buffer_used_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainVerdict {
    pub ip: IpAddr,
    pub fqdn: String,
    pub category: VerdictCategory,
    pub verified: Option<VerifiedDetail>,
    pub max_error_km: Option<f64>,
    pub tallies: Tallies,
    /// Pin-point measurements spent on this domain.
    pub measurements: usize,
    pub hints: Vec<LocationHint>,
    pub evidence: Vec<Evidence>,
}

/// Resumable per-domain validation state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainState {
    pub ip: IpAddr,
    pub fqdn: String,
    pub hints: Vec<LocationHint>,
    pub evidence: Vec<Evidence>,
    pub measurements: usize,
    pub prescan_applied: bool,
}

impl DomainState {
    pub fn new(ip: IpAddr, fqdn: String, hints: Vec<LocationHint>) -> Self {
        DomainState {
            ip,
            fqdn,
            hints,
            evidence: Vec::new(),
            measurements: 0,
            prescan_applied: false,
        }
    }
}

impl From<&DomainHints> for DomainState {
    fn from(d: &DomainHints) -> Self {
        DomainState::new(d.ip, d.fqdn.clone(), d.hints.clone())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ValidationStep {
    Done(Box<DomainVerdict>),
    /// The backend ran out of quota or kept failing; the state resumes later.
    Parked(Box<DomainState>, BackendError),
}

/// Validates domains against one backend and probe inventory.
pub struct Validator<'a, B: ?Sized> {
    pub backend: &'a B,
    pub probes: &'a [Probe],
    pub cfg: &'a ValidationConfig,
    pub packets: u32,
}

impl<B: MeasurementBackend + ?Sized> Validator<'_, B> {
    /// Runs (or resumes) the state machine: pre-scan exclusion first, then
    /// one pin-point ping per pending hint in order, stopping at the first
    /// verification.
    pub fn run(&self, mut st: DomainState, prescan: Option<&PrescanRecord>) -> ValidationStep {
        if st.hints.is_empty() {
            return ValidationStep::Done(Box::new(finish(st, VerdictCategory::Filtered, None, self.cfg)));
        }
        if !st.prescan_applied {
            if let Some(rec) = prescan {
                let counts = falsify_by_prescan(&mut st.hints, &rec.results, self.cfg);
                st.evidence.extend(rec.results.iter().zip(counts).map(|(r, n)| Evidence {
                    stage: EvidenceStage::Prescan,
                    hint: None,
                    origin: r.origin.clone(),
                    rtt_ms: r.rtt_ms,
                    timestamp: r.timestamp,
                    outcome: EvidenceOutcome::Prescan { falsified: n },
                }));
            }
            st.prescan_applied = true;
        }
        let prescanned: Vec<&Evidence> = st
            .evidence
            .iter()
            .filter(|e| e.stage == EvidenceStage::Prescan)
            .collect();
        if !prescanned.is_empty() && prescanned.iter().all(|e| e.rtt_ms.is_none()) {
            return ValidationStep::Done(Box::new(finish(st, VerdictCategory::Unresponsive, None, self.cfg)));
        }

        for i in 0..st.hints.len() {
            if !st.hints[i].is_pending() {
                continue;
            }
            let hint_coord = st.hints[i].coord();
            let Some((probe, d)) = nearest_probe(hint_coord, self.probes, self.cfg.x_km) else {
                st.hints[i]
                    .set_status(HintStatus::UnverifiableNoProbe)
                    .expect("hint is pending");
                continue;
            };
            let origin = Origin::from(probe);
            let result = match self.backend.ping(&origin, st.ip, self.packets) {
                Ok(r) => r,
                Err(e @ (BackendError::QuotaExceeded | BackendError::Transport(_))) => {
                    return ValidationStep::Parked(Box::new(st), e);
                }
                Err(e) if e.is_retryable() => return ValidationStep::Parked(Box::new(st), e),
                Err(e) => {
                    tracing::warn!(ip = %st.ip, probe = %probe.probe_id, error = %e, "pin-point ping failed");
                    st.evidence.push(Evidence {
                        stage: EvidenceStage::Pinpoint,
                        hint: Some(st.hints[i].location_id),
                        origin,
                        rtt_ms: None,
                        timestamp: 0,
                        outcome: EvidenceOutcome::Error { message: e.to_string() },
                    });
                    st.hints[i]
                        .set_status(HintStatus::UnverifiableNoProbe)
                        .expect("hint is pending");
                    continue;
                }
            };
            st.measurements += 1;
            let outcome = verify_hint(hint_coord, probe.coord(), result.rtt_ms, self.cfg);
            st.evidence.push(Evidence {
                stage: EvidenceStage::Pinpoint,
                hint: Some(st.hints[i].location_id),
                origin: result.origin.clone(),
                rtt_ms: result.rtt_ms,
                timestamp: result.timestamp,
                outcome: EvidenceOutcome::Pinpoint(outcome),
            });
            let status = match outcome {
                PinpointOutcome::Verified { .. } => HintStatus::Verified,
                PinpointOutcome::Falsified => HintStatus::Falsified,
                PinpointOutcome::Inconclusive(_) => HintStatus::UnverifiableLatency,
            };
            st.hints[i].set_status(status).expect("hint is pending");
            if let PinpointOutcome::Verified { buffer_used_ms } = outcome {
                let h = &st.hints[i];
                let detail = VerifiedDetail {
                    location_id: h.location_id,
                    location_name: h.location_name.clone(),
                    lat: h.lat,
                    lon: h.lon,
                    code: h.code.clone(),
                    probe_id: probe.probe_id.clone(),
                    probe_distance_km: d,
                    rtt_ms: result.rtt_ms.expect("verified implies a reply"),
                    buffer_used_ms,
                };
                return ValidationStep::Done(Box::new(finish(st, VerdictCategory::Verified, Some(detail), self.cfg)));
            }
        }
        let category = if st.hints.iter().all(|h| h.status == HintStatus::Falsified) {
            VerdictCategory::AllFalsified
        } else {
            VerdictCategory::NoVerifiedHint
        };
        ValidationStep::Done(Box::new(finish(st, category, None, self.cfg)))
    }
}

fn finish(st: DomainState, category: VerdictCategory, verified: Option<VerifiedDetail>, cfg: &ValidationConfig) -> DomainVerdict {
    let mut tallies = Tallies::default();
    for h in &st.hints {
        match h.status {
            HintStatus::Falsified => tallies.falsified += 1,
            HintStatus::UnverifiableNoProbe => tallies.no_probe += 1,
            HintStatus::UnverifiableLatency => tallies.latency_too_high += 1,
            HintStatus::Pending => tallies.pending += 1,
            HintStatus::Verified => {}
        }
    }
    DomainVerdict {
        ip: st.ip,
        fqdn: st.fqdn,
        category,
        max_error_km: verified.as_ref().map(|v| max_error_km(v.probe_distance_km, cfg)),
        verified,
        tallies,
        measurements: st.measurements,
        hints: st.hints,
        evidence: st.evidence,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CdfPoint {
    pub value: f64,
    pub fraction: f64,
}

/// Empirical CDF: one point per distinct value with the fraction of
/// samples at or below it.
pub fn empirical_cdf(values: &[f64]) -> Vec<CdfPoint> {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    let mut out: Vec<CdfPoint> = Vec::new();
    for (i, &x) in v.iter().enumerate() {
        let point = CdfPoint {
            value: x,
            fraction: (i + 1) as f64 / n,
        };
        match out.last_mut() {
            Some(last) if last.value == x => *last = point,
            _ => out.push(point),
        }
    }
    out
}

/// Counts of `values` in `bins` equal-width bins over `[lo, hi)`; values
/// outside the range are ignored.
pub fn histogram(values: &[f64], lo: f64, hi: f64, bins: usize) -> Vec<usize> {
    let mut out = vec![0; bins];
    if bins == 0 || lo.is_nan() || hi.is_nan() || hi <= lo {
        return out;
    }
    let width = (hi - lo) / bins as f64;
    for &v in values {
        if v >= lo && v < hi {
            let b = (((v - lo) / width) as usize).min(bins - 1);
            out[b] += 1;
        }
    }
    out
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SensitivityReport {
    pub verified: usize,
    pub not_verified: usize,
    pub probe_distance_km: Vec<CdfPoint>,
    pub buffer_used_ms: Vec<CdfPoint>,
    pub max_error_km: Vec<CdfPoint>,
    /// Per pin-point measurement that missed the threshold.
    pub excessive_latency_ms: Vec<CdfPoint>,
}

pub fn buffer_used_values(verdicts: &[DomainVerdict]) -> Vec<f64> {
    verdicts
        .iter()
        .filter_map(|v| v.verified.as_ref().map(|d| d.buffer_used_ms))
        .collect()
}

pub fn sensitivity_report(verdicts: &[DomainVerdict]) -> SensitivityReport {
    let verified: Vec<&DomainVerdict> = verdicts.iter().filter(|v| v.verified.is_some()).collect();
    let distances: Vec<f64> = verified
        .iter()
        .map(|v| v.verified.as_ref().map_or(0.0, |d| d.probe_distance_km))
        .collect();
    let errors: Vec<f64> = verified.iter().filter_map(|v| v.max_error_km).collect();
    let excess: Vec<f64> = verdicts
        .iter()
        .filter(|v| v.verified.is_none())
        .flat_map(|v| v.evidence.iter())
        .filter_map(|e| match e.outcome {
            EvidenceOutcome::Pinpoint(PinpointOutcome::Inconclusive(Inconclusive::LatencyTooHigh { excess_ms })) => {
                Some(excess_ms)
            }
            _ => None,
        })
        .collect();
    SensitivityReport {
        verified: verified.len(),
        not_verified: verdicts.len() - verified.len(),
        probe_distance_km: empirical_cdf(&distances),
        buffer_used_ms: empirical_cdf(&buffer_used_values(verdicts)),
        max_error_km: empirical_cdf(&errors),
        excessive_latency_ms: empirical_cdf(&excess),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geodata::CodeSource;
    use crate::measure::{Budgeted, NoiseModel, OriginKind, SimRouter, SimWorld, SimWorldFile, Vantage};
    use proptest::prelude::*;

    fn cfg() -> ValidationConfig {
        ValidationConfig::default()
    }

    fn c(lat: f64, lon: f64) -> Coord {
        Coord::new(lat, lon).unwrap()
    }

    /// A point `km` due north of `from` along the meridian.
    fn north(from: Coord, km: f64) -> Coord {
        c(from.lat() + km / (crate::geo::EARTH_RADIUS_KM.to_radians()), from.lon())
    }

    fn hint(id: u32, at: Coord, code: &str) -> LocationHint {
        LocationHint {
            domain: "r.example.net".into(),
            ip: "192.0.2.1".parse().unwrap(),
            location_id: LocationId(id),
            location_name: format!("loc{id}"),
            lat: at.lat(),
            lon: at.lon(),
            code: code.into(),
            source: CodeSource::Iata,
            label_index: 0,
            char_offset: 0,
            status: HintStatus::Pending,
        }
    }

    fn probe(id: &str, at: Coord) -> Probe {
        Probe {
            probe_id: id.into(),
            lat: at.lat(),
            lon: at.lon(),
            active: true,
            framework: String::new(),
        }
    }

    fn result(origin: &Vantage, rtt: Option<f64>) -> MeasurementResult {
        MeasurementResult {
            target: "192.0.2.1".parse().unwrap(),
            origin: Origin::from(origin),
            rtt_ms: rtt,
            timestamp: 0,
        }
    }

    #[test]
    fn constants() {
        let cfg = cfg();
        assert!((cfg.km_per_ms() - 199.861_638_67).abs() < 1e-6);
        assert!((max_error_km(1000.0, &cfg) - 2899.377).abs() < 0.01);
        assert!((cfg.a_km() - 899.377).abs() < 0.01);
        let zero = ValidationConfig { a_ms: 0.0, ..cfg.clone() };
        assert_eq!(max_error_km(0.0, &zero), 0.0);
        let two = ValidationConfig { a_ms: 2.0, ..cfg };
        assert!((max_error_km(100.0, &two) - 399.86).abs() < 0.01);
    }

    #[test]
    fn exclusion_radius_examples() {
        let cfg = cfg();
        assert!((exclusion_radius_km(10.0, &cfg).unwrap() - 999.308).abs() < 1e-3);
        assert!((exclusion_radius_km(0.1, &cfg).unwrap() - 9.993).abs() < 1e-3);
        assert!(exclusion_radius_km(0.05, &cfg).is_err());
        assert!(exclusion_radius_km(f64::NAN, &cfg).is_err());
        let frankfurt = c(50.1109, 8.6821);
        let new_york = c(40.7128, -74.0060);
        let r = exclusion_radius_km(29.0, &cfg).unwrap();
        assert!((r - 2898.0).abs() < 1.0);
        assert!(great_circle_km(frankfurt, new_york) > r);
        assert!(excludes(frankfurt, Some(29.0), new_york, &cfg));
    }

    #[test]
    fn verify_examples() {
        let cfg = cfg();
        let h = c(29.76, -95.37);
        let p = north(h, 100.0);
        assert!(matches!(verify_hint(h, p, Some(3.5), &cfg), PinpointOutcome::Verified { .. }));
        assert!(matches!(
            verify_hint(h, h, Some(9.0), &cfg),
            PinpointOutcome::Inconclusive(Inconclusive::LatencyTooHigh { .. })
        ));
        assert!(matches!(verify_hint(h, h, Some(8.999), &cfg), PinpointOutcome::Verified { .. }));
        let p10 = north(h, 10.0);
        match verify_hint(h, p10, Some(80.0), &cfg) {
            PinpointOutcome::Inconclusive(Inconclusive::LatencyTooHigh { excess_ms }) => {
                assert!((excess_ms - (80.0 - 9.0 - 20.0 / cfg.km_per_ms())).abs() < 1e-9);
                assert!((excess_ms - 70.9).abs() < 0.01);
            }
            other => panic!("{other:?}"),
        }
        assert_eq!(
            verify_hint(h, p, None, &cfg),
            PinpointOutcome::Inconclusive(Inconclusive::Timeout)
        );
        assert!(matches!(verify_hint(h, h, Some(0.01), &cfg), PinpointOutcome::Verified { .. }));
        let no_buffer = ValidationConfig { a_ms: 0.0, ..cfg.clone() };
        assert_eq!(
            verify_hint(h, h, Some(0.01), &no_buffer),
            PinpointOutcome::Inconclusive(Inconclusive::Suspect)
        );
        for bad in [0.0, -1.0, f64::NAN] {
            assert_eq!(
                verify_hint(h, p, Some(bad), &cfg),
                PinpointOutcome::Inconclusive(Inconclusive::Suspect)
            );
        }
    }

    #[test]
    fn prescan_dallas_fixture() {
        let cfg = cfg();
        let dallas = Vantage::new("dallas", 32.7767, -96.7970);
        let mut hints = vec![
            hint(1, c(29.7604, -95.3698), "hou"),
            hint(2, c(30.2672, -97.7431), "aus"),
            hint(3, c(32.7555, -97.3308), "ftw"),
        ];
        let counts = falsify_by_prescan(&mut hints, &[result(&dallas, Some(2.0))], &cfg);
        assert_eq!(counts, vec![2]);
        let st: Vec<HintStatus> = hints.iter().map(|h| h.status).collect();
        assert_eq!(st, vec![HintStatus::Falsified, HintStatus::Falsified, HintStatus::Pending]);
    }

    #[test]
    fn prescan_boundary_and_timeouts() {
        let cfg = cfg();
        let v = Vantage::new("v", 0.0, 0.0);
        let radius = exclusion_radius_km(10.0, &cfg).unwrap();
        let at_edge = north(v.coord(), radius);
        let d = great_circle_km(v.coord(), at_edge);
        let mut rtt = 2.0 * d / cfg.km_per_ms();
        while exclusion_radius_km(rtt, &cfg).unwrap() < d {
            rtt = f64::from_bits(rtt.to_bits() + 1);
        }
        let mut hints = vec![hint(1, at_edge, "abc")];
        falsify_by_prescan(&mut hints, &[result(&v, Some(rtt))], &cfg);
        assert!(hints[0].is_pending());
        let below = f64::from_bits(rtt.to_bits() - 1);
        if exclusion_radius_km(below, &cfg).unwrap() < d {
            falsify_by_prescan(&mut hints, &[result(&v, Some(below))], &cfg);
            assert_eq!(hints[0].status, HintStatus::Falsified);
        }
        let mut hints = vec![hint(1, c(60.0, 60.0), "abc")];
        falsify_by_prescan(&mut hints, &[result(&v, None), result(&v, Some(0.01))], &cfg);
        assert!(hints[0].is_pending());
    }

    fn world(routers: Vec<(IpAddr, Coord, bool)>, probes: &[Probe], noise: NoiseModel) -> SimWorld {
        SimWorld::new(
            SimWorldFile {
                seed: 11,
                noise,
                epoch: 0,
                routers: routers
                    .into_iter()
                    .map(|(ip, at, responsive)| SimRouter {
                        ip,
                        lat: at.lat(),
                        lon: at.lon(),
                        responsive,
                    })
                    .collect(),
            },
            probes,
            &Vantage::default_set(),
        )
    }

    fn prescan_of<B: MeasurementBackend>(b: &B, ip: IpAddr) -> PrescanRecord {
        crate::measure::prescan(b, &Vantage::default_set(), &[ip], 1).remove(&ip).unwrap()
    }

    fn done(step: ValidationStep) -> DomainVerdict {
        match step {
            ValidationStep::Done(v) => *v,
            ValidationStep::Parked(_, e) => panic!("parked: {e}"),
        }
    }

    const IP: &str = "192.0.2.1";

    #[test]
    fn single_true_hint_verifies() {
        let truth = c(48.1351, 11.5820);
        let probes = vec![probe("p1", north(truth, 5.0)), probe("p2", c(-30.0, 20.0))];
        let ip: IpAddr = IP.parse().unwrap();
        let w = world(vec![(ip, truth, true)], &probes, NoiseModel { min_ms: 0.0, max_ms: 0.0 });
        let cfg = cfg();
        let v = Validator { backend: &w, probes: &probes, cfg: &cfg, packets: 1 };
        let verdict = done(v.run(DomainState::new(ip, "mun.example.net".into(), vec![hint(1, truth, "mun")]), Some(&prescan_of(&w, ip))));
        assert_eq!(verdict.category, VerdictCategory::Verified);
        let d = verdict.verified.as_ref().unwrap();
        assert_eq!(d.probe_id, "p1");
        assert!((verdict.max_error_km.unwrap() - max_error_km(d.probe_distance_km, &cfg)).abs() < 1e-9);
        assert_eq!(verdict.measurements, 1);
        assert_eq!(verdict.evidence.len(), 4);
    }

    #[test]
    fn true_location_third() {
        let truth = c(48.1351, 11.5820);
        let far1 = c(40.7128, -74.0060);
        let far2 = c(-33.8688, 151.2093);
        let probes = vec![probe("a", far1), probe("b", far2), probe("c", truth)];
        let ip: IpAddr = IP.parse().unwrap();
        let w = world(vec![(ip, truth, true)], &probes, NoiseModel { min_ms: 0.0, max_ms: 1.0 });
        let cfg = cfg();
        let v = Validator { backend: &w, probes: &probes, cfg: &cfg, packets: 1 };
        let hints = vec![hint(1, far1, "nyc"), hint(2, far2, "syd"), hint(3, truth, "muc")];
        // without pre-scan the far hints reach pin-point measurement
        let verdict = done(v.run(DomainState::new(ip, "x".into(), hints.clone()), None));
        assert_eq!(verdict.category, VerdictCategory::Verified);
        assert_eq!(verdict.hints[0].status, HintStatus::UnverifiableLatency);
        assert_eq!(verdict.hints[1].status, HintStatus::UnverifiableLatency);
        assert_eq!(verdict.hints[2].status, HintStatus::Verified);
        assert_eq!(verdict.measurements, 3);
        // with pre-scan they are falsified before any ping
        let verdict = done(v.run(DomainState::new(ip, "x".into(), hints), Some(&prescan_of(&w, ip))));
        assert_eq!(verdict.category, VerdictCategory::Verified);
        assert_eq!(verdict.hints[0].status, HintStatus::Falsified);
        assert_eq!(verdict.hints[1].status, HintStatus::Falsified);
        assert_eq!(verdict.measurements, 1);
    }

    #[test]
    fn prescan_only_all_falsified() {
        let truth = c(48.1351, 11.5820);
        let probes = vec![probe("a", c(-33.8688, 151.2093))];
        let ip: IpAddr = IP.parse().unwrap();
        let w = world(vec![(ip, truth, true)], &probes, NoiseModel::default());
        let cfg = cfg();
        let b = Budgeted::new(&w, 0);
        let v = Validator { backend: &b, probes: &probes, cfg: &cfg, packets: 1 };
        let hints = vec![hint(1, c(-33.8688, 151.2093), "syd"), hint(2, c(-37.81, 144.96), "mel")];
        let verdict = done(v.run(DomainState::new(ip, "x".into(), hints), Some(&prescan_of(&w, ip))));
        assert_eq!(verdict.category, VerdictCategory::AllFalsified);
        assert_eq!(verdict.measurements, 0);
        assert_eq!(verdict.tallies.falsified, 2);
    }

    #[test]
    fn unresponsive_filtered_and_no_probe() {
        let truth = c(48.1351, 11.5820);
        let probes = vec![probe("a", truth)];
        let ip: IpAddr = IP.parse().unwrap();
        let w = world(vec![(ip, truth, false)], &probes, NoiseModel::default());
        let cfg = cfg();
        let v = Validator { backend: &w, probes: &probes, cfg: &cfg, packets: 1 };
        let verdict = done(v.run(DomainState::new(ip, "x".into(), vec![hint(1, truth, "muc")]), Some(&prescan_of(&w, ip))));
        assert_eq!(verdict.category, VerdictCategory::Unresponsive);
        assert_eq!(verdict.measurements, 0);

        let verdict = done(v.run(DomainState::new(ip, "x".into(), vec![]), Some(&prescan_of(&w, ip))));
        assert_eq!(verdict.category, VerdictCategory::Filtered);
        assert!(verdict.evidence.is_empty());

        let w = world(vec![(ip, truth, true)], &probes, NoiseModel::default());
        let v = Validator { backend: &w, probes: &probes, cfg: &cfg, packets: 1 };
        let far_hint = hint(2, c(48.0, 30.0), "xyz");
        let verdict = done(v.run(DomainState::new(ip, "x".into(), vec![far_hint]), None));
        assert_eq!(verdict.category, VerdictCategory::NoVerifiedHint);
        assert_eq!(verdict.tallies.no_probe, 1);
        assert_eq!(verdict.measurements, 0);
    }

    #[test]
    fn quota_parks_and_resumes() {
        let truth = c(48.1351, 11.5820);
        let far = c(52.52, 13.405);
        let probes = vec![probe("a", far), probe("b", truth)];
        let ip: IpAddr = IP.parse().unwrap();
        let w = world(vec![(ip, truth, true)], &probes, NoiseModel { min_ms: 0.0, max_ms: 0.0 });
        let cfg = ValidationConfig { a_ms: 1.0, ..cfg() };
        let hints = vec![hint(1, far, "ber"), hint(2, truth, "muc")];

        let full = Validator { backend: &w, probes: &probes, cfg: &cfg, packets: 1 };
        let expected = done(full.run(DomainState::new(ip, "x".into(), hints.clone()), None));

        let one = Budgeted::new(&w, 1);
        let v = Validator { backend: &one, probes: &probes, cfg: &cfg, packets: 1 };
        let parked = match v.run(DomainState::new(ip, "x".into(), hints), None) {
            ValidationStep::Parked(st, BackendError::QuotaExceeded) => st,
            other => panic!("{other:?}"),
        };
        assert_eq!(parked.measurements, 1);
        assert_eq!(parked.hints[0].status, HintStatus::UnverifiableLatency);
        assert!(parked.hints[1].is_pending());
        let resumed = done(full.run(*parked, None));
        assert_eq!(resumed, expected);
    }

    #[test]
    fn cdf_and_histogram() {
        assert!(empirical_cdf(&[]).is_empty());
        let cdf = empirical_cdf(&[0.0, 0.0, 0.0]);
        assert_eq!(cdf, vec![CdfPoint { value: 0.0, fraction: 1.0 }]);
        let cdf = empirical_cdf(&[2.0, 1.0, 2.0, 4.0]);
        assert_eq!(cdf.iter().map(|p| p.fraction).collect::<Vec<_>>(), vec![0.25, 0.75, 1.0]);
        assert_eq!(histogram(&[0.0, 0.5, 1.0, 8.99, 9.0, -1.0], 0.0, 9.0, 9), vec![2, 1, 0, 0, 0, 0, 0, 0, 1]);
        assert_eq!(sensitivity_report(&[]), SensitivityReport::default());
    }

    #[test]
    fn config_validation() {
        assert!(cfg().validate().is_ok());
        assert!(ValidationConfig { c: 1.5, ..cfg() }.validate().is_err());
        assert!(ValidationConfig { x_km: 0.0, ..cfg() }.validate().is_err());
        assert!(ValidationConfig { a_ms: -1.0, ..cfg() }.validate().is_err());
        assert!(ValidationConfig { a_ms: 0.0, ..cfg() }.validate().is_ok());
    }

    #[test]
    fn evidence_serializes() {
        let e = Evidence {
            stage: EvidenceStage::Pinpoint,
            hint: Some(LocationId(3)),
            origin: Origin {
                id: "p".into(),
                kind: OriginKind::Probe,
                lat: 1.0,
                lon: 2.0,
            },
            rtt_ms: Some(4.0),
            timestamp: 9,
            outcome: EvidenceOutcome::Pinpoint(PinpointOutcome::Inconclusive(Inconclusive::LatencyTooHigh {
                excess_ms: 1.5,
            })),
        };
        let s = serde_json::to_string(&e).unwrap();
        let back: Evidence = serde_json::from_str(&s).unwrap();
        assert_eq!(back, e);
    }

    fn arb_coord() -> impl Strategy<Value = Coord> {
        (-80.0..80.0f64, -180.0..180.0f64).prop_map(|(a, b)| c(a, b))
    }

    proptest! {
        #[test]
        fn raising_buffer_never_unverifies(h in arb_coord(), p in arb_coord(), rtt in 0.0..200.0f64, a in 0.0..20.0f64, extra in 0.0..20.0f64) {
            let lo = ValidationConfig { a_ms: a, ..cfg() };
            let hi = ValidationConfig { a_ms: a + extra, ..cfg() };
            if matches!(verify_hint(h, p, Some(rtt), &lo), PinpointOutcome::Verified { .. }) {
                let verified_with_more_buffer = matches!(verify_hint(h, p, Some(rtt), &hi), PinpointOutcome::Verified { .. });
                prop_assert!(verified_with_more_buffer);
            }
        }

        #[test]
        fn verified_within_max_error(truth in arb_coord(), h in arb_coord(), dlat in -8.0..8.0f64, dlon in -8.0..8.0f64, noise in 0.0..9.0f64) {
            let cfg = cfg();
            let p = c((h.lat() + dlat).clamp(-90.0, 90.0), ((h.lon() + dlon + 540.0) % 360.0) - 180.0);
            let d = great_circle_km(p, h);
            prop_assume!(d < cfg.x_km);
            let rtt = SimWorld::propagation_ms(great_circle_km(p, truth)) + noise;
            if matches!(verify_hint(h, p, Some(rtt), &cfg), PinpointOutcome::Verified { .. }) {
                prop_assert!(great_circle_km(h, truth) <= max_error_km(d, &cfg) + 1e-6);
            }
        }

        #[test]
        fn prescan_never_removes_truth(truth in arb_coord(), v in arb_coord(), noise in 0.0..50.0f64) {
            let cfg = cfg();
            let vantage = Vantage::new("v", v.lat(), v.lon());
            let rtt = SimWorld::propagation_ms(great_circle_km(v, truth)) + noise;
            let mut hints = vec![hint(1, truth, "abc")];
            falsify_by_prescan(&mut hints, &[result(&vantage, Some(rtt.max(cfg.rtt_floor_ms)))], &cfg);
            prop_assert!(hints[0].is_pending());
        }
    }
}
