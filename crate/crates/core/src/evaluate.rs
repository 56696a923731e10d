//! Classification of third-party geolocation answers against verdicts.

use std::collections::{BTreeMap, HashMap};
use std::io::{self, Read, Write};
use std::net::IpAddr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geo::{great_circle_km, Coord};
use crate::verdict::{DomainVerdict, ValidationConfig, VerdictCategory};

pub const DEFAULT_SAME_RADIUS_KM: f64 = 100.0;

/// A location claimed for an address by an external source. `coord` is
/// `None` when the source has no answer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExternalAnswer {
    pub ip: IpAddr,
    pub source: String,
    pub coord: Option<Coord>,
    #[serde(default)]
    pub city: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum EvalCategory {
    Same,
    Possible,
    Wrong,
    NoData,
    NotApplicable,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationRecord {
    pub ip: IpAddr,
    pub fqdn: String,
    pub source: String,
    pub verdict_category: VerdictCategory,
    pub category: EvalCategory,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub distance_to_verified_km: Option<f64>,
}

/// Classifies one answer. A missing answer is NO_DATA; verdicts without
/// measurable evidence (UNRESPONSIVE, FILTERED) are NOT_APPLICABLE; an
/// answer outside any evidence disc is WRONG; an answer within
/// `same_radius_km` of a verified location is SAME; anything else is
/// POSSIBLE.
pub fn classify(
    answer: &ExternalAnswer,
    verdict: &DomainVerdict,
    cfg: &ValidationConfig,
    same_radius_km: f64,
) -> EvaluationRecord {
    let mut distance_to_verified_km = None;
    let category = match answer.coord {
        None => EvalCategory::NoData,
        Some(_) if matches!(verdict.category, VerdictCategory::Unresponsive | VerdictCategory::Filtered) => {
            EvalCategory::NotApplicable
        }
        Some(at) => {
            distance_to_verified_km = verdict
                .verified
                .as_ref()
                .map(|v| great_circle_km(at, Coord::new(v.lat, v.lon).expect("verified location is valid")));
            if verdict.evidence.iter().any(|e| e.excludes(at, cfg)) {
                EvalCategory::Wrong
            } else if verdict.category == VerdictCategory::Verified
                && distance_to_verified_km.is_some_and(|d| d <= same_radius_km)
            {
                EvalCategory::Same
            } else {
                EvalCategory::Possible
            }
        }
    };
    EvaluationRecord {
        ip: verdict.ip,
        fqdn: verdict.fqdn.clone(),
        source: answer.source.clone(),
        verdict_category: verdict.category,
        category,
        distance_to_verified_km,
    }
}

/// Classifies every answer that has a verdict for its address.
pub fn classify_all(
    answers: &[ExternalAnswer],
    verdicts: &[DomainVerdict],
    cfg: &ValidationConfig,
    same_radius_km: f64,
) -> Vec<EvaluationRecord> {
    let by_ip: HashMap<IpAddr, &DomainVerdict> = verdicts.iter().map(|v| (v.ip, v)).collect();
    answers
        .iter()
        .filter_map(|a| by_ip.get(&a.ip).map(|v| classify(a, v, cfg, same_radius_km)))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub source: String,
    pub verdict_category: VerdictCategory,
    pub records: usize,
    pub same: usize,
    pub possible: usize,
    pub wrong: usize,
    pub no_data: usize,
    pub not_applicable: usize,
    /// Shares of records with an answer; `None` when there are none.
    pub same_pct: Option<f64>,
    pub possible_pct: Option<f64>,
    pub wrong_pct: Option<f64>,
    /// Share of applicable records without an answer.
    pub no_data_pct: Option<f64>,
}

fn pct(n: usize, d: usize) -> Option<f64> {
    (d > 0).then(|| 100.0 * n as f64 / d as f64)
}

/// One row per (source, verdict category) present in `records`.
pub fn summarize(records: &[EvaluationRecord]) -> Vec<SummaryRow> {
    let mut groups: BTreeMap<(&str, VerdictCategory), [usize; 5]> = BTreeMap::new();
    for r in records {
        let slot = groups.entry((r.source.as_str(), r.verdict_category)).or_default();
        slot[r.category as usize] += 1;
    }
    groups
        .into_iter()
        .map(|((source, verdict_category), [same, possible, wrong, no_data, not_applicable])| {
            let answered = same + possible + wrong;
            SummaryRow {
                source: source.to_string(),
                verdict_category,
                records: answered + no_data + not_applicable,
                same,
                possible,
                wrong,
                no_data,
                not_applicable,
                same_pct: pct(same, answered),
                possible_pct: pct(possible, answered),
                wrong_pct: pct(wrong, answered),
                no_data_pct: pct(no_data, answered + no_data),
            }
        })
        .collect()
}

pub fn write_summary_csv<W: Write>(w: W, rows: &[SummaryRow]) -> io::Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record([
        "source",
        "verdict_category",
        "records",
        "same",
        "possible",
        "wrong",
        "no_data",
        "not_applicable",
        "same_pct",
        "possible_pct",
        "wrong_pct",
        "no_data_pct",
    ])?;
    let f = |v: Option<f64>| v.map(|x| format!("{x:.1}")).unwrap_or_default();
    for r in rows {
        out.write_record([
            r.source.clone(),
            r.verdict_category.as_str().to_string(),
            r.records.to_string(),
            r.same.to_string(),
            r.possible.to_string(),
            r.wrong.to_string(),
            r.no_data.to_string(),
            r.not_applicable.to_string(),
            f(r.same_pct),
            f(r.possible_pct),
            f(r.wrong_pct),
            f(r.no_data_pct),
        ])?;
    }
    out.flush()
}

#[derive(Debug, Error)]
pub enum AnswerError {
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("line {line}: {message}")]
    Line { line: u64, message: String },
}

/// Reads `ip,lat,lon,city` records for one source. Empty coordinates mean
/// the source has no answer for that address.
pub fn read_answers<R: Read>(source: &str, r: R) -> Result<Vec<ExternalAnswer>, AnswerError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(r);
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        let bad = |m: String| AnswerError::Line { line, message: m };
        let ip_field = rec.get(0).unwrap_or("");
        if ip_field.eq_ignore_ascii_case("ip") || (rec.len() == 1 && ip_field.is_empty()) {
            continue;
        }
        let ip: IpAddr = ip_field.parse().map_err(|_| bad(format!("bad address {ip_field:?}")))?;
        let lat = rec.get(1).unwrap_or("");
        let lon = rec.get(2).unwrap_or("");
        let coord = if lat.is_empty() && lon.is_empty() {
            None
        } else {
            let lat: f64 = lat.parse().map_err(|_| bad(format!("bad latitude {lat:?}")))?;
            let lon: f64 = lon.parse().map_err(|_| bad(format!("bad longitude {lon:?}")))?;
            Some(Coord::new(lat, lon).map_err(|e| bad(e.to_string()))?)
        };
        out.push(ExternalAnswer {
            ip,
            source: source.to_string(),
            coord,
            city: rec.get(3).unwrap_or("").to_string(),
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub same_radius_km: f64,
    pub records: usize,
    pub by_category: BTreeMap<EvalCategory, usize>,
    pub summary: Vec<SummaryRow>,
}

pub fn evaluation_report(records: &[EvaluationRecord], same_radius_km: f64) -> EvaluationReport {
    let mut by_category = BTreeMap::new();
    for r in records {
        *by_category.entry(r.category).or_insert(0) += 1;
    }
    EvaluationReport {
        same_radius_km,
        records: records.len(),
        by_category,
        summary: summarize(records),
    }
}
