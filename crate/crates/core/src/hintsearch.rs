//! Turns trie matches into per-domain location hints.

use std::collections::{BTreeMap, HashMap};
use std::io::{self, BufRead, BufReader, Read, Write};
use std::net::IpAddr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codetrie::{CodeTrie, TrieMatch};
use crate::domainprep::{apply_word_blacklist, Blacklists, DomainRecord};
use crate::geodata::{CodeSource, LocationId, LocationTable};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum HintStatus {
    Pending,
    Verified,
    Falsified,
    UnverifiableNoProbe,
    UnverifiableLatency,
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("hint status can only leave PENDING (attempted {from:?} -> {to:?})")]
pub struct StatusTransitionError {
    pub from: HintStatus,
    pub to: HintStatus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocationHint {
    pub domain: String,
    pub ip: IpAddr,
    pub location_id: LocationId,
    pub location_name: String,
    pub lat: f64,
    pub lon: f64,
    pub code: String,
    pub source: CodeSource,
    pub label_index: usize,
    pub char_offset: usize,
    pub status: HintStatus,
}

impl LocationHint {
    pub fn coord(&self) -> crate::geo::Coord {
        crate::geo::Coord::new(self.lat, self.lon).expect("hint coordinates come from a location")
    }

    pub fn set_status(&mut self, to: HintStatus) -> Result<(), StatusTransitionError> {
        if self.status != HintStatus::Pending || to == HintStatus::Pending {
            return Err(StatusTransitionError {
                from: self.status,
                to,
            });
        }
        self.status = to;
        Ok(())
    }

    pub fn is_pending(&self) -> bool {
        self.status == HintStatus::Pending
    }
}

/// Order in which a domain's hints are tried.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HintOrdering {
    /// Longest code first, then source priority, then discovery order.
    #[default]
    LongestFirst,
    /// Order in which the codes were found in the name.
    Discovery,
}

/// Everything the search step needs besides the record itself.
pub struct HintSearcher<'a> {
    pub trie: &'a CodeTrie,
    pub blacklists: &'a Blacklists,
    pub locations: &'a LocationTable,
    pub ordering: HintOrdering,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DomainHints {
    pub ip: IpAddr,
    pub fqdn: String,
    pub ip_encoded: bool,
    /// Matches surviving the blacklists, counted per occurrence.
    pub raw_matches: usize,
    pub hints: Vec<LocationHint>,
}

impl HintSearcher<'_> {
    pub fn find_hints(&self, record: &DomainRecord) -> DomainHints {
        let labels = apply_word_blacklist(&record.labels, self.blacklists);
        let mut kept: Vec<TrieMatch> = Vec::new();
        for label in &labels {
            for m in self.trie.search_label(&label.text, label.index) {
                if self.blacklists.is_code_blocked(&m.code, m.location) {
                    continue;
                }
                if label.overlaps_mask(m.char_offset..m.end()) {
                    continue;
                }
                kept.push(m);
            }
        }
        let raw_matches = kept.len();

        // longest code per location; ties go to source priority, then discovery
        let mut best: HashMap<LocationId, (usize, &TrieMatch)> = HashMap::new();
        for (order, m) in kept.iter().enumerate() {
            best.entry(m.location)
                .and_modify(|cur| {
                    let better = m.code.len() > cur.1.code.len()
                        || (m.code.len() == cur.1.code.len()
                            && m.source.priority() < cur.1.source.priority());
                    if better {
                        *cur = (order, m);
                    }
                })
                .or_insert((order, m));
        }
        let mut chosen: Vec<(usize, &TrieMatch)> = best.into_values().collect();
        match self.ordering {
            HintOrdering::LongestFirst => chosen.sort_by(|a, b| {
                b.1.code
                    .len()
                    .cmp(&a.1.code.len())
                    .then(a.1.source.priority().cmp(&b.1.source.priority()))
                    .then(a.0.cmp(&b.0))
            }),
            HintOrdering::Discovery => chosen.sort_by_key(|c| c.0),
        }

        let hints = chosen
            .into_iter()
            .filter_map(|(_, m)| {
                let loc = self.locations.get(m.location)?;
                Some(LocationHint {
                    domain: record.fqdn.clone(),
                    ip: record.ip,
                    location_id: m.location,
                    location_name: loc.name.clone(),
                    lat: loc.lat,
                    lon: loc.lon,
                    code: m.code.clone(),
                    source: m.source,
                    label_index: m.label_index,
                    char_offset: m.char_offset,
                    status: HintStatus::Pending,
                })
            })
            .collect();
        DomainHints {
            ip: record.ip,
            fqdn: record.fqdn.clone(),
            ip_encoded: record.ip_encoded,
            raw_matches,
            hints,
        }
    }
}

/// Summary statistics of one group of domains.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GroupStats {
    pub domains: usize,
    pub no_match: usize,
    pub no_match_fraction: f64,
    pub total_hints: usize,
    pub mean_hints: f64,
    pub p50_hints: usize,
    pub p90_hints: usize,
    pub p99_hints: usize,
    pub max_hints: usize,
    /// Mean of per-occurrence match counts (before per-location dedup).
    pub mean_raw_matches: f64,
    pub hints_per_source: BTreeMap<CodeSource, usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub all: GroupStats,
    pub ip_encoded: GroupStats,
    pub not_ip_encoded: GroupStats,
}

/// Nearest-rank percentile of sorted values.
fn percentile(sorted: &[usize], p: f64) -> usize {
    if sorted.is_empty() {
        return 0;
    }
    let rank = (p / 100.0 * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

fn group_stats<'a>(domains: impl Iterator<Item = &'a DomainHints>) -> GroupStats {
    let mut counts = Vec::new();
    let mut raw = 0usize;
    let mut per_source: BTreeMap<CodeSource, usize> = BTreeMap::new();
    for d in domains {
        counts.push(d.hints.len());
        raw += d.raw_matches;
        for h in &d.hints {
            *per_source.entry(h.source).or_default() += 1;
        }
    }
    let n = counts.len();
    if n == 0 {
        return GroupStats::default();
    }
    counts.sort_unstable();
    let total: usize = counts.iter().sum();
    let no_match = counts.iter().filter(|&&c| c == 0).count();
    GroupStats {
        domains: n,
        no_match,
        no_match_fraction: no_match as f64 / n as f64,
        total_hints: total,
        mean_hints: total as f64 / n as f64,
        p50_hints: percentile(&counts, 50.0),
        p90_hints: percentile(&counts, 90.0),
        p99_hints: percentile(&counts, 99.0),
        max_hints: *counts.last().unwrap(),
        mean_raw_matches: raw as f64 / n as f64,
        hints_per_source: per_source,
    }
}

pub fn corpus_stats(domains: &[DomainHints]) -> CorpusStats {
    CorpusStats {
        all: group_stats(domains.iter()),
        ip_encoded: group_stats(domains.iter().filter(|d| d.ip_encoded)),
        not_ip_encoded: group_stats(domains.iter().filter(|d| !d.ip_encoded)),
    }
}

pub fn write_hints<W: Write>(mut w: W, hints: &[LocationHint]) -> io::Result<()> {
    for h in hints {
        serde_json::to_writer(&mut w, h)?;
        w.write_all(b"\n")?;
    }
    w.flush()
}

/// Reads a hints file and groups consecutive hints by (ip, domain),
/// keeping file order within and across groups.
pub fn read_hint_groups<R: Read>(r: R) -> io::Result<Vec<Vec<LocationHint>>> {
    let mut groups: Vec<Vec<LocationHint>> = Vec::new();
    for (i, line) in BufReader::new(r).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let h: LocationHint = serde_json::from_str(&line).map_err(|e| {
            io::Error::new(io::ErrorKind::InvalidData, format!("hints line {}: {e}", i + 1))
        })?;
        match groups.last_mut() {
            Some(g) if g[0].ip == h.ip && g[0].domain == h.domain => g.push(h),
            _ => groups.push(vec![h]),
        }
    }
    Ok(groups)
}
