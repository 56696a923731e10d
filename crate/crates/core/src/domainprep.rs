//! Reverse-DNS name preprocessing: validation, registrable-domain removal,
//! IP-encoding detection and the three blacklists.

use std::collections::{BTreeSet, HashSet};
use std::fmt;
use std::io::{self, BufRead, BufReader, Read};
use std::net::IpAddr;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::geodata::{LocationId, LocationTable};

const BUNDLED_TLDS: &str = include_str!("../data/tlds.txt");
const BUNDLED_SUFFIXES: &str = include_str!("../data/public_suffix.dat");
pub const BUNDLED_CODE_BLACKLIST: &str = include_str!("../data/code_blacklist.txt");
pub const BUNDLED_WORD_BLACKLIST: &str = include_str!("../data/word_blacklist.txt");
pub const BUNDLED_CODE_LOCATION_BLACKLIST: &str = include_str!("../data/code_location_blacklist.txt");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    BadChar,
    BadTld,
    EmptyLabel,
}

impl fmt::Display for RejectReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RejectReason::BadChar => "bad_char",
            RejectReason::BadTld => "bad_tld",
            RejectReason::EmptyLabel => "empty_label",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rejection {
    pub ip: IpAddr,
    pub fqdn: String,
    pub reason: RejectReason,
}

/// A validated target ready for searching.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DomainRecord {
    pub ip: IpAddr,
    pub fqdn: String,
    /// Labels left after removing the registrable domain, in name order.
    pub labels: Vec<String>,
    pub ip_encoded: bool,
}

/// Strips `#` comments, trims and lowercases; skips blank lines.
pub fn parse_list(text: &str) -> Vec<String> {
    text.lines()
        .map(|l| l.split('#').next().unwrap_or("").trim().to_lowercase())
        .filter(|l| !l.is_empty())
        .collect()
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TldRegistry {
    tlds: HashSet<String>,
}

impl TldRegistry {
    pub fn from_text(text: &str) -> Self {
        TldRegistry {
            tlds: parse_list(text)
                .into_iter()
                .map(|t| t.trim_start_matches('.').to_string())
                .collect(),
        }
    }

    pub fn bundled() -> Self {
        Self::from_text(BUNDLED_TLDS)
    }

    pub fn contains(&self, tld: &str) -> bool {
        self.tlds.contains(tld)
    }

    pub fn len(&self) -> usize {
        self.tlds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tlds.is_empty()
    }
}

/// Rules in public-suffix-list syntax: plain rules, `*.` wildcards and
/// `!` exceptions.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SuffixRules {
    rules: HashSet<String>,
    wildcards: HashSet<String>,
    exceptions: HashSet<String>,
}

impl SuffixRules {
    pub fn from_text(text: &str) -> Self {
        let mut r = SuffixRules::default();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with("//") || line.starts_with('#') {
                continue;
            }
            let rule = line.split_whitespace().next().unwrap_or("").to_lowercase();
            if let Some(rest) = rule.strip_prefix('!') {
                r.exceptions.insert(rest.to_string());
            } else if let Some(rest) = rule.strip_prefix("*.") {
                r.wildcards.insert(rest.to_string());
            } else {
                r.rules.insert(rule);
            }
        }
        r
    }

    pub fn bundled() -> Self {
        Self::from_text(BUNDLED_SUFFIXES)
    }

    /// Number of trailing labels forming the public suffix of `labels`.
    /// Unlisted names fall back to a one-label suffix.
    pub fn suffix_len(&self, labels: &[&str]) -> usize {
        let n = labels.len();
        let mut best = 1.min(n);
        for k in 1..=n {
            let candidate = labels[n - k..].join(".");
            if self.exceptions.contains(&candidate) {
                return k - 1;
            }
            if self.rules.contains(&candidate) {
                best = best.max(k);
            }
            if k < n {
                // wildcard `*.parent` covers one more label than `parent`
                if self.wildcards.contains(&candidate) {
                    best = best.max(k + 1);
                }
            }
        }
        best
    }
}

fn is_hostname_char(c: char) -> bool {
    c.is_ascii_alphanumeric() || c == '-' || c == '.'
}

/// Normalizes and checks a name: hostname characters only, no empty
/// labels, a TLD known to the registry. Idempotent on accepted names.
pub fn validate_name(fqdn: &str, tlds: &TldRegistry) -> Result<String, RejectReason> {
    let trimmed = fqdn.trim();
    let name = trimmed.strip_suffix('.').unwrap_or(trimmed).to_ascii_lowercase();
    if !name.chars().all(is_hostname_char) {
        return Err(RejectReason::BadChar);
    }
    if name.is_empty() || name.split('.').any(str::is_empty) {
        return Err(RejectReason::EmptyLabel);
    }
    let tld = name.rsplit('.').next().unwrap_or("");
    if !tlds.contains(tld) {
        return Err(RejectReason::BadTld);
    }
    Ok(name)
}

/// Labels in front of the registrable domain (public suffix plus one label).
pub fn strip_registrable(fqdn: &str, rules: &SuffixRules) -> Vec<String> {
    let labels: Vec<&str> = fqdn.split('.').filter(|l| !l.is_empty()).collect();
    let keep = labels.len().saturating_sub(rules.suffix_len(&labels) + 1);
    labels[..keep].iter().map(|s| s.to_string()).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Radix {
    Dec,
    Hex,
}

fn candidate_encodings(ip: IpAddr) -> Vec<(String, Radix)> {
    let mut out = Vec::new();
    match ip {
        IpAddr::V4(v4) => {
            let o = v4.octets();
            let fwd: Vec<u8> = o.to_vec();
            let rev: Vec<u8> = o.iter().rev().copied().collect();
            for order in [&fwd, &rev] {
                let plain: Vec<String> = order.iter().map(|b| b.to_string()).collect();
                let padded: Vec<String> = order.iter().map(|b| format!("{b:03}")).collect();
                for parts in [&plain, &padded] {
                    out.push((parts.join("-"), Radix::Dec));
                    out.push((parts.join(""), Radix::Dec));
                }
                out.push((order.iter().map(|b| format!("{b:02x}")).collect(), Radix::Hex));
            }
        }
        IpAddr::V6(v6) => {
            let seg = v6.segments();
            let nibbles: String = seg.iter().map(|s| format!("{s:04x}")).collect();
            out.push((nibbles.chars().rev().collect(), Radix::Hex));
            out.push((nibbles, Radix::Hex));
            let short: Vec<String> = seg.iter().map(|s| format!("{s:x}")).collect();
            let full: Vec<String> = seg.iter().map(|s| format!("{s:04x}")).collect();
            out.push((short.join("-"), Radix::Hex));
            out.push((full.join("-"), Radix::Hex));
            out.push((v6.to_string().replace(':', "-"), Radix::Hex));
        }
    }
    out.sort();
    out.dedup();
    out
}

fn contains_delimited(hay: &str, needle: &str, radix: Radix) -> bool {
    let is_digit = |c: u8| match radix {
        Radix::Dec => c.is_ascii_digit(),
        Radix::Hex => c.is_ascii_hexdigit(),
    };
    let hb = hay.as_bytes();
    let mut from = 0;
    while let Some(pos) = hay[from..].find(needle) {
        let s = from + pos;
        let e = s + needle.len();
        let before_ok = s == 0 || !is_digit(hb[s - 1]);
        let after_ok = e == hb.len() || !is_digit(hb[e]);
        if before_ok && after_ok {
            return true;
        }
        from = s + 1;
    }
    false
}

/// True iff some label embeds `ip` under one of the supported schemes.
///
/// IPv4: hyphenated or concatenated decimal in address or reversed octet
/// order, each plain or zero-padded to three digits; 8-digit hex; or the
/// four octets appearing as separate numeric labels (dotted form).
/// IPv6: the 32-nibble string forward or reversed, and the groups joined by
/// hyphens (leading zeros stripped or kept, or the compressed form).
/// A match must not be glued to further digits of the same radix.
pub fn detect_ip_encoding(ip: IpAddr, labels: &[String]) -> bool {
    let candidates = candidate_encodings(ip);
    let per_label = labels.iter().any(|label| {
        candidates
            .iter()
            .any(|(c, radix)| contains_delimited(label, c, *radix))
    });
    if per_label {
        return true;
    }
    if let IpAddr::V4(v4) = ip {
        let numeric: HashSet<u8> = labels
            .iter()
            .filter(|l| !l.is_empty() && l.len() <= 3 && l.bytes().all(|b| b.is_ascii_digit()))
            .filter_map(|l| l.parse().ok())
            .collect();
        let octets = v4.octets();
        let distinct: HashSet<u8> = octets.iter().copied().collect();
        let numeric_labels = labels
            .iter()
            .filter(|l| !l.is_empty() && l.bytes().all(|b| b.is_ascii_digit()))
            .count();
        return numeric_labels >= 4 && distinct.iter().all(|o| numeric.contains(o));
    }
    false
}

/// A label prepared for searching: masked byte ranges are never matched.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchLabel {
    pub index: usize,
    pub text: String,
    pub masked: Vec<Range<usize>>,
}

impl SearchLabel {
    pub fn overlaps_mask(&self, span: Range<usize>) -> bool {
        self.masked
            .iter()
            .any(|m| m.start < span.end && span.start < m.end)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Blacklists {
    pub codes: HashSet<String>,
    pub words: BTreeSet<String>,
    pub code_locations: HashSet<(String, LocationId)>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlacklistLoadStats {
    pub codes: usize,
    pub words: usize,
    pub code_location_lines: usize,
    pub code_location_pairs: usize,
    pub unresolved_locations: Vec<String>,
}

impl Blacklists {
    /// Builds blacklists from the three plain-text lists. Code-location
    /// lines read `code location-name` and resolve to every location of
    /// that name.
    pub fn from_texts(
        codes: &str,
        words: &str,
        code_locations: &str,
        table: &LocationTable,
    ) -> (Self, BlacklistLoadStats) {
        let mut bl = Blacklists {
            codes: parse_list(codes).into_iter().collect(),
            words: parse_list(words).into_iter().collect(),
            code_locations: HashSet::new(),
        };
        let mut stats = BlacklistLoadStats {
            codes: bl.codes.len(),
            words: bl.words.len(),
            ..Default::default()
        };
        for line in parse_list(code_locations) {
            stats.code_location_lines += 1;
            let mut parts = line.splitn(2, char::is_whitespace);
            let code = parts.next().unwrap_or("").to_string();
            let Some(name) = parts.next().map(str::trim).filter(|n| !n.is_empty()) else {
                stats.unresolved_locations.push(line.clone());
                continue;
            };
            let ids = table.ids_named(name);
            if ids.is_empty() {
                stats.unresolved_locations.push(name.to_string());
            }
            for id in ids {
                bl.code_locations.insert((code.clone(), id));
            }
        }
        stats.code_location_pairs = bl.code_locations.len();
        (bl, stats)
    }

    pub fn bundled(table: &LocationTable) -> (Self, BlacklistLoadStats) {
        Self::from_texts(
            BUNDLED_CODE_BLACKLIST,
            BUNDLED_WORD_BLACKLIST,
            BUNDLED_CODE_LOCATION_BLACKLIST,
            table,
        )
    }

    pub fn is_code_blocked(&self, code: &str, location: LocationId) -> bool {
        self.codes.contains(code) || self.code_locations.contains(&(code.to_string(), location))
    }
}

/// Drops labels that are blacklisted words and masks blacklisted words
/// occurring inside longer labels.
pub fn apply_word_blacklist(labels: &[String], blacklists: &Blacklists) -> Vec<SearchLabel> {
    labels
        .iter()
        .enumerate()
        .filter(|(_, l)| !blacklists.words.contains(l.as_str()))
        .map(|(index, label)| {
            let mut spans: Vec<Range<usize>> = Vec::new();
            for w in &blacklists.words {
                let mut from = 0;
                while let Some(pos) = label[from..].find(w.as_str()) {
                    spans.push(from + pos..from + pos + w.len());
                    from += pos + 1;
                }
            }
            spans.sort_by_key(|r| (r.start, r.end));
            let mut masked: Vec<Range<usize>> = Vec::new();
            for s in spans {
                match masked.last_mut() {
                    Some(last) if s.start <= last.end => last.end = last.end.max(s.end),
                    _ => masked.push(s),
                }
            }
            SearchLabel {
                index,
                text: label.clone(),
                masked,
            }
        })
        .collect()
}

/// Validation, registrable-domain removal and encoding detection in one step.
#[derive(Debug, Clone)]
pub struct Preprocessor {
    pub tlds: TldRegistry,
    pub suffixes: SuffixRules,
}

impl Preprocessor {
    pub fn bundled() -> Self {
        Preprocessor {
            tlds: TldRegistry::bundled(),
            suffixes: SuffixRules::bundled(),
        }
    }

    pub fn prepare(&self, ip: IpAddr, fqdn: &str) -> Result<DomainRecord, Rejection> {
        let name = validate_name(fqdn, &self.tlds).map_err(|reason| Rejection {
            ip,
            fqdn: fqdn.trim().to_string(),
            reason,
        })?;
        let labels = strip_registrable(&name, &self.suffixes);
        let ip_encoded = detect_ip_encoding(ip, &labels);
        Ok(DomainRecord {
            ip,
            fqdn: name,
            labels,
            ip_encoded,
        })
    }
}

/// One `ip,fqdn` line of a target corpus.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorpusLine {
    pub line: usize,
    pub ip: IpAddr,
    pub fqdn: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorpusError {
    pub line: usize,
    pub text: String,
}

/// Reads `ip,fqdn` lines; `#` comments and blank lines are skipped.
pub fn read_corpus<R: Read>(r: R) -> io::Result<(Vec<CorpusLine>, Vec<CorpusError>)> {
    let mut ok = Vec::new();
    let mut bad = Vec::new();
    for (i, line) in BufReader::new(r).lines().enumerate() {
        let line = line?;
        let t = line.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        let parsed = t
            .split_once(',')
            .and_then(|(ip, name)| Some((ip.trim().parse::<IpAddr>().ok()?, name.trim())));
        match parsed {
            Some((ip, fqdn)) => ok.push(CorpusLine {
                line: i + 1,
                ip,
                fqdn: fqdn.to_string(),
            }),
            None => bad.push(CorpusError {
                line: i + 1,
                text: t.to_string(),
            }),
        }
    }
    Ok((ok, bad))
}
