//! Stage orchestration. Each stage reads the previous stage's files from
//! the output directory and writes its own; the in-memory functions
//! underneath are usable on their own.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::{self, File};
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::net::IpAddr;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codetrie::{cache_key, CodeTrie};
use crate::config::{BackendKind, CampaignConfig, ConfigError};
use crate::domainprep::{read_corpus, Blacklists, BlacklistLoadStats, DomainRecord, Preprocessor, Rejection, SuffixRules, TldRegistry};
use crate::evaluate::{classify_all, evaluation_report, read_answers, write_summary_csv, EvaluationRecord};
use crate::geodata::{
    apply_population_filter, merge_locations_with_stats, parse_code_files, CodeSource, GeoConfig, Location,
    LocationTable, MergeStats, ParseStats, RawCode,
};
use crate::hintsearch::{corpus_stats, read_hint_groups, write_hints, DomainHints, HintOrdering, HintSearcher, HintStatus, LocationHint};
use crate::measure::remote::RemoteBackend;
use crate::measure::{
    prescan, read_probes, read_recorded_results, read_vantages, BackendError, Budgeted, MeasurementBackend, PrescanRecord,
    Probe, ReplayBackend, SimWorld, SimWorldFile, Vantage,
};
use crate::verdict::{sensitivity_report, DomainState, DomainVerdict, SensitivityReport, ValidationConfig, ValidationStep, Validator, VerdictCategory};

/// File names inside the output directory.
pub mod files {
    pub const LOCATIONS: &str = "locations.jsonl";
    pub const CODES_STATS: &str = "codes_stats.json";
    pub const DOMAINS: &str = "domains.jsonl";
    pub const REJECTED: &str = "rejected.jsonl";
    pub const PREPROCESS_STATS: &str = "preprocess_stats.json";
    pub const HINTS: &str = "hints.jsonl";
    pub const SEARCH_STATS: &str = "search_stats.json";
    pub const TRIE_CACHE: &str = "trie.cache";
    pub const PRESCAN: &str = "prescan.jsonl";
    pub const CAMPAIGN_STATE: &str = "campaign_state.jsonl";
    pub const VERDICTS: &str = "verdicts.jsonl";
    pub const MEASURE_STATS: &str = "measure_stats.json";
    pub const EVALUATION: &str = "evaluation.jsonl";
    pub const EVALUATION_SUMMARY: &str = "evaluation_summary.csv";
    pub const EVALUATION_REPORT: &str = "evaluation_report.json";
    pub const STATS_REPORT: &str = "stats_report.json";
}

pub const JOURNAL_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{} not found; run `hloc {stage}` first", path.display())]
    MissingStageOutput { path: PathBuf, stage: &'static str },
    #[error("{0}")]
    Input(String),
    #[error("{0}")]
    Backend(String),
    #[error("campaign incomplete: {parked} domains parked ({reason}); rerun with --resume")]
    Incomplete { parked: usize, reason: String },
    #[error("cannot write {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

impl PipelineError {
    /// Process exit code: 2 configuration, 3 input, 4 backend, 1 other I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) => 2,
            PipelineError::MissingStageOutput { .. } | PipelineError::Input(_) => 3,
            PipelineError::Backend(_) | PipelineError::Incomplete { .. } => 4,
            PipelineError::Io { .. } => 1,
        }
    }
}

type Result<T, E = PipelineError> = std::result::Result<T, E>;

fn input_err(path: &Path, e: impl std::fmt::Display) -> PipelineError {
    PipelineError::Input(format!("{}: {e}", path.display()))
}

fn write_file(path: &Path, fill: impl FnOnce(&mut BufWriter<File>) -> io::Result<()>) -> Result<()> {
    let io_err = |source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    };
    let tmp = path.with_extension("tmp");
    let f = File::create(&tmp).map_err(io_err)?;
    let mut w = BufWriter::new(f);
    fill(&mut w).and_then(|_| w.flush()).map_err(io_err)?;
    drop(w);
    fs::rename(&tmp, path).map_err(io_err)
}

fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    write_file(path, |w| {
        for it in items {
            serde_json::to_writer(&mut *w, it)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_file(path, |w| {
        serde_json::to_writer_pretty(&mut *w, value)?;
        w.write_all(b"\n")
    })
}

fn open_stage_output(path: &Path, stage: &'static str) -> Result<File> {
    File::open(path).map_err(|e| match e.kind() {
        io::ErrorKind::NotFound => PipelineError::MissingStageOutput {
            path: path.to_path_buf(),
            stage,
        },
        _ => input_err(path, e),
    })
}

fn read_jsonl<T: DeserializeOwned>(path: &Path, stage: &'static str) -> Result<Vec<T>> {
    let f = open_stage_output(path, stage)?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| input_err(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| input_err(path, format!("line {}: {e}", i + 1)))?);
    }
    Ok(out)
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| input_err(path, e))
}

fn require<'a>(p: &'a Option<PathBuf>, field: &str) -> Result<&'a Path> {
    p.as_deref()
        .ok_or_else(|| PipelineError::Config(ConfigError::Invalid(format!("{field} must be set for this stage"))))
}

/// Merges codes into locations and applies the population filter.
pub fn build_locations(codes: &[RawCode], geo: &GeoConfig) -> (Vec<Location>, MergeStats) {
    let (merged, stats) = merge_locations_with_stats(codes, geo);
    (apply_population_filter(&merged, geo), stats)
}

pub fn preprocess_corpus(pre: &Preprocessor, lines: &[(IpAddr, String)]) -> (Vec<DomainRecord>, Vec<Rejection>) {
    let results: Vec<Result<DomainRecord, Rejection>> =
        lines.par_iter().map(|(ip, fqdn)| pre.prepare(*ip, fqdn)).collect();
    let mut ok = Vec::new();
    let mut bad = Vec::new();
    for r in results {
        match r {
            Ok(d) => ok.push(d),
            Err(e) => bad.push(e),
        }
    }
    (ok, bad)
}

pub fn search_corpus(searcher: &HintSearcher<'_>, records: &[DomainRecord]) -> Vec<DomainHints> {
    records.par_iter().map(|r| searcher.find_hints(r)).collect()
}

/// Plain-text contents of the three blacklists.
#[derive(Debug, Clone, Default)]
pub struct BlacklistTexts {
    pub codes: String,
    pub words: String,
    pub code_locations: String,
}

impl BlacklistTexts {
    pub fn bundled() -> Self {
        BlacklistTexts {
            codes: crate::domainprep::BUNDLED_CODE_BLACKLIST.to_string(),
            words: crate::domainprep::BUNDLED_WORD_BLACKLIST.to_string(),
            code_locations: crate::domainprep::BUNDLED_CODE_LOCATION_BLACKLIST.to_string(),
        }
    }

    pub fn build(&self, table: &LocationTable) -> (Blacklists, BlacklistLoadStats) {
        Blacklists::from_texts(&self.codes, &self.words, &self.code_locations, table)
    }
}

/// Outcome of validating a set of domains.
#[derive(Debug, Clone, Default)]
pub struct CampaignOutcome {
    pub verdicts: Vec<DomainVerdict>,
    pub parked: Vec<(DomainState, String)>,
}

/// Everything pin-point validation needs for one campaign.
pub struct Campaign<'a> {
    pub backend: &'a dyn MeasurementBackend,
    /// Backend for the vantage pre-scan; `None` skips the pre-scan.
    pub prescan_backend: Option<&'a dyn MeasurementBackend>,
    pub probes: &'a [Probe],
    pub vantages: &'a [Vantage],
    pub cfg: &'a ValidationConfig,
    pub packets: u32,
}

impl Campaign<'_> {
    /// Pre-scans every address that has hints.
    pub fn prescan_targets(&self, states: &[DomainState]) -> BTreeMap<IpAddr, PrescanRecord> {
        let Some(b) = self.prescan_backend else {
            return BTreeMap::new();
        };
        let mut targets: Vec<IpAddr> = states.iter().filter(|s| !s.hints.is_empty()).map(|s| s.ip).collect();
        targets.sort();
        targets.dedup();
        prescan(b, self.vantages, &targets, self.packets)
    }

    /// Validates one domain. A domain whose pre-scan is missing or
    /// incomplete parks without measuring.
    pub fn step(&self, state: DomainState, prescans: &BTreeMap<IpAddr, PrescanRecord>) -> ValidationStep {
        let needs_prescan = self.prescan_backend.is_some() && !state.prescan_applied && !state.hints.is_empty();
        let rec = prescans.get(&state.ip);
        if needs_prescan && rec.is_none_or(|r| r.incomplete) {
            return ValidationStep::Parked(Box::new(state), BackendError::QuotaExceeded);
        }
        let v = Validator {
            backend: self.backend,
            probes: self.probes,
            cfg: self.cfg,
            packets: self.packets,
        };
        v.run(state, rec)
    }

    /// Pre-scan followed by parallel per-domain validation.
    pub fn run(&self, states: Vec<DomainState>) -> CampaignOutcome {
        let prescans = self.prescan_targets(&states);
        self.run_with(states, &prescans, |_| {})
    }

    /// Validates `states` in parallel, reporting every finished or parked
    /// step to `on_step` as it happens.
    pub fn run_with(
        &self,
        states: Vec<DomainState>,
        prescans: &BTreeMap<IpAddr, PrescanRecord>,
        on_step: impl Fn(&ValidationStep) + Sync,
    ) -> CampaignOutcome {
        let steps: Vec<ValidationStep> = states
            .into_par_iter()
            .map(|s| {
                let step = self.step(s, prescans);
                on_step(&step);
                step
            })
            .collect();
        let mut out = CampaignOutcome::default();
        for s in steps {
            match s {
                ValidationStep::Done(v) => out.verdicts.push(*v),
                ValidationStep::Parked(st, e) => out.parked.push((*st, e.to_string())),
            }
        }
        sort_verdicts(&mut out.verdicts);
        out
    }
}

pub fn sort_verdicts(v: &mut [DomainVerdict]) {
    v.sort_by(|a, b| (a.ip, &a.fqdn).cmp(&(b.ip, &b.fqdn)));
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum JournalEntry {
    Header { version: u32, digest: String },
    Done { verdict: Box<DomainVerdict> },
    Parked { state: Box<DomainState>, reason: String },
}

fn journal_key(e: &JournalEntry) -> Option<(IpAddr, String)> {
    match e {
        JournalEntry::Header { .. } => None,
        JournalEntry::Done { verdict } => Some((verdict.ip, verdict.fqdn.clone())),
        JournalEntry::Parked { state, .. } => Some((state.ip, state.fqdn.clone())),
    }
}

/// Reads a campaign journal, keeping the last entry per domain.
pub fn read_journal(path: &Path, digest: &str) -> Result<HashMap<(IpAddr, String), JournalEntry>> {
    let entries: Vec<JournalEntry> = read_jsonl(path, "measure")?;
    match entries.first() {
        Some(JournalEntry::Header { version, digest: d }) => {
            if *version != JOURNAL_VERSION {
                return Err(input_err(path, format!("journal version {version} is not supported")));
            }
            if d != digest {
                return Err(PipelineError::Config(ConfigError::Invalid(format!(
                    "{} was written with different measurement parameters; rerun without --resume",
                    path.display()
                ))));
            }
        }
        _ => return Err(input_err(path, "journal has no header")),
    }
    Ok(entries
        .into_iter()
        .filter_map(|e| journal_key(&e).map(|k| (k, e)))
        .collect())
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CodesSummary {
    pub parse: ParseStats,
    pub merge: MergeStats,
    pub kept_locations: usize,
    pub population_threshold: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PreprocessSummary {
    pub lines: usize,
    pub malformed_lines: usize,
    pub accepted: usize,
    pub rejected: BTreeMap<String, usize>,
    pub ip_encoded: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SearchSummary {
    pub locations: usize,
    pub codes: usize,
    pub trie_nodes: usize,
    pub blacklists: BlacklistLoadStats,
    pub corpus: crate::hintsearch::CorpusStats,
}

/// Written to the measure stats file; depends only on the inputs.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MeasureSummary {
    pub domains: usize,
    pub parked: usize,
    pub categories: BTreeMap<VerdictCategory, usize>,
    pub pinpoint_measurements: usize,
}

/// What one invocation of the measure stage did.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MeasureRun {
    #[serde(flatten)]
    pub summary: MeasureSummary,
    /// Domains taken from an earlier journal.
    pub resumed: usize,
    /// Addresses pre-scanned by this invocation.
    pub prescanned: usize,
}

/// What one invocation of the search stage did.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SearchRun {
    #[serde(flatten)]
    pub summary: SearchSummary,
    pub trie_cache_hit: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvaluateSummary {
    pub sources: usize,
    pub records: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SourceContribution {
    pub hints: usize,
    pub verified: usize,
    pub falsified: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ThresholdPoint {
    pub population_threshold: u64,
    pub locations: usize,
    pub total_hints: usize,
    pub mean_hints: f64,
    pub no_match_fraction: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StatsReport {
    pub verdicts: usize,
    pub categories: BTreeMap<VerdictCategory, usize>,
    pub per_source: BTreeMap<CodeSource, SourceContribution>,
    pub sensitivity: SensitivityReport,
    pub threshold_sweep: Vec<ThresholdPoint>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub search: Option<SearchSummary>,
}

/// Hint counts per source, and how many were verified or falsified.
pub fn source_contributions(verdicts: &[DomainVerdict]) -> BTreeMap<CodeSource, SourceContribution> {
    let mut out: BTreeMap<CodeSource, SourceContribution> = BTreeMap::new();
    for h in verdicts.iter().flat_map(|v| &v.hints) {
        let e = out.entry(h.source).or_default();
        e.hints += 1;
        match h.status {
            HintStatus::Verified => e.verified += 1,
            HintStatus::Falsified => e.falsified += 1,
            _ => {}
        }
    }
    out
}

pub fn category_counts(verdicts: &[DomainVerdict]) -> BTreeMap<VerdictCategory, usize> {
    let mut out = BTreeMap::new();
    for v in verdicts {
        *out.entry(v.category).or_insert(0) += 1;
    }
    out
}

/// Hint statistics of `records` at each population threshold.
pub fn threshold_sweep(
    codes: &[RawCode],
    geo: &GeoConfig,
    min_code_len: usize,
    ordering: HintOrdering,
    blacklists: &BlacklistTexts,
    records: &[DomainRecord],
    thresholds: &[u64],
) -> Result<Vec<ThresholdPoint>> {
    let (merged, _) = merge_locations_with_stats(codes, geo);
    let mut out = Vec::new();
    for &t in thresholds {
        let geo_t = GeoConfig {
            population_threshold: t,
            ..geo.clone()
        };
        let locations = apply_population_filter(&merged, &geo_t);
        let trie = CodeTrie::build(&locations, min_code_len).map_err(|e| PipelineError::Input(e.to_string()))?;
        let table = LocationTable::new(&locations);
        let (bl, _) = blacklists.build(&table);
        let searcher = HintSearcher {
            trie: &trie,
            blacklists: &bl,
            locations: &table,
            ordering,
        };
        let stats = corpus_stats(&search_corpus(&searcher, records)).all;
        out.push(ThresholdPoint {
            population_threshold: t,
            locations: locations.len(),
            total_hints: stats.total_hints,
            mean_hints: stats.mean_hints,
            no_match_fraction: stats.no_match_fraction,
        });
    }
    Ok(out)
}

/// Runs pipeline stages against one validated configuration.
pub struct Pipeline {
    pub cfg: CampaignConfig,
    pool: rayon::ThreadPool,
}

impl Pipeline {
    pub fn new(cfg: CampaignConfig) -> Result<Self> {
        cfg.validate()?;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.max_concurrency)
            .build()
            .map_err(|e| PipelineError::Config(ConfigError::Invalid(e.to_string())))?;
        fs::create_dir_all(&cfg.output_dir).map_err(|source| PipelineError::Io {
            path: cfg.output_dir.clone(),
            source,
        })?;
        Ok(Pipeline { cfg, pool })
    }

    pub fn out(&self, name: &str) -> PathBuf {
        self.cfg.output_dir.join(name)
    }

    fn install<R: Send>(&self, f: impl FnOnce() -> R + Send) -> R {
        self.pool.install(f)
    }

    fn raw_codes(&self) -> Result<(Vec<RawCode>, ParseStats)> {
        if self.cfg.inputs.code_files.is_empty() {
            return Err(PipelineError::Config(ConfigError::Invalid(
                "inputs.code_files must list at least one code file".into(),
            )));
        }
        parse_code_files(&self.cfg.inputs.code_files).map_err(|e| PipelineError::Input(e.to_string()))
    }

    pub fn codes(&self) -> Result<CodesSummary> {
        let (raw, parse) = self.raw_codes()?;
        let (locations, merge) = self.install(|| build_locations(&raw, &self.cfg.geo));
        write_jsonl(&self.out(files::LOCATIONS), &locations)?;
        let summary = CodesSummary {
            parse,
            merge,
            kept_locations: locations.len(),
            population_threshold: self.cfg.geo.population_threshold,
        };
        write_json(&self.out(files::CODES_STATS), &summary)?;
        tracing::info!(stage = "codes", locations = summary.kept_locations, "stage complete");
        Ok(summary)
    }

    fn preprocessor(&self) -> Result<Preprocessor> {
        let i = &self.cfg.inputs;
        Ok(Preprocessor {
            tlds: match &i.tlds {
                Some(p) => TldRegistry::from_text(&read_text(p)?),
                None => TldRegistry::bundled(),
            },
            suffixes: match &i.suffix_rules {
                Some(p) => SuffixRules::from_text(&read_text(p)?),
                None => SuffixRules::bundled(),
            },
        })
    }

    pub fn preprocess(&self) -> Result<PreprocessSummary> {
        let path = require(&self.cfg.inputs.domains, "inputs.domains")?;
        let f = File::open(path).map_err(|e| input_err(path, e))?;
        let (lines, malformed) = read_corpus(f).map_err(|e| input_err(path, e))?;
        for m in &malformed {
            tracing::warn!(line = m.line, text = %m.text, "skipping malformed corpus line");
        }
        let pre = self.preprocessor()?;
        let pairs: Vec<(IpAddr, String)> = lines.into_iter().map(|l| (l.ip, l.fqdn)).collect();
        let (records, rejected) = self.install(|| preprocess_corpus(&pre, &pairs));
        write_jsonl(&self.out(files::DOMAINS), &records)?;
        write_jsonl(&self.out(files::REJECTED), &rejected)?;
        let mut reasons = BTreeMap::new();
        for r in &rejected {
            *reasons.entry(r.reason.to_string()).or_insert(0) += 1;
        }
        let summary = PreprocessSummary {
            lines: pairs.len() + malformed.len(),
            malformed_lines: malformed.len(),
            accepted: records.len(),
            rejected: reasons,
            ip_encoded: records.iter().filter(|r| r.ip_encoded).count(),
        };
        write_json(&self.out(files::PREPROCESS_STATS), &summary)?;
        tracing::info!(stage = "preprocess", accepted = summary.accepted, rejected = rejected.len(), "stage complete");
        Ok(summary)
    }

    fn blacklist_texts(&self) -> Result<BlacklistTexts> {
        let i = &self.cfg.inputs;
        let bundled = BlacklistTexts::bundled();
        Ok(BlacklistTexts {
            codes: i.code_blacklist.as_deref().map(read_text).transpose()?.unwrap_or(bundled.codes),
            words: i.word_blacklist.as_deref().map(read_text).transpose()?.unwrap_or(bundled.words),
            code_locations: i
                .code_location_blacklist
                .as_deref()
                .map(read_text)
                .transpose()?
                .unwrap_or(bundled.code_locations),
        })
    }

    fn load_trie(&self, locations: &[Location], loc_bytes: &[u8]) -> Result<(CodeTrie, bool)> {
        let min_len = self.cfg.search.min_code_len;
        let key = cache_key(loc_bytes, min_len);
        let cache = self.out(files::TRIE_CACHE);
        if let Ok(f) = File::open(&cache) {
            match CodeTrie::read_cache(BufReader::new(f), &key) {
                Ok(Some(t)) => return Ok((t, true)),
                Ok(None) => tracing::info!("trie cache is stale; rebuilding"),
                Err(e) => tracing::warn!(error = %e, "trie cache unreadable; rebuilding"),
            }
        }
        let trie = CodeTrie::build(locations, min_len).map_err(|e| PipelineError::Input(e.to_string()))?;
        write_file(&cache, |w| trie.write_cache(w, &key))?;
        Ok((trie, false))
    }

    pub fn search(&self) -> Result<SearchRun> {
        let loc_path = self.out(files::LOCATIONS);
        let mut loc_bytes = Vec::new();
        io::Read::read_to_end(&mut open_stage_output(&loc_path, "codes")?, &mut loc_bytes)
            .map_err(|e| input_err(&loc_path, e))?;
        let locations = crate::geodata::read_locations(&loc_bytes[..]).map_err(|e| input_err(&loc_path, e))?;
        let records: Vec<DomainRecord> = read_jsonl(&self.out(files::DOMAINS), "preprocess")?;
        let (trie, hit) = self.load_trie(&locations, &loc_bytes)?;
        let table = LocationTable::new(&locations);
        let (blacklists, bl_stats) = self.blacklist_texts()?.build(&table);
        if !bl_stats.unresolved_locations.is_empty() {
            tracing::info!(
                unresolved = bl_stats.unresolved_locations.len(),
                "code-location blacklist entries naming no known location were skipped"
            );
        }
        let searcher = HintSearcher {
            trie: &trie,
            blacklists: &blacklists,
            locations: &table,
            ordering: self.cfg.search.ordering,
        };
        let found = self.install(|| search_corpus(&searcher, &records));
        let hints: Vec<LocationHint> = found.iter().flat_map(|d| d.hints.iter().cloned()).collect();
        write_file(&self.out(files::HINTS), |w| write_hints(w, &hints))?;
        let summary = SearchSummary {
            locations: locations.len(),
            codes: trie.code_count(),
            trie_nodes: trie.node_count(),
            blacklists: bl_stats,
            corpus: corpus_stats(&found),
        };
        write_json(&self.out(files::SEARCH_STATS), &summary)?;
        tracing::info!(stage = "search", hints = hints.len(), domains = records.len(), trie_cache_hit = hit, "stage complete");
        Ok(SearchRun {
            summary,
            trie_cache_hit: hit,
        })
    }

    fn load_probes(&self) -> Result<Option<Vec<Probe>>> {
        let Some(p) = &self.cfg.inputs.probes else {
            return Ok(None);
        };
        let f = File::open(p).map_err(|e| input_err(p, e))?;
        read_probes(f).map(Some).map_err(|e| input_err(p, e))
    }

    fn load_vantages(&self) -> Result<Vec<Vantage>> {
        match &self.cfg.inputs.vantages {
            Some(p) => {
                let f = File::open(p).map_err(|e| input_err(p, e))?;
                read_vantages(f).map_err(|e| input_err(p, e))
            }
            None => Ok(Vantage::default_set()),
        }
    }

    fn replay(&self, path: &Path, probes: &[Probe], vantages: &[Vantage]) -> Result<ReplayBackend> {
        let f = File::open(path).map_err(|e| input_err(path, e))?;
        let records = read_recorded_results(f).map_err(|e| input_err(path, e))?;
        Ok(ReplayBackend::new(records, probes, vantages))
    }

    fn domain_states(&self) -> Result<Vec<DomainState>> {
        let records: Vec<DomainRecord> = read_jsonl(&self.out(files::DOMAINS), "preprocess")?;
        let hints_path = self.out(files::HINTS);
        let groups = read_hint_groups(open_stage_output(&hints_path, "search")?).map_err(|e| input_err(&hints_path, e))?;
        let mut by_key: HashMap<(IpAddr, String), Vec<LocationHint>> = HashMap::new();
        for g in groups {
            let key = (g[0].ip, g[0].domain.clone());
            by_key.entry(key).or_default().extend(g);
        }
        let mut seen = HashSet::new();
        Ok(records
            .into_iter()
            .filter(|r| seen.insert((r.ip, r.fqdn.clone())))
            .map(|r| {
                let hints = by_key.remove(&(r.ip, r.fqdn.clone())).unwrap_or_default();
                DomainState::new(r.ip, r.fqdn, hints)
            })
            .collect())
    }

    pub fn measure(&self, resume: bool) -> Result<MeasureRun> {
        let states = self.domain_states()?;
        let digest = self.cfg.measurement_digest();
        let journal_path = self.out(files::CAMPAIGN_STATE);
        let mut previous = if resume && journal_path.exists() {
            read_journal(&journal_path, &digest)?
        } else {
            HashMap::new()
        };

        let vantages = self.load_vantages()?;
        let probes_file = self.load_probes()?;
        let b = &self.cfg.backend;
        let kind = b.kind;
        let mut remote_probes = None;
        let main: Box<dyn MeasurementBackend> = match kind {
            BackendKind::Sim => {
                let path = require(&b.world, "backend.world")?;
                let mut world: SimWorldFile =
                    serde_json::from_str(&read_text(path)?).map_err(|e| input_err(path, e))?;
                world.seed = self.cfg.seed;
                let probes = probes_file.as_deref().ok_or_else(|| {
                    PipelineError::Config(ConfigError::Invalid("inputs.probes must be set for the sim backend".into()))
                })?;
                Box::new(SimWorld::new(world, probes, &vantages))
            }
            BackendKind::File => {
                let path = require(&b.recorded, "backend.recorded")?;
                let probes = probes_file.as_deref().ok_or_else(|| {
                    PipelineError::Config(ConfigError::Invalid("inputs.probes must be set for the file backend".into()))
                })?;
                Box::new(self.replay(path, probes, &vantages)?)
            }
            BackendKind::Remote => {
                let mut rc = b.remote.clone();
                if rc.api_key.is_none() {
                    rc.api_key = std::env::var(&b.api_key_env).ok();
                }
                let backend = RemoteBackend::with_ureq(rc);
                if probes_file.is_none() {
                    let listed = backend
                        .list_probes()
                        .map_err(|e| PipelineError::Backend(format!("cannot list probes: {e}")))?;
                    remote_probes = Some(listed);
                }
                Box::new(backend)
            }
        };
        let probes: Vec<Probe> = probes_file.or(remote_probes).unwrap_or_default();
        let main = Budgeted::new(main, b.measurement_budget.unwrap_or(u64::MAX));
        let prescan_replay = match (kind, &b.prescan_recorded) {
            (BackendKind::Remote, Some(p)) => Some(self.replay(p, &probes, &vantages)?),
            _ => None,
        };
        let prescan_backend: Option<&dyn MeasurementBackend> = match kind {
            BackendKind::Remote => prescan_replay.as_ref().map(|r| r as &dyn MeasurementBackend),
            _ => Some(&main),
        };
        if prescan_backend.is_none() {
            tracing::warn!("no pre-scan source for the remote backend; skipping pre-scan");
        }
        let campaign = Campaign {
            backend: &main,
            prescan_backend,
            probes: &probes,
            vantages: &vantages,
            cfg: &self.cfg.validation,
            packets: b.packets,
        };

        let mut done: Vec<DomainVerdict> = Vec::new();
        let mut todo: Vec<DomainState> = Vec::new();
        let mut resumed = 0;
        for st in states.iter() {
            match previous.remove(&(st.ip, st.fqdn.clone())) {
                Some(JournalEntry::Done { verdict }) => {
                    resumed += 1;
                    done.push(*verdict);
                }
                Some(JournalEntry::Parked { state, .. }) => {
                    resumed += 1;
                    todo.push(*state);
                }
                _ => todo.push(st.clone()),
            }
        }

        let prescan_path = self.out(files::PRESCAN);
        let mut prescans: BTreeMap<IpAddr, PrescanRecord> = BTreeMap::new();
        if resume && prescan_path.exists() {
            for r in read_jsonl::<PrescanRecord>(&prescan_path, "measure")? {
                prescans.insert(r.ip, r);
            }
        }
        let missing: Vec<DomainState> = todo
            .iter()
            .filter(|s| !s.prescan_applied && !prescans.contains_key(&s.ip))
            .cloned()
            .collect();
        let fresh = self.install(|| campaign.prescan_targets(&missing));
        let prescanned = fresh.len();
        prescans.extend(fresh);
        let complete: Vec<&PrescanRecord> = prescans.values().filter(|r| !r.incomplete).collect();
        write_jsonl(&prescan_path, &complete)?;

        let appending = resume && journal_path.exists();
        let journal_io = |source| PipelineError::Io {
            path: journal_path.clone(),
            source,
        };
        let journal = if appending {
            fs::OpenOptions::new().append(true).open(&journal_path)
        } else {
            File::create(&journal_path)
        }
        .map_err(journal_io)?;
        let journal = Mutex::new(BufWriter::new(journal));
        if !appending {
            let header = JournalEntry::Header {
                version: JOURNAL_VERSION,
                digest: digest.clone(),
            };
            append_journal(&journal, &header).map_err(journal_io)?;
        }
        let journal_failed = Mutex::new(None);
        let outcome = self.install(|| {
            campaign.run_with(todo, &prescans, |step| {
                let entry = match step {
                    ValidationStep::Done(v) => JournalEntry::Done { verdict: v.clone() },
                    ValidationStep::Parked(s, e) => JournalEntry::Parked {
                        state: s.clone(),
                        reason: e.to_string(),
                    },
                };
                if let Err(e) = append_journal(&journal, &entry) {
                    journal_failed.lock().expect("journal error lock").get_or_insert(e);
                }
            })
        });
        if let Some(source) = journal_failed.into_inner().expect("journal error lock") {
            return Err(PipelineError::Io {
                path: journal_path,
                source,
            });
        }
        drop(journal);

        let pinpoint: usize = outcome.verdicts.iter().chain(done.iter()).map(|v| v.measurements).sum();
        done.extend(outcome.verdicts);
        sort_verdicts(&mut done);
        let summary = MeasureSummary {
            domains: states.len(),
            parked: outcome.parked.len(),
            categories: category_counts(&done),
            pinpoint_measurements: pinpoint,
        };
        write_json(&self.out(files::MEASURE_STATS), &summary)?;
        if !outcome.parked.is_empty() {
            let reason = outcome.parked[0].1.clone();
            tracing::warn!(stage = "measure", parked = outcome.parked.len(), %reason, "campaign parked");
            return Err(PipelineError::Incomplete {
                parked: outcome.parked.len(),
                reason,
            });
        }
        write_jsonl(&self.out(files::VERDICTS), &done)?;
        let mut compact = vec![JournalEntry::Header {
            version: JOURNAL_VERSION,
            digest,
        }];
        compact.extend(done.into_iter().map(|v| JournalEntry::Done { verdict: Box::new(v) }));
        write_jsonl(&journal_path, &compact)?;
        tracing::info!(stage = "measure", domains = summary.domains, measurements = pinpoint, "stage complete");
        Ok(MeasureRun {
            summary,
            resumed,
            prescanned,
        })
    }

    pub fn read_verdicts(&self) -> Result<Vec<DomainVerdict>> {
        read_jsonl(&self.out(files::VERDICTS), "measure")
    }

    pub fn evaluate(&self) -> Result<EvaluateSummary> {
        let verdicts = self.read_verdicts()?;
        let mut records: Vec<EvaluationRecord> = Vec::new();
        for (source, path) in &self.cfg.inputs.answers {
            let f = File::open(path).map_err(|e| input_err(path, e))?;
            let answers = read_answers(source, f).map_err(|e| input_err(path, e))?;
            records.extend(classify_all(
                &answers,
                &verdicts,
                &self.cfg.validation,
                self.cfg.evaluation.same_radius_km,
            ));
        }
        write_jsonl(&self.out(files::EVALUATION), &records)?;
        let report = evaluation_report(&records, self.cfg.evaluation.same_radius_km);
        write_file(&self.out(files::EVALUATION_SUMMARY), |w| write_summary_csv(w, &report.summary))?;
        write_json(&self.out(files::EVALUATION_REPORT), &report)?;
        tracing::info!(stage = "evaluate", records = records.len(), "stage complete");
        Ok(EvaluateSummary {
            sources: self.cfg.inputs.answers.len(),
            records: records.len(),
        })
    }

    pub fn stats(&self) -> Result<StatsReport> {
        let verdicts = self.read_verdicts()?;
        let search_path = self.out(files::SEARCH_STATS);
        let search = match fs::read_to_string(&search_path) {
            Ok(t) => Some(serde_json::from_str(&t).map_err(|e| input_err(&search_path, e))?),
            Err(_) => None,
        };
        let threshold_sweep = if self.cfg.stats.thresholds.is_empty() || self.cfg.inputs.code_files.is_empty() {
            Vec::new()
        } else {
            let (raw, _) = self.raw_codes()?;
            let records: Vec<DomainRecord> = read_jsonl(&self.out(files::DOMAINS), "preprocess")?;
            let texts = self.blacklist_texts()?;
            self.install(|| {
                threshold_sweep(
                    &raw,
                    &self.cfg.geo,
                    self.cfg.search.min_code_len,
                    self.cfg.search.ordering,
                    &texts,
                    &records,
                    &self.cfg.stats.thresholds,
                )
            })?
        };
        let report = StatsReport {
            verdicts: verdicts.len(),
            categories: category_counts(&verdicts),
            per_source: source_contributions(&verdicts),
            sensitivity: sensitivity_report(&verdicts),
            threshold_sweep,
            search,
        };
        write_json(&self.out(files::STATS_REPORT), &report)?;
        tracing::info!(stage = "stats", verdicts = report.verdicts, "stage complete");
        Ok(report)
    }

    /// codes, preprocess, search, measure, evaluate and stats in order.
    pub fn run_all(&self, resume: bool) -> Result<StatsReport> {
        self.codes()?;
        self.preprocess()?;
        self.search()?;
        self.measure(resume)?;
        self.evaluate()?;
        self.stats()
    }
}

fn append_journal(journal: &Mutex<BufWriter<File>>, entry: &JournalEntry) -> io::Result<()> {
    let mut line = serde_json::to_vec(entry)?;
    line.push(b'\n');
    let mut w = journal.lock().expect("journal lock");
    w.write_all(&line)?;
    w.flush()
}
