//! End-to-end acceptance criteria. Every criterion prints one PASS/FAIL
//! line; the test fails if any criterion fails.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::net::IpAddr;
use std::path::{Path, PathBuf};
use std::time::Instant;

use hloc_core::codetrie::CodeTrie;
use hloc_core::config::CampaignConfig;
use hloc_core::domainprep::{Blacklists, Preprocessor};
use hloc_core::evaluate::{classify, EvalCategory, ExternalAnswer};
use hloc_core::geo::Coord;
use hloc_core::geodata::{CodeSource, GeoConfig, Location, LocationCode, LocationId, LocationTable};
use hloc_core::hintsearch::{DomainHints, HintOrdering, HintSearcher, HintStatus};
use hloc_core::measure::{prescan, Origin, OriginKind, Probe, Vantage};
use hloc_core::pipeline::{build_locations, files, preprocess_corpus, search_corpus, BlacklistTexts, Campaign, Pipeline, PipelineError};
use hloc_core::simulate::{Scenario, ScenarioParams};
use hloc_core::verdict::{
    falsify_by_prescan, max_error_km, verify_hint, DomainState, DomainVerdict, Evidence, EvidenceOutcome,
    EvidenceStage, Inconclusive, PinpointOutcome, Tallies, ValidationConfig, VerdictCategory,
};
use proptest::prelude::*;
use proptest::test_runner::{Config as PtConfig, TestRunner};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

/// Speed of light in fiber, km per ms, computed independently.
const ORACLE_KM_PER_MS: f64 = 299_792.458 * (2.0 / 3.0) / 1000.0;

/// Great-circle distance via the chord length, independent of the
/// library's haversine.
fn oracle_km(a: Coord, b: Coord) -> f64 {
    let v = |c: Coord| {
        let (la, lo) = (c.lat().to_radians(), c.lon().to_radians());
        [la.cos() * lo.cos(), la.cos() * lo.sin(), la.sin()]
    };
    let (p, q) = (v(a), v(b));
    let chord = ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2)).sqrt();
    2.0 * 6371.0 * (chord / 2.0).min(1.0).asin()
}

fn c(lat: f64, lon: f64) -> Coord {
    Coord::new(lat, lon).unwrap()
}

fn location(id: u32, name: &str, at: Coord, codes: &[(&str, CodeSource)]) -> Location {
    Location {
        id: LocationId(id),
        name: name.into(),
        lat: at.lat(),
        lon: at.lon(),
        population: 1_000_000,
        codes: codes
            .iter()
            .map(|(code, source)| LocationCode {
                code: code.to_string(),
                source: *source,
            })
            .collect(),
    }
}

fn c1_constants() -> Outcome {
    let cfg = ValidationConfig::default();
    let me = max_error_km(1000.0, &cfg);
    let a_km = cfg.a_km();
    let oracle_a = 9.0 * ORACLE_KM_PER_MS / 2.0;
    let ok = (me - 2899.4).abs() <= 0.5
        && (a_km - 899.4).abs() <= 0.5
        && (me - (2000.0 + oracle_a)).abs() < 1e-9
        && (a_km - oracle_a).abs() < 1e-9;
    let msg = format!("max_error_km(1000) = {me:.3} km, a_km = {a_km:.3} km");
    if ok {
        Ok(msg)
    } else {
        Err(msg)
    }
}

type MatchKey = (usize, String, LocationId, CodeSource);

fn naive_matches(label: &str, locations: &[Location], min_len: usize) -> Vec<MatchKey> {
    let mut out = Vec::new();
    for loc in locations {
        for lc in &loc.codes {
            if lc.code.len() < min_len {
                continue;
            }
            for start in 0..label.len() {
                if label[start..].starts_with(lc.code.as_str()) {
                    out.push((start, lc.code.clone(), loc.id, lc.source));
                }
            }
        }
    }
    out.sort();
    out
}

fn trie_matches(trie: &CodeTrie, label: &str) -> Vec<MatchKey> {
    let mut out: Vec<MatchKey> = trie
        .search_label(label, 0)
        .into_iter()
        .map(|m| (m.char_offset, m.code, m.location, m.source))
        .collect();
    out.sort();
    out
}

fn c2_trie_fidelity() -> Outcome {
    let munich = c(48.1372, 11.5755);
    let set = vec![
        location(0, "Munich", munich, &[("mun", CodeSource::Iata), ("munich", CodeSource::Geonames), ("munchen", CodeSource::Geonames)]),
        location(1, "Munich airport", c(48.3538, 11.7861), &[("munic", CodeSource::Unlocode), ("munchh", CodeSource::Clli)]),
        location(2, "Municipal", c(10.0, 10.0), &[("munici", CodeSource::Geonames), ("munc", CodeSource::Icao)]),
        location(3, "Uni", c(20.0, 20.0), &[("uni", CodeSource::Iata)]),
        location(4, "Nic", c(30.0, 30.0), &[("nic", CodeSource::Iata), ("nich", CodeSource::Geonames)]),
    ];
    let trie = CodeTrie::build(&set, 3).map_err(|e| e.to_string())?;
    let got = trie_matches(&trie, "munich");
    if got != naive_matches("munich", &set, 3) {
        return Err(format!("munich: trie {got:?} differs from oracle"));
    }
    let codes: BTreeSet<&str> = got.iter().map(|m| m.1.as_str()).collect();
    for want in ["mun", "munic", "munich", "uni", "nic"] {
        if !codes.contains(want) {
            return Err(format!("munich: missing {want}"));
        }
    }

    let mut runner = TestRunner::new(PtConfig {
        cases: 1000,
        failure_persistence: None,
        ..PtConfig::default()
    });
    let codes = prop::collection::btree_set(("[abc]{1,6}", 0usize..6), 1..30);
    let labels = prop::collection::vec("[abc-]{0,14}", 1..6);
    let result = runner.run(&(codes, labels, 1usize..4), |(codes, labels, min_len)| {
        let locations: Vec<Location> = codes
            .iter()
            .enumerate()
            .map(|(i, (code, s))| location(i as u32, "x", c(0.0, 0.0), &[(code.as_str(), CodeSource::ALL[*s])]))
            .collect();
        let trie = CodeTrie::build(&locations, min_len).map_err(|e| TestCaseError::fail(e.to_string()))?;
        for label in &labels {
            prop_assert_eq!(trie_matches(&trie, label), naive_matches(label, &locations, min_len));
        }
        Ok(())
    });
    match result {
        Ok(()) => Ok("munich matches oracle; 1000 random corpora, 0 mismatches".into()),
        Err(e) => Err(format!("property failure: {e}")),
    }
}

fn c3_reference_names() -> Outcome {
    let cities = [
        ("Houston", c(29.7604, -95.3698), "hstntx", CodeSource::Clli),
        ("Miami", c(25.7617, -80.1918), "miamfl", CodeSource::Clli),
        ("Melbourne", c(-37.8136, 144.9631), "mel", CodeSource::Iata),
        ("New York", c(40.7128, -74.0060), "nyc", CodeSource::Iata),
    ];
    let locations: Vec<Location> = cities
        .iter()
        .enumerate()
        .map(|(i, (name, at, code, src))| location(i as u32, name, *at, &[(code, *src)]))
        .collect();
    let trie = CodeTrie::build(&locations, 3).map_err(|e| e.to_string())?;
    let table = LocationTable::new(&locations);
    let (blacklists, _) = Blacklists::bundled(&table);
    let searcher = HintSearcher {
        trie: &trie,
        blacklists: &blacklists,
        locations: &table,
        ordering: HintOrdering::LongestFirst,
    };
    let pre = Preprocessor::bundled();
    let ip: IpAddr = "1.2.3.4".parse().unwrap();
    let cases = [
        ("1-2-3-4.lightspeed.hstntx.sbcglobal.net", 0, 3.5),
        ("1-2-3-4.lightspeed.miamfl.sbcglobal.net", 1, 4.2),
        ("ip-1-2-3-4.mel.xi.com.au", 2, 6.0),
        ("rrcs-1-2-3-4.nyc.biz.rr.co", 3, 3.7),
    ];
    let cfg = ValidationConfig::default();
    let mut notes = Vec::new();
    for (name, idx, rtt) in cases {
        let rec = pre.prepare(ip, name).map_err(|e| format!("{name}: rejected {:?}", e.reason))?;
        let hints = searcher.find_hints(&rec).hints;
        let Some(hint) = hints.iter().find(|h| h.location_id == LocationId(idx)) else {
            return Err(format!("{name}: no hint for {}", cities[idx as usize].0));
        };
        let probe = hint.coord();
        match verify_hint(hint.coord(), probe, Some(rtt), &cfg) {
            PinpointOutcome::Verified { .. } => notes.push(format!("{} {rtt}ms", hint.code)),
            other => return Err(format!("{name}: {other:?}")),
        }
    }
    Ok(format!("all four verified ({})", notes.join(", ")))
}

struct SimRun {
    scenario: Scenario,
    hints: Vec<DomainHints>,
    verdicts: Vec<DomainVerdict>,
}

fn searcher_parts(locations: &[Location]) -> (CodeTrie, LocationTable) {
    (CodeTrie::build(locations, 3).unwrap(), LocationTable::new(locations))
}

fn search_scenario(scenario: &Scenario, geo: &GeoConfig, bl: &BlacklistTexts) -> Vec<DomainHints> {
    let (locations, _) = build_locations(&scenario.raw_codes(), geo);
    let (trie, table) = searcher_parts(&locations);
    let (blacklists, _) = bl.build(&table);
    let searcher = HintSearcher {
        trie: &trie,
        blacklists: &blacklists,
        locations: &table,
        ordering: HintOrdering::LongestFirst,
    };
    let (records, _) = preprocess_corpus(&Preprocessor::bundled(), &scenario.corpus());
    search_corpus(&searcher, &records)
}

fn validate(scenario: &Scenario, hints: &[DomainHints], cfg: &ValidationConfig) -> Vec<DomainVerdict> {
    let world = scenario.sim_world();
    let campaign = Campaign {
        backend: &world,
        prescan_backend: Some(&world),
        probes: &scenario.probes,
        vantages: &scenario.vantages,
        cfg,
        packets: 1,
    };
    let out = campaign.run(hints.iter().map(DomainState::from).collect());
    assert!(out.parked.is_empty());
    out.verdicts
}

fn sim_run(params: ScenarioParams, cfg: &ValidationConfig) -> SimRun {
    let scenario = Scenario::generate(params);
    let hints = search_scenario(&scenario, &GeoConfig::default(), &BlacklistTexts::bundled());
    let verdicts = validate(&scenario, &hints, cfg);
    SimRun {
        scenario,
        hints,
        verdicts,
    }
}

fn nearest_active_probe_km(probes: &[Probe], at: Coord) -> f64 {
    probes
        .iter()
        .filter(|p| p.active)
        .map(|p| oracle_km(c(p.lat, p.lon), at))
        .fold(f64::INFINITY, f64::min)
}

fn c4_sim_soundness() -> Outcome {
    let cfg = ValidationConfig::default();
    let bound = 2.0 * cfg.x_km + 9.0 * ORACLE_KM_PER_MS / 2.0;
    let mut too_far = 0usize;
    let mut verified_total = 0usize;
    let (mut eligible, mut eligible_verified) = (0usize, 0usize);
    let mut buffers = Vec::new();
    for seed in 1..=10 {
        let run = sim_run(ScenarioParams::desk(seed), &cfg);
        let truth = run.scenario.truth_map();
        let responsive: HashMap<IpAddr, bool> = run.scenario.routers.iter().map(|r| (r.ip, r.responsive)).collect();
        for v in &run.verdicts {
            let t = truth[&v.ip];
            if let Some(d) = &v.verified {
                verified_total += 1;
                buffers.push(d.buffer_used_ms);
                let err = oracle_km(c(d.lat, d.lon), t);
                if err > bound || err > v.max_error_km.unwrap_or(f64::NEG_INFINITY) + 1e-6 {
                    too_far += 1;
                }
            }
        }
        let by_ip: HashMap<IpAddr, &DomainVerdict> = run.verdicts.iter().map(|v| (v.ip, v)).collect();
        for d in &run.hints {
            let t = truth[&d.ip];
            let has_true = d.hints.iter().any(|h| oracle_km(h.coord(), t) < 1.0);
            if has_true && responsive[&d.ip] && nearest_active_probe_km(&run.scenario.probes, t) <= 100.0 {
                eligible += 1;
                if by_ip[&d.ip].category == VerdictCategory::Verified {
                    eligible_verified += 1;
                }
            }
        }
    }
    let share = eligible_verified as f64 / eligible.max(1) as f64;
    let bins = 9;
    let mut hist = vec![0usize; bins];
    for b in &buffers {
        let i = ((b / 9.0) * bins as f64).floor().clamp(0.0, (bins - 1) as f64) as usize;
        hist[i] += 1;
    }
    let expected = buffers.len() as f64 / bins as f64;
    let uniform = hist.iter().all(|&n| (n as f64) <= 3.0 * expected && (n as f64) >= expected / 3.0);
    let msg = format!(
        "{verified_total} verified, {too_far} beyond max error; {eligible_verified}/{eligible} eligible verified ({:.1}%); buffer histogram {hist:?}",
        share * 100.0
    );
    if too_far == 0 && share >= 0.95 && uniform && eligible > 0 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn c5_hemisphere_exclusion() -> Outcome {
    let cfg = ValidationConfig::default();
    let (mut planted, mut removed, mut near_removed, mut near_total) = (0usize, 0usize, 0usize, 0usize);
    for seed in 1..=10 {
        let scenario = Scenario::generate(ScenarioParams::desk(seed));
        let vantages = vec![
            Vantage::new("dallas", 32.7767, -96.7970),
            Vantage::new("frankfurt", 50.1109, 8.6821),
            Vantage::new("singapore", 1.3521, 103.8198),
        ];
        let world = hloc_core::measure::SimWorld::new(scenario.world.clone(), &scenario.probes, &vantages);
        let hints = search_scenario(&scenario, &GeoConfig::default(), &BlacklistTexts::bundled());
        let targets: Vec<IpAddr> = hints.iter().map(|d| d.ip).collect();
        let scans = prescan(&world, &vantages, &targets, 1);
        let routers: HashMap<IpAddr, _> = scenario.routers.iter().map(|r| (r.ip, r)).collect();
        for d in &hints {
            let r = routers[&d.ip];
            let truth = scenario.cities[r.city].coord;
            let mut hs = d.hints.clone();
            falsify_by_prescan(&mut hs, &scans[&d.ip].results, &cfg);
            for h in &hs {
                let gone = h.status == HintStatus::Falsified;
                if oracle_km(h.coord(), truth) <= 200.0 {
                    near_total += 1;
                    near_removed += gone as usize;
                }
                if let Some(decoy) = r.decoy {
                    if oracle_km(h.coord(), scenario.cities[decoy].coord) < 1.0 {
                        planted += 1;
                        removed += gone as usize;
                    }
                }
            }
        }
    }
    let share = removed as f64 / planted.max(1) as f64;
    let msg = format!(
        "{removed}/{planted} planted decoys removed ({:.1}%); {near_removed}/{near_total} hints within 200 km of truth removed",
        share * 100.0
    );
    if share >= 0.6 && near_removed == 0 && planted > 0 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

/// Label from brute-force disc checks over the raw evidence.
fn oracle_label(answer: Option<Coord>, v: &DomainVerdict, cfg: &ValidationConfig, same_km: f64) -> EvalCategory {
    let Some(at) = answer else {
        return EvalCategory::NoData;
    };
    if matches!(v.category, VerdictCategory::Unresponsive | VerdictCategory::Filtered) {
        return EvalCategory::NotApplicable;
    }
    let outside_some_disc = v.evidence.iter().any(|e| {
        let measured = !matches!(e.outcome, EvidenceOutcome::Error { .. });
        match e.rtt_ms {
            Some(rtt) if measured && rtt >= cfg.rtt_floor_ms => {
                oracle_km(c(e.origin.lat, e.origin.lon), at) > rtt / 2.0 * ORACLE_KM_PER_MS
            }
            _ => false,
        }
    });
    if outside_some_disc {
        return EvalCategory::Wrong;
    }
    match &v.verified {
        Some(d) if v.category == VerdictCategory::Verified && oracle_km(c(d.lat, d.lon), at) <= same_km => EvalCategory::Same,
        _ => EvalCategory::Possible,
    }
}

fn ev(stage: EvidenceStage, at: Coord, rtt: Option<f64>, outcome: EvidenceOutcome) -> Evidence {
    Evidence {
        stage,
        hint: None,
        origin: Origin {
            id: format!("o{:.2}", at.lat()),
            kind: OriginKind::Probe,
            lat: at.lat(),
            lon: at.lon(),
        },
        rtt_ms: rtt,
        timestamp: 0,
        outcome,
    }
}

/// `km` due north of `from`, along the meridian.
fn north(from: Coord, km: f64) -> Coord {
    c(from.lat() + km / (6371.0 * std::f64::consts::PI / 180.0), from.lon())
}

fn c6_classification() -> Outcome {
    use EvalCategory::*;
    let cfg = ValidationConfig::default();
    let fra = c(50.1109, 8.6821);
    let dal = c(32.7767, -96.7970);
    let sin = c(1.3521, 103.8198);
    let pre = |at, rtt| ev(EvidenceStage::Prescan, at, Some(rtt), EvidenceOutcome::Prescan { falsified: 0 });
    let pin = |at, rtt, o| ev(EvidenceStage::Pinpoint, at, Some(rtt), EvidenceOutcome::Pinpoint(o));
    let verdict = |cat: VerdictCategory, verified: Option<Coord>, evidence: Vec<Evidence>| DomainVerdict {
        ip: "192.0.2.1".parse().unwrap(),
        fqdn: "x.example.net".into(),
        category: cat,
        verified: verified.map(|v| hloc_core::verdict::VerifiedDetail {
            location_id: LocationId(0),
            location_name: "v".into(),
            lat: v.lat(),
            lon: v.lon(),
            code: "fra".into(),
            probe_id: "p".into(),
            probe_distance_km: 10.0,
            rtt_ms: 2.0,
            buffer_used_ms: 1.9,
        }),
        max_error_km: verified.map(|_| 919.4),
        tallies: Tallies::default(),
        measurements: 1,
        hints: vec![],
        evidence,
    };
    let verified_ev = || {
        vec![
            pre(fra, 3.0),
            pin(north(fra, 10.0), 2.0, PinpointOutcome::Verified { buffer_used_ms: 1.9 }),
        ]
    };
    let falsified_ev = || {
        vec![
            pre(dal, 20.0),
            pin(fra, 100.0, PinpointOutcome::Falsified),
        ]
    };
    let nvh_ev = || {
        vec![
            pin(sin, 15.0, PinpointOutcome::Inconclusive(Inconclusive::LatencyTooHigh { excess_ms: 5.0 })),
            ev(EvidenceStage::Pinpoint, fra, Some(1.0), EvidenceOutcome::Error { message: "x".into() }),
            pin(dal, 0.05, PinpointOutcome::Inconclusive(Inconclusive::Suspect)),
        ]
    };
    let timeouts = || vec![ev(EvidenceStage::Prescan, dal, None, EvidenceOutcome::Prescan { falsified: 0 })];
    let v = VerdictCategory::Verified;
    let af = VerdictCategory::AllFalsified;
    let nv = VerdictCategory::NoVerifiedHint;
    let un = VerdictCategory::Unresponsive;
    let fi = VerdictCategory::Filtered;
    let s = |km| Some(north(fra, km));
    let cases: Vec<(DomainVerdict, Option<Coord>, EvalCategory)> = vec![
        (verdict(v, Some(fra), verified_ev()), s(0.0), Same),
        (verdict(v, Some(fra), verified_ev()), s(50.0), Same),
        (verdict(v, Some(fra), verified_ev()), s(99.0), Same),
        (verdict(v, Some(fra), verified_ev()), s(101.0), Possible),
        (verdict(v, Some(fra), verified_ev()), s(150.0), Possible),
        (verdict(v, Some(fra), verified_ev()), s(205.0), Possible),
        (verdict(v, Some(fra), verified_ev()), s(-195.0), Wrong),
        (verdict(v, Some(fra), verified_ev()), s(400.0), Wrong),
        (verdict(v, Some(fra), verified_ev()), Some(dal), Wrong),
        (verdict(v, Some(fra), verified_ev()), None, NoData),
        (verdict(af, None, falsified_ev()), Some(dal), Possible),
        (verdict(af, None, falsified_ev()), Some(north(dal, 1500.0)), Possible),
        (verdict(af, None, falsified_ev()), Some(north(dal, 2100.0)), Wrong),
        (verdict(af, None, falsified_ev()), Some(fra), Wrong),
        (verdict(af, None, falsified_ev()), Some(north(dal, -50.0)), Possible),
        (verdict(af, None, falsified_ev()), None, NoData),
        (verdict(af, None, vec![pre(dal, 20.0)]), Some(north(dal, 1990.0)), Possible),
        (verdict(af, None, vec![pre(dal, 20.0)]), Some(north(dal, 2010.0)), Wrong),
        (verdict(nv, None, nvh_ev()), Some(sin), Possible),
        (verdict(nv, None, nvh_ev()), Some(north(sin, 1400.0)), Possible),
        (verdict(nv, None, nvh_ev()), Some(north(sin, 1600.0)), Wrong),
        (verdict(nv, None, nvh_ev()), Some(fra), Wrong),
        (verdict(nv, None, vec![]), Some(fra), Possible),
        (verdict(nv, None, nvh_ev()), None, NoData),
        (verdict(un, None, timeouts()), Some(dal), NotApplicable),
        (verdict(un, None, timeouts()), Some(fra), NotApplicable),
        (verdict(un, None, timeouts()), None, NoData),
        (verdict(fi, None, vec![]), Some(fra), NotApplicable),
        (verdict(fi, None, vec![]), Some(sin), NotApplicable),
        (verdict(fi, None, vec![]), None, NoData),
    ];
    let mut mismatches = Vec::new();
    for (i, (verdict, at, hand)) in cases.iter().enumerate() {
        let answer = ExternalAnswer {
            ip: verdict.ip,
            source: "db".into(),
            coord: *at,
            city: String::new(),
        };
        let got = classify(&answer, verdict, &cfg, 100.0).category;
        let brute = oracle_label(*at, verdict, &cfg, 100.0);
        if got != *hand || brute != *hand {
            mismatches.push(format!("#{i}: classify {got:?}, oracle {brute:?}, hand {hand:?}"));
        }
        if got == Same && verdict.category != v {
            mismatches.push(format!("#{i}: SAME under {:?}", verdict.category));
        }
        if verdict.category == af && !matches!(got, Possible | Wrong | NoData) {
            mismatches.push(format!("#{i}: ALL_FALSIFIED yielded {got:?}"));
        }
    }
    if mismatches.is_empty() {
        Ok(format!("{} records match the manual labeling", cases.len()))
    } else {
        Err(mismatches.join("; "))
    }
}

fn hint_keys(d: &DomainHints) -> BTreeSet<(LocationId, String)> {
    d.hints.iter().map(|h| (h.location_id, h.code.clone())).collect()
}

fn verified_ips(v: &[DomainVerdict]) -> BTreeSet<IpAddr> {
    v.iter().filter(|v| v.category == VerdictCategory::Verified).map(|v| v.ip).collect()
}

fn small(seed: u64) -> ScenarioParams {
    ScenarioParams {
        routers: 120,
        probes: 60,
        cities: 40,
        ..ScenarioParams::desk(seed)
    }
}

fn c7_monotonicity() -> Outcome {
    let mut runner = TestRunner::new(PtConfig {
        cases: 48,
        failure_persistence: None,
        ..PtConfig::default()
    });
    let population = runner.run(&(0u64..10_000, 0u64..3_000_000, 0u64..3_000_000), |(seed, t1, t2)| {
        let (lo, hi) = (t1.min(t2), t1.max(t2));
        let scenario = Scenario::generate(small(seed));
        let bl = BlacklistTexts::bundled();
        let at = |t| {
            let geo = GeoConfig {
                population_threshold: t,
                ..GeoConfig::default()
            };
            let (locs, _) = build_locations(&scenario.raw_codes(), &geo);
            (locs.len(), search_scenario(&scenario, &geo, &bl))
        };
        let (n_lo, h_lo) = at(lo);
        let (n_hi, h_hi) = at(hi);
        prop_assert!(n_hi <= n_lo);
        for (a, b) in h_lo.iter().zip(&h_hi) {
            prop_assert!(hint_keys(b).is_subset(&hint_keys(a)));
        }
        Ok(())
    });

    let blacklist = runner.run(
        &(0u64..10_000, prop::collection::vec(0usize..400, 0..12), prop::collection::vec(0usize..400, 0..6)),
        |(seed, code_picks, word_picks)| {
            let scenario = Scenario::generate(small(seed));
            let codes: Vec<String> = scenario.cities.iter().flat_map(|c| c.codes.values().cloned()).collect();
            let words: Vec<String> = scenario
                .routers
                .iter()
                .flat_map(|r| r.fqdn.split('.').map(str::to_string))
                .collect();
            let base = BlacklistTexts::bundled();
            let mut more = base.clone();
            for i in code_picks {
                more.codes.push_str(&format!("\n{}", codes[i % codes.len()]));
            }
            for i in word_picks {
                more.words.push_str(&format!("\n{}", words[i % words.len()]));
            }
            let geo = GeoConfig::default();
            let a = search_scenario(&scenario, &geo, &base);
            let b = search_scenario(&scenario, &geo, &more);
            for (x, y) in a.iter().zip(&b) {
                prop_assert!(hint_keys(y).is_subset(&hint_keys(x)));
            }
            Ok(())
        },
    );

    let mut runner = TestRunner::new(PtConfig {
        cases: 24,
        failure_persistence: None,
        ..PtConfig::default()
    });
    let latency = runner.run(&(0u64..10_000, 0.0f64..20.0, 0.0f64..20.0), |(seed, a1, a2)| {
        let (lo, hi) = (a1.min(a2), a1.max(a2));
        let scenario = Scenario::generate(small(seed));
        let hints = search_scenario(&scenario, &GeoConfig::default(), &BlacklistTexts::bundled());
        let at = |a_ms| {
            let cfg = ValidationConfig {
                a_ms,
                ..ValidationConfig::default()
            };
            verified_ips(&validate(&scenario, &hints, &cfg))
        };
        prop_assert!(at(lo).is_subset(&at(hi)));
        Ok(())
    });

    let distance = runner.run(&(0u64..10_000, 50.0f64..2000.0, 50.0f64..2000.0), |(seed, x1, x2)| {
        let (lo, hi) = (x1.min(x2), x1.max(x2));
        let scenario = Scenario::generate(small(seed));
        let hints = search_scenario(&scenario, &GeoConfig::default(), &BlacklistTexts::bundled());
        let at = |x_km| {
            let cfg = ValidationConfig {
                x_km,
                ..ValidationConfig::default()
            };
            verified_ips(&validate(&scenario, &hints, &cfg))
        };
        prop_assert!(at(lo).is_subset(&at(hi)));
        Ok(())
    });

    let pinpoint = TestRunner::new(PtConfig {
        cases: 1000,
        failure_persistence: None,
        ..PtConfig::default()
    })
    .run(
        &((-60.0f64..60.0, -170.0f64..170.0), (-8.0f64..8.0, -8.0f64..8.0), 0.01f64..40.0, 0.0f64..20.0, 0.0f64..20.0),
        |((la, lo), (dla, dlo), rtt, a1, a2)| {
            let hint = c(la, lo);
            let probe = c(la + dla, lo + dlo);
            let cfg = |a_ms| ValidationConfig {
                a_ms,
                ..ValidationConfig::default()
            };
            let verified = |a| matches!(verify_hint(hint, probe, Some(rtt), &cfg(a)), PinpointOutcome::Verified { .. });
            prop_assert!(!verified(a1.min(a2)) || verified(a1.max(a2)));
            Ok(())
        },
    );

    let err = |r: Result<(), String>, name: &str| r.err().map(|e| format!("{name}: {e}"));
    let failed: Vec<String> = [
        err(population.map_err(|e| e.to_string()), "population threshold"),
        err(blacklist.map_err(|e| e.to_string()), "blacklist"),
        err(latency.map_err(|e| e.to_string()), "latency buffer"),
        err(distance.map_err(|e| e.to_string()), "probe distance"),
        err(pinpoint.map_err(|e| e.to_string()), "pin-point buffer"),
    ]
    .into_iter()
    .flatten()
    .collect();
    if failed.is_empty() {
        Ok("threshold, blacklist, a_ms and x_km properties hold".into())
    } else {
        Err(failed.join("; "))
    }
}

fn fixture_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/sim50")
}

fn copy_fixture(to: &Path) {
    fn copy(from: &Path, to: &Path) {
        fs::create_dir_all(to).unwrap();
        for e in fs::read_dir(from).unwrap() {
            let e = e.unwrap();
            let target = to.join(e.file_name());
            if e.file_type().unwrap().is_dir() {
                copy(&e.path(), &target);
            } else {
                fs::copy(e.path(), target).unwrap();
            }
        }
    }
    copy(&fixture_dir(), to);
}

fn outputs(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fs::read_dir(dir.join("out"))
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
        })
        .collect()
}

fn c8_determinism() -> Outcome {
    let load = |dir: &Path| CampaignConfig::load(&dir.join("hloc.toml")).map_err(|e| e.to_string());
    let runs: Vec<tempfile::TempDir> = (0..3).map(|_| tempfile::tempdir().unwrap()).collect();
    for r in &runs {
        copy_fixture(r.path());
    }
    for r in &runs[..2] {
        Pipeline::new(load(r.path())?).map_err(|e| e.to_string())?.run_all(false).map_err(|e| e.to_string())?;
    }
    let mut cfg = load(runs[2].path())?;
    cfg.backend.measurement_budget = Some(60);
    let p = Pipeline::new(cfg.clone()).map_err(|e| e.to_string())?;
    p.codes().and_then(|_| p.preprocess()).and_then(|_| p.search()).map_err(|e| e.to_string())?;
    match p.measure(false) {
        Err(PipelineError::Incomplete { .. }) => {}
        other => return Err(format!("budgeted campaign did not park: {other:?}")),
    }
    cfg.backend.measurement_budget = None;
    Pipeline::new(cfg).and_then(|p| p.run_all(true)).map_err(|e| e.to_string())?;

    let (a, b, resumed) = (outputs(runs[0].path()), outputs(runs[1].path()), outputs(runs[2].path()));
    if a != b {
        return Err("two uninterrupted runs differ".into());
    }
    if a != resumed {
        let differing: Vec<&String> = a.keys().filter(|k| a.get(*k) != resumed.get(*k)).collect();
        return Err(format!("resumed run differs in {differing:?}"));
    }
    let golden = fs::read(fixture_dir().join("expected").join(files::VERDICTS)).map_err(|e| e.to_string())?;
    if a[files::VERDICTS] != golden {
        return Err("verdicts differ from the golden file".into());
    }
    Ok(format!("{} output files byte-identical across runs and after resume; verdicts match golden", a.len()))
}

#[test]
fn acceptance_suite() {
    let criteria: [Criterion; 8] = [
        ("1 constants", c1_constants as fn() -> Outcome),
        ("2 prefix-tree fidelity", c2_trie_fidelity as fn() -> Outcome),
        ("3 reference names verify", c3_reference_names as fn() -> Outcome),
        ("4 simulated soundness", c4_sim_soundness as fn() -> Outcome),
        ("5 hemisphere exclusion", c5_hemisphere_exclusion as fn() -> Outcome),
        ("6 evaluation classification", c6_classification as fn() -> Outcome),
        ("7 monotonicity", c7_monotonicity as fn() -> Outcome),
        ("8 determinism", c8_determinism as fn() -> Outcome),
    ];
    let mut failed = Vec::new();
    for (name, run) in criteria {
        let start = Instant::now();
        let outcome = run();
        let secs = start.elapsed().as_secs_f64();
        match &outcome {
            Ok(msg) => println!("PASS criterion {name} ({secs:.1}s): {msg}"),
            Err(msg) => {
                println!("FAIL criterion {name} ({secs:.1}s): {msg}");
                failed.push(name);
            }
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
