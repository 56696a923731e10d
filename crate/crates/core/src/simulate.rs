//! Synthetic scenarios with known ground truth: cities carrying location
//! codes, a probe inventory clustered around them, and routers whose rDNS
//! names embed true codes, far-away decoy codes and IP-encoded forms.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::io;
use std::net::{IpAddr, Ipv4Addr};
use std::path::{Path, PathBuf};

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::CampaignConfig;
use crate::domainprep::{parse_list, BUNDLED_CODE_BLACKLIST, BUNDLED_WORD_BLACKLIST};
use crate::evaluate::ExternalAnswer;
use crate::geo::{destination, great_circle_km, Coord};
use crate::geodata::{parse_codes, CodeFile, CodeSource, RawCode};
use crate::measure::{write_probes, NoiseModel, Probe, SimRouter, SimWorld, SimWorldFile, Vantage};

pub const SIM_EPOCH: i64 = 1_500_000_000;
/// Great-circle distance beyond which a decoy counts as cross-hemisphere.
pub const DECOY_MIN_DISTANCE_KM: f64 = 6000.0;

const SYLLABLES: &[&str] = &[
    "ka", "lo", "mer", "van", "dri", "sol", "tun", "bra", "hel", "zor", "qua", "fin", "mos", "tal", "ver", "nox",
    "pil", "dar", "gum", "ral", "sen", "bok", "lum", "tir", "esk", "oru", "jav", "wen",
];
const ISPS: &[&str] = &["carrierone.net", "ringnet.com", "polarix.net", "meridian-ip.org", "lumenway.net"];
const ANSWER_SOURCES: [&str; 2] = ["dba", "dbb"];
/// Interface prefixes that are also airport codes; the shipped code
/// blacklist suppresses them.
const INFRA_CODES: &[&str] = &["eth", "gig", "pos", "atm", "ten", "hun"];

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioParams {
    pub seed: u64,
    pub cities: usize,
    pub routers: usize,
    pub probes: usize,
    pub min_city_separation_km: f64,
    pub probe_jitter_km: f64,
    pub inactive_probe_fraction: f64,
    pub unresponsive_fraction: f64,
    /// Routers whose names carry no code of their own city.
    pub uncoded_fraction: f64,
    pub decoy_fraction: f64,
    pub ip_encoded_fraction: f64,
    /// Fraction of cities drawn with fewer than 100,000 inhabitants.
    pub small_city_fraction: f64,
    pub noise: NoiseModel,
}

impl ScenarioParams {
    /// 1,000 routers and 200 probes.
    pub fn desk(seed: u64) -> Self {
        ScenarioParams {
            seed,
            cities: 150,
            routers: 1000,
            probes: 200,
            min_city_separation_km: 250.0,
            probe_jitter_km: 60.0,
            inactive_probe_fraction: 0.05,
            unresponsive_fraction: 0.05,
            uncoded_fraction: 0.1,
            decoy_fraction: 0.5,
            ip_encoded_fraction: 0.15,
            small_city_fraction: 0.15,
            noise: NoiseModel::default(),
        }
    }

    /// 50 routers; small enough to keep as a fixture.
    pub fn fixture(seed: u64) -> Self {
        ScenarioParams {
            cities: 24,
            routers: 50,
            probes: 30,
            ..Self::desk(seed)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct City {
    pub name: String,
    pub coord: Coord,
    pub population: u64,
    /// Lowercase code per source.
    pub codes: BTreeMap<CodeSource, String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlantedRouter {
    pub ip: IpAddr,
    pub fqdn: String,
    /// Index of the city the router sits in.
    pub city: usize,
    pub true_code: Option<(CodeSource, String)>,
    /// Index of the far city whose code was planted as a decoy.
    pub decoy: Option<usize>,
    pub responsive: bool,
    pub ip_encoded: bool,
}

#[derive(Debug, Clone)]
pub struct Scenario {
    pub params: ScenarioParams,
    pub cities: Vec<City>,
    pub routers: Vec<PlantedRouter>,
    pub probes: Vec<Probe>,
    pub vantages: Vec<Vantage>,
    pub world: SimWorldFile,
    pub answers: BTreeMap<String, Vec<ExternalAnswer>>,
}

fn round4(v: f64) -> f64 {
    (v * 1e4).round() / 1e4
}

fn random_coord(rng: &mut ChaCha8Rng) -> Coord {
    let s: f64 = rng.random_range((-55.0f64).to_radians().sin()..65.0f64.to_radians().sin());
    let lat = round4(s.asin().to_degrees());
    let lon = round4(rng.random_range(-179.9..179.9));
    Coord::new(lat, lon).expect("in range")
}

fn jitter(rng: &mut ChaCha8Rng, c: Coord, max_km: f64) -> Coord {
    let p = destination(c, rng.random_range(0.0..360.0), rng.random_range(0.0..max_km));
    Coord::new(round4(p.lat()), round4(p.lon())).expect("in range")
}

struct CodeMint {
    banned: HashSet<String>,
    used: HashMap<CodeSource, HashSet<String>>,
}

impl CodeMint {
    fn new() -> Self {
        let banned = parse_list(BUNDLED_CODE_BLACKLIST)
            .into_iter()
            .chain(parse_list(BUNDLED_WORD_BLACKLIST))
            .map(|l| l.split_whitespace().next().unwrap_or("").to_string())
            .collect();
        CodeMint {
            banned,
            used: HashMap::new(),
        }
    }

    fn claim(&mut self, source: CodeSource, code: &str) -> bool {
        if self.banned.contains(code) {
            return false;
        }
        self.used.entry(source).or_default().insert(code.to_string())
    }

    fn letters(&mut self, rng: &mut ChaCha8Rng, source: CodeSource, len: usize) -> String {
        loop {
            let code: String = (0..len).map(|_| rng.random_range(b'a'..=b'z') as char).collect();
            if self.claim(source, &code) {
                return code;
            }
        }
    }
}

fn city_name(rng: &mut ChaCha8Rng, mint: &mut CodeMint) -> String {
    loop {
        let n = rng.random_range(2..=3);
        let name: String = (0..n).map(|_| *SYLLABLES.choose(rng).expect("nonempty")).collect();
        if name.len() >= 5 && mint.claim(CodeSource::Geonames, &name) {
            let mut c = name.chars();
            let first = c.next().expect("nonempty").to_ascii_uppercase();
            return std::iter::once(first).chain(c).collect();
        }
    }
}

fn ip_dashed(ip: IpAddr) -> String {
    ip.to_string().replace(['.', ':'], "-")
}

/// `DDMMN DDDMME` with minutes rounded to the nearest whole minute.
fn locode_coordinates(c: Coord) -> String {
    fn dm(v: f64) -> (u32, u32) {
        let total = (v.abs() * 60.0).round() as u32;
        (total / 60, total % 60)
    }
    let (ld, lm) = dm(c.lat());
    let (od, om) = dm(c.lon());
    let ns = if c.lat() < 0.0 { 'S' } else { 'N' };
    let ew = if c.lon() < 0.0 { 'W' } else { 'E' };
    format!("{ld:02}{lm:02}{ns} {od:03}{om:02}{ew}")
}

impl Scenario {
    pub fn generate(params: ScenarioParams) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
        let mut mint = CodeMint::new();

        let mut cities: Vec<City> = Vec::with_capacity(params.cities);
        while cities.len() < params.cities {
            let coord = random_coord(&mut rng);
            if cities
                .iter()
                .any(|c| great_circle_km(c.coord, coord) < params.min_city_separation_km)
            {
                continue;
            }
            let name = city_name(&mut rng, &mut mint);
            let infra = INFRA_CODES.get(cities.len()).filter(|_| cities.len() < params.cities / 4);
            let population = if infra.is_none() && rng.random_bool(params.small_city_fraction) {
                rng.random_range(20_000..100_000)
            } else {
                (10f64.powf(rng.random_range(5.0..7.0)) as u64).max(100_000)
            };
            let mut codes = BTreeMap::new();
            codes.insert(CodeSource::Geonames, name.to_lowercase());
            let iata = match infra {
                Some(c) => c.to_string(),
                None => mint.letters(&mut rng, CodeSource::Iata, 3),
            };
            codes.insert(CodeSource::Iata, iata);
            if rng.random_bool(0.6) {
                codes.insert(CodeSource::Icao, mint.letters(&mut rng, CodeSource::Icao, 4));
            }
            if coord.lon() < -30.0 && rng.random_bool(0.7) {
                codes.insert(CodeSource::Faa, mint.letters(&mut rng, CodeSource::Faa, 3));
            }
            if rng.random_bool(0.7) {
                codes.insert(CodeSource::Unlocode, mint.letters(&mut rng, CodeSource::Unlocode, 5));
            }
            if rng.random_bool(0.5) {
                codes.insert(CodeSource::Clli, mint.letters(&mut rng, CodeSource::Clli, 6));
            }
            cities.push(City {
                name,
                coord,
                population,
                codes,
            });
        }

        let decoy_pool: Vec<Vec<usize>> = cities
            .iter()
            .map(|c| {
                (0..cities.len())
                    .filter(|&j| {
                        let o = &cities[j];
                        !mint.banned.contains(&o.codes[&CodeSource::Iata])
                            && (o.coord.lon() < 0.0) != (c.coord.lon() < 0.0)
                            && great_circle_km(c.coord, o.coord) >= DECOY_MIN_DISTANCE_KM
                    })
                    .collect()
            })
            .collect();

        let mut probes = Vec::with_capacity(params.probes);
        for n in 0..params.probes {
            let city = &cities[rng.random_range(0..cities.len())];
            let at = jitter(&mut rng, city.coord, params.probe_jitter_km);
            probes.push(Probe {
                probe_id: (10_000 + n).to_string(),
                lat: at.lat(),
                lon: at.lon(),
                active: !rng.random_bool(params.inactive_probe_fraction),
                framework: String::new(),
            });
        }

        let base = u32::from(Ipv4Addr::new(198, 18, 0, 1));
        let mut routers = Vec::with_capacity(params.routers);
        for n in 0..params.routers {
            let ip = IpAddr::V4(Ipv4Addr::from(base + n as u32));
            let city_idx = rng.random_range(0..cities.len());
            let city = &cities[city_idx];
            let isp = *ISPS.choose(&mut rng).expect("nonempty");
            let ip_encoded = rng.random_bool(params.ip_encoded_fraction);
            let true_code = if rng.random_bool(params.uncoded_fraction) {
                None
            } else {
                let sources: Vec<CodeSource> = city
                    .codes
                    .iter()
                    .filter(|(_, c)| !mint.banned.contains(c.as_str()))
                    .map(|(s, _)| *s)
                    .collect();
                let weights = |s: &CodeSource| match s {
                    CodeSource::Iata => 8,
                    CodeSource::Geonames | CodeSource::Clli => 3,
                    CodeSource::Unlocode => 2,
                    CodeSource::Icao | CodeSource::Faa => 1,
                };
                let s = *sources.choose_weighted(&mut rng, weights).expect("city has codes");
                Some((s, city.codes[&s].clone()))
            };
            let decoy = if rng.random_bool(params.decoy_fraction) {
                decoy_pool[city_idx].choose(&mut rng).copied()
            } else {
                None
            };
            let j = rng.random_range(1..10);
            let k = rng.random_range(1..5);
            let iface = format!("{}{}", ["ae", "xe-0-", "et-1-", "be", "eth", "gig0-", "pos"].choose(&mut rng).expect("nonempty"), j);
            let mut labels: Vec<String> = match (&true_code, ip_encoded) {
                (Some((_, c)), true) => vec![ip_dashed(ip), c.clone(), "static".into()],
                (Some((_, c)), false) => match rng.random_range(0..3) {
                    0 => vec![iface, format!("cr{k}"), format!("{c}{k}")],
                    1 => vec![format!("{c}-gw{j}")],
                    _ => vec![iface, c.clone()],
                },
                (None, true) => vec![ip_dashed(ip), "dynamic".into()],
                (None, false) => vec![iface, format!("r{k}")],
            };
            if let Some(d) = decoy {
                let dc = cities[d].codes[&CodeSource::Iata].clone();
                labels.insert(1.min(labels.len()), format!("to-{dc}{k}"));
            }
            labels.push(isp.to_string());
            routers.push(PlantedRouter {
                ip,
                fqdn: labels.join("."),
                city: city_idx,
                true_code,
                decoy,
                responsive: !rng.random_bool(params.unresponsive_fraction),
                ip_encoded,
            });
        }

        let world = SimWorldFile {
            seed: params.seed,
            noise: params.noise,
            epoch: SIM_EPOCH,
            routers: routers
                .iter()
                .map(|r| SimRouter {
                    ip: r.ip,
                    lat: cities[r.city].coord.lat(),
                    lon: cities[r.city].coord.lon(),
                    responsive: r.responsive,
                })
                .collect(),
        };

        let mut answers = BTreeMap::new();
        for (i, source) in ANSWER_SOURCES.iter().enumerate() {
            let (p_true, p_none) = if i == 0 { (0.85, 0.02) } else { (0.55, 0.1) };
            let list = routers
                .iter()
                .map(|r| {
                    let roll: f64 = rng.random_range(0.0..1.0);
                    let (coord, city) = if roll < p_none {
                        (None, String::new())
                    } else if roll < p_none + p_true {
                        let c = &cities[r.city];
                        (Some(jitter(&mut rng, c.coord, 30.0)), c.name.clone())
                    } else {
                        let c = cities.choose(&mut rng).expect("nonempty");
                        (Some(jitter(&mut rng, c.coord, 30.0)), c.name.clone())
                    };
                    ExternalAnswer {
                        ip: r.ip,
                        source: source.to_string(),
                        coord,
                        city,
                    }
                })
                .collect();
            answers.insert(source.to_string(), list);
        }

        Scenario {
            params,
            cities,
            routers,
            probes,
            vantages: Vantage::default_set(),
            world,
            answers,
        }
    }

    pub fn truth(&self, ip: IpAddr) -> Option<Coord> {
        self.routers.iter().find(|r| r.ip == ip).map(|r| self.cities[r.city].coord)
    }

    pub fn truth_map(&self) -> HashMap<IpAddr, Coord> {
        self.routers.iter().map(|r| (r.ip, self.cities[r.city].coord)).collect()
    }

    pub fn sim_world(&self) -> SimWorld {
        SimWorld::new(self.world.clone(), &self.probes, &self.vantages)
    }

    pub fn corpus(&self) -> Vec<(IpAddr, String)> {
        self.routers.iter().map(|r| (r.ip, r.fqdn.clone())).collect()
    }

    pub fn corpus_text(&self) -> String {
        let mut s = String::from("# ip,fqdn\n");
        for r in &self.routers {
            let _ = writeln!(s, "{},{}", r.ip, r.fqdn);
        }
        s
    }

    /// Contents of one code file per source, in the formats the code
    /// reader accepts.
    pub fn code_file_texts(&self) -> BTreeMap<CodeSource, String> {
        let mut out: BTreeMap<CodeSource, String> = BTreeMap::new();
        for source in CodeSource::ALL {
            let header = match source {
                CodeSource::Iata | CodeSource::Icao | CodeSource::Faa => "code,name,lat,lon,population",
                CodeSource::Unlocode => "country,location,name,coordinates",
                CodeSource::Geonames => "geonameid\tname\talternatenames\tlatitude\tlongitude\tpopulation",
                CodeSource::Clli => "clli,lat,lon",
            };
            out.insert(source, format!("{header}\n"));
        }
        for (i, c) in self.cities.iter().enumerate() {
            let (lat, lon) = (c.coord.lat(), c.coord.lon());
            for (source, code) in &c.codes {
                let up = code.to_uppercase();
                let text = out.get_mut(source).expect("all sources present");
                let _ = match source {
                    CodeSource::Iata => writeln!(text, "{up},{},{lat},{lon},{}", c.name, c.population),
                    CodeSource::Icao | CodeSource::Faa => writeln!(text, "{up},{},{lat},{lon},", c.name),
                    CodeSource::Unlocode => {
                        writeln!(text, "{},{},{},{}", &up[..2], &up[2..], c.name, locode_coordinates(c.coord))
                    }
                    CodeSource::Geonames => {
                        writeln!(text, "{}\t{}\t\t{lat}\t{lon}\t{}", 100_000 + i, c.name, c.population)
                    }
                    CodeSource::Clli => writeln!(text, "{up}CR,{lat},{lon}"),
                };
            }
        }
        out
    }

    fn file_name(source: CodeSource) -> &'static str {
        match source {
            CodeSource::Iata => "iata.csv",
            CodeSource::Icao => "icao.csv",
            CodeSource::Faa => "faa.csv",
            CodeSource::Unlocode => "unlocode.csv",
            CodeSource::Geonames => "geonames.tsv",
            CodeSource::Clli => "clli.csv",
        }
    }

    /// Codes as the file reader sees them.
    pub fn raw_codes(&self) -> Vec<RawCode> {
        self.code_file_texts()
            .into_iter()
            .flat_map(|(s, text)| parse_codes(s, text.as_bytes()).0)
            .collect()
    }

    pub fn answers_text(&self, source: &str) -> String {
        let mut s = String::from("ip,lat,lon,city\n");
        for a in self.answers.get(source).into_iter().flatten() {
            let _ = match a.coord {
                Some(c) => writeln!(s, "{},{},{},{}", a.ip, c.lat(), c.lon(), a.city),
                None => writeln!(s, "{},,,", a.ip),
            };
        }
        s
    }

    /// Configuration with paths relative to the scenario directory.
    pub fn config(&self) -> CampaignConfig {
        let mut cfg = CampaignConfig {
            seed: self.params.seed,
            output_dir: "out".into(),
            ..Default::default()
        };
        cfg.inputs.code_files = CodeSource::ALL
            .iter()
            .map(|&source| CodeFile {
                source,
                path: Path::new("codes").join(Self::file_name(source)),
            })
            .collect();
        cfg.inputs.domains = Some("domains.csv".into());
        cfg.inputs.probes = Some("probes.csv".into());
        cfg.inputs.vantages = Some("vantages.csv".into());
        cfg.inputs.answers = ANSWER_SOURCES
            .iter()
            .map(|s| (s.to_string(), Path::new("answers").join(format!("{s}.csv"))))
            .collect();
        cfg.backend.world = Some("world.json".into());
        cfg.stats.thresholds = vec![0, 100_000, 500_000, 1_000_000, 5_000_000];
        cfg
    }

    /// Writes every input file and `hloc.toml` into `dir`; returns the
    /// config path.
    pub fn write_inputs(&self, dir: &Path) -> io::Result<PathBuf> {
        fs::create_dir_all(dir.join("codes"))?;
        fs::create_dir_all(dir.join("answers"))?;
        for (source, text) in self.code_file_texts() {
            fs::write(dir.join("codes").join(Self::file_name(source)), text)?;
        }
        fs::write(dir.join("domains.csv"), self.corpus_text())?;
        let mut probes = Vec::new();
        write_probes(&mut probes, &self.probes)?;
        fs::write(dir.join("probes.csv"), probes)?;
        let mut vantages = String::from("name,lat,lon\n");
        for v in &self.vantages {
            let _ = writeln!(vantages, "{},{},{}", v.name, v.lat, v.lon);
        }
        fs::write(dir.join("vantages.csv"), vantages)?;
        for source in ANSWER_SOURCES {
            fs::write(dir.join("answers").join(format!("{source}.csv")), self.answers_text(source))?;
        }
        let mut world = serde_json::to_string_pretty(&self.world)?;
        world.push('\n');
        fs::write(dir.join("world.json"), world)?;
        let path = dir.join("hloc.toml");
        fs::write(&path, self.config().to_toml())?;
        Ok(path)
    }
}
