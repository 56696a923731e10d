//! Location-code ingestion and merging into city-level locations.
//!
//! Raw codes come from six kinds of sources (airport codes, UN/LOCODE,
//! CLLI, GeoNames city names). Each is normalized to a lowercase string
//! that can appear inside a DNS label, then merged greedily, biggest
//! population first, into [`Location`]s.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{self, BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geo::{great_circle_km, Coord, EARTH_RADIUS_KM};

#[derive(Debug, Error)]
pub enum GeoDataError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("malformed locations record on line {line}: {message}")]
    Record { line: usize, message: String },
    #[error("invalid geo configuration: {0}")]
    Config(String),
}

/// Where a location code came from.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize,
)]
#[serde(rename_all = "UPPERCASE")]
pub enum CodeSource {
    Iata,
    Icao,
    Faa,
    Unlocode,
    Geonames,
    Clli,
}

impl CodeSource {
    pub const ALL: [CodeSource; 6] = [
        CodeSource::Iata,
        CodeSource::Icao,
        CodeSource::Faa,
        CodeSource::Unlocode,
        CodeSource::Geonames,
        CodeSource::Clli,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            CodeSource::Iata => "IATA",
            CodeSource::Icao => "ICAO",
            CodeSource::Faa => "FAA",
            CodeSource::Unlocode => "UNLOCODE",
            CodeSource::Geonames => "GEONAMES",
            CodeSource::Clli => "CLLI",
        }
    }

    /// Rank used when ordering hints; lower is tried first.
    pub fn priority(&self) -> u8 {
        match self {
            CodeSource::Geonames => 0,
            CodeSource::Clli => 1,
            CodeSource::Iata => 2,
            CodeSource::Unlocode => 3,
            CodeSource::Faa => 4,
            CodeSource::Icao => 5,
        }
    }
}

impl fmt::Display for CodeSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for CodeSource {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_uppercase().as_str() {
            "IATA" => Ok(CodeSource::Iata),
            "ICAO" => Ok(CodeSource::Icao),
            "FAA" => Ok(CodeSource::Faa),
            "UNLOCODE" | "UN/LOCODE" | "LOCODE" => Ok(CodeSource::Unlocode),
            "GEONAMES" => Ok(CodeSource::Geonames),
            "CLLI" => Ok(CodeSource::Clli),
            other => Err(format!("unknown code source {other:?}")),
        }
    }
}

/// One normalized code as read from an input file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawCode {
    pub code: String,
    pub source: CodeSource,
    pub name: String,
    pub coord: Coord,
    pub population: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LocationId(pub u32);

impl fmt::Display for LocationId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "L{:06}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct LocationCode {
    pub code: String,
    pub source: CodeSource,
}

/// A merged city-level place.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Location {
    pub id: LocationId,
    pub name: String,
    pub lat: f64,
    pub lon: f64,
    pub population: u64,
    pub codes: Vec<LocationCode>,
}

impl Location {
    pub fn coord(&self) -> Coord {
        Coord::new(self.lat, self.lon).expect("location coordinates validated at construction")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeoConfig {
    pub merge_radius_km: f64,
    pub population_threshold: u64,
    /// Location names kept regardless of population (compared lowercase).
    pub whitelist: BTreeSet<String>,
}

impl Default for GeoConfig {
    fn default() -> Self {
        GeoConfig {
            merge_radius_km: 100.0,
            population_threshold: 100_000,
            whitelist: BTreeSet::new(),
        }
    }
}

impl GeoConfig {
    pub fn validate(&self) -> Result<(), GeoDataError> {
        if self.merge_radius_km.is_nan() || self.merge_radius_km <= 0.0 || !self.merge_radius_km.is_finite() {
            return Err(GeoDataError::Config(format!(
                "merge_radius_km must be positive, got {}",
                self.merge_radius_km
            )));
        }
        Ok(())
    }

    fn is_whitelisted(&self, name: &str) -> bool {
        let lower = name.to_lowercase();
        self.whitelist.iter().any(|w| w.to_lowercase() == lower)
    }
}

/// Lowercases and strips spaces, apostrophes and dots. Returns `None` when
/// the remainder is empty or contains anything outside `[a-z0-9-]`.
pub fn normalize_code(raw: &str) -> Option<String> {
    let mut out = String::with_capacity(raw.len());
    for ch in raw.trim().chars() {
        match ch {
            ' ' | '\'' | '.' | '`' => {}
            c if c.is_ascii_alphanumeric() || c == '-' => out.push(c.to_ascii_lowercase()),
            _ => return None,
        }
    }
    if out.is_empty() {
        None
    } else {
        Some(out)
    }
}

/// Parses UN/LOCODE coordinates such as `2946N 09522W`.
pub fn parse_locode_coordinates(s: &str) -> Option<Coord> {
    let mut parts = s.split_whitespace();
    let lat = parts.next()?;
    let lon = parts.next()?;
    if parts.next().is_some() || lat.len() != 5 || lon.len() != 6 {
        return None;
    }
    fn dm(digits: &str, deg_len: usize, hemi: char, neg: char) -> Option<f64> {
        let deg: f64 = digits.get(..deg_len)?.parse().ok()?;
        let min: f64 = digits.get(deg_len..)?.parse().ok()?;
        if min >= 60.0 {
            return None;
        }
        let v = deg + min / 60.0;
        Some(if hemi == neg { -v } else { v })
    }
    let lat_h = lat.chars().last()?.to_ascii_uppercase();
    let lon_h = lon.chars().last()?.to_ascii_uppercase();
    if !matches!(lat_h, 'N' | 'S') || !matches!(lon_h, 'E' | 'W') {
        return None;
    }
    let la = dm(&lat[..4], 2, lat_h, 'S')?;
    let lo = dm(&lon[..5], 3, lon_h, 'W')?;
    Coord::new(la, lo).ok()
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParseStats {
    pub rows: usize,
    pub codes: usize,
    pub skipped_missing_coordinates: usize,
    pub skipped_malformed: usize,
}

impl ParseStats {
    fn absorb(&mut self, other: &ParseStats) {
        self.rows += other.rows;
        self.codes += other.codes;
        self.skipped_missing_coordinates += other.skipped_missing_coordinates;
        self.skipped_malformed += other.skipped_malformed;
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodeFile {
    pub source: CodeSource,
    pub path: PathBuf,
}

fn sniff_delimiter(first_line: &str) -> u8 {
    if first_line.contains('\t') {
        b'\t'
    } else {
        b','
    }
}

fn field(rec: &csv::StringRecord, idx: usize) -> &str {
    rec.get(idx).map(str::trim).unwrap_or("")
}

fn parse_coord(lat: &str, lon: &str) -> Option<Coord> {
    if lat.is_empty() || lon.is_empty() {
        return None;
    }
    Coord::new(lat.parse().ok()?, lon.parse().ok()?).ok()
}

enum RowResult {
    Codes(Vec<RawCode>),
    MissingCoordinates,
    Malformed,
}

fn parse_row(source: CodeSource, rec: &csv::StringRecord) -> RowResult {
    use RowResult::*;
    match source {
        CodeSource::Iata | CodeSource::Icao | CodeSource::Faa => {
            let Some(coord) = parse_coord(field(rec, 2), field(rec, 3)) else {
                return MissingCoordinates;
            };
            let Some(code) = normalize_code(field(rec, 0)) else {
                return Malformed;
            };
            let population = field(rec, 4).parse().unwrap_or(0);
            let name = field(rec, 1);
            Codes(vec![RawCode {
                name: if name.is_empty() { code.clone() } else { name.to_string() },
                code,
                source,
                coord,
                population,
            }])
        }
        CodeSource::Unlocode => {
            let coords = field(rec, 3);
            if coords.is_empty() {
                return MissingCoordinates;
            }
            let Some(coord) = parse_locode_coordinates(coords) else {
                return Malformed;
            };
            let (country, place) = (field(rec, 0), field(rec, 1));
            if country.len() != 2 || place.len() != 3 {
                return Malformed;
            }
            let Some(code) = normalize_code(&format!("{country}{place}")) else {
                return Malformed;
            };
            let name = field(rec, 2);
            Codes(vec![RawCode {
                name: if name.is_empty() { code.clone() } else { name.to_string() },
                code,
                source,
                coord,
                population: 0,
            }])
        }
        CodeSource::Clli => {
            let Some(coord) = parse_coord(field(rec, 1), field(rec, 2)) else {
                return MissingCoordinates;
            };
            let full = field(rec, 0);
            if full.len() < 6 || !full.is_char_boundary(6) {
                return Malformed;
            }
            let Some(code) = normalize_code(&full[..6]) else {
                return Malformed;
            };
            if code.len() != 6 {
                return Malformed;
            }
            Codes(vec![RawCode {
                name: code.clone(),
                code,
                source,
                coord,
                population: 0,
            }])
        }
        CodeSource::Geonames => {
            let Some(coord) = parse_coord(field(rec, 3), field(rec, 4)) else {
                return MissingCoordinates;
            };
            let name = field(rec, 1);
            let population = field(rec, 5).parse().unwrap_or(0);
            let mut seen = HashSet::new();
            let mut out = Vec::new();
            let names = std::iter::once(name).chain(field(rec, 2).split(','));
            for candidate in names {
                if let Some(code) = normalize_code(candidate) {
                    if seen.insert(code.clone()) {
                        out.push(RawCode {
                            code,
                            source,
                            name: name.to_string(),
                            coord,
                            population,
                        });
                    }
                }
            }
            if out.is_empty() {
                Malformed
            } else {
                Codes(out)
            }
        }
    }
}

/// Parses one source file. The first line is a header naming the columns.
pub fn parse_codes<R: Read>(source: CodeSource, reader: R) -> (Vec<RawCode>, ParseStats) {
    let mut buf = BufReader::new(reader);
    let mut header = String::new();
    let mut stats = ParseStats::default();
    if buf.read_line(&mut header).unwrap_or(0) == 0 {
        return (Vec::new(), stats);
    }
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .delimiter(sniff_delimiter(&header))
        .from_reader(buf);
    let mut codes = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        stats.rows += 1;
        let rec = match rec {
            Ok(r) => r,
            Err(e) => {
                tracing::warn!(source = %source, row = i + 2, error = %e, "unparseable row");
                stats.skipped_malformed += 1;
                continue;
            }
        };
        match parse_row(source, &rec) {
            RowResult::Codes(c) => {
                stats.codes += c.len();
                codes.extend(c);
            }
            RowResult::MissingCoordinates => stats.skipped_missing_coordinates += 1,
            RowResult::Malformed => {
                tracing::warn!(source = %source, row = i + 2, "malformed code row");
                stats.skipped_malformed += 1;
            }
        }
    }
    (codes, stats)
}

/// Reads every listed file. An unreadable file is fatal; bad rows are not.
pub fn parse_code_files(files: &[CodeFile]) -> Result<(Vec<RawCode>, ParseStats), GeoDataError> {
    let mut all = Vec::new();
    let mut stats = ParseStats::default();
    for f in files {
        let file = File::open(&f.path).map_err(|source| GeoDataError::Io {
            path: f.path.clone(),
            source,
        })?;
        let (codes, s) = parse_codes(f.source, file);
        stats.absorb(&s);
        all.extend(codes);
    }
    Ok((all, stats))
}

/// Uniform lat/lon grid over location centers for radius queries.
struct SpatialGrid {
    cell_deg: f64,
    radius_km: f64,
    cells: HashMap<(i32, i32), Vec<usize>>,
}

impl SpatialGrid {
    fn new(radius_km: f64) -> Self {
        let km_per_deg = EARTH_RADIUS_KM.to_radians();
        SpatialGrid {
            cell_deg: (radius_km / km_per_deg).clamp(0.05, 30.0),
            radius_km,
            cells: HashMap::new(),
        }
    }

    fn lon_cells(&self) -> i32 {
        (360.0 / self.cell_deg).ceil() as i32
    }

    fn key(&self, c: Coord) -> (i32, i32) {
        let la = ((c.lat() + 90.0) / self.cell_deg).floor() as i32;
        let lo = (((c.lon() + 180.0) / self.cell_deg).floor() as i32).rem_euclid(self.lon_cells());
        (la, lo)
    }

    fn insert(&mut self, c: Coord, idx: usize) {
        let k = self.key(c);
        self.cells.entry(k).or_default().push(idx);
    }

    /// Indices of every stored point that may lie within `radius_km`
    /// (a superset; callers filter by exact distance).
    fn candidates(&self, c: Coord) -> Vec<usize> {
        let km_per_deg = EARTH_RADIUS_KM.to_radians();
        let dlat_deg = self.radius_km / km_per_deg;
        let lat_lo = (c.lat() - dlat_deg).max(-90.0);
        let lat_hi = (c.lat() + dlat_deg).min(90.0);
        let max_abs = lat_lo.abs().max(lat_hi.abs());
        let cos = max_abs.to_radians().cos();
        let n_lon = self.lon_cells();
        let lon_span_cells = if cos < 1e-6 || lat_hi >= 90.0 || lat_lo <= -90.0 {
            n_lon
        } else {
            let dlon_deg = dlat_deg / cos;
            if dlon_deg >= 180.0 {
                n_lon
            } else {
                (dlon_deg / self.cell_deg).ceil() as i32 + 1
            }
        };
        let la0 = ((lat_lo + 90.0) / self.cell_deg).floor() as i32;
        let la1 = ((lat_hi + 90.0) / self.cell_deg).floor() as i32;
        let (_, lo_c) = self.key(c);
        let mut out = Vec::new();
        let lon_keys: Vec<i32> = if lon_span_cells * 2 + 1 >= n_lon {
            (0..n_lon).collect()
        } else {
            (-lon_span_cells..=lon_span_cells)
                .map(|d| (lo_c + d).rem_euclid(n_lon))
                .collect()
        };
        for la in la0..=la1 {
            for &lo in &lon_keys {
                if let Some(v) = self.cells.get(&(la, lo)) {
                    out.extend_from_slice(v);
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MergeStats {
    pub input_codes: usize,
    pub locations: usize,
    /// Codes whose (code, source) pair already belonged to an earlier location.
    pub dropped_duplicates: usize,
}

fn founder_order(a: &RawCode, b: &RawCode) -> std::cmp::Ordering {
    b.population
        .cmp(&a.population)
        .then_with(|| a.name.cmp(&b.name))
        .then_with(|| a.coord.total_cmp(&b.coord))
        .then_with(|| a.code.cmp(&b.code))
        .then_with(|| a.source.cmp(&b.source))
}

/// Greedy merge in descending population order. See [`merge_locations_with_stats`].
pub fn merge_locations(codes: &[RawCode], config: &GeoConfig) -> Vec<Location> {
    merge_locations_with_stats(codes, config).0
}

/// Each code joins the highest-population location already formed within
/// `merge_radius_km` of that location's center, or founds a new one.
/// A (code, source) pair is owned by the first location that claims it.
pub fn merge_locations_with_stats(codes: &[RawCode], config: &GeoConfig) -> (Vec<Location>, MergeStats) {
    let mut order: Vec<&RawCode> = codes.iter().collect();
    order.sort_by(|a, b| founder_order(a, b));

    let mut grid = SpatialGrid::new(config.merge_radius_km);
    let mut founders: Vec<Coord> = Vec::new();
    let mut members: Vec<BTreeSet<LocationCode>> = Vec::new();
    let mut heads: Vec<(&str, u64)> = Vec::new();
    let mut owned: HashSet<(String, CodeSource)> = HashSet::new();
    let mut stats = MergeStats {
        input_codes: codes.len(),
        ..Default::default()
    };

    for rc in order {
        if !owned.insert((rc.code.clone(), rc.source)) {
            stats.dropped_duplicates += 1;
            continue;
        }
        let target = grid
            .candidates(rc.coord)
            .into_iter()
            .filter(|&i| great_circle_km(founders[i], rc.coord) <= config.merge_radius_km)
            .min();
        let lc = LocationCode {
            code: rc.code.clone(),
            source: rc.source,
        };
        match target {
            Some(i) => {
                members[i].insert(lc);
            }
            None => {
                let idx = founders.len();
                founders.push(rc.coord);
                heads.push((&rc.name, rc.population));
                members.push(BTreeSet::from([lc]));
                grid.insert(rc.coord, idx);
            }
        }
    }

    let locations: Vec<Location> = founders
        .into_iter()
        .zip(heads)
        .zip(members)
        .enumerate()
        .map(|(i, ((coord, (name, population)), codes))| Location {
            id: LocationId(i as u32),
            name: name.to_string(),
            lat: coord.lat(),
            lon: coord.lon(),
            population,
            codes: codes.into_iter().collect(),
        })
        .collect();
    stats.locations = locations.len();
    (locations, stats)
}

/// Keeps locations at or above the population threshold, plus whitelisted names.
pub fn apply_population_filter(locations: &[Location], config: &GeoConfig) -> Vec<Location> {
    locations
        .iter()
        .filter(|l| l.population >= config.population_threshold || config.is_whitelisted(&l.name))
        .cloned()
        .collect()
}

/// Flattens locations back into codes, each carrying its location's center.
pub fn flatten_locations(locations: &[Location]) -> Vec<RawCode> {
    locations
        .iter()
        .flat_map(|l| {
            l.codes.iter().map(move |c| RawCode {
                code: c.code.clone(),
                source: c.source,
                name: l.name.clone(),
                coord: l.coord(),
                population: l.population,
            })
        })
        .collect()
}

pub fn write_locations<W: Write>(mut w: W, locations: &[Location]) -> io::Result<()> {
    for l in locations {
        serde_json::to_writer(&mut w, l)?;
        w.write_all(b"\n")?;
    }
    w.flush()
}

pub fn read_locations<R: Read>(r: R) -> Result<Vec<Location>, GeoDataError> {
    let mut out = Vec::new();
    for (i, line) in BufReader::new(r).lines().enumerate() {
        let line = line.map_err(|e| GeoDataError::Record {
            line: i + 1,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let loc: Location = serde_json::from_str(&line).map_err(|e| GeoDataError::Record {
            line: i + 1,
            message: e.to_string(),
        })?;
        Coord::new(loc.lat, loc.lon).map_err(|e| GeoDataError::Record {
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(loc);
    }
    Ok(out)
}

pub fn read_locations_file(path: &Path) -> Result<Vec<Location>, GeoDataError> {
    let f = File::open(path).map_err(|source| GeoDataError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    read_locations(f)
}

/// Lookup from id to location.
#[derive(Debug, Clone, Default)]
pub struct LocationTable {
    by_id: HashMap<LocationId, Location>,
}

impl LocationTable {
    pub fn new(locations: &[Location]) -> Self {
        LocationTable {
            by_id: locations.iter().map(|l| (l.id, l.clone())).collect(),
        }
    }

    pub fn get(&self, id: LocationId) -> Option<&Location> {
        self.by_id.get(&id)
    }

    /// Every location whose name equals `name`, ignoring case.
    pub fn ids_named(&self, name: &str) -> Vec<LocationId> {
        let lower = name.to_lowercase();
        let mut ids: Vec<_> = self
            .by_id
            .values()
            .filter(|l| l.name.to_lowercase() == lower)
            .map(|l| l.id)
            .collect();
        ids.sort();
        ids
    }

    pub fn len(&self) -> usize {
        self.by_id.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_id.is_empty()
    }
}
