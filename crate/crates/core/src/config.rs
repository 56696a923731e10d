//! Campaign configuration: one TOML file naming every input and parameter.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::evaluate::DEFAULT_SAME_RADIUS_KM;
use crate::geodata::{CodeFile, GeoConfig};
use crate::hintsearch::HintOrdering;
use crate::measure::remote::RemoteConfig;
use crate::verdict::ValidationConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read configuration {path}: {source}")]
    Read {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot parse configuration {path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("{0}")]
    Invalid(String),
    #[error("{field} refers to {path}, which does not exist")]
    MissingFile { field: String, path: PathBuf },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InputsConfig {
    pub code_files: Vec<CodeFile>,
    /// `ip,fqdn` target corpus.
    pub domains: Option<PathBuf>,
    pub tlds: Option<PathBuf>,
    pub suffix_rules: Option<PathBuf>,
    pub code_blacklist: Option<PathBuf>,
    pub word_blacklist: Option<PathBuf>,
    pub code_location_blacklist: Option<PathBuf>,
    pub probes: Option<PathBuf>,
    pub vantages: Option<PathBuf>,
    /// External answer files keyed by source name.
    pub answers: BTreeMap<String, PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchConfig {
    pub min_code_len: usize,
    pub ordering: HintOrdering,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            min_code_len: crate::codetrie::DEFAULT_MIN_CODE_LEN,
            ordering: HintOrdering::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    #[default]
    Sim,
    File,
    Remote,
}

impl std::str::FromStr for BackendKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "sim" => Ok(BackendKind::Sim),
            "file" => Ok(BackendKind::File),
            "remote" => Ok(BackendKind::Remote),
            other => Err(format!("unknown backend {other:?} (expected sim, file or remote)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendConfig {
    pub kind: BackendKind,
    /// Simulated world description for the `sim` backend.
    pub world: Option<PathBuf>,
    /// Recorded results for the `file` backend.
    pub recorded: Option<PathBuf>,
    /// Recorded pre-scan results used with the `remote` backend.
    pub prescan_recorded: Option<PathBuf>,
    pub packets: u32,
    /// Caps the number of measurements issued in one run.
    pub measurement_budget: Option<u64>,
    /// Environment variable holding the remote service key.
    pub api_key_env: String,
    pub remote: RemoteConfig,
}

impl Default for BackendConfig {
    fn default() -> Self {
        BackendConfig {
            kind: BackendKind::Sim,
            world: None,
            recorded: None,
            prescan_recorded: None,
            packets: 1,
            measurement_budget: None,
            api_key_env: "HLOC_API_KEY".into(),
            remote: RemoteConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationConfig {
    pub same_radius_km: f64,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        EvaluationConfig {
            same_radius_km: DEFAULT_SAME_RADIUS_KM,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StatsConfig {
    /// Population thresholds for the hint-count sensitivity sweep.
    pub thresholds: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CampaignConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    /// Worker threads; 0 lets the runtime decide.
    pub max_concurrency: usize,
    pub inputs: InputsConfig,
    pub geo: GeoConfig,
    pub search: SearchConfig,
    pub validation: ValidationConfig,
    pub backend: BackendConfig,
    pub evaluation: EvaluationConfig,
    pub stats: StatsConfig,
}

impl Default for CampaignConfig {
    fn default() -> Self {
        CampaignConfig {
            seed: 1,
            output_dir: PathBuf::from("out"),
            max_concurrency: 0,
            inputs: InputsConfig::default(),
            geo: GeoConfig::default(),
            search: SearchConfig::default(),
            validation: ValidationConfig::default(),
            backend: BackendConfig::default(),
            evaluation: EvaluationConfig::default(),
            stats: StatsConfig::default(),
        }
    }
}

fn rebase(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

fn rebase_opt(base: &Path, p: &mut Option<PathBuf>) {
    if let Some(p) = p {
        rebase(base, p);
    }
}

impl CampaignConfig {
    /// Parses a configuration file, resolving relative paths against its
    /// directory. Call [`CampaignConfig::validate`] after applying overrides.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        let mut cfg = Self::from_toml(&text).map_err(|message| ConfigError::Parse {
            path: path.to_path_buf(),
            message,
        })?;
        let base = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    pub fn from_toml(text: &str) -> Result<Self, String> {
        toml::from_str(text).map_err(|e| e.to_string())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("configuration serializes")
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        rebase(base, &mut self.output_dir);
        let i = &mut self.inputs;
        for f in &mut i.code_files {
            rebase(base, &mut f.path);
        }
        for p in [
            &mut i.domains,
            &mut i.tlds,
            &mut i.suffix_rules,
            &mut i.code_blacklist,
            &mut i.word_blacklist,
            &mut i.code_location_blacklist,
            &mut i.probes,
            &mut i.vantages,
        ] {
            rebase_opt(base, p);
        }
        for p in i.answers.values_mut() {
            rebase(base, p);
        }
        rebase_opt(base, &mut self.backend.world);
        rebase_opt(base, &mut self.backend.recorded);
        rebase_opt(base, &mut self.backend.prescan_recorded);
    }

    /// Checks numeric invariants and that every referenced file exists.
    pub fn validate(&self) -> Result<(), ConfigError> {
        self.geo.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.validation
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.search.min_code_len == 0 {
            return Err(ConfigError::Invalid("search.min_code_len must be at least 1".into()));
        }
        if self.backend.packets == 0 {
            return Err(ConfigError::Invalid("backend.packets must be at least 1".into()));
        }
        if !(self.evaluation.same_radius_km.is_finite() && self.evaluation.same_radius_km >= 0.0) {
            return Err(ConfigError::Invalid("evaluation.same_radius_km must be non-negative".into()));
        }
        let i = &self.inputs;
        let mut files: Vec<(String, &PathBuf)> = i
            .code_files
            .iter()
            .map(|f| (format!("inputs.code_files[{}]", f.source), &f.path))
            .collect();
        let named = [
            ("inputs.domains", &i.domains),
            ("inputs.tlds", &i.tlds),
            ("inputs.suffix_rules", &i.suffix_rules),
            ("inputs.code_blacklist", &i.code_blacklist),
            ("inputs.word_blacklist", &i.word_blacklist),
            ("inputs.code_location_blacklist", &i.code_location_blacklist),
            ("inputs.probes", &i.probes),
            ("inputs.vantages", &i.vantages),
            ("backend.world", &self.backend.world),
            ("backend.recorded", &self.backend.recorded),
            ("backend.prescan_recorded", &self.backend.prescan_recorded),
        ];
        files.extend(named.into_iter().filter_map(|(n, p)| p.as_ref().map(|p| (n.to_string(), p))));
        files.extend(i.answers.iter().map(|(k, p)| (format!("inputs.answers.{k}"), p)));
        for (field, path) in files {
            if !path.exists() {
                return Err(ConfigError::MissingFile {
                    field,
                    path: path.clone(),
                });
            }
        }
        Ok(())
    }

    /// Stable digest of the parameters that affect measurement outcomes.
    pub fn measurement_digest(&self) -> String {
        use sha2::{Digest, Sha256};
        let relevant = serde_json::json!({
            "seed": self.seed,
            "validation": self.validation,
            "kind": self.backend.kind,
            "packets": self.backend.packets,
        });
        let digest = Sha256::digest(relevant.to_string().as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}
