//! Experiment configuration: one JSON document holding the chain, grid, map
//! build, planner, IK and scenario settings.

use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::ik::IkParams;
use crate::kinematics::{ChainSpec, KinematicChain};
use crate::planner::PlannerParams;
use crate::reachability::MapBuildParams;
use crate::sim::ScenarioSpec;
use crate::world::GridParams;

pub const CONFIG_SCHEMA_VERSION: u32 = 1;
pub const DEFAULT_PROFILE: &str = "paper-table1";

/// Parses a JSON document carrying a `schema_version` field. Version
/// mismatches are reported before anything else; other errors name the
/// offending field path.
pub fn parse_versioned<T: DeserializeOwned>(s: &str, path: &Path, supported: u32) -> Result<T> {
    let schema = |message: String| Error::Schema {
        path: path.to_path_buf(),
        message,
    };
    let value: serde_json::Value = serde_json::from_str(s).map_err(|e| schema(e.to_string()))?;
    match value.get("schema_version") {
        None => return Err(schema("missing field `schema_version`".into())),
        Some(v) => match v.as_u64() {
            Some(found) if found == supported as u64 => {}
            Some(found) => {
                return Err(Error::SchemaVersion {
                    found: found.min(u32::MAX as u64) as u32,
                    supported,
                })
            }
            None => return Err(schema(format!("schema_version: expected an integer, found {v}"))),
        },
    }
    serde_path_to_error::deserialize(value).map_err(|e| {
        let field = e.path().to_string();
        schema(format!("{field}: {}", e.into_inner()))
    })
}

/// A chain given inline or as a path to a chain file (relative paths resolve
/// against the config file's directory).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ChainSource {
    Path(PathBuf),
    Inline(Box<ChainSpec>),
}

impl Default for ChainSource {
    fn default() -> Self {
        ChainSource::Inline(Box::new(ChainSpec::default_7r()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MapSection {
    /// Map file location, relative to the config file's directory.
    pub path: PathBuf,
    pub build: MapBuildParams,
}

impl Default for MapSection {
    fn default() -> Self {
        Self {
            path: PathBuf::from("reachability.map"),
            build: MapBuildParams::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchParams {
    /// Timed calls per stage.
    pub samples: usize,
    pub seed: u64,
}

impl Default for BenchParams {
    fn default() -> Self {
        Self { samples: 100, seed: 11 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub schema_version: u32,
    /// Informational; the only shipped profile is `paper-table1`.
    pub profile: String,
    pub chain: ChainSource,
    pub grid: GridParams,
    pub map: MapSection,
    pub planner: PlannerParams,
    pub ik: IkParams,
    pub scenario: ScenarioSpec,
    pub bench: BenchParams,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            schema_version: CONFIG_SCHEMA_VERSION,
            profile: DEFAULT_PROFILE.into(),
            chain: ChainSource::default(),
            grid: GridParams::default_workspace(),
            map: MapSection::default(),
            planner: PlannerParams::paper_table1(),
            ik: IkParams::default(),
            scenario: ScenarioSpec::default(),
            bench: BenchParams::default(),
        }
    }
}

impl Config {
    /// Built-in profile by name.
    pub fn profile(name: &str) -> Result<Self> {
        match name {
            DEFAULT_PROFILE => Ok(Self::default()),
            other => Err(Error::InvalidParams(format!(
                "unknown profile `{other}` (available: {DEFAULT_PROFILE})"
            ))),
        }
    }

    pub fn from_json_str(s: &str, path: &Path) -> Result<Self> {
        parse_versioned(s, path, CONFIG_SCHEMA_VERSION)
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

/// A configuration with its chain loaded and validated.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub config: Config,
    pub chain: KinematicChain,
    /// Directory relative paths resolve against.
    pub base_dir: PathBuf,
}

impl LoadedConfig {
    /// Loads `path`, or the default profile when `path` is `None`.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Self::resolve(Config::default(), PathBuf::from(".")),
            Some(p) => {
                let s = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                let config = Config::from_json_str(&s, p)?;
                let dir = p.parent().map(Path::to_path_buf).unwrap_or_default();
                Self::resolve(config, dir)
            }
        }
    }

    /// Loads the chain, inlines it and validates every section.
    pub fn resolve(mut config: Config, base_dir: PathBuf) -> Result<Self> {
        let spec = match &config.chain {
            ChainSource::Inline(spec) => (**spec).clone(),
            ChainSource::Path(p) => ChainSpec::load(&base_dir.join(p))?,
        };
        let chain = KinematicChain::new(spec.clone())?;
        config.chain = ChainSource::Inline(Box::new(spec));
        config.grid.validate()?;
        config.map.build.validate()?;
        config.planner.validate()?;
        config.ik.validate()?;
        config.scenario.validate()?;
        Ok(Self {
            config,
            chain,
            base_dir,
        })
    }

    /// Content hash of the resolved configuration (chain inlined).
    pub fn hash(&self) -> String {
        config_hash(&self.config)
    }

    pub fn map_path(&self) -> PathBuf {
        self.base_dir.join(&self.config.map.path)
    }
}

/// First 16 hex digits of the SHA-256 of the canonical JSON encoding.
pub fn config_hash(config: &Config) -> String {
    let bytes = serde_json::to_vec(config).expect("config serializes");
    Sha256::digest(&bytes)[..8].iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p() -> &'static Path {
        Path::new("test.json")
    }

    #[test]
    fn default_profile_round_trips() {
        let c = Config::profile("paper-table1").unwrap();
        let back = Config::from_json_str(&c.to_json_pretty(), p()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.planner, PlannerParams::paper_table1());
        assert!(Config::profile("nope").is_err());
    }

    #[test]
    fn missing_sections_fall_back_to_profile() {
        let c = Config::from_json_str(r#"{"schema_version": 1, "scenario": {"runs": 3}}"#, p()).unwrap();
        assert_eq!(c.scenario.runs, 3);
        assert_eq!(c.planner, PlannerParams::paper_table1());
    }

    #[test]
    fn wrong_version_is_reported_first() {
        let e = Config::from_json_str(r#"{"schema_version": 9, "bogus": true}"#, p()).unwrap_err();
        assert!(matches!(e, Error::SchemaVersion { found: 9, supported: 1 }), "{e}");
        let e = Config::from_json_str(r#"{"planner": {}}"#, p()).unwrap_err();
        assert!(e.to_string().contains("schema_version"), "{e}");
    }

    #[test]
    fn errors_name_the_field() {
        let e = Config::from_json_str(r#"{"schema_version": 1, "planner": {"d_des": "far"}}"#, p()).unwrap_err();
        assert_eq!(e.class(), "schema");
        assert!(e.to_string().contains("planner.d_des"), "{e}");
        let e = Config::from_json_str(r#"{"schema_version": 1, "ik": {"dampng": 1.0}}"#, p()).unwrap_err();
        assert!(e.to_string().contains("dampng"), "{e}");
    }

    #[test]
    fn hash_tracks_content() {
        let a = LoadedConfig::load(None).unwrap();
        let mut c = a.config.clone();
        assert_eq!(config_hash(&c), a.hash());
        c.scenario.seed += 1;
        assert_ne!(config_hash(&c), a.hash());
        assert_eq!(a.hash().len(), 16);
    }

    #[test]
    fn chain_path_resolves_relative_to_config() {
        let dir = std::env::temp_dir().join(format!("reachtrack-config-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        std::fs::write(dir.join("arm.json"), serde_json::to_string(&ChainSpec::default_7r()).unwrap()).unwrap();
        std::fs::write(dir.join("cfg.json"), r#"{"schema_version": 1, "chain": "arm.json"}"#).unwrap();
        let l = LoadedConfig::load(Some(&dir.join("cfg.json"))).unwrap();
        assert_eq!(l.chain.hash(), KinematicChain::default_7r().hash());
        assert_eq!(l.hash(), LoadedConfig::load(None).unwrap().hash());
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn shipped_profile_file_is_the_builtin_profile() {
        let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/paper-table1.json");
        let l = LoadedConfig::load(Some(&path)).unwrap();
        assert_eq!(l.config, Config::default());
        assert_eq!(l.hash(), LoadedConfig::load(None).unwrap().hash());
    }
}
