//! Resolution of per-command settings from defaults, a TOML config file and
//! flags (in increasing precedence), and the manifest written for each run.
//!
//! A manifest is itself a valid config file: top-level `command`, `seed`,
//! `out_dir` and `threads`, plus one table keyed by the command holding every
//! resolved setting. Passing it back through `--config` reproduces the run.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use embedrank::TrainConfig;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::cli::{CabMode, MethodName};

/// Bad flags, config values or missing required inputs. Exit code 1.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

pub const DEFAULT_OUT_DIR: &str = "out";
const TOP_LEVEL_KEYS: [&str; 5] = ["command", "seed", "out_dir", "threads", "embedrank_version"];
const SECTIONS: [&str; 8] = [
    "synth",
    "train_embednet",
    "train_mlp",
    "rerank",
    "eval",
    "sweep_k",
    "sweep_margin",
    "tune_alpha",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSettings {
    pub train: Option<PathBuf>,
    pub val: Option<PathBuf>,
    #[serde(flatten)]
    pub config: TrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSettings {
    pub data: Option<PathBuf>,
    pub embednet: Option<PathBuf>,
    pub mlp: Option<PathBuf>,
    pub methods: Option<Vec<MethodName>>,
    pub alpha: f64,
    pub cab: CabMode,
    pub normalize_text: bool,
    pub k: usize,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings {
            data: None,
            embednet: None,
            mlp: None,
            methods: None,
            alpha: embedrank::DEFAULT_ALPHA,
            cab: CabMode::Both,
            normalize_text: false,
            k: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepKSettings {
    pub data: Option<PathBuf>,
    pub embednet: Option<PathBuf>,
    pub mlp: Option<PathBuf>,
    pub methods: Option<Vec<MethodName>>,
    pub alpha: f64,
    pub cab: CabMode,
    pub normalize_text: bool,
    pub ks: Vec<usize>,
}

impl Default for SweepKSettings {
    fn default() -> Self {
        let e = EvalSettings::default();
        SweepKSettings {
            data: None,
            embednet: None,
            mlp: None,
            methods: None,
            alpha: e.alpha,
            cab: e.cab,
            normalize_text: false,
            ks: vec![1, 2, 3, 5, 10, 15, 20],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RerankSettings {
    pub data: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub k: usize,
    pub alpha: f64,
    pub cab_enabled: bool,
}

impl Default for RerankSettings {
    fn default() -> Self {
        RerankSettings {
            data: None,
            model: None,
            k: 20,
            alpha: embedrank::DEFAULT_ALPHA,
            cab_enabled: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepMarginSettings {
    pub train: Option<PathBuf>,
    pub val: Option<PathBuf>,
    pub gammas: Vec<f64>,
    pub k: usize,
    #[serde(flatten)]
    pub config: TrainConfig,
}

impl Default for SweepMarginSettings {
    fn default() -> Self {
        SweepMarginSettings {
            train: None,
            val: None,
            gammas: vec![0.05, 0.1, 0.2, 0.4, 0.8],
            k: 20,
            config: TrainConfig::embednet_default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneAlphaSettings {
    pub val: Option<PathBuf>,
    pub method: MethodName,
    pub model: Option<PathBuf>,
    pub k: usize,
    pub alphas: Vec<f64>,
}

impl Default for TuneAlphaSettings {
    fn default() -> Self {
        TuneAlphaSettings {
            val: None,
            method: MethodName::Raw,
            model: None,
            k: 20,
            alphas: (0..10).map(|i| i as f64 / 10.0).collect(),
        }
    }
}

/// The parsed `--config` file.
#[derive(Debug, Default)]
pub struct ConfigFile {
    path: Option<PathBuf>,
    root: Map<String, Value>,
}

impl ConfigFile {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(ConfigFile::default());
        };
        let text = fs::read_to_string(path)
            .with_context(|| format!("cannot read config file {}", path.display()))?;
        let table: toml::Table = toml::from_str(&text)
            .map_err(|e| usage(format!("invalid config file {}: {e}", path.display())))?;
        let root = match serde_json::to_value(table)? {
            Value::Object(m) => m,
            _ => unreachable!("a TOML table serializes to an object"),
        };
        for key in root.keys() {
            if !TOP_LEVEL_KEYS.contains(&key.as_str()) && !SECTIONS.contains(&key.as_str()) {
                return Err(usage(format!(
                    "unknown key `{key}` in config file {}",
                    path.display()
                )));
            }
        }
        Ok(ConfigFile {
            path: Some(path.to_path_buf()),
            root,
        })
    }

    fn describe(&self) -> String {
        match &self.path {
            Some(p) => format!("config file {}", p.display()),
            None => "flags".into(),
        }
    }

    fn top<T: DeserializeOwned>(&self, key: &str) -> Result<Option<T>> {
        match self.root.get(key) {
            None => Ok(None),
            Some(v) => serde_json::from_value(v.clone())
                .map(Some)
                .map_err(|e| usage(format!("bad `{key}` in {}: {e}", self.describe()))),
        }
    }

    pub fn seed(&self) -> Result<Option<u64>> {
        self.top("seed")
    }

    pub fn out_dir(&self) -> Result<Option<PathBuf>> {
        self.top("out_dir")
    }

    pub fn threads(&self) -> Result<Option<usize>> {
        self.top("threads")
    }

    /// Defaults, overlaid with the file's section for `key`, overlaid with
    /// every flag that was given.
    pub fn resolve<T, F>(&self, key: &str, defaults: T, flags: &F) -> Result<T>
    where
        T: Serialize + DeserializeOwned,
        F: Serialize,
    {
        let mut merged = match serde_json::to_value(&defaults)? {
            Value::Object(m) => m,
            _ => unreachable!("settings serialize to an object"),
        };
        let known: Vec<String> = merged.keys().cloned().collect();
        if let Some(section) = self.root.get(key) {
            let Value::Object(section) = section else {
                return Err(usage(format!(
                    "`{key}` in {} must be a table",
                    self.describe()
                )));
            };
            for (k, v) in section {
                if !known.contains(k) {
                    return Err(usage(format!(
                        "unknown setting `{key}.{k}` in {}",
                        self.describe()
                    )));
                }
                merged.insert(k.clone(), v.clone());
            }
        }
        if let Value::Object(flags) = serde_json::to_value(flags)? {
            for (k, v) in flags {
                if !v.is_null() {
                    merged.insert(k, v);
                }
            }
        }
        serde_json::from_value(Value::Object(merged)).map_err(|e| {
            usage(format!(
                "invalid `{key}` settings from {}: {e}",
                self.describe()
            ))
        })
    }
}

#[derive(Debug, Serialize)]
struct ManifestHeader<'a> {
    command: &'a str,
    embedrank_version: &'a str,
    seed: u64,
    out_dir: &'a Path,
    #[serde(skip_serializing_if = "Option::is_none")]
    threads: Option<usize>,
}

/// Write `<command>.manifest.toml` into the output directory.
pub fn write_manifest<T: Serialize>(
    out_dir: &Path,
    key: &str,
    seed: u64,
    threads: Option<usize>,
    settings: &T,
) -> Result<PathBuf> {
    let header = ManifestHeader {
        command: key,
        embedrank_version: env!("CARGO_PKG_VERSION"),
        seed,
        out_dir,
        threads,
    };
    let mut table = toml::Table::try_from(&header)?;
    table.insert(key.to_string(), toml::Value::try_from(settings)?);
    let path = out_dir.join(format!("{key}.manifest.toml"));
    fs::write(&path, toml::to_string(&table)?)
        .with_context(|| format!("cannot write manifest {}", path.display()))?;
    Ok(path)
}
