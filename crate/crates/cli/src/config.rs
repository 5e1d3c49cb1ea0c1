//! Flat `key = value` run configuration.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use lesion_core::data::TaskId;
use lesion_core::models::ModelKind;
use lesion_core::splits::SplitFractions;
use lesion_core::train::Schedule;

use crate::CliError;

#[derive(Debug, Clone, PartialEq)]
pub enum BackboneSource {
    TinyRandom,
    TinyPretext,
    WeightsFile(PathBuf),
}

impl BackboneSource {
    fn parse(s: &str) -> Result<Self, CliError> {
        match s {
            "tiny-random" => Ok(BackboneSource::TinyRandom),
            "tiny-pretext" => Ok(BackboneSource::TinyPretext),
            other => match other.strip_prefix("weights-file:") {
                Some(p) if !p.is_empty() => Ok(BackboneSource::WeightsFile(PathBuf::from(p))),
                _ => Err(CliError::Config(format!(
                    "backbone must be tiny-random, tiny-pretext or weights-file:<path>, got `{other}`"
                ))),
            },
        }
    }
}

/// Every key the configuration understands.
pub const KEYS: &[&str] = &[
    "images_dir",
    "ground_truth",
    "metadata",
    "work_dir",
    "task",
    "model",
    "split_fractions",
    "oversample_factor",
    "seed",
    "backbone",
    "schedule",
    "scratch_size",
    "transfer_size",
    "batch_size",
    "scratch_epochs",
    "stage1_epochs",
    "finetune_max_epochs",
    "pretext_count",
    "pretext_epochs",
    "threads",
];

/// Raw key/value layers; later layers win.
#[derive(Debug, Clone, Default)]
pub struct RawConfig {
    values: BTreeMap<String, String>,
}

impl RawConfig {
    /// Parses `key = value` lines; `#` starts a comment at line start or
    /// after whitespace. Relative paths resolve against the file's directory.
    pub fn from_file(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let mut raw = RawConfig::default();
        for (i, line) in text.lines().enumerate() {
            let line = strip_comment(line).trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                CliError::Config(format!("{}:{}: expected `key = value`", path.display(), i + 1))
            })?;
            let (k, v) = (k.trim(), v.trim());
            check_key(k).map_err(|e| CliError::Config(format!("{}:{}: {e}", path.display(), i + 1)))?;
            let v = if is_path_key(k) && !v.is_empty() {
                resolve(base, v)
            } else if k == "backbone" {
                match v.strip_prefix("weights-file:") {
                    Some(p) => format!("weights-file:{}", resolve(base, p)),
                    None => v.to_string(),
                }
            } else {
                v.to_string()
            };
            raw.values.insert(k.to_string(), v);
        }
        Ok(raw)
    }

    pub fn set(&mut self, key: &str, value: impl Into<String>) -> Result<(), CliError> {
        check_key(key).map_err(CliError::Config)?;
        self.values.insert(key.to_string(), value.into());
        Ok(())
    }

    /// `KEY=VALUE` from the command line.
    pub fn set_pair(&mut self, pair: &str) -> Result<(), CliError> {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("--set expects KEY=VALUE, got `{pair}`")))?;
        self.set(k.trim(), v.trim())
    }

    pub fn merge(&mut self, other: RawConfig) {
        self.values.extend(other.values);
    }

    fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str).filter(|v| !v.is_empty())
    }

    fn parse<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>, CliError> {
        self.get(key)
            .map(|v| {
                v.parse::<T>()
                    .map_err(|_| CliError::Config(format!("invalid value `{v}` for `{key}`")))
            })
            .transpose()
    }
}

fn strip_comment(line: &str) -> &str {
    if line.trim_start().starts_with('#') {
        return "";
    }
    match line.find(" #").or_else(|| line.find("\t#")) {
        Some(i) => &line[..i],
        None => line,
    }
}

fn check_key(key: &str) -> Result<(), String> {
    if KEYS.contains(&key) {
        Ok(())
    } else {
        Err(format!("unknown config key `{key}`"))
    }
}

fn is_path_key(key: &str) -> bool {
    matches!(key, "images_dir" | "ground_truth" | "metadata" | "work_dir")
}

fn resolve(base: &Path, v: &str) -> String {
    let p = Path::new(v);
    if p.is_absolute() {
        v.to_string()
    } else {
        base.join(p).display().to_string()
    }
}

/// Typed configuration after defaults and validation.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub images_dir: Option<PathBuf>,
    pub ground_truth: Option<PathBuf>,
    pub metadata: Option<PathBuf>,
    pub work_dir: PathBuf,
    pub task: TaskId,
    pub model: Option<ModelKind>,
    pub fractions: SplitFractions,
    pub oversample_factor: usize,
    pub seed: Option<u64>,
    pub backbone: BackboneSource,
    pub schedule: Schedule,
    pub scratch_size: usize,
    pub transfer_size: usize,
    pub pretext_count: usize,
    pub pretext_epochs: usize,
    pub threads: Option<usize>,
}

impl RunConfig {
    pub fn from_raw(raw: &RawConfig) -> Result<Self, CliError> {
        let fractions = match raw.get("split_fractions") {
            None => SplitFractions::STANDARD,
            Some(v) => {
                let parts: Vec<f64> = v
                    .split(',')
                    .map(|x| x.trim().parse::<f64>())
                    .collect::<Result<_, _>>()
                    .map_err(|_| CliError::Config(format!("invalid split_fractions `{v}`")))?;
                let [a, b, c, d] = parts[..] else {
                    return Err(CliError::Config(format!(
                        "split_fractions needs 4 values (train,validation,test,spare), got `{v}`"
                    )));
                };
                SplitFractions::new(a, b, c, d).map_err(|e| CliError::Config(e.to_string()))?
            }
        };
        let mut schedule = match raw.get("schedule").unwrap_or("full") {
            "full" => Schedule::FULL,
            "desk" => Schedule::DESK,
            other => return Err(CliError::Config(format!("schedule must be full or desk, got `{other}`"))),
        };
        if let Some(v) = raw.parse("batch_size")? {
            schedule.batch_size = v;
        }
        if let Some(v) = raw.parse("scratch_epochs")? {
            schedule.scratch_epochs = v;
        }
        if let Some(v) = raw.parse("stage1_epochs")? {
            schedule.stage1_epochs = v;
        }
        if let Some(v) = raw.parse("finetune_max_epochs")? {
            schedule.finetune_max_epochs = v;
        }
        let positive = |key: &str, v: usize| {
            if v == 0 {
                Err(CliError::Config(format!("`{key}` must be >= 1")))
            } else {
                Ok(v)
            }
        };
        positive("batch_size", schedule.batch_size)?;
        positive("scratch_epochs", schedule.scratch_epochs)?;
        positive("stage1_epochs", schedule.stage1_epochs)?;
        positive("finetune_max_epochs", schedule.finetune_max_epochs)?;
        let task = match raw.get("task") {
            Some(v) => v.parse().map_err(|e: lesion_core::Error| CliError::Config(e.to_string()))?,
            None => TaskId::Task1,
        };
        let model = raw
            .get("model")
            .map(|v| v.parse::<ModelKind>())
            .transpose()
            .map_err(|e| CliError::Config(e.to_string()))?;
        Ok(RunConfig {
            images_dir: raw.get("images_dir").map(PathBuf::from),
            ground_truth: raw.get("ground_truth").map(PathBuf::from),
            metadata: raw.get("metadata").map(PathBuf::from),
            work_dir: PathBuf::from(raw.get("work_dir").unwrap_or("work")),
            task,
            model,
            fractions,
            oversample_factor: positive("oversample_factor", raw.parse("oversample_factor")?.unwrap_or(3))?,
            seed: raw.parse("seed")?,
            backbone: BackboneSource::parse(raw.get("backbone").unwrap_or("tiny-pretext"))?,
            schedule,
            scratch_size: positive("scratch_size", raw.parse("scratch_size")?.unwrap_or(128))?,
            transfer_size: positive("transfer_size", raw.parse("transfer_size")?.unwrap_or(299))?,
            pretext_count: positive("pretext_count", raw.parse("pretext_count")?.unwrap_or(600))?,
            pretext_epochs: positive("pretext_epochs", raw.parse("pretext_epochs")?.unwrap_or(20))?,
            threads: raw.parse("threads")?,
        })
    }

    pub fn seed(&self) -> Result<u64, CliError> {
        self.seed
            .ok_or_else(|| CliError::Config("a seed is required (--seed or `seed = ...`)".into()))
    }

    pub fn model(&self) -> Result<ModelKind, CliError> {
        self.model
            .ok_or_else(|| CliError::Config("a model is required (--model or `model = ...`)".into()))
    }

    pub fn ground_truth(&self) -> Result<&Path, CliError> {
        existing(self.ground_truth.as_deref(), "ground_truth")
    }

    pub fn images_dir(&self) -> Result<&Path, CliError> {
        existing(self.images_dir.as_deref(), "images_dir")
    }

    pub fn metadata(&self) -> Result<Option<&Path>, CliError> {
        match self.metadata.as_deref() {
            None => Ok(None),
            Some(p) => existing(Some(p), "metadata").map(Some),
        }
    }
}

fn existing<'a>(p: Option<&'a Path>, key: &str) -> Result<&'a Path, CliError> {
    let p = p.ok_or_else(|| CliError::Config(format!("`{key}` is not configured")))?;
    if p.exists() {
        Ok(p)
    } else {
        Err(CliError::Config(format!("`{key}` path {} does not exist", p.display())))
    }
}
