//! Run configuration. Values are layered: built-in defaults, then a TOML
//! file, then `key=value` overrides with dotted keys such as
//! `pipeline.n_test=800`. A later layer wins. The seed falls back to the
//! [`SEED_ENV`] environment variable when neither the file nor an override
//! sets it.

use std::path::Path;

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::denoiser::{DetectionSnapDenoiser, Denoiser, IdentityDenoiser, OracleConfig, OracleDenoiser};
use crate::error::{Error, Result};
use crate::pipeline::PipelineConfig;
use crate::simulator::SceneSpec;

/// Environment variable holding the default seed.
pub const SEED_ENV: &str = "DIFFTRACK_SEED";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DenoiserKind {
    /// Snaps to ground truth; needs a scene.
    #[default]
    Oracle,
    /// Snaps to per-frame detections.
    DetectionSnap,
    Identity,
}

impl DenoiserKind {
    pub fn name(&self) -> &'static str {
        match self {
            DenoiserKind::Oracle => "oracle",
            DenoiserKind::DetectionSnap => "detection-snap",
            DenoiserKind::Identity => "identity",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SceneKind {
    Linear,
    #[default]
    Crowded,
    Dance,
}

impl SceneKind {
    pub fn name(&self) -> &'static str {
        match self {
            SceneKind::Linear => "linear",
            SceneKind::Crowded => "crowded",
            SceneKind::Dance => "dance",
        }
    }
}

/// Synthetic scene settings; the seed comes from the run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneConfig {
    pub kind: SceneKind,
    pub objects: usize,
    pub frames: usize,
    /// Overrides the preset's occlusion rate when non-negative.
    pub occlusion_rate: f64,
    pub separated: bool,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            kind: SceneKind::Crowded,
            objects: 20,
            frames: 50,
            occlusion_rate: -1.0,
            separated: false,
        }
    }
}

impl SceneConfig {
    pub fn spec(&self, seed: u64) -> SceneSpec {
        let base = match self.kind {
            SceneKind::Linear => SceneSpec::linear(self.objects, self.frames, seed),
            SceneKind::Crowded => SceneSpec::crowded(self.objects, self.frames, seed),
            SceneKind::Dance => SceneSpec::dance(self.objects, self.frames, seed),
        };
        SceneSpec {
            occlusion_rate: if self.occlusion_rate >= 0.0 {
                self.occlusion_rate
            } else {
                base.occlusion_rate
            },
            separated: self.separated,
            ..base
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub denoiser: DenoiserKind,
    /// IoU gate of the evaluation.
    pub iou_gate: f64,
    pub pipeline: PipelineConfig,
    pub oracle: OracleConfig,
    pub scene: SceneConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            denoiser: DenoiserKind::Oracle,
            iou_gate: 0.5,
            pipeline: PipelineConfig::default(),
            oracle: OracleConfig::default(),
            scene: SceneConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.pipeline.validate()?;
        self.oracle.validate()?;
        if !(0.0..=1.0).contains(&self.iou_gate) {
            return Err(Error::Config(format!("iou_gate {} outside [0, 1]", self.iou_gate)));
        }
        Ok(())
    }

    pub fn build_denoiser(&self) -> Result<Box<dyn Denoiser>> {
        Ok(match self.denoiser {
            DenoiserKind::Oracle => Box::new(OracleDenoiser::new(self.oracle)?),
            DenoiserKind::DetectionSnap => Box::new(DetectionSnapDenoiser::default()),
            DenoiserKind::Identity => Box::new(IdentityDenoiser),
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

/// Splits `key=value`.
pub fn parse_assignment(s: &str) -> Result<(String, String)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("expected key=value, found {s:?}")))?;
    let k = k.trim();
    if k.is_empty() {
        return Err(Error::Config(format!("empty key in {s:?}")));
    }
    Ok((k.to_string(), v.trim().to_string()))
}

/// A TOML literal when it parses as one, a bare string otherwise.
fn literal(raw: &str) -> Value {
    match format!("v = {raw}").parse::<Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => Value::String(raw.to_string()),
    }
}

/// Overlays `src` onto `dst`, rejecting keys `dst` does not have.
fn merge(dst: &mut Table, src: Table, prefix: &str) -> Result<()> {
    for (k, v) in src {
        let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match (dst.get_mut(&k), v) {
            (None, _) => return Err(Error::Config(format!("unknown key {path}"))),
            (Some(Value::Table(d)), Value::Table(s)) => merge(d, s, &path)?,
            (Some(Value::Table(_)), _) => return Err(Error::Config(format!("{path} must be a table"))),
            (Some(slot @ Value::Float(_)), Value::Integer(i)) => *slot = Value::Float(i as f64),
            (Some(slot), v) => *slot = v,
        }
    }
    Ok(())
}

fn set(table: &mut Table, key: &str, raw: &str) -> Result<()> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().expect("split yields one part");
    let mut nested = Table::new();
    nested.insert(last.to_string(), literal(raw));
    for p in parts.into_iter().rev() {
        let mut outer = Table::new();
        outer.insert(p.to_string(), Value::Table(nested));
        nested = outer;
    }
    merge(table, nested, "")
}

/// Layers defaults, the optional file contents and the overrides.
///
/// `env_seed` is the raw value of [`SEED_ENV`], if set.
pub fn resolve(file: Option<&str>, overrides: &[(String, String)], env_seed: Option<&str>) -> Result<RunConfig> {
    let Value::Table(mut table) = Value::try_from(RunConfig::default()).expect("defaults serialize") else {
        unreachable!("a struct serializes to a table")
    };
    if let Some(raw) = env_seed {
        let seed: u64 = raw
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("{SEED_ENV}={raw:?} is not an unsigned integer")))?;
        table.insert("seed".into(), Value::Integer(seed as i64));
    }
    if let Some(text) = file {
        let parsed: Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        merge(&mut table, parsed, "")?;
    }
    for (k, v) in overrides {
        set(&mut table, k, v)?;
    }
    let cfg: RunConfig = Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

/// [`resolve`] with the file read from `path`.
pub fn load(path: Option<&Path>, overrides: &[(String, String)], env_seed: Option<&str>) -> Result<RunConfig> {
    let text = match path {
        Some(p) => Some(std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?),
        None => None,
    };
    resolve(text.as_deref(), overrides, env_seed)
}
