//! Experiment configuration: one TOML document with a section per
//! component, validated as a whole before anything runs.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{FeatureSpec, SynthSpec};
use crate::error::{Error, Result};
use crate::federation::{Aggregation, FederationConfig};
use crate::losses::{LossConfig, LossKind};
use crate::metrics::default_thresholds;
use crate::model::{MlpConfig, ModelSpec, ViTConfig};
use crate::partition::{PartitionMode, PartitionSpec, TestSplit};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunMode {
    Federated,
    Centralized,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "lowercase")]
pub enum DataSource {
    Synth(SynthSpec),
    Path { path: PathBuf },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisConfig {
    /// Decision-curve thresholds, each in (0, 1).
    pub thresholds: Vec<f64>,
    /// Share of classes (by imbalance score) forming the tail group.
    pub tail_fraction: f64,
    /// Number of global-test samples to compute rollout masks for.
    pub rollout_samples: usize,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            thresholds: default_thresholds(),
            tail_fraction: 0.3,
            rollout_samples: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub mode: RunMode,
    pub precision: Precision,
    pub out_dir: PathBuf,
    pub data: DataSource,
    pub model: ModelSpec,
    pub partition: PartitionSpec,
    pub federation: FederationConfig,
    pub loss: LossConfig,
    pub analysis: AnalysisConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: "default".into(),
            mode: RunMode::Federated,
            precision: Precision::F32,
            out_dir: PathBuf::from("runs/default"),
            data: DataSource::Synth(SynthSpec {
                counts: vec![1000, 400, 200, 60, 20],
                features: FeatureSpec::Image {
                    channels: 1,
                    size: 32,
                    noise: 0.3,
                },
                seed: 0,
            }),
            model: ModelSpec::Vit(ViTConfig::default()),
            partition: PartitionSpec::default(),
            federation: FederationConfig::default(),
            loss: LossConfig::default(),
            analysis: AnalysisConfig::default(),
        }
    }
}

/// Names accepted by [`ExperimentConfig::preset`].
pub const PRESETS: &[&str] = &["default", "smoke", "centralized"];

impl ExperimentConfig {
    /// Base configurations. `smoke` is the desk-scale tabular long-tail
    /// setup with an MLP; `centralized` is `default` without clients.
    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "default" => Ok(Self::default()),
            "smoke" => Ok(Self::smoke()),
            "centralized" => Ok(Self {
                name: "centralized".into(),
                mode: RunMode::Centralized,
                out_dir: PathBuf::from("runs/centralized"),
                ..Self::default()
            }),
            other => Err(Error::config(format!("unknown preset {other:?}; known: {PRESETS:?}"))),
        }
    }

    pub fn smoke() -> Self {
        Self {
            name: "smoke".into(),
            out_dir: PathBuf::from("runs/smoke"),
            data: DataSource::Synth(SynthSpec {
                counts: vec![1000, 400, 200, 60, 20],
                features: FeatureSpec::Tabular {
                    dim: 16,
                    separation: 1.0,
                    noise: 1.0,
                },
                seed: 0,
            }),
            model: ModelSpec::Mlp(MlpConfig {
                input_dim: 16,
                hidden_dim: 32,
                num_classes: 5,
            }),
            partition: PartitionSpec {
                mode: PartitionMode::Fixed,
                ratios: vec![0.5, 0.3, 0.2],
                test_split: TestSplit::Holdout,
                test_fraction: 0.2,
                ..PartitionSpec::default()
            },
            federation: FederationConfig {
                learning_rate: 1e-3,
                ..FederationConfig::default()
            },
            ..Self::default()
        }
    }

    /// Sets every seed (data synthesis, partition, training) to `seed`.
    pub fn set_seed(&mut self, seed: u64) {
        self.federation.seed = seed;
        self.partition.seed = seed;
        if let DataSource::Synth(s) = &mut self.data {
            s.seed = seed;
        }
    }

    pub fn num_classes(&self) -> Option<usize> {
        match &self.data {
            DataSource::Synth(s) => Some(s.counts.len()),
            DataSource::Path { .. } => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return Err(Error::config(format!("name {:?} must be a nonempty plain file name", self.name)));
        }
        self.model.validate()?;
        self.partition.validate()?;
        self.federation.validate()?;
        self.loss.validate()?;
        if let DataSource::Synth(s) = &self.data {
            s.validate()?;
            if s.counts.len() != self.model.num_classes() {
                return Err(Error::config(format!(
                    "synthetic data has {} classes, model.num_classes = {}",
                    s.counts.len(),
                    self.model.num_classes()
                )));
            }
            let sample_len = match s.features {
                FeatureSpec::Tabular { dim, .. } => dim,
                FeatureSpec::Image { channels, size, .. } => channels * size * size,
            };
            if sample_len != self.model.input_len() {
                return Err(Error::config(format!(
                    "synthetic samples have {sample_len} features, model expects {}",
                    self.model.input_len()
                )));
            }
        }
        let a = &self.analysis;
        if let Some(t) = a.thresholds.iter().find(|t| !(**t > 0.0 && **t < 1.0)) {
            return Err(Error::config(format!("analysis threshold {t} outside (0, 1)")));
        }
        if !(a.tail_fraction > 0.0 && a.tail_fraction < 1.0) {
            return Err(Error::config(format!("tail_fraction must lie in (0, 1), got {}", a.tail_fraction)));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config(format!("cannot serialize config: {e}")))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))
    }

    /// Applies a `dotted.key=value` override. The value is parsed as a
    /// TOML literal, falling back to a bare string.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| Error::config(format!("override {assignment:?} is not key=value")))?;
        let key = key.trim();
        let raw = raw.trim();
        let value: toml::Value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(raw.to_string()));
        let mut doc = toml::Value::try_from(&*self).map_err(|e| Error::config(e.to_string()))?;
        let mut cursor = &mut doc;
        let parts: Vec<&str> = key.split('.').collect();
        for (i, part) in parts.iter().enumerate() {
            let table = cursor
                .as_table_mut()
                .ok_or_else(|| Error::config(format!("override key {key:?}: {part:?} is not inside a section")))?;
            if i + 1 == parts.len() {
                table.insert(part.to_string(), value.clone());
                break;
            }
            cursor = table
                .get_mut(*part)
                .ok_or_else(|| Error::config(format!("override key {key:?}: unknown section {part:?}")))?;
        }
        *self = doc
            .try_into()
            .map_err(|e: toml::de::Error| Error::config(format!("override {assignment:?}: {e}")))?;
        Ok(())
    }
}

/// One setting of a sweep: a label and the overrides that produce it.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepPoint {
    pub label: String,
    pub overrides: Vec<String>,
}

pub const SWEEPS: &[&str] = &["ablation-loss", "ablation-distribution", "lr-sweep", "batch-sweep", "aggregation"];

/// Preset sweeps; each point is applied on top of a base config.
pub fn sweep_points(name: &str) -> Result<Vec<SweepPoint>> {
    let pt = |label: &str, o: &[String]| SweepPoint {
        label: label.to_string(),
        overrides: o.to_vec(),
    };
    Ok(match name {
        "ablation-loss" => [LossKind::Ce, LossKind::Focal, LossKind::Dafl]
            .iter()
            .map(|k| pt(k.label(), &[format!("loss.kind=\"{}\"", k.label())]))
            .collect(),
        "ablation-distribution" => [
            ("C1", [0.5, 0.3, 0.2]),
            ("C2", [0.333, 0.333, 0.333]),
            ("C3", [0.556, 0.278, 0.166]),
        ]
        .iter()
        .map(|(label, r)| {
            let r = crate::partition::normalize_ratios(r).expect("constant ratios");
            pt(
                label,
                &[
                    "partition.mode=\"fixed\"".into(),
                    "partition.test_split=\"holdout\"".into(),
                    format!("partition.ratios=[{}]", r.iter().map(|v| format!("{v:?}")).collect::<Vec<_>>().join(", ")),
                ],
            )
        })
        .collect(),
        "lr-sweep" => [1e-2, 1e-3, 1e-4, 1e-5, 1e-6, 1e-7]
            .iter()
            .map(|lr: &f64| pt(&format!("lr-{lr:e}"), &[format!("federation.learning_rate={lr:e}")]))
            .collect(),
        "batch-sweep" => [4, 8, 16, 32, 64]
            .iter()
            .map(|b| pt(&format!("batch-{b}"), &[format!("federation.batch_size={b}")]))
            .collect(),
        "aggregation" => [Aggregation::DaflWeighted, Aggregation::SampleWeighted, Aggregation::Uniform]
            .iter()
            .map(|a| {
                let s = serde_json::to_value(a).expect("enum").as_str().expect("string").to_string();
                pt(&s, &[format!("federation.aggregation=\"{s}\"")])
            })
            .collect(),
        other => return Err(Error::config(format!("unknown sweep {other:?}; known: {SWEEPS:?}"))),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_roundtrip() {
        for name in PRESETS {
            let c = ExperimentConfig::preset(name).unwrap();
            c.validate().unwrap();
            let text = c.to_toml().unwrap();
            assert_eq!(ExperimentConfig::from_toml(&text).unwrap(), c, "{text}");
        }
    }

    #[test]
    fn unknown_key_rejected() {
        let mut text = ExperimentConfig::default().to_toml().unwrap();
        text = text.replacen("[federation]\n", "[federation]\nbogus = 1\n", 1);
        let e = ExperimentConfig::from_toml(&text).unwrap_err();
        assert!(e.is_config() && e.to_string().contains("bogus"), "{e}");
    }

    #[test]
    fn overrides() {
        let mut c = ExperimentConfig::default();
        c.apply_override("federation.learning_rate=0.01").unwrap();
        c.apply_override("loss.kind=ce").unwrap();
        c.apply_override("partition.ratios=[0.5, 0.5]").unwrap();
        assert_eq!(c.federation.learning_rate, 0.01);
        assert_eq!(c.loss.kind, LossKind::Ce);
        assert_eq!(c.partition.ratios, vec![0.5, 0.5]);
        assert!(c.apply_override("federation.nope=1").unwrap_err().is_config());
        assert!(c.apply_override("nosuch.key=1").unwrap_err().is_config());
    }

    #[test]
    fn sweeps_apply_cleanly() {
        for s in SWEEPS {
            for p in sweep_points(s).unwrap() {
                let mut c = ExperimentConfig::default();
                for o in &p.overrides {
                    c.apply_override(o).unwrap();
                }
                c.validate().unwrap();
            }
        }
    }

    #[test]
    fn mismatched_model_rejected() {
        let mut c = ExperimentConfig::smoke();
        c.apply_override("model.num_classes=4").unwrap();
        assert!(c.validate().unwrap_err().is_config());
    }
}
