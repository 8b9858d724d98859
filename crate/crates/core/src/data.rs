//! Labeled dataset bundles: on-disk ingestion and seeded synthesis.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imbalance::ClassHistogram;
use crate::tensor::{decode, encode_i64, Decoded, Tensor};

pub const FEATURES_FILE: &str = "features.bin";
pub const LABELS_FILE: &str = "labels.bin";
pub const CLASSES_FILE: &str = "classes.txt";

/// Features `[N×C_in×H×W]` or `[N×F]`, labels and class names.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetBundle {
    features: Tensor<f64>,
    labels: Vec<usize>,
    class_names: Vec<String>,
}

impl DatasetBundle {
    pub fn new(features: Tensor<f64>, labels: Vec<usize>, class_names: Vec<String>) -> Result<Self> {
        let n = features.shape()[0];
        if features.rank() < 2 || n != labels.len() {
            return Err(Error::Shape {
                op: "dataset bundle",
                lhs: features.shape().to_vec(),
                rhs: vec![labels.len()],
            });
        }
        if class_names.is_empty() {
            return Err(Error::contract("dataset needs at least one class"));
        }
        if let Some((i, &l)) = labels.iter().enumerate().find(|(_, &l)| l >= class_names.len()) {
            return Err(Error::contract(format!(
                "label {l} at sample {i} outside 0..{}",
                class_names.len()
            )));
        }
        Ok(Self {
            features,
            labels,
            class_names,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn features(&self) -> &Tensor<f64> {
        &self.features
    }

    /// Shape of one sample (everything after the leading axis).
    pub fn sample_shape(&self) -> &[usize] {
        &self.features.shape()[1..]
    }

    pub fn sample_len(&self) -> usize {
        self.sample_shape().iter().product()
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        let n = self.sample_len();
        &self.features.data()[i * n..(i + 1) * n]
    }

    pub fn histogram(&self) -> ClassHistogram {
        ClassHistogram::from_labels(self.labels.iter().copied(), self.num_classes()).expect("labels validated")
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(FEATURES_FILE), self.features.encode())?;
        let labels: Vec<i64> = self.labels.iter().map(|&l| l as i64).collect();
        std::fs::write(dir.join(LABELS_FILE), encode_i64(&[labels.len()], &labels))?;
        let mut names = self.class_names.join("\n");
        names.push('\n');
        std::fs::write(dir.join(CLASSES_FILE), names)?;
        Ok(())
    }

    /// Reads `features.bin`, `labels.bin` and `classes.txt` from `dir`.
    pub fn load(dir: &Path) -> Result<Self> {
        let read = |name: &str| -> Result<(Vec<u8>, String)> {
            let p = dir.join(name);
            let bytes = std::fs::read(&p).map_err(|e| Error::Ingest {
                file: p.display().to_string(),
                offset: 0,
                message: e.to_string(),
            })?;
            Ok((bytes, p.display().to_string()))
        };

        let (bytes, fname) = read(FEATURES_FILE)?;
        let mut off = 0;
        let features = decode(&bytes, &mut off, &fname)?;
        if off != bytes.len() {
            return Err(Error::Ingest {
                file: fname,
                offset: off,
                message: "trailing bytes after tensor".into(),
            });
        }
        let features = features.into_f64().ok_or_else(|| Error::Ingest {
            file: fname.clone(),
            offset: 0,
            message: "features must be f32 or f64".into(),
        })?;
        if features.rank() < 2 {
            return Err(Error::Ingest {
                file: fname,
                offset: 0,
                message: format!("features need rank >= 2, got shape {:?}", features.shape()),
            });
        }

        let (cbytes, cname) = read(CLASSES_FILE)?;
        let text = String::from_utf8(cbytes).map_err(|e| Error::Ingest {
            file: cname.clone(),
            offset: e.utf8_error().valid_up_to(),
            message: "not UTF-8".into(),
        })?;
        let class_names: Vec<String> = text.lines().map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect();
        if class_names.is_empty() {
            return Err(Error::Ingest {
                file: cname,
                offset: 0,
                message: "no class names".into(),
            });
        }

        let (lbytes, lname) = read(LABELS_FILE)?;
        let mut off = 0;
        let (shape, raw) = match decode(&lbytes, &mut off, &lname)? {
            Decoded::I64 { shape, data } => (shape, data),
            _ => {
                return Err(Error::Ingest {
                    file: lname,
                    offset: 0,
                    message: "labels must have dtype i64".into(),
                })
            }
        };
        let payload_start = off - raw.len() * 8;
        if shape.len() != 1 || shape[0] != features.shape()[0] {
            return Err(Error::Ingest {
                file: lname,
                offset: 0,
                message: format!(
                    "label shape {shape:?} does not match {} feature rows",
                    features.shape()[0]
                ),
            });
        }
        let c = class_names.len();
        let mut labels = Vec::with_capacity(raw.len());
        for (i, &v) in raw.iter().enumerate() {
            if v < 0 || v as usize >= c {
                return Err(Error::Ingest {
                    file: lname,
                    offset: payload_start + 8 * i,
                    message: format!("label {v} at sample {i} outside 0..{c}"),
                });
            }
            labels.push(v as usize);
        }
        Self::new(features, labels, class_names)
    }

    /// Converted feature buffer for training in precision `T`.
    pub fn features_as<T: crate::tensor::Scalar>(&self) -> Vec<T> {
        self.features.data().iter().map(|&v| T::of(v)).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum FeatureSpec {
    /// Isotropic Gaussian blob per class; class means are drawn from
    /// `N(0, separation²)` per dimension, samples add `N(0, noise²)`.
    Tabular { dim: usize, separation: f64, noise: f64 },
    /// Oriented sinusoidal stripes per class plus pixel noise.
    Image { channels: usize, size: usize, noise: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub counts: Vec<usize>,
    pub features: FeatureSpec,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            counts: vec![1000, 400, 200, 60, 20],
            features: FeatureSpec::Tabular {
                dim: 16,
                separation: 1.0,
                noise: 1.0,
            },
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.counts.is_empty() || self.counts.contains(&0) {
            return Err(Error::config(format!("synthetic counts must be nonempty and positive, got {:?}", self.counts)));
        }
        match self.features {
            FeatureSpec::Tabular { dim, separation, noise } => {
                if dim == 0 || !(separation >= 0.0) || !(noise >= 0.0) {
                    return Err(Error::config("tabular synth needs dim >= 1, separation >= 0, noise >= 0"));
                }
            }
            FeatureSpec::Image { channels, size, noise } => {
                if channels == 0 || size == 0 || size > 32 || !(noise >= 0.0) {
                    return Err(Error::config("image synth needs channels >= 1, 1 <= size <= 32, noise >= 0"));
                }
            }
        }
        Ok(())
    }
}

/// Deterministic long-tailed dataset with exactly `spec.counts[c]`
/// samples of class `c`, in class order.
pub fn synthesize_longtail(spec: &SynthSpec) -> Result<DatasetBundle> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let c = spec.counts.len();
    let n: usize = spec.counts.iter().sum();
    let labels: Vec<usize> = spec
        .counts
        .iter()
        .enumerate()
        .flat_map(|(k, &m)| std::iter::repeat_n(k, m))
        .collect();
    let mut gauss = move || -> f64 { rng.sample(StandardNormal) };
    let features = match spec.features {
        FeatureSpec::Tabular { dim, separation, noise } => {
            let means: Vec<Vec<f64>> = (0..c).map(|_| (0..dim).map(|_| separation * gauss()).collect()).collect();
            let mut data = Vec::with_capacity(n * dim);
            for &l in &labels {
                for m in &means[l] {
                    data.push(m + noise * gauss());
                }
            }
            Tensor::new(vec![n, dim], data)?
        }
        FeatureSpec::Image { channels, size, noise } => {
            let mut data = Vec::with_capacity(n * channels * size * size);
            let tau = std::f64::consts::TAU;
            for &l in &labels {
                let angle = std::f64::consts::PI * l as f64 / c as f64;
                let freq = 1.0 + (l % 3) as f64;
                let phase = 0.25 * gauss();
                let (ca, sa) = (angle.cos(), angle.sin());
                for ch in 0..channels {
                    let gain = 1.0 - 0.2 * ch as f64;
                    for y in 0..size {
                        for x in 0..size {
                            let u = (x as f64 * ca + y as f64 * sa) / size as f64;
                            data.push(gain * (tau * freq * u + phase).sin() + noise * gauss());
                        }
                    }
                }
            }
            Tensor::new(vec![n, channels, size, size], data)?
        }
    };
    DatasetBundle::new(features, labels, (0..c).map(|k| format!("class-{k}")).collect())
}
