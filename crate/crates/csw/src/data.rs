//! Synthetic key frames: feature vectors labelled by a hidden linear model.

use comverse_core::fedcore::{Entries, Value};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::CswError;

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub features: Vec<f64>,
    pub label: f64,
    /// In `[0, 1)`; what a camera-side detector would flag on.
    pub anomaly: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SampleBatch {
    pub samples: Vec<Sample>,
}

/// The weights the synthetic labels come from.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    pub weights: Vec<f64>,
}

impl GroundTruth {
    pub fn random(dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        GroundTruth {
            weights: (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect(),
        }
    }

    /// `n` samples with standard normal features and label noise of std `noise`.
    pub fn sample(&self, n: usize, noise: f64, seed: u64) -> SampleBatch {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, noise.max(0.0)).expect("finite std");
        let samples = (0..n)
            .map(|_| {
                let features: Vec<f64> = self.weights.iter().map(|_| StandardNormal.sample(&mut rng)).collect();
                let label = dot(&self.weights, &features) + noise.sample(&mut rng);
                Sample {
                    features,
                    label,
                    anomaly: rng.random(),
                }
            })
            .collect();
        SampleBatch { samples }
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl SampleBatch {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn dim(&self) -> Option<usize> {
        self.samples.first().map(|s| s.features.len())
    }

    pub fn concat<'a>(batches: impl IntoIterator<Item = &'a SampleBatch>) -> SampleBatch {
        SampleBatch {
            samples: batches.into_iter().flat_map(|b| b.samples.iter().cloned()).collect(),
        }
    }

    /// Stored form inside O6: flattened features plus per-sample columns.
    pub fn to_entries(&self) -> Entries {
        let dim = self.dim().unwrap_or(0);
        Entries::from([
            ("dim".into(), Value::Ints(vec![dim as i64])),
            (
                "features".into(),
                Value::Floats(self.samples.iter().flat_map(|s| s.features.iter().copied()).collect()),
            ),
            ("labels".into(), Value::Floats(self.samples.iter().map(|s| s.label).collect())),
            ("anomaly".into(), Value::Floats(self.samples.iter().map(|s| s.anomaly).collect())),
        ])
    }

    pub fn from_entries(entries: &Entries) -> Result<SampleBatch, CswError> {
        let floats = |k: &str| {
            entries
                .get(k)
                .and_then(Value::as_floats)
                .ok_or_else(|| CswError::InvalidArgument(format!("frames entry {k} missing")))
        };
        let dim = entries
            .get("dim")
            .and_then(Value::as_ints)
            .and_then(|d| d.first().copied())
            .ok_or_else(|| CswError::InvalidArgument("frames entry dim missing".into()))? as usize;
        let (features, labels, anomaly) = (floats("features")?, floats("labels")?, floats("anomaly")?);
        if labels.len() != anomaly.len() || features.len() != labels.len() * dim {
            return Err(CswError::InvalidArgument("frame columns disagree in length".into()));
        }
        let samples = labels
            .iter()
            .zip(anomaly)
            .enumerate()
            .map(|(i, (&label, &anomaly))| Sample {
                features: features[i * dim..(i + 1) * dim].to_vec(),
                label,
                anomaly,
            })
            .collect();
        Ok(SampleBatch { samples })
    }
}

/// Which frames a child hands to its app.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub enum FrameFilter {
    #[default]
    All,
    Nothing,
    MinAnomaly(f64),
}

impl FrameFilter {
    pub fn matches(&self, s: &Sample) -> bool {
        match self {
            FrameFilter::All => true,
            FrameFilter::Nothing => false,
            FrameFilter::MinAnomaly(t) => s.anomaly >= *t,
        }
    }
}

pub fn filter_frames(raw: &SampleBatch, predicate: impl Fn(&Sample) -> bool) -> SampleBatch {
    SampleBatch {
        samples: raw.samples.iter().filter(|s| predicate(s)).cloned().collect(),
    }
}
