//! Linear least-squares model and its local gradient.

use crate::data::{dot, SampleBatch};
use crate::CswError;

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub weights: Vec<f64>,
    pub round: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Gradient {
    pub values: Vec<f64>,
    /// Round of the model it was computed at.
    pub round: u64,
}

impl Model {
    pub fn zeros(dim: usize) -> Self {
        Model {
            weights: vec![0.0; dim],
            round: 0,
        }
    }

    /// `w <- w - eta * sum / n`, one round later.
    pub fn apply(&self, sum: &[f64], n: usize, eta: f64) -> Result<Model, CswError> {
        if sum.len() != self.weights.len() || n == 0 {
            return Err(CswError::InvalidArgument(format!(
                "update of dim {} over {n} contributors for a dim {} model",
                sum.len(),
                self.weights.len()
            )));
        }
        let weights: Vec<f64> = self
            .weights
            .iter()
            .zip(sum)
            .map(|(w, g)| w - eta * g / n as f64)
            .collect();
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(CswError::InvalidArgument("update produced non-finite weights".into()));
        }
        Ok(Model {
            weights,
            round: self.round + 1,
        })
    }
}

fn check(weights: &[f64], batch: &SampleBatch) -> Result<(), CswError> {
    if batch.is_empty() {
        return Err(CswError::InvalidArgument("empty batch".into()));
    }
    if batch.samples.iter().any(|s| s.features.len() != weights.len()) {
        return Err(CswError::InvalidArgument(format!(
            "batch features do not match model dim {}",
            weights.len()
        )));
    }
    Ok(())
}

/// Gradient of `0.5 * mean((y - w.x)^2)` over the batch.
pub fn local_train(model: &Model, batch: &SampleBatch) -> Result<Gradient, CswError> {
    check(&model.weights, batch)?;
    let mut g = vec![0.0; model.weights.len()];
    for s in &batch.samples {
        let r = s.label - dot(&model.weights, &s.features);
        for (gi, xi) in g.iter_mut().zip(&s.features) {
            *gi -= r * xi;
        }
    }
    let n = batch.len() as f64;
    g.iter_mut().for_each(|x| *x /= n);
    Ok(Gradient {
        values: g,
        round: model.round,
    })
}

pub fn loss(weights: &[f64], batch: &SampleBatch) -> Result<f64, CswError> {
    check(weights, batch)?;
    let sq: f64 = batch
        .samples
        .iter()
        .map(|s| (s.label - dot(weights, &s.features)).powi(2))
        .sum();
    Ok(0.5 * sq / batch.len() as f64)
}
