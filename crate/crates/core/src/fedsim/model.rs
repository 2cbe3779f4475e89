use serde::{Deserialize, Serialize};

use super::{Dataset, FedsimError, Result};
use crate::linalg;
use crate::mechanisms::Objective;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelFamily {
    /// Squared loss `½(θ·x̃ − y)²`.
    LinearRegression,
    /// Logistic loss with labels in {0, 1}.
    LogisticRegression,
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^z)` without overflow.
fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

impl ModelFamily {
    /// `θ·x̃` with the bias as the last parameter.
    pub fn score(&self, theta: &[f64], x: &[f64]) -> f64 {
        let (w, b) = theta.split_at(x.len());
        linalg::dot(w, x) + b[0]
    }

    pub fn loss(&self, theta: &[f64], x: &[f64], y: f64) -> f64 {
        let z = self.score(theta, x);
        match self {
            Self::LinearRegression => 0.5 * (z - y) * (z - y),
            Self::LogisticRegression => softplus(z) - y * z,
        }
    }

    pub fn gradient(&self, theta: &[f64], x: &[f64], y: f64) -> Vec<f64> {
        let z = self.score(theta, x);
        let r = match self {
            Self::LinearRegression => z - y,
            Self::LogisticRegression => sigmoid(z) - y,
        };
        x.iter().map(|&v| r * v).chain(std::iter::once(r)).collect()
    }
}

/// One user's loss over its local data.
pub struct LocalObjective<'a> {
    pub family: ModelFamily,
    pub data: &'a Dataset,
}

impl Objective<f64> for LocalObjective<'_> {
    fn dim(&self) -> usize {
        self.data.features() + 1
    }

    fn len(&self) -> usize {
        self.data.len()
    }

    fn example_gradient(&self, theta: &[f64], index: usize) -> Vec<f64> {
        self.family.gradient(theta, &self.data.x[index], self.data.y[index])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlobalModel {
    pub theta: Vec<f64>,
    pub family: ModelFamily,
    pub round: u64,
}

impl GlobalModel {
    pub fn zeros(family: ModelFamily, features: usize) -> Self {
        Self {
            theta: vec![0.0; features + 1],
            family,
            round: 0,
        }
    }

    /// `θ ← θ + aggregate / participants`.
    pub fn apply(&mut self, aggregate: &[f64], participants: usize) {
        let s = 1.0 / participants as f64;
        linalg::axpy(&mut self.theta, s, aggregate);
        self.round += 1;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// Mean per-example loss.
    pub loss: f64,
    /// MSE for regression, accuracy for classification.
    pub metric: f64,
}

pub fn evaluate_model(model: &GlobalModel, data: &Dataset) -> Result<Metrics> {
    if data.is_empty() {
        return Err(FedsimError::EmptyDataset);
    }
    let n = data.len() as f64;
    let f = model.family;
    let mut loss = 0.0;
    let mut metric = 0.0;
    for (x, &y) in data.x.iter().zip(&data.y) {
        loss += f.loss(&model.theta, x, y);
        let z = f.score(&model.theta, x);
        metric += match f {
            ModelFamily::LinearRegression => (z - y) * (z - y),
            ModelFamily::LogisticRegression => {
                let predicted = if z > 0.0 { 1.0 } else { 0.0 };
                if predicted == y {
                    1.0
                } else {
                    0.0
                }
            }
        };
    }
    Ok(Metrics {
        loss: loss / n,
        metric: metric / n,
    })
}
