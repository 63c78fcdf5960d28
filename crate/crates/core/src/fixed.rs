//! The fixed part `f(x)` of the mixed models, abstracted over its learner.
//!
//! MERF and GMERF only need three things from the fixed part: refit it on a
//! target with case weights, predict new rows, and give honest (out-of-bag)
//! predictions for the training rows. The random forest is the production
//! learner; [`LinearPredictor`] plugs in a known linear predictor, which turns
//! GMERF into the PQL Poisson GLMM.

use serde::{Deserialize, Serialize};

use crate::data::Covariates;
use crate::error::{Result, SaeError};
use crate::forest::{fit_forest, Forest, ForestParams};

/// Fitted fixed part.
pub trait FixedPart {
    fn predict_row(&self, x: &[f64]) -> f64;

    fn num_features(&self) -> usize;

    /// Predictions for the training rows that did not see their own target.
    fn oob_predictions(&self) -> &[f64];

    fn predict(&self, x: &Covariates) -> Result<Vec<f64>> {
        if x.ncols() != self.num_features() {
            return Err(SaeError::Dimension {
                expected: self.num_features(),
                got: x.ncols(),
            });
        }
        Ok((0..x.nrows()).map(|i| self.predict_row(x.row(i))).collect())
    }
}

/// Something that can fit a [`FixedPart`] to a weighted target.
pub trait FixedPartLearner: Sync {
    type Model: FixedPart;

    fn fit(&self, x: &Covariates, target: &[f64], weights: &[f64]) -> Result<Self::Model>;
}

impl FixedPart for Forest {
    fn predict_row(&self, x: &[f64]) -> f64 {
        Forest::predict_row(self, x)
    }

    fn num_features(&self) -> usize {
        Forest::num_features(self)
    }

    fn oob_predictions(&self) -> &[f64] {
        Forest::oob_predictions(self)
    }

    fn predict(&self, x: &Covariates) -> Result<Vec<f64>> {
        Forest::predict(self, x)
    }
}

impl FixedPartLearner for ForestParams {
    type Model = Forest;

    fn fit(&self, x: &Covariates, target: &[f64], weights: &[f64]) -> Result<Forest> {
        fit_forest(x, target, weights, self)
    }
}

/// A known linear predictor `b0 + x'b`; fitting ignores the target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearPredictor {
    pub intercept: f64,
    pub coefficients: Vec<f64>,
}

/// [`LinearPredictor`] evaluated on its training rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedLinear {
    pub predictor: LinearPredictor,
    train: Vec<f64>,
}

impl LinearPredictor {
    #[inline]
    pub fn eval(&self, x: &[f64]) -> f64 {
        self.intercept
            + self
                .coefficients
                .iter()
                .zip(x)
                .map(|(b, v)| b * v)
                .sum::<f64>()
    }
}

impl FixedPart for FittedLinear {
    fn predict_row(&self, x: &[f64]) -> f64 {
        self.predictor.eval(x)
    }

    fn num_features(&self) -> usize {
        self.predictor.coefficients.len()
    }

    fn oob_predictions(&self) -> &[f64] {
        &self.train
    }
}

impl FixedPartLearner for LinearPredictor {
    type Model = FittedLinear;

    fn fit(&self, x: &Covariates, _target: &[f64], _weights: &[f64]) -> Result<FittedLinear> {
        if x.ncols() != self.coefficients.len() {
            return Err(SaeError::Dimension {
                expected: self.coefficients.len(),
                got: x.ncols(),
            });
        }
        Ok(FittedLinear {
            predictor: self.clone(),
            train: (0..x.nrows()).map(|i| self.eval(x.row(i))).collect(),
        })
    }
}
