//! Loaded models and the per-user scoring path shared by startup
//! calibration and the serving layer.

use std::sync::Arc;

use thiserror::Error;

use crate::ensemble::{EnsembleError, EnsembleModel};
use crate::features::{FeatureError, FeatureSpec, UserRecord};
use crate::gbdt::{GbdtError, TreeEnsemble};
use crate::lstm::{LstmError, LstmState, LstmWeights};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Lstm(#[from] LstmError),
    #[error(transparent)]
    Gbdt(#[from] GbdtError),
    #[error(transparent)]
    Ensemble(#[from] EnsembleError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error("model/spec mismatch: {0}")]
    Mismatch(String),
}

/// Everything needed to score a user record.
#[derive(Debug, Clone)]
pub struct Models {
    pub spec: Arc<FeatureSpec>,
    pub lstm: Arc<LstmWeights>,
    pub gbdt: Arc<TreeEnsemble>,
    pub ensemble: EnsembleModel,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    pub p_gbdt: f64,
    pub p_lstm: f64,
    pub score: f64,
    pub decision: bool,
}

/// Model inputs taken from one user record: dense one-hot features for the
/// tree model and the cached LSTM state.
#[derive(Debug, Clone)]
pub struct PreparedInput {
    pub features: Vec<f64>,
    pub state: LstmState,
}

impl Models {
    pub fn new(
        spec: FeatureSpec,
        lstm: LstmWeights,
        gbdt: TreeEnsemble,
        ensemble: EnsembleModel,
    ) -> Result<Self, ModelError> {
        spec.validate()?;
        ensemble.validate()?;
        if gbdt.n_features() != spec.n_features() {
            return Err(ModelError::Mismatch(format!(
                "feature spec has {} one-hot features, tree model expects {}",
                spec.n_features(),
                gbdt.n_features()
            )));
        }
        if lstm.input_dim() != spec.lstm_input_dim() {
            return Err(ModelError::Mismatch(format!(
                "feature spec has LSTM input length {}, LSTM model expects {}",
                spec.lstm_input_dim(),
                lstm.input_dim()
            )));
        }
        Ok(Self {
            spec: Arc::new(spec),
            lstm: Arc::new(lstm),
            gbdt: Arc::new(gbdt),
            ensemble,
        })
    }

    pub fn prepare(&self, record: &UserRecord) -> PreparedInput {
        PreparedInput {
            features: record.onehot.to_dense(),
            state: record.lstm_state.clone(),
        }
    }

    /// Tree and LSTM probabilities without blending.
    pub fn model_probabilities(&self, input: &PreparedInput) -> Result<(f64, f64), ModelError> {
        let p_gbdt = self.gbdt.score(&input.features)?;
        let p_lstm = self.lstm.predict(&input.state)?.p_pos;
        Ok((p_gbdt, p_lstm))
    }

    pub fn infer(&self, input: &PreparedInput) -> Result<Prediction, ModelError> {
        let (p_gbdt, p_lstm) = self.model_probabilities(input)?;
        let score = self.ensemble.score(p_gbdt, p_lstm)?;
        Ok(Prediction {
            p_gbdt,
            p_lstm,
            score,
            decision: self.ensemble.decide(score),
        })
    }

    pub fn score_record(&self, record: &UserRecord) -> Result<Prediction, ModelError> {
        self.infer(&self.prepare(record))
    }
}
