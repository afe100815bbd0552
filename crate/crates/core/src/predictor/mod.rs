//! Update predictor for subordinate users.
//!
//! Each round an MLP is fitted on the delegates' `(old embedding, update)`
//! pairs, chosen by cross-validated grid search, and then applied to every
//! subordinate with an exponentially decaying weight. A patience monitor on
//! the global loss switches the mechanism off for good once training settles.

mod fit;
pub mod mlp;
mod patience;

use serde::{Deserialize, Serialize};

pub use fit::{cross_validated_fit, fit_predictor, rmse, FitReport, FitSettings, GridPoint, HyperGrid};
pub use mlp::Mlp;
pub use patience::{patience_check, PatienceMonitor};

/// How the network output enters the decayed blend.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PredictionMode {
    /// The network predicts an update; the blended state is `w + g(w)`.
    #[default]
    State,
    /// The raw network output is blended directly with `w`.
    Delta,
}

/// Trained network plus the standardisation it was fitted under.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictorModel {
    pub mlp: Mlp,
    pub input_mean: Vec<f64>,
    pub input_scale: Vec<f64>,
    pub target_mean: Vec<f64>,
    pub target_scale: Vec<f64>,
    pub dropout: f64,
}

impl PredictorModel {
    pub fn dim(&self) -> usize {
        self.input_mean.len()
    }

    /// Predicted update for one embedding, in the original units.
    pub fn predict_delta(&self, w: &[f64]) -> Vec<f64> {
        let x: Vec<f64> = w
            .iter()
            .zip(&self.input_mean)
            .zip(&self.input_scale)
            .map(|((v, m), s)| (v - m) / s)
            .collect();
        self.mlp
            .forward(&x)
            .into_iter()
            .zip(&self.target_mean)
            .zip(&self.target_scale)
            .map(|((o, m), s)| o * s + m)
            .collect()
    }
}

/// `e^{-γt} g(w) + (1 - e^{-γt}) w`.
pub fn predict_subordinate(
    w: &[f64],
    model: &PredictorModel,
    gamma: f64,
    round: usize,
    mode: PredictionMode,
) -> Vec<f64> {
    let delta = model.predict_delta(w);
    let g: Vec<f64> = match mode {
        PredictionMode::State => w.iter().zip(&delta).map(|(a, b)| a + b).collect(),
        PredictionMode::Delta => delta,
    };
    blend(w, &g, (-gamma * round as f64).exp())
}

/// `coef · g + (1 - coef) · w`, coordinate-wise.
pub fn blend(w: &[f64], g: &[f64], coef: f64) -> Vec<f64> {
    g.iter()
        .zip(w)
        .map(|(gv, wv)| coef * gv + (1.0 - coef) * wv)
        .collect()
}

/// Settings for the predictor strategy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FnnHyper {
    /// Decay rate of the prediction weight `e^{-γt}`.
    pub gamma: f64,
    /// Patience window in rounds.
    pub patience: usize,
    pub epsilon: f64,
    pub cv_folds: usize,
    pub predictor_epochs: usize,
    /// Relative train-RMSE change over `plateau_window` epochs that ends training early.
    pub plateau_tol: f64,
    pub plateau_window: usize,
    pub hidden: Vec<Vec<usize>>,
    pub learning_rates: Vec<f64>,
    pub dropouts: Vec<f64>,
    pub mode: PredictionMode,
}

impl Default for FnnHyper {
    fn default() -> Self {
        FnnHyper {
            gamma: 0.1,
            patience: 10,
            epsilon: 0.01,
            cv_folds: 5,
            predictor_epochs: 50,
            plateau_tol: 1e-4,
            plateau_window: 5,
            hidden: vec![vec![32], vec![64], vec![64, 32]],
            learning_rates: vec![1e-2, 1e-3],
            dropouts: vec![0.0, 0.2],
            mode: PredictionMode::State,
        }
    }
}

impl FnnHyper {
    pub fn grid(&self) -> HyperGrid {
        HyperGrid {
            hidden: self.hidden.clone(),
            learning_rates: self.learning_rates.clone(),
            dropouts: self.dropouts.clone(),
        }
    }

    pub fn fit_settings(&self) -> FitSettings {
        FitSettings {
            folds: self.cv_folds,
            epochs: self.predictor_epochs,
            plateau_tol: self.plateau_tol,
            plateau_window: self.plateau_window,
        }
    }
}
