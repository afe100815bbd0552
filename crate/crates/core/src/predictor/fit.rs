use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::mlp::Mlp;
use super::PredictorModel;
use crate::adam::{AdamHyper, AdamState};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::seed::{self, stream};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HyperGrid {
    pub hidden: Vec<Vec<usize>>,
    pub learning_rates: Vec<f64>,
    pub dropouts: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub hidden: Vec<usize>,
    pub learning_rate: f64,
    pub dropout: f64,
}

impl HyperGrid {
    /// Grid points in (hidden, learning rate, dropout) lexicographic order.
    pub fn points(&self) -> Vec<GridPoint> {
        let mut out = Vec::new();
        for h in &self.hidden {
            for &lr in &self.learning_rates {
                for &dropout in &self.dropouts {
                    out.push(GridPoint {
                        hidden: h.clone(),
                        learning_rate: lr,
                        dropout,
                    });
                }
            }
        }
        out
    }

    pub fn len(&self) -> usize {
        self.hidden.len() * self.learning_rates.len() * self.dropouts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FitSettings {
    pub folds: usize,
    pub epochs: usize,
    pub plateau_tol: f64,
    pub plateau_window: usize,
}

impl Default for FitSettings {
    fn default() -> Self {
        FitSettings {
            folds: 5,
            epochs: 50,
            plateau_tol: 1e-4,
            plateau_window: 5,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitReport {
    pub chosen: GridPoint,
    pub folds: usize,
    /// Validation RMSE of the chosen point on each fold.
    pub fold_rmse: Vec<f64>,
    /// Mean validation RMSE of the chosen point.
    pub rmse: f64,
    /// Mean validation RMSE of every grid point, in grid order.
    pub grid_rmse: Vec<f64>,
    /// RMSE of the refitted model on all pairs.
    pub train_rmse: f64,
}

/// `sqrt(mean over pairs and coordinates of squared residual)`.
pub fn rmse(model: &PredictorModel, inputs: &Matrix, targets: &Matrix) -> f64 {
    let mut total = 0.0;
    for (x, y) in inputs.iter_rows().zip(targets.iter_rows()) {
        let pred = model.predict_delta(x);
        total += pred.iter().zip(y).map(|(p, t)| (p - t) * (p - t)).sum::<f64>();
    }
    (total / (inputs.rows() * targets.cols()) as f64).sqrt()
}

/// Column means and standard deviations; constant columns get `floor`.
fn column_stats(m: &Matrix, floor: f64) -> (Vec<f64>, Vec<f64>) {
    let n = m.rows() as f64;
    let d = m.cols();
    let mut mean = vec![0.0; d];
    for row in m.iter_rows() {
        for (a, v) in mean.iter_mut().zip(row) {
            *a += v / n;
        }
    }
    let mut var = vec![0.0; d];
    for row in m.iter_rows() {
        for ((a, v), mu) in var.iter_mut().zip(row).zip(&mean) {
            *a += (v - mu) * (v - mu) / n;
        }
    }
    let scale = var
        .into_iter()
        .map(|v| {
            let s = v.sqrt();
            if s > 1e-12 {
                s
            } else {
                floor
            }
        })
        .collect();
    (mean, scale)
}

fn standardise(m: &Matrix, mean: &[f64], scale: &[f64]) -> Matrix {
    let mut out = m.clone();
    for i in 0..out.rows() {
        for ((v, mu), s) in out.row_mut(i).iter_mut().zip(mean).zip(scale) {
            *v = if *s > 0.0 { (*v - mu) / s } else { 0.0 };
        }
    }
    out
}

fn subset(m: &Matrix, idx: &[usize]) -> Matrix {
    let rows: Vec<&[f64]> = idx.iter().map(|&i| m.row(i)).collect();
    Matrix::from_rows(&rows)
}

/// Trains one network on all pairs with full-batch Adam on MSE (in
/// standardised units) and returns it with its training RMSE.
pub fn fit_predictor(
    inputs: &Matrix,
    targets: &Matrix,
    point: &GridPoint,
    settings: &FitSettings,
    seed: u64,
) -> Result<(PredictorModel, f64)> {
    let n = inputs.rows();
    if n < 2 {
        return Err(Error::TooFewPairs(n));
    }
    if targets.rows() != n {
        return Err(Error::ShapeMismatch {
            expected: n,
            actual: targets.rows(),
        });
    }
    let (input_mean, input_scale) = column_stats(inputs, 1.0);
    let (target_mean, target_scale) = column_stats(targets, 0.0);
    let x = standardise(inputs, &input_mean, &input_scale);
    let y = standardise(targets, &target_mean, &target_scale);

    let mut rng = seed::rng(seed, &[stream::PREDICTOR]);
    let mut sizes = vec![inputs.cols()];
    sizes.extend(&point.hidden);
    sizes.push(targets.cols());
    let mut mlp = Mlp::new(&sizes, &mut rng);
    let mut adam = AdamState::new(mlp.params.len(), AdamHyper::with_lr(point.learning_rate));

    let mut history: Vec<f64> = Vec::with_capacity(settings.epochs);
    for _ in 0..settings.epochs {
        let (loss, grad) = mlp.loss_and_grad(&x, &y, Some((point.dropout, &mut rng)));
        if !loss.is_finite() {
            break;
        }
        adam.step(&mut mlp.params, &grad)?;
        let train_rmse = loss.sqrt();
        history.push(train_rmse);
        let w = settings.plateau_window;
        if w > 0 && history.len() > w {
            let past = history[history.len() - 1 - w];
            let rel = (past - train_rmse).abs() / past.max(f64::MIN_POSITIVE);
            if rel < settings.plateau_tol {
                break;
            }
        }
    }

    let model = PredictorModel {
        mlp,
        input_mean,
        input_scale,
        target_mean,
        target_scale,
        dropout: point.dropout,
    };
    let train_rmse = rmse(&model, inputs, targets);
    Ok((model, train_rmse))
}

/// k-fold grid search followed by a refit of the winner on all pairs.
///
/// Uses `settings.folds` folds, or leave-one-out when there are fewer pairs
/// than that. Ties in mean validation RMSE go to the earlier grid point.
pub fn cross_validated_fit(
    inputs: &Matrix,
    targets: &Matrix,
    grid: &HyperGrid,
    settings: &FitSettings,
    seed: u64,
) -> Result<(PredictorModel, FitReport)> {
    if grid.is_empty() {
        return Err(Error::invalid("predictor hyperparameter grid is empty"));
    }
    let n = inputs.rows();
    if n < 2 {
        return Err(Error::TooFewPairs(n));
    }
    let folds = settings.folds.clamp(2, n);
    if folds < settings.folds {
        log::debug!("{n} pairs: using {folds} folds");
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seed::rng(seed, &[stream::PREDICTOR, u64::MAX]));
    let fold_of = |pos: usize| pos % folds;
    let splits: Vec<(Vec<usize>, Vec<usize>)> = (0..folds)
        .map(|f| {
            let (val, train): (Vec<(usize, usize)>, Vec<(usize, usize)>) =
                order.iter().copied().enumerate().partition(|&(pos, _)| fold_of(pos) == f);
            (
                train.into_iter().map(|(_, i)| i).collect(),
                val.into_iter().map(|(_, i)| i).collect(),
            )
        })
        .collect();

    let points = grid.points();
    let scores: Vec<Result<Vec<f64>>> = points
        .par_iter()
        .enumerate()
        .map(|(g, point)| {
            splits
                .iter()
                .enumerate()
                .map(|(f, (train, val))| {
                    let s = seed::derive(seed, &[g as u64, f as u64]);
                    let (model, _) =
                        fit_predictor(&subset(inputs, train), &subset(targets, train), point, settings, s)?;
                    let r = rmse(&model, &subset(inputs, val), &subset(targets, val));
                    Ok(if r.is_finite() { r } else { f64::INFINITY })
                })
                .collect()
        })
        .collect();
    let scores: Vec<Vec<f64>> = scores.into_iter().collect::<Result<_>>()?;
    let grid_rmse: Vec<f64> = scores
        .iter()
        .map(|s| s.iter().sum::<f64>() / s.len() as f64)
        .collect();

    let mut best = 0;
    for (g, &r) in grid_rmse.iter().enumerate() {
        if r < grid_rmse[best] {
            best = g;
        }
    }
    let chosen = points[best].clone();
    let (model, train_rmse) = fit_predictor(
        inputs,
        targets,
        &chosen,
        settings,
        seed::derive(seed, &[best as u64, u64::MAX]),
    )?;
    Ok((
        model,
        FitReport {
            chosen,
            folds,
            fold_rmse: scores[best].clone(),
            rmse: grid_rmse[best],
            grid_rmse,
            train_rmse,
        },
    ))
}
