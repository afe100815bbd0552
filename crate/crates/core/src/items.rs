//! Server-side aggregation of the item rows uploaded by delegates.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::gmf::LocalUpdate;
use crate::matrix::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ItemScheme {
    /// Uniform, `1/m`.
    W0,
    /// Proportional to the L1 size of the delegate's item updates.
    W1,
    /// Proportional to the delegate's interaction count.
    W2,
}

impl ItemScheme {
    pub fn name(self) -> &'static str {
        match self {
            ItemScheme::W0 => "w0",
            ItemScheme::W1 => "w1",
            ItemScheme::W2 => "w2",
        }
    }
}

impl std::fmt::Display for ItemScheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// `Z[k]`: summed L1 change over every item row the delegate trained.
pub fn update_magnitude(update: &LocalUpdate, prev_items: &Matrix) -> f64 {
    update
        .items
        .iter()
        .enumerate()
        .map(|(idx, &i)| {
            update
                .item_row(idx)
                .iter()
                .zip(prev_items.row(i))
                .map(|(n, o)| (n - o).abs())
                .sum::<f64>()
        })
        .sum()
}

fn uniform(n: usize) -> Vec<f64> {
    vec![1.0 / n as f64; n]
}

fn normalise(raw: Vec<f64>) -> Option<Vec<f64>> {
    let total: f64 = raw.iter().sum();
    (total > 0.0 && total.is_finite()).then(|| raw.into_iter().map(|x| x / total).collect())
}

/// Per-delegate weights `α_k`, aligned with `updates`, summing to one.
///
/// `magnitudes` are the `Z[k]` values; only W1 reads them.
pub fn compute_alphas(scheme: ItemScheme, updates: &[LocalUpdate], magnitudes: &[f64]) -> Vec<f64> {
    let m = updates.len();
    if m == 0 {
        return Vec::new();
    }
    match scheme {
        ItemScheme::W0 => uniform(m),
        ItemScheme::W1 => normalise(magnitudes.to_vec()).unwrap_or_else(|| {
            warn!("all item update magnitudes are zero; falling back to uniform weights");
            uniform(m)
        }),
        ItemScheme::W2 => normalise(updates.iter().map(|u| u.n_k as f64).collect())
            .unwrap_or_else(|| uniform(m)),
    }
}

/// New item table: each item touched by delegates `T_i` moves by the
/// weighted mean of their deltas, with `α` renormalised over `T_i`.
/// Untouched rows are copied unchanged, and a row touched by a single
/// delegate becomes that delegate's row.
pub fn aggregate_items(prev: &Matrix, updates: &[LocalUpdate], alphas: &[f64]) -> Matrix {
    let m = prev.rows();
    let d = prev.cols();
    let mut weight = vec![0.0; m];
    let mut touchers = vec![0usize; m];
    let mut last_toucher = vec![(0usize, 0usize); m];
    for (k, up) in updates.iter().enumerate() {
        for (idx, &i) in up.items.iter().enumerate() {
            weight[i] += alphas[k];
            touchers[i] += 1;
            last_toucher[i] = (k, idx);
        }
    }

    let mut delta = Matrix::zeros(m, d);
    for (k, up) in updates.iter().enumerate() {
        for (idx, &i) in up.items.iter().enumerate() {
            if touchers[i] < 2 {
                continue;
            }
            // zero total weight (all touchers had α = 0): fall back to a plain mean
            let w = if weight[i] > 0.0 {
                alphas[k] / weight[i]
            } else {
                1.0 / touchers[i] as f64
            };
            let old = prev.row(i);
            for ((acc, n), o) in delta.row_mut(i).iter_mut().zip(up.item_row(idx)).zip(old) {
                *acc += w * (n - o);
            }
        }
    }

    let mut next = prev.clone();
    for i in 0..m {
        match touchers[i] {
            0 => {}
            1 => {
                let (k, idx) = last_toucher[i];
                next.set_row(i, updates[k].item_row(idx));
            }
            _ => {
                for (v, dv) in next.row_mut(i).iter_mut().zip(delta.row(i)) {
                    *v += dv;
                }
            }
        }
    }
    next
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gmf::ScoreLayer;

    fn update(client: usize, n_k: usize, items: Vec<usize>, rows: Vec<Vec<f64>>) -> LocalUpdate {
        LocalUpdate {
            client,
            user_row: vec![0.0; rows[0].len()],
            items,
            item_rows: Matrix::from_rows(&rows),
            score: ScoreLayer {
                weights: vec![],
                bias: 0.0,
            },
            n_k,
            initial_loss: 0.0,
            final_loss: 0.0,
        }
    }

    #[test]
    fn w0_uniform() {
        let ups: Vec<_> = (0..4).map(|k| update(k, 1, vec![0], vec![vec![0.0]])).collect();
        assert_eq!(compute_alphas(ItemScheme::W0, &ups, &[0.0; 4]), vec![0.25; 4]);
    }

    #[test]
    fn w2_proportional_to_counts() {
        let ups: Vec<_> = [10, 30, 60]
            .iter()
            .enumerate()
            .map(|(k, &n)| update(k, n, vec![0], vec![vec![0.0]]))
            .collect();
        let a = compute_alphas(ItemScheme::W2, &ups, &[0.0; 3]);
        for (x, e) in a.iter().zip([0.1, 0.3, 0.6]) {
            assert!((x - e).abs() < 1e-15);
        }
    }

    #[test]
    fn w1_from_l1_magnitudes() {
        let prev = Matrix::from_rows(&[vec![0.0, 0.0]]);
        let ups = vec![
            update(0, 1, vec![0], vec![vec![0.5, -0.5]]),
            update(1, 1, vec![0], vec![vec![1.0, 1.0]]),
        ];
        let z: Vec<f64> = ups.iter().map(|u| update_magnitude(u, &prev)).collect();
        assert_eq!(z, vec![1.0, 2.0]);
        let a = compute_alphas(ItemScheme::W1, &ups, &z);
        assert!((a[0] - 1.0 / 3.0).abs() < 1e-15);
        assert!((a[1] - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn w1_all_zero_falls_back_to_uniform() {
        let ups: Vec<_> = (0..2).map(|k| update(k, 1, vec![0], vec![vec![0.0]])).collect();
        assert_eq!(compute_alphas(ItemScheme::W1, &ups, &[0.0, 0.0]), vec![0.5, 0.5]);
    }

    #[test]
    fn aggregation_examples() {
        let prev = Matrix::from_rows(&[vec![0.0, 0.0], vec![0.3, 0.7], vec![9.0, 9.0]]);
        let ups = vec![
            update(0, 1, vec![0, 1], vec![vec![1.0, 0.0], vec![0.123, 0.456]]),
            update(1, 1, vec![0], vec![vec![0.0, 1.0]]),
        ];
        let next = aggregate_items(&prev, &ups, &[0.25, 0.75]);
        assert_eq!(next.row(0), &[0.25, 0.75]);
        assert_eq!(next.row(1), &[0.123, 0.456]);
        assert_eq!(next.row(2), &[9.0, 9.0]);
    }
}
