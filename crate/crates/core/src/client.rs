//! Server-side update rules for subordinate (unsampled) users.
//!
//! None of these touch delegate rows; the engine commits those separately.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::kmeans::ClusterModel;
use crate::matrix::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClientStrategy {
    FedAvg,
    Wcu,
    FedFast,
    FedFnn,
    /// Centralised GMF trained on all data; the upper-bound baseline.
    Gmf,
}

impl ClientStrategy {
    pub fn name(self) -> &'static str {
        match self {
            ClientStrategy::FedAvg => "fedavg",
            ClientStrategy::Wcu => "wcu",
            ClientStrategy::FedFast => "fedfast",
            ClientStrategy::FedFnn => "fedfnn",
            ClientStrategy::Gmf => "gmf",
        }
    }
}

impl std::fmt::Display for ClientStrategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

pub type RowUpdates = BTreeMap<usize, Vec<f64>>;

/// Every subordinate receives the mean of the delegates' new rows.
pub fn fedavg_subordinates(delegate_rows: &RowUpdates, subordinates: &[usize]) -> RowUpdates {
    let Some(dim) = delegate_rows.values().next().map(Vec::len) else {
        return RowUpdates::new();
    };
    let mut mean = vec![0.0; dim];
    for row in delegate_rows.values() {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    let inv = 1.0 / delegate_rows.len() as f64;
    mean.iter_mut().for_each(|m| *m *= inv);
    subordinates.iter().map(|&j| (j, mean.clone())).collect()
}

/// Subordinates are left as they are.
pub fn wcu_subordinates() -> RowUpdates {
    RowUpdates::new()
}

/// Per-cluster mean delegate delta added to that cluster's subordinates.
///
/// `old_rows` is the user table before the round; `delegate_rows` holds the
/// delegates' locally trained rows. Clusters without delegates are skipped.
pub fn fedfast_subordinates(
    cluster: &ClusterModel,
    old_rows: &Matrix,
    delegate_rows: &RowUpdates,
    subordinates: &[usize],
) -> RowUpdates {
    let dim = old_rows.cols();
    let mut sums = vec![vec![0.0; dim]; cluster.k];
    let mut counts = vec![0usize; cluster.k];
    for (&k, new_row) in delegate_rows {
        let c = cluster.assignment[k];
        counts[c] += 1;
        for ((s, n), o) in sums[c].iter_mut().zip(new_row).zip(old_rows.row(k)) {
            *s += n - o;
        }
    }
    let deltas: Vec<Option<Vec<f64>>> = sums
        .into_iter()
        .zip(&counts)
        .map(|(s, &n)| (n > 0).then(|| s.into_iter().map(|x| x / n as f64).collect()))
        .collect();

    subordinates
        .iter()
        .filter_map(|&j| {
            let delta = deltas[cluster.assignment[j]].as_ref()?;
            let row = old_rows.row(j).iter().zip(delta).map(|(w, d)| w + d).collect();
            Some((j, row))
        })
        .collect()
}
