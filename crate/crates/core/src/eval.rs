//! Leave-one-out ranking metrics.

use serde::{Deserialize, Serialize};

use crate::data::EvalSplit;
use crate::error::{Error, Result};
use crate::gmf::{logit, GmfModel};

/// 1-based rank of `target` among `scores`: one plus the number of other
/// candidates scoring at least as high, so ties count against the target.
pub fn rank_of_target(scores: &[(usize, f64)], target: usize) -> Result<usize> {
    let target_score = scores
        .iter()
        .find(|(id, _)| *id == target)
        .map(|&(_, s)| s)
        .ok_or_else(|| Error::invalid(format!("target {target} not among candidates")))?;
    Ok(1 + scores
        .iter()
        .filter(|&&(id, s)| id != target && s >= target_score)
        .count())
}

pub fn hr_at_k(rank: usize, k: usize) -> f64 {
    if rank <= k {
        1.0
    } else {
        0.0
    }
}

pub fn ndcg_at_k(rank: usize, k: usize) -> f64 {
    if rank <= k {
        1.0 / ((rank + 1) as f64).log2()
    } else {
        0.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankingMetrics {
    pub hr: f64,
    pub ndcg: f64,
    pub users: usize,
}

fn case_rank(model: &GmfModel, user: usize, target: usize, negatives: &[usize]) -> usize {
    let u = model.user_emb.row(user);
    let target_score = logit(u, model.item_emb.row(target), &model.score);
    1 + negatives
        .iter()
        .filter(|&&i| i != target && logit(u, model.item_emb.row(i), &model.score) >= target_score)
        .count()
}

/// Mean HR@k and nDCG@k over the split.
///
/// Candidates are ranked by logit rather than probability: the order is the
/// same, and saturated sigmoids cannot manufacture ties.
pub fn evaluate(model: &GmfModel, split: &EvalSplit, k: usize) -> Result<RankingMetrics> {
    evaluate_users(model, split, k, |_| true)
}

/// Like [`evaluate`], restricted to users accepted by `filter`.
pub fn evaluate_users(
    model: &GmfModel,
    split: &EvalSplit,
    k: usize,
    filter: impl Fn(usize) -> bool,
) -> Result<RankingMetrics> {
    let mut hr = 0.0;
    let mut ndcg = 0.0;
    let mut users = 0;
    for case in split.cases.iter().filter(|c| filter(c.user)) {
        if case.user >= model.num_users() || case.target >= model.num_items() {
            return Err(Error::invalid(format!("eval case for user {} out of range", case.user)));
        }
        let rank = case_rank(model, case.user, case.target, &case.negatives);
        hr += hr_at_k(rank, k);
        ndcg += ndcg_at_k(rank, k);
        users += 1;
    }
    if users == 0 {
        return Err(Error::invalid("evaluation split is empty"));
    }
    Ok(RankingMetrics {
        hr: hr / users as f64,
        ndcg: ndcg / users as f64,
        users,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupMetrics {
    pub group: usize,
    pub hr: f64,
    pub ndcg: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub round: usize,
    pub hr: f64,
    pub ndcg: f64,
    /// Delegate-weighted local loss; absent for round 0 and before any delegate trained.
    pub loss: Option<f64>,
    /// Per availability group, when the experiment defines groups.
    pub groups: Vec<GroupMetrics>,
    pub elapsed_secs: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsLog {
    pub client_strategy: String,
    pub item_strategy: String,
    pub seed: u64,
    pub rows: Vec<MetricsRow>,
    /// Round in which the patience criterion switched the predictor off.
    pub predictor_stopped_at: Option<usize>,
    pub skipped_rounds: Vec<usize>,
}

pub const CSV_HEADER: &str = "round,hr,ndcg,loss";

fn fmt_loss(loss: Option<f64>) -> String {
    loss.map(|l| format!("{l:.8}")).unwrap_or_default()
}

impl MetricsLog {
    pub fn row_at(&self, round: usize) -> Option<&MetricsRow> {
        self.rows.iter().find(|r| r.round == round)
    }

    pub fn last(&self) -> Option<&MetricsRow> {
        self.rows.last()
    }

    /// `round,hr,ndcg,loss`, one line per evaluation.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!(
                "{},{:.8},{:.8},{}\n",
                r.round,
                r.hr,
                r.ndcg,
                fmt_loss(r.loss)
            ));
        }
        out
    }

    /// `round,group,hr,ndcg` for experiments with availability groups.
    pub fn groups_csv(&self) -> Option<String> {
        if self.rows.iter().all(|r| r.groups.is_empty()) {
            return None;
        }
        let mut out = String::from("round,group,hr,ndcg\n");
        for r in &self.rows {
            for g in &r.groups {
                out.push_str(&format!("{},{},{:.8},{:.8}\n", r.round, g.group, g.hr, g.ndcg));
            }
        }
        Some(out)
    }

    /// One observation per line, for plotting tools.
    pub fn to_long_csv(&self) -> String {
        let mut out = String::from("client_strategy,item_strategy,seed,round,group,metric,value\n");
        let mut line = |round: usize, group: &str, metric: &str, value: String| {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                self.client_strategy, self.item_strategy, self.seed, round, group, metric, value
            ));
        };
        for r in &self.rows {
            line(r.round, "all", "hr", format!("{:.8}", r.hr));
            line(r.round, "all", "ndcg", format!("{:.8}", r.ndcg));
            if let Some(l) = r.loss {
                line(r.round, "all", "loss", format!("{l:.8}"));
            }
            for g in &r.groups {
                let name = g.group.to_string();
                line(r.round, &name, "hr", format!("{:.8}", g.hr));
                line(r.round, &name, "ndcg", format!("{:.8}", g.ndcg));
            }
        }
        out
    }
}
