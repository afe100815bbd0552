//! Shared checks for the integration tests and the acceptance runner.
#![allow(dead_code)]

use std::collections::BTreeSet;

use fedrec_core::client::{self, RowUpdates};
use fedrec_core::data::{EvalCase, EvalSplit};
use fedrec_core::eval;
use fedrec_core::gmf::{self, example_gradient, GmfModel, LocalUpdate, ScoreLayer};
use fedrec_core::items::{self, ItemScheme};
use fedrec_core::kmeans;
use fedrec_core::matrix::Matrix;
use fedrec_core::predictor::mlp::Mlp;
use fedrec_core::seed::{self, SimRng};
use proptest::prelude::*;
use proptest::test_runner::{Config, TestCaseError, TestRunner};
use rand::{Rng, SeedableRng};

pub const FD_STEP: f64 = 1e-5;
pub const GRAD_TOL: f64 = 1e-4;
pub const ORACLE_TOL: f64 = 1e-12;

/// `|a - n| / max(|a|, |n|)`, with exact agreement (including 0 vs 0) as 0.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    if diff == 0.0 {
        return 0.0;
    }
    diff / analytic.abs().max(numeric.abs())
}

fn uniform_vec(rng: &mut SimRng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-scale..scale)).collect()
}

/// Summed BCE of a batch of (item, label) examples for one user.
fn gmf_batch_loss(user: &[f64], items: &Matrix, labels: &[f64], score: &ScoreLayer) -> f64 {
    labels
        .iter()
        .enumerate()
        .map(|(i, &y)| gmf::bce_loss(gmf::sigmoid(gmf::logit(user, items.row(i), score)), y))
        .sum()
}

/// Largest relative error between analytic and central-difference
/// gradients of the GMF + BCE loss over `instances` random problems.
pub fn gmf_gradient_check(instances: usize, seed: u64) -> f64 {
    let mut worst = 0.0f64;
    for inst in 0..instances {
        let mut rng = seed::rng(seed, &[inst as u64]);
        let d = rng.random_range(2..=6);
        let n = rng.random_range(1..=5);
        let mut user = uniform_vec(&mut rng, d, 1.0);
        let mut items = Matrix::from_vec(n, d, uniform_vec(&mut rng, n * d, 1.0));
        let mut score = ScoreLayer {
            weights: uniform_vec(&mut rng, d, 1.0),
            bias: rng.random_range(-0.5..0.5),
        };
        let labels: Vec<f64> = (0..n).map(|_| f64::from(rng.random_bool(0.5) as u8)).collect();

        let mut g_user = vec![0.0; d];
        let mut g_items = Matrix::zeros(n, d);
        let mut g_w = vec![0.0; d];
        let mut g_b = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            let g = example_gradient(&user, items.row(i), &score, y);
            g_user.iter_mut().zip(&g.user).for_each(|(a, b)| *a += b);
            g_items.row_mut(i).iter_mut().zip(&g.item).for_each(|(a, b)| *a += b);
            g_w.iter_mut().zip(&g.weights).for_each(|(a, b)| *a += b);
            g_b += g.bias;
        }

        macro_rules! probe {
            ($slot:expr, $analytic:expr) => {{
                let orig = $slot;
                $slot = orig + FD_STEP;
                let up = gmf_batch_loss(&user, &items, &labels, &score);
                $slot = orig - FD_STEP;
                let down = gmf_batch_loss(&user, &items, &labels, &score);
                $slot = orig;
                worst = worst.max(relative_error($analytic, (up - down) / (2.0 * FD_STEP)));
            }};
        }
        for f in 0..d {
            probe!(user[f], g_user[f]);
            probe!(score.weights[f], g_w[f]);
            for i in 0..n {
                probe!(items.row_mut(i)[f], g_items.row(i)[f]);
            }
        }
        probe!(score.bias, g_b);
    }
    worst
}

/// Same check for the predictor network's MSE, without dropout.
pub fn mlp_gradient_check(instances: usize, seed: u64) -> f64 {
    let mut worst = 0.0f64;
    for inst in 0..instances {
        let mut rng = seed::rng(seed, &[0x6d6c70, inst as u64]);
        let d = rng.random_range(2..=5);
        let depth = rng.random_range(0..=2);
        let mut sizes = vec![d];
        for _ in 0..depth {
            sizes.push(rng.random_range(2..=7));
        }
        sizes.push(d);
        let mut net = Mlp::new(&sizes, &mut rng);
        let n = rng.random_range(2..=6);
        let x = Matrix::from_vec(n, d, uniform_vec(&mut rng, n * d, 1.0));
        let y = Matrix::from_vec(n, d, uniform_vec(&mut rng, n * d, 1.0));
        let (_, grad) = net.loss_and_grad(&x, &y, None);
        for p in 0..net.params.len() {
            let orig = net.params[p];
            net.params[p] = orig + FD_STEP;
            let up = net.loss(&x, &y);
            net.params[p] = orig - FD_STEP;
            let down = net.loss(&x, &y);
            net.params[p] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            // a probe straddling a ReLU kink has no meaningful derivative
            if crosses_kink(&mut net, &x, p) {
                continue;
            }
            worst = worst.max(relative_error(grad[p], numeric));
        }
    }
    worst
}

/// True when nudging parameter `p` by ±h flips some hidden pre-activation sign.
fn crosses_kink(net: &mut Mlp, x: &Matrix, p: usize) -> bool {
    let orig = net.params[p];
    net.params[p] = orig + FD_STEP;
    let up = hidden_signs(net, x);
    net.params[p] = orig - FD_STEP;
    let down = hidden_signs(net, x);
    net.params[p] = orig;
    up != down
}

fn hidden_signs(net: &Mlp, x: &Matrix) -> Vec<bool> {
    let sizes = net.sizes().to_vec();
    let mut out = Vec::new();
    for row in x.iter_rows() {
        let mut act = row.to_vec();
        let mut off = 0;
        for l in 0..sizes.len() - 1 {
            let (fin, fout) = (sizes[l], sizes[l + 1]);
            let w = &net.params[off..off + fin * fout];
            let b = &net.params[off + fin * fout..off + fin * fout + fout];
            off += fin * fout + fout;
            let z: Vec<f64> = (0..fout)
                .map(|o| b[o] + (0..fin).map(|i| w[o * fin + i] * act[i]).sum::<f64>())
                .collect();
            if l + 2 < sizes.len() {
                out.extend(z.iter().map(|v| *v > 0.0));
                act = z.into_iter().map(|v| v.max(0.0)).collect();
            }
        }
    }
    out
}

pub fn runner(cases: u32) -> TestRunner {
    TestRunner::new_with_rng(
        Config {
            cases,
            failure_persistence: None,
            ..Config::default()
        },
        proptest::test_runner::TestRng::from_seed(proptest::test_runner::RngAlgorithm::ChaCha, &[7; 32]),
    )
}

fn close(a: f64, b: f64, what: &str) -> Result<(), TestCaseError> {
    if (a - b).abs() <= ORACLE_TOL {
        Ok(())
    } else {
        Err(TestCaseError::fail(format!("{what}: {a} vs {b}")))
    }
}

fn close_rows(a: &[f64], b: &[f64], what: &str) -> Result<(), TestCaseError> {
    prop_assert_eq!(a.len(), b.len());
    for (x, y) in a.iter().zip(b) {
        close(*x, *y, what)?;
    }
    Ok(())
}

// ---------- mean of delegate rows ----------

#[derive(Clone, Debug)]
pub struct AvgCase {
    pub rows: Vec<(usize, Vec<f64>)>,
    pub subordinates: Vec<usize>,
}

pub fn avg_case() -> impl Strategy<Value = AvgCase> {
    (1usize..6, 1usize..10, 0usize..10).prop_flat_map(|(d, m, s)| {
        (
            proptest::collection::vec(proptest::collection::vec(-5.0f64..5.0, d), m),
            Just(s),
        )
            .prop_map(move |(rows, s)| AvgCase {
                rows: rows.into_iter().enumerate().collect(),
                subordinates: (m..m + s).collect(),
            })
    })
}

pub fn check_fedavg(case: &AvgCase) -> Result<(), TestCaseError> {
    let delegate_rows: RowUpdates = case.rows.iter().cloned().collect();
    let out = client::fedavg_subordinates(&delegate_rows, &case.subordinates);
    prop_assert_eq!(out.keys().copied().collect::<Vec<_>>(), case.subordinates.clone());
    let d = case.rows[0].1.len();
    let m = case.rows.len() as f64;
    for row in out.values() {
        for f in 0..d {
            // reverse order, then divide: a different evaluation path
            let expected = case.rows.iter().rev().map(|(_, r)| r[f]).sum::<f64>() / m;
            close(row[f], expected, "fedavg")?;
        }
    }
    Ok(())
}

// ---------- single-cluster fedfast ----------

#[derive(Clone, Debug)]
pub struct ClusterCase {
    pub old: Matrix,
    pub delegates: Vec<usize>,
    pub new_rows: Vec<Vec<f64>>,
    pub seed: u64,
}

pub fn cluster_case() -> impl Strategy<Value = ClusterCase> {
    (1usize..5, 2usize..15).prop_flat_map(|(d, n)| {
        (
            proptest::collection::vec(-3.0f64..3.0, n * d),
            proptest::sample::subsequence((0..n).collect::<Vec<_>>(), 1..n),
            proptest::collection::vec(-3.0f64..3.0, n * d),
            any::<u64>(),
        )
            .prop_map(move |(old, delegates, fresh, seed)| {
                let new_rows = delegates.iter().map(|&k| fresh[k * d..(k + 1) * d].to_vec()).collect();
                ClusterCase {
                    old: Matrix::from_vec(n, d, old),
                    delegates,
                    new_rows,
                    seed,
                }
            })
    })
}

pub fn check_fedfast_single_cluster(case: &ClusterCase) -> Result<(), TestCaseError> {
    let model = kmeans::kmeans_fit(&case.old, 1, 20, case.seed).map_err(|e| TestCaseError::fail(e.to_string()))?;
    let delegate_rows: RowUpdates = case.delegates.iter().copied().zip(case.new_rows.iter().cloned()).collect();
    let subs: Vec<usize> = (0..case.old.rows()).filter(|j| !case.delegates.contains(j)).collect();
    let out = client::fedfast_subordinates(&model, &case.old, &delegate_rows, &subs);
    prop_assert_eq!(out.len(), subs.len());
    let d = case.old.cols();
    let m = case.delegates.len() as f64;
    for &j in &subs {
        for f in 0..d {
            let mean_delta: f64 = case
                .delegates
                .iter()
                .zip(&case.new_rows)
                .map(|(&k, r)| (r[f] - case.old.row(k)[f]) / m)
                .sum();
            close(out[&j][f], case.old.row(j)[f] + mean_delta, "fedfast k=1")?;
        }
    }
    Ok(())
}

// ---------- item aggregation ----------

#[derive(Clone, Debug)]
pub struct ItemCase {
    pub prev: Matrix,
    pub updates: Vec<LocalUpdate>,
    pub scheme: ItemScheme,
}

fn scheme() -> impl Strategy<Value = ItemScheme> {
    prop_oneof![Just(ItemScheme::W0), Just(ItemScheme::W1), Just(ItemScheme::W2)]
}

pub fn item_case() -> impl Strategy<Value = ItemCase> {
    scheme().prop_flat_map(item_case_for)
}

pub fn item_case_for(scheme: ItemScheme) -> impl Strategy<Value = ItemCase> {
    (1usize..5, 1usize..12, 1usize..6, Just(scheme)).prop_flat_map(|(d, m_items, m, scheme)| {
        let update = (
            proptest::sample::subsequence((0..m_items).collect::<Vec<_>>(), 1..=m_items),
            proptest::collection::vec(-2.0f64..2.0, m_items * d),
            1usize..60,
        );
        (
            proptest::collection::vec(-2.0f64..2.0, m_items * d),
            proptest::collection::vec(update, m),
            Just(scheme),
        )
            .prop_map(move |(prev, ups, scheme)| {
                let updates = ups
                    .into_iter()
                    .enumerate()
                    .map(|(k, (items, rows, n_k))| LocalUpdate {
                        client: k,
                        user_row: vec![0.0; d],
                        item_rows: Matrix::from_rows(
                            &items.iter().map(|&i| rows[i * d..(i + 1) * d].to_vec()).collect::<Vec<_>>(),
                        ),
                        items,
                        score: ScoreLayer {
                            weights: vec![0.0; d],
                            bias: 0.0,
                        },
                        n_k,
                        initial_loss: 0.0,
                        final_loss: 0.0,
                    })
                    .collect();
                ItemCase {
                    prev: Matrix::from_vec(m_items, d, prev),
                    updates,
                    scheme,
                }
            })
    })
}

pub fn check_item_aggregation(case: &ItemCase) -> Result<(), TestCaseError> {
    let ups = &case.updates;
    let m = ups.len();
    let z: Vec<f64> = ups.iter().map(|u| items::update_magnitude(u, &case.prev)).collect();
    for (u, &zk) in ups.iter().zip(&z) {
        let mut expected = 0.0;
        for (idx, &i) in u.items.iter().enumerate() {
            for f in 0..case.prev.cols() {
                expected += (u.item_rows.row(idx)[f] - case.prev.row(i)[f]).abs();
            }
        }
        close(zk, expected, "Z")?;
    }
    let raw: Vec<f64> = match case.scheme {
        ItemScheme::W0 => vec![1.0; m],
        ItemScheme::W1 => z.clone(),
        ItemScheme::W2 => ups.iter().map(|u| u.n_k as f64).collect(),
    };
    let total: f64 = raw.iter().sum();
    let expected_alpha: Vec<f64> = if total > 0.0 {
        raw.iter().map(|r| r / total).collect()
    } else {
        vec![1.0 / m as f64; m]
    };
    let alpha = items::compute_alphas(case.scheme, ups, &z);
    close_rows(&alpha, &expected_alpha, "alpha")?;

    let out = items::aggregate_items(&case.prev, ups, &alpha);
    for i in 0..case.prev.rows() {
        let touchers: Vec<(usize, usize)> = ups
            .iter()
            .enumerate()
            .filter_map(|(k, u)| u.items.iter().position(|&x| x == i).map(|idx| (k, idx)))
            .collect();
        let prev = case.prev.row(i);
        if touchers.is_empty() {
            prop_assert!(out.row(i) == prev, "untouched row {} changed", i);
            continue;
        }
        let a: f64 = touchers.iter().map(|&(k, _)| expected_alpha[k]).sum();
        for f in 0..case.prev.cols() {
            let expected = if a > 0.0 {
                prev[f]
                    + touchers
                        .iter()
                        .map(|&(k, idx)| expected_alpha[k] / a * (ups[k].item_rows.row(idx)[f] - prev[f]))
                        .sum::<f64>()
            } else {
                prev[f]
                    + touchers
                        .iter()
                        .map(|&(k, idx)| (ups[k].item_rows.row(idx)[f] - prev[f]) / touchers.len() as f64)
                        .sum::<f64>()
            };
            close(out.row(i)[f], expected, "aggregate_items")?;
        }
        if touchers.len() == 1 {
            let (k, idx) = touchers[0];
            prop_assert!(out.row(i) == ups[k].item_rows.row(idx), "single toucher not copied");
        }
    }
    Ok(())
}

// ---------- ranking ----------

#[derive(Clone, Debug)]
pub struct RankCase {
    pub scores: Vec<(usize, f64)>,
    pub target: usize,
}

pub fn rank_case() -> impl Strategy<Value = RankCase> {
    (1usize..120).prop_flat_map(|n| {
        (
            // few distinct values so ties are common
            proptest::collection::vec((0u8..8).prop_map(|v| f64::from(v) * 0.25), n),
            0..n,
            any::<u64>(),
        )
            .prop_map(|(values, target_pos, salt)| {
                // ids scattered so the target is not always the first entry
                let scores: Vec<(usize, f64)> = values
                    .into_iter()
                    .enumerate()
                    .map(|(i, v)| (i * 7 + (salt as usize % 5), v))
                    .collect();
                let target = scores[target_pos].0;
                RankCase { scores, target }
            })
    })
}

pub fn check_rank(case: &RankCase) -> Result<(), TestCaseError> {
    let got = eval::rank_of_target(&case.scores, case.target).map_err(|e| TestCaseError::fail(e.to_string()))?;
    let target_score = case.scores.iter().find(|s| s.0 == case.target).unwrap().1;
    // sort descending with the target after every equal score
    let mut order: Vec<(f64, bool)> = case.scores.iter().map(|&(id, s)| (s, id == case.target)).collect();
    order.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    let expected = order.iter().position(|&(s, t)| t && s == target_score).unwrap() + 1;
    prop_assert_eq!(got, expected);
    Ok(())
}

pub fn check_hr_ndcg(rank: usize, k: usize) -> Result<(), TestCaseError> {
    let hit = if rank <= k { 1.0 } else { 0.0 };
    close(eval::hr_at_k(rank, k), hit, "hr")?;
    let gain = if rank <= k { 2f64.ln() / ((rank + 1) as f64).ln() } else { 0.0 };
    close(eval::ndcg_at_k(rank, k), gain, "ndcg")?;
    prop_assert!(eval::ndcg_at_k(rank, k) <= eval::hr_at_k(rank, k));
    Ok(())
}

#[derive(Clone, Debug)]
pub struct EvalInstance {
    pub model: GmfModel,
    pub split: EvalSplit,
    pub k: usize,
}

pub fn eval_instance() -> impl Strategy<Value = EvalInstance> {
    (1usize..8, 2usize..30, 1usize..6, 1usize..12, any::<u64>()).prop_map(|(users, items, dim, k, seed)| {
        let mut model = GmfModel::init(users, items, dim, seed).unwrap();
        let mut rng = SimRng::seed_from_u64(seed ^ 0x5eed);
        // spread scores out so that σ is strictly monotone in floating point
        for v in model.user_emb.as_mut_slice().iter_mut().chain(model.item_emb.as_mut_slice()) {
            *v = rng.random_range(-1.0..1.0);
        }
        let cases = (0..users)
            .map(|u| {
                let mut pool: Vec<usize> = (0..items).collect();
                let target = pool.swap_remove(rng.random_range(0..pool.len()));
                let take = rng.random_range(0..=pool.len().min(20));
                let negatives = rand::seq::index::sample(&mut rng, pool.len(), take)
                    .into_iter()
                    .map(|i| pool[i])
                    .collect::<BTreeSet<_>>()
                    .into_iter()
                    .collect();
                EvalCase {
                    user: u,
                    target,
                    negatives,
                }
            })
            .collect();
        EvalInstance {
            model,
            split: EvalSplit {
                cases,
                excluded_users: Vec::new(),
                short_negative_users: Vec::new(),
            },
            k,
        }
    })
}

pub fn check_evaluate(inst: &EvalInstance) -> Result<(), TestCaseError> {
    let got = eval::evaluate(&inst.model, &inst.split, inst.k).map_err(|e| TestCaseError::fail(e.to_string()))?;
    let (mut hr, mut ndcg) = (0.0, 0.0);
    for case in &inst.split.cases {
        let t = inst.model.predict_score(case.user, case.target).unwrap();
        let better = case
            .negatives
            .iter()
            .filter(|&&i| inst.model.predict_score(case.user, i).unwrap() >= t)
            .count();
        let rank = better + 1;
        if rank <= inst.k {
            hr += 1.0;
            ndcg += 1.0 / ((rank + 1) as f64).log2();
        }
    }
    let n = inst.split.cases.len() as f64;
    close(got.hr, hr / n, "evaluate hr")?;
    close(got.ndcg, ndcg / n, "evaluate ndcg")?;
    Ok(())
}

/// Runs `check` on `cases` generated instances; returns the failure message, if any.
pub fn run_property<S: Strategy>(
    cases: u32,
    strategy: S,
    check: impl Fn(&S::Value) -> Result<(), TestCaseError>,
) -> Result<(), String> {
    runner(cases)
        .run(&strategy, |v| check(&v))
        .map_err(|e| e.to_string())
}

// ---------- generator statistics ----------

/// Expected fraction of a user's picks that fall in `in_group` when drawing
/// `n` distinct items with weights `w`, one at a time with renormalisation.
///
/// Uses the exponential-clock view of weighted sampling without replacement:
/// item `i` is kept iff its clock `E_i / w_i` beats the `n`-th order
/// statistic, whose value `τ` concentrates at the root of
/// `Σ_i (1 - exp(-w_i τ)) = n`.
pub fn expected_in_group_fraction(weights: &[f64], in_group: &[bool], n: usize) -> f64 {
    let kept = |tau: f64| weights.iter().map(|w| 1.0 - (-w * tau).exp()).sum::<f64>();
    if n >= weights.len() {
        return in_group.iter().filter(|&&g| g).count() as f64 / weights.len() as f64;
    }
    let (mut lo, mut hi) = (0.0, 1.0);
    while kept(hi) < n as f64 {
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if kept(mid) < n as f64 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let tau = 0.5 * (lo + hi);
    weights
        .iter()
        .zip(in_group)
        .filter(|(_, &g)| g)
        .map(|(w, _)| 1.0 - (-w * tau).exp())
        .sum::<f64>()
        / n as f64
}
