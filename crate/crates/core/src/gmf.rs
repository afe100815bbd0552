//! Generalized Matrix Factorisation: `σ(φ · (w_u ⊙ v_i) + b)`.
//!
//! Gradients are derived by hand for this one architecture. With logit `z`
//! and BCE loss, `∂L/∂z = p - y`, and the chain rule through the element-wise
//! product gives the user, item and scoring-layer gradients below.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::adam::{AdamHyper, AdamState};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::seed::{self, stream};

/// Probability clamp applied before taking logs in the loss.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreLayer {
    pub weights: Vec<f64>,
    pub bias: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GmfModel {
    pub user_emb: Matrix,
    pub item_emb: Matrix,
    pub score: ScoreLayer,
}

/// Local-training and initialisation hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GmfHyper {
    pub dim: usize,
    /// Sampled negatives per positive.
    pub negatives: usize,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub init_user_std: f64,
    pub init_item_std: f64,
    pub init_score_std: f64,
}

impl Default for GmfHyper {
    fn default() -> Self {
        GmfHyper {
            dim: 16,
            negatives: 4,
            local_epochs: 2,
            batch_size: 32,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            init_user_std: 0.01,
            init_item_std: 0.01,
            init_score_std: 0.1,
        }
    }
}

impl GmfHyper {
    pub fn adam(&self) -> AdamHyper {
        AdamHyper {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
        }
    }
}

/// What a delegate uploads after local training.
#[derive(Clone, Debug, PartialEq)]
pub struct LocalUpdate {
    pub client: usize,
    pub user_row: Vec<f64>,
    /// Sorted ids of every item row the client trained (positives and sampled negatives).
    pub items: Vec<usize>,
    /// Updated rows, aligned with `items`.
    pub item_rows: Matrix,
    pub score: ScoreLayer,
    /// Number of interactions in the client's history.
    pub n_k: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
}

impl LocalUpdate {
    pub fn item_row(&self, idx: usize) -> &[f64] {
        self.item_rows.row(idx)
    }
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Binary cross-entropy with the prediction clamped to `[PROB_EPS, 1 - PROB_EPS]`.
pub fn bce_loss(pred: f64, label: f64) -> f64 {
    let p = pred.clamp(PROB_EPS, 1.0 - PROB_EPS);
    -(label * p.ln() + (1.0 - label) * (1.0 - p).ln())
}

#[inline]
pub fn logit(user_row: &[f64], item_row: &[f64], score: &ScoreLayer) -> f64 {
    let mut z = score.bias;
    for ((u, v), w) in user_row.iter().zip(item_row).zip(&score.weights) {
        z += w * u * v;
    }
    z
}

/// Loss and gradients for a single (user, item, label) example.
#[derive(Clone, Debug, PartialEq)]
pub struct ExampleGrad {
    pub loss: f64,
    pub user: Vec<f64>,
    pub item: Vec<f64>,
    pub weights: Vec<f64>,
    pub bias: f64,
}

pub fn example_gradient(
    user_row: &[f64],
    item_row: &[f64],
    score: &ScoreLayer,
    label: f64,
) -> ExampleGrad {
    let d = user_row.len();
    let mut g = ExampleGrad {
        loss: 0.0,
        user: vec![0.0; d],
        item: vec![0.0; d],
        weights: vec![0.0; d],
        bias: 0.0,
    };
    g.loss = accumulate(
        user_row,
        item_row,
        score,
        label,
        1.0,
        &mut g.user,
        &mut g.item,
        &mut g.weights,
        &mut g.bias,
    );
    g
}

/// Adds `scale * ∂loss/∂θ` into the gradient buffers and returns the loss.
#[inline]
#[allow(clippy::too_many_arguments)]
fn accumulate(
    u: &[f64],
    v: &[f64],
    score: &ScoreLayer,
    label: f64,
    scale: f64,
    gu: &mut [f64],
    gv: &mut [f64],
    gw: &mut [f64],
    gb: &mut f64,
) -> f64 {
    let p = sigmoid(logit(u, v, score));
    let dz = (p - label) * scale;
    for f in 0..u.len() {
        let w = score.weights[f];
        gu[f] += dz * w * v[f];
        gv[f] += dz * w * u[f];
        gw[f] += dz * u[f] * v[f];
    }
    *gb += dz;
    bce_loss(p, label)
}

impl GmfModel {
    pub fn init(num_users: usize, num_items: usize, dim: usize, seed: u64) -> Result<Self> {
        let h = GmfHyper {
            dim,
            ..GmfHyper::default()
        };
        Self::init_with(num_users, num_items, &h, seed)
    }

    pub fn init_with(num_users: usize, num_items: usize, hyper: &GmfHyper, seed: u64) -> Result<Self> {
        if num_users == 0 || num_items == 0 || hyper.dim == 0 {
            return Err(Error::invalid(format!(
                "model dimensions must be positive (users={num_users}, items={num_items}, dim={})",
                hyper.dim
            )));
        }
        let normal = |std: f64| {
            Normal::new(0.0, std).map_err(|e| Error::invalid(format!("init std {std}: {e}")))
        };
        let user_dist = normal(hyper.init_user_std)?;
        let item_dist = normal(hyper.init_item_std)?;
        let score_dist = normal(hyper.init_score_std)?;
        let mut rng = seed::rng(seed, &[stream::INIT]);
        let d = hyper.dim;
        let users: Vec<f64> = (0..num_users * d).map(|_| user_dist.sample(&mut rng)).collect();
        let items: Vec<f64> = (0..num_items * d).map(|_| item_dist.sample(&mut rng)).collect();
        let weights: Vec<f64> = (0..d).map(|_| score_dist.sample(&mut rng)).collect();
        Ok(GmfModel {
            user_emb: Matrix::from_vec(num_users, d, users),
            item_emb: Matrix::from_vec(num_items, d, items),
            score: ScoreLayer { weights, bias: 0.0 },
        })
    }

    pub fn num_users(&self) -> usize {
        self.user_emb.rows()
    }

    pub fn num_items(&self) -> usize {
        self.item_emb.rows()
    }

    pub fn dim(&self) -> usize {
        self.user_emb.cols()
    }

    fn check_ids(&self, user: usize, item: usize) -> Result<()> {
        if user >= self.num_users() {
            return Err(Error::invalid(format!(
                "user id {user} out of range (N={})",
                self.num_users()
            )));
        }
        if item >= self.num_items() {
            return Err(Error::invalid(format!(
                "item id {item} out of range (M={})",
                self.num_items()
            )));
        }
        Ok(())
    }

    pub fn logit(&self, user: usize, item: usize) -> Result<f64> {
        self.check_ids(user, item)?;
        Ok(logit(self.user_emb.row(user), self.item_emb.row(item), &self.score))
    }

    pub fn predict_score(&self, user: usize, item: usize) -> Result<f64> {
        self.logit(user, item).map(sigmoid)
    }

    pub fn is_finite(&self) -> bool {
        self.user_emb.is_finite()
            && self.item_emb.is_finite()
            && self.score.weights.iter().all(|w| w.is_finite())
            && self.score.bias.is_finite()
    }
}

/// Draws `per_positive` negatives for every positive, uniformly (with replacement)
/// from the items the client never interacted with.
fn sample_negatives<R: Rng>(
    num_items: usize,
    positives: &[usize],
    per_positive: usize,
    rng: &mut R,
) -> Vec<usize> {
    let wanted = positives.len() * per_positive;
    let mut seen = vec![false; num_items];
    for &i in positives {
        seen[i] = true;
    }
    let free = num_items - seen.iter().filter(|&&s| s).count();
    if free == 0 || wanted == 0 {
        return Vec::new();
    }
    if free * 2 >= num_items {
        let mut out = Vec::with_capacity(wanted);
        while out.len() < wanted {
            let i = rng.random_range(0..num_items);
            if !seen[i] {
                out.push(i);
            }
        }
        out
    } else {
        let pool: Vec<usize> = (0..num_items).filter(|&i| !seen[i]).collect();
        (0..wanted).map(|_| pool[rng.random_range(0..pool.len())]).collect()
    }
}

/// Offsets into the flat local parameter vector `[user | items | weights | bias]`.
struct LocalLayout {
    d: usize,
    n_items: usize,
}

impl LocalLayout {
    fn len(&self) -> usize {
        (self.n_items + 2) * self.d + 1
    }

    fn split_mut<'a>(
        &self,
        buf: &'a mut [f64],
    ) -> (&'a mut [f64], &'a mut [f64], &'a mut [f64], &'a mut f64) {
        let (user, rest) = buf.split_at_mut(self.d);
        let (items, rest) = rest.split_at_mut(self.n_items * self.d);
        let (weights, bias) = rest.split_at_mut(self.d);
        (user, items, weights, &mut bias[0])
    }
}

fn unpack_score(params: &[f64], layout: &LocalLayout) -> ScoreLayer {
    let off = (layout.n_items + 1) * layout.d;
    ScoreLayer {
        weights: params[off..off + layout.d].to_vec(),
        bias: params[off + layout.d],
    }
}

fn mean_loss(params: &[f64], layout: &LocalLayout, samples: &[(usize, f64)]) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    let d = layout.d;
    let score = unpack_score(params, layout);
    let user = &params[..d];
    let items = &params[d..d + layout.n_items * d];
    let total: f64 = samples
        .iter()
        .map(|&(li, y)| bce_loss(sigmoid(logit(user, &items[li * d..(li + 1) * d], &score)), y))
        .sum();
    total / samples.len() as f64
}

/// Trains one client's copy of the model on its own interactions.
///
/// Negatives are drawn once per call (the caller reseeds per round) and kept
/// for all local epochs. Each epoch shuffles the samples and runs minibatch
/// Adam, starting from fresh optimiser state, over the user row, every touched
/// item row and the scoring layer. The reported loss is the mean BCE over the
/// local samples after the last epoch.
pub fn local_train(
    model: &GmfModel,
    user: usize,
    positives: &[usize],
    hyper: &GmfHyper,
    seed: u64,
) -> Result<LocalUpdate> {
    if user >= model.num_users() {
        return Err(Error::invalid(format!("client {user} out of range")));
    }
    if positives.is_empty() {
        return Err(Error::EmptyHistory(user));
    }
    if let Some(&bad) = positives.iter().find(|&&i| i >= model.num_items()) {
        return Err(Error::invalid(format!("item id {bad} out of range")));
    }
    let d = model.dim();
    let mut rng = seed::SimRng::seed_from_u64(seed);
    let negatives = sample_negatives(model.num_items(), positives, hyper.negatives, &mut rng);

    let mut items: Vec<usize> = positives.iter().chain(&negatives).copied().collect();
    items.sort_unstable();
    items.dedup();
    let local = |i: usize| items.binary_search(&i).expect("touched item");
    let mut samples: Vec<(usize, f64)> = positives
        .iter()
        .map(|&i| (local(i), 1.0))
        .chain(negatives.iter().map(|&i| (local(i), 0.0)))
        .collect();

    let layout = LocalLayout {
        d,
        n_items: items.len(),
    };
    let mut params = Vec::with_capacity(layout.len());
    params.extend_from_slice(model.user_emb.row(user));
    for &i in &items {
        params.extend_from_slice(model.item_emb.row(i));
    }
    params.extend_from_slice(&model.score.weights);
    params.push(model.score.bias);

    let initial_loss = mean_loss(&params, &layout, &samples);
    let mut adam = AdamState::new(layout.len(), hyper.adam());
    let mut grads = vec![0.0; layout.len()];
    let batch = hyper.batch_size.max(1);
    for _ in 0..hyper.local_epochs {
        samples.shuffle(&mut rng);
        for chunk in samples.chunks(batch) {
            grads.iter_mut().for_each(|g| *g = 0.0);
            let score = unpack_score(&params, &layout);
            let (gu, gitems, gw, gb) = layout.split_mut(&mut grads);
            let scale = 1.0 / chunk.len() as f64;
            let user_row = &params[..d];
            for &(li, y) in chunk {
                let v = &params[d + li * d..d + (li + 1) * d];
                accumulate(
                    user_row,
                    v,
                    &score,
                    y,
                    scale,
                    gu,
                    &mut gitems[li * d..(li + 1) * d],
                    gw,
                    gb,
                );
            }
            adam.step(&mut params, &grads)?;
        }
    }
    let final_loss = mean_loss(&params, &layout, &samples);

    let item_rows = Matrix::from_vec(items.len(), d, params[d..d + items.len() * d].to_vec());
    Ok(LocalUpdate {
        client: user,
        user_row: params[..d].to_vec(),
        score: unpack_score(&params, &layout),
        items,
        item_rows,
        n_k: positives.len(),
        initial_loss,
        final_loss,
    })
}

/// Full-data trainer for the centralised GMF baseline.
pub struct CentralTrainer {
    adam: AdamState,
    params: Vec<f64>,
    num_users: usize,
    num_items: usize,
    dim: usize,
}

impl CentralTrainer {
    pub fn new(model: &GmfModel, hyper: &GmfHyper) -> Self {
        let mut params = Vec::new();
        params.extend_from_slice(model.user_emb.as_slice());
        params.extend_from_slice(model.item_emb.as_slice());
        params.extend_from_slice(&model.score.weights);
        params.push(model.score.bias);
        CentralTrainer {
            adam: AdamState::new(params.len(), hyper.adam()),
            params,
            num_users: model.num_users(),
            num_items: model.num_items(),
            dim: model.dim(),
        }
    }

    pub fn model(&self) -> GmfModel {
        let (n, m, d) = (self.num_users, self.num_items, self.dim);
        let p = &self.params;
        GmfModel {
            user_emb: Matrix::from_vec(n, d, p[..n * d].to_vec()),
            item_emb: Matrix::from_vec(m, d, p[n * d..(n + m) * d].to_vec()),
            score: ScoreLayer {
                weights: p[(n + m) * d..(n + m + 1) * d].to_vec(),
                bias: p[(n + m + 1) * d],
            },
        }
    }

    /// One pass over every user's positives plus freshly sampled negatives; returns the mean loss.
    pub fn epoch(&mut self, histories: &[Vec<usize>], hyper: &GmfHyper, seed: u64) -> Result<f64> {
        let (n, m, d) = (self.num_users, self.num_items, self.dim);
        let mut rng = seed::SimRng::seed_from_u64(seed);
        let mut samples: Vec<(usize, usize, f64)> = Vec::new();
        for (u, pos) in histories.iter().enumerate() {
            samples.extend(pos.iter().map(|&i| (u, i, 1.0)));
            let neg = sample_negatives(m, pos, hyper.negatives, &mut rng);
            samples.extend(neg.into_iter().map(|i| (u, i, 0.0)));
        }
        samples.shuffle(&mut rng);
        let mut grads = vec![0.0; self.params.len()];
        let mut total = 0.0;
        for chunk in samples.chunks(hyper.batch_size.max(1)) {
            grads.iter_mut().for_each(|g| *g = 0.0);
            let p = &self.params;
            let score = ScoreLayer {
                weights: p[(n + m) * d..(n + m + 1) * d].to_vec(),
                bias: p[(n + m + 1) * d],
            };
            let (gusers, rest) = grads.split_at_mut(n * d);
            let (gitems, rest) = rest.split_at_mut(m * d);
            let (gw, gb) = rest.split_at_mut(d);
            let scale = 1.0 / chunk.len() as f64;
            for &(u, i, y) in chunk {
                total += accumulate(
                    &p[u * d..(u + 1) * d],
                    &p[(n + i) * d..(n + i + 1) * d],
                    &score,
                    y,
                    scale,
                    &mut gusers[u * d..(u + 1) * d],
                    &mut gitems[i * d..(i + 1) * d],
                    gw,
                    &mut gb[0],
                );
            }
            self.adam.step(&mut self.params, &grads)?;
        }
        Ok(total / samples.len().max(1) as f64)
    }
}
