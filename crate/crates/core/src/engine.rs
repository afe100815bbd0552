//! Round loop: sampling, local training, subordinate updates, item and
//! scoring-layer aggregation, loss tracking and evaluation.

use std::time::Instant;

use log::{debug, info, warn};
use rand::seq::{index, SliceRandom};
use rand::Rng;
use rayon::prelude::*;

use crate::client::{self, ClientStrategy, RowUpdates};
use crate::config::{AvailabilityGroup, RunSettings};
use crate::data::{Dataset, EvalSplit};
use crate::error::{Error, Result};
use crate::eval::{self, GroupMetrics, MetricsLog, MetricsRow};
use crate::gmf::{self, CentralTrainer, GmfModel, LocalUpdate};
use crate::items;
use crate::kmeans;
use crate::matrix::Matrix;
use crate::predictor::{self, FitReport, PatienceMonitor};
use crate::seed::{self, stream, SimRng};

/// Per-client probability of being reachable in a round.
#[derive(Clone, Debug, PartialEq)]
pub struct AvailabilityProfile {
    probabilities: Vec<f64>,
    /// Block index per client; 0 is the always-available remainder.
    group: Vec<usize>,
}

impl AvailabilityProfile {
    pub fn always(num_clients: usize) -> Self {
        AvailabilityProfile {
            probabilities: vec![1.0; num_clients],
            group: vec![0; num_clients],
        }
    }

    /// Arbitrary probabilities in `[0, 1]`, all in group 0.
    pub fn from_probabilities(probabilities: Vec<f64>) -> Result<Self> {
        if probabilities.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::invalid("availability probabilities must lie in [0, 1]"));
        }
        let n = probabilities.len();
        Ok(AvailabilityProfile {
            probabilities,
            group: vec![0; n],
        })
    }

    /// Shuffles clients uniformly and carves off one block per entry of
    /// `groups` (block `g + 1`); the rest stay fully available in block 0.
    pub fn from_groups(num_clients: usize, groups: &[AvailabilityGroup], seed: u64) -> Self {
        let mut profile = Self::always(num_clients);
        if groups.is_empty() {
            return profile;
        }
        let mut order: Vec<usize> = (0..num_clients).collect();
        order.shuffle(&mut seed::rng(seed, &[stream::AVAILABILITY]));
        let mut start = 0;
        for (g, block) in groups.iter().enumerate() {
            let size = ((block.fraction * num_clients as f64).round() as usize).min(num_clients - start);
            for &c in &order[start..start + size] {
                profile.probabilities[c] = block.probability;
                profile.group[c] = g + 1;
            }
            start += size;
        }
        profile
    }

    pub fn len(&self) -> usize {
        self.probabilities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probabilities.is_empty()
    }

    pub fn probability(&self, client: usize) -> f64 {
        self.probabilities[client]
    }

    pub fn group_of(&self, client: usize) -> usize {
        self.group[client]
    }

    pub fn num_groups(&self) -> usize {
        self.group.iter().max().map_or(0, |g| g + 1)
    }
}

/// Flags each client available with its own probability, then takes a
/// uniform subset of `min(m, available)` clients. Returned ids are sorted.
pub fn sample_clients<R: Rng>(profile: &AvailabilityProfile, m: usize, rng: &mut R) -> Vec<usize> {
    let available: Vec<usize> = (0..profile.len())
        .filter(|&c| {
            let draw: f64 = rng.random();
            draw < profile.probability(c)
        })
        .collect();
    let take = m.min(available.len());
    let mut picked: Vec<usize> = index::sample(rng, available.len(), take)
        .into_iter()
        .map(|i| available[i])
        .collect();
    picked.sort_unstable();
    picked
}

#[derive(Clone, Debug)]
pub struct FederationState {
    pub model: GmfModel,
    /// Completed rounds.
    pub round: usize,
    /// Global loss `L(t)` for every completed round.
    pub loss_history: Vec<f64>,
    pub monitor: PatienceMonitor,
}

/// The delegates' uploads for one round.
#[derive(Clone, Debug)]
pub struct RoundUpdate {
    pub delegates: Vec<usize>,
    pub updates: Vec<LocalUpdate>,
    /// `Z[k]`, the L1 size of each delegate's item updates.
    pub magnitudes: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct RoundSummary {
    pub round: usize,
    pub delegates: Vec<usize>,
    pub loss: f64,
    pub subordinates_updated: usize,
    pub predictor: Option<FitReport>,
}

#[derive(Clone, Debug)]
pub enum RoundOutcome {
    /// No client was available.
    Skipped { round: usize },
    Completed(RoundSummary),
}

/// One simulation cell.
pub struct Federation<'a> {
    settings: &'a RunSettings,
    histories: Vec<Vec<usize>>,
    split: &'a EvalSplit,
    profile: AvailabilityProfile,
    state: FederationState,
}

impl<'a> Federation<'a> {
    pub fn new(settings: &'a RunSettings, train: &'a Dataset, split: &'a EvalSplit) -> Result<Self> {
        settings.validate()?;
        let model = GmfModel::init_with(train.num_users, train.num_items, &settings.gmf, settings.seed)?;
        let profile = AvailabilityProfile::from_groups(train.num_users, &settings.availability, settings.seed);
        Ok(Federation {
            settings,
            histories: train.histories(),
            split,
            profile,
            state: FederationState {
                model,
                round: 0,
                loss_history: Vec::new(),
                monitor: PatienceMonitor::new(settings.fnn.patience, settings.fnn.epsilon),
            },
        })
    }

    pub fn state(&self) -> &FederationState {
        &self.state
    }

    pub fn model(&self) -> &GmfModel {
        &self.state.model
    }

    pub fn profile(&self) -> &AvailabilityProfile {
        &self.profile
    }

    /// Replaces the availability profile (before the first round).
    pub fn set_profile(&mut self, profile: AvailabilityProfile) -> Result<()> {
        if profile.len() != self.histories.len() {
            return Err(Error::invalid("availability profile size differs from client count"));
        }
        self.profile = profile;
        Ok(())
    }

    fn local_updates(&self, round: usize, delegates: &[usize]) -> Vec<LocalUpdate> {
        let model = &self.state.model;
        let s = self.settings;
        delegates
            .par_iter()
            .filter_map(|&k| {
                let seed = seed::derive(s.seed, &[stream::LOCAL, round as u64, k as u64]);
                match gmf::local_train(model, k, &self.histories[k], &s.gmf, seed) {
                    Ok(u) => Some(u),
                    Err(Error::EmptyHistory(_)) => {
                        warn!("round {round}: client {k} has no training data; skipped");
                        None
                    }
                    Err(e) => {
                        warn!("round {round}: client {k} failed local training: {e}");
                        None
                    }
                }
            })
            .collect()
    }

    fn subordinate_rows(
        &mut self,
        round: usize,
        delegate_rows: &RowUpdates,
        subordinates: &[usize],
        loss: f64,
    ) -> Result<(RowUpdates, Option<FitReport>)> {
        let s = self.settings;
        let table = &self.state.model.user_emb;
        Ok(match s.client_strategy {
            ClientStrategy::Wcu | ClientStrategy::Gmf => (client::wcu_subordinates(), None),
            ClientStrategy::FedAvg => (client::fedavg_subordinates(delegate_rows, subordinates), None),
            ClientStrategy::FedFast => {
                let k = s.fedfast.clusters.min(table.rows());
                let seed = seed::derive(s.seed, &[stream::KMEANS, round as u64]);
                let clusters = kmeans::kmeans_fit(table, k, s.fedfast.max_iters, seed)?;
                (
                    client::fedfast_subordinates(&clusters, table, delegate_rows, subordinates),
                    None,
                )
            }
            ClientStrategy::FedFnn => {
                let mut history = self.state.loss_history.clone();
                history.push(loss);
                if !self.state.monitor.check(&history) {
                    return Ok((RowUpdates::new(), None));
                }
                if delegate_rows.len() < 2 {
                    warn!("round {round}: {} delegate(s), predictor skipped", delegate_rows.len());
                    return Ok((RowUpdates::new(), None));
                }
                let old: Vec<&[f64]> = delegate_rows.keys().map(|&k| table.row(k)).collect();
                let deltas: Vec<Vec<f64>> = delegate_rows
                    .iter()
                    .map(|(&k, new)| new.iter().zip(table.row(k)).map(|(n, o)| n - o).collect())
                    .collect();
                let inputs = Matrix::from_rows(&old);
                let targets = Matrix::from_rows(&deltas);
                let seed = seed::derive(s.seed, &[stream::PREDICTOR, round as u64]);
                let (model, report) = predictor::cross_validated_fit(
                    &inputs,
                    &targets,
                    &s.fnn.grid(),
                    &s.fnn.fit_settings(),
                    seed,
                )?;
                debug!(
                    "round {round}: predictor {:?} lr={} dropout={} cv rmse={:.3e}",
                    report.chosen.hidden, report.chosen.learning_rate, report.chosen.dropout, report.rmse
                );
                let rows: Vec<(usize, Vec<f64>)> = subordinates
                    .par_iter()
                    .map(|&j| {
                        let w = predictor::predict_subordinate(table.row(j), &model, s.fnn.gamma, round, s.fnn.mode);
                        (j, w)
                    })
                    .collect();
                (rows.into_iter().collect(), Some(report))
            }
        })
    }

    /// Runs the next round.
    pub fn run_round(&mut self) -> Result<RoundOutcome> {
        let s = self.settings;
        let round = self.state.round + 1;
        let n = self.histories.len();
        let m = s.delegates_per_round(n);
        let mut rng: SimRng = seed::rng(s.seed, &[stream::SAMPLING, round as u64]);
        let sampled = sample_clients(&self.profile, m, &mut rng);

        let updates = self.local_updates(round, &sampled);
        if updates.is_empty() {
            warn!("round {round}: no delegate available; round skipped");
            let last = self.state.loss_history.last().copied().unwrap_or(f64::NAN);
            self.state.loss_history.push(last);
            self.state.round = round;
            return Ok(RoundOutcome::Skipped { round });
        }

        let prev_items = &self.state.model.item_emb;
        let magnitudes: Vec<f64> = updates.iter().map(|u| items::update_magnitude(u, prev_items)).collect();
        let round_update = RoundUpdate {
            delegates: updates.iter().map(|u| u.client).collect(),
            updates,
            magnitudes,
        };

        let total_n: f64 = round_update.updates.iter().map(|u| u.n_k as f64).sum();
        let loss = round_update
            .updates
            .iter()
            .map(|u| u.n_k as f64 * u.final_loss)
            .sum::<f64>()
            / total_n;

        let delegate_rows: RowUpdates = round_update
            .updates
            .iter()
            .map(|u| (u.client, u.user_row.clone()))
            .collect();
        let subordinates: Vec<usize> = (0..n).filter(|k| !delegate_rows.contains_key(k)).collect();
        let (sub_rows, report) = self.subordinate_rows(round, &delegate_rows, &subordinates, loss)?;

        let model = &mut self.state.model;
        for (&j, row) in &sub_rows {
            debug_assert!(!delegate_rows.contains_key(&j));
            model.user_emb.set_row(j, row);
        }
        for (&k, row) in &delegate_rows {
            model.user_emb.set_row(k, row);
        }

        let alphas = items::compute_alphas(s.item_strategy, &round_update.updates, &round_update.magnitudes);
        model.item_emb = items::aggregate_items(&model.item_emb, &round_update.updates, &alphas);

        // scoring layer: interaction-weighted mean of the delegates' copies
        let mut dw = vec![0.0; model.score.weights.len()];
        let mut db = 0.0;
        for u in &round_update.updates {
            let a = u.n_k as f64 / total_n;
            for ((d, new), old) in dw.iter_mut().zip(&u.score.weights).zip(&model.score.weights) {
                *d += a * (new - old);
            }
            db += a * (u.score.bias - model.score.bias);
        }
        for (w, d) in model.score.weights.iter_mut().zip(&dw) {
            *w += d;
        }
        model.score.bias += db;

        self.state.loss_history.push(loss);
        self.state.round = round;
        Ok(RoundOutcome::Completed(RoundSummary {
            round,
            delegates: round_update.delegates,
            loss,
            subordinates_updated: sub_rows.len(),
            predictor: report,
        }))
    }

    pub fn evaluate(&self, started: Instant) -> Result<MetricsRow> {
        metrics_row(
            &self.state.model,
            self.split,
            self.settings.top_k,
            self.state.round,
            self.state.loss_history.last().copied().filter(|l| l.is_finite()),
            &self.profile,
            started,
        )
    }

    /// Runs every round and evaluates on the configured cadence.
    pub fn run(mut self) -> Result<(MetricsLog, GmfModel)> {
        let started = Instant::now();
        let s = self.settings;
        let mut log = MetricsLog {
            client_strategy: s.client_strategy.to_string(),
            item_strategy: s.item_strategy.to_string(),
            seed: s.seed,
            rows: vec![self.evaluate(started)?],
            predictor_stopped_at: None,
            skipped_rounds: Vec::new(),
        };
        for _ in 0..s.rounds {
            let outcome = self.run_round()?;
            if let RoundOutcome::Skipped { round } = outcome {
                log.skipped_rounds.push(round);
            }
            if s.is_eval_round(self.state.round) {
                let row = self.evaluate(started)?;
                info!(
                    "{} round {}: hr={:.4} ndcg={:.4}",
                    s.label(),
                    row.round,
                    row.hr,
                    row.ndcg
                );
                log.rows.push(row);
            }
        }
        if s.client_strategy == ClientStrategy::FedFnn {
            log.predictor_stopped_at = self.state.monitor.stopped_at();
        }
        Ok((log, self.state.model))
    }
}

fn metrics_row(
    model: &GmfModel,
    split: &EvalSplit,
    k: usize,
    round: usize,
    loss: Option<f64>,
    profile: &AvailabilityProfile,
    started: Instant,
) -> Result<MetricsRow> {
    let all = eval::evaluate(model, split, k)?;
    let mut groups = Vec::new();
    if profile.num_groups() > 1 {
        for g in 0..profile.num_groups() {
            if let Ok(m) = eval::evaluate_users(model, split, k, |u| profile.group_of(u) == g) {
                groups.push(GroupMetrics {
                    group: g,
                    hr: m.hr,
                    ndcg: m.ndcg,
                });
            }
        }
    }
    Ok(MetricsRow {
        round,
        hr: all.hr,
        ndcg: all.ndcg,
        loss,
        groups,
        elapsed_secs: started.elapsed().as_secs_f64(),
    })
}

/// Centralised GMF: every "round" is one epoch over all training data.
fn run_centralized(settings: &RunSettings, train: &Dataset, split: &EvalSplit) -> Result<(MetricsLog, GmfModel)> {
    settings.validate()?;
    let started = Instant::now();
    let model = GmfModel::init_with(train.num_users, train.num_items, &settings.gmf, settings.seed)?;
    let histories = train.histories();
    let profile = AvailabilityProfile::from_groups(train.num_users, &settings.availability, settings.seed);
    let mut trainer = CentralTrainer::new(&model, &settings.gmf);
    let mut log = MetricsLog {
        client_strategy: settings.client_strategy.to_string(),
        item_strategy: settings.item_strategy.to_string(),
        seed: settings.seed,
        rows: vec![metrics_row(&model, split, settings.top_k, 0, None, &profile, started)?],
        predictor_stopped_at: None,
        skipped_rounds: Vec::new(),
    };
    for epoch in 1..=settings.rounds {
        let seed = seed::derive(settings.seed, &[stream::LOCAL, epoch as u64]);
        let loss = trainer.epoch(&histories, &settings.gmf, seed)?;
        if settings.is_eval_round(epoch) {
            let m = trainer.model();
            log.rows.push(metrics_row(&m, split, settings.top_k, epoch, Some(loss), &profile, started)?);
        }
    }
    Ok((log, trainer.model()))
}

/// Runs one cell end to end and returns its metrics log and final model.
pub fn run_experiment(settings: &RunSettings, train: &Dataset, split: &EvalSplit) -> Result<(MetricsLog, GmfModel)> {
    if settings.client_strategy == ClientStrategy::Gmf {
        return run_centralized(settings, train, split);
    }
    Federation::new(settings, train, split)?.run()
}
