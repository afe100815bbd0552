//! Experiment description, deserialised from a key-value document.

use std::fmt;
use std::marker::PhantomData;
use std::path::PathBuf;

use serde::de::{self, DeserializeOwned, IntoDeserializer, SeqAccess, Visitor};
use serde::{Deserialize, Deserializer, Serialize};

use crate::client::ClientStrategy;
use crate::data::{self, Dataset, EvalSplit, InteractionFormat};
use crate::datagen::{self, GenParams};
use crate::error::{Error, Result};
use crate::gmf::GmfHyper;
use crate::items::ItemScheme;
use crate::predictor::FnnHyper;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DatasetSource {
    File {
        path: PathBuf,
        #[serde(default = "default_format")]
        format: InteractionFormat,
    },
    Synthetic(GenParams),
}

fn default_format() -> InteractionFormat {
    InteractionFormat::TsvUirt
}

impl DatasetSource {
    pub fn load(&self) -> Result<Dataset> {
        match self {
            DatasetSource::File { path, format } => Dataset::load(path, *format),
            DatasetSource::Synthetic(p) => Ok(datagen::generate_dataset(p)?.dataset),
        }
    }
}

/// Loads the dataset and applies the leave-one-out split.
pub fn prepare_data(source: &DatasetSource, split_seed: u64) -> Result<(Dataset, Dataset, EvalSplit)> {
    let full = source.load()?;
    let (train, split) = data::leave_one_out(&full, split_seed);
    Ok((full, train, split))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FedFastHyper {
    pub clusters: usize,
    pub max_iters: usize,
}

impl Default for FedFastHyper {
    fn default() -> Self {
        FedFastHyper {
            clusters: 10,
            max_iters: 50,
        }
    }
}

/// A block of clients sharing one availability probability.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AvailabilityGroup {
    /// Share of all clients placed in this block.
    pub fraction: f64,
    pub probability: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub name: String,
    pub dataset: DatasetSource,
    #[serde(default = "default_client", deserialize_with = "one_or_many")]
    pub client_strategy: Vec<ClientStrategy>,
    #[serde(default = "default_item", deserialize_with = "one_or_many")]
    pub item_strategy: Vec<ItemScheme>,
    #[serde(default = "default_sample_rate")]
    pub sample_rate: f64,
    #[serde(default = "default_rounds")]
    pub rounds: usize,
    #[serde(default = "default_eval_interval")]
    pub eval_interval: usize,
    #[serde(default = "default_k")]
    pub top_k: usize,
    /// Rounds always evaluated, in addition to the regular cadence.
    #[serde(default = "default_checkpoints")]
    pub checkpoints: Vec<usize>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    /// Seed of the leave-one-out negatives, shared by every cell.
    #[serde(default)]
    pub split_seed: u64,
    #[serde(default)]
    pub gmf: GmfHyper,
    #[serde(default)]
    pub fnn: FnnHyper,
    #[serde(default)]
    pub fedfast: FedFastHyper,
    #[serde(default)]
    pub availability: Vec<AvailabilityGroup>,
}

fn default_client() -> Vec<ClientStrategy> {
    vec![ClientStrategy::FedFnn]
}
fn default_item() -> Vec<ItemScheme> {
    vec![ItemScheme::W1]
}
fn default_sample_rate() -> f64 {
    0.1
}
fn default_rounds() -> usize {
    500
}
fn default_eval_interval() -> usize {
    10
}
fn default_k() -> usize {
    10
}
fn default_checkpoints() -> Vec<usize> {
    vec![100, 300, 500]
}
fn default_seeds() -> Vec<u64> {
    vec![0]
}

/// Accepts either a single value or a list.
fn one_or_many<'de, D, T>(deserializer: D) -> std::result::Result<Vec<T>, D::Error>
where
    D: Deserializer<'de>,
    T: DeserializeOwned,
{
    struct OneOrMany<T>(PhantomData<T>);

    impl<'de, T: DeserializeOwned> Visitor<'de> for OneOrMany<T> {
        type Value = Vec<T>;

        fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
            f.write_str("a name or a list of names")
        }

        fn visit_str<E: de::Error>(self, v: &str) -> std::result::Result<Self::Value, E> {
            let one: T = T::deserialize(v.into_deserializer())?;
            Ok(vec![one])
        }

        fn visit_seq<A: SeqAccess<'de>>(self, mut seq: A) -> std::result::Result<Self::Value, A::Error> {
            let mut out = Vec::new();
            while let Some(v) = seq.next_element::<String>()? {
                out.push(T::deserialize(v.as_str().into_deserializer())?);
            }
            Ok(out)
        }
    }

    deserializer.deserialize_any(OneOrMany(PhantomData))
}

/// One fully resolved (client strategy, item scheme, seed) cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSettings {
    pub client_strategy: ClientStrategy,
    pub item_strategy: ItemScheme,
    pub seed: u64,
    pub rounds: usize,
    pub eval_interval: usize,
    pub top_k: usize,
    pub checkpoints: Vec<usize>,
    pub sample_rate: f64,
    pub gmf: GmfHyper,
    pub fnn: FnnHyper,
    pub fedfast: FedFastHyper,
    pub availability: Vec<AvailabilityGroup>,
}

impl RunSettings {
    pub fn new(client_strategy: ClientStrategy, item_strategy: ItemScheme, seed: u64) -> Self {
        RunSettings {
            client_strategy,
            item_strategy,
            seed,
            rounds: default_rounds(),
            eval_interval: default_eval_interval(),
            top_k: default_k(),
            checkpoints: default_checkpoints(),
            sample_rate: default_sample_rate(),
            gmf: GmfHyper::default(),
            fnn: FnnHyper::default(),
            fedfast: FedFastHyper::default(),
            availability: Vec::new(),
        }
    }

    /// Clients sampled per round: `floor(rate · N)`, at least one.
    pub fn delegates_per_round(&self, num_users: usize) -> usize {
        ((self.sample_rate * num_users as f64).floor() as usize).max(1)
    }

    pub fn is_eval_round(&self, round: usize) -> bool {
        round == 0
            || round == self.rounds
            || round % self.eval_interval == 0
            || self.checkpoints.contains(&round)
    }

    pub fn label(&self) -> String {
        format!("{}-{}-seed{}", self.client_strategy, self.item_strategy, self.seed)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sample_rate > 0.0 && self.sample_rate <= 1.0) {
            return Err(Error::config("sample_rate", "must be in (0, 1]"));
        }
        if self.eval_interval == 0 {
            return Err(Error::config("eval_interval", "must be at least 1"));
        }
        if self.top_k == 0 {
            return Err(Error::config("top_k", "must be at least 1"));
        }
        let g = &self.gmf;
        if g.dim == 0 {
            return Err(Error::config("gmf.dim", "must be at least 1"));
        }
        if g.batch_size == 0 {
            return Err(Error::config("gmf.batch_size", "must be at least 1"));
        }
        if !(g.learning_rate > 0.0) {
            return Err(Error::config("gmf.learning_rate", "must be positive"));
        }
        if !(0.0..1.0).contains(&g.beta1) || !(0.0..1.0).contains(&g.beta2) {
            return Err(Error::config("gmf.beta1/beta2", "must be in [0, 1)"));
        }
        for (name, v) in [
            ("gmf.init_user_std", g.init_user_std),
            ("gmf.init_item_std", g.init_item_std),
            ("gmf.init_score_std", g.init_score_std),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(name, "must be positive"));
            }
        }
        let f = &self.fnn;
        if f.hidden.is_empty() || f.learning_rates.is_empty() || f.dropouts.is_empty() {
            return Err(Error::config("fnn.hidden/learning_rates/dropouts", "grid must be non-empty"));
        }
        if f.dropouts.iter().any(|d| !(0.0..1.0).contains(d)) {
            return Err(Error::config("fnn.dropouts", "must be in [0, 1)"));
        }
        if f.hidden.iter().flatten().any(|&w| w == 0) {
            return Err(Error::config("fnn.hidden", "layer widths must be positive"));
        }
        if f.patience == 0 {
            return Err(Error::config("fnn.patience", "must be at least 1"));
        }
        if f.cv_folds < 2 {
            return Err(Error::config("fnn.cv_folds", "must be at least 2"));
        }
        if !(f.gamma >= 0.0) {
            return Err(Error::config("fnn.gamma", "must be non-negative"));
        }
        if !(f.epsilon > 0.0) {
            return Err(Error::config("fnn.epsilon", "must be positive"));
        }
        if self.fedfast.clusters == 0 {
            return Err(Error::config("fedfast.clusters", "must be at least 1"));
        }
        let mut total = 0.0;
        for a in &self.availability {
            if !(a.probability > 0.0 && a.probability <= 1.0) {
                return Err(Error::config("availability.probability", "must be in (0, 1]"));
            }
            if !(a.fraction > 0.0 && a.fraction <= 1.0) {
                return Err(Error::config("availability.fraction", "must be in (0, 1]"));
            }
            total += a.fraction;
        }
        if total > 1.0 + 1e-12 {
            return Err(Error::config("availability.fraction", "fractions sum above 1"));
        }
        Ok(())
    }
}

impl ExperimentConfig {
    /// Every (client strategy, item scheme, seed) combination, in that nesting order.
    pub fn cells(&self) -> Vec<RunSettings> {
        let mut out = Vec::new();
        for &c in &self.client_strategy {
            for &i in &self.item_strategy {
                for &seed in &self.seeds {
                    out.push(self.cell(c, i, seed));
                }
            }
        }
        out
    }

    pub fn cell(&self, client_strategy: ClientStrategy, item_strategy: ItemScheme, seed: u64) -> RunSettings {
        RunSettings {
            client_strategy,
            item_strategy,
            seed,
            rounds: self.rounds,
            eval_interval: self.eval_interval,
            top_k: self.top_k,
            checkpoints: self.checkpoints.clone(),
            sample_rate: self.sample_rate,
            gmf: self.gmf.clone(),
            fnn: self.fnn.clone(),
            fedfast: self.fedfast.clone(),
            availability: self.availability.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.client_strategy.is_empty() {
            return Err(Error::config("client_strategy", "at least one strategy required"));
        }
        if self.item_strategy.is_empty() {
            return Err(Error::config("item_strategy", "at least one scheme required"));
        }
        if self.seeds.is_empty() {
            return Err(Error::config("seeds", "at least one seed required"));
        }
        if let DatasetSource::Synthetic(p) = &self.dataset {
            p.validate().map_err(|e| match e {
                Error::Config { field, message } => Error::config(format!("dataset.{field}"), message),
                other => other,
            })?;
        }
        self.cell(self.client_strategy[0], self.item_strategy[0], self.seeds[0])
            .validate()
    }
}
