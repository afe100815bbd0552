//! Synthetic interactions with clustered preferences.
//!
//! Users and items are split into `G` aligned groups. Each user's sparsity is
//! an affine map of a Beta draw around the target `s`; each item gets a Beta
//! popularity; a user samples items without replacement with weight
//! `η · p_i` inside its own group and `(1 - η) · p_i` elsewhere.

use std::fs;
use std::path::Path;

use rand::seq::index;
use rand_distr::{Beta, Distribution};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::seed::{self, stream};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenParams {
    pub users: usize,
    pub items: usize,
    pub groups: usize,
    /// Target mean sparsity `s`.
    pub sparsity: f64,
    pub beta_a: f64,
    pub beta_b: f64,
    pub eta: f64,
    pub seed: u64,
}

impl Default for GenParams {
    fn default() -> Self {
        GenParams {
            users: 5000,
            items: 3000,
            groups: 5,
            sparsity: 0.063,
            beta_a: 1.0,
            beta_b: 3.0,
            eta: 0.9,
            seed: 0,
        }
    }
}

impl GenParams {
    pub fn validate(&self) -> Result<()> {
        if self.users == 0 || self.items == 0 {
            return Err(Error::config("users/items", "must be positive"));
        }
        if self.groups == 0 || self.groups > self.users.min(self.items) {
            return Err(Error::config(
                "groups",
                format!("must be in 1..={}", self.users.min(self.items)),
            ));
        }
        if !(self.sparsity > 0.0 && self.sparsity < 1.0) {
            return Err(Error::config("sparsity", "must be in (0, 1)"));
        }
        if !(self.eta > 0.0 && self.eta <= 1.0) {
            return Err(Error::config("eta", "must be in (0, 1]"));
        }
        if !(self.beta_a > 0.0 && self.beta_b > 0.0) {
            return Err(Error::config("beta_a/beta_b", "must be positive"));
        }
        Ok(())
    }

    fn beta(&self) -> Result<Beta<f64>> {
        Beta::new(self.beta_a, self.beta_b).map_err(|e| Error::invalid(format!("beta: {e}")))
    }
}

/// Balanced contiguous assignment of `n` ids to `groups` groups.
pub fn assign_groups(n: usize, groups: usize) -> Vec<usize> {
    (0..n).map(|i| i * groups / n).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupMap {
    pub groups: usize,
    pub user_group: Vec<usize>,
    pub item_group: Vec<usize>,
}

impl GroupMap {
    pub fn new(users: usize, items: usize, groups: usize) -> Self {
        GroupMap {
            groups,
            user_group: assign_groups(users, groups),
            item_group: assign_groups(items, groups),
        }
    }

    /// Writes `kind\tid\tgroup` rows (`kind` is `user` or `item`).
    pub fn write_tsv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = String::from("kind\tid\tgroup\n");
        for (u, g) in self.user_group.iter().enumerate() {
            out.push_str(&format!("user\t{u}\t{g}\n"));
        }
        for (i, g) in self.item_group.iter().enumerate() {
            out.push_str(&format!("item\t{i}\t{g}\n"));
        }
        fs::write(path, out)?;
        Ok(())
    }
}

/// Median, averaging the two middle values for even lengths.
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// `s_u = s + s (r_u - median(r))`, clamped to `[1/M, 1]`.
pub fn sparsity_from_draws(draws: &[f64], sparsity: f64, items: usize) -> Vec<f64> {
    let mid = median(draws);
    let floor = 1.0 / items as f64;
    draws
        .iter()
        .map(|&r| (sparsity + sparsity * (r - mid)).clamp(floor, 1.0))
        .collect()
}

pub fn gen_sparsity(params: &GenParams) -> Result<Vec<f64>> {
    let beta = params.beta()?;
    let mut rng = seed::rng(params.seed, &[stream::DATAGEN, 1]);
    let draws: Vec<f64> = (0..params.users).map(|_| beta.sample(&mut rng)).collect();
    Ok(sparsity_from_draws(&draws, params.sparsity, params.items))
}

/// Unnormalised Beta popularity for every item, indexed by item id.
pub fn gen_popularity(params: &GenParams) -> Result<Vec<f64>> {
    let beta = params.beta()?;
    let mut rng = seed::rng(params.seed, &[stream::DATAGEN, 2]);
    Ok((0..params.items).map(|_| beta.sample(&mut rng)).collect())
}

/// `⌈M · s_u⌉`, at least one and at most `M`.
pub fn interaction_count(items: usize, s_u: f64) -> usize {
    // guard against M · (1/M) landing a hair above an integer
    let raw = (items as f64 * s_u - 1e-9).ceil();
    (raw.max(1.0) as usize).min(items)
}

#[inline]
fn affinity(user_group: usize, item_group: usize, eta: f64) -> f64 {
    if user_group == item_group {
        eta
    } else {
        1.0 - eta
    }
}

/// `p(u, i) = h(u,i) p_i / Σ_j h(u,j) p_j`.
pub fn interaction_prob(user: usize, item: usize, groups: &GroupMap, popularity: &[f64], eta: f64) -> f64 {
    let g = groups.user_group[user];
    let total: f64 = popularity
        .iter()
        .zip(&groups.item_group)
        .map(|(p, &ig)| affinity(g, ig, eta) * p)
        .sum();
    affinity(g, groups.item_group[item], eta) * popularity[item] / total
}

#[derive(Clone, Debug)]
pub struct Generated {
    pub dataset: Dataset,
    pub groups: GroupMap,
    pub sparsity: Vec<f64>,
    pub popularity: Vec<f64>,
}

/// Generates the full interaction set. Item ids double as raw ids; the
/// timestamp of an interaction is its draw order within the user.
pub fn generate_dataset(params: &GenParams) -> Result<Generated> {
    params.validate()?;
    let sparsity = gen_sparsity(params)?;
    let popularity = gen_popularity(params)?;
    generate_from(params, sparsity, popularity)
}

/// Generation with explicit per-user sparsity and per-item popularity.
pub fn generate_from(params: &GenParams, sparsity: Vec<f64>, popularity: Vec<f64>) -> Result<Generated> {
    if sparsity.len() != params.users || popularity.len() != params.items {
        return Err(Error::invalid("sparsity/popularity lengths must match users/items"));
    }
    let groups = GroupMap::new(params.users, params.items, params.groups);

    // weights depend only on the user's group
    let weights: Vec<Vec<f64>> = (0..params.groups)
        .map(|g| {
            popularity
                .iter()
                .zip(&groups.item_group)
                .map(|(p, &ig)| affinity(g, ig, params.eta) * p)
                .collect()
        })
        .collect();

    let lists: Result<Vec<Vec<usize>>> = (0..params.users)
        .into_par_iter()
        .map(|u| {
            let n_u = interaction_count(params.items, sparsity[u]);
            let w = &weights[groups.user_group[u]];
            let mut rng = seed::rng(params.seed, &[stream::DATAGEN, 3, u as u64]);
            // Efraimidis-Spirakis: same law as successive renormalised draws
            let picked = index::sample_weighted(&mut rng, params.items, |i| w[i], n_u)
                .map_err(|e| Error::invalid(format!("weighted sampling: {e}")))?;
            Ok(picked.into_iter().collect())
        })
        .collect();
    let lists = lists?;

    let triples = lists.iter().enumerate().flat_map(|(u, items)| {
        items
            .iter()
            .enumerate()
            .map(move |(order, &i)| (u as u64, i as u64, order as i64))
    });
    let mut dataset = Dataset::from_triples(triples)?;
    // keep the full universe even if some item was never drawn
    if dataset.num_items != params.items || dataset.num_users != params.users {
        dataset = pad_universe(dataset, params.users, params.items);
    }
    Ok(Generated {
        dataset,
        groups,
        sparsity,
        popularity,
    })
}

fn pad_universe(ds: Dataset, users: usize, items: usize) -> Dataset {
    let mut interactions = vec![Vec::new(); users];
    for (u, list) in ds.interactions.into_iter().enumerate() {
        let raw_u = ds.user_ids[u] as usize;
        interactions[raw_u] = list
            .into_iter()
            .map(|mut x| {
                x.item = ds.item_ids[x.item] as usize;
                x
            })
            .collect();
        interactions[raw_u].sort_unstable_by_key(|x: &crate::data::Interaction| x.item);
    }
    Dataset {
        num_users: users,
        num_items: items,
        interactions,
        user_ids: (0..users as u64).collect(),
        item_ids: (0..items as u64).collect(),
    }
}
