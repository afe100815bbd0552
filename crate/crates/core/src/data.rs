//! Interaction logs: loading, implicit binarisation, leave-one-out splits and
//! per-client shards.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::{self, stream};

/// Number of sampled negatives per evaluated user.
pub const EVAL_NEGATIVES: usize = 99;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InteractionFormat {
    /// Tab-separated `user item rating timestamp`.
    TsvUirt,
    /// Comma-separated `user,item,rating[,timestamp]`.
    CsvUir,
}

impl std::str::FromStr for InteractionFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tsv_uirt" => Ok(InteractionFormat::TsvUirt),
            "csv_uir" => Ok(InteractionFormat::CsvUir),
            other => Err(Error::invalid(format!("unknown interaction format `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Interaction {
    pub item: usize,
    pub timestamp: i64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub num_users: usize,
    pub num_items: usize,
    /// Per dense user id, interactions sorted by item id.
    pub interactions: Vec<Vec<Interaction>>,
    /// Raw id of each dense user id.
    pub user_ids: Vec<u64>,
    /// Raw id of each dense item id.
    pub item_ids: Vec<u64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DatasetStats {
    pub interactions: usize,
    pub users: usize,
    pub items: usize,
    pub sparsity: f64,
}

impl std::fmt::Display for DatasetStats {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "interactions={} users={} items={} sparsity={:.4}",
            self.interactions, self.users, self.items, self.sparsity
        )
    }
}

struct RawRecord {
    user: u64,
    item: u64,
    timestamp: i64,
}

fn parse_line(line: &str, format: InteractionFormat) -> std::result::Result<RawRecord, String> {
    let fields: Vec<&str> = match format {
        InteractionFormat::TsvUirt => line.split('\t').map(str::trim).collect(),
        InteractionFormat::CsvUir => line.split(',').map(str::trim).collect(),
    };
    let expected = match format {
        InteractionFormat::TsvUirt => 4..=4,
        InteractionFormat::CsvUir => 3..=4,
    };
    if !expected.contains(&fields.len()) {
        return Err(format!("expected {expected:?} fields, found {}", fields.len()));
    }
    let user = fields[0]
        .parse::<u64>()
        .map_err(|_| format!("non-numeric user id `{}`", fields[0]))?;
    let item = fields[1]
        .parse::<u64>()
        .map_err(|_| format!("non-numeric item id `{}`", fields[1]))?;
    fields[2]
        .parse::<f64>()
        .map_err(|_| format!("non-numeric rating `{}`", fields[2]))?;
    let timestamp = match fields.get(3) {
        Some(ts) => ts
            .parse::<f64>()
            .map_err(|_| format!("non-numeric timestamp `{ts}`"))? as i64,
        None => 0,
    };
    Ok(RawRecord {
        user,
        item,
        timestamp,
    })
}

impl Dataset {
    /// Reads an interaction log. Every row is a positive; duplicate (user, item)
    /// pairs keep the latest timestamp. Dense ids follow ascending raw ids.
    pub fn load(path: impl AsRef<Path>, format: InteractionFormat) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| Error::Read {
            path: path.to_path_buf(),
            source,
        })?;
        let mut records = Vec::new();
        for (idx, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let mut rec = parse_line(line, format).map_err(|message| Error::Parse {
                path: path.to_path_buf(),
                line: idx + 1,
                message,
            })?;
            if format == InteractionFormat::CsvUir && line.split(',').count() == 3 {
                // no timestamp column: file order stands in for time
                rec.timestamp = idx as i64;
            }
            records.push(rec);
        }
        if records.is_empty() {
            return Err(Error::InvalidInput(format!(
                "{} contains no interactions",
                path.display()
            )));
        }
        Ok(Self::from_raw(records))
    }

    /// Builds a dataset from raw `(user, item, timestamp)` triples.
    pub fn from_triples(triples: impl IntoIterator<Item = (u64, u64, i64)>) -> Result<Self> {
        let records: Vec<RawRecord> = triples
            .into_iter()
            .map(|(user, item, timestamp)| RawRecord {
                user,
                item,
                timestamp,
            })
            .collect();
        if records.is_empty() {
            return Err(Error::InvalidInput("no interactions".into()));
        }
        Ok(Self::from_raw(records))
    }

    fn from_raw(records: Vec<RawRecord>) -> Self {
        let mut user_ids: Vec<u64> = records.iter().map(|r| r.user).collect();
        user_ids.sort_unstable();
        user_ids.dedup();
        let mut item_ids: Vec<u64> = records.iter().map(|r| r.item).collect();
        item_ids.sort_unstable();
        item_ids.dedup();
        let user_index: HashMap<u64, usize> =
            user_ids.iter().enumerate().map(|(i, &u)| (u, i)).collect();
        let item_index: HashMap<u64, usize> =
            item_ids.iter().enumerate().map(|(i, &u)| (u, i)).collect();

        let mut per_user: Vec<HashMap<usize, i64>> = vec![HashMap::new(); user_ids.len()];
        for r in &records {
            let u = user_index[&r.user];
            let i = item_index[&r.item];
            let ts = per_user[u].entry(i).or_insert(r.timestamp);
            *ts = (*ts).max(r.timestamp);
        }
        let interactions = per_user
            .into_iter()
            .map(|m| {
                let mut v: Vec<Interaction> = m
                    .into_iter()
                    .map(|(item, timestamp)| Interaction { item, timestamp })
                    .collect();
                v.sort_unstable_by_key(|x| x.item);
                v
            })
            .collect();
        Dataset {
            num_users: user_ids.len(),
            num_items: item_ids.len(),
            interactions,
            user_ids,
            item_ids,
        }
    }

    pub fn num_interactions(&self) -> usize {
        self.interactions.iter().map(Vec::len).sum()
    }

    pub fn stats(&self) -> DatasetStats {
        let n = self.num_interactions();
        DatasetStats {
            interactions: n,
            users: self.num_users,
            items: self.num_items,
            sparsity: n as f64 / (self.num_users as f64 * self.num_items as f64),
        }
    }

    /// Items of one client, sorted by item id.
    pub fn client_shard(&self, client: usize) -> Result<&[Interaction]> {
        self.interactions
            .get(client)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::invalid(format!("unknown client id {client}")))
    }

    pub fn client_items(&self, client: usize) -> Result<Vec<usize>> {
        Ok(self.client_shard(client)?.iter().map(|x| x.item).collect())
    }

    /// Item lists for every user, in dense user order.
    pub fn histories(&self) -> Vec<Vec<usize>> {
        self.interactions
            .iter()
            .map(|v| v.iter().map(|x| x.item).collect())
            .collect()
    }

    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, serde_json::to_vec(self)?)?;
        Ok(())
    }

    pub fn load_json(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_slice(&fs::read(path)?)?)
    }

    /// Writes the log as `user\titem\t1\ttimestamp` rows using raw ids.
    pub fn write_tsv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = String::new();
        for (u, list) in self.interactions.iter().enumerate() {
            let mut rows = list.clone();
            rows.sort_by_key(|x| (x.timestamp, x.item));
            for x in rows {
                out.push_str(&format!(
                    "{}\t{}\t1\t{}\n",
                    self.user_ids[u], self.item_ids[x.item], x.timestamp
                ));
            }
        }
        fs::write(path, out)?;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalCase {
    pub user: usize,
    pub target: usize,
    pub negatives: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSplit {
    pub cases: Vec<EvalCase>,
    /// Users with a single interaction: kept in train, not evaluated.
    pub excluded_users: Vec<usize>,
    /// Users whose negative pool held fewer than the requested count.
    pub short_negative_users: Vec<usize>,
}

impl EvalSplit {
    pub fn is_empty(&self) -> bool {
        self.cases.is_empty()
    }

    pub fn len(&self) -> usize {
        self.cases.len()
    }
}

/// Holds out each user's latest interaction (ties go to the larger item id) and
/// draws up to 99 never-interacted negatives per evaluated user.
pub fn leave_one_out(dataset: &Dataset, seed: u64) -> (Dataset, EvalSplit) {
    let mut train = dataset.clone();
    let mut split = EvalSplit {
        cases: Vec::new(),
        excluded_users: Vec::new(),
        short_negative_users: Vec::new(),
    };
    for (user, list) in dataset.interactions.iter().enumerate() {
        if list.len() < 2 {
            split.excluded_users.push(user);
            continue;
        }
        let latest = list
            .iter()
            .max_by_key(|x| (x.timestamp, x.item))
            .expect("non-empty")
            .item;
        train.interactions[user].retain(|x| x.item != latest);

        let mut seen = vec![false; dataset.num_items];
        for x in list {
            seen[x.item] = true;
        }
        let pool: Vec<usize> = (0..dataset.num_items).filter(|&i| !seen[i]).collect();
        let negatives = if pool.len() <= EVAL_NEGATIVES {
            if pool.len() < EVAL_NEGATIVES {
                split.short_negative_users.push(user);
            }
            pool
        } else {
            let mut rng = seed::rng(seed, &[stream::SPLIT, user as u64]);
            let mut picked: Vec<usize> = index::sample(&mut rng, pool.len(), EVAL_NEGATIVES)
                .into_iter()
                .map(|j| pool[j])
                .collect();
            picked.sort_unstable();
            picked
        };
        split.cases.push(EvalCase {
            user,
            target: latest,
            negatives,
        });
    }
    (train, split)
}
