use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use fedrec_core::config::prepare_data;
use fedrec_core::datagen::{generate_dataset, GenParams};
use fedrec_core::eval;
use fedrec_core::{
    run_experiment, ClientStrategy, ExperimentConfig, GmfModel, ItemScheme, MetricsLog, RunSettings,
};
use log::info;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::CliError;
use crate::manifest::{build_id, config_hash, write_json, CellRecord, RunManifest};
use crate::{DatagenArgs, Emit, EvalArgs, RunArgs};

const HASH_PREFIX: usize = 12;

pub const ABLATION_CLIENTS: [ClientStrategy; 3] = [ClientStrategy::Wcu, ClientStrategy::FedFast, ClientStrategy::FedFnn];
pub const ABLATION_ITEMS: [ItemScheme; 3] = [ItemScheme::W0, ItemScheme::W1, ItemScheme::W2];

fn read_config(path: &Path) -> Result<ExperimentConfig, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {}", path.display(), e.message_with_field(&text))))
}

trait FieldMessage {
    fn message_with_field(&self, text: &str) -> String;
}

impl FieldMessage for toml::de::Error {
    /// The parser message plus the key of the offending line, so that value
    /// errors always name their field.
    fn message_with_field(&self, text: &str) -> String {
        let msg = self.message().trim().to_string();
        let Some(span) = self.span() else {
            return msg;
        };
        let line_start = text[..span.start].rfind('\n').map_or(0, |i| i + 1);
        let line = text[line_start..].lines().next().unwrap_or("");
        let table = text[..line_start]
            .lines()
            .rev()
            .map(str::trim)
            .find(|l| l.starts_with('[') && l.ends_with(']'))
            .map(|l| l.trim_matches(|c| c == '[' || c == ']').to_string());
        match line.split_once('=') {
            Some((key, _)) => {
                let key = key.trim();
                let field = table.map_or_else(|| key.to_string(), |t| format!("{t}.{key}"));
                format!("field `{field}`: {msg}")
            }
            None => msg,
        }
    }
}

fn file_stem(cfg: &ExperimentConfig) -> String {
    let name = if cfg.name.is_empty() { "experiment" } else { &cfg.name };
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

fn now_unix() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

struct CellResult {
    settings: RunSettings,
    log: MetricsLog,
    record: CellRecord,
}

/// `run` and `ablation`: every cell of the (possibly overridden) config.
pub fn run(args: &RunArgs, ablation: bool) -> Result<(), CliError> {
    let started = Instant::now();
    let started_unix = now_unix();
    let mut cfg = read_config(&args.config)?;
    if !args.seed.is_empty() {
        cfg.seeds = args.seed.clone();
    }
    if let Some(r) = args.rounds {
        cfg.rounds = r;
    }
    if ablation {
        cfg.client_strategy = ABLATION_CLIENTS.to_vec();
        cfg.item_strategy = ABLATION_ITEMS.to_vec();
    }
    cfg.validate().map_err(|e| CliError::Config(e.to_string()))?;

    let (full, train, split) = prepare_data(&cfg.dataset, cfg.split_seed).map_err(CliError::data)?;
    info!("dataset: {}; {} users evaluated", full.stats(), split.len());

    let hash = config_hash(&cfg);
    let short = &hash[..HASH_PREFIX];
    let stem = format!("{}-{short}", file_stem(&cfg));
    fs::create_dir_all(&args.out_dir)?;

    let cells = cfg.cells();
    info!("{} cells, config hash {short}", cells.len());
    let results: Result<Vec<CellResult>, CliError> = cells
        .into_par_iter()
        .map(|settings| {
            let t = Instant::now();
            let (log, model) = run_experiment(&settings, &train, &split).map_err(CliError::run)?;
            let base = args.out_dir.join(format!("{stem}-{}", settings.label()));
            let csv = base.with_extension("csv");
            fs::write(&csv, log.to_csv())?;
            if args.emit == Emit::Long {
                fs::write(base.with_extension("long.csv"), log.to_long_csv())?;
            }
            if let Some(groups) = log.groups_csv() {
                fs::write(base.with_extension("groups.csv"), groups)?;
            }
            if args.save_model {
                write_json(&base.with_extension("model.json"), &model)?;
            }
            if let Some(last) = log.last() {
                info!("{}: round {} hr={:.4} ndcg={:.4}", settings.label(), last.round, last.hr, last.ndcg);
            }
            let record = CellRecord {
                label: settings.label(),
                csv: file_name(&csv),
                seed: settings.seed,
                rounds: settings.rounds,
                wall_clock_secs: t.elapsed().as_secs_f64(),
                predictor_stopped_at: log.predictor_stopped_at,
                skipped_rounds: log.skipped_rounds.clone(),
            };
            Ok(CellResult { settings, log, record })
        })
        .collect();
    let results = results?;

    if ablation {
        let summary = summary_table(&cfg, &results);
        let path = args.out_dir.join(format!("{stem}-summary.csv"));
        fs::write(&path, summary)?;
        info!("summary written to {}", path.display());
    }

    let manifest = RunManifest {
        command: if ablation { "ablation" } else { "run" },
        config_hash: &hash,
        build: build_id(),
        started_unix_secs: started_unix,
        wall_clock_secs: started.elapsed().as_secs_f64(),
        config: &cfg,
        cells: results.into_iter().map(|r| r.record).collect(),
    };
    let path = args.out_dir.join(format!("{stem}.manifest.json"));
    write_json(&path, &manifest)?;
    info!("manifest written to {}", path.display());
    Ok(())
}

fn file_name(p: &Path) -> String {
    p.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

fn median(mut v: Vec<f64>) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

/// One row per (client, item) pair; HR and nDCG per checkpoint, median over seeds.
fn summary_table(cfg: &ExperimentConfig, results: &[CellResult]) -> String {
    let mut out = String::from("client_strategy,item_strategy");
    for c in &cfg.checkpoints {
        out.push_str(&format!(",hr@{c},ndcg@{c}"));
    }
    out.push('\n');
    let mut grouped: BTreeMap<(usize, usize), Vec<&CellResult>> = BTreeMap::new();
    for r in results {
        let ci = cfg.client_strategy.iter().position(|&c| c == r.settings.client_strategy).unwrap_or(0);
        let ii = cfg.item_strategy.iter().position(|&i| i == r.settings.item_strategy).unwrap_or(0);
        grouped.entry((ci, ii)).or_default().push(r);
    }
    for ((ci, ii), cells) in grouped {
        out.push_str(&format!("{},{}", cfg.client_strategy[ci], cfg.item_strategy[ii]));
        for &c in &cfg.checkpoints {
            let rows: Vec<_> = cells.iter().filter_map(|r| r.log.row_at(c)).collect();
            let hr = median(rows.iter().map(|r| r.hr).collect());
            let ndcg = median(rows.iter().map(|r| r.ndcg).collect());
            for v in [hr, ndcg] {
                match v {
                    Some(x) => out.push_str(&format!(",{x:.8}")),
                    None => out.push(','),
                }
            }
        }
        out.push('\n');
    }
    out
}

/// Generator parameters from an optional TOML file, with flag overrides.
fn gen_params(args: &DatagenArgs) -> Result<GenParams, CliError> {
    let mut p = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
            toml::from_str::<GenParams>(&text)
                .map_err(|e| CliError::Config(format!("{}: {}", path.display(), e.message_with_field(&text))))?
        }
        None => GenParams::default(),
    };
    if let Some(v) = args.users {
        p.users = v;
    }
    if let Some(v) = args.items {
        p.items = v;
    }
    if let Some(v) = args.groups {
        p.groups = v;
    }
    if let Some(v) = args.sparsity {
        p.sparsity = v;
    }
    if let Some(v) = args.eta {
        p.eta = v;
    }
    if let Some(v) = args.seed {
        p.seed = v;
    }
    p.validate().map_err(|e| CliError::Config(e.to_string()))?;
    Ok(p)
}

#[derive(Serialize)]
struct DatagenManifest<'a> {
    command: &'a str,
    config_hash: &'a str,
    build: String,
    params: &'a GenParams,
    interactions_file: String,
    groups_file: String,
    interactions: usize,
    sparsity: f64,
    wall_clock_secs: f64,
}

pub fn datagen(args: &DatagenArgs) -> Result<(), CliError> {
    let started = Instant::now();
    let params = gen_params(args)?;
    let generated = generate_dataset(&params).map_err(CliError::data)?;
    let hash = config_hash(&params);
    let short = &hash[..HASH_PREFIX];
    fs::create_dir_all(&args.out_dir)?;
    let interactions = args.out_dir.join(format!("interactions-{short}.tsv"));
    let groups = args.out_dir.join(format!("groups-{short}.tsv"));
    generated.dataset.write_tsv(&interactions).map_err(CliError::data)?;
    generated.groups.write_tsv(&groups).map_err(CliError::data)?;
    let stats = generated.dataset.stats();
    info!("generated {stats}");
    write_json(
        &args.out_dir.join(format!("datagen-{short}.manifest.json")),
        &DatagenManifest {
            command: "datagen",
            config_hash: &hash,
            build: build_id(),
            params: &params,
            interactions_file: file_name(&interactions),
            groups_file: file_name(&groups),
            interactions: stats.interactions,
            sparsity: stats.sparsity,
            wall_clock_secs: started.elapsed().as_secs_f64(),
        },
    )?;
    println!("{}", interactions.display());
    Ok(())
}

#[derive(Serialize)]
struct EvalRecord {
    config_hash: String,
    model: PathBuf,
    top_k: usize,
    hr: f64,
    ndcg: f64,
    users: usize,
}

pub fn eval_only(args: &EvalArgs) -> Result<(), CliError> {
    let cfg = read_config(&args.config)?;
    cfg.validate().map_err(|e| CliError::Config(e.to_string()))?;
    let (_, _, split) = prepare_data(&cfg.dataset, cfg.split_seed).map_err(CliError::data)?;
    let text = fs::read_to_string(&args.model).map_err(|e| CliError::Data(format!("{}: {e}", args.model.display())))?;
    let model: GmfModel =
        serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", args.model.display())))?;
    let metrics = eval::evaluate(&model, &split, cfg.top_k).map_err(CliError::data)?;
    let hash = config_hash(&cfg);
    let record = EvalRecord {
        config_hash: hash.clone(),
        model: args.model.clone(),
        top_k: cfg.top_k,
        hr: metrics.hr,
        ndcg: metrics.ndcg,
        users: metrics.users,
    };
    fs::create_dir_all(&args.out_dir)?;
    let path = args.out_dir.join(format!("{}-{}-eval.json", file_stem(&cfg), &hash[..HASH_PREFIX]));
    write_json(&path, &record)?;
    println!("hr@{k}={:.6} ndcg@{k}={:.6} users={}", metrics.hr, metrics.ndcg, metrics.users, k = cfg.top_k);
    Ok(())
}
