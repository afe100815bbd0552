//! Federated learning simulator for implicit-feedback recommendation.
//!
//! Clients each own one user's interaction history and train a local
//! Generalized Matrix Factorisation (GMF) model. The server commits the
//! delegates' user rows, updates subordinate (unsampled) users through a
//! pluggable strategy, and aggregates item embeddings under one of three
//! weighting schemes. The FedFNN strategy fits an MLP each round that maps
//! a user embedding to its expected update and applies it, with exponential
//! decay, to every subordinate.

pub mod adam;
pub mod client;
pub mod config;
pub mod data;
pub mod datagen;
pub mod engine;
pub mod error;
pub mod eval;
pub mod gmf;
pub mod items;
pub mod kmeans;
pub mod matrix;
pub mod predictor;
pub mod seed;

pub use adam::{AdamHyper, AdamState};
pub use client::ClientStrategy;
pub use config::{AvailabilityGroup, DatasetSource, ExperimentConfig, RunSettings};
pub use data::{leave_one_out, Dataset, DatasetStats, EvalCase, EvalSplit, Interaction, InteractionFormat};
pub use datagen::{GenParams, GroupMap};
pub use engine::{run_experiment, sample_clients, AvailabilityProfile, Federation, FederationState, RoundOutcome, RoundSummary};
pub use error::{Error, Result};
pub use eval::{MetricsLog, MetricsRow, RankingMetrics};
pub use gmf::{GmfHyper, GmfModel, LocalUpdate};
pub use items::ItemScheme;
pub use kmeans::ClusterModel;
pub use matrix::Matrix;
pub use predictor::{FitReport, HyperGrid, PatienceMonitor, PredictorModel};
