//! Client-driven asynchronous federated learning.
//!
//! Clients whose data is a drifting mixture of `K` base distributions train
//! locally with a proximal term and sync one model at a time. The server
//! scores each upload against small proxy sets, estimates the client's
//! mixture, moves the `K` cluster models by staleness-aware ratios, and
//! replies with a personalized aggregate.
//!
//! The [`harness`] module drives whole runs in logical time, alongside two
//! baselines (`fedsoft-async` and `local`), and writes the metrics out.

pub mod acceptance;
pub mod client;
pub mod config;
pub mod data;
pub mod datagen;
pub mod error;
pub mod estimation;
pub mod harness;
pub mod model;
pub mod params;
pub mod server;
pub mod train;

pub use client::{ClientState, SyncRecord, UploadPolicy};
pub use config::{Method, ScenarioConfig};
pub use data::LabeledDataset;
pub use error::{Error, Result};
pub use estimation::{EstimationConfig, MetricBar, RatioConfig, SurvivalBar, WeightEstimate};
pub use harness::{RunReport, SimulationPlan};
pub use model::{Architecture, LossModel};
pub use params::{aggregate, ParamVector};
pub use server::{ClientId, ServerConfig, ServerState};
pub use train::{local_train, TrainConfig};
