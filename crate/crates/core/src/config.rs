//! The declarative scenario document and named estimation presets.

use serde::{Deserialize, Serialize};

use crate::client::UploadPolicy;
use crate::error::{Error, Result};
use crate::estimation::{EstimationConfig, MetricBar, RatioConfig, SurvivalBar};
use crate::model::LossModel;
use crate::server::ServerConfig;
use crate::train::TrainConfig;

/// Which protocol a run executes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "cdfl")]
    Cdfl,
    #[serde(rename = "fedsoft-async")]
    FedSoftAsync,
    #[serde(rename = "local")]
    Local,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Cdfl, Method::FedSoftAsync, Method::Local];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Cdfl => "cdfl",
            Method::FedSoftAsync => "fedsoft-async",
            Method::Local => "local",
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown method `{s}` (cdfl, fedsoft-async, local)")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub clusters: usize,
    pub classes: usize,
    pub radius: f64,
    pub sigma: f64,
    pub pretrain_samples: usize,
    pub proxy_samples: usize,
    /// Per-cluster held-out set used for cluster accuracy and loss.
    pub heldout_samples: usize,
    pub client_samples_min: usize,
    pub client_samples_max: usize,
    pub primary_share_min: f64,
    pub primary_share_max: f64,
    pub client_test_samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub learning_rate: f64,
    pub steps: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
    /// Half-width of the centered uniform initialization.
    pub init_scale: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServerSection {
    /// Defaults to the number of clients.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub staleness_threshold: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationConfig {
    /// Defaults to 20 clients per cluster.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clients: Option<usize>,
    pub syncs_per_client: usize,
    pub upload_policy: UploadPolicy,
    pub method: Method,
}

/// Every hyper-parameter of one experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub seed: u64,
    pub model: LossModel,
    pub data: DataConfig,
    pub pretrain: PretrainConfig,
    pub train: TrainConfig,
    pub estimation: EstimationConfig,
    pub ratios: RatioConfig,
    pub server: ServerSection,
    pub simulation: SimulationConfig,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            model: LossModel::softmax_regression(2, 10),
            data: DataConfig {
                clusters: 4,
                classes: 10,
                radius: 3.0,
                sigma: 0.45,
                pretrain_samples: 3000,
                proxy_samples: 1000,
                heldout_samples: 1000,
                client_samples_min: 500,
                client_samples_max: 2000,
                primary_share_min: 0.4,
                primary_share_max: 0.9,
                client_test_samples: 200,
            },
            pretrain: PretrainConfig { learning_rate: 0.1, steps: 10, batch_size: None, init_scale: 0.05 },
            train: TrainConfig { learning_rate: 1.0, rho: 0.1, h_min: 20, h_max: 50, batch_size: Some(32) },
            estimation: EstimationConfig {
                c1: 0.5,
                c2: 0.25,
                a_schedule: vec![25.0],
                l_bar: MetricBar::MinOfComputed,
                d1_bar: MetricBar::MinOfComputed,
                d2_bar: MetricBar::MinOfComputed,
            },
            ratios: RatioConfig { beta0: 0.025, beta1_bar: SurvivalBar::AverageOfComputed, a: 10.0, b: 5 },
            server: ServerSection { staleness_threshold: None },
            simulation: SimulationConfig {
                clients: None,
                syncs_per_client: 20,
                upload_policy: UploadPolicy::RandomGap { min_delay: 20, max_delay: 60 },
                method: Method::Cdfl,
            },
        }
    }
}

impl ScenarioConfig {
    /// Parses and validates a TOML scenario. Unknown keys are rejected.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::ConfigParse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::ConfigParse(msg) => Error::ConfigParse(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::ConfigParse(e.to_string()))
    }

    pub fn clients(&self) -> usize {
        self.simulation.clients.unwrap_or(20 * self.data.clusters)
    }

    pub fn staleness_threshold(&self) -> u64 {
        self.server.staleness_threshold.unwrap_or(self.clients() as u64)
    }

    pub fn server_config(&self) -> ServerConfig {
        ServerConfig {
            staleness_threshold: self.staleness_threshold(),
            estimation: self.estimation.clone(),
            ratios: self.ratios.clone(),
        }
    }

    pub fn pretrain_train_config(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.pretrain.learning_rate,
            rho: 0.0,
            h_min: self.pretrain.steps,
            h_max: self.pretrain.steps,
            batch_size: self.pretrain.batch_size,
        }
    }

    /// Applies a named estimation preset (see [`PRESETS`]).
    pub fn with_preset(mut self, name: &str) -> Result<Self> {
        let preset = preset(name)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown preset `{name}`")))?;
        self.estimation = preset.estimation;
        self.ratios.beta1_bar = preset.beta1_bar;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        let invalid = |m: String| Err(Error::InvalidConfig(m));
        self.model.validate()?;
        if self.model.input_dim != 2 {
            return invalid(format!("model.input_dim must be 2 for rotated data, got {}", self.model.input_dim));
        }
        if self.model.classes != d.classes {
            return invalid(format!("model.classes ({}) != data.classes ({})", self.model.classes, d.classes));
        }
        if d.clusters < 2 {
            return invalid(format!("data.clusters must be >= 2, got {}", d.clusters));
        }
        if !(d.radius.is_finite() && d.radius > 0.0) || !(d.sigma.is_finite() && d.sigma >= 0.0) {
            return invalid("data.radius must be > 0 and data.sigma >= 0".into());
        }
        if d.pretrain_samples == 0 || d.proxy_samples == 0 || d.heldout_samples == 0 || d.client_test_samples == 0 {
            return invalid("all data sample counts must be positive".into());
        }
        if d.client_samples_min == 0 || d.client_samples_min > d.client_samples_max {
            return invalid("need 1 <= client_samples_min <= client_samples_max".into());
        }
        if !(0.0..=1.0).contains(&d.primary_share_min)
            || !(0.0..=1.0).contains(&d.primary_share_max)
            || d.primary_share_min > d.primary_share_max
        {
            return invalid("need 0 <= primary_share_min <= primary_share_max <= 1".into());
        }
        if self.pretrain.steps == 0 || !(self.pretrain.learning_rate > 0.0) || !(self.pretrain.init_scale >= 0.0) {
            return invalid("pretrain needs steps >= 1, learning_rate > 0, init_scale >= 0".into());
        }
        self.pretrain_train_config().validate()?;
        self.train.validate()?;
        if self.clients() == 0 || self.simulation.syncs_per_client == 0 {
            return invalid("simulation needs at least one client and one sync per client".into());
        }
        self.simulation.upload_policy.validate()?;
        self.server_config().validate()
    }
}

/// A named estimation setting: softmax schedule, family weights, bars.
#[derive(Debug, Clone, PartialEq)]
pub struct Preset {
    pub name: &'static str,
    pub estimation: EstimationConfig,
    pub beta1_bar: SurvivalBar,
}

/// Names accepted by [`preset`]: the image-benchmark settings keyed by
/// dataset and cluster count.
pub const PRESETS: [&str; 13] = [
    "fm2", "fm3", "fm4", "fm6", "cifar2", "cifar3", "cifar4", "cifar6", "mi2", "mi3", "mi4", "mi6", "digits",
];

pub fn preset(name: &str) -> Option<Preset> {
    use MetricBar::{Constant as C, MinOfComputed as Min};
    let (c1, c2, a, l, d1, d2): (f64, f64, &[f64], MetricBar, MetricBar, MetricBar) = match name {
        "fm2" => (0.5, 0.4, &[3.0], C(8.0), C(0.0), C(0.0)),
        "fm3" => (0.5, 0.25, &[3.0], C(8.0), C(0.0), C(0.0)),
        "fm4" => (0.5, 0.25, &[7.0], C(8.0), C(0.0), C(0.0)),
        "fm6" => (0.7, 0.2, &[15.0], C(8.0), C(0.0), C(0.0)),
        "cifar2" => (0.5, 0.2, &[1.0], C(40.0), C(0.0), C(0.0)),
        "cifar3" | "cifar4" | "cifar6" => (0.5, 0.2, &[10.0], Min, Min, Min),
        "mi2" => (0.5, 0.2, &[1.0], C(70.0), C(0.0), C(0.0)),
        "mi3" => (0.5, 0.4, &[7.0], Min, Min, Min),
        "mi4" => (0.6, 0.3, &[15.0], Min, Min, Min),
        "mi6" => (0.6, 0.3, &[10.0, 10.0], Min, Min, Min),
        "digits" => (0.9, 0.0, &[5.0], Min, Min, Min),
        _ => return None,
    };
    let name = PRESETS.into_iter().find(|p| *p == name)?;
    Some(Preset {
        name,
        estimation: EstimationConfig { c1, c2, a_schedule: a.to_vec(), l_bar: l, d1_bar: d1, d2_bar: d2 },
        beta1_bar: SurvivalBar::AverageOfComputed,
    })
}
