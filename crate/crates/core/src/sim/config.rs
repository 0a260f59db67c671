use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adversary::{AttackKind, AttackPolicy};
use crate::baselines::CosDefenseConfig;
use crate::model::TrainConfig;
use crate::security::SecurityConfig;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TopologyArm {
    /// Cluster-based hierarchy: CMs -> CH -> EPC.
    Cbhfl,
    /// Every vehicle reports straight to the EPC.
    NoClustering,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DefenseArm {
    /// Reliability-scored selection plus cosine anomaly detection.
    Proposed,
    #[serde(rename = "cosdefense")]
    CosDefense,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttackMode {
    None,
    SingleRound,
    Continuous,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Weighting {
    /// Weight each contribution by the number of samples behind it.
    Samples,
    Uniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TopologyConfig {
    pub arm: TopologyArm,
    /// EPC aggregates every `epc_period` rounds; CHs aggregate every round.
    pub epc_period: u32,
    /// Weight of the speed term in CH suitability.
    pub alpha: f64,
}

impl Default for TopologyConfig {
    fn default() -> Self {
        Self {
            arm: TopologyArm::Cbhfl,
            epc_period: 1,
            alpha: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DefenseConfig {
    pub arm: DefenseArm,
    pub deviation_multiplier: f64,
}

impl Default for DefenseConfig {
    fn default() -> Self {
        Self {
            arm: DefenseArm::Proposed,
            deviation_multiplier: CosDefenseConfig::default().deviation_multiplier,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackConfig {
    pub mode: AttackMode,
    pub start_round: u32,
    pub noise_mean: f64,
    /// Variance (not standard deviation) of the additive noise.
    pub noise_var: f64,
    pub attacker_fraction: f64,
    pub unreliable_fraction: f64,
    /// Packet drop probability of unreliable vehicles.
    pub drop_prob: f64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            mode: AttackMode::None,
            start_round: 10,
            noise_mean: 0.0,
            noise_var: 0.3,
            attacker_fraction: 0.2,
            unreliable_fraction: 0.08,
            drop_prob: 0.3,
        }
    }
}

impl AttackConfig {
    pub fn policy(&self) -> Option<AttackPolicy> {
        let kind = match self.mode {
            AttackMode::None => return None,
            AttackMode::SingleRound => AttackKind::SingleRound,
            AttackMode::Continuous => AttackKind::Continuous,
        };
        Some(AttackPolicy {
            kind,
            start_round: self.start_round,
            noise_mean: self.noise_mean,
            noise_var: self.noise_var,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub n_classes: usize,
    pub n_features: usize,
    pub n_samples: usize,
    pub class_separation: f64,
    /// Optional delimited-text dataset replacing the synthetic one.
    pub dataset_path: Option<String>,
    pub hidden: usize,
    pub shards_per_client: usize,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub weighting: Weighting,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            n_classes: 10,
            n_features: 20,
            n_samples: 2000,
            class_separation: 4.0,
            dataset_path: None,
            hidden: 16,
            shards_per_client: 2,
            lr: 0.05,
            epochs: 2,
            batch_size: 8,
            weighting: Weighting::Samples,
        }
    }
}

impl TrainingConfig {
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            lr: self.lr,
            epochs: self.epochs,
            batch_size: self.batch_size,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MobilityConfig {
    /// Population cap; also the number of data partitions.
    pub vehicles: usize,
    /// Mean Poisson arrivals per round.
    pub arrival_rate: f64,
    pub track_length: f64,
    pub lanes: u8,
    pub comm_range: f64,
    pub speed_jitter: f64,
    /// Seconds of driving per communication round.
    pub dt: f64,
    /// Per-round departure probability; 0 keeps every vehicle.
    pub departure_prob: f64,
}

impl Default for MobilityConfig {
    fn default() -> Self {
        Self {
            vehicles: 25,
            arrival_rate: 8.0,
            track_length: 4000.0,
            lanes: 2,
            comm_range: 100.0,
            speed_jitter: 0.5,
            dt: 1.0,
            departure_prob: 0.0,
        }
    }
}

/// Everything a run depends on. Serialized as TOML with one table per section.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub seed: u64,
    pub max_rounds: u32,
    pub epsilons: Vec<f64>,
    pub topology: TopologyConfig,
    pub defense: DefenseConfig,
    pub attack: AttackConfig,
    pub training: TrainingConfig,
    pub mobility: MobilityConfig,
    pub security: SecurityConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: "run".into(),
            seed: 1,
            max_rounds: 60,
            epsilons: vec![0.1, 0.01],
            topology: TopologyConfig::default(),
            defense: DefenseConfig::default(),
            attack: AttackConfig::default(),
            training: TrainingConfig::default(),
            mobility: MobilityConfig::default(),
            security: SecurityConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text).map_err(|e| Error::config("config", e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_rounds < 3 {
            return Err(Error::config("max_rounds", "need at least 3 rounds"));
        }
        if self.epsilons.is_empty() {
            return Err(Error::config("epsilons", "need at least one epsilon"));
        }
        if self.epsilons.iter().any(|e| !(*e > 0.0)) {
            return Err(Error::config("epsilons", "every epsilon must be positive"));
        }
        if self.topology.epc_period == 0 {
            return Err(Error::config("topology.epc_period", "must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.topology.alpha) {
            return Err(Error::config("topology.alpha", "must lie in [0, 1]"));
        }
        if self.defense.arm == DefenseArm::CosDefense && self.topology.arm == TopologyArm::Cbhfl {
            return Err(Error::config("defense.arm", "cosdefense runs without clustering"));
        }
        CosDefenseConfig {
            deviation_multiplier: self.defense.deviation_multiplier,
        }
        .validate()?;
        if let Some(policy) = self.attack.policy() {
            policy.validate()?;
        }
        let t = &self.training;
        if t.hidden == 0 {
            return Err(Error::config("training.hidden", "must be positive"));
        }
        if !(t.lr >= 0.0 && t.lr.is_finite()) {
            return Err(Error::config("training.lr", "must be finite and non-negative"));
        }
        if t.batch_size == 0 {
            return Err(Error::config("training.batch_size", "must be positive"));
        }
        let m = &self.mobility;
        if m.vehicles == 0 {
            return Err(Error::config("mobility.vehicles", "must be positive"));
        }
        if !(m.arrival_rate >= 0.0 && m.arrival_rate.is_finite()) {
            return Err(Error::config("mobility.arrival_rate", "must be finite and non-negative"));
        }
        if !(m.track_length > 0.0) {
            return Err(Error::config("mobility.track_length", "must be positive"));
        }
        if m.lanes == 0 {
            return Err(Error::config("mobility.lanes", "must be positive"));
        }
        if !(m.comm_range > 0.0) {
            return Err(Error::config("mobility.comm_range", "must be positive"));
        }
        if !(m.dt > 0.0) {
            return Err(Error::config("mobility.dt", "must be positive"));
        }
        if !(m.speed_jitter >= 0.0) {
            return Err(Error::config("mobility.speed_jitter", "must be non-negative"));
        }
        if !(0.0..=1.0).contains(&m.departure_prob) {
            return Err(Error::config("mobility.departure_prob", "must lie in [0, 1]"));
        }
        self.security.validate()
    }

    /// Short arm label used in output files.
    pub fn arm_label(&self) -> String {
        let topology = match self.topology.arm {
            TopologyArm::Cbhfl => "cbhfl",
            TopologyArm::NoClustering => "no-clustering",
        };
        let defense = match self.defense.arm {
            DefenseArm::Proposed => "proposed",
            DefenseArm::CosDefense => "cosdefense",
            DefenseArm::None => "none",
        };
        match (self.defense.arm, self.attack.mode) {
            (DefenseArm::CosDefense, _) => "cosdefense".into(),
            (_, AttackMode::None) => format!("{topology}-no-attack"),
            _ => format!("{topology}+{defense}"),
        }
    }
}
