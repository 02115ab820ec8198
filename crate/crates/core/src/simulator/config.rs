//! Scenario configuration: TOML schema, validation with field paths,
//! dotted `key=value` overrides and the built-in scenario set.

use serde::{Deserialize, Serialize};

use crate::anomaly::AnomalyConfig;
use crate::arbitration::ArbitrationConfig;
use crate::consensus::ConsensusConfig;
use crate::incentives::{IncentiveConfig, Tokens};
use crate::onboarding::OnboardingConfig;
use crate::stochastic::InspectionPolicy;
use crate::transmission::WitnessPanelConfig;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ConfigError {
    #[error("{path}: {message}")]
    Invalid { path: String, message: String },
    #[error("malformed config: {0}")]
    Parse(String),
    #[error("bad override {0:?}: expected dotted.key=value")]
    BadOverride(String),
    #[error("cannot read {path}: {message}")]
    Io { path: String, message: String },
    #[error("unknown scenario {0:?}")]
    UnknownScenario(String),
}

fn invalid(path: &str, message: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        path: path.to_string(),
        message: message.into(),
    }
}

/// Payload sizes of honest devices: each device draws its own mean around
/// `mean` (spread `device_spread`) and then emits N(device_mean, sd).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PayloadModel {
    pub mean: f64,
    pub sd: f64,
    pub device_spread: f64,
}

impl Default for PayloadModel {
    fn default() -> Self {
        Self {
            mean: 1000.0,
            sd: 50.0,
            device_spread: 200.0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DeliveryConfig {
    /// Chance that a validator misses a committed block and has to catch
    /// up through synchronization. Zero means reliable same-tick delivery.
    pub drop_rate: f64,
}

fn one() -> f64 {
    1.0
}

fn default_compromise_tick() -> u64 {
    500
}

fn default_flood_rate() -> f64 {
    1.0
}

fn default_size_shift() -> f64 {
    10.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum AdversarySpec {
    /// Clients whose delivered payload differs from the digest they claim.
    TamperingSender {
        count: usize,
        #[serde(default = "one")]
        tamper_rate: f64,
    },
    /// Witnesses that attest Valid whatever they observe. They spread over
    /// `groups` operator groups (default: one each).
    ColludingWitnesses {
        count: usize,
        #[serde(default)]
        groups: Option<usize>,
    },
    /// Mass registrations offering `stake` each.
    SybilFlood {
        count: usize,
        #[serde(default)]
        stake: Tokens,
        #[serde(default)]
        at_tick: u64,
        #[serde(default)]
        validator: bool,
    },
    /// Witnesses that skip their commitment with probability `skip_rate`.
    LazyWitness {
        count: usize,
        #[serde(default = "one")]
        skip_rate: f64,
    },
    /// Witnesses that reveal the opposite of what they committed.
    EquivocatingWitness {
        count: usize,
        #[serde(default = "one")]
        rate: f64,
    },
    /// Validators that ship altered blocks when serving synchronization.
    ForgedSyncNode { count: usize },
    /// At `at_tick` an attacker obtains the signing keys of `count` honest
    /// clients and replays their nonces at `flood_rate` per tick, with
    /// payload sizes shifted by `size_shift` device standard deviations.
    KeyCompromise {
        count: usize,
        #[serde(default = "default_compromise_tick")]
        at_tick: u64,
        #[serde(default = "default_flood_rate")]
        flood_rate: f64,
        #[serde(default = "default_size_shift")]
        size_shift: f64,
    },
}

impl AdversarySpec {
    pub fn kind_name(&self) -> &'static str {
        match self {
            AdversarySpec::TamperingSender { .. } => "tampering_sender",
            AdversarySpec::ColludingWitnesses { .. } => "colluding_witnesses",
            AdversarySpec::SybilFlood { .. } => "sybil_flood",
            AdversarySpec::LazyWitness { .. } => "lazy_witness",
            AdversarySpec::EquivocatingWitness { .. } => "equivocating_witness",
            AdversarySpec::ForgedSyncNode { .. } => "forged_sync_node",
            AdversarySpec::KeyCompromise { .. } => "key_compromise",
        }
    }

    pub fn count(&self) -> usize {
        match self {
            AdversarySpec::TamperingSender { count, .. }
            | AdversarySpec::ColludingWitnesses { count, .. }
            | AdversarySpec::SybilFlood { count, .. }
            | AdversarySpec::LazyWitness { count, .. }
            | AdversarySpec::EquivocatingWitness { count, .. }
            | AdversarySpec::ForgedSyncNode { count }
            | AdversarySpec::KeyCompromise { count, .. } => *count,
        }
    }

    /// Adversarial devices that join the witness pool.
    fn witnesses(&self) -> usize {
        match self {
            AdversarySpec::ColludingWitnesses { .. }
            | AdversarySpec::LazyWitness { .. }
            | AdversarySpec::EquivocatingWitness { .. } => self.count(),
            _ => 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioConfig {
    pub schema_version: u32,
    pub name: String,
    pub description: String,
    pub seed: u64,
    pub duration_ticks: u64,
    /// Expected transaction submissions per tick.
    pub txn_arrival_rate: f64,
    /// Stop honest arrivals after this many accepted submissions.
    pub max_transactions: Option<u64>,
    /// No new arrivals during the final `drain_ticks` ticks.
    pub drain_ticks: u64,
    /// Honest client devices (senders and receivers).
    pub n_honest_devices: usize,
    /// Honest witness devices.
    pub n_witness_pool: usize,
    /// Honest validator nodes.
    pub n_validators: usize,
    /// Operator groups shared by honest witnesses; 0 gives each its own.
    pub witness_groups: usize,
    pub honest_stake: Tokens,
    /// Ticks per contribution-reward epoch.
    pub epoch_ticks: u64,
    pub payload: PayloadModel,
    pub delivery: DeliveryConfig,
    pub adversaries: Vec<AdversarySpec>,
    pub panel: WitnessPanelConfig,
    pub consensus: ConsensusConfig,
    pub anomaly: AnomalyConfig,
    pub incentives: IncentiveConfig,
    pub arbitration: ArbitrationConfig,
    pub inspection: InspectionPolicy,
    pub onboarding: OnboardingConfig,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            name: "custom".into(),
            description: String::new(),
            seed: 1,
            duration_ticks: 1000,
            txn_arrival_rate: 1.0,
            max_transactions: None,
            drain_ticks: 50,
            n_honest_devices: 20,
            n_witness_pool: 12,
            n_validators: 5,
            witness_groups: 0,
            honest_stake: Tokens::whole(100),
            epoch_ticks: 100,
            payload: PayloadModel::default(),
            delivery: DeliveryConfig::default(),
            adversaries: Vec::new(),
            panel: WitnessPanelConfig::default(),
            consensus: ConsensusConfig::default(),
            anomaly: AnomalyConfig::default(),
            incentives: IncentiveConfig::default(),
            arbitration: ArbitrationConfig::default(),
            inspection: InspectionPolicy::default(),
            onboarding: OnboardingConfig::default(),
        }
    }
}

fn check_rate(path: &str, v: f64) -> Result<(), ConfigError> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(invalid(path, format!("must lie in [0, 1], got {v}")))
    }
}

fn check_positive(path: &str, v: f64) -> Result<(), ConfigError> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(invalid(path, format!("must be a positive number, got {v}")))
    }
}

impl ScenarioConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        Self::from_toml_with(text, &[])
    }

    /// Parse, apply `key=value` overrides, then validate.
    pub fn from_toml_with(text: &str, overrides: &[String]) -> Result<Self, ConfigError> {
        let mut value: toml::Table = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let cfg: ScenarioConfig = toml::Value::Table(value)
            .try_into()
            .map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path, overrides: &[String]) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        Self::from_toml_with(&text, overrides)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(invalid(
                "schema_version",
                format!("unsupported version {} (expected {SCHEMA_VERSION})", self.schema_version),
            ));
        }
        if !(self.txn_arrival_rate.is_finite() && self.txn_arrival_rate >= 0.0) {
            return Err(invalid("txn_arrival_rate", "must be a finite non-negative number"));
        }
        if self.txn_arrival_rate > 0.0 && self.n_honest_devices < 2 {
            return Err(invalid("n_honest_devices", "need at least 2 clients when transactions arrive"));
        }
        if self.n_validators == 0 {
            return Err(invalid("n_validators", "need at least one validator"));
        }
        if self.epoch_ticks == 0 {
            return Err(invalid("epoch_ticks", "must be at least 1"));
        }
        check_positive("payload.sd", self.payload.sd)?;
        if !(self.payload.device_spread.is_finite() && self.payload.device_spread >= 0.0) {
            return Err(invalid("payload.device_spread", "must be non-negative"));
        }
        check_rate("delivery.drop_rate", self.delivery.drop_rate)?;
        if self.honest_stake < self.onboarding.min_stake {
            return Err(invalid(
                "honest_stake",
                format!("{} is below onboarding.min_stake {}", self.honest_stake, self.onboarding.min_stake),
            ));
        }

        let p = &self.panel;
        if p.k == 0 {
            return Err(invalid("panel.k", "must be at least 1"));
        }
        let q = p.quorum();
        if q == 0 || q > p.k {
            return Err(invalid("panel.quorum", format!("{q} must lie in 1..={}", p.k)));
        }
        if p.diversity == 0 {
            return Err(invalid("panel.diversity", "must be at least 1"));
        }
        let pool = self.n_witness_pool + self.adversaries.iter().map(AdversarySpec::witnesses).sum::<usize>();
        if pool < p.k {
            return Err(invalid(
                "n_witness_pool",
                format!("witness pool of {pool} cannot fill a panel of k={}", p.k),
            ));
        }

        let c = &self.consensus;
        if !(c.commit_threshold > 0.0 && c.commit_threshold < 1.0) {
            return Err(invalid("consensus.commit_threshold", "must lie in (0, 1)"));
        }
        check_rate("consensus.contested_band", c.contested_band)?;
        if c.stake_share < 0.0 || c.reputation_share < 0.0 || c.stake_share + c.reputation_share <= 0.0 {
            return Err(invalid("consensus.stake_share", "shares must be non-negative with a positive sum"));
        }
        if c.batch_cap == 0 {
            return Err(invalid("consensus.batch_cap", "must be at least 1"));
        }

        let a = &self.anomaly;
        if a.window < 2 {
            return Err(invalid("anomaly.window", "must be at least 2"));
        }
        check_positive("anomaly.z_threshold", a.z_threshold)?;
        check_positive("anomaly.cusum_limit", a.cusum_limit)?;
        if !(a.cusum_drift.is_finite() && a.cusum_drift >= 0.0) {
            return Err(invalid("anomaly.cusum_drift", "must be non-negative"));
        }

        let i = &self.incentives;
        check_rate("incentives.penalty_factor", i.penalty_factor)?;
        check_rate("incentives.major_first_forfeit", i.major_first_forfeit)?;
        check_rate("incentives.major_repeat_forfeit", i.major_repeat_forfeit)?;
        check_rate("incentives.ban_threshold", i.ban_threshold)?;
        check_rate("incentives.initial_reputation", i.initial_reputation)?;
        if i.longevity_period == 0 {
            return Err(invalid("incentives.longevity_period", "must be at least 1"));
        }

        let arb = &self.arbitration;
        if arb.panel_size == 0 {
            return Err(invalid("arbitration.panel_size", "must be at least 1"));
        }
        if !(arb.community_threshold > 0.5 && arb.community_threshold <= 1.0) {
            return Err(invalid("arbitration.community_threshold", "must lie in (0.5, 1]"));
        }

        if let Err((field, message)) = self.inspection.validate() {
            return Err(invalid(&format!("inspection.{field}"), message));
        }
        if let Some(m) = self.inspection.random_validators {
            if m == 0 || m >= self.n_validators {
                return Err(invalid(
                    "inspection.random_validators",
                    format!("{m} must lie in 1..{}", self.n_validators),
                ));
            }
        }

        for (idx, adv) in self.adversaries.iter().enumerate() {
            let at = |f: &str| format!("adversaries.{idx}.{f}");
            match adv {
                AdversarySpec::TamperingSender { tamper_rate, .. } => check_rate(&at("tamper_rate"), *tamper_rate)?,
                AdversarySpec::LazyWitness { skip_rate, .. } => check_rate(&at("skip_rate"), *skip_rate)?,
                AdversarySpec::EquivocatingWitness { rate, .. } => check_rate(&at("rate"), *rate)?,
                AdversarySpec::ColludingWitnesses { groups: Some(0), .. } => {
                    return Err(invalid(&at("groups"), "must be at least 1"));
                }
                AdversarySpec::KeyCompromise {
                    count,
                    flood_rate,
                    size_shift,
                    ..
                } => {
                    if *count > self.n_honest_devices {
                        return Err(invalid(&at("count"), "cannot compromise more clients than exist"));
                    }
                    if !(flood_rate.is_finite() && *flood_rate >= 0.0) {
                        return Err(invalid(&at("flood_rate"), "must be non-negative"));
                    }
                    if !size_shift.is_finite() {
                        return Err(invalid(&at("size_shift"), "must be finite"));
                    }
                }
                _ => {}
            }
        }
        Ok(())
    }
}

/// Set `path` (dots separate tables, numbers index arrays) to `raw`,
/// parsed as a TOML value when possible and as a string otherwise.
pub fn apply_override(root: &mut toml::Table, assignment: &str) -> Result<(), ConfigError> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| ConfigError::BadOverride(assignment.to_string()))?;
    let path = path.trim();
    if path.is_empty() {
        return Err(ConfigError::BadOverride(assignment.to_string()));
    }
    let raw = raw.trim();
    let value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let parts: Vec<&str> = path.split('.').collect();
    let mut root_value = toml::Value::Table(std::mem::take(root));
    let result = set_path(&mut root_value, &parts, value, path);
    if let toml::Value::Table(t) = root_value {
        *root = t;
    }
    result
}

fn set_path(cur: &mut toml::Value, parts: &[&str], value: toml::Value, path: &str) -> Result<(), ConfigError> {
    let (part, rest) = parts.split_first().expect("non-empty path");
    let slot = match cur {
        toml::Value::Table(t) => {
            if rest.is_empty() {
                t.insert(part.to_string(), value);
                return Ok(());
            }
            t.entry(part.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()))
        }
        toml::Value::Array(a) => {
            let i: usize = part
                .parse()
                .map_err(|_| invalid(path, format!("{part:?} is not an array index")))?;
            let len = a.len();
            let slot = a
                .get_mut(i)
                .ok_or_else(|| invalid(path, format!("index {i} out of range (len {len})")))?;
            if rest.is_empty() {
                *slot = value;
                return Ok(());
            }
            slot
        }
        _ => return Err(invalid(path, format!("{part:?} is not inside a table"))),
    };
    set_path(slot, rest, value, path)
}

pub struct BuiltinScenario {
    pub name: &'static str,
    pub toml: &'static str,
}

pub const BUILTIN_SCENARIOS: &[BuiltinScenario] = &[
    BuiltinScenario {
        name: "baseline",
        toml: include_str!("../../scenarios/baseline.toml"),
    },
    BuiltinScenario {
        name: "sybil_flood",
        toml: include_str!("../../scenarios/sybil_flood.toml"),
    },
    BuiltinScenario {
        name: "collusion_below_quorum",
        toml: include_str!("../../scenarios/collusion_below_quorum.toml"),
    },
    BuiltinScenario {
        name: "collusion_at_quorum",
        toml: include_str!("../../scenarios/collusion_at_quorum.toml"),
    },
    BuiltinScenario {
        name: "lazy_witnesses",
        toml: include_str!("../../scenarios/lazy_witnesses.toml"),
    },
    BuiltinScenario {
        name: "equivocation",
        toml: include_str!("../../scenarios/equivocation.toml"),
    },
    BuiltinScenario {
        name: "forged_sync",
        toml: include_str!("../../scenarios/forged_sync.toml"),
    },
    BuiltinScenario {
        name: "key_compromise",
        toml: include_str!("../../scenarios/key_compromise.toml"),
    },
];

pub fn builtin(name: &str) -> Result<ScenarioConfig, ConfigError> {
    builtin_with(name, &[])
}

pub fn builtin_with(name: &str, overrides: &[String]) -> Result<ScenarioConfig, ConfigError> {
    let s = BUILTIN_SCENARIOS
        .iter()
        .find(|s| s.name == name)
        .ok_or_else(|| ConfigError::UnknownScenario(name.to_string()))?;
    ScenarioConfig::from_toml_with(s.toml, overrides)
}
