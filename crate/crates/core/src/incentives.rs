//! Stake, reputation, and the reward/penalty calculus.
//!
//! Token amounts are fixed-point integers (micro-tokens) so the
//! conservation identity
//! `sum(staked + liquid) + treasury + escrow == deposited + minted`
//! holds exactly after any event sequence.

use std::collections::BTreeMap;
use std::fmt;
use std::ops::{Add, AddAssign, Neg, Sub, SubAssign};

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::primitives::{Digest, PublicKey};
use crate::scalar::{clamp, Scalar};

pub const MICROS_PER_TOKEN: i64 = 1_000_000;

/// Token amount in micro-tokens. Serialized as a decimal number of tokens,
/// which round-trips exactly for magnitudes up to 2^50 micro-tokens
/// (about 1.1e9 tokens).
#[derive(Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Tokens(pub i64);

impl Tokens {
    pub const ZERO: Tokens = Tokens(0);

    pub fn whole(t: i64) -> Self {
        Tokens(t * MICROS_PER_TOKEN)
    }

    /// Rounds to the nearest micro-token.
    pub fn from_f64(t: f64) -> Self {
        Tokens((t * MICROS_PER_TOKEN as f64).round() as i64)
    }

    pub fn as_f64(self) -> f64 {
        self.0 as f64 / MICROS_PER_TOKEN as f64
    }

    /// `self * num / den`, rounded toward zero.
    pub fn mul_ratio(self, num: i64, den: i64) -> Self {
        Tokens(((self.0 as i128 * num as i128) / den as i128) as i64)
    }

    pub fn is_negative(self) -> bool {
        self.0 < 0
    }
}

impl fmt::Display for Tokens {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let sign = if self.0 < 0 { "-" } else { "" };
        let abs = self.0.unsigned_abs();
        write!(
            f,
            "{sign}{}.{:06}",
            abs / MICROS_PER_TOKEN as u64,
            abs % MICROS_PER_TOKEN as u64
        )
    }
}

impl fmt::Debug for Tokens {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tokens({self})")
    }
}

impl Add for Tokens {
    type Output = Tokens;
    fn add(self, o: Tokens) -> Tokens {
        Tokens(self.0 + o.0)
    }
}

impl Sub for Tokens {
    type Output = Tokens;
    fn sub(self, o: Tokens) -> Tokens {
        Tokens(self.0 - o.0)
    }
}

impl Neg for Tokens {
    type Output = Tokens;
    fn neg(self) -> Tokens {
        Tokens(-self.0)
    }
}

impl AddAssign for Tokens {
    fn add_assign(&mut self, o: Tokens) {
        self.0 += o.0;
    }
}

impl SubAssign for Tokens {
    fn sub_assign(&mut self, o: Tokens) {
        self.0 -= o.0;
    }
}

impl std::iter::Sum for Tokens {
    fn sum<I: Iterator<Item = Tokens>>(iter: I) -> Tokens {
        iter.fold(Tokens::ZERO, |a, b| a + b)
    }
}

impl Serialize for Tokens {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(self.as_f64())
    }
}

impl<'de> Deserialize<'de> for Tokens {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let v = f64::deserialize(d)?;
        if !v.is_finite() {
            return Err(serde::de::Error::custom("token amount must be finite"));
        }
        Ok(Tokens::from_f64(v))
    }
}

/// Reference from an incentive event back to what caused it.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "type", content = "id", rename_all = "snake_case")]
pub enum Cause {
    Onboarding,
    Txn(Digest),
    Block(u64),
    Dispute(u64),
    Inspection(u64),
    Epoch(u64),
    Tenure,
    Manual(String),
}

impl fmt::Display for Cause {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Cause::Onboarding => f.write_str("onboarding"),
            Cause::Txn(d) => write!(f, "txn:{d}"),
            Cause::Block(h) => write!(f, "block:{h}"),
            Cause::Dispute(id) => write!(f, "dispute:{id}"),
            Cause::Inspection(id) => write!(f, "inspection:{id}"),
            Cause::Epoch(e) => write!(f, "epoch:{e}"),
            Cause::Tenure => f.write_str("tenure"),
            Cause::Manual(s) => write!(f, "manual:{s}"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IncentiveKind {
    StakeDeposit,
    PerfReward,
    ContribReward,
    LongevityBonus,
    StakeForfeit,
    ReputationPenalty,
    ReputationRestore,
    TempBan,
    PermBan,
    BondPosted,
    BondReturned,
    BondForfeited,
}

impl IncentiveKind {
    pub fn as_str(self) -> &'static str {
        match self {
            IncentiveKind::StakeDeposit => "StakeDeposit",
            IncentiveKind::PerfReward => "PerfReward",
            IncentiveKind::ContribReward => "ContribReward",
            IncentiveKind::LongevityBonus => "LongevityBonus",
            IncentiveKind::StakeForfeit => "StakeForfeit",
            IncentiveKind::ReputationPenalty => "ReputationPenalty",
            IncentiveKind::ReputationRestore => "ReputationRestore",
            IncentiveKind::TempBan => "TempBan",
            IncentiveKind::PermBan => "PermBan",
            IncentiveKind::BondPosted => "BondPosted",
            IncentiveKind::BondReturned => "BondReturned",
            IncentiveKind::BondForfeited => "BondForfeited",
        }
    }
}

/// One append-only incentive record. `tokens` is the change to the
/// subject's own holdings (staked + liquid); `reputation` is the applied
/// (post-clamp) change to its score.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IncentiveEvent {
    pub tick: u64,
    pub subject: PublicKey,
    pub kind: IncentiveKind,
    pub tokens: Tokens,
    pub reputation: f64,
    pub cause: Cause,
}

impl IncentiveEvent {
    /// `tick,subject,kind,delta,cause_ref` with delta `tokens|reputation`.
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{}|{:.6},{}",
            self.tick,
            self.subject,
            self.kind.as_str(),
            self.tokens,
            self.reputation,
            self.cause
        )
    }
}

pub const INCENTIVE_CSV_HEADER: &str = "tick,subject,kind,delta,cause_ref";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Severity {
    Minor,
    Major,
    Critical,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IncentiveConfig {
    pub perf_reward: Tokens,
    pub perf_reputation_step: f64,
    pub contribution_pool: Tokens,
    pub longevity_period: u64,
    pub longevity_bonus: Tokens,
    pub longevity_min_score: f64,
    pub penalty_factor: f64,
    pub major_first_forfeit: f64,
    pub major_repeat_forfeit: f64,
    pub ban_threshold: f64,
    pub temp_ban_ticks: u64,
    pub initial_reputation: f64,
    pub restoration_step: f64,
}

impl Default for IncentiveConfig {
    fn default() -> Self {
        Self {
            perf_reward: Tokens::whole(1),
            perf_reputation_step: 0.01,
            contribution_pool: Tokens::whole(10),
            longevity_period: 1000,
            longevity_bonus: Tokens::whole(5),
            longevity_min_score: 0.8,
            penalty_factor: 0.8,
            major_first_forfeit: 0.5,
            major_repeat_forfeit: 1.0,
            ban_threshold: 0.2,
            temp_ban_ticks: 200,
            initial_reputation: 0.5,
            restoration_step: 0.05,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StakeAccount {
    pub owner: PublicKey,
    pub staked: Tokens,
    pub liquid: Tokens,
    pub offense_count: u32,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Standing {
    Good,
    TempBanned { until: u64 },
    PermBanned,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReputationAccount {
    pub owner: PublicKey,
    pub score: f64,
    pub onboarded_tick: u64,
    pub last_reward_tick: Option<u64>,
    pub last_longevity_tick: Option<u64>,
    pub standing: Standing,
}

impl ReputationAccount {
    pub fn is_banned(&self) -> bool {
        !matches!(self.standing, Standing::Good)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum IncentiveError {
    #[error("subject {0:?} is banned")]
    SubjectBanned(PublicKey),
    #[error("invalid proportion: contributed {contributed} of total {total}")]
    InvalidProportion { contributed: String, total: String },
    #[error("unknown account {0:?}")]
    UnknownAccount(PublicKey),
    #[error("account {0:?} already exists")]
    DuplicateAccount(PublicKey),
    #[error("insufficient liquid balance for bond: need {need}, have {have}")]
    InsufficientBond { need: Tokens, have: Tokens },
    #[error("negative amount {0}")]
    NegativeAmount(Tokens),
}

/// Expected per-attempt payoff of cheating: `reward * (1 - p) - forfeit * p`.
/// Negative means the cheat is deterred.
pub fn deterrence_margin<F: Scalar>(reward_per_cheat: F, detection_prob: F, forfeit_on_catch: F) -> F {
    reward_per_cheat * (F::one() - detection_prob) - forfeit_on_catch * detection_prob
}

/// All stake and reputation accounts plus the global counters.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct IncentiveLedger {
    pub config: IncentiveConfig,
    stakes: BTreeMap<PublicKey, StakeAccount>,
    reputations: BTreeMap<PublicKey, ReputationAccount>,
    pub treasury: Tokens,
    pub escrow: Tokens,
    pub deposited: Tokens,
    pub minted: Tokens,
    events: Vec<IncentiveEvent>,
}

impl IncentiveLedger {
    pub fn new(config: IncentiveConfig) -> Self {
        Self {
            config,
            ..Default::default()
        }
    }

    pub fn events(&self) -> &[IncentiveEvent] {
        &self.events
    }

    pub fn stake(&self, owner: &PublicKey) -> Option<&StakeAccount> {
        self.stakes.get(owner)
    }

    pub fn reputation(&self, owner: &PublicKey) -> Option<&ReputationAccount> {
        self.reputations.get(owner)
    }

    pub fn score(&self, owner: &PublicKey) -> f64 {
        self.reputations.get(owner).map_or(0.0, |r| r.score)
    }

    pub fn staked(&self, owner: &PublicKey) -> Tokens {
        self.stakes.get(owner).map_or(Tokens::ZERO, |s| s.staked)
    }

    pub fn standing(&self, owner: &PublicKey) -> Standing {
        self.reputations.get(owner).map_or(Standing::Good, |r| r.standing)
    }

    pub fn accounts(&self) -> impl Iterator<Item = (&StakeAccount, &ReputationAccount)> {
        self.stakes.values().zip(self.reputations.values())
    }

    pub fn total_staked(&self) -> Tokens {
        self.stakes.values().map(|s| s.staked).sum()
    }

    pub fn total_liquid(&self) -> Tokens {
        self.stakes.values().map(|s| s.liquid).sum()
    }

    /// Exact token conservation identity.
    pub fn conserved(&self) -> bool {
        self.total_staked() + self.total_liquid() + self.treasury + self.escrow == self.deposited + self.minted
    }

    fn push(&mut self, ev: IncentiveEvent) -> IncentiveEvent {
        self.events.push(ev.clone());
        ev
    }

    fn accounts_mut(&mut self, owner: &PublicKey) -> Result<(&mut StakeAccount, &mut ReputationAccount), IncentiveError> {
        let s = self.stakes.get_mut(owner).ok_or(IncentiveError::UnknownAccount(*owner))?;
        let r = self.reputations.get_mut(owner).ok_or(IncentiveError::UnknownAccount(*owner))?;
        Ok((s, r))
    }

    /// Escrow an onboarding deposit and open both accounts.
    pub fn open_account(&mut self, owner: PublicKey, stake: Tokens, tick: u64) -> Result<IncentiveEvent, IncentiveError> {
        if stake.is_negative() {
            return Err(IncentiveError::NegativeAmount(stake));
        }
        if self.stakes.contains_key(&owner) {
            return Err(IncentiveError::DuplicateAccount(owner));
        }
        self.stakes.insert(
            owner,
            StakeAccount {
                owner,
                staked: stake,
                liquid: Tokens::ZERO,
                offense_count: 0,
            },
        );
        self.reputations.insert(
            owner,
            ReputationAccount {
                owner,
                score: self.config.initial_reputation,
                onboarded_tick: tick,
                last_reward_tick: None,
                last_longevity_tick: None,
                standing: Standing::Good,
            },
        );
        self.deposited += stake;
        Ok(self.push(IncentiveEvent {
            tick,
            subject: owner,
            kind: IncentiveKind::StakeDeposit,
            tokens: stake,
            reputation: 0.0,
            cause: Cause::Onboarding,
        }))
    }

    pub fn apply_performance_reward(&mut self, owner: &PublicKey, cause: Cause, tick: u64) -> Result<IncentiveEvent, IncentiveError> {
        let reward = self.config.perf_reward;
        let step = self.config.perf_reputation_step;
        let (s, r) = self.accounts_mut(owner)?;
        if r.is_banned() {
            return Err(IncentiveError::SubjectBanned(*owner));
        }
        s.liquid += reward;
        let before = r.score;
        r.score = clamp(before + step, 0.0, 1.0);
        r.last_reward_tick = Some(tick);
        let delta = r.score - before;
        self.minted += reward;
        Ok(self.push(IncentiveEvent {
            tick,
            subject: *owner,
            kind: IncentiveKind::PerfReward,
            tokens: reward,
            reputation: delta,
            cause,
        }))
    }

    pub fn apply_contribution_reward(
        &mut self,
        owner: &PublicKey,
        contributed_units: f64,
        total_units: f64,
        cause: Cause,
        tick: u64,
    ) -> Result<IncentiveEvent, IncentiveError> {
        let valid = total_units > 0.0
            && total_units.is_finite()
            && contributed_units >= 0.0
            && contributed_units <= total_units;
        if !valid {
            return Err(IncentiveError::InvalidProportion {
                contributed: contributed_units.to_string(),
                total: total_units.to_string(),
            });
        }
        let pool = self.config.contribution_pool;
        let (s, r) = self.accounts_mut(owner)?;
        if r.is_banned() {
            return Err(IncentiveError::SubjectBanned(*owner));
        }
        let amount = Tokens((pool.0 as f64 * (contributed_units / total_units)).floor() as i64);
        s.liquid += amount;
        self.minted += amount;
        Ok(self.push(IncentiveEvent {
            tick,
            subject: *owner,
            kind: IncentiveKind::ContribReward,
            tokens: amount,
            reputation: 0.0,
            cause,
        }))
    }

    pub fn apply_longevity_bonus(&mut self, owner: &PublicKey, tick: u64) -> Option<IncentiveEvent> {
        let cfg = self.config.clone();
        let (s, r) = self.accounts_mut(owner).ok()?;
        let tenure_ok = tick.saturating_sub(r.onboarded_tick) >= cfg.longevity_period && tick >= r.onboarded_tick;
        let spacing_ok = r
            .last_longevity_tick
            .is_none_or(|last| tick.saturating_sub(last) >= cfg.longevity_period);
        if r.is_banned() || !tenure_ok || !spacing_ok || s.offense_count != 0 || r.score < cfg.longevity_min_score {
            return None;
        }
        s.liquid += cfg.longevity_bonus;
        r.last_longevity_tick = Some(tick);
        self.minted += cfg.longevity_bonus;
        Some(self.push(IncentiveEvent {
            tick,
            subject: *owner,
            kind: IncentiveKind::LongevityBonus,
            tokens: cfg.longevity_bonus,
            reputation: 0.0,
            cause: Cause::Tenure,
        }))
    }

    /// Graduated penalty. Returns every event it emitted, in order.
    pub fn apply_penalty(&mut self, owner: &PublicKey, severity: Severity, cause: Cause, tick: u64) -> Vec<IncentiveEvent> {
        let cfg = self.config.clone();
        let Ok((s, r)) = self.accounts_mut(owner) else {
            return Vec::new();
        };
        if r.standing == Standing::PermBanned {
            return Vec::new();
        }
        let frozen = r.is_banned();
        let mut out = Vec::new();
        let mut forfeited = Tokens::ZERO;

        if matches!(severity, Severity::Minor | Severity::Major) && !frozen {
            let before = r.score;
            r.score = clamp(before * cfg.penalty_factor, 0.0, 1.0);
            out.push(IncentiveEvent {
                tick,
                subject: *owner,
                kind: IncentiveKind::ReputationPenalty,
                tokens: Tokens::ZERO,
                reputation: r.score - before,
                cause: cause.clone(),
            });
        }
        if matches!(severity, Severity::Major | Severity::Critical) {
            let fraction = match severity {
                Severity::Critical => 1.0,
                _ if s.offense_count == 0 => cfg.major_first_forfeit,
                _ => cfg.major_repeat_forfeit,
            };
            let amount = Tokens((s.staked.0 as f64 * fraction).floor() as i64).min(s.staked);
            s.staked -= amount;
            s.offense_count += 1;
            forfeited = amount;
            out.push(IncentiveEvent {
                tick,
                subject: *owner,
                kind: IncentiveKind::StakeForfeit,
                tokens: -amount,
                reputation: 0.0,
                cause: cause.clone(),
            });
        }
        if severity == Severity::Critical {
            r.standing = Standing::PermBanned;
            out.push(IncentiveEvent {
                tick,
                subject: *owner,
                kind: IncentiveKind::PermBan,
                tokens: Tokens::ZERO,
                reputation: 0.0,
                cause: cause.clone(),
            });
        } else if !frozen && r.score < cfg.ban_threshold {
            r.standing = Standing::TempBanned {
                until: tick + cfg.temp_ban_ticks,
            };
            out.push(IncentiveEvent {
                tick,
                subject: *owner,
                kind: IncentiveKind::TempBan,
                tokens: Tokens::ZERO,
                reputation: 0.0,
                cause,
            });
        }
        self.treasury += forfeited;
        self.events.extend(out.iter().cloned());
        out
    }

    /// Forfeit a fixed amount of stake (capped at what is staked).
    pub fn forfeit_stake(&mut self, owner: &PublicKey, amount: Tokens, cause: Cause, tick: u64) -> Result<IncentiveEvent, IncentiveError> {
        if amount.is_negative() {
            return Err(IncentiveError::NegativeAmount(amount));
        }
        let (s, _) = self.accounts_mut(owner)?;
        let taken = amount.min(s.staked);
        s.staked -= taken;
        self.treasury += taken;
        Ok(self.push(IncentiveEvent {
            tick,
            subject: *owner,
            kind: IncentiveKind::StakeForfeit,
            tokens: -taken,
            reputation: 0.0,
            cause,
        }))
    }

    /// Reputation restoration after a dispute clears the subject.
    pub fn restore_reputation(&mut self, owner: &PublicKey, cause: Cause, tick: u64) -> Result<IncentiveEvent, IncentiveError> {
        let step = self.config.restoration_step;
        let (_, r) = self.accounts_mut(owner)?;
        if r.standing == Standing::PermBanned {
            return Err(IncentiveError::SubjectBanned(*owner));
        }
        let before = r.score;
        r.score = clamp(before + step, 0.0, 1.0);
        let delta = r.score - before;
        Ok(self.push(IncentiveEvent {
            tick,
            subject: *owner,
            kind: IncentiveKind::ReputationRestore,
            tokens: Tokens::ZERO,
            reputation: delta,
            cause,
        }))
    }

    pub fn post_bond(&mut self, owner: &PublicKey, amount: Tokens, cause: Cause, tick: u64) -> Result<IncentiveEvent, IncentiveError> {
        let (s, _) = self.accounts_mut(owner)?;
        if s.liquid < amount {
            return Err(IncentiveError::InsufficientBond {
                need: amount,
                have: s.liquid,
            });
        }
        s.liquid -= amount;
        self.escrow += amount;
        Ok(self.push(IncentiveEvent {
            tick,
            subject: *owner,
            kind: IncentiveKind::BondPosted,
            tokens: -amount,
            reputation: 0.0,
            cause,
        }))
    }

    pub fn settle_bond(&mut self, owner: &PublicKey, amount: Tokens, refund: bool, cause: Cause, tick: u64) -> Result<IncentiveEvent, IncentiveError> {
        let (s, _) = self.accounts_mut(owner)?;
        let (kind, tokens) = if refund {
            s.liquid += amount;
            (IncentiveKind::BondReturned, amount)
        } else {
            self.treasury += amount;
            (IncentiveKind::BondForfeited, Tokens::ZERO)
        };
        self.escrow -= amount;
        Ok(self.push(IncentiveEvent {
            tick,
            subject: *owner,
            kind,
            tokens,
            reputation: 0.0,
            cause,
        }))
    }

    /// Lift temporary bans whose term has elapsed. Returns lifted owners.
    pub fn expire_bans(&mut self, tick: u64) -> Vec<PublicKey> {
        let mut lifted = Vec::new();
        for r in self.reputations.values_mut() {
            if let Standing::TempBanned { until } = r.standing {
                if tick >= until {
                    r.standing = Standing::Good;
                    lifted.push(r.owner);
                }
            }
        }
        lifted
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn key(b: u8) -> PublicKey {
        PublicKey([b; 32])
    }

    fn ledger_with(owner: PublicKey, stake: i64, score: f64) -> IncentiveLedger {
        let mut l = IncentiveLedger::new(IncentiveConfig::default());
        l.open_account(owner, Tokens::whole(stake), 0).unwrap();
        l.reputations.get_mut(&owner).unwrap().score = score;
        l
    }

    #[test]
    fn tokens_display_and_ratio() {
        assert_eq!(Tokens::whole(5).to_string(), "5.000000");
        assert_eq!(Tokens(-1_500_000).to_string(), "-1.500000");
        assert_eq!(Tokens::whole(10).mul_ratio(1, 3), Tokens(3_333_333));
        assert_eq!(Tokens::from_f64(0.25), Tokens(250_000));
    }

    #[test]
    fn performance_reward_steps_reputation() {
        let a = key(1);
        let mut l = ledger_with(a, 100, 0.50);
        let ev = l.apply_performance_reward(&a, Cause::Epoch(0), 3).unwrap();
        assert!((l.score(&a) - 0.51).abs() < 1e-12);
        assert_eq!(ev.tokens, Tokens::whole(1));
        assert_eq!(l.stake(&a).unwrap().liquid, Tokens::whole(1));
        assert!(l.conserved());
    }

    #[test]
    fn performance_reward_clamps_at_one() {
        let a = key(1);
        let mut l = ledger_with(a, 100, 0.995);
        let ev = l.apply_performance_reward(&a, Cause::Epoch(0), 3).unwrap();
        assert_eq!(l.score(&a), 1.0);
        assert!((ev.reputation - 0.005).abs() < 1e-12);
    }

    #[test]
    fn banned_owner_gets_no_reward() {
        let a = key(1);
        let mut l = ledger_with(a, 100, 0.5);
        l.apply_penalty(&a, Severity::Critical, Cause::Epoch(0), 1);
        let before = l.events().len();
        assert_eq!(
            l.apply_performance_reward(&a, Cause::Epoch(0), 2),
            Err(IncentiveError::SubjectBanned(a))
        );
        assert_eq!(l.events().len(), before);
        assert_eq!(l.score(&a), 0.5);
    }

    #[test]
    fn contribution_reward_is_proportional() {
        let a = key(1);
        let mut l = ledger_with(a, 100, 0.5);
        let ev = l.apply_contribution_reward(&a, 5.0, 10.0, Cause::Epoch(1), 1).unwrap();
        assert_eq!(ev.tokens, Tokens::whole(5));
        let ev = l.apply_contribution_reward(&a, 0.0, 10.0, Cause::Epoch(2), 1).unwrap();
        assert_eq!(ev.tokens, Tokens::ZERO);
        assert!(matches!(
            l.apply_contribution_reward(&a, 11.0, 10.0, Cause::Epoch(3), 1),
            Err(IncentiveError::InvalidProportion { .. })
        ));
        assert!(matches!(
            l.apply_contribution_reward(&a, 0.0, 0.0, Cause::Epoch(3), 1),
            Err(IncentiveError::InvalidProportion { .. })
        ));
        assert!(l.conserved());
    }

    #[test]
    fn longevity_bonus_boundaries() {
        let a = key(1);
        let mut l = ledger_with(a, 100, 0.9);
        assert!(l.apply_longevity_bonus(&a, 999).is_none());
        let ev = l.apply_longevity_bonus(&a, 1000).unwrap();
        assert_eq!(ev.tokens, Tokens::whole(5));
        // At most once per period.
        assert!(l.apply_longevity_bonus(&a, 1500).is_none());
        assert!(l.apply_longevity_bonus(&a, 2000).is_some());

        let b = key(2);
        let mut l = ledger_with(b, 100, 0.9);
        l.stakes.get_mut(&b).unwrap().offense_count = 1;
        assert!(l.apply_longevity_bonus(&b, 2000).is_none());

        let c = key(3);
        let mut l = ledger_with(c, 100, 0.79);
        assert!(l.apply_longevity_bonus(&c, 2000).is_none());
    }

    #[test]
    fn major_penalty_first_and_repeat() {
        let a = key(1);
        let mut l = ledger_with(a, 100, 0.5);
        let evs = l.apply_penalty(&a, Severity::Major, Cause::Epoch(0), 1);
        assert_eq!(l.staked(&a), Tokens::whole(50));
        assert!((l.score(&a) - 0.4).abs() < 1e-12);
        assert_eq!(evs.len(), 2);
        l.apply_penalty(&a, Severity::Major, Cause::Epoch(0), 2);
        assert_eq!(l.staked(&a), Tokens::ZERO);
        assert_eq!(l.stake(&a).unwrap().offense_count, 2);
        assert_eq!(l.treasury, Tokens::whole(100));
        assert!(l.conserved());
    }

    #[test]
    fn minor_penalty_triggers_temp_ban_below_threshold() {
        let a = key(1);
        let mut l = ledger_with(a, 100, 0.24);
        let evs = l.apply_penalty(&a, Severity::Minor, Cause::Epoch(0), 10);
        // Oracle: 0.24 * 0.8 = 0.192 < 0.2.
        assert!((l.score(&a) - 0.192).abs() < 1e-12);
        assert!(evs.iter().any(|e| e.kind == IncentiveKind::TempBan));
        assert_eq!(l.standing(&a), Standing::TempBanned { until: 210 });
        assert!(l.expire_bans(209).is_empty());
        assert_eq!(l.expire_bans(210), vec![a]);
        assert_eq!(l.standing(&a), Standing::Good);
    }

    #[test]
    fn critical_forfeits_everything_and_bans() {
        let a = key(1);
        let mut l = ledger_with(a, 100, 0.9);
        let evs = l.apply_penalty(&a, Severity::Critical, Cause::Epoch(0), 1);
        assert_eq!(l.staked(&a), Tokens::ZERO);
        assert_eq!(l.standing(&a), Standing::PermBanned);
        assert_eq!(evs.last().unwrap().kind, IncentiveKind::PermBan);
        assert!(l.apply_penalty(&a, Severity::Major, Cause::Epoch(0), 2).is_empty());
        assert!(l.conserved());
    }

    #[test]
    fn bonds_move_through_escrow() {
        let a = key(1);
        let mut l = ledger_with(a, 100, 0.5);
        assert!(matches!(
            l.post_bond(&a, Tokens::whole(20), Cause::Dispute(1), 1),
            Err(IncentiveError::InsufficientBond { .. })
        ));
        for _ in 0..20 {
            l.apply_performance_reward(&a, Cause::Epoch(0), 1).unwrap();
        }
        l.post_bond(&a, Tokens::whole(20), Cause::Dispute(1), 2).unwrap();
        assert_eq!(l.escrow, Tokens::whole(20));
        assert!(l.conserved());
        l.settle_bond(&a, Tokens::whole(20), false, Cause::Dispute(1), 3).unwrap();
        assert_eq!(l.escrow, Tokens::ZERO);
        assert_eq!(l.treasury, Tokens::whole(20));
        assert!(l.conserved());
    }

    #[test]
    fn deterrence_margin_arithmetic() {
        // 1 * 0.95 - 50 * 0.05 = 0.95 - 2.5 = -1.55
        assert!((deterrence_margin(1.0f64, 0.05, 50.0) - (-1.55)).abs() < 1e-12);
        assert!(deterrence_margin(1.0f64, 0.3, 0.0) > 0.0);
        assert!((deterrence_margin(1.0f64, 0.3, 0.0) - 0.7).abs() < 1e-12);
        assert_eq!(deterrence_margin(2.0f64, 1.0, 50.0), -50.0);
        assert!((deterrence_margin(1.0f32, 0.05, 50.0) + 1.55).abs() < 1e-5);
    }

    #[test]
    fn csv_row_layout() {
        let a = key(1);
        let mut l = ledger_with(a, 100, 0.5);
        let ev = l.apply_performance_reward(&a, Cause::Block(4), 7).unwrap();
        assert_eq!(
            ev.csv_row(),
            format!("7,{a},PerfReward,1.000000|0.010000,block:4")
        );
    }
}
