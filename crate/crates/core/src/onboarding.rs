//! Device onboarding: registration, temporary credentials, challenge
//! response, TOTP second factor, behavior checklist, finalization, and
//! periodic re-validation.
//!
//! The challenge-response proof is a keyed digest over the device's
//! enrollment secret, the challenge nonce and the statement ids. It sits
//! behind [`ChallengeVerifier`] so a real proof system can replace it.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::incentives::{IncentiveError, IncentiveLedger, Tokens};
use crate::primitives::{digest_parts, CanonicalHasher, Digest, PublicKey, SeededRng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeviceType {
    Sensor,
    Gateway,
    Vehicle,
    Meter,
    Compute,
}

/// Participation roles a device asks for at registration.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Roles {
    pub client: bool,
    pub witness: bool,
    pub validator: bool,
    pub arbitrator: bool,
}

/// Enrollment secret shared between a device and the network vault.
#[derive(Clone, PartialEq, Eq)]
pub struct DeviceSecret(pub [u8; 32]);

impl fmt::Debug for DeviceSecret {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("DeviceSecret(..)")
    }
}

#[derive(Clone, Debug)]
pub struct RegistrationRequest {
    pub device_type: DeviceType,
    pub model: String,
    pub version: String,
    pub public_key: PublicKey,
    /// Metadata is sealed to the network key. Modeled as a flag plus a
    /// digest commitment over the metadata and secret.
    pub encrypted: bool,
    pub sealed_secret: DeviceSecret,
    pub operator_group: String,
    pub roles: Roles,
    pub expertise: Vec<String>,
}

impl RegistrationRequest {
    pub fn commitment(&self) -> Digest {
        let mut h = CanonicalHasher::new("gdp/registration");
        h.bytes(self.model.as_bytes())
            .bytes(self.version.as_bytes())
            .fixed(&self.public_key.0)
            .fixed(&self.sealed_secret.0);
        h.finish()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Stage {
    Registered,
    TempCredentialed,
    ChallengePassed,
    MfaPassed,
    BehaviorScored,
    Finalized,
    Rejected,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TempCredential {
    pub token: Digest,
    pub expiry_tick: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Challenge {
    pub nonce: [u8; 16],
    pub statements: Vec<u32>,
    pub issued_tick: u64,
    pub ttl: u64,
}

impl Challenge {
    pub fn expired_at(&self, tick: u64) -> bool {
        tick > self.issued_tick + self.ttl
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OnboardingSession {
    pub device: PublicKey,
    pub stage: Stage,
    pub temp_credential: Option<TempCredential>,
    pub behavior_score: Option<f64>,
    pub started_tick: u64,
    pub active_challenge: Option<Challenge>,
    pub mfa_failures: u32,
    /// Every stage the session entered, with its tick.
    pub history: Vec<(u64, Stage)>,
}

impl OnboardingSession {
    fn advance(&mut self, to: Stage, tick: u64) {
        debug_assert!(to > self.stage, "stage must move forward");
        self.stage = to;
        self.history.push((tick, to));
        if to >= Stage::Finalized {
            self.temp_credential = None;
            self.active_challenge = None;
        }
    }

    pub fn passed_through(&self, stage: Stage) -> bool {
        self.history.iter().any(|&(_, s)| s == stage)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum DeviceStatus {
    Active,
    Quarantined,
    Banned,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeviceProfile {
    pub public_key: PublicKey,
    pub device_type: DeviceType,
    pub onboarded_tick: u64,
    pub credential: Digest,
    pub status: DeviceStatus,
    pub last_revalidation_tick: u64,
    pub operator_group: String,
    pub roles: Roles,
    pub expertise: Vec<String>,
}

/// A credential presented to authenticate an operation.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Credential {
    Temporary(Digest),
    Permanent(Digest),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BehaviorAction {
    Register,
    ChallengeIssued,
    ChallengeAnswered,
    MfaSubmitted,
    Retry,
    Heartbeat,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BehaviorRules {
    pub max_retries: u32,
    pub max_challenge_latency: u64,
    pub burst_limit: usize,
    pub weight_retries: f64,
    pub weight_latency: f64,
    pub weight_ordering: f64,
    pub weight_burst: f64,
    pub pass_threshold: f64,
}

impl Default for BehaviorRules {
    fn default() -> Self {
        Self {
            max_retries: 2,
            max_challenge_latency: 5,
            burst_limit: 5,
            weight_retries: 0.25,
            weight_latency: 0.25,
            weight_ordering: 0.25,
            weight_burst: 0.25,
            pass_threshold: 0.5,
        }
    }
}

impl BehaviorRules {
    /// Weighted checklist score in `[0, 1]`.
    pub fn score(&self, trace: &[(BehaviorAction, u64)]) -> f64 {
        let retries = trace.iter().filter(|(a, _)| *a == BehaviorAction::Retry).count() as u32;
        let retries_ok = retries <= self.max_retries;

        let issued = trace.iter().find(|(a, _)| *a == BehaviorAction::ChallengeIssued).map(|p| p.1);
        let answered = trace.iter().find(|(a, _)| *a == BehaviorAction::ChallengeAnswered).map(|p| p.1);
        let latency_ok = match (issued, answered) {
            (Some(i), Some(a)) => a >= i && a - i <= self.max_challenge_latency,
            _ => false,
        };

        let ordering_ok = trace.windows(2).all(|w| w[0].1 <= w[1].1);

        let mut per_tick: BTreeMap<u64, usize> = BTreeMap::new();
        for (_, t) in trace {
            *per_tick.entry(*t).or_default() += 1;
        }
        let burst_ok = per_tick.values().all(|&n| n <= self.burst_limit);

        let total = self.weight_retries + self.weight_latency + self.weight_ordering + self.weight_burst;
        if total <= 0.0 {
            return 0.0;
        }
        let earned = [
            (retries_ok, self.weight_retries),
            (latency_ok, self.weight_latency),
            (ordering_ok, self.weight_ordering),
            (burst_ok, self.weight_burst),
        ]
        .iter()
        .filter(|(ok, _)| *ok)
        .map(|(_, w)| w)
        .sum::<f64>();
        (earned / total).clamp(0.0, 1.0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OnboardingConfig {
    pub temp_credential_ttl: u64,
    pub challenge_ttl: u64,
    pub challenge_statements: usize,
    pub totp_window: u64,
    pub totp_skew: u64,
    pub max_mfa_attempts: u32,
    pub revalidation_period: u64,
    pub min_stake: Tokens,
    pub behavior: BehaviorRules,
    pub blacklist: Vec<PublicKey>,
}

impl Default for OnboardingConfig {
    fn default() -> Self {
        Self {
            temp_credential_ttl: 50,
            challenge_ttl: 10,
            challenge_statements: 3,
            totp_window: 30,
            totp_skew: 1,
            max_mfa_attempts: 3,
            revalidation_period: 500,
            min_stake: Tokens::whole(100),
            behavior: BehaviorRules::default(),
            blacklist: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum OnboardingError {
    #[error("device {0:?} is already registered")]
    DuplicateDevice(PublicKey),
    #[error("malformed registration request: {0}")]
    MalformedRequest(String),
    #[error("device {0:?} is blacklisted")]
    Blacklisted(PublicKey),
    #[error("no onboarding session for {0:?}")]
    UnknownSession(PublicKey),
    #[error("temporary credential expired")]
    CredentialExpired,
    #[error("operation not allowed at stage {0:?}")]
    WrongStage(Stage),
    #[error("no active challenge")]
    NoActiveChallenge,
    #[error("challenge expired")]
    ChallengeExpired,
    #[error("insufficient stake: need {need}, offered {offered}")]
    InsufficientStake { need: Tokens, offered: Tokens },
    #[error("re-validation too early: next allowed at tick {next}")]
    TooEarly { next: u64 },
    #[error("no profile for {0:?}")]
    UnknownDevice(PublicKey),
    #[error("device {0:?} is not active")]
    NotActive(PublicKey),
    #[error("temporary credentials cannot authenticate post-onboarding operations")]
    TemporaryCredential,
    #[error("unknown credential")]
    UnknownCredential,
    #[error(transparent)]
    Incentives(#[from] IncentiveError),
}

/// Verifies a challenge response against the network's copy of the
/// device secret.
pub trait ChallengeVerifier {
    fn verify(&self, secret: &DeviceSecret, challenge: &Challenge, response: &Digest) -> bool;
}

/// `digest(secret || nonce || statement ids as u32 BE)`.
#[derive(Clone, Copy, Debug, Default)]
pub struct KeyedDigestVerifier;

impl ChallengeVerifier for KeyedDigestVerifier {
    fn verify(&self, secret: &DeviceSecret, challenge: &Challenge, response: &Digest) -> bool {
        respond_challenge(secret, challenge) == *response
    }
}

pub fn respond_challenge(secret: &DeviceSecret, challenge: &Challenge) -> Digest {
    let ids: Vec<u8> = challenge.statements.iter().flat_map(|s| s.to_be_bytes()).collect();
    digest_parts(&[&secret.0, &challenge.nonce, &ids])
}

/// Six-digit code for a TOTP window index: dynamic truncation of
/// `digest("gdp/totp" || secret || window as u64 BE)`.
pub fn totp_code(secret: &DeviceSecret, window: u64) -> u32 {
    let d = digest_parts(&[b"gdp/totp", &secret.0, &window.to_be_bytes()]);
    let off = (d.0[31] & 0x0f) as usize;
    let bin = u32::from_be_bytes([d.0[off] & 0x7f, d.0[off + 1], d.0[off + 2], d.0[off + 3]]);
    bin % 1_000_000
}

/// The device side of a re-validation exchange.
pub trait DeviceResponder {
    fn respond(&self, challenge: &Challenge) -> Digest;
    fn totp(&self, tick: u64) -> u32;
}

/// Responder holding the device's current secret.
pub struct SecretResponder<'a> {
    pub secret: &'a DeviceSecret,
    pub totp_window: u64,
}

impl DeviceResponder for SecretResponder<'_> {
    fn respond(&self, challenge: &Challenge) -> Digest {
        respond_challenge(self.secret, challenge)
    }

    fn totp(&self, tick: u64) -> u32 {
        totp_code(self.secret, tick / self.totp_window.max(1))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeedbackEntry {
    pub tick: u64,
    pub source: PublicKey,
    pub content: String,
}

fn is_semver(v: &str) -> bool {
    let core = v.split(['-', '+']).next().unwrap_or("");
    let parts: Vec<&str> = core.split('.').collect();
    parts.len() == 3 && parts.iter().all(|p| !p.is_empty() && p.chars().all(|c| c.is_ascii_digit()))
}

pub struct OnboardingDesk<V: ChallengeVerifier = KeyedDigestVerifier> {
    pub config: OnboardingConfig,
    verifier: V,
    sessions: BTreeMap<PublicKey, OnboardingSession>,
    profiles: BTreeMap<PublicKey, DeviceProfile>,
    vault: BTreeMap<PublicKey, DeviceSecret>,
    credentials: BTreeMap<Digest, PublicKey>,
    used_nonces: BTreeSet<[u8; 16]>,
    feedback: Vec<FeedbackEntry>,
    pending_meta: BTreeMap<PublicKey, (DeviceType, String, Roles, Vec<String>)>,
}

impl OnboardingDesk<KeyedDigestVerifier> {
    pub fn new(config: OnboardingConfig) -> Self {
        Self::with_verifier(config, KeyedDigestVerifier)
    }
}

impl<V: ChallengeVerifier> OnboardingDesk<V> {
    pub fn with_verifier(config: OnboardingConfig, verifier: V) -> Self {
        Self {
            config,
            verifier,
            sessions: BTreeMap::new(),
            profiles: BTreeMap::new(),
            vault: BTreeMap::new(),
            credentials: BTreeMap::new(),
            used_nonces: BTreeSet::new(),
            feedback: Vec::new(),
            pending_meta: BTreeMap::new(),
        }
    }

    pub fn session(&self, device: &PublicKey) -> Option<&OnboardingSession> {
        self.sessions.get(device)
    }

    pub fn sessions(&self) -> impl Iterator<Item = &OnboardingSession> {
        self.sessions.values()
    }

    pub fn profile(&self, device: &PublicKey) -> Option<&DeviceProfile> {
        self.profiles.get(device)
    }

    pub fn profiles(&self) -> impl Iterator<Item = &DeviceProfile> {
        self.profiles.values()
    }

    pub fn feedback(&self) -> &[FeedbackEntry] {
        &self.feedback
    }

    fn session_mut(&mut self, device: &PublicKey) -> Result<&mut OnboardingSession, OnboardingError> {
        self.sessions.get_mut(device).ok_or(OnboardingError::UnknownSession(*device))
    }

    /// Steps 1 and 2: accept a registration and issue a temporary credential.
    pub fn submit_registration(
        &mut self,
        request: RegistrationRequest,
        tick: u64,
        rng: &mut SeededRng,
    ) -> Result<&OnboardingSession, OnboardingError> {
        let key = request.public_key;
        if self.sessions.contains_key(&key) || self.profiles.contains_key(&key) {
            return Err(OnboardingError::DuplicateDevice(key));
        }
        if self.config.blacklist.contains(&key) {
            return Err(OnboardingError::Blacklisted(key));
        }
        if request.model.trim().is_empty() {
            return Err(OnboardingError::MalformedRequest("model is empty".into()));
        }
        if !is_semver(&request.version) {
            return Err(OnboardingError::MalformedRequest(format!(
                "version {:?} is not semver",
                request.version
            )));
        }
        if !request.encrypted {
            return Err(OnboardingError::MalformedRequest("metadata must be sealed".into()));
        }
        let token = Digest(rng.bytes());
        let mut session = OnboardingSession {
            device: key,
            stage: Stage::Registered,
            temp_credential: None,
            behavior_score: None,
            started_tick: tick,
            active_challenge: None,
            mfa_failures: 0,
            history: vec![(tick, Stage::Registered)],
        };
        session.advance(Stage::TempCredentialed, tick);
        session.temp_credential = Some(TempCredential {
            token,
            expiry_tick: tick + self.config.temp_credential_ttl,
        });
        self.vault.insert(key, request.sealed_secret.clone());
        self.pending_meta.insert(
            key,
            (request.device_type, request.operator_group, request.roles, request.expertise),
        );
        self.sessions.insert(key, session);
        Ok(&self.sessions[&key])
    }

    pub fn issue_challenge(&mut self, device: &PublicKey, tick: u64, rng: &mut SeededRng) -> Result<Challenge, OnboardingError> {
        let n_statements = self.config.challenge_statements;
        let ttl = self.config.challenge_ttl;
        let session = self.sessions.get(device).ok_or(OnboardingError::UnknownSession(*device))?;
        if session.stage != Stage::TempCredentialed {
            return Err(OnboardingError::WrongStage(session.stage));
        }
        match &session.temp_credential {
            Some(c) if tick <= c.expiry_tick => {}
            _ => return Err(OnboardingError::CredentialExpired),
        }
        let challenge = self.fresh_challenge(n_statements, ttl, tick, rng);
        self.session_mut(device)?.active_challenge = Some(challenge.clone());
        Ok(challenge)
    }

    fn fresh_challenge(&mut self, n_statements: usize, ttl: u64, tick: u64, rng: &mut SeededRng) -> Challenge {
        let nonce = loop {
            let n: [u8; 16] = rng.bytes();
            if self.used_nonces.insert(n) {
                break n;
            }
        };
        let statements = (0..n_statements).map(|_| rng.next_u64() as u32).collect();
        Challenge {
            nonce,
            statements,
            issued_tick: tick,
            ttl,
        }
    }

    pub fn verify_challenge_response(&mut self, device: &PublicKey, response: &Digest, tick: u64) -> Result<bool, OnboardingError> {
        let secret = self.vault.get(device).cloned().ok_or(OnboardingError::UnknownSession(*device))?;
        let session = self.sessions.get_mut(device).ok_or(OnboardingError::UnknownSession(*device))?;
        if session.stage != Stage::TempCredentialed {
            return Err(OnboardingError::WrongStage(session.stage));
        }
        let challenge = session.active_challenge.take().ok_or(OnboardingError::NoActiveChallenge)?;
        if challenge.expired_at(tick) {
            return Err(OnboardingError::ChallengeExpired);
        }
        let ok = self.verifier.verify(&secret, &challenge, response);
        session.advance(if ok { Stage::ChallengePassed } else { Stage::Rejected }, tick);
        Ok(ok)
    }

    pub fn totp_matches(&self, secret: &DeviceSecret, code: u32, tick: u64) -> bool {
        let window = tick / self.config.totp_window.max(1);
        let lo = window.saturating_sub(self.config.totp_skew);
        let hi = window + self.config.totp_skew;
        (lo..=hi).any(|w| totp_code(secret, w) == code)
    }

    /// Failed codes may be retried up to `max_mfa_attempts` in total.
    pub fn verify_mfa(&mut self, device: &PublicKey, totp: u32, tick: u64) -> Result<bool, OnboardingError> {
        let secret = self.vault.get(device).cloned().ok_or(OnboardingError::UnknownSession(*device))?;
        let ok = self.totp_matches(&secret, totp, tick);
        let max_attempts = self.config.max_mfa_attempts;
        let session = self.session_mut(device)?;
        if session.stage != Stage::ChallengePassed {
            return Err(OnboardingError::WrongStage(session.stage));
        }
        if ok {
            session.advance(Stage::MfaPassed, tick);
        } else {
            session.mfa_failures += 1;
            if session.mfa_failures >= max_attempts {
                session.advance(Stage::Rejected, tick);
            }
        }
        Ok(ok)
    }

    pub fn score_behavior(&mut self, device: &PublicKey, trace: &[(BehaviorAction, u64)], tick: u64) -> Result<f64, OnboardingError> {
        let rules = self.config.behavior.clone();
        let session = self.session_mut(device)?;
        if session.stage != Stage::MfaPassed {
            return Err(OnboardingError::WrongStage(session.stage));
        }
        let score = rules.score(trace);
        session.behavior_score = Some(score);
        let next = if score >= rules.pass_threshold {
            Stage::BehaviorScored
        } else {
            Stage::Rejected
        };
        session.advance(next, tick);
        Ok(score)
    }

    /// Steps 6 and 7: swap temporary for permanent credentials, create
    /// the profile and escrow the stake.
    pub fn finalize_device(
        &mut self,
        device: &PublicKey,
        stake_deposit: Tokens,
        tick: u64,
        incentives: &mut IncentiveLedger,
        rng: &mut SeededRng,
    ) -> Result<&DeviceProfile, OnboardingError> {
        let min = self.config.min_stake;
        let session = self.sessions.get(device).ok_or(OnboardingError::UnknownSession(*device))?;
        if session.stage != Stage::BehaviorScored {
            return Err(OnboardingError::WrongStage(session.stage));
        }
        if stake_deposit < min {
            return Err(OnboardingError::InsufficientStake {
                need: min,
                offered: stake_deposit,
            });
        }
        incentives.open_account(*device, stake_deposit, tick)?;
        let credential = Digest(rng.bytes());
        let (device_type, operator_group, roles, expertise) =
            self.pending_meta.remove(device).expect("metadata stored at registration");
        self.session_mut(device)?.advance(Stage::Finalized, tick);
        self.credentials.insert(credential, *device);
        self.profiles.insert(
            *device,
            DeviceProfile {
                public_key: *device,
                device_type,
                onboarded_tick: tick,
                credential,
                status: DeviceStatus::Active,
                last_revalidation_tick: tick,
                operator_group,
                roles,
                expertise,
            },
        );
        Ok(&self.profiles[device])
    }

    /// Resolve a credential to its device. Temporary credentials are
    /// refused for every post-onboarding operation.
    pub fn authenticate(&self, credential: &Credential) -> Result<PublicKey, OnboardingError> {
        match credential {
            Credential::Temporary(_) => Err(OnboardingError::TemporaryCredential),
            Credential::Permanent(token) => {
                let key = self.credentials.get(token).ok_or(OnboardingError::UnknownCredential)?;
                match self.profiles.get(key) {
                    Some(p) if p.status != DeviceStatus::Banned => Ok(*key),
                    Some(_) => Err(OnboardingError::NotActive(*key)),
                    None => Err(OnboardingError::UnknownCredential),
                }
            }
        }
    }

    /// Re-run challenge and TOTP against whatever secret the device holds
    /// now. `force` skips the period check (used by random inspections).
    pub fn revalidate_device(
        &mut self,
        device: &PublicKey,
        tick: u64,
        responder: &dyn DeviceResponder,
        rng: &mut SeededRng,
        force: bool,
    ) -> Result<bool, OnboardingError> {
        let period = self.config.revalidation_period;
        let profile = self.profiles.get(device).ok_or(OnboardingError::UnknownDevice(*device))?;
        if profile.status != DeviceStatus::Active {
            return Err(OnboardingError::NotActive(*device));
        }
        if !force && tick < profile.last_revalidation_tick + period {
            return Err(OnboardingError::TooEarly {
                next: profile.last_revalidation_tick + period,
            });
        }
        let secret = self.vault.get(device).cloned().ok_or(OnboardingError::UnknownDevice(*device))?;
        let challenge = self.fresh_challenge(self.config.challenge_statements, self.config.challenge_ttl, tick, rng);
        let proof_ok = self.verifier.verify(&secret, &challenge, &responder.respond(&challenge));
        let totp_ok = self.totp_matches(&secret, responder.totp(tick), tick);
        let profile = self.profiles.get_mut(device).expect("checked above");
        if proof_ok && totp_ok {
            profile.last_revalidation_tick = tick;
            Ok(true)
        } else {
            profile.status = DeviceStatus::Quarantined;
            Ok(false)
        }
    }

    pub fn record_feedback(&mut self, source: PublicKey, content: impl Into<String>, tick: u64) -> usize {
        self.feedback.push(FeedbackEntry {
            tick,
            source,
            content: content.into(),
        });
        self.feedback.len()
    }

    pub fn set_status(&mut self, device: &PublicKey, status: DeviceStatus) -> Result<DeviceStatus, OnboardingError> {
        let p = self.profiles.get_mut(device).ok_or(OnboardingError::UnknownDevice(*device))?;
        let old = p.status;
        // Bans are final.
        if old != DeviceStatus::Banned {
            p.status = status;
        }
        Ok(old)
    }

    /// Profiles whose session history skipped a mandatory stage or was
    /// ever rejected. Empty when the invariant holds.
    pub fn audit_profiles(&self) -> Vec<PublicKey> {
        self.profiles
            .keys()
            .filter(|k| match self.sessions.get(k) {
                None => true,
                Some(s) => {
                    ![Stage::ChallengePassed, Stage::MfaPassed, Stage::BehaviorScored, Stage::Finalized]
                        .iter()
                        .all(|st| s.passed_through(*st))
                        || s.passed_through(Stage::Rejected)
                        || s.history.windows(2).any(|w| w[1].1 <= w[0].1)
                }
            })
            .copied()
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::incentives::IncentiveConfig;

    struct Dev {
        key: PublicKey,
        secret: DeviceSecret,
    }

    fn dev(b: u8) -> Dev {
        Dev {
            key: PublicKey([b; 32]),
            secret: DeviceSecret([b.wrapping_add(100); 32]),
        }
    }

    fn request(d: &Dev) -> RegistrationRequest {
        RegistrationRequest {
            device_type: DeviceType::Sensor,
            model: "th-100".into(),
            version: "1.2.3".into(),
            public_key: d.key,
            encrypted: true,
            sealed_secret: d.secret.clone(),
            operator_group: "op-a".into(),
            roles: Roles {
                client: true,
                ..Default::default()
            },
            expertise: vec![],
        }
    }

    fn good_trace() -> Vec<(BehaviorAction, u64)> {
        vec![
            (BehaviorAction::Register, 0),
            (BehaviorAction::ChallengeIssued, 1),
            (BehaviorAction::ChallengeAnswered, 2),
            (BehaviorAction::MfaSubmitted, 3),
        ]
    }

    fn desk() -> (OnboardingDesk, SeededRng) {
        (OnboardingDesk::new(OnboardingConfig::default()), SeededRng::new(11))
    }

    /// Drive a device up to BehaviorScored.
    fn to_scored(desk: &mut OnboardingDesk, rng: &mut SeededRng, d: &Dev) {
        desk.submit_registration(request(d), 0, rng).unwrap();
        let ch = desk.issue_challenge(&d.key, 1, rng).unwrap();
        assert!(desk.verify_challenge_response(&d.key, &respond_challenge(&d.secret, &ch), 2).unwrap());
        assert!(desk.verify_mfa(&d.key, totp_code(&d.secret, 3 / 30), 3).unwrap());
        assert_eq!(desk.score_behavior(&d.key, &good_trace(), 4).unwrap(), 1.0);
    }

    #[test]
    fn registration_happy_path_and_errors() {
        let (mut desk, mut rng) = desk();
        let d = dev(1);
        let s = desk.submit_registration(request(&d), 5, &mut rng).unwrap();
        assert_eq!(s.stage, Stage::TempCredentialed);
        assert_eq!(s.temp_credential.as_ref().unwrap().expiry_tick, 55);
        assert_eq!(
            desk.submit_registration(request(&d), 6, &mut rng).unwrap_err(),
            OnboardingError::DuplicateDevice(d.key)
        );
        let mut bad = request(&dev(2));
        bad.model.clear();
        assert!(matches!(
            desk.submit_registration(bad, 6, &mut rng),
            Err(OnboardingError::MalformedRequest(_))
        ));
        let mut bad = request(&dev(3));
        bad.version = "one".into();
        assert!(matches!(
            desk.submit_registration(bad, 6, &mut rng),
            Err(OnboardingError::MalformedRequest(_))
        ));
    }

    #[test]
    fn blacklisted_device_is_refused() {
        let d = dev(1);
        let mut desk = OnboardingDesk::new(OnboardingConfig {
            blacklist: vec![d.key],
            ..Default::default()
        });
        assert_eq!(
            desk.submit_registration(request(&d), 0, &mut SeededRng::new(1)).unwrap_err(),
            OnboardingError::Blacklisted(d.key)
        );
    }

    #[test]
    fn challenge_stage_and_expiry() {
        let (mut desk, mut rng) = desk();
        let d = dev(1);
        desk.submit_registration(request(&d), 0, &mut rng).unwrap();
        let a = desk.issue_challenge(&d.key, 1, &mut rng).unwrap();
        let b = desk.issue_challenge(&d.key, 2, &mut rng).unwrap();
        assert_ne!(a.nonce, b.nonce);
        assert_eq!(b.ttl, 10);
        assert_eq!(
            desk.issue_challenge(&d.key, 51, &mut rng).unwrap_err(),
            OnboardingError::CredentialExpired
        );

        let e = dev(2);
        let (mut desk2, mut rng2) = self::desk();
        to_scored(&mut desk2, &mut rng2, &e);
        let mut ledger = IncentiveLedger::new(IncentiveConfig::default());
        desk2.finalize_device(&e.key, Tokens::whole(100), 5, &mut ledger, &mut rng2).unwrap();
        assert_eq!(
            desk2.issue_challenge(&e.key, 6, &mut rng2).unwrap_err(),
            OnboardingError::WrongStage(Stage::Finalized)
        );
    }

    #[test]
    fn challenge_response_outcomes() {
        let (mut desk, mut rng) = desk();
        let d = dev(1);
        desk.submit_registration(request(&d), 0, &mut rng).unwrap();
        assert_eq!(
            desk.verify_challenge_response(&d.key, &Digest::ZERO, 1).unwrap_err(),
            OnboardingError::NoActiveChallenge
        );
        let ch = desk.issue_challenge(&d.key, 1, &mut rng).unwrap();
        assert_eq!(
            desk.verify_challenge_response(&d.key, &respond_challenge(&d.secret, &ch), 12).unwrap_err(),
            OnboardingError::ChallengeExpired
        );

        let e = dev(2);
        desk.submit_registration(request(&e), 0, &mut rng).unwrap();
        desk.issue_challenge(&e.key, 1, &mut rng).unwrap();
        let random = Digest(rng.bytes());
        assert!(!desk.verify_challenge_response(&e.key, &random, 2).unwrap());
        assert_eq!(desk.session(&e.key).unwrap().stage, Stage::Rejected);
    }

    #[test]
    fn replayed_response_fails() {
        let (mut desk, mut rng) = desk();
        let d = dev(1);
        desk.submit_registration(request(&d), 0, &mut rng).unwrap();
        let old = desk.issue_challenge(&d.key, 1, &mut rng).unwrap();
        let old_answer = respond_challenge(&d.secret, &old);
        // Re-issue, then replay the answer to the superseded nonce.
        let fresh = desk.issue_challenge(&d.key, 2, &mut rng).unwrap();
        assert_ne!(respond_challenge(&d.secret, &fresh), old_answer);
        assert!(!desk.verify_challenge_response(&d.key, &old_answer, 3).unwrap());
        assert_eq!(desk.session(&d.key).unwrap().stage, Stage::Rejected);
    }

    #[test]
    fn totp_window_slack() {
        let (mut desk, mut rng) = desk();
        let d = dev(1);
        desk.submit_registration(request(&d), 0, &mut rng).unwrap();
        let ch = desk.issue_challenge(&d.key, 1, &mut rng).unwrap();
        desk.verify_challenge_response(&d.key, &respond_challenge(&d.secret, &ch), 2).unwrap();
        let tick = 95; // window 3
        // Oracle: windows recomputed directly from the derivation.
        let current = totp_code(&d.secret, 3);
        let minus_one = totp_code(&d.secret, 2);
        let minus_two = totp_code(&d.secret, 1);
        assert!(desk.totp_matches(&d.secret, current, tick));
        assert!(desk.totp_matches(&d.secret, minus_one, tick));
        if minus_two != current && minus_two != minus_one && minus_two != totp_code(&d.secret, 4) {
            assert!(!desk.totp_matches(&d.secret, minus_two, tick));
            assert!(!desk.verify_mfa(&d.key, minus_two, tick).unwrap());
            assert_eq!(desk.session(&d.key).unwrap().stage, Stage::ChallengePassed);
        }
        assert!(desk.verify_mfa(&d.key, minus_one, tick).unwrap());
        assert_eq!(desk.session(&d.key).unwrap().stage, Stage::MfaPassed);
    }

    #[test]
    fn repeated_mfa_failures_reject() {
        let (mut desk, mut rng) = desk();
        let d = dev(1);
        desk.submit_registration(request(&d), 0, &mut rng).unwrap();
        let ch = desk.issue_challenge(&d.key, 1, &mut rng).unwrap();
        desk.verify_challenge_response(&d.key, &respond_challenge(&d.secret, &ch), 2).unwrap();
        let wrong = (totp_code(&d.secret, 0) + 1) % 1_000_000;
        for _ in 0..3 {
            let _ = desk.verify_mfa(&d.key, wrong, 3);
        }
        assert_eq!(desk.session(&d.key).unwrap().stage, Stage::Rejected);
    }

    #[test]
    fn behavior_checklist_scores() {
        let rules = BehaviorRules::default();
        assert_eq!(rules.score(&good_trace()), 1.0);
        // Fails every rule: no latency pair, too many retries, out of
        // order, and a burst of 6 in one tick.
        let mut bad = vec![(BehaviorAction::Retry, 9); 6];
        bad.push((BehaviorAction::Heartbeat, 1));
        assert_eq!(rules.score(&bad), 0.0);
        // Fails retries and latency only: exactly half the weight.
        let half = vec![
            (BehaviorAction::ChallengeIssued, 1),
            (BehaviorAction::ChallengeAnswered, 20),
            (BehaviorAction::Retry, 21),
            (BehaviorAction::Retry, 22),
            (BehaviorAction::Retry, 23),
        ];
        assert_eq!(rules.score(&half), 0.5);
    }

    #[test]
    fn behavior_threshold_is_inclusive_and_rejects_below() {
        let (mut desk, mut rng) = desk();
        let d = dev(1);
        desk.submit_registration(request(&d), 0, &mut rng).unwrap();
        let ch = desk.issue_challenge(&d.key, 1, &mut rng).unwrap();
        desk.verify_challenge_response(&d.key, &respond_challenge(&d.secret, &ch), 2).unwrap();
        desk.verify_mfa(&d.key, totp_code(&d.secret, 0), 3).unwrap();
        let half = vec![
            (BehaviorAction::ChallengeIssued, 1),
            (BehaviorAction::ChallengeAnswered, 20),
            (BehaviorAction::Retry, 21),
            (BehaviorAction::Retry, 22),
            (BehaviorAction::Retry, 23),
        ];
        assert_eq!(desk.score_behavior(&d.key, &half, 4).unwrap(), 0.5);
        assert_eq!(desk.session(&d.key).unwrap().stage, Stage::BehaviorScored);

        let e = dev(2);
        desk.submit_registration(request(&e), 0, &mut rng).unwrap();
        let ch = desk.issue_challenge(&e.key, 1, &mut rng).unwrap();
        desk.verify_challenge_response(&e.key, &respond_challenge(&e.secret, &ch), 2).unwrap();
        desk.verify_mfa(&e.key, totp_code(&e.secret, 0), 3).unwrap();
        let mut bad = vec![(BehaviorAction::Retry, 9); 6];
        bad.push((BehaviorAction::Heartbeat, 1));
        assert_eq!(desk.score_behavior(&e.key, &bad, 4).unwrap(), 0.0);
        assert_eq!(desk.session(&e.key).unwrap().stage, Stage::Rejected);
    }

    #[test]
    fn finalize_requires_minimum_stake() {
        let (mut desk, mut rng) = desk();
        let mut ledger = IncentiveLedger::new(IncentiveConfig::default());
        let d = dev(1);
        to_scored(&mut desk, &mut rng, &d);
        assert!(matches!(
            desk.finalize_device(&d.key, Tokens::whole(99), 5, &mut ledger, &mut rng),
            Err(OnboardingError::InsufficientStake { .. })
        ));
        let p = desk.finalize_device(&d.key, Tokens::whole(100), 5, &mut ledger, &mut rng).unwrap();
        assert_eq!(p.status, DeviceStatus::Active);
        assert_eq!(p.onboarded_tick, 5);
        assert_eq!(ledger.staked(&d.key), Tokens::whole(100));
        let s = desk.session(&d.key).unwrap();
        assert_eq!(s.stage, Stage::Finalized);
        assert!(s.temp_credential.is_none());
        assert!(desk.audit_profiles().is_empty());
    }

    #[test]
    fn rejected_session_never_finalizes() {
        let (mut desk, mut rng) = desk();
        let mut ledger = IncentiveLedger::new(IncentiveConfig::default());
        let d = dev(1);
        desk.submit_registration(request(&d), 0, &mut rng).unwrap();
        desk.issue_challenge(&d.key, 1, &mut rng).unwrap();
        desk.verify_challenge_response(&d.key, &Digest::ZERO, 2).unwrap();
        assert_eq!(
            desk.finalize_device(&d.key, Tokens::whole(500), 3, &mut ledger, &mut rng).unwrap_err(),
            OnboardingError::WrongStage(Stage::Rejected)
        );
        assert!(desk.profile(&d.key).is_none());
    }

    #[test]
    fn temporary_credentials_never_authenticate() {
        let (mut desk, mut rng) = desk();
        let mut ledger = IncentiveLedger::new(IncentiveConfig::default());
        let d = dev(1);
        desk.submit_registration(request(&d), 0, &mut rng).unwrap();
        let temp = desk.session(&d.key).unwrap().temp_credential.clone().unwrap();
        assert_eq!(
            desk.authenticate(&Credential::Temporary(temp.token)).unwrap_err(),
            OnboardingError::TemporaryCredential
        );
        // Presenting the temp token as if permanent does not work either.
        assert_eq!(
            desk.authenticate(&Credential::Permanent(temp.token)).unwrap_err(),
            OnboardingError::UnknownCredential
        );
        let ch = desk.issue_challenge(&d.key, 1, &mut rng).unwrap();
        desk.verify_challenge_response(&d.key, &respond_challenge(&d.secret, &ch), 2).unwrap();
        desk.verify_mfa(&d.key, totp_code(&d.secret, 0), 3).unwrap();
        desk.score_behavior(&d.key, &good_trace(), 4).unwrap();
        let cred = desk.finalize_device(&d.key, Tokens::whole(100), 5, &mut ledger, &mut rng).unwrap().credential;
        assert_eq!(desk.authenticate(&Credential::Permanent(cred)).unwrap(), d.key);
    }

    #[test]
    fn revalidation_period_and_key_swap() {
        let (mut desk, mut rng) = desk();
        let mut ledger = IncentiveLedger::new(IncentiveConfig::default());
        let d = dev(1);
        to_scored(&mut desk, &mut rng, &d);
        desk.finalize_device(&d.key, Tokens::whole(100), 10, &mut ledger, &mut rng).unwrap();
        let honest = SecretResponder {
            secret: &d.secret,
            totp_window: 30,
        };
        assert_eq!(
            desk.revalidate_device(&d.key, 509, &honest, &mut rng, false).unwrap_err(),
            OnboardingError::TooEarly { next: 510 }
        );
        assert!(desk.revalidate_device(&d.key, 510, &honest, &mut rng, false).unwrap());
        assert_eq!(desk.profile(&d.key).unwrap().last_revalidation_tick, 510);

        let swapped = DeviceSecret([7; 32]);
        let attacker = SecretResponder {
            secret: &swapped,
            totp_window: 30,
        };
        assert!(!desk.revalidate_device(&d.key, 1010, &attacker, &mut rng, false).unwrap());
        assert_eq!(desk.profile(&d.key).unwrap().status, DeviceStatus::Quarantined);
    }

    #[test]
    fn feedback_log_appends_in_order() {
        let (mut desk, _) = desk();
        let a = PublicKey([1; 32]);
        assert_eq!(desk.record_feedback(a, "slow challenge", 3), 1);
        assert_eq!(desk.record_feedback(a, "", 3), 2);
        assert_eq!(desk.feedback()[0].content, "slow challenge");
        assert_eq!(desk.feedback()[1].content, "");
    }

    #[test]
    fn semver_parsing() {
        assert!(is_semver("1.0.0"));
        assert!(is_semver("10.2.33-beta+x"));
        assert!(!is_semver("1.0"));
        assert!(!is_semver("1..0"));
        assert!(!is_semver(""));
    }
}
