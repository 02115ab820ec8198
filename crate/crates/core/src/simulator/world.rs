//! The deterministic world loop: actors, adversary policies and the
//! per-tick protocol flow.

use std::collections::{BTreeMap, BTreeSet};

use crate::anomaly::{investigate, AlertKind, AnomalyAlert, QuarantineRegistry, StreamBaseline};
use crate::arbitration::{Claim, DisputeRegistry, DisputeStage, Participant, ParticipantStatus, Party, PartyRole};
use crate::consensus::{
    propose_block, proposer_for_round, resolve_vote_conflict, synchronize, tally_votes, validate_proposal, vote_weights, Ledger,
    LedgerBlock, LedgerEntry, MempoolEntry, Proposal, ProposalProblem, Vote,
};
use crate::incentives::{Cause, IncentiveKind, IncentiveLedger, Severity, Standing, Tokens};
use crate::onboarding::{
    respond_challenge, totp_code, BehaviorAction, DeviceSecret, DeviceStatus, DeviceType, OnboardingDesk, OnboardingError,
    RegistrationRequest, Roles, SecretResponder,
};
use crate::primitives::{digest_parts, CanonicalHasher, Digest, KeyPair, PublicKey, SeededRng};
use crate::stochastic::{
    challenge_proposer, deep_inspect_transaction, pick_random_validators, random_commit_delay, should_inspect, solve_puzzle,
    verify_sync_integrity, Enforcement, InspectionOutcome, TargetKind,
};
use crate::transmission::{
    select_witnesses, Attestation, DataTransaction, Escalation, Judgement, TransmissionError, TxnId, TxnStatus, WitnessCandidate,
    WitnessOutcome,
};

use super::config::{AdversarySpec, ConfigError, ScenarioConfig};
use super::events::{clamp_score, Event, EventKind, Refusal, WeightAudit};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SimError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("honest device {device} failed onboarding: {reason}")]
    HonestOnboarding { device: String, reason: String },
}

/// Per-actor policy hook.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Behavior {
    Honest,
    Tampering { rate: f64 },
    Colluding,
    Lazy { skip_rate: f64 },
    Equivocating { rate: f64 },
    ForgedSync,
    Sybil,
}

impl Behavior {
    pub fn adversarial(self) -> bool {
        self != Behavior::Honest
    }
}

#[derive(Clone, Debug)]
pub struct Actor {
    pub keypair: KeyPair,
    pub secret: DeviceSecret,
    pub roles: Roles,
    pub group: String,
    pub behavior: Behavior,
    pub cohort: String,
    pub payload_mean: f64,
    pub stake: Tokens,
    pub in_flight: Option<TxnId>,
}

impl Actor {
    pub fn key(&self) -> PublicKey {
        self.keypair.public_key
    }
}

#[derive(Clone, Debug)]
struct WitnessPlan {
    salt: [u8; 16],
    reveal: Judgement,
}

#[derive(Clone, Debug)]
struct TxnInfo {
    /// Digest of the payload as actually delivered.
    observed: Digest,
    plans: BTreeMap<PublicKey, WitnessPlan>,
}

#[derive(Clone, Debug)]
struct InFlightBlock {
    proposal: Proposal,
    votes: Vec<Vote>,
    audits: Vec<WeightAudit>,
    commit_at: u64,
}

#[derive(Clone, Copy, Debug)]
struct DisputeContext {
    /// What the protocol-visible evidence shows.
    evidence_fault: bool,
    adversarial_respondent: bool,
}

struct Streams {
    arrivals: SeededRng,
    payload: SeededRng,
    panels: SeededRng,
    salts: SeededRng,
    consensus: SeededRng,
    onboarding: SeededRng,
    arbitration: SeededRng,
    adversary: SeededRng,
    sync: SeededRng,
}

impl Streams {
    fn new(seed: u64) -> Self {
        let s = |label: &str| SeededRng::keyed(seed, label, &[]);
        Self {
            arrivals: s("arrivals"),
            payload: s("payload"),
            panels: s("panels"),
            salts: s("salts"),
            consensus: s("consensus"),
            onboarding: s("onboarding"),
            arbitration: s("arbitration"),
            adversary: s("adversary"),
            sync: s("sync"),
        }
    }
}

fn normal(rng: &mut SeededRng, mean: f64, sd: f64) -> f64 {
    let u1 = rng.next_f64_open0();
    let u2 = rng.next_f64();
    mean + sd * (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

fn poisson_like(rng: &mut SeededRng, rate: f64) -> u64 {
    rate.floor() as u64 + u64::from(rng.bernoulli(rate.fract()))
}

pub struct World {
    pub config: ScenarioConfig,
    tick: u64,
    actors: Vec<Actor>,
    by_key: BTreeMap<PublicKey, usize>,
    desk: OnboardingDesk,
    incentives: IncentiveLedger,
    incentive_cursor: usize,
    quarantine: QuarantineRegistry,
    disputes: DisputeRegistry,
    dispute_ctx: BTreeMap<u64, DisputeContext>,
    disputed_events: BTreeSet<usize>,
    txns: BTreeMap<TxnId, DataTransaction>,
    txn_info: BTreeMap<TxnId, TxnInfo>,
    pending: BTreeSet<TxnId>,
    awaiting_panel: BTreeSet<TxnId>,
    mempool: BTreeSet<TxnId>,
    directory: BTreeMap<TxnId, LedgerEntry>,
    chain: Ledger,
    nodes: BTreeMap<PublicKey, Ledger>,
    validator_keys: BTreeSet<PublicKey>,
    in_flight_block: Option<InFlightBlock>,
    round: u64,
    baselines: BTreeMap<String, StreamBaseline<f64>>,
    pending_alerts: Vec<AnomalyAlert<f64>>,
    volume_this_tick: u64,
    accepted_submissions: u64,
    epoch_contrib: BTreeMap<PublicKey, u64>,
    compromised: BTreeMap<PublicKey, u64>,
    log: Vec<Event>,
    streams: Streams,
    invert_truth: bool,
}

impl World {
    /// Validate the config, create every actor and run all of them through
    /// onboarding at tick 0.
    pub fn build(config: ScenarioConfig) -> Result<World, SimError> {
        config.validate()?;
        let seed = config.seed;
        let mut w = World {
            desk: OnboardingDesk::new(config.onboarding.clone()),
            incentives: IncentiveLedger::new(config.incentives.clone()),
            disputes: DisputeRegistry::new(config.arbitration.clone()),
            config,
            tick: 0,
            actors: Vec::new(),
            by_key: BTreeMap::new(),
            incentive_cursor: 0,
            quarantine: QuarantineRegistry::default(),
            dispute_ctx: BTreeMap::new(),
            disputed_events: BTreeSet::new(),
            txns: BTreeMap::new(),
            txn_info: BTreeMap::new(),
            pending: BTreeSet::new(),
            awaiting_panel: BTreeSet::new(),
            mempool: BTreeSet::new(),
            directory: BTreeMap::new(),
            chain: Ledger::new(),
            nodes: BTreeMap::new(),
            validator_keys: BTreeSet::new(),
            in_flight_block: None,
            round: 0,
            baselines: BTreeMap::new(),
            pending_alerts: Vec::new(),
            volume_this_tick: 0,
            accepted_submissions: 0,
            epoch_contrib: BTreeMap::new(),
            compromised: BTreeMap::new(),
            log: Vec::new(),
            streams: Streams::new(seed),
            invert_truth: false,
        };

        let cfg = w.config.clone();
        let stake = cfg.honest_stake;
        let client = Roles {
            client: true,
            ..Roles::default()
        };
        let witness = Roles {
            witness: true,
            arbitrator: true,
            ..Roles::default()
        };
        let validator = Roles {
            validator: true,
            arbitrator: true,
            ..Roles::default()
        };
        for i in 0..cfg.n_honest_devices {
            w.add_actor(client, format!("client-{i}"), Behavior::Honest, "honest_client", stake);
        }
        for i in 0..cfg.n_witness_pool {
            let group = if cfg.witness_groups == 0 {
                format!("witness-{i}")
            } else {
                format!("group-{}", i % cfg.witness_groups)
            };
            w.add_actor(witness, group, Behavior::Honest, "honest_witness", stake);
        }
        for i in 0..cfg.n_validators {
            w.add_actor(validator, format!("validator-{i}"), Behavior::Honest, "honest_validator", stake);
        }
        for (a, spec) in cfg.adversaries.iter().enumerate() {
            let kind = spec.kind_name();
            for j in 0..spec.count() {
                let added = match *spec {
                    AdversarySpec::TamperingSender { tamper_rate, .. } => Some(w.add_actor(
                        client,
                        format!("tamper-{a}-{j}"),
                        Behavior::Tampering { rate: tamper_rate },
                        kind,
                        stake,
                    )),
                    AdversarySpec::ColludingWitnesses { count, groups } => {
                        let g = groups.unwrap_or(count).max(1);
                        Some(w.add_actor(witness, format!("ring-{a}-{}", j % g), Behavior::Colluding, kind, stake))
                    }
                    AdversarySpec::LazyWitness { skip_rate, .. } => {
                        Some(w.add_actor(witness, format!("lazy-{a}-{j}"), Behavior::Lazy { skip_rate }, kind, stake))
                    }
                    AdversarySpec::EquivocatingWitness { rate, .. } => Some(w.add_actor(
                        witness,
                        format!("equiv-{a}-{j}"),
                        Behavior::Equivocating { rate },
                        kind,
                        stake,
                    )),
                    AdversarySpec::ForgedSyncNode { .. } => {
                        Some(w.add_actor(validator, format!("forged-{a}-{j}"), Behavior::ForgedSync, kind, stake))
                    }
                    AdversarySpec::SybilFlood { .. } | AdversarySpec::KeyCompromise { .. } => None,
                };
                if let Some(idx) = added {
                    let device = w.actors[idx].key();
                    w.emit(EventKind::AdversaryAssigned {
                        device,
                        kind: kind.to_string(),
                    });
                }
            }
        }
        for idx in 0..w.actors.len() {
            if let Err(reason) = w.onboard(idx, 0) {
                if !w.actors[idx].behavior.adversarial() {
                    return Err(SimError::HonestOnboarding {
                        device: w.actors[idx].key().to_hex(),
                        reason,
                    });
                }
            }
        }
        w.flush_incentives();
        Ok(w)
    }

    fn add_actor(&mut self, roles: Roles, group: String, behavior: Behavior, cohort: &str, stake: Tokens) -> usize {
        let idx = self.actors.len();
        let mut rng = SeededRng::keyed(self.config.seed, "actor", &[&(idx as u64).to_be_bytes()]);
        let keypair = KeyPair::generate(&mut rng);
        let secret = DeviceSecret(rng.bytes());
        let p = &self.config.payload;
        let payload_mean = normal(&mut rng, p.mean, p.device_spread).max(4.0 * p.sd);
        self.by_key.insert(keypair.public_key, idx);
        self.actors.push(Actor {
            keypair,
            secret,
            roles,
            group,
            behavior,
            cohort: cohort.to_string(),
            payload_mean,
            stake,
            in_flight: None,
        });
        idx
    }

    // ---- accessors -------------------------------------------------------

    pub fn tick(&self) -> u64 {
        self.tick
    }

    pub fn log(&self) -> &[Event] {
        &self.log
    }

    pub fn actors(&self) -> &[Actor] {
        &self.actors
    }

    pub fn actor(&self, key: &PublicKey) -> Option<&Actor> {
        self.by_key.get(key).map(|&i| &self.actors[i])
    }

    pub fn desk(&self) -> &OnboardingDesk {
        &self.desk
    }

    pub fn incentives(&self) -> &IncentiveLedger {
        &self.incentives
    }

    pub fn quarantine_registry(&self) -> &QuarantineRegistry {
        &self.quarantine
    }

    pub fn dispute_registry(&self) -> &DisputeRegistry {
        &self.disputes
    }

    pub fn chain(&self) -> &Ledger {
        &self.chain
    }

    /// Per-validator ledger copies.
    pub fn node_ledgers(&self) -> &BTreeMap<PublicKey, Ledger> {
        &self.nodes
    }

    pub fn transactions(&self) -> &BTreeMap<TxnId, DataTransaction> {
        &self.txns
    }

    pub fn directory(&self) -> &BTreeMap<TxnId, LedgerEntry> {
        &self.directory
    }

    pub fn validator_keys(&self) -> &BTreeSet<PublicKey> {
        &self.validator_keys
    }

    pub fn baselines(&self) -> &BTreeMap<String, StreamBaseline<f64>> {
        &self.baselines
    }

    /// Invert every ground-truth label the world records. Protocol
    /// decisions must not change; used to audit the closed-world property.
    #[doc(hidden)]
    pub fn invert_ground_truth(&mut self) {
        self.invert_truth = true;
    }

    fn arrivals_exhausted(&self) -> bool {
        let cutoff = self.config.duration_ticks.saturating_sub(self.config.drain_ticks);
        self.tick >= cutoff || self.config.max_transactions.is_some_and(|m| self.accepted_submissions >= m)
    }

    /// No arrivals left and nothing in the witnessing or consensus pipeline.
    pub fn quiescent(&self) -> bool {
        self.arrivals_exhausted() && self.pending.is_empty() && self.mempool.is_empty() && self.in_flight_block.is_none()
    }

    pub fn finished(&self) -> bool {
        self.tick >= self.config.duration_ticks || (self.config.max_transactions.is_some() && self.quiescent())
    }

    // ---- bookkeeping helpers ----------------------------------------------

    fn emit(&mut self, kind: EventKind) -> usize {
        self.log.push(Event { tick: self.tick, kind });
        self.log.len() - 1
    }

    fn flush_incentives(&mut self) {
        let events = self.incentives.events();
        let fresh: Vec<_> = events[self.incentive_cursor..].to_vec();
        self.incentive_cursor = events.len();
        for event in fresh {
            self.log.push(Event {
                tick: event.tick,
                kind: EventKind::Incentive { event },
            });
        }
    }

    fn status(&self, key: &PublicKey) -> Option<DeviceStatus> {
        self.desk.profile(key).map(|p| p.status)
    }

    /// Active profile, good standing, not quarantined.
    fn eligible(&self, key: &PublicKey) -> bool {
        self.status(key) == Some(DeviceStatus::Active)
            && self.incentives.standing(key) == Standing::Good
            && !self.quarantine.is_quarantined(key)
    }

    fn behavior(&self, key: &PublicKey) -> Behavior {
        self.actor(key).map_or(Behavior::Honest, |a| a.behavior)
    }

    fn set_status(&mut self, key: &PublicKey, to: DeviceStatus) {
        if let Ok(from) = self.desk.set_status(key, to) {
            let now = self.status(key).expect("profile exists");
            if now != from {
                self.emit(EventKind::StatusChanged { device: *key, from, to: now });
            }
        }
    }

    fn quarantine(&mut self, key: &PublicKey, reason: &str) {
        if self.status(key).is_none() || self.status(key) == Some(DeviceStatus::Banned) {
            return;
        }
        if self.quarantine.quarantine(*key, reason, self.tick).is_ok() {
            self.emit(EventKind::Quarantined {
                device: *key,
                reason: reason.to_string(),
            });
            self.set_status(key, DeviceStatus::Quarantined);
        }
    }

    fn release(&mut self, key: &PublicKey) {
        if self.quarantine.release(key, self.tick).is_ok() {
            self.emit(EventKind::Released { device: *key });
            self.set_status(key, DeviceStatus::Active);
        }
    }

    fn penalize(&mut self, key: &PublicKey, severity: Severity, cause: Cause) {
        let events = self.incentives.apply_penalty(key, severity, cause, self.tick);
        if events.iter().any(|e| e.kind == IncentiveKind::PermBan) {
            self.set_status(key, DeviceStatus::Banned);
        }
    }

    fn reward(&mut self, key: &PublicKey, cause: Cause) {
        let _ = self.incentives.apply_performance_reward(key, cause, self.tick);
    }

    fn category(&self, key: &PublicKey) -> &'static str {
        match self.actor(key).map(|a| a.roles) {
            Some(r) if r.witness => "witnessing",
            Some(r) if r.validator => "consensus",
            _ => "device",
        }
    }

    fn participants(&self) -> Vec<Participant> {
        self.desk
            .profiles()
            .map(|p| {
                let k = p.public_key;
                let standing = self.incentives.standing(&k);
                let status = if p.status == DeviceStatus::Banned || standing == Standing::PermBanned {
                    ParticipantStatus::Banned
                } else if p.status == DeviceStatus::Quarantined
                    || self.quarantine.is_quarantined(&k)
                    || standing != Standing::Good
                {
                    ParticipantStatus::Quarantined
                } else {
                    ParticipantStatus::Active
                };
                Participant {
                    key: k,
                    reputation: self.incentives.score(&k),
                    stake: self.incentives.staked(&k).as_f64(),
                    operator_group: p.operator_group.clone(),
                    expertise: p.expertise.clone(),
                    arbitrator: p.roles.arbitrator,
                    status,
                }
            })
            .collect()
    }

    fn open_dispute(&mut self, respondents: Vec<PublicKey>, category: &str, events: Vec<u64>, txn: Option<TxnId>, evidence_fault: bool) {
        let mut respondents: Vec<PublicKey> = respondents
            .into_iter()
            .filter(|k| self.status(k).is_some_and(|s| s != DeviceStatus::Banned))
            .collect();
        respondents.sort();
        respondents.dedup();
        if respondents.is_empty() {
            return;
        }
        let participants = self.participants();
        let parties = respondents
            .iter()
            .map(|k| Party {
                key: *k,
                role: PartyRole::Respondent,
            })
            .collect();
        let claim = Claim {
            category: category.to_string(),
            events,
            txn,
        };
        let log_len = self.log.len() as u64;
        let tick = self.tick;
        match self
            .disputes
            .open_dispute(parties, claim, log_len, &participants, &mut self.streams.arbitration, tick)
        {
            Ok(d) => {
                let id = d.id;
                let adversarial_respondent = respondents.iter().any(|k| self.behavior(k).adversarial());
                self.dispute_ctx.insert(
                    id,
                    DisputeContext {
                        evidence_fault,
                        adversarial_respondent,
                    },
                );
                self.emit(EventKind::DisputeOpened {
                    dispute: id,
                    respondents,
                    complainants: Vec::new(),
                    category: category.to_string(),
                    txn,
                });
            }
            Err(e) => {
                self.emit(EventKind::DisputeRefused {
                    respondents,
                    reason: e.to_string(),
                });
            }
        }
    }

    /// Route a failed inspection: enforcement quarantines and opens a
    /// dispute, audit mode only investigates.
    fn route_failure(&mut self, subject: PublicKey, event_idx: usize, txn: Option<TxnId>) {
        match self.config.inspection.enforcement {
            Enforcement::Enforce => {
                self.disputed_events.insert(event_idx);
                self.quarantine(&subject, "inspection");
                let cat = self.category(&subject);
                self.open_dispute(vec![subject], cat, vec![event_idx as u64], txn, true);
            }
            Enforcement::AuditOnly => self.audit(subject, "inspection"),
        }
    }

    /// Investigation without enforcement.
    fn audit(&mut self, subject: PublicKey, stream: &str) {
        let alert = AnomalyAlert {
            stream_id: stream.to_string(),
            tick: self.tick,
            value: 0.0,
            z_score: 0.0,
            kind: AlertKind::PointOutlier,
            subject: Some(subject),
        };
        self.investigate_alert(&alert);
    }

    fn investigate_alert(&mut self, alert: &AnomalyAlert<f64>) -> Vec<(u64, crate::anomaly::ViolationKind)> {
        let radius = self.config.anomaly.investigate_radius;
        let from = alert.tick.saturating_sub(radius);
        let lo = self.log.partition_point(|e| e.tick < from);
        let report = investigate(&self.log[lo..], alert, radius);
        let violations: Vec<_> = report.violations.iter().map(|&(i, v)| ((i + lo) as u64, v)).collect();
        self.emit(EventKind::Investigated {
            stream: alert.stream_id.clone(),
            subject: alert.subject,
            from: report.from_tick,
            to: report.to_tick,
            events: report.events.len(),
            violations: violations.clone(),
        });
        violations
    }

    fn ingest(&mut self, stream: String, subject: Option<PublicKey>, x: f64) {
        let cfg = &self.config.anomaly;
        let tick = self.tick;
        let b = self
            .baselines
            .entry(stream)
            .or_insert_with_key(|id| StreamBaseline::new(id.clone(), subject, cfg));
        let alerts = b.ingest(x, tick);
        self.pending_alerts.extend(alerts);
    }

    // ---- onboarding ------------------------------------------------------

    fn onboard(&mut self, idx: usize, tick: u64) -> Result<(), String> {
        let actor = self.actors[idx].clone();
        let key = actor.key();
        self.emit(EventKind::Registered {
            device: key,
            cohort: actor.cohort.clone(),
            roles: actor.roles,
            group: actor.group.clone(),
        });
        match self.onboarding_pipeline(&actor, tick) {
            Ok(()) => {
                self.emit(EventKind::Activated {
                    device: key,
                    cohort: actor.cohort.clone(),
                    stake: actor.stake,
                });
                if actor.roles.validator {
                    self.validator_keys.insert(key);
                    self.nodes.insert(key, Ledger::new());
                }
                let p = &self.config.inspection;
                if should_inspect(self.config.seed, TargetKind::Device, tick, &key.0, p.rate_device) {
                    let passed = self.revalidate(&key, true);
                    let outcome = InspectionOutcome {
                        tick,
                        target_kind: TargetKind::Device,
                        target: key.to_hex(),
                        passed,
                        evidence: if passed { Vec::new() } else { vec!["revalidation_failed".into()] },
                    };
                    let i = self.emit(EventKind::Inspection {
                        outcome,
                        subject: Some(key),
                    });
                    if !passed {
                        self.route_failure(key, i, None);
                    }
                }
                Ok(())
            }
            Err(e) => {
                let reason = e.to_string();
                self.emit(EventKind::OnboardingFailed {
                    device: key,
                    cohort: actor.cohort.clone(),
                    reason: reason.clone(),
                });
                Err(reason)
            }
        }
    }

    fn onboarding_pipeline(&mut self, actor: &Actor, tick: u64) -> Result<(), OnboardingError> {
        let key = actor.key();
        let roles = actor.roles;
        let (device_type, expertise) = if roles.validator {
            (DeviceType::Compute, vec!["consensus".to_string()])
        } else if roles.witness {
            (DeviceType::Gateway, vec!["witnessing".to_string()])
        } else {
            (DeviceType::Sensor, vec!["device".to_string()])
        };
        let request = RegistrationRequest {
            device_type,
            model: "gdp-sim-device".into(),
            version: "1.0.0".into(),
            public_key: key,
            encrypted: true,
            sealed_secret: actor.secret.clone(),
            operator_group: actor.group.clone(),
            roles,
            expertise,
        };
        let rng = &mut self.streams.onboarding;
        self.desk.submit_registration(request, tick, rng)?;
        let challenge = self.desk.issue_challenge(&key, tick, rng)?;
        let answered = tick;
        if !self
            .desk
            .verify_challenge_response(&key, &respond_challenge(&actor.secret, &challenge), answered)?
        {
            return Err(OnboardingError::MalformedRequest("challenge response rejected".into()));
        }
        let window = self.desk.config.totp_window.max(1);
        if !self.desk.verify_mfa(&key, totp_code(&actor.secret, tick / window), tick)? {
            return Err(OnboardingError::MalformedRequest("second factor rejected".into()));
        }
        let trace = [
            (BehaviorAction::Register, tick),
            (BehaviorAction::ChallengeIssued, tick),
            (BehaviorAction::ChallengeAnswered, answered),
            (BehaviorAction::MfaSubmitted, tick),
        ];
        let score = self.desk.score_behavior(&key, &trace, tick)?;
        if score < self.desk.config.behavior.pass_threshold {
            return Err(OnboardingError::MalformedRequest(format!("behavior score {score:.2}")));
        }
        self.desk
            .finalize_device(&key, actor.stake, tick, &mut self.incentives, &mut self.streams.onboarding)?;
        Ok(())
    }

    /// Challenge-response plus second factor against the vault. Failure
    /// quarantines the device.
    fn revalidate(&mut self, key: &PublicKey, forced: bool) -> bool {
        let Some(actor) = self.actor(key) else { return false };
        let secret = actor.secret.clone();
        let responder = SecretResponder {
            secret: &secret,
            totp_window: self.desk.config.totp_window,
        };
        let before = self.status(key);
        let result = self
            .desk
            .revalidate_device(key, self.tick, &responder, &mut self.streams.onboarding, forced);
        let Ok(passed) = result else { return false };
        self.emit(EventKind::Revalidated {
            device: *key,
            passed,
            forced,
        });
        if !passed {
            if let Some(from) = before {
                self.emit(EventKind::StatusChanged {
                    device: *key,
                    from,
                    to: DeviceStatus::Quarantined,
                });
            }
            if self.quarantine.quarantine(*key, "revalidation", self.tick).is_ok() {
                self.emit(EventKind::Quarantined {
                    device: *key,
                    reason: "revalidation".into(),
                });
            }
        }
        passed
    }

    // ---- the tick ----------------------------------------------------------

    /// Advance one tick and return the events it produced.
    pub fn step(&mut self) -> &[Event] {
        let start = self.log.len();
        self.volume_this_tick = 0;
        self.housekeeping();
        self.adversary_actions();
        self.arrivals();
        self.retry_panels();
        self.witnessing();
        self.consensus();
        self.sync_nodes();
        self.anomaly();
        self.advance_disputes();
        self.flush_incentives();
        self.emit(EventKind::Heartbeat {
            pending: self.pending.len(),
            mempool: self.mempool.len(),
            height: self.chain.height(),
        });
        self.tick += 1;
        &self.log[start..]
    }

    /// Step until the duration elapses, or, when `max_transactions` is
    /// set, until that many have been submitted and the pipeline drains.
    pub fn run_to_end(&mut self) {
        while !self.finished() {
            self.step();
        }
    }

    fn housekeeping(&mut self) {
        let t = self.tick;
        for k in self.incentives.expire_bans(t) {
            self.emit(EventKind::BanLifted { device: k });
        }
        for k in self.quarantine.release_due(t, self.config.anomaly.review_period) {
            self.emit(EventKind::Released { device: k });
            self.set_status(&k, DeviceStatus::Active);
        }
        let period = self.desk.config.revalidation_period;
        if period > 0 {
            let due: Vec<PublicKey> = self
                .desk
                .profiles()
                .filter(|p| p.status == DeviceStatus::Active && t >= p.last_revalidation_tick + period)
                .map(|p| p.public_key)
                .collect();
            for k in due {
                self.revalidate(&k, false);
            }
        }
        let keys: Vec<PublicKey> = self.desk.profiles().map(|p| p.public_key).collect();
        for k in &keys {
            self.incentives.apply_longevity_bonus(k, t);
        }
        if t > 0 && t % self.config.epoch_ticks == 0 {
            let contrib = std::mem::take(&mut self.epoch_contrib);
            let total: u64 = contrib.values().sum();
            let epoch = t / self.config.epoch_ticks;
            for (k, c) in contrib {
                let _ = self
                    .incentives
                    .apply_contribution_reward(&k, c as f64, total as f64, Cause::Epoch(epoch), t);
            }
        }
    }

    fn adversary_actions(&mut self) {
        let t = self.tick;
        let specs = self.config.adversaries.clone();
        for (a, spec) in specs.iter().enumerate() {
            match *spec {
                AdversarySpec::SybilFlood {
                    count,
                    stake,
                    at_tick,
                    validator,
                } if at_tick == t => {
                    let roles = if validator {
                        Roles {
                            validator: true,
                            ..Roles::default()
                        }
                    } else {
                        Roles {
                            witness: true,
                            ..Roles::default()
                        }
                    };
                    for j in 0..count {
                        let idx = self.add_actor(roles, format!("sybil-{a}-{j}"), Behavior::Sybil, "sybil_flood", stake);
                        let device = self.actors[idx].key();
                        self.emit(EventKind::AdversaryAssigned {
                            device,
                            kind: "sybil_flood".into(),
                        });
                        let _ = self.onboard(idx, t);
                    }
                }
                AdversarySpec::KeyCompromise {
                    count,
                    at_tick,
                    flood_rate,
                    size_shift,
                } if t >= at_tick => {
                    if t == at_tick {
                        let mut victims: Vec<usize> = (0..self.actors.len())
                            .filter(|&i| {
                                let a = &self.actors[i];
                                a.cohort == "honest_client" && !self.compromised.contains_key(&a.key())
                            })
                            .collect();
                        self.streams.adversary.shuffle(&mut victims);
                        for i in victims.into_iter().take(count) {
                            // The attacker copies the signing key and swaps the
                            // device's own secret.
                            self.actors[i].secret = DeviceSecret(self.streams.adversary.bytes());
                            let device = self.actors[i].key();
                            self.compromised.insert(device, t);
                            self.emit(EventKind::DeviceCompromised { device });
                        }
                    }
                    let victims: Vec<PublicKey> = self.compromised.keys().copied().collect();
                    let sd = self.config.payload.sd;
                    for v in victims {
                        let n = poisson_like(&mut self.streams.adversary, flood_rate);
                        for _ in 0..n {
                            let expected = self.chain.next_nonce(&v);
                            let nonce = if expected > 0 {
                                self.streams.adversary.below(expected)
                            } else {
                                expected + 1
                            };
                            let mean = self.actor(&v).expect("victim").payload_mean + size_shift * sd;
                            let size = normal(&mut self.streams.adversary, mean, sd).round().max(1.0) as u64;
                            let receiver = v;
                            let claimed = Digest(self.streams.adversary.bytes());
                            self.submit(v, receiver, nonce, size, claimed, claimed);
                        }
                    }
                }
                _ => {}
            }
        }
    }

    fn arrivals(&mut self) {
        if self.arrivals_exhausted() {
            return;
        }
        let t = self.tick;
        let n = poisson_like(&mut self.streams.arrivals, self.config.txn_arrival_rate);
        for _ in 0..n {
            if self.arrivals_exhausted() {
                break;
            }
            let clients: Vec<usize> = (0..self.actors.len())
                .filter(|&i| self.actors[i].roles.client && self.eligible(&self.actors[i].key()))
                .collect();
            let senders: Vec<usize> = clients.iter().copied().filter(|&i| self.actors[i].in_flight.is_none()).collect();
            if senders.is_empty() || clients.len() < 2 {
                break;
            }
            let s = senders[self.streams.arrivals.below(senders.len() as u64) as usize];
            let receivers: Vec<usize> = clients.into_iter().filter(|&i| i != s).collect();
            let r = receivers[self.streams.arrivals.below(receivers.len() as u64) as usize];
            let sender = self.actors[s].key();
            let receiver = self.actors[r].key();
            let nonce = self.chain.next_nonce(&sender);
            let size = normal(&mut self.streams.payload, self.actors[s].payload_mean, self.config.payload.sd)
                .round()
                .max(1.0) as u64;
            let mut h = CanonicalHasher::new("gdp-sim/payload");
            h.fixed(&sender.0).u64(nonce).u64(t).u64(size);
            let claimed = h.finish();
            let tampered = match self.actors[s].behavior {
                Behavior::Tampering { rate } => self.streams.adversary.bernoulli(rate),
                _ => false,
            };
            let observed = if tampered {
                digest_parts(&[b"tampered", &claimed.0])
            } else {
                claimed
            };
            if self.submit(sender, receiver, nonce, size, claimed, observed) {
                self.accepted_submissions += 1;
            }
        }
    }

    /// Submission checks, then panel selection and commitments.
    fn submit(&mut self, sender: PublicKey, receiver: PublicKey, nonce: u64, size: u64, claimed: Digest, observed: Digest) -> bool {
        self.volume_this_tick += 1;
        let refuse = |w: &mut World, reason: Refusal| {
            w.emit(EventKind::SubmissionRefused { sender, nonce, reason });
            false
        };
        if !self.eligible(&sender) {
            return refuse(self, Refusal::Ineligible);
        }
        if self.config.anomaly.monitor_payload_size {
            self.ingest(format!("payload/{}", sender.short()), Some(sender), size as f64);
        }
        let expected = self.chain.next_nonce(&sender);
        let idx = self.by_key[&sender];
        if nonce < expected {
            return refuse(self, Refusal::NonceReplay);
        }
        if self.actors[idx].in_flight.is_some() {
            return refuse(self, Refusal::InFlight);
        }
        if nonce > expected {
            return refuse(self, Refusal::NonceGap);
        }
        let txn = DataTransaction::new(sender, receiver, claimed, size, nonce, self.tick);
        let id = txn.id;
        self.emit(EventKind::Submitted {
            txn: id,
            sender,
            receiver,
            nonce,
            size,
        });
        self.emit(EventKind::GroundTruth {
            txn: id,
            tampered: (claimed != observed) != self.invert_truth,
        });
        self.actors[idx].in_flight = Some(id);
        self.txns.insert(id, txn);
        self.txn_info.insert(
            id,
            TxnInfo {
                observed,
                plans: BTreeMap::new(),
            },
        );
        self.pending.insert(id);
        self.try_open_panel(id);
        true
    }

    fn witness_candidates(&self) -> Vec<WitnessCandidate> {
        self.actors
            .iter()
            .filter(|a| a.roles.witness)
            .filter_map(|a| {
                let p = self.desk.profile(&a.key())?;
                Some(WitnessCandidate {
                    key: a.key(),
                    reputation: self.incentives.score(&a.key()),
                    operator_group: p.operator_group.clone(),
                    eligible: self.eligible(&a.key()),
                })
            })
            .collect()
    }

    fn try_open_panel(&mut self, id: TxnId) {
        let cands = self.witness_candidates();
        let cfg = self.config.panel.clone();
        let txn = self.txns.get_mut(&id).expect("known txn");
        let exclude = txn.all_panelists();
        match select_witnesses(&cands, txn, &cfg, &exclude, &mut self.streams.panels) {
            Ok(panel) => {
                txn.open_panel(panel.clone(), self.tick);
                let round = txn.escalations;
                self.awaiting_panel.remove(&id);
                self.emit(EventKind::PanelOpened {
                    txn: id,
                    round,
                    panel: panel.clone(),
                });
                self.commit_panel(id, &panel);
            }
            Err(e) => {
                let (needed, found) = match e {
                    TransmissionError::InsufficientWitnesses { needed, found } => (needed, found),
                    _ => (cfg.k, 0),
                };
                if self.awaiting_panel.insert(id) {
                    self.emit(EventKind::PanelUnavailable { txn: id, needed, found });
                }
            }
        }
    }

    /// Every panelist decides its verdict from what it observes and its
    /// policy, then commits.
    fn commit_panel(&mut self, id: TxnId, panel: &[PublicKey]) {
        for w in panel {
            let behavior = self.behavior(w);
            let txn = &self.txns[&id];
            let truthful = if txn.payload_digest == self.txn_info[&id].observed {
                Judgement::Valid
            } else {
                Judgement::Invalid
            };
            let adv = &mut self.streams.adversary;
            let (commits, commit_v, reveal_v) = match behavior {
                Behavior::Colluding | Behavior::Sybil => (true, Judgement::Valid, Judgement::Valid),
                Behavior::Lazy { skip_rate } => (!adv.bernoulli(skip_rate), truthful, truthful),
                Behavior::Equivocating { rate } => {
                    let flip = adv.bernoulli(rate);
                    (true, truthful, if flip { truthful.flip() } else { truthful })
                }
                _ => (true, truthful, truthful),
            };
            if !commits {
                continue;
            }
            let salt: [u8; 16] = self.streams.salts.bytes();
            let kp = &self.actors[self.by_key[w]].keypair;
            let att = Attestation::commit(kp, id, commit_v, salt);
            let commit = att.commit;
            let txn = self.txns.get_mut(&id).expect("known txn");
            if txn.witness_commit(att).is_ok() {
                self.txn_info
                    .get_mut(&id)
                    .expect("known txn")
                    .plans
                    .insert(*w, WitnessPlan { salt, reveal: reveal_v });
                self.emit(EventKind::WitnessCommitted {
                    txn: id,
                    witness: *w,
                    commit,
                });
            }
        }
    }

    fn free_sender(&mut self, id: &TxnId) {
        let sender = self.txns[id].sender;
        let idx = self.by_key[&sender];
        if self.actors[idx].in_flight == Some(*id) {
            self.actors[idx].in_flight = None;
        }
    }

    fn retry_panels(&mut self) {
        let ids: Vec<TxnId> = self.awaiting_panel.iter().copied().collect();
        for id in ids {
            let txn = &self.txns[&id];
            if self.tick >= txn.panel_opened_tick + self.config.panel.reveal_deadline {
                self.awaiting_panel.remove(&id);
                self.finish_rejected(id, "no_panel", None);
            } else {
                self.try_open_panel(id);
            }
        }
    }

    fn finish_rejected(&mut self, id: TxnId, reason: &str, truth: Option<Judgement>) {
        let txn = self.txns.get_mut(&id).expect("known txn");
        txn.status = TxnStatus::Rejected;
        let sender = txn.sender;
        self.emit(EventKind::TxnRejected {
            txn: id,
            sender,
            reason: reason.to_string(),
        });
        self.evaluate(id, truth);
        self.free_sender(&id);
        self.pending.remove(&id);
        self.mempool.remove(&id);
    }

    fn evaluate(&mut self, id: TxnId, truth: Option<Judgement>) {
        let outcomes = self.txns[&id].evaluate_witnesses(truth);
        for (w, outcome) in outcomes {
            match outcome {
                WitnessOutcome::Correct => {
                    self.reward(&w, Cause::Txn(id));
                    *self.epoch_contrib.entry(w).or_default() += 1;
                }
                WitnessOutcome::Incorrect | WitnessOutcome::Silent => self.penalize(&w, Severity::Minor, Cause::Txn(id)),
                WitnessOutcome::Equivocated => self.penalize(&w, Severity::Major, Cause::Txn(id)),
            }
        }
    }

    fn witnessing(&mut self) {
        let t = self.tick;
        let deadline = self.config.panel.reveal_deadline;
        let ready: Vec<TxnId> = self
            .pending
            .iter()
            .filter(|id| !self.awaiting_panel.contains(id))
            .filter(|id| {
                let txn = &self.txns[*id];
                txn.status == TxnStatus::Pending
                    && ((txn.all_committed() && t > txn.panel_opened_tick) || t >= txn.panel_opened_tick + deadline)
            })
            .copied()
            .collect();
        for id in ready {
            self.reveal_round(id);
            let cfg = self.config.panel.clone();
            let txn = self.txns.get_mut(&id).expect("known txn");
            let status = txn.aggregate_attestations(&cfg);
            let (valid, invalid) = txn.tally();
            let round = txn.escalations;
            self.emit(EventKind::Aggregated {
                txn: id,
                round,
                valid,
                invalid,
                status,
            });
            self.deep_check_witnesses(id);
            self.feed_dissent(id, status);
            match status {
                TxnStatus::Witnessed => self.on_witnessed(id),
                TxnStatus::Rejected => self.finish_rejected(id, "witnesses", Some(Judgement::Invalid)),
                _ => self.escalate(id),
            }
        }
    }

    fn reveal_round(&mut self, id: TxnId) {
        let cfg = self.config.panel.clone();
        let witnesses: Vec<PublicKey> = self.txns[&id].attestations.iter().map(|a| a.witness).collect();
        for w in witnesses {
            let plan = self.txn_info[&id].plans[&w].clone();
            let tick = self.tick;
            let txn = self.txns.get_mut(&id).expect("known txn");
            match txn.witness_reveal(&w, plan.reveal, plan.salt, tick, &cfg) {
                Ok(()) => {
                    self.emit(EventKind::WitnessRevealed {
                        txn: id,
                        witness: w,
                        verdict: plan.reveal,
                        salt: hex::encode(plan.salt),
                    });
                }
                Err(TransmissionError::CommitMismatch(_)) => {
                    let i = self.emit(EventKind::RevealMismatch { txn: id, witness: w });
                    self.disputed_events.insert(i);
                    self.quarantine(&w, "commit_mismatch");
                    self.open_dispute(vec![w], "witnessing", vec![i as u64], Some(id), true);
                }
                Err(_) => {}
            }
        }
    }

    /// Each cleanly revealed panelist is independently picked for a full
    /// payload-digest recomputation that cross-checks its verdict.
    fn deep_check_witnesses(&mut self, id: TxnId) {
        let rate = self.config.inspection.rate_witness_deep;
        if rate <= 0.0 {
            return;
        }
        let txn = &self.txns[&id];
        let recomputed = if txn.payload_digest == self.txn_info[&id].observed {
            Judgement::Valid
        } else {
            Judgement::Invalid
        };
        let checks: Vec<(PublicKey, Judgement)> = txn
            .attestations
            .iter()
            .filter(|a| !a.equivocated)
            .filter_map(|a| a.revealed_verdict.map(|v| (a.witness, v)))
            .filter(|(w, _)| {
                let target = [w.0.as_slice(), id.0.as_slice()].concat();
                should_inspect(self.config.seed, TargetKind::Witness, self.tick, &target, rate)
            })
            .collect();
        for (w, verdict) in checks {
            let passed = verdict == recomputed;
            let outcome = InspectionOutcome {
                tick: self.tick,
                target_kind: TargetKind::Witness,
                target: w.to_hex(),
                passed,
                evidence: if passed {
                    Vec::new()
                } else {
                    vec![format!("verdict:{verdict}!=recomputed:{recomputed}"), format!("txn:{}", id.to_hex())]
                },
            };
            let i = self.emit(EventKind::Inspection {
                outcome,
                subject: Some(w),
            });
            if !passed {
                self.route_failure(w, i, Some(id));
            }
        }
    }

    fn feed_dissent(&mut self, id: TxnId, status: TxnStatus) {
        if !self.config.anomaly.monitor_witness_dissent {
            return;
        }
        let outcome = match status {
            TxnStatus::Witnessed => Judgement::Valid,
            TxnStatus::Rejected => Judgement::Invalid,
            _ => return,
        };
        let txn = &self.txns[&id];
        let samples: Vec<(PublicKey, f64)> = txn
            .panel
            .iter()
            .map(|w| {
                let counted = txn.attestation(w).map_or(Judgement::Invalid, |a| a.counted());
                (*w, f64::from(u8::from(counted != outcome)))
            })
            .collect();
        for (w, x) in samples {
            self.ingest(format!("dissent/{}", w.short()), Some(w), x);
        }
    }

    fn on_witnessed(&mut self, id: TxnId) {
        let quorum = self.config.panel.quorum();
        let txn = &self.txns[&id];
        let sender = txn.sender;
        let valid_attesters: Vec<PublicKey> = txn
            .attestations
            .iter()
            .filter(|a| a.counted() == Judgement::Valid)
            .map(|a| a.witness)
            .collect();
        self.directory.insert(
            id,
            LedgerEntry::Txn {
                sender,
                nonce: txn.nonce,
                quorum_met: valid_attesters.len() >= quorum,
            },
        );
        let p = &self.config.inspection;
        if should_inspect(self.config.seed, TargetKind::Transaction, self.tick, &id.0, p.rate_txn) {
            let outcome = deep_inspect_transaction(txn, &self.txn_info[&id].observed, self.tick);
            let passed = outcome.passed;
            let i = self.emit(EventKind::Inspection {
                outcome,
                subject: Some(sender),
            });
            if !passed {
                match self.config.inspection.enforcement {
                    Enforcement::Enforce => {
                        self.disputed_events.insert(i);
                        self.penalize(&sender, Severity::Critical, Cause::Inspection(i as u64));
                        for a in &valid_attesters {
                            self.quarantine(a, "inspection");
                        }
                        self.open_dispute(valid_attesters, "witnessing", vec![i as u64], Some(id), true);
                        self.finish_rejected(id, "inspection", Some(Judgement::Invalid));
                        return;
                    }
                    Enforcement::AuditOnly => self.audit(sender, "inspection"),
                }
            }
        }
        self.pending.remove(&id);
        self.mempool.insert(id);
    }

    fn escalate(&mut self, id: TxnId) {
        let cands = self.witness_candidates();
        let cfg = self.config.panel.clone();
        let tick = self.tick;
        let txn = self.txns.get_mut(&id).expect("known txn");
        match txn.reescalate_disputed(&cands, &cfg, &mut self.streams.panels, tick) {
            Ok(Escalation::Repaneled(panel)) => {
                let round = txn.escalations;
                self.pending.insert(id);
                self.emit(EventKind::PanelOpened {
                    txn: id,
                    round,
                    panel: panel.clone(),
                });
                self.commit_panel(id, &panel);
            }
            _ => {
                let sender = txn.sender;
                // Arbitrators re-derive the payload digest themselves.
                let evidence = txn.payload_digest != self.txn_info[&id].observed;
                let i = self.emit(EventKind::SentToArbitration { txn: id, sender });
                self.open_dispute(vec![sender], "device", vec![i as u64], Some(id), evidence);
                self.finish_rejected(id, "arbitration", None);
            }
        }
    }

    // ---- consensus ---------------------------------------------------------

    fn eligible_validators(&self) -> Vec<PublicKey> {
        self.validator_keys.iter().filter(|k| self.eligible(k)).copied().collect()
    }

    fn consensus(&mut self) {
        if let Some(b) = &self.in_flight_block {
            if self.tick < b.commit_at {
                return;
            }
            self.finalize_block();
        }
        self.propose();
        if self.in_flight_block.as_ref().is_some_and(|b| b.commit_at <= self.tick) {
            self.finalize_block();
        }
    }

    fn propose(&mut self) {
        let records = self.disputes.pending_records();
        for r in &records {
            self.directory.insert(*r, LedgerEntry::Record);
        }
        if self.mempool.is_empty() && records.iter().all(|r| self.chain.contains(r)) {
            return;
        }
        let eligible = self.eligible_validators();
        let Some(proposer) = proposer_for_round(self.round, &eligible) else {
            return;
        };
        let round = self.round;
        self.round += 1;
        let t = self.tick;
        if self.nodes[&proposer].head().block_digest != self.chain.head().block_digest {
            self.emit(EventKind::ProposalSkipped {
                round,
                proposer,
                reason: "lagging".into(),
            });
            return;
        }
        let entries: Vec<MempoolEntry> = self
            .mempool
            .iter()
            .map(|id| {
                let txn = &self.txns[id];
                MempoolEntry {
                    id: *id,
                    sender: txn.sender,
                    nonce: txn.nonce,
                    created_tick: txn.created_tick,
                    sender_reputation: self.incentives.score(&txn.sender),
                }
            })
            .collect();
        let kp = self.actors[self.by_key[&proposer]].keypair.clone();
        let Ok(proposal) = propose_block(&kp, &proposer, &entries, &records, &self.nodes[&proposer], &self.config.consensus, t) else {
            return;
        };
        let digest = proposal.digest();
        let p = self.config.inspection.clone();
        if should_inspect(self.config.seed, TargetKind::Proposer, round, &proposer.0, p.rate_proposer) {
            let answer = solve_puzzle(&digest, p.puzzle_difficulty, p.puzzle_budget).map(|(n, _)| n);
            let outcome = challenge_proposer(&proposer, &digest, answer, p.puzzle_difficulty, t);
            let passed = outcome.passed;
            let i = self.emit(EventKind::Inspection {
                outcome,
                subject: Some(proposer),
            });
            if !passed {
                self.penalize(&proposer, Severity::Minor, Cause::Inspection(i as u64));
                self.emit(EventKind::ProposalSkipped {
                    round,
                    proposer,
                    reason: "puzzle".into(),
                });
                return;
            }
        }
        let others: Vec<PublicKey> = eligible.iter().filter(|k| **k != proposer).copied().collect();
        let voters = match p.random_validators {
            Some(m) => match pick_random_validators(&mut self.streams.consensus, &others, m) {
                Ok(v) => v,
                Err(e) => {
                    self.emit(EventKind::ProposalSkipped {
                        round,
                        proposer,
                        reason: e.to_string(),
                    });
                    return;
                }
            },
            None => others,
        };
        let members: Vec<PublicKey> = std::iter::once(proposer).chain(voters.iter().copied()).collect();
        let stakes: Vec<f64> = members.iter().map(|k| self.incentives.staked(k).as_f64()).collect();
        let reps: Vec<f64> = members.iter().map(|k| self.incentives.score(k)).collect();
        let c = &self.config.consensus;
        let weights = vote_weights(&stakes, &reps, c.stake_share, c.reputation_share);
        let audits: Vec<WeightAudit> = members
            .iter()
            .zip(&stakes)
            .zip(&reps)
            .zip(&weights)
            .map(|(((k, s), r), w)| WeightAudit {
                validator: *k,
                stake: *s,
                reputation: *r,
                weight: *w,
            })
            .collect();
        let mut votes = vec![Vote::cast(&kp, digest, true, weights[0], Vec::new())];
        for (v, w) in voters.iter().zip(&weights[1..]) {
            self.catch_up(v, &proposer);
            let vote = self.cast_vote(v, &proposal, *w);
            votes.push(vote);
        }
        let delay = random_commit_delay(&mut self.streams.consensus, p.max_commit_delay);
        self.emit(EventKind::Proposed {
            round,
            height: proposal.height,
            proposer,
            digest,
            txns: proposal.txn_ids.len(),
            commit_at: t + delay,
        });
        self.in_flight_block = Some(InFlightBlock {
            proposal,
            votes,
            audits,
            commit_at: t + delay,
        });
    }

    fn cast_vote(&mut self, voter: &PublicKey, proposal: &Proposal, weight: f64) -> Vote {
        let (accept, objections, problems) = match validate_proposal(proposal, &self.nodes[voter], &self.directory) {
            Ok(problems) => {
                let objections: Vec<TxnId> = problems
                    .iter()
                    .filter_map(|p| match p {
                        ProposalProblem::NoQuorum(id)
                        | ProposalProblem::Unknown(id)
                        | ProposalProblem::Duplicate(id)
                        | ProposalProblem::AlreadyCommitted(id) => Some(*id),
                        ProposalProblem::NonceGap { id, .. } => Some(*id),
                        _ => None,
                    })
                    .collect();
                (problems.is_empty(), objections, problems.len())
            }
            Err(_) => (false, Vec::new(), 1),
        };
        let (accept, objections) = match self.behavior(voter) {
            Behavior::Sybil => (true, Vec::new()),
            _ => (accept, objections),
        };
        let kp = &self.actors[self.by_key[voter]].keypair;
        let vote = Vote::cast(kp, proposal.digest(), accept, weight, objections);
        self.emit(EventKind::Voted {
            height: proposal.height,
            validator: *voter,
            accept,
            weight,
            problems,
        });
        if self.config.anomaly.monitor_vote_against {
            self.ingest(format!("vote_against/{}", voter.short()), Some(*voter), f64::from(u8::from(!accept)));
        }
        vote
    }

    fn finalize_block(&mut self) {
        let Some(b) = self.in_flight_block.take() else { return };
        let t = self.tick;
        let proposer = b.proposal.proposer;
        let kp = self.actors[self.by_key[&proposer]].keypair.clone();
        let (proposal, votes) = if b.votes.iter().any(|v| !v.objections.is_empty()) {
            let remove = resolve_vote_conflict(&b.proposal, &b.votes, &BTreeSet::new());
            self.emit(EventKind::Trimmed {
                height: b.proposal.height,
                txns: remove.iter().copied().collect(),
            });
            for id in &remove {
                if self.mempool.remove(id) {
                    let txn = self.txns.get_mut(id).expect("known txn");
                    txn.status = TxnStatus::Disputed;
                    self.escalate(*id);
                }
            }
            let trimmed = b.proposal.trimmed(&kp, &remove);
            if trimmed.txn_ids.is_empty() {
                return;
            }
            let mut votes = vec![Vote::cast(&kp, trimmed.digest(), true, b.votes[0].weight, Vec::new())];
            for v in &b.votes[1..] {
                // Voters quarantined since the proposal keep no say.
                if self.eligible(&v.validator) {
                    votes.push(self.cast_vote(&v.validator, &trimmed, v.weight));
                }
            }
            (trimmed, votes)
        } else {
            (b.proposal, b.votes)
        };
        let c = &self.config.consensus;
        let pairs: Vec<(f64, bool)> = votes.iter().map(|v| (v.weight, v.accept)).collect();
        let tally = tally_votes(&pairs, c.commit_threshold, c.contested_band);
        let block = LedgerBlock::from_proposal(&proposal, votes, t);
        if !tally.committed || self.chain.append(block.clone(), &self.directory).is_err() {
            self.emit(EventKind::BlockRejected {
                height: proposal.height,
                proposer,
                accept_weight: tally.accept_weight,
                total_weight: tally.total_weight,
            });
            return;
        }
        let mut receivers = 0;
        let keys: Vec<PublicKey> = self.nodes.keys().copied().collect();
        for k in keys {
            let dropped = k != proposer && self.streams.consensus.bernoulli(self.config.delivery.drop_rate);
            let node = self.nodes.get_mut(&k).expect("node");
            if !dropped && node.head().block_digest == block.parent && node.append(block.clone(), &self.directory).is_ok() {
                receivers += 1;
            }
        }
        self.emit(EventKind::BlockCommitted {
            height: block.height,
            digest: block.block_digest,
            proposer,
            txn_ids: block.txn_ids.clone(),
            accept_weight: tally.accept_weight,
            total_weight: tally.total_weight,
            weights: b.audits,
            receivers,
        });
        let mut records = BTreeSet::new();
        for id in &block.txn_ids {
            match self.directory.get(id).copied() {
                Some(LedgerEntry::Txn { sender, .. }) => {
                    let txn = self.txns.get_mut(id).expect("known txn");
                    txn.status = TxnStatus::Committed;
                    let latency = t - txn.created_tick;
                    self.emit(EventKind::TxnCommitted {
                        txn: *id,
                        sender,
                        height: block.height,
                        latency,
                    });
                    self.evaluate(*id, Some(Judgement::Valid));
                    self.free_sender(id);
                    self.mempool.remove(id);
                }
                Some(LedgerEntry::Record) => {
                    records.insert(*id);
                }
                None => {}
            }
        }
        self.disputes.mark_recorded(&records, block.height);
        let cause = Cause::Block(block.height);
        for v in block.votes.iter().filter(|v| v.accept) {
            self.reward(&v.validator, cause.clone());
        }
    }

    /// Bring `node` level with `source` if it lags.
    fn catch_up(&mut self, node: &PublicKey, source: &PublicKey) {
        if self.nodes[node].height() < self.nodes[source].height() {
            self.sync_from(node, source);
        }
    }

    fn sync_from(&mut self, node: &PublicKey, source: &PublicKey) -> bool {
        let t = self.tick;
        let src = &self.nodes[source];
        let from = self.nodes[node].height();
        let mut shipped = src.blocks_after(from).to_vec();
        let head = src.head().block_digest;
        let height = src.height();
        if self.behavior(source) == Behavior::ForgedSync {
            if let Some(last) = shipped.last_mut() {
                let fake = digest_parts(&[b"forged", &last.block_digest.0]);
                last.txn_ids.push(fake);
            }
        }
        let threshold = self.config.consensus.commit_threshold;
        let known = |k: &PublicKey| self.validator_keys.contains(k);
        let target = [source.0.as_slice(), node.0.as_slice()].concat();
        if should_inspect(self.config.seed, TargetKind::SyncBatch, t, &target, self.config.inspection.rate_sync_verify) {
            let outcome = verify_sync_integrity(source, &shipped, self.nodes[node].head(), threshold, &known, t);
            let passed = outcome.passed;
            let i = self.emit(EventKind::Inspection {
                outcome,
                subject: Some(*source),
            });
            if !passed {
                self.disputed_events.insert(i);
                self.penalize(source, Severity::Critical, Cause::Inspection(i as u64));
            }
        }
        let known = |k: &PublicKey| self.validator_keys.contains(k);
        let mut ledger = self.nodes[node].clone();
        match synchronize(&mut ledger, &head, height, &shipped, threshold, &known, &self.directory) {
            Ok(r) => {
                self.nodes.insert(*node, ledger);
                self.emit(EventKind::Synced {
                    node: *node,
                    source: *source,
                    from: r.from_height,
                    to: r.to_height,
                });
                true
            }
            Err(e) => {
                self.emit(EventKind::SyncFailed {
                    node: *node,
                    source: *source,
                    reason: e.to_string(),
                });
                false
            }
        }
    }

    fn sync_nodes(&mut self) {
        let target = self.chain.height();
        let eligible = self.eligible_validators();
        for node in &eligible {
            if self.nodes[node].height() >= target {
                continue;
            }
            let h = self.nodes[node].height();
            let sources: Vec<PublicKey> = eligible
                .iter()
                .filter(|k| *k != node && self.nodes[*k].height() > h)
                .copied()
                .collect();
            if sources.is_empty() {
                continue;
            }
            let s = sources[self.streams.sync.below(sources.len() as u64) as usize];
            self.sync_from(node, &s);
        }
    }

    // ---- anomaly and arbitration -------------------------------------------

    fn anomaly(&mut self) {
        if self.config.anomaly.monitor_txn_volume {
            self.ingest("txn_volume".into(), None, self.volume_this_tick as f64);
        }
        let alerts = std::mem::take(&mut self.pending_alerts);
        for alert in alerts {
            self.emit(EventKind::Alert {
                stream: alert.stream_id.clone(),
                subject: alert.subject,
                kind: alert.kind,
                z: clamp_score(alert.z_score),
                value: alert.value,
            });
            let violations = self.investigate_alert(&alert);
            let Some(subject) = alert.subject else { continue };
            let fresh: Vec<u64> = violations
                .iter()
                .map(|v| v.0)
                .filter(|i| !self.disputed_events.contains(&(*i as usize)))
                .collect();
            if fresh.is_empty() {
                continue;
            }
            for i in &fresh {
                self.disputed_events.insert(*i as usize);
            }
            if self.actor(&subject).is_some_and(|a| a.roles.client) && self.status(&subject) == Some(DeviceStatus::Active) {
                self.revalidate(&subject, true);
            }
            self.quarantine(&subject, "investigation");
            let cat = self.category(&subject);
            self.open_dispute(vec![subject], cat, fresh, None, true);
        }
    }

    /// Verdict preference of `voter` in dispute `id`: adversaries shield
    /// their own, everyone else follows the evidence.
    fn finds_fault(&self, voter: &PublicKey, id: u64) -> bool {
        let ctx = self.dispute_ctx[&id];
        if self.behavior(voter).adversarial() && ctx.adversarial_respondent {
            false
        } else {
            ctx.evidence_fault
        }
    }

    fn advance_disputes(&mut self) {
        let open = self.disputes.open_ids();
        if open.is_empty() {
            return;
        }
        let t = self.tick;
        let participants = self.participants();
        let c = self.config.consensus.clone();
        for id in open {
            let d = self.disputes.get(id).expect("open dispute");
            let before = d.stage;
            let fault_set: BTreeSet<PublicKey> = participants
                .iter()
                .map(|p| p.key)
                .chain(d.mediator)
                .filter(|k| self.finds_fault(k, id))
                .collect();
            let votes = |k: &PublicKey| fault_set.contains(k);
            match before {
                DisputeStage::Mediation => {
                    let proposed = d.mediator.is_some_and(|m| votes(&m));
                    let _ = self.disputes.mediate(id, proposed, &|k, f| votes(k) == f, t);
                }
                DisputeStage::CommunityReview => {
                    let _ = self
                        .disputes
                        .community_review(id, &participants, c.stake_share, c.reputation_share, &votes, t);
                }
                DisputeStage::PanelSelection => {
                    let _ = self.disputes.select_panel(id, &participants, &mut self.streams.arbitration, t);
                }
                DisputeStage::FinalArbitration => {
                    let _ = self.disputes.arbitrate(id, &votes, t);
                }
                DisputeStage::Closed | DisputeStage::Appealed => {}
            }
            let after = self.disputes.get(id).expect("dispute").stage;
            if after == before {
                continue;
            }
            self.emit(EventKind::DisputeAdvanced { dispute: id, stage: after });
            if after == DisputeStage::Closed {
                self.on_closed(id);
                self.maybe_appeal(id, &participants, &fault_set);
            }
        }
    }

    fn on_closed(&mut self, id: u64) {
        let d = self.disputes.get_mut(id).expect("dispute");
        let remedies = d.take_remedies();
        let verdict = d.verdicts.last().cloned().expect("closed dispute has a verdict");
        self.emit(EventKind::DisputeClosed {
            dispute: id,
            body: verdict.deciding_body,
            at_fault: verdict.at_fault.clone(),
            record: verdict.record_digest(id),
        });
        let cause = Cause::Dispute(id);
        for r in remedies {
            match r {
                crate::arbitration::Remedy::Penalize { subject, severity } => {
                    self.penalize(&subject, severity, cause.clone());
                    if self.quarantine.extend(&subject).is_ok() {
                        self.emit(EventKind::QuarantineExtended { device: subject });
                    }
                }
                crate::arbitration::Remedy::Restore { subject } => {
                    let _ = self.incentives.restore_reputation(&subject, cause.clone(), self.tick);
                    self.release(&subject);
                }
                crate::arbitration::Remedy::Compensate { subject } => self.reward(&subject, cause.clone()),
            }
        }
    }

    /// Adversarial respondents found at fault appeal when they can post
    /// the bond.
    fn maybe_appeal(&mut self, id: u64, participants: &[Participant], fault_set: &BTreeSet<PublicKey>) {
        let d = self.disputes.get(id).expect("dispute");
        if d.appeal_used {
            return;
        }
        let bond = self.config.arbitration.appeal_bond;
        let Some(appellant) = d.decision.as_ref().and_then(|v| {
            v.at_fault.iter().copied().find(|k| {
                self.behavior(k).adversarial() && self.incentives.stake(k).is_some_and(|s| s.liquid >= bond)
            })
        }) else {
            return;
        };
        let t = self.tick;
        let votes = |k: &PublicKey| fault_set.contains(k);
        let result = self.disputes.appeal(
            id,
            &appellant,
            participants,
            &votes,
            &mut self.incentives,
            &mut self.streams.arbitration,
            t,
        );
        if result.is_ok() {
            self.emit(EventKind::Appealed { dispute: id, appellant });
            self.on_closed(id);
        }
    }
}
