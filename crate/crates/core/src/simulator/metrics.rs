//! Metrics derived purely from the event log.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::incentives::{IncentiveKind, Tokens};
use crate::onboarding::DeviceStatus;
use crate::primitives::PublicKey;
use crate::stochastic::TargetKind;
use crate::transmission::TxnId;

use super::config::ScenarioConfig;
use super::events::{Event, EventKind};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub count: usize,
    pub min: u64,
    pub max: u64,
    pub mean: f64,
    pub p50: u64,
    pub p95: u64,
    pub p99: u64,
}

impl Summary {
    pub fn of(mut xs: Vec<u64>) -> Self {
        if xs.is_empty() {
            return Summary::default();
        }
        xs.sort_unstable();
        let rank = |q: f64| xs[((q * xs.len() as f64).ceil() as usize).clamp(1, xs.len()) - 1];
        Summary {
            count: xs.len(),
            min: xs[0],
            max: xs[xs.len() - 1],
            mean: xs.iter().sum::<u64>() as f64 / xs.len() as f64,
            p50: rank(0.5),
            p95: rank(0.95),
            p99: rank(0.99),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TamperStats {
    pub submitted: usize,
    pub witnessed: usize,
    pub committed: usize,
    /// Tampered and committed, and picked for transaction inspection.
    pub inspected_committed: usize,
    /// Tampered and committed, and that inspection failed.
    pub detected_committed: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct InspectionStats {
    pub count: usize,
    pub failed: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DisputeStats {
    pub opened: usize,
    pub refused: usize,
    pub closed: usize,
    pub appeals: usize,
    pub found_at_fault: usize,
    pub by_body: BTreeMap<String, usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Flow {
    pub count: usize,
    pub tokens: Tokens,
    pub reputation: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CohortOnboarding {
    pub registered: usize,
    pub activated: usize,
    pub failed: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub ticks: u64,
    pub submitted: usize,
    pub refused: BTreeMap<String, usize>,
    pub committed_count: usize,
    pub rejected_count: usize,
    pub rejected_by_reason: BTreeMap<String, usize>,
    /// Committed transactions whose payload was tampered.
    pub false_commit_count: usize,
    pub tampered: TamperStats,
    pub commit_latency: Summary,
    pub liveness_bound: u64,
    /// Untampered transactions that never committed.
    pub valid_uncommitted: usize,
    /// Untampered transactions committed later than the liveness bound.
    pub valid_late: usize,
    pub compromised_devices: usize,
    pub detection_latency: Summary,
    pub undetected_compromised: usize,
    pub alerts: BTreeMap<String, usize>,
    pub investigations: usize,
    pub investigations_with_violations: usize,
    pub inspections: BTreeMap<String, InspectionStats>,
    pub disputes: DisputeStats,
    pub stake_flows: BTreeMap<String, Flow>,
    /// Mean reputation per cohort, sampled at epoch boundaries.
    pub reputation_trajectories: BTreeMap<String, Vec<(u64, f64)>>,
    pub quarantines: usize,
    pub temp_bans: usize,
    pub perm_bans: usize,
    pub blocks_committed: usize,
    pub blocks_rejected: usize,
    pub proposals_skipped: BTreeMap<String, usize>,
    pub syncs: usize,
    pub sync_failures: usize,
    pub onboarding: BTreeMap<String, CohortOnboarding>,
    /// Adversarial devices that ever became Active.
    pub adversarial_activated: usize,
    /// Adversarial devices Active at the end of the run.
    pub adversarial_active: usize,
    pub safety_ok: bool,
    pub liveness_ok: bool,
}

fn key_name<T: Serialize>(v: &T) -> String {
    match serde_json::to_value(v) {
        Ok(serde_json::Value::String(s)) => s,
        Ok(other) => other.to_string(),
        Err(_) => String::new(),
    }
}

fn kind_name(k: TargetKind) -> String {
    key_name(&k)
}

/// Re-derive the full report from `events`.
pub fn derive(events: &[Event], config: &ScenarioConfig) -> MetricsReport {
    let mut m = MetricsReport {
        liveness_bound: config.panel.reveal_deadline + 3 + config.inspection.max_commit_delay,
        ..MetricsReport::default()
    };
    let mut tampered: BTreeMap<TxnId, bool> = BTreeMap::new();
    let mut witnessed: BTreeSet<TxnId> = BTreeSet::new();
    let mut committed: BTreeMap<TxnId, u64> = BTreeMap::new();
    let mut inspected: BTreeMap<TxnId, bool> = BTreeMap::new();
    let mut adversaries: BTreeSet<PublicKey> = BTreeSet::new();
    let mut compromised: BTreeMap<PublicKey, u64> = BTreeMap::new();
    let mut detected: BTreeMap<PublicKey, u64> = BTreeMap::new();
    let mut status: BTreeMap<PublicKey, DeviceStatus> = BTreeMap::new();
    let mut cohort: BTreeMap<PublicKey, String> = BTreeMap::new();
    let mut rep: BTreeMap<PublicKey, f64> = BTreeMap::new();
    let mut disputes_closed: BTreeSet<u64> = BTreeSet::new();
    let mut latencies = Vec::new();

    let epoch = config.epoch_ticks.max(1);
    let mut next_sample = 0u64;
    let sample = |m: &mut MetricsReport, at: u64, rep: &BTreeMap<PublicKey, f64>, cohort: &BTreeMap<PublicKey, String>| {
        let mut sums: BTreeMap<&str, (f64, usize)> = BTreeMap::new();
        for (k, r) in rep {
            let e = sums.entry(cohort[k].as_str()).or_default();
            e.0 += r;
            e.1 += 1;
        }
        for (c, (s, n)) in sums {
            m.reputation_trajectories.entry(c.to_string()).or_default().push((at, s / n as f64));
        }
    };

    for e in events {
        while next_sample <= e.tick {
            sample(&mut m, next_sample, &rep, &cohort);
            next_sample += epoch;
        }
        m.ticks = m.ticks.max(e.tick + 1);
        match &e.kind {
            EventKind::AdversaryAssigned { device, .. } => {
                adversaries.insert(*device);
            }
            EventKind::DeviceCompromised { device } => {
                compromised.insert(*device, e.tick);
            }
            EventKind::GroundTruth { txn, tampered: t } => {
                tampered.insert(*txn, *t);
            }
            EventKind::Registered { device, cohort: c, .. } => {
                cohort.insert(*device, c.clone());
                m.onboarding.entry(c.clone()).or_default().registered += 1;
            }
            EventKind::OnboardingFailed { cohort: c, .. } => m.onboarding.entry(c.clone()).or_default().failed += 1,
            EventKind::Activated { device, cohort: c, .. } => {
                m.onboarding.entry(c.clone()).or_default().activated += 1;
                status.insert(*device, DeviceStatus::Active);
                rep.insert(*device, config.incentives.initial_reputation);
                if adversaries.contains(device) {
                    m.adversarial_activated += 1;
                }
            }
            EventKind::Submitted { .. } => {
                m.submitted += 1;
            }
            EventKind::SubmissionRefused { reason, .. } => *m.refused.entry(key_name(reason)).or_default() += 1,
            EventKind::Aggregated { txn, status: s, .. } => {
                if *s == crate::transmission::TxnStatus::Witnessed {
                    witnessed.insert(*txn);
                }
            }
            EventKind::TxnRejected { reason, .. } => {
                m.rejected_count += 1;
                *m.rejected_by_reason.entry(reason.clone()).or_default() += 1;
            }
            EventKind::TxnCommitted { txn, latency, .. } => {
                m.committed_count += 1;
                committed.insert(*txn, *latency);
                latencies.push(*latency);
            }
            EventKind::BlockCommitted { .. } => m.blocks_committed += 1,
            EventKind::BlockRejected { .. } => m.blocks_rejected += 1,
            EventKind::ProposalSkipped { reason, .. } => *m.proposals_skipped.entry(reason.clone()).or_default() += 1,
            EventKind::Synced { .. } => m.syncs += 1,
            EventKind::SyncFailed { .. } => m.sync_failures += 1,
            EventKind::Inspection { outcome, .. } => {
                let s = m.inspections.entry(kind_name(outcome.target_kind)).or_default();
                s.count += 1;
                s.failed += usize::from(!outcome.passed);
                if outcome.target_kind == TargetKind::Transaction {
                    if let Ok(id) = outcome.target.parse::<TxnId>() {
                        inspected.insert(id, outcome.passed);
                    }
                }
            }
            EventKind::Alert { kind, .. } => *m.alerts.entry(key_name(kind)).or_default() += 1,
            EventKind::Investigated { violations, .. } => {
                m.investigations += 1;
                m.investigations_with_violations += usize::from(!violations.is_empty());
            }
            EventKind::Quarantined { device, .. } => {
                m.quarantines += 1;
                if compromised.contains_key(device) {
                    detected.entry(*device).or_insert(e.tick);
                }
            }
            EventKind::StatusChanged { device, to, .. } => {
                status.insert(*device, *to);
                if *to != DeviceStatus::Active && compromised.contains_key(device) {
                    detected.entry(*device).or_insert(e.tick);
                }
            }
            EventKind::Incentive { event } => {
                let f = m.stake_flows.entry(event.kind.as_str().to_string()).or_default();
                f.count += 1;
                f.tokens += event.tokens;
                f.reputation += event.reputation;
                if let Some(r) = rep.get_mut(&event.subject) {
                    *r += event.reputation;
                }
                match event.kind {
                    IncentiveKind::TempBan => m.temp_bans += 1,
                    IncentiveKind::PermBan => m.perm_bans += 1,
                    _ => {}
                }
            }
            EventKind::DisputeOpened { .. } => m.disputes.opened += 1,
            EventKind::DisputeRefused { .. } => m.disputes.refused += 1,
            EventKind::DisputeClosed { dispute, body, at_fault, .. } => {
                disputes_closed.insert(*dispute);
                m.disputes.found_at_fault += usize::from(!at_fault.is_empty());
                *m.disputes.by_body.entry(key_name(body)).or_default() += 1;
            }
            EventKind::Appealed { .. } => m.disputes.appeals += 1,
            _ => {}
        }
    }
    while next_sample <= m.ticks {
        sample(&mut m, next_sample, &rep, &cohort);
        next_sample += epoch;
    }
    m.disputes.closed = disputes_closed.len();

    for (id, t) in &tampered {
        if *t {
            m.tampered.submitted += 1;
            m.tampered.witnessed += usize::from(witnessed.contains(id));
            if committed.contains_key(id) {
                m.tampered.committed += 1;
                if let Some(passed) = inspected.get(id) {
                    m.tampered.inspected_committed += 1;
                    m.tampered.detected_committed += usize::from(!passed);
                }
            }
        } else {
            match committed.get(id) {
                None => m.valid_uncommitted += 1,
                Some(l) if *l > m.liveness_bound => m.valid_late += 1,
                Some(_) => {}
            }
        }
    }
    m.false_commit_count = m.tampered.committed;
    m.commit_latency = Summary::of(latencies);

    m.compromised_devices = compromised.len();
    let detection: Vec<u64> = compromised
        .iter()
        .filter_map(|(k, t0)| detected.get(k).map(|t| t - t0))
        .collect();
    m.undetected_compromised = compromised.len() - detection.len();
    m.detection_latency = Summary::of(detection);

    m.adversarial_active = adversaries
        .iter()
        .filter(|k| status.get(k) == Some(&DeviceStatus::Active))
        .count();
    m.safety_ok = m.false_commit_count == 0;
    m.liveness_ok = m.valid_uncommitted == 0 && m.valid_late == 0;
    m
}
