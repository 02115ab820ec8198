//! The world's append-only event log.

use serde::{Deserialize, Serialize};

use crate::anomaly::{AlertKind, InvestigableEvent, ViolationKind};
use crate::arbitration::{DecidingBody, DisputeStage};
use crate::incentives::{IncentiveEvent, Tokens};
use crate::onboarding::{DeviceStatus, Roles};
use crate::primitives::{Digest, PublicKey};
use crate::stochastic::{InspectionOutcome, TargetKind};
use crate::transmission::{Judgement, TxnId, TxnStatus};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub tick: u64,
    #[serde(flatten)]
    pub kind: EventKind,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Refusal {
    Ineligible,
    NonceReplay,
    InFlight,
    NonceGap,
}

/// One validator's share of a committed block's vote weight, with the
/// inputs it was computed from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightAudit {
    pub validator: PublicKey,
    pub stake: f64,
    pub reputation: f64,
    pub weight: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum EventKind {
    Heartbeat {
        pending: usize,
        mempool: usize,
        height: u64,
    },

    // Ground truth. Only metrics read these.
    AdversaryAssigned {
        device: PublicKey,
        kind: String,
    },
    DeviceCompromised {
        device: PublicKey,
    },
    GroundTruth {
        txn: TxnId,
        tampered: bool,
    },

    Registered {
        device: PublicKey,
        cohort: String,
        roles: Roles,
        group: String,
    },
    OnboardingFailed {
        device: PublicKey,
        cohort: String,
        reason: String,
    },
    Activated {
        device: PublicKey,
        cohort: String,
        stake: Tokens,
    },
    Revalidated {
        device: PublicKey,
        passed: bool,
        forced: bool,
    },

    Submitted {
        txn: TxnId,
        sender: PublicKey,
        receiver: PublicKey,
        nonce: u64,
        size: u64,
    },
    SubmissionRefused {
        sender: PublicKey,
        nonce: u64,
        reason: Refusal,
    },
    PanelOpened {
        txn: TxnId,
        round: u32,
        panel: Vec<PublicKey>,
    },
    PanelUnavailable {
        txn: TxnId,
        needed: usize,
        found: usize,
    },
    WitnessCommitted {
        txn: TxnId,
        witness: PublicKey,
        commit: Digest,
    },
    WitnessRevealed {
        txn: TxnId,
        witness: PublicKey,
        verdict: Judgement,
        salt: String,
    },
    RevealMismatch {
        txn: TxnId,
        witness: PublicKey,
    },
    Aggregated {
        txn: TxnId,
        round: u32,
        valid: usize,
        invalid: usize,
        status: TxnStatus,
    },
    SentToArbitration {
        txn: TxnId,
        sender: PublicKey,
    },
    TxnRejected {
        txn: TxnId,
        sender: PublicKey,
        reason: String,
    },

    ProposalSkipped {
        round: u64,
        proposer: PublicKey,
        reason: String,
    },
    Proposed {
        round: u64,
        height: u64,
        proposer: PublicKey,
        digest: Digest,
        txns: usize,
        commit_at: u64,
    },
    Voted {
        height: u64,
        validator: PublicKey,
        accept: bool,
        weight: f64,
        problems: usize,
    },
    Trimmed {
        height: u64,
        txns: Vec<TxnId>,
    },
    BlockCommitted {
        height: u64,
        digest: Digest,
        proposer: PublicKey,
        txn_ids: Vec<TxnId>,
        accept_weight: f64,
        total_weight: f64,
        weights: Vec<WeightAudit>,
        receivers: usize,
    },
    BlockRejected {
        height: u64,
        proposer: PublicKey,
        accept_weight: f64,
        total_weight: f64,
    },
    TxnCommitted {
        txn: TxnId,
        sender: PublicKey,
        height: u64,
        latency: u64,
    },
    Synced {
        node: PublicKey,
        source: PublicKey,
        from: u64,
        to: u64,
    },
    SyncFailed {
        node: PublicKey,
        source: PublicKey,
        reason: String,
    },

    Inspection {
        outcome: InspectionOutcome,
        subject: Option<PublicKey>,
    },

    Alert {
        stream: String,
        subject: Option<PublicKey>,
        kind: AlertKind,
        /// Infinite scores (zero-variance window) are clamped to ±f64::MAX.
        z: f64,
        value: f64,
    },
    Investigated {
        stream: String,
        subject: Option<PublicKey>,
        from: u64,
        to: u64,
        events: usize,
        violations: Vec<(u64, ViolationKind)>,
    },
    Quarantined {
        device: PublicKey,
        reason: String,
    },
    QuarantineExtended {
        device: PublicKey,
    },
    Released {
        device: PublicKey,
    },
    StatusChanged {
        device: PublicKey,
        from: DeviceStatus,
        to: DeviceStatus,
    },
    BanLifted {
        device: PublicKey,
    },

    Incentive {
        event: IncentiveEvent,
    },

    DisputeOpened {
        dispute: u64,
        respondents: Vec<PublicKey>,
        complainants: Vec<PublicKey>,
        category: String,
        txn: Option<TxnId>,
    },
    DisputeRefused {
        respondents: Vec<PublicKey>,
        reason: String,
    },
    DisputeAdvanced {
        dispute: u64,
        stage: DisputeStage,
    },
    DisputeClosed {
        dispute: u64,
        body: DecidingBody,
        at_fault: Vec<PublicKey>,
        record: Digest,
    },
    Appealed {
        dispute: u64,
        appellant: PublicKey,
    },
}

impl EventKind {
    pub fn name(&self) -> &'static str {
        match self {
            EventKind::Heartbeat { .. } => "heartbeat",
            EventKind::AdversaryAssigned { .. } => "adversary_assigned",
            EventKind::DeviceCompromised { .. } => "device_compromised",
            EventKind::GroundTruth { .. } => "ground_truth",
            EventKind::Registered { .. } => "registered",
            EventKind::OnboardingFailed { .. } => "onboarding_failed",
            EventKind::Activated { .. } => "activated",
            EventKind::Revalidated { .. } => "revalidated",
            EventKind::Submitted { .. } => "submitted",
            EventKind::SubmissionRefused { .. } => "submission_refused",
            EventKind::PanelOpened { .. } => "panel_opened",
            EventKind::PanelUnavailable { .. } => "panel_unavailable",
            EventKind::WitnessCommitted { .. } => "witness_committed",
            EventKind::WitnessRevealed { .. } => "witness_revealed",
            EventKind::RevealMismatch { .. } => "reveal_mismatch",
            EventKind::Aggregated { .. } => "aggregated",
            EventKind::SentToArbitration { .. } => "sent_to_arbitration",
            EventKind::TxnRejected { .. } => "txn_rejected",
            EventKind::ProposalSkipped { .. } => "proposal_skipped",
            EventKind::Proposed { .. } => "proposed",
            EventKind::Voted { .. } => "voted",
            EventKind::Trimmed { .. } => "trimmed",
            EventKind::BlockCommitted { .. } => "block_committed",
            EventKind::BlockRejected { .. } => "block_rejected",
            EventKind::TxnCommitted { .. } => "txn_committed",
            EventKind::Synced { .. } => "synced",
            EventKind::SyncFailed { .. } => "sync_failed",
            EventKind::Inspection { .. } => "inspection",
            EventKind::Alert { .. } => "alert",
            EventKind::Investigated { .. } => "investigated",
            EventKind::Quarantined { .. } => "quarantined",
            EventKind::QuarantineExtended { .. } => "quarantine_extended",
            EventKind::Released { .. } => "released",
            EventKind::StatusChanged { .. } => "status_changed",
            EventKind::BanLifted { .. } => "ban_lifted",
            EventKind::Incentive { .. } => "incentive",
            EventKind::DisputeOpened { .. } => "dispute_opened",
            EventKind::DisputeRefused { .. } => "dispute_refused",
            EventKind::DisputeAdvanced { .. } => "dispute_advanced",
            EventKind::DisputeClosed { .. } => "dispute_closed",
            EventKind::Appealed { .. } => "appealed",
        }
    }

    /// Ground-truth records, invisible to protocol logic.
    pub fn is_truth(&self) -> bool {
        matches!(
            self,
            EventKind::AdversaryAssigned { .. } | EventKind::DeviceCompromised { .. } | EventKind::GroundTruth { .. }
        )
    }
}

pub fn clamp_score(z: f64) -> f64 {
    if z.is_nan() {
        0.0
    } else {
        z.clamp(-f64::MAX, f64::MAX)
    }
}

impl InvestigableEvent for Event {
    fn tick(&self) -> u64 {
        self.tick
    }

    fn involves(&self, s: &PublicKey) -> bool {
        use EventKind::*;
        match &self.kind {
            AdversaryAssigned { .. } | DeviceCompromised { .. } | GroundTruth { .. } | Heartbeat { .. } => false,
            Registered { device, .. }
            | OnboardingFailed { device, .. }
            | Activated { device, .. }
            | Revalidated { device, .. }
            | Quarantined { device, .. }
            | QuarantineExtended { device }
            | Released { device }
            | StatusChanged { device, .. }
            | BanLifted { device } => device == s,
            Submitted { sender, receiver, .. } => sender == s || receiver == s,
            SubmissionRefused { sender, .. } | SentToArbitration { sender, .. } | TxnRejected { sender, .. } | TxnCommitted { sender, .. } => {
                sender == s
            }
            PanelOpened { panel, .. } => panel.contains(s),
            PanelUnavailable { .. } | Aggregated { .. } | Trimmed { .. } | BlockRejected { .. } => false,
            WitnessCommitted { witness, .. } | WitnessRevealed { witness, .. } | RevealMismatch { witness, .. } => witness == s,
            ProposalSkipped { proposer, .. } | Proposed { proposer, .. } => proposer == s,
            Voted { validator, .. } => validator == s,
            BlockCommitted { proposer, weights, .. } => proposer == s || weights.iter().any(|w| w.validator == *s),
            Synced { node, source, .. } | SyncFailed { node, source, .. } => node == s || source == s,
            Inspection { subject, .. } | Alert { subject, .. } | Investigated { subject, .. } => subject.as_ref() == Some(s),
            Incentive { event } => event.subject == *s,
            DisputeOpened {
                respondents, complainants, ..
            } => respondents.contains(s) || complainants.contains(s),
            DisputeRefused { respondents, .. } => respondents.contains(s),
            DisputeAdvanced { .. } => false,
            DisputeClosed { at_fault, .. } => at_fault.contains(s),
            Appealed { appellant, .. } => appellant == s,
        }
    }

    fn violation_by(&self, s: &PublicKey) -> Option<ViolationKind> {
        match &self.kind {
            EventKind::RevealMismatch { witness, .. } if witness == s => Some(ViolationKind::CommitMismatch),
            EventKind::SubmissionRefused {
                sender,
                reason: Refusal::NonceReplay,
                ..
            } if sender == s => Some(ViolationKind::NonceReplay),
            EventKind::Inspection {
                outcome,
                subject: Some(subject),
            } if subject == s && !outcome.passed => Some(if outcome.target_kind == TargetKind::SyncBatch {
                ViolationKind::ForgedSync
            } else {
                ViolationKind::InspectionFailure
            }),
            EventKind::SyncFailed { source, .. } if source == s => Some(ViolationKind::ForgedSync),
            _ => None,
        }
    }
}
