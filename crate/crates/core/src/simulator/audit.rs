//! Cross-cutting invariants checked against a finished world and its log.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use crate::arbitration::DisputeStage;
use crate::consensus::verify_blocks_full;
use crate::primitives::PublicKey;

use super::events::EventKind;
use super::world::{Behavior, World};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Invariant {
    TokenConservation,
    ReputationBounds,
    ChainIntegrity,
    StageMonotonicity,
    QuarantineExclusion,
    PrefixConsistency,
}

impl Invariant {
    pub const ALL: [Invariant; 6] = [
        Invariant::TokenConservation,
        Invariant::ReputationBounds,
        Invariant::ChainIntegrity,
        Invariant::StageMonotonicity,
        Invariant::QuarantineExclusion,
        Invariant::PrefixConsistency,
    ];
}

#[derive(Clone, Debug, PartialEq)]
pub struct Violation {
    pub invariant: Invariant,
    pub detail: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}: {}", self.invariant, self.detail)
    }
}

fn stage_rank(s: DisputeStage) -> u8 {
    match s {
        DisputeStage::Mediation => 0,
        DisputeStage::CommunityReview => 1,
        DisputeStage::PanelSelection => 2,
        DisputeStage::FinalArbitration => 3,
        DisputeStage::Closed => 4,
        DisputeStage::Appealed => 5,
    }
}

/// Run every invariant. An empty result means all hold.
pub fn audit(w: &World) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut fail = |invariant, detail: String| out.push(Violation { invariant, detail });

    if !w.incentives().conserved() {
        fail(Invariant::TokenConservation, "staked + liquid + treasury + escrow != deposited + minted".into());
    }

    // Reputation stays in [0, 1] at every step, replayed from the log.
    let initial = w.config.incentives.initial_reputation;
    let mut rep: BTreeMap<PublicKey, f64> = BTreeMap::new();
    for (i, e) in w.log().iter().enumerate() {
        match &e.kind {
            EventKind::Activated { device, .. } => {
                rep.insert(*device, initial);
            }
            EventKind::Incentive { event } => {
                if let Some(r) = rep.get_mut(&event.subject) {
                    *r += event.reputation;
                    if !(-1e-9..=1.0 + 1e-9).contains(r) {
                        fail(Invariant::ReputationBounds, format!("event {i}: reputation {r}"));
                    }
                }
            }
            _ => {}
        }
    }
    for (_, r) in w.incentives().accounts() {
        if !(0.0..=1.0).contains(&r.score) {
            fail(Invariant::ReputationBounds, format!("final score {}", r.score));
        }
    }

    let threshold = w.config.consensus.commit_threshold;
    let known = |k: &PublicKey| w.validator_keys().contains(k);
    let honest = |k: &PublicKey| w.actor(k).is_some_and(|a| a.behavior != Behavior::ForgedSync);
    let chain = w.chain();
    if let Err(e) = verify_blocks_full(&chain.blocks()[1..], &chain.blocks()[0], threshold, &known) {
        fail(Invariant::ChainIntegrity, format!("canonical chain: {e}"));
    }
    for (k, ledger) in w.node_ledgers().iter().filter(|(k, _)| honest(k)) {
        if let Err(e) = verify_blocks_full(&ledger.blocks()[1..], &ledger.blocks()[0], threshold, &known) {
            fail(Invariant::ChainIntegrity, format!("node {}: {e}", k.short()));
        }
        if !ledger.is_prefix_of(chain) {
            fail(Invariant::PrefixConsistency, format!("node {} diverges from the chain", k.short()));
        }
    }

    for d in w.dispute_registry().disputes() {
        let Some((&(_, first), rest)) = d.history.split_first() else { continue };
        if first != DisputeStage::Mediation {
            fail(Invariant::StageMonotonicity, format!("dispute {} opened at {first:?}", d.id));
        }
        let mut prev = first;
        for &(tick, s) in rest {
            let ok = stage_rank(s) > stage_rank(prev) || (prev == DisputeStage::Appealed && s == DisputeStage::Closed);
            if !ok {
                fail(
                    Invariant::StageMonotonicity,
                    format!("dispute {} went {prev:?} -> {s:?} at tick {tick}", d.id),
                );
            }
            prev = s;
        }
    }
    let mut closed: BTreeSet<u64> = BTreeSet::new();
    let mut last: BTreeMap<u64, DisputeStage> = BTreeMap::new();
    for e in w.log() {
        match &e.kind {
            EventKind::DisputeAdvanced { dispute, stage } => {
                let prev = last.insert(*dispute, *stage).unwrap_or(DisputeStage::Mediation);
                if stage_rank(*stage) <= stage_rank(prev) || closed.contains(dispute) {
                    fail(Invariant::StageMonotonicity, format!("dispute {dispute} logged {prev:?} -> {stage:?}"));
                }
                if *stage == DisputeStage::Closed {
                    closed.insert(*dispute);
                }
            }
            EventKind::Appealed { dispute, .. } if !closed.contains(dispute) => {
                fail(Invariant::StageMonotonicity, format!("dispute {dispute} appealed before closing"));
            }
            _ => {}
        }
    }

    // No panel, proposal or vote may include a subject quarantined at
    // that point of the log.
    let mut quarantined: BTreeSet<PublicKey> = BTreeSet::new();
    for (i, e) in w.log().iter().enumerate() {
        let members: Vec<PublicKey> = match &e.kind {
            EventKind::Quarantined { device, .. } => {
                quarantined.insert(*device);
                continue;
            }
            EventKind::Released { device } => {
                quarantined.remove(device);
                continue;
            }
            EventKind::PanelOpened { panel, .. } => panel.clone(),
            EventKind::Proposed { proposer, .. } => vec![*proposer],
            EventKind::Voted { validator, .. } => vec![*validator],
            _ => continue,
        };
        for m in members.iter().filter(|m| quarantined.contains(m)) {
            fail(
                Invariant::QuarantineExclusion,
                format!("event {i} ({}) includes quarantined {}", e.kind.name(), m.short()),
            );
        }
    }
    out
}
