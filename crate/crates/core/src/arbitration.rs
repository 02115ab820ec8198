//! Dispute pipeline: mediation, community review, panel arbitration and a
//! single appeal, with verdicts recorded on the ledger.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::consensus::{vote_weights, ConsensusError, Ledger};
use crate::incentives::{Cause, IncentiveError, IncentiveLedger, Severity, Tokens};
use crate::primitives::{weighted_order, CanonicalHasher, Digest, PublicKey, SamplingError, SeededRng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArbitrationConfig {
    pub panel_size: usize,
    pub community_threshold: f64,
    pub appeal_bond: Tokens,
    pub arbitrator_min_reputation: f64,
    /// Severity applied to respondents found at fault.
    pub fault_severity: Severity,
}

impl Default for ArbitrationConfig {
    fn default() -> Self {
        Self {
            panel_size: 5,
            community_threshold: 2.0 / 3.0,
            appeal_bond: Tokens::whole(20),
            arbitrator_min_reputation: 0.8,
            fault_severity: Severity::Major,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum DisputeStage {
    Mediation,
    CommunityReview,
    PanelSelection,
    FinalArbitration,
    Closed,
    Appealed,
}

impl DisputeStage {
    pub fn as_str(self) -> &'static str {
        match self {
            DisputeStage::Mediation => "mediation",
            DisputeStage::CommunityReview => "community_review",
            DisputeStage::PanelSelection => "panel_selection",
            DisputeStage::FinalArbitration => "final_arbitration",
            DisputeStage::Closed => "closed",
            DisputeStage::Appealed => "appealed",
        }
    }
}

/// Allowed stage moves: strictly forward through the pipeline, plus the
/// single Closed → Appealed → Closed detour.
pub fn transition_allowed(from: DisputeStage, to: DisputeStage, appeal_used: bool) -> bool {
    use DisputeStage::*;
    match (from, to) {
        (Closed, Appealed) => !appeal_used,
        (Appealed, Closed) => true,
        (Appealed, _) | (Closed, _) => false,
        (a, b) => b > a && b != Appealed,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PartyRole {
    Complainant,
    Respondent,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Party {
    pub key: PublicKey,
    pub role: PartyRole,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Claim {
    /// Matched against participants' expertise tags.
    pub category: String,
    /// Indices into the world event log.
    pub events: Vec<u64>,
    pub txn: Option<Digest>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum DecidingBody {
    Mediator,
    Community,
    Panel,
    AppealPanel,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Remedy {
    Penalize { subject: PublicKey, severity: Severity },
    Restore { subject: PublicKey },
    Compensate { subject: PublicKey },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Verdict {
    pub at_fault: Vec<PublicKey>,
    pub remedies: Vec<Remedy>,
    pub rationale_digest: Digest,
    pub deciding_body: DecidingBody,
    pub recorded_block: Option<u64>,
}

impl Verdict {
    /// Digest of the verdict content as recorded on the ledger.
    pub fn record_digest(&self, dispute_id: u64) -> Digest {
        let mut h = CanonicalHasher::new("gdp/verdict");
        h.u64(dispute_id);
        h.u64(self.at_fault.len() as u64);
        for k in &self.at_fault {
            h.fixed(&k.0);
        }
        h.u64(self.remedies.len() as u64);
        for r in &self.remedies {
            match r {
                Remedy::Penalize { subject, severity } => {
                    h.u64(0).fixed(&subject.0).u64(*severity as u64);
                }
                Remedy::Restore { subject } => {
                    h.u64(1).fixed(&subject.0);
                }
                Remedy::Compensate { subject } => {
                    h.u64(2).fixed(&subject.0);
                }
            }
        }
        h.fixed(&self.rationale_digest.0).u64(self.deciding_body as u64);
        h.finish()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dispute {
    pub id: u64,
    pub parties: Vec<Party>,
    pub claim: Claim,
    pub stage: DisputeStage,
    pub decision: Option<Verdict>,
    pub appeal_used: bool,
    pub mediator: Option<PublicKey>,
    pub panel: Vec<PublicKey>,
    pub appeal_panel: Vec<PublicKey>,
    pub opened_tick: u64,
    pub history: Vec<(u64, DisputeStage)>,
    /// Verdicts whose remedies have been handed out, in order.
    pub remedies_dispatched: u32,
    /// Every verdict this dispute produced (the appeal adds a second).
    pub verdicts: Vec<Verdict>,
}

impl Dispute {
    pub fn respondents(&self) -> impl Iterator<Item = &PublicKey> {
        self.parties.iter().filter(|p| p.role == PartyRole::Respondent).map(|p| &p.key)
    }

    pub fn complainants(&self) -> impl Iterator<Item = &PublicKey> {
        self.parties.iter().filter(|p| p.role == PartyRole::Complainant).map(|p| &p.key)
    }

    pub fn is_party(&self, k: &PublicKey) -> bool {
        self.parties.iter().any(|p| p.key == *k)
    }

    fn advance(&mut self, to: DisputeStage, tick: u64) -> Result<(), ArbitrationError> {
        if !transition_allowed(self.stage, to, self.appeal_used) {
            return Err(ArbitrationError::WrongStage(self.stage));
        }
        self.stage = to;
        self.history.push((tick, to));
        Ok(())
    }

    /// Remedy lists for verdicts not yet dispatched. Each verdict's
    /// remedies come out exactly once.
    pub fn take_remedies(&mut self) -> Vec<Remedy> {
        let from = self.remedies_dispatched as usize;
        let out = self.verdicts[from..].iter().flat_map(|v| v.remedies.iter().cloned()).collect();
        self.remedies_dispatched = self.verdicts.len() as u32;
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParticipantStatus {
    Active,
    Quarantined,
    Banned,
}

/// A device as arbitration sees it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Participant {
    pub key: PublicKey,
    pub reputation: f64,
    pub stake: f64,
    pub operator_group: String,
    pub expertise: Vec<String>,
    pub arbitrator: bool,
    pub status: ParticipantStatus,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ArbitrationError {
    #[error("claim cites no existing logged event")]
    EmptyClaim,
    #[error("unknown or ineligible party {0:?}")]
    UnknownParty(PublicKey),
    #[error("operation not allowed at stage {0:?}")]
    WrongStage(DisputeStage),
    #[error("no dispute with id {0}")]
    UnknownDispute(u64),
    #[error("insufficient arbitrators: need {needed}, eligible {eligible}")]
    InsufficientArbitrators { needed: usize, eligible: usize },
    #[error("no conflict-free mediator available")]
    NoMediator,
    #[error("appeal already used")]
    AppealExhausted,
    #[error("appellant {0:?} is not a party")]
    NotAParty(PublicKey),
    #[error("insufficient bond: {0}")]
    InsufficientBond(IncentiveError),
    #[error(transparent)]
    Sampling(#[from] SamplingError),
}

pub const DISPUTE_CSV_HEADER: &str = "tick,dispute_id,stage,detail";

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct DisputeRegistry {
    pub config: ArbitrationConfig,
    disputes: BTreeMap<u64, Dispute>,
    next_id: u64,
    /// Verdict record digests awaiting a block, in arrival order.
    pending_records: Vec<(Digest, u64)>,
}

fn conflicted(dispute: &Dispute, participants_by_key: &BTreeMap<PublicKey, &Participant>, candidate: &Participant) -> bool {
    dispute.is_party(&candidate.key)
        || dispute.parties.iter().any(|p| {
            participants_by_key
                .get(&p.key)
                .is_some_and(|pp| pp.operator_group == candidate.operator_group)
        })
}

fn index(participants: &[Participant]) -> BTreeMap<PublicKey, &Participant> {
    participants.iter().map(|p| (p.key, p)).collect()
}

impl DisputeRegistry {
    pub fn new(config: ArbitrationConfig) -> Self {
        Self {
            config,
            ..Default::default()
        }
    }

    pub fn get(&self, id: u64) -> Option<&Dispute> {
        self.disputes.get(&id)
    }

    pub fn get_mut(&mut self, id: u64) -> Option<&mut Dispute> {
        self.disputes.get_mut(&id)
    }

    pub fn disputes(&self) -> impl Iterator<Item = &Dispute> {
        self.disputes.values()
    }

    pub fn open_ids(&self) -> Vec<u64> {
        self.disputes
            .values()
            .filter(|d| d.stage != DisputeStage::Closed)
            .map(|d| d.id)
            .collect()
    }

    fn dispute_mut(&mut self, id: u64) -> Result<&mut Dispute, ArbitrationError> {
        self.disputes.get_mut(&id).ok_or(ArbitrationError::UnknownDispute(id))
    }

    /// Open a dispute at Mediation with a reputation-weighted,
    /// conflict-free mediator. Candidates whose expertise matches the
    /// claim category are preferred when any exist.
    pub fn open_dispute(
        &mut self,
        parties: Vec<Party>,
        claim: Claim,
        log_len: u64,
        participants: &[Participant],
        rng: &mut SeededRng,
        tick: u64,
    ) -> Result<&Dispute, ArbitrationError> {
        if claim.events.is_empty() || claim.events.iter().any(|&e| e >= log_len) {
            return Err(ArbitrationError::EmptyClaim);
        }
        let by_key = index(participants);
        for p in &parties {
            match by_key.get(&p.key) {
                Some(pp) if pp.status != ParticipantStatus::Banned => {}
                _ => return Err(ArbitrationError::UnknownParty(p.key)),
            }
        }
        let mut dispute = Dispute {
            id: self.next_id,
            parties,
            claim,
            stage: DisputeStage::Mediation,
            decision: None,
            appeal_used: false,
            mediator: None,
            panel: Vec::new(),
            appeal_panel: Vec::new(),
            opened_tick: tick,
            history: vec![(tick, DisputeStage::Mediation)],
            remedies_dispatched: 0,
            verdicts: Vec::new(),
        };
        let eligible: Vec<&Participant> = participants
            .iter()
            .filter(|c| c.status == ParticipantStatus::Active && !conflicted(&dispute, &by_key, c))
            .collect();
        let experts: Vec<&Participant> = eligible
            .iter()
            .copied()
            .filter(|c| c.expertise.iter().any(|t| *t == dispute.claim.category))
            .collect();
        let pool = if experts.is_empty() { eligible } else { experts };
        let weights: Vec<f64> = pool.iter().map(|c| c.reputation.max(0.0)).collect();
        let order = weighted_order(rng, &weights)?;
        let mediator = order.first().map(|&i| pool[i].key).ok_or(ArbitrationError::NoMediator)?;
        dispute.mediator = Some(mediator);
        let id = dispute.id;
        self.disputes.insert(id, dispute);
        self.next_id += 1;
        Ok(&self.disputes[&id])
    }

    /// Build a verdict with the standard remedies for the fault finding.
    pub fn make_verdict(&self, dispute: &Dispute, fault: bool, body: DecidingBody) -> Verdict {
        let respondents: Vec<PublicKey> = dispute.respondents().copied().collect();
        let mut remedies = Vec::new();
        if fault {
            for r in &respondents {
                remedies.push(Remedy::Penalize {
                    subject: *r,
                    severity: self.config.fault_severity,
                });
            }
            for c in dispute.complainants() {
                remedies.push(Remedy::Compensate { subject: *c });
            }
        } else {
            for r in &respondents {
                remedies.push(Remedy::Restore { subject: *r });
            }
        }
        let mut h = CanonicalHasher::new("gdp/rationale");
        h.u64(dispute.id).u64(fault as u64);
        for e in &dispute.claim.events {
            h.u64(*e);
        }
        Verdict {
            at_fault: if fault { respondents } else { Vec::new() },
            remedies,
            rationale_digest: h.finish(),
            deciding_body: body,
            recorded_block: None,
        }
    }

    fn close(&mut self, id: u64, verdict: Verdict, tick: u64) -> Result<Verdict, ArbitrationError> {
        let d = self.dispute_mut(id)?;
        d.advance(DisputeStage::Closed, tick)?;
        d.decision = Some(verdict.clone());
        d.verdicts.push(verdict.clone());
        let digest = verdict.record_digest(id);
        self.pending_records.push((digest, id));
        Ok(verdict)
    }

    /// Mediator proposes a fault finding; all parties must accept it.
    pub fn mediate(
        &mut self,
        id: u64,
        proposed_fault: bool,
        party_accepts: &dyn Fn(&PublicKey, bool) -> bool,
        tick: u64,
    ) -> Result<DisputeStage, ArbitrationError> {
        let d = self.disputes.get(&id).ok_or(ArbitrationError::UnknownDispute(id))?;
        if d.stage != DisputeStage::Mediation {
            return Err(ArbitrationError::WrongStage(d.stage));
        }
        if d.parties.iter().all(|p| party_accepts(&p.key, proposed_fault)) {
            let v = self.make_verdict(d, proposed_fault, DecidingBody::Mediator);
            self.close(id, v, tick)?;
            Ok(DisputeStage::Closed)
        } else {
            self.dispute_mut(id)?.advance(DisputeStage::CommunityReview, tick)?;
            Ok(DisputeStage::CommunityReview)
        }
    }

    /// Conflict-free voters of a dispute: Active, not a party, and not in a
    /// party's operator group.
    pub fn community_voters<'a>(&self, dispute: &Dispute, participants: &'a [Participant]) -> Vec<&'a Participant> {
        let by_key = index(participants);
        participants
            .iter()
            .filter(|c| c.status == ParticipantStatus::Active && !conflicted(dispute, &by_key, c))
            .collect()
    }

    /// Stake/reputation weighted vote of all conflict-free Active devices.
    /// Returns the new stage and the voters polled.
    pub fn community_review(
        &mut self,
        id: u64,
        participants: &[Participant],
        stake_share: f64,
        reputation_share: f64,
        votes_fault: &dyn Fn(&PublicKey) -> bool,
        tick: u64,
    ) -> Result<(DisputeStage, Vec<PublicKey>), ArbitrationError> {
        let d = self.disputes.get(&id).ok_or(ArbitrationError::UnknownDispute(id))?;
        if d.stage != DisputeStage::CommunityReview {
            return Err(ArbitrationError::WrongStage(d.stage));
        }
        let voters = self.community_voters(d, participants);
        let stakes: Vec<f64> = voters.iter().map(|v| v.stake).collect();
        let reps: Vec<f64> = voters.iter().map(|v| v.reputation).collect();
        let weights = vote_weights(&stakes, &reps, stake_share, reputation_share);
        let (mut fault_w, mut clear_w) = (0.0, 0.0);
        for (v, w) in voters.iter().zip(&weights) {
            if votes_fault(&v.key) {
                fault_w += w;
            } else {
                clear_w += w;
            }
        }
        let cast = fault_w + clear_w;
        let keys: Vec<PublicKey> = voters.iter().map(|v| v.key).collect();
        let threshold = self.config.community_threshold;
        let outcome = if cast > 0.0 && fault_w >= threshold * cast {
            Some(true)
        } else if cast > 0.0 && clear_w >= threshold * cast {
            Some(false)
        } else {
            None
        };
        match outcome {
            Some(fault) => {
                let v = self.make_verdict(d, fault, DecidingBody::Community);
                self.close(id, v, tick)?;
                Ok((DisputeStage::Closed, keys))
            }
            None => {
                self.dispute_mut(id)?.advance(DisputeStage::PanelSelection, tick)?;
                Ok((DisputeStage::PanelSelection, keys))
            }
        }
    }

    fn draw_arbitrators(
        &self,
        dispute: &Dispute,
        participants: &[Participant],
        also_exclude: &BTreeSet<PublicKey>,
        rng: &mut SeededRng,
    ) -> Result<Vec<PublicKey>, ArbitrationError> {
        let by_key = index(participants);
        let pool: Vec<&Participant> = participants
            .iter()
            .filter(|c| {
                c.arbitrator
                    && c.status == ParticipantStatus::Active
                    && c.reputation >= self.config.arbitrator_min_reputation
                    && Some(c.key) != dispute.mediator
                    && !also_exclude.contains(&c.key)
                    && !conflicted(dispute, &by_key, c)
            })
            .collect();
        let n = self.config.panel_size;
        if pool.len() < n {
            return Err(ArbitrationError::InsufficientArbitrators {
                needed: n,
                eligible: pool.len(),
            });
        }
        let weights: Vec<f64> = pool.iter().map(|c| c.reputation).collect();
        let order = weighted_order(rng, &weights)?;
        Ok(order[..n].iter().map(|&i| pool[i].key).collect())
    }

    pub fn select_panel(&mut self, id: u64, participants: &[Participant], rng: &mut SeededRng, tick: u64) -> Result<Vec<PublicKey>, ArbitrationError> {
        let d = self.disputes.get(&id).ok_or(ArbitrationError::UnknownDispute(id))?;
        if d.stage != DisputeStage::PanelSelection {
            return Err(ArbitrationError::WrongStage(d.stage));
        }
        let panel = self.draw_arbitrators(d, participants, &BTreeSet::new(), rng)?;
        let d = self.dispute_mut(id)?;
        d.panel = panel.clone();
        d.advance(DisputeStage::FinalArbitration, tick)?;
        Ok(panel)
    }

    /// Simple majority of the panel decides.
    pub fn arbitrate(&mut self, id: u64, votes_fault: &dyn Fn(&PublicKey) -> bool, tick: u64) -> Result<Verdict, ArbitrationError> {
        let d = self.disputes.get(&id).ok_or(ArbitrationError::UnknownDispute(id))?;
        if d.stage != DisputeStage::FinalArbitration {
            return Err(ArbitrationError::WrongStage(d.stage));
        }
        let fault_votes = d.panel.iter().filter(|k| votes_fault(k)).count();
        let fault = 2 * fault_votes > d.panel.len();
        let v = self.make_verdict(d, fault, DecidingBody::Panel);
        self.close(id, v, tick)
    }

    /// One appeal per dispute, heard by a panel disjoint from the first.
    /// The bond is refunded if the appellant prevails and forfeited
    /// otherwise. The appeal verdict's remedies only cover a reversal.
    #[allow(clippy::too_many_arguments)]
    pub fn appeal(
        &mut self,
        id: u64,
        appellant: &PublicKey,
        participants: &[Participant],
        votes_fault: &dyn Fn(&PublicKey) -> bool,
        incentives: &mut IncentiveLedger,
        rng: &mut SeededRng,
        tick: u64,
    ) -> Result<Verdict, ArbitrationError> {
        let d = self.disputes.get(&id).ok_or(ArbitrationError::UnknownDispute(id))?;
        if d.stage != DisputeStage::Closed {
            return Err(ArbitrationError::WrongStage(d.stage));
        }
        if d.appeal_used {
            return Err(ArbitrationError::AppealExhausted);
        }
        if !d.is_party(appellant) {
            return Err(ArbitrationError::NotAParty(*appellant));
        }
        let exclude: BTreeSet<PublicKey> = d.panel.iter().copied().collect();
        let panel = self.draw_arbitrators(d, participants, &exclude, rng)?;
        let bond = self.config.appeal_bond;
        incentives
            .post_bond(appellant, bond, Cause::Dispute(id), tick)
            .map_err(ArbitrationError::InsufficientBond)?;

        let original_fault = !d.decision.as_ref().expect("closed dispute has a decision").at_fault.is_empty();
        let fault_votes = panel.iter().filter(|k| votes_fault(k)).count();
        let fault = 2 * fault_votes > panel.len();
        let mut verdict = self.make_verdict(d, fault, DecidingBody::AppealPanel);
        if fault == original_fault {
            verdict.remedies.clear();
        }
        let appellant_is_respondent = d.respondents().any(|r| r == appellant);
        let appellant_won = if appellant_is_respondent { !fault } else { fault };

        let d = self.dispute_mut(id)?;
        d.appeal_panel = panel;
        d.advance(DisputeStage::Appealed, tick)?;
        d.appeal_used = true;
        incentives
            .settle_bond(appellant, bond, appellant_won, Cause::Dispute(id), tick)
            .expect("bond was just posted");
        self.close(id, verdict, tick)
    }

    /// Verdict records waiting for a block.
    pub fn pending_records(&self) -> Vec<Digest> {
        self.pending_records.iter().map(|p| p.0).collect()
    }

    /// Mark records that made it into the block at `height`.
    pub fn mark_recorded(&mut self, included: &BTreeSet<Digest>, height: u64) {
        let (done, keep): (Vec<_>, Vec<_>) = self.pending_records.drain(..).partition(|(d, _)| included.contains(d));
        self.pending_records = keep;
        for (digest, id) in done {
            if let Some(d) = self.disputes.get_mut(&id) {
                for v in d.verdicts.iter_mut() {
                    if v.recorded_block.is_none() && v.record_digest(id) == digest {
                        v.recorded_block = Some(height);
                    }
                }
                if let Some(dec) = d.decision.as_mut() {
                    if dec.recorded_block.is_none() && dec.record_digest(id) == digest {
                        dec.recorded_block = Some(height);
                    }
                }
            }
        }
    }

    /// Re-derive every recorded verdict digest and check the ledger block it
    /// claims to live in still lists it.
    pub fn verify_recorded_verdicts(&self, ledger: &Ledger) -> Result<(), ConsensusError> {
        for d in self.disputes.values() {
            for v in &d.verdicts {
                let Some(h) = v.recorded_block else { continue };
                let digest = v.record_digest(d.id);
                let ok = ledger
                    .blocks()
                    .get(h as usize)
                    .is_some_and(|b| b.txn_ids.contains(&digest));
                if !ok {
                    return Err(ConsensusError::ChainIntegrityViolation(format!(
                        "verdict of dispute {} no longer matches its ledger record at height {h}",
                        d.id
                    )));
                }
            }
        }
        Ok(())
    }
}
