//! Witness-validated data transactions: panel selection, commit-reveal
//! attestations, quorum aggregation, re-escalation and witness evaluation.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::primitives::{digest_parts, verify, weighted_order, CanonicalHasher, Digest, KeyPair, PublicKey, SamplingError, SeededRng, Signature};

pub type TxnId = Digest;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum TxnStatus {
    Pending,
    Witnessed,
    Committed,
    Rejected,
    Disputed,
}

impl TxnStatus {
    pub fn is_terminal(self) -> bool {
        matches!(self, TxnStatus::Committed | TxnStatus::Rejected)
    }
}

/// A witness's verdict on a transaction.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Judgement {
    Valid,
    Invalid,
}

impl Judgement {
    fn byte(self) -> u8 {
        match self {
            Judgement::Valid => 1,
            Judgement::Invalid => 0,
        }
    }

    pub fn flip(self) -> Self {
        match self {
            Judgement::Valid => Judgement::Invalid,
            Judgement::Invalid => Judgement::Valid,
        }
    }
}

impl fmt::Display for Judgement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Judgement::Valid => "valid",
            Judgement::Invalid => "invalid",
        })
    }
}

pub fn commitment(judgement: Judgement, salt: &[u8; 16]) -> Digest {
    digest_parts(&[&[judgement.byte()], salt])
}

fn attestation_message(txn_id: &TxnId, commit: &Digest) -> [u8; 64] {
    let mut m = [0u8; 64];
    m[..32].copy_from_slice(&txn_id.0);
    m[32..].copy_from_slice(&commit.0);
    m
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Attestation {
    pub witness: PublicKey,
    pub txn_id: TxnId,
    pub commit: Digest,
    pub revealed_verdict: Option<Judgement>,
    pub salt: Option<[u8; 16]>,
    pub signature: Signature,
    /// Set when a reveal did not open the commitment.
    pub equivocated: bool,
}

impl Attestation {
    /// Commit phase: sign `(txn_id || digest(verdict || salt))`.
    pub fn commit(witness: &KeyPair, txn_id: TxnId, judgement: Judgement, salt: [u8; 16]) -> Self {
        let commit = commitment(judgement, &salt);
        Self {
            witness: witness.public_key,
            txn_id,
            commit,
            revealed_verdict: None,
            salt: None,
            signature: witness.sign(&attestation_message(&txn_id, &commit)),
            equivocated: false,
        }
    }

    pub fn signature_valid(&self) -> bool {
        verify(&self.witness, &attestation_message(&self.txn_id, &self.commit), &self.signature)
    }

    /// The commit binding holds for an accepted reveal.
    pub fn binding_holds(&self) -> bool {
        match (self.revealed_verdict, &self.salt) {
            (Some(v), Some(s)) => commitment(v, s) == self.commit,
            (None, None) => true,
            _ => false,
        }
    }

    /// Counted verdict: unrevealed and equivocated attestations are Invalid.
    pub fn counted(&self) -> Judgement {
        if self.equivocated {
            Judgement::Invalid
        } else {
            self.revealed_verdict.unwrap_or(Judgement::Invalid)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WitnessPanelConfig {
    pub k: usize,
    /// `None` means `ceil(2k/3)`.
    pub quorum: Option<usize>,
    pub diversity: usize,
    pub reveal_deadline: u64,
    pub max_escalations: u32,
}

impl Default for WitnessPanelConfig {
    fn default() -> Self {
        Self {
            k: 5,
            quorum: None,
            diversity: 1,
            reveal_deadline: 20,
            max_escalations: 2,
        }
    }
}

impl WitnessPanelConfig {
    pub fn quorum(&self) -> usize {
        self.quorum.unwrap_or((2 * self.k).div_ceil(3))
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.k == 0 {
            return Err("k must be at least 1".into());
        }
        let q = self.quorum();
        if q == 0 || q > self.k {
            return Err(format!("quorum {q} must lie in 1..={}", self.k));
        }
        if self.diversity == 0 {
            return Err("diversity must be at least 1".into());
        }
        Ok(())
    }
}

/// Aggregation rule. Valid reveals at quorum witness the transaction,
/// Invalid reveals at quorum reject it, anything in between is disputed.
pub fn aggregate_rule(valid: usize, invalid: usize, quorum: usize) -> TxnStatus {
    if valid >= quorum {
        TxnStatus::Witnessed
    } else if invalid >= quorum {
        TxnStatus::Rejected
    } else {
        TxnStatus::Disputed
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataTransaction {
    pub id: TxnId,
    pub sender: PublicKey,
    pub receiver: PublicKey,
    pub payload_digest: Digest,
    pub payload_size: u64,
    pub nonce: u64,
    pub created_tick: u64,
    pub attestations: Vec<Attestation>,
    pub status: TxnStatus,
    pub panel: Vec<PublicKey>,
    pub panel_opened_tick: u64,
    /// Earlier panels with their attestations, oldest first.
    pub past_rounds: Vec<(Vec<PublicKey>, Vec<Attestation>)>,
    pub escalations: u32,
}

impl DataTransaction {
    pub fn new(sender: PublicKey, receiver: PublicKey, payload_digest: Digest, payload_size: u64, nonce: u64, created_tick: u64) -> Self {
        let mut h = CanonicalHasher::new("gdp/txn");
        h.fixed(&sender.0)
            .fixed(&receiver.0)
            .fixed(&payload_digest.0)
            .u64(payload_size)
            .u64(nonce)
            .u64(created_tick);
        Self {
            id: h.finish(),
            sender,
            receiver,
            payload_digest,
            payload_size,
            nonce,
            created_tick,
            attestations: Vec::new(),
            status: TxnStatus::Pending,
            panel: Vec::new(),
            panel_opened_tick: created_tick,
            past_rounds: Vec::new(),
            escalations: 0,
        }
    }

    pub fn reveal_deadline(&self, cfg: &WitnessPanelConfig) -> u64 {
        self.panel_opened_tick + cfg.reveal_deadline
    }

    pub fn all_committed(&self) -> bool {
        !self.panel.is_empty() && self.attestations.len() == self.panel.len()
    }

    pub fn all_revealed(&self) -> bool {
        self.all_committed() && self.attestations.iter().all(|a| a.revealed_verdict.is_some() || a.equivocated)
    }

    pub fn attestation(&self, witness: &PublicKey) -> Option<&Attestation> {
        self.attestations.iter().find(|a| a.witness == *witness)
    }

    /// Every witness that has ever sat on a panel for this transaction.
    pub fn all_panelists(&self) -> BTreeSet<PublicKey> {
        self.past_rounds
            .iter()
            .flat_map(|(p, _)| p.iter().copied())
            .chain(self.panel.iter().copied())
            .collect()
    }

    /// `(valid, invalid)` counts over the current panel; absent witnesses
    /// count as Invalid.
    pub fn tally(&self) -> (usize, usize) {
        let valid = self.attestations.iter().filter(|a| a.counted() == Judgement::Valid).count();
        (valid, self.panel.len() - valid)
    }

    pub fn open_panel(&mut self, panel: Vec<PublicKey>, tick: u64) {
        self.panel = panel;
        self.panel_opened_tick = tick;
    }

    /// Record a witness commitment.
    pub fn witness_commit(&mut self, attestation: Attestation) -> Result<(), TransmissionError> {
        if self.status != TxnStatus::Pending {
            return Err(TransmissionError::WrongStatus(self.status));
        }
        if !self.panel.contains(&attestation.witness) {
            return Err(TransmissionError::NotOnPanel(attestation.witness));
        }
        if self.attestation(&attestation.witness).is_some() {
            return Err(TransmissionError::AlreadyCommitted(attestation.witness));
        }
        if attestation.txn_id != self.id || !attestation.signature_valid() || attestation.revealed_verdict.is_some() {
            return Err(TransmissionError::BadAttestation(attestation.witness));
        }
        self.attestations.push(attestation);
        Ok(())
    }

    /// Open a commitment. A reveal that does not match marks the
    /// attestation as equivocated and still returns `CommitMismatch`.
    pub fn witness_reveal(
        &mut self,
        witness: &PublicKey,
        verdict: Judgement,
        salt: [u8; 16],
        tick: u64,
        cfg: &WitnessPanelConfig,
    ) -> Result<(), TransmissionError> {
        if self.status != TxnStatus::Pending {
            return Err(TransmissionError::WrongStatus(self.status));
        }
        if !self.all_committed() && tick < self.reveal_deadline(cfg) {
            return Err(TransmissionError::RevealTooEarly {
                open_at: self.reveal_deadline(cfg),
            });
        }
        let att = self
            .attestations
            .iter_mut()
            .find(|a| a.witness == *witness)
            .ok_or(TransmissionError::NotOnPanel(*witness))?;
        if att.revealed_verdict.is_some() || att.equivocated {
            return Err(TransmissionError::AlreadyRevealed(*witness));
        }
        if commitment(verdict, &salt) != att.commit {
            att.equivocated = true;
            return Err(TransmissionError::CommitMismatch(*witness));
        }
        att.revealed_verdict = Some(verdict);
        att.salt = Some(salt);
        Ok(())
    }

    /// Resolve the current round. Callers invoke this once every reveal is
    /// in or the reveal deadline has passed.
    pub fn aggregate_attestations(&mut self, cfg: &WitnessPanelConfig) -> TxnStatus {
        let (valid, invalid) = self.tally();
        self.status = aggregate_rule(valid, invalid, cfg.quorum());
        self.status
    }

    /// Re-run a disputed transaction with a fresh panel disjoint from all
    /// earlier ones, or hand it to arbitration once escalations run out
    /// (or no disjoint panel can be formed).
    pub fn reescalate_disputed(
        &mut self,
        candidates: &[WitnessCandidate],
        cfg: &WitnessPanelConfig,
        rng: &mut SeededRng,
        tick: u64,
    ) -> Result<Escalation, TransmissionError> {
        if self.status != TxnStatus::Disputed {
            return Err(TransmissionError::WrongStatus(self.status));
        }
        if self.escalations >= cfg.max_escalations {
            return Ok(Escalation::ToArbitration);
        }
        let exclude = self.all_panelists();
        match select_witnesses(candidates, self, cfg, &exclude, rng) {
            Ok(panel) => {
                let old_panel = std::mem::take(&mut self.panel);
                let old_atts = std::mem::take(&mut self.attestations);
                self.past_rounds.push((old_panel, old_atts));
                self.escalations += 1;
                self.status = TxnStatus::Pending;
                self.open_panel(panel.clone(), tick);
                Ok(Escalation::Repaneled(panel))
            }
            Err(TransmissionError::InsufficientWitnesses { .. }) => Ok(Escalation::ToArbitration),
            Err(e) => Err(e),
        }
    }

    /// Score every attestation this transaction ever received against the
    /// terminal outcome. With no outcome (arbitration-bound), only
    /// equivocation and silence are judged.
    pub fn evaluate_witnesses(&self, truth: Option<Judgement>) -> Vec<(PublicKey, WitnessOutcome)> {
        let mut out = Vec::new();
        let rounds = self
            .past_rounds
            .iter()
            .map(|(p, a)| (p, a))
            .chain(std::iter::once((&self.panel, &self.attestations)));
        for (panel, atts) in rounds {
            for w in panel {
                let outcome = match atts.iter().find(|a| a.witness == *w) {
                    Some(a) if a.equivocated => Some(WitnessOutcome::Equivocated),
                    Some(a) => match (a.revealed_verdict, truth) {
                        (None, _) => Some(WitnessOutcome::Silent),
                        (Some(v), Some(t)) if v == t => Some(WitnessOutcome::Correct),
                        (Some(_), Some(_)) => Some(WitnessOutcome::Incorrect),
                        (Some(_), None) => None,
                    },
                    None => Some(WitnessOutcome::Silent),
                };
                if let Some(o) = outcome {
                    out.push((*w, o));
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Escalation {
    Repaneled(Vec<PublicKey>),
    ToArbitration,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum WitnessOutcome {
    Correct,
    Incorrect,
    Silent,
    Equivocated,
}

/// A registry entry as seen by panel selection.
#[derive(Clone, Debug, PartialEq)]
pub struct WitnessCandidate {
    pub key: PublicKey,
    pub reputation: f64,
    pub operator_group: String,
    /// Active, witness role, not quarantined or banned.
    pub eligible: bool,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TransmissionError {
    #[error("insufficient witnesses: need {needed}, found {found}")]
    InsufficientWitnesses { needed: usize, found: usize },
    #[error("{0:?} is not on the panel")]
    NotOnPanel(PublicKey),
    #[error("{0:?} already committed")]
    AlreadyCommitted(PublicKey),
    #[error("{0:?} already revealed")]
    AlreadyRevealed(PublicKey),
    #[error("attestation from {0:?} is malformed or badly signed")]
    BadAttestation(PublicKey),
    #[error("reveal from {0:?} does not open its commitment")]
    CommitMismatch(PublicKey),
    #[error("reveal too early: reveals open at tick {open_at}")]
    RevealTooEarly { open_at: u64 },
    #[error("operation not allowed in status {0:?}")]
    WrongStatus(TxnStatus),
    #[error(transparent)]
    Sampling(#[from] SamplingError),
}

/// Reputation-weighted panel draw. Walks the A-ES order and skips any
/// candidate whose operator group is already at the diversity cap.
pub fn select_witnesses(
    candidates: &[WitnessCandidate],
    txn: &DataTransaction,
    cfg: &WitnessPanelConfig,
    exclude: &BTreeSet<PublicKey>,
    rng: &mut SeededRng,
) -> Result<Vec<PublicKey>, TransmissionError> {
    let weights: Vec<f64> = candidates
        .iter()
        .map(|c| {
            let usable = c.eligible && c.key != txn.sender && c.key != txn.receiver && !exclude.contains(&c.key);
            if usable {
                c.reputation.max(0.0)
            } else {
                0.0
            }
        })
        .collect();
    let order = weighted_order(rng, &weights)?;
    let mut panel = Vec::with_capacity(cfg.k);
    let mut per_group: std::collections::BTreeMap<&str, usize> = Default::default();
    for i in order {
        let c = &candidates[i];
        let used = per_group.entry(c.operator_group.as_str()).or_default();
        if *used >= cfg.diversity {
            continue;
        }
        *used += 1;
        panel.push(c.key);
        if panel.len() == cfg.k {
            return Ok(panel);
        }
    }
    Err(TransmissionError::InsufficientWitnesses {
        needed: cfg.k,
        found: panel.len(),
    })
}

pub const TXN_CSV_HEADER: &str = "tick,txn_id,event,actor,detail";
