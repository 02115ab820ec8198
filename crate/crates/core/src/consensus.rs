//! Witness-informed consensus: proposals, weighted votes, the hash-chained
//! ledger and ledger synchronization between nodes.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::primitives::{verify, CanonicalHasher, Digest, KeyPair, PublicKey, Signature};
use crate::scalar::Scalar;
use crate::transmission::TxnId;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConsensusConfig {
    pub batch_cap: usize,
    /// Fraction of total weight that accepting weight must exceed.
    pub commit_threshold: f64,
    pub contested_band: f64,
    pub stake_share: f64,
    pub reputation_share: f64,
}

impl Default for ConsensusConfig {
    fn default() -> Self {
        Self {
            batch_cap: 32,
            commit_threshold: 0.5,
            contested_band: 0.1,
            stake_share: 0.5,
            reputation_share: 0.5,
        }
    }
}

/// `stake_share * stake_i / sum(stake) + reputation_share * rep_i`,
/// renormalized to sum to one. All-zero inputs give all-zero weights.
pub fn vote_weights<F: Scalar>(stakes: &[F], reputations: &[F], stake_share: F, reputation_share: F) -> Vec<F> {
    assert_eq!(stakes.len(), reputations.len());
    let total_stake: F = stakes.iter().copied().sum();
    let raw: Vec<F> = stakes
        .iter()
        .zip(reputations)
        .map(|(&s, &r)| {
            let s_part = if total_stake > F::zero() { s / total_stake } else { F::zero() };
            stake_share * s_part + reputation_share * r
        })
        .collect();
    let sum: F = raw.iter().copied().sum();
    if sum > F::zero() {
        raw.into_iter().map(|w| w / sum).collect()
    } else {
        raw
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VoteTally<F> {
    pub accept_weight: F,
    pub total_weight: F,
    pub committed: bool,
    pub contested: bool,
}

/// Commit iff accepting weight exceeds `threshold * total`. The outcome is
/// contested when the accepting share lies within `band` of the threshold.
pub fn tally_votes<F: Scalar>(votes: &[(F, bool)], threshold: F, band: F) -> VoteTally<F> {
    let total: F = votes.iter().map(|v| v.0).sum();
    let accept: F = votes.iter().filter(|v| v.1).map(|v| v.0).sum();
    let share = if total > F::zero() { accept / total } else { F::zero() };
    VoteTally {
        accept_weight: accept,
        total_weight: total,
        committed: total > F::zero() && accept > threshold * total,
        contested: (share - threshold).abs() <= band,
    }
}

/// Round-robin leader over the sorted set of active nodes.
pub fn proposer_for_round(round: u64, active_nodes: &[PublicKey]) -> Option<PublicKey> {
    if active_nodes.is_empty() {
        return None;
    }
    let mut sorted = active_nodes.to_vec();
    sorted.sort();
    Some(sorted[(round % sorted.len() as u64) as usize])
}

pub fn block_digest(height: u64, parent: &Digest, txn_ids: &[TxnId], proposer: &PublicKey) -> Digest {
    let mut h = CanonicalHasher::new("gdp/block");
    h.u64(height).fixed(&parent.0).digests(txn_ids).fixed(&proposer.0);
    h.finish()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Proposal {
    pub proposer: PublicKey,
    pub height: u64,
    pub txn_ids: Vec<TxnId>,
    pub parent_block: Digest,
    pub tick: u64,
    pub signature: Signature,
}

impl Proposal {
    pub fn new(proposer: &KeyPair, height: u64, parent_block: Digest, txn_ids: Vec<TxnId>, tick: u64) -> Self {
        let d = block_digest(height, &parent_block, &txn_ids, &proposer.public_key);
        Self {
            proposer: proposer.public_key,
            height,
            txn_ids,
            parent_block,
            tick,
            signature: proposer.sign(&d.0),
        }
    }

    /// The digest of the block this proposal would become.
    pub fn digest(&self) -> Digest {
        block_digest(self.height, &self.parent_block, &self.txn_ids, &self.proposer)
    }

    pub fn signature_valid(&self) -> bool {
        verify(&self.proposer, &self.digest().0, &self.signature)
    }

    /// Drop `remove` from the batch and re-sign.
    pub fn trimmed(&self, proposer: &KeyPair, remove: &BTreeSet<TxnId>) -> Self {
        let ids = self.txn_ids.iter().filter(|t| !remove.contains(t)).copied().collect();
        Self::new(proposer, self.height, self.parent_block, ids, self.tick)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Vote {
    pub validator: PublicKey,
    pub proposal_digest: Digest,
    pub accept: bool,
    pub weight: f64,
    pub signature: Signature,
    /// Transactions this validator objects to (disputed attestations).
    pub objections: Vec<TxnId>,
}

fn vote_message(proposal_digest: &Digest, accept: bool, weight: f64, objections: &[TxnId]) -> Digest {
    let mut h = CanonicalHasher::new("gdp/vote");
    h.fixed(&proposal_digest.0)
        .u64(accept as u64)
        .u64(weight.to_bits())
        .digests(objections);
    h.finish()
}

impl Vote {
    pub fn cast(validator: &KeyPair, proposal_digest: Digest, accept: bool, weight: f64, objections: Vec<TxnId>) -> Self {
        let m = vote_message(&proposal_digest, accept, weight, &objections);
        Self {
            validator: validator.public_key,
            proposal_digest,
            accept,
            weight,
            signature: validator.sign(&m.0),
            objections,
        }
    }

    pub fn signature_valid(&self) -> bool {
        let m = vote_message(&self.proposal_digest, self.accept, self.weight, &self.objections);
        verify(&self.validator, &m.0, &self.signature)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LedgerBlock {
    pub height: u64,
    pub parent: Digest,
    pub txn_ids: Vec<TxnId>,
    pub proposer: PublicKey,
    pub votes: Vec<Vote>,
    pub block_digest: Digest,
    pub tick: u64,
}

impl LedgerBlock {
    pub fn genesis() -> Self {
        let proposer = PublicKey([0; 32]);
        Self {
            height: 0,
            parent: Digest::ZERO,
            txn_ids: Vec::new(),
            proposer,
            votes: Vec::new(),
            block_digest: block_digest(0, &Digest::ZERO, &[], &proposer),
            tick: 0,
        }
    }

    pub fn from_proposal(proposal: &Proposal, votes: Vec<Vote>, tick: u64) -> Self {
        Self {
            height: proposal.height,
            parent: proposal.parent_block,
            txn_ids: proposal.txn_ids.clone(),
            proposer: proposal.proposer,
            votes,
            block_digest: proposal.digest(),
            tick,
        }
    }

    pub fn recomputed_digest(&self) -> Digest {
        block_digest(self.height, &self.parent, &self.txn_ids, &self.proposer)
    }

    pub fn accept_weight(&self) -> f64 {
        self.votes.iter().filter(|v| v.accept).fold(0.0, |acc, v| acc + v.weight)
    }

    pub fn total_weight(&self) -> f64 {
        self.votes.iter().fold(0.0, |acc, v| acc + v.weight)
    }

    pub fn export_line(&self) -> String {
        format!(
            "{},{},{},{},{},{:.6}",
            self.height,
            self.parent.to_hex(),
            self.block_digest.to_hex(),
            self.proposer.to_hex(),
            self.txn_ids.len(),
            self.accept_weight()
        )
    }
}

pub const LEDGER_EXPORT_HEADER: &str = "height,parent_hex,block_digest_hex,proposer,txn_count,accept_weight";

/// What consensus needs to know about an id listed in a block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LedgerEntry {
    Txn { sender: PublicKey, nonce: u64, quorum_met: bool },
    /// An arbitration verdict recorded as a transaction-like entry.
    Record,
}

pub trait TxnDirectory {
    fn entry(&self, id: &TxnId) -> Option<LedgerEntry>;
}

impl TxnDirectory for BTreeMap<TxnId, LedgerEntry> {
    fn entry(&self, id: &TxnId) -> Option<LedgerEntry> {
        self.get(id).copied()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ConsensusError {
    #[error("{0:?} is not this round's proposer")]
    NotProposer(PublicKey),
    #[error("mempool has no witnessed transactions")]
    EmptyMempool,
    #[error("proposal extends {wanted:?} at height {height}, node head is {have:?}")]
    UnknownParent { height: u64, wanted: Digest, have: Digest },
    #[error("chain integrity violation: {0}")]
    ChainIntegrityViolation(String),
    #[error("insufficient nodes: need {needed}, have {have}")]
    InsufficientNodes { needed: usize, have: usize },
}

/// One node's copy of the ledger.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ledger {
    blocks: Vec<LedgerBlock>,
    included: BTreeSet<TxnId>,
    next_nonce: BTreeMap<PublicKey, u64>,
}

impl Default for Ledger {
    fn default() -> Self {
        Self::new()
    }
}

impl Ledger {
    pub fn new() -> Self {
        Self {
            blocks: vec![LedgerBlock::genesis()],
            included: BTreeSet::new(),
            next_nonce: BTreeMap::new(),
        }
    }

    pub fn height(&self) -> u64 {
        self.blocks.len() as u64 - 1
    }

    pub fn head(&self) -> &LedgerBlock {
        self.blocks.last().expect("genesis")
    }

    pub fn blocks(&self) -> &[LedgerBlock] {
        &self.blocks
    }

    pub fn contains(&self, id: &TxnId) -> bool {
        self.included.contains(id)
    }

    pub fn next_nonce(&self, sender: &PublicKey) -> u64 {
        self.next_nonce.get(sender).copied().unwrap_or(0)
    }

    /// Blocks above `height`, for shipping to a lagging peer.
    pub fn blocks_after(&self, height: u64) -> &[LedgerBlock] {
        let from = (height as usize + 1).min(self.blocks.len());
        &self.blocks[from..]
    }

    pub fn is_prefix_of(&self, other: &Ledger) -> bool {
        self.blocks.len() <= other.blocks.len()
            && self
                .blocks
                .iter()
                .zip(&other.blocks)
                .all(|(a, b)| a.block_digest == b.block_digest)
    }

    /// Append a block whose parent is the current head.
    pub fn append(&mut self, block: LedgerBlock, directory: &dyn TxnDirectory) -> Result<(), ConsensusError> {
        if block.height != self.height() + 1 || block.parent != self.head().block_digest {
            return Err(ConsensusError::ChainIntegrityViolation(format!(
                "block {} does not extend head {}",
                block.height,
                self.height()
            )));
        }
        for id in &block.txn_ids {
            if let Some(LedgerEntry::Txn { sender, nonce, .. }) = directory.entry(id) {
                let next = self.next_nonce.entry(sender).or_default();
                *next = (*next).max(nonce + 1);
            }
            self.included.insert(*id);
        }
        self.blocks.push(block);
        Ok(())
    }
}

/// A mempool entry as the proposer sees it.
#[derive(Clone, Debug, PartialEq)]
pub struct MempoolEntry {
    pub id: TxnId,
    pub sender: PublicKey,
    pub nonce: u64,
    pub created_tick: u64,
    pub sender_reputation: f64,
}

/// Oldest first; ties go to the higher-reputation sender, then by sender
/// and nonce so the order is total.
pub fn mempool_order(entries: &mut [MempoolEntry]) {
    entries.sort_by(|a, b| {
        a.created_tick
            .cmp(&b.created_tick)
            .then(b.sender_reputation.total_cmp(&a.sender_reputation))
            .then(a.sender.cmp(&b.sender))
            .then(a.nonce.cmp(&b.nonce))
    });
}

/// Build this round's proposal from witnessed mempool entries plus any
/// pending verdict records (which do not count against the batch cap).
pub fn propose_block(
    node: &KeyPair,
    round_proposer: &PublicKey,
    mempool: &[MempoolEntry],
    records: &[Digest],
    ledger: &Ledger,
    cfg: &ConsensusConfig,
    tick: u64,
) -> Result<Proposal, ConsensusError> {
    if node.public_key != *round_proposer {
        return Err(ConsensusError::NotProposer(node.public_key));
    }
    let mut entries: Vec<MempoolEntry> = mempool.iter().filter(|e| !ledger.contains(&e.id)).cloned().collect();
    if entries.is_empty() && records.is_empty() {
        return Err(ConsensusError::EmptyMempool);
    }
    mempool_order(&mut entries);
    let mut ids: Vec<TxnId> = entries.iter().take(cfg.batch_cap).map(|e| e.id).collect();
    ids.extend(records.iter().filter(|r| !ledger.contains(r)));
    let head = ledger.head();
    Ok(Proposal::new(node, head.height + 1, head.block_digest, ids, tick))
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ProposalProblem {
    BadSignature,
    Duplicate(TxnId),
    AlreadyCommitted(TxnId),
    Unknown(TxnId),
    NoQuorum(TxnId),
    NonceGap { id: TxnId, expected: u64, got: u64 },
}

/// Check a proposal against a node's ledger. Returns every problem found;
/// the node accepts iff the list is empty.
pub fn validate_proposal(proposal: &Proposal, ledger: &Ledger, directory: &dyn TxnDirectory) -> Result<Vec<ProposalProblem>, ConsensusError> {
    let head = ledger.head();
    if proposal.parent_block != head.block_digest || proposal.height != head.height + 1 {
        return Err(ConsensusError::UnknownParent {
            height: proposal.height,
            wanted: proposal.parent_block,
            have: head.block_digest,
        });
    }
    let mut problems = Vec::new();
    if !proposal.signature_valid() {
        problems.push(ProposalProblem::BadSignature);
    }
    let mut seen = BTreeSet::new();
    let mut expected: BTreeMap<PublicKey, u64> = BTreeMap::new();
    for id in &proposal.txn_ids {
        if !seen.insert(*id) {
            problems.push(ProposalProblem::Duplicate(*id));
            continue;
        }
        if ledger.contains(id) {
            problems.push(ProposalProblem::AlreadyCommitted(*id));
            continue;
        }
        match directory.entry(id) {
            None => problems.push(ProposalProblem::Unknown(*id)),
            Some(LedgerEntry::Record) => {}
            Some(LedgerEntry::Txn { sender, nonce, quorum_met }) => {
                if !quorum_met {
                    problems.push(ProposalProblem::NoQuorum(*id));
                }
                let next = expected.entry(sender).or_insert_with(|| ledger.next_nonce(&sender));
                if nonce != *next {
                    problems.push(ProposalProblem::NonceGap {
                        id: *id,
                        expected: *next,
                        got: nonce,
                    });
                }
                *next = nonce + 1;
            }
        }
    }
    Ok(problems)
}

/// Transactions to pull out of a contested proposal: the disputed ones
/// that some validator objected to. Empty means nothing to resolve.
pub fn resolve_vote_conflict(proposal: &Proposal, votes: &[Vote], disputed: &BTreeSet<TxnId>) -> BTreeSet<TxnId> {
    let objected: BTreeSet<TxnId> = votes.iter().flat_map(|v| v.objections.iter().copied()).collect();
    proposal
        .txn_ids
        .iter()
        .filter(|t| disputed.contains(t) || objected.contains(t))
        .copied()
        .collect()
}

/// Structural checks on one transferred block: parent link, digest,
/// vote references, known and distinct voters, accepting weight.
pub fn check_block(block: &LedgerBlock, parent: &LedgerBlock, threshold: f64, known_voter: &dyn Fn(&PublicKey) -> bool) -> Result<(), ConsensusError> {
    let fail = |m: String| Err(ConsensusError::ChainIntegrityViolation(m));
    if block.height != parent.height + 1 || block.parent != parent.block_digest {
        return fail(format!("block {} has a bad parent link", block.height));
    }
    if block.recomputed_digest() != block.block_digest {
        return fail(format!("block {} digest does not match its contents", block.height));
    }
    let mut voters = BTreeSet::new();
    for v in &block.votes {
        if v.proposal_digest != block.block_digest {
            return fail(format!("block {} carries a vote for another proposal", block.height));
        }
        if !known_voter(&v.validator) || !voters.insert(v.validator) {
            return fail(format!("block {} has an unknown or duplicate voter", block.height));
        }
        if !(v.weight.is_finite() && v.weight >= 0.0) {
            return fail(format!("block {} has a malformed vote weight", block.height));
        }
    }
    let votes: Vec<(f64, bool)> = block.votes.iter().map(|v| (v.weight, v.accept)).collect();
    if !tally_votes(&votes, threshold, 0.0).committed {
        return fail(format!("block {} lacks accepting weight", block.height));
    }
    Ok(())
}

/// Full re-verification including vote signatures.
pub fn verify_blocks_full(blocks: &[LedgerBlock], parent: &LedgerBlock, threshold: f64, known_voter: &dyn Fn(&PublicKey) -> bool) -> Result<(), ConsensusError> {
    let mut prev = parent;
    for b in blocks {
        check_block(b, prev, threshold, known_voter)?;
        if b.votes.iter().any(|v| !v.signature_valid()) {
            return Err(ConsensusError::ChainIntegrityViolation(format!(
                "block {} has a forged vote signature",
                b.height
            )));
        }
        prev = b;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyncReport {
    pub from_height: u64,
    pub to_height: u64,
    pub adopted: usize,
}

/// Adopt `shipped` (the source's blocks above the receiver's head) after
/// re-verifying the digest chain, vote threshold and vote signatures. The receiver is untouched on error.
pub fn synchronize(
    receiver: &mut Ledger,
    source_head: &Digest,
    source_height: u64,
    shipped: &[LedgerBlock],
    threshold: f64,
    known_voter: &dyn Fn(&PublicKey) -> bool,
    directory: &dyn TxnDirectory,
) -> Result<SyncReport, ConsensusError> {
    let from = receiver.height();
    if source_height <= from {
        if source_height == from && *source_head != receiver.head().block_digest {
            return Err(ConsensusError::ChainIntegrityViolation(format!(
                "ledgers diverge at height {from}"
            )));
        }
        return Ok(SyncReport {
            from_height: from,
            to_height: from,
            adopted: 0,
        });
    }
    if shipped.len() as u64 != source_height - from {
        return Err(ConsensusError::ChainIntegrityViolation("incomplete block transfer".into()));
    }
    verify_blocks_full(shipped, receiver.head(), threshold, known_voter)?;
    let last = shipped.last().expect("source is ahead, so the transfer is non-empty");
    if last.block_digest != *source_head {
        return Err(ConsensusError::ChainIntegrityViolation("transfer does not end at the advertised head".into()));
    }
    let mut staged = receiver.clone();
    for b in shipped {
        staged.append(b.clone(), directory)?;
    }
    *receiver = staged;
    Ok(SyncReport {
        from_height: from,
        to_height: receiver.height(),
        adopted: shipped.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::primitives::SecretKey;

    fn kp(b: u8) -> KeyPair {
        KeyPair::from_secret(SecretKey([b; 32]))
    }

    fn tid(b: u8) -> TxnId {
        Digest([b; 32])
    }

    fn dir(entries: &[(u8, u8, u64)]) -> BTreeMap<TxnId, LedgerEntry> {
        entries
            .iter()
            .map(|&(id, sender, nonce)| {
                (
                    tid(id),
                    LedgerEntry::Txn {
                        sender: kp(sender).public_key,
                        nonce,
                        quorum_met: true,
                    },
                )
            })
            .collect()
    }

    fn entry(id: u8, created: u64) -> MempoolEntry {
        MempoolEntry {
            id: tid(id),
            sender: kp(id).public_key,
            nonce: 0,
            created_tick: created,
            sender_reputation: 0.5,
        }
    }

    #[test]
    fn proposal_orders_oldest_first_and_caps_batch() {
        let node = kp(1);
        let l = Ledger::new();
        let cfg = ConsensusConfig::default();
        let pool = vec![entry(3, 9), entry(1, 2), entry(2, 5)];
        let p = propose_block(&node, &node.public_key, &pool, &[], &l, &cfg, 10).unwrap();
        assert_eq!(p.txn_ids, vec![tid(1), tid(2), tid(3)]);
        assert_eq!(p.height, 1);
        assert!(p.signature_valid());

        let pool: Vec<_> = (0..40u8).map(|i| entry(i + 1, 40 - i as u64)).collect();
        let p = propose_block(&node, &node.public_key, &pool, &[], &l, &cfg, 50).unwrap();
        assert_eq!(p.txn_ids.len(), 32);
        assert!(p.txn_ids.contains(&tid(40)) && !p.txn_ids.contains(&tid(8)));

        assert_eq!(
            propose_block(&kp(2), &node.public_key, &pool, &[], &l, &cfg, 50).unwrap_err(),
            ConsensusError::NotProposer(kp(2).public_key)
        );
        assert_eq!(propose_block(&node, &node.public_key, &[], &[], &l, &cfg, 50).unwrap_err(), ConsensusError::EmptyMempool);
    }

    #[test]
    fn reputation_breaks_ties() {
        let mut a = entry(1, 5);
        a.sender_reputation = 0.2;
        let mut b = entry(2, 5);
        b.sender_reputation = 0.9;
        let mut v = vec![a, b];
        mempool_order(&mut v);
        assert_eq!(v[0].id, tid(2));
    }

    #[test]
    fn validation_accepts_clean_and_rejects_replays() {
        let node = kp(1);
        let d = dir(&[(1, 50, 0), (2, 51, 0)]);
        let mut l = Ledger::new();
        let p = Proposal::new(&node, 1, l.head().block_digest, vec![tid(1), tid(2)], 1);
        assert!(validate_proposal(&p, &l, &d).unwrap().is_empty());
        l.append(LedgerBlock::from_proposal(&p, vec![], 1), &d).unwrap();

        let again = Proposal::new(&node, 2, l.head().block_digest, vec![tid(1)], 2);
        assert_eq!(
            validate_proposal(&again, &l, &d).unwrap(),
            vec![ProposalProblem::AlreadyCommitted(tid(1))]
        );
        let stale = Proposal::new(&node, 1, Digest::ZERO, vec![], 2);
        assert!(matches!(validate_proposal(&stale, &l, &d), Err(ConsensusError::UnknownParent { .. })));
    }

    #[test]
    fn nonce_gap_rejected() {
        let node = kp(1);
        let d = dir(&[(1, 50, 7), (2, 50, 9), (3, 50, 0), (4, 50, 1)]);
        let l = Ledger::new();
        // Sender starts at 0, so nonce 7 is already a gap.
        let p = Proposal::new(&node, 1, l.head().block_digest, vec![tid(3), tid(4)], 1);
        assert!(validate_proposal(&p, &l, &d).unwrap().is_empty());
        let p = Proposal::new(&node, 1, l.head().block_digest, vec![tid(3), tid(4), tid(1), tid(2)], 1);
        let problems = validate_proposal(&p, &l, &d).unwrap();
        assert_eq!(
            problems,
            vec![
                ProposalProblem::NonceGap { id: tid(1), expected: 2, got: 7 },
                ProposalProblem::NonceGap { id: tid(2), expected: 8, got: 9 },
            ]
        );
    }

    #[test]
    fn majority_examples() {
        let equal = |n_accept: usize| {
            let v: Vec<(f64, bool)> = (0..5).map(|i| (1.0, i < n_accept)).collect();
            tally_votes(&v, 0.5, 0.1).committed
        };
        assert!(equal(3));
        assert!(!equal(2));
        // {3,1,1,1,1}: the weight-3 validator plus one other is 4 of 7.
        let v = [(3.0, true), (1.0, true), (1.0, false), (1.0, false), (1.0, false)];
        let t = tally_votes(&v, 0.5, 0.1);
        assert!(t.committed);
        assert_eq!(t.accept_weight, 4.0);
        assert_eq!(t.total_weight, 7.0);
        assert!(!tally_votes::<f64>(&[], 0.5, 0.1).committed);
    }

    #[test]
    fn contested_band() {
        let v = [(1.0f64, true), (1.0, false)];
        let t = tally_votes(&v, 0.5, 0.1);
        assert!(t.contested && !t.committed);
        let v = [(1.0f64, true), (1.0, true), (1.0, true), (1.0, false)];
        assert!(!tally_votes(&v, 0.5, 0.1).contested);
    }

    #[test]
    fn vote_weight_formula() {
        let w = vote_weights(&[100.0f64, 300.0], &[0.5, 0.5], 0.5, 0.5);
        // raw: 0.125 + 0.25, 0.375 + 0.25
        assert!((w[0] - 0.375).abs() < 1e-12);
        assert!((w[1] - 0.625).abs() < 1e-12);
        let w32 = vote_weights(&[1.0f32, 1.0], &[0.0, 0.0], 0.5, 0.5);
        assert_eq!(w32, vec![0.5, 0.5]);
        assert_eq!(vote_weights(&[0.0f64], &[0.0], 0.5, 0.5), vec![0.0]);
    }

    #[test]
    fn conflict_resolution_trims_only_disputed() {
        let node = kp(1);
        let p = Proposal::new(&node, 1, Digest::ZERO, vec![tid(1), tid(2), tid(3)], 0);
        assert!(resolve_vote_conflict(&p, &[], &BTreeSet::new()).is_empty());
        let v = Vote::cast(&kp(2), p.digest(), false, 0.5, vec![tid(2)]);
        let out = resolve_vote_conflict(&p, &[v], &BTreeSet::new());
        assert_eq!(out, [tid(2)].into_iter().collect());
        let trimmed = p.trimmed(&node, &out);
        assert_eq!(trimmed.txn_ids, vec![tid(1), tid(3)]);
        assert!(trimmed.signature_valid());
    }

    fn chain(n: u64, d: &BTreeMap<TxnId, LedgerEntry>) -> (Ledger, Vec<KeyPair>) {
        let vals: Vec<KeyPair> = (20..23).map(kp).collect();
        let mut l = Ledger::new();
        for h in 1..=n {
            let p = Proposal::new(&vals[0], h, l.head().block_digest, vec![tid(h as u8)], h);
            let votes = vals.iter().map(|v| Vote::cast(v, p.digest(), true, 1.0 / 3.0, vec![])).collect();
            l.append(LedgerBlock::from_proposal(&p, votes, h), d).unwrap();
        }
        (l, vals)
    }

    #[test]
    fn synchronize_adopts_missing_blocks() {
        let d = dir(&(1..=10).map(|i| (i, 60 + i, 0)).collect::<Vec<_>>());
        let (a, vals) = chain(10, &d);
        let (mut b, _) = chain(7, &d);
        let known = |k: &PublicKey| vals.iter().any(|v| v.public_key == *k);
        let r = synchronize(&mut b, &a.head().block_digest, a.height(), a.blocks_after(7), 0.5, &known, &d).unwrap();
        assert_eq!((r.from_height, r.to_height, r.adopted), (7, 10, 3));
        assert_eq!(b, a);
        let r = synchronize(&mut b, &a.head().block_digest, a.height(), &[], 0.5, &known, &d).unwrap();
        assert_eq!(r.adopted, 0);
    }

    #[test]
    fn synchronize_rejects_tampered_transfer() {
        let d = dir(&(1..=10).map(|i| (i, 60 + i, 0)).collect::<Vec<_>>());
        let (a, vals) = chain(10, &d);
        let (mut b, _) = chain(7, &d);
        let before = b.clone();
        let known = |k: &PublicKey| vals.iter().any(|v| v.public_key == *k);
        let mut shipped = a.blocks_after(7).to_vec();
        shipped[1].txn_ids.push(tid(99));
        let e = synchronize(&mut b, &a.head().block_digest, a.height(), &shipped, 0.5, &known, &d).unwrap_err();
        assert!(matches!(e, ConsensusError::ChainIntegrityViolation(_)));
        assert_eq!(b, before);

        // Forged vote signatures pass the structural checks alone.
        let mut forged = a.blocks_after(7).to_vec();
        forged[0].votes[0].signature.bytes[0] ^= 1;
        assert!(check_block(&forged[0], b.head(), 0.5, &known).is_ok());
        assert!(synchronize(&mut b, &a.head().block_digest, a.height(), &forged, 0.5, &known, &d).is_err());
        assert_eq!(b, before);
        assert!(verify_blocks_full(&forged, b.head(), 0.5, &known).is_err());
        assert!(verify_blocks_full(a.blocks_after(7), b.head(), 0.5, &known).is_ok());
    }

    #[test]
    fn divergent_equal_heights_are_fatal() {
        let d = dir(&[(1, 60, 0), (2, 61, 0)]);
        let v = kp(20);
        let known = |_: &PublicKey| true;
        let mut a = Ledger::new();
        let mut b = Ledger::new();
        let pa = Proposal::new(&v, 1, a.head().block_digest, vec![tid(1)], 1);
        let pb = Proposal::new(&v, 1, b.head().block_digest, vec![tid(2)], 1);
        a.append(LedgerBlock::from_proposal(&pa, vec![Vote::cast(&v, pa.digest(), true, 1.0, vec![])], 1), &d).unwrap();
        b.append(LedgerBlock::from_proposal(&pb, vec![Vote::cast(&v, pb.digest(), true, 1.0, vec![])], 1), &d).unwrap();
        assert!(synchronize(&mut b, &a.head().block_digest, 1, &[], 0.5, &known, &d).is_err());
    }

    #[test]
    fn proposer_rotation() {
        let nodes: Vec<PublicKey> = (1..=3).map(|b| kp(b).public_key).collect();
        let mut sorted = nodes.clone();
        sorted.sort();
        assert_eq!(proposer_for_round(0, &nodes), Some(sorted[0]));
        assert_eq!(proposer_for_round(4, &nodes), Some(sorted[1]));
        assert_eq!(proposer_for_round(0, &[]), None);
    }

    #[test]
    fn export_line_layout() {
        let g = LedgerBlock::genesis();
        let line = g.export_line();
        assert_eq!(line.split(',').count(), 6);
        assert!(line.starts_with("0,0000"));
    }
}
