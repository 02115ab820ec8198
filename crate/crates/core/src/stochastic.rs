//! Random inspections: Bernoulli target draws keyed by (round, target),
//! deep transaction inspection, proposer puzzles, random validator
//! subsets, commit delays and sync verification.

use serde::{Deserialize, Serialize};

use crate::consensus::{verify_blocks_full, LedgerBlock};
use crate::incentives::{Cause, IncentiveConfig, IncentiveLedger, Tokens};
use crate::primitives::{digest_parts, Digest, PublicKey, SeededRng};
use crate::transmission::DataTransaction;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Enforcement {
    /// Failed inspections reject, penalize and open disputes.
    Enforce,
    /// Failed inspections are logged and investigated only.
    AuditOnly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InspectionPolicy {
    pub rate_txn: f64,
    pub rate_witness_deep: f64,
    pub rate_sync_verify: f64,
    pub rate_proposer: f64,
    pub rate_device: f64,
    pub puzzle_difficulty: u32,
    /// Digest attempts a proposer may spend before the round deadline.
    pub puzzle_budget: u64,
    pub max_commit_delay: u64,
    /// Validate with a random subset of this size instead of all nodes.
    pub random_validators: Option<usize>,
    pub enforcement: Enforcement,
}

impl Default for InspectionPolicy {
    fn default() -> Self {
        Self {
            rate_txn: 0.05,
            rate_witness_deep: 0.1,
            rate_sync_verify: 0.02,
            rate_proposer: 0.1,
            rate_device: 0.05,
            puzzle_difficulty: 8,
            puzzle_budget: 1 << 16,
            max_commit_delay: 5,
            random_validators: None,
            enforcement: Enforcement::Enforce,
        }
    }
}

impl InspectionPolicy {
    /// Field path and message for the first out-of-range rate.
    pub fn validate(&self) -> Result<(), (String, String)> {
        let rates = [
            ("rate_txn", self.rate_txn),
            ("rate_witness_deep", self.rate_witness_deep),
            ("rate_sync_verify", self.rate_sync_verify),
            ("rate_proposer", self.rate_proposer),
            ("rate_device", self.rate_device),
        ];
        for (name, r) in rates {
            if !(0.0..=1.0).contains(&r) {
                return Err((name.into(), format!("must lie in [0, 1], got {r}")));
            }
        }
        if self.puzzle_difficulty > 64 {
            return Err(("puzzle_difficulty".into(), "must be at most 64 bits".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetKind {
    Transaction,
    Witness,
    Proposer,
    SyncBatch,
    Device,
}

impl TargetKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TargetKind::Transaction => "transaction",
            TargetKind::Witness => "witness",
            TargetKind::Proposer => "proposer",
            TargetKind::SyncBatch => "sync_batch",
            TargetKind::Device => "device",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InspectionOutcome {
    pub tick: u64,
    pub target_kind: TargetKind,
    pub target: String,
    pub passed: bool,
    pub evidence: Vec<String>,
}

pub const INSPECTION_CSV_HEADER: &str = "tick,target_kind,target,passed,evidence_refs";

impl InspectionOutcome {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.tick,
            self.target_kind.as_str(),
            self.target,
            self.passed,
            self.evidence.join(";")
        )
    }
}

/// Bernoulli(rate) from a stream keyed only by `(seed, kind, round,
/// target)`, so the draw is independent of any other protocol state.
pub fn should_inspect(seed: u64, kind: TargetKind, round: u64, target_id: &[u8], rate: f64) -> bool {
    if rate <= 0.0 {
        return false;
    }
    if rate >= 1.0 {
        return true;
    }
    SeededRng::keyed(seed, kind.as_str(), &[&round.to_be_bytes(), target_id]).bernoulli(rate)
}

/// Re-derive the payload digest from the observed payload and replay every
/// commit binding and attestation signature the transaction carries.
pub fn deep_inspect_transaction(txn: &DataTransaction, observed_payload_digest: &Digest, tick: u64) -> InspectionOutcome {
    let mut evidence = Vec::new();
    if txn.payload_digest != *observed_payload_digest {
        evidence.push(format!(
            "payload_digest:{}!={}",
            txn.payload_digest.to_hex(),
            observed_payload_digest.to_hex()
        ));
    }
    let rounds = txn.past_rounds.iter().map(|(_, a)| a).chain(std::iter::once(&txn.attestations));
    for atts in rounds {
        for a in atts {
            if !a.binding_holds() {
                evidence.push(format!("binding:{}", a.witness.to_hex()));
            }
            if !a.signature_valid() {
                evidence.push(format!("signature:{}", a.witness.to_hex()));
            }
        }
    }
    InspectionOutcome {
        tick,
        target_kind: TargetKind::Transaction,
        target: txn.id.to_hex(),
        passed: evidence.is_empty(),
        evidence,
    }
}

pub fn puzzle_digest(proposal_digest: &Digest, nonce: u64) -> Digest {
    digest_parts(&[&proposal_digest.0, &nonce.to_be_bytes()])
}

pub fn check_puzzle(proposal_digest: &Digest, nonce: u64, difficulty: u32) -> bool {
    puzzle_digest(proposal_digest, nonce).leading_zero_bits() >= difficulty
}

/// Honest solver: scan nonces from 0. Returns `(nonce, attempts)`.
pub fn solve_puzzle(proposal_digest: &Digest, difficulty: u32, budget: u64) -> Option<(u64, u64)> {
    (0..budget)
        .find(|&n| check_puzzle(proposal_digest, n, difficulty))
        .map(|n| (n, n + 1))
}

/// Judge a proposer's answer (`None` when it did not respond in time).
pub fn challenge_proposer(proposer: &PublicKey, proposal_digest: &Digest, answer: Option<u64>, difficulty: u32, tick: u64) -> InspectionOutcome {
    let (passed, evidence) = match answer {
        Some(n) if check_puzzle(proposal_digest, n, difficulty) => (true, Vec::new()),
        Some(n) => (false, vec![format!("bad_nonce:{n}")]),
        None => (false, vec!["no_response".to_string()]),
    };
    InspectionOutcome {
        tick,
        target_kind: TargetKind::Proposer,
        target: proposer.to_hex(),
        passed,
        evidence,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("insufficient nodes: need {needed}, have {have}")]
pub struct InsufficientNodes {
    pub needed: usize,
    pub have: usize,
}

/// Uniform draw of `m` validators from `eligible` (which must already
/// exclude the proposer).
pub fn pick_random_validators(rng: &mut SeededRng, eligible: &[PublicKey], m: usize) -> Result<Vec<PublicKey>, InsufficientNodes> {
    if m > eligible.len() {
        return Err(InsufficientNodes {
            needed: m,
            have: eligible.len(),
        });
    }
    let mut pool = eligible.to_vec();
    rng.shuffle(&mut pool);
    pool.truncate(m);
    Ok(pool)
}

pub fn random_commit_delay(rng: &mut SeededRng, max_commit_delay: u64) -> u64 {
    if max_commit_delay == 0 {
        0
    } else {
        rng.range_inclusive(0, max_commit_delay)
    }
}

/// Full re-verification of a transferred batch, vote signatures included.
pub fn verify_sync_integrity(
    source: &PublicKey,
    blocks: &[LedgerBlock],
    parent: &LedgerBlock,
    threshold: f64,
    known_voter: &dyn Fn(&PublicKey) -> bool,
    tick: u64,
) -> InspectionOutcome {
    let evidence = match verify_blocks_full(blocks, parent, threshold, known_voter) {
        Ok(()) => Vec::new(),
        Err(e) => vec![e.to_string()],
    };
    InspectionOutcome {
        tick,
        target_kind: TargetKind::SyncBatch,
        target: source.to_hex(),
        passed: evidence.is_empty(),
        evidence,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheaterReport {
    pub attempts: u64,
    pub detected: u64,
    pub mean_payoff: f64,
}

/// Run a cheater through `attempts` rounds against the incentive ledger.
/// Each undetected attempt earns the performance reward; each detected one
/// (drawn by [`should_inspect`]) forfeits `forfeit` tokens of stake.
/// Payoff is measured from the cheater's balances.
pub fn simulate_cheater(seed: u64, rate: f64, forfeit: Tokens, incentives: IncentiveConfig, attempts: u64) -> CheaterReport {
    let mut ledger = IncentiveLedger::new(incentives);
    let cheater = PublicKey(digest_parts(&[b"cheater", &seed.to_be_bytes()]).0);
    let opening = Tokens(forfeit.0.saturating_mul(attempts as i64));
    ledger.open_account(cheater, opening, 0).expect("fresh ledger");
    let mut detected = 0;
    for round in 0..attempts {
        if should_inspect(seed, TargetKind::Transaction, round, &cheater.0, rate) {
            detected += 1;
            ledger
                .forfeit_stake(&cheater, forfeit, Cause::Inspection(round), round)
                .expect("account exists");
        } else {
            ledger
                .apply_performance_reward(&cheater, Cause::Inspection(round), round)
                .expect("cheater is never banned here");
        }
    }
    let acct = ledger.stake(&cheater).expect("account exists");
    let net = acct.staked + acct.liquid - opening;
    debug_assert!(ledger.conserved());
    CheaterReport {
        attempts,
        detected,
        mean_payoff: net.as_f64() / attempts as f64,
    }
}
