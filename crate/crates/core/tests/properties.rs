use std::collections::{BTreeMap, BTreeSet};

use gdp_core::anomaly::AnomalyConfig;
use gdp_core::consensus::{
    tally_votes, validate_proposal, verify_blocks_full, vote_weights, Ledger, LedgerBlock, LedgerEntry, Proposal, ProposalProblem, Vote,
};
use gdp_core::incentives::{Cause, IncentiveConfig, IncentiveLedger, Severity, Tokens};
use gdp_core::primitives::{digest, sample_without_replacement, verify, weighted_order, Digest, KeyPair, PublicKey, SecretKey, SeededRng};
use gdp_core::stochastic::{should_inspect, TargetKind};
use gdp_core::transmission::{Attestation, DataTransaction, Judgement, TransmissionError, WitnessPanelConfig};
use gdp_core::Baseline;
use proptest::prelude::*;

fn kp(i: u8) -> KeyPair {
    KeyPair::from_secret(SecretKey([i; 32]))
}

proptest! {
    #[test]
    fn sliding_window_matches_recomputation(
        xs in prop::collection::vec(-1e3f64..1e3, 1..600),
        window in 2usize..64,
    ) {
        let cfg = AnomalyConfig { window, ..AnomalyConfig::default() };
        let mut b = Baseline::new("p", None, &cfg);
        for (t, &x) in xs.iter().enumerate() {
            b.observe(x, t as u64);
            let w: Vec<f64> = b.window().copied().collect();
            let n = w.len() as f64;
            let mean = w.iter().sum::<f64>() / n;
            let var = if w.len() > 1 { w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
            prop_assert!((b.mean() - mean).abs() <= 1e-9 * (1.0 + mean.abs()));
            prop_assert!((b.variance() - var).abs() <= 1e-9 * (1.0 + var));
        }
    }

    #[test]
    fn vote_weights_are_a_distribution(
        pairs in prop::collection::vec((0.0f64..1e6, 0.0f64..=1.0), 1..40),
        ss in 0.0f64..=1.0,
    ) {
        let stakes: Vec<f64> = pairs.iter().map(|p| p.0).collect();
        let reps: Vec<f64> = pairs.iter().map(|p| p.1).collect();
        let w = vote_weights(&stakes, &reps, ss, 1.0 - ss);
        prop_assert!(w.iter().all(|&x| x >= 0.0));
        let sum: f64 = w.iter().sum();
        prop_assert!(sum == 0.0 || (sum - 1.0).abs() < 1e-9);
    }

    #[test]
    fn more_acceptance_never_uncommits(
        votes in prop::collection::vec((0.0f64..10.0, any::<bool>()), 1..12),
        flip in any::<prop::sample::Index>(),
    ) {
        let before = tally_votes(&votes, 0.5, 0.0);
        let mut more = votes.clone();
        more[flip.index(votes.len())].1 = true;
        let after = tally_votes(&more, 0.5, 0.0);
        prop_assert!(after.accept_weight >= before.accept_weight);
        prop_assert!(!before.committed || after.committed);
    }

    #[test]
    fn weighted_order_is_a_permutation_of_positive_weights(
        weights in prop::collection::vec(prop_oneof![Just(0.0f64), 0.001f64..100.0], 0..30),
        seed in any::<u64>(),
    ) {
        let order = weighted_order(&mut SeededRng::new(seed), &weights).unwrap();
        let positive: BTreeSet<usize> = (0..weights.len()).filter(|&i| weights[i] > 0.0).collect();
        prop_assert_eq!(order.len(), positive.len());
        prop_assert_eq!(order.iter().copied().collect::<BTreeSet<_>>(), positive);
    }

    #[test]
    fn sampling_returns_distinct_members(
        weights in prop::collection::vec(0.01f64..10.0, 1..30),
        k in 0usize..30,
        seed in any::<u64>(),
    ) {
        let population: Vec<usize> = (0..weights.len()).collect();
        match sample_without_replacement(&mut SeededRng::new(seed), &population, &weights, k) {
            Ok(s) => {
                prop_assert!(k <= weights.len());
                prop_assert_eq!(s.len(), k);
                prop_assert_eq!(s.iter().collect::<BTreeSet<_>>().len(), k);
            }
            Err(_) => prop_assert!(k > weights.len()),
        }
    }

    #[test]
    fn signatures_bind_message_and_key(msg in prop::collection::vec(any::<u8>(), 0..64), i in 1u8..50, bit in 0usize..512) {
        let k = kp(i);
        let sig = k.sign(&msg);
        prop_assert!(verify(&k.public_key, &msg, &sig));
        prop_assert!(!verify(&kp(i + 1).public_key, &msg, &sig));
        let mut altered = msg.clone();
        if altered.is_empty() {
            altered.push(0);
        } else {
            let b = bit % (altered.len() * 8);
            altered[b / 8] ^= 1 << (b % 8);
        }
        prop_assert!(!verify(&k.public_key, &altered, &sig));
    }

    /// A reveal that differs from the committed verdict or salt never
    /// opens the commitment and is counted Invalid.
    #[test]
    fn commit_reveal_binding(
        committed in any::<bool>(),
        revealed in any::<bool>(),
        salt in any::<[u8; 16]>(),
        other_salt in any::<[u8; 16]>(),
        use_other in any::<bool>(),
    ) {
        let verdict = |b| if b { Judgement::Valid } else { Judgement::Invalid };
        let w = kp(9);
        let mut txn = DataTransaction::new(kp(1).public_key, kp(2).public_key, digest(b"x"), 1, 0, 0);
        let cfg = WitnessPanelConfig { k: 1, ..WitnessPanelConfig::default() };
        txn.open_panel(vec![w.public_key], 0);
        txn.witness_commit(Attestation::commit(&w, txn.id, verdict(committed), salt)).unwrap();
        let reveal_salt = if use_other { other_salt } else { salt };
        let honest = committed == revealed && reveal_salt == salt;
        let r = txn.witness_reveal(&w.public_key, verdict(revealed), reveal_salt, 0, &cfg);
        let att = txn.attestation(&w.public_key).unwrap();
        if honest {
            prop_assert!(r.is_ok());
            prop_assert_eq!(att.counted(), verdict(committed));
            prop_assert!(att.binding_holds());
        } else {
            prop_assert_eq!(r, Err(TransmissionError::CommitMismatch(w.public_key)));
            prop_assert!(att.equivocated);
            prop_assert_eq!(att.counted(), Judgement::Invalid);
        }
    }

    #[test]
    fn inspection_draws_are_pure(seed in any::<u64>(), round in any::<u64>(), id in any::<[u8; 32]>(), rate in 0.0f64..=1.0) {
        let a = should_inspect(seed, TargetKind::Witness, round, &id, rate);
        let _ = should_inspect(seed ^ 1, TargetKind::Witness, round, &id, rate);
        prop_assert_eq!(a, should_inspect(seed, TargetKind::Witness, round, &id, rate));
        prop_assert!(should_inspect(seed, TargetKind::Witness, round, &id, 1.0));
        prop_assert!(!should_inspect(seed, TargetKind::Witness, round, &id, 0.0));
    }

    #[test]
    fn tokens_round_trip_as_decimals(micro in -(1i64 << 50)..=(1i64 << 50)) {
        let t = Tokens(micro);
        let json = serde_json::to_string(&t).unwrap();
        prop_assert_eq!(serde_json::from_str::<Tokens>(&json).unwrap(), t);
    }
}

#[derive(Clone, Debug)]
enum Op {
    Open(u8, i64),
    Reward(u8),
    Contribute(u8, f64),
    Longevity(u8, u64),
    Penalty(u8, u8),
    Forfeit(u8, i64),
    Restore(u8),
    Bond(u8, i64, bool),
    Expire(u64),
}

fn op() -> impl Strategy<Value = Op> {
    let who = 0u8..6;
    prop_oneof![
        (who.clone(), 0i64..500).prop_map(|(w, s)| Op::Open(w, s)),
        who.clone().prop_map(Op::Reward),
        (who.clone(), 0.0f64..=1.0).prop_map(|(w, f)| Op::Contribute(w, f)),
        (who.clone(), 0u64..5000).prop_map(|(w, t)| Op::Longevity(w, t)),
        (who.clone(), 0u8..3).prop_map(|(w, s)| Op::Penalty(w, s)),
        (who.clone(), 0i64..200).prop_map(|(w, a)| Op::Forfeit(w, a)),
        who.clone().prop_map(Op::Restore),
        (who, 0i64..5, any::<bool>()).prop_map(|(w, a, r)| Op::Bond(w, a, r)),
        (0u64..5000).prop_map(Op::Expire),
    ]
}

fn owner(i: u8) -> PublicKey {
    PublicKey([i + 1; 32])
}

proptest! {
    /// Tokens are conserved, reputation stays in [0, 1], and the event
    /// stream accounts for every holding.
    #[test]
    fn incentive_ledger_conserves(ops in prop::collection::vec(op(), 1..120)) {
        let mut l = IncentiveLedger::new(IncentiveConfig::default());
        let cause = || Cause::Manual("prop".into());
        for (tick, o) in ops.into_iter().enumerate() {
            let tick = tick as u64;
            match o {
                Op::Open(w, s) => { let _ = l.open_account(owner(w), Tokens::whole(s), tick); }
                Op::Reward(w) => { let _ = l.apply_performance_reward(&owner(w), cause(), tick); }
                Op::Contribute(w, f) => { let _ = l.apply_contribution_reward(&owner(w), f, 1.0, cause(), tick); }
                Op::Longevity(w, t) => { let _ = l.apply_longevity_bonus(&owner(w), tick + t); }
                Op::Penalty(w, s) => {
                    let sev = [Severity::Minor, Severity::Major, Severity::Critical][s as usize];
                    l.apply_penalty(&owner(w), sev, cause(), tick);
                }
                Op::Forfeit(w, a) => { let _ = l.forfeit_stake(&owner(w), Tokens::whole(a), cause(), tick); }
                Op::Restore(w) => { let _ = l.restore_reputation(&owner(w), cause(), tick); }
                Op::Bond(w, a, refund) => {
                    if l.post_bond(&owner(w), Tokens::whole(a), cause(), tick).is_ok() {
                        l.settle_bond(&owner(w), Tokens::whole(a), refund, cause(), tick).unwrap();
                    }
                }
                Op::Expire(t) => { l.expire_bans(tick + t); }
            }
            prop_assert!(l.conserved());
            for (s, r) in l.accounts() {
                prop_assert!((0.0..=1.0).contains(&r.score));
                prop_assert!(!s.staked.is_negative() && !s.liquid.is_negative());
            }
        }
        let mut held: BTreeMap<PublicKey, Tokens> = BTreeMap::new();
        for e in l.events() {
            *held.entry(e.subject).or_insert(Tokens::ZERO) += e.tokens;
        }
        for (s, _) in l.accounts() {
            prop_assert_eq!(held[&s.owner], s.staked + s.liquid);
        }
    }
}

/// Expected nonce problems from first principles: per sender, walk the
/// batch in order starting at the ledger's next nonce.
fn nonce_oracle(batch: &[(u8, u64)], start: &BTreeMap<u8, u64>) -> Vec<(usize, u64, u64)> {
    let mut next = start.clone();
    let mut out = Vec::new();
    for (i, &(s, n)) in batch.iter().enumerate() {
        let e = next.entry(s).or_insert(0);
        if n != *e {
            out.push((i, *e, n));
        }
        *e = n + 1;
    }
    out
}

proptest! {
    #[test]
    fn nonce_gaps_match_oracle(batch in prop::collection::vec((0u8..3, 0u64..6), 1..12)) {
        let node = kp(200);
        let mut dir: BTreeMap<Digest, LedgerEntry> = BTreeMap::new();
        let ids: Vec<Digest> = batch
            .iter()
            .enumerate()
            .map(|(i, &(s, n))| {
                let id = digest(&[i as u8, s, n as u8]);
                dir.insert(id, LedgerEntry::Txn { sender: kp(s + 1).public_key, nonce: n, quorum_met: true });
                id
            })
            .collect();
        let ledger = Ledger::new();
        let p = Proposal::new(&node, 1, ledger.head().block_digest, ids.clone(), 0);
        let got: Vec<(usize, u64, u64)> = validate_proposal(&p, &ledger, &dir)
            .unwrap()
            .into_iter()
            .map(|pr| match pr {
                ProposalProblem::NonceGap { id, expected, got } => (ids.iter().position(|x| *x == id).unwrap(), expected, got),
                other => panic!("unexpected {other:?}"),
            })
            .collect();
        prop_assert_eq!(got, nonce_oracle(&batch, &BTreeMap::new()));
    }

    /// Appended chains re-verify; any single mutation is caught.
    #[test]
    fn chain_append_and_tamper(
        blocks in prop::collection::vec(prop::collection::vec(any::<u8>(), 0..4), 1..8),
        target in any::<prop::sample::Index>(),
        what in 0u8..4,
    ) {
        let validators: Vec<KeyPair> = (10..14).map(kp).collect();
        let known: BTreeSet<PublicKey> = validators.iter().map(|v| v.public_key).collect();
        let dir: BTreeMap<Digest, LedgerEntry> = BTreeMap::new();
        let mut ledger = Ledger::new();
        for (h, txs) in blocks.iter().enumerate() {
            let ids: Vec<Digest> = txs.iter().map(|&b| digest(&[h as u8, b])).collect();
            let p = Proposal::new(&validators[h % 4], h as u64 + 1, ledger.head().block_digest, ids, h as u64);
            let votes: Vec<Vote> = validators.iter().enumerate().map(|(i, v)| Vote::cast(v, p.digest(), i != 3, 0.25, vec![])).collect();
            ledger.append(LedgerBlock::from_proposal(&p, votes, h as u64), &dir).unwrap();
        }
        let is_known = |k: &PublicKey| known.contains(k);
        let chain = ledger.blocks();
        prop_assert!(verify_blocks_full(&chain[1..], &chain[0], 0.5, &is_known).is_ok());

        let mut forged = chain[1..].to_vec();
        let at = target.index(forged.len());
        let b = &mut forged[at];
        match what {
            0 => b.txn_ids.push(digest(b"smuggled")),
            1 => b.votes[0].weight = 0.9,
            2 => b.votes.iter_mut().for_each(|v| v.accept = false),
            _ => b.parent = digest(b"elsewhere"),
        }
        prop_assert!(verify_blocks_full(&forged, &chain[0], 0.5, &is_known).is_err());
    }
}
