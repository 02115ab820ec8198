use std::collections::{BTreeMap, BTreeSet};

use gdp_core::consensus::vote_weights;
use gdp_core::onboarding::DeviceStatus;
use gdp_core::primitives::{PublicKey, SeededRng};
use gdp_core::simulator::{
    audit, builtin_with, derive, run, write_outputs, AdversarySpec, ConfigError, Event, EventKind, ScenarioConfig, SimError,
    StateProjection, World,
};
use gdp_core::stochastic::{should_inspect, TargetKind};
use gdp_core::transmission::TxnStatus;

fn small(ticks: u64) -> ScenarioConfig {
    ScenarioConfig {
        duration_ticks: ticks,
        drain_ticks: 30.min(ticks),
        ..ScenarioConfig::default()
    }
}

fn scenario(name: &str, overrides: &[&str]) -> ScenarioConfig {
    let o: Vec<String> = overrides.iter().map(|s| s.to_string()).collect();
    builtin_with(name, &o).unwrap()
}

fn ran(cfg: ScenarioConfig) -> World {
    let mut w = World::build(cfg).unwrap();
    w.run_to_end();
    w
}

#[test]
fn ten_honest_devices_all_active_at_genesis() {
    let cfg = ScenarioConfig {
        n_honest_devices: 10,
        ..small(10)
    };
    let w = World::build(cfg).unwrap();
    let clients: Vec<_> = w.actors().iter().filter(|a| a.cohort == "honest_client").collect();
    assert_eq!(clients.len(), 10);
    for a in &clients {
        assert_eq!(w.desk().profile(&a.key()).unwrap().status, DeviceStatus::Active);
    }
    assert!(w.actors().iter().all(|a| w.desk().profile(&a.key()).unwrap().status == DeviceStatus::Active));
    assert_eq!(w.chain().height(), 0);
    assert_eq!(w.tick(), 0);
}

#[test]
fn panel_larger_than_pool_is_rejected_with_path() {
    let cfg = ScenarioConfig {
        n_witness_pool: 3,
        ..small(10)
    };
    match World::build(cfg) {
        Err(SimError::Config(ConfigError::Invalid { path, .. })) => assert_eq!(path, "n_witness_pool"),
        Err(e) => panic!("wrong error {e}"),
        Ok(_) => panic!("accepted k=5 with a pool of 3"),
    }
}

#[test]
fn same_config_same_initial_snapshot() {
    let a = World::build(small(10)).unwrap();
    let b = World::build(small(10)).unwrap();
    assert_eq!(StateProjection::of_world(&a).digest(), StateProjection::of_world(&b).digest());
    let c = World::build(ScenarioConfig { seed: 2, ..small(10) }).unwrap();
    assert_ne!(StateProjection::of_world(&a).digest(), StateProjection::of_world(&c).digest());
}

#[test]
fn idle_world_only_heartbeats() {
    let cfg = ScenarioConfig {
        txn_arrival_rate: 0.0,
        ..small(60)
    };
    let mut w = World::build(cfg).unwrap();
    let before = w.log().len();
    for _ in 0..50 {
        let events = w.step();
        assert_eq!(events.len(), 1);
        assert!(matches!(events[0].kind, EventKind::Heartbeat { pending: 0, .. }));
    }
    assert_eq!(w.log().len(), before + 50);
    assert_eq!(w.chain().height(), 0);
}

#[test]
fn single_honest_transaction_commits_within_bound() {
    let mut cfg = ScenarioConfig {
        max_transactions: Some(1),
        ..small(100)
    };
    cfg.inspection.max_commit_delay = 0;
    let deadline = cfg.panel.reveal_deadline;
    let w = ran(cfg);
    let committed: Vec<u64> = w
        .log()
        .iter()
        .filter_map(|e| match e.kind {
            EventKind::TxnCommitted { latency, .. } => Some(latency),
            _ => None,
        })
        .collect();
    assert_eq!(committed.len(), 1);
    assert!(committed[0] <= deadline + 3, "latency {}", committed[0]);
}

#[test]
fn replay_rebuilds_live_state() {
    for (name, over) in [
        ("baseline", &["duration_ticks=300"][..]),
        ("equivocation", &["duration_ticks=400"][..]),
        ("forged_sync", &["duration_ticks=400"][..]),
        ("key_compromise", &["duration_ticks=700", "adversaries.0.at_tick=300"][..]),
    ] {
        let w = ran(scenario(name, over));
        let live = StateProjection::of_world(&w);
        let replayed = StateProjection::from_log(w.log(), w.config.incentives.initial_reputation);
        assert_eq!(live, replayed, "{name}");
    }
}

fn protocol_view(log: &[Event]) -> Vec<&Event> {
    log.iter().filter(|e| !e.kind.is_truth()).collect()
}

#[test]
fn protocol_never_reads_ground_truth() {
    for (name, over) in [
        ("collusion_below_quorum", &["duration_ticks=300", "max_transactions=1500"][..]),
        ("key_compromise", &["duration_ticks=700", "adversaries.0.at_tick=300"][..]),
    ] {
        let plain = ran(scenario(name, over));
        let mut flipped = World::build(scenario(name, over)).unwrap();
        flipped.invert_ground_truth();
        flipped.run_to_end();
        let truth_differs = plain
            .log()
            .iter()
            .zip(flipped.log())
            .any(|(a, b)| a.kind.is_truth() && a != b);
        assert!(truth_differs || !plain.log().iter().any(|e| matches!(e.kind, EventKind::GroundTruth { .. })));
        assert_eq!(protocol_view(plain.log()), protocol_view(flipped.log()), "{name}");
    }
}

#[test]
fn report_rederives_from_written_log() {
    let outcome = run(scenario("lazy_witnesses", &["duration_ticks=400"])).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_outputs(&outcome, dir.path()).unwrap();
    let text = std::fs::read_to_string(dir.path().join("events.jsonl")).unwrap();
    let events: Vec<Event> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert!(events.as_slice() == outcome.world.log(), "event log does not round-trip");
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("report.json")).unwrap()).unwrap();
    let rederived = serde_json::to_value(derive(&events, &outcome.world.config)).unwrap();
    assert_eq!(report["metrics"], rederived);
}

#[test]
fn same_seed_writes_identical_files() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for dir in [&a, &b] {
        let outcome = run(scenario("equivocation", &["duration_ticks=300"])).unwrap();
        write_outputs(&outcome, dir.path()).unwrap();
    }
    let mut names: Vec<_> = std::fs::read_dir(a.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert!(names.len() >= 9);
    for n in names {
        let x = std::fs::read(a.path().join(&n)).unwrap();
        let y = std::fs::read(b.path().join(&n)).unwrap();
        assert!(x == y, "{n:?} differs");
    }
}

#[test]
fn unstaked_sybils_never_activate() {
    let outcome = run(scenario("sybil_flood", &["adversaries.0.count=200"])).unwrap();
    let m = &outcome.report.metrics;
    assert_eq!(m.adversarial_active, 0);
    assert_eq!(m.adversarial_activated, 0);
    let sybil = &m.onboarding["sybil_flood"];
    assert_eq!(sybil.failed, 200);
    assert_eq!(sybil.activated, 0);
}

#[test]
fn staked_sybil_weight_follows_the_formula() {
    let cfg = scenario(
        "sybil_flood",
        &[
            "adversaries.0.count=12",
            "adversaries.0.stake=100",
            "adversaries.0.validator=true",
            "duration_ticks=200",
        ],
    );
    let (ss, rs) = (cfg.consensus.stake_share, cfg.consensus.reputation_share);
    let w = ran(cfg);
    let mut audited = 0;
    for e in w.log() {
        let EventKind::BlockCommitted { weights, .. } = &e.kind else { continue };
        let stake_sum: f64 = weights.iter().map(|a| a.stake).sum();
        let raw: Vec<f64> = weights.iter().map(|a| ss * a.stake / stake_sum + rs * a.reputation).collect();
        let total: f64 = raw.iter().sum();
        for (a, r) in weights.iter().zip(&raw) {
            assert!((a.weight - r / total).abs() < 1e-12, "{} vs {}", a.weight, r / total);
        }
        let stakes: Vec<f64> = weights.iter().map(|a| a.stake).collect();
        let reps: Vec<f64> = weights.iter().map(|a| a.reputation).collect();
        for (a, v) in weights.iter().zip(vote_weights(&stakes, &reps, ss, rs)) {
            assert!((a.weight - v).abs() < 1e-12);
        }
        audited += 1;
    }
    assert!(audited > 0);
    let sybils = w.actors().iter().filter(|a| a.cohort == "sybil_flood").count();
    assert_eq!(sybils, 12);
}

#[test]
fn compromised_keys_end_quarantined() {
    let w = ran(scenario("key_compromise", &["duration_ticks=700", "adversaries.0.at_tick=300"]));
    let compromised: BTreeSet<PublicKey> = w
        .log()
        .iter()
        .filter_map(|e| match e.kind {
            EventKind::DeviceCompromised { device } => Some(device),
            _ => None,
        })
        .collect();
    assert_eq!(compromised.len(), 2);
    for d in &compromised {
        let quarantined = w
            .log()
            .iter()
            .any(|e| matches!(&e.kind, EventKind::Quarantined { device, .. } if device == d));
        let failed_revalidation = w
            .log()
            .iter()
            .any(|e| matches!(&e.kind, EventKind::Revalidated { device, passed: false, .. } if device == d));
        assert!(quarantined, "{} never quarantined", d.short());
        assert!(failed_revalidation, "{} passed revalidation", d.short());
    }
}

#[test]
fn forged_sync_is_caught_and_penalized() {
    let w = ran(scenario("forged_sync", &["duration_ticks=600"]));
    let forgers: BTreeSet<PublicKey> = w.actors().iter().filter(|a| a.cohort == "forged_sync_node").map(|a| a.key()).collect();
    let caught: BTreeSet<PublicKey> = w
        .log()
        .iter()
        .filter_map(|e| match &e.kind {
            EventKind::Inspection { outcome, subject: Some(s) }
                if outcome.target_kind == TargetKind::SyncBatch && !outcome.passed =>
            {
                Some(*s)
            }
            _ => None,
        })
        .collect();
    assert!(!caught.is_empty());
    assert!(caught.is_subset(&forgers));
    for s in &caught {
        let penalized = w.log().iter().any(|e| match &e.kind {
            EventKind::Incentive { event } => event.subject == *s && event.tokens.0 < 0,
            _ => false,
        });
        assert!(penalized, "{} kept its stake", s.short());
    }
    // Honest nodes never adopt forged blocks.
    for (k, l) in w.node_ledgers() {
        if !forgers.contains(k) {
            assert!(l.is_prefix_of(w.chain()));
        }
    }
}

#[test]
fn equivocation_opens_a_witnessing_dispute() {
    let w = ran(scenario("equivocation", &["duration_ticks=500"]));
    let equivocators: BTreeSet<PublicKey> = w
        .actors()
        .iter()
        .filter(|a| a.cohort == "equivocating_witness")
        .map(|a| a.key())
        .collect();
    let mismatched: BTreeSet<PublicKey> = w
        .log()
        .iter()
        .filter_map(|e| match e.kind {
            EventKind::RevealMismatch { witness, .. } => Some(witness),
            _ => None,
        })
        .collect();
    assert!(!mismatched.is_empty());
    assert!(mismatched.is_subset(&equivocators));
    for m in &mismatched {
        let disputed = w.log().iter().any(|e| {
            matches!(&e.kind, EventKind::DisputeOpened { respondents, category, .. }
                if respondents.contains(m) && category == "witnessing")
        });
        assert!(disputed, "{} never answered for the mismatch", m.short());
    }
}

/// Every failed inspection under enforcement leads to a penalty,
/// quarantine or dispute naming the subject.
#[test]
fn failed_inspections_have_consequences() {
    let runs = [
        scenario("collusion_below_quorum", &["duration_ticks=400", "max_transactions=2000"]),
        scenario("forged_sync", &["duration_ticks=600"]),
        scenario("lazy_witnesses", &["duration_ticks=400"]),
        scenario("equivocation", &["duration_ticks=400", "inspection.rate_witness_deep=0.5"]),
    ];
    let mut failures = 0;
    for cfg in runs {
        let name = cfg.name.clone();
        let w = ran(cfg);
        for (i, e) in w.log().iter().enumerate() {
            let EventKind::Inspection { outcome, subject } = &e.kind else { continue };
            if outcome.passed {
                continue;
            }
            failures += 1;
            let subject = subject.expect("failed inspections name a subject");
            let followed = w.log()[i..].iter().any(|f| match &f.kind {
                EventKind::Incentive { event } => event.subject == subject && (event.tokens.0 < 0 || event.reputation < 0.0),
                EventKind::Quarantined { device, .. } => *device == subject,
                EventKind::DisputeOpened { respondents, .. } => respondents.contains(&subject),
                _ => false,
            });
            assert!(followed, "{name}: failed inspection at event {i} had no consequence");
        }
    }
    assert!(failures > 0);
}

/// Inspection decisions are a pure function of seed, target and round.
#[test]
fn inspection_draws_ignore_protocol_state() {
    let cfg = scenario("collusion_below_quorum", &["duration_ticks=400", "max_transactions=2000"]);
    let (seed, rate) = (cfg.seed, cfg.inspection.rate_txn);
    let w = ran(cfg);
    let mut witnessed: Vec<(u64, [u8; 32])> = Vec::new();
    let mut inspected: BTreeSet<(u64, String)> = BTreeSet::new();
    for e in w.log() {
        match &e.kind {
            EventKind::Aggregated {
                txn,
                status: TxnStatus::Witnessed,
                ..
            } => witnessed.push((e.tick, txn.0)),
            EventKind::Inspection { outcome, .. } if outcome.target_kind == TargetKind::Transaction => {
                inspected.insert((e.tick, outcome.target.clone()));
            }
            _ => {}
        }
    }
    assert!(witnessed.len() > 500);
    let predicted: BTreeSet<(u64, String)> = witnessed
        .iter()
        .filter(|(t, id)| should_inspect(seed, TargetKind::Transaction, *t, id, rate))
        .map(|(t, id)| (*t, hex::encode(id)))
        .collect();
    assert_eq!(predicted, inspected);

    // Reordering the candidates changes nothing.
    let mut shuffled = witnessed.clone();
    SeededRng::new(9).shuffle(&mut shuffled);
    let again: BTreeSet<(u64, String)> = shuffled
        .iter()
        .filter(|(t, id)| should_inspect(seed, TargetKind::Transaction, *t, id, rate))
        .map(|(t, id)| (*t, hex::encode(id)))
        .collect();
    assert_eq!(again, inspected);
}

#[test]
fn device_inspection_frequency_matches_rate() {
    let cfg = ScenarioConfig {
        n_honest_devices: 10_000,
        txn_arrival_rate: 0.0,
        ..small(1)
    };
    let rate = cfg.inspection.rate_device;
    let w = World::build(cfg).unwrap();
    let activated = w.log().iter().filter(|e| matches!(e.kind, EventKind::Activated { .. })).count();
    let inspected = w
        .log()
        .iter()
        .filter(|e| matches!(&e.kind, EventKind::Inspection { outcome, .. } if outcome.target_kind == TargetKind::Device))
        .count();
    assert!(activated >= 10_000);
    let freq = inspected as f64 / activated as f64;
    assert!((freq - rate).abs() <= 0.01, "device inspection frequency {freq}");
}

#[test]
fn deep_inspection_exposes_tampered_commit() {
    let w = ran(scenario(
        "collusion_at_quorum",
        &["duration_ticks=200", "inspection.rate_txn=1.0", "inspection.enforcement=audit_only"],
    ));
    let failed: Vec<&Vec<String>> = w
        .log()
        .iter()
        .filter_map(|e| match &e.kind {
            EventKind::Inspection { outcome, .. } if outcome.target_kind == TargetKind::Transaction && !outcome.passed => {
                Some(&outcome.evidence)
            }
            _ => None,
        })
        .collect();
    assert!(!failed.is_empty());
    for ev in failed {
        assert!(ev.iter().any(|s| s.contains("digest")), "evidence {ev:?}");
    }
}

#[test]
fn small_runs_keep_every_invariant() {
    for name in ["baseline", "lazy_witnesses", "equivocation", "forged_sync"] {
        let w = ran(scenario(name, &["duration_ticks=300"]));
        let v = audit(&w);
        assert!(v.is_empty(), "{name}: {}", v.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; "));
    }
}

#[test]
fn adversary_specs_name_their_cohorts() {
    let cfg = scenario("collusion_below_quorum", &["duration_ticks=10"]);
    let kinds: BTreeMap<&str, usize> = cfg.adversaries.iter().map(|a| (a.kind_name(), a.count())).collect();
    let w = World::build(cfg.clone()).unwrap();
    for (kind, count) in kinds {
        assert_eq!(w.actors().iter().filter(|a| a.cohort == kind).count(), count);
    }
    assert!(matches!(cfg.adversaries[0], AdversarySpec::TamperingSender { .. }));
}
