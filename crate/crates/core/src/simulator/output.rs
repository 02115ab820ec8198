//! Whole-run driver, end-of-run checks and the report/CSV writers.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::anomaly::{AnomalyAlert, ALERT_CSV_HEADER};
use crate::arbitration::DISPUTE_CSV_HEADER;
use crate::consensus::{verify_blocks_full, LEDGER_EXPORT_HEADER};
use crate::incentives::INCENTIVE_CSV_HEADER;
use crate::stochastic::INSPECTION_CSV_HEADER;
use crate::transmission::TXN_CSV_HEADER;

use super::config::{ScenarioConfig, SCHEMA_VERSION};
use super::events::{Event, EventKind};
use super::metrics::{derive, MetricsReport};
use super::replay::StateProjection;
use super::world::{Behavior, SimError, World};

/// End-of-run integrity checks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checks {
    /// The canonical chain re-verifies from genesis: digests, parents,
    /// vote signatures and thresholds.
    pub chain_integrity: bool,
    /// Every honest validator's ledger is a prefix of the canonical chain.
    pub prefix_consistency: bool,
    pub token_conservation: bool,
    /// Every verdict marked as recorded appears in the chain.
    pub verdict_records: bool,
    /// The state rebuilt from the event log equals the live state.
    pub replay_matches: bool,
    pub snapshot_digest: String,
}

impl Checks {
    pub fn all_hold(&self) -> bool {
        self.chain_integrity && self.prefix_consistency && self.token_conservation && self.verdict_records && self.replay_matches
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub schema_version: u32,
    pub scenario: String,
    pub seed: u64,
    pub metrics: MetricsReport,
    pub checks: Checks,
}

pub struct RunOutcome {
    pub world: World,
    pub report: RunReport,
    pub snapshot: StateProjection,
}

pub fn check_world(w: &World) -> Checks {
    let chain = w.chain();
    let threshold = w.config.consensus.commit_threshold;
    let known = |k: &_| w.validator_keys().contains(k);
    let chain_integrity = verify_blocks_full(&chain.blocks()[1..], &chain.blocks()[0], threshold, &known).is_ok();
    let prefix_consistency = w
        .node_ledgers()
        .iter()
        .filter(|(k, _)| w.actor(k).is_some_and(|a| a.behavior != Behavior::ForgedSync))
        .all(|(_, l)| l.is_prefix_of(chain));
    let snapshot = StateProjection::of_world(w);
    let replayed = StateProjection::from_log(w.log(), w.config.incentives.initial_reputation);
    Checks {
        chain_integrity,
        prefix_consistency,
        token_conservation: w.incentives().conserved(),
        verdict_records: w.dispute_registry().verify_recorded_verdicts(chain).is_ok(),
        replay_matches: snapshot == replayed,
        snapshot_digest: snapshot.digest().to_hex(),
    }
}

/// Build, run to the end, derive metrics and check the final state.
pub fn run(config: ScenarioConfig) -> Result<RunOutcome, SimError> {
    let mut world = World::build(config)?;
    world.run_to_end();
    let metrics = derive(world.log(), &world.config);
    let checks = check_world(&world);
    let report = RunReport {
        schema_version: SCHEMA_VERSION,
        scenario: world.config.name.clone(),
        seed: world.config.seed,
        metrics,
        checks,
    };
    let snapshot = StateProjection::of_world(&world);
    Ok(RunOutcome { world, report, snapshot })
}

fn csv<'a>(header: &str, rows: impl Iterator<Item = String> + 'a) -> String {
    let mut out = String::from(header);
    out.push('\n');
    for r in rows {
        out.push_str(&r);
        out.push('\n');
    }
    out
}

fn txn_row(e: &Event) -> Option<String> {
    let (txn, event, actor, detail) = match &e.kind {
        EventKind::Submitted {
            txn, sender, nonce, size, ..
        } => (txn, "submitted", sender.to_hex(), format!("nonce={nonce};size={size}")),
        EventKind::PanelOpened { txn, round, panel } => (txn, "panel_opened", String::new(), format!("round={round};k={}", panel.len())),
        EventKind::PanelUnavailable { txn, needed, found } => {
            (txn, "panel_unavailable", String::new(), format!("needed={needed};found={found}"))
        }
        EventKind::WitnessCommitted { txn, witness, commit } => (txn, "committed", witness.to_hex(), commit.to_hex()),
        EventKind::WitnessRevealed { txn, witness, verdict, .. } => (txn, "revealed", witness.to_hex(), verdict.to_string()),
        EventKind::RevealMismatch { txn, witness } => (txn, "reveal_mismatch", witness.to_hex(), String::new()),
        EventKind::Aggregated {
            txn,
            round,
            valid,
            invalid,
            status,
        } => (
            txn,
            "aggregated",
            String::new(),
            format!("round={round};valid={valid};invalid={invalid};status={status:?}"),
        ),
        EventKind::SentToArbitration { txn, sender } => (txn, "to_arbitration", sender.to_hex(), String::new()),
        EventKind::TxnRejected { txn, sender, reason } => (txn, "rejected", sender.to_hex(), reason.clone()),
        EventKind::TxnCommitted {
            txn,
            sender,
            height,
            latency,
        } => (txn, "ledger_committed", sender.to_hex(), format!("height={height};latency={latency}")),
        _ => return None,
    };
    Some(format!("{},{},{event},{actor},{detail}", e.tick, txn.to_hex()))
}

fn dispute_row(e: &Event) -> Option<String> {
    let (id, stage, detail) = match &e.kind {
        EventKind::DisputeOpened {
            dispute,
            respondents,
            category,
            ..
        } => (
            *dispute,
            "opened".to_string(),
            format!(
                "category={category};respondents={}",
                respondents.iter().map(|k| k.to_hex()).collect::<Vec<_>>().join("|")
            ),
        ),
        EventKind::DisputeAdvanced { dispute, stage } => (*dispute, stage.as_str().to_string(), String::new()),
        EventKind::DisputeClosed {
            dispute,
            body,
            at_fault,
            record,
        } => (
            *dispute,
            "verdict".to_string(),
            format!("body={body:?};at_fault={};record={}", at_fault.len(), record.to_hex()),
        ),
        EventKind::Appealed { dispute, appellant } => (*dispute, "appeal".to_string(), format!("appellant={}", appellant.to_hex())),
        _ => return None,
    };
    Some(format!("{},{id},{stage},{detail}", e.tick))
}

/// Write `report.json`, `events.jsonl`, the per-module CSVs and
/// `snapshot.json` into `dir`.
pub fn write_outputs(outcome: &RunOutcome, dir: &Path) -> std::io::Result<()> {
    fs::create_dir_all(dir)?;
    let log = outcome.world.log();
    let mut report = serde_json::to_string_pretty(&outcome.report).expect("report serializes");
    report.push('\n');
    fs::write(dir.join("report.json"), report)?;

    let mut events = String::new();
    for e in log {
        let _ = writeln!(events, "{}", serde_json::to_string(e).expect("event serializes"));
    }
    fs::write(dir.join("events.jsonl"), events)?;

    fs::write(dir.join("transactions.csv"), csv(TXN_CSV_HEADER, log.iter().filter_map(txn_row)))?;
    fs::write(
        dir.join("ledger.csv"),
        csv(LEDGER_EXPORT_HEADER, outcome.world.chain().blocks().iter().map(|b| b.export_line())),
    )?;
    let alerts = log.iter().filter_map(|e| match &e.kind {
        EventKind::Alert {
            stream,
            subject,
            kind,
            z,
            value,
        } => Some(
            AnomalyAlert {
                stream_id: stream.clone(),
                tick: e.tick,
                value: *value,
                z_score: *z,
                kind: *kind,
                subject: *subject,
            }
            .csv_row(),
        ),
        _ => None,
    });
    fs::write(dir.join("alerts.csv"), csv(ALERT_CSV_HEADER, alerts))?;
    let incentives = log.iter().filter_map(|e| match &e.kind {
        EventKind::Incentive { event } => Some(event.csv_row()),
        _ => None,
    });
    fs::write(dir.join("incentives.csv"), csv(INCENTIVE_CSV_HEADER, incentives))?;
    fs::write(dir.join("disputes.csv"), csv(DISPUTE_CSV_HEADER, log.iter().filter_map(dispute_row)))?;
    let inspections = log.iter().filter_map(|e| match &e.kind {
        EventKind::Inspection { outcome, .. } => Some(outcome.csv_row()),
        _ => None,
    });
    fs::write(dir.join("inspections.csv"), csv(INSPECTION_CSV_HEADER, inspections))?;

    let snapshot = serde_json::json!({
        "digest": outcome.snapshot.digest().to_hex(),
        "state": outcome.snapshot,
    });
    let mut text = serde_json::to_string_pretty(&snapshot).expect("snapshot serializes");
    text.push('\n');
    fs::write(dir.join("snapshot.json"), text)
}
