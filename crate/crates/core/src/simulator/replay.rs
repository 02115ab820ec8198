//! A compact projection of world state that can be rebuilt from the event
//! log alone. Equality of the two projections is the replay check.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::arbitration::DisputeStage;
use crate::incentives::{IncentiveKind, Standing, Tokens};
use crate::onboarding::DeviceStatus;
use crate::primitives::{digest, Digest, PublicKey};
use crate::transmission::{TxnId, TxnStatus};

use super::events::{Event, EventKind};
use super::world::World;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeviceState {
    pub status: DeviceStatus,
    /// Rounded to 1e-9 so float summation order cannot leak in.
    pub reputation: f64,
    pub staked: Tokens,
    pub liquid: Tokens,
    pub standing: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StateProjection {
    pub tick: u64,
    pub height: u64,
    pub head: Option<Digest>,
    pub devices: BTreeMap<PublicKey, DeviceState>,
    pub txn_status: BTreeMap<String, usize>,
    pub quarantined: BTreeSet<PublicKey>,
    pub disputes_open: usize,
    pub disputes_closed: usize,
}

fn round_rep(r: f64) -> f64 {
    (r * 1e9).round() / 1e9
}

fn standing_name(s: Standing) -> &'static str {
    match s {
        Standing::Good => "good",
        Standing::TempBanned { .. } => "temp_banned",
        Standing::PermBanned => "perm_banned",
    }
}

fn status_name(s: TxnStatus) -> String {
    format!("{s:?}").to_lowercase()
}

impl StateProjection {
    pub fn of_world(w: &World) -> Self {
        let mut devices = BTreeMap::new();
        for (stake, rep) in w.incentives().accounts() {
            let k = stake.owner;
            let status = w.desk().profile(&k).map_or(DeviceStatus::Active, |p| p.status);
            devices.insert(
                k,
                DeviceState {
                    status,
                    reputation: round_rep(rep.score),
                    staked: stake.staked,
                    liquid: stake.liquid,
                    standing: standing_name(rep.standing).into(),
                },
            );
        }
        let mut txn_status = BTreeMap::new();
        for t in w.transactions().values() {
            *txn_status.entry(status_name(t.status)).or_default() += 1;
        }
        let closed = w
            .dispute_registry()
            .disputes()
            .filter(|d| d.stage == DisputeStage::Closed)
            .count();
        StateProjection {
            tick: w.tick(),
            height: w.chain().height(),
            head: (w.chain().height() > 0).then(|| w.chain().head().block_digest),
            devices,
            txn_status,
            quarantined: w.quarantine_registry().active().copied().collect(),
            disputes_open: w.dispute_registry().disputes().count() - closed,
            disputes_closed: closed,
        }
    }

    /// Rebuild from the log. `initial_reputation` is the score new
    /// accounts open with.
    pub fn from_log(events: &[Event], initial_reputation: f64) -> Self {
        let mut p = StateProjection::default();
        let mut reps: BTreeMap<PublicKey, f64> = BTreeMap::new();
        let mut txns: BTreeMap<TxnId, TxnStatus> = BTreeMap::new();
        let mut open: BTreeSet<u64> = BTreeSet::new();
        let mut closed: BTreeSet<u64> = BTreeSet::new();
        for e in events {
            p.tick = p.tick.max(e.tick + 1);
            match &e.kind {
                EventKind::Activated { device, .. } => {
                    reps.insert(*device, initial_reputation);
                    p.devices.insert(
                        *device,
                        DeviceState {
                            status: DeviceStatus::Active,
                            reputation: 0.0,
                            staked: Tokens::ZERO,
                            liquid: Tokens::ZERO,
                            standing: "good".into(),
                        },
                    );
                }
                EventKind::Incentive { event } => {
                    if let Some(d) = p.devices.get_mut(&event.subject) {
                        *reps.get_mut(&event.subject).expect("account") += event.reputation;
                        match event.kind {
                            IncentiveKind::StakeDeposit | IncentiveKind::StakeForfeit => d.staked += event.tokens,
                            _ => d.liquid += event.tokens,
                        }
                        match event.kind {
                            IncentiveKind::TempBan => d.standing = "temp_banned".into(),
                            IncentiveKind::PermBan => d.standing = "perm_banned".into(),
                            _ => {}
                        }
                    }
                }
                EventKind::BanLifted { device } => {
                    if let Some(d) = p.devices.get_mut(device) {
                        d.standing = "good".into();
                    }
                }
                EventKind::StatusChanged { device, to, .. } => {
                    if let Some(d) = p.devices.get_mut(device) {
                        d.status = *to;
                    }
                }
                EventKind::Quarantined { device, .. } => {
                    p.quarantined.insert(*device);
                }
                EventKind::Released { device } => {
                    p.quarantined.remove(device);
                }
                EventKind::BlockCommitted { height, digest, .. } => {
                    p.height = *height;
                    p.head = Some(*digest);
                }
                EventKind::Submitted { txn, .. } => {
                    txns.insert(*txn, TxnStatus::Pending);
                }
                EventKind::Aggregated { txn, status, .. } => {
                    txns.insert(*txn, *status);
                }
                EventKind::PanelOpened { txn, round, .. } if *round > 0 => {
                    txns.insert(*txn, TxnStatus::Pending);
                }
                EventKind::Trimmed { txns: ids, .. } => {
                    for id in ids {
                        if let Some(s) = txns.get_mut(id) {
                            if *s == TxnStatus::Witnessed {
                                *s = TxnStatus::Disputed;
                            }
                        }
                    }
                }
                EventKind::TxnRejected { txn, .. } => {
                    txns.insert(*txn, TxnStatus::Rejected);
                }
                EventKind::TxnCommitted { txn, .. } => {
                    txns.insert(*txn, TxnStatus::Committed);
                }
                EventKind::DisputeOpened { dispute, .. } => {
                    open.insert(*dispute);
                }
                EventKind::DisputeClosed { dispute, .. } => {
                    open.remove(dispute);
                    closed.insert(*dispute);
                }
                EventKind::Appealed { dispute, .. } => {
                    closed.remove(dispute);
                    open.insert(*dispute);
                }
                _ => {}
            }
        }
        for (k, r) in reps {
            p.devices.get_mut(&k).expect("account").reputation = round_rep(r);
        }
        for s in txns.into_values() {
            *p.txn_status.entry(status_name(s)).or_default() += 1;
        }
        p.disputes_open = open.len();
        p.disputes_closed = closed.len();
        p
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("projection serializes")
    }

    pub fn digest(&self) -> Digest {
        digest(self.to_json().as_bytes())
    }
}
