//! Streaming anomaly detection over protocol event streams: a sliding
//! window baseline with z-score point alerts, a two-sided CUSUM
//! changepoint detector, quarantine bookkeeping and log investigation.

use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::primitives::PublicKey;
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnomalyConfig {
    pub window: usize,
    pub z_threshold: f64,
    pub cusum_drift: f64,
    pub cusum_limit: f64,
    pub review_period: u64,
    pub investigate_radius: u64,
    pub monitor_txn_volume: bool,
    pub monitor_payload_size: bool,
    pub monitor_witness_dissent: bool,
    pub monitor_vote_against: bool,
}

impl Default for AnomalyConfig {
    fn default() -> Self {
        Self {
            window: 100,
            z_threshold: 3.0,
            cusum_drift: 0.5,
            cusum_limit: 5.0,
            review_period: 100,
            investigate_radius: 50,
            monitor_txn_volume: true,
            monitor_payload_size: true,
            monitor_witness_dissent: true,
            monitor_vote_against: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum AlertKind {
    PointOutlier,
    Changepoint,
}

impl AlertKind {
    pub fn as_str(self) -> &'static str {
        match self {
            AlertKind::PointOutlier => "point_outlier",
            AlertKind::Changepoint => "changepoint",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnomalyAlert<F> {
    pub stream_id: String,
    pub tick: u64,
    pub value: F,
    /// Standardized deviation for point alerts; the signed CUSUM statistic
    /// for changepoints.
    pub z_score: F,
    pub kind: AlertKind,
    pub subject: Option<PublicKey>,
}

pub const ALERT_CSV_HEADER: &str = "tick,stream,subject,kind,z_score,value";

impl<F: Scalar> AnomalyAlert<F> {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{:.6},{:.6}",
            self.tick,
            self.stream_id,
            self.subject.map(|s| s.to_hex()).unwrap_or_default(),
            self.kind.as_str(),
            self.z_score.to_f64_lossy(),
            self.value.to_f64_lossy()
        )
    }
}

/// Sliding-window mean and variance with Welford add/remove updates.
/// The accumulators are rebuilt from the window once per full turnover so
/// rounding drift stays bounded on arbitrarily long streams.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StreamBaseline<F> {
    pub stream_id: String,
    pub subject: Option<PublicKey>,
    window: VecDeque<F>,
    capacity: usize,
    mean: F,
    m2: F,
    samples_seen: u64,
    evictions_since_rebuild: usize,
    cusum_pos: F,
    cusum_neg: F,
    z_threshold: F,
    drift: F,
    limit: F,
}

impl<F: Scalar> StreamBaseline<F> {
    pub fn new(stream_id: impl Into<String>, subject: Option<PublicKey>, config: &AnomalyConfig) -> Self {
        let capacity = config.window.max(2);
        Self {
            stream_id: stream_id.into(),
            subject,
            window: VecDeque::with_capacity(capacity),
            capacity,
            mean: F::zero(),
            m2: F::zero(),
            samples_seen: 0,
            evictions_since_rebuild: 0,
            cusum_pos: F::zero(),
            cusum_neg: F::zero(),
            z_threshold: F::lit(config.z_threshold),
            drift: F::lit(config.cusum_drift),
            limit: F::lit(config.cusum_limit),
        }
    }

    pub fn samples_seen(&self) -> u64 {
        self.samples_seen
    }

    pub fn warmed_up(&self) -> bool {
        self.samples_seen >= self.capacity as u64
    }

    pub fn mean(&self) -> F {
        self.mean
    }

    /// Sample variance (n − 1 denominator) over the window.
    pub fn variance(&self) -> F {
        let n = self.window.len();
        if n < 2 {
            F::zero()
        } else {
            (self.m2 / F::lit((n - 1) as f64)).max(F::zero())
        }
    }

    pub fn std_dev(&self) -> F {
        self.variance().sqrt()
    }

    pub fn window(&self) -> impl Iterator<Item = &F> {
        self.window.iter()
    }

    pub fn cusum(&self) -> (F, F) {
        (self.cusum_pos, self.cusum_neg)
    }

    fn push(&mut self, x: F) {
        self.samples_seen += 1;
        if self.window.len() == self.capacity {
            let old = self.window.pop_front().expect("full window");
            let n = F::lit(self.window.len() as f64);
            if self.window.is_empty() {
                self.mean = F::zero();
                self.m2 = F::zero();
            } else {
                let old_mean = self.mean;
                self.mean = old_mean - (old - old_mean) / n;
                self.m2 = self.m2 - (old - old_mean) * (old - self.mean);
            }
            self.evictions_since_rebuild += 1;
        }
        self.window.push_back(x);
        let n = F::lit(self.window.len() as f64);
        let delta = x - self.mean;
        self.mean = self.mean + delta / n;
        self.m2 = self.m2 + delta * (x - self.mean);
        // Incremental updates leave rounding residue once the window
        // becomes (nearly) constant; fall back to an exact two-pass sum.
        let scale = self.mean * self.mean + F::one();
        let tiny = self.m2 <= F::epsilon() * F::lit(16.0) * n * scale;
        if self.evictions_since_rebuild >= self.capacity || (tiny && self.evictions_since_rebuild > 0) {
            self.rebuild();
        }
    }

    fn rebuild(&mut self) {
        let n = F::lit(self.window.len() as f64);
        let mean = self.window.iter().copied().sum::<F>() / n;
        let first = self.window.front().copied().unwrap_or_else(F::zero);
        let (mean, m2) = if self.window.iter().all(|&x| x == first) {
            (first, F::zero())
        } else {
            (mean, self.window.iter().map(|&x| (x - mean) * (x - mean)).sum::<F>())
        };
        self.mean = mean;
        self.m2 = m2;
        self.evictions_since_rebuild = 0;
    }

    /// Standardized deviation from the current window. A zero-variance
    /// window maps any deviation to a signed infinity.
    pub fn z_score(&self, x: F) -> F {
        let dev = x - self.mean;
        let sd = self.std_dev();
        if sd > F::zero() {
            dev / sd
        } else if dev == F::zero() {
            F::zero()
        } else {
            F::infinity() * dev.signum()
        }
    }

    fn alert(&self, tick: u64, value: F, z: F, kind: AlertKind) -> AnomalyAlert<F> {
        AnomalyAlert {
            stream_id: self.stream_id.clone(),
            tick,
            value,
            z_score: z,
            kind,
            subject: self.subject,
        }
    }

    /// Point-outlier test against the window, then add the sample to it.
    /// Silent until `window` samples have been seen.
    pub fn observe(&mut self, x: F, tick: u64) -> Option<AnomalyAlert<F>> {
        let out = if self.warmed_up() {
            let z = self.z_score(x);
            (z.abs() > self.z_threshold).then(|| self.alert(tick, x, z, AlertKind::PointOutlier))
        } else {
            None
        };
        self.push(x);
        out
    }

    /// Two-sided CUSUM step on the standardized residual. Does not add the
    /// sample to the window; call [`observe`](Self::observe) for that.
    pub fn detect_changepoint(&mut self, x: F, tick: u64) -> Option<AnomalyAlert<F>> {
        if !self.warmed_up() {
            return None;
        }
        let sd = self.std_dev();
        if sd <= F::zero() {
            // Degenerate window: the point detector already fires on any change.
            return None;
        }
        let r = (x - self.mean) / sd;
        self.cusum_pos = (self.cusum_pos + r - self.drift).max(F::zero());
        self.cusum_neg = (self.cusum_neg - r - self.drift).max(F::zero());
        let stat = if self.cusum_pos > self.limit {
            Some(self.cusum_pos)
        } else if self.cusum_neg > self.limit {
            Some(-self.cusum_neg)
        } else {
            None
        };
        stat.map(|s| {
            self.cusum_pos = F::zero();
            self.cusum_neg = F::zero();
            self.alert(tick, x, s, AlertKind::Changepoint)
        })
    }

    /// Changepoint step followed by the point test; at most two alerts.
    pub fn ingest(&mut self, x: F, tick: u64) -> Vec<AnomalyAlert<F>> {
        let cp = self.detect_changepoint(x, tick);
        let pt = self.observe(x, tick);
        cp.into_iter().chain(pt).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuarantineRecord {
    pub subject: PublicKey,
    pub start_tick: u64,
    pub reason: String,
    pub released_tick: Option<u64>,
    /// Set by arbitration to hold the subject past the review period.
    pub extended: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum AnomalyError {
    #[error("{0:?} is already quarantined")]
    AlreadyQuarantined(PublicKey),
    #[error("{0:?} is not quarantined")]
    NotQuarantined(PublicKey),
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct QuarantineRegistry {
    records: Vec<QuarantineRecord>,
    active: BTreeMap<PublicKey, usize>,
}

impl QuarantineRegistry {
    pub fn is_quarantined(&self, subject: &PublicKey) -> bool {
        self.active.contains_key(subject)
    }

    pub fn records(&self) -> &[QuarantineRecord] {
        &self.records
    }

    pub fn active(&self) -> impl Iterator<Item = &PublicKey> {
        self.active.keys()
    }

    pub fn quarantine(&mut self, subject: PublicKey, reason: impl Into<String>, tick: u64) -> Result<&QuarantineRecord, AnomalyError> {
        if self.active.contains_key(&subject) {
            return Err(AnomalyError::AlreadyQuarantined(subject));
        }
        self.records.push(QuarantineRecord {
            subject,
            start_tick: tick,
            reason: reason.into(),
            released_tick: None,
            extended: false,
        });
        self.active.insert(subject, self.records.len() - 1);
        Ok(self.records.last().expect("just pushed"))
    }

    pub fn extend(&mut self, subject: &PublicKey) -> Result<(), AnomalyError> {
        let idx = *self.active.get(subject).ok_or(AnomalyError::NotQuarantined(*subject))?;
        self.records[idx].extended = true;
        Ok(())
    }

    pub fn release(&mut self, subject: &PublicKey, tick: u64) -> Result<(), AnomalyError> {
        let idx = self.active.remove(subject).ok_or(AnomalyError::NotQuarantined(*subject))?;
        self.records[idx].released_tick = Some(tick);
        Ok(())
    }

    /// Release every non-extended quarantine that has served `review_period`.
    pub fn release_due(&mut self, tick: u64, review_period: u64) -> Vec<PublicKey> {
        let due: Vec<PublicKey> = self
            .active
            .iter()
            .filter(|(_, &i)| !self.records[i].extended && tick >= self.records[i].start_tick + review_period)
            .map(|(k, _)| *k)
            .collect();
        for k in &due {
            self.release(k, tick).expect("active");
        }
        due
    }
}

/// Protocol violations an investigation can surface from the log.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ViolationKind {
    CommitMismatch,
    NonceReplay,
    InspectionFailure,
    ForgedSync,
}

/// What an event log must expose for investigation.
pub trait InvestigableEvent {
    fn tick(&self) -> u64;
    fn involves(&self, subject: &PublicKey) -> bool;
    fn violation_by(&self, subject: &PublicKey) -> Option<ViolationKind>;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InvestigationReport {
    pub subject: Option<PublicKey>,
    pub stream_id: String,
    pub alert_tick: u64,
    pub from_tick: u64,
    pub to_tick: u64,
    /// Indices into the event log.
    pub events: Vec<usize>,
    pub violations: Vec<(usize, ViolationKind)>,
}

impl InvestigationReport {
    pub fn found_violations(&self) -> bool {
        !self.violations.is_empty()
    }
}

/// Pull the log slice within `radius` ticks of the alert (clamped at 0).
/// Subject-less alerts collect the slice but attribute no violations.
pub fn investigate<E: InvestigableEvent, F>(log: &[E], alert: &AnomalyAlert<F>, radius: u64) -> InvestigationReport {
    let from = alert.tick.saturating_sub(radius);
    let to = alert.tick.saturating_add(radius);
    let mut events = Vec::new();
    let mut violations = Vec::new();
    for (i, e) in log.iter().enumerate() {
        let t = e.tick();
        if t < from || t > to {
            continue;
        }
        match &alert.subject {
            Some(s) => {
                if e.involves(s) {
                    events.push(i);
                    if let Some(v) = e.violation_by(s) {
                        violations.push((i, v));
                    }
                }
            }
            None => events.push(i),
        }
    }
    InvestigationReport {
        subject: alert.subject,
        stream_id: alert.stream_id.clone(),
        alert_tick: alert.tick,
        from_tick: from,
        to_tick: to,
        events,
        violations,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn baseline(window: usize) -> StreamBaseline<f64> {
        StreamBaseline::new(
            "s",
            None,
            &AnomalyConfig {
                window,
                ..Default::default()
            },
        )
    }

    #[test]
    fn constant_stream_never_alerts() {
        let mut b = baseline(100);
        for t in 0..500 {
            assert!(b.ingest(5.0, t).is_empty());
        }
        assert_eq!(b.z_score(5.0), 0.0);
    }

    #[test]
    fn degenerate_window_alerts_on_any_change() {
        let mut b = baseline(10);
        for t in 0..10 {
            b.observe(5.0, t);
        }
        let a = b.observe(5.001, 10).expect("alert");
        assert!(a.z_score.is_infinite() && a.z_score > 0.0);
        assert_eq!(a.kind, AlertKind::PointOutlier);
    }

    #[test]
    fn warm_up_is_silent() {
        let mut b = baseline(100);
        for t in 0..100u64 {
            let wild = if t % 2 == 0 { 1e9 } else { -1e9 } * (t as f64 + 1.0);
            assert!(b.ingest(wild, t).is_empty());
        }
        assert!(b.warmed_up());
    }

    #[test]
    fn window_statistics_match_recomputation() {
        let mut b = baseline(7);
        let xs = [3.0, 1.0, 4.0, 1.0, 5.0, 9.0, 2.0, 6.0, 5.0, 3.0, 5.0, 8.0, 9.0, 7.0, 9.0];
        for (t, &x) in xs.iter().enumerate() {
            b.observe(x, t as u64);
        }
        let w = &xs[xs.len() - 7..];
        let mean = w.iter().sum::<f64>() / 7.0;
        let var = w.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 6.0;
        assert!((b.mean() - mean).abs() < 1e-12);
        assert!((b.variance() - var).abs() < 1e-12);
    }

    #[test]
    fn outlier_sign_and_threshold() {
        let mut b = baseline(4);
        for (t, x) in [0.0, 2.0, 0.0, 2.0].into_iter().enumerate() {
            b.observe(x, t as u64);
        }
        // mean 1, sample sd sqrt(4/3)
        let sd = (4.0f64 / 3.0).sqrt();
        let z_hi = b.z_score(1.0 + 3.0 * sd + 1e-9);
        assert!(z_hi > 3.0);
        let a = b.clone().observe(1.0 - 4.0 * sd, 9).unwrap();
        assert!(a.z_score < -3.0);
        assert!(b.observe(1.0 + 2.9 * sd, 9).is_none());
    }

    #[test]
    fn cusum_fires_on_sustained_shift_and_resets() {
        let mut b = baseline(10);
        for t in 0..10 {
            b.observe(if t % 2 == 0 { -1.0 } else { 1.0 }, t);
        }
        let mut hit = None;
        for t in 10..20 {
            if let Some(a) = b.detect_changepoint(3.0, t) {
                hit = Some(a);
                break;
            }
        }
        let a = hit.expect("changepoint");
        assert_eq!(a.kind, AlertKind::Changepoint);
        assert!(a.z_score > 5.0);
        assert_eq!(b.cusum(), (0.0, 0.0));
    }

    #[test]
    fn f32_baseline() {
        let mut b: StreamBaseline<f32> = StreamBaseline::new("s", None, &AnomalyConfig::default());
        for t in 0..200 {
            b.observe((t % 3) as f32, t);
        }
        assert!((b.mean() - 1.0).abs() < 0.02);
    }

    #[test]
    fn quarantine_lifecycle() {
        let mut q = QuarantineRegistry::default();
        let s = PublicKey([1; 32]);
        q.quarantine(s, "alert", 10).unwrap();
        assert_eq!(q.quarantine(s, "again", 11).unwrap_err(), AnomalyError::AlreadyQuarantined(s));
        assert!(q.release_due(109, 100).is_empty());
        assert_eq!(q.release_due(110, 100), vec![s]);
        assert!(!q.is_quarantined(&s));
        assert_eq!(q.records()[0].released_tick, Some(110));

        q.quarantine(s, "again", 200).unwrap();
        q.extend(&s).unwrap();
        assert!(q.release_due(1000, 100).is_empty());
    }

    struct Ev {
        tick: u64,
        actor: PublicKey,
        violation: Option<ViolationKind>,
    }

    impl InvestigableEvent for Ev {
        fn tick(&self) -> u64 {
            self.tick
        }
        fn involves(&self, s: &PublicKey) -> bool {
            self.actor == *s
        }
        fn violation_by(&self, s: &PublicKey) -> Option<ViolationKind> {
            (self.actor == *s).then_some(self.violation).flatten()
        }
    }

    fn alert_at(tick: u64, subject: Option<PublicKey>) -> AnomalyAlert<f64> {
        AnomalyAlert {
            stream_id: "s".into(),
            tick,
            value: 0.0,
            z_score: 4.0,
            kind: AlertKind::PointOutlier,
            subject,
        }
    }

    #[test]
    fn investigation_window_clamps_and_finds_violations() {
        let a = PublicKey([1; 32]);
        let b = PublicKey([2; 32]);
        let log = vec![
            Ev { tick: 0, actor: a, violation: None },
            Ev { tick: 20, actor: a, violation: Some(ViolationKind::CommitMismatch) },
            Ev { tick: 25, actor: b, violation: Some(ViolationKind::NonceReplay) },
            Ev { tick: 80, actor: a, violation: None },
            Ev { tick: 81, actor: a, violation: None },
        ];
        let r = investigate(&log, &alert_at(30, Some(a)), 50);
        assert_eq!((r.from_tick, r.to_tick), (0, 80));
        assert_eq!(r.events, vec![0, 1, 3]);
        assert_eq!(r.violations, vec![(1, ViolationKind::CommitMismatch)]);

        let benign = investigate(&log, &alert_at(30, Some(PublicKey([9; 32]))), 50);
        assert!(!benign.found_violations());
        let global = investigate(&log, &alert_at(30, None), 50);
        assert_eq!(global.events.len(), 4);
        assert!(!global.found_violations());
    }
}
