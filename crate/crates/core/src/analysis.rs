//! Error budget, run reports and parameter sweeps.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::adversary::AdversarySpec;
use crate::devices::DetectorChannel;
use crate::error::{Error, Result};
use crate::optics::{ArmLosses, RouteTable};
use crate::protocol::{
    run_experiment, Classification, FeedbackMode, LiveLock, RunSettings, SystemParams, TrialRecord,
};

/// Analytic QBER contributions. Each term is a fraction in [0, 1].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorBudget {
    pub e_dark: f64,
    pub e_afterpulse: f64,
    pub e_extinction: f64,
    pub e_visibility: f64,
    pub e_total: f64,
}

/// A random click lands on the right key bit half the time, hence the 0.5
/// on dark counts and afterpulses.
pub fn error_budget(params: &SystemParams, d1_rate: f64) -> Result<ErrorBudget> {
    if !(d1_rate > 0.0 && d1_rate.is_finite()) {
        return Err(Error::param("d1_rate", "must be a positive count rate"));
    }
    let det = &params.detectors;
    let e_dark = (0.5 * det.dark_prob_per_gate * params.rep_rate_hz / d1_rate).clamp(0.0, 1.0);
    let e_afterpulse = (0.5 * det.afterpulse_prob).clamp(0.0, 1.0);
    let e_extinction = params.switch.leakage().clamp(0.0, 1.0);
    let leak = (1.0 - params.interference.contrast().clamp(0.0, 1.0)) / 2.0;
    let rt = params.splitter.reflectivity * params.splitter.transmissivity;
    let e_visibility = if leak + rt > 0.0 {
        (leak / (leak + rt)).clamp(0.0, 1.0)
    } else {
        0.0
    };
    Ok(ErrorBudget {
        e_dark,
        e_afterpulse,
        e_extinction,
        e_visibility,
        e_total: e_dark + e_afterpulse + e_extinction + e_visibility,
    })
}

/// First-order D1 click rate (both polarization channels) ignoring afterpulses.
pub fn expected_d1_rate(params: &SystemParams) -> f64 {
    let optical = params.optical(params.interference.phase_error);
    let eta = params.detectors.efficiency;
    let dark = params.detectors.dark_prob_per_gate;
    let p_click = |same| {
        let q = RouteTable::for_choice(&optical, same).probability(crate::optics::Terminal::D1Port)
            * eta;
        1.0 - (-params.mu * q).exp() * (1.0 - dark) * (1.0 - dark)
    };
    0.5 * (p_click(true) + p_click(false)) * params.rep_rate_hz
}

/// Mergeable counters over trial records.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Tally {
    pub slots: u64,
    pub channel_counts: [u64; 5],
    pub class_counts: [u64; 6],
    pub d2_same: u64,
    pub d2_diff: u64,
    pub d3_same: u64,
    pub d3_diff: u64,
    pub sifted_errors: u64,
    /// Sifted slots where some photon reaching the D1 port had entered the channel.
    pub sifted_via_channel: u64,
    pub attacked_slots: u64,
    pub diff_choice_slots: u64,
    pub diff_choice_d1: u64,
    pub diff_choice_d2: u64,
    pub diff_choice_alice_detections: u64,
}

impl Tally {
    pub fn push(&mut self, r: &TrialRecord) {
        self.slots += 1;
        for c in r.clicks.iter() {
            self.channel_counts[c.index()] += 1;
        }
        self.class_counts[r.classification.index()] += 1;
        let same = r.same_choice();
        let d1 = r.clicks.any_d1();
        let d2 = r.clicks.contains(DetectorChannel::D2);
        if d2 {
            *if same {
                &mut self.d2_same
            } else {
                &mut self.d2_diff
            } += 1;
        }
        if r.clicks.any_d3() {
            *if same {
                &mut self.d3_same
            } else {
                &mut self.d3_diff
            } += 1;
        }
        if r.classification == Classification::SiftedKey {
            if !same {
                self.sifted_errors += 1;
            }
            if r.route.d1_port_via_channel > 0 {
                self.sifted_via_channel += 1;
            }
        }
        if r.route.attacked {
            self.attacked_slots += 1;
        }
        if !same {
            self.diff_choice_slots += 1;
            self.diff_choice_d1 += d1 as u64;
            self.diff_choice_d2 += d2 as u64;
            self.diff_choice_alice_detections += (d1 || d2) as u64;
        }
    }

    pub fn merge(&mut self, o: &Tally) {
        self.slots += o.slots;
        for (a, b) in self.channel_counts.iter_mut().zip(o.channel_counts) {
            *a += b;
        }
        for (a, b) in self.class_counts.iter_mut().zip(o.class_counts) {
            *a += b;
        }
        self.d2_same += o.d2_same;
        self.d2_diff += o.d2_diff;
        self.d3_same += o.d3_same;
        self.d3_diff += o.d3_diff;
        self.sifted_errors += o.sifted_errors;
        self.sifted_via_channel += o.sifted_via_channel;
        self.attacked_slots += o.attacked_slots;
        self.diff_choice_slots += o.diff_choice_slots;
        self.diff_choice_d1 += o.diff_choice_d1;
        self.diff_choice_d2 += o.diff_choice_d2;
        self.diff_choice_alice_detections += o.diff_choice_alice_detections;
    }

    pub fn from_records(records: &[TrialRecord]) -> Self {
        let mut t = Tally::default();
        for r in records {
            t.push(r);
        }
        t
    }

    pub fn count(&self, c: Classification) -> u64 {
        self.class_counts[c.index()]
    }

    pub fn d1_clicks(&self) -> u64 {
        self.channel_counts[DetectorChannel::D1H.index()]
            + self.channel_counts[DetectorChannel::D1V.index()]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Counts {
    pub per_channel: BTreeMap<String, u64>,
    /// Sum over all detector channels.
    pub total_counts: u64,
    pub classifications: BTreeMap<String, u64>,
    pub d2_same: u64,
    pub d2_diff: u64,
    pub d3_same: u64,
    pub d3_diff: u64,
    pub d3_error_rate: Option<f64>,
    pub multiple: u64,
    pub discard: u64,
    pub sifted_bits: u64,
    pub sifted_errors: u64,
    pub sifted_via_channel: u64,
    pub attacked_slots: u64,
    pub diff_choice_slots: u64,
    pub diff_choice_d1: u64,
    pub diff_choice_d2: u64,
    pub diff_choice_alice_detections: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub scenario: String,
    pub mu: f64,
    pub rep_rate_hz: f64,
    pub n_slots: u64,
    pub seed: Option<u64>,
    pub feedback: Option<FeedbackMode>,
    pub adversary: Option<AdversarySpec>,
    pub session_seconds: f64,
    pub counts: Counts,
    pub qber: Option<f64>,
    pub key_rate: f64,
    pub d1_rate: f64,
    /// Absent when no D1 click was observed.
    pub budget: Option<ErrorBudget>,
    /// Wall-clock stamp; not part of the result.
    pub generated_unix_s: u64,
}

fn class_name(c: Classification) -> &'static str {
    match c {
        Classification::SiftedKey => "sifted_key",
        Classification::MonitorD2 => "monitor_d2",
        Classification::MonitorD3 => "monitor_d3",
        Classification::NoClick => "no_click",
        Classification::Multiple => "multiple",
        Classification::Discard => "discard",
    }
}

impl RunReport {
    pub fn from_tally(
        t: &Tally,
        params: &SystemParams,
        session_seconds: f64,
        settings: Option<&RunSettings>,
        adversary: Option<&AdversarySpec>,
    ) -> Self {
        let sifted = t.count(Classification::SiftedKey);
        let per_second = |n: u64| {
            if session_seconds > 0.0 {
                n as f64 / session_seconds
            } else {
                0.0
            }
        };
        let d1_rate = per_second(t.d1_clicks());
        let d3_total = t.d3_same + t.d3_diff;
        let counts = Counts {
            per_channel: DetectorChannel::ALL
                .iter()
                .map(|c| (c.name().to_string(), t.channel_counts[c.index()]))
                .collect(),
            total_counts: t.channel_counts.iter().sum(),
            classifications: Classification::ALL
                .iter()
                .map(|c| (class_name(*c).to_string(), t.count(*c)))
                .collect(),
            d2_same: t.d2_same,
            d2_diff: t.d2_diff,
            d3_same: t.d3_same,
            d3_diff: t.d3_diff,
            d3_error_rate: (d3_total > 0).then(|| t.d3_diff as f64 / d3_total as f64),
            multiple: t.count(Classification::Multiple),
            discard: t.count(Classification::Discard),
            sifted_bits: sifted,
            sifted_errors: t.sifted_errors,
            sifted_via_channel: t.sifted_via_channel,
            attacked_slots: t.attacked_slots,
            diff_choice_slots: t.diff_choice_slots,
            diff_choice_d1: t.diff_choice_d1,
            diff_choice_d2: t.diff_choice_d2,
            diff_choice_alice_detections: t.diff_choice_alice_detections,
        };
        RunReport {
            scenario: params.scenario.name().to_string(),
            mu: params.mu,
            rep_rate_hz: params.rep_rate_hz,
            n_slots: t.slots,
            seed: settings.map(|s| s.seed),
            feedback: settings.map(|s| s.feedback),
            adversary: adversary.copied(),
            session_seconds,
            counts,
            qber: (sifted > 0).then(|| t.sifted_errors as f64 / sifted as f64),
            key_rate: per_second(sifted),
            d1_rate,
            budget: error_budget(params, d1_rate).ok(),
            generated_unix_s: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
        }
    }

    /// Equality of everything except the timestamp.
    pub fn same_results(&self, other: &RunReport) -> bool {
        let strip = |r: &RunReport| RunReport {
            generated_unix_s: 0,
            ..r.clone()
        };
        strip(self) == strip(other)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()? + "\n").map_err(|e| Error::io(path, e))
    }
}

pub fn build_report(
    records: &[TrialRecord],
    params: &SystemParams,
    session_seconds: f64,
) -> RunReport {
    RunReport::from_tally(
        &Tally::from_records(records),
        params,
        session_seconds,
        None,
        None,
    )
}

pub const SWEEP_AXES: &[&str] = &[
    "mu",
    "visibility",
    "phase_error",
    "dark_prob",
    "afterpulse_prob",
    "efficiency",
    "dynamic_extinction_db",
    "static_extinction_db",
    "arm_a_db",
    "arm_b_db",
    "channel_db",
    "reflectivity",
    "rep_rate",
];

/// Sets one named parameter. `arm_b_db` and `channel_db` keep arm a balanced
/// against the full arm b round trip.
pub fn apply_axis(params: &mut SystemParams, axis: &str, value: f64) -> Result<()> {
    match axis {
        "mu" => params.mu = value,
        "visibility" => params.interference.static_visibility = value,
        "phase_error" => params.interference.phase_error = value,
        "dark_prob" => params.detectors.dark_prob_per_gate = value,
        "afterpulse_prob" => params.detectors.afterpulse_prob = value,
        "efficiency" => params.detectors.efficiency = value,
        "dynamic_extinction_db" => params.switch.dynamic_extinction_db = value,
        "static_extinction_db" => params.switch.static_extinction_db = value,
        "arm_a_db" => params.losses.arm_a_roundtrip_db = value,
        "arm_b_db" => params.losses = ArmLosses::balanced(value, params.losses.channel_oneway_db),
        "channel_db" => {
            params.losses = ArmLosses::balanced(params.losses.arm_b_roundtrip_db, value)
        }
        "reflectivity" => {
            params.splitter.reflectivity = value;
            params.splitter.transmissivity = 1.0 - value;
        }
        "rep_rate" => params.rep_rate_hz = value,
        other => {
            return Err(Error::param(
                "axis",
                format!(
                    "unknown axis `{other}`; expected one of {}",
                    SWEEP_AXES.join(", ")
                ),
            ))
        }
    }
    params.validate()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub axis: String,
    pub value: f64,
    pub report: RunReport,
}

/// One run per value. Every point reuses the same seed, so differences
/// between rows come from the parameter and not from fresh randomness.
pub fn sweep(
    base: &SystemParams,
    adversary: &AdversarySpec,
    settings: &RunSettings,
    live: &LiveLock,
    axis: &str,
    values: &[f64],
) -> Result<Vec<SweepRow>> {
    if !SWEEP_AXES.contains(&axis) {
        return Err(Error::param("axis", format!("unknown axis `{axis}`")));
    }
    values
        .iter()
        .map(|&value| {
            let mut p = *base;
            apply_axis(&mut p, axis, value)?;
            Ok(SweepRow {
                axis: axis.to_string(),
                value,
                report: run_experiment(&p, adversary, settings, live)?,
            })
        })
        .collect()
}

#[derive(Serialize)]
struct SweepCsvRow<'a> {
    axis: &'a str,
    value: f64,
    seed: Option<u64>,
    n_slots: u64,
    sifted_bits: u64,
    qber: Option<f64>,
    key_rate: f64,
    d1_rate: f64,
    e_total: Option<f64>,
    d3_error_rate: Option<f64>,
}

pub fn write_sweep_csv<W: std::io::Write>(out: W, rows: &[SweepRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(SweepCsvRow {
            axis: &r.axis,
            value: r.value,
            seed: r.report.seed,
            n_slots: r.report.n_slots,
            sifted_bits: r.report.counts.sifted_bits,
            qber: r.report.qber,
            key_rate: r.report.key_rate,
            d1_rate: r.report.d1_rate,
            e_total: r.report.budget.map(|b| b.e_total),
            d3_error_rate: r.report.counts.d3_error_rate,
        })?;
    }
    w.flush().map_err(|e| Error::io("<sweep csv>", e))?;
    Ok(())
}

/// Two-proportion z statistic for the diff-choice D1 share of Alice's
/// detections, `test` against `baseline`. None when either side has no
/// detections or the pooled share is degenerate.
pub fn anomaly_z(baseline: &RunReport, test: &RunReport) -> Option<f64> {
    let (x0, n0) = (
        baseline.counts.diff_choice_d1,
        baseline.counts.diff_choice_alice_detections,
    );
    let (x1, n1) = (
        test.counts.diff_choice_d1,
        test.counts.diff_choice_alice_detections,
    );
    if n0 == 0 || n1 == 0 {
        return None;
    }
    let (p0, p1) = (x0 as f64 / n0 as f64, x1 as f64 / n1 as f64);
    let pooled = (x0 + x1) as f64 / (n0 + n1) as f64;
    let se = (pooled * (1.0 - pooled) * (1.0 / n0 as f64 + 1.0 / n1 as f64)).sqrt();
    (se > 0.0).then(|| (p1 - p0) / se)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::protocol::Scenario;

    #[test]
    fn budget_terms() {
        let p = SystemParams::for_scenario(Scenario::Fiber1km, 0.5);
        let b = error_budget(&p, 70.0).unwrap();
        assert!((b.e_dark - 0.5 / 70.0).abs() < 1e-12);
        assert!((b.e_afterpulse - 0.005).abs() < 1e-15);
        assert!((b.e_extinction - 10f64.powf(-1.7)).abs() < 1e-15);
        assert!((b.e_visibility - 0.01 / 0.26).abs() < 1e-12);
        let sum = b.e_dark + b.e_afterpulse + b.e_extinction + b.e_visibility;
        assert_eq!(b.e_total, sum);
        assert!(error_budget(&p, 0.0).is_err());
    }

    #[test]
    fn perfect_system_budget_is_zero() {
        let mut p = SystemParams::ideal(0.5);
        p.detectors.dark_prob_per_gate = 0.0;
        assert_eq!(error_budget(&p, 1.0).unwrap().e_total, 0.0);
    }

    #[test]
    fn empty_report() {
        let p = SystemParams::for_scenario(Scenario::Desktop, 0.5);
        let r = build_report(&[], &p, 0.0);
        assert_eq!(r.counts.total_counts, 0);
        assert_eq!(r.qber, None);
        assert_eq!(r.budget, None);
        assert_eq!(r.key_rate, 0.0);
    }

    #[test]
    fn unknown_axis() {
        let mut p = SystemParams::for_scenario(Scenario::Desktop, 0.5);
        assert!(apply_axis(&mut p, "colour", 1.0).is_err());
        assert!(apply_axis(&mut p, "reflectivity", 0.3).is_ok());
        assert!((p.splitter.transmissivity - 0.7).abs() < 1e-15);
        assert!(apply_axis(&mut p, "mu", -1.0).is_err());
    }

    #[test]
    fn tally_merge_is_associative_with_push() {
        let p = SystemParams::for_scenario(Scenario::Desktop, 2.0);
        let s = RunSettings::new(20_000, 3);
        let (_, recs) =
            crate::protocol::run_collect(&p, &AdversarySpec::none(), &s, &LiveLock::default())
                .unwrap();
        let whole = Tally::from_records(&recs);
        let mut parts = Tally::from_records(&recs[..7_000]);
        parts.merge(&Tally::from_records(&recs[7_000..]));
        assert_eq!(whole, parts);
    }
}
