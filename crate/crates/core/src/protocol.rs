//! The counterfactual key distribution session: random choices per slot,
//! pulse propagation, detector gating, classification and sifting.
//!
//! Runs are sharded into fixed-size blocks of consecutive slots. Block `i`
//! draws from its own ChaCha stream `i` of the run seed and starts with fresh
//! afterpulse memory, so results depend only on the seed and the block size,
//! never on the number of worker threads. Afterpulse correlation across a
//! block boundary is dropped.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adversary::{intercept_resend, AdversarySpec};
use crate::analysis::{RunReport, Tally};
use crate::devices::{gate_detector, DetectorChannel, DetectorSpec, DetectorState, SwitchSpec};
use crate::error::{check_non_negative, Error, Result};
use crate::feedback::{LockSettings, LockSimulator, PiControllerSpec};
use crate::optics::{
    ArmLosses, InterferenceSpec, OpticalParams, PhotonSource, Polarization, RouteTable,
    SplitterSpec, Terminal,
};

pub const DEFAULT_REP_RATE_HZ: f64 = 1e5;
pub const DEFAULT_BLOCK_SLOTS: u64 = 1 << 18;
/// Stream id reserved for the lock loop in live-feedback runs.
const LOCK_STREAM: u64 = u64::MAX;
const BLOCKS_PER_BATCH: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    Desktop,
    Fiber1km,
}

impl Scenario {
    /// Desktop: arm b measured at 10.5 dB round trip. The 1 km link adds
    /// 1 dB on each pass through the channel.
    pub fn default_losses(self) -> ArmLosses {
        match self {
            Scenario::Desktop => ArmLosses::balanced(10.5, 0.0),
            Scenario::Fiber1km => ArmLosses::balanced(10.5, 1.0),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Scenario::Desktop => "desktop",
            Scenario::Fiber1km => "fiber1km",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SystemParams {
    pub mu: f64,
    pub rep_rate_hz: f64,
    pub splitter: SplitterSpec,
    pub losses: ArmLosses,
    pub interference: InterferenceSpec,
    pub detectors: DetectorSpec,
    pub switch: SwitchSpec,
    pub scenario: Scenario,
}

impl SystemParams {
    pub fn for_scenario(scenario: Scenario, mu: f64) -> Self {
        SystemParams {
            mu,
            rep_rate_hz: DEFAULT_REP_RATE_HZ,
            splitter: SplitterSpec::default(),
            losses: scenario.default_losses(),
            interference: InterferenceSpec {
                static_visibility: 0.98,
                phase_error: 0.0,
            },
            detectors: DetectorSpec::default(),
            switch: SwitchSpec::default(),
            scenario,
        }
    }

    /// No noise, no loss, perfect visibility and switch.
    pub fn ideal(mu: f64) -> Self {
        SystemParams {
            losses: ArmLosses::lossless(),
            interference: InterferenceSpec::default(),
            detectors: DetectorSpec::perfect(),
            switch: SwitchSpec::perfect(),
            ..SystemParams::for_scenario(Scenario::Desktop, mu)
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_non_negative("mu", self.mu)?;
        if !(self.rep_rate_hz > 0.0 && self.rep_rate_hz.is_finite()) {
            return Err(Error::param("rep_rate_hz", "must be positive"));
        }
        self.splitter.validate()?;
        self.losses.validate()?;
        self.interference.validate()?;
        self.detectors.validate()?;
        self.switch.validate()
    }

    pub fn optical(&self, phase_error: f64) -> OpticalParams {
        OpticalParams {
            splitter: self.splitter,
            losses: self.losses,
            interference: InterferenceSpec {
                phase_error,
                ..self.interference
            },
            leak: self.switch.leakage(),
            coherent: true,
        }
    }

    pub fn slot_seconds(&self) -> f64 {
        1.0 / self.rep_rate_hz
    }
}

/// Set of detector channels that clicked in one slot.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash)]
pub struct DetectionEvent {
    mask: u8,
}

impl DetectionEvent {
    pub fn from_channels(channels: &[DetectorChannel]) -> Self {
        let mut e = DetectionEvent::default();
        for c in channels {
            e.insert(*c);
        }
        e
    }

    pub fn insert(&mut self, c: DetectorChannel) {
        self.mask |= 1 << c.index();
    }

    pub fn contains(&self, c: DetectorChannel) -> bool {
        self.mask & (1 << c.index()) != 0
    }

    pub fn len(&self) -> usize {
        self.mask.count_ones() as usize
    }

    pub fn is_empty(&self) -> bool {
        self.mask == 0
    }

    pub fn iter(&self) -> impl Iterator<Item = DetectorChannel> + '_ {
        DetectorChannel::ALL
            .into_iter()
            .filter(|c| self.contains(*c))
    }

    pub fn any_d1(&self) -> bool {
        self.contains(DetectorChannel::D1H) || self.contains(DetectorChannel::D1V)
    }

    pub fn any_d3(&self) -> bool {
        self.contains(DetectorChannel::D3H) || self.contains(DetectorChannel::D3V)
    }
}

impl fmt::Display for DetectionEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<_> = self.iter().map(DetectorChannel::name).collect();
        f.write_str(&names.join("|"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Classification {
    SiftedKey,
    MonitorD2,
    MonitorD3,
    NoClick,
    Multiple,
    Discard,
}

impl Classification {
    pub const ALL: [Classification; 6] = [
        Classification::SiftedKey,
        Classification::MonitorD2,
        Classification::MonitorD3,
        Classification::NoClick,
        Classification::Multiple,
        Classification::Discard,
    ];

    pub fn index(self) -> usize {
        self as usize
    }
}

/// Per-slot record of where the light went, for counterfactual bookkeeping.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RouteTrace {
    pub photons: u32,
    pub d1_port_photons: u32,
    /// Photons reaching the D1 port whose amplitude entered the channel.
    pub d1_port_via_channel: u32,
    pub attacked: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrialRecord {
    pub slot_index: u64,
    pub alice_bit: Polarization,
    pub bob_bit: Polarization,
    pub clicks: DetectionEvent,
    pub classification: Classification,
    pub route: RouteTrace,
}

impl TrialRecord {
    pub fn same_choice(&self) -> bool {
        self.alice_bit == self.bob_bit
    }
}

/// Sifting rule: keep only slots where D1 alone fired with Alice's polarization.
pub fn classify_event(clicks: DetectionEvent, alice_bit: Polarization) -> Classification {
    if clicks.len() >= 2 {
        return Classification::Multiple;
    }
    match clicks.iter().next() {
        None => Classification::NoClick,
        Some(DetectorChannel::D2) => Classification::MonitorD2,
        Some(c) if c.is_d3() => Classification::MonitorD3,
        Some(c) if c.polarization() == Some(alice_bit) => Classification::SiftedKey,
        Some(_) => Classification::Discard,
    }
}

/// Slot simulator with routing tables cached for the current phase error.
#[derive(Debug, Clone)]
pub struct SlotSimulator {
    params: SystemParams,
    adversary: AdversarySpec,
    source: PhotonSource,
    optical: OpticalParams,
    same: RouteTable,
    diff: RouteTable,
}

impl SlotSimulator {
    pub fn new(params: &SystemParams, adversary: &AdversarySpec) -> Result<Self> {
        params.validate()?;
        adversary.validate()?;
        let optical = params.optical(params.interference.phase_error);
        Ok(SlotSimulator {
            params: *params,
            adversary: *adversary,
            source: PhotonSource::new(params.mu)?,
            same: RouteTable::same_choice(&optical),
            diff: RouteTable::diff_choice(&optical),
            optical,
        })
    }

    fn set_phase_error(&mut self, delta: f64) {
        if delta != self.optical.interference.phase_error {
            self.optical = self.params.optical(delta);
            self.same = RouteTable::same_choice(&self.optical);
            self.diff = RouteTable::diff_choice(&self.optical);
        }
    }

    pub fn simulate<R: Rng + ?Sized>(
        &mut self,
        slot_index: u64,
        delta: f64,
        detectors: &mut DetectorState,
        rng: &mut R,
    ) -> TrialRecord {
        self.set_phase_error(delta);
        let alice_bit = Polarization::from_bit(rng.random());
        let bob_bit = Polarization::from_bit(rng.random());
        let same = alice_bit == bob_bit;
        let attacked = self.adversary.attacks(rng);
        let n = self.source.sample(rng).0;

        let mut route = RouteTrace {
            photons: n,
            attacked,
            ..RouteTrace::default()
        };
        let mut ports = [0u32; 3];
        let table = if same { &self.same } else { &self.diff };
        for _ in 0..n {
            let r = if attacked {
                intercept_resend(&self.optical, &self.params.switch, same, rng)
                    .expect("validated optics")
            } else {
                table.sample(rng)
            };
            match r.terminal {
                Terminal::D1Port => {
                    ports[0] += 1;
                    route.d1_port_photons += 1;
                    if r.path.entered_channel() {
                        route.d1_port_via_channel += 1;
                    }
                }
                Terminal::D2Port => ports[1] += 1,
                Terminal::D3 => ports[2] += 1,
                Terminal::Lost => {}
            }
        }

        // D1 and D3 see the photon in Alice's polarization; every gate can
        // still fire on dark counts or afterpulses.
        let spec = &self.params.detectors;
        let mut clicks = DetectionEvent::default();
        for channel in DetectorChannel::ALL {
            let incident = match channel {
                DetectorChannel::D2 => ports[1],
                c if c == DetectorChannel::d1(alice_bit) => ports[0],
                c if c == DetectorChannel::d3(alice_bit) => ports[2],
                _ => 0,
            };
            if gate_detector(spec, detectors, channel, incident, rng) {
                clicks.insert(channel);
            }
        }

        TrialRecord {
            slot_index,
            alice_bit,
            bob_bit,
            clicks,
            classification: classify_event(clicks, alice_bit),
            route,
        }
    }
}

/// One slot with a fresh simulator; prefer [`SlotSimulator`] in loops.
pub fn simulate_slot<R: Rng + ?Sized>(
    params: &SystemParams,
    adversary: &AdversarySpec,
    detectors: &mut DetectorState,
    delta: f64,
    slot_index: u64,
    rng: &mut R,
) -> Result<TrialRecord> {
    Ok(SlotSimulator::new(params, adversary)?.simulate(slot_index, delta, detectors, rng))
}

#[derive(Serialize)]
struct TrialRow<'a> {
    slot: u64,
    alice_bit: u8,
    bob_bit: u8,
    clicks: &'a str,
    classification: Classification,
}

/// Trial log as CSV with columns slot, alice_bit, bob_bit, clicks, classification.
pub struct TrialLog<W: std::io::Write> {
    w: csv::Writer<W>,
}

impl<W: std::io::Write> TrialLog<W> {
    pub fn new(out: W) -> Self {
        TrialLog {
            w: csv::Writer::from_writer(out),
        }
    }

    pub fn write(&mut self, r: &TrialRecord) -> Result<()> {
        self.w.serialize(TrialRow {
            slot: r.slot_index,
            alice_bit: r.alice_bit.bit(),
            bob_bit: r.bob_bit.bit(),
            clicks: &r.clicks.to_string(),
            classification: r.classification,
        })?;
        Ok(())
    }

    pub fn finish(self) -> Result<W> {
        self.w
            .into_inner()
            .map_err(|e| Error::io("<trial log>", e.into_error()))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct MonitorStats {
    pub d2_same: u64,
    pub d2_diff: u64,
    pub d3_same: u64,
    pub d3_diff: u64,
    pub multiple: u64,
    pub discard: u64,
}

impl MonitorStats {
    /// Share of D3 clicks that happened when Bob was not blocking.
    pub fn d3_error_rate(&self) -> Option<f64> {
        let total = self.d3_same + self.d3_diff;
        (total > 0).then(|| self.d3_diff as f64 / total as f64)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SiftOutcome {
    pub alice_key: Vec<u8>,
    pub bob_key: Vec<u8>,
    /// Absent when nothing was sifted.
    pub qber: Option<f64>,
    pub monitor: MonitorStats,
}

pub fn sift(records: &[TrialRecord]) -> SiftOutcome {
    let mut alice_key = Vec::new();
    let mut bob_key = Vec::new();
    let mut monitor = MonitorStats::default();
    for r in records {
        let same = r.same_choice();
        if r.clicks.contains(DetectorChannel::D2) {
            if same {
                monitor.d2_same += 1;
            } else {
                monitor.d2_diff += 1;
            }
        }
        if r.clicks.any_d3() {
            if same {
                monitor.d3_same += 1;
            } else {
                monitor.d3_diff += 1;
            }
        }
        match r.classification {
            Classification::SiftedKey => {
                alice_key.push(r.alice_bit.bit());
                bob_key.push(r.bob_bit.bit());
            }
            Classification::Multiple => monitor.multiple += 1,
            Classification::Discard => monitor.discard += 1,
            _ => {}
        }
    }
    let errors = alice_key
        .iter()
        .zip(&bob_key)
        .filter(|(a, b)| a != b)
        .count();
    let qber = (!alice_key.is_empty()).then(|| errors as f64 / alice_key.len() as f64);
    SiftOutcome {
        alice_key,
        bob_key,
        qber,
        monitor,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeedbackMode {
    /// Fixed phase error taken from the interference settings.
    #[default]
    Ideal,
    /// Phase error read slot by slot from a running lock simulation.
    Live,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunSettings {
    pub n_slots: u64,
    pub seed: u64,
    pub feedback: FeedbackMode,
    pub block_slots: u64,
    /// 0 uses the global rayon pool.
    pub threads: usize,
}

impl RunSettings {
    pub fn new(n_slots: u64, seed: u64) -> Self {
        RunSettings {
            n_slots,
            seed,
            feedback: FeedbackMode::Ideal,
            block_slots: DEFAULT_BLOCK_SLOTS,
            threads: 0,
        }
    }
}

/// Lock loop used when `feedback` is [`FeedbackMode::Live`].
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LiveLock {
    pub controller: PiControllerSpec,
    pub settings: LockSettings,
}

pub fn block_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

struct BlockOutput {
    tally: Tally,
    records: Vec<TrialRecord>,
}

fn run_block(
    sim: &SlotSimulator,
    seed: u64,
    block: u64,
    range: std::ops::Range<u64>,
    deltas: Option<&[f64]>,
    keep_records: bool,
) -> BlockOutput {
    let mut sim = sim.clone();
    let mut rng = block_rng(seed, block);
    let mut detectors = DetectorState::default();
    let mut tally = Tally::default();
    let mut records = Vec::new();
    let fixed = sim.params.interference.phase_error;
    for (k, slot) in range.enumerate() {
        let delta = deltas.map_or(fixed, |d| d[k]);
        let rec = sim.simulate(slot, delta, &mut detectors, &mut rng);
        tally.push(&rec);
        if keep_records {
            records.push(rec);
        }
    }
    BlockOutput { tally, records }
}

/// Per-record callback for [`run_experiment_with_sink`].
pub type RecordSink<'a> = &'a mut dyn FnMut(&TrialRecord) -> Result<()>;

/// Runs a full session, handing every trial record to `sink` in slot order.
pub fn run_experiment_with_sink(
    params: &SystemParams,
    adversary: &AdversarySpec,
    settings: &RunSettings,
    live: &LiveLock,
    mut sink: Option<RecordSink<'_>>,
) -> Result<RunReport> {
    if settings.n_slots == 0 {
        return Err(Error::param("n_slots", "at least one slot is required"));
    }
    if settings.block_slots == 0 {
        return Err(Error::param("block_slots", "must be positive"));
    }
    // In live mode the fixed 0.98 visibility gives way to the lock's static
    // ceiling; phase jitter then enters through cos δ slot by slot.
    let mut params = *params;
    if settings.feedback == FeedbackMode::Live {
        params.interference.static_visibility = live.settings.static_visibility;
    }
    let params = &params;
    let sim = SlotSimulator::new(params, adversary)?;
    let mut lock = match settings.feedback {
        FeedbackMode::Ideal => None,
        FeedbackMode::Live => Some((
            LockSimulator::new(live.controller, live.settings)?,
            block_rng(settings.seed, LOCK_STREAM),
        )),
    };
    let pool = if settings.threads > 0 {
        Some(
            rayon::ThreadPoolBuilder::new()
                .num_threads(settings.threads)
                .build()
                .map_err(|e| Error::param("threads", e.to_string()))?,
        )
    } else {
        None
    };

    let slot_s = params.slot_seconds();
    let loop_s = live.controller.loop_period_s;
    let mut current_delta = 0.0;
    let mut lock_time = 0.0;

    let n_blocks = settings.n_slots.div_ceil(settings.block_slots);
    let keep = sink.is_some();
    let mut tally = Tally::default();
    let mut first = 0u64;
    while first < n_blocks {
        let last = (first + BLOCKS_PER_BATCH as u64).min(n_blocks);
        let ranges: Vec<_> = (first..last)
            .map(|b| {
                let start = b * settings.block_slots;
                (
                    b,
                    start..(start + settings.block_slots).min(settings.n_slots),
                )
            })
            .collect();

        // The lock is sequential; precompute this batch's phase errors in order.
        let deltas: Option<Vec<Vec<f64>>> = lock.as_mut().map(|(sim, rng)| {
            ranges
                .iter()
                .map(|(_, range)| {
                    range
                        .clone()
                        .map(|slot| {
                            let t = slot as f64 * slot_s;
                            while lock_time <= t {
                                current_delta = sim.step(rng).delta_rad;
                                lock_time += loop_s;
                            }
                            current_delta
                        })
                        .collect()
                })
                .collect()
        });

        let work = || -> Vec<BlockOutput> {
            ranges
                .par_iter()
                .enumerate()
                .map(|(i, (b, range))| {
                    let d = deltas.as_ref().map(|d| d[i].as_slice());
                    run_block(&sim, settings.seed, *b, range.clone(), d, keep)
                })
                .collect()
        };
        let outputs = match &pool {
            Some(p) => p.install(work),
            None => work(),
        };
        for out in outputs {
            tally.merge(&out.tally);
            if let Some(sink) = sink.as_mut() {
                for r in &out.records {
                    sink(r)?;
                }
            }
        }
        first = last;
    }

    Ok(RunReport::from_tally(
        &tally,
        params,
        settings.n_slots as f64 * slot_s,
        Some(settings),
        Some(adversary),
    ))
}

pub fn run_experiment(
    params: &SystemParams,
    adversary: &AdversarySpec,
    settings: &RunSettings,
    live: &LiveLock,
) -> Result<RunReport> {
    run_experiment_with_sink(params, adversary, settings, live, None)
}

/// Runs a session and keeps every trial record in memory.
pub fn run_collect(
    params: &SystemParams,
    adversary: &AdversarySpec,
    settings: &RunSettings,
    live: &LiveLock,
) -> Result<(RunReport, Vec<TrialRecord>)> {
    let mut records = Vec::with_capacity(settings.n_slots.min(1 << 24) as usize);
    let mut push = |r: &TrialRecord| {
        records.push(*r);
        Ok(())
    };
    let report = run_experiment_with_sink(params, adversary, settings, live, Some(&mut push))?;
    Ok((report, records))
}
