//! Interferometer phase drift and the two-wavelength PI stabilization loop.
//!
//! The optical path difference `nΔL` is shared by the 1550 nm signal and the
//! 1570 nm reference light. The loop holds the reference output at mid-fringe
//! by driving the fibre stretcher; since both wavelengths see the same `nΔL`,
//! that pins the signal phase error `δ` near zero as well.

use std::f64::consts::{PI, TAU};
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{check_non_negative, check_probability, Error, Result};

pub const SIGNAL_WAVELENGTH_M: f64 = 1550e-9;
pub const REFERENCE_WAVELENGTH_M: f64 = 1570e-9;

/// Reference fringe order of the default lock point.
const LOCK_FRINGE_ORDER: f64 = 32.0;

/// Wraps an angle into (-π, π].
pub fn wrap_phase(x: f64) -> f64 {
    let y = x.rem_euclid(TAU);
    if y > PI {
        y - TAU
    } else {
        y
    }
}

/// Standard deviation per sqrt(ms) of a Wiener phase whose mean absolute
/// change over one millisecond equals `rate_rad_per_ms`.
pub fn drift_sigma_per_sqrt_ms(rate_rad_per_ms: f64) -> f64 {
    rate_rad_per_ms / (2.0 / PI).sqrt()
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhaseState {
    /// Optical path difference nΔL, metres.
    pub path_difference: f64,
    /// nΔL at which the reference sits on the rising mid-fringe and the
    /// signal sits on its working point (δ = 0).
    pub lock_point: f64,
    pub signal_wavelength: f64,
    pub reference_wavelength: f64,
    /// Mean |Δφ_s| per millisecond of the free drift.
    pub drift_rate_rad_per_ms: f64,
}

impl PhaseState {
    pub fn new(drift_rate_rad_per_ms: f64) -> Self {
        let lock_point = REFERENCE_WAVELENGTH_M * (LOCK_FRINGE_ORDER + 0.75);
        PhaseState {
            path_difference: lock_point,
            lock_point,
            signal_wavelength: SIGNAL_WAVELENGTH_M,
            reference_wavelength: REFERENCE_WAVELENGTH_M,
            drift_rate_rad_per_ms,
        }
    }

    pub fn signal_wavenumber(&self) -> f64 {
        TAU / self.signal_wavelength
    }

    pub fn reference_wavenumber(&self) -> f64 {
        TAU / self.reference_wavelength
    }

    /// Integer fringe order and fractional phase in [0, 2π) at a wavelength.
    pub fn fringe(&self, wavelength: f64) -> (i64, f64) {
        let cycles = self.path_difference / wavelength;
        let m = cycles.floor();
        (m as i64, TAU * (cycles - m))
    }

    pub fn signal_fringe(&self) -> (i64, f64) {
        self.fringe(self.signal_wavelength)
    }

    pub fn reference_fringe(&self) -> (i64, f64) {
        self.fringe(self.reference_wavelength)
    }

    /// Signal phase error δ relative to the working point, in (-π, π].
    pub fn signal_error(&self) -> f64 {
        wrap_phase(self.signal_wavenumber() * (self.path_difference - self.lock_point))
    }

    /// Moves the path difference by a phase measured at the signal wavelength.
    pub fn shift_signal_phase(&mut self, dphi: f64) {
        self.path_difference += dphi / self.signal_wavenumber();
    }
}

/// Advances the free drift by `dt` seconds.
pub fn drift_step<R: Rng + ?Sized>(state: &mut PhaseState, dt: f64, rng: &mut R) -> Result<()> {
    check_non_negative("dt", dt)?;
    if dt == 0.0 || state.drift_rate_rad_per_ms == 0.0 {
        return Ok(());
    }
    let sd = drift_sigma_per_sqrt_ms(state.drift_rate_rad_per_ms) * (dt * 1e3).sqrt();
    let z: f64 = rng.sample(StandardNormal);
    state.shift_signal_phase(sd * z);
    Ok(())
}

/// Reference output `i0·cos²(k_r·nΔL/2)` plus Gaussian read noise, floored at 0.
pub fn reference_intensity<R: Rng + ?Sized>(
    state: &PhaseState,
    i0: f64,
    noise_sd: f64,
    rng: &mut R,
) -> f64 {
    let half = 0.5 * state.reference_wavenumber() * state.path_difference;
    let clean = i0 * half.cos().powi(2);
    let noise = if noise_sd > 0.0 {
        noise_sd * rng.sample::<f64, _>(StandardNormal)
    } else {
        0.0
    };
    (clean + noise).max(0.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PiControllerSpec {
    pub kp: f64,
    /// Per second.
    pub ki: f64,
    pub setpoint: f64,
    pub output_limit_v: f64,
    pub amplifier_gain: f64,
    /// Signal phase per amplified volt on the stretcher.
    pub actuator_rad_per_v: f64,
    pub loop_period_s: f64,
    pub compute_time_s: f64,
}

impl Default for PiControllerSpec {
    fn default() -> Self {
        // Gains tuned on the 1 rad step response; see the tests below.
        PiControllerSpec {
            kp: 0.005,
            ki: 3000.0,
            setpoint: 0.5,
            output_limit_v: 10.0,
            amplifier_gain: 40.0,
            actuator_rad_per_v: PI / 4.0,
            loop_period_s: 10e-6,
            compute_time_s: 9e-6,
        }
    }
}

impl PiControllerSpec {
    pub fn validate(&self) -> Result<()> {
        check_non_negative("kp", self.kp)?;
        check_non_negative("ki", self.ki)?;
        check_non_negative("setpoint", self.setpoint)?;
        if !(self.output_limit_v > 0.0 && self.output_limit_v.is_finite()) {
            return Err(Error::param("output_limit_v", "must be positive"));
        }
        if !(10.0..=40.0).contains(&self.amplifier_gain) {
            return Err(Error::param(
                "amplifier_gain",
                format!(
                    "{} is outside the amplifier's 10..40 range",
                    self.amplifier_gain
                ),
            ));
        }
        if !(self.actuator_rad_per_v > 0.0 && self.actuator_rad_per_v.is_finite()) {
            return Err(Error::param("actuator_rad_per_v", "must be positive"));
        }
        if !(self.loop_period_s > 0.0 && self.loop_period_s.is_finite()) {
            return Err(Error::param("loop_period_s", "must be positive"));
        }
        if !(self.compute_time_s >= 0.0 && self.compute_time_s <= self.loop_period_s) {
            return Err(Error::param(
                "compute_time_s",
                "must fit inside one loop period",
            ));
        }
        Ok(())
    }

    /// Total phase range reachable over the full output swing.
    pub fn authority_rad(&self) -> f64 {
        2.0 * self.output_limit_v * self.amplifier_gain * self.actuator_rad_per_v
    }

    pub fn phase_per_volt(&self) -> f64 {
        self.amplifier_gain * self.actuator_rad_per_v
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct PiControllerState {
    pub integrator: f64,
    pub output_volts: f64,
}

/// One PI update. Returns the new state and the actuator phase shift at the
/// signal wavelength that the new output corresponds to.
///
/// The integrator is frozen whenever the output would saturate.
pub fn pi_step(
    spec: &PiControllerSpec,
    ctrl: &PiControllerState,
    measured: f64,
) -> (PiControllerState, f64) {
    let error = spec.setpoint - measured;
    let limit = spec.output_limit_v;
    let integrator = ctrl.integrator + error * spec.loop_period_s;
    let raw = spec.kp * error + spec.ki * integrator;
    let next = if raw.abs() <= limit {
        PiControllerState {
            integrator,
            output_volts: raw,
        }
    } else {
        PiControllerState {
            integrator: ctrl.integrator,
            output_volts: raw.clamp(-limit, limit),
        }
    };
    (next, next.output_volts * spec.phase_per_volt())
}

/// Operating conditions of a lock simulation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LockSettings {
    pub drift_rate_rad_per_ms: f64,
    pub i0: f64,
    pub noise_sd: f64,
    /// Visibility ceiling from alignment and mode matching, before phase error.
    pub static_visibility: f64,
    pub initial_phase_error: f64,
    pub feedback: bool,
}

impl Default for LockSettings {
    fn default() -> Self {
        LockSettings {
            drift_rate_rad_per_ms: 0.5,
            i0: 1.0,
            noise_sd: 0.002,
            static_visibility: 0.995,
            initial_phase_error: 0.0,
            feedback: true,
        }
    }
}

impl LockSettings {
    pub fn validate(&self) -> Result<()> {
        check_non_negative("drift_rate_rad_per_ms", self.drift_rate_rad_per_ms)?;
        if !(self.i0 > 0.0 && self.i0.is_finite()) {
            return Err(Error::param("i0", "must be positive"));
        }
        check_non_negative("noise_sd", self.noise_sd)?;
        check_probability("static_visibility", self.static_visibility)?;
        if !self.initial_phase_error.is_finite() {
            return Err(Error::param("initial_phase_error", "must be finite"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LockSample {
    pub time_s: f64,
    pub delta_rad: f64,
    pub volts: f64,
    pub ref_intensity: f64,
}

/// Streaming lock loop: drift, measure, then update the stretcher, once per
/// loop period. A freshly computed output takes effect at the next cycle and
/// is held in between.
#[derive(Debug, Clone)]
pub struct LockSimulator {
    pub phase: PhaseState,
    pub controller: PiControllerState,
    spec: PiControllerSpec,
    settings: LockSettings,
    steps: u64,
}

impl LockSimulator {
    pub fn new(spec: PiControllerSpec, settings: LockSettings) -> Result<Self> {
        spec.validate()?;
        settings.validate()?;
        let mut phase = PhaseState::new(settings.drift_rate_rad_per_ms);
        phase.shift_signal_phase(settings.initial_phase_error);
        Ok(LockSimulator {
            phase,
            controller: PiControllerState::default(),
            spec,
            settings,
            steps: 0,
        })
    }

    pub fn spec(&self) -> &PiControllerSpec {
        &self.spec
    }

    pub fn settings(&self) -> &LockSettings {
        &self.settings
    }

    pub fn step<R: Rng + ?Sized>(&mut self, rng: &mut R) -> LockSample {
        let dt = self.spec.loop_period_s;
        drift_step(&mut self.phase, dt, rng).expect("loop period validated");
        self.steps += 1;

        let measured =
            reference_intensity(&self.phase, self.settings.i0, self.settings.noise_sd, rng);
        let sample = LockSample {
            time_s: self.steps as f64 * dt,
            delta_rad: self.phase.signal_error(),
            volts: self.controller.output_volts,
            ref_intensity: measured,
        };
        if self.settings.feedback {
            let before = self.controller.output_volts * self.spec.phase_per_volt();
            let (next, after) = pi_step(&self.spec, &self.controller, measured / self.settings.i0);
            self.controller = next;
            self.phase.shift_signal_phase(after - before);
        }
        sample
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LockSummary {
    pub duration_s: f64,
    pub samples: u64,
    pub feedback: bool,
    /// Static visibility times the mean of cos δ over the trace.
    pub effective_visibility: f64,
    /// Share of samples whose instantaneous visibility is at least 0.98.
    pub fraction_in_lock: f64,
    pub rms_delta_rad: f64,
    pub max_abs_volts: f64,
    pub saturated_samples: u64,
}

#[derive(Debug, Clone)]
struct SummaryAccumulator {
    v_static: f64,
    n: u64,
    sum_cos: f64,
    sum_sq: f64,
    in_lock: u64,
    max_abs_volts: f64,
    saturated: u64,
    limit: f64,
}

impl SummaryAccumulator {
    fn push(&mut self, s: &LockSample) {
        let c = s.delta_rad.cos();
        self.n += 1;
        self.sum_cos += c;
        self.sum_sq += s.delta_rad * s.delta_rad;
        if self.v_static * c >= 0.98 {
            self.in_lock += 1;
        }
        self.max_abs_volts = self.max_abs_volts.max(s.volts.abs());
        if s.volts.abs() >= self.limit {
            self.saturated += 1;
        }
    }
}

#[derive(Debug, Clone)]
pub struct LockRun {
    pub trace: Vec<LockSample>,
    pub summary: LockSummary,
}

/// Runs the lock for `duration_s` seconds of simulated time.
pub fn run_lock<R: Rng + ?Sized>(
    spec: &PiControllerSpec,
    settings: &LockSettings,
    duration_s: f64,
    rng: &mut R,
) -> Result<LockRun> {
    if !(duration_s > 0.0 && duration_s.is_finite()) {
        return Err(Error::param(
            "duration",
            format!("{duration_s} s must be positive"),
        ));
    }
    let mut sim = LockSimulator::new(*spec, *settings)?;
    let steps = (duration_s / spec.loop_period_s).round().max(1.0) as u64;
    let mut acc = SummaryAccumulator {
        v_static: settings.static_visibility,
        n: 0,
        sum_cos: 0.0,
        sum_sq: 0.0,
        in_lock: 0,
        max_abs_volts: 0.0,
        saturated: 0,
        limit: spec.output_limit_v,
    };
    let mut trace = Vec::with_capacity(steps as usize);
    for _ in 0..steps {
        let s = sim.step(rng);
        acc.push(&s);
        trace.push(s);
    }
    let n = acc.n as f64;
    let summary = LockSummary {
        duration_s: steps as f64 * spec.loop_period_s,
        samples: acc.n,
        feedback: settings.feedback,
        effective_visibility: settings.static_visibility * acc.sum_cos / n,
        fraction_in_lock: acc.in_lock as f64 / n,
        rms_delta_rad: (acc.sum_sq / n).sqrt(),
        max_abs_volts: acc.max_abs_volts,
        saturated_samples: acc.saturated,
    };
    Ok(LockRun { trace, summary })
}

/// Writes every `stride`-th sample as `time_s,delta_rad,volts,ref_intensity`.
pub fn write_trace_csv(path: &Path, trace: &[LockSample], stride: usize) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::ConfigSchema(format!("{other:?}")),
    })?;
    for s in trace.iter().step_by(stride.max(1)) {
        w.serialize(s)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn two_wavelength_identity() {
        let mut s = PhaseState::new(0.0);
        for k in 0..200 {
            s.path_difference = 1e-6 * (1.0 + k as f64 * 0.731);
            for lambda in [s.signal_wavelength, s.reference_wavelength] {
                let (m, phi) = s.fringe(lambda);
                let back = lambda * (m as f64 + phi / TAU);
                assert!((back - s.path_difference).abs() <= 1e-12 * s.path_difference);
            }
        }
    }

    #[test]
    fn lock_point_is_mid_fringe() {
        let s = PhaseState::new(0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!((reference_intensity(&s, 1.0, 0.0, &mut rng) - 0.5).abs() < 1e-12);
        assert!(s.signal_error().abs() < 1e-12);
    }

    #[test]
    fn fringe_extremes() {
        let mut s = PhaseState::new(0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let kr = s.reference_wavenumber();
        s.path_difference = 0.0;
        assert!((reference_intensity(&s, 2.0, 0.0, &mut rng) - 2.0).abs() < 1e-12);
        s.path_difference = PI / kr;
        assert!(reference_intensity(&s, 2.0, 0.0, &mut rng) < 1e-12);
        s.path_difference = 0.5 * PI / kr;
        assert!((reference_intensity(&s, 2.0, 0.0, &mut rng) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn drift_zero_dt_and_negative_dt() {
        let mut s = PhaseState::new(0.5);
        let before = s.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        drift_step(&mut s, 0.0, &mut rng).unwrap();
        assert_eq!(s, before);
        assert!(drift_step(&mut s, -1.0, &mut rng).is_err());
    }

    #[test]
    fn drift_mean_abs_change_per_ms() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 100_000;
        let mut sum = 0.0;
        for _ in 0..n {
            let mut s = PhaseState::new(0.5);
            let p0 = s.path_difference;
            drift_step(&mut s, 1e-3, &mut rng).unwrap();
            sum += ((s.path_difference - p0) * s.signal_wavenumber()).abs();
        }
        let mean = sum / n as f64;
        assert!((mean - 0.5).abs() < 0.025, "mean |dphi| = {mean}");
    }

    #[test]
    fn pi_zero_error_holds_output() {
        let spec = PiControllerSpec::default();
        let ctrl = PiControllerState {
            integrator: 1e-3,
            output_volts: spec.ki * 1e-3,
        };
        let (next, shift) = pi_step(&spec, &ctrl, spec.setpoint);
        assert_eq!(next, ctrl);
        assert!((shift - ctrl.output_volts * spec.phase_per_volt()).abs() < 1e-12);
    }

    #[test]
    fn pi_saturates_and_stops_integrating() {
        let spec = PiControllerSpec::default();
        let mut ctrl = PiControllerState::default();
        let mut peak: f64 = 0.0;
        for _ in 0..100_000 {
            ctrl = pi_step(&spec, &ctrl, 0.0).0;
            peak = peak.max(ctrl.output_volts.abs());
        }
        assert_eq!(ctrl.output_volts, 10.0);
        assert!(peak <= 10.0);
        // Anti-windup: the integrator never ran past what the limit needs.
        assert!(spec.ki * ctrl.integrator <= 10.0);
        // So reversing the error unwinds immediately.
        let (back, _) = pi_step(&spec, &ctrl, 1.0);
        assert!(back.output_volts < 10.0);
    }

    #[test]
    fn authority_is_200_pi() {
        let spec = PiControllerSpec::default();
        assert!((spec.authority_rad() - 200.0 * PI).abs() < 1e-9);
    }

    #[test]
    fn step_response_settles_within_50_periods() {
        let spec = PiControllerSpec::default();
        let settings = LockSettings {
            drift_rate_rad_per_ms: 0.0,
            noise_sd: 0.0,
            initial_phase_error: 1.0,
            ..LockSettings::default()
        };
        let mut sim = LockSimulator::new(spec, settings).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let trace: Vec<_> = (0..200).map(|_| sim.step(&mut rng)).collect();
        assert!((trace[0].delta_rad - 1.0).abs() < 1e-9);
        let settled = trace.iter().position(|s| s.delta_rad.abs() < 0.05).unwrap();
        assert!(settled < 50, "settled after {settled} periods");
        assert!(trace[settled..].iter().all(|s| s.delta_rad.abs() < 0.05));
    }

    #[test]
    fn no_drift_keeps_delta() {
        let settings = LockSettings {
            drift_rate_rad_per_ms: 0.0,
            noise_sd: 0.0,
            feedback: false,
            ..LockSettings::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let run = run_lock(&PiControllerSpec::default(), &settings, 0.01, &mut rng).unwrap();
        assert!(run.trace.iter().all(|s| s.delta_rad == 0.0));
        assert!((run.summary.effective_visibility - settings.static_visibility).abs() < 1e-15);
    }

    #[test]
    fn zero_duration_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        assert!(run_lock(
            &PiControllerSpec::default(),
            &LockSettings::default(),
            0.0,
            &mut rng
        )
        .is_err());
    }
}
