//! Imperfect devices: gated threshold detectors, Bob's fibre switch and
//! plain loss elements.

use rand::Rng;
use rand_distr::{Binomial, Distribution};
use serde::{Deserialize, Serialize};

use crate::error::{check_probability, Error, Result};
use crate::optics::{db_to_transmittance, PhotonCount, Polarization};

/// Group index of standard single-mode fibre near 1550 nm.
pub const FIBRE_GROUP_INDEX: f64 = 1.468;
const SPEED_OF_LIGHT_M_PER_NS: f64 = 0.299_792_458;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectorSpec {
    pub efficiency: f64,
    pub dark_prob_per_gate: f64,
    pub afterpulse_prob: f64,
}

impl DetectorSpec {
    pub fn validate(&self) -> Result<()> {
        check_probability("efficiency", self.efficiency)?;
        check_probability("dark_prob_per_gate", self.dark_prob_per_gate)?;
        check_probability("afterpulse_prob", self.afterpulse_prob)
    }

    pub fn perfect() -> Self {
        DetectorSpec {
            efficiency: 1.0,
            dark_prob_per_gate: 0.0,
            afterpulse_prob: 0.0,
        }
    }

    /// Probability that a gate stays silent.
    fn silence_probability(&self, incident: u32, clicked_last_gate: bool) -> f64 {
        let mut q = (1.0 - self.efficiency).powi(incident as i32) * (1.0 - self.dark_prob_per_gate);
        if clicked_last_gate {
            q *= 1.0 - self.afterpulse_prob;
        }
        q
    }
}

impl Default for DetectorSpec {
    fn default() -> Self {
        DetectorSpec {
            efficiency: 0.25,
            dark_prob_per_gate: 1e-5,
            afterpulse_prob: 0.01,
        }
    }
}

/// The five gated single-photon detectors. D1 and D3 are polarization
/// resolved pairs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum DetectorChannel {
    D1H,
    D1V,
    D2,
    D3H,
    D3V,
}

impl DetectorChannel {
    pub const ALL: [DetectorChannel; 5] = [
        DetectorChannel::D1H,
        DetectorChannel::D1V,
        DetectorChannel::D2,
        DetectorChannel::D3H,
        DetectorChannel::D3V,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn d1(pol: Polarization) -> Self {
        match pol {
            Polarization::H => DetectorChannel::D1H,
            Polarization::V => DetectorChannel::D1V,
        }
    }

    pub fn d3(pol: Polarization) -> Self {
        match pol {
            Polarization::H => DetectorChannel::D3H,
            Polarization::V => DetectorChannel::D3V,
        }
    }

    pub fn polarization(self) -> Option<Polarization> {
        match self {
            DetectorChannel::D1H | DetectorChannel::D3H => Some(Polarization::H),
            DetectorChannel::D1V | DetectorChannel::D3V => Some(Polarization::V),
            DetectorChannel::D2 => None,
        }
    }

    pub fn is_d1(self) -> bool {
        matches!(self, DetectorChannel::D1H | DetectorChannel::D1V)
    }

    pub fn is_d3(self) -> bool {
        matches!(self, DetectorChannel::D3H | DetectorChannel::D3V)
    }

    pub fn name(self) -> &'static str {
        match self {
            DetectorChannel::D1H => "D1H",
            DetectorChannel::D1V => "D1V",
            DetectorChannel::D2 => "D2",
            DetectorChannel::D3H => "D3H",
            DetectorChannel::D3V => "D3V",
        }
    }
}

/// Afterpulse memory: whether each channel fired in the previous gate.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct DetectorState {
    pub clicked_last_gate: [bool; 5],
}

impl DetectorState {
    pub fn reset(&mut self) {
        *self = DetectorState::default();
    }
}

/// Gates one detector channel and records the outcome for the next gate.
///
/// Photon detection, dark counts and afterpulses are independent causes;
/// the channel clicks if any of them fires.
pub fn gate_detector<R: Rng + ?Sized>(
    spec: &DetectorSpec,
    state: &mut DetectorState,
    channel: DetectorChannel,
    incident_photons: u32,
    rng: &mut R,
) -> bool {
    let i = channel.index();
    let silent = spec.silence_probability(incident_photons, state.clicked_last_gate[i]);
    let click = rng.random::<f64>() >= silent;
    state.clicked_last_gate[i] = click;
    click
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SwitchSpec {
    pub static_extinction_db: f64,
    pub dynamic_extinction_db: f64,
    pub response_time_ns: f64,
    pub switching_time_ns: f64,
}

impl SwitchSpec {
    pub fn perfect() -> Self {
        SwitchSpec {
            static_extinction_db: f64::INFINITY,
            dynamic_extinction_db: f64::INFINITY,
            ..SwitchSpec::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("static_extinction_db", self.static_extinction_db),
            ("dynamic_extinction_db", self.dynamic_extinction_db),
        ] {
            if v.is_nan() || v < 0.0 {
                return Err(Error::param(name, format!("{v} must be >= 0 dB")));
            }
        }
        if self.dynamic_extinction_db > self.static_extinction_db {
            return Err(Error::param(
                "dynamic_extinction_db",
                format!(
                    "{} dB exceeds the static extinction {} dB",
                    self.dynamic_extinction_db, self.static_extinction_db
                ),
            ));
        }
        for (name, v) in [
            ("response_time_ns", self.response_time_ns),
            ("switching_time_ns", self.switching_time_ns),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::param(
                    name,
                    format!("{v} must be a finite time >= 0"),
                ));
            }
        }
        Ok(())
    }

    /// Fraction of blocked light that still reaches Bob's mirror.
    pub fn leakage(&self) -> f64 {
        db_to_transmittance(self.dynamic_extinction_db)
    }

    pub fn static_leakage(&self) -> f64 {
        db_to_transmittance(self.static_extinction_db)
    }

    /// Checks the switch timing against the pulse slot and Bob's H/V delay line.
    pub fn timing_budget(&self, slot_period_ns: f64, delay_line_m: f64) -> SwitchTiming {
        let busy_ns = self.response_time_ns + self.switching_time_ns;
        let delay_ns = delay_line_ns(delay_line_m);
        SwitchTiming {
            busy_ns,
            delay_ns,
            delay_margin_ns: delay_ns - self.response_time_ns,
            fits_in_slot: busy_ns < slot_period_ns,
        }
    }
}

impl Default for SwitchSpec {
    fn default() -> Self {
        SwitchSpec {
            static_extinction_db: 20.0,
            dynamic_extinction_db: 17.0,
            response_time_ns: 100.0,
            switching_time_ns: 300.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SwitchTiming {
    /// Response plus switching time.
    pub busy_ns: f64,
    /// Extra delay the V pulse picks up in the delay line.
    pub delay_ns: f64,
    /// Delay minus switch response time; negative means the switch is still
    /// settling when the second polarization arrives.
    pub delay_margin_ns: f64,
    pub fits_in_slot: bool,
}

pub fn delay_line_ns(length_m: f64) -> f64 {
    length_m * FIBRE_GROUP_INDEX / SPEED_OF_LIGHT_M_PER_NS
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SwitchOutcome {
    RoutedToD3,
    LeakedToMirror,
}

pub fn switch_block<R: Rng + ?Sized>(spec: &SwitchSpec, rng: &mut R) -> SwitchOutcome {
    let eps = spec.leakage();
    if eps > 0.0 && rng.random::<f64>() < eps {
        SwitchOutcome::LeakedToMirror
    } else {
        SwitchOutcome::RoutedToD3
    }
}

/// Binomial thinning of a photon number by a transmittance.
pub fn apply_loss<R: Rng + ?Sized>(
    transmittance: f64,
    n: PhotonCount,
    rng: &mut R,
) -> Result<PhotonCount> {
    check_probability("transmittance", transmittance)?;
    if n.0 == 0 || transmittance == 1.0 {
        return Ok(n);
    }
    let dist = Binomial::new(n.0 as u64, transmittance)
        .map_err(|e| Error::param("transmittance", e.to_string()))?;
    Ok(PhotonCount(dist.sample(rng) as u32))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn dark_counts_per_gate() {
        let spec = DetectorSpec {
            efficiency: 0.0,
            dark_prob_per_gate: 1e-5,
            afterpulse_prob: 0.0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut state = DetectorState::default();
        let gates = 10_000_000u64;
        let clicks = (0..gates)
            .filter(|_| gate_detector(&spec, &mut state, DetectorChannel::D2, 0, &mut rng))
            .count();
        let f = clicks as f64 / gates as f64;
        assert!((f - 1e-5).abs() <= 1e-6, "dark frequency {f}");
    }

    #[test]
    fn perfect_detector_always_clicks_on_a_photon() {
        let spec = DetectorSpec::perfect();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut state = DetectorState::default();
        for _ in 0..10_000 {
            assert!(gate_detector(
                &spec,
                &mut state,
                DetectorChannel::D1H,
                1,
                &mut rng
            ));
        }
    }

    #[test]
    fn afterpulse_follows_a_click() {
        let spec = DetectorSpec {
            efficiency: 0.0,
            dark_prob_per_gate: 0.0,
            afterpulse_prob: 0.01,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 1_000_000;
        let mut hits = 0;
        for _ in 0..n {
            let mut state = DetectorState {
                clicked_last_gate: [true; 5],
            };
            if gate_detector(&spec, &mut state, DetectorChannel::D1V, 0, &mut rng) {
                hits += 1;
            }
        }
        let f = hits as f64 / n as f64;
        assert!((f - 0.01).abs() < 4.0 * (0.01f64 * 0.99 / n as f64).sqrt());

        // Without a prior click there is nothing to afterpulse.
        let mut state = DetectorState::default();
        assert!((0..100_000).all(|_| !gate_detector(
            &spec,
            &mut state,
            DetectorChannel::D1V,
            0,
            &mut rng
        )));
    }

    #[test]
    fn switch_leakage_values() {
        let s = SwitchSpec::default();
        assert!((s.leakage() - 0.0200).abs() < 1e-4);
        assert!((s.static_leakage() - 0.01).abs() < 1e-15);
        assert_eq!(SwitchSpec::perfect().leakage(), 0.0);

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        assert!((0..10_000)
            .all(|_| switch_block(&SwitchSpec::perfect(), &mut rng) == SwitchOutcome::RoutedToD3));
    }

    #[test]
    fn switch_validation() {
        let s = SwitchSpec {
            dynamic_extinction_db: 25.0,
            ..Default::default()
        };
        assert!(s.validate().is_err());
        assert!(SwitchSpec::perfect().validate().is_ok());
        let t = SwitchSpec::default().timing_budget(10_000.0, 20.0);
        assert!(t.fits_in_slot);
        assert!((t.delay_ns - 97.9).abs() < 0.1);
    }

    #[test]
    fn lossless_and_binomial_thinning() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        assert_eq!(
            apply_loss(1.0, PhotonCount(5), &mut rng).unwrap(),
            PhotonCount(5)
        );
        assert!(apply_loss(1.5, PhotonCount(5), &mut rng).is_err());

        let n = 200_000;
        let mut hist = [0usize; 3];
        for _ in 0..n {
            hist[apply_loss(0.5, PhotonCount(2), &mut rng).unwrap().0 as usize] += 1;
        }
        for (k, expect) in [0.25, 0.5, 0.25].into_iter().enumerate() {
            let f = hist[k] as f64 / n as f64;
            assert!((f - expect).abs() < 4.0 * (expect * (1.0 - expect) / n as f64).sqrt());
        }
    }

    #[test]
    fn arm_b_loss_sample_mean() {
        let eta = db_to_transmittance(10.5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let n_in = 10_000_000u32;
        let out = apply_loss(eta, PhotonCount(n_in), &mut rng).unwrap();
        assert!((out.0 as f64 / n_in as f64 - 0.0891).abs() < 0.001);
    }
}
