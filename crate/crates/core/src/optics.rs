//! Per-pulse optical event model.
//!
//! A weak coherent pulse enters the Michelson-type interferometer through the
//! beam splitter. Arm a returns through Alice's Faraday mirror; arm b runs down
//! the channel to Bob, who either blocks it (his bit equals Alice's, the light
//! goes to D3) or reflects it back. Photons leave the interferometer through
//! the D1 port (the dark port at the working point) or the D2 port.
//!
//! Photons of a multi-photon pulse are routed independently. Within a single
//! photon, the light returning from both arms adds coherently with contrast
//! `V·cos δ`, where `V` is the static visibility and `δ` the phase error from
//! the working point. When Bob blocks, only the switch leakage returns from
//! arm b, so that small amplitude still interferes with arm a.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{check_non_negative, check_probability, Error, Result};

/// Largest photon number `outcome_distribution` will enumerate.
pub const MAX_ENUMERATED_PHOTONS: u32 = 4;

/// Polarization of a signal pulse; `H` carries bit 0 and `V` bit 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Polarization {
    H,
    V,
}

impl Polarization {
    pub fn from_bit(bit: bool) -> Self {
        if bit {
            Polarization::V
        } else {
            Polarization::H
        }
    }

    pub fn bit(self) -> u8 {
        match self {
            Polarization::H => 0,
            Polarization::V => 1,
        }
    }

    pub fn flipped(self) -> Self {
        match self {
            Polarization::H => Polarization::V,
            Polarization::V => Polarization::H,
        }
    }
}

/// Beam splitter reflectivity `R` and transmissivity `T`, with `R + T = 1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitterSpec {
    pub reflectivity: f64,
    pub transmissivity: f64,
}

impl SplitterSpec {
    pub fn new(reflectivity: f64) -> Result<Self> {
        check_probability("reflectivity", reflectivity)?;
        Ok(SplitterSpec {
            reflectivity,
            transmissivity: 1.0 - reflectivity,
        })
    }

    pub fn validate(&self) -> Result<()> {
        check_probability("reflectivity", self.reflectivity)?;
        check_probability("transmissivity", self.transmissivity)?;
        if (self.reflectivity + self.transmissivity - 1.0).abs() > 1e-12 {
            return Err(Error::param(
                "transmissivity",
                format!(
                    "R + T = {} but must equal 1",
                    self.reflectivity + self.transmissivity
                ),
            ));
        }
        Ok(())
    }
}

impl Default for SplitterSpec {
    fn default() -> Self {
        SplitterSpec {
            reflectivity: 0.5,
            transmissivity: 0.5,
        }
    }
}

/// Converts an attenuation in dB to a power transmittance.
pub fn db_to_transmittance(db: f64) -> f64 {
    10f64.powf(-db / 10.0)
}

/// Losses of the two interferometer arms.
///
/// `arm_b_roundtrip_db` is the loss of Bob's arm excluding the channel fibre;
/// the channel adds `channel_oneway_db` on each pass.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArmLosses {
    pub arm_a_roundtrip_db: f64,
    pub arm_b_roundtrip_db: f64,
    pub channel_oneway_db: f64,
}

impl ArmLosses {
    /// Arm a attenuated to match the full round trip of arm b.
    pub fn balanced(arm_b_roundtrip_db: f64, channel_oneway_db: f64) -> Self {
        ArmLosses {
            arm_a_roundtrip_db: arm_b_roundtrip_db + 2.0 * channel_oneway_db,
            arm_b_roundtrip_db,
            channel_oneway_db,
        }
    }

    pub fn lossless() -> Self {
        ArmLosses::balanced(0.0, 0.0)
    }

    pub fn validate(&self) -> Result<()> {
        check_non_negative("arm_a_roundtrip_db", self.arm_a_roundtrip_db)?;
        check_non_negative("arm_b_roundtrip_db", self.arm_b_roundtrip_db)?;
        check_non_negative("channel_oneway_db", self.channel_oneway_db)
    }

    pub fn arm_a_transmittance(&self) -> f64 {
        db_to_transmittance(self.arm_a_roundtrip_db)
    }

    /// Beam splitter to Bob's switch: half of arm b plus one channel pass.
    pub fn arm_b_oneway_transmittance(&self) -> f64 {
        db_to_transmittance(0.5 * self.arm_b_roundtrip_db + self.channel_oneway_db)
    }

    pub fn arm_b_roundtrip_transmittance(&self) -> f64 {
        db_to_transmittance(self.arm_b_roundtrip_db + 2.0 * self.channel_oneway_db)
    }
}

/// Fringe visibility and phase error of the interferometer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InterferenceSpec {
    pub static_visibility: f64,
    /// Radians away from the working point that darkens the D1 port.
    pub phase_error: f64,
}

impl InterferenceSpec {
    pub fn new(static_visibility: f64, phase_error: f64) -> Result<Self> {
        let spec = InterferenceSpec {
            static_visibility,
            phase_error,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        check_probability("static_visibility", self.static_visibility)?;
        if !self.phase_error.is_finite() {
            return Err(Error::param("phase_error", "must be finite"));
        }
        Ok(())
    }

    /// `V·cos δ`.
    pub fn contrast(&self) -> f64 {
        self.static_visibility * self.phase_error.cos()
    }

    /// D1 share of the light returning from a balanced interferometer.
    pub fn diff_d1_fraction(&self) -> f64 {
        (1.0 - self.contrast()) / 2.0
    }
}

impl Default for InterferenceSpec {
    fn default() -> Self {
        InterferenceSpec {
            static_visibility: 1.0,
            phase_error: 0.0,
        }
    }
}

/// Number of photons in one pulse.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct PhotonCount(pub u32);

/// Poissonian weak coherent source with a fixed mean photon number.
#[derive(Debug, Clone)]
pub struct PhotonSource {
    dist: Option<Poisson<f64>>,
}

impl PhotonSource {
    pub fn new(mu: f64) -> Result<Self> {
        check_non_negative("mu", mu)?;
        let dist = if mu > 0.0 {
            Some(Poisson::new(mu).map_err(|e| Error::param("mu", e.to_string()))?)
        } else {
            None
        };
        Ok(PhotonSource { dist })
    }

    /// Draws a photon number. An empty source consumes no randomness.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> PhotonCount {
        match &self.dist {
            Some(d) => PhotonCount(d.sample(rng) as u32),
            None => PhotonCount(0),
        }
    }
}

pub fn sample_photon_number<R: Rng + ?Sized>(mu: f64, rng: &mut R) -> Result<PhotonCount> {
    Ok(PhotonSource::new(mu)?.sample(rng))
}

/// Where a single photon ends up.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Terminal {
    D1Port,
    D2Port,
    D3,
    Lost,
}

impl Terminal {
    pub const ALL: [Terminal; 4] = [
        Terminal::D1Port,
        Terminal::D2Port,
        Terminal::D3,
        Terminal::Lost,
    ];

    fn index(self) -> usize {
        self as usize
    }
}

/// Which arms a detected photon's amplitude travelled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ArmPath {
    /// Only Alice's arm a; the photon never entered the channel.
    AliceArm,
    /// Only Bob's arm b.
    BobArm,
    /// Coherent superposition over both arms.
    BothArms,
    /// The photon was absorbed somewhere along the way.
    Undetermined,
}

impl ArmPath {
    pub fn entered_channel(self) -> bool {
        matches!(self, ArmPath::BobArm | ArmPath::BothArms)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PhotonRoute {
    pub terminal: Terminal,
    pub path: ArmPath,
}

/// Everything the per-photon routing depends on.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OpticalParams {
    pub splitter: SplitterSpec,
    pub losses: ArmLosses,
    pub interference: InterferenceSpec,
    /// Probability that Bob's switch lets blocked light through to his mirror.
    pub leak: f64,
    /// False when the which-arm information has been measured (an interceptor
    /// in the channel), so returning light cannot interfere.
    pub coherent: bool,
}

impl OpticalParams {
    pub fn ideal() -> Self {
        OpticalParams {
            splitter: SplitterSpec::default(),
            losses: ArmLosses::lossless(),
            interference: InterferenceSpec::default(),
            leak: 0.0,
            coherent: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.splitter.validate()?;
        self.losses.validate()?;
        self.interference.validate()?;
        check_probability("leak", self.leak)
    }

    fn contrast(&self) -> f64 {
        if self.coherent {
            self.interference.contrast()
        } else {
            0.0
        }
    }
}

/// Per-photon routing distribution, ready for sampling.
#[derive(Debug, Clone)]
pub struct RouteTable {
    entries: Vec<(PhotonRoute, f64)>,
}

impl RouteTable {
    fn build(mut entries: Vec<(PhotonRoute, f64)>) -> Self {
        for e in &mut entries {
            e.1 = e.1.max(0.0);
        }
        let used: f64 = entries.iter().map(|e| e.1).sum();
        entries.push((
            PhotonRoute {
                terminal: Terminal::Lost,
                path: ArmPath::Undetermined,
            },
            (1.0 - used).max(0.0),
        ));
        entries.retain(|e| e.1 > 0.0);
        RouteTable { entries }
    }

    /// Bob blocks arm b: it goes to D3 unless the switch leaks.
    pub fn same_choice(p: &OpticalParams) -> Self {
        let (r, t) = (p.splitter.reflectivity, p.splitter.transmissivity);
        let eta_a = p.losses.arm_a_transmittance();
        let eta_b1 = p.losses.arm_b_oneway_transmittance();
        let eta_b = p.losses.arm_b_roundtrip_transmittance();
        let eps = p.leak;

        let mut entries = vec![(
            route(Terminal::D3, ArmPath::BobArm),
            t * eta_b1 * (1.0 - eps),
        )];
        if p.coherent {
            let cross = 2.0 * r * t * (eps * eta_a * eta_b).sqrt() * p.contrast();
            let path = if eps > 0.0 {
                ArmPath::BothArms
            } else {
                ArmPath::AliceArm
            };
            entries.push((
                route(Terminal::D1Port, path),
                r * t * (eta_a + eps * eta_b) - cross,
            ));
            entries.push((
                route(Terminal::D2Port, path),
                r * r * eta_a + t * t * eps * eta_b + cross,
            ));
        } else {
            entries.push((route(Terminal::D1Port, ArmPath::AliceArm), r * eta_a * t));
            entries.push((route(Terminal::D2Port, ArmPath::AliceArm), r * eta_a * r));
            entries.push((
                route(Terminal::D1Port, ArmPath::BobArm),
                t * eps * eta_b * r,
            ));
            entries.push((
                route(Terminal::D2Port, ArmPath::BobArm),
                t * eps * eta_b * t,
            ));
        }
        RouteTable::build(entries)
    }

    /// Bob reflects arm b and both arms recombine.
    pub fn diff_choice(p: &OpticalParams) -> Self {
        let (r, t) = (p.splitter.reflectivity, p.splitter.transmissivity);
        let eta_a = p.losses.arm_a_transmittance();
        let eta_b = p.losses.arm_b_roundtrip_transmittance();

        let entries = if p.coherent {
            let cross = 2.0 * r * t * (eta_a * eta_b).sqrt() * p.contrast();
            vec![
                (
                    route(Terminal::D1Port, ArmPath::BothArms),
                    r * t * (eta_a + eta_b) - cross,
                ),
                (
                    route(Terminal::D2Port, ArmPath::BothArms),
                    r * r * eta_a + t * t * eta_b + cross,
                ),
            ]
        } else {
            vec![
                (route(Terminal::D1Port, ArmPath::AliceArm), r * eta_a * t),
                (route(Terminal::D2Port, ArmPath::AliceArm), r * eta_a * r),
                (route(Terminal::D1Port, ArmPath::BobArm), t * eta_b * r),
                (route(Terminal::D2Port, ArmPath::BobArm), t * eta_b * t),
            ]
        };
        RouteTable::build(entries)
    }

    pub fn for_choice(p: &OpticalParams, same_choice: bool) -> Self {
        if same_choice {
            RouteTable::same_choice(p)
        } else {
            RouteTable::diff_choice(p)
        }
    }

    /// Probabilities indexed like [`Terminal::ALL`].
    pub fn terminal_probabilities(&self) -> [f64; 4] {
        let mut out = [0.0; 4];
        for (r, p) in &self.entries {
            out[r.terminal.index()] += p;
        }
        out
    }

    pub fn probability(&self, terminal: Terminal) -> f64 {
        self.terminal_probabilities()[terminal.index()]
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> PhotonRoute {
        let mut u: f64 = rng.random();
        for (r, p) in &self.entries {
            if u < *p {
                return *r;
            }
            u -= p;
        }
        // Rounding left a sliver of mass past the last entry.
        self.entries
            .last()
            .map(|e| e.0)
            .unwrap_or(route(Terminal::Lost, ArmPath::Undetermined))
    }
}

fn route(terminal: Terminal, path: ArmPath) -> PhotonRoute {
    PhotonRoute { terminal, path }
}

pub fn route_same_choice<R: Rng + ?Sized>(
    params: &OpticalParams,
    rng: &mut R,
) -> Result<PhotonRoute> {
    params.validate()?;
    Ok(RouteTable::same_choice(params).sample(rng))
}

pub fn route_diff_choice<R: Rng + ?Sized>(
    params: &OpticalParams,
    rng: &mut R,
) -> Result<PhotonRoute> {
    params.validate()?;
    Ok(RouteTable::diff_choice(params).sample(rng))
}

/// How many photons of one pulse reached each terminal.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize)]
pub struct OccupancyPattern {
    pub d1: u8,
    pub d2: u8,
    pub d3: u8,
    pub lost: u8,
}

impl OccupancyPattern {
    pub fn add(&mut self, terminal: Terminal) {
        match terminal {
            Terminal::D1Port => self.d1 += 1,
            Terminal::D2Port => self.d2 += 1,
            Terminal::D3 => self.d3 += 1,
            Terminal::Lost => self.lost += 1,
        }
    }
}

/// Exact joint distribution of terminal occupancies for `n` photons, by
/// enumerating every assignment of photons to terminals.
pub fn outcome_distribution(
    n: PhotonCount,
    same_choice: bool,
    params: &OpticalParams,
) -> Result<BTreeMap<OccupancyPattern, f64>> {
    if n.0 > MAX_ENUMERATED_PHOTONS {
        return Err(Error::Unsupported(format!(
            "outcome enumeration is limited to {MAX_ENUMERATED_PHOTONS} photons, got {}",
            n.0
        )));
    }
    params.validate()?;
    let probs = RouteTable::for_choice(params, same_choice).terminal_probabilities();

    let n = n.0 as usize;
    let mut out = BTreeMap::new();
    for code in 0..4usize.pow(n as u32) {
        let mut pattern = OccupancyPattern::default();
        let mut p = 1.0;
        let mut c = code;
        for _ in 0..n {
            let t = Terminal::ALL[c % 4];
            c /= 4;
            pattern.add(t);
            p *= probs[t.index()];
        }
        *out.entry(pattern).or_insert(0.0) += p;
    }
    Ok(out)
}
