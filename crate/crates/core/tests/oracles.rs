//! Independent oracles for the optical model and the session statistics.

use std::f64::consts::PI;

use cqkd::adversary::{intercepted, AdversarySpec};
use cqkd::analysis::error_budget;
use cqkd::devices::SwitchSpec;
use cqkd::optics::{
    outcome_distribution, ArmLosses, InterferenceSpec, OpticalParams, PhotonCount, RouteTable,
    SplitterSpec, Terminal,
};
use cqkd::protocol::{
    run_collect, run_experiment, sift, Classification, LiveLock, RunSettings, Scenario,
    SystemParams,
};

#[derive(Clone, Copy)]
struct C(f64, f64);

impl C {
    fn polar(r: f64, phi: f64) -> C {
        C(r * phi.cos(), r * phi.sin())
    }
    fn add(self, o: C) -> C {
        C(self.0 + o.0, self.1 + o.1)
    }
    fn mul(self, o: C) -> C {
        C(self.0 * o.0 - self.1 * o.1, self.0 * o.1 + self.1 * o.0)
    }
    fn norm2(self) -> f64 {
        self.0 * self.0 + self.1 * self.1
    }
}

/// Field-amplitude model of one photon through the interferometer.
///
/// The splitter sends amplitude sqrt(R) into arm a and i sqrt(T) into arm b,
/// and on the way back arm a reaches the D1 port with i sqrt(T) and arm b with
/// sqrt(R). Locking sets the round-trip phase of arm b to pi + delta so that
/// the D1 port is dark for an ideal interferometer. Partial visibility V is a
/// mixture: with weight V the arms add as amplitudes, with weight 1 - V as
/// intensities. Returns [D1 port, D2 port, D3, lost].
fn amplitude_oracle(p: &OpticalParams, same_choice: bool) -> [f64; 4] {
    let (r, t) = (p.splitter.reflectivity, p.splitter.transmissivity);
    let eta_a = 10f64.powf(-p.losses.arm_a_roundtrip_db / 10.0);
    let eta_b1 =
        10f64.powf(-(p.losses.arm_b_roundtrip_db / 2.0 + p.losses.channel_oneway_db) / 10.0);
    let pass = if same_choice { p.leak } else { 1.0 };
    let d3 = if same_choice {
        t * eta_b1 * (1.0 - p.leak)
    } else {
        0.0
    };

    let a = C(r.sqrt() * eta_a.sqrt(), 0.0);
    let b = C(0.0, t.sqrt()).mul(C::polar(
        eta_b1 * pass.sqrt(),
        PI + p.interference.phase_error,
    ));
    let to_d1 = |a: C, b: C| a.mul(C(0.0, t.sqrt())).add(b.mul(C(r.sqrt(), 0.0)));
    let to_d2 = |a: C, b: C| a.mul(C(r.sqrt(), 0.0)).add(b.mul(C(0.0, t.sqrt())));

    let zero = C(0.0, 0.0);
    let coherent = [to_d1(a, b).norm2(), to_d2(a, b).norm2()];
    let mixed = [
        to_d1(a, zero).norm2() + to_d1(zero, b).norm2(),
        to_d2(a, zero).norm2() + to_d2(zero, b).norm2(),
    ];
    let v = if p.coherent {
        p.interference.static_visibility
    } else {
        0.0
    };
    let d1 = v * coherent[0] + (1.0 - v) * mixed[0];
    let d2 = v * coherent[1] + (1.0 - v) * mixed[1];
    [d1, d2, d3, 1.0 - d1 - d2 - d3]
}

fn params(
    r: f64,
    v: f64,
    delta: f64,
    arm_b: f64,
    ch: f64,
    leak: f64,
    coherent: bool,
) -> OpticalParams {
    OpticalParams {
        splitter: SplitterSpec::new(r).unwrap(),
        losses: ArmLosses::balanced(arm_b, ch),
        interference: InterferenceSpec::new(v, delta).unwrap(),
        leak,
        coherent,
    }
}

#[test]
fn route_tables_match_amplitude_model() {
    let mut cases = Vec::new();
    for r in [0.5, 0.2, 0.65] {
        for v in [1.0, 0.98, 0.7] {
            for delta in [0.0, 0.5, -2.5, PI] {
                for (b, ch) in [(0.0, 0.0), (10.5, 0.0), (10.5, 1.0)] {
                    for leak in [0.0, 0.02, 0.3] {
                        for coherent in [true, false] {
                            cases.push(params(r, v, delta, b, ch, leak, coherent));
                        }
                    }
                }
            }
        }
    }
    let mut unbalanced = params(0.5, 0.98, 0.1, 10.5, 1.0, 0.02, true);
    unbalanced.losses.arm_a_roundtrip_db = 3.0;
    cases.push(unbalanced);

    for p in &cases {
        for same in [true, false] {
            let got = RouteTable::for_choice(p, same).terminal_probabilities();
            let want = amplitude_oracle(p, same);
            for k in 0..4 {
                assert!(
                    (got[k] - want[k]).abs() < 1e-12,
                    "{p:?} same={same} k={k}: {got:?} vs {want:?}"
                );
            }
        }
    }
}

#[test]
fn quarter_and_one_percent_fractions() {
    let ideal = OpticalParams::ideal();
    let same = RouteTable::same_choice(&ideal);
    assert!((same.probability(Terminal::D1Port) - 0.25).abs() < 1e-15);
    assert!((same.probability(Terminal::D2Port) - 0.25).abs() < 1e-15);
    assert!((same.probability(Terminal::D3) - 0.5).abs() < 1e-15);

    let mut p = ideal;
    p.interference.static_visibility = 0.98;
    let diff = RouteTable::diff_choice(&p);
    let d1 = diff.probability(Terminal::D1Port);
    let d2 = diff.probability(Terminal::D2Port);
    assert!((d1 / (d1 + d2) - 0.01).abs() < 1e-12);
}

#[test]
fn enumeration_matches_multinomial() {
    let p = params(0.4, 0.95, 0.2, 10.5, 1.0, 0.05, true);
    for same in [true, false] {
        let q = RouteTable::for_choice(&p, same).terminal_probabilities();
        for n in 0..=4u32 {
            let dist = outcome_distribution(PhotonCount(n), same, &p).unwrap();
            let total: f64 = dist.values().sum();
            assert!((total - 1.0).abs() < 1e-12);
            for (pat, prob) in &dist {
                let k = [pat.d1 as u32, pat.d2 as u32, pat.d3 as u32, pat.lost as u32];
                let fact = |m: u32| (1..=m).map(f64::from).product::<f64>();
                let coef = fact(n) / k.iter().map(|&m| fact(m)).product::<f64>();
                let want = coef * (0..4).map(|i| q[i].powi(k[i] as i32)).product::<f64>();
                assert!((prob - want).abs() < 1e-12, "{pat:?}");
            }
        }
    }
}

/// Closed form for a Poisson source with independent per-photon routing:
/// each detector channel sees an independent Poisson photon number. Returns
/// (P(sifted), P(sifted and diff choice)) per slot with afterpulsing off.
fn sifted_oracle(sp: &SystemParams) -> (f64, f64) {
    let optical = sp.optical(sp.interference.phase_error);
    let eta = sp.detectors.efficiency;
    let dark = sp.detectors.dark_prob_per_gate;
    let silent = |mean: f64| (-mean * eta).exp() * (1.0 - dark);
    let per_choice = |same: bool| {
        let q = amplitude_oracle(&optical, same);
        let (m1, m2, m3) = (sp.mu * q[0], sp.mu * q[1], sp.mu * q[2]);
        (1.0 - silent(m1)) * silent(m2) * silent(m3) * (1.0 - dark) * (1.0 - dark)
    };
    let (s, d) = (per_choice(true), per_choice(false));
    (0.5 * (s + d), 0.5 * d)
}

#[test]
fn sifted_rate_and_qber_match_closed_form() {
    for (scenario, mu) in [
        (Scenario::Desktop, 0.5),
        (Scenario::Fiber1km, 1.0),
        (Scenario::Desktop, 2.0),
    ] {
        let mut sp = SystemParams::for_scenario(scenario, mu);
        sp.detectors.afterpulse_prob = 0.0;
        let n = 4_000_000u64;
        let r = run_experiment(
            &sp,
            &AdversarySpec::none(),
            &RunSettings::new(n, 11),
            &LiveLock::default(),
        )
        .unwrap();
        let (p_sift, p_err) = sifted_oracle(&sp);
        let f = r.counts.sifted_bits as f64 / n as f64;
        let sd = (p_sift * (1.0 - p_sift) / n as f64).sqrt();
        assert!(
            (f - p_sift).abs() <= 3.0 * sd,
            "{scenario:?} mu={mu}: sifted {f} vs {p_sift}"
        );
        let q = p_err / p_sift;
        let bits = r.counts.sifted_bits as f64;
        let qsd = (q * (1.0 - q) / bits).sqrt();
        let got = r.qber.unwrap();
        assert!(
            (got - q).abs() <= 3.0 * qsd,
            "{scenario:?} mu={mu}: qber {got} vs {q}"
        );
    }
}

#[test]
fn sifted_fraction_matches_enumeration() {
    // Desktop, mu=0.5, delta=0: sum the exact occupancy distribution over the
    // Poisson photon number (truncated at 4 photons) and apply the detectors.
    let mut sp = SystemParams::for_scenario(Scenario::Desktop, 0.5);
    sp.detectors.afterpulse_prob = 0.0;
    let optical = sp.optical(0.0);
    let (eta, dark) = (sp.detectors.efficiency, sp.detectors.dark_prob_per_gate);
    let click = |k: u8| 1.0 - (1.0 - eta).powi(k as i32) * (1.0 - dark);
    let mut p_sift = 0.0;
    for same in [true, false] {
        for n in 0..=4u32 {
            let pn =
                (-sp.mu).exp() * sp.mu.powi(n as i32) / (1..=n).map(f64::from).product::<f64>();
            for (pat, prob) in outcome_distribution(PhotonCount(n), same, &optical).unwrap() {
                let only_d1 = click(pat.d1)
                    * (1.0 - click(pat.d2))
                    * (1.0 - click(pat.d3))
                    * (1.0 - dark).powi(2);
                p_sift += 0.5 * pn * prob * only_d1;
            }
        }
    }
    let n = 10_000_000u64;
    let r = run_experiment(
        &sp,
        &AdversarySpec::none(),
        &RunSettings::new(n, 12),
        &LiveLock::default(),
    )
    .unwrap();
    let f = r.counts.sifted_bits as f64 / n as f64;
    let sd = (p_sift * (1.0 - p_sift) / n as f64).sqrt();
    assert!((f - p_sift).abs() <= 3.0 * sd + 2e-7, "{f} vs {p_sift}");
}

#[test]
fn ideal_single_photon_ratios() {
    // Lossless, perfect detectors; condition on exactly one emitted photon.
    let mut sp = SystemParams::ideal(1.0);
    sp.interference.static_visibility = 0.98;
    let (_, recs) = run_collect(
        &sp,
        &AdversarySpec::none(),
        &RunSettings::new(1_000_000, 13),
        &LiveLock::default(),
    )
    .unwrap();
    let single: Vec<_> = recs.iter().filter(|r| r.route.photons == 1).collect();
    let same: Vec<_> = single.iter().filter(|r| r.same_choice()).collect();
    let diff: Vec<_> = single.iter().filter(|r| !r.same_choice()).collect();
    let ps = same
        .iter()
        .filter(|r| r.classification == Classification::SiftedKey)
        .count() as f64
        / same.len() as f64;
    let pd = diff.iter().filter(|r| r.clicks.any_d1()).count() as f64 / diff.len() as f64;
    let sd = |p: f64, n: usize| (p * (1.0 - p) / n as f64).sqrt();
    assert!((ps - 0.25).abs() <= 3.0 * sd(0.25, same.len()), "{ps}");
    // Diff choice: RT(2 - 2V) = (1 - V)/2 with R = T = 1/2.
    assert!((pd - 0.01).abs() <= 3.0 * sd(0.01, diff.len()), "{pd}");
}

#[test]
fn sift_qber_is_raw_mismatch_fraction() {
    let sp = SystemParams::for_scenario(Scenario::Fiber1km, 1.0);
    let (report, recs) = run_collect(
        &sp,
        &AdversarySpec::none(),
        &RunSettings::new(1_000_000, 14),
        &LiveLock::default(),
    )
    .unwrap();
    let sifted: Vec<_> = recs
        .iter()
        .filter(|r| r.classification == Classification::SiftedKey)
        .collect();
    let raw =
        sifted.iter().filter(|r| r.alice_bit != r.bob_bit).count() as f64 / sifted.len() as f64;
    let s = sift(&recs);
    assert_eq!(s.qber, Some(raw));
    assert_eq!(report.qber, Some(raw));
    assert_eq!(s.alice_key.len() as u64, report.counts.sifted_bits);
    assert_eq!(s.monitor.d2_same, report.counts.d2_same);
    assert_eq!(s.monitor.d2_diff, report.counts.d2_diff);
    assert_eq!(s.monitor.d3_error_rate(), report.counts.d3_error_rate);
    assert_eq!(s.monitor.multiple, report.counts.multiple);
    let total: u64 = report.counts.classifications.values().sum();
    assert_eq!(total, 1_000_000);
}

fn only(sp: &mut SystemParams) {
    sp.interference.static_visibility = 1.0;
    sp.detectors.dark_prob_per_gate = 0.0;
    sp.detectors.afterpulse_prob = 0.0;
    sp.switch = SwitchSpec::perfect();
}

#[test]
fn dark_count_term_is_recoverable() {
    let mut sp = SystemParams::for_scenario(Scenario::Fiber1km, 0.5);
    only(&mut sp);
    sp.detectors.dark_prob_per_gate = 1e-5;
    let r = run_experiment(
        &sp,
        &AdversarySpec::none(),
        &RunSettings::new(10_000_000, 15),
        &LiveLock::default(),
    )
    .unwrap();
    let e = r.budget.unwrap().e_dark;
    let q = r.qber.unwrap();
    let sd = (e * (1.0 - e) / r.counts.sifted_bits as f64).sqrt();
    assert!((q - e).abs() <= 3.0 * sd, "qber {q} vs e_dark {e}");
}

#[test]
fn visibility_term_is_recoverable() {
    let mut sp = SystemParams::for_scenario(Scenario::Fiber1km, 0.5);
    only(&mut sp);
    sp.interference.static_visibility = 0.98;
    let r = run_experiment(
        &sp,
        &AdversarySpec::none(),
        &RunSettings::new(10_000_000, 16),
        &LiveLock::default(),
    )
    .unwrap();
    let e = error_budget(&sp, 70.0).unwrap().e_visibility;
    let q = r.qber.unwrap();
    let sd = (e * (1.0 - e) / r.counts.sifted_bits as f64).sqrt();
    assert!((q - e).abs() <= 3.0 * sd, "qber {q} vs e_visibility {e}");
}

#[test]
fn intercepted_table_has_no_interference() {
    let p = params(0.5, 0.98, 0.0, 0.0, 0.0, 0.0, true);
    let q = RouteTable::diff_choice(&intercepted(&p)).terminal_probabilities();
    assert!((q[0] / (q[0] + q[1]) - 0.5).abs() < 1e-12);
}
