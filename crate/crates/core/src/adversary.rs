//! Intercept-resend eavesdropper on Bob's arm.
//!
//! Eve sits in the channel, measures whether a photon is present together
//! with its polarization, and resends what she saw. That measurement reveals
//! the arm, so the returning light no longer interferes at Alice's splitter.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::devices::{apply_loss, switch_block, SwitchOutcome, SwitchSpec};
use crate::error::{check_probability, Result};
use crate::optics::{ArmPath, OpticalParams, PhotonCount, PhotonRoute, Terminal};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    #[default]
    None,
    InterceptResend,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdversarySpec {
    pub kind: AttackKind,
    /// Probability that a given slot is attacked.
    pub fraction: f64,
}

impl AdversarySpec {
    pub fn none() -> Self {
        AdversarySpec::default()
    }

    pub fn intercept_resend(fraction: f64) -> Self {
        AdversarySpec {
            kind: AttackKind::InterceptResend,
            fraction,
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_probability("adversary.fraction", self.fraction)
    }

    /// Decides whether Eve attacks this slot. Draws nothing from `rng` when the
    /// attack can never happen, so a zero-fraction adversary leaves the random
    /// stream untouched.
    pub fn attacks<R: Rng + ?Sized>(&self, rng: &mut R) -> bool {
        match self.kind {
            AttackKind::None => false,
            AttackKind::InterceptResend if self.fraction <= 0.0 => false,
            AttackKind::InterceptResend => rng.random::<f64>() < self.fraction,
        }
    }
}

/// Optical parameters as seen in an attacked slot.
pub fn intercepted(params: &OpticalParams) -> OpticalParams {
    OpticalParams {
        coherent: false,
        ..*params
    }
}

/// Routes one photon through an attacked slot step by step: splitter, arm
/// loss, Eve's measure-and-resend, Bob's switch, and recombination without
/// interference.
pub fn intercept_resend<R: Rng + ?Sized>(
    params: &OpticalParams,
    switch: &SwitchSpec,
    same_choice: bool,
    rng: &mut R,
) -> Result<PhotonRoute> {
    let (r, t) = (params.splitter.reflectivity, params.splitter.transmissivity);
    let lost = PhotonRoute {
        terminal: Terminal::Lost,
        path: ArmPath::Undetermined,
    };
    let survives = |eta: f64, rng: &mut R| -> Result<bool> {
        Ok(apply_loss(eta, PhotonCount(1), rng)?.0 == 1)
    };

    if rng.random::<f64>() < r {
        if !survives(params.losses.arm_a_transmittance(), rng)? {
            return Ok(lost);
        }
        let terminal = if rng.random::<f64>() < t {
            Terminal::D1Port
        } else {
            Terminal::D2Port
        };
        return Ok(PhotonRoute {
            terminal,
            path: ArmPath::AliceArm,
        });
    }

    let eta_b1 = params.losses.arm_b_oneway_transmittance();
    if !survives(eta_b1, rng)? {
        return Ok(lost);
    }
    // Eve has seen the photon; it is resent with the polarization she measured.
    if same_choice && switch_block(switch, rng) == SwitchOutcome::RoutedToD3 {
        return Ok(PhotonRoute {
            terminal: Terminal::D3,
            path: ArmPath::BobArm,
        });
    }
    if !survives(eta_b1, rng)? {
        return Ok(lost);
    }
    let terminal = if rng.random::<f64>() < r {
        Terminal::D1Port
    } else {
        Terminal::D2Port
    };
    Ok(PhotonRoute {
        terminal,
        path: ArmPath::BobArm,
    })
}
