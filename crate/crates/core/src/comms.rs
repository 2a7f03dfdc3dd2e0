//! Upload bit accounting and the sparsity-penalty schedule.

use serde::{Deserialize, Serialize};

use crate::math::ParamVector;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommsAccount {
    pub bits_per_nonzero: u64,
    pub bits_per_zero: u64,
    pub location_bits_per_param: u64,
    pub cumulative_bits: u64,
}

impl Default for CommsAccount {
    fn default() -> Self {
        CommsAccount {
            bits_per_nonzero: 64,
            bits_per_zero: 1,
            location_bits_per_param: 1,
            cumulative_bits: 0,
        }
    }
}

impl CommsAccount {
    /// Bits for one model upload; does not touch the running total.
    pub fn upload_bits(&self, nonzero: usize, dim: usize, sparse_coding: bool) -> u64 {
        let (nonzero, dim) = (nonzero as u64, dim as u64);
        if sparse_coding {
            self.bits_per_nonzero * nonzero + self.bits_per_zero * (dim - nonzero) + self.location_bits_per_param * dim
        } else {
            self.bits_per_nonzero * dim
        }
    }

    /// Charges one upload of `model` and returns its cost.
    pub fn account_upload(&mut self, model: &ParamVector, eps_zero: f64, sparse_coding: bool) -> u64 {
        let nonzero = model.as_slice().iter().filter(|v| v.abs() >= eps_zero).count();
        let bits = self.upload_bits(nonzero, model.dim(), sparse_coding);
        self.cumulative_bits += bits;
        bits
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GammaPhase {
    Init,
    Tiny,
}

/// Which condition moves the schedule to its tiny value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum GammaTrigger {
    /// Sparsity target reached or switch round passed.
    #[default]
    Either,
    /// Both must hold.
    Both,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GammaSchedule {
    pub gamma_init: f64,
    pub gamma_tiny: f64,
    /// Nonzero fraction at or below which the schedule switches.
    pub sparsity_target: f64,
    pub switch_round: usize,
    #[serde(default)]
    pub trigger: GammaTrigger,
    #[serde(default = "initial_phase")]
    pub phase: GammaPhase,
    /// Round at which the switch happened.
    #[serde(default)]
    pub switched_at: Option<usize>,
}

fn initial_phase() -> GammaPhase {
    GammaPhase::Init
}

impl Default for GammaSchedule {
    fn default() -> Self {
        GammaSchedule {
            gamma_init: 0.001,
            gamma_tiny: 1e-5,
            sparsity_target: 0.2,
            switch_round: 100,
            trigger: GammaTrigger::Either,
            phase: GammaPhase::Init,
            switched_at: None,
        }
    }
}

impl GammaSchedule {
    /// `(gamma1, gamma2)` to use for `round`, given the current nonzero fraction.
    pub fn gamma_step(&mut self, current_sparsity: f64, round: usize) -> (f64, f64) {
        if self.phase == GammaPhase::Init {
            let sparse_enough = current_sparsity <= self.sparsity_target;
            let late_enough = round >= self.switch_round;
            let fire = match self.trigger {
                GammaTrigger::Either => sparse_enough || late_enough,
                GammaTrigger::Both => sparse_enough && late_enough,
            };
            if fire {
                self.phase = GammaPhase::Tiny;
                self.switched_at = Some(round);
            }
        }
        let g = match self.phase {
            GammaPhase::Init => self.gamma_init,
            GammaPhase::Tiny => self.gamma_tiny,
        };
        (g, g)
    }
}

/// Copy of `model` with entries below `eps_zero` in magnitude set to exactly zero.
pub fn threshold_for_transmission(model: &ParamVector, eps_zero: f64) -> ParamVector {
    ParamVector::from_vec_unchecked(
        model
            .as_slice()
            .iter()
            .map(|&v| if v.abs() < eps_zero { 0.0 } else { v })
            .collect(),
    )
}
