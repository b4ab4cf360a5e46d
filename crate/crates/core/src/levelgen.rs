//! Seeded level generation: grid targets and runner waves.
//!
//! All randomness flows through [`Prng`] (splitmix64) so a session is fully
//! reproducible from its seed on any platform.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::calibration::{Cell, GridLayout};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LevelGenError {
    #[error("constraints exclude every cell")]
    EmptyCandidateSet,
    #[error("invalid generator constraints: {0}")]
    InvalidConstraints(&'static str),
}

/// splitmix64 generator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prng {
    state: u64,
}

impl Prng {
    pub const fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    pub fn state(&self) -> u64 {
        self.state
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform in `[0, 1)` from the top 53 bits.
    #[inline]
    pub fn next_unit(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Index in `0..n` by plain modulo reduction.
    #[inline]
    pub fn next_index(&mut self, n: usize) -> usize {
        (self.next_u64() % n as u64) as usize
    }
}

fn default_forbid_repeat() -> bool {
    true
}

fn default_max_step() -> u8 {
    2
}

fn default_safe_lane_change_prob() -> f64 {
    0.7
}

/// Therapist constraints on random level content.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorConstraints {
    #[serde(default = "default_forbid_repeat")]
    pub forbid_repeat: bool,
    /// Maximum Chebyshev distance between consecutive grid targets.
    #[serde(default = "default_max_step")]
    pub max_step: u8,
    #[serde(default = "default_safe_lane_change_prob")]
    pub safe_lane_change_prob: f64,
}

impl Default for GeneratorConstraints {
    fn default() -> Self {
        Self {
            forbid_repeat: default_forbid_repeat(),
            max_step: default_max_step(),
            safe_lane_change_prob: default_safe_lane_change_prob(),
        }
    }
}

impl GeneratorConstraints {
    pub fn validate(&self) -> Result<(), LevelGenError> {
        if !(1..=2).contains(&self.max_step) {
            return Err(LevelGenError::InvalidConstraints("max_step must be 1 or 2"));
        }
        if !(0.0..=1.0).contains(&self.safe_lane_change_prob) {
            return Err(LevelGenError::InvalidConstraints("safe_lane_change_prob outside [0, 1]"));
        }
        Ok(())
    }

    pub fn admits(&self, previous: Option<Cell>, cell: Cell) -> bool {
        match previous {
            None => true,
            Some(p) => !(self.forbid_repeat && p == cell) && p.chebyshev(cell) <= self.max_step,
        }
    }
}

/// Picks the next target uniformly among the admissible cells (row-major).
pub fn next_grid_target(
    rng: &mut Prng,
    constraints: &GeneratorConstraints,
    layout: GridLayout,
    previous: Option<Cell>,
) -> Result<Cell, LevelGenError> {
    let candidates: Vec<Cell> = layout
        .cells()
        .into_iter()
        .filter(|&c| constraints.admits(previous, c))
        .collect();
    if candidates.is_empty() {
        return Err(LevelGenError::EmptyCandidateSet);
    }
    Ok(candidates[rng.next_index(candidates.len())])
}

pub const LANES: u8 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Wave {
    pub safe_lane: u8,
    pub blocked: [u8; 2],
    pub spawn_tick: u64,
}

impl Wave {
    fn with_safe_lane(safe_lane: u8, spawn_tick: u64) -> Self {
        let mut blocked = [0u8; 2];
        for (slot, lane) in blocked.iter_mut().zip((0..LANES).filter(|&l| l != safe_lane)) {
            *slot = lane;
        }
        Self { safe_lane, blocked, spawn_tick }
    }
}

/// Next runner wave. The first wave picks a uniform lane; afterwards the safe
/// lane moves to one of the other two lanes with `safe_lane_change_prob`.
pub fn next_wave(
    rng: &mut Prng,
    constraints: &GeneratorConstraints,
    previous_safe_lane: Option<u8>,
    spawn_tick: u64,
) -> Wave {
    let lane = match previous_safe_lane {
        None => rng.next_index(LANES as usize) as u8,
        Some(prev) => {
            if rng.next_unit() < constraints.safe_lane_change_prob {
                let others: Vec<u8> = (0..LANES).filter(|&l| l != prev).collect();
                others[rng.next_index(others.len())]
            } else {
                prev
            }
        }
    };
    Wave::with_safe_lane(lane, spawn_tick)
}
