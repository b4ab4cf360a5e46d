//! Therapist-tunable game parameters.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::calibration::GridLayout;
use crate::levelgen::GeneratorConstraints;

#[derive(Debug, Error, Clone, PartialEq)]
#[error("invalid game config: {0}")]
pub struct ConfigError(pub String);

fn invalid(msg: impl Into<String>) -> ConfigError {
    ConfigError(msg.into())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mechanic {
    /// Endless runner on a line of three pillows.
    Runner,
    /// Countdown-to-target game on the 3x3 grid.
    GridDance,
}

impl Mechanic {
    pub const ALL: [Mechanic; 2] = [Mechanic::Runner, Mechanic::GridDance];

    pub fn layout(self) -> GridLayout {
        match self {
            Mechanic::Runner => GridLayout::Line3,
            Mechanic::GridDance => GridLayout::Grid3x3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Theme {
    Mage,
    Bee,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViewMode {
    ThirdPerson,
    /// Avatar faces the player; columns are flipped on screen.
    Mirrored,
}

/// Consecutive-miss thresholds for easing and stopping a game.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdaptivePolicy {
    pub ease_after_misses: u32,
    pub ease_factor: f64,
    /// Upper bound on the eased time, as a multiple of the configured time.
    pub ease_cap_factor: f64,
    pub stop_after_misses: u32,
}

impl Default for AdaptivePolicy {
    fn default() -> Self {
        Self { ease_after_misses: 3, ease_factor: 1.25, ease_cap_factor: 2.0, stop_after_misses: 6 }
    }
}

impl AdaptivePolicy {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(1 <= self.ease_after_misses && self.ease_after_misses < self.stop_after_misses) {
            return Err(invalid("adaptive: need 1 <= ease_after_misses < stop_after_misses"));
        }
        if !(self.ease_factor > 1.0 && self.ease_factor.is_finite()) {
            return Err(invalid("adaptive: ease_factor must be > 1"));
        }
        if !(self.ease_cap_factor >= 1.0 && self.ease_cap_factor.is_finite()) {
            return Err(invalid("adaptive: ease_cap_factor must be >= 1"));
        }
        Ok(())
    }
}

pub const SPAWN_INTERVAL_RANGE_S: (f64, f64) = (0.5, 60.0);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GameConfig {
    pub mechanic: Mechanic,
    pub theme: Theme,
    pub view: ViewMode,
    pub layout: GridLayout,
    /// Rounds (grid) or waves (runner).
    pub length: u32,
    /// Countdown per grid round.
    pub shift_time_s: f64,
    /// Travel time of a runner wave from spawn to the player.
    pub approach_time_s: f64,
    pub spawn_interval_s: f64,
    pub lives: Option<u32>,
    pub seed: u64,
    pub adaptive: AdaptivePolicy,
    pub constraints: GeneratorConstraints,
}

impl GameConfig {
    pub fn default_for(mechanic: Mechanic) -> Self {
        Self {
            mechanic,
            theme: Theme::Mage,
            view: ViewMode::ThirdPerson,
            layout: mechanic.layout(),
            length: match mechanic {
                Mechanic::Runner => 20,
                Mechanic::GridDance => 10,
            },
            shift_time_s: 10.0,
            approach_time_s: 10.0,
            spawn_interval_s: 4.0,
            lives: None,
            seed: 0,
            adaptive: AdaptivePolicy::default(),
            constraints: GeneratorConstraints::default(),
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.length < 1 {
            return Err(invalid("length must be at least 1"));
        }
        if self.layout != self.mechanic.layout() {
            return Err(invalid(format!("{:?} is played on {:?}", self.mechanic, self.mechanic.layout())));
        }
        for (name, v) in [("shift_time_s", self.shift_time_s), ("approach_time_s", self.approach_time_s)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(invalid(format!("{name} must be positive")));
            }
        }
        let (lo, hi) = SPAWN_INTERVAL_RANGE_S;
        if !(lo..=hi).contains(&self.spawn_interval_s) {
            return Err(invalid(format!("spawn_interval_s must lie in [{lo}, {hi}]")));
        }
        if self.lives == Some(0) {
            return Err(invalid("lives must be at least 1"));
        }
        self.adaptive.validate()?;
        self.constraints.validate().map_err(|e| invalid(e.to_string()))
    }

    /// The time the adaptive controller stretches: the grid countdown or the
    /// runner approach time.
    pub fn timed_window_s(&self) -> f64 {
        match self.mechanic {
            Mechanic::GridDance => self.shift_time_s,
            Mechanic::Runner => self.approach_time_s,
        }
    }

    /// Field-wise overlay; the merged result is re-validated.
    pub fn merged(&self, o: &ConfigOverrides) -> Result<GameConfig, ConfigError> {
        let merged = GameConfig {
            mechanic: self.mechanic,
            layout: self.layout,
            theme: o.theme.unwrap_or(self.theme),
            view: o.view.unwrap_or(self.view),
            length: o.length.unwrap_or(self.length),
            shift_time_s: o.shift_time_s.unwrap_or(self.shift_time_s),
            approach_time_s: o.approach_time_s.unwrap_or(self.approach_time_s),
            spawn_interval_s: o.spawn_interval_s.unwrap_or(self.spawn_interval_s),
            lives: o.lives.or(self.lives),
            seed: o.seed.unwrap_or(self.seed),
            adaptive: o.adaptive.unwrap_or(self.adaptive),
            constraints: o.constraints.unwrap_or(self.constraints),
        };
        merged.validate()?;
        Ok(merged)
    }
}

/// Per-profile deltas over the system defaults. Absent fields inherit.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigOverrides {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theme: Option<Theme>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub view: Option<ViewMode>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub length: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shift_time_s: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub approach_time_s: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spawn_interval_s: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lives: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adaptive: Option<AdaptivePolicy>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub constraints: Option<GeneratorConstraints>,
}

impl ConfigOverrides {
    pub fn is_empty(&self) -> bool {
        *self == ConfigOverrides::default()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        for m in Mechanic::ALL {
            let c = GameConfig::default_for(m);
            c.validate().unwrap();
            assert_eq!(c.shift_time_s, 10.0);
        }
    }

    #[test]
    fn invalid_configs() {
        let base = GameConfig::default_for(Mechanic::GridDance);
        let bad = [
            GameConfig { length: 0, ..base.clone() },
            GameConfig { shift_time_s: 0.0, ..base.clone() },
            GameConfig { lives: Some(0), ..base.clone() },
            GameConfig { layout: GridLayout::Line3, ..base.clone() },
            GameConfig { spawn_interval_s: 0.1, ..base.clone() },
            GameConfig { adaptive: AdaptivePolicy { ease_after_misses: 6, ..Default::default() }, ..base.clone() },
            GameConfig { adaptive: AdaptivePolicy { ease_factor: 1.0, ..Default::default() }, ..base.clone() },
        ];
        for c in bad {
            assert!(c.validate().is_err(), "{c:?}");
        }
    }

    #[test]
    fn overrides_merge_field_wise() {
        let base = GameConfig::default_for(Mechanic::GridDance);
        assert_eq!(base.merged(&ConfigOverrides::default()).unwrap(), base);
        let o = ConfigOverrides { shift_time_s: Some(15.0), ..Default::default() };
        let m = base.merged(&o).unwrap();
        assert_eq!(m.shift_time_s, 15.0);
        assert_eq!(GameConfig { shift_time_s: 10.0, ..m }, base);
        let zero_lives = ConfigOverrides { lives: Some(0), ..Default::default() };
        assert!(base.merged(&zero_lives).is_err());
    }

    #[test]
    fn overrides_reject_unknown_fields() {
        let r: Result<ConfigOverrides, _> = serde_json::from_str(r#"{"real_name":"x"}"#);
        assert!(r.is_err());
        let o: ConfigOverrides = serde_json::from_str(r#"{"shift_time_s":15}"#).unwrap();
        assert_eq!(o.shift_time_s, Some(15.0));
    }
}
