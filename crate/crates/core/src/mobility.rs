//! Gauss-Markov mobility in a bounded planar arena.

use std::f64::consts::{PI, TAU};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MobilityError {
    #[error("memory level lambda must lie in [0, 1], got {0}")]
    Lambda(f64),
    #[error("{field} must be non-negative and finite, got {value}")]
    Negative { field: &'static str, value: f64 },
    #[error("max_speed must be positive, got {0}")]
    MaxSpeed(f64),
    #[error("arena dimensions must be positive, got {width} x {height}")]
    Arena { width: f64, height: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Position {
    pub x: f64,
    pub y: f64,
}

impl Position {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }
}

/// Axis-aligned arena `[0, width] x [0, height]` in meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Arena {
    pub width: f64,
    pub height: f64,
}

impl Arena {
    pub fn new(width: f64, height: f64) -> Result<Self, MobilityError> {
        if !(width > 0.0 && height > 0.0 && width.is_finite() && height.is_finite()) {
            return Err(MobilityError::Arena { width, height });
        }
        Ok(Self { width, height })
    }

    pub fn contains(&self, p: Position) -> bool {
        (0.0..=self.width).contains(&p.x) && (0.0..=self.height).contains(&p.y)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MobilityParams {
    /// Memory level: 1 keeps the previous value, 0 draws around the mean.
    pub lambda: f64,
    /// Long-run mean speed, m/s.
    pub mean_speed: f64,
    /// Long-run mean direction, radians.
    pub mean_direction: f64,
    pub speed_sigma: f64,
    pub direction_sigma: f64,
    pub max_speed: f64,
}

impl Default for MobilityParams {
    fn default() -> Self {
        Self {
            lambda: 0.75,
            mean_speed: 10.0,
            mean_direction: 0.0,
            speed_sigma: 2.0,
            direction_sigma: 0.5,
            max_speed: 20.0,
        }
    }
}

impl MobilityParams {
    pub fn validate(&self) -> Result<(), MobilityError> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(MobilityError::Lambda(self.lambda));
        }
        for (field, value) in [
            ("mean_speed", self.mean_speed),
            ("speed_sigma", self.speed_sigma),
            ("direction_sigma", self.direction_sigma),
        ] {
            if !(value >= 0.0 && value.is_finite()) {
                return Err(MobilityError::Negative { field, value });
            }
        }
        if !self.mean_direction.is_finite() {
            return Err(MobilityError::Negative { field: "mean_direction", value: self.mean_direction });
        }
        if !(self.max_speed > 0.0 && self.max_speed.is_finite()) {
            return Err(MobilityError::MaxSpeed(self.max_speed));
        }
        Ok(())
    }

    /// A device that never moves.
    pub fn stationary() -> Self {
        Self {
            lambda: 1.0,
            mean_speed: 0.0,
            mean_direction: 0.0,
            speed_sigma: 0.0,
            direction_sigma: 0.0,
            max_speed: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MobilityState {
    pub position: Position,
    pub speed: f64,
    pub direction: f64,
}

/// Standard-normal draws consumed by one Gauss-Markov step.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Noise {
    pub speed: f64,
    pub direction: f64,
}

/// Wraps an angle into `[0, 2pi)`.
pub fn wrap_angle(theta: f64) -> f64 {
    let r = theta.rem_euclid(TAU);
    if r >= TAU {
        0.0
    } else {
        r
    }
}

/// One Gauss-Markov update of speed and direction; position is untouched.
///
/// `v' = lambda v + (1 - lambda) mean + sqrt(1 - lambda^2) sigma n`
pub fn gm_step(state: MobilityState, params: &MobilityParams, noise: Noise) -> MobilityState {
    let lambda = params.lambda;
    let memory = (1.0 - lambda * lambda).max(0.0).sqrt();
    let speed = lambda * state.speed
        + (1.0 - lambda) * params.mean_speed
        + memory * params.speed_sigma * noise.speed;
    let direction = lambda * state.direction
        + (1.0 - lambda) * params.mean_direction
        + memory * params.direction_sigma * noise.direction;
    MobilityState {
        position: state.position,
        speed: speed.clamp(0.0, params.max_speed),
        direction: wrap_angle(direction),
    }
}

// Folds a coordinate back into [0, limit]; returns the folded value and
// whether an odd number of reflections happened.
fn reflect(mut v: f64, limit: f64) -> (f64, bool) {
    let mut flipped = false;
    while v < 0.0 || v > limit {
        v = if v < 0.0 { -v } else { 2.0 * limit - v };
        flipped = !flipped;
    }
    (v, flipped)
}

/// Moves the device for `dt` seconds along its heading, reflecting off the
/// arena walls. A reflection on x mirrors the heading to `pi - theta`, on y
/// to `-theta`.
pub fn integrate_position(state: MobilityState, dt: f64, arena: &Arena) -> MobilityState {
    let raw_x = state.position.x + state.speed * state.direction.cos() * dt;
    let raw_y = state.position.y + state.speed * state.direction.sin() * dt;
    let (x, flip_x) = reflect(raw_x, arena.width);
    let (y, flip_y) = reflect(raw_y, arena.height);
    let mut direction = state.direction;
    if flip_x {
        direction = PI - direction;
    }
    if flip_y {
        direction = -direction;
    }
    MobilityState {
        position: Position { x, y },
        speed: state.speed,
        direction: if flip_x || flip_y { wrap_angle(direction) } else { state.direction },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_distr::{Distribution, StandardNormal};

    fn state(x: f64, y: f64, speed: f64, direction: f64) -> MobilityState {
        MobilityState { position: Position::new(x, y), speed, direction }
    }

    #[test]
    fn full_memory_keeps_speed_and_direction() {
        let params = MobilityParams { lambda: 1.0, ..MobilityParams::default() };
        let s = state(10.0, 10.0, 7.5, 1.25);
        let next = gm_step(s, &params, Noise { speed: 3.0, direction: -2.0 });
        assert_eq!(next.speed, 7.5);
        assert_eq!(next.direction, 1.25);
        assert_eq!(next.position, s.position);
    }

    #[test]
    fn memoryless_without_noise_hits_mean() {
        let params = MobilityParams { lambda: 0.0, speed_sigma: 0.0, mean_speed: 12.0, ..MobilityParams::default() };
        let next = gm_step(state(0.0, 0.0, 3.0, 0.0), &params, Noise { speed: 1.7, direction: 0.0 });
        assert_eq!(next.speed, 12.0);
    }

    #[test]
    fn speed_is_clamped() {
        let params = MobilityParams { lambda: 0.0, speed_sigma: 50.0, ..MobilityParams::default() };
        let fast = gm_step(state(0.0, 0.0, 10.0, 0.0), &params, Noise { speed: 5.0, direction: 0.0 });
        assert_eq!(fast.speed, params.max_speed);
        let slow = gm_step(state(0.0, 0.0, 10.0, 0.0), &params, Noise { speed: -5.0, direction: 0.0 });
        assert_eq!(slow.speed, 0.0);
    }

    #[test]
    fn long_run_speed_mean() {
        let params = MobilityParams {
            lambda: 0.5,
            mean_speed: 10.0,
            speed_sigma: 2.0,
            max_speed: 1e6,
            ..MobilityParams::default()
        };
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let mut s = state(0.0, 0.0, params.mean_speed, 0.0);
        let n = 100_000;
        let mut sum = 0.0;
        for _ in 0..n {
            let noise = Noise { speed: StandardNormal.sample(&mut rng), direction: StandardNormal.sample(&mut rng) };
            s = gm_step(s, &params, noise);
            sum += s.speed;
        }
        let mean = sum / n as f64;
        // AR(1) with coefficient lambda: stationary sd = speed_sigma and the
        // variance of the mean is inflated by (1 + lambda) / (1 - lambda).
        let se = params.speed_sigma / (n as f64).sqrt() * (1.5f64 / 0.5).sqrt();
        assert!((mean - 10.0).abs() < 3.0 * se, "mean {mean} se {se}");
    }

    #[test]
    fn integration_cases() {
        let arena = Arena::new(100.0, 100.0).unwrap();
        let still = integrate_position(state(5.0, 6.0, 0.0, 2.0), 1.0, &arena);
        assert_eq!(still.position, Position::new(5.0, 6.0));
        let moved = integrate_position(state(20.0, 30.0, 10.0, 0.0), 1.0, &arena);
        assert_relative_eq!(moved.position.x, 30.0);
        assert_eq!(moved.position.y, 30.0);
    }

    #[test]
    fn reflection_on_one_axis() {
        // 1-D: x = 95 moving +x at 10 m/s for 1 s in a 100 m arena overshoots
        // by 5 m, so it ends at 100 - 5 = 95 heading -x.
        let arena = Arena::new(100.0, 100.0).unwrap();
        let out = integrate_position(state(95.0, 50.0, 10.0, 0.0), 1.0, &arena);
        assert_relative_eq!(out.position.x, 95.0, epsilon = 1e-12);
        assert_relative_eq!(out.position.y, 50.0, epsilon = 1e-12);
        assert_relative_eq!(out.direction, PI, epsilon = 1e-12);

        // lower wall on y: y = 2 heading -y at 5 m/s lands at 3 heading +y
        let out = integrate_position(state(50.0, 2.0, 5.0, 1.5 * PI), 1.0, &arena);
        assert_relative_eq!(out.position.y, 3.0, epsilon = 1e-9);
        assert_relative_eq!(out.direction, 0.5 * PI, epsilon = 1e-12);

        // multiple folds in a narrow arena
        let narrow = Arena::new(10.0, 10.0).unwrap();
        let out = integrate_position(state(1.0, 5.0, 25.0, 0.0), 1.0, &narrow);
        // 1 + 25 = 26 -> 20 - 26 = -6 -> 6, two reflections: heading kept
        assert_relative_eq!(out.position.x, 6.0, epsilon = 1e-12);
        assert_relative_eq!(out.direction, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn params_validation() {
        assert!(MobilityParams::default().validate().is_ok());
        assert!(MobilityParams { lambda: 1.5, ..Default::default() }.validate().is_err());
        assert!(MobilityParams { max_speed: 0.0, ..Default::default() }.validate().is_err());
        assert!(MobilityParams { speed_sigma: -1.0, ..Default::default() }.validate().is_err());
        assert!(Arena::new(0.0, 10.0).is_err());
    }

    proptest! {
        #[test]
        fn step_and_move_preserve_invariants(
            x in 0.0f64..300.0, y in 0.0f64..200.0,
            speed in 0.0f64..20.0, dir in 0.0f64..TAU,
            lambda in 0.0f64..=1.0, n1 in -4.0f64..4.0, n2 in -4.0f64..4.0,
            dt in 0.01f64..5.0,
        ) {
            let arena = Arena::new(300.0, 200.0).unwrap();
            let params = MobilityParams { lambda, speed_sigma: 5.0, direction_sigma: 1.0, ..Default::default() };
            let s = gm_step(state(x, y, speed, dir), &params, Noise { speed: n1, direction: n2 });
            let s = integrate_position(s, dt, &arena);
            prop_assert!(arena.contains(s.position));
            prop_assert!((0.0..=params.max_speed).contains(&s.speed));
            prop_assert!((0.0..TAU).contains(&s.direction));
        }
    }
}
