use super::WorldError;
use crate::geometry::{wrap_angle, Vec3};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

/// Vehicle state. Linear quantities are expressed in the yaw-aligned body
/// frame `(forward, right, up)`; angular ones as `(roll, pitch, yaw)` rates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RigidState {
    pub position: Vec3,
    pub roll: f64,
    pub pitch: f64,
    pub yaw: f64,
    pub linear_velocity: Vec3,
    pub linear_acceleration: Vec3,
    pub angular_velocity: Vec3,
    pub angular_acceleration: Vec3,
    pub time: f64,
}

impl RigidState {
    /// At rest at `position` with heading `yaw`.
    pub fn at(position: Vec3, yaw: f64) -> Self {
        Self {
            position,
            roll: 0.0,
            pitch: 0.0,
            yaw: wrap_angle(yaw),
            linear_velocity: Vec3::ZERO,
            linear_acceleration: Vec3::ZERO,
            angular_velocity: Vec3::ZERO,
            angular_acceleration: Vec3::ZERO,
            time: 0.0,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.position.is_finite()
            && self.roll.is_finite()
            && self.pitch.is_finite()
            && self.yaw.is_finite()
            && self.linear_velocity.is_finite()
            && self.linear_acceleration.is_finite()
            && self.angular_velocity.is_finite()
            && self.angular_acceleration.is_finite()
            && self.time.is_finite()
    }

    /// Unit vector of the horizontal heading.
    pub fn heading(&self) -> Vec3 {
        Vec3::new(self.yaw.cos(), self.yaw.sin(), 0.0)
    }

    /// World-frame velocity.
    pub fn world_velocity(&self) -> Vec3 {
        body_to_world(self.yaw, self.linear_velocity)
    }
}

fn body_to_world(yaw: f64, v: Vec3) -> Vec3 {
    let (s, c) = yaw.sin_cos();
    Vec3::new(c * v.x - s * v.y, s * v.x + c * v.y, v.z)
}

/// Normalised velocity command. Components are clamped to `[-1, 1]` on
/// construction.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ActionCommand {
    pub forward: f64,
    pub lateral: f64,
    pub vertical: f64,
    pub yaw_rate: f64,
}

impl ActionCommand {
    pub const ZERO: ActionCommand = ActionCommand { forward: 0.0, lateral: 0.0, vertical: 0.0, yaw_rate: 0.0 };

    pub fn new(forward: f64, lateral: f64, vertical: f64, yaw_rate: f64) -> Self {
        let c = |v: f64| if v.is_nan() { v } else { v.clamp(-1.0, 1.0) };
        Self { forward: c(forward), lateral: c(lateral), vertical: c(vertical), yaw_rate: c(yaw_rate) }
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Self::new(a[0], a[1], a[2], a[3])
    }

    /// `(forward, lateral, vertical, yaw_rate)`.
    pub fn to_array(self) -> [f64; 4] {
        [self.forward, self.lateral, self.vertical, self.yaw_rate]
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }
}

/// First-order velocity-lag model parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DynamicsParams {
    pub v_max: f64,
    pub omega_max: f64,
    /// Lag time constant in seconds; zero tracks commands instantly.
    pub tau: f64,
}

impl Default for DynamicsParams {
    fn default() -> Self {
        Self { v_max: 5.0, omega_max: PI / 2.0, tau: 0.3 }
    }
}

/// Advances the vehicle by `dt` seconds under `action`.
pub fn step(state: &RigidState, action: &ActionCommand, dt: f64, params: &DynamicsParams) -> Result<RigidState, WorldError> {
    if !state.is_finite() {
        return Err(WorldError::NonFinite("state"));
    }
    if !action.is_finite() {
        return Err(WorldError::NonFinite("action"));
    }
    if !dt.is_finite() {
        return Err(WorldError::NonFinite("dt"));
    }
    if dt <= 0.0 {
        return Err(WorldError::BadTimeStep(dt));
    }
    let action = ActionCommand::from_array(action.to_array());
    let alpha = if params.tau > 0.0 { 1.0 - (-dt / params.tau).exp() } else { 1.0 };
    let track = |current: f64, command: f64, limit: f64| (current + (command - current) * alpha).clamp(-limit, limit);

    let v_old = state.linear_velocity;
    let mut v = Vec3::new(
        track(v_old.x, action.forward * params.v_max, params.v_max),
        track(v_old.y, action.lateral * params.v_max, params.v_max),
        track(v_old.z, action.vertical * params.v_max, params.v_max),
    );
    let w_old = state.angular_velocity;
    let w = Vec3::new(0.0, 0.0, track(w_old.z, action.yaw_rate * params.omega_max, params.omega_max));

    let yaw = wrap_angle(state.yaw + w.z * dt);
    let mut position = state.position + body_to_world(yaw, v) * dt;
    if position.z < 0.0 {
        position.z = 0.0;
        if v.z < 0.0 {
            v.z = 0.0;
        }
    }
    let inv_dt = 1.0 / dt;
    Ok(RigidState {
        position,
        roll: 0.0,
        pitch: 0.0,
        yaw,
        linear_velocity: v,
        linear_acceleration: (v - v_old) * inv_dt,
        angular_velocity: w,
        angular_acceleration: (w - w_old) * inv_dt,
        time: state.time + dt,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn zero_action_from_rest_is_a_fixed_point() {
        let s = RigidState::at(Vec3::new(10.0, 20.0, 2.5), 0.3);
        let n = step(&s, &ActionCommand::ZERO, 0.1, &DynamicsParams::default()).unwrap();
        assert_eq!(n.position, s.position);
        assert_eq!(n.yaw, s.yaw);
        assert_eq!(n.linear_velocity, s.linear_velocity);
        assert_eq!(n.time, s.time + 0.1);
    }

    #[test]
    fn instant_forward_motion() {
        let p = DynamicsParams { tau: 0.0, ..Default::default() };
        let s = RigidState::at(Vec3::new(0.0, 0.0, 2.0), 0.0);
        let n = step(&s, &ActionCommand::new(1.0, 0.0, 0.0, 0.0), 0.1, &p).unwrap();
        let d = n.position - s.position;
        assert!((d.x - 0.5).abs() < 1e-12 && d.y.abs() < 1e-12 && d.z.abs() < 1e-12);
        assert!((n.linear_acceleration.x - 50.0).abs() < 1e-9);
    }

    #[test]
    fn instant_yaw_rate() {
        let p = DynamicsParams { tau: 0.0, ..Default::default() };
        let s = RigidState::at(Vec3::new(0.0, 0.0, 2.0), 0.0);
        let n = step(&s, &ActionCommand::new(0.0, 0.0, 0.0, 1.0), 0.1, &p).unwrap();
        assert!((n.yaw - 0.05 * PI).abs() < 1e-12);
    }

    #[test]
    fn lateral_is_to_the_right_of_heading() {
        let p = DynamicsParams { tau: 0.0, ..Default::default() };
        let s = RigidState::at(Vec3::new(0.0, 0.0, 2.0), 0.0);
        let n = step(&s, &ActionCommand::new(0.0, 1.0, 0.0, 0.0), 0.1, &p).unwrap();
        assert!(n.position.y > 0.0);
    }

    #[test]
    fn rejects_bad_inputs() {
        let s = RigidState::at(Vec3::new(0.0, 0.0, 2.0), 0.0);
        let p = DynamicsParams::default();
        assert!(matches!(step(&s, &ActionCommand::new(f64::NAN, 0.0, 0.0, 0.0), 0.1, &p), Err(WorldError::NonFinite(_))));
        assert!(matches!(step(&s, &ActionCommand::ZERO, 0.0, &p), Err(WorldError::BadTimeStep(_))));
        assert!(step(&s, &ActionCommand::ZERO, f64::INFINITY, &p).is_err());
        let mut bad = s;
        bad.position.x = f64::NAN;
        assert!(step(&bad, &ActionCommand::ZERO, 0.1, &p).is_err());
    }

    #[test]
    fn ground_clamp() {
        let p = DynamicsParams { tau: 0.0, ..Default::default() };
        let s = RigidState::at(Vec3::new(0.0, 0.0, 0.1), 0.0);
        let n = step(&s, &ActionCommand::new(0.0, 0.0, -1.0, 0.0), 0.1, &p).unwrap();
        assert_eq!(n.position.z, 0.0);
    }

    proptest! {
        #[test]
        fn velocities_stay_bounded(actions in proptest::collection::vec(proptest::array::uniform4(-1.0f64..=1.0), 1..60),
                                   tau in 0.0f64..1.0) {
            let p = DynamicsParams { tau, ..Default::default() };
            let mut s = RigidState::at(Vec3::new(50.0, 50.0, 3.0), 0.0);
            for a in actions {
                s = step(&s, &ActionCommand::from_array(a), 0.1, &p).unwrap();
                let v = s.linear_velocity;
                prop_assert!(v.x.abs() <= p.v_max && v.y.abs() <= p.v_max && v.z.abs() <= p.v_max);
                prop_assert!(s.angular_velocity.z.abs() <= p.omega_max);
                prop_assert!(s.position.z >= 0.0);
                prop_assert!((-PI..PI).contains(&s.yaw));
            }
        }

        #[test]
        fn step_is_deterministic(a in proptest::array::uniform4(-1.0f64..=1.0)) {
            let s = RigidState::at(Vec3::new(1.0, 2.0, 3.0), 0.5);
            let p = DynamicsParams::default();
            let x = step(&s, &ActionCommand::from_array(a), 0.1, &p).unwrap();
            let y = step(&s, &ActionCommand::from_array(a), 0.1, &p).unwrap();
            prop_assert_eq!(x, y);
        }
    }
}
