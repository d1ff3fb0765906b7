//! Vehicle kinematics, constant time-headway spacing and the error-state
//! model used by the follower MPC.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Physical and policy parameters of one vehicle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VehicleParams {
    /// Vehicle length (m).
    pub length: f64,
    /// Standstill gap of the spacing policy (m).
    pub standstill_gap: f64,
    /// Time gap of the spacing policy (s).
    pub time_gap: f64,
    /// Driveline bandwidth (1/s).
    pub driveline: f64,
    pub accel_min: f64,
    pub accel_max: f64,
    pub input_min: f64,
    pub input_max: f64,
    /// Road speed cap (m/s).
    pub speed_max: f64,
    /// Below this speed emergency braking is not enforced (m/s).
    pub brake_release_speed: f64,
    /// Gap-error margin that triggers emergency braking (m).
    pub hard_brake_margin: f64,
}

impl Default for VehicleParams {
    fn default() -> Self {
        Self {
            length: 5.0,
            standstill_gap: 2.0,
            time_gap: 1.0,
            driveline: 10.0,
            accel_min: -4.0,
            accel_max: 3.0,
            input_min: -4.0,
            input_max: 3.0,
            speed_max: 30.0,
            brake_release_speed: 1.0,
            hard_brake_margin: 1.0,
        }
    }
}

impl VehicleParams {
    pub fn with_time_gap(mut self, tau: f64) -> Self {
        self.time_gap = tau;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::InvalidParams(what.to_string()));
        let positive = [
            ("length", self.length),
            ("standstill_gap", self.standstill_gap),
            ("time_gap", self.time_gap),
            ("driveline", self.driveline),
            ("speed_max", self.speed_max),
            ("brake_release_speed", self.brake_release_speed),
            ("hard_brake_margin", self.hard_brake_margin),
        ];
        for (name, value) in positive {
            if !(value.is_finite() && value > 0.0) {
                return bad(&format!("{name} must be positive and finite, got {value}"));
            }
        }
        if !(self.accel_min < 0.0 && self.accel_max > 0.0) {
            return bad("acceleration bounds must satisfy a_min < 0 < a_max");
        }
        if !(self.input_min < 0.0 && self.input_max > 0.0) {
            return bad("input bounds must satisfy u_min < 0 < u_max");
        }
        if self.brake_release_speed >= self.speed_max {
            return bad("brake_release_speed must be below speed_max");
        }
        Ok(())
    }

    /// Total input range `u_max - u_min`.
    pub fn input_span(&self) -> f64 {
        self.input_max - self.input_min
    }
}

/// Position of the rear bumper, speed and acceleration.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct KinematicState {
    pub x: f64,
    pub v: f64,
    pub a: f64,
}

impl KinematicState {
    pub fn new(x: f64, v: f64, a: f64) -> Self {
        Self { x, v, a }
    }
}

/// Regulation state of a follower relative to its predecessor.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ErrorState {
    /// Actual gap minus desired gap (m).
    pub gap_error: f64,
    /// Predecessor speed minus ego speed (m/s).
    pub speed_error: f64,
    /// Ego acceleration (m/s²).
    pub accel: f64,
}

impl ErrorState {
    pub fn new(gap_error: f64, speed_error: f64, accel: f64) -> Self {
        Self {
            gap_error,
            speed_error,
            accel,
        }
    }

    pub fn to_vector(self) -> Vector3<f64> {
        Vector3::new(self.gap_error, self.speed_error, self.accel)
    }

    pub fn from_vector(v: &Vector3<f64>) -> Self {
        Self::new(v[0], v[1], v[2])
    }

    pub fn is_finite(&self) -> bool {
        self.gap_error.is_finite() && self.speed_error.is_finite() && self.accel.is_finite()
    }
}

/// Forward-Euler discretization of the error-state dynamics.
///
/// `x(k+1) = a·x(k) + b·u(k) + d·a_pred(k) + e·η(k)`
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteSystem {
    pub a: Matrix3<f64>,
    pub b: Vector3<f64>,
    pub d: Vector3<f64>,
    /// Injection column of the predecessor speed disturbance (no `t_s` factor).
    pub e: Vector3<f64>,
    pub ts: f64,
}

impl DiscreteSystem {
    pub fn propagate(&self, x: ErrorState, u: f64, pred_accel: f64, eta: f64) -> ErrorState {
        let next = self.a * x.to_vector() + self.b * u + self.d * pred_accel + self.e * eta;
        ErrorState::from_vector(&next)
    }
}

/// Desired gap of the constant time-headway policy.
pub fn desired_gap(v: f64, params: &VehicleParams) -> f64 {
    params.time_gap * v + params.standstill_gap
}

/// Bumper-to-bumper distance from the ego vehicle to its predecessor.
pub fn gap(ego: &KinematicState, pred: &KinematicState, pred_len: f64) -> f64 {
    pred.x - ego.x - pred_len
}

/// Error state of `ego` following `pred`. Fails with [`Error::Collision`]
/// when the vehicles touch or overlap.
pub fn error_state(
    ego: &KinematicState,
    pred: &KinematicState,
    pred_len: f64,
    params: &VehicleParams,
) -> Result<ErrorState> {
    let d = gap(ego, pred, pred_len);
    if d <= 0.0 {
        return Err(Error::Collision { gap: d });
    }
    Ok(ErrorState {
        gap_error: d - desired_gap(ego.v, params),
        speed_error: pred.v - ego.v,
        accel: ego.a,
    })
}

/// Exact matrices of the discretized follower model for sampling time `ts`.
///
/// Requires `0 <= ts·f <= 1` so the driveline row stays non-oscillatory.
pub fn discrete_system(params: &VehicleParams, ts: f64) -> Result<DiscreteSystem> {
    let f = params.driveline;
    if !ts.is_finite() || ts < 0.0 || ts * f > 1.0 + 1e-12 {
        return Err(Error::InvalidSampleTime { ts, driveline: f });
    }
    let tau = params.time_gap;
    #[rustfmt::skip]
    let a = Matrix3::new(
        1.0, ts,  -tau * ts,
        0.0, 1.0, -ts,
        0.0, 0.0, 1.0 - ts * f,
    );
    Ok(DiscreteSystem {
        a,
        b: Vector3::new(0.0, 0.0, ts * f),
        d: Vector3::new(0.0, ts, 0.0),
        e: Vector3::new(0.0, 1.0, 0.0),
        ts,
    })
}

/// Advance the kinematic plant one sample with the same forward-Euler scheme
/// as the controller model. Speed never goes negative; a vehicle that comes
/// to rest cannot keep a negative acceleration.
pub fn step_plant(
    state: &KinematicState,
    u: f64,
    params: &VehicleParams,
    ts: f64,
) -> KinematicState {
    let f = params.driveline;
    let x = state.x + ts * state.v;
    let v_raw = state.v + ts * state.a;
    let mut a = (state.a + ts * (-f * state.a + f * u)).clamp(params.accel_min, params.accel_max);
    let v = if v_raw <= 0.0 {
        if a < 0.0 {
            a = 0.0;
        }
        0.0
    } else {
        v_raw
    };
    KinematicState { x, v, a }
}
