//! Closed-form model of the variable-length leaf-spring actuator.
//!
//! The spring is a stack of `n_pieces` leaves clamped by a roller-bearing
//! slider at position `x` along its length `L`. The output link is driven
//! through a crank (`lever_e`) and hinge (`lever_a`); moving the slider
//! shortens the bending portion and stiffens the output. With
//! `D(x) = (a/L + 1 - x/L)^3 - (a/L)^3` and `c = 3 E I e^2 / L^3`:
//!
//! ```text
//! tau(q, x) = -c cos q sin q / D
//! K(q, x)   =  c cos 2q / D                    = -d tau / dq
//! F(q, x)   = -(3 c / 2L) s^2 sin^2 q / D^2     = -dU / dx,   s = a/L + 1 - x/L
//! U(q, x)   =  c sin^2 q / (2 D)
//! ```
//!
//! `q > 0` is deflection away from the undeflected knee pose, in the
//! direction the knee flexes under load; the torque is the spring's reaction
//! on the output link and is negative for positive `q`.

use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::error::{Result, VllsaError};

/// Largest leaf-spring deflection the hardware admits.
pub const MAX_DEFLECTION: f64 = 32.0 * PI / 180.0;
/// Deflection at which `cos 2q` changes sign.
pub const ZERO_STIFFNESS_DEFLECTION: f64 = PI / 4.0;
/// Slider excursion cap as a fraction of the spring length.
pub const SLIDER_CAP_FRACTION: f64 = 0.95;
/// Upper bound on `lever_e / spring_length`.
pub const LEVER_E_FRACTION_LIMIT: f64 = 1.0 / 3.0;
/// Knee joint range on the hardware scale.
pub const KNEE_MIN: f64 = 50.0 * PI / 180.0;
pub const KNEE_MAX: f64 = 110.0 * PI / 180.0;

const ANGLE_SLACK: f64 = 1e-12;

pub fn deg(v: f64) -> f64 {
    v.to_radians()
}

/// Geometry and material of the leaf-spring stack and its output levers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LeafSpringParams {
    /// Pa
    pub youngs_modulus: f64,
    /// m^4
    pub area_moment: f64,
    /// m
    pub spring_length: f64,
    /// Crank length OB (m).
    pub lever_e: f64,
    /// Hinge length BC (m).
    pub lever_a: f64,
    pub n_pieces: u32,
    /// m
    pub width: f64,
    /// m
    pub thickness: f64,
}

impl Default for LeafSpringParams {
    /// Two 65Mn leaves, 150 x 18 x 2 mm, with lever arms fitted to the
    /// measured stiffness at q = 12 deg, x = 35 / 70 mm.
    fn default() -> Self {
        Self {
            youngs_modulus: 196e9,
            area_moment: 2.4e-11,
            spring_length: 0.15,
            lever_e: DEFAULT_LEVER_E,
            lever_a: DEFAULT_LEVER_A,
            n_pieces: 2,
            width: 0.018,
            thickness: 0.002,
        }
    }
}

/// Output of `calibrate_lever_arms` against the two bench anchors.
pub const DEFAULT_LEVER_E: f64 = 0.044_607_495_003_328_8;
pub const DEFAULT_LEVER_A: f64 = 0.024_858_675_626_958_4;

impl LeafSpringParams {
    /// Builds parameters from stack geometry, deriving the area moment.
    pub fn from_stack(
        youngs_modulus: f64,
        spring_length: f64,
        width: f64,
        thickness: f64,
        n_pieces: u32,
        lever_e: f64,
        lever_a: f64,
    ) -> Result<Self> {
        let params = Self {
            youngs_modulus,
            area_moment: stack_area_moment(n_pieces, width, thickness),
            spring_length,
            lever_e,
            lever_a,
            n_pieces,
            width,
            thickness,
        };
        params.validate()?;
        Ok(params)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("youngs_modulus", self.youngs_modulus),
            ("area_moment", self.area_moment),
            ("spring_length", self.spring_length),
            ("lever_e", self.lever_e),
            ("lever_a", self.lever_a),
            ("width", self.width),
            ("thickness", self.thickness),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(VllsaError::invalid(format!(
                    "{name} must be positive, got {v}"
                )));
            }
        }
        if self.n_pieces == 0 {
            return Err(VllsaError::invalid("n_pieces must be at least 1"));
        }
        if self.lever_e >= LEVER_E_FRACTION_LIMIT * self.spring_length {
            return Err(VllsaError::invalid(format!(
                "lever_e = {} m must stay below {:.3} * spring_length",
                self.lever_e, LEVER_E_FRACTION_LIMIT
            )));
        }
        let stack = stack_area_moment(self.n_pieces, self.width, self.thickness);
        if ((self.area_moment - stack) / stack).abs() > 1e-9 {
            return Err(VllsaError::invalid(format!(
                "area_moment {} disagrees with stack geometry {}",
                self.area_moment, stack
            )));
        }
        Ok(())
    }

    /// Same geometry with a different number of stacked leaves.
    pub fn with_pieces(&self, n_pieces: u32) -> Self {
        Self {
            n_pieces,
            area_moment: stack_area_moment(n_pieces, self.width, self.thickness),
            ..*self
        }
    }

    pub fn with_levers(&self, lever_e: f64, lever_a: f64) -> Self {
        Self {
            lever_e,
            lever_a,
            ..*self
        }
    }

    /// Largest admissible slider position.
    pub fn slider_cap(&self) -> f64 {
        SLIDER_CAP_FRACTION * self.spring_length
    }

    /// `3 E I e^2 / L^3`, N m.
    pub fn torque_scale(&self) -> f64 {
        3.0 * self.youngs_modulus * self.area_moment * self.lever_e.powi(2)
            / self.spring_length.powi(3)
    }

    fn effective_span(&self, x: f64) -> f64 {
        self.lever_a / self.spring_length + 1.0 - x / self.spring_length
    }

    /// `D(x)`; positive for every `x < L`.
    pub fn denominator(&self, x: f64) -> f64 {
        let ratio = self.lever_a / self.spring_length;
        self.effective_span(x).powi(3) - ratio.powi(3)
    }

    // The `*_at` evaluators take raw (q, x) and do no range checking. They
    // are total over q and any x with D(x) > 0.

    pub fn torque_at(&self, q: f64, x: f64) -> f64 {
        -self.torque_scale() * q.cos() * q.sin() / self.denominator(x)
    }

    pub fn stiffness_at(&self, q: f64, x: f64) -> f64 {
        self.torque_scale() * (2.0 * q).cos() / self.denominator(x)
    }

    pub fn force_at(&self, q: f64, x: f64) -> f64 {
        let d = self.denominator(x);
        -1.5 * self.torque_scale() / self.spring_length
            * self.effective_span(x).powi(2)
            * q.sin().powi(2)
            / (d * d)
    }

    pub fn energy_at(&self, q: f64, x: f64) -> f64 {
        0.5 * self.torque_scale() * q.sin().powi(2) / self.denominator(x)
    }

    /// `dK/dx` at fixed deflection.
    pub fn stiffness_slope_at(&self, q: f64, x: f64) -> f64 {
        let d = self.denominator(x);
        3.0 * self.torque_scale() / self.spring_length
            * self.effective_span(x).powi(2)
            * (2.0 * q).cos()
            / (d * d)
    }

    /// Slider position giving `target` stiffness at deflection `q`.
    pub fn slider_for_stiffness(&self, q: f64, target: f64) -> Result<f64> {
        let lo = 0.0;
        let hi = self.slider_cap();
        if !(self.stiffness_at(q, lo)..=self.stiffness_at(q, hi)).contains(&target) {
            return Err(VllsaError::domain(format!(
                "stiffness {target} N m/rad unreachable on [0, {hi}] m"
            )));
        }
        let (mut a, mut b) = (lo, hi);
        for _ in 0..200 {
            let mid = 0.5 * (a + b);
            if self.stiffness_at(q, mid) < target {
                a = mid;
            } else {
                b = mid;
            }
        }
        Ok(0.5 * (a + b))
    }
}

pub fn stack_area_moment(n_pieces: u32, width: f64, thickness: f64) -> f64 {
    n_pieces as f64 * width * thickness.powi(3) / 12.0
}

/// Deflection angle and slider position.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActuatorState {
    pub deflection_q: f64,
    pub slider_x: f64,
}

impl ActuatorState {
    pub fn new(deflection_q: f64, slider_x: f64) -> Result<Self> {
        if !(-ANGLE_SLACK..=MAX_DEFLECTION + ANGLE_SLACK).contains(&deflection_q) {
            return Err(VllsaError::domain(format!(
                "deflection {:.4} deg outside [0, 32] deg",
                deflection_q.to_degrees()
            )));
        }
        if !(slider_x.is_finite() && slider_x >= 0.0) {
            return Err(VllsaError::domain(format!(
                "slider position {slider_x} m is negative"
            )));
        }
        Ok(Self {
            deflection_q,
            slider_x,
        })
    }
}

fn check_state(params: &LeafSpringParams, state: &ActuatorState) -> Result<()> {
    let q = state.deflection_q;
    if !(-ANGLE_SLACK..=MAX_DEFLECTION + ANGLE_SLACK).contains(&q) {
        return Err(VllsaError::domain(format!(
            "deflection {:.4} deg outside [0, 32] deg",
            q.to_degrees()
        )));
    }
    let cap = params.slider_cap();
    if !(0.0..cap).contains(&state.slider_x) {
        return Err(VllsaError::domain(format!(
            "slider position {} m outside [0, {cap}) m",
            state.slider_x
        )));
    }
    if params.denominator(state.slider_x) <= 0.0 {
        return Err(VllsaError::domain("non-positive stiffness denominator"));
    }
    Ok(())
}

/// Spring reaction torque on the output link, N m.
pub fn output_torque(params: &LeafSpringParams, state: &ActuatorState) -> Result<f64> {
    check_state(params, state)?;
    Ok(params.torque_at(state.deflection_q, state.slider_x))
}

/// Rotational stiffness at the output link, N m/rad.
pub fn output_stiffness(params: &LeafSpringParams, state: &ActuatorState) -> Result<f64> {
    check_state(params, state)?;
    Ok(params.stiffness_at(state.deflection_q, state.slider_x))
}

/// Force the spring exerts on the slider along its travel, N.
pub fn holding_force(params: &LeafSpringParams, state: &ActuatorState) -> Result<f64> {
    check_state(params, state)?;
    Ok(params.force_at(state.deflection_q, state.slider_x))
}

/// Elastic energy stored in the spring, J.
pub fn elastic_energy(params: &LeafSpringParams, state: &ActuatorState) -> Result<f64> {
    check_state(params, state)?;
    Ok(params.energy_at(state.deflection_q, state.slider_x))
}

/// Stiffness at the slider's home position and at `x_max`.
///
/// Accepts `q` up to 45 deg, where the stiffness vanishes.
pub fn stiffness_bounds(params: &LeafSpringParams, q: f64, x_max: f64) -> Result<(f64, f64)> {
    if !(-ANGLE_SLACK..=ZERO_STIFFNESS_DEFLECTION + ANGLE_SLACK).contains(&q) {
        return Err(VllsaError::domain(format!(
            "deflection {:.4} deg outside [0, 45] deg",
            q.to_degrees()
        )));
    }
    if !(0.0..params.spring_length).contains(&x_max) {
        return Err(VllsaError::domain(format!(
            "x_max = {x_max} m must lie in [0, L = {})",
            params.spring_length
        )));
    }
    let q = q.clamp(0.0, ZERO_STIFFNESS_DEFLECTION);
    let bound = |x: f64| {
        let k = params.stiffness_at(q, x);
        // cos(pi/2) is 6e-17 rather than 0
        if (q - ZERO_STIFFNESS_DEFLECTION).abs() < ANGLE_SLACK {
            0.0
        } else {
            k
        }
    };
    Ok((bound(0.0), bound(x_max)))
}

/// Ball-screw drive of the slider.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BallScrewDrive {
    /// Slider travel per motor revolution, m/rev.
    pub lead_p: f64,
    /// rpm
    pub motor_speed_n: f64,
    pub efficiency_eta: f64,
    /// N m
    pub motor_torque_ts: f64,
}

/// No-load electrical power measured while driving the slider at 2000 rpm.
pub const MEASURED_BASELINE_POWER: f64 = 23.48;
const NOMINAL_STIFFNESS_MOTOR_RPM: f64 = 2000.0;
const NOMINAL_SCREW_EFFICIENCY: f64 = 0.9;

impl Default for BallScrewDrive {
    fn default() -> Self {
        Self {
            lead_p: 0.002,
            motor_speed_n: NOMINAL_STIFFNESS_MOTOR_RPM,
            efficiency_eta: NOMINAL_SCREW_EFFICIENCY,
            motor_torque_ts: 0.0,
        }
        .with_baseline_power(MEASURED_BASELINE_POWER)
    }
}

impl BallScrewDrive {
    pub fn validate(&self) -> Result<()> {
        if !(self.lead_p > 0.0) {
            return Err(VllsaError::invalid("ball-screw lead must be positive"));
        }
        if !(self.motor_speed_n >= 0.0) {
            return Err(VllsaError::invalid("motor speed must be non-negative"));
        }
        if !(self.efficiency_eta > 0.0 && self.efficiency_eta <= 1.0) {
            return Err(VllsaError::invalid("efficiency must lie in (0, 1]"));
        }
        if !(self.motor_torque_ts >= 0.0) {
            return Err(VllsaError::invalid("motor torque must be non-negative"));
        }
        Ok(())
    }

    /// Slider speed `n p / 60`, m/s.
    pub fn slider_speed(&self) -> f64 {
        self.motor_speed_n * self.lead_p / 60.0
    }

    pub fn with_speed(&self, motor_speed_n: f64) -> Self {
        Self {
            motor_speed_n,
            ..*self
        }
    }

    /// Product `eta * tau_s` that reproduces `power` at the current speed.
    pub fn torque_product_for(&self, power: f64) -> f64 {
        power * 30.0 / (PI * self.motor_speed_n)
    }

    /// Sets the motor torque so that the no-load power equals `power`,
    /// keeping the configured efficiency.
    pub fn with_baseline_power(&self, power: f64) -> Self {
        Self {
            motor_torque_ts: self.torque_product_for(power) / self.efficiency_eta,
            ..*self
        }
    }
}

/// No-load slider drive power `pi eta n tau_s / 30`, W.
pub fn baseline_power(drive: &BallScrewDrive) -> f64 {
    PI * drive.efficiency_eta * drive.motor_speed_n * drive.motor_torque_ts / 30.0
}

/// Rate of stiffness change with the deflection held fixed, N m/(rad s).
pub fn modulation_speed(
    params: &LeafSpringParams,
    state: &ActuatorState,
    drive: &BallScrewDrive,
) -> Result<f64> {
    check_state(params, state)?;
    Ok(params.stiffness_slope_at(state.deflection_q, state.slider_x) * drive.slider_speed())
}

/// Mechanical power against the spring while the slider moves, `F x_dot`, W.
///
/// Non-positive: the spring pushes the slider back toward its home position.
pub fn holding_power(
    params: &LeafSpringParams,
    state: &ActuatorState,
    drive: &BallScrewDrive,
) -> Result<f64> {
    Ok(holding_force(params, state)? * drive.slider_speed())
}

/// Bounds on the total stiffness-modulation power over `x in [0, x_max]`.
pub fn total_power_bounds(
    params: &LeafSpringParams,
    q_max: f64,
    x_max: f64,
    drive: &BallScrewDrive,
) -> Result<(f64, f64)> {
    if !(0.0..params.spring_length).contains(&x_max) {
        return Err(VllsaError::domain(format!(
            "x_max = {x_max} m must lie in [0, L = {})",
            params.spring_length
        )));
    }
    let low = baseline_power(drive);
    let high = low + drive.slider_speed() * params.force_at(q_max, x_max).abs();
    Ok((low, high))
}

/// Gear set between the spring output and the knee joint.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GearCoupling {
    pub ratio_i: f64,
    /// Knee angle with the spring undeflected, rad.
    pub theta0: f64,
}

impl Default for GearCoupling {
    fn default() -> Self {
        Self {
            ratio_i: 1.87,
            theta0: deg(50.0),
        }
    }
}

impl GearCoupling {
    pub fn validate(&self) -> Result<()> {
        if !(self.ratio_i > 0.0 && self.ratio_i.is_finite()) {
            return Err(VllsaError::invalid("gear ratio must be positive"));
        }
        Ok(())
    }

    /// Spring deflection for any knee angle, without range checks.
    pub fn deflection_unchecked(&self, theta: f64) -> f64 {
        (theta - self.theta0) / self.ratio_i
    }
}

fn check_knee(theta: f64) -> Result<()> {
    if (KNEE_MIN - ANGLE_SLACK..=KNEE_MAX + ANGLE_SLACK).contains(&theta) {
        Ok(())
    } else {
        Err(VllsaError::KneeRange {
            angle_deg: theta.to_degrees(),
            min_deg: KNEE_MIN.to_degrees(),
            max_deg: KNEE_MAX.to_degrees(),
        })
    }
}

/// `theta = theta0 + q i`.
pub fn knee_angle_from_deflection(gear: &GearCoupling, q: f64) -> Result<f64> {
    let theta = gear.theta0 + q * gear.ratio_i;
    check_knee(theta)?;
    Ok(theta)
}

pub fn deflection_from_knee_angle(gear: &GearCoupling, theta: f64) -> Result<f64> {
    check_knee(theta)?;
    Ok(gear.deflection_unchecked(theta))
}

/// Knee torque delivered through the gear set, `tau / i`.
pub fn knee_torque(gear: &GearCoupling, tau_spring: f64) -> f64 {
    tau_spring / gear.ratio_i
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpringSelection {
    pub n_pieces: u32,
    /// Peak spring output torque for the selected stack, N m.
    pub peak_torque: f64,
    /// False when even a single leaf exceeds the budget.
    pub within_budget: bool,
}

/// Largest leaf count whose peak spring output torque over the task
/// envelope stays within `torque_budget`.
///
/// The envelope is `q_range x x_range`; the torque magnitude grows with
/// both `q` (below 45 deg) and `x`, so the peak is found by a dense sweep
/// rather than assumed at a corner.
pub fn spring_count_for_task(
    geometry: &LeafSpringParams,
    torque_budget: f64,
    q_range: (f64, f64),
    x_range: (f64, f64),
    max_pieces: u32,
) -> Result<SpringSelection> {
    if !(torque_budget > 0.0) {
        return Err(VllsaError::invalid("torque budget must be positive"));
    }
    if max_pieces == 0 {
        return Err(VllsaError::invalid("max_pieces must be at least 1"));
    }
    const SAMPLES: usize = 64;
    let peak_for = |n: u32| -> f64 {
        let p = geometry.with_pieces(n);
        let mut peak = 0.0_f64;
        for i in 0..=SAMPLES {
            let q = q_range.0 + (q_range.1 - q_range.0) * i as f64 / SAMPLES as f64;
            for j in 0..=SAMPLES {
                let x = x_range.0 + (x_range.1 - x_range.0) * j as f64 / SAMPLES as f64;
                peak = peak.max(p.torque_at(q, x).abs());
            }
        }
        peak
    };
    let mut best: Option<(u32, f64)> = None;
    for n in 1..=max_pieces {
        let peak = peak_for(n);
        if peak <= torque_budget {
            best = Some((n, peak));
        } else {
            break;
        }
    }
    Ok(match best {
        Some((n_pieces, peak_torque)) => SpringSelection {
            n_pieces,
            peak_torque,
            within_budget: true,
        },
        None => SpringSelection {
            n_pieces: 1,
            peak_torque: peak_for(1),
            within_budget: false,
        },
    })
}
