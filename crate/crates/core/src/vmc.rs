//! Virtual model control: a virtual spring-damper between hip and foot,
//! mapped to joint torques through the Jacobian transpose, with the knee
//! torque shared between the motor and the leaf-spring actuator.

use nalgebra::{Vector2, Vector4};
use serde::{Deserialize, Serialize};

use crate::error::{Result, VllsaError};
use crate::leg::{self, LegParams, LegState, Matrix2x4, HIP, KNEE};

/// Diagonal virtual stiffness and damping on `[d, h]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VmcGains {
    pub kp: [f64; 2],
    pub kd: [f64; 2],
}

impl VmcGains {
    pub fn new(kp: [f64; 2], kd: [f64; 2]) -> Self {
        Self { kp, kd }
    }

    pub fn validate(&self) -> Result<()> {
        if self
            .kp
            .iter()
            .chain(self.kd.iter())
            .any(|g| !(g.is_finite() && *g >= 0.0))
        {
            return Err(VllsaError::invalid(format!(
                "VMC gains must be non-negative: {self:?}"
            )));
        }
        Ok(())
    }

    pub fn scaled_kp(&self, factor: f64) -> Self {
        Self {
            kp: [self.kp[0] * factor, self.kp[1] * factor],
            kd: self.kd,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VirtualTarget {
    pub r_d: Vector2<f64>,
    pub r_dot_d: Vector2<f64>,
}

impl VirtualTarget {
    /// Position target with zero desired rate.
    pub fn at(d: f64, h: f64) -> Self {
        Self {
            r_d: Vector2::new(d, h),
            r_dot_d: Vector2::zeros(),
        }
    }

    pub fn validate(&self, params: &LegParams) -> Result<()> {
        if !(self.r_d.norm() < params.max_reach()) {
            return Err(VllsaError::invalid(format!(
                "target ({:.3}, {:.3}) m outside the reachable workspace",
                self.r_d.x, self.r_d.y
            )));
        }
        Ok(())
    }
}

/// Assumed ground reaction on the foot, world frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContactEstimate {
    pub force: Vector2<f64>,
}

impl ContactEstimate {
    /// Whole weight carried by the foot.
    pub fn stance(params: &LegParams) -> Self {
        Self {
            force: Vector2::new(0.0, params.total_mass * params.gravity),
        }
    }

    pub fn flight() -> Self {
        Self {
            force: Vector2::zeros(),
        }
    }
}

pub fn virtual_force(
    gains: &VmcGains,
    target: &VirtualTarget,
    r: &Vector2<f64>,
    r_dot: &Vector2<f64>,
) -> Vector2<f64> {
    let e = target.r_d - r;
    let ed = target.r_dot_d - r_dot;
    Vector2::new(
        gains.kp[0] * e.x + gains.kd[0] * ed.x,
        gains.kp[1] * e.y + gains.kd[1] * ed.y,
    )
}

/// Joint rows of `H + J_v^T F_v - J_c^T F_c_hat`.
pub fn joint_torques(
    bias: &Vector4<f64>,
    j_v: &Matrix2x4,
    j_c: &Matrix2x4,
    f_v: &Vector2<f64>,
    estimate: &ContactEstimate,
) -> [f64; 2] {
    let g = bias + j_v.transpose() * f_v - j_c.transpose() * estimate.force;
    [g[HIP], g[KNEE]]
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TorqueCommand {
    /// Desired joint torques before the spring split.
    pub joint: [f64; 2],
    /// Motor torques after the split and saturation.
    pub motor: [f64; 2],
    /// Leaf-spring share at the knee.
    pub spring_knee: f64,
    pub saturated: [bool; 2],
}

/// Subtracts the spring share from the knee and clamps each motor to its
/// limit.
pub fn motor_torques(joint: [f64; 2], spring_knee: f64, limits: [f64; 2]) -> TorqueCommand {
    let raw = [joint[0], joint[1] - spring_knee];
    let mut motor = [0.0; 2];
    let mut saturated = [false; 2];
    for k in 0..2 {
        motor[k] = raw[k].clamp(-limits[k], limits[k]);
        saturated[k] = motor[k] != raw[k];
    }
    TorqueCommand {
        joint,
        motor,
        spring_knee,
        saturated,
    }
}

/// Full control law evaluated at the current state.
pub fn control(
    params: &LegParams,
    state: &LegState,
    gains: &VmcGains,
    target: &VirtualTarget,
    estimate: &ContactEstimate,
    spring_knee: f64,
) -> TorqueCommand {
    let kin = leg::forward_kinematics(params, state);
    let jac = leg::jacobians(params, state);
    let bias = leg::bias_terms(params, state);
    let f_v = virtual_force(gains, target, &kin.r, &kin.r_dot);
    let joint = joint_torques(&bias, &jac.virtual_point, &jac.contact, &f_v, estimate);
    motor_torques(
        joint,
        spring_knee,
        [params.hip_torque_limit, params.knee_torque_limit],
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::leg::{ContactPhase, BASE_Z};
    use approx::assert_relative_eq;

    #[test]
    fn zero_error_gives_zero_force() {
        let g = VmcGains::new([100.0, 2000.0], [10.0, 20.0]);
        let t = VirtualTarget::at(0.05, 0.4);
        let f = virtual_force(&g, &t, &t.r_d, &t.r_dot_d);
        assert_eq!(f, Vector2::zeros());
    }

    #[test]
    fn proportional_arithmetic_and_linearity() {
        let g = VmcGains::new([100.0, 2000.0], [10.0, 20.0]);
        let t = VirtualTarget::at(0.01, 0.51);
        let r = Vector2::new(0.0, 0.5);
        let f = virtual_force(&g, &t, &r, &Vector2::zeros());
        assert_relative_eq!(f, Vector2::new(1.0, 20.0), max_relative = 1e-12);
        let f2 = virtual_force(&g.scaled_kp(2.0), &t, &r, &Vector2::zeros());
        assert_relative_eq!(f2, 2.0 * f, max_relative = 1e-15);
    }

    #[test]
    fn stance_substitution() {
        let p = LegParams::default();
        let s = LegState::standing(&p, 0.0, 0.0, 0.3).unwrap();
        let jac = leg::jacobians(&p, &s);
        let h = leg::bias_terms(&p, &s);
        let est = ContactEstimate::stance(&p);
        let tau = joint_torques(
            &h,
            &jac.virtual_point,
            &jac.contact,
            &Vector2::zeros(),
            &est,
        );
        let expect = h - jac.contact.transpose() * est.force;
        assert_eq!(tau, [expect[HIP], expect[KNEE]]);
    }

    #[test]
    fn flight_substitution() {
        let p = LegParams::default();
        let mut s = LegState::standing(&p, 0.0, 0.0, 0.3).unwrap();
        s.phase = ContactPhase::Flight;
        let jac = leg::jacobians(&p, &s);
        let h = leg::bias_terms(&p, &s);
        let f = Vector2::new(0.0, 12.0);
        let tau = joint_torques(
            &h,
            &jac.virtual_point,
            &jac.contact,
            &f,
            &ContactEstimate::flight(),
        );
        let expect = h + jac.virtual_point.transpose() * f;
        assert_eq!(tau, [expect[HIP], expect[KNEE]]);
    }

    #[test]
    fn spring_split() {
        let c = motor_torques([1.0, 10.0], 4.0, [35.0, 35.0]);
        assert_eq!(c.motor, [1.0, 6.0]);
        assert_eq!(c.motor[1] + c.spring_knee, c.joint[1]);
        let d = motor_torques([1.0, 10.0], 0.0, [35.0, 35.0]);
        assert_eq!(d.motor, d.joint);
        let sat = motor_torques([50.0, -2.0], 40.0, [35.0, 35.0]);
        assert_eq!(sat.motor, [35.0, -35.0]);
        assert_eq!(sat.saturated, [true, true]);
    }

    #[test]
    fn controller_ignores_base_position() {
        let p = LegParams::default();
        let s = LegState::standing(&p, 0.0, 0.02, 0.3).unwrap();
        let mut moved = s;
        moved.pos[BASE_Z] += 0.4;
        moved.pos[0] -= 1.3;
        let g = VmcGains::new([100.0, 2000.0], [10.0, 20.0]);
        let t = VirtualTarget::at(0.0, 0.5);
        let est = ContactEstimate::stance(&p);
        let a = control(&p, &s, &g, &t, &est, 1.5);
        let b = control(&p, &moved, &g, &t, &est, 1.5);
        assert_eq!(a, b);
    }

    #[test]
    fn closed_loop_matches_virtual_dynamics() {
        // with the contact force equal to the estimate, the stance
        // accelerations satisfy M q_dd = J_v^T F_v + J_c^T (F_c - F_hat)
        let p = LegParams {
            hip_torque_limit: 35.0,
            knee_torque_limit: 35.0,
            ..LegParams::default()
        };
        let mut s = LegState::standing(&p, 0.0, 0.01, 0.32).unwrap();
        s.vel = Vector4::new(0.0, 0.05, 0.1, -0.1);
        let jac = leg::jacobians(&p, &s);
        s.vel -= {
            // remove foot velocity component in the base coordinates
            let foot_vel = jac.contact * s.vel;
            Vector4::new(foot_vel.x, foot_vel.y, 0.0, 0.0)
        };
        let g = VmcGains::new([100.0, 200.0], [10.0, 10.0]);
        let t = VirtualTarget::at(0.0, 0.35);
        let est = ContactEstimate::stance(&p);
        let cmd = control(&p, &s, &g, &t, &est, 0.0);
        assert_eq!(cmd.saturated, [false, false]);
        let (acc, fc) = leg::stance_dynamics(&p, &s, cmd.motor, 0.0).unwrap();
        let kin = leg::forward_kinematics(&p, &s);
        let f_v = virtual_force(&g, &t, &kin.r, &kin.r_dot);
        let m = leg::mass_matrix(&p, &s);
        let h = leg::bias_terms(&p, &s);
        // joint rows: M q_dd + H = tau; tau from the control law
        let lhs = m * acc + h - jac.contact.transpose() * fc;
        let tau_law = h + jac.virtual_point.transpose() * f_v - jac.contact.transpose() * est.force;
        assert_relative_eq!(lhs[HIP], tau_law[HIP], max_relative = 1e-8, epsilon = 1e-9);
        assert_relative_eq!(
            lhs[KNEE],
            tau_law[KNEE],
            max_relative = 1e-8,
            epsilon = 1e-9
        );
    }

    #[test]
    fn stiff_spring_drives_motor_negative_at_crouch() {
        use crate::actuator::{GearCoupling, LeafSpringParams};
        use crate::leg::SpringLoad;
        let p = LegParams::default();
        let s = LegState::standing(&p, 0.0, 0.0, 0.25).unwrap();
        let spring = LeafSpringParams::default();
        let x = spring.slider_for_stiffness(0.0, 65.0).unwrap();
        let load = SpringLoad {
            spring,
            gear: GearCoupling::default(),
            slider_x: x,
        };
        let k = load.knee_torque(s.pos[KNEE]);
        let g = VmcGains::new([300.0, 300.0], [10.0, 10.0]);
        let t = VirtualTarget::at(0.0, 0.25);
        let cmd = control(&p, &s, &g, &t, &ContactEstimate::stance(&p), k);
        // knee extension is the negative direction
        assert!(cmd.joint[1] < 0.0);
        assert!(k < cmd.joint[1]);
        assert!(cmd.motor[1] > 0.0);
    }
}
