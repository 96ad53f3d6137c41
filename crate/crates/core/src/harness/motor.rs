//! Joint motor electrical model used for current and energy proxies.

use serde::{Deserialize, Serialize};

use crate::error::{Result, VllsaError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MotorModel {
    /// Motor-side torque constant, N m/A.
    pub torque_constant: f64,
    /// Phase resistance, ohm.
    pub winding_resistance: f64,
    pub gear_ratio: f64,
    pub gear_efficiency: f64,
}

impl Default for MotorModel {
    fn default() -> Self {
        Self {
            torque_constant: 0.1,
            winding_resistance: 0.3,
            gear_ratio: 6.0,
            gear_efficiency: 0.9,
        }
    }
}

impl MotorModel {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("torque_constant", self.torque_constant),
            ("winding_resistance", self.winding_resistance),
            ("gear_ratio", self.gear_ratio),
            ("gear_efficiency", self.gear_efficiency),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(VllsaError::invalid(format!(
                    "motor {name} must be positive"
                )));
            }
        }
        if self.gear_efficiency > 1.0 {
            return Err(VllsaError::invalid("gear efficiency must not exceed 1"));
        }
        Ok(())
    }

    /// Winding current for a joint torque, A.
    pub fn current(&self, joint_torque: f64) -> f64 {
        joint_torque / (self.torque_constant * self.gear_ratio)
    }

    /// Electrical power for a joint torque and joint speed, W. Negative
    /// values are regenerated power.
    pub fn electrical_power(&self, joint_torque: f64, joint_speed: f64) -> f64 {
        let mech = joint_torque * joint_speed;
        let shaft = if mech >= 0.0 {
            mech / self.gear_efficiency
        } else {
            mech * self.gear_efficiency
        };
        let i = self.current(joint_torque);
        shaft + i * i * self.winding_resistance
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn electrical_exceeds_mechanical_for_positive_work() {
        let m = MotorModel::default();
        for (tau, w) in [(5.0, 2.0), (20.0, 0.1), (1.0, 30.0)] {
            assert!(m.electrical_power(tau, w) >= tau * w);
        }
    }

    #[test]
    fn stall_power_is_copper_loss() {
        let m = MotorModel::default();
        let i = m.current(6.0);
        assert_relative_eq!(i, 10.0, max_relative = 1e-12);
        assert_relative_eq!(m.electrical_power(6.0, 0.0), 30.0, max_relative = 1e-12);
    }

    #[test]
    fn rejects_bad_efficiency() {
        let m = MotorModel {
            gear_efficiency: 1.2,
            ..MotorModel::default()
        };
        assert!(m.validate().is_err());
    }
}
