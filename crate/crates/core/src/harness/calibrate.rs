//! Lever-arm calibration against measured stiffness, and the drive torque
//! product from the measured no-load power.

use levenberg_marquardt::{LeastSquaresProblem, LevenbergMarquardt};
use nalgebra::{storage::Owned, DVector, Dyn, OMatrix, Vector2, U2};
use serde::{Deserialize, Serialize};

use crate::actuator::{BallScrewDrive, LeafSpringParams, LEVER_E_FRACTION_LIMIT};
use crate::error::{Result, VllsaError};

/// Measured stiffness `stiffness` (N m/rad) at deflection `q` (rad) and
/// slider position `x` (m).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StiffnessAnchor {
    pub q: f64,
    pub x: f64,
    pub stiffness: f64,
}

/// Bench stiffness at q = 12 deg with the slider at 35 and 70 mm.
pub fn bench_anchors() -> Vec<StiffnessAnchor> {
    let q = 12f64.to_radians();
    vec![
        StiffnessAnchor {
            q,
            x: 0.035,
            stiffness: 9.43,
        },
        StiffnessAnchor {
            q,
            x: 0.070,
            stiffness: 22.55,
        },
    ]
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AnchorFit {
    pub anchor: StiffnessAnchor,
    pub model: f64,
    /// `model / measured - 1`.
    pub relative_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LeverFit {
    pub lever_e: f64,
    pub lever_a: f64,
    pub anchors: Vec<AnchorFit>,
    pub evaluations: usize,
}

impl LeverFit {
    pub fn max_relative_error(&self) -> f64 {
        self.anchors
            .iter()
            .map(|a| a.relative_error.abs())
            .fold(0.0, f64::max)
    }
}

/// Relative stiffness residuals in the log-parameters `[ln e, ln a]`.
struct LeverProblem<'a> {
    base: LeafSpringParams,
    anchors: &'a [StiffnessAnchor],
    p: Vector2<f64>,
}

impl LeverProblem<'_> {
    fn params_at(&self, p: &Vector2<f64>) -> LeafSpringParams {
        self.base.with_levers(p[0].exp(), p[1].exp())
    }
}

impl LeastSquaresProblem<f64, Dyn, U2> for LeverProblem<'_> {
    type ResidualStorage = Owned<f64, Dyn>;
    type JacobianStorage = Owned<f64, Dyn, U2>;
    type ParameterStorage = Owned<f64, U2>;

    fn set_params(&mut self, p: &Vector2<f64>) {
        self.p = *p;
    }

    fn params(&self) -> Vector2<f64> {
        self.p
    }

    fn residuals(&self) -> Option<DVector<f64>> {
        let s = self.params_at(&self.p);
        let r = DVector::from_iterator(
            self.anchors.len(),
            self.anchors
                .iter()
                .map(|a| s.stiffness_at(a.q, a.x) / a.stiffness - 1.0),
        );
        r.iter().all(|v| v.is_finite()).then_some(r)
    }

    fn jacobian(&self) -> Option<OMatrix<f64, Dyn, U2>> {
        let s = self.params_at(&self.p);
        let l = s.spring_length;
        let a = s.lever_a;
        let mut j = OMatrix::<f64, Dyn, U2>::zeros(self.anchors.len());
        for (row, an) in self.anchors.iter().enumerate() {
            let k = s.stiffness_at(an.q, an.x) / an.stiffness;
            let d = s.denominator(an.x);
            let span = a / l + 1.0 - an.x / l;
            let dd_da = 3.0 / l * (span * span - (a / l).powi(2));
            j[(row, 0)] = 2.0 * k;
            j[(row, 1)] = -k / d * dd_da * a;
        }
        j.iter().all(|v| v.is_finite()).then_some(j)
    }
}

/// Crank length giving the best relative fit for a fixed hinge length.
fn lever_e_for(base: &LeafSpringParams, anchors: &[StiffnessAnchor], lever_a: f64) -> f64 {
    let unit = base.with_levers(1.0, lever_a);
    let g: Vec<f64> = anchors
        .iter()
        .map(|a| unit.stiffness_at(a.q, a.x) / a.stiffness)
        .collect();
    let e2 = g.iter().sum::<f64>() / g.iter().map(|v| v * v).sum::<f64>();
    e2.max(1e-12).sqrt()
}

/// Least-squares fit of the crank and hinge lengths to stiffness anchors.
pub fn calibrate_lever_arms(
    base: &LeafSpringParams,
    anchors: &[StiffnessAnchor],
) -> Result<LeverFit> {
    let positions = {
        let mut xs: Vec<f64> = anchors.iter().map(|a| a.x).collect();
        xs.sort_by(f64::total_cmp);
        xs.dedup_by(|a, b| (*a - *b).abs() < 1e-9);
        xs.len()
    };
    if anchors.len() < 2 || positions < 2 {
        return Err(VllsaError::Calibration(format!(
            "underdetermined: need anchors at two or more slider positions, got {} anchor(s) at {} position(s)",
            anchors.len(),
            positions
        )));
    }
    for a in anchors {
        let usable = a.q.is_finite()
            && a.x.is_finite()
            && a.stiffness.is_finite()
            && a.stiffness > 0.0
            && (0.0..base.spring_length).contains(&a.x)
            && (2.0 * a.q).cos() > 0.0;
        if !usable {
            return Err(VllsaError::Calibration(format!("unusable anchor {a:?}")));
        }
    }
    let solver = LevenbergMarquardt::new().with_tol(1e-14).with_patience(400);
    let mut best: Option<(LeverProblem, f64, usize)> = None;
    for a0 in [0.005, 0.02, 0.05, 0.15] {
        let e0 = lever_e_for(base, anchors, a0);
        let problem = LeverProblem {
            base: *base,
            anchors,
            p: Vector2::new(e0.ln(), f64::ln(a0)),
        };
        let (problem, report) = solver.minimize(problem);
        if !report.termination.was_successful() {
            continue;
        }
        let better = best
            .as_ref()
            .is_none_or(|(_, f, _)| report.objective_function < *f);
        if better {
            best = Some((
                problem,
                report.objective_function,
                report.number_of_evaluations,
            ));
        }
    }
    let (problem, _, evaluations) =
        best.ok_or_else(|| VllsaError::Calibration("fit did not converge from any start".into()))?;
    let fitted = problem.params_at(&problem.p);
    let (e, a) = (fitted.lever_e, fitted.lever_a);
    if !(a > 0.0) || !(e > 0.0) || e >= LEVER_E_FRACTION_LIMIT * base.spring_length {
        return Err(VllsaError::Calibration(format!(
            "unphysical fit: lever_e = {e} m, lever_a = {a} m for spring length {} m",
            base.spring_length
        )));
    }
    let anchors = anchors
        .iter()
        .map(|&anchor| {
            let model = fitted.stiffness_at(anchor.q, anchor.x);
            AnchorFit {
                anchor,
                model,
                relative_error: model / anchor.stiffness - 1.0,
            }
        })
        .collect();
    Ok(LeverFit {
        lever_e: e,
        lever_a: a,
        anchors,
        evaluations,
    })
}

/// `eta * tau_s` that makes the no-load drive power equal `power`.
pub fn calibrate_torque_product(drive: &BallScrewDrive, power: f64) -> Result<f64> {
    if !(power.is_finite() && power > 0.0 && drive.motor_speed_n > 0.0) {
        return Err(VllsaError::Calibration(
            "baseline power and motor speed must be positive".into(),
        ));
    }
    Ok(drive.torque_product_for(power))
}
