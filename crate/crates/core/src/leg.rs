//! Planar rigid-body model of the hopping leg.
//!
//! Generalized coordinates are `[x_B, z_B, theta_H, theta_K]`: hip position
//! (the base translates without pitch), thigh angle from the downward
//! vertical (positive swings the knee toward +x) and the knee angle on the
//! hardware scale, where the spring is undeflected at `theta0` and larger
//! values flex the knee. The geometric flexion between thigh and shank is
//! `theta_K + knee_flexion_offset`; the leg is straight when that sum is 0.
//!
//! Contact is a rigid, unilateral, no-slip point at the foot. Stance solves
//! the constrained equations of motion by Schur complement on the contact
//! rows; touchdown is an inelastic velocity projection.

use nalgebra::{DMatrix, DVector, Matrix2, Matrix4, SMatrix, Vector2, Vector4};
use serde::{Deserialize, Serialize};

use crate::actuator::{deg, GearCoupling, LeafSpringParams};
use crate::error::{Result, VllsaError};

pub type Matrix2x4 = SMatrix<f64, 2, 4>;

pub const BASE_X: usize = 0;
pub const BASE_Z: usize = 1;
pub const HIP: usize = 2;
pub const KNEE: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BaseMount {
    /// Hip slides on a vertical guide; `x_B` is fixed.
    LinearGuide,
    /// Hip translates freely in the sagittal plane.
    #[default]
    Boom,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LegParams {
    pub thigh_length: f64,
    pub shank_length: f64,
    /// Whole leg including base, kg.
    pub total_mass: f64,
    /// Actuator mass, lumped into the thigh.
    pub vllsa_mass: f64,
    pub stiffness_motor_mass: f64,
    /// Thigh including the actuator, COM at mid-length.
    pub thigh_mass: f64,
    /// Uniform shank rod.
    pub shank_mass: f64,
    /// Point mass at the foot.
    pub foot_mass: f64,
    /// About the thigh COM, kg m^2.
    pub thigh_inertia: f64,
    /// About the shank COM, kg m^2.
    pub shank_inertia: f64,
    pub gravity: f64,
    pub hip_torque_limit: f64,
    pub knee_torque_limit: f64,
    /// Geometric flexion at `theta_K = 0`, rad.
    pub knee_flexion_offset: f64,
    pub mount: BaseMount,
}

impl Default for LegParams {
    fn default() -> Self {
        let (lt, ls) = (0.35, 0.35);
        let (mt, ms) = (0.45, 0.25);
        Self {
            thigh_length: lt,
            shank_length: ls,
            total_mass: 3.82,
            vllsa_mass: 0.45,
            stiffness_motor_mass: 0.128,
            thigh_mass: mt,
            shank_mass: ms,
            foot_mass: 0.05,
            thigh_inertia: mt * lt * lt / 12.0,
            shank_inertia: ms * ls * ls / 12.0,
            gravity: 9.81,
            hip_torque_limit: 35.0,
            knee_torque_limit: 35.0,
            knee_flexion_offset: deg(30.0),
            mount: BaseMount::Boom,
        }
    }
}

impl LegParams {
    pub fn base_mass(&self) -> f64 {
        self.total_mass - self.thigh_mass - self.shank_mass - self.foot_mass
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("thigh_length", self.thigh_length),
            ("shank_length", self.shank_length),
            ("total_mass", self.total_mass),
            ("thigh_mass", self.thigh_mass),
            ("shank_mass", self.shank_mass),
            ("thigh_inertia", self.thigh_inertia),
            ("shank_inertia", self.shank_inertia),
            ("gravity", self.gravity),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(VllsaError::invalid(format!(
                    "{name} must be positive, got {v}"
                )));
            }
        }
        if !(self.foot_mass >= 0.0) {
            return Err(VllsaError::invalid("foot_mass must be non-negative"));
        }
        if !(self.base_mass() > 0.0) {
            return Err(VllsaError::invalid(format!(
                "link masses exceed total mass {} kg",
                self.total_mass
            )));
        }
        if self.vllsa_mass > self.thigh_mass || self.stiffness_motor_mass > self.vllsa_mass {
            return Err(VllsaError::invalid(
                "actuator mass must fit inside the thigh mass and contain the stiffness motor",
            ));
        }
        for (name, v) in [
            ("hip_torque_limit", self.hip_torque_limit),
            ("knee_torque_limit", self.knee_torque_limit),
        ] {
            if !(0.0..=35.0).contains(&v) {
                return Err(VllsaError::invalid(format!(
                    "{name} = {v} outside [0, 35] N m"
                )));
            }
        }
        Ok(())
    }

    pub fn max_reach(&self) -> f64 {
        self.thigh_length + self.shank_length
    }

    /// Knee angle on the hardware scale for a geometric flexion.
    pub fn knee_from_flexion(&self, flexion: f64) -> f64 {
        flexion - self.knee_flexion_offset
    }

    /// Joint angles placing the foot at `r = [d, h]` relative to the hip,
    /// knee bent forward.
    pub fn inverse_kinematics(&self, d: f64, h: f64) -> Result<(f64, f64)> {
        let (l1, l2) = (self.thigh_length, self.shank_length);
        // foot relative to hip in world axes
        let fx = -d;
        let fz = -h;
        let r2 = fx * fx + fz * fz;
        let cos_flex = (r2 - l1 * l1 - l2 * l2) / (2.0 * l1 * l2);
        if !(-1.0..=1.0).contains(&cos_flex) {
            return Err(VllsaError::domain(format!(
                "target ({d}, {h}) m out of reach"
            )));
        }
        let flexion = cos_flex.acos();
        // foot = l1 (sin th, -cos th) + l2 (sin(th - flex), -cos(th - flex))
        let phi = fx.atan2(-fz);
        let alpha = (l2 * flexion.sin()).atan2(l1 + l2 * flexion.cos());
        let theta_h = phi + alpha;
        Ok((theta_h, self.knee_from_flexion(flexion)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContactPhase {
    Stance,
    Flight,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LegState {
    pub pos: Vector4<f64>,
    pub vel: Vector4<f64>,
    pub phase: ContactPhase,
    /// Foot anchor while in stance; world frame.
    pub contact_point: Vector2<f64>,
}

impl LegState {
    /// Leg at rest in stance with the foot on the ground at `foot_x`.
    pub fn standing(params: &LegParams, foot_x: f64, d: f64, h: f64) -> Result<Self> {
        let (th, tk) = params.inverse_kinematics(d, h)?;
        Ok(Self {
            pos: Vector4::new(foot_x + d, h, th, tk),
            vel: Vector4::zeros(),
            phase: ContactPhase::Stance,
            contact_point: Vector2::new(foot_x, 0.0),
        })
    }

    pub fn is_finite(&self) -> bool {
        self.pos
            .iter()
            .chain(self.vel.iter())
            .all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContactInfo {
    pub in_contact: bool,
    /// Ground reaction on the foot, world frame (N).
    pub force: Vector2<f64>,
    pub point: Vector2<f64>,
}

impl ContactInfo {
    pub fn none() -> Self {
        Self {
            in_contact: false,
            force: Vector2::zeros(),
            point: Vector2::zeros(),
        }
    }
}

fn shank_angle(params: &LegParams, pos: &Vector4<f64>) -> f64 {
    pos[HIP] - (pos[KNEE] + params.knee_flexion_offset)
}

/// A point on the thigh (`on_shank = false`) or shank at distance `along`
/// from the link's proximal joint.
#[derive(Clone, Copy)]
struct LinkPoint {
    on_shank: bool,
    along: f64,
}

impl LinkPoint {
    fn position(self, p: &LegParams, pos: &Vector4<f64>) -> Vector2<f64> {
        let th = pos[HIP];
        if !self.on_shank {
            return Vector2::new(
                pos[BASE_X] + self.along * th.sin(),
                pos[BASE_Z] - self.along * th.cos(),
            );
        }
        let b = shank_angle(p, pos);
        Vector2::new(
            pos[BASE_X] + p.thigh_length * th.sin() + self.along * b.sin(),
            pos[BASE_Z] - p.thigh_length * th.cos() - self.along * b.cos(),
        )
    }

    fn jacobian(self, p: &LegParams, pos: &Vector4<f64>) -> Matrix2x4 {
        let th = pos[HIP];
        if !self.on_shank {
            return Matrix2x4::new(
                1.0,
                0.0,
                self.along * th.cos(),
                0.0, //
                0.0,
                1.0,
                self.along * th.sin(),
                0.0,
            );
        }
        let b = shank_angle(p, pos);
        let l1 = p.thigh_length;
        Matrix2x4::new(
            1.0,
            0.0,
            l1 * th.cos() + self.along * b.cos(),
            -self.along * b.cos(), //
            0.0,
            1.0,
            l1 * th.sin() + self.along * b.sin(),
            -self.along * b.sin(),
        )
    }

    fn jacobian_dot(self, p: &LegParams, pos: &Vector4<f64>, vel: &Vector4<f64>) -> Matrix2x4 {
        let th = pos[HIP];
        let thd = vel[HIP];
        if !self.on_shank {
            return Matrix2x4::new(
                0.0,
                0.0,
                -self.along * th.sin() * thd,
                0.0, //
                0.0,
                0.0,
                self.along * th.cos() * thd,
                0.0,
            );
        }
        let b = shank_angle(p, pos);
        let bd = vel[HIP] - vel[KNEE];
        let l1 = p.thigh_length;
        Matrix2x4::new(
            0.0,
            0.0,
            -l1 * th.sin() * thd - self.along * b.sin() * bd,
            self.along * b.sin() * bd,
            0.0,
            0.0,
            l1 * th.cos() * thd + self.along * b.cos() * bd,
            -self.along * b.cos() * bd,
        )
    }
}

struct Body {
    mass: f64,
    point: LinkPoint,
}

fn bodies(p: &LegParams) -> [Body; 4] {
    [
        Body {
            mass: p.base_mass(),
            point: LinkPoint {
                on_shank: false,
                along: 0.0,
            },
        },
        Body {
            mass: p.thigh_mass,
            point: LinkPoint {
                on_shank: false,
                along: 0.5 * p.thigh_length,
            },
        },
        Body {
            mass: p.shank_mass,
            point: LinkPoint {
                on_shank: true,
                along: 0.5 * p.shank_length,
            },
        },
        Body {
            mass: p.foot_mass,
            point: LinkPoint {
                on_shank: true,
                along: p.shank_length,
            },
        },
    ]
}

const FOOT: LinkPoint = LinkPoint {
    on_shank: true,
    along: f64::NAN,
};

fn foot_point(p: &LegParams) -> LinkPoint {
    LinkPoint {
        along: p.shank_length,
        ..FOOT
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Kinematics {
    pub foot: Vector2<f64>,
    pub knee: Vector2<f64>,
    /// `[d, h]`: hip ahead of the foot, hip above the foot.
    pub r: Vector2<f64>,
    pub r_dot: Vector2<f64>,
}

pub fn forward_kinematics(params: &LegParams, state: &LegState) -> Kinematics {
    let foot = foot_point(params).position(params, &state.pos);
    let knee = LinkPoint {
        on_shank: false,
        along: params.thigh_length,
    }
    .position(params, &state.pos);
    // relative position from joint angles alone
    let mut rel = state.pos;
    rel[BASE_X] = 0.0;
    rel[BASE_Z] = 0.0;
    let r = -foot_point(params).position(params, &rel);
    let jv = virtual_jacobian(params, &state.pos);
    Kinematics {
        foot,
        knee,
        r,
        r_dot: jv * state.vel,
    }
}

/// Jacobian of `r = [d, h]`; its base columns vanish.
fn virtual_jacobian(params: &LegParams, pos: &Vector4<f64>) -> Matrix2x4 {
    let jc = foot_point(params).jacobian(params, pos);
    let mut jv = -jc;
    jv[(0, BASE_X)] = 0.0;
    jv[(1, BASE_Z)] = 0.0;
    jv
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Jacobians {
    /// Foot velocity in the world frame.
    pub contact: Matrix2x4,
    /// Rate of `r = [d, h]`; the virtual point is the foot contact point
    /// expressed relative to the hip.
    pub virtual_point: Matrix2x4,
    pub contact_dot: Matrix2x4,
    /// Smallest singular value of the joint block of the contact Jacobian.
    pub leg_sigma_min: f64,
}

impl Jacobians {
    pub fn leg_singular(&self, params: &LegParams) -> bool {
        self.leg_sigma_min < 1e-9 * params.thigh_length * params.shank_length
    }
}

pub fn jacobians(params: &LegParams, state: &LegState) -> Jacobians {
    let foot = foot_point(params);
    let contact = foot.jacobian(params, &state.pos);
    let block = Matrix2::new(
        contact[(0, HIP)],
        contact[(0, KNEE)],
        contact[(1, HIP)],
        contact[(1, KNEE)],
    );
    let sv = block.singular_values();
    Jacobians {
        contact,
        virtual_point: virtual_jacobian(params, &state.pos),
        contact_dot: foot.jacobian_dot(params, &state.pos, &state.vel),
        leg_sigma_min: sv.min(),
    }
}

pub fn mass_matrix(params: &LegParams, state: &LegState) -> Matrix4<f64> {
    let mut m = Matrix4::zeros();
    for b in bodies(params) {
        let j = b.point.jacobian(params, &state.pos);
        m += b.mass * j.transpose() * j;
    }
    let thigh_w = Vector4::new(0.0, 0.0, 1.0, 0.0);
    let shank_w = Vector4::new(0.0, 0.0, 1.0, -1.0);
    m += params.thigh_inertia * thigh_w * thigh_w.transpose();
    m += params.shank_inertia * shank_w * shank_w.transpose();
    m
}

/// Generalized gravity `dV/dq`.
pub fn gravity_terms(params: &LegParams, state: &LegState) -> Vector4<f64> {
    let mut g = Vector4::zeros();
    for b in bodies(params) {
        let j = b.point.jacobian(params, &state.pos);
        g += b.mass * params.gravity * j.row(1).transpose();
    }
    g
}

/// Coriolis/centrifugal plus gravity.
pub fn bias_terms(params: &LegParams, state: &LegState) -> Vector4<f64> {
    let mut h = gravity_terms(params, state);
    for b in bodies(params) {
        let j = b.point.jacobian(params, &state.pos);
        let jd = b.point.jacobian_dot(params, &state.pos, &state.vel);
        h += b.mass * j.transpose() * (jd * state.vel);
    }
    h
}

pub fn kinetic_energy(params: &LegParams, state: &LegState) -> f64 {
    0.5 * (state.vel.transpose() * mass_matrix(params, state) * state.vel)[0]
}

pub fn potential_energy(params: &LegParams, state: &LegState) -> f64 {
    bodies(params)
        .iter()
        .map(|b| b.mass * params.gravity * b.point.position(params, &state.pos).y)
        .sum()
}

/// Centre of mass position and velocity in the world frame.
pub fn center_of_mass(params: &LegParams, state: &LegState) -> (Vector2<f64>, Vector2<f64>) {
    let mut p = Vector2::zeros();
    let mut v = Vector2::zeros();
    let mut m = 0.0;
    for b in bodies(params) {
        p += b.mass * b.point.position(params, &state.pos);
        v += b.mass * (b.point.jacobian(params, &state.pos) * state.vel);
        m += b.mass;
    }
    (p / m, v / m)
}

/// Leaf-spring torque acting on the knee coordinate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpringLoad {
    pub spring: LeafSpringParams,
    pub gear: GearCoupling,
    pub slider_x: f64,
}

impl SpringLoad {
    pub fn deflection(&self, theta_k: f64) -> f64 {
        self.gear.deflection_unchecked(theta_k)
    }

    pub fn knee_torque(&self, theta_k: f64) -> f64 {
        self.spring
            .torque_at(self.deflection(theta_k), self.slider_x)
            / self.gear.ratio_i
    }

    pub fn energy(&self, theta_k: f64) -> f64 {
        self.spring
            .energy_at(self.deflection(theta_k), self.slider_x)
    }
}

fn spring_torque(spring: Option<&SpringLoad>, state: &LegState) -> f64 {
    spring.map_or(0.0, |s| s.knee_torque(state.pos[KNEE]))
}

struct Constraints {
    rows: DMatrix<f64>,
    bias: DVector<f64>,
    foot_rows: Option<usize>,
}

fn constraints(params: &LegParams, state: &LegState, in_contact: bool) -> Constraints {
    let guide = params.mount == BaseMount::LinearGuide;
    let m = usize::from(guide) + if in_contact { 2 } else { 0 };
    let mut rows = DMatrix::zeros(m, 4);
    let mut bias = DVector::zeros(m);
    let mut next = 0;
    if guide {
        rows[(0, BASE_X)] = 1.0;
        next = 1;
    }
    let mut foot_rows = None;
    if in_contact {
        let foot = foot_point(params);
        let j = foot.jacobian(params, &state.pos);
        let jd = foot.jacobian_dot(params, &state.pos, &state.vel) * state.vel;
        for r in 0..2 {
            for c in 0..4 {
                rows[(next + r, c)] = j[(r, c)];
            }
            bias[next + r] = jd[r];
        }
        foot_rows = Some(next);
    }
    Constraints {
        rows,
        bias,
        foot_rows,
    }
}

struct Solved {
    accel: Vector4<f64>,
    contact_force: Vector2<f64>,
}

fn solve_constrained(
    params: &LegParams,
    state: &LegState,
    generalized_force: &Vector4<f64>,
    in_contact: bool,
) -> Result<Solved> {
    let m = mass_matrix(params, state);
    let h = bias_terms(params, state);
    let chol = m
        .cholesky()
        .ok_or_else(|| VllsaError::SingularContact("mass matrix not positive definite".into()))?;
    let rhs = generalized_force - h;
    let free = chol.solve(&rhs);
    let c = constraints(params, state, in_contact);
    if c.rows.nrows() == 0 {
        return Ok(Solved {
            accel: free,
            contact_force: Vector2::zeros(),
        });
    }
    let md = DMatrix::from_fn(4, 4, |r, col| m[(r, col)]);
    let minv_at = md
        .cholesky()
        .expect("checked above")
        .solve(&c.rows.transpose());
    let schur = &c.rows * &minv_at;
    let free_d = DVector::from_iterator(4, free.iter().copied());
    let residual = -(&c.bias) - &c.rows * &free_d;
    let lambda = schur
        .clone()
        .cholesky()
        .ok_or_else(|| VllsaError::SingularContact("constraint rows are dependent".into()))?
        .solve(&residual);
    let corr = &minv_at * &lambda;
    let accel = free + Vector4::from_iterator(corr.iter().copied());
    let contact_force = c
        .foot_rows
        .map_or(Vector2::zeros(), |k| Vector2::new(lambda[k], lambda[k + 1]));
    Ok(Solved {
        accel,
        contact_force,
    })
}

fn actuation(motor: [f64; 2], spring_knee: f64) -> Vector4<f64> {
    Vector4::new(0.0, 0.0, motor[0], motor[1] + spring_knee)
}

/// Constrained stance accelerations and the ground reaction on the foot.
///
/// `motor` are the hip and knee motor torques; `spring_knee` is the
/// actuator torque at the knee. Both enter the joint rows.
pub fn stance_dynamics(
    params: &LegParams,
    state: &LegState,
    motor: [f64; 2],
    spring_knee: f64,
) -> Result<(Vector4<f64>, Vector2<f64>)> {
    if jacobians(params, state).leg_singular(params) {
        return Err(VllsaError::SingularContact(
            "straight leg: contact Jacobian joint block is rank deficient".into(),
        ));
    }
    let s = solve_constrained(params, state, &actuation(motor, spring_knee), true)?;
    Ok((s.accel, s.contact_force))
}

pub fn flight_dynamics(
    params: &LegParams,
    state: &LegState,
    motor: [f64; 2],
    spring_knee: f64,
) -> Result<Vector4<f64>> {
    Ok(solve_constrained(params, state, &actuation(motor, spring_knee), false)?.accel)
}

/// Projects `vel` onto the velocities admissible under the active
/// constraints, removing the component along `M^-1 A^T` (inelastic impact).
fn project_velocity(
    params: &LegParams,
    state: &LegState,
    in_contact: bool,
) -> Result<Vector4<f64>> {
    let c = constraints(params, state, in_contact);
    if c.rows.nrows() == 0 {
        return Ok(state.vel);
    }
    let m = mass_matrix(params, state);
    let md = DMatrix::from_fn(4, 4, |r, col| m[(r, col)]);
    let minv_at = md
        .cholesky()
        .ok_or_else(|| VllsaError::SingularContact("mass matrix not positive definite".into()))?
        .solve(&c.rows.transpose());
    let schur = &c.rows * &minv_at;
    let v = DVector::from_iterator(4, state.vel.iter().copied());
    let impulse = schur
        .cholesky()
        .ok_or_else(|| VllsaError::SingularContact("constraint rows are dependent".into()))?
        .solve(&(&c.rows * &v));
    let dv = &minv_at * impulse;
    Ok(state.vel - Vector4::from_iterator(dv.iter().copied()))
}

/// Gauss-Newton correction of the positions onto the constraint manifold.
fn project_position(params: &LegParams, state: &mut LegState, anchor_x: Option<f64>) -> Result<()> {
    let in_contact = state.phase == ContactPhase::Stance;
    for _ in 0..2 {
        let c = constraints(params, state, in_contact);
        if c.rows.nrows() == 0 {
            return Ok(());
        }
        let mut err = DVector::zeros(c.rows.nrows());
        let mut k = 0;
        if params.mount == BaseMount::LinearGuide {
            err[0] = state.pos[BASE_X] - anchor_x.unwrap_or(state.pos[BASE_X]);
            k = 1;
        }
        if in_contact {
            let foot = foot_point(params).position(params, &state.pos);
            err[k] = foot.x - state.contact_point.x;
            err[k + 1] = foot.y - state.contact_point.y;
        }
        if err.amax() < 1e-13 {
            return Ok(());
        }
        let m = mass_matrix(params, state);
        let md = DMatrix::from_fn(4, 4, |r, col| m[(r, col)]);
        let minv_at = md
            .cholesky()
            .ok_or_else(|| VllsaError::SingularContact("mass matrix not positive definite".into()))?
            .solve(&c.rows.transpose());
        let schur = &c.rows * &minv_at;
        let mult = schur
            .cholesky()
            .ok_or_else(|| VllsaError::SingularContact("constraint rows are dependent".into()))?
            .solve(&err);
        let dq = &minv_at * mult;
        state.pos -= Vector4::from_iterator(dq.iter().copied());
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LegEventKind {
    Touchdown,
    Liftoff,
    Apex,
    HeightCrossing { level: f64, rising: bool },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LegEvent {
    pub kind: LegEventKind,
    /// Time into the step at which the event was located, s.
    pub offset: f64,
}

/// Events between two consecutive states, judged from the states alone.
///
/// Liftoff is recognised from the phase flag; locating it in time needs
/// the contact force and happens inside [`step`].
pub fn detect_events(
    params: &LegParams,
    prev: &LegState,
    next: &LegState,
    watch_heights: &[f64],
) -> Vec<LegEventKind> {
    let mut out = Vec::new();
    if prev.phase == ContactPhase::Flight && next.phase == ContactPhase::Stance {
        out.push(LegEventKind::Touchdown);
    }
    if prev.phase == ContactPhase::Stance && next.phase == ContactPhase::Flight {
        out.push(LegEventKind::Liftoff);
    }
    if next.phase == ContactPhase::Flight
        && center_of_mass(params, prev).1.y > 0.0
        && center_of_mass(params, next).1.y <= 0.0
    {
        out.push(LegEventKind::Apex);
    }
    let h0 = forward_kinematics(params, prev).r.y;
    let h1 = forward_kinematics(params, next).r.y;
    for &level in watch_heights {
        if h0 < level && h1 >= level {
            out.push(LegEventKind::HeightCrossing {
                level,
                rising: true,
            });
        } else if h0 >= level && h1 < level {
            out.push(LegEventKind::HeightCrossing {
                level,
                rising: false,
            });
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub state: LegState,
    pub events: Vec<LegEvent>,
    /// Contact at the start of the last sub-step taken.
    pub contact: ContactInfo,
    /// Kinetic energy removed by touchdown impacts within the step, J.
    pub impact_loss: f64,
}

const BISECTION_ITERS: usize = 8;
const MAX_SPEED: f64 = 200.0;

/// One smooth semi-implicit Euler step within the current contact phase.
fn smooth_step(
    params: &LegParams,
    state: &LegState,
    motor: [f64; 2],
    spring: Option<&SpringLoad>,
    dt: f64,
    anchor_x: Option<f64>,
) -> Result<(LegState, ContactInfo)> {
    let tau_s = spring_torque(spring, state);
    let in_contact = state.phase == ContactPhase::Stance;
    let (accel, force) = if in_contact {
        stance_dynamics(params, state, motor, tau_s)?
    } else {
        (
            flight_dynamics(params, state, motor, tau_s)?,
            Vector2::zeros(),
        )
    };
    let mut next = *state;
    next.vel = state.vel + dt * accel;
    next.pos = state.pos + dt * next.vel;
    project_position(params, &mut next, anchor_x)?;
    next.vel = project_velocity(params, &next, in_contact)?;
    let contact = ContactInfo {
        in_contact,
        force,
        point: if in_contact {
            state.contact_point
        } else {
            Vector2::zeros()
        },
    };
    Ok((next, contact))
}

fn foot_vertical_speed(params: &LegParams, state: &LegState) -> f64 {
    (foot_point(params).jacobian(params, &state.pos) * state.vel).y
}

fn foot_height(params: &LegParams, state: &LegState) -> f64 {
    foot_point(params).position(params, &state.pos).y
}

fn vertical_force(
    params: &LegParams,
    state: &LegState,
    motor: [f64; 2],
    spring: Option<&SpringLoad>,
) -> Result<f64> {
    let (_, f) = stance_dynamics(params, state, motor, spring_torque(spring, state))?;
    Ok(f.y)
}

/// Switches a flight state to stance at the current foot position,
/// applying the inelastic impact.
pub fn touch_down(params: &LegParams, state: &LegState) -> Result<LegState> {
    let mut s = *state;
    let foot = foot_point(params).position(params, &s.pos);
    s.phase = ContactPhase::Stance;
    s.contact_point = Vector2::new(foot.x, 0.0);
    s.pos[BASE_Z] -= foot.y;
    s.vel = project_velocity(params, &s, true)?;
    Ok(s)
}

pub fn lift_off(state: &LegState) -> LegState {
    LegState {
        phase: ContactPhase::Flight,
        ..*state
    }
}

/// Advances the hybrid system by `dt`, locating touchdown, liftoff and apex
/// by bisection to within `dt / 2^8`.
///
/// `motor` is held over the step; the spring torque follows the state.
/// `anchor_x` is the guide position when the base is on a linear guide.
pub fn step(
    params: &LegParams,
    state: &LegState,
    motor: [f64; 2],
    spring: Option<&SpringLoad>,
    dt: f64,
    anchor_x: Option<f64>,
) -> Result<StepOutcome> {
    if !(dt > 0.0) {
        return Err(VllsaError::invalid("time step must be positive"));
    }
    let mut events = Vec::new();
    let mut current = *state;
    let mut elapsed = 0.0;
    let mut contact = ContactInfo::none();
    let mut impact_loss = 0.0;
    // at most one touchdown and one liftoff per step
    for _ in 0..3 {
        let remaining = dt - elapsed;
        if remaining <= 0.0 {
            break;
        }
        if current.phase == ContactPhase::Stance {
            let fz = vertical_force(params, &current, motor, spring)?;
            if fz < 0.0 {
                current = lift_off(&current);
                events.push(LegEvent {
                    kind: LegEventKind::Liftoff,
                    offset: elapsed,
                });
                continue;
            }
            let (next, c) = smooth_step(params, &current, motor, spring, remaining, anchor_x)?;
            contact = c;
            let fz_next = vertical_force(params, &next, motor, spring)?;
            if fz_next >= 0.0 {
                current = next;
                elapsed = dt;
                break;
            }
            // the force turns negative inside the step
            let (mut lo, mut hi) = (0.0, remaining);
            for _ in 0..BISECTION_ITERS {
                let mid = 0.5 * (lo + hi);
                let (s, _) = smooth_step(params, &current, motor, spring, mid, anchor_x)?;
                if vertical_force(params, &s, motor, spring)? >= 0.0 {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            let (s, _) = smooth_step(params, &current, motor, spring, hi, anchor_x)?;
            current = lift_off(&s);
            elapsed += hi;
            events.push(LegEvent {
                kind: LegEventKind::Liftoff,
                offset: elapsed,
            });
        } else {
            let (next, c) = smooth_step(params, &current, motor, spring, remaining, anchor_x)?;
            contact = c;
            let descending_apex = current.vel[BASE_Z] > 0.0 && next.vel[BASE_Z] <= 0.0;
            // a foot still rising after liftoff does not land
            if foot_height(params, &next) >= 0.0 || foot_vertical_speed(params, &next) >= 0.0 {
                if descending_apex {
                    let t = locate(0.0, remaining, |tau| {
                        let (s, _) = smooth_step(params, &current, motor, spring, tau, anchor_x)?;
                        Ok(s.vel[BASE_Z] <= 0.0)
                    })?;
                    events.push(LegEvent {
                        kind: LegEventKind::Apex,
                        offset: elapsed + t,
                    });
                }
                current = next;
                elapsed = dt;
                break;
            }
            let t = locate(0.0, remaining, |tau| {
                let (s, _) = smooth_step(params, &current, motor, spring, tau, anchor_x)?;
                Ok(foot_height(params, &s) < 0.0)
            })?;
            let (s, _) = smooth_step(params, &current, motor, spring, t, anchor_x)?;
            if descending_apex && s.vel[BASE_Z] <= 0.0 {
                let ta = locate(0.0, t, |tau| {
                    let (s, _) = smooth_step(params, &current, motor, spring, tau, anchor_x)?;
                    Ok(s.vel[BASE_Z] <= 0.0)
                })?;
                events.push(LegEvent {
                    kind: LegEventKind::Apex,
                    offset: elapsed + ta,
                });
            }
            current = touch_down(params, &s)?;
            impact_loss += kinetic_energy(params, &s) - kinetic_energy(params, &current);
            elapsed += t;
            events.push(LegEvent {
                kind: LegEventKind::Touchdown,
                offset: elapsed,
            });
        }
    }
    if elapsed < dt {
        let (next, c) = smooth_step(params, &current, motor, spring, dt - elapsed, anchor_x)?;
        current = next;
        contact = c;
    }
    if !current.is_finite() || current.vel.amax() > MAX_SPEED {
        return Err(VllsaError::Diverged {
            t: dt,
            detail: format!("state {:?}", current.pos.as_slice()),
        });
    }
    Ok(StepOutcome {
        state: current,
        events,
        contact,
        impact_loss,
    })
}

/// Smallest `tau` in `(lo, hi]` where `pred` turns true, to `(hi-lo)/2^8`.
fn locate(lo: f64, hi: f64, mut pred: impl FnMut(f64) -> Result<bool>) -> Result<f64> {
    let (mut a, mut b) = (lo, hi);
    for _ in 0..BISECTION_ITERS {
        let mid = 0.5 * (a + b);
        if pred(mid)? {
            b = mid;
        } else {
            a = mid;
        }
    }
    Ok(b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn crouched(params: &LegParams) -> LegState {
        LegState::standing(params, 0.0, 0.0, 0.42).unwrap()
    }

    fn flight_state(params: &LegParams) -> LegState {
        let mut s = crouched(params);
        s.phase = ContactPhase::Flight;
        s.pos[BASE_Z] += 0.3;
        s.vel = Vector4::new(0.3, 0.5, 1.0, -2.0);
        s
    }

    #[test]
    fn default_masses_sum_to_total() {
        let p = LegParams::default();
        p.validate().unwrap();
        let sum = p.base_mass() + p.thigh_mass + p.shank_mass + p.foot_mass;
        assert_relative_eq!(sum, 3.82, max_relative = 1e-12);
    }

    #[test]
    fn straight_leg_reaches_full_length() {
        let p = LegParams::default();
        let mut s = crouched(&p);
        s.pos[HIP] = 0.0;
        s.pos[KNEE] = -p.knee_flexion_offset;
        let k = forward_kinematics(&p, &s);
        assert_relative_eq!(k.r.y, 0.70, max_relative = 1e-12);
        assert!(k.r.x.abs() < 1e-15);
        assert!(jacobians(&p, &s).leg_singular(&p));
        assert!(matches!(
            stance_dynamics(&p, &s, [0.0, 0.0], 0.0),
            Err(VllsaError::SingularContact(_))
        ));
    }

    #[test]
    fn symmetric_bend_matches_two_link_geometry() {
        let p = LegParams::default();
        let flex = deg(120.0);
        let mut s = crouched(&p);
        s.pos[HIP] = 0.5 * flex;
        s.pos[KNEE] = p.knee_from_flexion(flex);
        let k = forward_kinematics(&p, &s);
        // isosceles triangle with apex angle 180 - flex at the knee
        let included = std::f64::consts::PI - flex;
        assert_relative_eq!(
            k.r.y,
            2.0 * 0.35 * (0.5 * included).sin(),
            max_relative = 1e-12
        );
        assert!(k.r.x.abs() < 1e-12);
        // mirror pose
        let mut m = s;
        m.pos[HIP] = 0.5 * flex + 0.2;
        let mut n = s;
        n.pos[HIP] = 0.5 * flex - 0.2;
        let (a, b) = (
            forward_kinematics(&p, &m).r.x,
            forward_kinematics(&p, &n).r.x,
        );
        assert_relative_eq!(a, -b, max_relative = 1e-12);
    }

    #[test]
    fn inverse_kinematics_round_trip() {
        let p = LegParams::default();
        for &(d, h) in &[(0.0, 0.5), (0.2, 0.45), (-0.1, 0.3), (0.1, 0.255)] {
            let s = LegState::standing(&p, 0.0, d, h).unwrap();
            let k = forward_kinematics(&p, &s);
            assert_relative_eq!(k.r.x, d, epsilon = 1e-12);
            assert_relative_eq!(k.r.y, h, epsilon = 1e-12);
            assert!(k.foot.y.abs() < 1e-12);
        }
    }

    #[test]
    fn contact_jacobian_matches_finite_difference() {
        let p = LegParams::default();
        let s = flight_state(&p);
        let j = jacobians(&p, &s);
        let h = 1e-7;
        let mut a = s;
        a.pos += h * s.vel;
        let mut b = s;
        b.pos -= h * s.vel;
        let fd = (forward_kinematics(&p, &a).foot - forward_kinematics(&p, &b).foot) / (2.0 * h);
        let an = j.contact * s.vel;
        assert_relative_eq!(an, fd, max_relative = 1e-6);
        // J_dot consistent with the derivative of J along the motion
        let jd_fd = (jacobians(&p, &a).contact - jacobians(&p, &b).contact) / (2.0 * h);
        assert_relative_eq!(j.contact_dot, jd_fd, max_relative = 1e-6, epsilon = 1e-9);
        let mut still = s;
        still.vel = Vector4::zeros();
        assert_eq!(
            jacobians(&p, &still).contact_dot * still.vel,
            Vector2::zeros()
        );
    }

    #[test]
    fn mass_matrix_is_symmetric_positive_definite() {
        let p = LegParams::default();
        for flex in [60.0, 90.0, 120.0, 140.0] {
            let mut s = flight_state(&p);
            s.pos[KNEE] = p.knee_from_flexion(deg(flex));
            let m = mass_matrix(&p, &s);
            assert!((m - m.transpose()).amax() < 1e-12);
            assert!(m.cholesky().is_some());
        }
    }

    #[test]
    fn static_bias_is_potential_gradient() {
        let p = LegParams::default();
        let mut s = flight_state(&p);
        s.vel = Vector4::zeros();
        let h = bias_terms(&p, &s);
        for i in 0..4 {
            let eps = 1e-6;
            let mut a = s;
            a.pos[i] += eps;
            let mut b = s;
            b.pos[i] -= eps;
            let fd = (potential_energy(&p, &a) - potential_energy(&p, &b)) / (2.0 * eps);
            assert_relative_eq!(h[i], fd, max_relative = 1e-8, epsilon = 1e-9);
        }
    }

    #[test]
    fn ballistic_base_without_actuation() {
        let p = LegParams::default();
        let mut s = flight_state(&p);
        s.vel = Vector4::zeros();
        let a = flight_dynamics(&p, &s, [0.0, 0.0], 0.0).unwrap();
        assert_relative_eq!(a[BASE_Z], -p.gravity, max_relative = 1e-12);
        assert!(a[HIP].abs() < 1e-12 && a[KNEE].abs() < 1e-12);
    }

    #[test]
    fn spring_restores_toward_neutral_in_flight() {
        let p = LegParams::default();
        let mut s = flight_state(&p);
        s.vel = Vector4::zeros();
        let load = SpringLoad {
            spring: LeafSpringParams::default(),
            gear: GearCoupling::default(),
            slider_x: 0.07,
        };
        s.pos[KNEE] = deg(80.0);
        let a = flight_dynamics(&p, &s, [0.0, 0.0], load.knee_torque(s.pos[KNEE])).unwrap();
        assert!(a[KNEE] < 0.0);
    }

    #[test]
    fn static_equilibrium_contact_force() {
        let p = LegParams {
            mount: BaseMount::LinearGuide,
            ..LegParams::default()
        };
        let s = crouched(&p);
        // joint torques that hold the whole weight at the foot
        let jac = jacobians(&p, &s);
        let g = gravity_terms(&p, &s);
        let weight = Vector2::new(0.0, p.total_mass * p.gravity);
        let tau = g - jac.contact.transpose() * weight;
        let (acc, f) = stance_dynamics(&p, &s, [tau[HIP], tau[KNEE]], 0.0).unwrap();
        assert!(acc.amax() < 1e-9, "{acc}");
        assert!((f.y - p.total_mass * p.gravity).abs() < 1e-6);
        assert!(f.x.abs() < 1e-6);
    }

    #[test]
    fn zero_load_stance_is_at_rest() {
        let p = LegParams {
            gravity: 1e-300,
            ..LegParams::default()
        };
        let s = crouched(&p);
        let (acc, f) = stance_dynamics(&p, &s, [0.0, 0.0], 0.0).unwrap();
        assert!(acc.amax() < 1e-12);
        assert!(f.amax() < 1e-12);
    }

    #[test]
    fn stance_constraint_residual() {
        let p = LegParams::default();
        let mut s = crouched(&p);
        s.vel = Vector4::new(0.2, 0.0, 0.0, 0.0);
        s.vel = project_velocity(&p, &s, true).unwrap();
        let (acc, _) = stance_dynamics(&p, &s, [3.0, -8.0], -2.0).unwrap();
        let j = jacobians(&p, &s);
        let res = j.contact * acc + j.contact_dot * s.vel;
        assert!(res.amax() < 1e-8, "{res}");
    }

    #[test]
    fn touchdown_zeroes_foot_velocity() {
        let p = LegParams::default();
        let mut s = crouched(&p);
        s.phase = ContactPhase::Flight;
        s.pos[BASE_Z] += 0.05;
        let mut t = 0.0;
        let dt = 1e-4;
        loop {
            let out = step(&p, &s, [0.0, 0.0], None, dt, None).unwrap();
            s = out.state;
            t += dt;
            if out.events.iter().any(|e| e.kind == LegEventKind::Touchdown) {
                break;
            }
            assert!(t < 1.0);
        }
        let foot_vel = jacobians(&p, &s).contact * s.vel;
        assert!(foot_vel.amax() < 1e-8, "{foot_vel}");
    }

    #[test]
    fn liftoff_then_touchdown_is_impulse_free() {
        let p = LegParams::default();
        let mut s = crouched(&p);
        s.vel = Vector4::new(0.1, 0.3, -0.4, -1.2);
        s.vel = project_velocity(&p, &s, true).unwrap();
        let flying = lift_off(&s);
        let back = touch_down(&p, &flying).unwrap();
        assert!((back.vel - s.vel).amax() < 1e-9);
    }

    #[test]
    fn passive_flight_conserves_energy() {
        let p = LegParams::default();
        let load = SpringLoad {
            spring: LeafSpringParams::default(),
            gear: GearCoupling::default(),
            slider_x: 0.07,
        };
        let mut s = flight_state(&p);
        s.pos[BASE_Z] += 5.0;
        s.pos[KNEE] = deg(75.0);
        let energy = |s: &LegState| {
            kinetic_energy(&p, s) + potential_energy(&p, s) + load.energy(s.pos[KNEE])
        };
        let e0 = energy(&s);
        let mut worst: f64 = 0.0;
        for _ in 0..5000 {
            s = step(&p, &s, [0.0, 0.0], Some(&load), 1e-4, None)
                .unwrap()
                .state;
            worst = worst.max((energy(&s) - e0).abs());
        }
        assert!(worst / e0.abs() < 1e-3, "drift {}", worst / e0.abs());
    }
}
