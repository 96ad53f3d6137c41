//! Closed-loop hopping simulation: leg dynamics at the physics rate, the
//! controller and phase machine at the control rate.

use nalgebra::Vector2;
use serde::{Deserialize, Serialize};

use crate::actuator::{BallScrewDrive, GearCoupling, LeafSpringParams};
use crate::error::{Result, VllsaError};
use crate::fsm::{
    stiffness_motor_power, ActuationMode, FsmEvent, HopMachine, HopPhase, HopPlan,
    StiffnessSchedule,
};
use crate::harness::motor::MotorModel;
use crate::harness::trace::TraceRecord;
use crate::leg::{
    self, BaseMount, ContactPhase, LegEventKind, LegParams, LegState, SpringLoad, BASE_X, BASE_Z,
    HIP, KNEE,
};
use crate::vmc::{self, ContactEstimate};

/// Box obstacle standing on the ground.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Obstacle {
    /// Near face, m.
    pub x: f64,
    pub width: f64,
    pub height: f64,
    /// Required clearance around the box, m.
    pub margin: f64,
}

impl Default for Obstacle {
    fn default() -> Self {
        Self {
            x: 1.5,
            width: 0.05,
            height: 0.24,
            margin: 0.02,
        }
    }
}

impl Obstacle {
    pub fn validate(&self) -> Result<()> {
        if !(self.height >= 0.0 && self.width >= 0.0 && self.margin >= 0.0 && self.x.is_finite()) {
            return Err(VllsaError::invalid(
                "obstacle dimensions must be non-negative",
            ));
        }
        Ok(())
    }

    pub fn far_edge(&self) -> f64 {
        self.x + self.width
    }

    /// Whether segment `a`-`b` comes within the margin of the box.
    pub fn hits_segment(&self, a: Vector2<f64>, b: Vector2<f64>) -> bool {
        if self.height <= 0.0 {
            return false;
        }
        let (x0, x1) = (self.x - self.margin, self.far_edge() + self.margin);
        let z1 = self.height + self.margin;
        // clip the segment to the inflated box slab in x, then test z
        let (lo, hi) = if a.x <= b.x { (a, b) } else { (b, a) };
        if hi.x < x0 || lo.x > x1 {
            return false;
        }
        let z_at = |x: f64| {
            if (hi.x - lo.x).abs() < 1e-15 {
                lo.y.min(hi.y)
            } else {
                lo.y + (hi.y - lo.y) * (x - lo.x) / (hi.x - lo.x)
            }
        };
        let xa = lo.x.max(x0);
        let xb = hi.x.min(x1);
        z_at(xa).min(z_at(xb)) < z1
    }

    /// The leg segment of a trace sample that violates the clearance, if any.
    pub fn hits_record(&self, r: &TraceRecord) -> Option<&'static str> {
        let hip = Vector2::new(r.x_b, r.z_b);
        let knee = Vector2::new(r.knee_x, r.knee_z);
        let foot = Vector2::new(r.foot_x, r.foot_z);
        [("thigh", hip, knee), ("shank", knee, foot)]
            .into_iter()
            .find(|(_, a, b)| self.hits_segment(*a, *b))
            .map(|(name, _, _)| name)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimSettings {
    pub dt: f64,
    pub control_period: f64,
    /// Simulated time after which the run stops, s.
    pub duration: f64,
    /// Time added after the last hop's settling before stopping, s.
    pub tail: f64,
    /// Extra time allowed for the landing prediction, s.
    pub landing_margin: f64,
}

impl Default for SimSettings {
    fn default() -> Self {
        Self {
            dt: 1e-4,
            control_period: 1e-3,
            duration: 5.0,
            tail: 0.3,
            landing_margin: 0.03,
        }
    }
}

impl SimSettings {
    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0
            && self.control_period >= self.dt
            && self.duration > 0.0
            && self.tail >= 0.0)
        {
            return Err(VllsaError::invalid(
                "time steps and duration must be positive",
            ));
        }
        let ratio = self.control_period / self.dt;
        if (ratio - ratio.round()).abs() > 1e-9 {
            return Err(VllsaError::invalid(
                "control period must be a whole number of physics steps",
            ));
        }
        Ok(())
    }

    pub fn substeps(&self) -> usize {
        (self.control_period / self.dt).round() as usize
    }
}

/// Everything one hopping run needs.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSetup {
    pub mode: ActuationMode,
    pub leg: LegParams,
    pub spring: LeafSpringParams,
    pub gear: GearCoupling,
    pub drive: BallScrewDrive,
    pub motor: MotorModel,
    pub schedule: StiffnessSchedule,
    pub plan: HopPlan,
    pub sim: SimSettings,
    pub start_x: f64,
    pub obstacle: Option<Obstacle>,
}

impl RunSetup {
    pub fn validate(&self) -> Result<()> {
        self.leg.validate()?;
        self.spring.validate()?;
        self.gear.validate()?;
        self.drive.validate()?;
        self.motor.validate()?;
        self.schedule.validate(&self.spring)?;
        self.plan.validate()?;
        self.sim.validate()?;
        for r in [
            self.plan.crouch,
            self.plan.extend,
            self.plan.retract,
            self.plan.touchdown,
        ] {
            vmc::VirtualTarget::at(r[0], r[1]).validate(&self.leg)?;
        }
        if let Some(o) = &self.obstacle {
            o.validate()?;
        }
        Ok(())
    }
}

/// Timestamped entry of the event log.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LogEntry {
    pub t: f64,
    pub hop: u32,
    pub label: String,
    pub detail: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Collision {
    pub t: f64,
    pub segment: &'static str,
}

#[derive(Debug)]
pub struct RunOutput {
    pub mode: ActuationMode,
    pub trace: Vec<TraceRecord>,
    pub log: Vec<LogEntry>,
    pub machine: HopMachine,
    pub collision: Option<Collision>,
    /// Set when the run ended early on a fault; the trace is partial.
    pub fault: Option<VllsaError>,
    pub audit: EnergyAudit,
}

/// Mechanical energy balance of a run, J.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct EnergyAudit {
    pub motor_work: f64,
    pub spring_work: f64,
    pub impact_loss: f64,
    pub delta_kinetic: f64,
    pub delta_potential: f64,
    /// Sum of the magnitudes of all work terms.
    pub throughput: f64,
}

impl EnergyAudit {
    /// Work in minus the change in mechanical energy and the impact losses.
    pub fn residual(&self) -> f64 {
        self.motor_work + self.spring_work
            - self.delta_kinetic
            - self.delta_potential
            - self.impact_loss
    }

    pub fn relative_residual(&self) -> f64 {
        if self.throughput > 0.0 {
            self.residual().abs() / self.throughput
        } else {
            self.residual().abs()
        }
    }
}

impl RunOutput {
    pub fn events(&self, label: &str) -> impl Iterator<Item = &LogEntry> {
        let label = label.to_string();
        self.log.iter().filter(move |e| e.label == label)
    }
}

struct Energy {
    hip: f64,
    knee: f64,
    stiffness: f64,
}

struct Detector {
    settle_since: Option<f64>,
    stance_since: Option<f64>,
    landing_soon_sent: bool,
    retract_logged: bool,
}

/// Time until a ballistic body at height `z` reaches the height `z_td`.
fn time_to_touchdown(z: f64, vz: f64, z_td: f64, g: f64) -> f64 {
    let disc = vz * vz + 2.0 * g * (z - z_td);
    if disc <= 0.0 {
        return 0.0;
    }
    ((vz + disc.sqrt()) / g).max(0.0)
}

/// Runs one hopping experiment to completion or to the first fault.
pub fn simulate(setup: &RunSetup) -> Result<RunOutput> {
    setup.validate()?;
    let mut leg_params = setup.leg;
    let anchor_x = (leg_params.mount == BaseMount::LinearGuide).then_some(setup.start_x);
    let c = setup.plan.crouch;
    let mut state = LegState::standing(&leg_params, setup.start_x - c[0], c[0], c[1])?;
    let mut machine = HopMachine::new(setup.mode, setup.plan.clone(), setup.schedule)?;
    let mut out = RunOutput {
        mode: setup.mode,
        trace: Vec::new(),
        log: Vec::new(),
        machine: machine.clone(),
        collision: None,
        fault: None,
        audit: EnergyAudit::default(),
    };
    let ke0 = leg::kinetic_energy(&leg_params, &state);
    let pe0 = leg::potential_energy(&leg_params, &state);
    leg_params.mount = setup.leg.mount;
    let g = leg_params.gravity;
    let sub = setup.sim.substeps();
    let dt = setup.sim.dt;
    let period = setup.sim.control_period;
    let n_ticks = (setup.sim.duration / period).round() as usize;
    let band = setup.plan.height_band;
    let engaged = setup.mode.spring_engaged();
    let mut energy = Energy {
        hip: 0.0,
        knee: 0.0,
        stiffness: 0.0,
    };
    let mut det = Detector {
        settle_since: None,
        stance_since: None,
        landing_soon_sent: false,
        retract_logged: false,
    };
    let mut pending: Vec<FsmEvent> = Vec::new();
    // deflection at the touchdown pose sets the lead of the stiffening move
    let td = setup.plan.touchdown;
    let q_td = setup
        .gear
        .deflection_unchecked(leg_params.inverse_kinematics(td[0], td[1])?.1);
    // centre-of-mass height when the foot touches down in that pose
    let z_com_td = leg::center_of_mass(
        &leg_params,
        &LegState::standing(&leg_params, 0.0, td[0], td[1])?,
    )
    .0
    .y;
    let mut stop_at: Option<f64> = None;
    let log = |out: &mut RunOutput, t: f64, hop: u32, label: &str, detail: String| {
        out.log.push(LogEntry {
            t,
            hop,
            label: label.to_string(),
            detail,
        });
    };

    for tick in 0..n_ticks {
        let t = tick as f64 * period;
        if let Some(ts) = stop_at {
            if t >= ts {
                break;
            }
        }
        let kin = leg::forward_kinematics(&leg_params, &state);
        let h = kin.r.y;
        let q = setup.gear.deflection_unchecked(state.pos[KNEE]);
        let airborne = state.phase == ContactPhase::Flight;

        // control-rate triggers
        let phase = machine.phase();
        match phase {
            HopPhase::Crouch if t + 1e-12 >= setup.plan.jump_delay => {
                pending.push(FsmEvent::JumpCommand)
            }
            HopPhase::Stance => {
                let since = *det.stance_since.get_or_insert(t);
                if t - since + 1e-12 >= setup.plan.stance_dwell && machine.hops_remaining() {
                    pending.push(FsmEvent::JumpCommand);
                }
            }
            HopPhase::Extend if h >= machine.plan.extend_for(machine.hop_index())[1] - band => {
                pending.push(FsmEvent::HeightReached)
            }
            HopPhase::FlightRetract
                if machine.retracting(t) && h <= setup.plan.retract[1] + band =>
            {
                pending.push(FsmEvent::RetractReached)
            }
            HopPhase::Landing => {
                if state.vel[BASE_Z].abs() < setup.plan.settle_speed && !airborne {
                    let since = *det.settle_since.get_or_insert(t);
                    if t - since + 1e-12 >= setup.plan.settle_time {
                        pending.push(FsmEvent::Settled);
                    }
                } else {
                    det.settle_since = None;
                }
            }
            _ => {}
        }
        if matches!(phase, HopPhase::FlightRetract | HopPhase::FlightExtend)
            && airborne
            && !det.landing_soon_sent
        {
            let h_td = setup.plan.touchdown[1];
            let (com, com_v) = leg::center_of_mass(&leg_params, &state);
            let t_td = time_to_touchdown(com.y, com_v.y, z_com_td, g);
            let lead =
                setup
                    .schedule
                    .full_span_time(setup.schedule.x_ls, setup.schedule.x_hs, q_td);
            let extended = phase == HopPhase::FlightExtend && h >= h_td - band;
            if extended || t_td <= lead + setup.sim.landing_margin {
                pending.push(FsmEvent::LandingSoon);
                det.landing_soon_sent = true;
            }
        }
        for ev in pending.drain(..) {
            let before = machine.phase();
            let moves_before = machine.slider_moves().len();
            let changed = match machine.handle(t, ev, q) {
                Ok(c) => c,
                Err(e) => {
                    out.fault = Some(fault(&machine, t, e));
                    out.machine = machine.clone();
                    close_audit(&mut out.audit, &leg_params, &state, ke0, pe0);
                    return Ok(out);
                }
            };
            if machine.slider_moves().len() > moves_before {
                let m = machine.slider_moves()[moves_before];
                log(
                    &mut out,
                    t,
                    m.hop,
                    "slider",
                    format!("{:.4} -> {:.4} m over {:.3} s", m.from, m.to, m.duration),
                );
            }
            if changed {
                let now = machine.phase();
                log(
                    &mut out,
                    t,
                    machine.hop_index(),
                    now.as_str(),
                    format!("from {} on {}", before, ev.as_str()),
                );
                match now {
                    HopPhase::Extend => {
                        det.landing_soon_sent = false;
                        det.retract_logged = false;
                        det.stance_since = None;
                    }
                    HopPhase::Landing => det.settle_since = None,
                    HopPhase::Stance => {
                        det.stance_since = Some(t);
                        if !machine.hops_remaining() && stop_at.is_none() {
                            stop_at = Some(t + setup.sim.tail);
                        }
                    }
                    _ => {}
                }
            }
        }
        if machine.retracting(t) && !det.retract_logged {
            det.retract_logged = true;
            log(
                &mut out,
                t,
                machine.hop_index(),
                "retract",
                "retraction target active".to_string(),
            );
        }

        // controller
        let slider_x = machine.slider_x(t);
        let load = SpringLoad {
            spring: setup.spring,
            gear: setup.gear,
            slider_x,
        };
        let spring_knee = if engaged {
            load.knee_torque(state.pos[KNEE])
        } else {
            0.0
        };
        let (target, gains) = machine.command(t);
        let estimate = if machine.phase().expects_contact() {
            ContactEstimate::stance(&leg_params)
        } else {
            ContactEstimate::flight()
        };
        let cmd = vmc::control(&leg_params, &state, &gains, &target, &estimate, spring_knee);

        // sample at the start of the tick
        let p_hip = setup.motor.electrical_power(cmd.motor[0], state.vel[HIP]);
        let p_knee = setup.motor.electrical_power(cmd.motor[1], state.vel[KNEE]);
        let p_stiff = if engaged {
            stiffness_motor_power(
                &setup.schedule,
                machine.slider(),
                t,
                q,
                &setup.spring,
                &setup.drive,
            )
        } else {
            0.0
        };
        let contact_force = if state.phase == ContactPhase::Stance {
            leg::stance_dynamics(&leg_params, &state, cmd.motor, spring_knee)
                .map(|(_, f)| f)
                .unwrap_or_else(|_| Vector2::zeros())
        } else {
            Vector2::zeros()
        };
        out.trace.push(TraceRecord {
            t,
            hop: machine.hop_index(),
            phase: machine.phase(),
            mode: setup.mode,
            in_contact: state.phase == ContactPhase::Stance,
            retracting: machine.retracting(t),
            x_b: state.pos[BASE_X],
            z_b: state.pos[BASE_Z],
            theta_h: state.pos[HIP],
            theta_k: state.pos[KNEE],
            vx_b: state.vel[BASE_X],
            vz_b: state.vel[BASE_Z],
            omega_h: state.vel[HIP],
            omega_k: state.vel[KNEE],
            q,
            slider_x,
            tau_hip_motor: cmd.motor[0],
            tau_knee_motor: cmd.motor[1],
            tau_vllsa: spring_knee,
            fc_x: contact_force.x,
            fc_z: contact_force.y,
            i_hip: setup.motor.current(cmd.motor[0]),
            i_knee: setup.motor.current(cmd.motor[1]),
            p_hip,
            p_knee,
            p_stiffness: p_stiff,
            e_hip: energy.hip,
            e_knee: energy.knee,
            e_stiffness: energy.stiffness,
            foot_x: kin.foot.x,
            foot_z: kin.foot.y,
            knee_x: kin.knee.x,
            knee_z: kin.knee.y,
            leg_h: h,
        });
        if let (Some(o), None) = (setup.obstacle, out.collision) {
            if let Some(name) = o.hits_record(out.trace.last().expect("sample just pushed")) {
                out.collision = Some(Collision { t, segment: name });
                log(
                    &mut out,
                    t,
                    machine.hop_index(),
                    "collision",
                    format!("{name} segment"),
                );
            }
        }

        // physics
        let contact_before = state.phase;
        let mut tick_events: Vec<(f64, LegEventKind)> = Vec::new();
        for k in 0..sub {
            let ts = t + k as f64 * dt;
            let load = SpringLoad {
                spring: setup.spring,
                gear: setup.gear,
                slider_x: machine.slider_x(ts),
            };
            let spring = engaged.then_some(&load);
            let before = state;
            let step = match leg::step(&leg_params, &state, cmd.motor, spring, dt, anchor_x) {
                Ok(s) => s,
                Err(e) => {
                    out.fault = Some(fault(&machine, ts, e));
                    out.machine = machine.clone();
                    close_audit(&mut out.audit, &leg_params, &state, ke0, pe0);
                    return Ok(out);
                }
            };
            let w_avg = 0.5 * (before.vel + step.state.vel);
            let audit = &mut out.audit;
            let motor_work = dt * (cmd.motor[0] * w_avg[HIP] + cmd.motor[1] * w_avg[KNEE]);
            let spring_torque = spring.map_or(0.0, |l| l.knee_torque(before.pos[KNEE]));
            let spring_work = dt * spring_torque * w_avg[KNEE];
            audit.motor_work += motor_work;
            audit.spring_work += spring_work;
            audit.impact_loss += step.impact_loss;
            audit.throughput += motor_work.abs() + spring_work.abs() + step.impact_loss;
            state = step.state;
            let qk = setup.gear.deflection_unchecked(before.pos[KNEE]);
            energy.hip += dt
                * setup
                    .motor
                    .electrical_power(cmd.motor[0], before.vel[HIP])
                    .max(0.0);
            energy.knee += dt
                * setup
                    .motor
                    .electrical_power(cmd.motor[1], before.vel[KNEE])
                    .max(0.0);
            if engaged {
                energy.stiffness += dt
                    * stiffness_motor_power(
                        &setup.schedule,
                        machine.slider(),
                        ts,
                        qk,
                        &setup.spring,
                        &setup.drive,
                    );
            }
            tick_events.extend(step.events.iter().map(|ev| (ts + ev.offset, ev.kind)));
        }
        // contact is sensed at the control rate; chatter inside a tick is
        // not reported
        for (te, kind) in contact_events(contact_before, state.phase, &tick_events) {
            let (ev, label) = match kind {
                LegEventKind::Touchdown => (FsmEvent::Touchdown, "touchdown"),
                LegEventKind::Liftoff => (FsmEvent::Liftoff, "liftoff"),
                _ => (FsmEvent::Apex, "apex"),
            };
            pending.push(ev);
            let slider = machine.slider_x(te);
            log(
                &mut out,
                te,
                machine.hop_index(),
                label,
                format!("slider {slider:.4} m"),
            );
        }
    }
    out.machine = machine;
    close_audit(&mut out.audit, &leg_params, &state, ke0, pe0);
    Ok(out)
}

fn close_audit(audit: &mut EnergyAudit, params: &LegParams, state: &LegState, ke0: f64, pe0: f64) {
    audit.delta_kinetic = leg::kinetic_energy(params, state) - ke0;
    audit.delta_potential = leg::potential_energy(params, state) - pe0;
}

/// Tick-level contact and apex events from the physics events of a tick.
fn contact_events(
    before: ContactPhase,
    after: ContactPhase,
    events: &[(f64, LegEventKind)],
) -> Vec<(f64, LegEventKind)> {
    let mut out = Vec::new();
    let first = |k: LegEventKind| events.iter().find(|(_, e)| *e == k).map(|(t, _)| *t);
    let last = |k: LegEventKind| events.iter().rev().find(|(_, e)| *e == k).map(|(t, _)| *t);
    match (before, after) {
        (ContactPhase::Stance, ContactPhase::Flight) => {
            if let Some(t) = first(LegEventKind::Liftoff) {
                out.push((t, LegEventKind::Liftoff));
            }
        }
        (ContactPhase::Flight, ContactPhase::Stance) => {
            if let Some(t) = last(LegEventKind::Touchdown) {
                out.push((t, LegEventKind::Touchdown));
            }
        }
        _ => {}
    }
    if let Some(t) = first(LegEventKind::Apex) {
        out.push((t, LegEventKind::Apex));
    }
    out.sort_by(|a, b| a.0.total_cmp(&b.0));
    out
}

fn fault(machine: &HopMachine, t: f64, e: VllsaError) -> VllsaError {
    match e {
        VllsaError::IllegalEvent { .. } => e,
        other => VllsaError::Fault {
            phase: machine.phase(),
            t,
            source: Box::new(other),
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn obstacle_segment_tests() {
        let o = Obstacle::default();
        let v = |x, z| Vector2::new(x, z);
        assert!(o.hits_segment(v(1.52, 0.5), v(1.52, 0.1)));
        assert!(!o.hits_segment(v(1.52, 0.6), v(1.52, 0.3)));
        assert!(!o.hits_segment(v(1.0, 0.0), v(1.2, 0.0)));
        // within the margin above the box
        assert!(o.hits_segment(v(1.40, 0.25), v(1.60, 0.25)));
        // crossing diagonally through the corner region
        assert!(o.hits_segment(v(1.45, 0.10), v(1.70, 0.40)));
        let flat = Obstacle { height: 0.0, ..o };
        assert!(!flat.hits_segment(v(1.52, 0.5), v(1.52, 0.0)));
    }

    #[test]
    fn ballistic_prediction() {
        let t = time_to_touchdown(0.7, 0.0, 0.5, 9.81);
        assert!((t - (2.0 * 0.2 / 9.81f64).sqrt()).abs() < 1e-12);
        assert_eq!(time_to_touchdown(0.4, -1.0, 0.5, 9.81), 0.0);
    }
}
