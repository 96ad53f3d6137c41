//! Event-triggered hopping phase machine and the slider schedule of the
//! variable-stiffness mode.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::actuator::{baseline_power, deg, BallScrewDrive, LeafSpringParams};
use crate::error::{Result, VllsaError};
use crate::vmc::{VirtualTarget, VmcGains};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActuationMode {
    /// Direct motor drive; the spring is disengaged.
    Dmd,
    /// Constant low stiffness.
    Cls,
    /// Constant high stiffness.
    Chs,
    /// Variable stiffness, switched per phase.
    Vs,
}

impl ActuationMode {
    pub const ALL: [ActuationMode; 4] = [Self::Dmd, Self::Cls, Self::Chs, Self::Vs];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Dmd => "dmd",
            Self::Cls => "cls",
            Self::Chs => "chs",
            Self::Vs => "vs",
        }
    }

    pub fn spring_engaged(self) -> bool {
        self != Self::Dmd
    }

    /// Slider position held from the start of a run.
    pub fn initial_slider(self, schedule: &StiffnessSchedule) -> f64 {
        match self {
            Self::Dmd | Self::Cls => schedule.x_ls,
            Self::Chs | Self::Vs => schedule.x_hs,
        }
    }
}

impl fmt::Display for ActuationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ActuationMode {
    type Err = VllsaError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "dmd" => Ok(Self::Dmd),
            "cls" => Ok(Self::Cls),
            "chs" => Ok(Self::Chs),
            "vs" => Ok(Self::Vs),
            other => Err(VllsaError::Config(format!(
                "unknown actuation mode '{other}'"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HopPhase {
    Crouch,
    Extend,
    FlightRetract,
    FlightExtend,
    Landing,
    Stance,
}

impl HopPhase {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Crouch => "crouch",
            Self::Extend => "extend",
            Self::FlightRetract => "flight_retract",
            Self::FlightExtend => "flight_extend",
            Self::Landing => "landing",
            Self::Stance => "stance",
        }
    }

    /// Phases that assume the foot carries the body.
    pub fn expects_contact(self) -> bool {
        matches!(
            self,
            Self::Crouch | Self::Extend | Self::Landing | Self::Stance
        )
    }

    /// Whether `next` may follow `self`.
    pub fn may_precede(self, next: HopPhase) -> bool {
        use HopPhase::*;
        matches!(
            (self, next),
            (Crouch, Extend)
                | (Extend, FlightRetract)
                | (FlightRetract, FlightExtend)
                | (FlightRetract, Landing)
                | (FlightExtend, Landing)
                | (Landing, Stance)
                | (Stance, Extend)
        )
    }
}

impl fmt::Display for HopPhase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for HopPhase {
    type Err = VllsaError;

    fn from_str(s: &str) -> Result<Self> {
        [
            Self::Crouch,
            Self::Extend,
            Self::FlightRetract,
            Self::FlightExtend,
            Self::Landing,
            Self::Stance,
        ]
        .into_iter()
        .find(|p| p.as_str() == s)
        .ok_or_else(|| VllsaError::Config(format!("unknown phase '{s}'")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FsmEvent {
    /// Operator command to start a hop.
    JumpCommand,
    /// Leg height reached the extension target.
    HeightReached,
    Liftoff,
    /// Leg height reached the retraction target.
    RetractReached,
    Apex,
    Touchdown,
    /// Predicted touchdown is within the low-to-high traversal time.
    LandingSoon,
    /// Vertical base speed stayed small for the settling window.
    Settled,
}

impl FsmEvent {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::JumpCommand => "jump_command",
            Self::HeightReached => "height_reached",
            Self::Liftoff => "liftoff",
            Self::RetractReached => "retract_reached",
            Self::Apex => "apex",
            Self::Touchdown => "touchdown",
            Self::LandingSoon => "landing_soon",
            Self::Settled => "settled",
        }
    }
}

/// Slider targets and measured traversal durations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StiffnessSchedule {
    pub x_ls: f64,
    pub x_hs: f64,
    /// Deflection up to which the low-load durations apply.
    pub q_band: f64,
    /// Full-span high-to-low durations: `[low load, high load]`.
    pub hs_to_ls: [f64; 2],
    /// Full-span low-to-high durations: `[low load, high load]`.
    pub ls_to_hs: [f64; 2],
    /// Stiffness-motor power while holding the slider, W.
    pub hold_power: f64,
}

impl Default for StiffnessSchedule {
    fn default() -> Self {
        Self {
            x_ls: 0.035,
            x_hs: 0.070,
            q_band: deg(12.0),
            hs_to_ls: [0.28, 0.35],
            ls_to_hs: [0.20, 0.29],
            hold_power: 1.20,
        }
    }
}

impl StiffnessSchedule {
    pub fn validate(&self, spring: &LeafSpringParams) -> Result<()> {
        if !(self.x_ls >= 0.0 && self.x_ls < self.x_hs && self.x_hs < spring.slider_cap()) {
            return Err(VllsaError::invalid(format!(
                "slider targets must satisfy 0 <= x_ls < x_hs < {:.4} m",
                spring.slider_cap()
            )));
        }
        if self
            .hs_to_ls
            .iter()
            .chain(self.ls_to_hs.iter())
            .any(|t| !(*t > 0.0))
        {
            return Err(VllsaError::invalid("traversal times must be positive"));
        }
        if !(self.hold_power >= 0.0) {
            return Err(VllsaError::invalid("hold power must be non-negative"));
        }
        Ok(())
    }

    pub fn span(&self) -> f64 {
        self.x_hs - self.x_ls
    }

    /// Full-span duration for a move in the direction `from -> to` at
    /// deflection `q`.
    pub fn full_span_time(&self, from: f64, to: f64, q: f64) -> f64 {
        let band = usize::from(q.abs() > self.q_band);
        if to < from {
            self.hs_to_ls[band]
        } else {
            self.ls_to_hs[band]
        }
    }

    /// Duration of a move `from -> to`, proportional to the distance.
    pub fn traversal_time(&self, from: f64, to: f64, q: f64) -> f64 {
        self.full_span_time(from, to, q) * (to - from).abs() / self.span()
    }
}

/// Constant-rate slider motion between two positions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SliderProfile {
    pub from: f64,
    pub to: f64,
    pub t_start: f64,
    pub duration: f64,
}

impl SliderProfile {
    pub fn holding(x: f64) -> Self {
        Self {
            from: x,
            to: x,
            t_start: 0.0,
            duration: 0.0,
        }
    }

    pub fn position(&self, t: f64) -> f64 {
        if self.duration <= 0.0 || t >= self.t_start + self.duration {
            return self.to;
        }
        if t <= self.t_start {
            return self.from;
        }
        self.from + (self.to - self.from) * (t - self.t_start) / self.duration
    }

    pub fn velocity(&self, t: f64) -> f64 {
        if self.is_moving(t) {
            (self.to - self.from) / self.duration
        } else {
            0.0
        }
    }

    pub fn is_moving(&self, t: f64) -> bool {
        self.duration > 0.0 && t >= self.t_start && t < self.t_start + self.duration
    }

    pub fn arrival(&self) -> f64 {
        self.t_start + self.duration
    }

    /// Starts a move toward `target` from wherever the slider is at `t`.
    /// Returns whether the slider has to move.
    pub fn command(&mut self, schedule: &StiffnessSchedule, t: f64, target: f64, q: f64) -> bool {
        let here = self.position(t);
        if self.is_moving(t) && (target - self.to).abs() < 1e-12 {
            return false;
        }
        if (target - here).abs() < 1e-12 {
            *self = Self {
                from: target,
                to: target,
                t_start: t,
                duration: 0.0,
            };
            return false;
        }
        *self = Self {
            from: here,
            to: target,
            t_start: t,
            duration: schedule.traversal_time(here, target, q),
        };
        true
    }
}

pub fn slider_position(profile: &SliderProfile, t: f64) -> f64 {
    profile.position(t)
}

/// Electrical power of the stiffness motor at time `t`.
///
/// Traversing draws the baseline power plus the work rate against the
/// holding force at the profile speed; holding draws the static power.
pub fn stiffness_motor_power(
    schedule: &StiffnessSchedule,
    profile: &SliderProfile,
    t: f64,
    q: f64,
    spring: &LeafSpringParams,
    drive: &BallScrewDrive,
) -> f64 {
    if profile.is_moving(t) {
        let x = profile.position(t);
        baseline_power(drive) + (spring.force_at(q.abs(), x) * profile.velocity(t)).abs()
    } else {
        schedule.hold_power
    }
}

/// Phase targets and gains of a hopping experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HopPlan {
    /// `[d, h]` held before the first jump and after landing.
    pub crouch: [f64; 2],
    pub extend: [f64; 2],
    pub retract: [f64; 2],
    /// Target while extending back before touchdown.
    pub touchdown: [f64; 2],
    /// Extension target during the acceleration hops, if different.
    pub accel_extend: Option<[f64; 2]>,
    pub accel_hops: u32,
    /// Whether the acceleration hops retract the leg in flight. When they
    /// do not, the leg holds the touchdown pose and the slider stays put.
    pub accel_retract: bool,
    pub hops: u32,
    pub thrust_gains: VmcGains,
    pub retract_gains: VmcGains,
    pub landing_gains: VmcGains,
    /// In the variable-stiffness mode, hold the extension target until the
    /// slider reaches low stiffness before retracting.
    pub await_low_stiffness: bool,
    /// Time in the initial crouch before the first jump, s.
    pub jump_delay: f64,
    /// Time in stance before the next jump, s.
    pub stance_dwell: f64,
    /// Hysteresis on the height triggers, m.
    pub height_band: f64,
    pub settle_speed: f64,
    pub settle_time: f64,
}

impl HopPlan {
    pub fn in_place() -> Self {
        Self {
            crouch: [0.0, 0.255],
            extend: [0.0, 0.500],
            retract: [0.0, 0.450],
            touchdown: [0.0, 0.500],
            accel_extend: None,
            accel_hops: 0,
            accel_retract: false,
            hops: 1,
            thrust_gains: VmcGains::new([100.0, 2000.0], [10.0, 20.0]),
            retract_gains: VmcGains::new([100.0, 2000.0], [10.0, 20.0]),
            landing_gains: VmcGains::new([100.0, 1500.0], [10.0, 120.0]),
            await_low_stiffness: true,
            jump_delay: 0.3,
            stance_dwell: 0.2,
            height_band: 0.002,
            settle_speed: 0.02,
            settle_time: 0.05,
        }
    }

    pub fn forward() -> Self {
        Self {
            crouch: [0.0, 0.250],
            extend: [0.068, 0.450],
            retract: [0.100, 0.300],
            touchdown: [0.0, 0.450],
            accel_extend: Some([0.074, 0.450]),
            accel_hops: 2,
            accel_retract: false,
            hops: 3,
            thrust_gains: VmcGains::new([800.0, 800.0], [5.0, 5.0]),
            retract_gains: VmcGains::new([800.0, 800.0], [5.0, 5.0]),
            landing_gains: VmcGains::new([300.0, 1500.0], [10.0, 120.0]),
            await_low_stiffness: true,
            jump_delay: 0.3,
            stance_dwell: 0.0,
            height_band: 0.002,
            settle_speed: 0.02,
            settle_time: 0.05,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [
            ("crouch", self.crouch),
            ("extend", self.extend),
            ("retract", self.retract),
            ("touchdown", self.touchdown),
        ];
        for (name, r) in all.iter().chain(
            self.accel_extend
                .as_ref()
                .map(|r| ("accel_extend", *r))
                .iter(),
        ) {
            if !(r[1] > 0.0 && r.iter().all(|v| v.is_finite())) {
                return Err(VllsaError::invalid(format!(
                    "{name} height must be positive"
                )));
            }
        }
        if !(self.retract[1] < self.extend[1]) {
            return Err(VllsaError::invalid(format!(
                "retraction height {} m must be below extension height {} m",
                self.retract[1], self.extend[1]
            )));
        }
        if let Some(a) = self.accel_extend {
            if !(self.retract[1] < a[1]) {
                return Err(VllsaError::invalid(
                    "retraction height must be below the acceleration extension height",
                ));
            }
        }
        if self.hops == 0 {
            return Err(VllsaError::invalid("a plan needs at least one hop"));
        }
        if self.accel_hops >= self.hops && self.accel_hops > 0 {
            return Err(VllsaError::invalid(
                "acceleration hops must precede at least one clearance hop",
            ));
        }
        self.thrust_gains.validate()?;
        self.retract_gains.validate()?;
        self.landing_gains.validate()?;
        for (name, v) in [
            ("jump_delay", self.jump_delay),
            ("stance_dwell", self.stance_dwell),
            ("height_band", self.height_band),
            ("settle_speed", self.settle_speed),
            ("settle_time", self.settle_time),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(VllsaError::invalid(format!("{name} must be non-negative")));
            }
        }
        Ok(())
    }

    /// Extension target of hop `index` (zero based).
    pub fn extend_for(&self, index: u32) -> [f64; 2] {
        match self.accel_extend {
            Some(a) if index < self.accel_hops => a,
            _ => self.extend,
        }
    }

    /// Whether hop `index` retracts the leg in flight.
    pub fn retracts(&self, index: u32) -> bool {
        index >= self.accel_hops || self.accel_retract
    }

    /// VMC target and gains for a phase of hop `index`.
    pub fn command(&self, phase: HopPhase, index: u32) -> (VirtualTarget, VmcGains) {
        let (r, gains) = match phase {
            HopPhase::FlightRetract if !self.retracts(index) => (self.touchdown, self.thrust_gains),
            HopPhase::Crouch | HopPhase::Stance | HopPhase::Landing => {
                (self.crouch, self.landing_gains)
            }
            HopPhase::Extend => (self.extend_for(index), self.thrust_gains),
            HopPhase::FlightRetract => (self.retract, self.retract_gains),
            HopPhase::FlightExtend => (self.touchdown, self.thrust_gains),
        };
        (VirtualTarget::at(r[0], r[1]), gains)
    }
}

/// Slider request issued with a transition.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SliderCommand {
    Hold,
    MoveTo(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transition {
    pub phase: HopPhase,
    pub slider: SliderCommand,
}

/// Pure transition function of the phase machine. `retracts` tells
/// whether the current hop retracts the leg in flight.
///
/// Events that carry no meaning in a phase are ignored; events that
/// contradict the phase (for example a touchdown while the foot is
/// already planted for the push-off) are errors.
pub fn advance(
    phase: HopPhase,
    event: FsmEvent,
    mode: ActuationMode,
    schedule: &StiffnessSchedule,
    retracts: bool,
    t: f64,
) -> Result<Transition> {
    use FsmEvent as E;
    use HopPhase as P;
    let stay = Transition {
        phase,
        slider: SliderCommand::Hold,
    };
    let vs = mode == ActuationMode::Vs;
    let go = |next: HopPhase, slider: Option<f64>| Transition {
        phase: next,
        slider: slider
            .filter(|_| vs)
            .map_or(SliderCommand::Hold, SliderCommand::MoveTo),
    };
    let illegal = || VllsaError::IllegalEvent {
        phase,
        event: event.as_str().to_string(),
        t,
    };
    match (phase, event) {
        (P::Crouch, E::JumpCommand) | (P::Stance, E::JumpCommand) => {
            Ok(go(P::Extend, Some(schedule.x_hs)))
        }
        (
            P::Crouch | P::Stance,
            E::Settled | E::Apex | E::HeightReached | E::RetractReached | E::LandingSoon,
        ) => Ok(stay),
        (P::Crouch | P::Stance, E::Liftoff | E::Touchdown) => Err(illegal()),

        (P::Extend, E::HeightReached | E::Liftoff) => {
            Ok(go(P::FlightRetract, retracts.then_some(schedule.x_ls)))
        }
        (P::Extend, E::Settled | E::RetractReached | E::Apex | E::LandingSoon) => Ok(stay),
        (P::Extend, E::JumpCommand | E::Touchdown) => Err(illegal()),

        (P::FlightRetract, E::RetractReached) => Ok(go(P::FlightExtend, None)),
        (P::FlightRetract, E::LandingSoon) => Ok(go(P::FlightExtend, Some(schedule.x_hs))),
        (P::FlightRetract, E::Touchdown) => Ok(go(P::Landing, Some(schedule.x_hs))),
        (P::FlightRetract, E::Liftoff | E::Apex | E::HeightReached | E::Settled) => Ok(stay),
        (P::FlightRetract, E::JumpCommand) => Err(illegal()),

        (P::FlightExtend, E::LandingSoon) => Ok(Transition {
            phase,
            slider: if vs {
                SliderCommand::MoveTo(schedule.x_hs)
            } else {
                SliderCommand::Hold
            },
        }),
        (P::FlightExtend, E::Touchdown) => Ok(go(P::Landing, Some(schedule.x_hs))),
        (
            P::FlightExtend,
            E::Liftoff | E::Apex | E::HeightReached | E::RetractReached | E::Settled,
        ) => Ok(stay),
        (P::FlightExtend, E::JumpCommand) => Err(illegal()),

        (P::Landing, E::Settled) => Ok(go(P::Stance, None)),
        (
            P::Landing,
            E::Touchdown
            | E::Liftoff
            | E::Apex
            | E::HeightReached
            | E::RetractReached
            | E::LandingSoon,
        ) => Ok(stay),
        (P::Landing, E::JumpCommand) => Err(illegal()),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PhaseChange {
    pub t: f64,
    pub from: HopPhase,
    pub to: HopPhase,
    pub event: FsmEvent,
    pub hop: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SliderMove {
    pub t: f64,
    pub from: f64,
    pub to: f64,
    pub duration: f64,
    pub hop: u32,
}

/// Phase machine instance owning the slider profile.
#[derive(Debug, Clone)]
pub struct HopMachine {
    pub mode: ActuationMode,
    pub plan: HopPlan,
    pub schedule: StiffnessSchedule,
    phase: HopPhase,
    /// Hops started so far.
    hops_started: u32,
    slider: SliderProfile,
    changes: Vec<PhaseChange>,
    moves: Vec<SliderMove>,
}

impl HopMachine {
    pub fn new(mode: ActuationMode, plan: HopPlan, schedule: StiffnessSchedule) -> Result<Self> {
        plan.validate()?;
        let x0 = mode.initial_slider(&schedule);
        Ok(Self {
            mode,
            plan,
            schedule,
            phase: HopPhase::Crouch,
            hops_started: 0,
            slider: SliderProfile::holding(x0),
            changes: Vec::new(),
            moves: Vec::new(),
        })
    }

    pub fn phase(&self) -> HopPhase {
        self.phase
    }

    pub fn hops_started(&self) -> u32 {
        self.hops_started
    }

    /// Index of the hop in progress.
    pub fn hop_index(&self) -> u32 {
        self.hops_started.saturating_sub(1)
    }

    pub fn hops_remaining(&self) -> bool {
        self.hops_started < self.plan.hops
    }

    pub fn slider(&self) -> &SliderProfile {
        &self.slider
    }

    pub fn slider_x(&self, t: f64) -> f64 {
        self.slider.position(t)
    }

    pub fn changes(&self) -> &[PhaseChange] {
        &self.changes
    }

    pub fn slider_moves(&self) -> &[SliderMove] {
        &self.moves
    }

    /// VMC target and gains in force at `t`.
    ///
    /// With `await_low_stiffness` the leg keeps the extension target until
    /// the slider has reached low stiffness, then retracts.
    pub fn command(&self, t: f64) -> (VirtualTarget, VmcGains) {
        if self.awaiting_low_stiffness(t) {
            return self.plan.command(HopPhase::Extend, self.hop_index());
        }
        self.plan.command(self.phase, self.hop_index())
    }

    pub fn awaiting_low_stiffness(&self, t: f64) -> bool {
        self.plan.await_low_stiffness
            && self.mode == ActuationMode::Vs
            && self.phase == HopPhase::FlightRetract
            && self.slider.is_moving(t)
            && self.slider.to < self.slider.from
    }

    /// Whether the retraction target is active.
    pub fn retracting(&self, t: f64) -> bool {
        self.phase == HopPhase::FlightRetract
            && self.plan.retracts(self.hop_index())
            && !self.awaiting_low_stiffness(t)
    }

    /// Feeds one event at time `t` with the current spring deflection `q`.
    /// Returns whether the phase changed.
    pub fn handle(&mut self, t: f64, event: FsmEvent, q: f64) -> Result<bool> {
        if event == FsmEvent::JumpCommand && !self.hops_remaining() {
            return Ok(false);
        }
        let retracts = self.plan.retracts(self.hop_index());
        let tr = advance(self.phase, event, self.mode, &self.schedule, retracts, t)?;
        if let SliderCommand::MoveTo(x) = tr.slider {
            let from = self.slider.position(t);
            if self.slider.command(&self.schedule, t, x, q) {
                self.moves.push(SliderMove {
                    t,
                    from,
                    to: x,
                    duration: self.slider.duration,
                    hop: self.hop_index(),
                });
            }
        }
        if tr.phase == self.phase {
            return Ok(false);
        }
        if event == FsmEvent::JumpCommand {
            self.hops_started += 1;
        }
        self.changes.push(PhaseChange {
            t,
            from: self.phase,
            to: tr.phase,
            event,
            hop: self.hop_index(),
        });
        self.phase = tr.phase;
        Ok(true)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn sched() -> StiffnessSchedule {
        StiffnessSchedule::default()
    }

    #[test]
    fn extend_to_retract_switches_to_low_stiffness() {
        let tr = advance(
            HopPhase::Extend,
            FsmEvent::HeightReached,
            ActuationMode::Vs,
            &sched(),
            true,
            0.0,
        )
        .unwrap();
        assert_eq!(tr.phase, HopPhase::FlightRetract);
        assert_eq!(tr.slider, SliderCommand::MoveTo(0.035));
    }

    #[test]
    fn hop_without_retraction_keeps_high_stiffness() {
        let tr = advance(
            HopPhase::Extend,
            FsmEvent::Liftoff,
            ActuationMode::Vs,
            &sched(),
            false,
            0.0,
        )
        .unwrap();
        assert_eq!(tr.phase, HopPhase::FlightRetract);
        assert_eq!(tr.slider, SliderCommand::Hold);
        let plan = HopPlan::forward();
        assert!(!plan.retracts(0) && !plan.retracts(1) && plan.retracts(2));
        let (target, _) = plan.command(HopPhase::FlightRetract, 0);
        assert_eq!(target.r_d.y, plan.touchdown[1]);
    }

    #[test]
    fn constant_modes_never_move_the_slider() {
        use FsmEvent::*;
        use HopPhase::*;
        for mode in [ActuationMode::Chs, ActuationMode::Cls, ActuationMode::Dmd] {
            for (phase, ev) in [
                (Crouch, JumpCommand),
                (Extend, HeightReached),
                (FlightRetract, LandingSoon),
                (FlightExtend, LandingSoon),
                (FlightExtend, Touchdown),
                (Landing, Settled),
                (Stance, JumpCommand),
            ] {
                let tr = advance(phase, ev, mode, &sched(), true, 0.0).unwrap();
                assert_eq!(tr.slider, SliderCommand::Hold);
            }
        }
    }

    #[test]
    fn contradicting_events_are_faults() {
        let e = advance(
            HopPhase::Extend,
            FsmEvent::Touchdown,
            ActuationMode::Vs,
            &sched(),
            true,
            1.25,
        )
        .unwrap_err();
        assert!(matches!(
            e,
            VllsaError::IllegalEvent {
                phase: HopPhase::Extend,
                ..
            }
        ));
        assert!(advance(
            HopPhase::Crouch,
            FsmEvent::Liftoff,
            ActuationMode::Dmd,
            &sched(),
            true,
            0.0
        )
        .is_err());
        assert!(advance(
            HopPhase::FlightExtend,
            FsmEvent::JumpCommand,
            ActuationMode::Dmd,
            &sched(),
            true,
            0.0
        )
        .is_err());
    }

    #[test]
    fn full_cycle_follows_transition_table() {
        let mut m = HopMachine::new(ActuationMode::Vs, HopPlan::in_place(), sched()).unwrap();
        let seq = [
            FsmEvent::Settled,
            FsmEvent::JumpCommand,
            FsmEvent::HeightReached,
            FsmEvent::Liftoff,
            FsmEvent::RetractReached,
            FsmEvent::LandingSoon,
            FsmEvent::Touchdown,
            FsmEvent::Settled,
        ];
        for (k, ev) in seq.iter().enumerate() {
            m.handle(0.1 * k as f64, *ev, 0.0).unwrap();
        }
        let phases: Vec<_> = m.changes().iter().map(|c| c.to).collect();
        assert_eq!(
            phases,
            [
                HopPhase::Extend,
                HopPhase::FlightRetract,
                HopPhase::FlightExtend,
                HopPhase::Landing,
                HopPhase::Stance
            ]
        );
        assert!(m.changes().windows(2).all(|w| w[0].to.may_precede(w[1].to)));
        assert_eq!(m.slider_moves().len(), 2);
        // no more hops in the plan
        assert!(!m.handle(2.0, FsmEvent::JumpCommand, 0.0).unwrap());
    }

    #[test]
    fn identical_events_give_identical_commands() {
        let run = || {
            let mut m = HopMachine::new(ActuationMode::Vs, HopPlan::in_place(), sched()).unwrap();
            let mut out = Vec::new();
            for (k, ev) in [
                FsmEvent::JumpCommand,
                FsmEvent::HeightReached,
                FsmEvent::Apex,
            ]
            .iter()
            .enumerate()
            {
                m.handle(0.05 * k as f64, *ev, 0.1).unwrap();
                out.push((m.phase(), m.command(0.3), m.slider_x(0.3)));
            }
            out
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn traversal_reaches_target_at_configured_time() {
        let s = sched();
        let mut p = SliderProfile::holding(s.x_ls);
        assert!(p.command(&s, 1.0, s.x_hs, deg(5.0)));
        assert_relative_eq!(p.arrival(), 1.20, max_relative = 1e-12);
        assert_eq!(p.position(1.20), 0.070);
        assert!(p.position(1.1) > 0.035 && p.position(1.1) < 0.070);
        let mut q = SliderProfile::holding(s.x_hs);
        q.command(&s, 0.0, s.x_ls, deg(15.0));
        assert_relative_eq!(q.duration, 0.35, max_relative = 1e-12);
    }

    #[test]
    fn holding_without_command() {
        let p = SliderProfile::holding(0.05);
        for t in [0.0, 1.0, 100.0] {
            assert_eq!(slider_position(&p, t), 0.05);
        }
    }

    #[test]
    fn recommand_is_continuous_and_scaled() {
        let s = sched();
        let mut p = SliderProfile::holding(s.x_hs);
        p.command(&s, 0.0, s.x_ls, 0.0);
        let t = 0.14;
        let x_mid = p.position(t);
        assert_relative_eq!(x_mid, 0.0525, max_relative = 1e-12);
        p.command(&s, t, s.x_hs, 0.0);
        assert_eq!(p.position(t), x_mid);
        assert_relative_eq!(p.duration, 0.10, max_relative = 1e-12);
        assert_relative_eq!(p.position(t + 0.10), s.x_hs, max_relative = 1e-12);
    }

    #[test]
    fn stiffness_motor_power_levels() {
        let s = sched();
        let spring = LeafSpringParams::default();
        let drive = BallScrewDrive::default();
        let hold = SliderProfile::holding(s.x_hs);
        assert_eq!(
            stiffness_motor_power(&s, &hold, 0.5, deg(20.0), &spring, &drive),
            1.20
        );
        let mut m = SliderProfile::holding(s.x_ls);
        m.command(&s, 0.0, s.x_hs, 0.0);
        assert_relative_eq!(
            stiffness_motor_power(&s, &m, 0.1, 0.0, &spring, &drive),
            23.48,
            max_relative = 1e-12
        );
        let p20 = stiffness_motor_power(&s, &m, 0.1, deg(20.0), &spring, &drive);
        assert!(p20 > 23.48);
    }

    #[test]
    fn plan_rejects_inverted_heights() {
        let mut p = HopPlan::in_place();
        p.retract[1] = 0.6;
        assert!(p.validate().is_err());
        assert!(HopPlan::forward().validate().is_ok());
    }

    #[test]
    fn mode_parsing() {
        for m in ActuationMode::ALL {
            assert_eq!(m.as_str().parse::<ActuationMode>().unwrap(), m);
        }
        assert!("xyz".parse::<ActuationMode>().is_err());
    }
}
