//! Run metrics recomputed from a trace alone.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Result, VllsaError};
use crate::fsm::{ActuationMode, HopPhase};
use crate::harness::sim::Obstacle;
use crate::harness::trace::TraceRecord;

/// Half width of the window around an event in which its power peak is sought, s.
pub const PEAK_WINDOW: f64 = 0.010;

/// Totals of the energy account, J.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnergyTotals {
    pub hip: f64,
    pub knee: f64,
    pub stiffness: f64,
}

impl EnergyTotals {
    pub fn joints(&self) -> f64 {
        self.hip + self.knee
    }

    pub fn total(&self) -> f64 {
        self.hip + self.knee + self.stiffness
    }

    /// Stiffness-motor fraction of the total; zero for an empty account.
    pub fn stiffness_share(&self) -> f64 {
        let total = self.total();
        if total > 0.0 {
            self.stiffness / total
        } else {
            0.0
        }
    }
}

/// Times of the marked moments of a run, s.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EventTimes {
    pub jump: Vec<f64>,
    pub retract: Vec<f64>,
    pub touchdown: Vec<f64>,
    pub stance: Vec<f64>,
}

/// Flat summary of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub mode: ActuationMode,
    pub duration: f64,
    pub touchdowns: usize,
    pub peak_foot_lift: f64,
    pub t_jl: Option<f64>,
    pub t_ll: Option<f64>,
    pub peak_knee_power_jump: Option<f64>,
    pub peak_knee_power_retraction: Option<f64>,
    pub peak_knee_power_landing: Option<f64>,
    pub peak_knee_power_stance: Option<f64>,
    pub energy_hip: f64,
    pub energy_knee: f64,
    pub energy_stiffness: f64,
    pub energy_joints: f64,
    pub energy_total: f64,
    pub stiffness_share: f64,
    pub slider_traversals: usize,
    pub max_base_x: f64,
    pub cleared: Option<bool>,
    pub collision_t: Option<f64>,
}

fn incomplete(msg: impl Into<String>) -> VllsaError {
    VllsaError::IncompleteTrace(msg.into())
}

/// Checks that a trace is usable for accounting.
pub fn check_trace(trace: &[TraceRecord]) -> Result<()> {
    let first = trace.first().ok_or_else(|| incomplete("trace is empty"))?;
    let finite = |r: &TraceRecord| {
        [
            r.t,
            r.e_hip,
            r.e_knee,
            r.e_stiffness,
            r.p_hip,
            r.p_knee,
            r.p_stiffness,
            r.foot_z,
            r.x_b,
        ]
        .iter()
        .all(|v| v.is_finite())
    };
    if !finite(first) {
        return Err(incomplete(format!("non-finite sample at t = {}", first.t)));
    }
    for w in trace.windows(2) {
        let (a, b) = (&w[0], &w[1]);
        if !finite(b) {
            return Err(incomplete(format!("non-finite sample after t = {}", a.t)));
        }
        if b.t <= a.t {
            return Err(incomplete(format!("time does not increase at t = {}", b.t)));
        }
        if b.e_hip < a.e_hip || b.e_knee < a.e_knee || b.e_stiffness < a.e_stiffness {
            return Err(incomplete(format!(
                "cumulative energy decreases at t = {}",
                b.t
            )));
        }
    }
    Ok(())
}

/// Per-motor energies at the end of the trace.
pub fn energy_account(trace: &[TraceRecord]) -> Result<EnergyTotals> {
    check_trace(trace)?;
    let last = trace.last().expect("checked non-empty");
    Ok(EnergyTotals {
        hip: last.e_hip,
        knee: last.e_knee,
        stiffness: last.e_stiffness,
    })
}

/// Jump, retraction, touchdown and stance instants found in the samples.
pub fn event_times(trace: &[TraceRecord]) -> EventTimes {
    let mut ev = EventTimes::default();
    for w in trace.windows(2) {
        let (a, b) = (&w[0], &w[1]);
        if b.phase == HopPhase::Extend && a.phase != HopPhase::Extend {
            ev.jump.push(b.t);
        }
        if b.retracting && !a.retracting {
            ev.retract.push(b.t);
        }
        if b.in_contact && !a.in_contact {
            ev.touchdown.push(b.t);
        }
        if b.phase == HopPhase::Stance && a.phase != HopPhase::Stance {
            ev.stance.push(b.t);
        }
    }
    ev
}

/// Largest knee power within [`PEAK_WINDOW`] of any of `times`.
pub fn peak_knee_power(trace: &[TraceRecord], times: &[f64]) -> Option<f64> {
    times
        .iter()
        .flat_map(|&te| {
            trace
                .iter()
                .filter(move |r| (r.t - te).abs() <= PEAK_WINDOW + 1e-9)
                .map(|r| r.p_knee)
        })
        .reduce(f64::max)
}

/// Number of slider moves, counted as runs of samples with a changing slider.
pub fn slider_traversals(trace: &[TraceRecord]) -> usize {
    let mut count = 0;
    let mut moving = false;
    for w in trace.windows(2) {
        let now = (w[1].slider_x - w[0].slider_x).abs() > 1e-12;
        if now && !moving {
            count += 1;
        }
        moving = now;
    }
    count
}

/// First sample at which the leg violates the obstacle clearance.
pub fn first_collision<'a>(
    trace: &'a [TraceRecord],
    obstacle: &Obstacle,
) -> Option<&'a TraceRecord> {
    trace.iter().find(|r| obstacle.hits_record(r).is_some())
}

/// Whether the whole leg passed beyond the obstacle without touching it.
pub fn cleared(trace: &[TraceRecord], obstacle: &Obstacle) -> bool {
    let beyond = obstacle.far_edge() + obstacle.margin;
    first_collision(trace, obstacle).is_none()
        && trace
            .iter()
            .any(|r| r.x_b.min(r.knee_x).min(r.foot_x) > beyond)
}

/// Durations jump to retraction and retraction to landing for the first
/// hop that retracts.
fn phase_durations(ev: &EventTimes) -> (Option<f64>, Option<f64>) {
    let Some(&tr) = ev.retract.first() else {
        return (None, None);
    };
    let jump = ev.jump.iter().rev().find(|&&t| t <= tr);
    let land = ev.touchdown.iter().find(|&&t| t > tr);
    (jump.map(|j| tr - j), land.map(|l| l - tr))
}

pub fn compute_metrics(trace: &[TraceRecord], obstacle: Option<&Obstacle>) -> Result<RunMetrics> {
    let energy = energy_account(trace)?;
    let first = &trace[0];
    let last = trace.last().expect("checked non-empty");
    let ev = event_times(trace);
    let (t_jl, t_ll) = phase_durations(&ev);
    let fold_max =
        |f: fn(&TraceRecord) -> f64| trace.iter().map(f).fold(f64::NEG_INFINITY, f64::max);
    Ok(RunMetrics {
        mode: first.mode,
        duration: last.t - first.t,
        touchdowns: ev.touchdown.len(),
        peak_foot_lift: fold_max(|r| r.foot_z).max(0.0),
        t_jl,
        t_ll,
        peak_knee_power_jump: peak_knee_power(trace, &ev.jump),
        peak_knee_power_retraction: peak_knee_power(trace, &ev.retract),
        peak_knee_power_landing: peak_knee_power(trace, &ev.touchdown),
        peak_knee_power_stance: peak_knee_power(trace, &ev.stance),
        energy_hip: energy.hip,
        energy_knee: energy.knee,
        energy_stiffness: energy.stiffness,
        energy_joints: energy.joints(),
        energy_total: energy.total(),
        stiffness_share: energy.stiffness_share(),
        slider_traversals: slider_traversals(trace),
        max_base_x: fold_max(|r| r.x_b),
        cleared: obstacle.map(|o| cleared(trace, o)),
        collision_t: obstacle
            .and_then(|o| first_collision(trace, o))
            .map(|r| r.t),
    })
}

pub fn write_metrics<W: Write>(mut out: W, metrics: &RunMetrics) -> Result<()> {
    serde_json::to_writer_pretty(&mut out, metrics)
        .map_err(|e| VllsaError::Config(e.to_string()))?;
    writeln!(out)?;
    Ok(())
}

pub fn read_metrics(text: &str) -> Result<RunMetrics> {
    serde_json::from_str(text).map_err(|e| VllsaError::Config(format!("metrics file: {e}")))
}

impl RunMetrics {
    /// One-line summary for the terminal.
    pub fn summary(&self) -> String {
        let cleared = match self.cleared {
            Some(c) => format!(" cleared={c}"),
            None => String::new(),
        };
        format!(
            "mode={} touchdowns={} peak_lift={:.4} m energy_total={:.2} J hip={:.2} knee={:.2} stiffness={:.2} share={:.4}{}",
            self.mode,
            self.touchdowns,
            self.peak_foot_lift,
            self.energy_total,
            self.energy_hip,
            self.energy_knee,
            self.energy_stiffness,
            self.stiffness_share,
            cleared
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(t: f64, phase: HopPhase, in_contact: bool, e: f64, p_knee: f64) -> TraceRecord {
        TraceRecord {
            t,
            hop: 0,
            phase,
            mode: ActuationMode::Chs,
            in_contact,
            retracting: false,
            x_b: 0.0,
            z_b: 0.5,
            theta_h: 0.7,
            theta_k: 1.1,
            vx_b: 0.0,
            vz_b: 0.0,
            omega_h: 0.0,
            omega_k: 0.0,
            q: 0.0,
            slider_x: 0.07,
            tau_hip_motor: 0.0,
            tau_knee_motor: 0.0,
            tau_vllsa: 0.0,
            fc_x: 0.0,
            fc_z: 0.0,
            i_hip: 0.0,
            i_knee: 0.0,
            p_hip: 0.0,
            p_knee,
            p_stiffness: 0.0,
            e_hip: e,
            e_knee: 2.0 * e,
            e_stiffness: 0.0,
            foot_x: 0.0,
            foot_z: 0.0,
            knee_x: 0.1,
            knee_z: 0.3,
            leg_h: 0.5,
        }
    }

    #[test]
    fn empty_trace_is_incomplete() {
        assert!(matches!(
            energy_account(&[]),
            Err(VllsaError::IncompleteTrace(_))
        ));
    }

    #[test]
    fn decreasing_energy_is_rejected() {
        let t = [
            rec(0.0, HopPhase::Crouch, true, 1.0, 0.0),
            rec(0.001, HopPhase::Crouch, true, 0.5, 0.0),
        ];
        assert!(energy_account(&t).is_err());
        let t = [
            rec(0.0, HopPhase::Crouch, true, 1.0, 0.0),
            rec(0.0, HopPhase::Crouch, true, 1.0, 0.0),
        ];
        assert!(energy_account(&t).is_err());
    }

    #[test]
    fn totals_and_share() {
        let t = [
            rec(0.0, HopPhase::Crouch, true, 0.0, 0.0),
            rec(0.001, HopPhase::Crouch, true, 3.0, 0.0),
        ];
        let e = energy_account(&t).unwrap();
        assert_eq!(e.joints(), 9.0);
        assert_eq!(e.stiffness_share(), 0.0);
    }

    #[test]
    fn peaks_stay_inside_the_window() {
        let mut t: Vec<_> = (0..100)
            .map(|k| rec(k as f64 * 1e-3, HopPhase::Crouch, true, 0.0, 1.0))
            .collect();
        t[50].phase = HopPhase::Extend;
        t[55].p_knee = 40.0;
        t[70].p_knee = 90.0;
        let ev = event_times(&t);
        assert_eq!(ev.jump, vec![0.05]);
        assert_eq!(peak_knee_power(&t, &ev.jump), Some(40.0));
    }

    #[test]
    fn phase_durations_follow_first_retraction() {
        let ev = EventTimes {
            jump: vec![0.3, 1.0],
            retract: vec![1.2],
            touchdown: vec![0.9, 1.6],
            stance: vec![],
        };
        let (jl, ll) = phase_durations(&ev);
        assert!((jl.unwrap() - 0.2).abs() < 1e-12);
        assert!((ll.unwrap() - 0.4).abs() < 1e-12);
    }

    #[test]
    fn counts_slider_moves() {
        let mut t: Vec<_> = (0..10)
            .map(|k| rec(k as f64 * 1e-3, HopPhase::Crouch, true, 0.0, 0.0))
            .collect();
        for (k, r) in t.iter_mut().enumerate() {
            r.slider_x = match k {
                0..=2 => 0.07,
                3 => 0.06,
                4..=6 => 0.05,
                7 => 0.06,
                _ => 0.07,
            };
        }
        assert_eq!(slider_traversals(&t), 2);
    }
}
