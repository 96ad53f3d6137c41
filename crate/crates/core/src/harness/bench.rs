//! Virtual bench rig: stiffness maps, modulation timing and drive power.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::actuator::{baseline_power, BallScrewDrive, LeafSpringParams};
use crate::error::Result;
use crate::fsm::{stiffness_motor_power, SliderProfile, StiffnessSchedule};

/// Deflections of the bench sweep, deg.
pub const BENCH_Q_DEG: [f64; 6] = [0.0, 4.0, 8.0, 12.0, 16.0, 20.0];

/// Slider positions of the bench sweep, mm.
pub fn bench_x_mm() -> Vec<f64> {
    (0..8).map(|k| 35.0 + 5.0 * k as f64).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StiffnessRow {
    pub q_deg: f64,
    pub x_mm: f64,
    /// N m/rad
    pub stiffness: f64,
    /// N m
    pub torque: f64,
    /// N
    pub slider_force: f64,
}

pub fn bench_stiffness(
    spring: &LeafSpringParams,
    q_deg: &[f64],
    x_mm: &[f64],
) -> Vec<StiffnessRow> {
    let mut rows = Vec::with_capacity(q_deg.len() * x_mm.len());
    for &qd in q_deg {
        for &xm in x_mm {
            let (q, x) = (qd.to_radians(), xm * 1e-3);
            rows.push(StiffnessRow {
                q_deg: qd,
                x_mm: xm,
                stiffness: spring.stiffness_at(q, x),
                torque: spring.torque_at(q, x),
                slider_force: spring.force_at(q, x),
            });
        }
    }
    rows
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    HsToLs,
    LsToHs,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModulationRow {
    pub q_deg: f64,
    pub direction: Direction,
    /// s
    pub time: f64,
    /// N m/rad
    pub stiffness_from: f64,
    pub stiffness_to: f64,
    /// Mean `|dK/dt|` over the traversal, N m/(rad s).
    pub mean_speed: f64,
    /// Mean stiffness-motor power over the traversal, W.
    pub mean_power: f64,
    /// W
    pub peak_power: f64,
}

const POWER_SAMPLES: usize = 1000;

/// Runs one full traversal per deflection and direction through the slider
/// profile and reports its timing and power.
pub fn bench_modulation(
    schedule: &StiffnessSchedule,
    spring: &LeafSpringParams,
    drive: &BallScrewDrive,
    q_deg: &[f64],
) -> Vec<ModulationRow> {
    let mut rows = Vec::new();
    for &qd in q_deg {
        let q = qd.to_radians();
        for (direction, from, to) in [
            (Direction::HsToLs, schedule.x_hs, schedule.x_ls),
            (Direction::LsToHs, schedule.x_ls, schedule.x_hs),
        ] {
            let mut profile = SliderProfile::holding(from);
            profile.command(schedule, 0.0, to, q);
            let time = profile.duration;
            let (mut sum, mut peak) = (0.0, 0.0f64);
            for k in 0..POWER_SAMPLES {
                let t = (k as f64 + 0.5) / POWER_SAMPLES as f64 * time;
                let p = stiffness_motor_power(schedule, &profile, t, q, spring, drive);
                sum += p;
                peak = peak.max(p);
            }
            let (k_from, k_to) = (spring.stiffness_at(q, from), spring.stiffness_at(q, to));
            rows.push(ModulationRow {
                q_deg: qd,
                direction,
                time,
                stiffness_from: k_from,
                stiffness_to: k_to,
                mean_speed: (k_to - k_from).abs() / time,
                mean_power: sum / POWER_SAMPLES as f64,
                peak_power: peak,
            });
        }
    }
    rows
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerRow {
    pub q_deg: f64,
    /// Slider position the load is evaluated at, mm.
    pub x_mm: f64,
    pub motor_speed_rpm: f64,
    /// No-load drive power, W.
    pub baseline_power: f64,
    /// `|F x_dot|` at the drive speed, W.
    pub load_power: f64,
    pub total_power: f64,
    /// `total_power` over the q = 0 total.
    pub ratio_to_unloaded: f64,
    /// Power to hold the slider still, W.
    pub hold_power: f64,
}

/// Drive power while moving the slider at `x_mm` under deflection.
pub fn bench_power(
    schedule: &StiffnessSchedule,
    spring: &LeafSpringParams,
    drive: &BallScrewDrive,
    q_deg: &[f64],
    x_mm: f64,
) -> Vec<PowerRow> {
    let p0 = baseline_power(drive);
    let x = x_mm * 1e-3;
    q_deg
        .iter()
        .map(|&qd| {
            let load = (spring.force_at(qd.to_radians(), x) * drive.slider_speed()).abs();
            PowerRow {
                q_deg: qd,
                x_mm,
                motor_speed_rpm: drive.motor_speed_n,
                baseline_power: p0,
                load_power: load,
                total_power: p0 + load,
                ratio_to_unloaded: (p0 + load) / p0,
                hold_power: schedule.hold_power,
            }
        })
        .collect()
}

pub fn write_csv<W: Write, T: Serialize>(out: W, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
