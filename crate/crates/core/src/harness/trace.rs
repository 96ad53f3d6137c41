//! Per-tick simulation samples and their CSV form.

use std::io::{BufRead, BufReader, Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Result, VllsaError};
use crate::fsm::{ActuationMode, HopPhase};

pub const TRACE_SCHEMA: &str = "# vllsa-trace v1";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub t: f64,
    pub hop: u32,
    pub phase: HopPhase,
    pub mode: ActuationMode,
    pub in_contact: bool,
    /// Whether the retraction target is being tracked.
    pub retracting: bool,
    pub x_b: f64,
    pub z_b: f64,
    pub theta_h: f64,
    pub theta_k: f64,
    pub vx_b: f64,
    pub vz_b: f64,
    pub omega_h: f64,
    pub omega_k: f64,
    /// Spring deflection.
    pub q: f64,
    pub slider_x: f64,
    pub tau_hip_motor: f64,
    pub tau_knee_motor: f64,
    /// Spring torque at the knee.
    pub tau_vllsa: f64,
    pub fc_x: f64,
    pub fc_z: f64,
    pub i_hip: f64,
    pub i_knee: f64,
    pub p_hip: f64,
    pub p_knee: f64,
    pub p_stiffness: f64,
    pub e_hip: f64,
    pub e_knee: f64,
    pub e_stiffness: f64,
    pub foot_x: f64,
    pub foot_z: f64,
    pub knee_x: f64,
    pub knee_z: f64,
    /// Leg height `h` from hip to foot.
    pub leg_h: f64,
}

pub fn write_trace<W: Write>(mut out: W, records: &[TraceRecord]) -> Result<()> {
    writeln!(out, "{TRACE_SCHEMA}")?;
    let mut w = csv::Writer::from_writer(out);
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_trace<R: Read>(input: R) -> Result<Vec<TraceRecord>> {
    let mut reader = BufReader::new(input);
    let mut first = String::new();
    reader.read_line(&mut first)?;
    if first.trim_end() != TRACE_SCHEMA {
        return Err(VllsaError::IncompleteTrace(format!(
            "unsupported trace header '{}'",
            first.trim_end()
        )));
    }
    let mut r = csv::Reader::from_reader(reader);
    r.deserialize()
        .map(|row| row.map_err(VllsaError::from))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(t: f64) -> TraceRecord {
        TraceRecord {
            t,
            hop: 0,
            phase: HopPhase::FlightRetract,
            mode: ActuationMode::Vs,
            in_contact: false,
            retracting: true,
            x_b: 0.1,
            z_b: 0.5,
            theta_h: 0.7,
            theta_k: 1.1,
            vx_b: 0.0,
            vz_b: 1.0 / 3.0,
            omega_h: 0.0,
            omega_k: -2.0,
            q: 0.2,
            slider_x: 0.05,
            tau_hip_motor: 1.0,
            tau_knee_motor: -3.0,
            tau_vllsa: -1.2,
            fc_x: 0.0,
            fc_z: 0.0,
            i_hip: 1.6,
            i_knee: -5.0,
            p_hip: 2.0,
            p_knee: 7.5,
            p_stiffness: 23.48,
            e_hip: 0.1,
            e_knee: 0.2,
            e_stiffness: 0.3,
            foot_x: 0.1,
            foot_z: 0.02,
            knee_x: 0.3,
            knee_z: 0.3,
            leg_h: 0.48,
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let rows = vec![sample(0.0), sample(0.001)];
        let mut buf = Vec::new();
        write_trace(&mut buf, &rows).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with(TRACE_SCHEMA));
        assert!(text.contains("flight_retract,vs"));
        assert_eq!(read_trace(buf.as_slice()).unwrap(), rows);
    }

    #[test]
    fn rejects_foreign_header() {
        assert!(read_trace("t,x\n1,2\n".as_bytes()).is_err());
    }
}
