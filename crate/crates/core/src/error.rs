use thiserror::Error;

use crate::fsm::HopPhase;

pub type Result<T, E = VllsaError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum VllsaError {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("knee angle {angle_deg:.3} deg outside [{min_deg}, {max_deg}] deg")]
    KneeRange {
        angle_deg: f64,
        min_deg: f64,
        max_deg: f64,
    },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("singular contact system: {0}")]
    SingularContact(String),

    #[error("simulation diverged at t = {t:.4} s: {detail}")]
    Diverged { t: f64, detail: String },

    #[error("illegal event {event} in phase {phase:?} at t = {t:.4} s")]
    IllegalEvent {
        phase: HopPhase,
        event: String,
        t: f64,
    },

    #[error("simulation fault in phase {phase:?} at t = {t:.4} s: {source}")]
    Fault {
        phase: HopPhase,
        t: f64,
        #[source]
        source: Box<VllsaError>,
    },

    #[error("calibration failed: {0}")]
    Calibration(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("incomplete trace: {0}")]
    IncompleteTrace(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl VllsaError {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Self::Domain(msg.into())
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Self::InvalidParameter(msg.into())
    }
}
