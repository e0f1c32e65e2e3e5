use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid certificate: {0}")]
    InvalidCertificate(String),
    #[error("slot capacity floor(b_eff * t_slot) is zero")]
    ZeroCapacity,
    #[error("pattern has no {0} slots")]
    MissingDirection(&'static str),
    #[error("interaction bound {t_cert} s is not a multiple of T_s = {t_s} s")]
    NonMultiple { t_cert: f64, t_s: f64 },
    #[error("index out of range: {0}")]
    IndexOutOfRange(String),
    #[error("matrix is not positive definite")]
    NotPositiveDefinite,
    #[error("LMI infeasible: {0}")]
    Infeasible(String),
    #[error("failure counter {c} reaches the certified bound g = {g}")]
    CounterOverflow { c: usize, g: usize },
    #[error("state outside the admissible domain")]
    OutsideDomain,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("time {0} s outside the mission horizon")]
    OutOfHorizon(f64),
    #[error("selected slots {used} exceed budget {budget}")]
    OverBudget { used: u32, budget: u32 },
    #[error("insufficient calibration data for classes: {0:?}")]
    InsufficientData(Vec<String>),
    #[error("instance too large: {0}")]
    InstanceTooLarge(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("parse error: {0}")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, Error>;
