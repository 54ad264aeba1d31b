use alloc::string::String;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("spatial size {height}x{width} is not divisible by {factor}")]
    Indivisible {
        height: usize,
        width: usize,
        factor: usize,
    },
    #[error("target value {value} at index {index} is not binary")]
    NonBinaryTarget { index: usize, value: f64 },
    #[error("unknown activation tap `{0}`")]
    UnknownTap(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("infeasible synthetic spec: {0}")]
    InfeasibleSpec(String),
    #[error("loss became non-finite ({loss}) at step {step}")]
    Divergence { step: u64, loss: f64 },
}

pub type Result<T, E = Error> = core::result::Result<T, E>;

macro_rules! shape_err {
    ($($arg:tt)*) => {
        $crate::error::Error::Shape(alloc::format!($($arg)*))
    };
}

macro_rules! config_err {
    ($($arg:tt)*) => {
        $crate::error::Error::Config(alloc::format!($($arg)*))
    };
}

pub(crate) use config_err;
pub(crate) use shape_err;
