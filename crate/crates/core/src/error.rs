use alloc::string::String;

use crate::ClassId;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {what}: expected {expected}, got {got}")]
    Shape {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("non-finite value encountered in {0}")]
    NonFinite(String),
    #[error("timestep {t} outside 1..={max}")]
    Timestep { t: usize, max: usize },
    #[error("encoder received a noisy sample (timestep {0}); samples must be clean")]
    NoisySample(usize),
    #[error("no condition vector for class {0}")]
    MissingCondition(ClassId),
    #[error("class {0} appears more than once")]
    DuplicateClass(ClassId),
    #[error("degenerate zero-norm vector: {0}")]
    Degenerate(String),
    #[error("evaluation label {0} belongs to a class that has not been seen yet")]
    UnseenLabel(ClassId),
    #[error("no few-shot samples for novel class {0}")]
    MissingShots(ClassId),
    #[error("training-free contract violated: {0}")]
    Contract(String),
    #[error("empty input: {0}")]
    Empty(&'static str),
}
