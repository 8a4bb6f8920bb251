use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

pub type Result<T, E = Error> = core::result::Result<T, E>;

/// Everything that can go wrong inside the engine.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Operand shapes are incompatible for `op`.
    Shape {
        op: &'static str,
        shapes: Vec<Vec<usize>>,
    },
    /// A non-finite value was produced or supplied.
    NonFinite { context: String },
    /// `backward` was called on a non-scalar output.
    NonScalarLoss { shape: Vec<usize> },
    /// The tape was already consumed by an earlier `backward`.
    TapeConsumed,
    /// A parameter scheduled for an optimizer update has no gradient.
    MissingGrad { name: String },
    /// Routing was requested but the bank has no discriminators.
    EmptyBank { layer: usize },
    /// A forced routing index does not name an existing adapter.
    RouteOutOfRange { layer: usize, index: usize, len: usize },
    /// Discriminator statistics were used before being finalized.
    StatsNotFinalized { layer: usize, index: usize },
    /// An operation received no data where at least one item is required.
    Empty { what: &'static str },
    /// The scripted expert failed too often for a task to be usable.
    MalformedTask { task: usize, failures: usize, attempts: usize },
    /// The success matrix lacks a cell required by the metrics.
    IncompleteMatrix { task: usize, stage: usize },
    /// A configuration value is out of its valid range.
    Config(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape { op, shapes } => write!(f, "shape mismatch in {op}: {shapes:?}"),
            Error::NonFinite { context } => write!(f, "non-finite value in {context}"),
            Error::NonScalarLoss { shape } => {
                write!(f, "backward needs a scalar loss, got shape {shape:?}")
            }
            Error::TapeConsumed => f.write_str("tape already consumed by a previous backward"),
            Error::MissingGrad { name } => write!(f, "parameter {name} has no gradient"),
            Error::EmptyBank { layer } => write!(f, "layer {layer} has no discriminators to route with"),
            Error::RouteOutOfRange { layer, index, len } => {
                write!(f, "layer {layer}: adapter index {index} out of range ({len} adapters)")
            }
            Error::StatsNotFinalized { layer, index } => {
                write!(f, "discriminator {index} of layer {layer} has no finalized statistics")
            }
            Error::Empty { what } => write!(f, "empty {what}"),
            Error::MalformedTask { task, failures, attempts } => write!(
                f,
                "task {task}: expert failed {failures} of {attempts} episodes"
            ),
            Error::IncompleteMatrix { task, stage } => {
                write!(f, "success matrix missing r[{task}|{stage}]")
            }
            Error::Config(msg) => write!(f, "invalid configuration: {msg}"),
        }
    }
}

impl core::error::Error for Error {}

impl Error {
    pub(crate) fn shape(op: &'static str, shapes: &[&[usize]]) -> Self {
        Error::Shape {
            op,
            shapes: shapes.iter().map(|s| s.to_vec()).collect(),
        }
    }

    pub(crate) fn non_finite(context: impl Into<String>) -> Self {
        Error::NonFinite {
            context: context.into(),
        }
    }
}
