use alloc::string::String;

pub type Result<T> = core::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("invalid architecture: {0}")]
    InvalidArch(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("non-finite network output")]
    NonFiniteOutput,
    #[error("non-finite state in block {block} at substep {substep}")]
    NonFiniteState { block: usize, substep: usize },
    #[error("non-finite gradient while training block {block}")]
    NonFiniteGradient { block: usize },
    #[error("non-finite loss while training block {block} at epoch {epoch}")]
    DivergentLoss { block: usize, epoch: usize },
    #[error("mixture potential requires a class label")]
    MissingLabel,
    #[error("label {label} out of range for a mixture with {components} components")]
    LabelOutOfRange { label: usize, components: usize },
    #[error("standard Gaussian potential does not take labels")]
    UnexpectedLabel,
    #[error("block {0} has zero movement")]
    DegenerateMovement(usize),
    #[error("termination ratio undefined: pushed samples collapsed to the origin")]
    ZeroDenominator,
    #[error("column {0} has zero variance")]
    ZeroVariance(usize),
    #[error("all points are identical; median distance is zero")]
    DegenerateBandwidth,
}
