use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EnvError {
    #[error("mask length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("invalid mask: {0}")]
    InvalidMask(String),
    #[error("invalid channel: {0}")]
    InvalidChannel(String),
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("action index {index} outside 0..{count}")]
    InvalidAction { index: usize, count: usize },
    #[error("interference source exhausted")]
    EndOfEpisode,
}

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("trace is empty")]
    Empty,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TabularError {
    #[error("policy evaluation did not converge after {sweeps} sweeps (last change {last_delta:e})")]
    NotConverged { sweeps: usize, last_delta: f64 },
    #[error("policy iteration did not stabilise after {iterations} iterations")]
    PolicyUnstable { iterations: usize },
    #[error("model is empty")]
    EmptyModel,
    #[error("policy has no action for state {0}")]
    MissingAction(u64),
    #[error("invalid parameter: {0}")]
    InvalidParam(String),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NetError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("empty input sequence")]
    EmptySequence,
    #[error("non-finite gradient in {0}")]
    NonFiniteGradient(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("invalid configuration: {0}")]
    Config(String),
}

#[derive(Debug, Error)]
pub enum AgentError {
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Tabular(#[from] TabularError),
    #[error("invalid agent configuration: {0}")]
    Config(String),
    #[error("lookup table domain too large: {bits} history bits (limit {limit})")]
    LutDomainTooLarge { bits: usize, limit: usize },
    #[error("{0}")]
    Unsupported(String),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RadarError {
    #[error("invalid link budget: {0}")]
    InvalidLink(String),
    #[error("invalid waveform: {0}")]
    InvalidWaveform(String),
    #[error("undersampled chirp: sample rate {sample_rate_hz} Hz cannot represent {required_hz} Hz")]
    Undersampled { sample_rate_hz: f64, required_hz: f64 },
    #[error("misaligned inputs: {0}")]
    Misaligned(String),
    #[error("degenerate CFAR window: {0}")]
    DegenerateWindow(String),
    #[error("no data: {0}")]
    Empty(String),
}
