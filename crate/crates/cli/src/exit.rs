//! Exit-code classification.

use std::fmt;

use bam_core::checkpoint::CheckpointError;
use bam_core::merge::MergeError;
use bam_core::orchestrator::BamError;
use bam_core::slice::SliceError;
use bam_core::toylab::ToyError;

pub const OK: u8 = 0;
pub const USAGE: u8 = 1;
pub const DATA: u8 = 2;
pub const RUNTIME: u8 = 3;

/// A flag combination clap cannot express.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn merge_code(e: &MergeError) -> u8 {
    match e {
        MergeError::CoefficientOutOfRange(_) | MergeError::TooFewOperands { .. } | MergeError::MissingBase(_) => USAGE,
        MergeError::Incompatible(_) | MergeError::BaseMismatch { .. } => DATA,
    }
}

fn toy_code(e: &ToyError) -> u8 {
    match e {
        ToyError::NonFiniteLoss { .. } | ToyError::ShiftCheckFailed { .. } => RUNTIME,
        ToyError::TooFewSamples { .. } => USAGE,
        _ => DATA,
    }
}

fn bam_code(e: &BamError) -> u8 {
    match e {
        BamError::Merge(m) => merge_code(m),
        BamError::Trainer { .. } | BamError::Eval { .. } => RUNTIME,
        _ => DATA,
    }
}

pub fn classify(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<UsageError>() {
            return USAGE;
        }
        if let Some(e) = cause.downcast_ref::<BamError>() {
            return bam_code(e);
        }
        if let Some(e) = cause.downcast_ref::<MergeError>() {
            return merge_code(e);
        }
        if let Some(e) = cause.downcast_ref::<ToyError>() {
            return toy_code(e);
        }
        if cause.is::<CheckpointError>() || cause.is::<SliceError>() || cause.is::<serde_json::Error>() {
            return DATA;
        }
        if cause.is::<std::io::Error>() {
            return DATA;
        }
    }
    RUNTIME
}
