//! Exit codes and the one-line error record written to stderr.

use noah_core::data::{CheckpointError, DataError};
use noah_core::search_space::SearchError;
use noah_core::training::TrainError;
use noah_core::{Error, TensorError};
use serde::Serialize;

pub const OK: i32 = 0;
pub const USAGE: i32 = 1;
pub const VALIDATION: i32 = 2;
pub const RUNTIME: i32 = 3;
pub const MISSING_INPUT: i32 = 4;

/// A bad flag combination detected after argument parsing.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct UsageError(pub String);

#[derive(Serialize)]
struct Record<'a> {
    error: &'a str,
    code: i32,
    message: String,
}

fn tensor_code(e: &TensorError) -> (i32, &'static str) {
    match e {
        TensorError::NonFinite { .. } => (RUNTIME, "numeric"),
        _ => (RUNTIME, "runtime"),
    }
}

fn data_code(e: &DataError) -> (i32, &'static str) {
    match e {
        DataError::Io { .. } => (MISSING_INPUT, "io"),
        _ => (VALIDATION, "validation"),
    }
}

fn checkpoint_code(e: &CheckpointError) -> (i32, &'static str) {
    match e {
        CheckpointError::Io { .. } => (MISSING_INPUT, "io"),
        _ => (VALIDATION, "corrupt"),
    }
}

fn train_code(e: &TrainError) -> (i32, &'static str) {
    match e {
        TrainError::NonFinite { .. } => (RUNTIME, "numeric"),
        TrainError::Tensor(t) => tensor_code(t),
        _ => (VALIDATION, "validation"),
    }
}

fn core_code(e: &Error) -> (i32, &'static str) {
    match e {
        Error::Tensor(t) => tensor_code(t),
        Error::Data(d) => data_code(d),
        Error::Checkpoint(c) => checkpoint_code(c),
        Error::Train(t) => train_code(t),
        Error::Search(_) | Error::Config(_) => (VALIDATION, "validation"),
    }
}

/// Exit code and error kind for the first recognized cause in the chain.
pub fn classify(err: &anyhow::Error) -> (i32, &'static str) {
    for cause in err.chain() {
        if cause.is::<UsageError>() {
            return (USAGE, "usage");
        }
        if let Some(e) = cause.downcast_ref::<Error>() {
            return core_code(e);
        }
        if let Some(e) = cause.downcast_ref::<DataError>() {
            return data_code(e);
        }
        if let Some(e) = cause.downcast_ref::<CheckpointError>() {
            return checkpoint_code(e);
        }
        if cause.is::<SearchError>() || cause.is::<toml::de::Error>() || cause.is::<serde_json::Error>() {
            return (VALIDATION, "validation");
        }
        if let Some(e) = cause.downcast_ref::<TrainError>() {
            return train_code(e);
        }
        if cause.is::<std::io::Error>() {
            return (MISSING_INPUT, "io");
        }
    }
    (RUNTIME, "runtime")
}

/// Writes the error as one JSON line on stderr and returns the exit code.
pub fn report(err: &anyhow::Error) -> i32 {
    let (code, kind) = classify(err);
    let mut message = String::new();
    for cause in err.chain() {
        let text = cause.to_string();
        // Some errors already print their source inline.
        if message.ends_with(&text) {
            continue;
        }
        if !message.is_empty() {
            message.push_str(": ");
        }
        message.push_str(&text);
    }
    let record = Record {
        error: kind,
        code,
        message,
    };
    eprintln!("{}", serde_json::to_string(&record).expect("error record serializes"));
    code
}
