//! Experiment orchestration: manifest ingestion, run configuration,
//! training/evaluation/sweeps, and the command-line interface.

mod build;
pub mod cli;
mod config;
mod manifest;
mod run;
mod sweep;

pub use build::{build_vocab, render_prompt, Builder, Toggles};
pub use config::{Paths, RunConfig};
pub use manifest::{
    load_manifest, load_manifest_with, manifest_hash, payload_of, BankEntry, ContextRef,
    ManifestRecord, MediaRef, Split, Task,
};
pub use run::{run_eval, run_train, EvalOptions, EvalOutcome, TrainOptions};
pub use sweep::{run_ablation_sweep, SweepAxis, SweepOptions, SweepRow};

use thiserror::Error;

use crate::adapters::AdaptError;
use crate::encoders::EncError;
use crate::instructions::InstrError;
use crate::lm::LmError;
use crate::metrics::MetricError;
use crate::seqcore::SeqError;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("manifest line {line}: {msg}")]
    ParseError { line: usize, msg: String },
    #[error("manifest line {line}, field {field}: {msg}")]
    SchemaError {
        line: usize,
        field: String,
        msg: String,
    },
    #[error("record {id}: unresolvable reference {reference}")]
    DanglingRef { id: String, reference: String },
    #[error("record {id} has task {got}, expected {expected}")]
    TaskMismatch {
        expected: Task,
        got: Task,
        id: String,
    },
    #[error("record {id} has no answer but the split needs one")]
    MissingAnswer { id: String },
    #[error("no records to train on")]
    NoTrainRecords,
    #[error("no records to evaluate")]
    NoEvalRecords,
    #[error("config error: {0}")]
    Config(String),
    #[error("{0}: {1}")]
    Io(String, String),
    #[error(transparent)]
    Lm(#[from] LmError),
    #[error(transparent)]
    Seq(#[from] SeqError),
    #[error(transparent)]
    Instr(#[from] InstrError),
    #[error(transparent)]
    Enc(#[from] EncError),
    #[error(transparent)]
    Adapt(#[from] AdaptError),
    #[error(transparent)]
    Metric(#[from] MetricError),
}

impl HarnessError {
    /// CLI exit code class: 2 for data problems, 3 for runtime failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::ParseError { .. }
            | HarnessError::SchemaError { .. }
            | HarnessError::DanglingRef { .. }
            | HarnessError::TaskMismatch { .. }
            | HarnessError::MissingAnswer { .. }
            | HarnessError::NoTrainRecords
            | HarnessError::NoEvalRecords
            | HarnessError::Config(_)
            | HarnessError::Io(_, _) => 2,
            HarnessError::Lm(e) => match e {
                LmError::BadCheckpoint(_) | LmError::ConfigMismatch(_) | LmError::Io(_, _) => 2,
                _ => 3,
            },
            HarnessError::Seq(SeqError::Io(_, _) | SeqError::BadVocabFile(_)) => 2,
            HarnessError::Instr(InstrError::Io(_, _))
            | HarnessError::Instr(InstrError::SubtitleParse { .. })
            | HarnessError::Instr(InstrError::EmptyPlot)
            | HarnessError::Instr(InstrError::BadParagraphBounds(_)) => 2,
            HarnessError::Enc(EncError::Io(_, _) | EncError::BadFile(_)) => 2,
            _ => 3,
        }
    }
}
