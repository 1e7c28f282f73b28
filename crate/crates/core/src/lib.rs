//! Evaluation harness for tracking social signals in thin-sliced clinical
//! conversation transcripts with prompted language models.

pub mod config;
pub mod corpus;
pub mod difficulty;
pub mod ensemble;
pub mod error;
pub mod fixture;
pub mod inference;
pub mod metrics;
pub mod mixedglm;
pub mod promptkit;
pub mod report;
pub mod stats;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    struct Introduction;
    #[doc = include_str!("../../../book/src/configuration.md")]
    struct Configuration;
    #[doc = include_str!("../../../book/src/corpus.md")]
    struct Corpus;
    #[doc = include_str!("../../../book/src/prompting.md")]
    struct Prompting;
    #[doc = include_str!("../../../book/src/running.md")]
    struct Running;
    #[doc = include_str!("../../../book/src/analysis.md")]
    struct Analysis;
    #[doc = include_str!("../../../book/src/reports.md")]
    struct Reports;
}
