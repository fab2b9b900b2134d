//! Causal/biased subgraph disentanglement for fake-news detection on
//! propagation graphs: data handling, the detector, its objectives,
//! training, evaluation and experiment orchestration.

pub mod adjacency;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod features;
pub mod graph;
pub mod model;
pub mod objectives;
pub mod split;
pub mod synth;
pub mod train;

pub use error::{Error, RecordError, Result};
pub use graph::{load_corpus, save_corpus, Corpus, DistributionTag, InDistCorpus, Label, PropagationGraph};
