//! File formats, experiment drivers and the command-line front end for cipher-language
//! multilingual translation experiments.

pub mod checkpoint;
pub mod config;
pub mod corpus_io;
pub mod error;
pub mod experiment;
pub mod hash;
pub mod report;

pub use error::{Error, Result};
