//! Sequential model editing with block-indexed dynamic low-rank adapters.
//!
//! Each batch of edits trains its own non-overlapping rank block of the
//! adapters attached to a frozen host network. A vector database of labeled
//! key clusters, built from hidden states at a layer below every adapter,
//! decides at inference time which block (if any) an input activates.

pub mod config;
pub mod dynlora;
pub mod editor;
pub mod error;
pub mod evalkit;
pub mod hostnet;
pub mod numkit;
pub mod rng;
pub mod scopedb;
pub mod snapshot;
pub mod taskgen;

pub use error::{MeloError, Result};
