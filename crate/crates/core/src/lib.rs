//! Video sentence grounding with a multi-resolution temporal encoder-decoder.
//!
//! The pipeline is: project and encode video clips and query words
//! ([`encoders`]), fuse them with video-query attention, refine the fused
//! sequence through a two-level 1-D encoder-decoder that emits temporal maps
//! at three resolutions ([`mrt`]), score start/end boundaries with stacked
//! recurrent cells ([`predictor`]), and train against a composite
//! boundary/map loss ([`losses`]). Everything is differentiated by the small
//! tape engine in [`diffcore`].

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod diffcore;
pub mod encoders;
pub mod error;
pub mod gradsuite;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod mrt;
pub mod nn;
pub mod optim;
pub mod predictor;
pub mod train;

pub use diffcore::{Graph, Tensor, Var};
pub use error::{ErrorClass, MrtError, Result};
