//! Two-stage remaining-useful-life (RUL) pipeline for lithium-ion battery
//! cycle data.
//!
//! Stage 1 ([`hs`]) trains an LSTM health-state classifier on the head and
//! tail of each cell's life and locates the first prediction cycle (FPC)
//! with a consecutive-trigger rule. Stage 2 ([`stman`]) trains a
//! spatio-temporal multimodal attention network that regresses RUL as a
//! percentage of the FPC-to-end-of-life span. [`dataio`] handles cycle CSVs,
//! windowing, labeling, normalization, fold splits, and a synthetic
//! degradation generator; [`harness`] runs the cross-validated experiment
//! end to end. Everything is built on the reverse-mode autodiff tape in
//! [`tensor`].

pub mod dataio;
pub mod error;
pub mod harness;
pub mod hs;
pub mod nn;
pub mod stman;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
