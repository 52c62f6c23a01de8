//! File formats, corpus generation, a thread-pool executor and the
//! command-line driver around [`lanetwin_core`].
//!
//! | artifact | module |
//! |---|---|
//! | simulation records (JSON Lines), topology and constraint JSON | [`io`] |
//! | corpus manifest | [`corpus`] |
//! | graph dataset with shape header | [`dataset`] |
//! | checkpoint (JSON header + named `f64` arrays) | [`checkpoint`] |
//! | history / latents / attribution CSV, metrics JSON | [`report`] |
//! | per-directory run manifest | [`manifest`] |

pub mod checkpoint;
pub mod cli;
pub mod corpus;
pub mod dataset;
pub mod error;
pub mod exec;
pub mod io;
pub mod manifest;
pub mod report;

pub use error::{Error, Result};
