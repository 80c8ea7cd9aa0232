// SPDX-License-Identifier: MIT OR Apache-2.0

//! Training and evaluation stages for spatial concept bottleneck models.
//!
//! Stages write into one output directory and chain through
//! [`record::StageRecord`]s, so a stage refuses to run on artifacts that
//! changed after the stage that produced them.

pub mod config;
pub mod encoder;
pub mod probe;
pub mod record;
pub mod stages;
pub mod toydata;

pub use config::RunConfig;

use spatial_cbm::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_PROVENANCE: i32 = 3;
pub const EXIT_RUNTIME: i32 = 4;

/// Process exit code for a failed command.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => EXIT_CONFIG,
        Error::Provenance { .. } | Error::MissingArtifact(_) | Error::Integrity(_) => EXIT_PROVENANCE,
        _ => EXIT_RUNTIME,
    }
}
