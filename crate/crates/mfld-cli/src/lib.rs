//! Library half of the `mfld` binary: config parsing, the demo policy
//! problem, and the verification battery. Kept as a lib so integration
//! tests can drive the battery in-process.

pub mod battery;
pub mod config;
pub mod problems;
