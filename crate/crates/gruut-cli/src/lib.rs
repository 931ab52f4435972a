//! Scenario-file parsing and the chain/registry export formats used by the
//! `gruut` binary. Split out as a library so tooling and tests can read and
//! write the same files the CLI does.

pub mod chainio;
pub mod scenario;
