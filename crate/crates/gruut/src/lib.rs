//! Gruut: a population-based consensus protocol and its supporting cast —
//! identity registration, signer/merger selection, chain maintenance, a
//! deterministic network simulator, inter-chain transfers, and a
//! security-economics calculator.

pub mod chain;
pub mod consensus;
pub mod crypto;
pub mod econ;
pub mod identity;
pub mod multichain;
pub mod netsim;
pub mod selection;

pub use chain::{Block, BlockTree, KeyDirectory, Transaction, ValidationReport, Violation};
pub use crypto::{sha256, Digest, Ed25519Scheme, KeyPair, MacScheme, SignatureScheme};
pub use identity::{IdentityAuthority, NetworkRegistry, NodeRole};
pub use netsim::{run as run_simulation, SimConfig, SimMetrics, SimOutput};
pub use selection::{Metric, Roster, RosterEntry, SelectionResult};
