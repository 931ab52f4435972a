pub mod block;
pub mod tree;

pub use block::{hash_transactions, Block, SignerSignature, Transaction};
pub use tree::{
    apply_tx, BlockTree, ChainParseError, InsertError, KeyDirectory, UnknownTip,
    ValidationReport, Violation, CHAIN_HEADER_PREFIX,
};
