//! Hash-chained ledgers, the transaction lifecycle, endorsement policies and
//! private data collections.

mod export;
mod ledger;
mod pdc;
mod state;
mod tx;

use thiserror::Error;

use crate::digest::Hash32;

pub use export::{parse_jsonl, verify_jsonl, BlockLine, VerifyError, VerifyReport};
pub use ledger::{Block, ChainVerdict, CommitOutcome, Ledger};
pub use pdc::PrivateDataCollection;
pub use state::{apply_payload, state_digest, WorldState, GLOBAL_MODEL_DIGEST, GLOBAL_MODEL_REF, GLOBAL_MODEL_VERSION};
pub use state::{PRIVATE_MODEL_DIGEST, PRIVATE_MODEL_VERSION};
pub use tx::{
    endorsement_message, AggregateInput, ConfigEvent, Endorsement, EndorsementPolicy, ModelUpdate, Payload,
    RegistrationEvent, Transaction, TxState, UnlearnRecord, UpdateScope,
};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ChainError {
    #[error("unknown proposer {0:?}")]
    UnknownProposer(String),
    #[error("peer {0:?} is not eligible to endorse on this channel")]
    IneligiblePeer(String),
    #[error("endorsement signature from {0:?} does not verify")]
    BadSignature(String),
    #[error("peer {0:?} already endorsed this transaction")]
    DuplicateEndorsement(String),
    #[error("illegal transaction transition {from} -> {to}")]
    InvalidTransition { from: TxState, to: TxState },
    #[error("endorsement policy needs 1 <= k <= peers, got k={required_k} with {peers} peers")]
    InvalidPolicy { required_k: usize, peers: usize },
    #[error("transaction batch is empty or under-endorsed")]
    NotEndorsed,
    #[error("every transaction in the batch failed validation: {}", describe(.0))]
    ValidationFailed(Vec<(Hash32, String)>),
    #[error("chain is corrupt at block {index}")]
    CorruptChain { index: u64 },
    #[error("organization {0:?} may not access this collection")]
    AccessDenied(String),
    #[error("collection endorsement threshold cannot be met by member peers")]
    PolicyUnsatisfiable,
    #[error("signing failed: {0}")]
    Signing(String),
}

fn describe(rejected: &[(Hash32, String)]) -> String {
    rejected.iter().map(|(id, why)| format!("{}: {why}", id.short())).collect::<Vec<_>>().join("; ")
}
