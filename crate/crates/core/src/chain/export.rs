//! JSON-lines ledger export, one block per line.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::digest::Hash32;

use super::ledger::{Block, Ledger};
use super::state::{apply_payload, state_digest, WorldState};
use super::tx::Transaction;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockLine {
    pub index: u64,
    pub prev_hash: Hash32,
    pub payload_hash: Hash32,
    pub timestamp: u64,
    pub block_hash: Hash32,
    pub tx_ids: Vec<Hash32>,
    pub transactions: Vec<Transaction>,
    /// World-state digest after applying this block.
    pub state_digest: Hash32,
}

impl BlockLine {
    fn into_block(self) -> Block {
        Block {
            index: self.index,
            prev_hash: self.prev_hash,
            payload_hash: self.payload_hash,
            timestamp: self.timestamp,
            block_hash: self.block_hash,
            tx_ids: self.tx_ids,
            transactions: self.transactions,
        }
    }
}

impl Ledger {
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        let mut state = WorldState::new();
        for b in self.blocks() {
            for tx in &b.transactions {
                // Committed blocks always replay.
                let _ = apply_payload(&mut state, tx.payload());
            }
            let line = BlockLine {
                index: b.index,
                prev_hash: b.prev_hash,
                payload_hash: b.payload_hash,
                timestamp: b.timestamp,
                block_hash: b.block_hash,
                tx_ids: b.tx_ids.clone(),
                transactions: b.transactions.clone(),
                state_digest: state_digest(&state),
            };
            out.push_str(&serde_json::to_string(&line).expect("block serializes"));
            out.push('\n');
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VerifyReport {
    pub blocks: u64,
    pub final_state_digest: Hash32,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum VerifyError {
    #[error("ledger export is empty")]
    Empty,
    #[error("block {index} is bad: {reason}")]
    BadBlock { index: u64, reason: String },
}

/// Checks an export line by line: canonical serialization, links, digests,
/// and the replayed state digest. Reports the first bad line.
pub fn verify_jsonl(bytes: &[u8]) -> Result<VerifyReport, VerifyError> {
    parse_and_verify(bytes).map(|(report, _)| report)
}

/// Verifies an export and returns its blocks.
pub fn parse_jsonl(bytes: &[u8]) -> Result<Vec<Block>, VerifyError> {
    parse_and_verify(bytes).map(|(_, blocks)| blocks)
}

fn parse_and_verify(bytes: &[u8]) -> Result<(VerifyReport, Vec<Block>), VerifyError> {
    if bytes.is_empty() {
        return Err(VerifyError::Empty);
    }
    let mut lines: Vec<&[u8]> = bytes.split(|&b| b == b'\n').collect();
    let terminated = lines.last().is_some_and(|l| l.is_empty());
    if terminated {
        lines.pop();
    }
    let last = lines.len() - 1;

    let mut state = WorldState::new();
    let mut prev = Hash32::ZERO;
    let mut blocks = Vec::with_capacity(lines.len());
    for (i, raw) in lines.into_iter().enumerate() {
        let index = i as u64;
        let bad = |reason: String| VerifyError::BadBlock { index, reason };
        if i == last && !terminated {
            return Err(bad("missing line terminator".into()));
        }
        let text = std::str::from_utf8(raw).map_err(|_| bad("not UTF-8".into()))?;
        let line: BlockLine = serde_json::from_str(text).map_err(|e| bad(format!("parse error: {e}")))?;
        let canonical = serde_json::to_string(&line).expect("block serializes");
        if canonical != text {
            return Err(bad("line is not in canonical form".into()));
        }
        let claimed = line.state_digest;
        let block = line.into_block();
        block.check(index, &prev).map_err(bad)?;
        for tx in &block.transactions {
            apply_payload(&mut state, tx.payload()).map_err(|e| bad(format!("replay failed: {e}")))?;
        }
        if state_digest(&state) != claimed {
            return Err(bad("state digest does not match replay".into()));
        }
        prev = block.block_hash;
        blocks.push(block);
    }
    Ok((VerifyReport { blocks: blocks.len() as u64, final_state_digest: state_digest(&state) }, blocks))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chain::tx::{ConfigEvent, EndorsementPolicy, Payload};
    use crate::identity::{Registry, Role};

    fn ledger(n: u64) -> Ledger {
        let mut reg = Registry::new(3, ["o"], 3600);
        reg.register_entity("a", Role::Client, "o", 0).unwrap();
        let mut l = Ledger::new("c", EndorsementPolicy::majority(["a"]).unwrap());
        for i in 0..n {
            let p = Payload::Config(ConfigEvent { key: format!("k{i}"), value: format!("{i}") });
            l.submit(&reg, "a", p, i * 10).unwrap();
        }
        l
    }

    #[test]
    fn honest_export_verifies() {
        let l = ledger(4);
        let text = l.to_jsonl();
        let report = verify_jsonl(text.as_bytes()).unwrap();
        assert_eq!(report.blocks, 4);
        assert_eq!(report.final_state_digest, l.state_digest());
        assert_eq!(parse_jsonl(text.as_bytes()).unwrap(), l.blocks());
    }

    #[test]
    fn empty_is_distinct_error() {
        assert_eq!(verify_jsonl(b""), Err(VerifyError::Empty));
    }

    #[test]
    fn flipped_byte_reports_its_line() {
        let text = ledger(3).to_jsonl().into_bytes();
        let starts: Vec<usize> =
            std::iter::once(0).chain(text.iter().enumerate().filter(|(_, &b)| b == b'\n').map(|(i, _)| i + 1)).collect();
        for (line, &start) in starts.iter().take(3).enumerate() {
            for offset in [0usize, 5, 40] {
                let mut t = text.clone();
                t[start + offset] ^= 0x20;
                match verify_jsonl(&t) {
                    Err(VerifyError::BadBlock { index, .. }) => assert_eq!(index, line as u64),
                    other => panic!("line {line} offset {offset}: {other:?}"),
                }
            }
        }
    }

    #[test]
    fn unterminated_last_line_is_bad() {
        let mut text = ledger(2).to_jsonl();
        text.pop();
        assert!(matches!(verify_jsonl(text.as_bytes()), Err(VerifyError::BadBlock { index: 1, .. })));
    }
}
