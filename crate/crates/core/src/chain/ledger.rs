use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::digest::{CanonicalEncoder, Hash32};
use crate::identity::{KeyDirectory, Registry};

use super::pdc::PrivateDataCollection;
use super::state::{apply_payload, state_digest, WorldState};
use super::tx::{endorsement_message, EndorsementPolicy, Payload, Transaction, TxState};
use super::ChainError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Block {
    pub index: u64,
    pub prev_hash: Hash32,
    pub payload_hash: Hash32,
    pub timestamp: u64,
    pub block_hash: Hash32,
    pub tx_ids: Vec<Hash32>,
    pub transactions: Vec<Transaction>,
}

impl Block {
    pub fn compute_payload_hash(transactions: &[Transaction]) -> Hash32 {
        let mut enc = CanonicalEncoder::new();
        enc.u64(transactions.len() as u64);
        for tx in transactions {
            tx.encode_into(&mut enc);
        }
        enc.digest()
    }

    pub fn compute_block_hash(index: u64, prev_hash: &Hash32, payload_hash: &Hash32, timestamp: u64) -> Hash32 {
        CanonicalEncoder::new().u64(index).hash(prev_hash).hash(payload_hash).u64(timestamp).digest()
    }

    /// Checks everything about the block that does not depend on world state.
    pub fn check(&self, expected_index: u64, expected_prev: &Hash32) -> Result<(), String> {
        if self.index != expected_index {
            return Err(format!("index {} where {expected_index} was expected", self.index));
        }
        if self.prev_hash != *expected_prev {
            return Err("prev_hash does not link to the previous block".into());
        }
        if self.transactions.is_empty() {
            return Err("block has no transactions".into());
        }
        if self.tx_ids.len() != self.transactions.len() {
            return Err("tx_ids and transactions differ in length".into());
        }
        for (id, tx) in self.tx_ids.iter().zip(&self.transactions) {
            if *id != tx.tx_id() || tx.recomputed_id() != tx.tx_id() {
                return Err(format!("tx {} does not match its payload", id.short()));
            }
            if tx.state() != TxState::Committed {
                return Err(format!("tx {} is {} inside a block", id.short(), tx.state()));
            }
        }
        if self.tx_ids.windows(2).any(|w| w[0] >= w[1]) {
            return Err("transactions are not in tx_id order".into());
        }
        if Self::compute_payload_hash(&self.transactions) != self.payload_hash {
            return Err("payload_hash mismatch".into());
        }
        let expected = Self::compute_block_hash(self.index, &self.prev_hash, &self.payload_hash, self.timestamp);
        if expected != self.block_hash {
            return Err("block_hash mismatch".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChainVerdict {
    Ok,
    BadAt(u64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct CommitOutcome {
    pub block_index: u64,
    pub committed: Vec<Hash32>,
    pub rejected: Vec<(Hash32, String)>,
}

/// One chain: block log plus materialized world state.
#[derive(Debug, Clone)]
pub struct Ledger {
    channel_id: String,
    policy: EndorsementPolicy,
    blocks: Vec<Block>,
    world_state: WorldState,
    tx_index: BTreeMap<Hash32, u64>,
    collections: BTreeMap<String, PrivateDataCollection>,
}

impl Ledger {
    pub fn new(channel_id: impl Into<String>, policy: EndorsementPolicy) -> Self {
        Self {
            channel_id: channel_id.into(),
            policy,
            blocks: Vec::new(),
            world_state: WorldState::new(),
            tx_index: BTreeMap::new(),
            collections: BTreeMap::new(),
        }
    }

    /// Rebuilds a ledger from a block log, validating and replaying it.
    pub fn from_blocks(
        channel_id: impl Into<String>,
        policy: EndorsementPolicy,
        blocks: Vec<Block>,
    ) -> Result<Self, ChainError> {
        let mut ledger = Self::new(channel_id, policy);
        ledger.blocks = blocks;
        ledger.world_state = ledger.replay()?;
        for b in &ledger.blocks {
            for id in &b.tx_ids {
                ledger.tx_index.insert(*id, b.index);
            }
        }
        Ok(ledger)
    }

    pub fn channel_id(&self) -> &str {
        &self.channel_id
    }

    pub fn policy(&self) -> &EndorsementPolicy {
        &self.policy
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    /// Direct block access for tamper experiments.
    #[doc(hidden)]
    pub fn blocks_mut(&mut self) -> &mut [Block] {
        &mut self.blocks
    }

    pub fn world_state(&self) -> &WorldState {
        &self.world_state
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.world_state.get(key).map(String::as_str)
    }

    pub fn state_digest(&self) -> Hash32 {
        state_digest(&self.world_state)
    }

    pub fn head_hash(&self) -> Hash32 {
        self.blocks.last().map_or(Hash32::ZERO, |b| b.block_hash)
    }

    pub fn contains_tx(&self, tx_id: &Hash32) -> bool {
        self.tx_index.contains_key(tx_id)
    }

    pub fn find_tx(&self, tx_id: &Hash32) -> Option<(u64, &Transaction)> {
        let index = *self.tx_index.get(tx_id)?;
        let block = &self.blocks[index as usize];
        block.transactions.iter().find(|t| t.tx_id() == *tx_id).map(|t| (index, t))
    }

    pub fn transactions(&self) -> impl Iterator<Item = &Transaction> {
        self.blocks.iter().flat_map(|b| b.transactions.iter())
    }

    pub fn add_collection(&mut self, name: impl Into<String>, pdc: PrivateDataCollection) {
        self.collections.insert(name.into(), pdc);
    }

    pub fn collection(&self, name: &str) -> Option<&PrivateDataCollection> {
        self.collections.get(name)
    }

    pub fn collection_mut(&mut self, name: &str) -> Option<&mut PrivateDataCollection> {
        self.collections.get_mut(name)
    }

    /// Orders a batch by tx_id, validates each transaction against the
    /// running world state and appends the survivors as one block.
    pub fn order_and_commit(
        &mut self,
        mut txs: Vec<Transaction>,
        keys: &dyn KeyDirectory,
        now: u64,
    ) -> Result<CommitOutcome, ChainError> {
        if txs.is_empty() || txs.iter().any(|t| !t.is_ready_for_ordering(&self.policy)) {
            return Err(ChainError::NotEndorsed);
        }
        txs.sort_by_key(Transaction::tx_id);

        let mut scratch = self.world_state.clone();
        let mut accepted = Vec::new();
        let mut rejected = Vec::new();
        let mut last_id = None;
        for mut tx in txs {
            tx.advance(TxState::Ordering)?;
            tx.advance(TxState::Validation)?;
            let id = tx.tx_id();
            let verdict = if last_id == Some(id) || self.tx_index.contains_key(&id) {
                Err("duplicate transaction".to_string())
            } else if tx.valid_endorsements(&self.channel_id, &self.policy, keys) < self.policy.required_k() {
                Err("endorsements do not satisfy the policy".to_string())
            } else {
                apply_payload(&mut scratch, tx.payload())
            };
            last_id = Some(id);
            match verdict {
                Ok(()) => {
                    tx.advance(TxState::Committed)?;
                    accepted.push(tx);
                }
                Err(reason) => {
                    tx.advance(TxState::Rejected)?;
                    rejected.push((id, reason));
                }
            }
        }
        if accepted.is_empty() {
            return Err(ChainError::ValidationFailed(rejected));
        }

        let index = self.blocks.len() as u64;
        let prev_hash = self.head_hash();
        let payload_hash = Block::compute_payload_hash(&accepted);
        let block = Block {
            index,
            prev_hash,
            payload_hash,
            timestamp: now,
            block_hash: Block::compute_block_hash(index, &prev_hash, &payload_hash, now),
            tx_ids: accepted.iter().map(Transaction::tx_id).collect(),
            transactions: accepted,
        };
        let committed = block.tx_ids.clone();
        for id in &committed {
            self.tx_index.insert(*id, index);
        }
        self.blocks.push(block);
        self.world_state = scratch;
        debug_assert_eq!(self.replay().as_ref(), Ok(&self.world_state));
        Ok(CommitOutcome { block_index: index, committed, rejected })
    }

    /// Proposes `payload`, collects signatures from the first k eligible
    /// peers and commits a one-transaction block.
    pub fn submit(
        &mut self,
        registry: &Registry,
        proposer: &str,
        payload: Payload,
        now: u64,
    ) -> Result<Hash32, ChainError> {
        let outcome = self.submit_batch(registry, vec![(proposer.to_string(), payload)], now)?;
        match outcome.committed.first() {
            Some(id) if outcome.rejected.is_empty() => Ok(*id),
            _ => Err(ChainError::ValidationFailed(outcome.rejected)),
        }
    }

    pub fn submit_batch(
        &mut self,
        registry: &Registry,
        batch: Vec<(String, Payload)>,
        now: u64,
    ) -> Result<CommitOutcome, ChainError> {
        let mut txs = Vec::with_capacity(batch.len());
        for (proposer, payload) in batch {
            txs.push(self.endorse_with(registry, Transaction::propose(registry, &proposer, payload)?)?);
        }
        self.order_and_commit(txs, registry, now)
    }

    fn endorse_with(&self, registry: &Registry, mut tx: Transaction) -> Result<Transaction, ChainError> {
        let msg = endorsement_message(&self.channel_id, &tx.tx_id());
        for peer in self.policy.eligible_peers().iter().take(self.policy.required_k()) {
            let sig = registry.sign_as(peer, &msg).map_err(|e| ChainError::Signing(e.to_string()))?;
            tx.endorse(&self.channel_id, peer, &sig, &self.policy, registry)?;
        }
        Ok(tx)
    }

    /// Recomputes every link and digest.
    pub fn validate_chain(&self) -> ChainVerdict {
        let mut prev = Hash32::ZERO;
        for (i, block) in self.blocks.iter().enumerate() {
            if block.check(i as u64, &prev).is_err() {
                return ChainVerdict::BadAt(i as u64);
            }
            prev = block.block_hash;
        }
        ChainVerdict::Ok
    }

    /// World state rebuilt from the block log alone.
    pub fn replay(&self) -> Result<WorldState, ChainError> {
        if let ChainVerdict::BadAt(index) = self.validate_chain() {
            return Err(ChainError::CorruptChain { index });
        }
        let mut state = WorldState::new();
        for block in &self.blocks {
            for tx in &block.transactions {
                apply_payload(&mut state, tx.payload()).map_err(|_| ChainError::CorruptChain { index: block.index })?;
            }
        }
        Ok(state)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chain::tx::{ConfigEvent, ModelUpdate, UpdateScope};
    use crate::identity::Role;

    fn setup() -> (Registry, Ledger) {
        let mut reg = Registry::new(3, ["o1", "o2"], 3600);
        reg.register_entity("a", Role::Client, "o1", 0).unwrap();
        reg.register_entity("b", Role::Client, "o2", 0).unwrap();
        let ledger = Ledger::new("public", EndorsementPolicy::majority(["a", "b"]).unwrap());
        (reg, ledger)
    }

    fn cfg(k: &str, v: &str) -> Payload {
        Payload::Config(ConfigEvent { key: k.into(), value: v.into() })
    }

    fn global(v: u64) -> Payload {
        Payload::ModelUpdate(ModelUpdate {
            org: "o1".into(),
            participant: "a".into(),
            scope: UpdateScope::Global,
            round: 0,
            params_digest: Hash32::of(b"w"),
            n_samples: 0,
            checkpoint_ref: "ckpt".into(),
            model_version: v,
            inputs: vec![],
            integrated_deltas: vec![],
        })
    }

    #[test]
    fn empty_ledger() {
        let (_, ledger) = setup();
        assert_eq!(ledger.validate_chain(), ChainVerdict::Ok);
        assert!(ledger.replay().unwrap().is_empty());
    }

    #[test]
    fn model_update_bumps_global_version() {
        let (reg, mut ledger) = setup();
        ledger.submit(&reg, "a", global(1), 5).unwrap();
        assert_eq!(ledger.get("global_model_version"), Some("1"));
        assert_eq!(ledger.blocks()[0].prev_hash, Hash32::ZERO);
        assert_eq!(ledger.validate_chain(), ChainVerdict::Ok);
    }

    #[test]
    fn batch_order_does_not_matter() {
        let run = |flip: bool| {
            let (reg, mut ledger) = setup();
            let mut batch = vec![("a".to_string(), cfg("x", "1")), ("b".to_string(), cfg("y", "2"))];
            if flip {
                batch.reverse();
            }
            ledger.submit_batch(&reg, batch, 9).unwrap();
            ledger.blocks()[0].block_hash
        };
        assert_eq!(run(false), run(true));
    }

    #[test]
    fn empty_batch_not_endorsed() {
        let (reg, mut ledger) = setup();
        assert_eq!(ledger.order_and_commit(vec![], &reg, 0).unwrap_err(), ChainError::NotEndorsed);
        let unsigned = Transaction::propose(&reg, "a", cfg("k", "v")).unwrap();
        assert_eq!(ledger.order_and_commit(vec![unsigned], &reg, 0).unwrap_err(), ChainError::NotEndorsed);
    }

    #[test]
    fn invalid_tx_rejected_rest_commits() {
        let (reg, mut ledger) = setup();
        ledger.submit(&reg, "a", global(2), 0).unwrap();
        let out = ledger.submit_batch(&reg, vec![("a".into(), global(1)), ("b".into(), cfg("k", "v"))], 1).unwrap();
        assert_eq!(out.committed.len(), 1);
        assert_eq!(out.rejected.len(), 1);
        assert_eq!(ledger.blocks()[1].transactions.len(), 1);
        assert_eq!(ledger.get("global_model_version"), Some("2"));

        let before = ledger.blocks().to_vec();
        assert!(matches!(ledger.submit(&reg, "a", global(1), 2), Err(ChainError::ValidationFailed(_))));
        assert_eq!(ledger.blocks(), &before[..]);
    }

    #[test]
    fn duplicate_tx_rejected() {
        let (reg, mut ledger) = setup();
        ledger.submit(&reg, "a", cfg("k", "v"), 0).unwrap();
        assert!(ledger.submit(&reg, "b", cfg("k", "v"), 1).is_err());
    }

    #[test]
    fn tampered_payload_hash_detected_at_its_index() {
        let (reg, mut ledger) = setup();
        for i in 0..5 {
            ledger.submit(&reg, "a", cfg("k", &i.to_string()), i).unwrap();
        }
        assert_eq!(ledger.validate_chain(), ChainVerdict::Ok);
        let mut bytes = *ledger.blocks()[1].payload_hash.as_bytes();
        bytes[0] ^= 1;
        ledger.blocks_mut()[1].payload_hash = Hash32::from(bytes);
        assert_eq!(ledger.validate_chain(), ChainVerdict::BadAt(1));
        assert_eq!(ledger.replay().unwrap_err(), ChainError::CorruptChain { index: 1 });
    }

    #[test]
    fn block_hash_matches_independent_encoding() {
        let (reg, mut ledger) = setup();
        ledger.submit(&reg, "a", cfg("k", "v"), 42).unwrap();
        let b = &ledger.blocks()[0];
        let mut raw = Vec::new();
        for field in [&0u64.to_le_bytes()[..], &[0u8; 32], b.payload_hash.as_bytes(), &42u64.to_le_bytes()] {
            raw.extend_from_slice(&(field.len() as u64).to_le_bytes());
            raw.extend_from_slice(field);
        }
        assert_eq!(b.block_hash, Hash32::of(&raw));
    }

    #[test]
    fn from_blocks_round_trip() {
        let (reg, mut ledger) = setup();
        ledger.submit(&reg, "a", global(1), 0).unwrap();
        ledger.submit(&reg, "b", cfg("k", "v"), 1).unwrap();
        let copy = Ledger::from_blocks("public", ledger.policy().clone(), ledger.blocks().to_vec()).unwrap();
        assert_eq!(copy.world_state(), ledger.world_state());
        let id = ledger.blocks()[1].tx_ids[0];
        assert_eq!(copy.find_tx(&id).unwrap().0, 1);
    }
}
