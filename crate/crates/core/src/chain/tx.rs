use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::digest::{CanonicalEncoder, Hash32};
use crate::identity::{verify_signature, KeyDirectory, SIGNATURE_LEN};

use super::ChainError;

/// Which stage of the protocol a model update belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum UpdateScope {
    /// Public global model (initial upload or round aggregate).
    Global,
    /// An organization's model submitted to the public chain.
    Submission,
    /// Aggregate of an organization's agents on its private chain.
    Private,
    /// One agent's local update on a private chain.
    Local,
}

impl UpdateScope {
    fn tag(self) -> &'static str {
        match self {
            UpdateScope::Global => "global",
            UpdateScope::Submission => "submission",
            UpdateScope::Private => "private",
            UpdateScope::Local => "local",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AggregateInput {
    pub source: String,
    pub digest: Hash32,
    pub n_samples: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelUpdate {
    pub org: String,
    pub participant: String,
    pub scope: UpdateScope,
    pub round: u64,
    pub params_digest: Hash32,
    pub n_samples: u64,
    pub checkpoint_ref: String,
    pub model_version: u64,
    /// Inputs an aggregate was computed from; empty for plain updates.
    pub inputs: Vec<AggregateInput>,
    /// Unlearning deltas folded into this aggregate, by delta digest.
    pub integrated_deltas: Vec<Hash32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UnlearnRecord {
    pub org: String,
    pub delta_digest: Hash32,
    pub base_model_version: u64,
    pub forget_acc_before: f64,
    pub forget_acc_after: f64,
    pub retain_acc_before: f64,
    pub retain_acc_after: f64,
    pub val_loss_after: f64,
    pub tau_forget: f64,
    pub tau_retain: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegistrationEvent {
    pub name: String,
    pub role: String,
    pub org: String,
    pub public_key: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigEvent {
    pub key: String,
    pub value: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Payload {
    ModelUpdate(ModelUpdate),
    UnlearnResult(UnlearnRecord),
    Registration(RegistrationEvent),
    Config(ConfigEvent),
}

impl Payload {
    /// Length-prefixed encoding in declared field order, led by a variant tag.
    pub fn canonical_bytes(&self) -> Vec<u8> {
        let mut enc = CanonicalEncoder::new();
        match self {
            Payload::ModelUpdate(m) => {
                enc.str("model-update")
                    .str(&m.org)
                    .str(&m.participant)
                    .str(m.scope.tag())
                    .u64(m.round)
                    .hash(&m.params_digest)
                    .u64(m.n_samples)
                    .str(&m.checkpoint_ref)
                    .u64(m.model_version)
                    .u64(m.inputs.len() as u64);
                for input in &m.inputs {
                    enc.str(&input.source).hash(&input.digest).u64(input.n_samples);
                }
                enc.u64(m.integrated_deltas.len() as u64);
                for d in &m.integrated_deltas {
                    enc.hash(d);
                }
            }
            Payload::UnlearnResult(u) => {
                enc.str("unlearn-result")
                    .str(&u.org)
                    .hash(&u.delta_digest)
                    .u64(u.base_model_version)
                    .f64(u.forget_acc_before)
                    .f64(u.forget_acc_after)
                    .f64(u.retain_acc_before)
                    .f64(u.retain_acc_after)
                    .f64(u.val_loss_after)
                    .f64(u.tau_forget)
                    .f64(u.tau_retain);
            }
            Payload::Registration(r) => {
                enc.str("registration").str(&r.name).str(&r.role).str(&r.org).str(&r.public_key);
            }
            Payload::Config(c) => {
                enc.str("config").str(&c.key).str(&c.value);
            }
        }
        enc.finish()
    }

    pub fn tx_id(&self) -> Hash32 {
        Hash32::of(&self.canonical_bytes())
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Payload::ModelUpdate(_) => "model-update",
            Payload::UnlearnResult(_) => "unlearn-result",
            Payload::Registration(_) => "registration",
            Payload::Config(_) => "config",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum TxState {
    Proposal,
    Endorsement,
    Ordering,
    Validation,
    Committed,
    Rejected,
}

impl fmt::Display for TxState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Endorsement {
    pub peer: String,
    /// Hex-encoded Ed25519 signature over [`endorsement_message`].
    pub signature: String,
}

/// k-of-n endorsement threshold over a fixed peer set.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EndorsementPolicy {
    required_k: usize,
    eligible_peers: BTreeSet<String>,
}

impl EndorsementPolicy {
    pub fn new<I, S>(required_k: usize, peers: I) -> Result<Self, ChainError>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let eligible_peers: BTreeSet<String> = peers.into_iter().map(Into::into).collect();
        if required_k == 0 || required_k > eligible_peers.len() {
            return Err(ChainError::InvalidPolicy { required_k, peers: eligible_peers.len() });
        }
        Ok(Self { required_k, eligible_peers })
    }

    /// Majority policy: k = ceil(n / 2).
    pub fn majority<I, S>(peers: I) -> Result<Self, ChainError>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let peers: BTreeSet<String> = peers.into_iter().map(Into::into).collect();
        let k = peers.len().div_ceil(2);
        Self::new(k, peers)
    }

    pub fn required_k(&self) -> usize {
        self.required_k
    }

    pub fn eligible_peers(&self) -> &BTreeSet<String> {
        &self.eligible_peers
    }

    pub fn is_eligible(&self, peer: &str) -> bool {
        self.eligible_peers.contains(peer)
    }
}

/// Bytes an endorsing peer signs: the channel and the transaction id.
pub fn endorsement_message(channel_id: &str, tx_id: &Hash32) -> Vec<u8> {
    CanonicalEncoder::new().str("endorse").str(channel_id).hash(tx_id).finish()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Transaction {
    tx_id: Hash32,
    proposer: String,
    payload: Payload,
    state: TxState,
    endorsements: Vec<Endorsement>,
}

impl Transaction {
    /// Creates a transaction in the Proposal state.
    pub fn propose(keys: &dyn KeyDirectory, proposer: &str, payload: Payload) -> Result<Self, ChainError> {
        if keys.org_of(proposer).is_none() {
            return Err(ChainError::UnknownProposer(proposer.to_string()));
        }
        Ok(Self {
            tx_id: payload.tx_id(),
            proposer: proposer.to_string(),
            payload,
            state: TxState::Proposal,
            endorsements: Vec::new(),
        })
    }

    pub fn tx_id(&self) -> Hash32 {
        self.tx_id
    }

    pub fn proposer(&self) -> &str {
        &self.proposer
    }

    pub fn payload(&self) -> &Payload {
        &self.payload
    }

    pub fn state(&self) -> TxState {
        self.state
    }

    pub fn endorsements(&self) -> &[Endorsement] {
        &self.endorsements
    }

    /// Appends a verified endorsement. The transaction is left untouched on error.
    pub fn endorse(
        &mut self,
        channel_id: &str,
        peer: &str,
        signature: &[u8],
        policy: &EndorsementPolicy,
        keys: &dyn KeyDirectory,
    ) -> Result<(), ChainError> {
        if !matches!(self.state, TxState::Proposal | TxState::Endorsement) {
            return Err(ChainError::InvalidTransition { from: self.state, to: TxState::Endorsement });
        }
        if !policy.is_eligible(peer) {
            return Err(ChainError::IneligiblePeer(peer.to_string()));
        }
        if self.endorsements.iter().any(|e| e.peer == peer) {
            return Err(ChainError::DuplicateEndorsement(peer.to_string()));
        }
        let msg = endorsement_message(channel_id, &self.tx_id);
        if signature.len() != SIGNATURE_LEN || !verify_signature(keys, peer, &msg, signature) {
            return Err(ChainError::BadSignature(peer.to_string()));
        }
        self.endorsements.push(Endorsement { peer: peer.to_string(), signature: hex::encode(signature) });
        self.state = TxState::Endorsement;
        Ok(())
    }

    /// Distinct eligible peers whose signatures verify.
    pub fn valid_endorsements(&self, channel_id: &str, policy: &EndorsementPolicy, keys: &dyn KeyDirectory) -> usize {
        let msg = endorsement_message(channel_id, &self.tx_id);
        let mut seen = BTreeSet::new();
        for e in &self.endorsements {
            if !policy.is_eligible(&e.peer) || seen.contains(e.peer.as_str()) {
                continue;
            }
            let Ok(sig) = hex::decode(&e.signature) else { continue };
            if verify_signature(keys, &e.peer, &msg, &sig) {
                seen.insert(e.peer.as_str());
            }
        }
        seen.len()
    }

    pub fn is_ready_for_ordering(&self, policy: &EndorsementPolicy) -> bool {
        self.state == TxState::Endorsement && self.endorsements.len() >= policy.required_k()
    }

    pub(crate) fn advance(&mut self, to: TxState) -> Result<(), ChainError> {
        let ok = match (self.state, to) {
            (TxState::Proposal, TxState::Endorsement)
            | (TxState::Endorsement, TxState::Ordering)
            | (TxState::Ordering, TxState::Validation)
            | (TxState::Validation, TxState::Committed) => true,
            (from, TxState::Rejected) => from != TxState::Committed && from != TxState::Rejected,
            _ => false,
        };
        if !ok {
            return Err(ChainError::InvalidTransition { from: self.state, to });
        }
        self.state = to;
        Ok(())
    }

    /// Tx id recomputed from the payload.
    pub fn recomputed_id(&self) -> Hash32 {
        self.payload.tx_id()
    }

    pub(crate) fn encode_into(&self, enc: &mut CanonicalEncoder) {
        enc.hash(&self.tx_id).str(&self.proposer).bytes(&self.payload.canonical_bytes());
        enc.u64(self.endorsements.len() as u64);
        for e in &self.endorsements {
            enc.str(&e.peer).str(&e.signature);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::identity::{Registry, Role};

    fn setup() -> (Registry, EndorsementPolicy) {
        let mut reg = Registry::new(1, ["o"], 3600);
        for p in ["p1", "p2", "p3"] {
            reg.register_entity(p, Role::Client, "o", 0).unwrap();
        }
        let policy = EndorsementPolicy::new(2, ["p1", "p2"]).unwrap();
        (reg, policy)
    }

    fn cfg(v: &str) -> Payload {
        Payload::Config(ConfigEvent { key: "k".into(), value: v.into() })
    }

    #[test]
    fn content_addressed_ids() {
        let (reg, _) = setup();
        let a = Transaction::propose(&reg, "p1", cfg("v")).unwrap();
        let b = Transaction::propose(&reg, "p2", cfg("v")).unwrap();
        let c = Transaction::propose(&reg, "p1", cfg("w")).unwrap();
        assert_eq!(a.tx_id(), b.tx_id());
        assert_ne!(a.tx_id(), c.tx_id());
        assert_eq!(a.state(), TxState::Proposal);
    }

    #[test]
    fn tx_id_is_sha256_of_canonical_bytes() {
        let p = cfg("v");
        let mut oracle = Vec::new();
        for field in [b"config".as_slice(), b"k", b"v"] {
            oracle.extend_from_slice(&(field.len() as u64).to_le_bytes());
            oracle.extend_from_slice(field);
        }
        assert_eq!(p.canonical_bytes(), oracle);
        assert_eq!(p.tx_id(), Hash32::of(&oracle));
    }

    #[test]
    fn unknown_proposer() {
        let (reg, _) = setup();
        assert_eq!(
            Transaction::propose(&reg, "ghost", cfg("v")).unwrap_err(),
            ChainError::UnknownProposer("ghost".into())
        );
    }

    #[test]
    fn threshold_needs_k_distinct_valid_signatures() {
        let (reg, policy) = setup();
        let mut tx = Transaction::propose(&reg, "p1", cfg("v")).unwrap();
        let msg = endorsement_message("ch", &tx.tx_id());
        tx.endorse("ch", "p1", &reg.sign_as("p1", &msg).unwrap(), &policy, &reg).unwrap();
        assert_eq!(tx.state(), TxState::Endorsement);
        assert!(!tx.is_ready_for_ordering(&policy));

        let dup = tx.endorse("ch", "p1", &reg.sign_as("p1", &msg).unwrap(), &policy, &reg);
        assert_eq!(dup.unwrap_err(), ChainError::DuplicateEndorsement("p1".into()));

        // p2's slot signed with p3's key.
        let forged = reg.sign_as("p3", &msg).unwrap();
        assert_eq!(tx.endorse("ch", "p2", &forged, &policy, &reg).unwrap_err(), ChainError::BadSignature("p2".into()));
        assert!(!tx.is_ready_for_ordering(&policy));

        let outsider = reg.sign_as("p3", &msg).unwrap();
        assert_eq!(tx.endorse("ch", "p3", &outsider, &policy, &reg).unwrap_err(), ChainError::IneligiblePeer("p3".into()));

        tx.endorse("ch", "p2", &reg.sign_as("p2", &msg).unwrap(), &policy, &reg).unwrap();
        assert!(tx.is_ready_for_ordering(&policy));
        assert_eq!(tx.valid_endorsements("ch", &policy, &reg), 2);
        assert_eq!(tx.valid_endorsements("other", &policy, &reg), 0);
    }

    #[test]
    fn majority_policy() {
        assert_eq!(EndorsementPolicy::majority(["a"]).unwrap().required_k(), 1);
        assert_eq!(EndorsementPolicy::majority(["a", "b"]).unwrap().required_k(), 1);
        assert_eq!(EndorsementPolicy::majority(["a", "b", "c"]).unwrap().required_k(), 2);
        assert!(EndorsementPolicy::majority(Vec::<String>::new()).is_err());
        assert!(EndorsementPolicy::new(3, ["a", "b"]).is_err());
    }

    #[test]
    fn lifecycle_never_moves_backward() {
        let (reg, _) = setup();
        let mut tx = Transaction::propose(&reg, "p1", cfg("v")).unwrap();
        assert!(tx.advance(TxState::Ordering).is_err());
        tx.advance(TxState::Endorsement).unwrap();
        tx.advance(TxState::Ordering).unwrap();
        assert!(tx.advance(TxState::Endorsement).is_err());
        tx.advance(TxState::Rejected).unwrap();
        assert!(tx.advance(TxState::Committed).is_err());
        assert!(tx.advance(TxState::Rejected).is_err());
    }
}
