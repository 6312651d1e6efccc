use std::collections::{BTreeMap, BTreeSet};

use crate::identity::KeyDirectory;

use super::tx::EndorsementPolicy;
use super::ChainError;

/// Chain-scoped key/value store readable and writable only by member
/// organizations. Contents never enter blocks or world state.
#[derive(Debug, Clone)]
pub struct PrivateDataCollection {
    data: BTreeMap<String, Vec<u8>>,
    members: BTreeSet<String>,
    policy: EndorsementPolicy,
}

impl PrivateDataCollection {
    pub fn new<I, S>(members: I, policy: EndorsementPolicy) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self { data: BTreeMap::new(), members: members.into_iter().map(Into::into).collect(), policy }
    }

    pub fn members(&self) -> &BTreeSet<String> {
        &self.members
    }

    pub fn is_member(&self, org: &str) -> bool {
        self.members.contains(org)
    }

    pub fn put(
        &mut self,
        caller_org: &str,
        key: &str,
        value: Vec<u8>,
        keys: &dyn KeyDirectory,
    ) -> Result<(), ChainError> {
        if !self.is_member(caller_org) {
            return Err(ChainError::AccessDenied(caller_org.to_string()));
        }
        let member_peers = self
            .policy
            .eligible_peers()
            .iter()
            .filter(|p| keys.org_of(p).is_some_and(|o| self.members.contains(o)))
            .count();
        if member_peers < self.policy.required_k() {
            return Err(ChainError::PolicyUnsatisfiable);
        }
        self.data.insert(key.to_string(), value);
        Ok(())
    }

    pub fn get(&self, caller_org: &str, key: &str) -> Result<Option<&[u8]>, ChainError> {
        if !self.is_member(caller_org) {
            return Err(ChainError::AccessDenied(caller_org.to_string()));
        }
        Ok(self.data.get(key).map(Vec::as_slice))
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}
