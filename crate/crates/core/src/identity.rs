//! Entity registration and signed access tokens.
//!
//! Every participant (an organization's client identity or one of its training
//! agents) is registered once. Registration generates an Ed25519 keypair from
//! the registry's seeded RNG and issues an HMAC-SHA-256 token in the familiar
//! `header.payload.mac` base64url form. Secret keys never leave the registry:
//! endorsement signatures are produced through [`Registry::sign_as`].

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use base64::engine::general_purpose::URL_SAFE_NO_PAD;
use base64::Engine as _;
use ed25519_dalek::{Signer as _, SigningKey, Verifier as _, VerifyingKey};
use hmac::{Hmac, Mac};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use sha2::Sha256;
use thiserror::Error;

pub const DEFAULT_TOKEN_TTL: u64 = 3600;
pub const PUBLIC_KEY_LEN: usize = 32;
pub const SIGNATURE_LEN: usize = 64;

const TOKEN_HEADER: &str = r#"{"alg":"HS256","typ":"JWT"}"#;

type HmacSha256 = Hmac<Sha256>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Role {
    Client,
    Agent,
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Role::Client => f.write_str("Client"),
            Role::Agent => f.write_str("Agent"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntityRecord {
    pub name: String,
    pub role: Role,
    pub org: String,
    /// Hex-encoded Ed25519 verification key.
    pub public_key: String,
    pub registered_at: u64,
}

/// Claims carried in a token payload.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenClaims {
    pub sub: String,
    pub org: String,
    pub role: Role,
    pub iat: u64,
    pub exp: u64,
}

/// A signed bearer token, `base64url(header).base64url(payload).base64url(mac)`.
#[derive(Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AuthToken(String);

impl AuthToken {
    pub fn from_wire(s: impl Into<String>) -> Self {
        Self(s.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Debug for AuthToken {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("AuthToken(..)")
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum IdentityError {
    #[error("entity name must not be empty")]
    EmptyName,
    #[error("organization must not be empty")]
    EmptyOrg,
    #[error("{0} already existed")]
    DuplicateName(String),
    #[error("organization {0:?} is not a member of this federation")]
    InvalidOrg(String),
    #[error("unknown entity {0:?}")]
    UnknownEntity(String),
}

#[derive(Debug, Error, Clone, Copy, PartialEq, Eq)]
pub enum TokenError {
    #[error("jwt expired")]
    Expired,
    #[error("token signature mismatch")]
    BadSignature,
    #[error("token is malformed")]
    Malformed,
}

/// Entity pool, role pools and key material.
pub struct Registry {
    entities: BTreeMap<String, EntityRecord>,
    secrets: BTreeMap<String, SigningKey>,
    client_pool: BTreeSet<String>,
    agent_pool: BTreeSet<String>,
    allowed_orgs: BTreeSet<String>,
    mac_key: [u8; 32],
    token_ttl: u64,
    rng: ChaCha20Rng,
}

impl fmt::Debug for Registry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Registry")
            .field("entities", &self.entities.len())
            .field("allowed_orgs", &self.allowed_orgs)
            .field("token_ttl", &self.token_ttl)
            .finish_non_exhaustive()
    }
}

impl Registry {
    /// Creates a registry whose keys all derive from `seed`. Only entities of
    /// the listed organizations may register.
    pub fn new<I, S>(seed: u64, allowed_orgs: I, token_ttl: u64) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut mac_key = [0u8; 32];
        rng.fill_bytes(&mut mac_key);
        Self {
            entities: BTreeMap::new(),
            secrets: BTreeMap::new(),
            client_pool: BTreeSet::new(),
            agent_pool: BTreeSet::new(),
            allowed_orgs: allowed_orgs.into_iter().map(Into::into).collect(),
            mac_key,
            token_ttl,
            rng,
        }
    }

    pub fn token_ttl(&self) -> u64 {
        self.token_ttl
    }

    pub fn register_entity(
        &mut self,
        name: &str,
        role: Role,
        org: &str,
        now: u64,
    ) -> Result<(EntityRecord, AuthToken), IdentityError> {
        if name.is_empty() {
            return Err(IdentityError::EmptyName);
        }
        if org.is_empty() {
            return Err(IdentityError::EmptyOrg);
        }
        if !self.allowed_orgs.contains(org) {
            return Err(IdentityError::InvalidOrg(org.to_string()));
        }
        if self.entities.contains_key(name) {
            return Err(IdentityError::DuplicateName(name.to_string()));
        }

        let mut seed = [0u8; 32];
        self.rng.fill_bytes(&mut seed);
        let secret = SigningKey::from_bytes(&seed);
        let record = EntityRecord {
            name: name.to_string(),
            role,
            org: org.to_string(),
            public_key: hex::encode(secret.verifying_key().to_bytes()),
            registered_at: now,
        };

        self.secrets.insert(name.to_string(), secret);
        self.entities.insert(name.to_string(), record.clone());
        match role {
            Role::Client => self.client_pool.insert(name.to_string()),
            Role::Agent => self.agent_pool.insert(name.to_string()),
        };

        let token = self.mint(&record, now);
        Ok((record, token))
    }

    /// Issues a fresh token for an already registered entity.
    pub fn issue_token(&self, name: &str, now: u64) -> Result<AuthToken, IdentityError> {
        let record = self.entities.get(name).ok_or_else(|| IdentityError::UnknownEntity(name.to_string()))?;
        Ok(self.mint(record, now))
    }

    fn mint(&self, record: &EntityRecord, now: u64) -> AuthToken {
        let claims = TokenClaims {
            sub: record.name.clone(),
            org: record.org.clone(),
            role: record.role,
            iat: now,
            exp: now.saturating_add(self.token_ttl),
        };
        let header = URL_SAFE_NO_PAD.encode(TOKEN_HEADER);
        let payload = URL_SAFE_NO_PAD.encode(serde_json::to_vec(&claims).expect("claims serialize"));
        let signing_input = format!("{header}.{payload}");
        let mac = URL_SAFE_NO_PAD.encode(self.mac(signing_input.as_bytes()));
        AuthToken(format!("{signing_input}.{mac}"))
    }

    fn mac(&self, msg: &[u8]) -> Vec<u8> {
        let mut mac = HmacSha256::new_from_slice(&self.mac_key).expect("hmac accepts any key length");
        mac.update(msg);
        mac.finalize().into_bytes().to_vec()
    }

    /// Valid iff the MAC verifies and `now < exp`.
    pub fn validate_token(&self, token: &AuthToken, now: u64) -> Result<TokenClaims, TokenError> {
        let mut parts = token.0.split('.');
        let (Some(header), Some(payload), Some(mac), None) = (parts.next(), parts.next(), parts.next(), parts.next())
        else {
            return Err(TokenError::Malformed);
        };
        let given_mac = URL_SAFE_NO_PAD.decode(mac).map_err(|_| TokenError::Malformed)?;
        let header_bytes = URL_SAFE_NO_PAD.decode(header).map_err(|_| TokenError::Malformed)?;
        let payload_bytes = URL_SAFE_NO_PAD.decode(payload).map_err(|_| TokenError::Malformed)?;

        let mut verifier = HmacSha256::new_from_slice(&self.mac_key).expect("hmac accepts any key length");
        verifier.update(header.as_bytes());
        verifier.update(b".");
        verifier.update(payload.as_bytes());
        verifier.verify_slice(&given_mac).map_err(|_| TokenError::BadSignature)?;

        if header_bytes != TOKEN_HEADER.as_bytes() {
            return Err(TokenError::Malformed);
        }
        let claims: TokenClaims = serde_json::from_slice(&payload_bytes).map_err(|_| TokenError::Malformed)?;
        if now >= claims.exp {
            return Err(TokenError::Expired);
        }
        Ok(claims)
    }

    /// Signs `msg` with the named entity's secret key.
    pub fn sign_as(&self, name: &str, msg: &[u8]) -> Result<[u8; SIGNATURE_LEN], IdentityError> {
        let key = self.secrets.get(name).ok_or_else(|| IdentityError::UnknownEntity(name.to_string()))?;
        Ok(key.sign(msg).to_bytes())
    }

    pub fn entity(&self, name: &str) -> Option<&EntityRecord> {
        self.entities.get(name)
    }

    pub fn entities(&self) -> impl Iterator<Item = &EntityRecord> {
        self.entities.values()
    }

    pub fn client_pool(&self) -> &BTreeSet<String> {
        &self.client_pool
    }

    pub fn agent_pool(&self) -> &BTreeSet<String> {
        &self.agent_pool
    }

    /// Entity list without secret material.
    pub fn export_json(&self) -> String {
        let list: Vec<&EntityRecord> = self.entities.values().collect();
        serde_json::to_string_pretty(&list).expect("records serialize")
    }
}

/// Lookup of verification keys by entity name.
pub trait KeyDirectory {
    fn verifying_key(&self, name: &str) -> Option<VerifyingKey>;
    fn org_of(&self, name: &str) -> Option<&str>;
}

impl KeyDirectory for Registry {
    fn verifying_key(&self, name: &str) -> Option<VerifyingKey> {
        let record = self.entities.get(name)?;
        let mut bytes = [0u8; PUBLIC_KEY_LEN];
        hex::decode_to_slice(&record.public_key, &mut bytes).ok()?;
        VerifyingKey::from_bytes(&bytes).ok()
    }

    fn org_of(&self, name: &str) -> Option<&str> {
        self.entities.get(name).map(|r| r.org.as_str())
    }
}

/// Checks an Ed25519 signature over `msg` against the registered key of `name`.
pub fn verify_signature(keys: &dyn KeyDirectory, name: &str, msg: &[u8], signature: &[u8]) -> bool {
    let Some(key) = keys.verifying_key(name) else {
        return false;
    };
    let Ok(sig) = ed25519_dalek::Signature::from_slice(signature) else {
        return false;
    };
    key.verify(msg, &sig).is_ok()
}
