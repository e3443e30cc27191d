//! Identities, startup kits, and signatures.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use ed25519_dalek::{Signature, Signer, SigningKey, Verifier, VerifyingKey};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{FedError, Result};
use crate::model::ParameterVector;

pub const SERVER_ID: &str = "server";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Role {
    Server,
    Client,
    Admin,
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::Server => "server",
            Role::Client => "client",
            Role::Admin => "admin",
        })
    }
}

impl FromStr for Role {
    type Err = FedError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "server" => Ok(Role::Server),
            "client" => Ok(Role::Client),
            "admin" => Ok(Role::Admin),
            other => Err(FedError::Config(format!("unknown role `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Identity {
    pub site_id: String,
    pub public_key: VerifyingKey,
    pub role: Role,
}

impl Identity {
    pub fn verify_digest(&self, digest: &[u8; 32], signature: &[u8]) -> bool {
        let Ok(sig) = Signature::from_slice(signature) else {
            return false;
        };
        self.public_key.verify(digest, &sig).is_ok()
    }
}

/// Public keys of every participant, keyed by site id.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Roster {
    members: BTreeMap<String, Identity>,
}

impl Roster {
    pub fn insert(&mut self, id: Identity) -> Result<()> {
        if self.members.contains_key(&id.site_id) {
            return Err(FedError::DuplicateSite(id.site_id));
        }
        self.members.insert(id.site_id.clone(), id);
        Ok(())
    }

    pub fn get(&self, site_id: &str) -> Option<&Identity> {
        self.members.get(site_id)
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Identity> {
        self.members.values()
    }

    pub fn clients(&self) -> impl Iterator<Item = &Identity> {
        self.iter().filter(|i| i.role == Role::Client)
    }

    /// One line per member: `<site_id> <role> <public key hex>`.
    pub fn to_text(&self) -> String {
        self.iter()
            .map(|i| {
                format!(
                    "{} {} {}\n",
                    i.site_id,
                    i.role,
                    hex::encode(i.public_key.as_bytes())
                )
            })
            .collect()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut roster = Roster::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: &str| FedError::Parse {
                path: "roster".into(),
                line: n + 1,
                msg: msg.to_string(),
            };
            let cols: Vec<&str> = line.split_whitespace().collect();
            let [site_id, role, key] = cols[..] else {
                return Err(err("expected `<site_id> <role> <key>`"));
            };
            let key = parse_public_key(key).map_err(|_| err("bad public key"))?;
            roster.insert(Identity {
                site_id: site_id.to_string(),
                public_key: key,
                role: role.parse()?,
            })?;
        }
        Ok(roster)
    }
}

fn parse_public_key(hex_key: &str) -> Result<VerifyingKey> {
    let bytes: [u8; 32] = hex::decode(hex_key.trim())
        .ok()
        .and_then(|b| b.try_into().ok())
        .ok_or_else(|| FedError::Config("public key must be 32 hex-encoded bytes".into()))?;
    VerifyingKey::from_bytes(&bytes).map_err(|e| FedError::Config(format!("public key: {e}")))
}

fn parse_signing_key(hex_key: &str) -> Result<SigningKey> {
    let bytes: [u8; 32] = hex::decode(hex_key.trim())
        .ok()
        .and_then(|b| b.try_into().ok())
        .ok_or_else(|| FedError::Config("private key must be 32 hex-encoded bytes".into()))?;
    Ok(SigningKey::from_bytes(&bytes))
}

/// Everything one participant needs to join: its own key pair, the roster of
/// public keys, and the server address.
#[derive(Debug, Clone)]
pub struct StartupKit {
    pub site_id: String,
    pub role: Role,
    pub signing_key: SigningKey,
    pub roster: Roster,
    pub server_addr: String,
}

impl StartupKit {
    pub fn identity(&self) -> Identity {
        Identity {
            site_id: self.site_id.clone(),
            public_key: self.signing_key.verifying_key(),
            role: self.role,
        }
    }

    pub fn sign_digest(&self, digest: &[u8; 32]) -> Vec<u8> {
        self.signing_key.sign(digest).to_bytes().to_vec()
    }

    /// Writes `<dir>/<site_id>/{key.priv,key.pub,roster,server.addr}`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        let kit_dir = dir.join(&self.site_id);
        std::fs::create_dir_all(&kit_dir).map_err(|e| FedError::io(&kit_dir, e))?;
        let write = |name: &str, contents: String| {
            let p = kit_dir.join(name);
            std::fs::write(&p, contents).map_err(|e| FedError::io(&p, e))
        };
        write(
            "key.priv",
            format!("{}\n", hex::encode(self.signing_key.to_bytes())),
        )?;
        write(
            "key.pub",
            format!(
                "{} {}\n",
                self.role,
                hex::encode(self.signing_key.verifying_key().as_bytes())
            ),
        )?;
        write("roster", self.roster.to_text())?;
        write("server.addr", format!("{}\n", self.server_addr))?;
        Ok(())
    }

    /// Loads a kit directory written by [`StartupKit::write`].
    pub fn load(kit_dir: &Path) -> Result<Self> {
        let read = |name: &str| {
            let p = kit_dir.join(name);
            std::fs::read_to_string(&p).map_err(|e| FedError::io(&p, e))
        };
        let signing_key = parse_signing_key(&read("key.priv")?)?;
        let roster = Roster::parse(&read("roster")?)?;
        let server_addr = read("server.addr")?.trim().to_string();
        let public = signing_key.verifying_key();
        let me = roster
            .iter()
            .find(|i| i.public_key == public)
            .ok_or_else(|| FedError::Auth("kit key is not in its own roster".into()))?;
        Ok(Self {
            site_id: me.site_id.clone(),
            role: me.role,
            signing_key,
            roster,
            server_addr,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RosterSpec {
    pub server_addr: String,
    pub sites: Vec<String>,
    #[serde(default)]
    pub admins: Vec<String>,
}

impl RosterSpec {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| FedError::Config(format!("roster spec: {e}")))
    }
}

fn key_for(site_id: &str, key_seed: Option<u64>) -> SigningKey {
    match key_seed {
        Some(seed) => {
            let mut h = Sha256::new();
            h.update(b"fedmesh/test-key");
            h.update(seed.to_le_bytes());
            h.update(site_id.as_bytes());
            SigningKey::from_bytes(&h.finalize().into())
        }
        None => SigningKey::generate(&mut rand::rngs::OsRng),
    }
}

/// Generates one kit per site plus the server kit (and admin kits, if any).
/// `key_seed` makes key generation deterministic; leave it `None` outside
/// tests.
pub fn provision(spec: &RosterSpec, key_seed: Option<u64>) -> Result<Vec<StartupKit>> {
    let mut ids: Vec<(String, Role)> = vec![(SERVER_ID.to_string(), Role::Server)];
    ids.extend(spec.sites.iter().map(|s| (s.clone(), Role::Client)));
    ids.extend(spec.admins.iter().map(|s| (s.clone(), Role::Admin)));
    let mut seen = BTreeSet::new();
    for (id, _) in &ids {
        if !seen.insert(id.as_str()) {
            return Err(FedError::DuplicateSite(id.clone()));
        }
        if id.is_empty() || id.chars().any(|c| c.is_whitespace() || c == '/') {
            return Err(FedError::Config(format!("invalid site id `{id}`")));
        }
    }

    let keys: Vec<(String, Role, SigningKey)> = ids
        .into_iter()
        .map(|(id, role)| {
            let k = key_for(&id, key_seed);
            (id, role, k)
        })
        .collect();
    let mut roster = Roster::default();
    for (id, role, key) in &keys {
        roster.insert(Identity {
            site_id: id.clone(),
            public_key: key.verifying_key(),
            role: *role,
        })?;
    }
    Ok(keys
        .into_iter()
        .map(|(site_id, role, signing_key)| StartupKit {
            site_id,
            role,
            signing_key,
            roster: roster.clone(),
            server_addr: spec.server_addr.clone(),
        })
        .collect())
}

/// SHA-256 over the dimension count and little-endian values.
pub fn model_digest(params: &ParameterVector) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(b"fedmesh/model/v1");
    h.update((params.dims() as u64).to_be_bytes());
    for v in params.as_slice() {
        h.update(v.to_le_bytes());
    }
    h.finalize().into()
}

pub fn sign_model(params: &ParameterVector, kit: &StartupKit) -> Vec<u8> {
    kit.sign_digest(&model_digest(params))
}

/// True iff `signature` is `identity`'s signature over exactly `params`.
pub fn verify_model(params: &ParameterVector, signature: &[u8], identity: &Identity) -> bool {
    identity.verify_digest(&model_digest(params), signature)
}
