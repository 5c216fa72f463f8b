//! Node identities and signed control-plane requests.
//!
//! A node id is `"node-"` followed by the first 16 hex characters of
//! SHA-256 over the 33-byte compressed secp256k1 public key. Requests sign the
//! SHA-256 digest of the ASCII string `"{node_id}:{timestamp}"` (decimal seconds),
//! either with a recoverable ECDSA signature (wallet mode, 65 bytes: `r || s || v`)
//! or with HMAC-SHA256 under a shared cluster secret.

use hmac::{Hmac, Mac};
use k256::ecdsa::{RecoveryId, Signature, SigningKey, VerifyingKey};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use subtle::ConstantTimeEq;
use thiserror::Error;

pub const FRESHNESS_WINDOW_SECS: u64 = 300;
pub const COMPRESSED_PUBKEY_LEN: usize = 33;
pub const WALLET_SIGNATURE_LEN: usize = 65;

type HmacSha256 = Hmac<Sha256>;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum IdentityError {
    #[error("public key must be {COMPRESSED_PUBKEY_LEN} bytes, got {0}")]
    WrongKeyLength(usize),
    #[error("invalid secret key")]
    InvalidSecret,
    #[error("cluster mode requires a shared secret")]
    MissingSecret,
    #[error("malformed signature: {0}")]
    MalformedSignature(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AuthMode {
    Wallet,
    ClusterHmac,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RejectReason {
    Stale,
    Binding,
    Mac,
    Signature,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Accept,
    Reject(RejectReason),
}

pub fn derive_node_id(pubkey: &[u8]) -> Result<String, IdentityError> {
    if pubkey.len() != COMPRESSED_PUBKEY_LEN {
        return Err(IdentityError::WrongKeyLength(pubkey.len()));
    }
    let digest = hex::encode(Sha256::digest(pubkey));
    Ok(format!("node-{}", &digest[..16]))
}

/// SHA-256 of `"{node_id}:{timestamp}"`.
pub fn request_digest(node_id: &str, timestamp: u64) -> [u8; 32] {
    Sha256::digest(format!("{node_id}:{timestamp}").as_bytes()).into()
}

pub struct NodeIdentity {
    signing: SigningKey,
    pubkey: [u8; COMPRESSED_PUBKEY_LEN],
    node_id: String,
}

impl std::fmt::Debug for NodeIdentity {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("NodeIdentity")
            .field("node_id", &self.node_id)
            .field("pubkey", &hex::encode(self.pubkey))
            .finish_non_exhaustive()
    }
}

impl NodeIdentity {
    pub fn from_secret_bytes(secret: &[u8; 32]) -> Result<Self, IdentityError> {
        let signing =
            SigningKey::from_bytes(secret.into()).map_err(|_| IdentityError::InvalidSecret)?;
        Ok(Self::from_signing_key(signing))
    }

    pub fn generate<R: rand::RngCore + rand::CryptoRng>(rng: &mut R) -> Self {
        Self::from_signing_key(SigningKey::random(rng))
    }

    fn from_signing_key(signing: SigningKey) -> Self {
        let point = signing.verifying_key().to_encoded_point(true);
        let pubkey: [u8; COMPRESSED_PUBKEY_LEN] =
            point.as_bytes().try_into().expect("compressed point is 33 bytes");
        let node_id = derive_node_id(&pubkey).expect("33-byte key");
        Self {
            signing,
            pubkey,
            node_id,
        }
    }

    pub fn node_id(&self) -> &str {
        &self.node_id
    }

    pub fn pubkey(&self) -> &[u8; COMPRESSED_PUBKEY_LEN] {
        &self.pubkey
    }

    /// Wallet-mode signature for an arbitrary claimed id. Honest callers pass their own id.
    pub fn sign_as(&self, claimed_id: &str, timestamp: u64) -> SignedRequest {
        let digest = request_digest(claimed_id, timestamp);
        let (sig, recid) = self
            .signing
            .sign_prehash_recoverable(&digest)
            .expect("prehash signing over a 32-byte digest");
        let mut bytes = sig.to_bytes().to_vec();
        bytes.push(recid.to_byte());
        SignedRequest {
            node_id: claimed_id.to_string(),
            timestamp,
            mode: AuthMode::Wallet,
            signature: bytes,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SignedRequest {
    pub node_id: String,
    pub timestamp: u64,
    pub mode: AuthMode,
    #[serde(with = "hex_bytes")]
    pub signature: Vec<u8>,
}

pub fn sign_request(
    identity: &NodeIdentity,
    timestamp: u64,
    mode: AuthMode,
    cluster_secret: Option<&[u8]>,
) -> Result<SignedRequest, IdentityError> {
    match mode {
        AuthMode::Wallet => Ok(identity.sign_as(identity.node_id(), timestamp)),
        AuthMode::ClusterHmac => {
            let secret = cluster_secret.ok_or(IdentityError::MissingSecret)?;
            Ok(SignedRequest {
                node_id: identity.node_id().to_string(),
                timestamp,
                mode,
                signature: cluster_mac(secret, identity.node_id(), timestamp),
            })
        }
    }
}

fn cluster_mac(secret: &[u8], node_id: &str, timestamp: u64) -> Vec<u8> {
    let mut mac = HmacSha256::new_from_slice(secret).expect("HMAC accepts any key length");
    mac.update(&request_digest(node_id, timestamp));
    mac.finalize().into_bytes().to_vec()
}

/// Equality whose running time depends only on the lengths.
pub fn constant_time_eq(a: &[u8], b: &[u8]) -> bool {
    a.ct_eq(b).into()
}

fn is_fresh(timestamp: u64, now: u64) -> bool {
    timestamp.abs_diff(now) <= FRESHNESS_WINDOW_SECS
}

fn parse_wallet_signature(sig: &[u8]) -> Result<(Signature, RecoveryId), IdentityError> {
    if sig.len() != WALLET_SIGNATURE_LEN {
        return Err(IdentityError::MalformedSignature(format!(
            "expected {WALLET_SIGNATURE_LEN} bytes, got {}",
            sig.len()
        )));
    }
    let parsed = Signature::from_slice(&sig[..64])
        .map_err(|e| IdentityError::MalformedSignature(e.to_string()))?;
    let recid = RecoveryId::from_byte(sig[64])
        .ok_or_else(|| IdentityError::MalformedSignature("bad recovery byte".into()))?;
    Ok((parsed, recid))
}

/// Recovers the signer's compressed public key from a wallet-mode request.
/// `Ok(None)` means the signature is well formed but matches no key for this digest.
pub fn recover_pubkey(
    req: &SignedRequest,
) -> Result<Option<[u8; COMPRESSED_PUBKEY_LEN]>, IdentityError> {
    let (sig, recid) = parse_wallet_signature(&req.signature)?;
    let digest = request_digest(&req.node_id, req.timestamp);
    Ok(VerifyingKey::recover_from_prehash(&digest, &sig, recid)
        .ok()
        .map(|key| {
            key.to_encoded_point(true)
                .as_bytes()
                .try_into()
                .expect("compressed point is 33 bytes")
        }))
}

pub fn verify_request(
    req: &SignedRequest,
    now: u64,
    cluster_secret: Option<&[u8]>,
) -> Result<Verdict, IdentityError> {
    if !is_fresh(req.timestamp, now) {
        return Ok(Verdict::Reject(RejectReason::Stale));
    }
    match req.mode {
        AuthMode::Wallet => {
            let Some(pubkey) = recover_pubkey(req)? else {
                return Ok(Verdict::Reject(RejectReason::Signature));
            };
            if derive_node_id(&pubkey)? != req.node_id {
                return Ok(Verdict::Reject(RejectReason::Binding));
            }
            Ok(Verdict::Accept)
        }
        AuthMode::ClusterHmac => {
            let secret = cluster_secret.ok_or(IdentityError::MissingSecret)?;
            let expected = cluster_mac(secret, &req.node_id, req.timestamp);
            if constant_time_eq(&expected, &req.signature) {
                Ok(Verdict::Accept)
            } else {
                Ok(Verdict::Reject(RejectReason::Mac))
            }
        }
    }
}

mod hex_bytes {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(v))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        let s = String::deserialize(d)?;
        hex::decode(s).map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn ident(seed: u64) -> NodeIdentity {
        NodeIdentity::generate(&mut ChaCha20Rng::seed_from_u64(seed))
    }

    #[test]
    fn node_id_shape_and_determinism() {
        let id = ident(1);
        assert!(id.node_id().starts_with("node-"));
        assert_eq!(id.node_id().len(), 5 + 16);
        assert_eq!(derive_node_id(id.pubkey()).unwrap(), id.node_id());
        assert_eq!(
            derive_node_id(&[0u8; 32]),
            Err(IdentityError::WrongKeyLength(32))
        );
    }

    #[test]
    fn wallet_round_trip_and_tamper() {
        let id = ident(2);
        let now = 1_700_000_000;
        let req = sign_request(&id, now, AuthMode::Wallet, None).unwrap();
        assert_eq!(verify_request(&req, now, None).unwrap(), Verdict::Accept);
        assert_eq!(&recover_pubkey(&req).unwrap().unwrap(), id.pubkey());
        let mut tampered = req.clone();
        tampered.timestamp += 1;
        assert_ne!(verify_request(&tampered, now, None).unwrap(), Verdict::Accept);
    }

    #[test]
    fn cluster_round_trip_and_missing_secret() {
        let id = ident(3);
        let secret = b"cluster-secret";
        let req = sign_request(&id, 100, AuthMode::ClusterHmac, Some(secret)).unwrap();
        assert_eq!(verify_request(&req, 100, Some(secret)).unwrap(), Verdict::Accept);
        assert_eq!(
            verify_request(&req, 100, Some(b"other")).unwrap(),
            Verdict::Reject(RejectReason::Mac)
        );
        assert_eq!(
            sign_request(&id, 100, AuthMode::ClusterHmac, None).unwrap_err(),
            IdentityError::MissingSecret
        );
    }

    #[test]
    fn freshness_boundary_is_two_sided() {
        let id = ident(4);
        let now = 10_000;
        for (ts, ok) in [
            (now - 301, false),
            (now - 300, true),
            (now - 299, true),
            (now + 300, true),
            (now + 301, false),
        ] {
            let req = sign_request(&id, ts, AuthMode::Wallet, None).unwrap();
            let v = verify_request(&req, now, None).unwrap();
            if ok {
                assert_eq!(v, Verdict::Accept, "ts {ts}");
            } else {
                assert_eq!(v, Verdict::Reject(RejectReason::Stale), "ts {ts}");
            }
        }
    }

    #[test]
    fn binding_rejects_borrowed_identity() {
        let a = ident(5);
        let b = ident(6);
        let req = a.sign_as(b.node_id(), 50);
        assert_eq!(
            verify_request(&req, 50, None).unwrap(),
            Verdict::Reject(RejectReason::Binding)
        );
    }

    #[test]
    fn malformed_signature_is_an_error() {
        let req = SignedRequest {
            node_id: "node-0000000000000000".into(),
            timestamp: 1,
            mode: AuthMode::Wallet,
            signature: vec![1, 2, 3],
        };
        assert!(matches!(
            verify_request(&req, 1, None),
            Err(IdentityError::MalformedSignature(_))
        ));
    }

    #[test]
    fn constant_time_eq_semantics() {
        assert!(constant_time_eq(b"abc", b"abc"));
        assert!(!constant_time_eq(b"abc", b"abd"));
        assert!(!constant_time_eq(b"abc", b"ab"));
    }
}
