//! Bodies and signing for the `/remote/v1/` protocol.
//!
//! Bodies are compact JSON with fields in declaration order and sets sorted,
//! so equal values always produce equal bytes. The signature header carries
//! `hex(HMAC-SHA256(secret, path || "\n" || body))`. See
//! `docs/wire-format.md`.

use hmac::{Hmac, Mac};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::ids::{AsnId, MessageId, UserId};
use crate::model::{Message, Profile};

pub const PREFIX: &str = "/remote/v1";
pub const MESSAGES: &str = "/remote/v1/messages";
pub const CIRCLES: &str = "/remote/v1/circles";
pub const PAIR: &str = "/remote/v1/pair";
pub const FOLLOWS: &str = "/remote/v1/follows";
pub const USERS: &str = "/remote/v1/users/";

pub const ORIGIN_HEADER: &str = "x-prism-origin";
pub const SIGNATURE_HEADER: &str = "x-prism-signature";

pub fn user_path(u: &UserId) -> String {
    format!("{USERS}{u}")
}

/// The unit forwarded once per destination ASN.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RemoteEnvelope {
    pub id: String,
    pub origin: AsnId,
    /// Milliseconds since the Unix epoch at the origin.
    pub sent_at_ms: u64,
    pub message: Message,
}

impl RemoteEnvelope {
    pub fn new(origin: AsnId, destination: &AsnId, message: Message, sent_at_ms: u64) -> Self {
        Self { id: envelope_id(&message.id, destination), origin, sent_at_ms, message }
    }
}

/// `hex(sha256(message_id || "\n" || destination))`.
pub fn envelope_id(message: &MessageId, destination: &AsnId) -> String {
    let mut h = Sha256::new();
    h.update(message.as_str());
    h.update(b"\n");
    h.update(destination.as_str());
    hex::encode(h.finalize())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AsnDescriptor {
    pub asn: AsnId,
    pub endpoint: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FollowNotice {
    pub follower: UserId,
    pub followee: UserId,
    pub following: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RemoteProfile {
    pub id: UserId,
    pub profile: Profile,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
    pub message: String,
}

pub fn canonical_json<T: Serialize>(v: &T) -> Vec<u8> {
    serde_json::to_vec(v).expect("wire types serialize")
}

type HmacSha256 = Hmac<Sha256>;

fn mac(secret: &str, path: &str, body: &[u8]) -> HmacSha256 {
    let mut m = HmacSha256::new_from_slice(secret.as_bytes()).expect("hmac accepts any key length");
    m.update(path.as_bytes());
    m.update(b"\n");
    m.update(body);
    m
}

pub fn sign(secret: &str, path: &str, body: &[u8]) -> String {
    hex::encode(mac(secret, path, body).finalize().into_bytes())
}

/// Constant-time check of a hex signature. Only the canonical lowercase form
/// is accepted, so no two signature strings verify the same request.
pub fn verify(secret: &str, path: &str, body: &[u8], signature: &str) -> bool {
    if signature.len() != 64 || !signature.bytes().all(|b| matches!(b, b'0'..=b'9' | b'a'..=b'f')) {
        return false;
    }
    let Ok(raw) = hex::decode(signature) else { return false };
    mac(secret, path, body).verify_slice(&raw).is_ok()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Get,
    Post,
}

/// A signed request as it travels between ASNs, independent of transport.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WireRequest {
    pub method: Method,
    pub path: String,
    pub origin: AsnId,
    pub signature: String,
    pub body: Vec<u8>,
}

impl WireRequest {
    pub fn signed(method: Method, path: impl Into<String>, origin: AsnId, secret: &str, body: Vec<u8>) -> Self {
        let path = path.into();
        let signature = sign(secret, &path, &body);
        Self { method, path, origin, signature, body }
    }

    pub fn verify(&self, secret: &str) -> bool {
        verify(secret, &self.path, &self.body, &self.signature)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WireResponse {
    pub status: u16,
    pub body: Vec<u8>,
}

impl WireResponse {
    pub fn ok<T: Serialize>(v: &T) -> Self {
        Self { status: 200, body: canonical_json(v) }
    }

    pub fn error(status: u16, error: &str, message: impl Into<String>) -> Self {
        Self { status, body: canonical_json(&ErrorBody { error: error.into(), message: message.into() }) }
    }

    pub fn is_success(&self) -> bool {
        (200..300).contains(&self.status)
    }

    pub fn error_body(&self) -> Option<ErrorBody> {
        serde_json::from_slice(&self.body).ok()
    }
}
