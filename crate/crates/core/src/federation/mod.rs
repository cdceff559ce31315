//! The remote interface between paired ASNs.
//!
//! Pairing is manual and symmetric: each administrator registers the other
//! side's endpoint and the shared secret, and the link turns active once both
//! sides know each other. Messages travel as one [`RemoteEnvelope`] per
//! destination ASN; the receiving ASN evaluates access for its own users.
//! Circles are replicated to the paired ASNs that need them, newest version
//! wins. The operations themselves live on [`crate::node::Node`].

pub mod pool;
pub mod transport;
pub mod wire;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::ids::{AsnId, MessageId};

pub use pool::{DeliveryPool, RetryPolicy};
pub use transport::{HttpTransport, LocalNetwork, RemoteHandler, Transport, TransportError};
pub use wire::{envelope_id, AsnDescriptor, FollowNotice, RemoteEnvelope, RemoteProfile, WireRequest, WireResponse};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LinkState {
    /// Registered here, not yet confirmed by the remote side.
    Pending,
    Active,
    Suspended,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PeeringLink {
    pub remote: AsnId,
    pub endpoint: String,
    pub secret: String,
    pub state: LinkState,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "reason", rename_all = "kebab-case")]
pub enum FailureReason {
    Unpaired,
    Unavailable { attempts: u32, last: String },
    Rejected { status: u16, message: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "kebab-case")]
pub enum DeliveryOutcome {
    Delivered { attempts: u32 },
    Retrying { attempt: u32 },
    Failed(FailureReason),
}

impl DeliveryOutcome {
    pub fn is_delivered(&self) -> bool {
        matches!(self, DeliveryOutcome::Delivered { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeliveryReport {
    pub message: MessageId,
    /// Local users whose inbox received the message in this run.
    pub local_notified: usize,
    pub destinations: BTreeMap<AsnId, DeliveryOutcome>,
}

impl DeliveryReport {
    pub fn new(message: MessageId) -> Self {
        Self { message, local_notified: 0, destinations: BTreeMap::new() }
    }

    pub fn envelopes_delivered(&self) -> usize {
        self.destinations.values().filter(|o| o.is_delivered()).count()
    }
}
