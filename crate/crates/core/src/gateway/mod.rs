//! Local-facing surface of an ASN: sessions, posting, reading, moderation and
//! administration. [`http`] exposes it under `/api/v1/`.

pub mod auth;
mod commands;
pub mod http;

use std::collections::{BTreeSet, HashMap};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use crossbeam_channel::Sender;
use parking_lot::{Condvar, Mutex};
use serde::{Deserialize, Serialize};

use crate::federation::{DeliveryReport, RemoteProfile};
use crate::ids::{CircleId, MessageId, UserId};
use crate::model::{CircleKind, Message, ModelError};
use crate::node::{now_ms, Node, NodeError};
use crate::privilege::{check_group_privilege, ActionId, GroupAction};
use crate::store::{MetaOp, PendingPost};

pub use commands::{AdminCommand, CommandCategory};

#[derive(Debug, thiserror::Error)]
pub enum GatewayError {
    #[error("missing, invalid or expired session")]
    Unauthenticated,
    /// Returned both for unknown messages and for messages the reader may
    /// not see.
    #[error("not found")]
    NotFound,
    #[error("tagging {0} is not allowed")]
    TaggingDenied(CircleId),
    #[error("invalid circle {0}")]
    InvalidCircle(CircleId),
    #[error("circle {0} appears in both the tag and the conflict set")]
    TagConflictOverlap(CircleId),
    #[error("{user} lacks privilege {action}")]
    PrivilegeDenied { user: UserId, action: String },
    #[error("message {0} is not awaiting moderation by this user")]
    NotPending(MessageId),
    #[error("invalid request: {0}")]
    Invalid(String),
    #[error(transparent)]
    Node(NodeError),
}

impl From<NodeError> for GatewayError {
    fn from(e: NodeError) -> Self {
        match e {
            NodeError::PrivilegeDenied { user, action } => {
                GatewayError::PrivilegeDenied { user, action: action.to_string() }
            }
            NodeError::Model(ModelError::PrivilegeDenied { user, action }) => {
                GatewayError::PrivilegeDenied { user, action }
            }
            NodeError::Model(ModelError::TagConflictOverlap(c)) => GatewayError::TagConflictOverlap(c),
            NodeError::Model(ModelError::NotTaggable(c)) => GatewayError::TaggingDenied(c),
            other => GatewayError::Node(other),
        }
    }
}

impl From<ModelError> for GatewayError {
    fn from(e: ModelError) -> Self {
        NodeError::Model(e).into()
    }
}

impl GatewayError {
    pub fn kind(&self) -> &'static str {
        match self {
            GatewayError::Unauthenticated => "unauthenticated",
            GatewayError::NotFound => "not-found",
            GatewayError::TaggingDenied(_) => "tagging-denied",
            GatewayError::InvalidCircle(_) => "invalid-circle",
            GatewayError::TagConflictOverlap(_) => "tag-conflict-overlap",
            GatewayError::PrivilegeDenied { .. } => "privilege-denied",
            GatewayError::NotPending(_) => "not-pending",
            GatewayError::Invalid(_) => "invalid-request",
            GatewayError::Node(e) => e.kind(),
        }
    }

    pub fn status(&self) -> u16 {
        match self {
            GatewayError::Unauthenticated => 401,
            GatewayError::NotFound | GatewayError::NotPending(_) => 404,
            GatewayError::TaggingDenied(_) | GatewayError::PrivilegeDenied { .. } => 403,
            GatewayError::InvalidCircle(_) | GatewayError::TagConflictOverlap(_) | GatewayError::Invalid(_) => 400,
            GatewayError::Node(e) => e.status(),
        }
    }
}

pub type Result<T, E = GatewayError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionToken {
    pub user: UserId,
    pub token: String,
    pub expires_at_ms: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PostStatus {
    Published,
    /// Waiting for a boss of a moderated group.
    Pending,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PostReceipt {
    pub id: MessageId,
    pub status: PostStatus,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InboxItem {
    pub seq: u64,
    pub read: bool,
    pub message: Message,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModerationResult {
    Published,
    StillPending,
    Rejected,
}

#[derive(Debug, Clone)]
pub struct GatewayConfig {
    pub token_ttl: Duration,
    /// Threads running message propagation in the background.
    pub propagators: usize,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        Self { token_ttl: Duration::from_secs(3600), propagators: 2 }
    }
}

/// Background propagation with a way to wait for quiescence.
struct Propagator {
    tx: Option<Sender<MessageId>>,
    inflight: Arc<(Mutex<usize>, Condvar)>,
    workers: Vec<JoinHandle<()>>,
}

impl Propagator {
    fn new(node: Arc<Node>, threads: usize) -> Self {
        let (tx, rx) = crossbeam_channel::unbounded::<MessageId>();
        let inflight = Arc::new((Mutex::new(0usize), Condvar::new()));
        let workers = (0..threads.max(1))
            .map(|i| {
                let rx = rx.clone();
                let node = node.clone();
                let inflight = inflight.clone();
                std::thread::Builder::new()
                    .name(format!("propagate-{i}"))
                    .spawn(move || {
                        for mid in rx {
                            if let Err(e) = node.propagate_post(&mid) {
                                tracing::error!(message = %mid, error = %e, "propagation failed");
                            }
                            let (n, cv) = &*inflight;
                            let mut n = n.lock();
                            *n -= 1;
                            if *n == 0 {
                                cv.notify_all();
                            }
                        }
                    })
                    .expect("spawn propagator")
            })
            .collect();
        Self { tx: Some(tx), inflight, workers }
    }

    fn submit(&self, mid: MessageId) {
        *self.inflight.0.lock() += 1;
        self.tx.as_ref().expect("running").send(mid).expect("propagators alive");
    }

    fn flush(&self) {
        let (n, cv) = &*self.inflight;
        let mut n = n.lock();
        while *n > 0 {
            cv.wait(&mut n);
        }
    }
}

impl Drop for Propagator {
    fn drop(&mut self) {
        self.tx.take();
        for w in self.workers.drain(..) {
            let _ = w.join();
        }
    }
}

struct Session {
    user: UserId,
    expires_at_ms: u64,
}

pub struct Gateway {
    node: Arc<Node>,
    cfg: GatewayConfig,
    sessions: Mutex<HashMap<String, Session>>,
    propagator: Propagator,
}

impl Gateway {
    pub fn new(node: Arc<Node>, cfg: GatewayConfig) -> Arc<Self> {
        let propagator = Propagator::new(node.clone(), cfg.propagators);
        Arc::new(Self { node, cfg, sessions: Mutex::new(HashMap::new()), propagator })
    }

    pub fn node(&self) -> &Arc<Node> {
        &self.node
    }

    /// Waits until every accepted post has been propagated.
    pub fn flush(&self) {
        self.propagator.flush();
    }

    pub fn login(&self, user: &UserId, password: &str) -> Result<SessionToken> {
        let ok = self.node.read().state().credentials.get(user).is_some_and(|c| auth::verify_password(c, password));
        if !ok {
            return Err(GatewayError::Unauthenticated);
        }
        let token = auth::new_token();
        let expires_at_ms = now_ms() + self.cfg.token_ttl.as_millis() as u64;
        self.sessions.lock().insert(token.clone(), Session { user: user.clone(), expires_at_ms });
        Ok(SessionToken { user: user.clone(), token, expires_at_ms })
    }

    pub fn authenticate(&self, token: &str) -> Result<UserId> {
        let mut sessions = self.sessions.lock();
        match sessions.get(token) {
            Some(s) if s.expires_at_ms > now_ms() => Ok(s.user.clone()),
            Some(_) => {
                sessions.remove(token);
                Err(GatewayError::Unauthenticated)
            }
            None => Err(GatewayError::Unauthenticated),
        }
    }

    /// Validates and accepts a post. Propagation runs in the background;
    /// posts tagging a moderated group wait for its bosses instead.
    pub fn handle_post(
        &self,
        token: &str,
        content: &str,
        tags: BTreeSet<CircleId>,
        conflicts: BTreeSet<CircleId>,
    ) -> Result<PostReceipt> {
        let author = self.authenticate(token)?;
        self.node.require(&author, None, &ActionId::POST_MESSAGE)?;
        if let Some(c) = tags.intersection(&conflicts).next() {
            return Err(GatewayError::TagConflictOverlap(c.clone()));
        }
        let mut awaiting = BTreeSet::new();
        let message = {
            let st = self.node.read();
            let mesh = st.mesh();
            for (c, is_tag) in tags.iter().map(|c| (c, true)).chain(conflicts.iter().map(|c| (c, false))) {
                let circle = mesh.circle(c).ok_or_else(|| GatewayError::InvalidCircle(c.clone()))?;
                let may_reference = match &circle.kind {
                    CircleKind::PrivateGroup(p) => p.owner == author,
                    _ => circle.is_member(&author),
                };
                if !may_reference {
                    return Err(GatewayError::TaggingDenied(c.clone()));
                }
                if !is_tag {
                    continue;
                }
                if let Some(gp) = circle.group_privileges() {
                    if !check_group_privilege(mesh, c, &author, GroupAction::Tag).map_err(NodeError::from)? {
                        return Err(GatewayError::TaggingDenied(c.clone()));
                    }
                    if gp.moderated && !circle.is_boss(&author) {
                        if circle.host() != *self.node.asn() {
                            return Err(GatewayError::TaggingDenied(c.clone()));
                        }
                        awaiting.insert(c.clone());
                    }
                }
            }
            mesh.create_message(self.node.next_message_id(), &author, content, tags, conflicts)?
        };
        let id = message.id.clone();
        if awaiting.is_empty() {
            self.node.store_message(message)?;
            self.propagator.submit(id.clone());
            Ok(PostReceipt { id, status: PostStatus::Published })
        } else {
            self.node.commit(vec![MetaOp::Pending { post: PendingPost { message, awaiting } }])?;
            Ok(PostReceipt { id, status: PostStatus::Pending })
        }
    }

    /// The message if the reader may see it; [`GatewayError::NotFound`] both
    /// when it is denied and when it does not exist.
    pub fn handle_fetch(&self, token: &str, mid: &MessageId) -> Result<Message> {
        let reader = self.authenticate(token)?;
        match self.node.check_access(mid, &reader) {
            Some((m, d)) if d.is_allow() => Ok(m),
            _ => Err(GatewayError::NotFound),
        }
    }

    pub fn inbox(&self, token: &str) -> Result<Vec<InboxItem>> {
        let user = self.authenticate(token)?;
        let st = self.node.read();
        Ok(st
            .inbox(&user)
            .iter()
            .filter_map(|e| st.message(&e.message).map(|m| InboxItem { seq: e.seq, read: e.read, message: m.clone() }))
            .collect())
    }

    pub fn mark_read(&self, token: &str, seq: u64) -> Result<()> {
        let user = self.authenticate(token)?;
        let found = self.node.write_store(|s| s.mark_read(&user, seq))?;
        if found {
            Ok(())
        } else {
            Err(GatewayError::NotFound)
        }
    }

    pub fn follow(&self, token: &str, target: &UserId, following: bool) -> Result<()> {
        let user = self.authenticate(token)?;
        self.node.require(&user, None, &ActionId::FOLLOW_USER)?;
        Ok(self.node.follow(&user, target, following)?)
    }

    /// Profile of `target`, or of the caller when `None`.
    pub fn profile(&self, token: &str, target: Option<&UserId>) -> Result<RemoteProfile> {
        let user = self.authenticate(token)?;
        let id = target.cloned().unwrap_or(user);
        let profile = self.node.fetch_remote_profile(&id)?;
        Ok(RemoteProfile { id, profile })
    }

    /// Pending posts the caller may moderate.
    pub fn pending(&self, token: &str) -> Result<Vec<PendingPost>> {
        let user = self.authenticate(token)?;
        let st = self.node.read();
        Ok(st
            .state()
            .pending
            .values()
            .filter(|p| p.awaiting.iter().any(|c| st.mesh().circle(c).is_some_and(|c| c.is_boss(&user))))
            .cloned()
            .collect())
    }

    /// Approval clears the groups the caller is a boss of; the post is
    /// published once no group is left. Rejection by any boss drops it.
    pub fn moderate(&self, token: &str, mid: &MessageId, approve: bool) -> Result<ModerationResult> {
        let user = self.authenticate(token)?;
        let mut post =
            self.node.read().state().pending.get(mid).cloned().ok_or(GatewayError::NotPending(mid.clone()))?;
        let mine: BTreeSet<CircleId> = {
            let st = self.node.read();
            post.awaiting
                .iter()
                .filter(|c| {
                    st.mesh().circle(c).is_some_and(|c| {
                        c.is_boss(&user)
                            && check_group_privilege(st.mesh(), &c.id, &user, GroupAction::Moderate).unwrap_or(false)
                    })
                })
                .cloned()
                .collect()
        };
        if mine.is_empty() {
            return Err(GatewayError::NotPending(mid.clone()));
        }
        if !approve {
            self.node.commit(vec![MetaOp::PendingResolved { id: mid.clone() }])?;
            return Ok(ModerationResult::Rejected);
        }
        post.awaiting.retain(|c| !mine.contains(c));
        if !post.awaiting.is_empty() {
            self.node.commit(vec![MetaOp::Pending { post }])?;
            return Ok(ModerationResult::StillPending);
        }
        self.node.store_message(post.message)?;
        self.node.commit(vec![MetaOp::PendingResolved { id: mid.clone() }])?;
        self.propagator.submit(mid.clone());
        Ok(ModerationResult::Published)
    }

    pub fn delivery_report(&self, token: &str, mid: &MessageId) -> Result<DeliveryReport> {
        let user = self.authenticate(token)?;
        match self.node.delivery_report(mid) {
            Some(r) if self.node.read().message(mid).is_some_and(|m| m.author == user) => Ok(r),
            _ => Err(GatewayError::NotFound),
        }
    }

    pub fn handle_admin(&self, token: &str, cmd: AdminCommand) -> Result<serde_json::Value> {
        let user = self.authenticate(token)?;
        self.run_command(&user, cmd)
    }
}
