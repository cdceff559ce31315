//! One running ASN instance: its store, its FIPM mode and its side of the
//! remote interface.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use parking_lot::{Mutex, RwLock, RwLockReadGuard, RwLockWriteGuard};
use serde::{Deserialize, Serialize};

use crate::federation::pool::{send_with_retry, SendError};
use crate::federation::wire::{self, Method};
use crate::federation::{
    AsnDescriptor, DeliveryOutcome, DeliveryPool, DeliveryReport, FailureReason, FollowNotice, LinkState, PeeringLink,
    RemoteEnvelope, RemoteHandler, RemoteProfile, RetryPolicy, Transport, WireRequest, WireResponse,
};
use crate::fipm::{check_access, compute_audience, AccessDecision, EvalMode};
use crate::ids::{AsnId, CircleId, MessageId, UserId};
use crate::model::{Change, Mesh, MeshEvent, Message, ModelError, Profile};
use crate::privilege::{check_privilege, ActionId, Effect, PrivilegeError};
use crate::store::{Credential, MetaOp, ReplicaOutcome, ReplicaRecord, Store, StoreError, StoreOptions};

#[derive(Debug, thiserror::Error)]
pub enum NodeError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Privilege(#[from] PrivilegeError),
    #[error("{user} lacks privilege {action}")]
    PrivilegeDenied { user: UserId, action: ActionId },
    #[error("asn {0} is already paired")]
    DuplicateLink(AsnId),
    #[error("pairing handshake failed: {0}")]
    HandshakeFailed(String),
    #[error("asn {0} is not paired")]
    UnpairedOrigin(AsnId),
    #[error("request signature rejected")]
    AuthFailed,
    #[error("remote unavailable after {attempts} attempts: {last}")]
    RemoteUnavailable { attempts: u32, last: String },
    #[error("remote rejected the request ({status}): {message}")]
    RemoteRejected { status: u16, message: String },
    #[error("unknown user {0}")]
    UnknownUser(UserId),
    #[error("unknown message {0}")]
    UnknownMessage(MessageId),
    #[error("author {0} is not local")]
    AuthorNotLocal(UserId),
    #[error("circle {0} is hosted by another asn")]
    NotHostedHere(CircleId),
    #[error("bad request: {0}")]
    BadRequest(String),
}

pub type Result<T, E = NodeError> = std::result::Result<T, E>;

impl NodeError {
    /// Machine-readable kind used in HTTP error bodies.
    pub fn kind(&self) -> &'static str {
        match self {
            NodeError::Model(_) => "invalid-operation",
            NodeError::Store(StoreError::DuplicateIdDifferentContent(_)) => "duplicate-id-different-content",
            NodeError::Store(StoreError::UnpairedOrigin(_)) | NodeError::UnpairedOrigin(_) => "unpaired-origin",
            NodeError::Store(StoreError::NotAuthoritative { .. }) => "not-authoritative",
            NodeError::Store(_) => "storage",
            NodeError::Privilege(_) => "invalid-operation",
            NodeError::PrivilegeDenied { .. } => "privilege-denied",
            NodeError::DuplicateLink(_) => "duplicate-link",
            NodeError::HandshakeFailed(_) => "handshake-failed",
            NodeError::AuthFailed => "auth-failed",
            NodeError::RemoteUnavailable { .. } => "remote-unavailable",
            NodeError::RemoteRejected { .. } => "remote-rejected",
            NodeError::UnknownUser(_) => "unknown-user",
            NodeError::UnknownMessage(_) => "unknown-message",
            NodeError::AuthorNotLocal(_) => "author-not-local",
            NodeError::NotHostedHere(_) => "not-hosted-here",
            NodeError::BadRequest(_) => "bad-request",
        }
    }

    pub fn status(&self) -> u16 {
        match self {
            NodeError::PrivilegeDenied { .. } | NodeError::UnpairedOrigin(_) => 403,
            NodeError::Store(StoreError::UnpairedOrigin(_)) | NodeError::Store(StoreError::NotAuthoritative { .. }) => {
                403
            }
            NodeError::AuthFailed => 401,
            NodeError::UnknownUser(_) | NodeError::UnknownMessage(_) => 404,
            NodeError::DuplicateLink(_) | NodeError::Store(StoreError::DuplicateIdDifferentContent(_)) => 409,
            NodeError::Store(_) => 500,
            NodeError::HandshakeFailed(_) | NodeError::RemoteUnavailable { .. } | NodeError::RemoteRejected { .. } => {
                502
            }
            _ => 400,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeConfig {
    pub asn: AsnId,
    /// Address other ASNs use to reach this one.
    pub endpoint: String,
    pub mode: EvalMode,
    pub pool_width: usize,
    pub retry: RetryPolicy,
    /// How long a fetched remote profile is served from cache.
    pub profile_ttl: Duration,
    pub fsync: bool,
    pub snapshot_every: u64,
}

impl NodeConfig {
    pub fn new(asn: AsnId, endpoint: impl Into<String>) -> Self {
        Self {
            asn,
            endpoint: endpoint.into(),
            mode: EvalMode::default(),
            pool_width: 4,
            retry: RetryPolicy::default(),
            profile_ttl: Duration::from_secs(60),
            fsync: true,
            snapshot_every: 10_000,
        }
    }
}

/// Actions granted to every user of a new ASN through its main subdomain.
pub const DEFAULT_MAIN_GRANTS: [ActionId; 3] =
    [ActionId::POST_MESSAGE, ActionId::FOLLOW_USER, ActionId::CREATE_PRIVATE_GROUP];

pub struct Node {
    cfg: NodeConfig,
    store: RwLock<Store>,
    transport: Arc<dyn Transport>,
    pool: DeliveryPool,
    profiles: Mutex<HashMap<UserId, (Profile, Instant)>>,
    reports: Arc<Mutex<BTreeMap<MessageId, DeliveryReport>>>,
    next_local: AtomicU64,
}

pub fn now_ms() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_millis() as u64)
}

/// Tag and conflict circles, their ancestors and the circles their policies
/// mention: what a receiving ASN needs to evaluate access the way we do.
pub fn replication_closure<'a>(mesh: &Mesh, roots: impl IntoIterator<Item = &'a CircleId>) -> BTreeSet<CircleId> {
    let mut out = BTreeSet::new();
    for root in roots {
        let Ok(chain) = mesh.ancestor_chain(root) else { continue };
        for c in chain {
            if let Some(circle) = mesh.circle(&c) {
                out.extend(circle.policies.referenced_circles().filter(|r| mesh.circle(r).is_some()).cloned());
            }
            out.insert(c);
        }
    }
    out
}

fn message_seq(asn: &AsnId, id: &MessageId) -> Option<u64> {
    if id.asn() != *asn {
        return None;
    }
    id.local().strip_prefix('m')?.parse().ok()
}

struct DestinationJob {
    dest: AsnId,
    endpoint: String,
    records: Vec<(CircleId, u64, WireRequest)>,
    /// Decides the outcome; `None` means nothing was left to send.
    final_request: Option<WireRequest>,
    /// Replica acknowledged by a successful final request.
    final_ack: Option<(CircleId, u64)>,
}

struct JobResult {
    dest: AsnId,
    acked: Vec<(CircleId, u64)>,
    outcome: DeliveryOutcome,
}

impl Node {
    pub fn open(cfg: NodeConfig, dir: impl AsRef<Path>, transport: Arc<dyn Transport>) -> Result<Arc<Self>> {
        let opts = StoreOptions { asn: cfg.asn.clone(), fsync: cfg.fsync, snapshot_every: cfg.snapshot_every };
        let store = Store::open(dir, opts)?;
        let mut max = store.messages().filter_map(|m| message_seq(&cfg.asn, &m.id)).max().unwrap_or(0);
        max = max.max(store.state().pending.keys().filter_map(|id| message_seq(&cfg.asn, id)).max().unwrap_or(0));
        let pool = DeliveryPool::new(cfg.pool_width);
        Ok(Arc::new(Self {
            cfg,
            store: RwLock::new(store),
            transport,
            pool,
            profiles: Mutex::new(HashMap::new()),
            reports: Arc::new(Mutex::new(BTreeMap::new())),
            next_local: AtomicU64::new(max + 1),
        }))
    }

    pub fn asn(&self) -> &AsnId {
        &self.cfg.asn
    }

    pub fn config(&self) -> &NodeConfig {
        &self.cfg
    }

    pub fn mode(&self) -> EvalMode {
        self.cfg.mode
    }

    /// Consistent read view of the whole store.
    pub fn read(&self) -> RwLockReadGuard<'_, Store> {
        self.store.read()
    }

    fn write(&self) -> RwLockWriteGuard<'_, Store> {
        self.store.write()
    }

    /// Creates the ASN, its administrator and main subdomain on first start.
    pub fn bootstrap(&self, admin_local: &str, admin_credential: Credential, main_subdomain: &str) -> Result<()> {
        if self.read().mesh().asn(self.asn()).is_some() {
            return Ok(());
        }
        let asn = self.asn().clone();
        let admin = self.mutate(|m| m.create_asn(&asn, admin_local, Profile::default()))?.admin;
        let main = self.mutate(|m| m.create_subdomain(&asn, main_subdomain, None, &admin))?.id;
        for a in DEFAULT_MAIN_GRANTS {
            self.mutate(|m| m.set_subdomain_privilege(&main, &a, Some(Effect::Grant)))?;
        }
        self.commit(vec![MetaOp::Credential { user: admin, credential: admin_credential }])
    }

    pub fn main_subdomain(&self) -> Option<CircleId> {
        self.read().mesh().asn(self.asn()).and_then(|a| a.main_subdomain.clone())
    }

    pub fn commit(&self, ops: Vec<MetaOp>) -> Result<()> {
        Ok(self.write().commit(ops)?)
    }

    /// Validates and commits a mesh operation against the current state, then
    /// pushes every changed circle we host to the ASNs that replicate it.
    pub fn mutate<T>(&self, op: impl FnOnce(&Mesh) -> crate::model::Result<Change<T>>) -> Result<T> {
        let (value, changed) = {
            let mut st = self.write();
            let change = op(st.mesh())?;
            let changed: Vec<CircleId> = change
                .events
                .iter()
                .filter_map(|e| match e {
                    MeshEvent::Circle(c) if c.host() == self.cfg.asn => Some(c.id.clone()),
                    _ => None,
                })
                .collect();
            (st.commit_change(change)?, changed)
        };
        for c in changed {
            let outcomes = self.push_circle_update(&c)?;
            for (asn, o) in outcomes {
                if !o.is_delivered() {
                    tracing::warn!(circle = %c, %asn, outcome = ?o, "circle update not delivered");
                }
            }
        }
        Ok(value)
    }

    /// Checks `action` for `user` in subdomain `sd` (the main subdomain when `None`).
    pub fn require(&self, user: &UserId, sd: Option<&CircleId>, action: &ActionId) -> Result<()> {
        let main;
        let sd = match sd {
            Some(s) => s,
            None => {
                main = self.main_subdomain().ok_or_else(|| NodeError::BadRequest("asn not bootstrapped".into()))?;
                &main
            }
        };
        if check_privilege(self.read().mesh(), user, sd, action)? {
            Ok(())
        } else {
            Err(NodeError::PrivilegeDenied { user: user.clone(), action: action.clone() })
        }
    }

    pub fn next_message_id(&self) -> MessageId {
        let n = self.next_local.fetch_add(1, Ordering::SeqCst);
        MessageId::scoped(self.asn(), &format!("m{n}")).expect("generated ids are valid")
    }

    /// Runs a raw store operation under the write lock.
    pub fn write_store<R>(&self, f: impl FnOnce(&mut Store) -> Result<R, StoreError>) -> Result<R> {
        Ok(f(&mut self.write())?)
    }

    pub fn store_message(&self, m: Message) -> Result<()> {
        self.write().put_message(m)?;
        Ok(())
    }

    pub fn check_access(&self, mid: &MessageId, reader: &UserId) -> Option<(Message, AccessDecision)> {
        let st = self.read();
        let m = st.message(mid)?;
        let d = check_access(st.mesh(), m, reader, self.cfg.mode);
        Some((m.clone(), d))
    }

    pub fn delivery_report(&self, mid: &MessageId) -> Option<DeliveryReport> {
        self.reports.lock().get(mid).cloned()
    }

    fn link(&self, asn: &AsnId) -> Option<PeeringLink> {
        self.read().state().peers.get(asn).cloned()
    }

    fn active_link(&self, asn: &AsnId) -> Result<PeeringLink> {
        match self.link(asn) {
            Some(l) if l.state == LinkState::Active => Ok(l),
            _ => Err(NodeError::UnpairedOrigin(asn.clone())),
        }
    }

    fn signed(&self, link: &PeeringLink, method: Method, path: impl Into<String>, body: Vec<u8>) -> WireRequest {
        WireRequest::signed(method, path, self.asn().clone(), &link.secret, body)
    }

    // ---- pairing --------------------------------------------------------

    /// Registers a link to `remote` and runs the handshake. The link is
    /// active once the remote side has registered us too; until then it
    /// stays pending and the remote's own handshake completes it.
    pub fn pair_asn(&self, caller: &UserId, remote: &AsnId, endpoint: &str, secret: &str) -> Result<LinkState> {
        self.require(caller, None, &ActionId::PAIR_ASN)?;
        if remote == self.asn() {
            return Err(NodeError::BadRequest("cannot pair with self".into()));
        }
        if self.link(remote).is_some_and(|l| l.state == LinkState::Active) {
            return Err(NodeError::DuplicateLink(remote.clone()));
        }
        let mut link = PeeringLink {
            remote: remote.clone(),
            endpoint: endpoint.to_string(),
            secret: secret.to_string(),
            state: LinkState::Pending,
        };
        self.commit(vec![MetaOp::Link { link: link.clone() }])?;

        let me = AsnDescriptor { asn: self.asn().clone(), endpoint: self.cfg.endpoint.clone() };
        let req = self.signed(&link, Method::Post, wire::PAIR, wire::canonical_json(&me));
        match send_with_retry(self.transport.as_ref(), endpoint, &req, &self.cfg.retry, |_| {}) {
            Ok((resp, _)) => {
                let theirs: AsnDescriptor = serde_json::from_slice(&resp.body)
                    .map_err(|e| NodeError::HandshakeFailed(format!("bad descriptor: {e}")))?;
                if &theirs.asn != remote {
                    return Err(NodeError::HandshakeFailed(format!("endpoint answered as {}", theirs.asn)));
                }
                link.state = LinkState::Active;
                self.commit(vec![MetaOp::Link { link }])?;
                Ok(LinkState::Active)
            }
            Err(SendError::Rejected { response, .. }) if response.status == 409 => Ok(LinkState::Pending),
            Err(SendError::Rejected { response, .. }) => {
                let msg = response.error_body().map_or_else(|| format!("status {}", response.status), |b| b.message);
                Err(NodeError::HandshakeFailed(msg))
            }
            Err(SendError::Unavailable { last, .. }) => Err(NodeError::HandshakeFailed(last)),
        }
    }

    /// Suspends or reactivates an existing link.
    pub fn set_link_state(&self, caller: &UserId, remote: &AsnId, state: LinkState) -> Result<()> {
        self.require(caller, None, &ActionId::PAIR_ASN)?;
        let mut link = self.link(remote).ok_or_else(|| NodeError::UnpairedOrigin(remote.clone()))?;
        link.state = state;
        self.commit(vec![MetaOp::Link { link }])
    }

    fn handle_pair(&self, req: &WireRequest) -> Result<AsnDescriptor> {
        let Some(mut link) = self.link(&req.origin) else {
            return Err(NodeError::BadRequest("not-ready".into()));
        };
        if !req.verify(&link.secret) {
            return Err(NodeError::AuthFailed);
        }
        let theirs: AsnDescriptor =
            serde_json::from_slice(&req.body).map_err(|e| NodeError::BadRequest(e.to_string()))?;
        if theirs.asn != req.origin {
            return Err(NodeError::BadRequest("descriptor does not match origin".into()));
        }
        match link.state {
            LinkState::Suspended => return Err(NodeError::UnpairedOrigin(req.origin.clone())),
            LinkState::Pending => {
                link.state = LinkState::Active;
                self.commit(vec![MetaOp::Link { link }])?;
            }
            LinkState::Active => {}
        }
        Ok(AsnDescriptor { asn: self.asn().clone(), endpoint: self.cfg.endpoint.clone() })
    }

    // ---- message propagation --------------------------------------------

    fn records_for(
        &self,
        st: &Store,
        dest: &AsnId,
        circles: &BTreeSet<CircleId>,
        link: &PeeringLink,
    ) -> Vec<(CircleId, u64, WireRequest)> {
        let mut out = Vec::new();
        for id in circles {
            let Some(c) = st.mesh().circle(id) else { continue };
            if &c.host() == dest {
                continue;
            }
            let acked = st.state().replicated_to.get(id).and_then(|m| m.get(dest)).copied().unwrap_or(0);
            if acked >= c.version {
                continue;
            }
            let rec = ReplicaRecord { origin: c.host(), version: c.version, circle: c.clone() };
            out.push((
                id.clone(),
                c.version,
                self.signed(link, Method::Post, wire::CIRCLES, wire::canonical_json(&rec)),
            ));
        }
        out
    }

    /// Runs one job per destination on the pool and waits for all of them.
    fn run_jobs(&self, mid: Option<&MessageId>, jobs: Vec<DestinationJob>) -> Vec<JobResult> {
        let (tx, rx) = crossbeam_channel::unbounded();
        let n = jobs.len();
        for job in jobs {
            let tx = tx.clone();
            let transport = self.transport.clone();
            let retry = self.cfg.retry;
            let reports = self.reports.clone();
            let mid = mid.cloned();
            self.pool.submit(move || {
                let mut acked = Vec::new();
                for (circle, version, req) in &job.records {
                    match send_with_retry(transport.as_ref(), &job.endpoint, req, &retry, |_| {}) {
                        Ok(_) => acked.push((circle.clone(), *version)),
                        Err(e) => tracing::debug!(dest = %job.dest, %circle, ?e, "replica push failed"),
                    }
                }
                let outcome = match &job.final_request {
                    None => DeliveryOutcome::Delivered { attempts: 0 },
                    Some(req) => {
                        let on_retry = |attempt| {
                            if let Some(mid) = &mid {
                                if let Some(r) = reports.lock().get_mut(mid) {
                                    r.destinations.insert(job.dest.clone(), DeliveryOutcome::Retrying { attempt });
                                }
                            }
                        };
                        match send_with_retry(transport.as_ref(), &job.endpoint, req, &retry, on_retry) {
                            Ok((_, attempts)) => {
                                acked.extend(job.final_ack.clone());
                                DeliveryOutcome::Delivered { attempts }
                            }
                            Err(SendError::Unavailable { attempts, last }) => {
                                DeliveryOutcome::Failed(FailureReason::Unavailable { attempts, last })
                            }
                            Err(SendError::Rejected { response, .. }) => {
                                let message = response.error_body().map_or_else(String::new, |b| b.message);
                                DeliveryOutcome::Failed(FailureReason::Rejected { status: response.status, message })
                            }
                        }
                    }
                };
                let _ = tx.send(JobResult { dest: job.dest, acked, outcome });
            });
        }
        drop(tx);
        let results: Vec<JobResult> = rx.iter().take(n).collect();
        let ops: Vec<MetaOp> = results
            .iter()
            .flat_map(|r| {
                r.acked.iter().map(|(circle, version)| MetaOp::ReplicatedTo {
                    circle: circle.clone(),
                    asn: r.dest.clone(),
                    version: *version,
                })
            })
            .collect();
        if let Err(e) = self.commit(ops) {
            tracing::error!(error = %e, "failed to record replication state");
        }
        results
    }

    /// Local users following `author`.
    fn local_followers(&self, st: &Store, author: &UserId) -> BTreeSet<UserId> {
        let mesh = st.mesh();
        if author.asn() == *self.asn() {
            mesh.user(author)
                .map(|u| u.followers.iter().filter(|f| f.asn() == *self.asn()).cloned().collect())
                .unwrap_or_default()
        } else {
            mesh.asn(self.asn())
                .map(|a| {
                    a.users
                        .iter()
                        .filter(|u| mesh.user(u).is_some_and(|x| x.following.contains(author)))
                        .cloned()
                        .collect()
                })
                .unwrap_or_default()
        }
    }

    fn deliver_locally(&self, m: &Message) -> Result<usize> {
        let audience = {
            let st = self.read();
            let followers = self.local_followers(&st, &m.author);
            compute_audience(st.mesh(), m, &followers, self.cfg.mode)
        };
        let mut st = self.write();
        let mut fresh = 0;
        for u in &audience {
            if !st.inbox_contains(u, &m.id) {
                st.append_inbox(u, &m.id)?;
                fresh += 1;
            }
        }
        Ok(fresh)
    }

    /// Delivers a stored local message: local followers through FIPM, one
    /// envelope per remote ASN that has followers of the author.
    pub fn propagate_post(&self, mid: &MessageId) -> Result<DeliveryReport> {
        let m = self.read().message(mid).cloned().ok_or_else(|| NodeError::UnknownMessage(mid.clone()))?;
        if m.author.asn() != *self.asn() {
            return Err(NodeError::AuthorNotLocal(m.author.clone()));
        }
        let mut report = DeliveryReport::new(mid.clone());
        report.local_notified = self.deliver_locally(&m)?;

        let jobs = {
            let st = self.read();
            let followers = st.mesh().user(&m.author).map(|u| u.followers.clone()).unwrap_or_default();
            let remote: BTreeSet<AsnId> = followers.iter().map(UserId::asn).filter(|a| a != self.asn()).collect();
            let closure = replication_closure(st.mesh(), m.tags.iter().chain(&m.conflicts));
            let mut jobs = Vec::new();
            for dest in remote {
                let link = match st.state().peers.get(&dest) {
                    Some(l) if l.state == LinkState::Active => l.clone(),
                    _ => {
                        report.destinations.insert(dest, DeliveryOutcome::Failed(FailureReason::Unpaired));
                        continue;
                    }
                };
                let env = RemoteEnvelope::new(self.asn().clone(), &dest, m.clone(), now_ms());
                let records = self.records_for(&st, &dest, &closure, &link);
                let req = self.signed(&link, Method::Post, wire::MESSAGES, wire::canonical_json(&env));
                report.destinations.insert(dest.clone(), DeliveryOutcome::Retrying { attempt: 1 });
                jobs.push(DestinationJob {
                    dest,
                    endpoint: link.endpoint,
                    records,
                    final_request: Some(req),
                    final_ack: None,
                });
            }
            jobs
        };
        self.reports.lock().insert(mid.clone(), report.clone());
        for r in self.run_jobs(Some(mid), jobs) {
            report.destinations.insert(r.dest, r.outcome);
        }
        self.reports.lock().insert(mid.clone(), report.clone());
        Ok(report)
    }

    /// Processes an envelope from `sender`. Idempotent by envelope id.
    pub fn receive_remote_post(&self, sender: &AsnId, env: RemoteEnvelope) -> Result<DeliveryReport> {
        if &env.origin != sender || env.message.author.asn() != env.origin || env.message.id.asn() != env.origin {
            return Err(NodeError::BadRequest("envelope origin does not match sender".into()));
        }
        if env.id != wire::envelope_id(&env.message.id, self.asn()) {
            return Err(NodeError::BadRequest("envelope id does not match destination".into()));
        }
        self.active_link(sender)?;
        let mut report = DeliveryReport::new(env.message.id.clone());
        if self.read().state().processed_envelopes.contains(&env.id) {
            return Ok(report);
        }
        self.store_message(env.message.clone())?;
        report.local_notified = self.deliver_locally(&env.message)?;
        self.commit(vec![MetaOp::Envelope { id: env.id }])?;
        Ok(report)
    }

    // ---- circle replication ---------------------------------------------

    /// Sends the new version of a hosted circle (with its ancestors and the
    /// circles its policies mention) to every paired ASN holding members of
    /// it or already holding a copy.
    pub fn push_circle_update(&self, c: &CircleId) -> Result<BTreeMap<AsnId, DeliveryOutcome>> {
        let mut outcomes = BTreeMap::new();
        let jobs = {
            let st = self.read();
            let circle = st.mesh().circle(c).ok_or_else(|| ModelError::UnknownCircle(c.clone()))?;
            if circle.host() != *self.asn() {
                return Err(NodeError::NotHostedHere(c.clone()));
            }
            let mut dests: BTreeSet<AsnId> = circle.members.iter().map(UserId::asn).collect();
            if let Some(m) = st.state().replicated_to.get(c) {
                dests.extend(m.keys().cloned());
            }
            dests.remove(self.asn());
            let closure = replication_closure(st.mesh(), [c]);
            let mut jobs = Vec::new();
            for dest in dests {
                let link = match st.state().peers.get(&dest) {
                    Some(l) if l.state == LinkState::Active => l.clone(),
                    _ => {
                        outcomes.insert(dest, DeliveryOutcome::Failed(FailureReason::Unpaired));
                        continue;
                    }
                };
                let mut records = self.records_for(&st, &dest, &closure, &link);
                // the changed circle goes last and decides the outcome
                let last = records.iter().position(|(id, _, _)| id == c).map(|i| records.remove(i));
                let (final_request, final_ack) = match last {
                    Some((id, v, req)) => (Some(req), Some((id, v))),
                    None => (None, None),
                };
                jobs.push(DestinationJob { dest, endpoint: link.endpoint, records, final_request, final_ack });
            }
            jobs
        };
        for r in self.run_jobs(None, jobs) {
            outcomes.insert(r.dest, r.outcome);
        }
        Ok(outcomes)
    }

    // ---- follows and profiles ---------------------------------------------

    /// Records a follow. A remote followee's ASN is notified first and the
    /// profile fetched, so the origin knows where to send future posts.
    pub fn follow(&self, follower: &UserId, followee: &UserId, following: bool) -> Result<()> {
        if follower.asn() != *self.asn() || self.read().mesh().user(follower).is_none() {
            return Err(NodeError::UnknownUser(follower.clone()));
        }
        if followee.asn() == *self.asn() {
            if self.read().mesh().user(followee).is_none() {
                return Err(NodeError::UnknownUser(followee.clone()));
            }
        } else {
            let link = self.active_link(&followee.asn())?;
            let notice = FollowNotice { follower: follower.clone(), followee: followee.clone(), following };
            let req = self.signed(&link, Method::Post, wire::FOLLOWS, wire::canonical_json(&notice));
            self.send_checked(&link, &req)?;
        }
        if following {
            self.mutate(|m| m.follow(follower, followee))?;
            if followee.asn() != *self.asn() {
                self.fetch_remote_profile(followee)?;
            }
        } else {
            self.mutate(|m| m.unfollow(follower, followee))?;
        }
        Ok(())
    }

    fn send_checked(&self, link: &PeeringLink, req: &WireRequest) -> Result<WireResponse> {
        match send_with_retry(self.transport.as_ref(), &link.endpoint, req, &self.cfg.retry, |_| {}) {
            Ok((resp, _)) => Ok(resp),
            Err(SendError::Unavailable { attempts, last }) => Err(NodeError::RemoteUnavailable { attempts, last }),
            Err(SendError::Rejected { response, .. }) => {
                let body = response.error_body();
                match body.as_ref().map(|b| b.error.as_str()) {
                    Some("unknown-user") => Err(NodeError::UnknownUser(
                        body.and_then(|b| b.message.parse().ok()).unwrap_or_else(|| link_user(link)),
                    )),
                    Some("unpaired-origin") => Err(NodeError::UnpairedOrigin(link.remote.clone())),
                    _ => Err(NodeError::RemoteRejected {
                        status: response.status,
                        message: body.map(|b| b.message).unwrap_or_default(),
                    }),
                }
            }
        }
    }

    /// Profile of any user; remote ones come from their ASN and are cached
    /// for the configured staleness window.
    pub fn fetch_remote_profile(&self, user: &UserId) -> Result<Profile> {
        if user.asn() == *self.asn() {
            return self
                .read()
                .mesh()
                .user(user)
                .map(|u| u.profile.clone())
                .ok_or_else(|| NodeError::UnknownUser(user.clone()));
        }
        let link = self.active_link(&user.asn())?;
        if let Some((p, at)) = self.profiles.lock().get(user) {
            if at.elapsed() < self.cfg.profile_ttl {
                return Ok(p.clone());
            }
        }
        let req = self.signed(&link, Method::Get, wire::user_path(user), Vec::new());
        let resp = self.send_checked(&link, &req).map_err(|e| match e {
            NodeError::UnknownUser(_) => NodeError::UnknownUser(user.clone()),
            other => other,
        })?;
        let rp: RemoteProfile =
            serde_json::from_slice(&resp.body).map_err(|e| NodeError::BadRequest(format!("bad profile: {e}")))?;
        self.profiles.lock().insert(user.clone(), (rp.profile.clone(), Instant::now()));
        Ok(rp.profile)
    }

    // ---- ingress ----------------------------------------------------------

    fn dispatch_remote(&self, req: &WireRequest) -> Result<WireResponse> {
        let link = self.link(&req.origin).ok_or_else(|| NodeError::UnpairedOrigin(req.origin.clone()))?;
        if !req.verify(&link.secret) {
            return Err(NodeError::AuthFailed);
        }
        if link.state != LinkState::Active {
            return Err(NodeError::UnpairedOrigin(req.origin.clone()));
        }
        let parse_err = |e: serde_json::Error| NodeError::BadRequest(e.to_string());
        match (req.method, req.path.as_str()) {
            (Method::Post, wire::MESSAGES) => {
                let env: RemoteEnvelope = serde_json::from_slice(&req.body).map_err(parse_err)?;
                Ok(WireResponse::ok(&self.receive_remote_post(&req.origin, env)?))
            }
            (Method::Post, wire::CIRCLES) => {
                let rec: ReplicaRecord = serde_json::from_slice(&req.body).map_err(parse_err)?;
                let outcome = self.write().apply_replica_update(rec)?;
                Ok(WireResponse::ok(&ReplicaAck { outcome }))
            }
            (Method::Post, wire::FOLLOWS) => {
                let n: FollowNotice = serde_json::from_slice(&req.body).map_err(parse_err)?;
                if n.follower.asn() != req.origin || n.followee.asn() != *self.asn() {
                    return Err(NodeError::BadRequest("follow notice does not match the link".into()));
                }
                if self.read().mesh().user(&n.followee).is_none() {
                    return Err(NodeError::UnknownUser(n.followee));
                }
                if n.following {
                    self.mutate(|m| m.follow(&n.follower, &n.followee))?;
                } else {
                    self.mutate(|m| m.unfollow(&n.follower, &n.followee))?;
                }
                Ok(WireResponse::ok(&n))
            }
            (Method::Get, p) if p.starts_with(wire::USERS) => {
                let id: UserId = p[wire::USERS.len()..]
                    .parse()
                    .map_err(|e: crate::ids::IdError| NodeError::BadRequest(e.to_string()))?;
                if id.asn() != *self.asn() {
                    return Err(NodeError::UnknownUser(id));
                }
                let profile = self.fetch_remote_profile(&id)?;
                Ok(WireResponse::ok(&RemoteProfile { id, profile }))
            }
            _ => Ok(WireResponse::error(404, "not-found", req.path.clone())),
        }
    }
}

fn link_user(link: &PeeringLink) -> UserId {
    UserId::scoped(&link.remote, "unknown").expect("valid")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReplicaAck {
    pub outcome: ReplicaOutcome,
}

fn error_response(e: &NodeError) -> WireResponse {
    let message = match e {
        NodeError::UnknownUser(u) => u.to_string(),
        other => other.to_string(),
    };
    WireResponse::error(e.status(), e.kind(), message)
}

impl RemoteHandler for Node {
    fn handle_remote(&self, req: WireRequest) -> WireResponse {
        if req.method == Method::Post && req.path == wire::PAIR {
            return match self.handle_pair(&req) {
                Ok(d) => WireResponse::ok(&d),
                Err(NodeError::BadRequest(m)) if m == "not-ready" => {
                    WireResponse::error(409, "not-ready", "no link registered for this origin yet")
                }
                Err(e) => error_response(&e),
            };
        }
        match self.dispatch_remote(&req) {
            Ok(r) => r,
            Err(e) => {
                tracing::debug!(origin = %req.origin, path = %req.path, error = %e, "remote request rejected");
                error_response(&e)
            }
        }
    }
}
