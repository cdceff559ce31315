//! Durable state of one ASN instance.
//!
//! Layout under the data directory:
//!
//! * `messages.log`: one [`Message`] per record
//! * `inbox/<asn>@<local>.log`: [`InboxRecord`]s of one local user
//! * `meta.log`: [`MetaRecord`] batches (mesh events, links, replicas, ...)
//! * `snapshots/<seq>/state.json` plus an empty `COMPLETE` marker, where
//!   `<seq>` counts snapshots
//!
//! Record framing is described in [`log`]. Payloads are JSON. Every replay
//! step is idempotent, so a crash between writing a snapshot and resetting
//! the logs is harmless. See `docs/store-format.md` for the byte layout.

pub mod log;

use std::collections::{BTreeMap, BTreeSet};

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::federation::{LinkState, PeeringLink};
use crate::ids::{AsnId, CircleId, MessageId, UserId};
use crate::model::{Change, Circle, Mesh, MeshEvent, Message};

use log::LogFile;

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("io error on {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("corrupt record in {path}: {message}")]
    Corrupt { path: PathBuf, message: String },
    #[error("message {0} already stored with different content")]
    DuplicateIdDifferentContent(MessageId),
    #[error("unknown user {0}")]
    UnknownUser(UserId),
    #[error("unknown message {0}")]
    UnknownMessage(MessageId),
    #[error("origin {0} is not a paired asn")]
    UnpairedOrigin(AsnId),
    #[error("replica of {circle} does not come from its host (origin {origin})")]
    NotAuthoritative { circle: CircleId, origin: AsnId },
}

pub type Result<T, E = StoreError> = std::result::Result<T, E>;

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> StoreError + '_ {
    move |source| StoreError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InboxEntry {
    pub message: MessageId,
    pub seq: u64,
    pub read: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "kebab-case")]
pub enum InboxRecord {
    Append { message: MessageId, seq: u64 },
    Read { seq: u64 },
}

/// A versioned copy of a circle hosted by another ASN.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReplicaRecord {
    pub origin: AsnId,
    pub version: u64,
    pub circle: Circle,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReplicaOutcome {
    Applied,
    Stale,
}

/// Salted password hash.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Credential {
    pub salt: String,
    pub hash: String,
}

/// A post held back until a boss of every listed group approves it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PendingPost {
    pub message: Message,
    pub awaiting: BTreeSet<CircleId>,
}

/// One state transition recorded in `meta.log`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "kebab-case")]
pub enum MetaOp {
    Mesh { event: MeshEvent },
    Link { link: PeeringLink },
    Replica { record: ReplicaRecord },
    ReplicatedTo { circle: CircleId, asn: AsnId, version: u64 },
    Envelope { id: String },
    Credential { user: UserId, credential: Credential },
    Pending { post: PendingPost },
    PendingResolved { id: MessageId },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaRecord {
    pub seq: u64,
    pub ops: Vec<MetaOp>,
}

/// Everything recorded in `meta.log`, folded.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DurableState {
    pub mesh: Mesh,
    pub peers: BTreeMap<AsnId, PeeringLink>,
    /// Highest version of each circle acknowledged by each paired ASN.
    pub replicated_to: BTreeMap<CircleId, BTreeMap<AsnId, u64>>,
    pub processed_envelopes: BTreeSet<String>,
    pub credentials: BTreeMap<UserId, Credential>,
    pub pending: BTreeMap<MessageId, PendingPost>,
}

impl DurableState {
    pub fn apply(&mut self, op: MetaOp) {
        match op {
            MetaOp::Mesh { event } => self.mesh.apply_event(event),
            MetaOp::Link { link } => {
                self.peers.insert(link.remote.clone(), link);
            }
            MetaOp::Replica { record } => {
                let newer = self.mesh.circle(&record.circle.id).is_none_or(|c| record.version > c.version);
                if newer {
                    let mut circle = record.circle;
                    circle.version = record.version;
                    self.mesh.apply_event(MeshEvent::Circle(circle));
                }
            }
            MetaOp::ReplicatedTo { circle, asn, version } => {
                let v = self.replicated_to.entry(circle).or_default().entry(asn).or_default();
                *v = (*v).max(version);
            }
            MetaOp::Envelope { id } => {
                self.processed_envelopes.insert(id);
            }
            MetaOp::Credential { user, credential } => {
                self.credentials.insert(user, credential);
            }
            MetaOp::Pending { post } => {
                self.pending.insert(post.message.id.clone(), post);
            }
            MetaOp::PendingResolved { id } => {
                self.pending.remove(&id);
            }
        }
    }

    pub fn is_paired(&self, asn: &AsnId) -> bool {
        self.peers.get(asn).is_some_and(|l| l.state == LinkState::Active)
    }
}

#[derive(Debug, Clone)]
pub struct StoreOptions {
    /// The ASN this store belongs to; inboxes exist only for its users.
    pub asn: AsnId,
    /// `fsync` after every record. Off only for benchmarks and tests.
    pub fsync: bool,
    /// Take a snapshot after this many meta records; 0 disables.
    pub snapshot_every: u64,
}

impl StoreOptions {
    pub fn new(asn: AsnId) -> Self {
        Self { asn, fsync: true, snapshot_every: 10_000 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PutOutcome {
    Stored,
    AlreadyPresent,
}

#[derive(Serialize, Deserialize)]
struct Snapshot {
    meta_seq: u64,
    state: DurableState,
    messages: Vec<Message>,
    inboxes: BTreeMap<UserId, Vec<InboxEntry>>,
}

#[derive(Debug, Default)]
struct Inbox {
    entries: Vec<InboxEntry>,
    by_message: BTreeMap<MessageId, u64>,
}

impl Inbox {
    fn insert(&mut self, message: MessageId, seq: u64) -> bool {
        if self.by_message.contains_key(&message) || self.entries.last().is_some_and(|e| e.seq >= seq) {
            return false;
        }
        self.by_message.insert(message.clone(), seq);
        self.entries.push(InboxEntry { message, seq, read: false });
        true
    }

    fn mark_read(&mut self, seq: u64) -> bool {
        match self.entries.binary_search_by_key(&seq, |e| e.seq) {
            Ok(i) => {
                self.entries[i].read = true;
                true
            }
            Err(_) => false,
        }
    }
}

/// Single-writer store. Readers share it through the owner's lock.
#[derive(Debug)]
pub struct Store {
    dir: PathBuf,
    opts: StoreOptions,
    state: DurableState,
    messages: BTreeMap<MessageId, Message>,
    inboxes: BTreeMap<UserId, Inbox>,
    meta_seq: u64,
    snapshot_seq: u64,
    records_since_snapshot: u64,
    messages_log: LogFile,
    meta_log: LogFile,
    inbox_logs: BTreeMap<UserId, LogFile>,
}

const COMPLETE: &str = "COMPLETE";

fn inbox_file_name(u: &UserId) -> String {
    format!("{}@{}.log", u.asn(), u.local())
}

fn parse_inbox_file_name(name: &str) -> Option<UserId> {
    let stem = name.strip_suffix(".log")?;
    let (asn, local) = stem.split_once('@')?;
    format!("{asn}/{local}").parse().ok()
}

fn decode<T: for<'de> Deserialize<'de>>(path: &Path, bytes: &[u8]) -> Result<T> {
    serde_json::from_slice(bytes).map_err(|e| StoreError::Corrupt { path: path.to_path_buf(), message: e.to_string() })
}

fn encode<T: Serialize>(v: &T) -> Vec<u8> {
    serde_json::to_vec(v).expect("store records serialize")
}

impl Store {
    /// Opens the data directory, recovering from the newest complete
    /// snapshot and the logs.
    pub fn open(dir: impl AsRef<Path>, opts: StoreOptions) -> Result<Self> {
        let dir = dir.as_ref().to_path_buf();
        for sub in ["", "inbox", "snapshots"] {
            let p = dir.join(sub);
            fs::create_dir_all(&p).map_err(io_err(&p))?;
        }

        let mut state = DurableState::default();
        let mut messages = BTreeMap::new();
        let mut inboxes: BTreeMap<UserId, Inbox> = BTreeMap::new();
        let mut meta_seq = 0;
        let mut snapshot_seq = 0;
        if let Some((seq, snap)) = Self::load_latest_snapshot(&dir)? {
            snapshot_seq = seq;
            meta_seq = snap.meta_seq;
            state = snap.state;
            for m in snap.messages {
                messages.insert(m.id.clone(), m);
            }
            for (u, entries) in snap.inboxes {
                let inbox = inboxes.entry(u).or_default();
                for e in entries {
                    inbox.insert(e.message.clone(), e.seq);
                    if e.read {
                        inbox.mark_read(e.seq);
                    }
                }
            }
        }

        let meta_path = dir.join("meta.log");
        let (meta_log, recs) = LogFile::open(&meta_path, opts.fsync).map_err(io_err(&meta_path))?;
        let mut replayed = 0;
        for r in recs {
            let rec: MetaRecord = decode(&meta_path, &r)?;
            if rec.seq <= meta_seq {
                continue;
            }
            meta_seq = rec.seq;
            replayed += 1;
            for op in rec.ops {
                state.apply(op);
            }
        }

        let msg_path = dir.join("messages.log");
        let (messages_log, recs) = LogFile::open(&msg_path, opts.fsync).map_err(io_err(&msg_path))?;
        for r in recs {
            let m: Message = decode(&msg_path, &r)?;
            messages.entry(m.id.clone()).or_insert(m);
        }

        let mut inbox_logs = BTreeMap::new();
        let inbox_dir = dir.join("inbox");
        let mut names: Vec<_> = fs::read_dir(&inbox_dir)
            .map_err(io_err(&inbox_dir))?
            .filter_map(|e| e.ok())
            .map(|e| e.file_name().to_string_lossy().into_owned())
            .collect();
        names.sort();
        for name in names {
            let Some(user) = parse_inbox_file_name(&name) else { continue };
            let path = inbox_dir.join(&name);
            let (log, recs) = LogFile::open(&path, opts.fsync).map_err(io_err(&path))?;
            let inbox = inboxes.entry(user.clone()).or_default();
            for r in recs {
                match decode::<InboxRecord>(&path, &r)? {
                    InboxRecord::Append { message, seq } => {
                        inbox.insert(message, seq);
                    }
                    InboxRecord::Read { seq } => {
                        inbox.mark_read(seq);
                    }
                }
            }
            inbox_logs.insert(user, log);
        }

        tracing::debug!(dir = %dir.display(), meta_seq, messages = messages.len(), "store recovered");
        Ok(Self {
            dir,
            opts,
            state,
            messages,
            inboxes,
            meta_seq,
            snapshot_seq,
            records_since_snapshot: replayed,
            messages_log,
            meta_log,
            inbox_logs,
        })
    }

    fn load_latest_snapshot(dir: &Path) -> Result<Option<(u64, Snapshot)>> {
        let snaps = dir.join("snapshots");
        let mut complete = Vec::new();
        for e in fs::read_dir(&snaps).map_err(io_err(&snaps))? {
            let e = e.map_err(io_err(&snaps))?;
            let name = e.file_name().to_string_lossy().into_owned();
            match name.parse::<u64>() {
                Ok(seq) if e.path().join(COMPLETE).exists() => complete.push((seq, e.path())),
                _ => {
                    // unfinished snapshot from a crash
                    let p = e.path();
                    fs::remove_dir_all(&p).map_err(io_err(&p))?;
                }
            }
        }
        let Some((seq, path)) = complete.into_iter().max() else { return Ok(None) };
        let file = path.join("state.json");
        let bytes = fs::read(&file).map_err(io_err(&file))?;
        Ok(Some((seq, decode(&file, &bytes)?)))
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn asn(&self) -> &AsnId {
        &self.opts.asn
    }

    pub fn state(&self) -> &DurableState {
        &self.state
    }

    pub fn mesh(&self) -> &Mesh {
        &self.state.mesh
    }

    pub fn meta_seq(&self) -> u64 {
        self.meta_seq
    }

    /// Durably records a batch of state transitions, then applies them.
    /// The batch is one record, so it survives a crash entirely or not at all.
    pub fn commit(&mut self, ops: Vec<MetaOp>) -> Result<()> {
        if ops.is_empty() {
            return Ok(());
        }
        let rec = MetaRecord { seq: self.meta_seq + 1, ops };
        let path = self.meta_log.path().to_path_buf();
        self.meta_log.append(&encode(&rec)).map_err(io_err(&path))?;
        self.meta_seq = rec.seq;
        for op in rec.ops {
            self.state.apply(op);
        }
        self.records_since_snapshot += 1;
        if self.opts.snapshot_every > 0 && self.records_since_snapshot >= self.opts.snapshot_every {
            self.snapshot()?;
        }
        Ok(())
    }

    /// Commits the events of a validated mesh change.
    pub fn commit_change<T>(&mut self, change: Change<T>) -> Result<T> {
        let ops = change.events.into_iter().map(|event| MetaOp::Mesh { event }).collect();
        self.commit(ops)?;
        Ok(change.value)
    }

    pub fn put_message(&mut self, m: Message) -> Result<PutOutcome> {
        if let Some(existing) = self.messages.get(&m.id) {
            return if existing == &m {
                Ok(PutOutcome::AlreadyPresent)
            } else {
                Err(StoreError::DuplicateIdDifferentContent(m.id))
            };
        }
        let path = self.messages_log.path().to_path_buf();
        self.messages_log.append(&encode(&m)).map_err(io_err(&path))?;
        self.messages.insert(m.id.clone(), m);
        Ok(PutOutcome::Stored)
    }

    pub fn message(&self, id: &MessageId) -> Option<&Message> {
        self.messages.get(id)
    }

    pub fn messages(&self) -> impl Iterator<Item = &Message> {
        self.messages.values()
    }

    pub fn message_count(&self) -> usize {
        self.messages.len()
    }

    /// Appends `mid` to `u`'s inbox once. A repeated append returns the
    /// sequence number of the existing entry.
    pub fn append_inbox(&mut self, u: &UserId, mid: &MessageId) -> Result<u64> {
        if u.asn() != self.opts.asn || self.state.mesh.user(u).is_none() {
            return Err(StoreError::UnknownUser(u.clone()));
        }
        if !self.messages.contains_key(mid) {
            return Err(StoreError::UnknownMessage(mid.clone()));
        }
        let inbox = self.inboxes.entry(u.clone()).or_default();
        if let Some(seq) = inbox.by_message.get(mid) {
            return Ok(*seq);
        }
        let seq = inbox.entries.last().map_or(1, |e| e.seq + 1);
        self.inbox_log(u)?
            .append(&encode(&InboxRecord::Append { message: mid.clone(), seq }))
            .map_err(|source| StoreError::Io { path: PathBuf::from(inbox_file_name(u)), source })?;
        self.inboxes.get_mut(u).expect("created above").insert(mid.clone(), seq);
        Ok(seq)
    }

    pub fn mark_read(&mut self, u: &UserId, seq: u64) -> Result<bool> {
        let known = self.inboxes.get(u).is_some_and(|i| i.entries.binary_search_by_key(&seq, |e| e.seq).is_ok());
        if !known {
            return Ok(false);
        }
        self.inbox_log(u)?
            .append(&encode(&InboxRecord::Read { seq }))
            .map_err(|source| StoreError::Io { path: PathBuf::from(inbox_file_name(u)), source })?;
        Ok(self.inboxes.get_mut(u).expect("checked").mark_read(seq))
    }

    fn inbox_log(&mut self, u: &UserId) -> Result<&mut LogFile> {
        if !self.inbox_logs.contains_key(u) {
            let path = self.dir.join("inbox").join(inbox_file_name(u));
            let (log, _) = LogFile::open(&path, self.opts.fsync).map_err(io_err(&path))?;
            self.inbox_logs.insert(u.clone(), log);
        }
        Ok(self.inbox_logs.get_mut(u).expect("inserted"))
    }

    pub fn inbox(&self, u: &UserId) -> &[InboxEntry] {
        self.inboxes.get(u).map_or(&[], |i| &i.entries)
    }

    pub fn inbox_contains(&self, u: &UserId, mid: &MessageId) -> bool {
        self.inboxes.get(u).is_some_and(|i| i.by_message.contains_key(mid))
    }

    /// Installs a circle replica from its host if it is newer than ours.
    pub fn apply_replica_update(&mut self, r: ReplicaRecord) -> Result<ReplicaOutcome> {
        if !self.state.is_paired(&r.origin) {
            return Err(StoreError::UnpairedOrigin(r.origin));
        }
        if r.circle.host() != r.origin || r.origin == self.opts.asn {
            return Err(StoreError::NotAuthoritative { circle: r.circle.id, origin: r.origin });
        }
        let stored = self.state.mesh.circle(&r.circle.id).map_or(0, |c| c.version);
        if r.version <= stored {
            return Ok(ReplicaOutcome::Stale);
        }
        self.commit(vec![MetaOp::Replica { record: r }])?;
        Ok(ReplicaOutcome::Applied)
    }

    /// Writes a full snapshot and resets the logs. Returns the snapshot's
    /// sequence number.
    pub fn snapshot(&mut self) -> Result<u64> {
        let snap = Snapshot {
            meta_seq: self.meta_seq,
            state: self.state.clone(),
            messages: self.messages.values().cloned().collect(),
            inboxes: self.inboxes.iter().map(|(u, i)| (u.clone(), i.entries.clone())).collect(),
        };
        let snaps = self.dir.join("snapshots");
        let seq = self.snapshot_seq + 1;
        let name = format!("{seq:020}");
        let tmp = snaps.join(format!("{name}.tmp"));
        let fin = snaps.join(&name);
        let _ = fs::remove_dir_all(&tmp);
        fs::create_dir_all(&tmp).map_err(io_err(&tmp))?;
        let state_path = tmp.join("state.json");
        fs::write(&state_path, encode(&snap)).map_err(io_err(&state_path))?;
        if self.opts.fsync {
            fs::File::open(&state_path).and_then(|f| f.sync_all()).map_err(io_err(&state_path))?;
        }
        let marker = tmp.join(COMPLETE);
        fs::write(&marker, b"").map_err(io_err(&marker))?;
        fs::rename(&tmp, &fin).map_err(io_err(&fin))?;
        if self.opts.fsync {
            fs::File::open(&snaps).and_then(|d| d.sync_all()).map_err(io_err(&snaps))?;
        }

        for log in [&mut self.meta_log, &mut self.messages_log].into_iter().chain(self.inbox_logs.values_mut()) {
            let path = log.path().to_path_buf();
            log.reset().map_err(io_err(&path))?;
        }
        // older snapshots are superseded
        for e in fs::read_dir(&snaps).map_err(io_err(&snaps))?.flatten() {
            if e.file_name().to_string_lossy() != name {
                let p = e.path();
                fs::remove_dir_all(&p).map_err(io_err(&p))?;
            }
        }
        self.snapshot_seq = seq;
        self.records_since_snapshot = 0;
        Ok(seq)
    }
}
