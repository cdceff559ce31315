//! Crash after every acknowledged write of a 500-operation script.
//!
//! After each operation the data directory is captured byte for byte. Every
//! capture must reopen to exactly the state acknowledged so far. Between two
//! captures we also build the in-between disk states a crash could leave:
//! torn and corrupted appends, an unfinished snapshot, and a finished
//! snapshot whose logs were not reset yet.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use prism_core::ids::{AsnId, MessageId, UserId};
use prism_core::model::{Message, Profile};
use prism_core::store::{DurableState, InboxEntry, MetaOp, Store, StoreOptions};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const OPS: usize = 500;

type Disk = BTreeMap<PathBuf, Vec<u8>>;

fn capture(root: &Path) -> Disk {
    fn walk(root: &Path, dir: &Path, out: &mut Disk) {
        for e in fs::read_dir(dir).unwrap().flatten() {
            let p = e.path();
            if p.is_dir() {
                out.insert(p.strip_prefix(root).unwrap().join(""), Vec::new());
                walk(root, &p, out);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    let mut out = Disk::new();
    walk(root, root, &mut out);
    out
}

fn materialize(disk: &Disk) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    for (p, bytes) in disk {
        let full = dir.path().join(p);
        if p.as_os_str().to_string_lossy().ends_with('/') {
            fs::create_dir_all(&full).unwrap();
        } else {
            fs::create_dir_all(full.parent().unwrap()).unwrap();
            fs::write(&full, bytes).unwrap();
        }
    }
    dir
}

#[derive(Debug, Clone, PartialEq)]
struct Observed {
    state: DurableState,
    meta_seq: u64,
    messages: Vec<Message>,
    inboxes: BTreeMap<UserId, Vec<InboxEntry>>,
}

fn observe(s: &Store) -> Observed {
    let users: Vec<UserId> = s.mesh().users().map(|u| u.id.clone()).collect();
    Observed {
        state: s.state().clone(),
        meta_seq: s.meta_seq(),
        messages: s.messages().cloned().collect(),
        inboxes: users.into_iter().map(|u| (u.clone(), s.inbox(&u).to_vec())).collect(),
    }
}

/// What the script was told succeeded, kept apart from the store.
#[derive(Default, Clone)]
struct Acked {
    messages: BTreeSet<MessageId>,
    appends: Vec<(UserId, MessageId)>,
    reads: BTreeSet<(UserId, u64)>,
    envelopes: BTreeSet<String>,
}

fn check_acked(s: &Store, acked: &Acked, at: &str) {
    for m in &acked.messages {
        assert!(s.message(m).is_some(), "{at}: lost message {m}");
    }
    let mut per_user: BTreeMap<&UserId, Vec<&MessageId>> = BTreeMap::new();
    for (u, m) in &acked.appends {
        per_user.entry(u).or_default().push(m);
    }
    for (u, want) in per_user {
        let got: Vec<&MessageId> = s.inbox(u).iter().map(|e| &e.message).collect();
        let want_set: BTreeSet<_> = want.iter().copied().collect();
        assert_eq!(got.len(), want_set.len(), "{at}: inbox of {u} has lost or duplicated entries");
        assert_eq!(got.iter().copied().collect::<BTreeSet<_>>(), want_set, "{at}: inbox of {u}");
    }
    for (u, seq) in &acked.reads {
        assert!(s.inbox(u).iter().any(|e| e.seq == *seq && e.read), "{at}: lost read mark {u}#{seq}");
    }
    for id in &acked.envelopes {
        assert!(s.state().processed_envelopes.contains(id), "{at}: lost envelope {id}");
    }
}

fn reopen(disk: &Disk, opts: &StoreOptions) -> (tempfile::TempDir, Store) {
    let dir = materialize(disk);
    let s = Store::open(dir.path(), opts.clone()).unwrap();
    (dir, s)
}

/// Runs the script, returning the disk, observed state and acknowledgements
/// after each operation, plus whether that operation took a snapshot.
fn run_script(seed: u64, opts: &StoreOptions) -> Vec<(Disk, Observed, Acked, bool)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dir = tempfile::tempdir().unwrap();
    let mut store = Store::open(dir.path(), opts.clone()).unwrap();
    let asn = opts.asn.clone();
    let mut acked = Acked::default();
    let mut out = Vec::new();
    let mut users: Vec<UserId> = Vec::new();
    let mut mids: Vec<MessageId> = Vec::new();
    let mut snapshots = BTreeSet::new();

    for i in 0..OPS {
        let roll = rng.gen_range(0..100);
        if i == 0 {
            let c = store.mesh().create_asn(&asn, "admin", Profile::default()).unwrap();
            store.commit_change(c).unwrap();
            users.push(format!("{asn}/admin").parse().unwrap());
        } else if users.len() < 3 || roll < 8 {
            let local = format!("u{i}");
            let c = store.mesh().register_user(&asn, &local, Profile::default()).unwrap();
            users.push(store.commit_change(c).unwrap().id);
        } else if mids.is_empty() || roll < 35 {
            let id = MessageId::new(format!("{asn}/m{i}")).unwrap();
            let author = users.choose(&mut rng).unwrap().clone();
            let m = Message::new(id.clone(), author, format!("content {i}"), BTreeSet::new(), BTreeSet::new()).unwrap();
            store.put_message(m).unwrap();
            acked.messages.insert(id.clone());
            mids.push(id);
        } else if roll < 75 {
            // includes repeats, which must stay single entries
            let u = users.choose(&mut rng).unwrap().clone();
            let m = mids.choose(&mut rng).unwrap().clone();
            store.append_inbox(&u, &m).unwrap();
            acked.appends.push((u, m));
        } else if roll < 90 {
            let u = users.choose(&mut rng).unwrap().clone();
            if let Some(e) = store.inbox(&u).choose(&mut rng).cloned() {
                assert!(store.mark_read(&u, e.seq).unwrap());
                acked.reads.insert((u, e.seq));
            } else {
                store.commit(vec![MetaOp::Envelope { id: format!("env-{i}") }]).unwrap();
                acked.envelopes.insert(format!("env-{i}"));
            }
        } else {
            store.commit(vec![MetaOp::Envelope { id: format!("env-{i}") }]).unwrap();
            acked.envelopes.insert(format!("env-{i}"));
        }
        let disk = capture(dir.path());
        let now = complete_snapshots(&disk);
        out.push((disk, observe(&store), acked.clone(), now != snapshots));
        snapshots = now;
    }
    out
}

fn complete_snapshots(disk: &Disk) -> BTreeSet<PathBuf> {
    disk.keys().filter(|p| p.starts_with("snapshots") && p.ends_with("COMPLETE")).cloned().collect()
}

fn is_log(p: &Path) -> bool {
    p.extension().is_some_and(|e| e == "log")
}

/// Runs the whole check, panicking on the first violation. Returns the
/// number of torn appends exercised.
pub fn check_crash_recovery() -> usize {
    let opts = StoreOptions { asn: "A".parse::<AsnId>().unwrap(), fsync: false, snapshot_every: 25 };
    let steps = run_script(41, &opts);
    assert!(steps.iter().filter(|s| s.3).count() >= 3, "script should cross several snapshots");
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut torn_checked = 0;

    for (i, (disk, obs, acked, _)) in steps.iter().enumerate() {
        let at = format!("after op {i}");
        let (_d, s) = reopen(disk, &opts);
        assert_eq!(&observe(&s), obs, "{at}: recovered state differs");
        check_acked(&s, acked, &at);

        let Some((next, next_obs, _, next_snap)) = steps.get(i + 1) else { continue };
        if *next_snap {
            // unfinished snapshot directory left behind
            let mut half = disk.clone();
            half.insert(PathBuf::from("snapshots/99999999999999999999.tmp/"), Vec::new());
            half.insert(PathBuf::from("snapshots/99999999999999999999.tmp/state.json"), b"{\"meta".to_vec());
            let (_d, s) = reopen(&half, &opts);
            assert_eq!(&observe(&s), obs, "{at}: unfinished snapshot changed state");

            // snapshot renamed into place, logs not yet reset
            let mut late = disk.clone();
            for (p, b) in next {
                if p.starts_with("snapshots") || !late.contains_key(p) {
                    late.insert(p.clone(), b.clone());
                }
            }
            let (_d, s) = reopen(&late, &opts);
            assert_eq!(&observe(&s), next_obs, "{at}: snapshot with stale logs");
            continue;
        }

        // a crash part way through the next append
        let empty = Vec::new();
        for (p, grown) in next {
            let old = disk.get(p).unwrap_or(&empty);
            if !is_log(p) || grown.len() <= old.len() || !grown.starts_with(old) {
                continue;
            }
            let cut = rng.gen_range(old.len() + 1..grown.len());
            let mut torn = disk.clone();
            torn.insert(p.clone(), grown[..cut].to_vec());
            let (dir, mut s) = reopen(&torn, &opts);
            assert_eq!(&observe(&s), obs, "{at}: torn append to {} leaked", p.display());

            let mut flipped = disk.clone();
            let mut bad = grown.clone();
            *bad.last_mut().unwrap() ^= 0x5a;
            flipped.insert(p.clone(), bad);
            let (_d2, s2) = reopen(&flipped, &opts);
            assert_eq!(&observe(&s2), obs, "{at}: corrupt append to {} accepted", p.display());

            // writing after recovery must not be hidden behind the old tail
            let id = MessageId::new(format!("A/after-crash-{i}")).unwrap();
            let author = s.mesh().users().next().unwrap().id.clone();
            s.put_message(Message::new(id.clone(), author, "x", BTreeSet::new(), BTreeSet::new()).unwrap()).unwrap();
            drop(s);
            let s = Store::open(dir.path(), opts.clone()).unwrap();
            assert!(s.message(&id).is_some(), "{at}: write after torn tail lost");
            check_acked(&s, acked, &at);
            torn_checked += 1;
        }
    }
    assert!(torn_checked > 300, "only {torn_checked} torn appends exercised");
    torn_checked
}
