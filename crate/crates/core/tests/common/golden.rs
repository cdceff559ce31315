//! Golden wire bodies. The fixtures and their signatures were written by an
//! independent script; these checks make sure the code still produces the
//! same bytes and that any single-byte change breaks the signature.

use std::collections::BTreeSet;

use prism_core::cluster::{link_secret, Cluster, ClusterOptions};
use prism_core::federation::wire::{self, canonical_json, Method, RemoteEnvelope, WireRequest};
use prism_core::federation::RemoteHandler;
use prism_core::ids::AsnId;
use prism_core::model::{Mesh, Message, Profile};
use prism_core::policy::parse_policy_file;
use prism_core::store::ReplicaRecord;

pub const ENVELOPE: &[u8] = include_bytes!("../fixtures/envelope.json");
pub const REPLICA: &[u8] = include_bytes!("../fixtures/replica_record.json");
pub const SIGNATURES: &str = include_str!("../fixtures/signatures.json");

pub fn golden_envelope() -> RemoteEnvelope {
    let tags = BTreeSet::from(["A/alice~friends".parse().unwrap(), "A/Cardiology".parse().unwrap()]);
    let conflicts = BTreeSet::from(["A/alice~untrusted".parse().unwrap()]);
    let m =
        Message::new("A/m42".parse().unwrap(), "A/alice".parse().unwrap(), "Lunch at noon? \"café\"", tags, conflicts)
            .unwrap();
    RemoteEnvelope::new("A".parse().unwrap(), &"B".parse().unwrap(), m, 1_409_529_600_000)
}

pub fn golden_replica() -> ReplicaRecord {
    let a: AsnId = "A".parse().unwrap();
    let mut mesh = Mesh::new();
    mesh.apply_change(mesh.create_asn(&a, "admin", Profile::default()).unwrap());
    mesh.apply_change(mesh.register_user(&a, "alice", Profile::default()).unwrap());
    let alice = "A/alice".parse().unwrap();
    let g = mesh.apply_change(mesh.create_private_group(&alice, "friends", None).unwrap());
    let g = mesh.apply_change(mesh.add_member(&g.id, &"B/bob".parse().unwrap()).unwrap());
    let policy = parse_policy_file("allow <- reader-in-asn(B)\ndeny <- reader-is(B/mallory)").unwrap();
    let g = mesh.apply_change(mesh.set_policies(&g.id, policy).unwrap());
    ReplicaRecord { origin: a, version: g.version, circle: g }
}

fn signature_of(name: &str) -> (String, String, String) {
    let v: serde_json::Value = serde_json::from_str(SIGNATURES).unwrap();
    let s = |k: &str| v[name][k].as_str().unwrap().to_string();
    (s("path"), s("secret"), s("signature"))
}

/// Byte equality of both bodies, in both directions.
pub fn check_golden_bodies() {
    assert_eq!(String::from_utf8_lossy(&canonical_json(&golden_envelope())), String::from_utf8_lossy(ENVELOPE));
    assert_eq!(String::from_utf8_lossy(&canonical_json(&golden_replica())), String::from_utf8_lossy(REPLICA));
    let env: RemoteEnvelope = serde_json::from_slice(ENVELOPE).unwrap();
    assert_eq!(canonical_json(&env), ENVELOPE);
    let rec: ReplicaRecord = serde_json::from_slice(REPLICA).unwrap();
    assert_eq!(canonical_json(&rec), REPLICA);
}

fn variants(bytes: &[u8]) -> impl Iterator<Item = Vec<u8>> + '_ {
    let subs = (0..bytes.len()).flat_map(move |i| {
        (0..=255u8).filter(move |b| *b != bytes[i]).map(move |b| {
            let mut v = bytes.to_vec();
            v[i] = b;
            v
        })
    });
    let dels = (0..bytes.len()).map(move |i| {
        let mut v = bytes.to_vec();
        v.remove(i);
        v
    });
    subs.chain(dels)
}

/// Every single-byte substitution or deletion in the body, the path or the
/// signature fails verification. Returns the number of variants tried.
pub fn check_mutations_rejected() -> usize {
    let mut tried = 0;
    for (name, body) in [("envelope", ENVELOPE), ("replica_record", REPLICA)] {
        let (path, secret, sig) = signature_of(name);
        assert_eq!(wire::sign(&secret, &path, body), sig, "{name}: signature differs from the fixture");
        assert!(wire::verify(&secret, &path, body, &sig));
        for b in variants(body) {
            assert!(!wire::verify(&secret, &path, &b, &sig), "{name}: mutated body accepted");
            tried += 1;
        }
        for p in variants(path.as_bytes()) {
            let p = String::from_utf8_lossy(&p);
            assert!(!wire::verify(&secret, &p, body, &sig), "{name}: mutated path {p} accepted");
            tried += 1;
        }
        for s in variants(sig.as_bytes()) {
            let s = String::from_utf8_lossy(&s);
            assert!(!wire::verify(&secret, &path, body, &s), "{name}: mutated signature accepted");
            tried += 1;
        }
    }
    tried
}

/// A live node answers 401 to every mutated replica push and still applies
/// the untouched one.
pub fn check_node_rejects_mutations() {
    let (a, b): (AsnId, AsnId) = ("A".parse().unwrap(), "B".parse().unwrap());
    let cluster = Cluster::new(&[a.clone(), b.clone()], ClusterOptions::default()).unwrap();
    cluster.pair_all().unwrap();
    let node = cluster.node(&b);
    let secret = link_secret(&a, &b);
    let good = WireRequest::signed(Method::Post, wire::CIRCLES, a.clone(), &secret, REPLICA.to_vec());
    for i in 0..REPLICA.len() {
        let mut req = good.clone();
        req.body[i] ^= 0x20;
        assert_eq!(node.handle_remote(req).status, 401, "body byte {i}");
    }
    for i in 0..good.signature.len() {
        let mut req = good.clone();
        let mut s = req.signature.into_bytes();
        s[i] = if s[i] == b'0' { b'1' } else { b'0' };
        req.signature = String::from_utf8(s).unwrap();
        assert_eq!(node.handle_remote(req).status, 401, "signature byte {i}");
    }
    let mut req = good.clone();
    req.path = "/remote/v1/circlez".into();
    assert_eq!(node.handle_remote(req).status, 401);
    let circle = "A/alice~friends".parse().unwrap();
    assert!(cluster.node(&b).read().mesh().circle(&circle).is_none());
    let resp = node.handle_remote(good);
    assert_eq!(resp.status, 200, "{}", String::from_utf8_lossy(&resp.body));
    assert!(cluster.node(&b).read().mesh().circle(&circle).is_some());
}
