use std::collections::{BTreeMap, BTreeSet};
use std::hint::black_box;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use parking_lot::Mutex;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{BenchConfig, BenchPoint, BenchReport, LatencyPreset};
use crate::cluster::{endpoint, Cluster, ClusterOptions};
use crate::fipm::{check_access, EvalMode};
use crate::gateway::AdminCommand;
use crate::ids::{AsnId, CircleId, MessageId, UserId};
use crate::model::{Mesh, Message, Profile};
use crate::policy::{PolicySet, Predicate, Rule, RuleEffect};

const ORG: &str = "org";

fn uid(local: &str) -> UserId {
    UserId::scoped(&AsnId::new(ORG).expect("valid"), local).expect("valid")
}

fn content(bytes: usize) -> String {
    "x".repeat(bytes)
}

/// Predicates that hold or fail for one reader and message.
struct PredicatePool {
    holds: Vec<Predicate>,
    fails: Vec<Predicate>,
}

impl PredicatePool {
    fn new(reader: &UserId, message: &Message, reader_in: &[CircleId], reader_out: &[CircleId]) -> Self {
        let org: AsnId = ORG.parse().expect("valid");
        let elsewhere: AsnId = "elsewhere".parse().expect("valid");
        let mut holds = vec![
            Predicate::ReaderIs(reader.clone()),
            Predicate::ReaderInAsn(org.clone()),
            Predicate::AuthorIs(message.author.clone()),
            Predicate::AuthorInAsn(org),
        ];
        holds.extend(reader_in.iter().cloned().map(Predicate::ReaderMemberOf));
        holds.extend(message.tags.iter().cloned().map(Predicate::MessageTaggedWith));
        let mut fails = vec![
            Predicate::ReaderIs(uid("nobody")),
            Predicate::ReaderInAsn(elsewhere.clone()),
            Predicate::AuthorIs(uid("someone-else")),
            Predicate::AuthorInAsn(elsewhere),
        ];
        fails.extend(reader_out.iter().cloned().map(Predicate::ReaderMemberOf));
        fails.extend(
            reader_out.iter().filter(|c| !message.tags.contains(*c)).cloned().map(Predicate::MessageTaggedWith),
        );
        Self { holds, fails }
    }

    fn draw(&self, rng: &mut ChaCha8Rng, satisfied: bool) -> Predicate {
        let from = if satisfied { &self.holds } else { &self.fails };
        from.choose(rng).expect("non-empty pool").clone()
    }

    /// A rule with `n` predicates, each holding with probability `ratio`.
    /// `must_fail` forces at least one failing predicate.
    fn rule(&self, rng: &mut ChaCha8Rng, effect: RuleEffect, n: usize, ratio: f64, must_fail: bool) -> Rule {
        let mut sat: Vec<bool> = (0..n).map(|_| rng.gen_bool(ratio)).collect();
        if must_fail && sat.iter().all(|s| *s) {
            let i = rng.gen_range(0..n);
            sat[i] = false;
        }
        let body = sat.into_iter().map(|s| self.draw(rng, s)).collect();
        Rule::new(effect, body).expect("n > 0")
    }

    /// Allow rules and deny rules that never fire, plus one allow that does
    /// when `satisfiable`.
    fn policy(&self, rng: &mut ChaCha8Rng, rules: usize, preds: usize, ratio: f64, satisfiable: bool) -> PolicySet {
        let mut out = Vec::with_capacity(rules);
        for i in 0..rules {
            if satisfiable && i == 0 {
                let body = (0..preds).map(|_| self.draw(rng, true)).collect();
                out.push(Rule::allow(body).expect("n > 0"));
                continue;
            }
            let effect = if rng.gen_bool(0.5) { RuleEffect::Allow } else { RuleEffect::Deny };
            let must_fail = effect == RuleEffect::Deny || !satisfiable;
            out.push(self.rule(rng, effect, preds, ratio, must_fail));
        }
        out.shuffle(rng);
        PolicySet::new(out)
    }
}

fn base_mesh(users: &[&str]) -> Mesh {
    let org: AsnId = ORG.parse().expect("valid");
    let mut m = Mesh::new();
    m.apply_change(m.create_asn(&org, "admin", Profile::default()).expect("fresh mesh"));
    for u in users {
        m.apply_change(m.register_user(&org, u, Profile::default()).expect("fresh user"));
    }
    m
}

fn time_batches(reps: usize, warmup: usize, batch: usize, mut f: impl FnMut() -> bool) -> Vec<u64> {
    let batch = batch.max(1);
    for _ in 0..warmup {
        black_box(f());
    }
    (0..reps)
        .map(|_| {
            let t = Instant::now();
            for _ in 0..batch {
                black_box(f());
            }
            (t.elapsed().as_nanos() / batch as u128) as u64
        })
        .collect()
}

/// Access latency when the reader must satisfy every policy from a tag circle
/// up to the root of a chain of the given length.
pub fn run_chain_bench(cfg: &BenchConfig) -> BenchReport {
    let c = &cfg.chain;
    let max_len = c.lengths.iter().copied().max().unwrap_or(0);
    assert!(max_len + c.reader_memberships + c.tags <= c.circles + 1, "chain bench needs more circles");
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut mesh = base_mesh(&["alice", "reader"]);
    let (alice, reader) = (uid("alice"), uid("reader"));

    // circles 0..max_len form the chain, the rest hang off each other at random
    let mut chain: Vec<CircleId> = Vec::new();
    for i in 0..max_len {
        let parent = chain.last().cloned();
        let g = mesh
            .apply_change(mesh.create_private_group(&alice, &format!("chain{i:03}"), parent.as_ref()).expect("valid"));
        chain.push(g.id);
    }
    let mut side: Vec<CircleId> = Vec::new();
    for i in 0..c.circles - max_len {
        let parent = if side.is_empty() || rng.gen_bool(0.3) { None } else { side.choose(&mut rng).cloned() };
        let g = mesh
            .apply_change(mesh.create_private_group(&alice, &format!("side{i:03}"), parent.as_ref()).expect("valid"));
        side.push(g.id);
    }
    side.shuffle(&mut rng);
    let reader_in: Vec<CircleId> = side[..c.reader_memberships].to_vec();
    let extra_tags: Vec<CircleId> =
        side[c.reader_memberships..c.reader_memberships + c.tags.saturating_sub(1)].to_vec();
    let reader_out: Vec<CircleId> = side[c.reader_memberships..].iter().chain(&chain).cloned().collect();
    for circle in &reader_in {
        mesh.apply_change(mesh.add_member(circle, &reader).expect("valid"));
    }

    let mut report = BenchReport::new("chain", "length");
    for &len in &c.lengths {
        if len == 0 {
            continue;
        }
        let mut tags: BTreeSet<CircleId> = extra_tags.iter().cloned().collect();
        tags.insert(chain[len - 1].clone());
        let msg = Message::new(
            MessageId::scoped(&ORG.parse().expect("valid"), "m1").expect("valid"),
            alice.clone(),
            content(cfg.content_bytes),
            tags,
            BTreeSet::new(),
        )
        .expect("disjoint");
        let pool = PredicatePool::new(&reader, &msg, &reader_in, &reader_out);
        let mut m = mesh.clone();
        for circle in &chain[..len] {
            let p = pool.policy(&mut rng, c.rules_per_circle, c.predicates_per_rule, cfg.satisfied_ratio, true);
            m.apply_change(m.set_policies(circle, p).expect("valid"));
        }
        for circle in &extra_tags {
            let p = pool.policy(&mut rng, c.rules_per_circle, c.predicates_per_rule, cfg.satisfied_ratio, false);
            m.apply_change(m.set_policies(circle, p).expect("valid"));
        }
        assert!(check_access(&m, &msg, &reader, EvalMode::PolicyChain).is_allow(), "chain {len} must be traversable");
        let samples = time_batches(c.reps, c.warmup, c.batch, || {
            check_access(&m, &msg, &reader, EvalMode::PolicyChain).is_allow()
        });
        report.points.push(BenchPoint::new(len as f64, samples));
    }
    report
}

/// Policy evaluation latency for a parentless circle the reader is not in.
pub fn run_rules_bench(cfg: &BenchConfig) -> BenchReport {
    let c = &cfg.rules;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5255_4c45);
    let mut mesh = base_mesh(&["alice", "reader"]);
    let (alice, reader) = (uid("alice"), uid("reader"));
    let mut others = Vec::new();
    for i in 0..20 {
        let g = mesh.apply_change(mesh.create_private_group(&alice, &format!("other{i:02}"), None).expect("valid"));
        others.push(g.id);
    }
    for circle in &others[..10] {
        mesh.apply_change(mesh.add_member(circle, &reader).expect("valid"));
    }
    let target = mesh.apply_change(mesh.create_private_group(&alice, "target", None).expect("valid")).id;
    let msg = Message::new(
        MessageId::scoped(&ORG.parse().expect("valid"), "m1").expect("valid"),
        alice,
        content(cfg.content_bytes),
        BTreeSet::from([target.clone()]),
        BTreeSet::new(),
    )
    .expect("disjoint");
    let pool = PredicatePool::new(&reader, &msg, &others[..10], &others[10..]);

    let mut report = BenchReport::new("rules", "rules");
    for &n in &c.counts {
        let mut rules = Vec::with_capacity(n);
        for _ in 0..n {
            let effect = if rng.gen_bool(0.5) { RuleEffect::Allow } else { RuleEffect::Deny };
            rules.push(pool.rule(
                &mut rng,
                effect,
                c.predicates_per_rule,
                cfg.satisfied_ratio,
                effect == RuleEffect::Deny,
            ));
        }
        let mut m = mesh.clone();
        m.apply_change(m.set_policies(&target, PolicySet::new(rules)).expect("valid"));
        let samples = time_batches(c.reps, c.warmup, c.batch, || {
            check_access(&m, &msg, &reader, EvalMode::PolicyChain).is_allow()
        });
        report.points.push(BenchPoint::new(n as f64, samples));
    }
    report
}

/// One fanout measurement: timings plus what was delivered, for comparing
/// runs at different widths.
#[derive(Debug, Clone)]
pub struct FanoutRun {
    pub point: BenchPoint,
    /// (reader, post index) pairs found in remote inboxes.
    pub delivered: BTreeSet<(UserId, usize)>,
}

fn asn_name(i: usize) -> AsnId {
    format!("asn{i:03}").parse().expect("valid")
}

/// Wall time from accepting a post to the last remote inbox append, with
/// followers spread over `n_asns - 1` remote instances.
pub fn run_fanout_bench(cfg: &BenchConfig, n_asns: usize, pool_width: usize, reps: usize) -> FanoutRun {
    let f = &cfg.fanout;
    let asns: Vec<AsnId> = (0..n_asns.max(1)).map(asn_name).collect();
    let opts = ClusterOptions { pool_width, mode: EvalMode::PolicyChain, ..ClusterOptions::default() };
    let cluster = Cluster::new(&asns, opts).expect("cluster boots");
    let origin = &asns[0];
    for remote in &asns[1..] {
        cluster.pair(origin, remote).expect("pairing");
    }
    let author = UserId::scoped(origin, "author").expect("valid");
    let token = cluster.register(&author, "pw").expect("register");
    let gw = cluster.gateway(origin).clone();
    let audience: CircleId = gw
        .handle_admin(&token, AdminCommand::CreatePrivateGroup { name: "audience".into(), parent: None })
        .expect("group")["circle"]
        .as_str()
        .expect("id")
        .parse()
        .expect("valid");
    let mut readers = Vec::new();
    for remote in &asns[1..] {
        for k in 0..f.followers_per_asn {
            let u = UserId::scoped(remote, &format!("reader{k}")).expect("valid");
            let t = cluster.register(&u, "pw").expect("register");
            cluster.gateway(remote).follow(&t, &author, true).expect("follow");
            gw.handle_admin(&token, AdminCommand::AddMember { circle: audience.clone(), user: u.clone() })
                .expect("member");
            readers.push((u, t));
        }
    }
    for (i, remote) in asns.iter().enumerate().skip(1) {
        let ms = match f.latency {
            LatencyPreset::Uniform => f.uniform_latency_ms,
            LatencyPreset::Geo => f.geo_latency_ms.get(i % f.geo_latency_ms.len().max(1)).copied().unwrap_or(0.0),
        } * f.latency_scale;
        cluster.network.set_latency(origin, &endpoint(remote), Duration::from_secs_f64(ms / 1000.0));
    }

    let tags = BTreeSet::from([audience]);
    let body = content(cfg.content_bytes);
    let mut ids: BTreeMap<MessageId, usize> = BTreeMap::new();
    let mut samples = Vec::new();
    let mut errors = 0;
    for i in 0..f.warmup + reps {
        let t = Instant::now();
        let receipt = gw.handle_post(&token, &body, tags.clone(), BTreeSet::new()).expect("post");
        gw.flush();
        let elapsed = t.elapsed().as_nanos() as u64;
        if let Some(r) = cluster.node(origin).delivery_report(&receipt.id) {
            errors += r.destinations.values().filter(|o| !o.is_delivered()).count() as u64;
        }
        ids.insert(receipt.id, i);
        if i >= f.warmup {
            samples.push(elapsed);
        }
    }
    let mut delivered = BTreeSet::new();
    for (u, t) in &readers {
        for item in cluster.gateway(&u.asn()).inbox(t).expect("inbox") {
            if let Some(i) = ids.get(&item.message.id) {
                delivered.insert((u.clone(), *i));
            }
        }
    }
    let mut point = BenchPoint::new(n_asns as f64, samples);
    point.errors = errors;
    FanoutRun { point, delivered }
}

/// Sustained throughput of one instance under `clients` concurrent posters.
/// Every sample is one operation's latency; failed operations are counted
/// in the point's `errors`.
pub fn run_capacity_bench(cfg: &BenchConfig, clients: &[usize], duration: Duration) -> BenchReport {
    let c = &cfg.capacity;
    let max = clients.iter().copied().max().unwrap_or(0);
    let asn: AsnId = "cap".parse().expect("valid");
    let opts = ClusterOptions { fsync: c.fsync, ..ClusterOptions::default() };
    let cluster = Cluster::new(std::slice::from_ref(&asn), opts).expect("cluster boots");
    let gw = cluster.gateway(&asn).clone();
    let users: Vec<(UserId, String)> = (0..max)
        .map(|i| {
            let u = UserId::scoped(&asn, &format!("client{i:03}")).expect("valid");
            let t = cluster.register(&u, "pw").expect("register");
            (u, t)
        })
        .collect();
    let mut groups = Vec::new();
    for (i, (_, t)) in users.iter().enumerate() {
        let g: CircleId = gw
            .handle_admin(t, AdminCommand::CreatePrivateGroup { name: "fans".into(), parent: None })
            .expect("group")["circle"]
            .as_str()
            .expect("id")
            .parse()
            .expect("valid");
        for k in 1..=c.followers.min(max.saturating_sub(1)) {
            let (fan, fan_token) = &users[(i + k) % max];
            gw.handle_admin(t, AdminCommand::AddMember { circle: g.clone(), user: fan.clone() }).expect("member");
            gw.follow(fan_token, &users[i].0, true).expect("follow");
        }
        groups.push(BTreeSet::from([g]));
    }

    let body = content(cfg.content_bytes);
    let mut report = BenchReport::new("capacity", "clients");
    for &n in clients {
        let latest: Arc<Vec<Mutex<Option<MessageId>>>> = Arc::new((0..max).map(|_| Mutex::new(None)).collect());
        let stop = Arc::new(AtomicBool::new(false));
        let errors = Arc::new(AtomicU64::new(0));
        let started = Instant::now();
        let samples: Vec<u64> = std::thread::scope(|s| {
            let handles: Vec<_> = (0..n)
                .map(|i| {
                    let (gw, users, groups, latest, stop, errors, body) =
                        (&gw, &users, &groups, latest.clone(), stop.clone(), errors.clone(), &body);
                    s.spawn(move || {
                        let mut lat = Vec::new();
                        let mut k = 0usize;
                        while !stop.load(Ordering::Relaxed) {
                            k += 1;
                            let t = Instant::now();
                            let ok = if c.fetch_every > 0 && k.is_multiple_of(c.fetch_every) {
                                // i is in the group of the client before it
                                let target = latest[(i + max - 1) % max].lock().clone();
                                match target {
                                    Some(mid) => gw.handle_fetch(&users[i].1, &mid).is_ok(),
                                    None => continue,
                                }
                            } else {
                                match gw.handle_post(&users[i].1, body, groups[i].clone(), BTreeSet::new()) {
                                    Ok(r) => {
                                        *latest[i].lock() = Some(r.id);
                                        true
                                    }
                                    Err(e) => {
                                        tracing::error!(error = %e, "capacity post failed");
                                        false
                                    }
                                }
                            };
                            lat.push(t.elapsed().as_nanos() as u64);
                            if !ok {
                                errors.fetch_add(1, Ordering::Relaxed);
                            }
                        }
                        lat
                    })
                })
                .collect();
            if n > 0 {
                std::thread::sleep(duration);
            }
            stop.store(true, Ordering::Relaxed);
            handles.into_iter().flat_map(|h| h.join().expect("client thread")).collect()
        });
        gw.flush();
        let secs = started.elapsed().as_secs_f64();
        report.notes.push((format!("ops_per_sec@{n}"), samples.len() as f64 / secs));
        let mut p = BenchPoint::new(n as f64, samples);
        p.errors = errors.load(Ordering::Relaxed);
        report.points.push(p);
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> BenchConfig {
        let mut c = BenchConfig::default();
        c.chain.lengths = vec![1, 3, 6];
        c.chain.reps = 3;
        c.chain.warmup = 1;
        c.rules.counts = vec![0, 10];
        c.rules.reps = 3;
        c.fanout.reps = 2;
        c.fanout.latency_scale = 0.0;
        c
    }

    #[test]
    fn chain_and_rules_run() {
        let c = small();
        let r = run_chain_bench(&c);
        assert_eq!(r.points.len(), 3);
        assert!(r.points.iter().all(|p| p.samples_ns.len() == 3));
        let r = run_rules_bench(&c);
        assert_eq!(r.points.len(), 2);
    }

    #[test]
    fn fanout_delivers_to_every_reader() {
        let c = small();
        let run = run_fanout_bench(&c, 3, 2, 2);
        assert_eq!(run.point.errors, 0);
        // 2 remote asns x 2 readers x (warmup + reps) posts
        assert_eq!(run.delivered.len(), 2 * 2 * 3);
        let single = run_fanout_bench(&c, 1, 1, 1);
        assert!(single.delivered.is_empty());
    }

    #[test]
    fn capacity_zero_clients_zero_ops() {
        let mut c = small();
        c.capacity.followers = 2;
        let r = run_capacity_bench(&c, &[0, 4], Duration::from_millis(100));
        assert!(r.points[0].samples_ns.is_empty());
        assert!(!r.points[1].samples_ns.is_empty());
        assert_eq!(r.total_errors(), 0);
    }
}
