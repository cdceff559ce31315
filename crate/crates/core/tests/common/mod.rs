#![allow(dead_code)]

pub mod crash;
pub mod golden;
pub mod privilege;
pub mod props;

use std::collections::{BTreeMap, BTreeSet};

use prism_core::cluster::{Cluster, ClusterOptions};
use prism_core::federation::wire;
use prism_core::federation::{RemoteEnvelope, WireRequest};
use prism_core::fipm::EvalMode;
use prism_core::gateway::AdminCommand;
use prism_core::ids::{AsnId, CircleId, MessageId, UserId};
use prism_core::model::{Circle, CircleKind, Mesh, MeshEvent, Message, Profile};
use prism_core::policy::{PolicySet, Predicate, Rule, RuleEffect};
use prism_core::privilege::{ActionId, Effect};
use rand::seq::{IteratorRandom, SliceRandom};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

// ---- brute-force access oracle ---------------------------------------------
//
// Allowed iff the reader is the author, or no conflict circle contains the
// reader and some tag has an ancestor sequence c0 (the tag), c1, ..., ck with
// the reader in M(ck) and the policies of c0..c(k-1) all satisfied. In
// policy-chain mode a sequence that ends at a parentless circle with every
// policy satisfied also allows.

fn member(mesh: &Mesh, c: &CircleId, u: &UserId) -> bool {
    mesh.circle(c).is_some_and(|c| c.members.contains(u))
}

fn holds(mesh: &Mesh, m: &Message, u: &UserId, p: &Predicate) -> bool {
    match p {
        Predicate::AuthorIs(x) => &m.author == x,
        Predicate::ReaderIs(x) => u == x,
        Predicate::AuthorMemberOf(c) => member(mesh, c, &m.author),
        Predicate::ReaderMemberOf(c) => member(mesh, c, u),
        Predicate::MessageTaggedWith(c) => m.tags.contains(c),
        Predicate::ReaderInAsn(a) => &u.asn() == a,
        Predicate::AuthorInAsn(a) => &m.author.asn() == a,
    }
}

pub fn oracle_policy(mesh: &Mesh, m: &Message, u: &UserId, set: &PolicySet) -> bool {
    let fired: Vec<&Rule> = set.rules().iter().filter(|r| r.body().iter().all(|p| holds(mesh, m, u, p))).collect();
    fired.iter().all(|r| r.effect() != RuleEffect::Deny) && fired.iter().any(|r| r.effect() == RuleEffect::Allow)
}

/// Every ancestor sequence from `tag`, and whether it ends at a root.
fn ancestor_sequence(mesh: &Mesh, tag: &CircleId) -> (Vec<CircleId>, bool) {
    let mut seq: Vec<CircleId> = Vec::new();
    let mut cur = Some(tag.clone());
    while let Some(c) = cur {
        if seq.contains(&c) {
            return (seq, false);
        }
        let Some(circle) = mesh.circle(&c) else { return (seq, false) };
        seq.push(c);
        cur = circle.parent.clone();
    }
    (seq, true)
}

pub fn oracle_allows(mesh: &Mesh, m: &Message, u: &UserId, mode: EvalMode) -> bool {
    if &m.author == u {
        return true;
    }
    if m.conflicts.iter().any(|c| member(mesh, c, u)) {
        return false;
    }
    for t in &m.tags {
        let (seq, to_root) = ancestor_sequence(mesh, t);
        let ok: Vec<bool> = seq.iter().map(|c| oracle_policy(mesh, m, u, &mesh.circle(c).unwrap().policies)).collect();
        for k in 0..seq.len() {
            if member(mesh, &seq[k], u) && ok[..k].iter().all(|b| *b) {
                return true;
            }
        }
        if mode == EvalMode::PolicyChain && to_root && !seq.is_empty() && ok.iter().all(|b| *b) {
            return true;
        }
    }
    false
}

// ---- random meshes -----------------------------------------------------------

pub struct Case {
    pub mesh: Mesh,
    pub message: Message,
    pub users: Vec<UserId>,
    pub circles: Vec<CircleId>,
}

fn asn(s: &str) -> AsnId {
    s.parse().unwrap()
}

pub fn random_predicate(rng: &mut ChaCha8Rng, users: &[UserId], circles: &[CircleId], asns: &[AsnId]) -> Predicate {
    let ghost_user: UserId = "A/ghost".parse().unwrap();
    let ghost_circle: CircleId = "A/ghost-circle".parse().unwrap();
    let user =
        |rng: &mut ChaCha8Rng| if rng.gen_bool(0.05) { ghost_user.clone() } else { users.choose(rng).unwrap().clone() };
    let circle = |rng: &mut ChaCha8Rng| {
        if rng.gen_bool(0.05) || circles.is_empty() {
            ghost_circle.clone()
        } else {
            circles.choose(rng).unwrap().clone()
        }
    };
    let a = |rng: &mut ChaCha8Rng| if rng.gen_bool(0.1) { asn("Z") } else { asns.choose(rng).unwrap().clone() };
    match rng.gen_range(0..10) {
        0 => Predicate::AuthorIs(user(rng)),
        1 => Predicate::ReaderIs(user(rng)),
        2 => Predicate::AuthorMemberOf(circle(rng)),
        3 | 4 => Predicate::ReaderMemberOf(circle(rng)),
        5 => Predicate::MessageTaggedWith(circle(rng)),
        6 | 7 => Predicate::ReaderInAsn(a(rng)),
        _ => Predicate::AuthorInAsn(a(rng)),
    }
}

pub fn random_policy(
    rng: &mut ChaCha8Rng,
    max_rules: usize,
    users: &[UserId],
    circles: &[CircleId],
    asns: &[AsnId],
) -> PolicySet {
    let n = rng.gen_range(0..=max_rules);
    let rules = (0..n)
        .map(|_| {
            let body = (0..rng.gen_range(1..=3)).map(|_| random_predicate(rng, users, circles, asns)).collect();
            let effect = if rng.gen_bool(0.75) { RuleEffect::Allow } else { RuleEffect::Deny };
            Rule::new(effect, body).unwrap()
        })
        .collect();
    PolicySet::new(rules)
}

/// A mesh of at most 30 circles and 40 users built through the model's own
/// operations, plus a message with random tags and conflicts. A few cases
/// get a parent loop or a dangling parent injected.
pub fn random_case(rng: &mut ChaCha8Rng) -> Case {
    let asns: Vec<AsnId> = ["A", "B", "C"][..rng.gen_range(1..=3)].iter().map(|s| asn(s)).collect();
    let mut mesh = Mesh::new();
    let mut users = Vec::new();
    for a in &asns {
        let admin = mesh.apply_change(mesh.create_asn(a, "admin", Profile::default()).unwrap()).admin;
        let main = mesh.apply_change(mesh.create_subdomain(a, a.as_str(), None, &admin).unwrap()).id;
        mesh.apply_change(
            mesh.set_subdomain_privilege(&main, &ActionId::CREATE_PUBLIC_GROUP, Some(Effect::Grant)).unwrap(),
        );
        users.push(admin);
    }
    let n_users = rng.gen_range(users.len().max(2)..=40);
    for i in users.len()..n_users {
        let a = asns.choose(rng).unwrap();
        users.push(mesh.apply_change(mesh.register_user(a, &format!("u{i}"), Profile::default()).unwrap()).id);
    }
    let target = rng.gen_range(1..=30);
    let mut attempts = 0;
    while mesh.circle_count() < target && attempts < 200 {
        attempts += 1;
        let name = format!("c{attempts}");
        let change = match rng.gen_range(0..3) {
            0 => {
                let a = asns.choose(rng).unwrap();
                let subs: Vec<CircleId> = mesh.asn(a).unwrap().subdomains.iter().cloned().collect();
                let parent = subs.choose(rng).unwrap();
                let local: Vec<&UserId> = users.iter().filter(|u| &u.asn() == a).collect();
                mesh.create_subdomain(a, &name, Some(parent), local.choose(rng).unwrap())
            }
            1 => {
                let owner = users.choose(rng).unwrap();
                let parent = if rng.gen_bool(0.5) {
                    None
                } else {
                    mesh.circles()
                        .filter(|c| c.host() == owner.asn() && !matches!(c.kind, CircleKind::PrivateGroup(_)))
                        .map(|c| c.id.clone())
                        .choose(rng)
                };
                mesh.create_public_group(owner, &name, parent.as_ref(), PolicySet::empty())
            }
            _ => {
                let owner = users.choose(rng).unwrap();
                let parent = if rng.gen_bool(0.3) {
                    None
                } else {
                    mesh.circles().filter(|c| c.private_owner() == Some(owner)).map(|c| c.id.clone()).choose(rng)
                };
                mesh.create_private_group(owner, &name, parent.as_ref())
            }
        };
        if let Ok(ch) = change {
            mesh.apply_change(ch);
        }
    }
    let circles: Vec<CircleId> = mesh.circles().map(|c| c.id.clone()).collect();
    for c in &circles {
        let p = rng.gen_range(0.0..0.3);
        for u in &users {
            if rng.gen_bool(p) {
                if let Ok(ch) = mesh.add_member(c, u) {
                    mesh.apply_change(ch);
                }
            }
        }
        let policy = random_policy(rng, 10, &users, &circles, &asns);
        mesh.apply_change(mesh.set_policies(c, policy).unwrap());
    }
    if rng.gen_bool(0.05) {
        inject_loop(rng, &mut mesh);
    }
    if rng.gen_bool(0.05) {
        let mut c: Circle = mesh.circles().choose(rng).unwrap().clone();
        c.parent = Some("A/missing".parse().unwrap());
        mesh.apply_event(MeshEvent::Circle(c));
    }

    let author = users.choose(rng).unwrap().clone();
    let mut pool = circles.clone();
    pool.shuffle(rng);
    let nt = rng.gen_range(0..=4.min(pool.len()));
    let mut tags: BTreeSet<CircleId> = pool[..nt].iter().cloned().collect();
    let nc = rng.gen_range(0..=2.min(pool.len() - nt));
    let mut conflicts: BTreeSet<CircleId> = pool[nt..nt + nc].iter().cloned().collect();
    if rng.gen_bool(0.1) {
        tags.insert("B/unknown-tag".parse().unwrap());
    }
    if rng.gen_bool(0.1) {
        conflicts.insert("B/unknown-conflict".parse().unwrap());
    }
    let id: MessageId = format!("{}/m1", author.asn()).parse().unwrap();
    let message = Message::new(id, author, "content", tags, conflicts).unwrap();
    Case { mesh, message, users, circles }
}

/// Points the root of some circle's ancestor sequence back at the circle.
pub fn inject_loop(rng: &mut ChaCha8Rng, mesh: &mut Mesh) {
    let with_parent: Vec<CircleId> = mesh.circles().filter(|c| c.parent.is_some()).map(|c| c.id.clone()).collect();
    let Some(start) = with_parent.choose(rng) else { return };
    let mut top = start.clone();
    while let Some(p) = mesh.circle(&top).and_then(|c| c.parent.clone()) {
        if mesh.circle(&p).is_none() || &p == start {
            return;
        }
        top = p;
    }
    let mut root = mesh.circle(&top).unwrap().clone();
    root.parent = Some(start.clone());
    mesh.apply_event(MeshEvent::Circle(root));
}

// ---- federation scenario -----------------------------------------------------

/// The authoritative state of every instance merged: each ASN contributes
/// its own users, roles and the circles it hosts.
pub fn global_mesh(cluster: &Cluster) -> Mesh {
    let mut g = Mesh::new();
    for a in cluster.asns() {
        let st = cluster.node(a).read();
        let m = st.mesh();
        g.apply_event(MeshEvent::Asn(m.asn(a).unwrap().clone()));
        for u in m.users().filter(|u| &u.asn() == a) {
            g.apply_event(MeshEvent::User(u.clone()));
        }
        for c in m.circles().filter(|c| &c.host() == a) {
            g.apply_event(MeshEvent::Circle(c.clone()));
        }
        for r in m.roles().filter(|r| &r.id.asn() == a) {
            g.apply_event(MeshEvent::Role(r.clone()));
        }
    }
    g
}

pub fn inboxes(cluster: &Cluster) -> BTreeMap<UserId, Vec<MessageId>> {
    let mut out = BTreeMap::new();
    for a in cluster.asns() {
        let st = cluster.node(a).read();
        for u in st.mesh().users().filter(|u| &u.asn() == a) {
            out.insert(u.id.clone(), st.inbox(&u.id).iter().map(|e| e.message.clone()).collect());
        }
    }
    out
}

pub struct FedSpec {
    pub seed: u64,
    pub asns: usize,
    pub users: usize,
    pub posts: usize,
    pub pool_width: usize,
    pub mode: EvalMode,
}

impl Default for FedSpec {
    fn default() -> Self {
        Self { seed: 7, asns: 5, users: 50, posts: 200, pool_width: 4, mode: EvalMode::PolicyChain }
    }
}

pub struct FedRun {
    pub cluster: Cluster,
    pub posts: Vec<MessageId>,
    /// Oracle audience of every post, computed on the global mesh at post time.
    pub expected: BTreeMap<UserId, BTreeSet<MessageId>>,
    /// (post, envelopes sent, distinct remote follower asns)
    pub envelopes: Vec<(MessageId, usize, usize)>,
    pub recorded: Vec<(String, WireRequest)>,
    pub rejected_posts: usize,
    /// (post, follower) pairs the oracle denied.
    pub withheld: usize,
}

struct Actor {
    id: UserId,
    token: String,
}

fn create(cluster: &Cluster, actor: &Actor, cmd: AdminCommand) -> Option<CircleId> {
    let gw = cluster.gateway(&actor.id.asn());
    gw.handle_admin(&actor.token, cmd).ok().and_then(|v| v["circle"].as_str().and_then(|s| s.parse().ok()))
}

/// Random policy whose membership predicates only mention circles hosted
/// with the circle itself.
fn hosted_policy(rng: &mut ChaCha8Rng, host: &AsnId, users: &[UserId], circles: &[CircleId], asns: &[AsnId]) -> String {
    let local: Vec<CircleId> = circles.iter().filter(|c| &c.asn() == host).cloned().collect();
    let mut p = random_policy(rng, 4, users, &local, asns);
    // tagged-with may mention anything
    if rng.gen_bool(0.3) {
        let c = circles.choose(rng).unwrap().clone();
        p.push(Rule::allow(vec![Predicate::MessageTaggedWith(c)]).unwrap());
    }
    p.to_policy_file()
}

pub fn run_federation(spec: &FedSpec) -> FedRun {
    use rand::SeedableRng;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let asns: Vec<AsnId> = (0..spec.asns).map(|i| asn(&format!("N{i}"))).collect();
    let opts = ClusterOptions { pool_width: spec.pool_width, mode: spec.mode, ..ClusterOptions::default() };
    let cluster = Cluster::new(&asns, opts).unwrap();
    cluster.pair_all().unwrap();
    for a in &asns {
        let assignment = format!("grant create-public-group to subdomain:{a}/{a}").parse().unwrap();
        cluster.admin(a, AdminCommand::Privilege { assignment, clear: false }).unwrap();
        cluster.admin(a, AdminCommand::CreateSubdomain { name: "dept".into(), parent: None, admin: None }).unwrap();
    }
    let actors: Vec<Actor> = (0..spec.users)
        .map(|i| {
            let id = UserId::scoped(&asns[i % asns.len()], &format!("u{i:02}")).unwrap();
            let token = cluster.register(&id, "pw").unwrap();
            Actor { id, token }
        })
        .collect();
    let ids: Vec<UserId> = actors.iter().map(|a| a.id.clone()).collect();

    // follows
    for a in &actors {
        for t in ids.choose_multiple(&mut rng, 8) {
            if t != &a.id {
                cluster.gateway(&a.id.asn()).follow(&a.token, t, true).unwrap();
            }
        }
    }
    // subdomain membership for local users
    for a in &actors {
        let host = a.id.asn();
        let sd: CircleId =
            if rng.gen_bool(0.5) { format!("{host}/{host}") } else { format!("{host}/dept") }.parse().unwrap();
        if rng.gen_bool(0.6) {
            cluster.admin(&host, AdminCommand::AddMember { circle: sd, user: a.id.clone() }).unwrap();
        }
    }
    // groups
    let mut owned: Vec<(usize, CircleId)> = Vec::new();
    for (i, a) in actors.iter().enumerate() {
        for k in 0..rng.gen_range(0..=2) {
            let parent = owned
                .iter()
                .filter(|(o, c)| *o == i && c.local().contains('~'))
                .map(|(_, c)| c.clone())
                .choose(&mut rng);
            let parent = if rng.gen_bool(0.4) { parent } else { None };
            if let Some(c) = create(&cluster, a, AdminCommand::CreatePrivateGroup { name: format!("p{k}"), parent }) {
                owned.push((i, c));
            }
        }
        if rng.gen_bool(0.2) {
            let host = a.id.asn();
            let parent: Option<CircleId> = match rng.gen_range(0..3) {
                0 => Some(format!("{host}/dept").parse().unwrap()),
                1 => owned.iter().filter(|(o, c)| *o == i && !c.local().contains('~')).map(|(_, c)| c.clone()).next(),
                _ => None,
            };
            let cmd = AdminCommand::CreatePublicGroup { name: format!("g{i}"), parent, policies: String::new() };
            if let Some(c) = create(&cluster, a, cmd) {
                owned.push((i, c));
            }
        }
    }
    for (o, c) in &owned {
        let a = &actors[*o];
        let n = rng.gen_range(1..8);
        for u in ids.choose_multiple(&mut rng, n) {
            let _ = cluster
                .gateway(&a.id.asn())
                .handle_admin(&a.token, AdminCommand::AddMember { circle: c.clone(), user: u.clone() });
        }
    }
    let all_circles: Vec<CircleId> = global_mesh(&cluster).circles().map(|c| c.id.clone()).collect();
    for (o, c) in &owned {
        if rng.gen_bool(0.6) {
            let a = &actors[*o];
            let policies = hosted_policy(&mut rng, &c.asn(), &ids, &all_circles, &asns);
            cluster
                .gateway(&a.id.asn())
                .handle_admin(&a.token, AdminCommand::SetPolicies { circle: c.clone(), policies })
                .unwrap();
        }
    }
    for a in &asns {
        for sd in [format!("{a}/{a}"), format!("{a}/dept")] {
            if rng.gen_bool(0.5) {
                let policies = hosted_policy(&mut rng, a, &ids, &all_circles, &asns);
                cluster.admin(a, AdminCommand::SetPolicies { circle: sd.parse().unwrap(), policies }).unwrap();
            }
        }
    }

    cluster.flush();
    cluster.network.take_log();
    cluster.network.set_recording(true);
    let expected = global_mesh(&cluster).users().map(|u| (u.id.clone(), BTreeSet::new())).collect();
    let mut run = FedRun {
        cluster,
        posts: Vec::new(),
        expected,
        envelopes: Vec::new(),
        recorded: Vec::new(),
        rejected_posts: 0,
        withheld: 0,
    };
    let cluster = &run.cluster;
    while run.posts.len() < spec.posts {
        // occasional churn between posts
        if run.posts.len() % 20 == 19 {
            for _ in 0..5 {
                let (o, c) = owned.choose(&mut rng).unwrap();
                let a = &actors[*o];
                let u = ids.choose(&mut rng).unwrap().clone();
                let cmd = if rng.gen_bool(0.5) {
                    AdminCommand::AddMember { circle: c.clone(), user: u }
                } else {
                    AdminCommand::RemoveMember { circle: c.clone(), user: u }
                };
                let _ = cluster.gateway(&a.id.asn()).handle_admin(&a.token, cmd);
            }
            let a = actors.choose(&mut rng).unwrap();
            let t = ids.choose(&mut rng).unwrap();
            if t != &a.id {
                cluster.gateway(&a.id.asn()).follow(&a.token, t, rng.gen_bool(0.5)).unwrap();
            }
            cluster.flush();
            run.recorded.extend(cluster.network.take_log());
        }

        let a = actors.choose(&mut rng).unwrap();
        let g = global_mesh(cluster);
        let usable: Vec<CircleId> = g
            .circles()
            .filter(|c| c.private_owner() == Some(&a.id) || (c.private_owner().is_none() && c.members.contains(&a.id)))
            .map(|c| c.id.clone())
            .collect();
        if usable.is_empty() {
            continue;
        }
        let n = rng.gen_range(1..=3);
        let mut pick: Vec<CircleId> = usable.choose_multiple(&mut rng, n).cloned().collect();
        let conflicts: BTreeSet<CircleId> =
            if pick.len() > 1 && rng.gen_bool(0.3) { BTreeSet::from([pick.pop().unwrap()]) } else { BTreeSet::new() };
        let tags: BTreeSet<CircleId> = pick.into_iter().collect();
        let gw = cluster.gateway(&a.id.asn());
        let receipt = match gw.handle_post(&a.token, "post", tags, conflicts) {
            Ok(r) => r,
            Err(_) => {
                run.rejected_posts += 1;
                continue;
            }
        };
        cluster.flush();
        let m = cluster.node(&a.id.asn()).read().message(&receipt.id).unwrap().clone();
        let followers = g.user(&a.id).unwrap().followers.clone();
        for f in &followers {
            if oracle_allows(&g, &m, f, spec.mode) {
                run.expected.get_mut(f).unwrap().insert(m.id.clone());
            } else {
                run.withheld += 1;
            }
        }
        let remote: BTreeSet<AsnId> = followers.iter().map(UserId::asn).filter(|x| x != &a.id.asn()).collect();
        let log = cluster.network.take_log();
        let sent = log
            .iter()
            .filter(|(_, r)| r.path == wire::MESSAGES)
            .filter(|(_, r)| serde_json::from_slice::<RemoteEnvelope>(&r.body).is_ok_and(|e| e.message.id == m.id))
            .count();
        run.envelopes.push((m.id.clone(), sent, remote.len()));
        run.recorded.extend(log);
        run.posts.push(m.id);
    }
    run.cluster.network.set_recording(false);
    run
}

/// Inbox contents as sets, plus any user with a repeated entry.
pub fn delivered(cluster: &Cluster) -> (BTreeMap<UserId, BTreeSet<MessageId>>, Vec<UserId>) {
    let mut dups = Vec::new();
    let sets = inboxes(cluster)
        .into_iter()
        .map(|(u, v)| {
            let s: BTreeSet<MessageId> = v.iter().cloned().collect();
            if s.len() != v.len() {
                dups.push(u.clone());
            }
            (u, s)
        })
        .collect();
    (sets, dups)
}

/// Re-sends every recorded request in random order, each once or twice.
pub fn replay_shuffled(run: &FedRun, rng: &mut ChaCha8Rng) -> usize {
    use prism_core::federation::Transport;
    let mut reqs: Vec<&(String, WireRequest)> = Vec::new();
    for r in &run.recorded {
        reqs.push(r);
        if rng.gen_bool(0.5) {
            reqs.push(r);
        }
    }
    reqs.shuffle(rng);
    for (endpoint, req) in &reqs {
        let _ = run.cluster.network.send(endpoint, req);
    }
    reqs.len()
}

/// Asserts every federation property on a finished run: inboxes equal the
/// oracle audience with no duplicates, one envelope per remote destination
/// ASN, and a shuffled replay with duplicates changes nothing. Returns a
/// short summary.
pub fn check_federation(run: &FedRun) -> String {
    let (got, dups) = delivered(&run.cluster);
    assert!(dups.is_empty(), "duplicate inbox entries for {dups:?}");
    assert_eq!(got, run.expected, "inboxes differ from the oracle audience");
    let total: usize = run.expected.values().map(|s| s.len()).sum();
    assert!(total > 0 && run.withheld > 0, "degenerate scenario: {total} delivered, {} withheld", run.withheld);
    for (m, sent, remote) in &run.envelopes {
        assert_eq!(sent, remote, "envelopes for {m}");
    }
    let envelopes: usize = run.envelopes.iter().map(|e| e.1).sum();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let replayed = replay_shuffled(run, &mut rng);
    let (again, dups) = delivered(&run.cluster);
    assert!(dups.is_empty(), "replay duplicated inbox entries for {dups:?}");
    assert_eq!(again, got, "replay changed the inboxes");
    format!(
        "{} posts, {total} deliveries, {} withheld, {envelopes} envelopes, {replayed} replayed requests",
        run.posts.len(),
        run.withheld
    )
}
