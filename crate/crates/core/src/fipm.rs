//! Frontier information propagation: may `reader` see message `m`?
//!
//! 1. The author always may.
//! 2. Membership in any conflict circle denies.
//! 3. For each tag circle, walk up the parent links. Membership in the
//!    current circle allows. Otherwise the reader must satisfy the current
//!    circle's policies to continue to its parent.
//! 4. In [`EvalMode::PolicyChain`] a reader who satisfies every policy up to
//!    and including the root is also allowed. [`EvalMode::MembershipAnchored`]
//!    only ever allows on membership.
//! 5. Otherwise deny.
//!
//! Tag circles that cannot be resolved are skipped; conflict circles that
//! cannot be resolved block nobody (a warning is logged).

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::ids::{CircleId, UserId};
use crate::model::{Mesh, Message};
use crate::policy::{evaluate_policy_set, AccessContext};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EvalMode {
    /// Allow only on membership of a circle reached through the chain.
    MembershipAnchored,
    /// Also allow when the reader satisfies every policy up to the root.
    #[default]
    PolicyChain,
}

impl std::str::FromStr for EvalMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "membership-anchored" => Ok(Self::MembershipAnchored),
            "policy-chain" => Ok(Self::PolicyChain),
            other => Err(format!("unknown fipm mode {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "cause", rename_all = "kebab-case")]
pub enum AllowCause {
    Author,
    Membership { circle: CircleId },
    PolicyChainToRoot,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopReason {
    PolicyNotSatisfied,
    /// Root passed with every policy satisfied, but the mode needs membership.
    RootReached,
    UnresolvedParent,
    LoopDetected,
}

/// Where the ascent from one tag circle ended without granting access.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChainStop {
    pub tag: CircleId,
    pub at: CircleId,
    pub reason: StopReason,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "cause", rename_all = "kebab-case")]
pub enum DenyCause {
    Conflict { circle: CircleId },
    TagsExhausted { stops: Vec<ChainStop>, skipped: Vec<CircleId> },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "verdict", rename_all = "kebab-case")]
pub enum AccessDecision {
    Allow {
        /// Tag circle first, then each ancestor traversed.
        chain: Vec<CircleId>,
        #[serde(flatten)]
        cause: AllowCause,
    },
    Deny {
        #[serde(flatten)]
        cause: DenyCause,
    },
}

impl AccessDecision {
    pub fn is_allow(&self) -> bool {
        matches!(self, AccessDecision::Allow { .. })
    }
}

/// Result of ascending from one circle for one reader.
#[derive(Debug, Clone)]
enum Ascent {
    Allow { chain: Vec<CircleId>, cause: AllowCause },
    Stop { chain: Vec<CircleId>, at: CircleId, reason: StopReason },
}

/// Decides access for many readers of one message. Ascents from a circle
/// are cached per reader, so tag chains that meet at a common ancestor are
/// evaluated once.
pub struct Evaluator<'a> {
    mesh: &'a Mesh,
    message: &'a Message,
    mode: EvalMode,
    tags: Vec<&'a CircleId>,
    skipped: Vec<CircleId>,
    conflicts: Vec<&'a CircleId>,
}

impl<'a> Evaluator<'a> {
    pub fn new(mesh: &'a Mesh, message: &'a Message, mode: EvalMode) -> Self {
        let mut tags = Vec::new();
        let mut skipped = Vec::new();
        for t in &message.tags {
            if mesh.circle(t).is_some() {
                tags.push(t);
            } else {
                tracing::debug!(tag = %t, message = %message.id, "skipping unresolvable tag circle");
                skipped.push(t.clone());
            }
        }
        let mut conflicts = Vec::new();
        for c in &message.conflicts {
            if mesh.circle(c).is_some() {
                conflicts.push(c);
            } else {
                tracing::warn!(conflict = %c, message = %message.id, "unresolvable conflict circle blocks nobody");
            }
        }
        Self { mesh, message, mode, tags, skipped, conflicts }
    }

    pub fn decide(&self, reader: &UserId) -> AccessDecision {
        if &self.message.author == reader {
            return AccessDecision::Allow { chain: Vec::new(), cause: AllowCause::Author };
        }
        for c in &self.conflicts {
            if self.mesh.circle(c).is_some_and(|x| x.is_member(reader)) {
                return AccessDecision::Deny { cause: DenyCause::Conflict { circle: (*c).clone() } };
            }
        }
        let ctx = AccessContext::new(self.message, reader, self.mesh);
        let mut memo: HashMap<&CircleId, Ascent> = HashMap::new();
        let mut stops = Vec::new();
        for tag in &self.tags {
            match self.ascend(tag, &ctx, &mut memo) {
                Ascent::Allow { chain, cause } => return AccessDecision::Allow { chain, cause },
                Ascent::Stop { at, reason, .. } => stops.push(ChainStop { tag: (*tag).clone(), at, reason }),
            }
        }
        AccessDecision::Deny { cause: DenyCause::TagsExhausted { stops, skipped: self.skipped.clone() } }
    }

    fn ascend(&self, start: &'a CircleId, ctx: &AccessContext<'_>, memo: &mut HashMap<&'a CircleId, Ascent>) -> Ascent {
        if let Some(hit) = memo.get(start) {
            return hit.clone();
        }
        let bound = self.mesh.circle_count();
        let mut path: Vec<&'a CircleId> = Vec::new();
        let mut seen = BTreeSet::new();
        let mut cur = start;
        let tail = loop {
            if let Some(hit) = memo.get(cur) {
                break hit.clone();
            }
            if !seen.insert(cur) || path.len() > bound {
                tracing::warn!(circle = %cur, "loop in circle hierarchy; ascent denied");
                break Ascent::Stop { chain: Vec::new(), at: cur.clone(), reason: StopReason::LoopDetected };
            }
            let circle = self.mesh.circle(cur).expect("resolved before ascent");
            path.push(cur);
            if circle.is_member(ctx.reader) {
                break Ascent::Allow { chain: Vec::new(), cause: AllowCause::Membership { circle: cur.clone() } };
            }
            if !evaluate_policy_set(&circle.policies, ctx) {
                break Ascent::Stop { chain: Vec::new(), at: cur.clone(), reason: StopReason::PolicyNotSatisfied };
            }
            match &circle.parent {
                None => {
                    break match self.mode {
                        EvalMode::PolicyChain => {
                            Ascent::Allow { chain: Vec::new(), cause: AllowCause::PolicyChainToRoot }
                        }
                        EvalMode::MembershipAnchored => {
                            Ascent::Stop { chain: Vec::new(), at: cur.clone(), reason: StopReason::RootReached }
                        }
                    };
                }
                Some(p) => match self.mesh.circle(p) {
                    Some(pc) => cur = &pc.id,
                    None => {
                        break Ascent::Stop {
                            chain: Vec::new(),
                            at: cur.clone(),
                            reason: StopReason::UnresolvedParent,
                        };
                    }
                },
            }
        };
        // Every circle on the path shares the tail's outcome; cache each one
        // with its own suffix of the chain. A loop stop depends on where the
        // walk started, so it is never cached.
        let cacheable = !matches!(tail, Ascent::Stop { reason: StopReason::LoopDetected, .. });
        let mut suffix = match &tail {
            Ascent::Allow { chain, .. } | Ascent::Stop { chain, .. } => chain.clone(),
        };
        for c in path.iter().rev() {
            suffix.insert(0, (*c).clone());
            if cacheable {
                memo.insert(c, with_chain(&tail, suffix.clone()));
            }
        }
        with_chain(&tail, suffix)
    }
}

fn with_chain(outcome: &Ascent, chain: Vec<CircleId>) -> Ascent {
    match outcome {
        Ascent::Allow { cause, .. } => Ascent::Allow { chain, cause: cause.clone() },
        Ascent::Stop { at, reason, .. } => Ascent::Stop { chain, at: at.clone(), reason: *reason },
    }
}

pub fn check_access(mesh: &Mesh, message: &Message, reader: &UserId, mode: EvalMode) -> AccessDecision {
    Evaluator::new(mesh, message, mode).decide(reader)
}

/// `{ u in candidates : check_access(m, u) = allow }`, evaluated in parallel
/// for large candidate sets.
pub fn compute_audience(
    mesh: &Mesh,
    message: &Message,
    candidates: &BTreeSet<UserId>,
    mode: EvalMode,
) -> BTreeSet<UserId> {
    const PARALLEL_THRESHOLD: usize = 256;
    let eval = Evaluator::new(mesh, message, mode);
    if candidates.len() < PARALLEL_THRESHOLD {
        return candidates.iter().filter(|u| eval.decide(u).is_allow()).cloned().collect();
    }
    let all: Vec<&UserId> = candidates.iter().collect();
    let workers = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(4).min(8);
    let chunk = all.len().div_ceil(workers);
    std::thread::scope(|s| {
        let handles: Vec<_> = all
            .chunks(chunk)
            .map(|part| {
                let eval = &eval;
                s.spawn(move || {
                    part.iter().filter(|u| eval.decide(u).is_allow()).map(|u| (*u).clone()).collect::<Vec<_>>()
                })
            })
            .collect();
        handles.into_iter().flat_map(|h| h.join().expect("audience worker panicked")).collect()
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ids::{AsnId, MessageId};
    use crate::model::Profile;
    use crate::policy::{parse_policy_file, PolicySet};

    fn uid(s: &str) -> UserId {
        s.parse().unwrap()
    }

    /// C1 is an inner circle of C2; Alice and Bob are in C1, Charlie in C2.
    fn nested_groups(c2_policy: &str) -> (Mesh, Message) {
        let org: AsnId = "org".parse().unwrap();
        let mut m = Mesh::new();
        m.apply_change(m.create_asn(&org, "admin", Profile::default()).unwrap());
        for u in ["alice", "bob", "charlie", "ellen"] {
            m.apply_change(m.register_user(&org, u, Profile::default()).unwrap());
        }
        let alice = uid("org/alice");
        let c2 = m.apply_change(m.create_private_group(&alice, "C2", None).unwrap()).id;
        let c1 = m.apply_change(m.create_private_group(&alice, "C1", Some(&c2)).unwrap()).id;
        for (c, u) in [(&c1, "org/alice"), (&c1, "org/bob"), (&c2, "org/charlie")] {
            m.apply_change(m.add_member(c, &uid(u)).unwrap());
        }
        let p1 = parse_policy_file("allow <- reader-is(org/charlie)\nallow <- reader-is(org/ellen)\n").unwrap();
        m.apply_change(m.set_policies(&c1, p1).unwrap());
        m.apply_change(m.set_policies(&c2, parse_policy_file(c2_policy).unwrap()).unwrap());
        let msg =
            m.create_message(MessageId::new("org/m").unwrap(), &alice, "m", [c1].into(), BTreeSet::new()).unwrap();
        (m, msg)
    }

    #[test]
    fn bob_allowed_by_membership_at_tag() {
        let (m, msg) = nested_groups("");
        let d = check_access(&m, &msg, &uid("org/bob"), EvalMode::MembershipAnchored);
        assert_eq!(
            d,
            AccessDecision::Allow {
                chain: vec!["org/alice~C1".parse().unwrap()],
                cause: AllowCause::Membership { circle: "org/alice~C1".parse().unwrap() }
            }
        );
    }

    #[test]
    fn charlie_allowed_one_step_up() {
        let (m, msg) = nested_groups("");
        for mode in [EvalMode::MembershipAnchored, EvalMode::PolicyChain] {
            let d = check_access(&m, &msg, &uid("org/charlie"), mode);
            assert_eq!(
                d,
                AccessDecision::Allow {
                    chain: vec!["org/alice~C1".parse().unwrap(), "org/alice~C2".parse().unwrap()],
                    cause: AllowCause::Membership { circle: "org/alice~C2".parse().unwrap() }
                }
            );
        }
    }

    #[test]
    fn ellen_depends_on_mode_when_she_satisfies_both() {
        let (m, msg) = nested_groups("allow <- reader-is(org/ellen)");
        let ellen = uid("org/ellen");
        assert!(check_access(&m, &msg, &ellen, EvalMode::PolicyChain).is_allow());
        let d = check_access(&m, &msg, &ellen, EvalMode::MembershipAnchored);
        assert!(matches!(
            d,
            AccessDecision::Deny { cause: DenyCause::TagsExhausted { ref stops, .. } }
                if stops[0].reason == StopReason::RootReached
        ));
    }

    #[test]
    fn ellen_denied_when_only_inner_policy_holds() {
        let (m, msg) = nested_groups("");
        for mode in [EvalMode::MembershipAnchored, EvalMode::PolicyChain] {
            assert!(!check_access(&m, &msg, &uid("org/ellen"), mode).is_allow());
        }
    }

    #[test]
    fn conflict_checked_before_tags() {
        let (mut m, mut msg) = nested_groups("");
        let alice = uid("org/alice");
        let blocked = m.apply_change(m.create_private_group(&alice, "blocked", None).unwrap()).id;
        m.apply_change(m.add_member(&blocked, &uid("org/bob")).unwrap());
        msg.conflicts.insert(blocked.clone());
        assert_eq!(
            check_access(&m, &msg, &uid("org/bob"), EvalMode::PolicyChain),
            AccessDecision::Deny { cause: DenyCause::Conflict { circle: blocked } }
        );
    }

    #[test]
    fn no_tags_denies_everyone_but_author() {
        let (m, mut msg) = nested_groups("");
        msg.tags.clear();
        assert!(!check_access(&m, &msg, &uid("org/bob"), EvalMode::PolicyChain).is_allow());
        assert_eq!(
            check_access(&m, &msg, &uid("org/alice"), EvalMode::PolicyChain),
            AccessDecision::Allow { chain: vec![], cause: AllowCause::Author }
        );
    }

    #[test]
    fn unresolvable_tag_skipped_and_conflict_ignored() {
        let (m, mut msg) = nested_groups("");
        msg.tags.insert("org/ghost".parse().unwrap());
        msg.conflicts.insert("org/ghost2".parse().unwrap());
        assert!(check_access(&m, &msg, &uid("org/bob"), EvalMode::PolicyChain).is_allow());
        let d = check_access(&m, &msg, &uid("org/ellen"), EvalMode::PolicyChain);
        match d {
            AccessDecision::Deny { cause: DenyCause::TagsExhausted { skipped, .. } } => {
                assert_eq!(skipped, vec!["org/ghost".parse::<CircleId>().unwrap()])
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn loop_in_replicated_state_denies() {
        let (mut m, msg) = nested_groups("allow <- reader-is(org/ellen)");
        let mut c2 = m.circle(&"org/alice~C2".parse().unwrap()).unwrap().clone();
        c2.parent = Some("org/alice~C1".parse().unwrap());
        m.apply_event(crate::model::MeshEvent::Circle(c2));
        let d = check_access(&m, &msg, &uid("org/ellen"), EvalMode::PolicyChain);
        assert!(matches!(
            d,
            AccessDecision::Deny { cause: DenyCause::TagsExhausted { ref stops, .. } }
                if stops[0].reason == StopReason::LoopDetected
        ));
    }

    #[test]
    fn audience_of_single_tag_is_its_members() {
        let (m, msg) = nested_groups("");
        let c1 = m.circle(&"org/alice~C1".parse().unwrap()).unwrap();
        let aud = compute_audience(&m, &msg, &c1.members, EvalMode::PolicyChain);
        assert_eq!(aud, c1.members);
        assert!(compute_audience(&m, &msg, &BTreeSet::new(), EvalMode::PolicyChain).is_empty());
    }

    #[test]
    fn merged_chains_keep_witness() {
        // two tags that share C2: the second ascent reuses the cached tail
        let (mut m, mut msg) = nested_groups("");
        let alice = uid("org/alice");
        let c2: CircleId = "org/alice~C2".parse().unwrap();
        let c3 = m.apply_change(m.create_private_group(&alice, "C3", Some(&c2)).unwrap()).id;
        m.apply_change(m.add_member(&c3, &alice).unwrap());
        m.apply_change(
            m.set_policies(
                &c3,
                PolicySet::new(vec![crate::policy::parse_rule("allow <- reader-is(org/charlie)").unwrap()]),
            )
            .unwrap(),
        );
        msg.tags.insert(c3.clone());
        let eval = Evaluator::new(&m, &msg, EvalMode::PolicyChain);
        let d = eval.decide(&uid("org/charlie"));
        assert!(d.is_allow());
        if let AccessDecision::Allow { chain, .. } = d {
            assert_eq!(chain.last(), Some(&c2));
        }
    }
}
