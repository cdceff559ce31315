//! Per-seed checks shared by the property suites and the acceptance runner.
//! Each returns the first violation found.

use std::collections::BTreeSet;

use prism_core::fipm::{check_access, EvalMode};
use prism_core::ids::{CircleId, UserId};
use prism_core::model::{Mesh, MeshEvent, Message};
use prism_core::policy::{PolicySet, Predicate, Rule, RuleEffect};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{oracle_allows, random_case, Case};

pub const MODES: [EvalMode; 2] = [EvalMode::PolicyChain, EvalMode::MembershipAnchored];

pub type Check = Result<(), String>;

pub fn case(seed: u64) -> (Case, ChaCha8Rng) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = random_case(&mut rng);
    (c, rng)
}

pub fn allowed(c: &Case, m: &Message, mode: EvalMode) -> BTreeSet<UserId> {
    c.users.iter().filter(|u| check_access(&c.mesh, m, u, mode).is_allow()).cloned().collect()
}

pub fn with_extra(m: &Message, tag: Option<CircleId>, conflict: Option<CircleId>) -> Message {
    let mut m = m.clone();
    m.tags.extend(tag);
    m.conflicts.extend(conflict);
    m
}

/// The mesh with every deny rule that mentions `message-tagged-with` dropped.
pub fn without_tag_sensitive_denies(mesh: &Mesh) -> Mesh {
    let mut out = mesh.clone();
    for c in mesh.circles() {
        let kept: Vec<Rule> = c
            .policies
            .rules()
            .iter()
            .filter(|r| {
                r.effect() == RuleEffect::Allow
                    || !r.body().iter().any(|p| matches!(p, Predicate::MessageTaggedWith(_)))
            })
            .cloned()
            .collect();
        let mut x = c.clone();
        x.policies = PolicySet::new(kept);
        out.apply_event(MeshEvent::Circle(x));
    }
    out
}

pub fn oracle_agrees(seed: u64) -> Check {
    let (c, _) = case(seed);
    for mode in MODES {
        for u in &c.users {
            let got = check_access(&c.mesh, &c.message, u, mode).is_allow();
            if got != oracle_allows(&c.mesh, &c.message, u, mode) {
                return Err(format!("seed {seed}: reader {u} mode {mode:?}: engine says {got}"));
            }
        }
    }
    Ok(())
}

/// A member of any resolvable conflict circle other than the author is
/// denied, whatever the tags and policies say.
pub fn conflict_dominates(seed: u64) -> Check {
    let (c, mut rng) = case(seed);
    let mut m = c.message.clone();
    let spare: Vec<&CircleId> = c.circles.iter().filter(|x| !m.tags.contains(*x)).collect();
    if let Some(x) = spare.choose(&mut rng) {
        m.conflicts.insert((*x).clone());
    }
    for mode in MODES {
        for u in &c.users {
            let barred = m.conflicts.iter().any(|x| c.mesh.circle(x).is_some_and(|x| x.members.contains(u)));
            if barred && u != &m.author && check_access(&c.mesh, &m, u, mode).is_allow() {
                return Err(format!("seed {seed}: {u} allowed despite conflict ({mode:?})"));
            }
        }
    }
    Ok(())
}

/// Adding a conflict circle never grants access.
pub fn conflict_monotone(seed: u64) -> Check {
    let (c, mut rng) = case(seed);
    let spare: Vec<&CircleId> = c.circles.iter().filter(|x| !c.message.tags.contains(*x)).collect();
    let Some(extra) = spare.choose(&mut rng).map(|x| (*x).clone()) else { return Ok(()) };
    for mode in MODES {
        let base = allowed(&c, &c.message, mode);
        let more = allowed(&c, &with_extra(&c.message, None, Some(extra.clone())), mode);
        if !more.is_subset(&base) {
            return Err(format!("seed {seed}: conflict {extra} added readers ({mode:?})"));
        }
    }
    Ok(())
}

/// Adding a tag never takes access away. With `tag_blind_denies` the deny
/// rules that test tags are dropped first; without it the property does not
/// hold for the full rule language.
pub fn tag_monotone(seed: u64, tag_blind_denies: bool) -> Check {
    let (mut c, mut rng) = case(seed);
    if tag_blind_denies {
        c.mesh = without_tag_sensitive_denies(&c.mesh);
    }
    let spare: Vec<&CircleId> = c.circles.iter().filter(|x| !c.message.conflicts.contains(*x)).collect();
    let Some(extra) = spare.choose(&mut rng).map(|x| (*x).clone()) else { return Ok(()) };
    for mode in MODES {
        let base = allowed(&c, &c.message, mode);
        let more = allowed(&c, &with_extra(&c.message, Some(extra.clone()), None), mode);
        if !base.is_subset(&more) {
            return Err(format!("seed {seed}: tag {extra} removed readers ({mode:?})"));
        }
    }
    Ok(())
}
