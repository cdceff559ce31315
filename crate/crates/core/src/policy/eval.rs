use crate::ids::{CircleId, UserId};
use crate::model::Message;

use super::{PolicySet, Predicate, Rule, RuleEffect};

/// Answers circle membership questions during evaluation.
pub trait MembershipOracle {
    /// `None` when the circle cannot be resolved (deleted, or never replicated here).
    fn is_member(&self, circle: &CircleId, user: &UserId) -> Option<bool>;
}

/// Evaluation environment for predicates. `message` is absent when a policy
/// gates something other than a read, such as joining a group.
#[derive(Clone, Copy)]
pub struct AccessContext<'a> {
    pub message: Option<&'a Message>,
    pub reader: &'a UserId,
    pub membership: &'a dyn MembershipOracle,
}

impl<'a> AccessContext<'a> {
    pub fn new(message: &'a Message, reader: &'a UserId, membership: &'a dyn MembershipOracle) -> Self {
        Self { message: Some(message), reader, membership }
    }

    pub fn without_message(reader: &'a UserId, membership: &'a dyn MembershipOracle) -> Self {
        Self { message: None, reader, membership }
    }

    fn member(&self, circle: &CircleId, user: &UserId) -> bool {
        match self.membership.is_member(circle, user) {
            Some(b) => b,
            None => {
                tracing::warn!(%circle, "dangling circle reference in policy evaluates to false");
                false
            }
        }
    }
}

pub fn evaluate_predicate(p: &Predicate, ctx: &AccessContext<'_>) -> bool {
    let author = ctx.message.map(|m| &m.author);
    match p {
        Predicate::AuthorIs(u) => author == Some(u),
        Predicate::ReaderIs(u) => ctx.reader == u,
        Predicate::AuthorMemberOf(c) => author.is_some_and(|a| ctx.member(c, a)),
        Predicate::ReaderMemberOf(c) => ctx.member(c, ctx.reader),
        Predicate::MessageTaggedWith(c) => ctx.message.is_some_and(|m| m.tags.contains(c)),
        Predicate::ReaderInAsn(a) => ctx.reader.asn() == *a,
        Predicate::AuthorInAsn(a) => author.is_some_and(|u| u.asn() == *a),
    }
}

/// True when every predicate of the body holds.
pub fn evaluate_rule(rule: &Rule, ctx: &AccessContext<'_>) -> bool {
    rule.body().iter().all(|p| evaluate_predicate(p, ctx))
}

/// Deny-overrides, any allow grants, an empty set is never satisfied.
pub fn evaluate_policy_set(set: &PolicySet, ctx: &AccessContext<'_>) -> bool {
    let mut allowed = false;
    for rule in set.rules() {
        if evaluate_rule(rule, ctx) {
            match rule.effect() {
                RuleEffect::Deny => return false,
                RuleEffect::Allow => allowed = true,
            }
        }
    }
    allowed
}
