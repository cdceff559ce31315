//! Circle policy rules.
//!
//! A rule is `allow|deny <- pred and pred and ...`; a policy set is an
//! ordered list of rules combined deny-overrides, closed by default.
//!
//! ```text
//! # one rule per line, '#' starts a comment
//! allow <- reader-member-of(org/C2)
//! deny <- reader-is(org/mallory) and message-tagged-with(org/C1)
//! ```

mod eval;
mod parse;

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::ids::{AsnId, CircleId, UserId};

pub use eval::{evaluate_policy_set, evaluate_predicate, evaluate_rule, AccessContext, MembershipOracle};
pub use parse::{parse_policy_file, parse_rule, ParseError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RuleEffect {
    Allow,
    Deny,
}

impl RuleEffect {
    pub fn keyword(self) -> &'static str {
        match self {
            RuleEffect::Allow => "allow",
            RuleEffect::Deny => "deny",
        }
    }
}

/// A single message/author/reader property check. The argument type is fixed
/// by the variant, so a mismatched argument cannot be represented.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", content = "arg", rename_all = "kebab-case")]
pub enum Predicate {
    AuthorIs(UserId),
    ReaderIs(UserId),
    AuthorMemberOf(CircleId),
    ReaderMemberOf(CircleId),
    MessageTaggedWith(CircleId),
    ReaderInAsn(AsnId),
    AuthorInAsn(AsnId),
}

impl Predicate {
    pub const KINDS: [&'static str; 7] = [
        "author-is",
        "reader-is",
        "author-member-of",
        "reader-member-of",
        "message-tagged-with",
        "reader-in-asn",
        "author-in-asn",
    ];

    pub fn kind(&self) -> &'static str {
        match self {
            Predicate::AuthorIs(_) => "author-is",
            Predicate::ReaderIs(_) => "reader-is",
            Predicate::AuthorMemberOf(_) => "author-member-of",
            Predicate::ReaderMemberOf(_) => "reader-member-of",
            Predicate::MessageTaggedWith(_) => "message-tagged-with",
            Predicate::ReaderInAsn(_) => "reader-in-asn",
            Predicate::AuthorInAsn(_) => "author-in-asn",
        }
    }

    pub fn argument(&self) -> &str {
        match self {
            Predicate::AuthorIs(u) | Predicate::ReaderIs(u) => u.as_str(),
            Predicate::AuthorMemberOf(c) | Predicate::ReaderMemberOf(c) | Predicate::MessageTaggedWith(c) => c.as_str(),
            Predicate::ReaderInAsn(a) | Predicate::AuthorInAsn(a) => a.as_str(),
        }
    }

    /// Circle referenced by a membership predicate, if any.
    pub fn membership_circle(&self) -> Option<&CircleId> {
        match self {
            Predicate::AuthorMemberOf(c) | Predicate::ReaderMemberOf(c) => Some(c),
            _ => None,
        }
    }
}

impl fmt::Display for Predicate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}({})", self.kind(), self.argument())
    }
}

/// `effect <- body[0] and body[1] and ...`; the body is never empty.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Rule {
    effect: RuleEffect,
    body: Vec<Predicate>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("rule body must contain at least one predicate")]
pub struct EmptyBody;

impl Rule {
    pub fn new(effect: RuleEffect, body: Vec<Predicate>) -> Result<Self, EmptyBody> {
        if body.is_empty() {
            return Err(EmptyBody);
        }
        Ok(Self { effect, body })
    }

    pub fn allow(body: Vec<Predicate>) -> Result<Self, EmptyBody> {
        Self::new(RuleEffect::Allow, body)
    }

    pub fn deny(body: Vec<Predicate>) -> Result<Self, EmptyBody> {
        Self::new(RuleEffect::Deny, body)
    }

    pub fn effect(&self) -> RuleEffect {
        self.effect
    }

    pub fn body(&self) -> &[Predicate] {
        &self.body
    }
}

impl fmt::Display for Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} <-", self.effect.keyword())?;
        for (i, p) in self.body.iter().enumerate() {
            if i > 0 {
                f.write_str(" and")?;
            }
            write!(f, " {p}")?;
        }
        Ok(())
    }
}

impl TryFrom<String> for Rule {
    type Error = ParseError;
    fn try_from(value: String) -> Result<Self, Self::Error> {
        parse_rule(&value)
    }
}

impl From<Rule> for String {
    fn from(r: Rule) -> Self {
        r.to_string()
    }
}

/// Canonical one-line form of a rule.
pub fn print_rule(rule: &Rule) -> String {
    rule.to_string()
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PolicySet {
    rules: Vec<Rule>,
}

impl PolicySet {
    pub fn new(rules: Vec<Rule>) -> Self {
        Self { rules }
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn rules(&self) -> &[Rule] {
        &self.rules
    }

    pub fn push(&mut self, rule: Rule) {
        self.rules.push(rule);
    }

    pub fn is_empty(&self) -> bool {
        self.rules.is_empty()
    }

    pub fn len(&self) -> usize {
        self.rules.len()
    }

    /// Circles named by membership predicates anywhere in the set.
    pub fn referenced_circles(&self) -> impl Iterator<Item = &CircleId> {
        self.rules.iter().flat_map(|r| r.body.iter()).filter_map(Predicate::membership_circle)
    }

    /// Renders the policy file form: one canonical rule per line.
    pub fn to_policy_file(&self) -> String {
        let mut out = String::new();
        for r in &self.rules {
            out.push_str(&r.to_string());
            out.push('\n');
        }
        out
    }
}

impl FromIterator<Rule> for PolicySet {
    fn from_iter<T: IntoIterator<Item = Rule>>(iter: T) -> Self {
        Self { rules: iter.into_iter().collect() }
    }
}
