use crate::ids::{AsnId, CircleId, UserId};

use super::{PolicySet, Predicate, Rule, RuleEffect};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ParseError {
    #[error("syntax error at line {line}, column {column}: {message}")]
    Syntax { line: usize, column: usize, message: String },
    #[error("unknown predicate kind {kind:?} at line {line}, column {column}")]
    UnknownPredicateKind { line: usize, column: usize, kind: String },
}

impl ParseError {
    /// 1-based column of the offending input.
    pub fn column(&self) -> usize {
        match self {
            ParseError::Syntax { column, .. } | ParseError::UnknownPredicateKind { column, .. } => *column,
        }
    }

    fn at_line(self, line: usize) -> Self {
        match self {
            ParseError::Syntax { column, message, .. } => ParseError::Syntax { line, column, message },
            ParseError::UnknownPredicateKind { column, kind, .. } => {
                ParseError::UnknownPredicateKind { line, column, kind }
            }
        }
    }
}

struct Cursor<'a> {
    src: &'a str,
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn new(src: &'a str) -> Self {
        Self { src, pos: 0 }
    }

    fn err(&self, at: usize, message: impl Into<String>) -> ParseError {
        ParseError::Syntax { line: 1, column: at + 1, message: message.into() }
    }

    fn rest(&self) -> &'a str {
        &self.src[self.pos..]
    }

    fn skip_ws(&mut self) {
        let trimmed = self.rest().trim_start();
        self.pos = self.src.len() - trimmed.len();
    }

    fn at_end(&mut self) -> bool {
        self.skip_ws();
        self.pos >= self.src.len()
    }

    fn eat(&mut self, lit: &str) -> bool {
        self.skip_ws();
        if self.rest().starts_with(lit) {
            self.pos += lit.len();
            true
        } else {
            false
        }
    }

    fn expect(&mut self, lit: &str) -> Result<(), ParseError> {
        if self.eat(lit) {
            Ok(())
        } else {
            Err(self.err(self.pos, format!("expected {lit:?}")))
        }
    }

    /// Consumes a run of characters matching `pred`; returns (start, slice).
    fn take_while(&mut self, pred: impl Fn(char) -> bool) -> (usize, &'a str) {
        self.skip_ws();
        let start = self.pos;
        let len = self.rest().find(|c: char| !pred(c)).unwrap_or(self.rest().len());
        self.pos += len;
        (start, &self.src[start..start + len])
    }
}

fn is_word_char(c: char) -> bool {
    c.is_ascii_alphabetic() || c == '-'
}

fn is_arg_char(c: char) -> bool {
    c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.' | '~' | '/')
}

fn parse_predicate(cur: &mut Cursor<'_>) -> Result<Predicate, ParseError> {
    let (kind_at, kind) = cur.take_while(is_word_char);
    if kind.is_empty() {
        return Err(cur.err(kind_at, "expected predicate"));
    }
    if !Predicate::KINDS.contains(&kind) {
        return Err(ParseError::UnknownPredicateKind { line: 1, column: kind_at + 1, kind: kind.to_string() });
    }
    cur.expect("(")?;
    let (arg_at, arg) = cur.take_while(is_arg_char);
    if arg.is_empty() {
        return Err(cur.err(arg_at, "expected predicate argument"));
    }
    let bad = |e: crate::ids::IdError| cur.err(arg_at, e.to_string());
    let pred = match kind {
        "author-is" => Predicate::AuthorIs(UserId::new(arg).map_err(bad)?),
        "reader-is" => Predicate::ReaderIs(UserId::new(arg).map_err(bad)?),
        "author-member-of" => Predicate::AuthorMemberOf(CircleId::new(arg).map_err(bad)?),
        "reader-member-of" => Predicate::ReaderMemberOf(CircleId::new(arg).map_err(bad)?),
        "message-tagged-with" => Predicate::MessageTaggedWith(CircleId::new(arg).map_err(bad)?),
        "reader-in-asn" => Predicate::ReaderInAsn(AsnId::new(arg).map_err(bad)?),
        "author-in-asn" => Predicate::AuthorInAsn(AsnId::new(arg).map_err(bad)?),
        _ => unreachable!("kind checked against catalog"),
    };
    cur.expect(")")?;
    Ok(pred)
}

/// Parses a single rule line.
pub fn parse_rule(text: &str) -> Result<Rule, ParseError> {
    let mut cur = Cursor::new(text);
    let (eff_at, word) = cur.take_while(is_word_char);
    let effect = match word {
        "allow" => RuleEffect::Allow,
        "deny" => RuleEffect::Deny,
        _ => return Err(cur.err(eff_at, "expected \"allow\" or \"deny\"")),
    };
    cur.expect("<-")?;
    if cur.at_end() {
        return Err(cur.err(cur.pos, "rule body must contain at least one predicate"));
    }
    let mut body = vec![parse_predicate(&mut cur)?];
    while !cur.at_end() {
        let (at, word) = cur.take_while(is_word_char);
        if word != "and" {
            return Err(cur.err(at, "expected \"and\" or end of rule"));
        }
        body.push(parse_predicate(&mut cur)?);
    }
    Ok(Rule::new(effect, body).expect("body is non-empty"))
}

/// Parses a policy file: one rule per line, blank lines and `#` comments ignored.
pub fn parse_policy_file(text: &str) -> Result<PolicySet, ParseError> {
    let mut rules = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.split_once('#').map(|(l, _)| l).unwrap_or(raw);
        if line.trim().is_empty() {
            continue;
        }
        rules.push(parse_rule(line).map_err(|e| e.at_line(idx + 1))?);
    }
    Ok(PolicySet::new(rules))
}
