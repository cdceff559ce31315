//! Declarative scenario files: a list of API calls against an in-process
//! cluster, with expectations checked along the way.
//!
//! ```toml
//! asns = ["A", "B"]
//! pair = "all"
//!
//! [[step]]
//! op = "register"
//! user = "A/alice"
//!
//! [[step]]
//! op = "post"
//! as = "A/alice"
//! content = "hello"
//! label = "m1"
//!
//! [[step]]
//! op = "fetch"
//! as = "B/bob"
//! message = "m1"
//! expect = "deny"
//! ```
//!
//! Messages are referred to by the label given when posting.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use serde::Deserialize;

use crate::cluster::{Cluster, ClusterOptions, ADMIN};
use crate::fipm::EvalMode;
use crate::gateway::{AdminCommand, GatewayError, ModerationResult, PostStatus};
use crate::ids::{AsnId, CircleId, MessageId, UserId};

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub asns: Vec<AsnId>,
    #[serde(default)]
    pub mode: EvalMode,
    #[serde(default = "default_width")]
    pub pool_width: usize,
    #[serde(default)]
    pub pair: Pairing,
    #[serde(default, rename = "step")]
    pub steps: Vec<Step>,
}

fn default_width() -> usize {
    4
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(untagged)]
pub enum Pairing {
    #[default]
    None,
    All(AllKeyword),
    Pairs(Vec<(AsnId, AsnId)>),
}

#[derive(Debug, Clone, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AllKeyword {
    All,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Allow,
    Deny,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "op", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Step {
    Register {
        user: UserId,
        #[serde(default = "default_password")]
        password: String,
    },
    /// Runs an admin command as `as`, or as the ASN administrator of `asn`.
    Admin {
        #[serde(default, rename = "as")]
        actor: Option<UserId>,
        #[serde(default)]
        asn: Option<AsnId>,
        command: AdminCommand,
        /// Error kind the command must fail with.
        #[serde(default)]
        expect_error: Option<String>,
    },
    Pair {
        a: AsnId,
        b: AsnId,
    },
    Follow {
        #[serde(rename = "as")]
        actor: UserId,
        target: UserId,
        #[serde(default = "yes")]
        following: bool,
    },
    Post {
        #[serde(rename = "as")]
        actor: UserId,
        #[serde(default = "default_content")]
        content: String,
        #[serde(default)]
        tags: BTreeSet<CircleId>,
        #[serde(default)]
        conflicts: BTreeSet<CircleId>,
        label: String,
        /// `published`, `pending`, or an error kind.
        #[serde(default)]
        expect: Option<String>,
    },
    Fetch {
        #[serde(rename = "as")]
        actor: UserId,
        message: String,
        expect: Verdict,
    },
    Moderate {
        #[serde(rename = "as")]
        actor: UserId,
        message: String,
        approve: bool,
        #[serde(default)]
        expect: Option<String>,
    },
    /// Waits until background propagation is idle everywhere.
    Flush,
    Inbox {
        #[serde(rename = "as")]
        actor: UserId,
        #[serde(default)]
        contains: Vec<String>,
        #[serde(default)]
        excludes: Vec<String>,
        /// Exact inbox size.
        #[serde(default)]
        count: Option<usize>,
    },
    SetDown {
        asn: AsnId,
        down: bool,
    },
}

fn default_password() -> String {
    "password".into()
}
fn default_content() -> String {
    "message".into()
}
fn yes() -> bool {
    true
}

#[derive(Debug, thiserror::Error)]
pub enum ScenarioError {
    #[error("reading scenario: {0}")]
    Io(#[from] std::io::Error),
    #[error("parsing scenario: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("setting up cluster: {0}")]
    Setup(GatewayError),
    #[error("step {index}: {message}")]
    Step { index: usize, message: String },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StepFailure {
    pub index: usize,
    pub message: String,
}

impl fmt::Display for StepFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "step {}: {}", self.index, self.message)
    }
}

#[derive(Debug, Default)]
pub struct ScenarioReport {
    pub steps: usize,
    pub failures: Vec<StepFailure>,
    pub messages: BTreeMap<String, MessageId>,
}

impl ScenarioReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

impl Scenario {
    pub fn from_toml(text: &str) -> Result<Self, ScenarioError> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    /// Runs every step on a fresh cluster. Unmet expectations are collected
    /// as failures; a step that cannot run at all (unknown label, unknown
    /// user) aborts.
    pub fn run(&self) -> Result<ScenarioReport, ScenarioError> {
        let opts = ClusterOptions { mode: self.mode, pool_width: self.pool_width, ..ClusterOptions::default() };
        let cluster = Cluster::new(&self.asns, opts).map_err(ScenarioError::Setup)?;
        match &self.pair {
            Pairing::None => {}
            Pairing::All(_) => cluster.pair_all().map_err(ScenarioError::Setup)?,
            Pairing::Pairs(ps) => {
                for (a, b) in ps {
                    cluster.pair(a, b).map_err(ScenarioError::Setup)?;
                }
            }
        }
        let mut run = Runner { cluster, tokens: BTreeMap::new(), report: ScenarioReport::default() };
        for (index, step) in self.steps.iter().enumerate() {
            run.step(step)
                .map_err(|message| ScenarioError::Step { index, message })?
                .into_iter()
                .for_each(|message| run.report.failures.push(StepFailure { index, message }));
            run.report.steps += 1;
        }
        Ok(run.report)
    }
}

struct Runner {
    cluster: Cluster,
    tokens: BTreeMap<UserId, String>,
    report: ScenarioReport,
}

type StepResult = Result<Option<String>, String>;

fn outcome<T>(r: &Result<T, GatewayError>, ok: &str) -> String {
    match r {
        Ok(_) => ok.to_string(),
        Err(e) => e.kind().to_string(),
    }
}

impl Runner {
    fn token(&self, user: &UserId) -> Result<&str, String> {
        if user.local() == ADMIN {
            if let Some(m) = self.cluster.asns().find(|a| **a == user.asn()) {
                return Ok(&self.cluster.member(m).admin_token);
            }
        }
        self.tokens
            .get(user)
            .map(String::as_str)
            .ok_or_else(|| format!("user {user} was not registered by this scenario"))
    }

    fn label(&self, l: &str) -> Result<MessageId, String> {
        self.report.messages.get(l).cloned().ok_or_else(|| format!("unknown message label {l:?}"))
    }

    fn asn(&self, a: &AsnId) -> Result<(), String> {
        if self.cluster.asns().any(|x| x == a) {
            Ok(())
        } else {
            Err(format!("asn {a} is not part of the scenario"))
        }
    }

    fn step(&mut self, step: &Step) -> StepResult {
        match step {
            Step::Register { user, password } => {
                self.asn(&user.asn())?;
                let t = self.cluster.register(user, password).map_err(|e| format!("register {user}: {e}"))?;
                self.tokens.insert(user.clone(), t);
                Ok(None)
            }
            Step::Admin { actor, asn, command, expect_error } => {
                let (gw, token) = match (actor, asn) {
                    (Some(u), _) => (self.gateway(&u.asn())?, self.token(u)?.to_string()),
                    (None, Some(a)) => {
                        self.asn(a)?;
                        (self.cluster.gateway(a).clone(), self.cluster.member(a).admin_token.clone())
                    }
                    (None, None) => return Err("admin step needs `as` or `asn`".into()),
                };
                let r = gw.handle_admin(&token, command.clone());
                Ok(match (expect_error, &r) {
                    (None, Err(e)) => Some(format!("admin command failed: {e}")),
                    (Some(k), _) if outcome(&r, "ok") != *k => {
                        Some(format!("expected error {k}, got {}", outcome(&r, "ok")))
                    }
                    _ => None,
                })
            }
            Step::Pair { a, b } => {
                self.asn(a)?;
                self.asn(b)?;
                Ok(self.cluster.pair(a, b).err().map(|e| format!("pairing {a} and {b}: {e}")))
            }
            Step::Follow { actor, target, following } => {
                let gw = self.gateway(&actor.asn())?;
                let r = gw.follow(self.token(actor)?, target, *following);
                Ok(r.err().map(|e| format!("{actor} following {target}: {e}")))
            }
            Step::Post { actor, content, tags, conflicts, label, expect } => {
                let gw = self.gateway(&actor.asn())?;
                let r = gw.handle_post(self.token(actor)?, content, tags.clone(), conflicts.clone());
                let got = match &r {
                    Ok(rc) if rc.status == PostStatus::Pending => "pending".to_string(),
                    _ => outcome(&r, "published"),
                };
                if let Ok(rc) = r {
                    self.report.messages.insert(label.clone(), rc.id);
                }
                let want = expect.as_deref().unwrap_or("published");
                Ok((got != want).then(|| format!("post {label:?}: expected {want}, got {got}")))
            }
            Step::Fetch { actor, message, expect } => {
                let mid = self.label(message)?;
                let gw = self.gateway(&actor.asn())?;
                let got = match gw.handle_fetch(self.token(actor)?, &mid) {
                    Ok(_) => Verdict::Allow,
                    Err(GatewayError::NotFound) => Verdict::Deny,
                    Err(e) => return Ok(Some(format!("fetch {message:?} as {actor}: {e}"))),
                };
                Ok((got != *expect).then(|| format!("fetch {message:?} as {actor}: expected {expect:?}, got {got:?}")))
            }
            Step::Moderate { actor, message, approve, expect } => {
                let mid = self.label(message)?;
                let gw = self.gateway(&actor.asn())?;
                let r = gw.moderate(self.token(actor)?, &mid, *approve);
                let got = match &r {
                    Ok(ModerationResult::Published) => "published".to_string(),
                    Ok(ModerationResult::StillPending) => "pending".to_string(),
                    Ok(ModerationResult::Rejected) => "rejected".to_string(),
                    Err(e) => e.kind().to_string(),
                };
                Ok(match expect {
                    Some(w) if *w != got => Some(format!("moderate {message:?}: expected {w}, got {got}")),
                    None if r.is_err() => Some(format!("moderate {message:?}: {got}")),
                    _ => None,
                })
            }
            Step::Flush => {
                self.cluster.flush();
                Ok(None)
            }
            Step::Inbox { actor, contains, excludes, count } => {
                let gw = self.gateway(&actor.asn())?;
                let items = gw.inbox(self.token(actor)?).map_err(|e| e.to_string())?;
                let ids: BTreeSet<MessageId> = items.iter().map(|i| i.message.id.clone()).collect();
                let mut problems = Vec::new();
                for l in contains {
                    if !ids.contains(&self.label(l)?) {
                        problems.push(format!("missing {l:?}"));
                    }
                }
                for l in excludes {
                    if ids.contains(&self.label(l)?) {
                        problems.push(format!("unexpected {l:?}"));
                    }
                }
                if let Some(n) = count {
                    if items.len() != *n {
                        problems.push(format!("{} entries, expected {n}", items.len()));
                    }
                }
                Ok((!problems.is_empty()).then(|| format!("inbox of {actor}: {}", problems.join(", "))))
            }
            Step::SetDown { asn, down } => {
                self.asn(asn)?;
                self.cluster.network.set_down(&crate::cluster::endpoint(asn), *down);
                Ok(None)
            }
        }
    }

    fn gateway(&self, asn: &AsnId) -> Result<std::sync::Arc<crate::gateway::Gateway>, String> {
        self.asn(asn)?;
        Ok(self.cluster.gateway(asn).clone())
    }
}
