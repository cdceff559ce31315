//! Blocking HTTP client for the `/api/v1/` surface, used by `prism admin`.

use std::collections::BTreeSet;
use std::time::Duration;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

use crate::gateway::http::{FollowRequest, LoginRequest, PostRequest};
use crate::gateway::{AdminCommand, CommandCategory, InboxItem, PostReceipt, SessionToken};
use crate::ids::{CircleId, MessageId, UserId};
use crate::model::Message;

#[derive(Debug, thiserror::Error)]
pub enum ClientError {
    #[error("request failed: {0}")]
    Http(#[from] reqwest::Error),
    /// Error body returned by the server.
    #[error("{status} {kind}: {message}")]
    Api { status: u16, kind: String, message: String },
}

pub struct Client {
    base: String,
    http: reqwest::blocking::Client,
    token: Option<String>,
}

impl Client {
    pub fn new(base: impl Into<String>) -> Result<Self, ClientError> {
        let http = reqwest::blocking::Client::builder().timeout(Duration::from_secs(30)).build()?;
        Ok(Self { base: base.into().trim_end_matches('/').to_string(), http, token: None })
    }

    pub fn with_token(mut self, token: impl Into<String>) -> Self {
        self.token = Some(token.into());
        self
    }

    pub fn login(&mut self, user: &UserId, password: &str) -> Result<SessionToken, ClientError> {
        let t: SessionToken = self.send(
            "POST",
            "/api/v1/session",
            Some(&LoginRequest { user: user.clone(), password: password.into() }),
        )?;
        self.token = Some(t.token.clone());
        Ok(t)
    }

    fn send<B: Serialize, T: DeserializeOwned>(
        &self,
        method: &str,
        path: &str,
        body: Option<&B>,
    ) -> Result<T, ClientError> {
        let url = format!("{}{}", self.base, path);
        let mut req = match method {
            "GET" => self.http.get(url),
            _ => self.http.post(url),
        };
        if let Some(t) = &self.token {
            req = req.bearer_auth(t);
        }
        if let Some(b) = body {
            req = req.json(b);
        }
        let resp = req.send()?;
        let status = resp.status().as_u16();
        if resp.status().is_success() {
            return Ok(resp.json()?);
        }
        let v: Value = resp.json().unwrap_or(Value::Null);
        Err(ClientError::Api {
            status,
            kind: v["error"].as_str().unwrap_or("unknown").to_string(),
            message: v["message"].as_str().unwrap_or_default().to_string(),
        })
    }

    /// Sends an admin command to the endpoint serving its category.
    pub fn admin(&self, cmd: &AdminCommand) -> Result<Value, ClientError> {
        let path = match cmd.category() {
            CommandCategory::Users => "/api/v1/users",
            CommandCategory::Circles => "/api/v1/circles",
            CommandCategory::Roles => "/api/v1/roles",
            CommandCategory::Privileges => "/api/v1/privileges",
            CommandCategory::Pairing => "/api/v1/admin/pair",
            CommandCategory::Follow => {
                let AdminCommand::Follow { target, following } = cmd else { unreachable!("follow category") };
                return self.follow(target, *following);
            }
        };
        self.send("POST", path, Some(cmd))
    }

    pub fn follow(&self, target: &UserId, following: bool) -> Result<Value, ClientError> {
        self.send("POST", "/api/v1/follow", Some(&FollowRequest { target: target.clone(), following }))
    }

    pub fn post(
        &self,
        content: &str,
        tags: BTreeSet<CircleId>,
        conflicts: BTreeSet<CircleId>,
    ) -> Result<PostReceipt, ClientError> {
        self.send("POST", "/api/v1/messages", Some(&PostRequest { content: content.into(), tags, conflicts }))
    }

    pub fn fetch(&self, mid: &MessageId) -> Result<Message, ClientError> {
        self.send::<(), _>("GET", &format!("/api/v1/messages/{mid}"), None)
    }

    pub fn inbox(&self) -> Result<Vec<InboxItem>, ClientError> {
        self.send::<(), _>("GET", "/api/v1/inbox", None)
    }
}
