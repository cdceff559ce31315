//! Instance configuration file (TOML).
//!
//! ```toml
//! listen = "127.0.0.1:8080"
//! asn = "hospital"
//! data_dir = "/var/lib/prism/hospital"
//! mode = "policy-chain"
//! pool_width = 4
//! ```

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use serde::Deserialize;

use crate::federation::{HttpTransport, RetryPolicy};
use crate::fipm::EvalMode;
use crate::gateway::{auth, Gateway, GatewayConfig};
use crate::ids::AsnId;
use crate::node::{Node, NodeConfig, NodeError};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("parsing {path}: {source}")]
    Parse { path: PathBuf, source: toml::de::Error },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub listen: SocketAddr,
    pub asn: AsnId,
    pub data_dir: PathBuf,
    #[serde(default)]
    pub mode: EvalMode,
    #[serde(default = "default_pool_width")]
    pub pool_width: usize,
    /// Base URL peers use to reach this instance. Defaults to `http://<listen>`.
    #[serde(default)]
    pub endpoint: Option<String>,
    #[serde(default = "default_admin")]
    pub admin_user: String,
    /// Only used the first time the data directory is initialised.
    #[serde(default)]
    pub admin_password: Option<String>,
    /// Name of the main subdomain. Defaults to the ASN id.
    #[serde(default)]
    pub main_subdomain: Option<String>,
    #[serde(default = "yes")]
    pub fsync: bool,
    #[serde(default = "default_propagators")]
    pub propagators: usize,
    #[serde(default = "default_ttl")]
    pub profile_ttl_secs: u64,
    #[serde(default = "default_token_ttl")]
    pub token_ttl_secs: u64,
    #[serde(default = "default_timeout")]
    pub request_timeout_ms: u64,
    #[serde(default)]
    pub retry: RetryPolicy,
}

fn default_pool_width() -> usize {
    4
}
fn default_admin() -> String {
    "admin".into()
}
fn yes() -> bool {
    true
}
fn default_propagators() -> usize {
    2
}
fn default_ttl() -> u64 {
    60
}
fn default_token_ttl() -> u64 {
    3600
}
fn default_timeout() -> u64 {
    5000
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self, toml::de::Error> {
        toml::from_str(text)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.into(), source })?;
        let cfg = Self::from_toml(&text).map_err(|source| ConfigError::Parse { path: path.into(), source })?;
        cfg.check()?;
        Ok(cfg)
    }

    fn check(&self) -> Result<(), ConfigError> {
        if self.pool_width == 0 {
            return Err(ConfigError::Invalid("pool_width must be at least 1".into()));
        }
        if self.propagators == 0 {
            return Err(ConfigError::Invalid("propagators must be at least 1".into()));
        }
        if self.retry.max_attempts == 0 {
            return Err(ConfigError::Invalid("retry.max_attempts must be at least 1".into()));
        }
        Ok(())
    }

    pub fn endpoint(&self) -> String {
        self.endpoint.clone().unwrap_or_else(|| format!("http://{}", self.listen))
    }

    pub fn node_config(&self) -> NodeConfig {
        let mut n = NodeConfig::new(self.asn.clone(), self.endpoint());
        n.mode = self.mode;
        n.pool_width = self.pool_width;
        n.retry = self.retry;
        n.profile_ttl = Duration::from_secs(self.profile_ttl_secs);
        n.fsync = self.fsync;
        n
    }

    /// Opens the store, bootstraps a fresh instance and wires up HTTP federation.
    pub fn open(&self) -> Result<Arc<Gateway>, NodeError> {
        let transport = Arc::new(HttpTransport::new(Duration::from_millis(self.request_timeout_ms)));
        let node = Node::open(self.node_config(), &self.data_dir, transport)?;
        let fresh = node.read().mesh().asn(&self.asn).is_none();
        if fresh {
            let password = self.admin_password.as_deref().ok_or_else(|| {
                NodeError::BadRequest("admin_password is required to initialise a new instance".into())
            })?;
            let main = self.main_subdomain.clone().unwrap_or_else(|| self.asn.to_string());
            node.bootstrap(&self.admin_user, auth::hash_password(password), &main)?;
        }
        let gw = GatewayConfig { token_ttl: Duration::from_secs(self.token_ttl_secs), propagators: self.propagators };
        Ok(Gateway::new(node, gw))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_file_gets_defaults() {
        let c = Config::from_toml("listen = \"127.0.0.1:9000\"\nasn = \"A\"\ndata_dir = \"/tmp/a\"\n").unwrap();
        assert_eq!(c.mode, EvalMode::PolicyChain);
        assert_eq!(c.pool_width, 4);
        assert_eq!(c.endpoint(), "http://127.0.0.1:9000");
        assert_eq!(c.retry, RetryPolicy::default());
    }

    #[test]
    fn full_file() {
        let c = Config::from_toml(
            r#"
listen = "0.0.0.0:8443"
asn = "hospital"
data_dir = "data"
mode = "membership-anchored"
pool_width = 8
endpoint = "https://hospital.example"
admin_password = "pw"
main_subdomain = "Hospital"
fsync = false
[retry]
max_attempts = 2
base_delay = 10
max_delay = 100
"#,
        )
        .unwrap();
        assert_eq!(c.mode, EvalMode::MembershipAnchored);
        assert_eq!(c.retry.base_delay, Duration::from_millis(10));
        assert_eq!(c.node_config().endpoint, "https://hospital.example");
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(Config::from_toml("listen = \"127.0.0.1:1\"\nasn = \"A\"\ndata_dir = \"d\"\nwidth = 3\n").is_err());
    }

    #[test]
    fn bootstraps_once() {
        let dir = tempfile::tempdir().unwrap();
        let text = format!(
            "listen = \"127.0.0.1:1\"\nasn = \"A\"\ndata_dir = {:?}\nadmin_password = \"pw\"\nfsync = false\n",
            dir.path()
        );
        let c = Config::from_toml(&text).unwrap();
        let gw = c.open().unwrap();
        assert!(gw.login(&"A/admin".parse().unwrap(), "pw").is_ok());
        drop(gw);
        let mut c2 = c.clone();
        c2.admin_password = None;
        let gw = c2.open().unwrap();
        assert!(gw.login(&"A/admin".parse().unwrap(), "pw").is_ok());
    }
}
