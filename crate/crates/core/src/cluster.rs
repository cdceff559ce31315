//! Several ASN instances in one process, connected by a [`LocalNetwork`].

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::{Arc, Weak};
use std::time::Duration;

use crate::federation::{LocalNetwork, RemoteHandler, RetryPolicy};
use crate::fipm::EvalMode;
use crate::gateway::{auth, AdminCommand, Gateway, GatewayConfig, GatewayError};
use crate::ids::{AsnId, UserId};
use crate::node::{Node, NodeConfig, NodeError};

pub const ADMIN: &str = "admin";
pub const ADMIN_PASSWORD: &str = "admin";

#[derive(Debug, Clone)]
pub struct ClusterOptions {
    pub mode: EvalMode,
    pub pool_width: usize,
    pub propagators: usize,
    pub retry: RetryPolicy,
    pub fsync: bool,
}

impl Default for ClusterOptions {
    fn default() -> Self {
        Self {
            mode: EvalMode::default(),
            pool_width: 4,
            propagators: 2,
            retry: RetryPolicy {
                max_attempts: 3,
                base_delay: Duration::from_millis(5),
                max_delay: Duration::from_millis(50),
            },
            fsync: false,
        }
    }
}

pub struct Member {
    pub node: Arc<Node>,
    pub gateway: Arc<Gateway>,
    pub admin_token: String,
}

pub struct Cluster {
    pub network: Arc<LocalNetwork>,
    members: BTreeMap<AsnId, Member>,
    _dir: tempfile::TempDir,
}

pub fn endpoint(asn: &AsnId) -> String {
    format!("local://{asn}")
}

/// Shared secret used by [`Cluster::pair`]; deterministic so tests can forge
/// or verify signatures.
pub fn link_secret(a: &AsnId, b: &AsnId) -> String {
    let (x, y) = if a < b { (a, b) } else { (b, a) };
    format!("secret-{x}-{y}")
}

fn boot(asn: &AsnId, dir: &Path, opts: &ClusterOptions, network: &Arc<LocalNetwork>) -> Result<Member, GatewayError> {
    let mut cfg = NodeConfig::new(asn.clone(), endpoint(asn));
    cfg.mode = opts.mode;
    cfg.pool_width = opts.pool_width;
    cfg.retry = opts.retry;
    cfg.fsync = opts.fsync;
    let node = Node::open(cfg, dir, network.clone())?;
    node.bootstrap(ADMIN, auth::hash_password(ADMIN_PASSWORD), asn.as_str())?;
    let handler: Arc<dyn RemoteHandler> = node.clone();
    network.register(endpoint(asn), Arc::downgrade(&handler) as Weak<dyn RemoteHandler>);
    let gateway =
        Gateway::new(node.clone(), GatewayConfig { propagators: opts.propagators, ..GatewayConfig::default() });
    let admin = UserId::scoped(asn, ADMIN).expect("valid");
    let admin_token = gateway.login(&admin, ADMIN_PASSWORD)?.token;
    Ok(Member { node, gateway, admin_token })
}

impl Cluster {
    pub fn new(asns: &[AsnId], opts: ClusterOptions) -> Result<Self, GatewayError> {
        let dir = tempfile::tempdir().map_err(|e| GatewayError::Invalid(e.to_string()))?;
        let network = LocalNetwork::new();
        let mut members = BTreeMap::new();
        for asn in asns {
            let member = boot(asn, &dir.path().join(asn.as_str()), &opts, &network)?;
            members.insert(asn.clone(), member);
        }
        Ok(Self { network, members, _dir: dir })
    }

    pub fn asns(&self) -> impl Iterator<Item = &AsnId> {
        self.members.keys()
    }

    pub fn member(&self, asn: &AsnId) -> &Member {
        &self.members[asn]
    }

    pub fn node(&self, asn: &AsnId) -> &Arc<Node> {
        &self.members[asn].node
    }

    pub fn gateway(&self, asn: &AsnId) -> &Arc<Gateway> {
        &self.members[asn].gateway
    }

    pub fn admin(&self, asn: &AsnId, cmd: AdminCommand) -> Result<serde_json::Value, GatewayError> {
        let m = &self.members[asn];
        m.gateway.handle_admin(&m.admin_token, cmd)
    }

    /// Pairs two ASNs from both sides.
    pub fn pair(&self, a: &AsnId, b: &AsnId) -> Result<(), GatewayError> {
        let secret = link_secret(a, b);
        for (x, y) in [(a, b), (b, a)] {
            self.admin(x, AdminCommand::Pair { asn: y.clone(), endpoint: endpoint(y), secret: secret.clone() })?;
        }
        Ok(())
    }

    pub fn pair_all(&self) -> Result<(), GatewayError> {
        let ids: Vec<AsnId> = self.members.keys().cloned().collect();
        for (i, a) in ids.iter().enumerate() {
            for b in &ids[i + 1..] {
                self.pair(a, b)?;
            }
        }
        Ok(())
    }

    /// Registers `user` on its ASN and returns a session token.
    pub fn register(&self, user: &UserId, password: &str) -> Result<String, GatewayError> {
        self.admin(
            &user.asn(),
            AdminCommand::RegisterUser {
                user: user.local().to_string(),
                password: password.into(),
                display_name: None,
            },
        )?;
        self.login(user, password)
    }

    pub fn login(&self, user: &UserId, password: &str) -> Result<String, GatewayError> {
        let m = self.members.get(&user.asn()).ok_or_else(|| NodeError::UnknownUser(user.clone()))?;
        Ok(m.gateway.login(user, password)?.token)
    }

    /// Waits for background propagation on every instance.
    pub fn flush(&self) {
        for m in self.members.values() {
            m.gateway.flush();
        }
    }
}
