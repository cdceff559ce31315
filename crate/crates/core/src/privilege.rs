//! Domain and group privileges.
//!
//! Domain privileges come in three layers, highest precedence first:
//!
//! 1. per-user entries recorded on the operating subdomain,
//! 2. subdomain entries along the ancestor chain, nearest subdomain winning,
//! 3. the union of the user's role closures (nearest role wins inside one
//!    closure, deny wins across roles).
//!
//! An action no layer mentions is denied. On top of the layers two grants can
//! never be revoked: the ASN administrator holds every action in the main
//! subdomain and may administer any subdomain, and a subdomain's founding
//! administrator may always administer it.

use std::borrow::Cow;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::ids::{CircleId, RoleId, UserId};
use crate::model::{CircleKind, Mesh};
use crate::policy::{evaluate_policy_set, AccessContext, PolicySet};

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ActionId(Cow<'static, str>);

impl ActionId {
    pub const CREATE_SUBDOMAIN: ActionId = ActionId::builtin("create-subdomain");
    pub const CREATE_PUBLIC_GROUP: ActionId = ActionId::builtin("create-public-group");
    pub const CREATE_PRIVATE_GROUP: ActionId = ActionId::builtin("create-private-group");
    pub const CREATE_ROLE: ActionId = ActionId::builtin("create-role");
    pub const ASSIGN_ROLE: ActionId = ActionId::builtin("assign-role");
    pub const PAIR_ASN: ActionId = ActionId::builtin("pair-asn");
    pub const ADMINISTER_SUBDOMAIN: ActionId = ActionId::builtin("administer-subdomain");
    pub const POST_MESSAGE: ActionId = ActionId::builtin("post-message");
    pub const FOLLOW_USER: ActionId = ActionId::builtin("follow-user");

    pub const BUILTIN: [ActionId; 9] = [
        Self::CREATE_SUBDOMAIN,
        Self::CREATE_PUBLIC_GROUP,
        Self::CREATE_PRIVATE_GROUP,
        Self::CREATE_ROLE,
        Self::ASSIGN_ROLE,
        Self::PAIR_ASN,
        Self::ADMINISTER_SUBDOMAIN,
        Self::POST_MESSAGE,
        Self::FOLLOW_USER,
    ];

    const fn builtin(name: &'static str) -> Self {
        ActionId(Cow::Borrowed(name))
    }

    pub fn new(name: impl Into<String>) -> Self {
        ActionId(Cow::Owned(name.into()))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for ActionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Known action names; builtins plus whatever the deployment configures.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ActionCatalog(BTreeSet<ActionId>);

impl Default for ActionCatalog {
    fn default() -> Self {
        Self(ActionId::BUILTIN.into_iter().collect())
    }
}

impl ActionCatalog {
    pub fn with_extra<I, S>(extra: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut c = Self::default();
        c.0.extend(extra.into_iter().map(ActionId::new));
        c
    }

    pub fn contains(&self, a: &ActionId) -> bool {
        self.0.contains(a)
    }

    pub fn iter(&self) -> impl Iterator<Item = &ActionId> {
        self.0.iter()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Effect {
    Grant,
    Deny,
}

/// At most one effect per action.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PrivilegeSet {
    entries: BTreeMap<ActionId, Effect>,
}

impl PrivilegeSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_entries<I: IntoIterator<Item = (ActionId, Effect)>>(entries: I) -> Self {
        Self { entries: entries.into_iter().collect() }
    }

    pub fn get(&self, a: &ActionId) -> Option<Effect> {
        self.entries.get(a).copied()
    }

    pub fn set(&mut self, a: ActionId, effect: Option<Effect>) {
        match effect {
            Some(e) => {
                self.entries.insert(a, e);
            }
            None => {
                self.entries.remove(&a);
            }
        }
    }

    pub fn grants(&self, a: &ActionId) -> bool {
        self.get(a) == Some(Effect::Grant)
    }

    pub fn actions(&self) -> impl Iterator<Item = &ActionId> {
        self.entries.keys()
    }

    pub fn entries(&self) -> impl Iterator<Item = (&ActionId, Effect)> {
        self.entries.iter().map(|(a, e)| (a, *e))
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Per-action override: every entry of `other` replaces ours.
    pub fn refine(&mut self, other: &PrivilegeSet) {
        for (a, e) in &other.entries {
            self.entries.insert(a.clone(), *e);
        }
    }

    /// Union where a deny on either side wins.
    pub fn merge_deny_wins(&mut self, other: &PrivilegeSet) {
        for (a, e) in &other.entries {
            let slot = self.entries.entry(a.clone()).or_insert(*e);
            if *e == Effect::Deny {
                *slot = Effect::Deny;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum JoinPolicy {
    Open,
    Closed,
    /// Joining requires satisfying this policy set (evaluated with no message).
    PolicyGated {
        policy: PolicySet,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaggingRight {
    Members,
    Bosses,
}

/// Privileges local to one public group or subdomain.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupPrivileges {
    pub join: JoinPolicy,
    pub tagging: TaggingRight,
    /// Messages tagged with the group wait for a boss's approval.
    pub moderated: bool,
}

impl Default for GroupPrivileges {
    fn default() -> Self {
        Self { join: JoinPolicy::Closed, tagging: TaggingRight::Members, moderated: false }
    }
}

impl GroupPrivileges {
    pub fn subdomain_default() -> Self {
        Self::default()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GroupAction {
    Join,
    Tag,
    Moderate,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum PrivilegeError {
    #[error("unknown user {0}")]
    UnknownUser(UserId),
    #[error("unknown subdomain {0}")]
    UnknownSubdomain(CircleId),
    #[error("unknown role {0}")]
    UnknownRole(RoleId),
    #[error("unknown group {0}")]
    UnknownGroup(CircleId),
    #[error("user {user} and subdomain {subdomain} belong to different asns")]
    CrossAsn { user: UserId, subdomain: CircleId },
}

/// Privileges of `role` merged over its ancestors, nearer roles overriding.
pub fn role_closure(mesh: &Mesh, role: &RoleId) -> Result<PrivilegeSet, PrivilegeError> {
    let mut chain = Vec::new();
    let mut cur = Some(role.clone());
    while let Some(r) = cur {
        if chain.contains(&r) {
            break;
        }
        let found = mesh.role(&r).ok_or_else(|| PrivilegeError::UnknownRole(r.clone()))?;
        cur = found.parent.clone();
        chain.push(r);
    }
    let mut out = PrivilegeSet::new();
    for r in chain.iter().rev() {
        out.refine(&mesh.role(r).expect("resolved above").privileges);
    }
    Ok(out)
}

/// Role layer only: every role closure of `user`, deny wins across roles.
pub fn role_layer(mesh: &Mesh, user: &UserId) -> Result<PrivilegeSet, PrivilegeError> {
    let u = mesh.user(user).ok_or_else(|| PrivilegeError::UnknownUser(user.clone()))?;
    let mut out = PrivilegeSet::new();
    for r in &u.roles {
        out.merge_deny_wins(&role_closure(mesh, r)?);
    }
    Ok(out)
}

pub fn effective_privileges(mesh: &Mesh, user: &UserId, sd: &CircleId) -> Result<PrivilegeSet, PrivilegeError> {
    let circle = mesh.circle(sd).ok_or_else(|| PrivilegeError::UnknownSubdomain(sd.clone()))?;
    let info = circle.subdomain().ok_or_else(|| PrivilegeError::UnknownSubdomain(sd.clone()))?;
    mesh.user(user).ok_or_else(|| PrivilegeError::UnknownUser(user.clone()))?;
    if user.asn() != circle.host() {
        return Err(PrivilegeError::CrossAsn { user: user.clone(), subdomain: sd.clone() });
    }

    let mut out = role_layer(mesh, user)?;

    let chain = mesh.ancestor_chain(sd).map_err(|_| PrivilegeError::UnknownSubdomain(sd.clone()))?;
    for c in chain.iter().rev() {
        if let Some(CircleKind::Subdomain(s)) = mesh.circle(c).map(|c| &c.kind) {
            out.refine(&s.privileges);
        }
    }

    if let Some(mine) = info.user_privileges.get(user) {
        out.refine(mine);
    }

    // inviolable grants
    if let Some(asn) = mesh.asn(&circle.host()) {
        if &asn.admin == user {
            if asn.main_subdomain.as_ref() == Some(sd) {
                for a in mesh.catalog().iter() {
                    out.set(a.clone(), Some(Effect::Grant));
                }
            }
            out.set(ActionId::ADMINISTER_SUBDOMAIN, Some(Effect::Grant));
        }
    }
    if &info.founding_admin == user {
        out.set(ActionId::ADMINISTER_SUBDOMAIN, Some(Effect::Grant));
    }
    Ok(out)
}

pub fn check_privilege(mesh: &Mesh, user: &UserId, sd: &CircleId, action: &ActionId) -> Result<bool, PrivilegeError> {
    Ok(effective_privileges(mesh, user, sd)?.grants(action))
}

/// Evaluates a group-local privilege against the group's own settings only.
pub fn check_group_privilege(
    mesh: &Mesh,
    group: &CircleId,
    user: &UserId,
    action: GroupAction,
) -> Result<bool, PrivilegeError> {
    let c = mesh.circle(group).ok_or_else(|| PrivilegeError::UnknownGroup(group.clone()))?;
    let gp = c.group_privileges().ok_or_else(|| PrivilegeError::UnknownGroup(group.clone()))?;
    Ok(match action {
        GroupAction::Join => match &gp.join {
            JoinPolicy::Open => true,
            JoinPolicy::Closed => false,
            JoinPolicy::PolicyGated { policy } => {
                evaluate_policy_set(policy, &AccessContext::without_message(user, mesh))
            }
        },
        GroupAction::Tag => match gp.tagging {
            TaggingRight::Members => c.is_member(user),
            TaggingRight::Bosses => c.is_boss(user),
        },
        GroupAction::Moderate => c.is_boss(user),
    })
}

// ---- assignment text format -------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum AssignmentTarget {
    Role { role: RoleId },
    Subdomain { subdomain: CircleId },
    User { user: UserId, subdomain: CircleId },
}

/// `grant|deny <action> to role:<id>|subdomain:<id>|user:<id>@subdomain:<id>`
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct PrivilegeAssignment {
    pub effect: Effect,
    pub action: ActionId,
    pub target: AssignmentTarget,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("invalid privilege assignment {input:?}: {reason}")]
pub struct AssignmentParseError {
    pub input: String,
    pub reason: String,
}

impl fmt::Display for PrivilegeAssignment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let eff = match self.effect {
            Effect::Grant => "grant",
            Effect::Deny => "deny",
        };
        write!(f, "{eff} {} to ", self.action)?;
        match &self.target {
            AssignmentTarget::Role { role } => write!(f, "role:{role}"),
            AssignmentTarget::Subdomain { subdomain } => write!(f, "subdomain:{subdomain}"),
            AssignmentTarget::User { user, subdomain } => write!(f, "user:{user}@subdomain:{subdomain}"),
        }
    }
}

impl FromStr for PrivilegeAssignment {
    type Err = AssignmentParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let err = |reason: &str| AssignmentParseError { input: s.to_string(), reason: reason.to_string() };
        let words: Vec<&str> = s.split_whitespace().collect();
        let [eff, action, to, target] = words[..] else {
            return Err(err("expected four words"));
        };
        let effect = match eff {
            "grant" => Effect::Grant,
            "deny" => Effect::Deny,
            _ => return Err(err("expected grant or deny")),
        };
        if to != "to" {
            return Err(err("expected \"to\""));
        }
        if action.is_empty() || !action.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_') {
            return Err(err("bad action name"));
        }
        let id_err = |e: crate::ids::IdError| err(&e.to_string());
        let target = if let Some(r) = target.strip_prefix("role:") {
            AssignmentTarget::Role { role: r.parse().map_err(id_err)? }
        } else if let Some(sd) = target.strip_prefix("subdomain:") {
            AssignmentTarget::Subdomain { subdomain: sd.parse().map_err(id_err)? }
        } else if let Some(rest) = target.strip_prefix("user:") {
            let (u, sd) = rest.split_once("@subdomain:").ok_or_else(|| err("expected user:<id>@subdomain:<id>"))?;
            AssignmentTarget::User { user: u.parse().map_err(id_err)?, subdomain: sd.parse().map_err(id_err)? }
        } else {
            return Err(err("unknown target kind"));
        };
        Ok(Self { effect, action: ActionId::new(action), target })
    }
}

impl TryFrom<String> for PrivilegeAssignment {
    type Error = AssignmentParseError;
    fn try_from(value: String) -> Result<Self, Self::Error> {
        value.parse()
    }
}

impl From<PrivilegeAssignment> for String {
    fn from(p: PrivilegeAssignment) -> Self {
        p.to_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ids::AsnId;
    use crate::model::Profile;
    use crate::policy::parse_rule;

    fn uid(s: &str) -> UserId {
        s.parse().unwrap()
    }

    struct Fixture {
        mesh: Mesh,
        root: CircleId,
        child: CircleId,
    }

    fn fixture() -> Fixture {
        let org: AsnId = "org".parse().unwrap();
        let mut m = Mesh::new();
        m.apply_change(m.create_asn(&org, "admin", Profile::default()).unwrap());
        for u in ["u", "v"] {
            m.apply_change(m.register_user(&org, u, Profile::default()).unwrap());
        }
        let root = m.apply_change(m.create_subdomain(&org, "Org", None, &uid("org/admin")).unwrap()).id;
        let child = m.apply_change(m.create_subdomain(&org, "Dept", Some(&root), &uid("org/admin")).unwrap()).id;
        Fixture { mesh: m, root, child }
    }

    fn role(m: &mut Mesh, name: &str, parent: Option<&RoleId>, entries: &[(ActionId, Effect)]) -> RoleId {
        let org: AsnId = "org".parse().unwrap();
        m.apply_change(m.create_role(&org, name, parent, PrivilegeSet::from_entries(entries.iter().cloned())).unwrap())
            .id
    }

    #[test]
    fn closure_of_parentless_role_is_identity() {
        let mut f = fixture();
        let r = role(&mut f.mesh, "r", None, &[(ActionId::POST_MESSAGE, Effect::Grant)]);
        assert_eq!(role_closure(&f.mesh, &r).unwrap(), f.mesh.role(&r).unwrap().privileges);
    }

    #[test]
    fn closure_inherits_and_child_overrides() {
        let mut f = fixture();
        let p = role(
            &mut f.mesh,
            "p",
            None,
            &[(ActionId::CREATE_ROLE, Effect::Grant), (ActionId::PAIR_ASN, Effect::Grant)],
        );
        let c = role(&mut f.mesh, "c", Some(&p), &[(ActionId::PAIR_ASN, Effect::Deny)]);
        let cl = role_closure(&f.mesh, &c).unwrap();
        // flattened by hand: create-role from parent, pair-asn overridden by child
        let expected =
            PrivilegeSet::from_entries([(ActionId::CREATE_ROLE, Effect::Grant), (ActionId::PAIR_ASN, Effect::Deny)]);
        assert_eq!(cl, expected);
    }

    #[test]
    fn subdomain_refines_roles() {
        let mut f = fixture();
        let r = role(
            &mut f.mesh,
            "r",
            None,
            &[(ActionId::POST_MESSAGE, Effect::Grant), (ActionId::CREATE_PUBLIC_GROUP, Effect::Grant)],
        );
        let u = uid("org/u");
        f.mesh.apply_change(f.mesh.assign_role(&u, &r).unwrap());
        assert!(check_privilege(&f.mesh, &u, &f.child, &ActionId::POST_MESSAGE).unwrap());
        f.mesh.apply_change(
            f.mesh.set_subdomain_privilege(&f.child, &ActionId::CREATE_PUBLIC_GROUP, Some(Effect::Deny)).unwrap(),
        );
        assert!(!check_privilege(&f.mesh, &u, &f.child, &ActionId::CREATE_PUBLIC_GROUP).unwrap());
        assert!(check_privilege(&f.mesh, &u, &f.root, &ActionId::CREATE_PUBLIC_GROUP).unwrap());
    }

    #[test]
    fn per_user_grant_only_for_that_user() {
        let mut f = fixture();
        let (u, v) = (uid("org/u"), uid("org/v"));
        f.mesh.apply_change(
            f.mesh.set_user_privilege(&f.child, &u, &ActionId::CREATE_SUBDOMAIN, Some(Effect::Grant)).unwrap(),
        );
        assert!(check_privilege(&f.mesh, &u, &f.child, &ActionId::CREATE_SUBDOMAIN).unwrap());
        assert!(!check_privilege(&f.mesh, &v, &f.child, &ActionId::CREATE_SUBDOMAIN).unwrap());
    }

    #[test]
    fn closed_by_default_and_bootstrap() {
        let f = fixture();
        let u = uid("org/u");
        for a in ActionId::BUILTIN {
            assert!(!check_privilege(&f.mesh, &u, &f.child, &a).unwrap());
        }
        let admin = uid("org/admin");
        assert!(check_privilege(&f.mesh, &admin, &f.child, &ActionId::ADMINISTER_SUBDOMAIN).unwrap());
        for a in ActionId::BUILTIN {
            assert!(check_privilege(&f.mesh, &admin, &f.root, &a).unwrap());
        }
    }

    #[test]
    fn cross_asn_is_an_error() {
        let mut f = fixture();
        let other: AsnId = "other".parse().unwrap();
        f.mesh.apply_change(f.mesh.create_asn(&other, "admin", Profile::default()).unwrap());
        assert!(matches!(
            effective_privileges(&f.mesh, &uid("other/admin"), &f.root),
            Err(PrivilegeError::CrossAsn { .. })
        ));
    }

    #[test]
    fn group_privileges() {
        let mut f = fixture();
        let u = uid("org/u");
        f.mesh.apply_change(
            f.mesh.set_subdomain_privilege(&f.root, &ActionId::CREATE_PUBLIC_GROUP, Some(Effect::Grant)).unwrap(),
        );
        let g = f.mesh.apply_change(f.mesh.create_public_group(&u, "team", None, PolicySet::empty()).unwrap()).id;
        let v = uid("org/v");
        assert!(check_group_privilege(&f.mesh, &g, &u, GroupAction::Tag).unwrap());
        assert!(!check_group_privilege(&f.mesh, &g, &v, GroupAction::Tag).unwrap());
        let gp = GroupPrivileges { moderated: true, ..Default::default() };
        f.mesh.apply_change(f.mesh.set_group_privileges(&g, gp).unwrap());
        assert!(!check_group_privilege(&f.mesh, &g, &v, GroupAction::Moderate).unwrap());
        assert!(check_group_privilege(&f.mesh, &g, &u, GroupAction::Moderate).unwrap());

        let policy = PolicySet::new(vec![parse_rule("allow <- reader-member-of(org/Dept)").unwrap()]);
        let gated = GroupPrivileges { join: JoinPolicy::PolicyGated { policy: policy.clone() }, ..Default::default() };
        f.mesh.apply_change(f.mesh.set_group_privileges(&g, gated).unwrap());
        assert!(!check_group_privilege(&f.mesh, &g, &v, GroupAction::Join).unwrap());
        f.mesh.apply_change(f.mesh.add_member(&f.child, &v).unwrap());
        let direct = evaluate_policy_set(&policy, &AccessContext::without_message(&v, &f.mesh));
        assert!(direct);
        assert_eq!(check_group_privilege(&f.mesh, &g, &v, GroupAction::Join).unwrap(), direct);
        let pg = f.mesh.apply_change(f.mesh.create_private_group(&u, "x", None).unwrap()).id;
        assert_eq!(check_group_privilege(&f.mesh, &pg, &u, GroupAction::Tag), Err(PrivilegeError::UnknownGroup(pg)));
    }

    #[test]
    fn assignment_format() {
        for s in [
            "grant create-role to role:org/physician",
            "deny post-message to subdomain:org/Dept",
            "grant create-subdomain to user:org/u@subdomain:org/Dept",
        ] {
            let a: PrivilegeAssignment = s.parse().unwrap();
            assert_eq!(a.to_string(), s);
        }
        assert!("allow x to role:org/r".parse::<PrivilegeAssignment>().is_err());
        assert!("grant x to group:org/r".parse::<PrivilegeAssignment>().is_err());
        assert!("grant x to user:org/u".parse::<PrivilegeAssignment>().is_err());
    }
}
