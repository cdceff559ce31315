//! The social-mesh registry: ASNs, users, circles, roles and messages.
//!
//! Every mutating operation is split in two steps. The `&self` method
//! validates and returns a [`Change`] carrying the new entity snapshots as
//! [`MeshEvent`]s; [`Mesh::apply_change`] installs them. The ASN node logs the
//! events durably in between, so memory never runs ahead of disk.

mod validate;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::ids::{AsnId, CircleId, IdError, MessageId, RoleId, UserId};
use crate::policy::{MembershipOracle, PolicySet};
use crate::privilege::{self, ActionCatalog, ActionId, Effect, GroupPrivileges, PrivilegeSet};

pub use validate::{validate_hierarchy, Violation};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ModelError {
    #[error(transparent)]
    InvalidId(#[from] IdError),
    #[error("unknown asn {0}")]
    UnknownAsn(AsnId),
    #[error("unknown user {0}")]
    UnknownUser(UserId),
    #[error("unknown circle {0}")]
    UnknownCircle(CircleId),
    #[error("unknown role {0}")]
    UnknownRole(RoleId),
    #[error("{0} already exists")]
    DuplicateId(String),
    #[error("parent {0} is not a subdomain of this asn")]
    ParentNotSubdomain(CircleId),
    #[error("asn {0} already has a main subdomain")]
    SecondRoot(AsnId),
    #[error("parent {0} has the wrong circle kind")]
    InvalidParentKind(CircleId),
    #[error("parent {0} is owned by another user")]
    ForeignParent(CircleId),
    #[error("{user} lacks privilege {action}")]
    PrivilegeDenied { user: UserId, action: String },
    #[error("{0} and {1} belong to different asns")]
    CrossAsn(String, String),
    #[error("circle {0} appears in both the tag and the conflict set")]
    TagConflictOverlap(CircleId),
    #[error("author cannot reference circle {0}")]
    NotTaggable(CircleId),
    #[error("role hierarchy would contain a cycle through {0}")]
    RoleCycle(RoleId),
    #[error("circle hierarchy would contain a cycle through {0}")]
    CircleCycle(CircleId),
    #[error("operation not supported on {0}")]
    WrongCircleKind(CircleId),
    #[error("user {0} cannot leave: founding administrator or owner")]
    PermanentMember(UserId),
    #[error("action {0} is not in the catalog")]
    UnknownAction(ActionId),
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Profile {
    pub display_name: String,
    #[serde(default)]
    pub bio: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct User {
    pub id: UserId,
    pub profile: Profile,
    pub roles: BTreeSet<RoleId>,
    /// Users (local or remote) who follow this user.
    pub followers: BTreeSet<UserId>,
    /// Users (local or remote) this user follows.
    pub following: BTreeSet<UserId>,
}

impl User {
    pub fn asn(&self) -> AsnId {
        self.id.asn()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Asn {
    pub id: AsnId,
    pub admin: UserId,
    pub users: BTreeSet<UserId>,
    pub subdomains: BTreeSet<CircleId>,
    pub main_subdomain: Option<CircleId>,
    pub roles: BTreeSet<RoleId>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Role {
    pub id: RoleId,
    pub name: String,
    pub privileges: PrivilegeSet,
    pub parent: Option<RoleId>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubdomainInfo {
    pub founding_admin: UserId,
    pub privileges: PrivilegeSet,
    /// Per-user grants and revocations recorded on this subdomain.
    pub user_privileges: BTreeMap<UserId, PrivilegeSet>,
    pub group: GroupPrivileges,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PublicGroupInfo {
    pub owner: UserId,
    pub bosses: BTreeSet<UserId>,
    pub group: GroupPrivileges,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrivateGroupInfo {
    pub owner: UserId,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum CircleKind {
    Subdomain(SubdomainInfo),
    PublicGroup(PublicGroupInfo),
    PrivateGroup(PrivateGroupInfo),
}

impl CircleKind {
    pub fn label(&self) -> &'static str {
        match self {
            CircleKind::Subdomain(_) => "subdomain",
            CircleKind::PublicGroup(_) => "public-group",
            CircleKind::PrivateGroup(_) => "private-group",
        }
    }
}

/// A subdomain, public group or private group. The circle id prefix names the
/// ASN that hosts it; `version` is bumped by the host on every change.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Circle {
    pub id: CircleId,
    pub name: String,
    pub parent: Option<CircleId>,
    pub members: BTreeSet<UserId>,
    pub policies: PolicySet,
    pub version: u64,
    pub kind: CircleKind,
}

impl Circle {
    pub fn host(&self) -> AsnId {
        self.id.asn()
    }

    pub fn is_member(&self, u: &UserId) -> bool {
        self.members.contains(u)
    }

    pub fn subdomain(&self) -> Option<&SubdomainInfo> {
        match &self.kind {
            CircleKind::Subdomain(s) => Some(s),
            _ => None,
        }
    }

    pub fn public_group(&self) -> Option<&PublicGroupInfo> {
        match &self.kind {
            CircleKind::PublicGroup(g) => Some(g),
            _ => None,
        }
    }

    pub fn private_owner(&self) -> Option<&UserId> {
        match &self.kind {
            CircleKind::PrivateGroup(p) => Some(&p.owner),
            _ => None,
        }
    }

    pub fn group_privileges(&self) -> Option<&GroupPrivileges> {
        match &self.kind {
            CircleKind::Subdomain(s) => Some(&s.group),
            CircleKind::PublicGroup(g) => Some(&g.group),
            CircleKind::PrivateGroup(_) => None,
        }
    }

    /// Users allowed to modify the policy set: bosses of a public group, the
    /// owner of a private group, the founding admin of a subdomain.
    pub fn is_boss(&self, u: &UserId) -> bool {
        match &self.kind {
            CircleKind::Subdomain(s) => &s.founding_admin == u,
            CircleKind::PublicGroup(g) => g.bosses.contains(u),
            CircleKind::PrivateGroup(p) => &p.owner == u,
        }
    }
}

/// The unit of information flow.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Message {
    pub id: MessageId,
    pub author: UserId,
    pub content: String,
    pub tags: BTreeSet<CircleId>,
    pub conflicts: BTreeSet<CircleId>,
}

impl Message {
    /// Builds a message, rejecting any circle present in both sets.
    pub fn new(
        id: MessageId,
        author: UserId,
        content: impl Into<String>,
        tags: BTreeSet<CircleId>,
        conflicts: BTreeSet<CircleId>,
    ) -> Result<Self> {
        if let Some(c) = tags.intersection(&conflicts).next() {
            return Err(ModelError::TagConflictOverlap(c.clone()));
        }
        Ok(Self { id, author, content: content.into(), tags, conflicts })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "event", content = "value", rename_all = "kebab-case")]
pub enum MeshEvent {
    Asn(Asn),
    User(User),
    Circle(Circle),
    Role(Role),
}

/// Validated result of an operation: the value handed back to the caller and
/// the snapshots that must be installed for it to take effect.
#[derive(Debug, Clone, PartialEq)]
#[must_use = "a change does nothing until applied"]
pub struct Change<T> {
    pub value: T,
    pub events: Vec<MeshEvent>,
}

impl<T> Change<T> {
    fn new(value: T, events: Vec<MeshEvent>) -> Self {
        Self { value, events }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Mesh {
    asns: BTreeMap<AsnId, Asn>,
    users: BTreeMap<UserId, User>,
    circles: BTreeMap<CircleId, Circle>,
    roles: BTreeMap<RoleId, Role>,
    #[serde(default)]
    catalog: ActionCatalog,
}

impl MembershipOracle for Mesh {
    fn is_member(&self, circle: &CircleId, user: &UserId) -> Option<bool> {
        self.circles.get(circle).map(|c| c.is_member(user))
    }
}

impl Mesh {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_catalog(catalog: ActionCatalog) -> Self {
        Self { catalog, ..Self::default() }
    }

    pub fn catalog(&self) -> &ActionCatalog {
        &self.catalog
    }

    pub fn asn(&self, id: &AsnId) -> Option<&Asn> {
        self.asns.get(id)
    }

    pub fn user(&self, id: &UserId) -> Option<&User> {
        self.users.get(id)
    }

    pub fn circle(&self, id: &CircleId) -> Option<&Circle> {
        self.circles.get(id)
    }

    pub fn role(&self, id: &RoleId) -> Option<&Role> {
        self.roles.get(id)
    }

    pub fn asns(&self) -> impl Iterator<Item = &Asn> {
        self.asns.values()
    }

    pub fn users(&self) -> impl Iterator<Item = &User> {
        self.users.values()
    }

    pub fn circles(&self) -> impl Iterator<Item = &Circle> {
        self.circles.values()
    }

    pub fn roles(&self) -> impl Iterator<Item = &Role> {
        self.roles.values()
    }

    pub fn circle_count(&self) -> usize {
        self.circles.len()
    }

    pub(crate) fn try_asn(&self, id: &AsnId) -> Result<&Asn> {
        self.asns.get(id).ok_or_else(|| ModelError::UnknownAsn(id.clone()))
    }

    pub(crate) fn try_user(&self, id: &UserId) -> Result<&User> {
        self.users.get(id).ok_or_else(|| ModelError::UnknownUser(id.clone()))
    }

    pub(crate) fn try_circle(&self, id: &CircleId) -> Result<&Circle> {
        self.circles.get(id).ok_or_else(|| ModelError::UnknownCircle(id.clone()))
    }

    pub(crate) fn try_role(&self, id: &RoleId) -> Result<&Role> {
        self.roles.get(id).ok_or_else(|| ModelError::UnknownRole(id.clone()))
    }

    /// Installs a snapshot without validation (replay and replication path).
    pub fn apply_event(&mut self, event: MeshEvent) {
        match event {
            MeshEvent::Asn(a) => {
                self.asns.insert(a.id.clone(), a);
            }
            MeshEvent::User(u) => {
                self.users.insert(u.id.clone(), u);
            }
            MeshEvent::Circle(c) => {
                self.circles.insert(c.id.clone(), c);
            }
            MeshEvent::Role(r) => {
                self.roles.insert(r.id.clone(), r);
            }
        }
    }

    pub fn apply_change<T>(&mut self, change: Change<T>) -> T {
        for e in change.events {
            self.apply_event(e);
        }
        change.value
    }

    pub fn set_catalog(&mut self, catalog: ActionCatalog) {
        self.catalog = catalog;
    }

    fn ensure_free_circle(&self, id: &CircleId) -> Result<()> {
        if self.circles.contains_key(id) {
            return Err(ModelError::DuplicateId(id.to_string()));
        }
        Ok(())
    }

    // ---- ASNs and users -------------------------------------------------

    /// Registers a new ASN together with its administrator account.
    pub fn create_asn(&self, id: &AsnId, admin_local: &str, profile: Profile) -> Result<Change<Asn>> {
        if self.asns.contains_key(id) {
            return Err(ModelError::DuplicateId(id.to_string()));
        }
        let admin = UserId::scoped(id, admin_local)?;
        let user = new_user(admin.clone(), profile);
        let asn = Asn {
            id: id.clone(),
            admin: admin.clone(),
            users: BTreeSet::from([admin]),
            subdomains: BTreeSet::new(),
            main_subdomain: None,
            roles: BTreeSet::new(),
        };
        Ok(Change::new(asn.clone(), vec![MeshEvent::User(user), MeshEvent::Asn(asn)]))
    }

    pub fn register_user(&self, asn: &AsnId, local: &str, profile: Profile) -> Result<Change<User>> {
        let mut a = self.try_asn(asn)?.clone();
        let id = UserId::scoped(asn, local)?;
        if self.users.contains_key(&id) {
            return Err(ModelError::DuplicateId(id.to_string()));
        }
        let user = new_user(id.clone(), profile);
        a.users.insert(id);
        Ok(Change::new(user.clone(), vec![MeshEvent::User(user), MeshEvent::Asn(a)]))
    }

    pub fn update_profile(&self, user: &UserId, profile: Profile) -> Result<Change<User>> {
        let mut u = self.try_user(user)?.clone();
        u.profile = profile;
        Ok(Change::new(u.clone(), vec![MeshEvent::User(u)]))
    }

    /// Records `follower -> followee` on whichever side is registered here.
    pub fn follow(&self, follower: &UserId, followee: &UserId) -> Result<Change<()>> {
        let mut events = Vec::new();
        let a = self.users.get(follower);
        let b = self.users.get(followee);
        if a.is_none() && b.is_none() {
            return Err(ModelError::UnknownUser(follower.clone()));
        }
        if let Some(a) = a {
            let mut a = a.clone();
            a.following.insert(followee.clone());
            events.push(MeshEvent::User(a));
        }
        if let Some(b) = b {
            let mut b = b.clone();
            b.followers.insert(follower.clone());
            events.push(MeshEvent::User(b));
        }
        Ok(Change::new((), events))
    }

    pub fn unfollow(&self, follower: &UserId, followee: &UserId) -> Result<Change<()>> {
        let mut events = Vec::new();
        if let Some(a) = self.users.get(follower) {
            let mut a = a.clone();
            a.following.remove(followee);
            events.push(MeshEvent::User(a));
        }
        if let Some(b) = self.users.get(followee) {
            let mut b = b.clone();
            b.followers.remove(follower);
            events.push(MeshEvent::User(b));
        }
        Ok(Change::new((), events))
    }

    // ---- circles ----------------------------------------------------------

    /// Creates a subdomain. Without a parent it becomes the main subdomain,
    /// which is only allowed while the ASN has none.
    pub fn create_subdomain(
        &self,
        asn: &AsnId,
        name: &str,
        parent: Option<&CircleId>,
        admin: &UserId,
    ) -> Result<Change<Circle>> {
        let mut a = self.try_asn(asn)?.clone();
        if !a.users.contains(admin) {
            return Err(ModelError::UnknownUser(admin.clone()));
        }
        let id = CircleId::scoped(asn, name)?;
        self.ensure_free_circle(&id)?;
        match parent {
            Some(p) => {
                let pc = self.circles.get(p).ok_or_else(|| ModelError::ParentNotSubdomain(p.clone()))?;
                if pc.subdomain().is_none() || !a.subdomains.contains(p) {
                    return Err(ModelError::ParentNotSubdomain(p.clone()));
                }
            }
            None => {
                if a.main_subdomain.is_some() {
                    return Err(ModelError::SecondRoot(asn.clone()));
                }
                a.main_subdomain = Some(id.clone());
            }
        }
        a.subdomains.insert(id.clone());
        let circle = Circle {
            id,
            name: name.to_string(),
            parent: parent.cloned(),
            members: BTreeSet::from([admin.clone()]),
            policies: PolicySet::empty(),
            version: 1,
            kind: CircleKind::Subdomain(SubdomainInfo {
                founding_admin: admin.clone(),
                privileges: PrivilegeSet::new(),
                user_privileges: BTreeMap::new(),
                group: GroupPrivileges::subdomain_default(),
            }),
        };
        Ok(Change::new(circle.clone(), vec![MeshEvent::Circle(circle), MeshEvent::Asn(a)]))
    }

    /// The subdomain whose privileges govern creating a child of `parent`.
    pub fn privilege_context(&self, user: &UserId, parent: Option<&CircleId>) -> Result<CircleId> {
        let mut cur = parent.cloned();
        while let Some(c) = cur {
            let circle = self.try_circle(&c)?;
            if circle.subdomain().is_some() {
                return Ok(c);
            }
            cur = circle.parent.clone();
        }
        let asn = self.try_asn(&user.asn())?;
        asn.main_subdomain
            .clone()
            .ok_or_else(|| ModelError::UnknownCircle(CircleId::scoped(&asn.id, "main").expect("valid")))
    }

    /// Creates a public group hosted by the owner's ASN. The parent, if any,
    /// must be a public group or subdomain hosted by that same ASN.
    pub fn create_public_group(
        &self,
        owner: &UserId,
        name: &str,
        parent: Option<&CircleId>,
        policies: PolicySet,
    ) -> Result<Change<Circle>> {
        self.try_user(owner)?;
        let asn = owner.asn();
        if let Some(p) = parent {
            let pc = self.try_circle(p)?;
            if matches!(pc.kind, CircleKind::PrivateGroup(_)) {
                return Err(ModelError::InvalidParentKind(p.clone()));
            }
            if pc.host() != asn {
                return Err(ModelError::CrossAsn(p.to_string(), owner.to_string()));
            }
        }
        let ctx = self.privilege_context(owner, parent)?;
        if !privilege::check_privilege(self, owner, &ctx, &ActionId::CREATE_PUBLIC_GROUP)
            .map_err(|_| ModelError::UnknownCircle(ctx.clone()))?
        {
            return Err(ModelError::PrivilegeDenied {
                user: owner.clone(),
                action: ActionId::CREATE_PUBLIC_GROUP.to_string(),
            });
        }
        let id = CircleId::scoped(&asn, name)?;
        self.ensure_free_circle(&id)?;
        let circle = Circle {
            id,
            name: name.to_string(),
            parent: parent.cloned(),
            members: BTreeSet::from([owner.clone()]),
            policies,
            version: 1,
            kind: CircleKind::PublicGroup(PublicGroupInfo {
                owner: owner.clone(),
                bosses: BTreeSet::from([owner.clone()]),
                group: GroupPrivileges::default(),
            }),
        };
        Ok(Change::new(circle.clone(), vec![MeshEvent::Circle(circle)]))
    }

    /// Creates a private group; its id is `<asn>/<owner-local>~<name>`.
    pub fn create_private_group(
        &self,
        owner: &UserId,
        name: &str,
        parent: Option<&CircleId>,
    ) -> Result<Change<Circle>> {
        self.try_user(owner)?;
        if let Some(p) = parent {
            let pc = self.try_circle(p)?;
            match pc.private_owner() {
                None => return Err(ModelError::InvalidParentKind(p.clone())),
                Some(o) if o != owner => return Err(ModelError::ForeignParent(p.clone())),
                Some(_) => {}
            }
        }
        let id = CircleId::scoped(&owner.asn(), &format!("{}~{}", owner.local(), name))?;
        self.ensure_free_circle(&id)?;
        let circle = Circle {
            id,
            name: name.to_string(),
            parent: parent.cloned(),
            members: BTreeSet::new(),
            policies: PolicySet::empty(),
            version: 1,
            kind: CircleKind::PrivateGroup(PrivateGroupInfo { owner: owner.clone() }),
        };
        Ok(Change::new(circle.clone(), vec![MeshEvent::Circle(circle)]))
    }

    fn bump(&self, id: &CircleId, f: impl FnOnce(&mut Circle) -> Result<()>) -> Result<Change<Circle>> {
        let mut c = self.try_circle(id)?.clone();
        f(&mut c)?;
        c.version += 1;
        Ok(Change::new(c.clone(), vec![MeshEvent::Circle(c)]))
    }

    /// Adds a member. Subdomain members must belong to the subdomain's ASN;
    /// public and private group members may be remote users.
    pub fn add_member(&self, circle: &CircleId, user: &UserId) -> Result<Change<Circle>> {
        let c = self.try_circle(circle)?;
        if c.subdomain().is_some() {
            let asn = self.try_asn(&c.host())?;
            if !asn.users.contains(user) {
                return Err(ModelError::CrossAsn(user.to_string(), circle.to_string()));
            }
        }
        self.bump(circle, |c| {
            c.members.insert(user.clone());
            Ok(())
        })
    }

    pub fn remove_member(&self, circle: &CircleId, user: &UserId) -> Result<Change<Circle>> {
        self.bump(circle, |c| {
            let permanent = match &c.kind {
                CircleKind::Subdomain(s) => &s.founding_admin == user,
                CircleKind::PublicGroup(g) => &g.owner == user,
                CircleKind::PrivateGroup(_) => false,
            };
            if permanent {
                return Err(ModelError::PermanentMember(user.clone()));
            }
            c.members.remove(user);
            if let CircleKind::PublicGroup(g) = &mut c.kind {
                g.bosses.remove(user);
            }
            Ok(())
        })
    }

    pub fn set_policies(&self, circle: &CircleId, policies: PolicySet) -> Result<Change<Circle>> {
        self.bump(circle, |c| {
            c.policies = policies;
            Ok(())
        })
    }

    pub fn add_boss(&self, circle: &CircleId, user: &UserId) -> Result<Change<Circle>> {
        self.bump(circle, |c| match &mut c.kind {
            CircleKind::PublicGroup(g) => {
                g.bosses.insert(user.clone());
                c.members.insert(user.clone());
                Ok(())
            }
            _ => Err(ModelError::WrongCircleKind(c.id.clone())),
        })
    }

    pub fn set_group_privileges(&self, circle: &CircleId, privileges: GroupPrivileges) -> Result<Change<Circle>> {
        self.bump(circle, |c| match &mut c.kind {
            CircleKind::PublicGroup(g) => {
                g.group = privileges;
                Ok(())
            }
            CircleKind::Subdomain(s) => {
                s.group = privileges;
                Ok(())
            }
            CircleKind::PrivateGroup(_) => Err(ModelError::WrongCircleKind(c.id.clone())),
        })
    }

    /// Sets (or clears, with `None`) the subdomain-level entry for `action`.
    pub fn set_subdomain_privilege(
        &self,
        sd: &CircleId,
        action: &ActionId,
        effect: Option<Effect>,
    ) -> Result<Change<Circle>> {
        self.check_action(action)?;
        self.bump(sd, |c| match &mut c.kind {
            CircleKind::Subdomain(s) => {
                s.privileges.set(action.clone(), effect);
                Ok(())
            }
            _ => Err(ModelError::ParentNotSubdomain(c.id.clone())),
        })
    }

    /// Sets (or clears) a per-user entry recorded on subdomain `sd`.
    pub fn set_user_privilege(
        &self,
        sd: &CircleId,
        user: &UserId,
        action: &ActionId,
        effect: Option<Effect>,
    ) -> Result<Change<Circle>> {
        self.check_action(action)?;
        if user.asn() != sd.asn() {
            return Err(ModelError::CrossAsn(user.to_string(), sd.to_string()));
        }
        self.bump(sd, |c| match &mut c.kind {
            CircleKind::Subdomain(s) => {
                let set = s.user_privileges.entry(user.clone()).or_default();
                set.set(action.clone(), effect);
                if set.is_empty() {
                    s.user_privileges.remove(user);
                }
                Ok(())
            }
            _ => Err(ModelError::ParentNotSubdomain(c.id.clone())),
        })
    }

    /// Circles the author may place in a tag or conflict set: circles they are
    /// a member of, plus private groups they own.
    pub fn can_reference(&self, author: &UserId, circle: &CircleId) -> bool {
        self.circles.get(circle).is_some_and(|c| c.is_member(author) || c.private_owner() == Some(author))
    }

    pub fn referenceable_circles(&self, author: &UserId) -> BTreeSet<CircleId> {
        self.circles
            .values()
            .filter(|c| c.is_member(author) || c.private_owner() == Some(author))
            .map(|c| c.id.clone())
            .collect()
    }

    /// Validates a new message against the tag/conflict rules.
    pub fn create_message(
        &self,
        id: MessageId,
        author: &UserId,
        content: &str,
        tags: BTreeSet<CircleId>,
        conflicts: BTreeSet<CircleId>,
    ) -> Result<Message> {
        self.try_user(author)?;
        let m = Message::new(id, author.clone(), content, tags, conflicts)?;
        for c in m.tags.iter().chain(&m.conflicts) {
            if !self.can_reference(author, c) {
                return Err(ModelError::NotTaggable(c.clone()));
            }
        }
        Ok(m)
    }

    /// `[c, parent(c), parent(parent(c)), ...]` up to the root. Stops early at
    /// a parent that cannot be resolved or that was already visited.
    pub fn ancestor_chain(&self, c: &CircleId) -> Result<Vec<CircleId>> {
        self.try_circle(c)?;
        let mut chain = vec![c.clone()];
        let mut seen = BTreeSet::from([c.clone()]);
        let mut cur = self.circles[c].parent.clone();
        while let Some(p) = cur {
            let Some(pc) = self.circles.get(&p) else { break };
            if !seen.insert(p.clone()) {
                break;
            }
            chain.push(p);
            cur = pc.parent.clone();
        }
        Ok(chain)
    }

    // ---- roles ------------------------------------------------------------

    pub fn create_role(
        &self,
        asn: &AsnId,
        name: &str,
        parent: Option<&RoleId>,
        privileges: PrivilegeSet,
    ) -> Result<Change<Role>> {
        let mut a = self.try_asn(asn)?.clone();
        let id = RoleId::scoped(asn, name)?;
        if self.roles.contains_key(&id) || self.roles.values().any(|r| r.id.asn() == *asn && r.name == name) {
            return Err(ModelError::DuplicateId(id.to_string()));
        }
        if let Some(p) = parent {
            self.try_role(p)?;
            if p.asn() != *asn {
                return Err(ModelError::CrossAsn(p.to_string(), asn.to_string()));
            }
        }
        for action in privileges.actions() {
            self.check_action(action)?;
        }
        a.roles.insert(id.clone());
        let role = Role { id, name: name.to_string(), privileges, parent: parent.cloned() };
        Ok(Change::new(role.clone(), vec![MeshEvent::Role(role), MeshEvent::Asn(a)]))
    }

    pub fn set_role_parent(&self, role: &RoleId, parent: Option<&RoleId>) -> Result<Change<Role>> {
        let mut r = self.try_role(role)?.clone();
        if let Some(p) = parent {
            self.try_role(p)?;
            if p.asn() != role.asn() {
                return Err(ModelError::CrossAsn(p.to_string(), role.to_string()));
            }
            let mut cur = Some(p.clone());
            let mut steps = 0;
            while let Some(c) = cur {
                if &c == role || steps > self.roles.len() {
                    return Err(ModelError::RoleCycle(role.clone()));
                }
                steps += 1;
                cur = self.roles.get(&c).and_then(|x| x.parent.clone());
            }
        }
        r.parent = parent.cloned();
        Ok(Change::new(r.clone(), vec![MeshEvent::Role(r)]))
    }

    pub fn set_role_privilege(&self, role: &RoleId, action: &ActionId, effect: Option<Effect>) -> Result<Change<Role>> {
        self.check_action(action)?;
        let mut r = self.try_role(role)?.clone();
        r.privileges.set(action.clone(), effect);
        Ok(Change::new(r.clone(), vec![MeshEvent::Role(r)]))
    }

    pub fn assign_role(&self, user: &UserId, role: &RoleId) -> Result<Change<User>> {
        let mut u = self.try_user(user)?.clone();
        self.try_role(role)?;
        if role.asn() != user.asn() {
            return Err(ModelError::CrossAsn(role.to_string(), user.to_string()));
        }
        u.roles.insert(role.clone());
        Ok(Change::new(u.clone(), vec![MeshEvent::User(u)]))
    }

    pub fn unassign_role(&self, user: &UserId, role: &RoleId) -> Result<Change<User>> {
        let mut u = self.try_user(user)?.clone();
        u.roles.remove(role);
        Ok(Change::new(u.clone(), vec![MeshEvent::User(u)]))
    }

    fn check_action(&self, action: &ActionId) -> Result<()> {
        if self.catalog.contains(action) {
            Ok(())
        } else {
            Err(ModelError::UnknownAction(action.clone()))
        }
    }
}

fn new_user(id: UserId, profile: Profile) -> User {
    User { id, profile, roles: BTreeSet::new(), followers: BTreeSet::new(), following: BTreeSet::new() }
}
