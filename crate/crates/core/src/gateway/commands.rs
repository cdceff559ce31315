use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{auth, Gateway, GatewayError, Result};
use crate::federation::LinkState;
use crate::ids::{CircleId, RoleId, UserId};
use crate::model::{Circle, CircleKind, Profile};
use crate::node::NodeError;
use crate::policy::{parse_policy_file, PolicySet};
use crate::privilege::{
    check_group_privilege, ActionId, AssignmentTarget, GroupAction, GroupPrivileges, PrivilegeAssignment, PrivilegeSet,
};
use crate::store::MetaOp;

/// Every administrative operation, shared by the HTTP API, the CLI and
/// scenario files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "kebab-case")]
pub enum AdminCommand {
    RegisterUser {
        /// Local part of the new user id.
        user: String,
        password: String,
        #[serde(default)]
        display_name: Option<String>,
    },
    SetPassword {
        user: UserId,
        password: String,
    },
    UpdateProfile {
        profile: Profile,
    },
    Follow {
        target: UserId,
        #[serde(default = "yes")]
        following: bool,
    },
    CreateSubdomain {
        name: String,
        #[serde(default)]
        parent: Option<CircleId>,
        #[serde(default)]
        admin: Option<UserId>,
    },
    CreatePublicGroup {
        name: String,
        #[serde(default)]
        parent: Option<CircleId>,
        /// Policy file text.
        #[serde(default)]
        policies: String,
    },
    CreatePrivateGroup {
        name: String,
        #[serde(default)]
        parent: Option<CircleId>,
    },
    AddMember {
        circle: CircleId,
        user: UserId,
    },
    RemoveMember {
        circle: CircleId,
        user: UserId,
    },
    SetPolicies {
        circle: CircleId,
        policies: String,
    },
    AddBoss {
        circle: CircleId,
        user: UserId,
    },
    SetGroupPrivileges {
        circle: CircleId,
        privileges: GroupPrivileges,
    },
    CreateRole {
        name: String,
        #[serde(default)]
        parent: Option<RoleId>,
        #[serde(default)]
        privileges: PrivilegeSet,
    },
    SetRoleParent {
        role: RoleId,
        parent: Option<RoleId>,
    },
    AssignRole {
        user: UserId,
        role: RoleId,
    },
    UnassignRole {
        user: UserId,
        role: RoleId,
    },
    /// `grant|deny <action> to <target>`; `clear` removes the entry instead.
    Privilege {
        assignment: PrivilegeAssignment,
        #[serde(default)]
        clear: bool,
    },
    Pair {
        asn: crate::ids::AsnId,
        endpoint: String,
        secret: String,
    },
    SetLinkState {
        asn: crate::ids::AsnId,
        state: LinkState,
    },
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CommandCategory {
    Users,
    Follow,
    Circles,
    Roles,
    Privileges,
    Pairing,
}

impl AdminCommand {
    pub fn category(&self) -> CommandCategory {
        use AdminCommand::*;
        match self {
            RegisterUser { .. } | SetPassword { .. } | UpdateProfile { .. } => CommandCategory::Users,
            Follow { .. } => CommandCategory::Follow,
            CreateSubdomain { .. }
            | CreatePublicGroup { .. }
            | CreatePrivateGroup { .. }
            | AddMember { .. }
            | RemoveMember { .. }
            | SetPolicies { .. }
            | AddBoss { .. }
            | SetGroupPrivileges { .. } => CommandCategory::Circles,
            CreateRole { .. } | SetRoleParent { .. } | AssignRole { .. } | UnassignRole { .. } => {
                CommandCategory::Roles
            }
            Privilege { .. } => CommandCategory::Privileges,
            Pair { .. } | SetLinkState { .. } => CommandCategory::Pairing,
        }
    }
}

fn parse_policies(text: &str) -> Result<PolicySet> {
    parse_policy_file(text).map_err(|e| GatewayError::Invalid(e.to_string()))
}

fn denied(user: &UserId, action: &str) -> GatewayError {
    GatewayError::PrivilegeDenied { user: user.clone(), action: action.to_string() }
}

/// What a caller wants to do to a circle.
#[derive(Clone, Copy, PartialEq, Eq)]
enum CircleOp {
    AddSelf,
    AddOther,
    RemoveSelf,
    RemoveOther,
    Manage,
}

impl Gateway {
    fn local_circle(&self, id: &CircleId) -> Result<Circle> {
        let c = self.node.read().mesh().circle(id).cloned().ok_or_else(|| GatewayError::InvalidCircle(id.clone()))?;
        if c.host() != *self.node.asn() {
            return Err(NodeError::NotHostedHere(id.clone()).into());
        }
        Ok(c)
    }

    /// Subdomains are run by whoever may administer them, public groups by
    /// their bosses (joining follows the group's join policy), private groups
    /// by their owner.
    fn authorize_circle(&self, user: &UserId, c: &Circle, op: CircleOp) -> Result<()> {
        match &c.kind {
            CircleKind::Subdomain(_) => {
                self.node.require(user, Some(&c.id), &ActionId::ADMINISTER_SUBDOMAIN)?;
            }
            CircleKind::PublicGroup(_) => {
                let ok = match op {
                    CircleOp::AddSelf => {
                        c.is_boss(user)
                            || check_group_privilege(self.node.read().mesh(), &c.id, user, GroupAction::Join)
                                .map_err(NodeError::from)?
                    }
                    CircleOp::RemoveSelf => true,
                    CircleOp::AddOther | CircleOp::RemoveOther | CircleOp::Manage => c.is_boss(user),
                };
                if !ok {
                    return Err(denied(user, if op == CircleOp::AddSelf { "join-group" } else { "boss-of-group" }));
                }
            }
            CircleKind::PrivateGroup(p) => {
                if &p.owner != user {
                    return Err(denied(user, "own-group"));
                }
            }
        }
        Ok(())
    }

    pub(crate) fn run_command(&self, user: &UserId, cmd: AdminCommand) -> Result<Value> {
        let node = &self.node;
        let asn = node.asn().clone();
        Ok(match cmd {
            AdminCommand::RegisterUser { user: local, password, display_name } => {
                node.require(user, None, &ActionId::ADMINISTER_SUBDOMAIN)?;
                let profile =
                    Profile { display_name: display_name.unwrap_or_else(|| local.clone()), bio: String::new() };
                let u = node.mutate(|m| m.register_user(&asn, &local, profile))?;
                node.commit(vec![MetaOp::Credential {
                    user: u.id.clone(),
                    credential: auth::hash_password(&password),
                }])?;
                json!({ "user": u.id })
            }
            AdminCommand::SetPassword { user: target, password } => {
                if &target != user {
                    node.require(user, None, &ActionId::ADMINISTER_SUBDOMAIN)?;
                }
                if target.asn() != asn || node.read().mesh().user(&target).is_none() {
                    return Err(NodeError::UnknownUser(target).into());
                }
                node.commit(vec![MetaOp::Credential {
                    user: target.clone(),
                    credential: auth::hash_password(&password),
                }])?;
                json!({ "user": target })
            }
            AdminCommand::UpdateProfile { profile } => {
                let u = node.mutate(|m| m.update_profile(user, profile))?;
                json!({ "user": u.id, "profile": u.profile })
            }
            AdminCommand::Follow { target, following } => {
                node.require(user, None, &ActionId::FOLLOW_USER)?;
                node.follow(user, &target, following)?;
                json!({ "follower": user, "followee": target, "following": following })
            }
            AdminCommand::CreateSubdomain { name, parent, admin } => {
                // without a parent the new subdomain goes under the main one
                let parent = match parent {
                    Some(p) => p,
                    None => node
                        .main_subdomain()
                        .ok_or_else(|| GatewayError::Invalid("asn has no main subdomain".into()))?,
                };
                self.local_circle(&parent)?;
                node.require(user, Some(&parent), &ActionId::CREATE_SUBDOMAIN)?;
                let parent = Some(parent);
                let admin = admin.unwrap_or_else(|| user.clone());
                let c = node.mutate(|m| m.create_subdomain(&asn, &name, parent.as_ref(), &admin))?;
                json!({ "circle": c.id })
            }
            AdminCommand::CreatePublicGroup { name, parent, policies } => {
                let policies = parse_policies(&policies)?;
                if user.asn() != asn {
                    return Err(NodeError::UnknownUser(user.clone()).into());
                }
                let c = node.mutate(|m| m.create_public_group(user, &name, parent.as_ref(), policies))?;
                json!({ "circle": c.id })
            }
            AdminCommand::CreatePrivateGroup { name, parent } => {
                node.require(user, None, &ActionId::CREATE_PRIVATE_GROUP)?;
                let c = node.mutate(|m| m.create_private_group(user, &name, parent.as_ref()))?;
                json!({ "circle": c.id })
            }
            AdminCommand::AddMember { circle, user: target } => {
                let c = self.local_circle(&circle)?;
                let op = if &target == user { CircleOp::AddSelf } else { CircleOp::AddOther };
                self.authorize_circle(user, &c, op)?;
                let c = node.mutate(|m| m.add_member(&circle, &target))?;
                json!({ "circle": c.id, "version": c.version })
            }
            AdminCommand::RemoveMember { circle, user: target } => {
                let c = self.local_circle(&circle)?;
                let op = if &target == user { CircleOp::RemoveSelf } else { CircleOp::RemoveOther };
                self.authorize_circle(user, &c, op)?;
                let c = node.mutate(|m| m.remove_member(&circle, &target))?;
                json!({ "circle": c.id, "version": c.version })
            }
            AdminCommand::SetPolicies { circle, policies } => {
                let policies = parse_policies(&policies)?;
                let c = self.local_circle(&circle)?;
                self.authorize_circle(user, &c, CircleOp::Manage)?;
                let c = node.mutate(|m| m.set_policies(&circle, policies))?;
                json!({ "circle": c.id, "version": c.version })
            }
            AdminCommand::AddBoss { circle, user: target } => {
                let c = self.local_circle(&circle)?;
                self.authorize_circle(user, &c, CircleOp::Manage)?;
                let c = node.mutate(|m| m.add_boss(&circle, &target))?;
                json!({ "circle": c.id, "version": c.version })
            }
            AdminCommand::SetGroupPrivileges { circle, privileges } => {
                let c = self.local_circle(&circle)?;
                self.authorize_circle(user, &c, CircleOp::Manage)?;
                let c = node.mutate(|m| m.set_group_privileges(&circle, privileges))?;
                json!({ "circle": c.id, "version": c.version })
            }
            AdminCommand::CreateRole { name, parent, privileges } => {
                node.require(user, None, &ActionId::CREATE_ROLE)?;
                let r = node.mutate(|m| m.create_role(&asn, &name, parent.as_ref(), privileges))?;
                json!({ "role": r.id })
            }
            AdminCommand::SetRoleParent { role, parent } => {
                node.require(user, None, &ActionId::CREATE_ROLE)?;
                let r = node.mutate(|m| m.set_role_parent(&role, parent.as_ref()))?;
                json!({ "role": r.id })
            }
            AdminCommand::AssignRole { user: target, role } => {
                node.require(user, None, &ActionId::ASSIGN_ROLE)?;
                node.mutate(|m| m.assign_role(&target, &role))?;
                json!({ "user": target, "role": role })
            }
            AdminCommand::UnassignRole { user: target, role } => {
                node.require(user, None, &ActionId::ASSIGN_ROLE)?;
                node.mutate(|m| m.unassign_role(&target, &role))?;
                json!({ "user": target, "role": role })
            }
            AdminCommand::Privilege { assignment, clear } => {
                let effect = if clear { None } else { Some(assignment.effect) };
                let action = &assignment.action;
                match &assignment.target {
                    AssignmentTarget::Role { role } => {
                        node.require(user, None, &ActionId::CREATE_ROLE)?;
                        node.mutate(|m| m.set_role_privilege(role, action, effect))?;
                    }
                    AssignmentTarget::Subdomain { subdomain } => {
                        self.local_circle(subdomain)?;
                        node.require(user, Some(subdomain), &ActionId::ADMINISTER_SUBDOMAIN)?;
                        node.mutate(|m| m.set_subdomain_privilege(subdomain, action, effect))?;
                    }
                    AssignmentTarget::User { user: target, subdomain } => {
                        self.local_circle(subdomain)?;
                        node.require(user, Some(subdomain), &ActionId::ADMINISTER_SUBDOMAIN)?;
                        node.mutate(|m| m.set_user_privilege(subdomain, target, action, effect))?;
                    }
                }
                json!({ "assignment": assignment, "cleared": clear })
            }
            AdminCommand::Pair { asn: remote, endpoint, secret } => {
                let state = node.pair_asn(user, &remote, &endpoint, &secret)?;
                json!({ "asn": remote, "state": state })
            }
            AdminCommand::SetLinkState { asn: remote, state } => {
                node.set_link_state(user, &remote, state)?;
                json!({ "asn": remote, "state": state })
            }
        })
    }
}
