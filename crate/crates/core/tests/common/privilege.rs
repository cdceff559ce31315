//! Layering table for the privilege engine. The expected decision for each
//! row is written out from the precedence order, not computed by the engine.

use prism_core::ids::{AsnId, CircleId, RoleId, UserId};
use prism_core::model::{Mesh, Profile};
use prism_core::privilege::{check_privilege, ActionId, Effect, PrivilegeSet};

pub const LEVELS: [Option<Effect>; 3] = [Some(Effect::Grant), Some(Effect::Deny), None];

/// Where the subdomain and role entries are recorded.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Placement {
    /// On the evaluated subdomain and the assigned role.
    Direct,
    /// On an ancestor subdomain and a parent role.
    Inherited,
}

#[derive(Debug, Clone)]
pub struct Row {
    pub user: Option<Effect>,
    pub subdomain: Option<Effect>,
    pub role: Option<Effect>,
    pub placement: Placement,
    pub expected: bool,
    pub got: bool,
}

fn show(e: Option<Effect>) -> &'static str {
    match e {
        Some(Effect::Grant) => "grant",
        Some(Effect::Deny) => "deny",
        None => "absent",
    }
}

impl std::fmt::Display for Row {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "user={:<6} subdomain={:<6} role={:<6} {:?}: expected {} got {}",
            show(self.user),
            show(self.subdomain),
            show(self.role),
            self.placement,
            self.expected,
            self.got
        )
    }
}

/// user > subdomain chain > role closure, absent everywhere means deny.
pub fn expected(user: Option<Effect>, subdomain: Option<Effect>, role: Option<Effect>) -> bool {
    match (user, subdomain, role) {
        (Some(e), _, _) | (None, Some(e), _) | (None, None, Some(e)) => e == Effect::Grant,
        (None, None, None) => false,
    }
}

pub struct Fixture {
    pub mesh: Mesh,
    pub user: UserId,
    pub admin: UserId,
    pub main: CircleId,
    pub dept: CircleId,
    pub team: CircleId,
    pub base: RoleId,
    pub staff: RoleId,
}

/// asn A with subdomains A > dept > team, roles base > staff, and user u
/// holding staff.
pub fn fixture() -> Fixture {
    let a: AsnId = "A".parse().unwrap();
    let mut mesh = Mesh::new();
    mesh.apply_change(mesh.create_asn(&a, "admin", Profile::default()).unwrap());
    mesh.apply_change(mesh.register_user(&a, "u", Profile::default()).unwrap());
    let admin: UserId = "A/admin".parse().unwrap();
    let user: UserId = "A/u".parse().unwrap();
    let main = mesh.apply_change(mesh.create_subdomain(&a, "A", None, &admin).unwrap()).id;
    let dept = mesh.apply_change(mesh.create_subdomain(&a, "dept", Some(&main), &admin).unwrap()).id;
    let team = mesh.apply_change(mesh.create_subdomain(&a, "team", Some(&dept), &admin).unwrap()).id;
    let base = mesh.apply_change(mesh.create_role(&a, "base", None, PrivilegeSet::new()).unwrap()).id;
    let staff = mesh.apply_change(mesh.create_role(&a, "staff", Some(&base), PrivilegeSet::new()).unwrap()).id;
    mesh.apply_change(mesh.assign_role(&user, &staff).unwrap());
    Fixture { mesh, user, admin, main, dept, team, base, staff }
}

/// All 27 combinations for one placement, evaluated at `team` for `create-role`.
pub fn table(placement: Placement) -> Vec<Row> {
    let action = ActionId::CREATE_ROLE;
    let mut rows = Vec::new();
    for user in LEVELS {
        for subdomain in LEVELS {
            for role in LEVELS {
                let mut f = fixture();
                let (sd_at, role_at) = match placement {
                    Placement::Direct => (f.team.clone(), f.staff.clone()),
                    Placement::Inherited => (f.dept.clone(), f.base.clone()),
                };
                f.mesh.apply_change(f.mesh.set_user_privilege(&f.team, &f.user, &action, user).unwrap());
                f.mesh.apply_change(f.mesh.set_subdomain_privilege(&sd_at, &action, subdomain).unwrap());
                f.mesh.apply_change(f.mesh.set_role_privilege(&role_at, &action, role).unwrap());
                let got = check_privilege(&f.mesh, &f.user, &f.team, &action).unwrap();
                rows.push(Row { user, subdomain, role, placement, expected: expected(user, subdomain, role), got });
            }
        }
    }
    rows
}
