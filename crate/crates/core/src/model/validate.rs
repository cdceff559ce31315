use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::Serialize;

use crate::ids::{AsnId, CircleId, RoleId, UserId};

use super::{CircleKind, Mesh};

/// A structural defect found by [`validate_hierarchy`].
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(tag = "violation", rename_all = "kebab-case")]
pub enum Violation {
    CircleCycle { circle: CircleId },
    RoleCycle { role: RoleId },
    DanglingParent { circle: CircleId, parent: CircleId },
    SubdomainParentKind { circle: CircleId, parent: CircleId },
    SubdomainCrossAsn { circle: CircleId, parent: CircleId },
    PublicGroupParentKind { circle: CircleId, parent: CircleId },
    PrivateGroupParentKind { circle: CircleId, parent: CircleId },
    PrivateGroupCrossOwner { circle: CircleId, parent: CircleId },
    SubdomainInMultipleAsns { circle: CircleId },
    UnregisteredSubdomain { circle: CircleId },
    MissingMainSubdomain { asn: AsnId },
    DuplicateMainSubdomain { asn: AsnId, roots: Vec<CircleId> },
    MainSubdomainMismatch { asn: AsnId },
    AdminNotUser { asn: AsnId },
    UserInMultipleAsns { user: UserId },
    FoundingAdminNotMember { circle: CircleId },
    BossNotMember { circle: CircleId, user: UserId },
    OwnerNotMember { circle: CircleId },
    RoleParentCrossAsn { role: RoleId },
    DanglingRoleParent { role: RoleId },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", serde_json::to_string(self).map_err(|_| fmt::Error)?)
    }
}

/// Reports every hierarchy defect of a mesh. Replicated circles whose parents
/// were never replicated show up as dangling parents.
pub fn validate_hierarchy(mesh: &Mesh) -> Result<(), Vec<Violation>> {
    let mut out = BTreeSet::new();

    // circle parent links: kinds, owners, cycles
    for c in mesh.circles.values() {
        let Some(pid) = &c.parent else { continue };
        let Some(p) = mesh.circles.get(pid) else {
            out.insert(Violation::DanglingParent { circle: c.id.clone(), parent: pid.clone() });
            continue;
        };
        let (circle, parent) = (c.id.clone(), pid.clone());
        match (&c.kind, &p.kind) {
            (CircleKind::Subdomain(_), CircleKind::Subdomain(_)) => {
                if c.host() != p.host() {
                    out.insert(Violation::SubdomainCrossAsn { circle, parent });
                }
            }
            (CircleKind::Subdomain(_), _) => {
                out.insert(Violation::SubdomainParentKind { circle, parent });
            }
            (CircleKind::PublicGroup(_), CircleKind::PrivateGroup(_)) => {
                out.insert(Violation::PublicGroupParentKind { circle, parent });
            }
            (CircleKind::PublicGroup(_), _) => {}
            (CircleKind::PrivateGroup(a), CircleKind::PrivateGroup(b)) => {
                if a.owner != b.owner {
                    out.insert(Violation::PrivateGroupCrossOwner { circle, parent });
                }
            }
            (CircleKind::PrivateGroup(_), _) => {
                out.insert(Violation::PrivateGroupParentKind { circle, parent });
            }
        }
    }
    for c in mesh.circles.values() {
        let mut seen = BTreeSet::from([c.id.clone()]);
        let mut cur = c.parent.clone();
        while let Some(p) = cur {
            if p == c.id {
                out.insert(Violation::CircleCycle { circle: c.id.clone() });
                break;
            }
            if !seen.insert(p.clone()) {
                break; // cycle not through c; reported from its own members
            }
            cur = mesh.circles.get(&p).and_then(|x| x.parent.clone());
        }
    }

    // per-circle membership invariants
    for c in mesh.circles.values() {
        match &c.kind {
            CircleKind::Subdomain(s) => {
                if !c.members.contains(&s.founding_admin) {
                    out.insert(Violation::FoundingAdminNotMember { circle: c.id.clone() });
                }
            }
            CircleKind::PublicGroup(g) => {
                if !c.members.contains(&g.owner) {
                    out.insert(Violation::OwnerNotMember { circle: c.id.clone() });
                }
                for b in g.bosses.difference(&c.members) {
                    out.insert(Violation::BossNotMember { circle: c.id.clone(), user: b.clone() });
                }
            }
            CircleKind::PrivateGroup(_) => {}
        }
    }

    // asn-level invariants
    let mut subdomain_owner: BTreeMap<&CircleId, usize> = BTreeMap::new();
    let mut user_owner: BTreeMap<&UserId, usize> = BTreeMap::new();
    for a in mesh.asns.values() {
        if !a.users.contains(&a.admin) {
            out.insert(Violation::AdminNotUser { asn: a.id.clone() });
        }
        for u in &a.users {
            *user_owner.entry(u).or_default() += 1;
        }
        let mut roots = Vec::new();
        for sd in &a.subdomains {
            *subdomain_owner.entry(sd).or_default() += 1;
            if let Some(c) = mesh.circles.get(sd) {
                if c.parent.is_none() && c.subdomain().is_some() {
                    roots.push(sd.clone());
                }
            }
        }
        // subdomains hosted here but missing from the asn's list
        for c in mesh.circles.values() {
            if c.subdomain().is_some() && c.host() == a.id && !a.subdomains.contains(&c.id) {
                out.insert(Violation::UnregisteredSubdomain { circle: c.id.clone() });
                if c.parent.is_none() {
                    roots.push(c.id.clone());
                }
            }
        }
        match roots.len() {
            0 => {
                out.insert(Violation::MissingMainSubdomain { asn: a.id.clone() });
            }
            1 => {
                if a.main_subdomain.as_ref() != Some(&roots[0]) {
                    out.insert(Violation::MainSubdomainMismatch { asn: a.id.clone() });
                }
            }
            _ => {
                roots.sort();
                out.insert(Violation::DuplicateMainSubdomain { asn: a.id.clone(), roots });
            }
        }
    }
    for (sd, n) in subdomain_owner {
        if n > 1 {
            out.insert(Violation::SubdomainInMultipleAsns { circle: sd.clone() });
        }
    }
    for (u, n) in user_owner {
        if n > 1 {
            out.insert(Violation::UserInMultipleAsns { user: u.clone() });
        }
    }

    // roles
    for r in mesh.roles.values() {
        if let Some(p) = &r.parent {
            if !mesh.roles.contains_key(p) {
                out.insert(Violation::DanglingRoleParent { role: r.id.clone() });
            } else if p.asn() != r.id.asn() {
                out.insert(Violation::RoleParentCrossAsn { role: r.id.clone() });
            }
        }
        let mut cur = r.parent.clone();
        let mut steps = 0;
        while let Some(p) = cur {
            if p == r.id {
                out.insert(Violation::RoleCycle { role: r.id.clone() });
                break;
            }
            steps += 1;
            if steps > mesh.roles.len() {
                break;
            }
            cur = mesh.roles.get(&p).and_then(|x| x.parent.clone());
        }
    }

    if out.is_empty() {
        Ok(())
    } else {
        Err(out.into_iter().collect())
    }
}
