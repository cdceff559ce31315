//! C ABI over `prism-core`.
//!
//! Conventions:
//!
//! * Every fallible function returns a [`PrismStatus`]. On failure a
//!   description is kept per thread and read with [`prism_last_error_message`].
//! * Handles are opaque. Free them with the matching `_free` function.
//! * Strings are NUL-terminated UTF-8. Strings returned through `out`
//!   parameters belong to the caller and are released with
//!   [`prism_string_free`].
//! * Nullable arguments are documented as such; every other pointer must be
//!   valid.
//! * Panics never cross the boundary; they surface as `PRISM_STATUS_INTERNAL`.

use std::cell::RefCell;
use std::collections::BTreeSet;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;
use std::sync::Arc;

use prism_core::config::Config;
use prism_core::fipm::{check_access, EvalMode};
use prism_core::gateway::{AdminCommand, Gateway, GatewayError};
use prism_core::ids::{AsnId, CircleId, MessageId, UserId};
use prism_core::model::{Mesh, Message, ModelError, Profile};
use prism_core::policy::{parse_policy_file, PolicySet};
use prism_core::privilege::{check_privilege, ActionId, AssignmentTarget, PrivilegeAssignment};
use serde::Serialize;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PrismStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    InvalidArgument = 3,
    NotFound = 4,
    Denied = 5,
    Conflict = 6,
    Unauthenticated = 7,
    Io = 8,
    Internal = 9,
}

/// Evaluation mode for [`prism_mesh_check_access`].
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PrismMode {
    PolicyChain = 0,
    MembershipAnchored = 1,
}

impl From<PrismMode> for EvalMode {
    fn from(m: PrismMode) -> Self {
        match m {
            PrismMode::PolicyChain => EvalMode::PolicyChain,
            PrismMode::MembershipAnchored => EvalMode::MembershipAnchored,
        }
    }
}

/// An in-memory mesh: users, circles, roles and their policies.
pub struct PrismMesh {
    mesh: Mesh,
    probes: u64,
}

/// A persistent instance opened from a TOML config file.
pub struct PrismGateway {
    gateway: Arc<Gateway>,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

struct Failure(PrismStatus, String);

type FfiResult<T> = Result<T, Failure>;

impl From<ModelError> for Failure {
    fn from(e: ModelError) -> Self {
        let status = match &e {
            ModelError::UnknownAsn(_)
            | ModelError::UnknownUser(_)
            | ModelError::UnknownCircle(_)
            | ModelError::UnknownRole(_) => PrismStatus::NotFound,
            ModelError::DuplicateId(_) | ModelError::SecondRoot(_) => PrismStatus::Conflict,
            ModelError::PrivilegeDenied { .. } | ModelError::NotTaggable(_) | ModelError::PermanentMember(_) => {
                PrismStatus::Denied
            }
            _ => PrismStatus::InvalidArgument,
        };
        Failure(status, e.to_string())
    }
}

impl From<GatewayError> for Failure {
    fn from(e: GatewayError) -> Self {
        let status = match e.status() {
            401 => PrismStatus::Unauthenticated,
            403 => PrismStatus::Denied,
            404 => PrismStatus::NotFound,
            409 => PrismStatus::Conflict,
            400..=499 => PrismStatus::InvalidArgument,
            _ => PrismStatus::Io,
        };
        Failure(status, e.to_string())
    }
}

fn invalid(e: impl std::fmt::Display) -> Failure {
    Failure(PrismStatus::InvalidArgument, e.to_string())
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

/// Runs `f`, recording its failure or panic.
fn guard(f: impl FnOnce() -> FfiResult<()>) -> PrismStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            PrismStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(&msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            PrismStatus::Internal
        }
    }
}

unsafe fn text<'a>(p: *const c_char, what: &str) -> FfiResult<&'a str> {
    if p.is_null() {
        return Err(Failure(PrismStatus::NullArgument, format!("{what} is null")));
    }
    CStr::from_ptr(p).to_str().map_err(|_| Failure(PrismStatus::InvalidUtf8, format!("{what} is not UTF-8")))
}

unsafe fn opt_text<'a>(p: *const c_char, what: &str) -> FfiResult<Option<&'a str>> {
    if p.is_null() {
        Ok(None)
    } else {
        text(p, what).map(Some)
    }
}

unsafe fn parsed<T: std::str::FromStr>(p: *const c_char, what: &str) -> FfiResult<T>
where
    T::Err: std::fmt::Display,
{
    text(p, what)?.parse().map_err(|e| invalid(format!("{what}: {e}")))
}

unsafe fn circle_list(items: *const *const c_char, len: usize, what: &str) -> FfiResult<BTreeSet<CircleId>> {
    if len == 0 {
        return Ok(BTreeSet::new());
    }
    if items.is_null() {
        return Err(Failure(PrismStatus::NullArgument, format!("{what} is null")));
    }
    std::slice::from_raw_parts(items, len).iter().map(|p| parsed(*p, what)).collect()
}

unsafe fn mesh_mut<'a>(m: *mut PrismMesh) -> FfiResult<&'a mut PrismMesh> {
    m.as_mut().ok_or_else(|| Failure(PrismStatus::NullArgument, "mesh is null".into()))
}

unsafe fn gateway_ref<'a>(g: *const PrismGateway) -> FfiResult<&'a PrismGateway> {
    g.as_ref().ok_or_else(|| Failure(PrismStatus::NullArgument, "gateway is null".into()))
}

unsafe fn put_string(out: *mut *mut c_char, s: String) -> FfiResult<()> {
    if out.is_null() {
        return Ok(());
    }
    let c = CString::new(s).map_err(|_| Failure(PrismStatus::Internal, "string contains NUL".into()))?;
    *out = c.into_raw();
    Ok(())
}

unsafe fn put_json(out: *mut *mut c_char, v: &impl Serialize) -> FfiResult<()> {
    put_string(out, serde_json::to_string(v).map_err(|e| Failure(PrismStatus::Internal, e.to_string()))?)
}

// ---- strings and errors -----------------------------------------------------

/// Description of the last failure on this thread, or "" after a success.
/// The pointer stays valid until the next call into this library from the
/// same thread.
#[no_mangle]
pub extern "C" fn prism_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Releases a string returned through an `out` parameter. Null is ignored.
///
/// # Safety
/// `s` must come from this library and must not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn prism_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn prism_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Parses a policy file (one rule per line, `#` comments) and writes the
/// canonical form, one rule per line, to `out` (nullable).
///
/// # Safety
/// `policy` must be a valid C string; `out` null or writable.
#[no_mangle]
pub unsafe extern "C" fn prism_policy_parse(policy: *const c_char, out: *mut *mut c_char) -> PrismStatus {
    guard(|| {
        let set = parse_policy_file(text(policy, "policy")?).map_err(invalid)?;
        put_string(out, canonical_policy(&set))
    })
}

fn canonical_policy(set: &PolicySet) -> String {
    set.rules().iter().map(|r| format!("{r}\n")).collect()
}

// ---- mesh -------------------------------------------------------------------

/// A new, empty mesh. Never null.
#[no_mangle]
pub extern "C" fn prism_mesh_new() -> *mut PrismMesh {
    Box::into_raw(Box::new(PrismMesh { mesh: Mesh::new(), probes: 0 }))
}

/// # Safety
/// `m` must come from [`prism_mesh_new`] and must not be used afterwards. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn prism_mesh_free(m: *mut PrismMesh) {
    if !m.is_null() {
        drop(Box::from_raw(m));
    }
}

/// Creates an ASN whose administrator is `<asn>/<admin_local>`.
///
/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn prism_mesh_create_asn(
    m: *mut PrismMesh,
    asn: *const c_char,
    admin_local: *const c_char,
) -> PrismStatus {
    guard(|| {
        let pm = mesh_mut(m)?;
        let asn: AsnId = parsed(asn, "asn")?;
        let c = pm.mesh.create_asn(&asn, text(admin_local, "admin_local")?, Profile::default())?;
        pm.mesh.apply_change(c);
        Ok(())
    })
}

/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn prism_mesh_register_user(
    m: *mut PrismMesh,
    asn: *const c_char,
    local: *const c_char,
) -> PrismStatus {
    guard(|| {
        let pm = mesh_mut(m)?;
        let asn: AsnId = parsed(asn, "asn")?;
        let c = pm.mesh.register_user(&asn, text(local, "local")?, Profile::default())?;
        pm.mesh.apply_change(c);
        Ok(())
    })
}

/// Creates a subdomain of `asn`. A null `parent` creates the main subdomain.
/// The new circle id is written to `out_id` (nullable).
///
/// # Safety
/// `parent` and `out_id` may be null; other pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn prism_mesh_create_subdomain(
    m: *mut PrismMesh,
    asn: *const c_char,
    name: *const c_char,
    parent: *const c_char,
    founding_admin: *const c_char,
    out_id: *mut *mut c_char,
) -> PrismStatus {
    guard(|| {
        let pm = mesh_mut(m)?;
        let asn: AsnId = parsed(asn, "asn")?;
        let parent: Option<CircleId> = opt_text(parent, "parent")?.map(str::parse).transpose().map_err(invalid)?;
        let admin: UserId = parsed(founding_admin, "founding_admin")?;
        let c = pm.mesh.create_subdomain(&asn, text(name, "name")?, parent.as_ref(), &admin)?;
        let circle = pm.mesh.apply_change(c);
        put_string(out_id, circle.id.to_string())
    })
}

/// Creates a private group owned by `owner`, optionally nested in another of
/// their private groups.
///
/// # Safety
/// `parent` and `out_id` may be null; other pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn prism_mesh_create_private_group(
    m: *mut PrismMesh,
    owner: *const c_char,
    name: *const c_char,
    parent: *const c_char,
    out_id: *mut *mut c_char,
) -> PrismStatus {
    guard(|| {
        let pm = mesh_mut(m)?;
        let owner: UserId = parsed(owner, "owner")?;
        let parent: Option<CircleId> = opt_text(parent, "parent")?.map(str::parse).transpose().map_err(invalid)?;
        let c = pm.mesh.create_private_group(&owner, text(name, "name")?, parent.as_ref())?;
        let circle = pm.mesh.apply_change(c);
        put_string(out_id, circle.id.to_string())
    })
}

/// Creates a public group. Needs `create-public-group` in the governing
/// subdomain. `policy` is a policy file and may be null.
///
/// # Safety
/// `parent`, `policy` and `out_id` may be null; other pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn prism_mesh_create_public_group(
    m: *mut PrismMesh,
    owner: *const c_char,
    name: *const c_char,
    parent: *const c_char,
    policy: *const c_char,
    out_id: *mut *mut c_char,
) -> PrismStatus {
    guard(|| {
        let pm = mesh_mut(m)?;
        let owner: UserId = parsed(owner, "owner")?;
        let parent: Option<CircleId> = opt_text(parent, "parent")?.map(str::parse).transpose().map_err(invalid)?;
        let policies = match opt_text(policy, "policy")? {
            Some(p) => parse_policy_file(p).map_err(invalid)?,
            None => PolicySet::empty(),
        };
        let c = pm.mesh.create_public_group(&owner, text(name, "name")?, parent.as_ref(), policies)?;
        let circle = pm.mesh.apply_change(c);
        put_string(out_id, circle.id.to_string())
    })
}

/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn prism_mesh_add_member(
    m: *mut PrismMesh,
    circle: *const c_char,
    user: *const c_char,
) -> PrismStatus {
    guard(|| {
        let pm = mesh_mut(m)?;
        let c = pm.mesh.add_member(&parsed(circle, "circle")?, &parsed(user, "user")?)?;
        pm.mesh.apply_change(c);
        Ok(())
    })
}

/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn prism_mesh_remove_member(
    m: *mut PrismMesh,
    circle: *const c_char,
    user: *const c_char,
) -> PrismStatus {
    guard(|| {
        let pm = mesh_mut(m)?;
        let c = pm.mesh.remove_member(&parsed(circle, "circle")?, &parsed(user, "user")?)?;
        pm.mesh.apply_change(c);
        Ok(())
    })
}

/// Replaces the policies of `circle` with the parsed policy file.
///
/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn prism_mesh_set_policies(
    m: *mut PrismMesh,
    circle: *const c_char,
    policy: *const c_char,
) -> PrismStatus {
    guard(|| {
        let pm = mesh_mut(m)?;
        let set = parse_policy_file(text(policy, "policy")?).map_err(invalid)?;
        let c = pm.mesh.set_policies(&parsed(circle, "circle")?, set)?;
        pm.mesh.apply_change(c);
        Ok(())
    })
}

/// Applies one privilege assignment such as
/// `grant create-role to user:A/bob@subdomain:A/dept`.
///
/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn prism_mesh_assign_privilege(m: *mut PrismMesh, assignment: *const c_char) -> PrismStatus {
    guard(|| {
        let pm = mesh_mut(m)?;
        let a: PrivilegeAssignment = parsed(assignment, "assignment")?;
        let effect = Some(a.effect);
        match &a.target {
            AssignmentTarget::Role { role } => {
                let c = pm.mesh.set_role_privilege(role, &a.action, effect)?;
                pm.mesh.apply_change(c);
            }
            AssignmentTarget::Subdomain { subdomain } => {
                let c = pm.mesh.set_subdomain_privilege(subdomain, &a.action, effect)?;
                pm.mesh.apply_change(c);
            }
            AssignmentTarget::User { user, subdomain } => {
                let c = pm.mesh.set_user_privilege(subdomain, user, &a.action, effect)?;
                pm.mesh.apply_change(c);
            }
        }
        Ok(())
    })
}

/// Writes whether `user` holds `action` in `subdomain` to `out_granted`.
///
/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn prism_mesh_check_privilege(
    m: *const PrismMesh,
    user: *const c_char,
    subdomain: *const c_char,
    action: *const c_char,
    out_granted: *mut bool,
) -> PrismStatus {
    guard(|| {
        let pm = m.as_ref().ok_or_else(|| Failure(PrismStatus::NullArgument, "mesh is null".into()))?;
        if out_granted.is_null() {
            return Err(Failure(PrismStatus::NullArgument, "out_granted is null".into()));
        }
        let action = ActionId::new(text(action, "action")?);
        let granted = check_privilege(&pm.mesh, &parsed(user, "user")?, &parsed(subdomain, "subdomain")?, &action)
            .map_err(|e| Failure(PrismStatus::InvalidArgument, e.to_string()))?;
        *out_granted = granted;
        Ok(())
    })
}

/// Decides whether `reader` may read a message by `author` with the given
/// tag and conflict circles. Writes the verdict to `out_allowed` and the
/// full decision as JSON to `out_explain` (nullable).
///
/// # Safety
/// `tags` and `conflicts` must point to `n_tags` and `n_conflicts` valid
/// strings (or be null when the count is 0); `out_explain` may be null.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn prism_mesh_check_access(
    m: *mut PrismMesh,
    author: *const c_char,
    tags: *const *const c_char,
    n_tags: usize,
    conflicts: *const *const c_char,
    n_conflicts: usize,
    reader: *const c_char,
    mode: PrismMode,
    out_allowed: *mut bool,
    out_explain: *mut *mut c_char,
) -> PrismStatus {
    guard(|| {
        let pm = mesh_mut(m)?;
        if out_allowed.is_null() {
            return Err(Failure(PrismStatus::NullArgument, "out_allowed is null".into()));
        }
        let author: UserId = parsed(author, "author")?;
        let reader: UserId = parsed(reader, "reader")?;
        pm.probes += 1;
        let id = MessageId::scoped(&author.asn(), &format!("ffi-probe-{}", pm.probes)).map_err(invalid)?;
        let msg = Message::new(
            id,
            author,
            "",
            circle_list(tags, n_tags, "tags")?,
            circle_list(conflicts, n_conflicts, "conflicts")?,
        )?;
        let d = check_access(&pm.mesh, &msg, &reader, mode.into());
        *out_allowed = d.is_allow();
        put_json(out_explain, &d)
    })
}

/// The whole mesh as JSON.
///
/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn prism_mesh_to_json(m: *const PrismMesh, out: *mut *mut c_char) -> PrismStatus {
    guard(|| {
        let pm = m.as_ref().ok_or_else(|| Failure(PrismStatus::NullArgument, "mesh is null".into()))?;
        put_json(out, &pm.mesh)
    })
}

// ---- gateway ----------------------------------------------------------------

/// Opens (and on first use initialises) the instance described by a TOML
/// config file, as `prism serve` would, without starting the HTTP listener.
///
/// # Safety
/// `config_path` must be a valid C string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn prism_gateway_open(config_path: *const c_char, out: *mut *mut PrismGateway) -> PrismStatus {
    guard(|| {
        if out.is_null() {
            return Err(Failure(PrismStatus::NullArgument, "out is null".into()));
        }
        *out = ptr::null_mut();
        let cfg = Config::load(Path::new(text(config_path, "config_path")?))
            .map_err(|e| Failure(PrismStatus::InvalidArgument, e.to_string()))?;
        let gateway = cfg.open().map_err(GatewayError::from)?;
        *out = Box::into_raw(Box::new(PrismGateway { gateway }));
        Ok(())
    })
}

/// Flushes pending deliveries and closes the handle. Null is ignored.
///
/// # Safety
/// `g` must come from [`prism_gateway_open`] and must not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn prism_gateway_free(g: *mut PrismGateway) {
    if !g.is_null() {
        let g = Box::from_raw(g);
        let _ = catch_unwind(AssertUnwindSafe(|| g.gateway.flush()));
    }
}

/// Logs in and writes a session token to `out_token`.
///
/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn prism_gateway_login(
    g: *const PrismGateway,
    user: *const c_char,
    password: *const c_char,
    out_token: *mut *mut c_char,
) -> PrismStatus {
    guard(|| {
        let s = gateway_ref(g)?.gateway.login(&parsed(user, "user")?, text(password, "password")?)?;
        put_string(out_token, s.token)
    })
}

/// Runs one administrative command given as JSON, e.g.
/// `{"command":"register-user","user":"bob","password":"pw"}`, and writes
/// the JSON result to `out_json` (nullable).
///
/// # Safety
/// `out_json` may be null; other pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn prism_gateway_admin(
    g: *const PrismGateway,
    token: *const c_char,
    command_json: *const c_char,
    out_json: *mut *mut c_char,
) -> PrismStatus {
    guard(|| {
        let cmd: AdminCommand = serde_json::from_str(text(command_json, "command_json")?).map_err(invalid)?;
        let v = gateway_ref(g)?.gateway.handle_admin(text(token, "token")?, cmd)?;
        put_json(out_json, &v)
    })
}

/// Posts a message and writes the receipt (`{"id":..,"status":..}`) to
/// `out_json` (nullable).
///
/// # Safety
/// `tags` and `conflicts` must point to `n_tags` and `n_conflicts` valid
/// strings (or be null when the count is 0); `out_json` may be null.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn prism_gateway_post(
    g: *const PrismGateway,
    token: *const c_char,
    content: *const c_char,
    tags: *const *const c_char,
    n_tags: usize,
    conflicts: *const *const c_char,
    n_conflicts: usize,
    out_json: *mut *mut c_char,
) -> PrismStatus {
    guard(|| {
        let r = gateway_ref(g)?.gateway.handle_post(
            text(token, "token")?,
            text(content, "content")?,
            circle_list(tags, n_tags, "tags")?,
            circle_list(conflicts, n_conflicts, "conflicts")?,
        )?;
        put_json(out_json, &r)
    })
}

/// Fetches a message the caller may read. Unknown and forbidden messages both
/// give `PRISM_STATUS_NOT_FOUND`.
///
/// # Safety
/// `out_json` may be null; other pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn prism_gateway_fetch(
    g: *const PrismGateway,
    token: *const c_char,
    message_id: *const c_char,
    out_json: *mut *mut c_char,
) -> PrismStatus {
    guard(|| {
        let m = gateway_ref(g)?.gateway.handle_fetch(text(token, "token")?, &parsed(message_id, "message_id")?)?;
        put_json(out_json, &m)
    })
}

/// The caller's inbox as a JSON array.
///
/// # Safety
/// `out_json` may be null; other pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn prism_gateway_inbox(
    g: *const PrismGateway,
    token: *const c_char,
    out_json: *mut *mut c_char,
) -> PrismStatus {
    guard(|| {
        let items = gateway_ref(g)?.gateway.inbox(text(token, "token")?)?;
        put_json(out_json, &items)
    })
}

/// Waits until every accepted post has been delivered.
///
/// # Safety
/// `g` must be a valid handle.
#[no_mangle]
pub unsafe extern "C" fn prism_gateway_flush(g: *const PrismGateway) -> PrismStatus {
    guard(|| {
        gateway_ref(g)?.gateway.flush();
        Ok(())
    })
}
