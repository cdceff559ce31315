#ifndef PRISM_H
#define PRISM_H

/* Generated by cbindgen from crates/ffi/src. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Evaluation mode for [`prism_mesh_check_access`].
 */
typedef enum PrismMode {
  PRISM_MODE_POLICY_CHAIN = 0,
  PRISM_MODE_MEMBERSHIP_ANCHORED = 1,
} PrismMode;

typedef enum PrismStatus {
  PRISM_STATUS_OK = 0,
  PRISM_STATUS_NULL_ARGUMENT = 1,
  PRISM_STATUS_INVALID_UTF8 = 2,
  PRISM_STATUS_INVALID_ARGUMENT = 3,
  PRISM_STATUS_NOT_FOUND = 4,
  PRISM_STATUS_DENIED = 5,
  PRISM_STATUS_CONFLICT = 6,
  PRISM_STATUS_UNAUTHENTICATED = 7,
  PRISM_STATUS_IO = 8,
  PRISM_STATUS_INTERNAL = 9,
} PrismStatus;

/**
 * A persistent instance opened from a TOML config file.
 */
typedef struct PrismGateway PrismGateway;

/**
 * An in-memory mesh: users, circles, roles and their policies.
 */
typedef struct PrismMesh PrismMesh;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Description of the last failure on this thread, or "" after a success.
 * The pointer stays valid until the next call into this library from the
 * same thread.
 */
const char *prism_last_error_message(void);

/**
 * Releases a string returned through an `out` parameter. Null is ignored.
 *
 * # Safety
 * `s` must come from this library and must not be used afterwards.
 */
void prism_string_free(char *s);

/**
 * Library version as a static string.
 */
const char *prism_version(void);

/**
 * Parses a policy file (one rule per line, `#` comments) and writes the
 * canonical form, one rule per line, to `out` (nullable).
 *
 * # Safety
 * `policy` must be a valid C string; `out` null or writable.
 */
enum PrismStatus prism_policy_parse(const char *policy, char **out);

/**
 * A new, empty mesh. Never null.
 */
struct PrismMesh *prism_mesh_new(void);

/**
 * # Safety
 * `m` must come from [`prism_mesh_new`] and must not be used afterwards. Null is ignored.
 */
void prism_mesh_free(struct PrismMesh *m);

/**
 * Creates an ASN whose administrator is `<asn>/<admin_local>`.
 *
 * # Safety
 * All pointers must be valid.
 */
enum PrismStatus prism_mesh_create_asn(struct PrismMesh *m,
                                       const char *asn,
                                       const char *admin_local);

/**
 * # Safety
 * All pointers must be valid.
 */
enum PrismStatus prism_mesh_register_user(struct PrismMesh *m, const char *asn, const char *local);

/**
 * Creates a subdomain of `asn`. A null `parent` creates the main subdomain.
 * The new circle id is written to `out_id` (nullable).
 *
 * # Safety
 * `parent` and `out_id` may be null; other pointers must be valid.
 */
enum PrismStatus prism_mesh_create_subdomain(struct PrismMesh *m,
                                             const char *asn,
                                             const char *name,
                                             const char *parent,
                                             const char *founding_admin,
                                             char **out_id);

/**
 * Creates a private group owned by `owner`, optionally nested in another of
 * their private groups.
 *
 * # Safety
 * `parent` and `out_id` may be null; other pointers must be valid.
 */
enum PrismStatus prism_mesh_create_private_group(struct PrismMesh *m,
                                                 const char *owner,
                                                 const char *name,
                                                 const char *parent,
                                                 char **out_id);

/**
 * Creates a public group. Needs `create-public-group` in the governing
 * subdomain. `policy` is a policy file and may be null.
 *
 * # Safety
 * `parent`, `policy` and `out_id` may be null; other pointers must be valid.
 */
enum PrismStatus prism_mesh_create_public_group(struct PrismMesh *m,
                                                const char *owner,
                                                const char *name,
                                                const char *parent,
                                                const char *policy,
                                                char **out_id);

/**
 * # Safety
 * All pointers must be valid.
 */
enum PrismStatus prism_mesh_add_member(struct PrismMesh *m, const char *circle, const char *user);

/**
 * # Safety
 * All pointers must be valid.
 */
enum PrismStatus prism_mesh_remove_member(struct PrismMesh *m,
                                          const char *circle,
                                          const char *user);

/**
 * Replaces the policies of `circle` with the parsed policy file.
 *
 * # Safety
 * All pointers must be valid.
 */
enum PrismStatus prism_mesh_set_policies(struct PrismMesh *m,
                                         const char *circle,
                                         const char *policy);

/**
 * Applies one privilege assignment such as
 * `grant create-role to user:A/bob@subdomain:A/dept`.
 *
 * # Safety
 * All pointers must be valid.
 */
enum PrismStatus prism_mesh_assign_privilege(struct PrismMesh *m, const char *assignment);

/**
 * Writes whether `user` holds `action` in `subdomain` to `out_granted`.
 *
 * # Safety
 * All pointers must be valid.
 */
enum PrismStatus prism_mesh_check_privilege(const struct PrismMesh *m,
                                            const char *user,
                                            const char *subdomain,
                                            const char *action,
                                            bool *out_granted);

/**
 * Decides whether `reader` may read a message by `author` with the given
 * tag and conflict circles. Writes the verdict to `out_allowed` and the
 * full decision as JSON to `out_explain` (nullable).
 *
 * # Safety
 * `tags` and `conflicts` must point to `n_tags` and `n_conflicts` valid
 * strings (or be null when the count is 0); `out_explain` may be null.
 */
enum PrismStatus prism_mesh_check_access(struct PrismMesh *m,
                                         const char *author,
                                         const char *const *tags,
                                         size_t n_tags,
                                         const char *const *conflicts,
                                         size_t n_conflicts,
                                         const char *reader,
                                         enum PrismMode mode,
                                         bool *out_allowed,
                                         char **out_explain);

/**
 * The whole mesh as JSON.
 *
 * # Safety
 * All pointers must be valid.
 */
enum PrismStatus prism_mesh_to_json(const struct PrismMesh *m, char **out);

/**
 * Opens (and on first use initialises) the instance described by a TOML
 * config file, as `prism serve` would, without starting the HTTP listener.
 *
 * # Safety
 * `config_path` must be a valid C string and `out` writable.
 */
enum PrismStatus prism_gateway_open(const char *config_path, struct PrismGateway **out);

/**
 * Flushes pending deliveries and closes the handle. Null is ignored.
 *
 * # Safety
 * `g` must come from [`prism_gateway_open`] and must not be used afterwards.
 */
void prism_gateway_free(struct PrismGateway *g);

/**
 * Logs in and writes a session token to `out_token`.
 *
 * # Safety
 * All pointers must be valid.
 */
enum PrismStatus prism_gateway_login(const struct PrismGateway *g,
                                     const char *user,
                                     const char *password,
                                     char **out_token);

/**
 * Runs one administrative command given as JSON, e.g.
 * `{"command":"register-user","user":"bob","password":"pw"}`, and writes
 * the JSON result to `out_json` (nullable).
 *
 * # Safety
 * `out_json` may be null; other pointers must be valid.
 */
enum PrismStatus prism_gateway_admin(const struct PrismGateway *g,
                                     const char *token,
                                     const char *command_json,
                                     char **out_json);

/**
 * Posts a message and writes the receipt (`{"id":..,"status":..}`) to
 * `out_json` (nullable).
 *
 * # Safety
 * `tags` and `conflicts` must point to `n_tags` and `n_conflicts` valid
 * strings (or be null when the count is 0); `out_json` may be null.
 */
enum PrismStatus prism_gateway_post(const struct PrismGateway *g,
                                    const char *token,
                                    const char *content,
                                    const char *const *tags,
                                    size_t n_tags,
                                    const char *const *conflicts,
                                    size_t n_conflicts,
                                    char **out_json);

/**
 * Fetches a message the caller may read. Unknown and forbidden messages both
 * give `PRISM_STATUS_NOT_FOUND`.
 *
 * # Safety
 * `out_json` may be null; other pointers must be valid.
 */
enum PrismStatus prism_gateway_fetch(const struct PrismGateway *g,
                                     const char *token,
                                     const char *message_id,
                                     char **out_json);

/**
 * The caller's inbox as a JSON array.
 *
 * # Safety
 * `out_json` may be null; other pointers must be valid.
 */
enum PrismStatus prism_gateway_inbox(const struct PrismGateway *g,
                                     const char *token,
                                     char **out_json);

/**
 * Waits until every accepted post has been delivered.
 *
 * # Safety
 * `g` must be a valid handle.
 */
enum PrismStatus prism_gateway_flush(const struct PrismGateway *g);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PRISM_H */
