//! Identifier newtypes.
//!
//! ASN ids are bare tokens (`hospital`, `uni-a`). Every other entity is
//! scoped by the ASN that hosts it and is written `<asn-id>/<local-id>`, so a
//! reference carried across a federation link is never ambiguous.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("invalid {kind} id {value:?}: {reason}")]
pub struct IdError {
    pub kind: &'static str,
    pub value: String,
    pub reason: &'static str,
}

fn is_token_char(c: char) -> bool {
    c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.' | '~')
}

fn check_token(kind: &'static str, value: &str, token: &str) -> Result<(), IdError> {
    if token.is_empty() {
        return Err(IdError { kind, value: value.to_string(), reason: "empty segment" });
    }
    if !token.chars().all(is_token_char) {
        return Err(IdError { kind, value: value.to_string(), reason: "allowed characters are [A-Za-z0-9._~-]" });
    }
    Ok(())
}

/// Identifier of an autonomous social network.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct AsnId(String);

impl AsnId {
    pub fn new(value: impl Into<String>) -> Result<Self, IdError> {
        let value = value.into();
        check_token("asn", &value, &value)?;
        Ok(Self(value))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl TryFrom<String> for AsnId {
    type Error = IdError;
    fn try_from(value: String) -> Result<Self, Self::Error> {
        Self::new(value)
    }
}

impl From<AsnId> for String {
    fn from(id: AsnId) -> Self {
        id.0
    }
}

impl FromStr for AsnId {
    type Err = IdError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::new(s)
    }
}

impl fmt::Display for AsnId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

macro_rules! scoped_id {
    ($(#[$meta:meta])* $name:ident, $kind:literal) => {
        $(#[$meta])*
        #[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        #[serde(try_from = "String", into = "String")]
        pub struct $name(String);

        impl $name {
            /// Parses a `<asn>/<local>` identifier.
            pub fn new(value: impl Into<String>) -> Result<Self, IdError> {
                let value = value.into();
                let Some((asn, local)) = value.split_once('/') else {
                    return Err(IdError {
                        kind: $kind,
                        value,
                        reason: "expected <asn-id>/<local-id>",
                    });
                };
                check_token($kind, &value, asn)?;
                check_token($kind, &value, local)?;
                Ok(Self(value))
            }

            pub fn scoped(asn: &AsnId, local: &str) -> Result<Self, IdError> {
                Self::new(format!("{}/{}", asn, local))
            }

            pub fn as_str(&self) -> &str {
                &self.0
            }

            /// The ASN that hosts this entity.
            pub fn asn(&self) -> AsnId {
                AsnId(self.0.split_once('/').map(|(a, _)| a).unwrap_or_default().to_string())
            }

            pub fn local(&self) -> &str {
                self.0.split_once('/').map(|(_, l)| l).unwrap_or_default()
            }
        }

        impl TryFrom<String> for $name {
            type Error = IdError;
            fn try_from(value: String) -> Result<Self, Self::Error> {
                Self::new(value)
            }
        }

        impl From<$name> for String {
            fn from(id: $name) -> Self {
                id.0
            }
        }

        impl FromStr for $name {
            type Err = IdError;
            fn from_str(s: &str) -> Result<Self, Self::Err> {
                Self::new(s)
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&self.0)
            }
        }
    };
}

scoped_id!(
    /// A user. The prefix is the one ASN the user belongs to.
    UserId,
    "user"
);
scoped_id!(
    /// A circle of any kind (subdomain, public group, private group).
    CircleId,
    "circle"
);
scoped_id!(MessageId, "message");
scoped_id!(RoleId, "role");

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scoped_ids_split() {
        let u: UserId = "hospital/alice".parse().unwrap();
        assert_eq!(u.asn().as_str(), "hospital");
        assert_eq!(u.local(), "alice");
    }

    #[test]
    fn rejects_malformed() {
        assert!(UserId::new("alice").is_err());
        assert!(UserId::new("a/b/c").is_err());
        assert!(CircleId::new("/x").is_err());
        assert!(AsnId::new("a/b").is_err());
        assert!(AsnId::new("").is_err());
    }

    #[test]
    fn serde_validates() {
        let ok: CircleId = serde_json::from_str("\"org/C1\"").unwrap();
        assert_eq!(ok.as_str(), "org/C1");
        assert!(serde_json::from_str::<CircleId>("\"C1\"").is_err());
    }
}
