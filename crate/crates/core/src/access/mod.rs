//! The access layer: API-key authentication, per-model authorization,
//! CPU-quota accounting and request logging.

pub mod keys;
pub mod log;
pub mod quota;

use std::collections::BTreeSet;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::registry::{ModelManifest, Visibility};

pub use keys::KeyStore;
pub use log::{Outcome, RequestLog, RequestLogEntry};
pub use quota::{QuotaEngine, Reservation};

/// Request header carrying the API key.
pub const AUTH_HEADER: &str = "x-prism-auth-user";

/// Prefix of every issued key.
pub const KEY_PREFIX: &str = "pmk_";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "AclRepr", into = "AclRepr")]
pub enum Acl {
    All,
    Models(BTreeSet<String>),
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum AclRepr {
    Keyword(String),
    Models(BTreeSet<String>),
}

impl TryFrom<AclRepr> for Acl {
    type Error = String;
    fn try_from(r: AclRepr) -> Result<Self, String> {
        match r {
            AclRepr::Keyword(k) if k == "ALL" => Ok(Acl::All),
            AclRepr::Keyword(k) => Err(format!("unknown ACL keyword `{k}`")),
            AclRepr::Models(m) => Ok(Acl::Models(m)),
        }
    }
}

impl From<Acl> for AclRepr {
    fn from(a: Acl) -> Self {
        match a {
            Acl::All => AclRepr::Keyword("ALL".into()),
            Acl::Models(m) => AclRepr::Models(m),
        }
    }
}

impl Acl {
    pub fn allows(&self, model: &str) -> bool {
        match self {
            Acl::All => true,
            Acl::Models(m) => m.contains(model),
        }
    }

    /// Parses `ALL` or a comma-separated list of model names.
    pub fn parse(spec: &str) -> Self {
        if spec.trim() == "ALL" {
            Acl::All
        } else {
            Acl::Models(
                spec.split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(String::from)
                    .collect(),
            )
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuotaPolicy {
    pub cpu_seconds_per_window: f64,
    /// Window length in seconds.
    pub window: u64,
    pub max_concurrent: u32,
}

impl Default for QuotaPolicy {
    fn default() -> Self {
        Self {
            cpu_seconds_per_window: 60.0,
            window: 60,
            max_concurrent: 4,
        }
    }
}

impl QuotaPolicy {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.cpu_seconds_per_window.is_finite() && self.cpu_seconds_per_window > 0.0) {
            return Err("cpu_seconds_per_window must be positive".into());
        }
        if self.window < 1 {
            return Err("window must be at least 1 second".into());
        }
        if self.max_concurrent < 1 {
            return Err("max_concurrent must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApiKeyRecord {
    pub key_id: String,
    /// `sha256:<hex>` of the plaintext key.
    pub key_hash: String,
    pub owner: String,
    pub acl: Acl,
    pub quota: QuotaPolicy,
    pub enabled: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Caller {
    Anonymous,
    Key(Arc<ApiKeyRecord>),
}

impl Caller {
    pub fn key(&self) -> Option<&ApiKeyRecord> {
        match self {
            Caller::Anonymous => None,
            Caller::Key(k) => Some(k),
        }
    }

    /// Identity used for quota accounts and logs.
    pub fn account(&self) -> &str {
        match self {
            Caller::Anonymous => "anonymous",
            Caller::Key(k) => &k.key_id,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AccessError {
    #[error("invalid API key")]
    InvalidKey,
    #[error("access to model `{model}` is forbidden")]
    Forbidden { model: String, anonymous: bool },
    #[error("quota exceeded: {reason}; retry after {retry_after_secs}s")]
    QuotaExceeded {
        retry_after_secs: u64,
        reason: String,
    },
    #[error("unknown key id `{0}`")]
    UnknownKeyId(String),
    #[error("key store: {0}")]
    Store(String),
}

/// Resolves the auth header. An absent header is an anonymous caller.
pub fn authenticate(header_value: Option<&str>, store: &KeyStore) -> Result<Caller, AccessError> {
    match header_value {
        None => Ok(Caller::Anonymous),
        Some(key) => store.authenticate(key.trim()).map(Caller::Key),
    }
}

/// Public models admit everyone; restricted models need the model (or
/// `ALL`) in the caller's ACL.
pub fn authorize(caller: &Caller, model: &ModelManifest) -> Result<(), AccessError> {
    let allowed = match model.visibility {
        Visibility::Public => true,
        Visibility::Restricted => caller.key().is_some_and(|k| k.acl.allows(&model.name)),
    };
    if allowed {
        Ok(())
    } else {
        Err(AccessError::Forbidden {
            model: model.name.clone(),
            anonymous: matches!(caller, Caller::Anonymous),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::runtime::ResourceLimits;
    use proptest::prelude::*;

    fn manifest(name: &str, visibility: Visibility) -> ModelManifest {
        ModelManifest {
            name: name.into(),
            version: "1".into(),
            command: vec!["x".into()],
            supports_async: false,
            visibility,
            limits: ResourceLimits::default(),
            description: String::new(),
            isolation: "process".into(),
            base_dir: None,
        }
    }

    fn key(acl: Acl) -> Caller {
        Caller::Key(Arc::new(ApiKeyRecord {
            key_id: "k".into(),
            key_hash: String::new(),
            owner: "o".into(),
            acl,
            quota: QuotaPolicy::default(),
            enabled: true,
        }))
    }

    #[test]
    fn authorization_table() {
        let restricted = manifest("accept", Visibility::Restricted);
        let public = manifest("accept", Visibility::Public);
        assert!(matches!(
            authorize(&Caller::Anonymous, &restricted),
            Err(AccessError::Forbidden { anonymous: true, .. })
        ));
        assert!(authorize(&Caller::Anonymous, &public).is_ok());
        assert!(authorize(&key(Acl::All), &restricted).is_ok());
        let epic_only = key(Acl::Models(BTreeSet::from(["epic".to_string()])));
        assert!(matches!(
            authorize(&epic_only, &restricted),
            Err(AccessError::Forbidden { anonymous: false, .. })
        ));
    }

    #[test]
    fn acl_serde_forms() {
        assert_eq!(serde_json::to_string(&Acl::All).unwrap(), r#""ALL""#);
        let acl: Acl = serde_json::from_str(r#"["epic","accept"]"#).unwrap();
        assert!(acl.allows("epic") && !acl.allows("other"));
        assert!(serde_json::from_str::<Acl>(r#""SOME""#).is_err());
        assert_eq!(Acl::parse("ALL"), Acl::All);
        assert_eq!(Acl::parse("a, b"), Acl::Models(BTreeSet::from(["a".into(), "b".into()])));
    }

    proptest! {
        #[test]
        fn enlarging_acl_never_denies(
            base in proptest::collection::btree_set("[a-d]", 0..4),
            extra in proptest::collection::btree_set("[a-d]", 0..4),
            model in "[a-d]",
            restricted in any::<bool>(),
        ) {
            let vis = if restricted { Visibility::Restricted } else { Visibility::Public };
            let m = manifest(&model, vis);
            let small = key(Acl::Models(base.clone()));
            let big = key(Acl::Models(base.union(&extra).cloned().collect()));
            if authorize(&small, &m).is_ok() {
                prop_assert!(authorize(&big, &m).is_ok());
                prop_assert!(authorize(&key(Acl::All), &m).is_ok());
            }
        }
    }
}
