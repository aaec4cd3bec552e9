//! Bearer-token authentication. The service only needs to know who is
//! calling; [`StaticTokens`] is the default backend.

use std::collections::HashMap;
use std::path::Path;

use chrono::{DateTime, Utc};
use retgrade_core::model::GraderIdentity;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Authenticated caller.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Principal {
    /// Grader the token is bound to, if any.
    pub grader: Option<GraderIdentity>,
    /// May create datasets and act as adjudication facilitator.
    pub admin: bool,
}

pub trait Authenticator: Send + Sync {
    fn authenticate(&self, token: &str, now: DateTime<Utc>) -> Option<Principal>;
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenEntry {
    pub token: String,
    #[serde(default)]
    pub grader: Option<GraderIdentity>,
    #[serde(default)]
    pub admin: bool,
    #[serde(default)]
    pub expires_at: Option<DateTime<Utc>>,
}

#[derive(Debug, Error)]
pub enum AuthError {
    #[error("cannot read token file {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("token file {path} is not a JSON list of tokens: {source}")]
    Parse {
        path: String,
        #[source]
        source: serde_json::Error,
    },
    #[error("token listed twice")]
    DuplicateToken,
}

/// Fixed token list, usually loaded from a JSON file.
#[derive(Debug, Clone, Default)]
pub struct StaticTokens {
    entries: HashMap<String, TokenEntry>,
}

impl StaticTokens {
    pub fn new(entries: impl IntoIterator<Item = TokenEntry>) -> Result<Self, AuthError> {
        let mut map = HashMap::new();
        for e in entries {
            if map.insert(e.token.clone(), e).is_some() {
                return Err(AuthError::DuplicateToken);
            }
        }
        Ok(Self { entries: map })
    }

    pub fn load(path: &Path) -> Result<Self, AuthError> {
        let shown = path.display().to_string();
        let text = std::fs::read_to_string(path).map_err(|source| AuthError::Io {
            path: shown.clone(),
            source,
        })?;
        let entries: Vec<TokenEntry> =
            serde_json::from_str(&text).map_err(|source| AuthError::Parse { path: shown, source })?;
        Self::new(entries)
    }
}

impl Authenticator for StaticTokens {
    fn authenticate(&self, token: &str, now: DateTime<Utc>) -> Option<Principal> {
        let e = self.entries.get(token)?;
        if e.expires_at.is_some_and(|t| t <= now) {
            return None;
        }
        Some(Principal {
            grader: e.grader.clone(),
            admin: e.admin,
        })
    }
}
