//! In-memory store for user-supplied API keys.
//!
//! Secrets never implement `Serialize`, their `Debug` output is masked, and the
//! backing memory is zeroed when they are dropped or the vault is cleared.

use std::collections::BTreeMap;
use std::fmt;

use zeroize::Zeroizing;

/// A named secret, e.g. the key for the `serpapi` API.
#[derive(Clone)]
pub struct Secret {
    name: String,
    value: Zeroizing<String>,
}

impl Secret {
    pub fn new(name: impl Into<String>, value: impl Into<String>) -> Self {
        Self {
            name: normalize_api_name(&name.into()),
            value: Zeroizing::new(value.into()),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    /// Plaintext access. Only the sandbox injection step and the search
    /// request builder should call this.
    pub fn expose(&self) -> &str {
        &self.value
    }
}

impl fmt::Debug for Secret {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Secret({}: ***)", self.name)
    }
}

/// API names are compared case-insensitively and without surrounding noise.
pub fn normalize_api_name(name: &str) -> String {
    name.trim()
        .trim_matches(|c: char| c == '`' || c == '"' || c == '\'' || c == '<' || c == '>')
        .trim()
        .to_ascii_lowercase()
}

#[derive(Default)]
pub struct SecretVault {
    entries: BTreeMap<String, Secret>,
}

impl SecretVault {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, secret: Secret) {
        self.entries.insert(secret.name().to_string(), secret);
    }

    pub fn get(&self, api_name: &str) -> Option<&Secret> {
        self.entries.get(&normalize_api_name(api_name))
    }

    pub fn remove(&mut self, api_name: &str) -> Option<Secret> {
        self.entries.remove(&normalize_api_name(api_name))
    }

    pub fn contains(&self, api_name: &str) -> bool {
        self.get(api_name).is_some()
    }

    /// Names from `wanted` that have no stored secret.
    pub fn missing<'a>(&self, wanted: impl IntoIterator<Item = &'a String>) -> Vec<String> {
        let mut out: Vec<String> = wanted
            .into_iter()
            .map(|n| normalize_api_name(n))
            .filter(|n| !self.entries.contains_key(n))
            .collect();
        out.sort();
        out.dedup();
        out
    }

    pub fn secrets(&self) -> Vec<Secret> {
        self.entries.values().cloned().collect()
    }

    pub fn names(&self) -> Vec<String> {
        self.entries.keys().cloned().collect()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Drops every entry; each value is zeroed on drop.
    pub fn clear(&mut self) {
        self.entries.clear();
    }
}

impl fmt::Debug for SecretVault {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SecretVault")
            .field("names", &self.names())
            .finish()
    }
}
