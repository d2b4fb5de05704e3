use std::collections::{BTreeMap, HashMap};
use std::sync::Mutex;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Name length whose delete is acknowledged but never applied.
pub const UNDELETABLE_NAME_LEN: usize = 255;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CreateOutcome {
    Created,
    Exists,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DeleteOutcome {
    /// Reported as deleted; `removed` says whether the entry actually went.
    Deleted { removed: bool },
    NotFound,
}

/// Volume-type names keyed to their creation time (unix millis).
#[derive(Debug)]
pub struct VolumeTypeStore {
    types: Mutex<BTreeMap<String, i64>>,
    delete_bug: bool,
}

impl VolumeTypeStore {
    pub fn new(delete_bug: bool) -> Self {
        VolumeTypeStore {
            types: Mutex::new(BTreeMap::new()),
            delete_bug,
        }
    }

    pub fn create(&self, name: &str, now_ms: i64) -> CreateOutcome {
        let mut types = self.types.lock().unwrap();
        if types.contains_key(name) {
            return CreateOutcome::Exists;
        }
        types.insert(name.to_string(), now_ms);
        CreateOutcome::Created
    }

    pub fn delete(&self, name: &str) -> DeleteOutcome {
        let mut types = self.types.lock().unwrap();
        if !types.contains_key(name) {
            return DeleteOutcome::NotFound;
        }
        if self.delete_bug && name.chars().count() == UNDELETABLE_NAME_LEN {
            return DeleteOutcome::Deleted { removed: false };
        }
        types.remove(name);
        DeleteOutcome::Deleted { removed: true }
    }

    pub fn list(&self) -> Vec<String> {
        self.types.lock().unwrap().keys().cloned().collect()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.types.lock().unwrap().contains_key(name)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SessionEntry {
    pub username: String,
    pub issued_at_ms: i64,
    pub valid: bool,
}

/// Issued session tokens.
///
/// With rotation on, logout drops the token outright. With rotation off the
/// entry is only flagged invalid and lookups keep honouring it, which is how
/// the unpatched dashboard behaved.
#[derive(Debug)]
pub struct SessionTable {
    inner: Mutex<SessionInner>,
    rotate_on_logout: bool,
}

#[derive(Debug)]
struct SessionInner {
    sessions: HashMap<String, SessionEntry>,
    rng: ChaCha8Rng,
}

impl SessionTable {
    pub fn new(seed: u64, rotate_on_logout: bool) -> Self {
        SessionTable {
            inner: Mutex::new(SessionInner {
                sessions: HashMap::new(),
                rng: ChaCha8Rng::seed_from_u64(seed),
            }),
            rotate_on_logout,
        }
    }

    /// Issues a fresh 32-hex-character token for `username`.
    pub fn issue(&self, username: &str, now_ms: i64) -> String {
        let mut inner = self.inner.lock().unwrap();
        loop {
            let token: String = (0..16)
                .map(|_| format!("{:02x}", inner.rng.gen::<u8>()))
                .collect();
            if inner.sessions.contains_key(&token) {
                continue;
            }
            inner.sessions.insert(
                token.clone(),
                SessionEntry {
                    username: username.to_string(),
                    issued_at_ms: now_ms,
                    valid: true,
                },
            );
            return token;
        }
    }

    /// Returns the user a token authenticates, if any.
    pub fn authenticate(&self, token: &str) -> Option<String> {
        let inner = self.inner.lock().unwrap();
        let entry = inner.sessions.get(token)?;
        (entry.valid || !self.rotate_on_logout).then(|| entry.username.clone())
    }

    /// Ends a session. Returns false when the token was unknown.
    pub fn logout(&self, token: &str) -> bool {
        let mut inner = self.inner.lock().unwrap();
        if self.rotate_on_logout {
            return inner.sessions.remove(token).is_some();
        }
        match inner.sessions.get_mut(token) {
            Some(entry) => {
                entry.valid = false;
                true
            }
            None => false,
        }
    }

    pub fn get(&self, token: &str) -> Option<SessionEntry> {
        self.inner.lock().unwrap().sessions.get(token).cloned()
    }

    pub fn rotates(&self) -> bool {
        self.rotate_on_logout
    }
}
