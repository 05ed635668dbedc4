//! Persistent user-id to identity-payload assignments.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::write_atomic;
use crate::error::{Error, Result};
use crate::message::BitMessage;

pub const DEFAULT_HAMMING_FLOOR: usize = 4;

/// Random draws tried before falling back to an exhaustive scan.
const RANDOM_ATTEMPTS: usize = 4096;
/// Longest payload for which the exhaustive fallback is attempted.
const EXHAUSTIVE_LIMIT: usize = 24;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Identity {
    pub payload: BitMessage,
    /// Seconds since the Unix epoch.
    pub created_at: u64,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub note: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IdentityRegistry {
    pub payload_length: usize,
    /// Minimum pairwise Hamming distance between assigned payloads.
    pub hamming_floor: usize,
    pub seed: u64,
    pub users: BTreeMap<String, Identity>,
}

impl IdentityRegistry {
    pub fn new(payload_length: usize, hamming_floor: usize, seed: u64) -> Result<Self> {
        if payload_length == 0 {
            return Err(Error::Config("identity payloads need at least one bit".into()));
        }
        Ok(Self {
            payload_length,
            hamming_floor,
            seed,
            users: BTreeMap::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.users.len()
    }

    pub fn is_empty(&self) -> bool {
        self.users.is_empty()
    }

    pub fn get(&self, user_id: &str) -> Option<&Identity> {
        self.users.get(user_id)
    }

    /// The user whose payload equals `payload` exactly.
    pub fn lookup(&self, payload: &BitMessage) -> Option<&str> {
        self.users
            .iter()
            .find(|(_, id)| &id.payload == payload)
            .map(|(user, _)| user.as_str())
    }

    fn far_enough(&self, candidate: &BitMessage) -> bool {
        let floor = self.hamming_floor.max(1);
        self.users
            .values()
            .all(|id| id.payload.hamming(candidate).is_ok_and(|d| d >= floor))
    }

    /// Assigns a fresh payload to `user_id`, at least `hamming_floor` bits
    /// away from every existing one.
    ///
    /// The search is deterministic given the registry seed and the number of
    /// existing users. Fails with [`Error::Capacity`] when no such payload
    /// is found.
    pub fn assign(&mut self, user_id: &str, note: &str) -> Result<BitMessage> {
        if user_id.is_empty() {
            return Err(Error::Config("user id must not be empty".into()));
        }
        if self.users.contains_key(user_id) {
            return Err(Error::Config(format!("user `{user_id}` is already registered")));
        }
        let n = self.payload_length;
        if self.hamming_floor > n {
            return Err(Error::Capacity(format!(
                "a Hamming floor of {} cannot be met by {n}-bit payloads",
                self.hamming_floor
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ (self.users.len() as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
        let mut found = (0..RANDOM_ATTEMPTS)
            .map(|_| BitMessage::random(n, &mut rng))
            .find(|c| self.far_enough(c));
        if found.is_none() && n <= EXHAUSTIVE_LIMIT {
            let space = 1u64 << n;
            let start = rng.random_range(0..space);
            found = (0..space)
                .map(|i| BitMessage::from_u64((start + i) % space, n))
                .find(|c| self.far_enough(c));
        }
        let payload = found.ok_or_else(|| {
            Error::Capacity(format!(
                "no {n}-bit payload keeps distance {} from the {} registered users",
                self.hamming_floor,
                self.users.len()
            ))
        })?;
        let created_at = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        self.users.insert(
            user_id.to_string(),
            Identity {
                payload: payload.clone(),
                created_at,
                note: note.to_string(),
            },
        );
        Ok(payload)
    }

    /// Checks payload lengths and uniqueness.
    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeMap::new();
        for (user, id) in &self.users {
            if id.payload.len() != self.payload_length {
                return Err(Error::Format(format!(
                    "user `{user}` has a {}-bit payload, registry uses {}",
                    id.payload.len(),
                    self.payload_length
                )));
            }
            if let Some(other) = seen.insert(id.payload.clone(), user) {
                return Err(Error::Format(format!("users `{other}` and `{user}` share a payload")));
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let reg: Self = serde_json::from_slice(&bytes)
            .map_err(|e| Error::Format(format!("registry {}: {e}", path.display())))?;
        reg.validate()?;
        Ok(reg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut bytes = serde_json::to_vec_pretty(self)?;
        bytes.push(b'\n');
        write_atomic(path, &bytes)
    }
}

/// Exclusive advisory lock on a sidecar file next to the registry; released
/// on drop.
pub struct RegistryLock {
    file: File,
    path: PathBuf,
}

impl RegistryLock {
    pub fn acquire(registry_path: &Path) -> Result<Self> {
        let mut name = registry_path.as_os_str().to_owned();
        name.push(".lock");
        let path = PathBuf::from(name);
        let file = OpenOptions::new()
            .create(true)
            .truncate(false)
            .write(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        file.lock().map_err(|e| Error::io(&path, e))?;
        Ok(Self { file, path })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

impl Drop for RegistryLock {
    fn drop(&mut self) {
        let _ = self.file.unlock();
    }
}

/// Loads the registry at `path` (or starts `fresh` if the file is absent),
/// assigns `user_id` and writes the result back, all under the lock.
pub fn assign_persistent(path: &Path, user_id: &str, note: &str, fresh: impl FnOnce() -> Result<IdentityRegistry>) -> Result<BitMessage> {
    let _lock = RegistryLock::acquire(path)?;
    let mut reg = if path.exists() {
        IdentityRegistry::load(path)?
    } else {
        fresh()?
    };
    let payload = reg.assign(user_id, note)?;
    reg.save(path)?;
    Ok(payload)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn second_assignment_respects_floor() {
        let mut reg = IdentityRegistry::new(16, 4, 1).unwrap();
        let a = reg.assign("alice", "").unwrap();
        let b = reg.assign("bob", "").unwrap();
        assert!(a.hamming(&b).unwrap() >= 4);
        assert_eq!(reg.lookup(&b), Some("bob"));
        assert!(matches!(reg.assign("bob", ""), Err(Error::Config(_))));
    }

    #[test]
    fn impossible_floor_is_a_capacity_error() {
        let mut reg = IdentityRegistry::new(10, 11, 1).unwrap();
        assert!(matches!(reg.assign("x", ""), Err(Error::Capacity(_))));
    }

    #[test]
    fn small_space_exhausts() {
        // 3-bit payloads with floor 3: only a complementary pair fits
        let mut reg = IdentityRegistry::new(3, 3, 5).unwrap();
        let a = reg.assign("a", "").unwrap();
        let b = reg.assign("b", "").unwrap();
        assert_eq!(b, a.complement());
        assert!(matches!(reg.assign("c", ""), Err(Error::Capacity(_))));
    }

    #[test]
    fn persistence_roundtrip_and_validation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("registry.json");
        let fresh = || IdentityRegistry::new(16, 4, 9);
        let p = assign_persistent(&path, "u1", "first", fresh).unwrap();
        assign_persistent(&path, "u2", "", fresh).unwrap();
        let reg = IdentityRegistry::load(&path).unwrap();
        assert_eq!(reg.len(), 2);
        assert_eq!(reg.get("u1").unwrap().payload, p);
        assert_eq!(reg.get("u1").unwrap().note, "first");

        let mut broken = reg.clone();
        broken.users.get_mut("u2").unwrap().payload = p;
        broken.save(&path).unwrap();
        assert!(matches!(IdentityRegistry::load(&path), Err(Error::Format(_))));
    }
}
