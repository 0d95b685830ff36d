//! `keys.json`: hashed API keys, atomically rewritten on every mutation.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};
use std::time::SystemTime;

use base64::Engine;
use rand::RngCore;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use subtle::ConstantTimeEq;

use super::{AccessError, Acl, ApiKeyRecord, QuotaPolicy, KEY_PREFIX};

#[derive(Debug, Default, Serialize, Deserialize)]
struct KeyFile {
    keys: Vec<ApiKeyRecord>,
}

/// Identity of the file contents on disk, used to pick up offline edits.
#[derive(Debug, Clone, PartialEq, Eq)]
struct Fingerprint {
    modified: Option<SystemTime>,
    len: u64,
    inode: u64,
}

fn fingerprint(path: &Path) -> Option<Fingerprint> {
    use std::os::unix::fs::MetadataExt;
    let meta = fs::metadata(path).ok()?;
    Some(Fingerprint {
        modified: meta.modified().ok(),
        len: meta.len(),
        inode: meta.ino(),
    })
}

pub fn hash_key(plaintext: &str) -> String {
    let digest = Sha256::digest(plaintext.as_bytes());
    let hex: String = digest.iter().map(|b| format!("{b:02x}")).collect();
    format!("sha256:{hex}")
}

/// `pmk_` followed by 32 random bytes in URL-safe base64.
pub fn generate_key() -> String {
    let mut bytes = [0u8; 32];
    rand::rng().fill_bytes(&mut bytes);
    format!(
        "{KEY_PREFIX}{}",
        base64::engine::general_purpose::URL_SAFE_NO_PAD.encode(bytes)
    )
}

fn generate_key_id() -> String {
    let mut bytes = [0u8; 6];
    rand::rng().fill_bytes(&mut bytes);
    let hex: String = bytes.iter().map(|b| format!("{b:02x}")).collect();
    format!("k_{hex}")
}

struct Snapshot {
    records: Arc<Vec<Arc<ApiKeyRecord>>>,
    fingerprint: Option<Fingerprint>,
}

/// Key store backed by a JSON file of hashed keys. Readers work on a
/// snapshot; mutations go through a single writer lock and replace the file
/// by rename. External rewrites of the file are picked up on the next
/// authentication.
pub struct KeyStore {
    path: PathBuf,
    snapshot: RwLock<Snapshot>,
    writer: Mutex<()>,
}

impl KeyStore {
    /// Opens the store; a missing file is an empty store.
    pub fn open(path: &Path) -> Result<Self, AccessError> {
        let (records, fp) = Self::read_file(path)?;
        Ok(Self {
            path: path.to_path_buf(),
            snapshot: RwLock::new(Snapshot {
                records: Arc::new(records),
                fingerprint: fp,
            }),
            writer: Mutex::new(()),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    fn read_file(path: &Path) -> Result<(Vec<Arc<ApiKeyRecord>>, Option<Fingerprint>), AccessError> {
        let fp = fingerprint(path);
        let text = match fs::read_to_string(path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok((Vec::new(), None)),
            Err(e) => return Err(AccessError::Store(format!("{}: {e}", path.display()))),
        };
        let file: KeyFile = serde_json::from_str(&text)
            .map_err(|e| AccessError::Store(format!("{}: {e}", path.display())))?;
        Ok((file.keys.into_iter().map(Arc::new).collect(), fp))
    }

    fn refresh_if_changed(&self) {
        let current = fingerprint(&self.path);
        if self.snapshot.read().unwrap().fingerprint == current {
            return;
        }
        match Self::read_file(&self.path) {
            Ok((records, fp)) => {
                *self.snapshot.write().unwrap() = Snapshot {
                    records: Arc::new(records),
                    fingerprint: fp,
                };
            }
            Err(e) => tracing::warn!(error = %e, "keeping previous key store snapshot"),
        }
    }

    pub fn records(&self) -> Arc<Vec<Arc<ApiKeyRecord>>> {
        self.refresh_if_changed();
        self.snapshot.read().unwrap().records.clone()
    }

    /// Compares the key's hash against every stored hash in constant time.
    /// Unknown and disabled keys are both `InvalidKey`.
    pub fn authenticate(&self, plaintext: &str) -> Result<Arc<ApiKeyRecord>, AccessError> {
        let presented = hash_key(plaintext);
        let mut found = None;
        for rec in self.records().iter() {
            let same = presented.as_bytes().ct_eq(rec.key_hash.as_bytes());
            if bool::from(same) {
                found = Some(rec.clone());
            }
        }
        match found {
            Some(rec) if rec.enabled => Ok(rec),
            _ => Err(AccessError::InvalidKey),
        }
    }

    pub fn get(&self, key_id: &str) -> Option<Arc<ApiKeyRecord>> {
        self.records().iter().find(|r| r.key_id == key_id).cloned()
    }

    /// Returns the new record and the plaintext key. The plaintext is not
    /// stored anywhere and cannot be recovered later.
    pub fn create_key(
        &self,
        owner: &str,
        acl: Acl,
        quota: QuotaPolicy,
    ) -> Result<(ApiKeyRecord, String), AccessError> {
        quota.validate().map_err(AccessError::Store)?;
        let plaintext = generate_key();
        let record = ApiKeyRecord {
            key_id: generate_key_id(),
            key_hash: hash_key(&plaintext),
            owner: owner.into(),
            acl,
            quota,
            enabled: true,
        };
        let rec = record.clone();
        self.mutate(move |keys| {
            keys.push(rec);
            Ok(())
        })?;
        Ok((record, plaintext))
    }

    pub fn revoke_key(&self, key_id: &str) -> Result<ApiKeyRecord, AccessError> {
        self.update(key_id, |r| r.enabled = false)
    }

    pub fn set_acl(&self, key_id: &str, acl: Acl) -> Result<ApiKeyRecord, AccessError> {
        self.update(key_id, move |r| r.acl = acl)
    }

    pub fn set_quota(&self, key_id: &str, quota: QuotaPolicy) -> Result<ApiKeyRecord, AccessError> {
        quota.validate().map_err(AccessError::Store)?;
        self.update(key_id, move |r| r.quota = quota)
    }

    fn update(
        &self,
        key_id: &str,
        f: impl FnOnce(&mut ApiKeyRecord),
    ) -> Result<ApiKeyRecord, AccessError> {
        let mut updated = None;
        self.mutate(|keys| {
            let rec = keys
                .iter_mut()
                .find(|r| r.key_id == key_id)
                .ok_or_else(|| AccessError::UnknownKeyId(key_id.into()))?;
            f(rec);
            updated = Some(rec.clone());
            Ok(())
        })?;
        Ok(updated.expect("set by mutation"))
    }

    fn mutate(
        &self,
        f: impl FnOnce(&mut Vec<ApiKeyRecord>) -> Result<(), AccessError>,
    ) -> Result<(), AccessError> {
        let _writer = self.writer.lock().unwrap();
        let (current, _) = Self::read_file(&self.path)?;
        let mut keys: Vec<ApiKeyRecord> = current.iter().map(|r| (**r).clone()).collect();
        f(&mut keys)?;
        self.write_atomic(&KeyFile { keys: keys.clone() })?;
        *self.snapshot.write().unwrap() = Snapshot {
            records: Arc::new(keys.into_iter().map(Arc::new).collect()),
            fingerprint: fingerprint(&self.path),
        };
        Ok(())
    }

    fn write_atomic(&self, file: &KeyFile) -> Result<(), AccessError> {
        let store_err = |e: std::io::Error| AccessError::Store(format!("{}: {e}", self.path.display()));
        let dir = self
            .path
            .parent()
            .filter(|p| !p.as_os_str().is_empty())
            .unwrap_or(Path::new("."));
        fs::create_dir_all(dir).map_err(store_err)?;
        let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(store_err)?;
        let body = serde_json::to_vec_pretty(file).expect("key file serializes");
        tmp.write_all(&body).map_err(store_err)?;
        tmp.write_all(b"\n").map_err(store_err)?;
        tmp.as_file().sync_all().map_err(store_err)?;
        tmp.persist(&self.path).map_err(|e| store_err(e.error))?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    fn store() -> (tempfile::TempDir, KeyStore) {
        let dir = tempfile::tempdir().unwrap();
        let store = KeyStore::open(&dir.path().join("keys.json")).unwrap();
        (dir, store)
    }

    #[test]
    fn key_format() {
        let key = generate_key();
        assert!(key.starts_with("pmk_"));
        assert_eq!(key.len(), 4 + 43);
        assert!(key[4..]
            .bytes()
            .all(|b| b.is_ascii_alphanumeric() || b == b'-' || b == b'_'));
    }

    #[test]
    fn create_then_authenticate() {
        let (_dir, store) = store();
        let acl = Acl::Models(BTreeSet::from(["epic".to_string()]));
        let (rec, plaintext) = store.create_key("alice", acl, QuotaPolicy::default()).unwrap();
        assert_eq!(store.authenticate(&plaintext).unwrap().key_id, rec.key_id);
        assert_eq!(store.get(&rec.key_id).unwrap().owner, "alice");
        assert_eq!(store.authenticate("pmk_wrong"), Err(AccessError::InvalidKey));
    }

    #[test]
    fn revoked_key_is_invalid() {
        let (_dir, store) = store();
        let (rec, plaintext) = store.create_key("bob", Acl::All, QuotaPolicy::default()).unwrap();
        store.revoke_key(&rec.key_id).unwrap();
        assert_eq!(store.authenticate(&plaintext), Err(AccessError::InvalidKey));
    }

    #[test]
    fn unknown_key_id() {
        let (_dir, store) = store();
        assert_eq!(
            store.revoke_key("k_nope"),
            Err(AccessError::UnknownKeyId("k_nope".into()))
        );
    }

    #[test]
    fn store_file_never_holds_plaintext() {
        let (dir, store) = store();
        let (rec, plaintext) = store.create_key("carol", Acl::All, QuotaPolicy::default()).unwrap();
        store.set_acl(&rec.key_id, Acl::parse("epic")).unwrap();
        let text = fs::read_to_string(dir.path().join("keys.json")).unwrap();
        assert!(!text.contains(&plaintext));
        assert!(!text.contains(&plaintext[4..]));
        assert!(text.contains(&hash_key(&plaintext)));
    }

    #[test]
    fn second_handle_sees_offline_changes() {
        let (dir, server_view) = store();
        let admin = KeyStore::open(&dir.path().join("keys.json")).unwrap();
        let (rec, plaintext) = admin.create_key("dave", Acl::All, QuotaPolicy::default()).unwrap();
        assert!(server_view.authenticate(&plaintext).is_ok());
        admin
            .set_quota(
                &rec.key_id,
                QuotaPolicy {
                    cpu_seconds_per_window: 0.5,
                    window: 60,
                    max_concurrent: 1,
                },
            )
            .unwrap();
        assert_eq!(
            server_view.authenticate(&plaintext).unwrap().quota.cpu_seconds_per_window,
            0.5
        );
        admin.revoke_key(&rec.key_id).unwrap();
        assert_eq!(server_view.authenticate(&plaintext), Err(AccessError::InvalidKey));
    }
}
