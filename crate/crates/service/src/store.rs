//! On-disk session store: one directory per session holding
//! `session.json`, the uploaded image and one PNG per query overlay.
//! Every file is written to a temporary name and renamed into place.

use std::collections::HashMap;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use base64::engine::general_purpose::URL_SAFE_NO_PAD;
use base64::Engine;
use keyfield::Session;
use tokio::fs;

const SESSION_FILE: &str = "session.json";
const IMAGE_FILE: &str = "image.bin";

/// A 128-bit random id, base64url without padding (22 characters).
pub fn new_session_id() -> String {
    URL_SAFE_NO_PAD.encode(rand::random::<[u8; 16]>())
}

/// Rejects anything that could not have come from [`new_session_id`], which
/// also keeps path segments out of the store directory.
pub fn valid_session_id(id: &str) -> bool {
    id.len() == 22
        && id
            .bytes()
            .all(|b| b.is_ascii_alphanumeric() || b == b'-' || b == b'_')
}

#[derive(Clone)]
pub struct SessionStore {
    root: PathBuf,
    locks: Arc<Mutex<HashMap<String, Arc<tokio::sync::Mutex<()>>>>>,
}

async fn write_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let tmp = path.with_extension(format!("tmp-{:016x}", rand::random::<u64>()));
    fs::write(&tmp, bytes).await?;
    match fs::rename(&tmp, path).await {
        Ok(()) => Ok(()),
        Err(e) => {
            let _ = fs::remove_file(&tmp).await;
            Err(e)
        }
    }
}

async fn read_optional(path: &Path) -> io::Result<Option<Vec<u8>>> {
    match fs::read(path).await {
        Ok(b) => Ok(Some(b)),
        Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(None),
        Err(e) => Err(e),
    }
}

impl SessionStore {
    pub async fn open(root: impl Into<PathBuf>) -> io::Result<Self> {
        let root = root.into();
        fs::create_dir_all(&root).await?;
        Ok(Self {
            root,
            locks: Arc::default(),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn dir(&self, id: &str) -> PathBuf {
        self.root.join(id)
    }

    fn overlay_path(&self, id: &str, query_id: usize) -> PathBuf {
        self.dir(id).join(format!("overlay-{query_id}.png"))
    }

    /// Serializes work on one session; distinct sessions never block each other.
    pub fn lock(&self, id: &str) -> Arc<tokio::sync::Mutex<()>> {
        let mut locks = self.locks.lock().expect("lock table poisoned");
        locks.entry(id.to_string()).or_default().clone()
    }

    /// Writes a new session, image first so a visible `session.json` always
    /// has its image.
    pub async fn create(&self, session: &Session) -> io::Result<()> {
        let dir = self.dir(&session.session_id);
        fs::create_dir_all(&dir).await?;
        write_atomic(&dir.join(IMAGE_FILE), &session.image.bytes).await?;
        self.save(session).await
    }

    pub async fn save(&self, session: &Session) -> io::Result<()> {
        let path = self.dir(&session.session_id).join(SESSION_FILE);
        write_atomic(&path, session.to_json().as_bytes()).await
    }

    pub async fn load(&self, id: &str) -> io::Result<Option<Session>> {
        if !valid_session_id(id) {
            return Ok(None);
        }
        let dir = self.dir(id);
        let Some(meta) = read_optional(&dir.join(SESSION_FILE)).await? else {
            return Ok(None);
        };
        let image = fs::read(dir.join(IMAGE_FILE)).await?;
        let text = String::from_utf8(meta)
            .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))?;
        Session::from_json(&text, image)
            .map(Some)
            .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))
    }

    pub async fn write_overlay(&self, id: &str, query_id: usize, png: &[u8]) -> io::Result<()> {
        write_atomic(&self.overlay_path(id, query_id), png).await
    }

    pub async fn read_overlay(&self, id: &str, query_id: usize) -> io::Result<Option<Vec<u8>>> {
        if !valid_session_id(id) {
            return Ok(None);
        }
        read_optional(&self.overlay_path(id, query_id)).await
    }
}
