use std::collections::HashMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use super::{complete, fingerprint, request_digest, BackendConfig, ChatBackend, ChatMessage, LlmError, RawAnswer};

const HEADER_PREFIX: &str = "#vpl-cache fingerprint=";

/// On-disk answer store: `<dir>/<first 2 hex>/<digest>.resp`.
///
/// Each file is a one-line header carrying the fingerprint and the answer's
/// byte length, followed by the answer verbatim. Writes go through a
/// temporary file and a rename; a per-key lock makes concurrent identical
/// requests wait for the first one instead of paying twice.
#[derive(Debug)]
pub struct ResponseCache {
    dir: PathBuf,
    locks: Mutex<HashMap<String, Arc<Mutex<()>>>>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CacheLookup {
    Hit(String),
    Miss,
    /// Present but unreadable, truncated or for another request.
    Corrupt(String),
}

impl ResponseCache {
    pub fn new(dir: impl Into<PathBuf>) -> io::Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        Ok(Self {
            dir,
            locks: Mutex::new(HashMap::new()),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn entry_path(&self, key: &str) -> PathBuf {
        self.dir.join(&key[..2]).join(format!("{key}.resp"))
    }

    fn key_lock(&self, key: &str) -> Arc<Mutex<()>> {
        let mut locks = self.locks.lock().unwrap_or_else(|e| e.into_inner());
        locks.entry(key.to_string()).or_default().clone()
    }

    pub fn lookup(&self, key: &str, fingerprint: &str) -> CacheLookup {
        let path = self.entry_path(key);
        let bytes = match fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == io::ErrorKind::NotFound => return CacheLookup::Miss,
            Err(e) => return CacheLookup::Corrupt(e.to_string()),
        };
        let Ok(text) = String::from_utf8(bytes) else {
            return CacheLookup::Corrupt("not UTF-8".into());
        };
        let Some((header, body)) = text.split_once('\n') else {
            return CacheLookup::Corrupt("missing header".into());
        };
        let Some((fp, len)) = header
            .strip_prefix(HEADER_PREFIX)
            .and_then(|rest| rest.rsplit_once(" bytes="))
        else {
            return CacheLookup::Corrupt("bad header".into());
        };
        if fp != fingerprint {
            return CacheLookup::Corrupt(format!("fingerprint {fp} does not match"));
        }
        match len.parse::<usize>() {
            Ok(n) if n == body.len() => CacheLookup::Hit(body.to_string()),
            _ => CacheLookup::Corrupt(format!("length mismatch (header {len}, body {})", body.len())),
        }
    }

    pub fn store(&self, key: &str, fingerprint: &str, content: &str) -> io::Result<()> {
        let path = self.entry_path(key);
        let parent = path.parent().expect("entry has a parent dir");
        fs::create_dir_all(parent)?;
        let tmp = parent.join(format!(".{key}.{}.tmp", std::process::id()));
        fs::write(
            &tmp,
            format!("{HEADER_PREFIX}{fingerprint} bytes={}\n{content}", content.len()),
        )?;
        fs::rename(&tmp, &path)
    }
}

/// [`complete`] behind the cache. Hits never touch the backend.
pub fn cached_complete(
    messages: &[ChatMessage],
    cfg: &BackendConfig,
    cache: &ResponseCache,
    backend: &dyn ChatBackend,
) -> Result<RawAnswer, LlmError> {
    let key = request_digest(messages, cfg);
    let fp = fingerprint(messages, cfg);
    let lock = cache.key_lock(&key);
    let _guard = lock.lock().unwrap_or_else(|e| e.into_inner());
    match cache.lookup(&key, &fp) {
        CacheLookup::Hit(content) => {
            return Ok(RawAnswer {
                content,
                backend_fingerprint: fp,
                cached: true,
                latency: None,
            })
        }
        CacheLookup::Corrupt(why) => {
            log::warn!("cache entry {} unusable ({why}); refetching", cache.entry_path(&key).display());
        }
        CacheLookup::Miss => {}
    }
    let answer = complete(messages, cfg, backend)?;
    if let Err(e) = cache.store(&key, &fp, &answer.content) {
        log::warn!("could not write cache entry for {key}: {e}");
    }
    Ok(answer)
}
