//! Append-only response cache: one human-inspectable JSON file per
//! (prompt, params) key. Writes are serialized and atomic (temp file +
//! rename); reads are lock-free.

use super::{Backend, BackendError, BackendResponse, CompletionContext, GenParams};
use crate::corpus::hex_encode;
use crate::promptkit::PromptBundle;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

/// Stable content key over everything that determines a completion:
/// prompt texts, model name, temperature, max_tokens, and seed.
pub fn cache_key(bundle: &PromptBundle, params: &GenParams) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bundle.system_text.as_bytes());
    hasher.update([0x1f]);
    hasher.update(bundle.user_text.as_bytes());
    hasher.update([0x1f]);
    hasher.update(params.model_name.as_bytes());
    hasher.update([0x1f]);
    hasher.update(format!("{:?}", params.temperature).as_bytes());
    hasher.update([0x1f]);
    hasher.update(params.max_tokens.to_le_bytes());
    hasher.update([0x1f]);
    hasher.update(format!("{:?}", params.seed).as_bytes());
    hex_encode(&hasher.finalize())
}

/// One cached request + response record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub key: String,
    pub model_name: String,
    pub temperature: f64,
    pub max_tokens: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub system_text: String,
    pub user_text: String,
    pub response_text: String,
    pub latency_ms: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_counts: Option<(u64, u64)>,
}

/// Directory-backed cache, one file per entry.
pub struct ResponseCache {
    dir: PathBuf,
    write_lock: Mutex<()>,
}

impl ResponseCache {
    pub fn open(dir: &Path) -> Result<ResponseCache, BackendError> {
        std::fs::create_dir_all(dir).map_err(|e| BackendError::CacheIo(e.to_string()))?;
        Ok(ResponseCache {
            dir: dir.to_path_buf(),
            write_lock: Mutex::new(()),
        })
    }

    fn path_for(&self, key: &str) -> PathBuf {
        self.dir.join(format!("{key}.json"))
    }

    pub fn get(&self, key: &str) -> Option<CacheEntry> {
        let text = std::fs::read_to_string(self.path_for(key)).ok()?;
        serde_json::from_str(&text).ok()
    }

    pub fn put(&self, entry: &CacheEntry) -> Result<(), BackendError> {
        let _guard = self.write_lock.lock().expect("cache lock");
        let path = self.path_for(&entry.key);
        if path.exists() {
            return Ok(()); // append-only: first writer wins
        }
        let tmp = self.dir.join(format!(".{}.tmp", entry.key));
        let text = serde_json::to_string_pretty(entry)
            .map_err(|e| BackendError::CacheIo(e.to_string()))?;
        std::fs::write(&tmp, text).map_err(|e| BackendError::CacheIo(e.to_string()))?;
        std::fs::rename(&tmp, &path).map_err(|e| BackendError::CacheIo(e.to_string()))?;
        Ok(())
    }

    pub fn len(&self) -> usize {
        std::fs::read_dir(&self.dir)
            .map(|rd| {
                rd.filter_map(|e| e.ok())
                    .filter(|e| e.path().extension().map(|x| x == "json").unwrap_or(false))
                    .count()
            })
            .unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Wraps any backend with the cache: hits return the stored text with
/// `from_cache` set, misses go through and are recorded.
pub struct CachedBackend<B: Backend> {
    inner: B,
    cache: ResponseCache,
}

impl<B: Backend> CachedBackend<B> {
    pub fn new(inner: B, cache: ResponseCache) -> CachedBackend<B> {
        CachedBackend { inner, cache }
    }
}

impl<B: Backend> Backend for CachedBackend<B> {
    fn kind(&self) -> &'static str {
        self.inner.kind()
    }

    fn complete(
        &self,
        bundle: &PromptBundle,
        params: &GenParams,
        ctx: &CompletionContext<'_>,
    ) -> Result<BackendResponse, BackendError> {
        let key = cache_key(bundle, params);
        if let Some(entry) = self.cache.get(&key) {
            return Ok(BackendResponse {
                text: entry.response_text,
                latency_ms: entry.latency_ms,
                from_cache: true,
                token_counts: entry.token_counts,
            });
        }
        let response = self.inner.complete(bundle, params, ctx)?;
        self.cache.put(&CacheEntry {
            key,
            model_name: params.model_name.clone(),
            temperature: params.temperature,
            max_tokens: params.max_tokens,
            seed: params.seed,
            system_text: bundle.system_text.clone(),
            user_text: bundle.user_text.clone(),
            response_text: response.text.clone(),
            latency_ms: response.latency_ms,
            token_counts: response.token_counts,
        })?;
        Ok(response)
    }
}
