//! Model backends behind a single completion interface: a remote
//! chat-completions client plus offline deterministic backends (gold
//! replay, seeded random, heuristic five-step resolver) and a response
//! cache.

mod cache;
mod offline;
mod remote;

pub use cache::{cache_key, CacheEntry, CachedBackend, ResponseCache};
pub use offline::{HeuristicBackend, Lexicon, OracleBackend, RandomBackend};
pub use remote::{RemoteBackend, RemoteConfig};

#[cfg(test)]
pub(crate) use remote::stub;

use crate::corpus::{CorpusStore, EvalUnit};
use crate::promptkit::PromptBundle;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Decoding parameters sent with every completion request. Every field
/// has a default so config files may set only what they care about.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenParams {
    /// 0 means deterministic decoding where the protocol allows it.
    #[serde(default)]
    pub temperature: f64,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default = "default_model_name")]
    pub model_name: String,
}

fn default_max_tokens() -> u32 {
    512
}

fn default_model_name() -> String {
    "offline".to_string()
}

impl Default for GenParams {
    fn default() -> Self {
        GenParams {
            temperature: 0.0,
            max_tokens: default_max_tokens(),
            seed: None,
            model_name: default_model_name(),
        }
    }
}

/// A completion with its provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendResponse {
    /// Verbatim completion text.
    pub text: String,
    pub latency_ms: u64,
    pub from_cache: bool,
    /// (prompt, completion) token counts when the backend reports them.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_counts: Option<(u64, u64)>,
}

impl BackendResponse {
    pub fn offline(text: String, latency_ms: u64) -> BackendResponse {
        BackendResponse {
            text,
            latency_ms,
            from_cache: false,
            token_counts: None,
        }
    }
}

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("authentication failed: {0}")]
    Auth(String),

    #[error("rate limited after {attempts} attempts")]
    RateLimited { attempts: u32 },

    #[error("request timed out or kept failing: {0}")]
    Timeout(String),

    #[error("request budget exhausted ({budget} requests)")]
    BudgetExhausted { budget: u64 },

    #[error("http {status}: {detail}")]
    Http { status: u16, detail: String },

    #[error("transport error: {0}")]
    Transport(String),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("cache io error: {0}")]
    CacheIo(String),
}

/// Extra per-request context. Offline backends resolve against the unit;
/// the remote backend ignores it.
pub struct CompletionContext<'a> {
    pub unit: &'a EvalUnit,
}

/// A completion source. Implementations must be shareable across
/// concurrent workers.
pub trait Backend: Send + Sync {
    fn kind(&self) -> &'static str;

    fn complete(
        &self,
        bundle: &PromptBundle,
        params: &GenParams,
        ctx: &CompletionContext<'_>,
    ) -> Result<BackendResponse, BackendError>;
}

impl<B: Backend + ?Sized> Backend for Box<B> {
    fn kind(&self) -> &'static str {
        (**self).kind()
    }

    fn complete(
        &self,
        bundle: &PromptBundle,
        params: &GenParams,
        ctx: &CompletionContext<'_>,
    ) -> Result<BackendResponse, BackendError> {
        (**self).complete(bundle, params, ctx)
    }
}

/// Declarative backend selection for config files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum BackendSpec {
    Oracle,
    Random {
        #[serde(default = "default_p")]
        p: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        seed: Option<u64>,
    },
    Heuristic,
    Remote(RemoteConfig),
}

fn default_p() -> f64 {
    0.5
}

impl BackendSpec {
    /// Instantiate the backend. The heuristic resolver derives its lexicon
    /// from the store; `default_seed` seeds the random backend when the
    /// spec does not carry its own.
    pub fn build(
        &self,
        store: &CorpusStore,
        default_seed: u64,
    ) -> Result<Box<dyn Backend>, BackendError> {
        match self {
            BackendSpec::Oracle => Ok(Box::new(OracleBackend)),
            BackendSpec::Random { p, seed } => Ok(Box::new(RandomBackend::new(
                seed.unwrap_or(default_seed),
                *p,
            ))),
            BackendSpec::Heuristic => {
                Ok(Box::new(HeuristicBackend::new(Lexicon::from_store(store))))
            }
            BackendSpec::Remote(config) => Ok(Box::new(RemoteBackend::new(config.clone())?)),
        }
    }

    /// Backends that never leave the process (usable without network).
    pub fn is_offline(&self) -> bool {
        !matches!(self, BackendSpec::Remote(_))
    }
}
