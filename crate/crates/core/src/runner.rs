//! Experiment orchestration: iterate evaluation units, build prompts,
//! query a backend with bounded parallelism, parse and score responses,
//! and persist per-unit records resumably.
//!
//! The records file is one JSON record per line, rewritten in unit order
//! at the end of a successful run; a resumed run skips every unit whose
//! prompt fingerprint already has a record.

use crate::backends::{
    Backend, BackendError, BackendSpec, CachedBackend, CompletionContext, GenParams, ResponseCache,
};
use crate::corpus::{
    load_native, units, validate, CorpusError, CorpusStore, Domain, EvalUnit, UnitFilter,
};
use crate::metrics::{
    aggregate, score_unit, ConfusionCounts, MetricsError, MetricsReport, ScoredUnit,
};
use crate::promptkit::{
    build_prompt, default_fewshot_bank, AblationConfig, PromptAssets, PromptBundle, PromptError,
    PromptMode, PromptOptions,
};
use crate::respparse::{extract_mentions, validate_ids, ParseResult};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Mutex;
use thiserror::Error;

pub const CONFIG_FORMAT_VERSION: u32 = 1;
pub const RECORDS_FILE: &str = "records.jsonl";
pub const SUMMARY_FILE: &str = "summary.json";

/// A complete experiment description, loadable from a JSON config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    #[serde(default = "default_format_version")]
    pub format_version: u32,
    /// Native-format corpus file.
    pub corpus_path: PathBuf,
    #[serde(default)]
    pub filter: UnitFilter,
    pub mode: PromptMode,
    pub ablation: AblationConfig,
    pub style: crate::serialize::MetadataStyle,
    pub backend: BackendSpec,
    #[serde(default)]
    pub gen: GenParams,
    #[serde(default)]
    pub seed: u64,
    pub output_dir: PathBuf,
    #[serde(default = "default_parallelism")]
    pub parallelism: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cache_dir: Option<PathBuf>,
    /// Prompt assets directory; the builtin assets when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub assets_dir: Option<PathBuf>,
    #[serde(default)]
    pub prompt_options: PromptOptions,
    /// Testing hook: stop dispatching after this many newly completed
    /// units, leaving a partial records file behind.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub interrupt_after_units: Option<usize>,
}

fn default_format_version() -> u32 {
    CONFIG_FORMAT_VERSION
}
fn default_parallelism() -> usize {
    1
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<ExperimentConfig, RunnerError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| RunnerError::Config(format!("cannot read {}: {e}", path.display())))?;
        let config: ExperimentConfig = serde_json::from_str(&text)
            .map_err(|e| RunnerError::Config(format!("{}: {e}", path.display())))?;
        if config.format_version != CONFIG_FORMAT_VERSION {
            return Err(RunnerError::Config(format!(
                "unsupported config format_version {}",
                config.format_version
            )));
        }
        Ok(config)
    }
}

/// One self-contained evaluation record: everything needed to re-score
/// without re-querying the backend.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitRecord {
    pub dialogue_id: String,
    pub turn_index: u32,
    pub domain: Domain,
    pub fingerprint: String,
    pub gold: Vec<u32>,
    pub scene_object_ids: Vec<u32>,
    pub raw_response: String,
    pub parse: ParseResult,
    pub valid_pred: Vec<u32>,
    pub dropped_pred: Vec<u32>,
    pub counts: ConfusionCounts,
    pub latency_ms: u64,
    pub from_cache: bool,
}

/// Final run artifact written to `summary.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub format_version: u32,
    /// Content hash of (config, corpus); identical experiments collide.
    pub run_id: String,
    pub config: ExperimentConfig,
    pub metrics: MetricsReport,
    pub n_units: usize,
    pub n_from_cache: usize,
    /// Fraction of units whose response referenced out-of-scene ids.
    pub dropped_id_rate: f64,
}

#[derive(Debug, Error)]
pub enum RunnerError {
    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Corpus(#[from] CorpusError),

    #[error(transparent)]
    Prompt(#[from] PromptError),

    #[error("backend failure: {0}")]
    Backend(#[from] BackendError),

    #[error(transparent)]
    Metrics(#[from] MetricsError),

    #[error("io error on {path}: {detail}")]
    Io { path: PathBuf, detail: String },

    #[error("malformed record in {file} line {line}: {detail}")]
    MalformedRecord {
        file: String,
        line: usize,
        detail: String,
    },

    #[error("run interrupted after {completed} units (partial records preserved)")]
    Interrupted { completed: usize },

    #[error("self-consistency check failed: {0}")]
    SelfCheck(String),
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> RunnerError {
    RunnerError::Io {
        path: path.to_path_buf(),
        detail: e.to_string(),
    }
}

/// Scoring policy for stored responses. Lenient drops out-of-scene ids
/// from scoring; strict counts them as false positives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoringMode {
    Lenient,
    Strict,
}

impl std::str::FromStr for ScoringMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "lenient" => Ok(ScoringMode::Lenient),
            "strict" => Ok(ScoringMode::Strict),
            other => Err(format!("unknown scoring mode `{other}`")),
        }
    }
}

/// Run a full experiment. Resumable: units whose fingerprint already has a
/// record in `<output_dir>/records.jsonl` are not re-queried.
pub fn run_experiment(config: &ExperimentConfig) -> Result<RunSummary, RunnerError> {
    if config.parallelism == 0 {
        return Err(RunnerError::Config("parallelism must be positive".into()));
    }
    let store = load_native(&config.corpus_path)?;
    let report = validate(&store);
    if !report.is_clean() {
        eprintln!(
            "warning: corpus has {} validation findings; continuing",
            report.findings.len()
        );
    }

    let all_units = units(&store, &config.filter);
    if all_units.is_empty() {
        return Err(RunnerError::Config("filter selected zero units".into()));
    }

    let assets_owned;
    let assets: &PromptAssets = match &config.assets_dir {
        Some(dir) => {
            assets_owned = PromptAssets::load(dir)?;
            &assets_owned
        }
        None => PromptAssets::builtin(),
    };
    let bank = if config.mode == PromptMode::ZeroShot {
        Vec::new()
    } else {
        default_fewshot_bank(config.style, assets)?
    };

    // Prompts are deterministic, so build them all up front; fingerprints
    // double as resume keys.
    let mut bundles = Vec::with_capacity(all_units.len());
    for unit in &all_units {
        bundles.push(build_prompt(
            unit,
            config.mode,
            config.ablation,
            config.style,
            &bank,
            assets,
            &config.prompt_options,
        )?);
    }

    let backend = config.backend.build(&store, config.seed)?;
    let backend: Box<dyn Backend> = match &config.cache_dir {
        Some(dir) => Box::new(CachedBackend::new(backend, ResponseCache::open(dir)?)),
        None => backend,
    };

    std::fs::create_dir_all(&config.output_dir).map_err(|e| io_err(&config.output_dir, e))?;
    let records_path = config.output_dir.join(RECORDS_FILE);
    let (existing, truncated_tail) = read_records_lenient(&records_path)?;
    if truncated_tail {
        // A killed run can leave a partial final line; rewrite the valid
        // prefix before appending so the file stays line-parseable.
        let refs: Vec<&UnitRecord> = existing.iter().collect();
        write_records_atomically(&records_path, &refs)?;
    }
    let known: BTreeMap<String, UnitRecord> = existing
        .into_iter()
        .map(|r| (r.fingerprint.clone(), r))
        .collect();
    let current_fps: BTreeSet<&str> = bundles.iter().map(|b| b.fingerprint.as_str()).collect();
    let stale = known
        .keys()
        .filter(|k| !current_fps.contains(k.as_str()))
        .count();
    if stale > 0 {
        eprintln!("warning: dropping {stale} records from a different configuration");
    }

    let pending: Vec<usize> = (0..all_units.len())
        .filter(|&i| !known.contains_key(&bundles[i].fingerprint))
        .collect();

    let appender = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&records_path)
        .map_err(|e| io_err(&records_path, e))?;
    let writer = Mutex::new(std::io::BufWriter::new(appender));
    let new_records: Mutex<Vec<UnitRecord>> = Mutex::new(Vec::new());
    let failure: Mutex<Option<RunnerError>> = Mutex::new(None);
    let next = AtomicUsize::new(0);
    let completed = AtomicUsize::new(0);
    let stop = AtomicBool::new(false);

    std::thread::scope(|scope| {
        for _ in 0..config.parallelism.min(pending.len().max(1)) {
            scope.spawn(|| loop {
                if stop.load(Ordering::SeqCst) {
                    break;
                }
                if let Some(limit) = config.interrupt_after_units {
                    if completed.load(Ordering::SeqCst) >= limit {
                        stop.store(true, Ordering::SeqCst);
                        break;
                    }
                }
                let slot = next.fetch_add(1, Ordering::SeqCst);
                if slot >= pending.len() {
                    break;
                }
                let index = pending[slot];
                let unit = &all_units[index];
                let bundle = &bundles[index];
                match backend.complete(bundle, &config.gen, &CompletionContext { unit }) {
                    Ok(response) => {
                        let record = make_record(
                            unit,
                            bundle,
                            &response.text,
                            response.latency_ms,
                            response.from_cache,
                        );
                        let line = serde_json::to_string(&record).expect("record serializes");
                        {
                            let mut w = writer.lock().expect("writer lock");
                            let _ = writeln!(w, "{line}");
                            let _ = w.flush();
                        }
                        new_records.lock().expect("records lock").push(record);
                        completed.fetch_add(1, Ordering::SeqCst);
                    }
                    Err(e) => {
                        let mut slot = failure.lock().expect("failure lock");
                        if slot.is_none() {
                            *slot = Some(RunnerError::Backend(e));
                        }
                        stop.store(true, Ordering::SeqCst);
                        break;
                    }
                }
            });
        }
    });

    drop(writer);
    if let Some(err) = failure.into_inner().expect("failure lock") {
        return Err(err);
    }
    let done = completed.load(Ordering::SeqCst);
    if config.interrupt_after_units.is_some() && done < pending.len() {
        return Err(RunnerError::Interrupted { completed: done });
    }

    // Rewrite the records file in unit order, merging resumed and new work.
    let mut by_fp: BTreeMap<String, UnitRecord> = known;
    for record in new_records.into_inner().expect("records lock") {
        by_fp.insert(record.fingerprint.clone(), record);
    }
    let ordered: Vec<&UnitRecord> = bundles
        .iter()
        .map(|b| by_fp.get(&b.fingerprint).expect("every unit has a record"))
        .collect();
    write_records_atomically(&records_path, &ordered)?;

    let scored: Vec<ScoredUnit> = ordered
        .iter()
        .map(|r| scored_unit(r, ScoringMode::Lenient))
        .collect();
    let metrics = aggregate(&scored)?;

    let summary = RunSummary {
        format_version: CONFIG_FORMAT_VERSION,
        run_id: run_id(config, &store),
        config: config.clone(),
        metrics,
        n_units: ordered.len(),
        n_from_cache: ordered.iter().filter(|r| r.from_cache).count(),
        dropped_id_rate: ordered
            .iter()
            .filter(|r| !r.dropped_pred.is_empty())
            .count() as f64
            / ordered.len() as f64,
    };
    let summary_path = config.output_dir.join(SUMMARY_FILE);
    let mut text = serde_json::to_string_pretty(&summary).expect("summary serializes");
    text.push('\n');
    std::fs::write(&summary_path, text).map_err(|e| io_err(&summary_path, e))?;

    // Self-consistency: the summary must equal a fresh aggregation of the
    // records file.
    let reread = read_records(&records_path)?;
    let recheck: Vec<ScoredUnit> = reread
        .iter()
        .map(|r| scored_unit(r, ScoringMode::Lenient))
        .collect();
    let recheck_metrics = aggregate(&recheck)?;
    if recheck_metrics != summary.metrics {
        return Err(RunnerError::SelfCheck(format!(
            "summary {:?} != records aggregation {:?}",
            summary.metrics, recheck_metrics
        )));
    }

    Ok(summary)
}

fn make_record(
    unit: &EvalUnit,
    bundle: &PromptBundle,
    raw_response: &str,
    latency_ms: u64,
    from_cache: bool,
) -> UnitRecord {
    let parse = extract_mentions(raw_response);
    let (valid, dropped) = validate_ids(&parse.ids, &unit.scene);
    let counts = score_unit(&unit.gold, &valid);
    UnitRecord {
        dialogue_id: unit.dialogue_id.clone(),
        turn_index: unit.turn_index,
        domain: unit.domain,
        fingerprint: bundle.fingerprint.clone(),
        gold: unit.gold.iter().copied().collect(),
        scene_object_ids: unit.scene.object_ids().into_iter().collect(),
        raw_response: raw_response.to_string(),
        parse,
        valid_pred: valid.into_iter().collect(),
        dropped_pred: dropped.into_iter().collect(),
        counts,
        latency_ms,
        from_cache,
    }
}

fn scored_unit(record: &UnitRecord, mode: ScoringMode) -> ScoredUnit {
    let gold: BTreeSet<u32> = record.gold.iter().copied().collect();
    let pred: BTreeSet<u32> = match mode {
        ScoringMode::Lenient => record.valid_pred.iter().copied().collect(),
        ScoringMode::Strict => record
            .valid_pred
            .iter()
            .chain(record.dropped_pred.iter())
            .copied()
            .collect(),
    };
    ScoredUnit {
        domain: record.domain,
        counts: score_unit(&gold, &pred),
        predicted: pred.len() as u64,
        parse_failed: record.parse.status.missing_markers || record.parse.status.invalid_tokens,
    }
}

/// Content hash of what the experiment *is* (corpus, filter, prompt
/// configuration, backend, decoding), deliberately excluding execution
/// details like output_dir or parallelism, so identical experiments
/// collide.
fn run_id(config: &ExperimentConfig, store: &CorpusStore) -> String {
    let semantic = serde_json::json!({
        "corpus": store.fingerprint(),
        "filter": config.filter,
        "mode": config.mode,
        "ablation": config.ablation,
        "style": config.style,
        "backend": config.backend,
        "gen": config.gen,
        "seed": config.seed,
        "prompt_options": config.prompt_options,
    });
    let mut hasher = Sha256::new();
    hasher.update(serde_json::to_vec(&semantic).expect("run id serializes"));
    crate::corpus::hex_encode(&hasher.finalize())[..16].to_string()
}

fn write_records_atomically(path: &Path, records: &[&UnitRecord]) -> Result<(), RunnerError> {
    let tmp = path.with_extension("jsonl.tmp");
    {
        let file = std::fs::File::create(&tmp).map_err(|e| io_err(&tmp, e))?;
        let mut w = std::io::BufWriter::new(file);
        for record in records {
            let line = serde_json::to_string(record).expect("record serializes");
            writeln!(w, "{line}").map_err(|e| io_err(&tmp, e))?;
        }
        w.flush().map_err(|e| io_err(&tmp, e))?;
    }
    std::fs::rename(&tmp, path).map_err(|e| io_err(path, e))
}

/// Strict records reader: any malformed line is an error.
pub fn read_records(path: &Path) -> Result<Vec<UnitRecord>, RunnerError> {
    let file = std::fs::File::open(path).map_err(|e| io_err(path, e))?;
    let reader = std::io::BufReader::new(file);
    let mut records = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| io_err(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: UnitRecord =
            serde_json::from_str(&line).map_err(|e| RunnerError::MalformedRecord {
                file: path.display().to_string(),
                line: i + 1,
                detail: e.to_string(),
            })?;
        records.push(record);
    }
    Ok(records)
}

/// Resume reader: tolerates a truncated final line (the shape a killed run
/// leaves behind) but rejects corruption elsewhere. The flag reports
/// whether such a tail was dropped.
fn read_records_lenient(path: &Path) -> Result<(Vec<UnitRecord>, bool), RunnerError> {
    if !path.exists() {
        return Ok((Vec::new(), false));
    }
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let lines: Vec<&str> = text.lines().collect();
    let mut records = Vec::new();
    let mut truncated_tail = false;
    for (i, line) in lines.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<UnitRecord>(line) {
            Ok(record) => records.push(record),
            Err(e) if i + 1 == lines.len() => {
                eprintln!("warning: dropping truncated final record line: {e}");
                truncated_tail = true;
            }
            Err(e) => {
                return Err(RunnerError::MalformedRecord {
                    file: path.display().to_string(),
                    line: i + 1,
                    detail: e.to_string(),
                })
            }
        }
    }
    Ok((records, truncated_tail))
}

/// Re-score a records file under a policy without any backend calls.
pub struct RescoreOutcome {
    pub metrics: MetricsReport,
    /// Units whose response referenced at least one out-of-scene id.
    pub units_with_dropped_ids: usize,
    pub dropped_id_count: u64,
}

pub fn rescore(records_path: &Path, mode: ScoringMode) -> Result<RescoreOutcome, RunnerError> {
    let records = read_records(records_path)?;
    if records.is_empty() {
        return Err(RunnerError::Config("records file is empty".into()));
    }
    let mut scored = Vec::with_capacity(records.len());
    let mut units_with_dropped = 0usize;
    let mut dropped_total = 0u64;
    for record in &records {
        // Re-derive everything from the raw response; stored parse fields
        // are not trusted.
        let parse = extract_mentions(&record.raw_response);
        let scene_ids: BTreeSet<u32> = record.scene_object_ids.iter().copied().collect();
        let valid: BTreeSet<u32> = parse.ids.intersection(&scene_ids).copied().collect();
        let dropped: BTreeSet<u32> = parse.ids.difference(&scene_ids).copied().collect();
        if !dropped.is_empty() {
            units_with_dropped += 1;
            dropped_total += dropped.len() as u64;
        }
        let pred = match mode {
            ScoringMode::Lenient => valid,
            ScoringMode::Strict => parse.ids.clone(),
        };
        let gold: BTreeSet<u32> = record.gold.iter().copied().collect();
        scored.push(ScoredUnit {
            domain: record.domain,
            counts: score_unit(&gold, &pred),
            predicted: pred.len() as u64,
            parse_failed: parse.status.missing_markers || parse.status.invalid_tokens,
        });
    }
    Ok(RescoreOutcome {
        metrics: aggregate(&scored)?,
        units_with_dropped_ids: units_with_dropped,
        dropped_id_count: dropped_total,
    })
}
