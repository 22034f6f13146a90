//! Stage orchestration behind the `dstc` subcommands.
//!
//! All outputs land in the configured output directory under fixed names:
//!
//! | file                  | content                                   |
//! |-----------------------|-------------------------------------------|
//! | `matrix_cache.jsonl`  | executed cells, appended as they finish   |
//! | `selections.jsonl`    | selection audit log                       |
//! | `dpo.jsonl`           | DPO pairs                                 |
//! | `kto.jsonl`           | KTO examples                              |
//! | `manifest.json`       | config hash, seed, versions, output hashes|

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use log::{debug, info, warn};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::config::{ConfigError, PipelineConfig};
use crate::dpl::{self, DplError, TrainConfig, TrainingTrace, Universe, UniverseError};
use crate::ingest::{self, validate_entry_point, CandidateSet, IngestError, ParseStatus};
use crate::jsonl::{self, JsonlError};
use crate::pairs::{self, build_dpo, build_kto, DatasetRecords, EmitSummary, KtoExample, PairError, PreferencePair};
use crate::sandbox::{
    build_matrix_with, concat_for_execution, CellExecutor, ExecutionResult, ExecutionStatus, FeedbackMatrix,
    KnownCells, ProcessExecutor, SandboxError,
};
use crate::select::{select_all_with, SelectionLogRecord, SelectionResult, TieBreak};
use crate::stats::{self, ComparisonReport, OracleVerdicts, QualityReport, StatsError};

pub const MATRIX_CACHE_FILE: &str = "matrix_cache.jsonl";
pub const SELECTIONS_FILE: &str = "selections.jsonl";
pub const DPO_FILE: &str = "dpo.jsonl";
pub const KTO_FILE: &str = "kto.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const QUALITY_REPORT_FILE: &str = "quality_report.csv";
pub const SIMULATION_REPORT_FILE: &str = "simulation_report.csv";
pub const TRAIN_TRACE_FILE: &str = "train_trace.csv";
pub const TRAIN_POLICY_FILE: &str = "train_policy.json";

/// Versions of each stage's output contract, recorded in the manifest.
pub const STAGE_VERSIONS: [(&str, u32); 4] = [("ingest", 1), ("sandbox", 1), ("select", 1), ("pairs", 1)];

/// Distinct failure classes, each mapped to its own process exit code.
#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("sandbox error: {0}")]
    Sandbox(#[from] SandboxError),
    #[error("output error: {0}")]
    Output(String),
}

impl PipelineError {
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Output(_) => 1,
            PipelineError::Config(_) => 2,
            PipelineError::Data(_) => 3,
            PipelineError::Sandbox(_) => 4,
        }
    }
}

impl From<ConfigError> for PipelineError {
    fn from(e: ConfigError) -> Self {
        PipelineError::Config(e.to_string())
    }
}

impl From<IngestError> for PipelineError {
    fn from(e: IngestError) -> Self {
        PipelineError::Data(e.to_string())
    }
}

impl From<JsonlError> for PipelineError {
    fn from(e: JsonlError) -> Self {
        PipelineError::Data(e.to_string())
    }
}

impl From<StatsError> for PipelineError {
    fn from(e: StatsError) -> Self {
        match e {
            StatsError::InvalidModel(m) => PipelineError::Config(m),
            other => PipelineError::Data(other.to_string()),
        }
    }
}

impl From<DplError> for PipelineError {
    fn from(e: DplError) -> Self {
        match e {
            DplError::InvalidHyperparams(_) | DplError::NoSteps => PipelineError::Config(e.to_string()),
            other => PipelineError::Data(other.to_string()),
        }
    }
}

impl From<UniverseError> for PipelineError {
    fn from(e: UniverseError) -> Self {
        PipelineError::Data(e.to_string())
    }
}

impl From<PairError> for PipelineError {
    fn from(e: PairError) -> Self {
        PipelineError::Output(e.to_string())
    }
}

fn output_err(path: &Path, e: impl fmt::Display) -> PipelineError {
    PipelineError::Output(format!("{}: {e}", path.display()))
}

fn ensure_output_dir(config: &PipelineConfig) -> Result<&Path, PipelineError> {
    let dir = config.output_dir.as_path();
    std::fs::create_dir_all(dir).map_err(|e| output_err(dir, e))?;
    Ok(dir)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestSummary {
    pub instructions: usize,
    pub candidates: usize,
    /// J value → number of instructions with that many candidates.
    pub j_distribution: BTreeMap<usize, usize>,
    pub parse_failures: usize,
    pub partial_parses: usize,
    pub entry_point_mismatches: usize,
}

impl fmt::Display for IngestSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let j = match self.j_distribution.len() {
            0 => "J=0".to_string(),
            1 => format!("J={}", self.j_distribution.keys().next().copied().unwrap_or(0)),
            _ => {
                let parts: Vec<String> = self.j_distribution.iter().map(|(j, n)| format!("{j}:{n}")).collect();
                format!("J distribution {{{}}}", parts.join(", "))
            }
        };
        write!(
            f,
            "{} instructions, {}, {} parse failures, {} partial parses, {} entry-point mismatches",
            self.instructions, j, self.parse_failures, self.partial_parses, self.entry_point_mismatches
        )
    }
}

pub fn summarize(sets: &[CandidateSet]) -> IngestSummary {
    let mut summary = IngestSummary {
        instructions: sets.len(),
        candidates: 0,
        j_distribution: BTreeMap::new(),
        parse_failures: 0,
        partial_parses: 0,
        entry_point_mismatches: 0,
    };
    for cs in sets {
        summary.candidates += cs.len();
        *summary.j_distribution.entry(cs.len()).or_default() += 1;
        for (j, c) in cs.candidates.iter().enumerate() {
            match c.parse_status {
                ParseStatus::Failed => summary.parse_failures += 1,
                ParseStatus::Partial => summary.partial_parses += 1,
                ParseStatus::Ok => {}
            }
            if let (Some(ep), true) = (&cs.instruction.entry_point, c.is_ok()) {
                if !validate_entry_point(&c.code, &c.test, ep) {
                    summary.entry_point_mismatches += 1;
                    debug!("{}: candidate {j} does not mention entry point {ep}", cs.id());
                }
            }
        }
    }
    summary
}

/// Loads and validates the configured input.
pub fn cmd_ingest(config: &PipelineConfig) -> Result<(Vec<CandidateSet>, IngestSummary), PipelineError> {
    config.validate()?;
    let sets = ingest::load_candidates(config.input_path()?)?;
    let summary = summarize(&sets);
    Ok((sets, summary))
}

/// One line of the matrix cache.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheRecord {
    pub instruction_id: String,
    pub j: usize,
    pub k: usize,
    pub r: u8,
    pub status: ExecutionStatus,
    pub duration: f64,
    /// Digest of the executed script and interpreter; stale cells are rerun.
    pub fingerprint: String,
}

/// Append-only store of executed cells, for resuming interrupted runs.
pub struct MatrixCache {
    path: PathBuf,
    entries: HashMap<(String, usize, usize), CacheRecord>,
    writer: Mutex<File>,
}

impl MatrixCache {
    pub fn open(path: impl Into<PathBuf>) -> Result<Self, PipelineError> {
        let path = path.into();
        let mut entries = HashMap::new();
        if path.exists() {
            for rec in jsonl::read_tolerant::<CacheRecord>(&path)? {
                entries.insert((rec.instruction_id.clone(), rec.j, rec.k), rec);
            }
        }
        // An interrupted append may have left a partial last line; drop it so
        // new records start on a fresh line.
        if path.exists() {
            let bytes = std::fs::read(&path).map_err(|e| output_err(&path, e))?;
            if !bytes.is_empty() && !bytes.ends_with(b"\n") {
                let keep = bytes.iter().rposition(|&b| b == b'\n').map_or(0, |i| i + 1);
                let f = OpenOptions::new().write(true).open(&path).map_err(|e| output_err(&path, e))?;
                f.set_len(keep as u64).map_err(|e| output_err(&path, e))?;
            }
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| output_err(&path, e))?;
        Ok(MatrixCache {
            path,
            entries,
            writer: Mutex::new(file),
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Cached cells of `cs` whose fingerprints still match.
    pub fn known_cells(&self, cs: &CandidateSet, fingerprint: impl Fn(&str) -> String) -> KnownCells {
        let mut known = KnownCells::new();
        for (j, code) in cs.candidates.iter().enumerate() {
            for (k, test) in cs.candidates.iter().enumerate() {
                if let Some(rec) = self.entries.get(&(cs.id().to_string(), j, k)) {
                    if rec.fingerprint == fingerprint(&concat_for_execution(&code.code, &test.test)) {
                        known.insert((j, k), ExecutionResult::new(rec.status, rec.duration));
                    }
                }
            }
        }
        known
    }

    pub fn append(&self, rec: &CacheRecord) -> std::io::Result<()> {
        let mut line = serde_json::to_vec(rec)?;
        line.push(b'\n');
        let mut file = self.writer.lock().expect("cache writer lock");
        file.write_all(&line)?;
        file.flush()
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunSummary {
    pub instructions: usize,
    pub executed_cells: usize,
    pub cached_cells: usize,
    pub skipped_cells: usize,
    pub complete_selections: usize,
    pub dpo: Option<EmitSummary>,
    pub kto: Option<EmitSummary>,
}

impl fmt::Display for RunSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} instructions, {} cells executed, {} from cache, {} skipped, {} full selections",
            self.instructions, self.executed_cells, self.cached_cells, self.skipped_cells, self.complete_selections
        )?;
        if let Some(d) = self.dpo {
            write!(f, "; dpo {} written / {} filtered", d.written, d.filtered)?;
        }
        if let Some(k) = self.kto {
            write!(f, "; kto {} written / {} filtered", k.written, k.filtered)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub tool_version: String,
    pub config_hash: String,
    pub seed: u64,
    pub tie_break: String,
    pub stage_versions: BTreeMap<String, u32>,
    /// What the `prompt` field of emitted records holds.
    pub prompt_source: String,
    pub input_sha256: String,
    pub outputs: BTreeMap<String, String>,
    pub counts: BTreeMap<String, usize>,
}

fn sha256_file(path: &Path) -> Result<String, PipelineError> {
    let bytes = std::fs::read(path).map_err(|e| output_err(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn instruction_seed(seed: u64, instruction_id: &str) -> u64 {
    let digest = Sha256::digest(instruction_id.as_bytes());
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    seed ^ u64::from_le_bytes(bytes)
}

/// Selection for one matrix under the configured tie-break.
pub fn select_for(config: &PipelineConfig, m: &FeedbackMatrix) -> SelectionResult {
    let mut tie = if config.random_tie_break {
        TieBreak::seeded(instruction_seed(config.seed, &m.instruction_id))
    } else {
        TieBreak::LowestIndex
    };
    select_all_with(m, &mut tie)
}

/// Runs matrix → select → build → emit with the default process executor.
pub fn cmd_run(config: &PipelineConfig) -> Result<RunSummary, PipelineError> {
    let executor = ProcessExecutor {
        limits: config.sandbox.limits.clone(),
        command: config.sandbox.command.clone(),
    };
    run_with_executor(config, &executor)
}

/// Where the pipeline refuses to execute new cells.
struct CacheOnly;

impl CellExecutor for CacheOnly {
    fn run(&self, _script: &str) -> Result<ExecutionResult, SandboxError> {
        Err(SandboxError::Config("execution disabled and matrix cache incomplete".into()))
    }
}

pub fn run_with_executor<X: CellExecutor>(config: &PipelineConfig, executor: &X) -> Result<RunSummary, PipelineError> {
    let (sets, ingest_summary) = cmd_ingest(config)?;
    info!("{ingest_summary}");
    let out_dir = ensure_output_dir(config)?;
    let cache = MatrixCache::open(out_dir.join(MATRIX_CACHE_FILE))?;
    let command = &config.sandbox.command;
    let workers = config.sandbox.limits.max_workers;

    let executed = AtomicUsize::new(0);
    let append_error: Mutex<Option<std::io::Error>> = Mutex::new(None);
    let mut cached_cells = 0;
    let mut skipped_cells = 0;
    let mut matrices = Vec::with_capacity(sets.len());
    for cs in &sets {
        let known = cache.known_cells(cs, |script| command.fingerprint(script));
        cached_cells += known.len();
        let on_executed = |j: usize, k: usize, res: &ExecutionResult| {
            executed.fetch_add(1, Ordering::SeqCst);
            let script = concat_for_execution(&cs.candidates[j].code, &cs.candidates[k].test);
            let rec = CacheRecord {
                instruction_id: cs.id().to_string(),
                j,
                k,
                r: res.r(),
                status: res.status,
                duration: res.duration,
                fingerprint: command.fingerprint(&script),
            };
            if let Err(e) = cache.append(&rec) {
                append_error.lock().expect("lock").get_or_insert(e);
            }
        };
        let m = if config.stages.execute {
            build_matrix_with(cs, executor, workers, &known, &on_executed)?
        } else {
            build_matrix_with(cs, &CacheOnly, workers, &known, &on_executed).map_err(|e| match e {
                SandboxError::Config(m) => PipelineError::Config(format!("{}: {m}", cs.id())),
                other => PipelineError::Sandbox(other),
            })?
        };
        skipped_cells += m.cells().filter(|(_, _, c)| c.status == ExecutionStatus::ParseSkipped).count();
        matrices.push(m);
    }
    if let Some(e) = append_error.into_inner().expect("lock") {
        return Err(output_err(cache.path(), e));
    }

    let opts = config.build_options()?;
    let mut log = Vec::with_capacity(sets.len());
    let mut dpo_records = Vec::with_capacity(sets.len());
    let mut kto_records = Vec::with_capacity(sets.len());
    let mut complete = 0;
    for (cs, m) in sets.iter().zip(&matrices) {
        let sel = select_for(config, m);
        complete += sel.is_complete() as usize;
        log.push(SelectionLogRecord::new(cs.id(), m, &sel));
        dpo_records.push(build_dpo(&sel, cs, &opts));
        kto_records.push(build_kto(&sel, cs, &opts));
    }
    let sel_path = out_dir.join(SELECTIONS_FILE);
    jsonl::write(&sel_path, &log).map_err(|e| output_err(&sel_path, e))?;

    let dpo = if config.stages.emit_dpo {
        Some(pairs::emit_dataset(&DatasetRecords::Dpo(dpo_records), out_dir.join(DPO_FILE))?)
    } else {
        None
    };
    let kto = if config.stages.emit_kto {
        Some(pairs::emit_dataset(&DatasetRecords::Kto(kto_records), out_dir.join(KTO_FILE))?)
    } else {
        None
    };

    let summary = RunSummary {
        instructions: sets.len(),
        executed_cells: executed.load(Ordering::SeqCst),
        cached_cells,
        skipped_cells,
        complete_selections: complete,
        dpo,
        kto,
    };
    write_manifest(config, &summary)?;
    Ok(summary)
}

fn write_manifest(config: &PipelineConfig, summary: &RunSummary) -> Result<(), PipelineError> {
    let out_dir = config.output_dir.as_path();
    let mut outputs = BTreeMap::new();
    for name in [SELECTIONS_FILE, DPO_FILE, KTO_FILE] {
        let path = out_dir.join(name);
        let produced = match name {
            DPO_FILE => summary.dpo.is_some(),
            KTO_FILE => summary.kto.is_some(),
            _ => true,
        };
        if produced {
            outputs.insert(name.to_string(), sha256_file(&path)?);
        }
    }
    let mut counts = BTreeMap::new();
    counts.insert("instructions".to_string(), summary.instructions);
    counts.insert("complete_selections".to_string(), summary.complete_selections);
    if let Some(d) = summary.dpo {
        counts.insert("dpo_written".to_string(), d.written);
        counts.insert("dpo_filtered".to_string(), d.filtered);
    }
    if let Some(k) = summary.kto {
        counts.insert("kto_written".to_string(), k.written);
        counts.insert("kto_filtered".to_string(), k.filtered);
    }
    let manifest = Manifest {
        tool: env!("CARGO_PKG_NAME").to_string(),
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        config_hash: config.hash(),
        seed: config.seed,
        tie_break: if config.random_tie_break { "random_seeded" } else { "lowest_index" }.to_string(),
        stage_versions: STAGE_VERSIONS.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
        prompt_source: "instruction_without_entry_point_directive".to_string(),
        input_sha256: sha256_file(config.input_path()?)?,
        outputs,
        counts,
    };
    let path = out_dir.join(MANIFEST_FILE);
    let mut text = serde_json::to_string_pretty(&manifest).map_err(|e| output_err(&path, e))?;
    text.push('\n');
    std::fs::write(&path, text).map_err(|e| output_err(&path, e))
}

/// Scores a selection log against oracle verdicts and writes the report.
pub fn cmd_stats(
    config: &PipelineConfig,
    oracle_path: &Path,
    selections_path: Option<&Path>,
) -> Result<QualityReport, PipelineError> {
    let default_path = config.output_dir.join(SELECTIONS_FILE);
    let selections_path = selections_path.unwrap_or(&default_path);
    if !oracle_path.is_file() {
        return Err(PipelineError::Config(format!("oracle file {} does not exist", oracle_path.display())));
    }
    if !selections_path.is_file() {
        return Err(PipelineError::Config(format!(
            "selection log {} does not exist",
            selections_path.display()
        )));
    }
    let oracle = OracleVerdicts::load(oracle_path)?;
    let log: Vec<SelectionLogRecord> = jsonl::read(selections_path)?;
    let sels: Vec<(String, SelectionResult)> = log.iter().map(|r| (r.instruction_id.clone(), r.selection())).collect();
    let report = stats::score_dataset(sels.iter().map(|(id, s)| (id.as_str(), s)), &oracle)?;
    let out_dir = ensure_output_dir(config)?;
    let path = out_dir.join(QUALITY_REPORT_FILE);
    std::fs::write(&path, report.to_csv()).map_err(|e| output_err(&path, e))?;
    Ok(report)
}

/// Runs the latent-model comparison and writes the CSV report.
pub fn cmd_simulate(config: &PipelineConfig) -> Result<ComparisonReport, PipelineError> {
    config.validate()?;
    let report = stats::compare_selection_policies(
        &config.latent_model(),
        config.simulate.n_trials,
        config.simulate.confidence,
    )?;
    let out_dir = ensure_output_dir(config)?;
    let path = out_dir.join(SIMULATION_REPORT_FILE);
    std::fs::write(&path, report.to_csv()).map_err(|e| output_err(&path, e))?;
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Dpo,
    Kto,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainToyOutput {
    pub kind: DatasetKind,
    pub records: usize,
    pub trace: TrainingTrace<f64>,
}

/// Trains a tabular policy on an emitted dataset. Without a universe file,
/// the universe is spanned by the dataset's own responses.
pub fn cmd_train_toy(
    config: &PipelineConfig,
    kind: DatasetKind,
    dataset_path: Option<&Path>,
    universe_path: Option<&Path>,
) -> Result<TrainToyOutput, PipelineError> {
    config.validate()?;
    let default_path = config.output_dir.join(match kind {
        DatasetKind::Dpo => DPO_FILE,
        DatasetKind::Kto => KTO_FILE,
    });
    let dataset_path = dataset_path.unwrap_or(&default_path);
    if !dataset_path.is_file() {
        return Err(PipelineError::Config(format!("dataset {} does not exist", dataset_path.display())));
    }
    let (universe, data, hyper, records) = match kind {
        DatasetKind::Dpo => {
            let pairs: Vec<PreferencePair> = jsonl::read(dataset_path)?;
            let universe = match universe_path {
                Some(p) => Universe::load(p)?,
                None => Universe::from_pairs(&pairs),
            };
            let data = universe.intern_pairs(&pairs)?;
            (universe, data, config.dpl.dpo_hyperparams(), pairs.len())
        }
        DatasetKind::Kto => {
            let examples: Vec<KtoExample> = jsonl::read(dataset_path)?;
            let universe = match universe_path {
                Some(p) => Universe::load(p)?,
                None => Universe::from_kto(&examples),
            };
            let data = universe.intern_kto(&examples)?;
            (universe, data, config.dpl.kto_hyperparams(), examples.len())
        }
    };
    if data.is_empty() {
        return Err(PipelineError::Data(format!("dataset {} is empty", dataset_path.display())));
    }
    let reference = universe.reference_policy::<f64>();
    let train_cfg = TrainConfig {
        steps: config.dpl.steps,
        learning_rate: config.dpl.learning_rate,
    };
    let (policy, trace) = dpl::train_toy(&reference, &data, &hyper, &train_cfg)?;
    if trace.final_metric <= trace.initial_metric {
        warn!(
            "training did not improve the preference metric ({} -> {})",
            trace.initial_metric, trace.final_metric
        );
    }

    let out_dir = ensure_output_dir(config)?;
    let trace_path = out_dir.join(TRAIN_TRACE_FILE);
    let mut csv = String::from("step,loss\n");
    for (i, l) in trace.losses.iter().enumerate() {
        csv.push_str(&format!("{i},{l}\n"));
    }
    csv.push_str(&format!("{},{}\n", trace.losses.len(), trace.final_loss));
    std::fs::write(&trace_path, csv).map_err(|e| output_err(&trace_path, e))?;

    let policy_path = out_dir.join(TRAIN_POLICY_FILE);
    let dump = serde_json::json!({
        "universe": universe.definition(),
        "scores": policy.scores(),
        "initial_metric": trace.initial_metric,
        "final_metric": trace.final_metric,
    });
    let text = serde_json::to_string_pretty(&dump).map_err(|e| output_err(&policy_path, e))?;
    std::fs::write(&policy_path, text + "\n").map_err(|e| output_err(&policy_path, e))?;

    Ok(TrainToyOutput { kind, records, trace })
}
