//! Two-phase study runner: condition matrix × seeds, resumable run
//! directories, summary tables and charts.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::{self, Write as _};
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::{self, Benchmark, BenchmarkSpec, CorpusError, Dataset, Lang, TaskFamily, Vocab};
use crate::drift::{self, DriftError};
use crate::engine::{train_phase, Checkpoint, Decode, EngineError, ModelConfig, TrainConfig};
use crate::eval::{self, EvalError, EvalReport, EvalSuite};
use crate::similarity::{self, Embedder, SampleSize, SimilarityError, SimilarityReport};
use crate::rng;
use crate::strategies::{self, Granularity, PlanInputs, Strategy, StrategyError};
use crate::svg;

#[derive(Debug, Error)]
pub enum StudyError {
    #[error("invalid experiment config: {0}")]
    Config(String),
    #[error(
        "{dir} holds results for config {found}, but this config hashes to {expected}; \
         pick a fresh output directory or restore the original config"
    )]
    HashMismatch {
        dir: PathBuf,
        found: String,
        expected: String,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        source: serde_json::Error,
    },
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Strategy(#[from] StrategyError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Drift(#[from] DriftError),
    #[error(transparent)]
    Similarity(#[from] SimilarityError),
}

impl StudyError {
    /// Errors the user can fix by changing inputs, as opposed to broken
    /// invariants inside the pipeline.
    pub fn is_user_error(&self) -> bool {
        matches!(
            self,
            StudyError::Config(_) | StudyError::HashMismatch { .. } | StudyError::Io { .. } | StudyError::Json { .. }
        )
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> StudyError + '_ {
    move |source| StudyError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), StudyError> {
    fs::write(path, contents).map_err(io_err(path))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, StudyError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|source| StudyError::Json {
        path: path.to_path_buf(),
        source,
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), StudyError> {
    let mut text = serde_json::to_string_pretty(value).expect("study records serialise");
    text.push('\n');
    write(path, text)
}

/// Which family set Phase 1 trains on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum PhaseOneSet {
    A,
    B,
}

impl PhaseOneSet {
    pub fn families(self) -> &'static [TaskFamily] {
        match self {
            PhaseOneSet::A => &TaskFamily::SET_A,
            PhaseOneSet::B => &TaskFamily::SET_B,
        }
    }

    pub fn dataset(self, b: &Benchmark) -> &Dataset {
        match self {
            PhaseOneSet::A => &b.phase1_a,
            PhaseOneSet::B => &b.phase1_b,
        }
    }
}

impl fmt::Display for PhaseOneSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PhaseOneSet::A => "A",
            PhaseOneSet::B => "B",
        })
    }
}

impl FromStr for PhaseOneSet {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "A" | "a" => Ok(PhaseOneSet::A),
            "B" | "b" => Ok(PhaseOneSet::B),
            _ => Err(format!("unknown family set `{s}` (expected A or B)")),
        }
    }
}

/// One row of the condition matrix.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Condition {
    pub phase1: PhaseOneSet,
    pub strategy: Strategy,
}

impl Condition {
    /// Directory name, e.g. `B-GR_10`.
    pub fn name(&self) -> String {
        format!("{}-{}", self.phase1, self.strategy.label())
    }
}

/// Everything that determines a study's numbers. `out` only chooses where
/// results land and does not enter the config hash.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub benchmark: BenchmarkSpec,
    /// Spec file that replaces `benchmark` when set.
    pub benchmark_file: Option<PathBuf>,
    pub model: ModelConfig,
    pub phase1: TrainConfig,
    pub phase2: TrainConfig,
    pub conditions: Vec<Condition>,
    pub seeds: Vec<u64>,
    pub out: Option<PathBuf>,
    pub decode: Decode,
    pub max_new: usize,
    pub similarity_samples: SampleSize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::paper_analog()
    }
}

pub const PRESETS: [&str; 3] = ["paper-analog", "paper", "smoke"];

impl ExperimentConfig {
    /// Both Phase-1 sets crossed with every mitigation and baseline, five
    /// seeds, desk-scale model.
    pub fn paper_analog() -> Self {
        let model = ModelConfig::default();
        let half = model.n_layers.div_ceil(2);
        let strategies = [
            Strategy::None,
            Strategy::LfH1 { k: half, seed: 0 },
            Strategy::LfH2 {
                k: half,
                granularity: Granularity::PerKindPerHead,
            },
            Strategy::Gr { fraction: 0.05 },
            Strategy::Gr { fraction: 0.10 },
            Strategy::Er { fraction: 0.10 },
            Strategy::Lora { rank: 4 },
        ];
        let conditions = [PhaseOneSet::A, PhaseOneSet::B]
            .into_iter()
            .flat_map(|phase1| strategies.iter().map(move |&strategy| Condition { phase1, strategy }))
            .collect();
        Self {
            benchmark: BenchmarkSpec::default(),
            benchmark_file: None,
            model,
            phase1: TrainConfig::default(),
            phase2: TrainConfig::default(),
            conditions,
            seeds: (0..5).collect(),
            out: None,
            decode: Decode::Greedy,
            max_new: 16,
            similarity_samples: SampleSize::DEFAULT,
        }
    }

    /// The paper-analog matrix trained with the published learning rate.
    pub fn paper() -> Self {
        Self {
            phase1: TrainConfig::paper(),
            phase2: TrainConfig::paper(),
            ..Self::paper_analog()
        }
    }

    /// Seconds-scale configuration for demos and plumbing tests.
    pub fn smoke() -> Self {
        Self {
            benchmark: BenchmarkSpec {
                phase1_per_family: 24,
                phase2_per_family: 24,
                eval_per_family: 6,
                drift_per_family: 4,
                ..BenchmarkSpec::default()
            },
            model: ModelConfig {
                n_layers: 2,
                n_heads: 2,
                d_model: 16,
                d_ff: 32,
                ..ModelConfig::default()
            },
            phase1: TrainConfig {
                epochs: 1,
                ..TrainConfig::default()
            },
            phase2: TrainConfig {
                epochs: 1,
                ..TrainConfig::default()
            },
            conditions: vec![Condition {
                phase1: PhaseOneSet::A,
                strategy: Strategy::None,
            }],
            seeds: vec![0],
            max_new: 8,
            similarity_samples: SampleSize::All,
            ..Self::paper_analog()
        }
    }

    pub fn preset(name: &str) -> Result<Self, StudyError> {
        match name {
            "paper-analog" => Ok(Self::paper_analog()),
            "paper" => Ok(Self::paper()),
            "smoke" => Ok(Self::smoke()),
            _ => Err(StudyError::Config(format!(
                "unknown preset `{name}` (available: {})",
                PRESETS.join(", ")
            ))),
        }
    }

    /// Parses a TOML config; keys left out take the paper-analog values.
    pub fn from_toml(text: &str) -> Result<Self, StudyError> {
        toml::from_str(text).map_err(|e| StudyError::Config(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, StudyError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let mut cfg = Self::from_toml(&text)?;
        if let (Some(f), Some(dir)) = (&cfg.benchmark_file, path.parent()) {
            if f.is_relative() {
                cfg.benchmark_file = Some(dir.join(f));
            }
        }
        Ok(cfg)
    }

    /// Inlines `benchmark_file` and drops `out`, giving the value the hash
    /// is taken over.
    pub fn resolved(&self) -> Result<Self, StudyError> {
        let mut cfg = self.clone();
        if let Some(path) = cfg.benchmark_file.take() {
            let text = fs::read_to_string(&path).map_err(io_err(&path))?;
            cfg.benchmark =
                toml::from_str(&text).map_err(|e| StudyError::Config(format!("{}: {e}", path.display())))?;
        }
        cfg.out = None;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), StudyError> {
        if self.seeds.is_empty() {
            return Err(StudyError::Config("seeds must not be empty".into()));
        }
        let unique: BTreeSet<u64> = self.seeds.iter().copied().collect();
        if unique.len() != self.seeds.len() {
            return Err(StudyError::Config("seeds must be distinct".into()));
        }
        if self.conditions.is_empty() {
            return Err(StudyError::Config("conditions must not be empty".into()));
        }
        let mut names = BTreeSet::new();
        for c in &self.conditions {
            if !names.insert(c.name()) {
                return Err(StudyError::Config(format!("two conditions share the name {}", c.name())));
            }
        }
        if self.max_new == 0 {
            return Err(StudyError::Config("max_new must be >= 1".into()));
        }
        if let Some(f) = &self.benchmark_file {
            if !f.exists() {
                return Err(StudyError::Config(format!("benchmark_file {} does not exist", f.display())));
            }
        }
        self.model.validate()?;
        self.phase1.validate()?;
        self.phase2.validate()?;
        Ok(())
    }

    /// Short hash of the resolved config; independent of key order in the
    /// source file.
    pub fn hash(&self) -> Result<String, StudyError> {
        let resolved = self.resolved()?;
        let bytes = serde_json::to_vec(&resolved).expect("config serialises");
        let digest = Sha256::digest(&bytes);
        Ok(digest[..6].iter().map(|b| format!("{b:02x}")).collect())
    }

    fn sets(&self) -> BTreeSet<PhaseOneSet> {
        self.conditions.iter().map(|c| c.phase1).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Running,
    Complete,
}

/// Per-cell record of what was produced; paths are relative to the cell
/// directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub config_hash: String,
    pub condition: String,
    pub seed: u64,
    pub artifacts: Vec<String>,
    pub status: RunStatus,
    pub wall_clock_secs: f64,
}

pub const MANIFEST: &str = "manifest.json";
pub const METRICS: &str = "metrics.json";

/// Numbers one cell contributes to the summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellMetrics {
    pub run_id: String,
    pub condition: String,
    pub phase1: PhaseOneSet,
    pub strategy: String,
    pub seed: u64,
    pub ta_phase1: f64,
    pub ta_phase2: f64,
    pub forgetting: f64,
    pub la_phase1: f64,
    pub la_phase2: f64,
    pub la_by_language: BTreeMap<Lang, f64>,
    /// Primary score per suite after Phase 2.
    pub suites_phase2: BTreeMap<String, f64>,
    pub drift_per_layer: Vec<f64>,
    pub drift_mean: f64,
    pub drift_global: f64,
    /// MPD between the cell's Phase-1 and Phase-2 checkpoints.
    pub mpd_chain: f64,
    /// DES between the Phase-1 and Phase-2 training sets.
    pub des: f64,
    pub phase2_examples: usize,
    pub frozen_tensors: usize,
    pub replay_empty_outputs: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum CellState {
    Complete,
    Missing,
    Stale,
}

/// One seed's shared inputs, built once and reused by every cell.
struct SeedContext {
    seed: u64,
    bench: Benchmark,
    base: Checkpoint,
    phase1: BTreeMap<PhaseOneSet, Checkpoint>,
    phase1_eval: BTreeMap<PhaseOneSet, EvalReport>,
    replay: BTreeMap<PhaseOneSet, (Dataset, usize)>,
    ta_suites: BTreeMap<PhaseOneSet, Vec<EvalSuite>>,
    la_suites: Vec<EvalSuite>,
}

/// Study-level similarity rows for one seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedSimilarity {
    pub seed: u64,
    pub reports: Vec<SimilarityReport>,
}

/// What a run did and the rows it summarised.
#[derive(Debug, Clone, PartialEq)]
pub struct StudySummary {
    pub root: PathBuf,
    pub config_hash: String,
    pub cells: Vec<CellMetrics>,
    pub similarity: Vec<SeedSimilarity>,
    pub computed: Vec<String>,
    pub skipped: Vec<String>,
    pub files: Vec<PathBuf>,
}

impl StudySummary {
    pub fn cell(&self, condition: &str, seed: u64) -> Option<&CellMetrics> {
        self.cells.iter().find(|c| c.condition == condition && c.seed == seed)
    }
}

pub struct Study {
    pub config: ExperimentConfig,
    pub hash: String,
    /// `<out>/runs/<config-hash>`.
    pub root: PathBuf,
    pub jobs: usize,
}

impl Study {
    /// Binds a config to `<out>/runs/<hash>/`, refusing a directory that
    /// already holds a different config.
    pub fn new(config: &ExperimentConfig, out: &Path, jobs: usize) -> Result<Self, StudyError> {
        config.validate()?;
        let resolved = config.resolved()?;
        let hash = config.hash()?;
        let root = out.join("runs").join(&hash);
        fs::create_dir_all(&root).map_err(io_err(&root))?;
        let cfg_path = root.join("config.json");
        if cfg_path.exists() {
            let stored: ExperimentConfig = read_json(&cfg_path)?;
            let found = stored.hash()?;
            if found != hash {
                return Err(StudyError::HashMismatch {
                    dir: root,
                    found,
                    expected: hash,
                });
            }
        } else {
            write_json(&cfg_path, &resolved)?;
        }
        Ok(Self {
            config: resolved,
            hash,
            root,
            jobs: jobs.max(1),
        })
    }

    /// Reopens an existing run directory from its stored config.
    pub fn open(root: &Path) -> Result<Self, StudyError> {
        let cfg_path = root.join("config.json");
        let config: ExperimentConfig = read_json(&cfg_path)?;
        let hash = config.hash()?;
        let dir_name = root.file_name().and_then(|n| n.to_str()).unwrap_or_default();
        if dir_name != hash {
            return Err(StudyError::HashMismatch {
                dir: root.to_path_buf(),
                found: hash,
                expected: dir_name.to_string(),
            });
        }
        Ok(Self {
            config,
            hash,
            root: root.to_path_buf(),
            jobs: 1,
        })
    }

    pub fn run_id(&self, condition: &Condition, seed: u64) -> String {
        format!("{}/{}/{}", self.hash, condition.name(), seed)
    }

    pub fn cell_dir(&self, condition: &Condition, seed: u64) -> PathBuf {
        self.root.join(condition.name()).join(seed.to_string())
    }

    fn shared_dir(&self, seed: u64) -> PathBuf {
        self.root.join("shared").join(format!("seed-{seed}"))
    }

    fn cell_state(&self, condition: &Condition, seed: u64) -> Result<CellState, StudyError> {
        let dir = self.cell_dir(condition, seed);
        let path = dir.join(MANIFEST);
        if !path.exists() {
            return Ok(CellState::Missing);
        }
        let m: RunManifest = match read_json(&path) {
            Ok(m) => m,
            Err(e) => {
                log::warn!("{}: unreadable manifest ({e}); recomputing", self.run_id(condition, seed));
                return Ok(CellState::Stale);
            }
        };
        if m.config_hash != self.hash {
            return Err(StudyError::HashMismatch {
                dir,
                found: m.config_hash,
                expected: self.hash.clone(),
            });
        }
        if m.status != RunStatus::Complete {
            log::warn!("{}: interrupted run; recomputing", m.run_id);
            return Ok(CellState::Stale);
        }
        if let Some(missing) = m.artifacts.iter().find(|a| !dir.join(a).exists()) {
            log::warn!("{}: {missing} is missing; recomputing", m.run_id);
            return Ok(CellState::Stale);
        }
        Ok(CellState::Complete)
    }

    /// Runs every cell that lacks a complete manifest, then writes the
    /// summary.
    pub fn run(&self) -> Result<StudySummary, StudyError> {
        let cells: Vec<(Condition, u64)> = self
            .config
            .seeds
            .iter()
            .flat_map(|&s| self.config.conditions.iter().map(move |&c| (c, s)))
            .collect();
        let mut todo = Vec::new();
        let mut skipped = Vec::new();
        for &(c, s) in &cells {
            match self.cell_state(&c, s)? {
                CellState::Complete => skipped.push(self.run_id(&c, s)),
                _ => todo.push((c, s)),
            }
        }
        let seeds_needed: BTreeSet<u64> = todo.iter().map(|t| t.1).collect();
        let contexts: Vec<SeedContext> = parallel_map(self.jobs, seeds_needed.into_iter().collect(), |s| {
            let needed: BTreeSet<PhaseOneSet> = todo.iter().filter(|t| t.1 == s).map(|t| t.0.phase1).collect();
            let gr: BTreeSet<PhaseOneSet> = todo
                .iter()
                .filter(|t| t.1 == s && matches!(t.0.strategy, Strategy::Gr { .. }))
                .map(|t| t.0.phase1)
                .collect();
            self.seed_context(s, &needed, &gr)
        })?;
        let computed = parallel_map(self.jobs, todo.clone(), |(c, s)| {
            let ctx = contexts.iter().find(|x| x.seed == s).expect("context built for every pending seed");
            self.run_cell(&c, ctx)
        })?;
        let mut summary = self.summarize()?;
        summary.computed = computed;
        summary.skipped = skipped;
        Ok(summary)
    }

    fn benchmark(&self, seed: u64) -> Result<Benchmark, StudyError> {
        Ok(corpus::synth_generate(&BenchmarkSpec {
            seed,
            ..self.config.benchmark.clone()
        })?)
    }

    fn base(&self, bench: &Benchmark, seed: u64) -> Result<Checkpoint, StudyError> {
        let vocab = Vocab::from_datasets(&bench.all());
        Ok(Checkpoint::init(&self.config.model, &vocab, seed)?)
    }

    fn train_cfg(&self, phase1: bool, seed: u64) -> TrainConfig {
        let cfg = if phase1 { &self.config.phase1 } else { &self.config.phase2 };
        TrainConfig { seed, ..cfg.clone() }
    }

    /// Loads a cached checkpoint or trains it from `base` on `ds`.
    fn cached_train(&self, path: &Path, base: &Checkpoint, ds: &Dataset, seed: u64) -> Result<Checkpoint, StudyError> {
        if path.exists() {
            match Checkpoint::load(path) {
                Ok(c) => return Ok(c),
                Err(e) => log::warn!("{}: {e}; retraining", path.display()),
            }
        }
        log::info!("training {} (seed {seed})", ds.id);
        let out = train_phase(base, ds, &self.train_cfg(true, seed), None, None)?;
        out.checkpoint.save(path)?;
        Ok(out.checkpoint)
    }

    fn seed_context(
        &self,
        seed: u64,
        sets: &BTreeSet<PhaseOneSet>,
        gr: &BTreeSet<PhaseOneSet>,
    ) -> Result<SeedContext, StudyError> {
        let dir = self.shared_dir(seed);
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        let bench = self.benchmark(seed)?;
        let base = self.base(&bench, seed)?;
        let mut phase1 = BTreeMap::new();
        let mut phase1_eval = BTreeMap::new();
        let mut replay = BTreeMap::new();
        let mut ta_suites = BTreeMap::new();
        let la_suites: Vec<EvalSuite> = eval::suites_from(&bench.eval_la)
            .into_iter()
            .filter(|s| !s.language.is_english() && TaskFamily::SET_A.contains(&s.family))
            .collect();
        for &set in sets {
            let ck = self.cached_train(&dir.join(format!("phase1_{set}.cftl")), &base, set.dataset(&bench), seed)?;
            let ta: Vec<EvalSuite> = eval::suites_from(&bench.eval_ta)
                .into_iter()
                .filter(|s| s.language.is_english() && set.families().contains(&s.family))
                .collect();
            let suites: Vec<EvalSuite> = ta.iter().chain(&la_suites).cloned().collect();
            phase1_eval.insert(
                set,
                eval::evaluate_checkpoint(&ck, &suites, self.config.decode, self.config.max_new)?,
            );
            if gr.contains(&set) {
                let path = dir.join(format!("replay_{set}.jsonl"));
                let ds = match corpus::load_dataset(&path) {
                    Ok(ds) => ds,
                    Err(_) => {
                        let r = strategies::generate_replay(
                            &ck,
                            &bench.english_counterpart,
                            self.config.decode,
                            self.config.max_new,
                        )?;
                        corpus::save_dataset(&r.dataset, &path)?;
                        r.dataset
                    }
                };
                let empty = ds.examples.iter().filter(|e| e.output.trim().is_empty()).count();
                replay.insert(set, (ds, empty));
            }
            ta_suites.insert(set, ta);
            phase1.insert(set, ck);
        }
        Ok(SeedContext {
            seed,
            bench,
            base,
            phase1,
            phase1_eval,
            replay,
            ta_suites,
            la_suites,
        })
    }

    fn run_cell(&self, condition: &Condition, ctx: &SeedContext) -> Result<String, StudyError> {
        let start = Instant::now();
        let seed = ctx.seed;
        let run_id = self.run_id(condition, seed);
        let dir = self.cell_dir(condition, seed);
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        let mut manifest = RunManifest {
            run_id: run_id.clone(),
            config_hash: self.hash.clone(),
            condition: condition.name(),
            seed,
            artifacts: Vec::new(),
            status: RunStatus::Running,
            wall_clock_secs: 0.0,
        };
        write_json(&dir.join(MANIFEST), &manifest)?;
        log::info!("{run_id}: phase 2");

        let set = condition.phase1;
        let p1 = &ctx.phase1[&set];
        let bench = &ctx.bench;
        let mut inputs = PlanInputs::new(&bench.phase2_multi_a);
        inputs.base = Some(&ctx.base);
        inputs.phase1 = Some(p1);
        inputs.english_counterpart = Some(&bench.english_counterpart);
        inputs.replay = ctx.replay.get(&set).map(|r| &r.0);
        inputs.seed = seed;
        inputs.decode = self.config.decode;
        inputs.max_new = self.config.max_new;
        let plan = strategies::build_phase2_plan(condition.strategy, &inputs)?;
        let out = strategies::execute_plan(&plan, p1, &self.train_cfg(false, seed))?;
        let p2 = out.checkpoint;

        let header = format!("# run_id={run_id}\n");
        let mut artifacts = Vec::new();
        let mut emit = |name: &str, body: String| -> Result<(), StudyError> {
            write(&dir.join(name), format!("{header}{body}"))?;
            artifacts.push(name.to_string());
            Ok(())
        };

        let suites: Vec<EvalSuite> = ctx.ta_suites[&set].iter().chain(&ctx.la_suites).cloned().collect();
        let r1 = &ctx.phase1_eval[&set];
        let r2 = eval::evaluate_checkpoint(&p2, &suites, self.config.decode, self.config.max_new)?;
        let cmp = eval::compare(r1, &r2)?;
        emit("eval_phase1.csv", r1.to_csv())?;
        emit("eval_phase2.csv", r2.to_csv())?;
        emit("comparison.csv", cmp.to_csv())?;
        emit("train_log.csv", out.log.to_csv())?;

        let a1 = drift::capture(p1, &bench.drift_prompts)?;
        let a2 = drift::capture(&p2, &bench.drift_prompts)?;
        let dr = drift::drift_norms(&a1, &a2)?;
        emit("drift.csv", dr.to_csv())?;

        let emb = Embedder::task_signature();
        let des = similarity::des(
            set.dataset(bench),
            &bench.phase2_multi_a,
            &emb,
            self.config.similarity_samples,
            seed,
        )?;
        let mpd_chain = similarity::mpd(p1, &p2)?;
        let sim = SimilarityReport {
            a: set.dataset(bench).id.clone(),
            b: bench.phase2_multi_a.id.clone(),
            des: Some(des),
            mpd_raw: Some(mpd_chain),
            mpd_normalized: None,
            embedder: emb.describe(),
            samples: self.config.similarity_samples.resolve(bench.phase2_multi_a.len()),
            mpd_pairing: "phase1-to-phase2".into(),
        };
        emit("similarity.csv", similarity::reports_csv(&[sim]))?;

        let frozen_tensors = match &plan.freeze_mask {
            Some(mask) => {
                emit("freeze_mask.txt", mask.to_text())?;
                mask.tensor_indices(&p1.layout())?.len()
            }
            None => 0,
        };

        drop(emit);
        p1.save(dir.join("phase1.cftl"))?;
        p2.save(dir.join("phase2.cftl"))?;
        artifacts.push("phase1.cftl".into());
        artifacts.push("phase2.cftl".into());

        let la_phase1 = r1.la.unwrap_or(0.0);
        let metrics = CellMetrics {
            run_id: run_id.clone(),
            condition: condition.name(),
            phase1: set,
            strategy: condition.strategy.label(),
            seed,
            ta_phase1: r1.ta.unwrap_or(0.0),
            ta_phase2: r2.ta.unwrap_or(0.0),
            forgetting: cmp.forgetting.unwrap_or(0.0),
            la_phase1,
            la_phase2: r2.la.unwrap_or(0.0),
            la_by_language: r2.la_by_language.clone(),
            suites_phase2: r2.suites.iter().map(|s| (s.id.clone(), s.score())).collect(),
            drift_mean: dr.mean_layer_diff(),
            drift_global: dr.global_cov_diff,
            drift_per_layer: dr.per_layer_diff.clone(),
            mpd_chain,
            des,
            phase2_examples: plan.dataset.len(),
            frozen_tensors,
            replay_empty_outputs: match condition.strategy {
                Strategy::Gr { .. } => ctx.replay.get(&set).map(|r| r.1),
                _ => None,
            },
        };
        write_json(&dir.join(METRICS), &metrics)?;
        artifacts.push(METRICS.into());

        manifest.artifacts = artifacts;
        manifest.status = RunStatus::Complete;
        manifest.wall_clock_secs = start.elapsed().as_secs_f64();
        write_json(&dir.join(MANIFEST), &manifest)?;
        log::info!("{run_id}: done in {:.1}s", manifest.wall_clock_secs);
        Ok(run_id)
    }

    /// Sibling-MPD and DES rows per seed: every Phase-1 set and the
    /// multilingual set fine-tuned from the same base.
    fn seed_similarity(&self, seed: u64) -> Result<SeedSimilarity, StudyError> {
        let dir = self.shared_dir(seed);
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        let bench = self.benchmark(seed)?;
        let emb = Embedder::task_signature();
        let samples = self.config.similarity_samples;
        let sets: Vec<PhaseOneSet> = self.config.sets().into_iter().collect();
        let mut base = None;
        let mut ckpt = |name: &str, ds: &Dataset| -> Result<Checkpoint, StudyError> {
            let path = dir.join(format!("{name}.cftl"));
            if !path.exists() && base.is_none() {
                base = Some(self.base(&bench, seed)?);
            }
            let b = match &base {
                Some(b) => b.clone(),
                None => Checkpoint::load(&path)?,
            };
            self.cached_train(&path, &b, ds, seed)
        };
        // Siblings see equally many examples so that distance reflects the
        // data rather than the number of optimizer steps.
        let budget = sets
            .iter()
            .map(|s| s.dataset(&bench).len())
            .chain([bench.phase2_multi_a.len()])
            .min()
            .unwrap_or(0);
        let pairing = format!("siblings-from-base-n{budget}");
        let mut sibling = |name: &str, ds: &Dataset| -> Result<Checkpoint, StudyError> {
            if ds.len() == budget {
                return ckpt(name, ds);
            }
            let mut r = rng::stream(seed, &format!("study.sibling.{}", ds.id));
            let mut idx = rng::sample_without_replacement(ds.len(), budget, &mut r);
            idx.sort_unstable();
            let sub = Dataset::new(
                format!("{}_n{budget}", ds.id),
                idx.iter().map(|&i| ds.examples[i].clone()).collect(),
                seed,
            );
            ckpt(&sub.id.clone(), &sub)
        };
        let multi = sibling("phase2_multi_A_from_base", &bench.phase2_multi_a)?;
        let mut reports = Vec::new();
        let mut fts = Vec::new();
        for &set in &sets {
            let ds = set.dataset(&bench);
            let ft = sibling(&format!("phase1_{set}"), ds)?;
            reports.push(SimilarityReport {
                a: format!("FT({})", ds.id),
                b: format!("FT({})", bench.phase2_multi_a.id),
                des: Some(similarity::des(ds, &bench.phase2_multi_a, &emb, samples, seed)?),
                mpd_raw: Some(similarity::mpd(&ft, &multi)?),
                mpd_normalized: None,
                embedder: emb.describe(),
                samples: samples.resolve(ds.len().min(bench.phase2_multi_a.len())),
                mpd_pairing: pairing.clone(),
            });
            fts.push((ds.id.clone(), ft));
        }
        if let [(ia, a), (ib, b)] = &fts[..] {
            reports.push(SimilarityReport {
                a: format!("FT({ia})"),
                b: format!("FT({ib})"),
                des: Some(similarity::des(
                    sets[0].dataset(&bench),
                    sets[1].dataset(&bench),
                    &emb,
                    samples,
                    seed,
                )?),
                mpd_raw: Some(similarity::mpd(a, b)?),
                mpd_normalized: None,
                embedder: emb.describe(),
                samples: samples.resolve(bench.phase1_a.len().min(bench.phase1_b.len())),
                mpd_pairing: pairing.clone(),
            });
        }
        similarity::normalize_reports(&mut reports)?;
        Ok(SeedSimilarity { seed, reports })
    }

    /// Rebuilds summary tables and charts from completed cells. Contains no
    /// timestamps, so identical cells give identical bytes.
    pub fn summarize(&self) -> Result<StudySummary, StudyError> {
        let mut cells = Vec::new();
        for c in &self.config.conditions {
            for &s in &self.config.seeds {
                let dir = self.cell_dir(c, s);
                if self.cell_state(c, s)? != CellState::Complete {
                    return Err(StudyError::Config(format!(
                        "cell {} is not complete; run the study first",
                        self.run_id(c, s)
                    )));
                }
                cells.push(read_json::<CellMetrics>(&dir.join(METRICS))?);
            }
        }
        let similarity: Vec<SeedSimilarity> = parallel_map(self.jobs, self.config.seeds.clone(), |s| self.seed_similarity(s))?;

        let header = format!("# run_id={}\n", self.hash);
        let mut files = Vec::new();
        let mut emit = |name: &str, body: String| -> Result<(), StudyError> {
            let path = self.root.join(name);
            write(&path, format!("{header}{body}"))?;
            files.push(path);
            Ok(())
        };
        emit("summary.csv", summary_csv(&self.config, &cells))?;
        emit("summary_by_seed.csv", by_seed_csv(&cells))?;
        let mut sim = String::new();
        for (i, s) in similarity.iter().enumerate() {
            let table = similarity::reports_csv(&s.reports);
            let mut lines = table.lines();
            let head = lines.next().unwrap_or_default();
            if i == 0 {
                let _ = writeln!(sim, "seed,{head}");
            }
            for l in lines {
                let _ = writeln!(sim, "{},{l}", s.seed);
            }
        }
        emit("similarity.csv", sim)?;
        for (name, body) in charts(&self.config, &cells) {
            let path = self.root.join(&name);
            write(&path, body)?;
            files.push(path);
        }
        Ok(StudySummary {
            root: self.root.clone(),
            config_hash: self.hash.clone(),
            cells,
            similarity,
            computed: Vec::new(),
            skipped: Vec::new(),
            files,
        })
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len().max(1) as f64
}

fn sd(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

fn group<'a>(cfg: &ExperimentConfig, cells: &'a [CellMetrics]) -> Vec<(Condition, Vec<&'a CellMetrics>)> {
    cfg.conditions
        .iter()
        .map(|c| (*c, cells.iter().filter(|m| m.condition == c.name()).collect()))
        .collect()
}

/// Seed-averaged rows in Table-3 layout: per-suite task scores, then
/// per-language scores, then aggregates.
fn summary_csv(cfg: &ExperimentConfig, cells: &[CellMetrics]) -> String {
    let ta_cols: Vec<String> = TaskFamily::ALL.iter().map(|f| format!("{}/{}", Lang::EN, f)).collect();
    let langs: BTreeSet<Lang> = cells.iter().flat_map(|c| c.la_by_language.keys().copied()).collect();
    let max_mpd = cells.iter().map(|c| c.mpd_chain).fold(0.0, f64::max);
    let mut s = String::from("phase1,strategy,seeds");
    for c in &ta_cols {
        let _ = write!(s, ",{c}");
    }
    for l in &langs {
        let _ = write!(s, ",LA_{l}");
    }
    s.push_str(",TA_phase1,TA_phase2,forgetting,forgetting_sd,LA_phase2,drift_mean,mpd_chain_normalized,des\n");
    for (cond, rows) in group(cfg, cells) {
        let col = |f: &dyn Fn(&CellMetrics) -> Option<f64>| -> String {
            let xs: Vec<f64> = rows.iter().filter_map(|m| f(m)).collect();
            if xs.is_empty() {
                String::new()
            } else {
                format!("{:.6}", mean(&xs))
            }
        };
        let _ = write!(s, "{},{},{}", cond.phase1, cond.strategy.label(), rows.len());
        for c in &ta_cols {
            let _ = write!(s, ",{}", col(&|m| m.suites_phase2.get(c).copied()));
        }
        for l in &langs {
            let _ = write!(s, ",{}", col(&|m| m.la_by_language.get(l).copied()));
        }
        let forgetting: Vec<f64> = rows.iter().map(|m| m.forgetting).collect();
        let _ = writeln!(
            s,
            ",{},{},{},{:.6},{},{},{},{}",
            col(&|m| Some(m.ta_phase1)),
            col(&|m| Some(m.ta_phase2)),
            col(&|m| Some(m.forgetting)),
            sd(&forgetting),
            col(&|m| Some(m.la_phase2)),
            col(&|m| Some(m.drift_mean)),
            col(&|m| (max_mpd > 0.0).then(|| m.mpd_chain / max_mpd)),
            col(&|m| Some(m.des)),
        );
    }
    s.push_str("# TA and LA average each suite's primary metric (exact match or rouge1), mixing metric types\n");
    s
}

fn by_seed_csv(cells: &[CellMetrics]) -> String {
    let mut s = String::from(
        "condition,seed,TA_phase1,TA_phase2,forgetting,LA_phase1,LA_phase2,drift_mean,drift_global,mpd_chain,des,phase2_examples,frozen_tensors\n",
    );
    for m in cells {
        let _ = writeln!(
            s,
            "{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.9},{:.9},{:.9},{:.9},{},{}",
            m.condition,
            m.seed,
            m.ta_phase1,
            m.ta_phase2,
            m.forgetting,
            m.la_phase1,
            m.la_phase2,
            m.drift_mean,
            m.drift_global,
            m.mpd_chain,
            m.des,
            m.phase2_examples,
            m.frozen_tensors
        );
    }
    s
}

fn charts(cfg: &ExperimentConfig, cells: &[CellMetrics]) -> Vec<(String, String)> {
    let groups = group(cfg, cells);
    let mut strategies: Vec<String> = Vec::new();
    for c in &cfg.conditions {
        let l = c.strategy.label();
        if !strategies.contains(&l) {
            strategies.push(l);
        }
    }
    let bars = |f: fn(&CellMetrics) -> f64| -> Vec<(String, Vec<f64>)> {
        cfg.sets()
            .into_iter()
            .map(|set| {
                let vals = strategies
                    .iter()
                    .map(|st| {
                        groups
                            .iter()
                            .find(|(c, _)| c.phase1 == set && &c.strategy.label() == st)
                            .map(|(_, rows)| mean(&rows.iter().map(|m| f(m)).collect::<Vec<_>>()))
                            .unwrap_or(0.0)
                    })
                    .collect();
                (format!("Phase 1 = {set}"), vals)
            })
            .collect()
    };
    let drift_series = groups
        .iter()
        .map(|(c, rows)| {
            let layers = rows.first().map_or(0, |m| m.drift_per_layer.len());
            let pts = (0..layers)
                .map(|l| (l as f64, mean(&rows.iter().map(|m| m.drift_per_layer[l]).collect::<Vec<_>>())))
                .collect();
            (c.name(), pts)
        })
        .collect::<Vec<_>>();
    vec![
        (
            "forgetting.svg".into(),
            svg::bar_chart("TA forgetting (Phase 1 - Phase 2)", "forgetting", &strategies, &bars(|m| m.forgetting)),
        ),
        (
            "language_ability.svg".into(),
            svg::bar_chart("LA after Phase 2", "LA", &strategies, &bars(|m| m.la_phase2)),
        ),
        (
            "drift.svg".into(),
            svg::line_chart("Covariance drift, Phase 1 to Phase 2", "layer", "drift norm", &drift_series),
        ),
    ]
}

/// Maps `f` over `items` on up to `jobs` threads, keeping input order.
fn parallel_map<T: Send + Sync + Clone, R: Send>(
    jobs: usize,
    items: Vec<T>,
    f: impl Fn(T) -> Result<R, StudyError> + Sync,
) -> Result<Vec<R>, StudyError> {
    if jobs <= 1 || items.len() <= 1 {
        return items.into_iter().map(f).collect();
    }
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<R, StudyError>>>> = Mutex::new((0..items.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..jobs.min(items.len()) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(item) = items.get(i) else { break };
                let r = f(item.clone());
                results.lock().expect("no panics while holding the lock")[i] = Some(r);
            });
        }
    });
    results
        .into_inner()
        .expect("threads joined")
        .into_iter()
        .map(|r| r.expect("every item processed"))
        .collect()
}
