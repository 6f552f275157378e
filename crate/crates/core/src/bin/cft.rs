//! `cft`: command-line front end for the continual fine-tuning lab.

use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use cftlab::corpus::{self, BenchmarkSpec, Dataset, Vocab};
use cftlab::drift::{self, MatrixNorm, Pooling};
use cftlab::engine::{Checkpoint, Decode, ModelConfig, TrainConfig};
use cftlab::eval;
use cftlab::similarity::{self, Embedder, MpdMode, SampleSize, SimilarityReport};
use cftlab::strategies::{self, FreezeMask, Granularity, PlanInputs, Strategy};
use cftlab::study::{ExperimentConfig, Study, StudyError};
use cftlab::svg;

#[derive(Parser)]
#[command(name = "cft", version, about = "Desk-scale continual fine-tuning lab")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Seed for generation and training; overrides config seeds for `study`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output root.
    #[arg(long, global = true, env = "CFTLAB_OUT", default_value = "cftlab-out")]
    out: PathBuf,
    /// Named experiment preset (paper-analog, paper, smoke).
    #[arg(long, global = true)]
    preset: Option<String>,
    /// TOML experiment config; keys override the preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads for independent study cells.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic benchmark datasets.
    Gen {
        /// TOML benchmark spec; defaults apply to missing keys.
        #[arg(long)]
        spec: Option<PathBuf>,
    },
    /// Fine-tune a checkpoint on a dataset, optionally under a Phase-2 strategy.
    Train(TrainArgs),
    /// Build a freeze mask.
    Plan(PlanArgs),
    /// Dataset similarity and parameter difference.
    #[command(alias = "similarity")]
    Metrics(MetricsArgs),
    /// Activation covariance drift between two checkpoints.
    Drift(DriftArgs),
    /// Zero-shot evaluation of a checkpoint.
    Eval(EvalArgs),
    /// Run the full condition × seed study.
    Study,
    /// Rebuild summary tables and charts of a finished study.
    Report {
        /// Study root (`<out>/runs/<hash>`); defaults to the configured study.
        root: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum StrategyKind {
    None,
    LfH1,
    LfH2,
    Gr,
    Er,
    Lora,
}

#[derive(Args)]
struct TrainArgs {
    /// Training dataset.
    #[arg(long)]
    data: PathBuf,
    /// Starting checkpoint; a fresh model is initialised when omitted.
    #[arg(long)]
    init: Option<PathBuf>,
    /// Extra datasets whose tokens join the vocabulary of a fresh model.
    #[arg(long, num_args = 1..)]
    vocab: Vec<PathBuf>,
    /// Also write the freshly initialised model here.
    #[arg(long)]
    save_base: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "none")]
    strategy: StrategyKind,
    #[arg(long, default_value_t = 2)]
    k: usize,
    #[arg(long, default_value = "per-kind-per-head")]
    granularity: Granularity,
    #[arg(long, default_value_t = 0.10)]
    fraction: f64,
    #[arg(long, default_value_t = 4)]
    rank: usize,
    /// Base checkpoint (LF_H2).
    #[arg(long)]
    base: Option<PathBuf>,
    /// English counterpart dataset (GR, ER).
    #[arg(long)]
    counterpart: Option<PathBuf>,
    /// Precomputed freeze mask file; replaces the strategy's own mask.
    #[arg(long)]
    mask: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Output checkpoint.
    #[arg(long, short)]
    output: PathBuf,
}

#[derive(Args)]
struct PlanArgs {
    #[arg(long, value_enum)]
    strategy: StrategyKind,
    #[arg(long, default_value_t = 2)]
    k: usize,
    #[arg(long, default_value = "per-kind-per-head")]
    granularity: Granularity,
    /// Freeze whole layers containing the selected projections.
    #[arg(long)]
    promote_layers: bool,
    #[arg(long)]
    base: Option<PathBuf>,
    #[arg(long)]
    phase1: PathBuf,
    /// Mask file; printed to stdout when omitted.
    #[arg(long, short)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct MetricsArgs {
    #[arg(long)]
    data_a: Option<PathBuf>,
    #[arg(long)]
    data_b: Option<PathBuf>,
    #[arg(long)]
    ckpt_a: Option<PathBuf>,
    #[arg(long)]
    ckpt_b: Option<PathBuf>,
    /// task-signature, hashed-ngram, or a precomputed embedding file.
    #[arg(long, default_value = "task-signature")]
    embedder: String,
    /// Examples per dataset embedding, or `all`.
    #[arg(long, default_value = "500")]
    samples: String,
    /// Per-scalar instead of per-tensor parameter difference.
    #[arg(long)]
    scalar_wise: bool,
    /// How the two checkpoints relate, recorded in the report.
    #[arg(long, default_value = "siblings-from-base")]
    pairing: String,
}

#[derive(Args)]
struct DriftArgs {
    #[arg(long)]
    a: PathBuf,
    #[arg(long)]
    b: PathBuf,
    /// Prompt dataset.
    #[arg(long)]
    prompts: PathBuf,
    #[arg(long)]
    last_token: bool,
    #[arg(long)]
    spectral: bool,
    /// Also write the 2D projection of both models' layer means.
    #[arg(long)]
    project: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Datasets whose (language, family) cells become suites.
    #[arg(long, num_args = 1.., required = true)]
    suites: Vec<PathBuf>,
    /// Earlier checkpoint to compare against.
    #[arg(long)]
    compare: Option<PathBuf>,
    #[arg(long, default_value_t = 16)]
    max_new: usize,
    /// Report file; printed to stdout when omitted.
    #[arg(long, short)]
    output: Option<PathBuf>,
}

/// Exit 2 for bad inputs, 3 for broken invariants.
enum Failure {
    User(String),
    Internal(String),
}

type Res<T> = Result<T, Failure>;

fn user(e: impl Display) -> Failure {
    Failure::User(e.to_string())
}

fn internal(e: impl Display) -> Failure {
    Failure::Internal(e.to_string())
}

fn study_failure(e: StudyError) -> Failure {
    if e.is_user_error() {
        user(e)
    } else {
        internal(e)
    }
}

fn load_ds(path: &Path) -> Res<Dataset> {
    corpus::load_dataset(path).map_err(|e| user(format!("{}: {e}", path.display())))
}

fn load_ckpt(path: &Path) -> Res<Checkpoint> {
    Checkpoint::load(path).map_err(|e| user(format!("{}: {e}", path.display())))
}

fn write_out(path: &Path, text: impl AsRef<[u8]>) -> Res<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| user(format!("{}: {e}", dir.display())))?;
    }
    fs::write(path, text).map_err(|e| user(format!("{}: {e}", path.display())))
}

fn emit(output: Option<&Path>, text: &str) -> Res<()> {
    match output {
        Some(p) => write_out(p, text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn experiment(g: &Global) -> Res<ExperimentConfig> {
    let mut cfg = match &g.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| user(format!("{}: {e}", path.display())))?;
            let base = ExperimentConfig::preset(g.preset.as_deref().unwrap_or("paper-analog")).map_err(study_failure)?;
            merge_toml(&base, &text)?
        }
        None => ExperimentConfig::preset(g.preset.as_deref().unwrap_or("paper-analog")).map_err(study_failure)?,
    };
    if let (Some(f), Some(dir)) = (&cfg.benchmark_file, g.config.as_ref().and_then(|p| p.parent())) {
        if f.is_relative() {
            cfg.benchmark_file = Some(dir.join(f));
        }
    }
    if let Some(seed) = g.seed {
        cfg.seeds = vec![seed];
    }
    Ok(cfg)
}

/// Overlays the keys of a TOML document onto a base config.
fn merge_toml(base: &ExperimentConfig, text: &str) -> Res<ExperimentConfig> {
    fn merge(into: &mut toml::Value, from: toml::Value) {
        match (into, from) {
            (toml::Value::Table(a), toml::Value::Table(b)) => {
                for (k, v) in b {
                    match a.get_mut(&k) {
                        Some(slot) => merge(slot, v),
                        None => {
                            a.insert(k, v);
                        }
                    }
                }
            }
            (slot, v) => *slot = v,
        }
    }
    let mut doc = toml::Value::try_from(base).map_err(internal)?;
    let overlay: toml::Value = toml::from_str(text).map_err(|e| user(format!("config: {e}")))?;
    merge(&mut doc, overlay);
    doc.try_into().map_err(|e: toml::de::Error| user(format!("config: {e}")))
}

fn run(cli: Cli) -> Res<()> {
    let g = &cli.global;
    match cli.command {
        Command::Gen { spec } => {
            let mut s = match spec {
                Some(p) => {
                    let text = fs::read_to_string(&p).map_err(|e| user(format!("{}: {e}", p.display())))?;
                    toml::from_str::<BenchmarkSpec>(&text).map_err(|e| user(format!("{}: {e}", p.display())))?
                }
                None => BenchmarkSpec::default(),
            };
            if let Some(seed) = g.seed {
                s.seed = seed;
            }
            let bench = corpus::synth_generate(&s).map_err(user)?;
            let dir = g.out.join("data");
            bench.save(&dir).map_err(user)?;
            for ds in bench.all() {
                println!("{}/{}.jsonl\t{} examples", dir.display(), ds.id, ds.len());
            }
            Ok(())
        }
        Command::Train(a) => train(g, a),
        Command::Plan(a) => {
            let p1 = load_ckpt(&a.phase1)?;
            let mask = match a.strategy {
                StrategyKind::LfH1 => strategies::lf_random(&p1.config, a.k, g.seed.unwrap_or(0)).map_err(user)?,
                StrategyKind::LfH2 => {
                    let base = a.base.as_deref().ok_or_else(|| user("--base is required for lf-h2"))?;
                    strategies::lf_top_changed(&load_ckpt(base)?, &p1, a.k, a.granularity).map_err(user)?
                }
                _ => return Err(user("plan builds freeze masks; use --strategy lf-h1 or lf-h2")),
            };
            let mask = if a.promote_layers { mask.promote_to_layers() } else { mask };
            for w in &mask.provenance.warnings {
                eprintln!("warning: {w}");
            }
            emit(a.output.as_deref(), &mask.to_text())
        }
        Command::Metrics(a) => metrics(g, a),
        Command::Drift(a) => {
            let (ca, cb) = (load_ckpt(&a.a)?, load_ckpt(&a.b)?);
            let prompts = load_ds(&a.prompts)?;
            let pooling = if a.last_token { Pooling::LastToken } else { Pooling::PositionMean };
            let norm = if a.spectral { MatrixNorm::Spectral } else { MatrixNorm::Frobenius };
            let sa = drift::capture_with(&ca, &prompts, pooling).map_err(user)?;
            let sb = drift::capture_with(&cb, &prompts, pooling).map_err(user)?;
            let report = drift::drift_norms_with(&sa, &sb, norm).map_err(user)?;
            let dir = g.out.join("drift");
            write_out(&dir.join("drift.csv"), report.to_csv())?;
            let label = format!("{} vs {}", report.a, report.b);
            write_out(
                &dir.join("drift.svg"),
                drift::drift_svg("Covariance drift per layer", &[(label, &report)]),
            )?;
            if a.project {
                let proj = drift::project2d(&[sa, sb]).map_err(internal)?;
                write_out(&dir.join("projection.csv"), proj.to_csv())?;
                let mut groups: Vec<(String, Vec<(String, f64, f64)>)> = Vec::new();
                for p in &proj.points {
                    let pt = (format!("layer {}", p.layer), p.x, p.y);
                    match groups.iter_mut().find(|g| g.0 == p.model) {
                        Some(g) => g.1.push(pt),
                        None => groups.push((p.model.clone(), vec![pt])),
                    }
                }
                write_out(&dir.join("projection.svg"), svg::scatter("Layer means, 2D projection", &groups))?;
            }
            print!("{}", report.to_csv());
            println!("mean per-layer drift: {:.6}", report.mean_layer_diff());
            Ok(())
        }
        Command::Eval(a) => {
            let ck = load_ckpt(&a.ckpt)?;
            let mut suites = Vec::new();
            for p in &a.suites {
                suites.extend(eval::suites_from(&load_ds(p)?));
            }
            let report = eval::evaluate_checkpoint(&ck, &suites, Decode::Greedy, a.max_new).map_err(user)?;
            let text = match &a.compare {
                Some(before) => {
                    let r0 = eval::evaluate_checkpoint(&load_ckpt(before)?, &suites, Decode::Greedy, a.max_new)
                        .map_err(user)?;
                    eval::compare(&r0, &report).map_err(internal)?.to_csv()
                }
                None => report.to_csv(),
            };
            emit(a.output.as_deref(), &text)
        }
        Command::Study => {
            let cfg = experiment(g)?;
            let out = cfg.out.clone().unwrap_or_else(|| g.out.clone());
            let study = Study::new(&cfg, &out, g.jobs).map_err(study_failure)?;
            let summary = study.run().map_err(study_failure)?;
            println!(
                "study {}: {} cells computed, {} reused",
                summary.config_hash,
                summary.computed.len(),
                summary.skipped.len()
            );
            for f in &summary.files {
                println!("{}", f.display());
            }
            Ok(())
        }
        Command::Report { root } => {
            let study = match root {
                Some(r) => Study::open(&r).map_err(study_failure)?,
                None => {
                    let cfg = experiment(g)?;
                    let out = cfg.out.clone().unwrap_or_else(|| g.out.clone());
                    Study::new(&cfg, &out, g.jobs).map_err(study_failure)?
                }
            };
            let summary = study.summarize().map_err(study_failure)?;
            let text = fs::read_to_string(summary.root.join("summary.csv")).map_err(internal)?;
            print!("{text}");
            Ok(())
        }
    }
}

fn train(g: &Global, a: TrainArgs) -> Res<()> {
    let data = load_ds(&a.data)?;
    let start = match &a.init {
        Some(p) => load_ckpt(p)?,
        None => {
            let mut extra = Vec::new();
            for p in &a.vocab {
                extra.push(load_ds(p)?);
            }
            let mut all: Vec<&Dataset> = vec![&data];
            all.extend(extra.iter());
            let ck = Checkpoint::init(&ModelConfig::default(), &Vocab::from_datasets(&all), g.seed.unwrap_or(0))
                .map_err(user)?;
            if let Some(p) = &a.save_base {
                ck.save(p).map_err(user)?;
            }
            ck
        }
    };
    let strategy = match a.strategy {
        StrategyKind::None => Strategy::None,
        StrategyKind::LfH1 => Strategy::LfH1 {
            k: a.k,
            seed: g.seed.unwrap_or(0),
        },
        StrategyKind::LfH2 => Strategy::LfH2 {
            k: a.k,
            granularity: a.granularity,
        },
        StrategyKind::Gr => Strategy::Gr { fraction: a.fraction },
        StrategyKind::Er => Strategy::Er { fraction: a.fraction },
        StrategyKind::Lora => Strategy::Lora { rank: a.rank },
    };
    let base = a.base.as_deref().map(load_ckpt).transpose()?;
    let counterpart = a.counterpart.as_deref().map(load_ds).transpose()?;
    let mut inputs = PlanInputs::new(&data);
    inputs.base = base.as_ref();
    inputs.phase1 = Some(&start);
    inputs.english_counterpart = counterpart.as_ref();
    inputs.seed = g.seed.unwrap_or(0);
    let mut plan = strategies::build_phase2_plan(strategy, &inputs).map_err(user)?;
    if let Some(p) = &a.mask {
        let text = fs::read_to_string(p).map_err(|e| user(format!("{}: {e}", p.display())))?;
        let mask = FreezeMask::from_text(&text).map_err(user)?;
        mask.validate(&start.config).map_err(user)?;
        plan.freeze_mask = Some(mask);
    }
    let defaults = TrainConfig::default();
    let cfg = TrainConfig {
        epochs: a.epochs.unwrap_or(defaults.epochs),
        learning_rate: a.lr.unwrap_or(defaults.learning_rate),
        seed: g.seed.unwrap_or(0),
        ..defaults
    };
    let out = strategies::execute_plan(&plan, &start, &cfg).map_err(user)?;
    out.checkpoint.save(&a.output).map_err(user)?;
    let log_path = a.output.with_extension("log.csv");
    write_out(&log_path, out.log.to_csv())?;
    println!(
        "{} ({} examples, strategy {}): loss {:.4} -> {:.4}, checkpoint {}",
        a.output.display(),
        plan.dataset.len(),
        strategy.label(),
        out.log.first_loss().unwrap_or(f64::NAN),
        out.log.last_loss().unwrap_or(f64::NAN),
        out.checkpoint.id()
    );
    Ok(())
}

fn metrics(g: &Global, a: MetricsArgs) -> Res<()> {
    let emb = match a.embedder.as_str() {
        "task-signature" => Embedder::task_signature(),
        "hashed-ngram" => Embedder::hashed_ngram(g.seed.unwrap_or(0)),
        path => Embedder::load_precomputed(path).map_err(user)?,
    };
    let samples = match a.samples.as_str() {
        "all" => SampleSize::All,
        n => SampleSize::N(n.parse().map_err(|_| user(format!("--samples: `{n}` is not a count or `all`")))?),
    };
    let des = match (&a.data_a, &a.data_b) {
        (Some(x), Some(y)) => {
            let (x, y) = (load_ds(x)?, load_ds(y)?);
            let smallest = x.len().min(y.len());
            let samples = match samples {
                SampleSize::N(n) if n > smallest => {
                    eprintln!("warning: --samples {n} exceeds dataset size; using all {smallest}");
                    SampleSize::All
                }
                s => s,
            };
            Some((
                similarity::des(&x, &y, &emb, samples, g.seed.unwrap_or(0)).map_err(user)?,
                x.id.clone(),
                y.id.clone(),
                samples.resolve(x.len().min(y.len())),
            ))
        }
        (None, None) => None,
        _ => return Err(user("--data-a and --data-b go together")),
    };
    let mpd = match (&a.ckpt_a, &a.ckpt_b) {
        (Some(x), Some(y)) => {
            let (x, y) = (load_ckpt(x)?, load_ckpt(y)?);
            let mode = if a.scalar_wise { MpdMode::ScalarWise } else { MpdMode::TensorWise };
            Some((similarity::mpd_with(&x, &y, mode).map_err(user)?, x.id(), y.id()))
        }
        (None, None) => None,
        _ => return Err(user("--ckpt-a and --ckpt-b go together")),
    };
    if des.is_none() && mpd.is_none() {
        return Err(user("give --data-a/--data-b, --ckpt-a/--ckpt-b, or both"));
    }
    let (ida, idb) = match (&des, &mpd) {
        (Some((_, x, y, _)), _) => (x.clone(), y.clone()),
        (None, Some((_, x, y))) => (x.clone(), y.clone()),
        _ => unreachable!(),
    };
    let mut report = vec![SimilarityReport {
        a: ida,
        b: idb,
        des: des.as_ref().map(|d| d.0),
        mpd_raw: mpd.as_ref().map(|m| m.0),
        mpd_normalized: None,
        embedder: emb.describe(),
        samples: des.as_ref().map_or(0, |d| d.3),
        mpd_pairing: a.pairing,
    }];
    similarity::normalize_reports(&mut report).ok();
    print!("{}", similarity::reports_csv(&report));
    eprint!("{}", report[0].text());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::User(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Internal(m)) => {
            eprintln!("internal error: {m}");
            ExitCode::from(3)
        }
    }
}
