use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::{info, warn};

use chronoeval_core::builder::{self, load_authored_paths, read_samples, BuildConfig, BuildSources, Stage};
use chronoeval_core::config::RunConfig;
use chronoeval_core::corpus::{load_manifest, parse_manifest, validate_corpus};
use chronoeval_core::evalharness::{
    completion_curve, compute_metrics, rescore, run_eval, write_report_files, Averaging, CurveOptions, FanOut,
    MetricsReport, RawResult, ReportFormat,
};
use chronoeval_core::modelgw::{read_transcript, ModelBackend, TranscriptSink};
use chronoeval_core::planner::decompose_from_metadata;
use chronoeval_core::promptkit::Templates;
use chronoeval_core::synthetic;

#[derive(Parser)]
#[command(name = "chronoeval", version, about = "Curriculum dataset builder and bidirectional frame-pair evaluator")]
struct Cli {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run directory receiving every output file.
    #[arg(long, global = true)]
    run_dir: Option<PathBuf>,
    /// Seed for every sampled or stochastic step.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check a corpus manifest and print every violation.
    Validate {
        manifest: PathBuf,
        /// Also require every frame file to exist.
        #[arg(long)]
        check_files: bool,
    },
    /// Build one curriculum stage.
    Build(BuildArgs),
    /// Evaluate a backend on a sample file.
    Eval(EvalArgs),
    /// Aggregate every evaluated backend in the run directory into report.csv and report.md.
    Report {
        #[arg(long)]
        averaging: Option<Averaging>,
    },
    /// Task-completion curve for one trajectory.
    Curve(CurveArgs),
    /// Re-score a saved transcript without querying any backend.
    Rescore {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        transcript: PathBuf,
        #[arg(long)]
        averaging: Option<Averaging>,
    },
    /// Write a synthetic corpus into <run-dir>/corpus.
    Synth {
        #[arg(long, default_value_t = 4)]
        trajectories: usize,
        #[arg(long, default_value_t = 5)]
        max_subtasks: usize,
        #[arg(long, default_value_t = 60)]
        frames_per_subtask: usize,
    },
}

#[derive(Args)]
struct BuildArgs {
    /// cot, tag or long.
    #[arg(long)]
    stage: Stage,
    /// Corpus manifest (JSON).
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Keep every n-th raw frame.
    #[arg(long)]
    factor: Option<usize>,
    /// Tag pairs per interval bin per trajectory.
    #[arg(long)]
    quota_short: Option<usize>,
    /// CoT pairs per interval bin per trajectory.
    #[arg(long)]
    quota_cot: Option<usize>,
    /// Long pairs per window class per trajectory.
    #[arg(long)]
    quota_long: Option<usize>,
    /// Backend id that writes CoT reasoning paths.
    #[arg(long)]
    annotator: Option<String>,
}

#[derive(Args)]
struct EvalArgs {
    /// Backend id from the config roster, or a builtin policy name.
    #[arg(long)]
    backend: String,
    /// Sample file written by `build`.
    #[arg(long)]
    dataset: PathBuf,
    /// Concurrent queries, capped by the backend's own limit.
    #[arg(long)]
    parallelism: Option<usize>,
    /// macro or sample_weighted.
    #[arg(long)]
    averaging: Option<Averaging>,
}

#[derive(Args)]
struct CurveArgs {
    #[arg(long)]
    trajectory: String,
    #[arg(long)]
    backend: String,
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Probe every n-th frame (the last frame is always probed).
    #[arg(long)]
    stride: Option<usize>,
    /// Reference frames each probe is compared against.
    #[arg(long)]
    anchors: Option<usize>,
}

/// Data errors exit 1, usage errors exit 2.
enum Failure {
    Data(String),
    Usage(String),
}

impl Failure {
    fn data(e: impl std::fmt::Display) -> Self {
        Failure::Data(e.to_string())
    }
}

type Outcome = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(if cli.verbose { "info" } else { "warn" }))
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Data(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Usage(m)) => {
            eprintln!("usage error: {m}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> Outcome {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p).map_err(|e| Failure::Usage(format!("--config: {e}")))?,
        None => RunConfig::default(),
    };
    if let Some(d) = &cli.run_dir {
        cfg.out_dir = d.clone();
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    match cli.command {
        Command::Validate { manifest, check_files } => validate(&manifest, check_files),
        Command::Build(a) => build(cfg, a),
        Command::Eval(a) => eval(cfg, a),
        Command::Report { averaging } => report(cfg, averaging),
        Command::Curve(a) => curve(cfg, a),
        Command::Rescore {
            dataset,
            transcript,
            averaging,
        } => rescore_cmd(&cfg, &dataset, &transcript, averaging),
        Command::Synth {
            trajectories,
            max_subtasks,
            frames_per_subtask,
        } => synth(&cfg, trajectories, max_subtasks, frames_per_subtask),
    }
}

fn validate(manifest: &Path, check_files: bool) -> Outcome {
    let corpus = parse_manifest(manifest).map_err(Failure::data)?;
    let report = validate_corpus(&corpus, check_files);
    if report.is_valid() {
        println!("{}: {} trajectories, no violations", manifest.display(), corpus.trajectories.len());
        return Ok(());
    }
    for v in &report.violations {
        eprintln!("{v}");
    }
    Err(Failure::Data(format!("{} violation(s) in {}", report.violations.len(), manifest.display())))
}

/// Ids become file-name components, so they must not escape the run directory.
fn file_safe(kind: &str, id: &str) -> Result<(), Failure> {
    let ok = !id.is_empty()
        && !id.starts_with('.')
        && id.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'));
    if ok {
        Ok(())
    } else {
        Err(Failure::Usage(format!("{kind} id `{id}` cannot be used in a file name")))
    }
}

fn prepare_run_dir(cfg: &RunConfig, label: &str) -> Result<PathBuf, Failure> {
    cfg.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    fs::create_dir_all(&cfg.out_dir).map_err(|e| Failure::Data(format!("{}: {e}", cfg.out_dir.display())))?;
    cfg.freeze(&cfg.out_dir, label).map_err(Failure::data)?;
    Ok(cfg.out_dir.clone())
}

fn templates(cfg: &RunConfig) -> Result<Templates, Failure> {
    match &cfg.templates_dir {
        Some(d) => Templates::load_dir(d).map_err(|e| Failure::Data(format!("{}: {e}", d.display()))),
        None => Ok(Templates::default()),
    }
}

fn backend(cfg: &RunConfig, id: &str) -> Result<Box<dyn ModelBackend>, Failure> {
    let entry = cfg.backend(id).map_err(|e| Failure::Usage(format!("--backend: {e}")))?;
    entry.build(cfg.seed).map_err(Failure::data)
}

fn manifest_path(cfg: &RunConfig) -> Result<PathBuf, Failure> {
    cfg.manifest
        .clone()
        .ok_or_else(|| Failure::Usage("--manifest is required (or set `manifest` in the config)".into()))
}

fn build(mut cfg: RunConfig, a: BuildArgs) -> Outcome {
    if let Some(m) = a.manifest {
        cfg.manifest = Some(m);
    }
    if let Some(f) = a.factor {
        cfg.factor = f;
    }
    if let Some(q) = a.quota_short {
        cfg.quotas.short_per_bin = q;
    }
    if let Some(q) = a.quota_cot {
        cfg.quotas.cot_per_bin = q;
    }
    if let Some(q) = a.quota_long {
        cfg.quotas.long_per_window = q;
    }
    if let Some(id) = a.annotator {
        cfg.annotator = Some(id);
    }
    let manifest = manifest_path(&cfg)?;
    let corpus = load_manifest(&manifest).map_err(Failure::data)?;
    let dir = prepare_run_dir(&cfg, &format!("build_{}", a.stage))?;
    let tmpl = templates(&cfg)?;
    let annotator = match (&cfg.annotator, a.stage) {
        (Some(id), Stage::CoT) => Some(backend(&cfg, id)?),
        _ => None,
    };
    let authored = match (&cfg.cot_paths, a.stage) {
        (Some(p), Stage::CoT) => load_authored_paths(p).map_err(Failure::data)?,
        _ => HashMap::new(),
    };
    if a.stage == Stage::CoT && annotator.is_none() && authored.is_empty() {
        return Err(Failure::Usage(
            "the cot stage needs --annotator <backend> or `cot_paths` in the config".into(),
        ));
    }
    let bcfg = BuildConfig {
        factor: cfg.factor,
        quotas: cfg.quotas,
        seed: cfg.seed,
        out_dir: dir.clone(),
    };
    let src = BuildSources {
        templates: &tmpl,
        annotator: annotator.as_deref(),
        authored: &authored,
    };
    let report = builder::build_stage(&corpus, a.stage, &bcfg, &src).map_err(Failure::data)?;
    let audit = builder::audit_stage_dir(&dir, a.stage).map_err(Failure::data)?;
    if !audit.passed() {
        return Err(Failure::Data(format!("audit failed: {audit:?}")));
    }
    println!(
        "{} stage: {} samples from {} trajectories ({} dropped) in {}",
        a.stage,
        report.samples,
        report.trajectories,
        report.dropped_label_mismatch + report.dropped_nonconforming,
        dir.display()
    );
    Ok(())
}

fn results_path(dir: &Path, backend: &str) -> PathBuf {
    dir.join(format!("results_{backend}.jsonl"))
}

fn write_jsonl<T: serde::Serialize>(path: &Path, items: &[T]) -> Outcome {
    let mut s = String::new();
    for i in items {
        s.push_str(&serde_json::to_string(i).map_err(Failure::data)?);
        s.push('\n');
    }
    fs::write(path, s).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))
}

fn write_metrics(dir: &Path, m: &MetricsReport) -> Outcome {
    let p = dir.join(format!("metrics_{}.json", m.backend_id));
    let text = serde_json::to_string_pretty(m).map_err(Failure::data)? + "\n";
    fs::write(&p, text).map_err(|e| Failure::Data(format!("{}: {e}", p.display())))
}

fn eval(mut cfg: RunConfig, a: EvalArgs) -> Outcome {
    file_safe("backend", &a.backend)?;
    if let Some(p) = a.parallelism {
        cfg.parallelism = p;
    }
    if let Some(av) = a.averaging {
        cfg.averaging = av;
    }
    let lines = read_samples(&a.dataset).map_err(Failure::data)?;
    let b = backend(&cfg, &a.backend)?;
    let dir = prepare_run_dir(&cfg, &format!("eval_{}", a.backend))?;
    let tmpl = templates(&cfg)?;
    let sink = TranscriptSink::create(&dir.join(format!("transcript_{}.jsonl", a.backend)));
    let opts = FanOut {
        parallelism: cfg.parallelism,
        abort_fraction: cfg.abort_fraction,
    };
    let run = run_eval(&lines, b.as_ref(), &tmpl, opts, Some(&sink)).map_err(Failure::data)?;
    drop(sink);
    write_jsonl(&results_path(&dir, &a.backend), &run.results)?;
    let m = compute_metrics(&a.backend, &run.results, cfg.averaging).map_err(Failure::data)?;
    write_metrics(&dir, &m)?;
    println!(
        "{}: {} samples, short avg {}, long avg {}, gap {}",
        a.backend,
        m.n,
        fmt(m.short_avg),
        fmt(m.long_avg),
        fmt(m.bias_gap)
    );
    Ok(())
}

fn fmt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{x:.1}"))
}

fn report(mut cfg: RunConfig, averaging: Option<Averaging>) -> Outcome {
    if let Some(av) = averaging {
        cfg.averaging = av;
    }
    let dir = cfg.out_dir.clone();
    let entries = fs::read_dir(&dir).map_err(|e| Failure::Data(format!("{}: {e}", dir.display())))?;
    let mut names: Vec<String> = entries
        .filter_map(|e| e.ok())
        .filter_map(|e| e.file_name().into_string().ok())
        .filter(|n| n.starts_with("results_") && n.ends_with(".jsonl"))
        .collect();
    names.sort();
    if names.is_empty() {
        return Err(Failure::Data(format!("no evaluation results in {}", dir.display())));
    }
    let mut reports = Vec::new();
    for n in names {
        let id = &n["results_".len()..n.len() - ".jsonl".len()];
        let results: Vec<RawResult> = builder::read_jsonl(&dir.join(&n)).map_err(Failure::data)?;
        reports.push(compute_metrics(id, &results, cfg.averaging).map_err(Failure::data)?);
    }
    prepare_run_dir(&cfg, "report")?;
    write_report_files(&dir, &reports).map_err(Failure::data)?;
    print!("{}", chronoeval_core::render_report(&reports, ReportFormat::Markdown));
    Ok(())
}

fn curve(mut cfg: RunConfig, a: CurveArgs) -> Outcome {
    file_safe("backend", &a.backend)?;
    file_safe("trajectory", &a.trajectory)?;
    if let Some(m) = a.manifest {
        cfg.manifest = Some(m);
    }
    if let Some(s) = a.stride {
        cfg.curve.stride = s;
    }
    if let Some(n) = a.anchors {
        cfg.curve.n_anchors = n;
    }
    let corpus = load_manifest(&manifest_path(&cfg)?).map_err(Failure::data)?;
    let t = corpus
        .get(&a.trajectory)
        .ok_or_else(|| Failure::Data(format!("no trajectory `{}` in the corpus", a.trajectory)))?;
    let skeleton = match decompose_from_metadata(t) {
        Ok(s) => Some(s),
        Err(e) => {
            warn!("{e}; falling back to the short-horizon prompt");
            None
        }
    };
    let b = backend(&cfg, &a.backend)?;
    let dir = prepare_run_dir(&cfg, &format!("curve_{}_{}", a.trajectory, a.backend))?;
    let tmpl = templates(&cfg)?;
    let sink = TranscriptSink::create(&dir.join(format!("transcript_curve_{}_{}.jsonl", a.trajectory, a.backend)));
    let opts = CurveOptions {
        stride: cfg.curve.stride,
        n_anchors: cfg.curve.n_anchors,
        seed: cfg.seed,
        fan_out: FanOut {
            parallelism: cfg.parallelism,
            abort_fraction: cfg.abort_fraction,
        },
    };
    let c = completion_curve(t, skeleton.as_ref(), b.as_ref(), &tmpl, opts, Some(&sink)).map_err(Failure::data)?;
    let (csv, _) = c.write(&dir).map_err(Failure::data)?;
    info!("{} points written", c.points.len());
    println!("{}", csv.display());
    Ok(())
}

fn rescore_cmd(cfg: &RunConfig, dataset: &Path, transcript: &Path, averaging: Option<Averaging>) -> Outcome {
    let lines = read_samples(dataset).map_err(Failure::data)?;
    let entries = read_transcript(transcript).map_err(|e| Failure::Data(format!("{}: {e}", transcript.display())))?;
    let id = entries
        .first()
        .map(|e| e.backend_id.clone())
        .ok_or_else(|| Failure::Data("transcript is empty".into()))?;
    let results = rescore(&lines, &entries, &templates(cfg)?).map_err(Failure::data)?;
    let m = compute_metrics(&id, &results, averaging.unwrap_or(cfg.averaging)).map_err(Failure::data)?;
    println!("{}", serde_json::to_string_pretty(&m).map_err(Failure::data)?);
    Ok(())
}

fn synth(cfg: &RunConfig, n: usize, max_k: usize, per_subtask: usize) -> Outcome {
    let root = cfg.out_dir.join("corpus");
    let c = synthetic::corpus(n, max_k, per_subtask, &root);
    let manifest = synthetic::write_corpus(&c).map_err(|e| Failure::Data(format!("{}: {e}", root.display())))?;
    println!("{}", manifest.display());
    Ok(())
}
