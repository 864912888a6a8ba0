//! Curriculum dataset assembly: context attachment per stage, JSONL
//! serialization of samples and training records, and file-level audits.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::{Corpus, CorpusError, FrameRef, Trajectory};
use crate::modelgw::{GatewayError, ModelBackend, Query};
use crate::planner::{decompose_from_metadata, serialize_planner_record, PlannedSkeleton, PlannerError, Provenance};
use crate::promptkit::{parse_verdict, verdict_line, PromptText, Templates};
use crate::sampling::{
    downsample, enumerate_long_pairs, enumerate_short_pairs, orient, Choice, Direction, Level,
    OrientedPair, PairMeta, SamplingError,
};

#[derive(Debug, Error)]
pub enum BuildError {
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Sampling(#[from] SamplingError),
    #[error(transparent)]
    Planner(#[from] PlannerError),
    #[error("trajectory `{0}` has no subtask skeleton")]
    MissingSkeleton(String),
    #[error("no annotator backend and no pre-authored reasoning path for `{0}`")]
    AnnotatorUnavailable(String),
    #[error("annotator failed on `{sample_id}`: {source}")]
    Annotator { sample_id: String, source: GatewayError },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{0}")]
    Invalid(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> BuildError + '_ {
    move |source| BuildError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Stage {
    #[serde(rename = "cot")]
    CoT,
    #[serde(rename = "tag")]
    Tag,
    #[serde(rename = "long")]
    Long,
}

impl Stage {
    pub const ALL: [Stage; 3] = [Stage::CoT, Stage::Tag, Stage::Long];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::CoT => "cot",
            Stage::Tag => "tag",
            Stage::Long => "long",
        }
    }

    pub fn allows(self, ctx: &Context) -> bool {
        matches!(
            (self, ctx),
            (Stage::CoT, Context::CoTPath(_)) | (Stage::Tag, Context::Empty) | (Stage::Long, Context::Skeleton(_))
        )
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Stage {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "cot" => Ok(Stage::CoT),
            "tag" => Ok(Stage::Tag),
            "long" => Ok(Stage::Long),
            _ => Err(format!("unknown stage `{s}` (expected cot, tag or long)")),
        }
    }
}

/// Auxiliary context carried by a sample.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(into = "ContextWire", try_from = "ContextWire")]
pub enum Context {
    CoTPath(String),
    Empty,
    Skeleton(PlannedSkeleton),
}

impl Context {
    pub fn kind(&self) -> &'static str {
        match self {
            Context::CoTPath(_) => "cot_path",
            Context::Empty => "empty",
            Context::Skeleton(_) => "skeleton",
        }
    }
}

#[derive(Serialize, Deserialize)]
struct ContextWire {
    kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    subtasks: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    provenance: Option<Provenance>,
}

impl From<Context> for ContextWire {
    fn from(c: Context) -> Self {
        let kind = c.kind().to_string();
        match c {
            Context::CoTPath(text) => Self {
                kind,
                text: Some(text),
                subtasks: None,
                provenance: None,
            },
            Context::Empty => Self {
                kind,
                text: None,
                subtasks: None,
                provenance: None,
            },
            Context::Skeleton(s) => Self {
                kind,
                text: None,
                subtasks: Some(s.labels),
                provenance: Some(s.provenance),
            },
        }
    }
}

impl TryFrom<ContextWire> for Context {
    type Error = String;

    fn try_from(w: ContextWire) -> Result<Self, Self::Error> {
        match w.kind.as_str() {
            "cot_path" => match w.text {
                Some(t) if !t.trim().is_empty() => Ok(Context::CoTPath(t)),
                _ => Err("cot_path context needs non-empty text".into()),
            },
            "empty" => Ok(Context::Empty),
            "skeleton" => {
                let labels = w.subtasks.ok_or("skeleton context needs subtasks")?;
                PlannedSkeleton::new(labels, w.provenance.unwrap_or(Provenance::Metadata))
                    .map(Context::Skeleton)
                    .map_err(|e| e.to_string())
            }
            other => Err(format!("unknown context kind `{other}`")),
        }
    }
}

/// Stable id over (trajectory, presented frame indices, direction, stage, level).
pub fn sample_id(pair: &OrientedPair, stage: Stage) -> String {
    let mut h = Sha256::new();
    for part in [
        pair.trajectory_id(),
        &pair.img1.index.to_string(),
        &pair.img2.index.to_string(),
        pair.direction.as_str(),
        stage.as_str(),
        pair.level.kind(),
        pair.level.bin_or_window(),
    ] {
        h.update((part.len() as u64).to_le_bytes());
        h.update(part.as_bytes());
    }
    format!("{stage}-{}", &hex::encode(h.finalize())[..20])
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetSample {
    pub id: String,
    pub stage: Stage,
    pub pair: OrientedPair,
    pub context: Context,
}

impl DatasetSample {
    pub fn to_line(&self) -> SampleLine {
        SampleLine {
            id: self.id.clone(),
            stage: self.stage,
            task_name: self.pair.task_name.clone(),
            trajectory_id: self.pair.trajectory_id().to_string(),
            img1: self.pair.img1.path.clone(),
            img1_index: self.pair.img1.index,
            img2: self.pair.img2.path.clone(),
            img2_index: self.pair.img2.index,
            direction: self.pair.direction,
            level: self.pair.level.kind().to_string(),
            bin_or_window: self.pair.level.bin_or_window().to_string(),
            y_gt: self.pair.y_gt,
            context: self.context.clone(),
        }
    }
}

/// One line of a sample file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleLine {
    pub id: String,
    pub stage: Stage,
    pub task_name: String,
    pub trajectory_id: String,
    pub img1: PathBuf,
    pub img1_index: usize,
    pub img2: PathBuf,
    pub img2_index: usize,
    pub direction: Direction,
    pub level: String,
    pub bin_or_window: String,
    pub y_gt: Choice,
    pub context: Context,
}

impl SampleLine {
    pub fn level(&self) -> Result<Level, String> {
        Level::parse(&self.level, &self.bin_or_window)
    }

    /// The skeleton context, if any.
    pub fn skeleton(&self) -> Option<&PlannedSkeleton> {
        match &self.context {
            Context::Skeleton(s) => Some(s),
            _ => None,
        }
    }

    /// Evaluation prompt: the long-horizon template when a skeleton is
    /// attached, the short-horizon template otherwise.
    pub fn eval_prompt(&self, templates: &Templates) -> PromptText {
        match self.skeleton() {
            Some(s) => templates.long(&self.task_name, s),
            None => templates.short(&self.task_name),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum MessagePart {
    Image { path: PathBuf },
    Text { text: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingRecord {
    pub id: String,
    pub input: Vec<MessagePart>,
    pub target: String,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum AnnotationError {
    #[error(transparent)]
    Backend(#[from] GatewayError),
    #[error("annotator concluded {got}, ground truth is {expected}")]
    LabelMismatch { expected: Choice, got: Choice },
    #[error("reasoning path does not end with a verdict line")]
    Nonconforming,
}

/// Accepts a reasoning path only when its last non-empty line is a strict
/// verdict equal to `y_gt`.
pub fn check_cot_path(text: &str, y_gt: Choice) -> Result<String, AnnotationError> {
    let text = text.replace("\r\n", "\n");
    let text = text.trim();
    let last = text.lines().rev().find(|l| !l.trim().is_empty()).ok_or(AnnotationError::Nonconforming)?;
    match parse_verdict(last) {
        Ok(v) if !v.weak && v.choice == y_gt => Ok(text.to_string()),
        Ok(v) if !v.weak => Err(AnnotationError::LabelMismatch {
            expected: y_gt,
            got: v.choice,
        }),
        _ => Err(AnnotationError::Nonconforming),
    }
}

pub fn annotation_query(pair: &OrientedPair, templates: &Templates) -> Query {
    Query {
        sample_id: format!("annot:{}", sample_id(pair, Stage::CoT)),
        images: vec![pair.img1.path.clone(), pair.img2.path.clone()],
        prompt: templates.annotate(&pair.task_name),
        truth: Some(pair.y_gt),
    }
}

pub fn annotate_cot(
    pair: &OrientedPair,
    annotator: &dyn ModelBackend,
    templates: &Templates,
) -> Result<Context, AnnotationError> {
    let response = annotator.query(&annotation_query(pair, templates))?;
    check_cot_path(&response.text, pair.y_gt).map(Context::CoTPath)
}

/// Key for pre-authored reasoning paths: trajectory and the presented frame
/// indices in img1/img2 order.
pub type AuthoredKey = (String, usize, usize);

pub fn authored_key(pair: &OrientedPair) -> AuthoredKey {
    (pair.trajectory_id().to_string(), pair.img1.index, pair.img2.index)
}

#[derive(Debug, Clone, Deserialize)]
struct AuthoredLine {
    trajectory_id: String,
    img1_index: usize,
    img2_index: usize,
    text: String,
}

/// Reads pre-authored reasoning paths from JSONL lines
/// `{"trajectory_id", "img1_index", "img2_index", "text"}`.
pub fn load_authored_paths(path: &Path) -> Result<HashMap<AuthoredKey, String>, BuildError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut out = HashMap::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let a: AuthoredLine = serde_json::from_str(line)
            .map_err(|e| BuildError::Invalid(format!("{}:{}: {e}", path.display(), i + 1)))?;
        out.insert((a.trajectory_id, a.img1_index, a.img2_index), a.text);
    }
    Ok(out)
}

/// Where stage contexts come from.
#[derive(Clone, Copy, Default)]
pub struct ContextSources<'a> {
    pub skeleton: Option<&'a PlannedSkeleton>,
    pub annotator: Option<&'a dyn ModelBackend>,
    pub authored: Option<&'a str>,
    pub templates: Option<&'a Templates>,
}

pub fn attach_context(
    pair: OrientedPair,
    stage: Stage,
    sources: ContextSources<'_>,
) -> Result<DatasetSample, BuildError> {
    let id = sample_id(&pair, stage);
    let context = match stage {
        Stage::Tag => Context::Empty,
        Stage::Long => Context::Skeleton(
            sources
                .skeleton
                .cloned()
                .ok_or_else(|| BuildError::MissingSkeleton(pair.trajectory_id().to_string()))?,
        ),
        Stage::CoT => {
            let outcome = if let Some(text) = sources.authored {
                check_cot_path(text, pair.y_gt).map(Context::CoTPath)
            } else if let Some(annotator) = sources.annotator {
                let default = Templates::default();
                annotate_cot(&pair, annotator, sources.templates.unwrap_or(&default))
            } else {
                return Err(BuildError::AnnotatorUnavailable(id));
            };
            match outcome {
                Ok(c) => c,
                Err(AnnotationError::Backend(source)) => {
                    return Err(BuildError::Annotator { sample_id: id, source })
                }
                Err(e) => return Err(BuildError::Invalid(format!("{id}: {e}"))),
            }
        }
    };
    Ok(DatasetSample {
        id,
        stage,
        pair,
        context,
    })
}

fn record_for(line: &SampleLine, templates: &Templates) -> TrainingRecord {
    let prompt = line.eval_prompt(templates);
    let target = match &line.context {
        Context::CoTPath(text) => text.clone(),
        Context::Empty | Context::Skeleton(_) => verdict_line(line.y_gt),
    };
    TrainingRecord {
        id: line.id.clone(),
        input: vec![
            MessagePart::Image { path: line.img1.clone() },
            MessagePart::Image { path: line.img2.clone() },
            MessagePart::Text { text: prompt.text },
        ],
        target,
    }
}

/// Images in img1/img2 order followed by the stage prompt; the target is the
/// reasoning path (which ends in the verdict) for CoT, the verdict line only
/// otherwise.
pub fn to_training_record(sample: &DatasetSample, templates: &Templates) -> TrainingRecord {
    record_for(&sample.to_line(), templates)
}

pub fn training_record_for_line(line: &SampleLine, templates: &Templates) -> TrainingRecord {
    record_for(line, templates)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Quotas {
    /// Short pairs per interval bin per trajectory for the Tag stage.
    pub short_per_bin: usize,
    /// Short pairs per interval bin per trajectory for the CoT stage.
    pub cot_per_bin: usize,
    /// Long pairs per window class per trajectory.
    pub long_per_window: usize,
}

impl Default for Quotas {
    fn default() -> Self {
        Self {
            short_per_bin: 4,
            cot_per_bin: 2,
            long_per_window: 8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BuildConfig {
    pub factor: usize,
    pub quotas: Quotas,
    pub seed: u64,
    pub out_dir: PathBuf,
}

pub struct BuildSources<'a> {
    pub templates: &'a Templates,
    pub annotator: Option<&'a dyn ModelBackend>,
    pub authored: &'a HashMap<AuthoredKey, String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BuildReport {
    pub stage: String,
    pub trajectories: usize,
    pub samples: usize,
    /// direction → bin or window → count.
    pub counts: BTreeMap<String, BTreeMap<String, usize>>,
    pub dropped_label_mismatch: usize,
    pub dropped_nonconforming: usize,
    pub planner_records: usize,
    pub files: Vec<String>,
}

/// Output file names for a stage, relative to the output directory.
pub fn stage_files(stage: Stage) -> (String, String, String) {
    (
        format!("{stage}.jsonl"),
        format!("{stage}_train.jsonl"),
        format!("{stage}_report.json"),
    )
}

pub const PLANNER_FILE: &str = "planner_train.jsonl";

/// Per-stage seed so CoT and Tag draws differ for the same trajectory.
fn stage_seed(seed: u64, stage: Stage) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(stage.as_str().as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

#[derive(Default)]
struct TrajectoryOutput {
    samples: Vec<DatasetSample>,
    label_mismatch: usize,
    nonconforming: usize,
}

fn oriented_pairs(t: &Trajectory, stage: Stage, cfg: &BuildConfig) -> Result<Vec<OrientedPair>, BuildError> {
    let seq = downsample(t, cfg.factor)?;
    let seed = stage_seed(cfg.seed, stage);
    let ordered: Vec<(FrameRef, FrameRef, Level)> = match stage {
        Stage::CoT | Stage::Tag => {
            let quota = if stage == Stage::CoT {
                cfg.quotas.cot_per_bin
            } else {
                cfg.quotas.short_per_bin
            };
            enumerate_short_pairs(&seq, quota, seed)
                .into_iter()
                .map(|(a, b, bin)| (a, b, Level::Short(bin)))
                .collect()
        }
        Stage::Long => {
            let sk = t.skeleton.as_ref().ok_or_else(|| BuildError::MissingSkeleton(t.id.clone()))?;
            enumerate_long_pairs(&seq, Some(sk), cfg.quotas.long_per_window, seed)?
                .into_iter()
                .map(|(a, b, w)| (a, b, Level::Long(w)))
                .collect()
        }
    };
    let mut out = Vec::with_capacity(ordered.len() * 2);
    for (a, b, level) in ordered {
        let meta = PairMeta {
            level,
            task_name: t.task_name.clone(),
            skeleton: t.skeleton.clone(),
        };
        let (fwd, inv) = orient(&a, &b, meta)?;
        out.push(fwd);
        out.push(inv);
    }
    Ok(out)
}

fn build_trajectory(
    t: &Trajectory,
    stage: Stage,
    cfg: &BuildConfig,
    src: &BuildSources<'_>,
) -> Result<TrajectoryOutput, BuildError> {
    let planned = match stage {
        Stage::Long => Some(decompose_from_metadata(t).map_err(|e| match e {
            PlannerError::NoSkeleton(id) => BuildError::MissingSkeleton(id),
            other => other.into(),
        })?),
        _ => None,
    };
    let pairs = oriented_pairs(t, stage, cfg)?;
    let mut out = TrajectoryOutput::default();
    if stage != Stage::CoT {
        for pair in pairs {
            let sources = ContextSources {
                skeleton: planned.as_ref(),
                ..ContextSources::default()
            };
            out.samples.push(attach_context(pair, stage, sources)?);
        }
        return Ok(out);
    }
    // forward and inverse twins are kept or dropped together
    for twins in pairs.chunks(2) {
        let mut kept = Vec::with_capacity(2);
        let mut rejected = None;
        for pair in twins {
            let id = sample_id(pair, Stage::CoT);
            let outcome = match (src.authored.get(&authored_key(pair)), src.annotator) {
                (Some(text), _) => check_cot_path(text, pair.y_gt),
                (None, Some(a)) => match annotate_cot(pair, a, src.templates) {
                    Ok(Context::CoTPath(text)) => Ok(text),
                    Ok(_) => unreachable!("annotate_cot yields a reasoning path"),
                    Err(e) => Err(e),
                },
                (None, None) => return Err(BuildError::AnnotatorUnavailable(id)),
            };
            match outcome {
                Ok(text) => kept.push(DatasetSample {
                    id,
                    stage,
                    pair: pair.clone(),
                    context: Context::CoTPath(text),
                }),
                Err(AnnotationError::Backend(source)) => {
                    return Err(BuildError::Annotator { sample_id: id, source })
                }
                Err(e) => {
                    log::info!("dropping {id} and its twin: {e}");
                    rejected = Some(e);
                    break;
                }
            }
        }
        match rejected {
            None => out.samples.extend(kept),
            Some(AnnotationError::LabelMismatch { .. }) => out.label_mismatch += 2,
            Some(_) => out.nonconforming += 2,
        }
    }
    Ok(out)
}

/// Writes all files to temporaries first and renames them into place only
/// when every write succeeded.
struct StagedFiles {
    staged: Vec<(PathBuf, PathBuf)>,
}

impl StagedFiles {
    fn new() -> Self {
        Self { staged: Vec::new() }
    }

    fn write(&mut self, target: PathBuf, write: impl FnOnce(&mut BufWriter<File>) -> std::io::Result<()>) -> Result<(), BuildError> {
        let name = target.file_name().and_then(|n| n.to_str()).unwrap_or("out");
        let tmp = target.with_file_name(format!(".{name}.partial"));
        self.staged.push((tmp.clone(), target));
        let f = File::create(&tmp).map_err(io_err(&tmp))?;
        let mut w = BufWriter::new(f);
        write(&mut w).map_err(io_err(&tmp))?;
        w.flush().map_err(io_err(&tmp))?;
        Ok(())
    }

    fn commit(mut self) -> Result<(), BuildError> {
        for (tmp, target) in std::mem::take(&mut self.staged) {
            fs::rename(&tmp, &target).map_err(io_err(&target))?;
        }
        Ok(())
    }
}

impl Drop for StagedFiles {
    fn drop(&mut self) {
        for (tmp, _) in &self.staged {
            let _ = fs::remove_file(tmp);
        }
    }
}

fn write_jsonl<T: Serialize>(w: &mut impl Write, items: &[T]) -> std::io::Result<()> {
    for item in items {
        serde_json::to_writer(&mut *w, item)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

/// Builds one curriculum stage over the whole corpus and writes the sample
/// file, the training-record file and a report. The Long stage also writes
/// planner records. Output order is trajectory order, then bin or window
/// order, then draw order, with each forward sample followed by its twin.
pub fn build_stage(
    corpus: &Corpus,
    stage: Stage,
    cfg: &BuildConfig,
    src: &BuildSources<'_>,
) -> Result<BuildReport, BuildError> {
    if cfg.factor == 0 {
        return Err(SamplingError::ZeroFactor.into());
    }
    if stage == Stage::CoT && src.annotator.is_none() && src.authored.is_empty() {
        return Err(BuildError::AnnotatorUnavailable(format!("stage {stage}")));
    }
    fs::create_dir_all(&cfg.out_dir).map_err(io_err(&cfg.out_dir))?;

    let threads = match (stage, src.annotator) {
        (Stage::CoT, Some(a)) => a.parallelism().max(1),
        _ => rayon::current_num_threads(),
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| BuildError::Invalid(e.to_string()))?;
    let per_traj: Vec<Result<TrajectoryOutput, BuildError>> = pool.install(|| {
        corpus
            .trajectories
            .par_iter()
            .map(|t| build_trajectory(t, stage, cfg, src))
            .collect()
    });

    let mut report = BuildReport {
        stage: stage.to_string(),
        trajectories: corpus.trajectories.len(),
        ..BuildReport::default()
    };
    let mut lines = Vec::new();
    for r in per_traj {
        let out = r?;
        report.dropped_label_mismatch += out.label_mismatch;
        report.dropped_nonconforming += out.nonconforming;
        lines.extend(out.samples.iter().map(DatasetSample::to_line));
    }
    for l in &lines {
        *report
            .counts
            .entry(l.direction.as_str().to_string())
            .or_default()
            .entry(l.bin_or_window.clone())
            .or_default() += 1;
    }
    report.samples = lines.len();
    let records: Vec<TrainingRecord> = lines.iter().map(|l| training_record_for_line(l, src.templates)).collect();

    let (samples_name, records_name, report_name) = stage_files(stage);
    let mut files = StagedFiles::new();
    files.write(cfg.out_dir.join(&samples_name), |w| write_jsonl(w, &lines))?;
    files.write(cfg.out_dir.join(&records_name), |w| write_jsonl(w, &records))?;
    report.files = vec![samples_name, records_name];
    if stage == Stage::Long {
        let planner: Vec<TrainingRecord> = corpus
            .trajectories
            .iter()
            .map(|t| serialize_planner_record(t, src.templates))
            .collect::<Result<_, _>>()?;
        report.planner_records = planner.len();
        files.write(cfg.out_dir.join(PLANNER_FILE), |w| write_jsonl(w, &planner))?;
        report.files.push(PLANNER_FILE.to_string());
    }
    report.files.push(report_name.clone());
    let report_json = serde_json::to_string_pretty(&report).expect("report serializes");
    files.write(cfg.out_dir.join(&report_name), |w| {
        w.write_all(report_json.as_bytes())?;
        w.write_all(b"\n")
    })?;
    files.commit()?;
    Ok(report)
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, BuildError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| BuildError::Invalid(format!("{}:{}: {e}", path.display(), i + 1)))
        })
        .collect()
}

pub fn read_samples(path: &Path) -> Result<Vec<SampleLine>, BuildError> {
    read_jsonl(path)
}

/// Findings of the file-level audits; empty lists mean the check passed.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct AuditReport {
    pub samples: usize,
    pub context_violations: Vec<String>,
    pub swap_violations: Vec<String>,
    pub label_violations: Vec<String>,
    pub verdict_violations: Vec<String>,
    pub duplicate_ids: Vec<String>,
}

impl AuditReport {
    pub fn passed(&self) -> bool {
        self.context_violations.is_empty()
            && self.swap_violations.is_empty()
            && self.label_violations.is_empty()
            && self.verdict_violations.is_empty()
            && self.duplicate_ids.is_empty()
    }
}

/// Every sample's stage and context kind form an allowed combination.
pub fn audit_context_rule(lines: &[SampleLine]) -> Vec<String> {
    lines
        .iter()
        .filter(|l| !l.stage.allows(&l.context))
        .map(|l| format!("{}: stage {} with context {}", l.id, l.stage, l.context.kind()))
        .collect()
}

/// Every sample's image-swapped, label-flipped twin is in the same set.
pub fn audit_swap_closure(lines: &[SampleLine]) -> Vec<String> {
    type Key<'a> = (&'a str, Stage, &'a str, &'a str, usize, usize, Direction, Choice);
    fn key(l: &SampleLine) -> Key<'_> {
        (
            l.trajectory_id.as_str(),
            l.stage,
            l.level.as_str(),
            l.bin_or_window.as_str(),
            l.img1_index,
            l.img2_index,
            l.direction,
            l.y_gt,
        )
    }
    let present: HashSet<Key<'_>> = lines.iter().map(key).collect();
    lines
        .iter()
        .filter(|l| {
            !present.contains(&(
                l.trajectory_id.as_str(),
                l.stage,
                l.level.as_str(),
                l.bin_or_window.as_str(),
                l.img2_index,
                l.img1_index,
                l.direction.flipped(),
                l.y_gt.flipped(),
            ))
        })
        .map(|l| format!("{}: no {} twin", l.id, l.direction.flipped().as_str()))
        .collect()
}

/// Ground truth follows raw temporal order and the direction label.
pub fn audit_labels(lines: &[SampleLine]) -> Vec<String> {
    lines
        .iter()
        .filter(|l| {
            let expected = match l.direction {
                Direction::Forward => (l.img2_index > l.img1_index, Choice::Img2),
                Direction::Inverse => (l.img1_index > l.img2_index, Choice::Img1),
            };
            !(expected.0 && expected.1 == l.y_gt)
        })
        .map(|l| format!("{}: y_gt {} inconsistent with {} order", l.id, l.y_gt, l.direction.as_str()))
        .collect()
}

/// The last line of each record target parses to the sample's ground truth.
pub fn audit_records(lines: &[SampleLine], records: &[TrainingRecord]) -> Vec<String> {
    let truth: HashMap<&str, Choice> = lines.iter().map(|l| (l.id.as_str(), l.y_gt)).collect();
    let mut out = Vec::new();
    for r in records {
        let Some(y) = truth.get(r.id.as_str()) else {
            out.push(format!("{}: record without sample", r.id));
            continue;
        };
        let last = r.target.lines().last().unwrap_or("");
        match parse_verdict(last) {
            Ok(v) if v.choice == *y && !v.weak => {}
            _ => out.push(format!("{}: target does not conclude {y}", r.id)),
        }
    }
    if records.len() != lines.len() {
        out.push(format!("{} records for {} samples", records.len(), lines.len()));
    }
    out
}

pub fn audit_lines(lines: &[SampleLine], records: Option<&[TrainingRecord]>) -> AuditReport {
    let mut seen = HashSet::new();
    AuditReport {
        samples: lines.len(),
        context_violations: audit_context_rule(lines),
        swap_violations: audit_swap_closure(lines),
        label_violations: audit_labels(lines),
        verdict_violations: records.map(|r| audit_records(lines, r)).unwrap_or_default(),
        duplicate_ids: lines
            .iter()
            .filter(|l| !seen.insert(l.id.as_str()))
            .map(|l| l.id.clone())
            .collect(),
    }
}

/// Audits a stage's sample file and, when present, its training records.
pub fn audit_stage_dir(dir: &Path, stage: Stage) -> Result<AuditReport, BuildError> {
    let (samples, records, _) = stage_files(stage);
    let lines = read_samples(&dir.join(samples))?;
    let rec_path = dir.join(records);
    let recs: Option<Vec<TrainingRecord>> = if rec_path.is_file() {
        Some(read_jsonl(&rec_path)?)
    } else {
        None
    };
    Ok(audit_lines(&lines, recs.as_deref()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Subtask, SubtaskSkeleton};
    use crate::modelgw::{PolicyBackend, PolicyKind, Response};
    use crate::sampling::{IntervalBin, WindowClass};
    use rand::Rng;

    fn traj(id: &str, n: usize, k: Option<usize>) -> Trajectory {
        Trajectory {
            id: id.into(),
            task_name: "put the cup on the shelf".into(),
            frames: (0..n)
                .map(|i| FrameRef {
                    trajectory_id: id.into(),
                    index: i,
                    path: PathBuf::from(format!("/f/{id}/{i:04}.jpg")),
                    timestamp_ms: None,
                })
                .collect(),
            skeleton: k.map(|k| {
                let w = n / k;
                SubtaskSkeleton::new(
                    (0..k)
                        .map(|j| Subtask {
                            label: format!("step {}", j + 1),
                            start: j * w,
                            end: if j + 1 == k { n - 1 } else { (j + 1) * w - 1 },
                        })
                        .collect(),
                )
            }),
            source: "test".into(),
        }
    }

    fn corpus(ts: Vec<Trajectory>) -> Corpus {
        Corpus {
            trajectories: ts,
            root: PathBuf::from("/f"),
            manifest_version: "1".into(),
        }
    }

    fn pair(level: Level) -> OrientedPair {
        let t = traj("a", 200, Some(4));
        let meta = PairMeta {
            level,
            task_name: t.task_name.clone(),
            skeleton: t.skeleton.clone(),
        };
        orient(&t.frames[10], &t.frames[60], meta).unwrap().0
    }

    fn cfg(dir: &Path, seed: u64) -> BuildConfig {
        BuildConfig {
            factor: 10,
            quotas: Quotas {
                short_per_bin: 2,
                cot_per_bin: 2,
                long_per_window: 3,
            },
            seed,
            out_dir: dir.to_path_buf(),
        }
    }

    struct Agreeing {
        rate: f64,
    }

    impl ModelBackend for Agreeing {
        fn id(&self) -> &str {
            "agreeing"
        }
        fn max_images(&self) -> usize {
            2
        }
        fn query(&self, q: &Query) -> Result<Response, GatewayError> {
            let truth = q.truth.unwrap();
            let mut rng = crate::sampling::keyed_rng(3, &[&q.sample_id]);
            let c = if rng.random_bool(self.rate) { truth } else { truth.flipped() };
            Ok(Response::instant(format!("The arm is lower in one image.\n{}", verdict_line(c))))
        }
    }

    #[test]
    fn context_rule_per_stage() {
        let p = pair(Level::Short(IntervalBin::Gap5));
        let tag = attach_context(p.clone(), Stage::Tag, ContextSources::default()).unwrap();
        assert_eq!(tag.context, Context::Empty);

        let sk = PlannedSkeleton::new(vec!["a".into(), "b".into(), "c".into()], Provenance::Metadata).unwrap();
        let long = attach_context(
            pair(Level::Long(WindowClass::InterTask)),
            Stage::Long,
            ContextSources {
                skeleton: Some(&sk),
                ..ContextSources::default()
            },
        )
        .unwrap();
        assert!(matches!(&long.context, Context::Skeleton(s) if s.k() == 3));

        assert!(matches!(
            attach_context(p.clone(), Stage::CoT, ContextSources::default()),
            Err(BuildError::AnnotatorUnavailable(_))
        ));
        assert!(matches!(
            attach_context(p, Stage::Long, ContextSources::default()),
            Err(BuildError::MissingSkeleton(_))
        ));
    }

    #[test]
    fn cot_annotation_filter() {
        let p = pair(Level::Short(IntervalBin::Gap5));
        let t = Templates::default();
        let oracle = PolicyBackend::new("oracle", PolicyKind::Oracle, 2);
        match annotate_cot(&p, &oracle, &t).unwrap() {
            Context::CoTPath(text) => {
                assert_eq!(parse_verdict(text.lines().last().unwrap()).unwrap().choice, p.y_gt)
            }
            other => panic!("{other:?}"),
        }
        let wrong = PolicyBackend::new("first", PolicyKind::AlwaysFirst, 2);
        assert_eq!(
            annotate_cot(&p, &wrong, &t),
            Err(AnnotationError::LabelMismatch {
                expected: Choice::Img2,
                got: Choice::Img1
            })
        );
        assert_eq!(check_cot_path("no verdict here", Choice::Img1), Err(AnnotationError::Nonconforming));
        assert_eq!(
            check_cot_path("closer to completion: [img2]\ntrailing words", Choice::Img2),
            Err(AnnotationError::Nonconforming)
        );
    }

    #[test]
    fn ninety_percent_annotator_retains_consistent_subset() {
        let t = traj("a", 2000, None);
        let tmpl = Templates::default();
        let a = Agreeing { rate: 0.9 };
        let mut kept = 0;
        for i in 0..100 {
            let meta = PairMeta {
                level: Level::Short(IntervalBin::Gap5),
                task_name: t.task_name.clone(),
                skeleton: None,
            };
            let (fwd, _) = orient(&t.frames[i * 10], &t.frames[i * 10 + 50], meta).unwrap();
            if let Ok(Context::CoTPath(text)) = annotate_cot(&fwd, &a, &tmpl) {
                kept += 1;
                assert_eq!(parse_verdict(&text).unwrap().choice, fwd.y_gt);
            }
        }
        assert!((82..=97).contains(&kept), "{kept}");
    }

    #[test]
    fn tag_build_counts_and_determinism() {
        let dir = tempfile::tempdir().unwrap();
        let c = corpus(vec![traj("a", 300, None)]);
        let t = Templates::default();
        let authored = HashMap::new();
        let src = BuildSources {
            templates: &t,
            annotator: None,
            authored: &authored,
        };
        let r1 = build_stage(&c, Stage::Tag, &cfg(dir.path(), 7), &src).unwrap();
        assert!(r1.samples <= 2 * 8 * 2);
        // 30 kept frames: every bin has at least 2 candidates
        assert_eq!(r1.samples, 32);
        let first = fs::read(dir.path().join("tag.jsonl")).unwrap();
        let r2 = build_stage(&c, Stage::Tag, &cfg(dir.path(), 7), &src).unwrap();
        assert_eq!(r1, r2);
        assert_eq!(fs::read(dir.path().join("tag.jsonl")).unwrap(), first);

        let audit = audit_stage_dir(dir.path(), Stage::Tag).unwrap();
        assert!(audit.passed(), "{audit:?}");
        let lines = read_samples(&dir.path().join("tag.jsonl")).unwrap();
        assert!(lines.iter().all(|l| l.context == Context::Empty));
        let recs: Vec<TrainingRecord> = read_jsonl(&dir.path().join("tag_train.jsonl")).unwrap();
        let img2 = lines.iter().position(|l| l.y_gt == Choice::Img2).unwrap();
        assert_eq!(recs[img2].target, "closer to completion: [img2]");
    }

    #[test]
    fn long_build_requires_skeleton_and_leaves_no_partial_files() {
        let dir = tempfile::tempdir().unwrap();
        let c = corpus(vec![traj("good", 200, Some(4)), traj("bare", 200, None)]);
        let t = Templates::default();
        let authored = HashMap::new();
        let src = BuildSources {
            templates: &t,
            annotator: None,
            authored: &authored,
        };
        match build_stage(&c, Stage::Long, &cfg(dir.path(), 1), &src) {
            Err(BuildError::MissingSkeleton(id)) => assert_eq!(id, "bare"),
            other => panic!("{other:?}"),
        }
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 0);
    }

    #[test]
    fn long_records_carry_skeleton_in_input_only() {
        let dir = tempfile::tempdir().unwrap();
        let c = corpus(vec![traj("good", 200, Some(4))]);
        let t = Templates::default();
        let authored = HashMap::new();
        let src = BuildSources {
            templates: &t,
            annotator: None,
            authored: &authored,
        };
        let r = build_stage(&c, Stage::Long, &cfg(dir.path(), 1), &src).unwrap();
        assert_eq!(r.planner_records, 1);
        let lines = read_samples(&dir.path().join("long.jsonl")).unwrap();
        let recs: Vec<TrainingRecord> = read_jsonl(&dir.path().join("long_train.jsonl")).unwrap();
        for (l, r) in lines.iter().zip(&recs) {
            let text = r
                .input
                .iter()
                .find_map(|p| match p {
                    MessagePart::Text { text } => Some(text.as_str()),
                    _ => None,
                })
                .unwrap();
            assert!(text.contains("1. step 1; 2. step 2; 3. step 3; 4. step 4"));
            assert!(!r.target.contains("step"));
            assert_eq!(r.target, verdict_line(l.y_gt));
            assert_eq!(
                r.input[..2],
                [MessagePart::Image { path: l.img1.clone() }, MessagePart::Image { path: l.img2.clone() }]
            );
        }
        assert!(audit_stage_dir(dir.path(), Stage::Long).unwrap().passed());
    }

    #[test]
    fn cot_build_drops_twins_together() {
        let dir = tempfile::tempdir().unwrap();
        let c = corpus(vec![traj("a", 400, None), traj("b", 300, None)]);
        let t = Templates::default();
        let authored = HashMap::new();
        let a = Agreeing { rate: 0.8 };
        let src = BuildSources {
            templates: &t,
            annotator: Some(&a),
            authored: &authored,
        };
        let r = build_stage(&c, Stage::CoT, &cfg(dir.path(), 2), &src).unwrap();
        assert!(r.dropped_label_mismatch > 0);
        assert_eq!(r.samples + r.dropped_label_mismatch, 2 * 2 * 8 * 2);
        let audit = audit_stage_dir(dir.path(), Stage::CoT).unwrap();
        assert!(audit.passed(), "{audit:?}");
    }

    #[test]
    fn ids_are_stable_and_distinct() {
        let p = pair(Level::Short(IntervalBin::Gap5));
        assert_eq!(sample_id(&p, Stage::Tag), sample_id(&p.clone(), Stage::Tag));
        assert_ne!(sample_id(&p, Stage::Tag), sample_id(&p.swapped(), Stage::Tag));
        assert_ne!(sample_id(&p, Stage::Tag), sample_id(&p, Stage::CoT));
        assert!(sample_id(&p, Stage::Tag).starts_with("tag-"));
    }

    #[test]
    fn context_wire_format() {
        let sk = PlannedSkeleton::new(vec!["a".into(), "b".into()], Provenance::Metadata).unwrap();
        let j = serde_json::to_value(Context::Skeleton(sk.clone())).unwrap();
        assert_eq!(j["kind"], "skeleton");
        assert_eq!(j["subtasks"], serde_json::json!(["a", "b"]));
        assert_eq!(serde_json::from_value::<Context>(j).unwrap(), Context::Skeleton(sk));
        assert_eq!(serde_json::to_string(&Context::Empty).unwrap(), r#"{"kind":"empty"}"#);
        assert!(serde_json::from_str::<Context>(r#"{"kind":"cot_path","text":" "}"#).is_err());
        assert!(serde_json::from_str::<Context>(r#"{"kind":"other"}"#).is_err());
    }

    #[test]
    fn audits_catch_violations() {
        let p = pair(Level::Short(IntervalBin::Gap5));
        let fwd = attach_context(p.clone(), Stage::Tag, ContextSources::default()).unwrap().to_line();
        let inv = attach_context(p.swapped(), Stage::Tag, ContextSources::default()).unwrap().to_line();
        assert!(audit_lines(&[fwd.clone(), inv.clone()], None).passed());
        let lone = audit_lines(std::slice::from_ref(&fwd), None);
        assert_eq!(lone.swap_violations.len(), 1);
        let mut bad = fwd.clone();
        bad.context = Context::CoTPath("closer to completion: [img2]".into());
        assert_eq!(audit_context_rule(&[bad]).len(), 1);
        let mut flipped = inv;
        flipped.y_gt = Choice::Img2;
        assert_eq!(audit_labels(&[flipped]).len(), 1);
    }
}
