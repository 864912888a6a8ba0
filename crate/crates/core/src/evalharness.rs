//! Dual-level evaluation: query fan-out, scoring, metric aggregation, report
//! rendering and task-completion curves.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::time::{SystemTime, UNIX_EPOCH};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::builder::SampleLine;
use crate::corpus::Trajectory;
use crate::modelgw::{
    prompt_sha256, record_transcript, GatewayError, ModelBackend, Query, Response, TranscriptEntry, TranscriptSink,
};
use crate::planner::PlannedSkeleton;
use crate::promptkit::{parse_verdict, ParseError, Templates, Verdict};
use crate::sampling::{keyed_rng, Choice, Direction, IntervalBin, Level, WindowClass};

pub const DEFAULT_ABORT_FRACTION: f64 = 0.2;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("dataset: {0}")]
    Dataset(String),
    #[error("no results to aggregate")]
    EmptyResults,
    #[error("aborted: {failed} of {total} queries failed at the transport level")]
    Aborted { failed: usize, total: usize },
    #[error("transcript has no entry for sample `{0}`")]
    MissingTranscript(String),
    #[error("{0}")]
    InvalidArgs(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> EvalError + '_ {
    move |source| EvalError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Averaging {
    #[default]
    Macro,
    SampleWeighted,
}

impl FromStr for Averaging {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "macro" => Ok(Averaging::Macro),
            "sample_weighted" | "weighted" => Ok(Averaging::SampleWeighted),
            _ => Err(format!("unknown averaging `{s}` (expected macro or sample_weighted)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Outcome {
    Answered { verdict: Verdict },
    Unparseable { error: ParseError },
    /// The query itself failed; scored incorrect.
    Failed { error: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawResult {
    pub sample_id: String,
    pub outcome: Outcome,
    pub correct: bool,
    pub direction: Direction,
    pub level: String,
    pub bin_or_window: String,
}

impl RawResult {
    pub fn choice(&self) -> Option<Choice> {
        match &self.outcome {
            Outcome::Answered { verdict } => Some(verdict.choice),
            _ => None,
        }
    }

    pub fn level(&self) -> Option<Level> {
        Level::parse(&self.level, &self.bin_or_window).ok()
    }
}

/// Scores one sample from the backend's response text (or failure).
pub fn score(line: &SampleLine, response: Result<&str, &str>) -> RawResult {
    let outcome = match response {
        Ok(text) => match parse_verdict(text) {
            Ok(verdict) => Outcome::Answered { verdict },
            Err(error) => Outcome::Unparseable { error },
        },
        Err(e) => Outcome::Failed { error: e.to_string() },
    };
    let correct = matches!(&outcome, Outcome::Answered { verdict } if verdict.choice == line.y_gt);
    RawResult {
        sample_id: line.id.clone(),
        outcome,
        correct,
        direction: line.direction,
        level: line.level.clone(),
        bin_or_window: line.bin_or_window.clone(),
    }
}

fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

#[derive(Debug, Clone, Copy)]
pub struct FanOut {
    pub parallelism: usize,
    pub abort_fraction: f64,
}

impl Default for FanOut {
    fn default() -> Self {
        Self {
            parallelism: 4,
            abort_fraction: DEFAULT_ABORT_FRACTION,
        }
    }
}

/// Sends every query once, concurrently up to the smaller of the requested
/// and the backend's parallelism, and returns outcomes in query order. Stops
/// early once transport failures exceed the abort fraction of all queries.
pub fn fan_out(
    queries: &[Query],
    backend: &dyn ModelBackend,
    opts: FanOut,
) -> Result<Vec<Result<Response, GatewayError>>, EvalError> {
    let threads = opts.parallelism.max(1).min(backend.parallelism().max(1));
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| EvalError::InvalidArgs(e.to_string()))?;
    let limit = (opts.abort_fraction * queries.len() as f64).floor() as usize;
    let failures = AtomicUsize::new(0);
    let abort = AtomicBool::new(false);
    let out: Vec<Option<Result<Response, GatewayError>>> = pool.install(|| {
        queries
            .par_iter()
            .map(|q| {
                if abort.load(Ordering::Relaxed) {
                    return None;
                }
                let r = backend.query(q);
                if matches!(&r, Err(e) if e.is_transport()) && failures.fetch_add(1, Ordering::SeqCst) + 1 > limit {
                    abort.store(true, Ordering::SeqCst);
                }
                Some(r)
            })
            .collect()
    });
    if abort.load(Ordering::SeqCst) {
        return Err(EvalError::Aborted {
            failed: failures.load(Ordering::SeqCst),
            total: queries.len(),
        });
    }
    Ok(out.into_iter().map(|r| r.expect("every query ran")).collect())
}

pub fn check_dataset(lines: &[SampleLine]) -> Result<(), EvalError> {
    let mut ids = HashSet::new();
    for l in lines {
        if !ids.insert(l.id.as_str()) {
            return Err(EvalError::Dataset(format!("duplicate sample id `{}`", l.id)));
        }
        l.level().map_err(|e| EvalError::Dataset(format!("{}: {e}", l.id)))?;
    }
    Ok(())
}

pub fn eval_query(line: &SampleLine, templates: &Templates) -> Query {
    Query {
        sample_id: line.id.clone(),
        images: vec![line.img1.clone(), line.img2.clone()],
        prompt: line.eval_prompt(templates),
        truth: Some(line.y_gt),
    }
}

#[derive(Debug, Clone)]
pub struct EvalRun {
    /// Sorted by sample id.
    pub results: Vec<RawResult>,
    /// Sorted by sample id.
    pub transcript: Vec<TranscriptEntry>,
}

/// Queries every sample exactly once. Short samples get the short-horizon
/// prompt and long samples the long-horizon prompt with their skeleton.
pub fn run_eval(
    lines: &[SampleLine],
    backend: &dyn ModelBackend,
    templates: &Templates,
    opts: FanOut,
    sink: Option<&TranscriptSink>,
) -> Result<EvalRun, EvalError> {
    check_dataset(lines)?;
    let queries: Vec<Query> = lines.iter().map(|l| eval_query(l, templates)).collect();
    let responses = fan_out(&queries, backend, opts)?;
    let deterministic = backend.deterministic();
    let mut rows: Vec<(RawResult, TranscriptEntry)> = lines
        .iter()
        .zip(&queries)
        .zip(&responses)
        .map(|((line, q), r)| {
            let ts = if deterministic { 0 } else { now_ms() };
            let entry = record_transcript(backend.id(), q, r, ts);
            let result = match r {
                Ok(resp) => score(line, Ok(&resp.text)),
                Err(e) => score(line, Err(&e.to_string())),
            };
            (result, entry)
        })
        .collect();
    rows.sort_by(|a, b| a.0.sample_id.cmp(&b.0.sample_id));
    if let Some(sink) = sink {
        for (_, e) in &rows {
            sink.append(e);
        }
        sink.flush();
    }
    let (results, transcript) = rows.into_iter().unzip();
    Ok(EvalRun { results, transcript })
}

/// Re-scores a dataset against saved transcript entries without querying.
pub fn rescore(lines: &[SampleLine], transcript: &[TranscriptEntry], templates: &Templates) -> Result<Vec<RawResult>, EvalError> {
    check_dataset(lines)?;
    let by_id: HashMap<&str, &TranscriptEntry> = transcript.iter().map(|e| (e.sample_id.as_str(), e)).collect();
    let mut results = lines
        .iter()
        .map(|l| {
            let e = by_id
                .get(l.id.as_str())
                .ok_or_else(|| EvalError::MissingTranscript(l.id.clone()))?;
            if e.prompt_sha256 != prompt_sha256(&l.eval_prompt(templates).text) {
                log::warn!("{}: transcript prompt differs from the current template", l.id);
            }
            Ok(match (&e.response, &e.error) {
                (Some(text), _) => score(l, Ok(text)),
                (None, err) => score(l, Err(err.as_deref().unwrap_or("no response"))),
            })
        })
        .collect::<Result<Vec<_>, EvalError>>()?;
    results.sort_by(|a, b| a.sample_id.cmp(&b.sample_id));
    Ok(results)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub n: usize,
    pub correct: usize,
    /// Percent; `None` when `n == 0`.
    pub accuracy: Option<f64>,
}

impl Cell {
    fn new(n: usize, correct: usize) -> Self {
        Self {
            n,
            correct,
            accuracy: (n > 0).then(|| 100.0 * correct as f64 / n as f64),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShortCell {
    pub bin: String,
    #[serde(flatten)]
    pub cell: Cell,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LongCell {
    pub direction: Direction,
    pub window: String,
    #[serde(flatten)]
    pub cell: Cell,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub backend_id: String,
    pub averaging: Averaging,
    pub n: usize,
    /// Interval bins in order 5..12+, both directions pooled.
    pub short: Vec<ShortCell>,
    pub short_avg: Option<f64>,
    pub short_fwd_avg: Option<f64>,
    pub short_inv_avg: Option<f64>,
    /// Forward S/M/L then inverse S/M/L.
    pub long: Vec<LongCell>,
    pub long_fwd_avg: Option<f64>,
    pub long_inv_avg: Option<f64>,
    pub long_avg: Option<f64>,
    /// `|fwd − inv|` at the long level, or the short level for datasets
    /// without long samples.
    pub bias_gap: Option<f64>,
    pub parse_error_rate: f64,
    pub failure_rate: f64,
}

fn average(cells: &[&Cell], mode: Averaging) -> Option<f64> {
    let filled: Vec<&&Cell> = cells.iter().filter(|c| c.n > 0).collect();
    if filled.is_empty() {
        return None;
    }
    Some(match mode {
        Averaging::Macro => filled.iter().map(|c| c.accuracy.expect("n > 0")).sum::<f64>() / filled.len() as f64,
        Averaging::SampleWeighted => {
            let n: usize = filled.iter().map(|c| c.n).sum();
            let k: usize = filled.iter().map(|c| c.correct).sum();
            100.0 * k as f64 / n as f64
        }
    })
}

/// `(avg, gap)` of a forward and an inverse accuracy.
pub fn bias_metrics(fwd: f64, inv: f64) -> (f64, f64) {
    ((fwd + inv) / 2.0, (fwd - inv).abs())
}

pub fn bias_gap(a: f64, b: f64) -> f64 {
    (a - b).abs()
}

/// Half-away-from-zero rounding to one decimal.
pub fn round1(x: f64) -> f64 {
    (x * 10.0).round() / 10.0
}

pub fn compute_metrics(backend_id: &str, results: &[RawResult], mode: Averaging) -> Result<MetricsReport, EvalError> {
    if results.is_empty() {
        return Err(EvalError::EmptyResults);
    }
    let mut short_counts: BTreeMap<(IntervalBin, Direction), (usize, usize)> = BTreeMap::new();
    let mut long: BTreeMap<(Direction, WindowClass), (usize, usize)> = BTreeMap::new();
    let mut unparseable = 0;
    let mut failed = 0;
    for r in results {
        match &r.outcome {
            Outcome::Unparseable { .. } => unparseable += 1,
            Outcome::Failed { .. } => failed += 1,
            Outcome::Answered { .. } => {}
        }
        let slot = match r.level() {
            Some(Level::Short(b)) => short_counts.entry((b, r.direction)).or_default(),
            Some(Level::Long(w)) => long.entry((r.direction, w)).or_default(),
            None => return Err(EvalError::Dataset(format!("{}: bad level {}/{}", r.sample_id, r.level, r.bin_or_window))),
        };
        slot.0 += 1;
        slot.1 += r.correct as usize;
    }
    let get_s = |b, d| short_counts.get(&(b, d)).copied().unwrap_or_default();
    let short_cells: Vec<ShortCell> = IntervalBin::ALL
        .iter()
        .map(|&b| {
            let (f, i) = (get_s(b, Direction::Forward), get_s(b, Direction::Inverse));
            ShortCell {
                bin: b.label().to_string(),
                cell: Cell::new(f.0 + i.0, f.1 + i.1),
            }
        })
        .collect();
    let short_dir = |d| -> Vec<Cell> {
        IntervalBin::ALL
            .iter()
            .map(|&b| {
                let (n, k) = get_s(b, d);
                Cell::new(n, k)
            })
            .collect()
    };
    let (s_fwd, s_inv) = (short_dir(Direction::Forward), short_dir(Direction::Inverse));
    let long_cells: Vec<LongCell> = Direction::ALL
        .iter()
        .flat_map(|&d| WindowClass::ALL.iter().map(move |&w| (d, w)))
        .map(|(d, w)| {
            let (n, k) = long.get(&(d, w)).copied().unwrap_or_default();
            LongCell {
                direction: d,
                window: w.alias().to_string(),
                cell: Cell::new(n, k),
            }
        })
        .collect();
    let long_dir = |d| -> Vec<&Cell> { long_cells.iter().filter(|c| c.direction == d).map(|c| &c.cell).collect() };
    let long_fwd_avg = average(&long_dir(Direction::Forward), mode);
    let long_inv_avg = average(&long_dir(Direction::Inverse), mode);
    let short_fwd_avg = average(&s_fwd.iter().collect::<Vec<_>>(), mode);
    let short_inv_avg = average(&s_inv.iter().collect::<Vec<_>>(), mode);
    let has_long = long_cells.iter().any(|c| c.cell.n > 0);
    let (gf, gi) = if has_long {
        (long_fwd_avg, long_inv_avg)
    } else {
        (short_fwd_avg, short_inv_avg)
    };
    let n = results.len();
    let short_avg = average(&short_cells.iter().map(|c| &c.cell).collect::<Vec<_>>(), mode);
    let long_avg = average(&long_cells.iter().map(|c| &c.cell).collect::<Vec<_>>(), mode);
    Ok(MetricsReport {
        backend_id: backend_id.to_string(),
        averaging: mode,
        n,
        short: short_cells,
        short_avg,
        short_fwd_avg,
        short_inv_avg,
        long: long_cells,
        long_avg,
        long_fwd_avg,
        long_inv_avg,
        bias_gap: gf.zip(gi).map(|(a, b)| bias_gap(a, b)),
        parse_error_rate: 100.0 * unparseable as f64 / n as f64,
        failure_rate: 100.0 * failed as f64 / n as f64,
    })
}

/// Report column names after the backend column.
pub const REPORT_COLUMNS: [&str; 20] = [
    "5", "6", "7", "8", "9", "10", "11", "12+", "short_avg", "fwd_S", "fwd_M", "fwd_L", "inv_S", "inv_M", "inv_L",
    "long_avg", "fwd_avg", "inv_avg", "gap", "parse_error_rate",
];

/// One rendered report row: the backend id and every column value.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub backend: String,
    pub values: Vec<Option<f64>>,
}

impl From<&MetricsReport> for ReportRow {
    fn from(r: &MetricsReport) -> Self {
        let mut values: Vec<Option<f64>> = r.short.iter().map(|c| c.cell.accuracy).collect();
        values.push(r.short_avg);
        values.extend(r.long.iter().map(|c| c.cell.accuracy));
        values.extend([r.long_avg, r.long_fwd_avg, r.long_inv_avg, r.bias_gap, Some(r.parse_error_rate)]);
        Self {
            backend: r.backend_id.clone(),
            values: values.into_iter().map(|v| v.map(round1)).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Markdown,
}

fn fmt1(v: Option<f64>, empty: &str) -> String {
    v.map_or_else(|| empty.to_string(), |x| format!("{x:.1}"))
}

fn sorted_rows(reports: &[MetricsReport]) -> Vec<ReportRow> {
    let mut rows: Vec<ReportRow> = reports.iter().map(ReportRow::from).collect();
    rows.sort_by(|a, b| a.backend.cmp(&b.backend));
    rows
}

/// Renders one row per backend, sorted by backend id. Empty cells are blank
/// in CSV and `-` in Markdown.
pub fn render_report(reports: &[MetricsReport], format: ReportFormat) -> String {
    let rows = sorted_rows(reports);
    let mut out = String::new();
    match format {
        ReportFormat::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            let header: Vec<&str> = std::iter::once("backend").chain(REPORT_COLUMNS).collect();
            w.write_record(&header).expect("in-memory csv");
            for r in &rows {
                let rec: Vec<String> =
                    std::iter::once(r.backend.clone()).chain(r.values.iter().map(|v| fmt1(*v, ""))).collect();
                w.write_record(&rec).expect("in-memory csv");
            }
            out = String::from_utf8(w.into_inner().expect("in-memory csv")).expect("utf-8");
        }
        ReportFormat::Markdown => {
            out.push_str("Level 1 (Short): accuracy per interval bin and Avg. Level 2 (Long): forward and inverse accuracy per window, Avg, and the bidirectional Gap.\n\n");
            out.push_str("| Backend | 5 | 6 | 7 | 8 | 9 | 10 | 11 | 12+ | Avg | Fwd S | Fwd M | Fwd L | Inv S | Inv M | Inv L | Avg | Fwd Avg | Inv Avg | Gap | Parse Err |\n");
            out.push_str("|---");
            out.push_str(&"|---:".repeat(REPORT_COLUMNS.len()));
            out.push_str("|\n");
            for r in &rows {
                let _ = write!(out, "| {} |", r.backend.replace('|', "\\|"));
                for v in &r.values {
                    let _ = write!(out, " {} |", fmt1(*v, "-"));
                }
                out.push('\n');
            }
        }
    }
    out
}

pub fn parse_report_csv(text: &str) -> Result<Vec<ReportRow>, String> {
    let mut rdr = csv::Reader::from_reader(text.as_bytes());
    let header = rdr.headers().map_err(|e| e.to_string())?.clone();
    let expected: Vec<&str> = std::iter::once("backend").chain(REPORT_COLUMNS).collect();
    if header.iter().collect::<Vec<_>>() != expected {
        return Err(format!("unexpected header {header:?}"));
    }
    rdr.records()
        .map(|rec| {
            let rec = rec.map_err(|e| e.to_string())?;
            let values = rec
                .iter()
                .skip(1)
                .map(|v| if v.is_empty() { Ok(None) } else { v.parse::<f64>().map(Some).map_err(|e| e.to_string()) })
                .collect::<Result<Vec<_>, _>>()?;
            Ok(ReportRow {
                backend: rec[0].to_string(),
                values,
            })
        })
        .collect()
}

/// Writes `report.csv` and `report.md` into `dir`.
pub fn write_report_files(dir: &Path, reports: &[MetricsReport]) -> Result<(), EvalError> {
    for (name, fmt) in [("report.csv", ReportFormat::Csv), ("report.md", ReportFormat::Markdown)] {
        let p = dir.join(name);
        fs::write(&p, render_report(reports, fmt)).map_err(io_err(&p))?;
    }
    Ok(())
}

pub const CURVE_METHOD: &str = "anchor_tournament";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub frame_index: usize,
    pub progress: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionCurve {
    pub trajectory_id: String,
    pub backend_id: String,
    pub method: String,
    pub description: String,
    pub stride: usize,
    pub seed: u64,
    pub anchors: Vec<usize>,
    pub points: Vec<CurvePoint>,
}

impl CompletionCurve {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("frame_index,progress\n");
        for p in &self.points {
            let _ = writeln!(s, "{},{:.6}", p.frame_index, p.progress);
        }
        s
    }

    /// Distinct progress values held by at least two consecutive points.
    pub fn plateau_levels(&self) -> Vec<f64> {
        let mut levels: Vec<f64> = Vec::new();
        for w in self.points.windows(2) {
            if w[0].progress == w[1].progress && !levels.contains(&w[0].progress) {
                levels.push(w[0].progress);
            }
        }
        levels
    }

    pub fn is_monotone(&self) -> bool {
        self.points.windows(2).all(|w| w[1].progress >= w[0].progress)
    }

    /// Writes `curve_<trajectory>.csv` and a JSON sidecar with the estimator
    /// metadata.
    pub fn write(&self, dir: &Path) -> Result<(PathBuf, PathBuf), EvalError> {
        let csv = dir.join(format!("curve_{}.csv", self.trajectory_id));
        let meta = dir.join(format!("curve_{}.json", self.trajectory_id));
        fs::write(&csv, self.to_csv()).map_err(io_err(&csv))?;
        let mut sidecar = serde_json::to_value(self).expect("curve serializes");
        sidecar.as_object_mut().expect("object").remove("points");
        let text = serde_json::to_string_pretty(&sidecar).expect("json") + "\n";
        fs::write(&meta, text).map_err(io_err(&meta))?;
        Ok((csv, meta))
    }
}

#[derive(Debug, Clone, Copy)]
pub struct CurveOptions {
    pub stride: usize,
    pub n_anchors: usize,
    pub seed: u64,
    pub fan_out: FanOut,
}

/// Seeded anchor positions, sorted, drawn from every frame but the last.
pub fn curve_anchors(t: &Trajectory, n_anchors: usize, seed: u64) -> Vec<usize> {
    let pool = t.frames.len().saturating_sub(1);
    let mut rng = keyed_rng(seed, &["anchors", &t.id]);
    let mut picks: Vec<usize> = rand::seq::index::sample(&mut rng, pool, n_anchors.min(pool)).into_vec();
    picks.sort_unstable();
    picks
}

/// Anchor-tournament progress estimate. For each probe frame (every
/// `stride`-th frame plus the last) the backend compares the probe, shown as
/// img2, against each anchor, shown as img1; progress is the fraction of
/// anchors the probe is judged closer to completion than.
pub fn completion_curve(
    t: &Trajectory,
    skeleton: Option<&PlannedSkeleton>,
    backend: &dyn ModelBackend,
    templates: &Templates,
    opts: CurveOptions,
    sink: Option<&TranscriptSink>,
) -> Result<CompletionCurve, EvalError> {
    if opts.stride == 0 {
        return Err(EvalError::InvalidArgs("stride must be >= 1".into()));
    }
    if opts.n_anchors == 0 {
        return Err(EvalError::InvalidArgs("n_anchors must be >= 1".into()));
    }
    if t.frames.len() <= opts.n_anchors {
        return Err(EvalError::InvalidArgs(format!(
            "trajectory `{}` has {} frames, needs more than {} anchors",
            t.id,
            t.frames.len(),
            opts.n_anchors
        )));
    }
    let anchors = curve_anchors(t, opts.n_anchors, opts.seed);
    let last = t.frames.len() - 1;
    let mut probes: Vec<usize> = (0..t.frames.len()).step_by(opts.stride).collect();
    if probes.last() != Some(&last) {
        probes.push(last);
    }
    let prompt = match skeleton {
        Some(s) => templates.long(&t.task_name, s),
        None => templates.short(&t.task_name),
    };
    let mut queries = Vec::with_capacity(probes.len() * anchors.len());
    for &p in &probes {
        for &a in &anchors {
            let (probe, anchor) = (&t.frames[p], &t.frames[a]);
            queries.push(Query {
                sample_id: format!("curve:{}:{:06}:{:06}", t.id, probe.index, anchor.index),
                images: vec![anchor.path.clone(), probe.path.clone()],
                prompt: prompt.clone(),
                truth: Some(if probe.index > anchor.index { Choice::Img2 } else { Choice::Img1 }),
            });
        }
    }
    let responses = fan_out(&queries, backend, opts.fan_out)?;
    if let Some(sink) = sink {
        let ts = if backend.deterministic() { 0 } else { now_ms() };
        let mut entries: Vec<TranscriptEntry> = queries
            .iter()
            .zip(&responses)
            .map(|(q, r)| record_transcript(backend.id(), q, r, ts))
            .collect();
        entries.sort_by(|a, b| a.sample_id.cmp(&b.sample_id));
        for e in &entries {
            sink.append(e);
        }
        sink.flush();
    }
    let points = probes
        .iter()
        .zip(responses.chunks(anchors.len()))
        .map(|(&p, chunk)| {
            let beats = chunk
                .iter()
                .filter(|r| matches!(r, Ok(resp) if parse_verdict(&resp.text).is_ok_and(|v| v.choice == Choice::Img2)))
                .count();
            CurvePoint {
                frame_index: t.frames[p].index,
                progress: beats as f64 / anchors.len() as f64,
            }
        })
        .collect();
    Ok(CompletionCurve {
        trajectory_id: t.id.clone(),
        backend_id: backend.id().to_string(),
        method: CURVE_METHOD.to_string(),
        description: "progress = fraction of seeded anchor frames the probe frame is judged closer to completion than, \
                      using pairwise (anchor as img1, probe as img2) queries; estimator constructed by this tool"
            .to_string(),
        stride: opts.stride,
        seed: opts.seed,
        anchors: anchors.iter().map(|&a| t.frames[a].index).collect(),
        points,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::builder::Context;
    use crate::modelgw::{PolicyBackend, PolicyKind};
    use crate::promptkit::verdict_line;

    fn line(id: &str, dir: Direction, level: Level) -> SampleLine {
        SampleLine {
            id: id.into(),
            stage: crate::builder::Stage::Tag,
            task_name: "t".into(),
            trajectory_id: "a".into(),
            img1: "/x/1.jpg".into(),
            img1_index: if dir == Direction::Forward { 0 } else { 50 },
            img2: "/x/2.jpg".into(),
            img2_index: if dir == Direction::Forward { 50 } else { 0 },
            direction: dir,
            level: level.kind().into(),
            bin_or_window: level.bin_or_window().into(),
            y_gt: if dir == Direction::Forward { Choice::Img2 } else { Choice::Img1 },
            context: Context::Empty,
        }
    }

    fn result(dir: Direction, level: Level, correct: bool) -> RawResult {
        let l = line("s", dir, level);
        let c = if correct { l.y_gt } else { l.y_gt.flipped() };
        score(&l, Ok(&verdict_line(c)))
    }

    #[test]
    fn table2_arithmetic() {
        let (avg, gap) = bias_metrics(91.7, 2.2);
        assert_eq!(round1(gap), 89.5);
        assert!((avg - 46.9).abs() <= 0.1);
        assert_eq!(bias_gap(3.0, 3.0), 0.0);
        assert_eq!(bias_gap(10.0, 2.0), bias_gap(2.0, 10.0));
    }

    #[test]
    fn empty_cells_excluded() {
        let rs = vec![
            result(Direction::Forward, Level::Short(IntervalBin::Gap5), true),
            result(Direction::Inverse, Level::Short(IntervalBin::Gap5), false),
            result(Direction::Forward, Level::Short(IntervalBin::Gap7), true),
        ];
        let m = compute_metrics("b", &rs, Averaging::Macro).unwrap();
        assert_eq!(m.short[0].cell.accuracy, Some(50.0));
        assert_eq!(m.short[1].cell, Cell { n: 0, correct: 0, accuracy: None });
        assert_eq!(m.short_avg, Some(75.0));
        let w = compute_metrics("b", &rs, Averaging::SampleWeighted).unwrap();
        assert!((w.short_avg.unwrap() - 200.0 / 3.0).abs() < 1e-12);
        assert_eq!(m.long_avg, None);
        assert_eq!(m.bias_gap, Some(100.0));
        assert!(matches!(compute_metrics("b", &[], Averaging::Macro), Err(EvalError::EmptyResults)));
    }

    #[test]
    fn parse_errors_count_wrong_and_are_reported() {
        let l = line("s", Direction::Forward, Level::Long(WindowClass::IntraTask));
        let r = score(&l, Ok("I cannot tell"));
        assert!(!r.correct);
        let f = score(&l, Err("timeout"));
        assert!(!f.correct);
        let m = compute_metrics("b", &[r, f], Averaging::Macro).unwrap();
        assert_eq!(m.parse_error_rate, 50.0);
        assert_eq!(m.failure_rate, 50.0);
        assert_eq!(m.long_fwd_avg, Some(0.0));
    }

    #[test]
    fn fan_out_aborts_past_threshold() {
        struct Flaky;
        impl ModelBackend for Flaky {
            fn id(&self) -> &str {
                "flaky"
            }
            fn max_images(&self) -> usize {
                2
            }
            fn query(&self, q: &Query) -> Result<Response, GatewayError> {
                let n: usize = q.sample_id.parse().unwrap();
                if n.is_multiple_of(3) {
                    Err(GatewayError::Timeout)
                } else {
                    Ok(Response::instant("closer to completion: [img1]"))
                }
            }
        }
        let qs = |n: usize| -> Vec<Query> {
            (0..n)
                .map(|i| Query {
                    sample_id: i.to_string(),
                    images: vec![],
                    prompt: crate::promptkit::render_short_prompt("t"),
                    truth: None,
                })
                .collect()
        };
        let opts = FanOut {
            parallelism: 2,
            abort_fraction: 0.2,
        };
        assert!(matches!(fan_out(&qs(30), &Flaky, opts), Err(EvalError::Aborted { .. })));
        let lenient = FanOut {
            parallelism: 2,
            abort_fraction: 0.5,
        };
        let out = fan_out(&qs(30), &Flaky, lenient).unwrap();
        assert_eq!(out.iter().filter(|r| r.is_err()).count(), 10);
    }

    #[test]
    fn csv_round_trip_and_row_order() {
        let rs = vec![
            result(Direction::Forward, Level::Long(WindowClass::IntraTask), true),
            result(Direction::Inverse, Level::Long(WindowClass::IntraTask), false),
            result(Direction::Forward, Level::Short(IntervalBin::Gap12Plus), true),
        ];
        let a = compute_metrics("zeta", &rs, Averaging::Macro).unwrap();
        let b = compute_metrics("alpha", &rs[..1], Averaging::Macro).unwrap();
        let csv = render_report(&[a.clone(), b.clone()], ReportFormat::Csv);
        let rows = parse_report_csv(&csv).unwrap();
        assert_eq!(rows, vec![ReportRow::from(&b), ReportRow::from(&a)]);
        let md = render_report(&[a, b], ReportFormat::Markdown);
        let alpha = md.find("| alpha |").unwrap();
        assert!(alpha < md.find("| zeta |").unwrap());
    }

    #[test]
    fn anchors_are_seeded_and_exclude_last() {
        let t = crate::synthetic::trajectory("c", "task", 4, 25, Path::new("/s"));
        let a = curve_anchors(&t, 10, 1);
        assert_eq!(a, curve_anchors(&t, 10, 1));
        assert_eq!(a.len(), 10);
        assert!(a.iter().all(|&i| i < 99));
        assert!(a.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn curve_probe_at_end_beats_all_anchors() {
        let t = crate::synthetic::trajectory("c", "task", 4, 25, Path::new("/s"));
        let oracle = PolicyBackend::new("oracle", PolicyKind::Oracle, 2);
        let opts = CurveOptions {
            stride: 33,
            n_anchors: 10,
            seed: 3,
            fan_out: FanOut::default(),
        };
        let c = completion_curve(&t, None, &oracle, &Templates::default(), opts, None).unwrap();
        assert_eq!(c.points.last().unwrap().progress, 1.0);
        assert_eq!(c.points.first().unwrap().progress, 0.0);
        assert_eq!(c.points.iter().map(|p| p.frame_index).collect::<Vec<_>>(), vec![0, 33, 66, 99]);
        let second = PolicyBackend::new("s", PolicyKind::AlwaysSecond, 2);
        let c2 = completion_curve(&t, None, &second, &Templates::default(), opts, None).unwrap();
        assert!(c2.points.iter().all(|p| p.progress == 1.0));
        let bad = CurveOptions { stride: 0, ..opts };
        assert!(completion_curve(&t, None, &oracle, &Templates::default(), bad, None).is_err());
    }
}
