//! Trajectory manifests, subtask skeletons and the frame → subtask index map.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use thiserror::Error;

pub const MANIFEST_VERSION: &str = "1";

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("manifest not found: {0}")]
    MissingFile(PathBuf),
    #[error("schema error at `{field}`: {reason}")]
    SchemaError { field: String, reason: String },
    #[error("trajectory `{trajectory_id}`: {detail}")]
    InvariantViolation { trajectory_id: String, detail: String },
    #[error("trajectory `{0}` has no subtask skeleton")]
    NoSkeleton(String),
    #[error("frame index {0} is outside the skeleton span")]
    OutOfRange(usize),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn schema(field: impl Into<String>, reason: impl Into<String>) -> CorpusError {
    CorpusError::SchemaError {
        field: field.into(),
        reason: reason.into(),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameRef {
    pub trajectory_id: String,
    pub index: usize,
    pub path: PathBuf,
    pub timestamp_ms: Option<u64>,
}

/// One atomic subtask with an inclusive range of raw frame indices.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Subtask {
    pub label: String,
    pub start: usize,
    pub end: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubtaskSkeleton {
    pub subtasks: Vec<Subtask>,
}

impl SubtaskSkeleton {
    pub fn new(subtasks: Vec<Subtask>) -> Self {
        Self { subtasks }
    }

    /// Number of subtasks (K).
    pub fn k(&self) -> usize {
        self.subtasks.len()
    }

    pub fn labels(&self) -> Vec<String> {
        self.subtasks.iter().map(|s| s.label.clone()).collect()
    }

    /// Inclusive raw-index span covered by the skeleton.
    pub fn span(&self) -> Option<(usize, usize)> {
        Some((self.subtasks.first()?.start, self.subtasks.last()?.end))
    }

    /// 1-based subtask index containing `frame_index`.
    pub fn index_of(&self, frame_index: usize) -> Option<usize> {
        // Ranges are sorted and contiguous once validated.
        let pos = self.subtasks.partition_point(|s| s.end < frame_index);
        match self.subtasks.get(pos) {
            Some(s) if s.start <= frame_index && frame_index <= s.end => Some(pos + 1),
            _ => None,
        }
    }

    /// Structural problems of the skeleton against a trajectory of `n_frames`.
    /// Each entry is `(field, detail)`.
    pub fn problems(&self, n_frames: usize) -> Vec<(String, String)> {
        let mut out = Vec::new();
        if self.subtasks.is_empty() {
            out.push(("subtasks".into(), "skeleton must contain at least one subtask".into()));
            return out;
        }
        for (i, s) in self.subtasks.iter().enumerate() {
            let field = format!("subtasks[{i}]");
            if s.label.trim().is_empty() {
                out.push((field.clone(), "label is empty".into()));
            }
            if s.start > s.end {
                out.push((field.clone(), format!("start {} > end {}", s.start, s.end)));
            }
            if s.end >= n_frames {
                out.push((
                    field.clone(),
                    format!(
                        "subtask `{}` range [{}..{}] exceeds frame count {}",
                        s.label, s.start, s.end, n_frames
                    ),
                ));
            }
        }
        for (_, j, a, b) in overlapping_pairs(&self.subtasks) {
            out.push((
                format!("subtasks[{j}]"),
                format!(
                    "subtask ranges overlap: `{}` [{}..{}] and `{}` [{}..{}]",
                    a.label, a.start, a.end, b.label, b.start, b.end
                ),
            ));
        }
        if !out.is_empty() {
            return out;
        }
        if self.subtasks[0].start != 0 {
            out.push((
                "subtasks[0]".into(),
                format!("first subtask starts at {}, expected 0", self.subtasks[0].start),
            ));
        }
        for (i, w) in self.subtasks.windows(2).enumerate() {
            if w[1].start != w[0].end + 1 {
                out.push((
                    format!("subtasks[{}]", i + 1),
                    format!(
                        "gap between `{}` (ends {}) and `{}` (starts {})",
                        w[0].label, w[0].end, w[1].label, w[1].start
                    ),
                ));
            }
        }
        let last = self.subtasks.last().expect("non-empty");
        if last.end + 1 != n_frames {
            out.push((
                format!("subtasks[{}]", self.subtasks.len() - 1),
                format!("last subtask ends at {}, expected {}", last.end, n_frames - 1),
            ));
        }
        out
    }
}

fn overlapping_pairs(subtasks: &[Subtask]) -> Vec<(usize, usize, &Subtask, &Subtask)> {
    let mut out = Vec::new();
    for i in 0..subtasks.len() {
        for j in (i + 1)..subtasks.len() {
            let (a, b) = (&subtasks[i], &subtasks[j]);
            if a.start <= b.end && b.start <= a.end {
                out.push((i, j, a, b));
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trajectory {
    pub id: String,
    pub task_name: String,
    pub frames: Vec<FrameRef>,
    pub skeleton: Option<SubtaskSkeleton>,
    pub source: String,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn frame(&self, index: usize) -> Option<&FrameRef> {
        // frames are dense: position == raw index for manifest-loaded data
        match self.frames.get(index) {
            Some(f) if f.index == index => Some(f),
            _ => self.frames.iter().find(|f| f.index == index),
        }
    }

    pub fn skeleton(&self) -> Result<&SubtaskSkeleton, CorpusError> {
        self.skeleton
            .as_ref()
            .ok_or_else(|| CorpusError::NoSkeleton(self.id.clone()))
    }
}

/// φ: the 1-based subtask index of a raw frame index.
pub fn subtask_index(t: &Trajectory, frame_index: usize) -> Result<usize, CorpusError> {
    t.skeleton()?
        .index_of(frame_index)
        .ok_or(CorpusError::OutOfRange(frame_index))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corpus {
    pub trajectories: Vec<Trajectory>,
    pub root: PathBuf,
    pub manifest_version: String,
}

impl Corpus {
    pub fn get(&self, id: &str) -> Option<&Trajectory> {
        self.trajectories.iter().find(|t| t.id == id)
    }

    /// Serializes back into the manifest format, paths relative to `root`.
    pub fn to_manifest_json(&self) -> Value {
        let trajectories: Vec<Value> = self
            .trajectories
            .iter()
            .map(|t| {
                let frames: Vec<Value> = t
                    .frames
                    .iter()
                    .map(|f| {
                        let rel = f.path.strip_prefix(&self.root).unwrap_or(&f.path);
                        let rel = rel.to_string_lossy().into_owned();
                        match f.timestamp_ms {
                            Some(ts) => json!({ "path": rel, "timestamp_ms": ts }),
                            None => Value::String(rel),
                        }
                    })
                    .collect();
                let mut obj = Map::new();
                obj.insert("id".into(), json!(t.id));
                obj.insert("task_name".into(), json!(t.task_name));
                obj.insert("source".into(), json!(t.source));
                obj.insert("frames".into(), Value::Array(frames));
                if let Some(sk) = &t.skeleton {
                    let subs: Vec<Value> = sk
                        .subtasks
                        .iter()
                        .map(|s| json!({ "label": s.label, "start": s.start, "end": s.end }))
                        .collect();
                    obj.insert("subtasks".into(), Value::Array(subs));
                }
                Value::Object(obj)
            })
            .collect();
        json!({ "manifest_version": self.manifest_version, "trajectories": trajectories })
    }

    pub fn write_manifest(&self, path: &Path) -> Result<(), CorpusError> {
        let text = serde_json::to_string_pretty(&self.to_manifest_json()).expect("json value");
        fs::write(path, text + "\n").map_err(|source| CorpusError::Io {
            path: path.to_path_buf(),
            source,
        })
    }
}

/// A single invariant violation found by [`validate_corpus`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Violation {
    pub trajectory_id: String,
    pub field: String,
    pub detail: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}: {}", self.trajectory_id, self.field, self.detail)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Checks every trajectory invariant. Violations are data, never errors.
pub fn validate_corpus(c: &Corpus, check_files: bool) -> ValidationReport {
    let mut violations = Vec::new();
    let mut seen = HashSet::new();
    for t in &c.trajectories {
        let mut push = |field: &str, detail: String| {
            violations.push(Violation {
                trajectory_id: t.id.clone(),
                field: field.to_string(),
                detail,
            })
        };
        if !seen.insert(t.id.as_str()) {
            push("id", format!("duplicate trajectory id `{}`", t.id));
        }
        if t.task_name.trim().is_empty() {
            push("task_name", "task name is empty".into());
        }
        if t.frames.is_empty() {
            push("frames", "frames non-empty".into());
            continue;
        }
        for (i, w) in t.frames.windows(2).enumerate() {
            if w[1].index <= w[0].index {
                push(
                    &format!("frames[{}]", i + 1),
                    format!("frame indices not strictly increasing ({} after {})", w[1].index, w[0].index),
                );
            }
        }
        if check_files {
            for (i, f) in t.frames.iter().enumerate() {
                if !f.path.is_file() {
                    push(&format!("frames[{i}]"), format!("file not found: {}", f.path.display()));
                }
            }
        }
        if let Some(sk) = &t.skeleton {
            for (field, detail) in sk.problems(t.frames.len()) {
                push(&field, detail);
            }
        }
    }
    ValidationReport { violations }
}

/// Parses a manifest without checking trajectory invariants.
pub fn parse_manifest(path: &Path) -> Result<Corpus, CorpusError> {
    if !path.is_file() {
        return Err(CorpusError::MissingFile(path.to_path_buf()));
    }
    let text = fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let root = path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    parse_manifest_str(&text, &root)
}

pub fn parse_manifest_str(text: &str, root: &Path) -> Result<Corpus, CorpusError> {
    let doc: Value = serde_json::from_str(text).map_err(|e| schema("$", e.to_string()))?;
    let obj = doc.as_object().ok_or_else(|| schema("$", "expected an object"))?;
    let manifest_version = match obj.get("manifest_version") {
        Some(Value::String(s)) => s.clone(),
        Some(_) => return Err(schema("manifest_version", "expected a string")),
        None => return Err(schema("manifest_version", "missing field")),
    };
    if manifest_version != MANIFEST_VERSION {
        return Err(schema(
            "manifest_version",
            format!("unsupported version `{manifest_version}`"),
        ));
    }
    let items = obj
        .get("trajectories")
        .ok_or_else(|| schema("trajectories", "missing field"))?
        .as_array()
        .ok_or_else(|| schema("trajectories", "expected an array"))?;

    let mut trajectories = Vec::with_capacity(items.len());
    for (ti, item) in items.iter().enumerate() {
        trajectories.push(parse_trajectory(item, ti, root)?);
    }
    Ok(Corpus {
        trajectories,
        root: root.to_path_buf(),
        manifest_version,
    })
}

fn req_str(obj: &Map<String, Value>, key: &str, at: &str) -> Result<String, CorpusError> {
    match obj.get(key) {
        Some(Value::String(s)) => Ok(s.clone()),
        Some(_) => Err(schema(format!("{at}.{key}"), "expected a string")),
        None => Err(schema(format!("{at}.{key}"), "missing field")),
    }
}

fn req_usize(obj: &Map<String, Value>, key: &str, at: &str) -> Result<usize, CorpusError> {
    match obj.get(key) {
        Some(v) => v
            .as_u64()
            .map(|n| n as usize)
            .ok_or_else(|| schema(format!("{at}.{key}"), "expected a non-negative integer")),
        None => Err(schema(format!("{at}.{key}"), "missing field")),
    }
}

fn parse_trajectory(item: &Value, ti: usize, root: &Path) -> Result<Trajectory, CorpusError> {
    let at = format!("trajectories[{ti}]");
    let obj = item
        .as_object()
        .ok_or_else(|| schema(&at, "expected an object"))?;
    let id = req_str(obj, "id", &at)?;
    let task_name = req_str(obj, "task_name", &at)?;
    let source = match obj.get("source") {
        None | Some(Value::Null) => String::new(),
        Some(Value::String(s)) => s.clone(),
        Some(_) => return Err(schema(format!("{at}.source"), "expected a string")),
    };
    let raw_frames = obj
        .get("frames")
        .ok_or_else(|| schema(format!("{at}.frames"), "missing field"))?
        .as_array()
        .ok_or_else(|| schema(format!("{at}.frames"), "expected an array"))?;
    let mut frames = Vec::with_capacity(raw_frames.len());
    for (fi, f) in raw_frames.iter().enumerate() {
        let fat = format!("{at}.frames[{fi}]");
        let (rel, timestamp_ms) = match f {
            Value::String(s) => (s.clone(), None),
            Value::Object(fo) => {
                let rel = req_str(fo, "path", &fat)?;
                let ts = match fo.get("timestamp_ms") {
                    None | Some(Value::Null) => None,
                    Some(v) => Some(v.as_u64().ok_or_else(|| {
                        schema(format!("{fat}.timestamp_ms"), "expected a non-negative integer")
                    })?),
                };
                (rel, ts)
            }
            _ => return Err(schema(&fat, "expected a path string or {path, timestamp_ms}")),
        };
        if rel.is_empty() {
            return Err(schema(&fat, "empty frame path"));
        }
        frames.push(FrameRef {
            trajectory_id: id.clone(),
            index: fi,
            path: root.join(rel),
            timestamp_ms,
        });
    }
    let skeleton = match obj.get("subtasks") {
        None | Some(Value::Null) => None,
        Some(Value::Array(subs)) => {
            let mut subtasks = Vec::with_capacity(subs.len());
            for (si, s) in subs.iter().enumerate() {
                let sat = format!("{at}.subtasks[{si}]");
                let so = s.as_object().ok_or_else(|| schema(&sat, "expected an object"))?;
                subtasks.push(Subtask {
                    label: req_str(so, "label", &sat)?,
                    start: req_usize(so, "start", &sat)?,
                    end: req_usize(so, "end", &sat)?,
                });
            }
            Some(SubtaskSkeleton { subtasks })
        }
        Some(_) => return Err(schema(format!("{at}.subtasks"), "expected an array")),
    };
    Ok(Trajectory {
        id,
        task_name,
        frames,
        skeleton,
        source,
    })
}

/// Loads and validates a manifest; the first violation becomes an error.
pub fn load_manifest(path: &Path) -> Result<Corpus, CorpusError> {
    load_manifest_with(path, false)
}

pub fn load_manifest_with(path: &Path, check_files: bool) -> Result<Corpus, CorpusError> {
    let corpus = parse_manifest(path)?;
    let report = validate_corpus(&corpus, check_files);
    if let Some(v) = report.violations.into_iter().next() {
        return Err(CorpusError::InvariantViolation {
            trajectory_id: v.trajectory_id,
            detail: format!("{}: {}", v.field, v.detail),
        });
    }
    Ok(corpus)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn manifest(subtasks: &str, n: usize) -> String {
        let frames: Vec<String> = (0..n).map(|i| format!("\"f/{i:04}.jpg\"")).collect();
        format!(
            r#"{{"manifest_version":"1","trajectories":[{{"id":"t0","task_name":"pour water","source":"sim","frames":[{}]{}}}]}}"#,
            frames.join(","),
            subtasks
        )
    }

    fn ranges(rs: &[(usize, usize)]) -> SubtaskSkeleton {
        SubtaskSkeleton::new(
            rs.iter()
                .enumerate()
                .map(|(i, &(start, end))| Subtask {
                    label: format!("step {i}"),
                    start,
                    end,
                })
                .collect(),
        )
    }

    // Pairwise interval-intersection oracle.
    fn overlap_oracle(rs: &[(usize, usize)]) -> Vec<(usize, usize)> {
        let mut out = vec![];
        for i in 0..rs.len() {
            for j in i + 1..rs.len() {
                let lo = rs[i].0.max(rs[j].0);
                let hi = rs[i].1.min(rs[j].1);
                if lo <= hi {
                    out.push((i, j));
                }
            }
        }
        out
    }

    #[test]
    fn minimal_manifest_without_skeleton() {
        let c = parse_manifest_str(&manifest("", 3), Path::new("/data")).unwrap();
        assert_eq!(c.trajectories.len(), 1);
        assert!(c.trajectories[0].skeleton.is_none());
        assert_eq!(c.trajectories[0].frames[2].path, Path::new("/data/f/0002.jpg"));
        assert!(validate_corpus(&c, false).is_valid());
    }

    #[test]
    fn contiguous_two_subtasks_accepted() {
        let m = manifest(
            r#","subtasks":[{"label":"a","start":0,"end":9},{"label":"b","start":10,"end":19}]"#,
            20,
        );
        let c = parse_manifest_str(&m, Path::new(".")).unwrap();
        assert!(validate_corpus(&c, false).is_valid());
        assert_eq!(c.trajectories[0].skeleton.as_ref().unwrap().k(), 2);
    }

    #[test]
    fn overlapping_ranges_rejected() {
        let rs = [(0, 10), (8, 19)];
        assert_eq!(overlap_oracle(&rs), vec![(0, 1)]);
        let probs = ranges(&rs).problems(20);
        assert_eq!(probs.len(), 1);
        assert!(probs[0].1.contains("overlap"), "{probs:?}");
        assert!(probs[0].1.contains("[0..10]") && probs[0].1.contains("[8..19]"));

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        fs::write(
            &path,
            manifest(
                r#","subtasks":[{"label":"a","start":0,"end":10},{"label":"b","start":8,"end":19}]"#,
                20,
            ),
        )
        .unwrap();
        match load_manifest(&path) {
            Err(CorpusError::InvariantViolation { trajectory_id, detail }) => {
                assert_eq!(trajectory_id, "t0");
                assert!(detail.contains("overlap"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn missing_file_and_schema_errors() {
        assert!(matches!(
            load_manifest(Path::new("/nonexistent/m.json")),
            Err(CorpusError::MissingFile(_))
        ));
        let err = parse_manifest_str(
            r#"{"manifest_version":"1","trajectories":[{"id":"x","frames":[]}]}"#,
            Path::new("."),
        )
        .unwrap_err();
        match err {
            CorpusError::SchemaError { field, .. } => assert_eq!(field, "trajectories[0].task_name"),
            e => panic!("{e:?}"),
        }
    }

    #[test]
    fn phi_examples() {
        let mut t = parse_manifest_str(&manifest("", 20), Path::new(".")).unwrap().trajectories.remove(0);
        assert!(matches!(subtask_index(&t, 0), Err(CorpusError::NoSkeleton(_))));
        t.skeleton = Some(ranges(&[(0, 9), (10, 19)]));
        assert_eq!(subtask_index(&t, 0).unwrap(), 1);
        assert_eq!(subtask_index(&t, 10).unwrap(), 2);
        assert!(matches!(subtask_index(&t, 20), Err(CorpusError::OutOfRange(20))));

        let sk = ranges(&[(0, 24), (25, 49), (50, 74), (75, 99)]);
        // linear scan oracle
        let oracle = |f: usize| sk.subtasks.iter().position(|s| s.start <= f && f <= s.end).unwrap() + 1;
        assert_eq!(oracle(73), 3);
        assert_eq!(sk.index_of(73), Some(3));
    }

    #[test]
    fn validation_reports() {
        let mut c = parse_manifest_str(&manifest("", 5), Path::new(".")).unwrap();
        c.trajectories[0].frames.clear();
        let r = validate_corpus(&c, false);
        assert_eq!(r.violations.len(), 1);
        assert_eq!(r.violations[0].detail, "frames non-empty");

        let mut c = parse_manifest_str(&manifest("", 10), Path::new(".")).unwrap();
        c.trajectories[0].skeleton = Some(ranges(&[(0, 4), (5, 12)]));
        let r = validate_corpus(&c, false);
        assert_eq!(r.violations.len(), 1, "{r:?}");
        assert_eq!(r.violations[0].trajectory_id, "t0");
        assert!(r.violations[0].detail.contains("step 1"));
    }

    #[test]
    fn gaps_and_partial_cover_are_violations() {
        assert_eq!(ranges(&[(0, 4), (6, 9)]).problems(10).len(), 1);
        assert_eq!(ranges(&[(1, 9)]).problems(10).len(), 1);
        assert_eq!(ranges(&[(0, 8)]).problems(10).len(), 1);
        assert!(ranges(&[]).problems(10).len() == 1);
    }

    #[test]
    fn check_files_flags_missing_frames() {
        let c = parse_manifest_str(&manifest("", 2), Path::new("/nonexistent")).unwrap();
        assert!(validate_corpus(&c, false).is_valid());
        assert_eq!(validate_corpus(&c, true).violations.len(), 2);
    }
}
