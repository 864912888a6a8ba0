//! Task decomposition into an ordered logical skeleton, from trajectory
//! metadata or from a model backend.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::builder::{MessagePart, TrainingRecord};
use crate::corpus::{FrameRef, Subtask, SubtaskSkeleton, Trajectory};
use crate::modelgw::{GatewayError, ModelBackend, Query};
use crate::promptkit::Templates;

#[derive(Debug, Error)]
pub enum PlannerError {
    #[error("trajectory `{0}` has no subtask skeleton")]
    NoSkeleton(String),
    #[error("backend error: {0}")]
    Backend(#[from] GatewayError),
    #[error("could not parse subtask list: {reason}")]
    Parse { reason: String, raw: String },
    #[error("invalid skeleton: {0}")]
    Invalid(String),
    #[error("task name is empty")]
    EmptyTask,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "backend")]
pub enum Provenance {
    Metadata,
    Model(String),
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Provenance::Metadata => f.write_str("metadata"),
            Provenance::Model(id) => write!(f, "model:{id}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlannedSkeleton {
    pub labels: Vec<String>,
    pub provenance: Provenance,
}

impl PlannedSkeleton {
    pub fn new(labels: Vec<String>, provenance: Provenance) -> Result<Self, PlannerError> {
        if labels.is_empty() {
            return Err(PlannerError::Invalid("no subtasks".into()));
        }
        if let Some(i) = labels.iter().position(|l| l.trim().is_empty()) {
            return Err(PlannerError::Invalid(format!("subtask {} is empty", i + 1)));
        }
        if let Some(w) = labels.windows(2).find(|w| w[0] == w[1]) {
            return Err(PlannerError::Invalid(format!("duplicate adjacent subtask `{}`", w[0])));
        }
        Ok(Self { labels, provenance })
    }

    pub fn k(&self) -> usize {
        self.labels.len()
    }

    /// Re-attaches these labels to the frame ranges of `ranges`; `None` when
    /// the subtask counts differ.
    pub fn align(&self, ranges: &SubtaskSkeleton) -> Option<SubtaskSkeleton> {
        (self.labels.len() == ranges.k()).then(|| {
            SubtaskSkeleton::new(
                self.labels
                    .iter()
                    .zip(&ranges.subtasks)
                    .map(|(label, r)| Subtask {
                        label: label.clone(),
                        start: r.start,
                        end: r.end,
                    })
                    .collect(),
            )
        })
    }

    /// `1. a\n2. b`
    pub fn numbered(&self) -> String {
        self.labels
            .iter()
            .enumerate()
            .map(|(i, l)| format!("{}. {l}", i + 1))
            .collect::<Vec<_>>()
            .join("\n")
    }
}

impl From<&SubtaskSkeleton> for PlannedSkeleton {
    fn from(s: &SubtaskSkeleton) -> Self {
        Self {
            labels: s.labels(),
            provenance: Provenance::Metadata,
        }
    }
}

#[derive(Debug, Clone)]
pub struct DecompositionRequest {
    pub initial_observation: FrameRef,
    pub task_name: String,
}

impl DecompositionRequest {
    /// The first frame of the trajectory is the initial observation.
    pub fn for_trajectory(t: &Trajectory) -> Option<Self> {
        Some(Self {
            initial_observation: t.frames.first()?.clone(),
            task_name: t.task_name.clone(),
        })
    }
}

pub fn decompose_from_metadata(t: &Trajectory) -> Result<PlannedSkeleton, PlannerError> {
    let sk = t
        .skeleton
        .as_ref()
        .ok_or_else(|| PlannerError::NoSkeleton(t.id.clone()))?;
    PlannedSkeleton::new(sk.labels(), Provenance::Metadata)
}

/// Parses numbered (`1.` / `1)`) or dashed list items; other lines are ignored.
pub fn parse_numbered_list(response: &str) -> Vec<String> {
    response.lines().filter_map(list_item).collect()
}

fn list_item(line: &str) -> Option<String> {
    let s = line.trim_start();
    let rest = if let Some(r) = s.strip_prefix('-') {
        r
    } else {
        let digits = s.bytes().take_while(u8::is_ascii_digit).count();
        if digits == 0 {
            return None;
        }
        let r = &s[digits..];
        r.strip_prefix('.').or_else(|| r.strip_prefix(')'))?
    };
    // at least one whitespace separator, then a non-empty label
    if !rest.starts_with(char::is_whitespace) {
        return None;
    }
    let label = rest.trim();
    (!label.is_empty()).then(|| label.to_string())
}

pub fn decompose_with_model(
    req: &DecompositionRequest,
    backend: &dyn ModelBackend,
    templates: &Templates,
) -> Result<PlannedSkeleton, PlannerError> {
    if req.task_name.trim().is_empty() {
        return Err(PlannerError::EmptyTask);
    }
    let query = Query {
        sample_id: format!("plan:{}", req.initial_observation.trajectory_id),
        images: vec![req.initial_observation.path.clone()],
        prompt: templates.decompose(&req.task_name),
        truth: None,
    };
    let response = backend.query(&query)?;
    let labels = parse_numbered_list(&response.text);
    if labels.is_empty() {
        return Err(PlannerError::Parse {
            reason: "no list items".into(),
            raw: response.text,
        });
    }
    PlannedSkeleton::new(labels, Provenance::Model(backend.id().to_string())).map_err(|e| {
        PlannerError::Parse {
            reason: e.to_string(),
            raw: response.text.clone(),
        }
    })
}

/// Input: first frame and the decomposition prompt. Target: the full
/// numbered subtask list.
pub fn serialize_planner_record(
    t: &Trajectory,
    templates: &Templates,
) -> Result<TrainingRecord, PlannerError> {
    let skeleton = decompose_from_metadata(t)?;
    let first = t
        .frames
        .first()
        .ok_or_else(|| PlannerError::Invalid(format!("trajectory `{}` has no frames", t.id)))?;
    Ok(TrainingRecord {
        id: format!("plan-{}", t.id),
        input: vec![
            MessagePart::Image {
                path: first.path.clone(),
            },
            MessagePart::Text {
                text: templates.decompose(&t.task_name).text,
            },
        ],
        target: skeleton.numbered(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::modelgw::Response;
    use std::path::PathBuf;

    const FRIDGE: [&str; 4] = [
        "Open the refrigerator door with the left arm",
        "Pick up the cola from the fridge with the left arm",
        "Place the cola held in the left arm on the table",
        "Push the refrigerator door with the right arm",
    ];

    fn fridge() -> Trajectory {
        let n = 40;
        Trajectory {
            id: "fridge".into(),
            task_name: "Open the fridge to get food".into(),
            frames: (0..n)
                .map(|i| FrameRef {
                    trajectory_id: "fridge".into(),
                    index: i,
                    path: PathBuf::from(format!("/d/{i}.jpg")),
                    timestamp_ms: None,
                })
                .collect(),
            skeleton: Some(SubtaskSkeleton::new(
                FRIDGE
                    .iter()
                    .enumerate()
                    .map(|(i, l)| Subtask {
                        label: l.to_string(),
                        start: i * 10,
                        end: i * 10 + 9,
                    })
                    .collect(),
            )),
            source: "test".into(),
        }
    }

    struct Echo(&'static str);

    impl ModelBackend for Echo {
        fn id(&self) -> &str {
            "echo"
        }
        fn max_images(&self) -> usize {
            1
        }
        fn query(&self, _q: &Query) -> Result<Response, GatewayError> {
            Ok(Response::instant(self.0))
        }
    }

    #[test]
    fn metadata_decomposition() {
        let t = fridge();
        let s = decompose_from_metadata(&t).unwrap();
        assert_eq!(s.labels, FRIDGE);
        assert_eq!(s.provenance, Provenance::Metadata);
        assert_eq!(s.align(t.skeleton.as_ref().unwrap()).as_ref(), t.skeleton.as_ref());

        let mut one = t.clone();
        one.skeleton = Some(SubtaskSkeleton::new(vec![Subtask {
            label: "all".into(),
            start: 0,
            end: 39,
        }]));
        assert_eq!(decompose_from_metadata(&one).unwrap().k(), 1);

        let mut none = t;
        none.skeleton = None;
        assert!(matches!(decompose_from_metadata(&none), Err(PlannerError::NoSkeleton(_))));
    }

    #[test]
    fn numbered_list_grammar() {
        assert_eq!(parse_numbered_list("1. open door\n2. grab cup"), vec!["open door", "grab cup"]);
        assert_eq!(
            parse_numbered_list("Plan:\n  1) a\n- b\n3.c\n10.   d  \n-\n"),
            vec!["a", "b", "d"]
        );
        assert!(parse_numbered_list("").is_empty());
    }

    #[test]
    fn model_decomposition() {
        let req = DecompositionRequest::for_trajectory(&fridge()).unwrap();
        let t = Templates::default();
        let s = decompose_with_model(&req, &Echo("1. open door\n2. grab cup"), &t).unwrap();
        assert_eq!(s.labels, vec!["open door", "grab cup"]);
        assert_eq!(s.provenance, Provenance::Model("echo".into()));
        match decompose_with_model(&req, &Echo(""), &t) {
            Err(PlannerError::Parse { raw, .. }) => assert_eq!(raw, ""),
            other => panic!("{other:?}"),
        }
        assert!(matches!(
            decompose_with_model(&req, &Echo("1. a\n2. a"), &t),
            Err(PlannerError::Parse { .. })
        ));
    }

    #[test]
    fn planner_record_shape() {
        let t = fridge();
        let r = serialize_planner_record(&t, &Templates::default()).unwrap();
        let images: Vec<_> = r
            .input
            .iter()
            .filter_map(|p| match p {
                MessagePart::Image { path } => Some(path.clone()),
                _ => None,
            })
            .collect();
        assert_eq!(images, vec![PathBuf::from("/d/0.jpg")]);
        let text = r.input.iter().find_map(|p| match p {
            MessagePart::Text { text } => Some(text.clone()),
            _ => None,
        });
        assert!(text.unwrap().contains("Open the fridge to get food"));
        assert_eq!(parse_numbered_list(&r.target), FRIDGE);

        let line = serde_json::to_string(&r).unwrap();
        let back: TrainingRecord = serde_json::from_str(&line).unwrap();
        assert_eq!(back, r);
    }
}
