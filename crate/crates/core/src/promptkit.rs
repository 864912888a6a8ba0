//! Evaluation prompt rendering and verdict parsing.
//!
//! Templates are plain text with `{task_name}` and `{subtask_sequence}`
//! placeholders. Rendering is a single left-to-right substitution pass, so
//! braces inside substituted values are never re-expanded.

use std::fmt;
use std::fs;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::planner::PlannedSkeleton;
use crate::sampling::Choice;

pub const SHORT_V1: &str = include_str!("../templates/short_v1.txt");
pub const LONG_V1: &str = include_str!("../templates/long_v1.txt");
pub const DECOMPOSE_V1: &str = include_str!("../templates/decompose_v1.txt");
pub const ANNOTATE_V1: &str = include_str!("../templates/annotate_v1.txt");

const COMPLETION_PHRASE: &str = "closer to completion";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TemplateId {
    ShortV1,
    LongV1,
    DecomposeV1,
    AnnotateV1,
}

impl TemplateId {
    pub const ALL: [TemplateId; 4] = [
        TemplateId::ShortV1,
        TemplateId::LongV1,
        TemplateId::DecomposeV1,
        TemplateId::AnnotateV1,
    ];

    pub fn file_name(self) -> &'static str {
        match self {
            TemplateId::ShortV1 => "short_v1.txt",
            TemplateId::LongV1 => "long_v1.txt",
            TemplateId::DecomposeV1 => "decompose_v1.txt",
            TemplateId::AnnotateV1 => "annotate_v1.txt",
        }
    }

    fn builtin(self) -> &'static str {
        match self {
            TemplateId::ShortV1 => SHORT_V1,
            TemplateId::LongV1 => LONG_V1,
            TemplateId::DecomposeV1 => DECOMPOSE_V1,
            TemplateId::AnnotateV1 => ANNOTATE_V1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptText {
    pub text: String,
    pub template_id: TemplateId,
}

impl fmt::Display for PromptText {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.text)
    }
}

/// CRLF → LF and no trailing newline.
pub fn normalize_newlines(s: &str) -> String {
    s.replace("\r\n", "\n").trim_end_matches('\n').to_string()
}

/// A template set; defaults to the checked-in goldens.
#[derive(Debug, Clone)]
pub struct Templates {
    short: String,
    long: String,
    decompose: String,
    annotate: String,
}

impl Default for Templates {
    fn default() -> Self {
        Self {
            short: normalize_newlines(TemplateId::ShortV1.builtin()),
            long: normalize_newlines(TemplateId::LongV1.builtin()),
            decompose: normalize_newlines(TemplateId::DecomposeV1.builtin()),
            annotate: normalize_newlines(TemplateId::AnnotateV1.builtin()),
        }
    }
}

impl Templates {
    /// Loads overrides from `dir`; files that are absent keep the builtin text.
    pub fn load_dir(dir: &Path) -> io::Result<Self> {
        let mut t = Self::default();
        for id in TemplateId::ALL {
            let p = dir.join(id.file_name());
            if p.is_file() {
                *t.slot(id) = normalize_newlines(&fs::read_to_string(p)?);
            }
        }
        Ok(t)
    }

    fn slot(&mut self, id: TemplateId) -> &mut String {
        match id {
            TemplateId::ShortV1 => &mut self.short,
            TemplateId::LongV1 => &mut self.long,
            TemplateId::DecomposeV1 => &mut self.decompose,
            TemplateId::AnnotateV1 => &mut self.annotate,
        }
    }

    pub fn raw(&self, id: TemplateId) -> &str {
        match id {
            TemplateId::ShortV1 => &self.short,
            TemplateId::LongV1 => &self.long,
            TemplateId::DecomposeV1 => &self.decompose,
            TemplateId::AnnotateV1 => &self.annotate,
        }
    }

    pub fn short(&self, task_name: &str) -> PromptText {
        self.render(TemplateId::ShortV1, task_name, "")
    }

    pub fn long(&self, task_name: &str, skeleton: &PlannedSkeleton) -> PromptText {
        self.render(TemplateId::LongV1, task_name, &subtask_sequence(&skeleton.labels))
    }

    pub fn decompose(&self, task_name: &str) -> PromptText {
        self.render(TemplateId::DecomposeV1, task_name, "")
    }

    pub fn annotate(&self, task_name: &str) -> PromptText {
        self.render(TemplateId::AnnotateV1, task_name, "")
    }

    fn render(&self, id: TemplateId, task_name: &str, sequence: &str) -> PromptText {
        PromptText {
            text: substitute(self.raw(id), &[("task_name", task_name), ("subtask_sequence", sequence)]),
            template_id: id,
        }
    }
}

/// Single-pass `{name}` substitution. Unknown placeholders are left as-is.
pub fn substitute(template: &str, vars: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(template.len() + 64);
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        let hit = after.find('}').and_then(|close| {
            let name = &after[..close];
            vars.iter()
                .find(|(k, _)| *k == name)
                .map(|(_, v)| (close, *v))
        });
        match hit {
            Some((close, value)) => {
                out.push_str(value);
                rest = &after[close + 1..];
            }
            None => {
                out.push('{');
                rest = after;
            }
        }
    }
    out.push_str(rest);
    out
}

/// `1. a; 2. b; 3. c`
pub fn subtask_sequence(labels: &[String]) -> String {
    labels
        .iter()
        .enumerate()
        .map(|(i, l)| format!("{}. {}", i + 1, l))
        .collect::<Vec<_>>()
        .join("; ")
}

pub fn render_short_prompt(task_name: &str) -> PromptText {
    Templates::default().short(task_name)
}

pub fn render_long_prompt(task_name: &str, skeleton: &PlannedSkeleton) -> PromptText {
    Templates::default().long(task_name, skeleton)
}

/// The canonical answer line for a choice.
pub fn verdict_line(choice: Choice) -> String {
    format!("{COMPLETION_PHRASE}: [{}]", choice.token())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Verdict {
    pub choice: Choice,
    pub raw: String,
    /// Set when the answer line was missing and the choice came from a lone
    /// `img1`/`img2` mention elsewhere in the response.
    pub weak: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
#[error("no verdict found in response")]
pub struct ParseError {
    pub raw: String,
}

/// Positions of `img1` / `img2` tokens in an ASCII-lowercased string.
fn image_tokens(lower: &str) -> Vec<Choice> {
    let b = lower.as_bytes();
    let mut out = Vec::new();
    let mut from = 0;
    while let Some(p) = lower[from..].find("img") {
        let at = from + p;
        let prev_ok = at == 0 || !b[at - 1].is_ascii_alphanumeric();
        let digit = b.get(at + 3).copied();
        let next_ok = b.get(at + 4).is_none_or(|c| !c.is_ascii_alphanumeric());
        if prev_ok && next_ok {
            match digit {
                Some(b'1') => out.push(Choice::Img1),
                Some(b'2') => out.push(Choice::Img2),
                _ => {}
            }
        }
        from = at + 3;
    }
    out
}

fn unique(tokens: &[Choice]) -> Option<Choice> {
    let first = *tokens.first()?;
    tokens.iter().all(|t| *t == first).then_some(first)
}

/// Extracts the model's answer. The last unambiguous
/// `closer to completion ... imgN` on one line wins; otherwise a response
/// mentioning exactly one of the two tokens yields a weak match.
pub fn parse_verdict(response: &str) -> Result<Verdict, ParseError> {
    let lower = response.to_ascii_lowercase();
    for line in lower.lines().rev() {
        let hits: Vec<usize> = line.match_indices(COMPLETION_PHRASE).map(|(i, _)| i).collect();
        for &at in hits.iter().rev() {
            let tail = &line[at + COMPLETION_PHRASE.len()..];
            if let Some(choice) = unique(&image_tokens(tail)) {
                return Ok(Verdict {
                    choice,
                    raw: response.to_string(),
                    weak: false,
                });
            }
        }
    }
    match unique(&image_tokens(&lower)) {
        Some(choice) => Ok(Verdict {
            choice,
            raw: response.to_string(),
            weak: true,
        }),
        None => Err(ParseError {
            raw: response.to_string(),
        }),
    }
}
