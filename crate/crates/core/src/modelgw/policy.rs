use rand::Rng;

use super::{check_image_count, GatewayError, ModelBackend, Query, Response};
use crate::promptkit::{verdict_line, TemplateId};
use crate::sampling::{keyed_rng, Choice};

const DEFAULT_BIAS_P: f64 = 0.9;

/// Reference answering strategies. None of them looks at pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PolicyKind {
    /// Answers the ground truth; needs the query's truth side channel.
    Oracle,
    AlwaysFirst,
    /// Mimics a model that assumes input order implies chronology.
    AlwaysSecond,
    SeededRandom { seed: u64 },
    /// Answers `img2` with probability `p`.
    ChronoBiasSim { p: f64, seed: u64 },
}

impl PolicyKind {
    pub fn from_name(name: &str, seed: u64, p: Option<f64>) -> Option<Self> {
        Some(match name {
            "oracle" => PolicyKind::Oracle,
            "always_first" => PolicyKind::AlwaysFirst,
            "always_second" => PolicyKind::AlwaysSecond,
            "seeded_random" => PolicyKind::SeededRandom { seed },
            "chrono_bias_sim" => PolicyKind::ChronoBiasSim {
                p: p.unwrap_or(DEFAULT_BIAS_P).clamp(0.0, 1.0),
                seed,
            },
            _ => return None,
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            PolicyKind::Oracle => "oracle",
            PolicyKind::AlwaysFirst => "always_first",
            PolicyKind::AlwaysSecond => "always_second",
            PolicyKind::SeededRandom { .. } => "seeded_random",
            PolicyKind::ChronoBiasSim { .. } => "chrono_bias_sim",
        }
    }

    /// The choice for a query. Stochastic kinds draw from a generator keyed
    /// on `(seed, sample_id)`, so answers do not depend on query order.
    pub fn choose(&self, q: &Query) -> Result<Choice, GatewayError> {
        Ok(match *self {
            PolicyKind::Oracle => q
                .truth
                .ok_or_else(|| GatewayError::MissingTruth(q.sample_id.clone()))?,
            PolicyKind::AlwaysFirst => Choice::Img1,
            PolicyKind::AlwaysSecond => Choice::Img2,
            PolicyKind::SeededRandom { seed } => {
                if keyed_rng(seed, &["policy", &q.sample_id]).random_bool(0.5) {
                    Choice::Img2
                } else {
                    Choice::Img1
                }
            }
            PolicyKind::ChronoBiasSim { p, seed } => {
                if keyed_rng(seed, &["bias", &q.sample_id]).random_bool(p) {
                    Choice::Img2
                } else {
                    Choice::Img1
                }
            }
        })
    }
}

#[derive(Debug, Clone)]
pub struct PolicyBackend {
    id: String,
    kind: PolicyKind,
    max_images: usize,
}

impl PolicyBackend {
    pub fn new(id: &str, kind: PolicyKind, max_images: usize) -> Self {
        Self {
            id: id.to_string(),
            kind,
            max_images,
        }
    }

    pub fn kind(&self) -> PolicyKind {
        self.kind
    }
}

impl ModelBackend for PolicyBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn max_images(&self) -> usize {
        self.max_images
    }

    fn query(&self, q: &Query) -> Result<Response, GatewayError> {
        check_image_count(q, self.max_images)?;
        let line = verdict_line(self.kind.choose(q)?);
        let text = match q.prompt.template_id {
            // annotation requests expect reasoning before the verdict
            TemplateId::AnnotateV1 => format!(
                "Reference policy `{}` answered without inspecting the images.\n{line}",
                self.kind.name()
            ),
            _ => line,
        };
        Ok(Response::instant(text))
    }

    fn parallelism(&self) -> usize {
        8
    }

    fn deterministic(&self) -> bool {
        true
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::promptkit::{parse_verdict, render_short_prompt};
    use std::path::PathBuf;

    fn q(id: &str, truth: Option<Choice>) -> Query {
        Query {
            sample_id: id.into(),
            // never opened
            images: vec![PathBuf::from("/does/not/exist/a.jpg"), PathBuf::from("/nope/b.jpg")],
            prompt: render_short_prompt("task"),
            truth,
        }
    }

    fn backend(kind: PolicyKind) -> PolicyBackend {
        PolicyBackend::new(kind.name(), kind, 2)
    }

    #[test]
    fn fixed_policies() {
        let r = backend(PolicyKind::AlwaysSecond).query(&q("a", None)).unwrap();
        assert_eq!(r.text, "closer to completion: [img2]");
        let r = backend(PolicyKind::AlwaysFirst).query(&q("a", None)).unwrap();
        assert_eq!(r.text, "closer to completion: [img1]");
        let r = backend(PolicyKind::Oracle).query(&q("a", Some(Choice::Img2))).unwrap();
        assert_eq!(parse_verdict(&r.text).unwrap().choice, Choice::Img2);
        assert_eq!(
            backend(PolicyKind::Oracle).query(&q("a", None)),
            Err(GatewayError::MissingTruth("a".into()))
        );
    }

    #[test]
    fn seeded_random_replays() {
        let b = backend(PolicyKind::SeededRandom { seed: 7 });
        let run = || -> Vec<String> {
            (0..1000).map(|i| b.query(&q(&format!("s{i}"), None)).unwrap().text).collect()
        };
        let first = run();
        assert_eq!(first, run());
        let img2 = first.iter().filter(|t| t.contains("img2")).count();
        assert!((400..600).contains(&img2), "{img2}");
        let other = backend(PolicyKind::SeededRandom { seed: 8 });
        let diff = (0..100)
            .filter(|i| other.query(&q(&format!("s{i}"), None)).unwrap().text != first[*i])
            .count();
        assert!(diff > 0);
    }

    #[test]
    fn bias_sim_rate() {
        let b = backend(PolicyKind::ChronoBiasSim { p: 0.9, seed: 1 });
        let img2 = (0..2000)
            .filter(|i| b.query(&q(&format!("s{i}"), None)).unwrap().text.contains("img2"))
            .count();
        // 0.9 * 2000 = 1800, sd ~ 13.4
        assert!((1740..1860).contains(&img2), "{img2}");
    }

    #[test]
    fn image_limit_enforced() {
        let b = PolicyBackend::new("x", PolicyKind::AlwaysFirst, 1);
        assert!(matches!(b.query(&q("a", None)), Err(GatewayError::TooManyImages { .. })));
    }
}
