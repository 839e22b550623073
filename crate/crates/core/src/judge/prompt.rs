use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::JudgeError;
use crate::model::RubricSpec;
use crate::sampler::chain_rng;

const BINARY: &str = include_str!("templates/binary_verification.txt");
const BINARY_CANDIDATE: &str = include_str!("templates/binary_candidate.txt");
const MTBENCH: &str = include_str!("templates/mtbench.txt");
const MTBENCH_SINGLE: &str = include_str!("templates/mtbench_single_turn.txt");
const MTBENCH_TWO: &str = include_str!("templates/mtbench_two_turn.txt");
const MTBENCH_MISSING: &str = include_str!("templates/mtbench_missing_turn.txt");
const TLDR: &str = include_str!("templates/tldr.txt");
const MATH_NO_REF: &str = include_str!("templates/math_no_ref.txt");
const MATH_WITH_REF: &str = include_str!("templates/math_with_ref.txt");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    BinaryVerification,
    MtbenchStyle,
    TldrStyle,
    MathNoRef,
    MathWithRef,
}

impl TaskKind {
    pub const ALL: [TaskKind; 5] = [
        TaskKind::BinaryVerification,
        TaskKind::MtbenchStyle,
        TaskKind::TldrStyle,
        TaskKind::MathNoRef,
        TaskKind::MathWithRef,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::BinaryVerification => "binary-verification",
            Self::MtbenchStyle => "mtbench-style",
            Self::TldrStyle => "tldr-style",
            Self::MathNoRef => "math-no-ref",
            Self::MathWithRef => "math-with-ref",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == name)
    }

    /// Rubric of the levels produced by parsing: correct/incorrect plus an
    /// abstain level for binary verification, five levels for the Likert
    /// tasks, three for the math tasks.
    pub fn rubric(self) -> RubricSpec {
        match self {
            Self::BinaryVerification => RubricSpec::new(2, 3),
            Self::MtbenchStyle | Self::TldrStyle => RubricSpec::square(5),
            Self::MathNoRef | Self::MathWithRef => RubricSpec::square(3),
        }
        .expect("fixed rubric")
    }

    fn template(self) -> &'static str {
        match self {
            Self::BinaryVerification => BINARY,
            Self::MtbenchStyle => MTBENCH,
            Self::TldrStyle => TLDR,
            Self::MathNoRef => MATH_NO_REF,
            Self::MathWithRef => MATH_WITH_REF,
        }
    }
}

impl std::fmt::Display for TaskKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for TaskKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::from_name(s).ok_or_else(|| {
            let names: Vec<&str> = Self::ALL.iter().map(|k| k.name()).collect();
            format!("unknown task kind {s:?}; expected one of {}", names.join(", "))
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateAnswer {
    pub candidate_id: String,
    pub answer: String,
    /// Explanation shown after a multiple-choice answer.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rationale: Option<String>,
    /// Reply to the second user turn of a two-turn conversation.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub second_answer: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgeQuestion {
    pub question_id: String,
    #[serde(default = "crate::model::default_stratum")]
    pub stratum: String,
    pub prompt: String,
    /// Second user turn; switches conversation tasks to the two-turn layout.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub second_prompt: Option<String>,
    /// Reference answer for tasks graded against one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference: Option<String>,
    pub candidates: Vec<CandidateAnswer>,
}

/// Prompt text plus the candidate shown at each position (`order[0]` is
/// candidate #1).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RenderedPrompt {
    pub text: String,
    pub order: Vec<String>,
}

/// Replaces every key in one left-to-right pass, so substituted text is
/// never rescanned.
fn fill(template: &str, pairs: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    'scan: while !rest.is_empty() {
        for (key, value) in pairs {
            if let Some(tail) = rest.strip_prefix(key) {
                out.push_str(value);
                rest = tail;
                continue 'scan;
            }
        }
        let ch = rest.chars().next().unwrap();
        out.push(ch);
        rest = &rest[ch.len_utf8()..];
    }
    out
}

fn candidate_block(kind: TaskKind, q: &JudgeQuestion, c: &CandidateAnswer, i: usize) -> String {
    let i = i.to_string();
    match kind {
        TaskKind::MtbenchStyle => match &q.second_prompt {
            None => fill(
                MTBENCH_SINGLE.trim_end(),
                &[("{i}", &i), ("{response1}", &c.answer)],
            ),
            Some(p2) => {
                let mut template = MTBENCH_TWO.trim_end().to_string();
                if c.second_answer.is_none() {
                    let start = template.find("<TURN 2>").unwrap();
                    let end = template.find("</TURN 2>").unwrap() + "</TURN 2>".len();
                    template.replace_range(start..end, MTBENCH_MISSING.trim_end());
                }
                fill(
                    &template,
                    &[
                        ("{i}", &i),
                        ("{prompt1}", &q.prompt),
                        ("{response1}", &c.answer),
                        ("{prompt2}", p2),
                        ("{response2}", c.second_answer.as_deref().unwrap_or("")),
                    ],
                )
            }
        },
        _ => {
            let mut template = BINARY_CANDIDATE.trim_end();
            if c.rationale.is_none() {
                template = &template[..template.find("\n\n<CANDIDATE #").unwrap_or(template.len())];
            }
            fill(
                template,
                &[
                    ("{i}", &i),
                    ("{answer}", &c.answer),
                    ("{rationale}", c.rationale.as_deref().unwrap_or("")),
                ],
            )
        }
    }
}

/// Renders the task's prompt for one question with the candidates in an
/// order shuffled by `seed`.
pub fn render_prompt(
    kind: TaskKind,
    question: &JudgeQuestion,
    seed: u64,
) -> Result<RenderedPrompt, JudgeError> {
    if question.candidates.is_empty() {
        return Err(JudgeError::MissingData(format!(
            "question {} has no candidates",
            question.question_id
        )));
    }
    if kind == TaskKind::MathWithRef && question.reference.is_none() {
        return Err(JudgeError::MissingData(format!(
            "question {} has no reference answer",
            question.question_id
        )));
    }
    let mut idx: Vec<usize> = (0..question.candidates.len()).collect();
    let mut rng = chain_rng(seed, stable_hash(&question.question_id) as usize);
    idx.shuffle(&mut rng);
    let blocks: Vec<String> = idx
        .iter()
        .enumerate()
        .map(|(pos, &c)| candidate_block(kind, question, &question.candidates[c], pos + 1))
        .collect();
    let section = blocks.join("\n\n");
    let n = question.candidates.len().to_string();
    let template = match kind {
        TaskKind::TldrStyle => fill(kind.template(), &[("{{", "{"), ("}}", "}")]),
        _ => kind.template().to_string(),
    };
    let text = fill(
        &template,
        &[
            ("[[question]]", &question.prompt),
            ("[[candidates_section]]", &section),
            ("[[num_candidates]]", &n),
            ("[[ground_truth_answer]]", question.reference.as_deref().unwrap_or("")),
        ],
    );
    Ok(RenderedPrompt {
        text,
        order: idx
            .into_iter()
            .map(|c| question.candidates[c].candidate_id.clone())
            .collect(),
    })
}

/// FNV-1a, stable across platforms and runs.
pub(crate) fn stable_hash(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}
