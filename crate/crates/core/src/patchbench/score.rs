use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{read_jsonl, BenchGroup, QuestionType};
use crate::error::{Error, Result};

/// One line of `answers.jsonl` or of a model answer file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnswerRecord {
    pub item_id: String,
    pub q_type: QuestionType,
    pub answer: String,
}

pub fn read_answers(path: &Path) -> Result<Vec<AnswerRecord>> {
    read_jsonl(path)
}

/// Normalization applied to both model answers and ground truth before matching.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnswerNorm {
    pub lowercase: bool,
    pub strip_punctuation: bool,
    pub number_words: bool,
}

impl Default for AnswerNorm {
    fn default() -> Self {
        Self {
            lowercase: true,
            strip_punctuation: true,
            number_words: true,
        }
    }
}

const NUMBER_WORDS: [&str; 21] = [
    "zero",
    "one",
    "two",
    "three",
    "four",
    "five",
    "six",
    "seven",
    "eight",
    "nine",
    "ten",
    "eleven",
    "twelve",
    "thirteen",
    "fourteen",
    "fifteen",
    "sixteen",
    "seventeen",
    "eighteen",
    "nineteen",
    "twenty",
];

/// Tokens of `text` after normalization.
pub fn normalize_answer(text: &str, norm: &AnswerNorm) -> Vec<String> {
    let text = if norm.lowercase {
        text.to_lowercase()
    } else {
        text.to_string()
    };
    let text: String = if norm.strip_punctuation {
        text.chars()
            .map(|c| if c.is_alphanumeric() { c } else { ' ' })
            .collect()
    } else {
        text
    };
    text.split_whitespace()
        .map(|t| {
            if norm.number_words {
                if let Some(n) = NUMBER_WORDS.iter().position(|w| w.eq_ignore_ascii_case(t)) {
                    return n.to_string();
                }
            }
            t.to_string()
        })
        .collect()
}

/// The truth's tokens occur contiguously in the answer's tokens.
fn contains_tokens(answer: &[String], truth: &[String]) -> bool {
    !truth.is_empty() && answer.windows(truth.len()).any(|w| w == truth)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellScore {
    pub correct: usize,
    pub total: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Verdict {
    pub item_id: String,
    pub q_type: QuestionType,
    pub correct: bool,
    pub missing: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    /// `cells[group][q_type]`.
    pub cells: BTreeMap<BenchGroup, BTreeMap<QuestionType, CellScore>>,
    pub overall: CellScore,
    pub verdicts: Vec<Verdict>,
    /// Questions with no model answer; scored incorrect.
    pub missing: usize,
    /// Model answers whose id matches no question.
    pub unexpected: usize,
}

fn group_of(item_id: &str) -> Result<BenchGroup> {
    let (prefix, _) = item_id
        .rsplit_once('_')
        .ok_or_else(|| Error::InvalidConfig(format!("item id `{item_id}` has no group prefix")))?;
    BenchGroup::ALL
        .into_iter()
        .find(|g| g.as_str() == prefix)
        .ok_or_else(|| {
            Error::InvalidConfig(format!("item id `{item_id}` has unknown group `{prefix}`"))
        })
}

fn cell(correct: usize, total: usize) -> CellScore {
    CellScore {
        correct,
        total,
        accuracy: if total == 0 {
            0.0
        } else {
            correct as f64 / total as f64
        },
    }
}

/// Scores model answers against ground truth. When a question is answered more
/// than once the first answer counts.
pub fn score_answers(
    answers: &[AnswerRecord],
    truth: &[AnswerRecord],
    norm: &AnswerNorm,
) -> Result<ScoreReport> {
    let mut given: HashMap<(&str, QuestionType), &str> = HashMap::new();
    for a in answers {
        given
            .entry((a.item_id.as_str(), a.q_type))
            .or_insert(a.answer.as_str());
    }
    let mut counts: BTreeMap<BenchGroup, BTreeMap<QuestionType, (usize, usize)>> = BTreeMap::new();
    let mut verdicts = Vec::with_capacity(truth.len());
    let mut missing = 0;
    let mut matched_keys = 0;
    for t in truth {
        let group = group_of(&t.item_id)?;
        let answer = given.get(&(t.item_id.as_str(), t.q_type));
        let correct = match answer {
            Some(a) => {
                matched_keys += 1;
                contains_tokens(
                    &normalize_answer(a, norm),
                    &normalize_answer(&t.answer, norm),
                )
            }
            None => {
                missing += 1;
                false
            }
        };
        let c = counts
            .entry(group)
            .or_default()
            .entry(t.q_type)
            .or_default();
        c.1 += 1;
        if correct {
            c.0 += 1;
        }
        verdicts.push(Verdict {
            item_id: t.item_id.clone(),
            q_type: t.q_type,
            correct,
            missing: answer.is_none(),
        });
    }
    let total_correct = verdicts.iter().filter(|v| v.correct).count();
    Ok(ScoreReport {
        cells: counts
            .into_iter()
            .map(|(g, qs)| {
                (
                    g,
                    qs.into_iter().map(|(q, (c, n))| (q, cell(c, n))).collect(),
                )
            })
            .collect(),
        overall: cell(total_correct, verdicts.len()),
        verdicts,
        missing,
        unexpected: given.len() - matched_keys,
    })
}
