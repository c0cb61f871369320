use std::fs;
use std::path::Path;

use log::warn;
use serde::{Deserialize, Serialize};

use super::tokenize::{tokenize, tokenize_with_offsets};
use crate::error::{Error, Result};

/// Inclusive token span inside a context.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

/// One tokenized question over one context passage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QAExample {
    pub id: String,
    pub context: String,
    pub question: String,
    pub context_tokens: Vec<String>,
    /// Character range of each context token in `context`.
    pub context_offsets: Vec<(usize, usize)>,
    pub question_tokens: Vec<String>,
    /// Gold answer span; `None` for unlabeled data.
    pub gold: Option<Span>,
    pub answer_texts: Vec<String>,
}

/// Why an answer could not be turned into a token span.
#[derive(Debug, PartialEq, Eq)]
pub enum AlignError {
    /// The text at `answer_start` differs from the answer string.
    TextMismatch,
    /// The answer covers no token (whitespace only, or empty).
    NoTokens,
}

impl QAExample {
    /// Tokenizes `context` and `question`. Each answer is `(text, char_start)`;
    /// the gold span comes from the first answer that aligns.
    pub fn from_text(
        id: impl Into<String>,
        context: &str,
        question: &str,
        answers: &[(String, usize)],
    ) -> Result<Self, AlignError> {
        let toks = tokenize_with_offsets(context);
        let context_offsets: Vec<(usize, usize)> = toks.iter().map(|t| (t.start, t.end)).collect();
        let mut gold = None;
        let mut first_err = None;
        for (text, start) in answers {
            match align_answer(context, &context_offsets, text, *start) {
                Ok(span) => {
                    gold = Some(span);
                    break;
                }
                Err(e) => {
                    first_err.get_or_insert(e);
                }
            }
        }
        if gold.is_none() {
            if let Some(e) = first_err {
                return Err(e);
            }
        }
        Ok(QAExample {
            id: id.into(),
            context: context.to_string(),
            question: question.to_string(),
            context_tokens: toks.into_iter().map(|t| t.text).collect(),
            context_offsets,
            question_tokens: tokenize(question),
            gold,
            answer_texts: answers.iter().map(|(t, _)| t.clone()).collect(),
        })
    }

    /// The original context text covered by tokens `start..=end`.
    pub fn span_text(&self, start: usize, end: usize) -> String {
        if end >= self.context_tokens.len() || start > end {
            return String::new();
        }
        match (self.context_offsets.get(start), self.context_offsets.get(end)) {
            (Some(&(s, _)), Some(&(_, e))) => self.context.chars().skip(s).take(e - s).collect(),
            _ => self.context_tokens[start..=end].join(" "),
        }
    }
}

/// Smallest token span whose character extent covers
/// `[answer_start, answer_start + len(answer))`.
pub fn align_answer(
    context: &str,
    offsets: &[(usize, usize)],
    answer: &str,
    answer_start: usize,
) -> Result<Span, AlignError> {
    let len = answer.chars().count();
    let actual: String = context.chars().skip(answer_start).take(len).collect();
    if actual != answer {
        return Err(AlignError::TextMismatch);
    }
    let answer_end = answer_start + len;
    let start = offsets.iter().position(|&(_, e)| e > answer_start);
    let end = offsets.iter().rposition(|&(s, _)| s < answer_end);
    match (start, end) {
        (Some(s), Some(e)) if s <= e => Ok(Span { start: s, end: e }),
        _ => Err(AlignError::NoTokens),
    }
}

#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct LoadStats {
    pub questions: usize,
    pub unaligned: usize,
}

#[derive(Serialize, Deserialize)]
struct SquadFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    version: Option<String>,
    data: Vec<Article>,
}

#[derive(Serialize, Deserialize)]
struct Article {
    #[serde(default)]
    title: String,
    paragraphs: Vec<Paragraph>,
}

#[derive(Serialize, Deserialize)]
struct Paragraph {
    context: String,
    qas: Vec<Qa>,
}

#[derive(Serialize, Deserialize)]
struct Qa {
    id: String,
    question: String,
    #[serde(default)]
    answers: Vec<Answer>,
}

#[derive(Serialize, Deserialize)]
struct Answer {
    text: String,
    answer_start: usize,
}

pub fn load_squad(path: impl AsRef<Path>) -> Result<(Vec<QAExample>, LoadStats)> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    parse_squad(&text, &path.display().to_string())
}

/// Parses SQuAD v1.1 JSON. Answers that do not align to token boundaries
/// drop their question and are counted in [`LoadStats::unaligned`].
pub fn parse_squad(text: &str, source_name: &str) -> Result<(Vec<QAExample>, LoadStats)> {
    let file: SquadFile = serde_json::from_str(text).map_err(|e| {
        Error::parse(source_name, Some(e.line()), e.to_string())
    })?;
    let mut stats = LoadStats::default();
    let mut examples = Vec::new();
    for article in &file.data {
        for para in &article.paragraphs {
            for qa in &para.qas {
                stats.questions += 1;
                let answers: Vec<(String, usize)> =
                    qa.answers.iter().map(|a| (a.text.clone(), a.answer_start)).collect();
                match QAExample::from_text(&qa.id, &para.context, &qa.question, &answers) {
                    Ok(ex) => examples.push(ex),
                    Err(_) => stats.unaligned += 1,
                }
            }
        }
    }
    if stats.unaligned > 0 {
        warn!(
            "{source_name}: dropped {} of {} questions whose answer does not align to tokens",
            stats.unaligned, stats.questions
        );
    }
    Ok((examples, stats))
}

/// Writes examples back as SQuAD JSON, one paragraph per example, with the
/// gold span as the single answer.
pub fn to_squad_json(examples: &[QAExample]) -> String {
    let paragraphs = examples
        .iter()
        .map(|ex| {
            let answers = ex
                .gold
                .map(|g| {
                    vec![Answer {
                        text: ex.span_text(g.start, g.end),
                        answer_start: ex.context_offsets[g.start].0,
                    }]
                })
                .unwrap_or_default();
            Paragraph {
                context: ex.context.clone(),
                qas: vec![Qa {
                    id: ex.id.clone(),
                    question: ex.question.clone(),
                    answers,
                }],
            }
        })
        .collect();
    let file = SquadFile {
        version: Some("1.1".into()),
        data: vec![Article {
            title: "exported".into(),
            paragraphs,
        }],
    };
    serde_json::to_string(&file).expect("plain data serializes")
}
