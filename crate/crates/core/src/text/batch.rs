use super::squad::{QAExample, Span};
use super::vocab::{Vocab, PAD, UNK};
use crate::error::{Error, Result};

pub const DEFAULT_MAX_CONTEXT_LEN: usize = 400;
pub const DEFAULT_MAX_QUESTION_LEN: usize = 30;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BatchConfig {
    pub batch_size: usize,
    pub max_context_len: usize,
    pub max_question_len: usize,
}

impl Default for BatchConfig {
    fn default() -> Self {
        BatchConfig {
            batch_size: 32,
            max_context_len: DEFAULT_MAX_CONTEXT_LEN,
            max_question_len: DEFAULT_MAX_QUESTION_LEN,
        }
    }
}

/// Training drops examples the model cannot be supervised on; evaluation
/// keeps every example so scores cover the whole dataset.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BatchMode {
    Train,
    Eval,
}

/// Padded, masked group of examples.
#[derive(Clone, Debug, PartialEq)]
pub struct QABatch {
    /// Position of each row in the source example slice.
    pub example_index: Vec<usize>,
    pub context_ids: Vec<Vec<usize>>,
    pub question_ids: Vec<Vec<usize>>,
    pub context_mask: Vec<Vec<bool>>,
    pub question_mask: Vec<Vec<bool>>,
    /// Gold span per row; `None` when unlabeled or truncated away.
    pub spans: Vec<Option<Span>>,
}

impl QABatch {
    pub fn len(&self) -> usize {
        self.example_index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.example_index.is_empty()
    }

    pub fn context_len(&self) -> usize {
        self.context_ids.first().map_or(0, Vec::len)
    }

    pub fn question_len(&self) -> usize {
        self.question_ids.first().map_or(0, Vec::len)
    }

    /// A batch holding only row `i`, with padding trimmed to that row.
    pub fn row(&self, i: usize) -> QABatch {
        let nc = self.context_mask[i].iter().filter(|&&m| m).count();
        let nq = self.question_mask[i].iter().filter(|&&m| m).count();
        QABatch {
            example_index: vec![self.example_index[i]],
            context_ids: vec![self.context_ids[i][..nc].to_vec()],
            question_ids: vec![self.question_ids[i][..nq].to_vec()],
            context_mask: vec![vec![true; nc]],
            question_mask: vec![vec![true; nq]],
            spans: vec![self.spans[i]],
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct BatchStats {
    pub kept: usize,
    /// Training only: gold span beyond the context cap, or no gold span.
    pub dropped_unsupervised: usize,
    pub dropped_empty_context: usize,
}

/// Truncates, indexes and pads examples into batches.
///
/// Empty contexts are always dropped. An empty question is represented by a
/// single UNK token so every mask row keeps at least one live position.
pub fn make_batches(
    examples: &[QAExample],
    vocab: &Vocab,
    config: BatchConfig,
    mode: BatchMode,
) -> Result<(Vec<QABatch>, BatchStats)> {
    if config.batch_size < 1 {
        return Err(Error::Config("batch_size must be at least 1".into()));
    }
    if config.max_context_len < 1 || config.max_question_len < 1 {
        return Err(Error::Config("maximum lengths must be positive".into()));
    }
    let mut stats = BatchStats::default();
    let mut rows = Vec::new();
    for (i, ex) in examples.iter().enumerate() {
        if ex.context_tokens.is_empty() {
            stats.dropped_empty_context += 1;
            continue;
        }
        let nc = ex.context_tokens.len().min(config.max_context_len);
        let span = ex.gold.filter(|g| g.end < nc);
        if mode == BatchMode::Train && span.is_none() {
            stats.dropped_unsupervised += 1;
            continue;
        }
        let context: Vec<usize> = ex.context_tokens[..nc].iter().map(|t| vocab.id(t)).collect();
        let mut question: Vec<usize> = ex
            .question_tokens
            .iter()
            .take(config.max_question_len)
            .map(|t| vocab.id(t))
            .collect();
        if question.is_empty() {
            question.push(UNK);
        }
        rows.push((i, context, question, span));
    }
    stats.kept = rows.len();

    let batches = rows
        .chunks(config.batch_size)
        .map(|chunk| {
            let max_c = chunk.iter().map(|r| r.1.len()).max().unwrap_or(1);
            let max_q = chunk.iter().map(|r| r.2.len()).max().unwrap_or(1);
            let pad = |ids: &[usize], n: usize| {
                let mut v = ids.to_vec();
                v.resize(n, PAD);
                v
            };
            let mask = |len: usize, n: usize| (0..n).map(|j| j < len).collect::<Vec<bool>>();
            QABatch {
                example_index: chunk.iter().map(|r| r.0).collect(),
                context_ids: chunk.iter().map(|r| pad(&r.1, max_c)).collect(),
                question_ids: chunk.iter().map(|r| pad(&r.2, max_q)).collect(),
                context_mask: chunk.iter().map(|r| mask(r.1.len(), max_c)).collect(),
                question_mask: chunk.iter().map(|r| mask(r.2.len(), max_q)).collect(),
                spans: chunk.iter().map(|r| r.3).collect(),
            }
        })
        .collect();
    Ok((batches, stats))
}
