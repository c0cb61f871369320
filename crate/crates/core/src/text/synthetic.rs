//! Generated span-extraction data for smoke tests, overfitting checks and
//! throughput benchmarks.
//!
//! Each context is a run of random words `w0 … wN` containing one key word
//! exactly once; the question names the key word and the answer is the
//! `answer_len` words that follow it.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::squad::QAExample;
use super::vocab::Vocab;

#[derive(Clone, Copy, Debug)]
pub struct SyntheticSpec {
    pub examples: usize,
    pub context_len: usize,
    pub question_len: usize,
    pub answer_len: usize,
    pub vocab_words: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            examples: 32,
            context_len: 12,
            question_len: 4,
            answer_len: 2,
            vocab_words: 40,
            seed: 7,
        }
    }
}

const QUESTION_LEAD: [&str; 2] = ["which", "follows"];

pub fn word(i: usize) -> String {
    format!("w{i}")
}

pub fn synthetic_examples(spec: &SyntheticSpec) -> Vec<QAExample> {
    assert!(spec.context_len > spec.answer_len && spec.answer_len > 0);
    assert!(spec.vocab_words > spec.context_len, "need more words than context positions");
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let all: Vec<usize> = (0..spec.vocab_words).collect();
    (0..spec.examples)
        .map(|n| {
            let words: Vec<usize> = all.choose_multiple(&mut rng, spec.context_len).copied().collect();
            let key_pos = rng.gen_range(0..spec.context_len - spec.answer_len);
            let key = words[key_pos];
            let context = words.iter().map(|&w| word(w)).collect::<Vec<_>>().join(" ");
            let answer = words[key_pos + 1..=key_pos + spec.answer_len]
                .iter()
                .map(|&w| word(w))
                .collect::<Vec<_>>()
                .join(" ");
            let answer_start: usize = words[..=key_pos].iter().map(|&w| word(w).len() + 1).sum();

            let mut question: Vec<String> = QUESTION_LEAD.iter().map(|s| s.to_string()).collect();
            question.push(word(key));
            while question.len() < spec.question_len {
                question.push(word(rng.gen_range(0..spec.vocab_words)));
            }
            question.truncate(spec.question_len.max(1));
            QAExample::from_text(format!("syn-{n}"), &context, &question.join(" "), &[(answer, answer_start)])
                .expect("generated answers align")
        })
        .collect()
}

/// Vocabulary covering every generated word with random vectors.
pub fn synthetic_vocab(spec: &SyntheticSpec, dim: usize) -> Vocab {
    let tokens = QUESTION_LEAD
        .iter()
        .map(|s| s.to_string())
        .chain((0..spec.vocab_words).map(word));
    Vocab::random(tokens, dim, spec.seed ^ 0x9e37_79b9)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn answers_follow_the_key_word() {
        let spec = SyntheticSpec::default();
        for ex in synthetic_examples(&spec) {
            let g = ex.gold.unwrap();
            assert_eq!(g.end - g.start + 1, spec.answer_len);
            assert_eq!(ex.context_tokens[g.start - 1], ex.question_tokens[2]);
            assert_eq!(ex.span_text(g.start, g.end), ex.answer_texts[0]);
            assert_eq!(ex.context_tokens.len(), spec.context_len);
            assert_eq!(ex.question_tokens.len(), spec.question_len);
        }
    }

    #[test]
    fn deterministic_for_a_seed() {
        let spec = SyntheticSpec::default();
        assert_eq!(synthetic_examples(&spec), synthetic_examples(&spec));
    }
}
