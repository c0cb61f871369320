//! Exact-match / F1 scoring with SQuAD v1.1 normalization, and the
//! confidence-based ensemble.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::sync::OnceLock;

use regex::Regex;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::span::SpanPrediction;
use crate::text::QAExample;

/// Lowercase, drop ASCII punctuation, drop the articles a/an/the, collapse
/// whitespace.
pub fn normalize_answer(text: &str) -> String {
    static ARTICLES: OnceLock<Regex> = OnceLock::new();
    let articles = ARTICLES.get_or_init(|| Regex::new(r"\b(a|an|the)\b").expect("valid regex"));
    let lowered = text.to_lowercase();
    let no_punct: String = lowered.chars().filter(|c| !c.is_ascii_punctuation()).collect();
    let no_articles = articles.replace_all(&no_punct, " ");
    no_articles.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn token_f1(prediction: &str, gold: &str) -> f64 {
    let pred = normalize_answer(prediction);
    let gold = normalize_answer(gold);
    let pred: Vec<&str> = pred.split_whitespace().collect();
    let gold: Vec<&str> = gold.split_whitespace().collect();
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for t in &gold {
        *counts.entry(t).or_default() += 1;
    }
    let mut same = 0usize;
    for t in &pred {
        if let Some(c) = counts.get_mut(t).filter(|c| **c > 0) {
            *c -= 1;
            same += 1;
        }
    }
    if same == 0 {
        return 0.0;
    }
    let precision = same as f64 / pred.len() as f64;
    let recall = same as f64 / gold.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

/// Scores for one prediction against its gold answers, with the index of
/// the gold answer giving the best F1.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Score {
    pub em: f64,
    pub f1: f64,
    pub best_gold: usize,
}

pub fn score(prediction: &str, golds: &[String]) -> Result<Score> {
    if golds.is_empty() {
        return Err(Error::Data("no gold answers to score against".into()));
    }
    let norm = normalize_answer(prediction);
    let em = golds.iter().any(|g| normalize_answer(g) == norm);
    let (best_gold, f1) = golds
        .iter()
        .map(|g| token_f1(prediction, g))
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, f)| if f > best.1 { (i, f) } else { best });
    Ok(Score {
        em: if em { 1.0 } else { 0.0 },
        f1,
        best_gold,
    })
}

/// `(EM, F1)`, each the maximum over `golds`.
pub fn em_f1(prediction: &str, golds: &[String]) -> Result<(f64, f64)> {
    score(prediction, golds).map(|s| (s.em, s.f1))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ExampleScore {
    pub id: String,
    /// `None` when no prediction was given for this id.
    pub prediction: Option<String>,
    pub best_gold: String,
    pub em: f64,
    pub f1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub em: f64,
    pub f1: f64,
    pub total: usize,
    pub missing: usize,
    pub examples: Vec<ExampleScore>,
}

impl EvalReport {
    /// Two-column summary with scores to four decimals.
    pub fn summary_table(&self, name: &str) -> String {
        let width = name.len().max(5);
        let mut s = String::new();
        let _ = writeln!(s, "{:<width$}  {:>6}  {:>6}", "Model", "EM", "F1");
        let _ = writeln!(s, "{:<width$}  {:.4}  {:.4}", name, self.em, self.f1);
        s
    }
}

/// Macro-averaged EM/F1 over every example in `dataset`, in dataset order.
/// Missing predictions score zero.
pub fn evaluate(predictions: &BTreeMap<String, String>, dataset: &[QAExample]) -> Result<EvalReport> {
    let mut examples = Vec::with_capacity(dataset.len());
    let mut missing = 0;
    for ex in dataset {
        if ex.answer_texts.is_empty() {
            return Err(Error::Data(format!("example {} has no gold answers", ex.id)));
        }
        let prediction = predictions.get(&ex.id).cloned();
        let s = match &prediction {
            Some(p) => score(p, &ex.answer_texts)?,
            None => {
                missing += 1;
                Score {
                    em: 0.0,
                    f1: 0.0,
                    best_gold: 0,
                }
            }
        };
        examples.push(ExampleScore {
            id: ex.id.clone(),
            prediction,
            best_gold: ex.answer_texts[s.best_gold].clone(),
            em: s.em,
            f1: s.f1,
        });
    }
    if missing > 0 {
        log::warn!("{missing} of {} examples have no prediction and score zero", dataset.len());
    }
    let n = examples.len().max(1) as f64;
    Ok(EvalReport {
        em: examples.iter().map(|e| e.em).sum::<f64>() / n,
        f1: examples.iter().map(|e| e.f1).sum::<f64>() / n,
        total: examples.len(),
        missing,
        examples,
    })
}

/// Per id, the prediction of the most confident member; the earliest member
/// wins ties. Every member must cover the same ids.
pub fn ensemble_select(members: &[BTreeMap<String, SpanPrediction>]) -> Result<BTreeMap<String, SpanPrediction>> {
    let first = members
        .first()
        .ok_or_else(|| Error::Data("ensemble needs at least one member".into()))?;
    for (k, m) in members.iter().enumerate().skip(1) {
        let missing: Vec<&str> = first.keys().filter(|id| !m.contains_key(*id)).map(String::as_str).collect();
        let extra: Vec<&str> = m.keys().filter(|id| !first.contains_key(*id)).map(String::as_str).collect();
        if !missing.is_empty() || !extra.is_empty() {
            let show = |v: &[&str]| {
                let mut s = v.iter().take(10).copied().collect::<Vec<_>>().join(", ");
                if v.len() > 10 {
                    let _ = write!(s, ", ... ({} total)", v.len());
                }
                s
            };
            return Err(Error::Data(format!(
                "member {k} id set differs from member 0: missing [{}], extra [{}]",
                show(&missing),
                show(&extra)
            )));
        }
    }
    Ok(first
        .keys()
        .map(|id| {
            let best = members
                .iter()
                .map(|m| &m[id])
                .reduce(|best, p| if p.confidence > best.confidence { p } else { best })
                .expect("non-empty");
            (id.clone(), best.clone())
        })
        .collect())
}

/// Answer texts chosen by [`ensemble_select`].
pub fn ensemble(members: &[BTreeMap<String, SpanPrediction>]) -> Result<BTreeMap<String, String>> {
    Ok(ensemble_select(members)?
        .into_iter()
        .map(|(id, p)| (id, p.answer_text))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn golds(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn normalization_rules() {
        assert_eq!(normalize_answer("The 1856"), "1856");
        assert_eq!(normalize_answer("Serbian"), "serbian");
        assert_eq!(normalize_answer("  a  Tale, of AN apple!  "), "tale of apple");
        assert_eq!(normalize_answer("theory"), "theory");
    }

    #[test]
    fn scoring_examples() {
        assert_eq!(em_f1("1856", &golds(&["1856", "1856", "1856"])).unwrap(), (1.0, 1.0));
        let (em, f1) = em_f1("Serbian American", &golds(&["Serbian"])).unwrap();
        assert_eq!(em, 0.0);
        assert!((f1 - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(em_f1("", &golds(&["x", "y"])).unwrap(), (0.0, 0.0));
        assert!(em_f1("x", &[]).is_err());
        let s = score("in 1856", &golds(&["1943", "1856"])).unwrap();
        assert_eq!(s.best_gold, 1);
    }

    proptest! {
        #[test]
        fn normalize_is_idempotent(s in "\\PC{0,40}") {
            let once = normalize_answer(&s);
            prop_assert_eq!(normalize_answer(&once), once);
        }

        #[test]
        fn f1_is_symmetric(a in "[a-c ]{0,12}", b in "[a-c ]{0,12}") {
            let ab = em_f1(&a, std::slice::from_ref(&b)).unwrap().1;
            let ba = em_f1(&b, std::slice::from_ref(&a)).unwrap().1;
            prop_assert!((ab - ba).abs() < 1e-12);
        }

        #[test]
        fn more_golds_never_lower_scores(p in "[a-c ]{0,8}", g in "[a-c ]{1,8}", extra in "[a-c ]{1,8}") {
            let one = em_f1(&p, std::slice::from_ref(&g)).unwrap();
            let two = em_f1(&p, &[g, extra]).unwrap();
            prop_assert!(two.0 >= one.0 && two.1 >= one.1);
        }
    }

    fn ex(id: &str) -> QAExample {
        QAExample::from_text(id, "Tesla was born in 1856.", "When?", &[("1856".into(), 18)]).unwrap()
    }

    #[test]
    fn evaluate_averages_and_counts_missing() {
        let data = vec![ex("a"), ex("b")];
        let perfect: BTreeMap<_, _> = [("a".into(), "1856".into()), ("b".into(), "1856".into())].into();
        let r = evaluate(&perfect, &data).unwrap();
        assert_eq!((r.em, r.f1), (1.0, 1.0));
        let half: BTreeMap<_, _> = [("a".into(), "1856".into()), ("b".into(), String::new())].into();
        let r = evaluate(&half, &data).unwrap();
        assert_eq!((r.em, r.f1), (0.5, 0.5));
        let one: BTreeMap<_, _> = [("a".into(), "1856".into())].into();
        let r = evaluate(&one, &data).unwrap();
        assert_eq!((r.em, r.missing), (0.5, 1));
        assert!(r.summary_table("m").contains("0.5000"));
    }

    fn member(entries: &[(&str, &str, f64)]) -> BTreeMap<String, SpanPrediction> {
        entries
            .iter()
            .map(|&(id, t, c)| {
                (
                    id.to_string(),
                    SpanPrediction {
                        answer_text: t.into(),
                        start: 0,
                        end: 0,
                        confidence: c,
                    },
                )
            })
            .collect()
    }

    #[test]
    fn ensemble_rules() {
        let m1 = member(&[("q", "one", 0.12), ("r", "tie1", 0.3)]);
        let m2 = member(&[("q", "two", 0.18), ("r", "tie2", 0.3)]);
        let out = ensemble(&[m1.clone(), m2]).unwrap();
        assert_eq!(out["q"], "two");
        assert_eq!(out["r"], "tie1");
        let single = ensemble(std::slice::from_ref(&m1)).unwrap();
        assert_eq!(single["q"], "one");
        let err = ensemble(&[m1, member(&[("q", "x", 0.5)])]).unwrap_err();
        assert!(err.to_string().contains("missing [r]"), "{err}");
        assert!(ensemble(&[]).is_err());
    }
}
