//! Output heads producing start/end distributions, span decoders and
//! prediction files.

use std::collections::BTreeMap;
use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{Conv1dLayer, Linear};
use crate::tensor::{Graph, ParamId, ParamStore, Var};
use crate::text::QAExample;

pub const DEFAULT_OUTPUT_KERNEL: usize = 20;
pub const DEFAULT_OUTPUT_PROJ_DIM: usize = 20;
pub const DEFAULT_MAX_SPAN_LEN: usize = 17;

#[derive(Clone, Debug)]
pub enum OutputHead {
    /// Per-position feed-forward: `Linear(D→H) + ReLU`, then one `H→1`
    /// projection each for start and end.
    BaselineFc { hidden: Linear, start: Linear, end: Linear },
    /// `Linear(D→P) + ReLU`, then one wide single-filter convolution each for
    /// start and end.
    WideConv {
        projection: Linear,
        start_conv: Conv1dLayer,
        end_conv: Conv1dLayer,
    },
}

impl OutputHead {
    pub fn baseline_fc(store: &mut ParamStore, name: &str, in_dim: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        OutputHead::BaselineFc {
            hidden: Linear::new(store, &format!("{name}.hidden"), in_dim, hidden, true, rng),
            start: Linear::new(store, &format!("{name}.start"), hidden, 1, true, rng),
            end: Linear::new(store, &format!("{name}.end"), hidden, 1, true, rng),
        }
    }

    pub fn wide_conv(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        proj_dim: usize,
        kernel: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if kernel == 0 || proj_dim == 0 {
            return Err(Error::Config(format!(
                "output head needs positive kernel width and projection size, got {kernel} and {proj_dim}"
            )));
        }
        Ok(OutputHead::WideConv {
            projection: Linear::new(store, &format!("{name}.projection"), in_dim, proj_dim, true, rng),
            start_conv: Conv1dLayer::new(store, &format!("{name}.start_conv"), kernel, proj_dim, 1, rng),
            end_conv: Conv1dLayer::new(store, &format!("{name}.end_conv"), kernel, proj_dim, 1, rng),
        })
    }

    pub fn in_dim(&self) -> usize {
        match self {
            OutputHead::BaselineFc { hidden, .. } => hidden.in_dim,
            OutputHead::WideConv { projection, .. } => projection.in_dim,
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        match self {
            OutputHead::BaselineFc { hidden, start, end } => {
                [hidden.params(), start.params(), end.params()].concat()
            }
            OutputHead::WideConv {
                projection,
                start_conv,
                end_conv,
            } => [projection.params(), start_conv.params(), end_conv.params()].concat(),
        }
    }

    fn logits(&self, g: &mut Graph<'_>, encoded: Var, mask: &[bool]) -> Result<(Var, Var)> {
        match self {
            OutputHead::BaselineFc { hidden, start, end } => {
                let h = hidden.forward(g, encoded)?;
                let h = g.relu(h);
                Ok((start.forward(g, h)?, end.forward(g, h)?))
            }
            OutputHead::WideConv {
                projection,
                start_conv,
                end_conv,
            } => {
                let h = projection.forward(g, encoded)?;
                let h = g.relu(h);
                let h = g.mask_rows(h, mask)?;
                Ok((start_conv.forward(g, h)?, end_conv.forward(g, h)?))
            }
        }
    }
}

/// Start and end distributions over the `n` context positions of
/// `encoded[n×D]`; masked positions get exactly zero probability.
pub fn span_distributions(g: &mut Graph<'_>, head: &OutputHead, encoded: Var, mask: &[bool]) -> Result<(Var, Var)> {
    let (n, d) = g.value(encoded).dims2("span_distributions")?;
    if mask.len() != n || d != head.in_dim() {
        return Err(Error::shape(
            "span_distributions",
            format!(
                "encoded {:?} with mask of {} for a head expecting width {}",
                g.shape(encoded),
                mask.len(),
                head.in_dim()
            ),
        ));
    }
    let (s, e) = head.logits(g, encoded, mask)?;
    let s = g.reshape(s, &[n])?;
    let e = g.reshape(e, &[n])?;
    Ok((g.softmax(s, Some(mask))?, g.softmax(e, Some(mask))?))
}

/// A decoded span with its confidence `p_start[start] · p_end[end]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DecodedSpan {
    pub start: usize,
    pub end: usize,
    pub confidence: f64,
}

impl DecodedSpan {
    pub fn is_ordered(&self) -> bool {
        self.start <= self.end
    }
}

fn check_pair(p_start: &[f64], p_end: &[f64]) -> Result<()> {
    if p_start.is_empty() || p_start.len() != p_end.len() {
        return Err(Error::shape(
            "decode",
            format!("distributions of length {} and {}", p_start.len(), p_end.len()),
        ));
    }
    Ok(())
}

/// Maximizes `p_start[i] · p_end[j]` over `i ≤ j` (and `j - i < max_span_len`
/// when given). Ties go to the smallest `i`, then the smallest `j`.
pub fn decode_constrained(p_start: &[f64], p_end: &[f64], max_span_len: Option<usize>) -> Result<DecodedSpan> {
    check_pair(p_start, p_end)?;
    if max_span_len == Some(0) {
        return Err(Error::Config("max_span_len must be at least 1".into()));
    }
    let mut best = DecodedSpan {
        start: 0,
        end: 0,
        confidence: p_start[0] * p_end[0],
    };
    let mut prefix_arg = 0;
    for j in 0..p_end.len() {
        if p_start[j] > p_start[prefix_arg] {
            prefix_arg = j;
        }
        let i = match max_span_len {
            Some(l) if j + 1 > l => {
                let lo = j + 1 - l;
                if prefix_arg >= lo {
                    prefix_arg
                } else {
                    (lo..=j).fold(lo, |a, k| if p_start[k] > p_start[a] { k } else { a })
                }
            }
            _ => prefix_arg,
        };
        let conf = p_start[i] * p_end[j];
        if conf > best.confidence || (conf == best.confidence && (i, j) < (best.start, best.end)) {
            best = DecodedSpan {
                start: i,
                end: j,
                confidence: conf,
            };
        }
    }
    Ok(best)
}

/// Independent argmaxes (first index on ties); `start > end` is possible.
pub fn decode_naive(p_start: &[f64], p_end: &[f64]) -> Result<DecodedSpan> {
    check_pair(p_start, p_end)?;
    let argmax = |p: &[f64]| (0..p.len()).fold(0, |a, k| if p[k] > p[a] { k } else { a });
    let (start, end) = (argmax(p_start), argmax(p_end));
    Ok(DecodedSpan {
        start,
        end,
        confidence: p_start[start] * p_end[end],
    })
}

/// Fraction of decodes with `start > end`; 0 for an empty set.
pub fn out_of_order_rate(spans: &[DecodedSpan]) -> f64 {
    if spans.is_empty() {
        return 0.0;
    }
    spans.iter().filter(|s| !s.is_ordered()).count() as f64 / spans.len() as f64
}

/// One line of the extended prediction file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpanPrediction {
    #[serde(rename = "text")]
    pub answer_text: String,
    pub start: usize,
    pub end: usize,
    pub confidence: f64,
}

impl SpanPrediction {
    /// Attaches the answer text from `example`. An out-of-order span (naive
    /// decoding) yields an empty answer.
    pub fn from_decoded(example: &QAExample, span: DecodedSpan) -> Self {
        let answer_text = if span.is_ordered() && span.end < example.context_tokens.len() {
            example.span_text(span.start, span.end)
        } else {
            String::new()
        };
        SpanPrediction {
            answer_text,
            start: span.start,
            end: span.end,
            confidence: span.confidence,
        }
    }
}

/// Official format: a JSON object mapping example id to answer text.
pub fn write_predictions(w: impl Write, predictions: &BTreeMap<String, String>) -> Result<()> {
    serde_json::to_writer_pretty(w, predictions)?;
    Ok(())
}

pub fn write_extended_predictions(w: impl Write, predictions: &BTreeMap<String, SpanPrediction>) -> Result<()> {
    serde_json::to_writer_pretty(w, predictions)?;
    Ok(())
}

/// Reads answer texts from either the official or the extended format.
pub fn parse_predictions(text: &str, source_name: &str) -> Result<BTreeMap<String, String>> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Entry {
        Text(String),
        Extended { text: String },
    }
    let map: BTreeMap<String, Entry> =
        serde_json::from_str(text).map_err(|e| Error::parse(source_name, Some(e.line()), e.to_string()))?;
    Ok(map
        .into_iter()
        .map(|(id, e)| {
            let t = match e {
                Entry::Text(t) | Entry::Extended { text: t } => t,
            };
            (id, t)
        })
        .collect())
}

pub fn parse_extended_predictions(text: &str, source_name: &str) -> Result<BTreeMap<String, SpanPrediction>> {
    let map: BTreeMap<String, SpanPrediction> =
        serde_json::from_str(text).map_err(|e| Error::parse(source_name, Some(e.line()), e.to_string()))?;
    for (id, p) in &map {
        if !(p.confidence.is_finite() && (0.0..=1.0).contains(&p.confidence)) {
            return Err(Error::parse(
                source_name,
                None,
                format!("{id}: confidence {} outside [0, 1]", p.confidence),
            ));
        }
    }
    Ok(map)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn brute(ps: &[f64], pe: &[f64], cap: Option<usize>) -> (usize, usize) {
        let mut best = (0, 0, f64::NEG_INFINITY);
        for i in 0..ps.len() {
            for j in i..pe.len() {
                if cap.is_some_and(|l| j - i >= l) {
                    continue;
                }
                if ps[i] * pe[j] > best.2 {
                    best = (i, j, ps[i] * pe[j]);
                }
            }
        }
        (best.0, best.1)
    }

    #[test]
    fn worked_example() {
        let d = decode_constrained(&[0.1, 0.6, 0.3], &[0.5, 0.2, 0.3], None).unwrap();
        assert_eq!((d.start, d.end), (1, 2));
        assert!((d.confidence - 0.18).abs() < 1e-15);
    }

    #[test]
    fn reversed_masses() {
        // Exact point masses make every valid product zero, so the tie-break decides.
        let d = decode_constrained(&[0.0, 0.0, 1.0], &[1.0, 0.0, 0.0], None).unwrap();
        assert_eq!((d.start, d.end), brute(&[0.0, 0.0, 1.0], &[1.0, 0.0, 0.0], None));
        let ps = [0.05, 0.05, 0.9];
        let pe = [0.8, 0.05, 0.15];
        let d = decode_constrained(&ps, &pe, None).unwrap();
        assert_eq!((d.start, d.end), (2, 2));
        assert_eq!((d.start, d.end), brute(&ps, &pe, None));
        let n = decode_naive(&ps, &pe).unwrap();
        assert_eq!((n.start, n.end), (2, 0));
        assert_eq!(out_of_order_rate(&[n, d]), 0.5);
    }

    #[test]
    fn uniform_ties_and_point_masses() {
        let u = [1.0 / 3.0; 3];
        let d = decode_constrained(&u, &u, None).unwrap();
        assert_eq!((d.start, d.end), (0, 0));
        let p = [0.0, 1.0, 0.0];
        let d = decode_constrained(&p, &p, None).unwrap();
        assert_eq!((d.start, d.end, d.confidence), (1, 1, 1.0));
        let n = decode_naive(&p, &p).unwrap();
        assert_eq!((n.start, n.end), (1, 1));
    }

    #[test]
    fn length_cap() {
        let ps = [0.9, 0.05, 0.05];
        let pe = [0.01, 0.01, 0.98];
        assert_eq!(decode_constrained(&ps, &pe, None).unwrap().end, 2);
        let d = decode_constrained(&ps, &pe, Some(2)).unwrap();
        assert_eq!((d.start, d.end), brute(&ps, &pe, Some(2)));
        assert!(decode_constrained(&ps, &pe, Some(0)).is_err());
        assert!(decode_constrained(&ps, &pe[..2], None).is_err());
    }

    proptest! {
        #[test]
        fn matches_exhaustive_search(
            raw in proptest::collection::vec((0.0f64..1.0, 0.0f64..1.0), 1..40),
            cap in proptest::option::of(1usize..10),
        ) {
            let zs: f64 = raw.iter().map(|r| r.0).sum::<f64>() + 1e-9;
            let ze: f64 = raw.iter().map(|r| r.1).sum::<f64>() + 1e-9;
            let ps: Vec<f64> = raw.iter().map(|r| r.0 / zs).collect();
            let pe: Vec<f64> = raw.iter().map(|r| r.1 / ze).collect();
            let d = decode_constrained(&ps, &pe, cap).unwrap();
            prop_assert!(d.start <= d.end);
            if ps.iter().chain(&pe).all(|&v| v > 0.0) {
                prop_assert_eq!((d.start, d.end), brute(&ps, &pe, cap));
            }
        }
    }

    fn zero_conv_head(store: &mut ParamStore) -> OutputHead {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let head = OutputHead::wide_conv(store, "out", 6, 4, 20, &mut rng).unwrap();
        if let OutputHead::WideConv {
            start_conv, end_conv, ..
        } = &head
        {
            for id in [start_conv.kernel(), end_conv.kernel()] {
                let v = store.value_mut(id);
                *v = Tensor::zeros(v.shape());
            }
        }
        head
    }

    #[test]
    fn zero_conv_gives_uniform_distributions() {
        let mut store = ParamStore::new();
        let head = zero_conv_head(&mut store);
        let mut g = Graph::with_params(&store);
        let x = g.constant(Tensor::uniform(&[5, 6], 1.0, &mut ChaCha8Rng::seed_from_u64(2)));
        let (s, e) = span_distributions(&mut g, &head, x, &[true, true, false, true, false]).unwrap();
        for v in [s, e] {
            let p = g.value(v).data();
            assert_eq!(p[2], 0.0);
            assert_eq!(p[4], 0.0);
            for &k in &[0, 1, 3] {
                assert!((p[k] - 1.0 / 3.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn distributions_sum_to_one_and_single_position() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let heads = [
            OutputHead::wide_conv(&mut store, "w", 6, 4, 20, &mut rng).unwrap(),
            OutputHead::baseline_fc(&mut store, "b", 6, 8, &mut rng),
        ];
        let mut g = Graph::with_params(&store);
        for head in &heads {
            let x = g.constant(Tensor::uniform(&[7, 6], 1.0, &mut rng));
            let (s, e) = span_distributions(&mut g, head, x, &[true; 7]).unwrap();
            assert!((g.value(s).sum() - 1.0).abs() < 1e-9);
            assert!((g.value(e).sum() - 1.0).abs() < 1e-9);
            let x1 = g.constant(Tensor::uniform(&[1, 6], 1.0, &mut rng));
            let (s, e) = span_distributions(&mut g, head, x1, &[true]).unwrap();
            assert_eq!(g.value(s).data(), &[1.0]);
            assert_eq!(g.value(e).data(), &[1.0]);
        }
    }

    #[test]
    fn prediction_files_round_trip() {
        let mut ext = BTreeMap::new();
        ext.insert(
            "q1".to_string(),
            SpanPrediction {
                answer_text: "1856".into(),
                start: 4,
                end: 4,
                confidence: 0.5,
            },
        );
        let mut buf = Vec::new();
        write_extended_predictions(&mut buf, &ext).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(parse_extended_predictions(&text, "m").unwrap(), ext);
        assert_eq!(parse_predictions(&text, "m").unwrap()["q1"], "1856");

        let plain: BTreeMap<String, String> = [("q1".to_string(), "x".to_string())].into();
        let mut buf = Vec::new();
        write_predictions(&mut buf, &plain).unwrap();
        assert_eq!(parse_predictions(std::str::from_utf8(&buf).unwrap(), "m").unwrap(), plain);
        assert!(parse_extended_predictions("{\"a\":\"x\"}", "m").is_err());
        assert!(parse_extended_predictions(
            "{\"a\":{\"text\":\"x\",\"start\":0,\"end\":0,\"confidence\":2.0}}",
            "m"
        )
        .is_err());
        assert!(parse_predictions("[1]", "m").is_err());
    }
}
