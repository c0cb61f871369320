//! Context–question interaction.
//!
//! Two mechanisms are provided. `basic_attend` is plain dot-product
//! context-to-question attention. `bidirectional_attend` scores every
//! (context, question) pair with a learned trilinear function
//! `w · [q, c, q ⊙ c]`, normalises the score matrix along both axes and
//! blends context-to-question (`A`) and question-to-context (`B`) summaries
//! into a `4H`-wide representation `[C, A, C ⊙ A, C ⊙ B]`.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, Var};

/// Learned vector of length `3H`, read as `[w_q, w_c, w_qc]`.
#[derive(Clone, Debug)]
pub struct TrilinearWeights {
    w0: ParamId,
    pub dim: usize,
}

impl TrilinearWeights {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, rng: &mut impl Rng) -> Self {
        let w0 = store.add_glorot(format!("{name}.w0"), &[3 * dim], 3 * dim, 1, rng);
        TrilinearWeights { w0, dim }
    }

    pub fn param(&self) -> ParamId {
        self.w0
    }
}

/// `S[i, j] = w_q·Q[j] + w_c·C[i] + w_qc·(Q[j] ⊙ C[i])` for `C[n×H]`, `Q[m×H]`.
///
/// Computed as `(C ⊙ w_qc) Qᵀ` plus a per-row and a per-column term, so no
/// `n×m×3H` intermediate is built.
pub fn trilinear_similarity(g: &mut Graph<'_>, c: Var, q: Var, w0: Var) -> Result<Var> {
    let (_, h) = g.value(c).dims2("trilinear_similarity")?;
    let (_, hq) = g.value(q).dims2("trilinear_similarity")?;
    if h != hq {
        return Err(Error::shape(
            "trilinear_similarity",
            format!("context {:?} and question {:?} widths differ", g.shape(c), g.shape(q)),
        ));
    }
    if g.value(w0).numel() != 3 * h {
        return Err(Error::Config(format!(
            "trilinear weights have length {}, expected 3 × {h}",
            g.value(w0).numel()
        )));
    }
    let w0 = g.reshape(w0, &[3 * h])?;
    let w_q = g.slice_last(w0, 0, h)?;
    let w_c = g.slice_last(w0, h, h)?;
    let w_qc = g.slice_last(w0, 2 * h, h)?;

    let w_c = g.reshape(w_c, &[h, 1])?;
    let w_q = g.reshape(w_q, &[h, 1])?;
    let c_term = g.matmul(c, w_c)?;
    let q_term = g.matmul(q, w_q)?;
    let cw = g.mul_row(c, w_qc)?;
    let qt = g.transpose(q)?;
    let s = g.matmul(cw, qt)?;
    let s = g.add_col(s, c_term)?;
    g.add_row(s, q_term)
}

/// Result of a context–question attention step.
#[derive(Clone, Copy, Debug)]
pub struct CrossAttention {
    /// Per-context-position blend fed to the model encoder.
    pub blended: Var,
    /// Row-normalised weights over question positions, `n×m`.
    pub c2q: Var,
    /// Column-normalised weights over context positions, transposed to `m×n`.
    pub q2c: Option<Var>,
}

/// Trilinear bidirectional attention; output width `4H`.
pub fn bidirectional_attend(
    g: &mut Graph<'_>,
    c: Var,
    q: Var,
    c_mask: &[bool],
    q_mask: &[bool],
    w0: Var,
) -> Result<CrossAttention> {
    check_masks(g, c, q, c_mask, q_mask)?;
    let s = trilinear_similarity(g, c, q, w0)?;
    let s_row = g.softmax(s, Some(q_mask))?;
    let s_t = g.transpose(s)?;
    let s_col_t = g.softmax(s_t, Some(c_mask))?;
    let a = g.matmul(s_row, q)?;
    // S̄ (S̿ᵀ C): associating this way keeps the cost linear in the context length.
    let q_ctx = g.matmul(s_col_t, c)?;
    let b = g.matmul(s_row, q_ctx)?;
    let ca = g.mul(c, a)?;
    let cb = g.mul(c, b)?;
    let blended = g.concat(&[c, a, ca, cb])?;
    Ok(CrossAttention {
        blended,
        c2q: s_row,
        q2c: Some(s_col_t),
    })
}

/// Dot-product context-to-question attention; output `[C, A]`, width `2H`.
pub fn basic_attend(g: &mut Graph<'_>, c: Var, q: Var, c_mask: &[bool], q_mask: &[bool]) -> Result<CrossAttention> {
    check_masks(g, c, q, c_mask, q_mask)?;
    let qt = g.transpose(q)?;
    let scores = g.matmul(c, qt)?;
    let weights = g.softmax(scores, Some(q_mask))?;
    let a = g.matmul(weights, q)?;
    let blended = g.concat(&[c, a])?;
    Ok(CrossAttention {
        blended,
        c2q: weights,
        q2c: None,
    })
}

fn check_masks(g: &Graph<'_>, c: Var, q: Var, c_mask: &[bool], q_mask: &[bool]) -> Result<()> {
    let n = g.value(c).dims2("attend")?.0;
    let m = g.value(q).dims2("attend")?.0;
    if c_mask.len() != n || q_mask.len() != m {
        return Err(Error::shape(
            "attend",
            format!(
                "masks of {} and {} for context of {n} and question of {m}",
                c_mask.len(),
                q_mask.len()
            ),
        ));
    }
    Ok(())
}

/// Context-to-question weights with token labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    pub context_tokens: Vec<String>,
    pub question_tokens: Vec<String>,
    /// `n×m`, one row per context token.
    pub weights: Tensor,
}

impl Heatmap {
    pub fn new(weights: Tensor, context_tokens: Vec<String>, question_tokens: Vec<String>) -> Result<Self> {
        let (n, m) = weights.dims2("heatmap")?;
        if n != context_tokens.len() || m != question_tokens.len() {
            return Err(Error::shape(
                "heatmap",
                format!(
                    "{n}×{m} weights with {} context and {} question labels",
                    context_tokens.len(),
                    question_tokens.len()
                ),
            ));
        }
        Ok(Heatmap {
            context_tokens,
            question_tokens,
            weights,
        })
    }

    /// CSV: the header row holds an empty corner cell then the question
    /// tokens; each data row holds a context token then its weights to six
    /// decimals.
    pub fn write_csv(&self, w: impl Write) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(std::iter::once("").chain(self.question_tokens.iter().map(String::as_str)))?;
        for (i, tok) in self.context_tokens.iter().enumerate() {
            let cells = self.weights.row(i).iter().map(|v| format!("{v:.6}"));
            out.write_record(std::iter::once(tok.clone()).chain(cells))?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_csv(r: impl Read) -> Result<Self> {
        let bad = |line: usize, msg: String| Error::parse("heatmap", Some(line), msg);
        let mut reader = csv::ReaderBuilder::new().has_headers(false).flexible(true).from_reader(r);
        let mut records = reader.records();
        let header = records.next().ok_or_else(|| bad(1, "empty file".into()))??;
        if header.get(0) != Some("") || header.len() < 2 {
            return Err(bad(1, "header must be an empty corner cell followed by question tokens".into()));
        }
        let question_tokens: Vec<String> = header.iter().skip(1).map(String::from).collect();
        let m = question_tokens.len();
        let mut context_tokens = Vec::new();
        let mut values = Vec::new();
        for (i, rec) in records.enumerate() {
            let rec = rec?;
            if rec.len() != m + 1 {
                return Err(bad(i + 2, format!("expected {} cells, found {}", m + 1, rec.len())));
            }
            context_tokens.push(rec[0].to_string());
            for cell in rec.iter().skip(1) {
                let v: f64 = cell
                    .trim()
                    .parse()
                    .map_err(|_| bad(i + 2, format!("invalid weight {cell:?}")))?;
                values.push(v);
            }
        }
        if context_tokens.is_empty() {
            return Err(bad(2, "no context rows".into()));
        }
        let weights = Tensor::new(vec![context_tokens.len(), m], values)?;
        Heatmap::new(weights, context_tokens, question_tokens)
    }

    /// Grayscale image, one `cell`-pixel square per weight (white = 1).
    pub fn write_png(&self, path: &Path, cell: u32) -> Result<()> {
        let (n, m) = self.weights.dims2("heatmap")?;
        let cell = cell.max(1);
        let img = image::GrayImage::from_fn(m as u32 * cell, n as u32 * cell, |x, y| {
            let v = self.weights.at2((y / cell) as usize, (x / cell) as usize);
            image::Luma([(v.clamp(0.0, 1.0) * 255.0).round() as u8])
        });
        img.save(path)?;
        Ok(())
    }
}

/// Writes `heatmap` as CSV to `path`, plus a PNG rendering when `png` is given.
pub fn export_attention_heatmap(heatmap: &Heatmap, path: &Path, png: Option<&Path>) -> Result<()> {
    heatmap.write_csv(File::create(path)?)?;
    if let Some(p) = png {
        heatmap.write_png(p, 16)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rnd(shape: &[usize], seed: u64) -> Tensor {
        Tensor::uniform(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn zero_weights_give_uniform_attention() {
        let mut g = Graph::new();
        let c = g.constant(rnd(&[4, 3], 1));
        let q = g.constant(rnd(&[3, 3], 2));
        let w = g.constant(Tensor::zeros(&[9]));
        let s = trilinear_similarity(&mut g, c, q, w).unwrap();
        assert!(g.value(s).data().iter().all(|&v| v == 0.0));
        let att = bidirectional_attend(&mut g, c, q, &[true, true, true, false], &[true, false, true], w).unwrap();
        let c2q = g.value(att.c2q);
        for i in 0..4 {
            assert_eq!(c2q.row(i), &[0.5, 0.0, 0.5]);
        }
        let q2c = g.value(att.q2c.unwrap());
        for j in 0..3 {
            for i in 0..3 {
                assert!((q2c.at2(j, i) - 1.0 / 3.0).abs() < 1e-15);
            }
            assert_eq!(q2c.at2(j, 3), 0.0);
        }
    }

    #[test]
    fn one_hot_product_weight() {
        let mut g = Graph::new();
        let ct = rnd(&[5, 4], 3);
        let qt = rnd(&[2, 4], 4);
        let mut w = vec![0.0; 12];
        w[8 + 2] = 1.0;
        let c = g.constant(ct.clone());
        let q = g.constant(qt.clone());
        let w = g.constant(Tensor::vector(w));
        let s = trilinear_similarity(&mut g, c, q, w).unwrap();
        for i in 0..5 {
            for j in 0..2 {
                assert!((g.value(s).at2(i, j) - ct.at2(i, 2) * qt.at2(j, 2)).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn wrong_weight_length_is_config_error() {
        let mut g = Graph::new();
        let c = g.constant(rnd(&[2, 4], 1));
        let q = g.constant(rnd(&[2, 4], 2));
        let w = g.constant(Tensor::zeros(&[11]));
        assert!(matches!(trilinear_similarity(&mut g, c, q, w), Err(Error::Config(_))));
    }

    #[test]
    fn single_question_token_is_copied() {
        let mut g = Graph::new();
        let c = g.constant(rnd(&[3, 2], 5));
        let q = g.constant(rnd(&[1, 2], 6));
        let w = g.constant(rnd(&[6], 7));
        let att = bidirectional_attend(&mut g, c, q, &[true; 3], &[true], w).unwrap();
        let blended = g.value(att.blended).clone();
        assert_eq!(blended.shape(), &[3, 8]);
        for i in 0..3 {
            assert_eq!(&blended.row(i)[2..4], g.value(q).row(0));
        }
        let basic = basic_attend(&mut g, c, q, &[true; 3], &[true]).unwrap();
        for i in 0..3 {
            assert_eq!(&g.value(basic.blended).row(i)[2..4], g.value(q).row(0));
        }
    }

    #[test]
    fn orthogonal_rows_attend_uniformly() {
        let mut g = Graph::new();
        let c = g.constant(Tensor::from_rows(&[vec![1.0, 0.0, 0.0]]));
        let q = g.constant(Tensor::from_rows(&[vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 2.0]]));
        let att = basic_attend(&mut g, c, q, &[true], &[true, true]).unwrap();
        assert_eq!(g.value(att.c2q).data(), &[0.5, 0.5]);
    }

    #[test]
    fn heatmap_csv_layout_and_round_trip() {
        let w = Tensor::from_rows(&[vec![0.25, 0.75], vec![0.5, 0.5], vec![1.0, 0.0]]);
        let hm = Heatmap::new(
            w.clone(),
            vec!["death".into(), ",".into(), "nine".into()],
            vec!["how".into(), "many".into()],
        )
        .unwrap();
        let mut buf = Vec::new();
        hm.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 4);
        assert_eq!(lines[0], ",how,many");
        assert_eq!(lines[2], "\",\",0.500000,0.500000");
        let back = Heatmap::read_csv(buf.as_slice()).unwrap();
        assert_eq!(back.context_tokens, hm.context_tokens);
        assert_eq!(back.question_tokens, hm.question_tokens);
        for (a, b) in back.weights.data().iter().zip(w.data()) {
            assert!((a - b).abs() <= 1e-6);
        }
    }

    #[test]
    fn heatmap_rejects_ragged_rows() {
        assert!(Heatmap::read_csv(",a,b\nx,0.1\n".as_bytes()).is_err());
        assert!(Heatmap::read_csv("".as_bytes()).is_err());
        assert!(Heatmap::read_csv(",a\nx,zz\n".as_bytes()).is_err());
    }
}
