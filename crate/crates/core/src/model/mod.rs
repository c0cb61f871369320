//! Assembling named architectures from a [`ModelConfig`].
//!
//! Every model is: frozen word vectors (optionally with trainable PAD/UNK
//! rows) → one or two input encoder blocks → context–question attention →
//! zero, one or three model encoder blocks → output head.

mod config;

pub use config::{
    preset_names, preset_source, AttentionKind, DecodeKind, DropoutPlacement, ModelConfig, OutputKind,
};

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{basic_attend, bidirectional_attend, CrossAttention, Heatmap, TrilinearWeights};
use crate::error::{Error, Result};
use crate::layers::{ConvEncoderBlock, EncoderSpec, Mode};
use crate::span::{decode_constrained, decode_naive, span_distributions, DecodedSpan, OutputHead, SpanPrediction};
use crate::tensor::{read_checkpoint, write_checkpoint, Checkpoint, Graph, ParamId, ParamStore, Tensor, Var};
use crate::text::{make_batches, BatchConfig, BatchMode, QABatch, QAExample, Vocab};

pub const MODEL_FORMAT: &str = "convqa-model";
const FROZEN_EMBEDDING: &str = "embedding.frozen";

/// Graph nodes produced by one forward pass over one example.
#[derive(Clone, Copy, Debug)]
pub struct ForwardOutput {
    pub p_start: Var,
    pub p_end: Var,
    pub attention: CrossAttention,
}

/// Start/end distributions for a batch, one row per example, padded with
/// zeros to the batch context length.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchOutput {
    pub p_start: Tensor,
    pub p_end: Tensor,
}

#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    vocab: Vocab,
    store: ParamStore,
    embedding: ParamId,
    special: Option<ParamId>,
    /// One block when shared, otherwise `[context, question]`.
    input_encoders: Vec<ConvEncoderBlock>,
    trilinear: Option<TrilinearWeights>,
    model_encoders: Vec<ConvEncoderBlock>,
    head: OutputHead,
}

impl Model {
    /// Builds a freshly initialised model; `seed` drives every initialiser.
    pub fn build(config: &ModelConfig, vocab: Vocab, seed: u64) -> Result<Self> {
        config.validate()?;
        if vocab.dim() != config.embedding_dim {
            return Err(Error::Config(format!(
                "embedding_dim = {} but the word vectors have {} dimensions",
                config.embedding_dim,
                vocab.dim()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let embedding = store.add(FROZEN_EMBEDDING, vocab.embeddings().clone(), false);
        let special = config.tpu.then(|| {
            let rows = Tensor::new(vec![2, vocab.dim()], vocab.embeddings().data()[..2 * vocab.dim()].to_vec())
                .expect("two rows");
            store.add("embedding.special", rows, true)
        });

        let (conv_dropout, output_dropout) = dropout_rates(config);
        let block = |in_dim| EncoderSpec {
            in_dim,
            hidden: config.hidden,
            num_layers: config.encoder_layers,
            kernel_width: config.kernel_width,
            layer_norm: config.layer_norm,
            attention: config.attention_spec(),
            conv_dropout,
            output_dropout,
        };
        let names: &[&str] = if config.share_input_encoders {
            &["input_encoder"]
        } else {
            &["context_encoder", "question_encoder"]
        };
        let input_encoders = names
            .iter()
            .map(|n| ConvEncoderBlock::new(&mut store, n, block(config.embedding_dim), &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let enc_dim = input_encoders[0].out_dim();

        let (trilinear, mut width) = match config.attention_kind {
            AttentionKind::Basic => (None, 2 * enc_dim),
            AttentionKind::Bidirectional => (
                Some(TrilinearWeights::new(&mut store, "attention", enc_dim, &mut rng)),
                4 * enc_dim,
            ),
        };
        let mut model_encoders = Vec::new();
        for k in 0..config.num_model_encoders() {
            let enc = ConvEncoderBlock::new(&mut store, &format!("model_encoder{k}"), block(width), &mut rng)?;
            width = enc.out_dim();
            model_encoders.push(enc);
        }
        let head = match config.output {
            OutputKind::BaselineFc => OutputHead::baseline_fc(&mut store, "output", width, config.hidden, &mut rng),
            OutputKind::WideConv => OutputHead::wide_conv(
                &mut store,
                "output",
                width,
                config.output_proj_dim,
                config.output_kernel,
                &mut rng,
            )?,
        };
        Ok(Model {
            config: config.clone(),
            vocab,
            store,
            embedding,
            special,
            input_encoders,
            trilinear,
            model_encoders,
            head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Replaces the dropout probability at the configured placement.
    pub fn set_dropout(&mut self, p: f64) -> Result<()> {
        let mut config = self.config.clone();
        config.dropout = p;
        config.validate()?;
        let (conv, output) = dropout_rates(&config);
        for enc in self.input_encoders.iter_mut().chain(&mut self.model_encoders) {
            enc.set_dropout(conv, output);
        }
        self.config = config;
        Ok(())
    }

    /// Replaces the decoding rule used by [`Model::decode`] and [`Model::predict`].
    pub fn set_decode(&mut self, decode: DecodeKind, max_span_len: Option<usize>) -> Result<()> {
        let mut config = self.config.clone();
        config.decode = decode;
        config.max_span_len = max_span_len;
        config.validate()?;
        self.config = config;
        Ok(())
    }

    /// Replaces the L2 coefficient used by training.
    pub fn set_l2(&mut self, l2: f64) -> Result<()> {
        let mut config = self.config.clone();
        config.l2 = l2;
        config.validate()?;
        self.config = config;
        Ok(())
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Trainable scalars; frozen word vectors are excluded.
    pub fn count_parameters(&self) -> usize {
        self.store.num_trainable()
    }

    pub fn context_encoder(&self) -> &ConvEncoderBlock {
        &self.input_encoders[0]
    }

    pub fn question_encoder(&self) -> &ConvEncoderBlock {
        self.input_encoders.last().expect("at least one input encoder")
    }

    pub fn encoders_shared(&self) -> bool {
        self.input_encoders.len() == 1
    }

    pub fn model_encoders(&self) -> &[ConvEncoderBlock] {
        &self.model_encoders
    }

    pub fn output_head(&self) -> &OutputHead {
        &self.head
    }

    /// Forward pass over one example. `g` must borrow this model's store.
    pub fn forward(
        &self,
        g: &mut Graph<'_>,
        context_ids: &[usize],
        question_ids: &[usize],
        context_mask: &[bool],
        question_mask: &[bool],
        mode: &mut Mode<'_>,
    ) -> Result<ForwardOutput> {
        let frozen = g.param(self.embedding);
        let special = self.special.map(|s| g.param(s));
        let ce = g.embed(frozen, special, context_ids)?;
        let qe = g.embed(frozen, special, question_ids)?;
        let c = self.context_encoder().encode(g, ce, context_mask, mode)?;
        let q = self.question_encoder().encode(g, qe, question_mask, mode)?;
        let attention = match &self.trilinear {
            Some(t) => {
                let w0 = g.param(t.param());
                bidirectional_attend(g, c, q, context_mask, question_mask, w0)?
            }
            None => basic_attend(g, c, q, context_mask, question_mask)?,
        };
        let mut h = attention.blended;
        for enc in &self.model_encoders {
            h = enc.encode(g, h, context_mask, mode)?;
        }
        let (p_start, p_end) = span_distributions(g, &self.head, h, context_mask)?;
        Ok(ForwardOutput {
            p_start,
            p_end,
            attention,
        })
    }

    /// Inference-mode distributions for every row of `batch`.
    pub fn forward_batch(&self, batch: &QABatch) -> Result<BatchOutput> {
        let (b, n) = (batch.len(), batch.context_len());
        if b == 0 {
            return Err(Error::shape("forward_batch", "empty batch"));
        }
        let mut ps = vec![0.0; b * n];
        let mut pe = vec![0.0; b * n];
        for i in 0..b {
            let (s, e) = self.row_distributions(&batch.row(i))?;
            ps[i * n..i * n + s.len()].copy_from_slice(&s);
            pe[i * n..i * n + e.len()].copy_from_slice(&e);
        }
        Ok(BatchOutput {
            p_start: Tensor::new(vec![b, n], ps)?,
            p_end: Tensor::new(vec![b, n], pe)?,
        })
    }

    fn row_distributions(&self, row: &QABatch) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut g = Graph::with_params(&self.store);
        let out = self.forward(
            &mut g,
            &row.context_ids[0],
            &row.question_ids[0],
            &row.context_mask[0],
            &row.question_mask[0],
            &mut Mode::Eval,
        )?;
        Ok((g.value(out.p_start).data().to_vec(), g.value(out.p_end).data().to_vec()))
    }

    /// Decodes with the configured rule.
    pub fn decode(&self, p_start: &[f64], p_end: &[f64]) -> Result<DecodedSpan> {
        match self.config.decode {
            DecodeKind::Naive => decode_naive(p_start, p_end),
            DecodeKind::Constrained => decode_constrained(p_start, p_end, self.config.max_span_len),
        }
    }

    /// Predictions keyed by example id. Examples with an empty context get no
    /// entry.
    pub fn predict(&self, examples: &[QAExample], batch: BatchConfig) -> Result<BTreeMap<String, SpanPrediction>> {
        let (batches, _) = make_batches(examples, &self.vocab, batch, BatchMode::Eval)?;
        let mut out = BTreeMap::new();
        for b in &batches {
            for i in 0..b.len() {
                let row = b.row(i);
                let (s, e) = self.row_distributions(&row)?;
                let ex = &examples[row.example_index[0]];
                out.insert(ex.id.clone(), SpanPrediction::from_decoded(ex, self.decode(&s, &e)?));
            }
        }
        Ok(out)
    }

    /// Context-to-question weights for one example.
    pub fn attention_heatmap(&self, example: &QAExample, batch: BatchConfig) -> Result<Heatmap> {
        let (batches, _) = make_batches(std::slice::from_ref(example), &self.vocab, batch, BatchMode::Eval)?;
        let row = batches
            .first()
            .map(|b| b.row(0))
            .ok_or_else(|| Error::Data(format!("example {} has an empty context", example.id)))?;
        let mut g = Graph::with_params(&self.store);
        let out = self.forward(
            &mut g,
            &row.context_ids[0],
            &row.question_ids[0],
            &row.context_mask[0],
            &row.question_mask[0],
            &mut Mode::Eval,
        )?;
        let labels = |ids: &[usize]| ids.iter().map(|&i| self.vocab.tokens()[i].clone()).collect();
        let context: Vec<String> = example.context_tokens[..row.context_ids[0].len()].to_vec();
        let question: Vec<String> = if example.question_tokens.is_empty() {
            labels(&row.question_ids[0])
        } else {
            example.question_tokens[..row.question_ids[0].len()].to_vec()
        };
        Heatmap::new(g.value(out.attention.c2q).clone(), context, question)
    }

    pub fn to_checkpoint(&self, extra: &BTreeMap<String, String>) -> Result<Checkpoint> {
        let mut metadata = extra.clone();
        metadata.insert("format".into(), MODEL_FORMAT.into());
        metadata.insert("config".into(), self.config.to_config_string());
        metadata.insert("vocab".into(), serde_json::to_string(self.vocab.tokens())?);
        let tensors = self
            .store
            .iter()
            .map(|(_, p)| (p.name.clone(), p.value.clone(), p.trainable()))
            .collect();
        Ok(Checkpoint { metadata, tensors })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let meta = |k: &str| {
            ckpt.metadata
                .get(k)
                .ok_or_else(|| Error::Data(format!("checkpoint metadata lacks {k:?}")))
        };
        if meta("format")? != MODEL_FORMAT {
            return Err(Error::Data(format!("checkpoint format {:?} is not a model", meta("format")?)));
        }
        let config = ModelConfig::parse(meta("config")?, "checkpoint config")?;
        let tokens: Vec<String> = serde_json::from_str(meta("vocab")?)?;
        let embeddings = ckpt
            .tensor(FROZEN_EMBEDDING)
            .ok_or_else(|| Error::Data(format!("checkpoint lacks {FROZEN_EMBEDDING}")))?;
        let vocab = Vocab::from_parts(tokens, embeddings.clone())?;
        let mut model = Model::build(&config, vocab, 0)?;
        let ids: Vec<ParamId> = model.store.ids().collect();
        for id in ids {
            let p = model.store.get(id);
            let t = ckpt
                .tensor(&p.name)
                .ok_or_else(|| Error::Data(format!("checkpoint lacks parameter {}", p.name)))?;
            if t.shape() != p.value.shape() {
                return Err(Error::Data(format!(
                    "parameter {} has shape {:?} in the checkpoint but {:?} in the model",
                    p.name,
                    t.shape(),
                    p.value.shape()
                )));
            }
            *model.store.value_mut(id) = t.clone();
        }
        Ok(model)
    }

    /// Writes atomically via a temporary sibling file.
    pub fn save(&self, path: impl AsRef<Path>, extra: &BTreeMap<String, String>) -> Result<()> {
        let path = path.as_ref();
        let tmp = path.with_extension("tmp");
        {
            let mut w = BufWriter::new(File::create(&tmp)?);
            write_checkpoint(&mut w, &self.to_checkpoint(extra)?)?;
            std::io::Write::flush(&mut w)?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(&read_checkpoint(&fs::read(path)?)?)
    }
}

fn dropout_rates(config: &ModelConfig) -> (f64, f64) {
    match config.dropout_placement {
        DropoutPlacement::BeforeConv => (config.dropout, 0.0),
        DropoutPlacement::BlockOutput => (0.0, config.dropout),
    }
}

/// Published figures for a named architecture: dev F1, trainable parameters,
/// and training examples per second.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ReferenceFigures {
    pub f1: f64,
    pub params: u64,
    pub eps: f64,
}

const REFERENCE: &[(&str, ReferenceFigures)] = &[
    ("simpconv", ReferenceFigures { f1: 0.2333, params: 1_882_602, eps: 670.8 }),
    ("triconv", ReferenceFigures { f1: 0.2740, params: 2_723_402, eps: 451.7 }),
    ("triconv_attn", ReferenceFigures { f1: 0.1932, params: 1_882_602, eps: 237.5 }),
    ("triconv_reg", ReferenceFigures { f1: 0.2723, params: 3_203_402, eps: 407.5 }),
    ("windowconv100", ReferenceFigures { f1: 0.2922, params: 2_647_822, eps: 461.8 }),
    ("attn2", ReferenceFigures { f1: 0.2747, params: 3_204_602, eps: 228.4 }),
    ("shareconv", ReferenceFigures { f1: 0.3922, params: 1_822_402, eps: 442.2 }),
    ("windowconv300", ReferenceFigures { f1: 0.2824, params: 2_727_822, eps: 440.7 }),
    ("narrowconv", ReferenceFigures { f1: 0.2822, params: 1_763_402, eps: 564.7 }),
    ("combconv100", ReferenceFigures { f1: 0.5114, params: 650_322, eps: 641.4 }),
    ("combconv50", ReferenceFigures { f1: 0.5101, params: 642_722, eps: 649.4 }),
    ("dropoutconv", ReferenceFigures { f1: 0.2721, params: 650_322, eps: 546.9 }),
    ("maybeconv", ReferenceFigures { f1: 0.5285, params: 640_566, eps: 392.1 }),
    ("deepconv", ReferenceFigures { f1: 0.2342, params: 4_485_402, eps: 259.8 }),
    ("crossconv", ReferenceFigures { f1: 0.5398, params: 492_982, eps: 451.8 }),
    ("attnconv", ReferenceFigures { f1: 0.5242, params: 788_406, eps: 335.2 }),
];

pub fn reference_figures(name: &str) -> Option<ReferenceFigures> {
    REFERENCE.iter().find(|(n, _)| *n == name).map(|(_, f)| *f)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text::synthetic::{synthetic_examples, synthetic_vocab, SyntheticSpec};

    fn small(name: &str) -> ModelConfig {
        let mut c = ModelConfig::preset(name).unwrap();
        c.embedding_dim = 8;
        c.hidden = 16;
        if c.self_attention_heads > 0 {
            c.self_attention_heads = 2;
            c.self_attention_head_dim = if c.self_attention_bypass == crate::layers::Bypass::Residual { 8 } else { 4 };
        }
        c
    }

    fn model(name: &str) -> (Model, Vec<QAExample>) {
        let spec = SyntheticSpec::default();
        let m = Model::build(&small(name), synthetic_vocab(&spec, 8), 3).unwrap();
        (m, synthetic_examples(&spec))
    }

    #[test]
    fn every_preset_builds_small_and_runs() {
        for name in preset_names() {
            let (m, exs) = model(name);
            let preds = m.predict(&exs[..2], BatchConfig::default()).unwrap();
            assert_eq!(preds.len(), 2, "{name}");
            assert!(m.count_parameters() > 0);
        }
    }

    #[test]
    fn dimension_mismatch_is_config_error() {
        let spec = SyntheticSpec::default();
        let err = Model::build(&small("crossconv"), synthetic_vocab(&spec, 5), 0).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn batch_shapes_and_eval_determinism() {
        let (m, exs) = model("attnconv");
        let cfg = BatchConfig {
            batch_size: 4,
            ..BatchConfig::default()
        };
        let (batches, _) = make_batches(&exs[..4], m.vocab(), cfg, BatchMode::Eval).unwrap();
        let a = m.forward_batch(&batches[0]).unwrap();
        assert_eq!(a.p_start.shape(), &[4, batches[0].context_len()]);
        assert_eq!(a, m.forward_batch(&batches[0]).unwrap());
    }

    #[test]
    fn padded_forward_matches_trimmed() {
        let (m, exs) = model("attnconv");
        let (batches, _) = make_batches(&exs[..1], m.vocab(), BatchConfig::default(), BatchMode::Eval).unwrap();
        let row = batches[0].row(0);
        let n = row.context_ids[0].len();
        let mut ids = row.context_ids[0].clone();
        ids.extend([0, 0, 0]);
        let mut mask = vec![true; n];
        mask.extend([false; 3]);
        let mut g = Graph::with_params(m.store());
        let padded = m
            .forward(&mut g, &ids, &row.question_ids[0], &mask, &row.question_mask[0], &mut Mode::Eval)
            .unwrap();
        let (s, _) = m.row_distributions(&row).unwrap();
        let p = g.value(padded.p_start).data();
        for k in 0..n {
            assert!((p[k] - s[k]).abs() < 1e-12);
        }
        assert!(p[n..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn checkpoint_round_trip() {
        let (m, exs) = model("crossconv");
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        m.save(&path, &BTreeMap::new()).unwrap();
        let back = Model::load(&path).unwrap();
        assert_eq!(back.config(), m.config());
        let cfg = BatchConfig::default();
        assert_eq!(back.predict(&exs[..3], cfg).unwrap(), m.predict(&exs[..3], cfg).unwrap());
    }

    #[test]
    fn heatmap_rows_are_distributions() {
        let (m, exs) = model("crossconv");
        let hm = m.attention_heatmap(&exs[0], BatchConfig::default()).unwrap();
        assert_eq!(hm.context_tokens, exs[0].context_tokens);
        for i in 0..hm.context_tokens.len() {
            assert!((hm.weights.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }
}
