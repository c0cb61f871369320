//! Span cross-entropy, Adam, the training loop and throughput measurement.

use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::eval::evaluate;
use crate::layers::Mode;
use crate::model::Model;
use crate::tensor::{Graph, ParamStore, Tensor, Var};
use crate::text::{make_batches, BatchConfig, BatchMode, QABatch, QAExample, UNK};

/// `-ln p_start[gold_start] - ln p_end[gold_end]` for one example.
pub fn span_loss(
    g: &mut Graph<'_>,
    p_start: Var,
    p_end: Var,
    gold_start: usize,
    gold_end: usize,
    mask: &[bool],
) -> Result<Var> {
    for gold in [gold_start, gold_end] {
        if !mask.get(gold).copied().unwrap_or(false) {
            return Err(Error::Data(format!("gold index {gold} falls on a masked or missing position")));
        }
    }
    let s = g.cross_entropy(p_start, gold_start)?;
    let e = g.cross_entropy(p_end, gold_end)?;
    g.add(s, e)
}

/// Adds `2λθ` to every trainable gradient and returns `λ Σθ²`.
pub fn apply_l2(store: &mut ParamStore, lambda: f64) -> f64 {
    if lambda == 0.0 {
        return 0.0;
    }
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let p = store.get_mut(id);
        if let Some(grad) = &mut p.grad {
            for (g, v) in grad.data_mut().iter_mut().zip(p.value.data()) {
                *g += 2.0 * lambda * v;
            }
        }
    }
    lambda * store.l2_sum()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_epsilon: f64,
    pub batch_size: usize,
    pub max_steps: usize,
    pub eval_interval: usize,
    pub clip_norm: Option<f64>,
    pub seed: u64,
    pub max_context_len: usize,
    pub max_question_len: usize,
    /// Size of the train and dev subsets scored at each evaluation.
    pub eval_examples: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_epsilon: 1e-8,
            batch_size: 32,
            max_steps: 1000,
            eval_interval: 100,
            clip_norm: Some(5.0),
            seed: 0,
            max_context_len: crate::text::DEFAULT_MAX_CONTEXT_LEN,
            max_question_len: crate::text::DEFAULT_MAX_QUESTION_LEN,
            eval_examples: 500,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.learning_rate > 0.0 && self.adam_epsilon > 0.0) {
            return bad("learning_rate and adam_epsilon must be positive".into());
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return bad(format!("betas ({}, {}) must lie in [0, 1)", self.beta1, self.beta2));
        }
        if self.batch_size == 0 || self.eval_interval == 0 {
            return bad("batch_size and eval_interval must be positive".into());
        }
        if self.clip_norm.is_some_and(|c| c <= 0.0) {
            return bad("clip_norm must be positive".into());
        }
        Ok(())
    }

    pub fn batch_config(&self) -> BatchConfig {
        BatchConfig {
            batch_size: self.batch_size,
            max_context_len: self.max_context_len,
            max_question_len: self.max_question_len,
        }
    }
}

/// Adaptive moment estimation with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    moments: Vec<Option<(Tensor, Tensor)>>,
}

impl Adam {
    pub fn new(cfg: &TrainConfig) -> Self {
        Adam {
            lr: cfg.learning_rate,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_epsilon,
            t: 0,
            moments: Vec::new(),
        }
    }

    /// Updates every trainable parameter from its stored gradient.
    pub fn step(&mut self, store: &mut ParamStore) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        self.moments.resize(store.len(), None);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let p = store.get_mut(id);
            let Some(grad) = &p.grad else { continue };
            let (m, v) = self.moments[id.index()]
                .get_or_insert_with(|| (Tensor::zeros(grad.shape()), Tensor::zeros(grad.shape())));
            let values = p.value.data_mut();
            for (k, &gk) in grad.data().iter().enumerate() {
                let mk = &mut m.data_mut()[k];
                *mk = self.beta1 * *mk + (1.0 - self.beta1) * gk;
                let vk = &mut v.data_mut()[k];
                *vk = self.beta2 * *vk + (1.0 - self.beta2) * gk * gk;
                let m_hat = m.data()[k] / c1;
                let v_hat = v.data()[k] / c2;
                values[k] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}

/// Forward and backward over every row of `batch`, adding the gradient of the
/// mean span loss into the store. Returns that mean loss. `rng` enables
/// dropout.
pub fn accumulate_gradients(model: &mut Model, batch: &QABatch, mut rng: Option<&mut ChaCha8Rng>) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Data("empty batch".into()));
    }
    let scale = 1.0 / batch.len() as f64;
    let mut total = 0.0;
    for i in 0..batch.len() {
        let row = batch.row(i);
        let span = row.spans[0]
            .ok_or_else(|| Error::Data(format!("row {i} of the batch has no gold span")))?;
        let (loss, grads) = {
            let mut g = Graph::with_params(model.store());
            let mut mode = match rng.as_deref_mut() {
                Some(r) => Mode::Train(r),
                None => Mode::Eval,
            };
            let out = model.forward(
                &mut g,
                &row.context_ids[0],
                &row.question_ids[0],
                &row.context_mask[0],
                &row.question_mask[0],
                &mut mode,
            )?;
            let loss = span_loss(&mut g, out.p_start, out.p_end, span.start, span.end, &row.context_mask[0])?;
            let scaled = g.scale(loss, scale);
            g.backward(scaled)?;
            (g.value(loss).data()[0], g.gradients())
        };
        model.store_mut().accumulate(&grads);
        total += loss;
    }
    Ok(total * scale)
}

/// One optimizer step; returns the total loss (data + L2).
pub fn train_step(
    model: &mut Model,
    batch: &QABatch,
    adam: &mut Adam,
    rng: &mut ChaCha8Rng,
    clip_norm: Option<f64>,
) -> Result<f64> {
    model.store_mut().zero_grad();
    let data = accumulate_gradients(model, batch, Some(rng))?;
    let l2 = model.config().l2;
    let loss = data + apply_l2(model.store_mut(), l2);
    if !loss.is_finite() {
        return Ok(loss);
    }
    if let Some(c) = clip_norm {
        model.store_mut().clip_grad_norm(c);
    }
    adam.step(model.store_mut());
    Ok(loss)
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsRecord {
    pub step: usize,
    pub loss: Option<f64>,
    pub em: Option<f64>,
    pub f1: Option<f64>,
    pub eps: f64,
    pub wall_seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalPoint {
    pub step: usize,
    pub train_em: f64,
    pub train_f1: f64,
    pub dev_em: Option<f64>,
    pub dev_f1: Option<f64>,
    pub eps: f64,
    pub wall_seconds: f64,
}

impl EvalPoint {
    /// The F1 used for model selection: dev when available, else train.
    pub fn selection_f1(&self) -> f64 {
        self.dev_f1.unwrap_or(self.train_f1)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct TrainReport {
    pub steps: usize,
    pub examples_seen: usize,
    pub losses: Vec<f64>,
    pub evals: Vec<EvalPoint>,
    pub best_step: usize,
    pub best_f1: f64,
    pub seconds_to_best: f64,
}

impl TrainReport {
    pub fn summary_table(&self) -> String {
        let mut s = String::from(" step  train EM  train F1    dev EM    dev F1       eps\n");
        let opt = |v: Option<f64>| v.map_or_else(|| "       -".to_string(), |x| format!("{x:>8.4}"));
        for e in &self.evals {
            let _ = writeln!(
                s,
                "{:>5}  {:>8.4}  {:>8.4}  {}  {}  {:>8.1}",
                e.step,
                e.train_em,
                e.train_f1,
                opt(e.dev_em),
                opt(e.dev_f1),
                e.eps
            );
        }
        let _ = writeln!(
            s,
            "best F1 {:.4} at step {} after {:.1}s",
            self.best_f1, self.best_step, self.seconds_to_best
        );
        s
    }
}

/// Where training writes its side outputs.
#[derive(Default)]
pub struct TrainOutputs<'a> {
    /// Line-delimited [`MetricsRecord`]s, one per step plus one per evaluation.
    pub metrics: Option<&'a mut dyn Write>,
    /// Best-so-far checkpoint path.
    pub checkpoint: Option<&'a Path>,
}

fn eval_subset(model: &Model, examples: &[QAExample], cfg: &TrainConfig) -> Result<(f64, f64)> {
    let subset: Vec<QAExample> = examples
        .iter()
        .filter(|e| !e.answer_texts.is_empty())
        .take(cfg.eval_examples)
        .cloned()
        .collect();
    if subset.is_empty() {
        return Ok((0.0, 0.0));
    }
    let preds = model
        .predict(&subset, cfg.batch_config())?
        .into_iter()
        .map(|(id, p)| (id, p.answer_text))
        .collect();
    let r = evaluate(&preds, &subset)?;
    Ok((r.em, r.f1))
}

fn log_line(out: &mut TrainOutputs<'_>, rec: &MetricsRecord) -> Result<()> {
    if let Some(w) = out.metrics.as_deref_mut() {
        serde_json::to_writer(&mut *w, rec)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

const DROPOUT_STREAM: u64 = 0x6472_6f70;

/// Trains for `cfg.max_steps` steps, evaluating every `cfg.eval_interval`
/// steps and at the end, and saving the best checkpoint by dev F1 (train F1
/// when there is no dev set).
pub fn train(
    model: &mut Model,
    train_set: &[QAExample],
    dev_set: Option<&[QAExample]>,
    cfg: &TrainConfig,
    mut out: TrainOutputs<'_>,
) -> Result<TrainReport> {
    cfg.validate()?;
    let (batches, stats) = make_batches(train_set, model.vocab(), cfg.batch_config(), BatchMode::Train)?;
    if batches.is_empty() {
        return Err(Error::Data("no training example has a usable gold span".into()));
    }
    log::info!(
        "training on {} examples in {} batches ({} unsupervised, {} empty contexts dropped)",
        stats.kept,
        batches.len(),
        stats.dropped_unsupervised,
        stats.dropped_empty_context
    );
    let mut data_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut drop_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ DROPOUT_STREAM);
    let mut order: Vec<usize> = (0..batches.len()).collect();
    let mut cursor = order.len();
    let mut adam = Adam::new(cfg);
    let mut report = TrainReport {
        best_f1: f64::NEG_INFINITY,
        ..TrainReport::default()
    };
    let start = Instant::now();
    let mut train_seconds = 0.0;

    for step in 0..=cfg.max_steps {
        if step > 0 {
            if cursor == order.len() {
                order.shuffle(&mut data_rng);
                cursor = 0;
            }
            let batch_id = order[cursor];
            cursor += 1;
            let t0 = Instant::now();
            let loss = train_step(model, &batches[batch_id], &mut adam, &mut drop_rng, cfg.clip_norm)?;
            train_seconds += t0.elapsed().as_secs_f64();
            if !loss.is_finite() {
                let ids: Vec<&str> = batches[batch_id]
                    .example_index
                    .iter()
                    .map(|&i| train_set[i].id.as_str())
                    .collect();
                log::error!("non-finite loss at step {step}, batch {batch_id}: examples {ids:?}");
                return Err(Error::NonFinite { step, batch_id, loss });
            }
            report.steps = step;
            report.examples_seen += batches[batch_id].len();
            report.losses.push(loss);
            let eps = report.examples_seen as f64 / train_seconds.max(f64::MIN_POSITIVE);
            log_line(
                &mut out,
                &MetricsRecord {
                    step,
                    loss: Some(loss),
                    em: None,
                    f1: None,
                    eps,
                    wall_seconds: start.elapsed().as_secs_f64(),
                },
            )?;
        }
        if step % cfg.eval_interval != 0 && step != cfg.max_steps {
            continue;
        }
        let (train_em, train_f1) = eval_subset(model, train_set, cfg)?;
        let dev = dev_set.map(|d| eval_subset(model, d, cfg)).transpose()?;
        let eps = if train_seconds > 0.0 {
            report.examples_seen as f64 / train_seconds
        } else {
            0.0
        };
        let point = EvalPoint {
            step,
            train_em,
            train_f1,
            dev_em: dev.map(|d| d.0),
            dev_f1: dev.map(|d| d.1),
            eps,
            wall_seconds: start.elapsed().as_secs_f64(),
        };
        log::info!(
            "step {step}: train EM {train_em:.4} F1 {train_f1:.4}{}",
            dev.map(|(em, f1)| format!(", dev EM {em:.4} F1 {f1:.4}")).unwrap_or_default()
        );
        log_line(
            &mut out,
            &MetricsRecord {
                step,
                loss: report.losses.last().copied(),
                em: Some(dev.map_or(train_em, |d| d.0)),
                f1: Some(point.selection_f1()),
                eps,
                wall_seconds: point.wall_seconds,
            },
        )?;
        if point.selection_f1() > report.best_f1 {
            report.best_f1 = point.selection_f1();
            report.best_step = step;
            report.seconds_to_best = point.wall_seconds;
            if let Some(path) = out.checkpoint {
                let meta = [
                    ("step".to_string(), step.to_string()),
                    ("f1".to_string(), format!("{:.6}", point.selection_f1())),
                ]
                .into();
                model.save(path, &meta)?;
            }
        }
        report.evals.push(point);
    }
    Ok(report)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BenchConfig {
    pub context_len: usize,
    pub question_len: usize,
    /// Examples per timed pass.
    pub examples: usize,
    /// Timed passes; the fastest is reported.
    pub repeats: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            context_len: 400,
            question_len: 30,
            examples: 8,
            repeats: 3,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct BenchResult {
    pub context_len: usize,
    pub question_len: usize,
    pub seconds_per_example: f64,
    pub eps: f64,
}

/// Random token ids of fixed lengths for timing forward passes.
struct BenchInputs {
    pairs: Vec<(Vec<usize>, Vec<usize>)>,
    c_mask: Vec<bool>,
    q_mask: Vec<bool>,
}

impl BenchInputs {
    fn new(model: &Model, cfg: &BenchConfig) -> Result<Self> {
        if cfg.context_len == 0 || cfg.question_len == 0 || cfg.examples == 0 || cfg.repeats == 0 {
            return Err(Error::Config("bench lengths, examples and repeats must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let v = model.vocab().len();
        let mut draw = |n: usize| -> Vec<usize> {
            (0..n)
                .map(|_| if v > 2 { rng.gen_range(2..v) } else { UNK })
                .collect()
        };
        let pairs = (0..cfg.examples)
            .map(|_| (draw(cfg.context_len), draw(cfg.question_len)))
            .collect();
        Ok(BenchInputs {
            pairs,
            c_mask: vec![true; cfg.context_len],
            q_mask: vec![true; cfg.question_len],
        })
    }

    fn time(&self, model: &Model) -> Result<f64> {
        let t0 = Instant::now();
        for (c, q) in &self.pairs {
            let mut g = Graph::with_params(model.store());
            let out = model.forward(&mut g, c, q, &self.c_mask, &self.q_mask, &mut Mode::Eval)?;
            std::hint::black_box(g.value(out.p_start));
        }
        Ok(t0.elapsed().as_secs_f64())
    }

    fn result(&self, best: f64) -> BenchResult {
        let per = best / self.pairs.len() as f64;
        BenchResult {
            context_len: self.c_mask.len(),
            question_len: self.q_mask.len(),
            seconds_per_example: per,
            eps: 1.0 / per.max(f64::MIN_POSITIVE),
        }
    }
}

/// Inference examples per second on random token ids of fixed lengths,
/// single-threaded. Best of `repeats` timings.
pub fn throughput_bench(model: &Model, cfg: &BenchConfig) -> Result<BenchResult> {
    let inputs = BenchInputs::new(model, cfg)?;
    let mut best = f64::INFINITY;
    for _ in 0..cfg.repeats {
        best = best.min(inputs.time(model)?);
    }
    Ok(inputs.result(best))
}

/// Measured time at context lengths `C` and `2C` next to the ratios predicted
/// by the cost model `(C + Q)H² + (C² + Q²)H`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ScalingReport {
    pub hidden: usize,
    pub base: BenchResult,
    pub doubled: BenchResult,
    pub measured_ratio: f64,
    /// `(2C + Q) / (C + Q)`: the convolution term alone.
    pub linear_term_ratio: f64,
    /// `(4C² + Q²) / (C² + Q²)`: the attention term alone.
    pub quadratic_term_ratio: f64,
    /// Ratio of the full cost model.
    pub formula_ratio: f64,
}

impl ScalingReport {
    pub fn table(&self) -> String {
        let mut s = String::from("    C     Q   sec/example        eps\n");
        for r in [&self.base, &self.doubled] {
            let _ = writeln!(
                s,
                "{:>5} {:>5}   {:>11.6} {:>10.1}",
                r.context_len, r.question_len, r.seconds_per_example, r.eps
            );
        }
        let _ = writeln!(s, "measured time ratio (2C / C)        {:.3}", self.measured_ratio);
        let _ = writeln!(s, "(C + Q)H^2 term ratio               {:.3}", self.linear_term_ratio);
        let _ = writeln!(s, "(C^2 + Q^2)H term ratio             {:.3}", self.quadratic_term_ratio);
        let _ = writeln!(s, "full cost model ratio (H = {:>4})    {:.3}", self.hidden, self.formula_ratio);
        s
    }
}

pub fn scaling_report(model: &Model, cfg: &BenchConfig) -> Result<ScalingReport> {
    let short = BenchInputs::new(model, cfg)?;
    let long = BenchInputs::new(
        model,
        &BenchConfig {
            context_len: 2 * cfg.context_len,
            ..*cfg
        },
    )?;
    // Alternate lengths so a slow stretch of wall time hits both.
    short.time(model)?;
    long.time(model)?;
    let (mut best_short, mut best_long) = (f64::INFINITY, f64::INFINITY);
    for _ in 0..cfg.repeats {
        best_short = best_short.min(short.time(model)?);
        best_long = best_long.min(long.time(model)?);
    }
    let (base, doubled) = (short.result(best_short), long.result(best_long));
    let (c, q, h) = (cfg.context_len as f64, cfg.question_len as f64, model.config().hidden as f64);
    let cost = |c: f64| (c + q) * h * h + (c * c + q * q) * h;
    Ok(ScalingReport {
        hidden: model.config().hidden,
        base,
        doubled,
        measured_ratio: doubled.seconds_per_example / base.seconds_per_example,
        linear_term_ratio: (2.0 * c + q) / (c + q),
        quadratic_term_ratio: (4.0 * c * c + q * q) / (c * c + q * q),
        formula_ratio: cost(2.0 * c) / cost(c),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::text::synthetic::{synthetic_examples, synthetic_vocab, SyntheticSpec};

    #[test]
    fn loss_values() {
        let mut g = Graph::new();
        let p = g.constant(Tensor::vector(vec![0.0, 1.0, 0.0]));
        let l = span_loss(&mut g, p, p, 1, 1, &[true; 3]).unwrap();
        assert_eq!(g.value(l).data(), &[0.0]);
        let u = g.constant(Tensor::vector(vec![0.25; 4]));
        let l = span_loss(&mut g, u, u, 0, 3, &[true; 4]).unwrap();
        assert!((g.value(l).data()[0] - 2.0 * 4f64.ln()).abs() < 1e-12);
        assert!(matches!(
            span_loss(&mut g, u, u, 0, 3, &[true, true, true, false]),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn zero_gradient_step_keeps_parameters() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        store.add_glorot("w", &[3, 4], 3, 4, &mut rng);
        let before = store.clone();
        let mut adam = Adam::new(&TrainConfig::default());
        adam.step(&mut store);
        for (id, p) in store.iter() {
            assert_eq!(p.value, before.get(id).value);
        }
    }

    #[test]
    fn l2_adds_penalty_and_gradient() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::vector(vec![1.0, -2.0]), true);
        store.add("frozen", Tensor::vector(vec![5.0]), false);
        let penalty = apply_l2(&mut store, 0.1);
        assert!((penalty - 0.5).abs() < 1e-15);
        assert_eq!(store.get(id).grad.as_ref().unwrap().data(), &[0.2, -0.4]);
    }

    fn tiny() -> (Model, Vec<QAExample>) {
        let spec = SyntheticSpec::default();
        let mut c = ModelConfig::preset("crossconv").unwrap();
        c.embedding_dim = 8;
        c.hidden = 8;
        (Model::build(&c, synthetic_vocab(&spec, 8), 1).unwrap(), synthetic_examples(&spec))
    }

    #[test]
    fn zero_steps_reports_initial_metrics() {
        let (mut m, exs) = tiny();
        let cfg = TrainConfig {
            max_steps: 0,
            ..TrainConfig::default()
        };
        let r = train(&mut m, &exs, None, &cfg, TrainOutputs::default()).unwrap();
        assert_eq!((r.steps, r.evals.len(), r.losses.len()), (0, 1, 0));
    }

    #[test]
    fn clipping_bounds_the_norm() {
        let (mut m, exs) = tiny();
        let (batches, _) = make_batches(&exs, m.vocab(), BatchConfig::default(), BatchMode::Train).unwrap();
        m.store_mut().zero_grad();
        accumulate_gradients(&mut m, &batches[0], None).unwrap();
        let pre = m.store_mut().clip_grad_norm(1e-3);
        assert!(pre > 1e-3);
        assert!(m.store().grad_norm() <= 1e-3 + 1e-6);
    }

    #[test]
    fn frozen_embedding_gets_no_gradient() {
        let (mut m, exs) = tiny();
        let (batches, _) = make_batches(&exs, m.vocab(), BatchConfig::default(), BatchMode::Train).unwrap();
        let before = m.store().value(m.store().find("embedding.frozen").unwrap()).clone();
        let mut adam = Adam::new(&TrainConfig::default());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        train_step(&mut m, &batches[0], &mut adam, &mut rng, Some(5.0)).unwrap();
        let id = m.store().find("embedding.frozen").unwrap();
        assert!(m.store().get(id).grad.is_none());
        assert_eq!(m.store().value(id), &before);
    }

    #[test]
    fn bench_reports_positive_eps() {
        let (m, _) = tiny();
        let cfg = BenchConfig {
            context_len: 16,
            question_len: 4,
            examples: 2,
            repeats: 1,
            seed: 0,
        };
        let r = scaling_report(&m, &cfg).unwrap();
        assert!(r.base.eps > 0.0 && r.doubled.eps > 0.0);
        assert!(r.table().contains("measured time ratio"));
    }
}
