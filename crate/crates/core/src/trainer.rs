//! Two-stage training of the adapter on the synthetic corpus.
//!
//! Stage 1 minimizes a frame-level cross-entropy only. Stage 2 adds the
//! transport regularizer: per utterance it computes the adapter output, runs
//! compression, evaluates the cross-entropy, solves the transport problem
//! against the unique transcript targets, forms `L_OT` and descends on
//! `L_total = L_CE + lambda_ot * L_OT`.
//!
//! The cross-entropy here stands in for an LLM's next-token loss: logits are a
//! fixed scale times the cosine similarity between each adapter output row and
//! every token embedding, and labels come from the ground-truth alignment.

use std::path::Path;

use serde::Serialize;

use crate::autodiff::{cosine_similarity_matrix, Backend, Eager, ReduceOp, Tape};
use crate::corpus::{Corpus, CorpusConfig, EmbeddingTable, SplitMix64, UtteranceSample};
use crate::error::{Error, Result};
use crate::loss::{ot_loss_on, DEFAULT_LAMBDA_SPR};
use crate::matrix::Matrix;
use crate::ot::{build_cost_on, sinkhorn_on, SinkhornConfig};
use crate::transform::{
    adapter_forward, adapter_forward_on, ot_compress, ot_compress_on, stack_frames, unique_targets,
    AdapterParams, TargetSource, DEFAULT_COMPRESSION_THRESHOLD, DEFAULT_UNIQUENESS_THRESHOLD,
};

pub const DEFAULT_LAMBDA_OT: f64 = 0.3;
pub const DEFAULT_LOGIT_SCALE: f64 = 20.0;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lambda_ot: f64,
    pub lambda_spr: f64,
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    pub learning_rate: f64,
    pub lr_min: f64,
    pub k: usize,
    pub d_h: usize,
    pub sinkhorn: SinkhornConfig,
    pub merge_threshold: f64,
    pub drop_threshold: f64,
    pub uniqueness_threshold: f64,
    pub logit_scale: f64,
    pub seed: u64,
    /// Also run Stage 2 from the untrained adapter, for warm-start comparisons.
    pub compare_cold_start: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda_ot: DEFAULT_LAMBDA_OT,
            lambda_spr: DEFAULT_LAMBDA_SPR,
            stage1_epochs: 2,
            stage2_epochs: 3,
            learning_rate: 0.5,
            lr_min: 1e-3,
            k: 5,
            d_h: 2048,
            sinkhorn: SinkhornConfig::default(),
            merge_threshold: DEFAULT_COMPRESSION_THRESHOLD,
            drop_threshold: DEFAULT_COMPRESSION_THRESHOLD,
            uniqueness_threshold: DEFAULT_UNIQUENESS_THRESHOLD,
            logit_scale: DEFAULT_LOGIT_SCALE,
            seed: 0,
            compare_cold_start: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.learning_rate > 0.0 && self.lr_min > 0.0) {
            return bad("learning rates must be positive".into());
        }
        if self.lr_min > self.learning_rate {
            return bad("lr_min must not exceed learning_rate".into());
        }
        if !(self.lambda_ot >= 0.0 && self.lambda_spr >= 0.0) {
            return bad("loss weights must be nonnegative".into());
        }
        if self.k == 0 || self.d_h == 0 {
            return bad("k and d_h must be positive".into());
        }
        for (name, t) in [
            ("merge_threshold", self.merge_threshold),
            ("drop_threshold", self.drop_threshold),
            ("uniqueness_threshold", self.uniqueness_threshold),
        ] {
            if !(t > 0.0 && t <= 1.0) {
                return bad(format!("{name} must lie in (0, 1], got {t}"));
            }
        }
        if !(self.logit_scale >= 0.0) {
            return bad("logit_scale must be nonnegative".into());
        }
        self.sinkhorn.validate()
    }
}

/// Label of each `k`-frame stack: the majority token, ties to the one that occurs first.
pub fn frame_labels(frame_to_token: &[usize], k: usize) -> Vec<usize> {
    frame_to_token
        .chunks_exact(k)
        .map(|chunk| {
            let mut best = (chunk[0], 0);
            for &t in chunk {
                let count = chunk.iter().filter(|&&x| x == t).count();
                if count > best.1 {
                    best = (t, count);
                }
            }
            best.0
        })
        .collect()
}

/// Mean softmax cross-entropy of `scale * cos(f_i, table)` against `labels`.
pub fn ce_loss_on<B: Backend>(
    b: &mut B,
    f: &B::Var,
    table: &B::Var,
    labels: &[usize],
    scale: f64,
) -> Result<B::Var> {
    let (n, vocab) = (b.value(f).rows(), b.value(table).rows());
    if labels.len() != n {
        return Err(Error::Contract(format!("{} labels for {n} frames", labels.len())));
    }
    if n == 0 {
        return Err(Error::Degenerate("cross-entropy over zero frames".into()));
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= vocab) {
        return Err(Error::Contract(format!("label {l} outside vocabulary of {vocab}")));
    }
    let sim = cosine_similarity_matrix(b, f, table)?;
    let logits = b.scale(&sim, scale)?;
    let lse = b.reduce(ReduceOp::LogSumExpRows, &logits)?;
    let onehot = b.constant(Matrix::from_fn(n, vocab, |i, j| if labels[i] == j { 1.0 } else { 0.0 }));
    let picked = b.mul(&logits, &onehot)?;
    let picked = b.sum_rows(&picked)?;
    let nll = b.sub(&lse, &picked)?;
    b.mean(&nll)
}

pub fn ce_loss(f: &Matrix, table: &EmbeddingTable, labels: &[usize], scale: f64) -> Result<f64> {
    Ok(ce_loss_on(&mut Eager, f, &table.rows, labels, scale)?.get(0, 0))
}

/// Per-utterance quantities that do not depend on the adapter.
#[derive(Debug, Clone)]
pub struct PreparedSample {
    pub stacked: Matrix,
    pub labels: Vec<usize>,
    pub targets: Matrix,
    /// Token id for every target row; the pad row carries the pad id.
    pub target_tokens: Vec<usize>,
    pub pad_row_index: usize,
    pub transcript: Vec<usize>,
}

pub fn prepare_sample(sample: &UtteranceSample, table: &EmbeddingTable, cfg: &TrainConfig) -> Result<PreparedSample> {
    let stacked = stack_frames(&sample.raw_speech, cfg.k)?;
    let labels = frame_labels(&sample.frame_to_token, cfg.k);
    let set = unique_targets(&table.lookup(&sample.tokens), table.pad(), cfg.uniqueness_threshold)?;
    let target_tokens = set
        .sources
        .iter()
        .enumerate()
        .map(|(row, s)| match s {
            _ if row == set.pad_row_index => table.pad_id,
            TargetSource::Transcript(i) => sample.tokens[*i],
            TargetSource::Pad => table.pad_id,
        })
        .collect();
    Ok(PreparedSample {
        stacked,
        labels,
        targets: set.embeddings,
        target_tokens,
        pad_row_index: set.pad_row_index,
        transcript: sample.tokens.clone(),
    })
}

pub fn prepare_all(samples: &[UtteranceSample], table: &EmbeddingTable, cfg: &TrainConfig) -> Result<Vec<PreparedSample>> {
    samples.iter().map(|s| prepare_sample(s, table, cfg)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepReport {
    pub l_ce: f64,
    pub l_cost: f64,
    pub l_spr: f64,
    pub l_ot: f64,
    pub l_total: f64,
    pub sinkhorn_iterations: usize,
    pub marginal_error: f64,
    pub sinkhorn_converged: bool,
    /// Rows left after compression of the adapter output.
    pub compressed_len: usize,
    pub learning_rate: f64,
}

/// Cosine-decayed step size from `peak` at step 0 to `min` at step `total`.
pub fn cosine_lr(peak: f64, min: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return peak;
    }
    let progress = (step as f64 / total as f64).min(1.0);
    min + 0.5 * (peak - min) * (1.0 + (std::f64::consts::PI * progress).cos())
}

fn as_divergence(sample: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::NonFinite(op) => Error::Divergence {
            sample,
            message: format!("non-finite value in {op}"),
        },
        other => other,
    }
}

/// Gradients of the cross-entropy alone, in `w1, b1, w2, b2` order.
pub fn stage1_step(
    sample: &PreparedSample,
    params: &AdapterParams,
    table: &EmbeddingTable,
    cfg: &TrainConfig,
) -> Result<(Vec<Matrix>, StepReport)> {
    let mut tape = Tape::new();
    let vars = params.register(&mut tape);
    let h = tape.constant(sample.stacked.clone());
    let table_var = tape.constant(table.rows.clone());
    let f = adapter_forward_on(&mut tape, &h, &vars)?;
    let ce = ce_loss_on(&mut tape, &f, &table_var, &sample.labels, cfg.logit_scale)?;
    let l_ce = tape.value(&ce).get(0, 0);
    let grads = tape.backward(ce)?;
    Ok((
        grads.into_vec(),
        StepReport {
            l_ce,
            l_cost: 0.0,
            l_spr: 0.0,
            l_ot: 0.0,
            l_total: l_ce,
            sinkhorn_iterations: 0,
            marginal_error: 0.0,
            sinkhorn_converged: true,
            compressed_len: sample.stacked.rows(),
            learning_rate: 0.0,
        },
    ))
}

/// One Stage-2 update direction.
///
/// Computes the adapter output `F`, compresses it (reported only, not part of
/// the loss), takes the cross-entropy on `F`, solves for the plan between `F`
/// and the unique targets, forms `L_OT`, and differentiates
/// `L_CE + lambda_ot * L_OT`.
pub fn stage2_step(
    sample: &PreparedSample,
    params: &AdapterParams,
    table: &EmbeddingTable,
    cfg: &TrainConfig,
) -> Result<(Vec<Matrix>, StepReport)> {
    let mut tape = Tape::new();
    let vars = params.register(&mut tape);
    let h = tape.constant(sample.stacked.clone());
    let table_var = tape.constant(table.rows.clone());
    let targets = tape.constant(sample.targets.clone());

    let f = adapter_forward_on(&mut tape, &h, &vars)?;
    let (_, compression) =
        ot_compress_on(&mut tape, &f, table.pad(), cfg.merge_threshold, cfg.drop_threshold)?;
    let ce = ce_loss_on(&mut tape, &f, &table_var, &sample.labels, cfg.logit_scale)?;
    let cost = build_cost_on(&mut tape, &f, &targets)?;
    let plan = sinkhorn_on(&mut tape, &cost, &cfg.sinkhorn)?;
    let ot = ot_loss_on(&mut tape, &plan.gamma, &cost, cfg.lambda_spr)?;
    let weighted = tape.scale(&ot.l_ot, cfg.lambda_ot)?;
    let total = tape.add(&ce, &weighted)?;

    let parts = ot.breakdown(&tape, cfg.lambda_spr);
    let report = StepReport {
        l_ce: tape.value(&ce).get(0, 0),
        l_cost: parts.l_cost,
        l_spr: parts.l_spr,
        l_ot: parts.l_ot,
        l_total: tape.value(&total).get(0, 0),
        sinkhorn_iterations: plan.iterations_used,
        marginal_error: plan.marginal_error,
        sinkhorn_converged: plan.converged,
        compressed_len: compression.after_drop,
        learning_rate: 0.0,
    };
    let grads = tape.backward(total)?;
    Ok((grads.into_vec(), report))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    One,
    Two,
}

/// A step report tagged with its position in the run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepRecord {
    pub stage: Stage,
    pub epoch: usize,
    pub sample: usize,
    pub step: usize,
    #[serde(flatten)]
    pub report: StepReport,
}

/// Runs `epochs` passes of per-utterance gradient descent. `first_step` and
/// `total_steps` place these updates on the cosine schedule.
#[allow(clippy::too_many_arguments)]
fn descend(
    stage: Stage,
    samples: &[PreparedSample],
    mut params: AdapterParams,
    table: &EmbeddingTable,
    cfg: &TrainConfig,
    epochs: usize,
    first_step: usize,
    total_steps: usize,
) -> Result<(AdapterParams, Vec<StepRecord>)> {
    let mut records = Vec::with_capacity(epochs * samples.len());
    let mut step = first_step;
    for epoch in 0..epochs {
        for (i, sample) in samples.iter().enumerate() {
            let wrap = as_divergence(i);
            let (grads, mut report) = match stage {
                Stage::One => stage1_step(sample, &params, table, cfg),
                Stage::Two => stage2_step(sample, &params, table, cfg),
            }
            .map_err(&wrap)?;
            if !report.l_total.is_finite() {
                return Err(Error::Divergence {
                    sample: i,
                    message: format!("loss is {}", report.l_total),
                });
            }
            let rate = cosine_lr(cfg.learning_rate, cfg.lr_min, step, total_steps);
            params.descend(&grads, rate);
            params.validate().map_err(&wrap)?;
            report.learning_rate = rate;
            records.push(StepRecord {
                stage,
                epoch,
                sample: i,
                step,
                report,
            });
            step += 1;
        }
    }
    Ok((params, records))
}

fn total_steps(samples: usize, cfg: &TrainConfig) -> usize {
    samples * (cfg.stage1_epochs + cfg.stage2_epochs)
}

/// Stage 1: cross-entropy only, no transport and no compression.
pub fn stage1_train(
    samples: &[PreparedSample],
    params: AdapterParams,
    table: &EmbeddingTable,
    cfg: &TrainConfig,
) -> Result<(AdapterParams, Vec<StepRecord>)> {
    cfg.validate()?;
    let total = total_steps(samples.len(), cfg);
    descend(Stage::One, samples, params, table, cfg, cfg.stage1_epochs, 0, total)
}

/// Stage 2, continuing the learning-rate schedule where Stage 1 stopped.
pub fn stage2_train(
    samples: &[PreparedSample],
    params: AdapterParams,
    table: &EmbeddingTable,
    cfg: &TrainConfig,
) -> Result<(AdapterParams, Vec<StepRecord>)> {
    cfg.validate()?;
    let total = total_steps(samples.len(), cfg);
    let first = samples.len() * cfg.stage1_epochs;
    descend(Stage::Two, samples, params, table, cfg, cfg.stage2_epochs, first, total)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EvalReport {
    /// Fraction of adapter frames whose plan-row argmax target is their ground-truth token.
    pub alignment_accuracy: f64,
    /// The same fraction restricted to frames labelled pad.
    pub pad_alignment_accuracy: f64,
    /// Expected accuracy of a uniformly random target choice.
    pub chance_accuracy: f64,
    pub mean_transport_cost: f64,
    pub mean_sparsity_loss: f64,
    pub token_error_rate_after_compression: f64,
    pub mean_compression_ratio: f64,
    /// Utterances whose compressed sequence came out empty (scored as full errors).
    pub empty_compressions: usize,
    pub unconverged_plans: usize,
    pub samples: usize,
    pub frames: usize,
}

/// Levenshtein distance.
pub fn edit_distance(a: &[usize], b: &[usize]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

fn collapse_repeats(seq: impl IntoIterator<Item = usize>) -> Vec<usize> {
    let mut out: Vec<usize> = Vec::new();
    for t in seq {
        if out.last() != Some(&t) {
            out.push(t);
        }
    }
    out
}

/// Scores an adapter on prepared samples.
///
/// The compressed sequence is decoded by nearest token embedding, pad
/// predictions are removed and consecutive repeats collapsed before comparing
/// against the transcript, itself with consecutive repeats collapsed.
pub fn evaluate(
    samples: &[PreparedSample],
    params: &AdapterParams,
    table: &EmbeddingTable,
    cfg: &TrainConfig,
) -> Result<EvalReport> {
    let mut correct = 0usize;
    let mut frames = 0usize;
    let mut pad_correct = 0usize;
    let mut pad_frames = 0usize;
    let mut chance = 0.0;
    let mut cost_sum = 0.0;
    let mut spr_sum = 0.0;
    let mut ter_sum = 0.0;
    let mut ratio_sum = 0.0;
    let mut empty = 0usize;
    let mut unconverged = 0usize;

    for sample in samples {
        let f = adapter_forward(&sample.stacked, params)?;
        let mut e = Eager;
        let cost = build_cost_on(&mut e, &f, &sample.targets)?;
        let plan = sinkhorn_on(&mut e, &cost, &cfg.sinkhorn)?;
        if !plan.converged {
            unconverged += 1;
        }
        let ot = ot_loss_on(&mut e, &plan.gamma, &cost, cfg.lambda_spr)?.breakdown(&e, cfg.lambda_spr);
        cost_sum += ot.l_cost;
        spr_sum += ot.l_spr;

        for (row, &j) in plan.gamma.row_argmax().iter().enumerate() {
            let label = sample.labels[row];
            let hit = sample.target_tokens[j] == label
                && ((label == table.pad_id) == (j == sample.pad_row_index));
            frames += 1;
            correct += usize::from(hit);
            chance += 1.0 / sample.targets.rows() as f64;
            if label == table.pad_id {
                pad_frames += 1;
                pad_correct += usize::from(hit);
            }
        }

        let (k, rep) = ot_compress(&f, table.pad(), cfg.merge_threshold, cfg.drop_threshold)?;
        ratio_sum += rep.after_drop as f64 / rep.input_length as f64;
        let reference = collapse_repeats(sample.transcript.iter().copied());
        if k.rows() == 0 {
            empty += 1;
            ter_sum += 1.0;
            continue;
        }
        let hyp = collapse_repeats(
            k.row_iter()
                .map(|r| table.nearest(r))
                .filter(|&t| t != table.pad_id),
        );
        ter_sum += edit_distance(&hyp, &reference) as f64 / reference.len().max(1) as f64;
    }
    let n = samples.len().max(1) as f64;
    Ok(EvalReport {
        alignment_accuracy: correct as f64 / frames.max(1) as f64,
        pad_alignment_accuracy: if pad_frames == 0 { 1.0 } else { pad_correct as f64 / pad_frames as f64 },
        chance_accuracy: chance / frames.max(1) as f64,
        mean_transport_cost: cost_sum / n,
        mean_sparsity_loss: spr_sum / n,
        token_error_rate_after_compression: (ter_sum / n).min(1.0),
        mean_compression_ratio: ratio_sum / n,
        empty_compressions: empty,
        unconverged_plans: unconverged,
        samples: samples.len(),
        frames,
    })
}

/// Corpus plus training settings, as read from a config file.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunConfig {
    pub corpus: CorpusConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.corpus.validate()?;
        self.train.validate()
    }

    /// `key = value` pairs in canonical order, the same keys [`parse_config`] accepts.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let c = &self.corpus;
        let t = &self.train;
        vec![
            ("corpus.seed", c.seed.to_string()),
            ("corpus.vocab_size", c.vocab_size.to_string()),
            ("corpus.d_l", c.d_l.to_string()),
            ("corpus.d_s", c.d_s.to_string()),
            ("corpus.utterance_count", c.utterance_count.to_string()),
            ("corpus.eval_count", c.eval_count.to_string()),
            ("corpus.token_len_min", c.token_len_range.0.to_string()),
            ("corpus.token_len_max", c.token_len_range.1.to_string()),
            ("corpus.repeat_min", c.repeat_range.0.to_string()),
            ("corpus.repeat_max", c.repeat_range.1.to_string()),
            ("corpus.pad_insert_prob", c.pad_insert_prob.to_string()),
            ("corpus.noise_sigma", c.noise_sigma.to_string()),
            ("lambda_ot", t.lambda_ot.to_string()),
            ("lambda_spr", t.lambda_spr.to_string()),
            ("stage1_epochs", t.stage1_epochs.to_string()),
            ("stage2_epochs", t.stage2_epochs.to_string()),
            ("learning_rate", t.learning_rate.to_string()),
            ("lr_min", t.lr_min.to_string()),
            ("k", t.k.to_string()),
            ("d_h", t.d_h.to_string()),
            ("sinkhorn.epsilon", t.sinkhorn.epsilon.to_string()),
            ("sinkhorn.max_iterations", t.sinkhorn.max_iterations.to_string()),
            ("sinkhorn.tolerance", t.sinkhorn.tolerance.to_string()),
            ("sinkhorn.log_domain", t.sinkhorn.log_domain.to_string()),
            ("merge_threshold", t.merge_threshold.to_string()),
            ("drop_threshold", t.drop_threshold.to_string()),
            ("uniqueness_threshold", t.uniqueness_threshold.to_string()),
            ("logit_scale", t.logit_scale.to_string()),
            ("seed", t.seed.to_string()),
            ("compare_cold_start", t.compare_cold_start.to_string()),
        ]
    }
}

fn parse_value<T: std::str::FromStr>(key: &str, raw: &str) -> std::result::Result<T, String> {
    raw.parse()
        .map_err(|_| format!("invalid value {raw:?} for key {key:?}"))
}

fn apply_key(cfg: &mut RunConfig, key: &str, raw: &str) -> std::result::Result<(), String> {
    let c = &mut cfg.corpus;
    let t = &mut cfg.train;
    match key {
        "corpus.seed" => c.seed = parse_value(key, raw)?,
        "corpus.vocab_size" => c.vocab_size = parse_value(key, raw)?,
        "corpus.d_l" => c.d_l = parse_value(key, raw)?,
        "corpus.d_s" => c.d_s = parse_value(key, raw)?,
        "corpus.utterance_count" => c.utterance_count = parse_value(key, raw)?,
        "corpus.eval_count" => c.eval_count = parse_value(key, raw)?,
        "corpus.token_len_min" => c.token_len_range.0 = parse_value(key, raw)?,
        "corpus.token_len_max" => c.token_len_range.1 = parse_value(key, raw)?,
        "corpus.repeat_min" => c.repeat_range.0 = parse_value(key, raw)?,
        "corpus.repeat_max" => c.repeat_range.1 = parse_value(key, raw)?,
        "corpus.pad_insert_prob" => c.pad_insert_prob = parse_value(key, raw)?,
        "corpus.noise_sigma" => c.noise_sigma = parse_value(key, raw)?,
        "lambda_ot" => t.lambda_ot = parse_value(key, raw)?,
        "lambda_spr" => t.lambda_spr = parse_value(key, raw)?,
        "stage1_epochs" => t.stage1_epochs = parse_value(key, raw)?,
        "stage2_epochs" => t.stage2_epochs = parse_value(key, raw)?,
        "learning_rate" => t.learning_rate = parse_value(key, raw)?,
        "lr_min" => t.lr_min = parse_value(key, raw)?,
        "k" => t.k = parse_value(key, raw)?,
        "d_h" => t.d_h = parse_value(key, raw)?,
        "sinkhorn.epsilon" => t.sinkhorn.epsilon = parse_value(key, raw)?,
        "sinkhorn.max_iterations" => t.sinkhorn.max_iterations = parse_value(key, raw)?,
        "sinkhorn.tolerance" => t.sinkhorn.tolerance = parse_value(key, raw)?,
        "sinkhorn.log_domain" => t.sinkhorn.log_domain = parse_value(key, raw)?,
        "merge_threshold" => t.merge_threshold = parse_value(key, raw)?,
        "drop_threshold" => t.drop_threshold = parse_value(key, raw)?,
        "uniqueness_threshold" => t.uniqueness_threshold = parse_value(key, raw)?,
        "logit_scale" => t.logit_scale = parse_value(key, raw)?,
        "seed" => t.seed = parse_value(key, raw)?,
        "compare_cold_start" => t.compare_cold_start = parse_value(key, raw)?,
        _ => return Err(format!("unknown key {key:?}")),
    }
    Ok(())
}

/// Parses `key = value` lines over the defaults. `#` starts a comment.
pub fn parse_config(text: &str, path: &Path) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    let mut seen: Vec<String> = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        let err = |message: String| Error::ConfigLine {
            path: path.to_path_buf(),
            line: line_no,
            message,
        };
        let content = line.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let (key, value) = content
            .split_once('=')
            .ok_or_else(|| err(format!("expected key = value, got {content:?}")))?;
        let (key, value) = (key.trim(), value.trim());
        if seen.iter().any(|k| k == key) {
            return Err(err(format!("duplicate key {key:?}")));
        }
        apply_key(&mut cfg, key, value).map_err(err)?;
        seen.push(key.to_string());
    }
    cfg.validate().map_err(|e| match e {
        Error::Config(message) => Error::ConfigLine {
            path: path.to_path_buf(),
            line: 0,
            message,
        },
        other => other,
    })?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config(&text, path)
}

/// Everything produced by [`run_two_stage`].
#[derive(Debug, Clone)]
pub struct TrainingRun {
    pub initial: AdapterParams,
    pub stage1: AdapterParams,
    pub stage2: Option<AdapterParams>,
    pub records: Vec<StepRecord>,
    pub stage1_eval: EvalReport,
    pub stage2_eval: Option<EvalReport>,
    /// Stage 2 started from `initial` instead of the Stage-1 checkpoint.
    pub cold_stage2_eval: Option<EvalReport>,
}

pub fn initial_params(corpus: &Corpus, cfg: &TrainConfig) -> AdapterParams {
    let mut rng = SplitMix64::new(cfg.seed);
    AdapterParams::init(&mut rng, corpus.config.d_s * cfg.k, cfg.d_h, corpus.config.d_l)
}

/// Generates nothing; trains on `corpus.train` and evaluates on `corpus.eval`.
pub fn run_two_stage(corpus: &Corpus, cfg: &TrainConfig) -> Result<TrainingRun> {
    cfg.validate()?;
    let train = prepare_all(&corpus.train, &corpus.table, cfg)?;
    let eval = prepare_all(&corpus.eval, &corpus.table, cfg)?;
    let initial = initial_params(corpus, cfg);

    let (stage1, mut records) = stage1_train(&train, initial.clone(), &corpus.table, cfg)?;
    let stage1_eval = evaluate(&eval, &stage1, &corpus.table, cfg)?;

    let (stage2, stage2_eval) = if cfg.stage2_epochs > 0 {
        let (p, r) = stage2_train(&train, stage1.clone(), &corpus.table, cfg)?;
        records.extend(r);
        let ev = evaluate(&eval, &p, &corpus.table, cfg)?;
        (Some(p), Some(ev))
    } else {
        (None, None)
    };

    let cold_stage2_eval = if cfg.compare_cold_start && cfg.stage2_epochs > 0 {
        let (p, _) = stage2_train(&train, initial.clone(), &corpus.table, cfg)?;
        Some(evaluate(&eval, &p, &corpus.table, cfg)?)
    } else {
        None
    };

    Ok(TrainingRun {
        initial,
        stage1,
        stage2,
        records,
        stage1_eval,
        stage2_eval,
        cold_stage2_eval,
    })
}
