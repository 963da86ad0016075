//! Training loop: Adam, inverse square root schedule, validation with early
//! stopping, a ring of recent checkpoints and checkpoint averaging.

use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{
    build_anchored_batches, build_naive_dataset, build_tagged_batches, AnchoredBatch, CorpusError, EncodedCorpus,
    KeySchedule, TaggedExample,
};
use crate::eval::{corpus_bleu, Smoothing};
use crate::exec::Execution;
use crate::losses::{cipherdaug_loss, naive_multisource_loss, sequence_nll, DropoutMode, LossBreakdown, LossConfig, LossError};
use crate::model::{greedy, save_checkpoint, Checkpoint, CheckpointError, ModelParams, Scalar, Transformer};
use crate::subword::{tag_token, Vocab};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("non-finite loss or gradient at step {step}")]
    NonFinite { step: u64, dump: String },
    #[error("cannot average: {0}")]
    Average(String),
    #[error("no training examples fit the model's max_len")]
    NoData,
    #[error("config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Anchor sources only.
    Baseline,
    /// Tagged union of the anchor and every cipher direction.
    Naive,
    /// As `Naive`, plus cipher-to-source directions.
    NaivePivot,
    /// Anchored batches with the agreement term.
    #[default]
    Cipherdaug,
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.replace('-', "_").as_str() {
            "baseline" => Ok(Mode::Baseline),
            "naive" => Ok(Mode::Naive),
            "naive_pivot" => Ok(Mode::NaivePivot),
            "cipherdaug" => Ok(Mode::Cipherdaug),
            _ => Err(format!("unknown mode {s:?}")),
        }
    }
}

impl Mode {
    /// Whether sources carry a leading target-language tag.
    pub fn tagged(self) -> bool {
        matches!(self, Mode::Naive | Mode::NaivePivot)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub peak_lr: f64,
    pub warmup_steps: u64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub max_steps: u64,
    /// Validations without improvement tolerated before stopping.
    pub patience: u64,
    pub validate_every: u64,
    pub checkpoint_keep: usize,
    /// Checkpoints averaged at the end.
    pub average_last: usize,
    pub seed: u64,
    pub mode: Mode,
    pub batch_tokens: usize,
    pub key_schedule: KeySchedule,
    pub log_every: u64,
    /// Also greedy-decode the dev set at each validation.
    pub dev_bleu: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            peak_lr: 6e-4,
            warmup_steps: 8000,
            adam_beta1: 0.9,
            adam_beta2: 0.98,
            adam_eps: 1e-9,
            max_steps: 100_000,
            patience: 15,
            validate_every: 1000,
            checkpoint_keep: 5,
            average_last: 5,
            seed: 1,
            mode: Mode::Cipherdaug,
            batch_tokens: 4096,
            key_schedule: KeySchedule::RoundRobin,
            log_every: 100,
            dev_bleu: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.into()));
        if !(self.peak_lr > 0.0) {
            return bad("peak_lr must be positive");
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return bad("adam betas must be in [0, 1)");
        }
        if self.validate_every == 0 || self.log_every == 0 {
            return bad("validate_every and log_every must be positive");
        }
        if self.checkpoint_keep == 0 || self.average_last == 0 || self.average_last > self.checkpoint_keep {
            return bad("need 1 <= average_last <= checkpoint_keep");
        }
        Ok(())
    }
}

/// Linear warmup to `peak` at step `warmup`, then `peak·sqrt(warmup/step)`.
/// A warmup of 0 behaves like 1.
pub fn lr_schedule(step: u64, peak: f64, warmup: u64) -> f64 {
    let step = step.max(1) as f64;
    let warmup = warmup.max(1) as f64;
    if step < warmup {
        peak * step / warmup
    } else {
        peak * (warmup / step).sqrt()
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam<F> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: ModelParams<F>,
    pub v: ModelParams<F>,
}

impl<F: Scalar> Adam<F> {
    pub fn new(like: &ModelParams<F>, beta1: f64, beta2: f64, eps: f64) -> Self {
        Adam {
            beta1,
            beta2,
            eps,
            t: 0,
            m: like.zeros_like(),
            v: like.zeros_like(),
        }
    }

    pub fn step(&mut self, params: &mut ModelParams<F>, grads: &ModelParams<F>, lr: f64) {
        self.t += 1;
        let (b1, b2) = (F::of(self.beta1), F::of(self.beta2));
        let c1 = F::of(1.0 - self.beta1.powi(self.t as i32));
        let c2 = F::of(1.0 - self.beta2.powi(self.t as i32));
        let (lr, eps) = (F::of(lr), F::of(self.eps));
        let one = F::one();
        for (((p, g), m), v) in params
            .tensors
            .iter_mut()
            .zip(&grads.tensors)
            .zip(&mut self.m.tensors)
            .zip(&mut self.v.tensors)
        {
            for i in 0..p.data.len() {
                let gi = g.data[i];
                m.data[i] = b1 * m.data[i] + (one - b1) * gi;
                v.data[i] = b2 * v.data[i] + (one - b2) * gi * gi;
                let mh = m.data[i] / c1;
                let vh = v.data[i] / c2;
                p.data[i] -= lr * mh / (vh.sqrt() + eps);
            }
        }
    }
}

/// Arithmetic mean of parameter sets with identical layout.
pub fn average_checkpoints<F: Scalar>(ckpts: &[&ModelParams<F>]) -> Result<ModelParams<F>, TrainError> {
    let first = ckpts.first().ok_or_else(|| TrainError::Average("no checkpoints".into()))?;
    let mut acc = first.zeros_like();
    for c in ckpts {
        first
            .check_same_layout(c)
            .map_err(|e| TrainError::Average(e.to_string()))?;
        acc.add_assign(c);
    }
    acc.scale(F::of(1.0 / ckpts.len() as f64));
    Ok(acc)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RecordKind {
    Train,
    Dev,
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub kind: RecordKind,
    pub step: u64,
    pub lr: f64,
    /// Mean over the logging interval (train records) or zero (dev records).
    pub loss: LossBreakdown,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dev_nll: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dev_bleu: Option<f64>,
    /// Set on dev records that improved the best validation loss.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub best: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MaxSteps,
    Patience,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<F> {
    pub steps: u64,
    pub stop: StopReason,
    pub best_dev_nll: f64,
    pub best_step: u64,
    pub log: Vec<LogRecord>,
    /// Most recent validation-time snapshots, oldest first.
    pub checkpoints: Vec<(u64, ModelParams<F>)>,
    /// Mean of the last `average_last` snapshots.
    pub averaged: ModelParams<F>,
    /// Training examples dropped for exceeding the model's max_len.
    pub dropped: usize,
}

/// Training and validation data sharing one vocabulary.
#[derive(Debug, Clone, Copy)]
pub struct TrainData<'a> {
    pub train: &'a EncodedCorpus,
    pub dev: &'a EncodedCorpus,
    pub vocab: &'a Vocab,
}

/// Side effects of a run beyond the returned outcome.
#[derive(Default)]
pub struct TrainOptions<'a> {
    pub exec: Execution,
    /// Writes `checkpoint_<step>.ckpt` files (pruned to the ring size) and
    /// `checkpoint_last.ckpt` / `checkpoint_avg.ckpt` at the end.
    pub checkpoint_dir: Option<PathBuf>,
    /// Text stored in every written checkpoint.
    pub config_echo: String,
    pub on_record: Option<&'a mut dyn FnMut(&LogRecord)>,
}

/// The tag id prepended to sources in tagged modes.
pub fn source_prefix(mode: Mode, vocab: &Vocab, tgt_lang: &str) -> Option<u32> {
    mode.tagged().then(|| vocab.id(&tag_token(tgt_lang))).flatten()
}

/// Drops examples whose sources or target do not fit `max_len`.
/// One position is reserved for a tag and one for bos.
pub fn fit_to_length(corpus: &EncodedCorpus, max_len: usize) -> (EncodedCorpus, usize) {
    let keep: Vec<usize> = (0..corpus.len())
        .filter(|&i| {
            corpus.targets[i].len() < max_len
                && corpus.anchors[i].len() < max_len
                && corpus.views.iter().all(|v| v.sources[i].len() < max_len)
        })
        .collect();
    let pick = |xs: &Vec<Vec<u32>>| keep.iter().map(|&i| xs[i].clone()).collect::<Vec<_>>();
    let mut out = corpus.clone();
    out.anchors = pick(&corpus.anchors);
    out.targets = pick(&corpus.targets);
    for (o, v) in out.views.iter_mut().zip(&corpus.views) {
        o.sources = pick(&v.sources);
    }
    (out, corpus.len() - keep.len())
}

enum Batches {
    Anchored(Vec<AnchoredBatch>),
    Tagged(Vec<Vec<usize>>),
}

impl Batches {
    fn len(&self) -> usize {
        match self {
            Batches::Anchored(b) => b.len(),
            Batches::Tagged(b) => b.len(),
        }
    }
}

struct Plan<'a> {
    mode: Mode,
    anchored: EncodedCorpus,
    tagged: Vec<TaggedExample>,
    tags: Vec<u32>,
    cfg: &'a TrainConfig,
}

impl Plan<'_> {
    fn epoch(&self, epoch: u64) -> Result<Batches, TrainError> {
        Ok(match self.mode {
            Mode::Baseline | Mode::Cipherdaug => Batches::Anchored(build_anchored_batches(
                &self.anchored,
                self.cfg.batch_tokens,
                self.cfg.seed,
                epoch,
                self.cfg.key_schedule,
            )?),
            Mode::Naive | Mode::NaivePivot => {
                Batches::Tagged(build_tagged_batches(&self.tagged, self.cfg.batch_tokens, self.cfg.seed, epoch)?)
            }
        })
    }
}

fn batch_dump(batches: &Batches, k: usize, plan: &Plan) -> String {
    match batches {
        Batches::Anchored(b) => {
            let b = &b[k];
            serde_json::json!({
                "keys": b.keys.iter().map(|k| k.0).collect::<Vec<_>>(),
                "examples": b.examples.iter().map(|e| serde_json::json!({
                    "index": e.index, "anchor": e.anchor, "ciphers": e.ciphers, "target": e.target,
                })).collect::<Vec<_>>(),
            })
            .to_string()
        }
        Batches::Tagged(b) => serde_json::json!({
            "examples": b[k].iter().map(|&i| {
                let e = &plan.tagged[i];
                serde_json::json!({"index": e.index, "source": e.source, "target": e.target})
            }).collect::<Vec<_>>(),
        })
        .to_string(),
    }
}

/// Per-token dev NLL (no smoothing, no dropout) of the plain sources.
pub fn dev_nll<F: Scalar>(model: &Transformer<F>, dev: &EncodedCorpus, prefix: Option<u32>, exec: Execution) -> Result<f64, TrainError> {
    let parts = exec.map_range(dev.len(), |i| {
        let src = with_prefix(prefix, &dev.anchors[i]);
        sequence_nll(model, &src, &dev.targets[i])
    });
    let (mut sum, mut n) = (0.0, 0usize);
    for p in parts {
        let (s, c) = p?;
        sum += s;
        n += c;
    }
    Ok(if n == 0 { 0.0 } else { sum / n as f64 })
}

fn with_prefix(prefix: Option<u32>, src: &[u32]) -> Vec<u32> {
    prefix.into_iter().chain(src.iter().copied()).collect()
}

/// Greedy-decodes `sources` and scores the id sequences against `targets` with corpus BLEU.
pub fn id_bleu<F: Scalar>(
    model: &Transformer<F>,
    sources: &[Vec<u32>],
    targets: &[Vec<u32>],
    prefix: Option<u32>,
    exec: Execution,
) -> Result<f64, TrainError> {
    let max_len = model.config.max_len.saturating_sub(1);
    let hyps = exec.map_range(sources.len(), |i| {
        let src = with_prefix(prefix, &sources[i]);
        let limit = (2 * targets[i].len() + 10).min(max_len);
        greedy(model, &src, limit, 1.0).map(|h| ids_to_text(&h.tokens))
    });
    let hyps: Vec<String> = hyps.into_iter().collect::<Result<_, _>>().map_err(LossError::from)?;
    let refs: Vec<String> = targets.iter().map(|t| ids_to_text(t)).collect();
    Ok(corpus_bleu(&hyps, &refs, 4, Smoothing::Exp)
        .map(|r| r.bleu)
        .unwrap_or(0.0))
}

fn ids_to_text(ids: &[u32]) -> String {
    ids.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(" ")
}

/// Runs the training loop in the configured mode.
///
/// Steps count from 1. Every `validate_every` steps the dev NLL is computed
/// and a snapshot enters the ring; training stops after `patience`
/// consecutive validations without improvement or at `max_steps`.
pub fn train<F: Scalar>(
    model: &mut Transformer<F>,
    data: TrainData,
    cfg: &TrainConfig,
    loss_cfg: &LossConfig,
    mut opts: TrainOptions,
) -> Result<TrainOutcome<F>, TrainError> {
    cfg.validate()?;
    let exec = opts.exec;
    let (train, dropped) = fit_to_length(data.train, model.config.max_len);
    let (dev, _) = fit_to_length(data.dev, model.config.max_len);
    if train.is_empty() {
        return Err(TrainError::NoData);
    }
    let prefix = source_prefix(cfg.mode, data.vocab, &train.tgt_lang);
    let mut plan = Plan {
        mode: cfg.mode,
        anchored: if cfg.mode == Mode::Baseline { train.with_views(0) } else { train.clone() },
        tagged: Vec::new(),
        tags: data.vocab.tags().iter().filter_map(|t| data.vocab.id(t)).collect(),
        cfg,
    };
    if cfg.mode.tagged() {
        plan.tagged = build_naive_dataset(&train, data.vocab, cfg.mode == Mode::NaivePivot)?;
    }
    let dropout_on = model.config.dropout > 0.0 || model.config.attention_dropout > 0.0;
    let mut adam = Adam::new(&model.params, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
    let mut log = Vec::new();
    let mut emit = |rec: LogRecord, log: &mut Vec<LogRecord>| {
        if let Some(cb) = opts.on_record.as_mut() {
            cb(&rec);
        }
        log.push(rec);
    };
    let mut ring: Vec<(u64, ModelParams<F>)> = Vec::new();
    let (mut best, mut best_step, mut bad_validations) = (f64::INFINITY, 0u64, 0u64);
    let mut acc = LossBreakdown::default();
    let mut acc_n = 0u64;
    let mut step = 0u64;
    let mut epoch = 0u64;
    let mut stop = StopReason::MaxSteps;
    'outer: while step < cfg.max_steps {
        let batches = plan.epoch(epoch)?;
        epoch += 1;
        for k in 0..batches.len() {
            if step >= cfg.max_steps {
                break 'outer;
            }
            step += 1;
            let dropout = if dropout_on {
                DropoutMode::Seeded { seed: cfg.seed, step }
            } else {
                DropoutMode::Off
            };
            let (b, grads) = match &batches {
                Batches::Anchored(bs) => cipherdaug_loss(model, &bs[k], loss_cfg, step, dropout, exec)?,
                Batches::Tagged(bs) => {
                    let ex: Vec<&TaggedExample> = bs[k].iter().map(|&i| &plan.tagged[i]).collect();
                    naive_multisource_loss(model, &ex, &plan.tags, loss_cfg.label_smoothing, dropout, exec)?
                }
            };
            if !b.total.is_finite() || !grads.is_finite() {
                return Err(TrainError::NonFinite {
                    step,
                    dump: batch_dump(&batches, k, &plan),
                });
            }
            let lr = lr_schedule(step, cfg.peak_lr, cfg.warmup_steps);
            adam.step(&mut model.params, &grads, lr);
            if !model.params.is_finite() {
                return Err(TrainError::NonFinite {
                    step,
                    dump: batch_dump(&batches, k, &plan),
                });
            }
            acc.anchor_nll += b.anchor_nll;
            acc.cipher_nll += b.cipher_nll;
            acc.agreement += b.agreement;
            acc.total += b.total;
            acc.token_count += b.token_count;
            acc_n += 1;
            if step % cfg.log_every == 0 || step == cfg.max_steps {
                let n = acc_n as f64;
                let rec = LogRecord {
                    kind: RecordKind::Train,
                    step,
                    lr,
                    loss: LossBreakdown {
                        anchor_nll: acc.anchor_nll / n,
                        cipher_nll: acc.cipher_nll / n,
                        agreement: acc.agreement / n,
                        total: acc.total / n,
                        token_count: acc.token_count,
                    },
                    dev_nll: None,
                    dev_bleu: None,
                    best: false,
                };
                emit(rec, &mut log);
                acc = LossBreakdown::default();
                acc_n = 0;
            }
            if step % cfg.validate_every == 0 {
                let nll = dev_nll(model, &dev, prefix, exec)?;
                let bleu = if cfg.dev_bleu {
                    Some(id_bleu(model, &dev.anchors, &dev.targets, prefix, exec)?)
                } else {
                    None
                };
                let improved = nll < best;
                if improved {
                    best = nll;
                    best_step = step;
                    bad_validations = 0;
                } else {
                    bad_validations += 1;
                }
                emit(
                    LogRecord {
                        kind: RecordKind::Dev,
                        step,
                        lr,
                        loss: LossBreakdown::default(),
                        dev_nll: Some(nll),
                        dev_bleu: bleu,
                        best: improved,
                    },
                    &mut log,
                );
                ring.push((step, model.params.clone()));
                if let Some(dir) = &opts.checkpoint_dir {
                    let ck = Checkpoint::new(opts.config_echo.clone(), &model.params);
                    save_checkpoint(&dir.join(format!("checkpoint_{step}.ckpt")), &ck)?;
                }
                if ring.len() > cfg.checkpoint_keep {
                    let (old, _) = ring.remove(0);
                    if let Some(dir) = &opts.checkpoint_dir {
                        let _ = std::fs::remove_file(dir.join(format!("checkpoint_{old}.ckpt")));
                    }
                }
                if !improved && bad_validations >= cfg.patience.max(1) {
                    stop = StopReason::Patience;
                    break 'outer;
                }
            }
        }
    }
    if ring.is_empty() {
        ring.push((step, model.params.clone()));
    }
    let tail: Vec<&ModelParams<F>> = ring.iter().rev().take(cfg.average_last).map(|(_, p)| p).collect();
    let averaged = average_checkpoints(&tail)?;
    if let Some(dir) = &opts.checkpoint_dir {
        save_checkpoint(&dir.join("checkpoint_last.ckpt"), &Checkpoint::new(opts.config_echo.clone(), &model.params))?;
        save_checkpoint(&dir.join("checkpoint_avg.ckpt"), &Checkpoint::new(opts.config_echo.clone(), &averaged))?;
    }
    Ok(TrainOutcome {
        steps: step,
        stop,
        best_dev_nll: best,
        best_step,
        log,
        checkpoints: ring,
        averaged,
        dropped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Tensor;

    #[test]
    fn schedule_points() {
        assert_eq!(lr_schedule(8000, 6e-4, 8000), 6e-4);
        assert!((lr_schedule(32000, 6e-4, 8000) - 3e-4).abs() < 1e-18);
        assert!((lr_schedule(1, 6e-4, 8000) - 6e-4 / 8000.0).abs() < 1e-18);
        assert_eq!(lr_schedule(5, 1.0, 0), (1.0f64 / 5.0).sqrt());
    }

    #[test]
    fn adam_single_step_on_quadratic() {
        // f(x) = ½·Σ c_i x_i², gradient c_i x_i
        let x0 = [1.0, -2.0, 0.5];
        let c = [1.0, 3.0, 10.0];
        let mut p = ModelParams {
            tensors: vec![Tensor {
                name: "x".into(),
                rows: 1,
                cols: 3,
                data: x0.to_vec(),
            }],
        };
        let g = ModelParams {
            tensors: vec![Tensor {
                name: "x".into(),
                rows: 1,
                cols: 3,
                data: (0..3).map(|i| c[i] * x0[i]).collect(),
            }],
        };
        let mut adam = Adam::new(&p, 0.9, 0.98, 1e-9);
        adam.step(&mut p, &g, 0.01);
        for i in 0..3 {
            let gi: f64 = c[i] * x0[i];
            let m = 0.1 * gi / (1.0 - 0.9);
            let v = 0.02 * gi * gi / (1.0 - 0.98);
            let want = x0[i] - 0.01 * m / (v.sqrt() + 1e-9);
            assert!((p.tensors[0].data[i] - want).abs() < 1e-10);
        }
    }

    #[test]
    fn averaging() {
        let mk = |x: f64| ModelParams {
            tensors: vec![Tensor {
                name: "w".into(),
                rows: 1,
                cols: 1,
                data: vec![x],
            }],
        };
        let (a, b) = (mk(1.0), mk(3.0));
        assert_eq!(average_checkpoints(&[&a, &b]).unwrap(), mk(2.0));
        assert_eq!(average_checkpoints(&[&a]).unwrap(), a);
        assert_eq!(average_checkpoints(&[&b, &b]).unwrap(), b);
        let mut c = mk(1.0);
        c.tensors[0].cols = 2;
        c.tensors[0].data.push(0.0);
        assert!(average_checkpoints(&[&a, &c]).is_err());
        assert!(average_checkpoints::<f64>(&[]).is_err());
    }

    #[test]
    fn mode_names() {
        assert_eq!("naive-pivot".parse::<Mode>().unwrap(), Mode::NaivePivot);
        assert_eq!("cipherdaug".parse::<Mode>().unwrap(), Mode::Cipherdaug);
        assert!("x".parse::<Mode>().is_err());
    }
}
