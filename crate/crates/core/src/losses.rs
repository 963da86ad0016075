//! Training objectives.
//!
//! Logit-level functions ([`nll_loss`], [`agreement_loss`]) return values and
//! gradients with respect to the logits. Batch-level functions run the model
//! over every view of every example, combine the terms and backpropagate,
//! returning parameter gradients of the reported total.
//!
//! All terms are per-token means. The agreement term between an anchor and a
//! cipher view at one target position is
//! `½·[KL(softmax(z_a/τ) ‖ softmax(z_c)) + KL(softmax(z_c/τ) ‖ softmax(z_a))]`,
//! flattening only the first argument of each KL.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{AnchoredBatch, TaggedExample};
use crate::exec::Execution;
use crate::model::{log_softmax_rows, Mat, ModelError, ModelParams, Scalar, Transformer};
use crate::subword::{BOS_ID, EOS_ID, PAD_ID};

#[derive(Debug, Error)]
pub enum LossError {
    #[error("target has no non-pad tokens")]
    AllPad,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("temperature must be positive, got {0}")]
    BadTemperature(f64),
    #[error("direction tag {0} is not registered")]
    UnregisteredTag(u32),
    #[error("empty batch")]
    EmptyBatch,
    #[error("loss config: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Which divergence the agreement term uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Agreement {
    /// Symmetrized KL, averaged over both directions.
    #[default]
    Symmetric,
    /// `KL(softmax(z_a/τ) ‖ softmax(z_c))` only.
    Asymmetric,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub alpha1: f64,
    pub alpha2: f64,
    pub beta: f64,
    pub tau: f64,
    pub label_smoothing: f64,
    pub agreement_warmup_steps: u64,
    pub agreement: Agreement,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            alpha1: 1.0,
            alpha2: 1.0,
            beta: 5.0,
            tau: 1.0,
            label_smoothing: 0.1,
            agreement_warmup_steps: 2000,
            agreement: Agreement::Symmetric,
        }
    }
}

impl LossConfig {
    /// `β` in effect at `step`: zero during the agreement warmup.
    pub fn beta_at(&self, step: u64) -> f64 {
        if step < self.agreement_warmup_steps {
            0.0
        } else {
            self.beta
        }
    }

    pub fn validate(&self) -> Result<(), LossError> {
        check_tau(self.tau)?;
        let weights = [self.alpha1, self.alpha2, self.beta];
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(LossError::Config("alpha1, alpha2 and beta must be finite and non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(LossError::Config(format!("label_smoothing must be in [0, 1), got {}", self.label_smoothing)));
        }
        Ok(())
    }
}

/// Per-term values of one batch. `total = α₁·anchor_nll + α₂·cipher_nll + β_eff·agreement`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub anchor_nll: f64,
    pub cipher_nll: f64,
    pub agreement: f64,
    pub total: f64,
    /// Anchor target tokens, eos included.
    pub token_count: usize,
}

/// Label-smoothed cross-entropy summed over non-pad positions, with the
/// gradient of that sum written into `grad` scaled by `weight`.
/// Returns `(sum, counted positions)`.
fn nll_sum<F: Scalar>(
    logits: &Mat<F>,
    targets: &[u32],
    smoothing: f64,
    weight: f64,
    grad: &mut Mat<F>,
) -> (f64, usize) {
    let v = logits.cols;
    let lp = log_softmax_rows(logits);
    let off = smoothing / v as f64;
    let mut sum = 0.0;
    let mut n = 0;
    for (t, &y) in targets.iter().enumerate() {
        if y == PAD_ID {
            continue;
        }
        n += 1;
        let row = lp.row(t);
        let mut l = 0.0;
        let grow = grad.row_mut(t);
        for (j, (&lpj, g)) in row.iter().zip(grow.iter_mut()).enumerate() {
            let q = off + if j == y as usize { 1.0 - smoothing } else { 0.0 };
            let lpj = lpj.f64();
            l -= q * lpj;
            *g += F::of(weight * (lpj.exp() - q));
        }
        sum += l;
    }
    (sum, n)
}

/// Per-token mean label-smoothed cross-entropy over non-pad targets and its
/// gradient with respect to `logits`.
pub fn nll_loss<F: Scalar>(logits: &Mat<F>, targets: &[u32], smoothing: f64) -> Result<(f64, Mat<F>), LossError> {
    if logits.rows != targets.len() {
        return Err(LossError::Shape(format!(
            "{} logit rows for {} targets",
            logits.rows,
            targets.len()
        )));
    }
    let n = targets.iter().filter(|&&y| y != PAD_ID).count();
    if n == 0 {
        return Err(LossError::AllPad);
    }
    let mut grad = Mat::zeros(logits.rows, logits.cols);
    let (sum, _) = nll_sum(logits, targets, smoothing, 1.0 / n as f64, &mut grad);
    Ok((sum / n as f64, grad))
}

/// Log-probabilities and probabilities of one logit row at temperature `τ`
/// and at temperature one.
struct RowDist {
    log_t: Vec<f64>,
    p_t: Vec<f64>,
    log_1: Vec<f64>,
    p_1: Vec<f64>,
}

impl RowDist {
    fn new(z: &[f64], tau: f64) -> Self {
        let log_1 = log_softmax_scaled(z, 1.0);
        let p_1: Vec<f64> = log_1.iter().map(|x| x.exp()).collect();
        let (log_t, p_t) = if tau == 1.0 {
            (log_1.clone(), p_1.clone())
        } else {
            let l = log_softmax_scaled(z, 1.0 / tau);
            let p = l.iter().map(|x| x.exp()).collect();
            (l, p)
        };
        RowDist { log_t, p_t, log_1, p_1 }
    }
}

/// `KL(softmax(a/τ) ‖ softmax(b))` for one row, accumulating `w·∂/∂a` and `w·∂/∂b`.
fn kl_row(a: &RowDist, b: &RowDist, tau: f64, w: f64, ga: &mut [f64], gb: &mut [f64]) -> f64 {
    let (lf, f) = (&a.log_t, &a.p_t);
    let (lq, q) = (&b.log_1, &b.p_1);
    let kl: f64 = f.iter().zip(lf.iter().zip(lq)).map(|(&f, (&lf, &lq))| f * (lf - lq)).sum();
    for j in 0..f.len() {
        ga[j] += w * f[j] * ((lf[j] - lq[j]) - kl) / tau;
        gb[j] += w * (q[j] - f[j]);
    }
    kl
}

fn log_softmax_scaled(z: &[f64], s: f64) -> Vec<f64> {
    let max = z.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x * s));
    let lse = max + z.iter().map(|&x| (x * s - max).exp()).sum::<f64>().ln();
    z.iter().map(|&x| x * s - lse).collect()
}

/// Agreement summed over rows; gradients of `weight·sum` are added into `ga`, `gb`.
fn agreement_sum<F: Scalar>(
    za: &Mat<F>,
    zc: &Mat<F>,
    tau: f64,
    kind: Agreement,
    weight: f64,
    ga: &mut Mat<F>,
    gb: &mut Mat<F>,
) -> f64 {
    let v = za.cols;
    let mut sum = 0.0;
    let mut da = vec![0.0; v];
    let mut dc = vec![0.0; v];
    for t in 0..za.rows {
        let a: Vec<f64> = za.row(t).iter().map(|x| x.f64()).collect();
        let c: Vec<f64> = zc.row(t).iter().map(|x| x.f64()).collect();
        let (a, c) = (RowDist::new(&a, tau), RowDist::new(&c, tau));
        da.iter_mut().for_each(|x| *x = 0.0);
        dc.iter_mut().for_each(|x| *x = 0.0);
        sum += match kind {
            Agreement::Symmetric => {
                let k1 = kl_row(&a, &c, tau, 0.5 * weight, &mut da, &mut dc);
                let k2 = kl_row(&c, &a, tau, 0.5 * weight, &mut dc, &mut da);
                0.5 * (k1 + k2)
            }
            Agreement::Asymmetric => kl_row(&a, &c, tau, weight, &mut da, &mut dc),
        };
        if weight != 0.0 {
            for (g, &d) in ga.row_mut(t).iter_mut().zip(&da) {
                *g += F::of(d);
            }
            for (g, &d) in gb.row_mut(t).iter_mut().zip(&dc) {
                *g += F::of(d);
            }
        }
    }
    sum
}

fn check_tau(tau: f64) -> Result<(), LossError> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(LossError::BadTemperature(tau))
    }
}

/// Mean symmetric-KL agreement between two equally shaped logit matrices, with
/// gradients for both arguments.
pub fn agreement_loss<F: Scalar>(
    za: &Mat<F>,
    zc: &Mat<F>,
    tau: f64,
) -> Result<(f64, Mat<F>, Mat<F>), LossError> {
    agreement_loss_with(za, zc, tau, Agreement::Symmetric)
}

pub fn agreement_loss_with<F: Scalar>(
    za: &Mat<F>,
    zc: &Mat<F>,
    tau: f64,
    kind: Agreement,
) -> Result<(f64, Mat<F>, Mat<F>), LossError> {
    check_tau(tau)?;
    if (za.rows, za.cols) != (zc.rows, zc.cols) {
        return Err(LossError::Shape(format!(
            "anchor {}x{} vs cipher {}x{}",
            za.rows, za.cols, zc.rows, zc.cols
        )));
    }
    if za.rows == 0 {
        return Err(LossError::AllPad);
    }
    let n = za.rows as f64;
    let mut ga = Mat::zeros(za.rows, za.cols);
    let mut gc = Mat::zeros(zc.rows, zc.cols);
    let sum = agreement_sum(za, zc, tau, kind, 1.0 / n, &mut ga, &mut gc);
    Ok((sum / n, ga, gc))
}

/// Where per-example dropout generators come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DropoutMode {
    Off,
    /// Each (example, view) gets its own generator derived from `(seed, step)`.
    Seeded { seed: u64, step: u64 },
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl DropoutMode {
    fn rng(self, index: usize, view: usize) -> Option<ChaCha8Rng> {
        match self {
            DropoutMode::Off => None,
            DropoutMode::Seeded { seed, step } => {
                let s = splitmix(splitmix(splitmix(seed) ^ step) ^ index as u64);
                Some(ChaCha8Rng::seed_from_u64(splitmix(s ^ view as u64)))
            }
        }
    }
}

/// Examples per gradient accumulation group. Groups run in parallel and are
/// summed in index order, so results do not depend on the thread count.
const GROUP: usize = 4;

fn teacher_forcing(target: &[u32]) -> (Vec<u32>, Vec<u32>) {
    let mut tgt_in = Vec::with_capacity(target.len() + 1);
    tgt_in.push(BOS_ID);
    tgt_in.extend_from_slice(target);
    let mut gold = target.to_vec();
    gold.push(EOS_ID);
    (tgt_in, gold)
}

#[derive(Default, Clone, Copy)]
struct Sums {
    anchor: f64,
    cipher: f64,
    agreement: f64,
}

fn reduce_groups<F: Scalar>(
    model: &Transformer<F>,
    parts: Vec<Result<(Sums, ModelParams<F>), LossError>>,
) -> Result<(Sums, ModelParams<F>), LossError> {
    let mut total = Sums::default();
    let mut grads = model.zero_grads();
    for part in parts {
        let (s, g) = part?;
        total.anchor += s.anchor;
        total.cipher += s.cipher;
        total.agreement += s.agreement;
        grads.add_assign(&g);
    }
    Ok((total, grads))
}

/// Composite objective on an anchored batch.
///
/// Every example is run through the anchor view and each of its cipher views.
/// `anchor_nll` averages over anchor target tokens, `cipher_nll` and
/// `agreement` over cipher-view target positions. While
/// `step < agreement_warmup_steps` the agreement value is still reported but
/// contributes neither to `total` nor to the gradients.
pub fn cipherdaug_loss<F: Scalar>(
    model: &Transformer<F>,
    batch: &AnchoredBatch,
    cfg: &LossConfig,
    step: u64,
    dropout: DropoutMode,
    exec: Execution,
) -> Result<(LossBreakdown, ModelParams<F>), LossError> {
    check_tau(cfg.tau)?;
    if batch.examples.is_empty() {
        return Err(LossError::EmptyBatch);
    }
    for e in &batch.examples {
        if e.ciphers.len() != batch.keys.len() {
            return Err(LossError::Shape(format!(
                "example {} has {} cipher views for {} keys",
                e.index,
                e.ciphers.len(),
                batch.keys.len()
            )));
        }
    }
    let n_anchor = batch.target_tokens();
    let n_cipher = n_anchor * batch.keys.len();
    let beta = cfg.beta_at(step);
    let w_anchor = cfg.alpha1 / n_anchor as f64;
    let w_cipher = if n_cipher > 0 { cfg.alpha2 / n_cipher as f64 } else { 0.0 };
    let w_agree = if n_cipher > 0 { beta / n_cipher as f64 } else { 0.0 };
    let groups = batch.examples.len().div_ceil(GROUP);
    let parts = exec.map_range(groups, |g| {
        let mut sums = Sums::default();
        let mut grads = model.zero_grads();
        for e in batch.examples.iter().skip(g * GROUP).take(GROUP) {
            let (tgt_in, gold) = teacher_forcing(&e.target);
            let mut rng = dropout.rng(e.index, 0);
            let (za, ca) = model.forward(&e.anchor, &tgt_in, rng.as_mut())?;
            let mut ga = Mat::zeros(za.rows, za.cols);
            sums.anchor += nll_sum(&za, &gold, cfg.label_smoothing, w_anchor, &mut ga).0;
            for (v, src) in e.ciphers.iter().enumerate() {
                let mut rng = dropout.rng(e.index, v + 1);
                let (zc, cc) = model.forward(src, &tgt_in, rng.as_mut())?;
                let mut gc = Mat::zeros(zc.rows, zc.cols);
                sums.cipher += nll_sum(&zc, &gold, cfg.label_smoothing, w_cipher, &mut gc).0;
                // agreement gradient is dropped (weight 0) during warmup
                sums.agreement += agreement_sum(&za, &zc, cfg.tau, cfg.agreement, w_agree, &mut ga, &mut gc);
                model.backward(&cc, &gc, &mut grads);
            }
            model.backward(&ca, &ga, &mut grads);
        }
        Ok((sums, grads))
    });
    let (s, grads) = reduce_groups(model, parts)?;
    let anchor_nll = s.anchor / n_anchor as f64;
    let (cipher_nll, agreement) = if n_cipher > 0 {
        (s.cipher / n_cipher as f64, s.agreement / n_cipher as f64)
    } else {
        (0.0, 0.0)
    };
    let total = cfg.alpha1 * anchor_nll + cfg.alpha2 * cipher_nll + beta * agreement;
    Ok((
        LossBreakdown {
            anchor_nll,
            cipher_nll,
            agreement,
            total,
            token_count: n_anchor,
        },
        grads,
    ))
}

/// Multi-source NLL over tagged examples of every direction, as one per-token
/// mean. The result is reported in `anchor_nll` and `total`.
pub fn naive_multisource_loss<F: Scalar>(
    model: &Transformer<F>,
    examples: &[&TaggedExample],
    tags: &[u32],
    label_smoothing: f64,
    dropout: DropoutMode,
    exec: Execution,
) -> Result<(LossBreakdown, ModelParams<F>), LossError> {
    if examples.is_empty() {
        return Err(LossError::EmptyBatch);
    }
    if let Some(e) = examples.iter().find(|e| !tags.contains(&e.direction_tag)) {
        return Err(LossError::UnregisteredTag(e.direction_tag));
    }
    let n: usize = examples.iter().map(|e| e.target.len() + 1).sum();
    let w = 1.0 / n as f64;
    let groups = examples.len().div_ceil(GROUP);
    let parts = exec.map_range(groups, |g| {
        let mut sums = Sums::default();
        let mut grads = model.zero_grads();
        for (k, e) in examples.iter().enumerate().skip(g * GROUP).take(GROUP) {
            let (tgt_in, gold) = teacher_forcing(&e.target);
            let mut rng = dropout.rng(k, 0);
            let (z, c) = model.forward(&e.source, &tgt_in, rng.as_mut())?;
            let mut gz = Mat::zeros(z.rows, z.cols);
            sums.anchor += nll_sum(&z, &gold, label_smoothing, w, &mut gz).0;
            model.backward(&c, &gz, &mut grads);
        }
        Ok((sums, grads))
    });
    let (s, grads) = reduce_groups(model, parts)?;
    let nll = s.anchor / n as f64;
    Ok((
        LossBreakdown {
            anchor_nll: nll,
            cipher_nll: 0.0,
            agreement: 0.0,
            total: nll,
            token_count: n,
        },
        grads,
    ))
}

/// Unsmoothed NLL of `target` (eos appended) given `source`, without dropout.
/// Returns `(summed NLL, scored tokens)`.
pub fn sequence_nll<F: Scalar>(model: &Transformer<F>, source: &[u32], target: &[u32]) -> Result<(f64, usize), LossError> {
    let (tgt_in, gold) = teacher_forcing(target);
    let (z, _) = model.forward(source, &tgt_in, None)?;
    let mut scratch = Mat::zeros(z.rows, z.cols);
    Ok(nll_sum(&z, &gold, 0.0, 0.0, &mut scratch))
}

/// Number of NLL terms contributed per sentence by the multi-source objective.
pub fn naive_terms_per_sentence(keys: usize, pivot: bool) -> usize {
    1 + keys + if pivot { keys } else { 0 }
}
