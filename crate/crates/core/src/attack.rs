//! Optimization of a universal image perturbation with a two-sided goal:
//! questions carrying a chosen text trigger should decode to a fixed target
//! string, while untriggered questions keep their original answers.
//!
//! The loop: cache the model's clean answers as references, then repeat —
//! draw a batch, build the two-term loss (triggered→target,
//! untriggered→reference) through the differentiable perturbation applier,
//! backpropagate to the shared delta, fold the descent direction into an
//! ℓ1-normalized momentum buffer, take a signed step, and re-project onto
//! the feasible set. The model itself is frozen throughout.
//!
//! Every random choice (batch order, loss-weight draws, trigger placement,
//! spectral augmentation) comes from its own named stream of the config
//! seed, so ablations that disable one stage never shift the randomness of
//! another.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::Distribution;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::dataset::VqaSample;
use crate::model::tokenizer::tokenize;
use crate::model::ToyMllm;
use crate::perturb::{Mask, PerturbationSpec, UniversalPerturbation};
use crate::rng::{normal_f64, shuffled_indices, stream_rng, streams, uniform_f64};
use crate::scalar::Scalar;
use crate::tensor::{DctBasis, NodeId, Tape, Tensor};

/// Generation cap for cached references and evaluation decodes; generous
/// next to the longest template answer, tiny next to the text context.
pub(crate) const REFERENCE_DECODE_CAP: usize = 48;

/// Consecutive zero-gradient iterations tolerated before the run aborts.
const MAX_ZERO_GRAD_RUN: usize = 10;

// ── triggers ─────────────────────────────────────────────────────────────

/// Where the trigger lands inside a question.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Placement {
    Prefix,
    Suffix,
    RandomWordBoundary,
}

/// A textual trigger and its insertion rule.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TriggerSpec {
    pub trigger: String,
    pub placement: Placement,
}

impl TriggerSpec {
    pub fn new(trigger: impl Into<String>, placement: Placement) -> Self {
        TriggerSpec {
            trigger: trigger.into(),
            placement,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.trigger.is_empty() {
            return Err(Error::Empty("trigger"));
        }
        Ok(())
    }
}

/// The trigger together with the string the backdoor should force.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TriggerTargetPair {
    pub trigger: TriggerSpec,
    pub target: String,
}

impl TriggerTargetPair {
    pub fn validate(&self) -> Result<()> {
        self.trigger.validate()?;
        if self.target.is_empty() {
            return Err(Error::Empty("target"));
        }
        Ok(())
    }
}

/// Inserts the trigger into a question. Prefix and suffix are
/// deterministic; the word-boundary rule draws one position (both ends
/// included) from `rng`. Empty questions come back as the bare trigger —
/// no dangling separator.
pub fn insert_trigger<R: Rng + ?Sized>(question: &[u8], spec: &TriggerSpec, rng: &mut R) -> Vec<u8> {
    let trig = spec.trigger.as_bytes();
    if question.is_empty() {
        return trig.to_vec();
    }
    match spec.placement {
        Placement::Prefix => {
            let mut out = trig.to_vec();
            out.push(b' ');
            out.extend_from_slice(question);
            out
        }
        Placement::Suffix => {
            let mut out = question.to_vec();
            out.push(b' ');
            out.extend_from_slice(trig);
            out
        }
        Placement::RandomWordBoundary => {
            let words: Vec<&[u8]> = question.split(|b| *b == b' ').filter(|w| !w.is_empty()).collect();
            let k = rng.random_range(0..=words.len());
            let mut pieces: Vec<&[u8]> = Vec::with_capacity(words.len() + 1);
            pieces.extend_from_slice(&words[..k]);
            pieces.push(trig);
            pieces.extend_from_slice(&words[k..]);
            pieces.join(&b' ')
        }
    }
}

// ── reference cache ──────────────────────────────────────────────────────

/// Clean-image greedy decodes for every ensemble sample, frozen before the
/// first optimization step. The untriggered loss term pulls the model back
/// toward these instead of toward dataset labels, so the attack needs no
/// ground truth.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ReferenceCache {
    answers: Vec<Vec<u8>>,
}

impl ReferenceCache {
    /// The cached decode for ensemble position `k`.
    pub fn answer(&self, k: usize) -> &[u8] {
        &self.answers[k]
    }

    pub fn len(&self) -> usize {
        self.answers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.answers.is_empty()
    }
}

/// Greedy-decodes every sample on its clean image. An empty decode is kept
/// as an empty byte string; the loss then trains the terminator token
/// alone, which reproduces "say nothing" faithfully.
pub fn cache_references<S: Scalar>(
    model: &ToyMllm<S>,
    samples: &[VqaSample<S>],
) -> Result<ReferenceCache> {
    let answers: Vec<Vec<u8>> = samples
        .par_iter()
        .map(|s| model.greedy_decode(&s.image, &s.question, REFERENCE_DECODE_CAP))
        .collect::<Result<_>>()?;
    Ok(ReferenceCache { answers })
}

// ── configuration ────────────────────────────────────────────────────────

/// Spectrum-level augmentation settings: each loss term is averaged over
/// `n` copies of the perturbed image, each with per-pixel Gaussian noise
/// (`sigma`, in 0–255 pixel units) and a random per-frequency gain in
/// `[1−rho, 1+rho]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SsaConfig {
    pub enabled: bool,
    pub n: usize,
    pub sigma: f64,
    pub rho: f64,
}

impl Default for SsaConfig {
    fn default() -> Self {
        SsaConfig {
            enabled: false,
            n: 20,
            sigma: 16.0,
            rho: 0.5,
        }
    }
}

/// How the two loss weights are chosen each iteration.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "schedule", rename_all = "snake_case", deny_unknown_fields)]
pub enum WeightSchedule {
    /// Fixed `(w1, w2)` every iteration.
    Static { w1: f64, w2: f64 },
    /// `w1 = λ`, `w2 = 1−λ` with `λ ~ Beta(alpha, alpha)`, redrawn each
    /// iteration.
    DynamicBeta { alpha: f64 },
}

impl Default for WeightSchedule {
    fn default() -> Self {
        WeightSchedule::Static { w1: 1.0, w2: 1.0 }
    }
}

/// Knobs of one optimization run.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackConfig {
    /// Ensemble size K: how many visual-question pairs the delta is fit on.
    pub ensemble_size: usize,
    /// Optimization steps T. Zero is an explicit no-op returning the zero
    /// perturbation.
    pub iterations: usize,
    /// Signed step size η in pixel units (a value of 1/255 moves each
    /// touched channel one 8-bit level per step).
    pub step_size: f64,
    /// Momentum coefficient μ in `[0, 1)`.
    pub momentum: f64,
    /// Batch size B drawn from the ensemble each iteration.
    pub batch_size: usize,
    pub ssa: SsaConfig,
    pub weights: WeightSchedule,
    pub seed: u64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            ensemble_size: 40,
            iterations: 500,
            step_size: 2.0 / 255.0,
            momentum: 0.9,
            batch_size: 8,
            ssa: SsaConfig::default(),
            weights: WeightSchedule::default(),
            seed: 0,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |d: String| Error::shape("attack config", d);
        if self.batch_size == 0 {
            return Err(bad("batch_size must be at least 1".into()));
        }
        if self.ensemble_size < self.batch_size {
            return Err(bad(format!(
                "ensemble_size {} smaller than batch_size {}",
                self.ensemble_size, self.batch_size
            )));
        }
        if !(self.momentum >= 0.0 && self.momentum < 1.0) {
            return Err(bad(format!("momentum {} outside [0, 1)", self.momentum)));
        }
        if !(self.step_size > 0.0) {
            return Err(bad(format!("step_size {} must be positive", self.step_size)));
        }
        if self.ssa.n == 0 {
            return Err(bad("ssa.n must be at least 1".into()));
        }
        if !(self.ssa.sigma >= 0.0) {
            return Err(bad(format!("ssa.sigma {} must be non-negative", self.ssa.sigma)));
        }
        if !(self.ssa.rho >= 0.0 && self.ssa.rho < 1.0) {
            return Err(bad(format!("ssa.rho {} outside [0, 1)", self.ssa.rho)));
        }
        match self.weights {
            WeightSchedule::Static { w1, w2 } => {
                if w1 < 0.0 || w2 < 0.0 {
                    return Err(bad(format!("static weights ({w1}, {w2}) must be non-negative")));
                }
            }
            WeightSchedule::DynamicBeta { alpha } => {
                if !(alpha > 0.0) {
                    return Err(bad(format!("beta schedule alpha {alpha} must be positive")));
                }
            }
        }
        Ok(())
    }
}

/// Draws this iteration's loss weights. The static schedule never touches
/// the RNG; the beta schedule consumes exactly one draw.
pub fn sample_weights<R: Rng + ?Sized>(schedule: WeightSchedule, rng: &mut R) -> (f64, f64) {
    match schedule {
        WeightSchedule::Static { w1, w2 } => (w1, w2),
        WeightSchedule::DynamicBeta { alpha } => {
            let beta = rand_distr::Beta::new(alpha, alpha).expect("validated alpha");
            let lambda: f64 = beta.sample(rng);
            (lambda, 1.0 - lambda)
        }
    }
}

// ── spectrum-level augmentation ──────────────────────────────────────────

/// One augmentation copy's randomness: per-entry pixel noise and one
/// per-frequency gain plane shared by the three channels.
#[derive(Clone, Debug)]
pub struct SsaDraw<S: Scalar> {
    /// `[H, W, 3]` additive noise, already scaled to `[0,1]` pixel units.
    pub noise: Tensor<S>,
    /// `[H, W]` multiplicative spectral gains.
    pub gain: Tensor<S>,
}

/// Draws the randomness for `n` augmentation copies. Noise comes from
/// `noise_rng`, spectral gains from `gain_rng`; both advance even when
/// `sigma` or `rho` is zero so stream positions never depend on values.
pub fn draw_ssa<S: Scalar>(
    noise_rng: &mut ChaCha8Rng,
    gain_rng: &mut ChaCha8Rng,
    n: usize,
    sigma: f64,
    rho: f64,
    h: usize,
    w: usize,
) -> Vec<SsaDraw<S>> {
    (0..n)
        .map(|_| SsaDraw {
            noise: Tensor::from_fn(vec![h, w, 3], |_| S::of_f64(normal_f64(noise_rng, sigma / 255.0))),
            // One unit draw mapped onto [1−ρ, 1+ρ]: a zero ρ yields exactly
            // 1.0 while still advancing the stream.
            gain: Tensor::from_fn(vec![h, w], |_| {
                let u = uniform_f64(gain_rng, 0.0, 1.0);
                S::of_f64((1.0 - rho) + u * (2.0 * rho))
            }),
        })
        .collect()
}

/// Applies one draw eagerly: add noise, scale every frequency coefficient
/// of each channel, transform back, clip to `[0,1]`.
pub fn apply_ssa_draw<S: Scalar>(
    image: &Tensor<S>,
    draw: &SsaDraw<S>,
    bh: &DctBasis<S>,
    bw: &DctBasis<S>,
) -> Result<Tensor<S>> {
    let shape = image.shape();
    let (h, w) = match shape {
        [h, w, 3] => (*h, *w),
        other => return Err(Error::shape("ssa", format!("expected H×W×3 image, got {other:?}"))),
    };
    let src = image.data();
    let noise = draw.noise.data();
    let mut out = vec![S::zero(); src.len()];
    for ch in 0..3 {
        let plane = Tensor::from_fn(vec![h, w], |i| src[i * 3 + ch] + noise[i * 3 + ch]);
        let spec = crate::tensor::dct2(&plane, bh, bw)?;
        let scaled = Tensor::from_fn(vec![h, w], |i| spec.data()[i] * draw.gain.data()[i]);
        let back = crate::tensor::idct2(&scaled, bh, bw)?;
        for i in 0..h * w {
            let v = back.data()[i];
            out[i * 3 + ch] = if v < S::zero() {
                S::zero()
            } else if v > S::one() {
                S::one()
            } else {
                v
            };
        }
    }
    Tensor::new(vec![h, w, 3], out)
}

/// Produces `n` augmented copies of an image (already perturbed, in
/// `[0,1]`). With `n=1, sigma=0, rho=0` the single copy equals the input
/// up to transform round-trip error.
pub fn ssa_augment<S: Scalar>(
    image: &Tensor<S>,
    n: usize,
    sigma: f64,
    rho: f64,
    noise_rng: &mut ChaCha8Rng,
    gain_rng: &mut ChaCha8Rng,
) -> Result<Vec<Tensor<S>>> {
    let (h, w) = match image.shape() {
        [h, w, 3] => (*h, *w),
        other => return Err(Error::shape("ssa", format!("expected H×W×3 image, got {other:?}"))),
    };
    let bh = DctBasis::new(h);
    let bw = DctBasis::new(w);
    draw_ssa(noise_rng, gain_rng, n, sigma, rho, h, w)
        .iter()
        .map(|d| apply_ssa_draw(image, d, &bh, &bw))
        .collect()
}

/// Channel de-interleave indices: flat positions of channel `ch` in an
/// `[H, W, 3]` tensor.
fn channel_gather_idx(h: usize, w: usize, ch: usize) -> std::sync::Arc<[u32]> {
    (0..h * w).map(|i| (i * 3 + ch) as u32).collect()
}

/// Re-interleave indices from a `[3H, W]` channel stack back to `[H, W, 3]`.
fn interleave_gather_idx(h: usize, w: usize) -> std::sync::Arc<[u32]> {
    let mut idx = Vec::with_capacity(h * w * 3);
    for i in 0..h * w {
        for ch in 0..3 {
            idx.push((ch * h * w + i) as u32);
        }
    }
    idx.into()
}

/// The same augmentation as [`apply_ssa_draw`], built as tape operations so
/// gradients flow through it back to the perturbation.
fn ssa_on_tape<S: Scalar>(
    tape: &mut Tape<S>,
    image: NodeId,
    draw: &SsaDraw<S>,
    basis_h: NodeId,
    basis_w: NodeId,
    h: usize,
    w: usize,
) -> Result<NodeId> {
    let noise = tape.constant(&draw.noise);
    let gain = tape.constant(&draw.gain);
    let noisy = tape.add(image, noise)?;
    let mut channels = Vec::with_capacity(3);
    for ch in 0..3 {
        let plane = tape.gather(noisy, channel_gather_idx(h, w, ch), vec![h, w])?;
        // Forward transform: C_h · X · C_wᵀ.
        let left = tape.matmul(basis_h, plane)?;
        let bwt = tape.transpose(basis_w)?;
        let spec = tape.matmul(left, bwt)?;
        let scaled = tape.mul(spec, gain)?;
        // Inverse transform: C_hᵀ · Y · C_w.
        let bht = tape.transpose(basis_h)?;
        let back_left = tape.matmul(bht, scaled)?;
        let back = tape.matmul(back_left, basis_w)?;
        channels.push(back);
    }
    let stack = tape.concat_rows(&channels)?;
    let interleaved = tape.gather(stack, interleave_gather_idx(h, w), vec![h, w, 3])?;
    tape.clip(interleaved, 0.0, 1.0)
}

// ── loss ─────────────────────────────────────────────────────────────────

/// Everything one worker needs to evaluate one sample's two loss terms.
struct SampleJob<'a, S: Scalar> {
    image: &'a Tensor<S>,
    triggered_question: Vec<u8>,
    clean_question: &'a [u8],
    target_tokens: &'a [u32],
    reference_tokens: Vec<u32>,
    ssa: Option<&'a [SsaDraw<S>]>,
}

/// Builds one sample's graph and returns `(trigger_term, benign_term,
/// d(w1·trigger + w2·benign)/d(delta))`. The gradient is skipped when
/// `want_grad` is false.
fn sample_terms<S: Scalar>(
    model: &ToyMllm<S>,
    delta: &Tensor<S>,
    mask_channels: &Tensor<S>,
    job: &SampleJob<'_, S>,
    w1: f64,
    w2: f64,
    want_grad: bool,
) -> Result<(f64, f64, Option<Vec<S>>)> {
    let (h, w) = match job.image.shape() {
        [h, w, 3] => (*h, *w),
        other => return Err(Error::shape("attack", format!("expected H×W×3 image, got {other:?}"))),
    };
    let mut tape = Tape::new();
    let nodes = model.register(&mut tape, false);
    let d = tape.input(delta, true);
    let mask = tape.constant(mask_channels);
    let masked = tape.mul(d, mask)?;
    let clean = tape.constant(job.image);
    let summed = tape.add(clean, masked)?;
    let perturbed = tape.clip(summed, 0.0, 1.0)?;

    let copies: Vec<NodeId> = match job.ssa {
        None => vec![perturbed],
        Some(draws) => {
            let bh = DctBasis::<S>::new(h);
            let bw = DctBasis::<S>::new(w);
            let basis_h = tape.constant(bh.matrix());
            let basis_w = tape.constant(bw.matrix());
            draws
                .iter()
                .map(|draw| ssa_on_tape(&mut tape, perturbed, draw, basis_h, basis_w, h, w))
                .collect::<Result<_>>()?
        }
    };

    let mean_over = |tape: &mut Tape<S>, terms: Vec<NodeId>| -> Result<NodeId> {
        let mut acc = terms[0];
        for t in &terms[1..] {
            acc = tape.add(acc, *t)?;
        }
        Ok(tape.scale(acc, 1.0 / terms.len() as f64))
    };

    let mut trigger_terms = Vec::with_capacity(copies.len());
    let mut benign_terms = Vec::with_capacity(copies.len());
    for &copy in &copies {
        trigger_terms.push(model.loss_on_tape(
            &mut tape,
            &nodes,
            copy,
            &job.triggered_question,
            job.target_tokens,
        )?);
        benign_terms.push(model.loss_on_tape(
            &mut tape,
            &nodes,
            copy,
            job.clean_question,
            &job.reference_tokens,
        )?);
    }
    let trigger = mean_over(&mut tape, trigger_terms)?;
    let benign = mean_over(&mut tape, benign_terms)?;
    let trigger_val = tape.scalar(trigger)?.as_f64();
    let benign_val = tape.scalar(benign)?.as_f64();

    let grad = if want_grad {
        let weighted_t = tape.scale(trigger, w1);
        let weighted_b = tape.scale(benign, w2);
        let combined = tape.add(weighted_t, weighted_b)?;
        let grads = tape.backward(combined)?;
        Some(match grads.get(d) {
            Some(g) => g.to_vec(),
            None => vec![S::zero(); delta.numel()],
        })
    } else {
        None
    };
    Ok((trigger_val, benign_val, grad))
}

/// Batch-mean loss components and the batch-mean delta gradient of
/// `w1·trigger + w2·benign`. Per-sample work fans out to parallel workers;
/// reduction is in sample order, so results are worker-count independent.
fn batch_terms<S: Scalar>(
    model: &ToyMllm<S>,
    delta: &Tensor<S>,
    mask_channels: &Tensor<S>,
    jobs: &[SampleJob<'_, S>],
    w1: f64,
    w2: f64,
    want_grad: bool,
) -> Result<(f64, f64, Option<Tensor<S>>)> {
    if jobs.is_empty() {
        return Err(Error::Empty("attack batch"));
    }
    let per: Vec<(f64, f64, Option<Vec<S>>)> = jobs
        .par_iter()
        .map(|job| sample_terms(model, delta, mask_channels, job, w1, w2, want_grad))
        .collect::<Result<_>>()?;
    let inv = 1.0 / jobs.len() as f64;
    let mut trigger = 0.0;
    let mut benign = 0.0;
    let mut grad = want_grad.then(|| vec![S::zero(); delta.numel()]);
    for (t, b, g) in &per {
        trigger += t * inv;
        benign += b * inv;
        if let (Some(acc), Some(g)) = (grad.as_mut(), g.as_ref()) {
            let s = S::of_f64(inv);
            for (a, v) in acc.iter_mut().zip(g) {
                *a += *v * s;
            }
        }
    }
    let grad = match grad {
        Some(g) => Some(Tensor::new(delta.shape().to_vec(), g)?),
        None => None,
    };
    Ok((trigger, benign, grad))
}

/// The scalar objective on one batch: mean over the batch of
/// `w1·L(perturbed, triggered question → target) + w2·L(perturbed, clean
/// question → cached reference)`. `batch` holds indices into `ensemble`;
/// `rng` feeds word-boundary trigger placement only.
#[allow(clippy::too_many_arguments)]
pub fn attack_loss<S: Scalar>(
    model: &ToyMllm<S>,
    pert: &UniversalPerturbation<S>,
    ensemble: &[VqaSample<S>],
    batch: &[usize],
    pair: &TriggerTargetPair,
    refs: &ReferenceCache,
    w1: f64,
    w2: f64,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    pair.validate()?;
    let target_tokens = tokenize(pair.target.as_bytes());
    let jobs: Vec<SampleJob<'_, S>> = batch
        .iter()
        .map(|&k| SampleJob {
            image: &ensemble[k].image,
            triggered_question: insert_trigger(&ensemble[k].question, &pair.trigger, rng),
            clean_question: &ensemble[k].question,
            target_tokens: &target_tokens,
            reference_tokens: tokenize(refs.answer(k)),
            ssa: None,
        })
        .collect();
    let mask_channels = pert.mask().to_channel_tensor::<S>();
    let (trigger, benign, _) = batch_terms(model, pert.delta(), &mask_channels, &jobs, w1, w2, false)?;
    Ok(w1 * trigger + w2 * benign)
}

// ── momentum and update ──────────────────────────────────────────────────

/// The ℓ1-normalized, masked momentum buffer plus a stall counter.
#[derive(Clone, Debug)]
pub struct MomentumState<S: Scalar> {
    g: Tensor<S>,
    zero_run: usize,
}

impl<S: Scalar> MomentumState<S> {
    pub fn new(h: usize, w: usize) -> Self {
        MomentumState {
            g: Tensor::zeros(vec![h, w, 3]),
            zero_run: 0,
        }
    }

    pub fn g(&self) -> &Tensor<S> {
        &self.g
    }

    /// Consecutive zero-gradient steps observed so far.
    pub fn zero_run(&self) -> usize {
        self.zero_run
    }
}

/// Folds one step's direction into the momentum buffer: the raw direction
/// is ℓ1-normalized over all entries, masked, and added to `μ·g`. A zero
/// direction instead decays the buffer and counts toward the stall limit.
pub fn momentum_step<S: Scalar>(
    state: &mut MomentumState<S>,
    direction: &Tensor<S>,
    mu: f64,
    mask: &Mask,
) -> Result<()> {
    if direction.shape() != state.g.shape()
        || state.g.shape() != [mask.height(), mask.width(), 3]
    {
        return Err(Error::shape(
            "momentum",
            format!(
                "direction {:?}, state {:?} and mask {}×{} must agree",
                direction.shape(),
                state.g.shape(),
                mask.height(),
                mask.width()
            ),
        ));
    }
    let l1 = direction.l1_norm();
    let mu_s = S::of_f64(mu);
    if l1 == 0.0 {
        for g in state.g.data_mut() {
            *g *= mu_s;
        }
        state.zero_run += 1;
        return Ok(());
    }
    let inv = S::of_f64(1.0 / l1);
    let dir = direction.data();
    for (i, g) in state.g.data_mut().iter_mut().enumerate() {
        let pixel = i / 3;
        let row = pixel / mask.width();
        let col = pixel % mask.width();
        let m = if mask.is_on(row, col) { S::one() } else { S::zero() };
        *g = mu_s * *g + dir[i] * inv * m;
    }
    state.zero_run = 0;
    Ok(())
}

/// One signed step along the momentum buffer followed by re-projection:
/// `delta ← project(delta + η·sign(g))`, with `sign(0) = 0`.
pub fn pgd_update<S: Scalar>(
    pert: &mut UniversalPerturbation<S>,
    g: &Tensor<S>,
    eta: f64,
) -> Result<()> {
    if g.shape() != pert.delta().shape() {
        return Err(Error::shape(
            "pgd update",
            format!("direction {:?} vs delta {:?}", g.shape(), pert.delta().shape()),
        ));
    }
    let step = S::of_f64(eta);
    let gd = g.data();
    for (d, gv) in pert.delta_mut().data_mut().iter_mut().zip(gd) {
        if *gv > S::zero() {
            *d += step;
        } else if *gv < S::zero() {
            *d -= step;
        }
    }
    pert.project()
}

// ── the loop ─────────────────────────────────────────────────────────────

/// One optimization step's log row.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackStep {
    pub step: usize,
    pub w1: f64,
    pub w2: f64,
    pub loss_trigger: f64,
    pub loss_benign: f64,
    /// ℓ1 norm of the raw batch-mean gradient before normalization.
    pub grad_l1: f64,
    /// ℓ∞ norm of the delta after this step's update and projection.
    pub delta_linf: f64,
}

/// Step-indexed record of one run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AttackLog {
    pub rows: Vec<AttackStep>,
}

impl AttackLog {
    /// CSV rendering, one row per step.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,w1,w2,loss_trigger,loss_benign,grad_l1,delta_linf\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.step, r.w1, r.w2, r.loss_trigger, r.loss_benign, r.grad_l1, r.delta_linf
            ));
        }
        out
    }

    pub fn write_csv(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }

    /// Moving average of the trigger-term loss with the given window,
    /// useful for trend checks on a noisy batch objective.
    pub fn smoothed_trigger_loss(&self, window: usize) -> Vec<f64> {
        let vals: Vec<f64> = self.rows.iter().map(|r| r.loss_trigger).collect();
        if window == 0 || vals.is_empty() {
            return vals;
        }
        (0..vals.len())
            .map(|i| {
                let lo = i.saturating_sub(window - 1);
                let slice = &vals[lo..=i];
                slice.iter().sum::<f64>() / slice.len() as f64
            })
            .collect()
    }
}

/// Runs the full optimization and returns the final perturbation plus the
/// per-step log. The model is frozen; `samples` is the attack ensemble
/// (clean references are cached from it before the first step), and every
/// random choice derives from `config.seed`.
pub fn run_attack<S: Scalar>(
    model: &ToyMllm<S>,
    samples: &[VqaSample<S>],
    pair: &TriggerTargetPair,
    spec: PerturbationSpec,
    config: &AttackConfig,
) -> Result<(UniversalPerturbation<S>, AttackLog)> {
    run_attack_observed(model, samples, pair, spec, config, &mut |_, _| {})
}

/// [`run_attack`] with a per-step observer called after every projected
/// update with `(step, perturbation)`. The observer sees exactly the state
/// the next iteration will start from, which lets callers audit per-step
/// invariants (mask support, amplitude budget) without widening the log.
pub fn run_attack_observed<S: Scalar>(
    model: &ToyMllm<S>,
    samples: &[VqaSample<S>],
    pair: &TriggerTargetPair,
    spec: PerturbationSpec,
    config: &AttackConfig,
    observer: &mut dyn FnMut(usize, &UniversalPerturbation<S>),
) -> Result<(UniversalPerturbation<S>, AttackLog)> {
    pair.validate()?;
    config.validate()?;
    if samples.is_empty() {
        return Err(Error::Empty("attack ensemble"));
    }
    if samples.len() != config.ensemble_size {
        return Err(Error::shape(
            "attack",
            format!(
                "config says ensemble_size {} but {} samples were provided",
                config.ensemble_size,
                samples.len()
            ),
        ));
    }
    let (h, w) = match samples[0].image.shape() {
        [h, w, 3] => (*h, *w),
        other => return Err(Error::shape("attack", format!("expected H×W×3 images, got {other:?}"))),
    };
    for s in samples {
        if s.image.shape() != [h, w, 3] {
            return Err(Error::shape(
                "attack",
                format!("sample {} image shape {:?} differs from {h}×{w}×3", s.id, s.image.shape()),
            ));
        }
    }

    let mut pert = UniversalPerturbation::zeros(spec, h, w)?;
    let mut log = AttackLog::default();
    if config.iterations == 0 {
        return Ok((pert, log));
    }

    let refs = cache_references(model, samples)?;
    let target_tokens = tokenize(pair.target.as_bytes());
    let mask_channels = pert.mask().to_channel_tensor::<S>();

    let mut batch_rng = stream_rng(config.seed, streams::BATCH);
    let mut weights_rng = stream_rng(config.seed, streams::WEIGHTS);
    let mut trigger_rng = stream_rng(config.seed, streams::TRIGGER_PLACEMENT);
    let mut ssa_noise_rng = stream_rng(config.seed, streams::SSA_NOISE);
    let mut ssa_gain_rng = stream_rng(config.seed, streams::SSA_MASK);

    let mut momentum = MomentumState::<S>::new(h, w);
    let k = samples.len();
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = k; // forces a shuffle on the first iteration
    let mut last_finite = f64::NAN;

    for t in 0..config.iterations {
        if cursor >= k {
            order = shuffled_indices(&mut batch_rng, k);
            cursor = 0;
        }
        let batch: Vec<usize> = order[cursor..(cursor + config.batch_size).min(k)].to_vec();
        cursor += batch.len();

        let (w1, w2) = sample_weights(config.weights, &mut weights_rng);

        // All randomness is consumed sequentially here, before the parallel
        // fan-out, so worker scheduling cannot reorder stream draws.
        let ssa_draws: Vec<Vec<SsaDraw<S>>> = if config.ssa.enabled {
            batch
                .iter()
                .map(|_| {
                    draw_ssa(
                        &mut ssa_noise_rng,
                        &mut ssa_gain_rng,
                        config.ssa.n,
                        config.ssa.sigma,
                        config.ssa.rho,
                        h,
                        w,
                    )
                })
                .collect()
        } else {
            Vec::new()
        };
        let jobs: Vec<SampleJob<'_, S>> = batch
            .iter()
            .enumerate()
            .map(|(j, &kx)| SampleJob {
                image: &samples[kx].image,
                triggered_question: insert_trigger(&samples[kx].question, &pair.trigger, &mut trigger_rng),
                clean_question: &samples[kx].question,
                target_tokens: &target_tokens,
                reference_tokens: tokenize(refs.answer(kx)),
                ssa: config.ssa.enabled.then(|| ssa_draws[j].as_slice()),
            })
            .collect();

        let (loss_trigger, loss_benign, grad) =
            batch_terms(model, pert.delta(), &mask_channels, &jobs, w1, w2, true)?;
        let grad = grad.expect("gradient requested");
        let combined = w1 * loss_trigger + w2 * loss_benign;
        let grad_l1 = grad.l1_norm();
        if !combined.is_finite() || !grad_l1.is_finite() {
            return Err(Error::AttackDiverged { step: t, last_finite });
        }
        last_finite = combined;

        // The objective is minimized: accumulate the negative gradient so
        // the additive sign update walks downhill.
        let descent = Tensor::from_fn(grad.shape().to_vec(), |i| -grad.data()[i]);
        momentum_step(&mut momentum, &descent, config.momentum, pert.mask())?;
        if momentum.zero_run() >= MAX_ZERO_GRAD_RUN {
            return Err(Error::GradientStalled {
                step: t,
                count: momentum.zero_run(),
            });
        }
        pgd_update(&mut pert, momentum.g(), config.step_size)?;

        log.rows.push(AttackStep {
            step: t,
            w1,
            w2,
            loss_trigger,
            loss_benign,
            grad_l1,
            delta_linf: pert.delta().max_abs(),
        });
        observer(t, &pert);
    }
    Ok((pert, log))
}
