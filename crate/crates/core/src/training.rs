//! Masked-LM pre-training and downstream fine-tuning loops.

use std::ops::Range;

use log::{debug, info};
use serde::{Deserialize, Serialize};

use crate::data::{DownstreamTask, Example, CLS, MASK, PAD, SEP};
use crate::error::{Error, Result};
use crate::model::ops::cross_entropy;
use crate::model::{Gradients, Mode, Model, TokenId};
use crate::optim::{Adam, AdamConfig, LrSchedule};
use crate::pruning::Pruner;
use crate::rng::RngState;

pub const MLM_SELECT_RATE: f64 = 0.15;

/// Number of MLM targets for a sequence with `eligible` maskable positions.
pub fn mlm_target_count(eligible: usize) -> usize {
    (MLM_SELECT_RATE * eligible as f64).ceil() as usize
}

fn is_special(t: TokenId) -> bool {
    matches!(t, PAD | CLS | SEP | MASK)
}

/// An MLM training instance: corrupted input and `(position, gold)` targets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MlmInstance {
    pub input: Vec<TokenId>,
    pub targets: Vec<(usize, TokenId)>,
}

/// Selects exactly `ceil(0.15 * n)` of the `n` non-special positions; each
/// selected token becomes MASK with probability 0.8, a uniformly random token
/// from `replacement` with probability 0.1, and stays unchanged otherwise.
pub fn mask_for_mlm(seq: &[TokenId], replacement: Range<TokenId>, rng: &mut RngState) -> MlmInstance {
    let eligible: Vec<usize> = (0..seq.len()).filter(|&i| !is_special(seq[i])).collect();
    let k = mlm_target_count(eligible.len());
    let mut chosen: Vec<usize> = rng.sample_indices(eligible.len(), k).into_iter().map(|i| eligible[i]).collect();
    chosen.sort_unstable();
    let mut input = seq.to_vec();
    let span = (replacement.end - replacement.start) as usize;
    let mut targets = Vec::with_capacity(k);
    for pos in chosen {
        targets.push((pos, seq[pos]));
        let u = rng.uniform();
        if u < 0.8 {
            input[pos] = MASK;
        } else if u < 0.9 {
            input[pos] = replacement.start + rng.below(span) as TokenId;
        }
    }
    MlmInstance { input, targets }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub batch_size: usize,
    pub lr: f32,
    pub warmup_frac: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub clip_norm: f64,
    pub log_every: usize,
    pub adam: AdamConfig,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self { batch_size: 16, lr: 1e-3, warmup_frac: 0.1, clip_norm: 1.0, log_every: 500, adam: AdamConfig::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainOutcome {
    /// `(step, mean train loss since the previous entry)`.
    pub loss_curve: Vec<(usize, f64)>,
    pub dev_loss: f64,
}

/// Deterministic MLM instances for the dev set; every evaluation sees the same masking.
pub fn dev_instances(dev: &[Vec<TokenId>], replacement: Range<TokenId>, seed: u64) -> Vec<MlmInstance> {
    let mut rng = RngState::with_stream(seed, 0xdef);
    dev.iter().map(|s| mask_for_mlm(s, replacement.clone(), &mut rng)).collect()
}

/// Mean MLM cross-entropy over all targets of `instances`, without dropout.
pub fn mlm_dev_loss(model: &Model, instances: &[MlmInstance], batch_size: usize) -> Result<f64> {
    let (mut total, mut count) = (0.0f64, 0usize);
    let mut mlm = model.clone();
    mlm.detach_classifier();
    for chunk in instances.chunks(batch_size.max(1)) {
        let bl = batch_mlm_loss(&mlm, chunk, Mode::Eval)?;
        total += bl.loss * bl.targets as f64;
        count += bl.targets;
    }
    Ok(if count == 0 { 0.0 } else { total / count as f64 })
}

struct BatchLoss {
    loss: f64,
    targets: usize,
    grad: crate::tensor::Tensor2D,
    trace: crate::model::ForwardTrace,
}

fn batch_mlm_loss(model: &Model, batch: &[MlmInstance], mode: Mode<'_>) -> Result<BatchLoss> {
    let inputs: Vec<&[TokenId]> = batch.iter().map(|b| b.input.as_slice()).collect();
    let (logits, trace) = model.forward_batch(&inputs, mode)?;
    let mut targets = Vec::new();
    for (b, inst) in batch.iter().enumerate() {
        let off = trace.rows_of(b).start;
        targets.extend(inst.targets.iter().map(|&(p, g)| (off + p, g as usize)));
    }
    let (loss, grad) = cross_entropy(&logits, &targets);
    Ok(BatchLoss { loss, targets: targets.len(), grad, trace })
}

/// One optimizer update with optional clipping and mask handling.
fn apply_update(model: &mut Model, grads: &mut Gradients, opt: &mut Adam, lr: f32, clip: f64, pruner: Option<&Pruner>) -> Result<()> {
    if clip > 0.0 {
        grads.clip_global_norm(clip);
    }
    if let Some(p) = pruner {
        p.mask_gradients(grads)?;
    }
    opt.step(model, grads, lr)?;
    if let Some(p) = pruner {
        p.enforce(model)?;
    }
    Ok(())
}

fn check_finite(loss: f64, step: usize) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Divergence { step, loss: loss as f32 })
    }
}

/// Infinite shuffled pass over `0..n`, reshuffled every epoch.
struct Sampler {
    order: Vec<usize>,
    pos: usize,
}

impl Sampler {
    fn new(n: usize, rng: &mut RngState) -> Self {
        let mut order: Vec<usize> = (0..n).collect();
        rng.shuffle(&mut order);
        Self { order, pos: 0 }
    }

    fn next_batch(&mut self, size: usize, rng: &mut RngState) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.pos == self.order.len() {
                rng.shuffle(&mut self.order);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// Pre-trains `model` with the MLM objective for `steps` updates.
///
/// When a pruner is given its schedule is applied before every update and
/// masked weights are held at zero after it. The returned dev loss is
/// measured on the fixed instances `dev` (see [`dev_instances`]).
pub fn pretrain(
    model: &mut Model,
    train: &[Vec<TokenId>],
    dev: &[MlmInstance],
    replacement: Range<TokenId>,
    steps: usize,
    cfg: &PretrainConfig,
    mut pruner: Option<&mut Pruner>,
    rng: &RngState,
) -> Result<PretrainOutcome> {
    if train.is_empty() || dev.is_empty() {
        return Err(Error::InvalidParameter("pre-training needs non-empty train and dev sets".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("pretrain.batch_size must be positive".into()));
    }
    if let Some(s) = pruner.as_ref().and_then(|p| p.schedule()) {
        if steps <= s.end_step() {
            return Err(Error::Config(format!("pre-training runs {steps} steps but the sparsity ramp ends at step {}", s.end_step())));
        }
    }
    model.detach_classifier();
    let mut data_rng = rng.split_named("pretrain/data");
    let mut drop_rng = rng.split_named("pretrain/dropout");
    let mut sampler = Sampler::new(train.len(), &mut data_rng);
    let mut opt = Adam::new(model, cfg.adam);
    let sched = LrSchedule::new(cfg.lr, steps, cfg.warmup_frac);
    let mut grads = Gradients::zeros_like(model);
    let mut curve = Vec::new();
    let (mut window, mut window_n) = (0.0f64, 0usize);
    for step in 0..steps {
        if let Some(p) = pruner.as_deref_mut() {
            if p.on_step(model, step)? {
                debug!("step {step}: sparsity {:.4}", p.current_sparsity());
            }
        }
        let batch: Vec<MlmInstance> = sampler
            .next_batch(cfg.batch_size, &mut data_rng)
            .into_iter()
            .map(|i| mask_for_mlm(&train[i], replacement.clone(), &mut data_rng))
            .collect();
        let bl = batch_mlm_loss(model, &batch, Mode::Train(&mut drop_rng))?;
        check_finite(bl.loss, step)?;
        grads.zero();
        model.backward_into(&bl.trace, &bl.grad, &mut grads)?;
        apply_update(model, &mut grads, &mut opt, sched.at(step), cfg.clip_norm, pruner.as_deref())?;
        window += bl.loss;
        window_n += 1;
        if cfg.log_every > 0 && ((step + 1) % cfg.log_every == 0 || step + 1 == steps) {
            let mean = window / window_n as f64;
            info!("pretrain step {}/{steps}: loss {mean:.4}", step + 1);
            curve.push((step + 1, mean));
            window = 0.0;
            window_n = 0;
        }
    }
    let dev_loss = mlm_dev_loss(model, dev, 64)?;
    check_finite(dev_loss, steps)?;
    Ok(PretrainOutcome { loss_curve: curve, dev_loss })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    pub batch_size: usize,
    pub warmup_frac: f64,
    pub clip_norm: f64,
    pub adam: AdamConfig,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self { batch_size: 16, warmup_frac: 0.1, clip_norm: 1.0, adam: AdamConfig::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub train_loss: f64,
    pub dev_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneOutcome {
    pub best_dev_accuracy: f64,
    /// Mean minibatch loss over the final epoch; for zero epochs, the
    /// evaluation-mode loss on the training set.
    pub final_train_loss: f64,
    pub epochs: Vec<EpochStats>,
}

/// Accuracy and mean cross-entropy of the attached classifier on `examples`.
pub fn evaluate(model: &Model, examples: &[Example], batch_size: usize) -> Result<(f64, f64)> {
    if examples.is_empty() {
        return Err(Error::InvalidParameter("cannot evaluate on an empty set".into()));
    }
    let (mut correct, mut loss) = (0usize, 0.0f64);
    for chunk in examples.chunks(batch_size.max(1)) {
        let inputs: Vec<&[TokenId]> = chunk.iter().map(|e| e.tokens.as_slice()).collect();
        let (logits, _) = model.forward_batch(&inputs, Mode::Eval)?;
        let targets: Vec<(usize, usize)> = chunk.iter().enumerate().map(|(i, e)| (i, e.label)).collect();
        loss += cross_entropy(&logits, &targets).0 * chunk.len() as f64;
        for (i, e) in chunk.iter().enumerate() {
            let row = logits.row(i);
            let pred = (0..row.len()).fold(0, |best, c| if row[c] > row[best] { c } else { best });
            correct += usize::from(pred == e.label);
        }
    }
    Ok((correct as f64 / examples.len() as f64, loss / examples.len() as f64))
}

/// Attaches a fresh classifier to `model` and trains it on `task` for
/// `epochs` passes; dev accuracy is measured after every epoch and the best
/// is reported. A pruner holding a mask keeps masked weights at zero.
pub fn finetune(
    model: &mut Model,
    task: &DownstreamTask,
    epochs: usize,
    lr: f32,
    cfg: &FinetuneConfig,
    pruner: Option<&Pruner>,
    rng: &RngState,
) -> Result<FinetuneOutcome> {
    check_task(task, cfg)?;
    model.attach_classifier(task.num_classes, &mut rng.split_named("finetune/head"))?;
    if let Some(p) = pruner {
        p.enforce(model)?;
    }
    if epochs == 0 {
        let (acc, _) = evaluate(model, &task.dev, 64)?;
        let (_, train_loss) = evaluate(model, &task.train, 64)?;
        return Ok(FinetuneOutcome { best_dev_accuracy: acc, final_train_loss: train_loss, epochs: Vec::new() });
    }
    train_classifier(model, task, epochs, lr, cfg, MaskControl::from(pruner), &rng.split_named("finetune"))
}

/// Trains an already fine-tuned classifier further on `task` while `pruner`
/// follows its schedule, counted in optimizer steps from the start of this call.
pub fn continue_training(
    model: &mut Model,
    task: &DownstreamTask,
    epochs: usize,
    lr: f32,
    cfg: &FinetuneConfig,
    pruner: &mut Pruner,
    rng: &RngState,
) -> Result<FinetuneOutcome> {
    check_task(task, cfg)?;
    if model.num_classes() != Some(task.num_classes) {
        return Err(Error::InvalidParameter(format!("model has no {}-way classifier for task `{}`", task.num_classes, task.name)));
    }
    if epochs == 0 {
        return Err(Error::InvalidParameter("continued training needs at least one epoch".into()));
    }
    train_classifier(model, task, epochs, lr, cfg, MaskControl::Scheduled(pruner), rng)
}

fn check_task(task: &DownstreamTask, cfg: &FinetuneConfig) -> Result<()> {
    if task.train.is_empty() || task.dev.is_empty() {
        return Err(Error::InvalidParameter(format!("task `{}` has an empty split", task.name)));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("finetune.batch_size must be positive".into()));
    }
    Ok(())
}

enum MaskControl<'a> {
    Free,
    Fixed(&'a Pruner),
    Scheduled(&'a mut Pruner),
}

impl<'a> From<Option<&'a Pruner>> for MaskControl<'a> {
    fn from(p: Option<&'a Pruner>) -> Self {
        p.map_or(MaskControl::Free, MaskControl::Fixed)
    }
}

fn train_classifier(
    model: &mut Model,
    task: &DownstreamTask,
    epochs: usize,
    lr: f32,
    cfg: &FinetuneConfig,
    mut masks: MaskControl<'_>,
    rng: &RngState,
) -> Result<FinetuneOutcome> {
    let mut data_rng = rng.split_named("data");
    let mut drop_rng = rng.split_named("dropout");
    let steps_per_epoch = task.train.len().div_ceil(cfg.batch_size);
    let sched = LrSchedule::new(lr, steps_per_epoch * epochs, cfg.warmup_frac);
    let mut opt = Adam::new(model, cfg.adam);
    let mut grads = Gradients::zeros_like(model);
    let mut order: Vec<usize> = (0..task.train.len()).collect();
    let mut stats = Vec::with_capacity(epochs);
    let mut step = 0;
    for epoch in 0..epochs {
        data_rng.shuffle(&mut order);
        let mut total = 0.0f64;
        for idx in order.chunks(cfg.batch_size) {
            if let MaskControl::Scheduled(p) = &mut masks {
                p.on_step(model, step)?;
            }
            let inputs: Vec<&[TokenId]> = idx.iter().map(|&i| task.train[i].tokens.as_slice()).collect();
            let (logits, trace) = model.forward_batch(&inputs, Mode::Train(&mut drop_rng))?;
            let targets: Vec<(usize, usize)> = idx.iter().enumerate().map(|(r, &i)| (r, task.train[i].label)).collect();
            let (loss, grad) = cross_entropy(&logits, &targets);
            check_finite(loss, step)?;
            grads.zero();
            model.backward_into(&trace, &grad, &mut grads)?;
            let pruner = match &masks {
                MaskControl::Free => None,
                MaskControl::Fixed(p) => Some(*p),
                MaskControl::Scheduled(p) => Some(&**p),
            };
            apply_update(model, &mut grads, &mut opt, sched.at(step), cfg.clip_norm, pruner)?;
            total += loss * idx.len() as f64;
            step += 1;
        }
        let (acc, _) = evaluate(model, &task.dev, 64)?;
        let train_loss = total / task.train.len() as f64;
        info!("finetune {} epoch {}/{epochs}: train loss {train_loss:.4}, dev accuracy {acc:.4}", task.name, epoch + 1);
        stats.push(EpochStats { train_loss, dev_accuracy: acc });
    }
    if let MaskControl::Scheduled(p) = &mut masks {
        // Short runs may end inside the ramp; finish at the target sparsity.
        if let Some(target) = p.schedule().map(|s| s.final_sparsity) {
            if p.current_sparsity() < target {
                p.prune_to(model, target)?;
                let (acc, _) = evaluate(model, &task.dev, 64)?;
                if let Some(last) = stats.last_mut() {
                    last.dev_accuracy = acc;
                }
            }
        }
    }
    let best = stats.iter().map(|s| s.dev_accuracy).fold(f64::NEG_INFINITY, f64::max);
    let final_train_loss = stats.last().map_or(0.0, |s| s.train_loss);
    Ok(FinetuneOutcome { best_dev_accuracy: best, final_train_loss, epochs: stats })
}
