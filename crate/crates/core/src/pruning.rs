//! Magnitude pruning: thresholds, masks, gradual sparsity schedules and the
//! random / information-deletion variants.
//!
//! Ordering rule used everywhere: weights are ranked by `(|w|, flat index)`,
//! so equal magnitudes are pruned in index order and every mask is
//! deterministic. A target sparsity `s` over `n` weights prunes exactly
//! `prune_count(s, n)` = ⌈s·n⌉ of them.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::container::Container;
use crate::error::{Error, Result};
use crate::model::{Gradients, MatrixKind, Model, PrunableSet};
use crate::rng::RngState;
use crate::tensor::Tensor2D;

/// Boolean keep-mask congruent to a weight matrix; `false` = pruned.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PruneMask {
    rows: usize,
    cols: usize,
    keep: Vec<bool>,
}

impl PruneMask {
    pub fn all_kept(rows: usize, cols: usize) -> Self {
        Self { rows, cols, keep: vec![true; rows * cols] }
    }

    pub fn from_keep(rows: usize, cols: usize, keep: Vec<bool>) -> Result<Self> {
        if keep.len() != rows * cols {
            return Err(Error::LengthMismatch { expected: rows * cols, actual: keep.len() });
        }
        Ok(Self { rows, cols, keep })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.keep.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keep.is_empty()
    }

    pub fn keep(&self) -> &[bool] {
        &self.keep
    }

    pub fn is_kept(&self, r: usize, c: usize) -> bool {
        self.keep[r * self.cols + c]
    }

    pub fn pruned_count(&self) -> usize {
        self.keep.iter().filter(|k| !**k).count()
    }

    pub fn sparsity(&self) -> f64 {
        if self.keep.is_empty() {
            return 0.0;
        }
        self.pruned_count() as f64 / self.keep.len() as f64
    }

    /// True when every position pruned here is also pruned in `other`.
    pub fn is_subset_of(&self, other: &PruneMask) -> bool {
        self.shape() == other.shape() && self.keep.iter().zip(&other.keep).all(|(a, b)| *a || !*b)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.keep.iter().map(|&k| u8::from(k)).collect()
    }

    pub fn from_bytes(rows: usize, cols: usize, bytes: &[u8]) -> Result<Self> {
        if let Some(b) = bytes.iter().find(|&&b| b > 1) {
            return Err(Error::Corrupt(format!("mask byte {b} is neither 0 nor 1")));
        }
        Self::from_keep(rows, cols, bytes.iter().map(|&b| b == 1).collect())
    }
}

/// Number of weights pruned for a target sparsity: ⌈s·n⌉, where products
/// within 1e-9·n of an integer count as that integer (so 0.3·10 prunes 3).
pub fn prune_count(sparsity: f64, n: usize) -> usize {
    let x = sparsity * n as f64;
    let r = x.round();
    let k = if (x - r).abs() <= 1e-9 * (n as f64).max(1.0) { r } else { x.ceil() };
    (k.max(0.0) as usize).min(n)
}

fn check_sparsity(s: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&s) {
        return Err(Error::InvalidParameter(format!("sparsity must be in [0, 1], got {s}")));
    }
    Ok(())
}

fn magnitude_order(a: (f32, usize), b: (f32, usize)) -> Ordering {
    a.0.abs().total_cmp(&b.0.abs()).then(a.1.cmp(&b.1))
}

/// Indices of the `k` smallest-magnitude weights, ties by index.
fn smallest_k(weights: &[f32], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..weights.len()).collect();
    if k == 0 {
        return Vec::new();
    }
    if k < idx.len() {
        idx.select_nth_unstable_by(k - 1, |&a, &b| magnitude_order((weights[a], a), (weights[b], b)));
        idx.truncate(k);
    }
    idx
}

/// Magnitude at or under which weights are pruned for the given sparsity: the
/// ⌈s·N⌉-th smallest `|w|`. Returns negative infinity when nothing is pruned.
pub fn magnitude_threshold(weights: &Tensor2D, sparsity: f64) -> Result<f32> {
    check_sparsity(sparsity)?;
    let k = prune_count(sparsity, weights.len());
    if k == 0 {
        return Ok(f32::NEG_INFINITY);
    }
    let data = weights.data();
    Ok(smallest_k(data, k).iter().map(|&i| data[i].abs()).fold(0.0, f32::max))
}

/// Mask pruning the ⌈s·N⌉ smallest-magnitude weights of one matrix.
pub fn magnitude_mask(weights: &Tensor2D, sparsity: f64) -> Result<PruneMask> {
    check_sparsity(sparsity)?;
    let mut keep = vec![true; weights.len()];
    for i in smallest_k(weights.data(), prune_count(sparsity, weights.len())) {
        keep[i] = false;
    }
    PruneMask::from_keep(weights.rows(), weights.cols(), keep)
}

/// Where a magnitude threshold is computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
#[derive(Default)]
pub enum PruneScope {
    /// One threshold per matrix.
    #[default]
    MatrixLocal,
    /// One threshold over every matrix in the set pooled together.
    Global,
    /// Stacked key/query/value matrices get one threshold per head column
    /// block; every other matrix is handled matrix-locally.
    PerHead { num_heads: usize },
}


/// Masks for every matrix of a [`PrunableSet`], in set order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskSet {
    pub names: Vec<String>,
    pub masks: Vec<PruneMask>,
}

impl MaskSet {
    pub fn get(&self, name: &str) -> Option<&PruneMask> {
        self.names.iter().position(|n| n == name).map(|i| &self.masks[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &PruneMask)> {
        self.names.iter().map(String::as_str).zip(&self.masks)
    }

    pub fn total_len(&self) -> usize {
        self.masks.iter().map(PruneMask::len).sum()
    }

    pub fn sparsity(&self) -> f64 {
        let n = self.total_len();
        if n == 0 {
            return 0.0;
        }
        self.masks.iter().map(PruneMask::pruned_count).sum::<usize>() as f64 / n as f64
    }

    pub fn all_kept(set: &PrunableSet, model: &Model) -> Self {
        Self {
            names: set.names().map(str::to_string).collect(),
            masks: set.entries().iter().map(|e| PruneMask::all_kept(model.param(e.param).rows(), model.param(e.param).cols())).collect(),
        }
    }

    /// Writes each mask as a `u8` entry `mask/<name>` plus a `mask` manifest entry.
    pub fn write_into(&self, c: &mut Container, meta: &MaskMeta) -> Result<()> {
        for (name, m) in self.iter() {
            c.save_bytes(&format!("mask/{name}"), m.rows(), m.cols(), m.to_bytes())?;
        }
        c.set_manifest("mask", serde_json::to_value(meta)?);
        c.set_manifest("mask_names", serde_json::to_value(&self.names)?);
        Ok(())
    }

    pub fn read_from(c: &Container) -> Result<(Self, MaskMeta)> {
        let meta: MaskMeta =
            serde_json::from_value(c.manifest("mask").cloned().ok_or_else(|| Error::NotFound("manifest entry `mask`".into()))?)?;
        let names: Vec<String> = serde_json::from_value(
            c.manifest("mask_names").cloned().ok_or_else(|| Error::NotFound("manifest entry `mask_names`".into()))?,
        )?;
        let mut masks = Vec::with_capacity(names.len());
        for n in &names {
            let (r, cols, bytes) = c.load_bytes(&format!("mask/{n}"))?;
            masks.push(PruneMask::from_bytes(r, cols, bytes)?);
        }
        Ok((Self { names, masks }, meta))
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>, meta: &MaskMeta) -> Result<()> {
        let mut c = Container::new();
        self.write_into(&mut c, meta)?;
        c.write(path)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<(Self, MaskMeta)> {
        Self::read_from(&Container::read(path)?)
    }
}

/// Provenance stored next to serialized masks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskMeta {
    pub scope: PruneScope,
    pub sparsity: f64,
    pub mode: PruneMode,
    pub seed: u64,
}

/// Builds magnitude masks for every matrix in `set` from the model's current weights.
pub fn build_masks(model: &Model, set: &PrunableSet, sparsity: f64, scope: PruneScope) -> Result<MaskSet> {
    let weights: Vec<&Tensor2D> = set.entries().iter().map(|e| model.param(e.param)).collect();
    let kinds: Vec<MatrixKind> = set.entries().iter().map(|e| e.kind).collect();
    let masks = build_masks_for(&weights, &kinds, sparsity, scope)?;
    Ok(MaskSet { names: set.names().map(str::to_string).collect(), masks })
}

/// Core of [`build_masks`] over bare matrices.
pub fn build_masks_for(weights: &[&Tensor2D], kinds: &[MatrixKind], sparsity: f64, scope: PruneScope) -> Result<Vec<PruneMask>> {
    check_sparsity(sparsity)?;
    if weights.is_empty() {
        return Err(Error::EmptyPrunableSet);
    }
    match scope {
        PruneScope::MatrixLocal => weights.iter().map(|w| magnitude_mask(w, sparsity)).collect(),
        PruneScope::Global => {
            let total: usize = weights.iter().map(|w| w.len()).sum();
            let mut pooled = Vec::with_capacity(total);
            for w in weights {
                pooled.extend_from_slice(w.data());
            }
            let mut keep = vec![true; total];
            for i in smallest_k(&pooled, prune_count(sparsity, total)) {
                keep[i] = false;
            }
            let mut out = Vec::with_capacity(weights.len());
            let mut off = 0;
            for w in weights {
                out.push(PruneMask::from_keep(w.rows(), w.cols(), keep[off..off + w.len()].to_vec())?);
                off += w.len();
            }
            Ok(out)
        }
        PruneScope::PerHead { num_heads } => weights
            .iter()
            .zip(kinds)
            .map(|(w, k)| if k.is_stacked_head() { per_head_mask(w, sparsity, num_heads) } else { magnitude_mask(w, sparsity) })
            .collect(),
    }
}

fn per_head_mask(w: &Tensor2D, sparsity: f64, num_heads: usize) -> Result<PruneMask> {
    if num_heads == 0 || !w.cols().is_multiple_of(num_heads) {
        return Err(Error::InvalidParameter(format!("{} columns do not split into {num_heads} heads", w.cols())));
    }
    let width = w.cols() / num_heads;
    let mut keep = vec![true; w.len()];
    for h in 0..num_heads {
        let block = w.col_block(h * width, width);
        let m = magnitude_mask(&block, sparsity)?;
        for r in 0..w.rows() {
            for c in 0..width {
                keep[r * w.cols() + h * width + c] = m.is_kept(r, c);
            }
        }
    }
    PruneMask::from_keep(w.rows(), w.cols(), keep)
}

/// Copy of `weights` with pruned positions set to exactly zero.
pub fn apply_mask(weights: &Tensor2D, mask: &PruneMask) -> Result<Tensor2D> {
    let mut out = weights.clone();
    apply_mask_in_place(&mut out, mask)?;
    Ok(out)
}

pub fn apply_mask_in_place(weights: &mut Tensor2D, mask: &PruneMask) -> Result<()> {
    if weights.shape() != mask.shape() {
        return Err(Error::shape("apply_mask", weights.shape(), mask.shape()));
    }
    for (w, &k) in weights.data_mut().iter_mut().zip(&mask.keep) {
        if !k {
            *w = 0.0;
        }
    }
    Ok(())
}

/// Mask pruning exactly ⌈s·N⌉ uniformly chosen positions.
pub fn random_mask(rows: usize, cols: usize, sparsity: f64, rng: &mut RngState) -> Result<PruneMask> {
    check_sparsity(sparsity)?;
    let n = rows * cols;
    let mut keep = vec![true; n];
    for i in rng.sample_indices(n, prune_count(sparsity, n)) {
        keep[i] = false;
    }
    PruneMask::from_keep(rows, cols, keep)
}

/// How the sparsity ramps from 0 to its final value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RampShape {
    /// `s_f · (1 − (1 − p)³)` with `p` the ramp progress in `[0, 1]`.
    #[default]
    Cubic,
    Linear,
    /// Jumps to `s_f` at the end of the ramp.
    Step,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SparsitySchedule {
    pub final_sparsity: f64,
    pub begin_step: usize,
    pub ramp_steps: usize,
    /// Steps between mask recomputations during the ramp.
    pub frequency: usize,
    #[serde(default)]
    pub shape: RampShape,
}

impl SparsitySchedule {
    pub fn new(final_sparsity: f64, begin_step: usize, ramp_steps: usize, frequency: usize) -> Result<Self> {
        let s = Self { final_sparsity, begin_step, ramp_steps, frequency, shape: RampShape::Cubic };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        check_sparsity(self.final_sparsity)?;
        if self.ramp_steps == 0 || self.frequency == 0 {
            return Err(Error::InvalidParameter("schedule ramp_steps and frequency must be positive".into()));
        }
        Ok(())
    }

    pub fn end_step(&self) -> usize {
        self.begin_step + self.ramp_steps
    }

    pub fn sparsity_at(&self, step: usize) -> f64 {
        if step <= self.begin_step {
            return 0.0;
        }
        if step >= self.end_step() {
            return self.final_sparsity;
        }
        let p = (step - self.begin_step) as f64 / self.ramp_steps as f64;
        match self.shape {
            RampShape::Cubic => self.final_sparsity * (1.0 - (1.0 - p).powi(3)),
            RampShape::Linear => self.final_sparsity * p,
            RampShape::Step => 0.0,
        }
    }

    /// Whether masks are recomputed at `step`: every `frequency` steps inside
    /// the ramp, and always at its final step.
    pub fn is_update_step(&self, step: usize) -> bool {
        if step <= self.begin_step || step > self.end_step() {
            return false;
        }
        step == self.end_step() || (step - self.begin_step).is_multiple_of(self.frequency)
    }
}

/// Free function form of [`SparsitySchedule::sparsity_at`].
pub fn schedule_sparsity(schedule: &SparsitySchedule, step: usize) -> f64 {
    schedule.sparsity_at(step)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PruneMode {
    /// Masked positions are held at zero for the rest of training.
    Masked,
    /// Weights are zeroed once and then free to regrow.
    InformationDeletion,
    /// Like `Masked`, but positions are chosen uniformly at random.
    RandomMasked,
}

impl PruneMode {
    pub fn holds_mask(self) -> bool {
        !matches!(self, PruneMode::InformationDeletion)
    }
}

/// Mask state carried through a training run.
#[derive(Debug, Clone)]
pub struct Pruner {
    set: PrunableSet,
    masks: MaskSet,
    mode: PruneMode,
    scope: PruneScope,
    schedule: Option<SparsitySchedule>,
    /// Per-matrix random priorities; lowest priority is pruned first. Nested
    /// across sparsity levels by construction.
    random_order: Option<Vec<Vec<usize>>>,
    current_sparsity: f64,
    released: bool,
}

impl Pruner {
    pub fn new(model: &Model, mode: PruneMode, scope: PruneScope, schedule: Option<SparsitySchedule>, rng: &RngState) -> Result<Self> {
        let set = model.prunable_set();
        if set.is_empty() {
            return Err(Error::EmptyPrunableSet);
        }
        if let Some(s) = &schedule {
            s.validate()?;
        }
        let random_order = matches!(mode, PruneMode::RandomMasked).then(|| {
            let mut r = rng.split_named("random-prune");
            set.entries()
                .iter()
                .map(|e| {
                    let n = model.param(e.param).len();
                    let order = r.sample_indices(n, n);
                    let mut rank = vec![0usize; n];
                    for (pos, i) in order.into_iter().enumerate() {
                        rank[i] = pos;
                    }
                    rank
                })
                .collect()
        });
        let masks = MaskSet::all_kept(&set, model);
        Ok(Self { set, masks, mode, scope, schedule, random_order, current_sparsity: 0.0, released: false })
    }

    /// Pruner holding fixed, externally built masks.
    pub fn with_masks(model: &Model, mode: PruneMode, masks: MaskSet) -> Result<Self> {
        let set = model.prunable_set();
        if masks.names.iter().map(String::as_str).ne(set.names()) {
            return Err(Error::Incompatible("mask set does not match the model's prunable matrices".into()));
        }
        for (e, m) in set.entries().iter().zip(&masks.masks) {
            if model.param(e.param).shape() != m.shape() {
                return Err(Error::shape("Pruner::with_masks", model.param(e.param).shape(), m.shape()));
            }
        }
        let current_sparsity = masks.sparsity();
        Ok(Self { set, masks, mode, scope: PruneScope::MatrixLocal, schedule: None, random_order: None, current_sparsity, released: false })
    }

    pub fn mode(&self) -> PruneMode {
        self.mode
    }

    pub fn masks(&self) -> &MaskSet {
        &self.masks
    }

    pub fn current_sparsity(&self) -> f64 {
        self.current_sparsity
    }

    pub fn schedule(&self) -> Option<&SparsitySchedule> {
        self.schedule.as_ref()
    }

    /// Recomputes masks at `sparsity` from the model's current weights and zeroes the pruned positions.
    pub fn prune_to(&mut self, model: &mut Model, sparsity: f64) -> Result<()> {
        check_sparsity(sparsity)?;
        self.masks = match &self.random_order {
            Some(orders) => {
                let mut masks = Vec::with_capacity(orders.len());
                for (e, rank) in self.set.entries().iter().zip(orders) {
                    let w = model.param(e.param);
                    let k = prune_count(sparsity, w.len());
                    masks.push(PruneMask::from_keep(w.rows(), w.cols(), rank.iter().map(|&r| r >= k).collect())?);
                }
                MaskSet { names: self.masks.names.clone(), masks }
            }
            None => build_masks(model, &self.set, sparsity, self.scope)?,
        };
        self.current_sparsity = sparsity;
        self.released = false;
        self.zero_pruned(model)
    }

    /// Applies the schedule at `step`; returns whether masks changed.
    pub fn on_step(&mut self, model: &mut Model, step: usize) -> Result<bool> {
        let Some(s) = &self.schedule else { return Ok(false) };
        if !s.is_update_step(step) {
            return Ok(false);
        }
        let target = s.sparsity_at(step);
        self.prune_to(model, target)?;
        Ok(true)
    }

    fn zero_pruned(&self, model: &mut Model) -> Result<()> {
        for (e, m) in self.set.entries().iter().zip(&self.masks.masks) {
            apply_mask_in_place(model.param_mut(e.param), m)?;
        }
        Ok(())
    }

    /// Re-zeroes masked weights after an optimizer step. No-op for
    /// information deletion or once the mask has been released.
    pub fn enforce(&self, model: &mut Model) -> Result<()> {
        if self.mode.holds_mask() && !self.released {
            self.zero_pruned(model)?;
        }
        Ok(())
    }

    /// Zeroes gradients of masked weights before the optimizer sees them.
    pub fn mask_gradients(&self, grads: &mut Gradients) -> Result<()> {
        if !self.mode.holds_mask() || self.released {
            return Ok(());
        }
        for (e, m) in self.set.entries().iter().zip(&self.masks.masks) {
            apply_mask_in_place(&mut grads.tensors[e.param], m)?;
        }
        Ok(())
    }

    /// Stops enforcing the mask; weights become free to move again.
    pub fn release(&mut self) {
        self.released = true;
    }

    pub fn meta(&self, seed: u64) -> MaskMeta {
        MaskMeta { scope: self.scope, sparsity: self.current_sparsity, mode: self.mode, seed }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(v: &[f32]) -> Tensor2D {
        Tensor2D::from_rows(&[v])
    }

    #[test]
    fn threshold_examples() {
        let w = t(&[1.0, -2.0, 3.0, -4.0]);
        assert_eq!(magnitude_threshold(&w, 0.5).unwrap(), 2.0);
        assert_eq!(magnitude_mask(&w, 0.5).unwrap().keep(), &[false, false, true, true]);
        assert!(magnitude_threshold(&w, 0.0).unwrap() < 1.0);
        assert_eq!(magnitude_mask(&w, 0.0).unwrap().pruned_count(), 0);
        assert_eq!(magnitude_mask(&w, 1.0).unwrap().pruned_count(), 4);
        assert!(magnitude_threshold(&w, 1.5).is_err());
        assert!(magnitude_threshold(&w, -0.1).is_err());
    }

    #[test]
    fn prune_count_rounds_representation_error() {
        assert_eq!(prune_count(0.3, 10), 3);
        assert_eq!(prune_count(0.7, 10), 7);
        assert_eq!(prune_count(0.31, 10), 4);
        assert_eq!(prune_count(0.5, 10_000), 5000);
    }

    #[test]
    fn ties_broken_by_index() {
        let w = t(&[1.0, 1.0, 1.0, 1.0]);
        assert_eq!(magnitude_mask(&w, 0.5).unwrap().keep(), &[false, false, true, true]);
    }

    #[test]
    fn global_vs_local() {
        let big = t(&[10.0, 11.0, 12.0, 13.0]);
        let small = t(&[0.1, 0.2, 0.3, 0.4]);
        let kinds = [MatrixKind::FfnIn, MatrixKind::FfnOut];
        let g = build_masks_for(&[&big, &small], &kinds, 0.5, PruneScope::Global).unwrap();
        assert_eq!(g[0].pruned_count(), 0);
        assert_eq!(g[1].pruned_count(), 4);
        let l = build_masks_for(&[&big, &small], &kinds, 0.5, PruneScope::MatrixLocal).unwrap();
        assert!(l.iter().all(|m| m.pruned_count() == 2));
        let g0 = build_masks_for(&[&big, &small], &kinds, 0.0, PruneScope::Global).unwrap();
        let l0 = build_masks_for(&[&big, &small], &kinds, 0.0, PruneScope::MatrixLocal).unwrap();
        assert_eq!(g0, l0);
        assert!(matches!(build_masks_for(&[], &[], 0.5, PruneScope::Global), Err(Error::EmptyPrunableSet)));
    }

    #[test]
    fn per_head_scope_thresholds_each_block() {
        // Head 0 holds all the small values; per-head still prunes half of each head.
        let w = Tensor2D::from_rows(&[[0.1, 0.2, 5.0, 6.0], [0.3, 0.4, 7.0, 8.0]]);
        let m = build_masks_for(&[&w], &[MatrixKind::Query], 0.5, PruneScope::PerHead { num_heads: 2 }).unwrap();
        assert_eq!(m[0].keep(), &[false, false, false, false, true, true, true, true]);
        let local = magnitude_mask(&w, 0.5).unwrap();
        assert_eq!(local.keep(), &[false, false, true, true, false, false, true, true]);
    }

    #[test]
    fn apply_mask_zeroes_exactly() {
        let w = t(&[1.0, -2.0, 3.0]);
        let m = PruneMask::from_keep(1, 3, vec![true, false, true]).unwrap();
        assert_eq!(apply_mask(&w, &m).unwrap().data(), &[1.0, 0.0, 3.0]);
        assert_eq!(apply_mask(&w, &PruneMask::all_kept(1, 3)).unwrap(), w);
        assert!(apply_mask(&w, &PruneMask::all_kept(3, 1)).is_err());
    }

    #[test]
    fn schedule_endpoints_and_midpoint() {
        let s = SparsitySchedule::new(0.9, 0, 10_000, 100).unwrap();
        assert_eq!(s.sparsity_at(0), 0.0);
        assert_eq!(s.sparsity_at(10_000), 0.9);
        assert_eq!(s.sparsity_at(50_000), 0.9);
        assert!((s.sparsity_at(5000) - 0.7875).abs() < 1e-9);
        let s = SparsitySchedule::new(0.5, 100, 10, 3).unwrap();
        assert_eq!(s.sparsity_at(50), 0.0);
        assert_eq!(s.sparsity_at(100), 0.0);
        let updates: Vec<usize> = (0..200).filter(|&t| s.is_update_step(t)).collect();
        assert_eq!(updates, vec![103, 106, 109, 110]);
        assert!(SparsitySchedule::new(0.5, 0, 0, 1).is_err());
    }

    #[test]
    fn random_mask_exact_count_and_determinism() {
        let mut r = RngState::new(1);
        assert_eq!(random_mask(100, 100, 0.0, &mut r).unwrap().pruned_count(), 0);
        let a = random_mask(100, 100, 0.5, &mut RngState::new(7)).unwrap();
        assert_eq!(a.pruned_count(), 5000);
        assert_eq!(a, random_mask(100, 100, 0.5, &mut RngState::new(7)).unwrap());
        assert_ne!(a, random_mask(100, 100, 0.5, &mut RngState::new(8)).unwrap());
    }

    #[test]
    fn mask_bytes_reject_garbage() {
        assert!(PruneMask::from_bytes(1, 2, &[0, 2]).is_err());
        let m = PruneMask::from_keep(1, 3, vec![true, false, true]).unwrap();
        assert_eq!(PruneMask::from_bytes(1, 3, &m.to_bytes()).unwrap(), m);
    }
}
