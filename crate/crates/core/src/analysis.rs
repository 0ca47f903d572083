//! Measurements on masks, weights and features.
//!
//! Report files use stable schemas: every report type serializes to JSON
//! through serde and offers a `to_csv` with a fixed header row.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::write_file;
use crate::error::{Error, Result};
use crate::model::{MatrixKind, Model, PrunableSet, TokenId};
use crate::pruning::{prune_count, MaskSet, PruneMask};
use crate::tensor::{cosine, Tensor2D};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixDiff {
    pub name: String,
    pub differing: usize,
    pub total: usize,
    pub fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskDiffReport {
    pub matrices: Vec<MatrixDiff>,
    /// Pooled over all matrices.
    pub overall: f64,
}

impl MaskDiffReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("matrix,differing,total,fraction\n");
        for m in &self.matrices {
            let _ = writeln!(out, "{},{},{},{}", m.name, m.differing, m.total, m.fraction);
        }
        let total: usize = self.matrices.iter().map(|m| m.total).sum();
        let differing: usize = self.matrices.iter().map(|m| m.differing).sum();
        let _ = writeln!(out, "overall,{differing},{total},{}", self.overall);
        out
    }
}

/// Hamming distance between two congruent masks, normalized by their size.
pub fn mask_hamming(a: &PruneMask, b: &PruneMask) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape("mask_hamming", a.shape(), b.shape()));
    }
    if a.is_empty() {
        return Ok(0.0);
    }
    Ok(differing(a, b) as f64 / a.len() as f64)
}

fn differing(a: &PruneMask, b: &PruneMask) -> usize {
    a.keep().iter().zip(b.keep()).filter(|(x, y)| x != y).count()
}

/// Fraction of positions whose pruned/kept status differs, per matrix and pooled.
/// Both sets must name the same matrices with equal shapes and pruned counts.
pub fn mask_diff(a: &MaskSet, b: &MaskSet) -> Result<MaskDiffReport> {
    if a.names != b.names {
        return Err(Error::Incompatible("mask sets name different matrices".into()));
    }
    let mut matrices = Vec::with_capacity(a.names.len());
    let (mut diff_total, mut total) = (0usize, 0usize);
    for ((name, ma), mb) in a.names.iter().zip(&a.masks).zip(&b.masks) {
        if ma.shape() != mb.shape() {
            return Err(Error::shape("mask_diff", ma.shape(), mb.shape()));
        }
        if ma.pruned_count() != mb.pruned_count() {
            return Err(Error::Incompatible(format!(
                "{name}: masks prune {} and {} weights; sparsities must match",
                ma.pruned_count(),
                mb.pruned_count()
            )));
        }
        let d = differing(ma, mb);
        diff_total += d;
        total += ma.len();
        let fraction = if ma.is_empty() { 0.0 } else { d as f64 / ma.len() as f64 };
        matrices.push(MatrixDiff { name: name.clone(), differing: d, total: ma.len(), fraction });
    }
    let overall = if total == 0 { 0.0 } else { diff_total as f64 / total as f64 };
    Ok(MaskDiffReport { matrices, overall })
}

/// Expected mask difference between two independent uniformly random masks at sparsity `s`.
pub fn random_mask_diff_baseline(s: f64) -> f64 {
    2.0 * s * (1.0 - s)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MovementReport {
    pub count: usize,
    /// Mean displacement in percent of the matrix size.
    pub mean: f64,
    /// Population standard deviation of the displacement.
    pub std: f64,
    /// Mean displacement of the weights in each starting-magnitude decile,
    /// smallest magnitudes first. Empty deciles report 0.
    pub decile_mean: [f64; 10],
    pub decile_count: [usize; 10],
}

/// Ascending rank of each element by `|value|`, ties broken by flat index.
pub fn magnitude_ranks(w: &Tensor2D) -> Vec<usize> {
    let data = w.data();
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.sort_by(|&i, &j| data[i].abs().total_cmp(&data[j].abs()).then(i.cmp(&j)));
    let mut rank = vec![0usize; data.len()];
    for (r, i) in order.into_iter().enumerate() {
        rank[i] = r;
    }
    rank
}

/// Per-weight sort-order displacement `|rank_before - rank_after| / N * 100`.
pub fn displacements(before: &Tensor2D, after: &Tensor2D) -> Result<(Vec<f64>, Vec<usize>)> {
    if before.shape() != after.shape() {
        return Err(Error::shape("sort_order_movement", before.shape(), after.shape()));
    }
    let n = before.len();
    let (rb, ra) = (magnitude_ranks(before), magnitude_ranks(after));
    let disp = rb.iter().zip(&ra).map(|(&b, &a)| b.abs_diff(a) as f64 / n as f64 * 100.0).collect();
    let deciles = rb.iter().map(|&r| r * 10 / n.max(1)).collect();
    Ok((disp, deciles))
}

fn summarize(disp: &[f64], deciles: &[usize]) -> MovementReport {
    let count = disp.len();
    if count == 0 {
        return MovementReport { count, mean: 0.0, std: 0.0, decile_mean: [0.0; 10], decile_count: [0; 10] };
    }
    let mean = disp.iter().sum::<f64>() / count as f64;
    let std = (disp.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / count as f64).sqrt();
    let mut sums = [0.0f64; 10];
    let mut decile_count = [0usize; 10];
    for (&d, &k) in disp.iter().zip(deciles) {
        sums[k] += d;
        decile_count[k] += 1;
    }
    let mut decile_mean = [0.0; 10];
    for k in 0..10 {
        if decile_count[k] > 0 {
            decile_mean[k] = sums[k] / decile_count[k] as f64;
        }
    }
    MovementReport { count, mean, std, decile_mean, decile_count }
}

pub fn sort_order_movement(before: &Tensor2D, after: &Tensor2D) -> Result<MovementReport> {
    let (disp, deciles) = displacements(before, after)?;
    Ok(summarize(&disp, &deciles))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMovement {
    pub matrices: Vec<(String, MovementReport)>,
    /// All weights of all matrices, each ranked within its own matrix.
    pub pooled: MovementReport,
}

impl ModelMovement {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("matrix,count,mean,std");
        for k in 0..10 {
            let _ = write!(out, ",decile{k}");
        }
        out.push('\n');
        for (name, r) in self.matrices.iter().map(|(n, r)| (n.as_str(), r)).chain([("pooled", &self.pooled)]) {
            let _ = write!(out, "{name},{},{},{}", r.count, r.mean, r.std);
            for d in r.decile_mean {
                let _ = write!(out, ",{d}");
            }
            out.push('\n');
        }
        out
    }
}

/// Sort-order movement of every prunable matrix between two compatible models.
pub fn model_movement(before: &Model, after: &Model, set: &PrunableSet) -> Result<ModelMovement> {
    if before.config() != after.config() {
        return Err(Error::Incompatible("models have different configurations".into()));
    }
    let mut matrices = Vec::with_capacity(set.len());
    let (mut all_disp, mut all_dec) = (Vec::new(), Vec::new());
    for e in set.entries() {
        let (disp, dec) = displacements(before.param(e.param), after.param(e.param))?;
        matrices.push((e.name.clone(), summarize(&disp, &dec)));
        all_disp.extend(disp);
        all_dec.extend(dec);
    }
    Ok(ModelMovement { matrices, pooled: summarize(&all_disp, &all_dec) })
}

/// Pruned fraction of each stacked-head column block of `mask`.
pub fn head_prune_stats(mask: &PruneMask, num_heads: usize) -> Result<Vec<f64>> {
    let counts = head_pruned_counts(mask, num_heads)?;
    let per_head = mask.rows() * (mask.cols() / num_heads);
    Ok(counts.into_iter().map(|c| if per_head == 0 { 0.0 } else { c as f64 / per_head as f64 }).collect())
}

/// Pruned weight count of each head's column block.
pub fn head_pruned_counts(mask: &PruneMask, num_heads: usize) -> Result<Vec<usize>> {
    if num_heads == 0 || !mask.cols().is_multiple_of(num_heads) {
        return Err(Error::InvalidParameter(format!("{} columns do not split into {num_heads} equal heads", mask.cols())));
    }
    let dh = mask.cols() / num_heads;
    let mut counts = vec![0usize; num_heads];
    for r in 0..mask.rows() {
        for c in 0..mask.cols() {
            if !mask.is_kept(r, c) {
                counts[c / dh] += 1;
            }
        }
    }
    Ok(counts)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadMatrixStats {
    pub name: String,
    pub layer: usize,
    pub fractions: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadPruneStats {
    pub sparsity: f64,
    pub matrices: Vec<HeadMatrixStats>,
    pub min: f64,
    pub mean: f64,
    pub max: f64,
}

impl HeadPruneStats {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("matrix,layer,head,fraction\n");
        for m in &self.matrices {
            for (h, f) in m.fractions.iter().enumerate() {
                let _ = writeln!(out, "{},{},{h},{f}", m.name, m.layer);
            }
        }
        out
    }
}

/// Per-head pruned fractions of every key, query and value mask in `masks`.
pub fn model_head_stats(masks: &MaskSet, set: &PrunableSet, num_heads: usize, sparsity: f64) -> Result<HeadPruneStats> {
    let mut matrices = Vec::new();
    for e in set.entries().iter().filter(|e| e.kind.is_stacked_head()) {
        let m = masks.get(&e.name).ok_or_else(|| Error::NotFound(format!("mask for {}", e.name)))?;
        matrices.push(HeadMatrixStats { name: e.name.clone(), layer: e.layer.unwrap_or(0), fractions: head_prune_stats(m, num_heads)? });
    }
    let all: Vec<f64> = matrices.iter().flat_map(|m| m.fractions.iter().copied()).collect();
    if all.is_empty() {
        return Err(Error::EmptyPrunableSet);
    }
    let min = all.iter().copied().fold(f64::INFINITY, f64::min);
    let max = all.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mean = all.iter().sum::<f64>() / all.len() as f64;
    Ok(HeadPruneStats { sparsity, matrices, min, mean, max })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CosineSimReport {
    /// Mean over examples of the per-example cosine, first layer first.
    pub per_layer: Vec<f64>,
    pub examples: usize,
}

impl CosineSimReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,cosine\n");
        for (l, c) in self.per_layer.iter().enumerate() {
            let _ = writeln!(out, "{l},{c}");
        }
        out
    }
}

/// Layer-wise cosine similarity of mean-pooled features of two models.
pub fn layer_cosine_sim<S: AsRef<[TokenId]>>(a: &Model, b: &Model, sequences: &[S]) -> Result<CosineSimReport> {
    if a.config() != b.config() {
        return Err(Error::Incompatible("models have different configurations".into()));
    }
    if sequences.is_empty() {
        return Err(Error::InvalidParameter("cosine similarity needs at least one sequence".into()));
    }
    let mut sums = vec![0.0f64; a.config().num_layers];
    for s in sequences {
        let (fa, fb) = (a.extract_features(s.as_ref())?, b.extract_features(s.as_ref())?);
        for ((acc, x), y) in sums.iter_mut().zip(&fa).zip(&fb) {
            *acc += cosine(x, y);
        }
    }
    let n = sequences.len() as f64;
    Ok(CosineSimReport { per_layer: sums.into_iter().map(|s| s / n).collect(), examples: sequences.len() })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightStat {
    pub name: String,
    pub kind: MatrixKind,
    pub count: usize,
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
}

pub fn tensor_stats(w: &Tensor2D) -> (f64, f64) {
    if w.is_empty() {
        return (0.0, 0.0);
    }
    let n = w.len() as f64;
    let mean = w.data().iter().map(|&v| f64::from(v)).sum::<f64>() / n;
    let var = w.data().iter().map(|&v| (f64::from(v) - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Mean and standard deviation of every matrix in `set`.
pub fn weight_stats(model: &Model, set: &PrunableSet) -> Vec<WeightStat> {
    set.entries()
        .iter()
        .map(|e| {
            let w = model.param(e.param);
            let (mean, std) = tensor_stats(w);
            WeightStat { name: e.name.clone(), kind: e.kind, count: w.len(), mean, std }
        })
        .collect()
}

pub fn weight_stats_csv(stats: &[WeightStat]) -> String {
    let mut out = String::from("matrix,count,mean,std\n");
    for s in stats {
        let _ = writeln!(out, "{},{},{},{}", s.name, s.count, s.mean, s.std);
    }
    out
}

/// Sum of `|w|` over the weights one-shot magnitude pruning removes at each
/// level of the ascending `grid`.
pub fn pruned_mass(weights: &Tensor2D, grid: &[f64]) -> Result<Vec<f64>> {
    check_grid(grid)?;
    let mut mags: Vec<f64> = weights.data().iter().map(|v| f64::from(v.abs())).collect();
    mags.sort_by(f64::total_cmp);
    let mut prefix = Vec::with_capacity(mags.len() + 1);
    prefix.push(0.0);
    for m in &mags {
        prefix.push(prefix.last().copied().unwrap_or(0.0) + m);
    }
    Ok(grid.iter().map(|&s| prefix[prune_count(s, mags.len())]).collect())
}

fn check_grid(grid: &[f64]) -> Result<()> {
    if grid.iter().any(|s| !(0.0..=1.0).contains(s)) {
        return Err(Error::InvalidParameter("sparsity grid values must lie in [0, 1]".into()));
    }
    if grid.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::InvalidParameter("sparsity grid must be ascending".into()));
    }
    Ok(())
}

/// [`pruned_mass`] summed over every matrix of `set` under matrix-local pruning.
pub fn model_pruned_mass(model: &Model, set: &PrunableSet, grid: &[f64]) -> Result<Vec<f64>> {
    let mut total = vec![0.0; grid.len()];
    for e in set.entries() {
        for (t, m) in total.iter_mut().zip(pruned_mass(model.param(e.param), grid)?) {
            *t += m;
        }
    }
    Ok(total)
}

/// Grayscale level of `|v|` under the linear map `0 -> 0`, `max -> 255`.
pub fn gray_level(v: f32, max: f32) -> u8 {
    if max <= 0.0 {
        0
    } else {
        (f64::from(v.abs()) / f64::from(max) * 255.0).round().clamp(0.0, 255.0) as u8
    }
}

/// Writes `|matrix|` as `<stem>.csv` and as a plain PGM image `<stem>.pgm`
/// (one pixel per element, linear from 0 to the matrix's own maximum).
pub fn export_heatmap(matrix: &Tensor2D, stem: impl AsRef<Path>) -> Result<(PathBuf, PathBuf)> {
    let stem = stem.as_ref();
    let csv_path = stem.with_extension("csv");
    let pgm_path = stem.with_extension("pgm");
    let max = matrix.data().iter().fold(0.0f32, |m, v| m.max(v.abs()));
    let mut csv = String::new();
    let mut pgm = format!("P2\n{} {}\n255\n", matrix.cols(), matrix.rows());
    for r in 0..matrix.rows() {
        let row = matrix.row(r);
        csv.push_str(&row.iter().map(|v| v.abs().to_string()).collect::<Vec<_>>().join(","));
        csv.push('\n');
        pgm.push_str(&row.iter().map(|&v| gray_level(v, max).to_string()).collect::<Vec<_>>().join(" "));
        pgm.push('\n');
    }
    write_file(&csv_path, csv.as_bytes())?;
    write_file(&pgm_path, pgm.as_bytes())?;
    Ok((csv_path, pgm_path))
}

/// Parses a heatmap CSV back into a matrix of magnitudes.
pub fn read_heatmap_csv(path: impl AsRef<Path>) -> Result<Tensor2D> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let rows: Vec<Vec<f32>> = text
        .lines()
        .enumerate()
        .map(|(i, line)| {
            line.split(',')
                .map(|v| v.trim().parse::<f32>().map_err(|e| Error::Corrupt(format!("{}:{}: {e}", path.display(), i + 1))))
                .collect()
        })
        .collect::<Result<_>>()?;
    let cols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != cols) {
        return Err(Error::Corrupt(format!("{}: ragged rows", path.display())));
    }
    Tensor2D::from_vec(rows.len(), cols, rows.concat())
}
