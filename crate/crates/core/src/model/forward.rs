use super::ops::{cross_entropy, gelu, gelu_grad, layer_norm, layer_norm_backward, softmax_rows, softmax_rows_backward, LnCache};
use super::{Gradients, Model, TokenId};
use crate::error::{Error, Result};
use crate::rng::RngState;
use crate::tensor::{matmul, matmul_nt, matmul_nt_acc, matmul_tn_acc, Tensor2D};

/// Evaluation disables dropout; training draws dropout masks from the given stream.
pub enum Mode<'a> {
    Eval,
    Train(&'a mut RngState),
}

#[derive(Debug, Clone)]
struct LayerTrace {
    input: Tensor2D,
    q: Tensor2D,
    k: Tensor2D,
    v: Tensor2D,
    probs: Vec<Tensor2D>,
    ctx: Tensor2D,
    attn_drop: Option<Vec<f32>>,
    ln1: LnCache,
    h1: Tensor2D,
    ffn_pre: Tensor2D,
    ffn_act: Tensor2D,
    ffn_drop: Option<Vec<f32>>,
    ln2: LnCache,
    output: Tensor2D,
}

#[derive(Debug, Clone)]
enum HeadTrace {
    Mlm { pre: Tensor2D, ln: LnCache, transformed: Tensor2D },
    Classifier { first: Tensor2D, pooled: Tensor2D },
}

/// Activations saved by [`Model::forward`] for backprop and feature extraction.
///
/// A batch is stored with the rows of all its sequences stacked.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    generation: u64,
    tokens: Vec<TokenId>,
    /// Row offset of each sequence, plus the total row count at the end.
    offsets: Vec<usize>,
    emb_ln: LnCache,
    emb_drop: Option<Vec<f32>>,
    layers: Vec<LayerTrace>,
    head: HeadTrace,
}

impl ForwardTrace {
    /// Output of each encoder layer, `(total_rows, hidden)`, first layer first.
    pub fn layer_outputs(&self) -> impl Iterator<Item = &Tensor2D> {
        self.layers.iter().map(|l| &l.output)
    }

    /// Tokens of all sequences, concatenated.
    pub fn tokens(&self) -> &[TokenId] {
        &self.tokens
    }

    pub fn batch_size(&self) -> usize {
        self.offsets.len() - 1
    }

    /// Row range of sequence `b` within the stacked activations.
    pub fn rows_of(&self, b: usize) -> std::ops::Range<usize> {
        self.offsets[b]..self.offsets[b + 1]
    }
}

fn dropout(x: &mut Tensor2D, rate: f32, mode: &mut Mode<'_>) -> Option<Vec<f32>> {
    match mode {
        Mode::Train(rng) if rate > 0.0 => {
            let keep = 1.0 / (1.0 - rate);
            let mask: Vec<f32> = (0..x.len()).map(|_| if rng.uniform() < rate { 0.0 } else { keep }).collect();
            for (v, m) in x.data_mut().iter_mut().zip(&mask) {
                *v *= m;
            }
            Some(mask)
        }
        _ => None,
    }
}

fn apply_mask(x: &mut Tensor2D, mask: &Option<Vec<f32>>) {
    if let Some(m) = mask {
        for (v, k) in x.data_mut().iter_mut().zip(m) {
            *v *= k;
        }
    }
}

fn linear(x: &Tensor2D, w: &Tensor2D, b: &Tensor2D) -> Result<Tensor2D> {
    let mut y = matmul(x, w)?;
    y.add_row_broadcast(b)?;
    Ok(y)
}

#[inline]
fn dot(a: &[f32], b: &[f32]) -> f32 {
    let mut lanes = [0.0f32; 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let tail: f32 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for i in 0..8 {
            lanes[i] += x[i] * y[i];
        }
    }
    lanes.iter().sum::<f32>() + tail
}

#[inline]
fn axpy(y: &mut [f32], a: f32, x: &[f32]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

fn acc(dst: &mut Tensor2D, src: &Tensor2D) {
    for (a, b) in dst.data_mut().iter_mut().zip(src.data()) {
        *a += b;
    }
}

impl Model {
    fn check_tokens(&self, tokens: &[TokenId]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::InvalidParameter("empty token sequence".into()));
        }
        if tokens.len() > self.config().max_len {
            return Err(Error::SequenceTooLong { len: tokens.len(), max: self.config().max_len });
        }
        let vocab = self.config().vocab;
        if let Some((pos, &id)) = tokens.iter().enumerate().find(|(_, &t)| t as usize >= vocab) {
            return Err(Error::TokenOutOfRange { id, pos, vocab });
        }
        Ok(())
    }

    /// Runs the encoder and the attached head on one sequence.
    ///
    /// Returns `(seq_len, vocab)` MLM logits, or `(1, num_classes)` logits
    /// from the first position when a classifier is attached.
    pub fn forward(&self, tokens: &[TokenId], mode: Mode<'_>) -> Result<(Tensor2D, ForwardTrace)> {
        self.forward_batch(&[tokens], mode)
    }

    /// Batched [`Model::forward`]. MLM logits stack the rows of every
    /// sequence in order; classifier logits have one row per sequence.
    pub fn forward_batch<S: AsRef<[TokenId]>>(&self, batch: &[S], mut mode: Mode<'_>) -> Result<(Tensor2D, ForwardTrace)> {
        if batch.is_empty() {
            return Err(Error::InvalidParameter("empty batch".into()));
        }
        let mut offsets = Vec::with_capacity(batch.len() + 1);
        let mut tokens = Vec::new();
        offsets.push(0);
        for seq in batch {
            self.check_tokens(seq.as_ref())?;
            tokens.extend_from_slice(seq.as_ref());
            offsets.push(tokens.len());
        }
        let cfg = self.config();
        let (rows, d) = (tokens.len(), cfg.hidden);
        let p = self.params();

        let mut emb = Tensor2D::zeros(rows, d);
        for b in 0..batch.len() {
            for (i, r) in (offsets[b]..offsets[b + 1]).enumerate() {
                let w = p[self.idx.tok_emb].row(tokens[r] as usize);
                let pe = p[self.idx.pos_emb].row(i);
                for ((o, a), c) in emb.row_mut(r).iter_mut().zip(w).zip(pe) {
                    *o = a + c;
                }
            }
        }
        let (mut h, emb_ln) = layer_norm(&emb, &p[self.idx.emb_ln_g], &p[self.idx.emb_ln_b]);
        let emb_drop = dropout(&mut h, cfg.dropout, &mut mode);

        let dh = cfg.head_dim();
        let scale = 1.0 / (dh as f32).sqrt();
        let mut layers = Vec::with_capacity(self.layers.len());
        for li in &self.layers {
            let input = h;
            let q = linear(&input, &p[li.wq], &p[li.bq])?;
            let k = linear(&input, &p[li.wk], &p[li.bk])?;
            let v = linear(&input, &p[li.wv], &p[li.bv])?;
            let mut ctx = Tensor2D::zeros(rows, d);
            let mut probs = Vec::with_capacity(batch.len() * cfg.num_heads);
            for b in 0..batch.len() {
                let (r0, n) = (offsets[b], offsets[b + 1] - offsets[b]);
                for head in 0..cfg.num_heads {
                    let c0 = head * dh;
                    let mut s = Tensor2D::zeros(n, n);
                    for i in 0..n {
                        let qi = &q.row(r0 + i)[c0..c0 + dh];
                        for (j, sij) in s.row_mut(i).iter_mut().enumerate() {
                            *sij = dot(qi, &k.row(r0 + j)[c0..c0 + dh]) * scale;
                        }
                    }
                    softmax_rows(&mut s);
                    for i in 0..n {
                        let mut out = vec![0.0f32; dh];
                        for (j, &pij) in s.row(i).iter().enumerate() {
                            axpy(&mut out, pij, &v.row(r0 + j)[c0..c0 + dh]);
                        }
                        ctx.row_mut(r0 + i)[c0..c0 + dh].copy_from_slice(&out);
                    }
                    probs.push(s);
                }
            }
            let mut attn = linear(&ctx, &p[li.wo], &p[li.bo])?;
            let attn_drop = dropout(&mut attn, cfg.dropout, &mut mode);
            attn.add_assign(&input)?;
            let (h1, ln1) = layer_norm(&attn, &p[li.ln1_g], &p[li.ln1_b]);
            let ffn_pre = linear(&h1, &p[li.w1], &p[li.b1])?;
            let ffn_act = ffn_pre.map(gelu);
            let mut ffn = linear(&ffn_act, &p[li.w2], &p[li.b2])?;
            let ffn_drop = dropout(&mut ffn, cfg.dropout, &mut mode);
            ffn.add_assign(&h1)?;
            let (output, ln2) = layer_norm(&ffn, &p[li.ln2_g], &p[li.ln2_b]);
            h = output.clone();
            layers.push(LayerTrace { input, q, k, v, probs, ctx, attn_drop, ln1, h1, ffn_pre, ffn_act, ffn_drop, ln2, output });
        }

        let (logits, head) = match self.classifier {
            Some(c) => {
                let mut first = Tensor2D::zeros(batch.len(), d);
                for b in 0..batch.len() {
                    first.row_mut(b).copy_from_slice(h.row(offsets[b]));
                }
                let pooled = linear(&first, &p[c.pool_w], &p[c.pool_b])?.map(f32::tanh);
                let logits = linear(&pooled, &p[c.out_w], &p[c.out_b])?;
                (logits, HeadTrace::Classifier { first, pooled })
            }
            None => {
                let pre = linear(&h, &p[self.idx.mlm_w], &p[self.idx.mlm_b])?;
                let (transformed, ln) = layer_norm(&pre.map(gelu), &p[self.idx.mlm_ln_g], &p[self.idx.mlm_ln_b]);
                let mut logits = matmul_nt(&transformed, &p[self.idx.tok_emb])?;
                logits.add_row_broadcast(&p[self.idx.mlm_bias])?;
                (logits, HeadTrace::Mlm { pre, ln, transformed })
            }
        };
        let trace = ForwardTrace { generation: self.generation(), tokens, offsets, emb_ln, emb_drop, layers, head };
        Ok((logits, trace))
    }

    /// Backpropagates `loss_grad` (the gradient w.r.t. the logits returned by
    /// [`Model::forward`]) and returns a fresh gradient set.
    pub fn backward(&self, trace: &ForwardTrace, loss_grad: &Tensor2D) -> Result<Gradients> {
        let mut g = Gradients::zeros_like(self);
        self.backward_into(trace, loss_grad, &mut g)?;
        Ok(g)
    }

    /// Like [`Model::backward`] but adds into an existing gradient set.
    pub fn backward_into(&self, trace: &ForwardTrace, loss_grad: &Tensor2D, grads: &mut Gradients) -> Result<()> {
        if trace.generation != self.generation() {
            return Err(Error::StaleTrace(format!(
                "trace taken at parameter generation {}, model is at {}",
                trace.generation,
                self.generation()
            )));
        }
        if grads.tensors.len() != self.num_params() {
            return Err(Error::StaleTrace(format!("gradient set has {} tensors, model has {}", grads.tensors.len(), self.num_params())));
        }
        let cfg = self.config();
        let rows = trace.tokens.len();
        let batch = trace.batch_size();
        let d = cfg.hidden;
        let p = self.params();
        let gt = &mut grads.tensors;

        let mut dh = match (&trace.head, self.classifier) {
            (HeadTrace::Mlm { pre, ln, transformed }, None) => {
                if loss_grad.shape() != (rows, cfg.vocab) {
                    return Err(Error::shape("backward(mlm)", loss_grad.shape(), (rows, cfg.vocab)));
                }
                matmul_tn_acc(loss_grad, transformed, &mut gt[self.idx.tok_emb])?;
                acc(&mut gt[self.idx.mlm_bias], &loss_grad.sum_rows());
                let dt = matmul(loss_grad, &p[self.idx.tok_emb])?;
                let (dg, dgam, dbet) = layer_norm_backward(&dt, ln, &p[self.idx.mlm_ln_g]);
                acc(&mut gt[self.idx.mlm_ln_g], &dgam);
                acc(&mut gt[self.idx.mlm_ln_b], &dbet);
                let mut dz = dg;
                for (g, &z) in dz.data_mut().iter_mut().zip(pre.data()) {
                    *g *= gelu_grad(z);
                }
                let last = &trace.layers.last().expect("at least one layer").output;
                matmul_tn_acc(last, &dz, &mut gt[self.idx.mlm_w])?;
                acc(&mut gt[self.idx.mlm_b], &dz.sum_rows());
                matmul_nt(&dz, &p[self.idx.mlm_w])?
            }
            (HeadTrace::Classifier { first, pooled }, Some(c)) => {
                if loss_grad.shape() != (batch, c.num_classes) {
                    return Err(Error::shape("backward(classifier)", loss_grad.shape(), (batch, c.num_classes)));
                }
                matmul_tn_acc(pooled, loss_grad, &mut gt[c.out_w])?;
                acc(&mut gt[c.out_b], &loss_grad.sum_rows());
                let mut da = matmul_nt(loss_grad, &p[c.out_w])?;
                for (g, &y) in da.data_mut().iter_mut().zip(pooled.data()) {
                    *g *= 1.0 - y * y;
                }
                matmul_tn_acc(first, &da, &mut gt[c.pool_w])?;
                acc(&mut gt[c.pool_b], &da.sum_rows());
                let dfirst = matmul_nt(&da, &p[c.pool_w])?;
                let mut dh = Tensor2D::zeros(rows, d);
                for b in 0..batch {
                    dh.row_mut(trace.offsets[b]).copy_from_slice(dfirst.row(b));
                }
                dh
            }
            _ => return Err(Error::StaleTrace("trace head does not match the model's attached head".into())),
        };

        let dhd = cfg.head_dim();
        let scale = 1.0 / (dhd as f32).sqrt();
        for (li, lt) in self.layers.iter().zip(&trace.layers).rev() {
            let (dr2, dg2, db2) = layer_norm_backward(&dh, &lt.ln2, &p[li.ln2_g]);
            acc(&mut gt[li.ln2_g], &dg2);
            acc(&mut gt[li.ln2_b], &db2);
            let mut dh1 = dr2.clone();
            let mut df = dr2;
            apply_mask(&mut df, &lt.ffn_drop);
            matmul_tn_acc(&lt.ffn_act, &df, &mut gt[li.w2])?;
            acc(&mut gt[li.b2], &df.sum_rows());
            let mut dpre = matmul_nt(&df, &p[li.w2])?;
            for (g, &z) in dpre.data_mut().iter_mut().zip(lt.ffn_pre.data()) {
                *g *= gelu_grad(z);
            }
            matmul_tn_acc(&lt.h1, &dpre, &mut gt[li.w1])?;
            acc(&mut gt[li.b1], &dpre.sum_rows());
            matmul_nt_acc(&dpre, &p[li.w1], &mut dh1)?;

            let (dr1, dg1, db1) = layer_norm_backward(&dh1, &lt.ln1, &p[li.ln1_g]);
            acc(&mut gt[li.ln1_g], &dg1);
            acc(&mut gt[li.ln1_b], &db1);
            let mut dx = dr1.clone();
            let mut da = dr1;
            apply_mask(&mut da, &lt.attn_drop);
            matmul_tn_acc(&lt.ctx, &da, &mut gt[li.wo])?;
            acc(&mut gt[li.bo], &da.sum_rows());
            let dctx = matmul_nt(&da, &p[li.wo])?;

            let mut dq = Tensor2D::zeros(rows, d);
            let mut dk = Tensor2D::zeros(rows, d);
            let mut dv = Tensor2D::zeros(rows, d);
            for b in 0..batch {
                let (r0, n) = (trace.offsets[b], trace.offsets[b + 1] - trace.offsets[b]);
                for head in 0..cfg.num_heads {
                    let probs = &lt.probs[b * cfg.num_heads + head];
                    let c0 = head * dhd;
                    let cols = c0..c0 + dhd;
                    let mut dprobs = Tensor2D::zeros(n, n);
                    for i in 0..n {
                        let dci = &dctx.row(r0 + i)[cols.clone()];
                        for (j, g) in dprobs.row_mut(i).iter_mut().enumerate() {
                            *g = dot(dci, &lt.v.row(r0 + j)[cols.clone()]);
                        }
                        for (j, &pij) in probs.row(i).iter().enumerate() {
                            axpy(&mut dv.row_mut(r0 + j)[cols.clone()], pij, dci);
                        }
                    }
                    let ds = softmax_rows_backward(probs, &dprobs).scale(scale);
                    for i in 0..n {
                        for (j, &g) in ds.row(i).iter().enumerate() {
                            axpy(&mut dq.row_mut(r0 + i)[cols.clone()], g, &lt.k.row(r0 + j)[cols.clone()]);
                            axpy(&mut dk.row_mut(r0 + j)[cols.clone()], g, &lt.q.row(r0 + i)[cols.clone()]);
                        }
                    }
                }
            }
            for (dproj, w, b) in [(&dq, li.wq, li.bq), (&dk, li.wk, li.bk), (&dv, li.wv, li.bv)] {
                matmul_tn_acc(&lt.input, dproj, &mut gt[w])?;
                acc(&mut gt[b], &dproj.sum_rows());
                matmul_nt_acc(dproj, &p[w], &mut dx)?;
            }
            dh = dx;
        }

        apply_mask(&mut dh, &trace.emb_drop);
        let (de, dg, db) = layer_norm_backward(&dh, &trace.emb_ln, &p[self.idx.emb_ln_g]);
        acc(&mut gt[self.idx.emb_ln_g], &dg);
        acc(&mut gt[self.idx.emb_ln_b], &db);
        for b in 0..batch {
            for (i, r) in trace.rows_of(b).enumerate() {
                let src = de.row(r);
                for (a, g) in gt[self.idx.tok_emb].row_mut(trace.tokens[r] as usize).iter_mut().zip(src) {
                    *a += g;
                }
                for (a, g) in gt[self.idx.pos_emb].row_mut(i).iter_mut().zip(src) {
                    *a += g;
                }
            }
        }
        Ok(())
    }

    /// Mean-pooled output of every encoder layer, evaluated without dropout.
    pub fn extract_features(&self, tokens: &[TokenId]) -> Result<Vec<Vec<f32>>> {
        let (_, trace) = self.forward(tokens, Mode::Eval)?;
        Ok(trace
            .layer_outputs()
            .map(|h| {
                let mut mean = vec![0.0f32; h.cols()];
                for r in 0..h.rows() {
                    for (m, v) in mean.iter_mut().zip(h.row(r)) {
                        *m += v;
                    }
                }
                let n = h.rows() as f32;
                mean.iter_mut().for_each(|m| *m /= n);
                mean
            })
            .collect())
    }

    /// MLM cross-entropy on the given `(position, gold token)` pairs.
    pub fn mlm_loss(&self, tokens: &[TokenId], targets: &[(usize, usize)], mode: Mode<'_>) -> Result<(f64, Tensor2D, ForwardTrace)> {
        let (logits, trace) = self.forward(tokens, mode)?;
        let (loss, grad) = cross_entropy(&logits, targets);
        Ok((loss, grad, trace))
    }
}
