//! Oracles shared by the integration and acceptance suites. Nothing here calls
//! into the code paths it is used to check.

#![allow(dead_code)]

use prunelab::model::ops::cross_entropy;
use prunelab::model::{Mode, Model, ModelConfig};
use prunelab::{RngState, Tensor2D};

pub fn tiny_config(layers: usize, hidden: usize, heads: usize) -> ModelConfig {
    ModelConfig { num_layers: layers, hidden, num_heads: heads, ffn: 2 * hidden, vocab: 16, max_len: 8, dropout: 0.0, init_std: 0.3 }
}

/// Loss used by the finite-difference checks: MLM cross-entropy on a few
/// positions, or classifier cross-entropy on label 1.
pub fn probe_loss(model: &Model, tokens: &[u32]) -> (f64, Tensor2D) {
    let (logits, _) = model.forward(tokens, Mode::Eval).unwrap();
    let targets: Vec<(usize, usize)> = match model.num_classes() {
        Some(_) => vec![(0, 1)],
        None => vec![(0, 3), (2, 7), (tokens.len() - 1, 1)],
    };
    cross_entropy(&logits, &targets)
}

/// Analytic gradient and central-difference estimate for one parameter tensor.
pub fn gradient_pair(model: &Model, tokens: &[u32], param: usize, eps: f32) -> (Vec<f64>, Vec<f64>) {
    let (_, dlogits) = probe_loss(model, tokens);
    let (_, trace) = model.forward(tokens, Mode::Eval).unwrap();
    let analytic = model.backward(&trace, &dlogits).unwrap();
    let mut m = model.clone();
    let n = m.param(param).len();
    let mut numeric = Vec::with_capacity(n);
    for i in 0..n {
        let orig = m.param(param).data()[i];
        m.param_mut(param).data_mut()[i] = orig + eps;
        let (lp, _) = probe_loss(&m, tokens);
        m.param_mut(param).data_mut()[i] = orig - eps;
        let (lm, _) = probe_loss(&m, tokens);
        m.param_mut(param).data_mut()[i] = orig;
        numeric.push((lp - lm) / (f64::from(orig + eps) - f64::from(orig - eps)));
    }
    (analytic.tensors[param].data().iter().map(|&v| f64::from(v)).collect(), numeric)
}

/// Outcome of comparing one gradient tensor against central differences.
#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    /// `|a - n| / (|a| + |n|)` in the L2 norm.
    pub rel: f64,
    /// `|a - n|` in the L2 norm.
    pub abs: f64,
    /// `|a| + |n|`.
    pub scale: f64,
}

impl GradCheck {
    /// Relative check, except for tensors whose true gradient is zero (the key
    /// bias is invariant under softmax), where only f32 noise remains.
    pub fn passes(&self, rel_tol: f64) -> bool {
        self.rel < rel_tol || (self.scale < 1e-3 && self.abs < 1e-4)
    }
}

/// Per-element ratios are dominated by f32 rounding wherever the true
/// gradient is near zero, so the comparison is made per tensor.
pub fn check_tensor(model: &Model, tokens: &[u32], param: usize, eps: f32) -> GradCheck {
    let (a, n) = gradient_pair(model, tokens, param, eps);
    let abs = a.iter().zip(&n).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt() + n.iter().map(|x| x * x).sum::<f64>().sqrt();
    let rel = if scale == 0.0 { 0.0 } else { abs / scale };
    GradCheck { rel, abs, scale }
}

pub fn seeded_model(cfg: ModelConfig, seed: u64, classes: Option<usize>) -> Model {
    let mut rng = RngState::new(seed);
    let mut m = Model::new(cfg, &mut rng).unwrap();
    if let Some(k) = classes {
        m.attach_classifier(k, &mut rng).unwrap();
    }
    // Perturb gains and biases away from 1/0 so their gradients are exercised.
    for i in 0..m.num_params() {
        let name = m.param_names()[i].clone();
        if name.contains("bias") || name.contains(".ln.") {
            let (r, c) = m.param(i).shape();
            let noise = prunelab::tensor::normal_init(r, c, 0.0, 0.2, &mut rng).unwrap();
            let t = m.param_mut(i);
            t.add_assign(&noise).unwrap();
        }
    }
    m
}

/// Flat indices one-shot magnitude pruning must remove: the first
/// `ceil(s * N)` of a full sort by `(|w|, index)`.
pub fn brute_force_pruned(w: &[f32], s: f64) -> Vec<usize> {
    let n = w.len();
    let x = s * n as f64;
    // Products within float noise of an integer count as that integer.
    let k = if (x - x.round()).abs() <= 1e-9 * (n as f64).max(1.0) { x.round() as usize } else { x.ceil() as usize };
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| w[i].abs().partial_cmp(&w[j].abs()).unwrap().then(i.cmp(&j)));
    let mut pruned = order[..k.min(n)].to_vec();
    pruned.sort_unstable();
    pruned
}

/// Textbook triple loop in f64.
pub fn naive_matmul(a: &Tensor2D, b: &Tensor2D) -> Tensor2D {
    assert_eq!(a.cols(), b.rows());
    let mut out = vec![0.0f32; a.rows() * b.cols()];
    for i in 0..a.rows() {
        for j in 0..b.cols() {
            let mut acc = 0.0f64;
            for k in 0..a.cols() {
                acc += f64::from(a.get(i, k)) * f64::from(b.get(k, j));
            }
            out[i * b.cols() + j] = acc as f32;
        }
    }
    Tensor2D::from_vec(a.rows(), b.cols(), out).unwrap()
}

pub fn small_grammar() -> prunelab::data::GrammarConfig {
    prunelab::data::GrammarConfig { topics: 3, nouns_per_topic: 6, verbs_per_topic: 3, adjectives_per_topic: 3, ..Default::default() }
}

/// A grid that runs in well under a second per cell.
pub fn tiny_experiment(scenario: prunelab::experiment::Scenario) -> prunelab::experiment::ExperimentConfig {
    use prunelab::data::{TaskKind, TaskSize, TaskSpec};
    let mut cfg = prunelab::experiment::ExperimentConfig::new(scenario);
    cfg.model = ModelConfig { num_layers: 2, hidden: 16, num_heads: 2, ffn: 32, vocab: 64, max_len: 32, dropout: 0.1, init_std: 0.05 };
    cfg.grammar = small_grammar();
    cfg.corpus.train = 400;
    cfg.corpus.dev = 30;
    cfg.seeds = vec![0];
    cfg.sparsities = vec![0.0, 0.5];
    cfg.learning_rates = vec![1e-3];
    cfg.epochs = 1;
    cfg.pretrain.base_steps = 40;
    cfg.pretrain.prune_steps = 30;
    cfg.pretrain.ramp_steps = 10;
    cfg.pretrain.update_every = 5;
    cfg.analysis.cosine_examples = 8;
    cfg.tasks = vec![
        TaskSpec { name: "gram".into(), kind: TaskKind::Grammaticality, size: TaskSize::Small, train_examples: Some(48), dev_examples: 24 },
        TaskSpec { name: "topic".into(), kind: TaskKind::TopicMatch, size: TaskSize::Small, train_examples: Some(48), dev_examples: 24 },
    ];
    cfg
}
