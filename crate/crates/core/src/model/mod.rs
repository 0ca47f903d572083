//! A miniature post-LN BERT encoder with hand-written backpropagation.
//!
//! Attention keeps the usual stacked layout: one `d x d` matrix each for
//! query, key and value, where head `h` owns columns `[h*dh, (h+1)*dh)`.
//! The MLM output projection is tied to the word embedding matrix.

mod forward;
pub mod ops;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::container::Container;
use crate::error::{Error, Result};
use crate::rng::RngState;
use crate::tensor::{normal_init, Tensor2D};

pub use forward::{ForwardTrace, Mode};

pub type TokenId = u32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub hidden: usize,
    pub num_heads: usize,
    pub ffn: usize,
    pub vocab: usize,
    pub max_len: usize,
    pub dropout: f32,
    /// Std of the Gaussian used for every weight matrix at init.
    pub init_std: f32,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { num_layers: 4, hidden: 64, num_heads: 4, ffn: 256, vocab: 256, max_len: 64, dropout: 0.1, init_std: 0.04 }
    }
}

impl ModelConfig {
    /// BERT-Base dimensions, kept for reference and for size arithmetic.
    pub fn bert_base() -> Self {
        Self { num_layers: 12, hidden: 768, num_heads: 12, ffn: 3072, vocab: 30522, max_len: 512, dropout: 0.1, init_std: 0.02 }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("num_layers", self.num_layers),
            ("hidden", self.hidden),
            ("num_heads", self.num_heads),
            ("ffn", self.ffn),
            ("vocab", self.vocab),
            ("max_len", self.max_len),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("model.{name} must be positive")));
            }
        }
        if !self.hidden.is_multiple_of(self.num_heads) {
            return Err(Error::Config(format!("model.hidden ({}) is not divisible by num_heads ({})", self.hidden, self.num_heads)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("model.dropout must be in [0, 1), got {}", self.dropout)));
        }
        if !(self.init_std > 0.0) {
            return Err(Error::Config("model.init_std must be positive".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.num_heads
    }
}

/// Parameter indices for one encoder layer.
#[derive(Debug, Clone, Copy)]
pub(crate) struct LayerIdx {
    pub wq: usize,
    pub bq: usize,
    pub wk: usize,
    pub bk: usize,
    pub wv: usize,
    pub bv: usize,
    pub wo: usize,
    pub bo: usize,
    pub ln1_g: usize,
    pub ln1_b: usize,
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
    pub ln2_g: usize,
    pub ln2_b: usize,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct ClassifierIdx {
    pub pool_w: usize,
    pub pool_b: usize,
    pub out_w: usize,
    pub out_b: usize,
    pub num_classes: usize,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Index {
    pub tok_emb: usize,
    pub pos_emb: usize,
    pub emb_ln_g: usize,
    pub emb_ln_b: usize,
    pub mlm_w: usize,
    pub mlm_b: usize,
    pub mlm_ln_g: usize,
    pub mlm_ln_b: usize,
    pub mlm_bias: usize,
}

/// Which of the six per-layer matrices (or the embedding) a prunable entry is.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatrixKind {
    WordEmbedding,
    Key,
    Query,
    Value,
    AttentionOutput,
    FfnIn,
    FfnOut,
}

impl MatrixKind {
    /// Attention projections whose column blocks map onto heads.
    pub fn is_stacked_head(self) -> bool {
        matches!(self, MatrixKind::Key | MatrixKind::Query | MatrixKind::Value)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PrunableEntry {
    pub name: String,
    pub param: usize,
    pub layer: Option<usize>,
    pub kind: MatrixKind,
}

/// Every matrix magnitude pruning touches: six per layer plus word embeddings.
///
/// Biases, layer norms, positional embeddings and heads are never included.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PrunableSet {
    entries: Vec<PrunableEntry>,
}

impl PrunableSet {
    pub fn entries(&self) -> &[PrunableEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.name.as_str())
    }

    pub fn find(&self, name: &str) -> Option<&PrunableEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    /// Restricts the set to the named entries, preserving order.
    pub fn subset(&self, names: &[&str]) -> Self {
        Self { entries: self.entries.iter().filter(|e| names.contains(&e.name.as_str())).cloned().collect() }
    }
}

#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    names: Vec<String>,
    params: Vec<Tensor2D>,
    pub(crate) idx: Index,
    pub(crate) layers: Vec<LayerIdx>,
    pub(crate) classifier: Option<ClassifierIdx>,
    generation: u64,
}

impl Model {
    pub fn new(config: ModelConfig, rng: &mut RngState) -> Result<Self> {
        config.validate()?;
        let mut m = Self {
            config: config.clone(),
            names: Vec::new(),
            params: Vec::new(),
            idx: Index { tok_emb: 0, pos_emb: 0, emb_ln_g: 0, emb_ln_b: 0, mlm_w: 0, mlm_b: 0, mlm_ln_g: 0, mlm_ln_b: 0, mlm_bias: 0 },
            layers: Vec::new(),
            classifier: None,
            generation: 0,
        };
        let (d, f, std) = (config.hidden, config.ffn, config.init_std);
        let tok_emb = m.push("embeddings.word", normal_init(config.vocab, d, 0.0, std, rng)?);
        let pos_emb = m.push("embeddings.position", normal_init(config.max_len, d, 0.0, std, rng)?);
        let emb_ln_g = m.push("embeddings.ln.gamma", Tensor2D::filled(1, d, 1.0));
        let emb_ln_b = m.push("embeddings.ln.beta", Tensor2D::zeros(1, d));
        for l in 0..config.num_layers {
            let p = |s: &str| format!("layer.{l}.{s}");
            let li = LayerIdx {
                wq: m.push(&p("attention.query"), normal_init(d, d, 0.0, std, rng)?),
                bq: m.push(&p("attention.query_bias"), Tensor2D::zeros(1, d)),
                wk: m.push(&p("attention.key"), normal_init(d, d, 0.0, std, rng)?),
                bk: m.push(&p("attention.key_bias"), Tensor2D::zeros(1, d)),
                wv: m.push(&p("attention.value"), normal_init(d, d, 0.0, std, rng)?),
                bv: m.push(&p("attention.value_bias"), Tensor2D::zeros(1, d)),
                wo: m.push(&p("attention.output"), normal_init(d, d, 0.0, std, rng)?),
                bo: m.push(&p("attention.output_bias"), Tensor2D::zeros(1, d)),
                ln1_g: m.push(&p("attention.ln.gamma"), Tensor2D::filled(1, d, 1.0)),
                ln1_b: m.push(&p("attention.ln.beta"), Tensor2D::zeros(1, d)),
                w1: m.push(&p("ffn.in"), normal_init(d, f, 0.0, std, rng)?),
                b1: m.push(&p("ffn.in_bias"), Tensor2D::zeros(1, f)),
                w2: m.push(&p("ffn.out"), normal_init(f, d, 0.0, std, rng)?),
                b2: m.push(&p("ffn.out_bias"), Tensor2D::zeros(1, d)),
                ln2_g: m.push(&p("ffn.ln.gamma"), Tensor2D::filled(1, d, 1.0)),
                ln2_b: m.push(&p("ffn.ln.beta"), Tensor2D::zeros(1, d)),
            };
            m.layers.push(li);
        }
        let mlm_w = m.push("mlm.transform", normal_init(d, d, 0.0, std, rng)?);
        let mlm_b = m.push("mlm.transform_bias", Tensor2D::zeros(1, d));
        let mlm_ln_g = m.push("mlm.ln.gamma", Tensor2D::filled(1, d, 1.0));
        let mlm_ln_b = m.push("mlm.ln.beta", Tensor2D::zeros(1, d));
        let mlm_bias = m.push("mlm.output_bias", Tensor2D::zeros(1, config.vocab));
        m.idx = Index { tok_emb, pos_emb, emb_ln_g, emb_ln_b, mlm_w, mlm_b, mlm_ln_g, mlm_ln_b, mlm_bias };
        Ok(m)
    }

    fn push(&mut self, name: &str, t: Tensor2D) -> usize {
        self.names.push(name.to_string());
        self.params.push(t);
        self.params.len() - 1
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor2D] {
        &self.params
    }

    /// Mutable access to all parameters. Invalidates outstanding traces.
    pub fn params_mut(&mut self) -> &mut [Tensor2D] {
        self.generation += 1;
        &mut self.params
    }

    pub fn param(&self, i: usize) -> &Tensor2D {
        &self.params[i]
    }

    pub fn param_mut(&mut self, i: usize) -> &mut Tensor2D {
        self.generation += 1;
        &mut self.params[i]
    }

    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn param_by_name(&self, name: &str) -> Result<&Tensor2D> {
        self.param_index(name).map(|i| &self.params[i]).ok_or_else(|| Error::NotFound(format!("parameter `{name}`")))
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }

    pub fn prunable_set(&self) -> PrunableSet {
        let mut entries = vec![PrunableEntry {
            name: self.names[self.idx.tok_emb].clone(),
            param: self.idx.tok_emb,
            layer: None,
            kind: MatrixKind::WordEmbedding,
        }];
        for (l, li) in self.layers.iter().enumerate() {
            for (param, kind) in [
                (li.wk, MatrixKind::Key),
                (li.wq, MatrixKind::Query),
                (li.wv, MatrixKind::Value),
                (li.wo, MatrixKind::AttentionOutput),
                (li.w1, MatrixKind::FfnIn),
                (li.w2, MatrixKind::FfnOut),
            ] {
                entries.push(PrunableEntry { name: self.names[param].clone(), param, layer: Some(l), kind });
            }
        }
        PrunableSet { entries }
    }

    pub fn num_classes(&self) -> Option<usize> {
        self.classifier.map(|c| c.num_classes)
    }

    /// Attaches a freshly initialized pooler + linear classifier, replacing any existing one.
    pub fn attach_classifier(&mut self, num_classes: usize, rng: &mut RngState) -> Result<()> {
        if num_classes < 2 {
            return Err(Error::InvalidParameter(format!("classifier needs at least 2 classes, got {num_classes}")));
        }
        self.detach_classifier();
        let d = self.config.hidden;
        let std = self.config.init_std;
        let pool_w = self.push("classifier.pooler", normal_init(d, d, 0.0, std, rng)?);
        let pool_b = self.push("classifier.pooler_bias", Tensor2D::zeros(1, d));
        let out_w = self.push("classifier.output", normal_init(d, num_classes, 0.0, std, rng)?);
        let out_b = self.push("classifier.output_bias", Tensor2D::zeros(1, num_classes));
        self.classifier = Some(ClassifierIdx { pool_w, pool_b, out_w, out_b, num_classes });
        self.generation += 1;
        Ok(())
    }

    pub fn detach_classifier(&mut self) {
        if let Some(c) = self.classifier.take() {
            let keep = c.pool_w;
            self.names.truncate(keep);
            self.params.truncate(keep);
            self.generation += 1;
        }
    }

    /// Same architecture and parameter layout.
    pub fn is_compatible(&self, other: &Model) -> bool {
        self.config == other.config && self.names == other.names
    }

    pub fn to_container(&self) -> Result<Container> {
        let mut c = Container::new();
        for (n, t) in self.names.iter().zip(&self.params) {
            c.save_tensor(n, t)?;
        }
        c.set_manifest("model_config", serde_json::to_value(&self.config)?);
        c.set_manifest("num_classes", serde_json::to_value(self.num_classes())?);
        Ok(c)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let config: ModelConfig = serde_json::from_value(
            c.manifest("model_config").cloned().ok_or_else(|| Error::NotFound("manifest entry `model_config`".into()))?,
        )?;
        let num_classes: Option<usize> = match c.manifest("num_classes") {
            Some(v) => serde_json::from_value(v.clone())?,
            None => None,
        };
        let mut rng = RngState::new(0);
        let mut m = Model::new(config, &mut rng)?;
        if let Some(k) = num_classes {
            m.attach_classifier(k, &mut rng)?;
        }
        for i in 0..m.params.len() {
            let t = c.load_tensor(&m.names[i])?;
            if t.shape() != m.params[i].shape() {
                return Err(Error::Corrupt(format!(
                    "parameter `{}` is {}x{}, expected {}x{}",
                    m.names[i],
                    t.rows(),
                    t.cols(),
                    m.params[i].rows(),
                    m.params[i].cols()
                )));
            }
            m.params[i] = t;
        }
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_container()?.write(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_container(&Container::read(path)?)
    }
}

/// Per-parameter gradients, aligned index-for-index with [`Model::params`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub tensors: Vec<Tensor2D>,
}

impl Gradients {
    pub fn zeros_like(model: &Model) -> Self {
        Self { tensors: model.params().iter().map(|p| Tensor2D::zeros(p.rows(), p.cols())).collect() }
    }

    pub fn zero(&mut self) {
        self.tensors.iter_mut().for_each(|t| t.fill(0.0));
    }

    pub fn scale(&mut self, s: f32) {
        for t in &mut self.tensors {
            t.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }

    pub fn is_zero(&self) -> bool {
        self.tensors.iter().all(|t| t.data().iter().all(|&v| v == 0.0))
    }

    pub fn global_norm(&self) -> f64 {
        self.tensors.iter().map(Tensor2D::frobenius_sq).sum::<f64>().sqrt()
    }

    /// Rescales so the global L2 norm is at most `max_norm`.
    pub fn clip_global_norm(&mut self, max_norm: f64) {
        let n = self.global_norm();
        if n > max_norm && n.is_finite() {
            self.scale((max_norm / n) as f32);
        }
    }
}
