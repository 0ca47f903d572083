//! Experiment grids: the four pruning scenarios over sparsity levels and seeds.
//!
//! Every run starts from a dense base model pre-trained for
//! `pretrain.base_steps`. Pruning scenarios then continue pre-training for
//! `pretrain.prune_steps`, ramping sparsity over the first `pretrain.ramp_steps`
//! (sparsity 0 is the dense control). Pre-trained arms and base models are
//! cached as containers under `<out>/cache`, keyed by everything that
//! determines their weights, so scenarios sharing an arm train it once.

use std::collections::{BTreeMap, HashSet};
use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use log::info;
use serde::{Deserialize, Serialize};

use crate::analysis::{layer_cosine_sim, mask_diff, model_head_stats, model_movement};
use crate::container::Container;
use crate::data::{Corpus, DownstreamTask, Grammar, GrammarConfig, TaskKind, TaskSize, TaskSpec};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::pruning::{MaskMeta, MaskSet, PruneMode, PruneScope, Pruner, RampShape, SparsitySchedule};
use crate::rng::RngState;
use crate::training::{dev_instances, finetune, mlm_dev_loss, pretrain, FinetuneConfig, MlmInstance, PretrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scenario {
    /// Gradual magnitude pruning during continued pre-training; the mask is kept while fine-tuning.
    PrunePretrain,
    /// Same pre-training as `PrunePretrain`, but pruned weights may regrow while fine-tuning.
    InfoDelete,
    /// Fine-tune the dense model, then prune gradually while training further on the task.
    PruneAfterFinetune,
    /// Like `PrunePretrain` with uniformly random instead of lowest-magnitude positions.
    RandomPrune,
}

impl Scenario {
    pub const ALL: [Scenario; 4] = [Scenario::PrunePretrain, Scenario::InfoDelete, Scenario::PruneAfterFinetune, Scenario::RandomPrune];

    pub fn name(self) -> &'static str {
        match self {
            Scenario::PrunePretrain => "prune-pretrain",
            Scenario::InfoDelete => "info-delete",
            Scenario::PruneAfterFinetune => "prune-after-finetune",
            Scenario::RandomPrune => "random-prune",
        }
    }
}

impl std::fmt::Display for Scenario {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSize {
    pub train: usize,
    pub dev: usize,
}

impl Default for CorpusSize {
    fn default() -> Self {
        Self { train: 100_000, dev: 1000 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainPlan {
    /// Dense pre-training steps of the shared base model.
    pub base_steps: usize,
    /// Continued pre-training steps of each pruning arm.
    pub prune_steps: usize,
    /// Steps over which sparsity ramps from 0 to its target.
    pub ramp_steps: usize,
    /// Masks are recomputed every this many steps during the ramp.
    pub update_every: usize,
    pub shape: RampShape,
    pub train: PretrainConfig,
}

impl Default for PretrainPlan {
    fn default() -> Self {
        Self { base_steps: 20_000, prune_steps: 20_000, ramp_steps: 2_000, update_every: 100, shape: RampShape::Cubic, train: PretrainConfig::default() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RecoveryPlan {
    /// Epochs of downstream training after pruning starts.
    pub epochs: usize,
    /// Fraction of the recovery steps spent ramping sparsity.
    pub ramp_frac: f64,
    /// Number of mask updates during the ramp.
    pub updates: usize,
}

impl Default for RecoveryPlan {
    fn default() -> Self {
        Self { epochs: 5, ramp_frac: 0.1, updates: 10 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisPlan {
    /// Dev sequences used for layer-wise cosine similarity; 0 disables it.
    pub cosine_examples: usize,
    /// Compare prune-after-finetune masks with the pre-training mask at the same sparsity.
    pub mask_diff_vs_pretrain: bool,
    pub head_stats: bool,
    pub movement: bool,
    pub save_checkpoints: bool,
}

impl Default for AnalysisPlan {
    fn default() -> Self {
        Self { cosine_examples: 200, mask_diff_vs_pretrain: true, head_stats: true, movement: true, save_checkpoints: true }
    }
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

fn default_sparsities() -> Vec<f64> {
    (0..10).map(|i| f64::from(i) / 10.0).collect()
}

fn default_learning_rates() -> Vec<f32> {
    vec![3e-4, 5e-4, 7e-4, 1e-3]
}

fn default_epochs() -> usize {
    3
}

pub fn default_tasks() -> Vec<TaskSpec> {
    vec![
        TaskSpec { name: "grammar".into(), kind: TaskKind::Grammaticality, size: TaskSize::Large, train_examples: None, dev_examples: 1000 },
        TaskSpec { name: "topic".into(), kind: TaskKind::TopicMatch, size: TaskSize::Small, train_examples: None, dev_examples: 1000 },
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub scenario: Scenario,
    /// Root of all randomness; the CLI's `--seed` overrides it.
    #[serde(default)]
    pub master_seed: u64,
    /// Run labels; each derives its own stream from the master seed.
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_sparsities")]
    pub sparsities: Vec<f64>,
    #[serde(default = "default_learning_rates")]
    pub learning_rates: Vec<f32>,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    /// Fine-tuning epochs for info-delete arms; defaults to `epochs`.
    #[serde(default)]
    pub extended_epochs: Option<usize>,
    #[serde(default)]
    pub scope: PruneScope,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub grammar: GrammarConfig,
    #[serde(default)]
    pub corpus: CorpusSize,
    #[serde(default)]
    pub pretrain: PretrainPlan,
    #[serde(default)]
    pub finetune: FinetuneConfig,
    #[serde(default)]
    pub recovery: RecoveryPlan,
    #[serde(default = "default_tasks")]
    pub tasks: Vec<TaskSpec>,
    #[serde(default)]
    pub analysis: AnalysisPlan,
}

impl ExperimentConfig {
    pub fn new(scenario: Scenario) -> Self {
        toml::from_str(&format!("scenario = \"{scenario}\"")).expect("defaults deserialize")
    }

    /// Parses TOML; errors name the offending field and line.
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(describe_toml_error(text, &e)))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.grammar.validate()?;
        if self.grammar.required_vocab() > self.model.vocab {
            return Err(Error::Config(format!(
                "model.vocab = {} is smaller than the {} tokens the grammar uses",
                self.model.vocab,
                self.grammar.required_vocab()
            )));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must not be empty".into()));
        }
        if self.sparsities.is_empty() || self.sparsities.iter().any(|s| !(0.0..1.0).contains(s)) {
            return Err(Error::Config("sparsities must be a non-empty list of values in [0, 1)".into()));
        }
        if self.learning_rates.is_empty() || self.learning_rates.iter().any(|&lr| !(lr > 0.0 && lr.is_finite())) {
            return Err(Error::Config("learning_rates must be a non-empty list of positive values".into()));
        }
        if self.epochs == 0 || self.extended_epochs == Some(0) {
            return Err(Error::Config("epochs must be positive".into()));
        }
        if self.tasks.is_empty() {
            return Err(Error::Config("at least one task is required".into()));
        }
        let mut names = HashSet::new();
        for t in &self.tasks {
            if !names.insert(t.name.as_str()) {
                return Err(Error::Config(format!("duplicate task name `{}`", t.name)));
            }
            if t.train_size() == 0 || t.dev_examples == 0 {
                return Err(Error::Config(format!("task `{}` needs positive train and dev sizes", t.name)));
            }
            let longest = if t.kind == TaskKind::TopicMatch { 2 * max_sentence_len(&self.grammar) + 2 } else { max_sentence_len(&self.grammar) + 1 };
            if longest > self.model.max_len {
                return Err(Error::Config(format!("task `{}` can produce {longest} tokens but model.max_len = {}", t.name, self.model.max_len)));
            }
        }
        if self.corpus.train == 0 || self.corpus.dev == 0 {
            return Err(Error::Config("corpus sizes must be positive".into()));
        }
        if 1 + self.grammar.max_sentences * max_sentence_len(&self.grammar) > self.model.max_len {
            return Err(Error::Config(format!("pre-training sequences can exceed model.max_len = {}", self.model.max_len)));
        }
        let p = &self.pretrain;
        if p.train.batch_size == 0 || self.finetune.batch_size == 0 {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        if p.update_every == 0 || p.prune_steps <= p.ramp_steps {
            return Err(Error::Config("pretrain.prune_steps must exceed pretrain.ramp_steps and update_every must be positive".into()));
        }
        if !(self.recovery.ramp_frac > 0.0 && self.recovery.ramp_frac < 1.0) || self.recovery.updates == 0 || self.recovery.epochs == 0 {
            return Err(Error::Config("recovery.ramp_frac must be in (0, 1) and recovery.updates and recovery.epochs positive".into()));
        }
        Ok(())
    }

    fn finetune_epochs(&self) -> usize {
        match self.scenario {
            Scenario::InfoDelete => self.extended_epochs.unwrap_or(self.epochs),
            _ => self.epochs,
        }
    }
}

/// Longest sentence the grammar can emit.
fn max_sentence_len(_g: &GrammarConfig) -> usize {
    // DET ADJ NOUN VERB DET ADJ NOUN PREP DET ADJ NOUN STOP
    12
}

fn describe_toml_error(text: &str, e: &toml::de::Error) -> String {
    let msg = e.message().trim().to_string();
    match e.span() {
        Some(span) => {
            let line = text[..span.start.min(text.len())].matches('\n').count() + 1;
            let snippet = text.lines().nth(line - 1).unwrap_or("").trim();
            format!("line {line}: {msg} (at `{snippet}`)")
        }
        None => msg,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LrResult {
    pub learning_rate: f32,
    pub best_dev_accuracy: f64,
    pub final_train_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MovementSummary {
    pub mean: f64,
    pub std: f64,
    pub decile_mean: [f64; 10],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskResult {
    pub task: String,
    /// Best over the learning-rate grid.
    pub best_dev_accuracy: f64,
    /// Final train loss of the learning rate that achieved the best accuracy.
    pub final_train_loss: f64,
    pub learning_rate: f32,
    pub epochs: usize,
    pub per_lr: Vec<LrResult>,
    /// Sort-order movement of prunable weights during fine-tuning at the best learning rate.
    #[serde(default)]
    pub movement: Option<MovementSummary>,
    /// Overall mask difference against the pre-training mask at equal sparsity.
    #[serde(default)]
    pub mask_diff_vs_pretrain: Option<f64>,
    /// MLM dev loss after task training (prune-after-finetune only).
    #[serde(default)]
    pub mlm_dev_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct HeadSummary {
    pub min: f64,
    pub mean: f64,
    pub max: f64,
}

/// Paths relative to the output directory.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Artifacts {
    pub checkpoint: Option<String>,
    pub masks: Option<String>,
    pub reports: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub scenario: Scenario,
    pub seed: u64,
    pub sparsity: f64,
    /// MLM dev loss of the pre-trained arm (for prune-after-finetune, the mean over tasks).
    pub pretrain_dev_loss: f64,
    pub tasks: Vec<TaskResult>,
    /// Mean per-example cosine similarity of each layer's features to the dense control.
    #[serde(default)]
    pub cosine_to_dense: Option<Vec<f64>>,
    #[serde(default)]
    pub head_stats: Option<HeadSummary>,
    pub artifacts: Artifacts,
    pub config: ExperimentConfig,
}

impl RunRecord {
    pub fn task(&self, name: &str) -> Option<&TaskResult> {
        self.tasks.iter().find(|t| t.task == name)
    }

    /// Checks the record invariants: accuracies in [0, 1], losses finite and non-negative.
    pub fn validate(&self) -> Result<()> {
        let bad_loss = |l: f64| !(l.is_finite() && l >= 0.0);
        if bad_loss(self.pretrain_dev_loss) {
            return Err(Error::Results(format!("pre-train dev loss {} is not a non-negative number", self.pretrain_dev_loss)));
        }
        for t in &self.tasks {
            for (acc, loss) in std::iter::once((t.best_dev_accuracy, t.final_train_loss)).chain(t.per_lr.iter().map(|r| (r.best_dev_accuracy, r.final_train_loss))) {
                if !(0.0..=1.0).contains(&acc) || bad_loss(loss) {
                    return Err(Error::Results(format!("task `{}`: accuracy {acc} or loss {loss} out of range", t.task)));
                }
            }
        }
        Ok(())
    }
}

/// Reads a results file with one JSON record per line.
pub fn read_results(path: impl AsRef<Path>) -> Result<Vec<RunRecord>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let r: RunRecord = serde_json::from_str(line).map_err(|e| Error::Results(format!("{}:{}: {e}", path.display(), i + 1)))?;
        r.validate()?;
        out.push(r);
    }
    Ok(out)
}

/// Generated data shared by every run of an experiment.
pub struct Workspace {
    pub grammar: Grammar,
    pub corpus: Corpus,
    pub dev_mlm: Vec<MlmInstance>,
    pub tasks: Vec<DownstreamTask>,
}

impl Workspace {
    pub fn generate(cfg: &ExperimentConfig) -> Result<Self> {
        let master = RngState::new(cfg.master_seed);
        let data = master.split_named("data");
        let grammar = Grammar::new(cfg.grammar.clone(), &mut data.split_named("grammar"))?;
        let corpus = Corpus::generate(&grammar, cfg.corpus.train, cfg.corpus.dev, &mut data.split_named("corpus"))?;
        let dev_mlm = dev_instances(&corpus.dev, grammar.word_range(), data.split_named("dev-mask").seed());
        let tasks = cfg.tasks.iter().map(|t| DownstreamTask::generate(&grammar, t, &data)).collect::<Result<_>>()?;
        Ok(Self { grammar, corpus, dev_mlm, tasks })
    }
}

/// Runs the full grid of `cfg` and returns one record per (seed, sparsity).
///
/// Records are appended to `<out>/results-<scenario>.jsonl.partial` as they
/// finish; the file is renamed to `results-<scenario>.jsonl` once the whole
/// grid succeeds, so an aborted run leaves its partial results clearly marked.
pub fn run_scenario(cfg: &ExperimentConfig, out_dir: &Path, workers: usize) -> Result<Vec<RunRecord>> {
    cfg.validate()?;
    let ws = Workspace::generate(cfg)?;
    run_scenario_with(cfg, &ws, out_dir, workers)
}

pub fn results_path(out_dir: &Path, scenario: Scenario) -> PathBuf {
    out_dir.join(format!("results-{scenario}.jsonl"))
}

/// [`run_scenario`] on already generated data.
pub fn run_scenario_with(cfg: &ExperimentConfig, ws: &Workspace, out_dir: &Path, workers: usize) -> Result<Vec<RunRecord>> {
    cfg.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let final_path = results_path(out_dir, cfg.scenario);
    let partial_path = final_path.with_extension("jsonl.partial");
    for p in [&final_path, &partial_path] {
        if p.exists() {
            fs::remove_file(p).map_err(|e| Error::io(p, e))?;
        }
    }
    let runner = Runner { cfg, ws, out_dir, cache_lock: Mutex::new(()) };

    // Shared models first, so concurrent cells never train the same one twice.
    for_each_parallel(cfg.seeds.len(), workers, |i| runner.base(cfg.seeds[i]).map(|_| ()))?;
    let arms = runner.required_arms();
    for_each_parallel(arms.len(), workers, |i| {
        let (seed, s, mode) = arms[i];
        runner.arm(seed, s, mode).map(|_| ())
    })?;

    let cells: Vec<(u64, f64)> = cfg.seeds.iter().flat_map(|&seed| cfg.sparsities.iter().map(move |&s| (seed, s))).collect();
    let results: Mutex<Vec<Option<RunRecord>>> = Mutex::new(vec![None; cells.len()]);
    let sink = Mutex::new(());
    let outcome = for_each_parallel(cells.len(), workers, |i| {
        let (seed, s) = cells[i];
        let record = runner.cell(seed, s)?;
        let line = serde_json::to_string(&record)?;
        {
            let _guard = sink.lock().expect("results sink");
            let mut f = OpenOptions::new().create(true).append(true).open(&partial_path).map_err(|e| Error::io(&partial_path, e))?;
            writeln!(f, "{line}").map_err(|e| Error::io(&partial_path, e))?;
        }
        results.lock().expect("results")[i] = Some(record);
        Ok(())
    });
    outcome?;
    fs::rename(&partial_path, &final_path).map_err(|e| Error::io(&final_path, e))?;
    Ok(results.into_inner().expect("results").into_iter().map(|r| r.expect("every cell finished")).collect())
}

/// Runs `job(0..n)` on up to `workers` threads, stopping at the first error.
fn for_each_parallel<F>(n: usize, workers: usize, job: F) -> Result<()>
where
    F: Fn(usize) -> Result<()> + Sync,
{
    let next = AtomicUsize::new(0);
    let failed: Mutex<Option<Error>> = Mutex::new(None);
    std::thread::scope(|scope| {
        for _ in 0..workers.clamp(1, n.max(1)) {
            scope.spawn(|| loop {
                if failed.lock().expect("error slot").is_some() {
                    return;
                }
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= n {
                    return;
                }
                if let Err(e) = job(i) {
                    failed.lock().expect("error slot").get_or_insert(e);
                    return;
                }
            });
        }
    });
    match failed.into_inner().expect("error slot") {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

struct Runner<'a> {
    cfg: &'a ExperimentConfig,
    ws: &'a Workspace,
    out_dir: &'a Path,
    cache_lock: Mutex<()>,
}

/// A pre-trained model together with the pruner state it ended with.
struct Arm {
    model: Model,
    masks: MaskSet,
    dev_loss: f64,
}

fn sparsity_label(s: f64) -> String {
    format!("{:03}", (s * 1000.0).round() as i64)
}

impl Runner<'_> {
    fn run_rng(&self, seed: u64) -> RngState {
        RngState::new(self.cfg.master_seed).split_named(&format!("run/{seed}"))
    }

    fn cache_dir(&self) -> PathBuf {
        self.out_dir.join("cache")
    }

    /// Everything that determines a base model's weights.
    fn base_key(&self, seed: u64) -> serde_json::Value {
        let c = self.cfg;
        serde_json::json!({
            "master_seed": c.master_seed, "seed": seed, "model": c.model, "grammar": c.grammar,
            "corpus": c.corpus, "base_steps": c.pretrain.base_steps, "train": c.pretrain.train,
        })
    }

    fn load_cached(&self, path: &Path, key: &serde_json::Value) -> Option<Container> {
        let c = Container::read(path).ok()?;
        (c.manifest("cache_key").and_then(serde_json::Value::as_str) == Some(key.to_string().as_str())).then_some(c)
    }

    fn store_cached(&self, path: &Path, mut c: Container, key: serde_json::Value) -> Result<()> {
        c.set_manifest("cache_key", serde_json::Value::String(key.to_string()));
        let _guard = self.cache_lock.lock().expect("cache lock");
        let tmp = path.with_extension("tmp");
        c.write(&tmp)?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    /// Pre-trained arms the grid reads, without duplicates.
    fn required_arms(&self) -> Vec<(u64, f64, PruneMode)> {
        let cfg = self.cfg;
        let mut out: Vec<(u64, f64, PruneMode)> = Vec::new();
        for &seed in &cfg.seeds {
            for &s in &cfg.sparsities {
                let mut need = |s: f64, mode: PruneMode| {
                    if !out.iter().any(|&(a, b, m)| a == seed && b == s && m == mode) {
                        out.push((seed, s, mode));
                    }
                };
                match cfg.scenario {
                    Scenario::PruneAfterFinetune => {
                        if cfg.analysis.mask_diff_vs_pretrain && s > 0.0 {
                            need(s, PruneMode::Masked);
                        }
                    }
                    scenario => {
                        need(s, if scenario == Scenario::RandomPrune { PruneMode::RandomMasked } else { PruneMode::Masked });
                        if cfg.analysis.cosine_examples > 0 {
                            need(0.0, PruneMode::Masked);
                        }
                    }
                }
            }
        }
        out
    }

    fn base(&self, seed: u64) -> Result<(Model, f64)> {
        let path = self.cache_dir().join(format!("base-seed{seed}.ckpt"));
        let key = self.base_key(seed);
        if let Some(c) = self.load_cached(&path, &key) {
            let loss = c.manifest("dev_loss").and_then(serde_json::Value::as_f64).ok_or_else(|| Error::Corrupt("cached base lacks dev_loss".into()))?;
            return Ok((Model::from_container(&c)?, loss));
        }
        info!("seed {seed}: pre-training base model for {} steps", self.cfg.pretrain.base_steps);
        let rng = self.run_rng(seed);
        let mut model = Model::new(self.cfg.model.clone(), &mut rng.split_named("init"))?;
        let out = pretrain(
            &mut model,
            &self.ws.corpus.train,
            &self.ws.dev_mlm,
            self.ws.grammar.word_range(),
            self.cfg.pretrain.base_steps,
            &self.cfg.pretrain.train,
            None,
            &rng.split_named("base"),
        )?;
        let mut c = model.to_container()?;
        c.set_manifest("dev_loss", serde_json::json!(out.dev_loss));
        self.store_cached(&path, c, key)?;
        Ok((model, out.dev_loss))
    }

    /// Base model pre-trained further while pruning to `s` with `mode`.
    fn arm(&self, seed: u64, s: f64, mode: PruneMode) -> Result<Arm> {
        let mode_label = match mode {
            PruneMode::RandomMasked => "random",
            _ => "magnitude",
        };
        let path = self.cache_dir().join(format!("arm-{mode_label}-seed{seed}-s{}.ckpt", sparsity_label(s)));
        let p = &self.cfg.pretrain;
        let key = serde_json::json!({
            "base": self.base_key(seed), "sparsity": s, "mode": mode_label, "scope": self.cfg.scope,
            "prune_steps": p.prune_steps, "ramp_steps": p.ramp_steps, "update_every": p.update_every, "shape": p.shape,
        });
        if let Some(c) = self.load_cached(&path, &key) {
            let (masks, _) = MaskSet::read_from(&c)?;
            let dev_loss = c.manifest("dev_loss").and_then(serde_json::Value::as_f64).ok_or_else(|| Error::Corrupt("cached arm lacks dev_loss".into()))?;
            return Ok(Arm { model: Model::from_container(&c)?, masks, dev_loss });
        }
        let (mut model, _) = self.base(seed)?;
        info!("seed {seed}: {mode_label} pruning to {s} over {} steps", p.prune_steps);
        let rng = self.run_rng(seed).split_named(&format!("arm/{mode_label}/{}", sparsity_label(s)));
        let schedule = SparsitySchedule { shape: p.shape, ..SparsitySchedule::new(s, 0, p.ramp_steps, p.update_every)? };
        let mut pruner = Pruner::new(&model, mode, self.cfg.scope, Some(schedule), &rng)?;
        let out = pretrain(
            &mut model,
            &self.ws.corpus.train,
            &self.ws.dev_mlm,
            self.ws.grammar.word_range(),
            p.prune_steps,
            &p.train,
            Some(&mut pruner),
            &rng,
        )?;
        let masks = pruner.masks().clone();
        let mut c = model.to_container()?;
        masks.write_into(&mut c, &pruner.meta(seed))?;
        c.set_manifest("dev_loss", serde_json::json!(out.dev_loss));
        self.store_cached(&path, c, key)?;
        Ok(Arm { model, masks, dev_loss: out.dev_loss })
    }

    fn finetune_rng(&self, seed: u64, task: &str, lr: f32) -> RngState {
        self.run_rng(seed).split_named(&format!("finetune/{task}/{lr:e}"))
    }

    /// Artifact path relative to the output directory.
    fn rel(&self, path: &Path) -> String {
        path.strip_prefix(self.out_dir).unwrap_or(path).display().to_string()
    }

    fn cell_dir(&self, seed: u64, s: f64) -> PathBuf {
        self.out_dir.join(self.cfg.scenario.name()).join(format!("seed{seed}-s{}", sparsity_label(s)))
    }

    fn cell(&self, seed: u64, s: f64) -> Result<RunRecord> {
        match self.cfg.scenario {
            Scenario::PruneAfterFinetune => self.prune_after_finetune_cell(seed, s),
            scenario => self.pretrain_cell(seed, s, scenario),
        }
    }

    fn pretrain_cell(&self, seed: u64, s: f64, scenario: Scenario) -> Result<RunRecord> {
        let cfg = self.cfg;
        let mode = if scenario == Scenario::RandomPrune { PruneMode::RandomMasked } else { PruneMode::Masked };
        let arm = self.arm(seed, s, mode)?;
        let dir = self.cell_dir(seed, s);
        let mut artifacts = Artifacts::default();
        let set = arm.model.prunable_set();
        let masks_path = dir.join("masks.prnl");
        let meta = MaskMeta { scope: cfg.scope, sparsity: s, mode, seed };
        arm.masks.save(&masks_path, &meta)?;
        artifacts.masks = Some(self.rel(&masks_path));

        let head_stats = if cfg.analysis.head_stats {
            let stats = model_head_stats(&arm.masks, &set, cfg.model.num_heads, s)?;
            let path = dir.join("head_stats.csv");
            crate::data::write_file(&path, stats.to_csv().as_bytes())?;
            artifacts.reports.push(self.rel(&path));
            Some(HeadSummary { min: stats.min, mean: stats.mean, max: stats.max })
        } else {
            None
        };

        let cosine_to_dense = if cfg.analysis.cosine_examples > 0 {
            let dense = if s == 0.0 { arm.model.clone() } else { self.arm(seed, 0.0, PruneMode::Masked)?.model };
            let n = cfg.analysis.cosine_examples.min(self.ws.corpus.dev.len());
            let report = layer_cosine_sim(&dense, &arm.model, &self.ws.corpus.dev[..n])?;
            let path = dir.join("cosine.csv");
            crate::data::write_file(&path, report.to_csv().as_bytes())?;
            artifacts.reports.push(self.rel(&path));
            Some(report.per_layer)
        } else {
            None
        };

        let epochs = cfg.finetune_epochs();
        let mut tasks = Vec::with_capacity(self.ws.tasks.len());
        for task in &self.ws.tasks {
            let mut per_lr = Vec::with_capacity(cfg.learning_rates.len());
            let mut best: Option<(f64, Model)> = None;
            for &lr in &cfg.learning_rates {
                let mut model = arm.model.clone();
                let pruner = match scenario {
                    Scenario::InfoDelete => None,
                    _ => Some(Pruner::with_masks(&model, mode, arm.masks.clone())?),
                };
                let out = finetune(&mut model, task, epochs, lr, &cfg.finetune, pruner.as_ref(), &self.finetune_rng(seed, &task.name, lr))?;
                info!("{scenario} seed {seed} s={s} {} lr={lr:e}: dev accuracy {:.4}, train loss {:.4}", task.name, out.best_dev_accuracy, out.final_train_loss);
                if best.as_ref().is_none_or(|(acc, _)| out.best_dev_accuracy > *acc) {
                    best = Some((out.best_dev_accuracy, model));
                }
                per_lr.push(LrResult { learning_rate: lr, best_dev_accuracy: out.best_dev_accuracy, final_train_loss: out.final_train_loss });
            }
            let (_, best_model) = best.expect("learning-rate grid is non-empty");
            let best_lr = select_best(&per_lr);
            let movement = if cfg.analysis.movement {
                let m = model_movement(&arm.model, &best_model, &set)?;
                let path = dir.join(format!("movement-{}.csv", task.name));
                crate::data::write_file(&path, m.to_csv().as_bytes())?;
                artifacts.reports.push(self.rel(&path));
                Some(MovementSummary { mean: m.pooled.mean, std: m.pooled.std, decile_mean: m.pooled.decile_mean })
            } else {
                None
            };
            if cfg.analysis.save_checkpoints {
                let path = dir.join(format!("finetuned-{}.ckpt", task.name));
                best_model.save(&path)?;
                artifacts.reports.push(self.rel(&path));
            }
            tasks.push(TaskResult {
                task: task.name.clone(),
                best_dev_accuracy: best_lr.best_dev_accuracy,
                final_train_loss: best_lr.final_train_loss,
                learning_rate: best_lr.learning_rate,
                epochs,
                per_lr,
                movement,
                mask_diff_vs_pretrain: None,
                mlm_dev_loss: None,
            });
        }
        if cfg.analysis.save_checkpoints {
            let path = dir.join("pretrained.ckpt");
            let mut c = arm.model.to_container()?;
            arm.masks.write_into(&mut c, &meta)?;
            c.write(&path)?;
            artifacts.checkpoint = Some(self.rel(&path));
        }
        let record = RunRecord { scenario, seed, sparsity: s, pretrain_dev_loss: arm.dev_loss, tasks, cosine_to_dense, head_stats, artifacts, config: cfg.clone() };
        record.validate()?;
        Ok(record)
    }

    fn prune_after_finetune_cell(&self, seed: u64, s: f64) -> Result<RunRecord> {
        let cfg = self.cfg;
        let (base, _) = self.base(seed)?;
        let dir = self.cell_dir(seed, s);
        let mut artifacts = Artifacts::default();
        let reference = if cfg.analysis.mask_diff_vs_pretrain && s > 0.0 { Some(self.arm(seed, s, PruneMode::Masked)?.masks) } else { None };
        let mut tasks = Vec::with_capacity(self.ws.tasks.len());
        for task in &self.ws.tasks {
            let mut per_lr = Vec::with_capacity(cfg.learning_rates.len());
            let mut best: Option<(f64, MaskSet, f64)> = None;
            for &lr in &cfg.learning_rates {
                let rng = self.finetune_rng(seed, &task.name, lr);
                let mut model = base.clone();
                finetune(&mut model, task, cfg.epochs, lr, &cfg.finetune, None, &rng)?;
                let steps = task.train.len().div_ceil(cfg.finetune.batch_size) * cfg.recovery.epochs;
                let ramp = ((steps as f64 * cfg.recovery.ramp_frac).round() as usize).max(1);
                let schedule = SparsitySchedule::new(s, 0, ramp, (ramp / cfg.recovery.updates).max(1))?;
                let mut pruner = Pruner::new(&model, PruneMode::Masked, cfg.scope, Some(schedule), &rng)?;
                let out = recover(&mut model, task, cfg, lr, &mut pruner, &rng.split_named("recover"))?;
                let mlm = mlm_dev_loss(&model, &self.ws.dev_mlm, 64)?;
                info!("prune-after-finetune seed {seed} s={s} {} lr={lr:e}: dev accuracy {:.4}, train loss {:.4}", task.name, out.best_dev_accuracy, out.final_train_loss);
                if best.as_ref().is_none_or(|(acc, _, _)| out.best_dev_accuracy > *acc) {
                    best = Some((out.best_dev_accuracy, pruner.masks().clone(), mlm));
                }
                per_lr.push(LrResult { learning_rate: lr, best_dev_accuracy: out.best_dev_accuracy, final_train_loss: out.final_train_loss });
            }
            let (_, masks, mlm) = best.expect("learning-rate grid is non-empty");
            let masks_path = dir.join(format!("masks-{}.prnl", task.name));
            masks.save(&masks_path, &MaskMeta { scope: cfg.scope, sparsity: s, mode: PruneMode::Masked, seed })?;
            artifacts.reports.push(self.rel(&masks_path));
            let diff = match &reference {
                Some(r) => Some(mask_diff(r, &masks)?.overall),
                None if s == 0.0 => Some(0.0),
                None => None,
            };
            let best_lr = select_best(&per_lr);
            tasks.push(TaskResult {
                task: task.name.clone(),
                best_dev_accuracy: best_lr.best_dev_accuracy,
                final_train_loss: best_lr.final_train_loss,
                learning_rate: best_lr.learning_rate,
                epochs: cfg.epochs,
                per_lr,
                movement: None,
                mask_diff_vs_pretrain: diff,
                mlm_dev_loss: Some(mlm),
            });
        }
        let pretrain_dev_loss = tasks.iter().filter_map(|t| t.mlm_dev_loss).sum::<f64>() / tasks.len() as f64;
        let record = RunRecord {
            scenario: Scenario::PruneAfterFinetune,
            seed,
            sparsity: s,
            pretrain_dev_loss,
            tasks,
            cosine_to_dense: None,
            head_stats: None,
            artifacts,
            config: cfg.clone(),
        };
        record.validate()?;
        Ok(record)
    }
}

/// Learning rate with the highest dev accuracy; ties keep the earliest.
fn select_best(per_lr: &[LrResult]) -> &LrResult {
    per_lr.iter().fold(&per_lr[0], |best, r| if r.best_dev_accuracy > best.best_dev_accuracy { r } else { best })
}

/// Continues training a fine-tuned classifier on its task while `pruner` ramps sparsity.
fn recover(model: &mut Model, task: &DownstreamTask, cfg: &ExperimentConfig, lr: f32, pruner: &mut Pruner, rng: &RngState) -> Result<crate::training::FinetuneOutcome> {
    crate::training::continue_training(model, task, cfg.recovery.epochs, lr, &cfg.finetune, pruner, rng)
}

/// Mean over seeds of `f(record)` per sparsity, in grid order.
pub fn mean_by_sparsity(records: &[RunRecord], f: impl Fn(&RunRecord) -> Option<f64>) -> BTreeMap<i64, (f64, Vec<f64>)> {
    let mut groups: BTreeMap<i64, Vec<f64>> = BTreeMap::new();
    for r in records {
        if let Some(v) = f(r) {
            groups.entry((r.sparsity * 1000.0).round() as i64).or_default().push(v);
        }
    }
    groups
        .into_iter()
        .map(|(k, v)| {
            let mean = v.iter().sum::<f64>() / v.len() as f64;
            (k, (mean, v))
        })
        .collect()
}
