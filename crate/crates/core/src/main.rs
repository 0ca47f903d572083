use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use prunelab::analysis::{export_heatmap, layer_cosine_sim, mask_diff, model_head_stats, model_movement, model_pruned_mass, weight_stats, weight_stats_csv};
use prunelab::experiment::{read_results, results_path, run_scenario, ExperimentConfig, Scenario, Workspace};
use prunelab::pruning::MaskSet;
use prunelab::report::ReportTable;
use prunelab::{Container, Error, Model, Result, RngState};

#[derive(Parser)]
#[command(name = "prunelab", version, about = "Magnitude pruning experiments on a small BERT-style encoder")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the pre-training corpus and downstream task files.
    GenData {
        /// Experiment config supplying grammar, corpus and task settings.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "data")]
        out_dir: PathBuf,
        /// Overrides the corpus training size.
        #[arg(long)]
        train: Option<usize>,
        /// Overrides the corpus dev size.
        #[arg(long)]
        dev: Option<usize>,
    },
    /// Run every (seed, sparsity) cell of a scenario and emit results and tables.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 1)]
        workers: usize,
        #[arg(long, default_value = "out")]
        out_dir: PathBuf,
    },
    /// Compare or summarize checkpoints and masks.
    Analyze {
        #[arg(long, value_enum)]
        which: AnalysisKind,
        /// First checkpoint or mask file.
        #[arg(long)]
        a: PathBuf,
        /// Second checkpoint or mask file, for pairwise reports.
        #[arg(long)]
        b: Option<PathBuf>,
        /// Config whose grammar generates the sequences for `cosine`.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 200)]
        examples: usize,
        /// Sparsity levels for `pruned-mass`.
        #[arg(long, value_delimiter = ',', default_value = "0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9")]
        grid: Vec<f64>,
        #[arg(long, default_value = "analysis")]
        out_dir: PathBuf,
    },
    /// Render a results file as CSV and aligned text.
    Table {
        #[arg(long)]
        results: PathBuf,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Export weight matrices as grayscale images and CSV.
    Heatmap {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Parameter names; defaults to every prunable matrix.
        #[arg(long)]
        param: Vec<String>,
        #[arg(long, default_value = "heatmaps")]
        out_dir: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum AnalysisKind {
    /// Layer-wise cosine similarity between two checkpoints.
    Cosine,
    /// Sort-order movement from checkpoint A to checkpoint B.
    Movement,
    /// Normalized Hamming distance between two mask sets.
    MaskDiff,
    /// Per-head pruned fractions of a checkpoint that carries masks.
    HeadStats,
    /// Mean and standard deviation of every prunable matrix.
    WeightStats,
    /// Sum of |w| removed by one-shot pruning at each sparsity of `--grid`.
    PrunedMass,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match dispatch(Cli::parse().command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData { config, seed, out_dir, train, dev } => gen_data(config.as_deref(), seed, &out_dir, train, dev),
        Command::Run { config, seed, workers, out_dir } => run(&config, seed, workers, &out_dir),
        Command::Analyze { which, a, b, config, seed, examples, grid, out_dir } => {
            analyze(which, &a, b.as_deref(), config.as_deref(), seed, examples, &grid, &out_dir)
        }
        Command::Table { results, out_dir } => table(&results, out_dir.as_deref()),
        Command::Heatmap { checkpoint, param, out_dir } => heatmap(&checkpoint, &param, &out_dir),
    }
}

fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<ExperimentConfig> {
    let mut cfg = match path {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::new(Scenario::PrunePretrain),
    };
    if let Some(s) = seed {
        cfg.master_seed = s;
    }
    Ok(cfg)
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn gen_data(config: Option<&Path>, seed: Option<u64>, out_dir: &Path, train: Option<usize>, dev: Option<usize>) -> Result<()> {
    let mut cfg = load_config(config, seed)?;
    cfg.corpus.train = train.unwrap_or(cfg.corpus.train);
    cfg.corpus.dev = dev.unwrap_or(cfg.corpus.dev);
    cfg.validate()?;
    let ws = Workspace::generate(&cfg)?;
    create_dir(out_dir)?;
    ws.corpus.write(out_dir)?;
    for task in &ws.tasks {
        task.write(out_dir)?;
        println!("task {}: {} train, {} dev examples", task.name, task.train.len(), task.dev.len());
    }
    println!("corpus: {} train, {} dev sequences in {}", ws.corpus.train.len(), ws.corpus.dev.len(), out_dir.display());
    Ok(())
}

fn run(config: &Path, seed: Option<u64>, workers: usize, out_dir: &Path) -> Result<()> {
    let cfg = load_config(Some(config), seed)?;
    let records = run_scenario(&cfg, out_dir, workers)?;
    let table = ReportTable::from_records(&records)?;
    write_table(&table, out_dir, cfg.scenario.name())?;
    print!("{}", table.to_text());
    println!("results: {}", results_path(out_dir, cfg.scenario).display());
    Ok(())
}

fn write_table(table: &ReportTable, dir: &Path, stem: &str) -> Result<()> {
    create_dir(dir)?;
    write(&dir.join(format!("table-{stem}.csv")), &table.to_csv())?;
    write(&dir.join(format!("table-{stem}.txt")), &table.to_text())
}

fn table(results: &Path, out_dir: Option<&Path>) -> Result<()> {
    let records = read_results(results)?;
    if records.is_empty() {
        return Err(Error::Results(format!("{} holds no records", results.display())));
    }
    let table = ReportTable::from_records(&records)?;
    if let Some(dir) = out_dir {
        write_table(&table, dir, records[0].scenario.name())?;
    }
    print!("{}", table.to_text());
    Ok(())
}

fn require<'a>(b: Option<&'a Path>, which: &str) -> Result<&'a Path> {
    b.ok_or_else(|| Error::InvalidParameter(format!("`{which}` compares two artifacts; pass --b")))
}

fn load_masks(path: &Path) -> Result<MaskSet> {
    Ok(MaskSet::read_from(&Container::read(path)?)?.0)
}

#[allow(clippy::too_many_arguments)]
fn analyze(which: AnalysisKind, a: &Path, b: Option<&Path>, config: Option<&Path>, seed: Option<u64>, examples: usize, grid: &[f64], out_dir: &Path) -> Result<()> {
    create_dir(out_dir)?;
    let (name, csv) = match which {
        AnalysisKind::Cosine => {
            let (ma, mb) = (Model::load(a)?, Model::load(require(b, "cosine")?)?);
            let cfg = load_config(config, seed)?;
            let grammar = prunelab::data::Grammar::new(cfg.grammar.clone(), &mut RngState::new(cfg.master_seed).split_named("data").split_named("grammar"))?;
            let mut rng = RngState::new(cfg.master_seed).split_named("analyze");
            let seqs: Vec<_> = (0..examples).map(|_| grammar.pretrain_sequence(&mut rng)).collect();
            let report = layer_cosine_sim(&ma, &mb, &seqs)?;
            for (l, c) in report.per_layer.iter().enumerate() {
                println!("layer {l}: {c:.6}");
            }
            ("cosine", report.to_csv())
        }
        AnalysisKind::Movement => {
            let (ma, mb) = (Model::load(a)?, Model::load(require(b, "movement")?)?);
            let m = model_movement(&ma, &mb, &ma.prunable_set())?;
            for (name, r) in &m.matrices {
                println!("{name}: {:.4} ± {:.4} %", r.mean, r.std);
            }
            println!("pooled: {:.4} ± {:.4} %", m.pooled.mean, m.pooled.std);
            ("movement", m.to_csv())
        }
        AnalysisKind::MaskDiff => {
            let report = mask_diff(&load_masks(a)?, &load_masks(require(b, "mask-diff")?)?)?;
            println!("overall: {:.6}", report.overall);
            ("mask_diff", report.to_csv())
        }
        AnalysisKind::HeadStats => {
            let c = Container::read(a)?;
            let model = Model::from_container(&c)?;
            let (masks, meta) = MaskSet::read_from(&c)?;
            let stats = model_head_stats(&masks, &model.prunable_set(), model.config().num_heads, meta.sparsity)?;
            println!("per-head pruned fraction: min {:.4}, mean {:.4}, max {:.4}", stats.min, stats.mean, stats.max);
            ("head_stats", stats.to_csv())
        }
        AnalysisKind::WeightStats => {
            let model = Model::load(a)?;
            ("weight_stats", weight_stats_csv(&weight_stats(&model, &model.prunable_set())))
        }
        AnalysisKind::PrunedMass => {
            let model = Model::load(a)?;
            let mass = model_pruned_mass(&model, &model.prunable_set(), grid)?;
            let mut csv = String::from("sparsity,pruned_mass\n");
            for (s, m) in grid.iter().zip(&mass) {
                csv.push_str(&format!("{s},{m}\n"));
                println!("{s:.2}: {m:.6}");
            }
            ("pruned_mass", csv)
        }
    };
    let path = out_dir.join(format!("{name}.csv"));
    write(&path, &csv)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn heatmap(checkpoint: &Path, params: &[String], out_dir: &Path) -> Result<()> {
    let model = Model::load(checkpoint)?;
    let names: Vec<String> = if params.is_empty() { model.prunable_set().names().map(str::to_string).collect() } else { params.to_vec() };
    create_dir(out_dir)?;
    for name in &names {
        let w = model.param_by_name(name)?;
        let (csv, pgm) = export_heatmap(w, out_dir.join(name.replace(['/', '.'], "_")))?;
        println!("{name}: {} {}", csv.display(), pgm.display());
    }
    Ok(())
}
