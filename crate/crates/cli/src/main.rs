use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use srapf::adversarial::{sweep_epsilon, sweep_table};
use srapf::checkpoint::Checkpoint;
use srapf::data::{generate_shift_benchmark, BenchmarkConfig, ShiftBenchmark, ShiftSpec};
use srapf::evaluation::{accuracy, comparison_table, emit_scatter, scatter_tsv, summarize_seeds, EvalReport};
use srapf::model::{DualEncoderModel, ModelConfig};
use srapf::pipeline::{
    pretrain_on_corpus, run_stages, FewShotTask, PretrainConfig, Profile, Recipe, RetrievalSource, StageConfig,
};
use srapf::retrieval::{load_corpus, retrieve_all};

const PRETRAINED: &str = "pretrained.ckpt";

#[derive(Parser)]
#[command(name = "srapf", version, about = "Few-shot dual-encoder adaptation toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic shift benchmark and pretrain a toy dual encoder on its corpus.
    Generate {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 10)]
        num_classes: usize,
        /// Shift list such as `noise,rotation:0.5`; defaults to all four kinds.
        #[arg(long, value_delimiter = ',')]
        shifts: Vec<ShiftSpec>,
        #[arg(long, default_value_t = 4000)]
        corpus_size: usize,
        #[arg(long, default_value_t = 40)]
        pretrain_epochs: usize,
    },
    /// Retrieve class-matching captions from a corpus.
    Retrieve {
        #[arg(long)]
        corpus: PathBuf,
        /// One class name per line.
        #[arg(long)]
        classes: PathBuf,
        /// Per-class cap, or `none`.
        #[arg(long, default_value = "500")]
        cap: String,
        #[arg(long)]
        out: PathBuf,
        /// Checkpoint whose text encoder ranks captions.
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run one recipe on a generated task.
    Train {
        #[arg(long)]
        recipe: Recipe,
        #[arg(long)]
        task: PathBuf,
        /// Corpus TSV; defaults to the task's own corpus.
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 16)]
        shots: usize,
        #[arg(long, default_value = "toy")]
        profile: String,
        /// Stage config TOML files overriding the recipe defaults, in order.
        #[arg(long = "config")]
        configs: Vec<PathBuf>,
        /// Pretrained checkpoint; defaults to `<task>/pretrained.ckpt`.
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Partial finetuning with AP over a range of radii.
    Sweep {
        #[arg(long)]
        task: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_delimiter = ',', default_value = "0,0.005,0.01,0.02,0.05")]
        eps: Vec<f64>,
        #[arg(long, default_value_t = 2)]
        top_k: usize,
        #[arg(long, default_value_t = 16)]
        shots: usize,
        #[arg(long, default_value = "toy")]
        profile: String,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Summarize run directories written by `train`.
    Report {
        runs: Vec<PathBuf>,
        /// Write method/params/ID/OOD scatter data here.
        #[arg(long)]
        scatter: Option<PathBuf>,
        /// Write the per-method seed summary TSV here.
        #[arg(long)]
        summary: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a task's test sets.
    Eval {
        #[arg(long)]
        task: PathBuf,
        #[arg(long)]
        model: PathBuf,
    },
}

#[derive(Serialize, Deserialize)]
struct RunMeta {
    recipe: String,
    seed: u64,
    shots: usize,
    profile: String,
    params_trained: usize,
    stages: Vec<String>,
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Generate {
            out,
            seed,
            num_classes,
            shifts,
            corpus_size,
            pretrain_epochs,
        } => generate(&out, seed, num_classes, shifts, corpus_size, pretrain_epochs),
        Command::Retrieve {
            corpus,
            classes,
            cap,
            out,
            model,
            seed,
        } => retrieve(&corpus, &classes, &cap, &out, model.as_deref(), seed),
        Command::Train {
            recipe,
            task,
            corpus,
            seed,
            out,
            shots,
            profile,
            configs,
            model,
        } => train(
            recipe,
            &task,
            corpus.as_deref(),
            seed,
            &out,
            shots,
            &profile,
            &configs,
            model.as_deref(),
        ),
        Command::Sweep {
            task,
            seed,
            eps,
            top_k,
            shots,
            profile,
            out,
            model,
        } => sweep(
            &task,
            seed,
            &eps,
            top_k,
            shots,
            &profile,
            out.as_deref(),
            model.as_deref(),
        ),
        Command::Report { runs, scatter, summary } => report(&runs, scatter.as_deref(), summary.as_deref()),
        Command::Eval { task, model } => {
            let bench = ShiftBenchmark::load(&task)?;
            let ckpt = Checkpoint::load(&model)?;
            let task = FewShotTask::from_benchmark(&bench, 1, 0)?;
            print!("{}", task.evaluate(&ckpt.model)?.to_table());
            Ok(())
        }
    }
}

fn generate(
    out: &Path,
    seed: u64,
    num_classes: usize,
    shifts: Vec<ShiftSpec>,
    corpus_size: usize,
    pretrain_epochs: usize,
) -> Result<()> {
    let mut config = BenchmarkConfig {
        num_classes,
        corpus_size,
        seed,
        ..BenchmarkConfig::default()
    };
    if !shifts.is_empty() {
        config.shifts = shifts;
    }
    let bench = generate_shift_benchmark(&config)?;
    bench.save(out)?;
    eprintln!("wrote benchmark to {}", out.display());
    let pretrain = PretrainConfig {
        epochs: pretrain_epochs,
        seed,
        ..PretrainConfig::default()
    };
    let (model, losses) = pretrain_on_corpus(&bench, ModelConfig::default(), &pretrain)?;
    eprintln!(
        "pretrained: contrastive loss {:.4} -> {:.4}",
        losses.first().copied().unwrap_or(f64::NAN),
        losses.last().copied().unwrap_or(f64::NAN)
    );
    let task = FewShotTask::from_benchmark(&bench, 1, 0)?;
    eprint!("zero-shot:\n{}", task.evaluate(&model)?.to_table());
    let id_val_top1 = accuracy(&model, &bench.id_val)?;
    Checkpoint {
        model,
        stage: "pretrain".into(),
        epoch: 0,
        id_val_top1,
        config_hash: String::new(),
        freeze_plan: None,
    }
    .save(&out.join(PRETRAINED))?;
    eprintln!("wrote {}", out.join(PRETRAINED).display());
    Ok(())
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let file = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line?;
        let t = line.trim();
        if !t.is_empty() {
            out.push(t.to_string());
        }
    }
    Ok(out)
}

fn parse_cap(cap: &str) -> Result<Option<usize>> {
    match cap {
        "none" | "inf" => Ok(None),
        n => {
            let v: usize = n.parse().with_context(|| format!("bad cap {n:?}"))?;
            if v == 0 {
                bail!("cap must be >= 1");
            }
            Ok(Some(v))
        }
    }
}

fn retrieve(corpus: &Path, classes: &Path, cap: &str, out: &Path, model: Option<&Path>, seed: u64) -> Result<()> {
    let corpus = load_corpus(corpus)?;
    let class_names = read_lines(classes)?;
    let model = match model {
        Some(p) => Checkpoint::load(p)?.model,
        None => DualEncoderModel::new(
            ModelConfig {
                num_classes: class_names.len().max(1),
                ..ModelConfig::default()
            },
            seed,
        )?,
    };
    let retrieved = retrieve_all(&corpus, &class_names, &model, parse_cap(cap)?)?;
    retrieved.save(out)?;
    eprint!("{}", retrieved.histogram());
    eprintln!("{} entries written to {}", retrieved.len(), out.display());
    Ok(())
}

fn load_task(task: &Path, corpus: Option<&Path>) -> Result<ShiftBenchmark> {
    let mut bench = ShiftBenchmark::load(task).with_context(|| format!("loading task {}", task.display()))?;
    if let Some(c) = corpus {
        bench.corpus = load_corpus(c)?;
    }
    Ok(bench)
}

fn load_pretrained(task: &Path, model: Option<&Path>) -> Result<DualEncoderModel> {
    let path = model.map_or_else(|| task.join(PRETRAINED), Path::to_path_buf);
    Ok(Checkpoint::load(&path)
        .with_context(|| format!("loading pretrained model {}", path.display()))?
        .model)
}

#[allow(clippy::too_many_arguments)]
fn train(
    recipe: Recipe,
    task_dir: &Path,
    corpus: Option<&Path>,
    seed: u64,
    out: &Path,
    shots: usize,
    profile: &str,
    config_paths: &[PathBuf],
    model: Option<&Path>,
) -> Result<()> {
    let bench = load_task(task_dir, corpus)?;
    let pretrained = load_pretrained(task_dir, model)?;
    let profile = Profile::by_name(profile)?;
    let task = FewShotTask::from_benchmark(&bench, shots, seed)?;
    let configs: Vec<StageConfig> = if config_paths.is_empty() {
        recipe.stages(&profile, pretrained.visual_depth(), pretrained.text_depth(), seed)
    } else {
        config_paths
            .iter()
            .map(|p| StageConfig::load(p))
            .collect::<srapf::Result<_>>()?
    };
    let source = RetrievalSource::from_benchmark(&bench);
    let outcome = run_stages(recipe.name(), &pretrained, &task, Some(source), &configs)?;

    fs::create_dir_all(out)?;
    task.split.save(&out.join("split.json"))?;
    let mut history = String::from("stage\tepoch\ttrain_loss\tid_val_top1\tretrieved_seen\n");
    for (cfg, stage) in configs.iter().zip(&outcome.stages) {
        cfg.save(&out.join(format!("{}.toml", cfg.name)))?;
        stage.best.save(&out.join(format!("{}_best.ckpt", cfg.name)))?;
        for r in &stage.history {
            history.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\n",
                cfg.name, r.epoch, r.train_loss, r.id_val_top1, r.retrieved_seen
            ));
        }
    }
    fs::write(out.join("history.tsv"), history)?;
    if let Some(r) = &outcome.retrieved {
        r.save(&out.join("retrieved.tsv"))?;
    }
    let report = outcome.report();
    fs::write(out.join("report.json"), serde_json::to_string_pretty(report)?)?;
    fs::write(
        out.join("report.tsv"),
        format!("{}\n{}\n", report.tsv_header(), report.tsv_values()),
    )?;
    fs::write(out.join("report.txt"), report.to_table())?;
    let meta = RunMeta {
        recipe: recipe.name().to_string(),
        seed,
        shots,
        profile: profile.name.clone(),
        params_trained: outcome.params_trained,
        stages: configs.iter().map(|c| c.name.clone()).collect(),
    };
    fs::write(out.join("run.json"), serde_json::to_string_pretty(&meta)?)?;
    print!("{}", report.to_table());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn sweep(
    task_dir: &Path,
    seed: u64,
    eps: &[f64],
    top_k: usize,
    shots: usize,
    profile: &str,
    out: Option<&Path>,
    model: Option<&Path>,
) -> Result<()> {
    let bench = load_task(task_dir, None)?;
    let pretrained = load_pretrained(task_dir, model)?;
    let profile = Profile::by_name(profile)?;
    let task = FewShotTask::from_benchmark(&bench, shots, seed)?;
    let mut base = Recipe::PftAp
        .stages(&profile, pretrained.visual_depth(), pretrained.text_depth(), seed)
        .remove(0);
    base.top_k_visual = top_k;
    let rows = sweep_epsilon(&pretrained, &task, &base, eps)?;
    let table = sweep_table(&rows);
    match out {
        Some(p) => fs::write(p, &table)?,
        None => print!("{table}"),
    }
    Ok(())
}

fn report(runs: &[PathBuf], scatter: Option<&Path>, summary: Option<&Path>) -> Result<()> {
    if runs.is_empty() {
        bail!("no run directories given");
    }
    let mut by_method: BTreeMap<String, Vec<(RunMeta, EvalReport)>> = BTreeMap::new();
    for dir in runs {
        let meta: RunMeta = serde_json::from_str(&fs::read_to_string(dir.join("run.json"))?)
            .with_context(|| format!("reading {}/run.json", dir.display()))?;
        let rep: EvalReport = serde_json::from_str(&fs::read_to_string(dir.join("report.json"))?)?;
        by_method.entry(meta.recipe.clone()).or_default().push((meta, rep));
    }
    let order = |m: &str| Recipe::ALL.iter().position(|r| r.name() == m).unwrap_or(usize::MAX);
    let mut methods: Vec<&String> = by_method.keys().collect();
    methods.sort_by_key(|m| order(m));

    let mut table_rows = Vec::new();
    let mut scatter_rows = Vec::new();
    let mut summaries = String::new();
    for m in methods {
        let runs = &by_method[m];
        let reports: Vec<EvalReport> = runs.iter().map(|(_, r)| r.clone()).collect();
        let s = summarize_seeds(&reports)?;
        summaries.push_str(&format!("# {m}\n{}", s.to_tsv()));
        eprint!("{m}\n{}", s.to_table());
        // The mean report stands in for the method in the comparison table.
        let mut mean = reports[0].clone();
        for d in &mut mean.per_dataset {
            d.top1 = s.get(&d.name).map_or(f64::NAN, |r| r.mean);
        }
        mean.ood_mean = s.get("ood_mean").map(|r| r.mean);
        scatter_rows.push((m.clone(), runs[0].0.params_trained, mean.clone()));
        table_rows.push((m.clone(), mean));
    }
    print!("{}", comparison_table(&table_rows));
    if let Some(p) = scatter {
        fs::write(p, scatter_tsv(&emit_scatter(&scatter_rows)))?;
    }
    if let Some(p) = summary {
        fs::write(p, summaries)?;
    }
    Ok(())
}
