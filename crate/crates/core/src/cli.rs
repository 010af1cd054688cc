//! Subcommands of the `dynlora` executable.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::checkpoint::{checkpoint_to_model, merged_checkpoint, Checkpoint};
use crate::error::{Error, Result};
use crate::glyphgen::{generate_dataset, read_gly1, write_gly1, GlyphDataset, ScriptFamily, Split};
use crate::metrics::{emit_report, EvalReport, ReportRow};
use crate::trainer::{evaluate, evaluate_task, train_sequential, Augment, Mode, TaskData, TrainConfig};

#[derive(Debug, Parser)]
#[command(name = "dynlora", version, about = "Dynamic-rank LoRA on synthetic glyph scripts")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render one script family into train.gly1 and test.gly1.
    GenerateData(GenerateArgs),
    /// Train sequentially over the config's task list.
    Train(TrainArgs),
    /// Run an lr/batch grid or a component ablation.
    Ablate(AblateArgs),
    /// Print accuracy, macro recall and macro F1 of a checkpoint.
    Eval(EvalArgs),
    /// Fold adapters into the backbone and drop them.
    Merge(MergeArgs),
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long, value_parser = clap::value_parser!(u8).range(0..=3))]
    pub family: u8,
    #[arg(long, default_value_t = crate::glyphgen::DEFAULT_PER_CLASS)]
    pub per_class: usize,
    /// Test glyphs per class; defaults to a quarter of --per-class.
    #[arg(long)]
    pub test_per_class: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct RunOptions {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the config file's mode.
    #[arg(long)]
    pub mode: Option<Mode>,
    /// Keep each task's adapters separate instead of folding them in.
    #[arg(long)]
    pub no_merge: bool,
    /// Random rotation, crop and brightness on training images.
    #[arg(long)]
    pub augment: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub run: RunOptions,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub run: RunOptions,
    /// Grid axes such as `lr=1e-5,1e-6,5e-6 batch=1,2,4`.
    #[arg(long, num_args = 1.., conflicts_with = "components", required_unless_present = "components")]
    pub grid: Vec<String>,
    /// Components to disable one at a time: dynamic_rank, mlp, attention, sparsity.
    #[arg(long, value_delimiter = ',')]
    pub components: Vec<String>,
    /// Seeds averaged per cell; defaults to the config seed.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Vec<u64>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// A GLY1 file, or a directory holding test.gly1.
    #[arg(long)]
    pub data: PathBuf,
    /// Evaluate with the stored head of this task instead of the current one.
    #[arg(long)]
    pub task: Option<usize>,
}

#[derive(Debug, Args)]
pub struct MergeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Output file, or a directory to receive model.dlra.
    #[arg(long)]
    pub out: PathBuf,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenerateData(a) => generate(&a),
        Command::Train(a) => train(&a.run).map(|_| ()),
        Command::Ablate(a) => ablate(&a).map(|_| ()),
        Command::Eval(a) => eval(&a).map(|r| print!("{}", format_eval(&r))),
        Command::Merge(a) => merge(&a).map(|p| println!("wrote {}", p.display())),
    }
}

pub fn generate(a: &GenerateArgs) -> Result<()> {
    let family = ScriptFamily::new(a.family)?;
    let test_per_class = a.test_per_class.unwrap_or((a.per_class / 4).max(2));
    std::fs::create_dir_all(&a.out)?;
    let train = generate_dataset(&family, a.per_class, a.seed, Split::Train)?;
    let test = generate_dataset(&family, test_per_class, a.seed, Split::Test)?;
    write_gly1(&train, a.out.join("train.gly1"))?;
    write_gly1(&test, a.out.join("test.gly1"))?;
    let manifest = format!(
        "command = generate-data\nfamily = {}\nname = {}\nper_class = {}\ntest_per_class = {}\nseed = {}\n",
        a.family,
        family.name(),
        a.per_class,
        test_per_class,
        a.seed
    );
    std::fs::write(a.out.join("manifest.txt"), manifest)?;
    println!(
        "{}: {} train, {} test glyphs in {}",
        family.name(),
        train.len(),
        test.len(),
        a.out.display()
    );
    Ok(())
}

fn task_name(ds: &GlyphDataset) -> String {
    ScriptFamily::new(ds.family)
        .map(|f| f.name().to_string())
        .unwrap_or_else(|_| format!("family{}", ds.family))
}

/// Reads `train.gly1` and `test.gly1` from every task directory.
pub fn load_tasks(dirs: &[PathBuf]) -> Result<Vec<TaskData>> {
    if dirs.is_empty() {
        return Err(Error::Config("config lists no tasks".into()));
    }
    dirs.iter()
        .map(|d| {
            let train = read_gly1(d.join("train.gly1"))?;
            let test = read_gly1(d.join("test.gly1"))?;
            Ok(TaskData {
                name: task_name(&train),
                train,
                test,
            })
        })
        .collect()
}

fn resolve_config(run: &RunOptions) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::load(&run.config)?;
    if let Some(m) = run.mode {
        cfg.mode = m;
    }
    cfg.merge = !run.no_merge;
    if run.augment {
        cfg.augment = Some(Augment::default());
    }
    Ok(cfg)
}

fn rows_for(config: &str, tasks: &[TaskData], reports: &[EvalReport]) -> Vec<ReportRow> {
    tasks
        .iter()
        .zip(reports)
        .map(|(t, r)| ReportRow {
            config: config.to_string(),
            task: t.name.clone(),
            report: r.clone(),
        })
        .collect()
}

/// `train`: sequential run, checkpoints, report and manifest under `out`.
pub fn train(run: &RunOptions) -> Result<Vec<ReportRow>> {
    let cfg = resolve_config(run)?;
    let tasks = load_tasks(&cfg.tasks)?;
    std::fs::create_dir_all(&run.out)?;
    std::fs::write(run.out.join("manifest.txt"), format!("command = train\n{}", cfg.manifest()))?;
    let res = train_sequential::<f32>(&tasks, &cfg, Some(&run.out))?;

    let mut log = String::new();
    for (t, l) in res.tasks.iter().enumerate() {
        let ranks: Vec<String> = l.result.active_ranks.iter().map(|(id, r)| format!("{id}:{r}")).collect();
        writeln!(
            log,
            "task {t} {}: steps {} best epoch {} trainable params {} adapter params {} checkpoint bytes {} active rank {} [{}] {:.1}s",
            l.name,
            l.result.steps,
            l.result.best_epoch,
            l.result.trainable_params,
            l.adapter_params,
            l.checkpoint_bytes,
            l.result.active_ranks.iter().map(|x| x.1).sum::<usize>(),
            ranks.join(" "),
            l.wall_seconds
        )
        .unwrap();
    }
    log += "accuracy matrix R[task][after task]:\n";
    for row in &res.r {
        let cells: Vec<String> = row
            .iter()
            .map(|c| c.map_or("   -  ".to_string(), |v| format!("{v:.4}")))
            .collect();
        writeln!(log, "  {}", cells.join(" ")).unwrap();
    }
    for (t, f) in res.forgetting.iter().enumerate() {
        writeln!(log, "forgetting task {t}: {f:.4}").unwrap();
    }
    print!("{log}");
    std::fs::write(run.out.join("train.log"), log)?;

    let rows = rows_for(&cfg.mode.to_string(), &tasks, &res.reports);
    emit_report(&rows, &run.out)?;
    Ok(rows)
}

/// One ablation cell: a label and the config it runs.
#[derive(Debug, Clone)]
pub struct Cell {
    pub label: String,
    pub config: TrainConfig,
}

/// Cells of `--grid lr=… batch=…`; `batch` sets the micro-batch size.
pub fn grid_cells(base: &TrainConfig, axes: &[String]) -> Result<Vec<Cell>> {
    let mut cells = vec![Cell {
        label: String::new(),
        config: base.clone(),
    }];
    for axis in axes {
        let (key, values) = axis
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("grid axis {axis:?} must look like key=v1,v2")))?;
        let values: Vec<&str> = values.split(',').filter(|v| !v.is_empty()).collect();
        if values.is_empty() {
            return Err(Error::Config(format!("grid axis {key} has no values")));
        }
        let mut next = Vec::new();
        for cell in &cells {
            for v in &values {
                let mut c = cell.config.clone();
                match key {
                    "batch" => {
                        c.micro_batch = v
                            .parse()
                            .map_err(|_| Error::Config(format!("bad batch value {v:?}")))?
                    }
                    "lr" | "weight_decay" | "lambda" | "rank" | "alpha" | "accumulation_steps" | "max_epochs" => {
                        c.set(key, v)?
                    }
                    _ => return Err(Error::Config(format!("cannot grid over {key:?}"))),
                }
                c.validate()?;
                let sep = if cell.label.is_empty() { "" } else { " " };
                next.push(Cell {
                    label: format!("{}{sep}{key}={v}", cell.label),
                    config: c,
                });
            }
        }
        cells = next;
    }
    Ok(cells)
}

pub const COMPONENTS: [&str; 4] = ["dynamic_rank", "mlp", "attention", "sparsity"];

/// The full configuration followed by one cell per disabled component.
pub fn component_cells(base: &TrainConfig, components: &[String]) -> Result<Vec<Cell>> {
    let mut full = base.clone();
    full.mode = Mode::Dynamic;
    let mut cells = vec![Cell {
        label: "full".into(),
        config: full.clone(),
    }];
    for name in components {
        let mut c = full.clone();
        match name.as_str() {
            "dynamic_rank" => {
                c.mode = Mode::FixedRank;
                c.freeze_importance = true;
            }
            "mlp" => c.targets.mlp = false,
            "attention" => c.targets.attention = false,
            "sparsity" => c.lambda = 0.0,
            other => {
                return Err(Error::Config(format!(
                    "unknown component {other:?} (expected one of {})",
                    COMPONENTS.join(", ")
                )))
            }
        }
        c.validate()?;
        cells.push(Cell {
            label: format!("no_{name}"),
            config: c,
        });
    }
    Ok(cells)
}

fn mean_report(reports: &[EvalReport]) -> EvalReport {
    let n = reports.len() as f64;
    let avg = |f: fn(&EvalReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
    EvalReport {
        accuracy: avg(|r| r.accuracy),
        macro_recall: avg(|r| r.macro_recall),
        macro_f1: avg(|r| r.macro_f1),
        per_class: Vec::new(),
        active_ranks: Vec::new(),
        forgetting: None,
    }
}

/// Runs `cells` over `seeds` on `tasks`, averaging metrics across seeds.
/// Each cell writes its manifest and checkpoints under `out/<index>`.
pub fn run_cells(cells: &[Cell], seeds: &[u64], tasks: &[TaskData], out: &Path) -> Result<Vec<ReportRow>> {
    let mut rows = Vec::new();
    let mut index = String::new();
    for (i, cell) in cells.iter().enumerate() {
        let dir = out.join(format!("cell{i}"));
        std::fs::create_dir_all(&dir)?;
        writeln!(index, "cell{i} = {}", cell.label).unwrap();
        let mut per_seed: Vec<Vec<EvalReport>> = vec![Vec::new(); tasks.len()];
        let mut manifest = format!("label = {}\nseeds = {seeds:?}\n", cell.label);
        for &seed in seeds {
            let cfg = TrainConfig {
                seed,
                ..cell.config.clone()
            };
            let res = train_sequential::<f32>(tasks, &cfg, None)?;
            for (t, rep) in res.reports.into_iter().enumerate() {
                per_seed[t].push(rep);
            }
            manifest = format!("label = {}\nseeds = {seeds:?}\n{}", cell.label, cfg.manifest());
        }
        std::fs::write(dir.join("manifest.txt"), manifest)?;
        let reports: Vec<EvalReport> = per_seed.iter().map(|r| mean_report(r)).collect();
        rows.extend(rows_for(&cell.label, tasks, &reports));
    }
    std::fs::write(out.join("cells.txt"), index)?;
    Ok(rows)
}

/// `ablate`: grid or component cells, one combined report.
pub fn ablate(a: &AblateArgs) -> Result<Vec<ReportRow>> {
    let base = resolve_config(&a.run)?;
    let tasks = load_tasks(&base.tasks)?;
    let cells = if a.grid.is_empty() {
        component_cells(&base, &a.components)?
    } else {
        grid_cells(&base, &a.grid)?
    };
    let seeds = if a.seeds.is_empty() { vec![base.seed] } else { a.seeds.clone() };
    std::fs::create_dir_all(&a.run.out)?;
    let mut manifest = format!("command = ablate\n{}", base.manifest());
    for (i, c) in cells.iter().enumerate() {
        writeln!(manifest, "cell{i} = {}", c.label).unwrap();
    }
    writeln!(manifest, "seeds = {}", seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(",")).unwrap();
    std::fs::write(a.run.out.join("manifest.txt"), manifest)?;
    let rows = run_cells(&cells, &seeds, &tasks, &a.run.out)?;
    emit_report(&rows, &a.run.out)?;
    print!("{}", crate::metrics::to_markdown(&rows));
    Ok(rows)
}

fn data_file(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join("test.gly1")
    } else {
        path.to_path_buf()
    }
}

/// `eval`: metrics of the checkpoint's current head (or `--task`'s).
pub fn eval(a: &EvalArgs) -> Result<EvalReport> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let data = read_gly1(data_file(&a.data))?;
    let (model, extras) = checkpoint_to_model::<f32>(&ck)?;
    match a.task {
        Some(t) => evaluate_task(&model, &extras, t, &data),
        None => evaluate(&model, &data),
    }
}

pub fn format_eval(r: &EvalReport) -> String {
    let mut s = format!(
        "accuracy {:.6}\nrecall {:.6}\nf1 {:.6}\n",
        r.accuracy, r.macro_recall, r.macro_f1
    );
    if !r.active_ranks.is_empty() {
        let total: usize = r.active_ranks.iter().map(|x| x.1).sum();
        writeln!(s, "active rank {total}").unwrap();
    }
    s
}

/// `merge`: writes the adapter-free checkpoint and returns its path.
pub fn merge(a: &MergeArgs) -> Result<PathBuf> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let merged = merged_checkpoint::<f32>(&ck)?;
    let path = if a.out.extension().is_some_and(|e| e == "dlra") {
        if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent)?;
        }
        a.out.clone()
    } else {
        std::fs::create_dir_all(&a.out)?;
        a.out.join("model.dlra")
    };
    merged.save(&path)?;
    Ok(path)
}
