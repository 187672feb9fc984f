use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use f2c_core::consensus::{ConsensusOutcome, Hyperparams};
use f2c_core::losses::{f2c_total, LossBreakdown};
use f2c_core::metrics::MetricsReport;
use f2c_core::scorer::CheckpointFile;
use f2c_core::synthdata::{generate, Dataset, DedupReport, FormatsSidecar, Split, TaskConfig, DATASET_FILE, FORMATS_FILE};
use f2c_core::trainer::{
    evaluate, run_heldout_formats, run_method_comparison, run_ood, train, Method, TrainConfig, TrainError,
};
use serde::{Deserialize, Serialize};

use crate::args::{EvalArgs, GenArgs, MethodArg, SplitArg, StudyArgs, StudyKind, TrainArgs};
use crate::artifacts::RunDir;
use crate::config;

/// Process exit codes.
pub const EXIT_FAILURE: u8 = 1;
pub const EXIT_USAGE: u8 = 2;
pub const EXIT_NUMERICAL: u8 = 3;

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub error: anyhow::Error,
}

impl CliError {
    pub fn usage(error: impl Into<anyhow::Error>) -> Self {
        Self {
            code: EXIT_USAGE,
            error: error.into(),
        }
    }
}

impl From<anyhow::Error> for CliError {
    fn from(error: anyhow::Error) -> Self {
        Self {
            code: EXIT_FAILURE,
            error,
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        let code = if e.is_numerical() {
            EXIT_NUMERICAL
        } else {
            match e {
                TrainError::InvalidConfig { .. }
                | TrainError::Incompatible(_)
                | TrainError::Consensus(_)
                | TrainError::Data(f2c_core::synthdata::DataError::InvalidConfig { .. }) => EXIT_USAGE,
                _ => EXIT_FAILURE,
            }
        };
        Self {
            code,
            error: e.into(),
        }
    }
}

type CliResult<T> = Result<T, CliError>;

fn load_dataset(dir: &Path) -> CliResult<Dataset> {
    Dataset::load_from_dir(dir)
        .with_context(|| format!("loading dataset from {}", dir.display()))
        .map_err(CliError::usage)
}

pub fn gen(args: &GenArgs) -> CliResult<()> {
    let mut task: TaskConfig = config::load(args.config.as_deref(), &args.overrides).map_err(CliError::usage)?;
    if let Some(seed) = args.seed {
        task.seed = seed;
    }
    task.validate().map_err(CliError::usage)?;
    let (dataset, dedup) = generate(&task).map_err(|e| CliError::usage(anyhow!(e)))?;
    let out = args.out.resolve("gen");
    let mut run = RunDir::create(&out)?;
    dataset.write_to_dir(run.path()).map_err(|e| anyhow!(e))?;
    run.track(DATASET_FILE);
    run.track(FORMATS_FILE);
    run.write_json::<DedupReport>("dedup.json", &dedup)?;
    run.finish("gen", args.config.as_deref(), vec![task.seed], args.overrides.clone())?;
    println!(
        "wrote {} instances ({} dropped as duplicates) to {}",
        dataset.len(),
        dedup.dropped.len(),
        out.display()
    );
    Ok(())
}

fn method_of(m: MethodArg) -> Method {
    match m {
        MethodArg::Base => Method::Base,
        MethodArg::Swarm => Method::Swarm,
        MethodArg::Cce => Method::Cce,
        MethodArg::F2c => Method::F2c,
    }
}

#[derive(Serialize)]
struct TrainSnapshot<'a> {
    dataset: String,
    config: &'a TrainConfig,
    effective_hp: Hyperparams,
}

#[derive(Serialize)]
struct CheckpointSummary<'a> {
    step: usize,
    file: String,
    val: &'a MetricsReport,
}

#[derive(Serialize)]
struct TrainReport<'a> {
    method: Method,
    seed: u64,
    selected_step: usize,
    selected_checkpoint: String,
    gold_reads_in_training: usize,
    checkpoints: Vec<CheckpointSummary<'a>>,
    test: MetricsReport,
}

/// Consensus state and loss terms of one training instance under the selected model.
#[derive(Serialize)]
struct InstanceRow {
    id: usize,
    outcome: ConsensusOutcome,
    loss: LossBreakdown,
}

fn checkpoint_file(step: usize) -> String {
    format!("checkpoints/step_{step:06}.json")
}

pub fn train_cmd(args: &TrainArgs) -> CliResult<()> {
    let dataset = load_dataset(&args.data)?;
    let mut overrides = args.overrides.clone();
    overrides.extend(args.flag_overrides());
    let mut cfg: TrainConfig = config::load(args.config.as_deref(), &overrides).map_err(CliError::usage)?;
    if let Some(m) = args.method {
        cfg.method = method_of(m);
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(r) = &args.formats {
        cfg.train_formats = Some(r.clone());
    }
    let run = train(&dataset, &cfg)?;

    let out = args.out.resolve("train");
    let mut dir = RunDir::create(&out)?;
    dir.write_json(
        "config.json",
        &TrainSnapshot {
            dataset: args.data.display().to_string(),
            config: &cfg,
            effective_hp: cfg.effective_hp(),
        },
    )?;
    for ckpt in &run.checkpoints {
        let file = CheckpointFile {
            params: ckpt.params.clone(),
            seed: cfg.seed,
            step: ckpt.step,
        };
        dir.write_json(&checkpoint_file(ckpt.step), &file)?;
    }
    dir.write_jsonl("diagnostics.jsonl", &run.diagnostics)?;

    let selected = run.selected();
    dir.write_json(
        "checkpoint.json",
        &CheckpointFile {
            params: selected.params.clone(),
            seed: cfg.seed,
            step: selected.step,
        },
    )?;
    let formats: Vec<usize> = cfg
        .train_formats
        .clone()
        .unwrap_or(0..dataset.formats.len())
        .collect();
    let hp = cfg.effective_hp();
    let mut rows = Vec::new();
    for &id in dataset.splits.get(Split::Train) {
        let renderings = dataset.render(id, &formats).map_err(|e| anyhow!(e))?;
        let (loss, outcome) =
            f2c_total(&selected.params, &renderings, &dataset.answers, &hp).map_err(|e| anyhow!(e))?;
        rows.push(InstanceRow { id, outcome, loss });
    }
    dir.write_jsonl("instances.jsonl", &rows)?;

    let test = evaluate(&selected.params, &dataset, Split::Test, &formats)?;
    let report = TrainReport {
        method: cfg.method,
        seed: cfg.seed,
        selected_step: selected.step,
        selected_checkpoint: checkpoint_file(selected.step),
        gold_reads_in_training: run.gold_reads_in_training,
        checkpoints: run
            .checkpoints
            .iter()
            .map(|c| CheckpointSummary {
                step: c.step,
                file: checkpoint_file(c.step),
                val: &c.val,
            })
            .collect(),
        test,
    };
    dir.write_json("report.json", &report)?;
    dir.finish("train", args.config.as_deref(), vec![cfg.seed], overrides)?;
    println!(
        "{}: selected step {} with test F1 {:.4}, written to {}",
        cfg.method,
        selected.step,
        report.test.f1_mean,
        out.display()
    );
    Ok(())
}

pub fn eval_cmd(args: &EvalArgs) -> CliResult<()> {
    let ckpt = CheckpointFile::load(&args.checkpoint)
        .with_context(|| format!("loading checkpoint {}", args.checkpoint.display()))
        .map_err(CliError::usage)?;
    let dataset = load_dataset(&args.data)?;
    let v = dataset.formats.len();
    let range = args.formats.clone().unwrap_or(0..v);
    if range.is_empty() || range.end > v {
        return Err(CliError::usage(anyhow!(
            "format range {range:?} is empty or exceeds the dataset's {v} formats"
        )));
    }
    if ckpt.params.dim() != dataset.config.dim || ckpt.params.vocab() != dataset.vocab {
        return Err(CliError::usage(anyhow!(
            "checkpoint shape [{}, {}] does not match dataset vocabulary {} and dimension {}",
            ckpt.params.vocab(),
            ckpt.params.dim(),
            dataset.vocab,
            dataset.config.dim
        )));
    }
    let split = match args.split {
        SplitArg::Train => Split::Train,
        SplitArg::Val => Split::Val,
        SplitArg::Test => Split::Test,
    };
    let formats: Vec<usize> = range.collect();
    let report = evaluate(&ckpt.params, &dataset, split, &formats)?;
    let out = args.out.resolve("eval");
    let mut dir = RunDir::create(&out)?;
    dir.write_json("report.json", &report)?;
    dir.finish("eval", None, vec![ckpt.seed], Vec::new())?;
    println!("{}", serde_json::to_string(&report).map_err(|e| anyhow!(e))?);
    Ok(())
}

fn default_seeds() -> Vec<u64> {
    (0..5).collect()
}

fn default_ks() -> Vec<usize> {
    vec![2, 4, 6]
}

fn default_methods() -> Vec<Method> {
    Method::ALL.to_vec()
}

/// Study spec file. A task comes from an inline table or from a dataset
/// directory written by `gen`; `ood` takes several.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StudySpec {
    pub seeds: Vec<u64>,
    pub task: Option<TaskConfig>,
    pub dataset: Option<PathBuf>,
    pub tasks: Vec<TaskConfig>,
    pub datasets: Vec<PathBuf>,
    pub train: TrainConfig,
    pub methods: Vec<Method>,
    pub ks: Vec<usize>,
}

impl Default for StudySpec {
    fn default() -> Self {
        Self {
            seeds: default_seeds(),
            task: None,
            dataset: None,
            tasks: Vec::new(),
            datasets: Vec::new(),
            train: TrainConfig::default(),
            methods: default_methods(),
            ks: default_ks(),
        }
    }
}

fn task_from_dataset(base: &Path, dir: &Path) -> CliResult<TaskConfig> {
    let dir = if dir.is_relative() { base.join(dir) } else { dir.to_path_buf() };
    let path = dir.join(FORMATS_FILE);
    let text = fs::read_to_string(&path)
        .map_err(|e| CliError::usage(anyhow!("missing dataset {}: {e}", path.display())))?;
    let sidecar: FormatsSidecar = serde_json::from_str(&text)
        .map_err(|e| CliError::usage(anyhow!("invalid {}: {e}", path.display())))?;
    Ok(sidecar.config)
}

/// Three tasks sharing one format family, each with its own perturbation.
fn related_tasks(template: TaskConfig) -> Vec<TaskConfig> {
    let family = template.family_seed.unwrap_or(template.seed);
    (0..3u64)
        .map(|i| TaskConfig {
            seed: template.seed.wrapping_add(i),
            family_seed: Some(family),
            task_shift: if template.task_shift > 0.0 { template.task_shift } else { DEFAULT_TASK_SHIFT },
            ..template.clone()
        })
        .collect()
}

const DEFAULT_TASK_SHIFT: f64 = 0.2;

#[derive(Serialize)]
struct CompareCsvRow {
    seed: u64,
    method: Method,
    selected_step: usize,
    f1_mean: f64,
    f1_std: f64,
    p_o: Option<f64>,
    delta_f1_mean: f64,
    delta_f1_std: f64,
    delta_p_o: Option<f64>,
}

#[derive(Serialize)]
struct HeldoutCsvRow {
    seed: u64,
    k: usize,
    metric: &'static str,
    value: Option<f64>,
    base_value: Option<f64>,
}

#[derive(Serialize)]
struct OodCsvRow {
    seed: u64,
    source: usize,
    target: usize,
    diagonal: bool,
    delta_f1_mean: f64,
    delta_f1_std: f64,
    delta_p_o: Option<f64>,
}

pub fn study_cmd(args: &StudyArgs) -> CliResult<()> {
    let mut spec: StudySpec = config::load(Some(&args.config), &args.overrides).map_err(CliError::usage)?;
    if !args.seed.is_empty() {
        spec.seeds = args.seed.clone();
    }
    if spec.seeds.is_empty() {
        return Err(CliError::usage(anyhow!("study needs at least one seed")));
    }
    let base = args.config.parent().map(Path::to_path_buf).unwrap_or_default();
    let single_task = |spec: &StudySpec| -> CliResult<TaskConfig> {
        match (&spec.task, &spec.dataset) {
            (Some(_), Some(_)) => Err(CliError::usage(anyhow!("give either `task` or `dataset`, not both"))),
            (Some(t), None) => Ok(t.clone()),
            (None, Some(d)) => task_from_dataset(&base, d),
            (None, None) => Ok(TaskConfig::default()),
        }
    };
    let out = args.out.resolve(args.study.name());
    match args.study {
        StudyKind::Compare => {
            let task = single_task(&spec)?;
            let configs: Vec<TrainConfig> = spec
                .methods
                .iter()
                .map(|&method| TrainConfig {
                    method,
                    ..spec.train.clone()
                })
                .collect();
            let report = run_method_comparison(&task, &configs, &spec.seeds)?;
            let mut dir = RunDir::create(&out)?;
            dir.write_json("compare.json", &report)?;
            dir.write_csv(
                "compare.csv",
                report.rows.iter().map(|r| CompareCsvRow {
                    seed: r.seed,
                    method: r.method,
                    selected_step: r.selected_step,
                    f1_mean: r.test.f1_mean,
                    f1_std: r.test.f1_std,
                    p_o: r.test.p_o,
                    delta_f1_mean: r.delta.f1_mean,
                    delta_f1_std: r.delta.f1_std,
                    delta_p_o: r.delta.p_o,
                }),
            )?;
            dir.finish("study compare", Some(&args.config), spec.seeds.clone(), args.overrides.clone())?;
        }
        StudyKind::Heldout => {
            let task = single_task(&spec)?;
            let report = run_heldout_formats(&task, &spec.ks, &spec.train, &spec.seeds)?;
            let mut rows = Vec::new();
            for &seed in &report.seeds {
                let base_point = report.point(seed, 0).expect("base point per seed");
                for &k in &report.ks {
                    let p = report.point(seed, k).expect("point per K");
                    for (metric, value, base_value) in [
                        ("f1_mean", Some(p.f1_mean), Some(base_point.f1_mean)),
                        ("f1_std", Some(p.f1_std), Some(base_point.f1_std)),
                        ("p_o", p.p_o, base_point.p_o),
                    ] {
                        rows.push(HeldoutCsvRow {
                            seed,
                            k,
                            metric,
                            value,
                            base_value,
                        });
                    }
                }
            }
            let mut dir = RunDir::create(&out)?;
            dir.write_json("heldout.json", &report)?;
            dir.write_csv("heldout.csv", rows)?;
            dir.finish("study heldout", Some(&args.config), spec.seeds.clone(), args.overrides.clone())?;
        }
        StudyKind::Ood => {
            let mut tasks = spec.tasks.clone();
            for d in &spec.datasets {
                tasks.push(task_from_dataset(&base, d)?);
            }
            if tasks.is_empty() {
                tasks = related_tasks(spec.task.clone().unwrap_or_default());
            }
            if tasks.len() < 2 {
                return Err(CliError::usage(anyhow!("ood needs at least two tasks")));
            }
            let report = run_ood(&tasks, &spec.train, &spec.seeds)?;
            let mut dir = RunDir::create(&out)?;
            dir.write_json("ood.json", &report)?;
            dir.write_csv(
                "ood.csv",
                report.cells.iter().map(|c| OodCsvRow {
                    seed: c.seed,
                    source: c.source,
                    target: c.target,
                    diagonal: c.source == c.target,
                    delta_f1_mean: c.delta.f1_mean,
                    delta_f1_std: c.delta.f1_std,
                    delta_p_o: c.delta.p_o,
                }),
            )?;
            dir.finish("study ood", Some(&args.config), spec.seeds.clone(), args.overrides.clone())?;
        }
    }
    println!("{} study written to {}", args.study.name(), out.display());
    Ok(())
}
