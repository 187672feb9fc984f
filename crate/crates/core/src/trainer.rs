//! Gradient descent on the unsupervised objectives, checkpoint selection and
//! the three study harnesses.
//!
//! Each step rebuilds one tape per training instance from the current
//! parameters, recomputes the consensus outcome, and averages the per-instance
//! gradients over the batch. Instances evaluated in parallel are merged in id
//! order so the result does not depend on scheduling.

use std::ops::Range;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::consensus::{CaseTag, ConsensusError, ConsensusOutcome, Hyperparams};
use crate::losses::{f2c_on_tape, swarm_on_tape, FrozenTargets, LossBreakdown, LossError, SwarmTargets};
use crate::metrics::{mean, population_std, summarize, MetricsError, MetricsReport};
use crate::numerics::{log_softmax_slice, NumericsError, Tape};
use crate::scorer::{predict, score_on_tape, AnswerSpec, ScorerError, ScorerParams};
use crate::synthdata::{generate, DataError, Dataset, Split, TaskConfig};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("training diverged at step {step}: {reason}")]
    Diverged { step: usize, reason: String },
    #[error("invalid training config field `{field}`: {reason}")]
    InvalidConfig { field: &'static str, reason: String },
    #[error("incompatible tasks: {0}")]
    Incompatible(String),
    #[error("no checkpoints to select from")]
    NoCheckpoints,
    #[error("split {0:?} is empty")]
    EmptySplit(Split),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Scorer(#[from] ScorerError),
    #[error(transparent)]
    Consensus(#[from] ConsensusError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

impl TrainError {
    /// Whether the failure came from a non-finite value.
    pub fn is_numerical(&self) -> bool {
        fn numerics(e: &NumericsError) -> bool {
            matches!(e, NumericsError::NonFinite { .. } | NumericsError::NonFiniteInput { .. })
        }
        fn scorer(e: &ScorerError) -> bool {
            matches!(e, ScorerError::Numerics(n) if numerics(n))
        }
        match self {
            TrainError::Diverged { .. } => true,
            TrainError::Numerics(n) => numerics(n),
            TrainError::Scorer(s) => scorer(s),
            TrainError::Loss(LossError::Numerics(n)) => numerics(n),
            TrainError::Loss(LossError::Scorer(s)) => scorer(s),
            _ => false,
        }
    }
}

fn invalid(field: &'static str, reason: impl Into<String>) -> TrainError {
    TrainError::InvalidConfig {
        field,
        reason: reason.into(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// The initialized scorer, never updated.
    Base,
    /// Pairwise distillation where each format teaches every other.
    Swarm,
    /// Consensus cross-entropy alone.
    Cce,
    /// Consensus cross-entropy plus CC-set JSD and the NC→CC flip term.
    F2c,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Base, Method::Swarm, Method::Cce, Method::F2c];

    pub fn name(self) -> &'static str {
        match self {
            Method::Base => "base",
            Method::Swarm => "swarm",
            Method::Cce => "cce",
            Method::F2c => "f2c",
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unknown method `{0}` (expected one of: base, swarm, cce, f2c)")]
pub struct UnknownMethod(pub String);

impl FromStr for Method {
    type Err = UnknownMethod;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| UnknownMethod(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub method: Method,
    pub hp: Hyperparams,
    pub lr: f64,
    pub steps: usize,
    /// `None` trains full-batch.
    pub batch_size: Option<usize>,
    pub eval_interval: usize,
    pub seed: u64,
    /// Scale of the class prototypes copied into the label-token rows at init.
    pub init_gain: f64,
    /// Std of the Gaussian jitter added to every parameter at init.
    pub init_noise: f64,
    /// Formats seen during training and model selection; `None` means all.
    pub train_formats: Option<Range<usize>>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            method: Method::F2c,
            hp: Hyperparams::default(),
            lr: 0.05,
            steps: 500,
            batch_size: None,
            eval_interval: 50,
            seed: 0,
            init_gain: 0.5,
            init_noise: 0.3,
            train_formats: None,
        }
    }
}

impl TrainConfig {
    pub fn for_method(method: Method) -> Self {
        Self {
            method,
            ..Self::default()
        }
    }

    /// Hyperparameters actually used: CCE-only disables the JSD and flip terms.
    pub fn effective_hp(&self) -> Hyperparams {
        match self.method {
            Method::Cce => Hyperparams {
                beta_jsd: 0.0,
                f_min: 0.0,
                f_max: 0.0,
                ..self.hp
            },
            _ => self.hp,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        self.hp.validate()?;
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(invalid("lr", "must be positive and finite"));
        }
        if self.eval_interval == 0 {
            return Err(invalid("eval_interval", "must be positive"));
        }
        if self.batch_size == Some(0) {
            return Err(invalid("batch_size", "must be positive"));
        }
        if !(self.init_gain.is_finite() && self.init_noise.is_finite() && self.init_noise >= 0.0) {
            return Err(invalid("init_noise", "init gain and noise must be finite, noise nonnegative"));
        }
        if let Some(r) = &self.train_formats {
            if r.start >= r.end {
                return Err(invalid("train_formats", "empty format range"));
            }
        }
        Ok(())
    }

    fn format_ids(&self, available: usize) -> Result<Vec<usize>, TrainError> {
        let range = self.train_formats.clone().unwrap_or(0..available);
        if range.end > available || range.start >= range.end {
            return Err(invalid(
                "train_formats",
                format!("{range:?} not within 0..{available}"),
            ));
        }
        Ok(range.collect())
    }
}

/// Deterministic initial parameters for a dataset and config.
pub fn init_params(dataset: &Dataset, config: &TrainConfig) -> Result<ScorerParams, TrainError> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    Ok(ScorerParams::from_prototypes(
        &dataset.prototypes,
        &dataset.answers,
        dataset.vocab,
        config.init_gain,
        config.init_noise,
        &mut rng,
    )?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub step: usize,
    pub params: ScorerParams,
    /// Validation metrics on the training formats.
    pub val: MetricsReport,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaseCounts {
    pub no_majority: usize,
    pub unanimous_confident: usize,
    pub split: usize,
    pub degenerate: usize,
}

impl CaseCounts {
    pub fn record(&mut self, case: CaseTag) {
        match case {
            CaseTag::NoMajority => self.no_majority += 1,
            CaseTag::UnanimousConfident => self.unanimous_confident += 1,
            CaseTag::Split => self.split += 1,
            CaseTag::Degenerate => self.degenerate += 1,
        }
    }

    pub fn skipped(&self) -> usize {
        self.no_majority + self.degenerate
    }
}

/// Batch means of the loss terms at one step, before the update.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepDiagnostics {
    pub step: usize,
    pub instances: usize,
    pub loss: f64,
    pub cce: f64,
    pub jsd: f64,
    pub flip: f64,
    pub swarm: f64,
    pub cases: CaseCounts,
    /// Instances that contributed no loss.
    pub skipped: usize,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRun {
    pub config: TrainConfig,
    pub checkpoints: Vec<Checkpoint>,
    pub diagnostics: Vec<StepDiagnostics>,
    /// Gold labels read while computing losses and gradients.
    pub gold_reads_in_training: usize,
    /// Index into `checkpoints` of the selected model.
    pub selected: usize,
}

impl TrainRun {
    pub fn selected(&self) -> &Checkpoint {
        &self.checkpoints[self.selected]
    }
}

/// Loss, gradient and diagnostics of one instance.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceResult {
    pub loss: f64,
    pub breakdown: Option<LossBreakdown>,
    pub outcome: Option<ConsensusOutcome>,
    pub swarm: Option<f64>,
    /// Flat gradient (weight then bias); `None` when the instance is skipped.
    pub grad: Option<Vec<f64>>,
}

/// Evaluates a method's objective for one instance from its renderings.
pub fn instance_objective(
    method: Method,
    params: &ScorerParams,
    renderings: &[Vec<f64>],
    answers: &AnswerSpec,
    hp: &Hyperparams,
) -> Result<InstanceResult, TrainError> {
    let mut result = InstanceResult {
        loss: 0.0,
        breakdown: None,
        outcome: None,
        swarm: None,
        grad: None,
    };
    if method == Method::Base {
        return Ok(result);
    }
    let mut tape = Tape::new();
    let vars = params.to_tape(&mut tape);
    let scores = score_on_tape(&mut tape, vars, renderings, answers)?;
    let root = match method {
        Method::Swarm => {
            let targets = SwarmTargets::capture(&tape, &scores.log_dists);
            let loss = swarm_on_tape(&mut tape, &scores.log_dists, &targets)?;
            if let Some(l) = loss {
                result.swarm = Some(tape.scalar(l)?);
            }
            loss
        }
        Method::Cce | Method::F2c => {
            let targets = FrozenTargets::capture(&tape, &scores, hp)?;
            let loss = f2c_on_tape(&mut tape, &scores, &targets, hp)?;
            result.breakdown = Some(loss.breakdown);
            result.outcome = Some(targets.outcome);
            loss.total
        }
        Method::Base => unreachable!(),
    };
    if let Some(root) = root {
        result.loss = tape.scalar(root)?;
        let grads = tape.backward(root)?;
        let mut flat = grads.get(vars.weight).expect("weight is a leaf").to_vec();
        flat.extend_from_slice(grads.get(vars.bias).expect("bias is a leaf"));
        result.grad = Some(flat);
    }
    Ok(result)
}

/// Per-format predictions `[format][instance]` for the given ids.
pub fn predict_all(
    params: &ScorerParams,
    dataset: &Dataset,
    ids: &[usize],
    formats: &[usize],
) -> Result<Vec<Vec<usize>>, TrainError> {
    let answers = &dataset.answers;
    let mut out = vec![Vec::with_capacity(ids.len()); formats.len()];
    let mut logq = vec![0.0; params.vocab()];
    for &id in ids {
        for (slot, rendered) in out.iter_mut().zip(dataset.render(id, formats)?) {
            let logits = params.logits(&rendered)?;
            log_softmax_slice(&logits, &mut logq);
            let ll: Vec<f64> = (0..answers.labels())
                .map(|c| {
                    let toks = answers.tokens(c);
                    toks.iter().map(|&t| logq[t]).sum::<f64>() / toks.len() as f64
                })
                .collect();
            slot.push(predict(&ll));
        }
    }
    Ok(out)
}

/// Metrics of `params` on one split restricted to `formats`.
pub fn evaluate(
    params: &ScorerParams,
    dataset: &Dataset,
    split: Split,
    formats: &[usize],
) -> Result<MetricsReport, TrainError> {
    let ids = dataset.splits.get(split);
    if ids.is_empty() {
        return Err(TrainError::EmptySplit(split));
    }
    let predictions = predict_all(params, dataset, ids, formats)?;
    let gold = dataset.gold(ids);
    Ok(summarize(formats, &predictions, &gold, dataset.labels())?)
}

/// Highest validation F̄₁; ties go to the earliest step.
pub fn select_model(checkpoints: &[Checkpoint]) -> Result<usize, TrainError> {
    let mut best: Option<usize> = None;
    for (i, c) in checkpoints.iter().enumerate() {
        match best {
            Some(b) if checkpoints[b].val.f1_mean >= c.val.f1_mean => {}
            _ => best = Some(i),
        }
    }
    best.ok_or(TrainError::NoCheckpoints)
}

struct StepTotals {
    diag: StepDiagnostics,
    grad: Vec<f64>,
}

fn run_step(
    method: Method,
    params: &ScorerParams,
    batch: &[&Vec<Vec<f64>>],
    answers: &AnswerSpec,
    hp: &Hyperparams,
    step: usize,
) -> Result<StepTotals, TrainError> {
    let results: Vec<InstanceResult> = batch
        .par_iter()
        .map(|r| instance_objective(method, params, r, answers, hp))
        .collect::<Result<_, _>>()?;
    let n = batch.len() as f64;
    let mut grad = vec![0.0; params.num_params()];
    let mut diag = StepDiagnostics {
        step,
        instances: batch.len(),
        loss: 0.0,
        cce: 0.0,
        jsd: 0.0,
        flip: 0.0,
        swarm: 0.0,
        cases: CaseCounts::default(),
        skipped: 0,
        grad_norm: 0.0,
    };
    for r in &results {
        diag.loss += r.loss / n;
        if let Some(b) = &r.breakdown {
            diag.cce += b.cce / n;
            diag.jsd += b.jsd / n;
            diag.flip += b.flip / n;
            diag.cases.record(b.case);
        }
        if let Some(s) = r.swarm {
            diag.swarm += s / n;
        }
        match &r.grad {
            Some(g) => {
                for (acc, x) in grad.iter_mut().zip(g) {
                    *acc += x / n;
                }
            }
            None => diag.skipped += 1,
        }
    }
    diag.grad_norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    if !diag.loss.is_finite() || !diag.grad_norm.is_finite() {
        return Err(TrainError::Diverged {
            step,
            reason: format!("loss {} grad norm {}", diag.loss, diag.grad_norm),
        });
    }
    Ok(StepTotals { diag, grad })
}

/// Runs gradient descent and records checkpoints every `eval_interval` steps
/// and at the end. `base` records only the step-0 checkpoint.
pub fn train(dataset: &Dataset, config: &TrainConfig) -> Result<TrainRun, TrainError> {
    config.validate()?;
    let formats = config.format_ids(dataset.formats.len())?;
    let hp = config.effective_hp();
    let train_ids = dataset.splits.get(Split::Train);
    if train_ids.is_empty() && config.method != Method::Base {
        return Err(TrainError::EmptySplit(Split::Train));
    }
    let renderings = train_ids
        .iter()
        .map(|&id| dataset.render(id, &formats))
        .collect::<Result<Vec<_>, _>>()?;

    let mut params = init_params(dataset, config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x6261_7463_68);
    let mut order: Vec<usize> = (0..renderings.len()).collect();
    let batch_size = config.batch_size.unwrap_or(renderings.len()).min(renderings.len()).max(1);
    let mut cursor = order.len();

    let mut checkpoints = Vec::new();
    let mut diagnostics = Vec::new();
    let mut gold_reads = 0;
    let steps = if config.method == Method::Base { 0 } else { config.steps };
    for step in 0..=steps {
        if step % config.eval_interval == 0 || step == steps {
            checkpoints.push(Checkpoint {
                step,
                val: evaluate(&params, dataset, Split::Val, &formats)?,
                params: params.clone(),
            });
        }
        if step == steps {
            break;
        }
        if cursor + batch_size > order.len() {
            if batch_size < order.len() {
                order.shuffle(&mut rng);
            }
            cursor = 0;
        }
        let batch: Vec<&Vec<Vec<f64>>> = order[cursor..cursor + batch_size]
            .iter()
            .map(|&i| &renderings[i])
            .collect();
        cursor += batch_size;

        let reads_before = dataset.gold_reads();
        let totals = run_step(config.method, &params, &batch, &dataset.answers, &hp, step).map_err(|e| {
            if e.is_numerical() && !matches!(e, TrainError::Diverged { .. }) {
                TrainError::Diverged {
                    step,
                    reason: e.to_string(),
                }
            } else {
                e
            }
        })?;
        params.step(&totals.grad, config.lr).map_err(|e| TrainError::Diverged {
            step,
            reason: e.to_string(),
        })?;
        gold_reads += dataset.gold_reads() - reads_before;
        diagnostics.push(totals.diag);
    }
    let selected = select_model(&checkpoints)?;
    Ok(TrainRun {
        config: config.clone(),
        checkpoints,
        diagnostics,
        gold_reads_in_training: gold_reads,
        selected,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricDelta {
    pub f1_mean: f64,
    pub f1_std: f64,
    pub p_o: Option<f64>,
}

impl MetricDelta {
    pub fn between(after: &MetricsReport, before: &MetricsReport) -> Self {
        Self {
            f1_mean: after.f1_mean - before.f1_mean,
            f1_std: after.f1_std - before.f1_std,
            p_o: after.p_o.zip(before.p_o).map(|(a, b)| a - b),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    pub fn of(xs: &[f64]) -> Option<Self> {
        (!xs.is_empty()).then(|| Self {
            mean: mean(xs),
            std: population_std(xs),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub seed: u64,
    pub method: Method,
    pub selected_step: usize,
    pub test: MetricsReport,
    pub delta: MetricDelta,
    pub gold_reads_in_training: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: Method,
    pub f1_mean: Option<MeanStd>,
    pub f1_std: Option<MeanStd>,
    pub p_o: Option<MeanStd>,
    pub delta_f1_mean: Option<MeanStd>,
    pub delta_f1_std: Option<MeanStd>,
    pub delta_p_o: Option<MeanStd>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub seeds: Vec<u64>,
    pub methods: Vec<Method>,
    pub rows: Vec<ComparisonRow>,
    pub summary: Vec<MethodSummary>,
}

impl ComparisonReport {
    pub fn row(&self, seed: u64, method: Method) -> Option<&ComparisonRow> {
        self.rows.iter().find(|r| r.seed == seed && r.method == method)
    }
}

fn with_seed(task: &TaskConfig, seed: u64) -> TaskConfig {
    TaskConfig {
        seed: task.seed.wrapping_add(seed.wrapping_mul(1_000_003)),
        ..task.clone()
    }
}

fn summarize_rows(method: Method, rows: &[&ComparisonRow]) -> MethodSummary {
    let collect = |f: &dyn Fn(&ComparisonRow) -> Option<f64>| -> Option<MeanStd> {
        let xs: Vec<f64> = rows.iter().filter_map(|r| f(r)).collect();
        MeanStd::of(&xs)
    };
    MethodSummary {
        method,
        f1_mean: collect(&|r| Some(r.test.f1_mean)),
        f1_std: collect(&|r| Some(r.test.f1_std)),
        p_o: collect(&|r| r.test.p_o),
        delta_f1_mean: collect(&|r| Some(r.delta.f1_mean)),
        delta_f1_std: collect(&|r| Some(r.delta.f1_std)),
        delta_p_o: collect(&|r| r.delta.p_o),
    }
}

/// Trains every config on the same per-seed dataset and reports test metrics
/// of the selected checkpoints with deltas against the base model.
///
/// A base row is always included. Each config's seed is replaced by the sweep seed.
pub fn run_method_comparison(
    task: &TaskConfig,
    configs: &[TrainConfig],
    seeds: &[u64],
) -> Result<ComparisonReport, TrainError> {
    let template = configs.first().cloned().unwrap_or_default();
    let mut all: Vec<TrainConfig> = Vec::new();
    if !configs.iter().any(|c| c.method == Method::Base) {
        all.push(TrainConfig {
            method: Method::Base,
            ..template
        });
    }
    all.extend(configs.iter().cloned());

    let mut rows = Vec::new();
    for &seed in seeds {
        let (dataset, _) = generate(&with_seed(task, seed))?;
        let mut base_test = None;
        let mut seed_rows = Vec::new();
        for config in &all {
            let config = TrainConfig {
                seed,
                ..config.clone()
            };
            let formats = config.format_ids(dataset.formats.len())?;
            let run = train(&dataset, &config)?;
            let test = evaluate(&run.selected().params, &dataset, Split::Test, &formats)?;
            if config.method == Method::Base {
                base_test = Some(test.clone());
            }
            seed_rows.push((config.method, run.selected().step, test, run.gold_reads_in_training));
        }
        let base_test = base_test.expect("base row always present");
        for (method, selected_step, test, gold_reads_in_training) in seed_rows {
            rows.push(ComparisonRow {
                seed,
                method,
                selected_step,
                delta: MetricDelta::between(&test, &base_test),
                test,
                gold_reads_in_training,
            });
        }
    }
    let methods: Vec<Method> = all.iter().map(|c| c.method).collect();
    let summary = methods
        .iter()
        .map(|&m| {
            let rs: Vec<&ComparisonRow> = rows.iter().filter(|r| r.method == m).collect();
            summarize_rows(m, &rs)
        })
        .collect();
    Ok(ComparisonReport {
        seeds: seeds.to_vec(),
        methods,
        rows,
        summary,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OodCell {
    pub seed: u64,
    pub source: usize,
    pub target: usize,
    pub delta: MetricDelta,
    pub test: MetricsReport,
    /// Gold reads while training the source model.
    pub gold_reads_in_training: usize,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SignTally {
    pub positive: usize,
    pub negative: usize,
}

impl SignTally {
    fn record(&mut self, x: f64) {
        if x > 0.0 {
            self.positive += 1;
        } else if x < 0.0 {
            self.negative += 1;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OodReport {
    pub tasks: usize,
    pub seeds: Vec<u64>,
    pub cells: Vec<OodCell>,
    /// Seed-averaged `[source][target]` deltas.
    pub mean_delta_f1_mean: Vec<Vec<f64>>,
    pub mean_delta_p_o: Vec<Vec<f64>>,
    pub mean_delta_f1_std: Vec<Vec<f64>>,
    /// Sign counts over off-diagonal cells of every seed.
    pub f1_mean_tally: SignTally,
    pub p_o_tally: SignTally,
    pub f1_std_tally: SignTally,
}

fn check_compatible(tasks: &[TaskConfig]) -> Result<(), TrainError> {
    let first = tasks
        .first()
        .ok_or_else(|| TrainError::Incompatible("no tasks given".into()))?;
    for (i, t) in tasks.iter().enumerate().skip(1) {
        let same = t.dim == first.dim
            && t.labels == first.labels
            && t.formats == first.formats
            && t.vocab() == first.vocab()
            && t.answer_spec()? == first.answer_spec()?;
        if !same {
            return Err(TrainError::Incompatible(format!(
                "task {i} differs from task 0 in dimension, labels, formats or answer tokens"
            )));
        }
    }
    Ok(())
}

/// Trains on each source task and evaluates on every target task's test split.
pub fn run_ood(tasks: &[TaskConfig], config: &TrainConfig, seeds: &[u64]) -> Result<OodReport, TrainError> {
    check_compatible(tasks)?;
    let n = tasks.len();
    let mut cells = Vec::new();
    let mut f1_mean_tally = SignTally::default();
    let mut p_o_tally = SignTally::default();
    let mut f1_std_tally = SignTally::default();
    for &seed in seeds {
        let config = TrainConfig {
            seed,
            ..config.clone()
        };
        let datasets = tasks
            .iter()
            .map(|t| generate(&with_seed(t, seed)).map(|(d, _)| d))
            .collect::<Result<Vec<_>, _>>()?;
        let formats = config.format_ids(datasets[0].formats.len())?;
        let base = datasets
            .iter()
            .map(|d| evaluate(&init_params(d, &config)?, d, Split::Test, &formats))
            .collect::<Result<Vec<_>, _>>()?;
        for (source, src) in datasets.iter().enumerate() {
            let run = train(src, &config)?;
            for (target, tgt) in datasets.iter().enumerate() {
                let test = evaluate(&run.selected().params, tgt, Split::Test, &formats)?;
                let delta = MetricDelta::between(&test, &base[target]);
                if source != target {
                    f1_mean_tally.record(delta.f1_mean);
                    f1_std_tally.record(delta.f1_std);
                    if let Some(p) = delta.p_o {
                        p_o_tally.record(p);
                    }
                }
                cells.push(OodCell {
                    seed,
                    source,
                    target,
                    delta,
                    test,
                    gold_reads_in_training: run.gold_reads_in_training,
                });
            }
        }
    }
    let matrix = |f: &dyn Fn(&OodCell) -> f64| -> Vec<Vec<f64>> {
        (0..n)
            .map(|s| {
                (0..n)
                    .map(|t| {
                        let xs: Vec<f64> = cells
                            .iter()
                            .filter(|c| c.source == s && c.target == t)
                            .map(f)
                            .collect();
                        if xs.is_empty() {
                            0.0
                        } else {
                            mean(&xs)
                        }
                    })
                    .collect()
            })
            .collect()
    };
    Ok(OodReport {
        tasks: n,
        seeds: seeds.to_vec(),
        mean_delta_f1_mean: matrix(&|c| c.delta.f1_mean),
        mean_delta_p_o: matrix(&|c| c.delta.p_o.unwrap_or(0.0)),
        mean_delta_f1_std: matrix(&|c| c.delta.f1_std),
        cells,
        f1_mean_tally,
        p_o_tally,
        f1_std_tally,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeldoutPoint {
    pub seed: u64,
    /// Number of training formats; 0 is the untrained base model on all formats.
    pub k: usize,
    pub eval_formats: Range<usize>,
    pub f1_mean: f64,
    pub f1_std: f64,
    pub p_o: Option<f64>,
    pub report: MetricsReport,
    pub gold_reads_in_training: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeldoutReport {
    pub seeds: Vec<u64>,
    pub ks: Vec<usize>,
    pub points: Vec<HeldoutPoint>,
}

impl HeldoutReport {
    pub fn point(&self, seed: u64, k: usize) -> Option<&HeldoutPoint> {
        self.points.iter().find(|p| p.seed == seed && p.k == k)
    }
}

/// For each `K`, trains on formats `[0, K)` and evaluates on `[K, V)`.
pub fn run_heldout_formats(
    task: &TaskConfig,
    ks: &[usize],
    config: &TrainConfig,
    seeds: &[u64],
) -> Result<HeldoutReport, TrainError> {
    let v = task.formats;
    if let Some(&k) = ks.iter().find(|&&k| k == 0 || k >= v) {
        return Err(invalid("ks", format!("K={k} must satisfy 0 < K < {v}")));
    }
    let mut points = Vec::new();
    for &seed in seeds {
        let (dataset, _) = generate(&with_seed(task, seed))?;
        let base_config = TrainConfig {
            seed,
            method: Method::Base,
            ..config.clone()
        };
        let base = evaluate(
            &init_params(&dataset, &base_config)?,
            &dataset,
            Split::Test,
            &(0..v).collect::<Vec<_>>(),
        )?;
        points.push(HeldoutPoint {
            seed,
            k: 0,
            eval_formats: 0..v,
            f1_mean: base.f1_mean,
            f1_std: base.f1_std,
            p_o: base.p_o,
            report: base,
            gold_reads_in_training: 0,
        });
        for &k in ks {
            let cfg = TrainConfig {
                seed,
                train_formats: Some(0..k),
                ..config.clone()
            };
            let run = train(&dataset, &cfg)?;
            let held: Vec<usize> = (k..v).collect();
            let report = evaluate(&run.selected().params, &dataset, Split::Test, &held)?;
            points.push(HeldoutPoint {
                seed,
                k,
                eval_formats: k..v,
                f1_mean: report.f1_mean,
                f1_std: report.f1_std,
                p_o: report.p_o,
                report,
                gold_reads_in_training: run.gold_reads_in_training,
            });
        }
    }
    Ok(HeldoutReport {
        seeds: seeds.to_vec(),
        ks: ks.to_vec(),
        points,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::SplitSizes;

    fn tiny_task() -> TaskConfig {
        TaskConfig {
            n: 90,
            splits: SplitSizes {
                train: 45,
                val: 24,
                test: 21,
            },
            ..TaskConfig::default()
        }
    }

    fn report(f1: f64) -> MetricsReport {
        MetricsReport {
            formats: vec![0],
            per_format_f1: vec![f1],
            f1_mean: f1,
            f1_std: 0.0,
            p_o: None,
            per_item_p: vec![],
            majority_accuracy: None,
            coverage: 0.0,
            instances: 1,
            covered: 0,
        }
    }

    fn ckpt(step: usize, f1: f64) -> Checkpoint {
        Checkpoint {
            step,
            params: ScorerParams::zeros(3, 2),
            val: report(f1),
        }
    }

    #[test]
    fn selection_rules() {
        assert!(matches!(select_model(&[]), Err(TrainError::NoCheckpoints)));
        assert_eq!(select_model(&[ckpt(0, 0.4)]).unwrap(), 0);
        assert_eq!(
            select_model(&[ckpt(0, 0.5), ckpt(10, 0.7), ckpt(20, 0.6)]).unwrap(),
            1
        );
        assert_eq!(select_model(&[ckpt(0, 0.7), ckpt(10, 0.7)]).unwrap(), 0);
    }

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
        }
        let err = "sft".parse::<Method>().unwrap_err();
        assert!(err.to_string().contains("base, swarm, cce, f2c"));
    }

    #[test]
    fn cce_disables_alignment_terms() {
        let hp = TrainConfig::for_method(Method::Cce).effective_hp();
        assert_eq!((hp.beta_jsd, hp.f_min, hp.f_max), (0.0, 0.0, 0.0));
        assert_eq!(TrainConfig::default().effective_hp(), Hyperparams::default());
    }

    #[test]
    fn zero_steps_keeps_init() {
        let (d, _) = generate(&tiny_task()).unwrap();
        let config = TrainConfig {
            steps: 0,
            ..TrainConfig::default()
        };
        let run = train(&d, &config).unwrap();
        assert_eq!(run.checkpoints.len(), 1);
        assert_eq!(run.selected().params, init_params(&d, &config).unwrap());
    }

    #[test]
    fn base_records_only_step_zero() {
        let (d, _) = generate(&tiny_task()).unwrap();
        let run = train(&d, &TrainConfig::for_method(Method::Base)).unwrap();
        assert_eq!(run.checkpoints.len(), 1);
        assert_eq!(run.checkpoints[0].step, 0);
        assert!(run.diagnostics.is_empty());
    }

    #[test]
    fn skip_accounting_and_firewall() {
        let (d, _) = generate(&tiny_task()).unwrap();
        let config = TrainConfig {
            steps: 5,
            eval_interval: 2,
            ..TrainConfig::default()
        };
        let run = train(&d, &config).unwrap();
        assert_eq!(run.gold_reads_in_training, 0);
        assert_eq!(run.checkpoints.iter().map(|c| c.step).collect::<Vec<_>>(), vec![0, 2, 4, 5]);
        for diag in &run.diagnostics {
            assert_eq!(diag.skipped, diag.cases.skipped());
            let total = diag.cases.no_majority + diag.cases.unanimous_confident + diag.cases.split + diag.cases.degenerate;
            assert_eq!(total, diag.instances);
        }
    }

    #[test]
    fn divergence_reports_step() {
        let (d, _) = generate(&tiny_task()).unwrap();
        let config = TrainConfig {
            lr: f64::MAX,
            steps: 10,
            ..TrainConfig::default()
        };
        match train(&d, &config) {
            Err(TrainError::Diverged { step, .. }) => assert!(step < 10),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn heldout_rejects_bad_k() {
        let err = run_heldout_formats(&tiny_task(), &[8], &TrainConfig::default(), &[0]).unwrap_err();
        assert!(err.to_string().contains("K=8"));
    }

    #[test]
    fn ood_rejects_mismatched_tasks() {
        let a = tiny_task();
        let b = TaskConfig { dim: 6, ..tiny_task() };
        assert!(matches!(
            run_ood(&[a, b], &TrainConfig::default(), &[0]),
            Err(TrainError::Incompatible(_))
        ));
    }
}
