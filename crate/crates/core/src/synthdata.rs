//! Synthetic multi-format classification tasks.
//!
//! Features are drawn from class-conditional unit-covariance Gaussians whose
//! means sit on scaled coordinate axes. Each format is a near-identity affine
//! map; a seeded subset of "hard" formats receives a much stronger distortion
//! so that some renderings are systematically less reliable than others.
//! Gold labels sit behind an audited accessor so training code can prove it
//! never looked at them.

use std::collections::BTreeSet;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::scorer::{AnswerSpec, FormatSpec, ScorerError};

pub const DATASET_FILE: &str = "dataset.jsonl";
pub const FORMATS_FILE: &str = "formats.json";

/// Two renderings closer than this in every coordinate count as the same prompt.
pub const DEDUP_TOL: f64 = 1e-12;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("invalid task config field `{field}`: {reason}")]
    InvalidConfig { field: &'static str, reason: String },
    #[error("split sizes {requested} exceed {available} instances")]
    InfeasibleSplit { requested: usize, available: usize },
    #[error("instance {id}: {reason}")]
    BadInstance { id: usize, reason: String },
    #[error(transparent)]
    Scorer(#[from] ScorerError),
    #[error("dataset io: {0}")]
    Io(#[from] std::io::Error),
    #[error("dataset format: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl SplitSizes {
    pub fn total(&self) -> usize {
        self.train + self.val + self.test
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskConfig {
    pub seed: u64,
    /// Seed for the shared format family; defaults to `seed`.
    pub family_seed: Option<u64>,
    /// Per-task perturbation applied on top of the family's formats.
    pub task_shift: f64,
    pub n: usize,
    pub dim: usize,
    pub labels: usize,
    pub formats: usize,
    /// Distance between any two class means.
    pub separation: f64,
    /// Strength of the matrix and offset distortion for ordinary formats.
    pub format_noise: f64,
    pub hard_formats: usize,
    /// Distortion strength for hard formats.
    pub hard_noise: f64,
    /// Extra vocabulary tokens that no label answers with.
    pub distractors: usize,
    /// Token sequence per label; empty means label `c` answers with token `c`.
    pub answers: Vec<Vec<usize>>,
    pub splits: SplitSizes,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            family_seed: None,
            task_shift: 0.0,
            n: 1200,
            dim: 8,
            labels: 3,
            formats: 8,
            separation: 4.0,
            format_noise: 0.15,
            hard_formats: 3,
            hard_noise: 0.9,
            distractors: 2,
            answers: Vec::new(),
            splits: SplitSizes {
                train: 800,
                val: 200,
                test: 200,
            },
        }
    }
}

fn invalid(field: &'static str, reason: impl Into<String>) -> DataError {
    DataError::InvalidConfig {
        field,
        reason: reason.into(),
    }
}

impl TaskConfig {
    pub fn vocab(&self) -> usize {
        self.labels + self.distractors
    }

    pub fn answer_spec(&self) -> Result<AnswerSpec, DataError> {
        if self.answers.is_empty() {
            return Ok(AnswerSpec::single_token(self.labels));
        }
        if self.answers.len() != self.labels {
            return Err(invalid(
                "answers",
                format!("{} sequences for {} labels", self.answers.len(), self.labels),
            ));
        }
        AnswerSpec::new(self.answers.clone(), self.vocab()).map_err(|e| invalid("answers", e.to_string()))
    }

    pub fn validate(&self) -> Result<(), DataError> {
        if self.labels < 2 {
            return Err(invalid("labels", "need at least 2"));
        }
        if self.formats < 2 {
            return Err(invalid("formats", "need at least 2"));
        }
        if self.n < self.formats {
            return Err(invalid("n", format!("{} is below the format count {}", self.n, self.formats)));
        }
        if self.dim < self.labels {
            return Err(invalid("dim", "must be at least the number of labels"));
        }
        if self.distractors < 2 {
            return Err(invalid("distractors", "need at least 2"));
        }
        if self.hard_formats > self.formats {
            return Err(invalid("hard_formats", "more hard formats than formats"));
        }
        for (field, value) in [
            ("separation", self.separation),
            ("format_noise", self.format_noise),
            ("hard_noise", self.hard_noise),
            ("task_shift", self.task_shift),
        ] {
            if !value.is_finite() || value < 0.0 {
                return Err(invalid(field, format!("{value} must be finite and nonnegative")));
            }
        }
        if self.splits.total() > self.n {
            return Err(invalid(
                "splits",
                format!("sizes sum to {} but n is {}", self.splits.total(), self.n),
            ));
        }
        self.answer_spec()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Splits {
    pub fn get(&self, split: Split) -> &[usize] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    fn get_mut(&mut self, split: Split) -> &mut Vec<usize> {
        match split {
            Split::Train => &mut self.train,
            Split::Val => &mut self.val,
            Split::Test => &mut self.test,
        }
    }

    pub fn split_of(&self, id: usize) -> Option<Split> {
        [Split::Train, Split::Val, Split::Test]
            .into_iter()
            .find(|&s| self.get(s).binary_search(&id).is_ok())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Instance {
    pub id: usize,
    pub features: Vec<f64>,
}

/// Gold labels with a read counter.
#[derive(Debug, Default)]
struct GoldLabels {
    labels: Vec<usize>,
    reads: AtomicUsize,
}

impl Clone for GoldLabels {
    fn clone(&self) -> Self {
        Self {
            labels: self.labels.clone(),
            reads: AtomicUsize::new(self.reads.load(Ordering::SeqCst)),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub config: TaskConfig,
    /// Indexed by instance id.
    pub instances: Vec<Instance>,
    gold: GoldLabels,
    pub formats: Vec<FormatSpec>,
    pub splits: Splits,
    /// Canonical class means, the starting knowledge of the base scorer.
    pub prototypes: Vec<Vec<f64>>,
    pub answers: AnswerSpec,
    pub vocab: usize,
}

impl Dataset {
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        config: TaskConfig,
        instances: Vec<Instance>,
        gold: Vec<usize>,
        formats: Vec<FormatSpec>,
        splits: Splits,
        prototypes: Vec<Vec<f64>>,
        answers: AnswerSpec,
        vocab: usize,
    ) -> Result<Self, DataError> {
        if gold.len() != instances.len() {
            return Err(invalid("gold", "one label per instance required"));
        }
        for (i, inst) in instances.iter().enumerate() {
            if inst.id != i {
                return Err(DataError::BadInstance {
                    id: inst.id,
                    reason: format!("found at position {i}; ids must be contiguous"),
                });
            }
            if inst.features.len() != config.dim {
                return Err(DataError::BadInstance {
                    id: i,
                    reason: format!("{} features, expected {}", inst.features.len(), config.dim),
                });
            }
            if gold[i] >= answers.labels() {
                return Err(DataError::BadInstance {
                    id: i,
                    reason: format!("gold label {} out of range", gold[i]),
                });
            }
        }
        if formats.is_empty() {
            return Err(invalid("formats", "no formats"));
        }
        for (v, f) in formats.iter().enumerate() {
            if f.id != v || f.dim != config.dim {
                return Err(invalid("formats", format!("format {v} has id {} and dim {}", f.id, f.dim)));
            }
        }
        let mut seen = BTreeSet::new();
        for split in [Split::Train, Split::Val, Split::Test] {
            let ids = splits.get(split);
            if ids.windows(2).any(|w| w[0] >= w[1]) {
                return Err(invalid("splits", format!("{split:?} ids not strictly ascending")));
            }
            for &id in ids {
                if id >= instances.len() || !seen.insert(id) {
                    return Err(invalid("splits", format!("id {id} unknown or in two splits")));
                }
            }
        }
        Ok(Self {
            config,
            instances,
            gold: GoldLabels {
                labels: gold,
                reads: AtomicUsize::new(0),
            },
            formats,
            splits,
            prototypes,
            answers,
            vocab,
        })
    }

    pub fn labels(&self) -> usize {
        self.answers.labels()
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    /// Gold labels for `ids`; every call is counted.
    pub fn gold(&self, ids: &[usize]) -> Vec<usize> {
        self.gold.reads.fetch_add(ids.len(), Ordering::SeqCst);
        ids.iter().map(|&i| self.gold.labels[i]).collect()
    }

    /// Total number of gold labels handed out so far.
    pub fn gold_reads(&self) -> usize {
        self.gold.reads.load(Ordering::SeqCst)
    }

    /// Renderings of instance `id` under the given formats.
    pub fn render(&self, id: usize, formats: &[usize]) -> Result<Vec<Vec<f64>>, DataError> {
        let x = &self.instances[id].features;
        formats
            .iter()
            .map(|&v| Ok(self.formats[v].render(x)?))
            .collect()
    }

    pub fn write_to_dir(&self, dir: &Path) -> Result<(), DataError> {
        fs::create_dir_all(dir)?;
        let mut out = BufWriter::new(File::create(dir.join(DATASET_FILE))?);
        for inst in &self.instances {
            let record = DatasetRecord {
                id: inst.id,
                features: inst.features.clone(),
                gold: self.gold.labels[inst.id],
                split: self.splits.split_of(inst.id),
            };
            serde_json::to_writer(&mut out, &record)?;
            out.write_all(b"\n")?;
        }
        out.flush()?;
        let sidecar = FormatsSidecar {
            config: self.config.clone(),
            vocab: self.vocab,
            answers: (0..self.labels()).map(|c| self.answers.tokens(c).to_vec()).collect(),
            prototypes: self.prototypes.clone(),
            formats: self.formats.clone(),
        };
        fs::write(dir.join(FORMATS_FILE), serde_json::to_string_pretty(&sidecar)? + "\n")?;
        Ok(())
    }

    pub fn load_from_dir(dir: &Path) -> Result<Self, DataError> {
        let sidecar: FormatsSidecar = serde_json::from_str(&fs::read_to_string(dir.join(FORMATS_FILE))?)?;
        let answers = AnswerSpec::new(sidecar.answers, sidecar.vocab)?;
        let reader = BufReader::new(File::open(dir.join(DATASET_FILE))?);
        let mut instances = Vec::new();
        let mut gold = Vec::new();
        let mut splits = Splits::default();
        for line in reader.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let r: DatasetRecord = serde_json::from_str(&line)?;
            if let Some(s) = r.split {
                splits.get_mut(s).push(r.id);
            }
            instances.push(Instance {
                id: r.id,
                features: r.features,
            });
            gold.push(r.gold);
        }
        Self::from_parts(
            sidecar.config,
            instances,
            gold,
            sidecar.formats,
            splits,
            sidecar.prototypes,
            answers,
            sidecar.vocab,
        )
    }
}

/// One line of the dataset JSONL file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetRecord {
    pub id: usize,
    pub features: Vec<f64>,
    pub gold: usize,
    /// `null` for instances dropped by deduplication or left out of every split.
    pub split: Option<Split>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FormatsSidecar {
    pub config: TaskConfig,
    pub vocab: usize,
    pub answers: Vec<Vec<usize>>,
    pub prototypes: Vec<Vec<f64>>,
    pub formats: Vec<FormatSpec>,
}

fn gaussian<R: Rng>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}

/// Class means `separation/√2 · e_c`, pairwise `separation` apart.
pub fn prototypes(config: &TaskConfig) -> Vec<Vec<f64>> {
    (0..config.labels)
        .map(|c| {
            let mut p = vec![0.0; config.dim];
            p[c] = config.separation / 2f64.sqrt();
            p
        })
        .collect()
}

fn perturb<R: Rng>(matrix: &mut [f64], offset: &mut [f64], scale: f64, rng: &mut R) {
    let dim = offset.len();
    let m_scale = scale / (dim as f64).sqrt();
    for m in matrix.iter_mut() {
        *m += m_scale * gaussian(rng);
    }
    for b in offset.iter_mut() {
        *b += scale * gaussian(rng);
    }
}

/// The task's formats: the family draw plus the task's own shift.
pub fn generate_formats(config: &TaskConfig) -> Vec<FormatSpec> {
    let family = config.family_seed.unwrap_or(config.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(family ^ 0x666f_726d_6174);
    let mut order: Vec<usize> = (0..config.formats).collect();
    order.shuffle(&mut rng);
    let hard: BTreeSet<usize> = order[..config.hard_formats].iter().copied().collect();
    let mut formats: Vec<FormatSpec> = (0..config.formats)
        .map(|v| {
            let mut f = FormatSpec::identity(v, config.dim);
            let scale = if hard.contains(&v) {
                config.hard_noise
            } else {
                config.format_noise
            };
            perturb(&mut f.matrix, &mut f.offset, scale, &mut rng);
            f.noise_scale = scale;
            f.hard = hard.contains(&v);
            f
        })
        .collect();
    if config.task_shift > 0.0 {
        let mut task_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x7461_736b);
        for f in &mut formats {
            perturb(&mut f.matrix, &mut f.offset, config.task_shift, &mut task_rng);
        }
    }
    formats
}

/// Draws a full dataset, splits it and removes cross-split duplicates.
pub fn generate(config: &TaskConfig) -> Result<(Dataset, DedupReport), DataError> {
    config.validate()?;
    let answers = config.answer_spec()?;
    let formats = generate_formats(config);
    let protos = prototypes(config);

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut gold: Vec<usize> = (0..config.n).map(|i| i % config.labels).collect();
    gold.shuffle(&mut rng);
    let instances: Vec<Instance> = gold
        .iter()
        .enumerate()
        .map(|(id, &y)| Instance {
            id,
            features: protos[y].iter().map(|m| m + gaussian(&mut rng)).collect(),
        })
        .collect();
    let splits = stratified_split(&gold, config.splits, config.seed.wrapping_add(1))?;
    let mut dataset = Dataset::from_parts(
        config.clone(),
        instances,
        gold,
        formats,
        splits,
        protos,
        answers,
        config.vocab(),
    )?;
    let report = dedup_rendered(&mut dataset)?;
    Ok((dataset, report))
}

/// Rounds `n_c · size_j / N` to integers so every row and column total is met
/// and every cell lies within one of its exact value.
fn round_table(class_counts: &[usize], sizes: &[usize]) -> Vec<Vec<usize>> {
    let n: usize = class_counts.iter().sum();
    let mut table: Vec<Vec<usize>> = class_counts
        .iter()
        .map(|&nc| sizes.iter().map(|&s| nc * s / n).collect())
        .collect();
    let fractional: Vec<Vec<bool>> = class_counts
        .iter()
        .map(|&nc| sizes.iter().map(|&s| nc * s % n != 0).collect())
        .collect();
    let mut row_need: Vec<usize> = class_counts
        .iter()
        .zip(&table)
        .map(|(&nc, row)| nc - row.iter().sum::<usize>())
        .collect();
    let mut col_need: Vec<usize> = (0..sizes.len())
        .map(|j| sizes[j] - table.iter().map(|r| r[j]).sum::<usize>())
        .collect();

    // Bipartite matching of leftover units: each fractional cell may take one
    // extra unit. The exact fractional table is a feasible flow, so an
    // integral one exists; augment along alternating paths until done.
    let rows = class_counts.len();
    let cols = sizes.len();
    let mut bumped = vec![vec![false; cols]; rows];
    loop {
        let Some(start) = (0..rows).find(|&r| row_need[r] > 0) else {
            break;
        };
        // BFS over (row -> unbumped fractional col -> bumped row ...).
        let mut prev_col: Vec<Option<usize>> = vec![None; cols];
        let mut prev_row: Vec<Option<usize>> = vec![None; rows];
        let mut visited_row = vec![false; rows];
        visited_row[start] = true;
        let mut queue = std::collections::VecDeque::from([start]);
        let mut end = None;
        while let Some(r) = queue.pop_front() {
            for c in 0..cols {
                if !fractional[r][c] || bumped[r][c] || prev_col[c].is_some() {
                    continue;
                }
                prev_col[c] = Some(r);
                if col_need[c] > 0 {
                    end = Some(c);
                    break;
                }
                for r2 in 0..rows {
                    if bumped[r2][c] && !visited_row[r2] {
                        visited_row[r2] = true;
                        prev_row[r2] = Some(c);
                        queue.push_back(r2);
                    }
                }
            }
            if end.is_some() {
                break;
            }
        }
        let mut c = end.expect("exact table guarantees an augmenting path");
        col_need[c] -= 1;
        loop {
            let r = prev_col[c].expect("path is connected");
            bumped[r][c] = true;
            match prev_row[r] {
                Some(c2) => {
                    bumped[r][c2] = false;
                    c = c2;
                }
                None => {
                    row_need[r] -= 1;
                    break;
                }
            }
        }
    }
    for (r, row) in table.iter_mut().enumerate() {
        for (c, cell) in row.iter_mut().enumerate() {
            *cell += usize::from(bumped[r][c]);
        }
    }
    table
}

/// Assigns ids to train/val/test so each split's class counts are within one
/// instance of proportional.
pub fn stratified_split(labels: &[usize], sizes: SplitSizes, seed: u64) -> Result<Splits, DataError> {
    let n = labels.len();
    if sizes.total() > n {
        return Err(DataError::InfeasibleSplit {
            requested: sizes.total(),
            available: n,
        });
    }
    let classes = labels.iter().copied().max().map_or(0, |m| m + 1);
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (id, &y) in labels.iter().enumerate() {
        members[y].push(id);
    }
    let counts: Vec<usize> = members.iter().map(Vec::len).collect();
    let table = round_table(&counts, &[sizes.train, sizes.val, sizes.test, n - sizes.total()]);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut splits = Splits::default();
    for (class, ids) in members.iter_mut().enumerate() {
        ids.shuffle(&mut rng);
        let mut rest = ids.as_slice();
        for (j, split) in [Split::Train, Split::Val, Split::Test].into_iter().enumerate() {
            let (take, tail) = rest.split_at(table[class][j]);
            splits.get_mut(split).extend_from_slice(take);
            rest = tail;
        }
    }
    for split in [Split::Train, Split::Val, Split::Test] {
        splits.get_mut(split).sort_unstable();
    }
    Ok(splits)
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DedupReport {
    pub dropped: Vec<usize>,
}

fn collides(a: &[Vec<f64>], b: &[Vec<f64>]) -> bool {
    a.iter()
        .zip(b)
        .any(|(ra, rb)| ra.iter().zip(rb).all(|(x, y)| (x - y).abs() <= DEDUP_TOL))
}

/// Drops instances whose rendering under some format matches an instance of an
/// earlier split (train, then val, then test).
pub fn dedup_rendered(dataset: &mut Dataset) -> Result<DedupReport, DataError> {
    let all: Vec<usize> = (0..dataset.formats.len()).collect();
    let mut kept: Vec<Vec<Vec<f64>>> = Vec::new();
    let mut report = DedupReport::default();
    for split in [Split::Train, Split::Val, Split::Test] {
        let mut keep = Vec::new();
        let mut this_split = Vec::new();
        for &id in dataset.splits.get(split) {
            let r = dataset.render(id, &all)?;
            if kept.iter().any(|k| collides(k, &r)) {
                report.dropped.push(id);
            } else {
                keep.push(id);
                this_split.push(r);
            }
        }
        *dataset.splits.get_mut(split) = keep;
        kept.extend(this_split);
    }
    report.dropped.sort_unstable();
    Ok(report)
}
