//! Linear prompt-conditioned classifier standing in for a language model.
//!
//! A format renders instance features through a fixed affine map; the scorer
//! maps rendered features to vocabulary logits with one weight matrix and a
//! bias. Label `c` is scored by its length-normalized log-likelihood: the mean
//! over its answer tokens of the log-softmax entry for that token. The scorer
//! does not condition on the answer prefix, so every answer position of a
//! given format shares the same vocabulary distribution.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::numerics::{log_softmax_vec, NumericsError, Tape, Tensor, Var};

#[derive(Debug, thiserror::Error)]
pub enum ScorerError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("label {label} has an empty answer sequence")]
    EmptyAnswer { label: usize },
    #[error("label {label} uses token {token} outside a vocabulary of {vocab}")]
    TokenOutOfRange { label: usize, token: usize, vocab: usize },
    #[error("labels {first} and {second} share the same answer tokens")]
    DuplicateAnswer { first: usize, second: usize },
    #[error("need at least 2 labels, got {0}")]
    TooFewLabels(usize),
    #[error("need at least one format")]
    NoFormats,
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint format: {0}")]
    Json(#[from] serde_json::Error),
}

/// One prompt format: `render(x) = matrix · x + offset`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FormatSpec {
    pub id: usize,
    pub dim: usize,
    /// Row-major `dim × dim`.
    pub matrix: Vec<f64>,
    pub offset: Vec<f64>,
    /// Distortion strength baked into `matrix` when the format was generated.
    pub noise_scale: f64,
    #[serde(default)]
    pub hard: bool,
}

impl FormatSpec {
    pub fn new(id: usize, dim: usize, matrix: Vec<f64>, offset: Vec<f64>) -> Result<Self, ScorerError> {
        if matrix.len() != dim * dim {
            return Err(ScorerError::DimensionMismatch {
                expected: dim * dim,
                got: matrix.len(),
            });
        }
        if offset.len() != dim {
            return Err(ScorerError::DimensionMismatch {
                expected: dim,
                got: offset.len(),
            });
        }
        Ok(Self {
            id,
            dim,
            matrix,
            offset,
            noise_scale: 0.0,
            hard: false,
        })
    }

    pub fn identity(id: usize, dim: usize) -> Self {
        let mut matrix = vec![0.0; dim * dim];
        for i in 0..dim {
            matrix[i * dim + i] = 1.0;
        }
        Self {
            id,
            dim,
            matrix,
            offset: vec![0.0; dim],
            noise_scale: 0.0,
            hard: false,
        }
    }

    pub fn render(&self, features: &[f64]) -> Result<Vec<f64>, ScorerError> {
        if features.len() != self.dim {
            return Err(ScorerError::DimensionMismatch {
                expected: self.dim,
                got: features.len(),
            });
        }
        Ok(self
            .matrix
            .chunks_exact(self.dim)
            .zip(&self.offset)
            .map(|(row, b)| row.iter().zip(features).map(|(m, x)| m * x).sum::<f64>() + b)
            .collect())
    }
}

/// Token sequences for each label's answer string.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnswerSpec {
    tokens: Vec<Vec<usize>>,
}

impl AnswerSpec {
    pub fn new(tokens: Vec<Vec<usize>>, vocab: usize) -> Result<Self, ScorerError> {
        if tokens.len() < 2 {
            return Err(ScorerError::TooFewLabels(tokens.len()));
        }
        for (label, seq) in tokens.iter().enumerate() {
            if seq.is_empty() {
                return Err(ScorerError::EmptyAnswer { label });
            }
            if let Some(&token) = seq.iter().find(|&&t| t >= vocab) {
                return Err(ScorerError::TokenOutOfRange { label, token, vocab });
            }
            if let Some(first) = tokens[..label].iter().position(|s| s == seq) {
                return Err(ScorerError::DuplicateAnswer { first, second: label });
            }
        }
        Ok(Self { tokens })
    }

    /// Label `c` answers with the single token `c`.
    pub fn single_token(labels: usize) -> Self {
        Self {
            tokens: (0..labels).map(|c| vec![c]).collect(),
        }
    }

    pub fn labels(&self) -> usize {
        self.tokens.len()
    }

    pub fn tokens(&self, label: usize) -> &[usize] {
        &self.tokens[label]
    }

    pub fn max_token(&self) -> usize {
        self.tokens.iter().flatten().copied().max().unwrap_or(0)
    }
}

/// Weight `[vocab, dim]` and bias `[vocab]` of the linear scorer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScorerParams {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl ScorerParams {
    pub fn new(weight: Tensor, bias: Tensor) -> Result<Self, ScorerError> {
        if weight.shape().len() != 2 {
            return Err(NumericsError::ShapeMismatch {
                op: "scorer weight",
                left: weight.shape().to_vec(),
                right: vec![0, 0],
            }
            .into());
        }
        if bias.shape() != [weight.shape()[0]] {
            return Err(NumericsError::ShapeMismatch {
                op: "scorer bias",
                left: weight.shape().to_vec(),
                right: bias.shape().to_vec(),
            }
            .into());
        }
        Ok(Self { weight, bias })
    }

    pub fn zeros(vocab: usize, dim: usize) -> Self {
        Self {
            weight: Tensor::zeros(vec![vocab, dim]),
            bias: Tensor::zeros(vec![vocab]),
        }
    }

    /// Initialization that plays the role of a pretrained model.
    ///
    /// Each label token's weight row is `gain` times that label's canonical
    /// class prototype; every entry then receives `N(0, noise²)` jitter.
    /// Distractor rows carry only the jitter.
    pub fn from_prototypes<R: Rng>(
        prototypes: &[Vec<f64>],
        answers: &AnswerSpec,
        vocab: usize,
        gain: f64,
        noise: f64,
        rng: &mut R,
    ) -> Result<Self, ScorerError> {
        let dim = prototypes.first().map_or(0, Vec::len);
        if prototypes.len() != answers.labels() {
            return Err(ScorerError::DimensionMismatch {
                expected: answers.labels(),
                got: prototypes.len(),
            });
        }
        if answers.max_token() >= vocab {
            return Err(ScorerError::TokenOutOfRange {
                label: 0,
                token: answers.max_token(),
                vocab,
            });
        }
        let mut weight = vec![0.0; vocab * dim];
        for (label, proto) in prototypes.iter().enumerate() {
            if proto.len() != dim {
                return Err(ScorerError::DimensionMismatch {
                    expected: dim,
                    got: proto.len(),
                });
            }
            for &tok in answers.tokens(label) {
                for (w, p) in weight[tok * dim..(tok + 1) * dim].iter_mut().zip(proto) {
                    *w = gain * p;
                }
            }
        }
        for w in weight.iter_mut() {
            *w += noise * rng.sample::<f64, _>(StandardNormal);
        }
        let bias = (0..vocab)
            .map(|_| noise * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Self::new(Tensor::matrix(vocab, dim, weight)?, Tensor::vector(bias)?)
    }

    pub fn vocab(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn num_params(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    /// Vocabulary logits for a rendered input.
    pub fn logits(&self, rendered: &[f64]) -> Result<Vec<f64>, ScorerError> {
        let dim = self.dim();
        if rendered.len() != dim {
            return Err(ScorerError::DimensionMismatch {
                expected: dim,
                got: rendered.len(),
            });
        }
        Ok(self
            .weight
            .values()
            .chunks_exact(dim)
            .zip(self.bias.values())
            .map(|(row, b)| row.iter().zip(rendered).map(|(w, x)| w * x).sum::<f64>() + b)
            .collect())
    }

    /// Applies `params -= lr * grad` with `grad` laid out as weight then bias.
    pub fn step(&mut self, grad: &[f64], lr: f64) -> Result<(), ScorerError> {
        if grad.len() != self.num_params() {
            return Err(ScorerError::DimensionMismatch {
                expected: self.num_params(),
                got: grad.len(),
            });
        }
        let (gw, gb) = grad.split_at(self.weight.len());
        let update = |t: &Tensor, g: &[f64]| {
            let values = t.values().iter().zip(g).map(|(p, d)| p - lr * d).collect();
            Tensor::new(t.shape().to_vec(), values)
        };
        self.weight = update(&self.weight, gw)?;
        self.bias = update(&self.bias, gb)?;
        Ok(())
    }

    pub fn flat(&self) -> Vec<f64> {
        self.weight.values().iter().chain(self.bias.values()).copied().collect()
    }

    /// Places both parameter tensors on a tape as differentiable leaves.
    pub fn to_tape(&self, tape: &mut Tape) -> ParamVars {
        ParamVars {
            weight: tape.leaf(self.weight.clone().with_grad()),
            bias: tape.leaf(self.bias.clone().with_grad()),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ParamVars {
    pub weight: Var,
    pub bias: Var,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnswerScore {
    /// Length-normalized log-likelihood of the answer.
    pub ll: f64,
    /// Full-vocabulary log-softmax used at each answer position.
    pub positions: Vec<Vec<f64>>,
}

pub fn score_answer(
    params: &ScorerParams,
    rendered: &[f64],
    tokens: &[usize],
) -> Result<AnswerScore, ScorerError> {
    if tokens.is_empty() {
        return Err(ScorerError::EmptyAnswer { label: 0 });
    }
    let vocab = params.vocab();
    if let Some(&token) = tokens.iter().find(|&&t| t >= vocab) {
        return Err(ScorerError::TokenOutOfRange { label: 0, token, vocab });
    }
    let logq = log_softmax_vec(&params.logits(rendered)?);
    let ll = tokens.iter().map(|&t| logq[t]).sum::<f64>() / tokens.len() as f64;
    Ok(AnswerScore {
        ll,
        positions: vec![logq; tokens.len()],
    })
}

/// Per-instance `V × L` label log-likelihoods and the induced label distributions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LLMatrix {
    pub instance_id: usize,
    ll: Vec<Vec<f64>>,
    pi: Vec<Vec<f64>>,
}

impl LLMatrix {
    pub fn new(instance_id: usize, ll: Vec<Vec<f64>>) -> Result<Self, ScorerError> {
        let labels = ll.first().map_or(0, Vec::len);
        if ll.is_empty() {
            return Err(ScorerError::NoFormats);
        }
        if labels < 2 {
            return Err(ScorerError::TooFewLabels(labels));
        }
        for row in &ll {
            if row.len() != labels {
                return Err(ScorerError::DimensionMismatch {
                    expected: labels,
                    got: row.len(),
                });
            }
            if let Some(index) = row.iter().position(|v| !v.is_finite()) {
                return Err(NumericsError::NonFiniteInput { index }.into());
            }
        }
        let pi = ll.iter().map(|row| crate::numerics::softmax_vec(row)).collect();
        Ok(Self { instance_id, ll, pi })
    }

    pub fn variations(&self) -> usize {
        self.ll.len()
    }

    pub fn labels(&self) -> usize {
        self.ll[0].len()
    }

    pub fn row(&self, v: usize) -> &[f64] {
        &self.ll[v]
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.ll
    }

    pub fn get(&self, v: usize, c: usize) -> f64 {
        self.ll[v][c]
    }

    pub fn pi(&self, v: usize) -> &[f64] {
        &self.pi[v]
    }

    pub fn predictions(&self) -> Vec<usize> {
        self.pi.iter().map(|row| predict(row)).collect()
    }
}

/// Log-distributions `[variation][label][position][vocab]` behind an [`LLMatrix`].
#[derive(Debug, Clone, PartialEq)]
pub struct AnswerDistributionSet {
    pub instance_id: usize,
    dists: Vec<Vec<Vec<Vec<f64>>>>,
}

impl AnswerDistributionSet {
    pub fn variations(&self) -> usize {
        self.dists.len()
    }

    /// Per-position log-distributions when variation `v` answers with label `c`.
    pub fn for_label(&self, v: usize, c: usize) -> &[Vec<f64>] {
        &self.dists[v][c]
    }
}

pub fn build_ll_matrix(
    params: &ScorerParams,
    instance_id: usize,
    features: &[f64],
    formats: &[FormatSpec],
    answers: &AnswerSpec,
) -> Result<(LLMatrix, AnswerDistributionSet), ScorerError> {
    let renderings = formats
        .iter()
        .map(|f| f.render(features))
        .collect::<Result<Vec<_>, _>>()?;
    build_ll_matrix_rendered(params, instance_id, &renderings, answers)
}

/// [`build_ll_matrix`] over already rendered inputs, one per format.
pub fn build_ll_matrix_rendered(
    params: &ScorerParams,
    instance_id: usize,
    renderings: &[Vec<f64>],
    answers: &AnswerSpec,
) -> Result<(LLMatrix, AnswerDistributionSet), ScorerError> {
    if renderings.is_empty() {
        return Err(ScorerError::NoFormats);
    }
    let mut ll = Vec::with_capacity(renderings.len());
    let mut dists = Vec::with_capacity(renderings.len());
    for rendered in renderings {
        let mut ll_row = Vec::with_capacity(answers.labels());
        let mut dist_row = Vec::with_capacity(answers.labels());
        for c in 0..answers.labels() {
            let score = score_answer(params, rendered, answers.tokens(c))?;
            ll_row.push(score.ll);
            dist_row.push(score.positions);
        }
        ll.push(ll_row);
        dists.push(dist_row);
    }
    Ok((
        LLMatrix::new(instance_id, ll)?,
        AnswerDistributionSet { instance_id, dists },
    ))
}

/// Predicted label: argmax with ties to the lowest index.
pub fn predict(row: &[f64]) -> usize {
    let mut best = 0;
    for (c, &p) in row.iter().enumerate().skip(1) {
        if p > row[best] {
            best = c;
        }
    }
    best
}

/// Scores of one instance recorded on a tape.
#[derive(Debug, Clone)]
pub struct TapeScores {
    /// Vocabulary log-softmax per variation.
    pub log_dists: Vec<Var>,
    /// Scalar length-normalized log-likelihood per `[variation][label]`.
    pub ll: Vec<Vec<Var>>,
    answer_lens: Vec<usize>,
}

impl TapeScores {
    pub fn variations(&self) -> usize {
        self.log_dists.len()
    }

    /// Per-position log-distributions of variation `v` answering with `label`.
    pub fn answer_dists(&self, v: usize, label: usize) -> Vec<Var> {
        vec![self.log_dists[v]; self.answer_lens[label]]
    }

    pub fn ll_values(&self, tape: &Tape) -> Result<LLMatrix, ScorerError> {
        let rows = self
            .ll
            .iter()
            .map(|row| row.iter().map(|&v| tape.scalar(v)).collect::<Result<Vec<_>, _>>())
            .collect::<Result<Vec<_>, _>>()?;
        LLMatrix::new(0, rows)
    }
}

pub fn score_on_tape(
    tape: &mut Tape,
    params: ParamVars,
    renderings: &[Vec<f64>],
    answers: &AnswerSpec,
) -> Result<TapeScores, ScorerError> {
    if renderings.is_empty() {
        return Err(ScorerError::NoFormats);
    }
    let mut log_dists = Vec::with_capacity(renderings.len());
    let mut ll = Vec::with_capacity(renderings.len());
    for rendered in renderings {
        let x = tape.constant_vec(rendered.clone())?;
        let wx = tape.matvec(params.weight, x)?;
        let logits = tape.add(wx, params.bias)?;
        let logq = tape.log_softmax(logits, 0)?;
        let row = (0..answers.labels())
            .map(|c| {
                let picked = tape.gather(logq, answers.tokens(c))?;
                tape.mean(picked)
            })
            .collect::<Result<Vec<_>, _>>()?;
        log_dists.push(logq);
        ll.push(row);
    }
    Ok(TapeScores {
        log_dists,
        ll,
        answer_lens: (0..answers.labels()).map(|c| answers.tokens(c).len()).collect(),
    })
}

/// On-disk checkpoint: parameter tensors plus provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointFile {
    pub params: ScorerParams,
    pub seed: u64,
    pub step: usize,
}

impl CheckpointFile {
    pub fn save(&self, path: &Path) -> Result<(), ScorerError> {
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ScorerError> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }
}
