//! Consensus cross-entropy, CC-set JSD, NC→CC flip KL and the swarm baseline.
//!
//! All divergence terms act on the full-vocabulary distribution at each answer
//! position and are averaged over positions. Quantities that serve as
//! teachers (the CC mixture in the flip term, the teacher side of swarm
//! distillation) and the flip weight are constants with respect to gradients;
//! [`FrozenTargets`] and [`SwarmTargets`] carry them so that finite-difference
//! checks can hold them fixed while the student side moves.

use serde::{Deserialize, Serialize};

use crate::consensus::{run_consensus, CaseTag, ConsensusError, ConsensusOutcome, Hyperparams};
use crate::numerics::{NumericsError, Tape, Tensor, Var};
use crate::scorer::{AnswerSpec, ScorerError, ScorerParams, TapeScores};

/// Floor applied inside logarithms of mixtures and teacher distributions.
pub const LOG_FLOOR: f64 = 1e-12;

const NORMALIZATION_TOL: f64 = 1e-9;

#[derive(Debug, thiserror::Error)]
pub enum LossError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Scorer(#[from] ScorerError),
    #[error(transparent)]
    Consensus(#[from] ConsensusError),
    #[error("distribution {index} sums to {sum}, not 1")]
    NotNormalized { index: usize, sum: f64 },
    #[error("distribution {index} has a negative entry")]
    Negative { index: usize },
    #[error("distribution {index} has length {got}, expected {expected}")]
    LengthMismatch {
        index: usize,
        expected: usize,
        got: usize,
    },
    #[error("need at least {needed} distributions, got {got}")]
    TooFew { needed: usize, got: usize },
    #[error("mixture weights must be nonnegative and sum to 1 (sum {sum})")]
    InvalidWeights { sum: f64 },
    #[error("distribution {index} is not strictly positive")]
    NotPositive { index: usize },
}

fn check_distributions(dists: &[Vec<f64>], needed: usize) -> Result<(), LossError> {
    if dists.len() < needed {
        return Err(LossError::TooFew {
            needed,
            got: dists.len(),
        });
    }
    let len = dists[0].len();
    for (index, d) in dists.iter().enumerate() {
        if d.len() != len {
            return Err(LossError::LengthMismatch {
                index,
                expected: len,
                got: d.len(),
            });
        }
        if d.iter().any(|&x| x < 0.0 || !x.is_finite()) {
            return Err(LossError::Negative { index });
        }
        let sum: f64 = d.iter().sum();
        if (sum - 1.0).abs() > NORMALIZATION_TOL {
            return Err(LossError::NotNormalized { index, sum });
        }
    }
    Ok(())
}

fn floored_log(x: f64) -> f64 {
    x.max(LOG_FLOOR).ln()
}

/// `KL(p ‖ q)` with [`LOG_FLOOR`] inside both logarithms; zero-mass entries of `p` contribute 0.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &qi)| pi * (floored_log(pi) - floored_log(qi)))
        .sum()
}

/// Mean KL of each distribution to their uniform probability-space mixture.
pub fn generalized_jsd(dists: &[Vec<f64>]) -> Result<f64, LossError> {
    check_distributions(dists, 2)?;
    let mut tape = Tape::new();
    let logs = dists
        .iter()
        .map(|d| tape.constant_vec(d.iter().map(|&x| floored_log(x)).collect()))
        .collect::<Result<Vec<_>, _>>()?;
    let jsd = jsd_on_tape(&mut tape, &logs)?;
    Ok(tape.scalar(jsd)?)
}

/// Both sides of the mixture-teacher identity
/// `Σ wᵢ KL(qᵢ‖p) = KL(q̄‖p) + Σ wᵢ KL(qᵢ‖q̄)` with `q̄ = Σ wᵢ qᵢ`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecompositionCheck {
    pub lhs: f64,
    pub rhs: f64,
    pub gap: f64,
}

pub fn mixture_decomposition_check(
    teachers: &[Vec<f64>],
    weights: &[f64],
    student: &[f64],
) -> Result<DecompositionCheck, LossError> {
    check_distributions(teachers, 1)?;
    check_distributions(std::slice::from_ref(&student.to_vec()), 1)?;
    if weights.len() != teachers.len() {
        return Err(LossError::LengthMismatch {
            index: 0,
            expected: teachers.len(),
            got: weights.len(),
        });
    }
    let sum: f64 = weights.iter().sum();
    if weights.iter().any(|&w| w < 0.0) || (sum - 1.0).abs() > NORMALIZATION_TOL {
        return Err(LossError::InvalidWeights { sum });
    }
    if student.len() != teachers[0].len() {
        return Err(LossError::LengthMismatch {
            index: teachers.len(),
            expected: teachers[0].len(),
            got: student.len(),
        });
    }
    for (index, d) in teachers.iter().chain(std::iter::once(&student.to_vec())).enumerate() {
        if d.iter().any(|&x| x <= 0.0) {
            return Err(LossError::NotPositive { index });
        }
    }
    let mixture: Vec<f64> = (0..student.len())
        .map(|y| teachers.iter().zip(weights).map(|(q, w)| w * q[y]).sum())
        .collect();
    let lhs: f64 = teachers
        .iter()
        .zip(weights)
        .map(|(q, w)| w * kl_divergence(q, student))
        .sum();
    let rhs = kl_divergence(&mixture, student)
        + teachers
            .iter()
            .zip(weights)
            .map(|(q, w)| w * kl_divergence(q, &mixture))
            .sum::<f64>();
    Ok(DecompositionCheck {
        lhs,
        rhs,
        gap: (lhs - rhs).abs(),
    })
}

/// Generalized JSD of distributions given by their log-probability nodes.
pub fn jsd_on_tape(tape: &mut Tape, log_dists: &[Var]) -> Result<Var, NumericsError> {
    let probs = log_dists
        .iter()
        .map(|&l| tape.exp(l))
        .collect::<Result<Vec<_>, _>>()?;
    let mixture = tape.average(&probs)?;
    let log_mixture = tape.log_floor(mixture, LOG_FLOOR)?;
    let terms = probs
        .iter()
        .zip(log_dists)
        .map(|(&q, &log_q)| {
            let diff = tape.sub(log_q, log_mixture)?;
            tape.dot(q, diff)
        })
        .collect::<Result<Vec<_>, _>>()?;
    tape.average(&terms)
}

/// `KL(q ‖ target)` where `q` is a log-probability node and `target` a constant.
pub fn kl_to_constant(tape: &mut Tape, log_q: Var, target: &[f64]) -> Result<Var, NumericsError> {
    let q = tape.exp(log_q)?;
    let log_target = tape.constant_vec(target.iter().map(|&x| floored_log(x)).collect())?;
    let diff = tape.sub(log_q, log_target)?;
    tape.dot(q, diff)
}

/// `KL(teacher ‖ q)` where the teacher is a constant and `q` a log-probability node.
pub fn kl_from_constant(tape: &mut Tape, teacher: &[f64], log_q: Var) -> Result<Var, NumericsError> {
    let t = tape.constant_vec(teacher.to_vec())?;
    let log_t = tape.constant_vec(teacher.iter().map(|&x| floored_log(x)).collect())?;
    let diff = tape.sub(log_t, log_q)?;
    tape.dot(t, diff)
}

/// Per-position averaged JSD over CC members: `members[m][position]`.
fn positionwise_jsd(tape: &mut Tape, members: &[Vec<Var>]) -> Result<Var, NumericsError> {
    let positions = members[0].len();
    let per_position = (0..positions)
        .map(|t| {
            let at: Vec<Var> = members.iter().map(|m| m[t]).collect();
            jsd_on_tape(tape, &at)
        })
        .collect::<Result<Vec<_>, _>>()?;
    tape.average(&per_position)
}

/// `w_flip · mean_s mean_t KL(q_{s,t} ‖ mixture_t)`.
fn flip_term(
    tape: &mut Tape,
    nc_members: &[Vec<Var>],
    mixture: &[Vec<f64>],
    w_flip: f64,
) -> Result<Var, NumericsError> {
    let per_member = nc_members
        .iter()
        .map(|positions| {
            let kls = positions
                .iter()
                .zip(mixture)
                .map(|(&log_q, target)| kl_to_constant(tape, log_q, target))
                .collect::<Result<Vec<_>, _>>()?;
            tape.average(&kls)
        })
        .collect::<Result<Vec<_>, _>>()?;
    let mean = tape.average(&per_member)?;
    tape.scale(mean, w_flip)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub cce: f64,
    pub jsd: f64,
    pub flip: f64,
    pub total: f64,
    pub case: CaseTag,
    /// Negative length-normalized log-likelihood of the consensus answer per variation.
    pub nlls: Vec<f64>,
}

impl LossBreakdown {
    fn skipped(case: CaseTag) -> Self {
        Self {
            cce: 0.0,
            jsd: 0.0,
            flip: 0.0,
            total: 0.0,
            case,
            nlls: Vec::new(),
        }
    }
}

/// Consensus outcome plus the CC mixture, both frozen for differentiation.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenTargets {
    pub outcome: ConsensusOutcome,
    /// Probability-space mean of the CC members' consensus-answer
    /// distributions, one vector per answer position. Empty unless Split.
    pub cc_mixture: Vec<Vec<f64>>,
}

impl FrozenTargets {
    /// Runs the consensus split on the tape's current values and snapshots the CC mixture.
    pub fn capture(tape: &Tape, scores: &TapeScores, hp: &Hyperparams) -> Result<Self, LossError> {
        let ll = scores.ll_values(tape)?;
        let outcome = run_consensus(&ll, hp)?;
        let cc_mixture = match (outcome.case, outcome.consensus) {
            (CaseTag::Split, Some(c)) => {
                let members: Vec<Vec<Var>> = outcome.cc.iter().map(|&t| scores.answer_dists(t, c)).collect();
                (0..members[0].len())
                    .map(|pos| {
                        let mut mix = vec![0.0; tape.value(members[0][pos]).len()];
                        for m in &members {
                            for (acc, lq) in mix.iter_mut().zip(tape.value(m[pos])) {
                                *acc += lq.exp();
                            }
                        }
                        mix.iter_mut().for_each(|x| *x /= members.len() as f64);
                        mix
                    })
                    .collect()
            }
            _ => Vec::new(),
        };
        Ok(Self { outcome, cc_mixture })
    }
}

/// Loss recorded on a tape; `total` is `None` for skipped instances.
#[derive(Debug, Clone)]
pub struct TapeLoss {
    pub total: Option<Var>,
    pub breakdown: LossBreakdown,
}

/// Case-wise total: nothing for skipped cases, CCE + JSD when unanimous and
/// confident, CCE + JSD + flip for a split.
pub fn f2c_on_tape(
    tape: &mut Tape,
    scores: &TapeScores,
    targets: &FrozenTargets,
    hp: &Hyperparams,
) -> Result<TapeLoss, LossError> {
    let outcome = &targets.outcome;
    let (c, case) = match (outcome.case, outcome.consensus) {
        (case, _) if case.is_skipped() => {
            return Ok(TapeLoss {
                total: None,
                breakdown: LossBreakdown::skipped(case),
            })
        }
        (case, Some(c)) => (c, case),
        (case, None) => unreachable!("{case:?} without a consensus label"),
    };

    // CCE: λ · mean_v ℓ_v with ℓ_v = −LL[v, c*]
    let lls: Vec<Var> = scores.ll.iter().map(|row| row[c]).collect();
    let nlls = lls
        .iter()
        .map(|&v| tape.scalar(v).map(|x| -x))
        .collect::<Result<Vec<_>, _>>()?;
    let mean_ll = tape.average(&lls)?;
    let cce = tape.scale(mean_ll, -hp.lambda_cce)?;
    let mut parts = vec![cce];

    let mut jsd_value = 0.0;
    if hp.beta_jsd > 0.0 && outcome.cc.len() >= 2 {
        let members: Vec<Vec<Var>> = outcome.cc.iter().map(|&t| scores.answer_dists(t, c)).collect();
        let jsd = positionwise_jsd(tape, &members)?;
        let jsd = tape.scale(jsd, hp.beta_jsd)?;
        jsd_value = tape.scalar(jsd)?;
        parts.push(jsd);
    }

    let mut flip_value = 0.0;
    if case == CaseTag::Split && outcome.w_flip > 0.0 {
        let nc: Vec<Vec<Var>> = outcome.nc.iter().map(|&s| scores.answer_dists(s, c)).collect();
        let flip = flip_term(tape, &nc, &targets.cc_mixture, outcome.w_flip)?;
        flip_value = tape.scalar(flip)?;
        parts.push(flip);
    }

    let total = tape.add_all(&parts)?;
    let cce_value = tape.scalar(cce)?;
    Ok(TapeLoss {
        total: Some(total),
        breakdown: LossBreakdown {
            cce: cce_value,
            jsd: jsd_value,
            flip: flip_value,
            total: tape.scalar(total)?,
            case,
            nlls,
        },
    })
}

/// Instance CCE from per-variation NLLs: `λ · mean(ℓ)` under a strict majority, else 0.
pub fn cce_loss(nlls: &[f64], outcome: &ConsensusOutcome, hp: &Hyperparams) -> f64 {
    if outcome.consensus.is_none() || nlls.is_empty() {
        return 0.0;
    }
    hp.lambda_cce * nlls.iter().sum::<f64>() / nlls.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JsdLoss {
    pub value: f64,
    /// Set when the CC set had fewer than two members and the term was skipped.
    pub undersized: bool,
}

/// `β_jsd` times the position-averaged JSD of the CC members' distributions.
///
/// `cc_dists[m][position]` holds probability vectors.
pub fn jsd_loss(cc_dists: &[Vec<Vec<f64>>], hp: &Hyperparams) -> Result<JsdLoss, LossError> {
    if cc_dists.len() < 2 {
        return Ok(JsdLoss {
            value: 0.0,
            undersized: true,
        });
    }
    let positions = cc_dists[0].len();
    let mut total = 0.0;
    for t in 0..positions {
        let at: Vec<Vec<f64>> = cc_dists.iter().map(|m| m[t].clone()).collect();
        total += generalized_jsd(&at)?;
    }
    Ok(JsdLoss {
        value: hp.beta_jsd * total / positions as f64,
        undersized: false,
    })
}

/// `w_flip · mean_s KL(q_s ‖ q̄_T)` with `q̄_T` the probability-space mean of the CC members.
///
/// Distributions are indexed `[member][position]`.
pub fn flip_kl_loss(
    nc_dists: &[Vec<Vec<f64>>],
    cc_dists: &[Vec<Vec<f64>>],
    outcome: &ConsensusOutcome,
) -> Result<f64, LossError> {
    if outcome.case != CaseTag::Split || nc_dists.is_empty() || outcome.w_flip == 0.0 {
        return Ok(0.0);
    }
    if cc_dists.is_empty() {
        return Err(LossError::TooFew { needed: 1, got: 0 });
    }
    let positions = cc_dists[0].len();
    let mixture: Vec<Vec<f64>> = (0..positions)
        .map(|t| {
            let at: Vec<Vec<f64>> = cc_dists.iter().map(|m| m[t].clone()).collect();
            check_distributions(&at, 1)?;
            let n = at.len() as f64;
            Ok((0..at[0].len()).map(|y| at.iter().map(|d| d[y]).sum::<f64>() / n).collect())
        })
        .collect::<Result<_, LossError>>()?;
    let mut tape = Tape::new();
    let nc = nc_dists
        .iter()
        .map(|member| {
            check_distributions(member, 1)?;
            member
                .iter()
                .map(|d| Ok(tape.constant_vec(d.iter().map(|&x| floored_log(x)).collect())?))
                .collect::<Result<Vec<_>, LossError>>()
        })
        .collect::<Result<Vec<_>, _>>()?;
    let flip = flip_term(&mut tape, &nc, &mixture, outcome.w_flip)?;
    Ok(tape.scalar(flip)?)
}

/// Teacher distributions for swarm distillation, frozen at capture time.
#[derive(Debug, Clone, PartialEq)]
pub struct SwarmTargets {
    pub teachers: Vec<Vec<f64>>,
}

impl SwarmTargets {
    pub fn capture(tape: &Tape, log_dists: &[Var]) -> Self {
        Self {
            teachers: log_dists
                .iter()
                .map(|&l| tape.value(l).iter().map(|x| x.exp()).collect())
                .collect(),
        }
    }
}

/// Mean over ordered pairs `u ≠ v` of `KL(stop(q_u) ‖ q_v)`.
///
/// Acts on each variation's vocabulary distribution at the first answer
/// position, which does not depend on the label being scored.
pub fn swarm_on_tape(
    tape: &mut Tape,
    log_dists: &[Var],
    targets: &SwarmTargets,
) -> Result<Option<Var>, NumericsError> {
    if log_dists.len() < 2 {
        return Ok(None);
    }
    // Σ_{u≠v} KL(q_u ‖ q_v) = Σ_{u≠v} Σ q_u ln q_u − (Σ_{u≠v} q_u) · ln q_v,
    // so each student needs one dot product against its summed teachers.
    let n = log_dists.len();
    let self_terms: Vec<f64> = targets
        .teachers
        .iter()
        .map(|q| q.iter().filter(|&&x| x > 0.0).map(|&x| x * floored_log(x)).sum())
        .collect();
    let total_self: f64 = self_terms.iter().sum();
    let mut constant = 0.0;
    let mut cross = Vec::with_capacity(n);
    for (v, &student) in log_dists.iter().enumerate() {
        constant += total_self - self_terms[v];
        let mut teachers = vec![0.0; targets.teachers[v].len()];
        for (u, q) in targets.teachers.iter().enumerate() {
            if u != v {
                teachers.iter_mut().zip(q).for_each(|(t, x)| *t += x);
            }
        }
        let t = tape.constant_vec(teachers)?;
        cross.push(tape.dot(t, student)?);
    }
    let pairs = (n * (n - 1)) as f64;
    let cross = tape.add_all(&cross)?;
    let cross = tape.scale(cross, -1.0 / pairs)?;
    let constant = tape.constant(Tensor::scalar(constant / pairs)?);
    tape.add(cross, constant).map(Some)
}

/// Swarm loss of probability vectors, one per variation.
pub fn swarm_loss(dists: &[Vec<f64>]) -> Result<f64, LossError> {
    if dists.len() < 2 {
        return Ok(0.0);
    }
    check_distributions(dists, 2)?;
    let mut tape = Tape::new();
    let logs = dists
        .iter()
        .map(|d| tape.constant_vec(d.iter().map(|&x| floored_log(x)).collect()))
        .collect::<Result<Vec<_>, _>>()?;
    let targets = SwarmTargets {
        teachers: dists.to_vec(),
    };
    let loss = swarm_on_tape(&mut tape, &logs, &targets)?.expect("at least two variations");
    Ok(tape.scalar(loss)?)
}

/// Scores one instance, runs the consensus split and evaluates the full loss.
pub fn f2c_total(
    params: &ScorerParams,
    renderings: &[Vec<f64>],
    answers: &AnswerSpec,
    hp: &Hyperparams,
) -> Result<(LossBreakdown, ConsensusOutcome), LossError> {
    let mut tape = Tape::new();
    let vars = params.to_tape(&mut tape);
    let scores = crate::scorer::score_on_tape(&mut tape, vars, renderings, answers)?;
    let targets = FrozenTargets::capture(&tape, &scores, hp)?;
    let loss = f2c_on_tape(&mut tape, &scores, &targets, hp)?;
    Ok((loss.breakdown, targets.outcome))
}

/// Convenience for tests and diagnostics: a 1-D constant log-distribution node.
pub fn log_dist_leaf(tape: &mut Tape, log_probs: Vec<f64>, trainable: bool) -> Result<Var, NumericsError> {
    let t = Tensor::vector(log_probs)?;
    Ok(if trainable {
        tape.leaf(t.with_grad())
    } else {
        tape.constant(t)
    })
}
