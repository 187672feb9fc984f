//! Strict-majority voting and the confident/non-confident split.
//!
//! Given an instance's `V × L` log-likelihood matrix, each variation votes for
//! its argmax label. A label voted by more than `V/2` variations becomes the
//! consensus. Among its voters `G`, the variations with the largest confidence
//! margins form the consensus-confident (CC) set `T`; everything else is the
//! non-confident (NC) set `S`, later pulled toward the CC set with weight
//! `w_flip`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::scorer::LLMatrix;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ConsensusError {
    #[error("prediction {label} at variation {variation} is outside 0..{labels}")]
    LabelOutOfRange {
        variation: usize,
        label: usize,
        labels: usize,
    },
    #[error("voter set does not match predictions for label {label}: expected {expected:?}, got {got:?}")]
    InconsistentVoters {
        label: usize,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("invalid hyperparameter {field}: {reason}")]
    InvalidHyperparam { field: &'static str, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Hyperparams {
    pub lambda_cce: f64,
    pub tau_unanimous: f64,
    pub k_max: usize,
    pub f_min: f64,
    pub f_max: f64,
    pub temperature: f64,
    pub beta_jsd: f64,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Self {
            lambda_cce: 1.0,
            tau_unanimous: 0.5,
            k_max: 3,
            f_min: 0.1,
            f_max: 1.0,
            temperature: 1.0,
            beta_jsd: 0.5,
        }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<(), ConsensusError> {
        let bad = |field, reason: &str| {
            Err(ConsensusError::InvalidHyperparam {
                field,
                reason: reason.to_string(),
            })
        };
        let finite = [
            ("lambda_cce", self.lambda_cce),
            ("tau_unanimous", self.tau_unanimous),
            ("f_min", self.f_min),
            ("f_max", self.f_max),
            ("temperature", self.temperature),
            ("beta_jsd", self.beta_jsd),
        ];
        if let Some((field, _)) = finite.iter().find(|(_, v)| !v.is_finite()) {
            return bad(field, "must be finite");
        }
        if self.lambda_cce < 0.0 {
            return bad("lambda_cce", "must be >= 0");
        }
        if self.k_max < 2 {
            return bad("k_max", "must be >= 2");
        }
        if self.f_min < 0.0 {
            return bad("f_min", "must be >= 0");
        }
        if self.f_max < self.f_min {
            return bad("f_max", "must be >= f_min");
        }
        if self.temperature <= 0.0 {
            return bad("temperature", "must be > 0");
        }
        if self.beta_jsd < 0.0 {
            return bad("beta_jsd", "must be >= 0");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CaseTag {
    NoMajority,
    UnanimousConfident,
    Split,
    Degenerate,
}

impl CaseTag {
    pub const ALL: [CaseTag; 4] = [
        CaseTag::NoMajority,
        CaseTag::UnanimousConfident,
        CaseTag::Split,
        CaseTag::Degenerate,
    ];

    /// True for the branches that contribute no loss.
    pub fn is_skipped(self) -> bool {
        matches!(self, CaseTag::NoMajority | CaseTag::Degenerate)
    }
}

/// Result of running the split on one instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsensusOutcome {
    pub case: CaseTag,
    /// Strict-majority label `c*`.
    pub consensus: Option<usize>,
    /// `G`: variations voting for `c*`, ascending.
    pub voters: Vec<usize>,
    /// `T`, ascending.
    pub cc: Vec<usize>,
    /// `S`, ascending.
    pub nc: Vec<usize>,
    /// `m_v` for every `v ∈ G`.
    pub margins: BTreeMap<usize, f64>,
    pub median_margin: Option<f64>,
    pub delta: Option<f64>,
    pub w_flip: f64,
}

impl ConsensusOutcome {
    fn no_majority() -> Self {
        Self {
            case: CaseTag::NoMajority,
            consensus: None,
            voters: Vec::new(),
            cc: Vec::new(),
            nc: Vec::new(),
            margins: BTreeMap::new(),
            median_margin: None,
            delta: None,
            w_flip: 0.0,
        }
    }
}

pub fn vote_counts(predictions: &[usize], labels: usize) -> Result<Vec<usize>, ConsensusError> {
    let mut counts = vec![0; labels];
    for (variation, &label) in predictions.iter().enumerate() {
        if label >= labels {
            return Err(ConsensusError::LabelOutOfRange {
                variation,
                label,
                labels,
            });
        }
        counts[label] += 1;
    }
    Ok(counts)
}

/// The label with strictly more than `variations / 2` votes, if any.
pub fn consensus_label(counts: &[usize], variations: usize) -> Option<usize> {
    counts.iter().position(|&n| 2 * n > variations)
}

/// `f_min + (f_max − f_min) · σ(Δ / t)`.
pub fn flip_weight(delta: f64, hp: &Hyperparams) -> f64 {
    hp.f_min + (hp.f_max - hp.f_min) * sigmoid(delta / hp.temperature)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

/// Splits the voters of `consensus` into CC and NC sets.
///
/// `voters` must be exactly the variations whose prediction is `consensus`.
pub fn split_cc_nc(
    ll: &LLMatrix,
    consensus: usize,
    voters: &[usize],
    hp: &Hyperparams,
) -> Result<ConsensusOutcome, ConsensusError> {
    let predictions = ll.predictions();
    let expected: Vec<usize> = predictions
        .iter()
        .enumerate()
        .filter_map(|(v, &p)| (p == consensus).then_some(v))
        .collect();
    let mut got = voters.to_vec();
    got.sort_unstable();
    if consensus >= ll.labels() || got != expected {
        return Err(ConsensusError::InconsistentVoters {
            label: consensus,
            expected,
            got,
        });
    }

    let v_total = ll.variations();
    if 2 * voters.len() <= v_total {
        return Ok(ConsensusOutcome::no_majority());
    }

    let margins: BTreeMap<usize, f64> = expected
        .iter()
        .map(|&v| {
            let row = ll.row(v);
            let best_other = row
                .iter()
                .enumerate()
                .filter(|&(c, _)| c != consensus)
                .map(|(_, &x)| x)
                .fold(f64::NEG_INFINITY, f64::max);
            (v, row[consensus] - best_other)
        })
        .collect();
    let mut sorted: Vec<f64> = margins.values().copied().collect();
    sorted.sort_by(f64::total_cmp);
    let m_med = median(&sorted);

    let mut outcome = ConsensusOutcome {
        case: CaseTag::Degenerate,
        consensus: Some(consensus),
        voters: expected.clone(),
        cc: Vec::new(),
        nc: Vec::new(),
        margins,
        median_margin: Some(m_med),
        delta: None,
        w_flip: 0.0,
    };

    if expected.len() == v_total && m_med >= hp.tau_unanimous {
        outcome.case = CaseTag::UnanimousConfident;
        outcome.cc = expected;
        return Ok(outcome);
    }
    if expected.len() < 2 {
        return Ok(outcome);
    }
    let k = hp.k_max.min(v_total - 1);
    if k < 2 {
        return Ok(outcome);
    }

    let mut ranked = expected;
    ranked.sort_by(|a, b| {
        outcome.margins[b]
            .total_cmp(&outcome.margins[a])
            .then(a.cmp(b))
    });
    ranked.truncate(k);
    ranked.sort_unstable();
    let nc: Vec<usize> = (0..v_total).filter(|v| ranked.binary_search(v).is_err()).collect();

    let mean_ll = |set: &[usize]| set.iter().map(|&v| ll.get(v, consensus)).sum::<f64>() / set.len() as f64;
    let delta = mean_ll(&ranked) - mean_ll(&nc);

    outcome.case = CaseTag::Split;
    outcome.cc = ranked;
    outcome.nc = nc;
    outcome.delta = Some(delta);
    outcome.w_flip = flip_weight(delta, hp);
    Ok(outcome)
}

/// Votes, finds the strict majority and splits; the full per-instance pipeline.
pub fn run_consensus(ll: &LLMatrix, hp: &Hyperparams) -> Result<ConsensusOutcome, ConsensusError> {
    let predictions = ll.predictions();
    let counts = vote_counts(&predictions, ll.labels())?;
    match consensus_label(&counts, ll.variations()) {
        None => Ok(ConsensusOutcome::no_majority()),
        Some(c) => {
            let voters: Vec<usize> = predictions
                .iter()
                .enumerate()
                .filter_map(|(v, &p)| (p == c).then_some(v))
                .collect();
            split_cc_nc(ll, c, &voters, hp)
        }
    }
}
