//! Speaker-verification scoring: trial construction, equal error rate and
//! rejection-quality diagnostics.

use std::collections::{BTreeMap, HashSet};

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::cosine;
use crate::numeric::Matrix;
use crate::rng::stream;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Trial {
    /// Row of the first embedding.
    pub a: usize,
    pub b: usize,
    pub same_speaker: bool,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrialSet {
    pub trials: Vec<Trial>,
}

impl TrialSet {
    pub fn from_scores(targets: &[f64], nontargets: &[f64]) -> Self {
        let mk = |same| move |(i, s): (usize, &f64)| Trial { a: i, b: i, same_speaker: same, score: *s };
        TrialSet {
            trials: targets
                .iter()
                .enumerate()
                .map(mk(true))
                .chain(nontargets.iter().enumerate().map(mk(false)))
                .collect(),
        }
    }

    pub fn num_targets(&self) -> usize {
        self.trials.iter().filter(|t| t.same_speaker).count()
    }

    pub fn num_nontargets(&self) -> usize {
        self.trials.len() - self.num_targets()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrialParams {
    pub targets_per_speaker: usize,
    pub nontarget_ratio: f64,
    pub seed: u64,
    /// Never pair two utterances of the same dialogue; they share a session.
    pub cross_dialogue: bool,
}

impl Default for TrialParams {
    fn default() -> Self {
        TrialParams {
            targets_per_speaker: 30,
            nontarget_ratio: 1.0,
            seed: 0,
            cross_dialogue: true,
        }
    }
}

fn key(a: usize, b: usize) -> (usize, usize) {
    (a.min(b), a.max(b))
}

/// Samples same-speaker and different-speaker pairs and scores them by cosine.
///
/// Up to `targets_per_speaker` distinct target pairs are drawn per speaker,
/// then `round(nontarget_ratio · targets)` distinct nontarget pairs, both
/// capped by what exists. No unordered pair appears twice. With `groups`,
/// two utterances of the same group (dialogue) are never paired.
pub fn build_trials<R: Rng + ?Sized>(
    embeddings: &Matrix,
    labels: &[usize],
    groups: Option<&[usize]>,
    rng: &mut R,
    targets_per_speaker: usize,
    nontarget_ratio: f64,
) -> Result<TrialSet> {
    if labels.len() != embeddings.rows() {
        return Err(Error::shape("build_trials", embeddings.rows(), labels.len()));
    }
    if let Some(g) = groups.filter(|g| g.len() != labels.len()) {
        return Err(Error::shape("build_trials groups", labels.len(), g.len()));
    }
    if targets_per_speaker == 0 || !(nontarget_ratio > 0.0) || !nontarget_ratio.is_finite() {
        return Err(Error::config("trial counts must be positive"));
    }
    let allowed = |a: usize, b: usize| groups.is_none_or(|g| g[a] != g[b]);
    let mut by_speaker: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, l) in labels.iter().enumerate() {
        by_speaker.entry(*l).or_default().push(i);
    }
    if by_speaker.len() < 2 {
        return Err(Error::config("trials need at least two speakers"));
    }
    let score = |a: usize, b: usize| cosine(embeddings.row(a), embeddings.row(b));

    let mut trials = Vec::new();
    let mut same_speaker_pairs = 0usize;
    for members in by_speaker.values() {
        same_speaker_pairs += members.len() * (members.len() - 1) / 2;
        let pairs: Vec<(usize, usize)> = (0..members.len())
            .flat_map(|i| (i + 1..members.len()).map(move |j| (members[i], members[j])))
            .filter(|&(a, b)| allowed(a, b))
            .collect();
        let take = targets_per_speaker.min(pairs.len());
        for k in index::sample(rng, pairs.len(), take) {
            let (a, b) = pairs[k];
            trials.push(Trial { a, b, same_speaker: true, score: score(a, b) });
        }
    }
    if trials.is_empty() {
        return Err(Error::config("trials need a speaker with two utterances that may be paired"));
    }

    let n = labels.len();
    // different-speaker pairs that share a group are excluded as well
    let mut blocked = 0usize;
    if let Some(g) = groups {
        let mut by_group: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, k) in g.iter().enumerate() {
            by_group.entry(*k).or_default().push(i);
        }
        for members in by_group.values() {
            for (x, &a) in members.iter().enumerate() {
                blocked += members[x + 1..].iter().filter(|&&b| labels[a] != labels[b]).count();
            }
        }
    }
    let available = n * (n - 1) / 2 - same_speaker_pairs - blocked;
    let wanted = ((trials.len() as f64) * nontarget_ratio).round() as usize;
    let wanted = wanted.min(available);
    if available <= 4 * wanted {
        let pairs: Vec<(usize, usize)> = (0..n)
            .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
            .filter(|&(i, j)| labels[i] != labels[j] && allowed(i, j))
            .collect();
        for k in index::sample(rng, pairs.len(), wanted) {
            let (a, b) = pairs[k];
            trials.push(Trial { a, b, same_speaker: false, score: score(a, b) });
        }
    } else {
        let mut seen = HashSet::with_capacity(wanted);
        while seen.len() < wanted {
            let a = rng.random_range(0..n);
            let b = rng.random_range(0..n);
            if labels[a] == labels[b] || !allowed(a, b) || !seen.insert(key(a, b)) {
                continue;
            }
            let (a, b) = key(a, b);
            trials.push(Trial { a, b, same_speaker: false, score: score(a, b) });
        }
    }
    Ok(TrialSet { trials })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EerResult {
    pub eer: f64,
    pub threshold_at_eer: f64,
    pub num_target_trials: usize,
    pub num_nontarget_trials: usize,
}

/// Equal error rate with linear interpolation between the two operating
/// points that bracket `FAR = FRR`. A trial is accepted when `score >= θ`.
pub fn compute_eer(trials: &TrialSet) -> Result<EerResult> {
    let nt = trials.num_targets();
    let nn = trials.num_nontargets();
    if nt == 0 || nn == 0 {
        return Err(Error::config("EER needs at least one target and one nontarget trial"));
    }
    if trials.trials.iter().any(|t| !t.score.is_finite()) {
        return Err(Error::numeric("trial scores must be finite"));
    }
    let mut scored: Vec<(f64, bool)> = trials.trials.iter().map(|t| (t.score, t.same_speaker)).collect();
    scored.sort_by(|x, y| x.0.total_cmp(&y.0));

    // operating points at each unique score, then θ = +∞
    let mut points: Vec<(f64, f64, f64)> = Vec::new(); // (θ, FAR, FRR)
    let (mut targets_below, mut nontargets_below) = (0usize, 0usize);
    let mut i = 0;
    while i < scored.len() {
        let theta = scored[i].0;
        points.push((
            theta,
            (nn - nontargets_below) as f64 / nn as f64,
            targets_below as f64 / nt as f64,
        ));
        while i < scored.len() && scored[i].0 == theta {
            if scored[i].1 {
                targets_below += 1;
            } else {
                nontargets_below += 1;
            }
            i += 1;
        }
    }
    points.push((f64::INFINITY, 0.0, 1.0));

    let k = points
        .iter()
        .position(|&(_, far, frr)| far - frr <= 0.0)
        .expect("last operating point has FAR < FRR");
    let result = |eer: f64, threshold: f64| EerResult {
        eer,
        threshold_at_eer: threshold,
        num_target_trials: nt,
        num_nontarget_trials: nn,
    };
    let (t1, far1, frr1) = points[k];
    if k == 0 || far1 == frr1 {
        return Ok(result(far1, if t1.is_finite() { t1 } else { points[k - 1].0 }));
    }
    let (t0, far0, frr0) = points[k - 1];
    let d0 = far0 - frr0;
    let d1 = far1 - frr1;
    let alpha = d0 / (d0 - d1);
    let eer = far0 + alpha * (far1 - far0);
    let threshold = if t1.is_finite() { t0 + alpha * (t1 - t0) } else { t0 };
    Ok(result(eer, threshold))
}

/// Probability that a random clean dialogue outweighs a random contaminated
/// one, ties counting one half.
pub fn rejection_auc(weights: &[f64], contaminated: &[bool]) -> Result<f64> {
    if weights.len() != contaminated.len() {
        return Err(Error::shape("rejection_auc", weights.len(), contaminated.len()));
    }
    let clean: Vec<f64> = weights.iter().zip(contaminated).filter(|(_, c)| !**c).map(|(w, _)| *w).collect();
    let noisy: Vec<f64> = weights.iter().zip(contaminated).filter(|(_, c)| **c).map(|(w, _)| *w).collect();
    if clean.is_empty() || noisy.is_empty() {
        return Err(Error::config("rejection AUC needs both clean and contaminated dialogues"));
    }
    let mut wins = 0.0;
    for c in &clean {
        for n in &noisy {
            if c > n {
                wins += 1.0;
            } else if c == n {
                wins += 0.5;
            }
        }
    }
    Ok(wins / (clean.len() * noisy.len()) as f64)
}

/// `(base − new) / base`; `None` when the baseline is zero.
pub fn relative_improvement(base: f64, new: f64) -> Option<f64> {
    (base > 0.0).then(|| (base - new) / base)
}

/// Builds trials from `params` and computes the EER in one go. `dialogues`
/// is honored when `params.cross_dialogue` is set.
pub fn evaluate_embeddings(
    embeddings: &Matrix,
    labels: &[usize],
    dialogues: &[usize],
    params: &TrialParams,
) -> Result<EerResult> {
    let mut rng = stream(params.seed, "trials");
    let groups = params.cross_dialogue.then_some(dialogues);
    let trials = build_trials(
        embeddings,
        labels,
        groups,
        &mut rng,
        params.targets_per_speaker,
        params.nontarget_ratio,
    )?;
    compute_eer(&trials)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub eer: f64,
    pub threshold: f64,
    pub n_target: usize,
    pub n_nontarget: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub rejection_auc: Option<f64>,
}

impl EvalReport {
    pub fn new(r: &EerResult, rejection_auc: Option<f64>) -> Self {
        EvalReport {
            eer: r.eer,
            threshold: r.threshold_at_eer,
            n_target: r.num_target_trials,
            n_nontarget: r.num_nontarget_trials,
            rejection_auc,
        }
    }
}
