//! Compactness-based rejection of multi-speaker dialogues.
//!
//! Compactness is the mean pairwise cosine similarity inside a dialogue. Soft
//! rejection scales a dialogue's losses by `σ(T·(C − t))`; hard rejection
//! drops dialogues with `C <= t` from the loss and from every denominator.
//! Compactness is a constant as far as gradients go: weights never
//! backpropagate into the embeddings.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{compute_loss, cosine, EmbeddingBatch, LossKind, LossScaleParams, PerUtteranceLoss, ScaleGrad};
use crate::numeric::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RejectionMode {
    Off,
    Soft,
    Hard,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RejectionConfig {
    pub mode: RejectionMode,
    pub threshold: f64,
    /// Initial value when learnable.
    pub temperature: f64,
    pub temperature_learnable: bool,
}

impl Default for RejectionConfig {
    fn default() -> Self {
        RejectionConfig {
            mode: RejectionMode::Soft,
            threshold: 0.5,
            temperature: 10.0,
            temperature_learnable: true,
        }
    }
}

impl RejectionConfig {
    pub fn off() -> Self {
        RejectionConfig {
            mode: RejectionMode::Off,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(-1.0..=1.0).contains(&self.threshold) {
            return Err(Error::config(format!("rejection threshold {} outside [-1, 1]", self.threshold)));
        }
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(Error::config(format!("temperature must be positive, got {}", self.temperature)));
        }
        Ok(())
    }
}

/// Per-dialogue outcome of rejection for one batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RejectionReport {
    pub compactness: Vec<f64>,
    pub weights: Vec<f64>,
    pub rejected_count: usize,
    /// `∂L/∂T`; zero outside soft mode.
    pub temperature_grad: f64,
}

impl RejectionReport {
    pub fn mean_compactness(&self) -> f64 {
        mean(&self.compactness)
    }

    pub fn mean_weight(&self) -> f64 {
        mean(&self.weights)
    }

    pub fn rejected_fraction(&self) -> f64 {
        self.rejected_count as f64 / self.weights.len().max(1) as f64
    }
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// One line of the per-step diagnostics stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RejectionRecord {
    pub step: u64,
    pub compactness: Vec<f64>,
    pub weights: Vec<f64>,
    pub rejected_count: usize,
    #[serde(rename = "T")]
    pub temperature: f64,
}

impl RejectionRecord {
    pub fn new(step: u64, report: &RejectionReport, temperature: f64) -> Self {
        RejectionRecord {
            step,
            compactness: report.compactness.clone(),
            weights: report.weights.clone(),
            rejected_count: report.rejected_count,
            temperature,
        }
    }
}

/// Mean pairwise cosine similarity inside each dialogue.
pub fn compactness(batch: &EmbeddingBatch) -> Vec<f64> {
    let m = batch.utter_per_dialogue();
    let pairs = (m * (m - 1)) as f64;
    (0..batch.n_dialogues())
        .map(|i| {
            let mut s = 0.0;
            for j in 0..m {
                for k in (0..m).filter(|&k| k != j) {
                    s += cosine(batch.get(i, j), batch.get(i, k));
                }
            }
            s / pairs
        })
        .collect()
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SoftWeights {
    pub weights: Vec<f64>,
    /// `∂L/∂T = Σᵢ σ'(T(Cᵢ − t))·(Cᵢ − t)·Σⱼ ℓᵢⱼ`.
    pub temperature_grad: f64,
}

/// `wᵢ = σ(T·(Cᵢ − t))`. `dialogue_losses[i]` is `Σⱼ ℓᵢⱼ`, needed only for `∂L/∂T`.
pub fn soft_weights(c: &[f64], cfg: &RejectionConfig, dialogue_losses: &[f64]) -> Result<SoftWeights> {
    if cfg.mode != RejectionMode::Soft {
        return Err(Error::config("soft_weights requires soft rejection mode"));
    }
    if dialogue_losses.len() != c.len() {
        return Err(Error::shape("soft_weights", c.len(), dialogue_losses.len()));
    }
    let mut weights = Vec::with_capacity(c.len());
    let mut temperature_grad = 0.0;
    for (ci, li) in c.iter().zip(dialogue_losses) {
        let margin = ci - cfg.threshold;
        let w = sigmoid(cfg.temperature * margin);
        weights.push(w);
        temperature_grad += w * (1.0 - w) * margin * li;
    }
    Ok(SoftWeights {
        weights,
        temperature_grad,
    })
}

/// `wᵢ = 1` if `Cᵢ > t`, else 0. Returns the weights and how many were rejected.
pub fn hard_weights(c: &[f64], cfg: &RejectionConfig) -> Result<(Vec<f64>, usize)> {
    if cfg.mode != RejectionMode::Hard {
        return Err(Error::config("hard_weights requires hard rejection mode"));
    }
    let w: Vec<f64> = c.iter().map(|ci| if *ci > cfg.threshold { 1.0 } else { 0.0 }).collect();
    let rejected = w.iter().filter(|v| **v == 0.0).count();
    Ok((w, rejected))
}

#[derive(Debug, Clone)]
pub struct WeightedLoss {
    pub loss: f64,
    pub embedding_grad: Matrix,
    pub scale_grad: Option<ScaleGrad>,
}

/// Compensated summation so the total does not depend on accumulation order
/// beyond rounding of the final result.
fn neumaier_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut sum = 0.0_f64;
    let mut comp = 0.0_f64;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

/// `L = Σᵢⱼ wᵢ·ℓᵢⱼ` and its gradient with the weights held constant.
pub fn weighted_batch_loss(per_utt: &PerUtteranceLoss, weights: &[f64]) -> Result<WeightedLoss> {
    let n = per_utt.values.rows();
    if weights.len() != n {
        return Err(Error::shape("weighted_batch_loss", n, weights.len()));
    }
    let loss = neumaier_sum(
        (0..n).flat_map(|i| per_utt.values.row(i).iter().map(move |v| weights[i] * v)),
    );
    let mut grad = Matrix::zeros(per_utt.grad.rows(), per_utt.grad.cols());
    for (g, w) in per_utt.dialogue_grads.iter().zip(weights) {
        if *w != 0.0 {
            grad.add_scaled(g, *w)?;
        }
    }
    let scale_grad = per_utt.scale_grads.as_ref().map(|sg| {
        sg.iter().zip(weights).fold(ScaleGrad::default(), |acc, (g, w)| ScaleGrad {
            dw: acc.dw + w * g.dw,
            db: acc.db + w * g.db,
        })
    });
    Ok(WeightedLoss {
        loss,
        embedding_grad: grad,
        scale_grad,
    })
}

/// Full per-batch objective: loss, rejection weights and weighted total.
#[derive(Debug, Clone)]
pub struct BatchObjective {
    pub per_utterance: PerUtteranceLoss,
    pub report: RejectionReport,
    pub weighted: WeightedLoss,
}

/// Evaluates the training objective for one batch under `cfg`.
///
/// Soft mode reweights the plain loss; hard mode additionally removes rejected
/// dialogues from the denominators. Fails with [`Error::BatchSkipped`] when
/// hard rejection leaves fewer than two dialogues.
pub fn batch_objective(
    kind: LossKind,
    batch: &EmbeddingBatch,
    scale: &LossScaleParams,
    cfg: &RejectionConfig,
) -> Result<BatchObjective> {
    let c = compactness(batch);
    let n = batch.n_dialogues();
    let (per_utterance, report) = match cfg.mode {
        RejectionMode::Off => {
            let l = compute_loss(kind, batch, scale, None)?;
            let report = RejectionReport {
                compactness: c,
                weights: vec![1.0; n],
                rejected_count: 0,
                temperature_grad: 0.0,
            };
            (l, report)
        }
        RejectionMode::Soft => {
            let l = compute_loss(kind, batch, scale, None)?;
            let sw = soft_weights(&c, cfg, &l.dialogue_sums())?;
            let rejected = c.iter().filter(|ci| **ci <= cfg.threshold).count();
            let report = RejectionReport {
                compactness: c,
                weights: sw.weights,
                rejected_count: rejected,
                temperature_grad: sw.temperature_grad,
            };
            (l, report)
        }
        RejectionMode::Hard => {
            let (w, rejected) = hard_weights(&c, cfg)?;
            let mask: Vec<bool> = w.iter().map(|v| *v > 0.0).collect();
            let l = compute_loss(kind, batch, scale, Some(&mask))?;
            let report = RejectionReport {
                compactness: c,
                weights: w,
                rejected_count: rejected,
                temperature_grad: 0.0,
            };
            (l, report)
        }
    };
    let weighted = weighted_batch_loss(&per_utterance, &report.weights)?;
    Ok(BatchObjective {
        per_utterance,
        report,
        weighted,
    })
}
