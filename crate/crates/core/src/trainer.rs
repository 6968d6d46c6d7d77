//! Training loops: self-supervised pretraining with dialogues as classes and
//! supervised fine-tuning with speakers as classes.
//!
//! One step samples an episode, encodes it, evaluates the (optionally
//! rejection-weighted) loss, backpropagates into the encoder and updates the
//! encoder, the loss scale `(w, b)` and the rejection temperature with a
//! single Adam optimizer.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::corpus::{sample_episode, Corpus, EpisodicBatchSpec, UtteranceRef};
use crate::encoder::{AdamConfig, AdamState, Checkpoint, EncoderParams, EncoderShape};
use crate::error::{Error, Result};
use crate::eval::{evaluate_embeddings, TrialParams};
use crate::losses::{EmbeddingBatch, LossKind, LossScaleParams, MIN_SCALE};
use crate::numeric::Matrix;
use crate::rejection::{
    batch_objective, compactness, hard_weights, RejectionConfig, RejectionMode, RejectionRecord,
};
use crate::rng::stream;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainMode {
    Pretrain,
    Finetune,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: TrainMode,
    /// `None` resolves to AvA for pretraining and GE2E for fine-tuning.
    pub loss_kind: Option<LossKind>,
    pub rejection: RejectionConfig,
    pub batch: EpisodicBatchSpec,
    pub iterations: u64,
    /// Validation cadence in steps; 0 disables periodic validation.
    pub eval_every: u64,
    pub seed: u64,
    pub optimizer: AdamConfig,
    /// Global-norm clip applied to the encoder gradient.
    pub clip_norm: f64,
    pub encoder: EncoderShape,
    pub scale_init: LossScaleParams,
    /// Trailing fraction of dialogues held out for validation EER.
    pub held_out_fraction: f64,
    pub validation: TrialParams,
    /// Keep one [`RejectionRecord`] per step.
    pub diagnostics: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: TrainMode::Pretrain,
            loss_kind: None,
            rejection: RejectionConfig::default(),
            batch: EpisodicBatchSpec::default(),
            iterations: 2000,
            eval_every: 250,
            seed: 0,
            optimizer: AdamConfig::default(),
            clip_norm: 5.0,
            encoder: EncoderShape::default(),
            scale_init: LossScaleParams::default(),
            held_out_fraction: 0.1,
            validation: TrialParams::default(),
            diagnostics: false,
        }
    }
}

impl TrainConfig {
    pub fn loss(&self) -> LossKind {
        self.loss_kind.unwrap_or(match self.mode {
            TrainMode::Pretrain => LossKind::Ava,
            TrainMode::Finetune => LossKind::Ge2e,
        })
    }

    /// Copy with every default made explicit.
    pub fn resolved(&self) -> TrainConfig {
        TrainConfig {
            loss_kind: Some(self.loss()),
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.batch.validate()?;
        self.optimizer.validate()?;
        self.rejection.validate()?;
        if self.mode == TrainMode::Pretrain && self.iterations < 1 {
            return Err(Error::config("pretraining needs at least one iteration"));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::config("clip_norm must be positive"));
        }
        if !(0.0..1.0).contains(&self.held_out_fraction) {
            return Err(Error::config("held_out_fraction must lie in [0, 1)"));
        }
        if !(self.scale_init.w >= MIN_SCALE) {
            return Err(Error::config("initial loss scale w must be >= 1e-6"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRecord {
    pub step: u64,
    pub loss: f64,
    pub mean_compactness: f64,
    pub mean_weight: f64,
    pub rejected_fraction: f64,
    /// Temperature used for this step's weights.
    pub temperature: f64,
    pub temperature_grad: f64,
    pub lr: f64,
    pub val_eer: Option<f64>,
    /// Hard rejection left fewer than two dialogues; no update was made.
    pub skipped: bool,
}

pub const METRICS_HEADER: &str = "step,loss,mean_compactness,mean_weight,rejected_fraction,temperature,lr,val_eer";

/// Writes the metrics CSV; `val_eer` is blank on steps without validation.
pub fn write_metrics_csv<W: Write>(log: &[TrainLogRecord], mut out: W) -> Result<()> {
    writeln!(out, "{METRICS_HEADER}")?;
    for r in log {
        let val = r.val_eer.map(|v| v.to_string()).unwrap_or_default();
        writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.step, r.loss, r.mean_compactness, r.mean_weight, r.rejected_fraction, r.temperature, r.lr, val
        )?;
    }
    out.flush()?;
    Ok(())
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters with the lowest validation EER (the final ones without validation).
    pub best: Checkpoint,
    pub best_val_eer: Option<f64>,
    /// Validation EER before the first update.
    pub initial_val_eer: Option<f64>,
    pub last: Checkpoint,
    pub log: Vec<TrainLogRecord>,
    pub diagnostics: Vec<RejectionRecord>,
}

/// Trainable state: encoder, loss scale and temperature, with one optimizer over all of them.
struct Model {
    encoder: EncoderParams,
    scale: LossScaleParams,
    rejection: RejectionConfig,
    adam: AdamState,
    flat: Vec<f64>,
}

impl Model {
    fn new(encoder: EncoderParams, scale: LossScaleParams, rejection: RejectionConfig, opt: AdamConfig) -> Result<Self> {
        let adam = AdamState::new(opt, encoder.len() + 3)?;
        let flat = vec![0.0; encoder.len() + 3];
        Ok(Model {
            encoder,
            scale,
            rejection,
            adam,
            flat,
        })
    }

    fn checkpoint(&self) -> Checkpoint {
        Checkpoint::new(
            self.encoder.clone(),
            self.scale,
            self.rejection.temperature,
            self.rejection.threshold,
            self.adam.clone(),
        )
    }

    fn update(&mut self, mut enc_grad: Vec<f64>, dw: f64, db: f64, dt: f64, clip: f64) -> Result<()> {
        let norm = enc_grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if norm > clip {
            let s = clip / norm;
            enc_grad.iter_mut().for_each(|g| *g *= s);
        }
        let n = self.encoder.len();
        self.flat[..n].copy_from_slice(self.encoder.as_slice());
        self.flat[n] = self.scale.w;
        self.flat[n + 1] = self.scale.b;
        self.flat[n + 2] = self.rejection.temperature;
        enc_grad.extend_from_slice(&[dw, db, dt]);
        self.adam.step(&mut self.flat, &enc_grad)?;
        self.encoder.as_mut_slice().copy_from_slice(&self.flat[..n]);
        self.scale.w = self.flat[n];
        self.scale.b = self.flat[n + 1];
        self.scale.clamp();
        self.rejection.temperature = self.flat[n + 2].max(MIN_SCALE);
        Ok(())
    }
}

/// Embeddings of a set of dialogues with their ground truth.
#[derive(Debug, Clone)]
pub struct LabeledEmbeddings {
    pub embeddings: Matrix,
    pub speakers: Vec<usize>,
    pub dialogues: Vec<usize>,
}

impl LabeledEmbeddings {
    pub fn eer(&self, params: &TrialParams) -> Result<f64> {
        Ok(evaluate_embeddings(&self.embeddings, &self.speakers, &self.dialogues, params)?.eer)
    }
}

/// Encodes every utterance of the listed dialogues.
pub fn embed_dialogues(encoder: &EncoderParams, corpus: &Corpus, dialogues: &[usize]) -> Result<LabeledEmbeddings> {
    let labeled = corpus.labeled_utterances(dialogues);
    let utts: Vec<_> = labeled.iter().map(|(r, _)| corpus.utterance(*r)).collect();
    Ok(LabeledEmbeddings {
        embeddings: encoder.encode_batch(&utts)?,
        speakers: labeled.iter().map(|(_, s)| *s).collect(),
        dialogues: labeled.iter().map(|(r, _)| r.dialogue).collect(),
    })
}

fn run(
    config: &TrainConfig,
    corpus: &Corpus,
    classes: Vec<Vec<UtteranceRef>>,
    held_out: Vec<usize>,
    mut model: Model,
) -> Result<TrainOutcome> {
    let kind = config.loss();
    let validation = |enc: &EncoderParams| -> Result<Option<f64>> {
        if held_out.is_empty() {
            return Ok(None);
        }
        embed_dialogues(enc, corpus, &held_out)?.eer(&config.validation).map(Some)
    };
    let mut sampler = stream(config.seed, "sampler");
    let learn_temperature =
        model.rejection.mode == RejectionMode::Soft && model.rejection.temperature_learnable;

    let initial_val_eer = validation(&model.encoder)?;
    let mut best = (model.checkpoint(), initial_val_eer);
    let mut log = Vec::with_capacity(config.iterations as usize);
    let mut diagnostics = Vec::new();

    for step in 0..config.iterations {
        let episode = sample_episode(&classes, config.batch, &mut sampler)?;
        let utts = episode.utterances(corpus);
        let (emb, caches) = model.encoder.forward_batch(&utts)?;
        let batch = EmbeddingBatch::new(config.batch.n, config.batch.m, emb)?;
        let lr = model.adam.effective_lr();
        let temperature = model.rejection.temperature;

        let mut record = match batch_objective(kind, &batch, &model.scale, &model.rejection) {
            Ok(obj) => {
                if !obj.weighted.loss.is_finite() {
                    return Err(Error::numeric(format!(
                        "non-finite loss at step {step} (lr {lr}, temperature {temperature}, scale {:?})",
                        model.scale
                    )));
                }
                let grad = model.encoder.backward_batch(&caches, &obj.weighted.embedding_grad)?;
                let sg = obj.weighted.scale_grad.unwrap_or_default();
                let dt = if learn_temperature { obj.report.temperature_grad } else { 0.0 };
                model.update(grad, sg.dw, sg.db, dt, config.clip_norm).map_err(|e| match e {
                    Error::Numeric(msg) => Error::numeric(format!("step {step}: {msg}")),
                    other => other,
                })?;
                if config.diagnostics {
                    diagnostics.push(RejectionRecord::new(step, &obj.report, temperature));
                }
                TrainLogRecord {
                    step,
                    loss: obj.weighted.loss,
                    mean_compactness: obj.report.mean_compactness(),
                    mean_weight: obj.report.mean_weight(),
                    rejected_fraction: obj.report.rejected_fraction(),
                    temperature,
                    temperature_grad: dt,
                    lr,
                    val_eer: None,
                    skipped: false,
                }
            }
            Err(Error::BatchSkipped { .. }) => {
                let c = compactness(&batch);
                let (w, rejected) = hard_weights(&c, &model.rejection)?;
                if config.diagnostics {
                    let report = crate::rejection::RejectionReport {
                        compactness: c.clone(),
                        weights: w.clone(),
                        rejected_count: rejected,
                        temperature_grad: 0.0,
                    };
                    diagnostics.push(RejectionRecord::new(step, &report, temperature));
                }
                TrainLogRecord {
                    step,
                    loss: 0.0,
                    mean_compactness: c.iter().sum::<f64>() / c.len() as f64,
                    mean_weight: w.iter().sum::<f64>() / w.len() as f64,
                    rejected_fraction: rejected as f64 / w.len() as f64,
                    temperature,
                    temperature_grad: 0.0,
                    lr,
                    val_eer: None,
                    skipped: true,
                }
            }
            Err(e) => return Err(e),
        };

        let due = config.eval_every > 0 && (step + 1) % config.eval_every == 0;
        if due || step + 1 == config.iterations {
            record.val_eer = validation(&model.encoder)?;
        }
        if let Some(eer) = record.val_eer {
            if best.1.is_none_or(|b| eer < b) {
                best = (model.checkpoint(), Some(eer));
            }
        }
        log.push(record);
    }

    let last = model.checkpoint();
    let (best, best_val_eer) = match best {
        (ck, Some(e)) => (ck, Some(e)),
        (_, None) => (last.clone(), None),
    };
    Ok(TrainOutcome {
        best,
        best_val_eer,
        initial_val_eer,
        last,
        log,
        diagnostics,
    })
}

/// Self-supervised pretraining: dialogue identity is the only label used.
pub fn pretrain(config: &TrainConfig, corpus: &Corpus) -> Result<TrainOutcome> {
    if config.mode != TrainMode::Pretrain {
        return Err(Error::config("pretrain called with a fine-tuning config"));
    }
    config.validate()?;
    let (train, held_out) = corpus.split_held_out(config.held_out_fraction)?;
    let hyper = config.encoder.with_input(corpus.spec.feature_dim);
    let encoder = EncoderParams::init(hyper, &mut stream(config.seed, "encoder-init"))?;
    let model = Model::new(encoder, config.scale_init, config.rejection, config.optimizer)?;
    run(config, corpus, corpus.dialogue_classes(&train), held_out, model)
}

/// Supervised fine-tuning with ground-truth speakers as classes. Rejection is
/// disabled. `init = None` trains from scratch.
pub fn finetune(config: &TrainConfig, labeled: &Corpus, init: Option<&EncoderParams>) -> Result<TrainOutcome> {
    if config.mode != TrainMode::Finetune {
        return Err(Error::config("finetune called with a pretraining config"));
    }
    config.validate()?;
    let (train, held_out) = labeled.split_held_out(config.held_out_fraction)?;
    let classes: Vec<Vec<UtteranceRef>> = labeled
        .speaker_classes(&train)
        .into_iter()
        .map(|(_, members)| members)
        .collect();
    let eligible = classes.iter().filter(|c| c.len() >= config.batch.m).count();
    if eligible < config.batch.n {
        return Err(Error::config(format!(
            "fine-tuning needs {} speakers with at least {} utterances, found {eligible}",
            config.batch.n, config.batch.m
        )));
    }
    let hyper = config.encoder.with_input(labeled.spec.feature_dim);
    let encoder = match init {
        Some(p) => {
            if *p.hyper() != hyper {
                return Err(Error::config(format!(
                    "initial encoder {:?} does not match configured {:?}",
                    p.hyper(),
                    hyper
                )));
            }
            p.clone()
        }
        None => EncoderParams::init(hyper, &mut stream(config.seed, "encoder-init"))?,
    };
    let model = Model::new(encoder, config.scale_init, RejectionConfig::off(), config.optimizer)?;
    if config.iterations == 0 {
        let ck = model.checkpoint();
        return Ok(TrainOutcome {
            best: ck.clone(),
            best_val_eer: None,
            initial_val_eer: None,
            last: ck,
            log: Vec::new(),
            diagnostics: Vec::new(),
        });
    }
    run(config, labeled, classes, held_out, model)
}
