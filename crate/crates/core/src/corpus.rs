//! Synthetic dialogue corpora with ground-truth speakers and controllable
//! multi-speaker contamination, plus episodic batch sampling.
//!
//! A corpus lives in a "world": a fixed random lift from the low-dimensional
//! voice space to feature space and a pool of speakers. The world depends only
//! on `world_seed` (defaulting to `seed`), and speakers are drawn in order, so
//! two corpora sharing a world seed share the lift and every common speaker.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::encoder::UtteranceFeatures;
use crate::error::{Error, Result};
use crate::numeric::{norm, Matrix};
use crate::rng::{stream, Rng as StreamRng};

pub const CORPUS_FORMAT: &str = "dialogue-sid-corpus";
pub const CORPUS_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSpec {
    pub num_speakers: usize,
    pub num_dialogues: usize,
    pub utterances_per_dialogue: usize,
    pub frames: usize,
    pub feature_dim: usize,
    pub voice_dim: usize,
    pub contamination_rate: f64,
    pub channel_noise_std: f64,
    pub frame_noise_std: f64,
    pub intra_speaker_std: f64,
    /// Offset shared by every utterance of a dialogue (device and room).
    pub session_noise_std: f64,
    pub seed: u64,
    /// Seed of the speaker pool and lift; `None` means `seed`.
    pub world_seed: Option<u64>,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec {
            num_speakers: 64,
            num_dialogues: 2000,
            utterances_per_dialogue: 3,
            frames: 20,
            feature_dim: 16,
            voice_dim: 8,
            contamination_rate: 0.3,
            channel_noise_std: 0.3,
            frame_noise_std: 0.5,
            intra_speaker_std: 0.1,
            session_noise_std: 0.45,
            seed: 0,
            world_seed: None,
        }
    }
}

impl CorpusSpec {
    pub fn world_seed(&self) -> u64 {
        self.world_seed.unwrap_or(self.seed)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.contamination_rate) {
            return Err(Error::config(format!(
                "contamination rate {} outside [0, 1]",
                self.contamination_rate
            )));
        }
        if self.num_speakers < 2 && self.contamination_rate > 0.0 {
            return Err(Error::config("contamination needs at least two speakers"));
        }
        if self.num_speakers == 0 || self.num_dialogues == 0 {
            return Err(Error::config("corpus needs at least one speaker and one dialogue"));
        }
        if self.utterances_per_dialogue < 2 {
            return Err(Error::config("dialogues need at least two utterances"));
        }
        if self.frames == 0 || self.feature_dim == 0 || self.voice_dim == 0 {
            return Err(Error::config("frames, feature_dim and voice_dim must be positive"));
        }
        for (name, v) in [
            ("channel_noise_std", self.channel_noise_std),
            ("frame_noise_std", self.frame_noise_std),
            ("intra_speaker_std", self.intra_speaker_std),
            ("session_noise_std", self.session_noise_std),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::config(format!("{name} must be a non-negative number")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpeakerModel {
    pub speaker_id: usize,
    /// Unit vector in voice space.
    pub voice_vector: Vec<f64>,
    pub intra_speaker_std: f64,
}

/// Lift and speaker pool shared by every corpus with the same world seed.
#[derive(Debug, Clone)]
pub struct World {
    /// `feature_dim × voice_dim`.
    pub lift: Matrix,
    pub speakers: Vec<SpeakerModel>,
}

impl World {
    pub fn from_spec(spec: &CorpusSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = stream(spec.world_seed(), "world");
        let scale = 1.0 / (spec.voice_dim as f64).sqrt();
        let lift_data = (0..spec.feature_dim * spec.voice_dim)
            .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let lift = Matrix::from_vec(spec.feature_dim, spec.voice_dim, lift_data)?;
        let speakers = (0..spec.num_speakers)
            .map(|id| {
                let mut v: Vec<f64> = (0..spec.voice_dim).map(|_| rng.sample(StandardNormal)).collect();
                let n = norm(&v);
                v.iter_mut().for_each(|x| *x /= n);
                SpeakerModel {
                    speaker_id: id,
                    voice_vector: v,
                    intra_speaker_std: spec.intra_speaker_std,
                }
            })
            .collect();
        Ok(World { lift, speakers })
    }

    /// Embeds an utterance by averaging its frames and applying the
    /// least-squares inverse of the lift: the best possible linear encoder.
    pub fn oracle_encode(&self, u: &UtteranceFeatures) -> Result<Vec<f64>> {
        let (d, k) = (self.lift.rows(), self.lift.cols());
        if u.dim() != d {
            return Err(Error::shape("oracle_encode", d, u.dim()));
        }
        let mut mean = vec![0.0; d];
        for t in 0..u.frames() {
            for (m, v) in mean.iter_mut().zip(u.frame(t)) {
                *m += v / u.frames() as f64;
            }
        }
        // normal equations LᵀL v = Lᵀ y, solved by Cholesky
        let mut gram = vec![0.0; k * k];
        let mut rhs = vec![0.0; k];
        for a in 0..k {
            for b in 0..k {
                gram[a * k + b] = (0..d).map(|r| self.lift.get(r, a) * self.lift.get(r, b)).sum();
            }
            rhs[a] = (0..d).map(|r| self.lift.get(r, a) * mean[r]).sum();
        }
        let mut chol = vec![0.0; k * k];
        for i in 0..k {
            for j in 0..=i {
                let s: f64 = gram[i * k + j] - (0..j).map(|p| chol[i * k + p] * chol[j * k + p]).sum::<f64>();
                if i == j {
                    if s <= 0.0 {
                        return Err(Error::numeric("lift is rank deficient"));
                    }
                    chol[i * k + i] = s.sqrt();
                } else {
                    chol[i * k + j] = s / chol[j * k + j];
                }
            }
        }
        let mut y = vec![0.0; k];
        for i in 0..k {
            y[i] = (rhs[i] - (0..i).map(|p| chol[i * k + p] * y[p]).sum::<f64>()) / chol[i * k + i];
        }
        let mut x = vec![0.0; k];
        for i in (0..k).rev() {
            x[i] = (y[i] - (i + 1..k).map(|p| chol[p * k + i] * x[p]).sum::<f64>()) / chol[i * k + i];
        }
        Ok(x)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dialogue {
    pub dialogue_id: u64,
    pub utterances: Vec<UtteranceFeatures>,
    /// Ground truth; never used by self-supervised training.
    pub true_speaker_ids: Vec<usize>,
    pub is_contaminated: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub spec: CorpusSpec,
    pub dialogues: Vec<Dialogue>,
}

fn normal(std: f64) -> Result<Normal<f64>> {
    Normal::new(0.0, std).map_err(|e| Error::config(format!("bad noise level {std}: {e}")))
}

fn synth_utterance(
    spec: &CorpusSpec,
    world: &World,
    speaker: usize,
    session: &[f64],
    rng: &mut StreamRng,
) -> Result<UtteranceFeatures> {
    let intra = normal(spec.intra_speaker_std)?;
    let channel = normal(spec.channel_noise_std)?;
    let frame = normal(spec.frame_noise_std)?;
    let voice: Vec<f64> = world.speakers[speaker]
        .voice_vector
        .iter()
        .map(|v| v + intra.sample(rng))
        .collect();
    let base: Vec<f64> = (0..spec.feature_dim)
        .map(|r| {
            let lifted: f64 = (0..spec.voice_dim).map(|c| world.lift.get(r, c) * voice[c]).sum();
            lifted + session[r] + channel.sample(rng)
        })
        .collect();
    let mut data = Vec::with_capacity(spec.frames * spec.feature_dim);
    for _ in 0..spec.frames {
        data.extend(base.iter().map(|b| b + frame.sample(rng)));
    }
    UtteranceFeatures::new(Matrix::from_vec(spec.frames, spec.feature_dim, data)?)
}

/// Deterministic corpus for `spec`.
///
/// Each dialogue draws a primary speaker; with probability
/// `contamination_rate` one slot other than the first is re-drawn from a
/// different speaker.
pub fn generate_corpus(spec: &CorpusSpec) -> Result<Corpus> {
    spec.validate()?;
    let world = World::from_spec(spec)?;
    let mut plan_rng = stream(spec.seed, "corpus-plan");
    let mut audio_rng = stream(spec.seed, "corpus-audio");
    let mut session_rng = stream(spec.seed, "corpus-session");
    let session_noise = normal(spec.session_noise_std)?;
    let u = spec.utterances_per_dialogue;
    let mut dialogues = Vec::with_capacity(spec.num_dialogues);
    for id in 0..spec.num_dialogues {
        let primary = plan_rng.random_range(0..spec.num_speakers);
        let mut speakers = vec![primary; u];
        let contaminate = plan_rng.random_bool(spec.contamination_rate);
        let slot = plan_rng.random_range(1..u);
        let other = if spec.num_speakers > 1 {
            let o = plan_rng.random_range(0..spec.num_speakers - 1);
            if o >= primary {
                o + 1
            } else {
                o
            }
        } else {
            primary
        };
        if contaminate {
            speakers[slot] = other;
        }
        let session: Vec<f64> = (0..spec.feature_dim).map(|_| session_noise.sample(&mut session_rng)).collect();
        let utterances = speakers
            .iter()
            .map(|&s| synth_utterance(spec, &world, s, &session, &mut audio_rng))
            .collect::<Result<Vec<_>>>()?;
        dialogues.push(Dialogue {
            dialogue_id: id as u64,
            utterances,
            true_speaker_ids: speakers,
            is_contaminated: contaminate,
        });
    }
    Ok(Corpus {
        spec: *spec,
        dialogues,
    })
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    spec: CorpusSpec,
}

#[derive(Serialize, Deserialize)]
struct DialogueRecord {
    dialogue_id: u64,
    speakers: Vec<usize>,
    contaminated: bool,
    utterances: Vec<Vec<Vec<f64>>>,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.dialogues.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dialogues.is_empty()
    }

    pub fn contaminated_count(&self) -> usize {
        self.dialogues.iter().filter(|d| d.is_contaminated).count()
    }

    /// Header line followed by one JSON object per dialogue.
    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<()> {
        let header = Header {
            format: CORPUS_FORMAT.to_string(),
            version: CORPUS_VERSION,
            spec: self.spec,
        };
        serde_json::to_writer(&mut out, &header)?;
        out.write_all(b"\n")?;
        for d in &self.dialogues {
            let rec = DialogueRecord {
                dialogue_id: d.dialogue_id,
                speakers: d.true_speaker_ids.clone(),
                contaminated: d.is_contaminated,
                utterances: d
                    .utterances
                    .iter()
                    .map(|u| (0..u.frames()).map(|t| u.frame(t).to_vec()).collect())
                    .collect(),
            };
            serde_json::to_writer(&mut out, &rec)?;
            out.write_all(b"\n")?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(input: R) -> Result<Self> {
        let mut lines = input.lines();
        let header: Header = match lines.next() {
            Some(line) => serde_json::from_str(&line?)?,
            None => return Err(Error::config("corpus file is empty")),
        };
        if header.format != CORPUS_FORMAT || header.version != CORPUS_VERSION {
            return Err(Error::config(format!(
                "unsupported corpus {} v{}",
                header.format, header.version
            )));
        }
        let mut dialogues = Vec::new();
        for line in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: DialogueRecord = serde_json::from_str(&line)?;
            if rec.speakers.len() != rec.utterances.len() || rec.utterances.len() < 2 {
                return Err(Error::config(format!(
                    "dialogue {} has {} utterances and {} speaker labels",
                    rec.dialogue_id,
                    rec.utterances.len(),
                    rec.speakers.len()
                )));
            }
            let mixed = rec.speakers.iter().any(|s| *s != rec.speakers[0]);
            if mixed != rec.contaminated {
                return Err(Error::config(format!(
                    "dialogue {} contamination flag disagrees with its speakers",
                    rec.dialogue_id
                )));
            }
            let utterances = rec
                .utterances
                .iter()
                .map(|frames| UtteranceFeatures::from_frames(frames))
                .collect::<Result<Vec<_>>>()?;
            dialogues.push(Dialogue {
                dialogue_id: rec.dialogue_id,
                utterances,
                true_speaker_ids: rec.speakers,
                is_contaminated: rec.contaminated,
            });
        }
        Ok(Corpus {
            spec: header.spec,
            dialogues,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.write_jsonl(BufWriter::new(File::create(path)?))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Corpus::read_jsonl(BufReader::new(File::open(path)?))
    }

    /// Splits off the last `fraction` of dialogues as a held-out set.
    pub fn split_held_out(&self, fraction: f64) -> Result<(Vec<usize>, Vec<usize>)> {
        if !(0.0..1.0).contains(&fraction) {
            return Err(Error::config(format!("held-out fraction {fraction} outside [0, 1)")));
        }
        let held = ((self.len() as f64) * fraction).round() as usize;
        let cut = self.len() - held;
        Ok(((0..cut).collect(), (cut..self.len()).collect()))
    }

    pub fn utterance(&self, r: UtteranceRef) -> &UtteranceFeatures {
        &self.dialogues[r.dialogue].utterances[r.slot]
    }

    pub fn speaker(&self, r: UtteranceRef) -> usize {
        self.dialogues[r.dialogue].true_speaker_ids[r.slot]
    }

    /// Dialogues as classes, one per listed dialogue index.
    pub fn dialogue_classes(&self, dialogues: &[usize]) -> Vec<Vec<UtteranceRef>> {
        dialogues
            .iter()
            .map(|&d| {
                (0..self.dialogues[d].utterances.len())
                    .map(|slot| UtteranceRef { dialogue: d, slot })
                    .collect()
            })
            .collect()
    }

    /// Ground-truth speakers as classes over the listed dialogues, ordered by speaker id.
    pub fn speaker_classes(&self, dialogues: &[usize]) -> Vec<(usize, Vec<UtteranceRef>)> {
        let mut by_speaker: std::collections::BTreeMap<usize, Vec<UtteranceRef>> = Default::default();
        for &d in dialogues {
            for (slot, s) in self.dialogues[d].true_speaker_ids.iter().enumerate() {
                by_speaker.entry(*s).or_default().push(UtteranceRef { dialogue: d, slot });
            }
        }
        by_speaker.into_iter().collect()
    }

    /// Every utterance of the listed dialogues with its true speaker.
    pub fn labeled_utterances(&self, dialogues: &[usize]) -> Vec<(UtteranceRef, usize)> {
        dialogues
            .iter()
            .flat_map(|&d| {
                self.dialogues[d]
                    .true_speaker_ids
                    .iter()
                    .enumerate()
                    .map(move |(slot, s)| (UtteranceRef { dialogue: d, slot }, *s))
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct UtteranceRef {
    pub dialogue: usize,
    pub slot: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpisodicBatchSpec {
    pub n: usize,
    pub m: usize,
}

impl Default for EpisodicBatchSpec {
    fn default() -> Self {
        EpisodicBatchSpec { n: 32, m: 2 }
    }
}

impl EpisodicBatchSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n < 2 || self.m < 2 {
            return Err(Error::config(format!(
                "batch needs N >= 2 and M >= 2, got N={} M={}",
                self.n, self.m
            )));
        }
        Ok(())
    }
}

/// `N` classes × `M` utterances, row-major in class order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EpisodicBatch {
    pub spec: EpisodicBatchSpec,
    /// Index of each sampled class in the class list it was drawn from.
    pub classes: Vec<usize>,
    pub items: Vec<UtteranceRef>,
}

impl EpisodicBatch {
    pub fn utterances<'a>(&self, corpus: &'a Corpus) -> Vec<&'a UtteranceFeatures> {
        self.items.iter().map(|r| corpus.utterance(*r)).collect()
    }

    pub fn speakers(&self, corpus: &Corpus) -> Vec<usize> {
        self.items.iter().map(|r| corpus.speaker(*r)).collect()
    }
}

/// Samples `N` distinct classes and `M` distinct members of each, without replacement.
pub fn sample_episode<R: Rng + ?Sized>(
    classes: &[Vec<UtteranceRef>],
    spec: EpisodicBatchSpec,
    rng: &mut R,
) -> Result<EpisodicBatch> {
    spec.validate()?;
    let eligible: Vec<usize> = (0..classes.len()).filter(|&c| classes[c].len() >= spec.m).collect();
    if eligible.len() < spec.n {
        return Err(Error::config(format!(
            "need {} classes with at least {} utterances, found {}",
            spec.n,
            spec.m,
            eligible.len()
        )));
    }
    let chosen: Vec<usize> = index::sample(rng, eligible.len(), spec.n)
        .into_iter()
        .map(|i| eligible[i])
        .collect();
    let mut items = Vec::with_capacity(spec.n * spec.m);
    for &c in &chosen {
        let members = &classes[c];
        for k in index::sample(rng, members.len(), spec.m) {
            items.push(members[k]);
        }
    }
    Ok(EpisodicBatch {
        spec,
        classes: chosen,
        items,
    })
}

/// Samples an episode with whole dialogues as classes.
pub fn sample_batch<R: Rng + ?Sized>(corpus: &Corpus, spec: EpisodicBatchSpec, rng: &mut R) -> Result<EpisodicBatch> {
    let all: Vec<usize> = (0..corpus.len()).collect();
    sample_episode(&corpus.dialogue_classes(&all), spec, rng)
}
