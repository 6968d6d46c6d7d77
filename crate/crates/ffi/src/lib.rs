//! C ABI for `dialogue-sid`.
//!
//! Every fallible call returns a [`DsidStatus`]; on failure a message is
//! available from [`dsid_last_error`] until the next failing call on the same
//! thread. Handles are opaque, created by `*_generate` / `*_load` and released
//! with the matching `*_free`.
//!
//! # Safety
//!
//! Pointer arguments must be non-null and valid for the stated lengths unless
//! documented otherwise. Handles must come from this library and must not be
//! used after being freed.
#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;
use std::slice;

use dialogue_sid::corpus::{generate_corpus, Corpus, CorpusSpec};
use dialogue_sid::encoder::{Checkpoint, EncoderParams, UtteranceFeatures};
use dialogue_sid::eval::{compute_eer, TrialSet};
use dialogue_sid::losses::{compute_loss, EmbeddingBatch, LossKind, LossScaleParams};
use dialogue_sid::numeric::Matrix;
use dialogue_sid::rejection::{soft_weights, RejectionConfig, RejectionMode};
use dialogue_sid::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DsidStatus {
    Ok = 0,
    NullPointer = 1,
    Config = 2,
    Numeric = 3,
    Io = 4,
    Shape = 5,
    Panic = 6,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DsidLossKind {
    Ava = 0,
    Ge2e = 1,
    Aproto = 2,
}

/// Synthetic dialogue corpus.
pub struct DsidCorpus(Corpus);

/// Trained utterance encoder.
pub struct DsidEncoder(EncoderParams);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn fail(e: Error) -> DsidStatus {
    let status = match &e {
        Error::Config(_) | Error::Json(_) | Error::BatchSkipped { .. } => DsidStatus::Config,
        Error::Numeric(_) => DsidStatus::Numeric,
        Error::Io(_) => DsidStatus::Io,
        Error::Shape { .. } => DsidStatus::Shape,
    };
    set_error(e.to_string());
    status
}

fn null(what: &str) -> DsidStatus {
    set_error(format!("null pointer: {what}"));
    DsidStatus::NullPointer
}

fn guard(f: impl FnOnce() -> DsidStatus) -> DsidStatus {
    catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|_| {
        set_error("internal panic".into());
        DsidStatus::Panic
    })
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, DsidStatus> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p).to_str().map_err(|_| {
        set_error(format!("{what} is not valid UTF-8"));
        DsidStatus::Config
    })
}

unsafe fn slice_arg<'a>(p: *const f64, len: usize, what: &str) -> Result<&'a [f64], DsidStatus> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(slice::from_raw_parts(p, len))
}

macro_rules! tri {
    ($e:expr) => {
        match $e {
            Ok(v) => v,
            Err(s) => return s,
        }
    };
}

macro_rules! core {
    ($e:expr) => {
        match $e {
            Ok(v) => v,
            Err(e) => return fail(e),
        }
    };
}

/// Message of the last failure on this thread, or NULL. Valid until the next failing call.
#[no_mangle]
pub extern "C" fn dsid_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Generates a corpus from a JSON corpus spec; `"{}"` gives the defaults.
#[no_mangle]
pub unsafe extern "C" fn dsid_corpus_generate(spec_json: *const c_char, out: *mut *mut DsidCorpus) -> DsidStatus {
    guard(|| {
        if out.is_null() {
            return null("out");
        }
        let text = tri!(str_arg(spec_json, "spec_json"));
        let spec: CorpusSpec = core!(serde_json::from_str(text).map_err(Error::from));
        let corpus = core!(generate_corpus(&spec));
        *out = Box::into_raw(Box::new(DsidCorpus(corpus)));
        DsidStatus::Ok
    })
}

#[no_mangle]
pub unsafe extern "C" fn dsid_corpus_load(path: *const c_char, out: *mut *mut DsidCorpus) -> DsidStatus {
    guard(|| {
        if out.is_null() {
            return null("out");
        }
        let path = PathBuf::from(tri!(str_arg(path, "path")));
        let corpus = core!(Corpus::load(&path));
        *out = Box::into_raw(Box::new(DsidCorpus(corpus)));
        DsidStatus::Ok
    })
}

#[no_mangle]
pub unsafe extern "C" fn dsid_corpus_save(corpus: *const DsidCorpus, path: *const c_char) -> DsidStatus {
    guard(|| {
        let Some(corpus) = corpus.as_ref() else {
            return null("corpus");
        };
        let path = PathBuf::from(tri!(str_arg(path, "path")));
        core!(corpus.0.save(&path));
        DsidStatus::Ok
    })
}

/// Number of dialogues, or 0 for NULL.
#[no_mangle]
pub unsafe extern "C" fn dsid_corpus_num_dialogues(corpus: *const DsidCorpus) -> usize {
    corpus.as_ref().map_or(0, |c| c.0.len())
}

/// Frame count and feature width of every utterance.
#[no_mangle]
pub unsafe extern "C" fn dsid_corpus_shape(
    corpus: *const DsidCorpus,
    utterances_per_dialogue: *mut usize,
    frames: *mut usize,
    feature_dim: *mut usize,
) -> DsidStatus {
    let Some(corpus) = corpus.as_ref() else {
        return null("corpus");
    };
    if utterances_per_dialogue.is_null() || frames.is_null() || feature_dim.is_null() {
        return null("output");
    }
    let spec = &corpus.0.spec;
    *utterances_per_dialogue = spec.utterances_per_dialogue;
    *frames = spec.frames;
    *feature_dim = spec.feature_dim;
    DsidStatus::Ok
}

/// Ground truth of one dialogue: `speakers` receives `utterances_per_dialogue` ids.
#[no_mangle]
pub unsafe extern "C" fn dsid_corpus_dialogue(
    corpus: *const DsidCorpus,
    index: usize,
    speakers: *mut usize,
    speakers_len: usize,
    contaminated: *mut bool,
) -> DsidStatus {
    guard(|| {
        let Some(corpus) = corpus.as_ref() else {
            return null("corpus");
        };
        if speakers.is_null() || contaminated.is_null() {
            return null("output");
        }
        let Some(d) = corpus.0.dialogues.get(index) else {
            set_error(format!("dialogue {index} out of range"));
            return DsidStatus::Config;
        };
        if speakers_len != d.true_speaker_ids.len() {
            set_error(format!("speakers buffer holds {speakers_len}, need {}", d.true_speaker_ids.len()));
            return DsidStatus::Shape;
        }
        slice::from_raw_parts_mut(speakers, speakers_len).copy_from_slice(&d.true_speaker_ids);
        *contaminated = d.is_contaminated;
        DsidStatus::Ok
    })
}

/// Copies one utterance's frames (row-major, `frames × feature_dim`).
#[no_mangle]
pub unsafe extern "C" fn dsid_corpus_utterance(
    corpus: *const DsidCorpus,
    dialogue: usize,
    slot: usize,
    out: *mut f64,
    out_len: usize,
) -> DsidStatus {
    guard(|| {
        let Some(corpus) = corpus.as_ref() else {
            return null("corpus");
        };
        if out.is_null() {
            return null("out");
        }
        let Some(u) = corpus.0.dialogues.get(dialogue).and_then(|d| d.utterances.get(slot)) else {
            set_error(format!("utterance ({dialogue}, {slot}) out of range"));
            return DsidStatus::Config;
        };
        let values = u.values().as_slice();
        if out_len != values.len() {
            set_error(format!("buffer holds {out_len}, need {}", values.len()));
            return DsidStatus::Shape;
        }
        slice::from_raw_parts_mut(out, out_len).copy_from_slice(values);
        DsidStatus::Ok
    })
}

#[no_mangle]
pub unsafe extern "C" fn dsid_corpus_free(corpus: *mut DsidCorpus) {
    if !corpus.is_null() {
        drop(Box::from_raw(corpus));
    }
}

/// Loads the encoder stored in a training checkpoint.
#[no_mangle]
pub unsafe extern "C" fn dsid_encoder_load(checkpoint_path: *const c_char, out: *mut *mut DsidEncoder) -> DsidStatus {
    guard(|| {
        if out.is_null() {
            return null("out");
        }
        let path = PathBuf::from(tri!(str_arg(checkpoint_path, "checkpoint_path")));
        let ck = core!(Checkpoint::load(&path));
        *out = Box::into_raw(Box::new(DsidEncoder(ck.encoder)));
        DsidStatus::Ok
    })
}

#[no_mangle]
pub unsafe extern "C" fn dsid_encoder_input_dim(encoder: *const DsidEncoder) -> usize {
    encoder.as_ref().map_or(0, |e| e.0.hyper().input_dim)
}

#[no_mangle]
pub unsafe extern "C" fn dsid_encoder_embed_dim(encoder: *const DsidEncoder) -> usize {
    encoder.as_ref().map_or(0, |e| e.0.hyper().embed_dim)
}

/// Embeds one utterance given as `frames × dim` row-major features.
#[no_mangle]
pub unsafe extern "C" fn dsid_encoder_encode(
    encoder: *const DsidEncoder,
    features: *const f64,
    frames: usize,
    dim: usize,
    out: *mut f64,
    out_len: usize,
) -> DsidStatus {
    guard(|| {
        let Some(encoder) = encoder.as_ref() else {
            return null("encoder");
        };
        if out.is_null() {
            return null("out");
        }
        let Some(total) = frames.checked_mul(dim) else {
            set_error("frames × dim overflows".into());
            return DsidStatus::Shape;
        };
        let x = tri!(slice_arg(features, total, "features"));
        let m = core!(Matrix::from_vec(frames, dim, x.to_vec()));
        let u = core!(UtteranceFeatures::new(m));
        let emb = core!(encoder.0.encode(&u));
        if out_len != emb.len() {
            set_error(format!("buffer holds {out_len}, need {}", emb.len()));
            return DsidStatus::Shape;
        }
        slice::from_raw_parts_mut(out, out_len).copy_from_slice(&emb);
        DsidStatus::Ok
    })
}

#[no_mangle]
pub unsafe extern "C" fn dsid_encoder_free(encoder: *mut DsidEncoder) {
    if !encoder.is_null() {
        drop(Box::from_raw(encoder));
    }
}

/// Equal error rate of target and nontarget score lists.
#[no_mangle]
pub unsafe extern "C" fn dsid_compute_eer(
    targets: *const f64,
    num_targets: usize,
    nontargets: *const f64,
    num_nontargets: usize,
    eer: *mut f64,
    threshold: *mut f64,
) -> DsidStatus {
    guard(|| {
        if eer.is_null() || threshold.is_null() {
            return null("output");
        }
        let t = tri!(slice_arg(targets, num_targets, "targets"));
        let n = tri!(slice_arg(nontargets, num_nontargets, "nontargets"));
        let r = core!(compute_eer(&TrialSet::from_scores(t, n)));
        *eer = r.eer;
        *threshold = r.threshold_at_eer;
        DsidStatus::Ok
    })
}

/// Summed batch loss of `n_dialogues × utterances` embeddings, rows grouped by dialogue.
/// `kind` is a [`DsidLossKind`] value; `w`/`b` are ignored by the all-versus-all loss.
#[no_mangle]
pub unsafe extern "C" fn dsid_batch_loss(
    kind: i32,
    embeddings: *const f64,
    n_dialogues: usize,
    utterances: usize,
    dim: usize,
    w: f64,
    b: f64,
    loss: *mut f64,
) -> DsidStatus {
    guard(|| {
        if loss.is_null() {
            return null("loss");
        }
        let Some(total) = n_dialogues.checked_mul(utterances).and_then(|r| r.checked_mul(dim)) else {
            set_error("batch size overflows".into());
            return DsidStatus::Shape;
        };
        let x = tri!(slice_arg(embeddings, total, "embeddings"));
        let m = core!(Matrix::from_vec(n_dialogues * utterances, dim, x.to_vec()));
        let batch = core!(EmbeddingBatch::new(n_dialogues, utterances, m));
        let kind = match kind {
            k if k == DsidLossKind::Ava as i32 => LossKind::Ava,
            k if k == DsidLossKind::Ge2e as i32 => LossKind::Ge2e,
            k if k == DsidLossKind::Aproto as i32 => LossKind::Aproto,
            other => {
                set_error(format!("unknown loss kind {other}"));
                return DsidStatus::Config;
            }
        };
        let l = core!(compute_loss(kind, &batch, &LossScaleParams { w, b }, None));
        *loss = l.total();
        DsidStatus::Ok
    })
}

/// Soft rejection weights for per-dialogue compactness values.
#[no_mangle]
pub unsafe extern "C" fn dsid_soft_weights(
    compactness: *const f64,
    len: usize,
    threshold: f64,
    temperature: f64,
    out: *mut f64,
) -> DsidStatus {
    guard(|| {
        if out.is_null() && len > 0 {
            return null("out");
        }
        let c = tri!(slice_arg(compactness, len, "compactness"));
        let cfg = RejectionConfig {
            mode: RejectionMode::Soft,
            threshold,
            temperature,
            temperature_learnable: false,
        };
        core!(cfg.validate());
        let w = core!(soft_weights(c, &cfg, &vec![0.0; len]));
        if len > 0 {
            slice::from_raw_parts_mut(out, len).copy_from_slice(&w.weights);
        }
        DsidStatus::Ok
    })
}
