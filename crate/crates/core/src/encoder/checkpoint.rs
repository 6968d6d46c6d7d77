use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{AdamState, EncoderParams};
use crate::error::{Error, Result};
use crate::losses::LossScaleParams;

pub const CHECKPOINT_FORMAT: &str = "dialogue-sid-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Everything needed to resume or evaluate a model.
///
/// The optimizer covers the encoder parameters followed by the loss scale
/// `(w, b)` and the rejection temperature, in that order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub step: u64,
    pub encoder: EncoderParams,
    pub scale: LossScaleParams,
    pub temperature: f64,
    pub threshold: f64,
    pub optimizer: AdamState,
}

impl Checkpoint {
    pub fn new(
        encoder: EncoderParams,
        scale: LossScaleParams,
        temperature: f64,
        threshold: f64,
        optimizer: AdamState,
    ) -> Self {
        Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            step: optimizer.step,
            encoder,
            scale,
            temperature,
            threshold,
            optimizer,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(text)?;
        if ck.format != CHECKPOINT_FORMAT || ck.version != CHECKPOINT_VERSION {
            return Err(Error::config(format!(
                "unsupported checkpoint {} v{}",
                ck.format, ck.version
            )));
        }
        let expected = ck.encoder.len() + 3;
        if ck.optimizer.len() != expected {
            return Err(Error::shape("Checkpoint::from_json", expected, ck.optimizer.len()));
        }
        // re-validate shapes and finiteness
        let encoder = EncoderParams::from_vec(*ck.encoder.hyper(), ck.encoder.as_slice().to_vec())?;
        if !ck.optimizer.moments_finite() || !ck.temperature.is_finite() {
            return Err(Error::numeric("checkpoint contains non-finite values"));
        }
        Ok(Checkpoint { encoder, ..ck })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Checkpoint::from_json(&fs::read_to_string(path)?)
    }
}
