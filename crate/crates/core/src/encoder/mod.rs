//! Utterance encoder: a gated recurrent stack followed by a linear projection,
//! with hand-derived reverse-mode gradients and an Adam optimizer.

mod adam;
mod checkpoint;
mod gru;

pub use adam::{AdamConfig, AdamState};
pub use checkpoint::{Checkpoint, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
pub use gru::{EncoderHyper, EncoderParams, EncoderShape, ForwardCache};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::Matrix;

/// Frame-level features of one utterance, `frames × dim`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtteranceFeatures {
    values: Matrix,
}

impl UtteranceFeatures {
    pub fn new(values: Matrix) -> Result<Self> {
        if values.rows() == 0 || values.cols() == 0 {
            return Err(Error::config("utterance needs at least one frame and one feature"));
        }
        if !values.is_finite() {
            return Err(Error::numeric("utterance features contain non-finite values"));
        }
        Ok(UtteranceFeatures { values })
    }

    pub fn from_frames(frames: &[Vec<f64>]) -> Result<Self> {
        UtteranceFeatures::new(Matrix::from_rows(frames)?)
    }

    pub fn frames(&self) -> usize {
        self.values.rows()
    }

    pub fn dim(&self) -> usize {
        self.values.cols()
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        self.values.row(t)
    }

    pub fn values(&self) -> &Matrix {
        &self.values
    }
}
