//! GRU encoder–decoder: a stacked bidirectional encoder producing a
//! diagonal-Gaussian posterior, and a decoder that receives the latent
//! sample as input at every step.
//!
//! Batches of different-length sequences run together time-major. Rows
//! whose sequence has ended have their update gate multiplied by zero,
//! which leaves their state bit-for-bit unchanged, so each row sees
//! exactly its own recurrence.

mod gru;
mod network;
mod params;

use thiserror::Error;

use crate::autodiff::Tensor;
use crate::scalar::Scalar;

pub use gru::{gru_cell_step, GruVars};
pub use network::{decode, decode_batch, encode, encode_all, encode_batch, frame_squared_error, sample_latent, sample_latent_batch, Packing};
pub use params::{DecoderParams, DecoderVars, EncoderParams, EncoderVars, GruCellParams, Model, ModelConfig, ModelVars};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SegmentError {
    #[error("segment {id}: frames must be a non-empty [T, D] matrix, got shape {shape:?}")]
    NotMatrix { id: String, shape: Vec<usize> },
    #[error("segment {id}: non-finite value at frame {frame}, dim {dim}")]
    NonFinite { id: String, frame: usize, dim: usize },
}

/// A variable-length sequence of feature frames.
#[derive(Debug, Clone, PartialEq)]
pub struct Segment<S> {
    pub id: String,
    pub label: Option<String>,
    frames: Tensor<S>,
}

impl<S: Scalar> Segment<S> {
    pub fn new(id: impl Into<String>, label: Option<String>, frames: Tensor<S>) -> Result<Self, SegmentError> {
        let id = id.into();
        if frames.shape().len() != 2 {
            return Err(SegmentError::NotMatrix { id, shape: frames.shape().to_vec() });
        }
        if let Some(i) = frames.data().iter().position(|x| !x.is_finite()) {
            let d = frames.cols();
            return Err(SegmentError::NonFinite { id, frame: i / d, dim: i % d });
        }
        Ok(Self { id, label, frames })
    }

    pub fn frames(&self) -> &Tensor<S> {
        &self.frames
    }

    /// Number of frames T.
    pub fn len(&self) -> usize {
        self.frames.rows()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Feature dimension D.
    pub fn dim(&self) -> usize {
        self.frames.cols()
    }

    pub fn frame(&self, t: usize) -> &[S] {
        self.frames.row(t)
    }

    /// Same frames in reverse time order.
    pub fn reversed(&self) -> Self {
        let (t, d) = (self.len(), self.dim());
        let frames = Tensor::from_fn(&[t, d], |i| self.frames.data()[(t - 1 - i / d) * d + i % d]);
        Self { id: self.id.clone(), label: self.label.clone(), frames }
    }
}

/// Diagonal Gaussian `q(z | x)`; the mean is the embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct Posterior<S> {
    pub mean: Vec<S>,
    pub log_variance: Vec<S>,
}

impl<S: Scalar> Posterior<S> {
    pub fn latent_dim(&self) -> usize {
        self.mean.len()
    }

    pub fn variance(&self) -> Vec<S> {
        self.log_variance.iter().map(|v| v.exp()).collect()
    }
}
