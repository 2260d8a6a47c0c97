//! Convolutional encoder, recurrent slot attention and dense decoder.
//!
//! All forward computations are recorded on a [`Graph`] so that any scalar
//! objective built from their outputs can be differentiated exactly with
//! [`Graph::backward`].

mod gradcheck;
mod graph;
mod model;
mod params;

pub use gradcheck::{check_gradients, GradCheck};
pub use graph::{resize_forward, Gradients, Graph, Var};
pub use model::{FrameOutput, ModelConfig, SlotModel, VideoVars};
pub use params::{read_checkpoint, write_checkpoint, Checkpoint, ModelParams, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum SlotError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("non-finite gradient for parameter {0}")]
    NonFiniteGradient(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Per-frame feature grid `H^t`, shape `[h, w, D]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap<T> {
    pub features: Tensor<T>,
}

impl<T: Scalar> FeatureMap<T> {
    pub fn height(&self) -> usize {
        self.features.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.features.shape()[1]
    }

    pub fn dim(&self) -> usize {
        self.features.shape()[2]
    }

    pub fn positions(&self) -> usize {
        self.height() * self.width()
    }
}

/// Slot vectors: `K` object slots followed by the background slot when the
/// model has one. Shape `[K (+1), D]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SlotState<T> {
    pub slots: Tensor<T>,
    pub num_slots: usize,
    pub background: bool,
}

impl<T: Scalar> SlotState<T> {
    pub fn rows(&self) -> usize {
        self.slots.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.slots.shape()[1]
    }
}

/// Attention of `N = h·w` positions over `K` object slots plus an optional
/// background slot. Rows of `[W | W_bg]` sum to one.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMaps<T> {
    pub height: usize,
    pub width: usize,
    pub num_slots: usize,
    /// Row-major `N×K`.
    pub slots: Vec<T>,
    /// `N` values, present when the model has a background slot.
    pub background: Option<Vec<T>>,
}

impl<T: Scalar> AttentionMaps<T> {
    /// Splits a `[N, K (+1)]` softmax output into object and background maps.
    pub fn from_matrix(height: usize, width: usize, m: &Tensor<T>, background: bool) -> Self {
        let cols = m.shape()[1];
        let k = if background { cols - 1 } else { cols };
        let mut slots = Vec::with_capacity(height * width * k);
        let mut bg = Vec::with_capacity(if background { height * width } else { 0 });
        for row in m.data().chunks_exact(cols) {
            slots.extend_from_slice(&row[..k]);
            if background {
                bg.push(row[k]);
            }
        }
        Self {
            height,
            width,
            num_slots: k,
            slots,
            background: background.then_some(bg),
        }
    }

    pub fn positions(&self) -> usize {
        self.height * self.width
    }

    /// Map of object slot `k` over all positions.
    pub fn slot_map(&self, k: usize) -> Vec<T> {
        self.slots.chunks_exact(self.num_slots).map(|r| r[k]).collect()
    }

    /// `W_bg`, or zeros without a background slot.
    pub fn background_map(&self) -> Vec<T> {
        self.background.clone().unwrap_or_else(|| vec![T::zero(); self.positions()])
    }

    /// `W_fg = 1 − W_bg`.
    pub fn foreground_map(&self) -> Vec<T> {
        self.background_map().into_iter().map(|b| T::one() - b).collect()
    }

    /// Bilinearly resampled copy at a new grid size.
    pub fn resize(&self, height: usize, width: usize) -> Self {
        let cols = self.num_slots + usize::from(self.background.is_some());
        let mut data = Vec::with_capacity(self.positions() * cols);
        for (i, row) in self.slots.chunks_exact(self.num_slots).enumerate() {
            data.extend_from_slice(row);
            if let Some(bg) = &self.background {
                data.push(bg[i]);
            }
        }
        let t = Tensor::from_vec(&[1, self.height, self.width, cols], data).unwrap();
        let r = resize_forward(&t, height, width).reshape(&[height * width, cols]).unwrap();
        Self::from_matrix(height, width, &r, self.background.is_some())
    }

    pub fn is_finite(&self) -> bool {
        self.slots.iter().all(|v| v.is_finite()) && self.background.as_ref().is_none_or(|b| b.iter().all(|v| v.is_finite()))
    }
}
