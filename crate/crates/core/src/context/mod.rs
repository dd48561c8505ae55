//! Degradation-context encoding: the context enhance module (image-aware
//! refinement of text features), the context transformer that produces
//! the degradation context, and the triplet objective that scores it.

mod cem;
mod ct;
mod triplet;

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::textio::TextFeature;

pub use cem::{ContextEnhancer, ShallowFeatures, CEM_GRID};
pub use ct::ContextTransformer;
pub use triplet::{triplet_loss, triplet_loss_var, triplet_term};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextConfig {
    /// Channels of the shallow image features.
    pub shallow_channels: usize,
    /// Attention heads in both the enhancer and the context transformer.
    pub heads: usize,
    /// Width of the degradation context rows.
    pub context_dim: usize,
}

impl Default for ContextConfig {
    fn default() -> Self {
        Self { shallow_channels: 48, heads: 8, context_dim: 512 }
    }
}

/// `L×d_z` degradation context; carries the text mask so padding rows can
/// be excluded downstream.
#[derive(Clone, Debug, PartialEq)]
pub struct DegradationContext {
    data: Vec<f64>,
    mask: Vec<bool>,
    dim: usize,
}

impl DegradationContext {
    pub fn new(data: Vec<f64>, mask: Vec<bool>, dim: usize) -> Result<Self> {
        if data.len() != mask.len() * dim {
            return Err(Error::shape("context data does not match mask length × dim"));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::invalid("degradation context contains non-finite values"));
        }
        Ok(Self { data, mask, dim })
    }

    pub fn len(&self) -> usize {
        self.mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mask.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }
}

/// A batch of `[N, L, D]` token rows plus the flattened `[N, L]` mask.
#[derive(Clone, Debug)]
pub struct TokenBatch {
    pub tokens: Tensor,
    pub mask: Rc<Vec<bool>>,
}

impl TokenBatch {
    pub fn from_features(features: &[&TextFeature]) -> Result<Self> {
        let first = features.first().ok_or_else(|| Error::invalid("empty text batch"))?;
        let (l, d) = (first.len(), first.dim());
        let mut data = Vec::with_capacity(features.len() * l * d);
        let mut mask = Vec::with_capacity(features.len() * l);
        for f in features {
            if f.len() != l || f.dim() != d {
                return Err(Error::shape("text features in a batch must share L and D"));
            }
            data.extend_from_slice(f.data());
            mask.extend_from_slice(f.mask());
        }
        Ok(Self { tokens: Tensor::new(vec![features.len(), l, d], data)?, mask: Rc::new(mask) })
    }

    pub fn from_contexts(contexts: &[&DegradationContext]) -> Result<Self> {
        let first = contexts.first().ok_or_else(|| Error::invalid("empty context batch"))?;
        let (l, d) = (first.len(), first.dim());
        let mut data = Vec::with_capacity(contexts.len() * l * d);
        let mut mask = Vec::with_capacity(contexts.len() * l);
        for c in contexts {
            if c.len() != l || c.dim() != d {
                return Err(Error::shape("contexts in a batch must share L and d_z"));
            }
            data.extend_from_slice(c.data());
            mask.extend_from_slice(c.mask());
        }
        Ok(Self { tokens: Tensor::new(vec![contexts.len(), l, d], data)?, mask: Rc::new(mask) })
    }

    /// Splits a `[N, L, d]` value back into per-sample contexts.
    pub fn split_contexts(value: &Tensor, mask: &[bool]) -> Result<Vec<DegradationContext>> {
        let s = value.shape();
        let (n, l, d) = (s[0], s[1], s[2]);
        (0..n)
            .map(|i| {
                DegradationContext::new(
                    value.data()[i * l * d..(i + 1) * l * d].to_vec(),
                    mask[i * l..(i + 1) * l].to_vec(),
                    d,
                )
            })
            .collect()
    }
}

/// Multiplies every padding row of a `[N, L, D]` value by zero.
pub(crate) fn zero_padding_rows(g: &mut Graph<'_>, x: Var, mask: &[bool]) -> Var {
    let d = *g.shape(x).last().expect("rank 3");
    let keep = Tensor::from_fn(g.shape(x), |i| if mask[i / d] { 1.0 } else { 0.0 });
    let keep = g.constant(keep);
    g.mul(x, keep)
}
