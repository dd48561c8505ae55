//! From (image, prompt) to a description, and from a description to a
//! token-feature matrix.
//!
//! The default [`HashEncoder`] is a deterministic stand-in for a frozen
//! text encoder; [`RemoteTextEncoder`] and [`RemoteMllmProvider`] talk to
//! external services over HTTP/JSON with the same output contracts.

mod provider;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

pub use provider::{
    DescriptionProvider, OracleProvider, ProviderRequest, RemoteMllmProvider, RemoteTextEncoder,
    DEFAULT_PROMPT, DEFAULT_TIMEOUT,
};

pub const PAD_ID: u32 = 0;
pub const BEGIN_ID: u32 = 1;
pub const END_ID: u32 = 2;
const FIRST_WORD_ID: u32 = 3;
const EMBED_SALT: u64 = 0x0065_6d62_6564;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextConfig {
    /// Rows per feature matrix, including the begin/end sentinels.
    pub max_len: usize,
    pub dim: usize,
}

impl Default for TextConfig {
    fn default() -> Self {
        Self { max_len: 77, dim: 512 }
    }
}

/// `L×D` token features with a mask of real (non-padding) rows.
#[derive(Clone, Debug, PartialEq)]
pub struct TextFeature {
    data: Vec<f64>,
    mask: Vec<bool>,
    dim: usize,
}

impl TextFeature {
    /// Builds a feature matrix; rows with `mask == false` must be zero.
    pub fn new(data: Vec<f64>, mask: Vec<bool>, dim: usize) -> Result<Self> {
        if data.len() != mask.len() * dim {
            return Err(Error::shape(format!(
                "text feature needs {}x{dim} values, got {}",
                mask.len(),
                data.len()
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("text feature contains NaN or infinity".into()));
        }
        let bad_pad = mask
            .iter()
            .enumerate()
            .any(|(i, m)| !m && data[i * dim..(i + 1) * dim].iter().any(|v| *v != 0.0));
        if bad_pad {
            return Err(Error::invalid("padding rows of a text feature must be zero"));
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

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![1, self.len(), self.dim], self.data.clone()).expect("shape checked")
    }

    pub fn frobenius_distance(&self, other: &TextFeature) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt()
    }
}

/// Turns text into feature matrices of a fixed shape.
pub trait TextEncoder: Send + Sync {
    fn config(&self) -> TextConfig;
    fn encode(&self, text: &str) -> Result<TextFeature>;
}

/// 32-bit FNV-1a; word ids below [`FIRST_WORD_ID`] are shifted up past the
/// sentinels.
pub fn word_id(word: &str) -> u32 {
    let mut h: u32 = 0x811c_9dc5;
    for b in word.bytes() {
        h ^= u32::from(b);
        h = h.wrapping_mul(0x0100_0193);
    }
    if h < FIRST_WORD_ID {
        h + FIRST_WORD_ID
    } else {
        h
    }
}

/// Lowercases, splits on anything that is not alphanumeric, and frames the
/// words as `[BEGIN, w₁ … wₖ, END, PAD …]` with exactly `max_len` ids
/// (`k ≤ max_len − 2`; extra words are dropped).
pub fn tokenize(text: &str, max_len: usize) -> Result<Vec<u32>> {
    if text.trim().is_empty() {
        return Err(Error::invalid("cannot tokenize empty text"));
    }
    if max_len < 2 {
        return Err(Error::invalid("max_len must leave room for the sentinels"));
    }
    let lower = text.to_lowercase();
    let words = lower.split(|c: char| !c.is_alphanumeric()).filter(|w| !w.is_empty());
    let mut ids = Vec::with_capacity(max_len);
    ids.push(BEGIN_ID);
    ids.extend(words.take(max_len - 2).map(word_id));
    ids.push(END_ID);
    ids.resize(max_len, PAD_ID);
    Ok(ids)
}

/// Deterministic hash-embedding encoder.
///
/// Each token id seeds a unit-norm random vector; a sinusoidal position
/// vector of norm 0.5 is added, so real rows have norm in `[0.5, 1.5]`.
#[derive(Clone, Debug)]
pub struct HashEncoder {
    cfg: TextConfig,
}

impl HashEncoder {
    pub fn new(cfg: TextConfig) -> Self {
        Self { cfg }
    }

    fn token_vector(&self, id: u32) -> Vec<f64> {
        use rand_distr::{Distribution, StandardNormal};
        let mut rng = rng::stream(u64::from(id), EMBED_SALT);
        let mut v: Vec<f64> = (0..self.cfg.dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        v.iter_mut().for_each(|x| *x /= norm);
        v
    }

    fn position_vector(&self, pos: usize) -> Vec<f64> {
        let d = self.cfg.dim;
        let mut v: Vec<f64> = (0..d)
            .map(|j| {
                let freq = 1.0 / 10000f64.powf((2 * (j / 2)) as f64 / d as f64);
                let a = pos as f64 * freq;
                if j % 2 == 0 {
                    a.sin()
                } else {
                    a.cos()
                }
            })
            .collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        v.iter_mut().for_each(|x| *x *= 0.5 / norm);
        v
    }
}

impl TextEncoder for HashEncoder {
    fn config(&self) -> TextConfig {
        self.cfg
    }

    fn encode(&self, text: &str) -> Result<TextFeature> {
        let ids = tokenize(text, self.cfg.max_len)?;
        let d = self.cfg.dim;
        let mut data = vec![0.0; ids.len() * d];
        let mut mask = vec![false; ids.len()];
        for (i, &id) in ids.iter().enumerate() {
            if id == PAD_ID {
                continue;
            }
            mask[i] = true;
            let (e, p) = (self.token_vector(id), self.position_vector(i));
            for j in 0..d {
                data[i * d + j] = e[j] + p[j];
            }
        }
        TextFeature::new(data, mask, d)
    }
}
