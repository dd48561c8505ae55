//! The assembled model: context enhancer, context transformer and the
//! restoration network, sharing one parameter store.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::context::{ContextConfig, ContextEnhancer, ContextTransformer, DegradationContext, TokenBatch, CEM_GRID};
use crate::dcformer::{DcFormer, DcFormerConfig, ModulationKind, SIZE_MULTIPLE};
use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::params::{InitPolicy, Initializer, ParamStore};
use crate::rng;
use crate::tensor::Tensor;
use crate::textio::{TextConfig, TextFeature};

const INIT_SALT: u64 = 0x696e_6974;

pub const CEM_PREFIX: &str = "cem.";
pub const CT_PREFIX: &str = "ct.";
pub const NET_PREFIX: &str = "net.";

/// Architecture variants used by the ablation harness.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    /// The enhancer is bypassed in training and evaluation.
    NoCem,
    /// CAFF is removed; cross-attention and basic blocks are stacked.
    NoDmm,
}

impl Variant {
    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoCem => "no_cem",
            Variant::NoDmm => "no_dmm",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            "full" => Ok(Variant::Full),
            "no_cem" => Ok(Variant::NoCem),
            "no_dmm" => Ok(Variant::NoDmm),
            other => Err(Error::invalid(format!("unknown variant `{other}` (full, no_cem, no_dmm)"))),
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub text: TextConfig,
    pub context: ContextConfig,
    pub dcformer: DcFormerConfig,
    pub variant: Variant,
    pub init: InitPolicy,
    pub seed: u64,
}

impl ModelConfig {
    pub fn full() -> Self {
        let context = ContextConfig::default();
        Self {
            text: TextConfig::default(),
            context,
            dcformer: DcFormerConfig::full(context.context_dim),
            variant: Variant::Full,
            init: InitPolicy::ZeroResidual,
            seed: 0,
        }
    }

    /// Small enough to train on a CPU in minutes.
    pub fn toy() -> Self {
        let context = ContextConfig { shallow_channels: 8, heads: 4, context_dim: 64 };
        Self {
            text: TextConfig { max_len: 32, dim: 64 },
            context,
            dcformer: DcFormerConfig::toy(context.context_dim),
            variant: Variant::Full,
            init: InitPolicy::ZeroResidual,
            seed: 0,
        }
    }

    pub fn with_variant(mut self, variant: Variant) -> Self {
        self.variant = variant;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_init(mut self, init: InitPolicy) -> Self {
        self.init = init;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.dcformer.validate()?;
        if self.dcformer.context_dim != self.context.context_dim {
            return Err(Error::invalid("restoration network and context transformer disagree on d_z"));
        }
        if self.context.heads == 0 || !self.text.dim.is_multiple_of(self.context.heads) {
            return Err(Error::invalid("text width must be divisible by the context heads"));
        }
        if self.text.max_len < 2 || self.context.shallow_channels == 0 {
            return Err(Error::invalid("text length and shallow channels must be positive"));
        }
        Ok(())
    }
}

pub struct RestorationModel {
    cfg: ModelConfig,
    params: ParamStore,
    cem: Option<ContextEnhancer>,
    ct: ContextTransformer,
    net: DcFormer,
}

impl RestorationModel {
    /// Builds the model and draws its initial parameters.
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut params = ParamStore::new();
        let mut init = Initializer { store: &mut params, rng: rng::stream(cfg.seed, INIT_SALT), policy: cfg.init };
        let cem = (cfg.variant != Variant::NoCem)
            .then(|| ContextEnhancer::new(&mut init, "cem", &cfg.context, cfg.text.dim));
        let ct = ContextTransformer::new(&mut init, "ct", &cfg.context, cfg.text.dim);
        let kind = match cfg.variant {
            Variant::NoDmm => ModulationKind::Stacked,
            _ => ModulationKind::Fused,
        };
        let net = DcFormer::new(&mut init, "net", cfg.dcformer, kind)?;
        Ok(Self { cfg, params, cem, ct, net })
    }

    /// Builds the architecture for `cfg` and loads `params` into it.
    pub fn from_params(cfg: ModelConfig, params: &ParamStore) -> Result<Self> {
        let mut m = Self::new(cfg.with_init(InitPolicy::AllZero))?;
        m.cfg.init = cfg.init;
        m.params.load_from(params)?;
        Ok(m)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn cem(&self) -> Option<&ContextEnhancer> {
        self.cem.as_ref()
    }

    pub fn ct(&self) -> &ContextTransformer {
        &self.ct
    }

    pub fn net(&self) -> &DcFormer {
        &self.net
    }

    fn check_text(&self, t: &TextFeature) -> Result<()> {
        if t.len() != self.cfg.text.max_len || t.dim() != self.cfg.text.dim {
            return Err(Error::invalid(format!(
                "text feature is {}x{}, model expects {}x{}",
                t.len(),
                t.dim(),
                self.cfg.text.max_len,
                self.cfg.text.dim
            )));
        }
        Ok(())
    }

    /// Image-aware text refinement; the identity for the `no_cem` variant.
    pub fn enhance_text(&self, img: &ImageTensor, t: &TextFeature) -> Result<TextFeature> {
        self.check_text(t)?;
        let Some(cem) = &self.cem else { return Ok(t.clone()) };
        if img.height() < CEM_GRID || img.width() < CEM_GRID {
            return Err(Error::invalid(format!("image must be at least {CEM_GRID}x{CEM_GRID} for context enhancement")));
        }
        let batch = TokenBatch::from_features(&[t])?;
        let mut g = Graph::new(&self.params);
        let x = g.constant(ImageTensor::batch(&[img])?);
        let tv = g.constant(batch.tokens);
        let out = cem.forward(&mut g, x, tv, &batch.mask);
        TextFeature::new(g.value(out).data().to_vec(), t.mask().to_vec(), t.dim())
    }

    /// Context transformer only: the user-text (refine) path.
    pub fn context_from_text(&self, t: &TextFeature) -> Result<DegradationContext> {
        self.check_text(t)?;
        let batch = TokenBatch::from_features(&[t])?;
        let mut g = Graph::new(&self.params);
        let tv = g.constant(batch.tokens);
        let z = self.ct.forward(&mut g, tv, &batch.mask);
        DegradationContext::new(g.value(z).data().to_vec(), t.mask().to_vec(), self.cfg.context.context_dim)
    }

    /// Enhancer then context transformer: the automatic (restore) path.
    pub fn context_with_image(&self, img: &ImageTensor, t: &TextFeature) -> Result<DegradationContext> {
        let enhanced = self.enhance_text(img, t)?;
        self.context_from_text(&enhanced)
    }

    /// Restores one image without the final clamp.
    pub fn restore_unclamped(&self, img: &ImageTensor, z: &DegradationContext) -> Result<ImageTensor> {
        let out = self.restore_raw(img, z)?;
        ImageTensor::new(img.height(), img.width(), out)
    }

    /// Pads, runs the network, crops and clamps to `[0, 1]`.
    pub fn restore(&self, img: &ImageTensor, z: &DegradationContext) -> Result<ImageTensor> {
        let out = self.restore_raw(img, z)?;
        Ok(ImageTensor::new(img.height(), img.width(), out)?.clamp01())
    }

    fn restore_raw(&self, img: &ImageTensor, z: &DegradationContext) -> Result<Vec<f64>> {
        if z.dim() != self.cfg.context.context_dim {
            return Err(Error::invalid(format!(
                "context width {} does not match the model's {}",
                z.dim(),
                self.cfg.context.context_dim
            )));
        }
        if !img.data().iter().all(|v| v.is_finite()) || !z.data().iter().all(|v| v.is_finite()) {
            return Err(Error::invalid("image and context must be finite"));
        }
        let padded = img.reflect_pad_to_multiple(SIZE_MULTIPLE)?;
        let batch = TokenBatch::from_contexts(&[z])?;
        let mut g = Graph::new(&self.params);
        let x = g.constant(ImageTensor::batch(&[&padded])?);
        let zv = g.constant(batch.tokens);
        let y = self.net.forward(&mut g, x, zv, &batch.mask);
        let y = g.crop(y, img.height(), img.width());
        let out = g.value(y).data().to_vec();
        if !out.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("restoration produced non-finite pixels".into()));
        }
        Ok(out)
    }

    /// Runs the network on a pre-batched `[N, 3, H, W]` tensor whose sides
    /// are multiples of 8, returning the unclamped output.
    pub fn restore_batch(&self, imgs: Tensor, z: &TokenBatch) -> Tensor {
        let mut g = Graph::new(&self.params);
        let x = g.constant(imgs);
        let zv = g.constant(z.tokens.clone());
        let y = self.net.forward(&mut g, x, zv, &z.mask);
        g.value(y).clone()
    }
}

/// Shared mask handle for a batch of `n` sequences of length `l` with no padding.
pub fn full_mask(n: usize, l: usize) -> Rc<Vec<bool>> {
    Rc::new(vec![true; n * l])
}
