use std::rc::Rc;

use super::{zero_padding_rows, ContextConfig};
use crate::autograd::{Graph, Var};
use crate::nn::{Attention, Conv, Linear, Mlp, Norm};
use crate::params::Initializer;

/// Side of the pooling grid that turns shallow features into image tokens.
pub const CEM_GRID: usize = 8;

const CROSS_BLOCKS: usize = 2;

/// Convolutional residual block producing shallow image features:
/// `f = conv_in(img)`, `out = f + conv2(relu(conv1(f)))`.
#[derive(Clone, Debug)]
pub struct ShallowFeatures {
    conv_in: Conv,
    conv1: Conv,
    conv2: Conv,
}

impl ShallowFeatures {
    pub fn new(init: &mut Initializer<'_>, name: &str, channels: usize) -> Self {
        Self {
            conv_in: Conv::new(init, &format!("{name}.conv_in"), 3, channels, 3, true, false),
            conv1: Conv::new(init, &format!("{name}.conv1"), channels, channels, 3, true, false),
            conv2: Conv::new(init, &format!("{name}.conv2"), channels, channels, 3, true, true),
        }
    }

    /// `[N, 3, H, W]` → `[N, C_s, H, W]`.
    pub fn forward(&self, g: &mut Graph<'_>, img: Var) -> Var {
        let f = self.conv_in.forward(g, img);
        let h = self.conv1.forward(g, f);
        let h = g.relu(h);
        let h = self.conv2.forward(g, h);
        g.add(f, h)
    }
}

#[derive(Clone, Debug)]
struct CrossBlock {
    norm_q: Norm,
    norm_kv: Norm,
    attn: Attention,
    norm_mlp: Norm,
    mlp: Mlp,
}

/// Refines text features with image evidence through two pre-norm text
/// cross transformers (text rows query pooled image tokens).
#[derive(Clone, Debug)]
pub struct ContextEnhancer {
    shallow: ShallowFeatures,
    img_proj: Linear,
    blocks: Vec<CrossBlock>,
}

impl ContextEnhancer {
    pub fn new(init: &mut Initializer<'_>, name: &str, cfg: &ContextConfig, text_dim: usize) -> Self {
        let shallow = ShallowFeatures::new(init, &format!("{name}.shallow"), cfg.shallow_channels);
        let img_proj = Linear::new(init, &format!("{name}.img_proj"), cfg.shallow_channels, text_dim, true, false);
        let blocks = (0..CROSS_BLOCKS)
            .map(|i| {
                let p = format!("{name}.blocks.{i}");
                CrossBlock {
                    norm_q: Norm::new(init, &format!("{p}.norm_q"), text_dim),
                    norm_kv: Norm::new(init, &format!("{p}.norm_kv"), text_dim),
                    attn: Attention::new(init, &format!("{p}.attn"), text_dim, text_dim, text_dim, cfg.heads),
                    norm_mlp: Norm::new(init, &format!("{p}.norm_mlp"), text_dim),
                    mlp: Mlp::new(init, &format!("{p}.mlp"), text_dim, 4 * text_dim),
                }
            })
            .collect();
        Self { shallow, img_proj, blocks }
    }

    pub fn shallow(&self) -> &ShallowFeatures {
        &self.shallow
    }

    /// Image `[N, 3, H, W]` (H, W ≥ 8) and text `[N, L, D]` → enhanced `[N, L, D]`.
    pub fn forward(&self, g: &mut Graph<'_>, img: Var, text: Var, mask: &Rc<Vec<bool>>) -> Var {
        let feat = self.shallow.forward(g, img);
        let (n, cs) = (g.shape(feat)[0], g.shape(feat)[1]);
        let pooled = g.adaptive_pool(feat, CEM_GRID, CEM_GRID);
        let pooled = g.reshape(pooled, &[n, cs, CEM_GRID * CEM_GRID]);
        let tokens = g.permute(pooled, &[0, 2, 1]);
        let tokens = self.img_proj.forward(g, tokens);
        let mut t = text;
        for b in &self.blocks {
            let q = b.norm_q.forward(g, t, 2);
            let kv = b.norm_kv.forward(g, tokens, 2);
            let a = b.attn.forward(g, q, kv, None);
            t = g.add(t, a);
            let h = b.norm_mlp.forward(g, t, 2);
            let h = b.mlp.forward(g, h);
            t = g.add(t, h);
        }
        zero_padding_rows(g, t, mask)
    }
}
