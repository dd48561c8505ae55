//! The restoration network: a four-level U-shaped transformer whose decoder
//! is modulated by the degradation context.

mod blocks;

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::Conv;
use crate::params::Initializer;

pub use blocks::{BasicBlock, Caff, Dmm, Gdfn, ImageCrossAttention, Mdta, ModulationKind};

pub const LEVELS: usize = 4;
/// Input sides must be multiples of this (three 2× downsamplings).
pub const SIZE_MULTIPLE: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DcFormerConfig {
    pub base_channels: usize,
    pub blocks_per_level: [usize; LEVELS],
    pub heads_per_level: [usize; LEVELS],
    pub gdfn_expansion: f64,
    pub context_dim: usize,
}

impl DcFormerConfig {
    pub fn full(context_dim: usize) -> Self {
        Self {
            base_channels: 48,
            blocks_per_level: [4, 6, 6, 8],
            heads_per_level: [1, 2, 4, 8],
            gdfn_expansion: 2.66,
            context_dim,
        }
    }

    pub fn toy(context_dim: usize) -> Self {
        Self {
            base_channels: 8,
            blocks_per_level: [1, 1, 1, 1],
            heads_per_level: [1, 1, 2, 2],
            gdfn_expansion: 2.66,
            context_dim,
        }
    }

    pub fn width(&self, level: usize) -> usize {
        self.base_channels << level
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 || self.context_dim == 0 || self.gdfn_expansion <= 0.0 {
            return Err(Error::invalid("channels, context width and expansion must be positive"));
        }
        for l in 0..LEVELS {
            let h = self.heads_per_level[l];
            if h == 0 || !self.width(l).is_multiple_of(h) {
                return Err(Error::invalid(format!("level {} width {} not divisible by {h} heads", l + 1, self.width(l))));
            }
            if self.blocks_per_level[l] == 0 {
                return Err(Error::invalid("every level needs at least one block"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct DecoderLevel {
    up: Conv,
    reduce: Conv,
    blocks: Vec<BasicBlock>,
    dmm: Dmm,
}

#[derive(Clone, Debug)]
pub struct DcFormer {
    cfg: DcFormerConfig,
    embed: Conv,
    encoders: Vec<(Vec<BasicBlock>, Conv)>,
    latent: Vec<BasicBlock>,
    latent_dmm: Dmm,
    decoders: Vec<DecoderLevel>,
    output: Conv,
}

fn blocks(init: &mut Initializer<'_>, name: &str, n: usize, c: usize, heads: usize, r: f64) -> Vec<BasicBlock> {
    (0..n).map(|i| BasicBlock::new(init, &format!("{name}.{i}"), c, heads, r)).collect()
}

fn pixel_unshuffle(g: &mut Graph<'_>, x: Var) -> Var {
    let s = g.shape(x).to_vec();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let x = g.reshape(x, &[n, c, h / 2, 2, w / 2, 2]);
    let x = g.permute(x, &[0, 1, 3, 5, 2, 4]);
    g.reshape(x, &[n, 4 * c, h / 2, w / 2])
}

fn pixel_shuffle(g: &mut Graph<'_>, x: Var) -> Var {
    let s = g.shape(x).to_vec();
    let (n, c, h, w) = (s[0], s[1] / 4, s[2], s[3]);
    let x = g.reshape(x, &[n, c, 2, 2, h, w]);
    let x = g.permute(x, &[0, 1, 4, 2, 5, 3]);
    g.reshape(x, &[n, c, 2 * h, 2 * w])
}

impl DcFormer {
    pub fn new(init: &mut Initializer<'_>, name: &str, cfg: DcFormerConfig, kind: ModulationKind) -> Result<Self> {
        cfg.validate()?;
        let r = cfg.gdfn_expansion;
        let embed = Conv::new(init, &format!("{name}.embed"), 3, cfg.base_channels, 3, false, false);
        let mut encoders = Vec::new();
        for l in 0..LEVELS - 1 {
            let c = cfg.width(l);
            let b = blocks(init, &format!("{name}.enc{}", l + 1), cfg.blocks_per_level[l], c, cfg.heads_per_level[l], r);
            let down = Conv::new(init, &format!("{name}.down{}", l + 1), c, c / 2, 3, false, false);
            encoders.push((b, down));
        }
        let top = LEVELS - 1;
        let (ct, ht) = (cfg.width(top), cfg.heads_per_level[top]);
        let latent = blocks(init, &format!("{name}.latent"), cfg.blocks_per_level[top], ct, ht, r);
        let latent_dmm = Dmm::new(init, &format!("{name}.dmm4"), ct, cfg.context_dim, ht, r, kind);
        let mut decoders = Vec::new();
        for l in (0..LEVELS - 1).rev() {
            let c = cfg.width(l);
            let h = cfg.heads_per_level[l];
            let p = format!("{name}.dec{}", l + 1);
            decoders.push(DecoderLevel {
                up: Conv::new(init, &format!("{p}.up"), 2 * c, 4 * c, 3, false, false),
                reduce: Conv::new(init, &format!("{p}.reduce"), 2 * c, c, 1, false, false),
                blocks: blocks(init, &format!("{p}.blocks"), cfg.blocks_per_level[l], c, h, r),
                dmm: Dmm::new(init, &format!("{name}.dmm{}", l + 1), c, cfg.context_dim, h, r, kind),
            });
        }
        let output = Conv::new(init, &format!("{name}.output"), cfg.base_channels, 3, 3, false, true);
        Ok(Self { cfg, embed, encoders, latent, latent_dmm, decoders, output })
    }

    pub fn config(&self) -> &DcFormerConfig {
        &self.cfg
    }

    /// `img` is `[N, 3, H, W]` with sides multiple of [`SIZE_MULTIPLE`];
    /// returns the unclamped `img + residual`.
    pub fn forward(&self, g: &mut Graph<'_>, img: Var, z: Var, mask: &Rc<Vec<bool>>) -> Var {
        let mut x = self.embed.forward(g, img);
        let mut skips = Vec::with_capacity(LEVELS - 1);
        for (blocks, down) in &self.encoders {
            for b in blocks {
                x = b.forward(g, x);
            }
            skips.push(x);
            let d = down.forward(g, x);
            x = pixel_unshuffle(g, d);
        }
        for b in &self.latent {
            x = b.forward(g, x);
        }
        x = self.latent_dmm.forward(g, x, z, mask);
        for dec in &self.decoders {
            let u = dec.up.forward(g, x);
            let u = pixel_shuffle(g, u);
            let skip = skips.pop().expect("one skip per encoder level");
            let cat = g.concat(u, skip);
            x = dec.reduce.forward(g, cat);
            for b in &dec.blocks {
                x = b.forward(g, x);
            }
            x = dec.dmm.forward(g, x, z, mask);
        }
        let out = self.output.forward(g, x);
        g.add(img, out)
    }
}
