use std::rc::Rc;

use crate::autograd::{Graph, Var};
use crate::nn::{Attention, Conv, Linear, Norm};
use crate::params::Initializer;

/// Multi-Dconv head transposed attention: attention across channels, with
/// queries and keys L2-normalized along the spatial axis and a learnable
/// per-head temperature.
#[derive(Clone, Debug)]
pub struct Mdta {
    qkv: Conv,
    qkv_dw: Conv,
    out: Conv,
    temperature: String,
    heads: usize,
}

impl Mdta {
    pub fn new(init: &mut Initializer<'_>, name: &str, c: usize, heads: usize) -> Self {
        assert!(c.is_multiple_of(heads), "MDTA width {c} not divisible by {heads} heads");
        let temperature = format!("{name}.temperature");
        init.ones(&temperature, &[heads]);
        Self {
            qkv: Conv::new(init, &format!("{name}.qkv"), c, 3 * c, 1, false, false),
            qkv_dw: Conv::depthwise(init, &format!("{name}.qkv_dw"), 3 * c),
            out: Conv::new(init, &format!("{name}.out"), c, c, 1, false, true),
            temperature,
            heads,
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Var {
        let s = g.shape(x).to_vec();
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let ch = c / self.heads;
        let qkv = self.qkv.forward(g, x);
        let qkv = self.qkv_dw.forward(g, qkv);
        let mut split = |i: usize| {
            let t = g.slice(qkv, i * c, c);
            g.reshape(t, &[n * self.heads, ch, h * w])
        };
        let (q, k, v) = (split(0), split(1), split(2));
        let q = g.l2_normalize(q);
        let k = g.l2_normalize(k);
        let attn = g.bmm(q, k, false, true);
        let attn = g.reshape(attn, &[n, self.heads, ch, ch]);
        let t = g.param(&self.temperature);
        let attn = g.scale_axis(attn, t, 1);
        let attn = g.reshape(attn, &[n * self.heads, ch, ch]);
        let attn = g.softmax(attn, None);
        let y = g.bmm(attn, v, false, false);
        let y = g.reshape(y, &[n, c, h, w]);
        self.out.forward(g, y)
    }
}

/// Gated-Dconv feed-forward network.
#[derive(Clone, Debug)]
pub struct Gdfn {
    expand: Conv,
    dw: Conv,
    out: Conv,
    hidden: usize,
}

impl Gdfn {
    pub fn new(init: &mut Initializer<'_>, name: &str, c: usize, expansion: f64) -> Self {
        let hidden = ((c as f64) * expansion).floor() as usize;
        Self {
            expand: Conv::new(init, &format!("{name}.expand"), c, 2 * hidden, 1, false, false),
            dw: Conv::depthwise(init, &format!("{name}.dw"), 2 * hidden),
            out: Conv::new(init, &format!("{name}.out"), hidden, c, 1, false, true),
            hidden,
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Var {
        let h = self.expand.forward(g, x);
        let h = self.dw.forward(g, h);
        let a = g.slice(h, 0, self.hidden);
        let b = g.slice(h, self.hidden, self.hidden);
        let a = g.gelu(a);
        let h = g.mul(a, b);
        self.out.forward(g, h)
    }
}

/// `x + MDTA(norm(x))`, then `+ GDFN(norm(·))`.
#[derive(Clone, Debug)]
pub struct BasicBlock {
    norm1: Norm,
    attn: Mdta,
    norm2: Norm,
    ffn: Gdfn,
}

impl BasicBlock {
    pub fn new(init: &mut Initializer<'_>, name: &str, c: usize, heads: usize, expansion: f64) -> Self {
        Self {
            norm1: Norm::new(init, &format!("{name}.norm1"), c),
            attn: Mdta::new(init, &format!("{name}.attn"), c, heads),
            norm2: Norm::new(init, &format!("{name}.norm2"), c),
            ffn: Gdfn::new(init, &format!("{name}.ffn"), c, expansion),
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Var {
        let h = self.norm1.forward(g, x, 1);
        let h = self.attn.forward(g, h);
        let x = g.add(x, h);
        let h = self.norm2.forward(g, x, 1);
        let h = self.ffn.forward(g, h);
        g.add(x, h)
    }
}

/// Spatial positions query the degradation context rows.
#[derive(Clone, Debug)]
pub struct ImageCrossAttention {
    norm_x: Norm,
    norm_z: Norm,
    attn: Attention,
}

impl ImageCrossAttention {
    pub fn new(init: &mut Initializer<'_>, name: &str, c: usize, context_dim: usize, heads: usize) -> Self {
        Self {
            norm_x: Norm::new(init, &format!("{name}.norm_x"), c),
            norm_z: Norm::new(init, &format!("{name}.norm_z"), context_dim),
            attn: Attention::new(init, &format!("{name}.attn"), c, context_dim, c, heads),
        }
    }

    /// `x` is `[N, C, H, W]`, `z` is `[N, L, d_z]` with `[N, L]` mask.
    pub fn forward(&self, g: &mut Graph<'_>, x: Var, z: Var, mask: &Rc<Vec<bool>>) -> Var {
        let s = g.shape(x).to_vec();
        let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
        let h = self.norm_x.forward(g, x, 1);
        let h = g.reshape(h, &[n, c, hw]);
        let q = g.permute(h, &[0, 2, 1]);
        let kv = self.norm_z.forward(g, z, 2);
        let y = self.attn.forward(g, q, kv, Some(mask.clone()));
        let y = g.permute(y, &[0, 2, 1]);
        let y = g.reshape(y, &s);
        g.add(x, y)
    }
}

/// Concatenate attention feature fusion: `W = σ(L(xy) ⊕ G(xy))`,
/// `out = x·W + (1 − W)·y`.
#[derive(Clone, Debug)]
pub struct Caff {
    local1: Conv,
    local_norm1: Norm,
    local2: Conv,
    local_norm2: Norm,
    global1: Linear,
    global_norm1: Norm,
    global2: Linear,
    global_norm2: Norm,
}

impl Caff {
    pub fn new(init: &mut Initializer<'_>, name: &str, c: usize) -> Self {
        Self {
            local1: Conv::new(init, &format!("{name}.local1"), 2 * c, 2 * c, 1, true, false),
            local_norm1: Norm::new(init, &format!("{name}.local_norm1"), 2 * c),
            local2: Conv::new(init, &format!("{name}.local2"), 2 * c, c, 1, true, false),
            local_norm2: Norm::new(init, &format!("{name}.local_norm2"), c),
            global1: Linear::new(init, &format!("{name}.global1"), 2 * c, 2 * c, true, false),
            global_norm1: Norm::new(init, &format!("{name}.global_norm1"), 2 * c),
            global2: Linear::new(init, &format!("{name}.global2"), 2 * c, c, true, false),
            global_norm2: Norm::new(init, &format!("{name}.global_norm2"), c),
        }
    }

    /// The fusion weights `W`, shaped like `x`.
    pub fn weights(&self, g: &mut Graph<'_>, x: Var, y: Var) -> Var {
        let n = g.shape(x)[0];
        let xy = g.concat(x, y);
        let c2 = g.shape(xy)[1];

        let l = self.local1.forward(g, xy);
        let l = self.local_norm1.forward(g, l, 1);
        let l = g.relu(l);
        let l = self.local2.forward(g, l);
        let l = self.local_norm2.forward(g, l, 1);

        let p = g.adaptive_pool(xy, 1, 1);
        let p = g.reshape(p, &[n, c2]);
        let p = self.global1.forward(g, p);
        let p = self.global_norm1.forward(g, p, 1);
        let p = g.relu(p);
        let p = self.global2.forward(g, p);
        let p = self.global_norm2.forward(g, p, 1);

        let s = g.add_broadcast(l, p);
        g.sigmoid(s)
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var, y: Var) -> Var {
        assert_eq!(g.shape(x), g.shape(y), "CAFF inputs must share a shape");
        let w = self.weights(g, x, y);
        let d = g.sub(x, y);
        let d = g.mul(w, d);
        g.add(y, d)
    }
}

/// How the degradation context is applied inside the decoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModulationKind {
    /// Cross-attention, CAFF fusion, basic block.
    Fused,
    /// Cross-attention followed directly by a basic block (no CAFF).
    Stacked,
}

/// Degradation modulation module.
#[derive(Clone, Debug)]
pub struct Dmm {
    cross: ImageCrossAttention,
    caff: Option<Caff>,
    block: BasicBlock,
}

impl Dmm {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        init: &mut Initializer<'_>,
        name: &str,
        c: usize,
        context_dim: usize,
        heads: usize,
        expansion: f64,
        kind: ModulationKind,
    ) -> Self {
        Self {
            cross: ImageCrossAttention::new(init, &format!("{name}.cross"), c, context_dim, heads),
            caff: (kind == ModulationKind::Fused).then(|| Caff::new(init, &format!("{name}.caff"), c)),
            block: BasicBlock::new(init, &format!("{name}.block"), c, heads, expansion),
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var, z: Var, mask: &Rc<Vec<bool>>) -> Var {
        let y = self.cross.forward(g, x, z, mask);
        let fused = match &self.caff {
            Some(caff) => caff.forward(g, x, y),
            None => y,
        };
        self.block.forward(g, fused)
    }
}
