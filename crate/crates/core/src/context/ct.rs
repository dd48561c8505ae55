use std::rc::Rc;

use super::{zero_padding_rows, ContextConfig};
use crate::autograd::{Graph, Var};
use crate::nn::{Attention, Linear, Mlp, Norm};
use crate::params::Initializer;

/// One pre-norm transformer block (masked self-attention + MLP) followed by
/// a linear projection to the context width.
#[derive(Clone, Debug)]
pub struct ContextTransformer {
    norm_attn: Norm,
    attn: Attention,
    norm_mlp: Norm,
    mlp: Mlp,
    proj: Linear,
    proj_name: String,
}

impl ContextTransformer {
    pub fn new(init: &mut Initializer<'_>, name: &str, cfg: &ContextConfig, text_dim: usize) -> Self {
        let proj_name = format!("{name}.proj");
        Self {
            norm_attn: Norm::new(init, &format!("{name}.norm_attn"), text_dim),
            attn: Attention::new(init, &format!("{name}.attn"), text_dim, text_dim, text_dim, cfg.heads),
            norm_mlp: Norm::new(init, &format!("{name}.norm_mlp"), text_dim),
            mlp: Mlp::new(init, &format!("{name}.mlp"), text_dim, 4 * text_dim),
            proj: Linear::new(init, &proj_name, text_dim, cfg.context_dim, true, false),
            proj_name,
        }
    }

    /// Name of the output projection weight.
    pub fn proj_weight_name(&self) -> String {
        format!("{}.weight", self.proj_name)
    }

    /// Text `[N, L, D]` → context `[N, L, d_z]`; padding rows are zero.
    pub fn forward(&self, g: &mut Graph<'_>, text: Var, mask: &Rc<Vec<bool>>) -> Var {
        let h = self.norm_attn.forward(g, text, 2);
        let a = self.attn.forward(g, h, h, Some(mask.clone()));
        let t = g.add(text, a);
        let h = self.norm_mlp.forward(g, t, 2);
        let h = self.mlp.forward(g, h);
        let t = g.add(t, h);
        let z = self.proj.forward(g, t);
        zero_padding_rows(g, z, mask)
    }
}
