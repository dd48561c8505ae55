//! Parameterized building blocks shared by the context encoder and the
//! restoration network.

use std::rc::Rc;

use crate::autograd::{Graph, Var};
use crate::params::Initializer;

#[derive(Clone, Debug)]
pub struct Linear {
    w: String,
    b: Option<String>,
}

impl Linear {
    pub fn new(
        init: &mut Initializer<'_>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        residual_out: bool,
    ) -> Self {
        let w = format!("{name}.weight");
        init.weight(&w, &[out_dim, in_dim], in_dim, residual_out);
        let b = bias.then(|| {
            let b = format!("{name}.bias");
            init.zeros(&b, &[out_dim]);
            b
        });
        Self { w, b }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Var {
        let w = g.param(&self.w);
        let b = self.b.as_ref().map(|b| g.param(b));
        g.linear(x, w, b)
    }
}

#[derive(Clone, Debug)]
pub struct Conv {
    w: String,
    b: Option<String>,
    depthwise: bool,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        init: &mut Initializer<'_>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        bias: bool,
        residual_out: bool,
    ) -> Self {
        let w = format!("{name}.weight");
        init.weight(&w, &[cout, cin, k, k], cin * k * k, residual_out);
        let b = bias.then(|| {
            let b = format!("{name}.bias");
            init.zeros(&b, &[cout]);
            b
        });
        Self { w, b, depthwise: false }
    }

    pub fn depthwise(init: &mut Initializer<'_>, name: &str, c: usize) -> Self {
        let w = format!("{name}.weight");
        init.weight(&w, &[c, 1, 3, 3], 9, false);
        Self { w, b: None, depthwise: true }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Var {
        let w = g.param(&self.w);
        let b = self.b.as_ref().map(|b| g.param(b));
        g.conv2d(x, w, b, self.depthwise)
    }
}

#[derive(Clone, Debug)]
pub struct Norm {
    gain: String,
    bias: String,
}

impl Norm {
    pub fn new(init: &mut Initializer<'_>, name: &str, width: usize) -> Self {
        let gain = format!("{name}.weight");
        let bias = format!("{name}.bias");
        init.ones(&gain, &[width]);
        init.zeros(&bias, &[width]);
        Self { gain, bias }
    }

    /// Normalizes over `axis` (1 for feature maps, 2 for `[N, L, D]` tokens).
    pub fn forward(&self, g: &mut Graph<'_>, x: Var, axis: usize) -> Var {
        let gain = g.param(&self.gain);
        let bias = g.param(&self.bias);
        g.layer_norm(x, gain, bias, axis)
    }
}

/// Two-layer GELU perceptron on the last axis.
#[derive(Clone, Debug)]
pub struct Mlp {
    fc1: Linear,
    fc2: Linear,
}

impl Mlp {
    pub fn new(init: &mut Initializer<'_>, name: &str, dim: usize, hidden: usize) -> Self {
        let fc1 = Linear::new(init, &format!("{name}.fc1"), dim, hidden, true, false);
        let fc2 = Linear::new(init, &format!("{name}.fc2"), hidden, dim, true, true);
        Self { fc1, fc2 }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Var {
        let h = self.fc1.forward(g, x);
        let h = g.gelu(h);
        self.fc2.forward(g, h)
    }
}

/// Multi-head scaled dot-product attention between token sets.
///
/// Queries are `[N, Lq, Dq]`, keys/values `[N, Lk, Dk]`; the output has the
/// attention width `dim`.
#[derive(Clone, Debug)]
pub struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    heads: usize,
    dim: usize,
}

impl Attention {
    pub fn new(
        init: &mut Initializer<'_>,
        name: &str,
        query_dim: usize,
        kv_dim: usize,
        dim: usize,
        heads: usize,
    ) -> Self {
        assert!(heads > 0 && dim.is_multiple_of(heads), "attention width {dim} not divisible by {heads} heads");
        Self {
            q: Linear::new(init, &format!("{name}.q"), query_dim, dim, true, false),
            k: Linear::new(init, &format!("{name}.k"), kv_dim, dim, true, false),
            v: Linear::new(init, &format!("{name}.v"), kv_dim, dim, true, false),
            o: Linear::new(init, &format!("{name}.o"), dim, dim, true, true),
            heads,
            dim,
        }
    }

    fn split_heads(&self, g: &mut Graph<'_>, x: Var) -> Var {
        let s = g.shape(x).to_vec();
        let dh = self.dim / self.heads;
        let x = g.reshape(x, &[s[0], s[1], self.heads, dh]);
        let x = g.permute(x, &[0, 2, 1, 3]);
        g.reshape(x, &[s[0] * self.heads, s[1], dh])
    }

    /// `key_mask` is `[N, Lk]`, `true` for keys that may be attended.
    pub fn forward(
        &self,
        g: &mut Graph<'_>,
        queries: Var,
        keys: Var,
        key_mask: Option<Rc<Vec<bool>>>,
    ) -> Var {
        let (n, lq) = (g.shape(queries)[0], g.shape(queries)[1]);
        let dh = self.dim / self.heads;
        let q = self.q.forward(g, queries);
        let k = self.k.forward(g, keys);
        let v = self.v.forward(g, keys);
        let q = self.split_heads(g, q);
        let k = self.split_heads(g, k);
        let v = self.split_heads(g, v);
        let scores = g.bmm(q, k, false, true);
        let scores = g.scale(scores, 1.0 / (dh as f64).sqrt());
        let attn = g.softmax(scores, key_mask.map(|m| (m, self.heads * lq)));
        let out = g.bmm(attn, v, false, false);
        let out = g.reshape(out, &[n, self.heads, lq, dh]);
        let out = g.permute(out, &[0, 2, 1, 3]);
        let out = g.reshape(out, &[n, lq, self.dim]);
        self.o.forward(g, out)
    }
}
