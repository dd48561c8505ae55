//! Central finite-difference checks of the analytic gradients.
//!
//! Each check reduces an operation's output to `L = Σ out ⊙ R` with a fixed
//! random `R`, then compares `∂L/∂θ` from the tape against
//! `(L(θ + h) − L(θ − h)) / 2h` for parameters and differentiable inputs.

use std::rc::Rc;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autograd::{Graph, Var};
use crate::context::{ContextConfig, ContextEnhancer, ContextTransformer, ShallowFeatures};
use crate::dcformer::{BasicBlock, Caff, DcFormer, DcFormerConfig, Dmm, ImageCrossAttention, ModulationKind};
use crate::params::{InitPolicy, Initializer, ParamStore};
use crate::rng;
use crate::tensor::Tensor;

const CHECK_SALT: u64 = 0x6772_6164;
pub const STEP: f64 = 1e-5;
/// Gradients smaller than this are compared in absolute terms.
pub const GRAD_FLOOR: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct CheckOptions {
    /// Fraction of parameter entries to probe (inputs are always probed).
    pub param_fraction: f64,
    pub tolerance: f64,
    pub seed: u64,
}

impl Default for CheckOptions {
    fn default() -> Self {
        Self { param_fraction: 1.0, tolerance: 1e-4, seed: 0 }
    }
}

#[derive(Clone, Debug)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub checked: usize,
    pub tolerance: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.checked > 0 && self.max_rel_err < self.tolerance
    }
}

/// `|a − n| / max(|a|, |n|, GRAD_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_FLOOR)
}

enum Coord {
    Param(String, usize),
    Input(usize, usize),
}

/// Checks `build` (which maps input vars to an output var) against finite
/// differences. Parameters are read from `store`.
pub fn check<F>(name: &str, store: &mut ParamStore, inputs: &mut [Tensor], build: F, opts: &CheckOptions) -> CheckResult
where
    F: Fn(&mut Graph<'_>, &[Var]) -> Var,
{
    let mut rng = rng::stream(opts.seed, CHECK_SALT);
    let forward = |store: &ParamStore, inputs: &[Tensor], r: Option<&Tensor>| -> (Tensor, Option<f64>) {
        let mut g = Graph::new(store);
        let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
        let out = build(&mut g, &vars);
        let value = g.value(out).clone();
        let loss = r.map(|r| value.data().iter().zip(r.data()).map(|(a, b)| a * b).sum());
        (value, loss)
    };

    let (out, _) = forward(store, inputs, None);
    let r = Tensor::from_fn(out.shape(), |_| StandardNormal.sample(&mut rng));

    let (param_grads, input_grads) = {
        let mut g = Graph::new(store);
        let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
        let out = build(&mut g, &vars);
        let rv = g.constant(r.clone());
        let prod = g.mul(out, rv);
        let numel = r.numel();
        let flat = g.reshape(prod, &[numel]);
        let loss = g.sum_last(flat);
        let grads = g.backward(loss);
        let pg = grads.params().clone();
        let ig: Vec<Vec<f64>> = vars
            .iter()
            .zip(inputs.iter())
            .map(|(v, t)| grads.var(*v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.numel()]))
            .collect();
        (pg, ig)
    };

    let mut coords = Vec::new();
    let names: Vec<String> = store.names().to_vec();
    for n in &names {
        let len = store.get(n).expect("listed").numel();
        for i in 0..len {
            if opts.param_fraction >= 1.0 || rng.random::<f64>() < opts.param_fraction {
                coords.push(Coord::Param(n.clone(), i));
            }
        }
    }
    for (k, t) in inputs.iter().enumerate() {
        coords.extend((0..t.numel()).map(|i| Coord::Input(k, i)));
    }

    let mut res = CheckResult {
        name: name.to_string(),
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        checked: 0,
        tolerance: opts.tolerance,
    };
    for c in coords {
        let (analytic, numeric) = match &c {
            Coord::Param(n, i) => {
                let a = param_grads.get(n).map_or(0.0, |g| g[*i]);
                let orig = store.get(n).expect("listed").data()[*i];
                store.get_mut(n).expect("listed").data_mut()[*i] = orig + STEP;
                let lp = forward(store, inputs, Some(&r)).1.expect("loss");
                store.get_mut(n).expect("listed").data_mut()[*i] = orig - STEP;
                let lm = forward(store, inputs, Some(&r)).1.expect("loss");
                store.get_mut(n).expect("listed").data_mut()[*i] = orig;
                (a, (lp - lm) / (2.0 * STEP))
            }
            Coord::Input(k, i) => {
                let a = input_grads[*k][*i];
                let orig = inputs[*k].data()[*i];
                inputs[*k].data_mut()[*i] = orig + STEP;
                let lp = forward(store, inputs, Some(&r)).1.expect("loss");
                inputs[*k].data_mut()[*i] = orig - STEP;
                let lm = forward(store, inputs, Some(&r)).1.expect("loss");
                inputs[*k].data_mut()[*i] = orig;
                (a, (lp - lm) / (2.0 * STEP))
            }
        };
        res.max_rel_err = res.max_rel_err.max(relative_error(analytic, numeric));
        res.max_abs_err = res.max_abs_err.max((analytic - numeric).abs());
        res.checked += 1;
    }
    res
}

fn normal(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    Tensor::from_fn(shape, |_| StandardNormal.sample(rng))
}

fn unit(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random::<f64>())
}

/// `[1, L, D]` rows with the last `pad` rows zeroed, plus the matching mask.
fn padded_tokens(l: usize, d: usize, pad: usize, rng: &mut impl Rng) -> (Tensor, Rc<Vec<bool>>) {
    let t = Tensor::from_fn(&[1, l, d], |i| if i / d < l - pad { StandardNormal.sample(rng) } else { 0.0 });
    (t, Rc::new((0..l).map(|i| i < l - pad).collect()))
}

fn fresh(seed: u64) -> (ParamStore, rand_chacha::ChaCha8Rng) {
    (ParamStore::new(), rng::stream(seed, CHECK_SALT + 1))
}

macro_rules! init {
    ($store:expr, $seed:expr) => {
        Initializer { store: &mut $store, rng: rng::stream($seed, CHECK_SALT + 2), policy: InitPolicy::Standard }
    };
}

pub fn check_shallow_features(seed: u64) -> CheckResult {
    let (mut store, mut rng) = fresh(seed);
    let m = ShallowFeatures::new(&mut init!(store, seed), "sf", 4);
    let mut inputs = vec![unit(&[1, 3, 8, 8], &mut rng)];
    check("shallow_features", &mut store, &mut inputs, |g, v| m.forward(g, v[0]), &CheckOptions { seed, ..Default::default() })
}

pub fn check_cem(seed: u64) -> CheckResult {
    let (mut store, mut rng) = fresh(seed);
    let cfg = ContextConfig { shallow_channels: 4, heads: 2, context_dim: 8 };
    let m = ContextEnhancer::new(&mut init!(store, seed), "cem", &cfg, 8);
    let (text, mask) = padded_tokens(4, 8, 1, &mut rng);
    let mut inputs = vec![unit(&[1, 3, 8, 8], &mut rng), text];
    check("cem_enhance", &mut store, &mut inputs, |g, v| m.forward(g, v[0], v[1], &mask), &CheckOptions { seed, ..Default::default() })
}

pub fn check_ct(seed: u64) -> CheckResult {
    let (mut store, mut rng) = fresh(seed);
    let cfg = ContextConfig { shallow_channels: 4, heads: 2, context_dim: 6 };
    let m = ContextTransformer::new(&mut init!(store, seed), "ct", &cfg, 8);
    let (text, mask) = padded_tokens(4, 8, 1, &mut rng);
    let mut inputs = vec![text];
    check("ct_context", &mut store, &mut inputs, |g, v| m.forward(g, v[0], &mask), &CheckOptions { seed, ..Default::default() })
}

pub fn check_basic_block(seed: u64) -> CheckResult {
    let (mut store, mut rng) = fresh(seed);
    let m = BasicBlock::new(&mut init!(store, seed), "bb", 4, 2, 2.66);
    let mut inputs = vec![normal(&[1, 4, 4, 4], &mut rng)];
    check("basic_block", &mut store, &mut inputs, |g, v| m.forward(g, v[0]), &CheckOptions { seed, ..Default::default() })
}

pub fn check_cross_attend(seed: u64) -> CheckResult {
    let (mut store, mut rng) = fresh(seed);
    let m = ImageCrossAttention::new(&mut init!(store, seed), "xa", 4, 6, 2);
    let (z, mask) = padded_tokens(3, 6, 1, &mut rng);
    let mut inputs = vec![normal(&[1, 4, 4, 4], &mut rng), z];
    check("image_cross_attend", &mut store, &mut inputs, |g, v| m.forward(g, v[0], v[1], &mask), &CheckOptions { seed, ..Default::default() })
}

pub fn check_caff(seed: u64) -> CheckResult {
    let (mut store, mut rng) = fresh(seed);
    let m = Caff::new(&mut init!(store, seed), "caff", 3);
    let mut inputs = vec![normal(&[1, 3, 2, 2], &mut rng), normal(&[1, 3, 2, 2], &mut rng)];
    check("caff", &mut store, &mut inputs, |g, v| m.forward(g, v[0], v[1]), &CheckOptions { seed, ..Default::default() })
}

fn check_dmm_kind(name: &str, kind: ModulationKind, seed: u64) -> CheckResult {
    let (mut store, mut rng) = fresh(seed);
    let m = Dmm::new(&mut init!(store, seed), "dmm", 4, 6, 2, 2.66, kind);
    let (z, mask) = padded_tokens(3, 6, 1, &mut rng);
    let mut inputs = vec![normal(&[1, 4, 4, 4], &mut rng), z];
    check(name, &mut store, &mut inputs, |g, v| m.forward(g, v[0], v[1], &mask), &CheckOptions { seed, ..Default::default() })
}

pub fn check_dmm(seed: u64) -> CheckResult {
    check_dmm_kind("dmm_step", ModulationKind::Fused, seed)
}

pub fn check_stacked_cross(seed: u64) -> CheckResult {
    check_dmm_kind("stacked_cross_variant", ModulationKind::Stacked, seed)
}

/// Whole toy network, probing a 1% sample of its parameters.
pub fn check_toy_network(seed: u64) -> CheckResult {
    let (mut store, mut rng) = fresh(seed);
    let cfg = DcFormerConfig::toy(64);
    let m = DcFormer::new(&mut init!(store, seed), "net", cfg, ModulationKind::Fused).expect("toy config is valid");
    let (z, mask) = padded_tokens(4, 64, 1, &mut rng);
    let img = unit(&[1, 3, 16, 16], &mut rng);
    let zc = z.clone();
    let mut inputs = vec![img];
    let opts = CheckOptions { param_fraction: 0.01, tolerance: 1e-3, seed };
    check(
        "restore_forward",
        &mut store,
        &mut inputs,
        |g, v| {
            let z = g.constant(zc.clone());
            m.forward(g, v[0], z, &mask)
        },
        &opts,
    )
}

/// Every parameterized operation, in dependency order.
pub fn run_suite(seed: u64) -> Vec<CheckResult> {
    vec![
        check_shallow_features(seed),
        check_cem(seed),
        check_ct(seed),
        check_basic_block(seed),
        check_cross_attend(seed),
        check_caff(seed),
        check_dmm(seed),
        check_stacked_cross(seed),
        check_toy_network(seed),
    ]
}
