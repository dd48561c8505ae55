//! Helpers shared by the integration tests and the acceptance runner.

#![allow(dead_code)]

pub mod oracles;

use std::rc::Rc;

use textrestore::autograd::Graph;
use textrestore::context::{triplet_loss, ContextConfig, ContextTransformer, DegradationContext, TokenBatch};
use textrestore::dcformer::{Caff, Dmm, Mdta, ModulationKind};
use textrestore::degrade::{describe, DegradationSpec, DescribeMode};
use textrestore::evalkit::{psnr, ssim};
use textrestore::gradcheck;
use textrestore::model::{ModelConfig, RestorationModel};
use textrestore::params::{InitPolicy, Initializer, ParamStore};
use textrestore::textio::{HashEncoder, TextConfig, TextEncoder, TextFeature};
use textrestore::train::{combine_losses, rec_loss, total_loss, Stage};
use textrestore::{rng, ImageTensor, Tensor};

/// Result of one acceptance criterion or sub-check.
#[derive(Debug)]
pub struct Outcome {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Outcome {
    pub fn new(name: &str, passed: bool, detail: impl Into<String>) -> Self {
        Self { name: name.to_string(), passed, detail: detail.into() }
    }

    pub fn line(&self) -> String {
        format!("{} {}: {}", if self.passed { "PASS" } else { "FAIL" }, self.name, self.detail)
    }
}

/// Folds sub-checks into one outcome named `name`.
pub fn combine(name: &str, parts: &[Outcome]) -> Outcome {
    let passed = !parts.is_empty() && parts.iter().all(|p| p.passed);
    let detail = parts.iter().map(|p| format!("{} {}", p.name, p.detail)).collect::<Vec<_>>().join("; ");
    Outcome::new(name, passed, detail)
}

/// Small deterministic generator so test inputs do not depend on `rand`.
pub struct Lcg(u64);

impl Lcg {
    pub fn new(seed: u64) -> Self {
        Self(rng::mix(seed, 0x5eed))
    }

    /// Uniform in `[0, 1)`.
    pub fn next(&mut self) -> f64 {
        self.0 = rng::mix(self.0, 1);
        (self.0 >> 11) as f64 / (1u64 << 53) as f64
    }

    pub fn range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next()
    }

    pub fn vec(&mut self, n: usize, lo: f64, hi: f64) -> Vec<f64> {
        (0..n).map(|_| self.range(lo, hi)).collect()
    }

    pub fn below(&mut self, n: usize) -> usize {
        ((self.next() * n as f64) as usize).min(n - 1)
    }
}

pub fn random_image(rng: &mut Lcg, h: usize, w: usize) -> ImageTensor {
    ImageTensor::new(h, w, rng.vec(3 * h * w, 0.0, 1.0)).expect("image")
}

pub fn initializer(store: &mut ParamStore, seed: u64, policy: InitPolicy) -> Initializer<'_> {
    Initializer { store, rng: rng::stream(seed, 0x7465_7374), policy }
}

/// Perturbs every parameter, norm gains included, so no layer starts as a
/// trivial affine map.
pub fn jitter_all(store: &mut ParamStore, rng: &mut Lcg, amount: f64) {
    for (_, t) in store.iter_mut() {
        for v in t.data_mut() {
            *v += rng.range(-amount, amount);
        }
    }
}

fn max_abs(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

// ---------------------------------------------------------------------------
// oracle equivalence

pub const ORACLE_INSTANCES: usize = 20;

pub fn oracle_caff() -> Outcome {
    let mut worst = 0.0f64;
    for k in 0..ORACLE_INSTANCES {
        let mut rng = Lcg::new(100 + k as u64);
        let (n, c, h, w) = (1 + rng.below(2), 1 + rng.below(4), 2 + rng.below(4), 2 + rng.below(4));
        let mut store = ParamStore::new();
        let caff = Caff::new(&mut initializer(&mut store, k as u64, InitPolicy::Standard), "f", c);
        jitter_all(&mut store, &mut rng, 0.3);
        let x = rng.vec(n * c * h * w, -1.0, 1.0);
        let y = rng.vec(n * c * h * w, -1.0, 1.0);
        let mut g = Graph::new(&store);
        let xv = g.constant(Tensor::new(vec![n, c, h, w], x.clone()).unwrap());
        let yv = g.constant(Tensor::new(vec![n, c, h, w], y.clone()).unwrap());
        let out = caff.forward(&mut g, xv, yv);
        let reference = oracles::caff(&store, "f", &x, &y, n, c, h, w);
        worst = worst.max(max_abs(g.value(out).data(), &reference));
    }
    Outcome::new("caff", worst < 1e-9, format!("max abs diff {worst:.2e} (tol 1e-9)"))
}

pub fn oracle_mdta() -> Outcome {
    let mut worst = 0.0f64;
    for k in 0..ORACLE_INSTANCES {
        let mut rng = Lcg::new(200 + k as u64);
        let heads = 1 + rng.below(2);
        let (n, c, h, w) = (1 + rng.below(2), heads * (1 + rng.below(3)), 2 + rng.below(4), 2 + rng.below(4));
        let mut store = ParamStore::new();
        let m = Mdta::new(&mut initializer(&mut store, k as u64, InitPolicy::Standard), "a", c, heads);
        jitter_all(&mut store, &mut rng, 0.3);
        let x = rng.vec(n * c * h * w, -1.0, 1.0);
        let mut g = Graph::new(&store);
        let xv = g.constant(Tensor::new(vec![n, c, h, w], x.clone()).unwrap());
        let out = m.forward(&mut g, xv);
        let reference = oracles::mdta(&store, "a", &x, n, c, h, w, heads);
        worst = worst.max(max_abs(g.value(out).data(), &reference));
    }
    Outcome::new("mdta", worst < 1e-9, format!("max abs diff {worst:.2e} (tol 1e-9)"))
}

fn image_pairs(seed: u64, min: usize) -> Vec<(ImageTensor, ImageTensor)> {
    (0..ORACLE_INSTANCES)
        .map(|k| {
            let mut rng = Lcg::new(seed + k as u64);
            let (h, w) = (min + rng.below(8), min + rng.below(8));
            let a = random_image(&mut rng, h, w);
            let sigma = rng.range(0.01, 0.3);
            let b = ImageTensor::new(h, w, a.data().iter().map(|v| (v + rng.range(-sigma, sigma)).clamp(0.0, 1.0)).collect())
                .unwrap();
            (a, b)
        })
        .collect()
}

pub fn oracle_rec_loss() -> Outcome {
    let worst = image_pairs(300, 2)
        .iter()
        .map(|(a, b)| (rec_loss(a, b).unwrap() - oracles::mae(a.data(), b.data())).abs())
        .fold(0.0, f64::max);
    Outcome::new("rec_loss", worst < 1e-9, format!("max abs diff {worst:.2e} (tol 1e-9)"))
}

pub fn oracle_psnr() -> Outcome {
    let worst = image_pairs(400, 2)
        .iter()
        .map(|(a, b)| (psnr(a, b).unwrap() - oracles::psnr(a, b)).abs())
        .fold(0.0, f64::max);
    Outcome::new("psnr", worst < 1e-9, format!("max abs diff {worst:.2e} dB (tol 1e-9)"))
}

pub fn oracle_ssim() -> Outcome {
    let worst = image_pairs(500, 11)
        .iter()
        .map(|(a, b)| (ssim(a, b).unwrap() - oracles::ssim(a, b)).abs())
        .fold(0.0, f64::max);
    Outcome::new("ssim", worst < 1e-9, format!("max abs diff {worst:.2e} (tol 1e-9)"))
}

pub fn oracle_suite() -> Vec<Outcome> {
    vec![oracle_caff(), oracle_mdta(), oracle_rec_loss(), oracle_psnr(), oracle_ssim()]
}

// ---------------------------------------------------------------------------
// zero-init identities

pub fn toy_text(model: &RestorationModel, text: &str) -> TextFeature {
    HashEncoder::new(model.config().text).encode(text).expect("encode")
}

/// A text feature with random (not hash-derived) rows and a padded tail.
pub fn random_text(rng: &mut Lcg, cfg: TextConfig, used: usize) -> TextFeature {
    let mut data = rng.vec(cfg.max_len * cfg.dim, -1.0, 1.0);
    let mask: Vec<bool> = (0..cfg.max_len).map(|i| i < used).collect();
    for (i, m) in mask.iter().enumerate() {
        if !m {
            data[i * cfg.dim..(i + 1) * cfg.dim].fill(0.0);
        }
    }
    TextFeature::new(data, mask, cfg.dim).expect("text")
}

pub fn identity_network() -> Outcome {
    let mut parts = Vec::new();
    for (label, policy) in [("zero-residual", InitPolicy::ZeroResidual), ("all-zero", InitPolicy::AllZero)] {
        let model = RestorationModel::new(ModelConfig::toy().with_init(policy)).unwrap();
        let mut rng = Lcg::new(7);
        let mut exact = true;
        for (h, w) in [(16, 16), (24, 8), (19, 13)] {
            let img = random_image(&mut rng, h, w);
            let z = model.context_from_text(&random_text(&mut rng, model.config().text, 9)).unwrap();
            exact &= model.restore_unclamped(&img, &z).unwrap().data() == img.data();
        }
        parts.push(Outcome::new(label, exact, if exact { "bit-exact" } else { "output differs from input" }));
    }
    combine("dcformer", &parts)
}

pub fn identity_cem() -> Outcome {
    let model = RestorationModel::new(ModelConfig::toy()).unwrap();
    let mut rng = Lcg::new(8);
    let img = random_image(&mut rng, 16, 16);
    let t = random_text(&mut rng, model.config().text, 11);
    let exact = model.enhance_text(&img, &t).unwrap() == t;
    Outcome::new("cem", exact, if exact { "bit-exact" } else { "rows changed" })
}

pub fn identity_ct() -> Outcome {
    let text = TextConfig { max_len: 12, dim: 16 };
    let cfg = ContextConfig { shallow_channels: 4, heads: 4, context_dim: 16 };
    let mut store = ParamStore::new();
    let ct = ContextTransformer::new(&mut initializer(&mut store, 3, InitPolicy::ZeroResidual), "ct", &cfg, text.dim);
    let eye = Tensor::from_fn(&[16, 16], |i| if i / 16 == i % 16 { 1.0 } else { 0.0 });
    *store.get_mut(&ct.proj_weight_name()).unwrap() = eye;
    let mut rng = Lcg::new(9);
    let t = random_text(&mut rng, text, 7);
    let batch = TokenBatch::from_features(&[&t]).unwrap();
    let mut g = Graph::new(&store);
    let tv = g.constant(batch.tokens);
    let z = ct.forward(&mut g, tv, &batch.mask);
    let exact = g.value(z).data() == t.data();
    Outcome::new("ct", exact, if exact { "bit-exact with identity projection" } else { "rows changed" })
}

pub fn identity_dmm() -> Outcome {
    let mut parts = Vec::new();
    for kind in [ModulationKind::Fused, ModulationKind::Stacked] {
        let mut store = ParamStore::new();
        let dmm = Dmm::new(&mut initializer(&mut store, 4, InitPolicy::ZeroResidual), "d", 4, 8, 2, 2.66, kind);
        let mut rng = Lcg::new(10);
        let x = Tensor::new(vec![2, 4, 5, 6], rng.vec(240, -1.0, 1.0)).unwrap();
        let z = Tensor::new(vec![2, 3, 8], rng.vec(48, -1.0, 1.0)).unwrap();
        let mask = Rc::new(vec![true, true, false, true, false, false]);
        let mut g = Graph::new(&store);
        let xv = g.constant(x.clone());
        let zv = g.constant(z);
        let y = dmm.forward(&mut g, xv, zv, &mask);
        let exact = g.value(y).data() == x.data();
        parts.push(Outcome::new(&format!("{kind:?}").to_lowercase(), exact, if exact { "bit-exact" } else { "changed" }));
    }
    combine("dmm", &parts)
}

pub fn identity_suite() -> Vec<Outcome> {
    vec![identity_network(), identity_cem(), identity_ct(), identity_dmm()]
}

// ---------------------------------------------------------------------------
// loss table

pub fn ctx(values: &[f64]) -> DegradationContext {
    DegradationContext::new(values.to_vec(), vec![true], values.len()).unwrap()
}

pub fn loss_table() -> Vec<Outcome> {
    let mut out = Vec::new();
    let mut row = |name: &str, got: f64, want: f64| {
        out.push(Outcome::new(name, got == want, format!("got {got}, expected {want}")));
    };
    let z = ctx(&[0.0; 5]);
    let far = ctx(&[2f64.sqrt(); 5]);
    let pos = ctx(&[1.0; 5]);
    let neg = ctx(&[1.0, 0.0, 0.0, 0.0, 0.0]);
    row(
        "triplet inactive hinge",
        triplet_loss(std::slice::from_ref(&z), std::slice::from_ref(&z), std::slice::from_ref(&far), 0.5).unwrap(),
        0.0,
    );
    row("triplet degenerate", triplet_loss(std::slice::from_ref(&z), std::slice::from_ref(&z), std::slice::from_ref(&z), 0.5).unwrap(), 0.5);
    row("triplet active", triplet_loss(std::slice::from_ref(&z), &[pos], &[neg], 0.3).unwrap(), 1.1);

    let gt = ImageTensor::filled(8, 8, 0.5);
    let pred = ImageTensor::from_fn(8, 8, |c, y, x| ((c + y * 3 + x * 5) % 7) as f64 / 7.0);
    let rec = rec_loss(&pred, &gt).unwrap();
    row("total refine", total_loss(Stage::Refine, &pred, &gt, None, 0.5, 1.0).unwrap(), rec);
    row("total restore sum", combine_losses(Stage::Restore, 0.2, Some(0.3), 1.0).unwrap(), 0.5);
    row(
        "total restore inactive hinge",
        total_loss(Stage::Restore, &pred, &gt, Some((std::slice::from_ref(&z), std::slice::from_ref(&z), &[far])), 0.5, 1.0).unwrap(),
        rec,
    );
    out
}

// ---------------------------------------------------------------------------
// gradients

pub fn gradient_suite(seed: u64) -> Vec<Outcome> {
    gradcheck::run_suite(seed)
        .into_iter()
        .map(|r| {
            let passed = r.passed();
            Outcome::new(
                &r.name,
                passed,
                format!("max rel err {:.2e} < {:.0e} over {} entries", r.max_rel_err, r.tolerance, r.checked),
            )
        })
        .collect()
}

/// Accurate description of `spec` encoded for `model`.
pub fn gt_text(model: &RestorationModel, spec: &DegradationSpec) -> TextFeature {
    toy_text(model, &describe(spec, DescribeMode::Gt, 0).text)
}
