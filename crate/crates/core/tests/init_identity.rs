mod support;

use std::rc::Rc;

use support::{random_text, Lcg};
use textrestore::autograd::Graph;
use textrestore::context::{ContextConfig, ContextTransformer, TokenBatch};
use textrestore::dcformer::ImageCrossAttention;
use textrestore::params::{InitPolicy, ParamStore};
use textrestore::textio::TextConfig;
use textrestore::Tensor;

#[test]
fn zero_init_network_is_the_identity() {
    let o = support::identity_network();
    assert!(o.passed, "{}", o.line());
}

#[test]
fn zero_init_enhancer_is_the_identity() {
    let o = support::identity_cem();
    assert!(o.passed, "{}", o.line());
}

#[test]
fn zero_init_context_transformer_with_identity_projection() {
    let o = support::identity_ct();
    assert!(o.passed, "{}", o.line());
}

#[test]
fn zero_init_modulation_is_the_identity() {
    let o = support::identity_dmm();
    assert!(o.passed, "{}", o.line());
}

fn ct_rows(store: &ParamStore, ct: &ContextTransformer, data: Vec<f64>, mask: Vec<bool>, dim: usize) -> Vec<f64> {
    let l = mask.len();
    let batch = TokenBatch { tokens: Tensor::new(vec![1, l, dim], data).unwrap(), mask: Rc::new(mask) };
    let mut g = Graph::new(store);
    let tv = g.constant(batch.tokens);
    let z = ct.forward(&mut g, tv, &batch.mask);
    g.value(z).data().to_vec()
}

#[test]
fn padding_rows_do_not_reach_real_rows() {
    let text = TextConfig { max_len: 10, dim: 8 };
    let cfg = ContextConfig { shallow_channels: 4, heads: 2, context_dim: 6 };
    let mut store = ParamStore::new();
    let ct = ContextTransformer::new(&mut support::initializer(&mut store, 5, InitPolicy::Standard), "ct", &cfg, 8);
    let mut rng = Lcg::new(21);
    support::jitter_all(&mut store, &mut rng, 0.2);
    let t = random_text(&mut rng, text, 6);
    let base = ct_rows(&store, &ct, t.data().to_vec(), t.mask().to_vec(), 8);

    // Garbage in the padding rows, then swap two of them.
    let mut noisy = t.data().to_vec();
    for v in &mut noisy[6 * 8..] {
        *v = rng.range(-5.0, 5.0);
    }
    for i in 0..8 {
        noisy.swap(7 * 8 + i, 9 * 8 + i);
    }
    let other = ct_rows(&store, &ct, noisy, t.mask().to_vec(), 8);
    assert_eq!(&base[..6 * 6], &other[..6 * 6]);
    assert!(other[6 * 6..].iter().all(|v| *v == 0.0), "padding rows of Z are zeroed");
}

#[test]
fn cross_attention_ignores_context_row_order() {
    let mut store = ParamStore::new();
    let attn =
        ImageCrossAttention::new(&mut support::initializer(&mut store, 6, InitPolicy::Standard), "x", 4, 6, 2);
    let mut rng = Lcg::new(22);
    support::jitter_all(&mut store, &mut rng, 0.2);
    let x = Tensor::new(vec![1, 4, 3, 3], rng.vec(36, -1.0, 1.0)).unwrap();
    let z = rng.vec(5 * 6, -1.0, 1.0);
    let mask = vec![true, true, true, false, true];
    let perm = [4, 2, 0, 3, 1];
    let zp: Vec<f64> = perm.iter().flat_map(|&r| z[r * 6..(r + 1) * 6].to_vec()).collect();
    let mp: Vec<bool> = perm.iter().map(|&r| mask[r]).collect();
    let run = |z: Vec<f64>, m: Vec<bool>| {
        let mut g = Graph::new(&store);
        let xv = g.constant(x.clone());
        let zv = g.constant(Tensor::new(vec![1, 5, 6], z).unwrap());
        let y = attn.forward(&mut g, xv, zv, &Rc::new(m));
        g.value(y).data().to_vec()
    };
    let (a, b) = (run(z.clone(), mask), run(zp, mp));
    let diff = a.iter().zip(&b).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
    assert!(diff < 1e-12, "max diff {diff}");
}
