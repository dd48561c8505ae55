use super::DegradationContext;
use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};

/// Hinge term `[d⁺ − d⁻ + α]₊` for precomputed distances.
pub fn triplet_term(d_pos: f64, d_neg: f64, alpha: f64) -> f64 {
    (d_pos - d_neg + alpha).max(0.0)
}

fn normalized_sq_distance(a: &DegradationContext, b: &DegradationContext) -> f64 {
    let n = (a.len() * a.dim()) as f64;
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n
}

/// Batch-mean triplet loss; distances are squared Frobenius norms divided
/// by `L·d_z`.
pub fn triplet_loss(
    z: &[DegradationContext],
    z_pos: &[DegradationContext],
    z_neg: &[DegradationContext],
    alpha: f64,
) -> Result<f64> {
    if !(alpha >= 0.0) {
        return Err(Error::invalid("triplet margin must be non-negative"));
    }
    if z.is_empty() || z.len() != z_pos.len() || z.len() != z_neg.len() {
        return Err(Error::invalid("triplet batches must be non-empty and equally sized"));
    }
    let mut total = 0.0;
    for ((a, p), n) in z.iter().zip(z_pos).zip(z_neg) {
        let same = |b: &DegradationContext| b.len() == a.len() && b.dim() == a.dim();
        if !same(p) || !same(n) {
            return Err(Error::invalid("triplet contexts must share L and d_z"));
        }
        total += triplet_term(normalized_sq_distance(a, p), normalized_sq_distance(a, n), alpha);
    }
    Ok(total / z.len() as f64)
}

/// Differentiable form over `[N, L, d_z]` values; returns a `[1]` scalar.
pub fn triplet_loss_var(g: &mut Graph<'_>, z: Var, z_pos: Var, z_neg: Var, alpha: f64) -> Var {
    let s = g.shape(z).to_vec();
    let (n, per) = (s[0], s[1] * s[2]);
    let dist = |g: &mut Graph<'_>, other: Var| {
        let diff = g.sub(z, other);
        let sq = g.mul(diff, diff);
        let sq = g.reshape(sq, &[n, per]);
        g.mean_last(sq)
    };
    let dp = dist(g, z_pos);
    let dn = dist(g, z_neg);
    let h = g.sub(dp, dn);
    let h = g.add_scalar(h, alpha);
    let h = g.relu(h);
    g.mean_all(h)
}
