use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::context::{triplet_loss, DegradationContext};
use crate::degrade::{describe, DegradationSpec, DescribeMode, DescriptionText};
use crate::error::{Error, Result};
use crate::image::ImageTensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    /// Accurate text through the context transformer only.
    Refine,
    /// Imperfect text through the enhancer, with the triplet objective.
    Restore,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Refine => "refine",
            Stage::Restore => "restore",
        }
    }
}

impl std::str::FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "refine" => Ok(Stage::Refine),
            "restore" => Ok(Stage::Restore),
            other => Err(Error::invalid(format!("unknown stage `{other}` (refine, restore)"))),
        }
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Mean absolute error over all elements.
pub fn rec_loss(pred: &ImageTensor, gt: &ImageTensor) -> Result<f64> {
    if !pred.same_shape(gt) {
        return Err(Error::shape("prediction and target differ in shape"));
    }
    let n = pred.data().len() as f64;
    Ok(pred.data().iter().zip(gt.data()).map(|(a, b)| (a - b).abs()).sum::<f64>() / n)
}

pub fn rec_loss_var(g: &mut Graph<'_>, pred: Var, gt: Var) -> Var {
    let d = g.sub(pred, gt);
    let d = g.abs(d);
    g.mean_all(d)
}

/// `rec` for refine, `rec + λ·tri` for restore.
pub fn combine_losses(stage: Stage, rec: f64, tri: Option<f64>, lambda_tri: f64) -> Result<f64> {
    match (stage, tri) {
        (Stage::Refine, _) => Ok(rec),
        (Stage::Restore, Some(t)) => Ok(rec + lambda_tri * t),
        (Stage::Restore, None) => Err(Error::invalid("restore stage needs a triplet of contexts")),
    }
}

/// Anchor, positive and negative contexts for a batch.
pub type ContextTriple<'a> = (&'a [DegradationContext], &'a [DegradationContext], &'a [DegradationContext]);

pub fn total_loss(
    stage: Stage,
    pred: &ImageTensor,
    gt: &ImageTensor,
    triple: Option<ContextTriple<'_>>,
    alpha: f64,
    lambda_tri: f64,
) -> Result<f64> {
    let rec = rec_loss(pred, gt)?;
    let tri = match (stage, triple) {
        (Stage::Restore, Some((z, p, n))) => Some(triplet_loss(z, p, n, alpha)?),
        _ => None,
    };
    combine_losses(stage, rec, tri, lambda_tri)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TripletTexts {
    pub anchor: DescriptionText,
    pub positive: DescriptionText,
    pub negative: DescriptionText,
}

/// Noisy-oracle anchor, ground-truth positive, ground-false negative.
pub fn make_triplet_texts(spec: &DegradationSpec, corruption: f64, seed: u64) -> TripletTexts {
    TripletTexts {
        anchor: describe(spec, DescribeMode::Noisy { p: corruption }, seed),
        positive: describe(spec, DescribeMode::Gt, seed),
        negative: describe(spec, DescribeMode::Gf, seed),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn combine_examples() {
        assert_eq!(combine_losses(Stage::Refine, 0.2, None, 1.0).unwrap(), 0.2);
        assert_eq!(combine_losses(Stage::Restore, 0.2, Some(0.3), 1.0).unwrap(), 0.5);
        assert!(combine_losses(Stage::Restore, 0.2, None, 1.0).is_err());
    }

    #[test]
    fn rec_loss_of_constant_offset() {
        let a = ImageTensor::filled(4, 4, 0.25);
        let b = ImageTensor::filled(4, 4, 0.5);
        assert_eq!(rec_loss(&a, &a).unwrap(), 0.0);
        assert!((rec_loss(&a, &b).unwrap() - 0.25).abs() < 1e-15);
    }

    #[test]
    fn zero_corruption_anchor_matches_positive() {
        let spec = DegradationSpec::noise(25.0, 3);
        for seed in 0..20 {
            let t = make_triplet_texts(&spec, 0.0, seed);
            assert_eq!(t.anchor.text, t.positive.text);
            assert_ne!(t.positive.text, t.negative.text);
        }
    }
}
