//! Image quality metrics and the evaluation harnesses: plain restoration
//! quality, the text-impact comparison (accurate vs opposite text) and the
//! architecture ablations.

mod metrics;

use std::collections::BTreeMap;

use serde::{Serialize, Serializer};

use crate::degrade::{describe, DescribeMode, Sample};
use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::model::{RestorationModel, Variant};
use crate::rng;
use crate::textio::{HashEncoder, TextEncoder};

pub use metrics::{format_db, gaussian_window, psnr, ssim, SSIM_K1, SSIM_K2, SSIM_SIGMA, SSIM_WINDOW};

const EVAL_SALT: u64 = 0x6576_616c;
pub const OVERALL: &str = "all";

fn db<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_finite() {
        s.serialize_f64(*v)
    } else {
        s.serialize_str("inf")
    }
}

/// Mean metrics over one split.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Report {
    pub mode: String,
    pub split: String,
    #[serde(serialize_with = "db")]
    pub psnr_mean: f64,
    pub ssim_mean: f64,
    pub n: usize,
}

/// Accumulates per-image scores by split, plus an overall row.
#[derive(Default)]
struct Tally(BTreeMap<String, (f64, f64, usize)>);

impl Tally {
    fn add(&mut self, split: &str, p: f64, s: f64) {
        for key in [split, OVERALL] {
            let e = self.0.entry(key.to_string()).or_insert((0.0, 0.0, 0));
            e.0 += p;
            e.1 += s;
            e.2 += 1;
        }
    }

    /// Per-split rows in name order, with the overall row last.
    fn reports(&self, mode: &str) -> Vec<Report> {
        let row = |k: &str, &(p, s, n): &(f64, f64, usize)| Report {
            mode: mode.to_string(),
            split: k.to_string(),
            psnr_mean: p / n as f64,
            ssim_mean: s / n as f64,
            n,
        };
        let mut out: Vec<Report> =
            self.0.iter().filter(|(k, _)| k.as_str() != OVERALL).map(|(k, v)| row(k, v)).collect();
        if let Some(v) = self.0.get(OVERALL) {
            out.push(row(OVERALL, v));
        }
        out
    }
}

/// How the conditioning text reaches the network.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum TextPath {
    /// Context transformer only, with the given description mode.
    Direct(DescribeMode),
    /// Enhancer then context transformer, with the given description mode.
    ThroughEnhancer(DescribeMode),
}

/// Per-item description seed, so reports depend only on the item index.
pub fn item_seed(seed: u64, index: usize) -> u64 {
    rng::mix(rng::mix(seed, EVAL_SALT), index as u64)
}

/// Restores one sample under the chosen text path.
pub fn restore_sample(
    model: &RestorationModel,
    encoder: &dyn TextEncoder,
    sample: &Sample,
    path: TextPath,
    seed: u64,
) -> Result<ImageTensor> {
    let z = match path {
        TextPath::Direct(mode) => {
            let t = encoder.encode(&describe(&sample.spec, mode, seed).text)?;
            model.context_from_text(&t)?
        }
        TextPath::ThroughEnhancer(mode) => {
            let t = encoder.encode(&describe(&sample.spec, mode, seed).text)?;
            model.context_with_image(&sample.lq, &t)?
        }
    };
    model.restore(&sample.lq, &z)
}

/// Mean PSNR/SSIM of restored outputs per degradation split.
pub fn evaluate(model: &RestorationModel, samples: &[Sample], path: TextPath, seed: u64, mode: &str) -> Result<Vec<Report>> {
    let encoder = HashEncoder::new(model.config().text);
    let mut tally = Tally::default();
    for (i, s) in samples.iter().enumerate() {
        let out = restore_sample(model, &encoder, s, path, item_seed(seed, i))?;
        tally.add(s.spec.kind().as_str(), psnr(&out, &s.hq)?, ssim(&out, &s.hq)?);
    }
    Ok(tally.reports(mode))
}

/// Metrics of the degraded inputs themselves.
pub fn evaluate_unrestored(samples: &[Sample]) -> Result<Vec<Report>> {
    let mut tally = Tally::default();
    for s in samples {
        tally.add(s.spec.kind().as_str(), psnr(&s.lq, &s.hq)?, ssim(&s.lq, &s.hq)?);
    }
    Ok(tally.reports("input"))
}

/// Mean reconstruction loss of the refine path (accurate text) over samples.
pub fn validation_loss(model: &RestorationModel, samples: &[Sample]) -> Result<f64> {
    let encoder = HashEncoder::new(model.config().text);
    let mut total = 0.0;
    for (i, s) in samples.iter().enumerate() {
        let t = encoder.encode(&describe(&s.spec, DescribeMode::Gt, item_seed(0, i)).text)?;
        let z = model.context_from_text(&t)?;
        let out = model.restore_unclamped(&s.lq, &z)?;
        total += crate::train::rec_loss(&out, &s.hq)?;
    }
    Ok(total / samples.len().max(1) as f64)
}

/// A published full-scale figure, kept as context next to toy results.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ReferenceValue {
    pub label: &'static str,
    pub psnr: f64,
    pub ssim: f64,
}

pub const TEXT_IMPACT_REFERENCE: [ReferenceValue; 2] = [
    ReferenceValue { label: "BSD68 sigma=50, full scale, with gt text", psnr: 28.13, ssim: 0.7930 },
    ReferenceValue { label: "BSD68 sigma=50, full scale, with gf text", psnr: 14.46, ssim: 0.4790 },
];

pub const ABLATION_REFERENCE: [ReferenceValue; 4] = [
    ReferenceValue { label: "Rain100L, full scale, without CEM", psnr: 26.54, ssim: 0.8838 },
    ReferenceValue { label: "Rain100L, full scale, full model", psnr: 38.64, ssim: 0.9831 },
    ReferenceValue { label: "LoLv1, full scale, without DMM", psnr: 19.40, ssim: 0.8013 },
    ReferenceValue { label: "LoLv1, full scale, full model", psnr: 23.30, ssim: 0.8457 },
];

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TextImpactReport {
    pub gt_text: Vec<Report>,
    pub gf_text: Vec<Report>,
    /// Full-scale figures for orientation; not reproduced at toy scale.
    pub reference: Vec<ReferenceValue>,
}

impl TextImpactReport {
    pub fn overall_gap(&self) -> f64 {
        let find = |r: &[Report]| r.iter().find(|r| r.split == OVERALL).map_or(f64::NAN, |r| r.psnr_mean);
        find(&self.gt_text) - find(&self.gf_text)
    }
}

/// Restores every item twice, conditioned on the accurate and on the
/// opposite description, through the user-text path.
pub fn run_text_impact(model: &RestorationModel, samples: &[Sample]) -> Result<TextImpactReport> {
    Ok(TextImpactReport {
        gt_text: evaluate(model, samples, TextPath::Direct(DescribeMode::Gt), 0, "gt_text")?,
        gf_text: evaluate(model, samples, TextPath::Direct(DescribeMode::Gf), 0, "gf_text")?,
        reference: TEXT_IMPACT_REFERENCE.to_vec(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationReport {
    pub mode: Variant,
    pub rows: Vec<Report>,
    pub reference: Vec<ReferenceValue>,
}

impl AblationReport {
    pub fn overall(&self) -> Option<&Report> {
        self.rows.iter().find(|r| r.split == OVERALL)
    }
}

/// Evaluates a model trained for `mode` on noisy-oracle descriptions through
/// the automatic path (the enhancer is skipped for `no_cem`).
pub fn run_ablation(
    mode: Variant,
    model: &RestorationModel,
    samples: &[Sample],
    corruption: f64,
    seed: u64,
) -> Result<AblationReport> {
    if model.config().variant != mode {
        return Err(Error::invalid(format!(
            "ablation mode {mode} does not match the checkpoint's variant {}",
            model.config().variant
        )));
    }
    let path = TextPath::ThroughEnhancer(DescribeMode::Noisy { p: corruption });
    Ok(AblationReport {
        mode,
        rows: evaluate(model, samples, path, seed, mode.as_str())?,
        reference: ABLATION_REFERENCE.to_vec(),
    })
}

/// Fixed-width table of reports.
pub fn render_table(reports: &[Report]) -> String {
    let mut s = format!("{:<10} {:<10} {:>8} {:>8} {:>5}\n", "mode", "split", "psnr", "ssim", "n");
    for r in reports {
        s.push_str(&format!(
            "{:<10} {:<10} {:>8} {:>8.4} {:>5}\n",
            r.mode,
            r.split,
            format_db(r.psnr_mean),
            r.ssim_mean,
            r.n
        ));
    }
    s
}
