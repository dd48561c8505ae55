//! Procedural synthesis of degraded/clean image pairs.
//!
//! Three degradations are supported: additive Gaussian noise, composited
//! rain streaks, and a multiplicative low-light curve `s·I^γ`. When several
//! are active they are applied in the fixed order noise → rain → light.

mod dataset;
mod describe;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::rng;

pub use dataset::{
    build_dataset, DatasetEntry, DatasetManifest, DatasetOptions, DegradationMix, Sample, Split, MANIFEST_FILE,
    STANDARD_NOISE_LEVELS,
};
pub use describe::{describe, noise_level, DescribeMode, DescriptionText, NoiseLevel, Provenance};

const NOISE_SALT: u64 = 0x006e_6f69_7365;
const RAIN_SALT: u64 = 0x7261_696e;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RainParams {
    pub num_streaks: u32,
    pub angle_deg: f64,
    pub length_px: u32,
    pub width_px: u32,
    pub intensity: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LightParams {
    pub gamma: f64,
    pub scale: f64,
}

/// Ground-truth record of what was done to a clean image.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DegradationSpec {
    /// Gaussian noise standard deviation on the 0–255 scale.
    pub noise_sigma: f64,
    pub rain: Option<RainParams>,
    pub light: Option<LightParams>,
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DegradationKind {
    Identity,
    Noise,
    Rain,
    LowLight,
    Mixed,
}

impl DegradationKind {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Identity => "identity",
            Self::Noise => "noise",
            Self::Rain => "rain",
            Self::LowLight => "low_light",
            Self::Mixed => "mixed",
        }
    }
}

impl std::fmt::Display for DegradationKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl DegradationSpec {
    pub fn identity(seed: u64) -> Self {
        Self { noise_sigma: 0.0, rain: None, light: None, seed }
    }

    pub fn noise(sigma: f64, seed: u64) -> Self {
        Self { noise_sigma: sigma, ..Self::identity(seed) }
    }

    pub fn rain(rain: RainParams, seed: u64) -> Self {
        Self { rain: Some(rain), ..Self::identity(seed) }
    }

    pub fn low_light(light: LightParams, seed: u64) -> Self {
        Self { light: Some(light), ..Self::identity(seed) }
    }

    pub fn has_noise(&self) -> bool {
        self.noise_sigma > 0.0
    }

    pub fn has_rain(&self) -> bool {
        self.rain.is_some_and(|r| r.num_streaks > 0)
    }

    pub fn has_low_light(&self) -> bool {
        self.light.is_some()
    }

    pub fn is_identity(&self) -> bool {
        !self.has_noise() && !self.has_rain() && !self.has_low_light()
    }

    pub fn kind(&self) -> DegradationKind {
        match (self.has_noise(), self.has_rain(), self.has_low_light()) {
            (false, false, false) => DegradationKind::Identity,
            (true, false, false) => DegradationKind::Noise,
            (false, true, false) => DegradationKind::Rain,
            (false, false, true) => DegradationKind::LowLight,
            _ => DegradationKind::Mixed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.noise_sigma;
        if !(s == 0.0 || (1.0..=100.0).contains(&s)) {
            return Err(Error::invalid(format!("noise sigma {s} outside {{0}} ∪ [1, 100]")));
        }
        if let Some(r) = &self.rain {
            validate_rain(r)?;
        }
        if let Some(l) = &self.light {
            validate_light(l)?;
        }
        Ok(())
    }
}

fn validate_rain(r: &RainParams) -> Result<()> {
    if !(r.intensity > 0.0 && r.intensity <= 1.0) {
        return Err(Error::invalid(format!("rain intensity {} outside (0, 1]", r.intensity)));
    }
    if !r.angle_deg.is_finite() {
        return Err(Error::invalid("rain angle must be finite"));
    }
    if r.length_px == 0 || r.width_px == 0 {
        return Err(Error::invalid("rain streak length and width must be ≥ 1 px"));
    }
    Ok(())
}

fn validate_light(l: &LightParams) -> Result<()> {
    if !(l.gamma >= 1.0 && l.gamma.is_finite()) {
        return Err(Error::invalid(format!("gamma {} must be ≥ 1", l.gamma)));
    }
    if !(l.scale > 0.0 && l.scale <= 1.0) {
        return Err(Error::invalid(format!("light scale {} outside (0, 1]", l.scale)));
    }
    Ok(())
}

/// `clamp(img + n/255)` with `n ~ N(0, σ²)` drawn from `seed`.
pub fn apply_gaussian_noise(img: &ImageTensor, sigma: f64, seed: u64) -> Result<ImageTensor> {
    if !(sigma >= 0.0) {
        return Err(Error::invalid(format!("noise sigma {sigma} must be ≥ 0")));
    }
    let mut out = img.clone();
    if sigma == 0.0 {
        return Ok(out);
    }
    let mut rng = rng::stream(seed, NOISE_SALT);
    let std = sigma / 255.0;
    for v in out.data_mut() {
        let n: f64 = StandardNormal.sample(&mut rng);
        *v = (*v + std * n).clamp(0.0, 1.0);
    }
    Ok(out)
}

/// Alpha-composites anti-aliased line segments over the image.
///
/// Streak centers are drawn on the integer pixel grid so the centre pixel
/// of every streak is fully covered.
pub fn apply_rain(img: &ImageTensor, rain: &RainParams, seed: u64) -> Result<ImageTensor> {
    validate_rain(rain)?;
    let mut out = img.clone();
    let (h, w) = (img.height(), img.width());
    let mut rng = rng::stream(seed, RAIN_SALT);
    let theta = rain.angle_deg.to_radians();
    let (dx, dy) = (theta.sin(), theta.cos());
    let half_len = f64::from(rain.length_px) / 2.0;
    let half_w = f64::from(rain.width_px) / 2.0;
    for _ in 0..rain.num_streaks {
        let cx = rng.random_range(0..w) as f64;
        let cy = rng.random_range(0..h) as f64;
        let (x0, y0) = (cx - half_len * dx, cy - half_len * dy);
        let (x1, y1) = (cx + half_len * dx, cy + half_len * dy);
        let pad = half_w + 1.0;
        let xmin = (x0.min(x1) - pad).floor().max(0.0) as usize;
        let xmax = ((x0.max(x1) + pad).ceil().max(0.0) as usize).min(w - 1);
        let ymin = (y0.min(y1) - pad).floor().max(0.0) as usize;
        let ymax = ((y0.max(y1) + pad).ceil().max(0.0) as usize).min(h - 1);
        for y in ymin..=ymax {
            for x in xmin..=xmax {
                let d = segment_distance(x as f64, y as f64, (x0, y0), (x1, y1));
                let m = (half_w + 0.5 - d).clamp(0.0, 1.0);
                if m > 0.0 {
                    for c in 0..3 {
                        let v = out.get(c, y, x);
                        out.set(c, y, x, (1.0 - m) * v + m * rain.intensity);
                    }
                }
            }
        }
    }
    Ok(out)
}

fn segment_distance(px: f64, py: f64, a: (f64, f64), b: (f64, f64)) -> f64 {
    let (vx, vy) = (b.0 - a.0, b.1 - a.1);
    let len2 = vx * vx + vy * vy;
    let t = if len2 > 0.0 { (((px - a.0) * vx + (py - a.1) * vy) / len2).clamp(0.0, 1.0) } else { 0.0 };
    let (qx, qy) = (a.0 + t * vx, a.1 + t * vy);
    ((px - qx).powi(2) + (py - qy).powi(2)).sqrt()
}

/// `clamp(scale · img^gamma)` elementwise.
pub fn apply_low_light(img: &ImageTensor, light: &LightParams) -> Result<ImageTensor> {
    validate_light(light)?;
    let mut out = img.clone();
    for v in out.data_mut() {
        *v = (light.scale * v.powf(light.gamma)).clamp(0.0, 1.0);
    }
    Ok(out)
}

/// Returns `(lq, hq)` with `hq == clean`.
pub fn synthesize_pair(clean: &ImageTensor, spec: &DegradationSpec) -> Result<(ImageTensor, ImageTensor)> {
    spec.validate()?;
    let mut lq = clean.clone();
    if spec.has_noise() {
        lq = apply_gaussian_noise(&lq, spec.noise_sigma, spec.seed)?;
    }
    if let Some(rain) = spec.rain.as_ref().filter(|r| r.num_streaks > 0) {
        lq = apply_rain(&lq, rain, spec.seed)?;
    }
    if let Some(light) = &spec.light {
        lq = apply_low_light(&lq, light)?;
    }
    Ok((lq, clean.clone()))
}
