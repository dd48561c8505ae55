//! Reproducible paired datasets written to disk as PNG plus a JSON manifest.

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{synthesize_pair, DegradationKind, DegradationSpec, LightParams, RainParams};
use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::rng;

const CLEAN_SALT: u64 = 0x0063_6c65_616e;
const PARAM_SALT: u64 = 0x0070_6172_616d;

/// The three test noise levels.
pub const STANDARD_NOISE_LEVELS: [f64; 3] = [15.0, 25.0, 50.0];

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetEntry {
    pub lq_path: String,
    pub hq_path: String,
    pub spec: DegradationSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub entries: Vec<DatasetEntry>,
    pub split: Split,
    pub global_seed: u64,
    /// Directory that relative entry paths resolve against.
    #[serde(skip)]
    pub root: PathBuf,
}

/// A loaded pair.
#[derive(Clone, Debug)]
pub struct Sample {
    pub lq: ImageTensor,
    pub hq: ImageTensor,
    pub spec: DegradationSpec,
}

impl DatasetManifest {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    /// Reads a manifest file (or `<dir>/manifest.json`) and checks that
    /// every referenced image exists.
    pub fn load(path: &Path) -> Result<Self> {
        let file = if path.is_dir() { path.join(MANIFEST_FILE) } else { path.to_path_buf() };
        let mut m: DatasetManifest = serde_json::from_slice(&fs::read(&file)?)?;
        m.root = file.parent().map(Path::to_path_buf).unwrap_or_default();
        for e in &m.entries {
            for p in [&e.lq_path, &e.hq_path] {
                if !m.resolve(p).is_file() {
                    return Err(Error::invalid(format!("manifest references missing file {p}")));
                }
            }
        }
        Ok(m)
    }

    pub fn resolve(&self, p: &str) -> PathBuf {
        self.root.join(p)
    }

    pub fn load_samples(&self) -> Result<Vec<Sample>> {
        self.entries
            .iter()
            .map(|e| {
                Ok(Sample {
                    lq: ImageTensor::load_png(&self.resolve(&e.lq_path))?,
                    hq: ImageTensor::load_png(&self.resolve(&e.hq_path))?,
                    spec: e.spec,
                })
            })
            .collect()
    }
}

/// Fractions of the dataset per degradation kind.
#[derive(Clone, Debug, PartialEq)]
pub struct DegradationMix(Vec<(DegradationKind, f64)>);

impl DegradationMix {
    pub fn new(parts: Vec<(DegradationKind, f64)>) -> Result<Self> {
        if parts.is_empty() {
            return Err(Error::invalid("degradation mix is empty"));
        }
        if parts.iter().any(|(k, f)| *k == DegradationKind::Mixed || !(*f >= 0.0)) {
            return Err(Error::invalid("mix fractions must be ≥ 0 over noise/rain/low/identity"));
        }
        let total: f64 = parts.iter().map(|(_, f)| f).sum();
        if (total - 1.0).abs() > 1e-6 {
            return Err(Error::invalid(format!("mix fractions sum to {total}, expected 1")));
        }
        Ok(Self(parts))
    }

    pub fn single(kind: DegradationKind) -> Self {
        Self(vec![(kind, 1.0)])
    }

    pub fn equal_thirds() -> Self {
        let third = 1.0 / 3.0;
        Self(vec![
            (DegradationKind::Noise, third),
            (DegradationKind::Rain, third),
            (DegradationKind::LowLight, third),
        ])
    }

    /// Largest-remainder allocation of `n` items.
    pub fn counts(&self, n: usize) -> Vec<(DegradationKind, usize)> {
        let raw: Vec<f64> = self.0.iter().map(|(_, f)| f * n as f64).collect();
        let mut counts: Vec<usize> = raw.iter().map(|r| r.floor() as usize).collect();
        let mut order: Vec<usize> = (0..raw.len()).collect();
        order.sort_by(|&a, &b| {
            let (fa, fb) = (raw[a] - raw[a].floor(), raw[b] - raw[b].floor());
            fb.partial_cmp(&fa).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b))
        });
        let mut left = n - counts.iter().sum::<usize>();
        for &i in order.iter().cycle() {
            if left == 0 {
                break;
            }
            counts[i] += 1;
            left -= 1;
        }
        self.0.iter().zip(counts).map(|((k, _), c)| (*k, c)).collect()
    }
}

/// Parses `noise=1/3,rain=1/3,low=1/3` (also accepts decimals).
impl FromStr for DegradationMix {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut parts = Vec::new();
        for item in s.split(',').map(str::trim).filter(|t| !t.is_empty()) {
            let (key, val) = item
                .split_once('=')
                .ok_or_else(|| Error::invalid(format!("mix item `{item}` is not key=fraction")))?;
            let kind = match key.trim() {
                "noise" => DegradationKind::Noise,
                "rain" => DegradationKind::Rain,
                "low" | "low_light" | "lowlight" => DegradationKind::LowLight,
                "identity" | "clean" => DegradationKind::Identity,
                other => return Err(Error::invalid(format!("unknown degradation `{other}`"))),
            };
            parts.push((kind, parse_fraction(val.trim())?));
        }
        Self::new(parts)
    }
}

fn parse_fraction(s: &str) -> Result<f64> {
    let bad = || Error::invalid(format!("bad fraction `{s}`"));
    match s.split_once('/') {
        Some((a, b)) => {
            let (a, b): (f64, f64) = (a.parse().map_err(|_| bad())?, b.parse().map_err(|_| bad())?);
            if b == 0.0 {
                return Err(bad());
            }
            Ok(a / b)
        }
        None => s.parse().map_err(|_| bad()),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetOptions {
    pub size: usize,
    /// Noise entries cycle through these σ values in equal proportion.
    pub noise_levels: Vec<f64>,
    pub split: Split,
}

impl Default for DatasetOptions {
    fn default() -> Self {
        Self { size: 64, noise_levels: STANDARD_NOISE_LEVELS.to_vec(), split: Split::Train }
    }
}

/// Writes `n` pairs to `<out_dir>/{lq,hq}/NNNNNN.png` and `<out_dir>/manifest.json`.
pub fn build_dataset(
    out_dir: &Path,
    n: usize,
    mix: &DegradationMix,
    seed: u64,
    opts: &DatasetOptions,
) -> Result<DatasetManifest> {
    if n == 0 {
        return Err(Error::invalid("dataset size must be ≥ 1"));
    }
    if opts.size < 8 {
        return Err(Error::invalid("image size must be ≥ 8"));
    }
    if opts.noise_levels.is_empty() {
        return Err(Error::invalid("at least one noise level is required"));
    }
    fs::create_dir_all(out_dir.join("lq"))?;
    fs::create_dir_all(out_dir.join("hq"))?;
    let mut entries = Vec::with_capacity(n);
    let mut index = 0usize;
    for (kind, count) in mix.counts(n) {
        for k in 0..count {
            let entry_seed = rng::mix(seed, index as u64);
            let mut params = rng::stream(entry_seed, PARAM_SALT);
            let spec = match kind {
                DegradationKind::Noise => {
                    DegradationSpec::noise(opts.noise_levels[k % opts.noise_levels.len()], entry_seed)
                }
                DegradationKind::Rain => DegradationSpec::rain(sample_rain(&mut params, opts.size), entry_seed),
                DegradationKind::LowLight => DegradationSpec::low_light(sample_light(&mut params), entry_seed),
                _ => DegradationSpec::identity(entry_seed),
            };
            let clean = procedural_image(opts.size, &mut rng::stream(entry_seed, CLEAN_SALT));
            let (lq, hq) = synthesize_pair(&clean, &spec)?;
            let name = format!("{index:06}.png");
            let (lq_path, hq_path) = (format!("lq/{name}"), format!("hq/{name}"));
            lq.save_png(&out_dir.join(&lq_path))?;
            hq.save_png(&out_dir.join(&hq_path))?;
            entries.push(DatasetEntry { lq_path, hq_path, spec });
            index += 1;
        }
    }
    let manifest = DatasetManifest { entries, split: opts.split, global_seed: seed, root: out_dir.to_path_buf() };
    manifest.save(&out_dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}

fn sample_rain(rng: &mut ChaCha8Rng, size: usize) -> RainParams {
    let area = (size * size) as f64 / 4096.0;
    RainParams {
        num_streaks: ((rng.random_range(15.0..35.0) * area).round() as u32).max(1),
        angle_deg: rng.random_range(-25.0..25.0),
        length_px: rng.random_range(6..=14),
        width_px: rng.random_range(1..=2),
        intensity: rng.random_range(0.6..0.95),
    }
}

fn sample_light(rng: &mut ChaCha8Rng) -> LightParams {
    LightParams { gamma: rng.random_range(1.4..2.2), scale: rng.random_range(0.35..0.6) }
}

fn random_color(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> [f64; 3] {
    [rng.random_range(lo..hi), rng.random_range(lo..hi), rng.random_range(lo..hi)]
}

/// Smooth gradients, checkerboards, blurred-noise textures, or soft blobs.
pub fn procedural_image(size: usize, rng: &mut ChaCha8Rng) -> ImageTensor {
    let s = size as f64;
    match rng.random_range(0..4) {
        0 => {
            let (a, b) = (random_color(rng, 0.05, 0.95), random_color(rng, 0.05, 0.95));
            let theta: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            let (dx, dy) = (theta.cos(), theta.sin());
            let freq = rng.random_range(1.0..3.0);
            let amp = rng.random_range(0.0..0.1);
            ImageTensor::from_fn(size, size, |c, y, x| {
                let t = ((x as f64 / s - 0.5) * dx + (y as f64 / s - 0.5) * dy + 0.5).clamp(0.0, 1.0);
                let ripple = amp * (freq * std::f64::consts::TAU * (x as f64 + y as f64) / s).sin();
                (a[c] * (1.0 - t) + b[c] * t + ripple).clamp(0.0, 1.0)
            })
        }
        1 => {
            let (a, b) = (random_color(rng, 0.05, 0.95), random_color(rng, 0.05, 0.95));
            let cell = rng.random_range(4..=16);
            let (ox, oy) = (rng.random_range(0..cell), rng.random_range(0..cell));
            ImageTensor::from_fn(size, size, |c, y, x| {
                if ((x + ox) / cell + (y + oy) / cell) % 2 == 0 {
                    a[c]
                } else {
                    b[c]
                }
            })
        }
        2 => {
            let radius = rng.random_range(2..=4);
            let base = random_color(rng, 0.2, 0.8);
            let contrast = rng.random_range(0.15..0.45);
            let mut planes: Vec<Vec<f64>> = (0..3)
                .map(|_| (0..size * size).map(|_| rng.random_range(-1.0..1.0)).collect())
                .collect();
            for p in &mut planes {
                for _ in 0..2 {
                    *p = box_blur(p, size, radius);
                }
                let m = p.iter().fold(0.0f64, |acc, v| acc.max(v.abs())).max(1e-9);
                p.iter_mut().for_each(|v| *v /= m);
            }
            ImageTensor::from_fn(size, size, |c, y, x| {
                (base[c] + contrast * (0.7 * planes[0][y * size + x] + 0.3 * planes[c][y * size + x]))
                    .clamp(0.0, 1.0)
            })
        }
        _ => {
            let bg = random_color(rng, 0.05, 0.9);
            let blobs: Vec<(f64, f64, f64, [f64; 3])> = (0..rng.random_range(2..6))
                .map(|_| {
                    (
                        rng.random_range(0.0..s),
                        rng.random_range(0.0..s),
                        rng.random_range(s / 10.0..s / 3.0),
                        random_color(rng, 0.05, 0.95),
                    )
                })
                .collect();
            ImageTensor::from_fn(size, size, |c, y, x| {
                let mut v = bg[c];
                for (bx, by, r, col) in &blobs {
                    let d = ((x as f64 - bx).powi(2) + (y as f64 - by).powi(2)).sqrt();
                    let a = (1.0 - (d - r) / 2.0).clamp(0.0, 1.0);
                    v = (1.0 - a) * v + a * col[c];
                }
                v
            })
        }
    }
}

fn box_blur(p: &[f64], size: usize, r: usize) -> Vec<f64> {
    let mut tmp = vec![0.0; p.len()];
    let mut out = vec![0.0; p.len()];
    for y in 0..size {
        for x in 0..size {
            let (lo, hi) = (x.saturating_sub(r), (x + r).min(size - 1));
            tmp[y * size + x] = (lo..=hi).map(|i| p[y * size + i]).sum::<f64>() / (hi - lo + 1) as f64;
        }
    }
    for y in 0..size {
        for x in 0..size {
            let (lo, hi) = (y.saturating_sub(r), (y + r).min(size - 1));
            out[y * size + x] = (lo..=hi).map(|i| tmp[i * size + x]).sum::<f64>() / (hi - lo + 1) as f64;
        }
    }
    out
}
