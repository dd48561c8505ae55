//! Objectives, the two-stage training loop, and checkpoints.

mod checkpoint;
mod loss;

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::context::{triplet_loss_var, TokenBatch};
use crate::degrade::{describe, DatasetManifest, DescribeMode, Sample};
use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::model::ModelConfig;
use crate::optim::{Adam, AdamConfig};
use crate::rng;
use crate::textio::{HashEncoder, TextEncoder, TextFeature};

pub use checkpoint::{Checkpoint, RngState, FORMAT_VERSION, MAGIC};
pub use loss::{
    combine_losses, make_triplet_texts, rec_loss, rec_loss_var, total_loss, ContextTriple, Stage, TripletTexts,
};

const REFINE_SALT: u64 = 0x7265_6669_6e65;
const RESTORE_SALT: u64 = 0x0072_6573_746f_7265;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub batch: usize,
    pub patch: usize,
    /// Iterations per stage.
    pub iters: usize,
    /// Triplet margin.
    pub alpha: f64,
    pub lambda_tri: f64,
    /// Clause corruption probability of the noisy-oracle anchor text.
    pub corruption: f64,
    pub seed: u64,
    pub flip: bool,
    /// Write an intermediate checkpoint every this many iterations (0 = never).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            batch: 4,
            patch: 128,
            iters: 1000,
            alpha: 0.5,
            lambda_tri: 1.0,
            corruption: DescribeMode::DEFAULT_CORRUPTION,
            seed: 0,
            flip: true,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn toy() -> Self {
        Self { patch: 32, iters: 2000, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = self.lr > 0.0 && self.batch > 0 && self.patch > 0 && self.lambda_tri >= 0.0 && self.alpha >= 0.0;
        let betas = (0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2);
        if !positive || !betas || !(0.0..=1.0).contains(&self.corruption) {
            return Err(Error::invalid("training config has out-of-range values"));
        }
        if !self.patch.is_multiple_of(crate::dcformer::SIZE_MULTIPLE) {
            return Err(Error::invalid("patch size must be a multiple of 8"));
        }
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig { lr: self.lr, beta1: self.beta1, beta2: self.beta2, ..AdamConfig::default() }
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub iter: u64,
    pub stage: Stage,
    pub rec_loss: f64,
    pub tri_loss: Option<f64>,
    pub lr: f64,
}

#[derive(Default)]
pub struct TrainHooks<'a> {
    /// Receives one JSON line per iteration.
    pub log: Option<&'a mut dyn Write>,
    /// Target of the periodic checkpoints.
    pub checkpoint_path: Option<&'a Path>,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<LogRecord>,
}

/// Encodes each distinct text once.
pub struct TextCache<'e> {
    encoder: &'e dyn TextEncoder,
    cache: HashMap<String, TextFeature>,
}

impl<'e> TextCache<'e> {
    pub fn new(encoder: &'e dyn TextEncoder) -> Self {
        Self { encoder, cache: HashMap::new() }
    }

    pub fn get(&mut self, text: &str) -> Result<&TextFeature> {
        if !self.cache.contains_key(text) {
            let f = self.encoder.encode(text)?;
            self.cache.insert(text.to_string(), f);
        }
        Ok(&self.cache[text])
    }

    pub fn batch(&mut self, texts: &[String]) -> Result<TokenBatch> {
        for t in texts {
            self.get(t)?;
        }
        let feats: Vec<&TextFeature> = texts.iter().map(|t| &self.cache[t.as_str()]).collect();
        TokenBatch::from_features(&feats)
    }
}

fn random_patch(s: &Sample, patch: usize, flip: bool, rng: &mut impl Rng) -> Result<(ImageTensor, ImageTensor)> {
    let (h, w) = (s.lq.height(), s.lq.width());
    let y = rng.random_range(0..=h - patch);
    let x = rng.random_range(0..=w - patch);
    let mut lq = s.lq.crop(y, x, patch, patch)?;
    let mut hq = s.hq.crop(y, x, patch, patch)?;
    let (fh, fv) = (rng.random::<bool>(), rng.random::<bool>());
    if flip && fh {
        lq = lq.flip_horizontal();
        hq = hq.flip_horizontal();
    }
    if flip && fv {
        lq = lq.flip_vertical();
        hq = hq.flip_vertical();
    }
    Ok((lq, hq))
}

/// Text the refine stage conditions on: the accurate description.
pub fn refine_text(spec: &crate::degrade::DegradationSpec) -> String {
    describe(spec, DescribeMode::Gt, 0).text
}

/// Runs `cfg.iters` iterations of `stage` starting from `init`.
pub fn train_stage(
    stage: Stage,
    samples: &[Sample],
    cfg: &TrainConfig,
    init: Checkpoint,
    hooks: &mut TrainHooks<'_>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    if samples.iter().any(|s| s.lq.height() < cfg.patch || s.lq.width() < cfg.patch || !s.lq.same_shape(&s.hq)) {
        return Err(Error::invalid(format!("every training pair must be at least {0}x{0} and aligned", cfg.patch)));
    }
    if stage == Stage::Refine && init.stage == Stage::Restore {
        return Err(Error::Precondition("the refine stage cannot continue a restore checkpoint".into()));
    }
    let mut model = init.build_model()?;
    let encoder = HashEncoder::new(model.config().text);
    let mut texts = TextCache::new(&encoder);
    let mut adam = Adam::new(cfg.adam());
    let start = if init.stage == stage { init.iteration } else { 0 };
    let salt = match stage {
        Stage::Refine => REFINE_SALT,
        Stage::Restore => RESTORE_SALT,
    };
    let stage_seed = rng::mix(cfg.seed, salt);
    let mut records = Vec::with_capacity(cfg.iters);
    let mut ckpt = Checkpoint {
        model: *model.config(),
        train: cfg.clone(),
        stage,
        iteration: start,
        rng: RngState { seed: cfg.seed, position: start },
        params: init.params,
    };

    for iter in start..start + cfg.iters as u64 {
        let mut rng = rng::stream(stage_seed, iter);
        let mut lqs = Vec::with_capacity(cfg.batch);
        let mut hqs = Vec::with_capacity(cfg.batch);
        let mut specs = Vec::with_capacity(cfg.batch);
        for _ in 0..cfg.batch {
            let s = &samples[rng.random_range(0..samples.len())];
            let (lq, hq) = random_patch(s, cfg.patch, cfg.flip, &mut rng)?;
            lqs.push(lq);
            hqs.push(hq);
            specs.push(s.spec);
        }
        let lq_t = ImageTensor::batch(&lqs.iter().collect::<Vec<_>>())?;
        let hq_t = ImageTensor::batch(&hqs.iter().collect::<Vec<_>>())?;

        let (rec, tri, grads) = match stage {
            Stage::Refine => {
                let gt_texts: Vec<String> = specs.iter().map(refine_text).collect();
                let tb = texts.batch(&gt_texts)?;
                let mut g = Graph::new(model.params());
                let img = g.constant(lq_t);
                let gt = g.constant(hq_t);
                let tv = g.constant(tb.tokens);
                let z = model.ct().forward(&mut g, tv, &tb.mask);
                let pred = model.net().forward(&mut g, img, z, &tb.mask);
                let loss = rec_loss_var(&mut g, pred, gt);
                let rec = g.value(loss).data()[0];
                (rec, None, g.backward(loss))
            }
            Stage::Restore => {
                let triples: Vec<TripletTexts> = specs
                    .iter()
                    .enumerate()
                    .map(|(b, s)| make_triplet_texts(s, cfg.corruption, rng::mix(rng::mix(stage_seed, iter), b as u64)))
                    .collect();
                let anchor = texts.batch(&triples.iter().map(|t| t.anchor.text.clone()).collect::<Vec<_>>())?;
                let pos = texts.batch(&triples.iter().map(|t| t.positive.text.clone()).collect::<Vec<_>>())?;
                let neg = texts.batch(&triples.iter().map(|t| t.negative.text.clone()).collect::<Vec<_>>())?;
                let mut g = Graph::new(model.params());
                let img = g.constant(lq_t);
                let gt = g.constant(hq_t);
                let av = g.constant(anchor.tokens);
                let t = match model.cem() {
                    Some(cem) => cem.forward(&mut g, img, av, &anchor.mask),
                    None => av,
                };
                let z = model.ct().forward(&mut g, t, &anchor.mask);
                let pv = g.constant(pos.tokens);
                let zp = model.ct().forward(&mut g, pv, &pos.mask);
                let zp = g.detach(zp);
                let nv = g.constant(neg.tokens);
                let zn = model.ct().forward(&mut g, nv, &neg.mask);
                let zn = g.detach(zn);
                let pred = model.net().forward(&mut g, img, z, &anchor.mask);
                let rec = rec_loss_var(&mut g, pred, gt);
                let tri = triplet_loss_var(&mut g, z, zp, zn, cfg.alpha);
                let weighted = g.scale(tri, cfg.lambda_tri);
                let loss = g.add(rec, weighted);
                let (rv, tv) = (g.value(rec).data()[0], g.value(tri).data()[0]);
                (rv, Some(tv), g.backward(loss))
            }
        };
        if !rec.is_finite() || tri.is_some_and(|t| !t.is_finite()) {
            return Err(Error::NonFinite(format!(
                "{stage} iteration {iter}: rec_loss {rec}, tri_loss {tri:?}"
            )));
        }
        adam.step(model.params_mut(), grads.params());

        let record = LogRecord { iter, stage, rec_loss: rec, tri_loss: tri, lr: cfg.lr };
        if let Some(w) = hooks.log.as_deref_mut() {
            serde_json::to_writer(&mut *w, &record)?;
            writeln!(w)?;
        }
        records.push(record);

        let done = iter + 1;
        if cfg.checkpoint_every > 0 && done % cfg.checkpoint_every as u64 == 0 {
            if let Some(path) = hooks.checkpoint_path {
                ckpt.iteration = done;
                ckpt.rng.position = done;
                ckpt.params = model.params().clone();
                ckpt.save(path)?;
            }
        }
    }
    ckpt.iteration = start + cfg.iters as u64;
    ckpt.rng.position = ckpt.iteration;
    ckpt.params = model.params().clone();
    Ok(TrainOutcome { checkpoint: ckpt, log: records })
}

/// Loads the manifest's samples and trains one stage; `init` is required for
/// the restore stage and optional (fresh model) for refine.
pub fn train_from_manifest(
    stage: Stage,
    manifest: &DatasetManifest,
    cfg: &TrainConfig,
    model_cfg: ModelConfig,
    init: Option<Checkpoint>,
    hooks: &mut TrainHooks<'_>,
) -> Result<TrainOutcome> {
    let init = match (init, stage) {
        (Some(c), _) => c,
        (None, Stage::Refine) => Checkpoint::fresh(model_cfg, cfg.clone())?,
        (None, Stage::Restore) => {
            return Err(Error::Precondition("the restore stage needs a refine checkpoint (--init)".into()))
        }
    };
    let samples = manifest.load_samples()?;
    train_stage(stage, &samples, cfg, init, hooks)
}
