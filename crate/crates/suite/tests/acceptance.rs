//! Acceptance runner: one PASS/FAIL line per criterion.
//!
//! Runs without the libtest harness. Positional arguments filter criteria by
//! name substring, e.g. `cargo test --test acceptance -- service`.

#[path = "../../core/tests/support/mod.rs"]
mod support;

#[path = "../../assist/tests/common/mod.rs"]
mod common;

use std::path::Path;
use std::time::Instant;

use anyhow::{ensure, Result};
use reqwest::StatusCode;
use support::{combine, Outcome};
use textrestore::degrade::{
    build_dataset, DatasetOptions, DegradationKind, DegradationMix, DescribeMode, Sample, Split,
};
use textrestore::evalkit::{
    evaluate, evaluate_unrestored, render_table, run_ablation, run_text_impact, validation_loss, Report, TextPath,
};
use textrestore::model::{ModelConfig, Variant};
use textrestore::train::{train_stage, Checkpoint, Stage, TrainConfig, TrainHooks, TrainOutcome};
use textrestore_assist::config::{Fallback, ProviderKind, ServiceConfig};
use textrestore_assist::service::{checkpoint_id, AppState};

const NOISE_ITERS: usize = 2000;
const MIX_REFINE_ITERS: usize = 6000;
const MIX_RESTORE_ITERS: usize = 2000;
const DETERMINISM_ITERS: usize = 25;
const ABLATION_CORRUPTION: f64 = DescribeMode::DEFAULT_CORRUPTION;

struct Data {
    train: Vec<Sample>,
    test: Vec<Sample>,
}

fn dataset(dir: &Path, n_train: usize, n_test: usize, mix: &DegradationMix, opts: DatasetOptions, seed: u64) -> Data {
    let train = build_dataset(&dir.join("train"), n_train, mix, seed, &opts).unwrap();
    let test_opts = DatasetOptions { split: Split::Test, ..opts };
    let test = build_dataset(&dir.join("test"), n_test, mix, seed + 1, &test_opts).unwrap();
    Data { train: train.load_samples().unwrap(), test: test.load_samples().unwrap() }
}

fn overall(rows: &[Report]) -> &Report {
    rows.iter().find(|r| r.split == "all").expect("overall row")
}

fn two_stage(data: &Data, variant: Variant, refine_iters: usize, restore_iters: usize) -> Result<(TrainOutcome, TrainOutcome)> {
    let refine_cfg = TrainConfig { iters: refine_iters, ..TrainConfig::toy() };
    let restore_cfg = TrainConfig { iters: restore_iters, ..TrainConfig::toy() };
    let init = Checkpoint::fresh(ModelConfig::toy().with_variant(variant), refine_cfg.clone())?;
    let refine = train_stage(Stage::Refine, &data.train, &refine_cfg, init, &mut TrainHooks::default())?;
    let restore = train_stage(Stage::Restore, &data.train, &restore_cfg, refine.checkpoint.clone(), &mut TrainHooks::default())?;
    Ok((refine, restore))
}

fn toy_noise(dir: &Path) -> Result<Outcome> {
    let opts = DatasetOptions { noise_levels: vec![25.0], ..Default::default() };
    let data = dataset(dir, 200, 20, &DegradationMix::single(DegradationKind::Noise), opts, 100);
    let cfg = TrainConfig { iters: NOISE_ITERS, ..TrainConfig::toy() };
    let init = Checkpoint::fresh(ModelConfig::toy(), cfg.clone())?;
    let val0 = validation_loss(&init.build_model()?, &data.test)?;
    let out = train_stage(Stage::Refine, &data.train, &cfg, init, &mut TrainHooks::default())?;
    let model = out.checkpoint.build_model()?;
    let val1 = validation_loss(&model, &data.test)?;
    let before = overall(&evaluate_unrestored(&data.test)?).psnr_mean;
    let after = overall(&evaluate(&model, &data.test, TextPath::Direct(DescribeMode::Gt), 0, "refine")?).psnr_mean;
    let gain = after - before;
    Ok(Outcome::new(
        "toy noise training",
        gain >= 3.0 && val1 < val0,
        format!("held-out PSNR {before:.2} -> {after:.2} dB (gain {gain:.2} >= 3); validation loss {val0:.4} -> {val1:.4}"),
    ))
}

fn mixed_data(dir: &Path) -> Data {
    dataset(dir, 300, 30, &DegradationMix::equal_thirds(), DatasetOptions::default(), 200)
}

fn text_direction(data: &Data, full: &TrainOutcome) -> Result<Outcome> {
    let model = full.checkpoint.build_model()?;
    let report = run_text_impact(&model, &data.test)?;
    eprint!("{}{}", render_table(&report.gt_text), render_table(&report.gf_text));
    let gap = report.overall_gap();
    let mut worse = Vec::new();
    for gt in &report.gt_text {
        let gf = report.gf_text.iter().find(|r| r.split == gt.split).expect("matching split");
        if gt.ssim_mean <= gf.ssim_mean {
            worse.push(format!("{} ({:.4} vs {:.4})", gt.split, gt.ssim_mean, gf.ssim_mean));
        }
    }
    let detail = if worse.is_empty() {
        format!("gap {gap:.2} dB >= 2, gt SSIM higher on every split")
    } else {
        format!("gap {gap:.2} dB, gt SSIM not higher on {}", worse.join(", "))
    };
    Ok(Outcome::new("text conditioning direction", gap >= 2.0 && worse.is_empty(), detail))
}

fn ablation(data: &Data, refine: &TrainOutcome, full: &TrainOutcome) -> Result<Outcome> {
    let full = run_ablation(Variant::Full, &full.checkpoint.build_model()?, &data.test, ABLATION_CORRUPTION, 0)?;

    // no_cem branches off the shared refine stage: refine never touches the enhancer.
    let no_cem_init = refine.checkpoint.clone().into_variant(Variant::NoCem)?;
    let cfg = TrainConfig { iters: MIX_RESTORE_ITERS, ..TrainConfig::toy() };
    let no_cem = train_stage(Stage::Restore, &data.train, &cfg, no_cem_init, &mut TrainHooks::default())?;
    let no_cem = run_ablation(Variant::NoCem, &no_cem.checkpoint.build_model()?, &data.test, ABLATION_CORRUPTION, 0)?;

    let (_, no_dmm) = two_stage(data, Variant::NoDmm, MIX_REFINE_ITERS, MIX_RESTORE_ITERS)?;
    let no_dmm = run_ablation(Variant::NoDmm, &no_dmm.checkpoint.build_model()?, &data.test, ABLATION_CORRUPTION, 0)?;

    for r in [&full, &no_cem, &no_dmm] {
        eprint!("{}", render_table(&r.rows));
    }
    let (f, d, c) = (overall(&full.rows), overall(&no_dmm.rows), overall(&no_cem.rows));
    Ok(Outcome::new(
        "ablation ordering",
        f.psnr_mean >= d.psnr_mean,
        format!(
            "full {:.2} dB >= no_dmm {:.2} dB (no_cem recorded: {:.2} dB / {:.4})",
            f.psnr_mean, d.psnr_mean, c.psnr_mean, c.ssim_mean
        ),
    ))
}

fn determinism(data: &Data) -> Result<Outcome> {
    let run = || -> Result<_> {
        let (refine, restore) = two_stage(data, Variant::Full, DETERMINISM_ITERS, DETERMINISM_ITERS)?;
        let model = restore.checkpoint.build_model()?;
        let ti = run_text_impact(&model, &data.test)?;
        let ab = run_ablation(Variant::Full, &model, &data.test, ABLATION_CORRUPTION, 3)?;
        Ok((refine.log, restore.log, ti, ab))
    };
    let (a, b) = (run()?, run()?);
    let same_logs = a.0 == b.0 && a.1 == b.1;
    let same_reports = a.2 == b.2 && a.3 == b.3;
    Ok(Outcome::new(
        "determinism",
        same_logs && same_reports,
        format!(
            "{} logged iterations {}, reports {}",
            a.0.len() + a.1.len(),
            if same_logs { "identical" } else { "differ" },
            if same_reports { "identical" } else { "differ" }
        ),
    ))
}

async fn service_errors(ckpt: &Checkpoint) -> Result<String> {
    let c = reqwest::Client::new();
    let base = common::spawn(AppState::new(ckpt.build_model()?, "acceptance".into(), ServiceConfig::default())?).await;
    let id = common::create(&c, &base).await?;
    let (st, _) = common::message(&c, &base, &id, "restore", "").await?;
    ensure!(st == StatusCode::CONFLICT, "restore before upload returned {st}");
    let (st, _) = common::message(&c, &base, "00000000-0000-4000-8000-000000000000", "describe", "").await?;
    ensure!(st == StatusCode::NOT_FOUND, "unknown session returned {st}");

    let port = std::net::TcpListener::bind("127.0.0.1:0")?.local_addr()?.port();
    let mut cfg = ServiceConfig::default();
    cfg.provider.kind = ProviderKind::Remote;
    cfg.provider.mllm_endpoint = Some(format!("http://127.0.0.1:{port}/"));
    cfg.provider.timeout_secs = 2.0;
    cfg.provider.fallback = Fallback::None;
    let base = common::spawn(AppState::new(ckpt.build_model()?, "acceptance".into(), cfg)?).await;
    let id = common::create(&c, &base).await?;
    let (png, spec) = common::noisy_upload();
    common::upload(&c, &base, &id, &png, Some(&spec)).await?;
    let (st, _) = common::message(&c, &base, &id, "restore", "").await?;
    ensure!(st == StatusCode::BAD_GATEWAY, "provider failure returned {st}");
    Ok("409 before upload, 404 unknown session, 502 provider failure".into())
}

fn service(ckpt: &Checkpoint) -> Result<Outcome> {
    let bytes = ckpt.to_bytes()?;
    let state = AppState::new(ckpt.build_model()?, checkpoint_id(&bytes), ServiceConfig::default())?;
    let rt = tokio::runtime::Runtime::new()?;
    let result = rt.block_on(async {
        let base = common::spawn(state).await;
        let life = common::lifecycle(&base).await?;
        let errors = service_errors(ckpt).await?;
        anyhow::Ok(format!("{life}; {errors}"))
    });
    Ok(match result {
        Ok(detail) => Outcome::new("service contract", true, detail),
        Err(e) => Outcome::new("service contract", false, format!("{e:#}")),
    })
}

struct Runner {
    filters: Vec<String>,
    results: Vec<Outcome>,
}

impl Runner {
    fn wants(&self, name: &str) -> bool {
        self.filters.is_empty() || self.filters.iter().any(|f| name.contains(f.as_str()))
    }

    fn run(&mut self, name: &str, f: impl FnOnce() -> Result<Outcome>) {
        if !self.wants(name) {
            return;
        }
        let start = Instant::now();
        let outcome = f().unwrap_or_else(|e| Outcome::new(name, false, format!("error: {e:#}")));
        println!("{}  [{:.0?}]", outcome.line(), start.elapsed());
        self.results.push(outcome);
    }
}

fn main() {
    let filters = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut r = Runner { filters, results: Vec::new() };
    let dir = tempfile::tempdir().unwrap();

    r.run("gradient suite", || {
        let start = Instant::now();
        let rows = support::gradient_suite(7);
        let secs = start.elapsed().as_secs_f64();
        let all = combine("gradient suite", &rows);
        Ok(Outcome::new("gradient suite", all.passed && secs < 300.0, format!("{} ({secs:.0} s < 300 s)", all.detail)))
    });
    r.run("oracle equivalence", || Ok(combine("oracle equivalence", &support::oracle_suite())));
    r.run("init identity", || Ok(combine("init identity", &support::identity_suite())));
    r.run("loss table", || Ok(combine("loss table", &support::loss_table())));
    r.run("toy noise training", || toy_noise(&dir.path().join("noise")));

    let mixed = ["text conditioning direction", "ablation ordering", "service contract"];
    if mixed.iter().any(|n| r.wants(n)) || r.wants("determinism") {
        let data = mixed_data(&dir.path().join("mixed"));
        eprint!("{}", render_table(&evaluate_unrestored(&data.test).unwrap()));
        if mixed.iter().any(|n| r.wants(n)) {
            match two_stage(&data, Variant::Full, MIX_REFINE_ITERS, MIX_RESTORE_ITERS) {
                Ok((refine, full)) => {
                    r.run("text conditioning direction", || text_direction(&data, &full));
                    r.run("ablation ordering", || ablation(&data, &refine, &full));
                    r.run("service contract", || service(&full.checkpoint));
                }
                Err(e) => {
                    for name in mixed {
                        r.run(name, || Err(anyhow::anyhow!("mixed training failed: {e:#}")));
                    }
                }
            }
        }
        r.run("determinism", || determinism(&data));
    }

    let failed = r.results.iter().filter(|o| !o.passed).count();
    println!("\n{} criteria, {} passed, {} failed", r.results.len(), r.results.len() - failed, failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
