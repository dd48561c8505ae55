use textrestore::degrade::{build_dataset, DatasetOptions, DegradationMix, Sample};
use textrestore::evalkit::{run_ablation, run_text_impact};
use textrestore::model::{ModelConfig, Variant};
use textrestore::train::{train_stage, Checkpoint, Stage, TrainConfig, TrainHooks, TrainOutcome};

fn samples(seed: u64) -> Vec<Sample> {
    let dir = tempfile::tempdir().unwrap();
    let opts = DatasetOptions { size: 32, ..Default::default() };
    build_dataset(dir.path(), 6, &DegradationMix::equal_thirds(), seed, &opts).unwrap().load_samples().unwrap()
}

fn cfg(seed: u64) -> TrainConfig {
    TrainConfig { iters: 3, batch: 2, patch: 16, seed, ..TrainConfig::toy() }
}

fn run(stage: Stage, data: &[Sample], cfg: &TrainConfig, init: Checkpoint) -> (TrainOutcome, Vec<u8>) {
    let mut log = Vec::new();
    let out = train_stage(stage, data, cfg, init, &mut TrainHooks { log: Some(&mut log), ..Default::default() }).unwrap();
    (out, log)
}

fn two_stages(seed: u64) -> (TrainOutcome, Vec<u8>, TrainOutcome, Vec<u8>) {
    let data = samples(3);
    let c = cfg(seed);
    let (r, rlog) = run(Stage::Refine, &data, &c, Checkpoint::fresh(ModelConfig::toy(), c.clone()).unwrap());
    let (f, flog) = run(Stage::Restore, &data, &c, r.checkpoint.clone());
    (r, rlog, f, flog)
}

#[test]
fn identical_seeds_give_identical_logs_parameters_and_reports() {
    let (r1, rl1, f1, fl1) = two_stages(5);
    let (r2, rl2, f2, fl2) = two_stages(5);
    assert_eq!(rl1, rl2);
    assert_eq!(fl1, fl2);
    assert_eq!(r1.log, r2.log);
    assert_eq!(f1.checkpoint.to_bytes().unwrap(), f2.checkpoint.to_bytes().unwrap());

    let data = samples(4);
    let (m1, m2) = (f1.checkpoint.build_model().unwrap(), f2.checkpoint.build_model().unwrap());
    assert_eq!(run_text_impact(&m1, &data).unwrap(), run_text_impact(&m2, &data).unwrap());
    assert_eq!(
        run_ablation(Variant::Full, &m1, &data, 0.3, 9).unwrap(),
        run_ablation(Variant::Full, &m2, &data, 0.3, 9).unwrap()
    );
}

#[test]
fn a_different_seed_changes_the_run() {
    let (_, a, _, _) = two_stages(5);
    let (_, b, _, _) = two_stages(6);
    assert_ne!(a, b);
}

#[test]
fn refine_logs_no_triplet_term_and_restore_always_does() {
    let (r, rl, f, fl) = two_stages(1);
    assert_eq!(r.log.len(), 3);
    assert!(r.log.iter().all(|l| l.stage == Stage::Refine && l.tri_loss.is_none()));
    assert!(f.log.iter().all(|l| l.stage == Stage::Restore && l.tri_loss.is_some_and(|t| t >= 0.0)));
    assert_eq!(f.checkpoint.stage, Stage::Restore);
    assert_eq!(f.checkpoint.iteration, 3);
    // the log sink receives one JSON line per iteration
    for (bytes, n) in [(rl, 3), (fl, 3)] {
        let text = String::from_utf8(bytes).unwrap();
        assert_eq!(text.lines().count(), n);
        for line in text.lines() {
            serde_json::from_str::<serde_json::Value>(line).unwrap();
        }
    }
}

#[test]
fn refine_cannot_continue_a_restore_checkpoint() {
    let (_, _, f, _) = two_stages(2);
    let data = samples(3);
    let err = train_stage(Stage::Refine, &data, &cfg(2), f.checkpoint, &mut TrainHooks::default()).unwrap_err();
    assert!(matches!(err, textrestore::Error::Precondition(_)));
}
