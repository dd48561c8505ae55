use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};
use textrestore::degrade::{
    build_dataset, DatasetManifest, DatasetOptions, DegradationMix, DegradationSpec, DescribeMode, Split,
    STANDARD_NOISE_LEVELS,
};
use textrestore::evalkit::{self, render_table, Report, TextPath};
use textrestore::gradcheck;
use textrestore::model::Variant;
use textrestore::textio::{
    DescriptionProvider, HashEncoder, OracleProvider, ProviderRequest, RemoteMllmProvider, TextEncoder,
    DEFAULT_PROMPT,
};
use textrestore::train::{train_from_manifest, Checkpoint, Stage, TrainHooks};
use textrestore::ImageTensor;

use crate::config::{ProviderKind, ServiceConfig, TrainFile};
use crate::service::{serve, AppState};

#[derive(Parser, Debug)]
#[command(name = "textrestore", version, about = "Text-conditioned image restoration toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum SplitArg {
    Train,
    Test,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum TextArg {
    Gt,
    Gf,
    Noisy,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Synthesize a paired dataset.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        n: usize,
        /// e.g. `noise=1/3,rain=1/3,low=1/3`
        #[arg(long, default_value = "noise=1/3,rain=1/3,low=1/3")]
        mix: DegradationMix,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 64)]
        size: usize,
        /// Comma-separated σ values (0–255 scale) cycled by noise entries.
        #[arg(long, value_delimiter = ',')]
        noise_levels: Option<Vec<f64>>,
        #[arg(long, value_enum, default_value = "train")]
        split: SplitArg,
    },
    /// Run one training stage.
    Train {
        #[arg(long)]
        stage: Stage,
        #[arg(long)]
        manifest: PathBuf,
        /// TOML file with preset, variant and `[train]` overrides.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Checkpoint to continue from (required for the restore stage).
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// JSONL loss log.
        #[arg(long)]
        log: Option<PathBuf>,
        /// Overrides the configured iteration count.
        #[arg(long)]
        iters: Option<usize>,
    },
    /// PSNR/SSIM of a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        report: Option<PathBuf>,
        /// Oracle description used to condition each image.
        #[arg(long, value_enum, default_value = "gt")]
        text: TextArg,
        /// Skip the context enhancer (user-text path).
        #[arg(long)]
        direct: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Accurate vs opposite description on the same images.
    TextImpact {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Evaluate a checkpoint trained for one architecture variant.
    Ablate {
        #[arg(long)]
        mode: Variant,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long, default_value_t = DescribeMode::DEFAULT_CORRUPTION)]
        corruption: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Restore a single PNG.
    Restore {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Description to condition on; bypasses the provider and the enhancer.
        #[arg(long)]
        text: Option<String>,
        #[arg(long, value_enum, default_value = "oracle")]
        provider: ProviderKind,
        /// JSON degradation spec for the oracle provider.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        endpoint: Option<String>,
    },
    /// Finite-difference gradient checks of every parameterized operation.
    Gradcheck {
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
    /// Run the HTTP session service.
    Serve {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        port: Option<u16>,
        /// TOML service config; flags override its values.
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

/// Parses `argv` and runs the command; returns the process exit code.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}

fn write_json(path: Option<&Path>, value: &impl serde::Serialize) -> anyhow::Result<()> {
    if let Some(p) = path {
        let mut f = BufWriter::new(File::create(p).with_context(|| format!("creating {}", p.display()))?);
        serde_json::to_writer_pretty(&mut f, value)?;
        writeln!(f)?;
    }
    Ok(())
}

fn load_checkpoint(path: &Path) -> anyhow::Result<Checkpoint> {
    Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn load_manifest(path: &Path) -> anyhow::Result<DatasetManifest> {
    DatasetManifest::load(path).with_context(|| format!("loading manifest {}", path.display()))
}

pub fn run(cmd: Command) -> anyhow::Result<()> {
    match cmd {
        Command::Synth { out, n, mix, seed, size, noise_levels, split } => {
            let opts = DatasetOptions {
                size,
                noise_levels: noise_levels.unwrap_or_else(|| STANDARD_NOISE_LEVELS.to_vec()),
                split: match split {
                    SplitArg::Train => Split::Train,
                    SplitArg::Test => Split::Test,
                },
            };
            let m = build_dataset(&out, n, &mix, seed, &opts)?;
            println!("wrote {} pairs to {}", m.entries.len(), out.display());
        }
        Command::Train { stage, manifest, config, init, out, log, iters } => {
            let file = match &config {
                Some(p) => TrainFile::load(p)?,
                None => TrainFile::default(),
            };
            let mut cfg = file.train()?;
            if let Some(i) = iters {
                cfg.iters = i;
            }
            let init = init.as_deref().map(load_checkpoint).transpose()?;
            let model_cfg = match &init {
                Some(c) => c.model,
                None => file.model(),
            };
            let manifest = load_manifest(&manifest)?;
            let mut log_file = log.as_deref().map(File::create).transpose()?.map(BufWriter::new);
            let mut hooks = TrainHooks {
                log: log_file.as_mut().map(|f| f as &mut dyn Write),
                checkpoint_path: Some(&out),
            };
            let outcome = train_from_manifest(stage, &manifest, &cfg, model_cfg, init, &mut hooks)?;
            if let Some(mut f) = log_file {
                f.flush()?;
            }
            outcome.checkpoint.save(&out)?;
            let last = outcome.log.last();
            println!(
                "stage {stage}: {} iterations, final rec loss {}",
                outcome.checkpoint.iteration,
                last.map_or("n/a".into(), |r| format!("{:.5}", r.rec_loss))
            );
        }
        Command::Eval { checkpoint, manifest, report, text, direct, seed } => {
            let model = load_checkpoint(&checkpoint)?.build_model()?;
            let samples = load_manifest(&manifest)?.load_samples()?;
            let mode = match text {
                TextArg::Gt => DescribeMode::Gt,
                TextArg::Gf => DescribeMode::Gf,
                TextArg::Noisy => DescribeMode::noisy(),
            };
            let path = if direct { TextPath::Direct(mode) } else { TextPath::ThroughEnhancer(mode) };
            let label = format!("{}{}", if direct { "direct_" } else { "" }, model.config().variant);
            let mut rows = evalkit::evaluate(&model, &samples, path, seed, &label)?;
            rows.extend(evalkit::evaluate_unrestored(&samples)?);
            print!("{}", render_table(&rows));
            write_json(report.as_deref(), &rows)?;
        }
        Command::TextImpact { checkpoint, manifest, report } => {
            let model = load_checkpoint(&checkpoint)?.build_model()?;
            let samples = load_manifest(&manifest)?.load_samples()?;
            let r = evalkit::run_text_impact(&model, &samples)?;
            let rows: Vec<Report> = r.gt_text.iter().chain(&r.gf_text).cloned().collect();
            print!("{}", render_table(&rows));
            println!("overall gap: {:.2} dB", r.overall_gap());
            write_json(report.as_deref(), &r)?;
        }
        Command::Ablate { mode, checkpoint, manifest, report, corruption, seed } => {
            let model = load_checkpoint(&checkpoint)?.build_model()?;
            let samples = load_manifest(&manifest)?.load_samples()?;
            let r = evalkit::run_ablation(mode, &model, &samples, corruption, seed)?;
            print!("{}", render_table(&r.rows));
            write_json(report.as_deref(), &r)?;
        }
        Command::Restore { checkpoint, input, out, text, provider, spec, endpoint } => {
            let model = load_checkpoint(&checkpoint)?.build_model()?;
            let img = ImageTensor::load_png(&input).with_context(|| format!("reading {}", input.display()))?;
            let encoder = HashEncoder::new(model.config().text);
            let z = match text {
                Some(t) => model.context_from_text(&encoder.encode(&t)?)?,
                None => {
                    let spec: Option<DegradationSpec> = match &spec {
                        Some(p) => Some(serde_json::from_str(&std::fs::read_to_string(p)?)?),
                        None => None,
                    };
                    let provider: Box<dyn DescriptionProvider> = match provider {
                        ProviderKind::Oracle => Box::new(OracleProvider::default()),
                        ProviderKind::Remote => {
                            let Some(url) = endpoint else { bail!("--provider remote needs --endpoint") };
                            Box::new(RemoteMllmProvider::new(url, textrestore::textio::DEFAULT_TIMEOUT))
                        }
                    };
                    let req = ProviderRequest { image: &img, prompt: DEFAULT_PROMPT, spec: spec.as_ref() };
                    let desc = provider.describe(&req)?;
                    println!("{}", desc.text);
                    model.context_with_image(&img, &encoder.encode(&desc.text)?)?
                }
            };
            model.restore(&img, &z)?.save_png(&out)?;
        }
        Command::Gradcheck { seed } => {
            let mut failed = 0;
            for r in gradcheck::run_suite(seed) {
                println!(
                    "{:<24} max rel err {:.3e} (tol {:.0e}) over {} entries: {}",
                    r.name,
                    r.max_rel_err,
                    r.tolerance,
                    r.checked,
                    if r.passed() { "ok" } else { "FAILED" }
                );
                failed += usize::from(!r.passed());
            }
            if failed > 0 {
                bail!("{failed} gradient check(s) failed");
            }
        }
        Command::Serve { checkpoint, port, config } => {
            let mut cfg = match &config {
                Some(p) => ServiceConfig::load(p)?,
                None => ServiceConfig::default(),
            };
            if checkpoint.is_some() {
                cfg.checkpoint = checkpoint;
            }
            if let Some(p) = port {
                cfg.port = p;
            }
            let port = cfg.port;
            let state = match &cfg.checkpoint {
                Some(_) => AppState::from_config(cfg)?,
                None => bail!("serve needs --checkpoint or a config with `checkpoint`"),
            };
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(serve(Arc::new(state), port))?;
        }
    }
    Ok(())
}

