//! `evadv`: synthesize event datasets, train classifiers on grid
//! representations, attack them, harden them, and tabulate the results.

mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use evadv_core::codec::encode_stream;
use evadv_core::dataset::{read_dataset, synth_dataset, Dataset, RawDataset};
use evadv_core::experiment::{
    adversarial_training, attack_table, describe, pool_success, run_attacks, sweep_perturbation, transfer_matrix,
    ExperimentReport, ReportRow,
};
use evadv_core::net::{load_checkpoint, save_checkpoint, train};
use evadv_core::{represent, Classifier, Sample};

use config::RunConfig;

#[derive(Parser, Debug)]
#[command(name = "evadv", version, about = "Adversarial attacks on event-camera classifiers")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Global {
    /// Flat `key=value` config file; flags override its entries.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (the dataset directory for `synth`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads; 0 uses every core.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Dataset directory to read.
    #[arg(long, global = true)]
    data: Option<PathBuf>,
    /// Model checkpoint to read.
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    #[arg(long, global = true)]
    epochs: Option<usize>,
    #[arg(long, global = true)]
    lr: Option<f32>,
    /// Temporal bins of the representation.
    #[arg(long, global = true)]
    bins: Option<usize>,
    /// none | shift | generate | combined
    #[arg(long, global = true)]
    mode: Option<String>,
    /// Base perturbation size of the shift attack.
    #[arg(long, global = true)]
    epsilon: Option<f64>,
    /// Any config key, as `key=value`; may be repeated.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic dataset (`.bin` files plus `manifest.csv`).
    Synth,
    /// Train a classifier; writes `model.ckpt` under the output directory.
    Train,
    /// Attack the test split; writes a per-sample table and a summary report.
    Attack,
    /// Adversarially fine-tune a checkpoint; writes `hardened.ckpt` and a report.
    AdvTrain,
    /// Success rate over perturbation sizes and motion frequencies.
    Sweep,
    /// Transfer success between the checkpoints listed in `checkpoints`.
    Transfer,
    /// PPM images of one test sample's clean and adversarial tensors.
    Render,
}

impl Global {
    fn overrides(&self) -> Result<Vec<(String, String)>> {
        let mut out = Vec::new();
        let mut put = |k: &str, v: Option<String>| {
            if let Some(v) = v {
                out.push((k.to_string(), v));
            }
        };
        let show = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string());
        put("seed", self.seed.map(|v| v.to_string()));
        put("out", show(&self.out));
        put("jobs", self.jobs.map(|v| v.to_string()));
        put("data", show(&self.data));
        put("checkpoint", show(&self.checkpoint));
        put("train.epochs", self.epochs.map(|v| v.to_string()));
        put("train.lr", self.lr.map(|v| v.to_string()));
        put("grid.bins", self.bins.map(|v| v.to_string()));
        put("attack.mode", self.mode.clone());
        put("attack.epsilon", self.epsilon.map(|v| v.to_string()));
        for kv in &self.set {
            let Some((k, v)) = kv.split_once('=') else {
                bail!("--set expects KEY=VALUE, got `{kv}`");
            };
            out.push((k.trim().to_string(), v.trim().to_string()));
        }
        Ok(out)
    }
}

fn load_data(cfg: &RunConfig) -> Result<Dataset> {
    let dir = cfg.path("data");
    let raw = read_dataset(&dir).with_context(|| format!("reading dataset {}", dir.display()))?;
    if raw.train.is_empty() && raw.test.is_empty() {
        bail!("dataset {} is empty", dir.display());
    }
    Ok(raw.normalized()?)
}

fn load_model(path: &Path) -> Result<Classifier> {
    load_checkpoint(path).with_context(|| format!("reading checkpoint {}", path.display()))
}

fn out_dir(cfg: &RunConfig) -> Result<PathBuf> {
    let dir = cfg.path("out");
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn sensor(data: &Dataset) -> Result<(u16, u16)> {
    let s = data.train.first().or(data.test.first()).context("dataset has no samples")?;
    Ok((s.stream.width, s.stream.height))
}

fn classes(data: &Dataset) -> usize {
    data.train.iter().chain(&data.test).map(|s| s.label + 1).max().unwrap_or(1)
}

fn cmd_synth(cfg: &RunConfig) -> Result<()> {
    let dir = cfg.path("out");
    let data: RawDataset = synth_dataset(&cfg.synth()?)?;
    data.write(&dir).with_context(|| format!("writing dataset {}", dir.display()))?;
    println!("wrote {} train / {} test samples to {}", data.train.len(), data.test.len(), dir.display());
    println!("hash {}", data.hash()?);
    Ok(())
}

fn cmd_train(cfg: &RunConfig) -> Result<()> {
    let data = load_data(cfg)?;
    let (w, h) = sensor(&data)?;
    let mut clf = Classifier::new(cfg.grid(w, h)?, classes(&data), cfg.seed()?)?;
    let tc = cfg.train()?;
    let history = train(&mut clf, &data.train, &data.test, &tc)?;
    let mut log = String::from("epoch\tlr\ttrain_loss\ttrain_accuracy\tval_accuracy\n");
    for r in &history {
        let val = r.val_accuracy.map_or("-".to_string(), |v| format!("{v:.6}"));
        println!(
            "epoch {:>3}  lr {:.2e}  loss {:.4}  train {:.3}  val {val}",
            r.epoch + 1,
            r.lr,
            r.train_loss,
            r.train_accuracy
        );
        log += &format!("{}\t{}\t{:.6}\t{:.6}\t{val}\n", r.epoch + 1, r.lr, r.train_loss, r.train_accuracy);
    }
    let dir = out_dir(cfg)?;
    fs::write(dir.join("train.tsv"), log)?;
    fs::write(dir.join("train.cfg"), cfg.dump())?;
    let path = dir.join("model.ckpt");
    save_checkpoint(&clf, &path)?;
    println!("saved {} ({})", path.display(), clf.spec.id());
    Ok(())
}

fn cmd_attack(cfg: &RunConfig) -> Result<()> {
    let data = load_data(cfg)?;
    let clf = load_model(&cfg.path("checkpoint"))?;
    let setup = cfg.attack()?;
    let records = run_attacks(&clf, &data.test, &setup)?;
    let rate = pool_success(&records)?;
    let dir = out_dir(cfg)?;
    fs::write(dir.join("attack_samples.tsv"), attack_table(&records))?;

    let (representation, kernel) = describe(&clf);
    let mut report = ExperimentReport::default();
    report.rows.push(ReportRow {
        source: None,
        representation,
        kernel,
        attack: setup.mode.name().into(),
        epsilon: setup.shift.epsilon,
        frequency: setup.shift.frequency,
        metric: if setup.targeted { "targeted_success_rate" } else { "success_rate" }.into(),
        value: rate,
    });
    report
        .meta("experiment", "attack")
        .meta("dataset", &data.hash)
        .meta("pool", records.iter().filter(|r| r.in_pool()).count());
    report.write(&dir, "attack")?;
    fs::write(dir.join("attack.cfg"), cfg.dump())?;

    if cfg.get::<bool>("attack.save")? {
        let adv_dir = dir.join("adversarial");
        fs::create_dir_all(&adv_dir)?;
        for (i, s) in data.test.iter().enumerate() {
            let adv = setup.attack(&clf, i, s)?;
            fs::write(adv_dir.join(format!("{i:05}.bin")), encode_stream(&adv.stream.denormalize()?)?)?;
        }
    }
    println!("{} success rate {rate:.4} over {} clean-correct samples", setup.mode.name(), report.metadata["pool"]);
    Ok(())
}

fn cmd_adv_train(cfg: &RunConfig) -> Result<()> {
    let data = load_data(cfg)?;
    let mut clf = load_model(&cfg.path("checkpoint"))?;
    let (before, after, mut report) = adversarial_training(&mut clf, &data.train, &data.test, &cfg.adv_train()?)?;
    report.meta("dataset", &data.hash);
    let dir = out_dir(cfg)?;
    report.write(&dir, "adv_train")?;
    save_checkpoint(&clf, &dir.join("hardened.ckpt"))?;
    for (stage, r) in [("before", before), ("after", after)] {
        println!("{stage:>6}: clean {:.3}  shift {:.3}  combined {:.3}", r.clean, r.shift, r.combined);
    }
    Ok(())
}

fn cmd_sweep(cfg: &RunConfig) -> Result<()> {
    let data = load_data(cfg)?;
    let clf = load_model(&cfg.path("checkpoint"))?;
    let mut report = sweep_perturbation(
        &clf,
        &data.test,
        &cfg.list("sweep.epsilons")?,
        &cfg.list("sweep.frequencies")?,
        cfg.seed()?,
    )?;
    report.meta("dataset", &data.hash);
    report.write(&out_dir(cfg)?, "sweep")?;
    print!("{}", report.to_tsv());
    Ok(())
}

fn cmd_transfer(cfg: &RunConfig) -> Result<()> {
    let data = load_data(cfg)?;
    let paths: Vec<PathBuf> = cfg.list::<String>("checkpoints")?.into_iter().map(PathBuf::from).collect();
    if paths.len() < 2 {
        bail!("transfer needs at least two comma-separated paths in `checkpoints`");
    }
    let victims = paths.iter().map(|p| load_model(p)).collect::<Result<Vec<_>>>()?;
    let refs: Vec<&Classifier> = victims.iter().collect();
    let mut report = transfer_matrix(&refs, &data.test, &cfg.attack()?)?;
    report.meta("dataset", &data.hash);
    for (i, p) in paths.iter().enumerate() {
        report.meta(&format!("victim.{i}"), p.display());
    }
    report.write(&out_dir(cfg)?, "transfer")?;
    print!("{}", report.to_tsv());
    Ok(())
}

fn cmd_render(cfg: &RunConfig) -> Result<()> {
    let data = load_data(cfg)?;
    let clf = load_model(&cfg.path("checkpoint"))?;
    let index: usize = cfg.get("render.index")?;
    let sample: &Sample = data
        .test
        .get(index)
        .with_context(|| format!("render.index {index} is beyond the {} test samples", data.test.len()))?;
    let adv = cfg.attack()?.attack(&clf, index, sample)?;
    let dir = out_dir(cfg)?;
    for (name, stream) in [("clean", &sample.stream), ("adversarial", &adv.stream)] {
        let path = dir.join(format!("{name}_{index:05}.ppm"));
        evadv_core::grid::render_image(&represent(stream, &clf.spec)?, &path)?;
        println!("wrote {} (predicted {})", path.display(), clf.predict(stream)?);
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let cfg = RunConfig::load(cli.global.config.as_deref(), &cli.global.overrides()?)?;
    let jobs: usize = cfg.get("jobs")?;
    if jobs > 0 {
        rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global()?;
    }
    match cli.command {
        Command::Synth => cmd_synth(&cfg),
        Command::Train => cmd_train(&cfg),
        Command::Attack => cmd_attack(&cfg),
        Command::AdvTrain => cmd_adv_train(&cfg),
        Command::Sweep => cmd_sweep(&cfg),
        Command::Transfer => cmd_transfer(&cfg),
        Command::Render => cmd_render(&cfg),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
