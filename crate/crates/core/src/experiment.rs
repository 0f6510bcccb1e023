//! Experiment drivers: attack success rates, perturbation and frequency
//! sweeps, adversarial training, and transfer matrices, all producing
//! plain-text reports.
//!
//! Success rates are measured on the *clean-correct pool*: the samples the
//! victim classifies correctly before any attack. A null attack therefore
//! always scores 0.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::attack::{random_target, run_attack, AttackConfig, AttackMode, NullConfig, Objective};
use crate::dataset::halve_dataset;
use crate::error::{Error, Result};
use crate::events::EventStream;
use crate::net::{evaluate, Classifier, Sample, Trainer};
use crate::seed::derive_seed;

/// Everything that determines one attack run over a dataset.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttackSetup {
    pub mode: AttackMode,
    pub shift: AttackConfig,
    pub null: NullConfig,
    pub targeted: bool,
    pub seed: u64,
}

impl Default for AttackSetup {
    fn default() -> Self {
        Self {
            mode: AttackMode::Combined,
            shift: AttackConfig::default(),
            null: NullConfig::default(),
            targeted: false,
            seed: 0,
        }
    }
}

impl AttackSetup {
    pub fn with_mode(mode: AttackMode) -> Self {
        Self {
            mode,
            ..Self::default()
        }
    }

    /// The objective for sample `index`; targeted runs draw a wrong class
    /// from a per-sample stream.
    pub fn objective(&self, index: usize, label: usize, classes: usize) -> Objective {
        if self.targeted {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, index as u64));
            Objective::Targeted {
                target: random_target(label, classes, &mut rng),
            }
        } else {
            Objective::Untargeted { label }
        }
    }

    /// Seed for the random parts of the attack on sample `index`.
    pub fn sample_seed(&self, index: usize) -> u64 {
        derive_seed(derive_seed(self.seed, index as u64), 1)
    }

    /// Attacks one sample against `clf`.
    pub fn attack(&self, clf: &Classifier, index: usize, sample: &Sample) -> Result<AttackedSample> {
        let objective = self.objective(index, sample.label, clf.classes());
        let adv = run_attack(
            clf,
            &sample.stream,
            self.mode,
            &self.shift,
            &self.null,
            objective,
            self.sample_seed(index),
        )?;
        Ok(AttackedSample {
            objective,
            linf: adv.linf_shift(),
            added: adv.added_count(),
            stream: adv.stream,
        })
    }
}

/// An adversarial stream and the facts the per-sample report needs.
#[derive(Debug, Clone, PartialEq)]
pub struct AttackedSample {
    pub objective: Objective,
    pub stream: EventStream,
    pub linf: f64,
    pub added: usize,
}

/// One row of the per-sample attack table.
#[derive(Debug, Clone, PartialEq)]
pub struct AttackRecord {
    pub index: usize,
    pub label: usize,
    pub clean_prediction: usize,
    /// `None` when the sample is outside the clean-correct pool and was not attacked.
    pub adversarial_prediction: Option<usize>,
    pub target: Option<usize>,
    pub linf: f64,
    pub added: usize,
    pub success: bool,
}

impl AttackRecord {
    pub fn in_pool(&self) -> bool {
        self.clean_prediction == self.label
    }
}

pub const ATTACK_TABLE_HEADER: &str = "index\tlabel\tclean_pred\tadv_pred\ttarget\tlinf\tadded\tsuccess";

/// Per-sample attack table as tab-separated text.
pub fn attack_table(records: &[AttackRecord]) -> String {
    let mut out = format!("{ATTACK_TABLE_HEADER}\n");
    let opt = |v: Option<usize>| v.map_or_else(|| "-".to_string(), |v| v.to_string());
    for r in records {
        writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}\t{:.6}\t{}\t{}",
            r.index,
            r.label,
            r.clean_prediction,
            opt(r.adversarial_prediction),
            opt(r.target),
            r.linf,
            r.added,
            u8::from(r.success)
        )
        .unwrap();
    }
    out
}

/// Attacks every clean-correct sample with `attack` and records the outcome.
/// `attack(index, sample)` returns the adversarial stream and its objective.
pub fn evaluate_attack<F>(clf: &Classifier, samples: &[Sample], attack: F) -> Result<Vec<AttackRecord>>
where
    F: Fn(usize, &Sample) -> Result<AttackedSample> + Sync,
{
    samples
        .par_iter()
        .enumerate()
        .map(|(index, sample)| {
            let clean_prediction = clf.predict(&sample.stream)?;
            let mut record = AttackRecord {
                index,
                label: sample.label,
                clean_prediction,
                adversarial_prediction: None,
                target: None,
                linf: 0.0,
                added: 0,
                success: false,
            };
            if record.in_pool() {
                let adv = attack(index, sample)?;
                let prediction = clf.predict(&adv.stream)?;
                record.adversarial_prediction = Some(prediction);
                if let Objective::Targeted { target } = adv.objective {
                    record.target = Some(target);
                }
                record.linf = adv.linf;
                record.added = adv.added;
                record.success = adv.objective.achieved(prediction);
            }
            Ok(record)
        })
        .collect()
}

pub fn run_attacks(clf: &Classifier, samples: &[Sample], setup: &AttackSetup) -> Result<Vec<AttackRecord>> {
    evaluate_attack(clf, samples, |i, s| setup.attack(clf, i, s))
}

/// Fraction of pool samples the attack succeeded on.
pub fn pool_success(records: &[AttackRecord]) -> Result<f64> {
    let pool: Vec<&AttackRecord> = records.iter().filter(|r| r.in_pool()).collect();
    if pool.is_empty() {
        return Err(Error::EmptyPool);
    }
    Ok(pool.iter().filter(|r| r.success).count() as f64 / pool.len() as f64)
}

pub fn success_rate(clf: &Classifier, samples: &[Sample], setup: &AttackSetup) -> Result<f64> {
    pool_success(&run_attacks(clf, samples, setup)?)
}

/// Top-1 accuracy over all samples after each is attacked (untargeted) with `setup`.
pub fn accuracy_under_attack(clf: &Classifier, samples: &[Sample], setup: &AttackSetup) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let setup = AttackSetup { targeted: false, ..*setup };
    let correct = samples
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let adv = setup.attack(clf, i, s)?;
            Ok(usize::from(clf.predict(&adv.stream)? == s.label))
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .sum::<usize>();
    Ok(correct as f64 / samples.len() as f64)
}

/// One line of a result table.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    /// Representation of the model the adversarial streams came from (transfer tables only).
    pub source: Option<String>,
    /// Representation of the evaluated model.
    pub representation: String,
    pub kernel: String,
    pub attack: String,
    pub epsilon: Option<f64>,
    pub frequency: f64,
    /// What `value` measures, e.g. `success_rate` or `accuracy_clean`.
    pub metric: String,
    pub value: f64,
}

/// A result table plus the settings needed to regenerate it.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ExperimentReport {
    pub rows: Vec<ReportRow>,
    pub metadata: BTreeMap<String, String>,
}

pub const REPORT_HEADER: &str = "source\trepresentation\tkernel\tattack\tepsilon\tfrequency\tmetric\tvalue";

impl ExperimentReport {
    pub fn meta(&mut self, key: &str, value: impl ToString) -> &mut Self {
        self.metadata.insert(key.to_string(), value.to_string());
        self
    }

    pub fn to_tsv(&self) -> String {
        let mut out = format!("{REPORT_HEADER}\n");
        for r in &self.rows {
            writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{:.6}",
                r.source.as_deref().unwrap_or("-"),
                r.representation,
                r.kernel,
                r.attack,
                r.epsilon.map_or_else(|| "-".to_string(), |e| format!("{e}")),
                r.frequency,
                r.metric,
                r.value
            )
            .unwrap();
        }
        out
    }

    /// `key=value` lines in key order.
    pub fn manifest(&self) -> String {
        self.metadata.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    /// Writes `<stem>.tsv` and `<stem>.manifest` under `dir`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(format!("{stem}.tsv")), self.to_tsv())?;
        fs::write(dir.join(format!("{stem}.manifest")), self.manifest())?;
        Ok(())
    }

    /// First row matching `metric` (and `attack` when given).
    pub fn value(&self, metric: &str, attack: Option<&str>) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.metric == metric && attack.is_none_or(|a| r.attack == a))
            .map(|r| r.value)
    }
}

pub fn describe(clf: &Classifier) -> (String, String) {
    (
        format!("{}{}", clf.spec.projection.name(), clf.spec.bins),
        clf.spec.kernel.kind.name().to_string(),
    )
}

/// The samples at relative frequency `frequency`: `1` keeps them, each halving
/// of the frequency keeps the first half of the window again.
pub fn at_frequency(samples: &[Sample], frequency: f64) -> Result<Vec<Sample>> {
    let halvings = -frequency.log2();
    if !(halvings >= 0.0 && (halvings - halvings.round()).abs() < 1e-9) {
        return Err(Error::InvalidConfig(format!(
            "frequency {frequency} is not 1 or a repeated halving of it"
        )));
    }
    let mut out = samples.to_vec();
    for _ in 0..halvings.round() as usize {
        out = halve_dataset(&out);
    }
    Ok(out)
}

/// Shift-attack success for every `(ε, f)` cell, with step `ε/2` and three
/// iterations. `ε = 0` is the unattacked baseline.
pub fn sweep_perturbation(
    clf: &Classifier,
    samples: &[Sample],
    epsilons: &[f64],
    frequencies: &[f64],
    seed: u64,
) -> Result<ExperimentReport> {
    let (representation, kernel) = describe(clf);
    let mut report = ExperimentReport::default();
    for &f in frequencies {
        let data = at_frequency(samples, f)?;
        for &eps in epsilons {
            let setup = AttackSetup {
                mode: if eps == 0.0 { AttackMode::None } else { AttackMode::Shift },
                shift: AttackConfig {
                    frequency: f,
                    iterations: 3,
                    ..AttackConfig::with_budget(eps)
                },
                seed,
                ..AttackSetup::default()
            };
            report.rows.push(ReportRow {
                source: None,
                representation: representation.clone(),
                kernel: kernel.clone(),
                attack: "shift".into(),
                epsilon: Some(eps),
                frequency: f,
                metric: "success_rate".into(),
                value: success_rate(clf, &data, &setup)?,
            });
        }
    }
    report.meta("experiment", "sweep").meta("seed", seed).meta("samples", samples.len());
    Ok(report)
}

/// Settings of the hardening loop.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdvTrainConfig {
    pub epochs: usize,
    pub lr: f32,
    /// Multiplier applied to the learning rate after every epoch.
    pub lr_decay: f32,
    pub batch_size: usize,
    /// Attack used both to harden and to measure robustness.
    pub attack: AttackSetup,
    pub seed: u64,
}

impl Default for AdvTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 5,
            lr: 1e-5,
            lr_decay: 1.0,
            batch_size: 16,
            attack: AttackSetup::with_mode(AttackMode::Shift),
            seed: 0,
        }
    }
}

/// Clean and under-attack accuracy of one model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Robustness {
    pub clean: f64,
    pub shift: f64,
    pub combined: f64,
}

pub fn robustness(clf: &Classifier, samples: &[Sample], attack: &AttackSetup) -> Result<Robustness> {
    Ok(Robustness {
        clean: evaluate(clf, samples)?,
        shift: accuracy_under_attack(clf, samples, &AttackSetup { mode: AttackMode::Shift, ..*attack })?,
        combined: accuracy_under_attack(clf, samples, &AttackSetup { mode: AttackMode::Combined, ..*attack })?,
    })
}

/// Fine-tunes `clf` on batches holding each sample both clean and attacked
/// against the current weights, and reports robustness before and after.
pub fn adversarial_training(
    clf: &mut Classifier,
    train_set: &[Sample],
    test_set: &[Sample],
    cfg: &AdvTrainConfig,
) -> Result<(Robustness, Robustness, ExperimentReport)> {
    if train_set.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let before = robustness(clf, test_set, &cfg.attack)?;
    let mut trainer = Trainer::new(clf, cfg.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut lr = cfg.lr;
    for epoch in 0..cfg.epochs {
        trainer.set_lr(lr);
        order.shuffle(&mut rng);
        let attack = AttackSetup {
            seed: derive_seed(cfg.attack.seed, epoch as u64 + 1),
            targeted: false,
            ..cfg.attack
        };
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let current: &Classifier = clf;
            let adversarial: Vec<EventStream> = chunk
                .par_iter()
                .map(|&i| Ok(attack.attack(current, i, &train_set[i])?.stream))
                .collect::<Result<_>>()?;
            let mut batch: Vec<(&EventStream, usize)> =
                chunk.iter().map(|&i| (&train_set[i].stream, train_set[i].label)).collect();
            batch.extend(adversarial.iter().zip(chunk).map(|(s, &i)| (s, train_set[i].label)));
            trainer.step(clf, &batch)?;
        }
        lr *= cfg.lr_decay;
    }
    let after = robustness(clf, test_set, &cfg.attack)?;

    let (representation, kernel) = describe(clf);
    let mut report = ExperimentReport::default();
    for (stage, r) in [("original", before), ("adversarial", after)] {
        for (attack, value) in [("none", r.clean), ("shift", r.shift), ("combined", r.combined)] {
            report.rows.push(ReportRow {
                source: None,
                representation: representation.clone(),
                kernel: kernel.clone(),
                attack: attack.into(),
                epsilon: None,
                frequency: cfg.attack.shift.frequency,
                metric: format!("accuracy_{stage}"),
                value,
            });
        }
    }
    report
        .meta("experiment", "adv-train")
        .meta("epochs", cfg.epochs)
        .meta("lr", cfg.lr)
        .meta("lr_decay", cfg.lr_decay)
        .meta("batch_size", cfg.batch_size)
        .meta("seed", cfg.seed)
        .meta("attack.seed", cfg.attack.seed);
    Ok((before, after, report))
}

/// Success of adversarial streams crafted against each victim when fed to
/// every other victim. Streams are generated once per source (for every
/// sample, untargeted) and reused for all targets; success on a target is
/// counted over that target's clean-correct pool.
pub fn transfer_matrix(victims: &[&Classifier], samples: &[Sample], setup: &AttackSetup) -> Result<ExperimentReport> {
    if victims.len() < 2 {
        return Err(Error::InvalidConfig("a transfer matrix needs at least two victims".into()));
    }
    let setup = AttackSetup { targeted: false, ..*setup };
    let clean: Vec<Vec<usize>> = victims
        .iter()
        .map(|v| samples.par_iter().map(|s| v.predict(&s.stream)).collect::<Result<_>>())
        .collect::<Result<_>>()?;
    let mut report = ExperimentReport::default();
    for (si, source) in victims.iter().enumerate() {
        let adversarial: Vec<EventStream> = samples
            .par_iter()
            .enumerate()
            .map(|(i, s)| Ok(setup.attack(source, i, s)?.stream))
            .collect::<Result<_>>()?;
        for (ti, target) in victims.iter().enumerate() {
            if ti == si {
                continue;
            }
            let flips = samples
                .par_iter()
                .zip(&adversarial)
                .zip(&clean[ti])
                .filter(|((s, _), &pred)| pred == s.label)
                .map(|((s, adv), _)| target.predict(adv).map(|p| usize::from(p != s.label)))
                .collect::<Result<Vec<_>>>()?;
            if flips.is_empty() {
                return Err(Error::EmptyPool);
            }
            let (representation, kernel) = describe(target);
            report.rows.push(ReportRow {
                source: Some(format!("{}#{si}", describe(source).0)),
                representation: format!("{representation}#{ti}"),
                kernel,
                attack: setup.mode.name().into(),
                epsilon: None,
                frequency: setup.shift.frequency,
                metric: "transfer_success_rate".into(),
                value: flips.iter().sum::<usize>() as f64 / flips.len() as f64,
            });
        }
    }
    report
        .meta("experiment", "transfer")
        .meta("attack", setup.mode.name())
        .meta("seed", setup.seed)
        .meta("victims", victims.len());
    Ok(report)
}

#[cfg(test)]
mod tests;
