use super::*;
use crate::dataset::{synth_dataset, SynthConfig};
use crate::grid::GridSpec;
use crate::synth::SceneConfig;

fn tiny_data(n: usize) -> Vec<Sample> {
    let cfg = SynthConfig {
        train: n,
        test: 0,
        scene: SceneConfig {
            width: 16,
            height: 16,
            steps: 200,
            ..SceneConfig::default()
        },
        seed: 5,
    };
    synth_dataset(&cfg).unwrap().normalized().unwrap().train
}

fn classifier(bins: usize, seed: u64) -> Classifier {
    Classifier::new(GridSpec::est(16, 16, bins), 4, seed).unwrap()
}

/// Relabels samples with the model's own predictions, making it perfect on them.
fn relabel(clf: &Classifier, samples: &[Sample]) -> Vec<Sample> {
    samples
        .iter()
        .map(|s| Sample {
            label: clf.predict(&s.stream).unwrap(),
            stream: s.stream.clone(),
        })
        .collect()
}

fn record(label: usize, clean: usize, success: bool) -> AttackRecord {
    AttackRecord {
        index: 0,
        label,
        clean_prediction: clean,
        adversarial_prediction: Some(clean),
        target: None,
        linf: 0.0,
        added: 0,
        success,
    }
}

#[test]
fn null_attack_on_perfect_model_scores_zero() {
    let clf = classifier(2, 1);
    let data = relabel(&clf, &tiny_data(8));
    assert_eq!(evaluate(&clf, &data).unwrap(), 1.0);
    let rate = success_rate(&clf, &data, &AttackSetup::with_mode(AttackMode::None)).unwrap();
    assert_eq!(rate, 0.0);
}

#[test]
fn oracle_attack_scores_one() {
    let clf = classifier(2, 2);
    let data = relabel(&clf, &tiny_data(12));
    let first = data[0].label;
    let Some(other) = data.iter().find(|s| s.label != first).cloned() else {
        panic!("the random model should not predict a single class");
    };
    // Replace each stream with one the model assigns to a different class.
    let records = evaluate_attack(&clf, &data, |_, s| {
        let stream = if s.label == first { other.stream.clone() } else { data[0].stream.clone() };
        Ok(AttackedSample {
            objective: Objective::Untargeted { label: s.label },
            stream,
            linf: 0.0,
            added: 0,
        })
    })
    .unwrap();
    assert_eq!(pool_success(&records).unwrap(), 1.0);
}

#[test]
fn pool_success_counts_by_hand() {
    // 10 samples: 7 clean-correct, of which 3 were flipped.
    let mut records = vec![
        record(0, 0, true),
        record(1, 1, false),
        record(2, 2, true),
        record(3, 3, false),
        record(0, 0, false),
        record(1, 1, true),
        record(2, 2, false),
    ];
    records.extend([record(0, 1, false), record(1, 2, false), record(3, 0, false)]);
    assert!((pool_success(&records).unwrap() - 3.0 / 7.0).abs() < 1e-15);
    assert!(matches!(pool_success(&records[7..]), Err(Error::EmptyPool)));
}

#[test]
fn targeted_objectives_are_seeded_wrong_classes() {
    let setup = AttackSetup {
        targeted: true,
        seed: 9,
        ..AttackSetup::default()
    };
    for i in 0..50 {
        let Objective::Targeted { target } = setup.objective(i, 2, 4) else {
            panic!("targeted setup must produce a target");
        };
        assert_ne!(target, 2);
        assert_eq!(setup.objective(i, 2, 4), Objective::Targeted { target });
    }
}

#[test]
fn attack_tables_are_reproducible() {
    let clf = classifier(3, 3);
    let data = relabel(&clf, &tiny_data(6));
    let setup = AttackSetup {
        null: NullConfig {
            top_fraction: 0.02,
            ..Default::default()
        },
        seed: 4,
        ..AttackSetup::default()
    };
    let a = attack_table(&run_attacks(&clf, &data, &setup).unwrap());
    let b = attack_table(&run_attacks(&clf, &data, &setup).unwrap());
    assert_eq!(a, b);
    assert!(a.starts_with(ATTACK_TABLE_HEADER));
    assert_eq!(a.lines().count(), 7);
}

#[test]
fn sweep_has_one_row_per_cell() {
    let clf = classifier(1, 4);
    let data = relabel(&clf, &tiny_data(8));
    let eps = [0.0, 0.1, 0.2];
    let report = sweep_perturbation(&clf, &data, &eps, &[1.0, 0.5], 1).unwrap();
    assert_eq!(report.rows.len(), 6);
    let zero: Vec<f64> = report.rows.iter().filter(|r| r.epsilon == Some(0.0)).map(|r| r.value).collect();
    assert_eq!(zero.len(), 2);
    assert_eq!(zero[0], 0.0, "no attack flips nothing on the full-frequency pool");
    assert!(report.rows.iter().all(|r| (0.0..=1.0).contains(&r.value)));
    let tsv = report.to_tsv();
    assert_eq!(tsv.lines().count(), 7);
    assert!(tsv.starts_with(REPORT_HEADER));
    assert!(report.manifest().contains("experiment=sweep\n"));
}

#[test]
fn unsupported_frequencies_are_rejected() {
    let data = tiny_data(2);
    assert!(at_frequency(&data, 0.3).is_err());
    assert!(at_frequency(&data, 2.0).is_err());
    assert_eq!(at_frequency(&data, 1.0).unwrap(), data);
}

#[test]
fn zero_hardening_epochs_keep_the_model() {
    let mut clf = classifier(2, 5);
    let data = tiny_data(8);
    let original = clf.clone();
    let cfg = AdvTrainConfig {
        epochs: 0,
        ..AdvTrainConfig::default()
    };
    let (before, after, report) = adversarial_training(&mut clf, &data, &data, &cfg).unwrap();
    assert_eq!(clf, original);
    assert_eq!(before, after);
    assert_eq!(report.rows.len(), 6);
}

#[test]
fn hardening_changes_the_model() {
    let mut clf = classifier(2, 6);
    let data = tiny_data(8);
    let original = clf.clone();
    let cfg = AdvTrainConfig {
        epochs: 1,
        lr: 1e-3,
        ..AdvTrainConfig::default()
    };
    adversarial_training(&mut clf, &data, &data, &cfg).unwrap();
    assert_ne!(clf.model.data, original.model.data);
}

#[test]
fn transfer_matrix_omits_the_diagonal() {
    let victims = [classifier(1, 7), classifier(2, 8), classifier(4, 9)];
    let refs: Vec<&Classifier> = victims.iter().collect();
    let data = tiny_data(8);
    let setup = AttackSetup::with_mode(AttackMode::Shift);
    let report = transfer_matrix(&refs, &data, &setup).unwrap();
    assert_eq!(report.rows.len(), 6);
    for r in &report.rows {
        assert_ne!(r.source.as_deref().unwrap().split('#').nth(1), r.representation.split('#').nth(1));
    }
    assert!(transfer_matrix(&refs[..1], &data, &setup).is_err());
}
