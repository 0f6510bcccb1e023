use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::events::{TimeState, Polarity::{Negative, Positive}};
use crate::grid::GridSpec;
use crate::net::tests::{naive_logits, naive_loss};
use crate::net::Classifier;

fn norm(width: u16, height: u16, events: Vec<Event>) -> EventStream {
    EventStream::new(width, height, events, TimeState::Normalized { scale: 1e5 })
}

fn random_stream(seed: u64, width: u16, height: u16, n: usize) -> EventStream {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let events = (0..n)
        .map(|_| {
            Event::new(
                rng.gen_range(0..width),
                rng.gen_range(0..height),
                1.0 - rng.gen::<f64>(),
                if rng.gen() { Positive } else { Negative },
            )
        })
        .collect();
    norm(width, height, events)
}

/// A classifier whose weights (including biases) are all random, so every
/// layer passes gradient.
fn random_classifier(seed: u64, width: u16, height: u16, bins: usize) -> Classifier {
    let mut clf = Classifier::new(GridSpec::est(width, height, bins), 4, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
    for b in [1, 3, 5] {
        for v in clf.model.block_mut(b) {
            *v = rng.gen_range(-0.2..0.2);
        }
    }
    for v in clf.model.data.iter_mut() {
        *v *= 3.0;
    }
    clf
}

/// Every `(x, y, p)` location of a sensor fires once.
fn full_coverage(width: u16, height: u16) -> EventStream {
    let mut events = Vec::new();
    let mut k = 0;
    for y in 0..height {
        for x in 0..width {
            for p in [Positive, Negative] {
                k += 1;
                events.push(Event::new(x, y, 0.9 * k as f64 / (2 * width * height) as f64, p));
            }
        }
    }
    norm(width, height, events)
}

#[test]
fn projected_steps_match_hand_simulation() {
    let bounds = time_box(0.30, 0.10, 1e-5);
    let mut t = 0.30;
    let mut path = Vec::new();
    for _ in 0..3 {
        t = pgd_update(t, 1.0, 0.05, bounds);
        path.push(t);
    }
    let expected = [0.35, 0.40, 0.40];
    for (a, b) in path.iter().zip(expected) {
        assert!((a - b).abs() < 1e-12, "{path:?}");
    }
    assert_eq!(pgd_update(0.3, 0.0, 0.05, bounds), 0.3);
    // The range (0, 1] binds before the ball does.
    assert_eq!(pgd_update(0.95, 1.0, 0.1, time_box(0.95, 0.2, 1e-5)), 1.0);
    assert_eq!(pgd_update(0.05, -1.0, 0.1, time_box(0.05, 0.2, 1e-5)), 1e-5);
}

#[test]
fn effective_sizes() {
    let cfg = AttackConfig::default();
    assert!((cfg.effective_alpha(5) - 0.1).abs() < 1e-15);
    assert!((cfg.effective_epsilon(5) - 0.2).abs() < 1e-15);
    // The cap applies before doubling.
    assert_eq!(cfg.effective_alpha(1), 0.1);
    assert_eq!(cfg.effective_epsilon(1), 0.2);
    assert!((cfg.effective_alpha(10) - 0.05).abs() < 1e-15);
    let halved = AttackConfig { frequency: 0.5, ..cfg };
    assert!((halved.effective_alpha(10) - 0.1).abs() < 1e-15);
    let sweep = AttackConfig::with_budget(0.2);
    assert!((sweep.effective_epsilon(1) - 0.2).abs() < 1e-15);
    assert_eq!(sweep.effective_alpha(1), 0.1);
    assert!(AttackConfig { alpha: 0.0, ..cfg }.validate().is_err());
}

#[test]
fn zero_head_gives_zero_gradients_and_no_shift() {
    let mut clf = random_classifier(1, 8, 8, 3);
    clf.model.block_mut(4).fill(0.0);
    let s = random_stream(2, 8, 8, 60);
    let g = grad_wrt_times(&clf, &s, Objective::Untargeted { label: 0 }).unwrap();
    assert!(g.iter().all(|&v| v == 0.0));
    let cfg = AttackConfig { iterations: 1, ..Default::default() };
    let adv = shift_attack(&clf, &s, &cfg, Objective::Untargeted { label: 0 }).unwrap();
    assert_eq!(adv.stream, s);
    assert_eq!(adv.linf_shift(), 0.0);
}

#[test]
fn single_event_gradient_matches_finite_difference() {
    let clf = random_classifier(3, 8, 8, 4);
    let objective = Objective::Untargeted { label: 1 };
    let mut probes = 0;
    for (i, t) in [0.13, 0.41, 0.58, 0.87].into_iter().enumerate() {
        let s = norm(8, 8, vec![Event::new(3 + i as u16, 4, t, Positive)]);
        let g = grad_wrt_times(&clf, &s, objective).unwrap()[0];
        // 64-bit oracle: the grid and the network evaluated without rounding to f32.
        let h = 1e-5;
        let at = |t: f64| {
            let s = norm(8, 8, vec![Event::new(3 + i as u16, 4, t, Positive)]);
            let input = crate::grid::represent(&s, &clf.spec).unwrap().values;
            naive_loss(&naive_logits(&clf.model, &input), 1)
        };
        let fd = (at(t + h) - at(t - h)) / (2.0 * h);
        // The analytic path runs the network in 32 bits.
        assert!((g - fd).abs() <= 1e-3 * g.abs().max(fd.abs()).max(1e-2), "t={t}: {g} vs {fd}");
        probes += 1;
    }
    assert_eq!(probes, 4);
}

#[test]
fn events_outside_every_window_have_zero_gradient() {
    // With two bins and a narrow kernel, t = 0.25 and t = 0.75 sit outside both windows.
    let spec = GridSpec::est(8, 8, 2).with_kernel(crate::kernel::KernelParams::trilinear(0.2));
    let mut clf = random_classifier(4, 8, 8, 2);
    clf.spec = spec;
    let s = norm(8, 8, vec![Event::new(1, 1, 0.25, Positive), Event::new(2, 2, 0.75, Negative), Event::new(3, 3, 0.45, Positive)]);
    let g = grad_wrt_times(&clf, &s, Objective::Untargeted { label: 0 }).unwrap();
    let by_time: Vec<(f64, f64)> = s.events.iter().map(|e| e.t).zip(g).collect();
    for (t, g) in by_time {
        if t == 0.45 {
            assert_ne!(g, 0.0);
        } else {
            assert_eq!(g, 0.0, "t={t}");
        }
    }
}

#[test]
fn null_event_counts() {
    assert!(make_null_events(&full_coverage(4, 4), 3).is_empty());
    let empty = norm(2, 2, vec![]);
    let nulls = make_null_events(&empty, 1);
    assert_eq!(nulls.len(), 8);
    assert!(nulls.iter().all(|e| e.t == 0.0));
    for seed in 0..20 {
        let s = random_stream(seed, 6, 5, 40);
        let distinct: std::collections::BTreeSet<_> = s.events.iter().map(|e| e.location()).collect();
        for m in [1, 5] {
            let nulls = make_null_events(&s, m);
            assert_eq!(nulls.len(), m * (2 * 6 * 5 - distinct.len()));
            assert!(nulls.iter().all(|e| !distinct.contains(&e.location())));
        }
    }
}

/// A 4×4 stream leaving exactly 20 of its 32 locations empty.
fn partly_covered() -> EventStream {
    let full = full_coverage(4, 4);
    let events = full.events.into_iter().take(12).collect();
    norm(4, 4, events)
}

#[test]
fn one_percent_of_one_hundred_nulls_adds_one_event() {
    let clf = random_classifier(5, 4, 4, 3);
    let s = partly_covered();
    assert_eq!(make_null_events(&s, 5).len(), 100);
    let cfg = NullConfig::default();
    assert_eq!(cfg.kept(100), 1);
    let adv = generate_attack(&clf, &s, &cfg, Objective::Untargeted { label: 2 }, 9).unwrap();
    assert_eq!(adv.added_count(), 1);
    assert_eq!(adv.stream.len(), s.len() + 1);
    for (e, o) in adv.stream.events.iter().zip(&adv.origins) {
        if let Some(i) = o.source {
            assert_eq!(e.t.to_bits(), s.events[i].t.to_bits());
            assert_eq!(e.location(), s.events[i].location());
        }
    }
}

#[test]
fn generation_is_seeded() {
    let clf = random_classifier(6, 8, 8, 3);
    let s = random_stream(7, 8, 8, 50);
    let cfg = NullConfig { top_fraction: 0.05, ..Default::default() };
    let obj = Objective::Untargeted { label: 0 };
    let a = generate_attack(&clf, &s, &cfg, obj, 1).unwrap();
    let b = generate_attack(&clf, &s, &cfg, obj, 1).unwrap();
    let c = generate_attack(&clf, &s, &cfg, obj, 2).unwrap();
    assert_eq!(a, b);
    assert_ne!(a.stream, c.stream);
}

#[test]
fn no_empty_location_means_no_candidates() {
    let clf = random_classifier(8, 4, 4, 3);
    let s = full_coverage(4, 4);
    let r = generate_attack(&clf, &s, &NullConfig::default(), Objective::Untargeted { label: 0 }, 0);
    assert!(matches!(r, Err(Error::NoCandidates)));
}

#[test]
fn combined_degenerates_to_its_stages() {
    let clf = random_classifier(9, 4, 4, 3);
    let obj = Objective::Untargeted { label: 1 };
    let cfg = AttackConfig::default();
    let null_cfg = NullConfig::default();

    let full = full_coverage(4, 4);
    assert_eq!(
        combined_attack(&clf, &full, &cfg, &null_cfg, obj, 3).unwrap(),
        shift_attack(&clf, &full, &cfg, obj).unwrap()
    );

    let partial = partly_covered();
    let no_shift = AttackConfig { iterations: 0, ..cfg };
    assert_eq!(
        combined_attack(&clf, &partial, &no_shift, &null_cfg, obj, 3).unwrap(),
        generate_attack(&clf, &partial, &null_cfg, obj, 3).unwrap()
    );
}

#[test]
fn untargeted_step_ascends_linearized_loss() {
    let clf = random_classifier(10, 8, 8, 5);
    let s = random_stream(11, 8, 8, 80);
    let obj = Objective::Untargeted { label: 3 };
    let g = grad_wrt_times(&clf, &s, obj).unwrap();
    let cfg = AttackConfig { iterations: 1, ..Default::default() };
    let adv = shift_attack(&clf, &s, &cfg, obj).unwrap();
    let mut inner = 0.0;
    for (e, o) in adv.stream.events.iter().zip(&adv.origins) {
        let i = o.source.unwrap();
        let dt = e.t - s.events[i].t;
        assert!(g[i] * dt >= 0.0, "event {i}: g={} dt={dt}", g[i]);
        inner += g[i] * dt;
    }
    assert!(inner > 0.0);
}

#[test]
fn targets_are_wrong_classes() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut counts = [0usize; 4];
    for _ in 0..3000 {
        let t = random_target(2, 4, &mut rng);
        assert_ne!(t, 2);
        counts[t] += 1;
    }
    for c in [0, 1, 3] {
        assert!((800..1200).contains(&counts[c]), "{counts:?}");
    }
}

#[test]
fn contract_check_catches_violations() {
    let s = random_stream(13, 8, 8, 30);
    let ok = AdversarialSample::unchanged(&s);
    verify_contract(&s, &ok, 1e-5).unwrap();

    let mut moved = ok.clone();
    moved.stream.events[0].t += 0.01;
    assert!(matches!(verify_contract(&s, &moved, 1e-5), Err(Error::ContractViolation(_))));

    let mut relocated = ok.clone();
    relocated.stream.events[0].x = (relocated.stream.events[0].x + 1) % 8;
    assert!(verify_contract(&s, &relocated, 1e-5).is_err());

    let mut dropped = ok.clone();
    dropped.stream.events.pop();
    dropped.origins.pop();
    assert!(verify_contract(&s, &dropped, 1e-5).is_err());

    let mut crowded = ok;
    crowded.stream.events.push(Event { t: crowded.stream.events[0].t + 1e-7, ..crowded.stream.events[0] });
    crowded.origins.push(Origin { source: None, anchor: crowded.stream.events[0].t + 1e-7, radius: 0.0 });
    assert!(verify_contract(&s, &crowded, 1e-5).is_err());
}

#[test]
fn unknown_attack_mode_is_rejected() {
    assert_eq!(AttackMode::parse("combined"), Some(AttackMode::Combined));
    assert_eq!(AttackMode::parse("bogus"), None);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn every_attack_honors_the_budget(seed in 0u64..10_000, n in 1usize..60, bins in 1usize..6, targeted: bool) {
        let clf = random_classifier(seed % 7, 8, 8, bins);
        let s = random_stream(seed, 8, 8, n);
        let obj = if targeted { Objective::Targeted { target: (seed % 4) as usize } } else { Objective::Untargeted { label: (seed % 4) as usize } };
        let cfg = AttackConfig::default();
        let null_cfg = NullConfig { top_fraction: 0.02, ..Default::default() };
        for mode in AttackMode::ALL {
            let adv = run_attack(&clf, &s, mode, &cfg, &null_cfg, obj, seed).unwrap();
            verify_contract(&s, &adv, cfg.lambda).unwrap();
            prop_assert!(adv.linf_shift() <= cfg.effective_epsilon(bins) + CONTRACT_TOLERANCE);
            for (e, o) in adv.stream.events.iter().zip(&adv.origins) {
                prop_assert!(e.t > 0.0 && e.t <= 1.0);
                if o.source.is_none() {
                    prop_assert!((e.t - o.anchor).abs() <= null_cfg.epsilon + CONTRACT_TOLERANCE);
                }
            }
            prop_assert_eq!(adv.stream.len() - adv.added_count(), s.len());
        }
    }
}
