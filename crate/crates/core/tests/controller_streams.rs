//! The freezing controller on scripted gradient streams with known answers.

use std::collections::BTreeSet;

use grades_core::experiment::{quantile_threshold, MetricsRecord};
use grades_core::grades::{replay_freeze_log, GradEsConfig, GradEsState, GradView, MetricMode};
use grades_core::verify::check_frozen_gradient_bound;
use grades_core::{ComponentId, Matrix};
use proptest::prelude::*;

const N: usize = 14;
const DECAY: f64 = 0.9;

fn scalar(v: f64) -> Matrix<f64> {
    Matrix::new(1, 1, vec![v]).unwrap()
}

fn state(n: usize) -> GradEsState<f64> {
    GradEsState::new(
        (0..n)
            .map(|i| (ComponentId::from_index(i), vec![(1, 1)]))
            .collect(),
    )
    .unwrap()
}

/// First `t > grace` with `c · 0.9^t < τ`, by direct search.
fn crossing(c: f64, tau: f64, grace: usize, total: usize) -> Option<usize> {
    for t in 1..=total {
        let metric = c * DECAY.powi(t as i32);
        if t > grace && metric < tau {
            return Some(t);
        }
    }
    None
}

fn coefficients() -> Vec<f64> {
    (0..N).map(|k| 1.0 + 3.0 * k as f64).collect()
}

/// Drives the controller with per-component metrics `c_k · 0.9^t`, either
/// as raw gradients (norm mode) or as increments of a cumulative gradient
/// (difference mode). Returns each component's freeze step.
fn drive(
    mode: MetricMode,
    alpha: f64,
    tau: f64,
    total: usize,
) -> (Vec<Option<usize>>, Vec<MetricsRecord>, GradEsState<f64>) {
    let cfg = GradEsConfig::new(alpha, tau, total).with_mode(mode);
    let cs = coefficients();
    let mut st = state(N);
    let mut cumulative = [0.0; N];
    let mut records = Vec::new();
    for t in 1..=total {
        let grads: Vec<Matrix<f64>> = cs
            .iter()
            .enumerate()
            .map(|(k, &c)| {
                let m = c * DECAY.powi(t as i32);
                match mode {
                    MetricMode::GradNorm => scalar(if k % 2 == 0 { m } else { -m }),
                    MetricMode::GradDiff => {
                        cumulative[k] += m;
                        scalar(cumulative[k])
                    }
                }
            })
            .collect();
        let views: Vec<_> = grads.iter().map(GradView::Full).collect();
        let obs = st.observe_step(t, &views, &cfg).unwrap();
        records.push(MetricsRecord {
            step: t,
            train_loss: 0.0,
            lr: 0.0,
            metrics: obs.metrics,
            newly_frozen: obs.newly_frozen,
            frozen_count: st.frozen().len(),
            frozen_over_tau: Vec::new(),
            flops: Default::default(),
            wall_time_ms: None,
        });
        if st.should_terminate() {
            break;
        }
    }
    let mut steps = vec![None; N];
    for e in st.freeze_log() {
        steps[e.component.index()] = Some(e.step);
    }
    (steps, records, st)
}

#[test]
fn freeze_steps_equal_closed_form_crossings() {
    for mode in [MetricMode::GradNorm, MetricMode::GradDiff] {
        for (alpha, tau) in [(0.5, 1.0), (0.2, 0.05), (0.1, 3.0)] {
            let total = 100;
            let grace = (alpha * total as f64).ceil() as usize;
            let (steps, _, _) = drive(mode, alpha, tau, total);
            for (k, &c) in coefficients().iter().enumerate() {
                let want = crossing(c, tau, grace, total);
                assert_eq!(steps[k], want, "{mode:?} α={alpha} τ={tau} c={c}");
                assert!(steps[k].is_none_or(|s| s > grace));
            }
        }
    }
}

#[test]
fn closed_form_crossing_by_logarithm() {
    // c · 0.9^t < τ  ⇔  t > ln(c/τ) / ln(1/0.9).
    let (steps, _, _) = drive(MetricMode::GradNorm, 0.05, 0.5, 200);
    for (k, &c) in coefficients().iter().enumerate() {
        let bound = (c / 0.5_f64).ln() / (1.0 / DECAY).ln();
        let first = (bound.floor() as usize + 1).max(11);
        assert_eq!(steps[k], Some(first));
    }
}

#[test]
fn replay_reproduces_frozen_trajectory_and_run_halts_when_all_frozen() {
    let (_, records, st) = drive(MetricMode::GradDiff, 0.3, 0.2, 200);
    let last = records.last().unwrap().step;
    assert!(st.should_terminate());
    assert!(last < 200);
    let replayed = replay_freeze_log(st.freeze_log(), last);
    let mut live = BTreeSet::new();
    for (r, want) in records.iter().zip(&replayed) {
        live.extend(r.newly_frozen.iter().copied());
        assert_eq!(&live, want);
        assert_eq!(r.frozen_count, want.len());
    }
    // All frozen happens exactly at the latest individual crossing.
    let latest = st.freeze_log().iter().map(|e| e.step).max().unwrap();
    assert_eq!(latest, last);
    assert!(check_frozen_gradient_bound(st.freeze_log(), &records).passed);
}

#[test]
fn grad_norm_events_restate_the_bound_from_telemetry() {
    let (_, records, st) = drive(MetricMode::GradNorm, 0.5, 1.0, 100);
    let report = check_frozen_gradient_bound(st.freeze_log(), &records);
    assert!(report.passed, "{:?}", report.details);
    assert!(!st.freeze_log().is_empty());
    let mut tampered = st.freeze_log().to_vec();
    tampered[0].metric = tampered[0].tau;
    assert!(!check_frozen_gradient_bound(&tampered, &records).passed);
    assert!(check_frozen_gradient_bound(&[], &[]).passed);
}

#[test]
fn two_population_quantile_separates() {
    let mut values: Vec<f64> = (0..7).map(|i| 0.01 + 0.001 * i as f64).collect();
    values.extend((0..7).map(|i| 5.0 + i as f64));
    let tau = quantile_threshold(&values, 0.5).unwrap();
    assert!(tau > 0.016 && tau < 5.0);
    assert!(quantile_threshold(&values, 0.0).unwrap() < 0.01);
    assert!(quantile_threshold(&values, 1.0).unwrap() > 11.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn freezing_is_monotone_and_respects_grace(
        alpha in 0.0f64..1.0,
        tau in 0.0f64..2.0,
        stream in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 4), 1..30),
    ) {
        let total = stream.len();
        let cfg = GradEsConfig::new(alpha, tau, total);
        let grace = cfg.grace_step();
        let mut st = state(4);
        let mut seen = BTreeSet::new();
        for (i, g) in stream.iter().enumerate() {
            let grads: Vec<Matrix<f64>> = g.iter().map(|&v| scalar(v)).collect();
            let views: Vec<_> = grads.iter().map(GradView::Full).collect();
            let obs = st.observe_step(i + 1, &views, &cfg).unwrap();
            if i < grace {
                prop_assert!(obs.newly_frozen.is_empty());
            }
            prop_assert!(seen.is_subset(st.frozen()));
            seen = st.frozen().clone();
            for (_, m) in &obs.metrics {
                prop_assert!(*m >= 0.0);
            }
        }
        for e in st.freeze_log() {
            prop_assert!(e.metric < e.tau && e.step > grace);
        }
    }

    #[test]
    fn zero_threshold_never_freezes(stream in prop::collection::vec(-1.0f64..1.0, 1..40)) {
        let cfg = GradEsConfig::new(0.0, 0.0, stream.len());
        let mut st = state(1);
        for (i, &v) in stream.iter().enumerate() {
            let g = scalar(v);
            st.observe_step(i + 1, &[GradView::Full(&g)], &cfg).unwrap();
        }
        prop_assert!(st.frozen().is_empty());
    }
}
