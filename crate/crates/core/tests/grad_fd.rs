//! Backprop against central finite differences.

use grades_core::lora::LoraSet;
use grades_core::model::{backward, forward, Role};
use grades_core::task::Example;
use grades_core::verify::{check_grad_fd, excite, random_example, GradCheckInput};
use grades_core::{ModelConfig, ModelParams};

const EPS: f64 = 1e-5;
const TOL: f64 = 1e-4;
/// Pure relative error; the floor only guards 0/0.
const FLOOR: f64 = f64::MIN_POSITIVE;
/// At initialisation some attention gradients are around 1e-8, below what a
/// central difference with ε = 1e-5 resolves (roundoff ≈ 1e-16·L/ε ≈ 2e-11).
const INIT_FLOOR: f64 = 1e-6;

fn cfg(seed: u64) -> ModelConfig {
    ModelConfig {
        vocab_size: 11,
        d_model: 8,
        n_heads: 2,
        n_layers: 2,
        d_ff: 12,
        max_seq_len: 10,
        seed,
    }
}

fn excited(seed: u64) -> ModelParams<f64> {
    let mut p = ModelParams::init(&cfg(seed)).unwrap();
    excite(&mut p, seed);
    p
}

fn example(seed: u64) -> Example {
    random_example(11, 7, 2, seed)
}

#[test]
fn full_model_gradients_match_central_differences() {
    for seed in 1..=5 {
        for params in [excited(seed)] {
            let input = GradCheckInput {
                params,
                adapters: None,
                example: example(seed),
                eps: EPS,
                abs_floor: FLOOR,
            };
            let report = check_grad_fd(&input, TOL).unwrap();
            assert_eq!(report.samples, 2 * (4 * 64 + 3 * 96));
            assert!(
                report.passed,
                "seed {seed}: {:.3e} {:#?}",
                report.max_violation, report.details
            );
            for role in Role::ALL {
                assert!(report
                    .details
                    .iter()
                    .any(|d| d.contains(&format!(".{role}:"))));
            }
        }
    }
}

#[test]
fn gradients_at_initialisation_match_above_difference_resolution() {
    for seed in 1..=5 {
        let input = GradCheckInput {
            params: ModelParams::init(&cfg(seed)).unwrap(),
            adapters: None,
            example: example(seed),
            eps: EPS,
            abs_floor: INIT_FLOOR,
        };
        let report = check_grad_fd(&input, TOL).unwrap();
        assert!(
            report.passed,
            "seed {seed}: {:.3e} {:#?}",
            report.max_violation, report.details
        );
    }
}

#[test]
fn adapter_gradients_match_central_differences() {
    for seed in 1..=3 {
        let mut set = LoraSet::<f64>::new(&cfg(seed), 2, 1.0, &Role::ALL, seed).unwrap();
        set.randomize_b(seed, 0.5);
        let input = GradCheckInput {
            params: excited(seed),
            adapters: Some(set),
            example: example(seed),
            eps: EPS,
            abs_floor: FLOOR,
        };
        let report = check_grad_fd(&input, TOL).unwrap();
        assert!(
            report.passed,
            "seed {seed}: {:.3e} {:#?}",
            report.max_violation, report.details
        );
    }
}

#[test]
fn single_token_vocabulary_has_zero_gradients() {
    let mut c = cfg(3);
    c.vocab_size = 1;
    let p = ModelParams::<f64>::init(&c).unwrap();
    let (_, cache) = forward(&p, &[0, 0, 0]).unwrap();
    let g = backward(&p, &cache, &[0, 0, 0]).unwrap();
    for id in c.components() {
        assert!(g.monitored(id).data().iter().all(|&x| x == 0.0), "{id}");
    }
}
