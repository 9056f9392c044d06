mod support;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use support::reference::reference_forward;
use support::{random_input, random_tiny_config};
use tabnsa::data::Task;
use tabnsa::model::flops::FLOP_COMPONENTS;
use tabnsa::model::{count_flops, Model, ModelConfig};
use tabnsa::nsa::NsaConfig;

#[test]
fn counter_matches_instrumented_execution() {
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let cfg = random_tiny_config(&mut rng);
        let model = Model::new(cfg.clone(), seed).unwrap();
        let x = random_input(3, cfg.num_tokens, &mut rng);
        let measured = reference_forward(&model, &x);

        // the interpreter must compute what the model computes
        let logits = model.predict(&x);
        for (a, b) in logits.data().iter().zip(&measured.logits) {
            assert!((a - b).abs() < 1e-9, "seed {seed}: logits {a} vs {b}");
        }

        let counted = count_flops(&cfg, 3).unwrap();
        for k in FLOP_COMPONENTS {
            let m = measured.flops.get(k).copied().unwrap_or(0);
            assert_eq!(counted.components[k], m, "seed {seed}: component {k} ({cfg:?})");
        }
        assert_eq!(counted.total, measured.total());
        assert_eq!(counted.attention_computation, measured.attention_computation());
    }
}

fn config(n: usize, window: usize, l: usize, ls: usize, top: usize) -> ModelConfig {
    let mut c = ModelConfig::new(n, Task::Classification { num_classes: 2 });
    c.nsa = NsaConfig {
        window,
        compress_block: l,
        compress_stride: l.min(ls),
        select_block: ls,
        num_selected: top,
        ..NsaConfig::default()
    };
    c
}

#[test]
fn sparse_cheaper_than_dense_beyond_visible_budget() {
    for (w, ls, top) in [(4, 4, 2), (2, 2, 1), (8, 4, 4), (3, 2, 3)] {
        let n_min = w + top * ls + 1;
        for n in n_min..n_min + 20 {
            let mut c = config(n, w, 4.max(ls), ls, top);
            c.nsa.compress_stride = ls;
            let f = count_flops(&c, 1).unwrap();
            assert!(f.attention_computation < f.dense_attention_computation, "N={n} w={w} l'={ls} n={top}");
        }
    }
}

#[test]
fn attention_cost_doubles_with_tokens() {
    for n in [16, 32, 64, 100] {
        let a = count_flops(&config(n, 4, 4, 4, 2), 1).unwrap();
        let b = count_flops(&config(2 * n, 4, 4, 4, 2), 1).unwrap();
        let ratio = b.attention_computation as f64 / a.attention_computation as f64;
        assert!((ratio - 2.0).abs() <= 0.1, "N={n}: ratio {ratio}");
    }
}
