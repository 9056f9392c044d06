#![allow(dead_code)]

pub mod oracles;
pub mod reference;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tabnsa::data::{LabelVector, Task};
use tabnsa::model::{Fusion, Model, ModelConfig};
use tabnsa::nsa::NsaConfig;
use tabnsa::training::{loss_and_grads, LossKind, Objective};
use tabnsa::Tensor;

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// A random small but complete model configuration.
pub fn random_tiny_config(rng: &mut ChaCha8Rng) -> ModelConfig {
    let n = rng.random_range(3..=9);
    let heads = rng.random_range(1..=2);
    let head_dim = rng.random_range(2..=4);
    let l = rng.random_range(2..=4);
    let ls = rng.random_range(2..=l);
    let g = gcd(l, ls);
    let divisors: Vec<usize> = (1..=g).filter(|k| g % k == 0).collect();
    let stride = divisors[rng.random_range(0..divisors.len())];
    let nsa = NsaConfig {
        dim: heads * head_dim,
        heads,
        head_dim,
        window: rng.random_range(1..=n),
        compress_block: l,
        compress_stride: stride,
        select_block: ls,
        num_selected: rng.random_range(1..=3),
        causal: rng.random_bool(0.3),
    };
    let task = match rng.random_range(0..3) {
        0 => Task::Classification { num_classes: 2 },
        1 => Task::Classification { num_classes: 3 },
        _ => Task::Regression,
    };
    ModelConfig {
        nsa,
        num_tokens: n,
        task,
        hidden_head: rng.random_range(3..=6),
        num_blocks: rng.random_range(1..=2),
        fusion: Fusion::ALL[rng.random_range(0..4)],
        feature_id_embedding: rng.random_bool(0.7),
    }
}

pub fn random_input(rows: usize, n: usize, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(vec![rows, n], |_| rng.random_range(-2.0..2.0))
}

pub fn random_labels(rows: usize, task: Task, rng: &mut ChaCha8Rng) -> LabelVector {
    match task {
        Task::Classification { num_classes } => LabelVector::Classification {
            labels: (0..rows).map(|i| i % num_classes).collect(),
            num_classes,
        },
        Task::Regression => LabelVector::Regression {
            targets: (0..rows).map(|_| rng.random_range(-1.0..1.0)).collect(),
        },
    }
}

pub fn objective_for(task: Task, rng: &mut ChaCha8Rng) -> Objective {
    match task {
        Task::Classification { num_classes } => Objective {
            kind: LossKind::WeightedCrossEntropy,
            weights: (0..num_classes).map(|_| rng.random_range(0.5..2.0)).collect(),
        },
        Task::Regression => Objective { kind: LossKind::Mse, weights: Vec::new() },
    }
}

/// Denominator floor for the per-path relative error.
pub const GRAD_FLOOR: f64 = 1e-6;

pub struct PathCheck {
    pub path: String,
    pub rel_error: f64,
    pub analytic_norm: f64,
}

/// Central differences with step `h` for every scalar of every parameter,
/// compared per parameter path as `‖a − n‖ / max(‖a‖, ‖n‖, 1e-6)`.
/// At `h = 1e-5` the difference quotient carries roundoff near `ε·|L|/h ≈ 1e-11`,
/// so paths whose gradient is itself below 1e-6 are judged on absolute error.
pub fn gradcheck(model: &Model, x: &Tensor, y: &LabelVector, obj: &Objective, h: f64) -> Vec<PathCheck> {
    let (_, analytic) = loss_and_grads(model, x, y, obj).expect("finite loss");
    let loss_at = |m: &Model| obj.loss(&m.predict(x), y).expect("finite loss").0;
    let mut probe = model.clone();
    let mut out = Vec::new();
    for (pi, id) in model.params.ids().enumerate() {
        let len = model.params.get(id).len();
        let mut num = vec![0.0; len];
        for (i, slot) in num.iter_mut().enumerate() {
            let orig = model.params.get(id).data()[i];
            probe.params.get_mut(id).data_mut()[i] = orig + h;
            let fp = loss_at(&probe);
            probe.params.get_mut(id).data_mut()[i] = orig - h;
            let fm = loss_at(&probe);
            probe.params.get_mut(id).data_mut()[i] = orig;
            *slot = (fp - fm) / (2.0 * h);
        }
        let a = analytic[pi].data();
        let diff = a.iter().zip(&num).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt();
        let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
        let nn = num.iter().map(|v| v * v).sum::<f64>().sqrt();
        out.push(PathCheck {
            path: model.params.path(id).to_string(),
            rel_error: diff / na.max(nn).max(GRAD_FLOOR),
            analytic_norm: na,
        });
    }
    out
}

/// Builds a random tiny model with matching inputs, labels and loss.
pub fn tiny_problem(seed: u64) -> (Model, Tensor, LabelVector, Objective) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = random_tiny_config(&mut rng);
    let mut model = Model::new(cfg.clone(), seed).expect("valid tiny config");
    // move off the zero biases and unit gains of the default initialization
    for t in model.params.tensors_mut() {
        t.data_mut().iter_mut().for_each(|v| *v += rng.random_range(-0.3..0.3));
    }
    let x = random_input(4, cfg.num_tokens, &mut rng);
    let y = random_labels(4, cfg.task, &mut rng);
    let obj = objective_for(cfg.task, &mut rng);
    (model, x, y, obj)
}
