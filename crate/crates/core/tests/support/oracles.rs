//! Slow, obviously-correct counterparts of library routines.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tabnsa::nsa::{full_attention, NsaBlock, NsaConfig, NsaOptions};
use tabnsa::Tensor;

/// Mann–Whitney by enumerating every positive/negative pair.
pub fn auc_pairwise(scores: &[f64], labels: &[bool]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for (i, &li) in labels.iter().enumerate() {
        if !li {
            continue;
        }
        for (j, &lj) in labels.iter().enumerate() {
            if lj {
                continue;
            }
            pairs += 1.0;
            if scores[i] > scores[j] {
                wins += 1.0;
            } else if scores[i] == scores[j] {
                wins += 0.5;
            }
        }
    }
    wins / pairs
}

/// Selection-block scores by counting, for every compression index, how many
/// `(m, k)` pairs of the double sum land on it.
pub fn selection_scores_expanded(p_cmp: &[f64], l: usize, d: usize, ls: usize, n_slc: usize) -> Vec<f64> {
    let (a, c) = (ls / d, l / d);
    (0..n_slc)
        .map(|j| {
            let top = (a * (j + 1)) as isize - 1;
            p_cmp
                .iter()
                .enumerate()
                .map(|(idx, &p)| {
                    let mut mult = 0;
                    for m in 0..a as isize {
                        for k in 0..c as isize {
                            if top - m - k == idx as isize {
                                mult += 1;
                            }
                        }
                    }
                    mult as f64 * p
                })
                .sum()
        })
        .collect()
}

/// Sorts every `(score, index)` pair and keeps the first `n` candidates.
pub fn top_n_full_sort(scores: &[f64], candidates: usize, n: usize) -> Vec<usize> {
    let mut pairs: Vec<(f64, usize)> = scores[..candidates].iter().copied().zip(0..).collect();
    pairs.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    pairs.into_iter().take(n).map(|p| p.1).collect()
}

/// Random NSA block whose window covers every token, plus matching input.
pub fn dense_window_case(seed: u64) -> (NsaBlock, Tensor) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(2..=12);
    let heads = rng.random_range(1..=3);
    let head_dim = rng.random_range(1..=4);
    let l = rng.random_range(2..=4);
    let ls = rng.random_range(2..=l);
    let cfg = NsaConfig {
        dim: heads * head_dim,
        heads,
        head_dim,
        window: n + rng.random_range(0..3),
        compress_block: l,
        compress_stride: 1,
        select_block: ls,
        num_selected: rng.random_range(1..=3),
        causal: rng.random_bool(0.5),
    };
    let bound = cfg.bind(n).expect("valid dense-window config");
    let block = NsaBlock::new(bound, &mut rng);
    let x = Tensor::from_fn(vec![2, n, heads * head_dim], |_| rng.random_range(-1.5..1.5));
    (block, x)
}

/// `max |nsa(x) − (full_attention(q, k, v) · W_o + b_o)|` with the gates
/// pinned to the window branch.
pub fn dense_equivalence_error(block: &NsaBlock, x: &Tensor) -> f64 {
    let opts = NsaOptions { gates: Some([0.0, 0.0, 1.0]) };
    let sparse = block.forward(x, &opts).output;
    let (q, k, v) = block.project_qkv(x);
    let o = full_attention(&q, &k, &v, block.cfg.causal());
    // [B, H, N, Dh] -> [B, N, D]
    let (b, h, n, dh) = (o.shape()[0], o.shape()[1], o.shape()[2], o.shape()[3]);
    let merged = Tensor::from_fn(vec![b, n, h * dh], |i| {
        let (bi, rest) = (i / (n * h * dh), i % (n * h * dh));
        let (t, c) = (rest / (h * dh), rest % (h * dh));
        o.at(&[bi, c / dh, t, c % dh])
    });
    let w_o = block.params.get(block.layout.w_o);
    let b_o = block.params.get(block.layout.b_o);
    let d = h * dh;
    let dense = Tensor::from_fn(vec![b, n, d], |i| {
        let row = i / d;
        let j = i % d;
        b_o.data()[j] + (0..d).map(|k| merged.data()[row * d + k] * w_o.data()[k * d + j]).sum::<f64>()
    });
    sparse.max_abs_diff(&dense)
}
