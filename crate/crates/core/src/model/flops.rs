//! Parameter and FLOP accounting.
//!
//! Counting convention:
//!
//! * a multiply-accumulate is 2 FLOPs; bias additions are free;
//! * element-wise additions and multiplications are 1 FLOP;
//! * GELU, SiLU and sigmoid are 1 FLOP per element;
//! * softmax (including the `1/√Dh` logit scale) and layer norm are 5 FLOPs
//!   per element;
//! * mean pooling costs `N` per output element;
//! * selection bookkeeping (head averaging, score mapping, top-n) is free;
//! * the selection branch runs a padded kernel over `n` whole blocks of `l'`
//!   keys, masked positions included.
//!
//! One attention query against `k` keys costs `k·(4·Dh + 5)` per head.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{Fusion, ModelConfig};
use crate::error::Result;
use crate::nsa::{selection_candidates, BoundNsa};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCount {
    pub total: usize,
    /// `(path, scalar count)` in initialization order.
    pub items: Vec<(String, usize)>,
}

/// Exact trainable-scalar count, itemized per parameter path.
pub fn count_params(config: &ModelConfig) -> Result<ParamCount> {
    let b = config.bind()?;
    let (n, d, dh, l) = (config.num_tokens, config.dim(), b.head_dim(), b.compress_block);
    let (hid, c) = (config.hidden_head, config.output_dim());
    let mut items: Vec<(String, usize)> = Vec::new();
    let mut push = |p: String, k: usize| items.push((p, k));
    push("embed.w".into(), d);
    push("embed.b".into(), d);
    if config.feature_id_embedding {
        push("embed.feature_id".into(), n * d);
    }
    for i in 0..config.num_blocks {
        let p = format!("block{i}");
        for w in ["w_q", "w_k", "w_v"] {
            push(format!("{p}.nsa.{w}"), d * d);
        }
        for phi in ["phi_k", "phi_v"] {
            push(format!("{p}.nsa.{phi}.pos"), l * dh);
            push(format!("{p}.nsa.{phi}.w1"), (l * dh) * (l * dh));
            push(format!("{p}.nsa.{phi}.b1"), l * dh);
            push(format!("{p}.nsa.{phi}.w2"), l * dh * dh);
            push(format!("{p}.nsa.{phi}.b2"), dh);
        }
        push(format!("{p}.nsa.w_gate"), d * 3);
        push(format!("{p}.nsa.b_gate"), 3);
        push(format!("{p}.nsa.w_o"), d * d);
        push(format!("{p}.nsa.b_o"), d);
        push(format!("{p}.mixer.ln1_gamma"), n);
        push(format!("{p}.mixer.ln1_beta"), n);
        push(format!("{p}.mixer.w1"), n * n);
        push(format!("{p}.mixer.b1"), n);
        push(format!("{p}.mixer.ln2_gamma"), d);
        push(format!("{p}.mixer.ln2_beta"), d);
        push(format!("{p}.mixer.w2"), d * d);
        push(format!("{p}.mixer.b2"), d);
        match config.fusion {
            Fusion::Mlp => {
                push(format!("{p}.fuse.w1"), d * d);
                push(format!("{p}.fuse.b1"), d);
                push(format!("{p}.fuse.w2"), d * d);
                push(format!("{p}.fuse.b2"), d);
            }
            Fusion::Concat => {
                push(format!("{p}.fuse.w"), 2 * d * d);
                push(format!("{p}.fuse.b"), d);
            }
            Fusion::Sum | Fusion::Sequential => {}
        }
    }
    push("head.w1".into(), d * hid);
    push("head.b1".into(), hid);
    push("head.w2".into(), hid * c);
    push("head.b2".into(), c);
    Ok(ParamCount {
        total: items.iter().map(|(_, k)| k).sum(),
        items,
    })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopReport {
    pub batch: usize,
    pub total: u64,
    /// Per-component totals for the whole batch; keys are stable.
    pub components: BTreeMap<String, u64>,
    /// Selection plus window attention: the sparse attention computation.
    pub attention_computation: u64,
    /// What full attention over all visible tokens would cost in the same
    /// blocks, for comparison with `attention_computation`.
    pub dense_attention_computation: u64,
}

pub const FLOP_COMPONENTS: [&str; 12] = [
    "embedding",
    "qkv_projection",
    "compression_mlp",
    "compression_attention",
    "selection_attention",
    "window_attention",
    "gating",
    "output_projection",
    "tabmixer",
    "fusion",
    "pooling",
    "head",
];

/// Visible keys per query for each branch, summed over queries:
/// `(compression, selection, window, dense)`.
pub fn visible_key_totals(b: &BoundNsa) -> (u64, u64, u64, u64) {
    let n = b.n_tokens;
    let mut totals = (0u64, 0u64, 0u64, 0u64);
    for t in 0..n {
        let (cmp, win, dense) = if b.causal() {
            let cmp = (0..b.n_cmp)
                .filter(|&i| i * b.compress_stride + b.compress_block - 1 <= t)
                .count();
            (cmp, (t + 1).min(b.window), t + 1)
        } else {
            (b.n_cmp, b.window, n)
        };
        let blocks = selection_candidates(b, t).len().min(b.num_selected);
        totals.0 += cmp as u64;
        totals.1 += (blocks * b.select_block) as u64;
        totals.2 += win as u64;
        totals.3 += dense as u64;
    }
    totals
}

/// Forward-pass FLOPs for a batch of `batch` rows.
pub fn count_flops(config: &ModelConfig, batch: usize) -> Result<FlopReport> {
    let b = config.bind()?;
    let n = config.num_tokens as u64;
    let d = config.dim() as u64;
    let h = b.heads() as u64;
    let dh = b.head_dim() as u64;
    let l = b.compress_block as u64;
    let hid = config.hidden_head as u64;
    let c = config.output_dim() as u64;
    let blocks = config.num_blocks as u64;
    let per_query = 4 * dh + 5;
    let (k_cmp, k_slc, k_win, k_dense) = visible_key_totals(&b);

    let mut per_sample: BTreeMap<String, u64> = BTreeMap::new();
    let mut put = |k: &str, v: u64| *per_sample.entry(k.to_string()).or_insert(0) += v;

    put("embedding", 2 * n * d + if config.feature_id_embedding { n * d } else { 0 });

    let ld = l * dh;
    let phi = ld + 2 * ld * ld + ld + 2 * ld * dh;
    let fusion = match config.fusion {
        Fusion::Sum | Fusion::Sequential => n * d,
        Fusion::Mlp => n * d + 2 * n * d * d + n * d + 2 * n * d * d,
        Fusion::Concat => 4 * n * d * d,
    };
    put("qkv_projection", blocks * 3 * 2 * n * d * d);
    put("compression_mlp", blocks * 2 * h * b.n_cmp as u64 * phi);
    put("compression_attention", blocks * h * k_cmp * per_query);
    put("selection_attention", blocks * h * k_slc * per_query);
    put("window_attention", blocks * h * k_win * per_query);
    put("gating", blocks * (2 * n * d * 3 + 3 * n + 5 * n * d));
    put("output_projection", blocks * 2 * n * d * d);
    put("tabmixer", blocks * (10 * n * d + 2 * n * n * d + 2 * n * d * d + 4 * n * d));
    put("fusion", blocks * fusion);
    put("pooling", n * d);
    put("head", 2 * d * hid + hid + 2 * hid * c);

    let bsz = batch as u64;
    let components: BTreeMap<String, u64> = per_sample.into_iter().map(|(k, v)| (k, v * bsz)).collect();
    let attention_computation = components["selection_attention"] + components["window_attention"];
    Ok(FlopReport {
        batch,
        total: components.values().sum(),
        attention_computation,
        dense_attention_computation: bsz * blocks * h * k_dense * per_query,
        components,
    })
}
