//! Index bookkeeping for the three sparse branches: which keys each query
//! sees, how compression probabilities turn into selection-block scores, and
//! top-n block choice.

use std::ops::Range;

use crate::error::{Error, Result};
use crate::graph::Visibility;

use super::config::BoundNsa;

/// Maps compression-block probabilities onto selection blocks.
///
/// `p_slc[j] = Σ_{m < l'/d} Σ_{k < l/d} p_cmp[(l'/d)(j + 1) − 1 − m − k]`,
/// skipping indices outside `p_cmp`. Each compression block contributes to
/// every selection block it overlaps, weighted by how many stride-aligned
/// sub-blocks the two share. With `l' = l = d` this is the identity.
pub fn map_selection_scores(
    p_cmp: &[f64],
    compress_block: usize,
    compress_stride: usize,
    select_block: usize,
    n_slc: usize,
) -> Result<Vec<f64>> {
    let d = compress_stride;
    if d == 0 || select_block % d != 0 || compress_block % d != 0 {
        return Err(Error::Config(format!(
            "selection block {select_block} and compression block {compress_block} must be multiples of the stride {d}"
        )));
    }
    let (a, c) = ((select_block / d) as isize, (compress_block / d) as isize);
    let mut out = vec![0.0; n_slc];
    for (j, slot) in out.iter_mut().enumerate() {
        let top = a * (j as isize + 1) - 1;
        let mut acc = 0.0;
        for m in 0..a {
            for k in 0..c {
                let idx = top - m - k;
                if idx >= 0 && (idx as usize) < p_cmp.len() {
                    acc += p_cmp[idx as usize];
                }
            }
        }
        *slot = acc;
    }
    Ok(out)
}

/// The `n` highest-scoring candidates in descending score order; ties go to
/// the lower index.
pub fn top_n(scores: &[f64], candidates: impl IntoIterator<Item = usize>, n: usize) -> Vec<usize> {
    let mut c: Vec<usize> = candidates.into_iter().collect();
    c.sort_by(|&i, &j| scores[j].total_cmp(&scores[i]).then(i.cmp(&j)));
    c.truncate(n);
    c
}

/// Keys visible to query `t` in the sliding-window branch.
pub fn window_range(t: usize, window: usize, n_tokens: usize, causal: bool) -> Range<usize> {
    let w = window.min(n_tokens);
    if causal {
        (t + 1).saturating_sub(w)..t + 1
    } else {
        let start = t.saturating_sub((w - 1) / 2).min(n_tokens - w);
        start..start + w
    }
}

/// Full-attention visibility: every key, or the prefix `0..=t` when causal.
pub fn dense_visibility(n_tokens: usize, causal: bool) -> Visibility {
    if causal {
        Visibility::Shared((0..n_tokens).map(|t| (0..=t).collect()).collect())
    } else {
        Visibility::all(n_tokens, n_tokens)
    }
}

pub fn window_visibility(cfg: &BoundNsa) -> Visibility {
    Visibility::Shared(
        (0..cfg.n_tokens)
            .map(|t| window_range(t, cfg.window, cfg.n_tokens, cfg.causal()).collect())
            .collect(),
    )
}

/// Compressed keys visible to each query. Under causal masking a block is
/// visible once its last token is.
pub fn compression_visibility(cfg: &BoundNsa) -> Visibility {
    if !cfg.causal() {
        return Visibility::all(cfg.n_tokens, cfg.n_cmp);
    }
    Visibility::Shared(
        (0..cfg.n_tokens)
            .map(|t| {
                (0..cfg.n_cmp)
                    .filter(|&i| i * cfg.compress_stride + cfg.compress_block - 1 <= t)
                    .collect()
            })
            .collect(),
    )
}

/// Selection blocks query `t` may choose from.
pub fn selection_candidates(cfg: &BoundNsa, t: usize) -> Range<usize> {
    if cfg.causal() {
        0..(t / cfg.select_block + 1).min(cfg.n_slc)
    } else {
        0..cfg.n_slc
    }
}

/// Tokens covered by the chosen blocks, ascending, clipped to `0..n_tokens`
/// (and to `0..=t` when causal).
pub fn selected_tokens(cfg: &BoundNsa, blocks: &[usize], t: usize) -> Vec<usize> {
    let mut sorted = blocks.to_vec();
    sorted.sort_unstable();
    let limit = if cfg.causal() { t + 1 } else { cfg.n_tokens };
    sorted
        .iter()
        .flat_map(|&j| j * cfg.select_block..((j + 1) * cfg.select_block).min(limit))
        .collect()
}
