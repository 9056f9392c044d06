//! Native sparse attention over feature tokens.
//!
//! Three branches share one set of query/key/value projections:
//!
//! * **compression** attends over block summaries produced by a small MLP `φ`;
//! * **selection** attends over the tokens of the top-n blocks, ranked by the
//!   compression branch's attention probabilities;
//! * **window** attends over a fixed neighbourhood of each query.
//!
//! A per-token sigmoid gate weights the branch outputs before the output
//! projection. Each branch is an attention restricted to a per-query visible
//! key set, so all of them reuse [`Graph::attention`].

pub mod config;
pub mod selection;

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::graph::{AttentionProbs, Graph, Var, Visibility};
use crate::params::{uniform_init, ParamId, ParamStore};
use crate::tensor::Tensor;

pub use config::{BoundNsa, NsaConfig};
pub(crate) use config::gcd;
pub use selection::{
    compression_visibility, dense_visibility, map_selection_scores, selected_tokens, selection_candidates,
    top_n, window_range, window_visibility,
};

pub const BRANCH_NAMES: [&str; 3] = ["cmp", "slc", "win"];

/// Block summarizer `φ`: learned offsets per within-block position, then
/// `l·Dh → l·Dh → Dh` with GELU in between.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhiLayout {
    pub pos: ParamId,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl PhiLayout {
    fn init<R: Rng>(store: &mut ParamStore, prefix: &str, block: usize, head_dim: usize, rng: &mut R) -> Self {
        let flat = block * head_dim;
        PhiLayout {
            pos: store.add(format!("{prefix}.pos"), Tensor::zeros(vec![block, head_dim])),
            w1: store.add(format!("{prefix}.w1"), uniform_init(rng, vec![flat, flat], flat)),
            b1: store.add(format!("{prefix}.b1"), Tensor::zeros(vec![flat])),
            w2: store.add(format!("{prefix}.w2"), uniform_init(rng, vec![flat, head_dim], flat)),
            b2: store.add(format!("{prefix}.b2"), Tensor::zeros(vec![head_dim])),
        }
    }
}

/// How compressed keys and values are formed.
#[derive(Clone, Copy, Debug)]
pub enum Phi {
    Mlp(PhiLayout),
    /// Plain average over each block; a test fixture.
    Mean,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NsaLayout {
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub phi_k: PhiLayout,
    pub phi_v: PhiLayout,
    pub w_gate: ParamId,
    pub b_gate: ParamId,
    pub w_o: ParamId,
    pub b_o: ParamId,
}

impl NsaLayout {
    pub fn init<R: Rng>(store: &mut ParamStore, prefix: &str, cfg: &BoundNsa, rng: &mut R) -> Self {
        let d = cfg.dim();
        let (l, dh) = (cfg.compress_block, cfg.head_dim());
        let mut lin = |name: &str, rows: usize, cols: usize, rng: &mut R| {
            store.add(format!("{prefix}.{name}"), uniform_init(rng, vec![rows, cols], rows))
        };
        let w_q = lin("w_q", d, d, rng);
        let w_k = lin("w_k", d, d, rng);
        let w_v = lin("w_v", d, d, rng);
        let phi_k = PhiLayout::init(store, &format!("{prefix}.phi_k"), l, dh, rng);
        let phi_v = PhiLayout::init(store, &format!("{prefix}.phi_v"), l, dh, rng);
        let w_gate = store.add(format!("{prefix}.w_gate"), uniform_init(rng, vec![d, 3], d));
        let b_gate = store.add(format!("{prefix}.b_gate"), Tensor::zeros(vec![3]));
        let w_o = store.add(format!("{prefix}.w_o"), uniform_init(rng, vec![d, d], d));
        let b_o = store.add(format!("{prefix}.b_o"), Tensor::zeros(vec![d]));
        NsaLayout {
            w_q,
            w_k,
            w_v,
            phi_k,
            phi_v,
            w_gate,
            b_gate,
            w_o,
            b_o,
        }
    }
}

/// Forward-pass switches used by tests and ablations.
#[derive(Clone, Debug, Default)]
pub struct NsaOptions {
    /// Replaces the learned gates with constants `(cmp, slc, win)`.
    pub gates: Option<[f64; 3]>,
}

/// Graph handles produced by one sparse-attention forward pass.
#[derive(Clone, Debug)]
pub struct NsaVars {
    pub output: Var,
    /// Per-branch outputs before gating, `[B, N, D]`.
    pub branches: [Var; 3],
    /// `[B, N, 3]`.
    pub gates: Var,
    /// Per-branch attention nodes, `[B, H, N, Dh]`.
    pub attention: [Var; 3],
    pub visibility: [Arc<Visibility>; 3],
    /// Head-averaged selection-block scores, `[B, N, N_slc]`.
    pub selection_scores: Tensor,
    /// Chosen selection blocks per `(b, t)`, in rank order.
    pub selected: Vec<Vec<usize>>,
}

/// `[B, N, D] · W -> [B, H, N, Dh]`.
pub fn project_heads(g: &mut Graph, x: Var, w: Var, heads: usize, head_dim: usize) -> Var {
    let p = g.linear(x, w, None);
    let shape = g.value(p).shape().to_vec();
    let r = g.reshape(p, vec![shape[0], shape[1], heads, head_dim]);
    g.permute(r, &[0, 2, 1, 3])
}

/// `[B, H, N, Dh] -> [B, N, H·Dh]`.
pub fn merge_heads(g: &mut Graph, o: Var) -> Var {
    let shape = g.value(o).shape().to_vec();
    let p = g.permute(o, &[0, 2, 1, 3]);
    g.reshape(p, vec![shape[0], shape[2], shape[1] * shape[3]])
}

/// `[B, H, N, Dh] -> [B, H, N_cmp, Dh]`.
pub fn compress(g: &mut Graph, x: Var, cfg: &BoundNsa, phi: &Phi) -> Var {
    let (l, d, n_cmp) = (cfg.compress_block, cfg.compress_stride, cfg.n_cmp);
    let blocks = g.block_gather(x, l, d, n_cmp);
    match phi {
        Phi::Mean => g.mean_axis(blocks, 3),
        Phi::Mlp(p) => {
            let pos = g.param(p.pos);
            let shifted = g.add_broadcast(blocks, pos);
            let s = g.value(shifted).shape().to_vec();
            let flat = g.reshape(shifted, vec![s[0], s[1], s[2], s[3] * s[4]]);
            let (w1, b1, w2, b2) = (g.param(p.w1), g.param(p.b1), g.param(p.w2), g.param(p.b2));
            let h = g.linear(flat, w1, Some(b1));
            let h = g.gelu(h);
            g.linear(h, w2, Some(b2))
        }
    }
}

/// Head-averaged compression probabilities mapped to selection blocks, the
/// top-n choice per query, and the resulting token visibility.
fn select(
    g: &Graph,
    cmp_attn: Var,
    vis_cmp: &Visibility,
    cfg: &BoundNsa,
    bsz: usize,
) -> (Tensor, Vec<Vec<usize>>, Visibility) {
    let probs: &AttentionProbs = g.attention_probs(cmp_attn).expect("compression attention node");
    let (n, heads) = (cfg.n_tokens, cfg.heads());
    let mut scores = Tensor::zeros(vec![bsz, n, cfg.n_slc]);
    let mut selected = Vec::with_capacity(bsz * n);
    let mut sets = Vec::with_capacity(bsz * n);
    let mut p_avg = vec![0.0; cfg.n_cmp];
    for b in 0..bsz {
        for t in 0..n {
            p_avg.iter_mut().for_each(|p| *p = 0.0);
            let keys = vis_cmp.keys(b, t, n);
            for h in 0..heads {
                for (&p, &i) in probs.row(b, h, t).iter().zip(keys) {
                    p_avg[i] += p / heads as f64;
                }
            }
            let p_slc = map_selection_scores(
                &p_avg,
                cfg.compress_block,
                cfg.compress_stride,
                cfg.select_block,
                cfg.n_slc,
            )
            .expect("bound stride divides both block lengths");
            let blocks = top_n(&p_slc, selection_candidates(cfg, t), cfg.num_selected);
            sets.push(selected_tokens(cfg, &blocks, t));
            let o = (b * n + t) * cfg.n_slc;
            scores.data_mut()[o..o + cfg.n_slc].copy_from_slice(&p_slc);
            selected.push(blocks);
        }
    }
    (scores, selected, Visibility::PerRow(sets))
}

impl NsaLayout {
    /// `x: [B, N, D] -> [B, N, D]`.
    pub fn forward(&self, g: &mut Graph, x: Var, cfg: &BoundNsa, opts: &NsaOptions) -> NsaVars {
        let bsz = g.value(x).shape()[0];
        let (heads, dh) = (cfg.heads(), cfg.head_dim());
        let scale = cfg.scale();

        let (wq, wk, wv) = (g.param(self.w_q), g.param(self.w_k), g.param(self.w_v));
        let q = project_heads(g, x, wq, heads, dh);
        let k = project_heads(g, x, wk, heads, dh);
        let v = project_heads(g, x, wv, heads, dh);

        let k_cmp = compress(g, k, cfg, &Phi::Mlp(self.phi_k));
        let v_cmp = compress(g, v, cfg, &Phi::Mlp(self.phi_v));
        let vis_cmp = Arc::new(compression_visibility(cfg));
        let a_cmp = g.attention(q, k_cmp, v_cmp, vis_cmp.clone(), scale);

        let (selection_scores, selected, vis_slc) = select(g, a_cmp, &vis_cmp, cfg, bsz);
        let vis_slc = Arc::new(vis_slc);
        let a_slc = g.attention(q, k, v, vis_slc.clone(), scale);

        let vis_win = Arc::new(window_visibility(cfg));
        let a_win = g.attention(q, k, v, vis_win.clone(), scale);

        let branches = [merge_heads(g, a_cmp), merge_heads(g, a_slc), merge_heads(g, a_win)];

        let gates = match opts.gates {
            Some(c) => {
                let n = cfg.n_tokens;
                g.input(Tensor::from_fn(vec![bsz, n, 3], |i| c[i % 3]))
            }
            None => {
                let (wg, bg) = (g.param(self.w_gate), g.param(self.b_gate));
                let logits = g.linear(x, wg, Some(bg));
                g.sigmoid(logits)
            }
        };
        let mut combined = g.gate_mul(branches[0], gates, 0);
        for (c, &br) in branches.iter().enumerate().skip(1) {
            let gated = g.gate_mul(br, gates, c);
            combined = g.add(combined, gated);
        }
        let (wo, bo) = (g.param(self.w_o), g.param(self.b_o));
        let output = g.linear(combined, wo, Some(bo));
        NsaVars {
            output,
            branches,
            gates,
            attention: [a_cmp, a_slc, a_win],
            visibility: [vis_cmp, vis_slc, vis_win],
            selection_scores,
            selected,
        }
    }
}

/// A self-contained sparse-attention block: bound config, parameters, layout.
#[derive(Clone, Debug)]
pub struct NsaBlock {
    pub cfg: BoundNsa,
    pub params: ParamStore,
    pub layout: NsaLayout,
}

/// Materialized result of [`nsa_forward`].
#[derive(Clone, Debug)]
pub struct AttentionOutput {
    pub output: Tensor,
    pub branch_outputs: [Tensor; 3],
    pub gates: Tensor,
    pub attn_weights: [AttentionProbs; 3],
    pub visibility: [Arc<Visibility>; 3],
    pub selection_scores: Tensor,
    pub selected_blocks: Vec<Vec<usize>>,
}

impl NsaBlock {
    pub fn new<R: Rng>(cfg: BoundNsa, rng: &mut R) -> Self {
        let mut params = ParamStore::new();
        let layout = NsaLayout::init(&mut params, "nsa", &cfg, rng);
        NsaBlock { cfg, params, layout }
    }

    /// Per-head `(q, k, v)`, each `[B, H, N, Dh]`.
    pub fn project_qkv(&self, x: &Tensor) -> (Tensor, Tensor, Tensor) {
        let mut g = Graph::with_params(&self.params);
        let xv = g.input(x.clone());
        let (h, dh) = (self.cfg.heads(), self.cfg.head_dim());
        let mut proj = |w| {
            let wv = g.param(w);
            let p = project_heads(&mut g, xv, wv, h, dh);
            g.value(p).clone()
        };
        (proj(self.layout.w_q), proj(self.layout.w_k), proj(self.layout.w_v))
    }

    /// Compressed keys (`values = false`) or values, `[B, H, N_cmp, Dh]`.
    pub fn compress_tokens(&self, x: &Tensor, values: bool, mean_phi: bool) -> Tensor {
        let phi = match (mean_phi, values) {
            (true, _) => Phi::Mean,
            (false, false) => Phi::Mlp(self.layout.phi_k),
            (false, true) => Phi::Mlp(self.layout.phi_v),
        };
        let mut g = Graph::with_params(&self.params);
        let xv = g.input(x.clone());
        let c = compress(&mut g, xv, &self.cfg, &phi);
        g.value(c).clone()
    }

    pub fn forward(&self, x: &Tensor, opts: &NsaOptions) -> AttentionOutput {
        let mut g = Graph::with_params(&self.params);
        let xv = g.input(x.clone());
        let vars = self.layout.forward(&mut g, xv, &self.cfg, opts);
        let probs = |v: Var| g.attention_probs(v).expect("attention node").clone();
        AttentionOutput {
            output: g.value(vars.output).clone(),
            branch_outputs: vars.branches.map(|b| g.value(b).clone()),
            gates: g.value(vars.gates).clone(),
            attn_weights: vars.attention.map(probs),
            visibility: vars.visibility,
            selection_scores: vars.selection_scores,
            selected_blocks: vars.selected,
        }
    }
}

/// Runs a sparse-attention block with its learned gates.
pub fn nsa_forward(block: &NsaBlock, x: &Tensor) -> AttentionOutput {
    block.forward(x, &NsaOptions::default())
}

/// Dense softmax attention, `[B, H, N, Dh]` in and out.
pub fn full_attention(q: &Tensor, k: &Tensor, v: &Tensor, causal: bool) -> Tensor {
    let n = k.shape()[2];
    let dh = q.shape()[3];
    let mut g = Graph::new();
    let (qv, kv, vv) = (g.input(q.clone()), g.input(k.clone()), g.input(v.clone()));
    let o = g.attention(qv, kv, vv, Arc::new(dense_visibility(n, causal)), 1.0 / (dh as f64).sqrt());
    g.value(o).clone()
}

/// Softmax of `q · k_cmp / √Dh` over compressed keys, `[B, H, N, N_cmp]`.
/// Under causal masking, blocks a query cannot see score zero.
pub fn compression_scores(q: &Tensor, k_cmp: &Tensor, cfg: &BoundNsa) -> Tensor {
    let (bsz, heads, n) = (q.shape()[0], q.shape()[1], q.shape()[2]);
    let n_cmp = k_cmp.shape()[2];
    let vis = Arc::new(compression_visibility(cfg));
    let mut g = Graph::new();
    let (qv, kv) = (g.input(q.clone()), g.input(k_cmp.clone()));
    let a = g.attention(qv, kv, kv, vis.clone(), cfg.scale());
    let probs = g.attention_probs(a).expect("attention node");
    let mut out = Tensor::zeros(vec![bsz, heads, n, n_cmp]);
    for b in 0..bsz {
        for h in 0..heads {
            for t in 0..n {
                for (&p, &i) in probs.row(b, h, t).iter().zip(vis.keys(b, t, n)) {
                    out.set(&[b, h, t, i], p);
                }
            }
        }
    }
    out
}

/// Top-n selection blocks per `(b, t)` from `[B, H, N, N_slc]` scores,
/// averaged over heads first.
pub fn select_blocks(p_slc: &Tensor, cfg: &BoundNsa) -> Vec<Vec<usize>> {
    let (bsz, heads, n, n_slc) = (p_slc.shape()[0], p_slc.shape()[1], p_slc.shape()[2], p_slc.shape()[3]);
    let mut out = Vec::with_capacity(bsz * n);
    for b in 0..bsz {
        for t in 0..n {
            let avg: Vec<f64> = (0..n_slc)
                .map(|j| (0..heads).map(|h| p_slc.at(&[b, h, t, j])).sum::<f64>() / heads as f64)
                .collect();
            out.push(top_n(&avg, selection_candidates(cfg, t), cfg.num_selected));
        }
    }
    out
}
