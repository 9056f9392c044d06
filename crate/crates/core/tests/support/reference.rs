//! Scalar reference interpreter for the full model. Every arithmetic
//! operation it executes bumps a counter for the component it belongs to,
//! so its totals are measured rather than derived from a formula. The
//! selection branch runs as a padded kernel: each chosen block contributes
//! `l'` key slots, and slots past the last visible token hold zero vectors
//! with a masked score.

use std::collections::BTreeMap;

use tabnsa::graph::{gelu, sigmoid};
use tabnsa::model::{Fusion, Model};
use tabnsa::params::ParamStore;
use tabnsa::Tensor;

const EPS: f64 = 1e-5;

pub struct RefOutput {
    /// `[B, C]`, row-major.
    pub logits: Vec<f64>,
    pub flops: BTreeMap<String, u64>,
}

impl RefOutput {
    pub fn total(&self) -> u64 {
        self.flops.values().sum()
    }

    pub fn attention_computation(&self) -> u64 {
        self.flops.get("selection_attention").copied().unwrap_or(0) + self.flops.get("window_attention").copied().unwrap_or(0)
    }
}

struct Ops<'a> {
    params: &'a ParamStore,
    flops: BTreeMap<String, u64>,
    comp: &'static str,
}

impl<'a> Ops<'a> {
    fn p(&self, path: &str) -> &'a Tensor {
        let ps: &'a ParamStore = self.params;
        ps.get(ps.find(path).unwrap_or_else(|| panic!("missing parameter {path}")))
    }

    fn tick(&mut self, n: u64) {
        *self.flops.entry(self.comp.to_string()).or_insert(0) += n;
    }

    /// Rows of width `k` times `w[k, m]`; one MAC is two FLOPs, bias free.
    fn linear(&mut self, x: &[f64], k: usize, w: &Tensor, b: Option<&Tensor>) -> Vec<f64> {
        assert_eq!(w.shape()[0], k);
        let m = w.shape()[1];
        let rows = x.len() / k;
        let mut out = vec![0.0; rows * m];
        for r in 0..rows {
            for j in 0..m {
                let mut acc = 0.0;
                for i in 0..k {
                    acc += x[r * k + i] * w.data()[i * m + j];
                    self.tick(2);
                }
                out[r * m + j] = acc + b.map_or(0.0, |b| b.data()[j]);
            }
        }
        out
    }

    fn map(&mut self, x: &mut [f64], f: fn(f64) -> f64) {
        for v in x.iter_mut() {
            *v = f(*v);
            self.tick(1);
        }
    }

    fn layer_norm(&mut self, x: &[f64], k: usize, gamma: &Tensor, beta: &Tensor) -> Vec<f64> {
        let mut out = vec![0.0; x.len()];
        for (row, o) in x.chunks(k).zip(out.chunks_mut(k)) {
            let mean = row.iter().sum::<f64>() / k as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / k as f64;
            let rs = 1.0 / (var + EPS).sqrt();
            for i in 0..k {
                o[i] = (row[i] - mean) * rs * gamma.data()[i] + beta.data()[i];
                self.tick(5);
            }
        }
        out
    }

    /// One query over key slots; `None` is a padded slot. Returns the
    /// output and the probability of every slot.
    fn attend(&mut self, q: &[f64], slots: &[Option<(&[f64], &[f64])>], scale: f64) -> (Vec<f64>, Vec<f64>) {
        let dh = q.len();
        let zero = vec![0.0; dh];
        let mut logits = Vec::with_capacity(slots.len());
        for s in slots {
            let kk = s.map_or(zero.as_slice(), |(k, _)| k);
            let mut dot = 0.0;
            for e in 0..dh {
                dot += q[e] * kk[e];
                self.tick(2);
            }
            logits.push(if s.is_some() { dot * scale } else { f64::NEG_INFINITY });
        }
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        let probs: Vec<f64> = exps.iter().map(|e| e / z).collect();
        self.tick(5 * slots.len() as u64);
        let mut out = vec![0.0; dh];
        for (s, &p) in slots.iter().zip(&probs) {
            let vv = s.map_or(zero.as_slice(), |(_, v)| v);
            for e in 0..dh {
                out[e] += p * vv[e];
                self.tick(2);
            }
        }
        (out, probs)
    }
}

fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

/// Top `n` of `candidates` by score, ties to the lower index, by repeated
/// argmax.
fn pick_top(scores: &[f64], candidates: usize, n: usize) -> Vec<usize> {
    let mut left: Vec<usize> = (0..candidates).collect();
    let mut out = Vec::new();
    while out.len() < n && !left.is_empty() {
        let mut best = 0;
        for i in 1..left.len() {
            if scores[left[i]] > scores[left[best]] {
                best = i;
            }
        }
        out.push(left.remove(best));
    }
    out
}

/// Runs `model` on `x: [B, N]` row by row.
pub fn reference_forward(model: &Model, x: &Tensor) -> RefOutput {
    let cfg = &model.config;
    let b = &model.bound;
    let (n, d) = (cfg.num_tokens, cfg.dim());
    let (heads, dh) = (b.heads(), b.head_dim());
    let (l, stride, ls) = (b.compress_block, b.compress_stride, b.select_block);
    let (n_cmp, n_slc, win, top) = (b.n_cmp, b.n_slc, b.window, b.num_selected);
    let causal = b.causal();
    let scale = 1.0 / (dh as f64).sqrt();
    let c_out = cfg.output_dim();
    let mut ops = Ops { params: &model.params, flops: BTreeMap::new(), comp: "" };
    let mut logits = Vec::new();

    for row in x.data().chunks(n) {
        ops.comp = "embedding";
        let (ew, eb) = (ops.p("embed.w"), ops.p("embed.b"));
        let mut h = ops.linear(row, 1, ew, Some(eb));
        if cfg.feature_id_embedding {
            let f = ops.p("embed.feature_id");
            for i in 0..n * d {
                h[i] += f.data()[i];
                ops.tick(1);
            }
        }

        for blk in 0..cfg.num_blocks {
            let pre = format!("block{blk}.nsa");
            let path = |s: &str| format!("{pre}.{s}");
            ops.comp = "qkv_projection";
            let q = ops.linear(&h, d, ops.p(&path("w_q")), None);
            let k = ops.linear(&h, d, ops.p(&path("w_k")), None);
            let v = ops.linear(&h, d, ops.p(&path("w_v")), None);
            let head = |m: &[f64], t: usize, hh: usize| -> Vec<f64> { m[t * d + hh * dh..t * d + (hh + 1) * dh].to_vec() };

            // compressed keys and values, [head][block][Dh]
            ops.comp = "compression_mlp";
            let mut compress = |src: &[f64], which: &str| -> Vec<Vec<Vec<f64>>> {
                let pos = ops.p(&path(&format!("{which}.pos")));
                let (w1, b1) = (ops.p(&path(&format!("{which}.w1"))), ops.p(&path(&format!("{which}.b1"))));
                let (w2, b2) = (ops.p(&path(&format!("{which}.w2"))), ops.p(&path(&format!("{which}.b2"))));
                let mut out = vec![Vec::new(); heads];
                for (hh, o) in out.iter_mut().enumerate() {
                    for i in 0..n_cmp {
                        let mut flat = Vec::with_capacity(l * dh);
                        for s in 0..l {
                            let tok = head(src, i * stride + s, hh);
                            for e in 0..dh {
                                flat.push(tok[e] + pos.data()[s * dh + e]);
                                ops.tick(1);
                            }
                        }
                        let mut hid = ops.linear(&flat, l * dh, w1, Some(b1));
                        ops.map(&mut hid, gelu);
                        o.push(ops.linear(&hid, l * dh, w2, Some(b2)));
                    }
                }
                out
            };
            let k_cmp = compress(&k, "phi_k");
            let v_cmp = compress(&v, "phi_v");

            let mut branch = [vec![0.0; n * d], vec![0.0; n * d], vec![0.0; n * d]];
            for t in 0..n {
                // compression branch
                ops.comp = "compression_attention";
                let visible: Vec<usize> = (0..n_cmp).filter(|&i| !causal || i * stride + l - 1 <= t).collect();
                let mut p_avg = vec![0.0; n_cmp];
                for hh in 0..heads {
                    let slots: Vec<_> = visible.iter().map(|&i| Some((k_cmp[hh][i].as_slice(), v_cmp[hh][i].as_slice()))).collect();
                    let (o, probs) = ops.attend(&head(&q, t, hh), &slots, scale);
                    branch[0][t * d + hh * dh..t * d + (hh + 1) * dh].copy_from_slice(&o);
                    for (&i, p) in visible.iter().zip(probs) {
                        p_avg[i] += p / heads as f64;
                    }
                }

                // block scores and choice: uncounted bookkeeping
                let (a, c) = (ls / stride, l / stride);
                let mut p_slc = vec![0.0; n_slc];
                for (j, s) in p_slc.iter_mut().enumerate() {
                    for (idx, &p) in p_avg.iter().enumerate() {
                        let top_idx = a * (j + 1) - 1;
                        if idx > top_idx {
                            continue;
                        }
                        let gap = top_idx - idx;
                        let mult = (0..a).filter(|&m| m <= gap && gap - m < c).count();
                        *s += mult as f64 * p;
                    }
                }
                let cand = if causal { (t / ls + 1).min(n_slc) } else { n_slc };
                let mut chosen = pick_top(&p_slc, cand, top);
                chosen.sort_unstable();
                let limit = if causal { t + 1 } else { n };

                ops.comp = "selection_attention";
                for hh in 0..heads {
                    let (ks, vs): (Vec<_>, Vec<_>) = (0..n).map(|u| (head(&k, u, hh), head(&v, u, hh))).unzip();
                    let slots: Vec<_> = chosen
                        .iter()
                        .flat_map(|&j| (j * ls..(j + 1) * ls).map(|u| (u < limit).then(|| (ks[u].as_slice(), vs[u].as_slice()))))
                        .collect();
                    let (o, _) = ops.attend(&head(&q, t, hh), &slots, scale);
                    branch[1][t * d + hh * dh..t * d + (hh + 1) * dh].copy_from_slice(&o);
                }

                ops.comp = "window_attention";
                let range = if causal {
                    t.saturating_sub(win - 1)..t + 1
                } else {
                    let start = (t as isize - (win as isize - 1) / 2).clamp(0, (n - win) as isize) as usize;
                    start..start + win
                };
                for hh in 0..heads {
                    let (ks, vs): (Vec<_>, Vec<_>) = range.clone().map(|u| (head(&k, u, hh), head(&v, u, hh))).unzip();
                    let slots: Vec<_> = ks.iter().zip(&vs).map(|(a, b)| Some((a.as_slice(), b.as_slice()))).collect();
                    let (o, _) = ops.attend(&head(&q, t, hh), &slots, scale);
                    branch[2][t * d + hh * dh..t * d + (hh + 1) * dh].copy_from_slice(&o);
                }
            }

            ops.comp = "gating";
            let mut gates = ops.linear(&h, d, ops.p(&path("w_gate")), Some(ops.p(&path("b_gate"))));
            ops.map(&mut gates, sigmoid);
            let mut combined = vec![0.0; n * d];
            for t in 0..n {
                for e in 0..d {
                    let i = t * d + e;
                    combined[i] = gates[t * 3] * branch[0][i] + gates[t * 3 + 1] * branch[1][i] + gates[t * 3 + 2] * branch[2][i];
                    ops.tick(5);
                }
            }
            ops.comp = "output_projection";
            let y = ops.linear(&combined, d, ops.p(&path("w_o")), Some(ops.p(&path("b_o"))));

            let mixer_in = if cfg.fusion == Fusion::Sequential { &y } else { &h };
            let z = mixer(&mut ops, &format!("block{blk}.mixer"), mixer_in, n, d);

            ops.comp = "fusion";
            let fp = |s: &str| format!("block{blk}.fuse.{s}");
            h = match cfg.fusion {
                Fusion::Sum | Fusion::Sequential => {
                    let mut s = vec![0.0; n * d];
                    for i in 0..n * d {
                        s[i] = y[i] + z[i];
                        ops.tick(1);
                    }
                    s
                }
                Fusion::Mlp => {
                    let mut s = vec![0.0; n * d];
                    for i in 0..n * d {
                        s[i] = y[i] + z[i];
                        ops.tick(1);
                    }
                    let mut m = ops.linear(&s, d, ops.p(&fp("w1")), Some(ops.p(&fp("b1"))));
                    ops.map(&mut m, gelu);
                    ops.linear(&m, d, ops.p(&fp("w2")), Some(ops.p(&fp("b2"))))
                }
                Fusion::Concat => {
                    let mut cat = Vec::with_capacity(2 * n * d);
                    for t in 0..n {
                        cat.extend_from_slice(&y[t * d..(t + 1) * d]);
                        cat.extend_from_slice(&z[t * d..(t + 1) * d]);
                    }
                    ops.linear(&cat, 2 * d, ops.p(&fp("w")), Some(ops.p(&fp("b"))))
                }
            };
        }

        ops.comp = "pooling";
        let mut pooled = vec![0.0; d];
        for e in 0..d {
            let mut acc = h[e];
            for t in 1..n {
                acc += h[t * d + e];
                ops.tick(1);
            }
            pooled[e] = acc / n as f64;
            ops.tick(1);
        }

        ops.comp = "head";
        let mut hid = ops.linear(&pooled, d, ops.p("head.w1"), Some(ops.p("head.b1")));
        ops.map(&mut hid, gelu);
        let out = ops.linear(&hid, cfg.hidden_head, ops.p("head.w2"), Some(ops.p("head.b2")));
        assert_eq!(out.len(), c_out);
        logits.extend(out);
    }
    RefOutput { logits, flops: ops.flops }
}

fn mixer(ops: &mut Ops, pre: &str, x: &[f64], n: usize, d: usize) -> Vec<f64> {
    ops.comp = "tabmixer";
    let p = |s: &str| format!("{pre}.{s}");
    // token mixing over the transposed [D, N] view
    let mut xt = vec![0.0; n * d];
    for t in 0..n {
        for e in 0..d {
            xt[e * n + t] = x[t * d + e];
        }
    }
    let n1 = ops.layer_norm(&xt, n, ops.p(&p("ln1_gamma")), ops.p(&p("ln1_beta")));
    let mut a_t = ops.linear(&n1, n, ops.p(&p("w1")), Some(ops.p(&p("b1"))));
    ops.map(&mut a_t, gelu);
    let n2 = ops.layer_norm(x, d, ops.p(&p("ln2_gamma")), ops.p(&p("ln2_beta")));
    let c = ops.linear(&n2, d, ops.p(&p("w2")), Some(ops.p(&p("b2"))));
    let mut out = vec![0.0; n * d];
    for t in 0..n {
        for e in 0..d {
            let mut prod = a_t[e * n + t] * c[t * d + e];
            ops.tick(1);
            prod = silu(prod);
            ops.tick(1);
            out[t * d + e] = prod + x[t * d + e];
            ops.tick(1);
        }
    }
    out
}
