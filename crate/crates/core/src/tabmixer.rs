//! Per-sample mixer block over the `N × D` token matrix:
//! `Z = SiLU(GELU(MLP₁(Xᵀ))ᵀ ⊙ MLP₂(X)) + X` with `MLPᵢ(X) = Wᵢ·LN(X) + bᵢ`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::graph::{Graph, Var};
use crate::params::{uniform_init, ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TabMixerLayout {
    /// Token-mixing path, acting along the `N` axis.
    pub ln1_gamma: ParamId,
    pub ln1_beta: ParamId,
    pub w1: ParamId,
    pub b1: ParamId,
    /// Channel-mixing path, acting along the `D` axis.
    pub ln2_gamma: ParamId,
    pub ln2_beta: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl TabMixerLayout {
    pub fn init<R: Rng>(store: &mut ParamStore, prefix: &str, n_tokens: usize, dim: usize, rng: &mut R) -> Self {
        let p = |name: &str| format!("{prefix}.{name}");
        TabMixerLayout {
            ln1_gamma: store.add(p("ln1_gamma"), Tensor::filled(vec![n_tokens], 1.0)),
            ln1_beta: store.add(p("ln1_beta"), Tensor::zeros(vec![n_tokens])),
            w1: store.add(p("w1"), uniform_init(rng, vec![n_tokens, n_tokens], n_tokens)),
            b1: store.add(p("b1"), Tensor::zeros(vec![n_tokens])),
            ln2_gamma: store.add(p("ln2_gamma"), Tensor::filled(vec![dim], 1.0)),
            ln2_beta: store.add(p("ln2_beta"), Tensor::zeros(vec![dim])),
            w2: store.add(p("w2"), uniform_init(rng, vec![dim, dim], dim)),
            b2: store.add(p("b2"), Tensor::zeros(vec![dim])),
        }
    }

    /// `x: [B, N, D] -> [B, N, D]`.
    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let xt = g.permute(x, &[0, 2, 1]);
        let (g1, be1) = (g.param(self.ln1_gamma), g.param(self.ln1_beta));
        let n1 = g.layer_norm(xt, g1, be1);
        let (w1, b1) = (g.param(self.w1), g.param(self.b1));
        let m1 = g.linear(n1, w1, Some(b1));
        let a = g.gelu(m1);
        let a = g.permute(a, &[0, 2, 1]);

        let (g2, be2) = (g.param(self.ln2_gamma), g.param(self.ln2_beta));
        let n2 = g.layer_norm(x, g2, be2);
        let (w2, b2) = (g.param(self.w2), g.param(self.b2));
        let c = g.linear(n2, w2, Some(b2));

        let prod = g.mul(a, c);
        let s = g.silu(prod);
        g.add(s, x)
    }

    /// Sets both MLPs' weights and biases to zero, making the block the identity.
    pub fn zero_mlps(&self, store: &mut ParamStore) {
        for id in [self.w1, self.b1, self.w2, self.b2] {
            store.get_mut(id).data_mut().fill(0.0);
        }
    }
}

/// A standalone mixer block with its own parameters.
#[derive(Clone, Debug)]
pub struct TabMixer {
    pub params: ParamStore,
    pub layout: TabMixerLayout,
}

impl TabMixer {
    pub fn new<R: Rng>(n_tokens: usize, dim: usize, rng: &mut R) -> Self {
        let mut params = ParamStore::new();
        let layout = TabMixerLayout::init(&mut params, "mixer", n_tokens, dim, rng);
        TabMixer { params, layout }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        let mut g = Graph::with_params(&self.params);
        let xv = g.input(x.clone());
        let z = self.layout.forward(&mut g, xv);
        g.value(z).clone()
    }
}

/// Normalizes over the last axis (ε = 1e-5) and applies `scale`/`shift`.
pub fn layer_norm(x: &Tensor, scale: &Tensor, shift: &Tensor) -> Tensor {
    let mut g = Graph::new();
    let (xv, s, b) = (g.input(x.clone()), g.input(scale.clone()), g.input(shift.clone()));
    let y = g.layer_norm(xv, s, b);
    g.value(y).clone()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{gelu, sigmoid, LAYER_NORM_EPS};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn layer_norm_closed_forms() {
        let y = layer_norm(
            &Tensor::new(vec![2], vec![1.0, -1.0]),
            &Tensor::filled(vec![2], 1.0),
            &Tensor::zeros(vec![2]),
        );
        let want = 1.0 / (1.0 + LAYER_NORM_EPS).sqrt();
        assert!((y.data()[0] - want).abs() < 1e-15);
        assert!((y.data()[1] + want).abs() < 1e-15);
        let c = layer_norm(
            &Tensor::filled(vec![3], 4.0),
            &Tensor::filled(vec![3], 2.0),
            &Tensor::filled(vec![3], 0.5),
        );
        assert_eq!(c.data(), &[0.5; 3]);
    }

    #[test]
    fn zeroed_mlps_are_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut m = TabMixer::new(5, 4, &mut rng);
        m.layout.zero_mlps(&mut m.params);
        let x = Tensor::from_fn(vec![2, 5, 4], |i| (i as f64 * 0.77).sin() * 3.0);
        assert_eq!(m.forward(&x), x);
    }

    fn ln_rows(rows: &[Vec<f64>], g: &[f64], b: &[f64]) -> Vec<Vec<f64>> {
        rows.iter()
            .map(|r| {
                let k = r.len() as f64;
                let mean = r.iter().sum::<f64>() / k;
                let var = r.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / k;
                r.iter()
                    .enumerate()
                    .map(|(i, v)| (v - mean) / (var + LAYER_NORM_EPS).sqrt() * g[i] + b[i])
                    .collect()
            })
            .collect()
    }

    #[test]
    fn matches_term_by_term_evaluation() {
        let (n, d) = (3, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut m = TabMixer::new(n, d, &mut rng);
        for id in m.params.ids().collect::<Vec<_>>() {
            for v in m.params.get_mut(id).data_mut() {
                *v = rng.random_range(-1.0..1.0);
            }
        }
        let x = Tensor::from_fn(vec![1, n, d], |_| rng.random_range(-2.0..2.0));
        let z = m.forward(&x);
        let p = |id| m.params.get(id).data().to_vec();
        let l = &m.layout;
        let xm: Vec<Vec<f64>> = (0..n).map(|i| (0..d).map(|j| x.at(&[0, i, j])).collect()).collect();
        let xt: Vec<Vec<f64>> = (0..d).map(|j| (0..n).map(|i| xm[i][j]).collect()).collect();
        let n1 = ln_rows(&xt, &p(l.ln1_gamma), &p(l.ln1_beta));
        let (w1, b1) = (p(l.w1), p(l.b1));
        let n2 = ln_rows(&xm, &p(l.ln2_gamma), &p(l.ln2_beta));
        let (w2, b2) = (p(l.w2), p(l.b2));
        for i in 0..n {
            for j in 0..d {
                let m1 = b1[i] + (0..n).map(|k| n1[j][k] * w1[k * n + i]).sum::<f64>();
                let m2 = b2[j] + (0..d).map(|k| n2[i][k] * w2[k * d + j]).sum::<f64>();
                let u = gelu(m1) * m2;
                let want = u * sigmoid(u) + xm[i][j];
                assert!((z.at(&[0, i, j]) - want).abs() < 1e-12);
            }
        }
        // nonlinear: Z(2X) != 2 Z(X)
        let z2 = m.forward(&x.scale(2.0));
        assert!(z2.max_abs_diff(&z.scale(2.0)) > 1e-3);
    }
}
