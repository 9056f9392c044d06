use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Sparse attention hyperparameters as configured by the user.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NsaConfig {
    pub dim: usize,
    pub heads: usize,
    pub head_dim: usize,
    /// Sliding-window width `w`.
    pub window: usize,
    /// Compression block length `l`.
    pub compress_block: usize,
    /// Compression stride `d`.
    pub compress_stride: usize,
    /// Selection block length `l'`.
    pub select_block: usize,
    /// Number of selected blocks `n`.
    pub num_selected: usize,
    #[serde(default)]
    pub causal: bool,
}

impl Default for NsaConfig {
    fn default() -> Self {
        NsaConfig {
            dim: 16,
            heads: 2,
            head_dim: 8,
            window: 4,
            compress_block: 4,
            compress_stride: 4,
            select_block: 4,
            num_selected: 2,
            causal: false,
        }
    }
}

impl NsaConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.heads == 0 || self.head_dim == 0 {
            return fail("nsa.heads and nsa.head_dim must be at least 1".into());
        }
        if self.dim != self.heads * self.head_dim {
            return fail(format!(
                "nsa.dim ({}) must equal nsa.heads * nsa.head_dim ({} * {})",
                self.dim, self.heads, self.head_dim
            ));
        }
        if self.window == 0 {
            return fail("nsa.window must be at least 1".into());
        }
        if self.compress_stride == 0 || self.compress_stride > self.compress_block {
            return fail(format!(
                "nsa.compress_stride ({}) must lie in [1, compress_block = {}]",
                self.compress_stride, self.compress_block
            ));
        }
        if self.select_block < 2 || self.select_block > self.compress_block {
            return fail(format!(
                "nsa.select_block ({}) must lie in [2, compress_block = {}]",
                self.select_block, self.compress_block
            ));
        }
        if self.num_selected == 0 {
            return fail("nsa.num_selected must be at least 1".into());
        }
        Ok(())
    }

    /// Clamps block sizes to `n_tokens` and derives block counts.
    ///
    /// Blocks longer than the token axis collapse to one block spanning all
    /// tokens; the stride is reduced to `gcd(d, l, l')` so that both block
    /// lengths stay multiples of it.
    pub fn bind(&self, n_tokens: usize) -> Result<BoundNsa> {
        self.validate()?;
        if n_tokens == 0 {
            return Err(Error::Config("cannot bind attention to zero tokens".into()));
        }
        let l = self.compress_block.min(n_tokens);
        let lp = self.select_block.min(n_tokens);
        let d = gcd(self.compress_stride, gcd(l, lp));
        if d != self.compress_stride {
            log::info!(
                "compression stride {} reduced to {d} for block lengths l={l}, l'={lp}",
                self.compress_stride
            );
        }
        let window = self.window.min(n_tokens);
        let n_slc = n_tokens.div_ceil(lp);
        let num_selected = if self.num_selected > n_slc {
            log::warn!(
                "num_selected {} exceeds the {n_slc} selection blocks; clamping",
                self.num_selected
            );
            n_slc
        } else {
            self.num_selected
        };
        Ok(BoundNsa {
            config: self.clone(),
            n_tokens,
            window,
            compress_block: l,
            compress_stride: d,
            select_block: lp,
            num_selected,
            n_cmp: (n_tokens - l) / d + 1,
            n_slc,
        })
    }
}

/// A configuration resolved against a concrete token count.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoundNsa {
    pub config: NsaConfig,
    pub n_tokens: usize,
    pub window: usize,
    pub compress_block: usize,
    pub compress_stride: usize,
    pub select_block: usize,
    pub num_selected: usize,
    pub n_cmp: usize,
    pub n_slc: usize,
}

impl BoundNsa {
    pub fn dim(&self) -> usize {
        self.config.dim
    }

    pub fn heads(&self) -> usize {
        self.config.heads
    }

    pub fn head_dim(&self) -> usize {
        self.config.head_dim
    }

    pub fn causal(&self) -> bool {
        self.config.causal
    }

    pub fn scale(&self) -> f64 {
        1.0 / (self.head_dim() as f64).sqrt()
    }
}

pub(crate) fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}
