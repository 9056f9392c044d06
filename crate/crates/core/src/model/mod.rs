//! The full network: shared scalar embedding, `L` blocks of sparse attention
//! in parallel with a mixer, fusion, mean pooling and a two-layer head.

pub mod checkpoint;
pub mod flops;

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Task;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nsa::{BoundNsa, NsaConfig, NsaLayout, NsaOptions, NsaVars};
use crate::params::{uniform_init, ParamId, ParamStore};
use crate::tabmixer::TabMixerLayout;
use crate::tensor::Tensor;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_VERSION};
pub use flops::{count_flops, count_params, FlopReport, ParamCount};

/// How the attention and mixer outputs of a block are combined.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Fusion {
    /// `y + z`.
    #[default]
    #[serde(rename = "o")]
    Sum,
    /// `MLP(y + z)`, one GELU hidden layer of width `D`.
    #[serde(rename = "m")]
    Mlp,
    /// `Linear([y, z])`, `2D -> D`.
    #[serde(rename = "c")]
    Concat,
    /// The mixer consumes `y`; output `y + Mixer(y)`.
    #[serde(rename = "r")]
    Sequential,
}

impl Fusion {
    pub const ALL: [Fusion; 4] = [Fusion::Sum, Fusion::Mlp, Fusion::Concat, Fusion::Sequential];

    pub fn code(self) -> &'static str {
        match self {
            Fusion::Sum => "o",
            Fusion::Mlp => "m",
            Fusion::Concat => "c",
            Fusion::Sequential => "r",
        }
    }
}

impl fmt::Display for Fusion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

impl FromStr for Fusion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "o" => Ok(Fusion::Sum),
            "m" => Ok(Fusion::Mlp),
            "c" => Ok(Fusion::Concat),
            "r" => Ok(Fusion::Sequential),
            other => Err(Error::Config(format!("unknown fusion variant '{other}' (expected o, m, c or r)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub nsa: NsaConfig,
    pub num_tokens: usize,
    pub task: Task,
    pub hidden_head: usize,
    pub num_blocks: usize,
    pub fusion: Fusion,
    pub feature_id_embedding: bool,
}

impl ModelConfig {
    /// Defaults for a dataset with `num_tokens` features.
    pub fn new(num_tokens: usize, task: Task) -> Self {
        ModelConfig {
            nsa: NsaConfig::default(),
            num_tokens,
            task,
            hidden_head: 32,
            num_blocks: 1,
            fusion: Fusion::Sum,
            feature_id_embedding: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.nsa.validate()?;
        if self.num_tokens == 0 {
            return Err(Error::Config("model.num_tokens must be at least 1".into()));
        }
        if self.num_blocks == 0 {
            return Err(Error::Config("model.num_blocks must be at least 1".into()));
        }
        if self.hidden_head == 0 {
            return Err(Error::Config("model.hidden_head must be at least 1".into()));
        }
        if let Task::Classification { num_classes } = self.task {
            if num_classes < 2 {
                return Err(Error::Config(format!(
                    "classification needs at least 2 classes, got {num_classes}"
                )));
            }
        }
        Ok(())
    }

    pub fn output_dim(&self) -> usize {
        match self.task {
            Task::Classification { num_classes } => num_classes,
            Task::Regression => 1,
        }
    }

    pub fn dim(&self) -> usize {
        self.nsa.dim
    }

    pub fn bind(&self) -> Result<BoundNsa> {
        self.validate()?;
        self.nsa.bind(self.num_tokens)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum FusionLayout {
    None,
    Mlp { w1: ParamId, b1: ParamId, w2: ParamId, b2: ParamId },
    Concat { w: ParamId, b: ParamId },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockLayout {
    pub nsa: NsaLayout,
    pub mixer: TabMixerLayout,
    pub fusion: FusionLayout,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelLayout {
    pub embed_w: ParamId,
    pub embed_b: ParamId,
    pub feature_id: Option<ParamId>,
    pub blocks: Vec<BlockLayout>,
    pub head_w1: ParamId,
    pub head_b1: ParamId,
    pub head_w2: ParamId,
    pub head_b2: ParamId,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub bound: BoundNsa,
    pub params: ParamStore,
    pub layout: ModelLayout,
}

/// Forward-pass switches used by tests and ablations.
#[derive(Clone, Debug, Default)]
pub struct ModelOptions {
    pub nsa: NsaOptions,
}

/// Graph handles from one model forward pass.
#[derive(Clone, Debug)]
pub struct ModelVars {
    /// `[B, C]` (or `[B, 1]` for regression).
    pub logits: Var,
    /// Token embeddings, `[B, N, D]`.
    pub embedded: Var,
    /// Output of each block, `[B, N, D]`.
    pub block_outputs: Vec<Var>,
    pub nsa: Vec<NsaVars>,
    /// `[B, D]`.
    pub pooled: Var,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Model> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Model::init(config, &mut rng)
    }

    pub fn init<R: Rng>(config: ModelConfig, rng: &mut R) -> Result<Model> {
        let bound = config.bind()?;
        let (n, d) = (config.num_tokens, config.dim());
        let mut store = ParamStore::new();
        let embed_w = store.add("embed.w", uniform_init(rng, vec![1, d], 1));
        let embed_b = store.add("embed.b", Tensor::zeros(vec![d]));
        let feature_id = config
            .feature_id_embedding
            .then(|| store.add("embed.feature_id", uniform_init(rng, vec![n, d], 1)));
        let mut blocks = Vec::with_capacity(config.num_blocks);
        for i in 0..config.num_blocks {
            let prefix = format!("block{i}");
            let nsa = NsaLayout::init(&mut store, &format!("{prefix}.nsa"), &bound, rng);
            let mixer = TabMixerLayout::init(&mut store, &format!("{prefix}.mixer"), n, d, rng);
            let fusion = match config.fusion {
                Fusion::Sum | Fusion::Sequential => FusionLayout::None,
                Fusion::Mlp => FusionLayout::Mlp {
                    w1: store.add(format!("{prefix}.fuse.w1"), uniform_init(rng, vec![d, d], d)),
                    b1: store.add(format!("{prefix}.fuse.b1"), Tensor::zeros(vec![d])),
                    w2: store.add(format!("{prefix}.fuse.w2"), uniform_init(rng, vec![d, d], d)),
                    b2: store.add(format!("{prefix}.fuse.b2"), Tensor::zeros(vec![d])),
                },
                Fusion::Concat => FusionLayout::Concat {
                    w: store.add(format!("{prefix}.fuse.w"), uniform_init(rng, vec![2 * d, d], 2 * d)),
                    b: store.add(format!("{prefix}.fuse.b"), Tensor::zeros(vec![d])),
                },
            };
            blocks.push(BlockLayout { nsa, mixer, fusion });
        }
        let (hid, c) = (config.hidden_head, config.output_dim());
        let head_w1 = store.add("head.w1", uniform_init(rng, vec![d, hid], d));
        let head_b1 = store.add("head.b1", Tensor::zeros(vec![hid]));
        let head_w2 = store.add("head.w2", uniform_init(rng, vec![hid, c], hid));
        let head_b2 = store.add("head.b2", Tensor::zeros(vec![c]));
        Ok(Model {
            config,
            bound,
            params: store,
            layout: ModelLayout {
                embed_w,
                embed_b,
                feature_id,
                blocks,
                head_w1,
                head_b1,
                head_w2,
                head_b2,
            },
        })
    }

    pub fn num_params(&self) -> usize {
        self.params.num_scalars()
    }

    /// Builds the forward pass for `x: [B, N]` on `g`.
    pub fn forward_graph(&self, g: &mut Graph, x: Var, opts: &ModelOptions) -> ModelVars {
        let l = &self.layout;
        let embedded = embed(g, x, l.embed_w, l.embed_b, l.feature_id);
        let mut h = embedded;
        let mut block_outputs = Vec::with_capacity(l.blocks.len());
        let mut nsa = Vec::with_capacity(l.blocks.len());
        for block in &l.blocks {
            let att = block.nsa.forward(g, h, &self.bound, &opts.nsa);
            let y = att.output;
            h = match self.config.fusion {
                Fusion::Sequential => {
                    let z = block.mixer.forward(g, y);
                    g.add(y, z)
                }
                _ => {
                    let z = block.mixer.forward(g, h);
                    fuse(g, y, z, &block.fusion)
                }
            };
            block_outputs.push(h);
            nsa.push(att);
        }
        let pooled = g.mean_axis(h, 1);
        let logits = head(g, pooled, l);
        ModelVars {
            logits,
            embedded,
            block_outputs,
            nsa,
            pooled,
        }
    }

    /// Logits for `x: [B, N]`, evaluated in chunks without keeping the graph.
    pub fn predict(&self, x: &Tensor) -> Tensor {
        self.predict_with(x, &ModelOptions::default())
    }

    pub fn predict_with(&self, x: &Tensor, opts: &ModelOptions) -> Tensor {
        const CHUNK: usize = 256;
        let b = x.shape()[0];
        let c = self.config.output_dim();
        let mut out = Vec::with_capacity(b * c);
        let mut start = 0;
        loop {
            let end = (start + CHUNK).min(b);
            let rows: Vec<usize> = (start..end).collect();
            let mut g = Graph::with_params(&self.params);
            let xv = g.input(x.select_rows(&rows));
            let vars = self.forward_graph(&mut g, xv, opts);
            out.extend_from_slice(g.value(vars.logits).data());
            if end >= b {
                break;
            }
            start = end;
        }
        Tensor::new(vec![b, c], out)
    }
}

/// `token[b, i] = x[b, i] · W_e + b_e (+ feature_id[i])`.
pub fn embed(g: &mut Graph, x: Var, w: ParamId, b: ParamId, feature_id: Option<ParamId>) -> Var {
    let shape = g.value(x).shape().to_vec();
    let x3 = g.reshape(x, vec![shape[0], shape[1], 1]);
    let (wv, bv) = (g.param(w), g.param(b));
    let t = g.linear(x3, wv, Some(bv));
    match feature_id {
        Some(id) => {
            let f = g.param(id);
            g.add_broadcast(t, f)
        }
        None => t,
    }
}

/// Combines attention output `y` with mixer output `z`. The sequential
/// variant is handled by the caller since its mixer consumes `y`.
pub fn fuse(g: &mut Graph, y: Var, z: Var, layout: &FusionLayout) -> Var {
    match *layout {
        FusionLayout::None => g.add(y, z),
        FusionLayout::Mlp { w1, b1, w2, b2 } => {
            let s = g.add(y, z);
            let (w1, b1, w2, b2) = (g.param(w1), g.param(b1), g.param(w2), g.param(b2));
            let h = g.linear(s, w1, Some(b1));
            let h = g.gelu(h);
            g.linear(h, w2, Some(b2))
        }
        FusionLayout::Concat { w, b } => {
            let cat = g.concat_last(y, z);
            let (w, b) = (g.param(w), g.param(b));
            g.linear(cat, w, Some(b))
        }
    }
}

fn head(g: &mut Graph, pooled: Var, l: &ModelLayout) -> Var {
    let (w1, b1, w2, b2) = (g.param(l.head_w1), g.param(l.head_b1), g.param(l.head_w2), g.param(l.head_b2));
    let h = g.linear(pooled, w1, Some(b1));
    let h = g.gelu(h);
    g.linear(h, w2, Some(b2))
}

/// Arithmetic mean over the token axis, `[B, N, D] -> [B, D]`.
pub fn mean_pool(t: &Tensor) -> Tensor {
    let mut g = Graph::new();
    let v = g.input(t.clone());
    let p = g.mean_axis(v, 1);
    g.value(p).clone()
}
