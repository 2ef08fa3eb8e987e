//! The full forecaster: graph-GRU spatial branch, transformer temporal
//! branch and elementwise gated fusion, with switches for the ablations.

mod checkpoint;
mod params;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};
pub use params::{BoundParams, ParamStore};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Tape, Tensor, TensorError, Var};
use crate::data::CHANNELS;
use crate::graph::{adaptive_adjacency, compute_adaptive_adjacency, line_graph_support, spread_over_batch, with_self_loops, GraphConv};
use crate::recurrent::{encode_batch, GruLayer, Projection};
use crate::transformer::{positional_encoding, AttentionProjections, LayerNormParams, Lttl, LttlBlock};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("checkpoint block {name}: {reason}")]
    CheckpointBlock { name: String, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Layer sizes and ablation switches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Architecture {
    /// Width of the adjacency embedding `E_A`.
    pub embed_dim: usize,
    /// Width of the weight-pool embedding `E_G`.
    pub napl_dim: usize,
    /// GRU hidden size.
    pub hidden: usize,
    pub d_model: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub gru_layers: usize,
    pub lttl_blocks: usize,
    pub use_napl: bool,
    pub use_gru_branch: bool,
    pub use_transformer_branch: bool,
    /// Replace the learned adjacency with the normalized line graph.
    pub static_graph: bool,
    /// Use `E_A` as the weight-pool embedding too.
    pub share_embeddings: bool,
    /// One fusion weight per branch instead of one per output entry.
    pub scalar_fusion: bool,
}

impl Default for Architecture {
    fn default() -> Self {
        Architecture {
            embed_dim: 10,
            napl_dim: 10,
            hidden: 64,
            d_model: 64,
            heads: 4,
            d_ff: 256,
            gru_layers: 1,
            lttl_blocks: 1,
            use_napl: true,
            use_gru_branch: true,
            use_transformer_branch: true,
            static_graph: false,
            share_embeddings: false,
            scalar_fusion: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub num_nodes: usize,
    /// Input steps `T`.
    pub input_len: usize,
    /// Output steps `m`.
    pub output_len: usize,
    /// Seeds parameter initialization.
    pub seed: u64,
    #[serde(default)]
    pub arch: Architecture,
}

impl ModelConfig {
    pub fn new(num_nodes: usize, input_len: usize, output_len: usize, arch: Architecture, seed: u64) -> Self {
        ModelConfig {
            num_nodes,
            input_len,
            output_len,
            seed,
            arch,
        }
    }

    /// Width of each branch output per node, `m·2`.
    pub fn output_width(&self) -> usize {
        self.output_len * CHANNELS
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let a = &self.arch;
        let fail = |msg: String| Err(ModelError::InvalidConfig(msg));
        if !a.use_gru_branch && !a.use_transformer_branch {
            return fail("at least one of use_gru_branch and use_transformer_branch must be enabled".into());
        }
        if self.num_nodes == 0 || self.input_len == 0 || self.output_len == 0 {
            return fail("num_nodes, input_len and output_len must be positive".into());
        }
        if a.use_gru_branch {
            if a.hidden == 0 || a.gru_layers == 0 {
                return fail("hidden and gru_layers must be positive".into());
            }
            if !a.static_graph && a.embed_dim == 0 {
                return fail("embed_dim must be positive".into());
            }
            if a.use_napl && a.napl_dim == 0 {
                return fail("napl_dim must be positive".into());
            }
            if a.share_embeddings {
                if a.static_graph || !a.use_napl {
                    return fail("share_embeddings needs both the learned adjacency and NAPL".into());
                }
                if a.embed_dim != a.napl_dim {
                    return fail(format!(
                        "share_embeddings needs embed_dim == napl_dim, got {} and {}",
                        a.embed_dim, a.napl_dim
                    ));
                }
            }
        }
        if a.use_transformer_branch {
            if a.d_model == 0 || a.d_model % 2 != 0 {
                return fail(format!("d_model must be even and positive, got {}", a.d_model));
            }
            if a.heads == 0 || a.d_model % a.heads != 0 {
                return fail(format!("d_model {} is not divisible by {} heads", a.d_model, a.heads));
            }
            if a.d_ff < a.d_model {
                return fail(format!("d_ff {} must be at least d_model {}", a.d_ff, a.d_model));
            }
            if a.lttl_blocks == 0 {
                return fail("lttl_blocks must be positive".into());
            }
        }
        Ok(())
    }

    fn uses_adaptive_graph(&self) -> bool {
        self.arch.use_gru_branch && !self.arch.static_graph
    }
}

struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    fn uniform(&mut self, shape: &[usize], limit: f64) -> Tensor {
        Tensor::from_fn(shape, |_| self.rng.gen_range(-limit..limit))
    }

    fn embedding(&mut self, rows: usize, dim: usize) -> Tensor {
        self.uniform(&[rows, dim], 0.5 / (dim as f64).sqrt())
    }

    /// Glorot-uniform over the last two axes.
    fn glorot(&mut self, shape: &[usize]) -> Tensor {
        let (fan_in, fan_out) = (shape[shape.len() - 2], shape[shape.len() - 1]);
        self.uniform(shape, (6.0 / (fan_in + fan_out) as f64).sqrt())
    }
}

/// A configured network and its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct StdgrlModel {
    pub config: ModelConfig,
    pub params: ParamStore,
}

/// Builds the model selected by `config`'s switches, freshly initialized.
pub fn build_variant(config: ModelConfig) -> Result<StdgrlModel, ModelError> {
    StdgrlModel::new(config)
}

/// `w_s ⊙ y_s + w_t ⊙ y_t`.
pub fn fuse<'t>(y_s: Var<'t>, y_t: Var<'t>, w_s: Var<'t>, w_t: Var<'t>) -> Result<Var<'t>, TensorError> {
    y_s.mul(w_s)?.add(y_t.mul(w_t)?)
}

impl StdgrlModel {
    pub fn new(config: ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let mut init = Init {
            rng: ChaCha8Rng::seed_from_u64(config.seed),
        };
        let mut p = ParamStore::new();
        let a = config.arch.clone();
        let n = config.num_nodes;
        let width = config.output_width();

        if a.use_gru_branch {
            if config.uses_adaptive_graph() {
                p.insert("graph.e_a", init.embedding(n, a.embed_dim));
            }
            if a.use_napl && !a.share_embeddings {
                p.insert("graph.e_g", init.embedding(n, a.napl_dim));
            }
            for layer in 0..a.gru_layers {
                let c_in = if layer == 0 { CHANNELS } else { a.hidden };
                let (w_shape, b_shape) = if a.use_napl {
                    (vec![a.napl_dim, c_in + a.hidden, a.hidden], vec![a.napl_dim, a.hidden])
                } else {
                    (vec![c_in + a.hidden, a.hidden], vec![a.hidden])
                };
                for gate in ["z", "r", "h"] {
                    p.insert(format!("gru.l{layer}.w_{gate}"), init.glorot(&w_shape));
                }
                for gate in ["z", "r", "h"] {
                    p.insert(format!("gru.l{layer}.b_{gate}"), Tensor::zeros(&b_shape));
                }
            }
            p.insert("gru.proj.w", init.glorot(&[a.hidden, width]));
            p.insert("gru.proj.b", Tensor::zeros(&[width]));
        }

        if a.use_transformer_branch {
            let (dm, ff) = (a.d_model, a.d_ff);
            p.insert("lttl.embed.w", init.glorot(&[CHANNELS, dm]));
            p.insert("lttl.embed.b", Tensor::zeros(&[dm]));
            for b in 0..a.lttl_blocks {
                for w in ["w_q", "w_k", "w_v", "w_o"] {
                    p.insert(format!("lttl.b{b}.{w}"), init.glorot(&[dm, dm]));
                }
                p.insert(format!("lttl.b{b}.ln1.gain"), Tensor::full(&[dm], 1.0));
                p.insert(format!("lttl.b{b}.ln1.bias"), Tensor::zeros(&[dm]));
                p.insert(format!("lttl.b{b}.ffn.w1"), init.glorot(&[dm, ff]));
                p.insert(format!("lttl.b{b}.ffn.b1"), Tensor::zeros(&[ff]));
                p.insert(format!("lttl.b{b}.ffn.w2"), init.glorot(&[ff, dm]));
                p.insert(format!("lttl.b{b}.ffn.b2"), Tensor::zeros(&[dm]));
                p.insert(format!("lttl.b{b}.ln2.gain"), Tensor::full(&[dm], 1.0));
                p.insert(format!("lttl.b{b}.ln2.bias"), Tensor::zeros(&[dm]));
            }
            p.insert("lttl.proj.w", init.glorot(&[dm, width]));
            p.insert("lttl.proj.b", Tensor::zeros(&[width]));
        }

        if a.use_gru_branch && a.use_transformer_branch {
            let shape = if a.scalar_fusion { vec![1] } else { vec![n, width] };
            p.insert("fusion.w_s", Tensor::full(&shape, 0.5));
            p.insert("fusion.w_t", Tensor::full(&shape, 0.5));
        }

        Ok(StdgrlModel { config, params: p })
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_scalars()
    }

    /// Learned adjacency `Ã`, or `None` for static-graph and transformer-only
    /// models.
    pub fn adjacency(&self) -> Option<Tensor> {
        let e_a = self.params.get("graph.e_a")?;
        Some(compute_adaptive_adjacency(e_a).expect("registered shapes are consistent"))
    }

    /// Graph support used inside the GRU: `I + Ã`, or the static line graph.
    pub fn support<'t>(&self, bound: &BoundParams<'t>, tape: &'t Tape) -> Result<Var<'t>, TensorError> {
        if self.config.arch.static_graph {
            Ok(tape.constant(line_graph_support(self.config.num_nodes)))
        } else {
            with_self_loops(adaptive_adjacency(bound.get("graph.e_a"))?)
        }
    }

    fn gru_layers<'t>(&self, bound: &BoundParams<'t>, batch: usize) -> Result<Vec<GruLayer<'t>>, TensorError> {
        let a = &self.config.arch;
        let n = self.config.num_nodes;
        let e_g = if a.share_embeddings { "graph.e_a" } else { "graph.e_g" };
        (0..a.gru_layers)
            .map(|l| {
                let get = |name: &str| bound.get(&format!("gru.l{l}.{name}"));
                let w_zr = get("w_z").concat(get("w_r"))?;
                let b_zr = get("b_z").concat(get("b_r"))?;
                if a.use_napl {
                    let e = bound.get(e_g);
                    Ok(GruLayer {
                        gates: GraphConv::napl(e, w_zr, b_zr, batch)?,
                        candidate: GraphConv::napl(e, get("w_h"), get("b_h"), batch)?,
                    })
                } else {
                    Ok(GruLayer {
                        gates: GraphConv::shared(w_zr, b_zr, n, batch)?,
                        candidate: GraphConv::shared(get("w_h"), get("b_h"), n, batch)?,
                    })
                }
            })
            .collect()
    }

    fn lttl<'t>(&self, bound: &BoundParams<'t>) -> Result<Lttl<'t>, TensorError> {
        let a = &self.config.arch;
        let blocks = (0..a.lttl_blocks)
            .map(|b| {
                let get = |name: &str| bound.get(&format!("lttl.b{b}.{name}"));
                LttlBlock {
                    attention: AttentionProjections {
                        w_q: get("w_q"),
                        w_k: get("w_k"),
                        w_v: get("w_v"),
                        w_o: get("w_o"),
                    },
                    norm1: LayerNormParams {
                        gain: get("ln1.gain"),
                        bias: get("ln1.bias"),
                    },
                    ffn_in: Projection {
                        w: get("ffn.w1"),
                        b: get("ffn.b1"),
                    },
                    ffn_out: Projection {
                        w: get("ffn.w2"),
                        b: get("ffn.b2"),
                    },
                    norm2: LayerNormParams {
                        gain: get("ln2.gain"),
                        bias: get("ln2.bias"),
                    },
                }
            })
            .collect();
        Ok(Lttl {
            embed: Projection {
                w: bound.get("lttl.embed.w"),
                b: bound.get("lttl.embed.b"),
            },
            blocks,
            projection: Projection {
                w: bound.get("lttl.proj.w"),
                b: bound.get("lttl.proj.b"),
            },
            heads: a.heads,
            encoding: positional_encoding(self.config.input_len, a.d_model)?,
        })
    }

    fn fusion_weight<'t>(&self, w: Var<'t>, batch: usize) -> Result<Var<'t>, TensorError> {
        let (n, width) = (self.config.num_nodes, self.config.output_width());
        if self.config.arch.scalar_fusion {
            w.tile(n * batch * width)?.reshape(&[n, batch, width])
        } else {
            spread_over_batch(w, batch)
        }
    }

    /// Branch outputs before fusion, each `[N × B × m·2]`.
    pub fn branches<'t>(
        &self,
        bound: &BoundParams<'t>,
        x: Var<'t>,
    ) -> Result<(Option<Var<'t>>, Option<Var<'t>>), ModelError> {
        let shape = x.shape();
        let c = &self.config;
        if shape.len() != 4 || shape[1..] != [c.input_len, c.num_nodes, CHANNELS] {
            return Err(ModelError::Tensor(TensorError::ShapeMismatch {
                op: "forward",
                left: shape,
                right: vec![c.input_len, c.num_nodes, CHANNELS],
            }));
        }
        let batch = shape[0];
        let tape = x.tape();
        let nodes_first = x.permute(&[2, 1, 0, 3])?;
        let y_s = if c.arch.use_gru_branch {
            let support = self.support(bound, tape)?;
            let layers = self.gru_layers(bound, batch)?;
            let projection = Projection {
                w: bound.get("gru.proj.w"),
                b: bound.get("gru.proj.b"),
            };
            Some(encode_batch(nodes_first, &layers, support, &projection)?)
        } else {
            None
        };
        let y_t = if c.arch.use_transformer_branch {
            Some(self.lttl(bound)?.forward_batch(nodes_first)?)
        } else {
            None
        };
        Ok((y_s, y_t))
    }

    /// Batched forward: `x [B × T × N × 2]` (normalized) to `[B × m × N × 2]`.
    pub fn forward_batch<'t>(&self, bound: &BoundParams<'t>, x: Var<'t>) -> Result<Var<'t>, ModelError> {
        let batch = x.shape()[0];
        let fused = match self.branches(bound, x)? {
            (Some(y_s), Some(y_t)) => {
                let w_s = self.fusion_weight(bound.get("fusion.w_s"), batch)?;
                let w_t = self.fusion_weight(bound.get("fusion.w_t"), batch)?;
                fuse(y_s, y_t, w_s, w_t)?
            }
            (Some(y), None) | (None, Some(y)) => y,
            (None, None) => unreachable!("validated: at least one branch"),
        };
        let (n, m) = (self.config.num_nodes, self.config.output_len);
        Ok(fused.reshape(&[n, batch, m, CHANNELS])?.permute(&[1, 2, 0, 3])?)
    }

    /// Single window `[T × N × 2]` to `[m × N × 2]`.
    pub fn forward<'t>(&self, tape: &'t Tape, x: &Tensor) -> Result<Var<'t>, ModelError> {
        let mut shape = vec![1];
        shape.extend_from_slice(x.shape());
        let x = tape.constant(x.clone().reshape(&shape)?);
        let bound = self.params.bind(tape);
        let y = self.forward_batch(&bound, x)?;
        let out_shape = y.shape()[1..].to_vec();
        Ok(y.reshape(&out_shape)?)
    }

    /// Inference on a stacked batch `[B × T × N × 2]`.
    pub fn predict_batch(&self, x: &Tensor) -> Result<Tensor, ModelError> {
        let tape = Tape::inference();
        let bound = self.params.bind(&tape);
        Ok(self.forward_batch(&bound, tape.constant(x.clone()))?.to_tensor())
    }
}

#[cfg(test)]
mod tests;
