//! The dual-graph CTR network.
//!
//! All linear maps use the row-vector convention: a representation `h` is a
//! `1 x D` row and a weight `W` acts as `h W`. Batched code stacks rows.

mod checkpoint;
mod forward;
pub mod layers;

use disenpoi_autodiff::{AutodiffError, BoundParams, ParamId, ParamStore, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CheckpointHeader, ManifestEntry};
pub use forward::{batch_loss, forward, Batch, BatchLoss, ForwardOutput};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("checkpoint manifest mismatch: {0}")]
    ManifestMismatch(String),
    #[error("malformed checkpoint: {0}")]
    MalformedCheckpoint(String),
    #[error("POI index {index} out of range ({num_pois} POIs)")]
    PoiOutOfRange { index: usize, num_pois: usize },
    #[error("empty context")]
    EmptyContext,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// Architecture hyper-parameters. Stored in checkpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_pois: usize,
    /// Embedding size D.
    pub dim: usize,
    /// Geo propagation layers L.
    pub geo_layers: usize,
    /// Gated propagation steps T.
    pub ggnn_steps: usize,
    /// Hidden width of the prediction MLP.
    pub mlp_hidden: usize,
    /// Geo graph threshold in km the model was trained with.
    pub delta_d: f64,
    #[serde(default)]
    pub disable_geo_graph: bool,
    #[serde(default)]
    pub disable_seq_graph: bool,
}

impl ModelConfig {
    pub fn new(num_pois: usize, dim: usize) -> Self {
        Self {
            num_pois,
            dim,
            geo_layers: 2,
            ggnn_steps: 2,
            mlp_hidden: 2 * dim,
            delta_d: 1.0,
            disable_geo_graph: false,
            disable_seq_graph: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GeoLayer<T> {
    /// Applied to the neighbor and self states.
    pub w_message: T,
    /// Applied to the distance-weighted interaction term.
    pub w_interaction: T,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ggnn<T> {
    /// `2D x D` map of the concatenated [incoming | outgoing] aggregation.
    pub w_aggregate: T,
    pub bias: T,
    pub w_update: T,
    pub u_update: T,
    pub w_reset: T,
    pub u_reset: T,
    pub w_candidate: T,
    pub u_candidate: T,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Attention<T> {
    /// `D x 1` scoring vector.
    pub alpha: T,
    pub query: T,
    pub key: T,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Mlp<T> {
    pub w_hidden: T,
    pub b_hidden: T,
    pub w_out: T,
    pub b_out: T,
}

/// Every learnable tensor of the model, generic over its handle type.
#[derive(Clone, Debug, PartialEq)]
pub struct Weights<T> {
    pub embedding: T,
    pub geo: Vec<GeoLayer<T>>,
    pub ggnn: Ggnn<T>,
    pub attn_geo: Attention<T>,
    pub attn_seq: Attention<T>,
    pub proj_geo: T,
    pub proj_seq: T,
    pub mlp: Mlp<T>,
}

impl<T: Copy> Weights<T> {
    pub fn map<U>(&self, mut f: impl FnMut(T) -> U) -> Weights<U> {
        let attn = |a: &Attention<T>, f: &mut dyn FnMut(T) -> U| Attention {
            alpha: f(a.alpha),
            query: f(a.query),
            key: f(a.key),
        };
        let g = &self.ggnn;
        Weights {
            embedding: f(self.embedding),
            geo: self
                .geo
                .iter()
                .map(|l| GeoLayer {
                    w_message: f(l.w_message),
                    w_interaction: f(l.w_interaction),
                })
                .collect(),
            ggnn: Ggnn {
                w_aggregate: f(g.w_aggregate),
                bias: f(g.bias),
                w_update: f(g.w_update),
                u_update: f(g.u_update),
                w_reset: f(g.w_reset),
                u_reset: f(g.u_reset),
                w_candidate: f(g.w_candidate),
                u_candidate: f(g.u_candidate),
            },
            attn_geo: attn(&self.attn_geo, &mut f),
            attn_seq: attn(&self.attn_seq, &mut f),
            proj_geo: f(self.proj_geo),
            proj_seq: f(self.proj_seq),
            mlp: Mlp {
                w_hidden: f(self.mlp.w_hidden),
                b_hidden: f(self.mlp.b_hidden),
                w_out: f(self.mlp.w_out),
                b_out: f(self.mlp.b_out),
            },
        }
    }
}

/// Names and shapes of every parameter, in manifest order.
pub fn parameter_layout(config: &ModelConfig) -> Vec<(String, (usize, usize))> {
    let d = config.dim;
    let mut out = vec![("embedding".to_string(), (config.num_pois, d))];
    for l in 0..config.geo_layers {
        out.push((format!("geo.layer{l}.w_message"), (d, d)));
        out.push((format!("geo.layer{l}.w_interaction"), (d, d)));
    }
    out.push(("seq.w_aggregate".into(), (2 * d, d)));
    out.push(("seq.bias".into(), (1, d)));
    for name in ["w_update", "u_update", "w_reset", "u_reset", "w_candidate", "u_candidate"] {
        out.push((format!("seq.{name}"), (d, d)));
    }
    for branch in ["attn_geo", "attn_seq"] {
        out.push((format!("{branch}.alpha"), (d, 1)));
        out.push((format!("{branch}.query"), (d, d)));
        out.push((format!("{branch}.key"), (d, d)));
    }
    out.push(("proj_geo".into(), (d, d)));
    out.push(("proj_seq".into(), (d, d)));
    out.push(("mlp.w_hidden".into(), (4 * d, config.mlp_hidden)));
    out.push(("mlp.b_hidden".into(), (1, config.mlp_hidden)));
    out.push(("mlp.w_out".into(), (config.mlp_hidden, 1)));
    out.push(("mlp.b_out".into(), (1, 1)));
    out
}

fn is_bias(name: &str) -> bool {
    name.ends_with("bias") || name.ends_with("b_hidden") || name.ends_with("b_out")
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub ids: Weights<ParamId>,
}

impl Model {
    /// Weights uniform in `±1/sqrt(D)`, biases zero.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = 1.0 / (config.dim as f64).sqrt();
        Self::with_values(config, |name, (r, c)| {
            if is_bias(name) {
                Tensor::zeros(r, c)
            } else {
                Tensor::from_fn(r, c, |_, _| rng.gen_range(-bound..bound))
            }
        })
    }

    /// Builds a model filling each parameter from `init(name, shape)`.
    pub fn with_values(config: ModelConfig, mut init: impl FnMut(&str, (usize, usize)) -> Tensor) -> Result<Self> {
        let mut params = ParamStore::new();
        for (name, shape) in parameter_layout(&config) {
            let t = init(&name, shape);
            if t.shape() != shape {
                return Err(ModelError::ManifestMismatch(format!(
                    "{name}: expected {shape:?}, got {:?}",
                    t.shape()
                )));
            }
            params.register(name, t)?;
        }
        let ids = Self::resolve_ids(&config, &params)?;
        Ok(Self { config, params, ids })
    }

    fn resolve_ids(config: &ModelConfig, params: &ParamStore) -> Result<Weights<ParamId>> {
        let id = |n: &str| params.id(n);
        let attn = |b: &str| -> Result<Attention<ParamId>> {
            Ok(Attention {
                alpha: id(&format!("{b}.alpha"))?,
                query: id(&format!("{b}.query"))?,
                key: id(&format!("{b}.key"))?,
            })
        };
        Ok(Weights {
            embedding: id("embedding")?,
            geo: (0..config.geo_layers)
                .map(|l| {
                    Ok(GeoLayer {
                        w_message: id(&format!("geo.layer{l}.w_message"))?,
                        w_interaction: id(&format!("geo.layer{l}.w_interaction"))?,
                    })
                })
                .collect::<Result<_>>()?,
            ggnn: Ggnn {
                w_aggregate: id("seq.w_aggregate")?,
                bias: id("seq.bias")?,
                w_update: id("seq.w_update")?,
                u_update: id("seq.u_update")?,
                w_reset: id("seq.w_reset")?,
                u_reset: id("seq.u_reset")?,
                w_candidate: id("seq.w_candidate")?,
                u_candidate: id("seq.u_candidate")?,
            },
            attn_geo: attn("attn_geo")?,
            attn_seq: attn("attn_seq")?,
            proj_geo: id("proj_geo")?,
            proj_seq: id("proj_seq")?,
            mlp: Mlp {
                w_hidden: id("mlp.w_hidden")?,
                b_hidden: id("mlp.b_hidden")?,
                w_out: id("mlp.w_out")?,
                b_out: id("mlp.b_out")?,
            },
        })
    }

    /// Places the parameters on `tape`.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Result<(BoundParams, Weights<Var>)> {
        let bound = self.params.bind(tape, trainable)?;
        let vars = self.ids.map(|id| bound.var(id));
        Ok((bound, vars))
    }

    /// Zeroes the output layer so every prediction is exactly 0.5.
    pub fn zero_output_layer(&mut self) {
        for id in [self.ids.mlp.w_out, self.ids.mlp.b_out] {
            self.params.get_mut(id).fill(0.0);
        }
    }

    pub fn embedding(&self) -> &Tensor {
        self.params.get(self.ids.embedding)
    }
}
