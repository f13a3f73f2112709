//! Hierarchical classifier: input embedding, `l` blocks of GCN followed by
//! graph transformer pooling, summed mean‖max readouts and an MLP head.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gnn::{readout, GcnLayer};
use crate::graphio::{Adjacency, Graph};
use crate::gtpool::{GtPoolConfig, GtPoolLayer, Selection};
use crate::numcore::{ParamId, ParamStore, Rng, Tape, Tensor, Var};
use crate::sampler::{SampleSpec, SamplerMethod};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub in_dim: usize,
    pub hidden: usize,
    pub heads: usize,
    pub layers: usize,
    pub num_classes: usize,
    pub mu: f64,
    pub lambda: f64,
    pub sampler: SamplerMethod,
    pub dropout: f64,
    pub score_gating: bool,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 {
            return Err(Error::Config("at least one GCN/pooling block is required".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Config(format!("need ≥ 2 classes, got {}", self.num_classes)));
        }
        if self.in_dim == 0 || self.hidden == 0 {
            return Err(Error::Config("input and hidden widths must be positive".into()));
        }
        self.pool_config()?.validate()
    }

    fn pool_config(&self) -> Result<GtPoolConfig> {
        Ok(GtPoolConfig {
            dim: self.hidden,
            heads: self.heads,
            lambda: self.lambda,
            spec: SampleSpec::new(self.mu, self.sampler)?,
            dropout: self.dropout,
            score_gating: self.score_gating,
        })
    }

    /// Closed-form trainable scalar count.
    pub fn parameter_count(&self) -> usize {
        let d = self.hidden;
        let embed = self.in_dim * d + d;
        let block = (d * d + d) + (8 * d * d + 7 * d);
        let head = (2 * d * d + d) + (d * self.num_classes + self.num_classes);
        embed + self.layers * block + head
    }
}

#[derive(Clone, Debug)]
struct Block {
    gcn: GcnLayer,
    pool: GtPoolLayer,
}

#[derive(Clone, Debug)]
pub struct GtPoolNet {
    pub config: ModelConfig,
    store: ParamStore,
    embed_w: ParamId,
    embed_b: ParamId,
    blocks: Vec<Block>,
    head_w1: ParamId,
    head_b1: ParamId,
    head_w2: ParamId,
    head_b2: ParamId,
}

/// Logits plus what each block kept.
#[derive(Debug)]
pub struct ForwardOutput<'t> {
    pub logits: Var<'t>,
    /// Ascending kept indices per block, relative to that block's input.
    pub selections: Vec<Vec<usize>>,
    /// Node count after each block.
    pub sizes: Vec<usize>,
}

impl GtPoolNet {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::derive(seed, &[0x1417]);
        let mut store = ParamStore::new();
        let d = config.hidden;
        let embed_w = store.add(
            "embed.w",
            Tensor::fan_in_uniform(config.in_dim, d, config.in_dim, &mut rng),
        );
        let embed_b = store.add("embed.b", Tensor::zeros(1, d));
        let pool_cfg = config.pool_config()?;
        let mut blocks = Vec::with_capacity(config.layers);
        for i in 0..config.layers {
            let gcn = GcnLayer::new(&mut store, &format!("block{i}.gcn"), d, d, &mut rng);
            let pool = GtPoolLayer::new(&mut store, &format!("block{i}.pool"), pool_cfg, &mut rng)?;
            blocks.push(Block { gcn, pool });
        }
        let head_w1 = store.add("head.w1", Tensor::fan_in_uniform(2 * d, d, 2 * d, &mut rng));
        let head_b1 = store.add("head.b1", Tensor::zeros(1, d));
        let head_w2 = store.add(
            "head.w2",
            Tensor::fan_in_uniform(d, config.num_classes, d, &mut rng),
        );
        let head_b2 = store.add("head.b2", Tensor::zeros(1, config.num_classes));
        Ok(GtPoolNet {
            config,
            store,
            embed_w,
            embed_b,
            blocks,
            head_w1,
            head_b1,
            head_w2,
            head_b2,
        })
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Exact number of trainable scalars.
    pub fn count_parameters(&self) -> usize {
        self.store.num_scalars()
    }

    pub fn pool_layer(&self, block: usize) -> &GtPoolLayer {
        &self.blocks[block].pool
    }

    pub fn gcn_layer(&self, block: usize) -> &GcnLayer {
        &self.blocks[block].gcn
    }

    /// Forward pass. With `fixed` set, block `i` keeps `fixed[i]` instead of
    /// sampling.
    pub fn forward_with<'t>(
        &self,
        tape: &'t Tape,
        x: &Tensor,
        adjacency: &Adjacency,
        train: bool,
        rng: &mut Rng,
        fixed: Option<&[Vec<usize>]>,
    ) -> Result<ForwardOutput<'t>> {
        self.forward_using(&self.store, tape, x, adjacency, train, rng, fixed)
    }

    /// [`GtPoolNet::forward_with`] reading parameter values from `store`,
    /// which must have this model's layout.
    #[allow(clippy::too_many_arguments)]
    pub fn forward_using<'t>(
        &self,
        store: &ParamStore,
        tape: &'t Tape,
        x: &Tensor,
        adjacency: &Adjacency,
        train: bool,
        rng: &mut Rng,
        fixed: Option<&[Vec<usize>]>,
    ) -> Result<ForwardOutput<'t>> {
        if store.len() != self.store.len() {
            return Err(Error::Argument("parameter store has a different layout".into()));
        }
        if adjacency.n() == 0 {
            return Err(Error::EmptyGraph);
        }
        if let Some(f) = fixed {
            if f.len() != self.blocks.len() {
                return Err(Error::Argument(format!(
                    "{} fixed selections for {} blocks",
                    f.len(),
                    self.blocks.len()
                )));
            }
        }
        let input = tape.constant(x.clone());
        let mut h = input
            .matmul(&tape.param(store, self.embed_w))?
            .add_row(&tape.param(store, self.embed_b))?;
        let mut adj = adjacency.clone();
        let mut graph_repr: Option<Var<'t>> = None;
        let mut selections = Vec::with_capacity(self.blocks.len());
        let mut sizes = Vec::with_capacity(self.blocks.len());
        for (i, block) in self.blocks.iter().enumerate() {
            let conv = block.gcn.forward(tape, store, h, &adj)?;
            let selection = match fixed {
                Some(f) => Selection::Fixed(&f[i]),
                None => Selection::Sample,
            };
            let pooled = block.pool.pool(tape, store, conv, &adj, selection, train, rng)?;
            let r = readout(&pooled.x)?;
            graph_repr = Some(match graph_repr {
                None => r,
                Some(acc) => acc.add(&r)?,
            });
            sizes.push(pooled.idx.len());
            selections.push(pooled.idx);
            h = pooled.x;
            adj = pooled.adjacency;
        }
        let repr = graph_repr.expect("layers ≥ 1");
        let logits = repr
            .matmul(&tape.param(store, self.head_w1))?
            .add_row(&tape.param(store, self.head_b1))?
            .relu()
            .dropout(self.config.dropout, rng, train)
            .matmul(&tape.param(store, self.head_w2))?
            .add_row(&tape.param(store, self.head_b2))?;
        Ok(ForwardOutput {
            logits,
            selections,
            sizes,
        })
    }

    pub fn forward<'t>(&self, tape: &'t Tape, graph: &Graph, train: bool, rng: &mut Rng) -> Result<Var<'t>> {
        Ok(self
            .forward_with(tape, &graph.x, &graph.adjacency, train, rng, None)?
            .logits)
    }

    /// Replaces all parameter values with those of `store` (same layout).
    pub fn load_params(&mut self, store: &ParamStore) -> Result<()> {
        self.store.copy_values_from(store)
    }

    pub fn save_checkpoint(&self, path: impl AsRef<Path>) -> Result<()> {
        write_checkpoint(&self.store, path)
    }

    pub fn load_checkpoint(&mut self, path: impl AsRef<Path>) -> Result<()> {
        let store = read_checkpoint(path)?;
        self.load_params(&store)
    }
}

/// Checkpoint magic bytes.
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"GTPC";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Serialises `store` as
///
/// ```text
/// "GTPC" | version u32 | count u32 |
///   count × ( name_len u32 | name utf-8 | rows u32 | cols u32 | rows·cols × f64 )
/// ```
///
/// All integers and floats little-endian; tensors in store order, row-major.
pub fn encode_checkpoint(store: &ParamStore) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + store.num_scalars() * 8);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (name, t) in store.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rows() as u32).to_le_bytes());
        out.extend_from_slice(&(t.cols() as u32).to_le_bytes());
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<ParamStore> {
    let bad = |msg: &str| Error::Argument(format!("checkpoint: {msg}"));
    let mut cur = bytes;
    let mut take = |n: usize| -> Result<&[u8]> {
        if cur.len() < n {
            return Err(bad("truncated"));
        }
        let (head, rest) = cur.split_at(n);
        cur = rest;
        Ok(head)
    };
    let u32_at = |b: &[u8]| u32::from_le_bytes(b.try_into().expect("4 bytes"));
    if take(4)? != CHECKPOINT_MAGIC {
        return Err(bad("bad magic"));
    }
    let version = u32_at(take(4)?);
    if version != CHECKPOINT_VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let count = u32_at(take(4)?) as usize;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let name_len = u32_at(take(4)?) as usize;
        let name = std::str::from_utf8(take(name_len)?)
            .map_err(|_| bad("name is not utf-8"))?
            .to_string();
        let rows = u32_at(take(4)?) as usize;
        let cols = u32_at(take(4)?) as usize;
        let raw = take(rows * cols * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        store.add(name, Tensor::from_vec(rows, cols, data)?);
    }
    if !cur.is_empty() {
        return Err(bad("trailing bytes"));
    }
    Ok(store)
}

pub fn write_checkpoint(store: &ParamStore, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&encode_checkpoint(store)).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<ParamStore> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config(layers: usize, mu: f64, sampler: SamplerMethod) -> ModelConfig {
        ModelConfig {
            in_dim: 7,
            hidden: 8,
            heads: 2,
            layers,
            num_classes: 2,
            mu,
            lambda: 0.5,
            sampler,
            dropout: 0.0,
            score_gating: false,
        }
    }

    #[test]
    fn parameter_count_matches_closed_form() {
        for layers in 1..=4 {
            let cfg = config(layers, 0.5, SamplerMethod::Rwsv);
            let net = GtPoolNet::new(cfg, 0).unwrap();
            assert_eq!(net.count_parameters(), cfg.parameter_count());
        }
        let default_like = ModelConfig {
            hidden: 64,
            heads: 4,
            layers: 3,
            ..config(3, 0.5, SamplerMethod::Rwsv)
        };
        // embed 7·64 + 64, three blocks of (64² + 64) + (8·64² + 7·64), head (128·64 + 64) + (64·2 + 2)
        let expect = (448 + 64) + 3 * ((4096 + 64) + (8 * 4096 + 7 * 64)) + (8192 + 64) + (128 + 2);
        assert_eq!(default_like.parameter_count(), expect);
        assert_eq!(GtPoolNet::new(default_like, 1).unwrap().count_parameters(), expect);
    }

    #[test]
    fn zero_layers_rejected() {
        assert!(GtPoolNet::new(config(0, 0.5, SamplerMethod::Rws), 0).is_err());
    }

    #[test]
    fn sizes_follow_iterated_ceiling() {
        let net = GtPoolNet::new(config(3, 0.5, SamplerMethod::Rwsv), 2).unwrap();
        let tape = Tape::new();
        let adj = Adjacency::new(11, (0..10).map(|i| (i, i + 1))).unwrap();
        let x = Tensor::uniform(11, 7, 1.0, &mut Rng::new(1));
        let out = net
            .forward_with(&tape, &x, &adj, false, &mut Rng::new(0), None)
            .unwrap();
        assert_eq!(out.sizes, vec![6, 3, 2]);
        assert_eq!(out.logits.shape(), (1, 2));
    }

    #[test]
    fn eval_forward_is_deterministic() {
        let net = GtPoolNet::new(config(2, 0.5, SamplerMethod::Rws), 2).unwrap();
        let adj = Adjacency::new(6, [(0, 1), (1, 2), (3, 4), (4, 5)]).unwrap();
        let x = Tensor::uniform(6, 7, 1.0, &mut Rng::new(1));
        let run = || {
            let tape = Tape::new();
            net.forward_with(&tape, &x, &adj, false, &mut Rng::new(0), None)
                .unwrap()
                .logits
                .to_tensor()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn checkpoint_round_trip() {
        let net = GtPoolNet::new(config(2, 0.5, SamplerMethod::Rws), 5).unwrap();
        let bytes = encode_checkpoint(net.params());
        assert_eq!(&bytes[..4], b"GTPC");
        let back = decode_checkpoint(&bytes).unwrap();
        assert_eq!(back.num_scalars(), net.count_parameters());
        let mut other = GtPoolNet::new(config(2, 0.5, SamplerMethod::Rws), 6).unwrap();
        other.load_params(&back).unwrap();
        for ((_, a), (_, b)) in other.params().iter().zip(net.params().iter()) {
            assert_eq!(a.data(), b.data());
        }
        assert!(decode_checkpoint(&bytes[..bytes.len() - 1]).is_err());
        assert!(decode_checkpoint(b"NOPE\x01\0\0\0\0\0\0\0").is_err());
    }
}
