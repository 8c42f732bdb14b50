use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Conv3d, Graph, Linear, ParamStore, Tensor, Var};
use crate::error::{Error, Result};

/// How an encoder reduces its input from level to level.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pathway {
    /// `R x R x D`: spatial /2, depth /4 (clamped at 1).
    Connectivity,
    /// `X x Y x Z`: /2 on every axis.
    Regional,
}

impl Pathway {
    /// Stride of the first block and of each pyramid stage.
    pub fn stride(self) -> [usize; 3] {
        match self {
            Pathway::Connectivity => [2, 2, 4],
            Pathway::Regional => [2, 2, 2],
        }
    }

    /// Dims after one reduction step; `None` when the input does not divide.
    pub fn reduce(self, dims: [usize; 3]) -> Option<[usize; 3]> {
        let s = self.stride();
        let mut out = [0; 3];
        for a in 0..3 {
            out[a] = if a == 2 && self == Pathway::Connectivity && dims[a] < s[a] {
                1
            } else if dims[a] % s[a] == 0 {
                dims[a] / s[a]
            } else {
                return None;
            };
        }
        Some(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub pathway: Pathway,
    /// Single-channel input extent.
    pub input_dims: [usize; 3],
    /// Output channels per block; the length is the number of levels.
    pub filters: Vec<usize>,
    pub emb_dim: usize,
    pub tokens: usize,
    pub token_dim: usize,
}

impl EncoderConfig {
    pub fn levels(&self) -> usize {
        self.filters.len()
    }

    /// Spatial dims after each block, index 0 = level 1.
    pub fn level_dims(&self) -> Result<Vec<[usize; 3]>> {
        let mut dims = self.input_dims;
        let mut out = Vec::with_capacity(self.levels());
        for l in 1..=self.levels() {
            dims = self.pathway.reduce(dims).ok_or_else(|| {
                Error::Dimension(format!(
                    "{:?} input {:?} is not divisible at level {l} (reached {dims:?})",
                    self.pathway, self.input_dims
                ))
            })?;
            out.push(dims);
        }
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        if self.filters.is_empty() || self.filters.contains(&0) {
            return Err(Error::Config("encoder needs at least one block with nonzero filters".into()));
        }
        if self.emb_dim == 0 || self.tokens == 0 || self.token_dim == 0 {
            return Err(Error::Config("emb_dim, tokens and token_dim must be positive".into()));
        }
        let last = *self.level_dims()?.last().unwrap();
        let positions: usize = last.iter().product();
        if positions % self.tokens != 0 {
            return Err(Error::Config(format!(
                "final map has {positions} positions, not divisible into {} tokens",
                self.tokens
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct Block {
    conv: Conv3d,
    skip: Conv3d,
    /// Average-pool factors applied before `conv` (unit for block 1).
    pool: [usize; 3],
}

/// Convolutional encoder with 1x1-projected skip connections.
#[derive(Debug, Clone)]
pub struct Encoder {
    pub cfg: EncoderConfig,
    blocks: Vec<Block>,
    embed: Linear,
    token_proj: Linear,
}

/// Per-level maps plus the pooled embedding and token sequence.
#[derive(Debug, Clone)]
pub struct EncoderOutput {
    pub levels: Vec<Var>,
    pub embedding: Var,
    pub tokens: Var,
}

impl Encoder {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, cfg: EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let dims = cfg.level_dims()?;
        let mut blocks = Vec::with_capacity(cfg.levels());
        let mut in_ch = 1;
        let mut prev = cfg.input_dims;
        for (l, (&out_ch, &d)) in cfg.filters.iter().zip(&dims).enumerate() {
            let block = if l == 0 {
                let stride = cfg.pathway.stride();
                Block {
                    conv: Conv3d::new(store, rng, &format!("{name}.block1.conv"), in_ch, out_ch, [3; 3], stride, [1; 3]),
                    skip: Conv3d::new(store, rng, &format!("{name}.block1.skip"), in_ch, out_ch, [1; 3], stride, [0; 3]),
                    pool: [1; 3],
                }
            } else {
                Block {
                    conv: Conv3d::new(store, rng, &format!("{name}.block{}.conv", l + 1), in_ch, out_ch, [3; 3], [1; 3], [1; 3]),
                    skip: Conv3d::new(store, rng, &format!("{name}.block{}.skip", l + 1), in_ch, out_ch, [1; 3], [1; 3], [0; 3]),
                    pool: [prev[0] / d[0], prev[1] / d[1], prev[2] / d[2]],
                }
            };
            blocks.push(block);
            in_ch = out_ch;
            prev = d;
        }
        let last_ch = *cfg.filters.last().unwrap();
        let embed = Linear::new(store, rng, &format!("{name}.embed"), last_ch, cfg.emb_dim, true);
        let token_proj = Linear::new(store, rng, &format!("{name}.tokens"), last_ch, cfg.token_dim, true);
        Ok(Self {
            cfg,
            blocks,
            embed,
            token_proj,
        })
    }

    /// One block: `relu(conv(x')) + skip(x')` with `x'` the downsampled input.
    pub fn block(&self, g: &mut Graph, store: &ParamStore, level: usize, x: Var) -> Var {
        let b = &self.blocks[level - 1];
        let x = g.avg_pool3d(x, b.pool);
        let h = b.conv.apply(g, store, x);
        let h = g.relu(h);
        let s = b.skip.apply(g, store, x);
        g.add(h, s)
    }

    /// Runs every block. `after_block(g, level, map)` may replace the map
    /// that feeds the next block (used for pyramid injection).
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        input: Var,
        after_block: &mut dyn FnMut(&mut Graph, usize, Var) -> Var,
    ) -> EncoderOutput {
        let mut x = input;
        let mut levels = Vec::with_capacity(self.blocks.len());
        for l in 1..=self.blocks.len() {
            x = self.block(g, store, l, x);
            x = after_block(g, l, x);
            levels.push(x);
        }
        let pooled = g.channel_mean(x);
        let embedding = self.embed.apply(g, store, pooled);
        let tokens = g.token_pool(x, self.cfg.tokens);
        let tokens = self.token_proj.apply(g, store, tokens);
        EncoderOutput {
            levels,
            embedding,
            tokens,
        }
    }
}

/// Plain-value result of [`encode_pathway`].
#[derive(Debug, Clone)]
pub struct EncodedPathway {
    pub levels: Vec<Tensor>,
    pub embedding: Vec<f64>,
    pub tokens: Tensor,
}

/// Runs an encoder on one single-channel input volume without injection.
pub fn encode_pathway(encoder: &Encoder, store: &ParamStore, input: &Tensor) -> Result<EncodedPathway> {
    let (c, dims) = input.volume_dims();
    if c != 1 || dims != encoder.cfg.input_dims {
        return Err(Error::Dimension(format!(
            "encoder expects [1, {:?}], got {:?}",
            encoder.cfg.input_dims,
            input.shape()
        )));
    }
    let mut g = Graph::new();
    let x = g.constant(input.clone());
    let out = encoder.forward(&mut g, store, x, &mut |_, _, v| v);
    Ok(EncodedPathway {
        levels: out.levels.iter().map(|&v| g.value(v).clone()).collect(),
        embedding: g.value(out.embedding).data().to_vec(),
        tokens: g.value(out.tokens).clone(),
    })
}
