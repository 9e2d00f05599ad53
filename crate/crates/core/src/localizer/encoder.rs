//! Coarse learner: patch tokens through pre-norm attention blocks, then a
//! convolutional head that upsamples back to a full-resolution heatmap.

use candle_core::{Module, Tensor, D};
use candle_nn::{Conv2d, Conv2dConfig, Init, Linear, VarBuilder};

use super::EncoderConfig;
use crate::error::Result;
use crate::nn::{LayerNorm, Upsampler};

struct Attention {
    qkv: Linear,
    proj: Linear,
    heads: usize,
    scale: f64,
}

impl Attention {
    fn new(dim: usize, heads: usize, vb: VarBuilder) -> Result<Self> {
        Ok(Self {
            qkv: candle_nn::linear(dim, 3 * dim, vb.pp("qkv"))?,
            proj: candle_nn::linear(dim, dim, vb.pp("proj"))?,
            heads,
            scale: 1.0 / ((dim / heads) as f64).sqrt(),
        })
    }

    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let (b, n, d) = x.dims3()?;
        let hd = d / self.heads;
        let qkv = self
            .qkv
            .forward(x)?
            .reshape((b, n, 3, self.heads, hd))?
            .permute((2, 0, 3, 1, 4))?;
        let q = qkv.get(0)?.contiguous()?;
        let k = qkv.get(1)?.contiguous()?;
        let v = qkv.get(2)?.contiguous()?;
        let att = (q.matmul(&k.t()?.contiguous()?)? * self.scale)?;
        let att = candle_nn::ops::softmax(&att, D::Minus1)?;
        let out = att.matmul(&v)?.transpose(1, 2)?.reshape((b, n, d))?;
        self.proj.forward(&out)
    }
}

struct Block {
    norm1: LayerNorm,
    attn: Attention,
    norm2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

impl Block {
    fn new(dim: usize, heads: usize, mlp_ratio: usize, vb: VarBuilder) -> Result<Self> {
        Ok(Self {
            norm1: LayerNorm::new(dim, vb.pp("norm1"))?,
            attn: Attention::new(dim, heads, vb.pp("attn"))?,
            norm2: LayerNorm::new(dim, vb.pp("norm2"))?,
            fc1: candle_nn::linear(dim, dim * mlp_ratio, vb.pp("mlp.fc1"))?,
            fc2: candle_nn::linear(dim * mlp_ratio, dim, vb.pp("mlp.fc2"))?,
        })
    }

    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let x = (x + self.attn.forward(&self.norm1.forward(x)?)?)?;
        let h = self.fc1.forward(&self.norm2.forward(&x)?)?.gelu()?;
        x + self.fc2.forward(&h)?
    }
}

/// 3×3 conv → ReLU → ×patch bilinear upsample → 1×1 conv → logistic.
struct HeatmapHead {
    reduce: Conv2d,
    project: Conv2d,
    upsample: Upsampler,
}

impl HeatmapHead {
    fn forward(&self, features: &Tensor) -> candle_core::Result<Tensor> {
        let h = self.reduce.forward(features)?.relu()?;
        // The 1×1 projection commutes with bilinear upsampling (both linear, and the
        // interpolation weights sum to one), so project first on the coarse grid.
        let logits = self.upsample.forward(&self.project.forward(&h)?)?;
        candle_nn::ops::sigmoid(&logits)
    }
}

pub(crate) struct Encoder {
    patch_embed: Conv2d,
    pos_embed: Tensor,
    blocks: Vec<Block>,
    norm: LayerNorm,
    head: HeatmapHead,
    grid: usize,
    dim: usize,
}

impl Encoder {
    pub fn new(image_size: usize, cfg: &EncoderConfig, vb: VarBuilder) -> Result<Self> {
        let grid = image_size / cfg.patch_size;
        let d = cfg.embed_dim;
        let patch_embed = candle_nn::conv2d(
            3,
            d,
            cfg.patch_size,
            Conv2dConfig {
                stride: cfg.patch_size,
                ..Default::default()
            },
            vb.pp("patch_embed"),
        )?;
        let pos_embed = vb.get_with_hints(
            (1, grid * grid, d),
            "pos_embed",
            Init::Randn {
                mean: 0.0,
                stdev: 0.02,
            },
        )?;
        let blocks = (0..cfg.depth)
            .map(|i| Block::new(d, cfg.heads, cfg.mlp_ratio, vb.pp(format!("blocks.{i}"))))
            .collect::<Result<Vec<_>>>()?;
        let norm = LayerNorm::new(d, vb.pp("norm"))?;
        let hvb = vb.pp("heatmap_head");
        let head = HeatmapHead {
            reduce: candle_nn::conv2d(
                d,
                cfg.head_channels,
                3,
                Conv2dConfig {
                    padding: 1,
                    ..Default::default()
                },
                hvb.pp("reduce"),
            )?,
            project: candle_nn::conv2d(cfg.head_channels, 1, 1, Default::default(), hvb.pp("project"))?,
            upsample: Upsampler::new(grid, grid, image_size, image_size, vb.device())?,
        };
        Ok(Self {
            patch_embed,
            pos_embed,
            blocks,
            norm,
            head,
            grid,
            dim: d,
        })
    }

    /// `(B, 1, H, W)` → `(B, N, d)` embedded patch tokens with positions added.
    pub fn tokens(&self, images: &Tensor) -> candle_core::Result<Tensor> {
        let rgb = Tensor::cat(&[images, images, images], 1)?;
        let x = self.patch_embed.forward(&rgb)?.flatten_from(2)?.transpose(1, 2)?;
        x.broadcast_add(&self.pos_embed)
    }

    /// Normalized token features after every attention block; `(B, N, d)`.
    pub fn features(&self, images: &Tensor) -> candle_core::Result<Tensor> {
        let mut x = self.tokens(images)?;
        for b in &self.blocks {
            x = b.forward(&x)?;
        }
        self.norm.forward(&x)
    }

    pub fn forward(&self, images: &Tensor) -> candle_core::Result<Tensor> {
        let f = self.features(images)?;
        let b = f.dim(0)?;
        let grid = f
            .transpose(1, 2)?
            .reshape((b, self.dim, self.grid, self.grid))?;
        self.head.forward(&grid)
    }
}
