//! Finer learner: a residual network over the single-channel heatmap that
//! regresses `max_tips` coordinates.

use candle_core::{Module, Tensor};
use candle_nn::{Conv2d, Conv2dConfig, Linear, VarBuilder};

use super::DecoderConfig;
use crate::error::{Error, Result};
use crate::nn::{max_pool_3x3_s2, BatchNorm2d, ParamStore};

fn conv(cin: usize, cout: usize, k: usize, stride: usize, padding: usize, vb: VarBuilder) -> Result<Conv2d> {
    Ok(candle_nn::conv2d_no_bias(
        cin,
        cout,
        k,
        Conv2dConfig {
            stride,
            padding,
            ..Default::default()
        },
        vb,
    )?)
}

struct BasicBlock {
    conv1: Conv2d,
    bn1: BatchNorm2d,
    conv2: Conv2d,
    bn2: BatchNorm2d,
    downsample: Option<(Conv2d, BatchNorm2d)>,
}

impl BasicBlock {
    fn new(cin: usize, cout: usize, stride: usize, store: &ParamStore, vb: VarBuilder) -> Result<Self> {
        let downsample = if stride != 1 || cin != cout {
            Some((
                conv(cin, cout, 1, stride, 0, vb.pp("downsample.0"))?,
                BatchNorm2d::new(cout, store, vb.pp("downsample.1"))?,
            ))
        } else {
            None
        };
        Ok(Self {
            conv1: conv(cin, cout, 3, stride, 1, vb.pp("conv1"))?,
            bn1: BatchNorm2d::new(cout, store, vb.pp("bn1"))?,
            conv2: conv(cout, cout, 3, 1, 1, vb.pp("conv2"))?,
            bn2: BatchNorm2d::new(cout, store, vb.pp("bn2"))?,
            downsample,
        })
    }

    fn forward_t(&self, x: &Tensor, train: bool) -> candle_core::Result<Tensor> {
        let h = self.bn1.forward_t(&self.conv1.forward(x)?, train)?.relu()?;
        let h = self.bn2.forward_t(&self.conv2.forward(&h)?, train)?;
        let skip = match &self.downsample {
            Some((c, bn)) => bn.forward_t(&c.forward(x)?, train)?,
            None => x.clone(),
        };
        (h + skip)?.relu()
    }
}

/// Blocks per stage for the supported depths.
pub(crate) fn stage_layout(depth: usize) -> Result<[usize; 4]> {
    match depth {
        10 => Ok([1, 1, 1, 1]),
        18 => Ok([2, 2, 2, 2]),
        34 => Ok([3, 4, 6, 3]),
        other => Err(Error::config(
            "decoder.residual_depth",
            format!("{other} is not one of 10, 18, 34"),
        )),
    }
}

pub(crate) struct Decoder {
    stem: Conv2d,
    stem_bn: BatchNorm2d,
    stages: Vec<Vec<BasicBlock>>,
    fc: Linear,
    max_tips: usize,
    output_scale: f64,
}

impl Decoder {
    pub fn new(in_channels: usize, cfg: &DecoderConfig, store: &ParamStore, vb: VarBuilder) -> Result<Self> {
        let w = cfg.base_width;
        let layout = stage_layout(cfg.residual_depth)?;
        let stem = conv(in_channels, w, 7, 2, 3, vb.pp("conv1"))?;
        let stem_bn = BatchNorm2d::new(w, store, vb.pp("bn1"))?;
        let mut stages = Vec::with_capacity(4);
        let mut cin = w;
        for (s, &blocks) in layout.iter().enumerate() {
            let cout = w << s;
            let stride = if s == 0 { 1 } else { 2 };
            let svb = vb.pp(format!("layer{}", s + 1));
            let stage = (0..blocks)
                .map(|b| {
                    let (bin, bstride) = if b == 0 { (cin, stride) } else { (cout, 1) };
                    BasicBlock::new(bin, cout, bstride, store, svb.pp(b))
                })
                .collect::<Result<Vec<_>>>()?;
            stages.push(stage);
            cin = cout;
        }
        let fc = candle_nn::linear(cin, 2 * cfg.max_tips, vb.pp("fc"))?;
        Ok(Self {
            stem,
            stem_bn,
            stages,
            fc,
            max_tips: cfg.max_tips,
            output_scale: cfg.output_scale,
        })
    }

    /// `(B, C, H, W)` → `(B, max_tips, 2)` pixel coordinates in `[0, output_scale]`.
    pub fn forward_t(&self, x: &Tensor, train: bool) -> candle_core::Result<Tensor> {
        let b = x.dim(0)?;
        let h = self.stem_bn.forward_t(&self.stem.forward(x)?, train)?.relu()?;
        // Zero padding is equivalent to -inf padding after a ReLU.
        let mut h = max_pool_3x3_s2(&h)?;
        for stage in &self.stages {
            for block in stage {
                h = block.forward_t(&h, train)?;
            }
        }
        let pooled = h.mean(3)?.mean(2)?;
        let raw = self.fc.forward(&pooled)?;
        (candle_nn::ops::sigmoid(&raw)? * self.output_scale)?.reshape((b, self.max_tips, 2))
    }
}
