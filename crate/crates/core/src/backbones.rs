//! Feature extractors producing a multi-level pyramid.

use crate::error::{param_err, Error, Result};
use crate::layers::{ConvBnRelu, Ctx, ParamBuilder, ResidualBlock};
use crate::tensor::{Element, PoolMode, Var};

/// Features at strictly increasing power-of-two strides.
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePyramid {
    pub levels: Vec<(usize, Var)>,
}

impl FeaturePyramid {
    pub fn strides(&self) -> Vec<usize> {
        self.levels.iter().map(|l| l.0).collect()
    }

    pub fn deepest(&self) -> (usize, Var) {
        *self.levels.last().expect("pyramid has levels")
    }

    /// The level one above the deepest, or the deepest itself for single-level pyramids.
    pub fn second_deepest(&self) -> (usize, Var) {
        let n = self.levels.len();
        self.levels[n.saturating_sub(2)]
    }

    pub fn at_stride(&self, stride: usize) -> Option<Var> {
        self.levels.iter().find(|l| l.0 == stride).map(|l| l.1)
    }
}

/// Stack of `conv_bn_relu x2 + 2x2 pool` stages.
#[derive(Clone, Debug)]
pub struct TinyVgg {
    pub widths: Vec<usize>,
    pub pool: PoolMode,
    stages: Vec<[ConvBnRelu; 2]>,
}

impl TinyVgg {
    pub fn new<T: Element>(pb: &mut ParamBuilder<T>, widths: &[usize], pool: PoolMode) -> Result<Self> {
        if !(3..=5).contains(&widths.len()) {
            return param_err(format!("tiny_vgg needs 3 to 5 stage widths, got {}", widths.len()));
        }
        if widths.contains(&0) {
            return param_err("tiny_vgg widths must be positive");
        }
        let mut stages = Vec::new();
        let mut cin = 3;
        for (i, &w) in widths.iter().enumerate() {
            let stage = pb.scope(&format!("stage{}", i + 1), |pb| -> Result<_> {
                Ok([
                    ConvBnRelu::new(pb, "conv1", cin, w, 3, 1, 1)?,
                    ConvBnRelu::new(pb, "conv2", w, w, 3, 1, 1)?,
                ])
            })?;
            stages.push(stage);
            cin = w;
        }
        Ok(Self {
            widths: widths.to_vec(),
            pool,
            stages,
        })
    }

    /// Closed-form trainable parameter count.
    pub fn expected_params(widths: &[usize]) -> usize {
        let mut cin = 3;
        let mut total = 0;
        for &w in widths {
            total += w * cin * 9 + 2 * w + w * w * 9 + 2 * w;
            cin = w;
        }
        total
    }

    pub fn levels(&self) -> Vec<(usize, usize)> {
        (1..self.widths.len()).map(|i| (1 << (i + 1), self.widths[i])).collect()
    }

    pub fn output_stride(&self) -> usize {
        1 << self.widths.len()
    }

    fn forward<T: Element>(&self, ctx: &mut Ctx<'_, T>, image: Var) -> Result<FeaturePyramid> {
        let mut x = image;
        let mut levels = Vec::new();
        for (i, [a, b]) in self.stages.iter().enumerate() {
            x = a.forward(ctx, x)?;
            x = b.forward(ctx, x)?;
            x = ctx.graph.pool2d_ceil(x, self.pool, 2, 2)?;
            if i >= 1 {
                levels.push((1 << (i + 1), x));
            }
        }
        Ok(FeaturePyramid { levels })
    }
}

/// Strided stem followed by four stages of two residual blocks each, with dilation
/// replacing striding beyond the requested output stride.
#[derive(Clone, Debug)]
pub struct TinyResNet {
    pub widths: Vec<usize>,
    pub output_stride: usize,
    stem: ConvBnRelu,
    stages: Vec<[ResidualBlock; 2]>,
    /// Cumulative stride after each stage.
    stage_strides: Vec<usize>,
}

impl TinyResNet {
    pub fn new<T: Element>(pb: &mut ParamBuilder<T>, widths: &[usize], output_stride: usize) -> Result<Self> {
        if widths.len() != 4 || widths.contains(&0) {
            return param_err(format!("tiny_resnet needs 4 positive stage widths, got {widths:?}"));
        }
        if ![8, 16, 32].contains(&output_stride) {
            return param_err(format!("tiny_resnet output_stride must be 8, 16 or 32, got {output_stride}"));
        }
        let stem = ConvBnRelu::new(pb, "stem", 3, widths[0], 3, 2, 1)?;
        let mut stages = Vec::new();
        let mut stage_strides = Vec::new();
        let (mut cin, mut total, mut dilation) = (widths[0], 4, 1);
        for (i, &w) in widths.iter().enumerate() {
            let nominal = if i == 0 { 1 } else { 2 };
            let stride = if total * nominal > output_stride {
                dilation *= nominal;
                1
            } else {
                total *= nominal;
                nominal
            };
            let project = cin != w || nominal != 1;
            let stage = pb.scope(&format!("stage{}", i + 1), |pb| -> Result<_> {
                Ok([
                    ResidualBlock::with_projection(pb, "block1", cin, w, stride, dilation, project)?,
                    ResidualBlock::with_projection(pb, "block2", w, w, 1, dilation, false)?,
                ])
            })?;
            stages.push(stage);
            stage_strides.push(total);
            cin = w;
        }
        Ok(Self {
            widths: widths.to_vec(),
            output_stride,
            stem,
            stages,
            stage_strides,
        })
    }

    pub fn levels(&self) -> Vec<(usize, usize)> {
        let mut out: Vec<(usize, usize)> = Vec::new();
        for (&s, &w) in self.stage_strides.iter().zip(&self.widths) {
            match out.last_mut() {
                Some(last) if last.0 == s => *last = (s, w),
                _ => out.push((s, w)),
            }
        }
        out
    }

    /// Dilation rate used by each stage.
    pub fn stage_dilations(&self) -> Vec<usize> {
        self.stages.iter().map(|s| s[0].conv1.conv.spec.dilation).collect()
    }

    fn forward<T: Element>(&self, ctx: &mut Ctx<'_, T>, image: Var) -> Result<FeaturePyramid> {
        let x = self.stem.forward(ctx, image)?;
        let mut x = ctx.graph.pool2d(x, PoolMode::Max, 3, 2, 1)?;
        let mut levels: Vec<(usize, Var)> = Vec::new();
        for (stage, &s) in self.stages.iter().zip(&self.stage_strides) {
            x = stage[0].forward(ctx, x)?;
            x = stage[1].forward(ctx, x)?;
            match levels.last_mut() {
                Some(last) if last.0 == s => last.1 = x,
                _ => levels.push((s, x)),
            }
        }
        Ok(FeaturePyramid { levels })
    }
}

#[derive(Clone, Debug)]
pub enum Backbone {
    TinyVgg(TinyVgg),
    TinyResNet(TinyResNet),
}

impl Backbone {
    pub fn name(&self) -> &'static str {
        match self {
            Backbone::TinyVgg(_) => "tiny_vgg",
            Backbone::TinyResNet(_) => "tiny_resnet",
        }
    }

    /// `(stride, channels)` of each emitted level, shallow to deep.
    pub fn levels(&self) -> Vec<(usize, usize)> {
        match self {
            Backbone::TinyVgg(b) => b.levels(),
            Backbone::TinyResNet(b) => b.levels(),
        }
    }

    pub fn output_stride(&self) -> usize {
        match self {
            Backbone::TinyVgg(b) => b.output_stride(),
            Backbone::TinyResNet(b) => b.output_stride,
        }
    }

    pub fn forward<T: Element>(&self, ctx: &mut Ctx<'_, T>, image: Var) -> Result<FeaturePyramid> {
        let shape = ctx.graph.shape(image).to_vec();
        let os = self.output_stride();
        match shape[..] {
            [_, 3, h, w] if h >= os && w >= os => {}
            [_, 3, h, w] => {
                return Err(Error::Geometry(format!(
                    "{} input {h}x{w} is smaller than its output stride {os}",
                    self.name()
                )))
            }
            _ => {
                return Err(Error::Shape(format!(
                    "{} expects an N x 3 x H x W image, got {shape:?}",
                    self.name()
                )))
            }
        }
        match self {
            Backbone::TinyVgg(b) => b.forward(ctx, image),
            Backbone::TinyResNet(b) => b.forward(ctx, image),
        }
    }
}
