//! Segmentation heads. Every head returns logits upsampled to the network input size.

use crate::backbones::FeaturePyramid;
use crate::error::{param_err, Error, Result};
use crate::layers::{skip_fuse, Conv, ConvBnRelu, Ctx, FuseMode, ParamBuilder};
use crate::tensor::{Conv2dSpec, Element, Graph, Var};

/// Main logits plus any auxiliary logits, all `N x num_classes x H x W`.
#[derive(Clone, Debug, PartialEq)]
pub struct SegOutput {
    pub main: Var,
    pub aux: Vec<Var>,
}

fn classifier<T: Element>(pb: &mut ParamBuilder<T>, in_ch: usize, num_classes: usize) -> Result<Conv> {
    Conv::new(pb, "classifier", in_ch, num_classes, 1, Conv2dSpec::default(), true)
}

fn spatial<T: Element>(g: &Graph<T>, v: Var) -> (usize, usize) {
    let s = g.shape(v);
    (s[2], s[3])
}

/// `conv_bn_relu(3x3) -> 1x1 classifier -> upsample`.
#[derive(Clone, Debug)]
pub struct FcnHead {
    pub conv: ConvBnRelu,
    pub classifier: Conv,
}

impl FcnHead {
    pub fn new<T: Element>(pb: &mut ParamBuilder<T>, name: &str, in_ch: usize, mid_ch: usize, num_classes: usize) -> Result<Self> {
        pb.scope(name, |pb| {
            Ok(Self {
                conv: ConvBnRelu::new(pb, "conv", in_ch, mid_ch, 3, 1, 1)?,
                classifier: classifier(pb, mid_ch, num_classes)?,
            })
        })
    }

    /// Logits at the feature resolution.
    pub fn logits<T: Element>(&self, ctx: &mut Ctx<'_, T>, feat: Var) -> Result<Var> {
        let y = self.conv.forward(ctx, feat)?;
        self.classifier.forward(ctx, y)
    }

    pub fn forward<T: Element>(&self, ctx: &mut Ctx<'_, T>, feat: Var, out: (usize, usize)) -> Result<Var> {
        let y = self.logits(ctx, feat)?;
        ctx.resize(y, out.0, out.1)
    }
}

/// Auxiliary head; identical topology to [`FcnHead`].
pub type AuxHead = FcnHead;

/// Symmetric decoder: upsample, concatenate the matching encoder level, two conv units.
#[derive(Clone, Debug)]
pub struct UNetDecoder {
    pub strides: Vec<usize>,
    pub bottleneck: ConvBnRelu,
    pub stages: Vec<[ConvBnRelu; 2]>,
    pub classifier: Conv,
}

impl UNetDecoder {
    pub fn new<T: Element>(pb: &mut ParamBuilder<T>, levels: &[(usize, usize)], num_classes: usize) -> Result<Self> {
        let Some(&(_, deep_ch)) = levels.last() else {
            return Err(Error::Config("unet decoder needs at least one pyramid level".into()));
        };
        for pair in levels.windows(2) {
            if pair[1].0 != 2 * pair[0].0 {
                return Err(Error::Config(format!(
                    "unet decoder: no encoder level at stride {} to pair with stride {}",
                    2 * pair[0].0,
                    pair[1].0
                )));
            }
        }
        pb.scope("decoder", |pb| {
            let bottleneck = ConvBnRelu::new(pb, "bottleneck", deep_ch, deep_ch, 3, 1, 1)?;
            let mut stages = Vec::new();
            let mut prev = deep_ch;
            for &(stride, ch) in levels.iter().rev().skip(1) {
                let stage = pb.scope(&format!("up{stride}"), |pb| -> Result<_> {
                    Ok([
                        ConvBnRelu::new(pb, "conv1", prev + ch, ch, 3, 1, 1)?,
                        ConvBnRelu::new(pb, "conv2", ch, ch, 3, 1, 1)?,
                    ])
                })?;
                stages.push(stage);
                prev = ch;
            }
            Ok(Self {
                strides: levels.iter().map(|l| l.0).collect(),
                bottleneck,
                stages,
                classifier: classifier(pb, prev, num_classes)?,
            })
        })
    }

    pub fn forward<T: Element>(&self, ctx: &mut Ctx<'_, T>, pyr: &FeaturePyramid, out: (usize, usize)) -> Result<Var> {
        if pyr.strides() != self.strides {
            return Err(Error::Config(format!(
                "unet decoder built for strides {:?} but the pyramid has {:?}",
                self.strides,
                pyr.strides()
            )));
        }
        let mut x = self.bottleneck.forward(ctx, pyr.deepest().1)?;
        for (stage, &(_, enc)) in self.stages.iter().zip(pyr.levels.iter().rev().skip(1)) {
            let (h, w) = spatial(ctx.graph, enc);
            let up = ctx.resize(x, h, w)?;
            let fused = skip_fuse(ctx, up, enc, FuseMode::Concat)?;
            x = stage[0].forward(ctx, fused)?;
            x = stage[1].forward(ctx, x)?;
        }
        let y = self.classifier.forward(ctx, x)?;
        ctx.resize(y, out.0, out.1)
    }
}

/// Pyramid pooling: pooled, projected and re-upsampled branches concatenated with the input.
#[derive(Clone, Debug)]
pub struct Ppm {
    pub bins: Vec<usize>,
    pub branches: Vec<ConvBnRelu>,
}

impl Ppm {
    pub fn new<T: Element>(pb: &mut ParamBuilder<T>, in_ch: usize, bins: &[usize], proj_ch: usize) -> Result<Self> {
        if bins.is_empty() || bins.contains(&0) {
            return param_err(format!("ppm bins must be non-empty and positive, got {bins:?}"));
        }
        pb.scope("ppm", |pb| {
            let branches = bins
                .iter()
                .map(|b| ConvBnRelu::new(pb, &format!("bin{b}"), in_ch, proj_ch, 1, 1, 1))
                .collect::<Result<_>>()?;
            Ok(Self {
                bins: bins.to_vec(),
                branches,
            })
        })
    }

    pub fn out_channels(in_ch: usize, bins: usize, proj_ch: usize) -> usize {
        in_ch + bins * proj_ch
    }

    pub fn forward<T: Element>(&self, ctx: &mut Ctx<'_, T>, feat: Var) -> Result<Var> {
        let (h, w) = spatial(ctx.graph, feat);
        if let Some(&b) = self.bins.iter().find(|&&b| b > h || b > w) {
            return param_err(format!("ppm bin {b} exceeds the {h}x{w} feature"));
        }
        let mut parts = vec![feat];
        for (&b, branch) in self.bins.iter().zip(&self.branches) {
            let p = ctx.graph.adaptive_avg_pool(feat, b, b)?;
            let p = branch.forward(ctx, p)?;
            parts.push(ctx.resize(p, h, w)?);
        }
        ctx.graph.concat(&parts, 1)
    }
}

/// Atrous spatial pyramid pooling.
#[derive(Clone, Debug)]
pub struct Aspp {
    pub rates: Vec<usize>,
    pub conv1x1: ConvBnRelu,
    pub dilated: Vec<ConvBnRelu>,
    pub image_pool: ConvBnRelu,
    pub project: ConvBnRelu,
}

impl Aspp {
    pub fn new<T: Element>(pb: &mut ParamBuilder<T>, in_ch: usize, rates: &[usize], proj_ch: usize) -> Result<Self> {
        if rates.is_empty() || rates.contains(&0) {
            return param_err(format!("aspp rates must be non-empty and positive, got {rates:?}"));
        }
        pb.scope("aspp", |pb| {
            let dilated = rates
                .iter()
                .map(|&r| ConvBnRelu::new(pb, &format!("rate{r}"), in_ch, proj_ch, 3, 1, r))
                .collect::<Result<_>>()?;
            Ok(Self {
                rates: rates.to_vec(),
                conv1x1: ConvBnRelu::new(pb, "conv1x1", in_ch, proj_ch, 1, 1, 1)?,
                dilated,
                image_pool: ConvBnRelu::new(pb, "image_pool", in_ch, proj_ch, 1, 1, 1)?,
                project: ConvBnRelu::new(pb, "project", (2 + rates.len()) * proj_ch, proj_ch, 1, 1, 1)?,
            })
        })
    }

    pub fn branch_count(&self) -> usize {
        2 + self.rates.len()
    }

    /// The concatenated branch outputs before projection.
    pub fn branches<T: Element>(&self, ctx: &mut Ctx<'_, T>, feat: Var) -> Result<Var> {
        let (h, w) = spatial(ctx.graph, feat);
        if let Some(&r) = self.rates.iter().find(|&&r| r >= h || r >= w) {
            return Err(Error::Geometry(format!(
                "aspp rate {r} (extent {}) reaches past the {h}x{w} feature: its off-centre taps would read only padding",
                2 * r + 1
            )));
        }
        let mut parts = vec![self.conv1x1.forward(ctx, feat)?];
        for branch in &self.dilated {
            parts.push(branch.forward(ctx, feat)?);
        }
        let pooled = ctx.graph.adaptive_avg_pool(feat, 1, 1)?;
        let pooled = self.image_pool.forward(ctx, pooled)?;
        parts.push(ctx.resize(pooled, h, w)?);
        ctx.graph.concat(&parts, 1)
    }

    pub fn forward<T: Element>(&self, ctx: &mut Ctx<'_, T>, feat: Var) -> Result<Var> {
        let cat = self.branches(ctx, feat)?;
        self.project.forward(ctx, cat)
    }
}

/// Context module followed by a 3x3 conv unit and a classifier: PSPNet or DeepLabV3.
#[derive(Clone, Debug)]
pub enum ContextModule {
    Ppm(Ppm),
    Aspp(Aspp),
}

#[derive(Clone, Debug)]
pub struct ContextHead {
    pub module: ContextModule,
    pub head: FcnHead,
}

impl ContextHead {
    pub fn forward<T: Element>(&self, ctx: &mut Ctx<'_, T>, feat: Var, out: (usize, usize)) -> Result<Var> {
        let y = match &self.module {
            ContextModule::Ppm(m) => m.forward(ctx, feat)?,
            ContextModule::Aspp(m) => m.forward(ctx, feat)?,
        };
        self.head.forward(ctx, y, out)
    }
}

/// ASPP on the deepest feature fused with a reduced low-level feature.
#[derive(Clone, Debug)]
pub struct DeepLabV3pDecoder {
    pub aspp: Aspp,
    pub low_level_stride: usize,
    pub reduce: ConvBnRelu,
    pub fuse: [ConvBnRelu; 2],
    pub classifier: Conv,
}

impl DeepLabV3pDecoder {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Element>(
        pb: &mut ParamBuilder<T>,
        levels: &[(usize, usize)],
        low_level_stride: usize,
        rates: &[usize],
        aspp_ch: usize,
        low_ch: usize,
        dec_ch: usize,
        num_classes: usize,
    ) -> Result<Self> {
        let &(deep_stride, deep_ch) = levels.last().expect("backbone levels");
        let Some(&(_, low_in)) = levels.iter().find(|l| l.0 == low_level_stride) else {
            return Err(Error::Config(format!(
                "deeplabv3p: backbone has no level at low_level_stride {low_level_stride} (levels at {:?})",
                levels.iter().map(|l| l.0).collect::<Vec<_>>()
            )));
        };
        if low_level_stride >= deep_stride {
            return Err(Error::Config(format!(
                "deeplabv3p: low_level_stride {low_level_stride} must be finer than the deepest stride {deep_stride}"
            )));
        }
        let aspp = Aspp::new(pb, deep_ch, rates, aspp_ch)?;
        pb.scope("decoder", |pb| {
            Ok(Self {
                aspp,
                low_level_stride,
                reduce: ConvBnRelu::new(pb, "reduce", low_in, low_ch, 1, 1, 1)?,
                fuse: [
                    ConvBnRelu::new(pb, "fuse1", aspp_ch + low_ch, dec_ch, 3, 1, 1)?,
                    ConvBnRelu::new(pb, "fuse2", dec_ch, dec_ch, 3, 1, 1)?,
                ],
                classifier: classifier(pb, dec_ch, num_classes)?,
            })
        })
    }

    pub fn forward<T: Element>(&self, ctx: &mut Ctx<'_, T>, pyr: &FeaturePyramid, out: (usize, usize)) -> Result<Var> {
        let low = pyr.at_stride(self.low_level_stride).ok_or_else(|| {
            Error::Config(format!(
                "deeplabv3p: pyramid has no level at stride {} (has {:?})",
                self.low_level_stride,
                pyr.strides()
            ))
        })?;
        let a = self.aspp.forward(ctx, pyr.deepest().1)?;
        let low = self.reduce.forward(ctx, low)?;
        self.decode(ctx, a, low, out)
    }

    /// Fuse an ASPP output with an already reduced low-level feature.
    pub fn decode<T: Element>(&self, ctx: &mut Ctx<'_, T>, aspp_out: Var, low: Var, out: (usize, usize)) -> Result<Var> {
        let (h, w) = spatial(ctx.graph, low);
        let up = ctx.resize(aspp_out, h, w)?;
        let x = skip_fuse(ctx, up, low, FuseMode::Concat)?;
        let x = self.fuse[0].forward(ctx, x)?;
        let x = self.fuse[1].forward(ctx, x)?;
        let y = self.classifier.forward(ctx, x)?;
        ctx.resize(y, out.0, out.1)
    }
}

/// `(N, K, C)` class-region vectors: features averaged under a per-class spatial softmax.
pub fn region_representation<T: Element>(g: &mut Graph<T>, soft: Var, feat: Var) -> Result<Var> {
    let (s, f) = (g.shape(soft).to_vec(), g.shape(feat).to_vec());
    if s.len() != 4 || f.len() != 4 || s[0] != f[0] || s[2..] != f[2..] {
        return Err(Error::Shape(format!("soft regions {s:?} and features {f:?} must share N, H and W")));
    }
    let (n, k, c, p) = (s[0], s[1], f[1], s[2] * s[3]);
    let soft = g.reshape(soft, &[n, k, p])?;
    let weights = g.softmax(soft, 2)?;
    let feat = g.reshape(feat, &[n, c, p])?;
    let feat_t = g.transpose_last2(feat)?;
    g.matmul(weights, feat_t)
}

/// Scaled dot-product attention of pixels over regions.
///
/// `queries` is `(N, P, D)`, `keys` `(N, D, K)` and `values` `(N, K, C)`. Returns the
/// attended context `(N, P, C)` and the attention weights `(N, P, K)`.
pub fn ocr_attention<T: Element>(g: &mut Graph<T>, queries: Var, keys: Var, values: Var, scale: f64) -> Result<(Var, Var)> {
    let logits = g.matmul(queries, keys)?;
    let logits = g.mul_scalar(logits, T::lit(scale));
    let rank = g.shape(logits).len();
    let weights = g.softmax(logits, rank - 1)?;
    let context = g.matmul(weights, values)?;
    Ok((context, weights))
}

/// Object-contextual representation head.
#[derive(Clone, Debug)]
pub struct OcrHead {
    pub num_classes: usize,
    pub key_ch: usize,
    pub soft_regions: FcnHead,
    pub pixel: ConvBnRelu,
    pub query: ConvBnRelu,
    pub key: Conv,
    pub fuse: ConvBnRelu,
    pub classifier: Conv,
}

impl OcrHead {
    pub fn new<T: Element>(pb: &mut ParamBuilder<T>, in_ch: usize, mid_ch: usize, key_ch: usize, num_classes: usize) -> Result<Self> {
        pb.scope("ocr", |pb| {
            Ok(Self {
                num_classes,
                key_ch,
                soft_regions: FcnHead::new(pb, "soft_regions", in_ch, mid_ch, num_classes)?,
                pixel: ConvBnRelu::new(pb, "pixel", in_ch, mid_ch, 3, 1, 1)?,
                query: ConvBnRelu::new(pb, "query", mid_ch, key_ch, 1, 1, 1)?,
                key: Conv::new(pb, "key", mid_ch, key_ch, 1, Conv2dSpec::default(), false)?,
                fuse: ConvBnRelu::new(pb, "fuse", 2 * mid_ch, mid_ch, 1, 1, 1)?,
                classifier: classifier(pb, mid_ch, num_classes)?,
            })
        })
    }

    /// Main logits and the soft-region logits, both at full resolution.
    pub fn forward<T: Element>(&self, ctx: &mut Ctx<'_, T>, feat: Var, out: (usize, usize)) -> Result<(Var, Var)> {
        let soft = self.soft_regions.logits(ctx, feat)?;
        let pixel = self.pixel.forward(ctx, feat)?;
        let main = self.contextual(ctx, pixel, soft, out)?;
        let aux = ctx.resize(soft, out.0, out.1)?;
        Ok((main, aux))
    }

    /// Steps after the soft regions: region pooling, pixel-region attention and fusion.
    pub fn contextual<T: Element>(&self, ctx: &mut Ctx<'_, T>, pixel: Var, soft: Var, out: (usize, usize)) -> Result<Var> {
        let k = ctx.graph.shape(soft)[1];
        if k != self.num_classes {
            return Err(Error::Config(format!(
                "ocr: soft regions have {k} channels but the head predicts {} classes",
                self.num_classes
            )));
        }
        let [n, c, h, w] = <[usize; 4]>::try_from(ctx.graph.shape(pixel)).map_err(|_| Error::Shape("ocr pixel features must be rank 4".into()))?;
        let p = h * w;
        let regions = region_representation(ctx.graph, soft, pixel)?;

        let q = self.query.forward(ctx, pixel)?;
        let q = ctx.graph.reshape(q, &[n, self.key_ch, p])?;
        let q = ctx.graph.transpose_last2(q)?;

        let r = ctx.graph.transpose_last2(regions)?;
        let r = ctx.graph.reshape(r, &[n, c, k, 1])?;
        let keys = self.key.forward(ctx, r)?;
        let keys = ctx.graph.relu(keys);
        let keys = ctx.graph.reshape(keys, &[n, self.key_ch, k])?;

        let scale = 1.0 / (self.key_ch as f64).sqrt();
        let (context, _) = ocr_attention(ctx.graph, q, keys, regions, scale)?;
        let context = ctx.graph.transpose_last2(context)?;
        let context = ctx.graph.reshape(context, &[n, c, h, w])?;
        let fused = skip_fuse(ctx, context, pixel, FuseMode::Concat)?;
        let fused = self.fuse.forward(ctx, fused)?;
        let y = self.classifier.forward(ctx, fused)?;
        ctx.resize(y, out.0, out.1)
    }
}
