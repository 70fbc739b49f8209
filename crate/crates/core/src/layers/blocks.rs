use super::{Ctx, ParamBuilder, ParamId, ParamStore};
use crate::error::{param_err, Error, Result};
use crate::tensor::{BnConfig, BnStats, Conv2dSpec, Element, Var};

/// Plain convolution with an optional bias.
#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub spec: Conv2dSpec,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Element>(
        pb: &mut ParamBuilder<T>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        k: usize,
        spec: Conv2dSpec,
        bias: bool,
    ) -> Result<Self> {
        if in_ch == 0 || out_ch == 0 || k == 0 {
            return param_err(format!("conv '{}' needs positive channels and kernel", pb.path(name)));
        }
        if in_ch % spec.groups != 0 || out_ch % spec.groups != 0 {
            return param_err(format!(
                "conv '{}': channels {in_ch}->{out_ch} not divisible by groups {}",
                pb.path(name),
                spec.groups
            ));
        }
        pb.scope(name, |pb| {
            let weight = pb.conv_weight("weight", [out_ch, in_ch / spec.groups, k, k])?;
            let bias = if bias {
                Some(pb.constant("bias", &[out_ch], 0.0, true)?)
            } else {
                None
            };
            Ok(Self { weight, bias, spec })
        })
    }

    pub fn forward<T: Element>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let w = ctx.param(self.weight);
        let b = self.bias.map(|b| ctx.param(b));
        ctx.graph.conv2d(x, w, b, self.spec)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm {
    pub fn new<T: Element>(pb: &mut ParamBuilder<T>, name: &str, channels: usize) -> Result<Self> {
        pb.scope(name, |pb| {
            Ok(Self {
                gamma: pb.constant("gamma", &[channels], 1.0, true)?,
                beta: pb.constant("beta", &[channels], 0.0, true)?,
                running_mean: pb.constant("running_mean", &[channels], 0.0, false)?,
                running_var: pb.constant("running_var", &[channels], 1.0, false)?,
            })
        })
    }

    pub fn forward<T: Element>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let gamma = ctx.param(self.gamma);
        let beta = ctx.param(self.beta);
        let mut mean = ctx.params.tensor(self.running_mean).data().to_vec();
        let mut var = ctx.params.tensor(self.running_var).data().to_vec();
        let cfg = BnConfig {
            training: ctx.train,
            momentum: ctx.bn.momentum,
            epsilon: ctx.bn.epsilon,
        };
        let y = ctx.graph.batch_norm(
            x,
            gamma,
            beta,
            BnStats {
                mean: &mut mean,
                var: &mut var,
            },
            cfg,
        )?;
        if ctx.train {
            ctx.params.tensor_mut(self.running_mean).data_mut().copy_from_slice(&mean);
            ctx.params.tensor_mut(self.running_var).data_mut().copy_from_slice(&var);
        }
        Ok(y)
    }
}

/// `relu(bn(conv(x)))` with "same" padding for odd kernels.
#[derive(Clone, Debug)]
pub struct ConvBnRelu {
    pub conv: Conv,
    pub bn: BatchNorm,
    pub relu: bool,
    prefix: String,
}

impl ConvBnRelu {
    pub fn new<T: Element>(
        pb: &mut ParamBuilder<T>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        k: usize,
        stride: usize,
        dilation: usize,
    ) -> Result<Self> {
        Self::build(pb, name, in_ch, out_ch, k, stride, dilation, true)
    }

    /// Conv + BN without the trailing activation.
    pub fn conv_bn<T: Element>(
        pb: &mut ParamBuilder<T>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        k: usize,
        stride: usize,
        dilation: usize,
    ) -> Result<Self> {
        Self::build(pb, name, in_ch, out_ch, k, stride, dilation, false)
    }

    #[allow(clippy::too_many_arguments)]
    fn build<T: Element>(
        pb: &mut ParamBuilder<T>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        k: usize,
        stride: usize,
        dilation: usize,
        relu: bool,
    ) -> Result<Self> {
        if k % 2 == 0 {
            return param_err(format!(
                "conv_bn_relu '{}': kernel {k} is even; same-padding needs an odd kernel",
                pb.path(name)
            ));
        }
        if stride == 0 || dilation == 0 {
            return param_err(format!("conv_bn_relu '{}': stride and dilation must be >= 1", pb.path(name)));
        }
        let prefix = pb.path(name);
        pb.scope(name, |pb| {
            let spec = Conv2dSpec {
                stride,
                padding: dilation * (k - 1) / 2,
                dilation,
                groups: 1,
            };
            Ok(Self {
                conv: Conv::new(pb, "conv", in_ch, out_ch, k, spec, false)?,
                bn: BatchNorm::new(pb, "bn", out_ch)?,
                relu,
                prefix,
            })
        })
    }

    pub fn forward<T: Element>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let y = self.conv.forward(ctx, x)?;
        let y = self.bn.forward(ctx, y)?;
        Ok(if self.relu { ctx.graph.relu(y) } else { y })
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    pub fn param_count<T: Element>(&self, store: &ParamStore<T>) -> usize {
        store.numel_with_prefix(&format!("{}.", self.prefix))
    }
}

/// `relu(F(x) + shortcut(x))` with `F` two 3x3 conv-bn units.
#[derive(Clone, Debug)]
pub struct ResidualBlock {
    pub conv1: ConvBnRelu,
    pub conv2: ConvBnRelu,
    pub shortcut: Option<ConvBnRelu>,
    prefix: String,
}

impl ResidualBlock {
    pub fn new<T: Element>(
        pb: &mut ParamBuilder<T>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        stride: usize,
        dilation: usize,
    ) -> Result<Self> {
        Self::with_projection(pb, name, in_ch, out_ch, stride, dilation, in_ch != out_ch || stride != 1)
    }

    /// Like [`ResidualBlock::new`] but with the projection decision made by the caller,
    /// so a stage keeps its parameter layout when dilation replaces striding.
    pub fn with_projection<T: Element>(
        pb: &mut ParamBuilder<T>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        stride: usize,
        dilation: usize,
        project: bool,
    ) -> Result<Self> {
        if !project && (in_ch != out_ch || stride != 1) {
            return Err(Error::Param(format!(
                "residual block '{}' changes shape ({in_ch}->{out_ch}, stride {stride}) and needs a projection",
                pb.path(name)
            )));
        }
        let prefix = pb.path(name);
        pb.scope(name, |pb| {
            Ok(Self {
                conv1: ConvBnRelu::new(pb, "conv1", in_ch, out_ch, 3, stride, dilation)?,
                conv2: ConvBnRelu::conv_bn(pb, "conv2", out_ch, out_ch, 3, 1, dilation)?,
                shortcut: if project {
                    Some(ConvBnRelu::conv_bn(pb, "shortcut", in_ch, out_ch, 1, stride, 1)?)
                } else {
                    None
                },
                prefix,
            })
        })
    }

    pub fn forward<T: Element>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let y = self.conv1.forward(ctx, x)?;
        let y = self.conv2.forward(ctx, y)?;
        let s = match &self.shortcut {
            Some(proj) => proj.forward(ctx, x)?,
            None => x,
        };
        let sum = ctx.graph.add(y, s)?;
        Ok(ctx.graph.relu(sum))
    }

    pub fn param_count<T: Element>(&self, store: &ParamStore<T>) -> usize {
        store.numel_with_prefix(&format!("{}.", self.prefix))
    }
}

/// Depthwise `k x k` convolution followed by a pointwise `1 x 1` convolution, no bias.
#[derive(Clone, Debug)]
pub struct SeparableConv {
    pub depthwise: Conv,
    pub pointwise: Conv,
    prefix: String,
}

impl SeparableConv {
    pub fn new<T: Element>(
        pb: &mut ParamBuilder<T>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        k: usize,
        dilation: usize,
    ) -> Result<Self> {
        if k % 2 == 0 {
            return param_err(format!("separable_conv '{}': kernel {k} must be odd", pb.path(name)));
        }
        let prefix = pb.path(name);
        pb.scope(name, |pb| {
            let dw = Conv2dSpec {
                stride: 1,
                padding: dilation * (k - 1) / 2,
                dilation,
                groups: in_ch,
            };
            Ok(Self {
                depthwise: Conv::new(pb, "depthwise", in_ch, in_ch, k, dw, false)?,
                pointwise: Conv::new(pb, "pointwise", in_ch, out_ch, 1, Conv2dSpec::default(), false)?,
                prefix,
            })
        })
    }

    pub fn forward<T: Element>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let y = self.depthwise.forward(ctx, x)?;
        self.pointwise.forward(ctx, y)
    }

    pub fn param_count<T: Element>(&self, store: &ParamStore<T>) -> usize {
        store.numel_with_prefix(&format!("{}.", self.prefix))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FuseMode {
    Concat,
    Add,
}

/// Merge an (already upsampled) decoder feature with an encoder feature.
pub fn skip_fuse<T: Element>(ctx: &mut Ctx<'_, T>, decoder: Var, encoder: Var, mode: FuseMode) -> Result<Var> {
    let (d, e) = (ctx.graph.shape(decoder).to_vec(), ctx.graph.shape(encoder).to_vec());
    if d.len() != 4 || e.len() != 4 {
        return Err(Error::Shape(format!("skip_fuse needs N x C x H x W features, got {d:?} and {e:?}")));
    }
    if d[0] != e[0] || d[2..] != e[2..] {
        return Err(Error::Shape(format!(
            "skip_fuse: decoder feature {d:?} and encoder feature {e:?} differ spatially; upsample the decoder feature to {}x{} first",
            e[2], e[3]
        )));
    }
    match mode {
        FuseMode::Concat => ctx.graph.concat_channel(decoder, encoder),
        FuseMode::Add => {
            if d != e {
                return Err(Error::Shape(format!("skip_fuse add needs equal shapes, got {d:?} and {e:?}")));
            }
            ctx.graph.add(decoder, encoder)
        }
    }
}
