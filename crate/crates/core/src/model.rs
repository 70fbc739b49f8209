//! Backbone + head assemblies and their construction specs.

use crate::backbones::{Backbone, TinyResNet, TinyVgg};
use crate::error::{param_err, Error, Result};
use crate::heads::{
    AuxHead, ContextHead, ContextModule, DeepLabV3pDecoder, FcnHead, OcrHead, Ppm, SegOutput, UNetDecoder, Aspp,
};
use crate::layers::{Ctx, ParamBuilder, ParamStore};
use crate::tensor::{Element, Graph, Mode, PoolMode, Tensor, Var};

/// The six shipped architectures.
pub const MODEL_NAMES: [&str; 6] = ["fcn", "unet", "pspnet", "deeplabv3", "deeplabv3p", "ocrnet"];

#[derive(Clone, Debug, PartialEq)]
pub enum BackboneSpec {
    TinyVgg { widths: Vec<usize>, pool: PoolMode },
    TinyResNet { widths: Vec<usize>, output_stride: usize },
}

impl BackboneSpec {
    pub fn tiny_vgg() -> Self {
        BackboneSpec::TinyVgg {
            widths: vec![16, 32, 64, 128],
            pool: PoolMode::Max,
        }
    }

    pub fn tiny_resnet(output_stride: usize) -> Self {
        BackboneSpec::TinyResNet {
            widths: vec![16, 32, 64, 128],
            output_stride,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            BackboneSpec::TinyVgg { .. } => "tiny_vgg",
            BackboneSpec::TinyResNet { .. } => "tiny_resnet",
        }
    }

    pub fn build<T: Element>(&self, pb: &mut ParamBuilder<T>) -> Result<Backbone> {
        pb.scope("backbone", |pb| {
            Ok(match self {
                BackboneSpec::TinyVgg { widths, pool } => Backbone::TinyVgg(TinyVgg::new(pb, widths, *pool)?),
                BackboneSpec::TinyResNet { widths, output_stride } => {
                    Backbone::TinyResNet(TinyResNet::new(pb, widths, *output_stride)?)
                }
            })
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum HeadSpec {
    Fcn,
    UNet,
    Psp { bins: Vec<usize>, proj_ch: Option<usize> },
    DeepLabV3 { rates: Vec<usize> },
    DeepLabV3p { rates: Vec<usize>, low_level_stride: usize, low_ch: usize },
    Ocr { key_ch: usize },
}

/// Everything needed to build a [`SegModel`] deterministically from a seed.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelSpec {
    pub name: String,
    pub num_classes: usize,
    pub backbone: BackboneSpec,
    pub head: HeadSpec,
    /// Width of the head's internal conv units.
    pub head_ch: usize,
    pub aux: bool,
    pub align_corners: bool,
}

impl ModelSpec {
    /// Defaults for one of [`MODEL_NAMES`].
    pub fn preset(name: &str, num_classes: usize) -> Result<Self> {
        let (backbone, head, aux) = match name {
            "fcn" => (BackboneSpec::tiny_resnet(8), HeadSpec::Fcn, false),
            "unet" => (BackboneSpec::tiny_vgg(), HeadSpec::UNet, false),
            "pspnet" => (
                BackboneSpec::tiny_resnet(8),
                HeadSpec::Psp {
                    bins: vec![1, 2, 3, 6],
                    proj_ch: None,
                },
                true,
            ),
            "deeplabv3" => (BackboneSpec::tiny_resnet(8), HeadSpec::DeepLabV3 { rates: vec![1, 2, 3] }, false),
            "deeplabv3p" => (
                BackboneSpec::tiny_resnet(16),
                HeadSpec::DeepLabV3p {
                    rates: vec![1, 2, 3],
                    low_level_stride: 4,
                    low_ch: 16,
                },
                false,
            ),
            "ocrnet" => (BackboneSpec::tiny_resnet(8), HeadSpec::Ocr { key_ch: 32 }, false),
            other => return Err(Error::Registry(format!("no preset for model '{other}'"))),
        };
        Ok(Self {
            name: name.to_string(),
            num_classes,
            backbone,
            head,
            head_ch: 64,
            aux,
            align_corners: false,
        })
    }
}

#[derive(Clone, Debug)]
enum Head {
    Fcn(FcnHead),
    UNet(UNetDecoder),
    Context(ContextHead),
    DeepLabV3p(DeepLabV3pDecoder),
    Ocr(OcrHead),
}

/// A complete segmentation network with its parameters.
#[derive(Clone, Debug)]
pub struct SegModel<T: Element = f32> {
    spec: ModelSpec,
    pub params: ParamStore<T>,
    backbone: Backbone,
    head: Head,
    aux: Option<AuxHead>,
}

impl<T: Element> SegModel<T> {
    pub fn build(spec: &ModelSpec, seed: u64) -> Result<Self> {
        if spec.num_classes < 2 || spec.num_classes > 255 {
            return param_err(format!("num_classes must lie in 2..=255, got {}", spec.num_classes));
        }
        if spec.head_ch == 0 {
            return param_err("head_ch must be positive");
        }
        let mut pb = ParamBuilder::<T>::new(seed);
        let backbone = spec.backbone.build(&mut pb)?;
        let levels = backbone.levels();
        let &(_, deep_ch) = levels.last().expect("backbone levels");
        let (nc, mid) = (spec.num_classes, spec.head_ch);
        let head = pb.scope("head", |pb| -> Result<Head> {
            Ok(match &spec.head {
                HeadSpec::Fcn => Head::Fcn(FcnHead::new(pb, "fcn", deep_ch, mid, nc)?),
                HeadSpec::UNet => Head::UNet(UNetDecoder::new(pb, &levels, nc)?),
                HeadSpec::Psp { bins, proj_ch } => {
                    let proj = proj_ch.unwrap_or((deep_ch / bins.len().max(1)).max(1));
                    let ppm = Ppm::new(pb, deep_ch, bins, proj)?;
                    let out = Ppm::out_channels(deep_ch, bins.len(), proj);
                    Head::Context(ContextHead {
                        module: ContextModule::Ppm(ppm),
                        head: FcnHead::new(pb, "psp", out, mid, nc)?,
                    })
                }
                HeadSpec::DeepLabV3 { rates } => Head::Context(ContextHead {
                    module: ContextModule::Aspp(Aspp::new(pb, deep_ch, rates, mid)?),
                    head: FcnHead::new(pb, "deeplab", mid, mid, nc)?,
                }),
                HeadSpec::DeepLabV3p {
                    rates,
                    low_level_stride,
                    low_ch,
                } => Head::DeepLabV3p(DeepLabV3pDecoder::new(pb, &levels, *low_level_stride, rates, mid, *low_ch, mid, nc)?),
                HeadSpec::Ocr { key_ch } => Head::Ocr(OcrHead::new(pb, deep_ch, mid, *key_ch, nc)?),
            })
        })?;
        let aux = if spec.aux {
            let (_, ch) = levels[levels.len().saturating_sub(2)];
            Some(pb.scope("aux", |pb| AuxHead::new(pb, "head", ch, mid, nc))?)
        } else {
            None
        };
        Ok(Self {
            spec: spec.clone(),
            params: pb.finish(),
            backbone,
            head,
            aux,
        })
    }

    pub fn name(&self) -> &str {
        &self.spec.name
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn num_classes(&self) -> usize {
        self.spec.num_classes
    }

    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }

    /// Run the network; `train` selects batch statistics and running-stat updates.
    pub fn forward(&mut self, graph: &mut Graph<T>, images: Var, train: bool) -> Result<SegOutput> {
        let Self {
            spec,
            params,
            backbone,
            head,
            aux,
        } = self;
        let mut ctx = Ctx::new(graph, params, train);
        ctx.align_corners = spec.align_corners;
        let shape = ctx.graph.shape(images).to_vec();
        if shape.len() != 4 {
            return Err(Error::Shape(format!("model input must be N x 3 x H x W, got {shape:?}")));
        }
        let out = (shape[2], shape[3]);
        let pyr = backbone.forward(&mut ctx, images)?;
        let deep = pyr.deepest().1;
        let mut aux_out = Vec::new();
        let main = match head {
            Head::Fcn(h) => h.forward(&mut ctx, deep, out)?,
            Head::UNet(h) => h.forward(&mut ctx, &pyr, out)?,
            Head::Context(h) => h.forward(&mut ctx, deep, out)?,
            Head::DeepLabV3p(h) => h.forward(&mut ctx, &pyr, out)?,
            Head::Ocr(h) => {
                let (main, soft) = h.forward(&mut ctx, deep, out)?;
                aux_out.push(soft);
                main
            }
        };
        if let Some(a) = aux {
            aux_out.push(a.forward(&mut ctx, pyr.second_deepest().1, out)?);
        }
        Ok(SegOutput { main, aux: aux_out })
    }

    /// Inference-mode argmax labels, `N x H x W`, for a batch of images.
    pub fn predict(&mut self, images: &Tensor<T>) -> Result<Vec<u8>> {
        let mut g = Graph::new(Mode::Inference);
        let x = g.constant(images.clone());
        let out = self.forward(&mut g, x, false)?;
        Ok(argmax_channels(g.value(out.main)))
    }
}

/// Per-pixel argmax over axis 1 of an `N x C x H x W` tensor; ties pick the lowest class.
pub fn argmax_channels<T: Element>(logits: &Tensor<T>) -> Vec<u8> {
    let s = logits.shape();
    let (n, c, plane) = (s[0], s[1], s[2] * s[3]);
    let d = logits.data();
    let mut out = Vec::with_capacity(n * plane);
    for b in 0..n {
        for p in 0..plane {
            let mut best = 0;
            for k in 1..c {
                if d[(b * c + k) * plane + p] > d[(b * c + best) * plane + p] {
                    best = k;
                }
            }
            out.push(best as u8);
        }
    }
    out
}
