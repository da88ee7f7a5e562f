//! The complete detector: backbone, neck and one head per pyramid level.

use alloc::vec::Vec;

use rand::SeedableRng;

use crate::backbone::{Backbone, BackboneOutput};
use crate::boxes::DetectionBox;
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::graph::Var;
use crate::head::{decode_level, DecoupledHead, HeadLevel};
use crate::loss::{total_loss, LossOutput};
use crate::neck::{Neck, NeckOutput};
use crate::nms::nms;
use crate::nn::{Builder, Ctx, Mode, ParamStore};
use crate::rng::Rng64;
use crate::synth::AnnotatedImage;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct Detector {
    pub cfg: ModelConfig,
    pub backbone: Backbone,
    pub neck: Neck,
    pub heads: [DecoupledHead; 3],
}

#[derive(Clone, Copy, Debug)]
pub struct ModelOutput {
    pub backbone: BackboneOutput,
    pub neck: NeckOutput,
    pub heads: [HeadLevel; 3],
}

impl Detector {
    /// Builds the network and its freshly initialised parameters.
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<(Self, ParamStore)> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut rng = Rng64::seed_from_u64(seed);
        let mut b = Builder::new(&mut store, &mut rng);
        let c = cfg.backbone.channels;
        let backbone = Backbone::new(&mut b.sub("backbone"), &cfg.backbone);
        let neck = Neck::new(&mut b.sub("neck"), [c[2], c[3], c[6]], &cfg.neck);
        let heads = core::array::from_fn(|i| DecoupledHead::new(&mut b.sub(&alloc::format!("head{i}")), cfg.neck.width, &cfg.head));
        Ok((Self { cfg: cfg.clone(), backbone, neck, heads }, store))
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, images: Var) -> Result<ModelOutput> {
        let s = ctx.graph.shape(images);
        let size = self.cfg.image_size;
        if s.len() != 4 || s[1] != 3 || s[2] != size || s[3] != size {
            return Err(Error::InvalidArgument(alloc::format!("images {s:?} do not match [N, 3, {size}, {size}]")));
        }
        let backbone = self.backbone.forward(ctx, images)?;
        let neck = self.neck.forward(ctx, &backbone.pyramid)?;
        let lv = neck.levels();
        let mut heads = [HeadLevel { cls: lv[0], reg: lv[0] }; 3];
        for (i, h) in heads.iter_mut().enumerate() {
            *h = self.heads[i].forward(ctx, lv[i])?;
        }
        Ok(ModelOutput { backbone, neck, heads })
    }

    pub fn loss(&self, ctx: &mut Ctx<'_>, out: &ModelOutput, targets: &[Vec<DetectionBox>]) -> Result<LossOutput> {
        total_loss(&mut ctx.graph, &out.heads, targets, self.cfg.image_size, &self.cfg.strides(), &self.cfg.loss)
    }

    /// Per-image detections after thresholding and NMS, in eval mode.
    pub fn predict(&self, store: &ParamStore, images: &Tensor) -> Result<Vec<Vec<DetectionBox>>> {
        let mut ctx = Ctx::new(store, Mode::Eval, self.cfg.bn);
        let x = ctx.input(images.clone());
        let out = self.forward(&mut ctx, x)?;
        let strides = self.cfg.strides();
        let n = images.shape()[0];
        let mut result = Vec::with_capacity(n);
        for i in 0..n {
            let mut cands = Vec::new();
            for (l, h) in out.heads.iter().enumerate() {
                let (cls, reg) = (ctx.graph.value(h.cls), ctx.graph.value(h.reg));
                cands.extend(
                    decode_level(cls, reg, i, strides[l], self.cfg.image_size)?
                        .into_iter()
                        .filter(|b| b.score > self.cfg.post.score_threshold)
                        .filter_map(|b| b.clipped()),
                );
            }
            result.push(nms(&cands, &self.cfg.post));
        }
        Ok(result)
    }
}

/// Stacks `[3, H, W]` images into one `[N, 3, H, W]` batch.
pub fn batch_images(samples: &[&AnnotatedImage]) -> Result<Tensor> {
    let first = samples.first().ok_or_else(|| Error::InvalidArgument("empty batch".into()))?;
    let shape = first.image.shape().to_vec();
    let mut data = Vec::with_capacity(samples.len() * first.image.numel());
    for s in samples {
        if s.image.shape() != shape.as_slice() {
            return Err(Error::InvalidArgument(alloc::format!("image {:?} in a batch of {shape:?}", s.image.shape())));
        }
        data.extend_from_slice(s.image.data());
    }
    let mut full = alloc::vec![samples.len()];
    full.extend_from_slice(&shape);
    Tensor::new(full, data)
}
