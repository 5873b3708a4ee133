//! Modality-specific encoder-decoder producing a shape-preserving embedding,
//! plus the per-modality segmentation head.
//!
//! Layout for `levels = L`, `c_l = base_channels * 2^l`:
//!
//! - encoder level 0: two 3x3x3 blocks (`in -> c_0 -> c_0`)
//! - encoder level l > 0: strided 2x2x2 block (`c_{l-1} -> c_l`), 3x3x3 block
//! - decoder stage for l = L-2 ..= 0: transposed 2x2x2 upsampling
//!   (`c_{l+1} -> c_l`), concatenation with the level-l skip, two 3x3x3 blocks
//!   (`2 c_l -> c_l -> c_l`)
//! - projection: 1x1x1 block (`c_0 -> C`)
//!
//! Every block is conv -> instance norm -> leaky ReLU. The embedding is the
//! projection output, i.e. the last feature tensor before classification.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    join, softmax2, softmax2_backward, BlockCache, Conv3, ConvLayer, ConvNormAct, DownConv, Parameters,
    PointConv, UpConv,
};
use crate::real::Real;
use crate::tensor::Tensor;
use crate::volume::{ModalityId, ProbMap, Volume};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub levels: usize,
    pub base_channels: usize,
    /// Embedding width `C`.
    pub feature_channels: usize,
    pub norm_epsilon: f64,
    pub leaky_slope: f64,
    pub in_channels: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            levels: 3,
            base_channels: 8,
            feature_channels: 32,
            norm_epsilon: 1e-5,
            leaky_slope: 0.01,
            in_channels: 1,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 || self.base_channels == 0 || self.feature_channels == 0 || self.in_channels == 0 {
            return Err(Error::Config(
                "backbone levels, base_channels, feature_channels and in_channels must be >= 1".into(),
            ));
        }
        if self.levels > 8 {
            return Err(Error::Config(format!("backbone levels {} is unreasonably deep", self.levels)));
        }
        if !(self.norm_epsilon > 0.0) || !(self.leaky_slope >= 0.0) {
            return Err(Error::Config("norm_epsilon must be > 0 and leaky_slope >= 0".into()));
        }
        Ok(())
    }

    /// Spatial dimensions must be divisible by this.
    pub fn divisor(&self) -> usize {
        1 << (self.levels - 1)
    }

    pub fn check_input(&self, spatial: [usize; 3]) -> Result<()> {
        let div = self.divisor();
        if spatial.iter().any(|&s| s == 0 || s % div != 0) {
            return Err(Error::Config(format!(
                "input shape {spatial:?} is not divisible by 2^(levels-1) = {div}"
            )));
        }
        Ok(())
    }

    fn width(&self, level: usize) -> usize {
        self.base_channels << level
    }
}

/// Embedding `F_i` of one modality: `C x D x H x W`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap<T = f32> {
    pub data: Tensor<T>,
    pub modality: ModalityId,
}

#[derive(Clone, Debug)]
struct DecoderStage<T> {
    up: UpConv<T>,
    blocks: Vec<ConvNormAct<T>>,
}

#[derive(Clone, Debug)]
pub struct Backbone<T> {
    config: BackboneConfig,
    encoder: Vec<Vec<ConvNormAct<T>>>,
    decoder: Vec<DecoderStage<T>>,
    projection: ConvNormAct<T>,
}

/// Activations retained for the backward pass.
#[derive(Clone, Debug)]
pub struct BackboneCache<T> {
    encoder: Vec<Vec<BlockCache<T>>>,
    /// Input to each decoder stage's upsampling.
    up_inputs: Vec<Tensor<T>>,
    decoder: Vec<Vec<BlockCache<T>>>,
    projection: BlockCache<T>,
}

impl<T: Real> Backbone<T> {
    pub fn new<R: Rng + ?Sized>(config: &BackboneConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let (eps, slope) = (config.norm_epsilon, config.leaky_slope);
        let block3 = |rng: &mut R, ci, co| ConvNormAct::new(ConvLayer::Same3(Conv3::new(rng, ci, co, slope)), eps, slope);
        let mut encoder = Vec::with_capacity(config.levels);
        for level in 0..config.levels {
            let c = config.width(level);
            let first = if level == 0 {
                block3(rng, config.in_channels, c)
            } else {
                ConvNormAct::new(
                    ConvLayer::Down(DownConv::new(rng, config.width(level - 1), c, slope)),
                    eps,
                    slope,
                )
            };
            let second = block3(rng, c, c);
            encoder.push(vec![first, second]);
        }
        let mut decoder = Vec::with_capacity(config.levels - 1);
        for level in (0..config.levels - 1).rev() {
            let c = config.width(level);
            let up = UpConv::new(rng, config.width(level + 1), c, slope);
            let blocks = vec![block3(rng, 2 * c, c), block3(rng, c, c)];
            decoder.push(DecoderStage { up, blocks });
        }
        let projection = ConvNormAct::new(
            ConvLayer::Point(PointConv::new(rng, config.width(0), config.feature_channels, false, slope)),
            eps,
            slope,
        );
        Ok(Self {
            config: config.clone(),
            encoder,
            decoder,
            projection,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<(Tensor<T>, BackboneCache<T>)> {
        if x.channels() != self.config.in_channels {
            return Err(Error::Shape(format!(
                "backbone expects {} input channels, got {}",
                self.config.in_channels,
                x.channels()
            )));
        }
        self.config.check_input(x.spatial())?;
        let mut h = x.clone();
        let mut skips = Vec::with_capacity(self.config.levels);
        let mut enc_caches = Vec::with_capacity(self.config.levels);
        for level in &self.encoder {
            let mut caches = Vec::with_capacity(level.len());
            for block in level {
                let (y, c) = block.forward(&h);
                caches.push(c);
                h = y;
            }
            enc_caches.push(caches);
            skips.push(h.clone());
        }
        let mut up_inputs = Vec::with_capacity(self.decoder.len());
        let mut dec_caches = Vec::with_capacity(self.decoder.len());
        for (i, stage) in self.decoder.iter().enumerate() {
            let level = self.config.levels - 2 - i;
            let up = stage.up.forward(&h);
            up_inputs.push(h);
            h = Tensor::concat(&[&up, &skips[level]])?;
            let mut caches = Vec::with_capacity(stage.blocks.len());
            for block in &stage.blocks {
                let (y, c) = block.forward(&h);
                caches.push(c);
                h = y;
            }
            dec_caches.push(caches);
        }
        let (f, projection) = self.projection.forward(&h);
        Ok((
            f,
            BackboneCache {
                encoder: enc_caches,
                up_inputs,
                decoder: dec_caches,
                projection,
            },
        ))
    }

    /// Accumulates parameter gradients into `grads`; returns the input gradient.
    pub fn backward(&self, cache: &BackboneCache<T>, df: &Tensor<T>, grads: &mut Self) -> Tensor<T> {
        let mut d = self.projection.backward(&cache.projection, df, &mut grads.projection);
        let levels = self.config.levels;
        let mut dskips: Vec<Option<Tensor<T>>> = vec![None; levels];
        for (i, stage) in self.decoder.iter().enumerate().rev() {
            let level = levels - 2 - i;
            let gstage = &mut grads.decoder[i];
            for (j, block) in stage.blocks.iter().enumerate().rev() {
                d = block.backward(&cache.decoder[i][j], &d, &mut gstage.blocks[j]);
            }
            let c = self.config.width(level);
            let mut parts = d.split(&[c, c]).into_iter();
            let dup = parts.next().unwrap();
            dskips[level] = parts.next();
            d = stage.up.backward(&cache.up_inputs[i], &dup, &mut gstage.up);
        }
        for level in (0..levels).rev() {
            if let Some(ds) = &dskips[level] {
                d.add_assign(ds);
            }
            for (j, block) in self.encoder[level].iter().enumerate().rev() {
                d = block.backward(&cache.encoder[level][j], &d, &mut grads.encoder[level][j]);
            }
        }
        d
    }

    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.forward(x)?.0)
    }
}

impl<T: Real> Parameters<T> for Backbone<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[T])) {
        for (l, level) in self.encoder.iter().enumerate() {
            for (j, b) in level.iter().enumerate() {
                b.visit(&join(prefix, &format!("enc{l}.{j}")), f);
            }
        }
        for (i, stage) in self.decoder.iter().enumerate() {
            stage.up.visit(&join(prefix, &format!("dec{i}.up")), f);
            for (j, b) in stage.blocks.iter().enumerate() {
                b.visit(&join(prefix, &format!("dec{i}.{j}")), f);
            }
        }
        self.projection.visit(&join(prefix, "proj"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [T])) {
        for (l, level) in self.encoder.iter_mut().enumerate() {
            for (j, b) in level.iter_mut().enumerate() {
                b.visit_mut(&join(prefix, &format!("enc{l}.{j}")), f);
            }
        }
        for (i, stage) in self.decoder.iter_mut().enumerate() {
            stage.up.visit_mut(&join(prefix, &format!("dec{i}.up")), f);
            for (j, b) in stage.blocks.iter_mut().enumerate() {
                b.visit_mut(&join(prefix, &format!("dec{i}.{j}")), f);
            }
        }
        self.projection.visit_mut(&join(prefix, "proj"), f);
    }
}

/// Embeds a single-modality volume.
pub fn backbone_forward<T: Real>(vol: &Volume, params: &Backbone<T>) -> Result<FeatureMap<T>> {
    params.config().check_input(vol.shape())?;
    Ok(FeatureMap {
        data: params.infer(&vol.to_tensor())?,
        modality: vol.modality().clone(),
    })
}

/// 1x1x1 projection of an embedding to two classes followed by softmax.
/// Used both per modality and for the fused embedding.
#[derive(Clone, Debug)]
pub struct SegHead<T> {
    pub conv: PointConv<T>,
}

impl<T: Real> SegHead<T> {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, channels: usize) -> Self {
        Self {
            conv: PointConv::new(rng, channels, ProbMap::<T>::CLASSES, true, 1.0),
        }
    }

    pub fn zeros(channels: usize) -> Self {
        Self {
            conv: PointConv::zeros(channels, ProbMap::<T>::CLASSES, true),
        }
    }

    pub fn in_channels(&self) -> usize {
        self.conv.in_channels()
    }

    pub fn forward(&self, feat: &Tensor<T>) -> Result<Tensor<T>> {
        if feat.channels() != self.in_channels() {
            return Err(Error::Shape(format!(
                "head expects {} channels, got {}",
                self.in_channels(),
                feat.channels()
            )));
        }
        Ok(softmax2(&self.conv.forward(feat)))
    }

    /// Gradient w.r.t. the embedding given the head output and a gradient
    /// w.r.t. the probabilities.
    pub fn backward(&self, feat: &Tensor<T>, probs: &Tensor<T>, dprobs: &Tensor<T>, grads: &mut Self) -> Tensor<T> {
        let dlogits = softmax2_backward(probs, dprobs);
        self.conv.backward(feat, &dlogits, &mut grads.conv)
    }
}

impl<T: Real> Parameters<T> for SegHead<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[T])) {
        self.conv.visit(prefix, f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [T])) {
        self.conv.visit_mut(prefix, f);
    }
}

/// Intra-modality prediction from one embedding.
pub fn modality_head<T: Real>(feat: &FeatureMap<T>, params: &SegHead<T>) -> Result<ProbMap<T>> {
    ProbMap::new(params.forward(&feat.data)?)
}
