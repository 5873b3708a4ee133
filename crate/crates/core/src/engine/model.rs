use std::collections::BTreeMap;

use rand::Rng;

use crate::backbone::{Backbone, BackboneCache, BackboneConfig, SegHead};
use crate::engine::checkpoint::Architecture;
use crate::error::{Error, Result};
use crate::fusion::{aggregate, aggregate_backward, AttentionCache, AttentionNet, DualConv, FusionConfig};
use crate::nn::{join, Parameters};
use crate::objective::{mutual_learning_with_grad, seg_loss_with_grad, LossBreakdown};
use crate::real::Real;
use crate::tensor::Tensor;
use crate::volume::ModalityId;

/// Weights of the loss terms used during training.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda: f64,
    pub mimicry: f64,
}

/// A network trainable by the engine: inputs are single-channel tensors in
/// the order of [`Network::modalities`].
pub trait Network<T: Real>: Parameters<T> + Clone + Send + Sync {
    fn modalities(&self) -> &[ModalityId];

    /// Enough structure to rebuild an untrained copy.
    fn architecture(&self) -> Architecture;

    /// Evaluates the objective on one sample and accumulates parameter
    /// gradients into `grads`.
    fn loss_and_grad(&self, inputs: &[Tensor<T>], gt: &[u8], weights: LossWeights, grads: &mut Self) -> Result<LossBreakdown>;
}

fn check_inputs<T: Real>(modalities: &[ModalityId], inputs: &[Tensor<T>]) -> Result<()> {
    if inputs.len() != modalities.len() {
        return Err(Error::Config(format!(
            "model expects {} modalities ({modalities:?}), got {} inputs",
            modalities.len(),
            inputs.len()
        )));
    }
    Ok(())
}

fn sorted_unique(modalities: &[ModalityId]) -> Result<Vec<ModalityId>> {
    let mut m = modalities.to_vec();
    m.sort();
    m.dedup();
    if m.len() != modalities.len() {
        return Err(Error::Config(format!("duplicate modality in {modalities:?}")));
    }
    Ok(m)
}

/// Per-modality backbones and heads, the dual convolution, one attention
/// network per modality and the joint head. Modalities are kept in sorted
/// order, which fixes the concatenation order of the dual feature.
#[derive(Clone, Debug)]
pub struct MamlModel<T> {
    modalities: Vec<ModalityId>,
    backbone_config: BackboneConfig,
    fusion_config: FusionConfig,
    pub backbones: Vec<Backbone<T>>,
    pub heads: Vec<SegHead<T>>,
    pub dual: DualConv<T>,
    pub attention: Vec<AttentionNet<T>>,
    pub joint: SegHead<T>,
}

/// Everything a training step needs from the forward pass.
pub struct MamlForward<T> {
    pub features: Vec<Tensor<T>>,
    backbone_caches: Vec<BackboneCache<T>>,
    pub intra: Vec<Tensor<T>>,
    stacked: Tensor<T>,
    pub attention: Vec<Tensor<T>>,
    attention_caches: Vec<AttentionCache<T>>,
    pub fused: Tensor<T>,
    pub joint: Tensor<T>,
}

impl<T: Real> MamlModel<T> {
    pub fn new<R: Rng + ?Sized>(
        modalities: &[ModalityId],
        backbone: &BackboneConfig,
        fusion: &FusionConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let modalities = sorted_unique(modalities)?;
        if modalities.len() < 2 {
            return Err(Error::Config(format!(
                "mutual learning needs at least two modalities, got {modalities:?}"
            )));
        }
        backbone.validate()?;
        let c = backbone.feature_channels;
        let hidden = fusion.hidden(c);
        let backbones = modalities.iter().map(|_| Backbone::new(backbone, rng)).collect::<Result<Vec<_>>>()?;
        let heads = modalities.iter().map(|_| SegHead::new(rng, c)).collect();
        let dual = DualConv::new(rng, modalities.len(), c);
        let attention = modalities
            .iter()
            .map(|_| AttentionNet::new(rng, c, hidden, backbone.norm_epsilon, backbone.leaky_slope))
            .collect();
        let joint = SegHead::new(rng, c);
        Ok(Self {
            modalities,
            backbone_config: backbone.clone(),
            fusion_config: fusion.clone(),
            backbones,
            heads,
            dual,
            attention,
            joint,
        })
    }

    pub fn backbone_config(&self) -> &BackboneConfig {
        &self.backbone_config
    }

    pub fn fusion_config(&self) -> &FusionConfig {
        &self.fusion_config
    }

    pub fn index_of(&self, modality: &ModalityId) -> Result<usize> {
        self.modalities
            .iter()
            .position(|m| m == modality)
            .ok_or_else(|| Error::UnknownModality(format!("{modality} (model has {:?})", self.modalities)))
    }

    pub fn forward(&self, inputs: &[Tensor<T>]) -> Result<MamlForward<T>> {
        check_inputs(&self.modalities, inputs)?;
        let mut features = Vec::with_capacity(inputs.len());
        let mut backbone_caches = Vec::with_capacity(inputs.len());
        for (b, x) in self.backbones.iter().zip(inputs) {
            let (f, cache) = b.forward(x)?;
            features.push(f);
            backbone_caches.push(cache);
        }
        let intra = self.heads.iter().zip(&features).map(|(h, f)| h.forward(f)).collect::<Result<Vec<_>>>()?;
        let refs: Vec<&Tensor<T>> = features.iter().collect();
        let (dual, stacked) = self.dual.forward(&refs)?;
        let mut attention = Vec::with_capacity(inputs.len());
        let mut attention_caches = Vec::with_capacity(inputs.len());
        for (net, f) in self.attention.iter().zip(&features) {
            let (a, cache) = net.forward(&dual, f)?;
            attention.push(a);
            attention_caches.push(cache);
        }
        let arefs: Vec<&Tensor<T>> = attention.iter().collect();
        let fused = aggregate(&arefs, &refs)?;
        let joint = self.joint.forward(&fused)?;
        Ok(MamlForward {
            features,
            backbone_caches,
            intra,
            stacked,
            attention,
            attention_caches,
            fused,
            joint,
        })
    }

    /// Back-propagates gradients w.r.t. the intra and joint probabilities.
    pub fn backward(&self, fwd: &MamlForward<T>, dintra: &[Tensor<T>], djoint: &Tensor<T>, grads: &mut Self) {
        let dfused = self.joint.backward(&fwd.fused, &fwd.joint, djoint, &mut grads.joint);
        let arefs: Vec<&Tensor<T>> = fwd.attention.iter().collect();
        let frefs: Vec<&Tensor<T>> = fwd.features.iter().collect();
        let (datt, mut dfeat) = aggregate_backward(&arefs, &frefs, &dfused);
        let mut ddual: Option<Tensor<T>> = None;
        for i in 0..self.modalities.len() {
            let (dd, df) =
                self.attention[i].backward(&fwd.attention_caches[i], &fwd.attention[i], &datt[i], &mut grads.attention[i]);
            dfeat[i].add_assign(&df);
            match &mut ddual {
                Some(acc) => acc.add_assign(&dd),
                None => ddual = Some(dd),
            }
        }
        let widths = vec![self.backbone_config.feature_channels; self.modalities.len()];
        let ddual = ddual.expect("at least two modalities");
        for (i, d) in self.dual.backward(&fwd.stacked, &ddual, &widths, &mut grads.dual).into_iter().enumerate() {
            dfeat[i].add_assign(&d);
        }
        for i in 0..self.modalities.len() {
            let dh = self.heads[i].backward(&fwd.features[i], &fwd.intra[i], &dintra[i], &mut grads.heads[i]);
            dfeat[i].add_assign(&dh);
            self.backbones[i].backward(&fwd.backbone_caches[i], &dfeat[i], &mut grads.backbones[i]);
        }
    }

    /// Intra prediction of one modality from its own volume only.
    pub fn predict_intra(&self, modality: &ModalityId, input: &Tensor<T>) -> Result<Tensor<T>> {
        let i = self.index_of(modality)?;
        self.heads[i].forward(&self.backbones[i].infer(input)?)
    }
}

impl<T: Real> Parameters<T> for MamlModel<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[T])) {
        for (i, m) in self.modalities.iter().enumerate() {
            self.backbones[i].visit(&join(prefix, &format!("backbone.{m}")), f);
            self.heads[i].visit(&join(prefix, &format!("head.{m}")), f);
            self.attention[i].visit(&join(prefix, &format!("attention.{m}")), f);
        }
        self.dual.visit(&join(prefix, "dual"), f);
        self.joint.visit(&join(prefix, "joint"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [T])) {
        for (i, m) in self.modalities.iter().enumerate() {
            self.backbones[i].visit_mut(&join(prefix, &format!("backbone.{m}")), f);
            self.heads[i].visit_mut(&join(prefix, &format!("head.{m}")), f);
            self.attention[i].visit_mut(&join(prefix, &format!("attention.{m}")), f);
        }
        self.dual.visit_mut(&join(prefix, "dual"), f);
        self.joint.visit_mut(&join(prefix, "joint"), f);
    }
}

impl<T: Real> Network<T> for MamlModel<T> {
    fn modalities(&self) -> &[ModalityId] {
        &self.modalities
    }

    fn architecture(&self) -> Architecture {
        Architecture::Maml {
            modalities: self.modalities.clone(),
            backbone: self.backbone_config.clone(),
            fusion: self.fusion_config.clone(),
        }
    }

    fn loss_and_grad(&self, inputs: &[Tensor<T>], gt: &[u8], weights: LossWeights, grads: &mut Self) -> Result<LossBreakdown> {
        let fwd = self.forward(inputs)?;
        let intra: Vec<&Tensor<T>> = fwd.intra.iter().collect();
        let g = mutual_learning_with_grad(&self.modalities, &intra, &fwd.joint, gt, weights.lambda, weights.mimicry);
        self.backward(&fwd, &g.intra, &g.joint, grads);
        Ok(g.breakdown)
    }
}

/// One backbone and head trained on a single modality (the baseline).
#[derive(Clone, Debug)]
pub struct SingleModel<T> {
    modality: [ModalityId; 1],
    backbone_config: BackboneConfig,
    pub backbone: Backbone<T>,
    pub head: SegHead<T>,
}

impl<T: Real> SingleModel<T> {
    pub fn new<R: Rng + ?Sized>(modality: &ModalityId, backbone: &BackboneConfig, rng: &mut R) -> Result<Self> {
        Ok(Self {
            modality: [modality.clone()],
            backbone_config: backbone.clone(),
            backbone: Backbone::new(backbone, rng)?,
            head: SegHead::new(rng, backbone.feature_channels),
        })
    }

    pub fn modality(&self) -> &ModalityId {
        &self.modality[0]
    }

    pub fn backbone_config(&self) -> &BackboneConfig {
        &self.backbone_config
    }

    pub fn predict(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        self.head.forward(&self.backbone.infer(input)?)
    }
}

impl<T: Real> Parameters<T> for SingleModel<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[T])) {
        self.backbone.visit(&join(prefix, &format!("backbone.{}", self.modality[0])), f);
        self.head.visit(&join(prefix, &format!("head.{}", self.modality[0])), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [T])) {
        let m = self.modality[0].clone();
        self.backbone.visit_mut(&join(prefix, &format!("backbone.{m}")), f);
        self.head.visit_mut(&join(prefix, &format!("head.{m}")), f);
    }
}

impl<T: Real> Network<T> for SingleModel<T> {
    fn modalities(&self) -> &[ModalityId] {
        &self.modality
    }

    fn architecture(&self) -> Architecture {
        Architecture::Single {
            modality: self.modality[0].clone(),
            backbone: self.backbone_config.clone(),
        }
    }

    /// Plain segmentation loss, reported as the lone intra term with `lambda = 1`.
    fn loss_and_grad(&self, inputs: &[Tensor<T>], gt: &[u8], _: LossWeights, grads: &mut Self) -> Result<LossBreakdown> {
        check_inputs(&self.modality, inputs)?;
        let (feat, cache) = self.backbone.forward(&inputs[0])?;
        let probs = self.head.forward(&feat)?;
        let (loss, dprobs) = seg_loss_with_grad(&probs, gt);
        let dfeat = self.head.backward(&feat, &probs, &dprobs, &mut grads.head);
        self.backbone.backward(&cache, &dfeat, &mut grads.backbone);
        Ok(LossBreakdown::from_components(
            BTreeMap::from([(self.modality[0].clone(), loss)]),
            0.0,
            1.0,
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::case_rng;
    use crate::nn::testing::{check_params, random_tensor};
    use crate::nn::zeros_like;

    fn config() -> BackboneConfig {
        BackboneConfig {
            levels: 2,
            base_channels: 2,
            feature_channels: 4,
            ..BackboneConfig::default()
        }
    }

    fn mods() -> Vec<ModalityId> {
        vec![ModalityId::new("AP").unwrap(), ModalityId::new("VP").unwrap()]
    }

    fn sample() -> (Vec<Tensor<f64>>, Vec<u8>) {
        let inputs = vec![random_tensor([1, 4, 4, 4], 1), random_tensor([1, 4, 4, 4], 2)];
        let gt = (0..64).map(|i| u8::from(i % 5 == 0 || i % 7 == 1)).collect();
        (inputs, gt)
    }

    #[test]
    fn full_model_gradients_match_finite_differences() {
        let model = MamlModel::<f64>::new(&mods(), &config(), &FusionConfig::default(), &mut case_rng(3, 0)).unwrap();
        let (inputs, gt) = sample();
        let w = LossWeights { lambda: 0.5, mimicry: 0.0 };
        let mut grads = zeros_like(&model);
        model.loss_and_grad(&inputs, &gt, w, &mut grads).unwrap();
        let loss = |m: &MamlModel<f64>| m.loss_and_grad(&inputs, &gt, w, &mut zeros_like(m)).unwrap().total;
        let (worst, at) = check_params(&model, &grads, loss, 3, 1e-6);
        assert!(worst < 1e-4, "{worst} at {at}");
    }

    #[test]
    fn heads_get_no_gradient_without_intra_terms() {
        let model = MamlModel::<f64>::new(&mods(), &config(), &FusionConfig::default(), &mut case_rng(4, 0)).unwrap();
        let (inputs, gt) = sample();
        let mut grads = zeros_like(&model);
        model.loss_and_grad(&inputs, &gt, LossWeights { lambda: 0.0, mimicry: 0.0 }, &mut grads).unwrap();
        let mut head_norm = 0.0;
        let mut other_norm = 0.0;
        grads.visit("", &mut |name, g| {
            let n: f64 = g.iter().map(|v| v * v).sum();
            if name.starts_with("head.") {
                head_norm += n;
            } else if name.starts_with("backbone.") || name.starts_with("joint") {
                other_norm += n;
            }
        });
        assert_eq!(head_norm, 0.0);
        assert!(other_norm > 0.0);
    }

    #[test]
    fn baseline_gradients_match_finite_differences() {
        let m = ModalityId::new("VP").unwrap();
        let model = SingleModel::<f64>::new(&m, &config(), &mut case_rng(5, 0)).unwrap();
        let (inputs, gt) = sample();
        let w = LossWeights { lambda: 0.5, mimicry: 0.0 };
        let mut grads = zeros_like(&model);
        model.loss_and_grad(&inputs[..1], &gt, w, &mut grads).unwrap();
        let loss = |s: &SingleModel<f64>| s.loss_and_grad(&inputs[..1], &gt, w, &mut zeros_like(s)).unwrap().total;
        let (worst, at) = check_params(&model, &grads, loss, 3, 1e-6);
        assert!(worst < 1e-4, "{worst} at {at}");
    }

    #[test]
    fn modality_order_is_canonical() {
        let rev: Vec<ModalityId> = mods().into_iter().rev().collect();
        let model = MamlModel::<f32>::new(&rev, &config(), &FusionConfig::default(), &mut case_rng(1, 0)).unwrap();
        assert_eq!(model.modalities(), mods().as_slice());
        let mut names = Vec::new();
        model.visit("", &mut |n, _| names.push(n.to_owned()));
        assert!(names.iter().any(|n| n.starts_with("attention.VP")));
        assert!(MamlModel::<f32>::new(&mods()[..1], &config(), &FusionConfig::default(), &mut case_rng(1, 0)).is_err());
        let dup = vec![mods()[0].clone(), mods()[0].clone()];
        assert!(MamlModel::<f32>::new(&dup, &config(), &FusionConfig::default(), &mut case_rng(1, 0)).is_err());
    }
}
