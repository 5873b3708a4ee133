//! Modality-aware fusion.
//!
//! The per-modality embeddings are concatenated (canonical modality order)
//! and mixed by a 1x1x1 convolution into a dual feature. For each modality an
//! attention network sees `[dual; F_i]` and regresses a single-channel map
//! `A_i = sigmoid(f_a([dual; F_i]))`, where `f_a` is a 3x3x3 block followed by a
//! 1x1x1 block (each conv -> instance norm -> leaky ReLU). The fused embedding
//! is the unnormalised sum `sum_i A_i * F_i`, with `A_i` broadcast over channels.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{FeatureMap, SegHead};
use crate::error::{Error, Result};
use crate::io::{write_volume, VolumeFormat};
use crate::nn::{
    join, sigmoid, BlockCache, Conv3, ConvLayer, ConvNormAct, Parameters, PointConv,
};
use crate::real::Real;
use crate::tensor::Tensor;
use crate::volume::{ModalityId, MultiModalCase, ProbMap, Volume};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
#[derive(Default)]
pub struct FusionConfig {
    /// Width of the 3x3x3 layer in the attention network; `None` means `C / 2`.
    pub attention_hidden: Option<usize>,
}


impl FusionConfig {
    pub fn hidden(&self, feature_channels: usize) -> usize {
        self.attention_hidden.unwrap_or((feature_channels / 2).max(1))
    }

    pub fn validate(&self, feature_channels: usize) -> Result<()> {
        if self.hidden(feature_channels) == 0 {
            return Err(Error::Config("attention_hidden must be positive".into()));
        }
        Ok(())
    }
}

/// Mixed multi-modal embedding, `C x D x H x W`.
#[derive(Clone, Debug, PartialEq)]
pub struct DualFeature<T = f32> {
    pub data: Tensor<T>,
}

/// Per-modality attention weights, `1 x D x H x W`, values in (0, 1).
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMap<T = f32> {
    pub data: Tensor<T>,
    pub modality: ModalityId,
}

/// Attention-weighted sum of the modality embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct FusedFeature<T = f32> {
    pub data: Tensor<T>,
}

/// The convolution producing the dual feature from `N * C` concatenated
/// channels.
#[derive(Clone, Debug)]
pub struct DualConv<T> {
    pub conv: PointConv<T>,
}

impl<T: Real> DualConv<T> {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, modalities: usize, channels: usize) -> Self {
        Self {
            conv: PointConv::new(rng, modalities * channels, channels, true, 1.0),
        }
    }

    pub fn zeros(modalities: usize, channels: usize) -> Self {
        Self {
            conv: PointConv::zeros(modalities * channels, channels, true),
        }
    }

    pub fn forward(&self, features: &[&Tensor<T>]) -> Result<(Tensor<T>, Tensor<T>)> {
        let stacked = Tensor::concat(features)?;
        if stacked.channels() != self.conv.in_channels() {
            return Err(Error::Shape(format!(
                "dual conv expects {} stacked channels, got {}",
                self.conv.in_channels(),
                stacked.channels()
            )));
        }
        let dual = self.conv.forward(&stacked);
        Ok((dual, stacked))
    }

    /// Returns one gradient per input feature.
    pub fn backward(&self, stacked: &Tensor<T>, ddual: &Tensor<T>, widths: &[usize], grads: &mut Self) -> Vec<Tensor<T>> {
        self.conv.backward(stacked, ddual, &mut grads.conv).split(widths)
    }
}

impl<T: Real> Parameters<T> for DualConv<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[T])) {
        self.conv.visit(prefix, f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [T])) {
        self.conv.visit_mut(prefix, f);
    }
}

/// `f_a` with its own parameters `theta_i` for one modality.
#[derive(Clone, Debug)]
pub struct AttentionNet<T> {
    pub first: ConvNormAct<T>,
    pub second: ConvNormAct<T>,
}

#[derive(Clone, Debug)]
pub struct AttentionCache<T> {
    first: BlockCache<T>,
    second: BlockCache<T>,
}

impl<T: Real> AttentionNet<T> {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, channels: usize, hidden: usize, eps: f64, slope: f64) -> Self {
        Self {
            first: ConvNormAct::new(ConvLayer::Same3(Conv3::new(rng, 2 * channels, hidden, slope)), eps, slope),
            second: ConvNormAct::new(ConvLayer::Point(PointConv::new(rng, hidden, 1, false, slope)), eps, slope),
        }
    }

    /// All convolution weights zero (norm affine left at identity).
    pub fn zeros(channels: usize, hidden: usize, eps: f64, slope: f64) -> Self {
        Self {
            first: ConvNormAct::new(ConvLayer::Same3(Conv3::zeros(2 * channels, hidden)), eps, slope),
            second: ConvNormAct::new(ConvLayer::Point(PointConv::zeros(hidden, 1, false)), eps, slope),
        }
    }

    fn in_channels(&self) -> usize {
        match &self.first.conv {
            ConvLayer::Same3(c) => c.weight.len() / (27 * c.out_channels()),
            _ => unreachable!("attention input layer is 3x3x3"),
        }
    }

    /// Attention map for `[dual; feat]`, plus what backward needs.
    pub fn forward(&self, dual: &Tensor<T>, feat: &Tensor<T>) -> Result<(Tensor<T>, AttentionCache<T>)> {
        if dual.spatial() != feat.spatial() {
            return Err(Error::Shape(format!(
                "dual feature {:?} and embedding {:?} differ spatially",
                dual.spatial(),
                feat.spatial()
            )));
        }
        let input = Tensor::concat(&[dual, feat])?;
        if input.channels() != self.in_channels() {
            return Err(Error::Shape(format!(
                "attention expects {} channels, got {}",
                self.in_channels(),
                input.channels()
            )));
        }
        let (h, first) = self.first.forward(&input);
        let (logits, second) = self.second.forward(&h);
        Ok((sigmoid(&logits), AttentionCache { first, second }))
    }

    /// Returns `(d_dual, d_feat)`.
    pub fn backward(
        &self,
        cache: &AttentionCache<T>,
        att: &Tensor<T>,
        datt: &Tensor<T>,
        grads: &mut Self,
    ) -> (Tensor<T>, Tensor<T>) {
        let mut dlogit = datt.clone();
        for (g, &a) in dlogit.data_mut().iter_mut().zip(att.data()) {
            *g = *g * a * (T::one() - a);
        }
        let dh = self.second.backward(&cache.second, &dlogit, &mut grads.second);
        let dinput = self.first.backward(&cache.first, &dh, &mut grads.first);
        let c = dinput.channels() / 2;
        let mut parts = dinput.split(&[c, c]).into_iter();
        (parts.next().unwrap(), parts.next().unwrap())
    }
}

impl<T: Real> Parameters<T> for AttentionNet<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[T])) {
        self.first.visit(&join(prefix, "0"), f);
        self.second.visit(&join(prefix, "1"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [T])) {
        self.first.visit_mut(&join(prefix, "0"), f);
        self.second.visit_mut(&join(prefix, "1"), f);
    }
}

/// `sum_i A_i * F_i` with each single-channel `A_i` broadcast over channels.
pub fn aggregate<T: Real>(atts: &[&Tensor<T>], feats: &[&Tensor<T>]) -> Result<Tensor<T>> {
    if atts.is_empty() || atts.len() != feats.len() {
        return Err(Error::Empty(format!(
            "need matching non-empty attention/feature lists, got {} and {}",
            atts.len(),
            feats.len()
        )));
    }
    let shape = feats[0].shape();
    for (a, f) in atts.iter().zip(feats) {
        if f.shape() != shape || a.channels() != 1 || a.spatial() != f.spatial() {
            return Err(Error::Shape(format!(
                "attention {:?} / feature {:?} incompatible with {shape:?}",
                a.shape(),
                f.shape()
            )));
        }
    }
    let mut out = Tensor::zeros(shape);
    for (a, f) in atts.iter().zip(feats) {
        let a = a.data();
        for c in 0..shape[0] {
            for ((o, &fv), &av) in out.channel_mut(c).iter_mut().zip(f.channel(c)).zip(a) {
                *o = *o + av * fv;
            }
        }
    }
    Ok(out)
}

/// Gradients of [`aggregate`] w.r.t. each attention map and each feature.
pub fn aggregate_backward<T: Real>(
    atts: &[&Tensor<T>],
    feats: &[&Tensor<T>],
    dfused: &Tensor<T>,
) -> (Vec<Tensor<T>>, Vec<Tensor<T>>) {
    let mut datts = Vec::with_capacity(atts.len());
    let mut dfeats = Vec::with_capacity(feats.len());
    for (a, f) in atts.iter().zip(feats) {
        let mut da = Tensor::zeros(a.shape());
        let mut df = Tensor::zeros(f.shape());
        for c in 0..f.channels() {
            let g = dfused.channel(c);
            for ((d, &gv), &fv) in da.data_mut().iter_mut().zip(g).zip(f.channel(c)) {
                *d = *d + gv * fv;
            }
            for ((d, &gv), &av) in df.channel_mut(c).iter_mut().zip(g).zip(a.data()) {
                *d = gv * av;
            }
        }
        datts.push(da);
        dfeats.push(df);
    }
    (datts, dfeats)
}

fn ordered<T>(features: &BTreeMap<ModalityId, FeatureMap<T>>) -> Result<Vec<&Tensor<T>>>
where
    T: Real,
{
    if features.len() < 2 {
        return Err(Error::Config(format!(
            "fusion needs at least two modalities, got {}",
            features.len()
        )));
    }
    // BTreeMap iteration is the canonical lexicographic order
    let tensors: Vec<&Tensor<T>> = features.values().map(|f| &f.data).collect();
    let shape = tensors[0].shape();
    if tensors.iter().any(|t| t.shape() != shape) {
        return Err(Error::Shape("modality embeddings differ in shape".into()));
    }
    Ok(tensors)
}

/// Concatenate embeddings in canonical modality order and mix them.
pub fn make_dual<T: Real>(
    features: &BTreeMap<ModalityId, FeatureMap<T>>,
    params: &DualConv<T>,
) -> Result<DualFeature<T>> {
    let tensors = ordered(features)?;
    Ok(DualFeature {
        data: params.forward(&tensors)?.0,
    })
}

pub fn attention_for<T: Real>(
    modality: &ModalityId,
    dual: &DualFeature<T>,
    feat: &FeatureMap<T>,
    params: &AttentionNet<T>,
) -> Result<AttentionMap<T>> {
    if &feat.modality != modality {
        return Err(Error::UnknownModality(format!(
            "embedding belongs to {} but attention requested for {modality}",
            feat.modality
        )));
    }
    Ok(AttentionMap {
        data: params.forward(&dual.data, &feat.data)?.0,
        modality: modality.clone(),
    })
}

pub fn weighted_aggregate<T: Real>(pairs: &[(AttentionMap<T>, FeatureMap<T>)]) -> Result<FusedFeature<T>> {
    let atts: Vec<&Tensor<T>> = pairs.iter().map(|(a, _)| &a.data).collect();
    let feats: Vec<&Tensor<T>> = pairs.iter().map(|(_, f)| &f.data).collect();
    Ok(FusedFeature {
        data: aggregate(&atts, &feats)?,
    })
}

pub fn joint_head<T: Real>(fused: &FusedFeature<T>, params: &SegHead<T>) -> Result<ProbMap<T>> {
    ProbMap::new(params.forward(&fused.data)?)
}

/// Writes an attention map on the case's voxel grid for overlay viewing.
pub fn export_attention<T: Real>(
    att: &AttentionMap<T>,
    case: &MultiModalCase,
    path: &Path,
    format: VolumeFormat,
) -> Result<()> {
    if att.data.spatial() != case.shape() {
        return Err(Error::Shape(format!(
            "attention grid {:?} does not match case grid {:?}",
            att.data.spatial(),
            case.shape()
        )));
    }
    let values: Vec<f32> = att.data.data().iter().map(|v| v.as_f64() as f32).collect();
    let data = ndarray::Array3::from_shape_vec(case.shape(), values).expect("attention grid");
    let vol = Volume::new(data, case.spacing(), att.modality.clone())?;
    write_volume(path, &vol, format)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::testing::*;
    use crate::nn::zeros_like;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn id(s: &str) -> ModalityId {
        ModalityId::new(s).unwrap()
    }

    fn feats(c: usize, n: usize, seed: u64) -> BTreeMap<ModalityId, FeatureMap<f64>> {
        BTreeMap::from([
            (id("AP"), FeatureMap { data: random_tensor([c, n, n, n], seed), modality: id("AP") }),
            (id("VP"), FeatureMap { data: random_tensor([c, n, n, n], seed + 1), modality: id("VP") }),
        ])
    }

    #[test]
    fn dual_shape_and_zero_case() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let f = feats(32, 8, 1);
        let dual = make_dual(&f, &DualConv::new(&mut rng, 2, 32)).unwrap();
        assert_eq!(dual.data.shape(), [32, 8, 8, 8]);

        let zero = BTreeMap::from([
            (id("AP"), FeatureMap { data: Tensor::<f64>::zeros([4, 2, 2, 2]), modality: id("AP") }),
            (id("VP"), FeatureMap { data: Tensor::zeros([4, 2, 2, 2]), modality: id("VP") }),
        ]);
        let conv = DualConv::new(&mut rng, 2, 4);
        assert!(make_dual(&zero, &conv).unwrap().data.data().iter().all(|&v| v == 0.0));

        let one = BTreeMap::from([(id("AP"), zero[&id("AP")].clone())]);
        assert!(matches!(make_dual(&one, &conv), Err(Error::Config(_))));
    }

    #[test]
    fn zero_attention_network_gives_one_half() {
        let net = AttentionNet::<f64>::zeros(4, 2, 1e-5, 0.01);
        let dual = DualFeature { data: Tensor::zeros([4, 2, 2, 2]) };
        let feat = FeatureMap { data: Tensor::zeros([4, 2, 2, 2]), modality: id("AP") };
        let a = attention_for(&id("AP"), &dual, &feat, &net).unwrap();
        assert!(a.data.data().iter().all(|&v| v == 0.5));
        let wrong = FeatureMap { data: Tensor::zeros([4, 2, 2, 4]), modality: id("AP") };
        assert!(attention_for(&id("AP"), &dual, &wrong, &net).is_err());
    }

    #[test]
    fn attention_stays_inside_unit_interval() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let net = AttentionNet::<f64>::new(&mut rng, 4, 2, 1e-5, 0.01);
        for seed in 0..20 {
            let dual = DualFeature { data: random_tensor([4, 4, 4, 4], seed).map(|v| 10.0 * v) };
            let feat = FeatureMap { data: random_tensor([4, 4, 4, 4], seed + 100), modality: id("AP") };
            let a = attention_for(&id("AP"), &dual, &feat, &net).unwrap();
            assert!(a.data.data().iter().all(|&v| v > 0.0 && v < 1.0));
        }
    }

    #[test]
    fn aggregate_limits_and_average() {
        let fa = random_tensor([3, 2, 2, 2], 1);
        let fv = random_tensor([3, 2, 2, 2], 2);
        let near_one = Tensor::filled([1, 2, 2, 2], 1.0 - 1e-12);
        let near_zero = Tensor::filled([1, 2, 2, 2], 1e-12);
        let out = aggregate(&[&near_one, &near_zero], &[&fa, &fv]).unwrap();
        for (o, a) in out.data().iter().zip(fa.data()) {
            assert!((o - a).abs() < 1e-10);
        }
        let half = Tensor::filled([1, 2, 2, 2], 0.5);
        let avg = aggregate(&[&half, &half], &[&fa, &fv]).unwrap();
        for ((o, a), v) in avg.data().iter().zip(fa.data()).zip(fv.data()) {
            assert!((o - (a + v) / 2.0).abs() < 1e-15);
        }
        assert!(aggregate::<f64>(&[], &[]).is_err());
        assert!(aggregate(&[&half], &[&random_tensor([3, 2, 2, 1], 3)]).is_err());
    }

    #[test]
    fn attention_and_dual_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let c = 4;
        let net = AttentionNet::<f64>::new(&mut rng, c, 2, 1e-5, 0.01);
        let dual = random_tensor([c, 4, 4, 4], 5);
        let feat = random_tensor([c, 4, 4, 4], 6);
        let (a, cache) = net.forward(&dual, &feat).unwrap();
        let ones = a.map(|_| 1.0);
        let mut grads = zeros_like(&net);
        let (dd, df) = net.backward(&cache, &a, &ones, &mut grads);
        let sum = |n: &AttentionNet<f64>, d: &Tensor<f64>, f: &Tensor<f64>| n.forward(d, f).unwrap().0.data().iter().sum::<f64>();
        let (err, at) = check_params(&net, &grads, |n| sum(n, &dual, &feat), 8, 1e-5);
        assert!(err < 1e-4, "{err} at {at}");
        assert!(check_input(&dual, &dd, |d| sum(&net, d, &feat), 16, 1e-5) < 1e-4);
        assert!(check_input(&feat, &df, |f| sum(&net, &dual, f), 16, 1e-5) < 1e-4);

        let conv = DualConv::<f64>::new(&mut rng, 2, c);
        let (fa, fv) = (random_tensor([c, 4, 4, 4], 7), random_tensor([c, 4, 4, 4], 8));
        let (y, stacked) = conv.forward(&[&fa, &fv]).unwrap();
        let w = weights_like(&y, 3);
        let mut g = zeros_like(&conv);
        let d = conv.backward(&stacked, &w, &[c, c], &mut g);
        let (err, at) = check_params(&conv, &g, |m| dot(&m.forward(&[&fa, &fv]).unwrap().0, &w), 8, 1e-5);
        assert!(err < 1e-4, "{err} at {at}");
        assert!(check_input(&fa, &d[0], |x| dot(&conv.forward(&[x, &fv]).unwrap().0, &w), 16, 1e-5) < 1e-4);
    }

    #[test]
    fn aggregate_gradients() {
        let f = [random_tensor([2, 2, 2, 2], 1), random_tensor([2, 2, 2, 2], 2)];
        let a = [random_tensor([1, 2, 2, 2], 3), random_tensor([1, 2, 2, 2], 4)];
        let out = aggregate(&[&a[0], &a[1]], &[&f[0], &f[1]]).unwrap();
        let w = weights_like(&out, 5);
        let (da, df) = aggregate_backward(&[&a[0], &a[1]], &[&f[0], &f[1]], &w);
        let l = |a0: &Tensor<f64>, f1: &Tensor<f64>| dot(&aggregate(&[a0, &a[1]], &[&f[0], f1]).unwrap(), &w);
        assert!(check_input(&a[0], &da[0], |x| l(x, &f[1]), 8, 1e-6) < 1e-8);
        assert!(check_input(&f[1], &df[1], |x| l(&a[0], x), 16, 1e-6) < 1e-8);
    }
}
