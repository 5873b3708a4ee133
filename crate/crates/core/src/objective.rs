//! Segmentation losses and the mutual-learning objective
//! `total = lambda * sum_i L_intra(i) + L_joint`, where every term is
//! cross-entropy plus soft Dice (unweighted sum).

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;
use crate::volume::{Mask, ModalityId, ProbMap};

pub const DICE_SMOOTH: f64 = 1e-5;
pub const LOG_CLAMP: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub intra: BTreeMap<ModalityId, f64>,
    pub joint: f64,
    /// Optional peer-mimicry term (zero unless enabled).
    #[serde(default)]
    pub mimicry: f64,
    pub total: f64,
    pub lambda: f64,
}

impl LossBreakdown {
    /// Assembles the total from already computed components.
    pub fn from_components(intra: BTreeMap<ModalityId, f64>, joint: f64, lambda: f64) -> Self {
        let total = lambda * intra.values().sum::<f64>() + joint;
        Self {
            intra,
            joint,
            mimicry: 0.0,
            total,
            lambda,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.total.is_finite() && self.joint.is_finite() && self.intra.values().all(|v| v.is_finite())
    }
}

fn check(pred: &Tensor<impl Real>, gt: &Mask) -> Result<()> {
    if pred.channels() != 2 || pred.spatial() != gt.shape() {
        return Err(Error::Shape(format!(
            "prediction {:?} incompatible with mask {:?}",
            pred.shape(),
            gt.shape()
        )));
    }
    Ok(())
}

/// Soft Dice on the foreground channel and its gradient w.r.t. the
/// probabilities (background channel gradient is zero).
pub fn soft_dice_with_grad<T: Real>(pred: &Tensor<T>, gt: &[u8], smooth: f64) -> (f64, Tensor<T>) {
    let fg = pred.channel(1);
    let (mut inter, mut sp, mut sg) = (0.0f64, 0.0f64, 0.0f64);
    for (&p, &g) in fg.iter().zip(gt) {
        let p = p.as_f64();
        inter += p * g as f64;
        sp += p;
        sg += g as f64;
    }
    let num = 2.0 * inter + smooth;
    let den = sp + sg + smooth;
    let loss = 1.0 - num / den;
    let mut grad = Tensor::zeros(pred.shape());
    let d2 = den * den;
    for (o, &g) in grad.channel_mut(1).iter_mut().zip(gt) {
        *o = T::from_f64_lossy(-(2.0 * g as f64 * den - num) / d2);
    }
    (loss, grad)
}

/// Mean voxel cross-entropy and its gradient w.r.t. the probabilities.
pub fn cross_entropy_with_grad<T: Real>(pred: &Tensor<T>, gt: &[u8]) -> (f64, Tensor<T>) {
    let n = gt.len();
    let inv_n = 1.0 / n as f64;
    let mut grad = Tensor::zeros(pred.shape());
    let mut sum = 0.0;
    let data = pred.data();
    let g = grad.data_mut();
    for (v, &label) in gt.iter().enumerate() {
        let idx = label as usize * n + v;
        let p = data[idx].as_f64();
        if p > LOG_CLAMP {
            sum -= p.ln();
            g[idx] = T::from_f64_lossy(-inv_n / p);
        } else {
            sum -= LOG_CLAMP.ln();
        }
    }
    (sum * inv_n, grad)
}

/// Cross-entropy plus soft Dice, with gradient.
pub fn seg_loss_with_grad<T: Real>(pred: &Tensor<T>, gt: &[u8]) -> (f64, Tensor<T>) {
    let (ce, mut g) = cross_entropy_with_grad(pred, gt);
    let (dice, gd) = soft_dice_with_grad(pred, gt, DICE_SMOOTH);
    g.add_assign(&gd);
    (ce + dice, g)
}

pub fn soft_dice_loss<T: Real>(pred: &ProbMap<T>, gt: &Mask, smooth: f64) -> Result<f64> {
    check(pred.tensor(), gt)?;
    Ok(soft_dice_with_grad(pred.tensor(), gt.as_slice(), smooth).0)
}

pub fn cross_entropy_loss<T: Real>(pred: &ProbMap<T>, gt: &Mask) -> Result<f64> {
    check(pred.tensor(), gt)?;
    Ok(cross_entropy_with_grad(pred.tensor(), gt.as_slice()).0)
}

pub fn seg_loss<T: Real>(pred: &ProbMap<T>, gt: &Mask) -> Result<f64> {
    Ok(cross_entropy_loss(pred, gt)? + soft_dice_loss(pred, gt, DICE_SMOOTH)?)
}

/// Mean over voxels of `KL(target || pred)` with `target` held fixed, and the
/// gradient w.r.t. `pred`.
pub fn mimicry_with_grad<T: Real>(pred: &Tensor<T>, target: &Tensor<T>) -> (f64, Tensor<T>) {
    let n = pred.voxels() as f64;
    let mut grad = Tensor::zeros(pred.shape());
    let mut sum = 0.0;
    for ((g, &p), &q) in grad.data_mut().iter_mut().zip(pred.data()).zip(target.data()) {
        let (p, q) = (p.as_f64().max(LOG_CLAMP), q.as_f64().max(LOG_CLAMP));
        sum += q * (q.ln() - p.ln());
        *g = T::from_f64_lossy(-q / p / n);
    }
    (sum / n, grad)
}

/// Loss values plus gradients w.r.t. every prediction.
pub struct MutualGrads<T> {
    pub breakdown: LossBreakdown,
    pub intra: Vec<Tensor<T>>,
    pub joint: Tensor<T>,
}

/// Objective and gradients for predictions given in canonical modality order.
///
/// `mimicry_weight` adds `mu * sum_{i != j} KL(p_j || p_i)` (peer predictions
/// held fixed); zero reproduces the plain objective.
pub fn mutual_learning_with_grad<T: Real>(
    modalities: &[ModalityId],
    intra: &[&Tensor<T>],
    joint: &Tensor<T>,
    gt: &[u8],
    lambda: f64,
    mimicry_weight: f64,
) -> MutualGrads<T> {
    let scale = T::from_f64_lossy(lambda);
    let mut parts = BTreeMap::new();
    let mut grads = Vec::with_capacity(intra.len());
    for (id, p) in modalities.iter().zip(intra) {
        let (l, g) = seg_loss_with_grad(p, gt);
        parts.insert(id.clone(), l);
        grads.push(g.map(|v| v * scale));
    }
    let (joint_loss, joint_grad) = seg_loss_with_grad(joint, gt);
    let mut breakdown = LossBreakdown::from_components(parts, joint_loss, lambda);
    if mimicry_weight > 0.0 {
        let mu = T::from_f64_lossy(mimicry_weight);
        let mut mim = 0.0;
        for i in 0..intra.len() {
            for j in 0..intra.len() {
                if i == j {
                    continue;
                }
                let (l, g) = mimicry_with_grad(intra[i], intra[j]);
                mim += l;
                grads[i].add_assign(&g.map(|v| v * mu));
            }
        }
        breakdown.mimicry = mim;
        breakdown.total += mimicry_weight * mim;
    }
    MutualGrads {
        breakdown,
        intra: grads,
        joint: joint_grad,
    }
}

/// The mutual-learning objective over named predictions.
pub fn mutual_learning_loss<T: Real>(
    intra_preds: &BTreeMap<ModalityId, ProbMap<T>>,
    joint_pred: &ProbMap<T>,
    gt: &Mask,
    lambda: f64,
) -> Result<LossBreakdown> {
    if !(lambda >= 0.0) {
        return Err(Error::Config(format!("lambda must be >= 0, got {lambda}")));
    }
    check(joint_pred.tensor(), gt)?;
    let mut intra = BTreeMap::new();
    for (id, p) in intra_preds {
        intra.insert(id.clone(), seg_loss(p, gt)?);
    }
    Ok(LossBreakdown::from_components(intra, seg_loss(joint_pred, gt)?, lambda))
}

/// Like [`mutual_learning_loss`] but rejects a modality set that differs from
/// the configured one.
pub fn mutual_learning_loss_checked<T: Real>(
    configured: &[ModalityId],
    intra_preds: &BTreeMap<ModalityId, ProbMap<T>>,
    joint_pred: &ProbMap<T>,
    gt: &Mask,
    lambda: f64,
) -> Result<LossBreakdown> {
    let have: Vec<&ModalityId> = intra_preds.keys().collect();
    let mut want: Vec<&ModalityId> = configured.iter().collect();
    want.sort();
    if have != want {
        return Err(Error::Config(format!(
            "predictions cover modalities {have:?}, configuration lists {want:?}"
        )));
    }
    mutual_learning_loss(intra_preds, joint_pred, gt, lambda)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::testing::{check_input, random_tensor};
    use crate::nn::softmax2;
    use ndarray::Array3;
    use proptest::prelude::*;

    fn id(s: &str) -> ModalityId {
        ModalityId::new(s).unwrap()
    }

    fn mask(bits: &[u8], shape: [usize; 3]) -> Mask {
        Mask::new(Array3::from_shape_vec(shape, bits.to_vec()).unwrap()).unwrap()
    }

    fn one_hot(gt: &Mask) -> ProbMap<f64> {
        let fg: Vec<f64> = gt.as_slice().iter().map(|&g| g as f64).collect();
        let bg: Vec<f64> = fg.iter().map(|v| 1.0 - v).collect();
        let [d, h, w] = gt.shape();
        ProbMap::new(Tensor::from_vec([2, d, h, w], [bg, fg].concat()).unwrap()).unwrap()
    }

    fn uniform(shape: [usize; 3]) -> ProbMap<f64> {
        ProbMap::new(Tensor::filled([2, shape[0], shape[1], shape[2]], 0.5)).unwrap()
    }

    #[test]
    fn perfect_prediction_costs_nothing() {
        let gt = mask(&[0, 1, 1, 0, 0, 0, 1, 0], [2, 2, 2]);
        let p = one_hot(&gt);
        assert!(soft_dice_loss(&p, &gt, DICE_SMOOTH).unwrap() < 1e-9);
        assert!(cross_entropy_loss(&p, &gt).unwrap() < 1e-12);
        assert!(seg_loss(&p, &gt).unwrap() < 1e-9);
    }

    #[test]
    fn empty_foreground_prediction_has_unit_dice_loss() {
        let gt = mask(&[0, 1, 1, 0, 0, 0, 1, 0], [2, 2, 2]);
        let bg = one_hot(&Mask::zeros([2, 2, 2]));
        let l = soft_dice_loss(&bg, &gt, DICE_SMOOTH).unwrap();
        assert!((l - 1.0).abs() < 1e-5);
    }

    #[test]
    fn uniform_prediction_closed_forms() {
        // k = 3 foreground voxels of n = 8
        let gt = mask(&[0, 1, 1, 0, 0, 0, 1, 0], [2, 2, 2]);
        let p = uniform([2, 2, 2]);
        let dice = soft_dice_loss(&p, &gt, DICE_SMOOTH).unwrap();
        // 1 - (2 * 0.5 * 3 + s) / (0.5 * 8 + 3 + s)
        let want = 1.0 - (3.0 + DICE_SMOOTH) / (7.0 + DICE_SMOOTH);
        assert!((dice - want).abs() < 1e-15);
        let ce = cross_entropy_loss(&p, &gt).unwrap();
        assert!((ce - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(seg_loss(&p, &gt).unwrap(), ce + dice);
    }

    #[test]
    fn cross_entropy_matches_voxel_loop() {
        let gt = mask(&[1, 0, 0, 1, 1, 0], [1, 2, 3]);
        let logits = random_tensor([2, 1, 2, 3], 4).map(|v| 3.0 * v);
        let p = ProbMap::new(softmax2(&logits)).unwrap();
        let mut acc = 0.0;
        for v in 0..6 {
            let label = gt.as_slice()[v] as usize;
            acc += -p.tensor().data()[label * 6 + v].ln();
        }
        assert!((cross_entropy_loss(&p, &gt).unwrap() - acc / 6.0).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let gt = Mask::zeros([2, 2, 2]);
        assert!(seg_loss(&uniform([2, 2, 1]), &gt).is_err());
    }

    #[test]
    fn substitution_example() {
        let b = LossBreakdown::from_components(BTreeMap::from([(id("AP"), 0.4), (id("VP"), 0.6)]), 0.3, 0.5);
        assert!((b.total - 0.8).abs() < 1e-15);
        let b0 = LossBreakdown::from_components(BTreeMap::from([(id("AP"), 0.4), (id("VP"), 0.6)]), 0.3, 0.0);
        assert_eq!(b0.total, 0.3);
    }

    #[test]
    fn modality_set_must_match_configuration() {
        let gt = Mask::zeros([1, 1, 2]);
        let preds = BTreeMap::from([(id("AP"), uniform([1, 1, 2]))]);
        let joint = uniform([1, 1, 2]);
        assert!(mutual_learning_loss_checked(&[id("AP"), id("VP")], &preds, &joint, &gt, 0.5).is_err());
        assert!(mutual_learning_loss_checked(&[id("AP")], &preds, &joint, &gt, 0.5).is_ok());
        assert!(mutual_learning_loss(&preds, &joint, &gt, -1.0).is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let gt = [1u8, 0, 0, 1, 1, 0, 0, 0];
        let mods = [id("AP"), id("VP")];
        let probs: Vec<Tensor<f64>> = (0..3).map(|s| softmax2(&random_tensor([2, 2, 2, 2], s))).collect();
        for mimicry in [0.0, 0.7] {
            let g = mutual_learning_with_grad(&mods, &[&probs[0], &probs[1]], &probs[2], &gt, 0.5, mimicry);
            let total = |a: &Tensor<f64>, b: &Tensor<f64>, j: &Tensor<f64>| {
                mutual_learning_with_grad(&mods, &[a, b], j, &gt, 0.5, 0.0).breakdown.total
            };
            assert!(check_input(&probs[2], &g.joint, |x| total(&probs[0], &probs[1], x), 16, 1e-6) < 1e-4);
            if mimicry == 0.0 {
                assert!(check_input(&probs[0], &g.intra[0], |x| total(x, &probs[1], &probs[2]), 16, 1e-6) < 1e-4);
                assert!(check_input(&probs[1], &g.intra[1], |x| total(&probs[0], x, &probs[2]), 16, 1e-6) < 1e-4);
            } else {
                // peers are held fixed: differentiate only the own-prediction slot
                let own = |x: &Tensor<f64>| {
                    let b = mutual_learning_with_grad(&mods, &[x, &probs[1]], &probs[2], &gt, 0.5, 0.0).breakdown.total;
                    b + mimicry * mimicry_with_grad(x, &probs[1]).0
                };
                assert!(check_input(&probs[0], &g.intra[0], own, 16, 1e-6) < 1e-4);
            }
        }
    }

    proptest! {
        #[test]
        fn total_is_affine_and_monotone_in_lambda(seed in 0u64..500, bits in prop::collection::vec(0u8..2, 8)) {
            let gt = mask(&bits, [2, 2, 2]);
            let preds: BTreeMap<ModalityId, ProbMap<f64>> = [("AP", seed), ("VP", seed + 1)]
                .into_iter()
                .map(|(m, s)| (id(m), ProbMap::new(softmax2(&random_tensor([2, 2, 2, 2], s))).unwrap()))
                .collect();
            let joint = ProbMap::new(softmax2(&random_tensor([2, 2, 2, 2], seed + 2))).unwrap();
            let at = |l: f64| mutual_learning_loss(&preds, &joint, &gt, l).unwrap();
            let (b0, b5, b1) = (at(0.0), at(0.5), at(1.0));
            let slope: f64 = b0.intra.values().sum();
            prop_assert!((b0.total - b0.joint).abs() < 1e-12);
            prop_assert!((b5.total - (b0.total + 0.5 * slope)).abs() < 1e-12);
            prop_assert!((b1.total - (b0.total + slope)).abs() < 1e-12);
            prop_assert!(b0.total <= b5.total && b5.total <= b1.total);
            prop_assert!(b0.joint >= 0.0 && b0.intra.values().all(|&v| v >= 0.0));
            prop_assert!(b5.total >= b5.joint);
        }
    }
}
