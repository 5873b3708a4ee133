use std::collections::BTreeMap;

use ndarray::s;

use crate::engine::checkpoint::TrainedModel;
use crate::engine::model::{MamlModel, Network};
use crate::error::{Error, Result};
use crate::fusion::AttentionMap;
use crate::tensor::Tensor;
use crate::volume::{Mask, ModalityId, MultiModalCase, ProbMap, Volume};

/// Window origins along one axis: stride of half a window, with the last
/// window flush against the far edge.
pub fn window_starts(extent: usize, window: usize) -> Vec<usize> {
    if window >= extent {
        return vec![0];
    }
    let stride = (window / 2).max(1);
    let mut starts: Vec<usize> = (0..).map(|k| k * stride).take_while(|&s| s + window < extent).collect();
    starts.push(extent - window);
    starts.dedup();
    starts
}

fn window_tensor(vol: &Volume, start: [usize; 3], size: [usize; 3]) -> Tensor<f32> {
    let view = vol.data().slice(s![
        start[0]..start[0] + size[0],
        start[1]..start[1] + size[1],
        start[2]..start[2] + size[2]
    ]);
    Tensor::from_vec([1, size[0], size[1], size[2]], view.iter().copied().collect()).expect("window shape")
}

/// Runs `f` on every window and averages the per-voxel outputs uniformly
/// over the windows covering each voxel.
fn stitch(
    shape: [usize; 3],
    window: [usize; 3],
    mut f: impl FnMut([usize; 3], [usize; 3]) -> Result<Vec<Tensor<f32>>>,
) -> Result<Vec<Tensor<f32>>> {
    let size: [usize; 3] = std::array::from_fn(|k| window[k].min(shape[k]));
    let starts: [Vec<usize>; 3] = std::array::from_fn(|k| window_starts(shape[k], size[k]));
    let mut sums: Vec<(usize, Vec<f64>)> = Vec::new();
    let mut counts = vec![0u32; shape.iter().product()];
    let (hw, w) = (shape[1] * shape[2], shape[2]);
    for &z0 in &starts[0] {
        for &y0 in &starts[1] {
            for &x0 in &starts[2] {
                let outs = f([z0, y0, x0], size)?;
                if sums.is_empty() {
                    sums = outs.iter().map(|o| (o.channels(), vec![0.0; o.channels() * counts.len()])).collect();
                }
                for (z, y, x) in window_voxels(size) {
                    counts[(z0 + z) * hw + (y0 + y) * w + x0 + x] += 1;
                }
                for ((c, acc), out) in sums.iter_mut().zip(&outs) {
                    for ch in 0..*c {
                        let src = out.channel(ch);
                        let dst = &mut acc[ch * counts.len()..(ch + 1) * counts.len()];
                        for (i, (z, y, x)) in window_voxels(size).enumerate() {
                            dst[(z0 + z) * hw + (y0 + y) * w + x0 + x] += src[i] as f64;
                        }
                    }
                }
            }
        }
    }
    let n = counts.len();
    Ok(sums
        .into_iter()
        .map(|(c, acc)| {
            let data = acc.iter().enumerate().map(|(i, v)| (v / counts[i % n] as f64) as f32).collect();
            Tensor::from_vec([c, shape[0], shape[1], shape[2]], data).expect("stitched shape")
        })
        .collect())
}

fn window_voxels(size: [usize; 3]) -> impl Iterator<Item = (usize, usize, usize)> {
    (0..size[0]).flat_map(move |z| (0..size[1]).flat_map(move |y| (0..size[2]).map(move |x| (z, y, x))))
}

#[derive(Clone, Debug)]
pub struct MultimodalPrediction {
    pub mask: Mask,
    pub joint: ProbMap<f32>,
    pub intra: BTreeMap<ModalityId, ProbMap<f32>>,
    pub attention: BTreeMap<ModalityId, AttentionMap<f32>>,
}

/// Fused prediction over the whole case using overlapping windows of size
/// `window` (clamped to the volume).
pub fn predict_multimodal(case: &MultiModalCase, model: &MamlModel<f32>, window: [usize; 3]) -> Result<MultimodalPrediction> {
    let mods = model.modalities();
    let vols = mods
        .iter()
        .map(|m| {
            case.volumes().get(m).ok_or_else(|| {
                Error::UnknownModality(format!(
                    "case {} lacks {m}; use single-modality prediction instead",
                    case.case_id()
                ))
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut outs = stitch(case.shape(), window, |start, size| {
        let inputs: Vec<Tensor<f32>> = vols.iter().map(|v| window_tensor(v, start, size)).collect();
        let fwd = model.forward(&inputs)?;
        let mut o = vec![fwd.joint];
        o.extend(fwd.intra);
        o.extend(fwd.attention);
        Ok(o)
    })?
    .into_iter();
    let joint = ProbMap::new(outs.next().expect("joint output"))?;
    let intra = mods
        .iter()
        .map(|m| Ok((m.clone(), ProbMap::new(outs.next().expect("intra output"))?)))
        .collect::<Result<_>>()?;
    let attention = mods
        .iter()
        .map(|m| {
            let data = outs.next().expect("attention output");
            (m.clone(), AttentionMap { data, modality: m.clone() })
        })
        .collect();
    Ok(MultimodalPrediction {
        mask: joint.argmax(),
        joint,
        intra,
        attention,
    })
}

/// Probabilities from one modality's backbone and head; no other modality
/// and no fusion parameter is involved.
pub fn predict_single_probs(vol: &Volume, modality: &ModalityId, model: &TrainedModel, window: [usize; 3]) -> Result<ProbMap<f32>> {
    if vol.modality() != modality {
        return Err(Error::UnknownModality(format!(
            "volume is tagged {} but {modality} was requested",
            vol.modality()
        )));
    }
    let out = stitch(vol.shape(), window, |start, size| {
        Ok(vec![model.predict_intra(modality, &window_tensor(vol, start, size))?])
    })?;
    ProbMap::new(out.into_iter().next().expect("single output"))
}

pub fn predict_single(vol: &Volume, modality: &ModalityId, model: &TrainedModel, window: [usize; 3]) -> Result<Mask> {
    Ok(predict_single_probs(vol, modality, model, window)?.argmax())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::BackboneConfig;
    use crate::data::{case_rng, generate_synthetic, preprocess_case, SynthSpec};
    use crate::fusion::FusionConfig;

    #[test]
    fn windows_cover_the_axis() {
        assert_eq!(window_starts(32, 16), vec![0, 8, 16]);
        assert_eq!(window_starts(16, 16), vec![0]);
        assert_eq!(window_starts(8, 16), vec![0]);
        assert_eq!(window_starts(20, 8), vec![0, 4, 8, 12]);
        assert_eq!(window_starts(18, 8), vec![0, 4, 8, 10]);
    }

    #[test]
    fn stitching_averages_constant_outputs_exactly() {
        // every window emits the same uniform distribution
        let out = stitch([12, 8, 20], [8, 8, 8], |_, size| {
            Ok(vec![Tensor::filled([2, size[0], size[1], size[2]], 0.5)])
        })
        .unwrap();
        assert!(out[0].data().iter().all(|&v| v == 0.5));
        let window_index = stitch([12, 8, 8], [8, 8, 8], |start, size| {
            Ok(vec![Tensor::filled([1, size[0], size[1], size[2]], start[0] as f32)])
        })
        .unwrap();
        // z < 4 only seen by the first window, z >= 8 only by the last (start 4)
        assert_eq!(window_index[0].data()[0], 0.0);
        assert_eq!(window_index[0].data()[11 * 64], 4.0);
        assert_eq!(window_index[0].data()[5 * 64], 2.0);
    }

    fn setup() -> (MultiModalCase, MamlModel<f32>) {
        let spec = SynthSpec {
            num_cases: 1,
            shape: [16, 16, 24],
            lesion_radius_range: [3.0, 3.5],
            lesion_count_range: [1, 1],
            distractor_count_range: [0, 0],
            ..SynthSpec::default()
        };
        let case = preprocess_case(&generate_synthetic(&spec).unwrap()[0].case).unwrap();
        let bb = BackboneConfig {
            levels: 2,
            base_channels: 2,
            feature_channels: 4,
            ..BackboneConfig::default()
        };
        let mods = case.modalities();
        (case, MamlModel::new(&mods, &bb, &FusionConfig::default(), &mut case_rng(1, 1)).unwrap())
    }

    #[test]
    fn stitched_outputs_are_distributions() {
        let (case, model) = setup();
        let p = predict_multimodal(&case, &model, [8, 8, 8]).unwrap();
        p.joint.validate(1e-5).unwrap();
        for ip in p.intra.values() {
            ip.validate(1e-5).unwrap();
        }
        for a in p.attention.values() {
            assert_eq!(a.data.spatial(), case.shape());
            assert!(a.data.data().iter().all(|&v| v > 0.0 && v < 1.0));
        }
    }

    #[test]
    fn single_window_path_matches_direct_forward() {
        let (case, model) = setup();
        let p = predict_multimodal(&case, &model, case.shape()).unwrap();
        let inputs: Vec<_> = case.volumes().values().map(|v| v.to_tensor()).collect();
        let fwd = model.forward(&inputs).unwrap();
        assert_eq!(p.joint.tensor(), &fwd.joint);
        let trained = TrainedModel::Maml(model);
        for (i, (m, v)) in case.volumes().iter().enumerate() {
            let single = predict_single_probs(v, m, &trained, case.shape()).unwrap();
            assert_eq!(single.tensor(), &fwd.intra[i]);
            assert_eq!(single.tensor(), p.intra[m].tensor());
        }
    }

    #[test]
    fn single_path_ignores_other_modalities() {
        let (case, model) = setup();
        let trained = TrainedModel::Maml(model);
        let ap = ModalityId::new("AP").unwrap();
        let a = predict_single(case.volume(&ap).unwrap(), &ap, &trained, [8; 3]).unwrap();
        // the call takes only the AP volume, so the VP volume cannot matter;
        // check the windowed intra output of a multimodal pass agrees
        let TrainedModel::Maml(m) = &trained else { unreachable!() };
        let full = predict_multimodal(&case, m, [8; 3]).unwrap();
        assert_eq!(full.intra[&ap].argmax(), a);
        let unknown = ModalityId::new("T1").unwrap();
        assert!(predict_single(case.volume(&ap).unwrap(), &unknown, &trained, [8; 3]).is_err());
    }
}
