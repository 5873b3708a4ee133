//! Intensity preprocessing: percentile truncation and z-score normalization.

use crate::error::{Error, Result};
use crate::volume::Volume;

/// Default truncation bounds, in percent.
pub const CLIP_LO_PCT: f64 = 0.5;
pub const CLIP_HI_PCT: f64 = 99.5;

/// Guard added to the standard deviation so constant volumes map to zero.
pub const ZSCORE_EPS: f64 = 1e-8;

/// Percentile of already-sorted values with linear interpolation between the
/// two closest ranks (rank `q/100 * (n-1)`).
pub fn percentile_sorted(sorted: &[f64], pct: f64) -> f64 {
    assert!(!sorted.is_empty());
    let mut rank = pct * (sorted.len() - 1) as f64 / 100.0;
    if (rank - rank.round()).abs() < 1e-9 {
        rank = rank.round();
    }
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    let frac = rank - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

/// Truncates intensities to the `[lo_pct, hi_pct]` percentile range of the
/// volume's own distribution.
pub fn clip_percentile(vol: &Volume, lo_pct: f64, hi_pct: f64) -> Result<Volume> {
    if !(0.0..100.0).contains(&lo_pct) || !(lo_pct < hi_pct && hi_pct <= 100.0) {
        return Err(Error::Config(format!(
            "percentile bounds must satisfy 0 <= lo < hi <= 100, got ({lo_pct}, {hi_pct})"
        )));
    }
    let mut sorted: Vec<f64> = vol.as_slice().iter().map(|&v| v as f64).collect();
    if sorted.iter().any(|v| !v.is_finite()) {
        return Err(Error::DataQuality("non-finite intensity".into()));
    }
    sorted.sort_by(f64::total_cmp);
    let lo = percentile_sorted(&sorted, lo_pct);
    let hi = percentile_sorted(&sorted, hi_pct);
    // Bounds are rounded inward so clipped f32 values stay inside [lo, hi].
    let lo32 = round_up(lo);
    let hi32 = round_down(hi).max(lo32);
    vol.with_data(vol.data().mapv(|v| v.clamp(lo32, hi32)))
}

fn round_up(v: f64) -> f32 {
    let f = v as f32;
    if (f as f64) < v {
        f.next_up()
    } else {
        f
    }
}

fn round_down(v: f64) -> f32 {
    let f = v as f32;
    if (f as f64) > v {
        f.next_down()
    } else {
        f
    }
}

/// Mean and population standard deviation.
pub fn mean_std(values: impl IntoIterator<Item = f64>) -> (f64, f64) {
    let mut n = 0usize;
    let mut mean = 0.0;
    let mut m2 = 0.0;
    for v in values {
        n += 1;
        let delta = v - mean;
        mean += delta / n as f64;
        m2 += delta * (v - mean);
    }
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    (mean, (m2 / n as f64).max(0.0).sqrt())
}

/// Shifts and scales to zero mean and unit (population) variance.
pub fn zscore_normalize(vol: &Volume) -> Result<Volume> {
    let (mean, std) = mean_std(vol.as_slice().iter().map(|&v| v as f64));
    let scale = 1.0 / (std + ZSCORE_EPS);
    vol.with_data(vol.data().mapv(|v| ((v as f64 - mean) * scale) as f32))
}

/// The per-case pipeline applied at load time.
pub fn preprocess(vol: &Volume) -> Result<Volume> {
    zscore_normalize(&clip_percentile(vol, CLIP_LO_PCT, CLIP_HI_PCT)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::ModalityId;
    use ndarray::Array3;
    use proptest::prelude::*;

    fn vol(values: Vec<f32>, shape: (usize, usize, usize)) -> Volume {
        Volume::new(
            Array3::from_shape_vec(shape, values).unwrap(),
            [1.0; 3],
            ModalityId::new("AP").unwrap(),
        )
        .unwrap()
    }

    /// Sort-and-index oracle: value at fractional rank, computed directly.
    fn oracle_percentile(values: &[f64], pct: f64) -> f64 {
        let mut v = values.to_vec();
        v.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let pos = pct * (v.len() as f64 - 1.0) / 100.0;
        let i = pos as usize;
        if i + 1 >= v.len() {
            return v[v.len() - 1];
        }
        v[i] * (1.0 - (pos - i as f64)) + v[i + 1] * (pos - i as f64)
    }

    #[test]
    fn constant_volume_is_unchanged_by_clipping() {
        let v = vol(vec![7.0; 8], (2, 2, 2));
        assert_eq!(clip_percentile(&v, 0.5, 99.5).unwrap(), v);
        assert_eq!(clip_percentile(&v, 10.0, 20.0).unwrap(), v);
    }

    #[test]
    fn thousand_values_clip_to_interpolated_percentiles() {
        // values 1..=1000 shuffled by a fixed stride permutation
        let values: Vec<f32> = (0..1000).map(|i| ((i * 7919) % 1000 + 1) as f32).collect();
        let v = vol(values.clone(), (10, 10, 10));
        let as64: Vec<f64> = values.iter().map(|&x| x as f64).collect();
        let lo = oracle_percentile(&as64, 0.5);
        let hi = oracle_percentile(&as64, 99.5);
        // ranks 4.995 and 994.005 over sorted 1..=1000
        assert!((lo - 5.995).abs() < 1e-9, "{lo}");
        assert!((hi - 995.005).abs() < 1e-9, "{hi}");
        let out = clip_percentile(&v, 0.5, 99.5).unwrap();
        for (&o, &i) in out.as_slice().iter().zip(&values) {
            let expected = (i as f64).clamp(lo, hi);
            assert!((o as f64 - expected).abs() < 1e-4, "{i} -> {o}, want {expected}");
            assert!(o as f64 >= lo && o as f64 <= hi);
        }
    }

    #[test]
    fn full_range_is_identity() {
        let v = vol((0..27).map(|i| (i as f32).sin() * 3.0).collect(), (3, 3, 3));
        assert_eq!(clip_percentile(&v, 0.0, 100.0).unwrap(), v);
    }

    #[test]
    fn bad_percentiles_rejected() {
        let v = vol(vec![1.0; 8], (2, 2, 2));
        assert!(clip_percentile(&v, 50.0, 50.0).is_err());
        assert!(clip_percentile(&v, -1.0, 50.0).is_err());
        assert!(clip_percentile(&v, 0.0, 100.5).is_err());
    }

    #[test]
    fn zscore_constant_and_two_values() {
        let c = zscore_normalize(&vol(vec![3.0; 8], (2, 2, 2))).unwrap();
        assert!(c.as_slice().iter().all(|&v| v == 0.0));

        let two = zscore_normalize(&vol(vec![0.0, 2.0], (1, 1, 2))).unwrap();
        assert!((two.as_slice()[0] + 1.0).abs() < 1e-6);
        assert!((two.as_slice()[1] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn zscore_is_idempotent_within_tolerance() {
        let v = vol((0..64).map(|i| ((i * 37) % 11) as f32 * 0.7 - 2.0).collect(), (4, 4, 4));
        let once = zscore_normalize(&v).unwrap();
        let twice = zscore_normalize(&once).unwrap();
        for (a, b) in once.as_slice().iter().zip(twice.as_slice()) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn mean_std_uses_population_convention() {
        assert_eq!(mean_std([0.0, 1.0]), (0.5, 0.5));
        assert_eq!(mean_std([1.0]), (1.0, 0.0));
    }

    proptest! {
        #[test]
        fn zscore_postconditions(values in prop::collection::vec(-1000.0f32..1000.0, 8..200)) {
            let n = values.len();
            let v = vol(values, (1, 1, n));
            let out = zscore_normalize(&v).unwrap();
            let (mean, std) = mean_std(out.as_slice().iter().map(|&x| x as f64));
            let (_, in_std) = mean_std(v.as_slice().iter().map(|&x| x as f64));
            prop_assert!(mean.abs() <= 1e-5, "mean {}", mean);
            if in_std > 1e-3 {
                prop_assert!((std - 1.0).abs() <= 1e-4, "std {}", std);
            }
        }

        #[test]
        fn clipping_is_idempotent_at_integral_ranks(values in prop::collection::vec(-50.0f32..50.0, 3..150),
                                                    a in 0usize..1000, b in 0usize..1000) {
            let n = values.len();
            let (ka, kb) = (a % (n - 1), b % (n - 1));
            let (k_lo, k_hi) = (ka.min(kb), ka.max(kb) + 1);
            let lo = 100.0 * k_lo as f64 / (n - 1) as f64;
            let hi = 100.0 * k_hi as f64 / (n - 1) as f64;
            let v = vol(values, (1, n, 1));
            let once = clip_percentile(&v, lo, hi).unwrap();
            let twice = clip_percentile(&once, lo, hi).unwrap();
            prop_assert_eq!(once, twice);
        }

        #[test]
        fn second_clip_stays_inside_first_bounds(values in prop::collection::vec(-50.0f32..50.0, 2..150),
                                                 lo in 0.0f64..40.0, width in 1.0f64..60.0) {
            let n = values.len();
            let v = vol(values, (1, n, 1));
            let once = clip_percentile(&v, lo, lo + width).unwrap();
            let twice = clip_percentile(&once, lo, lo + width).unwrap();
            let min = once.as_slice().iter().cloned().fold(f32::INFINITY, f32::min);
            let max = once.as_slice().iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            prop_assert!(twice.as_slice().iter().all(|&x| x >= min && x <= max));
        }
    }
}
