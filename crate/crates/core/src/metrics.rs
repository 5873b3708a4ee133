//! Overlap and surface-distance metrics for binary segmentations.
//!
//! Conventions:
//! - Dice of two empty masks is 1.0; exactly one empty mask gives 0.0.
//! - Surfaces use 6-connectivity: a foreground voxel is on the surface when a
//!   face neighbour is background or lies outside the volume.
//! - ASSD is undefined when either mask is empty and is returned as `None`;
//!   aggregates skip such cases and report how many were skipped.
//! - Standard deviations are population (divide by N).

use ndarray::Array3;

use crate::error::{Error, Result};
use crate::preprocess::mean_std;
use crate::volume::Mask;

fn check_shapes(pred: &Mask, gt: &Mask) -> Result<()> {
    if pred.shape() != gt.shape() {
        return Err(Error::Shape(format!(
            "prediction {:?} vs ground truth {:?}",
            pred.shape(),
            gt.shape()
        )));
    }
    Ok(())
}

/// `2|P ∩ G| / (|P| + |G|)`.
pub fn dice_score(pred: &Mask, gt: &Mask) -> Result<f64> {
    check_shapes(pred, gt)?;
    let (mut inter, mut p, mut g) = (0usize, 0usize, 0usize);
    for (&a, &b) in pred.as_slice().iter().zip(gt.as_slice()) {
        p += a as usize;
        g += b as usize;
        inter += (a & b) as usize;
    }
    if p + g == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (p + g) as f64)
}

/// Foreground voxels touching background (or the border) across a face.
pub fn surface(mask: &Mask) -> Array3<bool> {
    let data = mask.data();
    let [d, h, w] = mask.shape();
    Array3::from_shape_fn((d, h, w), |(z, y, x)| {
        if data[[z, y, x]] == 0 {
            return false;
        }
        let outside_or_bg = |dz: isize, dy: isize, dx: isize| {
            let (nz, ny, nx) = (z as isize + dz, y as isize + dy, x as isize + dx);
            if nz < 0 || ny < 0 || nx < 0 || nz >= d as isize || ny >= h as isize || nx >= w as isize {
                return true;
            }
            data[[nz as usize, ny as usize, nx as usize]] == 0
        };
        outside_or_bg(-1, 0, 0)
            || outside_or_bg(1, 0, 0)
            || outside_or_bg(0, -1, 0)
            || outside_or_bg(0, 1, 0)
            || outside_or_bg(0, 0, -1)
            || outside_or_bg(0, 0, 1)
    })
}

/// One pass of the lower-envelope squared distance transform along a line.
fn edt_line(f: &[f64], spacing: f64, out: &mut [f64], v: &mut Vec<usize>, z: &mut Vec<f64>) {
    let n = f.len();
    v.clear();
    z.clear();
    let s2 = spacing * spacing;
    for q in 0..n {
        if f[q].is_infinite() {
            continue;
        }
        loop {
            match v.last() {
                None => {
                    v.push(q);
                    z.push(f64::NEG_INFINITY);
                    break;
                }
                Some(&p) => {
                    let qf = q as f64;
                    let pf = p as f64;
                    let s = ((f[q] + s2 * qf * qf) - (f[p] + s2 * pf * pf)) / (2.0 * s2 * (qf - pf));
                    if s <= *z.last().unwrap() {
                        v.pop();
                        z.pop();
                    } else {
                        v.push(q);
                        z.push(s);
                        break;
                    }
                }
            }
        }
    }
    if v.is_empty() {
        out.iter_mut().for_each(|o| *o = f64::INFINITY);
        return;
    }
    let mut k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while k + 1 < v.len() && z[k + 1] < q as f64 {
            k += 1;
        }
        let step = (q as f64 - v[k] as f64) * spacing;
        *o = step * step + f[v[k]];
    }
}

/// Squared Euclidean distance (physical units) from every voxel to the nearest
/// `true` site.
pub fn squared_distance_to(sites: &Array3<bool>, spacing: [f64; 3]) -> Array3<f64> {
    let mut dist = sites.mapv(|s| if s { 0.0 } else { f64::INFINITY });
    let (mut v, mut z) = (Vec::new(), Vec::new());
    // innermost axis first
    for axis in (0..3).rev() {
        let len = dist.shape()[axis];
        let mut line = vec![0.0; len];
        let mut out = vec![0.0; len];
        for mut lane in dist.lanes_mut(ndarray::Axis(axis)) {
            line.iter_mut().zip(lane.iter()).for_each(|(l, &d)| *l = d);
            edt_line(&line, spacing[axis], &mut out, &mut v, &mut z);
            lane.iter_mut().zip(&out).for_each(|(d, &o)| *d = o);
        }
    }
    dist
}

/// Average symmetric surface distance in physical units given by `spacing`.
///
/// Returns `Ok(None)` when either mask is empty.
pub fn assd(pred: &Mask, gt: &Mask, spacing: [f64; 3]) -> Result<Option<f64>> {
    check_shapes(pred, gt)?;
    if spacing.iter().any(|&s| !(s > 0.0)) {
        return Err(Error::Config(format!("spacing must be positive, got {spacing:?}")));
    }
    if pred.is_empty() || gt.is_empty() {
        return Ok(None);
    }
    let sp = surface(pred);
    let sg = surface(gt);
    let to_g = squared_distance_to(&sg, spacing);
    let to_p = squared_distance_to(&sp, spacing);
    let directed = |from: &Array3<bool>, dist: &Array3<f64>| {
        let mut sum = 0.0;
        let mut count = 0usize;
        for (&on, &d2) in from.iter().zip(dist.iter()) {
            if on {
                sum += d2.sqrt();
                count += 1;
            }
        }
        (sum, count)
    };
    let (sum_p, n_p) = directed(&sp, &to_g);
    let (sum_g, n_g) = directed(&sg, &to_p);
    Ok(Some((sum_p + sum_g) / (n_p + n_g) as f64))
}

/// Mean and population standard deviation of per-case values.
pub fn aggregate_per_case(values: &[f64]) -> Result<(f64, f64)> {
    if values.is_empty() {
        return Err(Error::Empty("no per-case values to aggregate".into()));
    }
    Ok(mean_std(values.iter().copied()))
}
