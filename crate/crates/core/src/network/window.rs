use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Window origins along one axis: evenly stepped, with the last window
/// flush against the far edge.
pub fn tile_starts(extent: usize, roi: usize, overlap: f64) -> Vec<usize> {
    if extent <= roi {
        return vec![0];
    }
    let step = ((roi as f64 * (1.0 - overlap)).floor() as usize).max(1);
    let mut starts: Vec<usize> = (0..=extent - roi).step_by(step).collect();
    if *starts.last().unwrap() != extent - roi {
        starts.push(extent - roi);
    }
    starts
}

/// Separable Gaussian weights over a window with σ = roi / 8 per axis,
/// centred at `(roi - 1) / 2`.
pub fn gaussian_importance(roi: [usize; 3]) -> Tensor<f32> {
    let axis = |n: usize| -> Vec<f64> {
        let sigma = n as f64 / 8.0;
        let centre = (n as f64 - 1.0) / 2.0;
        (0..n).map(|i| (-0.5 * ((i as f64 - centre) / sigma).powi(2)).exp()).collect()
    };
    let (a, b, c) = (axis(roi[0]), axis(roi[1]), axis(roi[2]));
    Tensor::from_fn(roi.to_vec(), |i| {
        let (z, rest) = (i / (roi[1] * roi[2]), i % (roi[1] * roi[2]));
        (a[z] * b[rest / roi[2]] * c[rest % roi[2]]) as f32
    })
}

/// Gaussian-blended tiled prediction of a `[C_in, D, H, W]` volume.
///
/// `predict` maps one `[1, C_in, rd, rh, rw]` window to `[1, C_out, rd, rh, rw]`.
/// Windows are predicted in parallel and blended in a fixed order, so the
/// result does not depend on scheduling.
pub fn sliding_window<F>(volume: &Tensor<f32>, roi: [usize; 3], overlap: f64, predict: F) -> Result<Tensor<f32>>
where
    F: Fn(&Tensor<f32>) -> Result<Tensor<f32>> + Sync,
{
    if !(0.0..1.0).contains(&overlap) {
        return Err(Error::Config(format!("sliding window: overlap must lie in [0, 1), got {overlap}")));
    }
    let shape = volume.shape();
    if shape.len() != 4 {
        return Err(Error::shape("sliding_window", format!("expected [C, D, H, W], got {shape:?}")));
    }
    let (channels, ext) = (shape[0], [shape[1], shape[2], shape[3]]);
    for axis in 0..3 {
        if roi[axis] == 0 || roi[axis] > ext[axis] {
            return Err(Error::shape(
                "sliding_window",
                format!("window {roi:?} does not fit the volume {ext:?} on axis {}", axis + 1),
            ));
        }
    }
    let starts: [Vec<usize>; 3] = std::array::from_fn(|a| tile_starts(ext[a], roi[a], overlap));
    let mut origins = Vec::new();
    for &z in &starts[0] {
        for &y in &starts[1] {
            for &x in &starts[2] {
                origins.push([z, y, x]);
            }
        }
    }
    let window = roi[0] * roi[1] * roi[2];
    let preds: Vec<Tensor<f32>> = origins
        .par_iter()
        .map(|o| {
            let patch = Tensor::from_fn(vec![1, channels, roi[0], roi[1], roi[2]], |i| {
                let (c, r) = (i / window, i % window);
                let (z, r) = (r / (roi[1] * roi[2]), r % (roi[1] * roi[2]));
                let (y, x) = (r / roi[2], r % roi[2]);
                volume.data()[((c * ext[0] + o[0] + z) * ext[1] + o[1] + y) * ext[2] + o[2] + x]
            });
            let out = predict(&patch)?;
            let s = out.shape();
            if s.len() != 5 || s[0] != 1 || s[2..] != roi[..] {
                return Err(Error::shape("sliding_window", format!("predictor returned {s:?} for window {roi:?}")));
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    let out_channels = preds[0].shape()[1];
    let weight = gaussian_importance(roi);
    let voxels = ext[0] * ext[1] * ext[2];
    let mut acc = vec![0.0f64; out_channels * voxels];
    let mut norm = vec![0.0f64; voxels];
    for (o, pred) in origins.iter().zip(&preds) {
        for z in 0..roi[0] {
            for y in 0..roi[1] {
                for x in 0..roi[2] {
                    let local = (z * roi[1] + y) * roi[2] + x;
                    let global = ((o[0] + z) * ext[1] + o[1] + y) * ext[2] + o[2] + x;
                    let w = weight.data()[local] as f64;
                    norm[global] += w;
                    for c in 0..out_channels {
                        acc[c * voxels + global] += w * pred.data()[c * window + local] as f64;
                    }
                }
            }
        }
    }
    let data = acc.iter().enumerate().map(|(i, &a)| (a / norm[i % voxels]) as f32).collect();
    Tensor::new(vec![out_channels, ext[0], ext[1], ext[2]], data)
}
