use super::{Element, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Source taps for one axis under the half-pixel (align-corners = false)
/// convention: `(lower index, upper index, upper weight)` per output sample.
pub(crate) fn linear_taps(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(input - 1);
            let hi = (lo + 1).min(input - 1);
            (lo, hi, src - lo as f64)
        })
        .collect()
}

impl<T: Element> Tape<T> {
    /// Trilinear resampling of `[N, C, D, H, W]` to new spatial extents.
    pub fn resize_trilinear(&mut self, x: Var, target: [usize; 3]) -> Result<Var> {
        let [n, c, d, h, w] = self.value(x).dims5()?;
        if target.contains(&0) {
            return Err(Error::shape("resize_trilinear", format!("target {target:?} has a zero extent")));
        }
        if target == [d, h, w] {
            let out = self.value(x).clone();
            return self.record("resize_trilinear", out, &[x], |g| vec![Some(g.grad.clone())]);
        }
        let taps = [linear_taps(d, target[0]), linear_taps(h, target[1]), linear_taps(w, target[2])];
        let in_plane = d * h * w;
        let out_plane: usize = target.iter().product();
        let src = self.value(x).data();
        let mut out = vec![T::zero(); n * c * out_plane];
        for p in 0..n * c {
            let s = &src[p * in_plane..][..in_plane];
            let dst = &mut out[p * out_plane..][..out_plane];
            for_each_corner(&taps, [h, w], target, |o, i, wt| {
                dst[o] = dst[o] + T::lit(wt) * s[i];
            });
        }
        let out = Tensor::new(vec![n, c, target[0], target[1], target[2]], out)?;
        self.record("resize_trilinear", out, &[x], move |g| {
            let gd = g.grad.data();
            let mut dx = vec![T::zero(); n * c * in_plane];
            for p in 0..n * c {
                let gsrc = &gd[p * out_plane..][..out_plane];
                let dst = &mut dx[p * in_plane..][..in_plane];
                for_each_corner(&taps, [h, w], target, |o, i, wt| {
                    dst[i] = dst[i] + T::lit(wt) * gsrc[o];
                });
            }
            vec![Some(Tensor::new(g.inputs[0].shape().to_vec(), dx).unwrap())]
        })
    }
}

/// Calls `f(out_index, in_index, weight)` for each of the eight corners of every output voxel.
fn for_each_corner(
    taps: &[Vec<(usize, usize, f64)>; 3],
    [h, w]: [usize; 2],
    target: [usize; 3],
    mut f: impl FnMut(usize, usize, f64),
) {
    for (od, &(d0, d1, fd)) in taps[0].iter().enumerate() {
        for (oh, &(h0, h1, fh)) in taps[1].iter().enumerate() {
            for (ow, &(w0, w1, fw)) in taps[2].iter().enumerate() {
                let o = (od * target[1] + oh) * target[2] + ow;
                for (di, wd) in [(d0, 1.0 - fd), (d1, fd)] {
                    for (hi, wh) in [(h0, 1.0 - fh), (h1, fh)] {
                        for (wi, ww) in [(w0, 1.0 - fw), (w1, fw)] {
                            let wt = wd * wh * ww;
                            if wt != 0.0 {
                                f(o, (di * h + hi) * w + wi, wt);
                            }
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn resize(x: Tensor<f64>, target: [usize; 3]) -> Tensor<f64> {
        let mut tape = Tape::new();
        let v = tape.constant(x);
        let y = tape.resize_trilinear(v, target).unwrap();
        tape.value(y).clone()
    }

    #[test]
    fn same_shape_is_bitwise_identity() {
        let x = Tensor::from_fn(vec![1, 2, 3, 4, 5], |i| (i as f64).sqrt());
        assert_eq!(resize(x.clone(), [3, 4, 5]), x);
    }

    #[test]
    fn constant_volume_stays_constant() {
        let x = Tensor::full(vec![1, 1, 2, 3, 2], 4.25);
        let y = resize(x, [5, 7, 8]);
        assert!(y.data().iter().all(|&v| (v - 4.25).abs() < 1e-14));
    }

    #[test]
    fn line_upsampled_with_half_pixel_centers() {
        // Source centres sit at 0.25 and 0.75 of the line; the outer output
        // samples fall outside them and clamp to the edge values.
        let x = Tensor::new(vec![1, 1, 1, 1, 2], vec![0.0, 1.0]).unwrap();
        let y = resize(x, [1, 1, 4]);
        assert_eq!(y.data(), &[0.0, 0.25, 0.75, 1.0]);
    }

    #[test]
    fn line_extends_per_axis_in_3d() {
        let x = Tensor::new(vec![1, 1, 2, 1, 1], vec![0.0, 1.0]).unwrap();
        let y = resize(x, [4, 2, 3]);
        for d in 0..4 {
            let expect = [0.0, 0.25, 0.75, 1.0][d];
            for i in 0..6 {
                assert_eq!(y.data()[d * 6 + i], expect);
            }
        }
    }
}
