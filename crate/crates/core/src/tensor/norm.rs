use rayon::prelude::*;

use super::{Element, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Per-(sample, channel) mean and inverse standard deviation.
fn moments<T: Element>(x: &[T], plane: usize, eps: T) -> Vec<(T, T)> {
    x.par_chunks(plane)
        .map(|p| {
            let n = T::lit(plane as f64);
            let mean = p.iter().fold(T::zero(), |a, &v| a + v) / n;
            let var = p.iter().fold(T::zero(), |a, &v| a + (v - mean) * (v - mean)) / n;
            (mean, T::one() / (var + eps).sqrt())
        })
        .collect()
}

impl<T: Element> Tape<T> {
    /// Instance normalization over the spatial axes of `[N, C, D, H, W]`
    /// followed by a per-channel affine `gain * x̂ + bias`.
    pub fn instance_norm3d(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let [n, c, d, h, w] = self.value(x).dims5()?;
        let plane = d * h * w;
        if plane < 2 {
            return Err(Error::shape(
                "instance_norm3d",
                format!("need at least 2 voxels per channel, got {plane}"),
            ));
        }
        if !(eps > 0.0) {
            return Err(Error::Config(format!("instance_norm3d: eps must be positive, got {eps}")));
        }
        for (name, v) in [("gain", gain), ("bias", bias)] {
            if self.shape(v) != [c] {
                return Err(Error::shape(
                    "instance_norm3d",
                    format!("{name} must be [{c}], got {:?}", self.shape(v)),
                ));
            }
        }
        let eps = T::lit(eps);
        let xs = self.value(x).data();
        let stats = moments(xs, plane, eps);
        let (gv, bv) = (self.value(gain).data(), self.value(bias).data());
        let mut out = vec![T::zero(); xs.len()];
        out.par_chunks_mut(plane).enumerate().for_each(|(p, dst)| {
            let ch = p % c;
            let (mean, inv) = stats[p];
            for (o, &v) in dst.iter_mut().zip(&xs[p * plane..][..plane]) {
                *o = gv[ch] * (v - mean) * inv + bv[ch];
            }
        });
        let out = Tensor::new(vec![n, c, d, h, w], out)?;
        self.record("instance_norm3d", out, &[x, gain, bias], move |a| {
            let xs = a.inputs[0].data();
            let gv = a.inputs[1].data();
            let gd = a.grad.data();
            let stats = moments(xs, plane, eps);
            let np = T::lit(plane as f64);
            // Per plane: sum(dy), sum(dy * x̂)
            let sums: Vec<(T, T)> = (0..n * c)
                .into_par_iter()
                .map(|p| {
                    let (mean, inv) = stats[p];
                    let (mut s, mut sx) = (T::zero(), T::zero());
                    for (&dy, &v) in gd[p * plane..][..plane].iter().zip(&xs[p * plane..][..plane]) {
                        s = s + dy;
                        sx = sx + dy * (v - mean) * inv;
                    }
                    (s, sx)
                })
                .collect();
            let dx = a.needs[0].then(|| {
                let mut dx = vec![T::zero(); xs.len()];
                dx.par_chunks_mut(plane).enumerate().for_each(|(p, dst)| {
                    let ch = p % c;
                    let (mean, inv) = stats[p];
                    let (s, sx) = sums[p];
                    let src = &xs[p * plane..][..plane];
                    let gsrc = &gd[p * plane..][..plane];
                    for i in 0..plane {
                        let xhat = (src[i] - mean) * inv;
                        dst[i] = gv[ch] * inv * (gsrc[i] - s / np - xhat * sx / np);
                    }
                });
                Tensor::new(a.inputs[0].shape().to_vec(), dx).unwrap()
            });
            let mut dgain = vec![T::zero(); c];
            let mut dbias = vec![T::zero(); c];
            for (p, &(s, sx)) in sums.iter().enumerate() {
                dgain[p % c] = dgain[p % c] + sx;
                dbias[p % c] = dbias[p % c] + s;
            }
            vec![
                dx,
                Some(Tensor::new(vec![c], dgain).unwrap()),
                Some(Tensor::new(vec![c], dbias).unwrap()),
            ]
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn norm(x: Tensor<f64>, gain: f64, bias: f64) -> Tensor<f64> {
        let c = x.shape()[1];
        let mut tape = Tape::new();
        let x = tape.constant(x);
        let g = tape.constant(Tensor::full(vec![c], gain));
        let b = tape.constant(Tensor::full(vec![c], bias));
        let y = tape.instance_norm3d(x, g, b, 1e-5).unwrap();
        tape.value(y).clone()
    }

    #[test]
    fn constant_channel_normalizes_to_zero() {
        let y = norm(Tensor::full(vec![1, 2, 2, 2, 2], 7.0), 1.0, 0.0);
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn two_values_map_to_unit_pair() {
        let x = Tensor::new(vec![1, 1, 1, 1, 2], vec![1.0, 3.0]).unwrap();
        let y = norm(x, 1.0, 0.0);
        let expect = 1.0 / (1.0f64 + 1e-5).sqrt();
        assert!((y.data()[0] + expect).abs() < 1e-15);
        assert!((y.data()[1] - expect).abs() < 1e-15);
    }

    #[test]
    fn affine_law() {
        let x = Tensor::from_fn(vec![2, 3, 2, 2, 3], |i| ((i * 7919) % 13) as f64);
        let plain = norm(x.clone(), 1.0, 0.0);
        let affine = norm(x, 2.0, 5.0);
        assert!(affine.max_abs_diff(&plain.map(|v| 2.0 * v + 5.0)) < 1e-12);
    }

    #[test]
    fn single_voxel_is_rejected() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::ones(vec![1, 1, 1, 1, 1]));
        let g = tape.constant(Tensor::ones(vec![1]));
        let b = tape.constant(Tensor::zeros(vec![1]));
        assert!(tape.instance_norm3d(x, g, b, 1e-5).is_err());
    }
}
