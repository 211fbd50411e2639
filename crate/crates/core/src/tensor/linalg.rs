use rayon::prelude::*;

use super::{Element, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// `[B, M, K]` view of a 2-D or 3-D tensor shape.
fn batched(shape: &[usize]) -> Option<(usize, usize, usize)> {
    match *shape {
        [m, k] => Some((1, m, k)),
        [b, m, k] => Some((b, m, k)),
        _ => None,
    }
}

/// C[b] = A[b] · B[b] for row-major `[M, K] x [K, N]` blocks.
fn bmm<T: Element>(a: &[T], b: &[T], batch: usize, m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); batch * m * n];
    c.par_chunks_mut(n).enumerate().for_each(|(row, dst)| {
        let (bi, i) = (row / m, row % m);
        let a_row = &a[(bi * m + i) * k..][..k];
        let b_mat = &b[bi * k * n..][..k * n];
        for (p, &av) in a_row.iter().enumerate() {
            let b_row = &b_mat[p * n..][..n];
            for (d, &bv) in dst.iter_mut().zip(b_row) {
                *d = *d + av * bv;
            }
        }
    });
    c
}

/// C[b] = A[b] · B[b]ᵀ for `[M, K] x [N, K]` blocks.
fn bmm_nt<T: Element>(a: &[T], b: &[T], batch: usize, m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); batch * m * n];
    c.par_chunks_mut(n).enumerate().for_each(|(row, dst)| {
        let (bi, i) = (row / m, row % m);
        let a_row = &a[(bi * m + i) * k..][..k];
        for (j, d) in dst.iter_mut().enumerate() {
            let b_row = &b[(bi * n + j) * k..][..k];
            *d = a_row.iter().zip(b_row).fold(T::zero(), |acc, (&x, &y)| acc + x * y);
        }
    });
    c
}

/// C[b] = A[b]ᵀ · B[b] for `[K, M] x [K, N]` blocks.
fn bmm_tn<T: Element>(a: &[T], b: &[T], batch: usize, m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); batch * m * n];
    c.par_chunks_mut(n).enumerate().for_each(|(row, dst)| {
        let (bi, i) = (row / m, row % m);
        for p in 0..k {
            let av = a[(bi * k + p) * m + i];
            let b_row = &b[(bi * k + p) * n..][..n];
            for (d, &bv) in dst.iter_mut().zip(b_row) {
                *d = *d + av * bv;
            }
        }
    });
    c
}

impl<T: Element> Tape<T> {
    /// Matrix product of 2-D tensors or batched product of 3-D tensors.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let ((ba, m, k), (bb, k2, n)) = match (batched(&sa), batched(&sb)) {
            (Some(x), Some(y)) if sa.len() == sb.len() => (x, y),
            _ => return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}"))),
        };
        if ba != bb || k != k2 {
            return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}")));
        }
        let data = bmm(self.value(a).data(), self.value(b).data(), ba, m, k, n);
        let mut shape = sa.clone();
        *shape.last_mut().unwrap() = n;
        let out = Tensor::new(shape, data)?;
        self.record("matmul", out, &[a, b], move |g| {
            let (av, bv, gd) = (g.inputs[0], g.inputs[1], g.grad.data());
            vec![
                g.needs[0].then(|| Tensor::new(av.shape().to_vec(), bmm_nt(gd, bv.data(), ba, m, n, k)).unwrap()),
                g.needs[1].then(|| Tensor::new(bv.shape().to_vec(), bmm_tn(av.data(), gd, ba, k, m, n)).unwrap()),
            ]
        })
    }

    /// Swaps the last two axes of a 2-D or 3-D tensor.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let (b, m, n) = batched(&s).ok_or_else(|| Error::shape("transpose", format!("{s:?}")))?;
        let out = transpose_data(self.value(x).data(), b, m, n);
        let mut shape = s.clone();
        let r = shape.len();
        shape.swap(r - 1, r - 2);
        let out = Tensor::new(shape, out)?;
        self.record("transpose", out, &[x], move |g| {
            vec![Some(Tensor::new(g.inputs[0].shape().to_vec(), transpose_data(g.grad.data(), b, n, m)).unwrap())]
        })
    }

    /// Affine map over the last axis: `y = x Wᵀ + b` with `W` of shape `[out, in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        let fin = *sx.last().unwrap();
        if sw.len() != 2 || sw[1] != fin {
            return Err(Error::shape("linear", format!("input {sx:?} with weight {sw:?}")));
        }
        let fout = sw[0];
        if let Some(b) = b {
            if self.shape(b) != [fout] {
                return Err(Error::shape("linear", format!("bias {:?}, expected [{fout}]", self.shape(b))));
            }
        }
        let rows = self.value(x).numel() / fin;
        let mut data = bmm_nt(self.value(x).data(), self.value(w).data(), 1, rows, fin, fout);
        if let Some(b) = b {
            let bias = self.value(b).data();
            for row in data.chunks_mut(fout) {
                for (d, &bv) in row.iter_mut().zip(bias) {
                    *d = *d + bv;
                }
            }
        }
        let mut shape = sx.clone();
        *shape.last_mut().unwrap() = fout;
        let out = Tensor::new(shape, data)?;
        let mut parents = vec![x, w];
        parents.extend(b);
        self.record("linear", out, &parents, move |g| {
            let gd = g.grad.data();
            let mut res = vec![
                g.needs[0].then(|| {
                    Tensor::new(g.inputs[0].shape().to_vec(), bmm(gd, g.inputs[1].data(), 1, rows, fout, fin)).unwrap()
                }),
                g.needs[1].then(|| {
                    Tensor::new(vec![fout, fin], bmm_tn(gd, g.inputs[0].data(), 1, fout, rows, fin)).unwrap()
                }),
            ];
            if g.inputs.len() == 3 {
                res.push(g.needs[2].then(|| {
                    let mut acc = vec![T::zero(); fout];
                    for row in gd.chunks(fout) {
                        for (a, &v) in acc.iter_mut().zip(row) {
                            *a = *a + v;
                        }
                    }
                    Tensor::new(vec![fout], acc).unwrap()
                }));
            }
            res
        })
    }

    /// Two-layer perceptron over the last axis with a ReLU in between.
    pub fn mlp(&mut self, x: Var, w1: Var, b1: Var, w2: Var, b2: Var) -> Result<Var> {
        let h = self.linear(x, w1, Some(b1))?;
        let h = self.relu(h)?;
        self.linear(h, w2, Some(b2))
    }

    /// Softmax along `axis`, computed with the per-row maximum subtracted.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::Axis {
                op: "softmax",
                axis,
                rank: shape.len(),
            });
        }
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        let src = self.value(x).data();
        let mut out = vec![T::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut max = T::neg_infinity();
                for t in 0..len {
                    max = max.max(src[base + t * inner]);
                }
                let mut total = T::zero();
                for t in 0..len {
                    let e = (src[base + t * inner] - max).exp();
                    out[base + t * inner] = e;
                    total = total + e;
                }
                for t in 0..len {
                    out[base + t * inner] = out[base + t * inner] / total;
                }
            }
        }
        let out = Tensor::new(shape, out)?;
        self.record("softmax", out, &[x], move |g| {
            let (y, d) = (g.output.data(), g.grad.data());
            let mut dx = vec![T::zero(); y.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * len * inner + i;
                    let mut dot = T::zero();
                    for t in 0..len {
                        dot = dot + d[base + t * inner] * y[base + t * inner];
                    }
                    for t in 0..len {
                        let j = base + t * inner;
                        dx[j] = y[j] * (d[j] - dot);
                    }
                }
            }
            vec![Some(Tensor::new(g.inputs[0].shape().to_vec(), dx).unwrap())]
        })
    }
}

fn transpose_data<T: Element>(src: &[T], b: usize, m: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); src.len()];
    for bi in 0..b {
        let s = &src[bi * m * n..][..m * n];
        let d = &mut out[bi * m * n..][..m * n];
        for i in 0..m {
            for j in 0..n {
                d[j * m + i] = s[i * n + j];
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_matches_hand_product() {
        // [1 2 3; 4 5 6] · [7 8; 9 10; 11 12] = [58 64; 139 154]
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::new(vec![2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap());
        let b = tape.constant(Tensor::new(vec![3, 2], vec![7., 8., 9., 10., 11., 12.]).unwrap());
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).shape(), &[2, 2]);
        assert_eq!(tape.value(c).data(), &[58., 64., 139., 154.]);
    }

    #[test]
    fn softmax_uniform_row() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::full(vec![1, 4], 0.3));
        let y = tape.softmax(x, 1).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn softmax_closed_form_pair() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::new(vec![2], vec![0.0, 3f64.ln()]).unwrap());
        let y = tape.softmax(x, 0).unwrap();
        let v = tape.value(y).data();
        assert!((v[0] - 0.25).abs() < 1e-15 && (v[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn softmax_is_shift_invariant() {
        let mut tape = Tape::<f32>::new();
        let base = Tensor::from_fn(vec![3, 5], |i| (i as f32 * 0.37).sin());
        let x = tape.constant(base.clone());
        let shifted = tape.constant(base.map(|v| v + 100.0));
        let a = tape.softmax(x, 1).unwrap();
        let b = tape.softmax(shifted, 1).unwrap();
        assert!(tape.value(a).max_abs_diff(tape.value(b)) < 1e-6);
    }

    #[test]
    fn softmax_rejects_bad_axis() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::zeros(vec![2, 2]));
        assert!(matches!(tape.softmax(x, 2), Err(Error::Axis { .. })));
    }

    #[test]
    fn linear_with_bias() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap());
        let w = tape.constant(Tensor::new(vec![3, 2], vec![1., 0., 0., 1., 1., 1.]).unwrap());
        let b = tape.constant(Tensor::new(vec![3], vec![0.5, 0.5, 0.5]).unwrap());
        let y = tape.linear(x, w, Some(b)).unwrap();
        assert_eq!(tape.value(y).data(), &[1.5, 2.5, 3.5]);
    }
}
