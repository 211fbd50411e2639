use std::sync::Arc;

use super::{Element, Tape, Tensor, Var};
use crate::error::{Error, Result};

impl<T: Element> Tape<T> {
    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        self.record("reshape", out, &[x], |g| {
            vec![Some(g.grad.reshape(g.inputs[0].shape().to_vec()).unwrap())]
        })
    }

    /// Joins tensors along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::shape("concat", "no inputs"))?;
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(Error::Axis {
                op: "concat",
                axis,
                rank: base.len(),
            });
        }
        let mut sizes = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            let ragged = s.len() != base.len()
                || s.iter().zip(&base).enumerate().any(|(i, (a, b))| i != axis && a != b);
            if ragged {
                return Err(Error::shape("concat", format!("ragged extents {s:?} vs {base:?}")));
            }
            sizes.push(s[axis]);
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let total: usize = sizes.iter().sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&p, &len) in parts.iter().zip(&sizes) {
                data.extend_from_slice(&self.value(p).data()[o * len * inner..][..len * inner]);
            }
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let out = Tensor::new(shape, data)?;
        self.record("concat", out, parts, move |g| {
            let gd = g.grad.data();
            let mut offset = 0;
            sizes
                .iter()
                .zip(&g.inputs)
                .map(|(&len, input)| {
                    let mut piece = Vec::with_capacity(outer * len * inner);
                    for o in 0..outer {
                        piece.extend_from_slice(&gd[(o * total + offset) * inner..][..len * inner]);
                    }
                    offset += len;
                    Some(Tensor::new(input.shape().to_vec(), piece).unwrap())
                })
                .collect()
        })
    }

    /// Cuts `x` along `axis` into consecutive pieces of the given extents.
    pub fn split(&mut self, x: Var, axis: usize, sizes: &[usize]) -> Result<Vec<Var>> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::Axis {
                op: "split",
                axis,
                rank: shape.len(),
            });
        }
        if sizes.iter().sum::<usize>() != shape[axis] || sizes.contains(&0) {
            return Err(Error::shape(
                "split",
                format!("pieces {sizes:?} do not tile extent {} of axis {axis}", shape[axis]),
            ));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let total = shape[axis];
        let mut out = Vec::with_capacity(sizes.len());
        let mut offset = 0;
        for &len in sizes {
            let src = self.value(x).data();
            let mut piece = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                piece.extend_from_slice(&src[(o * total + offset) * inner..][..len * inner]);
            }
            let mut pshape = shape.clone();
            pshape[axis] = len;
            let start = offset;
            let full = shape.clone();
            let v = self.record("split", Tensor::new(pshape, piece)?, &[x], move |g| {
                let mut dx = Tensor::zeros(full.clone());
                let gd = g.grad.data();
                let dst = dx.data_mut();
                for o in 0..outer {
                    dst[(o * total + start) * inner..][..len * inner]
                        .copy_from_slice(&gd[o * len * inner..][..len * inner]);
                }
                vec![Some(dx)]
            })?;
            out.push(v);
            offset += len;
        }
        Ok(out)
    }

    /// `out[i] = x[index[i]]`, with the result reshaped to `shape`.
    /// The backward pass scatters gradients back, so `index` may repeat.
    pub fn gather(&mut self, x: Var, shape: Vec<usize>, index: Arc<Vec<usize>>) -> Result<Var> {
        let src = self.value(x).data();
        if let Some(&bad) = index.iter().find(|&&i| i >= src.len()) {
            return Err(Error::shape("gather", format!("index {bad} out of bounds for {}", src.len())));
        }
        let data = index.iter().map(|&i| src[i]).collect();
        let out = Tensor::new(shape, data)?;
        self.record("gather", out, &[x], move |g| {
            let mut dx = Tensor::zeros(g.inputs[0].shape().to_vec());
            let dst = dx.data_mut();
            for (&i, &d) in index.iter().zip(g.grad.data()) {
                dst[i] = dst[i] + d;
            }
            vec![Some(dx)]
        })
    }

    /// Interleaves the channels of two `[N, C, ...]` tensors as
    /// `[a_0, b_0, a_1, b_1, ...]`.
    pub fn interleave_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if sa != self.shape(b) || sa.len() < 2 {
            return Err(Error::shape("interleave_channels", format!("{sa:?} vs {:?}", self.shape(b))));
        }
        let both = self.concat(&[a, b], 1)?;
        let (n, c) = (sa[0], sa[1]);
        let plane: usize = sa[2..].iter().product();
        let mut index = Vec::with_capacity(2 * n * c * plane);
        for bi in 0..n {
            for ch in 0..c {
                for src_half in [ch, c + ch] {
                    let base = (bi * 2 * c + src_half) * plane;
                    index.extend(base..base + plane);
                }
            }
        }
        let mut shape = sa;
        shape[1] = 2 * c;
        self.gather(both, shape, Arc::new(index))
    }
}
