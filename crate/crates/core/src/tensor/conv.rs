use rayon::prelude::*;

use super::{Element, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Geometry of a 3-D convolution over `[D, H, W]`.
///
/// Strided convolutions zero-pad the input on the high side of any axis
/// whose extent is not a multiple of the stride, so every input voxel is
/// covered by some window.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub padding: [usize; 3],
    pub groups: usize,
}

impl ConvSpec {
    pub fn new(kernel: [usize; 3], stride: [usize; 3], padding: [usize; 3], groups: usize) -> Self {
        ConvSpec {
            kernel,
            stride,
            padding,
            groups,
        }
    }

    /// Cubic kernel `k`, stride 1 and "same" padding `k / 2`.
    pub fn same(k: usize, groups: usize) -> Self {
        Self::new([k; 3], [1; 3], [k / 2; 3], groups)
    }

    /// Cubic kernel with stride equal to the kernel size and no padding.
    pub fn patch(k: usize, groups: usize) -> Self {
        Self::new([k; 3], [k; 3], [0; 3], groups)
    }

    pub fn pointwise() -> Self {
        Self::same(1, 1)
    }

    /// Spatial extents of the output for a given input.
    pub fn output_extent(&self, input: [usize; 3]) -> Result<[usize; 3]> {
        let mut out = [0; 3];
        for axis in 0..3 {
            let (k, s, p) = (self.kernel[axis], self.stride[axis], self.padding[axis]);
            if k == 0 || s == 0 {
                return Err(Error::Config(format!(
                    "conv: kernel and stride must be positive on axis {axis}"
                )));
            }
            let padded = input[axis] + 2 * p + self.right_pad(input[axis], axis);
            if padded < k {
                return Err(Error::ZeroExtent {
                    op: "conv3d",
                    axis: axis + 2,
                });
            }
            out[axis] = (padded - k) / s + 1;
        }
        Ok(out)
    }

    fn right_pad(&self, extent: usize, axis: usize) -> usize {
        let s = self.stride[axis];
        if s > 1 {
            (s - extent % s) % s
        } else {
            0
        }
    }
}

/// Range of output positions whose input tap `o * stride + k - pad` lands in `[0, extent)`.
#[inline]
fn valid_range(out_len: usize, extent: usize, stride: usize, k: usize, pad: usize) -> (usize, usize) {
    let lo = if k >= pad { 0 } else { (pad - k).div_ceil(stride) };
    if extent + pad < k + 1 {
        return (0, 0);
    }
    let hi = ((extent - 1 + pad - k) / stride + 1).min(out_len);
    (lo.min(hi), hi)
}

#[derive(Clone, Copy)]
struct ConvGeom {
    n: usize,
    cin: usize,
    cout: usize,
    groups: usize,
    input: [usize; 3],
    output: [usize; 3],
    spec: ConvSpec,
}

impl ConvGeom {
    fn cin_g(&self) -> usize {
        self.cin / self.groups
    }
    fn cout_g(&self) -> usize {
        self.cout / self.groups
    }
    fn in_plane(&self) -> usize {
        self.input.iter().product()
    }
    fn out_plane(&self) -> usize {
        self.output.iter().product()
    }
    fn k_vol(&self) -> usize {
        self.spec.kernel.iter().product()
    }

    fn ranges(&self, kd: usize, kh: usize, kw: usize) -> [(usize, usize); 3] {
        let s = &self.spec;
        let ks = [kd, kh, kw];
        let mut r = [(0, 0); 3];
        for a in 0..3 {
            r[a] = valid_range(self.output[a], self.input[a], s.stride[a], ks[a], s.padding[a]);
        }
        r
    }

    /// Calls `f(out_offset, in_offset, count, in_step)` for each contiguous
    /// output row touched by kernel tap `(kd, kh, kw)`.
    #[inline]
    fn for_each_row(&self, kd: usize, kh: usize, kw: usize, mut f: impl FnMut(usize, usize, usize, usize)) {
        let [(d0, d1), (h0, h1), (w0, w1)] = self.ranges(kd, kh, kw);
        if w0 >= w1 {
            return;
        }
        let s = &self.spec;
        let [_, ih, iw] = self.input;
        let [_, oh, ow] = self.output;
        for od in d0..d1 {
            let id = od * s.stride[0] + kd - s.padding[0];
            for o_h in h0..h1 {
                let i_h = o_h * s.stride[1] + kh - s.padding[1];
                let out_off = (od * oh + o_h) * ow + w0;
                let in_off = (id * ih + i_h) * iw + w0 * s.stride[2] + kw - s.padding[2];
                f(out_off, in_off, w1 - w0, s.stride[2]);
            }
        }
    }
}

fn conv_forward<T: Element>(x: &[T], w: &[T], b: Option<&[T]>, g: ConvGeom) -> Vec<T> {
    let (in_plane, out_plane, kv) = (g.in_plane(), g.out_plane(), g.k_vol());
    let [kd_n, kh_n, kw_n] = g.spec.kernel;
    let mut out = vec![T::zero(); g.n * g.cout * out_plane];
    out.par_chunks_mut(out_plane).enumerate().for_each(|(plane, dst)| {
        let (n, co) = (plane / g.cout, plane % g.cout);
        if let Some(b) = b {
            dst.fill(b[co]);
        }
        let grp = co / g.cout_g();
        for cl in 0..g.cin_g() {
            let ci = grp * g.cin_g() + cl;
            let src = &x[(n * g.cin + ci) * in_plane..][..in_plane];
            let wk = &w[(co * g.cin_g() + cl) * kv..][..kv];
            for kd in 0..kd_n {
                for kh in 0..kh_n {
                    for kw in 0..kw_n {
                        let wv = wk[(kd * kh_n + kh) * kw_n + kw];
                        g.for_each_row(kd, kh, kw, |o, i, len, step| {
                            for t in 0..len {
                                dst[o + t] = dst[o + t] + wv * src[i + t * step];
                            }
                        });
                    }
                }
            }
        }
    });
    out
}

fn conv_backward_input<T: Element>(grad: &[T], w: &[T], g: ConvGeom) -> Vec<T> {
    let (in_plane, out_plane, kv) = (g.in_plane(), g.out_plane(), g.k_vol());
    let [kd_n, kh_n, kw_n] = g.spec.kernel;
    let mut gx = vec![T::zero(); g.n * g.cin * in_plane];
    gx.par_chunks_mut(in_plane).enumerate().for_each(|(plane, dst)| {
        let (n, ci) = (plane / g.cin, plane % g.cin);
        let (grp, cl) = (ci / g.cin_g(), ci % g.cin_g());
        for co in grp * g.cout_g()..(grp + 1) * g.cout_g() {
            let src = &grad[(n * g.cout + co) * out_plane..][..out_plane];
            let wk = &w[(co * g.cin_g() + cl) * kv..][..kv];
            for kd in 0..kd_n {
                for kh in 0..kh_n {
                    for kw in 0..kw_n {
                        let wv = wk[(kd * kh_n + kh) * kw_n + kw];
                        g.for_each_row(kd, kh, kw, |o, i, len, step| {
                            for t in 0..len {
                                dst[i + t * step] = dst[i + t * step] + wv * src[o + t];
                            }
                        });
                    }
                }
            }
        }
    });
    gx
}

fn conv_backward_weight<T: Element>(grad: &[T], x: &[T], g: ConvGeom) -> Vec<T> {
    let (in_plane, out_plane, kv) = (g.in_plane(), g.out_plane(), g.k_vol());
    let [kd_n, kh_n, kw_n] = g.spec.kernel;
    let mut gw = vec![T::zero(); g.cout * g.cin_g() * kv];
    gw.par_chunks_mut(g.cin_g() * kv).enumerate().for_each(|(co, dst)| {
        let grp = co / g.cout_g();
        for cl in 0..g.cin_g() {
            let ci = grp * g.cin_g() + cl;
            for kd in 0..kd_n {
                for kh in 0..kh_n {
                    for kw in 0..kw_n {
                        let mut acc = T::zero();
                        for n in 0..g.n {
                            let gsrc = &grad[(n * g.cout + co) * out_plane..][..out_plane];
                            let xsrc = &x[(n * g.cin + ci) * in_plane..][..in_plane];
                            g.for_each_row(kd, kh, kw, |o, i, len, step| {
                                for t in 0..len {
                                    acc = acc + gsrc[o + t] * xsrc[i + t * step];
                                }
                            });
                        }
                        dst[cl * kv + (kd * kh_n + kh) * kw_n + kw] = acc;
                    }
                }
            }
        }
    });
    gw
}

fn bias_grad<T: Element>(grad: &[T], n: usize, c: usize, plane: usize) -> Vec<T> {
    (0..c)
        .map(|ch| {
            let mut acc = T::zero();
            for b in 0..n {
                for &v in &grad[(b * c + ch) * plane..][..plane] {
                    acc = acc + v;
                }
            }
            acc
        })
        .collect()
}

fn check_bias<T: Element>(b: Option<&Tensor<T>>, cout: usize, op: &'static str) -> Result<()> {
    if let Some(b) = b {
        if b.shape() != [cout] {
            return Err(Error::shape(op, format!("bias must be [{cout}], got {:?}", b.shape())));
        }
    }
    Ok(())
}

impl<T: Element> Tape<T> {
    /// Grouped 3-D convolution. `w` is `[C_out, C_in / groups, kD, kH, kW]`.
    pub fn conv3d(&mut self, x: Var, w: Var, b: Option<Var>, spec: ConvSpec) -> Result<Var> {
        let [n, cin, d, h, wd] = self.value(x).dims5()?;
        let ws = self.value(w).shape().to_vec();
        if spec.groups == 0 || cin % spec.groups != 0 {
            return Err(Error::shape(
                "conv3d",
                format!("axis 1: {cin} input channels not divisible by {} groups", spec.groups),
            ));
        }
        if ws.len() != 5 {
            return Err(Error::shape("conv3d", format!("weight must be 5-D, got {ws:?}")));
        }
        let cout = ws[0];
        if cout % spec.groups != 0 {
            return Err(Error::shape(
                "conv3d",
                format!("weight axis 0: {cout} output channels not divisible by {} groups", spec.groups),
            ));
        }
        if ws[1] != cin / spec.groups {
            return Err(Error::shape(
                "conv3d",
                format!("weight axis 1: expected {} input channels per group, got {}", cin / spec.groups, ws[1]),
            ));
        }
        for a in 0..3 {
            if ws[2 + a] != spec.kernel[a] {
                return Err(Error::shape(
                    "conv3d",
                    format!("weight axis {}: kernel {} does not match spec {}", a + 2, ws[2 + a], spec.kernel[a]),
                ));
            }
        }
        check_bias(b.map(|b| self.value(b)), cout, "conv3d")?;
        let output = spec.output_extent([d, h, wd])?;
        let geom = ConvGeom {
            n,
            cin,
            cout,
            groups: spec.groups,
            input: [d, h, wd],
            output,
            spec,
        };
        let out = conv_forward(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            geom,
        );
        let out = Tensor::new(vec![n, cout, output[0], output[1], output[2]], out)?;
        let mut parents = vec![x, w];
        parents.extend(b);
        self.record("conv3d", out, &parents, move |a| {
            let g = a.grad.data();
            let mut res = vec![
                a.needs[0].then(|| {
                    let gx = conv_backward_input(g, a.inputs[1].data(), geom);
                    Tensor::new(a.inputs[0].shape().to_vec(), gx).unwrap()
                }),
                a.needs[1].then(|| {
                    let gw = conv_backward_weight(g, a.inputs[0].data(), geom);
                    Tensor::new(a.inputs[1].shape().to_vec(), gw).unwrap()
                }),
            ];
            if a.inputs.len() == 3 {
                res.push(a.needs[2].then(|| {
                    Tensor::new(vec![geom.cout], bias_grad(g, geom.n, geom.cout, geom.out_plane())).unwrap()
                }));
            }
            res
        })
    }

    /// Non-overlapping transposed convolution (stride equal to kernel, no
    /// padding). `w` is `[C_in, C_out / groups, k, k, k]`; every spatial
    /// extent is multiplied by the stride.
    pub fn conv_transpose3d(&mut self, x: Var, w: Var, b: Option<Var>, spec: ConvSpec) -> Result<Var> {
        let [n, cin, d, h, wd] = self.value(x).dims5()?;
        let ws = self.value(w).shape().to_vec();
        if spec.stride != spec.kernel || spec.padding != [0; 3] {
            return Err(Error::Config(format!(
                "conv_transpose3d: stride must equal kernel with no padding, got {spec:?}"
            )));
        }
        if spec.groups == 0 || cin % spec.groups != 0 {
            return Err(Error::shape(
                "conv_transpose3d",
                format!("axis 1: {cin} input channels not divisible by {} groups", spec.groups),
            ));
        }
        if ws.len() != 5 || ws[0] != cin || ws[2..] != spec.kernel {
            return Err(Error::shape(
                "conv_transpose3d",
                format!("weight must be [{cin}, C_out/groups, {:?}], got {ws:?}", spec.kernel),
            ));
        }
        let cout = ws[1] * spec.groups;
        check_bias(b.map(|b| self.value(b)), cout, "conv_transpose3d")?;
        let k = spec.kernel;
        let output = [d * k[0], h * k[1], wd * k[2]];
        let geom = TGeom {
            n,
            cin,
            cout,
            groups: spec.groups,
            input: [d, h, wd],
            k,
        };
        let out = tconv_forward(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            geom,
        );
        let out = Tensor::new(vec![n, cout, output[0], output[1], output[2]], out)?;
        let mut parents = vec![x, w];
        parents.extend(b);
        self.record("conv_transpose3d", out, &parents, move |a| {
            let g = a.grad.data();
            let mut res = vec![
                a.needs[0].then(|| {
                    Tensor::new(a.inputs[0].shape().to_vec(), tconv_backward_input(g, a.inputs[1].data(), geom))
                        .unwrap()
                }),
                a.needs[1].then(|| {
                    Tensor::new(a.inputs[1].shape().to_vec(), tconv_backward_weight(g, a.inputs[0].data(), geom))
                        .unwrap()
                }),
            ];
            if a.inputs.len() == 3 {
                let plane = geom.in_plane() * geom.k.iter().product::<usize>();
                res.push(a.needs[2].then(|| {
                    Tensor::new(vec![geom.cout], bias_grad(g, geom.n, geom.cout, plane)).unwrap()
                }));
            }
            res
        })
    }
}

#[derive(Clone, Copy)]
struct TGeom {
    n: usize,
    cin: usize,
    cout: usize,
    groups: usize,
    input: [usize; 3],
    k: [usize; 3],
}

impl TGeom {
    fn in_plane(&self) -> usize {
        self.input.iter().product()
    }
    fn k_vol(&self) -> usize {
        self.k.iter().product()
    }
    fn cin_g(&self) -> usize {
        self.cin / self.groups
    }
    fn cout_g(&self) -> usize {
        self.cout / self.groups
    }

    /// Visits `(in_offset, out_offset, tap)` for every input voxel and kernel tap.
    #[inline]
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let [d, h, w] = self.input;
        let [k0, k1, k2] = self.k;
        let (oh, ow) = (h * k1, w * k2);
        for id in 0..d {
            for kd in 0..k0 {
                let od = id * k0 + kd;
                for ih in 0..h {
                    for kh in 0..k1 {
                        let o_h = ih * k1 + kh;
                        for iw in 0..w {
                            for kw in 0..k2 {
                                let o_w = iw * k2 + kw;
                                f((id * h + ih) * w + iw, (od * oh + o_h) * ow + o_w, (kd * k1 + kh) * k2 + kw);
                            }
                        }
                    }
                }
            }
        }
    }
}

fn tconv_forward<T: Element>(x: &[T], w: &[T], b: Option<&[T]>, g: TGeom) -> Vec<T> {
    let in_plane = g.in_plane();
    let kv = g.k_vol();
    let out_plane = in_plane * kv;
    let mut out = vec![T::zero(); g.n * g.cout * out_plane];
    out.par_chunks_mut(out_plane).enumerate().for_each(|(plane, dst)| {
        let (n, co) = (plane / g.cout, plane % g.cout);
        if let Some(b) = b {
            dst.fill(b[co]);
        }
        let (grp, col) = (co / g.cout_g(), co % g.cout_g());
        for cl in 0..g.cin_g() {
            let ci = grp * g.cin_g() + cl;
            let src = &x[(n * g.cin + ci) * in_plane..][..in_plane];
            let wk = &w[(ci * g.cout_g() + col) * kv..][..kv];
            g.for_each_tap(|i, o, t| dst[o] = dst[o] + src[i] * wk[t]);
        }
    });
    out
}

fn tconv_backward_input<T: Element>(grad: &[T], w: &[T], g: TGeom) -> Vec<T> {
    let in_plane = g.in_plane();
    let kv = g.k_vol();
    let out_plane = in_plane * kv;
    let mut gx = vec![T::zero(); g.n * g.cin * in_plane];
    gx.par_chunks_mut(in_plane).enumerate().for_each(|(plane, dst)| {
        let (n, ci) = (plane / g.cin, plane % g.cin);
        let grp = ci / g.cin_g();
        for col in 0..g.cout_g() {
            let co = grp * g.cout_g() + col;
            let src = &grad[(n * g.cout + co) * out_plane..][..out_plane];
            let wk = &w[(ci * g.cout_g() + col) * kv..][..kv];
            g.for_each_tap(|i, o, t| dst[i] = dst[i] + src[o] * wk[t]);
        }
    });
    gx
}

fn tconv_backward_weight<T: Element>(grad: &[T], x: &[T], g: TGeom) -> Vec<T> {
    let in_plane = g.in_plane();
    let kv = g.k_vol();
    let out_plane = in_plane * kv;
    let mut gw = vec![T::zero(); g.cin * g.cout_g() * kv];
    gw.par_chunks_mut(g.cout_g() * kv).enumerate().for_each(|(ci, dst)| {
        let grp = ci / g.cin_g();
        for n in 0..g.n {
            let xsrc = &x[(n * g.cin + ci) * in_plane..][..in_plane];
            for col in 0..g.cout_g() {
                let co = grp * g.cout_g() + col;
                let gsrc = &grad[(n * g.cout + co) * out_plane..][..out_plane];
                let row = &mut dst[col * kv..][..kv];
                g.for_each_tap(|i, o, t| row[t] = row[t] + xsrc[i] * gsrc[o]);
            }
        }
    });
    gw
}
