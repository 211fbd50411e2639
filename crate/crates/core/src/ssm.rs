//! Orientation-aware flattening of feature volumes and the diagonal
//! selective state-space scan run along the resulting sequences.
//!
//! For every channel `c` with state size `N` the scan evaluates
//!
//! ```text
//! h_t = exp(Δ_t · A_c) ⊙ h_{t-1} + Δ_t · B_t · x_t        h_0 = 0
//! y_t = ⟨C_t, h_t⟩ + D_c · x_t
//! ```
//!
//! with `Δ_t = softplus(W_Δ x_t + b_Δ)`, `B_t = W_B x_t`, `C_t = W_C x_t`.

use std::sync::Arc;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::init::ParamInit;
use crate::tensor::{Binding, Element, ParamId, Tape, Tensor, Var};

/// Voxel visiting order used to turn a volume into a sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Orientation {
    /// Raster order: depth outermost, then height, then width.
    Forward,
    /// Exact reversal of [`Orientation::Forward`].
    Reverse,
    /// Depth innermost: height, then width, then depth.
    InterSlice,
}

impl Orientation {
    pub const ALL: [Orientation; 3] = [Orientation::Forward, Orientation::Reverse, Orientation::InterSlice];

    /// Raster index of the voxel at each sequence position.
    pub fn voxel_order(self, [d, h, w]: [usize; 3]) -> Vec<usize> {
        let len = d * h * w;
        match self {
            Orientation::Forward => (0..len).collect(),
            Orientation::Reverse => (0..len).rev().collect(),
            Orientation::InterSlice => {
                let mut order = Vec::with_capacity(len);
                for y in 0..h {
                    for x in 0..w {
                        for z in 0..d {
                            order.push((z * h + y) * w + x);
                        }
                    }
                }
                order
            }
        }
    }
}

/// `[N, C, D, H, W]` to `[N, L, C]` in the given orientation.
pub fn flatten<T: Element>(tape: &mut Tape<T>, x: Var, o: Orientation) -> Result<Var> {
    let [n, c, d, h, w] = tape.value(x).dims5()?;
    let order = o.voxel_order([d, h, w]);
    let len = order.len();
    let mut index = Vec::with_capacity(n * len * c);
    for b in 0..n {
        for &v in &order {
            for ch in 0..c {
                index.push((b * c + ch) * len + v);
            }
        }
    }
    tape.gather(x, vec![n, len, c], Arc::new(index))
}

/// Inverse of [`flatten`].
pub fn unflatten<T: Element>(tape: &mut Tape<T>, seq: Var, o: Orientation, spatial: [usize; 3]) -> Result<Var> {
    let s = tape.shape(seq).to_vec();
    let order = o.voxel_order(spatial);
    if s.len() != 3 || s[1] != order.len() {
        return Err(Error::shape(
            "unflatten",
            format!("sequence {s:?} does not match spatial {spatial:?}"),
        ));
    }
    let (n, len, c) = (s[0], s[1], s[2]);
    let mut position = vec![0; len];
    for (l, &v) in order.iter().enumerate() {
        position[v] = l;
    }
    let mut index = Vec::with_capacity(n * c * len);
    for b in 0..n {
        for ch in 0..c {
            for &l in &position {
                index.push((b * len + l) * c + ch);
            }
        }
    }
    tape.gather(seq, vec![n, c, spatial[0], spatial[1], spatial[2]], Arc::new(index))
}

/// Borrowed operands of the scan recurrence.
///
/// `x`, `delta`: `[N, L, C]`; `a`: `[C, S]`; `b`, `c`: `[N, L, S]`; `d`: `[C]`.
#[derive(Clone, Copy)]
pub struct ScanInputs<'a, T> {
    pub x: &'a [T],
    pub delta: &'a [T],
    pub a: &'a [T],
    pub b: &'a [T],
    pub c: &'a [T],
    pub d: &'a [T],
    pub batch: usize,
    pub len: usize,
    pub channels: usize,
    pub state: usize,
}

pub struct ScanOutput<T> {
    /// `[N, L, C]`
    pub y: Vec<T>,
    /// Hidden states laid out `[N, C, L, S]`.
    pub states: Vec<T>,
}

/// Sequential reference scan.
pub fn scan_forward<T: Element>(s: ScanInputs<'_, T>) -> ScanOutput<T> {
    let (len, ch, st) = (s.len, s.channels, s.state);
    let columns: Vec<(Vec<T>, Vec<T>)> = (0..s.batch * ch)
        .into_par_iter()
        .map(|p| {
            let (n, c) = (p / ch, p % ch);
            let mut y = vec![T::zero(); len];
            let mut states = vec![T::zero(); len * st];
            let mut h = vec![T::zero(); st];
            for t in 0..len {
                let i = (n * len + t) * ch + c;
                let (x, dt) = (s.x[i], s.delta[i]);
                let bt = &s.b[(n * len + t) * st..][..st];
                let ct = &s.c[(n * len + t) * st..][..st];
                let mut acc = T::zero();
                for k in 0..st {
                    h[k] = (dt * s.a[c * st + k]).exp() * h[k] + dt * bt[k] * x;
                    acc = acc + ct[k] * h[k];
                }
                y[t] = acc + s.d[c] * x;
                states[t * st..][..st].copy_from_slice(&h);
            }
            (y, states)
        })
        .collect();
    let mut y = vec![T::zero(); s.batch * len * ch];
    let mut states = Vec::with_capacity(s.batch * ch * len * st);
    for (p, (col, hs)) in columns.into_iter().enumerate() {
        let (n, c) = (p / ch, p % ch);
        for (t, v) in col.into_iter().enumerate() {
            y[(n * len + t) * ch + c] = v;
        }
        states.extend(hs);
    }
    ScanOutput { y, states }
}

/// Chunked evaluation of the same recurrence: each block is scanned from a
/// zero state and the carried-in state is added back through the block's
/// cumulative decay.
pub fn scan_blocked<T: Element>(s: ScanInputs<'_, T>, block: usize) -> Vec<T> {
    assert!(block > 0, "block size must be positive");
    let (len, ch, st) = (s.len, s.channels, s.state);
    let mut y = vec![T::zero(); s.batch * len * ch];
    for n in 0..s.batch {
        for c in 0..ch {
            let mut carry = vec![T::zero(); st];
            for start in (0..len).step_by(block) {
                let end = (start + block).min(len);
                let mut local = vec![T::zero(); st];
                let mut decay = vec![T::one(); st];
                for t in start..end {
                    let i = (n * len + t) * ch + c;
                    let (x, dt) = (s.x[i], s.delta[i]);
                    let bt = &s.b[(n * len + t) * st..][..st];
                    let ct = &s.c[(n * len + t) * st..][..st];
                    let mut acc = T::zero();
                    for k in 0..st {
                        let a = (dt * s.a[c * st + k]).exp();
                        local[k] = a * local[k] + dt * bt[k] * x;
                        decay[k] = decay[k] * a;
                        acc = acc + ct[k] * (local[k] + decay[k] * carry[k]);
                    }
                    y[i] = acc + s.d[c] * x;
                }
                for k in 0..st {
                    carry[k] = local[k] + decay[k] * carry[k];
                }
            }
        }
    }
    y
}

struct ScanGrads<T> {
    x: Vec<T>,
    delta: Vec<T>,
    a: Vec<T>,
    b: Vec<T>,
    c: Vec<T>,
    d: Vec<T>,
}

fn scan_backward<T: Element>(s: ScanInputs<'_, T>, states: &[T], gy: &[T]) -> ScanGrads<T> {
    let (len, ch, st) = (s.len, s.channels, s.state);
    // Per-(sample, channel) partials; shared operands are reduced afterwards
    // in a fixed order.
    struct Partial<T> {
        x: Vec<T>,
        delta: Vec<T>,
        a: Vec<T>,
        b: Vec<T>,
        c: Vec<T>,
        d: T,
    }
    let partials: Vec<Partial<T>> = (0..s.batch * ch)
        .into_par_iter()
        .map(|p| {
            let (n, c) = (p / ch, p % ch);
            let hs = &states[p * len * st..][..len * st];
            let mut out = Partial {
                x: vec![T::zero(); len],
                delta: vec![T::zero(); len],
                a: vec![T::zero(); st],
                b: vec![T::zero(); len * st],
                c: vec![T::zero(); len * st],
                d: T::zero(),
            };
            let mut dh = vec![T::zero(); st];
            for t in (0..len).rev() {
                let i = (n * len + t) * ch + c;
                let (x, dt, dy) = (s.x[i], s.delta[i], gy[i]);
                let bt = &s.b[(n * len + t) * st..][..st];
                let ct = &s.c[(n * len + t) * st..][..st];
                let h_t = &hs[t * st..][..st];
                out.d = out.d + dy * x;
                let mut dx = dy * s.d[c];
                let mut ddelta = T::zero();
                for k in 0..st {
                    dh[k] = dh[k] + dy * ct[k];
                    out.c[t * st + k] = dy * h_t[k];
                    let ak = s.a[c * st + k];
                    let decay = (dt * ak).exp();
                    let prev = if t > 0 { hs[(t - 1) * st + k] } else { T::zero() };
                    ddelta = ddelta + dh[k] * (ak * decay * prev + bt[k] * x);
                    out.a[k] = out.a[k] + dh[k] * dt * decay * prev;
                    out.b[t * st + k] = dh[k] * dt * x;
                    dx = dx + dh[k] * dt * bt[k];
                    dh[k] = dh[k] * decay;
                }
                out.x[t] = dx;
                out.delta[t] = ddelta;
            }
            out
        })
        .collect();

    let mut g = ScanGrads {
        x: vec![T::zero(); s.x.len()],
        delta: vec![T::zero(); s.x.len()],
        a: vec![T::zero(); ch * st],
        b: vec![T::zero(); s.b.len()],
        c: vec![T::zero(); s.c.len()],
        d: vec![T::zero(); ch],
    };
    for (p, part) in partials.into_iter().enumerate() {
        let (n, c) = (p / ch, p % ch);
        for t in 0..len {
            let i = (n * len + t) * ch + c;
            g.x[i] = part.x[t];
            g.delta[i] = part.delta[t];
            for k in 0..st {
                let j = (n * len + t) * st + k;
                g.b[j] = g.b[j] + part.b[t * st + k];
                g.c[j] = g.c[j] + part.c[t * st + k];
            }
        }
        for k in 0..st {
            g.a[c * st + k] = g.a[c * st + k] + part.a[k];
        }
        g.d[c] = g.d[c] + part.d;
    }
    g
}

/// Records the scan recurrence on the tape.
///
/// Fails with a configuration error if any entry of `a` is not strictly
/// negative, since the state would then be unbounded.
pub fn scan<T: Element>(
    tape: &mut Tape<T>,
    x: Var,
    delta: Var,
    a: Var,
    b: Var,
    c: Var,
    d: Var,
) -> Result<Var> {
    let sx = tape.shape(x).to_vec();
    let [n, len, ch] = sx[..] else {
        return Err(Error::shape("selective_scan", format!("sequence must be [N, L, C], got {sx:?}")));
    };
    let sa = tape.shape(a).to_vec();
    if sa.len() != 2 || sa[0] != ch {
        return Err(Error::shape("selective_scan", format!("A must be [{ch}, S], got {sa:?}")));
    }
    let st = sa[1];
    let checks = [
        ("delta", delta, vec![n, len, ch]),
        ("B", b, vec![n, len, st]),
        ("C", c, vec![n, len, st]),
        ("D", d, vec![ch]),
    ];
    for (name, v, want) in checks {
        if tape.shape(v) != want.as_slice() {
            return Err(Error::shape(
                "selective_scan",
                format!("{name} must be {want:?}, got {:?}", tape.shape(v)),
            ));
        }
    }
    if let Some(bad) = tape.value(a).data().iter().find(|&&v| !(v < T::zero())) {
        return Err(Error::Config(format!(
            "selective_scan: state matrix entries must be strictly negative, found {bad:?}"
        )));
    }
    let ScanOutput { y, states } = scan_forward(ScanInputs {
        x: tape.value(x).data(),
        delta: tape.value(delta).data(),
        a: tape.value(a).data(),
        b: tape.value(b).data(),
        c: tape.value(c).data(),
        d: tape.value(d).data(),
        batch: n,
        len,
        channels: ch,
        state: st,
    });
    let out = Tensor::new(vec![n, len, ch], y)?;
    tape.record("selective_scan", out, &[x, delta, a, b, c, d], move |g| {
        let s = ScanInputs {
            x: g.inputs[0].data(),
            delta: g.inputs[1].data(),
            a: g.inputs[2].data(),
            b: g.inputs[3].data(),
            c: g.inputs[4].data(),
            d: g.inputs[5].data(),
            batch: n,
            len,
            channels: ch,
            state: st,
        };
        let gr = scan_backward(s, &states, g.grad.data());
        let shape = |i: usize| g.inputs[i].shape().to_vec();
        vec![
            Some(Tensor::new(shape(0), gr.x).unwrap()),
            Some(Tensor::new(shape(1), gr.delta).unwrap()),
            Some(Tensor::new(shape(2), gr.a).unwrap()),
            Some(Tensor::new(shape(3), gr.b).unwrap()),
            Some(Tensor::new(shape(4), gr.c).unwrap()),
            Some(Tensor::new(shape(5), gr.d).unwrap()),
        ]
    })
}

/// Upper bound on `|h_t|` for a scan whose inputs satisfy `|x| <= x_max`,
/// `0 < Δ <= delta_max`, `|B| <= b_max` and `A <= -a_min` with `a_min > 0`.
///
/// Since `Δ <= (1 - exp(-Δ a)) · g` with `g = Δ_max a / (1 - exp(-Δ_max a)) / a`,
/// the input contributions telescope to at most `g · b_max · x_max`.
pub fn state_bound(delta_max: f64, b_max: f64, x_max: f64, a_min: f64) -> f64 {
    b_max * x_max * delta_max / (-(-delta_max * a_min).exp_m1())
}

/// Parameters of one selective SSM over `channels` features.
///
/// The state matrix is stored as `a_log` with `A = -exp(a_log)`, which keeps
/// every entry strictly negative under any update.
#[derive(Clone, Debug)]
pub struct SsmParams {
    pub channels: usize,
    pub state: usize,
    pub a_log: ParamId,
    pub w_delta: ParamId,
    pub b_delta: ParamId,
    pub w_b: ParamId,
    pub w_c: ParamId,
    pub d_skip: ParamId,
}

/// Softplus inverse of the initial step size.
const DELTA_INIT: f64 = 0.1;

impl SsmParams {
    pub fn new(init: &mut ParamInit, prefix: &str, channels: usize, state: usize) -> Result<Self> {
        let a_log = Tensor::from_fn(vec![channels, state], |i| ((i % state) as f64 + 1.0).ln());
        let bias = DELTA_INIT.exp_m1().ln();
        Ok(SsmParams {
            channels,
            state,
            a_log: init.tensor(&format!("{prefix}.a_log"), a_log)?,
            w_delta: init.uniform(&format!("{prefix}.w_delta"), vec![channels, channels], 0.1)?,
            b_delta: init.constant(&format!("{prefix}.b_delta"), vec![channels], bias)?,
            w_b: init.uniform(&format!("{prefix}.w_b"), vec![state, channels], 0.1)?,
            w_c: init.uniform(&format!("{prefix}.w_c"), vec![state, channels], 0.1)?,
            d_skip: init.constant(&format!("{prefix}.d_skip"), vec![channels], 1.0)?,
        })
    }

    pub fn numel(channels: usize, state: usize) -> usize {
        channels * state + channels * channels + channels + 2 * state * channels + channels
    }
}

/// Input-dependent projections followed by the scan, on a `[N, L, C]` sequence.
pub fn selective_scan<T: Element>(tape: &mut Tape<T>, seq: Var, p: &SsmParams, bind: &Binding) -> Result<Var> {
    let pre = tape.linear(seq, bind[p.w_delta], Some(bind[p.b_delta]))?;
    let delta = tape.softplus(pre)?;
    let b = tape.linear(seq, bind[p.w_b], None)?;
    let c = tape.linear(seq, bind[p.w_c], None)?;
    let a = tape.exp(bind[p.a_log])?;
    let a = tape.neg(a)?;
    scan(tape, seq, delta, a, b, c, bind[p.d_skip])
}

/// One directional Mamba pass: flatten, scan, unflatten. Shape preserving.
pub fn ma<T: Element>(tape: &mut Tape<T>, x: Var, o: Orientation, p: &SsmParams, bind: &Binding) -> Result<Var> {
    let [_, _, d, h, w] = tape.value(x).dims5()?;
    let seq = flatten(tape, x, o)?;
    let y = selective_scan(tape, seq, p, bind)?;
    unflatten(tape, y, o, [d, h, w])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn inter_slice_order_on_cube() {
        assert_eq!(Orientation::InterSlice.voxel_order([2, 2, 2]), vec![0, 4, 1, 5, 2, 6, 3, 7]);
    }

    #[test]
    fn reverse_maps_i_to_last_minus_i() {
        let fwd = Orientation::Forward.voxel_order([3, 4, 5]);
        let rev = Orientation::Reverse.voxel_order([3, 4, 5]);
        let len = fwd.len();
        for i in 0..len {
            assert_eq!(rev[i], fwd[len - 1 - i]);
        }
    }

    #[test]
    fn every_order_is_a_permutation() {
        for o in Orientation::ALL {
            let mut order = o.voxel_order([3, 4, 5]);
            order.sort_unstable();
            assert_eq!(order, (0..60).collect::<Vec<_>>());
        }
    }

    #[test]
    fn flatten_unflatten_round_trip() {
        let data = Tensor::from_fn(vec![2, 3, 3, 4, 5], |i| i as f32);
        for o in Orientation::ALL {
            let mut tape = Tape::<f32>::new();
            let x = tape.constant(data.clone());
            let seq = flatten(&mut tape, x, o).unwrap();
            assert_eq!(tape.shape(seq), &[2, 60, 3]);
            let back = unflatten(&mut tape, seq, o, [3, 4, 5]).unwrap();
            assert_eq!(tape.value(back), &data);
        }
    }

    fn operands(len: usize, ch: usize, st: usize) -> [Tensor<f64>; 6] {
        let wave = |k: f64| move |i: usize| ((i as f64 + 1.0) * k).sin();
        [
            Tensor::from_fn(vec![1, len, ch], wave(0.37)),
            Tensor::from_fn(vec![1, len, ch], |i| 0.05 + 0.5 * wave(0.11)(i).abs()),
            Tensor::from_fn(vec![ch, st], |i| -1.0 - (i % st) as f64),
            Tensor::from_fn(vec![1, len, st], wave(0.53)),
            Tensor::from_fn(vec![1, len, st], wave(0.71)),
            Tensor::from_fn(vec![ch], |i| 1.0 + i as f64),
        ]
    }

    fn run_scan(ops: &[Tensor<f64>; 6]) -> Result<Tensor<f64>> {
        let mut tape = Tape::new();
        let v: Vec<Var> = ops.iter().map(|t| tape.constant(t.clone())).collect();
        let y = scan(&mut tape, v[0], v[1], v[2], v[3], v[4], v[5])?;
        Ok(tape.value(y).clone())
    }

    #[test]
    fn single_step_closed_form() {
        let ops = operands(1, 2, 3);
        let y = run_scan(&ops).unwrap();
        for c in 0..2 {
            let x = ops[0].data()[c];
            let dt = ops[1].data()[c];
            let mut expect = ops[5].data()[c] * x;
            for k in 0..3 {
                expect += ops[4].data()[k] * dt * ops[3].data()[k] * x;
            }
            assert!((y.data()[c] - expect).abs() < 1e-14);
        }
    }

    #[test]
    fn zero_input_gives_zero_output() {
        let mut ops = operands(16, 2, 3);
        ops[0] = Tensor::zeros(vec![1, 16, 2]);
        let y = run_scan(&ops).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn non_negative_state_entry_is_rejected() {
        let mut ops = operands(4, 2, 2);
        ops[2].data_mut()[3] = 0.0;
        assert!(matches!(run_scan(&ops), Err(Error::Config(_))));
    }

    #[test]
    fn blocked_scan_agrees_with_reference() {
        let ops = operands(50, 3, 4);
        let s = ScanInputs {
            x: ops[0].data(),
            delta: ops[1].data(),
            a: ops[2].data(),
            b: ops[3].data(),
            c: ops[4].data(),
            d: ops[5].data(),
            batch: 1,
            len: 50,
            channels: 3,
            state: 4,
        };
        let reference = scan_forward(s).y;
        for block in [1, 7, 16, 50, 64] {
            let blocked = scan_blocked(s, block);
            let diff = reference
                .iter()
                .zip(&blocked)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(diff < 1e-12, "block {block}: {diff}");
        }
    }

    #[test]
    fn ma_preserves_shape() {
        let mut init = ParamInit::new(3);
        let p = SsmParams::new(&mut init, "ssm", 3, 2).unwrap();
        let store = init.finish();
        for o in Orientation::ALL {
            let mut tape = Tape::<f64>::new();
            let bind = tape.bind_frozen(&store);
            let x = tape.constant(Tensor::from_fn(vec![2, 3, 2, 3, 4], |i| (i as f64 * 0.1).cos()));
            let y = ma(&mut tape, x, o, &p, &bind).unwrap();
            assert_eq!(tape.shape(y), &[2, 3, 2, 3, 4]);
        }
    }

    /// Step-by-step evaluation straight from the recurrence, projections included.
    fn naive_ssm(x: &Tensor<f64>, store: &crate::tensor::ParamStore<f64>, p: &SsmParams) -> Vec<f64> {
        let (n, len, ch, st) = (x.shape()[0], x.shape()[1], p.channels, p.state);
        let wd = store.get(p.w_delta).data();
        let bd = store.get(p.b_delta).data();
        let wb = store.get(p.w_b).data();
        let wc = store.get(p.w_c).data();
        let al = store.get(p.a_log).data();
        let dg = store.get(p.d_skip).data();
        let mut y = vec![0.0; n * len * ch];
        for b in 0..n {
            let mut h = vec![vec![0.0; st]; ch];
            for t in 0..len {
                let xt = &x.data()[(b * len + t) * ch..][..ch];
                let dot = |w: &[f64], row: usize| (0..ch).map(|j| w[row * ch + j] * xt[j]).sum::<f64>();
                for c in 0..ch {
                    let z = dot(wd, c) + bd[c];
                    let delta = (1.0 + z.exp()).ln();
                    let mut out = dg[c] * xt[c];
                    for k in 0..st {
                        let a = -al[c * st + k].exp();
                        h[c][k] = (delta * a).exp() * h[c][k] + delta * dot(wb, k) * xt[c];
                        out += dot(wc, k) * h[c][k];
                    }
                    y[(b * len + t) * ch + c] = out;
                }
            }
        }
        y
    }

    fn oracle_case(seed: u64, len: usize, ch: usize, st: usize) -> f64 {
        let mut init = ParamInit::new(seed);
        let p = SsmParams::new(&mut init, "s", ch, st).unwrap();
        let mut store = init.finish();
        let wb = store.get(p.w_b).map(|v| v * 5.0);
        store.set(p.w_b, wb).unwrap();
        let x = Tensor::from_fn(vec![2, len, ch], |i| ((i as f64 + seed as f64) * 0.731).sin());
        let mut tape = Tape::<f64>::new();
        let bind = tape.bind_frozen(&store);
        let seq = tape.constant(x.clone());
        let y = selective_scan(&mut tape, seq, &p, &bind).unwrap();
        let expect = naive_ssm(&x, &store, &p);
        tape.value(y).data().iter().zip(&expect).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn matches_naive_recurrence_l64() {
        assert!(oracle_case(1, 64, 4, 8) < 1e-6);
    }

    proptest::proptest! {
        #![proptest_config(proptest::test_runner::Config::with_cases(24))]
        #[test]
        fn matches_naive_recurrence(seed in 0u64..1000, len in 1usize..=256, ch in 1usize..=8, st in 1usize..=8) {
            proptest::prop_assert!(oracle_case(seed, len, ch, st) < 1e-6);
        }
    }

    #[test]
    fn states_stay_within_closed_form_bound() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let (len, ch, st) = (4096, 3, 4);
        for _ in 0..4 {
            let x: Vec<f64> = (0..len * ch).map(|_| rng.random_range(-1.0..=1.0)).collect();
            let delta: Vec<f64> = (0..len * ch).map(|_| rng.random_range(1e-3..2.0)).collect();
            let a: Vec<f64> = (0..ch * st).map(|_| -rng.random_range(0.05..3.0)).collect();
            let b: Vec<f64> = (0..len * st).map(|_| rng.random_range(-1.5..1.5)).collect();
            let c: Vec<f64> = (0..len * st).map(|_| rng.random_range(-1.0..1.0)).collect();
            let d = vec![1.0; ch];
            let max = |v: &[f64]| v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
            let bound = state_bound(max(&delta), max(&b), max(&x), a.iter().fold(f64::INFINITY, |m, v| m.min(-v)));
            let s = ScanInputs { x: &x, delta: &delta, a: &a, b: &b, c: &c, d: &d, batch: 1, len, channels: ch, state: st };
            let out = scan_forward(s);
            let peak = max(&out.states);
            assert!(peak <= bound, "{peak} > {bound}");
        }
    }

    #[test]
    fn gradient_through_ma() {
        let mut init = ParamInit::new(5);
        let p = SsmParams::new(&mut init, "s", 3, 2).unwrap();
        let store = init.finish();
        let mut inputs = vec![Tensor::from_fn(vec![1, 3, 2, 2, 2], |i| ((i as f64) * 0.9).sin())];
        inputs.extend(store.values().iter().cloned());
        let weight = Tensor::from_fn(vec![1, 3, 2, 2, 2], |i| ((i as f64) * 0.4).cos());
        let shapes: Vec<Vec<usize>> = inputs.iter().map(|t| t.shape().to_vec()).collect();
        let coords = crate::gradcheck::sample_coords(&shapes, 3, 20, 9);
        for o in Orientation::ALL {
            let report = crate::gradcheck::check(&inputs, &coords, 1e-5, |tape, vars| {
                let bind = Binding::from_vars(vars[1..].to_vec());
                let y = ma(tape, vars[0], o, &p, &bind)?;
                let w = tape.constant(weight.clone());
                let y = tape.mul(y, w)?;
                tape.sum(y)
            })
            .unwrap();
            assert!(report.max_rel_err() < 1e-4, "{o:?}: {:?}", report.worst());
        }
    }

    #[test]
    fn param_count_formula() {
        let mut init = ParamInit::new(0);
        SsmParams::new(&mut init, "s", 5, 3).unwrap();
        assert_eq!(init.finish().numel(), SsmParams::numel(5, 3));
    }
}
