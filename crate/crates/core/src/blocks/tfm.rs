use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::init::ParamInit;
use crate::ssm::{flatten, ma, unflatten, Orientation, SsmParams};
use crate::tensor::{Binding, ConvSpec, Element, Tape, Tensor, Var};

use super::ConvParams;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TfmConfig {
    /// SSM state size per channel.
    pub state: usize,
    /// Largest token count attended to exactly.
    pub attention_budget: usize,
    /// Average-pool keys and values by 2 per axis beyond the budget instead of failing.
    pub pooled: bool,
}

impl Default for TfmConfig {
    fn default() -> Self {
        TfmConfig { state: 8, attention_budget: 4096, pooled: true }
    }
}

/// Three directional SSMs, single-head attention between them and a
/// per-channel fusion of the two paths.
#[derive(Clone, Debug)]
pub struct TfmParams {
    pub channels: usize,
    pub config: TfmConfig,
    pub forward: SsmParams,
    pub reverse: SsmParams,
    pub inter_slice: SsmParams,
    /// Grouped `k = 1` conv over interleaved `[mba_c, att_c]` pairs, `2C -> C`.
    pub fuse: ConvParams,
}

impl TfmParams {
    pub fn new(init: &mut ParamInit, prefix: &str, c: usize, config: TfmConfig) -> Result<Self> {
        let n = config.state;
        Ok(TfmParams {
            channels: c,
            forward: SsmParams::new(init, &format!("{prefix}.forward"), c, n)?,
            reverse: SsmParams::new(init, &format!("{prefix}.reverse"), c, n)?,
            inter_slice: SsmParams::new(init, &format!("{prefix}.inter_slice"), c, n)?,
            fuse: ConvParams::new(init, &format!("{prefix}.fuse"), 2 * c, c, ConvSpec::new([1; 3], [1; 3], [0; 3], c))?,
            config,
        })
    }

    pub fn numel(c: usize, state: usize) -> usize {
        3 * SsmParams::numel(c, state) + 2 * c + c
    }
}

/// Intermediate values of one TFM evaluation.
#[derive(Clone, Copy, Debug)]
pub struct TfmTaps {
    pub mq: Var,
    pub mk: Var,
    pub mv: Var,
    pub mba: Var,
    /// Row-stochastic attention weights, `[N, L_q, L_k]`.
    pub weights: Var,
    pub att: Var,
    pub out: Var,
}

fn avg_pool2<T: Element>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    let c = tape.shape(x)[1];
    let w = tape.constant(Tensor::full(vec![c, 1, 2, 2, 2], T::lit(0.125)));
    tape.conv3d(x, w, None, ConvSpec::patch(2, c))
}

/// Shape-preserving `[N, C, D, H, W]` block; see [`TfmTaps`] for the pieces.
pub fn tfm_forward<T: Element>(tape: &mut Tape<T>, x: Var, p: &TfmParams, bind: &Binding) -> Result<Var> {
    tfm_taps(tape, x, p, bind).map(|t| t.out)
}

pub fn tfm_taps<T: Element>(tape: &mut Tape<T>, x: Var, p: &TfmParams, bind: &Binding) -> Result<TfmTaps> {
    let [_, c, d, h, w] = tape.value(x).dims5()?;
    if c != p.channels {
        return Err(Error::shape("tfm", format!("expected {} channels, got {c}", p.channels)));
    }
    let len = d * h * w;
    let budget = p.config.attention_budget;
    if len > budget && !p.config.pooled {
        return Err(Error::Config(format!(
            "tfm: {len} tokens exceed the attention budget of {budget}; enable pooled attention or raise the budget"
        )));
    }
    let mq = ma(tape, x, Orientation::Forward, &p.forward, bind)?;
    let mk = ma(tape, x, Orientation::Reverse, &p.reverse, bind)?;
    let mv = ma(tape, x, Orientation::InterSlice, &p.inter_slice, bind)?;
    let mba = tape.sum_n(&[mq, mk, mv])?;

    let (keys, values) = if len > budget {
        (avg_pool2(tape, mk)?, avg_pool2(tape, mv)?)
    } else {
        (mk, mv)
    };
    let q = flatten(tape, mq, Orientation::Forward)?;
    let k = flatten(tape, keys, Orientation::Forward)?;
    let v = flatten(tape, values, Orientation::Forward)?;
    let kt = tape.transpose(k)?;
    let scores = tape.matmul(q, kt)?;
    let scores = tape.scale(scores, 1.0 / (c as f64).sqrt())?;
    let weights = tape.softmax(scores, 2)?;
    let att = tape.matmul(weights, v)?;
    let att = unflatten(tape, att, Orientation::Forward, [d, h, w])?;

    let pairs = tape.interleave_channels(mba, att)?;
    let out = p.fuse.forward(tape, pairs, bind)?;
    Ok(TfmTaps { mq, mk, mv, mba, weights, att, out })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck;
    use crate::tensor::ParamStore;

    fn volume(shape: Vec<usize>, k: f64) -> Tensor<f64> {
        Tensor::from_fn(shape, |i| ((i as f64 + 1.0) * k).sin())
    }

    fn setup(c: usize, state: usize, seed: u64) -> (TfmParams, ParamStore<f64>) {
        let mut init = ParamInit::new(seed);
        let p = TfmParams::new(&mut init, "tfm", c, TfmConfig { state, ..TfmConfig::default() }).unwrap();
        (p, init.finish())
    }

    #[test]
    fn param_count() {
        let (_, store) = setup(5, 3, 0);
        assert_eq!(store.numel(), TfmParams::numel(5, 3));
    }

    #[test]
    fn assembly_and_row_stochastic_attention() {
        let (p, store) = setup(3, 4, 1);
        let mut tape = Tape::new();
        let bind = tape.bind_frozen(&store);
        let x = tape.constant(volume(vec![2, 3, 2, 3, 2], 0.4));
        let t = tfm_taps(&mut tape, x, &p, &bind).unwrap();
        assert_eq!(tape.shape(t.out), &[2, 3, 2, 3, 2]);
        for i in 0..tape.value(t.mba).numel() {
            let parts = [t.mq, t.mk, t.mv].map(|v| tape.value(v).data()[i]);
            let expect = parts[0] + parts[1] + parts[2];
            assert!((tape.value(t.mba).data()[i] - expect).abs() < 1e-15);
        }
        for row in tape.value(t.weights).data().chunks(12) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn budget_exceeded_without_pooling_is_an_error() {
        let mut init = ParamInit::new(0);
        let config = TfmConfig { state: 2, attention_budget: 8, pooled: false };
        let p = TfmParams::new(&mut init, "tfm", 2, config).unwrap();
        let store = init.finish();
        let mut tape = Tape::new();
        let bind = tape.bind_frozen(&store);
        let x = tape.constant(volume(vec![1, 2, 2, 2, 4], 0.4));
        let err = tfm_forward(&mut tape, x, &p, &bind).unwrap_err();
        assert!(matches!(err, Error::Config(ref m) if m.contains("pooled")), "{err}");
    }

    #[test]
    fn pooled_path_preserves_shape() {
        let mut init = ParamInit::new(0);
        let config = TfmConfig { state: 2, attention_budget: 8, pooled: true };
        let p = TfmParams::new(&mut init, "tfm", 2, config).unwrap();
        let store = init.finish();
        let mut tape = Tape::new();
        let bind = tape.bind_frozen(&store);
        let x = tape.constant(volume(vec![1, 2, 4, 4, 4], 0.4));
        let t = tfm_taps(&mut tape, x, &p, &bind).unwrap();
        assert_eq!(tape.shape(t.weights), &[1, 64, 8]);
        assert_eq!(tape.shape(t.out), &[1, 2, 4, 4, 4]);
    }

    /// Direct loop evaluation of the whole block for a single sample.
    pub(crate) fn straight_line(x: &Tensor<f64>, store: &ParamStore<f64>, p: &TfmParams) -> Vec<f64> {
        let [_, c, d, h, w] = x.dims5().unwrap();
        let len = d * h * w;
        let at = |ch: usize, z: usize, y: usize, xx: usize| x.data()[((ch * d + z) * h + y) * w + xx];
        let raster: Vec<[usize; 3]> = (0..d)
            .flat_map(|z| (0..h).flat_map(move |y| (0..w).map(move |xx| [z, y, xx])))
            .collect();
        let reverse: Vec<[usize; 3]> = raster.iter().rev().copied().collect();
        let inter: Vec<[usize; 3]> = (0..h)
            .flat_map(|y| (0..w).flat_map(move |xx| (0..d).map(move |z| [z, y, xx])))
            .collect();
        let ssm = |order: &[[usize; 3]], s: &SsmParams| -> Vec<Vec<f64>> {
            // out[ch][raster voxel]
            let n = s.state;
            let g = |id| store.get(id).data();
            let mut out = vec![vec![0.0; len]; c];
            let mut state = vec![vec![0.0; n]; c];
            for &[z, y, xx] in order {
                let xt: Vec<f64> = (0..c).map(|ch| at(ch, z, y, xx)).collect();
                let proj = |wm: &[f64], row: usize| (0..c).map(|j| wm[row * c + j] * xt[j]).sum::<f64>();
                for ch in 0..c {
                    let delta = (proj(g(s.w_delta), ch) + g(s.b_delta)[ch]).exp().ln_1p();
                    let mut y_out = g(s.d_skip)[ch] * xt[ch];
                    for k in 0..n {
                        let a = -g(s.a_log)[ch * n + k].exp();
                        state[ch][k] = (delta * a).exp() * state[ch][k] + delta * proj(g(s.w_b), k) * xt[ch];
                        y_out += proj(g(s.w_c), k) * state[ch][k];
                    }
                    out[ch][(z * h + y) * w + xx] = y_out;
                }
            }
            out
        };
        let q = ssm(&raster, &p.forward);
        let k = ssm(&reverse, &p.reverse);
        let v = ssm(&inter, &p.inter_slice);
        let scale = 1.0 / (c as f64).sqrt();
        let mut att = vec![vec![0.0; len]; c];
        for i in 0..len {
            let logits: Vec<f64> = (0..len).map(|j| (0..c).map(|ch| q[ch][i] * k[ch][j]).sum::<f64>() * scale).collect();
            let top = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - top).exp()).collect();
            let z: f64 = e.iter().sum();
            for ch in 0..c {
                att[ch][i] = (0..len).map(|j| e[j] / z * v[ch][j]).sum();
            }
        }
        let fw = store.get(p.fuse.weight).data();
        let fb = store.get(p.fuse.bias.unwrap()).data();
        let mut out = vec![0.0; c * len];
        for ch in 0..c {
            for i in 0..len {
                let mba = q[ch][i] + k[ch][i] + v[ch][i];
                out[ch * len + i] = fw[2 * ch] * mba + fw[2 * ch + 1] * att[ch][i] + fb[ch];
            }
        }
        out
    }

    #[test]
    fn matches_straight_line_oracle() {
        let (p, store) = setup(4, 3, 9);
        let x = volume(vec![1, 4, 2, 2, 2], 0.77);
        let mut tape = Tape::new();
        let bind = tape.bind_frozen(&store);
        let xv = tape.constant(x.clone());
        let y = tfm_forward(&mut tape, xv, &p, &bind).unwrap();
        let expect = straight_line(&x, &store, &p);
        let diff = tape.value(y).data().iter().zip(&expect).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(diff < 1e-6, "{diff}");
    }

    #[test]
    fn gradient_check() {
        let (p, store) = setup(3, 2, 4);
        let mut inputs = vec![volume(vec![1, 3, 2, 2, 3], 0.37)];
        inputs.extend(store.values().iter().cloned());
        let weight = volume(vec![1, 3, 2, 2, 3], 0.13);
        let shapes: Vec<Vec<usize>> = inputs.iter().map(|t| t.shape().to_vec()).collect();
        let coords = gradcheck::sample_coords(&shapes, 2, 40, 6);
        let report = gradcheck::check(&inputs, &coords, 1e-5, |tape, vars| {
            let bind = Binding::from_vars(vars[1..].to_vec());
            let y = tfm_forward(tape, vars[0], &p, &bind)?;
            let w = tape.constant(weight.clone());
            let y = tape.mul(y, w)?;
            tape.sum(y)
        })
        .unwrap();
        assert!(report.max_rel_err() < 1e-4, "{:?}", report.worst());
    }
}
