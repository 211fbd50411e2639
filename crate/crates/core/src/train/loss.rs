use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Element, Tape, Tensor, Var};

/// Probability clamp of the focal term.
pub const FOCAL_CLAMP: f64 = 1e-7;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub dice_weight: f64,
    pub focal_weight: f64,
    pub gamma: f64,
    pub alpha: f64,
    pub smooth: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { dice_weight: 1.0, focal_weight: 1.0, gamma: 2.0, alpha: 0.25, smooth: 1e-5 }
    }
}

fn check<T: Element>(op: &'static str, tape: &Tape<T>, prob: Var, target: &Tensor<T>) -> Result<[usize; 2]> {
    let s = tape.shape(prob);
    if s != target.shape() || s.len() < 2 {
        return Err(Error::Shape {
            op,
            detail: format!("prediction {s:?} and target {:?} must match with at least 2 axes", target.shape()),
        });
    }
    Ok([s[0] * s[1], s[2..].iter().product()])
}

/// `1 − (2Σpg + s) / (Σp² + Σg² + s)` per sample and channel, averaged.
pub fn soft_dice_loss<T: Element>(tape: &mut Tape<T>, prob: Var, target: &Tensor<T>, smooth: f64) -> Result<Var> {
    let [planes, n] = check("soft_dice_loss", tape, prob, target)?;
    let p = tape.value(prob).data();
    let g = target.data();
    let s = T::lit(smooth);
    let mut terms = Vec::with_capacity(planes);
    for k in 0..planes {
        let (pk, gk) = (&p[k * n..][..n], &g[k * n..][..n]);
        let mut inter = T::zero();
        let mut denom = s;
        for (&a, &b) in pk.iter().zip(gk) {
            inter = inter + a * b;
            denom = denom + a * a + b * b;
        }
        terms.push((T::lit(2.0) * inter + s, denom));
    }
    let count = T::lit(planes as f64);
    let loss = terms.iter().map(|&(num, den)| T::one() - num / den).sum::<T>() / count;
    let target = target.clone();
    tape.record("soft_dice_loss", Tensor::scalar(loss), &[prob], move |a| {
        let up = a.grad.data()[0] / count;
        let p = a.inputs[0].data();
        let g = target.data();
        let mut out = vec![T::zero(); p.len()];
        for (k, &(num, den)) in terms.iter().enumerate() {
            for i in k * n..(k + 1) * n {
                // d/dp [−num/den] = −(2g·den − num·2p) / den²
                out[i] = up * -(T::lit(2.0) * g[i] * den - num * T::lit(2.0) * p[i]) / (den * den);
            }
        }
        vec![Some(Tensor::new(a.inputs[0].shape().to_vec(), out).unwrap())]
    })
}

/// Mean over voxels of `−α (1 − p_t)^γ ln p_t`, `p_t = p g + (1 − p)(1 − g)`,
/// with `p` clamped to `[1e-7, 1 − 1e-7]`.
pub fn focal_loss<T: Element>(tape: &mut Tape<T>, prob: Var, target: &Tensor<T>, gamma: f64, alpha: f64) -> Result<Var> {
    check("focal_loss", tape, prob, target)?;
    let (lo, hi) = (T::lit(FOCAL_CLAMP), T::lit(1.0 - FOCAL_CLAMP));
    let (gm, al) = (T::lit(gamma), T::lit(alpha));
    let p_t = move |p: T, g: T| {
        let pc = p.max(lo).min(hi);
        pc * g + (T::one() - pc) * (T::one() - g)
    };
    let p = tape.value(prob).data();
    let g = target.data();
    let count = T::lit(p.len() as f64);
    let total: T = p.iter().zip(g).map(|(&a, &b)| {
        let pt = p_t(a, b);
        -al * (T::one() - pt).powf(gm) * pt.ln()
    }).sum();
    let target = target.clone();
    tape.record("focal_loss", Tensor::scalar(total / count), &[prob], move |a| {
        let up = a.grad.data()[0] / count;
        let p = a.inputs[0].data();
        let g = target.data();
        let out = p
            .iter()
            .zip(g)
            .map(|(&pv, &gv)| {
                if pv < lo || pv > hi {
                    return T::zero();
                }
                let pt = p_t(pv, gv);
                let q = T::one() - pt;
                // d/dp_t of −α q^γ ln p_t, with q = 1 − p_t.
                let mod_grad = if gamma == 0.0 { T::zero() } else { gm * q.powf(gm - T::one()) * pt.ln() };
                let dpt = al * (mod_grad - q.powf(gm) / pt);
                up * dpt * (T::lit(2.0) * gv - T::one())
            })
            .collect();
        vec![Some(Tensor::new(a.inputs[0].shape().to_vec(), out).unwrap())]
    })
}

/// `λ_dice · dice + λ_focal · focal`.
pub fn composite_loss<T: Element>(tape: &mut Tape<T>, prob: Var, target: &Tensor<T>, cfg: &LossConfig) -> Result<Var> {
    let d = soft_dice_loss(tape, prob, target, cfg.smooth)?;
    let f = focal_loss(tape, prob, target, cfg.gamma, cfg.alpha)?;
    let d = tape.scale(d, cfg.dice_weight)?;
    let f = tape.scale(f, cfg.focal_weight)?;
    tape.add(d, f)
}
