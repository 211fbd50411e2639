use crate::error::{Error, Result};
use crate::tensor::{Element, ParamStore, Tensor};

/// Linear warmup from 0 to `lr0` over `warmup` steps, then cosine annealing
/// to 0 at `total`.
pub fn lr_at(step: usize, total: usize, warmup: usize, lr0: f64) -> f64 {
    if step < warmup {
        return lr0 * step as f64 / warmup as f64;
    }
    if total <= warmup {
        return 0.0;
    }
    let progress = ((step - warmup) as f64 / (total - warmup) as f64).min(1.0);
    lr0 * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// AdamW moments mirroring a parameter store.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW<T = f32> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Element> AdamW<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        let zeros = || store.values().iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect();
        AdamW { beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: zeros(), v: zeros() }
    }

    /// One update with decoupled weight decay: `p ← p − lr·wd·p`, then the
    /// bias-corrected Adam step.
    pub fn update(&mut self, store: &mut ParamStore<T>, grads: &[Tensor<T>], lr: f64, wd: f64) -> Result<()> {
        if grads.len() != store.len() || self.m.len() != store.len() {
            return Err(Error::shape("adamw", format!("{} gradients for {} parameters", grads.len(), store.len())));
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let c1 = T::lit(1.0 - self.beta1.powi(t));
        let c2 = T::lit(1.0 - self.beta2.powi(t));
        let (lr_t, decay, eps) = (T::lit(lr), T::lit(1.0 - lr * wd), T::lit(self.eps));
        for (i, p) in store.values_mut().iter_mut().enumerate() {
            let g = &grads[i];
            if g.shape() != p.shape() {
                return Err(Error::shape("adamw", format!("gradient {:?} for parameter {:?}", g.shape(), p.shape())));
            }
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (j, pj) in p.data_mut().iter_mut().enumerate() {
                let gj = g.data()[j];
                m[j] = b1 * m[j] + (T::one() - b1) * gj;
                v[j] = b2 * v[j] + (T::one() - b2) * gj * gj;
                let m_hat = m[j] / c1;
                let v_hat = v[j] / c2;
                *pj = *pj * decay - lr_t * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Rescales gradients so their global L2 norm is at most `max_norm`.
pub fn clip_grad_norm<T: Element>(grads: &mut [Tensor<T>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data().iter())
        .map(|v| v.to_f64_lossy().powi(2))
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = T::lit(max_norm / norm);
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v = *v * s);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn one(v: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.register("p", Tensor::full(vec![1], v)).unwrap();
        s
    }

    #[test]
    fn schedule_landmarks() {
        let (total, warm, lr0) = (1000, 50, 1e-3);
        assert_eq!(lr_at(0, total, warm, lr0), 0.0);
        assert_eq!(lr_at(warm, total, warm, lr0), lr0);
        assert!(lr_at(total, total, warm, lr0).abs() < 1e-12);
        assert!((lr_at(warm + (total - warm) / 2, total, warm, lr0) - lr0 / 2.0).abs() < 1e-15);
        let below = lr_at(warm - 1, total, warm, lr0);
        let above = lr_at(warm + 1, total, warm, lr0);
        assert!((above - lr0).abs() < 1e-8 && (lr0 - below) <= lr0 / warm as f64 + 1e-15);
        assert_eq!(lr_at(3, 10, 0, 1.0), 0.5 * (1.0 + (0.3 * std::f64::consts::PI).cos()));
    }

    #[test]
    fn zero_gradients() {
        let mut s = one(2.0);
        let mut opt = AdamW::new(&s);
        let g = vec![Tensor::zeros(vec![1])];
        opt.update(&mut s, &g, 1e-3, 0.0).unwrap();
        assert_eq!(s.values()[0].data()[0], 2.0);
        opt.update(&mut s, &g, 1e-2, 0.4).unwrap();
        assert_eq!(s.values()[0].data()[0], 2.0 * (1.0 - 1e-2 * 0.4));
    }

    #[test]
    fn single_step_by_hand() {
        // m = 0.1, v = 0.001, m̂ = 1, v̂ = 1.
        let mut s = one(1.0);
        let mut opt = AdamW::new(&s);
        opt.update(&mut s, &[Tensor::full(vec![1], 1.0)], 1e-3, 0.4).unwrap();
        let expect = 1.0 * (1.0 - 1e-3 * 0.4) - 1e-3 * 1.0 / (1.0 + 1e-8);
        assert!((s.values()[0].data()[0] - expect).abs() < 1e-15);
    }

    #[test]
    fn clipping() {
        let mut g = vec![Tensor::full(vec![1], 3.0f64), Tensor::full(vec![1], 4.0)];
        assert_eq!(clip_grad_norm(&mut g, 1.0), 5.0);
        assert!((g[0].data()[0] - 0.6).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn without_decay_it_is_adam(grads in prop::collection::vec(-5.0f64..5.0, 1..20), p0 in -3.0f64..3.0) {
            let mut s = one(p0);
            let mut opt = AdamW::new(&s);
            let (mut p, mut m, mut v) = (p0, 0.0, 0.0);
            for (t, &g) in grads.iter().enumerate() {
                opt.update(&mut s, &[Tensor::full(vec![1], g)], 1e-2, 0.0).unwrap();
                m = 0.9 * m + (1.0 - 0.9) * g;
                v = 0.999 * v + (1.0 - 0.999) * g * g;
                let t = t as i32 + 1;
                p -= 1e-2 * (m / (1.0 - 0.9f64.powi(t))) / ((v / (1.0 - 0.999f64.powi(t))).sqrt() + 1e-8);
                prop_assert_eq!(s.values()[0].data()[0], p);
            }
        }
    }
}
