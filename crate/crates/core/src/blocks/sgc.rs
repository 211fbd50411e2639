use crate::error::Result;
use crate::init::ParamInit;
use crate::tensor::{Binding, ConvSpec, Element, Tape, Var};

use super::{norm, ConvParams, NormParams};

/// Hidden width of the fusion MLP relative to the block width.
const MLP_RATIO: usize = 2;

/// Dual depthwise branch plus pointwise branch, fused by a residual MLP.
#[derive(Clone, Debug)]
pub struct SgcParams {
    pub channels: usize,
    pub dw3: ConvParams,
    pub norm3: NormParams,
    pub dw1: ConvParams,
    pub norm1: NormParams,
    pub pw: ConvParams,
    pub mlp_in: ConvParams,
    pub mlp_out: ConvParams,
}

impl SgcParams {
    pub fn new(init: &mut ParamInit, prefix: &str, c: usize) -> Result<Self> {
        let hidden = MLP_RATIO * c;
        Ok(SgcParams {
            channels: c,
            dw3: ConvParams::unbiased(init, &format!("{prefix}.dw3"), c, c, ConvSpec::same(3, c))?,
            norm3: NormParams::new(init, &format!("{prefix}.norm3"), c)?,
            dw1: ConvParams::unbiased(init, &format!("{prefix}.dw1"), c, c, ConvSpec::same(1, c))?,
            norm1: NormParams::new(init, &format!("{prefix}.norm1"), c)?,
            pw: ConvParams::new(init, &format!("{prefix}.pw"), c, c, ConvSpec::pointwise())?,
            mlp_in: ConvParams::new(init, &format!("{prefix}.mlp_in"), c, hidden, ConvSpec::pointwise())?,
            mlp_out: ConvParams::new(init, &format!("{prefix}.mlp_out"), hidden, c, ConvSpec::pointwise())?,
        })
    }

    pub fn numel(c: usize) -> usize {
        let hidden = MLP_RATIO * c;
        27 * c + 2 * c + c + 2 * c + (c * c + c) + (hidden * c + hidden) + (c * hidden + c)
    }
}

/// `x + MLP(IN(Dw1(IN(Dw3 x))) + Pw x)`; shape preserving.
pub fn sgc_forward<T: Element>(tape: &mut Tape<T>, x: Var, p: &SgcParams, bind: &Binding) -> Result<Var> {
    let a = p.dw3.forward(tape, x, bind)?;
    let a = norm(tape, a, &p.norm3, bind)?;
    let a = p.dw1.forward(tape, a, bind)?;
    let x1 = norm(tape, a, &p.norm1, bind)?;
    let x2 = p.pw.forward(tape, x, bind)?;
    let mixed = tape.add(x1, x2)?;
    let hidden = p.mlp_in.forward(tape, mixed, bind)?;
    let hidden = tape.relu(hidden)?;
    let out = p.mlp_out.forward(tape, hidden, bind)?;
    tape.add(x, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck;
    use crate::tensor::Tensor;

    fn volume(shape: Vec<usize>, k: f64) -> Tensor<f64> {
        Tensor::from_fn(shape, |i| ((i as f64 + 1.0) * k).sin())
    }

    #[test]
    fn zero_init_is_pure_residual() {
        let mut init = ParamInit::zeros();
        let p = SgcParams::new(&mut init, "sgc", 3).unwrap();
        let store = init.finish();
        let x = volume(vec![2, 3, 4, 5, 3], 0.3);
        let mut tape = Tape::new();
        let bind = tape.bind_frozen(&store);
        let xv = tape.constant(x.clone());
        let y = sgc_forward(&mut tape, xv, &p, &bind).unwrap();
        assert_eq!(tape.value(y), &x);
    }

    #[test]
    fn shape_and_param_count() {
        for (c, shape) in [(1, [3, 3, 3]), (4, [2, 5, 4]), (6, [1, 1, 1])] {
            let mut init = ParamInit::new(c as u64);
            let p = SgcParams::new(&mut init, "sgc", c).unwrap();
            let store = init.finish();
            assert_eq!(store.numel(), SgcParams::numel(c));
            assert_eq!(SgcParams::numel(c), 5 * c * c + 36 * c);
            let mut tape = Tape::new();
            let bind = tape.bind_frozen(&store);
            let x = tape.constant(volume(vec![1, c, shape[0], shape[1], shape[2]], 0.5));
            let y = sgc_forward(&mut tape, x, &p, &bind).unwrap();
            assert_eq!(tape.shape(y), &[1, c, shape[0], shape[1], shape[2]]);
        }
    }

    #[test]
    fn gradient_check() {
        let mut init = ParamInit::new(2);
        let p = SgcParams::new(&mut init, "sgc", 4).unwrap();
        let store = init.finish();
        let mut inputs = vec![volume(vec![1, 4, 4, 4, 4], 0.37)];
        inputs.extend(store.values().iter().cloned());
        let weight = volume(vec![1, 4, 4, 4, 4], 0.13);
        let shapes: Vec<Vec<usize>> = inputs.iter().map(|t| t.shape().to_vec()).collect();
        let coords = gradcheck::sample_coords(&shapes, 2, 40, 6);
        let report = gradcheck::check(&inputs, &coords, 1e-5, |tape, vars| {
            let bind = Binding::from_vars(vars[1..].to_vec());
            let y = sgc_forward(tape, vars[0], &p, &bind)?;
            let w = tape.constant(weight.clone());
            let y = tape.mul(y, w)?;
            tape.sum(y)
        })
        .unwrap();
        assert!(report.max_rel_err() < 1e-4, "{:?}", report.worst());
    }
}
