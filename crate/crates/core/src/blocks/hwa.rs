use crate::error::{Error, Result};
use crate::init::ParamInit;
use crate::tensor::{Binding, ConvSpec, Element, ParamId, Tape, Var};

use super::ConvParams;

/// Kernel size, equal to the stride, of each per-modality branch.
pub const HWA_BRANCHES: [usize; 4] = [1, 2, 4, 8];

/// Multi-scale modality fusion stem.
#[derive(Clone, Debug)]
pub struct HwaParams {
    pub modalities: usize,
    pub out_channels: usize,
    /// `branches[i][j]`: modality `i`, kernel `HWA_BRANCHES[j]`.
    pub branches: Vec<Vec<ConvParams>>,
    /// One scalar of shape `[1]` per modality.
    pub weights: Vec<ParamId>,
    pub proj: ConvParams,
}

impl HwaParams {
    pub fn new(init: &mut ParamInit, prefix: &str, modalities: usize, out_channels: usize) -> Result<Self> {
        if modalities == 0 {
            return Err(Error::Config("hwa: at least one input modality is required".into()));
        }
        let mut branches = Vec::with_capacity(modalities);
        for m in 0..modalities {
            let row = HWA_BRANCHES
                .iter()
                .map(|&k| ConvParams::new(init, &format!("{prefix}.m{m}.k{k}"), 1, 1, ConvSpec::patch(k, 1)))
                .collect::<Result<Vec<_>>>()?;
            branches.push(row);
        }
        let share = 1.0 / modalities as f64;
        let weights = (0..modalities)
            .map(|m| init.constant(&format!("{prefix}.w{m}"), vec![1], share))
            .collect::<Result<Vec<_>>>()?;
        let proj = ConvParams::new(init, &format!("{prefix}.proj"), HWA_BRANCHES.len(), out_channels, ConvSpec::pointwise())?;
        Ok(HwaParams { modalities, out_channels, branches, weights, proj })
    }

    pub fn numel(modalities: usize, out_channels: usize) -> usize {
        let branch: usize = HWA_BRANCHES.iter().map(|k| k * k * k + 1).sum();
        modalities * (branch + 1) + HWA_BRANCHES.len() * out_channels + out_channels
    }
}

/// `[N, C_in, D, H, W]` to `[N, C0, D, H, W]`.
///
/// Every modality is run through the four strided branches, each resized
/// back to full resolution; the 4-channel stacks are mixed with the learned
/// modality weights and projected to `C0`.
pub fn hwa_forward<T: Element>(tape: &mut Tape<T>, x: Var, p: &HwaParams, bind: &Binding) -> Result<Var> {
    let [_, c_in, d, h, w] = tape.value(x).dims5()?;
    if c_in != p.modalities {
        return Err(Error::shape("hwa", format!("expected {} modalities, got {c_in}", p.modalities)));
    }
    let widest = HWA_BRANCHES[HWA_BRANCHES.len() - 1];
    for (axis, extent) in [d, h, w].into_iter().enumerate() {
        if extent < widest {
            return Err(Error::shape(
                "hwa",
                format!("branch k={widest} needs spatial extents >= {widest}, axis {} has {extent}", axis + 2),
            ));
        }
    }
    let modalities = tape.split(x, 1, &vec![1; c_in])?;
    let mut mixed = Vec::with_capacity(c_in);
    for (m, &xm) in modalities.iter().enumerate() {
        let mut scales = Vec::with_capacity(HWA_BRANCHES.len());
        for branch in &p.branches[m] {
            let y = branch.forward(tape, xm, bind)?;
            scales.push(tape.resize_trilinear(y, [d, h, w])?);
        }
        let stacked = tape.concat(&scales, 1)?;
        mixed.push(tape.mul_scalar(stacked, bind[p.weights[m]])?);
    }
    let fused = tape.sum_n(&mixed)?;
    p.proj.forward(tape, fused, bind)
}

/// Copies modality `from`'s branch kernels and weight into modality `to`.
#[cfg(test)]
pub(crate) fn copy_modality(store: &mut crate::tensor::ParamStore<f64>, p: &HwaParams, from: usize, to: usize) {
    let mut ids: Vec<(ParamId, ParamId)> = vec![(p.weights[from], p.weights[to])];
    for (a, b) in p.branches[from].iter().zip(&p.branches[to]) {
        ids.push((a.weight, b.weight));
        ids.push((a.bias.unwrap(), b.bias.unwrap()));
    }
    for (a, b) in ids {
        let v = store.get(a).clone();
        store.set(b, v).unwrap();
    }
}
