//! The stem, convolutional and skip-connection blocks of the network.

mod hwa;
mod sgc;
mod tfm;

pub use hwa::{hwa_forward, HwaParams, HWA_BRANCHES};
pub use sgc::{sgc_forward, SgcParams};
pub use tfm::{tfm_forward, tfm_taps, TfmConfig, TfmParams, TfmTaps};

use crate::error::Result;
use crate::init::ParamInit;
use crate::tensor::{Binding, ConvSpec, Element, ParamId, Tape, Var};

pub const NORM_EPS: f64 = 1e-5;

/// Per-channel gain and bias of an instance norm.
#[derive(Clone, Debug)]
pub struct NormParams {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl NormParams {
    pub fn new(init: &mut ParamInit, prefix: &str, channels: usize) -> Result<Self> {
        Ok(NormParams {
            gain: init.constant(&format!("{prefix}.gain"), vec![channels], 1.0)?,
            bias: init.constant(&format!("{prefix}.bias"), vec![channels], 0.0)?,
        })
    }
}

/// Instance norm, degrading to the affine map alone when a feature map has
/// a single voxel and per-instance statistics do not exist.
pub fn norm<T: Element>(tape: &mut Tape<T>, x: Var, p: &NormParams, bind: &Binding) -> Result<Var> {
    let [_, c, d, h, w] = tape.value(x).dims5()?;
    if d * h * w >= 2 {
        return tape.instance_norm3d(x, bind[p.gain], bind[p.bias], NORM_EPS);
    }
    let gain = tape.reshape(bind[p.gain], vec![c, 1, 1, 1, 1])?;
    tape.conv3d(x, gain, Some(bind[p.bias]), ConvSpec::new([1; 3], [1; 3], [0; 3], c))
}

/// A convolution weight with optional bias.
#[derive(Clone, Debug)]
pub struct ConvParams {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub spec: ConvSpec,
}

impl ConvParams {
    /// Registers `[c_out, c_in / groups, k, k, k]` weights and a bias.
    pub fn new(init: &mut ParamInit, prefix: &str, c_in: usize, c_out: usize, spec: ConvSpec) -> Result<Self> {
        let per_group = c_in / spec.groups;
        let [a, b, c] = spec.kernel;
        let fan_in = per_group * a * b * c;
        Ok(ConvParams {
            weight: init.fan_in(&format!("{prefix}.weight"), vec![c_out, per_group, a, b, c], fan_in)?,
            bias: Some(init.fan_in(&format!("{prefix}.bias"), vec![c_out], fan_in)?),
            spec,
        })
    }

    /// As [`ConvParams::new`] without a bias, for convs feeding a norm that
    /// would cancel it.
    pub fn unbiased(init: &mut ParamInit, prefix: &str, c_in: usize, c_out: usize, spec: ConvSpec) -> Result<Self> {
        let per_group = c_in / spec.groups;
        let [a, b, c] = spec.kernel;
        Ok(ConvParams {
            weight: init.fan_in(&format!("{prefix}.weight"), vec![c_out, per_group, a, b, c], per_group * a * b * c)?,
            bias: None,
            spec,
        })
    }

    pub fn forward<T: Element>(&self, tape: &mut Tape<T>, x: Var, bind: &Binding) -> Result<Var> {
        tape.conv3d(x, bind[self.weight], self.bias.map(|b| bind[b]), self.spec)
    }
}
