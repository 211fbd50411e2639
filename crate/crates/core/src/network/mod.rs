//! The four-stage U-shaped segmentation network.

mod checkpoint;
mod window;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, read_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use window::{gaussian_importance, sliding_window, tile_starts};

use serde::{Deserialize, Serialize};

use crate::blocks::{
    hwa_forward, norm, sgc_forward, tfm_forward, ConvParams, HwaParams, NormParams, SgcParams, TfmConfig, TfmParams,
};
use crate::error::{Error, Result};
use crate::init::ParamInit;
use crate::tensor::{Binding, ConvSpec, Element, ParamStore, Tape, Tensor, Var};

pub const STAGES: usize = 4;
/// Initial foreground probability of the head, set through its bias so
/// that early training is not dominated by the easy background voxels.
pub const HEAD_PRIOR: f64 = 0.01;
/// Total downsampling factor of the encoder.
pub const DIVISOR: usize = 1 << STAGES;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    /// Stage-0 width; stage `i` has `base_width << i` channels.
    pub base_width: usize,
    pub hwa: bool,
    pub sgc: bool,
    pub tfm: bool,
    /// Per-skip TFM switches, only consulted when `tfm` is on.
    pub tfm_stages: [bool; STAGES],
    pub tfm_config: TfmConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            in_channels: 2,
            out_channels: 2,
            base_width: 8,
            hwa: true,
            sgc: true,
            tfm: true,
            tfm_stages: [true; STAGES],
            tfm_config: TfmConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn widths(&self) -> [usize; STAGES] {
        std::array::from_fn(|i| self.base_width << i)
    }

    pub fn tfm_at(&self, stage: usize) -> bool {
        self.tfm && self.tfm_stages[stage]
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(format!("model: {m}")));
        if self.in_channels == 0 || self.out_channels == 0 || self.base_width == 0 {
            return fail("in_channels, out_channels and base_width must be positive");
        }
        if self.tfm_config.state == 0 || self.tfm_config.attention_budget == 0 {
            return fail("tfm_config.state and tfm_config.attention_budget must be positive");
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct EncoderStage {
    pub down: ConvParams,
    pub proj: ConvParams,
    pub norm: NormParams,
    pub sgc: Option<SgcParams>,
}

#[derive(Clone, Debug)]
pub struct DecoderLevel {
    pub up: ConvParams,
    pub skip: ConvParams,
    pub norm: NormParams,
}

#[derive(Clone, Debug)]
pub enum Stem {
    Hwa(HwaParams),
    Pointwise(ConvParams),
}

/// Parameter layout of the whole network. Values live in a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct HwaUnetr {
    pub config: ModelConfig,
    pub stem: Stem,
    pub encoder: Vec<EncoderStage>,
    pub skips: Vec<Option<TfmParams>>,
    pub bottleneck: Option<SgcParams>,
    /// Levels from the deepest (index 0, stage 3 to 2) to the full-resolution one.
    pub decoder: Vec<DecoderLevel>,
    pub head: ConvParams,
}

/// Selected intermediate maps of a forward pass.
#[derive(Clone, Debug)]
pub struct ForwardTaps {
    pub stem: Var,
    pub encoder: Vec<Var>,
    pub skips: Vec<Var>,
    pub logits: Var,
    pub output: Var,
}

impl HwaUnetr {
    /// Builds the layout and a freshly initialized store.
    pub fn new(config: ModelConfig, seed: u64) -> Result<(Self, ParamStore<f64>)> {
        Self::with_init(config, ParamInit::new(seed))
    }

    pub fn with_init(config: ModelConfig, mut init: ParamInit) -> Result<(Self, ParamStore<f64>)> {
        config.validate()?;
        let widths = config.widths();
        let c0 = config.base_width;
        let stem = if config.hwa {
            Stem::Hwa(HwaParams::new(&mut init, "stem", config.in_channels, c0)?)
        } else {
            Stem::Pointwise(ConvParams::new(&mut init, "stem", config.in_channels, c0, ConvSpec::pointwise())?)
        };
        let mut encoder = Vec::with_capacity(STAGES);
        let mut skips = Vec::with_capacity(STAGES);
        let mut c_prev = c0;
        for (i, &c) in widths.iter().enumerate() {
            let p = format!("enc{i}");
            encoder.push(EncoderStage {
                down: ConvParams::unbiased(&mut init, &format!("{p}.down"), c_prev, c_prev, ConvSpec::patch(2, c_prev))?,
                proj: ConvParams::unbiased(&mut init, &format!("{p}.proj"), c_prev, c, ConvSpec::pointwise())?,
                norm: NormParams::new(&mut init, &format!("{p}.norm"), c)?,
                sgc: config.sgc.then(|| SgcParams::new(&mut init, &format!("{p}.sgc"), c)).transpose()?,
            });
            c_prev = c;
        }
        for (i, &c) in widths.iter().enumerate() {
            let tfm = config.tfm_at(i).then(|| TfmParams::new(&mut init, &format!("tfm{i}"), c, config.tfm_config.clone()));
            skips.push(tfm.transpose()?);
        }
        let bottleneck = config.sgc.then(|| SgcParams::new(&mut init, "bottleneck", widths[STAGES - 1])).transpose()?;
        let mut decoder = Vec::with_capacity(STAGES);
        for i in (0..STAGES).rev() {
            let (c_in, c_out, c_skip) = if i > 0 { (widths[i], widths[i - 1], widths[i - 1]) } else { (c0, c0, c0) };
            let p = format!("dec{i}");
            decoder.push(DecoderLevel {
                up: up_conv(&mut init, &format!("{p}.up"), c_in, c_out)?,
                skip: ConvParams::unbiased(&mut init, &format!("{p}.skip"), c_skip, c_out, ConvSpec::pointwise())?,
                norm: NormParams::new(&mut init, &format!("{p}.norm"), c_out)?,
            });
        }
        let head = ConvParams {
            weight: init.fan_in("head.weight", vec![config.out_channels, c0, 1, 1, 1], c0)?,
            bias: Some(init.constant("head.bias", vec![config.out_channels], -((1.0 - HEAD_PRIOR) / HEAD_PRIOR).ln())?),
            spec: ConvSpec::pointwise(),
        };
        let model = HwaUnetr { config, stem, encoder, skips, bottleneck, decoder, head };
        Ok((model, init.finish()))
    }

    /// Checks that `x` is `[N, C_in, D, H, W]` with every extent divisible by 16.
    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != 5 || shape[1] != self.config.in_channels {
            return Err(Error::shape(
                "forward",
                format!("expected [N, {}, D, H, W], got {shape:?}", self.config.in_channels),
            ));
        }
        for (axis, &e) in shape[2..].iter().enumerate() {
            if e % DIVISOR != 0 {
                return Err(Error::shape(
                    "forward",
                    format!(
                        "axis {} has extent {e}, not divisible by {DIVISOR}; pad the input to a multiple of {DIVISOR}",
                        axis + 2
                    ),
                ));
            }
        }
        Ok(())
    }

    /// Sigmoid probabilities `[N, C_out, D, H, W]`.
    pub fn forward<T: Element>(&self, tape: &mut Tape<T>, x: Var, bind: &Binding) -> Result<Var> {
        self.forward_taps(tape, x, bind).map(|t| t.output)
    }

    pub fn forward_taps<T: Element>(&self, tape: &mut Tape<T>, x: Var, bind: &Binding) -> Result<ForwardTaps> {
        self.check_input(tape.shape(x))?;
        let stem = match &self.stem {
            Stem::Hwa(p) => hwa_forward(tape, x, p, bind)?,
            Stem::Pointwise(p) => p.forward(tape, x, bind)?,
        };
        let mut encoder = Vec::with_capacity(STAGES);
        let mut h = stem;
        for stage in &self.encoder {
            h = stage.down.forward(tape, h, bind)?;
            h = stage.proj.forward(tape, h, bind)?;
            h = norm(tape, h, &stage.norm, bind)?;
            h = tape.relu(h)?;
            if let Some(sgc) = &stage.sgc {
                h = sgc_forward(tape, h, sgc, bind)?;
            }
            encoder.push(h);
        }
        let mut skips = Vec::with_capacity(STAGES);
        for (e, tfm) in encoder.iter().zip(&self.skips) {
            skips.push(match tfm {
                Some(p) => tfm_forward(tape, *e, p, bind)?,
                None => *e,
            });
        }
        let mut h = skips[STAGES - 1];
        if let Some(sgc) = &self.bottleneck {
            h = sgc_forward(tape, h, sgc, bind)?;
        }
        for (level, i) in self.decoder.iter().zip((0..STAGES).rev()) {
            let skip = if i > 0 { skips[i - 1] } else { stem };
            let up = level.up.transposed(tape, h, bind)?;
            let lateral = level.skip.forward(tape, skip, bind)?;
            h = tape.add(up, lateral)?;
            h = norm(tape, h, &level.norm, bind)?;
            h = tape.relu(h)?;
        }
        let logits = self.head.forward(tape, h, bind)?;
        let output = tape.sigmoid(logits)?;
        Ok(ForwardTaps { stem, encoder, skips, logits, output })
    }

    /// Convenience inference on a `[N, C_in, D, H, W]` batch.
    pub fn predict<T: Element>(&self, store: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let bind = tape.bind_frozen(store);
        let xv = tape.constant(x.clone());
        let y = self.forward(&mut tape, xv, &bind)?;
        Ok(tape.value(y).clone())
    }
}

impl HwaUnetr {
    /// Tiled inference over a whole `[C_in, D, H, W]` volume.
    pub fn infer_volume(&self, store: &ParamStore<f32>, volume: &Tensor<f32>, roi: [usize; 3], overlap: f64) -> Result<Tensor<f32>> {
        sliding_window(volume, roi, overlap, |patch| self.predict(store, patch))
    }
}

fn up_conv(init: &mut ParamInit, prefix: &str, c_in: usize, c_out: usize) -> Result<ConvParams> {
    Ok(ConvParams {
        weight: init.fan_in(&format!("{prefix}.weight"), vec![c_in, c_out, 2, 2, 2], c_in * 8)?,
        bias: None,
        spec: ConvSpec::patch(2, 1),
    })
}

impl ConvParams {
    pub fn transposed<T: Element>(&self, tape: &mut Tape<T>, x: Var, bind: &Binding) -> Result<Var> {
        tape.conv_transpose3d(x, bind[self.weight], self.bias.map(|b| bind[b]), self.spec)
    }
}
