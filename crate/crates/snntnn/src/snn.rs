//! The switcher network: a U-shaped conv encoder/decoder that reads one FC
//! layer's weight matrix and emits nonnegative multiplicative gates.
//!
//! The weight matrix is viewed as a 1-channel image with height = fan-in m
//! and width = fan-out n, so each row holds all outgoing connections of one
//! input neuron. Pooling and upsampling act on the width axis only; widths
//! are padded up to a multiple of 2^B_eff and cropped back at the end.
//!
//! Connection strategy: decoder restores the full m x n footprint and each
//! entry gates one weight. Neuron strategy: row convolutions collapse the
//! width axis to 1 and each entry gates one input neuron.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::rng::stream_rng;
use crate::tensor::{Scalar, Tensor};
use crate::tnn::init_kaiming_with;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Neuron,
    Connection,
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Strategy::Neuron => write!(f, "neuron"),
            Strategy::Connection => write!(f, "connection"),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct SwitcherConfig {
    /// Encoder/decoder block count B; per-layer effective depth shrinks for
    /// narrow matrices.
    pub blocks: usize,
    /// Encoder output channels per block (input is the 1-channel weight
    /// image). The decoder runs at the last entry's width throughout.
    pub channels: Vec<usize>,
    pub strategy: Strategy,
    /// Init value of the final 1x1 conv bias. 1.0 starts every gate near the
    /// identity; 0.0 is the pure-Kaiming variant.
    pub gate_bias_init: f64,
}

impl SwitcherConfig {
    pub fn new(strategy: Strategy) -> Self {
        Self { blocks: 2, channels: vec![8, 16], strategy, gate_bias_init: 1.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks == 0 {
            return Err(Error::Usage("switcher needs at least one block".into()));
        }
        if self.channels.len() != self.blocks {
            return Err(Error::Usage(format!(
                "{} channel entries for {} blocks",
                self.channels.len(),
                self.blocks
            )));
        }
        if self.channels.iter().any(|&c| c == 0) {
            return Err(Error::Usage("zero channel count".into()));
        }
        Ok(())
    }
}

/// Nonnegative gates for one layer: [m x n] (connection) or [m] (neuron).
pub struct GateTensor<T> {
    pub values: Tensor<T>,
    pub strategy: Strategy,
}

impl<T: Scalar> GateTensor<T> {
    /// Fraction of gate entries that are exactly zero.
    pub fn zero_fraction(&self) -> f64 {
        let zeros = self.values.data().iter().filter(|&&v| v == T::zero()).count();
        zeros as f64 / self.values.numel() as f64
    }
}

pub struct Conv<T> {
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
}

/// Width/channel geometry resolved for one target weight shape.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Geometry {
    pub m: usize,
    pub n: usize,
    pub n_pad: usize,
    pub b_eff: usize,
    /// channels[0..=b_eff], entry 0 being the 1-channel input.
    pub channels: Vec<usize>,
}

fn floor_log2(x: usize) -> usize {
    debug_assert!(x > 0);
    usize::BITS as usize - 1 - x.leading_zeros() as usize
}

impl Geometry {
    pub fn resolve(cfg: &SwitcherConfig, m: usize, n: usize) -> Result<Self> {
        cfg.validate()?;
        if m == 0 || n == 0 {
            return Err(Error::Dimension(format!("degenerate target shape {}x{}", m, n)));
        }
        let b_eff = cfg.blocks.min(floor_log2(n).max(1));
        let unit = 1usize << b_eff;
        let n_pad = n.div_ceil(unit) * unit;
        let mut channels = vec![1];
        channels.extend_from_slice(&cfg.channels[..b_eff]);
        Ok(Self { m, n, n_pad, b_eff, channels })
    }

    /// Feature-map width entering encoder block `i` (0-based); also the width
    /// of that block's skip feature.
    pub fn width_at(&self, i: usize) -> usize {
        self.n_pad >> i
    }

    /// Decoder channel count (constant through the decoder).
    pub fn dec_channels(&self) -> usize {
        *self.channels.last().unwrap()
    }
}

/// Per-layer switcher parameters.
pub struct SwitcherNetwork<T> {
    pub geom: Geometry,
    pub strategy: Strategy,
    /// 3x3 convs, channels geom.channels[i] -> geom.channels[i+1].
    pub encoder: Vec<Conv<T>>,
    /// 3x3 conv keeping the deepest channel count.
    pub bottleneck: Conv<T>,
    /// Row conv collapsing the bottleneck width to 1 (neuron strategy only).
    pub row_bottleneck: Option<Conv<T>>,
    /// Per skip level: 1x1 conv (connection) or full-width row conv (neuron),
    /// mapping skip channels to decoder channels. Index i = encoder block i.
    pub skip_transform: Vec<Conv<T>>,
    /// Merge convs in decoder order (deepest first): 3x3 (connection) or 3x1
    /// (neuron), channels 2d -> d.
    pub decoder: Vec<Conv<T>>,
    /// Final 1x1 conv to one channel, with bias.
    pub output: Conv<T>,
    /// Fixed input scale bringing the weight image to unit variance at init.
    /// Kaiming weights have std sqrt(2/fan_in), so the raw image would feed
    /// the convs a signal ~20x smaller than their own init scale and the
    /// gate field would start degenerate. sqrt(fan_in/2) undoes that; the
    /// value is derived from geometry, never trained or serialized.
    pub input_gain: f64,
}

/// Parameter handles mirroring [`SwitcherNetwork`] structure on a tape.
pub struct SwitcherVars {
    encoder: Vec<Var>,
    bottleneck: Var,
    row_bottleneck: Option<Var>,
    skip_transform: Vec<Var>,
    decoder: Vec<Var>,
    output_w: Var,
    output_b: Var,
}

impl<T: Scalar> SwitcherNetwork<T> {
    pub fn init(cfg: &SwitcherConfig, m: usize, n: usize, seed: u64) -> Result<Self> {
        let geom = Geometry::resolve(cfg, m, n)?;
        let mut rng = stream_rng(seed, 0);
        let d = geom.dec_channels();
        let mut encoder = Vec::new();
        for i in 0..geom.b_eff {
            let (ci, co) = (geom.channels[i], geom.channels[i + 1]);
            encoder.push(Conv {
                weight: init_kaiming_with(vec![co, ci, 3, 3], &mut rng)?,
                bias: None,
            });
        }
        let bottleneck = Conv {
            weight: init_kaiming_with(vec![d, d, 3, 3], &mut rng)?,
            bias: None,
        };
        let row_bottleneck = match cfg.strategy {
            Strategy::Neuron => Some(Conv {
                weight: init_kaiming_with(vec![d, d, 1, geom.width_at(geom.b_eff)], &mut rng)?,
                bias: None,
            }),
            Strategy::Connection => None,
        };
        let mut skip_transform = Vec::new();
        for i in 0..geom.b_eff {
            let ci = geom.channels[i + 1];
            let kw = match cfg.strategy {
                Strategy::Connection => 1,
                Strategy::Neuron => geom.width_at(i),
            };
            skip_transform.push(Conv {
                weight: init_kaiming_with(vec![d, ci, 1, kw], &mut rng)?,
                bias: None,
            });
        }
        let mut decoder = Vec::new();
        for _ in 0..geom.b_eff {
            let (kh, kw) = match cfg.strategy {
                Strategy::Connection => (3, 3),
                Strategy::Neuron => (3, 1),
            };
            decoder.push(Conv {
                weight: init_kaiming_with(vec![d, 2 * d, kh, kw], &mut rng)?,
                bias: None,
            });
        }
        let output = Conv {
            weight: init_kaiming_with(vec![1, d, 1, 1], &mut rng)?,
            bias: Some(Tensor::full(vec![1], T::from(cfg.gate_bias_init).unwrap())),
        };
        let input_gain = (m as f64 / 2.0).sqrt();
        Ok(Self {
            geom,
            strategy: cfg.strategy,
            encoder,
            bottleneck,
            row_bottleneck,
            skip_transform,
            decoder,
            output,
            input_gain,
        })
    }

    pub fn register(&self, tape: &mut Tape<T>, requires_grad: bool) -> SwitcherVars {
        SwitcherVars {
            encoder: self
                .encoder
                .iter()
                .map(|c| tape.leaf(c.weight.clone(), requires_grad))
                .collect(),
            bottleneck: tape.leaf(self.bottleneck.weight.clone(), requires_grad),
            row_bottleneck: self
                .row_bottleneck
                .as_ref()
                .map(|c| tape.leaf(c.weight.clone(), requires_grad)),
            skip_transform: self
                .skip_transform
                .iter()
                .map(|c| tape.leaf(c.weight.clone(), requires_grad))
                .collect(),
            decoder: self
                .decoder
                .iter()
                .map(|c| tape.leaf(c.weight.clone(), requires_grad))
                .collect(),
            output_w: tape.leaf(self.output.weight.clone(), requires_grad),
            output_b: tape.leaf(self.output.bias.as_ref().unwrap().clone(), requires_grad),
        }
    }

    /// Build the gate computation on a tape. `w` must be the target layer's
    /// [m x n] weight matrix (normally a stop-gradient constant). Returns the
    /// gate var: [m x n] (connection) or [m] (neuron).
    pub fn forward(&self, tape: &mut Tape<T>, vars: &SwitcherVars, w: Var) -> Result<Var> {
        let pre = self.forward_preact(tape, vars, w)?;
        tape.relu(pre)
    }

    /// Forward pass up to (and excluding) the final ReLU: the gate
    /// pre-activation field, already cropped to the gate shape.
    pub fn forward_preact(&self, tape: &mut Tape<T>, vars: &SwitcherVars, w: Var) -> Result<Var> {
        let g = &self.geom;
        let shape = tape.value(w).shape().to_vec();
        if shape != [g.m, g.n] {
            return Err(Error::Usage(format!(
                "switcher configured for {}x{}, got weight shape {:?}",
                g.m, g.n, shape
            )));
        }
        let gain = tape.constant(Tensor::full(
            vec![g.m, g.n],
            T::from(self.input_gain).unwrap(),
        ));
        let w = tape.elementwise_mul(w, gain)?;
        let mut x = tape.reshape(w, vec![1, g.m, g.n])?;
        x = tape.pad2d(x, (g.m, g.n_pad))?;
        // Encoder: conv3x3 -> ReLU (skip) -> width-only maxpool.
        let mut skips = Vec::new();
        for i in 0..g.b_eff {
            x = tape.conv2d(x, vars.encoder[i], None, (1, 1))?;
            x = tape.relu(x)?;
            skips.push(x);
            x = tape.maxpool2d(x, (1, 2))?;
        }
        x = tape.conv2d(x, vars.bottleneck, None, (1, 1))?;
        x = tape.relu(x)?;
        match self.strategy {
            Strategy::Connection => {
                for i in (0..g.b_eff).rev() {
                    x = tape.upsample_nearest(x, 1, 2)?;
                    let s = tape.conv2d(skips[i], vars.skip_transform[i], None, (0, 0))?;
                    x = tape.concat_channels(x, s)?;
                    x = tape.conv2d(x, vars.decoder[g.b_eff - 1 - i], None, (1, 1))?;
                    x = tape.relu(x)?;
                }
                x = tape.conv2d(x, vars.output_w, Some(vars.output_b), (0, 0))?;
                x = tape.crop2d(x, (g.m, g.n))?;
                tape.reshape(x, vec![g.m, g.n])
            }
            Strategy::Neuron => {
                x = row_conv(tape, x, vars.row_bottleneck.unwrap())?;
                for i in (0..g.b_eff).rev() {
                    let s = row_conv(tape, skips[i], vars.skip_transform[i])?;
                    x = tape.concat_channels(x, s)?;
                    x = tape.conv2d(x, vars.decoder[g.b_eff - 1 - i], None, (1, 0))?;
                    x = tape.relu(x)?;
                }
                x = tape.conv2d(x, vars.output_w, Some(vars.output_b), (0, 0))?;
                tape.reshape(x, vec![g.m])
            }
        }
    }

    /// Rescale the output conv so the gate pre-activation field over the
    /// given weight matrix has unit variance and mean `target_bias`. The raw
    /// init leaves the field mean hostage to the handful of output-conv
    /// weights (all decoder features are nonnegative, so their random
    /// combination shifts the whole field together), which can start a layer
    /// fully dead or fully dense. After calibration the initial zero-gate
    /// fraction is set by `target_bias` alone.
    pub fn calibrate_output(&mut self, weight: &Tensor<T>, target_bias: f64) -> Result<()> {
        self.output.bias = Some(Tensor::full(vec![1], T::zero()));
        let mut tape = Tape::new();
        let w = tape.constant(weight.clone());
        let vars = self.register(&mut tape, false);
        let pre = self.forward_preact(&mut tape, &vars, w)?;
        let field = tape.value(pre).data();
        let n = field.len().max(1) as f64;
        let mean = field.iter().map(|v| v.to_f64().unwrap()).sum::<f64>() / n;
        let var = field
            .iter()
            .map(|v| {
                let d = v.to_f64().unwrap() - mean;
                d * d
            })
            .sum::<f64>()
            / n;
        let std = var.sqrt();
        let (scale, bias) = if std > 1e-12 {
            (1.0 / std, target_bias - mean / std)
        } else {
            // Degenerate field (e.g. zeroed convs): leave weights alone and
            // fall back to a plain bias shift.
            (1.0, target_bias - mean)
        };
        for v in self.output.weight.data_mut() {
            *v = *v * T::from(scale).unwrap();
        }
        self.output.bias = Some(Tensor::full(vec![1], T::from(bias).unwrap()));
        Ok(())
    }

    /// Evaluate gates outside any training graph (no gradients).
    pub fn gates(&self, weight: &Tensor<T>) -> Result<GateTensor<T>> {
        let mut tape = Tape::new();
        let w = tape.constant(weight.clone());
        let vars = self.register(&mut tape, false);
        let z = self.forward(&mut tape, &vars, w)?;
        Ok(GateTensor { values: tape.value(z).clone(), strategy: self.strategy })
    }

    /// Named parameters, in a stable order shared with [`Self::params_mut`].
    pub fn named_params(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (i, c) in self.encoder.iter().enumerate() {
            out.push((format!("enc{}.w", i), &c.weight));
        }
        out.push(("bottleneck.w".to_string(), &self.bottleneck.weight));
        if let Some(c) = &self.row_bottleneck {
            out.push(("row_bottleneck.w".to_string(), &c.weight));
        }
        for (i, c) in self.skip_transform.iter().enumerate() {
            out.push((format!("skip{}.w", i), &c.weight));
        }
        for (i, c) in self.decoder.iter().enumerate() {
            out.push((format!("dec{}.w", i), &c.weight));
        }
        out.push(("out.w".to_string(), &self.output.weight));
        out.push(("out.b".to_string(), self.output.bias.as_ref().unwrap()));
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out: Vec<&mut Tensor<T>> = Vec::new();
        for c in &mut self.encoder {
            out.push(&mut c.weight);
        }
        out.push(&mut self.bottleneck.weight);
        if let Some(c) = &mut self.row_bottleneck {
            out.push(&mut c.weight);
        }
        for c in &mut self.skip_transform {
            out.push(&mut c.weight);
        }
        for c in &mut self.decoder {
            out.push(&mut c.weight);
        }
        out.push(&mut self.output.weight);
        out.push(self.output.bias.as_mut().unwrap());
        out
    }

    /// Rebuild structured vars from an ordered slice (inverse of
    /// [`Self::var_list`]; order matches [`Self::named_params`]).
    pub fn vars_from_slice(&self, vars: &[Var]) -> SwitcherVars {
        let mut it = vars.iter().copied();
        let encoder: Vec<Var> = (0..self.encoder.len()).map(|_| it.next().unwrap()).collect();
        let bottleneck = it.next().unwrap();
        let row_bottleneck = self.row_bottleneck.as_ref().map(|_| it.next().unwrap());
        let skip_transform: Vec<Var> =
            (0..self.skip_transform.len()).map(|_| it.next().unwrap()).collect();
        let decoder: Vec<Var> = (0..self.decoder.len()).map(|_| it.next().unwrap()).collect();
        let output_w = it.next().unwrap();
        let output_b = it.next().unwrap();
        assert!(it.next().is_none(), "extra vars");
        SwitcherVars {
            encoder,
            bottleneck,
            row_bottleneck,
            skip_transform,
            decoder,
            output_w,
            output_b,
        }
    }

    /// Tape vars in the same order as [`Self::named_params`].
    pub fn var_list(vars: &SwitcherVars) -> Vec<Var> {
        let mut out = Vec::new();
        out.extend_from_slice(&vars.encoder);
        out.push(vars.bottleneck);
        if let Some(v) = vars.row_bottleneck {
            out.push(v);
        }
        out.extend_from_slice(&vars.skip_transform);
        out.extend_from_slice(&vars.decoder);
        out.push(vars.output_w);
        out.push(vars.output_b);
        out
    }
}

/// Full-width convolution collapsing the width axis to 1. The kernel width
/// must equal the feature width; height stays unchanged (kernel height 1).
pub fn row_conv<T: Scalar>(tape: &mut Tape<T>, feature: Var, kernel: Var) -> Result<Var> {
    let (_, _, w) = tape.value(feature).dims3()?;
    let (_, _, kh, kw) = tape.value(kernel).dims4()?;
    if kh != 1 || kw != w {
        return Err(Error::Dimension(format!(
            "row conv kernel {:?} must be 1 x (feature width {})",
            tape.value(kernel).shape(),
            w
        )));
    }
    tape.conv2d(feature, kernel, None, (0, 0))
}
