//! The task network: a stack of fully connected layers (LeNet-300-100 by
//! default) with Kaiming-normal initialization.
//!
//! Orientation contract: W[r][c] connects input neuron r to output neuron c;
//! the forward pass is x . W for row-vector activations.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::rng::stream_rng;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct TaskNetworkConfig {
    /// Layer widths, input first. [784, 300, 100, 10] is LeNet-300-100.
    pub widths: Vec<usize>,
    /// Biases are off by default; the baseline parameter accounting counts
    /// weights only.
    pub bias: bool,
}

impl Default for TaskNetworkConfig {
    fn default() -> Self {
        Self { widths: vec![784, 300, 100, 10], bias: false }
    }
}

impl TaskNetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.widths.len() < 2 {
            return Err(Error::Usage("task network needs at least 2 layer widths".into()));
        }
        if self.widths.iter().any(|&w| w == 0) {
            return Err(Error::Usage("zero layer width".into()));
        }
        Ok(())
    }

    /// Total weight count, biases excluded: sum of m_i * n_i.
    pub fn weight_count(&self) -> usize {
        self.widths.windows(2).map(|p| p[0] * p[1]).sum()
    }
}

pub struct FCLayer<T> {
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
}

pub struct TaskNetwork<T> {
    pub layers: Vec<FCLayer<T>>,
}

/// Fan-in for Kaiming init: rows for an FC matrix [m x n], C_in*kh*kw for a
/// conv kernel [C_out x C_in x kh x kw].
pub fn fan_in(shape: &[usize]) -> Result<usize> {
    let f = match shape {
        [m, _] => *m,
        [_, ci, kh, kw] => ci * kh * kw,
        s => return Err(Error::Usage(format!("no fan-in rule for shape {:?}", s))),
    };
    if f == 0 {
        return Err(Error::Usage(format!("zero fan-in for shape {:?}", shape)));
    }
    Ok(f)
}

/// Kaiming normal: i.i.d. N(0, 2/fan_in). Samples are drawn in f64 and cast,
/// so f32 and f64 models initialized from one seed agree.
pub fn init_kaiming_with<T: Scalar, R: Rng>(shape: Vec<usize>, rng: &mut R) -> Result<Tensor<T>> {
    let std = (2.0 / fan_in(&shape)? as f64).sqrt();
    let numel: usize = shape.iter().product();
    let data: Vec<T> = (0..numel)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            T::from(z * std).unwrap()
        })
        .collect();
    Tensor::new(shape, data)
}

pub fn init_kaiming<T: Scalar>(shape: Vec<usize>, seed: u64) -> Result<Tensor<T>> {
    init_kaiming_with(shape, &mut stream_rng(seed, 0))
}

impl<T: Scalar> TaskNetwork<T> {
    pub fn init(cfg: &TaskNetworkConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut layers = Vec::new();
        for (k, pair) in cfg.widths.windows(2).enumerate() {
            let (m, n) = (pair[0], pair[1]);
            let mut rng = stream_rng(seed, 100 + k as u64);
            let weight = init_kaiming_with(vec![m, n], &mut rng)?;
            let bias = cfg.bias.then(|| Tensor::zeros(vec![n]));
            layers.push(FCLayer { weight, bias });
        }
        Ok(Self { layers })
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// Register every parameter on a tape. Returned vars are in layer order.
    pub fn register(&self, tape: &mut Tape<T>, requires_grad: bool) -> TnnVars {
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for layer in &self.layers {
            weights.push(tape.leaf(layer.weight.clone(), requires_grad));
            biases.push(layer.bias.as_ref().map(|b| tape.leaf(b.clone(), requires_grad)));
        }
        TnnVars { weights, biases }
    }

    /// Plain (ungated) forward: Phi-interleaved affine chain, no activation
    /// after the final layer.
    pub fn forward_plain(&self, tape: &mut Tape<T>, vars: &TnnVars, x: Var) -> Result<Var> {
        let mut h = x;
        let last = self.layers.len() - 1;
        for (k, _) in self.layers.iter().enumerate() {
            h = tape.matmul(h, vars.weights[k])?;
            if let Some(b) = vars.biases[k] {
                h = tape.add_col_broadcast(h, b)?;
            }
            if k != last {
                h = tape.relu(h)?;
            }
        }
        Ok(h)
    }
}

pub struct TnnVars {
    pub weights: Vec<Var>,
    pub biases: Vec<Option<Var>>,
}
