//! Gated forward passes and the alternating two-phase training loop.
//!
//! Even epochs optimize the switcher networks, odd epochs the task network;
//! both phases minimize the same cross-entropy. Gates are recomputed from the
//! current weights every optimizer step. The weight tensor fed to a switcher
//! is detached by default, so gates receive gradients only through switcher
//! parameters and only in the switcher phase.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Sgd, Tape, Var};
use crate::data::{BatchPlan, Dataset};
use crate::error::{Error, Result};
use crate::report;
use crate::snn::{Strategy, SwitcherConfig, SwitcherNetwork, SwitcherVars};
use crate::tensor::Tensor;
use crate::tnn::{TaskNetwork, TaskNetworkConfig, TnnVars};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Snn,
    Tnn,
}

impl std::fmt::Display for Phase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Phase::Snn => write!(f, "snn"),
            Phase::Tnn => write!(f, "tnn"),
        }
    }
}

/// Which layers are gated, if any.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Gating {
    /// Ungated baseline; every epoch trains the task network.
    None,
    Neuron,
    Connection,
}

impl Gating {
    pub fn strategy(self) -> Option<Strategy> {
        match self {
            Gating::None => None,
            Gating::Neuron => Some(Strategy::Neuron),
            Gating::Connection => Some(Strategy::Connection),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub seed: u64,
    pub gating: Gating,
    /// Gate layer 1 as well (default gates layers 2..=L only).
    pub gate_first_layer: bool,
    /// Held-out tail of the training file used for model selection.
    pub val_size: usize,
    /// Weight path into the switcher carries gradient back to the weights
    /// when set (ablation; default stop-gradient).
    pub coupled_grads: bool,
    pub switcher_blocks: usize,
    pub switcher_channels: Vec<usize>,
    /// Final-gate bias init; 1.0 starts gates near the identity, 0.0 is the
    /// pure Kaiming variant.
    pub gate_bias_init: f64,
    /// Normalize each switcher's initial gate pre-activation field (over the
    /// actual initial weights) to unit variance and mean `gate_bias_init`.
    /// Makes the initial zero-gate fraction a direct function of
    /// `gate_bias_init` instead of the luck of the output-conv draw.
    #[serde(default)]
    pub gate_calibrated_init: bool,
    /// Learning-rate multiplier for SNN phases. The switcher's bias and
    /// kernel gradients are sums over every gate position (~2.4e5 for the
    /// first FC layer), so sharing the TNN step size lets a single SNN epoch
    /// shift the whole gate field by several units and wreck the structure
    /// the TNN just adapted to. Values well below 1 turn the SNN phase into
    /// a gradual refinement.
    #[serde(default = "default_snn_lr_scale")]
    pub snn_lr_scale: f64,
    pub tnn: TaskNetworkConfig,
}

fn default_snn_lr_scale() -> f64 {
    1.0
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 64,
            lr: 0.1,
            momentum: 0.0,
            seed: 0,
            gating: Gating::Connection,
            gate_first_layer: false,
            val_size: 5000,
            coupled_grads: false,
            switcher_blocks: 2,
            switcher_channels: vec![8, 16],
            gate_bias_init: 1.0,
            gate_calibrated_init: false,
            snn_lr_scale: 1.0,
            tnn: TaskNetworkConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(Error::Usage("epochs must be >= 1".into()));
        }
        if self.lr <= 0.0 {
            return Err(Error::Usage("learning rate must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Usage("batch size must be positive".into()));
        }
        if self.momentum < 0.0 {
            return Err(Error::Usage("momentum must be >= 0".into()));
        }
        if self.snn_lr_scale <= 0.0 {
            return Err(Error::Usage("snn_lr_scale must be positive".into()));
        }
        self.tnn.validate()?;
        self.switcher_config().map(|_| ())
    }

    fn switcher_config(&self) -> Result<Option<SwitcherConfig>> {
        match self.gating.strategy() {
            None => Ok(None),
            Some(strategy) => {
                let cfg = SwitcherConfig {
                    blocks: self.switcher_blocks,
                    channels: self.switcher_channels.clone(),
                    strategy,
                    gate_bias_init: self.gate_bias_init,
                };
                cfg.validate()?;
                Ok(Some(cfg))
            }
        }
    }

    /// Step decay: x0.1 at floor(0.5 T) and floor(0.75 T).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let mut lr = self.lr;
        if epoch >= self.epochs / 2 {
            lr *= 0.1;
        }
        if epoch >= self.epochs * 3 / 4 {
            lr *= 0.1;
        }
        lr
    }

    /// 0-based indices of gated layers.
    pub fn gated_layers(&self) -> Vec<usize> {
        let n_layers = self.tnn.widths.len() - 1;
        match self.gating {
            Gating::None => Vec::new(),
            _ => {
                let start = if self.gate_first_layer { 0 } else { 1 };
                (start..n_layers).collect()
            }
        }
    }

    /// SHA-256 of the canonical TOML serialization; identifies a run setup.
    pub fn fingerprint(&self) -> String {
        let toml = toml::to_string(self).expect("config serializes");
        let mut h = Sha256::new();
        h.update(toml.as_bytes());
        hex_string(&h.finalize())
    }
}

pub fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{:02x}", b)).collect()
}

/// Task network plus one switcher per gated layer.
pub struct GatedModel {
    pub config: TrainConfig,
    pub tnn: TaskNetwork<f32>,
    /// (0-based layer index, switcher), ascending by layer.
    pub switchers: Vec<(usize, SwitcherNetwork<f32>)>,
}

impl GatedModel {
    pub fn init(config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let tnn = TaskNetwork::init(&config.tnn, config.seed)?;
        let mut switchers = Vec::new();
        if let Some(snn_cfg) = config.switcher_config()? {
            for k in config.gated_layers() {
                let (m, n) = tnn.layers[k].weight.dims2()?;
                let seed = config.seed.wrapping_add(1000 + k as u64);
                let mut sw = SwitcherNetwork::init(&snn_cfg, m, n, seed)?;
                if config.gate_calibrated_init {
                    sw.calibrate_output(&tnn.layers[k].weight, config.gate_bias_init)?;
                }
                switchers.push((k, sw));
            }
        }
        Ok(Self { config: config.clone(), tnn, switchers })
    }

    pub fn strategy(&self) -> Option<Strategy> {
        self.config.gating.strategy()
    }

    pub fn switcher_for(&self, layer: usize) -> Option<&SwitcherNetwork<f32>> {
        self.switchers.iter().find(|(k, _)| *k == layer).map(|(_, s)| s)
    }
}

pub struct StepVars {
    pub tnn: TnnVars,
    pub snn: Vec<(usize, SwitcherVars)>,
}

/// Build the gated forward graph for one batch; returns the logits var.
///
/// `phase` controls which parameter set is tracked for gradients; `None`
/// builds a gradient-free evaluation graph.
pub fn gated_forward(
    model: &GatedModel,
    tape: &mut Tape<f32>,
    x: Tensor<f32>,
    phase: Option<Phase>,
) -> Result<(Var, StepVars)> {
    let tnn_rg = phase == Some(Phase::Tnn);
    let snn_rg = phase == Some(Phase::Snn);
    let tnn_vars = model.tnn.register(tape, tnn_rg);
    let mut snn_vars = Vec::new();
    let mut gates: Vec<Option<Var>> = vec![None; model.tnn.num_layers()];
    for (k, sw) in &model.switchers {
        let vars = sw.register(tape, snn_rg);
        let w_in = if model.config.coupled_grads {
            tnn_vars.weights[*k]
        } else {
            tape.constant(model.tnn.layers[*k].weight.clone())
        };
        gates[*k] = Some(sw.forward(tape, &vars, w_in)?);
        snn_vars.push((*k, vars));
    }
    let mut h = tape.leaf(x, false);
    let last = model.tnn.num_layers() - 1;
    for k in 0..model.tnn.num_layers() {
        let mut w = tnn_vars.weights[k];
        if let Some(z) = gates[k] {
            match model.strategy().unwrap() {
                // Gate each input neuron's activation before the matmul.
                Strategy::Neuron => h = tape.elementwise_mul(h, z)?,
                // Gate each weight: effective weights W (.) Z.
                Strategy::Connection => w = tape.elementwise_mul(w, z)?,
            }
        }
        h = tape.matmul(h, w)?;
        if let Some(b) = tnn_vars.biases[k] {
            h = tape.add_col_broadcast(h, b)?;
        }
        if k != last {
            h = tape.relu(h)?;
        }
    }
    Ok((h, StepVars { tnn: tnn_vars, snn: snn_vars }))
}

/// Optimizer state for both parameter sets; velocities persist across epochs.
pub struct TrainState {
    pub opt_tnn: Sgd<f32>,
    pub opt_snn: Sgd<f32>,
    pub epoch: usize,
}

impl TrainState {
    pub fn new(momentum: f64) -> Self {
        Self {
            opt_tnn: Sgd::new(momentum as f32),
            opt_snn: Sgd::new(momentum as f32),
            epoch: 0,
        }
    }
}

/// One epoch of one phase. Parameters outside the active phase are untouched.
/// Returns the mean training loss over the epoch.
pub fn run_phase_epoch(
    model: &mut GatedModel,
    train: &Dataset,
    state: &mut TrainState,
    epoch: usize,
    phase: Phase,
    lr: f64,
) -> Result<f64> {
    let plan = BatchPlan { seed: model.config.seed, batch_size: model.config.batch_size };
    let mut loss_sum = 0f64;
    let mut seen = 0usize;
    for (x, labels) in plan.batches(train, epoch) {
        let bsz = labels.len();
        let mut tape = Tape::new();
        let (logits, vars) = gated_forward(model, &mut tape, x, Some(phase))?;
        let loss = tape.softmax_cross_entropy(logits, &labels)?;
        loss_sum += tape.value(loss).data()[0] as f64 * bsz as f64;
        seen += bsz;
        tape.backward(loss)?;
        match phase {
            Phase::Tnn => {
                let mut grads = Vec::new();
                for (w, b) in vars.tnn.weights.iter().zip(&vars.tnn.biases) {
                    grads.push(tape.grad(*w));
                    if let Some(b) = b {
                        grads.push(tape.grad(*b));
                    }
                }
                let mut params: Vec<&mut Tensor<f32>> = Vec::new();
                for layer in &mut model.tnn.layers {
                    params.push(&mut layer.weight);
                    if let Some(b) = &mut layer.bias {
                        params.push(b);
                    }
                }
                state.opt_tnn.step(lr as f32, &mut params, &grads);
            }
            Phase::Snn => {
                let mut grads = Vec::new();
                for (_, sv) in &vars.snn {
                    for v in SwitcherNetwork::<f32>::var_list(sv) {
                        grads.push(tape.grad(v));
                    }
                }
                let mut params: Vec<&mut Tensor<f32>> = Vec::new();
                for (_, sw) in &mut model.switchers {
                    params.extend(sw.params_mut());
                }
                state.opt_snn.step(lr as f32, &mut params, &grads);
            }
        }
    }
    Ok(loss_sum / seen.max(1) as f64)
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub phase: String,
    pub lr: f64,
    pub train_loss: f64,
    pub val_acc: f64,
    /// Zero-gate fraction per gated layer, ascending by layer index.
    pub zero_frac: Vec<f64>,
    /// Surviving weight count over the whole network.
    pub remaining: usize,
}

impl EpochRecord {
    pub fn csv_header(n_gated: usize) -> String {
        let mut s = String::from("epoch,phase,lr,train_loss,val_acc");
        for i in 0..n_gated {
            s.push_str(&format!(",zero_frac_{}", i));
        }
        s.push_str(",remaining");
        s
    }

    pub fn csv_row(&self) -> String {
        let mut s = format!(
            "{},{},{},{},{}",
            self.epoch, self.phase, self.lr, self.train_loss, self.val_acc
        );
        for z in &self.zero_frac {
            s.push_str(&format!(",{}", z));
        }
        s.push_str(&format!(",{}", self.remaining));
        s
    }
}

/// Epoch-parity alternation: even epochs optimize the switchers, odd epochs
/// the task network. Ungated configs train the task network every epoch.
/// Returns the final model and the full history; `on_epoch` sees each record
/// as it is produced.
pub fn alternating_train(
    config: &TrainConfig,
    train: &Dataset,
    val: &Dataset,
    mut on_epoch: impl FnMut(&GatedModel, &EpochRecord) -> Result<()>,
) -> Result<(GatedModel, Vec<EpochRecord>)> {
    let mut model = GatedModel::init(config)?;
    let mut state = TrainState::new(config.momentum);
    resume_train(&mut model, &mut state, train, val, &mut on_epoch)
        .map(|history| (model, history))
}

/// Continue training `model` from `state.epoch` to the configured epoch count.
pub fn resume_train(
    model: &mut GatedModel,
    state: &mut TrainState,
    train: &Dataset,
    val: &Dataset,
    on_epoch: &mut impl FnMut(&GatedModel, &EpochRecord) -> Result<()>,
) -> Result<Vec<EpochRecord>> {
    let config = model.config.clone();
    let mut history = Vec::new();
    for epoch in state.epoch..config.epochs {
        let phase = match config.gating {
            Gating::None => Phase::Tnn,
            _ => {
                if epoch % 2 == 0 {
                    Phase::Snn
                } else {
                    Phase::Tnn
                }
            }
        };
        let lr = match phase {
            Phase::Snn => config.lr_at(epoch) * config.snn_lr_scale,
            Phase::Tnn => config.lr_at(epoch),
        };
        let train_loss = run_phase_epoch(model, train, state, epoch, phase, lr)?;
        let (zero_frac, remaining) = report::sparsity_stats(model)?;
        let val_acc = if val.is_empty() { f64::NAN } else { report::evaluate_accuracy(model, val)? };
        let record = EpochRecord {
            epoch,
            phase: phase.to_string(),
            lr,
            train_loss,
            val_acc,
            zero_frac,
            remaining,
        };
        on_epoch(model, &record)?;
        history.push(record);
        state.epoch = epoch + 1;
    }
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Dataset;
    use crate::rng::seeded_rng;
    use rand::Rng;

    fn tiny_dataset(n: usize, dim: usize, classes: usize, seed: u64) -> Dataset {
        let mut rng = seeded_rng(seed);
        let images = Tensor::new(
            vec![n, dim],
            (0..n * dim).map(|_| rng.gen_range(0.0f32..1.0)).collect(),
        )
        .unwrap();
        let labels = (0..n).map(|i| (i % classes) as u8).collect();
        Dataset { images, labels }
    }

    fn tiny_config(gating: Gating, epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: 4,
            gating,
            gate_first_layer: true,
            val_size: 0,
            switcher_channels: vec![2, 4],
            tnn: crate::tnn::TaskNetworkConfig { widths: vec![6, 5, 3], bias: false },
            ..TrainConfig::default()
        }
    }

    fn tnn_checksum(model: &GatedModel) -> f64 {
        model
            .tnn
            .layers
            .iter()
            .flat_map(|l| l.weight.data())
            .map(|&v| v as f64)
            .sum()
    }

    fn snn_checksum(model: &GatedModel) -> f64 {
        model
            .switchers
            .iter()
            .flat_map(|(_, s)| s.named_params())
            .flat_map(|(_, t)| t.data().to_vec())
            .map(|v| v as f64)
            .sum()
    }

    #[test]
    fn lr_schedule_decays_at_half_and_three_quarters() {
        let cfg = TrainConfig { epochs: 100, ..TrainConfig::default() };
        assert_eq!(cfg.lr_at(0), 0.1);
        assert_eq!(cfg.lr_at(49), 0.1);
        assert!((cfg.lr_at(50) - 0.01).abs() < 1e-15);
        assert!((cfg.lr_at(74) - 0.01).abs() < 1e-15);
        assert!((cfg.lr_at(75) - 0.001).abs() < 1e-15);
        assert!((cfg.lr_at(99) - 0.001).abs() < 1e-15);
    }

    #[test]
    fn gated_layers_default_skips_the_first_layer() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.gated_layers(), vec![1, 2]);
        let cfg = TrainConfig { gate_first_layer: true, ..TrainConfig::default() };
        assert_eq!(cfg.gated_layers(), vec![0, 1, 2]);
    }

    #[test]
    fn config_fingerprint_is_stable_and_sensitive() {
        let a = TrainConfig::default();
        let b = TrainConfig::default();
        let c = TrainConfig { seed: 1, ..TrainConfig::default() };
        assert_eq!(a.fingerprint(), b.fingerprint());
        assert_ne!(a.fingerprint(), c.fingerprint());
        assert_eq!(a.fingerprint().len(), 64);
    }

    #[test]
    fn identity_gates_reproduce_the_plain_forward_bit_exactly() {
        for gating in [Gating::Connection, Gating::Neuron] {
            let cfg = tiny_config(gating, 2);
            let mut model = GatedModel::init(&cfg).unwrap();
            for (_, sw) in &mut model.switchers {
                for v in sw.output.weight.data_mut() {
                    *v = 0.0;
                }
                // out bias stays 1, so every gate is exactly 1.
            }
            let ds = tiny_dataset(8, 6, 3, 0);
            let mut tape = Tape::new();
            let x = ds.images.clone();
            let (logits, _) = gated_forward(&model, &mut tape, x.clone(), None).unwrap();
            let gated = tape.value(logits).data().to_vec();

            let mut tape2 = Tape::new();
            let vars = model.tnn.register(&mut tape2, false);
            let xv = tape2.constant(x);
            let plain = model.tnn.forward_plain(&mut tape2, &vars, xv).unwrap();
            assert_eq!(gated, tape2.value(plain).data());
        }
    }

    #[test]
    fn all_zero_gates_on_any_layer_force_uniform_predictions() {
        // Killing every gate in one layer zeroes the logits, so the loss is
        // exactly ln(C) regardless of the input batch.
        let cfg = tiny_config(Gating::Connection, 2);
        let mut model = GatedModel::init(&cfg).unwrap();
        let (_, sw) = &mut model.switchers[1];
        for v in sw.output.weight.data_mut() {
            *v = 0.0;
        }
        for v in sw.output.bias.as_mut().unwrap().data_mut() {
            *v = 0.0;
        }
        let ds = tiny_dataset(8, 6, 3, 1);
        let mut tape = Tape::new();
        let (logits, _) = gated_forward(&model, &mut tape, ds.images.clone(), None).unwrap();
        assert!(tape.value(logits).data().iter().all(|&v| v == 0.0));
        let labels: Vec<usize> = ds.labels.iter().map(|&l| l as usize).collect();
        let loss = tape.softmax_cross_entropy(logits, &labels).unwrap();
        assert!((tape.value(loss).data()[0] as f64 - 3.0f64.ln()).abs() < 1e-6);
    }

    #[test]
    fn connection_gating_matches_hand_folded_weights() {
        let cfg = TrainConfig {
            gating: Gating::Connection,
            gate_first_layer: true,
            switcher_channels: vec![2, 4],
            tnn: crate::tnn::TaskNetworkConfig { widths: vec![2, 2, 2], bias: false },
            ..TrainConfig::default()
        };
        let model = GatedModel::init(&cfg).unwrap();
        let x = Tensor::new(vec![1, 2], vec![0.8f32, -0.3]).unwrap();
        let mut tape = Tape::new();
        let (logits, _) = gated_forward(&model, &mut tape, x.clone(), None).unwrap();
        let got = tape.value(logits).data().to_vec();

        // Hand computation: h = relu(x (W1 .* Z1)), logits = h (W2 .* Z2).
        let fold = |k: usize| {
            let w = &model.tnn.layers[k].weight;
            let z = model.switchers[k].1.gates(w).unwrap();
            let folded: Vec<f32> =
                w.data().iter().zip(z.values.data()).map(|(a, b)| a * b).collect();
            folded
        };
        let w1 = fold(0);
        let w2 = fold(1);
        let h0 = (x.data()[0] * w1[0] + x.data()[1] * w1[2]).max(0.0);
        let h1 = (x.data()[0] * w1[1] + x.data()[1] * w1[3]).max(0.0);
        let want = [h0 * w2[0] + h1 * w2[2], h0 * w2[1] + h1 * w2[3]];
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() <= 1e-6 * w.abs().max(1.0), "got {} want {}", g, w);
        }
    }

    #[test]
    fn snn_phase_freezes_the_task_network_and_vice_versa() {
        let cfg = tiny_config(Gating::Connection, 2);
        let mut model = GatedModel::init(&cfg).unwrap();
        let ds = tiny_dataset(12, 6, 3, 2);
        let mut state = TrainState::new(0.0);

        let tnn_before = tnn_checksum(&model);
        run_phase_epoch(&mut model, &ds, &mut state, 0, Phase::Snn, 0.1).unwrap();
        assert_eq!(tnn_checksum(&model), tnn_before);
        let snn_after_phase0 = snn_checksum(&model);

        run_phase_epoch(&mut model, &ds, &mut state, 1, Phase::Tnn, 0.1).unwrap();
        assert_eq!(snn_checksum(&model), snn_after_phase0);
        assert_ne!(tnn_checksum(&model), tnn_before);
    }

    #[test]
    fn alternation_order_is_snn_then_tnn() {
        let cfg = tiny_config(Gating::Neuron, 4);
        let ds = tiny_dataset(12, 6, 3, 3);
        let val = tiny_dataset(6, 6, 3, 4);
        let (_, history) = alternating_train(&cfg, &ds, &val, |_, _| Ok(())).unwrap();
        let phases: Vec<&str> = history.iter().map(|r| r.phase.as_str()).collect();
        assert_eq!(phases, vec!["snn", "tnn", "snn", "tnn"]);
    }

    #[test]
    fn ungated_training_runs_tnn_every_epoch() {
        let cfg = TrainConfig {
            gating: Gating::None,
            epochs: 3,
            batch_size: 4,
            val_size: 0,
            tnn: crate::tnn::TaskNetworkConfig { widths: vec![6, 5, 3], bias: false },
            ..TrainConfig::default()
        };
        let ds = tiny_dataset(12, 6, 3, 5);
        let val = tiny_dataset(6, 6, 3, 6);
        let (model, history) = alternating_train(&cfg, &ds, &val, |_, _| Ok(())).unwrap();
        assert!(model.switchers.is_empty());
        assert!(history.iter().all(|r| r.phase == "tnn"));
    }

    #[test]
    fn training_loss_decreases_on_a_learnable_problem() {
        let cfg = tiny_config(Gating::Connection, 6);
        let ds = tiny_dataset(24, 6, 3, 7);
        let val = tiny_dataset(6, 6, 3, 8);
        let (_, history) = alternating_train(&cfg, &ds, &val, |_, _| Ok(())).unwrap();
        let first = history.first().unwrap().train_loss;
        let last = history.last().unwrap().train_loss;
        assert!(last < first, "loss went {} -> {}", first, last);
    }

    #[test]
    fn identical_configs_train_to_identical_weights() {
        let cfg = tiny_config(Gating::Connection, 4);
        let ds = tiny_dataset(16, 6, 3, 9);
        let val = tiny_dataset(6, 6, 3, 10);
        let (a, ha) = alternating_train(&cfg, &ds, &val, |_, _| Ok(())).unwrap();
        let (b, hb) = alternating_train(&cfg, &ds, &val, |_, _| Ok(())).unwrap();
        assert_eq!(ha, hb);
        for (la, lb) in a.tnn.layers.iter().zip(&b.tnn.layers) {
            assert_eq!(la.weight.data(), lb.weight.data());
        }
        assert_eq!(snn_checksum(&a), snn_checksum(&b));
    }

    #[test]
    fn validate_rejects_inconsistent_settings() {
        assert!(TrainConfig { epochs: 0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { batch_size: 0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { lr: 0.0, ..TrainConfig::default() }.validate().is_err());
        assert!(
            TrainConfig { switcher_channels: vec![], ..TrainConfig::default() }
                .validate()
                .is_err()
        );
    }
}
