//! Compression accounting: effective weights, surviving-parameter counts,
//! FLOPs ratio, gate histograms, and test accuracy.

use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::snn::{GateTensor, Strategy};
use crate::tensor::{Scalar, Tensor};
use crate::train::GatedModel;

/// Fold gates into the weight matrix. Connection: W (.) Z. Neuron: row r of W
/// scaled by Z[r] — the gate multiplies the neuron's output activation, which
/// feeds every outgoing connection, so row scaling is the equivalent network.
pub fn effective_weights<T: Scalar>(w: &Tensor<T>, z: &GateTensor<T>) -> Result<Tensor<T>> {
    let (m, n) = w.dims2()?;
    match z.strategy {
        Strategy::Connection => {
            if z.values.shape() != [m, n] {
                return Err(Error::Dimension(format!(
                    "gate shape {:?} vs weight {}x{}",
                    z.values.shape(),
                    m,
                    n
                )));
            }
            let data: Vec<T> = w
                .data()
                .iter()
                .zip(z.values.data())
                .map(|(&wv, &zv)| wv * zv)
                .collect();
            Tensor::new(vec![m, n], data)
        }
        Strategy::Neuron => {
            if z.values.shape() != [m] {
                return Err(Error::Dimension(format!(
                    "gate shape {:?} vs weight rows {}",
                    z.values.shape(),
                    m
                )));
            }
            let zd = z.values.data();
            let mut data = vec![T::zero(); m * n];
            for r in 0..m {
                for c in 0..n {
                    data[r * n + c] = w.data()[r * n + c] * zd[r];
                }
            }
            Tensor::new(vec![m, n], data)
        }
    }
}

/// A weight is pruned iff its effective value is exactly zero AND its gate is
/// exactly zero. Returns (remaining, pruned, total).
pub fn count_remaining<T: Scalar>(
    w_eff: &Tensor<T>,
    gate: Option<&GateTensor<T>>,
) -> Result<(usize, usize, usize)> {
    let (m, n) = w_eff.dims2()?;
    let total = m * n;
    let Some(gate) = gate else {
        return Ok((total, 0, total));
    };
    let mut pruned = 0usize;
    match gate.strategy {
        Strategy::Connection => {
            for (we, zv) in w_eff.data().iter().zip(gate.values.data()) {
                if *we == T::zero() && *zv == T::zero() {
                    pruned += 1;
                }
            }
        }
        Strategy::Neuron => {
            for (r, zv) in gate.values.data().iter().enumerate() {
                if *zv == T::zero() {
                    let row = &w_eff.data()[r * n..(r + 1) * n];
                    pruned += row.iter().filter(|&&we| we == T::zero()).count();
                }
            }
        }
    }
    Ok((total - pruned, pruned, total))
}

/// Baseline multiplies over remaining multiplies, rounded half-up to one
/// decimal. Errors on a fully pruned network.
pub fn flops_ratio(total_baseline: usize, remaining: usize) -> Result<f64> {
    if remaining == 0 {
        return Err(Error::Degenerate("no remaining weights".into()));
    }
    let raw = total_baseline as f64 / remaining as f64;
    Ok((raw * 10.0).round() / 10.0)
}

pub fn format_flops(ratio: f64) -> String {
    format!("{:.1}\u{00d7}", ratio)
}

/// Zero-gate fraction per gated layer plus the network-wide surviving weight
/// count (ungated layers count fully).
pub fn sparsity_stats(model: &GatedModel) -> Result<(Vec<f64>, usize)> {
    let mut zero_frac = Vec::new();
    let mut remaining_total = 0usize;
    for (k, layer) in model.tnn.layers.iter().enumerate() {
        match model.switcher_for(k) {
            Some(sw) => {
                let z = sw.gates(&layer.weight)?;
                let w_eff = effective_weights(&layer.weight, &z)?;
                let (remaining, _, _) = count_remaining(&w_eff, Some(&z))?;
                zero_frac.push(z.zero_fraction());
                remaining_total += remaining;
            }
            None => {
                remaining_total += layer.weight.numel();
            }
        }
    }
    Ok((zero_frac, remaining_total))
}

/// Gates applied exactly as in the training forward (via folded weights,
/// which is logits-equivalent); argmax ties break to the lowest class index.
pub fn evaluate_accuracy(model: &GatedModel, ds: &Dataset) -> Result<f64> {
    let folded = folded_weights(model)?;
    let mut correct = 0usize;
    let dim = ds.dim();
    let px = ds.images.data();
    let chunk = 500usize;
    for start in (0..ds.len()).step_by(chunk) {
        let end = (start + chunk).min(ds.len());
        let x = Tensor::new(
            vec![end - start, dim],
            px[start * dim..end * dim].to_vec(),
        )?;
        let logits = plain_logits(model, &folded, x)?;
        let (_, classes) = logits.dims2()?;
        for (i, &label) in ds.labels[start..end].iter().enumerate() {
            let row = &logits.data()[i * classes..(i + 1) * classes];
            let mut best = 0usize;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            if best == label as usize {
                correct += 1;
            }
        }
    }
    Ok(100.0 * correct as f64 / ds.len() as f64)
}

/// Effective weight matrices for every layer (identity fold when ungated).
pub fn folded_weights(model: &GatedModel) -> Result<Vec<Tensor<f32>>> {
    let mut out = Vec::new();
    for (k, layer) in model.tnn.layers.iter().enumerate() {
        match model.switcher_for(k) {
            Some(sw) => {
                let z = sw.gates(&layer.weight)?;
                out.push(effective_weights(&layer.weight, &z)?);
            }
            None => out.push(layer.weight.clone()),
        }
    }
    Ok(out)
}

fn plain_logits(model: &GatedModel, weights: &[Tensor<f32>], x: Tensor<f32>) -> Result<Tensor<f32>> {
    let mut tape = Tape::new();
    let mut h = tape.constant(x);
    let last = weights.len() - 1;
    for (k, w) in weights.iter().enumerate() {
        let wv = tape.constant(w.clone());
        h = tape.matmul(h, wv)?;
        if let Some(b) = &model.tnn.layers[k].bias {
            let bv = tape.constant(b.clone());
            h = tape.add_col_broadcast(h, bv)?;
        }
        if k != last {
            h = tape.relu(h)?;
        }
    }
    Ok(tape.value(h).clone())
}

/// Histogram buckets: exactly 0, (0, 1-eps), [1-eps, 1+eps], > 1+eps.
#[derive(Clone, Debug, Default, Serialize, Deserialize, PartialEq)]
pub struct GateHistogram {
    pub zero: usize,
    pub weakening: usize,
    pub near_one: usize,
    pub strengthening: usize,
}

pub const NEAR_ONE_EPS: f64 = 1e-3;

pub fn gate_histogram<T: Scalar>(z: &GateTensor<T>) -> GateHistogram {
    let mut h = GateHistogram::default();
    let lo = T::from(1.0 - NEAR_ONE_EPS).unwrap();
    let hi = T::from(1.0 + NEAR_ONE_EPS).unwrap();
    for &v in z.values.data() {
        if v == T::zero() {
            h.zero += 1;
        } else if v < lo {
            h.weakening += 1;
        } else if v <= hi {
            h.near_one += 1;
        } else {
            h.strengthening += 1;
        }
    }
    h
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct LayerReport {
    pub layer: usize,
    pub shape: (usize, usize),
    pub gated: bool,
    pub remaining: usize,
    pub pruned: usize,
    pub total: usize,
    pub histogram: Option<GateHistogram>,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct SparsityReport {
    pub method: String,
    pub accuracy: Option<f64>,
    pub remaining: usize,
    pub pruned: usize,
    pub total: usize,
    pub flops_ratio: f64,
    pub layers: Vec<LayerReport>,
    pub config_fingerprint: String,
}

impl SparsityReport {
    pub fn build(model: &GatedModel, accuracy: Option<f64>) -> Result<Self> {
        let mut layers = Vec::new();
        let mut remaining = 0usize;
        let mut pruned = 0usize;
        let mut total = 0usize;
        for (k, layer) in model.tnn.layers.iter().enumerate() {
            let (m, n) = layer.weight.dims2()?;
            let (rep_rem, rep_pruned, rep_total, hist) = match model.switcher_for(k) {
                Some(sw) => {
                    let z = sw.gates(&layer.weight)?;
                    let w_eff = effective_weights(&layer.weight, &z)?;
                    let (r, p, t) = count_remaining(&w_eff, Some(&z))?;
                    (r, p, t, Some(gate_histogram(&z)))
                }
                None => (m * n, 0, m * n, None),
            };
            remaining += rep_rem;
            pruned += rep_pruned;
            total += rep_total;
            layers.push(LayerReport {
                layer: k + 1,
                shape: (m, n),
                gated: hist.is_some(),
                remaining: rep_rem,
                pruned: rep_pruned,
                total: rep_total,
                histogram: hist,
            });
        }
        let method = match model.config.gating {
            crate::train::Gating::None => "Baseline".to_string(),
            crate::train::Gating::Neuron => "SNN neuron".to_string(),
            crate::train::Gating::Connection => "SNN connection".to_string(),
        };
        Ok(Self {
            method,
            accuracy,
            remaining,
            pruned,
            total,
            flops_ratio: flops_ratio(total, remaining)?,
            layers,
            config_fingerprint: model.config.fingerprint(),
        })
    }

    /// Human-readable table in the Method / Acc (%) / Params / FLOPs layout.
    pub fn render(&self) -> String {
        let mut s = String::new();
        s.push_str("Method          Acc (%)  Params   FLOPs\n");
        let acc = self
            .accuracy
            .map(|a| format!("{:.2}", a))
            .unwrap_or_else(|| "-".to_string());
        s.push_str(&format!(
            "{:<15} {:>7}  {:>7}  {:>5}\n",
            self.method,
            acc,
            self.remaining,
            format_flops(self.flops_ratio)
        ));
        s.push('\n');
        s.push_str("layer  shape      gated  remaining  pruned  total    zeros  weak  ~1  strong\n");
        for l in &self.layers {
            let (z, w, o, st) = l
                .histogram
                .as_ref()
                .map(|h| {
                    (
                        h.zero.to_string(),
                        h.weakening.to_string(),
                        h.near_one.to_string(),
                        h.strengthening.to_string(),
                    )
                })
                .unwrap_or(("-".into(), "-".into(), "-".into(), "-".into()));
            s.push_str(&format!(
                "{:<6} {:<10} {:<6} {:>9}  {:>6}  {:>7}  {:>5}  {:>4}  {:>2}  {:>6}\n",
                l.layer,
                format!("{}x{}", l.shape.0, l.shape.1),
                l.gated,
                l.remaining,
                l.pruned,
                l.total,
                z,
                w,
                o,
                st
            ));
        }
        s.push_str(&format!("config_fingerprint: {}\n", self.config_fingerprint));
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(
            "layer,shape,gated,remaining,pruned,total,zero,weakening,near_one,strengthening\n",
        );
        for l in &self.layers {
            let h = l.histogram.clone().unwrap_or_default();
            s.push_str(&format!(
                "{},{}x{},{},{},{},{},{},{},{},{}\n",
                l.layer,
                l.shape.0,
                l.shape.1,
                l.gated,
                l.remaining,
                l.pruned,
                l.total,
                h.zero,
                h.weakening,
                h.near_one,
                h.strengthening
            ));
        }
        let acc = self.accuracy.map(|a| a.to_string()).unwrap_or_default();
        s.push_str(&format!(
            "total,,,{},{},{},,,,\n",
            self.remaining, self.pruned, self.total
        ));
        s.push_str(&format!("accuracy,{}\n", acc));
        s.push_str(&format!("flops_ratio,{}\n", format_flops(self.flops_ratio)));
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Dataset;
    use crate::rng::seeded_rng;
    use crate::train::{alternating_train, Gating, TrainConfig};
    use crate::tnn::TaskNetworkConfig;
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

    #[test]
    fn flops_ratio_reproduces_published_accounting() {
        assert_eq!(flops_ratio(266_200, 42_500).unwrap(), 6.3);
        assert_eq!(flops_ratio(266_200, 47_700).unwrap(), 5.6);
        assert_eq!(format_flops(6.3), "6.3\u{00d7}");
        assert_eq!(flops_ratio(266_200, 266_200).unwrap(), 1.0);
        assert!(flops_ratio(266_200, 0).is_err());
    }

    #[test]
    fn connection_pruning_requires_gate_and_weight_both_zero() {
        let w_eff = Tensor::new(vec![2, 2], vec![0.0f32, 0.0, 1.5, 0.0]).unwrap();
        let gate = GateTensor {
            values: Tensor::new(vec![2, 2], vec![0.0f32, 0.5, 1.0, 0.0]).unwrap(),
            strategy: Strategy::Connection,
        };
        // Entry (0,0): both zero -> pruned. Entry (0,1): w_eff zero but the
        // gate survives (the underlying weight was zero) -> remaining.
        let (remaining, pruned, total) = count_remaining(&w_eff, Some(&gate)).unwrap();
        assert_eq!((remaining, pruned, total), (2, 2, 4));
    }

    #[test]
    fn neuron_pruning_counts_whole_rows() {
        let w_eff = Tensor::new(vec![2, 3], vec![0.0f32, 0.0, 0.0, 1.0, 2.0, 3.0]).unwrap();
        let gate = GateTensor {
            values: Tensor::new(vec![2], vec![0.0f32, 1.0]).unwrap(),
            strategy: Strategy::Neuron,
        };
        let (remaining, pruned, total) = count_remaining(&w_eff, Some(&gate)).unwrap();
        assert_eq!((remaining, pruned, total), (3, 3, 6));
    }

    #[test]
    fn ungated_layers_keep_every_weight() {
        let w = Tensor::new(vec![2, 2], vec![0.0f32, 1.0, 0.0, 2.0]).unwrap();
        let (remaining, pruned, total) = count_remaining::<f32>(&w, None).unwrap();
        assert_eq!((remaining, pruned, total), (4, 0, 4));
    }

    #[test]
    fn effective_weights_fold_connection_gates_elementwise() {
        let w = Tensor::new(vec![2, 2], vec![1.0f32, 2.0, 3.0, 4.0]).unwrap();
        let z = GateTensor {
            values: Tensor::new(vec![2, 2], vec![0.0f32, 1.0, 0.5, 2.0]).unwrap(),
            strategy: Strategy::Connection,
        };
        let eff = effective_weights(&w, &z).unwrap();
        assert_eq!(eff.data(), &[0.0, 2.0, 1.5, 8.0]);
    }

    #[test]
    fn effective_weights_scale_rows_under_neuron_gates() {
        let w = Tensor::new(vec![2, 2], vec![1.0f32, 2.0, 3.0, 4.0]).unwrap();
        let z = GateTensor {
            values: Tensor::new(vec![2], vec![0.5f32, 0.0]).unwrap(),
            strategy: Strategy::Neuron,
        };
        let eff = effective_weights(&w, &z).unwrap();
        assert_eq!(eff.data(), &[0.5, 1.0, 0.0, 0.0]);
    }

    fn trained_tiny_model(gating: Gating) -> crate::train::GatedModel {
        let cfg = TrainConfig {
            epochs: 4,
            batch_size: 4,
            gating,
            gate_first_layer: true,
            val_size: 0,
            switcher_channels: vec![2, 4],
            tnn: TaskNetworkConfig { widths: vec![6, 5, 3], bias: false },
            ..TrainConfig::default()
        };
        let ds = tiny_dataset(16, 6, 3, 11);
        let val = tiny_dataset(8, 6, 3, 12);
        alternating_train(&cfg, &ds, &val, |_, _| Ok(())).unwrap().0
    }

    #[test]
    fn folded_network_agrees_with_the_gated_graph() {
        for gating in [Gating::Connection, Gating::Neuron] {
            let model = trained_tiny_model(gating);
            let ds = tiny_dataset(10, 6, 3, 13);
            let folded = folded_weights(&model).unwrap();

            let mut tape = crate::autodiff::Tape::<f32>::new();
            let (logits, _) =
                crate::train::gated_forward(&model, &mut tape, ds.images.clone(), None).unwrap();
            let gated = tape.value(logits).data().to_vec();
            let plain = plain_logits(&model, &folded, ds.images.clone()).unwrap();
            // Folding regroups the multiplies, so compare against the scale
            // of the logits rather than element-by-element.
            let scale = gated.iter().fold(1e-3f32, |m, v| m.max(v.abs()));
            for (a, b) in gated.iter().zip(plain.data()) {
                assert!(((a - b) / scale).abs() <= 1e-6, "gated {} folded {}", a, b);
            }
        }
    }

    #[test]
    fn accuracy_breaks_argmax_ties_toward_the_lowest_class() {
        // A network whose logits are identically zero predicts class 0.
        let cfg = TrainConfig {
            epochs: 1,
            gating: Gating::None,
            val_size: 0,
            tnn: TaskNetworkConfig { widths: vec![4, 3], bias: false },
            ..TrainConfig::default()
        };
        let mut model = crate::train::GatedModel::init(&cfg).unwrap();
        for v in model.tnn.layers[0].weight.data_mut() {
            *v = 0.0;
        }
        let ds = Dataset {
            images: Tensor::new(vec![3, 4], vec![0.5; 12]).unwrap(),
            labels: vec![0, 1, 0],
        };
        let acc = evaluate_accuracy(&model, &ds).unwrap();
        assert!((acc - 200.0 / 3.0).abs() < 1e-9);
    }

    #[test]
    fn gate_histogram_buckets_partition_all_gates() {
        let z = GateTensor {
            values: Tensor::new(vec![5], vec![0.0f32, 0.5, 1.0, 1.0005, 2.0]).unwrap(),
            strategy: Strategy::Neuron,
        };
        let h = gate_histogram(&z);
        assert_eq!(h.zero, 1);
        assert_eq!(h.weakening, 1);
        assert_eq!(h.near_one, 2);
        assert_eq!(h.strengthening, 1);
    }

    #[test]
    fn baseline_report_shows_full_parameter_count() {
        let cfg = TrainConfig {
            epochs: 1,
            gating: Gating::None,
            val_size: 0,
            ..TrainConfig::default()
        };
        let model = crate::train::GatedModel::init(&cfg).unwrap();
        let report = SparsityReport::build(&model, Some(98.0)).unwrap();
        assert_eq!(report.remaining, 266_200);
        assert_eq!(report.pruned, 0);
        assert_eq!(report.flops_ratio, 1.0);
        let text = report.render();
        assert!(text.contains("266,200") || text.contains("266200"), "{}", text);
        assert!(text.contains("1.0\u{00d7}"), "{}", text);
    }
}
