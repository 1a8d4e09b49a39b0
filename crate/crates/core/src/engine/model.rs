//! Dense softmax-regression and ReLU MLP models with hand-written backprop.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::dataflow::Dataset;
use crate::error::{Error, Result};
use crate::rng::{self, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Architecture {
    Lr,
    Mlp { depth: usize, width: usize },
}

impl Architecture {
    /// Layer widths from input to output.
    pub fn widths(&self, n_features: usize, n_classes: usize) -> Vec<usize> {
        match *self {
            Architecture::Lr => vec![n_features, n_classes],
            Architecture::Mlp { depth, width } => {
                let mut w = vec![n_features];
                w.extend(std::iter::repeat_n(width, depth));
                w.push(n_classes);
                w
            }
        }
    }

    /// Number of trainable parameters, weights plus biases.
    pub fn n_params(&self, n_features: usize, n_classes: usize) -> usize {
        self.widths(n_features, n_classes)
            .windows(2)
            .map(|w| w[0] * w[1] + w[1])
            .sum()
    }
}

/// One affine layer; `weights` is `n_out x n_in`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub n_in: usize,
    pub n_out: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Layer {
    fn zeros(n_in: usize, n_out: usize) -> Self {
        Layer {
            n_in,
            n_out,
            weights: vec![0.0; n_in * n_out],
            bias: vec![0.0; n_out],
        }
    }

    fn affine(&self, input: &[f64], out: &mut [f64]) {
        for (j, o) in out.iter_mut().enumerate() {
            let row = &self.weights[j * self.n_in..(j + 1) * self.n_in];
            *o = self.bias[j] + row.iter().zip(input).map(|(w, x)| w * x).sum::<f64>();
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub architecture: Architecture,
    pub n_features: usize,
    pub n_classes: usize,
    pub layers: Vec<Layer>,
}

impl ModelParams {
    /// Weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)), biases zero.
    pub fn init(architecture: Architecture, n_features: usize, n_classes: usize, seed: u64) -> Self {
        let mut rng = rng::rng(seed);
        let layers = architecture
            .widths(n_features, n_classes)
            .windows(2)
            .map(|w| {
                let bound = 1.0 / (w[0] as f64).sqrt();
                let mut layer = Layer::zeros(w[0], w[1]);
                for v in &mut layer.weights {
                    *v = rng.random_range(-bound..bound);
                }
                layer
            })
            .collect();
        ModelParams {
            architecture,
            n_features,
            n_classes,
            layers,
        }
    }

    pub fn zeros_like(&self) -> Self {
        ModelParams {
            architecture: self.architecture,
            n_features: self.n_features,
            n_classes: self.n_classes,
            layers: self
                .layers
                .iter()
                .map(|l| Layer::zeros(l.n_in, l.n_out))
                .collect(),
        }
    }

    pub fn n_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.bias.len())
            .sum()
    }

    pub fn same_shape(&self, other: &ModelParams) -> bool {
        self.layers.len() == other.layers.len()
            && self
                .layers
                .iter()
                .zip(&other.layers)
                .all(|(a, b)| a.n_in == b.n_in && a.n_out == b.n_out)
    }

    pub fn check_shape(&self, other: &ModelParams) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::ShapeMismatch(format!(
                "{:?} vs {:?}",
                self.architecture, other.architecture
            )))
        }
    }

    pub fn is_finite(&self) -> bool {
        self.values().all(|v| v.is_finite())
    }

    /// All parameters in a fixed order (per layer: weights then bias).
    pub fn values(&self) -> impl Iterator<Item = &f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(l.bias.iter()))
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.weights.iter_mut().chain(l.bias.iter_mut()))
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.values().copied().collect()
    }

    pub fn assign(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.n_params());
        for (dst, src) in self.values_mut().zip(flat) {
            *dst = *src;
        }
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &ModelParams, scale: f64) {
        for (a, b) in self.values_mut().zip(other.values()) {
            *a += scale * b;
        }
    }

    /// Mean softmax cross-entropy over `rows` plus `weight_decay / 2 * |θ|²`,
    /// and its gradient. With `dropout = Some((p, rng))` hidden activations
    /// are dropped with probability `p` (inverted scaling).
    pub fn loss_and_grad(
        &self,
        data: &Dataset,
        rows: &[usize],
        weight_decay: f64,
        mut dropout: Option<(f64, &mut Rng)>,
    ) -> (f64, ModelParams) {
        let mut grad = self.zeros_like();
        let n_layers = self.layers.len();
        let batch = rows.len().max(1) as f64;
        let mut acts: Vec<Vec<f64>> = Vec::with_capacity(n_layers + 1);
        acts.push(vec![0.0; self.n_features]);
        for l in &self.layers {
            acts.push(vec![0.0; l.n_out]);
        }
        // Per hidden unit multiplier: 0 when dropped or inactive ReLU.
        let mut gates: Vec<Vec<f64>> = self.layers[..n_layers - 1]
            .iter()
            .map(|l| vec![0.0; l.n_out])
            .collect();
        let mut delta: Vec<f64> = Vec::new();
        let mut loss = 0.0;

        for &r in rows {
            acts[0].copy_from_slice(data.row(r));
            for (li, layer) in self.layers.iter().enumerate() {
                let (head, tail) = acts.split_at_mut(li + 1);
                let out = &mut tail[0];
                layer.affine(&head[li], out);
                if li + 1 < n_layers {
                    for (k, v) in out.iter_mut().enumerate() {
                        let mut g = if *v > 0.0 { 1.0 } else { 0.0 };
                        if let Some((p, ref mut rng)) = dropout {
                            if p > 0.0 {
                                g = if rng.random::<f64>() < p { 0.0 } else { g / (1.0 - p) };
                            }
                        }
                        gates[li][k] = g;
                        *v = if *v > 0.0 { *v * g } else { 0.0 };
                    }
                }
            }
            let logits = &acts[n_layers];
            let label = data.labels()[r];
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let sum_exp: f64 = logits.iter().map(|z| (z - max).exp()).sum();
            let lse = max + sum_exp.ln();
            loss += lse - logits[label];

            delta.clear();
            delta.extend(logits.iter().map(|z| (z - lse).exp() / batch));
            delta[label] -= 1.0 / batch;

            for li in (0..n_layers).rev() {
                let layer = &self.layers[li];
                let input = &acts[li];
                let g = &mut grad.layers[li];
                for (j, &d) in delta.iter().enumerate() {
                    g.bias[j] += d;
                    let row = &mut g.weights[j * layer.n_in..(j + 1) * layer.n_in];
                    for (w, x) in row.iter_mut().zip(input) {
                        *w += d * x;
                    }
                }
                if li > 0 {
                    let mut prev = vec![0.0; layer.n_in];
                    for (j, &d) in delta.iter().enumerate() {
                        let row = &layer.weights[j * layer.n_in..(j + 1) * layer.n_in];
                        for (p, w) in prev.iter_mut().zip(row) {
                            *p += w * d;
                        }
                    }
                    for (p, gate) in prev.iter_mut().zip(&gates[li - 1]) {
                        *p *= gate;
                    }
                    delta = prev;
                }
            }
        }
        loss /= batch;
        if weight_decay != 0.0 {
            let sq: f64 = self.values().map(|v| v * v).sum();
            loss += 0.5 * weight_decay * sq;
            for (g, v) in grad.values_mut().zip(self.values()) {
                *g += weight_decay * v;
            }
        }
        (loss, grad)
    }

    /// Class probabilities-free forward pass returning logits.
    fn logits(&self, x: &[f64], scratch: &mut Vec<Vec<f64>>) -> usize {
        let n_layers = self.layers.len();
        scratch.resize(n_layers + 1, Vec::new());
        scratch[0].clear();
        scratch[0].extend_from_slice(x);
        for (li, layer) in self.layers.iter().enumerate() {
            let (head, tail) = scratch.split_at_mut(li + 1);
            tail[0].resize(layer.n_out, 0.0);
            layer.affine(&head[li], &mut tail[0]);
            if li + 1 < n_layers {
                for v in tail[0].iter_mut() {
                    *v = v.max(0.0);
                }
            }
        }
        n_layers
    }

    /// Cross-entropy, accuracy and macro-F1 on `data` (no regularization).
    pub fn evaluate(&self, data: &Dataset) -> SplitMetrics {
        let n = data.len();
        if n == 0 {
            return SplitMetrics::default();
        }
        let k = self.n_classes;
        let mut scratch = Vec::new();
        let mut loss = 0.0;
        let mut correct = 0usize;
        let mut tp = vec![0usize; k];
        let mut pred_count = vec![0usize; k];
        let mut true_count = vec![0usize; k];
        for i in 0..n {
            let last = self.logits(data.row(i), &mut scratch);
            let z = &scratch[last];
            let label = data.labels()[i];
            let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - z[label];
            let mut pred = 0;
            for (c, v) in z.iter().enumerate() {
                if *v > z[pred] {
                    pred = c;
                }
            }
            pred_count[pred] += 1;
            true_count[label] += 1;
            if pred == label {
                correct += 1;
                tp[pred] += 1;
            }
        }
        let mut f1_sum = 0.0;
        let mut f1_classes = 0usize;
        for c in 0..k {
            if true_count[c] + pred_count[c] == 0 {
                continue;
            }
            f1_sum += 2.0 * tp[c] as f64 / (true_count[c] + pred_count[c]) as f64;
            f1_classes += 1;
        }
        SplitMetrics {
            loss: loss / n as f64,
            accuracy: correct as f64 / n as f64,
            f1: if f1_classes > 0 { f1_sum / f1_classes as f64 } else { 0.0 },
            n,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct SplitMetrics {
    pub loss: f64,
    pub accuracy: f64,
    pub f1: f64,
    pub n: usize,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataflow::synth_blobs;

    #[test]
    fn parameter_counts() {
        assert_eq!(Architecture::Lr.n_params(10, 2), 22);
        assert_eq!(Architecture::Mlp { depth: 1, width: 16 }.n_params(10, 2), 210);
        let m = ModelParams::init(Architecture::Mlp { depth: 2, width: 8 }, 5, 3, 0);
        assert_eq!(m.n_params(), Architecture::Mlp { depth: 2, width: 8 }.n_params(5, 3));
    }

    #[test]
    fn init_bounds_and_zero_bias() {
        let m = ModelParams::init(Architecture::Lr, 16, 3, 1);
        assert!(m.layers[0].weights.iter().all(|w| w.abs() <= 0.25));
        assert!(m.layers[0].bias.iter().all(|&b| b == 0.0));
    }

    #[test]
    fn metrics_are_bounded() {
        let d = synth_blobs(60, 4, 3, 0.7, 2).unwrap();
        let m = ModelParams::init(Architecture::Mlp { depth: 2, width: 6 }, 4, 3, 5);
        let s = m.evaluate(&d);
        assert!(s.loss >= 0.0);
        assert!((0.0..=1.0).contains(&s.accuracy));
        assert!((0.0..=1.0).contains(&s.f1));
        assert_eq!(s.n, 60);
    }
    fn check_gradient(arch: Architecture, seed: u64, wd: f64) {
        let d = synth_blobs(12, 3, 3, 0.8, seed).unwrap();
        let mut m = ModelParams::init(arch, 3, 3, seed);
        // Nonzero biases keep ReLU pre-activations off the kink at 0.
        let mut r = rng::rng(seed ^ 0xB1A5);
        for l in &mut m.layers {
            for b in &mut l.bias {
                *b = r.random_range(0.05..0.3);
            }
        }
        let rows: Vec<usize> = (0..12).collect();
        let (_, grad) = m.loss_and_grad(&d, &rows, wd, None);
        let analytic = grad.flatten();
        let flat = m.flatten();
        let h = 1e-6;
        for i in 0..flat.len() {
            let mut p = m.clone();
            let mut v = flat.clone();
            v[i] += h;
            p.assign(&v);
            let up = p.loss_and_grad(&d, &rows, wd, None).0;
            v[i] -= 2.0 * h;
            p.assign(&v);
            let down = p.loss_and_grad(&d, &rows, wd, None).0;
            let numeric = (up - down) / (2.0 * h);
            let err = (numeric - analytic[i]).abs() / numeric.abs().max(analytic[i].abs()).max(1e-3);
            assert!(err < 1e-4, "param {i}: numeric {numeric} analytic {}", analytic[i]);
        }
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(24))]
        #[test]
        fn gradients_match_finite_differences(
            seed in 0u64..1000,
            depth in 0usize..3,
            width in 2usize..6,
            wd in 0.0f64..0.01,
        ) {
            let arch = if depth == 0 { Architecture::Lr } else { Architecture::Mlp { depth, width } };
            check_gradient(arch, seed, wd);
        }
    }
}
