//! Federated learning simulator: local SGD, FedAvg/FedOPT aggregation,
//! client sampling and per-round evaluation.

mod course;
mod model;

pub use course::{
    run_course, run_course_at, ClientFeedback, ClientPlanner, Course, CourseOutcome, FixedPlanner, GlobalMetrics,
    RoundReport,
};
pub use model::{Architecture, Layer, ModelParams, SplitMetrics};

use serde::{Deserialize, Serialize};

use crate::dataflow::Dataset;
use crate::error::{Error, Result};
use crate::rng;
use crate::space::{HyperConfig, SearchSpace};

/// Losses above this are treated as divergence; it is also the penalty value
/// reported in place of a non-finite loss.
pub const LOSS_CAP: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClientHypers {
    pub batch_size: usize,
    pub weight_decay: f64,
    /// Local mini-batch SGD steps per round.
    pub step_size: usize,
    pub learning_rate: f64,
    pub dropout: f64,
}

impl Default for ClientHypers {
    fn default() -> Self {
        ClientHypers {
            batch_size: 32,
            weight_decay: 0.0,
            step_size: 1,
            learning_rate: 0.01,
            dropout: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ServerHypers {
    pub learning_rate: f64,
    pub momentum: f64,
}

impl Default for ServerHypers {
    fn default() -> Self {
        ServerHypers {
            learning_rate: 1.0,
            momentum: 0.0,
        }
    }
}

/// Everything a course needs to know about one configuration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecodedConfig {
    pub architecture: Architecture,
    pub client: ClientHypers,
    pub server: ServerHypers,
}

/// Maps a configuration onto model and optimizer settings by dimension name.
/// Dimensions absent from the space keep their defaults.
pub fn decode_config(space: &SearchSpace, cfg: &HyperConfig) -> DecodedConfig {
    let get = |name: &str| space.get(cfg, name);
    let mut client = ClientHypers::default();
    let mut server = ServerHypers::default();
    if let Some(v) = get("batch_size") {
        client.batch_size = v.round().max(1.0) as usize;
    }
    if let Some(v) = get("weight_decay") {
        client.weight_decay = v;
    }
    if let Some(v) = get("step_size") {
        client.step_size = v.round().max(1.0) as usize;
    }
    if let Some(v) = get("learning_rate") {
        client.learning_rate = v;
    }
    if let Some(v) = get("dropout") {
        client.dropout = v;
    }
    if let Some(v) = get("server_learning_rate") {
        server.learning_rate = v;
    }
    if let Some(v) = get("server_momentum") {
        server.momentum = v;
    }
    let architecture = match (get("depth"), get("width")) {
        (None, None) => Architecture::Lr,
        (depth, width) => Architecture::Mlp {
            depth: depth.map_or(1, |d| d.round().max(1.0) as usize),
            width: width.map_or(16, |w| w.round().max(1.0) as usize),
        },
    };
    DecodedConfig {
        architecture,
        client,
        server,
    }
}

/// Overrides the client hyperparameters named in `names` with `values`.
pub fn apply_client_values(client: &mut ClientHypers, names: &[String], values: &[f64]) {
    for (name, &v) in names.iter().zip(values) {
        match name.as_str() {
            "batch_size" => client.batch_size = v.round().max(1.0) as usize,
            "weight_decay" => client.weight_decay = v,
            "step_size" => client.step_size = v.round().max(1.0) as usize,
            "learning_rate" => client.learning_rate = v,
            "dropout" => client.dropout = v,
            _ => {}
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalOutcome {
    pub model: ModelParams,
    pub diverged: bool,
}

fn is_divergent(loss: f64) -> bool {
    !loss.is_finite() || loss > LOSS_CAP
}

/// Runs `steps` mini-batch SGD steps on a copy of `model`. Batches cycle
/// through a seeded shuffle of the shard, reshuffling on every wrap.
/// On divergence the last finite parameters are returned with the flag set.
pub fn local_update(
    model: &ModelParams,
    shard: &Dataset,
    h: &ClientHypers,
    steps: usize,
    seed: u64,
) -> Result<LocalOutcome> {
    if steps == 0 {
        return Err(Error::invalid("local_update: steps must be at least 1"));
    }
    if shard.is_empty() {
        return Err(Error::invalid("local_update: empty training shard"));
    }
    let mut rng = rng::rng(seed);
    let mut dropout_rng = rng::rng(rng::mix(seed, 0xD0));
    let n = shard.len();
    let batch = h.batch_size.clamp(1, n);
    let mut order: Vec<usize> = (0..n).collect();
    let mut cursor = n;
    let mut current = model.clone();
    let mut rows = Vec::with_capacity(batch);
    for _ in 0..steps {
        rows.clear();
        while rows.len() < batch {
            if cursor == n {
                use rand::seq::SliceRandom;
                order.shuffle(&mut rng);
                cursor = 0;
            }
            rows.push(order[cursor]);
            cursor += 1;
        }
        let dropout = (h.dropout > 0.0).then_some((h.dropout, &mut dropout_rng));
        let (loss, grad) = current.loss_and_grad(shard, &rows, h.weight_decay, dropout);
        if is_divergent(loss) {
            return Ok(LocalOutcome {
                model: current,
                diverged: true,
            });
        }
        let mut next = current.clone();
        next.add_scaled(&grad, -h.learning_rate);
        if !next.is_finite() {
            return Ok(LocalOutcome {
                model: current,
                diverged: true,
            });
        }
        current = next;
    }
    Ok(LocalOutcome {
        model: current,
        diverged: false,
    })
}

/// Sample-count weighted average of client models.
pub fn fedavg_aggregate(updates: &[(ModelParams, usize)]) -> Result<ModelParams> {
    let (first, _) = updates
        .first()
        .ok_or_else(|| Error::invalid("aggregate: no client updates"))?;
    for (m, _) in updates {
        first.check_shape(m)?;
    }
    let total: usize = updates.iter().map(|(_, n)| n).sum();
    let mut out = first.zeros_like();
    for (m, n) in updates {
        let w = if total == 0 {
            1.0 / updates.len() as f64
        } else {
            *n as f64 / total as f64
        };
        out.add_scaled(m, w);
    }
    Ok(out)
}

/// Server-side SGD with momentum on the FedAvg pseudo-gradient:
/// `Δ = avg − θ`, `buf ← momentum·buf + Δ`, `θ ← θ + lr·buf`.
///
/// The new parameters are formed as `avg + (lr·buf − Δ)`, which equals
/// `θ + lr·buf` and is bit-identical to `avg` when `lr = 1, momentum = 0`.
pub fn fedopt_aggregate(
    buffer: &mut ModelParams,
    global: &ModelParams,
    updates: &[(ModelParams, usize)],
    s: &ServerHypers,
) -> Result<ModelParams> {
    let avg = fedavg_aggregate(updates)?;
    global.check_shape(&avg)?;
    buffer.check_shape(global)?;
    let mut out = avg.clone();
    for (((o, b), a), g) in out
        .values_mut()
        .zip(buffer.values_mut())
        .zip(avg.values())
        .zip(global.values())
    {
        let delta = a - g;
        *b = s.momentum * *b + delta;
        *o = a + (s.learning_rate * *b - delta);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataflow::synth_blobs;
    use crate::space::{builtin_space, grid, Algorithm, Family};

    fn scalar_model(v: f64) -> ModelParams {
        ModelParams {
            architecture: Architecture::Lr,
            n_features: 1,
            n_classes: 1,
            layers: vec![Layer {
                n_in: 1,
                n_out: 1,
                weights: vec![v],
                bias: vec![0.0],
            }],
        }
    }

    #[test]
    fn fedavg_examples() {
        let m = ModelParams::init(Architecture::Lr, 3, 2, 0);
        assert_eq!(fedavg_aggregate(&[(m.clone(), 7)]).unwrap(), m);
        let avg = fedavg_aggregate(&[(scalar_model(0.0), 1), (scalar_model(2.0), 3)]).unwrap();
        assert_eq!(avg.layers[0].weights[0], 1.5);
        let eq = fedavg_aggregate(&[
            (scalar_model(1.0), 5),
            (scalar_model(2.0), 5),
            (scalar_model(6.0), 5),
        ])
        .unwrap();
        assert!((eq.layers[0].weights[0] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn aggregate_rejects_mismatch() {
        let a = ModelParams::init(Architecture::Lr, 3, 2, 0);
        let b = ModelParams::init(Architecture::Lr, 4, 2, 0);
        assert!(matches!(
            fedavg_aggregate(&[(a, 1), (b, 1)]),
            Err(Error::ShapeMismatch(_))
        ));
        assert!(fedavg_aggregate(&[]).is_err());
    }

    #[test]
    fn fedopt_reduces_to_fedavg() {
        let g = ModelParams::init(Architecture::Lr, 3, 2, 0);
        let ups = vec![
            (ModelParams::init(Architecture::Lr, 3, 2, 1), 4),
            (ModelParams::init(Architecture::Lr, 3, 2, 2), 9),
        ];
        let mut buf = g.zeros_like();
        let s = ServerHypers {
            learning_rate: 1.0,
            momentum: 0.0,
        };
        let out = fedopt_aggregate(&mut buf, &g, &ups, &s).unwrap();
        assert_eq!(out, fedavg_aggregate(&ups).unwrap());
    }

    #[test]
    fn fedopt_half_step() {
        let g = scalar_model(1.0);
        let mut buf = g.zeros_like();
        let s = ServerHypers {
            learning_rate: 0.5,
            momentum: 0.0,
        };
        let out = fedopt_aggregate(&mut buf, &g, &[(scalar_model(3.0), 1)], &s).unwrap();
        assert!((out.layers[0].weights[0] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn fedopt_momentum_unrolls() {
        // Constant pseudo-gradient Δ = 1: second step moves lr * 1.9.
        let s = ServerHypers {
            learning_rate: 0.5,
            momentum: 0.9,
        };
        let mut buf = scalar_model(0.0).zeros_like();
        let g0 = scalar_model(0.0);
        let g1 = fedopt_aggregate(&mut buf, &g0, &[(scalar_model(1.0), 1)], &s).unwrap();
        let w1 = g1.layers[0].weights[0];
        assert!((w1 - 0.5).abs() < 1e-12);
        let g2 = fedopt_aggregate(&mut buf, &g1, &[(scalar_model(w1 + 1.0), 1)], &s).unwrap();
        let step = g2.layers[0].weights[0] - w1;
        assert!((step - 0.5 * 1.9).abs() < 1e-12, "step {step}");
    }

    #[test]
    fn zero_learning_rate_leaves_params() {
        let d = synth_blobs(40, 3, 2, 0.5, 0).unwrap();
        let m = ModelParams::init(Architecture::Mlp { depth: 1, width: 4 }, 3, 2, 3);
        let h = ClientHypers {
            learning_rate: 0.0,
            step_size: 3,
            ..Default::default()
        };
        let out = local_update(&m, &d, &h, 3, 0).unwrap();
        assert_eq!(out.model, m);
        assert!(!out.diverged);
    }

    #[test]
    fn local_update_single_full_batch_step() {
        let d = synth_blobs(30, 4, 3, 0.8, 1).unwrap();
        let m = ModelParams::init(Architecture::Lr, 4, 3, 4);
        let h = ClientHypers {
            batch_size: 30,
            learning_rate: 0.3,
            weight_decay: 1e-3,
            ..Default::default()
        };
        let out = local_update(&m, &d, &h, 1, 11).unwrap();
        let rows: Vec<usize> = (0..30).collect();
        let (_, grad) = m.loss_and_grad(&d, &rows, 1e-3, None);
        let mut expect = m.clone();
        expect.add_scaled(&grad, -0.3);
        for (a, b) in out.model.values().zip(expect.values()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn weight_decay_shrinks_without_data_gradient() {
        // Zero features and balanced labels: the data term has zero gradient.
        let d = Dataset::new(vec![0.0; 8], 2, vec![0, 1, 0, 1], 2).unwrap();
        let m = ModelParams::init(Architecture::Lr, 2, 2, 9);
        let (eta, w) = (0.1, 0.5);
        let h = ClientHypers {
            batch_size: 4,
            learning_rate: eta,
            weight_decay: w,
            ..Default::default()
        };
        let out = local_update(&m, &d, &h, 3, 0).unwrap();
        let factor = (1.0f64 - eta * w).powi(3);
        for (a, b) in out.model.layers[0].weights.iter().zip(&m.layers[0].weights) {
            assert!((a - b * factor).abs() < 1e-12);
        }
    }

    #[test]
    fn divergence_returns_last_finite() {
        let d = synth_blobs(20, 3, 2, 0.5, 0).unwrap();
        let m = ModelParams::init(Architecture::Lr, 3, 2, 0);
        let h = ClientHypers {
            learning_rate: 1e12,
            step_size: 50,
            batch_size: 4,
            ..Default::default()
        };
        let out = local_update(&m, &d, &h, 50, 0).unwrap();
        assert!(out.diverged);
        assert!(out.model.is_finite());
    }

    #[test]
    fn decode_builtin_config() {
        let space = builtin_space(Family::Mlp, Algorithm::FedOpt);
        let cfg = &grid(&space)[0];
        let d = decode_config(&space, cfg);
        assert_eq!(d.architecture, Architecture::Mlp { depth: 1, width: 16 });
        assert_eq!(d.client.batch_size, 4);
        assert_eq!(d.server.momentum, 0.0);
        assert_eq!(d.server.learning_rate, 0.1);
        let lr = builtin_space(Family::Lr, Algorithm::FedAvg);
        assert_eq!(decode_config(&lr, &grid(&lr)[0]).architecture, Architecture::Lr);
    }
}
