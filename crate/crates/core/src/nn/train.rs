use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::{forward, loss_and_grad, GroupedModel, MaskState};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub seed: u64,
    pub rewind_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 32,
            learning_rate: 0.05,
            momentum: 0.9,
            seed: 0,
            rewind_fraction: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Argument("batch_size must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Argument("learning_rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Argument("momentum must lie in [0, 1)".into()));
        }
        if !(0.0..=1.0).contains(&self.rewind_fraction) {
            return Err(Error::Argument("rewind_fraction must lie in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self, samples: usize) -> usize {
        samples.div_ceil(self.batch_size)
    }

    pub fn total_steps(&self, samples: usize) -> usize {
        self.epochs * self.steps_per_epoch(samples)
    }

    /// Optimizer step index at which the rewind snapshot is taken.
    pub fn rewind_step(&self, samples: usize) -> usize {
        (self.rewind_fraction * self.total_steps(samples) as f64).floor() as usize
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub trained: GroupedModel,
    pub snapshot: GroupedModel,
    /// Mean minibatch loss per epoch.
    pub history: Vec<f64>,
}

/// Sample order for `epoch`: a ChaCha stream keyed by `(seed, epoch)`, so any
/// epoch's permutation can be regenerated without replaying earlier ones.
pub(crate) fn epoch_permutation(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

/// Minibatch SGD with momentum under a fixed mask.
///
/// Pruned weights are zeroed before the first step and never updated.
pub fn train(
    model: &GroupedModel,
    mask: &MaskState,
    data: &Dataset,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    let (trained, snapshot, history) = train_from_step(model, mask, data, config, 0)?;
    Ok(TrainOutcome {
        trained,
        snapshot: snapshot.expect("snapshot step is never before step 0"),
        history,
    })
}

/// Runs optimizer steps `start_step..total_steps` of the schedule defined by
/// `config`. The snapshot is returned only if its step lies in that range.
pub(crate) fn train_from_step(
    model: &GroupedModel,
    mask: &MaskState,
    data: &Dataset,
    config: &TrainConfig,
    start_step: usize,
) -> Result<(GroupedModel, Option<GroupedModel>, Vec<f64>)> {
    config.validate()?;
    mask.check_matches(model)?;
    let n = data.len();
    if n == 0 {
        return Err(Error::Argument("training set is empty".into()));
    }
    if data.features.cols() != model.spec().input_dim {
        return Err(Error::Dimension(format!(
            "dataset has {} features, network expects {}",
            data.features.cols(),
            model.spec().input_dim
        )));
    }

    let per_epoch = config.steps_per_epoch(n);
    let total = config.total_steps(n);
    let rewind_at = config.rewind_step(n);

    let mut current = model.clone();
    current.apply_mask(mask);
    let mut w_velocity: Vec<Vec<f64>> = current
        .groups
        .iter()
        .map(|g| vec![0.0; g.weights.len()])
        .collect();
    let mut b_velocity: Vec<Vec<f64>> =
        current.groups.iter().map(|g| vec![0.0; g.bias.len()]).collect();

    let mut snapshot = None;
    let mut history = Vec::new();
    let mut epoch_loss = 0.0;
    let mut epoch_batches = 0usize;
    let mut order = Vec::new();
    let mut labels = Vec::with_capacity(config.batch_size);

    for step in start_step..total {
        if step == rewind_at {
            snapshot = Some(current.clone());
        }
        let epoch = step / per_epoch;
        let batch_index = step % per_epoch;
        if batch_index == 0 || step == start_step {
            order = epoch_permutation(config.seed, epoch, n);
        }

        let lo = batch_index * config.batch_size;
        let hi = (lo + config.batch_size).min(n);
        let idx = &order[lo..hi];
        let batch = data.features.select_rows(idx);
        labels.clear();
        labels.extend(idx.iter().map(|&i| data.labels[i]));

        let (loss, grads) = match loss_and_grad(&current, mask, &batch, &labels) {
            Ok(r) => r,
            Err(Error::Domain(_)) => return Err(Error::Divergence { epoch, loss: f64::NAN }),
            Err(e) => return Err(e),
        };
        if !loss.is_finite() {
            return Err(Error::Divergence { epoch, loss });
        }
        epoch_loss += loss;
        epoch_batches += 1;

        let lr = config.learning_rate;
        let mu = config.momentum;
        for (gi, group) in current.groups.iter_mut().enumerate() {
            let bits = &mask.bits[gi];
            let gw = grads.weights[gi].data();
            let vw = &mut w_velocity[gi];
            for (j, w) in group.weights.data_mut().iter_mut().enumerate() {
                if bits[j] {
                    vw[j] = mu * vw[j] + gw[j];
                    *w -= lr * vw[j];
                }
            }
            let vb = &mut b_velocity[gi];
            for (j, b) in group.bias.iter_mut().enumerate() {
                vb[j] = mu * vb[j] + grads.biases[gi][j];
                *b -= lr * vb[j];
            }
        }

        if batch_index + 1 == per_epoch {
            let mean = epoch_loss / epoch_batches as f64;
            if !current.all_finite() {
                return Err(Error::Divergence { epoch, loss: mean });
            }
            history.push(mean);
            epoch_loss = 0.0;
            epoch_batches = 0;
        }
    }
    if rewind_at == total && start_step <= total {
        snapshot = Some(current.clone());
    }
    Ok((current, snapshot, history))
}

/// Top-1 misclassification rate in percent. Ties in the logits resolve to
/// the lowest class index.
pub fn evaluate(model: &GroupedModel, mask: &MaskState, data: &Dataset) -> Result<f64> {
    let n = data.len();
    if n == 0 {
        return Err(Error::Argument("evaluation set is empty".into()));
    }
    const CHUNK: usize = 512;
    let mut wrong = 0usize;
    let all: Vec<usize> = (0..n).collect();
    for idx in all.chunks(CHUNK) {
        let logits = forward(model, mask, &data.features.select_rows(idx))?;
        for (r, &i) in idx.iter().enumerate() {
            let row = logits.row(r);
            let mut best = 0;
            for c in 1..row.len() {
                if row[c] > row[best] {
                    best = c;
                }
            }
            if best != data.labels[i] {
                wrong += 1;
            }
        }
    }
    Ok(100.0 * wrong as f64 / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen_blobs;
    use crate::nn::{Activation, NetworkSpec, StageSpec};
    use crate::tensor::Tensor2;

    fn small_spec() -> NetworkSpec {
        NetworkSpec::new(
            2,
            2,
            vec![StageSpec { block_count: 1, width: 8 }],
            Activation::Relu,
        )
        .unwrap()
    }

    fn blobs() -> Dataset {
        gen_blobs(200, &[vec![-3.0, 0.0], vec![3.0, 0.0]], 0.7, 4).unwrap()
    }

    #[test]
    fn permutation_depends_on_seed_and_epoch() {
        let a = epoch_permutation(1, 0, 50);
        assert_eq!(a, epoch_permutation(1, 0, 50));
        assert_ne!(a, epoch_permutation(1, 1, 50));
        assert_ne!(a, epoch_permutation(2, 0, 50));
        let mut sorted = a.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..50).collect::<Vec<_>>());
    }

    #[test]
    fn same_seed_same_weights() {
        let model = GroupedModel::init(&small_spec(), 3).unwrap();
        let mask = MaskState::ones_for(&model);
        let cfg = TrainConfig {
            epochs: 3,
            ..TrainConfig::default()
        };
        let a = train(&model, &mask, &blobs(), &cfg).unwrap();
        let b = train(&model, &mask, &blobs(), &cfg).unwrap();
        for (ga, gb) in a.trained.groups.iter().zip(&b.trained.groups) {
            let bits_a: Vec<u64> = ga.weights.data().iter().map(|v| v.to_bits()).collect();
            let bits_b: Vec<u64> = gb.weights.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits_a, bits_b);
        }
        assert_eq!(a.history, b.history);
    }

    #[test]
    fn separable_blobs_are_learned() {
        let model = GroupedModel::init(&small_spec(), 8).unwrap();
        let mask = MaskState::ones_for(&model);
        let data = blobs();
        let cfg = TrainConfig {
            epochs: 20,
            batch_size: 16,
            learning_rate: 0.05,
            ..TrainConfig::default()
        };
        let out = train(&model, &mask, &data, &cfg).unwrap();
        assert!(evaluate(&out.trained, &mask, &data).unwrap() < 5.0);
        assert_eq!(out.history.len(), 20);
    }

    #[test]
    fn zero_rewind_snapshot_is_initialization() {
        let model = GroupedModel::init(&small_spec(), 5).unwrap();
        let mask = MaskState::ones_for(&model);
        let cfg = TrainConfig {
            epochs: 2,
            rewind_fraction: 0.0,
            ..TrainConfig::default()
        };
        let out = train(&model, &mask, &blobs(), &cfg).unwrap();
        assert_eq!(out.snapshot, model);
        assert_ne!(out.trained, model);
    }

    #[test]
    fn full_rewind_snapshot_is_final_state() {
        let model = GroupedModel::init(&small_spec(), 5).unwrap();
        let mask = MaskState::ones_for(&model);
        let cfg = TrainConfig {
            epochs: 2,
            rewind_fraction: 1.0,
            ..TrainConfig::default()
        };
        let out = train(&model, &mask, &blobs(), &cfg).unwrap();
        assert_eq!(out.snapshot, out.trained);
    }

    #[test]
    fn pruned_coordinates_stay_zero() {
        let model = GroupedModel::init(&small_spec(), 6).unwrap();
        let mut mask = MaskState::ones_for(&model);
        for (g, bits) in mask.bits.iter_mut().enumerate() {
            for (j, b) in bits.iter_mut().enumerate() {
                *b = (j + g) % 3 != 0;
            }
        }
        let out = train(&model, &mask, &blobs(), &TrainConfig::default()).unwrap();
        for (gi, group) in out.trained.groups.iter().enumerate() {
            for (j, &w) in group.weights.data().iter().enumerate() {
                if !mask.bits[gi][j] {
                    assert_eq!(w, 0.0);
                    assert_eq!(out.snapshot.groups[gi].weights.data()[j], 0.0);
                }
            }
        }
    }

    #[test]
    fn divergence_reports_epoch() {
        let model = GroupedModel::init(&small_spec(), 1).unwrap();
        let mask = MaskState::ones_for(&model);
        let data = gen_blobs(64, &[vec![-1e3, 0.0], vec![1e3, 0.0]], 0.0, 0).unwrap();
        let cfg = TrainConfig {
            epochs: 50,
            learning_rate: 1e6,
            momentum: 0.0,
            ..TrainConfig::default()
        };
        match train(&model, &mask, &data, &cfg) {
            Err(Error::Divergence { epoch, .. }) => assert!(epoch < 50),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn evaluate_counts_errors() {
        // 1-hidden-layer identity net: class = argmax of relu(x) passed straight through.
        let spec = NetworkSpec::new(
            2,
            2,
            vec![StageSpec { block_count: 0, width: 2 }],
            Activation::Relu,
        )
        .unwrap();
        let mut model = GroupedModel::init(&spec, 0).unwrap();
        for g in &mut model.groups {
            g.weights.data_mut().copy_from_slice(&[1.0, 0.0, 0.0, 1.0]);
        }
        let mask = MaskState::ones_for(&model);
        let features = Tensor2::from_rows(&[vec![2.0, 0.0], vec![0.0, 2.0], vec![3.0, 1.0]]).unwrap();
        let all_right = Dataset::new(features.clone(), vec![0, 1, 0], 2).unwrap();
        assert_eq!(evaluate(&model, &mask, &all_right).unwrap(), 0.0);
        let one_wrong = Dataset::new(features, vec![0, 1, 1], 2).unwrap();
        assert!((evaluate(&model, &mask, &one_wrong).unwrap() - 100.0 / 3.0).abs() < 1e-12);

        // Zero weights: every logit is 0 -> constant class 0.
        let mut constant = model.clone();
        for g in &mut constant.groups {
            g.weights.data_mut().fill(0.0);
        }
        let balanced = Dataset::new(
            Tensor2::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0], vec![2.0, 0.0]])
                .unwrap(),
            vec![0, 1, 0, 1],
            2,
        )
        .unwrap();
        assert_eq!(evaluate(&constant, &mask, &balanced).unwrap(), 50.0);
    }
}
