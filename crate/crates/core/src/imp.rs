//! Iterative magnitude pruning: prune the smallest kept weights, then refine
//! (rewind + retrain, or fine-tune), and repeat.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::{evaluate, train, train_from_step, GroupedModel, MaskState, NetworkSpec, TrainConfig};
use crate::trajectory::{GroupEntry, ImpTrajectory, RoundRecord, RunManifest, Seeds};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "x", rename_all = "snake_case")]
pub enum PruneMode {
    /// Remove `floor(x * kept)` weights per round.
    FractionOfRemaining(f64),
    /// Remove `floor(x0 * N)` weights per round, `N` the original count.
    FractionOfOriginal(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PruneScope {
    #[default]
    Global,
    PerGroup,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PruneSchedule {
    pub mode: PruneMode,
    pub scope: PruneScope,
    pub rounds: usize,
}

impl PruneSchedule {
    pub fn validate(&self) -> Result<()> {
        let x = match self.mode {
            PruneMode::FractionOfRemaining(x) | PruneMode::FractionOfOriginal(x) => x,
        };
        if !(x > 0.0 && x < 1.0) {
            return Err(Error::Argument(format!("pruning fraction {x} outside (0, 1)")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RefinePolicy {
    #[default]
    Rewind,
    Finetune,
}

/// Knobs of a run that are not part of training or the pruning schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct ImpOptions {
    pub model_name: String,
    pub init_seed: u64,
    pub split_seed: u64,
    /// Fraction of the dataset held out for `eval_error`. Zero evaluates on
    /// the training data.
    pub holdout_fraction: f64,
    pub policy: RefinePolicy,
}

impl Default for ImpOptions {
    fn default() -> Self {
        ImpOptions {
            model_name: "residual-mlp".into(),
            init_seed: 0,
            split_seed: 0,
            holdout_fraction: 0.25,
            policy: RefinePolicy::Rewind,
        }
    }
}

/// `floor(x * n)`, nudged so that products like `0.2 * 640` that land a hair
/// below an integer in binary still count as that integer.
fn floor_count(x: f64, n: usize) -> usize {
    (x * n as f64 + 1e-9).floor() as usize
}

/// Clears the `count` smallest-magnitude kept entries among `candidates`,
/// given as `(group, index)` pairs in ascending flat-index order.
fn prune_smallest(model: &GroupedModel, mask: &mut MaskState, mut candidates: Vec<(usize, usize)>, count: usize) {
    let magnitude = |&(g, j): &(usize, usize)| model.groups[g].weights.data()[j].abs();
    // stable sort keeps ascending flat index among equal magnitudes
    candidates.sort_by(|a, b| magnitude(a).total_cmp(&magnitude(b)));
    for &(g, j) in candidates.iter().take(count) {
        mask.bits[g][j] = false;
    }
}

fn kept_positions(mask: &MaskState, group: usize) -> impl Iterator<Item = (usize, usize)> + '_ {
    mask.bits[group]
        .iter()
        .enumerate()
        .filter(|(_, &keep)| keep)
        .map(move |(j, _)| (group, j))
}

fn check_no_empty_group(model: &GroupedModel, mask: &MaskState) -> Result<()> {
    for (g, group) in model.groups.iter().enumerate() {
        if mask.kept_in(g) == 0 {
            return Err(Error::LayerCollapse {
                group: group.name.clone(),
            });
        }
    }
    Ok(())
}

/// One magnitude-pruning step. Ties in `|w|` are broken by ascending flat
/// index (group order, then row-major). `round_index` is the round being
/// produced (1 for the first pruning).
pub fn prune_step(
    model: &GroupedModel,
    mask: &MaskState,
    schedule: &PruneSchedule,
    round_index: usize,
) -> Result<MaskState> {
    schedule.validate()?;
    mask.check_matches(model)?;
    check_no_empty_group(model, mask)?;
    if round_index == 0 {
        return Err(Error::Argument("round 0 is the dense model; pruning starts at round 1".into()));
    }

    let mut next = mask.clone();
    let groups = model.groups.len();
    match schedule.scope {
        PruneScope::Global => {
            let kept = mask.kept_total();
            let count = match schedule.mode {
                PruneMode::FractionOfRemaining(x) => floor_count(x, kept),
                PruneMode::FractionOfOriginal(x0) => {
                    let target = mask.total().saturating_sub(round_index * floor_count(x0, mask.total()));
                    kept.saturating_sub(target)
                }
            };
            let candidates = (0..groups).flat_map(|g| kept_positions(mask, g)).collect();
            prune_smallest(model, &mut next, candidates, count);
        }
        PruneScope::PerGroup => {
            for g in 0..groups {
                let kept = mask.kept_in(g);
                let count = match schedule.mode {
                    PruneMode::FractionOfRemaining(x) => floor_count(x, kept),
                    PruneMode::FractionOfOriginal(x0) => {
                        let size = mask.bits[g].len();
                        kept.saturating_sub(size.saturating_sub(round_index * floor_count(x0, size)))
                    }
                };
                prune_smallest(model, &mut next, kept_positions(mask, g).collect(), count);
            }
        }
    }
    check_no_empty_group(model, &next)?;
    Ok(next)
}

/// Global prune down to exactly `target_kept` weights.
pub fn prune_to_count(model: &GroupedModel, mask: &MaskState, target_kept: usize) -> Result<MaskState> {
    mask.check_matches(model)?;
    let kept = mask.kept_total();
    let mut next = mask.clone();
    let candidates = (0..model.groups.len()).flat_map(|g| kept_positions(mask, g)).collect();
    prune_smallest(model, &mut next, candidates, kept.saturating_sub(target_kept));
    check_no_empty_group(model, &next)?;
    Ok(next)
}

/// The refinement half of an IMP round.
///
/// `Rewind` resets to `snapshot` (masked) and replays the training schedule
/// from the rewind step to the end. `Finetune` runs the full schedule again
/// from the current weights.
pub fn refine(
    model: &GroupedModel,
    mask: &MaskState,
    snapshot: &GroupedModel,
    data: &Dataset,
    config: &TrainConfig,
    policy: RefinePolicy,
) -> Result<GroupedModel> {
    let same_shape = snapshot.groups.len() == model.groups.len()
        && snapshot
            .groups
            .iter()
            .zip(&model.groups)
            .all(|(a, b)| a.weights.same_shape(&b.weights) && a.bias.len() == b.bias.len());
    if !same_shape {
        return Err(Error::Dimension("snapshot shapes do not match the model".into()));
    }
    let (trained, _, _) = match policy {
        RefinePolicy::Rewind => {
            let start = config.rewind_step(data.len());
            train_from_step(snapshot, mask, data, config, start)?
        }
        RefinePolicy::Finetune => train_from_step(model, mask, data, config, 0)?,
    };
    Ok(trained)
}

struct Run<'a> {
    train_set: Dataset,
    eval_set: Dataset,
    config: &'a TrainConfig,
    policy: RefinePolicy,
}

impl Run<'_> {
    fn record(&self, round_index: usize, model: &GroupedModel, mask: &MaskState, x_n: f64) -> Result<RoundRecord> {
        Ok(RoundRecord {
            round_index,
            mask: mask.clone(),
            weights: model.weights(),
            density: mask.density(),
            x_n,
            eval_error: evaluate(model, mask, &self.eval_set)?,
        })
    }
}

fn start_run<'a>(
    spec: &NetworkSpec,
    dataset: &Dataset,
    config: &'a TrainConfig,
    options: &ImpOptions,
) -> Result<(Run<'a>, GroupedModel, GroupedModel, RunManifest)> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::Argument("dataset is empty".into()));
    }
    let (train_set, test_set) = dataset.split(options.holdout_fraction, options.split_seed)?;
    let eval_set = if test_set.is_empty() { train_set.clone() } else { test_set };
    let model = GroupedModel::init(spec, options.init_seed)?;
    let dense = train(&model, &MaskState::ones_for(&model), &train_set, config)?;
    let manifest = RunManifest {
        model_name: options.model_name.clone(),
        groups: model
            .descriptors()
            .iter()
            .map(|d| GroupEntry {
                name: d.name.clone(),
                rows: d.rows,
                cols: d.cols,
                prunable: true,
            })
            .collect(),
        network: Some(spec.clone()),
        schedule: None,
        oneshot_target_density: None,
        train: Some(*config),
        refine_policy: Some(options.policy),
        holdout_fraction: options.holdout_fraction,
        seeds: Seeds {
            init: options.init_seed,
            train: config.seed,
            split: options.split_seed,
        },
        truncated: false,
        notes: Vec::new(),
    };
    let run = Run {
        train_set,
        eval_set,
        config,
        policy: options.policy,
    };
    Ok((run, dense.trained, dense.snapshot, manifest))
}

/// Trains the dense model, then alternates `prune_step` and `refine` for
/// `schedule.rounds` rounds. A layer collapse ends the trajectory early and
/// sets `manifest.truncated`.
pub fn run_imp(
    spec: &NetworkSpec,
    dataset: &Dataset,
    config: &TrainConfig,
    schedule: &PruneSchedule,
    options: &ImpOptions,
) -> Result<ImpTrajectory> {
    schedule.validate()?;
    if schedule.rounds == 0 {
        return Err(Error::Argument("schedule needs at least one round".into()));
    }
    let (run, mut current, snapshot, mut manifest) = start_run(spec, dataset, config, options)?;
    manifest.schedule = Some(*schedule);

    let mut mask = MaskState::ones_for(&current);
    let mut rounds = vec![run.record(0, &current, &mask, 0.0)?];
    for r in 1..=schedule.rounds {
        let next = match prune_step(&current, &mask, schedule, r) {
            Ok(m) => m,
            Err(Error::LayerCollapse { group }) => {
                manifest.truncated = true;
                manifest
                    .notes
                    .push(format!("layer collapse of `{group}` at round {r}; trajectory truncated"));
                break;
            }
            Err(e) => return Err(e),
        };
        let x_n = 1.0 - next.kept_total() as f64 / mask.kept_total() as f64;
        current = refine(&current, &next, &snapshot, &run.train_set, run.config, run.policy)?;
        mask = next;
        rounds.push(run.record(r, &current, &mask, x_n)?);
    }
    Ok(ImpTrajectory { manifest, rounds })
}

/// A single large pruning round to `floor(target_density * N)` kept weights.
pub fn run_oneshot(
    spec: &NetworkSpec,
    dataset: &Dataset,
    config: &TrainConfig,
    target_density: f64,
    options: &ImpOptions,
) -> Result<ImpTrajectory> {
    if !(target_density > 0.0 && target_density < 1.0) {
        return Err(Error::Argument(format!(
            "target density {target_density} outside (0, 1)"
        )));
    }
    let (run, dense, snapshot, mut manifest) = start_run(spec, dataset, config, options)?;
    manifest.oneshot_target_density = Some(target_density);
    manifest.schedule = Some(PruneSchedule {
        mode: PruneMode::FractionOfRemaining(1.0 - target_density),
        scope: PruneScope::Global,
        rounds: 1,
    });

    let ones = MaskState::ones_for(&dense);
    let mut rounds = vec![run.record(0, &dense, &ones, 0.0)?];
    let target = floor_count(target_density, ones.total());
    match prune_to_count(&dense, &ones, target) {
        Ok(mask) => {
            let x_n = 1.0 - mask.kept_total() as f64 / ones.kept_total() as f64;
            let refined = refine(&dense, &mask, &snapshot, &run.train_set, run.config, run.policy)?;
            rounds.push(run.record(1, &refined, &mask, x_n)?);
        }
        Err(Error::LayerCollapse { group }) => {
            manifest.truncated = true;
            manifest
                .notes
                .push(format!("layer collapse of `{group}` at round 1; trajectory truncated"));
        }
        Err(e) => return Err(e),
    }
    Ok(ImpTrajectory { manifest, rounds })
}
