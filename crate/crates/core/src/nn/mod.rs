//! Residual multilayer perceptrons whose weights are partitioned into named
//! groups, plus the pruning mask that rides alongside them.
//!
//! Group layout, in order:
//!
//! - `input`: dense `input_dim -> stages[0].width`, followed by the activation
//! - `stage{s}.proj`: dense width change between stages (only when widths differ)
//! - `stage{s}.block{b}`: residual block `h' = act(h + W2 act(W1 h + b1) + b2)`;
//!   `W1` and `W2` are stacked into one `(2w, w)` weight tensor, `W1` on top
//! - `output`: dense `width -> output_dim`, producing logits
//!
//! Biases are trainable but are never pruned and never counted in `N`.

mod backprop;
mod train;

use rand::distr::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor2;

pub use backprop::{forward, loss_and_grad, Gradients};
pub use train::{evaluate, train, TrainConfig, TrainOutcome};
pub(crate) use train::train_from_step;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    #[inline]
    pub(crate) fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
        }
    }

    /// Derivative expressed through the pre-activation `z` and output `a`.
    #[inline]
    pub(crate) fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - a * a,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSpec {
    pub block_count: usize,
    pub width: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub input_dim: usize,
    pub output_dim: usize,
    pub stages: Vec<StageSpec>,
    pub activation: Activation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GroupKind {
    Input,
    Projection,
    Block,
    Output,
}

/// Name and weight shape of one parameter group.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupDescriptor {
    pub name: String,
    pub kind: GroupKind,
    pub rows: usize,
    pub cols: usize,
}

impl GroupDescriptor {
    pub fn weight_count(&self) -> usize {
        self.rows * self.cols
    }

    pub fn bias_len(&self) -> usize {
        self.rows
    }
}

impl NetworkSpec {
    pub fn new(
        input_dim: usize,
        output_dim: usize,
        stages: Vec<StageSpec>,
        activation: Activation,
    ) -> Result<Self> {
        let spec = NetworkSpec {
            input_dim,
            output_dim,
            stages,
            activation,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 {
            return Err(Error::Argument(
                "input_dim and output_dim must be at least 1".into(),
            ));
        }
        if self.stages.is_empty() {
            return Err(Error::Argument("network needs at least one stage".into()));
        }
        if let Some(i) = self.stages.iter().position(|s| s.width == 0) {
            return Err(Error::Argument(format!("stage {i} has zero width")));
        }
        Ok(())
    }

    /// Deterministic group list derived from the spec.
    pub fn groups(&self) -> Vec<GroupDescriptor> {
        let mut out = Vec::new();
        let first = self.stages[0].width;
        out.push(GroupDescriptor {
            name: "input".into(),
            kind: GroupKind::Input,
            rows: first,
            cols: self.input_dim,
        });
        let mut width = first;
        for (s, stage) in self.stages.iter().enumerate() {
            if stage.width != width {
                out.push(GroupDescriptor {
                    name: format!("stage{s}.proj"),
                    kind: GroupKind::Projection,
                    rows: stage.width,
                    cols: width,
                });
                width = stage.width;
            }
            for b in 0..stage.block_count {
                out.push(GroupDescriptor {
                    name: format!("stage{s}.block{b}"),
                    kind: GroupKind::Block,
                    rows: 2 * width,
                    cols: width,
                });
            }
        }
        out.push(GroupDescriptor {
            name: "output".into(),
            kind: GroupKind::Output,
            rows: self.output_dim,
            cols: width,
        });
        out
    }

    /// Total prunable parameter count `N`.
    pub fn prunable_count(&self) -> usize {
        self.groups().iter().map(GroupDescriptor::weight_count).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamGroup {
    pub name: String,
    pub weights: Tensor2,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupedModel {
    spec: NetworkSpec,
    descriptors: Vec<GroupDescriptor>,
    pub groups: Vec<ParamGroup>,
    rng_seed: u64,
}

impl GroupedModel {
    /// Glorot-uniform weights drawn from a ChaCha stream seeded by `seed`,
    /// zero biases.
    pub fn init(spec: &NetworkSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let descriptors = spec.groups();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let groups = descriptors
            .iter()
            .map(|d| {
                // Blocks hold two square matrices; fan-in and fan-out are both `cols`.
                let fan_out = if d.kind == GroupKind::Block {
                    d.cols
                } else {
                    d.rows
                };
                let limit = (6.0 / (d.cols + fan_out) as f64).sqrt();
                let dist = Uniform::new_inclusive(-limit, limit).expect("finite bounds");
                let data = (0..d.weight_count()).map(|_| dist.sample(&mut rng)).collect();
                ParamGroup {
                    name: d.name.clone(),
                    weights: Tensor2::from_vec(d.rows, d.cols, data).expect("shape"),
                    bias: vec![0.0; d.bias_len()],
                }
            })
            .collect();
        Ok(GroupedModel {
            spec: spec.clone(),
            descriptors,
            groups,
            rng_seed: seed,
        })
    }

    /// Assembles a model from explicit parameters; shapes must match the spec.
    pub fn from_groups(spec: &NetworkSpec, groups: Vec<ParamGroup>, rng_seed: u64) -> Result<Self> {
        spec.validate()?;
        let descriptors = spec.groups();
        if groups.len() != descriptors.len() {
            return Err(Error::Dimension(format!(
                "spec defines {} groups, got {}",
                descriptors.len(),
                groups.len()
            )));
        }
        for (d, g) in descriptors.iter().zip(&groups) {
            if g.weights.shape() != (d.rows, d.cols) || g.bias.len() != d.bias_len() {
                return Err(Error::Dimension(format!(
                    "group `{}` expects weights {}x{} and {} biases, got {}x{} and {}",
                    d.name,
                    d.rows,
                    d.cols,
                    d.bias_len(),
                    g.weights.rows(),
                    g.weights.cols(),
                    g.bias.len()
                )));
            }
            if g.name != d.name {
                return Err(Error::Argument(format!(
                    "group name `{}` does not match spec name `{}`",
                    g.name, d.name
                )));
            }
        }
        Ok(GroupedModel {
            spec: spec.clone(),
            descriptors,
            groups,
            rng_seed,
        })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn descriptors(&self) -> &[GroupDescriptor] {
        &self.descriptors
    }

    pub fn rng_seed(&self) -> u64 {
        self.rng_seed
    }

    pub fn prunable_count(&self) -> usize {
        self.groups.iter().map(|g| g.weights.len()).sum()
    }

    pub fn weights(&self) -> Vec<Tensor2> {
        self.groups.iter().map(|g| g.weights.clone()).collect()
    }

    /// Zeroes every pruned weight in place.
    pub fn apply_mask(&mut self, mask: &MaskState) {
        for (g, bits) in self.groups.iter_mut().zip(&mask.bits) {
            for (w, &keep) in g.weights.data_mut().iter_mut().zip(bits) {
                if !keep {
                    *w = 0.0;
                }
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.groups
            .iter()
            .all(|g| g.weights.all_finite() && g.bias.iter().all(|b| b.is_finite()))
    }
}

/// One bit per weight-matrix element; `true` = kept.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskState {
    pub bits: Vec<Vec<bool>>,
}

impl MaskState {
    pub fn ones_for(model: &GroupedModel) -> Self {
        MaskState {
            bits: model.groups.iter().map(|g| vec![true; g.weights.len()]).collect(),
        }
    }

    pub fn zeros_for(model: &GroupedModel) -> Self {
        MaskState {
            bits: model.groups.iter().map(|g| vec![false; g.weights.len()]).collect(),
        }
    }

    pub fn kept_in(&self, group: usize) -> usize {
        self.bits[group].iter().filter(|&&b| b).count()
    }

    pub fn kept_per_group(&self) -> Vec<usize> {
        (0..self.bits.len()).map(|g| self.kept_in(g)).collect()
    }

    pub fn kept_total(&self) -> usize {
        self.bits.iter().flatten().filter(|&&b| b).count()
    }

    pub fn total(&self) -> usize {
        self.bits.iter().map(Vec::len).sum()
    }

    pub fn density(&self) -> f64 {
        self.kept_total() as f64 / self.total() as f64
    }

    /// True when every bit kept here is also kept in `previous`.
    pub fn is_subset_of(&self, previous: &MaskState) -> bool {
        self.bits.len() == previous.bits.len()
            && self.bits.iter().zip(&previous.bits).all(|(now, before)| {
                now.len() == before.len() && now.iter().zip(before).all(|(&n, &b)| !n || b)
            })
    }

    pub(crate) fn check_matches(&self, model: &GroupedModel) -> Result<()> {
        if self.bits.len() != model.groups.len() {
            return Err(Error::Dimension(format!(
                "mask has {} groups, model has {}",
                self.bits.len(),
                model.groups.len()
            )));
        }
        for (bits, g) in self.bits.iter().zip(&model.groups) {
            if bits.len() != g.weights.len() {
                return Err(Error::Dimension(format!(
                    "mask for `{}` has {} bits, group has {} weights",
                    g.name,
                    bits.len(),
                    g.weights.len()
                )));
            }
        }
        Ok(())
    }
}
