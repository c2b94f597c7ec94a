//! Analysis of pruning trajectories as a flow on per-group observables.
//!
//! For each parameter group `i` and round `n`:
//!
//! - `M[i][n]`: share of the total kept weight magnitude held by group `i`
//! - `P[i][n]`: share of the kept weight count held by group `i`
//!
//! Each transition `n -> n+1` with sparsification `x_n` has coarse-graining
//! factor `c_n = 1/(1 - x_n)`. The per-transition exponent is
//! `sigma_n = ln(M[n+1]/M[n]) / ln(c_n)`, which does not depend on how hard
//! a round pruned. Groups are labelled by the sign of the mean exponent.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trajectory::ImpTrajectory;

/// Observables matrices are indexed `[group][round]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowObservables {
    pub group_names: Vec<String>,
    pub m: Vec<Vec<f64>>,
    pub p: Vec<Vec<f64>>,
    pub densities: Vec<f64>,
    /// One entry per transition (`rounds - 1` entries).
    pub x_schedule: Vec<f64>,
}

impl FlowObservables {
    pub fn new(
        group_names: Vec<String>,
        m: Vec<Vec<f64>>,
        p: Vec<Vec<f64>>,
        densities: Vec<f64>,
        x_schedule: Vec<f64>,
    ) -> Result<Self> {
        let rounds = densities.len();
        if rounds == 0 {
            return Err(Error::Argument("observables need at least one round".into()));
        }
        if m.len() != group_names.len() || p.len() != group_names.len() {
            return Err(Error::Dimension(format!(
                "{} group names but {} M rows and {} P rows",
                group_names.len(),
                m.len(),
                p.len()
            )));
        }
        if m.iter().chain(&p).any(|row| row.len() != rounds) {
            return Err(Error::Dimension(format!("every observable row needs {rounds} rounds")));
        }
        if x_schedule.len() + 1 != rounds {
            return Err(Error::Dimension(format!(
                "{} rounds need {} transition fractions, got {}",
                rounds,
                rounds - 1,
                x_schedule.len()
            )));
        }
        let unique: BTreeSet<&String> = group_names.iter().collect();
        if unique.len() != group_names.len() {
            return Err(Error::Argument("group names must be unique".into()));
        }
        if m.iter().chain(&p).flatten().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Domain("observables must be finite and non-negative".into()));
        }
        Ok(FlowObservables {
            group_names,
            m,
            p,
            densities,
            x_schedule,
        })
    }

    /// Builds observables from per-group sums: `magnitude[g][n]` is the kept
    /// weight magnitude and `kept[g][n]` the kept count of group `g` at round `n`.
    pub fn from_sums(
        group_names: Vec<String>,
        magnitude: &[Vec<f64>],
        kept: &[Vec<usize>],
        total_weights: usize,
        x_schedule: Option<Vec<f64>>,
    ) -> Result<Self> {
        let rounds = magnitude.first().map_or(0, Vec::len);
        if rounds == 0 || kept.len() != magnitude.len() {
            return Err(Error::Dimension("magnitude and count tables disagree".into()));
        }
        let mag_total: Vec<f64> = (0..rounds).map(|n| magnitude.iter().map(|row| row[n]).sum()).collect();
        let kept_total: Vec<usize> = (0..rounds).map(|n| kept.iter().map(|row| row[n]).sum()).collect();
        if let Some(n) = kept_total.iter().position(|&k| k == 0) {
            return Err(Error::Domain(format!("round {n} has no kept weights")));
        }
        if let Some(n) = mag_total.iter().position(|&s| !(s > 0.0)) {
            return Err(Error::Domain(format!("round {n} has zero total magnitude")));
        }
        let m = magnitude
            .iter()
            .map(|row| row.iter().zip(&mag_total).map(|(v, s)| v / s).collect())
            .collect();
        let p = kept
            .iter()
            .map(|row| {
                row.iter()
                    .zip(&kept_total)
                    .map(|(&k, &t)| k as f64 / t as f64)
                    .collect()
            })
            .collect();
        let densities = kept_total.iter().map(|&k| k as f64 / total_weights as f64).collect();
        let x = x_schedule.unwrap_or_else(|| {
            kept_total
                .windows(2)
                .map(|w| 1.0 - w[1] as f64 / w[0] as f64)
                .collect()
        });
        FlowObservables::new(group_names, m, p, densities, x)
    }

    pub fn round_count(&self) -> usize {
        self.densities.len()
    }

    pub fn group_index(&self, name: &str) -> Option<usize> {
        self.group_names.iter().position(|g| g == name)
    }

    /// Largest deviation from 1 of the per-round column sums of `M` and `P`.
    pub fn conservation_error(&self) -> (f64, f64) {
        let worst = |rows: &[Vec<f64>]| {
            (0..self.round_count())
                .map(|n| (rows.iter().map(|r| r[n]).sum::<f64>() - 1.0).abs())
                .fold(0.0, f64::max)
        };
        (worst(&self.m), worst(&self.p))
    }

    /// Drops the named groups from the analysis. Shares of the remaining groups
    /// are left as they were (still relative to the whole network).
    pub fn exclude(&self, names: &[String]) -> Result<FlowObservables> {
        for n in names {
            if self.group_index(n).is_none() {
                return Err(Error::Argument(format!("unknown group `{n}`")));
            }
        }
        let keep: Vec<usize> = (0..self.group_names.len())
            .filter(|&i| !names.contains(&self.group_names[i]))
            .collect();
        Ok(FlowObservables {
            group_names: keep.iter().map(|&i| self.group_names[i].clone()).collect(),
            m: keep.iter().map(|&i| self.m[i].clone()).collect(),
            p: keep.iter().map(|&i| self.p[i].clone()).collect(),
            densities: self.densities.clone(),
            x_schedule: self.x_schedule.clone(),
        })
    }
}

/// `M` and `P` for every round of a trajectory; weights outside the mask are ignored.
pub fn compute_observables(trajectory: &ImpTrajectory) -> Result<FlowObservables> {
    if trajectory.rounds.len() < 2 {
        return Err(Error::Argument(format!(
            "trajectory has {} rounds; flow analysis needs at least 2",
            trajectory.rounds.len()
        )));
    }
    let groups = trajectory.manifest.groups.len();
    let rounds = trajectory.rounds.len();
    let mut magnitude = vec![vec![0.0; rounds]; groups];
    let mut kept = vec![vec![0usize; rounds]; groups];
    for (n, record) in trajectory.rounds.iter().enumerate() {
        if record.weights.len() != groups || record.mask.bits.len() != groups {
            return Err(Error::Dimension(format!(
                "round {n} does not have {groups} groups"
            )));
        }
        for g in 0..groups {
            let bits = &record.mask.bits[g];
            let w = record.weights[g].data();
            if bits.len() != w.len() {
                return Err(Error::Dimension(format!("round {n}, group {g}: mask/weight size mismatch")));
            }
            let mut sum = 0.0;
            let mut count = 0;
            for (&keep, &v) in bits.iter().zip(w) {
                if keep {
                    sum += v.abs();
                    count += 1;
                }
            }
            magnitude[g][n] = sum;
            kept[g][n] = count;
        }
    }
    let total = trajectory.rounds[0].mask.total();
    FlowObservables::from_sums(
        trajectory.manifest.group_names(),
        &magnitude,
        &kept,
        total,
        Some(trajectory.transition_x()),
    )
    .map(|mut obs| {
        obs.densities = trajectory.densities();
        obs
    })
}

/// Per-transition coarse-graining factors `c = 1/(1 - x)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoarseGrainSchedule {
    pub c: Vec<f64>,
}

pub fn coarse_grain_factor(x: f64) -> Result<f64> {
    if !(x > 0.0 && x < 1.0) {
        return Err(Error::Domain(format!("sparsification fraction {x} outside (0, 1)")));
    }
    Ok(1.0 / (1.0 - x))
}

pub fn compute_c_schedule(x_schedule: &[f64]) -> Result<CoarseGrainSchedule> {
    let c = x_schedule
        .iter()
        .map(|&x| coarse_grain_factor(x))
        .collect::<Result<_>>()?;
    Ok(CoarseGrainSchedule { c })
}

/// `x(n) = 1/(10 - n)`: per-transition fractions when a tenth of the
/// original weights is removed every round.
pub fn tenth_of_original_schedule(transitions: usize) -> Vec<f64> {
    (0..transitions).map(|n| 1.0 / (10.0 - n as f64)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Relevance {
    Relevant,
    Marginal,
    Irrelevant,
    Undefined,
}

impl Relevance {
    pub fn from_sigma(sigma: Option<f64>, band: f64) -> Self {
        match sigma {
            None => Relevance::Undefined,
            Some(s) if s > band => Relevance::Relevant,
            Some(s) if s < -band => Relevance::Irrelevant,
            Some(_) => Relevance::Marginal,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Relevance::Relevant => "relevant",
            Relevance::Marginal => "marginal",
            Relevance::Irrelevant => "irrelevant",
            Relevance::Undefined => "undefined",
        }
    }
}

/// Which observable the exponents were computed from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Observable {
    #[default]
    Magnitude,
    Count,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupEigen {
    pub name: String,
    pub lambda_mean: Option<f64>,
    pub lambda_sem: Option<f64>,
    pub sigma_mean: Option<f64>,
    pub sigma_sem: Option<f64>,
    pub label: Relevance,
    pub valid_transitions: usize,
    /// Per-transition exponents; excluded transitions are skipped.
    pub sigma_samples: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EigenReport {
    pub observable: Observable,
    pub marginal_band: f64,
    pub c_schedule: CoarseGrainSchedule,
    pub groups: Vec<GroupEigen>,
}

impl EigenReport {
    /// A report holding only mean exponents, e.g. values transcribed from
    /// published tables.
    pub fn from_sigmas(names: &[&str], sigmas: &[f64], band: f64) -> Result<Self> {
        if names.len() != sigmas.len() {
            return Err(Error::Dimension("one sigma per group name".into()));
        }
        let groups = names
            .iter()
            .zip(sigmas)
            .map(|(name, &s)| GroupEigen {
                name: (*name).to_owned(),
                lambda_mean: None,
                lambda_sem: None,
                sigma_mean: Some(s),
                sigma_sem: None,
                label: Relevance::from_sigma(Some(s), band),
                valid_transitions: 1,
                sigma_samples: vec![s],
            })
            .collect();
        Ok(EigenReport {
            observable: Observable::Magnitude,
            marginal_band: band,
            c_schedule: CoarseGrainSchedule { c: Vec::new() },
            groups,
        })
    }

    pub fn sigma_means(&self) -> Vec<Option<f64>> {
        self.groups.iter().map(|g| g.sigma_mean).collect()
    }

    pub fn labels(&self) -> Vec<Relevance> {
        self.groups.iter().map(|g| g.label).collect()
    }

    pub fn group(&self, name: &str) -> Option<&GroupEigen> {
        self.groups.iter().find(|g| g.name == name)
    }
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Standard error of the mean (sample standard deviation over `sqrt(n)`);
/// undefined for fewer than two samples.
pub fn standard_error(v: &[f64]) -> Option<f64> {
    if v.len() < 2 {
        return None;
    }
    let m = mean(v)?;
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() - 1) as f64;
    Some((var / v.len() as f64).sqrt())
}

/// Eigenvalue and exponent estimates from the magnitude shares `M`.
pub fn estimate_eigen(obs: &FlowObservables, c_schedule: &CoarseGrainSchedule, band: f64) -> Result<EigenReport> {
    estimate_eigen_for(obs, Observable::Magnitude, c_schedule, band)
}

pub fn estimate_eigen_for(
    obs: &FlowObservables,
    observable: Observable,
    c_schedule: &CoarseGrainSchedule,
    band: f64,
) -> Result<EigenReport> {
    if obs.round_count() < 2 {
        return Err(Error::Argument("eigen estimation needs at least 2 rounds".into()));
    }
    if !(band >= 0.0 && band.is_finite()) {
        return Err(Error::Argument(format!("marginal band {band} must be non-negative")));
    }
    if c_schedule.c.len() + 1 != obs.round_count() {
        return Err(Error::Dimension(format!(
            "{} rounds need {} coarse-graining factors, got {}",
            obs.round_count(),
            obs.round_count() - 1,
            c_schedule.c.len()
        )));
    }
    if let Some(c) = c_schedule.c.iter().find(|&&c| !(c > 1.0 && c.is_finite())) {
        return Err(Error::Domain(format!("coarse-graining factor {c} must exceed 1")));
    }
    let rows = match observable {
        Observable::Magnitude => &obs.m,
        Observable::Count => &obs.p,
    };
    let groups = obs
        .group_names
        .iter()
        .zip(rows)
        .map(|(name, row)| {
            let mut lambdas = Vec::new();
            let mut sigmas = Vec::new();
            for (n, &c) in c_schedule.c.iter().enumerate() {
                let (now, next) = (row[n], row[n + 1]);
                if now == 0.0 || next == 0.0 {
                    continue;
                }
                let lambda = next / now;
                lambdas.push(lambda);
                sigmas.push(lambda.ln() / c.ln());
            }
            let sigma_mean = mean(&sigmas);
            GroupEigen {
                name: name.clone(),
                lambda_mean: mean(&lambdas),
                lambda_sem: standard_error(&lambdas),
                sigma_mean,
                sigma_sem: standard_error(&sigmas),
                label: Relevance::from_sigma(sigma_mean, band),
                valid_transitions: sigmas.len(),
                sigma_samples: sigmas,
            }
        })
        .collect();
    Ok(EigenReport {
        observable,
        marginal_band: band,
        c_schedule: c_schedule.clone(),
        groups,
    })
}

/// Labels from the report's mean exponents and its marginal band.
pub fn classify(report: &EigenReport) -> Vec<Relevance> {
    report
        .groups
        .iter()
        .map(|g| {
            if g.valid_transitions == 0 {
                Relevance::Undefined
            } else {
                Relevance::from_sigma(g.sigma_mean, report.marginal_band)
            }
        })
        .collect()
}

/// Labels keyed by group name; independent of group order.
pub fn classify_by_name(report: &EigenReport) -> HashMap<String, Relevance> {
    report
        .groups
        .iter()
        .map(|g| g.name.clone())
        .zip(classify(report))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Alignment {
    #[default]
    Name,
    Position,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    SameClass,
    DifferentClass,
    Inconclusive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedLabel {
    pub group_a: String,
    pub group_b: String,
    pub label_a: Relevance,
    pub label_b: Relevance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonVerdict {
    pub sign_agreement: f64,
    pub per_group_labels: Vec<PairedLabel>,
    pub sigma_l2_distance: f64,
    pub sigma_linf_distance: f64,
    pub verdict: Verdict,
}

/// Compares the relevance pattern of two runs.
///
/// Only signs decide the verdict: groups where either side is marginal do
/// not count against agreement, a relevant/irrelevant flip gives
/// `DifferentClass`, and any undefined group (or nothing but marginal
/// groups) gives `Inconclusive`. Distances use groups defined on both sides.
pub fn compare_flows(a: &EigenReport, b: &EigenReport, align: Alignment) -> Result<ComparisonVerdict> {
    if a.groups.len() != b.groups.len() {
        return Err(Error::Argument(format!(
            "group counts differ: {} vs {}",
            a.groups.len(),
            b.groups.len()
        )));
    }
    let labels_a = classify(a);
    let labels_b = classify(b);
    let pairs: Vec<(usize, usize)> = match align {
        Alignment::Position => (0..a.groups.len()).map(|i| (i, i)).collect(),
        Alignment::Name => a
            .groups
            .iter()
            .enumerate()
            .map(|(i, g)| {
                b.groups
                    .iter()
                    .position(|h| h.name == g.name)
                    .map(|j| (i, j))
                    .ok_or_else(|| Error::Argument(format!("group `{}` missing from second report", g.name)))
            })
            .collect::<Result<_>>()?,
    };

    let mut per_group_labels = Vec::with_capacity(pairs.len());
    let mut compared = 0usize;
    let mut agreeing = 0usize;
    let mut flipped = false;
    let mut undefined = false;
    let mut all_marginal = true;
    let mut sq = 0.0;
    let mut linf: f64 = 0.0;
    for &(i, j) in &pairs {
        let (la, lb) = (labels_a[i], labels_b[j]);
        per_group_labels.push(PairedLabel {
            group_a: a.groups[i].name.clone(),
            group_b: b.groups[j].name.clone(),
            label_a: la,
            label_b: lb,
        });
        if la == Relevance::Undefined || lb == Relevance::Undefined {
            undefined = true;
            continue;
        }
        if la != Relevance::Marginal || lb != Relevance::Marginal {
            all_marginal = false;
        }
        if la != Relevance::Marginal && lb != Relevance::Marginal {
            compared += 1;
            if la == lb {
                agreeing += 1;
            } else {
                flipped = true;
            }
        }
        if let (Some(sa), Some(sb)) = (a.groups[i].sigma_mean, b.groups[j].sigma_mean) {
            let d = (sa - sb).abs();
            sq += d * d;
            linf = linf.max(d);
        }
    }
    let sign_agreement = if compared == 0 {
        1.0
    } else {
        agreeing as f64 / compared as f64
    };
    let verdict = if undefined || all_marginal {
        Verdict::Inconclusive
    } else if flipped {
        Verdict::DifferentClass
    } else {
        Verdict::SameClass
    };
    Ok(ComparisonVerdict {
        sign_agreement,
        per_group_labels,
        sigma_l2_distance: sq.sqrt(),
        sigma_linf_distance: linf,
        verdict,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProjectionPoint {
    pub round: usize,
    pub density: f64,
    pub a: f64,
    pub b: f64,
}

/// The flow projected onto the `(M_a, M_b)` plane, one point per round.
pub fn flow_projection(obs: &FlowObservables, group_a: &str, group_b: &str) -> Result<Vec<ProjectionPoint>> {
    let ia = obs
        .group_index(group_a)
        .ok_or_else(|| Error::Argument(format!("unknown group `{group_a}`")))?;
    let ib = obs
        .group_index(group_b)
        .ok_or_else(|| Error::Argument(format!("unknown group `{group_b}`")))?;
    Ok((0..obs.round_count())
        .map(|n| ProjectionPoint {
            round: n,
            density: obs.densities[n],
            a: obs.m[ia][n],
            b: obs.m[ib][n],
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SemStatus {
    Pass,
    Fail,
    NotApplicable,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SemCheck {
    pub name: String,
    pub relative_sem: Option<f64>,
    pub status: SemStatus,
}

/// Denominator floor for the relative SEM of near-zero exponents.
pub const SEM_FLOOR: f64 = 1e-12;

/// Flags groups whose per-transition exponents scatter too much to be
/// summarized by one number: passes iff `sem / max(|mean|, floor) < threshold`.
pub fn sem_check(report: &EigenReport, threshold: f64) -> Result<Vec<SemCheck>> {
    if !(threshold > 0.0) {
        return Err(Error::Argument(format!("SEM threshold {threshold} must be positive")));
    }
    Ok(report
        .groups
        .iter()
        .map(|g| {
            let relative_sem = match (g.sigma_mean, g.sigma_sem) {
                (Some(m), Some(s)) => Some(s / m.abs().max(SEM_FLOOR)),
                _ => None,
            };
            let status = match relative_sem {
                None => SemStatus::NotApplicable,
                Some(r) if r < threshold => SemStatus::Pass,
                Some(_) => SemStatus::Fail,
            };
            SemCheck {
                name: g.name.clone(),
                relative_sem,
                status,
            }
        })
        .collect())
}

/// Default relative-SEM threshold for [`sem_check`].
pub const DEFAULT_SEM_THRESHOLD: f64 = 0.05;
/// Default half-width of the marginal band around zero.
pub const DEFAULT_BAND: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Conservation {
    pub m_max_error: f64,
    pub p_max_error: f64,
}

/// Everything the flow analysis produces for one trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowReport {
    pub excluded: Vec<String>,
    pub densities: Vec<f64>,
    pub x_schedule: Vec<f64>,
    /// Measured before any groups were excluded.
    pub conservation: Conservation,
    pub magnitude: EigenReport,
    pub count: EigenReport,
    pub sem_threshold: f64,
    pub sem_check: Vec<SemCheck>,
}

pub fn analyze_flow(obs: &FlowObservables, exclude: &[String], band: f64, sem_threshold: f64) -> Result<FlowReport> {
    let (m_max_error, p_max_error) = obs.conservation_error();
    let kept = obs.exclude(exclude)?;
    if kept.group_names.is_empty() {
        return Err(Error::Argument("every group was excluded".into()));
    }
    let c = compute_c_schedule(&kept.x_schedule)?;
    let magnitude = estimate_eigen_for(&kept, Observable::Magnitude, &c, band)?;
    let count = estimate_eigen_for(&kept, Observable::Count, &c, band)?;
    let sem_check = sem_check(&magnitude, sem_threshold)?;
    Ok(FlowReport {
        excluded: exclude.to_vec(),
        densities: kept.densities.clone(),
        x_schedule: kept.x_schedule.clone(),
        conservation: Conservation { m_max_error, p_max_error },
        magnitude,
        count,
        sem_threshold,
        sem_check,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imp::RefinePolicy;
    use crate::nn::MaskState;
    use crate::tensor::Tensor2;
    use crate::trajectory::{GroupEntry, RoundRecord, RunManifest};

    fn entry(name: &str, rows: usize, cols: usize) -> GroupEntry {
        GroupEntry {
            name: name.into(),
            rows,
            cols,
            prunable: true,
        }
    }

    fn trajectory(groups: Vec<GroupEntry>, rounds: Vec<(Vec<Vec<bool>>, Vec<Vec<f64>>)>) -> ImpTrajectory {
        let total: usize = groups.iter().map(|g| g.rows * g.cols).sum();
        let mut prev_kept = total;
        let records = rounds
            .into_iter()
            .enumerate()
            .map(|(n, (bits, w))| {
                let mask = MaskState { bits };
                let kept = mask.kept_total();
                let rec = RoundRecord {
                    round_index: n,
                    weights: w
                        .into_iter()
                        .zip(&groups)
                        .map(|(v, g)| Tensor2::from_vec(g.rows, g.cols, v).unwrap())
                        .collect(),
                    density: kept as f64 / total as f64,
                    x_n: if n == 0 { 0.0 } else { 1.0 - kept as f64 / prev_kept as f64 },
                    eval_error: 0.0,
                    mask,
                };
                prev_kept = kept;
                rec
            })
            .collect();
        let mut manifest = RunManifest::external("fixture", groups);
        manifest.refine_policy = Some(RefinePolicy::Rewind);
        ImpTrajectory { manifest, rounds: records }
    }

    #[test]
    fn hand_summed_two_group_observables() {
        let groups = vec![entry("a", 1, 2), entry("b", 1, 3)];
        let dense = (vec![vec![true; 2], vec![true; 3]], vec![vec![2.0, -2.0], vec![1.0, 1.0, 1.0]]);
        let pruned = (
            vec![vec![true, false], vec![true, true, false]],
            vec![vec![2.0, -2.0], vec![1.0, 1.0, 1.0]],
        );
        let obs = compute_observables(&trajectory(groups, vec![dense, pruned])).unwrap();
        // round 1: |2| / (|2| + 1 + 1) = 0.5; counts 1 / 3 and 2 / 3
        assert_eq!(obs.m[0][1], 0.5);
        assert_eq!(obs.m[1][1], 0.5);
        assert!((obs.p[0][1] - 1.0 / 3.0).abs() < 1e-15);
        assert!((obs.p[1][1] - 2.0 / 3.0).abs() < 1e-15);
        // round 0: 4 / 7 and 3 / 7
        assert!((obs.m[0][0] - 4.0 / 7.0).abs() < 1e-15);
        assert_eq!(obs.x_schedule.len(), 1);
        assert!((obs.x_schedule[0] - 0.4).abs() < 1e-15);
    }

    #[test]
    fn single_group_shares_are_one() {
        let groups = vec![entry("only", 2, 2)];
        let r0 = (vec![vec![true; 4]], vec![vec![0.1, -0.2, 0.3, 0.4]]);
        let r1 = (vec![vec![false, true, true, true]], vec![vec![0.0, -0.2, 0.3, 0.4]]);
        let r2 = (vec![vec![false, false, true, true]], vec![vec![0.0, 0.0, 0.3, 0.4]]);
        let obs = compute_observables(&trajectory(groups, vec![r0, r1, r2])).unwrap();
        assert!(obs.m[0].iter().all(|&v| v == 1.0));
        assert!(obs.p[0].iter().all(|&v| v == 1.0));
    }

    #[test]
    fn quarter_of_remaining_weight_after_two_rounds() {
        // After two rounds group "layer1" keeps |1| + |1| = 2 of a total 8.
        let groups = vec![entry("layer1", 1, 4), entry("rest", 1, 4)];
        let w = vec![vec![1.0, 1.0, 1.0, 1.0], vec![2.0, 2.0, 2.0, 2.0]];
        let r0 = (vec![vec![true; 4], vec![true; 4]], w.clone());
        let r1 = (vec![vec![true, true, true, false], vec![true; 4]], vec![vec![1.0, 1.0, 1.0, 0.0], w[1].clone()]);
        let r2 = (
            vec![vec![true, true, false, false], vec![true, true, true, false]],
            vec![vec![1.0, 1.0, 0.0, 0.0], vec![2.0, 2.0, 2.0, 0.0]],
        );
        let obs = compute_observables(&trajectory(groups, vec![r0, r1, r2])).unwrap();
        assert_eq!(obs.m[0][2], 0.25);
    }

    #[test]
    fn too_short_trajectory_rejected() {
        let groups = vec![entry("g", 1, 1)];
        let t = trajectory(groups, vec![(vec![vec![true]], vec![vec![1.0]])]);
        assert!(matches!(compute_observables(&t), Err(Error::Argument(_))));
    }

    #[test]
    fn c_schedule_values() {
        assert_eq!(coarse_grain_factor(0.2).unwrap(), 1.25);
        assert!((coarse_grain_factor(1e-12).unwrap() - 1.0).abs() < 1e-9);
        let x = tenth_of_original_schedule(3);
        let c = compute_c_schedule(&x).unwrap();
        assert!((c.c[2] - 8.0 / 7.0).abs() < 1e-12);
        assert!((c.c[0] - 10.0 / 9.0).abs() < 1e-12);
        assert!(matches!(compute_c_schedule(&[0.2, 1.0]), Err(Error::Domain(_))));
        assert!(matches!(compute_c_schedule(&[0.0]), Err(Error::Domain(_))));
    }

    fn single(m: Vec<f64>) -> FlowObservables {
        let rounds = m.len();
        FlowObservables::new(
            vec!["g".into()],
            vec![m.clone()],
            vec![m],
            vec![1.0; rounds],
            vec![0.2; rounds - 1],
        )
        .unwrap()
    }

    #[test]
    fn geometric_sequence_exponent() {
        let obs = single((0..8).map(|n| 0.5 * 1.1f64.powi(n)).collect());
        let c = compute_c_schedule(&obs.x_schedule).unwrap();
        let r = estimate_eigen(&obs, &c, 0.01).unwrap();
        let g = &r.groups[0];
        assert!((g.lambda_mean.unwrap() - 1.1).abs() < 1e-14);
        // ln(1.1) / ln(1.25), evaluated independently
        assert!((g.sigma_mean.unwrap() - 0.427_124_957_199_045_86).abs() < 1e-12);
        assert!(g.sigma_sem.unwrap() < 1e-14);
        assert_eq!(g.label, Relevance::Relevant);
    }

    #[test]
    fn constant_share_is_marginal() {
        let obs = single(vec![0.3; 5]);
        let c = compute_c_schedule(&obs.x_schedule).unwrap();
        let r = estimate_eigen(&obs, &c, 0.01).unwrap();
        assert_eq!(r.groups[0].lambda_mean, Some(1.0));
        assert_eq!(r.groups[0].sigma_mean, Some(0.0));
        assert_eq!(classify(&r), vec![Relevance::Marginal]);
    }

    #[test]
    fn zero_transitions_excluded() {
        let obs = single(vec![0.5, 0.0, 0.4, 0.44]);
        let c = compute_c_schedule(&obs.x_schedule).unwrap();
        let r = estimate_eigen(&obs, &c, 0.01).unwrap();
        assert_eq!(r.groups[0].valid_transitions, 1);
        let dead = single(vec![0.0, 0.0, 0.0]);
        let r = estimate_eigen(&dead, &compute_c_schedule(&dead.x_schedule).unwrap(), 0.01).unwrap();
        assert_eq!(r.groups[0].label, Relevance::Undefined);
        assert_eq!(r.groups[0].sigma_mean, None);
    }

    #[test]
    fn planted_variable_c_recovery() {
        let x = tenth_of_original_schedule(7);
        let c = compute_c_schedule(&x).unwrap();
        let mut m = vec![0.2];
        for &cn in &c.c {
            let last = *m.last().unwrap();
            m.push(last * cn.powf(0.15));
        }
        let obs = FlowObservables::new(vec!["g".into()], vec![m.clone()], vec![m], vec![1.0; 8], x).unwrap();
        let r = estimate_eigen(&obs, &c, 0.01).unwrap();
        assert!((r.groups[0].sigma_mean.unwrap() - 0.15).abs() < 1e-9);
        assert!(r.groups[0].sigma_sem.unwrap() < 1e-9);
    }

    #[test]
    fn classification_examples() {
        let r = EigenReport::from_sigmas(&["1", "2", "3", "4"], &[0.20, 0.14, 0.07, -0.68], 0.01).unwrap();
        use Relevance::*;
        assert_eq!(classify(&r), vec![Relevant, Relevant, Relevant, Irrelevant]);
        let r = EigenReport::from_sigmas(&["1"], &[0.0], 0.01).unwrap();
        assert_eq!(classify(&r), vec![Marginal]);
        let r = EigenReport::from_sigmas(&["1", "2"], &[-0.005, 0.20], 0.01).unwrap();
        assert_eq!(classify(&r), vec![Marginal, Relevant]);
        // boundaries: |sigma| == band is marginal
        let r = EigenReport::from_sigmas(&["1", "2"], &[0.01, -0.01], 0.01).unwrap();
        assert_eq!(classify(&r), vec![Marginal, Marginal]);
    }

    #[test]
    fn comparisons() {
        let c10 = EigenReport::from_sigmas(&["1", "2", "3", "4"], &[0.20, 0.14, 0.07, -0.68], 0.01).unwrap();
        let c100 = EigenReport::from_sigmas(&["1", "2", "3", "4"], &[0.14, 0.20, 0.04, -0.05], 0.01).unwrap();
        let v = compare_flows(&c10, &c100, Alignment::Name).unwrap();
        assert_eq!(v.verdict, Verdict::SameClass);
        assert_eq!(v.sign_agreement, 1.0);

        let v = compare_flows(&c10, &c10, Alignment::Position).unwrap();
        assert_eq!(v.verdict, Verdict::SameClass);
        assert_eq!((v.sigma_l2_distance, v.sigma_linf_distance), (0.0, 0.0));

        let a = EigenReport::from_sigmas(&["x", "y"], &[0.2, 0.2], 0.01).unwrap();
        let b = EigenReport::from_sigmas(&["x", "y"], &[0.2, -0.2], 0.01).unwrap();
        let v = compare_flows(&a, &b, Alignment::Name).unwrap();
        assert_eq!(v.verdict, Verdict::DifferentClass);
        assert_eq!(v.sign_agreement, 0.5);
        assert!((v.sigma_linf_distance - 0.4).abs() < 1e-15);

        let short = EigenReport::from_sigmas(&["x"], &[0.2], 0.01).unwrap();
        assert!(matches!(compare_flows(&a, &short, Alignment::Name), Err(Error::Argument(_))));

        let flat = EigenReport::from_sigmas(&["x", "y"], &[0.0, 0.001], 0.01).unwrap();
        assert_eq!(compare_flows(&flat, &flat, Alignment::Name).unwrap().verdict, Verdict::Inconclusive);
    }

    #[test]
    fn name_alignment_ignores_order() {
        let a = EigenReport::from_sigmas(&["x", "y"], &[0.2, -0.3], 0.01).unwrap();
        let b = EigenReport::from_sigmas(&["y", "x"], &[-0.3, 0.2], 0.01).unwrap();
        assert_eq!(compare_flows(&a, &b, Alignment::Name).unwrap().verdict, Verdict::SameClass);
        assert_eq!(compare_flows(&a, &b, Alignment::Position).unwrap().verdict, Verdict::DifferentClass);
        let renamed = EigenReport::from_sigmas(&["x", "z"], &[0.2, -0.3], 0.01).unwrap();
        assert!(compare_flows(&a, &renamed, Alignment::Name).is_err());
    }

    #[test]
    fn projection_points() {
        let ma: Vec<f64> = (0..5).map(|n| 0.1 * 1.3f64.powi(n)).collect();
        let mb: Vec<f64> = ma.iter().map(|v| 1.0 - v).collect();
        let obs = FlowObservables::new(
            vec!["a".into(), "b".into()],
            vec![ma.clone(), mb.clone()],
            vec![ma, mb],
            vec![1.0, 0.8, 0.64, 0.512, 0.4096],
            vec![0.2; 4],
        )
        .unwrap();
        let pts = flow_projection(&obs, "a", "b").unwrap();
        assert_eq!(pts.len(), 5);
        assert!(pts.iter().all(|p| (p.a + p.b - 1.0).abs() < 1e-15));
        assert_eq!(pts[3].density, 0.512);
        assert!(flow_projection(&obs, "a", "nope").is_err());

        let one = single(vec![1.0; 4]);
        assert!(flow_projection(&one, "g", "g").unwrap().iter().all(|p| p.a == 1.0 && p.b == 1.0));
    }

    #[test]
    fn sem_checks() {
        let geo = single((0..6).map(|n| 0.4 * 0.9f64.powi(n)).collect());
        let r = estimate_eigen(&geo, &compute_c_schedule(&geo.x_schedule).unwrap(), 0.01).unwrap();
        assert_eq!(sem_check(&r, 1e-6).unwrap()[0].status, SemStatus::Pass);

        // per-transition sigma alternating +0.1 / -0.1 under c = 1.25
        let mut m = vec![0.3];
        for n in 0..6 {
            let s: f64 = if n % 2 == 0 { 0.1 } else { -0.1 };
            let last = *m.last().unwrap();
            m.push(last * 1.25f64.powf(s));
        }
        let alt = single(m);
        let r = estimate_eigen(&alt, &compute_c_schedule(&alt.x_schedule).unwrap(), 0.01).unwrap();
        assert_eq!(sem_check(&r, 0.05).unwrap()[0].status, SemStatus::Fail);

        let one = single(vec![0.3, 0.4]);
        let r = estimate_eigen(&one, &compute_c_schedule(&one.x_schedule).unwrap(), 0.01).unwrap();
        assert_eq!(r.groups[0].sigma_sem, None);
        assert_eq!(sem_check(&r, 0.05).unwrap()[0].status, SemStatus::NotApplicable);
        assert!(sem_check(&r, 0.0).is_err());
    }

    #[test]
    fn standard_error_of_alternating_sequence() {
        // mean 0, sample sd = sqrt(6 * 0.01 / 5), sem = sd / sqrt(6)
        let v = [0.1, -0.1, 0.1, -0.1, 0.1, -0.1];
        let expected = (0.06f64 / 5.0).sqrt() / 6f64.sqrt();
        assert!((standard_error(&v).unwrap() - expected).abs() < 1e-15);
    }

    #[test]
    fn exclusion_drops_groups() {
        let ma = vec![0.5, 0.6];
        let obs = FlowObservables::new(
            vec!["a".into(), "down".into()],
            vec![ma.clone(), vec![0.5, 0.4]],
            vec![ma, vec![0.5, 0.4]],
            vec![1.0, 0.8],
            vec![0.2],
        )
        .unwrap();
        let kept = obs.exclude(&["down".to_owned()]).unwrap();
        assert_eq!(kept.group_names, vec!["a".to_owned()]);
        assert_eq!(kept.m, vec![vec![0.5, 0.6]]);
        assert!(obs.exclude(&["missing".to_owned()]).is_err());
    }
}
