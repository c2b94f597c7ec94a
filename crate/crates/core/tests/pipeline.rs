use impflow::data::gen_circles;
use impflow::flow::{analyze_flow, compute_observables, DEFAULT_BAND, DEFAULT_SEM_THRESHOLD};
use impflow::imp::{run_imp, run_oneshot, ImpOptions, PruneMode, PruneSchedule, PruneScope};
use impflow::io::{read_trajectory, write_trajectory};
use impflow::nn::{Activation, NetworkSpec, StageSpec, TrainConfig};

fn spec() -> NetworkSpec {
    NetworkSpec::new(2, 2, vec![StageSpec { block_count: 1, width: 32 }; 2], Activation::Relu).unwrap()
}

fn train() -> TrainConfig {
    TrainConfig { epochs: 10, batch_size: 32, learning_rate: 0.03, momentum: 0.9, seed: 1, rewind_fraction: 0.1 }
}

/// Iterative pruning to ~10.7% density should not lose to a single cut to the
/// same density by more than one error point.
#[test]
fn iterative_pruning_is_not_worse_than_oneshot() {
    let data = gen_circles(1000, 0.3, 1).unwrap();
    let options = ImpOptions::default();
    let schedule = PruneSchedule { mode: PruneMode::FractionOfRemaining(0.2), scope: PruneScope::Global, rounds: 10 };
    let iterative = run_imp(&spec(), &data, &train(), &schedule, &options).unwrap();
    let target = iterative.rounds.last().unwrap().density;
    let oneshot = run_oneshot(&spec(), &data, &train(), target, &options).unwrap();

    assert_eq!(iterative.rounds.len(), 11);
    assert_eq!(oneshot.rounds.len(), 2);
    let last = |t: &impflow::trajectory::ImpTrajectory| t.rounds.last().unwrap().clone();
    assert_eq!(last(&oneshot).mask.kept_total(), last(&iterative).mask.kept_total());
    let (it, one) = (last(&iterative).eval_error, last(&oneshot).eval_error);
    assert!(one >= it - 1.0, "one-shot {one:.2}% vs iterative {it:.2}%");
}

#[test]
fn trained_trajectory_survives_disk_and_analysis() {
    let data = gen_circles(400, 0.2, 5).unwrap();
    let schedule = PruneSchedule { mode: PruneMode::FractionOfOriginal(0.1), scope: PruneScope::PerGroup, rounds: 6 };
    let t = run_imp(&spec(), &data, &TrainConfig { epochs: 3, ..train() }, &schedule, &ImpOptions::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_trajectory(&t, dir.path()).unwrap();
    let back = read_trajectory(dir.path()).unwrap();
    assert_eq!(back, t);

    let obs = compute_observables(&back).unwrap();
    let report = analyze_flow(&obs, &[], DEFAULT_BAND, DEFAULT_SEM_THRESHOLD).unwrap();
    assert!(report.conservation.m_max_error < 1e-9);
    assert!(report.conservation.p_max_error < 1e-9);
    for g in report.magnitude.groups.iter().chain(&report.count.groups) {
        assert_eq!(g.valid_transitions, 6, "{}", g.name);
        assert!(g.sigma_mean.unwrap().is_finite());
    }
}
