use impflow::flow::{
    compare_flows, compute_c_schedule, estimate_eigen, Alignment, CoarseGrainSchedule, EigenReport, FlowObservables,
    Relevance, Verdict,
};
use impflow::io::{report_from_bytes, report_to_bytes, ReportDocument};
use proptest::prelude::*;

/// Magnitude rows planted so that group `g` grows by `c_n^sigma[g]` at
/// transition `n`; counts are flat.
fn planted(sigmas: &[f64], xs: &[f64]) -> (FlowObservables, CoarseGrainSchedule) {
    let schedule = compute_c_schedule(xs).unwrap();
    let rounds = xs.len() + 1;
    let m: Vec<Vec<f64>> = sigmas
        .iter()
        .map(|s| {
            let mut row = vec![0.1];
            for c in &schedule.c {
                let last = *row.last().unwrap();
                row.push(last * c.powf(*s));
            }
            row
        })
        .collect();
    let p = vec![vec![1.0 / sigmas.len() as f64; rounds]; sigmas.len()];
    let names = (0..sigmas.len()).map(|g| format!("g{g}")).collect();
    let mut density = 1.0;
    let densities = std::iter::once(1.0)
        .chain(xs.iter().map(|x| {
            density *= 1.0 - x;
            density
        }))
        .collect();
    (FlowObservables::new(names, m, p, densities, xs.to_vec()).unwrap(), schedule)
}

fn sigmas() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-1.0..1.0f64, 2..6)
}

fn schedule() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.05..0.6f64, 2..12)
}

proptest! {
    #[test]
    fn planted_exponents_recovered_under_any_schedule(s in sigmas(), xs in schedule()) {
        let (obs, c) = planted(&s, &xs);
        let report = estimate_eigen(&obs, &c, 0.01).unwrap();
        for (g, want) in report.groups.iter().zip(&s) {
            prop_assert!((g.sigma_mean.unwrap() - want).abs() < 1e-9);
            prop_assert!(g.sigma_sem.unwrap() < 1e-9);
            prop_assert_eq!(g.valid_transitions, xs.len());
        }
    }

    #[test]
    fn magnitude_scale_does_not_move_exponents(
        mags in prop::collection::vec(prop::collection::vec(0.01..10.0f64, 5), 3),
        k in 1e-3..1e3f64,
    ) {
        let kept = vec![vec![40, 30, 20, 15, 10]; 3];
        let names = || vec!["a".to_string(), "b".into(), "c".into()];
        let a = FlowObservables::from_sums(names(), &mags, &kept, 300, None).unwrap();
        let scaled: Vec<Vec<f64>> = mags.iter().map(|r| r.iter().map(|v| v * k).collect()).collect();
        let b = FlowObservables::from_sums(names(), &scaled, &kept, 300, None).unwrap();
        let c = compute_c_schedule(&a.x_schedule).unwrap();
        let (ra, rb) = (estimate_eigen(&a, &c, 0.01).unwrap(), estimate_eigen(&b, &c, 0.01).unwrap());
        for (ga, gb) in ra.groups.iter().zip(&rb.groups) {
            prop_assert!((ga.sigma_mean.unwrap() - gb.sigma_mean.unwrap()).abs() < 1e-9);
        }
        let (m_err, p_err) = a.conservation_error();
        prop_assert!(m_err < 1e-12 && p_err < 1e-12);
    }

    #[test]
    fn group_order_does_not_change_results(s in sigmas(), xs in schedule(), rot in 0usize..5) {
        let (obs, c) = planted(&s, &xs);
        let rot = rot % s.len();
        let mut shuffled = obs.clone();
        shuffled.group_names.rotate_left(rot);
        shuffled.m.rotate_left(rot);
        shuffled.p.rotate_left(rot);
        let a = estimate_eigen(&obs, &c, 0.01).unwrap();
        let b = estimate_eigen(&shuffled, &c, 0.01).unwrap();
        for g in &a.groups {
            prop_assert_eq!(Some(g), b.group(&g.name));
        }
        let v = compare_flows(&a, &b, Alignment::Name).unwrap();
        prop_assert!(v.verdict != Verdict::DifferentClass);
        prop_assert_eq!(v.sigma_linf_distance, 0.0);
    }

    #[test]
    fn negated_flow_is_a_different_class(s in prop::collection::vec(0.05..1.0f64, 2..6)) {
        let names: Vec<String> = (0..s.len()).map(|g| format!("g{g}")).collect();
        let names: Vec<&str> = names.iter().map(String::as_str).collect();
        let neg: Vec<f64> = s.iter().map(|v| -v).collect();
        let a = EigenReport::from_sigmas(&names, &s, 0.01).unwrap();
        let b = EigenReport::from_sigmas(&names, &neg, 0.01).unwrap();
        prop_assert!(a.labels().iter().all(|l| *l == Relevance::Relevant));
        prop_assert_eq!(compare_flows(&a, &b, Alignment::Position).unwrap().verdict, Verdict::DifferentClass);
    }

    #[test]
    fn report_bytes_round_trip(s in sigmas(), xs in schedule()) {
        let (obs, c) = planted(&s, &xs);
        let doc = ReportDocument::Eigen(estimate_eigen(&obs, &c, 0.01).unwrap());
        let bytes = report_to_bytes(&doc).unwrap();
        let back = report_from_bytes(&bytes).unwrap();
        prop_assert_eq!(&back, &doc);
        prop_assert_eq!(report_to_bytes(&back).unwrap(), bytes);
    }
}
