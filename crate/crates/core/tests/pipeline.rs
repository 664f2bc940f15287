use proptest::prelude::*;

use stencilreg::forecast::{evaluate, integrate_model};
use stencilreg::grid::{Grid, Grid1D};
use stencilreg::io::{read_model, write_model};
use stencilreg::learner::{learn_model, LearnConfig, Method};
use stencilreg::refsim::{generate_training, simulate, CaseKind, CaseParams, RhsSource};
use stencilreg::spectra::stability_report;

fn small(kind: CaseKind, n: usize, snapshots: usize) -> CaseParams {
    let mut case = CaseParams::canonical(kind);
    let length = case.grid.as_line().unwrap().length();
    case.grid = Grid::Line(Grid1D::new(n, length).unwrap());
    case.n_snapshots = snapshots;
    case
}

#[test]
fn learned_model_survives_disk_round_trip() {
    let case = small(CaseKind::AdvectionDiffusion, 61, 80);
    let snap = generate_training(&case).unwrap();
    let model = learn_model(&snap, &case, Method::Sldo, &[5, 3], &LearnConfig::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_model(dir.path(), &model, &case).unwrap();
    let (back, back_case) = read_model(dir.path()).unwrap();
    assert_eq!(back_case.kind, case.kind);
    assert_eq!(back.sizes, model.sizes);
    let u0 = snap.traj.state(0);
    let a = integrate_model(&model, u0, case.dt, 50).unwrap();
    let b = integrate_model(&back, u0, case.dt, 50).unwrap();
    let diff = (&a.traj.states - &b.traj.states).amax();
    assert!(diff <= 1e-12 * a.traj.states.amax(), "{diff}");
}

#[test]
fn sldo_forecast_tracks_reference_in_training_window() {
    let case = small(CaseKind::Diffusion, 81, 100);
    let train = generate_training(&case).unwrap();
    let reference = simulate(&case, 199).unwrap();
    let model = learn_model(&train, &case, Method::Sldo, &[3], &LearnConfig::default()).unwrap();
    let (forecast, report) = evaluate(&model, &reference, &train).unwrap();
    assert!(!forecast.blew_up());
    assert!(report.growth <= 1.0 + 1e-9, "{}", report.growth);
    assert!(report.eps_xt < 0.1, "{}", report.eps_xt);
}

#[test]
fn burgers_data_depends_only_on_seed() {
    let mut case = small(CaseKind::Burgers, 33, 10);
    let a = generate_training(&case).unwrap();
    let b = generate_training(&case).unwrap();
    assert_eq!(a.traj.states, b.traj.states);
    case.seed += 1;
    let c = generate_training(&case).unwrap();
    assert_ne!(a.traj.states, c.traj.states);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn constrained_models_are_dominant_and_stable(
        kind in prop::sample::select(vec![CaseKind::Diffusion, CaseKind::Advection, CaseKind::AdvectionDiffusion]),
        s1 in prop::sample::select(vec![3usize, 5, 7]),
        s2 in prop::sample::select(vec![3usize, 5]),
        n in 31usize..61,
        fd in any::<bool>(),
    ) {
        let mut case = small(kind, n, 60);
        case.rhs_source = if fd { RhsSource::FiniteDifference } else { RhsSource::Exact };
        let snap = generate_training(&case).unwrap();
        let sizes: Vec<usize> = if kind == CaseKind::AdvectionDiffusion { vec![s1, s2] } else { vec![s1] };
        let model = learn_model(&snap, &case, Method::Sldo, &sizes, &LearnConfig::default()).unwrap();
        prop_assert!(model.min_dominance_gap().unwrap() >= -1e-6);
        let report = stability_report(&model.constrained_operator().unwrap(), 1e-6).unwrap();
        prop_assert!(report.stable, "max Re {}", report.max_real_part_neg_op);
    }
}
