use i2o_core::inner::{FixedPointConfig, DEFAULT_N_MAX};
use i2o_core::linops::{self, Matrix, SeededSource, Vector};
use i2o_core::metalin::{self, LinearTask, MetaConfig};
use i2o_core::theory::generate::{self, GradientDims};
use i2o_core::theory::{self, DeltaN, Trainer};
use i2o_core::{DescentOptions, Horizon};
use proptest::prelude::*;

fn full_grid(n: usize) -> Vec<DeltaN> {
    let mut g = theory::linear_grid(n, 5 * n as i64);
    g.push(DeltaN::Infinite);
    g
}

#[test]
fn gap_never_beats_lower_bound() {
    for seed in 0..50u64 {
        let b = generate::general_valid(&SeededSource::new(seed), 12).unwrap();
        let n = 1 + seed as usize % 12;
        let report = theory::sweep(&b, n, &full_grid(n), Trainer::ClosedForm, seed).unwrap();
        // Recompute each row's bound and gap outside the report.
        let theta = b.train_closed_form(n).unwrap().theta;
        let lb = theory::lower_bound(&b, n).unwrap();
        for row in report.rows() {
            let gap = theory::d_gap(&b, &theta, n, row.delta_n).unwrap();
            assert!(gap >= lb - 1e-7 * (1.0 + lb.abs()), "seed {seed} {row:?}");
        }
    }
}

#[test]
fn surjective_u_cannot_be_improved() {
    let dims = GradientDims {
        d_z: 5,
        inner_rank: 4,
        d_theta: 4,
        d_omega: 5,
        outer_rank: 3,
    };
    for seed in 0..20u64 {
        let b = generate::gradient_instance(&SeededSource::new(seed), dims).unwrap();
        assert_eq!(linops::rank(b.inner().u()).unwrap(), 4);
        let n0 = b
            .inner()
            .invertibility_threshold(b.eta(), DEFAULT_N_MAX)
            .unwrap();
        let n = n0.max(20);
        let report = theory::sweep(&b, n, &full_grid(n), Trainer::ClosedForm, seed).unwrap();
        let min = report
            .rows()
            .iter()
            .map(|r| r.d_gap)
            .fold(f64::INFINITY, f64::min);
        assert!(min >= -1e-7, "seed {seed}: {min}");
    }
}

#[test]
fn closed_form_loss_splits_into_two_terms() {
    for seed in 0..40u64 {
        let b = generate::general_valid(&SeededSource::new(500 + seed), 10).unwrap();
        let n = 1 + seed as usize % 15;
        let theta = b.train_closed_form(n).unwrap().theta;
        let loss = b.loss_at(&theta, Horizon::Steps(n)).unwrap();
        let split = theory::loss_decomposition(&b, n).unwrap();
        assert!(
            (loss - split.total()).abs() <= 1e-8 * (1.0 + loss.abs()),
            "seed {seed}: {loss} vs {}",
            split.total()
        );
        let lb = theory::lower_bound(&b, n).unwrap();
        assert!((split.recoverable + lb).abs() <= 1e-12 * (1.0 + lb.abs()));
    }
}

#[test]
fn unreachable_term_does_not_depend_on_n() {
    let b = generate::general_valid(&SeededSource::new(42), 9).unwrap();
    let base = theory::loss_decomposition(&b, 1).unwrap().unreachable;
    for n in [2, 5, 30] {
        let u = theory::loss_decomposition(&b, n).unwrap().unreachable;
        assert!((u - base).abs() <= 1e-9 * (1.0 + base));
    }
}

#[test]
fn ift_and_unrolled_reach_the_same_loss() {
    let opts = DescentOptions {
        tol: 1e-12,
        ..DescentOptions::default()
    };
    for seed in 0..20u64 {
        let d_z = 3 + seed as usize % 4;
        let d_x = 2 + seed as usize % (d_z - 1);
        let b = generate::well_conditioned_gradient(&SeededSource::new(seed), d_z, d_x, d_x + 2)
            .unwrap();
        let n0 = b
            .inner()
            .invertibility_threshold(b.eta(), DEFAULT_N_MAX)
            .unwrap();
        let n = n0.max(10);
        let theta0 = Vector::zeros(b.inner().d_theta());
        let ift = b.train_ift(n, &opts, &theta0).unwrap();
        let unrolled = b.train_unrolled_gd(n, &opts, &theta0).unwrap();
        let l_ift = b.loss_at(&ift.theta, Horizon::Steps(n)).unwrap();
        let l_unr = b.loss_at(&unrolled.theta, Horizon::Steps(n)).unwrap();
        assert!((l_ift - l_unr).abs() <= 1e-7 * (1.0 + l_unr), "seed {seed}");
        assert!(b.characterization_residual(&ift.theta, n).unwrap() <= 1e-6);
        assert!(b.characterization_residual(&unrolled.theta, n).unwrap() <= 1e-6);
    }
}

fn random_meta(seed: u64) -> (MetaConfig, Vec<(Matrix, Vector)>) {
    let mut s = SeededSource::new(seed).stream();
    let d = 1 + seed as usize % 4;
    let tasks = 1 + seed as usize % 3;
    let lambda = 0.1 + s.uniform() * 2.0;
    let mut data = Vec::new();
    let list = (0..tasks)
        .map(|i| {
            let m = 1 + (seed as usize + i) % 5;
            let x = s.matrix(m, d);
            let y = s.vector(m);
            data.push((x.clone(), y.clone()));
            LinearTask::new(x, y, s.matrix(2, d), s.vector(2)).unwrap()
        })
        .collect();
    (MetaConfig::new(lambda, list).unwrap(), data)
}

#[test]
fn stacked_iteration_is_per_task_gradient_descent() {
    for seed in 0..20u64 {
        let (cfg, data) = random_meta(seed);
        let b = metalin::build(&cfg, None).unwrap();
        let d = cfg.dim();
        let theta = SeededSource::new(seed + 99).stream().vector(d);
        let n = 25;
        let run = FixedPointConfig::new(b.eta(), b.z0().clone(), n).unwrap();
        let stacked = b.inner().iterate(&theta, &run).unwrap();
        for (i, (x, y)) in data.iter().enumerate() {
            let mut z = Vector::zeros(d);
            for _ in 0..n {
                let grad = x.transpose() * (x * &z - y) + (&z - &theta) * cfg.lambda();
                z -= grad * b.eta();
            }
            let part = stacked.rows(i * d, d).into_owned();
            assert!(
                (&part - &z).norm() <= 1e-9 * (1.0 + z.norm()),
                "seed {seed} task {i}"
            );
        }
    }
}

#[test]
fn stacked_fixed_point_is_per_task_solution() {
    for seed in 0..20u64 {
        let (cfg, _) = random_meta(300 + seed);
        let b = metalin::build(&cfg, None).unwrap();
        assert!(b.inner().validate().passed());
        let d = cfg.dim();
        let theta = SeededSource::new(seed).stream().vector(d);
        let z = b.procedure(Horizon::Limit).unwrap().apply(&theta).unwrap();
        let far = b
            .procedure(Horizon::Steps(5000))
            .unwrap()
            .apply(&theta)
            .unwrap();
        for (i, task) in cfg.tasks().iter().enumerate() {
            let exact = task.adapted(cfg.lambda(), &theta).unwrap();
            assert!((z.rows(i * d, d) - &exact).norm() <= 1e-8 * (1.0 + exact.norm()));
            assert!((far.rows(i * d, d) - &exact).norm() <= 1e-8 * (1.0 + exact.norm()));
        }
    }
}

#[test]
fn single_task_meta_sweep_is_overparametrized() {
    let mut s = SeededSource::new(8).stream();
    let task = LinearTask::new(s.matrix(6, 3), s.vector(6), s.matrix(4, 3), s.vector(4)).unwrap();
    let cfg = MetaConfig::new(0.5, vec![task]).unwrap();
    let report = metalin::meta_sweep(&cfg, None, 10, &theory::mixed_grid(10, 256, true)).unwrap();
    assert!(report.rows().iter().all(|r| r.d_gap >= -1e-7));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn bound_is_nonpositive(seed in any::<u64>(), n in 0usize..30) {
        let b = generate::general_valid(&SeededSource::new(seed), 7).unwrap();
        prop_assert!(theory::lower_bound(&b, n).unwrap() <= 0.0);
    }

    #[test]
    fn delta_round_trips(d in any::<i64>()) {
        let s = DeltaN::Steps(d).to_string();
        prop_assert_eq!(s.parse::<DeltaN>().unwrap(), DeltaN::Steps(d));
    }

    #[test]
    fn reports_satisfy_row_invariant(seed in any::<u64>(), n in 1usize..8) {
        let b = generate::general_valid(&SeededSource::new(seed), 6).unwrap();
        let report = theory::sweep(&b, n, &theory::mixed_grid(n, 64, true), Trainer::ClosedForm, seed).unwrap();
        prop_assert!(report.violations().is_empty());
        prop_assert!(report.rows().iter().all(|r| r.loss_n >= 0.0 && r.loss_n_dn >= 0.0));
    }
}
