//! Property tests for the structural invariants of the solvers, the Cox
//! construction and the forward equation.

use lsi_core::cox::{cox_simulate, integrated_intensity, invert_clock, CoxInputs, FixedDraws, GammaFamily, IntensitySpec};
use lsi_core::eta::{EtaModel, EtaPath};
use lsi_core::fp_counting::{solve_all_levels, CountingFpProblem, SolverSettings};
use lsi_core::grid::{integrate_cells, Bounds, GridFunction, TimeGrid};
use lsi_core::jumps::JumpDistribution;
use lsi_core::lattice::StateLattice;
use lsi_core::li_model::li_forward_marginals;
use lsi_core::rng::RngStream;
use lsi_core::stats;
use proptest::prelude::*;

fn rates(n: usize) -> impl Strategy<Value = Vec<f64>> {
    proptest::collection::vec(0.25f64..4.0, n)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn clock_inversion_hits_the_clock(r in rates(16), start in 0.0f64..0.9, clock in 0.0f64..1.5) {
        let grid = TimeGrid::new(1.0, 16).unwrap();
        match invert_clock(&grid, start, clock, |i| r[i]) {
            Some(tau) => {
                prop_assert!(tau >= start && tau <= 1.0);
                let area = integrate_cells(&grid, start, tau, |i| r[i]);
                prop_assert!((area - clock).abs() < 1e-10);
            }
            None => prop_assert!(integrate_cells(&grid, start, 1.0, |i| r[i]) < clock + 1e-12),
        }
    }

    #[test]
    fn cox_paths_are_well_formed(
        eta in proptest::collection::vec(1.0f64..2.0, 20),
        gamma_level in 1.0f64..2.0,
        clocks in proptest::collection::vec(0.01f64..2.0, 12),
        jumps in proptest::collection::vec(0usize..2, 12),
    ) {
        let grid = TimeGrid::new(1.0, 20).unwrap();
        let bounds = Bounds::new(1.0, 2.0).unwrap();
        let nu = JumpDistribution::new(vec![1.0, -1.0], vec![0.6, 0.4]).unwrap();
        let lattice = StateLattice::build(&nu, 12).unwrap();
        let lambda = IntensitySpec::constant(grid, lattice.len(), 1.5, bounds).unwrap();
        let gamma = GammaFamily::constant(&lattice, grid, gamma_level);
        let inputs = CoxInputs { gamma: &gamma, lambda: &lambda, nu: &nu, lattice: &lattice };
        let path_eta = EtaPath { grid, values: eta, jump_time: None };
        let path = cox_simulate(&path_eta, &inputs, &mut FixedDraws::new(clocks.clone(), jumps.clone())).unwrap();
        prop_assert!(path.times.windows(2).all(|w| w[0] < w[1]));
        let mut x = 0.0;
        for k in 0..path.len() {
            prop_assert_eq!(path.sizes[k], nu.atoms()[jumps[k]]);
            x += path.sizes[k];
            prop_assert_eq!(lattice.state(path.states_after[k]), x);
            let prev = if k == 0 { 0.0 } else { path.times[k - 1] };
            let area = integrated_intensity(&path, &path_eta, &inputs, prev, path.times[k]);
            prop_assert!((area - clocks[k]).abs() < 1e-9);
        }
    }

    #[test]
    fn forward_marginals_are_probability_vectors(level in 1.0f64..2.0, slope in -0.2f64..0.2) {
        let grid = TimeGrid::new(1.0, 25).unwrap();
        let bounds = Bounds::new(1.0, 2.0).unwrap();
        let nu = JumpDistribution::new(vec![1.0, -2.0], vec![0.5, 0.5]).unwrap();
        let lattice = StateLattice::build(&nu, 10).unwrap();
        let lambda = IntensitySpec::new(
            lattice.states().iter().map(|&x| GridFunction::constant(grid, bounds.clamp(level + slope * x))).collect(),
            bounds,
        ).unwrap();
        let curve = li_forward_marginals(&lambda, &nu, &lattice, &grid, 1e-2).unwrap();
        for (p, leak) in curve.pmf.iter().zip(&curve.leak) {
            prop_assert!(p.iter().all(|&q| q >= 0.0));
            prop_assert!((p.iter().sum::<f64>() + leak - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn ks_distance_is_a_probability(x in proptest::collection::vec(0.0f64..10.0, 1..200)) {
        let d = stats::ks_statistic(&x, stats::exp1_cdf);
        prop_assert!((0.0..=1.0).contains(&d));
        let p = stats::ks_pvalue(d, x.len());
        prop_assert!((0.0..=1.0).contains(&p));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn solved_leverage_stays_in_bounds(lo in 1.0f64..1.4, hi in 1.6f64..2.0, p in 0.2f64..0.8, seed in 0u64..1000) {
        let grid = TimeGrid::new(1.0, 20).unwrap();
        let bounds = Bounds::new(1.0, 2.0).unwrap();
        let model = EtaModel::RandomConstant { values: vec![lo, hi], probs: vec![p, 1.0 - p] };
        let problem = CountingFpProblem::new(model, bounds, grid, 1000, Some(6), |_| GridFunction::constant(grid, 1.0)).unwrap();
        let sol = solve_all_levels(&problem, &SolverSettings::default(), RngStream::new(seed, 0)).unwrap();
        for g in &sol.gamma.gamma {
            prop_assert!(g.values().iter().all(|&v| (lo - 1e-12..=hi + 1e-12).contains(&v)));
        }
    }

    #[test]
    fn solver_is_thread_count_invariant(seed in 0u64..1000) {
        let grid = TimeGrid::new(1.0, 20).unwrap();
        let bounds = Bounds::new(1.0, 2.0).unwrap();
        let model = EtaModel::TwoStateMarkov { low: 1.0, high: 2.0, rate_up: 1.0, rate_down: 2.0, start_high: 0.5 };
        let problem = CountingFpProblem::new(model, bounds, grid, 1500, Some(6), |_| GridFunction::constant(grid, 1.0)).unwrap();
        let run = |threads| {
            lsi_core::parallel::pool(Some(threads))
                .install(|| solve_all_levels(&problem, &SolverSettings::default(), RngStream::new(seed, 0)).unwrap())
        };
        prop_assert_eq!(run(1), run(3));
    }
}
