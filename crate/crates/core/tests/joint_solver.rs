mod common;

use common::{col, corr, gaussian};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sing_core::lngca::random_semiorthogonal;
use sing_core::nalgebra::DMatrix;
use sing_core::pipeline::{initial_stages, prepare, solve_prepared};
use sing_core::{
    curvilinear_solve, double_center, generate_toy, lngca_from, whiten, DataMatrix, JointObjective,
    JointProblem, LngcaConfig, RhoExtent, SingConfig, ToySpec, Whitener,
};

fn whitened_gaussian(n: usize, p: usize, seed: u64) -> Whitener {
    let data = DataMatrix::new(gaussian(n, p, seed)).unwrap();
    whiten(&double_center(&data).unwrap()).unwrap()
}

fn problem<'a>(
    wx: &'a Whitener,
    wy: &'a Whitener,
    ux0: DMatrix<f64>,
    uy0: DMatrix<f64>,
    rho: f64,
) -> JointProblem<'a> {
    JointProblem {
        xw: &wx.whitened,
        yw: &wy.whitened,
        inv_lx: &wx.inverse,
        inv_ly: &wy.inverse,
        ux0,
        uy0,
        rho,
        joint_rank: 2,
        alpha: 0.8,
        tol: 1e-10,
        max_iter: 1500,
        step: Default::default(),
    }
}

#[test]
fn gradient_matches_central_differences() {
    let wx = whitened_gaussian(12, 100, 1);
    let wy = whitened_gaussian(12, 100, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..20 {
        let ux = random_semiorthogonal(&wx, 3, &mut rng);
        let uy = random_semiorthogonal(&wy, 3, &mut rng);
        let obj = JointObjective {
            xw: &wx.whitened,
            yw: &wy.whitened,
            inv_lx: &wx.inverse,
            inv_ly: &wy.inverse,
            rho: 1.0,
            joint_rank: 2,
            alpha: 0.8,
        };
        let (_, gx, gy) = obj.value_and_gradient(&ux, &uy);
        let h = 1e-6;
        let mut fd_x = DMatrix::zeros(3, 12);
        let mut fd_y = DMatrix::zeros(3, 12);
        for i in 0..3 {
            for j in 0..12 {
                let mut plus = ux.clone();
                let mut minus = ux.clone();
                plus[(i, j)] += h;
                minus[(i, j)] -= h;
                fd_x[(i, j)] = (obj.value(&plus, &uy) - obj.value(&minus, &uy)) / (2.0 * h);
                let mut plus = uy.clone();
                let mut minus = uy.clone();
                plus[(i, j)] += h;
                minus[(i, j)] -= h;
                fd_y[(i, j)] = (obj.value(&ux, &plus) - obj.value(&ux, &minus)) / (2.0 * h);
            }
        }
        let num = ((&gx - &fd_x).norm_squared() + (&gy - &fd_y).norm_squared()).sqrt();
        let den = (gx.norm_squared() + gy.norm_squared()).sqrt();
        assert!(num / den < 1e-4, "relative error {}", num / den);
    }
}

#[test]
fn zero_rho_matches_two_single_runs() {
    let wx = whitened_gaussian(15, 200, 4);
    let wy = whitened_gaussian(15, 250, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let ux0 = random_semiorthogonal(&wx, 3, &mut rng);
    let uy0 = random_semiorthogonal(&wy, 4, &mut rng);
    let sol = curvilinear_solve(&problem(&wx, &wy, ux0.clone(), uy0.clone(), 0.0)).unwrap();
    let cfg = LngcaConfig::new(3);
    let fx = lngca_from(&wx, &ux0, &cfg).unwrap().objective();
    let fy = lngca_from(&wy, &uy0, &LngcaConfig::new(4))
        .unwrap()
        .objective();
    assert!((sol.objective() - (fx + fy)).abs() < 1e-8);
    assert!(sol.max_feasibility_error < 1e-8);
}

#[test]
fn objective_trace_is_monotone() {
    let wx = whitened_gaussian(12, 150, 7);
    let wy = whitened_gaussian(12, 150, 8);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let ux0 = random_semiorthogonal(&wx, 3, &mut rng);
    let uy0 = random_semiorthogonal(&wy, 3, &mut rng);
    let sol = curvilinear_solve(&problem(&wx, &wy, ux0, uy0, 2.0)).unwrap();
    for w in sol.objective_trace.windows(2) {
        assert!(w[1] <= w[0] + 1e-12);
    }
    assert!(sol.max_feasibility_error < 1e-8);
}

/// Three subjects whose whitened rows each take the values ±√3 on a third of
/// the features and 0 elsewhere, on disjoint supports: skewness 0, kurtosis 3.
fn moment_matched() -> DMatrix<f64> {
    let p = 36;
    let r3 = 3f64.sqrt();
    DMatrix::from_fn(3, p, |i, j| {
        let block = j / 12;
        let k = j % 12;
        if block != i {
            0.0
        } else if k < 6 {
            r3
        } else {
            -r3
        }
    })
}

#[test]
fn stationary_start_does_not_move() {
    let xw = moment_matched();
    for r in 0..3 {
        let row: Vec<f64> = xw.row(r).iter().copied().collect();
        let m2 = row.iter().map(|v| v * v).sum::<f64>() / 36.0;
        let m4 = row.iter().map(|v| v.powi(4)).sum::<f64>() / 36.0;
        assert!((m2 - 1.0).abs() < 1e-12 && (m4 - 3.0).abs() < 1e-12);
    }
    let id = DMatrix::<f64>::identity(3, 3);
    let u0 = DMatrix::from_row_slice(1, 3, &[1.0, 0.0, 0.0]);
    let p = JointProblem {
        xw: &xw,
        yw: &xw,
        inv_lx: &id,
        inv_ly: &id,
        ux0: u0.clone(),
        uy0: u0.clone(),
        rho: 0.0,
        joint_rank: 1,
        alpha: 0.8,
        tol: 1e-10,
        max_iter: 1,
        step: Default::default(),
    };
    let sol = curvilinear_solve(&p).unwrap();
    assert!((&sol.ux - &u0).norm() < 1e-10);
    assert!((&sol.uy - &u0).norm() < 1e-10);
}

fn toy_init(
    seed: u64,
) -> (
    sing_core::pipeline::Prepared,
    SingConfig,
    sing_core::JointInit,
) {
    let toy = generate_toy(&ToySpec {
        grid: 15,
        nodes: 30,
        seed,
        ..ToySpec::default()
    })
    .unwrap();
    let cfg = SingConfig {
        seed,
        restarts: 4,
        n_perm: 100,
        ..SingConfig::new(4, 4)
    };
    let prepared = prepare(&toy.x, &toy.y, &cfg).unwrap();
    let mut init = initial_stages(&prepared, &cfg).unwrap().joint_init();
    init.joint_rank = 2;
    (prepared, cfg, init)
}

#[test]
fn joint_distance_falls_as_rho_grows() {
    for seed in 0..5 {
        let (prepared, cfg, init) = toy_init(seed);
        let distances: Vec<f64> = [RhoExtent::Small, RhoExtent::Medium, RhoExtent::Large]
            .into_iter()
            .map(|rho_extent| {
                let cfg = SingConfig {
                    rho_extent,
                    ..cfg.clone()
                };
                solve_prepared(&prepared, &cfg, &init)
                    .unwrap()
                    .diagnostics
                    .joint_distance
            })
            .collect();
        for w in distances.windows(2) {
            assert!(w[1] <= w[0] + 1e-12, "seed {seed}: {distances:?}");
        }
    }
}

#[test]
fn sign_of_initial_joint_row_is_irrelevant() {
    let (prepared, cfg, init) = toy_init(7);
    let a = solve_prepared(&prepared, &cfg, &init).unwrap();
    let mut flipped = init.clone();
    flipped.ux.row_mut(0).neg_mut();
    let b = solve_prepared(&prepared, &cfg, &flipped).unwrap();
    assert!((a.diagnostics.objective - b.diagnostics.objective).abs() < 1e-6);
    assert!((a.diagnostics.joint_distance - b.diagnostics.joint_distance).abs() < 1e-6);
}

#[test]
fn planted_joint_scores_agree_across_datasets() {
    let toy = generate_toy(&ToySpec::default()).unwrap();
    let cfg = SingConfig::new(4, 4);
    let prepared = prepare(&toy.x, &toy.y, &cfg).unwrap();
    let init = initial_stages(&prepared, &cfg).unwrap().joint_init();
    assert_eq!(init.joint_rank, 2);
    let r = solve_prepared(&prepared, &cfg, &init).unwrap();
    for l in 0..2 {
        let c = corr(&col(&r.m_jx, l), &col(&r.m_jy, l));
        assert!(c > 0.99, "column {l}: {c}");
    }
}
