mod common;

use common::{best_pairing, cols, gaussian, rows, skewness};
use sing_core::nalgebra::DMatrix;
use sing_core::pipeline::{initial_stages, prepare, solve_prepared};
use sing_core::{
    generate_toy, matcher::pmse, sing_decompose, sing_from_init, DataMatrix, RhoExtent, SingConfig,
    SingError, SingResult, ToySpec,
};

fn small_toy(seed: u64) -> sing_core::simgen::ToyData {
    generate_toy(&ToySpec {
        grid: 15,
        nodes: 30,
        seed,
        ..ToySpec::default()
    })
    .unwrap()
}

fn check_invariants(r: &SingResult) {
    for m in [&r.m_j, &r.m_jx, &r.m_jy] {
        for c in m.column_iter() {
            assert!((c.norm() - 1.0).abs() < 1e-8);
        }
    }
    let mut blocks = vec![&r.s_jx, &r.s_jy];
    if let Some(ind) = &r.individual {
        blocks.push(&ind.s_ix);
        blocks.push(&ind.s_iy);
    }
    for s in blocks {
        for row in rows(s) {
            assert!(skewness(&row) >= 0.0);
        }
    }
    assert!(r.diagnostics.max_feasibility_error < 1e-8);
}

#[test]
fn toy_model_recovery() {
    let toy = generate_toy(&ToySpec::default()).unwrap();
    let r = sing_decompose(&toy.x, &toy.y, &SingConfig::new(4, 4)).unwrap();
    assert_eq!(r.diagnostics.joint_rank, 2);
    check_invariants(&r);
    for c in best_pairing(&cols(&r.m_j), &cols(&toy.truth.m_j)) {
        assert!(c > 0.95, "M_j corr {c}");
    }
    for (est, truth) in [(&r.s_jx, &toy.truth.s_jx), (&r.s_jy, &toy.truth.s_jy)] {
        for c in best_pairing(&rows(est), &rows(truth)) {
            assert!(c > 0.90, "S corr {c}");
        }
    }
    // D_y = diag(-5, 2) relative to D_x = I: opposite signs, magnitudes near 5:2
    let ratios: Vec<f64> = r
        .scale_y
        .iter()
        .zip(&r.scale_x)
        .map(|(y, x)| y / x)
        .collect();
    assert!(
        ratios.iter().any(|&q| q < -3.0) && ratios.iter().any(|&q| q > 1.0),
        "{ratios:?}"
    );
}

#[test]
fn larger_rho_tightens_joint_scores() {
    let toy = generate_toy(&ToySpec {
        seed: 3,
        ..ToySpec::default()
    })
    .unwrap();
    let cfg = SingConfig {
        seed: 3,
        ..SingConfig::new(4, 4)
    };
    let prepared = prepare(&toy.x, &toy.y, &cfg).unwrap();
    let stages = initial_stages(&prepared, &cfg).unwrap();
    let init = stages.joint_init();
    assert_eq!(init.joint_rank, 2);
    let small = solve_prepared(&prepared, &cfg, &init).unwrap();
    let large = solve_prepared(
        &prepared,
        &SingConfig {
            rho_extent: RhoExtent::Large,
            ..cfg.clone()
        },
        &init,
    )
    .unwrap();
    assert!((large.diagnostics.rho / small.diagnostics.rho - 100.0).abs() < 1e-9);
    let p_small = pmse(&small.m_jx, &small.m_jy).unwrap();
    let p_large = pmse(&large.m_jx, &large.m_jy).unwrap();
    assert!(p_large <= p_small, "{p_large} > {p_small}");
}

#[test]
fn independent_data_give_empty_joint_blocks() {
    let x = DataMatrix::new(gaussian(30, 120, 1)).unwrap();
    let y = DataMatrix::new(gaussian(30, 150, 2)).unwrap();
    let cfg = SingConfig {
        restarts: 3,
        n_perm: 200,
        ..SingConfig::new(2, 3)
    };
    let r = sing_decompose(&x, &y, &cfg).unwrap();
    assert_eq!(r.diagnostics.joint_rank, 0);
    assert_eq!(r.s_jx.shape(), (0, 120));
    assert_eq!(r.s_jy.shape(), (0, 150));
    assert_eq!(r.m_j.shape(), (30, 0));
    assert!(r.diagnostics.step_policy.is_none());
    assert!(r
        .diagnostics
        .warnings
        .iter()
        .any(|w| w.contains("joint rank 0")));
    let ind = r.individual.as_ref().unwrap();
    assert_eq!((ind.s_ix.nrows(), ind.s_iy.nrows()), (2, 3));
    check_invariants(&r);
}

#[test]
fn deterministic_and_staged_equivalent() {
    let toy = small_toy(5);
    let cfg = SingConfig {
        seed: 11,
        restarts: 5,
        ..SingConfig::new(4, 4)
    };
    let a = sing_decompose(&toy.x, &toy.y, &cfg).unwrap();
    let b = sing_decompose(&toy.x, &toy.y, &cfg).unwrap();
    assert_eq!(a, b);
    check_invariants(&a);

    let prepared = prepare(&toy.x, &toy.y, &cfg).unwrap();
    let init = initial_stages(&prepared, &cfg).unwrap().joint_init();
    let staged = sing_from_init(&toy.x, &toy.y, &cfg, &init).unwrap();
    for (u, v) in [
        (&a.s_jx, &staged.s_jx),
        (&a.m_j, &staged.m_j),
        (&a.uy, &staged.uy),
    ] {
        assert_eq!(u, v);
    }
}

#[test]
fn full_joint_rank_leaves_empty_individual_blocks() {
    let toy = small_toy(6);
    let cfg = SingConfig {
        restarts: 4,
        ..SingConfig::new(2, 2)
    };
    let prepared = prepare(&toy.x, &toy.y, &cfg).unwrap();
    let mut init = initial_stages(&prepared, &cfg).unwrap().joint_init();
    init.joint_rank = 2;
    let r = solve_prepared(&prepared, &cfg, &init).unwrap();
    let ind = r.individual.unwrap();
    assert_eq!(ind.s_ix.shape(), (0, toy.x.p()));
    assert_eq!(ind.m_iy.shape(), (toy.y.n(), 0));
}

#[test]
fn reconstruction_beats_random_unmixing() {
    use rand::SeedableRng;
    use sing_core::lngca::random_semiorthogonal;
    use sing_core::{estimate_mixing_ols, OlsMode};

    for seed in 0..10 {
        let toy = small_toy(100 + seed);
        let cfg = SingConfig {
            seed,
            restarts: 3,
            n_perm: 100,
            ..SingConfig::new(4, 4)
        };
        let r = sing_decompose(&toy.x, &toy.y, &cfg).unwrap();
        let prepared = prepare(&toy.x, &toy.y, &cfg).unwrap();
        let w = &prepared.x;
        let residual = |s: &DMatrix<f64>| {
            let m = estimate_mixing_ols(s, &w.centered, OlsMode::Full)
                .unwrap()
                .m;
            (&w.centered - m * s).norm()
        };
        let fitted = residual(&(&r.ux * &w.whitened));
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let random = residual(&(random_semiorthogonal(w, 4, &mut rng) * &w.whitened));
        assert!(fitted < random, "seed {seed}: {fitted} vs {random}");
    }
}

#[test]
fn missing_rank_and_bad_rank() {
    let x = DataMatrix::new(gaussian(10, 30, 1)).unwrap();
    let y = DataMatrix::new(gaussian(10, 30, 2)).unwrap();
    let err = sing_decompose(&x, &y, &SingConfig::default()).unwrap_err();
    assert!(matches!(err, SingError::MissingRank { dataset: "X" }));
    assert!(err.to_string().contains("rank"));
    let err = sing_decompose(&x, &y, &SingConfig::new(9, 2)).unwrap_err();
    assert!(matches!(err, SingError::InvalidRank(_)));
}
