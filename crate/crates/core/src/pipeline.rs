//! Two-dataset orchestration: per-dataset extraction, matching, joint-rank
//! testing and the coupled solve, assembled into joint and individual parts.
//!
//! Random streams are derived from one seed: the X extraction uses `seed`,
//! the Y extraction `seed + 1` and the permutation test `seed + 2`. The
//! staged entry point [`sing_from_init`] takes matched unmixing matrices
//! and a joint rank, so running the stages by hand with those seeds gives
//! the same result as [`sing_decompose`].

use nalgebra::DMatrix;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::curvilinear::StepConfig;
use crate::error::{Result, SingError};
use crate::lngca::{
    estimate_mixing_ols, lngca_whitened, validate_rank, Decomposition, LngcaConfig, OlsMode,
};
use crate::matcher::{
    average_joint_scores, center_columns, greedy_match, pearson, perm_test_joint_rank,
    JointRankTest, MatchResult, DEFAULT_ALPHA_LEVEL, DEFAULT_N_PERM,
};
use crate::nongauss::{check_alpha, sign_normalize, DEFAULT_ALPHA};
use crate::preprocess::{
    double_center, standardize_iterative, whiten_with, CovarianceScaling, DataMatrix, Whitener,
    DEFAULT_EIGEN_TOL,
};
use crate::sing_solver::{curvilinear_solve, select_rho, JointProblem, RhoExtent, StepPolicy};
use crate::stream_rng;

const STANDARDIZE_TOL: f64 = 1e-6;
const STANDARDIZE_MAX_ITER: usize = 50;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SingConfig {
    pub rank_x: Option<usize>,
    pub rank_y: Option<usize>,
    /// Iteratively standardize columns before whitening; otherwise only
    /// double-center.
    pub standardize: bool,
    /// Return the individual (non-joint) components as well.
    pub individual: bool,
    pub rho_extent: RhoExtent,
    pub alpha: f64,
    pub n_perm: usize,
    pub alpha_level: f64,
    pub restarts: usize,
    pub max_iter: usize,
    pub tol: f64,
    pub seed: u64,
    pub step: StepConfig,
    pub covariance: CovarianceScaling,
    /// Report subject scores as least-squares fits of the data on the final
    /// loadings instead of `L⁻Uᵀ`.
    pub ols_scores: bool,
}

impl Default for SingConfig {
    fn default() -> Self {
        Self {
            rank_x: None,
            rank_y: None,
            standardize: false,
            individual: true,
            rho_extent: RhoExtent::default(),
            alpha: DEFAULT_ALPHA,
            n_perm: DEFAULT_N_PERM,
            alpha_level: DEFAULT_ALPHA_LEVEL,
            restarts: 20,
            max_iter: 1500,
            tol: 1e-10,
            seed: 0,
            step: StepConfig::default(),
            covariance: CovarianceScaling::default(),
            ols_scores: false,
        }
    }
}

impl SingConfig {
    pub fn new(rank_x: usize, rank_y: usize) -> Self {
        Self {
            rank_x: Some(rank_x),
            rank_y: Some(rank_y),
            ..Self::default()
        }
    }

    pub fn seeds(&self) -> SeedPlan {
        SeedPlan {
            x: self.seed,
            y: self.seed.wrapping_add(1),
            permutation: self.seed.wrapping_add(2),
        }
    }

    /// Extraction settings for one dataset.
    pub fn lngca_config(&self, rank: usize, seed: u64) -> LngcaConfig {
        LngcaConfig {
            rank,
            alpha: self.alpha,
            restarts: self.restarts,
            seed,
            max_iter: self.max_iter,
            tol: self.tol,
            step: self.step,
            covariance: self.covariance,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedPlan {
    pub x: u64,
    pub y: u64,
    pub permutation: u64,
}

/// Convergence summary of one single-dataset extraction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageSummary {
    pub converged: bool,
    pub iterations: usize,
    pub best_restart: usize,
    pub objective: f64,
    pub jb_values: Vec<f64>,
}

impl From<&Decomposition> for StageSummary {
    fn from(d: &Decomposition) -> Self {
        Self {
            converged: d.converged,
            iterations: d.iterations,
            best_restart: d.best_restart,
            objective: d.objective(),
            jb_values: d.jb_values.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub rho: f64,
    pub rho_extent: RhoExtent,
    pub joint_rank: usize,
    /// Summed chordal distance between joint score columns at the solution.
    pub joint_distance: f64,
    pub joint_converged: bool,
    pub joint_iterations: usize,
    pub objective: f64,
    /// `None` when no joint solve ran (joint rank 0).
    pub step_policy: Option<StepPolicy>,
    pub lngca_x: Option<StageSummary>,
    pub lngca_y: Option<StageSummary>,
    pub matched_distances: Option<Vec<f64>>,
    pub rank_test: Option<JointRankTest>,
    /// Which score matrix has its rows shuffled by the permutation test.
    pub permuted_scores: String,
    pub max_feasibility_error: f64,
    pub seeds: SeedPlan,
    pub warnings: Vec<String>,
}

/// Components that are not shared across datasets.
#[derive(Debug, Clone, PartialEq)]
pub struct IndividualParts {
    pub s_ix: DMatrix<f64>,
    pub s_iy: DMatrix<f64>,
    pub m_ix: DMatrix<f64>,
    pub m_iy: DMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SingResult {
    /// r_J×p_x joint loadings, positive skewness per row.
    pub s_jx: DMatrix<f64>,
    pub s_jy: DMatrix<f64>,
    /// n×r_J shared scores, unit-norm columns.
    pub m_j: DMatrix<f64>,
    /// Unit-norm joint scores of X, one column per joint row of `s_jx`.
    pub m_jx: DMatrix<f64>,
    /// Unit-norm joint scores of Y, sign-aligned with `m_jx`.
    pub m_jy: DMatrix<f64>,
    /// Signed diagonal of D_x: `m_jx · diag(scale_x)` is the unnormalized
    /// joint mixing block of X.
    pub scale_x: Vec<f64>,
    pub scale_y: Vec<f64>,
    pub individual: Option<IndividualParts>,
    /// Final unmixing matrices, joint rows first.
    pub ux: DMatrix<f64>,
    pub uy: DMatrix<f64>,
    pub diagnostics: Diagnostics,
}

/// Matched starting point for the joint solve.
#[derive(Debug, Clone, PartialEq)]
pub struct JointInit {
    pub ux: DMatrix<f64>,
    pub uy: DMatrix<f64>,
    pub joint_rank: usize,
}

/// Centers (and optionally standardizes) one dataset and whitens it.
pub fn preprocess_dataset(
    data: &DataMatrix,
    standardize: bool,
    covariance: CovarianceScaling,
    warnings: &mut Vec<String>,
) -> Result<Whitener> {
    let prepared = if standardize {
        let st = standardize_iterative(data, STANDARDIZE_TOL, STANDARDIZE_MAX_ITER)?;
        if !st.converged {
            warnings.push(format!(
                "standardization stopped after {} sweeps with variance deviation {:e}",
                st.iterations, st.final_deviation
            ));
        }
        st.data
    } else {
        double_center(data)?
    };
    whiten_with(&prepared, covariance, DEFAULT_EIGEN_TOL)
}

/// Both datasets, preprocessed and whitened.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub x: Whitener,
    pub y: Whitener,
    pub warnings: Vec<String>,
}

pub fn prepare(x: &DataMatrix, y: &DataMatrix, config: &SingConfig) -> Result<Prepared> {
    if x.n() != y.n() {
        return Err(SingError::DimensionMismatch(format!(
            "X is {}×{} and Y is {}×{}; both must have the same number of subjects (rows)",
            x.n(),
            x.p(),
            y.n(),
            y.p()
        )));
    }
    let mut warnings = Vec::new();
    let wx = preprocess_dataset(x, config.standardize, config.covariance, &mut warnings)?;
    let wy = preprocess_dataset(y, config.standardize, config.covariance, &mut warnings)?;
    Ok(Prepared {
        x: wx,
        y: wy,
        warnings,
    })
}

/// Least-squares subject scores of an extraction against its centered data.
pub fn ols_scores(decomposition: &Decomposition, whitener: &Whitener) -> Result<DMatrix<f64>> {
    Ok(estimate_mixing_ols(&decomposition.s, &whitener.centered, OlsMode::Full)?.m)
}

fn check_config(config: &SingConfig) -> Result<()> {
    check_alpha(config.alpha)?;
    config.step.validate()?;
    if !(config.tol > 0.0) || config.max_iter == 0 {
        return Err(SingError::InvalidInput(
            "tol must be positive and max_iter at least 1".into(),
        ));
    }
    Ok(())
}

/// Per-dataset extractions, their matching and the joint-rank test.
#[derive(Debug, Clone)]
pub struct InitialStages {
    pub fit_x: Decomposition,
    pub fit_y: Decomposition,
    pub matched: MatchResult,
    pub rank_test: JointRankTest,
}

impl InitialStages {
    pub fn joint_init(&self) -> JointInit {
        JointInit {
            ux: self.matched.ux.clone(),
            uy: self.matched.uy.clone(),
            joint_rank: self.rank_test.joint_rank,
        }
    }
}

/// Extracts components from both datasets, matches them on centered OLS
/// scores and tests the joint rank.
pub fn initial_stages(prepared: &Prepared, config: &SingConfig) -> Result<InitialStages> {
    let rank_x = config
        .rank_x
        .ok_or(SingError::MissingRank { dataset: "X" })?;
    let rank_y = config
        .rank_y
        .ok_or(SingError::MissingRank { dataset: "Y" })?;
    check_config(config)?;
    validate_rank(rank_x, &prepared.x)?;
    validate_rank(rank_y, &prepared.y)?;

    let seeds = config.seeds();
    let cfg_x = config.lngca_config(rank_x, seeds.x);
    let cfg_y = config.lngca_config(rank_y, seeds.y);
    let (fit_x, fit_y) = rayon::join(
        || lngca_whitened(&prepared.x, &cfg_x),
        || lngca_whitened(&prepared.y, &cfg_y),
    );
    let (fit_x, fit_y) = (fit_x?, fit_y?);

    let mx = center_columns(&ols_scores(&fit_x, &prepared.x)?);
    let my = center_columns(&ols_scores(&fit_y, &prepared.y)?);
    let matched = greedy_match(&mx, &my, &fit_x.u, &fit_y.u)?;
    let rank_test = perm_test_joint_rank(
        &matched.mx,
        &matched.my,
        config.n_perm,
        config.alpha_level,
        seeds.permutation,
    )?;
    Ok(InitialStages {
        fit_x,
        fit_y,
        matched,
        rank_test,
    })
}

/// Runs the full decomposition from raw data.
pub fn sing_decompose(x: &DataMatrix, y: &DataMatrix, config: &SingConfig) -> Result<SingResult> {
    if config.rank_x.is_none() {
        return Err(SingError::MissingRank { dataset: "X" });
    }
    if config.rank_y.is_none() {
        return Err(SingError::MissingRank { dataset: "Y" });
    }
    let prepared = prepare(x, y, config)?;
    let stages = initial_stages(&prepared, config)?;
    let mut result = solve_prepared(&prepared, config, &stages.joint_init())?;
    let InitialStages {
        fit_x,
        fit_y,
        matched,
        rank_test,
    } = stages;
    let d = &mut result.diagnostics;
    for (name, fit) in [("X", &fit_x), ("Y", &fit_y)] {
        if !fit.converged {
            d.warnings.push(format!(
                "extraction on {name} did not converge in {} iterations",
                fit.iterations
            ));
        }
    }
    d.max_feasibility_error = d
        .max_feasibility_error
        .max(fit_x.max_feasibility_error)
        .max(fit_y.max_feasibility_error);
    d.lngca_x = Some(StageSummary::from(&fit_x));
    d.lngca_y = Some(StageSummary::from(&fit_y));
    d.matched_distances = Some(matched.matched_distances);
    d.rank_test = Some(rank_test);
    Ok(result)
}

/// Runs the joint solve and assembly from matched unmixing matrices, skipping
/// extraction, matching and the permutation test.
pub fn sing_from_init(
    x: &DataMatrix,
    y: &DataMatrix,
    config: &SingConfig,
    init: &JointInit,
) -> Result<SingResult> {
    check_config(config)?;
    let prepared = prepare(x, y, config)?;
    for (name, u, w, rank) in [
        ("Ux", &init.ux, &prepared.x, config.rank_x),
        ("Uy", &init.uy, &prepared.y, config.rank_y),
    ] {
        if u.ncols() != w.n() {
            return Err(SingError::DimensionMismatch(format!(
                "{name} has {} columns but the data have {} subjects",
                u.ncols(),
                w.n()
            )));
        }
        validate_rank(u.nrows(), w)?;
        if let Some(r) = rank.filter(|&r| r != u.nrows()) {
            return Err(SingError::InvalidRank(format!(
                "{name} has {} rows but rank {r} was requested",
                u.nrows()
            )));
        }
    }
    solve_prepared(&prepared, config, init)
}

/// Joint solve from a matched start on already prepared data, followed by
/// sign normalization and assembly of the joint and individual parts.
pub fn solve_prepared(
    prepared: &Prepared,
    config: &SingConfig,
    init: &JointInit,
) -> Result<SingResult> {
    check_config(config)?;
    let rj = init.joint_rank;
    let (wx, wy) = (&prepared.x, &prepared.y);
    if rj > init.ux.nrows().min(init.uy.nrows()) {
        return Err(SingError::InvalidRank(format!(
            "joint rank {rj} exceeds min(r_x, r_y) = {}",
            init.ux.nrows().min(init.uy.nrows())
        )));
    }
    let mut warnings = prepared.warnings.clone();

    let (ux, uy, rho, joint_distance, converged, iterations, objective, policy, feas) = if rj == 0 {
        warnings.push("no joint components detected (joint rank 0); joint blocks are empty".into());
        let feas = crate::curvilinear::feasibility_error(&init.ux)
            .max(crate::curvilinear::feasibility_error(&init.uy));
        let objective = -crate::nongauss::jb_block(&init.ux, &wx.whitened, config.alpha, false).0
            - crate::nongauss::jb_block(&init.uy, &wy.whitened, config.alpha, false).0;
        (
            init.ux.clone(),
            init.uy.clone(),
            0.0,
            0.0,
            true,
            0,
            objective,
            None,
            feas,
        )
    } else {
        let sx0 = init.ux.rows(0, rj) * &wx.whitened;
        let sy0 = init.uy.rows(0, rj) * &wy.whitened;
        let rho = select_rho(&sx0, &sy0, config.rho_extent, config.alpha)?;
        let problem = JointProblem {
            xw: &wx.whitened,
            yw: &wy.whitened,
            inv_lx: &wx.inverse,
            inv_ly: &wy.inverse,
            ux0: init.ux.clone(),
            uy0: init.uy.clone(),
            rho,
            joint_rank: rj,
            alpha: config.alpha,
            tol: config.tol,
            max_iter: config.max_iter,
            step: config.step,
        };
        let sol = curvilinear_solve(&problem)?;
        if !sol.converged {
            warnings.push(format!(
                "joint solve did not converge in {} iterations",
                sol.iterations
            ));
        }
        let objective = sol.objective();
        (
            sol.ux,
            sol.uy,
            rho,
            sol.joint_distance,
            sol.converged,
            sol.iterations,
            objective,
            Some(sol.step_policy),
            sol.max_feasibility_error,
        )
    };

    let parts_x = split_components(&ux, wx, rj, config.ols_scores)?;
    let parts_y = split_components(&uy, wy, rj, config.ols_scores)?;

    let mut m_jy = parts_y.m_joint;
    let mut scale_y = parts_y.scales;
    for (l, scale) in scale_y.iter_mut().enumerate().take(rj) {
        let cx = parts_x.m_joint.column(l).into_owned();
        let cy = m_jy.column(l).into_owned();
        if pearson(&cx, &cy) < 0.0 {
            m_jy.column_mut(l).neg_mut();
            *scale = -*scale;
        }
    }
    let m_j = if rj == 0 {
        DMatrix::zeros(wx.n(), 0)
    } else {
        average_joint_scores(&parts_x.m_joint, &m_jy)?
    };

    let individual = config.individual.then_some(IndividualParts {
        s_ix: parts_x.s_individual,
        s_iy: parts_y.s_individual,
        m_ix: parts_x.m_individual,
        m_iy: parts_y.m_individual,
    });

    Ok(SingResult {
        s_jx: parts_x.s_joint,
        s_jy: parts_y.s_joint,
        m_j,
        m_jx: parts_x.m_joint,
        m_jy,
        scale_x: parts_x.scales,
        scale_y,
        individual,
        ux,
        uy,
        diagnostics: Diagnostics {
            rho,
            rho_extent: config.rho_extent,
            joint_rank: rj,
            joint_distance,
            joint_converged: converged,
            joint_iterations: iterations,
            objective,
            step_policy: policy,
            lngca_x: None,
            lngca_y: None,
            matched_distances: None,
            rank_test: None,
            permuted_scores: "Y".into(),
            max_feasibility_error: feas,
            seeds: config.seeds(),
            warnings,
        },
    })
}

struct Components {
    s_joint: DMatrix<f64>,
    m_joint: DMatrix<f64>,
    scales: Vec<f64>,
    s_individual: DMatrix<f64>,
    m_individual: DMatrix<f64>,
}

/// Loadings and scores of one dataset, sign-normalized, with the first `rj`
/// score columns scaled to unit norm.
fn split_components(u: &DMatrix<f64>, w: &Whitener, rj: usize, ols: bool) -> Result<Components> {
    let s = u * &w.whitened;
    let m = if ols {
        estimate_mixing_ols(&s, &w.centered, OlsMode::Full)?.m
    } else {
        &w.inverse * u.transpose()
    };
    let normalized = sign_normalize(&s, Some(&m))?;
    let s = normalized.s;
    let m = normalized.m.expect("scores were supplied");
    let r = s.nrows();

    let mut m_joint = m.columns(0, rj).into_owned();
    let mut scales = Vec::with_capacity(rj);
    for (l, mut col) in m_joint.column_iter_mut().enumerate() {
        let norm = col.norm();
        if !(norm > 0.0) {
            return Err(SingError::Degenerate(format!(
                "joint score column {l} has zero norm"
            )));
        }
        col /= norm;
        scales.push(norm);
    }
    Ok(Components {
        s_joint: s.rows(0, rj).into_owned(),
        m_joint,
        scales,
        s_individual: s.rows(rj, r - rj).into_owned(),
        m_individual: m.columns(rj, r - rj).into_owned(),
    })
}

/// Outcome of [`screen_rank`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankScreen {
    pub rank: usize,
    /// 99th percentile of the null maximum JB.
    pub threshold: f64,
    pub jb_values: Vec<f64>,
    pub null_draws: usize,
}

/// Rough rank suggestion, not part of the estimation method: counts the
/// components (out of `max_rank`) whose JB exceeds the 99th percentile of
/// the best single-component JB found on Gaussian data of the same shape.
pub fn screen_rank(
    data: &DataMatrix,
    max_rank: usize,
    null_draws: usize,
    config: &LngcaConfig,
) -> Result<RankScreen> {
    if null_draws == 0 {
        return Err(SingError::InvalidInput(
            "at least one null draw is required".into(),
        ));
    }
    let fit = crate::lngca::lngca(
        data,
        &LngcaConfig {
            rank: max_rank,
            ..config.clone()
        },
    )?;
    let (n, p) = (data.n(), data.p());
    let mut null: Vec<f64> = Vec::with_capacity(null_draws);
    for draw in 0..null_draws {
        let mut rng = stream_rng(config.seed, (1 << 32) | draw as u64);
        let g = DMatrix::from_fn(n, p, |_, _| StandardNormal.sample(&mut rng));
        let g = DataMatrix::new(g)?;
        let cfg = LngcaConfig {
            rank: 1,
            seed: config.seed.wrapping_add(draw as u64 + 1),
            ..config.clone()
        };
        null.push(crate::lngca::lngca(&g, &cfg)?.jb_values[0]);
    }
    null.sort_by(f64::total_cmp);
    let idx = ((0.99 * null_draws as f64).ceil() as usize).clamp(1, null_draws) - 1;
    let threshold = null[idx];
    Ok(RankScreen {
        rank: fit.jb_values.iter().filter(|&&v| v > threshold).count(),
        threshold,
        jb_values: fit.jb_values,
        null_draws,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn gaussian(n: usize, p: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DMatrix::from_fn(n, p, |_, _| StandardNormal.sample(&mut rng))
    }

    #[test]
    fn missing_rank_is_reported() {
        let x = DataMatrix::new(gaussian(10, 30, 1)).unwrap();
        let y = DataMatrix::new(gaussian(10, 40, 2)).unwrap();
        let cfg = SingConfig {
            rank_x: Some(2),
            ..SingConfig::default()
        };
        let err = sing_decompose(&x, &y, &cfg).unwrap_err();
        assert!(matches!(err, SingError::MissingRank { dataset: "Y" }));
    }

    #[test]
    fn subject_mismatch_names_shapes() {
        let x = DataMatrix::new(gaussian(10, 30, 1)).unwrap();
        let y = DataMatrix::new(gaussian(11, 40, 2)).unwrap();
        let err = sing_decompose(&x, &y, &SingConfig::new(2, 2)).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("10×30") && msg.contains("11×40"), "{msg}");
    }

    #[test]
    fn seeds_are_offsets() {
        let cfg = SingConfig {
            seed: u64::MAX,
            ..SingConfig::default()
        };
        let s = cfg.seeds();
        assert_eq!((s.x, s.y, s.permutation), (u64::MAX, 0, 1));
    }
}
