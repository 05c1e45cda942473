//! Single-dataset non-Gaussian component extraction.
//!
//! Finds r orthonormal directions in whitened subject space whose projected
//! loadings `s = uᵀX_w` have maximal total JB statistic. Each restart draws a
//! random semiorthogonal start and runs the Cayley descent; the best final
//! objective wins.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::curvilinear::{self, BlockObjective, StepConfig, Stopping, Subspace};
use crate::error::{Result, SingError};
use crate::nongauss::{self, check_alpha, DEFAULT_ALPHA};
use crate::preprocess::{
    double_center, whiten_with, CovarianceScaling, DataMatrix, Whitener, DEFAULT_EIGEN_TOL,
};
use crate::stream_rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LngcaConfig {
    pub rank: usize,
    pub alpha: f64,
    pub restarts: usize,
    pub seed: u64,
    pub max_iter: usize,
    pub tol: f64,
    pub step: StepConfig,
    pub covariance: CovarianceScaling,
}

impl LngcaConfig {
    pub fn new(rank: usize) -> Self {
        Self {
            rank,
            alpha: DEFAULT_ALPHA,
            restarts: 20,
            seed: 0,
            max_iter: 1500,
            tol: 1e-10,
            step: StepConfig::default(),
            covariance: CovarianceScaling::default(),
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_restarts(mut self, restarts: usize) -> Self {
        self.restarts = restarts;
        self
    }
}

/// Output of [`lngca`]: components ordered by decreasing JB.
#[derive(Debug, Clone, PartialEq)]
pub struct Decomposition {
    /// r×n semiorthogonal unmixing matrix.
    pub u: DMatrix<f64>,
    /// r×p loadings `U X_w`.
    pub s: DMatrix<f64>,
    /// n×r subject scores `L⁻ Uᵀ`.
    pub m: DMatrix<f64>,
    pub jb_values: Vec<f64>,
    pub converged: bool,
    /// Negative total JB at the start and after each accepted step of the
    /// winning restart.
    pub objective_trace: Vec<f64>,
    pub best_restart: usize,
    pub iterations: usize,
    pub max_feasibility_error: f64,
}

impl Decomposition {
    pub fn objective(&self) -> f64 {
        *self.objective_trace.last().expect("trace is never empty")
    }
}

/// Negative summed JB of `U W`.
pub(crate) struct JbObjective<'a> {
    pub whitened: &'a DMatrix<f64>,
    pub alpha: f64,
}

impl BlockObjective for JbObjective<'_> {
    fn value(&self, blocks: &[DMatrix<f64>]) -> f64 {
        -nongauss::jb_block(&blocks[0], self.whitened, self.alpha, false).0
    }

    fn value_and_gradient(&self, blocks: &[DMatrix<f64>]) -> (f64, Vec<DMatrix<f64>>) {
        let (v, g) = nongauss::jb_block(&blocks[0], self.whitened, self.alpha, true);
        (-v, vec![-g.expect("gradient requested")])
    }
}

/// Runs the Cayley descent for one JB block from `u0`.
pub(crate) fn solve_single(
    whitened: &DMatrix<f64>,
    u0: DMatrix<f64>,
    alpha: f64,
    stopping: Stopping,
    step: &StepConfig,
) -> Result<curvilinear::Outcome> {
    let Some(sub) = Subspace::for_start(whitened, &u0) else {
        return curvilinear::minimize(&JbObjective { whitened, alpha }, vec![u0], stopping, step);
    };
    let reduced = sub.data(whitened);
    let objective = JbObjective {
        whitened: &reduced,
        alpha,
    };
    let mut outcome = curvilinear::minimize(&objective, vec![sub.restrict(&u0)], stopping, step)?;
    outcome.blocks = outcome.blocks.iter().map(|b| sub.extend(b)).collect();
    Ok(outcome)
}

/// Random r×n matrix with orthonormal rows lying in the whitener's retained
/// eigenspace.
pub fn random_semiorthogonal<R: Rng>(
    whitener: &Whitener,
    rank: usize,
    rng: &mut R,
) -> DMatrix<f64> {
    let n = whitener.n();
    let k = whitener.eigen_rank;
    let coords = DMatrix::from_fn(k, rank, |_, _| rng.sample::<f64, _>(StandardNormal));
    let q = coords.qr().q();
    // columns of basis·q are orthonormal because basis has orthonormal columns
    let v = &whitener.basis * q;
    debug_assert_eq!(v.nrows(), n);
    v.transpose()
}

pub(crate) fn validate_rank(rank: usize, whitener: &Whitener) -> Result<()> {
    let n = whitener.n();
    if rank == 0 || rank + 2 > n || rank > whitener.eigen_rank {
        return Err(SingError::InvalidRank(format!(
            "rank {rank} must satisfy 1 <= r <= n - 2 = {} (retained eigen-rank {})",
            n.saturating_sub(2),
            whitener.eigen_rank
        )));
    }
    Ok(())
}

/// Double-centers (unless already done), whitens and runs [`lngca_whitened`].
pub fn lngca(data: &DataMatrix, config: &LngcaConfig) -> Result<Decomposition> {
    let centered;
    let data = if data.is_double_centered() {
        data
    } else {
        centered = double_center(data)?;
        &centered
    };
    let whitener = whiten_with(data, config.covariance, DEFAULT_EIGEN_TOL)?;
    lngca_whitened(&whitener, config)
}

pub fn lngca_whitened(whitener: &Whitener, config: &LngcaConfig) -> Result<Decomposition> {
    check_alpha(config.alpha)?;
    validate_rank(config.rank, whitener)?;
    config.step.validate()?;
    if config.restarts == 0 {
        return Err(SingError::InvalidInput(
            "at least one restart is required".into(),
        ));
    }
    let stopping = Stopping {
        tol: config.tol,
        max_iter: config.max_iter,
    };

    let outcomes: Vec<Result<curvilinear::Outcome>> = (0..config.restarts)
        .into_par_iter()
        .map(|restart| {
            let mut rng = stream_rng(config.seed, restart as u64);
            let u0 = random_semiorthogonal(whitener, config.rank, &mut rng);
            solve_single(&whitener.whitened, u0, config.alpha, stopping, &config.step).map_err(
                |e| SingError::Restart {
                    restart,
                    source: Box::new(e),
                },
            )
        })
        .collect();

    let mut best: Option<(usize, curvilinear::Outcome)> = None;
    for (restart, outcome) in outcomes.into_iter().enumerate() {
        let outcome = outcome?;
        let better = match &best {
            None => true,
            Some((_, b)) => final_value(&outcome) < final_value(b),
        };
        if better {
            best = Some((restart, outcome));
        }
    }
    let (best_restart, outcome) = best.expect("restarts >= 1");
    Ok(assemble(whitener, outcome, best_restart, config.alpha))
}

/// Single descent from a given semiorthogonal start, without restarts.
pub fn lngca_from(
    whitener: &Whitener,
    u0: &DMatrix<f64>,
    config: &LngcaConfig,
) -> Result<Decomposition> {
    check_alpha(config.alpha)?;
    config.step.validate()?;
    if u0.ncols() != whitener.n() {
        return Err(SingError::DimensionMismatch(format!(
            "start has {} columns but the data have {} subjects",
            u0.ncols(),
            whitener.n()
        )));
    }
    validate_rank(u0.nrows(), whitener)?;
    let err = curvilinear::feasibility_error(u0);
    if !(err < 1e-8) {
        return Err(SingError::InvalidInput(format!(
            "start is not semiorthogonal (||UUᵀ - I||_F = {err:e})"
        )));
    }
    let stopping = Stopping {
        tol: config.tol,
        max_iter: config.max_iter,
    };
    let outcome = solve_single(
        &whitener.whitened,
        u0.clone(),
        config.alpha,
        stopping,
        &config.step,
    )?;
    Ok(assemble(whitener, outcome, 0, config.alpha))
}

fn final_value(o: &curvilinear::Outcome) -> f64 {
    *o.trace.last().expect("trace is never empty")
}

fn assemble(
    whitener: &Whitener,
    outcome: curvilinear::Outcome,
    best_restart: usize,
    alpha: f64,
) -> Decomposition {
    let u = &outcome.blocks[0];
    let s = u * &whitener.whitened;
    let jb = nongauss::jb_rows_unchecked(&s, alpha);
    let mut order: Vec<usize> = (0..jb.len()).collect();
    order.sort_by(|&a, &b| jb[b].total_cmp(&jb[a]).then(a.cmp(&b)));
    let u = u.select_rows(&order);
    let s = s.select_rows(&order);
    let m = &whitener.inverse * u.transpose();
    Decomposition {
        jb_values: order.iter().map(|&i| jb[i]).collect(),
        u,
        s,
        m,
        converged: outcome.converged,
        objective_trace: outcome.trace,
        best_restart,
        iterations: outcome.iterations,
        max_feasibility_error: outcome.max_feasibility_error,
    }
}

/// Which formula [`estimate_mixing_ols`] applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OlsBranch {
    /// `S Sᵀ = pI`, so `M = X_c Sᵀ / p`.
    ScaledIdentity,
    /// `M = X_c Sᵀ (S Sᵀ)⁻¹`.
    FullInverse,
    /// `M = X_c Sᵀ` with no normalization.
    Raw,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OlsMode {
    #[default]
    Full,
    Raw,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OlsEstimate {
    pub m: DMatrix<f64>,
    pub branch: OlsBranch,
}

/// Least-squares subject scores for fixed loadings: `X_c Sᵀ (S Sᵀ)⁻¹`.
pub fn estimate_mixing_ols(
    s: &DMatrix<f64>,
    data: &DMatrix<f64>,
    mode: OlsMode,
) -> Result<OlsEstimate> {
    if s.ncols() != data.ncols() {
        return Err(SingError::DimensionMismatch(format!(
            "loadings have {} columns but data has {}",
            s.ncols(),
            data.ncols()
        )));
    }
    let xst = data * s.transpose();
    if mode == OlsMode::Raw {
        return Ok(OlsEstimate {
            m: xst,
            branch: OlsBranch::Raw,
        });
    }
    let r = s.nrows();
    let p = s.ncols() as f64;
    let gram = s * s.transpose();
    let deviation = (&gram - DMatrix::<f64>::identity(r, r) * p).norm();
    if deviation <= 1e-10 * p {
        return Ok(OlsEstimate {
            m: xst / p,
            branch: OlsBranch::ScaledIdentity,
        });
    }
    let chol = gram
        .cholesky()
        .ok_or_else(|| SingError::Degenerate("S Sᵀ is not positive definite".into()))?;
    let eig_min = chol
        .l()
        .diagonal()
        .iter()
        .fold(f64::INFINITY, |a, &b| a.min(b));
    let eig_max = chol.l().diagonal().iter().fold(0.0_f64, |a, &b| a.max(b));
    if !(eig_min > 1e-7 * eig_max) {
        return Err(SingError::Degenerate("S Sᵀ is numerically singular".into()));
    }
    // M = X_c Sᵀ G⁻¹ = (G⁻¹ S X_cᵀ)ᵀ, G symmetric
    let m = chol.solve(&xst.transpose()).transpose();
    Ok(OlsEstimate {
        m,
        branch: OlsBranch::FullInverse,
    })
}
