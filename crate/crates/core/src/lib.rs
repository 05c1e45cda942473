//! Simultaneous non-Gaussian component analysis.
//!
//! Extracts maximally non-Gaussian components from one dataset (LNGCA) and
//! joint plus individual components from two datasets observed on the same
//! subjects. Non-Gaussianity is measured with a weighted Jarque-Bera
//! statistic and optimized over semiorthogonal unmixing matrices with a
//! Cayley-retraction line search; joint subject scores are tied together by
//! a chordal-distance penalty.
//!
//! Matrices follow the subjects-in-rows convention: data are n×p, loadings
//! r×p, subject scores n×r and unmixing matrices r×n.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod curvilinear;
pub mod error;
pub mod lngca;
pub mod matcher;
pub mod nongauss;
pub mod pipeline;
pub mod preprocess;
pub mod simgen;
pub mod sing_solver;

pub use nalgebra;

pub use error::{Result, SingError};
pub use lngca::{
    estimate_mixing_ols, lngca, lngca_from, lngca_whitened, Decomposition, LngcaConfig, OlsBranch,
    OlsMode,
};
pub use matcher::{
    average_joint_scores, greedy_match, perm_test_joint_rank, pmse, JointRankTest, MatchResult,
};
pub use nongauss::{jb_gradient, jb_statistic, jb_total, sign_normalize};
pub use pipeline::{
    initial_stages, prepare, screen_rank, sing_decompose, sing_from_init, solve_prepared,
    Diagnostics, IndividualParts, InitialStages, JointInit, Prepared, SingConfig, SingResult,
};
pub use preprocess::{
    double_center, matrix_power, standardize_iterative, whiten, whiten_with, CovarianceScaling,
    DataMatrix, Whitener,
};
pub use simgen::{generate_toy, net_to_vec, vec_to_net, ToySpec, ToyTruth};
pub use sing_solver::{
    chordal_distance, curvilinear_solve, select_rho, JointObjective, JointProblem, JointSolution,
    RhoExtent,
};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Independent random stream `stream` derived from `seed`.
pub(crate) fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
