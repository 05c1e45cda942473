//! Feasible-path descent over products of Stiefel manifolds.
//!
//! Each block is an r×n matrix `U` with orthonormal rows. Steps follow the
//! Cayley curve on `V = Uᵀ`:
//!
//! ```text
//! A    = G Vᵀ - V Gᵀ                       (G = ∂F/∂V)
//! V(τ) = (I + τ/2·A)⁻¹ (I - τ/2·A) V
//! ```
//!
//! which keeps `VᵀV = I` for every τ. The step length is found by Armijo
//! backtracking; all blocks move with one shared τ. By default the first
//! trial step of each iteration after the first is a Barzilai-Borwein
//! estimate, which matters when component scales differ by orders of
//! magnitude and a fixed trial step crawls on the weak ones.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SingError};

/// How the first trial step of each iteration is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StepRule {
    /// Always start backtracking from `initial_step`.
    Fixed,
    /// Start from `initial_step`, then from alternating Barzilai-Borwein
    /// estimates built from the last accepted move.
    #[default]
    BarzilaiBorwein,
}

/// Line-search parameters for the Cayley step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepConfig {
    pub initial_step: f64,
    pub backtrack_factor: f64,
    pub armijo: f64,
    pub max_backtracks: usize,
    #[serde(default)]
    pub rule: StepRule,
}

impl Default for StepConfig {
    fn default() -> Self {
        Self {
            initial_step: 0.01,
            backtrack_factor: 0.5,
            armijo: 1e-4,
            max_backtracks: 30,
            rule: StepRule::default(),
        }
    }
}

impl StepConfig {
    pub(crate) fn validate(&self) -> Result<()> {
        let ok = self.initial_step > 0.0
            && self.initial_step.is_finite()
            && self.backtrack_factor > 0.0
            && self.backtrack_factor < 1.0
            && self.armijo > 0.0
            && self.armijo < 1.0;
        if ok {
            Ok(())
        } else {
            Err(SingError::InvalidInput(format!(
                "invalid step configuration {self:?}"
            )))
        }
    }
}

/// Objective over one or more semiorthogonal blocks.
pub(crate) trait BlockObjective {
    fn value(&self, blocks: &[DMatrix<f64>]) -> f64;

    /// Value and Euclidean gradient with respect to each (r×n) block.
    fn value_and_gradient(&self, blocks: &[DMatrix<f64>]) -> (f64, Vec<DMatrix<f64>>);
}

#[derive(Debug, Clone)]
pub(crate) struct Outcome {
    pub blocks: Vec<DMatrix<f64>>,
    /// Objective at the start and after each accepted step.
    pub trace: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    /// Largest `‖UUᵀ - I‖_F` seen over all iterates and blocks.
    pub max_feasibility_error: f64,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Stopping {
    pub tol: f64,
    pub max_iter: usize,
}

/// `‖UUᵀ - I‖_F` for an r×n matrix.
pub fn feasibility_error(u: &DMatrix<f64>) -> f64 {
    let gram = u * u.transpose();
    (gram - DMatrix::<f64>::identity(u.nrows(), u.nrows())).norm()
}

fn skew_direction(u: &DMatrix<f64>, grad: &DMatrix<f64>) -> DMatrix<f64> {
    // with V = Uᵀ and G_V = gradᵀ: A = G_V V^T - V G_V^T = gradᵀ U - Uᵀ grad
    let a = grad.tr_mul(u);
    &a - a.transpose()
}

fn cayley(u: &DMatrix<f64>, a: &DMatrix<f64>, tau: f64) -> Option<DMatrix<f64>> {
    let n = a.nrows();
    let half = 0.5 * tau;
    let lhs = DMatrix::<f64>::identity(n, n) + a * half;
    let v = u.transpose();
    let rhs = &v - a * &v * half;
    lhs.lu().solve(&rhs).map(|v_new| v_new.transpose())
}

/// Span of the columns of an n×p whitened matrix. Only the part of each
/// unmixing row inside it affects the loadings, so descent is run in these
/// k coordinates: outside directions would give rows with vanishing
/// loadings, which raw-moment JB scores as non-Gaussian.
pub(crate) struct Subspace {
    /// n×k, orthonormal columns.
    basis: DMatrix<f64>,
}

impl Subspace {
    /// `None` when the columns already span all n dimensions or when `start`
    /// has rows outside the span (then the problem is solved as given).
    pub fn for_start(w: &DMatrix<f64>, start: &DMatrix<f64>) -> Option<Self> {
        let n = w.nrows();
        let eig = (w * w.transpose()).symmetric_eigen();
        let max = eig.eigenvalues.iter().fold(0.0_f64, |a, &b| a.max(b));
        let keep: Vec<usize> = (0..n)
            .filter(|&i| eig.eigenvalues[i] > 1e-10 * max)
            .collect();
        if keep.len() == n || keep.is_empty() {
            return None;
        }
        let basis = eig.eigenvectors.select_columns(&keep);
        let inside = start * &basis * basis.transpose();
        ((start - inside).norm() <= 1e-10).then_some(Self { basis })
    }

    pub fn restrict(&self, u: &DMatrix<f64>) -> DMatrix<f64> {
        u * &self.basis
    }

    pub fn extend(&self, u: &DMatrix<f64>) -> DMatrix<f64> {
        u * self.basis.transpose()
    }

    /// k×p coordinates of the data.
    pub fn data(&self, w: &DMatrix<f64>) -> DMatrix<f64> {
        self.basis.tr_mul(w)
    }

    /// Composes a map out of subject space with the embedding.
    pub fn pull_back(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        m * &self.basis
    }
}

const BB_MIN: f64 = 1e-10;
const BB_MAX: f64 = 1e10;

/// Alternating BB1/BB2 step from the change in iterates and in the
/// Riemannian gradients `A Uᵀ`, summed over blocks.
fn bb_step(
    prev: &[DMatrix<f64>],
    next: &[DMatrix<f64>],
    prev_dirs: &[DMatrix<f64>],
    next_dirs: &[DMatrix<f64>],
    iteration: usize,
) -> Option<f64> {
    let (mut ss, mut sy, mut yy) = (0.0, 0.0, 0.0);
    for i in 0..prev.len() {
        let s = (&next[i] - &prev[i]).transpose();
        let y = &next_dirs[i] * next[i].transpose() - &prev_dirs[i] * prev[i].transpose();
        ss += s.norm_squared();
        sy += s.dot(&y);
        yy += y.norm_squared();
    }
    let sy = sy.abs();
    let tau = if iteration % 2 == 1 { ss / sy } else { sy / yy };
    (tau.is_finite() && tau > 0.0).then(|| tau.clamp(BB_MIN, BB_MAX))
}

type Blocks = Vec<DMatrix<f64>>;

pub(crate) fn minimize<O: BlockObjective>(
    objective: &O,
    init: Vec<DMatrix<f64>>,
    stopping: Stopping,
    step: &StepConfig,
) -> Result<Outcome> {
    let mut blocks = init;
    let mut max_feas = blocks.iter().map(feasibility_error).fold(0.0, f64::max);
    let (mut value, mut grads) = objective.value_and_gradient(&blocks);
    if !value.is_finite() || grads.iter().any(|g| g.iter().any(|v| !v.is_finite())) {
        return Err(SingError::Numeric {
            iteration: 0,
            message: "non-finite objective or gradient at the initial point".into(),
        });
    }
    let mut trace = vec![value];
    let mut converged = false;
    let mut iterations = 0;
    let mut previous: Option<(Blocks, Blocks)> = None;

    while iterations < stopping.max_iter {
        iterations += 1;
        let dirs: Vec<DMatrix<f64>> = blocks
            .iter()
            .zip(&grads)
            .map(|(u, g)| skew_direction(u, g))
            .collect();
        // derivative of F along the Cayley curve at τ = 0
        let slope = -0.5 * dirs.iter().map(|a| a.norm_squared()).sum::<f64>();
        if slope.abs() <= f64::EPSILON * f64::EPSILON * value.abs().max(1.0) {
            converged = true;
            break;
        }

        let mut tau = match (step.rule, &previous) {
            (StepRule::BarzilaiBorwein, Some((prev_blocks, prev_dirs))) => {
                bb_step(prev_blocks, &blocks, prev_dirs, &dirs, iterations)
                    .unwrap_or(step.initial_step)
            }
            _ => step.initial_step,
        };
        let mut accepted = None;
        for _ in 0..=step.max_backtracks {
            let trial: Option<Vec<DMatrix<f64>>> = blocks
                .iter()
                .zip(&dirs)
                .map(|(u, a)| cayley(u, a, tau))
                .collect();
            if let Some(trial) = trial {
                let f = objective.value(&trial);
                if f.is_finite() && f <= value + step.armijo * tau * slope {
                    accepted = Some(trial);
                    break;
                }
            }
            tau *= step.backtrack_factor;
        }
        // no sufficient decrease within the backtracking budget: stop, unconverged
        let Some(next) = accepted else {
            break;
        };

        let (next_value, next_grads) = objective.value_and_gradient(&next);
        if !next_value.is_finite() || next_grads.iter().any(|g| g.iter().any(|v| !v.is_finite())) {
            return Err(SingError::Numeric {
                iteration: iterations,
                message: "non-finite objective or gradient".into(),
            });
        }
        max_feas = next.iter().map(feasibility_error).fold(max_feas, f64::max);
        let change = (next_value - value).abs() / value.abs().max(1.0);
        previous = Some((std::mem::replace(&mut blocks, next), dirs));
        value = next_value;
        grads = next_grads;
        trace.push(value);
        if change < stopping.tol {
            converged = true;
            break;
        }
    }

    Ok(Outcome {
        blocks,
        trace,
        converged,
        iterations,
        max_feasibility_error: max_feas,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    /// Brockett cost tr(U B Uᵀ N) with N = diag(1..r): minimized by the
    /// eigenvectors of B for its r smallest eigenvalues.
    struct Brockett {
        b: DMatrix<f64>,
        weights: Vec<f64>,
    }

    impl BlockObjective for Brockett {
        fn value(&self, blocks: &[DMatrix<f64>]) -> f64 {
            let u = &blocks[0];
            (0..u.nrows())
                .map(|i| {
                    let row = u.row(i);
                    self.weights[i] * (row * &self.b * row.transpose())[(0, 0)]
                })
                .sum()
        }

        fn value_and_gradient(&self, blocks: &[DMatrix<f64>]) -> (f64, Vec<DMatrix<f64>>) {
            let u = &blocks[0];
            let mut g = u * &self.b * 2.0;
            for i in 0..u.nrows() {
                g.row_mut(i).scale_mut(self.weights[i]);
            }
            (self.value(blocks), vec![g])
        }
    }

    fn orthonormal_rows(r: usize, n: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = DMatrix::from_fn(n, r, |_, _| StandardNormal.sample(&mut rng));
        g.qr().q().transpose()
    }

    #[test]
    fn cayley_preserves_orthonormality() {
        let u = orthonormal_rows(3, 8, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let g = DMatrix::from_fn(3, 8, |_, _| StandardNormal.sample(&mut rng));
        let a = skew_direction(&u, &g);
        for tau in [1e-3, 0.1, 1.0, 10.0] {
            let next = cayley(&u, &a, tau).unwrap();
            assert!(feasibility_error(&next) < 1e-12, "tau {tau}");
        }
    }

    #[test]
    fn finds_brockett_minimum_monotonically() {
        let n = 7;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let h: DMatrix<f64> = DMatrix::from_fn(n, n, |_, _| StandardNormal.sample(&mut rng));
        let b = &h * h.transpose();
        let obj = Brockett {
            b: b.clone(),
            weights: vec![1.0, 2.0],
        };
        let out = minimize(
            &obj,
            vec![orthonormal_rows(2, n, 4)],
            Stopping {
                tol: 1e-14,
                max_iter: 20_000,
            },
            &StepConfig::default(),
        )
        .unwrap();
        for w in out.trace.windows(2) {
            assert!(w[1] <= w[0] + 1e-12);
        }
        let mut eig: Vec<f64> = b.symmetric_eigen().eigenvalues.iter().copied().collect();
        eig.sort_by(f64::total_cmp);
        let optimum = 2.0 * eig[0] + eig[1];
        let last = *out.trace.last().unwrap();
        assert!(
            (last - optimum).abs() < 1e-6 * optimum.abs().max(1.0),
            "{last} vs {optimum}"
        );
        assert!(out.max_feasibility_error < 1e-8);
    }

    #[test]
    fn stationary_start_converges_immediately() {
        let obj = Brockett {
            b: DMatrix::identity(4, 4),
            weights: vec![1.0, 1.0],
        };
        let u = orthonormal_rows(2, 4, 9);
        let out = minimize(
            &obj,
            vec![u.clone()],
            Stopping {
                tol: 1e-10,
                max_iter: 10,
            },
            &StepConfig::default(),
        )
        .unwrap();
        assert!(out.converged);
        assert_eq!(out.blocks[0], u);
    }
}
