//! Joint two-dataset solver.
//!
//! Minimizes
//!
//! ```text
//! -Σ_l f(u_xlᵀ X_w) - Σ_l f(u_ylᵀ Y_w) + ρ Σ_{l<r_J} d(L_x⁻ u_xl, L_y⁻ u_yl)
//! ```
//!
//! over semiorthogonal `U_x`, `U_y`, where `d` is the chordal distance
//! between the normalized rank-one projectors of the two score columns.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::curvilinear::{self, feasibility_error, BlockObjective, StepConfig, Stopping, Subspace};
use crate::error::{Result, SingError};
use crate::lngca::solve_single;
use crate::nongauss::{self, check_alpha, jb_total};

/// `‖x xᵀ/‖x‖² - y yᵀ/‖y‖²‖_F²`, i.e. `2(1 - cos²θ)`.
pub fn chordal_distance(x: &DVector<f64>, y: &DVector<f64>) -> Result<f64> {
    if x.len() != y.len() {
        return Err(SingError::DimensionMismatch(format!(
            "vectors of length {} and {}",
            x.len(),
            y.len()
        )));
    }
    let (nx, ny) = (x.norm(), y.norm());
    if !(nx > 0.0) || !(ny > 0.0) {
        return Err(SingError::Domain(
            "chordal distance of a zero vector".into(),
        ));
    }
    Ok(chordal_unchecked(x.as_slice(), y.as_slice()))
}

/// Computed as `2‖x̂ - (x̂·ŷ)ŷ‖²`, which stays accurate near zero.
pub(crate) fn chordal_unchecked(x: &[f64], y: &[f64]) -> f64 {
    let nx = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    let ny = y.iter().map(|v| v * v).sum::<f64>().sqrt();
    let c: f64 = x.iter().zip(y).map(|(a, b)| (a / nx) * (b / ny)).sum();
    let resid: f64 = x
        .iter()
        .zip(y)
        .map(|(a, b)| {
            let r = a / nx - c * b / ny;
            r * r
        })
        .sum();
    2.0 * resid
}

/// How strongly the joint score columns are coupled.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum RhoExtent {
    /// Total JB of the candidate joint loadings divided by 10.
    #[default]
    Small,
    /// 10 × small (library convention).
    Medium,
    /// 100 × small (library convention).
    Large,
    Value(f64),
}

impl fmt::Display for RhoExtent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RhoExtent::Small => f.write_str("small"),
            RhoExtent::Medium => f.write_str("medium"),
            RhoExtent::Large => f.write_str("large"),
            RhoExtent::Value(v) => write!(f, "{v}"),
        }
    }
}

impl FromStr for RhoExtent {
    type Err = SingError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "small" => Ok(RhoExtent::Small),
            "medium" => Ok(RhoExtent::Medium),
            "large" => Ok(RhoExtent::Large),
            other => other
                .parse::<f64>()
                .map(RhoExtent::Value)
                .map_err(|_| SingError::InvalidInput(format!("unrecognized rho extent {s:?}"))),
        }
    }
}

impl Serialize for RhoExtent {
    fn serialize<S: serde::Serializer>(
        &self,
        serializer: S,
    ) -> std::result::Result<S::Ok, S::Error> {
        match self {
            RhoExtent::Value(v) => serializer.serialize_f64(*v),
            other => serializer.serialize_str(&other.to_string()),
        }
    }
}

impl<'de> Deserialize<'de> for RhoExtent {
    fn deserialize<D: serde::Deserializer<'de>>(
        deserializer: D,
    ) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        match Raw::deserialize(deserializer)? {
            Raw::Num(v) => Ok(RhoExtent::Value(v)),
            Raw::Text(s) => s.parse().map_err(serde::de::Error::custom),
        }
    }
}

/// Penalty weight for the given extent; candidate rows must be standardized.
pub fn select_rho(
    sx_joint: &DMatrix<f64>,
    sy_joint: &DMatrix<f64>,
    extent: RhoExtent,
    alpha: f64,
) -> Result<f64> {
    let small =
        || -> Result<f64> { Ok((jb_total(sx_joint, alpha)? + jb_total(sy_joint, alpha)?) / 10.0) };
    match extent {
        RhoExtent::Small => small(),
        RhoExtent::Medium => Ok(10.0 * small()?),
        RhoExtent::Large => Ok(100.0 * small()?),
        RhoExtent::Value(v) if v > 0.0 && v.is_finite() => Ok(v),
        RhoExtent::Value(v) => Err(SingError::InvalidInput(format!(
            "numeric rho must be positive and finite, got {v}"
        ))),
    }
}

/// Inputs to [`curvilinear_solve`].
#[derive(Debug, Clone)]
pub struct JointProblem<'a> {
    pub xw: &'a DMatrix<f64>,
    pub yw: &'a DMatrix<f64>,
    pub inv_lx: &'a DMatrix<f64>,
    pub inv_ly: &'a DMatrix<f64>,
    /// r_x×n start, joint rows first.
    pub ux0: DMatrix<f64>,
    /// r_y×n start, joint rows first.
    pub uy0: DMatrix<f64>,
    pub rho: f64,
    pub joint_rank: usize,
    pub alpha: f64,
    pub tol: f64,
    pub max_iter: usize,
    pub step: StepConfig,
}

impl JointProblem<'_> {
    pub fn validate(&self) -> Result<()> {
        check_alpha(self.alpha)?;
        self.step.validate()?;
        let n = self.xw.nrows();
        let shapes_ok = self.yw.nrows() == n
            && self.inv_lx.shape() == (n, n)
            && self.inv_ly.shape() == (n, n)
            && self.ux0.ncols() == n
            && self.uy0.ncols() == n;
        if !shapes_ok {
            return Err(SingError::DimensionMismatch(format!(
                "inconsistent shapes: Xw {:?}, Yw {:?}, Lx⁻ {:?}, Ly⁻ {:?}, Ux {:?}, Uy {:?}",
                self.xw.shape(),
                self.yw.shape(),
                self.inv_lx.shape(),
                self.inv_ly.shape(),
                self.ux0.shape(),
                self.uy0.shape()
            )));
        }
        if self.joint_rank > self.ux0.nrows().min(self.uy0.nrows()) {
            return Err(SingError::InvalidRank(format!(
                "joint rank {} exceeds min(r_x, r_y) = {}",
                self.joint_rank,
                self.ux0.nrows().min(self.uy0.nrows())
            )));
        }
        if !(self.rho >= 0.0 && self.rho.is_finite()) {
            return Err(SingError::InvalidInput(format!(
                "rho must be finite and >= 0, got {}",
                self.rho
            )));
        }
        for (name, u) in [("Ux", &self.ux0), ("Uy", &self.uy0)] {
            let err = feasibility_error(u);
            if !(err < 1e-8) {
                return Err(SingError::InvalidInput(format!(
                    "initial {name} is not semiorthogonal (||UUᵀ - I||_F = {err:e})"
                )));
            }
        }
        Ok(())
    }

    pub fn objective(&self) -> JointObjective<'_> {
        JointObjective {
            xw: self.xw,
            yw: self.yw,
            inv_lx: self.inv_lx,
            inv_ly: self.inv_ly,
            rho: self.rho,
            joint_rank: self.joint_rank,
            alpha: self.alpha,
        }
    }
}

/// Whether the two blocks shared one line search.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepPolicy {
    Shared,
    /// ρ = 0: the problem splits and each block is solved on its own.
    Independent,
}

#[derive(Debug, Clone, PartialEq)]
pub struct JointSolution {
    pub ux: DMatrix<f64>,
    pub uy: DMatrix<f64>,
    pub objective_trace: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    /// `Σ_{l<r_J} d(L_x⁻u_xl, L_y⁻u_yl)` at the solution.
    pub joint_distance: f64,
    pub max_feasibility_error: f64,
    pub step_policy: StepPolicy,
}

impl JointSolution {
    pub fn objective(&self) -> f64 {
        *self.objective_trace.last().expect("trace is never empty")
    }
}

/// The full joint objective and its Euclidean gradient.
#[derive(Debug, Clone, Copy)]
pub struct JointObjective<'a> {
    pub xw: &'a DMatrix<f64>,
    pub yw: &'a DMatrix<f64>,
    pub inv_lx: &'a DMatrix<f64>,
    pub inv_ly: &'a DMatrix<f64>,
    pub rho: f64,
    pub joint_rank: usize,
    pub alpha: f64,
}

impl JointObjective<'_> {
    pub fn value(&self, ux: &DMatrix<f64>, uy: &DMatrix<f64>) -> f64 {
        let jx = nongauss::jb_block(ux, self.xw, self.alpha, false).0;
        let jy = nongauss::jb_block(uy, self.yw, self.alpha, false).0;
        -jx - jy + self.rho * self.joint_distance(ux, uy)
    }

    pub fn joint_distance(&self, ux: &DMatrix<f64>, uy: &DMatrix<f64>) -> f64 {
        if self.joint_rank == 0 {
            return 0.0;
        }
        let mx = self.inv_lx * ux.rows(0, self.joint_rank).transpose();
        let my = self.inv_ly * uy.rows(0, self.joint_rank).transpose();
        (0..self.joint_rank)
            .map(|l| chordal_unchecked(mx.column(l).as_slice(), my.column(l).as_slice()))
            .sum()
    }

    /// Returns `(value, ∂F/∂U_x, ∂F/∂U_y)`.
    pub fn value_and_gradient(
        &self,
        ux: &DMatrix<f64>,
        uy: &DMatrix<f64>,
    ) -> (f64, DMatrix<f64>, DMatrix<f64>) {
        let (jx, gx) = nongauss::jb_block(ux, self.xw, self.alpha, true);
        let (jy, gy) = nongauss::jb_block(uy, self.yw, self.alpha, true);
        let mut gx = -gx.expect("gradient requested");
        let mut gy = -gy.expect("gradient requested");
        let mut value = -jx - jy;
        if self.joint_rank > 0 && self.rho != 0.0 {
            let rj = self.joint_rank;
            let mx = self.inv_lx * ux.rows(0, rj).transpose();
            let my = self.inv_ly * uy.rows(0, rj).transpose();
            // ∂d/∂x = -4c/(ab) (y - (c/a) x), c = xᵀy, a = ‖x‖², b = ‖y‖²
            let mut dx = DMatrix::zeros(mx.nrows(), rj);
            let mut dy = DMatrix::zeros(my.nrows(), rj);
            let mut dist = 0.0;
            for l in 0..rj {
                let x = mx.column(l);
                let y = my.column(l);
                dist += chordal_unchecked(x.as_slice(), y.as_slice());
                let a = x.norm_squared();
                let b = y.norm_squared();
                let c = x.dot(&y);
                let k = -4.0 * c / (a * b);
                dx.set_column(l, &((y - x * (c / a)) * k));
                dy.set_column(l, &((x - y * (c / b)) * k));
            }
            value += self.rho * dist;
            // m = L⁻uᵀ, so ∂/∂u = (L⁻ᵀ ∂d/∂m)ᵀ
            let px = self.inv_lx.tr_mul(&dx).transpose() * self.rho;
            let py = self.inv_ly.tr_mul(&dy).transpose() * self.rho;
            let mut top = gx.rows_mut(0, rj);
            top += px;
            let mut top = gy.rows_mut(0, rj);
            top += py;
        }
        (value, gx, gy)
    }
}

impl BlockObjective for JointObjective<'_> {
    fn value(&self, blocks: &[DMatrix<f64>]) -> f64 {
        JointObjective::value(self, &blocks[0], &blocks[1])
    }

    fn value_and_gradient(&self, blocks: &[DMatrix<f64>]) -> (f64, Vec<DMatrix<f64>>) {
        let (v, gx, gy) = JointObjective::value_and_gradient(self, &blocks[0], &blocks[1]);
        (v, vec![gx, gy])
    }
}

/// Runs the curvilinear descent on the joint objective.
///
/// Reaching `max_iter` is reported through `converged = false`. With ρ = 0
/// the two blocks are solved independently, which reproduces two separate
/// single-dataset runs from the same starts.
pub fn curvilinear_solve(problem: &JointProblem<'_>) -> Result<JointSolution> {
    problem.validate()?;
    let stopping = Stopping {
        tol: problem.tol,
        max_iter: problem.max_iter,
    };
    let objective = problem.objective();

    if problem.rho == 0.0 {
        let ox = solve_single(
            problem.xw,
            problem.ux0.clone(),
            problem.alpha,
            stopping,
            &problem.step,
        )?;
        let oy = solve_single(
            problem.yw,
            problem.uy0.clone(),
            problem.alpha,
            stopping,
            &problem.step,
        )?;
        let len = ox.trace.len().max(oy.trace.len());
        let at = |t: &[f64], i: usize| t[i.min(t.len() - 1)];
        let trace = (0..len)
            .map(|i| at(&ox.trace, i) + at(&oy.trace, i))
            .collect();
        let ux = ox.blocks.into_iter().next().expect("one block");
        let uy = oy.blocks.into_iter().next().expect("one block");
        return Ok(JointSolution {
            joint_distance: objective.joint_distance(&ux, &uy),
            ux,
            uy,
            objective_trace: trace,
            converged: ox.converged && oy.converged,
            iterations: ox.iterations.max(oy.iterations),
            max_feasibility_error: ox.max_feasibility_error.max(oy.max_feasibility_error),
            step_policy: StepPolicy::Independent,
        });
    }

    // descend in the span of each whitened matrix when the starts lie in it
    let sub_x = Subspace::for_start(problem.xw, &problem.ux0);
    let sub_y = Subspace::for_start(problem.yw, &problem.uy0);
    let reduce = |sub: &Option<Subspace>,
                  w: &DMatrix<f64>,
                  inv: &DMatrix<f64>,
                  u: &DMatrix<f64>| match sub {
        Some(s) => (s.data(w), s.pull_back(inv), s.restrict(u)),
        None => (w.clone(), inv.clone(), u.clone()),
    };
    let (xw, inv_lx, ux0) = reduce(&sub_x, problem.xw, problem.inv_lx, &problem.ux0);
    let (yw, inv_ly, uy0) = reduce(&sub_y, problem.yw, problem.inv_ly, &problem.uy0);
    let reduced = JointObjective {
        xw: &xw,
        yw: &yw,
        inv_lx: &inv_lx,
        inv_ly: &inv_ly,
        ..objective
    };
    let outcome = curvilinear::minimize(&reduced, vec![ux0, uy0], stopping, &problem.step)?;
    let mut blocks = outcome.blocks.into_iter();
    let extend = |sub: &Option<Subspace>, u: DMatrix<f64>| match sub {
        Some(s) => s.extend(&u),
        None => u,
    };
    let ux = extend(&sub_x, blocks.next().expect("two blocks"));
    let uy = extend(&sub_y, blocks.next().expect("two blocks"));
    Ok(JointSolution {
        joint_distance: objective.joint_distance(&ux, &uy),
        ux,
        uy,
        objective_trace: outcome.trace,
        converged: outcome.converged,
        iterations: outcome.iterations,
        max_feasibility_error: outcome.max_feasibility_error,
        step_policy: StepPolicy::Shared,
    })
}
