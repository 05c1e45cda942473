//! Seeded toy data with planted joint and individual non-Gaussian
//! components.
//!
//! X loadings are smooth blobs on a `grid × grid` image, Y loadings are
//! community blocks of a `nodes × nodes` symmetric matrix packed as its lower
//! triangle. Subject scores are unit-variance Gaussians around block means;
//! the Gaussian remainder is iid standard normal.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SingError};
use crate::nongauss::jb_rows_unchecked;
use crate::preprocess::{matrix_power, DataMatrix};
use crate::stream_rng;

const MIN_LOADING_JB: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToySpec {
    pub n: usize,
    pub grid: usize,
    pub nodes: usize,
    pub joint_rank: usize,
    /// Individual components per dataset.
    pub individual_rank: usize,
    /// Scale of the Gaussian remainder `M_N N`.
    pub noise_sd: f64,
    pub seed: u64,
}

impl Default for ToySpec {
    fn default() -> Self {
        Self {
            n: 48,
            grid: 33,
            nodes: 100,
            joint_rank: 2,
            individual_rank: 2,
            noise_sd: 1.0,
            seed: 0,
        }
    }
}

impl ToySpec {
    pub fn p_x(&self) -> usize {
        self.grid * self.grid
    }

    pub fn p_y(&self) -> usize {
        self.nodes * (self.nodes - 1) / 2
    }

    pub fn rank(&self) -> usize {
        self.joint_rank + self.individual_rank
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(SingError::InvalidInput(msg));
        if self.n < 5 {
            return bad(format!("need at least 5 subjects, got {}", self.n));
        }
        if self.grid < 3 || self.nodes < 3 {
            return bad(format!(
                "grid ({}) and nodes ({}) must be at least 3",
                self.grid, self.nodes
            ));
        }
        if self.rank() == 0 || self.rank() + 2 > self.n {
            return bad(format!(
                "joint + individual rank ({}) must lie in 1..=n-2 ({})",
                self.rank(),
                self.n - 2
            ));
        }
        if self.rank() > self.p_x().min(self.p_y()) / 4 {
            return bad(format!(
                "rank {} is too large for the feature dimensions",
                self.rank()
            ));
        }
        if !(self.noise_sd >= 0.0 && self.noise_sd.is_finite()) {
            return bad(format!(
                "noise_sd must be finite and >= 0, got {}",
                self.noise_sd
            ));
        }
        Ok(())
    }
}

/// Ground truth of a generated pair.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyTruth {
    pub m_j: DMatrix<f64>,
    pub m_ix: DMatrix<f64>,
    pub m_iy: DMatrix<f64>,
    pub s_jx: DMatrix<f64>,
    pub s_jy: DMatrix<f64>,
    pub s_ix: DMatrix<f64>,
    pub s_iy: DMatrix<f64>,
    pub d_x: Vec<f64>,
    pub d_y: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct ToyData {
    pub x: DataMatrix,
    pub y: DataMatrix,
    pub truth: ToyTruth,
}

/// Subject i gets `signs[i * signs.len() / n]`.
fn block_means(n: usize, signs: &[f64]) -> Vec<f64> {
    (0..n).map(|i| signs[i * signs.len() / n]).collect()
}

fn alternating(blocks: usize, start: f64) -> Vec<f64> {
    (0..blocks)
        .map(|b| if b % 2 == 0 { start } else { -start })
        .collect()
}

fn joint_mean(k: usize, n: usize) -> Vec<f64> {
    match k {
        0 => block_means(n, &[1.0, -1.0]),
        1 => block_means(n, &[-1.0, 1.0]),
        _ => block_means(n, &alternating(1 << (k + 1), 1.0)),
    }
}

fn x_individual_mean(k: usize, n: usize) -> Vec<f64> {
    match k {
        0 => block_means(n, &[-1.0, 1.0, -1.0, 1.0]),
        1 => block_means(n, &[1.0, -1.0, 1.0, -1.0]),
        _ => block_means(n, &alternating(1 << (k + 2), -1.0)),
    }
}

fn y_individual_mean(k: usize, n: usize) -> Vec<f64> {
    match k {
        0 => block_means(n, &[-1.0, 1.0, -1.0, 1.0, -1.0, 1.0, -1.0, -1.0]),
        1 => block_means(n, &[1.0, -1.0]),
        _ => block_means(n, &alternating(1 << (k + 2), 1.0)),
    }
}

fn y_scale(k: usize) -> f64 {
    [-5.0, 2.0][k % 2]
}

/// n×r scores: column k is `means(k)` plus unit Gaussian noise.
fn scores<R: Rng, F: Fn(usize, usize) -> Vec<f64>>(
    n: usize,
    r: usize,
    means: F,
    rng: &mut R,
) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(n, r);
    for k in 0..r {
        let mu = means(k, n);
        for i in 0..n {
            m[(i, k)] = mu[i] + rng.sample::<f64, _>(StandardNormal);
        }
    }
    m
}

/// Elliptical bumps on a grid, vectorized column-major (entry `i + j·grid`).
fn blob_loadings(grid: usize, count: usize, sharpness: f64) -> DMatrix<f64> {
    let cols = (count as f64).sqrt().ceil() as usize;
    let rows = count.div_ceil(cols);
    let g = grid as f64;
    let sigma = g / (4.0 * cols.max(rows) as f64) * sharpness;
    DMatrix::from_fn(count, grid * grid, |c, idx| {
        let (i, j) = ((idx % grid) as f64, (idx / grid) as f64);
        let ci = ((c % cols) as f64 + 0.5) * g / cols as f64;
        let cj = ((c / cols) as f64 + 0.5) * g / rows as f64;
        let aspect = 1.0 + 0.25 * (c % 3) as f64;
        let d2 = ((i - ci) / (sigma * aspect)).powi(2) + ((j - cj) * aspect / sigma).powi(2);
        let v = (-0.5 * d2).exp();
        if v < 0.05 {
            0.0
        } else {
            v
        }
    })
}

/// Community blocks: nodes in community c are connected with weights that
/// vary smoothly across the block.
fn community_loadings(nodes: usize, count: usize, sharpness: f64) -> DMatrix<f64> {
    let size = (((nodes as f64) / 5.0 * sharpness).round() as usize).clamp(3, nodes);
    let span = nodes - size;
    let starts: Vec<usize> = (0..count)
        .map(|c| {
            if count > 1 {
                c * span / (count - 1)
            } else {
                span / 2
            }
        })
        .collect();
    let p = nodes * (nodes - 1) / 2;
    let mut out = DMatrix::zeros(count, p);
    for (c, &start) in starts.iter().enumerate() {
        let mut net = DMatrix::zeros(nodes, nodes);
        for a in start..start + size {
            for b in start..start + size {
                if a != b {
                    net[(a, b)] = 1.0 + 0.5 * ((a + b + c) as f64 * 0.7).cos();
                }
            }
        }
        let v = net_to_vec(&net).expect("square matrix with at least 2 nodes");
        out.row_mut(c).copy_from_slice(&v);
    }
    out
}

/// Centers rows, then rotates them symmetrically so that `S Sᵀ = p I`.
fn orthonormal_loadings(mut s: DMatrix<f64>) -> Result<DMatrix<f64>> {
    let p = s.ncols() as f64;
    for mut row in s.row_iter_mut() {
        let mean = row.mean();
        row.add_scalar_mut(-mean);
    }
    let gram = &s * s.transpose() / p;
    let inv_sqrt = matrix_power(&gram, -0.5, 1e-12 * gram.amax())?;
    Ok(inv_sqrt * s)
}

fn planted_loadings<F: Fn(f64) -> DMatrix<f64>>(build: F) -> Result<DMatrix<f64>> {
    let mut sharpness = 1.0;
    for _ in 0..10 {
        let s = orthonormal_loadings(build(sharpness))?;
        if jb_rows_unchecked(&s, 0.8)
            .iter()
            .all(|&v| v > MIN_LOADING_JB)
        {
            return Ok(s);
        }
        sharpness *= 0.7;
    }
    Err(SingError::Degenerate(
        "could not build sufficiently non-Gaussian loadings for these dimensions".into(),
    ))
}

/// Generates `X = M_J D_x S_Jx + M_Ix S_Ix + M_Nx N_x` and the analogous Y.
pub fn generate_toy(spec: &ToySpec) -> Result<ToyData> {
    spec.validate()?;
    let (n, rj, ri) = (spec.n, spec.joint_rank, spec.individual_rank);
    let r = spec.rank();

    let sx = planted_loadings(|sharp| blob_loadings(spec.grid, r, sharp))?;
    let sy = planted_loadings(|sharp| community_loadings(spec.nodes, r, sharp))?;

    let mut rng = stream_rng(spec.seed, 0);
    let m_j = scores(n, rj, joint_mean, &mut rng);
    let m_ix = scores(n, ri, x_individual_mean, &mut rng);
    let m_iy = scores(n, ri, y_individual_mean, &mut rng);
    let d_x = vec![1.0; rj];
    let d_y: Vec<f64> = (0..rj).map(y_scale).collect();

    let s_jx = sx.rows(0, rj).into_owned();
    let s_ix = sx.rows(rj, ri).into_owned();
    let s_jy = sy.rows(0, rj).into_owned();
    let s_iy = sy.rows(rj, ri).into_owned();

    let gaussian = |rows: usize, cols: usize, rng: &mut rand_chacha::ChaCha8Rng| {
        DMatrix::from_fn(rows, cols, |_, _| rng.sample::<f64, _>(StandardNormal))
    };
    let g = n - r - 1;
    let m_nx = gaussian(n, g, &mut rng);
    let n_x = gaussian(g, spec.p_x(), &mut rng);
    let m_ny = gaussian(n, g, &mut rng);
    let n_y = gaussian(g, spec.p_y(), &mut rng);

    let scaled = |m: &DMatrix<f64>, d: &[f64]| {
        let mut out = m.clone();
        for (k, &dk) in d.iter().enumerate() {
            out.column_mut(k).scale_mut(dk);
        }
        out
    };
    let x = scaled(&m_j, &d_x) * &s_jx + &m_ix * &s_ix + (&m_nx * &n_x) * spec.noise_sd;
    let y = scaled(&m_j, &d_y) * &s_jy + &m_iy * &s_iy + (&m_ny * &n_y) * spec.noise_sd;

    Ok(ToyData {
        x: DataMatrix::new(x)?,
        y: DataMatrix::new(y)?,
        truth: ToyTruth {
            m_j,
            m_ix,
            m_iy,
            s_jx,
            s_jy,
            s_ix,
            s_iy,
            d_x,
            d_y,
        },
    })
}

fn triangular_side(len: usize) -> Option<usize> {
    let k = ((1.0 + (1.0 + 8.0 * len as f64).sqrt()) / 2.0).round() as usize;
    (k >= 2 && k * (k - 1) / 2 == len).then_some(k)
}

/// Unpacks a lower triangle (column-major, diagonal excluded) into a
/// symmetric matrix. A missing diagonal value is written as NaN.
pub fn vec_to_net(v: &[f64], diag_value: Option<f64>) -> Result<DMatrix<f64>> {
    let k = triangular_side(v.len()).ok_or_else(|| {
        SingError::InvalidInput(format!("length {} is not k(k-1)/2 for any k >= 2", v.len()))
    })?;
    let mut m = DMatrix::from_element(k, k, diag_value.unwrap_or(f64::NAN));
    let mut idx = 0;
    for j in 0..k {
        for i in (j + 1)..k {
            m[(i, j)] = v[idx];
            m[(j, i)] = v[idx];
            idx += 1;
        }
    }
    Ok(m)
}

/// Inverse of [`vec_to_net`]: lower triangle, column-major.
pub fn net_to_vec(m: &DMatrix<f64>) -> Result<Vec<f64>> {
    if !m.is_square() || m.nrows() < 2 {
        return Err(SingError::InvalidInput(format!(
            "network matrix must be square with at least 2 nodes, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    let k = m.nrows();
    let mut out = Vec::with_capacity(k * (k - 1) / 2);
    for j in 0..k {
        for i in (j + 1)..k {
            out.push(m[(i, j)]);
        }
    }
    Ok(out)
}

/// Reshapes a vectorized `grid × grid` image (column-major).
pub fn vec_to_grid(v: &[f64], grid: usize) -> Result<DMatrix<f64>> {
    if grid == 0 || v.len() != grid * grid {
        return Err(SingError::InvalidInput(format!(
            "length {} is not {grid}x{grid}",
            v.len()
        )));
    }
    Ok(DMatrix::from_column_slice(grid, grid, v))
}
