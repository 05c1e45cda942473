#![allow(dead_code)]

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sing_core::nalgebra::DMatrix;

pub fn gaussian(n: usize, p: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    DMatrix::from_fn(n, p, |_, _| StandardNormal.sample(&mut rng))
}

pub fn corr(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

pub fn row(m: &DMatrix<f64>, i: usize) -> Vec<f64> {
    m.row(i).iter().copied().collect()
}

pub fn col(m: &DMatrix<f64>, j: usize) -> Vec<f64> {
    m.column(j).iter().copied().collect()
}

/// For each estimated row, the best |corr| with a distinct true row, pairing
/// greedily by largest |corr|.
pub fn best_pairing(est: &[Vec<f64>], truth: &[Vec<f64>]) -> Vec<f64> {
    let mut cands: Vec<(f64, usize, usize)> = Vec::new();
    for (i, e) in est.iter().enumerate() {
        for (j, t) in truth.iter().enumerate() {
            cands.push((corr(e, t).abs(), i, j));
        }
    }
    cands.sort_by(|a, b| b.0.total_cmp(&a.0));
    let (mut ue, mut ut) = (vec![false; est.len()], vec![false; truth.len()]);
    let mut out = vec![0.0; est.len()];
    for (c, i, j) in cands {
        if !ue[i] && !ut[j] {
            ue[i] = true;
            ut[j] = true;
            out[i] = c;
        }
    }
    out
}

pub fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| row(m, i)).collect()
}

pub fn cols(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.ncols()).map(|j| col(m, j)).collect()
}

pub fn skewness(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let m2 = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    let m3 = v.iter().map(|x| (x - mean).powi(3)).sum::<f64>() / n;
    m3 / m2.powf(1.5)
}
