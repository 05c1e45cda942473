//! Cross-dataset alignment of components: greedy chordal matching, a
//! max-statistic permutation test for the joint rank, and averaging of
//! matched joint scores.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SingError};
use crate::sing_solver::chordal_unchecked;
use crate::stream_rng;

pub const DEFAULT_N_PERM: usize = 1000;
pub const DEFAULT_ALPHA_LEVEL: f64 = 0.01;
pub const MIN_PERMUTATIONS: usize = 100;
const MIN_SUBJECTS: usize = 5;

#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    /// Column order applied to `Mx` (rows of `Ux`): matched pairs first, by
    /// ascending distance, then the unmatched ones in original order.
    pub order_x: Vec<usize>,
    pub order_y: Vec<usize>,
    /// Length `min(r_x, r_y)`, non-decreasing.
    pub matched_distances: Vec<f64>,
    pub ux: DMatrix<f64>,
    pub uy: DMatrix<f64>,
    pub mx: DMatrix<f64>,
    pub my: DMatrix<f64>,
}

fn column_norms(m: &DMatrix<f64>, name: &str) -> Result<()> {
    for (j, col) in m.column_iter().enumerate() {
        if !(col.norm() > 0.0) {
            return Err(SingError::Degenerate(format!(
                "column {j} of {name} has zero norm"
            )));
        }
    }
    Ok(())
}

/// All pairwise chordal distances between columns of `mx` and `my`.
pub fn chordal_matrix(mx: &DMatrix<f64>, my: &DMatrix<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(mx.ncols(), my.ncols(), |i, j| {
        chordal_unchecked(mx.column(i).as_slice(), my.column(j).as_slice())
    })
}

/// Repeatedly pairs the closest remaining columns of `mx` and `my` and
/// reorders the unmixing rows to match.
pub fn greedy_match(
    mx: &DMatrix<f64>,
    my: &DMatrix<f64>,
    ux: &DMatrix<f64>,
    uy: &DMatrix<f64>,
) -> Result<MatchResult> {
    if mx.nrows() != my.nrows() {
        return Err(SingError::DimensionMismatch(format!(
            "score matrices have {} and {} subjects",
            mx.nrows(),
            my.nrows()
        )));
    }
    if ux.nrows() != mx.ncols() || uy.nrows() != my.ncols() {
        return Err(SingError::DimensionMismatch(format!(
            "Ux has {} rows for {} columns of Mx, Uy has {} rows for {} columns of My",
            ux.nrows(),
            mx.ncols(),
            uy.nrows(),
            my.ncols()
        )));
    }
    column_norms(mx, "Mx")?;
    column_norms(my, "My")?;

    let dist = chordal_matrix(mx, my);
    let k = mx.ncols().min(my.ncols());
    let mut used_x = vec![false; mx.ncols()];
    let mut used_y = vec![false; my.ncols()];
    let mut pairs = Vec::with_capacity(k);
    let mut distances = Vec::with_capacity(k);
    for _ in 0..k {
        let mut best = (f64::INFINITY, 0, 0);
        for i in (0..mx.ncols()).filter(|&i| !used_x[i]) {
            for j in (0..my.ncols()).filter(|&j| !used_y[j]) {
                if dist[(i, j)] < best.0 {
                    best = (dist[(i, j)], i, j);
                }
            }
        }
        let (d, i, j) = best;
        used_x[i] = true;
        used_y[j] = true;
        pairs.push((i, j));
        distances.push(d);
    }
    let finish = |used: &[bool], matched: Vec<usize>| -> Vec<usize> {
        let mut order = matched;
        order.extend((0..used.len()).filter(|&i| !used[i]));
        order
    };
    let order_x = finish(&used_x, pairs.iter().map(|p| p.0).collect());
    let order_y = finish(&used_y, pairs.iter().map(|p| p.1).collect());
    Ok(MatchResult {
        ux: ux.select_rows(&order_x),
        uy: uy.select_rows(&order_y),
        mx: mx.select_columns(&order_x),
        my: my.select_columns(&order_y),
        order_x,
        order_y,
        matched_distances: distances,
    })
}

/// Subtracts each column's mean.
pub fn center_columns(m: &DMatrix<f64>) -> DMatrix<f64> {
    let means = m.row_mean();
    let mut out = m.clone();
    for (j, mut col) in out.column_iter_mut().enumerate() {
        col.add_scalar_mut(-means[j]);
    }
    out
}

/// Centered, unit-norm columns; dot products of these are Pearson
/// correlations.
fn unit_centered(m: &DMatrix<f64>, name: &str) -> Result<DMatrix<f64>> {
    let mut out = center_columns(m);
    for (j, mut col) in out.column_iter_mut().enumerate() {
        let norm = col.norm();
        if !(norm > 0.0) {
            return Err(SingError::Degenerate(format!(
                "column {j} of {name} is constant"
            )));
        }
        col /= norm;
    }
    Ok(out)
}

pub fn pearson(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    let (ma, mb) = (a.mean(), b.mean());
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b.iter()) {
        let (dx, dy) = (x - ma, y - mb);
        cov += dx * dy;
        va += dx * dx;
        vb += dy * dy;
    }
    cov / (va * vb).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointRankTest {
    pub joint_rank: usize,
    /// One per matched pair (column l of each input), in input order.
    pub pvalues_fwer: Vec<f64>,
    /// Signed Pearson correlation of each matched pair.
    pub correlations: Vec<f64>,
    pub n_perm: usize,
    pub alpha_level: f64,
    pub seed: u64,
}

/// Tests whether matched columns of `mx` and `my` are more correlated than
/// chance.
///
/// The null distribution is the maximum |correlation| over all column pairs
/// after shuffling the subject rows of `my`; the p-value of pair l is
/// `(1 + #{null max ≥ |r_l|}) / (n_perm + 1)`, which controls the
/// familywise error rate. The joint rank is the number of pairs with
/// p-value below `alpha_level`.
pub fn perm_test_joint_rank(
    mx: &DMatrix<f64>,
    my: &DMatrix<f64>,
    n_perm: usize,
    alpha_level: f64,
    seed: u64,
) -> Result<JointRankTest> {
    let n = mx.nrows();
    if my.nrows() != n {
        return Err(SingError::DimensionMismatch(format!(
            "score matrices have {} and {} subjects",
            n,
            my.nrows()
        )));
    }
    if n < MIN_SUBJECTS {
        return Err(SingError::InsufficientSubjects(format!(
            "{n} subjects; the permutation test needs at least {MIN_SUBJECTS}"
        )));
    }
    if n_perm < MIN_PERMUTATIONS {
        return Err(SingError::InsufficientPermutations {
            n_perm,
            min: MIN_PERMUTATIONS,
        });
    }
    if !(alpha_level > 0.0 && alpha_level < 1.0) {
        return Err(SingError::InvalidInput(format!(
            "alpha level must lie in (0, 1), got {alpha_level}"
        )));
    }
    let zx = unit_centered(mx, "Mx")?;
    let zy = unit_centered(my, "My")?;
    let k = zx.ncols().min(zy.ncols());
    let correlations: Vec<f64> = (0..k).map(|l| zx.column(l).dot(&zy.column(l))).collect();

    let null_max: Vec<f64> = (0..n_perm)
        .into_par_iter()
        .map(|b| {
            let mut rng = stream_rng(seed, b as u64);
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut rng);
            let shuffled = zy.select_rows(&perm);
            let cross = zx.tr_mul(&shuffled);
            cross.amax()
        })
        .collect();

    let pvalues_fwer: Vec<f64> = correlations
        .iter()
        .map(|r| {
            let exceed = null_max.iter().filter(|&&m| m >= r.abs()).count();
            (1 + exceed) as f64 / (n_perm + 1) as f64
        })
        .collect();
    let joint_rank = pvalues_fwer.iter().filter(|&&p| p < alpha_level).count();
    Ok(JointRankTest {
        joint_rank,
        pvalues_fwer,
        correlations,
        n_perm,
        alpha_level,
        seed,
    })
}

/// Averages unit-normalized, sign-aligned joint score columns and
/// renormalizes.
pub fn average_joint_scores(
    mx_joint: &DMatrix<f64>,
    my_joint: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    if mx_joint.shape() != my_joint.shape() {
        return Err(SingError::DimensionMismatch(format!(
            "joint score shapes {:?} and {:?}",
            mx_joint.shape(),
            my_joint.shape()
        )));
    }
    let mut out = DMatrix::zeros(mx_joint.nrows(), mx_joint.ncols());
    for l in 0..mx_joint.ncols() {
        let x = mx_joint.column(l);
        let y = my_joint.column(l);
        let (nx, ny) = (x.norm(), y.norm());
        if !(nx > 0.0) || !(ny > 0.0) {
            return Err(SingError::Degenerate(format!(
                "joint score column {l} has zero norm"
            )));
        }
        if pearson(&x.into_owned(), &y.into_owned()) < 0.0 {
            return Err(SingError::Alignment { column: l });
        }
        let avg = (x / nx + y / ny) * 0.5;
        let norm = avg.norm();
        out.set_column(l, &(avg / norm));
    }
    Ok(out)
}

/// Mean chordal distance between corresponding columns of two score
/// matrices.
pub fn pmse(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(SingError::DimensionMismatch(format!(
            "score shapes {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    if a.ncols() == 0 {
        return Ok(0.0);
    }
    column_norms(a, "first matrix")?;
    column_norms(b, "second matrix")?;
    let total: f64 = (0..a.ncols())
        .map(|l| chordal_unchecked(a.column(l).as_slice(), b.column(l).as_slice()))
        .sum();
    Ok(total / a.ncols() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn gaussian(n: usize, p: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DMatrix::from_fn(n, p, |_, _| StandardNormal.sample(&mut rng))
    }

    fn identity_u(r: usize, n: usize) -> DMatrix<f64> {
        DMatrix::from_fn(r, n, |i, j| if i == j { 1.0 } else { 0.0 })
    }

    #[test]
    fn identical_scores_match_identically() {
        let m = center_columns(&gaussian(20, 3, 1));
        let u = identity_u(3, 20);
        let res = greedy_match(&m, &m, &u, &u).unwrap();
        assert_eq!(res.order_x, res.order_y);
        let mut sorted = res.order_x.clone();
        sorted.sort();
        assert_eq!(sorted, vec![0, 1, 2]);
        assert!(res.matched_distances.iter().all(|d| d.abs() < 1e-14));
    }

    #[test]
    fn reversed_columns_match_by_reversal() {
        let m = center_columns(&gaussian(20, 4, 2));
        let rev = m.select_columns(&[3, 2, 1, 0]);
        let u = identity_u(4, 20);
        let res = greedy_match(&m, &rev, &u, &u).unwrap();
        for (i, j) in res.order_x.iter().zip(&res.order_y) {
            assert_eq!(i + j, 3);
        }
        assert!(res.matched_distances.iter().all(|d| d.abs() < 1e-14));
        assert!(crate::curvilinear::feasibility_error(&res.ux) < 1e-12);
    }

    #[test]
    fn planted_shared_column_is_matched_first() {
        let mx = center_columns(&gaussian(20, 3, 3));
        let mut my = center_columns(&gaussian(20, 4, 4));
        let shared = -mx.column(1).into_owned();
        my.set_column(2, &shared);
        let res = greedy_match(&mx, &my, &identity_u(3, 20), &identity_u(4, 20)).unwrap();
        assert_eq!((res.order_x[0], res.order_y[0]), (1, 2));
        assert!(res.matched_distances[0] < 1e-12);
        assert_eq!(res.matched_distances.len(), 3);
        assert_eq!(res.order_y.len(), 4);

        // brute-force oracle: each greedy pick is the minimum over what remains
        let dist = DMatrix::from_fn(3, 4, |i, j| {
            let (x, y) = (mx.column(i), my.column(j));
            let px = x * x.transpose() / x.norm_squared();
            let py = y * y.transpose() / y.norm_squared();
            (px - py).norm_squared()
        });
        let mut rows: Vec<usize> = (0..3).collect();
        let mut cols: Vec<usize> = (0..4).collect();
        for (k, d) in res.matched_distances.iter().enumerate() {
            let (i, j) = (res.order_x[k], res.order_y[k]);
            assert!((dist[(i, j)] - d).abs() < 1e-12);
            let min = rows
                .iter()
                .flat_map(|&r| cols.iter().map(move |&c| (r, c)))
                .map(|(r, c)| dist[(r, c)])
                .fold(f64::INFINITY, f64::min);
            assert!((d - min).abs() < 1e-12);
            rows.retain(|&r| r != i);
            cols.retain(|&c| c != j);
        }
        for w in res.matched_distances.windows(2) {
            assert!(w[0] <= w[1]);
        }
    }

    #[test]
    fn zero_column_is_rejected() {
        let mut mx = gaussian(10, 2, 5);
        mx.column_mut(1).fill(0.0);
        let my = gaussian(10, 2, 6);
        let err = greedy_match(&mx, &my, &identity_u(2, 10), &identity_u(2, 10)).unwrap_err();
        assert_eq!(
            err,
            SingError::Degenerate("column 1 of Mx has zero norm".into())
        );
    }

    #[test]
    fn exact_copy_gets_minimal_pvalue() {
        let mx = gaussian(48, 4, 7);
        let mut my = gaussian(48, 4, 8);
        my.set_column(0, &mx.column(0));
        let t = perm_test_joint_rank(&mx, &my, 1000, 0.01, 1).unwrap();
        assert!((t.pvalues_fwer[0] - 1.0 / 1001.0).abs() < 1e-15);
        assert!(t.joint_rank >= 1);
    }

    #[test]
    fn independent_scores_have_no_joint_rank_mostly() {
        let zero = (0..100u64)
            .filter(|&rep| {
                let mx = gaussian(48, 4, 1000 + 2 * rep);
                let my = gaussian(48, 4, 1001 + 2 * rep);
                perm_test_joint_rank(&mx, &my, 200, 0.01, rep)
                    .unwrap()
                    .joint_rank
                    == 0
            })
            .count();
        assert!(zero >= 95, "{zero}");
    }

    #[test]
    fn perm_test_preconditions() {
        let m = gaussian(48, 2, 9);
        assert_eq!(
            perm_test_joint_rank(&m, &m, 50, 0.01, 0).unwrap_err(),
            SingError::InsufficientPermutations {
                n_perm: 50,
                min: 100
            }
        );
        let small = gaussian(4, 2, 10);
        assert!(matches!(
            perm_test_joint_rank(&small, &small, 100, 0.01, 0),
            Err(SingError::InsufficientSubjects(_))
        ));
    }

    #[test]
    fn perm_test_deterministic_and_sign_invariant() {
        let mx = gaussian(30, 3, 11);
        let mut my = gaussian(30, 3, 12);
        let mix = mx.column(1) * 0.7 + my.column(1) * 0.3;
        my.set_column(1, &mix);
        let a = perm_test_joint_rank(&mx, &my, 300, 0.05, 4).unwrap();
        let b = perm_test_joint_rank(&mx, &my, 300, 0.05, 4).unwrap();
        assert_eq!(a, b);
        let mut flipped = my.clone();
        flipped.column_mut(1).neg_mut();
        let c = perm_test_joint_rank(&mx, &flipped, 300, 0.05, 4).unwrap();
        assert_eq!(a.pvalues_fwer, c.pvalues_fwer);
        assert_eq!(a.joint_rank, c.joint_rank);
    }

    #[test]
    fn averaging_examples() {
        let x = gaussian(10, 2, 13);
        let avg = average_joint_scores(&x, &x).unwrap();
        for l in 0..2 {
            let unit = x.column(l) / x.column(l).norm();
            assert!((avg.column(l) - unit).amax() < 1e-14);
        }
        let avg3 = average_joint_scores(&x, &(&x * 3.0)).unwrap();
        assert!((avg3 - avg).amax() < 1e-14);
    }

    #[test]
    fn averaging_gives_bisector() {
        let a = DVector::from_vec(vec![1.0, 0.2, -0.3, 0.1]).normalize();
        let b = DVector::from_vec(vec![0.8, 0.5, -0.1, -0.2]).normalize();
        let out = average_joint_scores(
            &DMatrix::from_columns(std::slice::from_ref(&a)),
            &DMatrix::from_columns(std::slice::from_ref(&b)),
        )
        .unwrap();
        let bisector = (&a + &b).normalize();
        assert!((out.column(0) - bisector).amax() < 1e-14);
        // equal angles to both inputs
        assert!((out.column(0).dot(&a) - out.column(0).dot(&b)).abs() < 1e-14);
    }

    #[test]
    fn anti_aligned_columns_rejected() {
        let x = gaussian(10, 2, 14);
        let mut y = x.clone();
        y.column_mut(1).neg_mut();
        assert_eq!(
            average_joint_scores(&x, &y).unwrap_err(),
            SingError::Alignment { column: 1 }
        );
    }

    #[test]
    fn pmse_is_mean_chordal() {
        let a = gaussian(12, 3, 15);
        assert!(pmse(&a, &a).unwrap().abs() < 1e-14);
        let b = gaussian(12, 3, 16);
        let want: f64 = (0..3)
            .map(|l| {
                crate::sing_solver::chordal_distance(
                    &a.column(l).into_owned(),
                    &b.column(l).into_owned(),
                )
                .unwrap()
            })
            .sum::<f64>()
            / 3.0;
        assert!((pmse(&a, &b).unwrap() - want).abs() < 1e-14);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn pvalues_monotone_in_correlation(seed in 0u64..1000) {
            let mx = gaussian(25, 3, seed);
            let noise = gaussian(25, 3, seed + 5000);
            let my = &mx * 0.6 + noise;
            let t = perm_test_joint_rank(&mx, &my, 100, 0.05, seed).unwrap();
            let mut idx: Vec<usize> = (0..3).collect();
            idx.sort_by(|&a, &b| t.correlations[b].abs().total_cmp(&t.correlations[a].abs()));
            for w in idx.windows(2) {
                prop_assert!(t.pvalues_fwer[w[0]] <= t.pvalues_fwer[w[1]]);
            }
            let count = t.pvalues_fwer.iter().filter(|&&p| p < 0.05).count();
            prop_assert_eq!(count, t.joint_rank);
        }
    }
}
