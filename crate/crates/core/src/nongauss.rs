//! Jarque-Bera non-Gaussianity, its gradient, and skewness sign
//! normalization.

use nalgebra::{DMatrix, DVector};

use crate::error::{Result, SingError};

/// Default weight on squared skewness; kurtosis gets `1 - alpha`.
pub const DEFAULT_ALPHA: f64 = 0.8;

const MEAN_TOL: f64 = 1e-8;
const VARIANCE_TOL: f64 = 1e-6;

pub(crate) fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(())
    } else {
        Err(SingError::InvalidInput(format!(
            "alpha must lie strictly between 0 and 1, got {alpha}"
        )))
    }
}

/// Raw third and fourth moments `mean(s³)`, `mean(s⁴)`.
#[inline]
pub(crate) fn raw_moments<'a, I>(values: I) -> (f64, f64)
where
    I: ExactSizeIterator<Item = &'a f64>,
{
    let p = values.len() as f64;
    let (mut s3, mut s4) = (0.0, 0.0);
    for &v in values {
        let v2 = v * v;
        s3 += v2 * v;
        s4 += v2 * v2;
    }
    (s3 / p, s4 / p)
}

#[inline]
pub(crate) fn jb_from_moments(m3: f64, m4: f64, alpha: f64) -> f64 {
    alpha * m3 * m3 + (1.0 - alpha) * (m4 - 3.0) * (m4 - 3.0)
}

fn check_standardized<'a, I>(values: I) -> Result<()>
where
    I: ExactSizeIterator<Item = &'a f64> + Clone,
{
    let p = values.len() as f64;
    let mean = values.clone().sum::<f64>() / p;
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / p;
    if !(var > 0.0) {
        return Err(SingError::Degenerate("component has zero variance".into()));
    }
    if mean.abs() > MEAN_TOL || (var - 1.0).abs() > VARIANCE_TOL {
        return Err(SingError::InvalidInput(format!(
            "component must be standardized (mean {mean:e}, variance {var})"
        )));
    }
    Ok(())
}

/// `alpha · mean(s³)² + (1 - alpha) · (mean(s⁴) - 3)²` for a standardized
/// vector (mean 0, variance 1 with divisor p).
pub fn jb_statistic(s: &[f64], alpha: f64) -> Result<f64> {
    check_alpha(alpha)?;
    if s.len() < 2 {
        return Err(SingError::InvalidInput(
            "component needs at least 2 entries".into(),
        ));
    }
    check_standardized(s.iter())?;
    let (m3, m4) = raw_moments(s.iter());
    Ok(jb_from_moments(m3, m4, alpha))
}

/// Per-row JB values of an r×p component matrix.
pub fn jb_rows(s: &DMatrix<f64>, alpha: f64) -> Result<Vec<f64>> {
    check_alpha(alpha)?;
    (0..s.nrows())
        .map(|i| {
            let row: Vec<f64> = s.row(i).iter().copied().collect();
            jb_statistic(&row, alpha).map_err(|e| match e {
                SingError::Degenerate(msg) => SingError::Degenerate(format!("row {i}: {msg}")),
                SingError::InvalidInput(msg) => SingError::InvalidInput(format!("row {i}: {msg}")),
                other => other,
            })
        })
        .collect()
}

/// Sum of row JB statistics.
pub fn jb_total(s: &DMatrix<f64>, alpha: f64) -> Result<f64> {
    Ok(jb_rows(s, alpha)?.iter().sum())
}

/// Euclidean gradient of `u ↦ f(uᵀ X_w)`.
///
/// With `s = uᵀX_w`, `m₃ = mean(s³)`, `m₄ = mean(s⁴)`:
/// `∇ = alpha·2m₃·(3/p)·X_w s² + (1-alpha)·2(m₄-3)·(4/p)·X_w s³`.
pub fn jb_gradient(u: &DVector<f64>, xw: &DMatrix<f64>, alpha: f64) -> Result<DVector<f64>> {
    check_alpha(alpha)?;
    if u.len() != xw.nrows() {
        return Err(SingError::DimensionMismatch(format!(
            "u has length {} but whitened data has {} rows",
            u.len(),
            xw.nrows()
        )));
    }
    let s = xw.tr_mul(u);
    let p = s.len() as f64;
    let (m3, m4) = raw_moments(s.iter());
    let skew_coef = alpha * 2.0 * m3 * 3.0 / p;
    let kurt_coef = (1.0 - alpha) * 2.0 * (m4 - 3.0) * 4.0 / p;
    let weights = s.map(|v| skew_coef * v * v + kurt_coef * v * v * v);
    Ok(xw * weights)
}

/// Sum of JB values of the rows of `U·W` and its gradient with respect to
/// `U` (r×n). No standardization check: used inside the optimizer.
pub(crate) fn jb_block(
    u: &DMatrix<f64>,
    w: &DMatrix<f64>,
    alpha: f64,
    with_gradient: bool,
) -> (f64, Option<DMatrix<f64>>) {
    let s = u * w;
    let p = s.ncols() as f64;
    let mut total = 0.0;
    let mut coef = if with_gradient {
        Some(DMatrix::zeros(s.nrows(), s.ncols()))
    } else {
        None
    };
    for i in 0..s.nrows() {
        let row = s.row(i);
        let (m3, m4) = raw_moments(row.iter());
        total += jb_from_moments(m3, m4, alpha);
        if let Some(c) = coef.as_mut() {
            let skew_coef = alpha * 6.0 * m3 / p;
            let kurt_coef = (1.0 - alpha) * 8.0 * (m4 - 3.0) / p;
            for (dst, &v) in c.row_mut(i).iter_mut().zip(row.iter()) {
                *dst = v * v * (skew_coef + kurt_coef * v);
            }
        }
    }
    // (C Wᵀ) computed as (W Cᵀ)ᵀ to avoid transposing W
    let grad = coef.map(|c| (w * c.transpose()).transpose());
    (total, grad)
}

/// JB value of each row of `s`, without the standardization check.
pub(crate) fn jb_rows_unchecked(s: &DMatrix<f64>, alpha: f64) -> Vec<f64> {
    (0..s.nrows())
        .map(|i| {
            let (m3, m4) = raw_moments(s.row(i).iter());
            jb_from_moments(m3, m4, alpha)
        })
        .collect()
}

/// Standardized third central moment; zero for constant input.
pub fn skewness<'a, I>(values: I) -> f64
where
    I: ExactSizeIterator<Item = &'a f64> + Clone,
{
    let p = values.len() as f64;
    let mean = values.clone().sum::<f64>() / p;
    let (mut m2, mut m3) = (0.0, 0.0);
    for &v in values {
        let d = v - mean;
        m2 += d * d;
        m3 += d * d * d;
    }
    m2 /= p;
    m3 /= p;
    if m2 > 0.0 {
        m3 / m2.powf(1.5)
    } else {
        0.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SignNormalized {
    pub s: DMatrix<f64>,
    pub m: Option<DMatrix<f64>>,
    /// Which rows of `s` (columns of `m`) were negated.
    pub flipped: Vec<bool>,
}

/// Flips rows of `s` with negative skewness, and the matching columns of `m`
/// so that `M·S` is unchanged. Rows with exactly zero skewness are left
/// alone.
pub fn sign_normalize(s: &DMatrix<f64>, m: Option<&DMatrix<f64>>) -> Result<SignNormalized> {
    if let Some(m) = m {
        if m.ncols() != s.nrows() {
            return Err(SingError::DimensionMismatch(format!(
                "M has {} columns but S has {} rows",
                m.ncols(),
                s.nrows()
            )));
        }
    }
    let mut s_out = s.clone();
    let mut m_out = m.cloned();
    let mut flipped = vec![false; s.nrows()];
    for (i, flip) in flipped.iter_mut().enumerate() {
        if skewness(s.row(i).iter()) < 0.0 {
            *flip = true;
            s_out.row_mut(i).neg_mut();
            if let Some(m) = m_out.as_mut() {
                m.column_mut(i).neg_mut();
            }
        }
    }
    Ok(SignNormalized {
        s: s_out,
        m: m_out,
        flipped,
    })
}
