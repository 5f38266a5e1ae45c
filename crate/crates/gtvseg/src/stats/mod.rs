//! Nonparametric tests, confidence intervals, and stepwise regression.
//!
//! Small-sample policy: Wilcoxon uses exact enumeration (via a rank-sum
//! distribution equivalent to enumerating all 2^n sign assignments) for
//! n <= 25; Mann-Whitney uses the exact labeling distribution for
//! n1*n2 <= 400. Larger samples fall back to tie-corrected normal
//! approximations with continuity correction. Confidence intervals are
//! t-based. All p-values are two-tailed.

pub mod special;

use crate::error::{Error, Result};
use special::{chi2_sf, normal_cdf, t_quantile, t_sf_two_sided};

/// How a p-value was computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Exact,
    NormalApprox,
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Method::Exact => write!(f, "exact"),
            Method::NormalApprox => write!(f, "normal_approx"),
        }
    }
}

/// Outcome of a hypothesis test.
#[derive(Debug, Clone)]
pub struct TestResult {
    pub statistic: f64,
    pub p_two_tailed: f64,
    pub n_effective: usize,
    pub method: Method,
}

/// Mean with a t-based confidence interval.
#[derive(Debug, Clone, Copy)]
pub struct CIResult {
    pub mean: f64,
    pub lo: f64,
    pub hi: f64,
    pub level: f64,
}

/// Mid-ranks (1-based, ties get the average rank). Doubled ranks are exact
/// integers because a mid-rank is always a multiple of 1/2.
fn mid_ranks2(values: &[f64]) -> Vec<i64> {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).expect("NaN in rank data"));
    let mut ranks2 = vec![0i64; n];
    let mut s = 0;
    while s < n {
        let mut e = s + 1;
        while e < n && values[order[e]] == values[order[s]] {
            e += 1;
        }
        // average of 1-based positions s+1 ..= e, doubled: (s+1) + e
        let r2 = (s + 1 + e) as i64;
        for &i in &order[s..e] {
            ranks2[i] = r2;
        }
        s = e;
    }
    ranks2
}

fn mid_ranks(values: &[f64]) -> Vec<f64> {
    mid_ranks2(values).iter().map(|&r| r as f64 / 2.0).collect()
}

/// Sizes of tie groups, for variance corrections.
fn tie_group_sizes(values: &[f64]) -> Vec<usize> {
    let mut sorted: Vec<f64> = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut out = Vec::new();
    let mut s = 0;
    while s < sorted.len() {
        let mut e = s + 1;
        while e < sorted.len() && sorted[e] == sorted[s] {
            e += 1;
        }
        out.push(e - s);
        s = e;
    }
    out
}

// ---------------------------------------------------------------------------
// Wilcoxon matched-pairs signed-rank test
// ---------------------------------------------------------------------------

const WILCOXON_EXACT_MAX_N: usize = 25;

/// Wilcoxon matched-pairs signed-rank test on paired observations.
///
/// Zero differences are dropped. The statistic is W = min(W+, W-). For
/// n_effective <= 25 the two-tailed p is exact: P(min(W+, W-) <= W_obs)
/// under the sign-flip null, ties kept at their mid-ranks.
pub fn wilcoxon_signed_rank(pairs: &[(f64, f64)]) -> Result<TestResult> {
    if pairs.is_empty() {
        return Err(Error::EmptyInput("wilcoxon needs at least one pair".into()));
    }
    let diffs: Vec<f64> = pairs.iter().map(|&(x, y)| x - y).filter(|d| *d != 0.0).collect();
    let n = diffs.len();
    if n == 0 {
        return Ok(TestResult {
            statistic: 0.0,
            p_two_tailed: 1.0,
            n_effective: 0,
            method: Method::Exact,
        });
    }
    let abs: Vec<f64> = diffs.iter().map(|d| d.abs()).collect();
    let ranks2 = mid_ranks2(&abs);
    let w_plus2: i64 = diffs
        .iter()
        .zip(&ranks2)
        .filter(|(d, _)| **d > 0.0)
        .map(|(_, &r2)| r2)
        .sum();
    let total2: i64 = ranks2.iter().sum(); // = n(n+1), exact
    let w_minus2 = total2 - w_plus2;
    let w2 = w_plus2.min(w_minus2);
    let statistic = w2 as f64 / 2.0;

    if n <= WILCOXON_EXACT_MAX_N {
        // Distribution of W+ (doubled) over all 2^n sign assignments.
        let t2 = total2 as usize;
        let mut dist = vec![0u64; t2 + 1];
        dist[0] = 1;
        for &r2 in &ranks2 {
            let r2 = r2 as usize;
            for s in (r2..=t2).rev() {
                dist[s] += dist[s - r2];
            }
        }
        let mut count: u64 = 0;
        for (s, &c) in dist.iter().enumerate() {
            let m = (s as i64).min(total2 - s as i64);
            if m <= w2 {
                count += c;
            }
        }
        let p = (count as f64 / 2f64.powi(n as i32)).min(1.0);
        Ok(TestResult {
            statistic,
            p_two_tailed: p,
            n_effective: n,
            method: Method::Exact,
        })
    } else {
        // Normal approximation. With mid-ranks, Var(W+) = sum(r_i^2)/4 is
        // already tie-exact; mean is sum(r_i)/2.
        let mean = total2 as f64 / 4.0;
        let var: f64 = ranks2.iter().map(|&r2| (r2 as f64 / 2.0).powi(2)).sum::<f64>() / 4.0;
        let sd = var.sqrt();
        let z = (statistic - mean + 0.5) / sd;
        let p = (2.0 * normal_cdf(z)).clamp(0.0, 1.0);
        Ok(TestResult {
            statistic,
            p_two_tailed: p,
            n_effective: n,
            method: Method::NormalApprox,
        })
    }
}

// ---------------------------------------------------------------------------
// Mann-Whitney U test
// ---------------------------------------------------------------------------

const MWU_EXACT_MAX_PRODUCT: usize = 400;

/// Mann-Whitney U test for two independent samples.
///
/// The statistic is U = min(U1, U2) from mid-rank sums. Exact p (all
/// choose(n1+n2, n1) group labelings, computed by dynamic programming) when
/// n1*n2 <= 400, otherwise tie-corrected normal approximation with
/// continuity correction.
pub fn mann_whitney_u(x: &[f64], y: &[f64]) -> Result<TestResult> {
    if x.is_empty() || y.is_empty() {
        return Err(Error::EmptyInput("mann-whitney needs both samples nonempty".into()));
    }
    let n1 = x.len();
    let n2 = y.len();
    let n = n1 + n2;
    let mut pooled: Vec<f64> = Vec::with_capacity(n);
    pooled.extend_from_slice(x);
    pooled.extend_from_slice(y);
    let ranks2 = mid_ranks2(&pooled);
    let r1_2: i64 = ranks2[..n1].iter().sum();
    // Doubled U keeps everything in exact integers.
    let u1_2 = r1_2 - (n1 * (n1 + 1)) as i64;
    let u2_2 = 2 * (n1 * n2) as i64 - u1_2;
    let u_min2 = u1_2.min(u2_2);
    let statistic = u_min2 as f64 / 2.0;

    if n1 * n2 <= MWU_EXACT_MAX_PRODUCT {
        // ways[k][s] = number of k-subsets of the pooled doubled ranks with
        // doubled rank sum s.
        let t2: i64 = ranks2.iter().sum();
        let t2 = t2 as usize;
        let mut ways = vec![vec![0u128; t2 + 1]; n1 + 1];
        ways[0][0] = 1;
        for &r2 in &ranks2 {
            let r2 = r2 as usize;
            for k in (1..=n1).rev() {
                for s in (r2..=t2).rev() {
                    let add = ways[k - 1][s - r2];
                    if add != 0 {
                        ways[k][s] += add;
                    }
                }
            }
        }
        let mut count: u128 = 0;
        let mut total: u128 = 0;
        let off = (n1 * (n1 + 1)) as i64;
        for (s, &c) in ways[n1].iter().enumerate() {
            if c == 0 {
                continue;
            }
            total += c;
            let u1 = s as i64 - off;
            let u2 = 2 * (n1 * n2) as i64 - u1;
            if u1.min(u2) <= u_min2 {
                count += c;
            }
        }
        let p = (count as f64 / total as f64).min(1.0);
        Ok(TestResult {
            statistic,
            p_two_tailed: p,
            n_effective: n,
            method: Method::Exact,
        })
    } else {
        let mu = (n1 * n2) as f64 / 2.0;
        let tie_term: f64 = tie_group_sizes(&pooled)
            .iter()
            .map(|&t| (t * t * t - t) as f64)
            .sum();
        let nf = n as f64;
        let var = (n1 * n2) as f64 / 12.0 * ((nf + 1.0) - tie_term / (nf * (nf - 1.0)));
        if var <= 0.0 {
            // All observations tied: no evidence either way.
            return Ok(TestResult {
                statistic,
                p_two_tailed: 1.0,
                n_effective: n,
                method: Method::NormalApprox,
            });
        }
        let z = (statistic - mu + 0.5) / var.sqrt();
        let p = (2.0 * normal_cdf(z)).clamp(0.0, 1.0);
        Ok(TestResult {
            statistic,
            p_two_tailed: p,
            n_effective: n,
            method: Method::NormalApprox,
        })
    }
}

// ---------------------------------------------------------------------------
// Spearman rank correlation
// ---------------------------------------------------------------------------

/// Spearman correlation: Pearson correlation of mid-ranks with a
/// t-approximation p-value on n-2 degrees of freedom.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<(f64, TestResult)> {
    if x.len() != y.len() {
        return Err(Error::InvalidParameter("spearman needs equal-length inputs".into()));
    }
    let n = x.len();
    if n < 3 {
        return Err(Error::InvalidParameter("spearman needs n >= 3".into()));
    }
    let rx = mid_ranks(x);
    let ry = mid_ranks(y);
    let nf = n as f64;
    let mx = rx.iter().sum::<f64>() / nf;
    let my = ry.iter().sum::<f64>() / nf;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    let mut sxy = 0.0;
    for i in 0..n {
        let dx = rx[i] - mx;
        let dy = ry[i] - my;
        sxx += dx * dx;
        syy += dy * dy;
        sxy += dx * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::UndefinedStatistic(
            "spearman: zero rank variance in one input".into(),
        ));
    }
    let mut rho = (sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0);
    if 1.0 - rho.abs() < 1e-12 {
        rho = rho.signum(); // perfect rank agreement up to rounding
    }
    let df = nf - 2.0;
    let p = if 1.0 - rho * rho < 1e-14 {
        0.0
    } else {
        let t = rho * (df / (1.0 - rho * rho)).sqrt();
        t_sf_two_sided(t, df)
    };
    Ok((
        rho,
        TestResult {
            statistic: rho,
            p_two_tailed: p,
            n_effective: n,
            method: Method::NormalApprox,
        },
    ))
}

// ---------------------------------------------------------------------------
// Chi-square test of independence
// ---------------------------------------------------------------------------

/// Pearson chi-square test on an r x c contingency table of counts.
/// No continuity correction is applied.
pub fn chi_square(table: &[Vec<f64>]) -> Result<TestResult> {
    let r = table.len();
    if r == 0 || table[0].is_empty() {
        return Err(Error::EmptyInput("chi-square table is empty".into()));
    }
    let c = table[0].len();
    if table.iter().any(|row| row.len() != c) {
        return Err(Error::InvalidParameter("chi-square table must be rectangular".into()));
    }
    if table.iter().flatten().any(|&v| v < 0.0 || !v.is_finite()) {
        return Err(Error::InvalidParameter("chi-square counts must be non-negative".into()));
    }
    let row_sums: Vec<f64> = table.iter().map(|row| row.iter().sum()).collect();
    let col_sums: Vec<f64> = (0..c).map(|j| table.iter().map(|row| row[j]).sum()).collect();
    if row_sums.iter().any(|&s| s == 0.0) || col_sums.iter().any(|&s| s == 0.0) {
        return Err(Error::UndefinedStatistic("chi-square: zero row or column margin".into()));
    }
    let total: f64 = row_sums.iter().sum();
    let mut stat = 0.0;
    for i in 0..r {
        for j in 0..c {
            let e = row_sums[i] * col_sums[j] / total;
            let d = table[i][j] - e;
            stat += d * d / e;
        }
    }
    let df = ((r - 1) * (c - 1)) as f64;
    let p = if df == 0.0 { 1.0 } else { chi2_sf(stat, df) };
    Ok(TestResult {
        statistic: stat,
        p_two_tailed: p,
        n_effective: total.round() as usize,
        method: Method::NormalApprox,
    })
}

// ---------------------------------------------------------------------------
// Mean confidence interval
// ---------------------------------------------------------------------------

/// t-based confidence interval for the mean: mean +/- t_{(1+level)/2, n-1} * s/sqrt(n).
pub fn mean_ci(xs: &[f64], level: f64) -> Result<CIResult> {
    let n = xs.len();
    if n < 2 {
        return Err(Error::InvalidParameter("mean_ci needs n >= 2".into()));
    }
    if !(0.0 < level && level < 1.0) {
        return Err(Error::InvalidParameter("confidence level must be in (0,1)".into()));
    }
    let nf = n as f64;
    let mean = xs.iter().sum::<f64>() / nf;
    let ss: f64 = xs.iter().map(|&v| (v - mean) * (v - mean)).sum();
    let sd = (ss / (nf - 1.0)).sqrt();
    let t = t_quantile(0.5 + level / 2.0, nf - 1.0);
    let hw = t * sd / nf.sqrt();
    Ok(CIResult {
        mean,
        lo: mean - hw,
        hi: mean + hw,
        level,
    })
}

// ---------------------------------------------------------------------------
// Stepwise multiple linear regression
// ---------------------------------------------------------------------------

/// One fitted coefficient of a linear model.
#[derive(Debug, Clone)]
pub struct Coefficient {
    pub name: String,
    pub value: f64,
    pub p_value: f64,
}

/// Result of stepwise model selection.
#[derive(Debug, Clone)]
pub struct RegressionResult {
    /// Names of the selected predictors, in inclusion order.
    pub selected: Vec<String>,
    pub intercept: f64,
    pub coefficients: Vec<Coefficient>,
    pub residual_df: usize,
}

struct OlsFit {
    beta: Vec<f64>,   // intercept first
    p: Vec<f64>,      // per coefficient, intercept first
    df_resid: usize,
}

/// Cholesky solve of the symmetric positive-definite system A x = b for
/// several right-hand sides; returns None when A is not PD.
fn cholesky_solve(a: &[Vec<f64>], rhs: &[Vec<f64>]) -> Option<Vec<Vec<f64>>> {
    let n = a.len();
    let mut l = vec![vec![0.0f64; n]; n];
    for i in 0..n {
        for j in 0..=i {
            let mut s = a[i][j];
            for k in 0..j {
                s -= l[i][k] * l[j][k];
            }
            if i == j {
                if s <= 1e-12 * (1.0 + a[i][i].abs()) {
                    return None;
                }
                l[i][j] = s.sqrt();
            } else {
                l[i][j] = s / l[j][j];
            }
        }
    }
    let mut out = Vec::with_capacity(rhs.len());
    for b in rhs {
        let mut y = vec![0.0; n];
        for i in 0..n {
            let mut s = b[i];
            for k in 0..i {
                s -= l[i][k] * y[k];
            }
            y[i] = s / l[i][i];
        }
        let mut x = vec![0.0; n];
        for i in (0..n).rev() {
            let mut s = y[i];
            for k in i + 1..n {
                s -= l[k][i] * x[k];
            }
            x[i] = s / l[i][i];
        }
        out.push(x);
    }
    Some(out)
}

fn fit_ols(y: &[f64], cols: &[&Vec<f64>]) -> Option<OlsFit> {
    let n = y.len();
    let k = cols.len();
    let p = k + 1; // + intercept
    if n <= p {
        return None;
    }
    let col = |j: usize, i: usize| -> f64 {
        if j == 0 {
            1.0
        } else {
            cols[j - 1][i]
        }
    };
    let mut xtx = vec![vec![0.0f64; p]; p];
    let mut xty = vec![0.0f64; p];
    for i in 0..n {
        for a in 0..p {
            let xa = col(a, i);
            xty[a] += xa * y[i];
            for b in 0..=a {
                xtx[a][b] += xa * col(b, i);
            }
        }
    }
    for a in 0..p {
        for b in a + 1..p {
            xtx[a][b] = xtx[b][a];
        }
    }
    // Solve for beta and for the inverse columns in one pass.
    let mut rhs = vec![xty.clone()];
    for j in 0..p {
        let mut e = vec![0.0; p];
        e[j] = 1.0;
        rhs.push(e);
    }
    let sol = cholesky_solve(&xtx, &rhs)?;
    let beta = sol[0].clone();
    let mut sse = 0.0f64;
    let mut syy = 0.0f64;
    let ymean = y.iter().sum::<f64>() / n as f64;
    for i in 0..n {
        let mut pred = 0.0;
        for a in 0..p {
            pred += beta[a] * col(a, i);
        }
        let r = y[i] - pred;
        sse += r * r;
        syy += (y[i] - ymean) * (y[i] - ymean);
    }
    let df_resid = n - p;
    let sigma2 = sse / df_resid as f64;
    let scale = (syy / n as f64).max(1e-300);
    let mut pvals = vec![1.0f64; p];
    for j in 0..p {
        let var_j = sigma2 * sol[1 + j][j];
        if sigma2 <= 1e-12 * scale {
            // Perfect fit: any truly contributing coefficient is certain,
            // anything else is noise.
            pvals[j] = if beta[j].abs() > 1e-8 * (1.0 + scale.sqrt()) {
                0.0
            } else {
                1.0
            };
        } else if var_j <= 0.0 {
            pvals[j] = 1.0;
        } else {
            let t = beta[j] / var_j.sqrt();
            pvals[j] = t_sf_two_sided(t.abs(), df_resid as f64);
        }
    }
    Some(OlsFit {
        beta,
        p: pvals,
        df_resid,
    })
}

/// Forward-backward stepwise linear regression.
///
/// Adds the candidate with the smallest partial p-value while it is below
/// `p_enter` (0.05), drops included predictors whose p-value rises above
/// `p_stay` (0.10), and iterates to a fixed point. Ordinary least squares by
/// normal equations with a symmetric positive-definite solve.
pub fn stepwise_regression(
    y: &[f64],
    predictors: &[(String, Vec<f64>)],
) -> Result<RegressionResult> {
    stepwise_regression_with(y, predictors, 0.05, 0.10)
}

pub fn stepwise_regression_with(
    y: &[f64],
    predictors: &[(String, Vec<f64>)],
    p_enter: f64,
    p_stay: f64,
) -> Result<RegressionResult> {
    let n = y.len();
    if predictors.iter().any(|(_, c)| c.len() != n) {
        return Err(Error::InvalidParameter("predictor length mismatch".into()));
    }
    if n <= predictors.len() + 1 {
        return Err(Error::TooFewCases {
            need: predictors.len() + 2,
            got: n,
        });
    }
    let mut included: Vec<usize> = Vec::new();
    for _ in 0..200 {
        let mut changed = false;
        // Forward step.
        let mut best: Option<(usize, f64)> = None;
        for (j, (_, col)) in predictors.iter().enumerate() {
            if included.contains(&j) {
                continue;
            }
            let mut cols: Vec<&Vec<f64>> = included.iter().map(|&i| &predictors[i].1).collect();
            cols.push(col);
            if let Some(fit) = fit_ols(y, &cols) {
                let p = fit.p[cols.len()]; // candidate is the last column
                if best.map(|(_, bp)| p < bp).unwrap_or(true) {
                    best = Some((j, p));
                }
            }
        }
        if let Some((j, p)) = best {
            if p < p_enter {
                included.push(j);
                changed = true;
            }
        }
        // Backward step(s).
        loop {
            if included.is_empty() {
                break;
            }
            let cols: Vec<&Vec<f64>> = included.iter().map(|&i| &predictors[i].1).collect();
            let fit = match fit_ols(y, &cols) {
                Some(f) => f,
                None => break,
            };
            let mut worst: Option<(usize, f64)> = None;
            for (pos, _) in included.iter().enumerate() {
                let p = fit.p[pos + 1];
                if worst.map(|(_, wp)| p > wp).unwrap_or(true) {
                    worst = Some((pos, p));
                }
            }
            match worst {
                Some((pos, p)) if p > p_stay => {
                    included.remove(pos);
                    changed = true;
                }
                _ => break,
            }
        }
        if !changed {
            break;
        }
    }
    let cols: Vec<&Vec<f64>> = included.iter().map(|&i| &predictors[i].1).collect();
    let fit = fit_ols(y, &cols).ok_or_else(|| {
        Error::RankDeficient(format!(
            "selected design {:?} is rank-deficient",
            included.iter().map(|&i| predictors[i].0.clone()).collect::<Vec<_>>()
        ))
    })?;
    let coefficients = included
        .iter()
        .enumerate()
        .map(|(pos, &i)| Coefficient {
            name: predictors[i].0.clone(),
            value: fit.beta[pos + 1],
            p_value: fit.p[pos + 1],
        })
        .collect();
    Ok(RegressionResult {
        selected: included.iter().map(|&i| predictors[i].0.clone()).collect(),
        intercept: fit.beta[0],
        coefficients,
        residual_df: fit.df_resid,
    })
}
