//! Classical hypothesis tests: Fisher's exact test, chi-squared independence,
//! Mann-Whitney U, Bonferroni correction and a Kolmogorov-Smirnov normality
//! check.

use serde::Serialize;
use statrs::function::erf::erfc;
use statrs::function::factorial::ln_binomial;
use statrs::function::gamma::gamma_ur;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    FisherExact,
    ChiSquared,
    MannWhitneyExact,
    MannWhitneyNormal,
    KolmogorovSmirnov,
}

impl Method {
    pub fn label(self) -> &'static str {
        match self {
            Method::FisherExact => "Fisher exact (two-sided)",
            Method::ChiSquared => "Pearson chi-squared",
            Method::MannWhitneyExact => "Mann-Whitney U (exact)",
            Method::MannWhitneyNormal => "Mann-Whitney U (normal approximation)",
            Method::KolmogorovSmirnov => "Kolmogorov-Smirnov vs fitted normal",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TestResult {
    pub statistic: f64,
    pub p_value: f64,
    pub df: Option<f64>,
    pub method: Method,
    pub corrected_p: Option<f64>,
    /// Set when the reference distribution assumes something the test did
    /// not do (e.g. KS with parameters estimated from the data).
    pub caveat: Option<&'static str>,
}

impl TestResult {
    fn new(statistic: f64, p_value: f64, df: Option<f64>, method: Method) -> Self {
        TestResult {
            statistic,
            p_value: clamp_p(p_value),
            df,
            method,
            corrected_p: None,
            caveat: None,
        }
    }

    /// The corrected p-value when present, else the raw one.
    pub fn effective_p(&self) -> f64 {
        self.corrected_p.unwrap_or(self.p_value)
    }
}

fn clamp_p(p: f64) -> f64 {
    if p.is_nan() {
        1.0
    } else {
        p.clamp(f64::MIN_POSITIVE, 1.0)
    }
}

/// `*` (p<0.05), `**` (p<0.01), `***` (p<0.001).
pub fn significance_stars(p: f64) -> &'static str {
    if p < 0.001 {
        "***"
    } else if p < 0.01 {
        "**"
    } else if p < 0.05 {
        "*"
    } else {
        ""
    }
}

/// Standard normal CDF.
pub fn normal_cdf(z: f64) -> f64 {
    0.5 * erfc(-z / std::f64::consts::SQRT_2)
}

/// Upper tail of the chi-squared distribution.
pub fn chi2_sf(statistic: f64, df: f64) -> f64 {
    if statistic <= 0.0 {
        1.0
    } else {
        gamma_ur(df / 2.0, statistic / 2.0)
    }
}

// ---------------------------------------------------------------------------
// Fisher

/// Point probabilities of every 2x2 table sharing the margins of `table`,
/// indexed by the top-left cell, starting at its minimum.
pub(crate) fn hypergeometric_masses(table: [[u64; 2]; 2]) -> (u64, Vec<f64>) {
    let [[a, b], [c, d]] = table;
    let row1 = a + b;
    let col1 = a + c;
    let n = a + b + c + d;
    let lo = (row1 + col1).saturating_sub(n);
    let hi = row1.min(col1);
    let denom = ln_binomial(n, col1);
    let masses = (lo..=hi)
        .map(|x| (ln_binomial(row1, x) + ln_binomial(n - row1, col1 - x) - denom).exp())
        .collect();
    (lo, masses)
}

/// Two-sided Fisher exact test; the statistic is the sample odds ratio
/// `ad / bc`.
pub fn fisher_exact_2x2(table: [[u64; 2]; 2]) -> Result<TestResult> {
    let [[a, b], [c, d]] = table;
    if a + b + c + d == 0 {
        return Err(Error::InvalidTable("2x2 table has zero total".into()));
    }
    let (lo, masses) = hypergeometric_masses(table);
    let observed = masses[(a - lo) as usize];
    let cutoff = observed * (1.0 + 1e-12);
    let p: f64 = masses.iter().filter(|&&m| m <= cutoff).sum();
    let odds_ratio = if b * c == 0 {
        if a * d == 0 {
            f64::NAN
        } else {
            f64::INFINITY
        }
    } else {
        (a * d) as f64 / (b * c) as f64
    };
    Ok(TestResult::new(odds_ratio, p.min(1.0), None, Method::FisherExact))
}

// ---------------------------------------------------------------------------
// Chi-squared

/// Pearson chi-squared test of independence for an r x c table of counts,
/// without continuity correction.
pub fn chi_squared_independence(table: &[Vec<f64>]) -> Result<TestResult> {
    let r = table.len();
    if r < 2 {
        return Err(Error::InvalidTable("need at least two rows".into()));
    }
    let c = table[0].len();
    if c < 2 || table.iter().any(|row| row.len() != c) {
        return Err(Error::InvalidTable("rows must share at least two columns".into()));
    }
    if table.iter().flatten().any(|&v| v < 0.0 || !v.is_finite()) {
        return Err(Error::InvalidTable("counts must be finite and non-negative".into()));
    }
    let row_sums: Vec<f64> = table.iter().map(|row| row.iter().sum()).collect();
    let col_sums: Vec<f64> = (0..c).map(|j| table.iter().map(|row| row[j]).sum()).collect();
    if row_sums.iter().chain(&col_sums).any(|&m| m <= 0.0) {
        return Err(Error::InvalidTable("every margin must be positive".into()));
    }
    let total: f64 = row_sums.iter().sum();
    let mut stat = 0.0;
    for (i, row) in table.iter().enumerate() {
        for (j, &obs) in row.iter().enumerate() {
            let exp = row_sums[i] * col_sums[j] / total;
            stat += (obs - exp).powi(2) / exp;
        }
    }
    let df = ((r - 1) * (c - 1)) as f64;
    Ok(TestResult::new(stat, chi2_sf(stat, df), Some(df), Method::ChiSquared))
}

// ---------------------------------------------------------------------------
// Mann-Whitney U

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum MwMode {
    Exact,
    NormalApprox,
    /// Exact when `n_x + n_y <= 12` and there are no ties.
    Auto,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MannWhitney {
    pub u_x: f64,
    pub u_y: f64,
    pub result: TestResult,
}

/// Midranks (1-based) of `values`, with the tie-group sizes.
fn midranks(values: &[f64]) -> (Vec<f64>, Vec<usize>) {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&i, &j| values[i].total_cmp(&values[j]));
    let mut ranks = vec![0.0; values.len()];
    let mut ties = Vec::new();
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        ties.push(j - i + 1);
        i = j + 1;
    }
    (ranks, ties)
}

/// Frequencies of U for `nx` vs `ny` tie-free observations, indexed by U.
fn u_frequencies(nx: usize, ny: usize) -> Vec<f64> {
    // dp[j][u]: arrangements of i x-values and j y-values with U = u, where U
    // counts (x, y) pairs with x above y. Adding an x on top of j y-values
    // adds j to U.
    let max_u = nx * ny;
    let mut dp = vec![vec![0.0; max_u + 1]; ny + 1];
    for row in dp.iter_mut() {
        row[0] = 1.0;
    }
    for _i in 1..=nx {
        let mut next = vec![vec![0.0; max_u + 1]; ny + 1];
        next[0][0] = 1.0;
        for j in 1..=ny {
            for u in 0..=max_u {
                let with_x_top = if u >= j { dp[j][u - j] } else { 0.0 };
                next[j][u] = with_x_top + next[j - 1][u];
            }
        }
        dp = next;
    }
    dp.swap_remove(ny)
}

fn exact_two_sided(dist: &[(f64, f64)], u: f64) -> f64 {
    let total: f64 = dist.iter().map(|(_, w)| w).sum();
    let eps = 1e-9;
    let lower: f64 = dist.iter().filter(|(v, _)| *v <= u + eps).map(|(_, w)| w).sum();
    let upper: f64 = dist.iter().filter(|(v, _)| *v >= u - eps).map(|(_, w)| w).sum();
    (2.0 * lower.min(upper) / total).min(1.0)
}

/// Enumerates all ways to give `nx` of the pooled midranks to x.
fn enumerate_u(ranks: &[f64], nx: usize) -> Vec<(f64, f64)> {
    let n = ranks.len();
    let offset = (nx * (nx + 1)) as f64 / 2.0;
    let mut counts: Vec<(f64, f64)> = Vec::new();
    let mut idx: Vec<usize> = (0..nx).collect();
    loop {
        let u = idx.iter().map(|&i| ranks[i]).sum::<f64>() - offset;
        match counts.iter_mut().find(|(v, _)| (*v - u).abs() < 1e-9) {
            Some(e) => e.1 += 1.0,
            None => counts.push((u, 1.0)),
        }
        // next combination in lexicographic order
        let mut k = nx;
        loop {
            if k == 0 {
                return counts;
            }
            k -= 1;
            if idx[k] != k + n - nx {
                break;
            }
            if k == 0 {
                return counts;
            }
        }
        idx[k] += 1;
        for m in k + 1..nx {
            idx[m] = idx[m - 1] + 1;
        }
    }
}

const MAX_ENUMERATION: f64 = 5.0e6;

pub fn mann_whitney_u(x: &[f64], y: &[f64], mode: MwMode) -> Result<MannWhitney> {
    if x.is_empty() || y.is_empty() {
        return Err(Error::DegenerateSample("Mann-Whitney needs two non-empty samples".into()));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::DegenerateSample("non-finite observation".into()));
    }
    let (nx, ny) = (x.len(), y.len());
    let n = nx + ny;
    let pooled: Vec<f64> = x.iter().chain(y).copied().collect();
    let (ranks, ties) = midranks(&pooled);
    let rank_sum_x: f64 = ranks[..nx].iter().sum();
    let u_x = rank_sum_x - (nx * (nx + 1)) as f64 / 2.0;
    let u_y = (nx * ny) as f64 - u_x;
    let has_ties = ties.iter().any(|&t| t > 1);

    let use_exact = match mode {
        MwMode::Exact => true,
        MwMode::NormalApprox => false,
        MwMode::Auto => n <= 12 && !has_ties,
    };
    let result = if use_exact {
        let dist: Vec<(f64, f64)> = if has_ties {
            if ln_binomial(n as u64, nx as u64).exp() > MAX_ENUMERATION {
                return Err(Error::DegenerateSample(format!(
                    "exact Mann-Whitney with ties needs C({n},{nx}) enumerations; use the normal approximation"
                )));
            }
            let mut sorted = ranks.clone();
            sorted.sort_by(f64::total_cmp);
            enumerate_u(&sorted, nx)
        } else {
            u_frequencies(nx, ny)
                .into_iter()
                .enumerate()
                .map(|(u, w)| (u as f64, w))
                .collect()
        };
        TestResult::new(u_x, exact_two_sided(&dist, u_x), None, Method::MannWhitneyExact)
    } else {
        let mu = (nx * ny) as f64 / 2.0;
        let tie_term: f64 = ties.iter().map(|&t| (t * t * t - t) as f64).sum();
        let nf = n as f64;
        let var = (nx * ny) as f64 / 12.0 * ((nf + 1.0) - tie_term / (nf * (nf - 1.0)));
        let p = if var <= 0.0 {
            1.0
        } else {
            let z = ((u_x - mu).abs() - 0.5).max(0.0) / var.sqrt();
            (2.0 * normal_cdf(-z)).min(1.0)
        };
        TestResult::new(u_x, p, None, Method::MannWhitneyNormal)
    };
    Ok(MannWhitney { u_x, u_y, result })
}

// ---------------------------------------------------------------------------
// Bonferroni

/// Multiplies each p-value by `m` (default: the number of p-values), capped
/// at 1. Order is preserved.
pub fn bonferroni(p_values: &[f64], m: Option<usize>) -> Result<Vec<f64>> {
    let m = m.unwrap_or(p_values.len());
    if m < p_values.len() {
        return Err(Error::Config(format!(
            "Bonferroni family size {m} is smaller than the {} p-values given",
            p_values.len()
        )));
    }
    Ok(p_values.iter().map(|&p| (p * m as f64).min(1.0)).collect())
}

// ---------------------------------------------------------------------------
// Kolmogorov-Smirnov

/// Survival function of the limiting Kolmogorov distribution.
pub fn kolmogorov_sf(lambda: f64) -> f64 {
    if lambda <= 0.0 {
        return 1.0;
    }
    if lambda < 1.18 {
        // Jacobi theta form converges fast for small arguments.
        let c = std::f64::consts::PI.powi(2) / (8.0 * lambda * lambda);
        let s: f64 = (1..=20)
            .map(|k| {
                let m = (2 * k - 1) as f64;
                (-m * m * c).exp()
            })
            .sum();
        (1.0 - (2.0 * std::f64::consts::PI).sqrt() / lambda * s).clamp(0.0, 1.0)
    } else {
        let s: f64 = (1..=100)
            .map(|k| {
                let kf = k as f64;
                let sign = if k % 2 == 1 { 1.0 } else { -1.0 };
                sign * (-2.0 * kf * kf * lambda * lambda).exp()
            })
            .sum();
        (2.0 * s).clamp(0.0, 1.0)
    }
}

pub const KS_ESTIMATED_PARAMETERS: &str =
    "normal mean and sd estimated from the sample (Lilliefors condition); asymptotic p-value is conservative";

/// KS distance between the sample and a normal with the sample's mean and
/// standard deviation, with the asymptotic Kolmogorov p-value.
pub fn ks_normality(data: &[f64]) -> Result<TestResult> {
    let n = data.len();
    if n < 5 {
        return Err(Error::DegenerateSample(format!("KS normality needs n >= 5, got {n}")));
    }
    let nf = n as f64;
    let mean = data.iter().sum::<f64>() / nf;
    let sd = (data.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (nf - 1.0)).sqrt();
    if !(sd > 0.0) {
        return Err(Error::DegenerateSample("zero variance".into()));
    }
    let mut sorted = data.to_vec();
    sorted.sort_by(f64::total_cmp);
    let d = sorted
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let f = normal_cdf((v - mean) / sd);
            let above = (i + 1) as f64 / nf - f;
            let below = f - i as f64 / nf;
            above.max(below)
        })
        .fold(0.0, f64::max);
    let mut r = TestResult::new(d, kolmogorov_sf(nf.sqrt() * d), None, Method::KolmogorovSmirnov);
    r.caveat = Some(KS_ESTIMATED_PARAMETERS);
    Ok(r)
}
