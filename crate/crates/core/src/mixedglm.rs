//! Logistic regression and binomial mixed models with crossed Gaussian
//! random intercepts, fitted by Laplace-approximated maximum likelihood.
//!
//! The random intercepts use the spherical form `u_k = sigma_k * v_k` with
//! `v ~ N(0, I)`. For fixed variances the fixed coefficients and `v` are
//! found jointly by penalized Newton iterations; the variances are then
//! chosen by cyclic golden-section search on the Laplace objective.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};

const DIVERGENCE_LIMIT: f64 = 30.0;

fn sigmoid(eta: f64) -> f64 {
    if eta >= 0.0 {
        1.0 / (1.0 + (-eta).exp())
    } else {
        let e = eta.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + exp(eta))` without overflow.
fn log1p_exp(eta: f64) -> f64 {
    if eta > 0.0 {
        eta + (-eta).exp().ln_1p()
    } else {
        eta.exp().ln_1p()
    }
}

fn bernoulli_loglik(y: f64, eta: f64) -> f64 {
    y * eta - log1p_exp(eta)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IrlsFit {
    pub coefficients: Vec<f64>,
    pub iterations: usize,
    pub log_likelihood: f64,
}

/// Maximum-likelihood logistic regression by iteratively reweighted least
/// squares. Stops when the largest coefficient step is below 1e-8 or after
/// 100 iterations.
pub fn logistic_irls(x: &DMatrix<f64>, y: &[f64], weights: Option<&[f64]>) -> Result<IrlsFit> {
    let (n, p) = x.shape();
    if y.len() != n || weights.is_some_and(|w| w.len() != n) {
        return Err(Error::validation("logistic_irls", "row count mismatch"));
    }
    if p == 0 {
        return Err(Error::validation("logistic_irls", "design has no columns"));
    }
    let obs_w = |i: usize| weights.map_or(1.0, |w| w[i]);
    let mut beta = DVector::<f64>::zeros(p);
    let loglik = |beta: &DVector<f64>| -> f64 {
        let eta = x * beta;
        (0..n).map(|i| obs_w(i) * bernoulli_loglik(y[i], eta[i])).sum()
    };
    let mut ll = loglik(&beta);
    for iter in 1..=100 {
        let eta = x * &beta;
        let mut grad = DVector::<f64>::zeros(p);
        let mut hess = DMatrix::<f64>::zeros(p, p);
        for i in 0..n {
            let mu = sigmoid(eta[i]);
            let w = obs_w(i) * mu * (1.0 - mu);
            let r = obs_w(i) * (y[i] - mu);
            let row = x.row(i);
            for a in 0..p {
                let xa = row[a];
                if xa == 0.0 {
                    continue;
                }
                grad[a] += xa * r;
                for b in a..p {
                    hess[(a, b)] += w * xa * row[b];
                }
            }
        }
        fill_lower(&mut hess);
        let step = solve_spd(hess, &grad).ok_or_else(|| divergence_or_singular(&beta))?;
        let mut t = 1.0;
        let mut candidate = &beta + &step;
        let mut cand_ll = loglik(&candidate);
        while cand_ll < ll - 1e-12 && t > 1e-6 {
            t *= 0.5;
            candidate = &beta + &step * t;
            cand_ll = loglik(&candidate);
        }
        let max_step = (&candidate - &beta).amax();
        beta = candidate;
        ll = cand_ll;
        if beta.amax() > DIVERGENCE_LIMIT {
            return Err(Error::Divergence { column: beta.iamax() });
        }
        if max_step < 1e-8 {
            return Ok(IrlsFit {
                coefficients: beta.iter().copied().collect(),
                iterations: iter,
                log_likelihood: ll,
            });
        }
    }
    // Slow drift without convergence is the signature of quasi-separation.
    Err(Error::Divergence { column: beta.iamax() })
}

fn divergence_or_singular(beta: &DVector<f64>) -> Error {
    if beta.amax() > 10.0 {
        Error::Divergence { column: beta.iamax() }
    } else {
        Error::validation("logistic_irls", "design matrix is rank deficient")
    }
}

fn fill_lower(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for a in 0..n {
        for b in 0..a {
            m[(a, b)] = m[(b, a)];
        }
    }
}

fn solve_spd(m: DMatrix<f64>, rhs: &DVector<f64>) -> Option<DVector<f64>> {
    let chol = m.cholesky()?;
    Some(chol.solve(rhs))
}

// ---------------------------------------------------------------------------
// Data and specification

/// Column-oriented observations: a binary outcome and one level label per
/// named factor.
#[derive(Debug, Clone, Default)]
pub struct GlmmData {
    factor_names: Vec<String>,
    columns: Vec<Vec<String>>,
    outcome: Vec<u8>,
}

impl GlmmData {
    pub fn new<S: AsRef<str>>(factor_names: &[S]) -> Self {
        GlmmData {
            factor_names: factor_names.iter().map(|s| s.as_ref().to_string()).collect(),
            columns: vec![Vec::new(); factor_names.len()],
            outcome: Vec::new(),
        }
    }

    /// `levels` follows the order of the factor names given to `new`.
    pub fn push<S: AsRef<str>>(&mut self, outcome: bool, levels: &[S]) -> Result<()> {
        if levels.len() != self.factor_names.len() {
            return Err(Error::validation(
                "glmm data",
                format!("expected {} factor levels, got {}", self.factor_names.len(), levels.len()),
            ));
        }
        for (col, l) in self.columns.iter_mut().zip(levels) {
            col.push(l.as_ref().to_string());
        }
        self.outcome.push(u8::from(outcome));
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.outcome.len()
    }

    pub fn is_empty(&self) -> bool {
        self.outcome.is_empty()
    }

    fn column(&self, name: &str) -> Result<&[String]> {
        self.factor_names
            .iter()
            .position(|n| n == name)
            .map(|i| self.columns[i].as_slice())
            .ok_or_else(|| Error::Config(format!("unknown factor `{name}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "level")]
pub enum Coding {
    /// Intercept is the reference level; other levels are contrasts.
    Reference(String),
    /// One coefficient per level, no intercept.
    CellMeans,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GlmmOptions {
    pub max_outer_cycles: usize,
    pub max_inner_iterations: usize,
    /// Convergence tolerance on random-effect standard deviations.
    pub tolerance: f64,
    pub variance_floor: f64,
    /// Upper end of the search interval for each standard deviation.
    pub max_sd: f64,
    /// Fix the random-effect variances instead of estimating them.
    pub fixed_variances: Option<Vec<f64>>,
}

impl Default for GlmmOptions {
    fn default() -> Self {
        GlmmOptions {
            max_outer_cycles: 30,
            max_inner_iterations: 100,
            tolerance: 1e-4,
            variance_floor: 1e-8,
            max_sd: 5.0,
            fixed_variances: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GlmmSpec {
    pub fixed_factor: String,
    pub coding: Coding,
    /// Report order for the fixed levels; defaults to first appearance.
    pub level_order: Option<Vec<String>>,
    pub random_factors: Vec<String>,
    pub options: GlmmOptions,
}

impl GlmmSpec {
    pub fn new(fixed_factor: &str, coding: Coding, random_factors: &[&str]) -> Self {
        GlmmSpec {
            fixed_factor: fixed_factor.into(),
            coding,
            level_order: None,
            random_factors: random_factors.iter().map(|s| s.to_string()).collect(),
            options: GlmmOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FixedEffect {
    pub level: String,
    pub coef: f64,
    pub odds_ratio: f64,
    pub is_reference: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RandomEffect {
    pub factor: String,
    pub variance: f64,
    /// Conditional modes of the intercepts, by level.
    pub intercepts: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GlmmFit {
    pub fixed_factor: String,
    pub coding: Coding,
    pub fixed_effects: Vec<FixedEffect>,
    pub random_effects: Vec<RandomEffect>,
    pub converged: bool,
    pub iterations: usize,
    pub log_likelihood: f64,
    pub n_obs: usize,
}

impl GlmmFit {
    pub fn coef(&self, level: &str) -> Option<f64> {
        self.fixed_effects.iter().find(|f| f.level == level).map(|f| f.coef)
    }

    pub fn variance(&self, factor: &str) -> Option<f64> {
        self.random_effects.iter().find(|r| r.factor == factor).map(|r| r.variance)
    }
}

fn levels_in_order(col: &[String]) -> (Vec<String>, Vec<usize>) {
    let mut index: BTreeMap<&str, usize> = BTreeMap::new();
    let mut names = Vec::new();
    let codes = col
        .iter()
        .map(|v| {
            *index.entry(v.as_str()).or_insert_with(|| {
                names.push(v.clone());
                names.len() - 1
            })
        })
        .collect();
    (names, codes)
}

/// Sparse row representation: fixed columns are dense (few), random columns
/// are one index per factor.
struct Problem {
    x: DMatrix<f64>,
    y: Vec<f64>,
    /// Per factor: global random-column offset and per-observation level.
    z: Vec<(usize, Vec<usize>)>,
    n_random: usize,
    /// Factor of each random column.
    column_factor: Vec<usize>,
}

struct Mode {
    beta: DVector<f64>,
    v: DVector<f64>,
    objective: f64,
    log_det: f64,
    converged: bool,
    iterations: usize,
}

impl Problem {
    fn eta(&self, beta: &DVector<f64>, v: &DVector<f64>, sd: &[f64]) -> DVector<f64> {
        let mut eta = &self.x * beta;
        for (k, (offset, levels)) in self.z.iter().enumerate() {
            for (i, &l) in levels.iter().enumerate() {
                eta[i] += sd[k] * v[offset + l];
            }
        }
        eta
    }

    fn penalized(&self, beta: &DVector<f64>, v: &DVector<f64>, sd: &[f64]) -> f64 {
        let eta = self.eta(beta, v, sd);
        let ll: f64 = (0..self.y.len()).map(|i| bernoulli_loglik(self.y[i], eta[i])).sum();
        ll - 0.5 * v.norm_squared()
    }

    /// Gradient and negative Hessian of the penalized log-likelihood over
    /// `(beta, v)`.
    fn newton_system(
        &self,
        beta: &DVector<f64>,
        v: &DVector<f64>,
        sd: &[f64],
    ) -> (DVector<f64>, DMatrix<f64>) {
        let p = self.x.ncols();
        let q = self.n_random;
        let dim = p + q;
        let eta = self.eta(beta, v, sd);
        let mut grad = DVector::<f64>::zeros(dim);
        let mut hess = DMatrix::<f64>::zeros(dim, dim);
        let mut idx: Vec<(usize, f64)> = Vec::with_capacity(p + self.z.len());
        for i in 0..self.y.len() {
            let mu = sigmoid(eta[i]);
            let w = mu * (1.0 - mu);
            let r = self.y[i] - mu;
            idx.clear();
            for a in 0..p {
                let xa = self.x[(i, a)];
                if xa != 0.0 {
                    idx.push((a, xa));
                }
            }
            for (k, (offset, levels)) in self.z.iter().enumerate() {
                if sd[k] != 0.0 {
                    idx.push((p + offset + levels[i], sd[k]));
                }
            }
            for (ai, &(a, va)) in idx.iter().enumerate() {
                grad[a] += va * r;
                for &(b, vb) in &idx[ai..] {
                    let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
                    hess[(lo, hi)] += w * va * vb;
                }
            }
        }
        for j in 0..q {
            grad[p + j] -= v[j];
            hess[(p + j, p + j)] += 1.0;
        }
        fill_lower(&mut hess);
        (grad, hess)
    }

    fn log_det_random_block(&self, hess: &DMatrix<f64>) -> f64 {
        let p = self.x.ncols();
        let q = self.n_random;
        if q == 0 {
            return 0.0;
        }
        let block = hess.view((p, p), (q, q)).into_owned();
        match block.cholesky() {
            Some(c) => 2.0 * c.l().diagonal().iter().map(|d| d.ln()).sum::<f64>(),
            None => f64::INFINITY,
        }
    }

    fn find_mode(&self, sd: &[f64], start: Option<&Mode>, max_iter: usize) -> Mode {
        let p = self.x.ncols();
        let q = self.n_random;
        let (mut beta, mut v) = match start {
            Some(m) => (m.beta.clone(), m.v.clone()),
            None => (DVector::zeros(p), DVector::zeros(q)),
        };
        // Columns of factors with zero sd carry no information.
        for j in 0..q {
            if sd[self.column_factor[j]] == 0.0 {
                v[j] = 0.0;
            }
        }
        let mut obj = self.penalized(&beta, &v, sd);
        let mut converged = false;
        let mut iterations = 0;
        for iter in 1..=max_iter {
            iterations = iter;
            let (grad, hess) = self.newton_system(&beta, &v, sd);
            let Some(step) = solve_spd(hess, &grad) else { break };
            let mut t = 1.0;
            let (mut nb, mut nv, mut nobj);
            loop {
                nb = &beta + step.rows(0, p) * t;
                nv = &v + step.rows(p, q) * t;
                nobj = self.penalized(&nb, &nv, sd);
                if nobj >= obj - 1e-10 * obj.abs().max(1.0) || t < 1e-8 {
                    break;
                }
                t *= 0.5;
            }
            let max_step = (step.amax() * t).abs();
            beta = nb;
            v = nv;
            obj = nobj;
            if beta.amax() > DIVERGENCE_LIMIT {
                break;
            }
            if max_step < 1e-8 {
                converged = true;
                break;
            }
        }
        let (_, hess) = self.newton_system(&beta, &v, sd);
        Mode {
            log_det: self.log_det_random_block(&hess),
            beta,
            v,
            objective: obj,
            converged,
            iterations,
        }
    }
}

impl Mode {
    fn laplace(&self) -> f64 {
        self.objective - 0.5 * self.log_det
    }
}

fn golden_section(mut f: impl FnMut(f64) -> f64, lo: f64, hi: f64, tol: f64) -> (f64, f64) {
    let r = (5f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = (lo, hi);
    let mut c = b - r * (b - a);
    let mut d = a + r * (b - a);
    let mut fc = f(c);
    let mut fd = f(d);
    while (b - a).abs() > tol {
        if fc > fd {
            b = d;
            d = c;
            fd = fc;
            c = b - r * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + r * (b - a);
            fd = f(d);
        }
    }
    if fc > fd {
        (c, fc)
    } else {
        (d, fd)
    }
}

/// Fits `outcome ~ fixed factor + (1|random_1) + (1|random_2) + ...`.
pub fn fit_binomial_glmm(data: &GlmmData, spec: &GlmmSpec) -> Result<GlmmFit> {
    if data.is_empty() {
        return Err(Error::validation("glmm", "no observations"));
    }
    if spec.random_factors.contains(&spec.fixed_factor) {
        return Err(Error::Config(format!(
            "`{}` cannot be both fixed and random",
            spec.fixed_factor
        )));
    }
    let fixed_col = data.column(&spec.fixed_factor)?;
    let (mut level_names, _) = levels_in_order(fixed_col);
    if let Some(order) = &spec.level_order {
        let mut ordered: Vec<String> = order.iter().filter(|l| level_names.contains(l)).cloned().collect();
        ordered.extend(level_names.iter().filter(|l| !order.contains(l)).cloned());
        level_names = ordered;
    }
    if level_names.len() < 2 {
        return Err(Error::validation(
            "glmm",
            format!("fixed factor `{}` needs at least two levels", spec.fixed_factor),
        ));
    }
    let level_index: BTreeMap<&str, usize> =
        level_names.iter().enumerate().map(|(i, l)| (l.as_str(), i)).collect();
    let reference = match &spec.coding {
        Coding::Reference(r) => Some(*level_index.get(r.as_str()).ok_or_else(|| {
            Error::Config(format!("reference level `{r}` not present in `{}`", spec.fixed_factor))
        })?),
        Coding::CellMeans => None,
    };
    let n = data.len();
    // Column layout: reference coding -> [intercept, non-reference levels];
    // cell means -> one column per level.
    let contrast_levels: Vec<usize> = (0..level_names.len()).filter(|&l| Some(l) != reference).collect();
    let p = match reference {
        Some(_) => 1 + contrast_levels.len(),
        None => level_names.len(),
    };
    let mut x = DMatrix::<f64>::zeros(n, p);
    for (i, lv) in fixed_col.iter().enumerate() {
        let l = level_index[lv.as_str()];
        match reference {
            Some(_) => {
                x[(i, 0)] = 1.0;
                if let Some(pos) = contrast_levels.iter().position(|&c| c == l) {
                    x[(i, 1 + pos)] = 1.0;
                }
            }
            None => x[(i, l)] = 1.0,
        }
    }
    let mut z = Vec::new();
    let mut random_levels = Vec::new();
    let mut column_factor = Vec::new();
    let mut offset = 0;
    for (k, name) in spec.random_factors.iter().enumerate() {
        let (names, codes) = levels_in_order(data.column(name)?);
        z.push((offset, codes));
        offset += names.len();
        column_factor.extend(std::iter::repeat_n(k, names.len()));
        random_levels.push(names);
    }
    let problem = Problem {
        x,
        y: data.outcome.iter().map(|&o| f64::from(o)).collect(),
        z,
        n_random: offset,
        column_factor,
    };

    let opts = &spec.options;
    let k = spec.random_factors.len();
    let mut sd: Vec<f64> = match &opts.fixed_variances {
        Some(v) => {
            if v.len() != k || v.iter().any(|&s| !(s >= 0.0)) {
                return Err(Error::Config("fixed_variances must give one non-negative value per random factor".into()));
            }
            v.iter().map(|s| s.sqrt()).collect()
        }
        None => vec![0.5; k],
    };
    let mut mode = problem.find_mode(&sd, None, opts.max_inner_iterations);
    let mut outer_converged = true;
    let mut cycles = 0;
    if opts.fixed_variances.is_none() && k > 0 {
        outer_converged = false;
        for _ in 0..opts.max_outer_cycles {
            cycles += 1;
            let mut max_change: f64 = 0.0;
            for f in 0..k {
                let before = sd[f];
                let warm = &mode;
                let mut eval = |s: f64| {
                    let mut trial = sd.clone();
                    trial[f] = s;
                    problem.find_mode(&trial, Some(warm), opts.max_inner_iterations).laplace()
                };
                let (best, best_val) = golden_section(&mut eval, 0.0, opts.max_sd, opts.tolerance / 4.0);
                let at_zero = eval(0.0);
                let chosen = if at_zero >= best_val { 0.0 } else { best };
                sd[f] = chosen;
                mode = problem.find_mode(&sd, Some(&mode), opts.max_inner_iterations);
                max_change = max_change.max((chosen - before).abs());
            }
            if max_change < opts.tolerance {
                outer_converged = true;
                break;
            }
        }
    }
    // Final inner solve at the chosen variances.
    mode = problem.find_mode(&sd, Some(&mode), opts.max_inner_iterations);

    let beta = &mode.beta;
    let fixed_effects = match reference {
        Some(r) => {
            let mut out = vec![FixedEffect {
                level: level_names[r].clone(),
                coef: beta[0],
                odds_ratio: beta[0].exp(),
                is_reference: true,
            }];
            for (pos, &l) in contrast_levels.iter().enumerate() {
                out.push(FixedEffect {
                    level: level_names[l].clone(),
                    coef: beta[1 + pos],
                    odds_ratio: beta[1 + pos].exp(),
                    is_reference: false,
                });
            }
            out
        }
        None => level_names
            .iter()
            .enumerate()
            .map(|(l, name)| FixedEffect {
                level: name.clone(),
                coef: beta[l],
                odds_ratio: beta[l].exp(),
                is_reference: false,
            })
            .collect(),
    };
    let random_effects = spec
        .random_factors
        .iter()
        .enumerate()
        .map(|(f, name)| {
            let var = sd[f] * sd[f];
            let (offset, _) = problem.z[f];
            RandomEffect {
                factor: name.clone(),
                variance: if var < opts.variance_floor { 0.0 } else { var },
                intercepts: random_levels[f]
                    .iter()
                    .enumerate()
                    .map(|(j, l)| (l.clone(), sd[f] * mode.v[offset + j]))
                    .collect(),
            }
        })
        .collect();
    Ok(GlmmFit {
        fixed_factor: spec.fixed_factor.clone(),
        coding: spec.coding.clone(),
        fixed_effects,
        random_effects,
        converged: mode.converged && outer_converged,
        iterations: cycles.max(mode.iterations),
        log_likelihood: mode.laplace(),
        n_obs: n,
    })
}

// ---------------------------------------------------------------------------
// Reporting

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum OrSort {
    None,
    AscendingOr,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum DifficultyBand {
    /// Odds of a correct prediction below the average task.
    Harder,
    Easier,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OddsRatioRow {
    pub level: String,
    pub coef: f64,
    pub odds_ratio: f64,
    pub abs_one_minus_or: f64,
    pub is_reference: bool,
    pub band: DifficultyBand,
    /// `|1 - OR| > 0.5`, the rows set apart in the difficulty ranking.
    pub marked: bool,
}

pub fn odds_ratio_row(level: &str, coef: f64, is_reference: bool) -> OddsRatioRow {
    let or = coef.exp();
    OddsRatioRow {
        level: level.to_string(),
        coef,
        odds_ratio: or,
        abs_one_minus_or: (1.0 - or).abs(),
        is_reference,
        band: if or < 1.0 { DifficultyBand::Harder } else { DifficultyBand::Easier },
        marked: (1.0 - or).abs() > 0.5,
    }
}

pub fn odds_ratio_table(fit: &GlmmFit, sort: OrSort) -> Vec<OddsRatioRow> {
    let mut rows: Vec<OddsRatioRow> = fit
        .fixed_effects
        .iter()
        .map(|f| odds_ratio_row(&f.level, f.coef, f.is_reference))
        .collect();
    if sort == OrSort::AscendingOr {
        rows.sort_by(|a, b| a.odds_ratio.total_cmp(&b.odds_ratio));
    }
    rows
}
