//! Equicoordinate multivariate normal probabilities and quantiles.
//!
//! Probabilities are integrated with the separation-of-variables transform:
//! the correlation matrix is Cholesky-factored with variables reordered so
//! that the narrowest expected conditional interval comes first, and the
//! resulting unit-cube integrand is averaged over a randomly shifted rank-1
//! (Richtmyer) lattice with tent periodization and antithetic points. The
//! spread across independent shifts gives the error estimate.
//!
//! Rank-deficient matrices are factored only up to their numerical rank;
//! coordinates that are linear in earlier ones become extra limits. When at
//! most two integration steps remain after the first variable (and the last
//! two carry no extra limits) the integral over the first variable is done by
//! adaptive Gauss–Kronrod quadrature with exact bivariate normal rectangles.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::normal;
use crate::quad;
use statrs::function::erf::erfc_inv;
use std::f64::consts::SQRT_2;

/// Eigenvalue floor applied to near-singular correlation matrices.
pub const EIGEN_FLOOR: f64 = 1e-10;
const PSD_TOLERANCE: f64 = 1e-8;
/// Standardized limit values around which quadrature pieces are split.
const BREAK_LEVELS: [f64; 7] = [-5.0, -2.5, -1.0, 0.0, 1.0, 2.5, 5.0];
/// Quadrature error target relative to the requested tolerance.
const QUADRATURE_MARGIN: f64 = 1e-2;
const MAX_INTERVALS: usize = 200;

/// Residual variance below which a coordinate counts as a linear function of
/// those already integrated.
const RANK_TOLERANCE: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Tail {
    /// P(max Zₘ ≤ t).
    UpperMax,
    /// P(min Zₘ ≥ t).
    LowerMin,
    /// P(max |Zₘ| ≤ t).
    TwoSidedMaxAbs,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MvnOptions {
    /// Target absolute error of a probability.
    pub tol: f64,
    pub seed: u64,
    /// Lattice points per randomization.
    pub points: usize,
    pub randomizations: usize,
    /// The lattice is doubled until the error estimate meets `tol` or this cap is hit.
    pub max_points: usize,
}

impl Default for MvnOptions {
    fn default() -> Self {
        Self { tol: 1e-5, seed: 20240101, points: 8192, randomizations: 12, max_points: 1 << 15 }
    }
}

#[derive(Debug, Clone)]
pub struct MvnProblem {
    pub correlation: DMatrix<f64>,
    pub bound: f64,
    pub tail: Tail,
    pub options: MvnOptions,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MvnEstimate {
    pub probability: f64,
    /// Three standard errors across randomizations.
    pub error: f64,
    pub points: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Quantile {
    pub value: f64,
    pub probability: f64,
    pub error: f64,
}

pub fn mvn_prob(problem: &MvnProblem) -> Result<MvnEstimate> {
    MvnIntegrator::new(&problem.correlation, problem.options)?.probability(problem.bound, problem.tail)
}

pub fn equicoordinate_quantile(
    correlation: &DMatrix<f64>,
    level: f64,
    tail: Tail,
    options: MvnOptions,
) -> Result<Quantile> {
    MvnIntegrator::new(correlation, options)?.quantile(level, tail)
}

/// A validated correlation matrix ready for repeated equicoordinate integrals.
#[derive(Debug, Clone)]
pub struct MvnIntegrator {
    correlation: DMatrix<f64>,
    options: MvnOptions,
    generators: Vec<f64>,
    shifts: Vec<Vec<f64>>,
    pub warnings: Vec<String>,
}

impl MvnIntegrator {
    pub fn new(correlation: &DMatrix<f64>, options: MvnOptions) -> Result<Self> {
        if !(options.tol > 0.0) {
            return Err(Error::Argument(format!("tolerance must be positive, got {}", options.tol)));
        }
        if options.points == 0 || options.randomizations < 2 {
            return Err(Error::Argument("need at least one lattice point and two randomizations".into()));
        }
        let (correlation, warnings) = validate_correlation(correlation)?;
        let dims = correlation.nrows().saturating_sub(1);
        let generators = first_primes(dims).into_iter().map(|p| (p as f64).sqrt().fract()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
        let shifts = (0..options.randomizations).map(|_| (0..dims).map(|_| rng.random::<f64>()).collect()).collect();
        Ok(Self { correlation, options, generators, shifts, warnings })
    }

    pub fn dimension(&self) -> usize {
        self.correlation.nrows()
    }

    pub fn correlation(&self) -> &DMatrix<f64> {
        &self.correlation
    }

    pub fn probability(&self, bound: f64, tail: Tail) -> Result<MvnEstimate> {
        self.probability_to(bound, tail, self.options.tol)
    }

    fn probability_to(&self, bound: f64, tail: Tail, tol: f64) -> Result<MvnEstimate> {
        if bound.is_nan() {
            return Err(Error::Argument("bound is NaN".into()));
        }
        let m = self.dimension();
        let (lower, upper) = match tail {
            Tail::UpperMax => (f64::NEG_INFINITY, bound),
            Tail::LowerMin => (bound, f64::INFINITY),
            Tail::TwoSidedMaxAbs => {
                if bound <= 0.0 {
                    return Ok(MvnEstimate { probability: 0.0, error: 0.0, points: 0 });
                }
                (-bound, bound)
            }
        };
        if m == 1 {
            let p = (normal::cdf(upper) - normal::cdf(lower)).clamp(0.0, 1.0);
            return Ok(MvnEstimate { probability: p, error: 0.0, points: 0 });
        }
        let a = vec![lower; m];
        let b = vec![upper; m];
        let factor = Factor::new(&self.correlation, a, b);
        if factor.steps.len() == 1 {
            let p = factor.integrand(&[], &mut [0.0]);
            return Ok(MvnEstimate { probability: p, error: 0.0, points: 0 });
        }
        if let Some(estimate) = factor.quadrature(tol) {
            return Ok(estimate);
        }

        // The first n Richtmyer points are a prefix of the first 2n, so sums carry over.
        let mut sums = vec![0.0; self.shifts.len()];
        let mut done = 0;
        let mut points = self.options.points;
        loop {
            sums.par_iter_mut()
                .zip(&self.shifts)
                .for_each(|(sum, shift)| *sum += factor.lattice_sum(&self.generators, shift, done + 1, points + 1));
            done = points;
            let r = sums.len() as f64;
            let estimates: Vec<f64> = sums.iter().map(|s| s / points as f64).collect();
            let mean = estimates.iter().sum::<f64>() / r;
            let var = estimates.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (r - 1.0);
            let error = 3.0 * (var / r).sqrt();
            if error <= tol || points * 2 > self.options.max_points {
                return Ok(MvnEstimate { probability: mean.clamp(0.0, 1.0), error, points });
            }
            points *= 2;
        }
    }

    /// The c with probability(c, tail) = level.
    pub fn quantile(&self, level: f64, tail: Tail) -> Result<Quantile> {
        if !(level > 0.0 && level < 1.0) {
            return Err(Error::Argument(format!("level must lie in (0, 1), got {level}")));
        }
        if tail == Tail::LowerMin {
            // P(min Z ≥ c) = P(max Z ≤ −c) by symmetry.
            let q = self.quantile(level, Tail::UpperMax)?;
            return Ok(Quantile { value: -q.value, ..q });
        }
        let m = self.dimension() as f64;
        let (mut lo, mut hi) = match tail {
            Tail::UpperMax => (normal::quantile(level), normal::quantile(1.0 - (1.0 - level) / m)),
            _ => (normal::quantile(0.5 + level / 2.0), normal::quantile(1.0 - (1.0 - level) / (2.0 * m))),
        };
        let tol = self.options.tol;
        let rough = 64.0 * tol;
        let mut f_lo = self.probability_to(lo, tail, rough)?.probability - level;
        let mut f_hi = self.probability_to(hi, tail, rough)?.probability - level;
        // Bonferroni and single-component bounds bracket the root up to integration noise.
        let mut widen = 0;
        while f_lo > 0.0 || f_hi < 0.0 {
            widen += 1;
            if widen > 20 {
                return Err(Error::Search(format!("cannot bracket level {level}")));
            }
            if f_lo > 0.0 {
                lo -= 0.05;
                f_lo = self.probability_to(lo, tail, rough)?.probability - level;
            }
            if f_hi < 0.0 {
                hi += 0.05;
                f_hi = self.probability_to(hi, tail, rough)?.probability - level;
            }
        }
        if f_lo.abs() <= 2.0 * tol && f_lo.abs() <= f_hi.abs() {
            return self.finish(lo, tail);
        }
        if f_hi.abs() <= 2.0 * tol {
            return self.finish(hi, tail);
        }
        let mut side = 0i8;
        // Tolerance each bracket end was evaluated at.
        let (mut tol_lo, mut tol_hi) = (rough, rough);
        for iteration in 0..100 {
            // Far from the root a cruder probability is enough to move the bracket.
            let eval_tol = (f_lo.abs().min(f_hi.abs()) / 4.0).clamp(tol, rough);
            if eval_tol < tol_lo {
                f_lo = self.probability_to(lo, tail, eval_tol)?.probability - level;
                tol_lo = eval_tol;
            }
            if eval_tol < tol_hi {
                f_hi = self.probability_to(hi, tail, eval_tol)?.probability - level;
                tol_hi = eval_tol;
            }
            if f_lo > 0.0 || f_hi < 0.0 {
                // Refining moved the root onto the bracket end.
                let c = if f_lo > 0.0 { lo } else { hi };
                return self.finish(c, tail);
            }
            // Illinois-modified regula falsi, with a plain bisection every fourth step.
            let mut c = if iteration % 4 == 3 { 0.5 * (lo + hi) } else { (lo * f_hi - hi * f_lo) / (f_hi - f_lo) };
            if !(c > lo && c < hi) {
                c = 0.5 * (lo + hi);
            }
            let mut est = self.probability_to(c, tail, eval_tol)?;
            let mut f = est.probability - level;
            if f.abs() <= 2.0 * tol && eval_tol > tol {
                est = self.probability(c, tail)?;
                f = est.probability - level;
            }
            if f.abs() <= 2.0 * tol || hi - lo < 1e-12 {
                return Ok(Quantile { value: c, probability: est.probability, error: est.error });
            }
            if f < 0.0 {
                lo = c;
                f_lo = f;
                tol_lo = eval_tol;
                if side == -1 {
                    f_hi /= 2.0;
                }
                side = -1;
            } else {
                hi = c;
                f_hi = f;
                tol_hi = eval_tol;
                if side == 1 {
                    f_lo /= 2.0;
                }
                side = 1;
            }
        }
        Err(Error::Search(format!("no convergence for level {level}")))
    }

    fn finish(&self, c: f64, tail: Tail) -> Result<Quantile> {
        let est = self.probability(c, tail)?;
        Ok(Quantile { value: c, probability: est.probability, error: est.error })
    }
}

/// Checks the correlation contract and floors tiny eigenvalues.
fn validate_correlation(r: &DMatrix<f64>) -> Result<(DMatrix<f64>, Vec<String>)> {
    let m = r.nrows();
    if m == 0 {
        return Err(Error::Argument("empty correlation matrix".into()));
    }
    if r.ncols() != m {
        return Err(Error::Matrix(format!("{}x{} matrix is not square", m, r.ncols())));
    }
    if r.iter().any(|v| !v.is_finite()) {
        return Err(Error::Matrix("non-finite entry".into()));
    }
    for i in 0..m {
        if (r[(i, i)] - 1.0).abs() > 1e-8 {
            return Err(Error::Matrix(format!("diagonal entry {i} is {}", r[(i, i)])));
        }
        for j in 0..i {
            if (r[(i, j)] - r[(j, i)]).abs() > 1e-8 {
                return Err(Error::Matrix(format!("asymmetric at ({i}, {j})")));
            }
            if r[(i, j)].abs() > 1.0 + 1e-8 {
                return Err(Error::Matrix(format!("entry ({i}, {j}) outside [-1, 1]")));
            }
        }
    }
    let mut sym = (r + r.transpose()) * 0.5;
    for i in 0..m {
        sym[(i, i)] = 1.0;
    }
    let eig = sym.clone().symmetric_eigen();
    let min = eig.eigenvalues.min();
    if min < -PSD_TOLERANCE {
        return Err(Error::Matrix(format!("not positive semidefinite (eigenvalue {min:e})")));
    }
    let mut warnings = Vec::new();
    if min < EIGEN_FLOOR {
        let values = eig.eigenvalues.map(|v| v.max(EIGEN_FLOOR));
        let mut clipped = &eig.eigenvectors * DMatrix::from_diagonal(&values) * eig.eigenvectors.transpose();
        let d: Vec<f64> = (0..m).map(|i| clipped[(i, i)].sqrt()).collect();
        for i in 0..m {
            for j in 0..m {
                clipped[(i, j)] /= d[i] * d[j];
            }
        }
        sym = (&clipped + clipped.transpose()) * 0.5;
        for i in 0..m {
            sym[(i, i)] = 1.0;
        }
        warnings.push(format!("near-singular correlation matrix (eigenvalue {min:e}) floored at {EIGEN_FLOOR:e}"));
    }
    Ok((sym, warnings))
}

/// One integration variable: a row of the pivoted Cholesky factor with its
/// limits, plus the rows that depend linearly on it and earlier variables.
struct Step {
    coefficients: Vec<f64>,
    a: f64,
    b: f64,
    dependent: Vec<(Vec<f64>, f64, f64)>,
}

impl Step {
    /// Standardized interval for this variable given the earlier ones.
    fn interval(&self, y: &[f64]) -> (f64, f64) {
        let j = self.coefficients.len() - 1;
        let cond: f64 = self.coefficients[..j].iter().zip(y).map(|(c, v)| c * v).sum();
        let diag = self.coefficients[j];
        let (mut lo, mut hi) = ((self.a - cond) / diag, (self.b - cond) / diag);
        for (row, a, b) in &self.dependent {
            let cond: f64 = row[..j].iter().zip(y).map(|(c, v)| c * v).sum();
            let c = row[j];
            let (l, h) = if c > 0.0 { ((a - cond) / c, (b - cond) / c) } else { ((b - cond) / c, (a - cond) / c) };
            lo = lo.max(l);
            hi = hi.min(h);
        }
        (lo, hi)
    }
}

impl Step {
    /// Finite limits of this step, standardized by `scale` (the diagonal for
    /// a single-variable step), as lines α + β·y₀ in the first variable.
    fn limit_lines(&self, scale: f64) -> Vec<(f64, f64)> {
        let j = self.coefficients.len() - 1;
        let diag = if j == 1 { self.coefficients[1] } else { scale };
        let mut rows = vec![(self.coefficients[0], diag, self.a, self.b)];
        rows.extend(self.dependent.iter().map(|(row, a, b)| (row[0], row[j], *a, *b)));
        let mut lines = Vec::new();
        for (c0, c, a, b) in rows {
            for v in [a, b] {
                if v.is_finite() && c != 0.0 {
                    lines.push((v / c, -c0 / c));
                }
            }
        }
        lines
    }
}

/// P(l₁ < X < u₁, l₂ < Y < u₂) for standard normals with correlation `rho`.
fn rectangle(l1: f64, u1: f64, l2: f64, u2: f64, rho: f64) -> f64 {
    if l1 >= u1 || l2 >= u2 {
        return 0.0;
    }
    let p = upper_orthant(l1, l2, rho) - upper_orthant(u1, l2, rho) - upper_orthant(l1, u2, rho)
        + upper_orthant(u1, u2, rho);
    p.max(0.0)
}

/// P(X > x, Y > y).
fn upper_orthant(x: f64, y: f64, rho: f64) -> f64 {
    if x == f64::INFINITY || y == f64::INFINITY {
        0.0
    } else if x == f64::NEG_INFINITY {
        normal::sf(y)
    } else if y == f64::NEG_INFINITY {
        normal::sf(x)
    } else {
        owens_t::biv_norm(x, y, rho.clamp(-1.0, 1.0))
    }
}

/// Separation-of-variables factorization of a possibly singular correlation.
///
/// Variables are pivoted so that the narrowest expected conditional interval
/// comes first; rows whose residual variance vanishes become extra limits on
/// the variable being integrated, so only the numerical rank is integrated.
struct Factor {
    steps: Vec<Step>,
}

impl Factor {
    fn new(sigma: &DMatrix<f64>, a: Vec<f64>, b: Vec<f64>) -> Self {
        let m = sigma.nrows();
        // Row i of the factor, built one column at a time.
        let mut rows: Vec<Vec<f64>> = vec![Vec::with_capacity(m); m];
        let mut remaining: Vec<usize> = (0..m).collect();
        let mut y: Vec<f64> = Vec::new();
        let mut steps: Vec<Step> = Vec::new();
        let residual = |rows: &[Vec<f64>], i: usize| sigma[(i, i)] - rows[i].iter().map(|c| c * c).sum::<f64>();
        while !remaining.is_empty() {
            let j = steps.len();
            let mut best = 0;
            let mut best_width = f64::INFINITY;
            for (pos, &i) in remaining.iter().enumerate() {
                let cond: f64 = rows[i].iter().zip(&y).map(|(c, v)| c * v).sum();
                let sd = residual(&rows, i).max(0.0).sqrt();
                let width = normal::cdf((b[i] - cond) / sd) - normal::cdf((a[i] - cond) / sd);
                if width < best_width {
                    best_width = width;
                    best = pos;
                }
            }
            let pivot = remaining.swap_remove(best);
            let diag = residual(&rows, pivot).max(0.0).sqrt();
            rows[pivot].push(diag);
            for &i in &remaining {
                let off = sigma[(i, pivot)] - rows[i].iter().zip(&rows[pivot]).map(|(c, d)| c * d).sum::<f64>();
                rows[i].push(off / diag);
            }
            let (dependent, independent): (Vec<usize>, Vec<usize>) =
                remaining.iter().partition(|&&i| residual(&rows, i) < RANK_TOLERANCE);
            remaining = independent;
            let step = Step {
                coefficients: rows[pivot].clone(),
                a: a[pivot],
                b: b[pivot],
                dependent: dependent.iter().map(|&i| (rows[i].clone(), a[i], b[i])).collect(),
            };
            let (lo, hi) = step.interval(&y);
            let width = normal::cdf(hi) - normal::cdf(lo);
            y.push(if width > 1e-300 {
                (normal::pdf(lo) - normal::pdf(hi)) / width
            } else if lo.is_finite() && hi.is_finite() {
                0.5 * (lo + hi)
            } else if lo.is_finite() {
                lo
            } else {
                hi
            });
            debug_assert_eq!(step.coefficients.len(), j + 1);
            steps.push(step);
        }
        Self { steps }
    }

    fn integrand(&self, w: &[f64], y: &mut [f64]) -> f64 {
        let mut f = 1.0;
        for (j, step) in self.steps.iter().enumerate() {
            let (lo, hi) = step.interval(&y[..j]);
            let d = if lo == f64::NEG_INFINITY { 0.0 } else { normal::cdf(lo) };
            let e = if hi == f64::INFINITY { 1.0 } else { normal::cdf(hi) };
            if e <= d {
                return 0.0;
            }
            f *= e - d;
            if j + 1 < self.steps.len() {
                let u = (d + w[j] * (e - d)).clamp(1e-300, 1.0 - 1e-16);
                y[j] = -SQRT_2 * erfc_inv(2.0 * u);
            }
        }
        f
    }

    /// Deterministic integral over the first variable when the rest is
    /// available in closed form: one remaining step, or two remaining steps
    /// without dependent rows (a bivariate normal rectangle).
    fn quadrature(&self, tol: f64) -> Option<MvnEstimate> {
        let (lo, hi) = self.steps[0].interval(&[]);
        if lo >= hi {
            return Some(MvnEstimate { probability: 0.0, error: 0.0, points: 0 });
        }
        let lines = match self.steps.len() {
            2 => self.steps[1].limit_lines(1.0),
            3 if self.steps[1].dependent.is_empty() && self.steps[2].dependent.is_empty() => {
                let c = &self.steps[2].coefficients;
                let mut lines = self.steps[1].limit_lines(1.0);
                lines.extend(self.steps[2].limit_lines(c[1].hypot(c[2])));
                lines
            }
            _ => return None,
        };
        let inner = |y0: f64| match self.steps.len() {
            2 => {
                let (l, h) = self.steps[1].interval(&[y0]);
                if l < h {
                    normal::cdf(h) - normal::cdf(l)
                } else {
                    0.0
                }
            }
            _ => {
                let (l1, u1) = self.steps[1].interval(&[y0]);
                let c = &self.steps[2].coefficients;
                let s2 = c[1].hypot(c[2]);
                let cond = c[0] * y0;
                let (l2, u2) = ((self.steps[2].a - cond) / s2, (self.steps[2].b - cond) / s2);
                rectangle(l1, u1, l2, u2, c[1] / s2)
            }
        };

        // Kinks and steep transitions sit where a standardized limit crosses
        // another or passes near zero; integrate piecewise between them.
        let mut cuts: Vec<f64> = Vec::new();
        for (i, &(alpha, beta)) in lines.iter().enumerate() {
            if beta != 0.0 {
                cuts.extend(BREAK_LEVELS.iter().map(|k| (k - alpha) / beta));
            }
            for &(alpha2, beta2) in &lines[..i] {
                if beta != beta2 {
                    cuts.push((alpha2 - alpha) / (beta - beta2));
                }
            }
        }
        let mut knots: Vec<f64> = vec![normal::cdf(lo), normal::cdf(hi)];
        knots.extend(cuts.iter().filter(|y| **y > lo && **y < hi).map(|&y| normal::cdf(y)));
        knots.sort_by(f64::total_cmp);
        knots.dedup_by(|x, y| (*x - *y).abs() < 1e-15);

        let pieces = (knots.len() - 1).max(1) as f64;
        let target = tol * QUADRATURE_MARGIN / pieces;
        let mut total = MvnEstimate { probability: 0.0, error: 0.0, points: 0 };
        for pair in knots.windows(2) {
            let r = quad::integrate(
                |u: f64| inner(-SQRT_2 * erfc_inv(2.0 * u.clamp(1e-300, 1.0 - 1e-16))),
                pair[0],
                pair[1],
                target,
                MAX_INTERVALS,
            );
            total.probability += r.value;
            total.error += r.error;
            total.points += r.evaluations;
        }
        total.probability = total.probability.clamp(0.0, 1.0);
        Some(total)
    }

    /// Sum of the antithetic integrand over lattice points `from..to`.
    fn lattice_sum(&self, generators: &[f64], shift: &[f64], from: usize, to: usize) -> f64 {
        let dims = self.steps.len() - 1;
        let mut w = vec![0.0; dims];
        let mut w_anti = vec![0.0; dims];
        let mut y = vec![0.0; dims + 1];
        let mut total = 0.0;
        for k in from..to {
            for j in 0..dims {
                let x = (k as f64 * generators[j] + shift[j]).fract();
                let tent = (2.0 * x - 1.0).abs();
                w[j] = tent;
                w_anti[j] = 1.0 - tent;
            }
            total += 0.5 * (self.integrand(&w, &mut y) + self.integrand(&w_anti, &mut y));
        }
        total
    }
}

fn first_primes(n: usize) -> Vec<u64> {
    let mut primes = Vec::with_capacity(n);
    let mut candidate = 2u64;
    while primes.len() < n {
        if primes.iter().take_while(|&&p| p * p <= candidate).all(|&p| !candidate.is_multiple_of(p)) {
            primes.push(candidate);
        }
        candidate += 1;
    }
    primes
}
