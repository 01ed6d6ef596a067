use log::debug;
use serde::{Deserialize, Serialize};

use super::{PowerLawParams, SampleSet};
use crate::error::{Error, Result};
use crate::scalar::{lit, Scalar};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LmOptions {
    pub max_iterations: usize,
    pub lambda_init: f64,
    /// Damping multiplier after a rejected step.
    pub lambda_up: f64,
    /// Damping divisor after an accepted step.
    pub lambda_down: f64,
    /// Stop once an accepted step lowers the SSE by less than this fraction.
    pub rel_tol: f64,
    pub min_samples: usize,
}

impl Default for LmOptions {
    fn default() -> Self {
        LmOptions {
            max_iterations: 200,
            lambda_init: 1e-3,
            lambda_up: 10.0,
            lambda_down: 10.0,
            rel_tol: 1e-10,
            min_samples: 10,
        }
    }
}

impl LmOptions {
    pub fn validate(&self) -> Result<()> {
        let ok = self.max_iterations > 0
            && self.lambda_init > 0.0
            && self.lambda_up > 1.0
            && self.lambda_down > 1.0
            && self.rel_tol > 0.0
            && self.min_samples > 0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid LM options {self:?}")))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport<T = f64> {
    pub params: PowerLawParams<T>,
    pub iterations: usize,
    pub converged: bool,
    pub sse_initial: T,
    pub sse_final: T,
    pub n_samples: usize,
}

/// One LM iteration as seen by an observer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LmStep<T> {
    pub iteration: usize,
    pub accepted: bool,
    /// SSE before the attempted step.
    pub sse_before: T,
    /// SSE at the trial point (`inf` when the trial point was unusable).
    pub sse_trial: T,
    pub lambda: f64,
}

/// OLS of `ln y` on `ln T_adiab` and `ln t_comb` over the samples with
/// `y > 0`. A regressor without spread is dropped (exponent 0); with both
/// dropped `a` is the geometric mean of `y`.
pub fn log_ols_init<T: Scalar>(samples: &SampleSet<T>, min_samples: usize) -> Result<PowerLawParams<T>> {
    let mut u = Vec::new();
    let mut v = Vec::new();
    let mut z = Vec::new();
    for i in 0..samples.len() {
        let y = samples.y[i];
        if y > T::zero() {
            u.push(samples.t_adiab[i].ln());
            v.push(samples.t_comb[i].ln());
            z.push(y.ln());
        }
    }
    let n = z.len();
    if n < min_samples.max(1) {
        return Err(Error::Init(format!(
            "log-space init needs {min_samples} positive targets, found {n} of {}",
            samples.len()
        )));
    }
    let nf = T::of(n as f64);
    let mean = |xs: &[T]| xs.iter().copied().sum::<T>() / nf;
    let (mu, mv, mz) = (mean(&u), mean(&v), mean(&z));
    let (mut suu, mut svv, mut suv, mut suz, mut svz) = (T::zero(), T::zero(), T::zero(), T::zero(), T::zero());
    for i in 0..n {
        let (du, dv, dz) = (u[i] - mu, v[i] - mv, z[i] - mz);
        suu += du * du;
        svv += dv * dv;
        suv += du * dv;
        suz += du * dz;
        svz += dv * dz;
    }
    let spread = |s: T, m: T| {
        let floor = T::epsilon() * (m.abs() + T::one()) * lit(10.0);
        s > nf * floor * floor
    };
    let (vary_u, vary_v) = (spread(suu, mu), spread(svv, mv));
    let (b, c) = match (vary_u, vary_v) {
        (true, true) => {
            let det = suu * svv - suv * suv;
            if det > lit::<T>(1e-10) * suu * svv {
                ((svv * suz - suv * svz) / det, (suu * svz - suv * suz) / det)
            } else {
                debug!("log-space design is collinear; dropping t_comb");
                (suz / suu, T::zero())
            }
        }
        (true, false) => (suz / suu, T::zero()),
        (false, true) => (T::zero(), svz / svv),
        (false, false) => (T::zero(), T::zero()),
    };
    let a = (mz - b * mu - c * mv).exp();
    if !(a > T::zero() && a.is_finite() && b.is_finite() && c.is_finite()) {
        return Err(Error::Init(format!("log-space init produced a={a} b={b} c={c}")));
    }
    Ok(PowerLawParams::new(a, b, c, samples.delta))
}

#[inline]
fn jacobian_from_logs<T: Scalar>(p: &[T; 3], ln_t: T, ln_c: T) -> (T, [T; 3]) {
    let g = (p[1] * ln_t + p[2] * ln_c).exp();
    let f = p[0] * g;
    (f, [g, f * ln_t, f * ln_c])
}

/// Analytic partial derivatives of `a · T^b · t^c` with respect to
/// `(a, b, c)`; the same expressions drive the LM normal equations.
pub fn power_law_jacobian<T: Scalar>(params: &PowerLawParams<T>, t_adiab: T, t_comb: T) -> [T; 3] {
    jacobian_from_logs(&[params.a, params.b, params.c], t_adiab.ln(), t_comb.ln()).1
}

/// Least-squares problem on centered logs: the amplitude is carried as
/// `a · exp(b·mean ln T + c·mean ln t)`, which removes most of the
/// correlation between `a` and the exponents.
struct Problem<T> {
    ln_t: Vec<T>,
    ln_c: Vec<T>,
    mean_t: T,
    mean_c: T,
    y: Vec<T>,
}

impl<T: Scalar> Problem<T> {
    fn new(samples: &SampleSet<T>) -> Self {
        let n: T = lit(samples.len().max(1) as f64);
        let ln_t: Vec<T> = samples.t_adiab.iter().map(|v| v.ln()).collect();
        let ln_c: Vec<T> = samples.t_comb.iter().map(|v| v.ln()).collect();
        let mean_t = ln_t.iter().copied().sum::<T>() / n;
        let mean_c = ln_c.iter().copied().sum::<T>() / n;
        let (mean_t, mean_c) = if mean_t.is_finite() && mean_c.is_finite() {
            (mean_t, mean_c)
        } else {
            (T::zero(), T::zero())
        };
        Problem {
            ln_t: ln_t.iter().map(|&v| v - mean_t).collect(),
            ln_c: ln_c.iter().map(|&v| v - mean_c).collect(),
            mean_t,
            mean_c,
            y: samples.y.clone(),
        }
    }

    fn to_internal(&self, p: &PowerLawParams<T>) -> [T; 3] {
        [p.a * (p.b * self.mean_t + p.c * self.mean_c).exp(), p.b, p.c]
    }

    fn to_external(&self, p: &[T; 3]) -> [T; 3] {
        [p[0] * (-(p[1] * self.mean_t + p[2] * self.mean_c)).exp(), p[1], p[2]]
    }

    #[inline]
    fn model(&self, i: usize, p: &[T; 3]) -> T {
        p[0] * (p[1] * self.ln_t[i] + p[2] * self.ln_c[i]).exp()
    }

    /// SSE, or the index of the first non-finite residual.
    fn sse(&self, p: &[T; 3]) -> std::result::Result<T, usize> {
        let mut s = T::zero();
        for i in 0..self.y.len() {
            let r = self.y[i] - self.model(i, p);
            if !r.is_finite() {
                return Err(i);
            }
            s += r * r;
        }
        Ok(s)
    }

    /// Normal equations `JᵀJ` and `Jᵀr` with `J = ∂f/∂(a, b, c)`.
    #[allow(clippy::needless_range_loop)]
    fn normal_equations(&self, p: &[T; 3]) -> ([[T; 3]; 3], [T; 3]) {
        let mut jtj = [[T::zero(); 3]; 3];
        let mut jtr = [T::zero(); 3];
        for i in 0..self.y.len() {
            let (f, row) = jacobian_from_logs(p, self.ln_t[i], self.ln_c[i]);
            let r = self.y[i] - f;
            for a in 0..3 {
                jtr[a] += row[a] * r;
                for b in a..3 {
                    jtj[a][b] += row[a] * row[b];
                }
            }
        }
        for a in 0..3 {
            for b in 0..a {
                jtj[a][b] = jtj[b][a];
            }
        }
        (jtj, jtr)
    }
}

/// Gaussian elimination with partial pivoting on a 3×3 system.
#[allow(clippy::needless_range_loop)]
fn solve3<T: Scalar>(mut m: [[T; 3]; 3], mut rhs: [T; 3]) -> Option<[T; 3]> {
    for col in 0..3 {
        let pivot = (col..3).max_by(|&i, &j| {
            m[i][col]
                .abs()
                .partial_cmp(&m[j][col].abs())
                .unwrap_or(std::cmp::Ordering::Equal)
        })?;
        if !(m[pivot][col].abs() > T::zero()) {
            return None;
        }
        m.swap(col, pivot);
        rhs.swap(col, pivot);
        for row in col + 1..3 {
            let factor = m[row][col] / m[col][col];
            for k in col..3 {
                let sub = factor * m[col][k];
                m[row][k] -= sub;
            }
            let sub = factor * rhs[col];
            rhs[row] -= sub;
        }
    }
    let mut x = [T::zero(); 3];
    for row in (0..3).rev() {
        let mut acc = rhs[row];
        for k in row + 1..3 {
            acc -= m[row][k] * x[k];
        }
        x[row] = acc / m[row][row];
    }
    x.iter().all(|v| v.is_finite()).then_some(x)
}

pub fn fit_lm<T: Scalar>(samples: &SampleSet<T>, init: &PowerLawParams<T>, opts: &LmOptions) -> Result<FitReport<T>> {
    fit_lm_observed(samples, init, opts, |_| {})
}

/// Levenberg–Marquardt with Marquardt's diagonal scaling. `observer` sees
/// every iteration, accepted or not.
pub fn fit_lm_observed<T: Scalar, F: FnMut(&LmStep<T>)>(
    samples: &SampleSet<T>,
    init: &PowerLawParams<T>,
    opts: &LmOptions,
    mut observer: F,
) -> Result<FitReport<T>> {
    opts.validate()?;
    if samples.len() < opts.min_samples {
        return Err(Error::Fit(format!(
            "need at least {} samples, got {}",
            opts.min_samples,
            samples.len()
        )));
    }
    if !(init.a > T::zero()) || !init.a.is_finite() || !init.b.is_finite() || !init.c.is_finite() {
        return Err(Error::Fit(format!("invalid initial parameters {init}")));
    }
    let problem = Problem::new(samples);
    let mut p = problem.to_internal(init);
    let sse_initial = problem.sse(&p).map_err(|index| Error::NonFiniteResidual { index })?;
    let mut sse = sse_initial;
    let mut lambda = opts.lambda_init;
    let mut converged = sse == T::zero();
    let mut iterations = 0;
    let mut moved = false;
    let step_floor: T = T::epsilon() * lit(4.0);

    while !converged && iterations < opts.max_iterations {
        iterations += 1;
        let (jtj, jtr) = problem.normal_equations(&p);
        let max_diag = jtj[0][0].max(jtj[1][1]).max(jtj[2][2]);
        let mut damped = jtj;
        for d in 0..3 {
            let scale = if jtj[d][d] > max_diag * lit(1e-15) {
                jtj[d][d]
            } else {
                max_diag.max(T::one()) * lit(1e-15)
            };
            damped[d][d] += lit::<T>(lambda) * scale;
        }

        let mut trial_sse = T::infinity();
        let mut candidate = p;
        if let Some(mut step) = solve3(damped, jtr) {
            let rel_step = (0..3)
                .map(|i| step[i].abs() / (p[i].abs() + lit(1e-12)))
                .fold(T::zero(), T::max);
            if rel_step <= step_floor {
                observer(&LmStep {
                    iteration: iterations,
                    accepted: false,
                    sse_before: sse,
                    sse_trial: sse,
                    lambda,
                });
                converged = true;
                break;
            }
            let mut halvings = 0;
            while p[0] + step[0] <= T::zero() && halvings < 60 {
                for s in step.iter_mut() {
                    *s *= lit(0.5);
                }
                halvings += 1;
            }
            if p[0] + step[0] > T::zero() {
                candidate = [p[0] + step[0], p[1] + step[1], p[2] + step[2]];
                trial_sse = problem.sse(&candidate).unwrap_or(T::infinity());
            }
        }

        let accepted = trial_sse < sse;
        observer(&LmStep {
            iteration: iterations,
            accepted,
            sse_before: sse,
            sse_trial: trial_sse,
            lambda,
        });
        if accepted {
            moved = true;
            let decrease = (sse - trial_sse) / sse;
            p = candidate;
            sse = trial_sse;
            lambda = (lambda / opts.lambda_down).max(1e-300);
            if sse == T::zero() || decrease < lit(opts.rel_tol) {
                converged = true;
            }
        } else {
            lambda *= opts.lambda_up;
            if lambda > 1e30 {
                debug!("LM damping exploded at sse={sse}; treating point as stationary");
                converged = true;
            }
        }
    }

    // Report SSE in the caller's parameterization so it is reproducible
    // with `SampleSet::sse`.
    let sse_initial = samples.sse(init);
    let mut params = init.clone();
    let mut sse_final = sse_initial;
    if moved {
        let [a, b, c] = problem.to_external(&p);
        let candidate = PowerLawParams::new(a, b, c, init.delta);
        let candidate_sse = samples.sse(&candidate);
        if candidate_sse <= sse_initial {
            params = candidate;
            sse_final = candidate_sse;
        }
    }
    Ok(FitReport {
        params,
        iterations,
        converged,
        sse_initial,
        sse_final,
        n_samples: samples.len(),
    })
}

/// Asymptotic covariance `s² (JᵀJ)⁻¹` of `(a, b, c)` at `params`, with
/// `s² = SSE / (n − 3)`.
pub fn parameter_covariance<T: Scalar>(samples: &SampleSet<T>, params: &PowerLawParams<T>) -> Option<[[T; 3]; 3]> {
    if samples.len() <= 3 {
        return None;
    }
    let problem = Problem::new(samples);
    let p = [params.a, params.b, params.c];
    let (jtj, _) = problem.normal_equations(&p);
    let s2 = problem.sse(&p).ok()? / T::of((samples.len() - 3) as f64);
    let mut cov = [[T::zero(); 3]; 3];
    for col in 0..3 {
        let mut e = [T::zero(); 3];
        e[col] = T::one();
        let x = solve3(jtj, e)?;
        for row in 0..3 {
            cov[row][col] = x[row] * s2;
        }
    }
    Some(cov)
}
