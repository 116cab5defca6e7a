//! Classical survival estimators and scoring rules.
//!
//! Observations are `(z, delta)` pairs: observed time and whether the event
//! (a fill) was seen (`true`) or the observation was censored (`false`).

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Floor applied before taking logs in the log-likelihood.
pub const LOG_FLOOR: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SurvivalError {
    #[error("no observations")]
    Empty,
    #[error("sample {index}: {what} = {value} is not positive")]
    NonPositive { index: usize, what: &'static str, value: f64 },
    #[error("no comparable pairs")]
    NoComparablePairs,
    #[error("censoring survival is zero at z = {0}")]
    ZeroCensoringWeight(f64),
    #[error("Cox fit needs at least two observations and one event")]
    TooFewEvents,
    #[error("Cox fit did not converge after {iterations} iterations (gradient norm {grad_norm:e})")]
    NotConverged { iterations: usize, grad_norm: f64 },
    #[error("covariate rows have inconsistent lengths")]
    Shape,
    #[error("acceleration factor must be positive, got {0}")]
    NonPositiveAcceleration(f64),
}

/// A conditional survival distribution with a density.
pub trait ConditionalSurvival<X: ?Sized> {
    /// `S(t | x)`.
    fn survival(&self, t: f64, x: &X) -> f64;
    /// `f(t | x) = -dS/dt`.
    fn density(&self, t: f64, x: &X) -> f64;
}

/// Neumaier compensated sum.
#[derive(Debug, Default, Clone, Copy)]
pub struct CompensatedSum {
    sum: f64,
    comp: f64,
}

impl CompensatedSum {
    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

/// One log-likelihood term: `log f` for an event, `log S` for a censored
/// observation. Non-positive or non-finite inputs are errors; positive
/// values are floored at [`LOG_FLOOR`].
pub fn rcll_term(delta: bool, survival: f64, density: f64, index: usize) -> Result<f64, SurvivalError> {
    let (what, v) = if delta { ("density", density) } else { ("survival", survival) };
    if !(v > 0.0 && v.is_finite()) {
        return Err(SurvivalError::NonPositive { index, what, value: v });
    }
    Ok(v.max(LOG_FLOOR).ln())
}

/// Mean right-censored log-likelihood from per-sample survival and density
/// values at the observed times.
pub fn rcll_from_values(deltas: &[bool], survival: &[f64], density: &[f64]) -> Result<f64, SurvivalError> {
    if deltas.is_empty() {
        return Err(SurvivalError::Empty);
    }
    let mut acc = CompensatedSum::default();
    for i in 0..deltas.len() {
        acc.add(rcll_term(deltas[i], survival[i], density[i], i)?);
    }
    Ok(acc.value() / deltas.len() as f64)
}

/// Mean right-censored log-likelihood of `model` on `samples` with
/// covariates `xs`. Tables report its negative.
pub fn rcll<X, M: ConditionalSurvival<X> + ?Sized>(
    model: &M,
    samples: &[(f64, bool)],
    xs: &[X],
) -> Result<f64, SurvivalError> {
    if samples.is_empty() {
        return Err(SurvivalError::Empty);
    }
    let mut acc = CompensatedSum::default();
    for (i, ((z, d), x)) in samples.iter().zip(xs).enumerate() {
        let (s, f) = if *d {
            (f64::NAN, model.density(*z, x))
        } else {
            (model.survival(*z, x), f64::NAN)
        };
        acc.add(rcll_term(*d, s, f, i)?);
    }
    Ok(acc.value() / samples.len() as f64)
}

/// Product-limit survival curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KaplanMeier {
    /// Distinct event times, increasing.
    pub times: Vec<f64>,
    pub events: Vec<usize>,
    pub at_risk: Vec<usize>,
    /// Survival just after each event time.
    pub survival: Vec<f64>,
}

impl KaplanMeier {
    pub fn fit(samples: &[(f64, bool)]) -> KaplanMeier {
        let mut sorted: Vec<(f64, bool)> = samples.to_vec();
        sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
        let n = sorted.len();
        let mut km = KaplanMeier {
            times: Vec::new(),
            events: Vec::new(),
            at_risk: Vec::new(),
            survival: Vec::new(),
        };
        let mut s = 1.0;
        let mut censored_before = false;
        let mut i = 0;
        while i < n {
            let t = sorted[i].0;
            let mut j = i;
            let mut k = 0;
            while j < n && sorted[j].0 == t {
                k += sorted[j].1 as usize;
                j += 1;
            }
            if k > 0 {
                let at_risk = n - i;
                // Until the first censoring the product telescopes to a
                // plain ratio; computing it directly keeps it exact.
                s = if censored_before {
                    s * (1.0 - k as f64 / at_risk as f64)
                } else {
                    (at_risk - k) as f64 / n as f64
                };
                km.times.push(t);
                km.events.push(k);
                km.at_risk.push(at_risk);
                km.survival.push(s);
            }
            censored_before |= j - i > k;
            i = j;
        }
        km
    }

    /// Curve of the censoring distribution (roles of event and censoring
    /// swapped).
    pub fn censoring(samples: &[(f64, bool)]) -> KaplanMeier {
        let flipped: Vec<(f64, bool)> = samples.iter().map(|(z, d)| (*z, !d)).collect();
        KaplanMeier::fit(&flipped)
    }

    /// `S(t)`, right-continuous.
    pub fn at(&self, t: f64) -> f64 {
        let k = self.times.partition_point(|x| *x <= t);
        if k == 0 {
            1.0
        } else {
            self.survival[k - 1]
        }
    }

    /// `S(t-)`, the value just before `t`.
    pub fn before(&self, t: f64) -> f64 {
        let k = self.times.partition_point(|x| *x < t);
        if k == 0 {
            1.0
        } else {
            self.survival[k - 1]
        }
    }
}

/// Time-dependent concordance: over pairs with `i` an event and
/// `z_i < z_j`, the share where `S(z_i | x_i) < S(z_i | x_j)`.
pub fn c_td<X, M: ConditionalSurvival<X> + ?Sized>(
    model: &M,
    samples: &[(f64, bool)],
    xs: &[X],
) -> Result<f64, SurvivalError> {
    let mut comparable = 0u64;
    let mut concordant = 0u64;
    for (i, (zi, di)) in samples.iter().enumerate() {
        if !di {
            continue;
        }
        let mut own: Option<f64> = None;
        for (j, (zj, _)) in samples.iter().enumerate() {
            if i == j || !(zi < zj) {
                continue;
            }
            let si = *own.get_or_insert_with(|| model.survival(*zi, &xs[i]));
            comparable += 1;
            if si < model.survival(*zi, &xs[j]) {
                concordant += 1;
            }
        }
    }
    if comparable == 0 {
        return Err(SurvivalError::NoComparablePairs);
    }
    Ok(concordant as f64 / comparable as f64)
}

/// Censored Brier score at horizon `t`, inverse-weighted by the censoring
/// curve `g` evaluated just before each observed time.
pub fn brier<X, M: ConditionalSurvival<X> + ?Sized>(
    model: &M,
    samples: &[(f64, bool)],
    xs: &[X],
    t: f64,
    g: &KaplanMeier,
) -> Result<f64, SurvivalError> {
    if samples.is_empty() {
        return Err(SurvivalError::Empty);
    }
    let mut acc = CompensatedSum::default();
    for ((z, d), x) in samples.iter().zip(xs) {
        let event_before = *z <= t && *d;
        let still_open = *z > t;
        if !event_before && !still_open {
            continue;
        }
        let w = g.before(*z);
        if w <= 0.0 {
            return Err(SurvivalError::ZeroCensoringWeight(*z));
        }
        let s = model.survival(t, x);
        acc.add(if event_before { s * s / w } else { (1.0 - s).powi(2) / w });
    }
    Ok(acc.value() / samples.len() as f64)
}

/// Accelerated failure time hazard `phi * h0(phi * t)`.
pub fn aft_hazard(t: f64, phi: f64, h0: impl Fn(f64) -> f64) -> Result<f64, SurvivalError> {
    if !(phi > 0.0) {
        return Err(SurvivalError::NonPositiveAcceleration(phi));
    }
    Ok(phi * h0(phi * t))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoxOptions {
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for CoxOptions {
    fn default() -> Self {
        CoxOptions { max_iter: 50, tol: 1e-9 }
    }
}

/// Proportional hazards model with a Breslow baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoxModel {
    pub beta: Vec<f64>,
    /// Distinct event times.
    pub times: Vec<f64>,
    /// Cumulative baseline hazard at each event time.
    pub cumulative_hazard: Vec<f64>,
    /// Baseline hazard increments at each event time.
    pub increments: Vec<f64>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Log partial likelihood with Breslow ties, its gradient and Hessian.
fn cox_derivatives(beta: &[f64], samples: &[(f64, bool)], xs: &[Vec<f64>]) -> (f64, DVector<f64>, DMatrix<f64>) {
    let p = beta.len();
    let mut order: Vec<usize> = (0..samples.len()).collect();
    // decreasing time so risk sets accumulate
    order.sort_by(|a, b| samples[*b].0.total_cmp(&samples[*a].0));
    let mut ll = 0.0;
    let mut grad = DVector::zeros(p);
    let mut hess = DMatrix::zeros(p, p);
    let mut s0 = 0.0;
    let mut s1 = DVector::<f64>::zeros(p);
    let mut s2 = DMatrix::<f64>::zeros(p, p);
    let mut i = 0;
    while i < order.len() {
        let t = samples[order[i]].0;
        let mut j = i;
        while j < order.len() && samples[order[j]].0 == t {
            let k = order[j];
            let x = DVector::from_column_slice(&xs[k]);
            let w = dot(beta, &xs[k]).exp();
            s0 += w;
            s1 += &x * w;
            s2 += &x * x.transpose() * w;
            j += 1;
        }
        for &k in &order[i..j] {
            if samples[k].1 {
                let x = DVector::from_column_slice(&xs[k]);
                ll += dot(beta, &xs[k]) - s0.ln();
                let mean = &s1 / s0;
                grad += x - &mean;
                hess -= &s2 / s0 - &mean * mean.transpose();
            }
        }
        i = j;
    }
    (ll, grad, hess)
}

/// Breslow-tie log partial likelihood at `beta`.
pub fn cox_log_partial_likelihood(beta: &[f64], samples: &[(f64, bool)], xs: &[Vec<f64>]) -> f64 {
    cox_derivatives(beta, samples, xs).0
}

/// Maximise the partial likelihood by damped Newton steps.
pub fn cox_fit(samples: &[(f64, bool)], xs: &[Vec<f64>], opts: CoxOptions) -> Result<CoxModel, SurvivalError> {
    if samples.len() < 2 || !samples.iter().any(|s| s.1) {
        return Err(SurvivalError::TooFewEvents);
    }
    let p = xs.first().map_or(0, |x| x.len());
    if xs.len() != samples.len() || xs.iter().any(|x| x.len() != p) {
        return Err(SurvivalError::Shape);
    }
    let mut beta = vec![0.0; p];
    let (mut ll, mut grad, mut hess) = cox_derivatives(&beta, samples, xs);
    let mut iterations = 0;
    while grad.norm() > opts.tol {
        if iterations == opts.max_iter {
            return Err(SurvivalError::NotConverged {
                iterations,
                grad_norm: grad.norm(),
            });
        }
        iterations += 1;
        let neg = -hess.clone();
        let step = match neg.clone().cholesky() {
            Some(ch) => ch.solve(&grad),
            None => match neg.lu().solve(&grad) {
                Some(s) => s,
                None => grad.clone(),
            },
        };
        let mut scale = 1.0;
        loop {
            let cand: Vec<f64> = beta.iter().zip(step.iter()).map(|(b, s)| b + scale * s).collect();
            let (cll, cg, ch) = cox_derivatives(&cand, samples, xs);
            if cll.is_finite() && cll >= ll - 1e-12 {
                beta = cand;
                ll = cll;
                grad = cg;
                hess = ch;
                break;
            }
            scale /= 2.0;
            if scale < 1e-10 {
                return Err(SurvivalError::NotConverged {
                    iterations,
                    grad_norm: grad.norm(),
                });
            }
        }
    }
    Ok(breslow_baseline(beta, samples, xs))
}

fn breslow_baseline(beta: Vec<f64>, samples: &[(f64, bool)], xs: &[Vec<f64>]) -> CoxModel {
    let mut times: Vec<f64> = samples.iter().filter(|s| s.1).map(|s| s.0).collect();
    times.sort_by(f64::total_cmp);
    times.dedup();
    let risk: Vec<f64> = xs.iter().map(|x| dot(&beta, x).exp()).collect();
    let mut increments = Vec::with_capacity(times.len());
    let mut cumulative_hazard = Vec::with_capacity(times.len());
    let mut h = 0.0;
    for &t in &times {
        let d = samples.iter().filter(|s| s.1 && s.0 == t).count() as f64;
        let denom: f64 = samples.iter().zip(&risk).filter(|(s, _)| s.0 >= t).map(|(_, r)| r).sum();
        let inc = d / denom;
        h += inc;
        increments.push(inc);
        cumulative_hazard.push(h);
    }
    CoxModel {
        beta,
        times,
        cumulative_hazard,
        increments,
    }
}

impl CoxModel {
    pub fn baseline_cumulative_hazard(&self, t: f64) -> f64 {
        let k = self.times.partition_point(|x| *x <= t);
        if k == 0 {
            0.0
        } else {
            self.cumulative_hazard[k - 1]
        }
    }

    pub fn survival_at(&self, t: f64, x: &[f64]) -> f64 {
        (-self.baseline_cumulative_hazard(t) * dot(&self.beta, x).exp()).exp()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Exponential(f64);

    impl ConditionalSurvival<()> for Exponential {
        fn survival(&self, t: f64, _: &()) -> f64 {
            (-self.0 * t).exp()
        }
        fn density(&self, t: f64, _: &()) -> f64 {
            self.0 * (-self.0 * t).exp()
        }
    }

    #[test]
    fn rcll_closed_forms() {
        let m = Exponential(1.0);
        assert!((rcll(&m, &[(2.0, true)], &[()]).unwrap() + 2.0).abs() < 1e-15);
        assert!((rcll(&m, &[(2.0, false)], &[()]).unwrap() + 2.0).abs() < 1e-15);
        let batch = [(0.5, true), (1.5, false), (3.0, true)];
        let mean = rcll(&m, &batch, &[(), (), ()]).unwrap();
        assert!((mean - (-0.5 - 1.5 - 3.0) / 3.0).abs() < 1e-15);
        assert!(rcll(&m, &[], &[] as &[()]).is_err());
        assert!(matches!(
            rcll_from_values(&[true], &[0.5], &[0.0]),
            Err(SurvivalError::NonPositive { what: "density", .. })
        ));
    }

    #[test]
    fn km_no_censoring() {
        let km = KaplanMeier::fit(&[(1.0, true), (2.0, true), (3.0, true), (4.0, true)]);
        assert_eq!(km.at(0.5), 1.0);
        assert_eq!(km.at(1.0), 0.75);
        assert_eq!(km.at(2.0), 0.5);
        assert_eq!(km.at(3.0), 0.25);
        assert_eq!(km.at(4.0), 0.0);
        assert_eq!(km.before(2.0), 0.75);
    }

    #[test]
    fn km_with_censoring() {
        let km = KaplanMeier::fit(&[(1.0, true), (2.0, false), (3.0, true)]);
        assert!((km.at(1.0) - 2.0 / 3.0).abs() < 1e-15);
        assert!((km.at(2.5) - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(km.at(3.0), 0.0);
        let all_censored = KaplanMeier::fit(&[(1.0, false), (2.0, false)]);
        assert_eq!(all_censored.at(10.0), 1.0);
        let g = KaplanMeier::censoring(&[(1.0, true), (2.0, true)]);
        assert_eq!(g.at(5.0), 1.0);
    }

    #[test]
    fn cox_hand_values() {
        let s = [(1.0, true), (2.0, true)];
        let xs = vec![vec![0.3], vec![-1.0]];
        let l = cox_log_partial_likelihood(&[0.0], &s, &xs).exp();
        assert!((l - 0.5).abs() < 1e-15);
        let zero = vec![vec![0.0], vec![0.0], vec![0.0]];
        let m = cox_fit(&[(1.0, true), (2.0, false), (3.0, true)], &zero, CoxOptions::default()).unwrap();
        assert_eq!(m.beta, vec![0.0]);
        assert!(cox_fit(&[(1.0, false), (2.0, false)], &zero[..2], CoxOptions::default()).is_err());
    }

    #[test]
    fn aft_cases() {
        assert_eq!(aft_hazard(3.0, 1.0, |t| t * t).unwrap(), 9.0);
        assert_eq!(aft_hazard(3.0, 2.0, |_| 0.7).unwrap(), 1.4);
        let (beta, x) = (0.4, 1.5);
        let phi = f64::exp(beta * x);
        let h0 = |t: f64| 2.0 * t;
        assert!((aft_hazard(0.8, phi, h0).unwrap() - phi * 2.0 * phi * 0.8).abs() < 1e-12);
        assert!(aft_hazard(1.0, 0.0, h0).is_err());
    }

    struct ByCovariate;

    impl ConditionalSurvival<f64> for ByCovariate {
        fn survival(&self, t: f64, x: &f64) -> f64 {
            (-x * t).exp()
        }
        fn density(&self, t: f64, x: &f64) -> f64 {
            x * (-x * t).exp()
        }
    }

    #[test]
    fn concordance_cases() {
        // faster fills carry larger rates: perfectly ordered
        let s = [(1.0, true), (2.0, true), (3.0, false)];
        assert_eq!(c_td(&ByCovariate, &s, &[3.0, 2.0, 1.0]).unwrap(), 1.0);
        // one of three comparable pairs discordant
        let c = c_td(&ByCovariate, &s, &[3.0, 1.0, 2.0]).unwrap();
        assert!((c - 2.0 / 3.0).abs() < 1e-15);
        assert!(c_td(&ByCovariate, &[(1.0, false), (2.0, false)], &[1.0, 1.0]).is_err());
    }

    struct Constant(f64);

    impl ConditionalSurvival<()> for Constant {
        fn survival(&self, _: f64, _: &()) -> f64 {
            self.0
        }
        fn density(&self, _: f64, _: &()) -> f64 {
            1.0
        }
    }

    #[test]
    fn brier_cases() {
        let s = [(1.0, true), (5.0, true)];
        let g = KaplanMeier::censoring(&s);
        // survival 0 for the early event, 1 for the late one would be perfect;
        // a constant curve cannot do both
        assert_eq!(brier(&Constant(1.0), &s[..1], &[()], 2.0, &g).unwrap(), 1.0);
        assert_eq!(brier(&Constant(0.0), &s[..1], &[()], 2.0, &g).unwrap(), 0.0);
        assert_eq!(brier(&Constant(1.0), &s[1..], &[()], 2.0, &g).unwrap(), 0.0);
    }
}
