//! Gumbel–Hougaard copula and the joint (spatial lag, temporal lag) model.
//!
//! `C(u, v) = exp(-[(-ln u)^θ + (-ln v)^θ]^(1/θ))`, θ ≥ 1, with θ = 1 the
//! independence copula. θ is estimated by inverting Kendall's tau
//! (`τ = 1 - 1/θ`); sampling uses the Marshall–Olkin frailty construction
//! with a positive-stable frailty drawn by the Chambers–Mallows–Stuck method.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::evd::FittedMargin;

/// Upper clamp on θ; beyond it the copula is comonotone at double precision.
pub const THETA_MAX: f64 = 50.0;
/// Interior clamp applied before log transforms.
pub const PROB_EPS: f64 = 1e-12;
pub const MIN_PAIRS: usize = 8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CopulaError {
    #[error("theta must be >= 1, got {0}")]
    InvalidTheta(f64),
    #[error("need at least {MIN_PAIRS} pairs, got {0}")]
    InsufficientPairs(usize),
    #[error("every pair is tied in one coordinate")]
    AllTies,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct GhParam(f64);

impl GhParam {
    pub fn new(theta: f64) -> Result<Self, CopulaError> {
        if theta.is_finite() && theta >= 1.0 {
            Ok(Self(theta))
        } else {
            Err(CopulaError::InvalidTheta(theta))
        }
    }

    pub fn independence() -> Self {
        Self(1.0)
    }

    pub fn theta(self) -> f64 {
        self.0
    }

    /// Kendall's tau implied by θ.
    pub fn kendall_tau(self) -> f64 {
        1.0 - 1.0 / self.0
    }
}

impl TryFrom<f64> for GhParam {
    type Error = CopulaError;

    fn try_from(v: f64) -> Result<Self, Self::Error> {
        Self::new(v)
    }
}

impl From<GhParam> for f64 {
    fn from(p: GhParam) -> f64 {
        p.0
    }
}

fn clamp_open(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

/// `ln(e^a + e^b)`.
fn log_add(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Copula CDF. Exact on the boundary of the unit square.
pub fn gh_cdf(p: GhParam, u: f64, v: f64) -> f64 {
    let (u, v) = (u.clamp(0.0, 1.0), v.clamp(0.0, 1.0));
    if u == 0.0 || v == 0.0 {
        return 0.0;
    }
    if u == 1.0 {
        return v;
    }
    if v == 1.0 {
        return u;
    }
    let theta = p.theta();
    let (x, y) = (-clamp_open(u).ln(), -clamp_open(v).ln());
    let ln_s = log_add(theta * x.ln(), theta * y.ln());
    (-(ln_s / theta).exp()).exp()
}

/// `ln ∂²C/∂u∂v` on the open unit square.
pub fn gh_ln_density(p: GhParam, u: f64, v: f64) -> f64 {
    let theta = p.theta();
    let (x, y) = (-clamp_open(u).ln(), -clamp_open(v).ln());
    let (lx, ly) = (x.ln(), y.ln());
    let ln_s = log_add(theta * lx, theta * ly);
    let a = (ln_s / theta).exp();
    -a + (theta - 1.0) * (lx + ly) + x + y + (1.0 / theta - 2.0) * ln_s + (a + theta - 1.0).ln()
}

/// Copula density.
pub fn gh_density(p: GhParam, u: f64, v: f64) -> f64 {
    gh_ln_density(p, u, v).exp()
}

/// Sample Kendall's tau-b by direct pair counting, O(n²).
pub fn kendall_tau(pairs: &[(f64, f64)]) -> f64 {
    let (mut concordant, mut discordant) = (0i64, 0i64);
    let (mut ties_x, mut ties_y) = (0i64, 0i64);
    for (i, &(x1, y1)) in pairs.iter().enumerate() {
        for &(x2, y2) in &pairs[i + 1..] {
            let dx = x1 - x2;
            let dy = y1 - y2;
            if dx == 0.0 && dy == 0.0 {
                ties_x += 1;
                ties_y += 1;
            } else if dx == 0.0 {
                ties_x += 1;
            } else if dy == 0.0 {
                ties_y += 1;
            } else if (dx > 0.0) == (dy > 0.0) {
                concordant += 1;
            } else {
                discordant += 1;
            }
        }
    }
    let n0 = (pairs.len() * pairs.len().saturating_sub(1) / 2) as f64;
    let denom = ((n0 - ties_x as f64) * (n0 - ties_y as f64)).sqrt();
    if denom == 0.0 {
        return f64::NAN;
    }
    (concordant - discordant) as f64 / denom
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum ThetaWarning {
    /// Negative sample tau; θ set to 1.
    NegativeDependence,
    /// θ exceeded [`THETA_MAX`] and was clamped.
    Saturated,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThetaFit {
    pub param: GhParam,
    pub kendall_tau: f64,
    pub warning: Option<ThetaWarning>,
}

/// θ from Kendall's tau inversion, clamped to `[1, THETA_MAX]`.
pub fn fit_theta(pairs: &[(f64, f64)]) -> Result<ThetaFit, CopulaError> {
    if pairs.len() < MIN_PAIRS {
        return Err(CopulaError::InsufficientPairs(pairs.len()));
    }
    let tau = kendall_tau(pairs);
    if tau.is_nan() {
        return Err(CopulaError::AllTies);
    }
    let (theta, warning) = if tau < 0.0 {
        log::warn!("negative Kendall tau {tau:.4}; Gumbel-Hougaard clamps to independence");
        (1.0, Some(ThetaWarning::NegativeDependence))
    } else if tau >= 1.0 - 1.0 / THETA_MAX {
        (THETA_MAX, Some(ThetaWarning::Saturated))
    } else {
        (1.0 / (1.0 - tau), None)
    };
    Ok(ThetaFit {
        param: GhParam(theta),
        kendall_tau: tau,
        warning,
    })
}

/// Positive α-stable variate with Laplace transform `exp(-t^α)`, `0 < α ≤ 1`.
fn positive_stable<R: Rng>(alpha: f64, rng: &mut R) -> f64 {
    if alpha == 1.0 {
        return 1.0;
    }
    let angle = rng.gen_range(f64::EPSILON..1.0) * std::f64::consts::PI;
    let w = -rng.gen_range(f64::EPSILON..1.0f64).ln();
    let a = (alpha * angle).sin() / angle.sin().powf(1.0 / alpha);
    let b = (((1.0 - alpha) * angle).sin() / w).powf((1.0 - alpha) / alpha);
    a * b
}

/// `n` pairs from the copula, deterministic in `seed`.
pub fn gh_sample(p: GhParam, n: usize, seed: u64) -> Vec<(f64, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let alpha = 1.0 / p.theta();
    let open = |u: f64| u.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0);
    (0..n)
        .map(|_| {
            let v = positive_stable(alpha, &mut rng);
            let e1 = -rng.gen_range(f64::EPSILON..1.0f64).ln();
            let e2 = -rng.gen_range(f64::EPSILON..1.0f64).ln();
            (
                open((-(e1 / v).powf(alpha)).exp()),
                open((-(e2 / v).powf(alpha)).exp()),
            )
        })
        .collect()
}

/// Copula over the fitted spatial-lag and temporal-lag margins.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointModel {
    pub copula: GhParam,
    pub margin_h: FittedMargin,
    pub margin_tau: FittedMargin,
}

impl JointModel {
    pub fn cdf(&self, h: f64, tau: f64) -> f64 {
        gh_cdf(
            self.copula,
            self.margin_h.model.cdf(h),
            self.margin_tau.model.cdf(tau),
        )
    }

    pub fn ln_pdf(&self, h: f64, tau: f64) -> f64 {
        let (lf, lg) = (self.margin_h.model.ln_pdf(h), self.margin_tau.model.ln_pdf(tau));
        if lf == f64::NEG_INFINITY || lg == f64::NEG_INFINITY {
            return f64::NEG_INFINITY;
        }
        gh_ln_density(
            self.copula,
            self.margin_h.model.cdf(h),
            self.margin_tau.model.cdf(tau),
        ) + lf
            + lg
    }

    pub fn pdf(&self, h: f64, tau: f64) -> f64 {
        let (f, g) = (self.margin_h.model.pdf(h), self.margin_tau.model.pdf(tau));
        if f == 0.0 || g == 0.0 {
            return 0.0;
        }
        gh_density(
            self.copula,
            self.margin_h.model.cdf(h),
            self.margin_tau.model.cdf(tau),
        ) * f
            * g
    }
}

/// Plain-text summary of a joint model: θ, Kendall's tau and both margins.
pub fn model_report(m: &JointModel, fit: Option<&ThetaFit>) -> String {
    let mut s = String::new();
    s.push_str(&format!("copula: gumbel-hougaard\ntheta: {:.6}\n", m.copula.theta()));
    s.push_str(&format!("implied_kendall_tau: {:.6}\n", m.copula.kendall_tau()));
    if let Some(f) = fit {
        s.push_str(&format!("sample_kendall_tau: {:.6}\n", f.kendall_tau));
        if let Some(w) = f.warning {
            s.push_str(&format!("warning: {w:?}\n"));
        }
    }
    for (name, margin) in [("spatial", &m.margin_h), ("temporal", &m.margin_tau)] {
        s.push_str(&format!(
            "{name}_margin: {} {} loglik={:.6} n={}\n",
            margin.model.selector(),
            margin.model.param_string(),
            margin.log_likelihood,
            margin.n_samples
        ));
    }
    s
}

pub fn joint_cdf(m: &JointModel, h: f64, tau: f64) -> f64 {
    m.cdf(h, tau)
}

pub fn joint_pdf(m: &JointModel, h: f64, tau: f64) -> f64 {
    m.pdf(h, tau)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evd::{EvdFamily, Margin};
    use crate::quad::{integrate, integrate_2d};
    use proptest::prelude::*;

    fn th(t: f64) -> GhParam {
        GhParam::new(t).unwrap()
    }

    #[test]
    fn rejects_theta_below_one() {
        assert_eq!(GhParam::new(0.9), Err(CopulaError::InvalidTheta(0.9)));
    }

    #[test]
    fn independence_and_boundaries() {
        for i in 0..=20 {
            let u = i as f64 / 20.0;
            for j in 0..=20 {
                let v = j as f64 / 20.0;
                assert!((gh_cdf(th(1.0), u, v) - u * v).abs() < 1e-12);
            }
        }
        assert_eq!(gh_cdf(th(3.0), 0.3, 1.0), 0.3);
        assert_eq!(gh_cdf(th(3.0), 1.0, 0.3), 0.3);
        assert_eq!(gh_cdf(th(3.0), 0.3, 0.0), 0.0);
    }

    #[test]
    fn theta_two_at_half() {
        let oracle = (-(2f64.sqrt()) * 2f64.ln()).exp();
        assert!((oracle - 0.375_214_0).abs() < 1e-6);
        assert!((gh_cdf(th(2.0), 0.5, 0.5) - oracle).abs() < 1e-15);
    }

    #[test]
    fn density_is_one_under_independence() {
        for &(u, v) in &[(0.1, 0.2), (0.5, 0.5), (0.9, 0.01)] {
            assert!((gh_density(th(1.0), u, v) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn density_matches_mixed_differences() {
        let pts = [
            (0.2, 0.3),
            (0.5, 0.5),
            (0.7, 0.4),
            (0.15, 0.85),
            (0.9, 0.8),
            (0.33, 0.66),
            (0.6, 0.1),
            (0.45, 0.55),
            (0.8, 0.85),
            (0.25, 0.2),
        ];
        for theta in [1.5, 2.0, 4.0] {
            let p = th(theta);
            for &(u, v) in &pts {
                let h = 1e-4;
                let mixed = (gh_cdf(p, u + h, v + h) - gh_cdf(p, u + h, v - h) - gh_cdf(p, u - h, v + h)
                    + gh_cdf(p, u - h, v - h))
                    / (4.0 * h * h);
                let d = gh_density(p, u, v);
                assert!((mixed - d).abs() < 1e-4 * d.max(1.0), "θ={theta} ({u},{v}): {mixed} vs {d}");
            }
        }
    }

    #[test]
    fn density_integrates_to_one_for_theta_two() {
        let d = 1e-9;
        let mass = integrate_2d(|u, v| gh_density(th(2.0), u, v), d, 1.0 - d, d, 1.0 - d, 1e-7);
        assert!((mass - 1.0).abs() < 1e-3, "{mass}");
    }

    #[test]
    fn kendall_tau_examples() {
        let up: Vec<_> = (0..10).map(|i| (i as f64, i as f64)).collect();
        assert_eq!(kendall_tau(&up), 1.0);
        let down: Vec<_> = (0..10).map(|i| (i as f64, -(i as f64))).collect();
        assert_eq!(kendall_tau(&down), -1.0);
    }

    #[test]
    fn fit_theta_cases() {
        let up: Vec<_> = (0..10).map(|i| (i as f64, i as f64)).collect();
        let f = fit_theta(&up).unwrap();
        assert_eq!(f.param.theta(), THETA_MAX);
        assert_eq!(f.warning, Some(ThetaWarning::Saturated));

        let down: Vec<_> = (0..10).map(|i| (i as f64, -(i as f64))).collect();
        let f = fit_theta(&down).unwrap();
        assert_eq!(f.param.theta(), 1.0);
        assert_eq!(f.warning, Some(ThetaWarning::NegativeDependence));

        assert_eq!(fit_theta(&up[..7]), Err(CopulaError::InsufficientPairs(7)));
        let flat: Vec<_> = (0..10).map(|i| (i as f64, 1.0)).collect();
        assert_eq!(fit_theta(&flat), Err(CopulaError::AllTies));
    }

    #[test]
    fn theta_from_counted_pairs() {
        let ys = [2.0, 0.0, 1.0, 5.0, 3.0, 4.0, 6.0, 7.0];
        let pairs: Vec<_> = ys.iter().enumerate().map(|(i, &y)| (i as f64, y)).collect();
        let d = pairs
            .iter()
            .enumerate()
            .flat_map(|(i, a)| pairs[i + 1..].iter().map(move |b| (a, b)))
            .filter(|(a, b)| (a.0 - b.0) * (a.1 - b.1) < 0.0)
            .count();
        assert_eq!(d, 4);
        // tau = (24 - 4) / 28; theta = 1/(1 - tau) = 28/8 = 3.5
        let f = fit_theta(&pairs).unwrap();
        assert!((f.param.theta() - 3.5).abs() < 1e-12);
    }

    fn ks_uniform(mut x: Vec<f64>) -> f64 {
        x.sort_by(f64::total_cmp);
        let n = x.len() as f64;
        x.iter()
            .enumerate()
            .map(|(i, &v)| (v - i as f64 / n).abs().max(((i + 1) as f64 / n - v).abs()))
            .fold(0.0, f64::max)
    }

    #[test]
    fn sampler_matches_kendall_tau_and_uniform_margins() {
        for theta in [1.0, 2.0] {
            let s = gh_sample(th(theta), 10_000, 17);
            let tau = kendall_tau(&s);
            assert!((tau - th(theta).kendall_tau()).abs() < 0.03, "θ={theta}: {tau}");
            assert!(ks_uniform(s.iter().map(|p| p.0).collect()) < 0.02);
            assert!(ks_uniform(s.iter().map(|p| p.1).collect()) < 0.02);
            assert!(s.iter().all(|&(u, v)| u > 0.0 && u < 1.0 && v > 0.0 && v < 1.0));
        }
        assert_eq!(gh_sample(th(2.0), 10, 3), gh_sample(th(2.0), 10, 3));
    }

    #[test]
    fn fit_recovers_sampled_theta() {
        let s = gh_sample(th(2.0), 2_000, 23);
        let f = fit_theta(&s).unwrap();
        assert!((f.param.theta() - 2.0).abs() / 2.0 < 0.05, "{}", f.param.theta());
    }

    fn margin(f: EvdFamily) -> FittedMargin {
        FittedMargin {
            model: Margin::Parametric(f),
            log_likelihood: 0.0,
            n_samples: 1,
            warnings: vec![],
        }
    }

    fn joint(theta: f64) -> JointModel {
        JointModel {
            copula: th(theta),
            margin_h: margin(EvdFamily::Weibull { shape: 2.0, scale: 10_000.0 }),
            margin_tau: margin(EvdFamily::Weibull { shape: 3.0, scale: 2.0 }),
        }
    }

    #[test]
    fn joint_cdf_boundaries_and_composition() {
        let m = joint(2.0);
        assert_eq!(joint_cdf(&m, -1.0, 2.0), 0.0);
        assert_eq!(joint_cdf(&m, 1e9, 1e9), 1.0);
        let (h, t) = (8_000.0, 1.7);
        let composed = gh_cdf(m.copula, m.margin_h.model.cdf(h), m.margin_tau.model.cdf(t));
        assert_eq!(joint_cdf(&m, h, t), composed);
    }

    #[test]
    fn joint_pdf_factorizes_under_independence() {
        let m = joint(1.0);
        let (h, t) = (7_000.0, 2.2);
        let f = m.margin_h.model.pdf(h) * m.margin_tau.model.pdf(t);
        assert!((joint_pdf(&m, h, t) - f).abs() < 1e-12 * f);
    }

    #[test]
    fn joint_pdf_matches_mixed_differences_of_cdf() {
        let m = joint(2.5);
        for i in 1..=10 {
            let h = 2_000.0 * i as f64;
            let t = 0.4 + 0.25 * i as f64;
            let (dh, dt) = (1.0, 1e-4);
            let mixed = (m.cdf(h + dh, t + dt) - m.cdf(h + dh, t - dt) - m.cdf(h - dh, t + dt)
                + m.cdf(h - dh, t - dt))
                / (4.0 * dh * dt);
            let p = joint_pdf(&m, h, t);
            // Relative: the density is of order 1e-4 (per meter per bucket).
            assert!((mixed - p).abs() < 1e-4 * p.max(1e-12), "{h},{t}: {mixed} vs {p}");
            assert!((m.ln_pdf(h, t) - p.ln()).abs() < 1e-9);
        }
    }

    #[test]
    fn joint_pdf_integrates_to_one() {
        let m = joint(2.0);
        let (h_hi, t_hi) = (
            m.margin_h.model.quantile(1.0 - 1e-9),
            m.margin_tau.model.quantile(1.0 - 1e-9),
        );
        let mass = integrate(
            |t| integrate(|h| m.pdf(h, t), 0.0, h_hi, 1e-9),
            0.0,
            t_hi,
            1e-7,
        );
        assert!((mass - 1.0).abs() < 5e-3, "{mass}");
    }

    proptest! {
        #[test]
        fn two_increasing(theta in 1.0f64..10.0, a in 0.0f64..1.0, b in 0.0f64..1.0, c in 0.0f64..1.0, d in 0.0f64..1.0) {
            let p = th(theta);
            let (u1, u2) = (a.min(b), a.max(b));
            let (v1, v2) = (c.min(d), c.max(d));
            let vol = gh_cdf(p, u2, v2) - gh_cdf(p, u2, v1) - gh_cdf(p, u1, v2) + gh_cdf(p, u1, v1);
            prop_assert!(vol >= -1e-14);
        }

        #[test]
        fn density_nonnegative(theta in 1.0f64..50.0, u in 0.0f64..1.0, v in 0.0f64..1.0) {
            prop_assert!(gh_density(th(theta), u, v) >= 0.0);
        }
    }
}
