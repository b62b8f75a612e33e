//! Extreme-value margins: Weibull, Gumbel, Fréchet and GEV families, the
//! Kumaraswamy distortion, and the blended distribution
//! `F(x) = F1(x)^T(x) · F2(x)^(1 - T(x))`.

mod fit;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use fit::{
    log_likelihood, mle_fit, select_model, write_margin_report_csv, FitWarning, FittedMargin,
    ModelSelection,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvdError {
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("need at least {need} samples, got {got}")]
    InsufficientSamples { need: usize, got: usize },
    #[error("samples must be finite and positive")]
    NonPositiveSample,
    #[error("all samples identical")]
    DegenerateSample,
    #[error("likelihood is not finite anywhere the optimizer looked")]
    NonFinite,
    #[error("no candidate families given")]
    NoCandidates,
    #[error("every candidate failed: {0}")]
    AllCandidatesFailed(String),
    #[error("unknown family {0:?}")]
    UnknownFamily(String),
}

/// Parametric family without parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvdKind {
    Weibull,
    Gumbel,
    Frechet,
    Gev,
}

impl EvdKind {
    pub fn n_params(self) -> usize {
        match self {
            EvdKind::Gev => 3,
            _ => 2,
        }
    }

    fn name(self) -> &'static str {
        match self {
            EvdKind::Weibull => "weibull",
            EvdKind::Gumbel => "gumbel",
            EvdKind::Frechet => "frechet",
            EvdKind::Gev => "gev",
        }
    }
}

impl FromStr for EvdKind {
    type Err = EvdError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "weibull" => Ok(EvdKind::Weibull),
            "gumbel" => Ok(EvdKind::Gumbel),
            "frechet" | "fréchet" => Ok(EvdKind::Frechet),
            "gev" => Ok(EvdKind::Gev),
            other => Err(EvdError::UnknownFamily(other.to_string())),
        }
    }
}

impl fmt::Display for EvdKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A parametrized extreme-value distribution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "lowercase")]
pub enum EvdFamily {
    /// `F(x) = 1 - exp(-(x/scale)^shape)`, `x ≥ 0`.
    Weibull { shape: f64, scale: f64 },
    /// `F(x) = exp(-exp(-(x - loc)/scale))`.
    Gumbel { loc: f64, scale: f64 },
    /// `F(x) = exp(-(x/scale)^(-shape))`, `x > 0`.
    Frechet { shape: f64, scale: f64 },
    /// `F(x) = exp(-(1 + shape (x - loc)/scale)^(-1/shape))`; Gumbel at `shape = 0`.
    Gev { loc: f64, scale: f64, shape: f64 },
}

const GEV_ZERO_SHAPE: f64 = 1e-12;

impl EvdFamily {
    pub fn kind(&self) -> EvdKind {
        match self {
            EvdFamily::Weibull { .. } => EvdKind::Weibull,
            EvdFamily::Gumbel { .. } => EvdKind::Gumbel,
            EvdFamily::Frechet { .. } => EvdKind::Frechet,
            EvdFamily::Gev { .. } => EvdKind::Gev,
        }
    }

    pub fn validate(&self) -> Result<(), EvdError> {
        let ok = |v: f64| v.is_finite();
        let pos = |v: f64| v.is_finite() && v > 0.0;
        let valid = match *self {
            EvdFamily::Weibull { shape, scale } | EvdFamily::Frechet { shape, scale } => {
                pos(shape) && pos(scale)
            }
            EvdFamily::Gumbel { loc, scale } => ok(loc) && pos(scale),
            EvdFamily::Gev { loc, scale, shape } => ok(loc) && pos(scale) && ok(shape),
        };
        if valid {
            Ok(())
        } else {
            Err(EvdError::InvalidParams(format!("{self:?}")))
        }
    }

    /// `(name, value)` pairs in a fixed order.
    pub fn params(&self) -> Vec<(&'static str, f64)> {
        match *self {
            EvdFamily::Weibull { shape, scale } | EvdFamily::Frechet { shape, scale } => {
                vec![("shape", shape), ("scale", scale)]
            }
            EvdFamily::Gumbel { loc, scale } => vec![("loc", loc), ("scale", scale)],
            EvdFamily::Gev { loc, scale, shape } => {
                vec![("loc", loc), ("scale", scale), ("shape", shape)]
            }
        }
    }

    /// Distribution of `c · X`.
    pub fn scaled(&self, c: f64) -> Self {
        match *self {
            EvdFamily::Weibull { shape, scale } => EvdFamily::Weibull {
                shape,
                scale: scale * c,
            },
            EvdFamily::Frechet { shape, scale } => EvdFamily::Frechet {
                shape,
                scale: scale * c,
            },
            EvdFamily::Gumbel { loc, scale } => EvdFamily::Gumbel {
                loc: loc * c,
                scale: scale * c,
            },
            EvdFamily::Gev { loc, scale, shape } => EvdFamily::Gev {
                loc: loc * c,
                scale: scale * c,
                shape,
            },
        }
    }

    pub fn cdf(&self, x: f64) -> f64 {
        match *self {
            EvdFamily::Weibull { shape, scale } => {
                if x <= 0.0 {
                    0.0
                } else {
                    -(-(x / scale).powf(shape)).exp_m1()
                }
            }
            EvdFamily::Frechet { shape, scale } => {
                if x <= 0.0 {
                    0.0
                } else {
                    (-(x / scale).powf(-shape)).exp()
                }
            }
            EvdFamily::Gumbel { loc, scale } => (-(-(x - loc) / scale).exp()).exp(),
            EvdFamily::Gev { loc, scale, shape } => {
                if shape.abs() < GEV_ZERO_SHAPE {
                    return (-(-(x - loc) / scale).exp()).exp();
                }
                let t = 1.0 + shape * (x - loc) / scale;
                if t <= 0.0 {
                    if shape > 0.0 {
                        0.0
                    } else {
                        1.0
                    }
                } else {
                    (-t.powf(-1.0 / shape)).exp()
                }
            }
        }
    }

    pub fn ln_pdf(&self, x: f64) -> f64 {
        match *self {
            EvdFamily::Weibull { shape, scale } => {
                if x < 0.0 {
                    return f64::NEG_INFINITY;
                }
                if x == 0.0 {
                    return match shape.partial_cmp(&1.0) {
                        Some(std::cmp::Ordering::Greater) => f64::NEG_INFINITY,
                        Some(std::cmp::Ordering::Equal) => -scale.ln(),
                        _ => f64::INFINITY,
                    };
                }
                let z = x / scale;
                (shape / scale).ln() + (shape - 1.0) * z.ln() - z.powf(shape)
            }
            EvdFamily::Frechet { shape, scale } => {
                if x <= 0.0 {
                    return f64::NEG_INFINITY;
                }
                let z = x / scale;
                (shape / scale).ln() - (1.0 + shape) * z.ln() - z.powf(-shape)
            }
            EvdFamily::Gumbel { loc, scale } => {
                let z = (x - loc) / scale;
                -scale.ln() - z - (-z).exp()
            }
            EvdFamily::Gev { loc, scale, shape } => {
                if shape.abs() < GEV_ZERO_SHAPE {
                    let z = (x - loc) / scale;
                    return -scale.ln() - z - (-z).exp();
                }
                let t = 1.0 + shape * (x - loc) / scale;
                if t <= 0.0 {
                    return f64::NEG_INFINITY;
                }
                -scale.ln() - (1.0 / shape + 1.0) * t.ln() - t.powf(-1.0 / shape)
            }
        }
    }

    pub fn pdf(&self, x: f64) -> f64 {
        self.ln_pdf(x).exp()
    }

    /// Inverse CDF for `p ∈ (0, 1)`.
    pub fn quantile(&self, p: f64) -> f64 {
        match *self {
            EvdFamily::Weibull { shape, scale } => scale * (-(-p).ln_1p()).powf(1.0 / shape),
            EvdFamily::Frechet { shape, scale } => scale * (-p.ln()).powf(-1.0 / shape),
            EvdFamily::Gumbel { loc, scale } => loc - scale * (-p.ln()).ln(),
            EvdFamily::Gev { loc, scale, shape } => {
                if shape.abs() < GEV_ZERO_SHAPE {
                    loc - scale * (-p.ln()).ln()
                } else {
                    loc + scale * ((-p.ln()).powf(-shape) - 1.0) / shape
                }
            }
        }
    }
}

/// CDF of a validated family.
pub fn evd_cdf(family: &EvdFamily, x: f64) -> Result<f64, EvdError> {
    family.validate()?;
    Ok(family.cdf(x))
}

/// Density of a validated family.
pub fn evd_pdf(family: &EvdFamily, x: f64) -> Result<f64, EvdError> {
    family.validate()?;
    Ok(family.pdf(x))
}

/// Kumaraswamy CDF on the rescaled interval `[lower, upper]`:
/// `T(x) = 1 - (1 - z^alpha)^beta` with `z = clamp((x - lower)/(upper - lower), 0, 1)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KumaraswamyDistortion {
    pub lower: f64,
    pub upper: f64,
    pub alpha: f64,
    pub beta: f64,
}

impl KumaraswamyDistortion {
    pub fn new(lower: f64, upper: f64, alpha: f64, beta: f64) -> Result<Self, EvdError> {
        let d = Self {
            lower,
            upper,
            alpha,
            beta,
        };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<(), EvdError> {
        if self.lower.is_finite()
            && self.upper.is_finite()
            && self.lower < self.upper
            && self.alpha > 0.0
            && self.beta > 0.0
            && self.alpha.is_finite()
            && self.beta.is_finite()
        {
            Ok(())
        } else {
            Err(EvdError::InvalidParams(format!("{self:?}")))
        }
    }

    fn z(&self, x: f64) -> f64 {
        ((x - self.lower) / (self.upper - self.lower)).clamp(0.0, 1.0)
    }

    pub fn t(&self, x: f64) -> f64 {
        if x <= self.lower {
            return 0.0;
        }
        if x >= self.upper {
            return 1.0;
        }
        1.0 - (1.0 - self.z(x).powf(self.alpha)).powf(self.beta)
    }

    /// `dT/dx`; zero outside the open interval.
    pub fn t_prime(&self, x: f64) -> f64 {
        if x <= self.lower || x >= self.upper {
            return 0.0;
        }
        let z = self.z(x);
        let za = z.powf(self.alpha);
        self.alpha * self.beta * z.powf(self.alpha - 1.0) * (1.0 - za).powf(self.beta - 1.0)
            / (self.upper - self.lower)
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self {
            lower: self.lower * c,
            upper: self.upper * c,
            ..*self
        }
    }
}

pub fn kumaraswamy_t(d: &KumaraswamyDistortion, x: f64) -> f64 {
    d.t(x)
}

/// `F1^T · F2^(1-T)`: below the distortion interval the blend is `F2`,
/// above it `F1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlendedEvd {
    pub f1: EvdFamily,
    pub f2: EvdFamily,
    pub distortion: KumaraswamyDistortion,
}

impl BlendedEvd {
    pub fn validate(&self) -> Result<(), EvdError> {
        self.f1.validate()?;
        self.f2.validate()?;
        self.distortion.validate()
    }

    pub fn cdf(&self, x: f64) -> f64 {
        let t = self.distortion.t(x);
        if t == 1.0 {
            return self.f1.cdf(x);
        }
        if t == 0.0 {
            return self.f2.cdf(x);
        }
        self.f1.cdf(x).powf(t) * self.f2.cdf(x).powf(1.0 - t)
    }

    pub fn pdf(&self, x: f64) -> f64 {
        let t = self.distortion.t(x);
        if t == 1.0 {
            return self.f1.pdf(x);
        }
        if t == 0.0 {
            return self.f2.pdf(x);
        }
        let (c1, c2) = (self.f1.cdf(x), self.f2.cdf(x));
        if c1 <= 0.0 || c2 <= 0.0 {
            return 0.0;
        }
        let (d1, d2) = (self.f1.pdf(x), self.f2.pdf(x));
        let big_f = c1.powf(t) * c2.powf(1.0 - t);
        big_f * (self.distortion.t_prime(x) * (c1 / c2).ln() + t * d1 / c1 + (1.0 - t) * d2 / c2)
    }

    /// True when the CDF never decreases on an `n`-point grid over `[a, b]`.
    pub fn is_monotone_on(&self, a: f64, b: f64, n: usize) -> bool {
        let mut prev = f64::NEG_INFINITY;
        for i in 0..n {
            let x = a + (b - a) * i as f64 / (n - 1) as f64;
            let v = self.cdf(x);
            if v < prev - 1e-12 {
                return false;
            }
            prev = v;
        }
        true
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self {
            f1: self.f1.scaled(c),
            f2: self.f2.scaled(c),
            distortion: self.distortion.scaled(c),
        }
    }
}

pub fn blended_cdf(b: &BlendedEvd, x: f64) -> f64 {
    b.cdf(x)
}

pub fn blended_pdf(b: &BlendedEvd, x: f64) -> f64 {
    b.pdf(x)
}

/// Either a plain family or a blend; the type every fitted margin carries.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Margin {
    Parametric(EvdFamily),
    Blended(BlendedEvd),
}

impl Margin {
    pub fn cdf(&self, x: f64) -> f64 {
        match self {
            Margin::Parametric(f) => f.cdf(x),
            Margin::Blended(b) => b.cdf(x),
        }
    }

    pub fn pdf(&self, x: f64) -> f64 {
        match self {
            Margin::Parametric(f) => f.pdf(x),
            Margin::Blended(b) => b.pdf(x),
        }
    }

    pub fn ln_pdf(&self, x: f64) -> f64 {
        match self {
            Margin::Parametric(f) => f.ln_pdf(x),
            Margin::Blended(b) => b.pdf(x).ln(),
        }
    }

    pub fn n_params(&self) -> usize {
        match self {
            Margin::Parametric(f) => f.kind().n_params(),
            Margin::Blended(b) => b.f1.kind().n_params() + b.f2.kind().n_params() + 2,
        }
    }

    pub fn selector(&self) -> FamilySelector {
        match self {
            Margin::Parametric(f) => FamilySelector::Parametric(f.kind()),
            Margin::Blended(b) => FamilySelector::Blended(b.f1.kind(), b.f2.kind()),
        }
    }

    pub fn scaled(&self, c: f64) -> Self {
        match self {
            Margin::Parametric(f) => Margin::Parametric(f.scaled(c)),
            Margin::Blended(b) => Margin::Blended(b.scaled(c)),
        }
    }

    /// Inverse CDF; bisection for blends.
    pub fn quantile(&self, p: f64) -> f64 {
        match self {
            Margin::Parametric(f) => f.quantile(p),
            Margin::Blended(b) => {
                let (q1, q2) = (b.f1.quantile(p), b.f2.quantile(p));
                let span = (q1 - q2).abs().max(1.0);
                let mut lo = q1.min(q2) - span;
                let mut hi = q1.max(q2) + span;
                while self.cdf(lo) > p {
                    lo -= 2.0 * (hi - lo);
                }
                while self.cdf(hi) < p {
                    hi += 2.0 * (hi - lo);
                }
                for _ in 0..200 {
                    let mid = 0.5 * (lo + hi);
                    if self.cdf(mid) < p {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                }
                0.5 * (lo + hi)
            }
        }
    }

    /// `name=value` pairs joined by `;`, six decimals.
    pub fn param_string(&self) -> String {
        let fam = |prefix: &str, f: &EvdFamily| {
            f.params()
                .into_iter()
                .map(|(k, v)| format!("{prefix}{k}={}", crate::fmt6(v)))
                .collect::<Vec<_>>()
        };
        let parts = match self {
            Margin::Parametric(f) => fam("", f),
            Margin::Blended(b) => {
                let mut p = fam("f1.", &b.f1);
                p.extend(fam("f2.", &b.f2));
                let d = &b.distortion;
                for (k, v) in [("lower", d.lower), ("upper", d.upper), ("alpha", d.alpha), ("beta", d.beta)] {
                    p.push(format!("t.{k}={}", crate::fmt6(v)));
                }
                p
            }
        };
        parts.join(";")
    }
}

/// Which model `mle_fit` should fit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum FamilySelector {
    Parametric(EvdKind),
    /// Blend with `f1` governing the upper region and `f2` the lower.
    Blended(EvdKind, EvdKind),
}

impl FamilySelector {
    pub fn n_params(self) -> usize {
        match self {
            FamilySelector::Parametric(k) => k.n_params(),
            FamilySelector::Blended(a, b) => a.n_params() + b.n_params() + 2,
        }
    }

    /// The default candidate list: every plain family and the Weibull–Weibull blend.
    pub fn defaults() -> Vec<FamilySelector> {
        vec![
            FamilySelector::Parametric(EvdKind::Weibull),
            FamilySelector::Parametric(EvdKind::Gumbel),
            FamilySelector::Parametric(EvdKind::Frechet),
            FamilySelector::Parametric(EvdKind::Gev),
            FamilySelector::Blended(EvdKind::Weibull, EvdKind::Weibull),
        ]
    }
}

impl fmt::Display for FamilySelector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FamilySelector::Parametric(k) => write!(f, "{k}"),
            FamilySelector::Blended(a, b) => write!(f, "blended({a},{b})"),
        }
    }
}

impl FromStr for FamilySelector {
    type Err = EvdError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        if let Some(inner) = s
            .strip_prefix("blended(")
            .and_then(|r| r.strip_suffix(')'))
        {
            let (a, b) = inner
                .split_once(',')
                .ok_or_else(|| EvdError::UnknownFamily(s.to_string()))?;
            return Ok(FamilySelector::Blended(a.parse()?, b.parse()?));
        }
        Ok(FamilySelector::Parametric(s.parse()?))
    }
}

impl TryFrom<String> for FamilySelector {
    type Error = EvdError;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<FamilySelector> for String {
    fn from(s: FamilySelector) -> String {
        s.to_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quad::integrate;

    const W1: EvdFamily = EvdFamily::Weibull {
        shape: 4.8763,
        scale: 1.829,
    };
    const W2: EvdFamily = EvdFamily::Weibull {
        shape: 0.5647,
        scale: 0.084,
    };

    fn families() -> Vec<EvdFamily> {
        vec![
            W1,
            W2,
            EvdFamily::Gumbel { loc: 1.0, scale: 0.7 },
            EvdFamily::Frechet { shape: 3.0, scale: 2.0 },
            EvdFamily::Gev { loc: 0.5, scale: 1.2, shape: 0.2 },
            EvdFamily::Gev { loc: 0.5, scale: 1.2, shape: -0.3 },
            EvdFamily::Gev { loc: 0.5, scale: 1.2, shape: 0.0 },
        ]
    }

    #[test]
    fn closed_form_points() {
        let w = EvdFamily::Weibull { shape: 2.5, scale: 3.0 };
        assert!((evd_cdf(&w, 3.0).unwrap() - (1.0 - (-1.0f64).exp())).abs() < 1e-15);
        assert_eq!(evd_cdf(&w, 0.0).unwrap(), 0.0);
        let g = EvdFamily::Gumbel { loc: 0.0, scale: 1.0 };
        assert!((evd_cdf(&g, 0.0).unwrap() - (-1.0f64).exp()).abs() < 1e-15);
        assert_eq!(evd_pdf(&w, 0.0).unwrap(), 0.0);
    }

    #[test]
    fn invalid_params_rejected() {
        let bad = EvdFamily::Weibull { shape: -1.0, scale: 1.0 };
        assert!(matches!(evd_cdf(&bad, 1.0), Err(EvdError::InvalidParams(_))));
        let bad = EvdFamily::Gev { loc: 0.0, scale: 0.0, shape: 0.1 };
        assert!(evd_pdf(&bad, 1.0).is_err());
    }

    #[test]
    fn weibull_pdf_integrates_to_one() {
        let v = integrate(|x| W1.pdf(x), 0.0, 10.0, 1e-10);
        assert!((v - 1.0).abs() < 1e-6, "{v}");
    }

    #[test]
    fn pdfs_match_cdf_differences() {
        for f in families() {
            for i in 1..=10 {
                let p = i as f64 / 11.0;
                let x = f.quantile(p);
                let h = 1e-4 * x.abs().max(1e-3);
                let fd = (f.cdf(x + h) - f.cdf(x - h)) / (2.0 * h);
                let tol = 1e-6 * f.pdf(x).max(1.0);
                assert!((fd - f.pdf(x)).abs() < tol, "{f:?} at {x}: {fd} vs {}", f.pdf(x));
            }
        }
    }

    #[test]
    fn cdfs_monotone_with_limits_and_pdfs_integrate() {
        for f in families() {
            let (a, b) = (f.quantile(1e-9), f.quantile(1.0 - 1e-9));
            let mut prev = 0.0;
            for i in 0..1000 {
                let x = a + (b - a) * i as f64 / 999.0;
                let c = f.cdf(x);
                assert!(c >= prev && (0.0..=1.0).contains(&c));
                assert!(f.pdf(x) >= 0.0);
                prev = c;
            }
            assert!(f.cdf(a) < 1e-8 && f.cdf(b) > 1.0 - 1e-8);
            let mass = integrate(|x| f.pdf(x), a, b, 1e-10);
            assert!((mass - 1.0).abs() < 1e-4, "{f:?}: {mass}");
        }
    }

    #[test]
    fn quantile_inverts_cdf() {
        for f in families() {
            for p in [0.01, 0.3, 0.5, 0.9, 0.999] {
                assert!((f.cdf(f.quantile(p)) - p).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn kumaraswamy_values() {
        let d = KumaraswamyDistortion::new(2.0, 6.0, 1.0, 1.0).unwrap();
        assert_eq!(kumaraswamy_t(&d, 2.0), 0.0);
        assert_eq!(kumaraswamy_t(&d, 6.0), 1.0);
        assert_eq!(kumaraswamy_t(&d, 4.0), 0.5);
        let d = KumaraswamyDistortion::new(0.0, 1.0, 2.0, 3.0).unwrap();
        assert!((kumaraswamy_t(&d, 0.5) - 0.578125).abs() < 1e-15);
        assert!(KumaraswamyDistortion::new(1.0, 1.0, 1.0, 1.0).is_err());
        for i in 1..100 {
            let x = i as f64 / 100.0;
            let h = 1e-6;
            let fd = (d.t(x + h) - d.t(x - h)) / (2.0 * h);
            assert!((fd - d.t_prime(x)).abs() < 1e-6);
        }
    }

    fn blend() -> BlendedEvd {
        BlendedEvd {
            f1: W1,
            f2: W2,
            distortion: KumaraswamyDistortion::new(0.05, 1.5, 1.3, 2.0).unwrap(),
        }
    }

    #[test]
    fn blend_reduces_outside_interval() {
        let b = blend();
        for x in [1.5, 1.7, 2.5, 4.0] {
            assert_eq!(blended_cdf(&b, x), W1.cdf(x));
            assert_eq!(blended_pdf(&b, x), W1.pdf(x));
        }
        for x in [0.001, 0.02, 0.05] {
            assert_eq!(blended_cdf(&b, x), W2.cdf(x));
            assert_eq!(blended_pdf(&b, x), W2.pdf(x));
        }
    }

    #[test]
    fn blend_matches_log_domain_oracle() {
        let b = blend();
        let x = 0.5 * (b.distortion.lower + b.distortion.upper);
        let t = b.distortion.t(x);
        let oracle = (t * W1.cdf(x).ln() + (1.0 - t) * W2.cdf(x).ln()).exp();
        assert!((b.cdf(x) - oracle).abs() < 1e-14);
    }

    #[test]
    fn blend_pdf_matches_finite_differences() {
        let b = blend();
        for i in 1..=20 {
            let x = b.distortion.lower + (b.distortion.upper - b.distortion.lower) * i as f64 / 21.0;
            let h = 1e-6;
            let fd = (b.cdf(x + h) - b.cdf(x - h)) / (2.0 * h);
            assert!((fd - b.pdf(x)).abs() < 1e-6, "x={x}: {fd} vs {}", b.pdf(x));
        }
    }

    #[test]
    fn blend_of_identical_components_is_that_component() {
        for f in families() {
            let b = BlendedEvd {
                f1: f,
                f2: f,
                distortion: KumaraswamyDistortion::new(f.quantile(0.2), f.quantile(0.8), 0.7, 3.0).unwrap(),
            };
            for p in [0.05, 0.25, 0.5, 0.75, 0.95] {
                let x = f.quantile(p);
                assert!((b.cdf(x) - f.cdf(x)).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn blended_quantile_inverts() {
        let m = Margin::Blended(blend());
        for p in [0.01, 0.2, 0.5, 0.8, 0.99] {
            assert!((m.cdf(m.quantile(p)) - p).abs() < 1e-12);
        }
    }

    #[test]
    fn selector_strings() {
        for s in FamilySelector::defaults() {
            assert_eq!(s.to_string().parse::<FamilySelector>().unwrap(), s);
        }
        assert_eq!(
            "blended(weibull,gumbel)".parse::<FamilySelector>().unwrap(),
            FamilySelector::Blended(EvdKind::Weibull, EvdKind::Gumbel)
        );
        assert!("lognormal".parse::<FamilySelector>().is_err());
    }
}
