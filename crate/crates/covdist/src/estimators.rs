//! True distances, plug-in estimators, the closed-form consistent estimators
//! and the generic double-contour estimator used to cross-check them.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::contour::{Contour, QuadratureOptions};
use crate::error::{Error, Result};
use crate::specfun::phi2_unchecked;
use crate::spectral::{PopulationModel, SampleSpectrum};

/// Signature of a user-supplied analytic function returning `(f(w), f'(w))`.
pub type CustomEval = dyn Fn(Complex64) -> (Complex64, Complex64) + Send + Sync;

/// A scalar analytic function with its derivative.
#[derive(Clone)]
pub enum ScalarFn {
    /// `coef * w^exp`.
    Power { coef: f64, exp: i32 },
    /// `coef * log(w)^exp` on the principal branch.
    LogPower { coef: f64, exp: u32 },
    /// Arbitrary function analytic off `(-inf, floor]`.
    Custom { name: String, floor: f64, eval: Arc<CustomEval> },
}

impl fmt::Debug for ScalarFn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ScalarFn::Power { coef, exp } => write!(f, "{coef}*w^{exp}"),
            ScalarFn::LogPower { coef, exp } => write!(f, "{coef}*log(w)^{exp}"),
            ScalarFn::Custom { name, .. } => write!(f, "custom({name})"),
        }
    }
}

/// Identity of a [`ScalarFn`] up to its scalar coefficient.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum FnShape {
    Power(i32),
    LogPower(u32),
    Custom(String),
}

impl ScalarFn {
    pub fn constant(c: f64) -> Self {
        ScalarFn::Power { coef: c, exp: 0 }
    }
    pub fn power(coef: f64, exp: i32) -> Self {
        ScalarFn::Power { coef, exp }
    }
    pub fn log_power(coef: f64, exp: u32) -> Self {
        ScalarFn::LogPower { coef, exp }
    }

    pub fn eval(&self, w: Complex64) -> Complex64 {
        match self {
            ScalarFn::Power { coef, exp } => *coef * w.powi(*exp),
            ScalarFn::LogPower { coef, exp } => *coef * w.ln().powu(*exp),
            ScalarFn::Custom { eval, .. } => eval(w).0,
        }
    }

    pub fn deriv(&self, w: Complex64) -> Complex64 {
        match self {
            ScalarFn::Power { coef, exp } => {
                if *exp == 0 {
                    Complex64::new(0.0, 0.0)
                } else {
                    *coef * *exp as f64 * w.powi(exp - 1)
                }
            }
            ScalarFn::LogPower { coef, exp } => {
                if *exp == 0 {
                    Complex64::new(0.0, 0.0)
                } else {
                    *coef * *exp as f64 * w.ln().powu(exp - 1) / w
                }
            }
            ScalarFn::Custom { eval, .. } => eval(w).1,
        }
    }

    pub fn eval_real(&self, x: f64) -> f64 {
        match self {
            ScalarFn::Power { coef, exp } => coef * x.powi(*exp),
            ScalarFn::LogPower { coef, exp } => coef * x.ln().powi(*exp as i32),
            ScalarFn::Custom { eval, .. } => eval(Complex64::new(x, 0.0)).0.re,
        }
    }

    /// The function is analytic on the complex plane minus `(-inf, floor]`.
    pub fn analyticity_floor(&self) -> f64 {
        match self {
            ScalarFn::Power { exp, .. } if *exp >= 0 => f64::NEG_INFINITY,
            ScalarFn::Power { .. } => 0.0,
            ScalarFn::LogPower { exp: 0, .. } => f64::NEG_INFINITY,
            ScalarFn::LogPower { .. } => 0.0,
            ScalarFn::Custom { floor, .. } => *floor,
        }
    }

    /// Splits the function into `coef * shape`.
    pub fn shape(&self) -> (f64, FnShape) {
        match self {
            ScalarFn::Power { coef, exp } => (*coef, FnShape::Power(*exp)),
            ScalarFn::LogPower { coef, exp } if *exp == 0 => (*coef, FnShape::Power(0)),
            ScalarFn::LogPower { coef, exp } => (*coef, FnShape::LogPower(*exp)),
            ScalarFn::Custom { name, .. } => (1.0, FnShape::Custom(name.clone())),
        }
    }

    /// Same function with unit coefficient.
    pub fn unit(&self) -> ScalarFn {
        match self {
            ScalarFn::Power { exp, .. } => ScalarFn::Power { coef: 1.0, exp: *exp },
            ScalarFn::LogPower { exp: 0, .. } => ScalarFn::constant(1.0),
            ScalarFn::LogPower { exp, .. } => ScalarFn::LogPower { coef: 1.0, exp: *exp },
            other => other.clone(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct MetricTerm {
    pub f1: ScalarFn,
    pub f2: ScalarFn,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MetricId {
    #[serde(rename = "eu")]
    Euclidean,
    #[serde(rename = "kl")]
    KullbackLeibler,
    #[serde(rename = "le")]
    LogEuclidean,
    #[serde(rename = "custom")]
    Custom(String),
}

impl fmt::Display for MetricId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MetricId::Euclidean => write!(f, "eu"),
            MetricId::KullbackLeibler => write!(f, "kl"),
            MetricId::LogEuclidean => write!(f, "le"),
            MetricId::Custom(s) => write!(f, "{s}"),
        }
    }
}

impl FromStr for MetricId {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "eu" | "euclidean" => Ok(MetricId::Euclidean),
            "kl" | "skl" | "jeffreys" => Ok(MetricId::KullbackLeibler),
            "le" | "log-euclidean" | "logeuclidean" => Ok(MetricId::LogEuclidean),
            other => Err(Error::Config(format!("unknown metric '{other}' (expected eu, kl or le)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Regime {
    AnyRatio,
    OversampledOnly,
}

/// A distance `(1/M) sum_l tr[f1_l(R1) f2_l(R2)]`.
#[derive(Debug, Clone)]
pub struct MetricSpec {
    pub id: MetricId,
    pub terms: Vec<MetricTerm>,
    pub regime: Regime,
}

impl MetricSpec {
    /// `(1/M) tr[(R1 - R2)^2]`.
    pub fn euclidean() -> Self {
        let t = |f1, f2| MetricTerm { f1, f2 };
        Self {
            id: MetricId::Euclidean,
            terms: vec![
                t(ScalarFn::power(1.0, 2), ScalarFn::constant(1.0)),
                t(ScalarFn::constant(1.0), ScalarFn::power(1.0, 2)),
                t(ScalarFn::power(-2.0, 1), ScalarFn::power(1.0, 1)),
            ],
            regime: Regime::AnyRatio,
        }
    }

    /// Symmetrized Kullback-Leibler (Jeffreys) divergence between zero-mean Gaussians.
    pub fn kullback_leibler() -> Self {
        let t = |f1, f2| MetricTerm { f1, f2 };
        Self {
            id: MetricId::KullbackLeibler,
            terms: vec![
                t(ScalarFn::power(0.5, -1), ScalarFn::power(1.0, 1)),
                t(ScalarFn::power(0.5, 1), ScalarFn::power(1.0, -1)),
                t(ScalarFn::constant(-1.0), ScalarFn::constant(1.0)),
            ],
            regime: Regime::OversampledOnly,
        }
    }

    /// `(1/M) tr[(log R1 - log R2)^2]`.
    pub fn log_euclidean() -> Self {
        let t = |f1, f2| MetricTerm { f1, f2 };
        Self {
            id: MetricId::LogEuclidean,
            terms: vec![
                t(ScalarFn::log_power(1.0, 2), ScalarFn::constant(1.0)),
                t(ScalarFn::log_power(-2.0, 1), ScalarFn::log_power(1.0, 1)),
                t(ScalarFn::constant(1.0), ScalarFn::log_power(1.0, 2)),
            ],
            regime: Regime::OversampledOnly,
        }
    }

    pub fn custom(name: &str, terms: Vec<MetricTerm>) -> Result<Self> {
        if terms.is_empty() {
            return Err(Error::Config("a metric needs at least one term".into()));
        }
        let floor = terms
            .iter()
            .flat_map(|t| [t.f1.analyticity_floor(), t.f2.analyticity_floor()])
            .fold(f64::NEG_INFINITY, f64::max);
        let regime = if floor >= 0.0 { Regime::OversampledOnly } else { Regime::AnyRatio };
        Ok(Self { id: MetricId::Custom(name.to_string()), terms, regime })
    }

    pub fn from_id(id: &MetricId) -> Result<Self> {
        match id {
            MetricId::Euclidean => Ok(Self::euclidean()),
            MetricId::KullbackLeibler => Ok(Self::kullback_leibler()),
            MetricId::LogEuclidean => Ok(Self::log_euclidean()),
            MetricId::Custom(s) => Err(Error::Config(format!("custom metric '{s}' has no built-in definition"))),
        }
    }

    /// Largest analyticity floor among all term functions.
    pub fn analyticity_floor(&self) -> f64 {
        self.terms
            .iter()
            .flat_map(|t| [t.f1.analyticity_floor(), t.f2.analyticity_floor()])
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// Evaluates the metric on two diagonalized matrices with overlap `w`.
    fn evaluate(&self, l1: &[f64], l2: &[f64], w: &DMatrix<f64>) -> f64 {
        let m = l1.len() as f64;
        let mut total = 0.0;
        for t in &self.terms {
            let a: Vec<f64> = l1.iter().map(|&x| t.f1.eval_real(x)).collect();
            let b: Vec<f64> = l2.iter().map(|&x| t.f2.eval_real(x)).collect();
            for (i, ai) in a.iter().enumerate() {
                let mut row = 0.0;
                for (j, bj) in b.iter().enumerate() {
                    row += w[(i, j)] * bj;
                }
                total += ai * row;
            }
        }
        total / m
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EstimatorKind {
    True,
    PlugIn,
    Consistent,
    ContourOracle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistanceEstimate {
    pub value: f64,
    pub metric: MetricId,
    pub kind: EstimatorKind,
    pub m: usize,
    pub n1: usize,
    pub n2: usize,
}

fn check_dims(s1: &SampleSpectrum, s2: &SampleSpectrum) -> Result<usize> {
    if s1.dim() != s2.dim() {
        return Err(Error::DimensionMismatch(format!("spectra of dimension {} and {}", s1.dim(), s2.dim())));
    }
    Ok(s1.dim())
}

fn require_oversampled(s: &SampleSpectrum, what: &str) -> Result<()> {
    if !s.is_oversampled() {
        return Err(Error::OversampleRequired(format!(
            "{what} needs N > M (N={}, M={})",
            s.n_samples(),
            s.dim()
        )));
    }
    Ok(())
}

fn estimate(value: f64, metric: &MetricId, kind: EstimatorKind, s1: &SampleSpectrum, s2: &SampleSpectrum) -> DistanceEstimate {
    DistanceEstimate { value, metric: metric.clone(), kind, m: s1.dim(), n1: s1.n_samples(), n2: s2.n_samples() }
}

/// `(1/M) sum_l tr[f1_l(R1) f2_l(R2)]` for known covariances.
pub fn true_distance(m1: &PopulationModel, m2: &PopulationModel, metric: &MetricSpec) -> Result<f64> {
    if m1.dim() != m2.dim() {
        return Err(Error::DimensionMismatch(format!("models of dimension {} and {}", m1.dim(), m2.dim())));
    }
    let w = (m1.basis().transpose() * m2.basis()).map(|v| v * v);
    Ok(metric.evaluate(m1.eigenvalues(), m2.eigenvalues(), &w))
}

/// The metric evaluated directly on the two sample covariance matrices.
pub fn plugin_distance(s1: &SampleSpectrum, s2: &SampleSpectrum, metric: &MetricSpec) -> Result<DistanceEstimate> {
    check_dims(s1, s2)?;
    if metric.analyticity_floor() >= 0.0 {
        require_oversampled(s1, "plug-in estimate of this metric")?;
        require_oversampled(s2, "plug-in estimate of this metric")?;
    }
    let w = s1.overlap(s2);
    let v = metric.evaluate(s1.eigenvalues(), s2.eigenvalues(), &w);
    Ok(estimate(v, &metric.id, EstimatorKind::PlugIn, s1, s2))
}

fn cross_trace(a: &[f64], b: &[f64], w: &DMatrix<f64>) -> f64 {
    let mut t = 0.0;
    for (i, ai) in a.iter().enumerate() {
        for (j, bj) in b.iter().enumerate() {
            t += ai * w[(i, j)] * bj;
        }
    }
    t
}

/// `(1/M) tr[(R1 - R2)^2] - tr^2[R1]/(M N1) - tr^2[R2]/(M N2)`; valid in
/// both the over- and undersampled regimes.
pub fn consistent_euclidean(s1: &SampleSpectrum, s2: &SampleSpectrum) -> Result<DistanceEstimate> {
    let m = check_dims(s1, s2)? as f64;
    let w = s1.overlap(s2);
    let l1 = s1.eigenvalues();
    let l2 = s2.eigenvalues();
    let sq = l1.iter().map(|x| x * x).sum::<f64>() + l2.iter().map(|x| x * x).sum::<f64>() - 2.0 * cross_trace(l1, l2, &w);
    let (t1, t2) = (s1.trace(), s2.trace());
    let v = sq / m - t1 * t1 / (m * s1.n_samples() as f64) - t2 * t2 / (m * s2.n_samples() as f64);
    Ok(estimate(v, &MetricId::Euclidean, EstimatorKind::Consistent, s1, s2))
}

/// Consistent symmetrized Kullback-Leibler estimator.
pub fn consistent_kl(s1: &SampleSpectrum, s2: &SampleSpectrum) -> Result<DistanceEstimate> {
    let m = check_dims(s1, s2)?;
    require_oversampled(s1, "consistent KL")?;
    require_oversampled(s2, "consistent KL")?;
    let mf = m as f64;
    let w = s1.overlap(s2);
    let inv1: Vec<f64> = s1.eigenvalues().iter().map(|x| 1.0 / x).collect();
    let inv2: Vec<f64> = s2.eigenvalues().iter().map(|x| 1.0 / x).collect();
    let t12 = cross_trace(&inv1, s2.eigenvalues(), &w);
    let t21 = cross_trace(s1.eigenvalues(), &inv2, &w);
    let c1 = 1.0 - mf / s1.n_samples() as f64;
    let c2 = 1.0 - mf / s2.n_samples() as f64;
    let v = c1 * t12 / (2.0 * mf) + c2 * t21 / (2.0 * mf) - 1.0;
    Ok(estimate(v, &MetricId::KullbackLeibler, EstimatorKind::Consistent, s1, s2))
}

/// Coefficients `beta_k` such that `sum_k beta_k e_k e_k^H` estimates `log R` consistently.
pub fn le_beta(s: &SampleSpectrum) -> Result<Vec<f64>> {
    require_oversampled(s, "log-Euclidean coefficients")?;
    let lam = s.eigenvalues();
    let mu = s.require_mu()?;
    let m = lam.len();
    let log_l: Vec<f64> = lam.iter().map(|x| x.ln()).collect();
    let log_mu: Vec<f64> = mu.iter().map(|x| x.ln()).collect();
    let mut out = Vec::with_capacity(m);
    for k in 0..m {
        let lk = lam[k];
        let mut s1 = 0.0;
        let mut s2 = 0.0;
        let mut t_l = 0.0;
        let mut t_mu = 0.0;
        for r in 0..m {
            if r != k {
                s1 += lk / (lam[r] - lk);
                t_l += lam[r] / (lam[r] - lk) * log_l[r];
            }
            s2 += mu[k] / (lam[r] - mu[k]);
            t_mu += mu[r] / (mu[r] - lk) * log_mu[r];
        }
        out.push(1.0 + (1.0 + s1 - s2) * log_l[k] + t_l - t_mu);
    }
    Ok(out)
}

/// Consistent estimate of `(1/M) tr[log^2 R]`.
pub fn le_alpha(s: &SampleSpectrum) -> Result<f64> {
    require_oversampled(s, "log-Euclidean alpha")?;
    let lam = s.eigenvalues();
    let mu = s.require_mu()?;
    let m = lam.len();
    let mf = m as f64;
    let nf = s.n_samples() as f64;
    let c = nf / mf - 1.0;
    let mut a = 0.0;
    for k in 0..m {
        let p = 1.0 + mu[k].ln();
        let q = 1.0 + lam[k].ln();
        a += c * (p * p - q * q) + q * q / mf;
    }
    a += 1.0 - c * (1.0 - mf / nf).ln().powi(2);
    let mut dil = 0.0;
    let mut logs = 0.0;
    for k in 0..m {
        let lk = lam[k];
        for r in 0..m {
            dil += phi2_unchecked(mu[r] / lk) - phi2_unchecked(lam[r] / lk);
            if r != k {
                logs += (lam[r] / lk).ln() * (lk / (lk - lam[r]).abs()).ln();
            }
            logs -= (mu[r] / lk).ln() * (lk / (lk - mu[r]).abs()).ln();
        }
    }
    Ok(a + 2.0 / mf * (dil + logs))
}

/// Consistent log-Euclidean estimator `alpha1 + alpha2 - (2/M) sum beta1_k beta2_m |<e_k, f_m>|^2`.
pub fn consistent_le(s1: &SampleSpectrum, s2: &SampleSpectrum) -> Result<DistanceEstimate> {
    let m = check_dims(s1, s2)? as f64;
    let b1 = le_beta(s1)?;
    let b2 = le_beta(s2)?;
    let w = s1.overlap(s2);
    let v = le_alpha(s1)? + le_alpha(s2)? - 2.0 / m * cross_trace(&b1, &b2, &w);
    Ok(estimate(v, &MetricId::LogEuclidean, EstimatorKind::Consistent, s1, s2))
}

/// Dispatches to the closed form for built-in metrics and to the contour
/// estimator otherwise.
pub fn consistent_distance(s1: &SampleSpectrum, s2: &SampleSpectrum, metric: &MetricSpec) -> Result<DistanceEstimate> {
    match metric.id {
        MetricId::Euclidean => consistent_euclidean(s1, s2),
        MetricId::KullbackLeibler => consistent_kl(s1, s2),
        MetricId::LogEuclidean => consistent_le(s1, s2),
        MetricId::Custom(_) => {
            let mut e = generic_contour_estimator(s1, s2, metric, &QuadratureOptions::default(), None)?;
            e.kind = EstimatorKind::Consistent;
            Ok(e)
        }
    }
}

/// Estimate of the requested kind from two sample spectra.
pub fn estimate_distance(s1: &SampleSpectrum, s2: &SampleSpectrum, metric: &MetricSpec, kind: EstimatorKind) -> Result<DistanceEstimate> {
    match kind {
        EstimatorKind::PlugIn => plugin_distance(s1, s2, metric),
        EstimatorKind::Consistent => consistent_distance(s1, s2, metric),
        EstimatorKind::ContourOracle => generic_contour_estimator(s1, s2, metric, &QuadratureOptions::default(), None),
        EstimatorKind::True => Err(Error::Config("the true distance needs population models, not samples".into())),
    }
}

fn psi_terms(lam: &[f64], n: f64, z: Complex64) -> (Complex64, Complex64) {
    let mut psi = Complex64::new(0.0, 0.0);
    let mut q2 = Complex64::new(0.0, 0.0);
    for &l in lam {
        let inv = 1.0 / (l - z);
        psi += l * inv;
        q2 += inv * inv;
    }
    (psi / n, q2 / n)
}

/// `(omega_hat(z), omega_hat'(z))` with `omega_hat = z / (1 - (1/N) tr[R Q(z)])`.
pub fn omega_hat(s: &SampleSpectrum, z: Complex64) -> Result<(Complex64, Complex64)> {
    let lam = s.eigenvalues();
    let scale = lam[lam.len() - 1].max(1e-300);
    if lam.iter().any(|&l| (l - z).norm() <= 1e-14 * scale) {
        return Err(Error::Singular(format!("omega_hat evaluated at a sample eigenvalue ({z})")));
    }
    let n = s.n_samples() as f64;
    let (psi, q2) = psi_terms(lam, n, z);
    let den = 1.0 - psi;
    if den.norm() <= 1e-14 {
        return Err(Error::Singular(format!("omega_hat has a pole at {z}")));
    }
    let m = lam.len() as f64;
    let w = z / den;
    let wp = (1.0 - m / n + z * z * q2) / (den * den);
    Ok((w, wp))
}

/// Default z-plane contour for one sample spectrum: a log-space ellipse over
/// `[0.5 mu_1, 2 lambda_M]` when oversampled and a plain ellipse over
/// `[-0.5 lambda_M, 2 lambda_M]` (enclosing zero) otherwise.
pub fn default_sample_contour(s: &SampleSpectrum) -> Contour {
    let lam = s.eigenvalues();
    let top = lam[lam.len() - 1];
    match s.mu() {
        Some(mu) => Contour::log_ellipse(0.5 * mu[0].min(lam[0]), 2.0 * top, 1.0),
        None => Contour::ellipse(-0.5 * top, 2.0 * top, 0.5),
    }
}

/// For every distinct function `f` in `funcs`, the vector
/// `B_k[f] = (1/2 pi i) integral f(omega_hat) (z omega_hat' / omega_hat) / (lambda_k - z) dz`,
/// so that the contour estimator equals `(1/M) sum_l B[f1_l]^T W B[f2_l]`.
fn sample_side_integrals(s: &SampleSpectrum, funcs: &[ScalarFn], contour: &Contour, opts: &QuadratureOptions) -> Result<Vec<Vec<Complex64>>> {
    let lam = s.eigenvalues();
    let m = lam.len();
    let floor = funcs.iter().map(|f| f.analyticity_floor()).fold(f64::NEG_INFINITY, f64::max);
    if !contour.avoids_cut(floor) {
        return Err(Error::Contour(format!("contour {contour:?} meets the branch cut (-inf, {floor}]")));
    }
    let scale = lam[m - 1];
    let (vals, _) = contour.integrate(m * funcs.len(), opts, |node, acc| {
        let (w, wp) = omega_hat(s, node.z)?;
        if floor.is_finite() && w.re <= floor && w.im.abs() <= 1e-8 * scale {
            return Err(Error::Contour(format!("omega_hat({}) = {w} lies on the branch cut", node.z)));
        }
        let jac = node.z * wp / w * node.weight;
        for (fi, f) in funcs.iter().enumerate() {
            let h = f.eval(w) * jac;
            let row = &mut acc[fi * m..(fi + 1) * m];
            for (k, &l) in lam.iter().enumerate() {
                row[k] += h / (l - node.z);
            }
        }
        Ok(())
    })?;
    Ok(vals.chunks(m).map(|c| c.to_vec()).collect())
}

/// Double-contour estimator evaluated by trapezoidal quadrature. The double
/// integral factorizes over the sample eigenvalues, so each side is computed
/// as a vector of single integrals.
pub fn generic_contour_estimator(
    s1: &SampleSpectrum,
    s2: &SampleSpectrum,
    metric: &MetricSpec,
    opts: &QuadratureOptions,
    contours: Option<(Contour, Contour)>,
) -> Result<DistanceEstimate> {
    let m = check_dims(s1, s2)?;
    if metric.regime == Regime::OversampledOnly || metric.analyticity_floor() >= 0.0 {
        require_oversampled(s1, "contour estimator of this metric")?;
        require_oversampled(s2, "contour estimator of this metric")?;
    }
    let (c1, c2) = contours.unwrap_or_else(|| (default_sample_contour(s1), default_sample_contour(s2)));
    let f1: Vec<ScalarFn> = metric.terms.iter().map(|t| t.f1.clone()).collect();
    let f2: Vec<ScalarFn> = metric.terms.iter().map(|t| t.f2.clone()).collect();
    let b1 = sample_side_integrals(s1, &f1, &c1, opts)?;
    let b2 = sample_side_integrals(s2, &f2, &c2, opts)?;
    let w = s1.overlap(s2);
    let mut total = Complex64::new(0.0, 0.0);
    for (x, y) in b1.iter().zip(&b2) {
        for i in 0..m {
            let mut row = Complex64::new(0.0, 0.0);
            for j in 0..m {
                row += w[(i, j)] * y[j];
            }
            total += x[i] * row;
        }
    }
    let v = total / m as f64;
    if v.im.abs() > 1e-6 * v.re.abs().max(1.0) {
        return Err(Error::Numerical(format!("contour estimate has imaginary part {}", v.im)));
    }
    Ok(estimate(v.re, &metric.id, EstimatorKind::ContourOracle, s1, s2))
}
