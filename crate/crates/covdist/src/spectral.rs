//! Covariance models, Gaussian sampling, sample spectra and the root finders
//! (`mu`, `theta`, `phi`) consumed by the estimators and the asymptotic law.

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, Basis, CMatrix};

/// Scalar field of the observations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Field {
    Real,
    Complex,
}

impl Field {
    /// 1 for real observations, 0 for circularly-symmetric complex ones.
    pub fn varsigma(self) -> f64 {
        match self {
            Field::Real => 1.0,
            Field::Complex => 0.0,
        }
    }
}

/// Relative gap below which population eigenvalues are merged into one atom.
pub const DEFAULT_CLUSTER_TOL: f64 = 1e-8;

/// A known covariance matrix together with its distinct eigenvalues
/// (atoms), their multiplicities and an orthonormal eigenbasis.
#[derive(Debug, Clone, PartialEq)]
pub struct PopulationModel {
    r: DMatrix<f64>,
    eigenvalues: Vec<f64>,
    basis: DMatrix<f64>,
    gammas: Vec<f64>,
    mults: Vec<usize>,
    offsets: Vec<usize>,
    field: Field,
}

impl PopulationModel {
    pub fn from_covariance(r: DMatrix<f64>, field: Field) -> Result<Self> {
        Self::with_tolerance(r, field, DEFAULT_CLUSTER_TOL)
    }

    pub fn with_tolerance(r: DMatrix<f64>, field: Field, cluster_tol: f64) -> Result<Self> {
        let m = r.nrows();
        if m == 0 || r.ncols() != m {
            return Err(Error::DimensionMismatch(format!("covariance must be square and non-empty, got {}x{}", m, r.ncols())));
        }
        let asym = (&r - r.transpose()).amax();
        if asym > 1e-10 * r.amax().max(1e-300) {
            return Err(Error::Domain("covariance must be symmetric".into()));
        }
        let sym = 0.5 * (&r + r.transpose());
        let (vals, vecs) = linalg::sym_eigen_sorted(&sym);
        if !(vals[0] > 0.0) {
            return Err(Error::Domain(format!("covariance is not positive definite (min eigenvalue {})", vals[0])));
        }
        let top = vals[m - 1];
        let mut gammas = Vec::new();
        let mut mults = Vec::new();
        let mut offsets = Vec::new();
        let mut i = 0;
        while i < m {
            let mut j = i;
            while j + 1 < m && vals[j + 1] - vals[i] < cluster_tol * top {
                j += 1;
            }
            let mean = vals[i..=j].iter().sum::<f64>() / (j - i + 1) as f64;
            offsets.push(i);
            gammas.push(mean);
            mults.push(j - i + 1);
            i = j + 1;
        }
        let mut eigenvalues = vals;
        for (a, (&off, &k)) in offsets.iter().zip(&mults).enumerate() {
            for v in &mut eigenvalues[off..off + k] {
                *v = gammas[a];
            }
        }
        Ok(Self { r: sym, eigenvalues, basis: vecs, gammas, mults, offsets, field })
    }

    /// Diagonal model with the given atoms and multiplicities.
    pub fn from_atoms(gammas: &[f64], mults: &[usize], field: Field) -> Result<Self> {
        if gammas.len() != mults.len() || gammas.is_empty() {
            return Err(Error::DimensionMismatch("atoms and multiplicities differ in length".into()));
        }
        let diag: Vec<f64> = gammas.iter().zip(mults).flat_map(|(&g, &k)| std::iter::repeat_n(g, k)).collect();
        let m = diag.len();
        Self::from_covariance(DMatrix::from_fn(m, m, |i, j| if i == j { diag[i] } else { 0.0 }), field)
    }

    pub fn dim(&self) -> usize {
        self.r.nrows()
    }
    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.r
    }
    pub fn field(&self) -> Field {
        self.field
    }
    pub fn with_field(mut self, field: Field) -> Self {
        self.field = field;
        self
    }
    /// Distinct eigenvalues, ascending.
    pub fn gammas(&self) -> &[f64] {
        &self.gammas
    }
    pub fn multiplicities(&self) -> &[usize] {
        &self.mults
    }
    pub fn n_atoms(&self) -> usize {
        self.gammas.len()
    }
    /// All `M` eigenvalues (atoms repeated), ascending.
    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }
    pub fn basis(&self) -> &DMatrix<f64> {
        &self.basis
    }
    /// Range of eigenvector columns spanning atom `a`.
    pub fn atom_columns(&self, a: usize) -> std::ops::Range<usize> {
        self.offsets[a]..self.offsets[a] + self.mults[a]
    }
    /// Atom index of each eigenvector column.
    pub fn atom_of_columns(&self) -> Vec<usize> {
        let mut out = vec![0; self.dim()];
        for a in 0..self.n_atoms() {
            for c in self.atom_columns(a) {
                out[c] = a;
            }
        }
        out
    }
    /// Orthogonal projector onto the eigenspace of atom `a`.
    pub fn projection(&self, a: usize) -> DMatrix<f64> {
        let u = self.basis.columns(self.offsets[a], self.mults[a]);
        u * u.transpose()
    }
    /// `f(R)` through the eigendecomposition.
    pub fn matrix_function(&self, f: impl Fn(f64) -> f64) -> DMatrix<f64> {
        let u = &self.basis;
        let scaled = DMatrix::from_fn(u.nrows(), u.ncols(), |i, j| u[(i, j)] * f(self.eigenvalues[j]));
        scaled * u.transpose()
    }
    /// `tr[Pi_a^{self} Pi_b^{other}]` for all atom pairs.
    pub fn atom_overlap(&self, other: &PopulationModel) -> DMatrix<f64> {
        let w = (self.basis.transpose() * &other.basis).map(|v| v * v);
        let mut out = DMatrix::zeros(self.n_atoms(), other.n_atoms());
        let ai = self.atom_of_columns();
        let bj = other.atom_of_columns();
        for i in 0..w.nrows() {
            for j in 0..w.ncols() {
                out[(ai[i], bj[j])] += w[(i, j)];
            }
        }
        out
    }
    fn sqrt_matrix(&self) -> DMatrix<f64> {
        self.matrix_function(f64::sqrt)
    }
}

/// Symmetric Toeplitz model with entries `rho^|i-j|`.
pub fn toeplitz_model(rho: f64, m: usize, field: Field) -> Result<PopulationModel> {
    if !(rho.abs() < 1.0) || m == 0 {
        return Err(Error::Domain(format!("toeplitz model needs |rho| < 1 and M >= 1 (rho={rho}, M={m})")));
    }
    let r = DMatrix::from_fn(m, m, |i, j| rho.powi((i as i32 - j as i32).abs()));
    let model = PopulationModel::from_covariance(r, field)?;
    debug_assert!(model.gammas()[0] > 0.0);
    Ok(model)
}

/// Observation matrix `Y` (M x N).
#[derive(Debug, Clone, PartialEq)]
pub enum Observations {
    Real(DMatrix<f64>),
    Complex(CMatrix),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleSet {
    pub data: Observations,
    pub seed: Option<u64>,
}

impl SampleSet {
    pub fn from_real(y: DMatrix<f64>) -> Self {
        Self { data: Observations::Real(y), seed: None }
    }
    pub fn from_complex(y: CMatrix) -> Self {
        Self { data: Observations::Complex(y), seed: None }
    }
    pub fn dim(&self) -> usize {
        match &self.data {
            Observations::Real(y) => y.nrows(),
            Observations::Complex(y) => y.nrows(),
        }
    }
    pub fn n_samples(&self) -> usize {
        match &self.data {
            Observations::Real(y) => y.ncols(),
            Observations::Complex(y) => y.ncols(),
        }
    }
}

/// Random stream for trial `trial` of experiment `experiment`: a ChaCha8
/// generator keyed by the master seed, with the experiment as stream id and
/// the trial selecting a disjoint block of the keystream.
pub fn trial_rng(master: u64, experiment: u64, trial: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(experiment);
    rng.set_word_pos((trial as u128) << 40);
    rng
}

/// Draws `Y = R^{1/2} X` with a fresh generator seeded by `seed`.
pub fn sample_gaussian(model: &PopulationModel, n: usize, seed: u64) -> Result<SampleSet> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = sample_gaussian_with(model, n, &mut rng)?;
    s.seed = Some(seed);
    Ok(s)
}

/// Draws `Y = R^{1/2} X` from the supplied generator. Complex entries have
/// independent real and imaginary parts of variance 1/2.
pub fn sample_gaussian_with<R: Rng + ?Sized>(model: &PopulationModel, n: usize, rng: &mut R) -> Result<SampleSet> {
    if n == 0 {
        return Err(Error::Config("sample count must be at least 1".into()));
    }
    let m = model.dim();
    let root = model.sqrt_matrix();
    let data = match model.field() {
        Field::Real => {
            let x = DMatrix::from_fn(m, n, |_, _| rng.sample::<f64, _>(StandardNormal));
            Observations::Real(root * x)
        }
        Field::Complex => {
            let h = std::f64::consts::FRAC_1_SQRT_2;
            let x = CMatrix::from_fn(m, n, |_, _| {
                let re: f64 = rng.sample(StandardNormal);
                let im: f64 = rng.sample(StandardNormal);
                Complex64::new(h * re, h * im)
            });
            Observations::Complex(root.map(|v| Complex64::new(v, 0.0)) * x)
        }
    };
    Ok(SampleSet { data, seed: None })
}

/// Eigendecomposition of a sample covariance matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleSpectrum {
    eigenvalues: Vec<f64>,
    basis: Basis,
    n: usize,
    mu: std::result::Result<Vec<f64>, Error>,
}

impl SampleSpectrum {
    /// Builds a spectrum from eigenvalues and eigenvectors directly; the
    /// `mu` roots are attached when `n > M` and the spectrum is simple.
    pub fn from_parts(eigenvalues: Vec<f64>, basis: Basis, n: usize) -> Result<Self> {
        let m = eigenvalues.len();
        if basis.dim() != m {
            return Err(Error::DimensionMismatch(format!("{} eigenvalues for a basis of dimension {}", m, basis.dim())));
        }
        if eigenvalues.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::Domain("sample eigenvalues must be ascending".into()));
        }
        let mu = mu_roots(&eigenvalues, n);
        Ok(Self { eigenvalues, basis, n, mu })
    }

    /// Diagonal spectrum with the canonical basis.
    pub fn diagonal(eigenvalues: Vec<f64>, n: usize) -> Result<Self> {
        let m = eigenvalues.len();
        Self::from_parts(eigenvalues, Basis::Real(DMatrix::identity(m, m)), n)
    }

    pub fn dim(&self) -> usize {
        self.eigenvalues.len()
    }
    pub fn n_samples(&self) -> usize {
        self.n
    }
    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }
    pub fn basis(&self) -> &Basis {
        &self.basis
    }
    pub fn mu(&self) -> Option<&[f64]> {
        self.mu.as_deref().ok()
    }
    /// The `mu` roots, or the reason they are unavailable.
    pub fn require_mu(&self) -> Result<&[f64]> {
        self.mu.as_deref().map_err(Clone::clone)
    }
    pub fn is_oversampled(&self) -> bool {
        self.n > self.dim()
    }
    pub fn trace(&self) -> f64 {
        self.eigenvalues.iter().sum()
    }
    /// `|<e_k, f_m>|^2` between this basis and another.
    pub fn overlap(&self, other: &SampleSpectrum) -> DMatrix<f64> {
        linalg::overlap_sq(&self.basis, &other.basis)
    }
    /// Applies a common rotation `E -> U E` to the eigenvectors.
    pub fn rotated(&self, u: &DMatrix<f64>) -> Self {
        let basis = match &self.basis {
            Basis::Real(e) => Basis::Real(u * e),
            Basis::Complex(e) => Basis::Complex(u.map(|v| Complex64::new(v, 0.0)) * e),
        };
        Self { basis, ..self.clone() }
    }
}

/// Spectrum of `R = Y Y^H / N`.
pub fn scm_spectrum(data: &SampleSet) -> Result<SampleSpectrum> {
    let n = data.n_samples();
    let (mut vals, basis) = match &data.data {
        Observations::Real(y) => {
            if y.iter().any(|v| !v.is_finite()) {
                return Err(Error::Domain("non-finite observation".into()));
            }
            let s = (y * y.transpose()) / n as f64;
            let (v, e) = linalg::sym_eigen_sorted(&s);
            (v, Basis::Real(e))
        }
        Observations::Complex(y) => {
            if y.iter().any(|v| !v.re.is_finite() || !v.im.is_finite()) {
                return Err(Error::Domain("non-finite observation".into()));
            }
            let s = (y * y.adjoint()).unscale(n as f64);
            let (v, e) = linalg::herm_eigen_sorted(&s);
            (v, Basis::Complex(e))
        }
    };
    for v in &mut vals {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    SampleSpectrum::from_parts(vals, basis, n)
}

/// Solves `1 = (1/N) sum_k l_k / (l_k - mu)`, which has exactly one root in
/// each interval `(l_{k-1}, l_k)` with `l_0 = 0` when `N > M`.
pub fn mu_roots(lambda: &[f64], n: usize) -> Result<Vec<f64>> {
    let m = lambda.len();
    if n <= m {
        return Err(Error::OversampleRequired(format!("mu roots need N > M (N={n}, M={m})")));
    }
    if m == 0 || !(lambda[0] > 0.0) {
        return Err(Error::DegenerateSpectrum("sample eigenvalues must be strictly positive".into()));
    }
    let top = lambda[m - 1];
    for w in lambda.windows(2) {
        if w[1] - w[0] <= 1e-12 * top {
            return Err(Error::DegenerateSpectrum(format!("repeated sample eigenvalue near {}", w[0])));
        }
    }
    let nf = n as f64;
    let func = |mu: f64| -> (f64, f64) {
        let mut f = -1.0;
        let mut df = 0.0;
        for &l in lambda {
            let d = l - mu;
            f += l / (d * nf);
            df += l / (d * d * nf);
        }
        (f, df)
    };
    let mut out = Vec::with_capacity(m);
    let mut lo = 0.0;
    for &hi in lambda {
        out.push(bracketed_increasing_root(&func, lo, hi, 1e-15)?);
        lo = hi;
    }
    Ok(out)
}

/// Safeguarded Newton iteration for an increasing function with a pole-type
/// sign change on `(lo, hi)`: negative near `lo`, positive near `hi`.
fn bracketed_increasing_root(func: &impl Fn(f64) -> (f64, f64), lo: f64, hi: f64, rtol: f64) -> Result<f64> {
    let (mut a, mut b) = (lo, hi);
    let mut x = 0.5 * (a + b);
    for _ in 0..200 {
        let (f, df) = func(x);
        if f == 0.0 {
            return Ok(x);
        }
        if f < 0.0 {
            a = x;
        } else {
            b = x;
        }
        let newton = x - f / df;
        let next = if df > 0.0 && newton > a && newton < b { newton } else { 0.5 * (a + b) };
        if (next - x).abs() <= rtol * next.abs().max(f64::MIN_POSITIVE) || b - a <= rtol * b.abs() {
            return Ok(next);
        }
        x = next;
    }
    Err(Error::RootFinding(format!("no convergence on ({lo}, {hi})")))
}

fn pole_guard(model: &PopulationModel, w: Complex64) -> Result<()> {
    let scale = model.gammas()[model.n_atoms() - 1];
    for &g in model.gammas() {
        if (w - g).norm() <= 1e-14 * scale {
            return Err(Error::Singular(format!("evaluation at population eigenvalue {g}")));
        }
    }
    Ok(())
}

/// `Gamma(w, w2) = (1/N) sum_m K_m g_m^2 / ((g_m - w)(g_m - w2))`.
pub fn gamma_fn(model: &PopulationModel, n: usize, w: Complex64, w2: Option<Complex64>) -> Result<Complex64> {
    let w2 = w2.unwrap_or(w);
    pole_guard(model, w)?;
    pole_guard(model, w2)?;
    Ok(gamma_unchecked(model, n, w, w2))
}

pub(crate) fn gamma_unchecked(model: &PopulationModel, n: usize, w: Complex64, w2: Complex64) -> Complex64 {
    let mut s = Complex64::new(0.0, 0.0);
    for (&g, &k) in model.gammas().iter().zip(model.multiplicities()) {
        s += k as f64 * g * g / ((g - w) * (g - w2));
    }
    s / n as f64
}

/// `(1/N) sum_m K_m g_m^2 / |g_m - w|^2`, an upper bound for `|Gamma(w, w2)|`
/// when both arguments lie on a curve where it is below one.
pub(crate) fn gamma_abs(model: &PopulationModel, n: usize, w: Complex64) -> f64 {
    let mut s = 0.0;
    for (&g, &k) in model.gammas().iter().zip(model.multiplicities()) {
        s += k as f64 * g * g / (g - w).norm_sqr();
    }
    s / n as f64
}

/// `z'(w) = 1 - Gamma(w)`, the derivative of `z(w) = w (1 - (1/N) sum K g / (g - w))`.
pub fn z_prime(model: &PopulationModel, n: usize, w: Complex64) -> Result<Complex64> {
    Ok(1.0 - gamma_fn(model, n, w, None)?)
}

fn gamma_real(model: &PopulationModel, nf: f64, x: f64) -> (f64, f64) {
    let mut g0 = 0.0;
    let mut g1 = 0.0;
    for (&g, &k) in model.gammas().iter().zip(model.multiplicities()) {
        let d = g - x;
        let t = k as f64 * g * g / (d * d);
        g0 += t;
        g1 += 2.0 * t / d;
    }
    (g0 / nf, g1 / nf)
}

fn bisect(mut lo: f64, mut hi: f64, f: impl Fn(f64) -> f64) -> f64 {
    // Requires f(lo) < 0 < f(hi).
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if f(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-15 * hi.abs().max(lo.abs()) {
            break;
        }
    }
    0.5 * (lo + hi)
}

/// Real solutions of `Gamma(w) = 1`: one left of the smallest atom, one right
/// of the largest, and zero or two in every gap between consecutive atoms.
pub fn theta_real_roots(model: &PopulationModel, n: usize) -> Result<Vec<f64>> {
    let nf = n as f64;
    let gs = model.gammas();
    let top = gs[gs.len() - 1];
    let gam = |x: f64| gamma_real(model, nf, x).0 - 1.0;
    let mut roots = Vec::new();
    let mut delta = 0.5 * gs[0].max(1e-3 * top);
    while gam(gs[0] - delta) > 0.0 {
        delta *= 2.0;
    }
    roots.push(bisect(gs[0] - delta, gs[0], gam));
    for w in gs.windows(2) {
        let (a, b) = (w[0], w[1]);
        let width = b - a;
        let eps = 1e-14 * top;
        let star = bisect(a + eps, b - eps, |x| gamma_real(model, nf, x).1);
        let gmin = gam(star);
        let tol = 1e-11;
        if gmin.abs() <= tol {
            return Err(Error::ClusterOverlap(format!(
                "Gamma(w) = 1 has a double root near {star} between atoms {a} and {b}"
            )));
        }
        if gmin < 0.0 {
            roots.push(bisect(a, star, |x| -gam(x)));
            roots.push(bisect(star, b, gam));
        }
        debug_assert!(width > 0.0);
    }
    let mut delta = 0.5 * top;
    while gam(top + delta) > 0.0 {
        delta *= 2.0;
    }
    roots.push(bisect(top, top + delta, |x| -gam(x)));
    Ok(roots)
}

fn polish_theta(model: &PopulationModel, nf: f64, mut w: Complex64) -> Complex64 {
    for _ in 0..40 {
        let mut g0 = Complex64::new(0.0, 0.0);
        let mut g1 = Complex64::new(0.0, 0.0);
        for (&g, &k) in model.gammas().iter().zip(model.multiplicities()) {
            let d = g - w;
            let t = k as f64 * g * g / (d * d);
            g0 += t;
            g1 += 2.0 * t / d;
        }
        let step = (g0 / nf - 1.0) / (g1 / nf);
        w -= step;
        if step.norm() < 1e-15 * w.norm() {
            break;
        }
    }
    w
}

/// All `2 M_bar` solutions of `Gamma(w) = 1`, sorted by real then imaginary
/// part. Real roots come from bracketing; the remaining ones form complex
/// conjugate pairs (they appear whenever two neighbouring atoms are close
/// relative to `sqrt(M/N)`) and are taken from the eigenvalues of a
/// `2 M_bar x 2 M_bar` linearization, then polished by Newton steps.
pub fn theta_roots(model: &PopulationModel, n: usize) -> Result<Vec<Complex64>> {
    let nf = n as f64;
    let mb = model.n_atoms();
    let real = theta_real_roots(model, n)?;
    let mut out: Vec<Complex64> = real.iter().map(|&x| Complex64::new(x, 0.0)).collect();
    let missing = 2 * mb - real.len();
    if missing > 0 {
        let gs = model.gammas();
        let a: Vec<f64> = gs
            .iter()
            .zip(model.multiplicities())
            .map(|(&g, &k)| (k as f64 * g * g / nf).sqrt())
            .collect();
        let t = DMatrix::from_fn(2 * mb, 2 * mb, |i, j| match (i < mb, j < mb) {
            (true, true) => if i == j { gs[i] } else { 0.0 },
            (true, false) => if j - mb == i { 1.0 } else { 0.0 },
            (false, true) => a[i - mb] * a[j],
            (false, false) => if i == j { gs[i - mb] } else { 0.0 },
        });
        let mut cands: Vec<Complex64> = linalg::real_eigenvalues(&t)
            .into_iter()
            .map(|w| polish_theta(model, nf, w))
            .filter(|w| w.im > 0.0)
            .collect();
        cands.sort_by(|x, y| y.im.total_cmp(&x.im));
        if cands.len() < missing / 2 {
            return Err(Error::ClusterOverlap(format!(
                "found {} real and {} complex theta roots, expected {}",
                real.len(),
                2 * cands.len(),
                2 * mb
            )));
        }
        for w in cands.into_iter().take(missing / 2) {
            out.push(w);
            out.push(w.conj());
        }
    }
    for w in &out {
        let res = (gamma_unchecked(model, n, *w, *w) - 1.0).norm();
        if res > 1e-8 * gamma_abs(model, n, *w).max(1.0) {
            return Err(Error::RootFinding(format!("theta root {w} has residual {res}")));
        }
    }
    out.sort_by(|x, y| x.re.total_cmp(&y.re).then(x.im.total_cmp(&y.im)));
    Ok(out)
}

/// Coefficients `a_m = K_m g_m^2 / (N (g_m - w))` of the secular equation
/// `sum_m a_m / (g_m - phi) = 1` whose roots are the `phi` roots at `w`.
fn secular_weights(model: &PopulationModel, n: usize, w: Complex64) -> Vec<Complex64> {
    model
        .gammas()
        .iter()
        .zip(model.multiplicities())
        .map(|(&g, &k)| k as f64 * g * g / (n as f64 * (g - w)))
        .collect()
}

fn secular_eval(gs: &[f64], a: &[Complex64], phi: Complex64) -> (Complex64, Complex64, Complex64) {
    let mut f = Complex64::new(-1.0, 0.0);
    let mut df = Complex64::new(0.0, 0.0);
    let mut q = Complex64::new(0.0, 0.0);
    for (&g, &am) in gs.iter().zip(a) {
        let inv = 1.0 / (g - phi);
        f += am * inv;
        df += am * inv * inv;
        q += inv;
    }
    (f, df, q)
}

fn newton_polish(gs: &[f64], a: &[Complex64], roots: &mut [Complex64]) {
    for r in roots.iter_mut() {
        for _ in 0..4 {
            let (f, df, _) = secular_eval(gs, a, *r);
            let step = f / df;
            if !step.re.is_finite() || !step.im.is_finite() {
                break;
            }
            *r -= step;
            if step.norm() <= 1e-16 * r.norm() {
                break;
            }
        }
    }
}

fn max_residual(gs: &[f64], a: &[Complex64], roots: &[Complex64]) -> f64 {
    roots.iter().map(|&r| secular_eval(gs, a, r).0.norm()).fold(0.0, f64::max)
}

/// The `M_bar` roots in `phi` of `Gamma(w, phi) = 1`.
///
/// Computed as the eigenvalues of `diag(g) - a 1^T` (equivalent to the
/// denominator-cleared polynomial but without forming its coefficients) and
/// refined with Newton steps on the secular equation.
pub fn phi_roots(model: &PopulationModel, n: usize, w: Complex64) -> Result<Vec<Complex64>> {
    pole_guard(model, w)?;
    let gs = model.gammas();
    let a = secular_weights(model, n, w);
    let mb = gs.len();
    let mat = CMatrix::from_fn(mb, mb, |i, j| {
        let d = if i == j { Complex64::new(gs[i], 0.0) } else { Complex64::new(0.0, 0.0) };
        d - a[i]
    });
    let mut roots = linalg::complex_eigenvalues(&mat)?;
    newton_polish(gs, &a, &mut roots);
    let res = max_residual(gs, &a, &roots);
    if !(res < 1e-9) {
        return Err(Error::RootFinding(format!("phi roots at {w} have residual {res}")));
    }
    Ok(roots)
}

/// `phi` roots at `w` obtained by Aberth iteration started from `guess`
/// (typically the roots at a neighbouring contour node). Returns `None` when
/// the iteration fails so the caller can fall back to [`phi_roots`].
pub(crate) fn phi_roots_warm(model: &PopulationModel, n: usize, w: Complex64, guess: &[Complex64]) -> Option<Vec<Complex64>> {
    let gs = model.gammas();
    let a = secular_weights(model, n, w);
    let mut z = guess.to_vec();
    let scale = gs[gs.len() - 1];
    for _ in 0..60 {
        let mut biggest: f64 = 0.0;
        for i in 0..z.len() {
            let (f, df, q) = secular_eval(gs, &a, z[i]);
            // p = q_poly * F with q_poly = prod (g - phi); p'/p = F'/F - sum 1/(g - phi).
            let ratio = df / f - q;
            let mut s = Complex64::new(0.0, 0.0);
            for j in 0..z.len() {
                if j != i {
                    s += 1.0 / (z[i] - z[j]);
                }
            }
            let step = 1.0 / (ratio - s);
            if !step.re.is_finite() || !step.im.is_finite() {
                return None;
            }
            z[i] -= step;
            biggest = biggest.max(step.norm());
        }
        if biggest <= 1e-15 * scale {
            break;
        }
    }
    let res = max_residual(gs, &a, &z);
    if !(res < 1e-11) {
        return None;
    }
    let mut min_sep = f64::INFINITY;
    for i in 0..z.len() {
        for j in 0..i {
            min_sep = min_sep.min((z[i] - z[j]).norm());
        }
    }
    if z.len() > 1 && min_sep < 1e-9 * scale {
        return None;
    }
    Some(z)
}
