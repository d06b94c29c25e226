//! Second-order mean and asymptotic covariance of `M (d_hat - d)`.
//!
//! Closed forms are provided for the Euclidean and Kullback-Leibler metrics
//! and for the log-Euclidean mean. Everything else goes through single
//! contour integrals in the population domain: the mean through
//! [`mean_generic_oracle`] and the covariance through [`var_general`], which
//! reduces each double contour integral to a single one by summing residues
//! at the `phi` roots of `Gamma(w, phi) = 1`.

use std::collections::{BTreeMap, HashMap};

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::contour::{Contour, QuadratureOptions};
use crate::error::{Error, Result};
use crate::estimators::{true_distance, FnShape, MetricId, MetricSpec, Regime, ScalarFn};
use crate::linalg::{cmul_transpose, CMatrix};
use crate::spectral::{self, gamma_abs, phi_roots, phi_roots_warm, theta_roots, Field, PopulationModel};

pub use crate::spectral::gamma_fn;

/// A set of independent sample sets (one per population model) together with
/// the list of pairs whose distances are estimated.
#[derive(Debug, Clone)]
pub struct PairSystem {
    pub models: Vec<PopulationModel>,
    pub n: Vec<usize>,
    pub pairs: Vec<(usize, usize)>,
    pub metric: MetricSpec,
    pub field: Field,
    pub quadrature: QuadratureOptions,
}

impl PairSystem {
    pub fn new(models: Vec<PopulationModel>, n: Vec<usize>, pairs: Vec<(usize, usize)>, metric: MetricSpec, field: Field) -> Result<Self> {
        let s = Self { models, n, pairs, metric, field, quadrature: QuadratureOptions::default() };
        s.validate()?;
        Ok(s)
    }

    /// Single pair `(0, 1)` built from two models.
    pub fn pair(m1: PopulationModel, n1: usize, m2: PopulationModel, n2: usize, metric: MetricSpec, field: Field) -> Result<Self> {
        Self::new(vec![m1, m2], vec![n1, n2], vec![(0, 1)], metric, field)
    }

    pub fn validate(&self) -> Result<()> {
        if self.models.is_empty() || self.models.len() != self.n.len() {
            return Err(Error::Config("each model needs exactly one sample count".into()));
        }
        let m = self.models[0].dim();
        if self.models.iter().any(|x| x.dim() != m) {
            return Err(Error::DimensionMismatch("all models must share the dimension".into()));
        }
        for &(i, j) in &self.pairs {
            if i >= self.models.len() || j >= self.models.len() || i == j {
                return Err(Error::Config(format!("invalid pair ({i}, {j})")));
            }
        }
        if self.pairs.is_empty() {
            return Err(Error::Config("no pairs given".into()));
        }
        if self.metric.regime == Regime::OversampledOnly || self.metric.analyticity_floor() >= 0.0 {
            for &nj in &self.n {
                if nj <= m {
                    return Err(Error::OversampleRequired(format!("metric {} needs N > M (N={nj}, M={m})", self.metric.id)));
                }
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.models[0].dim()
    }

    fn varsigma(&self) -> f64 {
        self.field.varsigma()
    }
}

/// Gaussian law of the estimated distance vector: `M (d_hat - d)` is
/// approximately `N(mean, cov)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AsymptoticLaw {
    pub d: DVector<f64>,
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub m: usize,
}

impl AsymptoticLaw {
    /// Approximate mean of `d_hat` itself: `d + mean / M`.
    pub fn estimate_mean(&self) -> DVector<f64> {
        &self.d + &self.mean / self.m as f64
    }

    /// Approximate covariance of `d_hat` itself: `cov / M^2`.
    pub fn estimate_cov(&self) -> DMatrix<f64> {
        &self.cov / (self.m as f64).powi(2)
    }
}

fn tr(a: &DMatrix<f64>) -> f64 {
    a.trace()
}

/// Euclidean second-order mean per pair.
pub fn mean_euclidean(system: &PairSystem) -> Result<DVector<f64>> {
    let s = system.varsigma();
    Ok(DVector::from_iterator(
        system.pairs.len(),
        system.pairs.iter().map(|&(i, j)| {
            let (ri, rj) = (system.models[i].covariance(), system.models[j].covariance());
            s * (tr(&(ri * ri)) / system.n[i] as f64 + tr(&(rj * rj)) / system.n[j] as f64)
        }),
    ))
}

/// Euclidean asymptotic variance per pair (diagonal of the covariance).
pub fn var_euclidean(system: &PairSystem) -> Result<DVector<f64>> {
    let s = system.varsigma();
    Ok(DVector::from_iterator(
        system.pairs.len(),
        system.pairs.iter().map(|&(i, j)| {
            let (r1, r2) = (system.models[i].covariance(), system.models[j].covariance());
            let (n1, n2) = (system.n[i] as f64, system.n[j] as f64);
            let d = r1 - r2;
            let a = tr(&(r1 * r1)) / n1;
            let b = tr(&(r2 * r2)) / n2;
            let v = 2.0 * a * a
                + 4.0 * tr(&(r1 * &d * r1 * &d)) / n1
                + 2.0 * b * b
                + 4.0 * tr(&(r2 * &d * r2 * &d)) / n2
                + 4.0 * tr(&(r1 * r2)).powi(2) / (n1 * n2);
            (1.0 + s) * v
        }),
    ))
}

fn inverse(m: &PopulationModel) -> DMatrix<f64> {
    m.matrix_function(|x| 1.0 / x)
}

fn require_oversampled(system: &PairSystem) -> Result<()> {
    let m = system.dim();
    for &(i, j) in &system.pairs {
        for k in [i, j] {
            if system.n[k] <= m {
                return Err(Error::OversampleRequired(format!("N={} must exceed M={m}", system.n[k])));
            }
        }
    }
    Ok(())
}

/// Kullback-Leibler second-order mean per pair.
pub fn mean_kl(system: &PairSystem) -> Result<DVector<f64>> {
    require_oversampled(system)?;
    let s = system.varsigma();
    let m = system.dim() as f64;
    Ok(DVector::from_iterator(
        system.pairs.len(),
        system.pairs.iter().map(|&(i, j)| {
            let (r1, r2) = (system.models[i].covariance(), system.models[j].covariance());
            let (n1, n2) = (system.n[i] as f64, system.n[j] as f64);
            let a = tr(&(inverse(&system.models[i]) * r2)) / (n1 - m);
            let b = tr(&(r1 * inverse(&system.models[j]))) / (n2 - m);
            0.5 * s * (a + b)
        }),
    ))
}

/// Kullback-Leibler asymptotic variance per pair.
pub fn var_kl(system: &PairSystem) -> Result<DVector<f64>> {
    require_oversampled(system)?;
    let s = system.varsigma();
    let m = system.dim() as f64;
    Ok(DVector::from_iterator(
        system.pairs.len(),
        system.pairs.iter().map(|&(i, j)| {
            let (r1, r2) = (system.models[i].covariance(), system.models[j].covariance());
            let (i1, i2) = (inverse(&system.models[i]), inverse(&system.models[j]));
            let (n1, n2) = (system.n[i] as f64, system.n[j] as f64);
            let a = r1 * &i2;
            let b = &i1 * r2;
            let v = -m / (2.0 * n1 * n2)
                + tr(&(&a * &a)) / (4.0 * (n2 - m) * n1)
                + tr(&(&b * &b)) / (4.0 * (n1 - m) * n2)
                + (tr(&a) / (n2 - m)).powi(2) / (4.0 * n1)
                + (tr(&b) / (n1 - m)).powi(2) / (4.0 * n2);
            (1.0 + s) * (n1 + n2 - m) * v
        }),
    ))
}

/// Log-Euclidean second-order mean per pair, from the residues at the
/// population eigenvalues and at the `theta` roots (complex ones included).
pub fn mean_le(system: &PairSystem) -> Result<DVector<f64>> {
    require_oversampled(system)?;
    let s = system.varsigma();
    let mut out = DVector::zeros(system.pairs.len());
    for (p, &(i, j)) in system.pairs.iter().enumerate() {
        let mut total = Complex64::new(0.0, 0.0);
        for (a, b) in [(i, j), (j, i)] {
            let ma = &system.models[a];
            let mb = &system.models[b];
            let na = system.n[a];
            let ov = ma.atom_overlap(mb);
            let logs_b: Vec<f64> = mb.gammas().iter().map(|g| g.ln()).collect();
            // tr[Pi_k^a (log R_b - c I)^2] = sum_q (log g_q - c)^2 ov[k, q]
            let proj_sq = |k: usize, c: Complex64| -> Complex64 {
                let mut t = Complex64::new(0.0, 0.0);
                for (q, lq) in logs_b.iter().enumerate() {
                    t += (*lq - c).powi(2) * ov[(k, q)];
                }
                t
            };
            for (k, (&g, &kk)) in ma.gammas().iter().zip(ma.multiplicities()).enumerate() {
                total -= proj_sq(k, Complex64::new(g.ln(), 0.0)) / kk as f64;
            }
            for th in theta_roots(ma, na)? {
                let lt = th.ln();
                let mut num = Complex64::new(0.0, 0.0);
                let mut den = Complex64::new(0.0, 0.0);
                for (k, (&g, &kk)) in ma.gammas().iter().zip(ma.multiplicities()).enumerate() {
                    let w = g * g / (g - th).powi(3);
                    num += w * proj_sq(k, lt);
                    den += w * kk as f64;
                }
                total += 0.5 * num / den;
            }
        }
        if total.im.abs() > 1e-8 * total.re.abs().max(1.0) {
            return Err(Error::Numerical(format!("log-Euclidean mean has imaginary part {}", total.im)));
        }
        out[p] = s * total.re;
    }
    Ok(out)
}

/// Contour in the population domain for model `model` with `n` samples: it
/// encloses every eigenvalue, every `theta` root and every `phi` root of any
/// node, which holds whenever `(1/N) sum K g^2 / |g - w|^2 < 1` along it.
pub fn omega_contour(model: &PopulationModel, n: usize, floor: f64) -> Result<Contour> {
    let gs = model.gammas();
    let th = theta_roots(model, n)?;
    let min_re = th.iter().map(|w| w.re).fold(gs[0], f64::min);
    let max_re = th.iter().map(|w| w.re).fold(gs[gs.len() - 1], f64::max);
    let probe = 512;
    let admissible = |c: &Contour| c.nodes(probe).iter().all(|nd| gamma_abs(model, n, nd.z) < 0.95);
    if min_re > 0.0 {
        let (mut lo, mut hi) = (0.9 * min_re, 1.1 * max_re);
        for _ in 0..20 {
            let mut b = 0.6;
            while b <= 3.0 {
                let c = Contour::log_ellipse(lo, hi, b);
                if admissible(&c) {
                    return Ok(c);
                }
                b *= 1.25;
            }
            lo *= 0.8;
            hi *= 1.25;
        }
    } else if floor < min_re {
        let width = max_re - min_re;
        let (mut lo, mut hi) = (min_re - 0.1 * width, max_re + 0.1 * width);
        for _ in 0..20 {
            let mut ratio = 0.5;
            while ratio <= 4.0 {
                let c = Contour::ellipse(lo, hi, ratio);
                if admissible(&c) && c.avoids_cut(floor) {
                    return Ok(c);
                }
                ratio *= 1.25;
            }
            lo -= 0.25 * width;
            hi += 0.25 * width;
        }
    } else {
        return Err(Error::Contour(format!(
            "theta roots reach {min_re}, which is not inside the analyticity region (floor {floor})"
        )));
    }
    Err(Error::Contour("could not find an admissible contour".into()))
}

fn system_contours(system: &PairSystem) -> Result<Vec<Option<Contour>>> {
    let floor = system.metric.analyticity_floor();
    let mut used = vec![false; system.models.len()];
    for &(i, j) in &system.pairs {
        used[i] = true;
        used[j] = true;
    }
    system
        .models
        .iter()
        .zip(&system.n)
        .zip(used)
        .map(|((m, &n), u)| if u { omega_contour(m, n, floor).map(Some) } else { Ok(None) })
        .collect()
}

/// `sum_b f(g_b^{other}) ov[k, b]`: the traces `tr[Pi_k f(R_other)]` for every atom `k`.
fn projected_traces(ov: &DMatrix<f64>, other: &PopulationModel, f: &ScalarFn) -> Vec<f64> {
    let vals: Vec<f64> = other.gammas().iter().map(|&g| f.eval_real(g)).collect();
    (0..ov.nrows()).map(|k| (0..ov.ncols()).map(|b| ov[(k, b)] * vals[b]).sum()).collect()
}

/// Second-order mean by direct quadrature of
/// `(1/2 pi i) int f(w) tr[R^2 Q^3(w) A] / (N (1 - Gamma(w))) dw`, summed over
/// both sides of every term.
pub fn mean_generic_oracle(system: &PairSystem) -> Result<DVector<f64>> {
    system.validate()?;
    let contours = system_contours(system)?;
    let s = system.varsigma();
    // Items attached to each model: (output pair, function, traces).
    let mut items: Vec<Vec<(usize, ScalarFn, Vec<f64>)>> = vec![Vec::new(); system.models.len()];
    for (p, &(i, j)) in system.pairs.iter().enumerate() {
        for t in &system.metric.terms {
            let ov_ij = system.models[i].atom_overlap(&system.models[j]);
            items[i].push((p, t.f1.clone(), projected_traces(&ov_ij, &system.models[j], &t.f2)));
            let ov_ji = system.models[j].atom_overlap(&system.models[i]);
            items[j].push((p, t.f2.clone(), projected_traces(&ov_ji, &system.models[i], &t.f1)));
        }
    }
    let mut out = vec![Complex64::new(0.0, 0.0); system.pairs.len()];
    for (x, list) in items.iter().enumerate() {
        if list.is_empty() {
            continue;
        }
        let model = &system.models[x];
        let n = system.n[x];
        let nf = n as f64;
        let contour = contours[x].expect("contour exists for used model");
        let gs = model.gammas();
        let (vals, _) = contour.integrate(list.len(), &system.quadrature, |node, acc| {
            let w = node.z;
            let den = nf * (1.0 - spectral::gamma_unchecked(model, n, w, w));
            let cubes: Vec<Complex64> = gs.iter().map(|&g| g * g / (g - w).powi(3)).collect();
            for (slot, (_, f, traces)) in list.iter().enumerate() {
                let mut t = Complex64::new(0.0, 0.0);
                for (c, tk) in cubes.iter().zip(traces) {
                    t += c * tk;
                }
                acc[slot] += f.eval(w) * t / den * node.weight;
            }
            Ok(())
        })?;
        for ((p, _, _), v) in list.iter().zip(vals) {
            out[*p] += v;
        }
    }
    let mut res = DVector::zeros(out.len());
    for (k, v) in out.iter().enumerate() {
        if v.im.abs() > 1e-6 * v.re.abs().max(1e-3) {
            return Err(Error::Numerical(format!("mean oracle has imaginary part {}", v.im)));
        }
        res[k] = s * v.re;
    }
    Ok(res)
}

/// The two single-variable reductions for one model and one ordered pair of
/// functions `(f, g)`: `plain[(k, r)]` and `tilde[(k, r)]` over atom indices.
#[derive(Debug, Clone)]
pub struct CalITables {
    pub plain: CMatrix,
    pub tilde: CMatrix,
}

/// Per-node quantities shared by every function pair.
struct NodeData {
    v: Vec<Complex64>,
    u1: CMatrix,
    u2: CMatrix,
    u3: CMatrix,
    phi: Vec<Complex64>,
    zp: Vec<Complex64>,
    uu: Vec<Complex64>,
    uu_prime: Vec<Complex64>,
}

fn node_data(model: &PopulationModel, n: usize, w: Complex64, phi: Vec<Complex64>) -> NodeData {
    let gs = model.gammas();
    let ks = model.multiplicities();
    let nf = n as f64;
    let mb = gs.len();
    let v: Vec<Complex64> = gs.iter().map(|&g| 1.0 / (g - w)).collect();
    let u1 = CMatrix::from_fn(mb, mb, |k, m| 1.0 / (gs[k] - phi[m]));
    let u2 = u1.map(|x| x * x);
    let u3 = CMatrix::from_fn(mb, mb, |k, m| u1[(k, m)] * u2[(k, m)]);
    let mut zp = Vec::with_capacity(mb);
    let mut uu = Vec::with_capacity(mb);
    let mut uu_prime = Vec::with_capacity(mb);
    for m in 0..mb {
        let mut g_pp = Complex64::new(0.0, 0.0);
        let mut g2 = Complex64::new(0.0, 0.0);
        for k in 0..mb {
            let c = ks[k] as f64 * gs[k] * gs[k];
            g_pp += c * u2[(k, m)];
            g2 += c * v[k] * u3[(k, m)];
        }
        let z = 1.0 - g_pp / nf;
        // d/dphi Gamma(w, phi) and its second derivative, at the root.
        let gamma1 = z / (w - phi[m]);
        let gamma2 = 2.0 * g2 / nf;
        zp.push(z);
        uu.push(-1.0 / gamma1);
        uu_prime.push(gamma2 / (2.0 * gamma1 * gamma1));
    }
    NodeData { v, u1, u2, u3, phi, zp, uu, uu_prime }
}

/// Computes [`CalITables`] for several `(f, g)` pairs of one model in a single
/// pass over the contour. `f` multiplies the outer variable and `g` the
/// variable eliminated by residues, so `g` must supply its derivative.
pub fn cal_i_tables(
    model: &PopulationModel,
    n: usize,
    fg: &[(ScalarFn, ScalarFn)],
    contour: &Contour,
    opts: &QuadratureOptions,
) -> Result<Vec<CalITables>> {
    let mb = model.n_atoms();
    let nf = n as f64;
    let block = mb * mb;
    // Distinct inner functions g, indexed by shape.
    let mut g_index: BTreeMap<FnShape, usize> = BTreeMap::new();
    let mut g_funcs: Vec<ScalarFn> = Vec::new();
    let mut pair_g = Vec::with_capacity(fg.len());
    for (_, g) in fg {
        let (_, shape) = g.shape();
        let idx = *g_index.entry(shape).or_insert_with(|| {
            g_funcs.push(g.unit());
            g_funcs.len() - 1
        });
        pair_g.push((idx, g.shape().0));
    }
    let mut warm: HashMap<usize, Vec<Complex64>> = HashMap::new();
    let (vals, _) = contour.integrate(2 * block * fg.len(), opts, |node, acc| {
        let w = node.z;
        let prev = (node.index + node.finest - node.step) % node.finest;
        let phi = match warm.get(&prev).and_then(|g| phi_roots_warm(model, n, w, g)) {
            Some(p) => p,
            None => phi_roots(model, n, w)?,
        };
        warm.insert(node.index, phi.clone());
        let nd = node_data(model, n, w, phi);
        let mut inner = Vec::with_capacity(g_funcs.len());
        let mut inner_t = Vec::with_capacity(g_funcs.len());
        for g in &g_funcs {
            let gv: Vec<Complex64> = nd.phi.iter().map(|&p| g.eval(p)).collect();
            let gd: Vec<Complex64> = nd.phi.iter().map(|&p| g.deriv(p)).collect();
            let scaled = CMatrix::from_fn(mb, mb, |k, m| nd.u1[(k, m)] * (gv[m] * (w - nd.phi[m]) / nd.zp[m]));
            inner.push(cmul_transpose(&scaled, &nd.u1));
            let x = CMatrix::from_fn(mb, 3 * mb, |k, c| {
                let m = c % mb;
                let a = gd[m] * nd.uu[m] * nd.uu[m] + 2.0 * gv[m] * nd.uu[m] * nd.uu_prime[m];
                let b = gv[m] * nd.uu[m] * nd.uu[m];
                match c / mb {
                    0 => nd.u1[(k, m)] * a,
                    1 => nd.u2[(k, m)] * b,
                    _ => nd.u1[(k, m)] * (2.0 * b),
                }
            });
            let y = CMatrix::from_fn(mb, 3 * mb, |r, c| {
                let m = c % mb;
                match c / mb {
                    0 | 1 => nd.u2[(r, m)],
                    _ => nd.u3[(r, m)],
                }
            });
            inner_t.push(-cmul_transpose(&x, &y));
        }
        for (p, (f, _)) in fg.iter().enumerate() {
            let (gi, gc) = pair_g[p];
            let s = f.eval(w) * gc * node.weight;
            let off = 2 * block * p;
            let a = &inner[gi];
            let b = &inner_t[gi];
            for k in 0..mb {
                let sk = s * nd.v[k];
                for r in 0..mb {
                    acc[off + k * mb + r] += sk * nd.v[r] * a[(k, r)];
                    acc[off + block + k * mb + r] += sk * nd.v[k] * nd.v[r] * b[(k, r)];
                }
            }
        }
        Ok(())
    })?;
    let gs = model.gammas();
    let ks = model.multiplicities();
    Ok(fg
        .iter()
        .enumerate()
        .map(|(p, (f, g))| {
            let off = 2 * block * p;
            let mut plain = CMatrix::from_fn(mb, mb, |k, r| vals[off + k * mb + r]);
            let mut tilde = CMatrix::from_fn(mb, mb, |k, r| vals[off + block + k * mb + r]);
            for k in 0..mb {
                let ratio = nf / ks[k] as f64;
                let fgk = f.eval_real(gs[k]) * g.eval_real(gs[k]);
                plain[(k, k)] -= Complex64::new(ratio * fgk / gs[k].powi(2), 0.0);
                tilde[(k, k)] += Complex64::new(ratio * ratio * fgk / gs[k].powi(4), 0.0);
            }
            CalITables { plain, tilde }
        })
        .collect())
}

/// Single entry `(plain(k, r), tilde(k, r))` of [`cal_i_tables`] on the default contour.
pub fn cal_i(model: &PopulationModel, n: usize, f: &ScalarFn, g: &ScalarFn, k: usize, r: usize) -> Result<(Complex64, Complex64)> {
    let floor = f.analyticity_floor().max(g.analyticity_floor());
    let contour = omega_contour(model, n, floor)?;
    let t = cal_i_tables(model, n, &[(f.clone(), g.clone())], &contour, &QuadratureOptions::default())?;
    Ok((t[0].plain[(k, r)], t[0].tilde[(k, r)]))
}

/// One side of a distance: the function applied to model `model`, paired with
/// the matrix function `other_fn(R_other)`.
#[derive(Clone)]
struct Side<'a> {
    model: usize,
    f: &'a ScalarFn,
    other: usize,
    other_fn: &'a ScalarFn,
}

type TableKey = (usize, FnShape, FnShape);

struct Workspace<'a> {
    system: &'a PairSystem,
    tables: HashMap<TableKey, CalITables>,
    rotated: HashMap<(usize, usize, FnShape), DMatrix<f64>>,
    overlaps: HashMap<(usize, usize), DMatrix<f64>>,
}

impl<'a> Workspace<'a> {
    /// `(coef, plain, tilde)` for functions `(f, g)` on model `x`; tables are
    /// stored once per unordered pair of shapes.
    fn table(&self, x: usize, f: &ScalarFn, g: &ScalarFn) -> (f64, CMatrix, CMatrix) {
        let (cf, sf) = f.shape();
        let (cg, sg) = g.shape();
        if sf <= sg {
            let t = &self.tables[&(x, sf, sg)];
            (cf * cg, t.plain.clone(), t.tilde.clone())
        } else {
            let t = &self.tables[&(x, sg, sf)];
            (cf * cg, t.plain.transpose(), t.tilde.transpose())
        }
    }

    /// `U_x^T f(R_y) U_x` for the unit-coefficient shape of `f`.
    fn rotated(&self, x: usize, y: usize, f: &ScalarFn) -> (f64, &DMatrix<f64>) {
        let (c, s) = f.shape();
        (c, &self.rotated[&(x, y, s)])
    }

    /// `I_x(f, g; A, B)`.
    fn i_term(&self, x: usize, f: &ScalarFn, g: &ScalarFn, a: (usize, &ScalarFn), b: (usize, &ScalarFn)) -> Complex64 {
        let model = &self.system.models[x];
        let nf = self.system.n[x] as f64;
        let (c, plain, tilde) = self.table(x, f, g);
        let (ca, at) = self.rotated(x, a.0, a.1);
        let (cb, bt) = self.rotated(x, b.0, b.1);
        let atoms = model.atom_of_columns();
        let gs = model.gammas();
        let m = model.dim();
        let mut first = Complex64::new(0.0, 0.0);
        for p in 0..m {
            for q in 0..m {
                let (kp, kq) = (atoms[p], atoms[q]);
                first += at[(p, q)] * bt[(q, p)] * gs[kp] * gs[kq] * plain[(kp, kq)];
            }
        }
        let mb = model.n_atoms();
        let mut ta = vec![0.0; mb];
        let mut tb = vec![0.0; mb];
        for p in 0..m {
            ta[atoms[p]] += at[(p, p)];
            tb[atoms[p]] += bt[(p, p)];
        }
        let mut second = Complex64::new(0.0, 0.0);
        for k in 0..mb {
            for r in 0..mb {
                second += (gs[k] * gs[r]).powi(2) * ta[k] * tb[r] * tilde[(k, r)];
            }
        }
        c * ca * cb * (first / nf + second / (nf * nf))
    }

    /// `J_{i,j}` product term for two models.
    fn j_term(&self, i: usize, j: usize, fi: &ScalarFn, gi: &ScalarFn, fj: &ScalarFn, gj: &ScalarFn) -> Complex64 {
        let (ci, pi, _) = self.table(i, fi, gi);
        let (cj, pj, _) = self.table(j, fj, gj);
        let mi = &self.system.models[i];
        let mj = &self.system.models[j];
        let ov = &self.overlaps[&(i, j)];
        let x = DMatrix::from_fn(ov.nrows(), ov.ncols(), |m, k| mi.gammas()[m] * ov[(m, k)] * mj.gammas()[k]);
        let xc = x.map(|v| Complex64::new(v, 0.0));
        let inner = &xc * pj * xc.transpose();
        let mut total = Complex64::new(0.0, 0.0);
        for m in 0..inner.nrows() {
            for n in 0..inner.ncols() {
                total += pi[(m, n)] * inner[(m, n)];
            }
        }
        ci * cj * total / (self.system.n[i] as f64 * self.system.n[j] as f64)
    }
}

fn sides<'a>(system: &'a PairSystem, pair: (usize, usize), term: usize) -> [Side<'a>; 2] {
    let t = &system.metric.terms[term];
    [
        Side { model: pair.0, f: &t.f1, other: pair.1, other_fn: &t.f2 },
        Side { model: pair.1, f: &t.f2, other: pair.0, other_fn: &t.f1 },
    ]
}

/// Asymptotic covariance matrix of `M d_hat` by single-integral reduction.
pub fn var_general(system: &PairSystem) -> Result<DMatrix<f64>> {
    system.validate()?;
    let contours = system_contours(system)?;
    let nt = system.metric.terms.len();
    // Function shapes needed per model, and rotated matrix functions.
    let mut shapes: Vec<BTreeMap<FnShape, ScalarFn>> = vec![BTreeMap::new(); system.models.len()];
    let mut rot_keys: BTreeMap<(usize, usize, FnShape), ScalarFn> = BTreeMap::new();
    for &(i, j) in &system.pairs {
        for l in 0..nt {
            for s in sides(system, (i, j), l) {
                shapes[s.model].insert(s.f.shape().1, s.f.unit());
                rot_keys.insert((s.model, s.other, s.other_fn.shape().1), s.other_fn.unit());
            }
        }
    }
    // Models with the same covariance and sample count share their tables.
    let canon: Vec<usize> = (0..system.models.len())
        .map(|x| {
            (0..x)
                .find(|&y| system.n[y] == system.n[x] && system.models[y].covariance() == system.models[x].covariance())
                .unwrap_or(x)
        })
        .collect();
    let mut merged: Vec<BTreeMap<FnShape, ScalarFn>> = vec![BTreeMap::new(); system.models.len()];
    for (x, s) in shapes.iter().enumerate() {
        merged[canon[x]].extend(s.iter().map(|(k, v)| (k.clone(), v.clone())));
    }
    let table_jobs: Vec<(usize, Vec<(ScalarFn, ScalarFn)>, Vec<(FnShape, FnShape)>)> = merged
        .iter()
        .enumerate()
        .filter(|(_, s)| !s.is_empty())
        .map(|(x, s)| {
            let list: Vec<(&FnShape, &ScalarFn)> = s.iter().collect();
            let mut fg = Vec::new();
            let mut keys = Vec::new();
            for a in 0..list.len() {
                for b in a..list.len() {
                    fg.push((list[a].1.clone(), list[b].1.clone()));
                    keys.push((list[a].0.clone(), list[b].0.clone()));
                }
            }
            (x, fg, keys)
        })
        .collect();
    let computed: Vec<Result<(usize, Vec<((FnShape, FnShape), CalITables)>)>> = table_jobs
        .par_iter()
        .map(|(x, fg, keys)| {
            let contour = contours[*x].expect("used model has a contour");
            let t = cal_i_tables(&system.models[*x], system.n[*x], fg, &contour, &system.quadrature)?;
            Ok((*x, keys.iter().cloned().zip(t).collect()))
        })
        .collect();
    let mut by_canon = HashMap::new();
    for c in computed {
        let (x, list) = c?;
        by_canon.insert(x, list);
    }
    let mut tables: HashMap<TableKey, CalITables> = HashMap::new();
    for (x, s) in shapes.iter().enumerate() {
        if s.is_empty() {
            continue;
        }
        for ((a, b), t) in &by_canon[&canon[x]] {
            tables.insert((x, a.clone(), b.clone()), t.clone());
        }
    }
    let mut rotated = HashMap::new();
    for ((x, y, shape), f) in rot_keys {
        let ux = system.models[x].basis();
        let my = &system.models[y];
        let wmat = ux.transpose() * my.basis();
        let vals: Vec<f64> = my.eigenvalues().iter().map(|&v| f.eval_real(v)).collect();
        let scaled = DMatrix::from_fn(wmat.nrows(), wmat.ncols(), |r, c| wmat[(r, c)] * vals[c]);
        rotated.insert((x, y, shape), scaled * wmat.transpose());
    }
    let mut overlaps = HashMap::new();
    for &(i, j) in &system.pairs {
        overlaps.entry((i, j)).or_insert_with(|| system.models[i].atom_overlap(&system.models[j]));
        overlaps.entry((j, i)).or_insert_with(|| system.models[j].atom_overlap(&system.models[i]));
    }
    let ws = Workspace { system, tables, rotated, overlaps };
    let np = system.pairs.len();
    let mut out = CMatrix::zeros(np, np);
    for a in 0..np {
        for b in a..np {
            let (pr, ps) = (system.pairs[a], system.pairs[b]);
            let mut total = Complex64::new(0.0, 0.0);
            for lr in 0..nt {
                for ls in 0..nt {
                    let sr = sides(system, pr, lr);
                    let ss = sides(system, ps, ls);
                    for x in &sr {
                        for y in &ss {
                            if x.model == y.model {
                                total += ws.i_term(x.model, x.f, y.f, (x.other, x.other_fn), (y.other, y.other_fn));
                            }
                        }
                    }
                    let (tr_, ts) = (&system.metric.terms[lr], &system.metric.terms[ls]);
                    if pr.0 == ps.0 && pr.1 == ps.1 {
                        total += ws.j_term(pr.0, pr.1, &tr_.f1, &ts.f1, &tr_.f2, &ts.f2);
                    }
                    if pr.0 == ps.1 && pr.1 == ps.0 {
                        total += ws.j_term(pr.0, pr.1, &tr_.f1, &ts.f2, &tr_.f2, &ts.f1);
                    }
                }
            }
            out[(a, b)] = total;
            out[(b, a)] = total;
        }
    }
    let scale = out.iter().map(|v| v.re.abs()).fold(0.0, f64::max).max(1e-300);
    let worst_im = out.iter().map(|v| v.im.abs()).fold(0.0, f64::max);
    if worst_im > 1e-6 * scale {
        return Err(Error::Numerical(format!("covariance has imaginary part {worst_im} (scale {scale})")));
    }
    Ok(out.map(|v| v.re) * (1.0 + system.varsigma()))
}

/// True distances, second-order mean and covariance for a system, using the
/// closed forms where they exist.
pub fn asymptotic_law(system: &PairSystem) -> Result<AsymptoticLaw> {
    system.validate()?;
    let d = DVector::from_iterator(
        system.pairs.len(),
        system
            .pairs
            .iter()
            .map(|&(i, j)| true_distance(&system.models[i], &system.models[j], &system.metric))
            .collect::<Result<Vec<_>>>()?,
    );
    let mean = match system.metric.id {
        MetricId::Euclidean => mean_euclidean(system)?,
        MetricId::KullbackLeibler => mean_kl(system)?,
        MetricId::LogEuclidean => mean_le(system)?,
        MetricId::Custom(_) => mean_generic_oracle(system)?,
    };
    let closed_diag = match system.metric.id {
        MetricId::Euclidean => Some(var_euclidean(system)?),
        MetricId::KullbackLeibler => Some(var_kl(system)?),
        _ => None,
    };
    let coupled = coupled_pairs(&system.pairs);
    let cov = match closed_diag {
        Some(diag) if !coupled => DMatrix::from_diagonal(&diag),
        Some(diag) => {
            let mut c = var_general(system)?;
            for k in 0..diag.len() {
                c[(k, k)] = diag[k];
            }
            c
        }
        None => var_general(system)?,
    };
    let law = AsymptoticLaw { d, mean, cov, m: system.dim() };
    check_law(&law)?;
    Ok(law)
}

fn coupled_pairs(pairs: &[(usize, usize)]) -> bool {
    for (a, p) in pairs.iter().enumerate() {
        for q in &pairs[a + 1..] {
            if p.0 == q.0 || p.0 == q.1 || p.1 == q.0 || p.1 == q.1 {
                return true;
            }
        }
    }
    false
}

fn check_law(law: &AsymptoticLaw) -> Result<()> {
    if law.d.iter().chain(law.mean.iter()).chain(law.cov.iter()).any(|v| !v.is_finite()) {
        return Err(Error::Numerical("asymptotic law has non-finite entries".into()));
    }
    let scale = law.cov.amax().max(1e-300);
    if (&law.cov - law.cov.transpose()).amax() > 1e-8 * scale {
        return Err(Error::Numerical("asymptotic covariance is not symmetric".into()));
    }
    let min_eig = law.cov.clone().symmetric_eigenvalues().min();
    if min_eig < -1e-8 * scale {
        return Err(Error::Numerical(format!("asymptotic covariance has negative eigenvalue {min_eig}")));
    }
    Ok(())
}
