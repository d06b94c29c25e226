//! Probability of correctly clustering a collection of sample covariance
//! matrices, predicted from the Gaussian law of the estimated distances and
//! measured by Monte Carlo.
//!
//! Clustering succeeds when every intra-cluster distance is strictly smaller
//! than every inter-cluster distance. Splitting on which intra-cluster
//! distance is the largest gives disjoint events, each of the form `A d < 0`
//! for a selection matrix `A`.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use statrs::function::erf::erfc;

use crate::asymptotics::{asymptotic_law, AsymptoticLaw, PairSystem};
use crate::error::{Error, Result};
use crate::estimators::{estimate_distance, EstimatorKind, MetricSpec};
use crate::linalg::sym_eigen_sorted;
use crate::spectral::{sample_gaussian_with, scm_spectrum, toeplitz_model, trial_rng, Field, PopulationModel};

/// Stream id used for the random generators of [`empirical_success`].
pub const CLUSTERING_STREAM: u64 = 3;

#[derive(Debug, Clone)]
pub struct ClusteringScenario {
    pub models: Vec<PopulationModel>,
    pub n: Vec<usize>,
    pub labels: Vec<usize>,
    pub metric: MetricSpec,
    pub field: Field,
}

impl ClusteringScenario {
    pub fn new(models: Vec<PopulationModel>, n: Vec<usize>, labels: Vec<usize>, metric: MetricSpec, field: Field) -> Result<Self> {
        let j = models.len();
        if j < 4 {
            return Err(Error::Config(format!("a clustering scenario needs at least 4 models, got {j}")));
        }
        if n.len() != j || labels.len() != j {
            return Err(Error::Config("models, sample counts and labels must have equal length".into()));
        }
        for a in 0..j {
            for b in a + 1..j {
                if labels[a] == labels[b] {
                    let (ra, rb) = (models[a].covariance(), models[b].covariance());
                    if (ra - rb).norm() > 1e-12 * ra.norm() {
                        return Err(Error::Config(format!("models {a} and {b} share a label but differ")));
                    }
                }
            }
        }
        let models = models.into_iter().map(|m| m.with_field(field)).collect();
        let s = Self { models, n, labels, metric, field };
        if s.intra_pairs().is_empty() || s.inter_pairs().is_empty() {
            return Err(Error::Config("scenario needs both intra- and inter-cluster pairs".into()));
        }
        Ok(s)
    }

    /// Toeplitz models with correlation `rhos[j]` and `ns[j]` samples; models
    /// with equal correlation form a cluster.
    pub fn toeplitz(rhos: &[f64], ns: &[usize], m: usize, metric: MetricSpec, field: Field) -> Result<Self> {
        let mut distinct: Vec<f64> = Vec::new();
        let mut labels = Vec::with_capacity(rhos.len());
        for &r in rhos {
            let idx = match distinct.iter().position(|&d| d == r) {
                Some(i) => i,
                None => {
                    distinct.push(r);
                    distinct.len() - 1
                }
            };
            labels.push(idx);
        }
        let models = rhos.iter().map(|&r| toeplitz_model(r, m, field)).collect::<Result<Vec<_>>>()?;
        Self::new(models, ns.to_vec(), labels, metric, field)
    }

    pub fn dim(&self) -> usize {
        self.models[0].dim()
    }

    pub fn intra_pairs(&self) -> Vec<(usize, usize)> {
        self.all_pairs().into_iter().filter(|&(a, b)| self.labels[a] == self.labels[b]).collect()
    }

    pub fn inter_pairs(&self) -> Vec<(usize, usize)> {
        self.all_pairs().into_iter().filter(|&(a, b)| self.labels[a] != self.labels[b]).collect()
    }

    fn all_pairs(&self) -> Vec<(usize, usize)> {
        let j = self.models.len();
        (0..j).flat_map(|a| (a + 1..j).map(move |b| (a, b))).collect()
    }

    /// Distance-vector ordering: intra-cluster pairs first, then inter-cluster.
    pub fn pairs(&self) -> Vec<(usize, usize)> {
        let mut p = self.intra_pairs();
        p.extend(self.inter_pairs());
        p
    }

    pub fn n_intra(&self) -> usize {
        self.intra_pairs().len()
    }

    pub fn pair_system(&self) -> Result<PairSystem> {
        PairSystem::new(self.models.clone(), self.n.clone(), self.pairs(), self.metric.clone(), self.field)
    }

    pub fn law(&self) -> Result<AsymptoticLaw> {
        asymptotic_law(&self.pair_system()?)
    }

    /// Whether a distance vector (in [`Self::pairs`] order) clusters correctly.
    pub fn is_success(&self, d: &[f64]) -> bool {
        let k = self.n_intra();
        let worst_intra = d[..k].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        d[k..].iter().all(|&v| worst_intra < v)
    }
}

/// Rows of `+1 / -1` pairs over the distance vector; row `(p, m)` encodes
/// the statistic `d[p] - d[m]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelectionMatrix {
    pub ncols: usize,
    pub rows: Vec<(usize, usize)>,
}

impl SelectionMatrix {
    pub fn new(ncols: usize, rows: Vec<(usize, usize)>) -> Result<Self> {
        if rows.iter().any(|&(p, m)| p >= ncols || m >= ncols || p == m) {
            return Err(Error::Config("selection rows need two distinct valid columns".into()));
        }
        Ok(Self { ncols, rows })
    }

    pub fn nrows(&self) -> usize {
        self.rows.len()
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut a = DMatrix::zeros(self.rows.len(), self.ncols);
        for (r, &(p, m)) in self.rows.iter().enumerate() {
            a[(r, p)] = 1.0;
            a[(r, m)] = -1.0;
        }
        a
    }
}

/// One matrix per intra-cluster distance `r`: rows `d_s - d_r` for the other
/// intra distances `s` and `d_r - d_t` for every inter distance `t`.
pub fn selection_matrices(scenario: &ClusteringScenario) -> Vec<SelectionMatrix> {
    let k = scenario.n_intra();
    let total = k + scenario.inter_pairs().len();
    (0..k)
        .map(|r| {
            let mut rows: Vec<(usize, usize)> = (0..k).filter(|&s| s != r).map(|s| (s, r)).collect();
            rows.extend((k..total).map(|t| (r, t)));
            SelectionMatrix { ncols: total, rows }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OrthantOptions {
    pub shifts: usize,
    pub points: usize,
    pub seed: u64,
}

impl Default for OrthantOptions {
    fn default() -> Self {
        Self { shifts: 8, points: 1 << 13, seed: 0x5eed }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OrthantEstimate {
    pub probability: f64,
    /// Three standard errors across the randomizations.
    pub error: f64,
}

fn norm_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

fn norm_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

const PRIMES: [u32; 40] = [
    2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53, 59, 61, 67, 71, 73, 79, 83, 89, 97, 101, 103, 107, 109, 113, 127,
    131, 137, 139, 149, 151, 157, 163, 167, 173,
];

/// Symmetrized copy of `cov` with eigenvalues floored at `1e-12 * trace`.
fn floored(cov: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = cov.nrows();
    let sym = 0.5 * (cov + cov.transpose());
    let trace = sym.trace();
    if !(trace > 0.0) {
        return Err(Error::Domain("covariance must have positive trace".into()));
    }
    let (vals, vecs) = sym_eigen_sorted(&sym);
    if vals[0] < -1e-8 * trace {
        return Err(Error::Domain(format!("covariance is not positive semidefinite (eigenvalue {})", vals[0])));
    }
    let floor = 1e-12 * trace;
    let d = DMatrix::from_diagonal(&DVector::from_iterator(n, vals.iter().map(|&v| v.max(floor))));
    Ok(&vecs * d * vecs.transpose())
}

/// `P(X < 0)` componentwise for `X ~ N(mean, cov)`, by separation of
/// variables with variable reordering and randomized Richtmyer lattices.
pub fn mvn_orthant(mean: &DVector<f64>, cov: &DMatrix<f64>, opts: &OrthantOptions) -> Result<OrthantEstimate> {
    let n = mean.len();
    if cov.nrows() != n || cov.ncols() != n {
        return Err(Error::DimensionMismatch("mean and covariance sizes differ".into()));
    }
    if n == 0 {
        return Ok(OrthantEstimate { probability: 1.0, error: 0.0 });
    }
    if n > PRIMES.len() + 1 {
        return Err(Error::Config(format!("orthant dimension {n} too large")));
    }
    let mut s = floored(cov)?;
    let mut b: Vec<f64> = mean.iter().map(|v| -v).collect();
    let mut c = DMatrix::<f64>::zeros(n, n);
    let mut y = vec![0.0; n];
    for i in 0..n {
        let mut best = (i, f64::INFINITY);
        for j in i..n {
            let s2 = s[(j, j)] - (0..i).map(|k| c[(j, k)].powi(2)).sum::<f64>();
            let sd = s2.max(1e-300).sqrt();
            let u = (b[j] - (0..i).map(|k| c[(j, k)] * y[k]).sum::<f64>()) / sd;
            let p = norm_cdf(u);
            if p < best.1 {
                best = (j, p);
            }
        }
        let j = best.0;
        if j != i {
            s.swap_rows(i, j);
            s.swap_columns(i, j);
            b.swap(i, j);
            c.swap_rows(i, j);
        }
        let s2 = s[(i, i)] - (0..i).map(|k| c[(i, k)].powi(2)).sum::<f64>();
        let cii = s2.max(1e-300).sqrt();
        c[(i, i)] = cii;
        for r in i + 1..n {
            c[(r, i)] = (s[(r, i)] - (0..i).map(|k| c[(r, k)] * c[(i, k)]).sum::<f64>()) / cii;
        }
        let u = (b[i] - (0..i).map(|k| c[(i, k)] * y[k]).sum::<f64>()) / cii;
        let p = norm_cdf(u);
        y[i] = if p > 1e-300 { -norm_pdf(u) / p } else { u };
    }
    let std_normal = Normal::standard();
    let alpha: Vec<f64> = PRIMES[..n.saturating_sub(1)].iter().map(|&p| (p as f64).sqrt().fract()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut means = Vec::with_capacity(opts.shifts);
    let mut z = vec![0.0; n];
    for _ in 0..opts.shifts {
        let shift: Vec<f64> = (0..alpha.len()).map(|_| rng.random::<f64>()).collect();
        let mut acc = 0.0;
        for k in 1..=opts.points {
            let mut f = 1.0;
            for i in 0..n {
                let t: f64 = (0..i).map(|q| c[(i, q)] * z[q]).sum();
                let e = norm_cdf((b[i] - t) / c[(i, i)]);
                f *= e;
                if f <= 0.0 {
                    break;
                }
                if i + 1 < n {
                    let x = (k as f64 * alpha[i] + shift[i]).fract();
                    let w = (2.0 * x - 1.0).abs();
                    let arg = (w * e).clamp(1e-16, 1.0 - 1e-16);
                    z[i] = std_normal.inverse_cdf(arg);
                }
            }
            acc += f;
        }
        means.push(acc / opts.points as f64);
    }
    let m = means.len() as f64;
    let p = means.iter().sum::<f64>() / m;
    let var = if means.len() > 1 { means.iter().map(|v| (v - p).powi(2)).sum::<f64>() / (m - 1.0) } else { 0.0 };
    Ok(OrthantEstimate { probability: p, error: 3.0 * (var / m).sqrt() })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SuccessProbability {
    /// Sum of the orthant probabilities clipped to `[0, 1]`.
    pub probability: f64,
    pub raw: f64,
    pub error: f64,
}

/// Gaussian prediction: `sum_A P(A d_hat < 0)` with `A d_hat` normal with
/// mean `A (d + mean / M)` and covariance `A cov A^T / M^2`.
pub fn success_probability(law: &AsymptoticLaw, scenario: &ClusteringScenario, opts: &OrthantOptions) -> Result<SuccessProbability> {
    let mu = law.estimate_mean();
    let sigma = law.estimate_cov();
    if mu.len() != scenario.pairs().len() {
        return Err(Error::DimensionMismatch("law does not cover the scenario's distances".into()));
    }
    let mut raw = 0.0;
    let mut err2 = 0.0;
    for sel in selection_matrices(scenario) {
        let a = sel.to_dense();
        let r = mvn_orthant(&(&a * &mu), &(&a * &sigma * a.transpose()), opts)?;
        raw += r.probability;
        err2 += r.error * r.error;
    }
    Ok(SuccessProbability { probability: raw.clamp(0.0, 1.0), raw, error: err2.sqrt() })
}

/// Draws from the Gaussian law of the distance vector and applies the success
/// rule directly. Also returns, per draw, how many selection events hold.
pub fn gaussian_law_success(law: &AsymptoticLaw, scenario: &ClusteringScenario, draws: usize, seed: u64) -> Result<(f64, usize)> {
    let mu = law.estimate_mean();
    let root = {
        let (vals, vecs) = sym_eigen_sorted(&floored(&law.estimate_cov())?);
        let d = DMatrix::from_diagonal(&DVector::from_iterator(vals.len(), vals.iter().map(|v| v.max(0.0).sqrt())));
        &vecs * d * vecs.transpose()
    };
    let sels: Vec<DMatrix<f64>> = selection_matrices(scenario).iter().map(|s| s.to_dense()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut hits = 0usize;
    let mut max_events = 0usize;
    for _ in 0..draws {
        let x = DVector::from_fn(mu.len(), |_, _| rng.sample::<f64, _>(StandardNormal));
        let d = &mu + &root * x;
        if scenario.is_success(d.as_slice()) {
            hits += 1;
        }
        let events = sels.iter().filter(|a| (*a * &d).iter().all(|&v| v < 0.0)).count();
        max_events = max_events.max(events);
    }
    Ok((hits as f64 / draws as f64, max_events))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmpiricalSuccess {
    pub successes: usize,
    pub trials: usize,
    pub probability: f64,
    pub std_error: f64,
}

/// Monte Carlo frequency of correct clustering with fresh Gaussian data in
/// every trial. Trial `t` draws from `trial_rng(seed, CLUSTERING_STREAM, t)`.
pub fn empirical_success(scenario: &ClusteringScenario, trials: usize, kind: EstimatorKind, seed: u64) -> Result<EmpiricalSuccess> {
    if trials == 0 {
        return Err(Error::Config("trials must be at least 1".into()));
    }
    let pairs = scenario.pairs();
    let outcomes: Vec<Result<bool>> = (0..trials)
        .into_par_iter()
        .map(|t| {
            let mut rng = trial_rng(seed, CLUSTERING_STREAM, t as u64);
            let spectra = scenario
                .models
                .iter()
                .zip(&scenario.n)
                .map(|(m, &n)| scm_spectrum(&sample_gaussian_with(m, n, &mut rng)?))
                .collect::<Result<Vec<_>>>()?;
            let d = pairs
                .iter()
                .map(|&(i, j)| estimate_distance(&spectra[i], &spectra[j], &scenario.metric, kind).map(|e| e.value))
                .collect::<Result<Vec<_>>>()?;
            Ok(scenario.is_success(&d))
        })
        .collect();
    let mut successes = 0;
    for o in outcomes {
        if o? {
            successes += 1;
        }
    }
    let p = successes as f64 / trials as f64;
    Ok(EmpiricalSuccess { successes, trials, probability: p, std_error: (p * (1.0 - p) / trials as f64).sqrt() })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn six(metric: MetricSpec) -> ClusteringScenario {
        ClusteringScenario::toeplitz(&[0.3, 0.3, 0.6, 0.6, 0.9, 0.9], &[30; 6], 6, metric, Field::Real).unwrap()
    }

    #[test]
    fn selection_shapes() {
        let s = six(MetricSpec::euclidean());
        let sels = selection_matrices(&s);
        assert_eq!(sels.len(), 3);
        for a in &sels {
            let d = a.to_dense();
            assert_eq!((d.nrows(), d.ncols()), (14, 15));
            for r in 0..d.nrows() {
                assert_eq!(d.row(r).sum(), 0.0);
                assert_eq!(d.row(r).iter().filter(|&&v| v == 1.0).count(), 1);
                assert_eq!(d.row(r).iter().filter(|&&v| v == -1.0).count(), 1);
            }
        }
        let s4 = ClusteringScenario::toeplitz(&[0.2, 0.2, 0.7, 0.7], &[20; 4], 5, MetricSpec::euclidean(), Field::Real).unwrap();
        let sels = selection_matrices(&s4);
        assert_eq!(sels.len(), 2);
        assert!(sels.iter().all(|a| a.nrows() == 5 && a.ncols == 6));
    }

    #[test]
    fn scenario_validation() {
        assert!(ClusteringScenario::toeplitz(&[0.2, 0.2, 0.7], &[20; 3], 5, MetricSpec::euclidean(), Field::Real).is_err());
        let m1 = toeplitz_model(0.2, 4, Field::Real).unwrap();
        let m2 = toeplitz_model(0.5, 4, Field::Real).unwrap();
        let r = ClusteringScenario::new(
            vec![m1.clone(), m2.clone(), m1, m2],
            vec![10; 4],
            vec![0, 0, 1, 1],
            MetricSpec::euclidean(),
            Field::Real,
        );
        assert!(r.is_err());
        assert!(SelectionMatrix::new(3, vec![(0, 3)]).is_err());
    }

    #[test]
    fn orthant_low_dimensional_values() {
        let o = OrthantOptions::default();
        let p = mvn_orthant(&DVector::from_element(1, 0.0), &DMatrix::identity(1, 1), &o).unwrap();
        assert!((p.probability - 0.5).abs() < 1e-12);
        let cov = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.5, 1.0]);
        let p = mvn_orthant(&DVector::zeros(2), &cov, &o).unwrap();
        assert!((p.probability - 1.0 / 3.0).abs() < 1e-4, "{p:?}");
        assert!(p.error < 1e-3);
        let p = mvn_orthant(&DVector::from_element(1, 1.0), &DMatrix::from_element(1, 1, 4.0), &o).unwrap();
        assert!((p.probability - norm_cdf(-0.5)).abs() < 1e-12);
    }

    #[test]
    fn orthant_rejects_indefinite() {
        let cov = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(mvn_orthant(&DVector::zeros(2), &cov, &OrthantOptions::default()).is_err());
    }

    #[test]
    fn orthant_handles_rank_deficiency() {
        // Two identical coordinates: P(X < 0, X < 0) = P(X < 0).
        let cov = DMatrix::from_element(2, 2, 1.0);
        let p = mvn_orthant(&DVector::from_element(2, -0.3), &cov, &OrthantOptions::default()).unwrap();
        assert!((p.probability - norm_cdf(0.3)).abs() < 2e-3, "{p:?}");
    }

    #[test]
    fn separated_clusters_always_succeed() {
        let s = six(MetricSpec::euclidean());
        let k = s.n_intra();
        let np = s.pairs().len();
        let d = DVector::from_fn(np, |i, _| if i < k { 1.0 } else { 1e6 });
        let law = AsymptoticLaw { d, mean: DVector::zeros(np), cov: DMatrix::identity(np, np), m: 6 };
        let p = success_probability(&law, &s, &OrthantOptions::default()).unwrap();
        assert!(p.probability >= 1.0 - 1e-6 && p.probability <= 1.0);
        let e = ClusteringScenario::toeplitz(&[0.05, 0.05, 0.95, 0.95], &[4000; 4], 4, MetricSpec::euclidean(), Field::Real).unwrap();
        let r = empirical_success(&e, 1, EstimatorKind::Consistent, 1).unwrap();
        assert_eq!(r.probability, 1.0);
    }

    #[test]
    fn theory_matches_gaussian_sampling() {
        let s = six(MetricSpec::euclidean());
        let law = s.law().unwrap();
        let p = success_probability(&law, &s, &OrthantOptions::default()).unwrap();
        let (mc, max_events) = gaussian_law_success(&law, &s, 100_000, 11).unwrap();
        let se = (mc * (1.0 - mc) / 1e5).sqrt().max(1e-4);
        assert!((p.raw - mc).abs() < 3.0 * se + p.error, "{p:?} vs {mc}");
        assert!(max_events <= 1);
    }

    #[test]
    fn ties_count_as_failures() {
        let s = six(MetricSpec::euclidean());
        let mut d = vec![1.0; 15];
        assert!(!s.is_success(&d));
        d[..3].copy_from_slice(&[0.5, 0.5, 0.5]);
        assert!(s.is_success(&d));
    }
}
