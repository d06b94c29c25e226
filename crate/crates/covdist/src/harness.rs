//! Seeded experiment runner behind the command line tool.
//!
//! An [`ExperimentConfig`] is parsed from JSON and dispatched to one of the
//! runners below. Every runner is a pure function of the configuration: trial
//! `t` of a given experiment always draws from the same generator, and results
//! are gathered by trial index, so the output never depends on the number of
//! worker threads.

use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::asymptotics::{asymptotic_law, AsymptoticLaw, PairSystem};
use crate::clustering::{empirical_success, success_probability, ClusteringScenario, OrthantOptions};
use crate::contour::QuadratureOptions;
use crate::error::{Error, Result};
use crate::estimators::{estimate_distance, true_distance, EstimatorKind, MetricId, MetricSpec};
use crate::spectral::{
    sample_gaussian_with, scm_spectrum, toeplitz_model, trial_rng, Field, PopulationModel, SampleSet, SampleSpectrum,
};

pub const VERSION: &str = concat!("covdist ", env!("CARGO_PKG_VERSION"));

const HISTOGRAM_STREAM: u64 = 1 << 32;
const MSE_STREAM: u64 = 2 << 32;
const ESTIMATE_STREAM: u64 = 4 << 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExperimentKind {
    Histogram,
    Mse,
    Clustering,
    Estimate,
    Asymptotics,
}

impl std::fmt::Display for ExperimentKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Self::Histogram => "histogram",
            Self::Mse => "mse",
            Self::Clustering => "clustering",
            Self::Estimate => "estimate",
            Self::Asymptotics => "asymptotics",
        };
        f.write_str(s)
    }
}

fn default_field() -> Field {
    Field::Real
}

fn default_metrics() -> Vec<MetricId> {
    vec![MetricId::Euclidean, MetricId::KullbackLeibler, MetricId::LogEuclidean]
}

fn default_estimators() -> Vec<EstimatorKind> {
    vec![EstimatorKind::PlugIn, EstimatorKind::Consistent]
}

fn default_trials() -> usize {
    1000
}

/// JSON experiment description. Models are Toeplitz matrices with first row
/// `(1, rho, rho^2, ...)`; sample counts come either from `n` directly or from
/// `N = round(M / c)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    #[serde(default)]
    pub rho: Vec<f64>,
    /// Dimensions `M`, ascending.
    #[serde(default, alias = "M")]
    pub m: Vec<usize>,
    /// Ratios `c_j = M / N_j`: one value for all models or one per model.
    #[serde(default)]
    pub c: Vec<f64>,
    /// Several `c` lists, one clustering curve each.
    #[serde(default)]
    pub c_profiles: Vec<Vec<f64>>,
    /// Sample counts: per model for `estimate`/`asymptotics`, a grid for `mse`.
    #[serde(default, alias = "N")]
    pub n: Vec<usize>,
    #[serde(default = "default_field")]
    pub field: Field,
    #[serde(default = "default_metrics")]
    pub metrics: Vec<MetricId>,
    #[serde(default = "default_estimators")]
    pub estimators: Vec<EstimatorKind>,
    #[serde(default = "default_trials")]
    pub trials: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub output: Option<PathBuf>,
    #[serde(default)]
    pub quadrature: QuadratureOptions,
    #[serde(default)]
    pub orthant: OrthantOptions,
}

impl ExperimentConfig {
    /// Minimal configuration of the given kind; every list is empty.
    pub fn new(kind: ExperimentKind) -> Self {
        Self {
            kind,
            rho: Vec::new(),
            m: Vec::new(),
            c: Vec::new(),
            c_profiles: Vec::new(),
            n: Vec::new(),
            field: default_field(),
            metrics: default_metrics(),
            estimators: default_estimators(),
            trials: default_trials(),
            seed: 0,
            output: None,
            quadrature: QuadratureOptions::default(),
            orthant: OrthantOptions::default(),
        }
    }

    /// Parses JSON; syntax and schema errors carry line and column.
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text)
            .map_err(|e| Error::Config(format!("line {}, column {}: {e}", e.line(), e.column())))
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.trials == 0 {
            return bad("trials must be at least 1".into());
        }
        if self.metrics.is_empty() {
            return bad("at least one metric is required".into());
        }
        if let Some(r) = self.rho.iter().find(|r| !(r.abs() < 1.0)) {
            return bad(format!("rho must lie in (-1, 1), got {r}"));
        }
        for c in self.c.iter().chain(self.c_profiles.iter().flatten()) {
            if !(*c > 0.0) || *c == 1.0 || !c.is_finite() {
                return bad(format!("every c must be positive and different from 1, got {c}"));
            }
        }
        if self.m.windows(2).any(|w| w[0] >= w[1]) {
            return bad("the M list must be strictly ascending".into());
        }
        if self.m.contains(&0) {
            return bad("M must be positive".into());
        }
        self.quadrature.validate()?;
        let need_rho = |k: usize, exact: bool| {
            if (exact && self.rho.len() != k) || self.rho.len() < k {
                Err(Error::Config(format!(
                    "{} needs {}{k} rho values, got {}",
                    self.kind,
                    if exact { "" } else { "at least " },
                    self.rho.len()
                )))
            } else {
                Ok(())
            }
        };
        match self.kind {
            ExperimentKind::Histogram => {
                need_rho(2, true)?;
                self.check_c(2)?;
                if self.m.is_empty() {
                    return bad("histogram needs at least one M".into());
                }
            }
            ExperimentKind::Mse => {
                need_rho(2, true)?;
                if self.c.len() != 1 {
                    return bad("mse needs a single c".into());
                }
                if self.n.is_empty() == self.m.is_empty() {
                    return bad("mse needs either an N grid or an M grid".into());
                }
            }
            ExperimentKind::Clustering => {
                need_rho(4, false)?;
                if self.m.is_empty() {
                    return bad("clustering needs at least one M".into());
                }
                for p in self.profiles() {
                    if p.len() != 1 && p.len() != self.rho.len() {
                        return bad(format!("c profile {p:?} must have 1 or {} entries", self.rho.len()));
                    }
                }
                if self.profiles().is_empty() {
                    return bad("clustering needs c or c_profiles".into());
                }
            }
            ExperimentKind::Estimate | ExperimentKind::Asymptotics => {
                need_rho(2, self.kind == ExperimentKind::Estimate)?;
                if self.m.len() != 1 {
                    return bad(format!("{} needs exactly one M", self.kind));
                }
                if self.n.is_empty() {
                    self.check_c(self.rho.len())?;
                } else if self.n.len() != self.rho.len() {
                    return bad(format!("n must list one sample count per model ({})", self.rho.len()));
                }
            }
        }
        Ok(())
    }

    fn check_c(&self, models: usize) -> Result<()> {
        if self.c.len() != 1 && self.c.len() != models {
            return Err(Error::Config(format!("c must have 1 or {models} entries, got {}", self.c.len())));
        }
        Ok(())
    }

    fn profiles(&self) -> Vec<Vec<f64>> {
        if self.c_profiles.is_empty() {
            if self.c.is_empty() {
                Vec::new()
            } else {
                vec![self.c.clone()]
            }
        } else {
            self.c_profiles.clone()
        }
    }

    fn models(&self, m: usize) -> Result<Vec<PopulationModel>> {
        self.rho.iter().map(|&r| toeplitz_model(r, m, self.field)).collect()
    }

    /// Per-model sample counts for dimension `m`.
    fn sample_counts(&self, m: usize, profile: &[f64]) -> Vec<usize> {
        if !self.n.is_empty() && self.kind != ExperimentKind::Mse {
            return self.n.clone();
        }
        (0..self.rho.len())
            .map(|j| {
                let c = if profile.len() == 1 { profile[0] } else { profile[j] };
                ((m as f64 / c).round() as usize).max(1)
            })
            .collect()
    }

    fn metric_specs(&self) -> Result<Vec<MetricSpec>> {
        self.metrics.iter().map(MetricSpec::from_id).collect()
    }
}

/// Ordered table of JSON cells, written as CSV or JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultTable {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<Value>>,
}

impl ResultTable {
    fn new(columns: &[&str]) -> Self {
        Self { columns: columns.iter().map(|s| s.to_string()).collect(), rows: Vec::new() }
    }

    fn push(&mut self, row: Vec<Value>) {
        debug_assert_eq!(row.len(), self.columns.len());
        self.rows.push(row);
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == name)
    }

    /// Cell as a float, if the column exists and holds a number.
    pub fn get_f64(&self, row: usize, name: &str) -> Option<f64> {
        self.column(name).and_then(|c| self.rows.get(row)?.get(c)?.as_f64())
    }

    fn with_metadata(mut self, cfg: &ExperimentConfig) -> Self {
        let q = &cfg.quadrature;
        let quad = format!("{}/{}/{:e}", q.initial_nodes, q.max_nodes, q.rel_tol);
        self.columns.extend(["seed", "trials", "quadrature", "version"].map(String::from));
        for r in &mut self.rows {
            r.extend([json!(cfg.seed), json!(cfg.trials), json!(quad), json!(VERSION)]);
        }
        self
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let io = |e: csv::Error| Error::Numerical(format!("csv output: {e}"));
        w.write_record(&self.columns).map_err(io)?;
        for r in &self.rows {
            w.write_record(r.iter().map(cell_text)).map_err(io)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Numerical(format!("csv output: {e}")))?;
        String::from_utf8(bytes).map_err(|e| Error::Numerical(e.to_string()))
    }
}

fn cell_text(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        Value::Null => String::new(),
        other => other.to_string(),
    }
}

/// Table plus optional nested data (samples, curves, covariance matrices).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentOutput {
    pub kind: ExperimentKind,
    pub table: ResultTable,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub details: Option<Value>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputFormat {
    Csv,
    Json,
}

impl ExperimentOutput {
    pub fn render(&self, format: OutputFormat) -> Result<String> {
        match format {
            OutputFormat::Csv => self.table.to_csv(),
            OutputFormat::Json => serde_json::to_string_pretty(self)
                .map(|s| s + "\n")
                .map_err(|e| Error::Numerical(e.to_string())),
        }
    }
}

/// Validates the configuration and runs the experiment it describes.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutput> {
    cfg.validate()?;
    match cfg.kind {
        ExperimentKind::Histogram => run_histogram(cfg),
        ExperimentKind::Mse => run_mse(cfg),
        ExperimentKind::Clustering => run_clustering(cfg),
        ExperimentKind::Estimate => run_estimate(cfg),
        ExperimentKind::Asymptotics => run_asymptotics(cfg),
    }
}

fn draw_spectra(models: &[PopulationModel], ns: &[usize], master: u64, stream: u64, trial: u64) -> Result<Vec<SampleSpectrum>> {
    let mut rng = trial_rng(master, stream, trial);
    models.iter().zip(ns).map(|(m, &n)| scm_spectrum(&sample_gaussian_with(m, n, &mut rng)?)).collect()
}

fn pair_system(cfg: &ExperimentConfig, models: Vec<PopulationModel>, ns: Vec<usize>, pairs: Vec<(usize, usize)>, metric: MetricSpec) -> Result<PairSystem> {
    let mut s = PairSystem::new(models, ns, pairs, metric, cfg.field)?;
    s.quadrature = cfg.quadrature;
    Ok(s)
}

/// Kolmogorov-Smirnov distance between a sample and `N(mean, sd^2)`.
pub fn ks_normal(samples: &[f64], mean: f64, sd: f64) -> Result<f64> {
    let dist = Normal::new(mean, sd).map_err(|e| Error::Domain(format!("normal law: {e}")))?;
    let mut x = samples.to_vec();
    x.sort_by(f64::total_cmp);
    let n = x.len() as f64;
    Ok(x.iter()
        .enumerate()
        .map(|(i, &v)| {
            let f = dist.cdf(v);
            (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max))
}

fn mean_var(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = if x.len() > 1 { x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    (mean, var)
}

/// Fluctuations of consistent estimates around the predicted Gaussian law.
pub fn run_histogram(cfg: &ExperimentConfig) -> Result<ExperimentOutput> {
    cfg.validate()?;
    let specs = cfg.metric_specs()?;
    let mut table = ResultTable::new(&[
        "metric", "M", "N1", "N2", "d", "mean", "var", "pred_mean", "pred_sd", "emp_mean", "emp_sd", "z_mean", "z_var", "ks",
    ]);
    let mut details = Vec::new();
    for (mi, &m) in cfg.m.iter().enumerate() {
        let models = cfg.models(m)?;
        let ns = cfg.sample_counts(m, &cfg.c);
        let samples: Vec<Vec<f64>> = (0..cfg.trials)
            .into_par_iter()
            .map(|t| {
                let sp = draw_spectra(&models, &ns, cfg.seed, HISTOGRAM_STREAM + mi as u64, t as u64)?;
                specs
                    .iter()
                    .map(|s| estimate_distance(&sp[0], &sp[1], s, EstimatorKind::Consistent).map(|e| e.value))
                    .collect::<Result<Vec<f64>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        for (k, spec) in specs.iter().enumerate() {
            let law = asymptotic_law(&pair_system(cfg, models.clone(), ns.clone(), vec![(0, 1)], spec.clone())?)?;
            let x: Vec<f64> = samples.iter().map(|s| s[k]).collect();
            let mf = m as f64;
            let pm = law.d[0] + law.mean[0] / mf;
            let psd = law.cov[(0, 0)].sqrt() / mf;
            let (em, ev) = mean_var(&x);
            let z: Vec<f64> = x.iter().map(|v| (v - pm) / psd).collect();
            let (zm, zv) = mean_var(&z);
            let ks = ks_normal(&x, pm, psd)?;
            table.push(vec![
                json!(spec.id.to_string()),
                json!(m),
                json!(ns[0]),
                json!(ns[1]),
                json!(law.d[0]),
                json!(law.mean[0]),
                json!(law.cov[(0, 0)]),
                json!(pm),
                json!(psd),
                json!(em),
                json!(ev.sqrt()),
                json!(zm),
                json!(zv),
                json!(ks),
            ]);
            let grid: Vec<[f64; 2]> = (0..=100)
                .map(|i| {
                    let v = pm + psd * (-4.0 + 8.0 * i as f64 / 100.0);
                    let u = (v - pm) / psd;
                    [v, (-0.5 * u * u).exp() / (psd * (2.0 * std::f64::consts::PI).sqrt())]
                })
                .collect();
            details.push(json!({ "metric": spec.id.to_string(), "M": m, "samples": x, "gaussian_curve": grid }));
        }
    }
    Ok(ExperimentOutput { kind: cfg.kind, table: table.with_metadata(cfg), details: Some(Value::Array(details)) })
}

/// Mean squared error of each estimator over a grid of sample counts, with
/// `M = round(c N)`, or over a grid of dimensions with `N = round(M / c)`.
/// The error is normalized by `d^2` unless the two models coincide or the
/// distance vanishes at that dimension.
pub fn run_mse(cfg: &ExperimentConfig) -> Result<ExperimentOutput> {
    cfg.validate()?;
    let specs = cfg.metric_specs()?;
    let normalized = cfg.rho[0] != cfg.rho[1];
    let mut table = ResultTable::new(&["metric", "estimator", "N", "M", "d", "mse", "normalized"]);
    let grid: Vec<(usize, usize)> = if cfg.n.is_empty() {
        cfg.m.iter().map(|&m| (((m as f64 / cfg.c[0]).round() as usize).max(1), m)).collect()
    } else {
        cfg.n.iter().map(|&n| (n, ((cfg.c[0] * n as f64).round() as usize).max(1))).collect()
    };
    for (ni, &(n, m)) in grid.iter().enumerate() {
        let models = cfg.models(m)?;
        let ns = vec![n, n];
        let truth = specs.iter().map(|s| true_distance(&models[0], &models[1], s)).collect::<Result<Vec<_>>>()?;
        // values[t][metric][estimator]
        let values: Vec<Vec<Vec<f64>>> = (0..cfg.trials)
            .into_par_iter()
            .map(|t| {
                let sp = draw_spectra(&models, &ns, cfg.seed, MSE_STREAM + ni as u64, t as u64)?;
                specs
                    .iter()
                    .map(|s| {
                        cfg.estimators
                            .iter()
                            .map(|&k| estimate_distance(&sp[0], &sp[1], s, k).map(|e| e.value))
                            .collect::<Result<Vec<_>>>()
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        for (k, spec) in specs.iter().enumerate() {
            for (e, kind) in cfg.estimators.iter().enumerate() {
                let d = truth[k];
                let norm = normalized && d != 0.0;
                let scale = if norm { d * d } else { 1.0 };
                let mse = values.iter().map(|v| (v[k][e] - d).powi(2)).sum::<f64>() / cfg.trials as f64 / scale;
                table.push(vec![
                    json!(spec.id.to_string()),
                    serde_json::to_value(kind).map_err(|e| Error::Numerical(e.to_string()))?,
                    json!(n),
                    json!(m),
                    json!(d),
                    json!(mse),
                    json!(norm),
                ]);
            }
        }
    }
    Ok(ExperimentOutput { kind: cfg.kind, table: table.with_metadata(cfg), details: None })
}

fn profile_label(p: &[f64]) -> String {
    p.iter().map(|c| format!("{c:.4}")).collect::<Vec<_>>().join("/")
}

/// Predicted and empirical probability of correct clustering per metric,
/// dimension and `c` profile.
pub fn run_clustering(cfg: &ExperimentConfig) -> Result<ExperimentOutput> {
    cfg.validate()?;
    let specs = cfg.metric_specs()?;
    let mut table = ResultTable::new(&[
        "metric", "estimator", "M", "c_profile", "N", "theory", "theory_error", "empirical", "std_error", "ci_low", "ci_high",
    ]);
    let mut point = 0u64;
    for spec in &specs {
        for &m in &cfg.m {
            for profile in cfg.profiles() {
                let ns = cfg.sample_counts(m, &profile);
                let scenario = ClusteringScenario::toeplitz(&cfg.rho, &ns, m, spec.clone(), cfg.field)?;
                let mut system = scenario.pair_system()?;
                system.quadrature = cfg.quadrature;
                let law = asymptotic_law(&system)?;
                let theory = success_probability(&law, &scenario, &cfg.orthant)?;
                for &kind in &cfg.estimators {
                    let emp = empirical_success(&scenario, cfg.trials, kind, cfg.seed.wrapping_add(point))?;
                    let half = 1.96 * emp.std_error;
                    table.push(vec![
                        json!(spec.id.to_string()),
                        serde_json::to_value(kind).map_err(|e| Error::Numerical(e.to_string()))?,
                        json!(m),
                        json!(profile_label(&profile)),
                        json!(ns.iter().map(|n| n.to_string()).collect::<Vec<_>>().join("/")),
                        json!(theory.probability),
                        json!(theory.error),
                        json!(emp.probability),
                        json!(emp.std_error),
                        json!((emp.probability - half).max(0.0)),
                        json!((emp.probability + half).min(1.0)),
                    ]);
                }
                point += 1;
            }
        }
    }
    Ok(ExperimentOutput { kind: cfg.kind, table: table.with_metadata(cfg), details: None })
}

/// Reads a real data matrix with one observation per line; entries may be
/// separated by commas, semicolons or whitespace. Returns the `M x N` matrix.
pub fn load_observations(path: &Path) -> Result<SampleSet> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let row = line
            .split(|c: char| c == ',' || c == ';' || c.is_whitespace())
            .filter(|s| !s.is_empty())
            .map(|s| s.parse::<f64>().map_err(|e| Error::Config(format!("{}:{}: {e}: '{s}'", path.display(), ln + 1))))
            .collect::<Result<Vec<_>>>()?;
        if let Some(first) = rows.first() {
            if first.len() != row.len() {
                return Err(Error::Config(format!(
                    "{}:{}: expected {} entries, found {}",
                    path.display(),
                    ln + 1,
                    first.len(),
                    row.len()
                )));
            }
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::Config(format!("{}: no observations", path.display())));
    }
    let (n, m) = (rows.len(), rows[0].len());
    Ok(SampleSet::from_real(DMatrix::from_fn(m, n, |i, j| rows[j][i])))
}

/// Every estimate for every metric from two sample sets, plus the true
/// distance when the models are known.
pub fn estimate_all(s1: &SampleSpectrum, s2: &SampleSpectrum, metrics: &[MetricId], truth: Option<(&PopulationModel, &PopulationModel)>) -> Result<(ResultTable, Value)> {
    let mut table = ResultTable::new(&["metric", "estimator", "value", "M", "N1", "N2"]);
    let mut nested = serde_json::Map::new();
    for id in metrics {
        let spec = MetricSpec::from_id(id)?;
        let mut entry = serde_json::Map::new();
        let mut add = |name: &str, v: Value, table: &mut ResultTable| {
            table.push(vec![json!(id.to_string()), json!(name), v.clone(), json!(s1.dim()), json!(s1.n_samples()), json!(s2.n_samples())]);
            entry.insert(name.to_string(), v);
        };
        if let Some((m1, m2)) = truth {
            add("true", json!(true_distance(m1, m2, &spec)?), &mut table);
        }
        for (name, kind) in [("plug-in", EstimatorKind::PlugIn), ("consistent", EstimatorKind::Consistent)] {
            match estimate_distance(s1, s2, &spec, kind) {
                Ok(e) => add(name, json!(e.value), &mut table),
                Err(Error::OversampleRequired(_)) => add(name, Value::Null, &mut table),
                Err(e) => return Err(e),
            }
        }
        nested.insert(id.to_string(), Value::Object(entry));
    }
    Ok((table, Value::Object(nested)))
}

/// Plug-in, consistent and true values for one draw of two Toeplitz models.
pub fn run_estimate(cfg: &ExperimentConfig) -> Result<ExperimentOutput> {
    cfg.validate()?;
    let m = cfg.m[0];
    let models = cfg.models(m)?;
    let ns = cfg.sample_counts(m, &cfg.c);
    let sp = draw_spectra(&models, &ns, cfg.seed, ESTIMATE_STREAM, 0)?;
    let (table, nested) = estimate_all(&sp[0], &sp[1], &cfg.metrics, Some((&models[0], &models[1])))?;
    let mut table = table;
    table.columns.push("seed".into());
    for r in &mut table.rows {
        r.push(json!(cfg.seed));
    }
    table.columns.push("version".into());
    for r in &mut table.rows {
        r.push(json!(VERSION));
    }
    Ok(ExperimentOutput { kind: cfg.kind, table, details: Some(nested) })
}

/// True distances, second-order means and covariances over all model pairs.
pub fn run_asymptotics(cfg: &ExperimentConfig) -> Result<ExperimentOutput> {
    cfg.validate()?;
    let m = cfg.m[0];
    let models = cfg.models(m)?;
    let ns = cfg.sample_counts(m, &cfg.c);
    let j = models.len();
    let pairs: Vec<(usize, usize)> = (0..j).flat_map(|a| (a + 1..j).map(move |b| (a, b))).collect();
    let mut table = ResultTable::new(&["metric", "i", "j", "M", "Ni", "Nj", "d", "mean", "var"]);
    let mut details = Vec::new();
    for spec in cfg.metric_specs()? {
        let law: AsymptoticLaw = asymptotic_law(&pair_system(cfg, models.clone(), ns.clone(), pairs.clone(), spec.clone())?)?;
        for (p, &(a, b)) in pairs.iter().enumerate() {
            table.push(vec![
                json!(spec.id.to_string()),
                json!(a),
                json!(b),
                json!(m),
                json!(ns[a]),
                json!(ns[b]),
                json!(law.d[p]),
                json!(law.mean[p]),
                json!(law.cov[(p, p)]),
            ]);
        }
        let cov: Vec<Vec<f64>> = (0..pairs.len()).map(|r| law.cov.row(r).iter().cloned().collect()).collect();
        details.push(json!({ "metric": spec.id.to_string(), "pairs": pairs, "cov": cov }));
    }
    Ok(ExperimentOutput { kind: cfg.kind, table: table.with_metadata(cfg), details: Some(Value::Array(details)) })
}

/// Human-readable one-line summary of a configuration.
pub fn describe(cfg: &ExperimentConfig) -> String {
    format!("{} rho={:?} M={:?} c={:?} N={:?} trials={} seed={}", cfg.kind, cfg.rho, cfg.m, cfg.c, cfg.n, cfg.trials, cfg.seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hist_cfg() -> ExperimentConfig {
        ExperimentConfig::from_json(r#"{"kind": "histogram", "rho": [0.8, 0.4], "c": [0.1, 0.5], "M": [8], "metrics": ["eu"], "trials": 40, "seed": 3}"#).unwrap()
    }

    #[test]
    fn config_errors_are_line_anchored() {
        let e = ExperimentConfig::from_json("{\n  \"kind\": \"mse\",\n  \"rho\": [0.3, 0.6,]\n}").unwrap_err();
        assert!(e.is_config());
        assert!(e.to_string().contains("line 3"), "{e}");
        let e = ExperimentConfig::from_json(r#"{"kind": "mse", "bogus": 1}"#).unwrap_err();
        assert!(e.to_string().contains("bogus"));
    }

    #[test]
    fn validation_rules() {
        let mut c = hist_cfg();
        c.trials = 0;
        assert!(c.validate().unwrap_err().is_config());
        let mut c = hist_cfg();
        c.c = vec![1.0, 0.5];
        assert!(c.validate().is_err());
        let mut c = hist_cfg();
        c.m = vec![20, 10];
        assert!(c.validate().is_err());
        let mut c = hist_cfg();
        c.rho = vec![0.3];
        assert!(c.validate().is_err());
        assert!(hist_cfg().validate().is_ok());
    }

    #[test]
    fn histogram_is_reproducible_and_thread_independent() {
        let cfg = hist_cfg();
        let a = run_experiment(&cfg).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
        let b = pool.install(|| run_experiment(&cfg).unwrap());
        assert_eq!(a, b);
        let csv = a.render(OutputFormat::Csv).unwrap();
        let header = csv.lines().next().unwrap();
        for col in ["seed", "trials", "quadrature", "version", "ks"] {
            assert!(header.split(',').any(|h| h == col), "{header}");
        }
        assert_eq!(a.table.rows.len(), 1);
    }

    #[test]
    fn mse_uses_absolute_error_for_equal_models() {
        let cfg = ExperimentConfig::from_json(r#"{"kind": "mse", "rho": [0.6, 0.6], "c": [0.25], "N": [16, 32], "metrics": ["le"], "trials": 20}"#).unwrap();
        let out = run_experiment(&cfg).unwrap();
        assert_eq!(out.table.rows.len(), 4);
        for r in 0..4 {
            assert!(out.table.get_f64(r, "d").unwrap().abs() < 1e-12);
        }
        let pl = out.table.get_f64(2, "mse").unwrap();
        let co = out.table.get_f64(3, "mse").unwrap();
        assert!(co < pl);
    }

    #[test]
    fn estimate_and_asymptotics_tables() {
        let cfg = ExperimentConfig::from_json(r#"{"kind": "estimate", "rho": [0.3, 0.6], "M": [10], "N": [40, 30], "seed": 7}"#).unwrap();
        let out = run_experiment(&cfg).unwrap();
        assert_eq!(out.table.rows.len(), 9);
        assert_eq!(out, run_experiment(&cfg).unwrap());
        let cfg = ExperimentConfig::from_json(r#"{"kind": "asymptotics", "rho": [0.3, 0.6, 0.2], "M": [6], "c": [0.25], "metrics": ["eu", "kl"]}"#).unwrap();
        let out = run_experiment(&cfg).unwrap();
        assert_eq!(out.table.rows.len(), 6);
        let json = out.render(OutputFormat::Json).unwrap();
        assert!(json.contains("\"cov\""));
    }

    #[test]
    fn data_files_round_trip() {
        let dir = std::env::temp_dir().join(format!("covdist-harness-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let p = dir.join("y.csv");
        std::fs::write(&p, "# two observations\n1, 2, 3\n4 5 6\n").unwrap();
        let s = load_observations(&p).unwrap();
        assert_eq!((s.dim(), s.n_samples()), (3, 2));
        std::fs::write(&p, "1,2\n3\n").unwrap();
        let e = load_observations(&p).unwrap_err();
        assert!(e.to_string().contains(":2:"));
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn ks_of_perfect_quantiles_is_small() {
        let n = Normal::new(0.0, 1.0).unwrap();
        let x: Vec<f64> = (0..1000).map(|i| n.inverse_cdf((i as f64 + 0.5) / 1000.0)).collect();
        assert!(ks_normal(&x, 0.0, 1.0).unwrap() < 1e-3);
        assert!(ks_normal(&x, 1.0, 1.0).unwrap() > 0.3);
    }
}
