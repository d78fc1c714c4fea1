//! Scenario generators and the Monte Carlo comparison harness.
//!
//! Three data-generating scenarios are supported. All draw the covariate of
//! interest and one nuisance covariate from a standard bivariate normal with
//! configurable correlation, and give every cluster random effects on
//! (intercept, x, z) drawn from an equicorrelated multivariate normal:
//!
//! - **univariate**: one outcome, i.i.d. unit-scale errors (scaled by
//!   `eps_sd`);
//! - **multivariate**: `M` outcomes sharing the designs, independent
//!   per-outcome random effects with the same structure, and cross-outcome
//!   errors drawn from an equicorrelated covariance;
//! - **crossed**: the univariate mechanism replicated over items, plus an
//!   item-specific random intercept; items map to outcomes via the crossed
//!   reshaping, and the fitted nuisance design gains an intercept column so
//!   the per-item shift is absorbed under the null.
//!
//! Every generator is deterministic given `seed`.

mod mc;

pub use mc::{
    derive_rep_seeds, run_monte_carlo, Method, MonteCarloOptions, MonteCarloResult, RateRow,
    UserWeightsProvider,
};

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{ClusterSpec, ClusteredDataset, DesignSpec, LongRecord};
use crate::error::{Error, Result};
use crate::ingest::reshape_crossed;
use crate::weights::{user_weights, WorkingWeights};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScenarioKind {
    Univariate,
    Multivariate,
    Crossed,
}

/// Cluster-size rule: every cluster the same size, or i.i.d. uniform on an
/// inclusive integer range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum NjRule {
    Fixed(usize),
    Uniform { min: usize, max: usize },
}

impl NjRule {
    fn draw(&self, rng: &mut ChaCha8Rng) -> usize {
        match *self {
            NjRule::Fixed(n) => n,
            NjRule::Uniform { min, max } => rng.gen_range(min..=max),
        }
    }
}

/// Data-generating configuration for one scenario point.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub kind: ScenarioKind,
    pub n_clusters: usize,
    pub nj: NjRule,
    /// True effects, one per outcome (a single entry for univariate and
    /// crossed scenarios).
    pub beta: Vec<f64>,
    /// Fixed effect of the nuisance covariate.
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    /// Correlation between the covariate of interest and the nuisance
    /// covariate.
    #[serde(default = "default_covariate_corr")]
    pub covariate_corr: f64,
    /// Equicorrelation of the random effects on (intercept, x, z).
    #[serde(default = "default_re_corr")]
    pub re_corr: f64,
    /// Scales of the random effects on (intercept, x, z).
    #[serde(default = "default_re_sd")]
    pub re_sd: Vec<f64>,
    /// Cross-outcome error equicorrelation (multivariate only).
    #[serde(default = "default_eps_corr")]
    pub eps_corr: f64,
    /// Error scales, one per outcome (a single entry is broadcast).
    #[serde(default = "default_eps_sd")]
    pub eps_sd: Vec<f64>,
    /// Number of items (crossed only).
    #[serde(default = "default_item_count")]
    pub item_count: usize,
    /// Item random-intercept scale (crossed only).
    #[serde(default = "default_item_sd")]
    pub item_sd: f64,
    pub seed: u64,
    /// Include an intercept column in the fitted nuisance design. Defaults
    /// to true for crossed scenarios and false otherwise.
    #[serde(default)]
    pub fit_intercept: Option<bool>,
}

fn default_gamma() -> f64 {
    2.0
}
fn default_covariate_corr() -> f64 {
    0.7
}
fn default_re_corr() -> f64 {
    0.5
}
fn default_re_sd() -> Vec<f64> {
    vec![1.0, 1.0, 1.0]
}
fn default_eps_corr() -> f64 {
    0.4
}
fn default_eps_sd() -> Vec<f64> {
    vec![1.0]
}
fn default_item_count() -> usize {
    10
}
fn default_item_sd() -> f64 {
    5.0
}

impl ScenarioConfig {
    /// Univariate scenario defaults: `n_j ~ U(10, 30)`, one nuisance
    /// covariate with coefficient 2, covariate correlation 0.7, random
    /// effects with equicorrelation 0.5 and unit scales, unit errors.
    pub fn preset_univariate(n_clusters: usize, beta: f64, seed: u64) -> Self {
        Self {
            kind: ScenarioKind::Univariate,
            n_clusters,
            nj: NjRule::Uniform { min: 10, max: 30 },
            beta: vec![beta],
            gamma: default_gamma(),
            covariate_corr: default_covariate_corr(),
            re_corr: default_re_corr(),
            re_sd: default_re_sd(),
            eps_corr: 0.0,
            eps_sd: vec![1.0],
            item_count: 0,
            item_sd: 0.0,
            seed,
            fit_intercept: None,
        }
    }

    /// Multivariate scenario defaults: 100 clusters, `n_j ~ U(20, 50)`,
    /// 10 outcomes with the last two carrying effect 0.2, cross-outcome
    /// error equicorrelation 0.4 at scale `eps_sd`.
    pub fn preset_multivariate(eps_sd: f64, seed: u64) -> Self {
        let mut beta = vec![0.0; 10];
        beta[8] = 0.2;
        beta[9] = 0.2;
        Self {
            kind: ScenarioKind::Multivariate,
            n_clusters: 100,
            nj: NjRule::Uniform { min: 20, max: 50 },
            beta,
            gamma: default_gamma(),
            covariate_corr: default_covariate_corr(),
            re_corr: default_re_corr(),
            re_sd: default_re_sd(),
            eps_corr: default_eps_corr(),
            eps_sd: vec![eps_sd],
            item_count: 0,
            item_sd: 0.0,
            seed,
            fit_intercept: None,
        }
    }

    /// Crossed scenario defaults: 10 items with intercept scale 5,
    /// `n_j = 20` trials per item.
    pub fn preset_crossed(n_clusters: usize, beta: f64, seed: u64) -> Self {
        Self {
            kind: ScenarioKind::Crossed,
            n_clusters,
            nj: NjRule::Fixed(20),
            beta: vec![beta],
            gamma: default_gamma(),
            covariate_corr: default_covariate_corr(),
            re_corr: default_re_corr(),
            re_sd: default_re_sd(),
            eps_corr: 0.0,
            eps_sd: vec![1.0],
            item_count: default_item_count(),
            item_sd: default_item_sd(),
            seed,
            fit_intercept: None,
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let config: ScenarioConfig = toml::from_str(text)
            .map_err(|e| Error::InvalidConfig(format!("scenario config: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    /// Number of outcomes the generated dataset will have.
    pub fn n_outcomes(&self) -> usize {
        match self.kind {
            ScenarioKind::Univariate => 1,
            ScenarioKind::Multivariate => self.beta.len(),
            ScenarioKind::Crossed => self.item_count,
        }
    }

    pub fn fit_intercept(&self) -> bool {
        self.fit_intercept
            .unwrap_or(matches!(self.kind, ScenarioKind::Crossed))
    }

    /// Per-outcome error scale (single entries broadcast).
    pub fn eps_sd_for(&self, outcome: usize) -> f64 {
        if self.eps_sd.len() == 1 {
            self.eps_sd[0]
        } else {
            self.eps_sd[outcome]
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_clusters < 2 {
            return Err(Error::InvalidConfig(
                "scenario needs at least 2 clusters".into(),
            ));
        }
        if let NjRule::Uniform { min, max } = self.nj {
            if min == 0 || min > max {
                return Err(Error::InvalidConfig(format!(
                    "invalid cluster-size range [{min}, {max}]"
                )));
            }
        }
        if self.beta.is_empty() {
            return Err(Error::InvalidConfig("beta must be non-empty".into()));
        }
        match self.kind {
            ScenarioKind::Univariate | ScenarioKind::Crossed => {
                if self.beta.len() != 1 {
                    return Err(Error::InvalidConfig(
                        "univariate and crossed scenarios take a single beta".into(),
                    ));
                }
            }
            ScenarioKind::Multivariate => {
                if self.beta.len() < 2 {
                    return Err(Error::InvalidConfig(
                        "multivariate scenarios need at least 2 outcomes".into(),
                    ));
                }
            }
        }
        if matches!(self.kind, ScenarioKind::Crossed) && self.item_count < 1 {
            return Err(Error::InvalidConfig(
                "crossed scenarios need at least one item".into(),
            ));
        }
        check_correlation(self.covariate_corr, 2)?;
        check_correlation(self.re_corr, 3)?;
        let m = self.n_outcomes();
        if matches!(self.kind, ScenarioKind::Multivariate) {
            check_correlation(self.eps_corr, m)?;
        }
        if self.re_sd.len() != 3 {
            return Err(Error::InvalidConfig(
                "re_sd takes exactly 3 entries (intercept, x, z)".into(),
            ));
        }
        if self.re_sd.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
            return Err(Error::InvalidConfig("re_sd entries must be >= 0".into()));
        }
        if self.eps_sd.is_empty() || (self.eps_sd.len() != 1 && self.eps_sd.len() != m) {
            return Err(Error::InvalidConfig(format!(
                "eps_sd takes 1 or {m} entries"
            )));
        }
        if self.eps_sd.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::InvalidConfig("eps_sd entries must be > 0".into()));
        }
        if !(self.item_sd.is_finite() && self.item_sd >= 0.0) {
            return Err(Error::InvalidConfig("item_sd must be >= 0".into()));
        }
        Ok(())
    }

    /// Cross-outcome error covariance (multivariate scenarios).
    pub fn error_covariance(&self) -> DMatrix<f64> {
        let m = self.n_outcomes();
        DMatrix::from_fn(m, m, |i, k| {
            let corr = if i == k { 1.0 } else { self.eps_corr };
            corr * self.eps_sd_for(i) * self.eps_sd_for(k)
        })
    }

    /// Random-effects covariance over (intercept, x, z).
    pub fn random_effects_covariance(&self) -> DMatrix<f64> {
        DMatrix::from_fn(3, 3, |i, k| {
            let corr = if i == k { 1.0 } else { self.re_corr };
            corr * self.re_sd[i] * self.re_sd[k]
        })
    }
}

fn check_correlation(rho: f64, dim: usize) -> Result<()> {
    let lower = if dim > 1 { -1.0 / (dim as f64 - 1.0) } else { -1.0 };
    if !(rho.is_finite() && rho > lower && rho < 1.0) {
        return Err(Error::InvalidCorrelation { value: rho, dim });
    }
    Ok(())
}

/// Cholesky factor of an equicorrelation matrix of the given dimension.
fn equicorrelation_chol(rho: f64, dim: usize) -> Result<Cholesky<f64, nalgebra::Dyn>> {
    let c = DMatrix::from_fn(dim, dim, |i, k| if i == k { 1.0 } else { rho });
    Cholesky::new(c).ok_or(Error::InvalidCorrelation { value: rho, dim })
}

/// Draw a correlated (x, z) pair.
#[inline]
fn draw_xz(rng: &mut ChaCha8Rng, corr: f64) -> (f64, f64) {
    let u1: f64 = StandardNormal.sample(rng);
    let u2: f64 = StandardNormal.sample(rng);
    (u1, corr * u1 + (1.0 - corr * corr).sqrt() * u2)
}

/// Draw one cluster's random effects on (intercept, x, z).
fn draw_random_effects(
    rng: &mut ChaCha8Rng,
    chol: &Cholesky<f64, nalgebra::Dyn>,
    re_sd: &[f64],
) -> DVector<f64> {
    let u = DVector::from_fn(3, |_, _| StandardNormal.sample(rng));
    let mut v = chol.l() * u;
    for i in 0..3 {
        v[i] *= re_sd[i];
    }
    v
}

/// Item random intercepts for a crossed scenario.
pub fn draw_item_effects(count: usize, sd: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..count)
        .map(|_| {
            let u: f64 = StandardNormal.sample(rng);
            sd * u
        })
        .collect()
}

fn nuisance_matrix(z: &[f64], fit_intercept: bool) -> DMatrix<f64> {
    let n = z.len();
    if fit_intercept {
        DMatrix::from_fn(n, 2, |i, c| if c == 0 { 1.0 } else { z[i] })
    } else {
        DMatrix::from_fn(n, 1, |i, _| z[i])
    }
}

/// Generates a univariate scenario dataset.
pub fn gen_univariate(config: &ScenarioConfig) -> Result<ClusteredDataset> {
    config.validate()?;
    if config.kind != ScenarioKind::Univariate {
        return Err(Error::InvalidConfig("expected a univariate scenario".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let chol_re = equicorrelation_chol(config.re_corr, 3)?;
    let beta = config.beta[0];
    let sd = config.eps_sd_for(0);

    let mut clusters = Vec::with_capacity(config.n_clusters);
    for j in 0..config.n_clusters {
        let n = config.nj.draw(&mut rng);
        let b = draw_random_effects(&mut rng, &chol_re, &config.re_sd);
        let mut x = Vec::with_capacity(n);
        let mut z = Vec::with_capacity(n);
        let mut y = Vec::with_capacity(n);
        for _ in 0..n {
            let (xi, zi) = draw_xz(&mut rng, config.covariate_corr);
            let eps: f64 = StandardNormal.sample(&mut rng);
            y.push(beta * xi + config.gamma * zi + b[0] + b[1] * xi + b[2] * zi + sd * eps);
            x.push(xi);
            z.push(zi);
        }
        clusters.push(ClusterSpec {
            id: format!("c{j}"),
            ys: vec![DVector::from_vec(y)],
            design: DesignSpec::Shared {
                x: DVector::from_vec(x),
                z: nuisance_matrix(&z, config.fit_intercept()),
            },
        });
    }
    ClusteredDataset::new(vec!["y1".into()], clusters)
}

/// Generates a multivariate scenario dataset with shared designs.
pub fn gen_multivariate(config: &ScenarioConfig) -> Result<ClusteredDataset> {
    config.validate()?;
    if config.kind != ScenarioKind::Multivariate {
        return Err(Error::InvalidConfig(
            "expected a multivariate scenario".into(),
        ));
    }
    let m = config.n_outcomes();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let chol_re = equicorrelation_chol(config.re_corr, 3)?;
    let chol_eps = equicorrelation_chol(config.eps_corr, m)?;
    let eps_l = chol_eps.l();

    let mut clusters = Vec::with_capacity(config.n_clusters);
    for j in 0..config.n_clusters {
        let n = config.nj.draw(&mut rng);
        // independent random effects per outcome, identical structure
        let b: Vec<DVector<f64>> = (0..m)
            .map(|_| draw_random_effects(&mut rng, &chol_re, &config.re_sd))
            .collect();
        let mut x = Vec::with_capacity(n);
        let mut z = Vec::with_capacity(n);
        let mut ys = vec![Vec::with_capacity(n); m];
        for _ in 0..n {
            let (xi, zi) = draw_xz(&mut rng, config.covariate_corr);
            let u = DVector::from_fn(m, |_, _| StandardNormal.sample(&mut rng));
            let eps = &eps_l * u;
            for l in 0..m {
                let mean = config.beta[l] * xi
                    + config.gamma * zi
                    + b[l][0]
                    + b[l][1] * xi
                    + b[l][2] * zi;
                ys[l].push(mean + config.eps_sd_for(l) * eps[l]);
            }
            x.push(xi);
            z.push(zi);
        }
        clusters.push(ClusterSpec {
            id: format!("c{j}"),
            ys: ys.into_iter().map(DVector::from_vec).collect(),
            design: DesignSpec::Shared {
                x: DVector::from_vec(x),
                z: nuisance_matrix(&z, config.fit_intercept()),
            },
        });
    }
    let labels = (1..=m).map(|l| format!("y{l}")).collect();
    ClusteredDataset::new(labels, clusters)
}

/// Generates crossed-design long records (participant x item x trial).
pub fn gen_crossed(config: &ScenarioConfig) -> Result<Vec<LongRecord>> {
    config.validate()?;
    if config.kind != ScenarioKind::Crossed {
        return Err(Error::InvalidConfig("expected a crossed scenario".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let chol_re = equicorrelation_chol(config.re_corr, 3)?;
    let beta = config.beta[0];
    let sd = config.eps_sd_for(0);
    let fit_intercept = config.fit_intercept();
    let item_effects = draw_item_effects(config.item_count, config.item_sd, &mut rng);

    let mut records = Vec::new();
    for j in 0..config.n_clusters {
        let n = config.nj.draw(&mut rng);
        let b = draw_random_effects(&mut rng, &chol_re, &config.re_sd);
        for (m, a_m) in item_effects.iter().enumerate() {
            for _ in 0..n {
                let (xi, zi) = draw_xz(&mut rng, config.covariate_corr);
                let eps: f64 = StandardNormal.sample(&mut rng);
                let y = beta * xi
                    + config.gamma * zi
                    + b[0]
                    + b[1] * xi
                    + b[2] * zi
                    + a_m
                    + sd * eps;
                let z = if fit_intercept {
                    vec![1.0, zi]
                } else {
                    vec![zi]
                };
                records.push(LongRecord {
                    cluster_id: format!("p{j}"),
                    outcome_id: String::new(),
                    y,
                    x: xi,
                    z,
                    item_id: Some(format!("item{}", m + 1)),
                });
            }
        }
    }
    Ok(records)
}

/// Generates the dataset for any scenario kind.
pub fn generate(config: &ScenarioConfig) -> Result<ClusteredDataset> {
    match config.kind {
        ScenarioKind::Univariate => gen_univariate(config),
        ScenarioKind::Multivariate => gen_multivariate(config),
        ScenarioKind::Crossed => reshape_crossed(gen_crossed(config)?),
    }
}

/// Oracle weights from the scenario's exact generative covariance:
/// `V_jl = Q Sigma_re Q' + item_sd^2 11' + eps_sd_l^2 I` with
/// `Q = [1, x, z]`, inverted per block and validated through the
/// user-supplied path.
pub fn true_weights(
    dataset: &ClusteredDataset,
    config: &ScenarioConfig,
) -> Result<WorkingWeights> {
    let sigma_re = config.random_effects_covariance();
    let item_var = match config.kind {
        ScenarioKind::Crossed => config.item_sd * config.item_sd,
        _ => 0.0,
    };
    let m = dataset.n_outcomes();
    let mut matrices = Vec::with_capacity(m);
    for l in 0..m {
        let noise = config.eps_sd_for(l).powi(2);
        let mut per_cluster = Vec::with_capacity(dataset.n_clusters());
        for cluster in dataset.clusters() {
            let n = cluster.n();
            let x = cluster.x(l);
            let z = cluster.z(l);
            // the generative nuisance covariate is the last Z column
            let z_col = z.column(z.ncols() - 1);
            let q = DMatrix::from_fn(n, 3, |i, c| match c {
                0 => 1.0,
                1 => x[i],
                _ => z_col[i],
            });
            let mut v = &q * &sigma_re * q.transpose();
            for i in 0..n {
                for k in 0..n {
                    v[(i, k)] += item_var;
                }
                v[(i, i)] += noise;
            }
            let w = Cholesky::new(v).ok_or_else(|| Error::NotPositiveDefinite {
                cluster: cluster.id().to_string(),
                outcome: dataset.outcome_labels()[l].clone(),
                min_eig: f64::NAN,
            })?;
            per_cluster.push(w.inverse());
        }
        matrices.push(per_cluster);
    }
    user_weights(dataset, matrices)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn sample_corr(a: &[f64], b: &[f64]) -> f64 {
        let n = a.len() as f64;
        let ma = a.iter().sum::<f64>() / n;
        let mb = b.iter().sum::<f64>() / n;
        let mut cov = 0.0;
        let mut va = 0.0;
        let mut vb = 0.0;
        for (x, y) in a.iter().zip(b) {
            cov += (x - ma) * (y - mb);
            va += (x - ma).powi(2);
            vb += (y - mb).powi(2);
        }
        cov / (va.sqrt() * vb.sqrt())
    }

    #[test]
    fn univariate_covariate_correlation() {
        // re_sd = 0 collapses to an i.i.d. linear model; check the sampled
        // (x, z) correlation at n = 10^4
        let mut config = ScenarioConfig::preset_univariate(500, 0.0, 11);
        config.nj = NjRule::Fixed(20);
        config.re_sd = vec![0.0, 0.0, 0.0];
        let d = gen_univariate(&config).unwrap();
        assert_eq!(d.total_occasions(), 10_000);
        let mut xs = Vec::new();
        let mut zs = Vec::new();
        for c in d.clusters() {
            xs.extend(c.x(0).iter().copied());
            zs.extend(c.z(0).column(0).iter().copied());
        }
        let r = sample_corr(&xs, &zs);
        assert!((r - 0.7).abs() <= 0.05, "corr(x,z) = {r}");
    }

    #[test]
    fn multivariate_error_covariance_arithmetic() {
        let mut config = ScenarioConfig::preset_multivariate(2.0, 1);
        config.eps_corr = 0.4;
        let cov = config.error_covariance();
        assert_relative_eq!(cov[(0, 1)], 1.6);
        assert_relative_eq!(cov[(0, 0)], 4.0);
    }

    #[test]
    fn multivariate_zero_eps_corr_uncorrelated() {
        let mut config = ScenarioConfig::preset_multivariate(1.0, 5);
        config.beta = vec![0.0, 0.0];
        config.eps_corr = 0.0;
        config.re_sd = vec![0.0, 0.0, 0.0];
        config.n_clusters = 500;
        config.nj = NjRule::Fixed(20);
        let d = gen_multivariate(&config).unwrap();
        let mut a = Vec::new();
        let mut b = Vec::new();
        for c in d.clusters() {
            // residualize the shared mean: with beta = 0 and unit gamma the
            // outcome columns share gamma * z; subtract it to isolate errors
            for i in 0..c.n() {
                let shared = config.gamma * c.z(0)[(i, 0)];
                a.push(c.y(0)[i] - shared);
                b.push(c.y(1)[i] - shared);
            }
        }
        let r = sample_corr(&a, &b);
        assert!(r.abs() < 0.05, "cross-outcome corr = {r}");
    }

    #[test]
    fn item_effect_sample_variance() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let effects = draw_item_effects(10_000, 5.0, &mut rng);
        let mean = effects.iter().sum::<f64>() / effects.len() as f64;
        let var = effects
            .iter()
            .map(|a| (a - mean).powi(2))
            .sum::<f64>()
            / (effects.len() as f64 - 1.0);
        assert!((var - 25.0).abs() <= 1.0, "item variance = {var}");
    }

    #[test]
    fn crossed_defaults_shape() {
        let config = ScenarioConfig::preset_crossed(5, 0.0, 9);
        let records = gen_crossed(&config).unwrap();
        assert_eq!(records.len(), 5 * 10 * 20);
        let d = generate(&config).unwrap();
        assert_eq!(d.n_clusters(), 5);
        assert_eq!(d.n_outcomes(), 10);
        assert_eq!(d.cluster(0).n(), 20);
        // crossed fits gain an intercept column
        assert_eq!(d.nuisance_dim(0), 2);
    }

    #[test]
    fn crossed_zero_item_sd_reduces_to_univariate_mechanism() {
        let mut config = ScenarioConfig::preset_crossed(4, 0.3, 21);
        config.item_sd = 0.0;
        config.item_count = 1;
        config.fit_intercept = Some(false);
        let d = generate(&config).unwrap();
        assert_eq!(d.n_outcomes(), 1);
        assert_eq!(d.nuisance_dim(0), 1);
    }

    #[test]
    fn determinism_same_seed() {
        let config = ScenarioConfig::preset_univariate(10, 0.5, 77);
        let a = gen_univariate(&config).unwrap();
        let b = gen_univariate(&config).unwrap();
        assert_eq!(a, b);
        let mut other = config.clone();
        other.seed = 78;
        assert_ne!(a, gen_univariate(&other).unwrap());
    }

    #[test]
    fn invalid_correlation_rejected() {
        let mut config = ScenarioConfig::preset_univariate(10, 0.0, 1);
        config.re_corr = -0.6; // below -1/2 for dimension 3
        assert!(matches!(
            gen_univariate(&config),
            Err(Error::InvalidCorrelation { dim: 3, .. })
        ));
        let mut config = ScenarioConfig::preset_multivariate(1.0, 1);
        config.eps_corr = -0.2; // below -1/9 for dimension 10
        assert!(matches!(
            config.validate(),
            Err(Error::InvalidCorrelation { dim: 10, .. })
        ));
    }

    #[test]
    fn toml_round_trip() {
        let text = r#"
kind = "multivariate"
n_clusters = 100
nj = { min = 20, max = 50 }
beta = [0.0, 0.0, 0.2]
eps_sd = [3.0]
seed = 42
"#;
        let config = ScenarioConfig::from_toml(text).unwrap();
        assert_eq!(config.n_clusters, 100);
        assert_eq!(config.nj, NjRule::Uniform { min: 20, max: 50 });
        assert_eq!(config.eps_corr, 0.4);
        assert_eq!(config.n_outcomes(), 3);

        let fixed = ScenarioConfig::from_toml(
            "kind = \"univariate\"\nn_clusters = 20\nnj = 15\nbeta = [0.0]\nseed = 1\n",
        )
        .unwrap();
        assert_eq!(fixed.nj, NjRule::Fixed(15));
    }

    #[test]
    fn true_weights_are_valid_spd() {
        let config = ScenarioConfig::preset_univariate(5, 0.0, 13);
        let d = gen_univariate(&config).unwrap();
        let w = true_weights(&d, &config).unwrap();
        for j in 0..d.n_clusters() {
            let block = w.block(0, j);
            let rr = block.r_matrix() * block.r_matrix();
            let err = (&rr - block.w_matrix()).norm() / block.w_matrix().norm();
            assert!(err <= 1e-8);
        }
    }
}
