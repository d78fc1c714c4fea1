//! Classical comparator tests: OLS, HC3 and the cluster-robust sandwich.
//!
//! All three pool the rows of one outcome into a single regression of `y`
//! on `(x, Z)` and test the `x` coefficient against its null value. They
//! share the identical point estimate and differ only in the variance:
//! classical `sigma^2 (X'X)^{-1}` with a t(n-p) reference, the HC3 sandwich
//! with squared residuals inflated by `(1 - h_ii)^{-2}`, and the CR0
//! clusterwise sandwich with a normal reference (the estimating-equation
//! solution under an identity working correlation, no small-sample df
//! correction).

use nalgebra::{DMatrix, DVector};
use statrs::distribution::{ContinuousCDF, Normal, StudentsT};

use crate::data::{Alternative, ClusteredDataset, HypothesisSpec};
use crate::error::{Error, Result};
use crate::weights::condition_estimate;

const CONDITION_LIMIT: f64 = 1e12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BaselineMethod {
    Ols,
    Hc3,
    ClusterSandwich,
}

impl BaselineMethod {
    pub fn as_str(&self) -> &'static str {
        match self {
            BaselineMethod::Ols => "ols",
            BaselineMethod::Hc3 => "hc3",
            BaselineMethod::ClusterSandwich => "cluster_sandwich",
        }
    }
}

/// Result of one baseline test on one outcome.
#[derive(Debug, Clone)]
pub struct FitSummary {
    pub beta_hat: f64,
    pub se: f64,
    pub statistic: f64,
    pub p: f64,
    /// Reference distribution, e.g. "t(12)" or "normal".
    pub df_policy: String,
    pub method: BaselineMethod,
}

/// Pooled design for one outcome: `X = [x | Z]`, plus the cluster row
/// extents needed by the clusterwise sandwich.
struct PooledFit {
    x: DMatrix<f64>,
    beta: DVector<f64>,
    residuals: DVector<f64>,
    xtx_inv: DMatrix<f64>,
    cluster_ranges: Vec<(usize, usize)>,
    n: usize,
    p: usize,
}

fn pooled_fit(dataset: &ClusteredDataset, outcome: usize) -> Result<PooledFit> {
    let label = &dataset.outcome_labels()[outcome];
    let n = dataset.total_occasions();
    let q = dataset.nuisance_dim(outcome);
    let p = 1 + q;

    let mut x = DMatrix::zeros(n, p);
    let mut y = DVector::zeros(n);
    let mut cluster_ranges = Vec::with_capacity(dataset.n_clusters());
    let mut offset = 0usize;
    for cluster in dataset.clusters() {
        let nj = cluster.n();
        for i in 0..nj {
            x[(offset + i, 0)] = cluster.x(outcome)[i];
        }
        if q > 0 {
            x.view_mut((offset, 1), (nj, q)).copy_from(cluster.z(outcome));
        }
        y.rows_mut(offset, nj).copy_from(cluster.y(outcome));
        cluster_ranges.push((offset, nj));
        offset += nj;
    }

    let xtx = x.transpose() * &x;
    let condition = condition_estimate(&xtx);
    if !condition.is_finite() || condition > CONDITION_LIMIT {
        return Err(Error::RankDeficientDesign {
            outcome: label.clone(),
        });
    }
    let xtx_inv = xtx.try_inverse().ok_or(Error::RankDeficientDesign {
        outcome: label.clone(),
    })?;
    let beta = &xtx_inv * (x.transpose() * &y);
    let residuals = &y - &x * &beta;

    Ok(PooledFit {
        x,
        beta,
        residuals,
        xtx_inv,
        cluster_ranges,
        n,
        p,
    })
}

fn reference_p(statistic: f64, alternative: Alternative, df: Option<f64>) -> f64 {
    let cdf = |v: f64| -> f64 {
        match df {
            Some(df) => StudentsT::new(0.0, 1.0, df)
                .map(|d| d.cdf(v))
                .unwrap_or(f64::NAN),
            None => Normal::new(0.0, 1.0).map(|d| d.cdf(v)).unwrap_or(f64::NAN),
        }
    };
    match alternative {
        Alternative::Greater => 1.0 - cdf(statistic),
        Alternative::Less => cdf(statistic),
        Alternative::TwoSided => 2.0 * (1.0 - cdf(statistic.abs())),
    }
}

fn beta0_for_outcome(hypothesis: &HypothesisSpec, outcome: usize) -> Result<f64> {
    hypothesis
        .outcomes()
        .iter()
        .position(|&l| l == outcome)
        .map(|k| hypothesis.beta0(k))
        .ok_or_else(|| {
            Error::InvalidConfig(format!("outcome index {outcome} is not under test"))
        })
}

/// OLS with the classical variance estimator and a t(n - p) reference.
pub fn ols_test(
    dataset: &ClusteredDataset,
    outcome: usize,
    hypothesis: &HypothesisSpec,
) -> Result<FitSummary> {
    let beta0 = beta0_for_outcome(hypothesis, outcome)?;
    let fit = pooled_fit(dataset, outcome)?;
    let label = &dataset.outcome_labels()[outcome];
    let df = (fit.n - fit.p) as f64;
    if df <= 0.0 {
        return Err(Error::RankDeficientDesign {
            outcome: label.clone(),
        });
    }
    let rss = fit.residuals.norm_squared();
    let scale = fit.residuals.len() as f64 + fit.x.norm_squared();
    if rss <= 1e-20 * scale.max(1.0) {
        return Err(Error::DegenerateFit {
            outcome: label.clone(),
        });
    }
    let sigma2 = rss / df;
    let se = (sigma2 * fit.xtx_inv[(0, 0)]).sqrt();
    let statistic = (fit.beta[0] - beta0) / se;
    Ok(FitSummary {
        beta_hat: fit.beta[0],
        se,
        statistic,
        p: reference_p(statistic, hypothesis.alternative(), Some(df)),
        df_policy: format!("t({})", fit.n - fit.p),
        method: BaselineMethod::Ols,
    })
}

/// HC3 heteroscedasticity-consistent test: sandwich variance with squared
/// residuals inflated by `(1 - h_ii)^{-2}`, t(n - p) reference.
pub fn hc3_test(
    dataset: &ClusteredDataset,
    outcome: usize,
    hypothesis: &HypothesisSpec,
) -> Result<FitSummary> {
    let beta0 = beta0_for_outcome(hypothesis, outcome)?;
    let fit = pooled_fit(dataset, outcome)?;
    let p = fit.p;
    let mut meat = DMatrix::zeros(p, p);
    for i in 0..fit.n {
        let xi = fit.x.row(i).transpose();
        let hi = (xi.transpose() * &fit.xtx_inv * &xi)[(0, 0)];
        if hi >= 1.0 - 1e-12 {
            return Err(Error::LeverageOne { row: i });
        }
        let w = (fit.residuals[i] / (1.0 - hi)).powi(2);
        meat += &xi * xi.transpose() * w;
    }
    let var = &fit.xtx_inv * meat * &fit.xtx_inv;
    let se = var[(0, 0)].sqrt();
    if !se.is_finite() || se <= 0.0 {
        return Err(Error::DegenerateFit {
            outcome: dataset.outcome_labels()[outcome].clone(),
        });
    }
    let statistic = (fit.beta[0] - beta0) / se;
    let df = (fit.n - fit.p) as f64;
    Ok(FitSummary {
        beta_hat: fit.beta[0],
        se,
        statistic,
        p: reference_p(statistic, hypothesis.alternative(), Some(df)),
        df_policy: format!("t({})", fit.n - fit.p),
        method: BaselineMethod::Hc3,
    })
}

/// Cluster-robust (CR0) sandwich test with a normal reference.
pub fn cluster_sandwich_test(
    dataset: &ClusteredDataset,
    outcome: usize,
    hypothesis: &HypothesisSpec,
) -> Result<FitSummary> {
    let beta0 = beta0_for_outcome(hypothesis, outcome)?;
    let fit = pooled_fit(dataset, outcome)?;
    let p = fit.p;
    let mut meat = DMatrix::zeros(p, p);
    for &(offset, nj) in &fit.cluster_ranges {
        let xj = fit.x.rows(offset, nj);
        let ej = fit.residuals.rows(offset, nj);
        let xe = xj.transpose() * ej;
        meat += &xe * xe.transpose();
    }
    let var = &fit.xtx_inv * meat * &fit.xtx_inv;
    let se = var[(0, 0)].sqrt();
    if !se.is_finite() || se <= 0.0 {
        return Err(Error::DegenerateFit {
            outcome: dataset.outcome_labels()[outcome].clone(),
        });
    }
    let statistic = (fit.beta[0] - beta0) / se;
    Ok(FitSummary {
        beta_hat: fit.beta[0],
        se,
        statistic,
        p: reference_p(statistic, hypothesis.alternative(), None),
        df_policy: "normal".into(),
        method: BaselineMethod::ClusterSandwich,
    })
}

/// Dispatches on the method tag.
pub fn baseline_test(
    dataset: &ClusteredDataset,
    outcome: usize,
    hypothesis: &HypothesisSpec,
    method: BaselineMethod,
) -> Result<FitSummary> {
    match method {
        BaselineMethod::Ols => ols_test(dataset, outcome, hypothesis),
        BaselineMethod::Hc3 => hc3_test(dataset, outcome, hypothesis),
        BaselineMethod::ClusterSandwich => cluster_sandwich_test(dataset, outcome, hypothesis),
    }
}
