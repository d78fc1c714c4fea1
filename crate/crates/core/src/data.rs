//! Clustered multivariate dataset representation.
//!
//! A [`ClusteredDataset`] holds `N >= 2` independent clusters. Cluster `j`
//! contributes `n_j` occasions, and for each of the `M` outcomes a response
//! vector `y_jl`, a covariate of interest `x_jl` and a nuisance design
//! `Z_jl` (`n_j x q_l`, `q_l >= 0`). Designs that are identical across
//! outcomes are stored once and viewed per outcome; semantics are the same
//! as per-outcome storage.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One observation row in long format.
#[derive(Debug, Clone, PartialEq)]
pub struct LongRecord {
    pub cluster_id: String,
    pub outcome_id: String,
    pub y: f64,
    pub x: f64,
    pub z: Vec<f64>,
    /// Present only in crossed designs (participant x item).
    pub item_id: Option<String>,
}

/// Direction of the alternative hypothesis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Alternative {
    Greater,
    Less,
    TwoSided,
}

impl Alternative {
    pub fn as_str(&self) -> &'static str {
        match self {
            Alternative::Greater => "greater",
            Alternative::Less => "less",
            Alternative::TwoSided => "two-sided",
        }
    }
}

impl std::str::FromStr for Alternative {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "greater" => Ok(Alternative::Greater),
            "less" => Ok(Alternative::Less),
            "two-sided" | "two_sided" | "twosided" => Ok(Alternative::TwoSided),
            other => Err(Error::InvalidConfig(format!(
                "unknown alternative '{other}' (expected greater, less or two-sided)"
            ))),
        }
    }
}

/// Null hypothesis for a subset `L` of outcomes: `beta_l = beta0_l` for each
/// `l` in `L`, against a common alternative direction.
#[derive(Debug, Clone, PartialEq)]
pub struct HypothesisSpec {
    outcomes: Vec<usize>,
    beta0: Vec<f64>,
    alternative: Alternative,
}

impl HypothesisSpec {
    /// Hypothesis over an explicit subset of outcome indices (0-based).
    pub fn new(outcomes: Vec<usize>, beta0: Vec<f64>, alternative: Alternative) -> Result<Self> {
        if outcomes.is_empty() {
            return Err(Error::InvalidConfig(
                "hypothesis outcome set must be non-empty".into(),
            ));
        }
        if outcomes.len() != beta0.len() {
            return Err(Error::InvalidConfig(format!(
                "hypothesis has {} outcomes but {} null values",
                outcomes.len(),
                beta0.len()
            )));
        }
        let mut seen = outcomes.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != outcomes.len() {
            return Err(Error::InvalidConfig(
                "hypothesis outcome set contains duplicates".into(),
            ));
        }
        if beta0.iter().any(|b| !b.is_finite()) {
            return Err(Error::InvalidConfig(
                "null values beta0 must be finite".into(),
            ));
        }
        Ok(Self {
            outcomes,
            beta0,
            alternative,
        })
    }

    /// Two-sided null `beta_l = 0` over every outcome of the dataset.
    pub fn global_null(dataset: &ClusteredDataset) -> Self {
        let m = dataset.n_outcomes();
        Self {
            outcomes: (0..m).collect(),
            beta0: vec![0.0; m],
            alternative: Alternative::TwoSided,
        }
    }

    /// Same outcome set with a different alternative.
    pub fn with_alternative(mut self, alternative: Alternative) -> Self {
        self.alternative = alternative;
        self
    }

    /// Same outcome set with the given null values (one per tested outcome).
    pub fn with_beta0(mut self, beta0: Vec<f64>) -> Result<Self> {
        if beta0.len() != self.outcomes.len() {
            return Err(Error::InvalidConfig(format!(
                "expected {} null values, got {}",
                self.outcomes.len(),
                beta0.len()
            )));
        }
        if beta0.iter().any(|b| !b.is_finite()) {
            return Err(Error::InvalidConfig(
                "null values beta0 must be finite".into(),
            ));
        }
        self.beta0 = beta0;
        Ok(self)
    }

    /// Tested outcome indices (0-based into the dataset's outcome list).
    pub fn outcomes(&self) -> &[usize] {
        &self.outcomes
    }

    /// Null value for the k-th tested outcome.
    pub fn beta0(&self, k: usize) -> f64 {
        self.beta0[k]
    }

    pub fn beta0_all(&self) -> &[f64] {
        &self.beta0
    }

    pub fn alternative(&self) -> Alternative {
        self.alternative
    }

    /// Checks the outcome subset against a dataset.
    pub fn validate_against(&self, dataset: &ClusteredDataset) -> Result<()> {
        let m = dataset.n_outcomes();
        for &l in &self.outcomes {
            if l >= m {
                return Err(Error::InvalidConfig(format!(
                    "hypothesis refers to outcome index {l} but the dataset has {m} outcomes"
                )));
            }
        }
        Ok(())
    }
}

/// Covariate of interest and nuisance design for one cluster.
#[derive(Debug, Clone, PartialEq)]
pub enum DesignSpec {
    /// One design shared by all outcomes.
    Shared { x: DVector<f64>, z: DMatrix<f64> },
    /// A design per outcome, in outcome order.
    PerOutcome {
        xs: Vec<DVector<f64>>,
        zs: Vec<DMatrix<f64>>,
    },
}

/// Inputs for one cluster, consumed by [`ClusteredDataset::new`].
#[derive(Debug, Clone)]
pub struct ClusterSpec {
    pub id: String,
    /// One response vector per outcome, each of length `n_j`.
    pub ys: Vec<DVector<f64>>,
    pub design: DesignSpec,
}

/// Validated per-cluster data.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterBlock {
    id: String,
    n: usize,
    ys: Vec<DVector<f64>>,
    design: DesignSpec,
}

impl ClusterBlock {
    pub fn id(&self) -> &str {
        &self.id
    }

    /// Number of occasions `n_j`.
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn y(&self, outcome: usize) -> &DVector<f64> {
        &self.ys[outcome]
    }

    pub fn x(&self, outcome: usize) -> &DVector<f64> {
        match &self.design {
            DesignSpec::Shared { x, .. } => x,
            DesignSpec::PerOutcome { xs, .. } => &xs[outcome],
        }
    }

    pub fn z(&self, outcome: usize) -> &DMatrix<f64> {
        match &self.design {
            DesignSpec::Shared { z, .. } => z,
            DesignSpec::PerOutcome { zs, .. } => &zs[outcome],
        }
    }

    pub fn design(&self) -> &DesignSpec {
        &self.design
    }
}

/// Immutable clustered multivariate dataset.
///
/// Construction validates every invariant; afterwards the dataset is safe to
/// share across parallel workers.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusteredDataset {
    clusters: Vec<ClusterBlock>,
    outcome_labels: Vec<String>,
    nuisance_dims: Vec<usize>,
    total_occasions: usize,
    dropped_occasions: usize,
}

impl ClusteredDataset {
    pub fn new(outcome_labels: Vec<String>, clusters: Vec<ClusterSpec>) -> Result<Self> {
        Self::with_dropped(outcome_labels, clusters, 0)
    }

    /// As [`Self::new`], recording occasions removed by listwise deletion so
    /// reports can announce them.
    pub fn with_dropped(
        outcome_labels: Vec<String>,
        clusters: Vec<ClusterSpec>,
        dropped_occasions: usize,
    ) -> Result<Self> {
        let m = outcome_labels.len();
        if m == 0 {
            return Err(Error::InvalidDataset("no outcomes".into()));
        }
        {
            let mut labels = outcome_labels.clone();
            labels.sort();
            labels.dedup();
            if labels.len() != m {
                return Err(Error::InvalidDataset("outcome labels not distinct".into()));
            }
        }
        if clusters.len() < 2 {
            let id = clusters
                .first()
                .map(|c| c.id.clone())
                .unwrap_or_else(|| "<none>".into());
            return Err(Error::SingleClusterInput(id));
        }
        {
            let mut ids: Vec<&str> = clusters.iter().map(|c| c.id.as_str()).collect();
            ids.sort_unstable();
            ids.dedup();
            if ids.len() != clusters.len() {
                return Err(Error::InvalidDataset("cluster ids not distinct".into()));
            }
        }

        let mut nuisance_dims: Option<Vec<usize>> = None;
        let mut blocks = Vec::with_capacity(clusters.len());
        let mut total = 0usize;

        for spec in clusters {
            let ClusterSpec { id, ys, design } = spec;
            if ys.len() != m {
                return Err(Error::InvalidDataset(format!(
                    "cluster '{id}' has {} response vectors, expected {m}",
                    ys.len()
                )));
            }
            let n = ys[0].len();
            if n == 0 {
                return Err(Error::InvalidDataset(format!(
                    "cluster '{id}' has zero occasions"
                )));
            }
            for (l, y) in ys.iter().enumerate() {
                if y.len() != n {
                    return Err(Error::OccasionMismatch {
                        cluster: id.clone(),
                        detail: format!(
                            "outcome '{}' has {} rows, expected {n}",
                            outcome_labels[l],
                            y.len()
                        ),
                    });
                }
                if y.iter().any(|v| !v.is_finite()) {
                    return Err(Error::InvalidDataset(format!(
                        "non-finite response in cluster '{id}', outcome '{}'",
                        outcome_labels[l]
                    )));
                }
            }

            let design = canonicalize_design(design, m);
            let dims = match &design {
                DesignSpec::Shared { x, z } => {
                    check_design(&id, n, x, z)?;
                    vec![z.ncols(); m]
                }
                DesignSpec::PerOutcome { xs, zs } => {
                    if xs.len() != m || zs.len() != m {
                        return Err(Error::InvalidDataset(format!(
                            "cluster '{id}' has per-outcome designs for {} outcomes, expected {m}",
                            xs.len()
                        )));
                    }
                    for (x, z) in xs.iter().zip(zs) {
                        check_design(&id, n, x, z)?;
                    }
                    zs.iter().map(|z| z.ncols()).collect()
                }
            };
            match &nuisance_dims {
                None => nuisance_dims = Some(dims),
                Some(expected) => {
                    if *expected != dims {
                        return Err(Error::InvalidDataset(format!(
                            "cluster '{id}' has nuisance dimensions {dims:?}, expected {expected:?}"
                        )));
                    }
                }
            }

            total += n;
            blocks.push(ClusterBlock { id, n, ys, design });
        }

        Ok(Self {
            clusters: blocks,
            outcome_labels,
            nuisance_dims: nuisance_dims.expect("at least two clusters"),
            total_occasions: total,
            dropped_occasions,
        })
    }

    pub fn n_clusters(&self) -> usize {
        self.clusters.len()
    }

    pub fn n_outcomes(&self) -> usize {
        self.outcome_labels.len()
    }

    /// Total occasions `n = sum_j n_j`.
    pub fn total_occasions(&self) -> usize {
        self.total_occasions
    }

    /// Occasions removed by the listwise-deletion missing policy.
    pub fn dropped_occasions(&self) -> usize {
        self.dropped_occasions
    }

    pub fn cluster(&self, j: usize) -> &ClusterBlock {
        &self.clusters[j]
    }

    pub fn clusters(&self) -> &[ClusterBlock] {
        &self.clusters
    }

    pub fn cluster_ids(&self) -> impl Iterator<Item = &str> {
        self.clusters.iter().map(|c| c.id.as_str())
    }

    pub fn outcome_labels(&self) -> &[String] {
        &self.outcome_labels
    }

    /// Nuisance dimension `q_l` (constant across clusters).
    pub fn nuisance_dim(&self, outcome: usize) -> usize {
        self.nuisance_dims[outcome]
    }

    /// Exports the dataset back to long records, cluster-major then outcome
    /// then occasion. Re-ingesting the result reproduces the dataset.
    pub fn to_long_records(&self) -> Vec<LongRecord> {
        let mut records = Vec::with_capacity(self.total_occasions * self.n_outcomes());
        for cluster in &self.clusters {
            for (l, label) in self.outcome_labels.iter().enumerate() {
                let y = cluster.y(l);
                let x = cluster.x(l);
                let z = cluster.z(l);
                for i in 0..cluster.n() {
                    records.push(LongRecord {
                        cluster_id: cluster.id.clone(),
                        outcome_id: label.clone(),
                        y: y[i],
                        x: x[i],
                        z: z.row(i).iter().copied().collect(),
                        item_id: None,
                    });
                }
            }
        }
        records
    }
}

/// Collapses per-outcome designs that are identical across outcomes into the
/// shared representation, so equality of datasets does not depend on how the
/// designs were supplied.
fn canonicalize_design(design: DesignSpec, m: usize) -> DesignSpec {
    match design {
        DesignSpec::PerOutcome { xs, zs } if m >= 1 => {
            let all_same = xs.iter().all(|x| x == &xs[0]) && zs.iter().all(|z| z == &zs[0]);
            if all_same {
                DesignSpec::Shared {
                    x: xs.into_iter().next().expect("m >= 1"),
                    z: zs.into_iter().next().expect("m >= 1"),
                }
            } else {
                DesignSpec::PerOutcome { xs, zs }
            }
        }
        other => other,
    }
}

fn check_design(id: &str, n: usize, x: &DVector<f64>, z: &DMatrix<f64>) -> Result<()> {
    if x.len() != n {
        return Err(Error::InvalidDataset(format!(
            "cluster '{id}': covariate has {} rows, expected {n}",
            x.len()
        )));
    }
    if z.nrows() != n {
        return Err(Error::InvalidDataset(format!(
            "cluster '{id}': nuisance design has {} rows, expected {n}",
            z.nrows()
        )));
    }
    if x.iter().any(|v| !v.is_finite()) || z.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidDataset(format!(
            "non-finite design value in cluster '{id}'"
        )));
    }
    Ok(())
}
