//! Working weight matrices.
//!
//! Each outcome/cluster pair gets an SPD matrix `W_jl` approximating the
//! inverse within-cluster covariance, together with its symmetric PSD square
//! root `R_jl` (`R_jl * R_jl = W_jl`). The symmetric root — not a triangular
//! factor — is the canonical choice here because the clusterwise score
//! decomposition depends on how the weighted design is split across
//! clusters, and a single convention keeps runs reproducible.
//!
//! Weights only tune power; any SPD choice leaves the sign-flip calibration
//! valid. The default recommendation is the identity.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;
use std::io::Read;

use crate::data::ClusteredDataset;
use crate::data::HypothesisSpec;
use crate::error::{Error, Result};

const SYMMETRY_RTOL: f64 = 1e-10;
const PD_RTOL: f64 = 1e-10;

/// How a weight set was constructed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Identity,
    Diagonal,
    RandomIntercept,
    UserSupplied,
}

impl Provenance {
    pub fn as_str(&self) -> &'static str {
        match self {
            Provenance::Identity => "identity",
            Provenance::Diagonal => "diagonal",
            Provenance::RandomIntercept => "random_intercept",
            Provenance::UserSupplied => "user_supplied",
        }
    }
}

/// Moment estimates backing a random-intercept weight set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VarianceComponents {
    pub sigma_b2: f64,
    pub sigma_e2: f64,
}

/// One `(W_jl, R_jl)` pair. Identity and diagonal blocks are stored in
/// compact form; products against them avoid any matrix work.
#[derive(Debug, Clone, PartialEq)]
pub enum WeightBlock {
    Identity {
        n: usize,
    },
    Diagonal {
        /// Diagonal of `W` (inverse variances).
        w: DVector<f64>,
    },
    Dense {
        w: DMatrix<f64>,
        r: DMatrix<f64>,
    },
}

impl WeightBlock {
    pub fn dim(&self) -> usize {
        match self {
            WeightBlock::Identity { n } => *n,
            WeightBlock::Diagonal { w } => w.len(),
            WeightBlock::Dense { w, .. } => w.nrows(),
        }
    }

    /// `R v` — the weighted half-transform of a vector.
    pub fn r_mul(&self, v: &DVector<f64>) -> DVector<f64> {
        match self {
            WeightBlock::Identity { .. } => v.clone(),
            WeightBlock::Diagonal { w } => {
                DVector::from_fn(v.len(), |i, _| w[i].sqrt() * v[i])
            }
            WeightBlock::Dense { r, .. } => r * v,
        }
    }

    /// `W v`.
    pub fn w_mul(&self, v: &DVector<f64>) -> DVector<f64> {
        match self {
            WeightBlock::Identity { .. } => v.clone(),
            WeightBlock::Diagonal { w } => DVector::from_fn(v.len(), |i, _| w[i] * v[i]),
            WeightBlock::Dense { w, .. } => w * v,
        }
    }

    /// `W A` for a tall-skinny matrix `A` (used for `Z^T W Z` cross-products).
    pub fn w_mul_mat(&self, a: &DMatrix<f64>) -> DMatrix<f64> {
        match self {
            WeightBlock::Identity { .. } => a.clone(),
            WeightBlock::Diagonal { w } => {
                let mut out = a.clone();
                for (i, mut row) in out.row_iter_mut().enumerate() {
                    row *= w[i];
                }
                out
            }
            WeightBlock::Dense { w, .. } => w * a,
        }
    }

    /// Materializes `W` (for inspection and validation).
    pub fn w_matrix(&self) -> DMatrix<f64> {
        match self {
            WeightBlock::Identity { n } => DMatrix::identity(*n, *n),
            WeightBlock::Diagonal { w } => DMatrix::from_diagonal(w),
            WeightBlock::Dense { w, .. } => w.clone(),
        }
    }

    /// Materializes the symmetric PSD square root `R`.
    pub fn r_matrix(&self) -> DMatrix<f64> {
        match self {
            WeightBlock::Identity { n } => DMatrix::identity(*n, *n),
            WeightBlock::Diagonal { w } => {
                DMatrix::from_diagonal(&w.map(|v| v.sqrt()))
            }
            WeightBlock::Dense { r, .. } => r.clone(),
        }
    }
}

/// Validated working weights for every (outcome, cluster) pair.
#[derive(Debug, Clone)]
pub struct WorkingWeights {
    /// Indexed `[outcome][cluster]`.
    blocks: Vec<Vec<WeightBlock>>,
    provenance: Provenance,
    estimated_components: Option<Vec<VarianceComponents>>,
}

impl WorkingWeights {
    pub fn block(&self, outcome: usize, cluster: usize) -> &WeightBlock {
        &self.blocks[outcome][cluster]
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    /// Per-outcome `(sigma_b^2, sigma_e^2)` when moment-estimated.
    pub fn estimated_components(&self) -> Option<&[VarianceComponents]> {
        self.estimated_components.as_deref()
    }

    pub fn n_outcomes(&self) -> usize {
        self.blocks.len()
    }

    pub fn n_clusters(&self) -> usize {
        self.blocks.first().map_or(0, |b| b.len())
    }
}

/// `W_jl = I` for every block: the working-independence default.
pub fn identity_weights(dataset: &ClusteredDataset) -> WorkingWeights {
    let blocks = (0..dataset.n_outcomes())
        .map(|_| {
            dataset
                .clusters()
                .iter()
                .map(|c| WeightBlock::Identity { n: c.n() })
                .collect()
        })
        .collect();
    WorkingWeights {
        blocks,
        provenance: Provenance::Identity,
        estimated_components: None,
    }
}

/// Inverse-variance diagonal weights from per-occasion variance estimates.
///
/// `occasion_variances` holds one vector per cluster (length `n_j`), applied
/// to every outcome.
pub fn diagonal_weights(
    dataset: &ClusteredDataset,
    occasion_variances: &[Vec<f64>],
) -> Result<WorkingWeights> {
    if occasion_variances.len() != dataset.n_clusters() {
        return Err(Error::InvalidConfig(format!(
            "expected variance vectors for {} clusters, got {}",
            dataset.n_clusters(),
            occasion_variances.len()
        )));
    }
    let mut per_cluster = Vec::with_capacity(dataset.n_clusters());
    for (cluster, vars) in dataset.clusters().iter().zip(occasion_variances) {
        if vars.len() != cluster.n() {
            return Err(Error::InvalidConfig(format!(
                "cluster '{}' has {} occasions but {} variance estimates",
                cluster.id(),
                cluster.n(),
                vars.len()
            )));
        }
        for (i, v) in vars.iter().enumerate() {
            if !(v.is_finite() && *v > 0.0) {
                return Err(Error::NonPositiveVariance {
                    cluster: cluster.id().to_string(),
                    index: i,
                });
            }
        }
        per_cluster.push(WeightBlock::Diagonal {
            w: DVector::from_iterator(vars.len(), vars.iter().map(|v| 1.0 / v)),
        });
    }
    let blocks = (0..dataset.n_outcomes())
        .map(|_| per_cluster.clone())
        .collect();
    Ok(WorkingWeights {
        blocks,
        provenance: Provenance::Diagonal,
        estimated_components: None,
    })
}

/// Random-intercept working weights with one-way ANOVA moment estimates.
///
/// Per outcome, variance components are estimated from the residuals of the
/// pooled OLS fit of `y - x * beta0` on `Z` (the null model): the pooled
/// within-cluster residual variance gives `sigma_e^2`, the between-cluster
/// moment estimator (truncated at zero) gives `sigma_b^2`, and
/// `W_jl = (sigma_e^2 I + sigma_b^2 11')^{-1}` is formed in closed form via
/// the rank-one inverse identity.
pub fn random_intercept_weights(
    dataset: &ClusteredDataset,
    hypothesis: &HypothesisSpec,
) -> Result<WorkingWeights> {
    hypothesis.validate_against(dataset)?;
    let n_clusters = dataset.n_clusters();
    let total_n = dataset.total_occasions() as f64;

    let mut blocks = vec![Vec::new(); dataset.n_outcomes()];
    let mut components = vec![
        VarianceComponents {
            sigma_b2: 0.0,
            sigma_e2: 1.0,
        };
        dataset.n_outcomes()
    ];

    // Outcomes outside the tested set L keep identity blocks; the score
    // engine never touches them.
    for (l, block) in blocks.iter_mut().enumerate() {
        if !hypothesis.outcomes().contains(&l) {
            *block = dataset
                .clusters()
                .iter()
                .map(|c| WeightBlock::Identity { n: c.n() })
                .collect();
        }
    }

    for (k, &l) in hypothesis.outcomes().iter().enumerate() {
        let beta0 = hypothesis.beta0(k);
        let label = &dataset.outcome_labels()[l];
        let q = dataset.nuisance_dim(l);

        // Null-model residuals: offset the tested covariate into the
        // response, then project out the nuisance design by OLS.
        let residuals: Vec<DVector<f64>> = if q == 0 {
            dataset
                .clusters()
                .iter()
                .map(|c| c.y(l) - c.x(l) * beta0)
                .collect()
        } else {
            let mut ztz = DMatrix::zeros(q, q);
            let mut zte = DVector::zeros(q);
            for c in dataset.clusters() {
                let z = c.z(l);
                let e = c.y(l) - c.x(l) * beta0;
                ztz += z.transpose() * z;
                zte += z.transpose() * e;
            }
            let chol = spd_solver(&ztz).ok_or_else(|| Error::SingularNuisance {
                outcome: label.clone(),
                condition: condition_estimate(&ztz),
            })?;
            let gamma = chol.solve(&zte);
            dataset
                .clusters()
                .iter()
                .map(|c| c.y(l) - c.x(l) * beta0 - c.z(l) * &gamma)
                .collect()
        };

        // One-way ANOVA moments on the residuals (unbalanced design).
        let grand_mean: f64 =
            residuals.iter().map(|u| u.sum()).sum::<f64>() / total_n;
        let mut ssw = 0.0;
        let mut ssb = 0.0;
        let mut sum_nj2 = 0.0;
        for u in &residuals {
            let nj = u.len() as f64;
            let mean_j = u.sum() / nj;
            ssw += u.iter().map(|v| (v - mean_j).powi(2)).sum::<f64>();
            ssb += nj * (mean_j - grand_mean).powi(2);
            sum_nj2 += nj * nj;
        }
        let df_within = total_n - n_clusters as f64;
        if df_within <= 0.0 {
            return Err(Error::DegenerateResiduals {
                outcome: label.clone(),
            });
        }
        let sigma_e2 = ssw / df_within;
        if sigma_e2 <= 0.0 {
            return Err(Error::DegenerateResiduals {
                outcome: label.clone(),
            });
        }
        let msb = ssb / (n_clusters as f64 - 1.0);
        let c_coef = (total_n - sum_nj2 / total_n) / (n_clusters as f64 - 1.0);
        let sigma_b2 = ((msb - sigma_e2) / c_coef).max(0.0);

        components[l] = VarianceComponents { sigma_b2, sigma_e2 };
        blocks[l] = dataset
            .clusters()
            .iter()
            .map(|c| compound_symmetry_inverse_block(c.n(), sigma_e2, sigma_b2))
            .collect();
    }

    Ok(WorkingWeights {
        blocks,
        provenance: Provenance::RandomIntercept,
        estimated_components: Some(components),
    })
}

/// Closed-form inverse and symmetric root of `sigma_e^2 I + sigma_b^2 11'`.
///
/// Both `W` and `R` have the compound-symmetry form `a I + b 11'`; the two
/// eigenvalues are `a` (multiplicity n-1) and `a + n b` (eigenvector `1`).
fn compound_symmetry_inverse_block(n: usize, sigma_e2: f64, sigma_b2: f64) -> WeightBlock {
    if sigma_b2 == 0.0 {
        return WeightBlock::Diagonal {
            w: DVector::from_element(n, 1.0 / sigma_e2),
        };
    }
    let nf = n as f64;
    let a = 1.0 / sigma_e2;
    let b = -(sigma_b2 / (sigma_e2 + nf * sigma_b2)) / sigma_e2;
    let ones_eig = a + nf * b; // = 1 / (sigma_e2 + n * sigma_b2)
    let r_a = a.sqrt();
    let r_b = (ones_eig.sqrt() - a.sqrt()) / nf;

    let mut w = DMatrix::from_element(n, n, b);
    let mut r = DMatrix::from_element(n, n, r_b);
    for i in 0..n {
        w[(i, i)] += a;
        r[(i, i)] += r_a;
    }
    WeightBlock::Dense { w, r }
}

/// Pre-specified SPD matrices, validated and equipped with symmetric roots
/// computed by eigendecomposition. `matrices` is indexed `[outcome][cluster]`.
pub fn user_weights(
    dataset: &ClusteredDataset,
    matrices: Vec<Vec<DMatrix<f64>>>,
) -> Result<WorkingWeights> {
    if matrices.len() != dataset.n_outcomes() {
        return Err(Error::InvalidConfig(format!(
            "expected weight matrices for {} outcomes, got {}",
            dataset.n_outcomes(),
            matrices.len()
        )));
    }
    let labels = dataset.outcome_labels().to_vec();
    let clusters: Vec<(String, usize)> = dataset
        .clusters()
        .iter()
        .map(|c| (c.id().to_string(), c.n()))
        .collect();

    let blocks: Vec<Vec<WeightBlock>> = matrices
        .into_par_iter()
        .enumerate()
        .map(|(l, per_cluster)| {
            if per_cluster.len() != clusters.len() {
                return Err(Error::InvalidConfig(format!(
                    "outcome '{}': expected {} weight matrices, got {}",
                    labels[l],
                    clusters.len(),
                    per_cluster.len()
                )));
            }
            per_cluster
                .into_iter()
                .zip(&clusters)
                .map(|(w, (id, n))| validate_spd_block(w, id, &labels[l], *n))
                .collect()
        })
        .collect::<Result<_>>()?;

    Ok(WorkingWeights {
        blocks,
        provenance: Provenance::UserSupplied,
        estimated_components: None,
    })
}

fn validate_spd_block(
    w: DMatrix<f64>,
    cluster: &str,
    outcome: &str,
    n: usize,
) -> Result<WeightBlock> {
    if w.nrows() != n || w.ncols() != n {
        return Err(Error::InvalidConfig(format!(
            "weight matrix for cluster '{cluster}', outcome '{outcome}' is {}x{}, expected {n}x{n}",
            w.nrows(),
            w.ncols()
        )));
    }
    let scale = w.amax();
    if !w.iter().all(|v| v.is_finite()) {
        return Err(Error::InvalidConfig(format!(
            "non-finite weight entry for cluster '{cluster}', outcome '{outcome}'"
        )));
    }
    for i in 0..n {
        for k in (i + 1)..n {
            if (w[(i, k)] - w[(k, i)]).abs() > SYMMETRY_RTOL * scale.max(1e-300) {
                return Err(Error::NotSymmetric {
                    cluster: cluster.to_string(),
                    outcome: outcome.to_string(),
                });
            }
        }
    }
    // Symmetrize before decomposing so the root is exactly symmetric.
    let sym = (&w + w.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym.clone());
    let max_eig = eig.eigenvalues.max();
    let min_eig = eig.eigenvalues.min();
    if min_eig <= PD_RTOL * max_eig.max(0.0) {
        return Err(Error::NotPositiveDefinite {
            cluster: cluster.to_string(),
            outcome: outcome.to_string(),
            min_eig,
        });
    }
    let sqrt_vals = eig.eigenvalues.map(|v| v.sqrt());
    let r = &eig.eigenvectors * DMatrix::from_diagonal(&sqrt_vals) * eig.eigenvectors.transpose();
    Ok(WeightBlock::Dense { w: sym, r })
}

/// Loads user weights from a block-descriptor CSV with columns
/// `cluster_id, outcome_id, row, col, value` (0-based indices). Every block
/// must be fully specified; shapes are validated strictly.
pub fn read_weights_csv<R: Read>(
    reader: R,
    dataset: &ClusteredDataset,
) -> Result<WorkingWeights> {
    let mut csv_reader = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers = csv_reader.headers()?.clone();
    let col = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    };
    let c_cluster = col("cluster_id")?;
    let c_outcome = col("outcome_id")?;
    let c_row = col("row")?;
    let c_col = col("col")?;
    let c_value = col("value")?;

    let cluster_index: std::collections::HashMap<&str, usize> = dataset
        .cluster_ids()
        .enumerate()
        .map(|(i, id)| (id, i))
        .collect();
    let outcome_index: std::collections::HashMap<&str, usize> = dataset
        .outcome_labels()
        .iter()
        .enumerate()
        .map(|(i, id)| (id.as_str(), i))
        .collect();

    let mut matrices: Vec<Vec<DMatrix<f64>>> = dataset
        .outcome_labels()
        .iter()
        .map(|_| {
            dataset
                .clusters()
                .iter()
                .map(|c| DMatrix::zeros(c.n(), c.n()))
                .collect()
        })
        .collect();
    let mut filled: Vec<Vec<Vec<bool>>> = dataset
        .outcome_labels()
        .iter()
        .map(|_| {
            dataset
                .clusters()
                .iter()
                .map(|c| vec![false; c.n() * c.n()])
                .collect()
        })
        .collect();

    for (idx, row) in csv_reader.records().enumerate() {
        let row = row?;
        let data_row = idx + 1;
        let cid = row.get(c_cluster).unwrap_or("").trim();
        let oid = row.get(c_outcome).unwrap_or("").trim();
        let &j = cluster_index.get(cid).ok_or_else(|| {
            Error::InvalidConfig(format!("weights row {data_row}: unknown cluster '{cid}'"))
        })?;
        let &l = outcome_index.get(oid).ok_or_else(|| {
            Error::InvalidConfig(format!("weights row {data_row}: unknown outcome '{oid}'"))
        })?;
        let n = dataset.cluster(j).n();
        let parse_idx = |name: &str, i: usize| -> Result<usize> {
            row.get(i)
                .unwrap_or("")
                .trim()
                .parse::<usize>()
                .map_err(|_| {
                    Error::InvalidConfig(format!("weights row {data_row}: bad {name} index"))
                })
        };
        let r = parse_idx("row", c_row)?;
        let c = parse_idx("col", c_col)?;
        if r >= n || c >= n {
            return Err(Error::InvalidConfig(format!(
                "weights row {data_row}: index ({r},{c}) out of range for cluster '{cid}' (n={n})"
            )));
        }
        let value: f64 = row
            .get(c_value)
            .unwrap_or("")
            .trim()
            .parse()
            .map_err(|_| Error::NonFiniteValue {
                column: "value".into(),
                row: data_row,
            })?;
        if !value.is_finite() {
            return Err(Error::NonFiniteValue {
                column: "value".into(),
                row: data_row,
            });
        }
        matrices[l][j][(r, c)] = value;
        filled[l][j][r * n + c] = true;
    }

    for (l, per_cluster) in filled.iter().enumerate() {
        for (j, flags) in per_cluster.iter().enumerate() {
            if !flags.iter().all(|f| *f) {
                return Err(Error::InvalidConfig(format!(
                    "weight block for cluster '{}', outcome '{}' is incomplete",
                    dataset.cluster(j).id(),
                    dataset.outcome_labels()[l]
                )));
            }
        }
    }

    user_weights(dataset, matrices)
}

/// Loads per-occasion variance estimates for [`diagonal_weights`] from a CSV
/// with columns `cluster_id, occasion, variance` (occasions 0-based within
/// each cluster). Every occasion of every cluster must be covered.
pub fn read_variances_csv<R: Read>(
    reader: R,
    dataset: &ClusteredDataset,
) -> Result<Vec<Vec<f64>>> {
    let mut csv_reader = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers = csv_reader.headers()?.clone();
    let col = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    };
    let c_cluster = col("cluster_id")?;
    let c_occasion = col("occasion")?;
    let c_variance = col("variance")?;

    let cluster_index: std::collections::HashMap<&str, usize> = dataset
        .cluster_ids()
        .enumerate()
        .map(|(i, id)| (id, i))
        .collect();
    let mut values: Vec<Vec<Option<f64>>> = dataset
        .clusters()
        .iter()
        .map(|c| vec![None; c.n()])
        .collect();

    for (idx, row) in csv_reader.records().enumerate() {
        let row = row?;
        let data_row = idx + 1;
        let cid = row.get(c_cluster).unwrap_or("").trim();
        let &j = cluster_index.get(cid).ok_or_else(|| {
            Error::InvalidConfig(format!("variance row {data_row}: unknown cluster '{cid}'"))
        })?;
        let occasion: usize = row
            .get(c_occasion)
            .unwrap_or("")
            .trim()
            .parse()
            .map_err(|_| Error::InvalidConfig(format!("variance row {data_row}: bad occasion")))?;
        if occasion >= dataset.cluster(j).n() {
            return Err(Error::InvalidConfig(format!(
                "variance row {data_row}: occasion {occasion} out of range for cluster '{cid}'"
            )));
        }
        let variance: f64 = row
            .get(c_variance)
            .unwrap_or("")
            .trim()
            .parse()
            .map_err(|_| Error::NonFiniteValue {
                column: "variance".into(),
                row: data_row,
            })?;
        values[j][occasion] = Some(variance);
    }

    values
        .into_iter()
        .enumerate()
        .map(|(j, per_occasion)| {
            per_occasion
                .into_iter()
                .enumerate()
                .map(|(i, v)| {
                    v.ok_or_else(|| {
                        Error::InvalidConfig(format!(
                            "no variance given for cluster '{}', occasion {i}",
                            dataset.cluster(j).id()
                        ))
                    })
                })
                .collect()
        })
        .collect()
}

pub(crate) fn spd_solver(a: &DMatrix<f64>) -> Option<nalgebra::Cholesky<f64, nalgebra::Dyn>> {
    nalgebra::Cholesky::new(a.clone())
}

pub(crate) fn condition_estimate(a: &DMatrix<f64>) -> f64 {
    if a.nrows() == 0 {
        return 1.0;
    }
    let eig = SymmetricEigen::new(a.clone());
    let max = eig.eigenvalues.max();
    let min = eig.eigenvalues.min();
    if min <= 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}
