//! Profiled score decomposition.
//!
//! For each tested outcome `l`, the nuisance coefficients are profiled out
//! under the null by a weighted least-squares solve, and the effective score
//! for the coefficient under test is split into clusterwise contributions
//!
//! ```text
//! zeta_jl = [(I - H_l) W_l^{1/2} x_l]_j' [W_l^{1/2} (y_l - mu_hat_l)]_j
//! ```
//!
//! where `H_l` is the weighted projection onto the nuisance columns. The
//! projection is applied through one SPD factorization of `Z_l' W_l Z_l`
//! per outcome — `O(n q^2)` — and the `n x n` projector is never formed.
//! Summing the contributions recovers the profiled score; flipping their
//! signs clusterwise is what calibrates the test.

use nalgebra::{DMatrix, DVector};

use crate::data::{ClusteredDataset, HypothesisSpec};
use crate::error::{Error, Result};
use crate::weights::{condition_estimate, spd_solver, WorkingWeights};

/// Condition-number cap for the nuisance cross-product. Beyond this the
/// solve is refused rather than silently regularized, because a pseudo
/// inverse would change the null projection and therefore the test.
const CONDITION_LIMIT: f64 = 1e12;

/// Clusterwise score contributions for the tested outcomes.
#[derive(Debug, Clone)]
pub struct ScoreDecomposition {
    /// `N x |L|` matrix of contributions `zeta_jl`.
    zeta: DMatrix<f64>,
    /// Marginal score statistics `S_l = n^{-1/2} sum_j zeta_jl`.
    s: DVector<f64>,
    /// Marginal scale estimates `sigma_hat_l = sqrt(n^{-1} sum_j zeta_jl^2)`.
    sigma_hat: DVector<f64>,
    /// Profiled nuisance estimates, one per tested outcome.
    gamma_hat: Vec<DVector<f64>>,
    /// Fitted null means, `[tested outcome][cluster]`.
    mu_hat: Vec<Vec<DVector<f64>>>,
    n_total: usize,
    /// Dataset outcome indices in test order.
    outcome_indices: Vec<usize>,
    outcome_labels: Vec<String>,
}

impl ScoreDecomposition {
    pub fn zeta(&self) -> &DMatrix<f64> {
        &self.zeta
    }

    pub fn s(&self) -> &DVector<f64> {
        &self.s
    }

    pub fn sigma_hat(&self) -> &DVector<f64> {
        &self.sigma_hat
    }

    pub fn gamma_hat(&self, k: usize) -> &DVector<f64> {
        &self.gamma_hat[k]
    }

    pub fn mu_hat(&self, k: usize, cluster: usize) -> &DVector<f64> {
        &self.mu_hat[k][cluster]
    }

    /// Total occasions `n`.
    pub fn n_total(&self) -> usize {
        self.n_total
    }

    pub fn n_clusters(&self) -> usize {
        self.zeta.nrows()
    }

    /// Number of tested outcomes `|L|`.
    pub fn n_tested(&self) -> usize {
        self.zeta.ncols()
    }

    pub fn outcome_indices(&self) -> &[usize] {
        &self.outcome_indices
    }

    pub fn outcome_labels(&self) -> &[String] {
        &self.outcome_labels
    }

    /// Index of the first tested outcome with `sigma_hat = 0`, if any.
    pub fn degenerate_outcome(&self) -> Option<usize> {
        (0..self.n_tested()).find(|&k| self.sigma_hat[k] == 0.0)
    }

    /// Marginally studentized scores `S_l / sigma_hat_l`.
    pub fn studentized(&self) -> Result<DVector<f64>> {
        if let Some(k) = self.degenerate_outcome() {
            return Err(Error::DegenerateScore {
                outcome: self.outcome_labels[k].clone(),
            });
        }
        Ok(DVector::from_fn(self.n_tested(), |k, _| {
            self.s[k] / self.sigma_hat[k]
        }))
    }
}

/// Profiled nuisance estimate for one tested outcome.
///
/// Solves `(sum_j Z_jl' W_jl Z_jl) gamma = sum_j Z_jl' W_jl (y_jl - x_jl b0)`
/// by Cholesky; returns the empty vector when the outcome has no nuisance
/// columns.
pub fn profile_nuisance(
    dataset: &ClusteredDataset,
    weights: &WorkingWeights,
    hypothesis: &HypothesisSpec,
    outcome: usize,
) -> Result<DVector<f64>> {
    let k = hypothesis
        .outcomes()
        .iter()
        .position(|&l| l == outcome)
        .ok_or_else(|| {
            Error::InvalidConfig(format!("outcome index {outcome} is not under test"))
        })?;
    let solve = NuisanceSolve::build(dataset, weights, outcome, hypothesis.beta0(k))?;
    Ok(solve.gamma)
}

/// The per-outcome pieces shared by the nuisance estimate and the score
/// decomposition: `gamma_hat` and the coefficient `c` with
/// `H_l W^{1/2} x = W^{1/2} Z c`.
struct NuisanceSolve {
    gamma: DVector<f64>,
    xc: DVector<f64>,
}

impl NuisanceSolve {
    fn build(
        dataset: &ClusteredDataset,
        weights: &WorkingWeights,
        outcome: usize,
        beta0: f64,
    ) -> Result<Self> {
        let q = dataset.nuisance_dim(outcome);
        if q == 0 {
            return Ok(Self {
                gamma: DVector::zeros(0),
                xc: DVector::zeros(0),
            });
        }
        let label = &dataset.outcome_labels()[outcome];
        let mut gram = DMatrix::zeros(q, q);
        let mut zte = DVector::zeros(q);
        let mut ztx = DVector::zeros(q);
        for (j, cluster) in dataset.clusters().iter().enumerate() {
            let z = cluster.z(outcome);
            let block = weights.block(outcome, j);
            let wz = block.w_mul_mat(z);
            gram += z.transpose() * &wz;
            let e = cluster.y(outcome) - cluster.x(outcome) * beta0;
            zte += wz.transpose() * e;
            ztx += wz.transpose() * cluster.x(outcome);
        }
        let condition = condition_estimate(&gram);
        if !condition.is_finite() || condition > CONDITION_LIMIT {
            return Err(Error::SingularNuisance {
                outcome: label.clone(),
                condition,
            });
        }
        let chol = spd_solver(&gram).ok_or(Error::SingularNuisance {
            outcome: label.clone(),
            condition,
        })?;
        Ok(Self {
            gamma: chol.solve(&zte),
            xc: chol.solve(&ztx),
        })
    }
}

/// Computes the full clusterwise score decomposition for the hypothesis.
///
/// A zero `sigma_hat_l` (all contributions vanish, e.g. a perfect null fit)
/// is recorded, not an error; studentized consumers fail later with
/// `DegenerateScore`.
pub fn cluster_scores(
    dataset: &ClusteredDataset,
    weights: &WorkingWeights,
    hypothesis: &HypothesisSpec,
) -> Result<ScoreDecomposition> {
    hypothesis.validate_against(dataset)?;
    let n_clusters = dataset.n_clusters();
    let n_total = dataset.total_occasions();
    let n_tested = hypothesis.outcomes().len();
    let inv_sqrt_n = 1.0 / (n_total as f64).sqrt();

    let mut zeta = DMatrix::zeros(n_clusters, n_tested);
    let mut gamma_hat = Vec::with_capacity(n_tested);
    let mut mu_hat = Vec::with_capacity(n_tested);

    for (k, &l) in hypothesis.outcomes().iter().enumerate() {
        let beta0 = hypothesis.beta0(k);
        let solve = NuisanceSolve::build(dataset, weights, l, beta0)?;
        let q = dataset.nuisance_dim(l);
        let mut mu_l = Vec::with_capacity(n_clusters);
        for (j, cluster) in dataset.clusters().iter().enumerate() {
            let block = weights.block(l, j);
            let x = cluster.x(l);
            let mu = if q == 0 {
                x * beta0
            } else {
                x * beta0 + cluster.z(l) * &solve.gamma
            };
            let residual = cluster.y(l) - &mu;
            // a_j = R_j (x_j - Z_j c), the cluster slice of (I - H) W^{1/2} x
            let a = if q == 0 {
                block.r_mul(x)
            } else {
                block.r_mul(&(x - cluster.z(l) * &solve.xc))
            };
            let r = block.r_mul(&residual);
            zeta[(j, k)] = a.dot(&r);
            mu_l.push(mu);
        }
        gamma_hat.push(solve.gamma);
        mu_hat.push(mu_l);
    }

    let mut s = DVector::zeros(n_tested);
    let mut sigma_hat = DVector::zeros(n_tested);
    for k in 0..n_tested {
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        for j in 0..n_clusters {
            let z = zeta[(j, k)];
            sum += z;
            sum_sq += z * z;
        }
        s[k] = sum * inv_sqrt_n;
        sigma_hat[k] = (sum_sq / n_total as f64).sqrt();
    }

    let outcome_labels = hypothesis
        .outcomes()
        .iter()
        .map(|&l| dataset.outcome_labels()[l].clone())
        .collect();

    Ok(ScoreDecomposition {
        zeta,
        s,
        sigma_hat,
        gamma_hat,
        mu_hat,
        n_total,
        outcome_indices: hypothesis.outcomes().to_vec(),
        outcome_labels,
    })
}

/// Studentizes a decomposition; errors if any tested outcome has zero scale.
pub fn studentize(decomposition: &ScoreDecomposition) -> Result<DVector<f64>> {
    decomposition.studentized()
}
