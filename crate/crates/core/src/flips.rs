//! Clusterwise sign-flip transformations and resampling p-values.
//!
//! A flip plan is a `B x N` matrix of Rademacher signs whose first row is
//! the identity. Applying a row to the score decomposition flips each
//! cluster's contribution with one sign shared by every outcome, which is
//! what preserves cross-outcome dependence in the resampled statistics.
//!
//! Monte Carlo rows are drawn from a counter-based stream: row `b` reads a
//! dedicated ChaCha8 stream keyed by `(seed, b)` and position `j` within the
//! stream corresponds to cluster `j`. Plans are therefore bit-identical
//! across runs, platforms and thread schedules.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::data::Alternative;
use crate::error::{Error, Result};
use crate::score::ScoreDecomposition;

/// Exhaustive enumeration cap: `2^20` rows.
pub const MAX_EXHAUSTIVE_CLUSTERS: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FlipMode {
    MonteCarlo { b: usize, seed: u64 },
    Exhaustive,
}

/// `B x N` sign matrix with the identity first.
#[derive(Debug, Clone)]
pub struct FlipPlan {
    signs: Vec<i8>,
    b: usize,
    n_clusters: usize,
    exhaustive: bool,
    seed: Option<u64>,
}

impl FlipPlan {
    pub fn n_flips(&self) -> usize {
        self.b
    }

    pub fn n_clusters(&self) -> usize {
        self.n_clusters
    }

    pub fn is_exhaustive(&self) -> bool {
        self.exhaustive
    }

    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    #[inline]
    pub fn sign(&self, flip: usize, cluster: usize) -> i8 {
        self.signs[flip * self.n_clusters + cluster]
    }

    pub fn row(&self, flip: usize) -> &[i8] {
        let start = flip * self.n_clusters;
        &self.signs[start..start + self.n_clusters]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[i8]> {
        self.signs.chunks_exact(self.n_clusters)
    }
}

/// Generates a flip plan. Monte Carlo mode draws rows `2..B` i.i.d. uniform
/// over `{-1,+1}^N`; exhaustive mode enumerates all `2^N` sign vectors with
/// the all-ones row first.
pub fn generate_flips(n_clusters: usize, mode: FlipMode) -> Result<FlipPlan> {
    match mode {
        FlipMode::MonteCarlo { b, seed } => {
            if b < 1 {
                return Err(Error::InvalidB);
            }
            let mut signs = vec![1i8; b * n_clusters];
            signs[n_clusters..]
                .par_chunks_exact_mut(n_clusters)
                .enumerate()
                .for_each(|(i, row)| {
                    // rows are numbered from 1 so that row b uses stream b
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    rng.set_stream((i + 1) as u64);
                    for s in row.iter_mut() {
                        *s = if rng.gen::<bool>() { 1 } else { -1 };
                    }
                });
            Ok(FlipPlan {
                signs,
                b,
                n_clusters,
                exhaustive: false,
                seed: Some(seed),
            })
        }
        FlipMode::Exhaustive => {
            if n_clusters > MAX_EXHAUSTIVE_CLUSTERS {
                return Err(Error::EnumerationTooLarge { n_clusters });
            }
            let b = 1usize << n_clusters;
            let mut signs = vec![1i8; b * n_clusters];
            for code in 0..b {
                for j in 0..n_clusters {
                    // cluster 0 is the most significant bit, so code 0 is the
                    // identity and the last cluster toggles fastest
                    if code >> (n_clusters - 1 - j) & 1 == 1 {
                        signs[code * n_clusters + j] = -1;
                    }
                }
            }
            Ok(FlipPlan {
                signs,
                b,
                n_clusters,
                exhaustive: true,
                seed: None,
            })
        }
    }
}

/// `B x |L|` matrix of sign-flipped score statistics.
#[derive(Debug, Clone)]
pub struct FlipScores {
    m: DMatrix<f64>,
    studentized: bool,
    /// Second-moment matrix of rows `2..B`: the Monte Carlo proxy for the
    /// limiting row covariance.
    empirical_row_cov: DMatrix<f64>,
    outcome_labels: Vec<String>,
}

impl FlipScores {
    /// The flip-score matrix; row 1 holds the observed statistics.
    pub fn m(&self) -> &DMatrix<f64> {
        &self.m
    }

    pub fn n_flips(&self) -> usize {
        self.m.nrows()
    }

    pub fn n_tested(&self) -> usize {
        self.m.ncols()
    }

    pub fn is_studentized(&self) -> bool {
        self.studentized
    }

    pub fn empirical_row_cov(&self) -> &DMatrix<f64> {
        &self.empirical_row_cov
    }

    pub fn outcome_labels(&self) -> &[String] {
        &self.outcome_labels
    }

    pub fn observed(&self, col: usize) -> f64 {
        self.m[(0, col)]
    }

    pub fn column(&self, col: usize) -> DVector<f64> {
        self.m.column(col).into_owned()
    }
}

/// Applies a flip plan to a score decomposition:
/// `[M]_bl = n^{-1/2} sum_j s_j^b zeta_jl`, divided by `sigma_hat_l` when
/// studentized. One sign per `(b, j)` pair is reused for every outcome.
pub fn flip_scores(
    decomposition: &ScoreDecomposition,
    plan: &FlipPlan,
    studentized: bool,
) -> Result<FlipScores> {
    let n_clusters = decomposition.n_clusters();
    if plan.n_clusters() != n_clusters {
        return Err(Error::DimensionMismatch(format!(
            "plan has {} clusters, decomposition has {n_clusters}",
            plan.n_clusters()
        )));
    }
    if studentized {
        if let Some(k) = decomposition.degenerate_outcome() {
            return Err(Error::DegenerateScore {
                outcome: decomposition.outcome_labels()[k].clone(),
            });
        }
    }

    let n_tested = decomposition.n_tested();
    let b = plan.n_flips();
    let zeta = decomposition.zeta();
    let inv_sqrt_n = 1.0 / (decomposition.n_total() as f64).sqrt();
    let scale: Vec<f64> = (0..n_tested)
        .map(|k| {
            if studentized {
                inv_sqrt_n / decomposition.sigma_hat()[k]
            } else {
                inv_sqrt_n
            }
        })
        .collect();

    let mut data = vec![0.0f64; b * n_tested];
    data.par_chunks_exact_mut(n_tested)
        .enumerate()
        .for_each(|(row, out)| {
            let signs = plan.row(row);
            for (k, slot) in out.iter_mut().enumerate() {
                let mut sum = 0.0;
                for (j, &s) in signs.iter().enumerate() {
                    sum += f64::from(s) * zeta[(j, k)];
                }
                *slot = sum * scale[k];
            }
        });
    let m = DMatrix::from_row_iterator(b, n_tested, data);

    let mut cov = DMatrix::zeros(n_tested, n_tested);
    if b > 1 {
        for row in 1..b {
            let r = m.row(row);
            for k1 in 0..n_tested {
                for k2 in k1..n_tested {
                    cov[(k1, k2)] += r[k1] * r[k2];
                }
            }
        }
        cov /= (b - 1) as f64;
        for k1 in 0..n_tested {
            for k2 in 0..k1 {
                cov[(k1, k2)] = cov[(k2, k1)];
            }
        }
    }

    Ok(FlipScores {
        m,
        studentized,
        empirical_row_cov: cov,
        outcome_labels: decomposition.outcome_labels().to_vec(),
    })
}

/// Resampling p-value: the share of flips whose statistic reaches the
/// observed one, ties counted in favor of the null. The first entry is the
/// observed statistic, so `p >= 1/B` always.
pub fn p_value(t: &[f64]) -> f64 {
    let observed = t[0];
    let count = t.iter().filter(|&&v| v >= observed).count();
    count as f64 / t.len() as f64
}

/// Univariate directional p-value from column `col` of the flip-score
/// matrix.
pub fn directional_p(scores: &FlipScores, col: usize, alternative: Alternative) -> f64 {
    let column = scores.m.column(col);
    let transformed: Vec<f64> = match alternative {
        Alternative::Greater => column.iter().copied().collect(),
        Alternative::Less => column.iter().map(|v| -v).collect(),
        Alternative::TwoSided => column.iter().map(|v| v.abs()).collect(),
    };
    p_value(&transformed)
}
