//! Global combining and multiplicity adjustment.
//!
//! Marginal flip scores are collapsed into one statistic per flip by a
//! coordinate-wise non-decreasing function of the absolute scores. The
//! global p-value comes from the flip distribution of that statistic; the
//! per-outcome adjusted p-values use the single-step max-T rule, comparing
//! each observed |score| against the flip distribution of the rowwise
//! maximum. Holm's step-down correction is provided for the classical
//! baselines.

use crate::data::Alternative;
use crate::error::{Error, Result};
use crate::flips::{directional_p, p_value, FlipScores};

/// Combining function applied to the absolute marginal scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Combiner {
    /// Rowwise maximum of |score| (the max-T statistic).
    #[default]
    MaxAbs,
    /// Rowwise sum of |score|.
    SumAbs,
}

impl Combiner {
    pub fn as_str(&self) -> &'static str {
        match self {
            Combiner::MaxAbs => "max_abs",
            Combiner::SumAbs => "sum_abs",
        }
    }
}

impl std::str::FromStr for Combiner {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "maxT" | "max_t" | "max_abs" | "maxabs" => Ok(Combiner::MaxAbs),
            "sumabs" | "sum_abs" => Ok(Combiner::SumAbs),
            other => Err(Error::UnknownCombiner(other.to_string())),
        }
    }
}

/// Combined statistic per flip: `T_b = psi(|M_b1|, ..., |M_b|L||)`.
pub fn combine(scores: &FlipScores, combiner: Combiner) -> Vec<f64> {
    let m = scores.m();
    (0..m.nrows())
        .map(|b| {
            let row = m.row(b);
            match combiner {
                Combiner::MaxAbs => row.iter().fold(0.0f64, |acc, v| acc.max(v.abs())),
                Combiner::SumAbs => row.iter().map(|v| v.abs()).sum(),
            }
        })
        .collect()
}

/// Single-step max-T adjusted p-values:
/// `adj_l = B^{-1} sum_b 1{ max_k |M_bk| >= |M_1l| }`.
pub fn max_t_adjusted(scores: &FlipScores) -> Vec<f64> {
    let m = scores.m();
    let b = m.nrows() as f64;
    let row_max: Vec<f64> = (0..m.nrows())
        .map(|r| m.row(r).iter().fold(0.0f64, |acc, v| acc.max(v.abs())))
        .collect();
    (0..m.ncols())
        .map(|l| {
            let observed = m[(0, l)].abs();
            let count = row_max.iter().filter(|&&v| v >= observed).count();
            count as f64 / b
        })
        .collect()
}

/// Holm step-down adjusted p-values with rejection flags at level `alpha`.
pub fn holm(p: &[f64], alpha: f64) -> (Vec<f64>, Vec<bool>) {
    let m = p.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| p[a].partial_cmp(&p[b]).unwrap_or(std::cmp::Ordering::Equal));

    let mut adjusted = vec![0.0; m];
    let mut running_max = 0.0f64;
    for (rank, &idx) in order.iter().enumerate() {
        let scaled = ((m - rank) as f64 * p[idx]).min(1.0);
        running_max = running_max.max(scaled);
        adjusted[idx] = running_max;
    }
    let rejected = adjusted.iter().map(|&a| a <= alpha).collect();
    (adjusted, rejected)
}

/// Global and per-outcome results of combining a flip-score matrix.
#[derive(Debug, Clone)]
pub struct CombinedTest {
    pub psi: Combiner,
    /// Combined statistic per flip; entry 0 is the observed value.
    pub t: Vec<f64>,
    pub global_p: f64,
    /// Single-step max-T adjusted p-values per tested outcome.
    pub adjusted_p: Vec<f64>,
    /// Per-outcome two-sided flip p-values.
    pub raw_p: Vec<f64>,
}

/// Runs the full combining pipeline on a flip-score matrix.
pub fn combined_test(scores: &FlipScores, combiner: Combiner) -> CombinedTest {
    let t = combine(scores, combiner);
    let global_p = p_value(&t);
    let raw_p = (0..scores.n_tested())
        .map(|k| directional_p(scores, k, Alternative::TwoSided))
        .collect();
    let adjusted_p = max_t_adjusted(scores);
    CombinedTest {
        psi: combiner,
        t,
        global_p,
        adjusted_p,
        raw_p,
    }
}
