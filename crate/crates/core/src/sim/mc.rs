//! Monte Carlo comparison of testing methods on simulated scenarios.
//!
//! Replicates are independent jobs: replicate `r` derives its data and flip
//! seeds from the master seed through a SplitMix64 step, so any single
//! replicate can be re-run in isolation and the aggregate is bit-identical
//! regardless of worker scheduling (rates are exact ratios of integer
//! counts).

use std::sync::Arc;

use rayon::prelude::*;

use crate::baselines::BaselineMethod;
use crate::combine::{holm, Combiner};
use crate::data::{ClusteredDataset, HypothesisSpec};
use crate::error::{Error, Result};
use crate::report::{run_baseline_test, run_clip_test, ClipOptions};
use crate::weights::{identity_weights, random_intercept_weights, WorkingWeights};

use super::{generate, true_weights, ScenarioConfig, ScenarioKind};

/// Testing method compared by the harness.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    ClipIdentity,
    ClipRandomIntercept,
    ClipTrue,
    /// Sign-flip test with caller-provided weights (library use only; needs
    /// [`MonteCarloOptions::user_weights`]).
    ClipUser,
    Ols,
    Hc3,
    ClusterSandwich,
}

impl Method {
    pub fn as_str(&self) -> &'static str {
        match self {
            Method::ClipIdentity => "clip_identity",
            Method::ClipRandomIntercept => "clip_ranint",
            Method::ClipTrue => "clip_true",
            Method::ClipUser => "clip_user",
            Method::Ols => "ols",
            Method::Hc3 => "hc3",
            Method::ClusterSandwich => "cluster_sandwich",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "clip_identity" => Ok(Method::ClipIdentity),
            "clip_ranint" | "clip_random_intercept" => Ok(Method::ClipRandomIntercept),
            "clip_true" => Ok(Method::ClipTrue),
            "clip_user" => Ok(Method::ClipUser),
            "ols" | "lm" => Ok(Method::Ols),
            "hc3" => Ok(Method::Hc3),
            "cluster_sandwich" | "gee" => Ok(Method::ClusterSandwich),
            other => Err(Error::UnknownMethod(other.to_string())),
        }
    }
}

/// Builds weights for each replicate when running [`Method::ClipUser`].
pub type UserWeightsProvider =
    Arc<dyn Fn(&ClusteredDataset) -> Result<WorkingWeights> + Send + Sync>;

#[derive(Clone)]
pub struct MonteCarloOptions {
    pub reps: usize,
    pub alpha: f64,
    /// Flips per sign-flip test, including the identity.
    pub n_flips: usize,
    pub methods: Vec<Method>,
    /// Weight source for [`Method::ClipUser`].
    pub user_weights: Option<UserWeightsProvider>,
    /// Label copied into the result rows.
    pub scenario_label: String,
}

impl Default for MonteCarloOptions {
    fn default() -> Self {
        Self {
            reps: 1000,
            alpha: 0.05,
            n_flips: 1000,
            methods: vec![Method::ClipIdentity],
            user_weights: None,
            scenario_label: String::new(),
        }
    }
}

/// One aggregated rejection rate.
#[derive(Debug, Clone, PartialEq)]
pub struct RateRow {
    pub scenario: String,
    pub method: String,
    pub n_clusters: usize,
    /// What the rate measures: `global`, `fwer`, or `outcome:<label>`.
    pub parameter: String,
    pub rate: f64,
    /// 95% binomial band around the estimate.
    pub lo: f64,
    pub hi: f64,
    pub reps: usize,
}

#[derive(Debug, Clone)]
pub struct MonteCarloResult {
    pub rows: Vec<RateRow>,
    pub reps: usize,
    /// Seconds spent, excluded from the CSV so output stays reproducible.
    pub wall_seconds: f64,
}

impl MonteCarloResult {
    /// Rate for a method/parameter pair, if present.
    pub fn rate(&self, method: Method, parameter: &str) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.method == method.as_str() && r.parameter == parameter)
            .map(|r| r.rate)
    }

    /// Tidy CSV with header `scenario,method,N,parameter,rate,lo,hi,reps`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("scenario,method,N,parameter,rate,lo,hi,reps\n");
        for row in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{:.6},{:.6},{}\n",
                row.scenario,
                row.method,
                row.n_clusters,
                row.parameter,
                row.rate,
                row.lo,
                row.hi,
                row.reps
            ));
        }
        out
    }
}

/// Data and flip seeds for one replicate, derived from the master seed with
/// a SplitMix64 mix so replicates are re-runnable in isolation.
pub fn derive_rep_seeds(master_seed: u64, rep: usize) -> (u64, u64) {
    (
        splitmix64(master_seed, 2 * rep as u64),
        splitmix64(master_seed, 2 * rep as u64 + 1),
    )
}

fn splitmix64(seed: u64, index: u64) -> u64 {
    let mut z = seed.wrapping_add(index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Rejection flags from one method on one replicate.
struct RepOutcome {
    global: bool,
    per_outcome: Vec<bool>,
}

fn run_method(
    method: Method,
    dataset: &ClusteredDataset,
    config: &ScenarioConfig,
    opts: &MonteCarloOptions,
    flip_seed: u64,
) -> Result<RepOutcome> {
    let hypothesis = HypothesisSpec::global_null(dataset);
    match method {
        Method::ClipIdentity | Method::ClipRandomIntercept | Method::ClipTrue | Method::ClipUser => {
            let weights = match method {
                Method::ClipIdentity => identity_weights(dataset),
                Method::ClipRandomIntercept => random_intercept_weights(dataset, &hypothesis)?,
                Method::ClipTrue => true_weights(dataset, config)?,
                Method::ClipUser => {
                    let provider = opts.user_weights.as_ref().ok_or_else(|| {
                        Error::InvalidConfig(
                            "clip_user needs a weights provider (library API only)".into(),
                        )
                    })?;
                    provider(dataset)?
                }
                _ => unreachable!(),
            };
            let clip_opts = ClipOptions {
                n_flips: opts.n_flips,
                seed: flip_seed,
                exhaustive: false,
                studentize: true,
                combiner: Combiner::MaxAbs,
            };
            let run = run_clip_test(dataset, &weights, &hypothesis, &clip_opts)?;
            Ok(RepOutcome {
                global: run.report.global_p <= opts.alpha,
                per_outcome: run
                    .report
                    .per_outcome
                    .iter()
                    .map(|o| o.adjusted_p <= opts.alpha)
                    .collect(),
            })
        }
        Method::Ols | Method::Hc3 | Method::ClusterSandwich => {
            let baseline = match method {
                Method::Ols => BaselineMethod::Ols,
                Method::Hc3 => BaselineMethod::Hc3,
                _ => BaselineMethod::ClusterSandwich,
            };
            let report = run_baseline_test(dataset, &hypothesis, baseline, opts.alpha)?;
            let raw: Vec<f64> = report.per_outcome.iter().map(|o| o.raw_p).collect();
            let (_, rejected) = holm(&raw, opts.alpha);
            Ok(RepOutcome {
                global: report.global_p <= opts.alpha,
                per_outcome: rejected,
            })
        }
    }
}

/// Runs the Monte Carlo comparison. For multivariate scenarios the rows
/// include the familywise error rate over the true-null outcomes
/// (`beta_l = 0`) and a per-outcome rejection rate per outcome; univariate
/// and crossed scenarios report the global test.
pub fn run_monte_carlo(
    config: &ScenarioConfig,
    opts: &MonteCarloOptions,
) -> Result<MonteCarloResult> {
    config.validate()?;
    if opts.reps == 0 {
        return Err(Error::InvalidConfig("reps must be at least 1".into()));
    }
    if opts.methods.is_empty() {
        return Err(Error::InvalidConfig("no methods selected".into()));
    }
    let start = std::time::Instant::now();
    let n_methods = opts.methods.len();
    let m_outcomes = config.n_outcomes();

    let per_rep: Vec<Vec<RepOutcome>> = (0..opts.reps)
        .into_par_iter()
        .map(|rep| -> Result<Vec<RepOutcome>> {
            let (data_seed, flip_seed) = derive_rep_seeds(config.seed, rep);
            let mut rep_config = config.clone();
            rep_config.seed = data_seed;
            let dataset = generate(&rep_config)?;
            opts.methods
                .iter()
                .map(|&method| run_method(method, &dataset, config, opts, flip_seed))
                .collect()
        })
        .collect::<Result<_>>()?;

    // order-independent integer aggregation
    let mut global_counts = vec![0usize; n_methods];
    let mut fwer_counts = vec![0usize; n_methods];
    let mut outcome_counts = vec![vec![0usize; m_outcomes]; n_methods];
    let null_outcomes: Vec<usize> = (0..m_outcomes)
        .filter(|&l| {
            let beta = if config.beta.len() == 1 {
                config.beta[0]
            } else {
                config.beta[l]
            };
            beta == 0.0
        })
        .collect();

    for rep in &per_rep {
        for (mi, outcome) in rep.iter().enumerate() {
            if outcome.global {
                global_counts[mi] += 1;
            }
            if null_outcomes.iter().any(|&l| outcome.per_outcome[l]) {
                fwer_counts[mi] += 1;
            }
            for (l, rejected) in outcome.per_outcome.iter().enumerate() {
                if *rejected {
                    outcome_counts[mi][l] += 1;
                }
            }
        }
    }

    let reps = opts.reps;
    let band = |rate: f64| -> (f64, f64) {
        let se = (rate * (1.0 - rate) / reps as f64).sqrt();
        ((rate - 1.96 * se).max(0.0), (rate + 1.96 * se).min(1.0))
    };
    let outcome_labels: Vec<String> = (1..=m_outcomes).map(|l| format!("y{l}")).collect();

    let mut rows = Vec::new();
    for (mi, &method) in opts.methods.iter().enumerate() {
        let mut push = |parameter: String, count: usize| {
            let rate = count as f64 / reps as f64;
            let (lo, hi) = band(rate);
            rows.push(RateRow {
                scenario: opts.scenario_label.clone(),
                method: method.as_str().to_string(),
                n_clusters: config.n_clusters,
                parameter,
                rate,
                lo,
                hi,
                reps,
            });
        };
        push("global".into(), global_counts[mi]);
        if config.kind == ScenarioKind::Multivariate {
            push("fwer".into(), fwer_counts[mi]);
            for (l, label) in outcome_labels.iter().enumerate() {
                push(format!("outcome:{label}"), outcome_counts[mi][l]);
            }
        }
    }

    Ok(MonteCarloResult {
        rows,
        reps,
        wall_seconds: start.elapsed().as_secs_f64(),
    })
}
