//! Test reports and the end-to-end testing pipeline.
//!
//! [`run_clip_test`] wires the score decomposition, the flip plan, the
//! directional p-values and the max-T adjustment into one call and returns a
//! serializable [`TestReport`]. The same JSON shape is emitted for the
//! classical baselines (with Holm in place of max-T) so downstream tooling
//! can consume either.

use serde::{Deserialize, Serialize};

use crate::baselines::{baseline_test, BaselineMethod};
use crate::combine::{combined_test, holm, Combiner};
use crate::data::{Alternative, ClusteredDataset, HypothesisSpec};
use crate::error::{Error, Result};
use crate::flips::{directional_p, flip_scores, generate_flips, FlipMode, FlipScores};
use crate::score::{cluster_scores, ScoreDecomposition};
use crate::weights::WorkingWeights;

pub const REPORT_SCHEMA_VERSION: &str = "clip-report/1";

/// Options for one sign-flip test run.
#[derive(Debug, Clone)]
pub struct ClipOptions {
    /// Total number of flips including the identity.
    pub n_flips: usize,
    pub seed: u64,
    /// Enumerate all `2^N` flips instead of sampling.
    pub exhaustive: bool,
    /// Studentize scores before combining (the default).
    pub studentize: bool,
    pub combiner: Combiner,
}

impl Default for ClipOptions {
    fn default() -> Self {
        Self {
            n_flips: 1000,
            seed: 0,
            exhaustive: false,
            studentize: true,
            combiner: Combiner::MaxAbs,
        }
    }
}

/// Reproducibility metadata recorded alongside a report.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RunManifest {
    pub command: String,
    pub software_version: String,
    pub seed: Option<u64>,
    pub timestamp: String,
    pub digest_algorithm: String,
    pub config_digest: String,
    pub input_digests: Vec<InputDigest>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct InputDigest {
    pub path: String,
    pub digest: String,
}

/// Per-outcome block of a report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OutcomeReport {
    pub outcome_id: String,
    pub raw_p: f64,
    pub adjusted_p: f64,
    pub s: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub s_studentized: Option<f64>,
}

/// Serializable result of a test run (sign-flip or baseline).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TestReport {
    pub schema_version: String,
    pub method: String,
    pub global_p: f64,
    pub per_outcome: Vec<OutcomeReport>,
    pub psi: String,
    pub b: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub flip_mode: String,
    pub alternative: String,
    pub studentized: bool,
    pub weights_provenance: String,
    pub n_clusters: usize,
    pub n_total: usize,
    pub dropped_occasions: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub variance_components: Option<Vec<VarianceComponentsReport>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub manifest: Option<RunManifest>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VarianceComponentsReport {
    pub outcome_id: String,
    pub sigma_b2: f64,
    pub sigma_e2: f64,
}

impl TestReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialization cannot fail")
    }
}

/// Intermediate artifacts of a sign-flip run, for diagnostics dumps.
pub struct ClipRun {
    pub decomposition: ScoreDecomposition,
    pub scores: FlipScores,
    pub report: TestReport,
}

/// Runs the sign-flip score test and assembles the report.
///
/// One-sided alternatives are only defined for a single tested outcome; the
/// multivariate combination always works on absolute scores.
pub fn run_clip_test(
    dataset: &ClusteredDataset,
    weights: &WorkingWeights,
    hypothesis: &HypothesisSpec,
    options: &ClipOptions,
) -> Result<ClipRun> {
    let n_tested = hypothesis.outcomes().len();
    if n_tested > 1 && hypothesis.alternative() != Alternative::TwoSided {
        return Err(Error::InvalidConfig(
            "one-sided alternatives are only supported for a single tested outcome".into(),
        ));
    }

    let decomposition = cluster_scores(dataset, weights, hypothesis)?;
    let mode = if options.exhaustive {
        FlipMode::Exhaustive
    } else {
        FlipMode::MonteCarlo {
            b: options.n_flips,
            seed: options.seed,
        }
    };
    let plan = generate_flips(dataset.n_clusters(), mode)?;
    let scores = flip_scores(&decomposition, &plan, options.studentize)?;

    let combined = combined_test(&scores, options.combiner);
    let (global_p, raw_p, adjusted_p) = if n_tested == 1 {
        // the univariate path honors the directional alternative and has no
        // multiplicity to adjust for
        let p = directional_p(&scores, 0, hypothesis.alternative());
        (p, vec![p], vec![p])
    } else {
        (combined.global_p, combined.raw_p, combined.adjusted_p)
    };

    let studentized_obs = if options.studentize {
        Some(decomposition.studentized()?)
    } else {
        None
    };

    let per_outcome = (0..n_tested)
        .map(|k| OutcomeReport {
            outcome_id: decomposition.outcome_labels()[k].clone(),
            raw_p: raw_p[k],
            adjusted_p: adjusted_p[k],
            s: decomposition.s()[k],
            s_studentized: studentized_obs.as_ref().map(|v| v[k]),
        })
        .collect();

    let variance_components = weights.estimated_components().map(|comps| {
        decomposition
            .outcome_indices()
            .iter()
            .map(|&l| VarianceComponentsReport {
                outcome_id: dataset.outcome_labels()[l].clone(),
                sigma_b2: comps[l].sigma_b2,
                sigma_e2: comps[l].sigma_e2,
            })
            .collect()
    });

    let report = TestReport {
        schema_version: REPORT_SCHEMA_VERSION.into(),
        method: "clip".into(),
        global_p,
        per_outcome,
        psi: options.combiner.as_str().into(),
        b: plan.n_flips(),
        seed: plan.seed(),
        flip_mode: if plan.is_exhaustive() {
            "exhaustive".into()
        } else {
            "monte_carlo".into()
        },
        alternative: hypothesis.alternative().as_str().into(),
        studentized: options.studentize,
        weights_provenance: weights.provenance().as_str().into(),
        n_clusters: dataset.n_clusters(),
        n_total: dataset.total_occasions(),
        dropped_occasions: dataset.dropped_occasions(),
        variance_components,
        manifest: None,
    };

    Ok(ClipRun {
        decomposition,
        scores,
        report,
    })
}

/// Runs a classical baseline on every tested outcome, Holm-adjusted. The
/// global p is the smallest adjusted p-value (the intersection test implied
/// by the Holm procedure).
pub fn run_baseline_test(
    dataset: &ClusteredDataset,
    hypothesis: &HypothesisSpec,
    method: BaselineMethod,
    alpha: f64,
) -> Result<TestReport> {
    let fits: Vec<_> = hypothesis
        .outcomes()
        .iter()
        .map(|&l| baseline_test(dataset, l, hypothesis, method))
        .collect::<Result<_>>()?;
    let raw_p: Vec<f64> = fits.iter().map(|f| f.p).collect();
    let (adjusted, _) = holm(&raw_p, alpha);
    let global_p = adjusted.iter().copied().fold(f64::INFINITY, f64::min);

    let per_outcome = hypothesis
        .outcomes()
        .iter()
        .zip(fits.iter())
        .zip(raw_p.iter().zip(&adjusted))
        .map(|((&l, fit), (&raw, &adj))| OutcomeReport {
            outcome_id: dataset.outcome_labels()[l].clone(),
            raw_p: raw,
            adjusted_p: adj,
            s: fit.statistic,
            s_studentized: None,
        })
        .collect();

    Ok(TestReport {
        schema_version: REPORT_SCHEMA_VERSION.into(),
        method: method.as_str().into(),
        global_p,
        per_outcome,
        psi: "holm".into(),
        b: 0,
        seed: None,
        flip_mode: "none".into(),
        alternative: hypothesis.alternative().as_str().into(),
        studentized: false,
        weights_provenance: "none".into(),
        n_clusters: dataset.n_clusters(),
        n_total: dataset.total_occasions(),
        dropped_occasions: dataset.dropped_occasions(),
        variance_components: None,
        manifest: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{ClusterSpec, DesignSpec};
    use crate::weights::identity_weights;
    use nalgebra::{DMatrix, DVector};
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn demo_dataset(seed: u64) -> ClusteredDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let clusters = (0..6)
            .map(|j| {
                let n = 4;
                let x = DVector::from_fn(n, |_, _| rng.gen::<f64>() - 0.5);
                let y = DVector::from_fn(n, |i, _| 0.2 * x[i] + rng.gen::<f64>() - 0.5);
                ClusterSpec {
                    id: format!("c{j}"),
                    ys: vec![y.clone(), y * 0.5],
                    design: DesignSpec::Shared {
                        x,
                        z: DMatrix::from_element(n, 1, 1.0),
                    },
                }
            })
            .collect();
        ClusteredDataset::new(vec!["u".into(), "v".into()], clusters).unwrap()
    }

    #[test]
    fn report_round_trips_through_json() {
        let d = demo_dataset(1);
        let w = identity_weights(&d);
        let h = HypothesisSpec::global_null(&d);
        let run = run_clip_test(&d, &w, &h, &ClipOptions::default()).unwrap();
        let json = run.report.to_json();
        let parsed: TestReport = serde_json::from_str(&json).unwrap();
        assert_eq!(parsed.global_p, run.report.global_p);
        assert_eq!(parsed.per_outcome.len(), 2);
        assert_eq!(parsed.method, "clip");
        assert_eq!(parsed.b, 1000);
    }

    #[test]
    fn p_values_respect_resolution() {
        let d = demo_dataset(2);
        let w = identity_weights(&d);
        let h = HypothesisSpec::global_null(&d);
        let opts = ClipOptions {
            n_flips: 50,
            ..Default::default()
        };
        let run = run_clip_test(&d, &w, &h, &opts).unwrap();
        assert!(run.report.global_p >= 1.0 / 50.0);
        for o in &run.report.per_outcome {
            assert!(o.raw_p >= 1.0 / 50.0);
            assert!(o.adjusted_p >= o.raw_p - 1e-15);
        }
    }

    #[test]
    fn one_sided_multivariate_rejected() {
        let d = demo_dataset(3);
        let w = identity_weights(&d);
        let h = HypothesisSpec::global_null(&d).with_alternative(Alternative::Greater);
        assert!(matches!(
            run_clip_test(&d, &w, &h, &ClipOptions::default()),
            Err(Error::InvalidConfig(_))
        ));
    }

    #[test]
    fn univariate_alternative_flows_through() {
        let d = demo_dataset(4);
        let w = identity_weights(&d);
        let h = HypothesisSpec::new(vec![0], vec![0.0], Alternative::Greater).unwrap();
        let run = run_clip_test(&d, &w, &h, &ClipOptions::default()).unwrap();
        assert_eq!(run.report.per_outcome.len(), 1);
        assert_eq!(run.report.alternative, "greater");
        assert_eq!(run.report.global_p, run.report.per_outcome[0].raw_p);
        assert_eq!(
            run.report.per_outcome[0].raw_p,
            run.report.per_outcome[0].adjusted_p
        );
    }

    #[test]
    fn baseline_report_shape() {
        let d = demo_dataset(5);
        let h = HypothesisSpec::global_null(&d);
        let report = run_baseline_test(&d, &h, BaselineMethod::Hc3, 0.05).unwrap();
        assert_eq!(report.method, "hc3");
        assert_eq!(report.per_outcome.len(), 2);
        for o in &report.per_outcome {
            assert!(o.adjusted_p >= o.raw_p - 1e-15);
        }
        let min_adj = report
            .per_outcome
            .iter()
            .map(|o| o.adjusted_p)
            .fold(f64::INFINITY, f64::min);
        assert_eq!(report.global_p, min_adj);
    }
}
