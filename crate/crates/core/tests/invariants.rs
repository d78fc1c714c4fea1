//! Cross-module invariants from the design contracts: ingestion round
//! trips, score identities under data and weight transformations, flip
//! synchronization, and weak familywise error control at desk scale.

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use clip_core::combine::{combined_test, Combiner};
use clip_core::data::{
    Alternative, ClusterSpec, ClusteredDataset, DesignSpec, HypothesisSpec, LongRecord,
};
use clip_core::flips::{flip_scores, generate_flips, p_value, FlipMode};
use clip_core::ingest::ingest_long;
use clip_core::score::cluster_scores;
use clip_core::weights::{identity_weights, user_weights};

// ---------------------------------------------------------------------------
// data-model properties

fn arb_dataset() -> impl Strategy<Value = ClusteredDataset> {
    // shapes first: N clusters, M outcomes, q nuisance columns, sizes n_j
    (2usize..5, 1usize..3, 0usize..3)
        .prop_flat_map(|(n_clusters, m, q)| {
            let sizes = proptest::collection::vec(1usize..4, n_clusters);
            (Just(m), Just(q), sizes, any::<u64>())
        })
        .prop_map(|(m, q, sizes, seed)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut value = move || (rng.gen::<f64>() * 10.0).round() / 2.0 - 2.0;
            let clusters = sizes
                .iter()
                .enumerate()
                .map(|(j, &n)| {
                    let ys = (0..m)
                        .map(|_| DVector::from_fn(n, |_, _| value()))
                        .collect();
                    let xs: Vec<DVector<f64>> =
                        (0..m).map(|_| DVector::from_fn(n, |_, _| value())).collect();
                    let zs: Vec<DMatrix<f64>> = (0..m)
                        .map(|_| DMatrix::from_fn(n, q, |_, _| value()))
                        .collect();
                    ClusterSpec {
                        id: format!("c{j}"),
                        ys,
                        design: DesignSpec::PerOutcome { xs, zs },
                    }
                })
                .collect();
            let labels = (0..m).map(|l| format!("y{l}")).collect();
            ClusteredDataset::new(labels, clusters).unwrap()
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn export_ingest_round_trip(dataset in arb_dataset()) {
        let records = dataset.to_long_records();
        let rebuilt = ingest_long(records).unwrap();
        prop_assert_eq!(rebuilt, dataset);
    }

    #[test]
    fn within_cluster_permutation_is_local(dataset in arb_dataset(), rotate in 1usize..3) {
        // rotate the occasions of cluster 0 by the same shift in every
        // outcome; other clusters must come back untouched
        let n0 = dataset.cluster(0).n();
        let shift = rotate % n0;
        let mut records = dataset.to_long_records();
        let c0 = dataset.cluster(0).id().to_string();
        let mut by_outcome: std::collections::BTreeMap<String, Vec<LongRecord>> =
            Default::default();
        records.retain(|r| {
            if r.cluster_id == c0 {
                by_outcome.entry(r.outcome_id.clone()).or_default().push(r.clone());
                false
            } else {
                true
            }
        });
        let mut rotated = Vec::new();
        for group in by_outcome.values() {
            let mut group = group.clone();
            group.rotate_left(shift);
            rotated.extend(group);
        }
        rotated.extend(records);
        let rebuilt = ingest_long(rotated).unwrap();

        prop_assert_eq!(rebuilt.n_clusters(), dataset.n_clusters());
        // cluster 0 occasions rotated
        for l in 0..dataset.n_outcomes() {
            let orig = dataset.cluster(0).y(l);
            let new = rebuilt.cluster(0).y(l);
            for i in 0..n0 {
                prop_assert_eq!(new[i], orig[(i + shift) % n0]);
            }
        }
        // every other cluster identical
        for j in 1..dataset.n_clusters() {
            prop_assert_eq!(dataset.cluster(j), rebuilt.cluster(j));
        }
    }
}

#[test]
fn crossed_reshape_round_trips_record_multiset() {
    // reshaping to items-as-outcomes and collapsing back reproduces the
    // original records up to ordering
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut records = Vec::new();
    for p in 0..3 {
        for item in ["a", "b", "c"] {
            for _ in 0..2 {
                records.push(LongRecord {
                    cluster_id: format!("p{p}"),
                    outcome_id: String::new(),
                    y: rng.gen::<f64>(),
                    x: rng.gen::<f64>(),
                    z: vec![rng.gen::<f64>()],
                    item_id: Some(item.to_string()),
                });
            }
        }
    }
    let dataset = clip_core::ingest::reshape_crossed(records.clone()).unwrap();
    let mut collapsed: Vec<LongRecord> = dataset
        .to_long_records()
        .into_iter()
        .map(|mut r| {
            r.item_id = Some(r.outcome_id.clone());
            r.outcome_id = String::new();
            r
        })
        .collect();
    let key = |r: &LongRecord| {
        (
            r.cluster_id.clone(),
            r.item_id.clone(),
            r.y.to_bits(),
            r.x.to_bits(),
        )
    };
    let mut original = records;
    original.sort_by_key(key);
    collapsed.sort_by_key(key);
    assert_eq!(original, collapsed);
}

// ---------------------------------------------------------------------------
// score-engine invariants on seeded instances

fn seeded_instance(seed: u64, q: usize) -> ClusteredDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let clusters = (0..6)
        .map(|j| {
            let n = rng.gen_range(2..=5);
            let x = DVector::from_fn(n, |_, _| StandardNormal.sample(&mut rng));
            let z = DMatrix::from_fn(n, q, |_, c| {
                if c == 0 {
                    1.0
                } else {
                    StandardNormal.sample(&mut rng)
                }
            });
            let y = DVector::from_fn(n, |_, _| StandardNormal.sample(&mut rng));
            ClusterSpec {
                id: format!("c{j}"),
                ys: vec![y],
                design: DesignSpec::Shared { x, z },
            }
        })
        .collect();
    ClusteredDataset::new(vec!["y".into()], clusters).unwrap()
}

#[test]
fn location_invariance_in_nuisance_span() {
    for seed in 0..20 {
        let d = seeded_instance(seed, 2);
        let w = identity_weights(&d);
        let h = HypothesisSpec::global_null(&d);
        let base = cluster_scores(&d, &w, &h).unwrap();

        // shift y by Z c
        let c = DVector::from_vec(vec![1.7, -0.9]);
        let clusters = d
            .clusters()
            .iter()
            .map(|cl| ClusterSpec {
                id: cl.id().to_string(),
                ys: vec![cl.y(0) + cl.z(0) * &c],
                design: DesignSpec::Shared {
                    x: cl.x(0).clone(),
                    z: cl.z(0).clone(),
                },
            })
            .collect();
        let shifted = ClusteredDataset::new(vec!["y".into()], clusters).unwrap();
        let moved = cluster_scores(&shifted, &w, &h).unwrap();

        for j in 0..d.n_clusters() {
            let rel = (base.zeta()[(j, 0)] - moved.zeta()[(j, 0)]).abs()
                / base.zeta()[(j, 0)].abs().max(1.0);
            assert!(rel <= 1e-8, "seed {seed} cluster {j}");
        }
        assert!((base.s()[0] - moved.s()[0]).abs() <= 1e-8 * base.s()[0].abs().max(1.0));
        assert!(
            (base.sigma_hat()[0] - moved.sigma_hat()[0]).abs()
                <= 1e-8 * base.sigma_hat()[0].max(1.0)
        );
    }
}

#[test]
fn weight_scaling_covariance() {
    for seed in 0..10 {
        let d = seeded_instance(seed, 1);
        let h = HypothesisSpec::global_null(&d);
        let kappa = 3.7;

        let base_blocks: Vec<Vec<DMatrix<f64>>> = vec![d
            .clusters()
            .iter()
            .map(|c| DMatrix::identity(c.n(), c.n()))
            .collect()];
        let scaled_blocks: Vec<Vec<DMatrix<f64>>> = vec![d
            .clusters()
            .iter()
            .map(|c| DMatrix::identity(c.n(), c.n()) * kappa)
            .collect()];
        let w1 = user_weights(&d, base_blocks).unwrap();
        let wk = user_weights(&d, scaled_blocks).unwrap();

        let dec1 = cluster_scores(&d, &w1, &h).unwrap();
        let deck = cluster_scores(&d, &wk, &h).unwrap();
        for j in 0..d.n_clusters() {
            let rel = (deck.zeta()[(j, 0)] - kappa * dec1.zeta()[(j, 0)]).abs()
                / (kappa * dec1.zeta()[(j, 0)]).abs().max(1e-12);
            assert!(rel <= 1e-10);
        }
        let s1 = dec1.studentized().unwrap();
        let sk = deck.studentized().unwrap();
        assert!((s1[0] - sk[0]).abs() <= 1e-10 * s1[0].abs().max(1.0));
    }
}

#[test]
fn unweighted_no_nuisance_closed_form() {
    // with W = I and q = 0, S = n^{-1/2} x'(y - x beta0) exactly
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let beta0 = 0.4;
    let clusters: Vec<ClusterSpec> = (0..4)
        .map(|j| {
            let n = 3;
            let x = DVector::from_fn(n, |_, _| StandardNormal.sample(&mut rng));
            let y = DVector::from_fn(n, |_, _| StandardNormal.sample(&mut rng));
            ClusterSpec {
                id: format!("c{j}"),
                ys: vec![y],
                design: DesignSpec::Shared {
                    x,
                    z: DMatrix::zeros(n, 0),
                },
            }
        })
        .collect();
    let d = ClusteredDataset::new(vec!["y".into()], clusters).unwrap();
    let w = identity_weights(&d);
    let h = HypothesisSpec::new(vec![0], vec![beta0], Alternative::TwoSided).unwrap();
    let dec = cluster_scores(&d, &w, &h).unwrap();

    let mut direct = 0.0;
    for c in d.clusters() {
        direct += c.x(0).dot(&(c.y(0) - c.x(0) * beta0));
    }
    direct /= (d.total_occasions() as f64).sqrt();
    assert_eq!(dec.s()[0], direct);
}

// ---------------------------------------------------------------------------
// resampler / combiner invariants

#[test]
fn outcome_permutation_leaves_symmetric_combiner_unchanged() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let build = |order: &[usize], rng: &mut ChaCha8Rng| {
        let raw: Vec<(Vec<DVector<f64>>, DVector<f64>)> = (0..5)
            .map(|_| {
                let n = 3;
                let ys: Vec<DVector<f64>> = (0..2)
                    .map(|_| DVector::from_fn(n, |_, _| StandardNormal.sample(rng)))
                    .collect();
                let x = DVector::from_fn(n, |_, _| StandardNormal.sample(rng));
                (ys, x)
            })
            .collect();
        let clusters = raw
            .iter()
            .enumerate()
            .map(|(j, (ys, x))| ClusterSpec {
                id: format!("c{j}"),
                ys: order.iter().map(|&l| ys[l].clone()).collect(),
                design: DesignSpec::Shared {
                    x: x.clone(),
                    z: DMatrix::zeros(3, 0),
                },
            })
            .collect();
        let labels = order.iter().map(|l| format!("y{l}")).collect();
        ClusteredDataset::new(labels, clusters).unwrap()
    };
    // same draws for both datasets: clone the rng state
    let mut rng2 = rng.clone();
    let d_fwd = build(&[0, 1], &mut rng);
    let d_rev = build(&[1, 0], &mut rng2);

    let run = |d: &ClusteredDataset| {
        let w = identity_weights(d);
        let h = HypothesisSpec::global_null(d);
        let dec = cluster_scores(d, &w, &h).unwrap();
        let plan = generate_flips(d.n_clusters(), FlipMode::Exhaustive).unwrap();
        let scores = flip_scores(&dec, &plan, true).unwrap();
        let combined = combined_test(&scores, Combiner::MaxAbs);
        (scores.m().clone(), combined.global_p)
    };
    let (m_fwd, p_fwd) = run(&d_fwd);
    let (m_rev, p_rev) = run(&d_rev);

    assert_eq!(p_fwd, p_rev);
    for b in 0..m_fwd.nrows() {
        assert_eq!(m_fwd[(b, 0)], m_rev[(b, 1)]);
        assert_eq!(m_fwd[(b, 1)], m_rev[(b, 0)]);
    }
}

#[test]
fn row_one_anchoring_is_idempotent() {
    let t = vec![1.3, -0.4, 0.9, 1.3, 2.2];
    let p = p_value(&t);
    let mut rebuilt = t[1..].to_vec();
    rebuilt.insert(0, t[0]);
    assert_eq!(p_value(&rebuilt), p);
    assert!(p >= 1.0 / t.len() as f64);
}

/// Weak familywise error control at desk scale: global null, synchronized
/// exhaustive flips, N=8 clusters, two outcomes, 2000 simulated datasets.
#[test]
fn weak_fwer_desk_scale() {
    let reps = 2000usize;
    let alphas = [0.05, 0.25];
    let rejections: Vec<(usize, usize)> = (0..reps)
        .into_par_iter()
        .map(|rep| {
            let mut rng = ChaCha8Rng::seed_from_u64(31);
            rng.set_stream(rep as u64);
            let clusters = (0..8)
                .map(|j| {
                    let n = 3;
                    let x = DVector::from_fn(n, |_, _| StandardNormal.sample(&mut rng));
                    // correlated sign-symmetric outcomes
                    let shared: DVector<f64> =
                        DVector::from_fn(n, |_, _| StandardNormal.sample(&mut rng));
                    let y1 = DVector::from_fn(n, |i, _| {
                        let e: f64 = StandardNormal.sample(&mut rng);
                        shared[i] + 0.5 * e
                    });
                    let y2 = DVector::from_fn(n, |i, _| {
                        let e: f64 = StandardNormal.sample(&mut rng);
                        shared[i] + 0.5 * e
                    });
                    ClusterSpec {
                        id: format!("c{j}"),
                        ys: vec![y1, y2],
                        design: DesignSpec::Shared {
                            x,
                            z: DMatrix::zeros(n, 0),
                        },
                    }
                })
                .collect();
            let d = ClusteredDataset::new(vec!["u".into(), "v".into()], clusters).unwrap();
            let w = identity_weights(&d);
            let h = HypothesisSpec::global_null(&d);
            let dec = cluster_scores(&d, &w, &h).unwrap();
            let plan = generate_flips(8, FlipMode::Exhaustive).unwrap();
            let scores = flip_scores(&dec, &plan, true).unwrap();
            let combined = combined_test(&scores, Combiner::MaxAbs);
            (
                usize::from(combined.global_p <= alphas[0]),
                usize::from(combined.global_p <= alphas[1]),
            )
        })
        .collect();

    for (k, alpha) in alphas.iter().enumerate() {
        let count: usize = rejections.iter().map(|r| if k == 0 { r.0 } else { r.1 }).sum();
        let rate = count as f64 / reps as f64;
        let bound = alpha + 2.0 * (alpha * (1.0 - alpha) / reps as f64).sqrt();
        assert!(
            rate <= bound,
            "alpha {alpha}: global rejection {rate:.4} above {bound:.4}"
        );
    }
}

/// Oracle weights never trail identity weights by more than two Monte Carlo
/// standard errors on the power outcomes of an equicorrelated multivariate
/// scenario (desk-scale version of the power-ordering property).
#[test]
fn multivariate_oracle_weights_keep_power_ordering() {
    use clip_core::sim::{run_monte_carlo, Method, MonteCarloOptions, NjRule, ScenarioConfig, ScenarioKind};

    let config = ScenarioConfig {
        kind: ScenarioKind::Multivariate,
        n_clusters: 40,
        nj: NjRule::Uniform { min: 10, max: 20 },
        beta: vec![0.0, 0.0, 0.4, 0.4],
        gamma: 2.0,
        covariate_corr: 0.7,
        re_corr: 0.5,
        re_sd: vec![1.0, 1.0, 1.0],
        eps_corr: 0.4,
        eps_sd: vec![1.0],
        item_count: 0,
        item_sd: 0.0,
        seed: 27,
        fit_intercept: None,
    };
    let reps = 200usize;
    let opts = MonteCarloOptions {
        reps,
        alpha: 0.05,
        n_flips: 500,
        methods: vec![Method::ClipIdentity, Method::ClipTrue],
        scenario_label: "power-order".into(),
        ..Default::default()
    };
    let result = run_monte_carlo(&config, &opts).unwrap();
    for outcome in ["outcome:y3", "outcome:y4"] {
        let identity = result.rate(Method::ClipIdentity, outcome).unwrap();
        let oracle = result.rate(Method::ClipTrue, outcome).unwrap();
        let se = (identity * (1.0 - identity) / reps as f64).sqrt();
        assert!(
            oracle >= identity - 2.0 * se,
            "{outcome}: oracle {oracle} vs identity {identity}"
        );
    }
}

/// Flip-plan invariance: dropping and re-adding the identity row of a plan's
/// statistics never changes the p-value, and the observed row anchors at
/// index zero.
#[test]
fn observed_statistic_anchored_first() {
    let d = seeded_instance(3, 1);
    let w = identity_weights(&d);
    let h = HypothesisSpec::global_null(&d);
    let dec = cluster_scores(&d, &w, &h).unwrap();
    let plan = generate_flips(d.n_clusters(), FlipMode::MonteCarlo { b: 128, seed: 4 }).unwrap();
    let scores = flip_scores(&dec, &plan, false).unwrap();
    assert_eq!(scores.m()[(0, 0)], dec.s()[0]);
}
