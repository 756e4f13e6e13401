use std::collections::{BTreeSet, HashMap, HashSet};

use kmq_core::clustering::{assign, kmeans, Clustering, KMeansParams};
use kmq_core::corpus::{
    attach_scores, load_corpus, load_selection, save_corpus, save_selection, Corpus, CorpusFormat, EmbeddedInstance,
    Selection, SelectionMethod,
};
use kmq_core::diagnostics::{elbow_curve, quality_profile, silhouette};
use kmq_core::distance::{normalized, DistanceMetric};
use kmq_core::iterative::{cluster_scores, run_iterative, update_weights, ClusterWeights, IterativeConfig, ScoreDivisor};
use kmq_core::sampling::{allocate_budget, sample_km_closest, sample_km_random, sample_kmq, SamplerConfig};
use kmq_core::scorer::{MockScorer, ScoredGeneration};
use kmq_core::synth::{gaussian_mixture, MixtureSpec};
use kmq_core::Error;
use proptest::prelude::*;
use proptest::sample::SizeRange;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn instance() -> impl Strategy<Value = (Vec<f32>, Option<f32>, Option<String>)> {
    (
        prop::collection::vec(-100.0f32..100.0, 3),
        prop::option::of(0.0f32..=1.0),
        prop::option::of("[a-z \"\\\\\n]{0,12}"),
    )
}

fn corpus(size: impl Into<SizeRange>) -> impl Strategy<Value = Corpus> {
    prop::collection::vec(instance(), size).prop_map(|rows| {
        Corpus::new(
            3,
            rows.into_iter()
                .enumerate()
                .map(|(i, (e, q, t))| {
                    let mut inst = EmbeddedInstance::new(format!("r{i:03}"), e);
                    if let Some(q) = q {
                        inst = inst.with_quality(q);
                    }
                    if let Some(t) = t {
                        inst = inst.with_text(t);
                    }
                    inst
                })
                .collect(),
        )
        .unwrap()
    })
}

/// Points in the plane with all qualities set.
fn points(size: impl Into<SizeRange>) -> impl Strategy<Value = Corpus> {
    prop::collection::vec((-10.0f32..10.0, -10.0f32..10.0, 0.05f32..=1.0), size).prop_map(|rows| {
        Corpus::new(
            2,
            rows.into_iter()
                .enumerate()
                .map(|(i, (x, y, q))| EmbeddedInstance::new(format!("p{i:03}"), vec![x, y]).with_quality(q))
                .collect(),
        )
        .unwrap()
    })
}

fn shuffled(c: &Corpus, order: &[usize]) -> Corpus {
    let all = c.to_instances();
    Corpus::new(c.dimension(), order.iter().map(|&i| all[i].clone()).collect()).unwrap()
}

fn partition(c: &Clustering) -> BTreeSet<BTreeSet<String>> {
    (0..c.k()).map(|j| c.member_ids(j).map(str::to_string).collect()).collect()
}

fn permutation(n: usize) -> impl Strategy<Value = Vec<usize>> {
    Just((0..n).collect::<Vec<_>>()).prop_shuffle()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn corpus_round_trips_in_both_formats(c in corpus(1..30)) {
        let dir = tempfile::tempdir().unwrap();
        for (format, name) in [(CorpusFormat::Jsonl, "c.jsonl"), (CorpusFormat::Binary, "c.kmq")] {
            let path = dir.path().join(name);
            // The binary format has no text column and refuses text.
            let c = if format == CorpusFormat::Binary {
                if (0..c.len()).any(|i| c.text(i).is_some()) {
                    prop_assert!(save_corpus(&c, &path, format).is_err());
                }
                let plain = c.to_instances().into_iter().map(|mut inst| {
                    inst.text = None;
                    inst
                });
                Corpus::new(3, plain.collect()).unwrap()
            } else {
                c.clone()
            };
            save_corpus(&c, &path, format).unwrap();
            let back = load_corpus(&path, format).unwrap();
            prop_assert_eq!(&back, &c);
            let again = load_corpus(&path, format).unwrap();
            prop_assert_eq!(back.content_hash(), again.content_hash());
        }
    }

    #[test]
    fn selection_round_trips(ids in prop::collection::btree_set("[a-z0-9]{1,8}", 1..20), extra in 0usize..5, with_mult in any::<bool>()) {
        let ids: Vec<String> = ids.into_iter().collect();
        let mut sel = Selection::new(SelectionMethod::Kmq, ids.len() + extra, ids.clone());
        if with_mult {
            let mut m = vec![1u32; ids.len()];
            m[0] += extra as u32;
            sel.multiplicities = Some(m);
        }
        sel.params.insert("seed".into(), 7.into());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.json");
        save_selection(&sel, &path).unwrap();
        prop_assert_eq!(load_selection(&path).unwrap(), sel);
    }

    #[test]
    fn attach_scores_only_touches_quality(c in corpus(1..20), q in 0.0f64..=1.0) {
        let scores: Vec<(String, f64)> = c.ids().iter().step_by(2).map(|id| (id.clone(), q)).collect();
        let out = attach_scores(c.clone(), scores.clone()).unwrap();
        prop_assert_eq!(out.ids(), c.ids());
        prop_assert_eq!(out.embeddings(), c.embeddings());
        for i in 0..c.len() {
            if i % 2 == 0 {
                prop_assert_eq!(out.quality(i), Some(q as f32));
            } else {
                prop_assert_eq!(out.quality(i), c.quality(i));
            }
        }
    }

    #[test]
    fn lloyd_objective_never_rises(c in points(5..60), k in 1usize..6, seed in 0u64..1000) {
        let k = k.min(c.len());
        let cl = kmeans(&c, &KMeansParams::new(k).with_metric(DistanceMetric::Euclidean).with_seed(seed)).unwrap();
        for w in cl.objective_trace().windows(2) {
            prop_assert!(w[1] <= w[0] + 1e-9, "{:?}", cl.objective_trace());
        }
    }

    #[test]
    fn kmeans_partition_ignores_input_order((c, order) in points(4..40).prop_flat_map(|c| {
        let n = c.len();
        (Just(c), permutation(n))
    }), k in 1usize..5, seed in 0u64..100) {
        let k = k.min(c.len());
        let params = KMeansParams::new(k).with_metric(DistanceMetric::Euclidean).with_seed(seed);
        let a = kmeans(&c, &params).unwrap();
        let b = kmeans(&shuffled(&c, &order), &params).unwrap();
        prop_assert_eq!(partition(&a), partition(&b));
    }

    #[test]
    fn clusters_are_never_empty(distinct in prop::collection::vec((-3i8..3, -3i8..3), 1..4), copies in 1usize..8, k in 1usize..10) {
        // Few distinct locations, many duplicates.
        let mut all = Vec::new();
        for (j, &(x, y)) in distinct.iter().enumerate() {
            for r in 0..copies {
                all.push(EmbeddedInstance::new(format!("d{j}-{r}"), vec![x as f32, y as f32]));
            }
        }
        let c = Corpus::new(2, all).unwrap();
        let k = k.min(c.len());
        let params = KMeansParams::new(k).with_metric(DistanceMetric::Euclidean);
        let locations: BTreeSet<(i8, i8)> = distinct.iter().copied().collect();
        if k > locations.len() {
            // Nearest-center assignment cannot fill more clusters than there
            // are distinct points.
            let degenerate = matches!(kmeans(&c, &params), Err(Error::DegenerateClustering { .. }));
            prop_assert!(degenerate);
            return Ok(());
        }
        let cl = kmeans(&c, &params).unwrap();
        prop_assert_eq!(cl.k(), k);
        prop_assert!(cl.sizes().iter().all(|&s| s > 0));
        prop_assert_eq!(cl.sizes().iter().sum::<usize>(), c.len());
    }

    #[test]
    fn normalized_nearest_center_is_most_cosine_similar(
        c in points(1..30),
        raw in prop::collection::vec((-1.0f32..1.0, -1.0f32..1.0), 1..6),
    ) {
        let centers: Vec<Vec<f64>> = raw
            .iter()
            .filter(|(x, y)| x.hypot(*y) > 1e-3)
            .map(|&(x, y)| normalized(&[x, y]).into_iter().map(f64::from).collect())
            .collect();
        prop_assume!(!centers.is_empty());
        let a = assign(&c, &centers, DistanceMetric::EuclideanOnNormalized).unwrap();
        for i in 0..c.len() {
            let e = c.embedding(i);
            let norm = (e[0] as f64).hypot(e[1] as f64);
            prop_assume!(norm > 1e-6);
            let cos: Vec<f64> = centers.iter().map(|m| (e[0] as f64 * m[0] + e[1] as f64 * m[1]) / norm).collect();
            let best = cos.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(cos[a.labels[i]] >= best - 1e-6, "point {i}: {cos:?} chose {}", a.labels[i]);
        }
    }

    #[test]
    fn silhouette_full_sample_is_exact(c in points(4..40), seed in 0u64..50) {
        let cl = kmeans(&c, &KMeansParams::new(2).with_metric(DistanceMetric::Euclidean)).unwrap();
        let exact = silhouette(&c, &cl, DistanceMetric::Euclidean, None, seed).unwrap();
        let full = silhouette(&c, &cl, DistanceMetric::Euclidean, Some(c.len()), seed).unwrap();
        prop_assert_eq!(exact.mean_score.to_bits(), full.mean_score.to_bits());
    }

    #[test]
    fn quality_profile_ignores_labels(c in points(4..40), k in 2usize..5, relabel in permutation(4), t in 0.1f64..0.9) {
        let labels: Vec<usize> = (0..c.len()).map(|i| i % k).collect();
        let moved: Vec<usize> = {
            let map: Vec<usize> = relabel.iter().copied().filter(|&j| j < k).collect();
            labels.iter().map(|&l| map[l]).collect()
        };
        let a = Clustering::from_labels(&c, &labels, k, DistanceMetric::Euclidean).unwrap();
        let b = Clustering::from_labels(&c, &moved, k, DistanceMetric::Euclidean).unwrap();
        let pa = quality_profile(&c, &a, t).unwrap();
        let pb = quality_profile(&c, &b, t).unwrap();
        prop_assert_eq!(pa.fraction_below, pb.fraction_below);
        let mut ma: Vec<u64> = pa.per_cluster_mean_quality.values().map(|v| v.to_bits()).collect();
        let mut mb: Vec<u64> = pb.per_cluster_mean_quality.values().map(|v| v.to_bits()).collect();
        ma.sort_unstable();
        mb.sort_unstable();
        prop_assert_eq!(ma, mb);
    }

    #[test]
    fn samplers_fill_the_plan(c in points(6..60), k in 1usize..5, frac in 0.05f64..=1.0, seed in 0u64..100, replacement in any::<bool>()) {
        let k = k.min(c.len());
        let cl = kmeans(&c, &KMeansParams::new(k).with_metric(DistanceMetric::Euclidean)).unwrap();
        let b = ((c.len() as f64 * frac).round() as usize).clamp(1, c.len());
        let plan = allocate_budget(&cl, b, None, replacement).unwrap();
        prop_assert_eq!(plan.per_cluster.iter().sum::<usize>(), b);
        let label: HashMap<&str, usize> = (0..c.len()).map(|i| (c.id(i), cl.cluster_of(i))).collect();
        for method in [SelectionMethod::Kmq, SelectionMethod::KmRandom, SelectionMethod::KmClosest] {
            let cfg = SamplerConfig::new(method).with_seed(seed).with_replacement(replacement);
            let sel = match method {
                SelectionMethod::Kmq => sample_kmq(&c, &cl, &plan, &cfg),
                SelectionMethod::KmRandom => sample_km_random(&c, &cl, &plan, &cfg),
                _ => sample_km_closest(&c, &cl, &plan, &cfg),
            }
            .unwrap();
            sel.validate_against(&c).unwrap();
            let unique: HashSet<&String> = sel.ids.iter().collect();
            prop_assert_eq!(unique.len(), sel.ids.len());
            prop_assert_eq!(sel.draws(), b);
            let mut per = vec![0usize; k];
            for (t, id) in sel.ids.iter().enumerate() {
                per[label[id.as_str()]] += sel.multiplicities.as_ref().map_or(1, |m| m[t] as usize);
            }
            prop_assert_eq!(&per, &plan.per_cluster);
            if !replacement {
                prop_assert!(sel.multiplicities.is_none());
            }
        }
    }

    #[test]
    fn equal_quality_kmq_is_km_random(c in points(6..50), k in 1usize..5, q in 0.1f32..=1.0, seed in 0u64..100, replacement in any::<bool>()) {
        let c = attach_scores(c.clone(), c.ids().iter().map(|id| (id.clone(), q as f64)).collect::<Vec<_>>()).unwrap();
        let k = k.min(c.len());
        let cl = kmeans(&c, &KMeansParams::new(k).with_metric(DistanceMetric::Euclidean)).unwrap();
        let plan = allocate_budget(&cl, c.len().div_ceil(2), None, replacement).unwrap();
        let a = sample_kmq(&c, &cl, &plan, &SamplerConfig::new(SelectionMethod::Kmq).with_seed(seed).with_replacement(replacement)).unwrap();
        let b = sample_km_random(&c, &cl, &plan, &SamplerConfig::new(SelectionMethod::KmRandom).with_seed(seed).with_replacement(replacement)).unwrap();
        prop_assert_eq!(a.ids, b.ids);
        prop_assert_eq!(a.multiplicities, b.multiplicities);
    }

    #[test]
    fn sampling_ignores_input_order((c, order) in points(6..40).prop_flat_map(|c| {
        let n = c.len();
        (Just(c), permutation(n))
    }), seed in 0u64..100) {
        let params = KMeansParams::new(3.min(c.len())).with_metric(DistanceMetric::Euclidean);
        let run = |c: &Corpus| {
            let cl = kmeans(c, &params).unwrap();
            let plan = allocate_budget(&cl, c.len() / 2 + 1, None, false).unwrap();
            let sel = sample_kmq(c, &cl, &plan, &SamplerConfig::new(SelectionMethod::Kmq).with_seed(seed)).unwrap();
            sel.ids.into_iter().collect::<BTreeSet<_>>()
        };
        prop_assert_eq!(run(&c), run(&shuffled(&c, &order)));
    }

    #[test]
    fn weights_stay_on_the_simplex(
        w in prop::collection::vec(0.01f64..1.0, 1..8),
        s in prop::collection::vec(-5.0f64..5.0, 8),
        cap in prop::option::of(1.5f64..10.0),
    ) {
        let prev = ClusterWeights::normalize(w).unwrap();
        let s = &s[..prev.len()];
        let next = update_weights(&prev, s, cap).unwrap();
        prop_assert!(next.as_slice().iter().all(|&x| x >= 0.0 && x.is_finite()));
        prop_assert!((next.as_slice().iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        if let Some(cap) = cap {
            for (n, p) in next.as_slice().iter().zip(prev.as_slice()) {
                prop_assert!(*n <= p * cap * (1.0 + 1e-9) && *n >= p / cap * (1.0 - 1e-9), "{n} vs {p}");
            }
        }
    }

    #[test]
    fn higher_score_means_higher_growth(
        w in prop::collection::vec(0.01f64..1.0, 2..8),
        s in prop::collection::vec(-5.0f64..5.0, 8),
    ) {
        let prev = ClusterWeights::normalize(w).unwrap();
        let s = &s[..prev.len()];
        let next = update_weights(&prev, s, None).unwrap();
        let growth: Vec<f64> = next.as_slice().iter().zip(prev.as_slice()).map(|(n, p)| n / p).collect();
        for a in 0..s.len() {
            for b in 0..s.len() {
                if s[a] > s[b] {
                    prop_assert!(growth[a] >= growth[b] * (1.0 - 1e-12));
                }
            }
        }
    }

    #[test]
    fn weight_update_ignores_cluster_order(
        w in prop::collection::vec(0.01f64..1.0, 2..8),
        s in prop::collection::vec(-5.0f64..5.0, 8),
        cap in prop::option::of(1.5f64..10.0),
        order in permutation(8),
    ) {
        let k = w.len();
        let order: Vec<usize> = order.into_iter().filter(|&j| j < k).collect();
        let prev = ClusterWeights::normalize(w.clone()).unwrap();
        let s = &s[..k];
        let next = update_weights(&prev, s, cap).unwrap();
        let pprev = ClusterWeights::normalize(order.iter().map(|&j| w[j]).collect()).unwrap();
        let ps: Vec<f64> = order.iter().map(|&j| s[j]).collect();
        let pnext = update_weights(&pprev, &ps, cap).unwrap();
        for (t, &j) in order.iter().enumerate() {
            prop_assert!((pnext.as_slice()[t] - next.as_slice()[j]).abs() <= 1e-12);
        }
    }

    #[test]
    fn cluster_scores_ignore_record_order(c in points(4..30), order in permutation(30), divisor in any::<bool>()) {
        let k = 3.min(c.len());
        let labels: Vec<usize> = (0..c.len()).map(|i| i % k).collect();
        let cl = Clustering::from_labels(&c, &labels, k, DistanceMetric::Euclidean).unwrap();
        let recs: Vec<ScoredGeneration> = (0..c.len())
            .map(|i| ScoredGeneration::new(c.id(i).to_string(), 0.1 * i as f64, (i * i % 7) as f64))
            .collect();
        let permuted: Vec<ScoredGeneration> = order.iter().filter(|&&i| i < recs.len()).map(|&i| recs[i].clone()).collect();
        let divisor = if divisor { ScoreDivisor::Scored } else { ScoreDivisor::ClusterSize };
        let a = cluster_scores(&recs, &cl, divisor).unwrap();
        let b = cluster_scores(&permuted, &cl, divisor).unwrap();
        prop_assert_eq!(a, b);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn iterations_pick_disjoint_sets(
        seed in 0u64..1000,
        iterations in 1usize..5,
        frac in 0.2f64..=1.0,
        deltas in prop::collection::vec(-1.0f64..1.0, 3),
    ) {
        let syn = gaussian_mixture(&MixtureSpec::new(90, 3, 3), seed).unwrap();
        let cl = Clustering::from_labels(&syn.corpus, &syn.labels, 3, DistanceMetric::Euclidean).unwrap();
        let b = ((90.0 * frac) as usize).max(iterations);
        let cfg = IterativeConfig::new(b).with_iterations(iterations).with_seed(seed);
        let mut scorer = MockScorer::by_cluster(&cl, deltas, 0.1, seed).unwrap();
        let out = run_iterative(&syn.corpus, &cl, &cfg, &mut scorer, None).unwrap();
        let mut seen = HashSet::new();
        for r in &out.records {
            for id in &r.selected {
                prop_assert!(seen.insert(id.clone()), "{id} picked twice");
            }
            let w = r.weights_after.as_slice();
            prop_assert!(w.iter().all(|&x| x >= 0.0));
            prop_assert!((w.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        }
        prop_assert_eq!(seen.len(), b);
        prop_assert_eq!(out.selection.ids.len(), b);
    }
}

/// Two tight pairs whose gap grows with `sep`.
fn two_pairs(sep: f32) -> (Corpus, Clustering) {
    let c = Corpus::new(
        2,
        vec![
            EmbeddedInstance::new("a", vec![0.0, 0.0]),
            EmbeddedInstance::new("b", vec![0.0, 1.0]),
            EmbeddedInstance::new("c", vec![sep, 0.0]),
            EmbeddedInstance::new("d", vec![sep, 1.0]),
        ],
    )
    .unwrap();
    let cl = Clustering::from_labels(&c, &[0, 0, 1, 1], 2, DistanceMetric::Euclidean).unwrap();
    (c, cl)
}

#[test]
fn silhouette_grows_with_separation() {
    let scores: Vec<f64> = [3.0, 30.0, 300.0]
        .iter()
        .map(|&sep| {
            let (c, cl) = two_pairs(sep);
            silhouette(&c, &cl, DistanceMetric::Euclidean, None, 0).unwrap().mean_score
        })
        .collect();
    assert!(scores[0] < scores[1] && scores[1] < scores[2], "{scores:?}");
    assert!(scores[2] > 0.99);
}

/// Four Gaussians centered on scaled basis vectors, so every pair of
/// centers is the same distance apart.
fn simplex_mixture(per: usize, sd: f64, seed: u64) -> Corpus {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, sd).unwrap();
    let mut all = Vec::new();
    for g in 0..4 {
        for i in 0..per {
            let e: Vec<f32> = (0..4)
                .map(|d| (if d == g { 10.0 } else { 0.0 } + noise.sample(&mut rng)) as f32)
                .collect();
            all.push(EmbeddedInstance::new(format!("m{g}-{i:03}"), e));
        }
    }
    Corpus::new(4, all).unwrap()
}

#[test]
fn elbow_knee_finds_four_planted_gaussians() {
    for seed in [1u64, 2, 3] {
        let c = simplex_mixture(100, 0.5, seed);
        let ks: Vec<usize> = (1..=8).collect();
        let curve = elbow_curve(&c, &ks, DistanceMetric::Euclidean, seed).unwrap();
        assert!(curve.is_non_increasing(1e-6));
        // Oracle: largest second difference of the objectives.
        let obj: Vec<f64> = curve.points.iter().map(|p| p.1).collect();
        let mut best = (f64::NEG_INFINITY, 0);
        for i in 1..obj.len() - 1 {
            let d2 = obj[i - 1] - 2.0 * obj[i] + obj[i + 1];
            if d2 > best.0 {
                best = (d2, ks[i]);
            }
        }
        assert_eq!(curve.knee(), Some(best.1));
        assert_eq!(curve.knee(), Some(4), "seed {seed}: {obj:?}");
    }
}

#[test]
fn constant_scores_stack_proportional_draws() {
    let syn = gaussian_mixture(&MixtureSpec::new(120, 3, 3), 9).unwrap();
    let cl = Clustering::from_labels(&syn.corpus, &syn.labels, 3, DistanceMetric::Euclidean).unwrap();
    let cfg = IterativeConfig::new(30).with_iterations(3);
    let mut scorer = MockScorer::by_cluster(&cl, vec![0.4; 3], 0.0, 1).unwrap();
    let out = run_iterative(&syn.corpus, &cl, &cfg, &mut scorer, None).unwrap();
    for r in &out.records {
        assert_eq!(r.weights_after.as_slice(), &[1.0 / 3.0; 3]);
        // Equal clusters: equal shares, remainder to the lowest indices.
        let expected: Vec<usize> = (0..3).map(|j| r.budget / 3 + usize::from(j < r.budget % 3)).collect();
        assert_eq!(r.per_cluster_budget, expected);
    }
}
