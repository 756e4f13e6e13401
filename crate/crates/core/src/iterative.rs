//! Iterative kMQ: select, score the model's generations, reweight clusters,
//! select again.
//!
//! Each of `N` iterations draws `b/N` new instances (the first `b mod N`
//! iterations draw one extra) from the part of the corpus not selected yet.
//! Cluster `j` receives budget in proportion to `w_j * |D_j|`; with uniform
//! weights this is exactly the static size-proportional split, so one
//! iteration reproduces static kMQ. After an iteration the scorer reports a
//! delta per scored instance, and cluster means of the deltas move the
//! weights:
//!
//! ```text
//! s'_j = s_j - min(s) + eps
//! w_j  <- (s'_j / sum(s')) * w_j, renormalized
//! ```
//!
//! Scores of the final iteration could not influence any selection, so the
//! scorer is not invoked for it.
//!
//! With a state directory the run writes `run.json`, one `iter_<n>.json` per
//! finished iteration, the latest `weights.json` and the cumulative
//! `selection.json`; [`resume`] picks a run up after the last finished
//! iteration.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::json;
use tracing::info;

use crate::clustering::Clustering;
use crate::corpus::{read_json, write_json, Corpus, Selection, SelectionMethod};
use crate::error::{Error, Result};
use crate::rng::DEFAULT_SEED;
use crate::sampling::{allocate_with_capacity, draw_clusters, Weighting};
use crate::scorer::{check_coverage, GenerationRequest, ScoredGeneration, Scorer, ScorerSpec};

const WEIGHT_SUM_TOL: f64 = 1e-9;

/// Per-cluster weights; non-negative and summing to one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct ClusterWeights(Vec<f64>);

impl ClusterWeights {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::InvalidWeights("no weights".into()));
        }
        if let Some(w) = weights.iter().find(|w| !w.is_finite() || **w < 0.0) {
            return Err(Error::InvalidWeights(format!("weight {w} is not a finite non-negative number")));
        }
        let sum: f64 = weights.iter().sum();
        if (sum - 1.0).abs() > WEIGHT_SUM_TOL {
            return Err(Error::InvalidWeights(format!("weights sum to {sum}, not 1")));
        }
        Ok(Self(weights))
    }

    /// Scales non-negative values to sum to one.
    pub fn normalize(values: Vec<f64>) -> Result<Self> {
        let sum: f64 = values.iter().sum();
        if !(sum.is_finite() && sum > 0.0) || values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidWeights("cannot normalize these values".into()));
        }
        Ok(Self(values.into_iter().map(|v| v / sum).collect()))
    }

    pub fn uniform(k: usize) -> Self {
        assert!(k > 0, "uniform weights need k > 0");
        Self(vec![1.0 / k as f64; k])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    /// True when every weight is bit-identical.
    pub fn is_uniform(&self) -> bool {
        self.0.iter().all(|w| w.to_bits() == self.0[0].to_bits())
    }
}

impl TryFrom<Vec<f64>> for ClusterWeights {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<ClusterWeights> for Vec<f64> {
    fn from(w: ClusterWeights) -> Self {
        w.0
    }
}

/// Splits `b` over `n` iterations, earliest iterations taking the remainder.
pub fn iteration_budgets(b: usize, n: usize) -> Result<Vec<usize>> {
    if n == 0 {
        return Err(Error::InvalidArgument("at least one iteration is required".into()));
    }
    if b < n {
        return Err(Error::InvalidBudget(format!(
            "budget {b} is smaller than the {n} iterations"
        )));
    }
    Ok((0..n).map(|i| b / n + usize::from(i < b % n)).collect())
}

/// Score delta of one generation: positive when the gold completion scores
/// higher than the model's own output.
pub fn score_delta(gen_score: f64, gold_score: f64) -> f64 {
    gold_score - gen_score
}

/// Delta for perplexity scorers: `-ln(PPL_gen / PPL_gold)`.
pub fn perplexity_delta(ppl_gen: f64, ppl_gold: f64) -> f64 {
    -(ppl_gen / ppl_gold).ln()
}

/// What the per-cluster delta sum is divided by.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreDivisor {
    /// Number of scored instances in the cluster.
    #[default]
    Scored,
    /// Full cluster size `|D_j|`.
    ClusterSize,
}

/// Mean delta per cluster. Clusters with nothing scored get the median of
/// the scored clusters' values (0 when no cluster was scored), so they are
/// neither favoured nor punished.
pub fn cluster_scores(
    scored: &[ScoredGeneration],
    clustering: &Clustering,
    divisor: ScoreDivisor,
) -> Result<Vec<f64>> {
    let index: HashMap<&str, usize> = clustering
        .ids()
        .iter()
        .enumerate()
        .map(|(i, id)| (id.as_str(), i))
        .collect();
    let mut sorted: Vec<&ScoredGeneration> = scored.iter().collect();
    sorted.sort_by(|a, b| a.id.cmp(&b.id));
    let k = clustering.k();
    // Deviations from the first delta seen in each cluster, so a cluster of
    // identical deltas averages to exactly that delta.
    let mut pivots: Vec<Option<f64>> = vec![None; k];
    let mut sums = vec![0.0f64; k];
    let mut counts = vec![0usize; k];
    for s in sorted {
        if !s.delta.is_finite() {
            return Err(Error::Scorer(format!("non-finite delta for `{}`", s.id)));
        }
        let i = *index
            .get(s.id.as_str())
            .ok_or_else(|| Error::UnknownId(s.id.clone()))?;
        let j = clustering.cluster_of(i);
        let pivot = *pivots[j].get_or_insert(s.delta);
        sums[j] += s.delta - pivot;
        counts[j] += 1;
    }
    let sizes = clustering.sizes();
    let mut values: Vec<Option<f64>> = (0..k)
        .map(|j| {
            pivots[j].map(|p| match divisor {
                ScoreDivisor::Scored => p + sums[j] / counts[j] as f64,
                ScoreDivisor::ClusterSize => (p * counts[j] as f64 + sums[j]) / sizes[j] as f64,
            })
        })
        .collect();
    let mut present: Vec<f64> = values.iter().flatten().copied().collect();
    present.sort_by(f64::total_cmp);
    let neutral = match present.len() {
        0 => 0.0,
        m if m % 2 == 1 => present[m / 2],
        m => 0.5 * (present[m / 2 - 1] + present[m / 2]),
    };
    for v in values.iter_mut() {
        v.get_or_insert(neutral);
    }
    Ok(values.into_iter().map(|v| v.expect("filled")).collect())
}

/// Multiplies weights by already-positive cluster scores and renormalizes.
pub fn reweight(prev: &ClusterWeights, positive: &[f64]) -> Result<ClusterWeights> {
    if positive.len() != prev.len() {
        return Err(Error::InvalidWeights(format!(
            "{} scores for {} weights",
            positive.len(),
            prev.len()
        )));
    }
    if positive.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
        return Err(Error::InvalidWeights("scores must be positive".into()));
    }
    let total: f64 = positive.iter().sum();
    ClusterWeights::normalize(
        positive
            .iter()
            .zip(prev.as_slice())
            .map(|(s, w)| s / total * w)
            .collect(),
    )
}

/// Full weight update from raw cluster scores: shift to positive, reweight,
/// and optionally bound the per-iteration change of every weight to a factor
/// of `cap` (then renormalize).
pub fn update_weights(prev: &ClusterWeights, scores: &[f64], cap: Option<f64>) -> Result<ClusterWeights> {
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::InvalidWeights("cluster scores must be finite".into()));
    }
    let min = scores.iter().copied().fold(f64::INFINITY, f64::min);
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let eps = 1e-6 * (max - min + 1.0);
    let shifted: Vec<f64> = scores.iter().map(|s| s - min + eps).collect();
    let mut next = reweight(prev, &shifted)?;
    if let Some(cap) = cap {
        if !(cap.is_finite() && cap > 1.0) {
            return Err(Error::InvalidArgument(format!("weight change cap must exceed 1, got {cap}")));
        }
        next = limit_change(prev, next, cap)?;
    }
    Ok(next)
}

fn limit_change(prev: &ClusterWeights, mut next: ClusterWeights, cap: f64) -> Result<ClusterWeights> {
    // Renormalizing can push a clamped ratio back over the limit; a few
    // rounds settle it.
    for _ in 0..64 {
        let clamped: Vec<f64> = next
            .as_slice()
            .iter()
            .zip(prev.as_slice())
            .map(|(&n, &p)| n.clamp(p / cap, p * cap))
            .collect();
        let changed = clamped != next.as_slice();
        next = ClusterWeights::normalize(clamped)?;
        if !changed {
            break;
        }
    }
    Ok(next)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterativeConfig {
    pub budget: usize,
    pub iterations: usize,
    pub seed: u64,
    pub replacement: bool,
    /// Score only the instances added in the latest iteration rather than
    /// everything selected so far.
    #[serde(default)]
    pub score_new_only: bool,
    #[serde(default)]
    pub divisor: ScoreDivisor,
    /// Bound on the factor by which one update may change a weight.
    #[serde(default)]
    pub weight_change_cap: Option<f64>,
    /// Description of the scorer, persisted so a run can be resumed.
    #[serde(default)]
    pub scorer: Option<ScorerSpec>,
}

impl IterativeConfig {
    pub fn new(budget: usize) -> Self {
        Self {
            budget,
            iterations: 3,
            seed: DEFAULT_SEED,
            replacement: false,
            score_new_only: false,
            divisor: ScoreDivisor::Scored,
            weight_change_cap: Some(4.0),
            scorer: None,
        }
    }

    pub fn with_iterations(mut self, n: usize) -> Self {
        self.iterations = n;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub budget: usize,
    pub per_cluster_budget: Vec<usize>,
    /// New ids of this iteration in draw order.
    pub selected: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub multiplicities: Option<Vec<u32>>,
    pub weights_before: ClusterWeights,
    pub scored: Vec<ScoredGeneration>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cluster_scores: Option<Vec<f64>>,
    pub weights_after: ClusterWeights,
}

#[derive(Debug, Clone)]
pub struct IterativeOutcome {
    pub selection: Selection,
    pub records: Vec<IterationRecord>,
    pub weights: ClusterWeights,
}

/// Contents of `run.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunFile {
    pub config: IterativeConfig,
    pub corpus_sha256: String,
    pub n: usize,
    pub k: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct WeightsFile {
    iteration: usize,
    weights: ClusterWeights,
}

fn iter_path(dir: &Path, it: usize) -> PathBuf {
    dir.join(format!("iter_{it}.json"))
}

pub fn load_run(state_dir: &Path) -> Result<RunFile> {
    read_json(&state_dir.join("run.json"))
}

/// Reads the finished iterations of a state directory in order.
pub fn load_records(state_dir: &Path) -> Result<Vec<IterationRecord>> {
    let mut out = Vec::new();
    loop {
        let p = iter_path(state_dir, out.len() + 1);
        if !p.exists() {
            break;
        }
        let rec: IterationRecord = read_json(&p)?;
        if rec.iteration != out.len() + 1 {
            return Err(Error::State(format!(
                "{} records iteration {}",
                p.display(),
                rec.iteration
            )));
        }
        out.push(rec);
    }
    Ok(out)
}

/// Runs every iteration. With `state_dir` set, progress is persisted after
/// each iteration and an existing run there is refused.
pub fn run_iterative(
    corpus: &Corpus,
    clustering: &Clustering,
    config: &IterativeConfig,
    scorer: &mut dyn Scorer,
    state_dir: Option<&Path>,
) -> Result<IterativeOutcome> {
    if let Some(dir) = state_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        if dir.join("run.json").exists() {
            return Err(Error::State(format!(
                "{} already holds a run; resume it or pick another directory",
                dir.display()
            )));
        }
        let run = RunFile {
            config: config.clone(),
            corpus_sha256: corpus.content_hash(),
            n: corpus.len(),
            k: clustering.k(),
        };
        write_json(&run, &dir.join("run.json"))?;
    }
    drive(corpus, clustering, config, scorer, state_dir, Vec::new())
}

/// Continues the run stored in `state_dir`. Finished iterations are replayed
/// (and checked against their records) without calling the scorer.
pub fn resume(
    state_dir: &Path,
    corpus: &Corpus,
    clustering: &Clustering,
    scorer: &mut dyn Scorer,
) -> Result<IterativeOutcome> {
    let run = load_run(state_dir)?;
    if run.corpus_sha256 != corpus.content_hash() {
        return Err(Error::State("corpus differs from the one the run started with".into()));
    }
    if run.k != clustering.k() || run.n != corpus.len() {
        return Err(Error::State("clustering differs from the one the run started with".into()));
    }
    let records = load_records(state_dir)?;
    if records.len() > run.config.iterations {
        return Err(Error::State("more iteration records than iterations".into()));
    }
    drive(corpus, clustering, &run.config, scorer, Some(state_dir), records)
}

fn drive(
    corpus: &Corpus,
    clustering: &Clustering,
    config: &IterativeConfig,
    scorer: &mut dyn Scorer,
    state_dir: Option<&Path>,
    done: Vec<IterationRecord>,
) -> Result<IterativeOutcome> {
    clustering.check_corpus(corpus)?;
    corpus.require_quality(0..corpus.len())?;
    let budgets = iteration_budgets(config.budget, config.iterations)?;
    if !config.replacement && config.budget > corpus.len() {
        return Err(Error::InvalidBudget(format!(
            "budget {} exceeds corpus size {}",
            config.budget,
            corpus.len()
        )));
    }
    let k = clustering.k();
    let sizes = clustering.sizes();
    let positive: Vec<bool> = (0..corpus.len())
        .map(|i| corpus.quality(i).expect("checked") > 0.0)
        .collect();
    let mut taken = vec![false; corpus.len()];
    let mut order: Vec<usize> = Vec::new();
    let mut mults: Vec<u32> = Vec::new();
    let mut weights = ClusterWeights::uniform(k);
    let mut records = Vec::with_capacity(config.iterations);
    let workdir = state_dir
        .map(Path::to_path_buf)
        .unwrap_or_else(|| std::env::temp_dir().join(format!("kmq-{}", std::process::id())));

    for (idx, &b_it) in budgets.iter().enumerate() {
        let it = idx + 1;
        let pools: Vec<Vec<usize>> = (0..k)
            .map(|j| clustering.members(j).iter().copied().filter(|&i| !taken[i]).collect())
            .collect();
        let capacity: Vec<usize> = pools
            .iter()
            .map(|p| {
                let live = p.iter().filter(|&&i| positive[i]).count();
                match (config.replacement, live) {
                    (_, 0) => 0,
                    (true, _) => usize::MAX / (k + 1),
                    (false, live) => live,
                }
            })
            .collect();
        let effective = if weights.is_uniform() {
            None
        } else {
            Some(ClusterWeights::normalize(
                weights
                    .as_slice()
                    .iter()
                    .zip(&sizes)
                    .map(|(w, &s)| w * s as f64)
                    .collect(),
            )?)
        };
        let plan = allocate_with_capacity(&sizes, b_it, effective.as_ref(), Some(&capacity))?;
        let draws = draw_clusters(
            corpus,
            &pools,
            &plan,
            Weighting::Quality,
            config.replacement,
            config.seed,
            (it - 1) as u32,
        )?;
        let new: Vec<(usize, u32)> = draws.into_iter().flatten().collect();
        let new_ids: Vec<String> = new.iter().map(|&(i, _)| corpus.id(i).to_string()).collect();
        let new_mults: Option<Vec<u32>> = config
            .replacement
            .then(|| new.iter().map(|&(_, m)| m).collect());
        for &(i, m) in &new {
            taken[i] = true;
            order.push(i);
            mults.push(m);
        }

        if let Some(rec) = done.get(idx) {
            if rec.selected != new_ids || rec.per_cluster_budget != plan.per_cluster {
                return Err(Error::State(format!(
                    "iteration {it} does not replay to its recorded selection"
                )));
            }
            weights = rec.weights_after.clone();
            records.push(rec.clone());
            continue;
        }

        let weights_before = weights.clone();
        let (scored, scores) = if it == config.iterations {
            (Vec::new(), None)
        } else {
            let positions: &[usize] = if config.score_new_only {
                &order[order.len() - new.len()..]
            } else {
                &order
            };
            let requests: Vec<GenerationRequest> = positions
                .iter()
                .map(|&i| GenerationRequest::from_instance(corpus, i))
                .collect();
            let mut scored = scorer.score(it, &requests, &workdir)?;
            check_coverage(&requests, &scored)?;
            scored.sort_by(|a, b| a.id.cmp(&b.id));
            let s = cluster_scores(&scored, clustering, config.divisor)?;
            weights = update_weights(&weights, &s, config.weight_change_cap)?;
            (scored, Some(s))
        };
        info!(iteration = it, drawn = new_ids.len(), "iteration finished");
        let record = IterationRecord {
            iteration: it,
            budget: b_it,
            per_cluster_budget: plan.per_cluster,
            selected: new_ids,
            multiplicities: new_mults,
            weights_before,
            scored,
            cluster_scores: scores,
            weights_after: weights.clone(),
        };
        if let Some(dir) = state_dir {
            write_json(&record, &iter_path(dir, it))?;
            write_json(
                &WeightsFile {
                    iteration: it,
                    weights: weights.clone(),
                },
                &dir.join("weights.json"),
            )?;
            write_json(
                &build_selection(corpus, clustering, config, &order, &mults, &budgets, &weights),
                &dir.join("selection.json"),
            )?;
        }
        records.push(record);
    }
    let selection = build_selection(corpus, clustering, config, &order, &mults, &budgets, &weights);
    selection.validate()?;
    Ok(IterativeOutcome {
        selection,
        records,
        weights,
    })
}

fn build_selection(
    corpus: &Corpus,
    clustering: &Clustering,
    config: &IterativeConfig,
    order: &[usize],
    mults: &[u32],
    budgets: &[usize],
    weights: &ClusterWeights,
) -> Selection {
    let mut sel = Selection::new(
        SelectionMethod::IterativeKmq,
        config.budget,
        order.iter().map(|&i| corpus.id(i).to_string()).collect(),
    );
    if config.replacement {
        sel.multiplicities = Some(mults.to_vec());
    }
    if let serde_json::Value::Object(map) = json!({
        "k": clustering.k(),
        "metric": clustering.metric(),
        "seed": config.seed,
        "replacement": config.replacement,
        "iterations": config.iterations,
        "iteration_budgets": budgets,
        "score_new_only": config.score_new_only,
        "divisor": config.divisor,
        "weight_change_cap": config.weight_change_cap,
        "weights": weights,
    }) {
        sel.params = map;
    }
    sel
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::EmbeddedInstance;
    use crate::distance::DistanceMetric;
    use crate::sampling::{allocate_budget, sample_kmq, SamplerConfig};
    use crate::scorer::MockScorer;

    fn grouped(groups: usize, per: usize) -> (Corpus, Clustering) {
        let mut inst = Vec::new();
        for g in 0..groups {
            for i in 0..per {
                inst.push(
                    EmbeddedInstance::new(format!("g{g}-{i:03}"), vec![g as f32 * 100.0, i as f32 * 0.01])
                        .with_quality(0.2 + 0.8 * ((i * 7 + g) % 10) as f32 / 10.0),
                );
            }
        }
        let c = Corpus::new(2, inst).unwrap();
        let centers: Vec<Vec<f64>> = (0..groups).map(|g| vec![g as f64 * 100.0, 0.0]).collect();
        let cl = Clustering::from_centers(&c, &centers, DistanceMetric::Euclidean, 42).unwrap();
        (c, cl)
    }

    #[test]
    fn weights_validation() {
        assert!(ClusterWeights::new(vec![0.5, 0.5]).is_ok());
        assert!(ClusterWeights::new(vec![0.5, 0.6]).is_err());
        assert!(ClusterWeights::new(vec![1.5, -0.5]).is_err());
        assert!(ClusterWeights::new(vec![]).is_err());
        assert!(serde_json::from_str::<ClusterWeights>("[0.2,0.2]").is_err());
        let w: ClusterWeights = serde_json::from_str("[0.25,0.75]").unwrap();
        assert_eq!(w.as_slice(), &[0.25, 0.75]);
        assert!(ClusterWeights::uniform(3).is_uniform());
    }

    #[test]
    fn budgets_split() {
        assert_eq!(iteration_budgets(10, 3).unwrap(), vec![4, 3, 3]);
        assert_eq!(iteration_budgets(9, 3).unwrap(), vec![3, 3, 3]);
        assert!(iteration_budgets(2, 3).is_err());
        assert!(iteration_budgets(2, 0).is_err());
    }

    #[test]
    fn reweight_example() {
        let w = reweight(&ClusterWeights::uniform(2), &[3.0, 1.0]).unwrap();
        assert!((w.as_slice()[0] - 0.75).abs() < 1e-12);
        assert!((w.as_slice()[1] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn perplexity_delta_value() {
        assert!((perplexity_delta(20.0, 10.0) - -(2.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn update_handles_negative_and_equal_scores() {
        let prev = ClusterWeights::uniform(3);
        let w = update_weights(&prev, &[-2.0, -2.0, -2.0], None).unwrap();
        for x in w.as_slice() {
            assert!((x - 1.0 / 3.0).abs() < 1e-12);
        }
        let w = update_weights(&prev, &[-1.0, 0.0, 1.0], None).unwrap();
        assert!(w.as_slice()[0] < w.as_slice()[1] && w.as_slice()[1] < w.as_slice()[2]);
        assert!(w.as_slice()[0] > 0.0);
    }

    #[test]
    fn cap_bounds_change() {
        let prev = ClusterWeights::uniform(2);
        let w = update_weights(&prev, &[0.0, 10.0], Some(1.5)).unwrap();
        for (n, p) in w.as_slice().iter().zip(prev.as_slice()) {
            let r = n / p;
            assert!((1.0 / 1.5 - 1e-9..=1.5 + 1e-9).contains(&r), "{r}");
        }
        assert!(update_weights(&prev, &[0.0, 1.0], Some(1.0)).is_err());
    }

    #[test]
    fn cluster_scores_neutral_and_divisor() {
        let (_, cl) = grouped(3, 4);
        let scored = vec![
            ScoredGeneration::new("g0-000", 0.0, 1.0),
            ScoredGeneration::new("g0-001", 0.0, 3.0),
            ScoredGeneration::new("g1-000", 0.0, -1.0),
        ];
        let s = cluster_scores(&scored, &cl, ScoreDivisor::Scored).unwrap();
        assert_eq!(s[0], 2.0);
        assert_eq!(s[1], -1.0);
        assert_eq!(s[2], 0.5);
        let s = cluster_scores(&scored, &cl, ScoreDivisor::ClusterSize).unwrap();
        assert_eq!(s[0], 1.0);
        assert_eq!(s[1], -0.25);
        let bad = vec![ScoredGeneration::new("nope", 0.0, 1.0)];
        assert!(matches!(
            cluster_scores(&bad, &cl, ScoreDivisor::Scored),
            Err(Error::UnknownId(_))
        ));
        assert_eq!(cluster_scores(&[], &cl, ScoreDivisor::Scored).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn single_iteration_is_static_kmq() {
        let (c, cl) = grouped(3, 20);
        let mut mock = MockScorer::by_cluster(&cl, vec![1.0, 0.0, 0.0], 0.0, 0).unwrap();
        let cfg = IterativeConfig::new(13).with_iterations(1);
        let out = run_iterative(&c, &cl, &cfg, &mut mock, None).unwrap();
        let plan = allocate_budget(&cl, 13, None, false).unwrap();
        let stat = sample_kmq(&c, &cl, &plan, &SamplerConfig::default()).unwrap();
        assert_eq!(out.selection.ids, stat.ids);
        assert_eq!(out.records.len(), 1);
        assert!(out.records[0].scored.is_empty());
        assert_eq!(out.weights, ClusterWeights::uniform(3));
    }

    #[test]
    fn weights_move_toward_high_delta_cluster() {
        let (c, cl) = grouped(3, 40);
        let mut mock = MockScorer::by_cluster(&cl, vec![1.0, 0.1, 0.1], 0.0, 0).unwrap();
        let cfg = IterativeConfig::new(30).with_iterations(3);
        let out = run_iterative(&c, &cl, &cfg, &mut mock, None).unwrap();
        let w1: Vec<f64> = out.records.iter().map(|r| r.weights_after.as_slice()[0]).collect();
        assert!(w1[0] > 1.0 / 3.0 && w1[1] > w1[0]);
        let unique: std::collections::HashSet<_> = out.selection.ids.iter().collect();
        assert_eq!(unique.len(), 30);
        let per: Vec<usize> = out.records.iter().map(|r| r.selected.len()).collect();
        assert_eq!(per, vec![10, 10, 10]);
        let third = &out.records[2].per_cluster_budget;
        assert!(third[0] > third[1]);
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        struct FailOn(usize, MockScorer);
        impl Scorer for FailOn {
            fn score(&mut self, it: usize, r: &[GenerationRequest], w: &Path) -> Result<Vec<ScoredGeneration>> {
                if it == self.0 {
                    return Err(Error::Scorer("boom".into()));
                }
                self.1.score(it, r, w)
            }
        }
        let (c, cl) = grouped(3, 40);
        let mock = MockScorer::by_cluster(&cl, vec![1.0, 0.1, 0.3], 0.01, 3).unwrap();
        let cfg = IterativeConfig::new(30).with_iterations(3);

        let a = tempfile::tempdir().unwrap();
        let full = run_iterative(&c, &cl, &cfg, &mut mock.clone(), Some(a.path())).unwrap();

        let b = tempfile::tempdir().unwrap();
        let err = run_iterative(&c, &cl, &cfg, &mut FailOn(2, mock.clone()), Some(b.path())).unwrap_err();
        assert!(matches!(err, Error::Scorer(_)));
        assert!(b.path().join("iter_1.json").exists());
        assert!(!b.path().join("iter_2.json").exists());
        let resumed = resume(b.path(), &c, &cl, &mut mock.clone()).unwrap();
        assert_eq!(resumed.selection, full.selection);
        assert_eq!(resumed.records, full.records);
        for f in ["iter_1.json", "iter_2.json", "iter_3.json", "weights.json", "selection.json", "run.json"] {
            assert_eq!(
                std::fs::read(a.path().join(f)).unwrap(),
                std::fs::read(b.path().join(f)).unwrap(),
                "{f}"
            );
        }
        assert!(matches!(
            run_iterative(&c, &cl, &cfg, &mut mock.clone(), Some(a.path())),
            Err(Error::State(_))
        ));
    }
}
