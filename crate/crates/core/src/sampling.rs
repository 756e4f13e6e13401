//! Budget allocation and the static samplers: random, k-center, kM-Closest,
//! kM-Random and kMQ.

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::clustering::{kcenter_greedy, Clustering};
use crate::corpus::{Corpus, Selection, SelectionMethod};
use crate::distance::{sq_dist_center, DistanceMetric, PointSet};
use crate::error::{Error, Result};
use crate::iterative::ClusterWeights;
use crate::rng::{Stream, StreamRng, DEFAULT_SEED};

/// Per-cluster sample counts that sum to `total`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BudgetPlan {
    pub total: usize,
    pub per_cluster: Vec<usize>,
}

/// What a budget is split in proportion to.
#[derive(Debug, Clone, PartialEq)]
pub enum Shares {
    /// Integer sizes; apportioned with exact integer arithmetic.
    Counts(Vec<u64>),
    /// Non-negative real weights.
    Weights(Vec<f64>),
}

impl Shares {
    fn len(&self) -> usize {
        match self {
            Shares::Counts(c) => c.len(),
            Shares::Weights(w) => w.len(),
        }
    }

    fn subset(&self, idx: &[usize]) -> Shares {
        match self {
            Shares::Counts(c) => Shares::Counts(idx.iter().map(|&j| c[j]).collect()),
            Shares::Weights(w) => Shares::Weights(idx.iter().map(|&j| w[j]).collect()),
        }
    }

    fn is_zero(&self) -> bool {
        match self {
            Shares::Counts(c) => c.iter().all(|&v| v == 0),
            Shares::Weights(w) => w.iter().all(|&v| v == 0.0),
        }
    }

    /// Real-valued target `b * share_j / sum(shares)`.
    pub fn targets(&self, b: usize) -> Vec<f64> {
        match self {
            Shares::Counts(c) => {
                let s: u64 = c.iter().sum();
                c.iter().map(|&v| b as f64 * v as f64 / s as f64).collect()
            }
            Shares::Weights(w) => {
                let s: f64 = w.iter().sum();
                w.iter().map(|&v| b as f64 * v / s).collect()
            }
        }
    }
}

/// Hamilton apportionment: floor every target, then hand the leftover units
/// to the largest fractional parts, ties to the lowest index.
///
/// Shares must not all be zero.
pub fn largest_remainder(b: usize, shares: &Shares) -> Vec<usize> {
    let m = shares.len();
    // (remainder key, floor) per entry; larger key wins a leftover unit.
    let mut alloc: Vec<usize>;
    let mut order: Vec<usize> = (0..m).collect();
    match shares {
        Shares::Counts(c) => {
            let s: u128 = c.iter().map(|&v| v as u128).sum();
            assert!(s > 0, "largest_remainder over zero shares");
            let prod: Vec<u128> = c.iter().map(|&v| b as u128 * v as u128).collect();
            alloc = prod.iter().map(|&p| (p / s) as usize).collect();
            let rem: Vec<u128> = prod.iter().map(|&p| p % s).collect();
            order.sort_by(|&x, &y| rem[y].cmp(&rem[x]).then(x.cmp(&y)));
        }
        Shares::Weights(w) => {
            let s: f64 = w.iter().sum();
            assert!(s > 0.0, "largest_remainder over zero shares");
            let t: Vec<f64> = w.iter().map(|&v| b as f64 * v / s).collect();
            alloc = t.iter().map(|&v| v.floor() as usize).collect();
            let rem: Vec<f64> = t.iter().zip(&alloc).map(|(&v, &f)| v - f as f64).collect();
            // Rounding can push the floors past b; take back from the smallest
            // remainders.
            let mut excess = alloc.iter().sum::<usize>().saturating_sub(b);
            if excess > 0 {
                let mut back: Vec<usize> = (0..m).filter(|&j| alloc[j] > 0).collect();
                back.sort_by(|&x, &y| rem[x].total_cmp(&rem[y]).then(y.cmp(&x)));
                for &j in back.iter().cycle() {
                    if excess == 0 {
                        break;
                    }
                    if alloc[j] > 0 {
                        alloc[j] -= 1;
                        excess -= 1;
                    }
                }
            }
            order.sort_by(|&x, &y| rem[y].total_cmp(&rem[x]).then(x.cmp(&y)));
        }
    }
    let leftover = b - alloc.iter().sum::<usize>();
    for &j in order.iter().cycle().take(leftover) {
        alloc[j] += 1;
    }
    alloc
}

/// Splits `b` by `shares`, then caps every entry at `capacity` (when given)
/// and re-apportions the overflow over entries that still have room.
pub fn apportion(b: usize, shares: &Shares, capacity: Option<&[usize]>) -> Result<Vec<usize>> {
    if b == 0 {
        return Err(Error::InvalidBudget("budget must be positive".into()));
    }
    let m = shares.len();
    if m == 0 {
        return Err(Error::InvalidBudget("no clusters to allocate over".into()));
    }
    if let Some(cap) = capacity {
        assert_eq!(cap.len(), m);
        let room: usize = cap.iter().sum();
        if b > room {
            return Err(Error::InvalidBudget(format!(
                "budget {b} exceeds the {room} instances available without replacement"
            )));
        }
    }
    let mut alloc = if shares.is_zero() {
        match capacity {
            Some(cap) => largest_remainder(b, &Shares::Counts(cap.iter().map(|&c| c as u64).collect())),
            None => return Err(Error::InvalidWeights("all shares are zero".into())),
        }
    } else {
        largest_remainder(b, shares)
    };
    let Some(cap) = capacity else {
        return Ok(alloc);
    };
    loop {
        let mut overflow = 0;
        for j in 0..m {
            if alloc[j] > cap[j] {
                overflow += alloc[j] - cap[j];
                alloc[j] = cap[j];
            }
        }
        if overflow == 0 {
            return Ok(alloc);
        }
        let open: Vec<usize> = (0..m).filter(|&j| alloc[j] < cap[j]).collect();
        if open.is_empty() {
            return Err(Error::InvalidBudget(
                "every cluster is capped with budget remaining".into(),
            ));
        }
        let mut sub = shares.subset(&open);
        if sub.is_zero() {
            sub = Shares::Counts(open.iter().map(|&j| (cap[j] - alloc[j]) as u64).collect());
        }
        for (&j, extra) in open.iter().zip(largest_remainder(overflow, &sub)) {
            alloc[j] += extra;
        }
    }
}

/// Budget plan for a clustering: proportional to cluster size, or
/// `b * w_j` when weights are given. Without replacement every `b_j` is
/// capped at the cluster size.
pub fn allocate_budget(
    clustering: &Clustering,
    b: usize,
    weights: Option<&ClusterWeights>,
    replacement: bool,
) -> Result<BudgetPlan> {
    let sizes = clustering.sizes();
    let capacity = (!replacement).then_some(sizes.as_slice());
    allocate_with_capacity(&sizes, b, weights, capacity)
}

/// As [`allocate_budget`] with an explicit per-cluster capacity.
pub fn allocate_with_capacity(
    sizes: &[usize],
    b: usize,
    weights: Option<&ClusterWeights>,
    capacity: Option<&[usize]>,
) -> Result<BudgetPlan> {
    let shares = match weights {
        None => Shares::Counts(sizes.iter().map(|&s| s as u64).collect()),
        Some(w) => {
            if w.len() != sizes.len() {
                return Err(Error::InvalidWeights(format!(
                    "{} weights for {} clusters",
                    w.len(),
                    sizes.len()
                )));
            }
            Shares::Weights(w.as_slice().to_vec())
        }
    };
    let per_cluster = apportion(b, &shares, capacity)?;
    Ok(BudgetPlan {
        total: b,
        per_cluster,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub method: SelectionMethod,
    pub replacement: bool,
    pub seed: u64,
    /// Overrides the proportional split when set.
    pub weights: Option<ClusterWeights>,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            method: SelectionMethod::Kmq,
            replacement: false,
            seed: DEFAULT_SEED,
            weights: None,
        }
    }
}

impl SamplerConfig {
    pub fn new(method: SelectionMethod) -> Self {
        Self {
            method,
            ..Self::default()
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_replacement(mut self, replacement: bool) -> Self {
        self.replacement = replacement;
        self
    }
}

/// How draws inside a cluster are weighted.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Weighting {
    Quality,
    Uniform,
}

/// Draws `count` candidates. Returns `(position, multiplicity)` in draw order.
///
/// Without replacement this is sequential weighted sampling without
/// replacement, realized through exponential keys `ln(u) / w` (largest keys
/// first), which has the same law as successive renormalized draws. Equal
/// weights take the uniform path, so equal-quality draws match uniform ones
/// exactly.
pub(crate) fn draw(
    candidates: &[usize],
    weights: Option<&[f64]>,
    count: usize,
    replacement: bool,
    rng: &mut StreamRng,
) -> Vec<(usize, u32)> {
    let m = candidates.len();
    let weights = weights.filter(|w| w.iter().any(|&x| x != w[0]));
    if !replacement {
        let mut keyed: Vec<(f64, usize)> = Vec::with_capacity(m);
        for idx in 0..m {
            let u = rng.unit_open0();
            let key = match weights {
                None => u.ln(),
                Some(w) if w[idx] > 0.0 => u.ln() / w[idx],
                Some(_) => continue,
            };
            keyed.push((key, idx));
        }
        keyed.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        return keyed
            .into_iter()
            .take(count)
            .map(|(_, idx)| (candidates[idx], 1))
            .collect();
    }
    let cumulative: Option<Vec<f64>> = weights.map(|w| {
        let mut acc = 0.0;
        w.iter()
            .map(|&x| {
                acc += x;
                acc
            })
            .collect()
    });
    let last_positive = weights.and_then(|w| w.iter().rposition(|&x| x > 0.0));
    let mut counts: Vec<(usize, u32)> = Vec::new();
    let mut slot: std::collections::HashMap<usize, usize> = std::collections::HashMap::new();
    for _ in 0..count {
        let u = rng.unit();
        let idx = match &cumulative {
            None => ((u * m as f64) as usize).min(m - 1),
            Some(cum) => {
                let x = u * cum[m - 1];
                cum.partition_point(|&c| c <= x)
                    .min(last_positive.expect("positive weight exists"))
            }
        };
        let pos = candidates[idx];
        match slot.get(&pos) {
            Some(&s) => counts[s].1 += 1,
            None => {
                slot.insert(pos, counts.len());
                counts.push((pos, 1));
            }
        }
    }
    counts
}

/// Positions sorted by id, so draws do not depend on file order.
fn id_ordered(corpus: &Corpus, positions: &[usize]) -> Vec<usize> {
    let mut sorted = positions.to_vec();
    sorted.sort_by(|&a, &b| corpus.id(a).cmp(corpus.id(b)));
    sorted
}

/// Draws `plan.per_cluster[j]` items from `pools[j]` for every cluster on
/// stream `(seed, round, j)`.
pub(crate) fn draw_clusters(
    corpus: &Corpus,
    pools: &[Vec<usize>],
    plan: &BudgetPlan,
    weighting: Weighting,
    replacement: bool,
    seed: u64,
    round: u32,
) -> Result<Vec<Vec<(usize, u32)>>> {
    if plan.per_cluster.len() != pools.len() {
        return Err(Error::InvalidBudget(format!(
            "plan covers {} clusters, clustering has {}",
            plan.per_cluster.len(),
            pools.len()
        )));
    }
    let mut out = Vec::with_capacity(pools.len());
    for (j, (pool, &bj)) in pools.iter().zip(&plan.per_cluster).enumerate() {
        if bj == 0 {
            out.push(Vec::new());
            continue;
        }
        let pool = &id_ordered(corpus, pool);
        if pool.is_empty() {
            return Err(Error::ClusterSampling {
                cluster: j,
                reason: format!("budget {bj} but no candidates"),
            });
        }
        let weights: Option<Vec<f64>> = match weighting {
            Weighting::Uniform => None,
            Weighting::Quality => {
                corpus.require_quality(pool.iter().copied())?;
                let w: Vec<f64> = pool
                    .iter()
                    .map(|&i| corpus.quality(i).expect("checked") as f64)
                    .collect();
                let positive = w.iter().filter(|&&x| x > 0.0).count();
                if positive == 0 {
                    return Err(Error::ClusterSampling {
                        cluster: j,
                        reason: "every quality is zero".into(),
                    });
                }
                if !replacement && positive < bj {
                    return Err(Error::ClusterSampling {
                        cluster: j,
                        reason: format!(
                            "budget {bj} exceeds the {positive} candidates with positive quality"
                        ),
                    });
                }
                Some(w)
            }
        };
        if !replacement && bj > pool.len() {
            return Err(Error::ClusterSampling {
                cluster: j,
                reason: format!("budget {bj} exceeds the {} candidates", pool.len()),
            });
        }
        let mut rng = StreamRng::new(
            seed,
            Stream::ClusterSample {
                round,
                cluster: j as u32,
            },
        );
        out.push(draw(pool, weights.as_deref(), bj, replacement, &mut rng));
    }
    Ok(out)
}

fn to_selection(
    corpus: &Corpus,
    method: SelectionMethod,
    budget: usize,
    draws: impl IntoIterator<Item = (usize, u32)>,
    replacement: bool,
    params: serde_json::Value,
) -> Selection {
    let (positions, counts): (Vec<usize>, Vec<u32>) = draws.into_iter().unzip();
    let mut sel = Selection::new(
        method,
        budget,
        positions.iter().map(|&i| corpus.id(i).to_string()).collect(),
    );
    if replacement {
        sel.multiplicities = Some(counts);
    }
    if let serde_json::Value::Object(map) = params {
        sel.params = map;
    }
    sel
}

fn check_plan(clustering: &Clustering, corpus: &Corpus, plan: &BudgetPlan) -> Result<()> {
    clustering.check_corpus(corpus)?;
    if plan.per_cluster.len() != clustering.k() {
        return Err(Error::InvalidBudget(format!(
            "plan covers {} clusters, clustering has {}",
            plan.per_cluster.len(),
            clustering.k()
        )));
    }
    if plan.per_cluster.iter().sum::<usize>() != plan.total || plan.total == 0 {
        return Err(Error::InvalidBudget(
            "plan entries must sum to a positive total".into(),
        ));
    }
    Ok(())
}

fn cluster_params(clustering: &Clustering, plan: &BudgetPlan, config: &SamplerConfig) -> serde_json::Value {
    json!({
        "k": clustering.k(),
        "metric": clustering.metric(),
        "seed": config.seed,
        "replacement": config.replacement,
        "per_cluster_budget": plan.per_cluster,
    })
}

fn sample_by_cluster(
    corpus: &Corpus,
    clustering: &Clustering,
    plan: &BudgetPlan,
    config: &SamplerConfig,
    method: SelectionMethod,
    weighting: Weighting,
) -> Result<Selection> {
    check_plan(clustering, corpus, plan)?;
    let pools: Vec<Vec<usize>> = (0..clustering.k())
        .map(|j| clustering.members(j).to_vec())
        .collect();
    let draws = draw_clusters(
        corpus,
        &pools,
        plan,
        weighting,
        config.replacement,
        config.seed,
        0,
    )?;
    Ok(to_selection(
        corpus,
        method,
        plan.total,
        draws.into_iter().flatten(),
        config.replacement,
        cluster_params(clustering, plan, config),
    ))
}

/// kMQ: within cluster `j`, draw `b_j` items with probability proportional
/// to quality. Output is grouped by cluster in index order.
pub fn sample_kmq(
    corpus: &Corpus,
    clustering: &Clustering,
    plan: &BudgetPlan,
    config: &SamplerConfig,
) -> Result<Selection> {
    sample_by_cluster(corpus, clustering, plan, config, SelectionMethod::Kmq, Weighting::Quality)
}

/// kM-Random: uniform draws within each cluster.
pub fn sample_km_random(
    corpus: &Corpus,
    clustering: &Clustering,
    plan: &BudgetPlan,
    config: &SamplerConfig,
) -> Result<Selection> {
    sample_by_cluster(
        corpus,
        clustering,
        plan,
        config,
        SelectionMethod::KmRandom,
        Weighting::Uniform,
    )
}

/// kM-Closest: the `b_j` members nearest their center, ties by id.
pub fn sample_km_closest(
    corpus: &Corpus,
    clustering: &Clustering,
    plan: &BudgetPlan,
    config: &SamplerConfig,
) -> Result<Selection> {
    check_plan(clustering, corpus, plan)?;
    let ps = PointSet::new(corpus, clustering.metric());
    let mut ids = Vec::with_capacity(plan.total);
    for j in 0..clustering.k() {
        let bj = plan.per_cluster[j];
        if bj == 0 {
            continue;
        }
        let mut ranked: Vec<(f64, usize)> = clustering
            .members(j)
            .iter()
            .map(|&i| (sq_dist_center(ps.row(i), clustering.center(j)), i))
            .collect();
        if bj > ranked.len() {
            return Err(Error::ClusterSampling {
                cluster: j,
                reason: format!("budget {bj} exceeds the {} members", ranked.len()),
            });
        }
        ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| corpus.id(a.1).cmp(corpus.id(b.1))));
        ids.extend(ranked.into_iter().take(bj).map(|(_, i)| (i, 1)));
    }
    Ok(to_selection(
        corpus,
        SelectionMethod::KmClosest,
        plan.total,
        ids,
        false,
        cluster_params(clustering, plan, config),
    ))
}

/// Seeded uniform draw of `b` ids from the whole corpus.
pub fn sample_random(corpus: &Corpus, b: usize, config: &SamplerConfig) -> Result<Selection> {
    corpus.ensure_non_empty()?;
    if b == 0 || (!config.replacement && b > corpus.len()) {
        return Err(Error::InvalidBudget(format!(
            "budget {b} for a corpus of {}",
            corpus.len()
        )));
    }
    let all = id_ordered(corpus, &(0..corpus.len()).collect::<Vec<_>>());
    let mut rng = StreamRng::new(config.seed, Stream::Uniform);
    let draws = draw(&all, None, b, config.replacement, &mut rng);
    Ok(to_selection(
        corpus,
        SelectionMethod::Random,
        b,
        draws,
        config.replacement,
        json!({"seed": config.seed, "replacement": config.replacement}),
    ))
}

/// The `b` greedy k-center centers, in pick order.
///
/// Farthest-first traversal is prefix-stable: the first `b` picks of a
/// traversal over all `n` points (k = n) are exactly the k = b centers, so
/// this also serves the "k equals the number of points" reading truncated to
/// the budget.
pub fn sample_kcenter(
    corpus: &Corpus,
    b: usize,
    metric: DistanceMetric,
    config: &SamplerConfig,
) -> Result<Selection> {
    if b == 0 {
        return Err(Error::InvalidBudget("budget must be positive".into()));
    }
    let cl = kcenter_greedy(corpus, b, metric, config.seed)?;
    let picks = cl.center_points().expect("k-center records its picks");
    Ok(to_selection(
        corpus,
        SelectionMethod::KCenter,
        b,
        picks.iter().map(|&i| (i, 1)),
        false,
        json!({"seed": config.seed, "metric": metric, "kcenter_objective": cl.kcenter_objective()}),
    ))
}
