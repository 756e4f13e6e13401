//! k-means (Lloyd with k-means++ seeding) and greedy k-center clustering.
//!
//! All order-sensitive steps (seeding draws, centroid sums, objective sums,
//! farthest-point ties) visit points in id-sorted order, so shuffling a
//! corpus changes nothing but positions.

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use tracing::debug;

use crate::corpus::{read_json, write_json, Corpus};
use crate::distance::{sq_dist, sq_dist_center, DistanceMetric, PointSet};
use crate::error::{Error, Result};
use crate::rng::{Stream, StreamRng, DEFAULT_SEED};

/// A partition of a corpus around `k` centers.
#[derive(Debug, Clone, PartialEq)]
pub struct Clustering {
    k: usize,
    dim: usize,
    metric: DistanceMetric,
    seed: u64,
    centers: Vec<f64>,
    ids: Vec<String>,
    assignment: Vec<usize>,
    members: Vec<Vec<usize>>,
    kmeans_objective: f64,
    kcenter_objective: f64,
    center_points: Option<Vec<usize>>,
    trace: Vec<f64>,
}

impl Clustering {
    fn build(
        corpus: &Corpus,
        k: usize,
        metric: DistanceMetric,
        seed: u64,
        centers: Vec<f64>,
        nearest: &[(usize, f64)],
    ) -> Self {
        let mut members = vec![Vec::new(); k];
        let mut assignment = Vec::with_capacity(nearest.len());
        for (i, &(c, _)) in nearest.iter().enumerate() {
            members[c].push(i);
            assignment.push(c);
        }
        let (kmeans_objective, kcenter_objective) = objectives(corpus, nearest);
        Self {
            k,
            dim: corpus.dimension(),
            metric,
            seed,
            centers,
            ids: corpus.ids().to_vec(),
            assignment,
            members,
            kmeans_objective,
            kcenter_objective,
            center_points: None,
            trace: Vec::new(),
        }
    }

    /// Assigns every point to its nearest center, ties to the lowest index.
    pub fn from_centers(
        corpus: &Corpus,
        centers: &[Vec<f64>],
        metric: DistanceMetric,
        seed: u64,
    ) -> Result<Self> {
        corpus.ensure_non_empty()?;
        let flat = flatten_centers(centers, corpus.dimension())?;
        let ps = PointSet::new(corpus, metric);
        let nearest = ps.nearest(&flat);
        Ok(Self::build(corpus, centers.len(), metric, seed, flat, &nearest))
    }

    /// Wraps an externally supplied labeling. Centers are the member means;
    /// the nearest-center property is not enforced.
    pub fn from_labels(
        corpus: &Corpus,
        labels: &[usize],
        k: usize,
        metric: DistanceMetric,
    ) -> Result<Self> {
        corpus.ensure_non_empty()?;
        if labels.len() != corpus.len() {
            return Err(Error::ClusteringMismatch(format!(
                "{} labels for {} points",
                labels.len(),
                corpus.len()
            )));
        }
        if k == 0 || labels.iter().any(|&l| l >= k) {
            return Err(Error::InvalidK { k, n: corpus.len() });
        }
        let ps = PointSet::new(corpus, metric);
        let centers = recenter(&ps, labels, k, None);
        let dim = corpus.dimension();
        let nearest: Vec<(usize, f64)> = labels
            .iter()
            .enumerate()
            .map(|(i, &c)| (c, sq_dist_center(ps.row(i), &centers[c * dim..(c + 1) * dim])))
            .collect();
        Ok(Self::build(corpus, k, metric, DEFAULT_SEED, centers, &nearest))
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn dimension(&self) -> usize {
        self.dim
    }

    pub fn metric(&self) -> DistanceMetric {
        self.metric
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn len(&self) -> usize {
        self.assignment.len()
    }

    pub fn is_empty(&self) -> bool {
        self.assignment.is_empty()
    }

    pub fn center(&self, j: usize) -> &[f64] {
        &self.centers[j * self.dim..(j + 1) * self.dim]
    }

    /// Row-major `k x dim` centers.
    pub fn centers_flat(&self) -> &[f64] {
        &self.centers
    }

    pub fn centers(&self) -> Vec<Vec<f64>> {
        self.centers.chunks_exact(self.dim).map(<[f64]>::to_vec).collect()
    }

    /// Cluster of the point at corpus position `i`.
    pub fn cluster_of(&self, i: usize) -> usize {
        self.assignment[i]
    }

    pub fn assignment(&self) -> &[usize] {
        &self.assignment
    }

    /// Corpus positions in cluster `j`, ascending.
    pub fn members(&self, j: usize) -> &[usize] {
        &self.members[j]
    }

    pub fn member_ids(&self, j: usize) -> impl Iterator<Item = &str> + '_ {
        self.members[j].iter().map(move |&i| self.ids[i].as_str())
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.members.iter().map(Vec::len).collect()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn kmeans_objective(&self) -> f64 {
        self.kmeans_objective
    }

    pub fn kcenter_objective(&self) -> f64 {
        self.kcenter_objective
    }

    /// For greedy k-center: positions of the chosen centers in pick order.
    pub fn center_points(&self) -> Option<&[usize]> {
        self.center_points.as_deref()
    }

    /// Objective after each Lloyd (assign, recenter) pass of the winning run.
    pub fn objective_trace(&self) -> &[f64] {
        &self.trace
    }

    /// Fails unless this clustering was built over exactly `corpus`'s ids in
    /// the same order.
    pub fn check_corpus(&self, corpus: &Corpus) -> Result<()> {
        if corpus.dimension() != self.dim {
            return Err(Error::ClusteringMismatch(format!(
                "clustering dimension {} vs corpus dimension {}",
                self.dim,
                corpus.dimension()
            )));
        }
        if corpus.ids() != self.ids.as_slice() {
            return Err(Error::ClusteringMismatch(
                "clustering ids differ from corpus ids".into(),
            ));
        }
        Ok(())
    }

    /// Recomputes `(kmeans, kcenter)` objectives from the centers alone.
    pub fn recompute_objectives(&self, corpus: &Corpus) -> Result<(f64, f64)> {
        self.check_corpus(corpus)?;
        let ps = PointSet::new(corpus, self.metric);
        let nearest = ps.nearest(&self.centers);
        Ok(objectives(corpus, &nearest))
    }

    pub fn to_file(&self) -> ClusteringFile {
        ClusteringFile {
            k: self.k,
            metric: self.metric,
            seed: self.seed,
            centers: self.centers(),
            assignment: self
                .ids
                .iter()
                .cloned()
                .zip(self.assignment.iter().copied())
                .collect(),
            kmeans_objective: self.kmeans_objective,
            kcenter_objective: self.kcenter_objective,
            center_ids: self
                .center_points
                .as_ref()
                .map(|p| p.iter().map(|&i| self.ids[i].clone()).collect()),
            provenance: None,
        }
    }

    /// Rebuilds a clustering from its persisted form against `corpus`.
    pub fn from_file(file: ClusteringFile, corpus: &Corpus) -> Result<Self> {
        corpus.ensure_non_empty()?;
        if file.k == 0 || file.centers.len() != file.k {
            return Err(Error::ClusteringMismatch(format!(
                "k = {} but {} centers",
                file.k,
                file.centers.len()
            )));
        }
        let dim = corpus.dimension();
        let centers = flatten_centers(&file.centers, dim)?;
        if file.assignment.len() != corpus.len() {
            return Err(Error::ClusteringMismatch(format!(
                "{} assignments for {} points",
                file.assignment.len(),
                corpus.len()
            )));
        }
        let mut assignment = vec![0usize; corpus.len()];
        for (id, &c) in &file.assignment {
            let pos = corpus
                .position(id)
                .ok_or_else(|| Error::UnknownId(id.clone()))?;
            if c >= file.k {
                return Err(Error::ClusteringMismatch(format!(
                    "`{id}` assigned to cluster {c} >= k"
                )));
            }
            assignment[pos] = c;
        }
        let mut members = vec![Vec::new(); file.k];
        for (i, &c) in assignment.iter().enumerate() {
            members[c].push(i);
        }
        let center_points = match file.center_ids {
            Some(ids) => Some(
                ids.iter()
                    .map(|id| corpus.position(id).ok_or_else(|| Error::UnknownId(id.clone())))
                    .collect::<Result<Vec<_>>>()?,
            ),
            None => None,
        };
        Ok(Self {
            k: file.k,
            dim,
            metric: file.metric,
            seed: file.seed,
            centers,
            ids: corpus.ids().to_vec(),
            assignment,
            members,
            kmeans_objective: file.kmeans_objective,
            kcenter_objective: file.kcenter_objective,
            center_points,
            trace: Vec::new(),
        })
    }
}

/// On-disk form of a [`Clustering`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusteringFile {
    pub k: usize,
    pub metric: DistanceMetric,
    pub seed: u64,
    pub centers: Vec<Vec<f64>>,
    pub assignment: BTreeMap<String, usize>,
    pub kmeans_objective: f64,
    pub kcenter_objective: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub center_ids: Option<Vec<String>>,
    /// Free-form record of how the file was produced; ignored on load.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<serde_json::Value>,
}

pub fn save_clustering(clustering: &Clustering, path: impl AsRef<Path>) -> Result<()> {
    write_json(&clustering.to_file(), path.as_ref())
}

pub fn load_clustering(path: impl AsRef<Path>, corpus: &Corpus) -> Result<Clustering> {
    let file: ClusteringFile = read_json(path.as_ref())?;
    Clustering::from_file(file, corpus)
}

fn flatten_centers(centers: &[Vec<f64>], dim: usize) -> Result<Vec<f64>> {
    if centers.is_empty() {
        return Err(Error::InvalidArgument("no centers given".into()));
    }
    let mut flat = Vec::with_capacity(centers.len() * dim);
    for c in centers {
        if c.len() != dim {
            return Err(Error::VectorDimension {
                expected: dim,
                found: c.len(),
            });
        }
        flat.extend_from_slice(c);
    }
    Ok(flat)
}

/// `(sum of squared distances, max distance)` accumulated in id order.
fn objectives(corpus: &Corpus, nearest: &[(usize, f64)]) -> (f64, f64) {
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    order.sort_by(|&a, &b| corpus.id(a).cmp(corpus.id(b)));
    let mut sum = 0.0;
    let mut max = 0.0f64;
    for &i in &order {
        let d2 = nearest[i].1;
        sum += d2;
        max = max.max(d2);
    }
    (sum, max.sqrt())
}

/// Nearest-center assignment of a corpus to given centers.
#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    /// Cluster index per corpus position.
    pub labels: Vec<usize>,
    /// Corpus positions per cluster, ascending.
    pub members: Vec<Vec<usize>>,
    /// Distance of each point to its center.
    pub distances: Vec<f64>,
}

pub fn assign(corpus: &Corpus, centers: &[Vec<f64>], metric: DistanceMetric) -> Result<Assignment> {
    let flat = flatten_centers(centers, corpus.dimension())?;
    let ps = PointSet::new(corpus, metric);
    let nearest = ps.nearest(&flat);
    let mut members = vec![Vec::new(); centers.len()];
    for (i, &(c, _)) in nearest.iter().enumerate() {
        members[c].push(i);
    }
    Ok(Assignment {
        labels: nearest.iter().map(|p| p.0).collect(),
        members,
        distances: nearest.iter().map(|p| p.1.sqrt()).collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KMeansParams {
    pub k: usize,
    pub metric: DistanceMetric,
    pub seed: u64,
    pub max_iters: usize,
    /// Stop once the relative objective improvement falls below this.
    pub tol: f64,
    pub restarts: usize,
}

impl KMeansParams {
    pub fn new(k: usize) -> Self {
        Self {
            k,
            metric: DistanceMetric::default(),
            seed: DEFAULT_SEED,
            max_iters: 100,
            tol: 1e-4,
            restarts: 1,
        }
    }

    pub fn with_metric(mut self, metric: DistanceMetric) -> Self {
        self.metric = metric;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_max_iters(mut self, max_iters: usize) -> Self {
        self.max_iters = max_iters;
        self
    }

    pub fn with_tol(mut self, tol: f64) -> Self {
        self.tol = tol;
        self
    }

    pub fn with_restarts(mut self, restarts: usize) -> Self {
        self.restarts = restarts;
        self
    }
}

fn check_k(corpus: &Corpus, k: usize) -> Result<()> {
    corpus.ensure_non_empty()?;
    if k == 0 || k > corpus.len() {
        return Err(Error::InvalidK { k, n: corpus.len() });
    }
    Ok(())
}

/// Final centers, nearest `(center, squared distance)` per point, objective trace.
type LloydRun = (Vec<f64>, Vec<(usize, f64)>, Vec<f64>);

/// Best of `restarts` k-means++ initialized Lloyd runs.
pub fn kmeans(corpus: &Corpus, params: &KMeansParams) -> Result<Clustering> {
    check_k(corpus, params.k)?;
    if params.restarts == 0 {
        return Err(Error::InvalidArgument("restarts must be at least 1".into()));
    }
    let ps = PointSet::new(corpus, params.metric);
    let mut best: Option<(f64, LloydRun)> = None;
    for restart in 0..params.restarts {
        let (centers, nearest, trace) = lloyd(&ps, params, restart as u32)?;
        let obj = *trace.last().expect("trace is never empty");
        if best.as_ref().is_none_or(|b| obj < b.0) {
            best = Some((obj, (centers, nearest, trace)));
        }
    }
    let (_, (centers, nearest, trace)) = best.expect("at least one restart");
    let mut c = Clustering::build(corpus, params.k, params.metric, params.seed, centers, &nearest);
    c.trace = trace;
    Ok(c)
}

/// One Lloyd run. Returns final centers, the nearest-center assignment for
/// those centers, and the objective after every pass.
fn lloyd(
    ps: &PointSet<'_>,
    params: &KMeansParams,
    restart: u32,
) -> Result<LloydRun> {
    let k = params.k;
    let mut rng = StreamRng::new(params.seed, Stream::KMeansInit { restart });
    let mut centers = kmeans_pp(ps, k, &mut rng);
    let mut nearest = ps.nearest(&centers);
    repair_empty(ps, k, &mut centers, &mut nearest)?;
    let mut prev = canonical_sum(ps, &nearest);
    let mut trace = vec![prev];
    for it in 0..params.max_iters {
        let labels: Vec<usize> = nearest.iter().map(|p| p.0).collect();
        centers = recenter(ps, &labels, k, Some(&centers));
        nearest = ps.nearest(&centers);
        repair_empty(ps, k, &mut centers, &mut nearest)?;
        let cur = canonical_sum(ps, &nearest);
        trace.push(cur);
        debug!(restart, it, objective = cur, "lloyd pass");
        if cur == 0.0 || prev - cur <= params.tol * prev {
            break;
        }
        prev = cur;
    }
    Ok((centers, nearest, trace))
}

fn canonical_sum(ps: &PointSet<'_>, nearest: &[(usize, f64)]) -> f64 {
    ps.canonical().iter().map(|&i| nearest[i].1).sum()
}

fn kmeans_pp(ps: &PointSet<'_>, k: usize, rng: &mut StreamRng) -> Vec<f64> {
    let n = ps.len();
    let dim = ps.dim();
    let order = ps.canonical();
    let mut chosen = vec![false; n];
    let mut centers = Vec::with_capacity(k * dim);
    let first = order[rng.below(n)];
    chosen[first] = true;
    centers.extend(ps.row(first).iter().map(|&v| v as f64));
    let mut mind2: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|i| sq_dist(ps.row(i), ps.row(first)))
        .collect();
    for _ in 1..k {
        let total: f64 = order.iter().map(|&i| mind2[i]).sum();
        let next = if total > 0.0 {
            let target = rng.unit() * total;
            let mut acc = 0.0;
            let mut pick = None;
            for &i in order {
                if mind2[i] > 0.0 {
                    acc += mind2[i];
                    pick = Some(i);
                    if acc > target {
                        break;
                    }
                }
            }
            pick.expect("positive total has a positive entry")
        } else {
            // Every point coincides with a center; take the first unused one.
            *order
                .iter()
                .find(|&&i| !chosen[i])
                .expect("k <= n leaves an unused point")
        };
        chosen[next] = true;
        let row = ps.row(next);
        centers.extend(row.iter().map(|&v| v as f64));
        mind2.par_iter_mut().enumerate().for_each(|(i, m)| {
            let d = sq_dist(ps.row(i), row);
            if d < *m {
                *m = d;
            }
        });
    }
    centers
}

/// Member means in id order; clusters without members keep `previous`.
fn recenter(ps: &PointSet<'_>, labels: &[usize], k: usize, previous: Option<&[f64]>) -> Vec<f64> {
    let dim = ps.dim();
    let mut sums = vec![0.0f64; k * dim];
    let mut counts = vec![0usize; k];
    for &i in ps.canonical() {
        let c = labels[i];
        counts[c] += 1;
        for (s, &v) in sums[c * dim..(c + 1) * dim].iter_mut().zip(ps.row(i)) {
            *s += v as f64;
        }
    }
    for c in 0..k {
        let slot = &mut sums[c * dim..(c + 1) * dim];
        if counts[c] == 0 {
            if let Some(prev) = previous {
                slot.copy_from_slice(&prev[c * dim..(c + 1) * dim]);
            }
        } else {
            let inv = counts[c] as f64;
            slot.iter_mut().for_each(|s| *s /= inv);
        }
    }
    sums
}

/// Moves each empty cluster's center onto the point of the largest cluster
/// that lies farthest from its own center, then reassigns.
fn repair_empty(
    ps: &PointSet<'_>,
    k: usize,
    centers: &mut [f64],
    nearest: &mut Vec<(usize, f64)>,
) -> Result<()> {
    let dim = ps.dim();
    for _attempt in 0..(2 * k + 8) {
        let mut counts = vec![0usize; k];
        for &(c, _) in nearest.iter() {
            counts[c] += 1;
        }
        if counts.iter().all(|&c| c > 0) {
            return Ok(());
        }
        let mut labels: Vec<usize> = nearest.iter().map(|p| p.0).collect();
        let empties: Vec<usize> = (0..k).filter(|&c| counts[c] == 0).collect();
        for e in empties {
            let largest = (0..k)
                .max_by(|&a, &b| counts[a].cmp(&counts[b]).then(b.cmp(&a)))
                .expect("k > 0");
            if counts[largest] <= 1 {
                return Err(Error::DegenerateClustering { k });
            }
            let center = centers[largest * dim..(largest + 1) * dim].to_vec();
            let mut far: Option<(usize, f64)> = None;
            for &i in ps.canonical() {
                if labels[i] != largest {
                    continue;
                }
                let d = sq_dist_center(ps.row(i), &center);
                if far.is_none_or(|(_, fd)| d > fd) {
                    far = Some((i, d));
                }
            }
            let (p, _) = far.expect("largest cluster is non-empty");
            for (dst, &v) in centers[e * dim..(e + 1) * dim].iter_mut().zip(ps.row(p)) {
                *dst = v as f64;
            }
            labels[p] = e;
            counts[largest] -= 1;
            counts[e] += 1;
        }
        *nearest = ps.nearest(centers);
    }
    Err(Error::DegenerateClustering { k })
}

/// Greedy farthest-first k-center; the first center is a seeded uniform draw.
pub fn kcenter_greedy(
    corpus: &Corpus,
    k: usize,
    metric: DistanceMetric,
    seed: u64,
) -> Result<Clustering> {
    check_k(corpus, k)?;
    let ps = PointSet::new(corpus, metric);
    let mut rng = StreamRng::new(seed, Stream::KCenter);
    let first = ps.canonical()[rng.below(ps.len())];
    kcenter_from(corpus, &ps, k, metric, seed, first)
}

/// Greedy farthest-first k-center starting from a given instance.
pub fn kcenter_greedy_from(
    corpus: &Corpus,
    k: usize,
    metric: DistanceMetric,
    first_id: &str,
) -> Result<Clustering> {
    check_k(corpus, k)?;
    let first = corpus
        .position(first_id)
        .ok_or_else(|| Error::UnknownId(first_id.to_string()))?;
    let ps = PointSet::new(corpus, metric);
    kcenter_from(corpus, &ps, k, metric, DEFAULT_SEED, first)
}

fn kcenter_from(
    corpus: &Corpus,
    ps: &PointSet<'_>,
    k: usize,
    metric: DistanceMetric,
    seed: u64,
    first: usize,
) -> Result<Clustering> {
    let n = ps.len();
    let mut picks = Vec::with_capacity(k);
    let mut chosen = vec![false; n];
    picks.push(first);
    chosen[first] = true;
    let mut mind2: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|i| sq_dist(ps.row(i), ps.row(first)))
        .collect();
    while picks.len() < k {
        let mut best: Option<(usize, f64)> = None;
        for &i in ps.canonical() {
            if chosen[i] {
                continue;
            }
            if best.is_none_or(|(_, d)| mind2[i] > d) {
                best = Some((i, mind2[i]));
            }
        }
        let (next, _) = best.expect("k <= n leaves an unused point");
        picks.push(next);
        chosen[next] = true;
        let row = ps.row(next);
        mind2.par_iter_mut().enumerate().for_each(|(i, m)| {
            let d = sq_dist(ps.row(i), row);
            if d < *m {
                *m = d;
            }
        });
    }
    let centers: Vec<f64> = picks
        .iter()
        .flat_map(|&p| ps.row(p).iter().map(|&v| v as f64))
        .collect();
    let nearest = ps.nearest(&centers);
    let mut c = Clustering::build(corpus, k, metric, seed, centers, &nearest);
    c.center_points = Some(picks);
    Ok(c)
}
