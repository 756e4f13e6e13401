//! Diagnostics for choosing `k`: silhouette, elbow curve and the share of
//! low-quality clusters.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::clustering::{kmeans, Clustering, KMeansParams};
use crate::corpus::Corpus;
use crate::distance::{sq_dist, DistanceMetric, PointSet};
use crate::error::{Error, Result};
use crate::rng::{Stream, StreamRng};

/// Corpora above this size are scored on a subsample by default.
pub const SILHOUETTE_EXACT_LIMIT: usize = 20_000;
pub const SILHOUETTE_DEFAULT_SAMPLE: usize = 10_000;

/// Work (scored points x corpus size x dimension) above which pairwise
/// distances go through a matrix product instead of the direct kernel.
const GEMM_WORK: f64 = 2e8;
const ROW_BLOCK: usize = 128;
const COL_BLOCK: usize = 2048;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SilhouetteReport {
    pub k: usize,
    /// Mean of the scored points' values, in `[-1, 1]`.
    pub mean_score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_point: Option<BTreeMap<String, f64>>,
    pub sample_size: usize,
}

impl SilhouetteReport {
    /// The mean on the 0-100 display scale.
    pub fn display_score(&self) -> f64 {
        self.mean_score * 100.0
    }
}

/// Silhouette of `clustering` under `metric`.
///
/// `sample = None` scores every point unless the corpus has more than
/// [`SILHOUETTE_EXACT_LIMIT`] points, in which case a seeded uniform sample of
/// [`SILHOUETTE_DEFAULT_SAMPLE`] is scored. Sampled points are still compared
/// against full cluster memberships. Members of singleton clusters score 0,
/// as does a point whose `a` and `b` are both 0.
pub fn silhouette(
    corpus: &Corpus,
    clustering: &Clustering,
    metric: DistanceMetric,
    sample: Option<usize>,
    seed: u64,
) -> Result<SilhouetteReport> {
    clustering.check_corpus(corpus)?;
    let k = clustering.k();
    if k < 2 {
        return Err(Error::SilhouetteUndefined(format!("needs at least 2 clusters, got {k}")));
    }
    let sizes = clustering.sizes();
    if let Some(j) = sizes.iter().position(|&s| s == 0) {
        return Err(Error::SilhouetteUndefined(format!("cluster {j} is empty")));
    }
    let ps = PointSet::new(corpus, metric);
    let n = ps.len();
    let m = match sample {
        Some(0) => return Err(Error::InvalidArgument("silhouette sample must be positive".into())),
        Some(s) => s.min(n),
        None if n > SILHOUETTE_EXACT_LIMIT => SILHOUETTE_DEFAULT_SAMPLE,
        None => n,
    };
    let scored = sample_positions(ps.canonical(), m, seed);
    let labels = clustering.assignment();
    let work = scored.len() as f64 * n as f64 * ps.dim() as f64;
    let sums = distance_sums(&ps, &scored, labels, k, work >= GEMM_WORK);

    let values: Vec<f64> = scored
        .iter()
        .enumerate()
        .map(|(r, &i)| {
            let own = labels[i];
            if sizes[own] == 1 {
                return 0.0;
            }
            let row = &sums[r * k..(r + 1) * k];
            let a = row[own] / (sizes[own] - 1) as f64;
            let b = (0..k)
                .filter(|&j| j != own)
                .map(|j| row[j] / sizes[j] as f64)
                .fold(f64::INFINITY, f64::min);
            let denom = a.max(b);
            if denom == 0.0 {
                0.0
            } else {
                ((b - a) / denom).clamp(-1.0, 1.0)
            }
        })
        .collect();
    let mean_score = values.iter().sum::<f64>() / values.len() as f64;
    let per_point = scored
        .iter()
        .zip(&values)
        .map(|(&i, &v)| (corpus.id(i).to_string(), v))
        .collect();
    Ok(SilhouetteReport {
        k,
        mean_score,
        per_point: Some(per_point),
        sample_size: scored.len(),
    })
}

/// `m` positions drawn uniformly without replacement, returned in canonical
/// order. Drawing all of them skips the generator entirely.
fn sample_positions(canonical: &[usize], m: usize, seed: u64) -> Vec<usize> {
    let n = canonical.len();
    if m >= n {
        return canonical.to_vec();
    }
    let mut rng = StreamRng::new(seed, Stream::Silhouette);
    let mut slots: Vec<usize> = (0..n).collect();
    for t in 0..m {
        let pick = t + rng.below(n - t);
        slots.swap(t, pick);
    }
    let mut chosen = slots[..m].to_vec();
    chosen.sort_unstable();
    chosen.into_iter().map(|s| canonical[s]).collect()
}

/// Row `r` holds, for scored point `scored[r]`, the summed distance to the
/// members of every cluster. Columns are accumulated in canonical order.
fn distance_sums(ps: &PointSet<'_>, scored: &[usize], labels: &[usize], k: usize, gemm: bool) -> Vec<f64> {
    let n = ps.len();
    let mut sums = vec![0.0f64; scored.len() * k];
    if !gemm {
        sums.par_chunks_mut(k).zip(scored.par_iter()).for_each(|(row, &i)| {
            let x = ps.row(i);
            for &j in ps.canonical() {
                row[labels[j]] += sq_dist(x, ps.row(j)).sqrt();
            }
        });
        return sums;
    }
    let dim = ps.dim();
    let canonical = ps.canonical();
    let norms: Vec<f64> = (0..n)
        .map(|i| ps.row(i).iter().map(|&v| v as f64 * v as f64).sum())
        .collect();
    sums.par_chunks_mut(ROW_BLOCK * k)
        .zip(scored.par_chunks(ROW_BLOCK))
        .for_each(|(block_sums, rows)| {
            let r = rows.len();
            let a: Vec<f64> = rows
                .iter()
                .flat_map(|&i| ps.row(i).iter().map(|&v| v as f64))
                .collect();
            let mut bt = vec![0.0f64; COL_BLOCK * dim];
            let mut dots = vec![0.0f64; r * COL_BLOCK];
            for cols in canonical.chunks(COL_BLOCK) {
                let c = cols.len();
                for (t, &j) in cols.iter().enumerate() {
                    for (dst, &v) in bt[t * dim..(t + 1) * dim].iter_mut().zip(ps.row(j)) {
                        *dst = v as f64;
                    }
                }
                // dots[r x c] = a[r x dim] * bt[c x dim]^T
                unsafe {
                    matrixmultiply::dgemm(
                        r,
                        dim,
                        c,
                        1.0,
                        a.as_ptr(),
                        dim as isize,
                        1,
                        bt.as_ptr(),
                        1,
                        dim as isize,
                        0.0,
                        dots.as_mut_ptr(),
                        c as isize,
                        1,
                    );
                }
                for (ri, &i) in rows.iter().enumerate() {
                    let out = &mut block_sums[ri * k..(ri + 1) * k];
                    let ni = norms[i];
                    for (t, &j) in cols.iter().enumerate() {
                        let d2 = ni + norms[j] - 2.0 * dots[ri * c + t];
                        out[labels[j]] += if i == j { 0.0 } else { d2.max(0.0).sqrt() };
                    }
                }
            }
        });
    sums
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElbowCurve {
    /// `(k, kmeans objective)` with `k` strictly increasing.
    pub points: Vec<(usize, f64)>,
}

impl ElbowCurve {
    /// The `k` with the largest discrete second difference of the
    /// objective (lowest `k` on ties). Needs at least three points.
    pub fn knee(&self) -> Option<usize> {
        if self.points.len() < 3 {
            return None;
        }
        let o: Vec<f64> = self.points.iter().map(|p| p.1).collect();
        let mut best: Option<(usize, f64)> = None;
        for i in 1..o.len() - 1 {
            let second = (o[i - 1] - o[i]) - (o[i] - o[i + 1]);
            if best.is_none_or(|(_, v)| second > v) {
                best = Some((self.points[i].0, second));
            }
        }
        best.map(|b| b.0)
    }

    /// True when no objective exceeds its predecessor by more than
    /// `rel_slack` relative.
    pub fn is_non_increasing(&self, rel_slack: f64) -> bool {
        self.points
            .windows(2)
            .all(|w| w[1].1 <= w[0].1 * (1.0 + rel_slack) + f64::MIN_POSITIVE)
    }
}

fn check_ks(ks: &[usize], n: usize) -> Result<()> {
    if ks.is_empty() {
        return Err(Error::InvalidArgument("no k values given".into()));
    }
    if ks.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidArgument("k values must be strictly increasing".into()));
    }
    if let Some(&k) = ks.iter().find(|&&k| k == 0 || k > n) {
        return Err(Error::InvalidK { k, n });
    }
    Ok(())
}

/// One k-means run per `k`, all with the same seed.
pub fn elbow_curve(corpus: &Corpus, ks: &[usize], metric: DistanceMetric, seed: u64) -> Result<ElbowCurve> {
    check_ks(ks, corpus.len())?;
    let points = ks
        .iter()
        .map(|&k| {
            let c = kmeans(corpus, &KMeansParams::new(k).with_metric(metric).with_seed(seed))?;
            Ok((k, c.kmeans_objective()))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ElbowCurve { points })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QualityProfile {
    pub threshold: f64,
    /// Mean quality of every non-empty cluster.
    pub per_cluster_mean_quality: BTreeMap<usize, f64>,
    /// Share of the `k` clusters whose mean is below the threshold.
    pub fraction_below: f64,
}

pub fn quality_profile(corpus: &Corpus, clustering: &Clustering, threshold: f64) -> Result<QualityProfile> {
    clustering.check_corpus(corpus)?;
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::InvalidArgument(format!("threshold {threshold} is outside [0, 1]")));
    }
    corpus.require_quality(0..corpus.len())?;
    let mut per_cluster = BTreeMap::new();
    let mut below = 0usize;
    for j in 0..clustering.k() {
        let mut members: Vec<usize> = clustering.members(j).to_vec();
        if members.is_empty() {
            continue;
        }
        members.sort_by(|&a, &b| corpus.id(a).cmp(corpus.id(b)));
        let sum: f64 = members
            .iter()
            .map(|&i| corpus.quality(i).expect("checked") as f64)
            .sum();
        let mean = sum / members.len() as f64;
        if mean < threshold {
            below += 1;
        }
        per_cluster.insert(j, mean);
    }
    Ok(QualityProfile {
        threshold,
        per_cluster_mean_quality: per_cluster,
        fraction_below: below as f64 / clustering.k() as f64,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnoseEntry {
    pub k: usize,
    pub kmeans_objective: f64,
    pub silhouette: f64,
    pub silhouette_sample_size: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fraction_below: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnoseReport {
    pub metric: DistanceMetric,
    pub seed: u64,
    pub entries: Vec<DiagnoseEntry>,
    /// Elbow knee; reported only, never applied.
    pub elbow_knee: Option<usize>,
    /// `k` with the highest silhouette (lowest `k` on ties).
    pub recommended_k: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiagnoseOptions {
    pub metric: DistanceMetric,
    pub seed: u64,
    pub silhouette_sample: Option<usize>,
    /// Adds a quality profile per `k` when set and the corpus has quality.
    pub threshold: Option<f64>,
    pub restarts: usize,
}

/// Sweeps `ks`: k-means, silhouette and optional quality profile per `k`.
pub fn diagnose(corpus: &Corpus, ks: &[usize], opts: &DiagnoseOptions) -> Result<DiagnoseReport> {
    check_ks(ks, corpus.len())?;
    if ks[0] < 2 {
        return Err(Error::SilhouetteUndefined(format!("needs at least 2 clusters, got {}", ks[0])));
    }
    let mut entries = Vec::with_capacity(ks.len());
    for &k in ks {
        let params = KMeansParams::new(k)
            .with_metric(opts.metric)
            .with_seed(opts.seed)
            .with_restarts(opts.restarts);
        let clustering = kmeans(corpus, &params)?;
        let sil = silhouette(corpus, &clustering, opts.metric, opts.silhouette_sample, opts.seed)?;
        let fraction_below = match opts.threshold {
            Some(t) if corpus.has_quality() => Some(quality_profile(corpus, &clustering, t)?.fraction_below),
            _ => None,
        };
        tracing::info!(k, silhouette = sil.mean_score, "diagnosed");
        entries.push(DiagnoseEntry {
            k,
            kmeans_objective: clustering.kmeans_objective(),
            silhouette: sil.mean_score,
            silhouette_sample_size: sil.sample_size,
            fraction_below,
        });
    }
    let curve = ElbowCurve {
        points: entries.iter().map(|e| (e.k, e.kmeans_objective)).collect(),
    };
    let recommended_k = entries
        .iter()
        .fold(None::<&DiagnoseEntry>, |best, e| match best {
            Some(b) if b.silhouette >= e.silhouette => Some(b),
            _ => Some(e),
        })
        .expect("ks is non-empty")
        .k;
    Ok(DiagnoseReport {
        metric: opts.metric,
        seed: opts.seed,
        entries,
        elbow_knee: curve.knee(),
        recommended_k,
    })
}

/// Writes `k,objective,silhouette` rows.
pub fn write_diagnose_csv(report: &DiagnoseReport, path: &Path) -> Result<()> {
    let mut out = String::from("k,objective,silhouette\n");
    for e in &report.entries {
        out.push_str(&format!("{},{},{}\n", e.k, e.kmeans_objective, e.silhouette));
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}
