//! Distance metrics and the nearest-center kernels shared by clustering,
//! sampling and diagnostics.

use std::borrow::Cow;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::Corpus;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceMetric {
    /// Plain Euclidean distance on the stored vectors.
    Euclidean,
    /// Euclidean distance after L2-normalizing every vector. On unit vectors
    /// `d^2 = 2 - 2 cos`, so nearest-center order equals cosine order.
    #[default]
    EuclideanOnNormalized,
}

impl DistanceMetric {
    pub fn as_str(self) -> &'static str {
        match self {
            DistanceMetric::Euclidean => "euclidean",
            DistanceMetric::EuclideanOnNormalized => "euclidean_on_normalized",
        }
    }

    /// Distance between two raw (un-normalized) vectors under this metric.
    pub fn distance(self, a: &[f32], b: &[f32]) -> f64 {
        match self {
            DistanceMetric::Euclidean => sq_dist(a, b).sqrt(),
            DistanceMetric::EuclideanOnNormalized => {
                sq_dist(&normalized(a), &normalized(b)).sqrt()
            }
        }
    }
}

impl std::fmt::Display for DistanceMetric {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for DistanceMetric {
    type Err = crate::Error;

    fn from_str(s: &str) -> crate::Result<Self> {
        match s {
            "euclidean" => Ok(DistanceMetric::Euclidean),
            "euclidean_on_normalized" | "normalized" | "cosine" => {
                Ok(DistanceMetric::EuclideanOnNormalized)
            }
            other => Err(crate::Error::InvalidArgument(format!(
                "unknown metric `{other}`"
            ))),
        }
    }
}

/// L2-normalized copy; the zero vector is returned unchanged.
pub fn normalized(v: &[f32]) -> Vec<f32> {
    let norm = v.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt();
    if norm == 0.0 {
        return v.to_vec();
    }
    v.iter().map(|&x| ((x as f64) / norm) as f32).collect()
}

/// Squared Euclidean distance accumulated in `f64` with a fixed lane order.
#[inline]
pub fn sq_dist(a: &[f32], b: &[f32]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..4 {
            let d = x[l] as f64 - y[l] as f64;
            acc[l] += d * d;
        }
    }
    let mut tail = 0.0;
    for (x, y) in ra.iter().zip(rb) {
        let d = *x as f64 - *y as f64;
        tail += d * d;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Squared Euclidean distance between a stored point and an `f64` center.
#[inline]
pub fn sq_dist_center(a: &[f32], c: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), c.len());
    let mut acc = [0.0f64; 4];
    let ca = a.chunks_exact(4);
    let cc = c.chunks_exact(4);
    let (ra, rc) = (ca.remainder(), cc.remainder());
    for (x, y) in ca.zip(cc) {
        for l in 0..4 {
            let d = x[l] as f64 - y[l];
            acc[l] += d * d;
        }
    }
    let mut tail = 0.0;
    for (x, y) in ra.iter().zip(rc) {
        let d = *x as f64 - *y;
        tail += d * d;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Corpus vectors in the space a metric operates in, plus the canonical
/// (id-sorted) visiting order used wherever results could depend on order.
#[derive(Debug)]
pub struct PointSet<'a> {
    data: Cow<'a, [f32]>,
    n: usize,
    dim: usize,
    canonical: Vec<usize>,
}

impl<'a> PointSet<'a> {
    pub fn new(corpus: &'a Corpus, metric: DistanceMetric) -> Self {
        let dim = corpus.dimension();
        let n = corpus.len();
        let data = match metric {
            DistanceMetric::Euclidean => Cow::Borrowed(corpus.embeddings()),
            DistanceMetric::EuclideanOnNormalized => {
                let mut out = vec![0.0f32; n * dim];
                out.par_chunks_mut(dim.max(1))
                    .enumerate()
                    .for_each(|(i, row)| row.copy_from_slice(&normalized(corpus.embedding(i))));
                Cow::Owned(out)
            }
        };
        let mut canonical: Vec<usize> = (0..n).collect();
        canonical.sort_by(|&a, &b| corpus.id(a).cmp(corpus.id(b)));
        Self {
            data,
            n,
            dim,
            canonical,
        }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    /// Corpus positions sorted by id.
    pub fn canonical(&self) -> &[usize] {
        &self.canonical
    }

    /// Nearest center for every point, ties to the lowest center index.
    ///
    /// Returns `(center, squared distance)` per point in corpus order.
    /// `centers` is row-major `k x dim`.
    pub fn nearest(&self, centers: &[f64]) -> Vec<(usize, f64)> {
        let k = centers.len() / self.dim;
        assert!(k > 0 && centers.len() == k * self.dim);
        let work = self.n as f64 * k as f64 * self.dim as f64;
        if k >= 16 && work > 5e7 {
            self.nearest_filtered(centers, k)
        } else {
            (0..self.n)
                .into_par_iter()
                .map(|i| nearest_exact(self.row(i), centers, self.dim, 0..k))
                .collect()
        }
    }

    /// Fast path: an `f32` GEMM ranks centers approximately, then every
    /// center that a rounding-error bound cannot rule out is re-scored with
    /// the exact kernel. The result is identical to the exact scan.
    fn nearest_filtered(&self, centers: &[f64], k: usize) -> Vec<(usize, f64)> {
        const BLOCK: usize = 256;
        let dim = self.dim;
        let c32: Vec<f32> = centers.iter().map(|&v| v as f32).collect();
        let cn2: Vec<f64> = centers
            .chunks_exact(dim)
            .map(|c| c.iter().map(|v| v * v).sum())
            .collect();
        let cn: Vec<f64> = c32
            .chunks_exact(dim)
            .zip(&cn2)
            .map(|(c, &n2)| {
                let n32 = c.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>();
                n32.max(n2).sqrt()
            })
            .collect();
        // Error of an f32 dot product of length `dim` plus rounding of the
        // center to f32, with a margin for the f64 bookkeeping.
        let u = f32::EPSILON as f64 / 2.0;
        let gamma = dim as f64 * u / (1.0 - dim as f64 * u);
        let coef = 2.0 * (gamma + u) * 1.01;

        let mut out = vec![(0usize, 0.0f64); self.n];
        out.par_chunks_mut(BLOCK)
            .enumerate()
            .for_each(|(b, out_block)| {
                let start = b * BLOCK;
                let m = out_block.len();
                let rows = &self.data[start * dim..(start + m) * dim];
                let mut dots = vec![0.0f32; m * k];
                unsafe {
                    matrixmultiply::sgemm(
                        m,
                        dim,
                        k,
                        1.0,
                        rows.as_ptr(),
                        dim as isize,
                        1,
                        c32.as_ptr(),
                        1,
                        dim as isize,
                        0.0,
                        dots.as_mut_ptr(),
                        k as isize,
                        1,
                    );
                }
                let mut cands = Vec::with_capacity(8);
                let mut approx = vec![0.0f64; k];
                let mut err = vec![0.0f64; k];
                for (r, slot) in out_block.iter_mut().enumerate() {
                    let x = &rows[r * dim..(r + 1) * dim];
                    let pn2: f64 = x.iter().map(|&v| (v as f64) * (v as f64)).sum();
                    let pn = pn2.sqrt();
                    let drow = &dots[r * k..(r + 1) * k];
                    let mut best_upper = f64::INFINITY;
                    for j in 0..k {
                        let a = pn2 + cn2[j] - 2.0 * drow[j] as f64;
                        let e = coef * pn * cn[j] + 4.0 * f64::EPSILON * (pn2 + cn2[j]);
                        approx[j] = a;
                        err[j] = e;
                        best_upper = best_upper.min(a + e);
                    }
                    cands.clear();
                    cands.extend((0..k).filter(|&j| approx[j] - err[j] <= best_upper));
                    *slot = nearest_exact(x, centers, dim, cands.iter().copied());
                }
            });
        out
    }
}

#[inline]
fn nearest_exact(
    x: &[f32],
    centers: &[f64],
    dim: usize,
    candidates: impl Iterator<Item = usize>,
) -> (usize, f64) {
    let mut best = (usize::MAX, f64::INFINITY);
    for j in candidates {
        let d = sq_dist_center(x, &centers[j * dim..(j + 1) * dim]);
        if d < best.1 || best.0 == usize::MAX {
            best = (j, d);
        }
    }
    best
}
