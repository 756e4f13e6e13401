//! Seeded synthetic corpora for simulation and testing.

use rand_distr::{Distribution, Normal};

use crate::corpus::{Corpus, CorpusBuilder, EmbeddedInstance};
use crate::error::{Error, Result};
use crate::rng::{Stream, StreamRng};

/// Isotropic Gaussian mixture with centers drawn uniformly from
/// `[-center_scale, center_scale]^dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureSpec {
    pub n: usize,
    pub dim: usize,
    pub components: usize,
    pub center_scale: f64,
    pub sd: f64,
    /// Qualities are uniform on this range.
    pub quality: (f32, f32),
}

impl MixtureSpec {
    pub fn new(n: usize, dim: usize, components: usize) -> Self {
        Self {
            n,
            dim,
            components,
            center_scale: 10.0,
            sd: 0.5,
            quality: (0.0, 1.0),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Synthetic {
    pub corpus: Corpus,
    /// Generating component of each instance, in corpus order.
    pub labels: Vec<usize>,
    pub centers: Vec<Vec<f64>>,
}

fn quality_between(rng: &mut StreamRng, (lo, hi): (f32, f32)) -> f32 {
    (lo as f64 + (hi - lo) as f64 * rng.unit()).clamp(0.0, 1.0) as f32
}

/// Points are assigned to components round-robin so every component has
/// members even for small `n`.
pub fn gaussian_mixture(spec: &MixtureSpec, seed: u64) -> Result<Synthetic> {
    if spec.n == 0 || spec.dim == 0 || spec.components == 0 {
        return Err(Error::InvalidArgument("n, dim and components must be positive".into()));
    }
    if !(spec.sd >= 0.0 && spec.sd.is_finite()) {
        return Err(Error::InvalidArgument(format!("bad standard deviation {}", spec.sd)));
    }
    let mut crng = StreamRng::new(seed, Stream::Synthetic { index: 0 });
    let centers: Vec<Vec<f64>> = (0..spec.components)
        .map(|_| {
            (0..spec.dim)
                .map(|_| spec.center_scale * (2.0 * crng.unit() - 1.0))
                .collect()
        })
        .collect();
    let noise = Normal::new(0.0, spec.sd).expect("checked sd");
    let mut prng = StreamRng::new(seed, Stream::Synthetic { index: 1 });
    let mut qrng = StreamRng::new(seed, Stream::Synthetic { index: 2 });
    let mut builder = CorpusBuilder::new(spec.dim, spec.n)?;
    let mut labels = Vec::with_capacity(spec.n);
    for i in 0..spec.n {
        let g = i % spec.components;
        let embedding: Vec<f32> = centers[g]
            .iter()
            .map(|&c| (c + noise.sample(prng.as_rng())) as f32)
            .collect();
        let quality = quality_between(&mut qrng, spec.quality);
        builder.push(EmbeddedInstance::new(format!("s{i:07}"), embedding).with_quality(quality))?;
        labels.push(g);
    }
    Ok(Synthetic {
        corpus: builder.finish(),
        labels,
        centers,
    })
}

/// Uniform points in the unit square. The square is cut into a
/// `grid x grid` lattice and `patches` distinct cells, picked at random, form
/// a low-quality pocket with quality `pocket_quality` (so about
/// `patches / grid^2` of the points); everything else has quality uniform on
/// `[0.5, 1.0]`.
pub fn low_quality_pocket(n: usize, grid: usize, patches: usize, pocket_quality: f32, seed: u64) -> Result<Corpus> {
    if n == 0 || grid == 0 || patches > grid * grid {
        return Err(Error::InvalidArgument("need n > 0 and at most grid^2 patches".into()));
    }
    let mut crng = StreamRng::new(seed, Stream::Synthetic { index: 2 });
    let mut cells: Vec<usize> = (0..grid * grid).collect();
    for t in 0..patches {
        let pick = t + crng.below(cells.len() - t);
        cells.swap(t, pick);
    }
    let mut pocket = vec![false; grid * grid];
    cells[..patches].iter().for_each(|&c| pocket[c] = true);
    let mut prng = StreamRng::new(seed, Stream::Synthetic { index: 0 });
    let mut qrng = StreamRng::new(seed, Stream::Synthetic { index: 1 });
    let mut builder = CorpusBuilder::new(2, n)?;
    for i in 0..n {
        let x = prng.unit();
        let y = prng.unit();
        let cell = ((y * grid as f64) as usize).min(grid - 1) * grid + ((x * grid as f64) as usize).min(grid - 1);
        let q = if pocket[cell] {
            pocket_quality
        } else {
            quality_between(&mut qrng, (0.5, 1.0))
        };
        builder.push(EmbeddedInstance::new(format!("s{i:07}"), vec![x as f32, y as f32]).with_quality(q))?;
    }
    Ok(builder.finish())
}
