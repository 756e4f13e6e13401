//! Diversity-first selection of instruction-tuning data from pre-computed
//! embeddings.
//!
//! The pipeline clusters a corpus with k-means, splits a budget across
//! clusters in proportion to their size, and draws within each cluster with
//! probability proportional to a per-instance quality score (kMQ). The
//! [`iterative`] engine repeats that draw over several rounds and reweights
//! clusters from scorer feedback on the model's generations.

pub mod clustering;
pub mod corpus;
pub mod diagnostics;
pub mod distance;
pub mod error;
pub mod iterative;
pub mod rng;
pub mod sampling;
pub mod scorer;
pub mod synth;

pub use clustering::{kcenter_greedy, kmeans, Clustering, KMeansParams};
pub use corpus::{Corpus, EmbeddedInstance, Selection, SelectionMethod};
pub use diagnostics::{silhouette, SilhouetteReport};
pub use distance::DistanceMetric;
pub use error::{Error, ErrorKind, Result};
pub use iterative::{run_iterative, ClusterWeights, IterativeConfig};
pub use sampling::{allocate_budget, BudgetPlan, SamplerConfig};
pub use scorer::{Scorer, ScorerSpec};
