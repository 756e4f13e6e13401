//! Scorer adapters: the boundary between the selection engine and whatever
//! fine-tunes the model and scores its generations.
//!
//! The engine hands a scorer one [`GenerationRequest`] per instance and gets
//! back one [`ScoredGeneration`] per request. Wire formats (JSONL):
//!
//! ```text
//! request:  {"id": ..., "prompt": ..., "gold": ...}
//! response: {"id": ..., "gen_score": ..., "gold_score": ...}
//! ```
//!
//! A command scorer is run as `<program> <args...> <request-path>
//! <response-path>`; a non-zero exit status is a scorer failure.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::clustering::Clustering;
use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::iterative::{perplexity_delta, score_delta};
use crate::rng::{Stream, StreamRng};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationRequest {
    pub id: String,
    pub prompt: Option<String>,
    pub gold: Option<String>,
}

impl GenerationRequest {
    /// Builds a request from an instance's text payload.
    ///
    /// A payload that is a JSON object with a `prompt` field and one of
    /// `gold`, `completion`, `output` or `response` is split into prompt and
    /// gold completion; any other payload is passed through as the prompt.
    pub fn from_instance(corpus: &Corpus, position: usize) -> Self {
        let id = corpus.id(position).to_string();
        let Some(text) = corpus.text(position) else {
            return Self {
                id,
                prompt: None,
                gold: None,
            };
        };
        if let Ok(serde_json::Value::Object(obj)) = serde_json::from_str::<serde_json::Value>(text) {
            if let Some(prompt) = obj.get("prompt").and_then(|v| v.as_str()) {
                let gold = ["gold", "completion", "output", "response"]
                    .iter()
                    .find_map(|k| obj.get(*k).and_then(|v| v.as_str()));
                return Self {
                    id,
                    prompt: Some(prompt.to_string()),
                    gold: gold.map(str::to_string),
                };
            }
        }
        Self {
            id,
            prompt: Some(text.to_string()),
            gold: None,
        }
    }
}

/// One scored instance; `delta = gold_score - gen_score`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredGeneration {
    pub id: String,
    pub gen_score: f64,
    pub gold_score: f64,
    pub delta: f64,
}

impl ScoredGeneration {
    pub fn new(id: impl Into<String>, gen_score: f64, gold_score: f64) -> Self {
        Self {
            id: id.into(),
            gen_score,
            gold_score,
            delta: score_delta(gen_score, gold_score),
        }
    }
}

#[derive(Debug, Clone, Deserialize, Serialize)]
struct ScoreResponse {
    id: String,
    gen_score: f64,
    gold_score: f64,
}

/// How raw response values become scores.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreTransform {
    /// Values are scores; delta = gold - gen.
    #[default]
    Raw,
    /// Values are perplexities; scores become `ln PPL`, so the delta is
    /// `-ln(PPL_gen / PPL_gold)`.
    Perplexity,
}

impl ScoreTransform {
    fn apply(self, r: ScoreResponse) -> Result<ScoredGeneration> {
        if !r.gen_score.is_finite() || !r.gold_score.is_finite() {
            return Err(Error::Scorer(format!("non-finite score for `{}`", r.id)));
        }
        match self {
            ScoreTransform::Raw => Ok(ScoredGeneration::new(r.id, r.gen_score, r.gold_score)),
            ScoreTransform::Perplexity => {
                if r.gen_score <= 0.0 || r.gold_score <= 0.0 {
                    return Err(Error::Scorer(format!(
                        "perplexity must be positive for `{}`",
                        r.id
                    )));
                }
                let mut s = ScoredGeneration::new(r.id, r.gen_score.ln(), r.gold_score.ln());
                s.delta = perplexity_delta(r.gen_score, r.gold_score);
                Ok(s)
            }
        }
    }
}

pub trait Scorer {
    /// Scores every request of iteration `iteration`. `workdir` is where
    /// exchange files may be written.
    fn score(
        &mut self,
        iteration: usize,
        requests: &[GenerationRequest],
        workdir: &Path,
    ) -> Result<Vec<ScoredGeneration>>;
}

/// Checks a response covers each request exactly once.
pub(crate) fn check_coverage(
    requests: &[GenerationRequest],
    scored: &[ScoredGeneration],
) -> Result<()> {
    let wanted: HashSet<&str> = requests.iter().map(|r| r.id.as_str()).collect();
    let mut seen = HashSet::with_capacity(scored.len());
    for s in scored {
        if !wanted.contains(s.id.as_str()) {
            return Err(Error::Scorer(format!("score for unrequested id `{}`", s.id)));
        }
        if !seen.insert(s.id.as_str()) {
            return Err(Error::Scorer(format!("duplicate score for `{}`", s.id)));
        }
    }
    if seen.len() != wanted.len() {
        let missing = requests
            .iter()
            .find(|r| !seen.contains(r.id.as_str()))
            .map(|r| r.id.clone())
            .unwrap_or_default();
        return Err(Error::Scorer(format!(
            "{} request(s) unanswered, e.g. `{missing}`",
            wanted.len() - seen.len()
        )));
    }
    Ok(())
}

pub fn write_requests(path: &Path, requests: &[GenerationRequest]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in requests {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn read_responses(path: &Path, transform: ScoreTransform) -> Result<Vec<ScoredGeneration>> {
    let file = File::open(path).map_err(|e| Error::Scorer(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::Scorer(format!("{}: {e}", path.display())))?;
        if line.trim().is_empty() {
            continue;
        }
        let r: ScoreResponse = serde_json::from_str(&line).map_err(|e| {
            Error::Scorer(format!("{}:{}: {e}", path.display(), lineno + 1))
        })?;
        out.push(transform.apply(r)?);
    }
    Ok(out)
}

/// Serves scores from a pre-computed response file covering every id that
/// may be requested.
#[derive(Debug)]
pub struct FileScorer {
    path: PathBuf,
    transform: ScoreTransform,
    table: Option<HashMap<String, ScoredGeneration>>,
}

impl FileScorer {
    pub fn new(path: impl Into<PathBuf>, transform: ScoreTransform) -> Self {
        Self {
            path: path.into(),
            transform,
            table: None,
        }
    }
}

impl Scorer for FileScorer {
    fn score(
        &mut self,
        _iteration: usize,
        requests: &[GenerationRequest],
        _workdir: &Path,
    ) -> Result<Vec<ScoredGeneration>> {
        if self.table.is_none() {
            let rows = read_responses(&self.path, self.transform)?;
            self.table = Some(rows.into_iter().map(|s| (s.id.clone(), s)).collect());
        }
        let table = self.table.as_ref().expect("loaded above");
        requests
            .iter()
            .map(|r| {
                table
                    .get(&r.id)
                    .cloned()
                    .ok_or_else(|| Error::Scorer(format!("no score for `{}` in {}", r.id, self.path.display())))
            })
            .collect()
    }
}

/// Runs an external program per iteration.
#[derive(Debug, Clone)]
pub struct CommandScorer {
    pub program: PathBuf,
    pub args: Vec<String>,
    pub timeout: Option<Duration>,
    pub transform: ScoreTransform,
}

impl Scorer for CommandScorer {
    fn score(
        &mut self,
        iteration: usize,
        requests: &[GenerationRequest],
        workdir: &Path,
    ) -> Result<Vec<ScoredGeneration>> {
        std::fs::create_dir_all(workdir).map_err(|e| Error::io(workdir, e))?;
        let req = workdir.join(format!("requests_{iteration}.jsonl"));
        let resp = workdir.join(format!("responses_{iteration}.jsonl"));
        write_requests(&req, requests)?;
        let _ = std::fs::remove_file(&resp);
        let mut child = Command::new(&self.program)
            .args(&self.args)
            .arg(&req)
            .arg(&resp)
            .spawn()
            .map_err(|e| Error::Scorer(format!("spawning {}: {e}", self.program.display())))?;
        let started = Instant::now();
        let status = loop {
            match child.try_wait() {
                Ok(Some(status)) => break status,
                Ok(None) => {}
                Err(e) => return Err(Error::Scorer(format!("waiting for scorer: {e}"))),
            }
            if let Some(limit) = self.timeout {
                if started.elapsed() > limit {
                    let _ = child.kill();
                    let _ = child.wait();
                    return Err(Error::Scorer(format!(
                        "scorer timed out after {:.1}s",
                        limit.as_secs_f64()
                    )));
                }
            }
            std::thread::sleep(Duration::from_millis(20));
        };
        if !status.success() {
            return Err(Error::Scorer(format!("scorer exited with {status}")));
        }
        read_responses(&resp, self.transform)
    }
}

/// Deterministic synthetic scorer: every instance of group `g` gets delta
/// `deltas[g]` plus optional Gaussian noise keyed on `(seed, id)`.
#[derive(Debug, Clone)]
pub struct MockScorer {
    groups: HashMap<String, usize>,
    deltas: Vec<f64>,
    noise: f64,
    seed: u64,
}

impl MockScorer {
    pub fn new(groups: HashMap<String, usize>, deltas: Vec<f64>, noise: f64, seed: u64) -> Result<Self> {
        if let Some((id, &g)) = groups.iter().find(|(_, &g)| g >= deltas.len()) {
            return Err(Error::InvalidArgument(format!(
                "`{id}` is in group {g} but only {} deltas are configured",
                deltas.len()
            )));
        }
        Ok(Self {
            groups,
            deltas,
            noise,
            seed,
        })
    }

    /// Groups instances by their cluster.
    pub fn by_cluster(clustering: &Clustering, deltas: Vec<f64>, noise: f64, seed: u64) -> Result<Self> {
        if deltas.len() != clustering.k() {
            return Err(Error::InvalidArgument(format!(
                "{} deltas for {} clusters",
                deltas.len(),
                clustering.k()
            )));
        }
        let groups = clustering
            .ids()
            .iter()
            .cloned()
            .zip(clustering.assignment().iter().copied())
            .collect();
        Self::new(groups, deltas, noise, seed)
    }

    fn noise_for(&self, id: &str) -> f64 {
        if self.noise == 0.0 {
            return 0.0;
        }
        let mut rng = StreamRng::new(self.seed ^ fnv1a(id.as_bytes()), Stream::MockScorer);
        let z: f64 = StandardNormal.sample(rng.as_rng());
        self.noise * z
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

impl Scorer for MockScorer {
    fn score(
        &mut self,
        _iteration: usize,
        requests: &[GenerationRequest],
        _workdir: &Path,
    ) -> Result<Vec<ScoredGeneration>> {
        requests
            .iter()
            .map(|r| {
                let g = *self
                    .groups
                    .get(&r.id)
                    .ok_or_else(|| Error::Scorer(format!("mock scorer has no group for `{}`", r.id)))?;
                Ok(ScoredGeneration::new(
                    r.id.clone(),
                    0.0,
                    self.deltas[g] + self.noise_for(&r.id),
                ))
            })
            .collect()
    }
}

/// Serializable description of a scorer, kept in run state so a run can be
/// resumed with the same scorer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScorerSpec {
    File {
        path: PathBuf,
        #[serde(default)]
        transform: ScoreTransform,
    },
    Command {
        program: PathBuf,
        #[serde(default)]
        args: Vec<String>,
        #[serde(default)]
        timeout_secs: Option<f64>,
        #[serde(default)]
        transform: ScoreTransform,
    },
    /// Per-cluster deltas over the run's clustering.
    Mock {
        deltas: Vec<f64>,
        #[serde(default)]
        noise: f64,
        #[serde(default)]
        seed: u64,
    },
}

impl ScorerSpec {
    pub fn build(&self, clustering: &Clustering) -> Result<Box<dyn Scorer>> {
        Ok(match self {
            ScorerSpec::File { path, transform } => Box::new(FileScorer::new(path.clone(), *transform)),
            ScorerSpec::Command {
                program,
                args,
                timeout_secs,
                transform,
            } => Box::new(CommandScorer {
                program: program.clone(),
                args: args.clone(),
                timeout: timeout_secs.map(Duration::from_secs_f64),
                transform: *transform,
            }),
            ScorerSpec::Mock { deltas, noise, seed } => {
                Box::new(MockScorer::by_cluster(clustering, deltas.clone(), *noise, *seed)?)
            }
        })
    }
}
