//! Embedded corpora, their on-disk formats, and selection manifests.
//!
//! Two corpus formats are supported:
//!
//! * JSONL: one `{"id", "embedding", "quality", "text"}` object per line.
//! * Binary: magic `KMQ1`, `u32` dimension, `u64` count, then for every record
//!   a `u16` id length, the id bytes, `dimension` little-endian `f32`s and one
//!   `f32` quality where NaN means absent. Text payloads are not representable
//!   in this format.
//!
//! Embeddings and qualities are held as `f32` so that both formats round-trip
//! bit-exactly.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const BINARY_MAGIC: &[u8; 4] = b"KMQ1";

/// One corpus item.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddedInstance {
    pub id: String,
    pub embedding: Vec<f32>,
    #[serde(default)]
    pub quality: Option<f32>,
    #[serde(default)]
    pub text: Option<String>,
}

impl EmbeddedInstance {
    pub fn new(id: impl Into<String>, embedding: Vec<f32>) -> Self {
        Self {
            id: id.into(),
            embedding,
            quality: None,
            text: None,
        }
    }

    pub fn with_quality(mut self, quality: f32) -> Self {
        self.quality = Some(quality);
        self
    }

    pub fn with_text(mut self, text: impl Into<String>) -> Self {
        self.text = Some(text.into());
        self
    }
}

/// Borrowed view of one instance inside a [`Corpus`].
#[derive(Debug, Clone, Copy)]
pub struct InstanceRef<'a> {
    pub id: &'a str,
    pub embedding: &'a [f32],
    pub quality: Option<f32>,
    pub text: Option<&'a str>,
}

/// An immutable, validated collection of embedded instances.
///
/// Embeddings are stored row-major in one contiguous buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    dimension: usize,
    ids: Vec<String>,
    embeddings: Vec<f32>,
    quality: Vec<Option<f32>>,
    text: Vec<Option<String>>,
    metadata: BTreeMap<String, String>,
    index: HashMap<String, usize>,
}

fn check_quality(id: &str, q: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&q) {
        return Err(Error::QualityOutOfRange {
            id: id.to_string(),
            value: q,
        });
    }
    Ok(())
}

impl Corpus {
    /// Builds a corpus, checking every instance invariant.
    pub fn new(dimension: usize, instances: Vec<EmbeddedInstance>) -> Result<Self> {
        let mut builder = CorpusBuilder::new(dimension, instances.len())?;
        for inst in instances {
            builder.push(inst)?;
        }
        Ok(builder.finish())
    }

    /// Builds a corpus whose dimension is taken from the first instance.
    pub fn from_instances(instances: Vec<EmbeddedInstance>) -> Result<Self> {
        let dimension = instances
            .first()
            .map(|i| i.embedding.len())
            .ok_or(Error::EmptyCorpus)?;
        Self::new(dimension, instances)
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn id(&self, i: usize) -> &str {
        &self.ids[i]
    }

    pub fn embedding(&self, i: usize) -> &[f32] {
        &self.embeddings[i * self.dimension..(i + 1) * self.dimension]
    }

    /// Row-major `len() x dimension()` buffer.
    pub fn embeddings(&self) -> &[f32] {
        &self.embeddings
    }

    pub fn quality(&self, i: usize) -> Option<f32> {
        self.quality[i]
    }

    pub fn text(&self, i: usize) -> Option<&str> {
        self.text[i].as_deref()
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn contains(&self, id: &str) -> bool {
        self.index.contains_key(id)
    }

    pub fn instance(&self, i: usize) -> InstanceRef<'_> {
        InstanceRef {
            id: &self.ids[i],
            embedding: self.embedding(i),
            quality: self.quality[i],
            text: self.text[i].as_deref(),
        }
    }

    pub fn instances(&self) -> impl ExactSizeIterator<Item = InstanceRef<'_>> + '_ {
        (0..self.len()).map(move |i| self.instance(i))
    }

    pub fn to_instances(&self) -> Vec<EmbeddedInstance> {
        self.instances()
            .map(|r| EmbeddedInstance {
                id: r.id.to_string(),
                embedding: r.embedding.to_vec(),
                quality: r.quality,
                text: r.text.map(str::to_string),
            })
            .collect()
    }

    pub fn metadata(&self) -> &BTreeMap<String, String> {
        &self.metadata
    }

    pub fn metadata_mut(&mut self) -> &mut BTreeMap<String, String> {
        &mut self.metadata
    }

    pub fn has_quality(&self) -> bool {
        self.quality.iter().all(Option::is_some)
    }

    /// Fails with the offending ids unless every instance in `positions`
    /// carries a quality.
    pub fn require_quality<I: IntoIterator<Item = usize>>(&self, positions: I) -> Result<()> {
        let missing: Vec<usize> = positions
            .into_iter()
            .filter(|&i| self.quality[i].is_none())
            .collect();
        if missing.is_empty() {
            return Ok(());
        }
        Err(Error::MissingQuality {
            count: missing.len(),
            examples: missing.iter().take(5).map(|&i| self.ids[i].clone()).collect(),
        })
    }

    pub fn ensure_non_empty(&self) -> Result<()> {
        if self.is_empty() {
            Err(Error::EmptyCorpus)
        } else {
            Ok(())
        }
    }

    /// SHA-256 over a canonical encoding of ids, embeddings, qualities and
    /// text, as lowercase hex. Metadata is not hashed.
    pub fn content_hash(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(BINARY_MAGIC);
        hasher.update((self.dimension as u32).to_le_bytes());
        hasher.update((self.len() as u64).to_le_bytes());
        for i in 0..self.len() {
            let id = self.ids[i].as_bytes();
            hasher.update((id.len() as u64).to_le_bytes());
            hasher.update(id);
            for v in self.embedding(i) {
                hasher.update(v.to_le_bytes());
            }
            hasher.update(self.quality[i].unwrap_or(f32::NAN).to_bits().to_le_bytes());
            match &self.text[i] {
                Some(t) => {
                    hasher.update([1u8]);
                    hasher.update((t.len() as u64).to_le_bytes());
                    hasher.update(t.as_bytes());
                }
                None => hasher.update([0u8]),
            }
        }
        hex::encode(hasher.finalize())
    }
}

/// Incremental, validating corpus construction.
#[derive(Debug)]
pub struct CorpusBuilder {
    corpus: Corpus,
}

impl CorpusBuilder {
    pub fn new(dimension: usize, capacity: usize) -> Result<Self> {
        if dimension == 0 {
            return Err(Error::InvalidArgument(
                "corpus dimension must be positive".into(),
            ));
        }
        Ok(Self {
            corpus: Corpus {
                dimension,
                ids: Vec::with_capacity(capacity),
                embeddings: Vec::with_capacity(capacity.saturating_mul(dimension)),
                quality: Vec::with_capacity(capacity),
                text: Vec::with_capacity(capacity),
                metadata: BTreeMap::new(),
                index: HashMap::with_capacity(capacity),
            },
        })
    }

    pub fn push(&mut self, inst: EmbeddedInstance) -> Result<()> {
        let c = &mut self.corpus;
        if inst.embedding.len() != c.dimension {
            return Err(Error::DimensionMismatch {
                id: inst.id,
                expected: c.dimension,
                found: inst.embedding.len(),
            });
        }
        if let Some(position) = inst.embedding.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteEmbedding {
                id: inst.id,
                position,
            });
        }
        if let Some(q) = inst.quality {
            check_quality(&inst.id, q as f64)?;
        }
        if c.index.contains_key(&inst.id) {
            return Err(Error::DuplicateId(inst.id));
        }
        c.index.insert(inst.id.clone(), c.ids.len());
        c.ids.push(inst.id);
        c.embeddings.extend_from_slice(&inst.embedding);
        c.quality.push(inst.quality);
        c.text.push(inst.text);
        Ok(())
    }

    pub fn finish(self) -> Corpus {
        self.corpus
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorpusFormat {
    Jsonl,
    Binary,
}

impl CorpusFormat {
    /// Guesses the format from a file extension (`.bin`/`.kmq` are binary).
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("bin") | Some("kmq") => CorpusFormat::Binary,
            _ => CorpusFormat::Jsonl,
        }
    }
}

impl std::str::FromStr for CorpusFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "jsonl" => Ok(CorpusFormat::Jsonl),
            "binary" | "bin" => Ok(CorpusFormat::Binary),
            other => Err(Error::InvalidArgument(format!(
                "unknown corpus format `{other}`"
            ))),
        }
    }
}

pub fn load_corpus(path: impl AsRef<Path>, format: CorpusFormat) -> Result<Corpus> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::with_capacity(1 << 20, file);
    match format {
        CorpusFormat::Jsonl => read_jsonl(reader, path),
        CorpusFormat::Binary => read_binary(reader, path),
    }
}

pub fn save_corpus(corpus: &Corpus, path: impl AsRef<Path>, format: CorpusFormat) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::with_capacity(1 << 20, file);
    match format {
        CorpusFormat::Jsonl => write_jsonl(corpus, &mut w),
        CorpusFormat::Binary => write_binary(corpus, &mut w),
    }
    .map_err(|e| match e {
        Error::Io { source, .. } => Error::io(path, source),
        other => other,
    })?;
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Serialize)]
struct JsonRecordOut<'a> {
    id: &'a str,
    embedding: &'a [f32],
    quality: Option<f32>,
    text: Option<&'a str>,
}

pub fn read_jsonl<R: BufRead>(reader: R, path: &Path) -> Result<Corpus> {
    let mut builder: Option<CorpusBuilder> = None;
    for (lineno, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let inst: EmbeddedInstance =
            serde_json::from_str(&line).map_err(|e| Error::MalformedRecord {
                path: path.to_path_buf(),
                line: lineno + 1,
                message: e.to_string(),
            })?;
        let b = match &mut builder {
            Some(b) => b,
            None => {
                if inst.embedding.is_empty() {
                    return Err(Error::MalformedRecord {
                        path: path.to_path_buf(),
                        line: lineno + 1,
                        message: "empty embedding".into(),
                    });
                }
                builder.insert(CorpusBuilder::new(inst.embedding.len(), 1024)?)
            }
        };
        b.push(inst)?;
    }
    builder.map(CorpusBuilder::finish).ok_or(Error::EmptyCorpus)
}

pub fn write_jsonl<W: Write>(corpus: &Corpus, w: &mut W) -> Result<()> {
    for inst in corpus.instances() {
        let rec = JsonRecordOut {
            id: inst.id,
            embedding: inst.embedding,
            quality: inst.quality,
            text: inst.text,
        };
        serde_json::to_writer(&mut *w, &rec)?;
        w.write_all(b"\n").map_err(|e| Error::io("<jsonl>", e))?;
    }
    Ok(())
}

struct OffsetReader<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> OffsetReader<R> {
    fn take<const N: usize>(&mut self, path: &Path, what: &str) -> Result<[u8; N]> {
        let mut buf = [0u8; N];
        self.fill(&mut buf, path, what)?;
        Ok(buf)
    }

    fn fill(&mut self, buf: &mut [u8], path: &Path, what: &str) -> Result<()> {
        self.inner.read_exact(buf).map_err(|e| Error::MalformedBinary {
            path: path.to_path_buf(),
            offset: self.offset,
            message: format!("reading {what}: {e}"),
        })?;
        self.offset += buf.len() as u64;
        Ok(())
    }
}

pub fn read_binary<R: Read>(reader: R, path: &Path) -> Result<Corpus> {
    let mut r = OffsetReader {
        inner: reader,
        offset: 0,
    };
    let magic: [u8; 4] = r.take(path, "magic")?;
    if &magic != BINARY_MAGIC {
        return Err(Error::MalformedBinary {
            path: path.to_path_buf(),
            offset: 0,
            message: format!("bad magic {magic:?}"),
        });
    }
    let dimension = u32::from_le_bytes(r.take(path, "dimension")?) as usize;
    let count = u64::from_le_bytes(r.take(path, "count")?);
    if dimension == 0 {
        return Err(Error::MalformedBinary {
            path: path.to_path_buf(),
            offset: 4,
            message: "dimension is zero".into(),
        });
    }
    let capacity = usize::try_from(count).unwrap_or(usize::MAX).min(1 << 24);
    let mut builder = CorpusBuilder::new(dimension, capacity)?;
    let mut vec_bytes = vec![0u8; dimension * 4];
    for _ in 0..count {
        let record_offset = r.offset;
        let id_len = u16::from_le_bytes(r.take(path, "id length")?) as usize;
        let mut id_bytes = vec![0u8; id_len];
        r.fill(&mut id_bytes, path, "id")?;
        let id = String::from_utf8(id_bytes).map_err(|_| Error::MalformedBinary {
            path: path.to_path_buf(),
            offset: record_offset,
            message: "id is not valid UTF-8".into(),
        })?;
        r.fill(&mut vec_bytes, path, "embedding")?;
        let embedding: Vec<f32> = vec_bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let q = f32::from_le_bytes(r.take(path, "quality")?);
        let quality = if q.is_nan() { None } else { Some(q) };
        builder.push(EmbeddedInstance {
            id,
            embedding,
            quality,
            text: None,
        })?;
    }
    let mut probe = [0u8; 1];
    match r.inner.read(&mut probe) {
        Ok(0) => {}
        Ok(_) => {
            return Err(Error::MalformedBinary {
                path: path.to_path_buf(),
                offset: r.offset,
                message: "trailing bytes after the declared record count".into(),
            })
        }
        Err(e) => return Err(Error::io(path, e)),
    }
    Ok(builder.finish())
}

pub fn write_binary<W: Write>(corpus: &Corpus, w: &mut W) -> Result<()> {
    if let Some(i) = (0..corpus.len()).find(|&i| corpus.text(i).is_some()) {
        return Err(Error::InvalidArgument(format!(
            "instance `{}` carries text, which the binary format cannot store",
            corpus.id(i)
        )));
    }
    if corpus.dimension() > u32::MAX as usize {
        return Err(Error::InvalidArgument("dimension exceeds u32".into()));
    }
    let io = |e| Error::io("<binary>", e);
    w.write_all(BINARY_MAGIC).map_err(io)?;
    w.write_all(&(corpus.dimension() as u32).to_le_bytes()).map_err(io)?;
    w.write_all(&(corpus.len() as u64).to_le_bytes()).map_err(io)?;
    let mut buf = Vec::with_capacity(corpus.dimension() * 4 + 64);
    for inst in corpus.instances() {
        let id = inst.id.as_bytes();
        let id_len = u16::try_from(id.len()).map_err(|_| {
            Error::InvalidArgument(format!("id `{}` is longer than 65535 bytes", inst.id))
        })?;
        buf.clear();
        buf.extend_from_slice(&id_len.to_le_bytes());
        buf.extend_from_slice(id);
        for v in inst.embedding {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        buf.extend_from_slice(&inst.quality.unwrap_or(f32::NAN).to_le_bytes());
        w.write_all(&buf).map_err(io)?;
    }
    Ok(())
}

/// Sets quality scores for the listed ids; others keep their prior value.
///
/// The whole map is validated before anything changes.
pub fn attach_scores<I, S>(mut corpus: Corpus, scores: I) -> Result<Corpus>
where
    I: IntoIterator<Item = (S, f64)>,
    S: AsRef<str>,
{
    let mut updates = Vec::new();
    for (id, q) in scores {
        let id = id.as_ref();
        let pos = corpus
            .position(id)
            .ok_or_else(|| Error::UnknownId(id.to_string()))?;
        if !q.is_finite() {
            return Err(Error::QualityOutOfRange {
                id: id.to_string(),
                value: q,
            });
        }
        check_quality(id, q)?;
        updates.push((pos, q as f32));
    }
    for (pos, q) in updates {
        corpus.quality[pos] = Some(q);
    }
    Ok(corpus)
}

#[derive(Deserialize)]
struct ScoreLine {
    id: String,
    quality: f64,
}

/// Reads a quality-score file: JSONL of `{"id": ..., "quality": ...}`.
pub fn load_scores(path: impl AsRef<Path>) -> Result<Vec<(String, f64)>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ScoreLine = serde_json::from_str(&line).map_err(|e| Error::MalformedRecord {
            path: path.to_path_buf(),
            line: lineno + 1,
            message: e.to_string(),
        })?;
        out.push((rec.id, rec.quality));
    }
    Ok(out)
}

/// How a selection was produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SelectionMethod {
    #[serde(rename = "random")]
    Random,
    #[serde(rename = "kcenter")]
    KCenter,
    #[serde(rename = "km-closest")]
    KmClosest,
    #[serde(rename = "km-random")]
    KmRandom,
    #[serde(rename = "kmq")]
    Kmq,
    #[serde(rename = "iterative-kmq")]
    IterativeKmq,
}

impl SelectionMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            SelectionMethod::Random => "random",
            SelectionMethod::KCenter => "kcenter",
            SelectionMethod::KmClosest => "km-closest",
            SelectionMethod::KmRandom => "km-random",
            SelectionMethod::Kmq => "kmq",
            SelectionMethod::IterativeKmq => "iterative-kmq",
        }
    }

    /// Whether this method consumes a clustering and a budget plan.
    pub fn uses_clusters(self) -> bool {
        matches!(
            self,
            SelectionMethod::KmClosest
                | SelectionMethod::KmRandom
                | SelectionMethod::Kmq
                | SelectionMethod::IterativeKmq
        )
    }
}

impl std::fmt::Display for SelectionMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for SelectionMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "random" => SelectionMethod::Random,
            "kcenter" | "k-center" => SelectionMethod::KCenter,
            "km-closest" => SelectionMethod::KmClosest,
            "km-random" => SelectionMethod::KmRandom,
            "kmq" => SelectionMethod::Kmq,
            "iterative-kmq" => SelectionMethod::IterativeKmq,
            other => {
                return Err(Error::InvalidArgument(format!(
                    "unknown selection method `{other}`"
                )))
            }
        })
    }
}

/// A selected subset plus how it was made.
///
/// `ids` never repeats. When sampling with replacement, `multiplicities[i]`
/// is the number of times `ids[i]` was drawn and the multiplicities sum to
/// `budget`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub method: SelectionMethod,
    pub budget: usize,
    pub params: serde_json::Map<String, serde_json::Value>,
    pub ids: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub multiplicities: Option<Vec<u32>>,
}

impl Selection {
    pub fn new(method: SelectionMethod, budget: usize, ids: Vec<String>) -> Self {
        Self {
            method,
            budget,
            params: serde_json::Map::new(),
            ids,
            multiplicities: None,
        }
    }

    /// Total number of draws, counting multiplicities.
    pub fn draws(&self) -> usize {
        match &self.multiplicities {
            Some(m) => m.iter().map(|&c| c as usize).sum(),
            None => self.ids.len(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.budget == 0 {
            return Err(Error::InvalidSelection("budget must be positive".into()));
        }
        if self.ids.is_empty() {
            return Err(Error::InvalidSelection("no ids selected".into()));
        }
        if self.ids.len() > self.budget {
            return Err(Error::InvalidSelection(format!(
                "{} ids exceed budget {}",
                self.ids.len(),
                self.budget
            )));
        }
        let mut seen = HashSet::with_capacity(self.ids.len());
        for id in &self.ids {
            if !seen.insert(id.as_str()) {
                return Err(Error::InvalidSelection(format!("duplicate id `{id}`")));
            }
        }
        if let Some(m) = &self.multiplicities {
            if m.len() != self.ids.len() {
                return Err(Error::InvalidSelection(
                    "multiplicities and ids differ in length".into(),
                ));
            }
            if m.contains(&0) {
                return Err(Error::InvalidSelection("zero multiplicity".into()));
            }
            if self.draws() > self.budget {
                return Err(Error::InvalidSelection(format!(
                    "{} draws exceed budget {}",
                    self.draws(),
                    self.budget
                )));
            }
        }
        Ok(())
    }

    pub fn validate_against(&self, corpus: &Corpus) -> Result<()> {
        self.validate()?;
        match self.ids.iter().find(|id| !corpus.contains(id)) {
            Some(id) => Err(Error::UnknownId(id.clone())),
            None => Ok(()),
        }
    }
}

pub fn save_selection(selection: &Selection, path: impl AsRef<Path>) -> Result<()> {
    selection.validate()?;
    write_json(selection, path.as_ref())
}

pub fn load_selection(path: impl AsRef<Path>) -> Result<Selection> {
    let selection: Selection = read_json(path.as_ref())?;
    selection.validate()?;
    Ok(selection)
}

pub(crate) fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub(crate) fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_reader(BufReader::new(file))?)
}
