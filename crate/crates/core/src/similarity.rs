//! Phrase similarity providers backing RED and duplicate-node detection.
//!
//! Every provider returns scores in `[0, 1]`, is symmetric, and scores a
//! phrase against itself as exactly 1. Phrases are normalized before
//! comparison.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scene_graph::normalize;

#[derive(Debug, Error)]
pub enum SimilarityError {
    #[error("phrase {0:?} is not in the embedding table")]
    MissingPhrase(String),
    #[error("vector for {phrase:?} has dimension {found}, table dimension is {expected}")]
    Dimension {
        phrase: String,
        expected: usize,
        found: usize,
    },
    #[error("vector for {0:?} has a non-finite component")]
    NonFinite(String),
    #[error("embedding service protocol error: {0}")]
    Protocol(String),
    #[error("embedding service unavailable after {attempts} attempts: {last}")]
    ServiceUnavailable { attempts: u32, last: String },
    #[error("embedding cache: {0}")]
    Cache(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub trait SimilarityProvider: Send + Sync {
    /// Score in `[0, 1]`.
    fn similarity(&self, a: &str, b: &str) -> Result<f64, SimilarityError>;

    /// Short name recorded in reports.
    fn label(&self) -> String;
}

/// 1 when the normalized phrases are equal, else 0.
pub fn sim_exact(a: &str, b: &str) -> f64 {
    if normalize(a) == normalize(b) {
        1.0
    } else {
        0.0
    }
}

/// Jaccard index of the whitespace token sets. Two empty phrases score 1.
pub fn sim_jaccard(a: &str, b: &str) -> f64 {
    let (a, b) = (normalize(a), normalize(b));
    let ta: BTreeSet<&str> = a.split(' ').filter(|t| !t.is_empty()).collect();
    let tb: BTreeSet<&str> = b.split(' ').filter(|t| !t.is_empty()).collect();
    let union = ta.union(&tb).count();
    if union == 0 {
        return 1.0;
    }
    ta.intersection(&tb).count() as f64 / union as f64
}

/// Cosine similarity of the two phrases' vectors, negative values clamped
/// to 0.
pub fn sim_embedding(table: &EmbeddingTable, a: &str, b: &str) -> Result<f64, SimilarityError> {
    let (a, b) = (normalize(a), normalize(b));
    let va = table.get(&a).ok_or_else(|| SimilarityError::MissingPhrase(a.clone()))?;
    let vb = table.get(&b).ok_or_else(|| SimilarityError::MissingPhrase(b.clone()))?;
    if a == b {
        return Ok(1.0);
    }
    Ok(cosine(va, vb).clamp(0.0, 1.0))
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot / (na * nb)
}

#[derive(Clone, Copy, Debug, Default)]
pub struct ExactSimilarity;

impl SimilarityProvider for ExactSimilarity {
    fn similarity(&self, a: &str, b: &str) -> Result<f64, SimilarityError> {
        Ok(sim_exact(a, b))
    }
    fn label(&self) -> String {
        "exact".into()
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct JaccardSimilarity;

impl SimilarityProvider for JaccardSimilarity {
    fn similarity(&self, a: &str, b: &str) -> Result<f64, SimilarityError> {
        Ok(sim_jaccard(a, b))
    }
    fn label(&self) -> String {
        "jaccard".into()
    }
}

/// Precomputed phrase vectors of a fixed dimension.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    dim: usize,
    source: String,
    vectors: BTreeMap<String, Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct TableHeader {
    dim: usize,
    source: String,
}

#[derive(Serialize, Deserialize)]
struct TableRow {
    phrase: String,
    vector: Vec<f64>,
}

impl EmbeddingTable {
    pub fn new(dim: usize, source: impl Into<String>) -> Self {
        Self {
            dim,
            source: source.into(),
            vectors: BTreeMap::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }
    pub fn source(&self) -> &str {
        &self.source
    }
    pub fn len(&self) -> usize {
        self.vectors.len()
    }
    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn get(&self, phrase: &str) -> Option<&[f64]> {
        self.vectors.get(phrase).map(Vec::as_slice)
    }

    pub fn contains(&self, phrase: &str) -> bool {
        self.vectors.contains_key(&normalize(phrase))
    }

    pub fn phrases(&self) -> impl Iterator<Item = &str> + '_ {
        self.vectors.keys().map(String::as_str)
    }

    pub fn insert(&mut self, phrase: &str, vector: Vec<f64>) -> Result<(), SimilarityError> {
        let phrase = normalize(phrase);
        if vector.len() != self.dim {
            return Err(SimilarityError::Dimension {
                phrase,
                expected: self.dim,
                found: vector.len(),
            });
        }
        if vector.iter().any(|v| !v.is_finite()) {
            return Err(SimilarityError::NonFinite(phrase));
        }
        self.vectors.insert(phrase, vector);
        Ok(())
    }

    /// Copies every entry of `other` into this table.
    pub fn merge(&mut self, other: &EmbeddingTable) -> Result<(), SimilarityError> {
        for (p, v) in &other.vectors {
            self.insert(p, v.clone())?;
        }
        Ok(())
    }

    /// Header line `{"dim", "source"}` followed by one `{"phrase", "vector"}`
    /// line per entry.
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        serde_json::to_writer(
            &mut w,
            &TableHeader {
                dim: self.dim,
                source: self.source.clone(),
            },
        )?;
        w.write_all(b"\n")?;
        for (phrase, vector) in &self.vectors {
            serde_json::to_writer(
                &mut w,
                &TableRow {
                    phrase: phrase.clone(),
                    vector: vector.clone(),
                },
            )?;
            w.write_all(b"\n")?;
        }
        w.flush()
    }

    pub fn read_jsonl<R: BufRead>(r: R) -> Result<Self, SimilarityError> {
        let mut lines = r
            .lines()
            .enumerate()
            .filter(|(_, l)| l.as_ref().map_or(true, |l| !l.trim().is_empty()));
        let bad = |line: usize, e: serde_json::Error| SimilarityError::Cache(format!("line {}: {e}", line + 1));
        let header: TableHeader = match lines.next() {
            Some((i, line)) => serde_json::from_str(&line?).map_err(|e| bad(i, e))?,
            None => return Err(SimilarityError::Cache("missing header line".into())),
        };
        let mut table = EmbeddingTable::new(header.dim, header.source);
        for (i, line) in lines {
            let row: TableRow = serde_json::from_str(&line?).map_err(|e| bad(i, e))?;
            table.insert(&row.phrase, row.vector)?;
        }
        Ok(table)
    }

    pub fn load(path: &Path) -> Result<Self, SimilarityError> {
        Self::read_jsonl(BufReader::new(fs::File::open(path)?))
    }

    pub fn save(&self, path: &Path) -> Result<(), SimilarityError> {
        let tmp = path.with_extension(format!("tmp{}", std::process::id()));
        {
            let mut f = std::io::BufWriter::new(fs::File::create(&tmp)?);
            self.write_jsonl(&mut f)?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }
}

impl SimilarityProvider for EmbeddingTable {
    fn similarity(&self, a: &str, b: &str) -> Result<f64, SimilarityError> {
        sim_embedding(self, a, b)
    }
    fn label(&self) -> String {
        format!("embedding:{}", self.source)
    }
}

/// Environment variable naming the embedding cache directory.
pub const CACHE_DIR_ENV: &str = "SPICE_EMBEDDING_CACHE";

/// On-disk store of embedding tables, one file per source label.
///
/// Writes go through a temporary file and an atomic rename, so readers never
/// observe a partially written table. Writers within a process are
/// serialized.
#[derive(Debug)]
pub struct EmbeddingCache {
    dir: PathBuf,
    write_lock: Mutex<()>,
}

impl EmbeddingCache {
    pub fn new(dir: impl Into<PathBuf>) -> Result<Self, SimilarityError> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        Ok(Self {
            dir,
            write_lock: Mutex::new(()),
        })
    }

    /// Cache rooted at `$SPICE_EMBEDDING_CACHE`, if set.
    pub fn from_env() -> Result<Option<Self>, SimilarityError> {
        match std::env::var_os(CACHE_DIR_ENV) {
            Some(dir) => Self::new(PathBuf::from(dir)).map(Some),
            None => Ok(None),
        }
    }

    pub fn path_for(&self, source: &str) -> PathBuf {
        let hex: String = source.bytes().map(|b| format!("{b:02x}")).collect();
        self.dir.join(format!("embeddings-{hex}.jsonl"))
    }

    pub fn load(&self, source: &str) -> Result<Option<EmbeddingTable>, SimilarityError> {
        let path = self.path_for(source);
        if !path.exists() {
            return Ok(None);
        }
        let table = EmbeddingTable::load(&path)?;
        if table.source != source {
            return Err(SimilarityError::Cache(format!(
                "{} holds source {:?}, expected {source:?}",
                path.display(),
                table.source
            )));
        }
        Ok(Some(table))
    }

    /// Merges `table` into whatever is cached for its source.
    pub fn store(&self, table: &EmbeddingTable) -> Result<(), SimilarityError> {
        let _guard = self.write_lock.lock().unwrap_or_else(|e| e.into_inner());
        let merged = match self.load(&table.source)? {
            Some(mut existing) if existing.dim == table.dim => {
                existing.merge(table)?;
                existing
            }
            Some(existing) => {
                return Err(SimilarityError::Dimension {
                    phrase: String::new(),
                    expected: existing.dim,
                    found: table.dim,
                })
            }
            None => table.clone(),
        };
        merged.save(&self.path_for(&table.source))
    }
}

#[cfg(feature = "remote")]
pub use remote::{fetch_embeddings, EmbeddingClient};

#[cfg(feature = "remote")]
mod remote {
    use std::time::Duration;

    use serde::{Deserialize, Serialize};

    use super::{EmbeddingCache, EmbeddingTable, SimilarityError};
    use crate::scene_graph::normalize;

    pub const MAX_BATCH: usize = 256;

    #[derive(Serialize)]
    struct EmbedRequest<'a> {
        texts: &'a [String],
    }

    #[derive(Deserialize)]
    struct EmbedResponse {
        embeddings: Vec<Vec<f64>>,
    }

    /// Client for `POST <endpoint>/embed`.
    pub struct EmbeddingClient {
        endpoint: String,
        source: String,
        cache: Option<EmbeddingCache>,
        batch_size: usize,
        max_attempts: u32,
        initial_backoff: Duration,
        agent: ureq::Agent,
    }

    impl EmbeddingClient {
        /// `source` labels the vectors in the cache; it should identify the
        /// model behind the endpoint.
        pub fn new(endpoint: impl Into<String>, source: impl Into<String>) -> Self {
            let agent = ureq::Agent::config_builder()
                .http_status_as_error(false)
                .timeout_global(Some(Duration::from_secs(60)))
                .build()
                .into();
            Self {
                endpoint: endpoint.into().trim_end_matches('/').to_string(),
                source: source.into(),
                cache: None,
                batch_size: MAX_BATCH,
                max_attempts: 3,
                initial_backoff: Duration::from_millis(250),
                agent,
            }
        }

        pub fn with_cache(mut self, cache: EmbeddingCache) -> Self {
            self.cache = Some(cache);
            self
        }

        pub fn with_backoff(mut self, initial: Duration) -> Self {
            self.initial_backoff = initial;
            self
        }

        /// Clamped to `1..=256`.
        pub fn with_batch_size(mut self, n: usize) -> Self {
            self.batch_size = n.clamp(1, MAX_BATCH);
            self
        }

        /// Embeds `phrases`, consulting the cache first. Only phrases missing
        /// from the cache go over the wire.
        pub fn fetch(&self, phrases: &[String]) -> Result<EmbeddingTable, SimilarityError> {
            let mut wanted: Vec<String> = phrases.iter().map(|p| normalize(p)).collect();
            wanted.sort();
            wanted.dedup();

            let cached = match &self.cache {
                Some(c) => c.load(&self.source)?,
                None => None,
            };
            let missing: Vec<String> = wanted
                .iter()
                .filter(|p| cached.as_ref().is_none_or(|t| t.get(p).is_none()))
                .cloned()
                .collect();

            let mut fetched: Option<EmbeddingTable> = None;
            for batch in missing.chunks(self.batch_size) {
                let vectors = self.request(batch)?;
                let dim = vectors[0].len();
                let table = fetched.get_or_insert_with(|| EmbeddingTable::new(dim, self.source.clone()));
                if dim != table.dim() {
                    return Err(SimilarityError::Protocol(format!(
                        "batch dimension {dim} differs from earlier dimension {}",
                        table.dim()
                    )));
                }
                for (phrase, v) in batch.iter().zip(vectors) {
                    table
                        .insert(phrase, v)
                        .map_err(|e| SimilarityError::Protocol(e.to_string()))?;
                }
            }

            if let (Some(cache), Some(new)) = (&self.cache, &fetched) {
                if let Some(old) = &cached {
                    if old.dim() != new.dim() {
                        return Err(SimilarityError::Protocol(format!(
                            "service dimension {} differs from cached dimension {}",
                            new.dim(),
                            old.dim()
                        )));
                    }
                }
                cache.store(new)?;
            }

            let dim = cached.as_ref().or(fetched.as_ref()).map_or(0, EmbeddingTable::dim);
            let mut out = EmbeddingTable::new(dim, self.source.clone());
            for p in &wanted {
                let v = fetched
                    .as_ref()
                    .and_then(|t| t.get(p))
                    .or_else(|| cached.as_ref().and_then(|t| t.get(p)))
                    .expect("every wanted phrase is cached or fetched");
                out.insert(p, v.to_vec())?;
            }
            Ok(out)
        }

        fn request(&self, batch: &[String]) -> Result<Vec<Vec<f64>>, SimilarityError> {
            let url = format!("{}/embed", self.endpoint);
            let mut last = String::new();
            for attempt in 0..self.max_attempts {
                if attempt > 0 {
                    std::thread::sleep(self.initial_backoff * 2u32.pow(attempt - 1));
                }
                let mut resp = match self.agent.post(&url).send_json(EmbedRequest { texts: batch }) {
                    Ok(r) => r,
                    Err(e) => {
                        log::warn!("embedding request attempt {} failed: {e}", attempt + 1);
                        last = e.to_string();
                        continue;
                    }
                };
                let status = resp.status();
                if status.is_server_error() {
                    last = format!("HTTP {status}");
                    log::warn!("embedding request attempt {} failed: {last}", attempt + 1);
                    continue;
                }
                if !status.is_success() {
                    return Err(SimilarityError::Protocol(format!("HTTP {status}")));
                }
                let body: EmbedResponse = resp
                    .body_mut()
                    .read_json()
                    .map_err(|e| SimilarityError::Protocol(format!("bad response body: {e}")))?;
                if body.embeddings.len() != batch.len() {
                    return Err(SimilarityError::Protocol(format!(
                        "sent {} texts, received {} embeddings",
                        batch.len(),
                        body.embeddings.len()
                    )));
                }
                let dim = body.embeddings[0].len();
                if dim == 0 || body.embeddings.iter().any(|v| v.len() != dim) {
                    return Err(SimilarityError::Protocol(
                        "inconsistent vector dimensions in one response".into(),
                    ));
                }
                return Ok(body.embeddings);
            }
            Err(SimilarityError::ServiceUnavailable {
                attempts: self.max_attempts,
                last,
            })
        }
    }

    /// One-shot convenience around [`EmbeddingClient::fetch`].
    pub fn fetch_embeddings(
        endpoint: &str,
        source: &str,
        phrases: &[String],
        cache: Option<EmbeddingCache>,
    ) -> Result<EmbeddingTable, SimilarityError> {
        let mut client = EmbeddingClient::new(endpoint, source);
        if let Some(c) = cache {
            client = client.with_cache(c);
        }
        client.fetch(phrases)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn exact_examples() {
        assert_eq!(sim_exact("table", "table"), 1.0);
        assert_eq!(sim_exact("table", "chair"), 0.0);
        assert_eq!(sim_exact("Blue  Table", "blue table"), 1.0);
    }

    #[test]
    fn jaccard_examples() {
        assert_eq!(sim_jaccard("blue table", "table"), 0.5);
        assert_eq!(sim_jaccard("a", "a"), 1.0);
        assert_eq!(sim_jaccard("a b", "c d"), 0.0);
        assert_eq!(sim_jaccard("", "  "), 1.0);
        assert_eq!(sim_jaccard("", "a"), 0.0);
    }

    fn plane() -> EmbeddingTable {
        let mut t = EmbeddingTable::new(2, "test");
        t.insert("x", vec![1.0, 0.0]).unwrap();
        t.insert("y", vec![0.0, 1.0]).unwrap();
        t.insert("diag", vec![1.0, 1.0]).unwrap();
        t.insert("neg", vec![-1.0, 0.0]).unwrap();
        t.insert("zero", vec![0.0, 0.0]).unwrap();
        t.insert("x again", vec![1.0, 0.0]).unwrap();
        t
    }

    #[test]
    fn embedding_examples() {
        let t = plane();
        assert_eq!(sim_embedding(&t, "x", "x").unwrap(), 1.0);
        assert_eq!(sim_embedding(&t, "x", "x again").unwrap(), 1.0);
        assert_eq!(sim_embedding(&t, "x", "y").unwrap(), 0.0);
        assert!((sim_embedding(&t, "x", "diag").unwrap() - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
        assert_eq!(sim_embedding(&t, "x", "neg").unwrap(), 0.0);
        assert_eq!(sim_embedding(&t, "zero", "zero").unwrap(), 1.0);
        assert_eq!(sim_embedding(&t, "zero", "x").unwrap(), 0.0);
        match sim_embedding(&t, "x", "unknown") {
            Err(SimilarityError::MissingPhrase(p)) => assert_eq!(p, "unknown"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn table_rejects_bad_vectors() {
        let mut t = EmbeddingTable::new(2, "test");
        assert!(matches!(
            t.insert("a", vec![1.0]),
            Err(SimilarityError::Dimension { .. })
        ));
        assert!(matches!(
            t.insert("a", vec![1.0, f64::INFINITY]),
            Err(SimilarityError::NonFinite(_))
        ));
    }

    #[test]
    fn cache_round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let cache = EmbeddingCache::new(dir.path()).unwrap();
        let mut t = EmbeddingTable::new(3, "model/a");
        t.insert("odd", vec![0.1 + 0.2, 1.0 / 3.0, -2.5e-300]).unwrap();
        t.insert("big", vec![f64::MAX, f64::MIN_POSITIVE, -0.0]).unwrap();
        cache.store(&t).unwrap();
        let back = cache.load("model/a").unwrap().unwrap();
        for p in ["odd", "big"] {
            let a: Vec<u64> = t.get(p).unwrap().iter().map(|v| v.to_bits()).collect();
            let b: Vec<u64> = back.get(p).unwrap().iter().map(|v| v.to_bits()).collect();
            assert_eq!(a, b);
        }
        assert!(cache.load("other").unwrap().is_none());

        let mut more = EmbeddingTable::new(3, "model/a");
        more.insert("new", vec![1.0, 2.0, 3.0]).unwrap();
        cache.store(&more).unwrap();
        assert_eq!(cache.load("model/a").unwrap().unwrap().len(), 3);
    }

    fn phrase() -> impl Strategy<Value = String> {
        prop::collection::vec(
            prop::sample::select(vec!["red", "blue", "table", "chair", "old", "a"]),
            0..4,
        )
        .prop_map(|w| w.join(" "))
    }

    proptest! {
        #[test]
        fn providers_are_reflexive_symmetric_bounded(a in phrase(), b in phrase(), va in prop::collection::vec(-3.0f64..3.0, 4), vb in prop::collection::vec(-3.0f64..3.0, 4)) {
            let mut table = EmbeddingTable::new(4, "p");
            table.insert(&a, va).unwrap();
            if normalize(&a) != normalize(&b) {
                table.insert(&b, vb).unwrap();
            }
            let providers: Vec<Box<dyn SimilarityProvider>> =
                vec![Box::new(ExactSimilarity), Box::new(JaccardSimilarity), Box::new(table)];
            for p in &providers {
                let ab = p.similarity(&a, &b).unwrap();
                prop_assert_eq!(ab, p.similarity(&b, &a).unwrap());
                prop_assert!((0.0..=1.0).contains(&ab));
                prop_assert_eq!(p.similarity(&a, &a).unwrap(), 1.0);
            }
        }
    }
}
