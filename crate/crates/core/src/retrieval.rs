//! Number-object image retrieval: tag scores by exact k-nearest-neighbor
//! voting, text and count-classifier score combination, and nDCG.
//!
//! The index doubles as the retrieval database. An item's tag scores come
//! from its `k` nearest *other* items, so no item votes for itself.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use log::warn;
use serde::Serialize;
use thiserror::Error;

use crate::data::CountLabel;
use crate::exec::Execution;

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("k = {k} exceeds the {available} searchable items")]
    KTooLarge { k: usize, available: usize },
    #[error("vector has dimension {got}, index has {expected}")]
    Dimension { expected: usize, got: usize },
    #[error("non-finite embedding entry in item {0}")]
    NonFinite(String),
    #[error("duplicate item id {0}")]
    DuplicateId(String),
    #[error("h must be at least 1")]
    InvalidH,
    #[error("unknown method {0:?} (expected baseline, text or sos)")]
    UnknownMethod(String),
    #[error("invalid query {0:?}: expected \"<number> <object>\"")]
    InvalidQuery(String),
    #[error("invalid count-classifier scores: {0}")]
    InvalidSos(String),
    #[error("item {0} has no count-classifier scores")]
    MissingSos(String),
    #[error("index file {path}: {reason}")]
    Format { path: PathBuf, reason: String },
    #[error("{path}:{line}: {reason}")]
    Parse { path: PathBuf, line: usize, reason: String },
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, RetrievalError>;

pub const DEFAULT_K: usize = 75;
pub const DEFAULT_H: usize = 20;

/// Number part of a query.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub enum NumberGroup {
    One,
    Two,
    Three,
    Many,
}

impl NumberGroup {
    pub const ALL: [NumberGroup; 4] = [NumberGroup::One, NumberGroup::Two, NumberGroup::Three, NumberGroup::Many];

    pub fn label(self) -> CountLabel {
        match self {
            NumberGroup::One => CountLabel::One,
            NumberGroup::Two => CountLabel::Two,
            NumberGroup::Three => CountLabel::Three,
            NumberGroup::Many => CountLabel::FourPlus,
        }
    }

    /// `None` for the zero class, which no query asks for.
    pub fn from_label(label: CountLabel) -> Option<Self> {
        match label {
            CountLabel::Zero => None,
            CountLabel::One => Some(NumberGroup::One),
            CountLabel::Two => Some(NumberGroup::Two),
            CountLabel::Three => Some(NumberGroup::Three),
            CountLabel::FourPlus => Some(NumberGroup::Many),
        }
    }

    /// The number tag carried by index items.
    pub fn word(self) -> &'static str {
        match self {
            NumberGroup::One => "one",
            NumberGroup::Two => "two",
            NumberGroup::Three => "three",
            NumberGroup::Many => "many",
        }
    }
}

impl fmt::Display for NumberGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.word())
    }
}

impl FromStr for NumberGroup {
    type Err = RetrievalError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "one" | "1" | "a" | "an" => Ok(NumberGroup::One),
            "two" | "2" => Ok(NumberGroup::Two),
            "three" | "3" => Ok(NumberGroup::Three),
            "many" | "4+" | "four" | "4" => Ok(NumberGroup::Many),
            _ => Err(RetrievalError::InvalidQuery(s.to_string())),
        }
    }
}

/// A number-object query such as "two animals".
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub struct Query {
    pub group: NumberGroup,
    /// Object tag, singular.
    pub object: String,
}

impl Query {
    pub fn new(group: NumberGroup, object: impl Into<String>) -> Self {
        Self {
            group,
            object: object.into(),
        }
    }

    /// Parses `"<number> <object>"`; a plural `s` on the object is dropped.
    pub fn parse(text: &str) -> Result<Self> {
        let mut parts = text.split_whitespace();
        let (Some(n), Some(obj), None) = (parts.next(), parts.next(), parts.next()) else {
            return Err(RetrievalError::InvalidQuery(text.to_string()));
        };
        let group = n.parse().map_err(|_| RetrievalError::InvalidQuery(text.to_string()))?;
        let obj = obj.to_ascii_lowercase();
        let object = match obj.strip_suffix('s') {
            Some(stem) if stem.len() >= 3 => stem.to_string(),
            _ => obj,
        };
        Ok(Self { group, object })
    }
}

impl fmt::Display for Query {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {}", self.group, self.object)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IndexItem {
    pub id: String,
    pub vector: Vec<f32>,
    pub tags: BTreeSet<String>,
    /// Precomputed count-classifier scores, in count-class order.
    pub sos: Option<[f32; 5]>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingIndex {
    dim: usize,
    items: Vec<IndexItem>,
}

impl EmbeddingIndex {
    pub fn new(dim: usize, items: Vec<IndexItem>) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for it in &items {
            if it.vector.len() != dim {
                return Err(RetrievalError::Dimension {
                    expected: dim,
                    got: it.vector.len(),
                });
            }
            if !it.vector.iter().all(|v| v.is_finite()) {
                return Err(RetrievalError::NonFinite(it.id.clone()));
            }
            if let Some(s) = &it.sos {
                check_sos(s)?;
            }
            if !seen.insert(it.id.as_str()) {
                return Err(RetrievalError::DuplicateId(it.id.clone()));
            }
        }
        Ok(Self { dim, items })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn items(&self) -> &[IndexItem] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Indices of the `k` items nearest to `query` by Euclidean distance,
    /// nearest first; equal distances keep item order. `exclude` removes one
    /// item from the search.
    pub fn knn(&self, query: &[f32], k: usize, exclude: Option<usize>) -> Result<Vec<usize>> {
        if query.len() != self.dim {
            return Err(RetrievalError::Dimension {
                expected: self.dim,
                got: query.len(),
            });
        }
        let available = self.items.len() - exclude.filter(|&e| e < self.items.len()).map_or(0, |_| 1);
        if k > available {
            return Err(RetrievalError::KTooLarge { k, available });
        }
        let mut d: Vec<(f64, usize)> = self
            .items
            .iter()
            .enumerate()
            .filter(|(i, _)| Some(*i) != exclude)
            .map(|(i, it)| {
                let s: f64 = it
                    .vector
                    .iter()
                    .zip(query)
                    .map(|(&a, &b)| ((a - b) as f64).powi(2))
                    .sum();
                (s, i)
            })
            .collect();
        if k < d.len() {
            d.select_nth_unstable_by(k, |a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            d.truncate(k);
        }
        d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        Ok(d.into_iter().map(|x| x.1).collect())
    }

    /// Fraction of the given neighbors carrying `tag`.
    pub fn tag_fraction(&self, neighbors: &[usize], tag: &str) -> f64 {
        if neighbors.is_empty() {
            return 0.0;
        }
        neighbors.iter().filter(|&&i| self.items[i].tags.contains(tag)).count() as f64 / neighbors.len() as f64
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut f = std::fs::File::create(path).map_err(io_err(path))?;
        f.write_all(&self.encode()).map_err(io_err(path))?;
        f.flush().map_err(io_err(path))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(io_err(path))?;
        let fmt_err = |reason: String| RetrievalError::Format {
            path: path.to_path_buf(),
            reason,
        };
        let (dim, items) = decode_index(&bytes).map_err(fmt_err)?;
        Self::new(dim, items)
    }

    /// `"SIDX"`, then `u64` item count and `u32` dimension; per item the id
    /// (`u32` length + UTF-8), the `f32` vector, the tags (`u32` count, each
    /// `u32` length + UTF-8) and a flag byte followed by five `f32` scores
    /// when set. Little-endian throughout.
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(INDEX_MAGIC);
        out.extend_from_slice(&(self.items.len() as u64).to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        let put_str = |out: &mut Vec<u8>, s: &str| {
            out.extend_from_slice(&(s.len() as u32).to_le_bytes());
            out.extend_from_slice(s.as_bytes());
        };
        for it in &self.items {
            put_str(&mut out, &it.id);
            for v in &it.vector {
                out.extend_from_slice(&v.to_le_bytes());
            }
            out.extend_from_slice(&(it.tags.len() as u32).to_le_bytes());
            for t in &it.tags {
                put_str(&mut out, t);
            }
            match &it.sos {
                Some(s) => {
                    out.push(1);
                    for v in s {
                        out.extend_from_slice(&v.to_le_bytes());
                    }
                }
                None => out.push(0),
            }
        }
        out
    }
}

const INDEX_MAGIC: &[u8; 4] = b"SIDX";

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or(format!("truncated at byte {}", self.pos))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f32(&mut self) -> std::result::Result<f32, String> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn string(&mut self) -> std::result::Result<String, String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| "string is not UTF-8".to_string())
    }
}

fn decode_index(bytes: &[u8]) -> std::result::Result<(usize, Vec<IndexItem>), String> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(4)? != INDEX_MAGIC {
        return Err("bad magic".into());
    }
    let count = u64::from_le_bytes(c.take(8)?.try_into().expect("8 bytes")) as usize;
    let dim = c.u32()? as usize;
    let mut items = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let id = c.string()?;
        let vector = (0..dim).map(|_| c.f32()).collect::<std::result::Result<_, _>>()?;
        let ntags = c.u32()? as usize;
        let tags = (0..ntags).map(|_| c.string()).collect::<std::result::Result<_, _>>()?;
        let sos = match c.take(1)?[0] {
            0 => None,
            1 => {
                let mut s = [0f32; 5];
                for v in &mut s {
                    *v = c.f32()?;
                }
                Some(s)
            }
            b => return Err(format!("bad score flag {b}")),
        };
        items.push(IndexItem { id, vector, tags, sos });
    }
    if c.pos != bytes.len() {
        return Err(format!("{} trailing bytes", bytes.len() - c.pos));
    }
    Ok((dim, items))
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> RetrievalError + '_ {
    move |source| RetrievalError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Fraction of the `k` nearest index items to `query` that carry `tag`.
pub fn knn_tag_scores(index: &EmbeddingIndex, query: &[f32], k: usize, tag: &str) -> Result<f64> {
    let nn = index.knn(query, k, None)?;
    Ok(index.tag_fraction(&nn, tag))
}

/// Object-tag score times number-tag score.
pub fn combine_text(object_score: f64, number_tag_score: f64) -> f64 {
    object_score * number_tag_score
}

fn check_sos(sos: &[f32]) -> Result<()> {
    if sos.len() != CountLabel::COUNT {
        return Err(RetrievalError::InvalidSos(format!("{} entries", sos.len())));
    }
    if sos.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
        return Err(RetrievalError::InvalidSos("entries outside [0, 1]".into()));
    }
    let s: f32 = sos.iter().sum();
    if (s - 1.0).abs() > 1e-3 {
        return Err(RetrievalError::InvalidSos(format!("entries sum to {s}")));
    }
    Ok(())
}

/// Object-tag score times the count classifier's probability of the
/// queried count.
pub fn combine_sos(object_score: f64, sos: &[f32], group: NumberGroup) -> Result<f64> {
    check_sos(sos)?;
    Ok(object_score * sos[group.label().index()] as f64)
}

/// `sum_{i<=h} 1 / log2(i + 1)`.
pub fn ideal_dcg(h: usize) -> f64 {
    (1..=h).map(|i| 1.0 / ((i + 1) as f64).log2()).sum()
}

/// nDCG at depth `h` for binary relevances in rank order. The ideal DCG
/// assumes at least `h` relevant items exist; lists shorter than `h` are
/// padded with irrelevant items.
pub fn ndcg_at_h(relevances: &[bool], h: usize) -> Result<f64> {
    if h == 0 {
        return Err(RetrievalError::InvalidH);
    }
    if relevances.len() < h {
        warn!("only {} ranked items for depth {h}; padding with irrelevant items", relevances.len());
    }
    let dcg: f64 = relevances
        .iter()
        .take(h)
        .enumerate()
        .filter(|(_, &r)| r)
        .map(|(i, _)| 1.0 / ((i + 2) as f64).log2())
        .sum();
    Ok(dcg / ideal_dcg(h))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub enum Method {
    /// Object tag only; ignores the number.
    Baseline,
    /// Object tag times number tag.
    Text,
    /// Object tag times count-classifier score.
    Sos,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Baseline, Method::Text, Method::Sos];

    pub fn name(self) -> &'static str {
        match self {
            Method::Baseline => "baseline",
            Method::Text => "text",
            Method::Sos => "sos",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = RetrievalError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(Method::Baseline),
            "text" => Ok(Method::Text),
            "sos" => Ok(Method::Sos),
            _ => Err(RetrievalError::UnknownMethod(s.to_string())),
        }
    }
}

/// Leave-one-out neighbor lists of every index item, computed once and
/// shared by all queries.
pub struct NeighborTable {
    pub k: usize,
    neighbors: Vec<Vec<usize>>,
}

impl NeighborTable {
    pub fn build(index: &EmbeddingIndex, k: usize, exec: Execution) -> Result<Self> {
        let ids: Vec<usize> = (0..index.len()).collect();
        let neighbors = exec
            .map(&ids, |&i| index.knn(&index.items[i].vector, k, Some(i)))
            .into_iter()
            .collect::<Result<_>>()?;
        Ok(Self { k, neighbors })
    }

    pub fn of(&self, i: usize) -> &[usize] {
        &self.neighbors[i]
    }
}

/// Scores every index item for `query` under `method` and returns item
/// indices with scores, best first (ties in item order).
pub fn rank_items(
    index: &EmbeddingIndex,
    table: &NeighborTable,
    query: &Query,
    method: Method,
) -> Result<Vec<(usize, f64)>> {
    let mut scored = Vec::with_capacity(index.len());
    for (i, it) in index.items.iter().enumerate() {
        let nn = table.of(i);
        let object = index.tag_fraction(nn, &query.object);
        let s = match method {
            Method::Baseline => object,
            Method::Text => combine_text(object, index.tag_fraction(nn, query.group.word())),
            Method::Sos => {
                let sos = it.sos.as_ref().ok_or_else(|| RetrievalError::MissingSos(it.id.clone()))?;
                combine_sos(object, sos, query.group)?
            }
        };
        scored.push((i, s));
    }
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    Ok(scored)
}

/// Binary relevance judgments keyed by `(query text, item id)`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Judgments {
    rel: HashMap<(String, String), bool>,
}

impl Judgments {
    pub fn insert(&mut self, query: &Query, item_id: &str, relevant: bool) {
        self.rel.insert((query.to_string(), item_id.to_string()), relevant);
    }

    pub fn get(&self, query: &Query, item_id: &str) -> Option<bool> {
        self.rel.get(&(query.to_string(), item_id.to_string())).copied()
    }

    /// Distinct queries, sorted.
    pub fn queries(&self) -> Vec<Query> {
        let set: BTreeSet<Query> = self.rel.keys().filter_map(|(q, _)| Query::parse(q).ok()).collect();
        set.into_iter().collect()
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut rdr = csv::Reader::from_path(path).map_err(|e| RetrievalError::Parse {
            path: path.to_path_buf(),
            line: 0,
            reason: e.to_string(),
        })?;
        let mut out = Judgments::default();
        for (i, rec) in rdr.records().enumerate() {
            let parse = |reason: String| RetrievalError::Parse {
                path: path.to_path_buf(),
                line: i + 2,
                reason,
            };
            let rec = rec.map_err(|e| parse(e.to_string()))?;
            if rec.len() != 3 {
                return Err(parse("expected query,item_id,rel".into()));
            }
            let q = Query::parse(&rec[0]).map_err(|e| parse(e.to_string()))?;
            let rel = match rec[2].trim() {
                "0" => false,
                "1" => true,
                other => return Err(parse(format!("relevance must be 0 or 1, got {other:?}"))),
            };
            out.insert(&q, &rec[1], rel);
        }
        Ok(out)
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut rows: Vec<(&String, &String, bool)> = self.rel.iter().map(|((q, i), &r)| (q, i, r)).collect();
        rows.sort();
        let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(io_err(path))?);
        writeln!(f, "query,item_id,rel").map_err(io_err(path))?;
        for (q, i, r) in rows {
            writeln!(f, "{q},{i},{}", r as u8).map_err(io_err(path))?;
        }
        f.flush().map_err(io_err(path))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct QueryResult {
    pub query: Query,
    pub method: Method,
    pub ndcg: f64,
    pub retrieved: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchmarkReport {
    pub h: usize,
    pub k: usize,
    pub results: Vec<QueryResult>,
}

impl BenchmarkReport {
    /// Mean nDCG of `method` over the queries of `group`.
    pub fn group_mean(&self, method: Method, group: NumberGroup) -> Option<f64> {
        let v: Vec<f64> = self
            .results
            .iter()
            .filter(|r| r.method == method && r.query.group == group)
            .map(|r| r.ndcg)
            .collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    pub fn overall_mean(&self, method: Method) -> Option<f64> {
        let v: Vec<f64> = self.results.iter().filter(|r| r.method == method).map(|r| r.ndcg).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    /// `method,object,group,ndcg` rows, then per-group and overall means
    /// with object `ALL`.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(io_err(path))?);
        writeln!(f, "method,object,group,ndcg").map_err(io_err(path))?;
        for r in &self.results {
            writeln!(f, "{},{},{},{:.6}", r.method, r.query.object, r.query.group, r.ndcg).map_err(io_err(path))?;
        }
        for m in Method::ALL {
            for g in NumberGroup::ALL {
                if let Some(v) = self.group_mean(m, g) {
                    writeln!(f, "{m},ALL,{g},{v:.6}").map_err(io_err(path))?;
                }
            }
            if let Some(v) = self.overall_mean(m) {
                writeln!(f, "{m},ALL,ALL,{v:.6}").map_err(io_err(path))?;
            }
        }
        f.flush().map_err(io_err(path))
    }
}

/// Retrieves the top `h` items of every query under every method and scores
/// them with nDCG@h. Unjudged retrieved items count as irrelevant.
pub fn run_benchmark(
    index: &EmbeddingIndex,
    table: &NeighborTable,
    queries: &[Query],
    methods: &[Method],
    judgments: &Judgments,
    h: usize,
) -> Result<BenchmarkReport> {
    if h == 0 {
        return Err(RetrievalError::InvalidH);
    }
    let mut results = Vec::new();
    let mut unjudged = 0usize;
    for &method in methods {
        for q in queries {
            let ranked = rank_items(index, table, q, method)?;
            let top: Vec<usize> = ranked.iter().take(h).map(|r| r.0).collect();
            let rels: Vec<bool> = top
                .iter()
                .map(|&i| {
                    judgments.get(q, &index.items[i].id).unwrap_or_else(|| {
                        unjudged += 1;
                        false
                    })
                })
                .collect();
            results.push(QueryResult {
                query: q.clone(),
                method,
                ndcg: ndcg_at_h(&rels, h)?,
                retrieved: top.iter().map(|&i| index.items[i].id.clone()).collect(),
            });
        }
    }
    if unjudged > 0 {
        warn!("{unjudged} retrieved items had no judgment and count as irrelevant");
    }
    Ok(BenchmarkReport {
        h,
        k: table.k,
        results,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn item(id: &str, v: Vec<f32>, tags: &[&str], sos: Option<[f32; 5]>) -> IndexItem {
        IndexItem {
            id: id.into(),
            vector: v,
            tags: tags.iter().map(|s| s.to_string()).collect(),
            sos,
        }
    }

    #[test]
    fn number_groups_map_to_nonzero_classes() {
        let labels: BTreeSet<CountLabel> = NumberGroup::ALL.iter().map(|g| g.label()).collect();
        assert_eq!(labels.len(), 4);
        assert!(!labels.contains(&CountLabel::Zero));
        for g in NumberGroup::ALL {
            assert_eq!(NumberGroup::from_label(g.label()), Some(g));
            assert_eq!(g.word().parse::<NumberGroup>().unwrap(), g);
        }
        assert_eq!(Query::parse("two animals").unwrap(), Query::new(NumberGroup::Two, "animal"));
        assert_eq!(Query::parse("Many bus").unwrap(), Query::new(NumberGroup::Many, "bus"));
        assert!(Query::parse("animals").is_err());
        assert!(Query::parse("seven cats").is_err());
    }

    #[test]
    fn tag_fraction_examples() {
        let items: Vec<IndexItem> = (0..80)
            .map(|i| item(&format!("i{i}"), vec![i as f32], if i < 30 { &["dog"] } else { &[] }, None))
            .collect();
        let idx = EmbeddingIndex::new(1, items).unwrap();
        // the 75 nearest to -1 are items 0..75, of which 30 are tagged
        assert!((knn_tag_scores(&idx, &[-1.0], 75, "dog").unwrap() - 0.4).abs() < 1e-15);
        assert_eq!(knn_tag_scores(&idx, &[-1.0], 75, "cat").unwrap(), 0.0);
        assert!(matches!(
            knn_tag_scores(&idx, &[0.0], 81, "dog"),
            Err(RetrievalError::KTooLarge { .. })
        ));
        assert!(idx.knn(&[0.0], 80, Some(3)).is_err());
        assert!(idx.knn(&[0.0, 1.0], 3, None).is_err());
    }

    #[test]
    fn knn_matches_brute_force_sort() {
        let mut rng = crate::seed::rng(8);
        let items: Vec<IndexItem> = (0..200)
            .map(|i| item(&format!("i{i}"), (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect(), &[], None))
            .collect();
        let idx = EmbeddingIndex::new(6, items).unwrap();
        for _ in 0..10 {
            let q: Vec<f32> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let mut all: Vec<(f64, usize)> = idx
                .items()
                .iter()
                .enumerate()
                .map(|(i, it)| {
                    let d: f64 = it.vector.iter().zip(&q).map(|(a, b)| ((a - b) as f64).powi(2)).sum();
                    (d.sqrt(), i)
                })
                .collect();
            all.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let expect: Vec<usize> = all.iter().take(75).map(|x| x.1).collect();
            assert_eq!(idx.knn(&q, 75, None).unwrap(), expect);
        }
    }

    #[test]
    fn knn_ties_follow_item_order() {
        let items = vec![
            item("a", vec![1.0], &[], None),
            item("b", vec![-1.0], &[], None),
            item("c", vec![1.0], &[], None),
        ];
        let idx = EmbeddingIndex::new(1, items).unwrap();
        assert_eq!(idx.knn(&[0.0], 2, None).unwrap(), vec![0, 1]);
        assert_eq!(idx.knn(&[0.0], 2, Some(0)).unwrap(), vec![1, 2]);
    }

    #[test]
    fn combination_examples() {
        assert_eq!(combine_text(0.5, 0.5), 0.25);
        assert_eq!(combine_text(0.0, 0.9), 0.0);
        assert_eq!(combine_text(0.7, 0.0), 0.0);
        let onehot = [0.0, 1.0, 0.0, 0.0, 0.0];
        assert_eq!(combine_sos(0.7, &onehot, NumberGroup::One).unwrap(), 0.7);
        let uniform = [0.2f32; 5];
        for g in NumberGroup::ALL {
            assert!((combine_sos(0.5, &uniform, g).unwrap() - 0.1).abs() < 1e-7);
        }
        assert!(combine_sos(0.5, &[0.5, 0.5], NumberGroup::One).is_err());
        assert!(combine_sos(0.5, &[0.5; 5], NumberGroup::One).is_err());
    }

    #[test]
    fn ndcg_examples() {
        assert!((ndcg_at_h(&[true; 20], 20).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(ndcg_at_h(&[false; 20], 20).unwrap(), 0.0);
        let mut rels = vec![false; 20];
        rels[0] = true;
        rels[2] = true;
        let idcg: f64 = (1..=20).map(|i| 1.0 / ((i + 1) as f64).log2()).sum();
        assert!((ndcg_at_h(&rels, 20).unwrap() - 1.5 / idcg).abs() < 1e-12);
        // short list is padded
        assert_eq!(ndcg_at_h(&[true], 20).unwrap(), 1.0 / idcg);
        assert!(ndcg_at_h(&[true], 0).is_err());
        assert_eq!("sos".parse::<Method>().unwrap(), Method::Sos);
        assert!("bm25".parse::<Method>().is_err());
    }

    /// Two objects, every count, vectors that separate objects perfectly.
    fn oracle_index() -> (EmbeddingIndex, Judgments) {
        let mut items = Vec::new();
        let mut j = Judgments::default();
        for (oi, obj) in ["cat", "car"].iter().enumerate() {
            for g in NumberGroup::ALL {
                for r in 0..30 {
                    let id = format!("{obj}-{g}-{r}");
                    let mut sos = [0.0f32; 5];
                    sos[g.label().index()] = 1.0;
                    let v = vec![oi as f32 * 100.0 + r as f32 * 0.01, g.label().index() as f32 * 0.001];
                    items.push(item(&id, v, &[obj], Some(sos)));
                    for qg in NumberGroup::ALL {
                        for qo in ["cat", "car"] {
                            j.insert(&Query::new(qg, qo), &id, qg == g && qo == *obj);
                        }
                    }
                }
            }
        }
        (EmbeddingIndex::new(2, items).unwrap(), j)
    }

    #[test]
    fn perfect_sos_gives_perfect_ndcg() {
        let (idx, j) = oracle_index();
        let table = NeighborTable::build(&idx, 75, Execution::Sequential).unwrap();
        let queries = j.queries();
        assert_eq!(queries.len(), 8);
        let r = run_benchmark(&idx, &table, &queries, &Method::ALL, &j, 20).unwrap();
        for g in NumberGroup::ALL {
            assert!((r.group_mean(Method::Sos, g).unwrap() - 1.0).abs() < 1e-12);
        }
        // the baseline ignores the number: same list for every group
        for obj in ["cat", "car"] {
            let lists: Vec<&Vec<String>> = r
                .results
                .iter()
                .filter(|x| x.method == Method::Baseline && x.query.object == obj)
                .map(|x| &x.retrieved)
                .collect();
            assert_eq!(lists.len(), 4);
            assert!(lists.windows(2).all(|w| w[0] == w[1]));
        }
        let dir = tempfile::tempdir().unwrap();
        r.write_csv(dir.path().join("ndcg.csv")).unwrap();
        j.write_csv(dir.path().join("j.csv")).unwrap();
        assert_eq!(Judgments::read_csv(dir.path().join("j.csv")).unwrap(), j);
    }

    #[test]
    fn index_file_round_trip() {
        let (idx, _) = oracle_index();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("i.sidx");
        idx.save(&p).unwrap();
        assert_eq!(EmbeddingIndex::load(&p).unwrap(), idx);
        let mut bytes = idx.encode();
        bytes.pop();
        std::fs::write(&p, &bytes).unwrap();
        assert!(matches!(EmbeddingIndex::load(&p), Err(RetrievalError::Format { .. })));
    }

    #[test]
    fn sos_reranking_matches_oracle() {
        let mut rng = crate::seed::rng(21);
        let items: Vec<IndexItem> = (0..120)
            .map(|i| {
                let mut s = [0f32; 5];
                for v in &mut s {
                    *v = rng.gen_range(0.01..1.0);
                }
                let t: f32 = s.iter().sum();
                s.iter_mut().for_each(|v| *v /= t);
                let tags: &[&str] = if rng.gen_bool(0.5) { &["dog"] } else { &[] };
                item(&format!("i{i}"), vec![rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)], tags, Some(s))
            })
            .collect();
        let idx = EmbeddingIndex::new(2, items).unwrap();
        let table = NeighborTable::build(&idx, 10, Execution::Parallel).unwrap();
        let q = Query::new(NumberGroup::Three, "dog");
        let got = rank_items(&idx, &table, &q, Method::Sos).unwrap();
        let mut expect: Vec<(usize, f64)> = (0..idx.len())
            .map(|i| {
                let o = idx.tag_fraction(table.of(i), "dog");
                (i, o * idx.items()[i].sos.unwrap()[3] as f64)
            })
            .collect();
        expect.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        assert_eq!(&got[..20], &expect[..20]);
    }

    proptest! {
        #[test]
        fn knn_invariant_to_rigid_motion(seed in any::<u64>(), angle in 0.0f32..6.28, tx in -5.0f32..5.0) {
            let mut rng = crate::seed::rng(seed);
            let pts: Vec<(f32, f32, bool)> = (0..40).map(|_| (rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_bool(0.4))).collect();
            let build = |f: &dyn Fn(f32, f32) -> Vec<f32>| {
                EmbeddingIndex::new(2, pts.iter().enumerate().map(|(i, p)| item(&i.to_string(), f(p.0, p.1), if p.2 { &["t"] } else { &[] }, None)).collect()).unwrap()
            };
            let (c, s) = (angle.cos(), angle.sin());
            let a = build(&|x, y| vec![x, y]);
            let b = build(&|x, y| vec![c * x - s * y + tx, s * x + c * y - tx]);
            let q = (rng.gen_range(-1.0f32..1.0), rng.gen_range(-1.0f32..1.0));
            let qa = knn_tag_scores(&a, &[q.0, q.1], 9, "t").unwrap();
            let qb = knn_tag_scores(&b, &[c * q.0 - s * q.1 + tx, s * q.0 + c * q.1 - tx], 9, "t").unwrap();
            // rounding can swap near-equidistant neighbors; allow one vote
            prop_assert!((qa - qb).abs() <= 1.0 / 9.0 + 1e-12);
        }

        #[test]
        fn ndcg_ignores_order_below_h(rels in prop::collection::vec(any::<bool>(), 25..40), seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            let a = ndcg_at_h(&rels, 20).unwrap();
            let mut tail = rels[20..].to_vec();
            tail.shuffle(&mut crate::seed::rng(seed));
            let b: Vec<bool> = rels[..20].iter().copied().chain(tail).collect();
            prop_assert_eq!(a, ndcg_at_h(&b, 20).unwrap());
            prop_assert!((0.0..=1.0 + 1e-12).contains(&a));
        }

        #[test]
        fn combinations_are_monotone(o in 0.0f64..1.0, n in 0.0f64..1.0, d in 0.0f64..0.5) {
            prop_assert!(combine_text(o + d, n) >= combine_text(o, n));
            prop_assert!(combine_text(o, n + d) >= combine_text(o, n));
        }
    }
}
