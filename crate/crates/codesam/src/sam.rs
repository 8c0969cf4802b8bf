//! Binary sparse associative memory over compositional codes.
//!
//! Bipartite store: M*K top-layer neurons (one group of K per cluster) and
//! one bottom-layer node per stored context. Connections are bits; each
//! top-layer neuron owns a bit-packed row of 64-bit words indexed by node.
//! Retrieval counts, for every node, its connections to the query's active
//! neurons and returns the Winner-Takes-All set.

use crate::core::{CodeConfig, CompositionalCode};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum SamError {
    #[error("code does not match memory config: expected {expected} clusters, got {got}")]
    ConfigMismatch { expected: usize, got: usize },
    #[error("memory is empty")]
    EmptyMemory,
    #[error("query has no active entries")]
    EmptyQuery,
    #[error("query index {index} out of range for K={k} at cluster {cluster}")]
    IndexOutOfRange { cluster: usize, index: u16, k: usize },
}

/// Labels carried by a bottom-layer node.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NodeMeta {
    pub instance_id: String,
    pub lemma: String,
    pub sense_key: String,
}

/// A possibly partial code: `None` entries are erased clusters.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QueryPattern {
    active: Vec<Option<u16>>,
}

impl QueryPattern {
    pub fn new(active: Vec<Option<u16>>) -> Result<Self, SamError> {
        if active.iter().all(Option::is_none) {
            return Err(SamError::EmptyQuery);
        }
        Ok(Self { active })
    }

    /// Full pattern from a code: every cluster present.
    pub fn from_code(code: &CompositionalCode) -> Self {
        Self {
            active: code.indices().iter().map(|&i| Some(i)).collect(),
        }
    }

    /// Copy of the pattern with the given clusters erased.
    pub fn with_erasures(&self, erased: &[usize]) -> Result<Self, SamError> {
        let mut active = self.active.clone();
        for &c in erased {
            if c < active.len() {
                active[c] = None;
            }
        }
        Self::new(active)
    }

    pub fn active(&self) -> &[Option<u16>] {
        &self.active
    }

    pub fn present_count(&self) -> usize {
        self.active.iter().filter(|e| e.is_some()).count()
    }
}

/// Outcome of a WTA retrieval.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RetrievalResult {
    /// Node ids sharing the maximum score, ascending.
    pub winners: Vec<usize>,
    /// Connection count of the winners.
    pub score: u32,
    /// Full score table when requested.
    pub per_node_scores: Option<Vec<u32>>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MemoryStats {
    pub node_count: usize,
    pub connection_count: usize,
    pub bits_used: usize,
    pub density: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SparseMemory {
    config: CodeConfig,
    /// M*K rows of bit-packed node columns.
    rows: Vec<Vec<u64>>,
    nodes: Vec<NodeMeta>,
    codes: Vec<CompositionalCode>,
}

impl SparseMemory {
    /// A new memory starts with no connections at all.
    pub fn new(config: CodeConfig) -> Self {
        let units = config.code_units();
        Self {
            config,
            rows: vec![Vec::new(); units],
            nodes: Vec::new(),
            codes: Vec::new(),
        }
    }

    pub fn config(&self) -> &CodeConfig {
        &self.config
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node_meta(&self, node: usize) -> &NodeMeta {
        &self.nodes[node]
    }

    pub fn node_code(&self, node: usize) -> &CompositionalCode {
        &self.codes[node]
    }

    pub(crate) fn rows(&self) -> &[Vec<u64>] {
        &self.rows
    }

    pub(crate) fn words_per_row(&self) -> usize {
        self.nodes.len().div_ceil(64)
    }

    fn check_code(&self, code: &CompositionalCode) -> Result<(), SamError> {
        if code.len() != self.config.m() {
            return Err(SamError::ConfigMismatch {
                expected: self.config.m(),
                got: code.len(),
            });
        }
        for (cluster, &index) in code.indices().iter().enumerate() {
            if index as usize >= self.config.k() {
                return Err(SamError::IndexOutOfRange {
                    cluster,
                    index,
                    k: self.config.k(),
                });
            }
        }
        Ok(())
    }

    /// Add a node for `code` and connect it to one neuron per cluster.
    /// Returns the new node id.
    pub fn store(&mut self, code: &CompositionalCode, meta: NodeMeta) -> Result<usize, SamError> {
        self.check_code(code)?;
        let node = self.nodes.len();
        let word = node / 64;
        let bit = 1u64 << (node % 64);
        let k = self.config.k();
        for (cluster, &index) in code.indices().iter().enumerate() {
            let row = &mut self.rows[cluster * k + index as usize];
            if row.len() <= word {
                row.resize(word + 1, 0);
            }
            row[word] |= bit;
        }
        self.nodes.push(meta);
        self.codes.push(code.clone());
        Ok(node)
    }

    /// Like `store`, but an identical (code, meta) pair maps to its existing
    /// node instead of creating a new one.
    pub fn store_dedup(
        &mut self,
        code: &CompositionalCode,
        meta: NodeMeta,
    ) -> Result<usize, SamError> {
        self.check_code(code)?;
        for (id, (c, m)) in self.codes.iter().zip(&self.nodes).enumerate() {
            if c == code && *m == meta {
                return Ok(id);
            }
        }
        self.store(code, meta)
    }

    fn query_scores(&self, query: &QueryPattern) -> Result<Vec<u32>, SamError> {
        if query.active().len() != self.config.m() {
            return Err(SamError::ConfigMismatch {
                expected: self.config.m(),
                got: query.active().len(),
            });
        }
        let k = self.config.k();
        let mut scores = vec![0u32; self.nodes.len()];
        for (cluster, entry) in query.active().iter().enumerate() {
            let Some(index) = entry else { continue };
            if *index as usize >= k {
                return Err(SamError::IndexOutOfRange {
                    cluster,
                    index: *index,
                    k,
                });
            }
            let row = &self.rows[cluster * k + *index as usize];
            for (w, &bits) in row.iter().enumerate() {
                let mut rest = bits;
                while rest != 0 {
                    let node = w * 64 + rest.trailing_zeros() as usize;
                    scores[node] += 1;
                    rest &= rest - 1;
                }
            }
        }
        Ok(scores)
    }

    /// Winner-Takes-All retrieval: every node is scored by its connection
    /// count with the query's active neurons; all maximum-score nodes win.
    pub fn retrieve(
        &self,
        query: &QueryPattern,
        keep_scores: bool,
    ) -> Result<RetrievalResult, SamError> {
        if self.nodes.is_empty() {
            return Err(SamError::EmptyMemory);
        }
        if query.present_count() == 0 {
            return Err(SamError::EmptyQuery);
        }
        let scores = self.query_scores(query)?;
        let best = *scores.iter().max().expect("nonempty");
        let winners: Vec<usize> = scores
            .iter()
            .enumerate()
            .filter(|(_, &s)| s == best)
            .map(|(i, _)| i)
            .collect();
        Ok(RetrievalResult {
            winners,
            score: best,
            per_node_scores: keep_scores.then_some(scores),
        })
    }

    /// For a full query, every node must satisfy score = M - hamming distance
    /// between its code and the query code. Returns false on any violation.
    pub fn score_equivalence_check(&self, query_code: &CompositionalCode) -> Result<bool, SamError> {
        self.check_code(query_code)?;
        let scores = self.query_scores(&QueryPattern::from_code(query_code))?;
        let m = self.config.m() as u32;
        for (code, &score) in self.codes.iter().zip(&scores) {
            let differing = code
                .indices()
                .iter()
                .zip(query_code.indices())
                .filter(|(a, b)| a != b)
                .count() as u32;
            if score != m - differing {
                return Ok(false);
            }
        }
        Ok(true)
    }

    pub fn stats(&self) -> MemoryStats {
        let n = self.nodes.len();
        let connection_count = self.config.m() * n;
        let bits_used = self.config.code_units() * n;
        let density = if n == 0 {
            0.0
        } else {
            connection_count as f64 / bits_used as f64
        };
        MemoryStats {
            node_count: n,
            connection_count,
            bits_used,
            density,
        }
    }

    /// Total set bits, recounted from the packed rows.
    pub fn connection_count(&self) -> usize {
        self.rows
            .iter()
            .flat_map(|r| r.iter())
            .map(|w| w.count_ones() as usize)
            .sum()
    }

    /// Diagnostic dump: `node_id<TAB>lemma<TAB>sense_key<TAB>code` per line.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        for (id, (meta, code)) in self.nodes.iter().zip(&self.codes).enumerate() {
            let code_str = code
                .indices()
                .iter()
                .map(|i| i.to_string())
                .collect::<Vec<_>>()
                .join(" ");
            out.push_str(&format!(
                "{id}\t{}\t{}\t{code_str}\n",
                meta.lemma, meta.sense_key
            ));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cfg(k: usize, m: usize) -> CodeConfig {
        CodeConfig::new(k, m, 4).unwrap()
    }

    fn meta(id: &str) -> NodeMeta {
        NodeMeta {
            instance_id: id.into(),
            lemma: "w".into(),
            sense_key: "s".into(),
        }
    }

    fn code(indices: &[u16], config: &CodeConfig) -> CompositionalCode {
        CompositionalCode::new(indices.to_vec(), config).unwrap()
    }

    fn random_code(config: &CodeConfig, rng: &mut ChaCha8Rng) -> CompositionalCode {
        let idx: Vec<u16> = (0..config.m())
            .map(|_| rng.random_range(0..config.k() as u16))
            .collect();
        CompositionalCode::new(idx, config).unwrap()
    }

    #[test]
    fn first_store_creates_m_connections() {
        let c = cfg(4, 3);
        let mut mem = SparseMemory::new(c);
        assert_eq!(mem.connection_count(), 0);
        let id = mem.store(&code(&[1, 0, 3], &c), meta("a")).unwrap();
        assert_eq!(id, 0);
        assert_eq!(mem.node_count(), 1);
        assert_eq!(mem.connection_count(), 3);
    }

    #[test]
    fn distinct_codes_do_not_share_nodes() {
        let c = cfg(4, 3);
        let mut mem = SparseMemory::new(c);
        mem.store(&code(&[0, 0, 0], &c), meta("a")).unwrap();
        mem.store(&code(&[1, 1, 1], &c), meta("b")).unwrap();
        assert_eq!(mem.node_count(), 2);
        assert_eq!(mem.connection_count(), 6);
    }

    #[test]
    fn stored_nodes_always_have_m_connections() {
        let c = cfg(8, 5);
        let mut mem = SparseMemory::new(c);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for i in 0..100 {
            mem.store(&random_code(&c, &mut rng), meta(&format!("n{i}")))
                .unwrap();
        }
        // Brute-force recount oracle: walk every (neuron, node) bit.
        for node in 0..mem.node_count() {
            let mut count = 0;
            for row in mem.rows() {
                let word = node / 64;
                if row.len() > word && row[word] & (1 << (node % 64)) != 0 {
                    count += 1;
                }
            }
            assert_eq!(count, 5);
        }
    }

    #[test]
    fn dedup_store_is_idempotent() {
        let c = cfg(4, 3);
        let mut mem = SparseMemory::new(c);
        let cd = code(&[2, 1, 0], &c);
        let a = mem.store_dedup(&cd, meta("a")).unwrap();
        let b = mem.store_dedup(&cd, meta("a")).unwrap();
        assert_eq!(a, b);
        assert_eq!(mem.connection_count(), 3);
        // Different meta is a different context and gets its own node.
        let d = mem.store_dedup(&cd, meta("b")).unwrap();
        assert_ne!(a, d);
    }

    #[test]
    fn store_rejects_mismatched_code() {
        let c = cfg(4, 3);
        let other = cfg(4, 2);
        let mut mem = SparseMemory::new(c);
        let err = mem.store(&code(&[0, 0], &other), meta("a")).unwrap_err();
        assert_eq!(err, SamError::ConfigMismatch { expected: 3, got: 2 });
    }

    #[test]
    fn perfect_recall_of_stored_code() {
        let c = cfg(4, 6);
        let mut mem = SparseMemory::new(c);
        let cd = code(&[0, 1, 2, 3, 0, 1], &c);
        let id = mem.store(&cd, meta("a")).unwrap();
        let res = mem.retrieve(&QueryPattern::from_code(&cd), false).unwrap();
        assert_eq!(res.winners, vec![id]);
        assert_eq!(res.score, 6);
    }

    #[test]
    fn partial_query_scores_remaining_entries() {
        let c = cfg(4, 6);
        let mut mem = SparseMemory::new(c);
        let cd = code(&[0, 1, 2, 3, 0, 1], &c);
        let id = mem.store(&cd, meta("a")).unwrap();
        // erase ceil(M/2) = 3 entries
        let q = QueryPattern::from_code(&cd).with_erasures(&[0, 2, 4]).unwrap();
        let res = mem.retrieve(&q, true).unwrap();
        assert_eq!(res.winners, vec![id]);
        assert_eq!(res.score, 3);
        // Brute-force oracle over present entries.
        let scores = res.per_node_scores.unwrap();
        let mut expect = 0;
        for (i, e) in q.active().iter().enumerate() {
            if let Some(v) = e {
                if cd.indices()[i] == *v {
                    expect += 1;
                }
            }
        }
        assert_eq!(scores[id], expect);
    }

    #[test]
    fn disjoint_codes_score_zero() {
        let c = cfg(4, 3);
        let mut mem = SparseMemory::new(c);
        let c1 = code(&[0, 0, 0], &c);
        let c2 = code(&[1, 1, 1], &c);
        let id1 = mem.store(&c1, meta("a")).unwrap();
        mem.store(&c2, meta("b")).unwrap();
        let res = mem.retrieve(&QueryPattern::from_code(&c1), true).unwrap();
        assert_eq!(res.winners, vec![id1]);
        assert_eq!(res.score, 3);
        assert_eq!(res.per_node_scores.unwrap()[1], 0);
    }

    #[test]
    fn retrieve_error_cases() {
        let c = cfg(4, 3);
        let mem = SparseMemory::new(c);
        let q = QueryPattern::from_code(&code(&[0, 0, 0], &c));
        assert_eq!(mem.retrieve(&q, false).unwrap_err(), SamError::EmptyMemory);
        assert_eq!(
            QueryPattern::new(vec![None, None, None]).unwrap_err(),
            SamError::EmptyQuery
        );
    }

    #[test]
    fn score_equivalence_holds_on_random_memories() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let c = cfg(8, 6);
            let mut mem = SparseMemory::new(c);
            for i in 0..rng.random_range(1..200) {
                mem.store(&random_code(&c, &mut rng), meta(&format!("n{i}")))
                    .unwrap();
            }
            let q = random_code(&c, &mut rng);
            assert!(mem.score_equivalence_check(&q).unwrap());
        }
    }

    #[test]
    fn score_equivalence_extremes() {
        let c = cfg(4, 3);
        let mut mem = SparseMemory::new(c);
        let cd = code(&[1, 2, 3], &c);
        mem.store(&cd, meta("a")).unwrap();
        let res = mem.retrieve(&QueryPattern::from_code(&cd), false).unwrap();
        assert_eq!(res.score, 3); // hamming 0
        let opposite = code(&[0, 0, 0], &c);
        let res = mem.retrieve(&QueryPattern::from_code(&opposite), false).unwrap();
        assert_eq!(res.score, 0); // hamming M
        assert!(mem.score_equivalence_check(&cd).unwrap());
        assert!(mem.score_equivalence_check(&opposite).unwrap());
    }

    #[test]
    fn stats_track_nodes_and_density() {
        let c = CodeConfig::new(32, 32, 4).unwrap();
        let mut mem = SparseMemory::new(c);
        let empty = mem.stats();
        assert_eq!(empty.node_count, 0);
        assert_eq!(empty.connection_count, 0);
        assert_eq!(empty.density, 0.0);

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for i in 0..10 {
            mem.store(&random_code(&c, &mut rng), meta(&format!("n{i}")))
                .unwrap();
        }
        let s = mem.stats();
        assert_eq!(s.connection_count, 320);
        assert_eq!(s.bits_used, 32 * 32 * 10);
        assert!((s.density - 1.0 / 32.0).abs() < 1e-12);
    }

    #[test]
    fn erasure_never_increases_scores() {
        let c = cfg(8, 6);
        let mut mem = SparseMemory::new(c);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for i in 0..50 {
            mem.store(&random_code(&c, &mut rng), meta(&format!("n{i}")))
                .unwrap();
        }
        let q = QueryPattern::from_code(&random_code(&c, &mut rng));
        let full = mem.retrieve(&q, true).unwrap().per_node_scores.unwrap();
        let erased = q.with_erasures(&[1, 3]).unwrap();
        let partial = mem.retrieve(&erased, true).unwrap().per_node_scores.unwrap();
        for (f, p) in full.iter().zip(&partial) {
            assert!(p <= f);
        }
    }

    #[test]
    fn dump_format() {
        let c = cfg(4, 3);
        let mut mem = SparseMemory::new(c);
        mem.store(
            &code(&[1, 0, 2], &c),
            NodeMeta {
                instance_id: "i1".into(),
                lemma: "fall".into(),
                sense_key: "fall%1".into(),
            },
        )
        .unwrap();
        assert_eq!(mem.dump(), "0\tfall\tfall%1\t1 0 2\n");
    }
}
