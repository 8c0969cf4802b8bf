//! End-to-end disambiguation: per-lemma memories built from encoded training
//! instances, classification by WTA retrieval, micro-F1 evaluation.

use crate::codec::{CodecError, CodecModel};
use crate::core::{CompositionalCode, ContextVector, CoreError, LabeledInstance};
use crate::sam::{NodeMeta, QueryPattern, SamError, SparseMemory};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum WsdError {
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Sam(#[from] SamError),
    #[error(transparent)]
    Core(#[from] CoreError),
    #[error("empty input")]
    EmptyInput,
}

/// Number of clusters whose activated indices differ.
pub fn hamming(a: &CompositionalCode, b: &CompositionalCode) -> Result<usize, WsdError> {
    if a.len() != b.len() {
        return Err(SamError::ConfigMismatch {
            expected: a.len(),
            got: b.len(),
        }
        .into());
    }
    Ok(a.indices()
        .iter()
        .zip(b.indices())
        .filter(|(x, y)| x != y)
        .count())
}

/// How a prediction was decided.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Provenance {
    /// Single WTA winner.
    Retrieved,
    /// Several winners; resolved by majority, then frequency, then sense key.
    TieMajority,
    /// Lemma unseen at training time; most-frequent-sense fallback.
    LemmaFallback,
    /// Nothing to predict from (empty index).
    Abstain,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Prediction {
    pub instance_id: String,
    /// `None` only when the provenance is `Abstain`.
    pub sense_key: Option<String>,
    pub provenance: Provenance,
}

/// Per-lemma sparse memories plus sense frequency tables.
/// BTreeMaps keep every walk order deterministic.
#[derive(Debug, Clone)]
pub struct LemmaIndex {
    memories: BTreeMap<String, SparseMemory>,
    global_freq: BTreeMap<String, usize>,
    lemma_freq: BTreeMap<String, BTreeMap<String, usize>>,
}

impl LemmaIndex {
    pub fn is_empty(&self) -> bool {
        self.memories.is_empty()
    }

    pub fn lemmas(&self) -> impl Iterator<Item = &str> {
        self.memories.keys().map(String::as_str)
    }

    pub fn memory(&self, lemma: &str) -> Option<&SparseMemory> {
        self.memories.get(lemma)
    }

    pub fn memories(&self) -> impl Iterator<Item = (&str, &SparseMemory)> {
        self.memories.iter().map(|(l, m)| (l.as_str(), m))
    }

    pub(crate) fn from_parts(memories: BTreeMap<String, SparseMemory>) -> Self {
        let mut index = Self {
            memories: BTreeMap::new(),
            global_freq: BTreeMap::new(),
            lemma_freq: BTreeMap::new(),
        };
        for (lemma, mem) in memories {
            for node in 0..mem.node_count() {
                let sense = mem.node_meta(node).sense_key.clone();
                index.count_sense(&lemma, &sense);
            }
            index.memories.insert(lemma, mem);
        }
        index
    }

    fn count_sense(&mut self, lemma: &str, sense: &str) {
        *self.global_freq.entry(sense.to_string()).or_default() += 1;
        *self
            .lemma_freq
            .entry(lemma.to_string())
            .or_default()
            .entry(sense.to_string())
            .or_default() += 1;
    }

    fn lemma_sense_freq(&self, lemma: &str, sense: &str) -> usize {
        self.lemma_freq
            .get(lemma)
            .and_then(|t| t.get(sense))
            .copied()
            .unwrap_or(0)
    }

    /// Most frequent sense in a table; frequency ties break to the
    /// lexicographically smallest key.
    fn most_frequent(table: &BTreeMap<String, usize>) -> Option<&str> {
        table
            .iter()
            .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
            .map(|(k, _)| k.as_str())
    }
}

/// Encode every training instance and store it in its lemma's memory.
pub fn build_index(
    train: &[LabeledInstance],
    codec: &CodecModel,
) -> Result<LemmaIndex, WsdError> {
    let mut index = LemmaIndex {
        memories: BTreeMap::new(),
        global_freq: BTreeMap::new(),
        lemma_freq: BTreeMap::new(),
    };
    for inst in train {
        let code = codec.encode_hard(&inst.vector)?;
        let mem = index
            .memories
            .entry(inst.lemma.clone())
            .or_insert_with(|| SparseMemory::new(*codec.config()));
        mem.store(
            &code,
            NodeMeta {
                instance_id: inst.instance_id.clone(),
                lemma: inst.lemma.clone(),
                sense_key: inst.sense_key.clone(),
            },
        )?;
        index.count_sense(&inst.lemma, &inst.sense_key);
    }
    Ok(index)
}

/// Predict the sense of one occurrence.
pub fn classify(
    index: &LemmaIndex,
    lemma: &str,
    vector: &ContextVector,
    codec: &CodecModel,
) -> Result<Prediction, WsdError> {
    let instance_id = vector.source_id().to_string();
    if index.is_empty() {
        return Ok(Prediction {
            instance_id,
            sense_key: None,
            provenance: Provenance::Abstain,
        });
    }
    let code = codec.encode_hard(vector)?;
    if let Some(mem) = index.memory(lemma) {
        let result = mem.retrieve(&QueryPattern::from_code(&code), false)?;
        if result.winners.len() == 1 {
            return Ok(Prediction {
                instance_id,
                sense_key: Some(mem.node_meta(result.winners[0]).sense_key.clone()),
                provenance: Provenance::Retrieved,
            });
        }
        // Majority sense among winners, then per-lemma training frequency,
        // then lexicographic sense key.
        let mut votes: BTreeMap<&str, usize> = BTreeMap::new();
        for &w in &result.winners {
            *votes.entry(&mem.node_meta(w).sense_key).or_default() += 1;
        }
        let sense = votes
            .iter()
            .max_by(|a, b| {
                a.1.cmp(b.1)
                    .then_with(|| {
                        index
                            .lemma_sense_freq(lemma, a.0)
                            .cmp(&index.lemma_sense_freq(lemma, b.0))
                    })
                    .then(b.0.cmp(a.0))
            })
            .map(|(s, _)| s.to_string())
            .expect("winner set nonempty");
        return Ok(Prediction {
            instance_id,
            sense_key: Some(sense),
            provenance: Provenance::TieMajority,
        });
    }
    // Unseen lemma: per-lemma most frequent sense if the lemma is known to
    // the frequency table, else the global most frequent sense.
    let sense = index
        .lemma_freq
        .get(lemma)
        .and_then(LemmaIndex::most_frequent)
        .or_else(|| LemmaIndex::most_frequent(&index.global_freq))
        .expect("nonempty index has frequencies")
        .to_string();
    Ok(Prediction {
        instance_id,
        sense_key: Some(sense),
        provenance: Provenance::LemmaFallback,
    })
}

/// Micro-averaged evaluation report.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
    pub total: usize,
    pub predicted: usize,
    pub correct: usize,
    pub retrieved: usize,
    pub tie_majority: usize,
    pub lemma_fallback: usize,
    pub abstained: usize,
    pub predictions: Vec<Prediction>,
}

/// Classify every test instance and micro-average the outcome.
pub fn evaluate(
    index: &LemmaIndex,
    codec: &CodecModel,
    test: &[LabeledInstance],
) -> Result<EvalReport, WsdError> {
    if test.is_empty() {
        return Err(WsdError::EmptyInput);
    }
    let mut predictions = Vec::with_capacity(test.len());
    for inst in test {
        let mut p = classify(index, &inst.lemma, &inst.vector, codec)?;
        p.instance_id = inst.instance_id.clone();
        predictions.push(p);
    }
    Ok(tally_report(test, predictions))
}

/// Micro-average an already-computed prediction list against its test set.
/// Pure counting, so the result is independent of how the predictions were
/// produced or ordered across workers.
pub fn tally_report(test: &[LabeledInstance], predictions: Vec<Prediction>) -> EvalReport {
    let mut correct = 0usize;
    let mut predicted = 0usize;
    let mut counts = [0usize; 4];
    for (inst, pred) in test.iter().zip(&predictions) {
        match pred.provenance {
            Provenance::Retrieved => counts[0] += 1,
            Provenance::TieMajority => counts[1] += 1,
            Provenance::LemmaFallback => counts[2] += 1,
            Provenance::Abstain => counts[3] += 1,
        }
        if let Some(sense) = &pred.sense_key {
            predicted += 1;
            if *sense == inst.sense_key {
                correct += 1;
            }
        }
    }
    let total = test.len();
    let precision = if predicted == 0 {
        0.0
    } else {
        correct as f64 / predicted as f64
    };
    let recall = correct as f64 / total as f64;
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    EvalReport {
        f1,
        precision,
        recall,
        total,
        predicted,
        correct,
        retrieved: counts[0],
        tie_majority: counts[1],
        lemma_fallback: counts[2],
        abstained: counts[3],
        predictions,
    }
}
