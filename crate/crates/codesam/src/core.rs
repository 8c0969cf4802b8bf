//! Shared domain types: code geometry, context vectors, codes, labeled
//! instances, and the compression-rate arithmetic.

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum CoreError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("empty input")]
    EmptyInput,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("non-finite value at position {0}")]
    NonFinite(usize),
    #[error("code index {index} out of range for K={k} at cluster {cluster}")]
    IndexOutOfRange { cluster: usize, index: u16, k: usize },
}

/// Geometry of a compositional code: `m` clusters of `k` neurons each,
/// encoding vectors of dimension `d`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CodeConfig {
    k: usize,
    m: usize,
    d: usize,
}

impl CodeConfig {
    pub fn new(k: usize, m: usize, d: usize) -> Result<Self, CoreError> {
        if k < 2 {
            return Err(CoreError::InvalidConfig(format!("K must be >= 2, got {k}")));
        }
        if m < 1 {
            return Err(CoreError::InvalidConfig("M must be >= 1".into()));
        }
        if d < 1 {
            return Err(CoreError::InvalidConfig("D must be >= 1".into()));
        }
        if k > u16::MAX as usize + 1 {
            return Err(CoreError::InvalidConfig(format!(
                "K must fit a 16-bit index, got {k}"
            )));
        }
        Ok(Self { k, m, d })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn d(&self) -> usize {
        self.d
    }

    /// Total neurons in the code layer (M * K).
    pub fn code_units(&self) -> usize {
        self.m * self.k
    }

    /// Information-theoretic bits needed to store one code:
    /// `M * ceil(log2 K)`. On-disk codes use 16 bits per cluster instead;
    /// this figure is the one used for compression-rate reporting.
    pub fn bits_per_code(&self) -> usize {
        self.m * ceil_log2(self.k)
    }

    /// Ratio of dense storage (`D * baseline_bits_per_scalar` bits) to
    /// code storage (`bits_per_code` bits).
    pub fn compression_rate(&self, baseline_bits_per_scalar: usize) -> f64 {
        debug_assert!(baseline_bits_per_scalar > 0);
        (self.d * baseline_bits_per_scalar) as f64 / self.bits_per_code() as f64
    }
}

fn ceil_log2(n: usize) -> usize {
    debug_assert!(n >= 2);
    (usize::BITS - (n - 1).leading_zeros()) as usize
}

/// One word-in-context occurrence as a dense vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextVector {
    values: Vec<f32>,
    source_id: String,
}

impl ContextVector {
    pub fn new(values: Vec<f32>, source_id: impl Into<String>) -> Result<Self, CoreError> {
        if values.is_empty() {
            return Err(CoreError::EmptyInput);
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(CoreError::NonFinite(pos));
        }
        Ok(Self {
            values,
            source_id: source_id.into(),
        })
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn source_id(&self) -> &str {
        &self.source_id
    }
}

/// Discrete code: the activated neuron index per cluster.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct CompositionalCode {
    indices: Vec<u16>,
}

impl CompositionalCode {
    pub fn new(indices: Vec<u16>, config: &CodeConfig) -> Result<Self, CoreError> {
        if indices.len() != config.m() {
            return Err(CoreError::DimensionMismatch {
                expected: config.m(),
                got: indices.len(),
            });
        }
        for (cluster, &index) in indices.iter().enumerate() {
            if index as usize >= config.k() {
                return Err(CoreError::IndexOutOfRange {
                    cluster,
                    index,
                    k: config.k(),
                });
            }
        }
        Ok(Self { indices })
    }

    pub fn indices(&self) -> &[u16] {
        &self.indices
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// A labeled training or test occurrence for disambiguation.
#[derive(Debug, Clone)]
pub struct LabeledInstance {
    pub instance_id: String,
    pub lemma: String,
    pub sense_key: String,
    pub vector: ContextVector,
}

impl LabeledInstance {
    pub fn new(
        instance_id: impl Into<String>,
        lemma: impl Into<String>,
        sense_key: impl Into<String>,
        vector: ContextVector,
    ) -> Result<Self, CoreError> {
        let lemma = lemma.into();
        let sense_key = sense_key.into();
        if lemma.is_empty() {
            return Err(CoreError::InvalidConfig("lemma must be non-empty".into()));
        }
        if sense_key.is_empty() {
            return Err(CoreError::InvalidConfig("sense_key must be non-empty".into()));
        }
        Ok(Self {
            instance_id: instance_id.into(),
            lemma,
            sense_key,
            vector,
        })
    }
}

/// Element-wise arithmetic mean of a nonempty set of same-dimension vectors.
/// Used to build one representation for composed words from the embeddings of
/// their parts.
pub fn average_vectors(vectors: &[ContextVector]) -> Result<ContextVector, CoreError> {
    let first = vectors.first().ok_or(CoreError::EmptyInput)?;
    let dim = first.dim();
    let mut acc = vec![0.0f64; dim];
    for v in vectors {
        if v.dim() != dim {
            return Err(CoreError::DimensionMismatch {
                expected: dim,
                got: v.dim(),
            });
        }
        for (a, &x) in acc.iter_mut().zip(v.values()) {
            *a += x as f64;
        }
    }
    let n = vectors.len() as f64;
    let mean: Vec<f32> = acc.into_iter().map(|a| (a / n) as f32).collect();
    ContextVector::new(mean, first.source_id())
}
