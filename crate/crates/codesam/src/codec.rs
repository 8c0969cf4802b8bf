//! Discrete autoencoder mapping context vectors to compositional codes.
//!
//! Architecture: affine D -> H, tanh, affine H -> M*K logits, per-cluster
//! Gumbel-softmax, affine M*K -> H', tanh, affine H' -> D. Training minimizes
//! mean squared reconstruction error through the soft relaxation; inference
//! discards the decoder and takes the per-cluster argmax of the noiseless
//! logits.
//!
//! Weights are stored as f32 (matching the on-disk model format exactly) and
//! all arithmetic runs in f64, so a saved-and-reloaded model computes
//! bit-identical codes.

use crate::core::{CodeConfig, CompositionalCode, ContextVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum CodecError {
    #[error("invalid temperature {0}, tau must be > 0")]
    InvalidTemperature(f64),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("empty input")]
    EmptyInput,
    #[error("training diverged at epoch {epoch}")]
    Diverged { epoch: usize },
    #[error("invalid training config: {0}")]
    InvalidTrainConfig(String),
}

/// Supplies the Gumbel(0,1) draws added to the logits. Injectable so tests
/// can zero or pin the noise.
pub trait NoiseSource {
    fn fill(&mut self, out: &mut [f64]);
}

/// No noise: the relaxation degenerates to a plain tempered softmax.
pub struct ZeroNoise;

impl NoiseSource for ZeroNoise {
    fn fill(&mut self, out: &mut [f64]) {
        out.fill(0.0);
    }
}

/// Seeded Gumbel(0,1) sampler: -ln(-ln(u)), u ~ Uniform(0,1).
pub struct GumbelNoise {
    rng: ChaCha8Rng,
}

impl GumbelNoise {
    pub fn seeded(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    fn from_rng(rng: &mut ChaCha8Rng) -> f64 {
        let u: f64 = loop {
            let u = rng.random::<f64>();
            if u > 0.0 {
                break u;
            }
        };
        -(-u.ln()).ln()
    }
}

impl NoiseSource for GumbelNoise {
    fn fill(&mut self, out: &mut [f64]) {
        for v in out.iter_mut() {
            *v = Self::from_rng(&mut self.rng);
        }
    }
}

/// softmax((logits + noise) / tau) over one cluster.
pub fn gumbel_softmax(logits: &[f64], tau: f64, noise: &[f64]) -> Result<Vec<f64>, CodecError> {
    if tau <= 0.0 || !tau.is_finite() {
        return Err(CodecError::InvalidTemperature(tau));
    }
    if noise.len() != logits.len() {
        return Err(CodecError::DimensionMismatch {
            expected: logits.len(),
            got: noise.len(),
        });
    }
    let scaled: Vec<f64> = logits
        .iter()
        .zip(noise)
        .map(|(&l, &g)| (l + g) / tau)
        .collect();
    Ok(softmax(&scaled))
}

fn softmax(z: &[f64]) -> Vec<f64> {
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = z.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Per-dimension standardization statistics, stored in the model so encoding
/// and decoding are self-contained.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardization {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

/// Encoder/decoder weights plus the code geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct CodecModel {
    config: CodeConfig,
    hidden_enc: usize,
    hidden_dec: usize,
    // row-major: w1 is H x D, w2 is (M*K) x H, w3 is H' x (M*K), w4 is D x H'
    w1: Vec<f32>,
    b1: Vec<f32>,
    w2: Vec<f32>,
    b2: Vec<f32>,
    w3: Vec<f32>,
    b3: Vec<f32>,
    w4: Vec<f32>,
    b4: Vec<f32>,
    standardization: Option<Standardization>,
}

/// Hyperparameters for `CodecModel::train`.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Gumbel-softmax temperature (initial value when annealing).
    pub tau: f64,
    /// Exponential anneal from `tau` down to 0.1 over the epochs.
    pub anneal: bool,
    pub momentum: f64,
    pub seed: u64,
    /// Fit per-dimension mean/std on the training data and standardize inputs.
    pub standardize: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 32,
            epochs: 50,
            tau: 1.0,
            anneal: false,
            momentum: 0.9,
            seed: 42,
            standardize: false,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<(), CodecError> {
        if !(self.learning_rate > 0.0) {
            return Err(CodecError::InvalidTrainConfig(
                "learning_rate must be > 0".into(),
            ));
        }
        if self.batch_size == 0 {
            return Err(CodecError::InvalidTrainConfig("batch_size must be > 0".into()));
        }
        if !(self.tau > 0.0) {
            return Err(CodecError::InvalidTemperature(self.tau));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(CodecError::InvalidTrainConfig(
                "momentum must be in [0, 1)".into(),
            ));
        }
        Ok(())
    }

    fn tau_at_epoch(&self, epoch: usize) -> f64 {
        if !self.anneal || self.epochs <= 1 {
            return self.tau;
        }
        let end: f64 = 0.1_f64.min(self.tau);
        let t = epoch as f64 / (self.epochs - 1) as f64;
        self.tau * (end / self.tau).powf(t)
    }
}

/// Gradients for every parameter tensor, same layout as the model.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
    pub w3: Vec<f64>,
    pub b3: Vec<f64>,
    pub w4: Vec<f64>,
    pub b4: Vec<f64>,
}

impl Gradients {
    fn zeros(model: &CodecModel) -> Self {
        Self {
            w1: vec![0.0; model.w1.len()],
            b1: vec![0.0; model.b1.len()],
            w2: vec![0.0; model.w2.len()],
            b2: vec![0.0; model.b2.len()],
            w3: vec![0.0; model.w3.len()],
            b3: vec![0.0; model.b3.len()],
            w4: vec![0.0; model.w4.len()],
            b4: vec![0.0; model.b4.len()],
        }
    }

    fn tensors(&self) -> [&[f64]; 8] {
        [
            &self.w1, &self.b1, &self.w2, &self.b2, &self.w3, &self.b3, &self.w4, &self.b4,
        ]
    }

    fn scale(&mut self, s: f64) {
        for t in [
            &mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2, &mut self.w3, &mut self.b3,
            &mut self.w4, &mut self.b4,
        ] {
            for v in t.iter_mut() {
                *v *= s;
            }
        }
    }

    fn add(&mut self, other: &Gradients) {
        for (dst, src) in [
            (&mut self.w1, &other.w1),
            (&mut self.b1, &other.b1),
            (&mut self.w2, &other.w2),
            (&mut self.b2, &other.b2),
            (&mut self.w3, &other.w3),
            (&mut self.b3, &other.b3),
            (&mut self.w4, &other.w4),
            (&mut self.b4, &other.b4),
        ] {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += s;
            }
        }
    }

    pub fn norm(&self) -> f64 {
        self.tensors()
            .iter()
            .flat_map(|t| t.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }
}

struct Forward {
    input_std: Vec<f64>, // standardized encoder input
    h1: Vec<f64>,
    activations: Vec<f64>, // M*K relaxed code layer
    h2: Vec<f64>,
    output: Vec<f64>, // reconstruction in original space
}

fn affine(w: &[f32], b: &[f32], x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    debug_assert_eq!(x.len(), cols);
    debug_assert_eq!(w.len(), rows * cols);
    let mut out = Vec::with_capacity(rows);
    for r in 0..rows {
        let row = &w[r * cols..(r + 1) * cols];
        let mut acc = b[r] as f64;
        for (wv, xv) in row.iter().zip(x) {
            acc += *wv as f64 * xv;
        }
        out.push(acc);
    }
    out
}

/// out[c] += sum_r w[r][c] * dy[r]
fn affine_transpose_acc(w: &[f32], dy: &[f64], rows: usize, cols: usize, out: &mut [f64]) {
    for r in 0..rows {
        let row = &w[r * cols..(r + 1) * cols];
        let d = dy[r];
        for (o, wv) in out.iter_mut().zip(row) {
            *o += *wv as f64 * d;
        }
    }
}

impl CodecModel {
    /// Default hidden width: M*K/2 rounded up, floored at D/2 rounded up.
    pub fn default_hidden(config: &CodeConfig) -> usize {
        let half_code = config.code_units().div_ceil(2);
        let half_dim = config.d().div_ceil(2);
        half_code.max(half_dim)
    }

    pub fn new(config: CodeConfig, hidden: Option<usize>, seed: u64) -> Self {
        let h = hidden.unwrap_or_else(|| Self::default_hidden(&config));
        let d = config.d();
        let mk = config.code_units();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = |rows: usize, cols: usize| -> Vec<f32> {
            let a = (6.0 / (rows + cols) as f64).sqrt();
            (0..rows * cols)
                .map(|_| rng.random_range(-a..a) as f32)
                .collect()
        };
        Self {
            w1: init(h, d),
            b1: vec![0.0; h],
            w2: init(mk, h),
            b2: vec![0.0; mk],
            w3: init(h, mk),
            b3: vec![0.0; h],
            w4: init(d, h),
            b4: vec![0.0; d],
            config,
            hidden_enc: h,
            hidden_dec: h,
        // standardization is fitted during training when requested
            standardization: None,
        }
    }

    pub fn config(&self) -> &CodeConfig {
        &self.config
    }

    pub fn hidden_enc(&self) -> usize {
        self.hidden_enc
    }

    pub fn hidden_dec(&self) -> usize {
        self.hidden_dec
    }

    pub fn standardization(&self) -> Option<&Standardization> {
        self.standardization.as_ref()
    }

    pub fn set_standardization(&mut self, s: Option<Standardization>) {
        self.standardization = s;
    }

    pub(crate) fn from_parts(
        config: CodeConfig,
        hidden_enc: usize,
        hidden_dec: usize,
        weights: [Vec<f32>; 8],
        standardization: Option<Standardization>,
    ) -> Self {
        let [w1, b1, w2, b2, w3, b3, w4, b4] = weights;
        Self {
            config,
            hidden_enc,
            hidden_dec,
            w1,
            b1,
            w2,
            b2,
            w3,
            b3,
            w4,
            b4,
            standardization,
        }
    }

    pub(crate) fn weight_tensors(&self) -> [&[f32]; 8] {
        [
            &self.w1, &self.b1, &self.w2, &self.b2, &self.w3, &self.b3, &self.w4, &self.b4,
        ]
    }

    fn weight_tensors_mut(&mut self) -> [&mut Vec<f32>; 8] {
        [
            &mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2, &mut self.w3, &mut self.b3,
            &mut self.w4, &mut self.b4,
        ]
    }

    fn check_dim(&self, x: &ContextVector) -> Result<(), CodecError> {
        if x.dim() != self.config.d() {
            return Err(CodecError::DimensionMismatch {
                expected: self.config.d(),
                got: x.dim(),
            });
        }
        Ok(())
    }

    fn standardized(&self, x: &ContextVector) -> Vec<f64> {
        match &self.standardization {
            None => x.values().iter().map(|&v| v as f64).collect(),
            Some(s) => x
                .values()
                .iter()
                .zip(s.mean.iter().zip(&s.std))
                .map(|(&v, (&mu, &sd))| (v as f64 - mu as f64) / sd as f64)
                .collect(),
        }
    }

    fn logits(&self, input_std: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let h = self.hidden_enc;
        let d = self.config.d();
        let mk = self.config.code_units();
        let mut h1 = affine(&self.w1, &self.b1, input_std, h, d);
        for v in h1.iter_mut() {
            *v = v.tanh();
        }
        let logits = affine(&self.w2, &self.b2, &h1, mk, h);
        (h1, logits)
    }

    /// Relaxed encoding: one Gumbel-softmax row of K activations per cluster.
    pub fn encode_soft(
        &self,
        x: &ContextVector,
        tau: f64,
        noise: &mut dyn NoiseSource,
    ) -> Result<Vec<Vec<f64>>, CodecError> {
        self.check_dim(x)?;
        let input = self.standardized(x);
        let (_, logits) = self.logits(&input);
        let k = self.config.k();
        let mut g = vec![0.0; self.config.code_units()];
        noise.fill(&mut g);
        logits
            .chunks(k)
            .zip(g.chunks(k))
            .map(|(l, n)| gumbel_softmax(l, tau, n))
            .collect()
    }

    /// Discrete encoding: per-cluster argmax of the noiseless logits.
    /// Ties break to the lowest index.
    pub fn encode_hard(&self, x: &ContextVector) -> Result<CompositionalCode, CodecError> {
        self.check_dim(x)?;
        let input = self.standardized(x);
        let (_, logits) = self.logits(&input);
        let k = self.config.k();
        let indices: Vec<u16> = logits
            .chunks(k)
            .map(|cluster| {
                let mut best = 0usize;
                for (i, &v) in cluster.iter().enumerate().skip(1) {
                    if v > cluster[best] {
                        best = i;
                    }
                }
                best as u16
            })
            .collect();
        Ok(CompositionalCode::new(indices, &self.config).expect("argmax indices in range"))
    }

    /// Reconstruct a vector from M rows of K activations (relaxed or one-hot).
    pub fn decode(&self, activations: &[Vec<f64>]) -> Result<ContextVector, CodecError> {
        if activations.len() != self.config.m() {
            return Err(CodecError::DimensionMismatch {
                expected: self.config.m(),
                got: activations.len(),
            });
        }
        let mut flat = Vec::with_capacity(self.config.code_units());
        for row in activations {
            if row.len() != self.config.k() {
                return Err(CodecError::DimensionMismatch {
                    expected: self.config.k(),
                    got: row.len(),
                });
            }
            flat.extend_from_slice(row);
        }
        let out = self.decode_flat(&flat);
        Ok(ContextVector::new(out.iter().map(|&v| v as f32).collect(), "reconstruction")
            .expect("finite reconstruction"))
    }

    /// Decode a full compositional code via its one-hot activations.
    pub fn decode_code(&self, code: &CompositionalCode) -> Result<ContextVector, CodecError> {
        let k = self.config.k();
        let rows: Vec<Vec<f64>> = code
            .indices()
            .iter()
            .map(|&i| {
                let mut row = vec![0.0; k];
                row[i as usize] = 1.0;
                row
            })
            .collect();
        self.decode(&rows)
    }

    fn decode_flat(&self, activations: &[f64]) -> Vec<f64> {
        let hp = self.hidden_dec;
        let d = self.config.d();
        let mk = self.config.code_units();
        let mut h2 = affine(&self.w3, &self.b3, activations, hp, mk);
        for v in h2.iter_mut() {
            *v = v.tanh();
        }
        let mut y = affine(&self.w4, &self.b4, &h2, d, hp);
        if let Some(s) = &self.standardization {
            for (v, (&mu, &sd)) in y.iter_mut().zip(s.mean.iter().zip(&s.std)) {
                *v = *v * sd as f64 + mu as f64;
            }
        }
        y
    }

    fn forward(&self, x: &ContextVector, tau: f64, noise: &[f64]) -> Result<Forward, CodecError> {
        self.check_dim(x)?;
        let input_std = self.standardized(x);
        let (h1, logits) = self.logits(&input_std);
        let k = self.config.k();
        let mut activations = Vec::with_capacity(self.config.code_units());
        for (l, n) in logits.chunks(k).zip(noise.chunks(k)) {
            activations.extend(gumbel_softmax(l, tau, n)?);
        }
        let hp = self.hidden_dec;
        let mut h2 = affine(&self.w3, &self.b3, &activations, hp, self.config.code_units());
        for v in h2.iter_mut() {
            *v = v.tanh();
        }
        let mut output = affine(&self.w4, &self.b4, &h2, self.config.d(), hp);
        if let Some(s) = &self.standardization {
            for (v, (&mu, &sd)) in output.iter_mut().zip(s.mean.iter().zip(&s.std)) {
                *v = *v * sd as f64 + mu as f64;
            }
        }
        Ok(Forward {
            input_std,
            h1,
            activations,
            h2,
            output,
        })
    }

    fn sample_loss(x: &ContextVector, output: &[f64]) -> f64 {
        let d = output.len() as f64;
        x.values()
            .iter()
            .zip(output)
            .map(|(&xv, &yv)| {
                let e = yv - xv as f64;
                e * e
            })
            .sum::<f64>()
            / d
    }

    /// Mean over the batch of the per-vector mean squared reconstruction
    /// error, through the soft relaxation.
    pub fn reconstruction_loss(
        &self,
        batch: &[ContextVector],
        tau: f64,
        noise: &mut dyn NoiseSource,
    ) -> Result<f64, CodecError> {
        if batch.is_empty() {
            return Err(CodecError::EmptyInput);
        }
        let mut total = 0.0;
        let mut g = vec![0.0; self.config.code_units()];
        for x in batch {
            noise.fill(&mut g);
            let fwd = self.forward(x, tau, &g)?;
            total += Self::sample_loss(x, &fwd.output);
        }
        Ok(total / batch.len() as f64)
    }

    /// Loss and analytic gradients for one sample with pinned noise.
    /// `loss_scale` multiplies the loss (and therefore every gradient).
    pub fn loss_and_gradients(
        &self,
        x: &ContextVector,
        tau: f64,
        noise: &[f64],
        loss_scale: f64,
    ) -> Result<(f64, Gradients), CodecError> {
        let fwd = self.forward(x, tau, noise)?;
        let mut grads = Gradients::zeros(self);
        let loss = loss_scale * Self::sample_loss(x, &fwd.output);
        self.backward(x, tau, &fwd, loss_scale, &mut grads);
        Ok((loss, grads))
    }

    fn backward(
        &self,
        x: &ContextVector,
        tau: f64,
        fwd: &Forward,
        loss_scale: f64,
        grads: &mut Gradients,
    ) {
        let d = self.config.d();
        let h = self.hidden_enc;
        let hp = self.hidden_dec;
        let mk = self.config.code_units();
        let k = self.config.k();

        // dL/dy in pre-destandardization space
        let mut dy = vec![0.0; d];
        for i in 0..d {
            let e = fwd.output[i] - x.values()[i] as f64;
            let sd = self
                .standardization
                .as_ref()
                .map_or(1.0, |s| s.std[i] as f64);
            dy[i] = loss_scale * 2.0 / d as f64 * e * sd;
        }

        // output layer: y = w4 h2 + b4
        for r in 0..d {
            let g = dy[r];
            grads.b4[r] += g;
            let row = &mut grads.w4[r * hp..(r + 1) * hp];
            for (gw, h2v) in row.iter_mut().zip(&fwd.h2) {
                *gw += g * h2v;
            }
        }
        let mut dh2 = vec![0.0; hp];
        affine_transpose_acc(&self.w4, &dy, d, hp, &mut dh2);
        for (v, h2v) in dh2.iter_mut().zip(&fwd.h2) {
            *v *= 1.0 - h2v * h2v;
        }

        // decoder hidden: z2 = w3 a + b3
        for r in 0..hp {
            let g = dh2[r];
            grads.b3[r] += g;
            let row = &mut grads.w3[r * mk..(r + 1) * mk];
            for (gw, av) in row.iter_mut().zip(&fwd.activations) {
                *gw += g * av;
            }
        }
        let mut da = vec![0.0; mk];
        affine_transpose_acc(&self.w3, &dh2, hp, mk, &mut da);

        // softmax jacobian per cluster: dl_i = a_i (da_i - sum_j a_j da_j) / tau
        let mut dlogits = vec![0.0; mk];
        for c in 0..self.config.m() {
            let a = &fwd.activations[c * k..(c + 1) * k];
            let dac = &da[c * k..(c + 1) * k];
            let dot: f64 = a.iter().zip(dac).map(|(av, dv)| av * dv).sum();
            for i in 0..k {
                dlogits[c * k + i] = a[i] * (dac[i] - dot) / tau;
            }
        }

        // logits layer: l = w2 h1 + b2
        for r in 0..mk {
            let g = dlogits[r];
            grads.b2[r] += g;
            let row = &mut grads.w2[r * h..(r + 1) * h];
            for (gw, h1v) in row.iter_mut().zip(&fwd.h1) {
                *gw += g * h1v;
            }
        }
        let mut dh1 = vec![0.0; h];
        affine_transpose_acc(&self.w2, &dlogits, mk, h, &mut dh1);
        for (v, h1v) in dh1.iter_mut().zip(&fwd.h1) {
            *v *= 1.0 - h1v * h1v;
        }

        // encoder hidden: z1 = w1 x_std + b1
        for r in 0..h {
            let g = dh1[r];
            grads.b1[r] += g;
            let row = &mut grads.w1[r * d..(r + 1) * d];
            for (gw, xv) in row.iter_mut().zip(&fwd.input_std) {
                *gw += g * xv;
            }
        }
    }

    /// Train in place with SGD + momentum. Returns the per-epoch mean loss
    /// trace. Single-threaded and bit-reproducible under a fixed seed.
    pub fn train(
        &mut self,
        data: &[ContextVector],
        cfg: &TrainConfig,
    ) -> Result<Vec<f64>, CodecError> {
        if data.is_empty() {
            return Err(CodecError::EmptyInput);
        }
        cfg.validate()?;
        for x in data {
            self.check_dim(x)?;
        }
        if cfg.epochs == 0 {
            return Ok(Vec::new());
        }
        if cfg.standardize {
            self.standardization = Some(fit_standardization(data));
        }

        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mk = self.config.code_units();
        let mut velocity = Gradients::zeros(self);
        let mut trace = Vec::with_capacity(cfg.epochs);
        let mut order: Vec<usize> = (0..data.len()).collect();
        let mut noise_buf = vec![0.0; mk];

        for epoch in 0..cfg.epochs {
            let tau = cfg.tau_at_epoch(epoch);
            shuffle(&mut order, &mut rng);
            let mut epoch_loss = 0.0;
            for batch in order.chunks(cfg.batch_size) {
                let mut batch_grads = Gradients::zeros(self);
                let mut batch_loss = 0.0;
                for &i in batch {
                    for v in noise_buf.iter_mut() {
                        *v = GumbelNoise::from_rng(&mut rng);
                    }
                    let (loss, grads) =
                        self.loss_and_gradients(&data[i], tau, &noise_buf, 1.0)?;
                    batch_loss += loss;
                    batch_grads.add(&grads);
                }
                let inv = 1.0 / batch.len() as f64;
                batch_grads.scale(inv);
                batch_loss *= inv;
                if !batch_loss.is_finite() {
                    return Err(CodecError::Diverged { epoch });
                }
                epoch_loss += batch_loss * batch.len() as f64;
                self.apply_update(&mut velocity, &batch_grads, cfg);
            }
            epoch_loss /= data.len() as f64;
            if !epoch_loss.is_finite() {
                return Err(CodecError::Diverged { epoch });
            }
            log::debug!("epoch {epoch}: loss {epoch_loss:.9e} tau {tau:.4}");
            trace.push(epoch_loss);
        }
        Ok(trace)
    }

    fn apply_update(&mut self, velocity: &mut Gradients, grads: &Gradients, cfg: &TrainConfig) {
        let lr = cfg.learning_rate;
        let mom = cfg.momentum;
        let vel = [
            &mut velocity.w1, &mut velocity.b1, &mut velocity.w2, &mut velocity.b2,
            &mut velocity.w3, &mut velocity.b3, &mut velocity.w4, &mut velocity.b4,
        ];
        let grd = grads.tensors();
        for ((w, v), g) in self.weight_tensors_mut().into_iter().zip(vel).zip(grd) {
            for i in 0..w.len() {
                v[i] = mom * v[i] + g[i];
                w[i] = (w[i] as f64 - lr * v[i]) as f32;
            }
        }
    }

    /// Compare analytic gradients with central finite differences (step 1e-5)
    /// over up to `samples` weights per tensor, with pinned noise. Returns the
    /// max relative error.
    pub fn gradient_check(
        &mut self,
        x: &ContextVector,
        tau: f64,
        fixed_noise: &[f64],
        samples_per_tensor: usize,
    ) -> Result<f64, CodecError> {
        let (_, analytic) = self.loss_and_gradients(x, tau, fixed_noise, 1.0)?;
        let step = 1e-5;
        let mut max_rel = 0.0f64;
        for t in 0..8 {
            let len = self.weight_tensors()[t].len();
            let stride = (len / samples_per_tensor).max(1);
            for i in (0..len).step_by(stride) {
                let orig = self.weight_tensors()[t][i];
                let wp = (orig as f64 + step) as f32;
                let wm = (orig as f64 - step) as f32;

                self.weight_tensors_mut()[t][i] = wp;
                let (lp, _) = self.loss_and_gradients(x, tau, fixed_noise, 1.0)?;
                self.weight_tensors_mut()[t][i] = wm;
                let (lm, _) = self.loss_and_gradients(x, tau, fixed_noise, 1.0)?;
                self.weight_tensors_mut()[t][i] = orig;

                let fd = (lp - lm) / (wp as f64 - wm as f64);
                let a = analytic.tensors()[t][i];
                let rel = (a - fd).abs() / (a.abs() + fd.abs()).max(1e-8);
                max_rel = max_rel.max(rel);
            }
        }
        Ok(max_rel)
    }
}

fn fit_standardization(data: &[ContextVector]) -> Standardization {
    let d = data[0].dim();
    let n = data.len() as f64;
    let mut mean = vec![0.0f64; d];
    for x in data {
        for (m, &v) in mean.iter_mut().zip(x.values()) {
            *m += v as f64;
        }
    }
    for m in mean.iter_mut() {
        *m /= n;
    }
    let mut var = vec![0.0f64; d];
    for x in data {
        for ((s, &v), &m) in var.iter_mut().zip(x.values()).zip(&mean) {
            let e = v as f64 - m;
            *s += e * e;
        }
    }
    let std: Vec<f32> = var
        .into_iter()
        .map(|s| ((s / n).sqrt().max(1e-6)) as f32)
        .collect();
    Standardization {
        mean: mean.into_iter().map(|m| m as f32).collect(),
        std,
    }
}

// Fisher-Yates with our own RNG so the visit order is pinned by the seed.
fn shuffle(order: &mut [usize], rng: &mut ChaCha8Rng) {
    for i in (1..order.len()).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
}
