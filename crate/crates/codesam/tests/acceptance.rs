//! Acceptance suite. Each test checks one release criterion at its pinned
//! tolerance and prints a pass line (visible with `--nocapture`):
//!
//!   cargo test -p codesam --test acceptance -- --nocapture

use codesam::codec::{gumbel_softmax, CodecModel, GumbelNoise, TrainConfig};
use codesam::core::{CodeConfig, CompositionalCode, ContextVector, LabeledInstance};
use codesam::io;
use codesam::sam::{NodeMeta, QueryPattern, SparseMemory};
use codesam::wsd;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use std::path::Path;
use std::sync::OnceLock;
use tempfile::TempDir;

// ---------------------------------------------------------------------------
// criterion 1: compression-rate exactness
// ---------------------------------------------------------------------------

#[test]
fn criterion_1_compression_rate_exactness() {
    let rate = |k, m| {
        let cfg = CodeConfig::new(k, m, 1024).unwrap();
        (cfg.compression_rate(32) * 10.0).round() / 10.0
    };
    assert!(rate(64, 128) == 42.6 || rate(64, 128) == 42.7);
    assert_eq!(rate(64, 64), 85.3);
    assert_eq!(rate(32, 64), 102.4);
    assert_eq!(rate(32, 32), 204.8);
    println!("criterion 1 (compression-rate exactness): pass");
}

// ---------------------------------------------------------------------------
// criterion 2: published F1 scores are out of desk-scale reach; the synthetic
// end-to-end criteria 6-8 stand in for them.
// ---------------------------------------------------------------------------

#[test]
fn criterion_2_substituted_by_synthetic_end_to_end() {
    println!("criterion 2 (published F1 scores): substituted by criteria 6-8");
}

// ---------------------------------------------------------------------------
// criterion 3: gumbel-softmax correctness
// ---------------------------------------------------------------------------

#[test]
fn criterion_3_gumbel_softmax_correctness() {
    let mut rng = ChaCha8Rng::seed_from_u64(300);
    for _ in 0..10_000 {
        let k = rng.random_range(2..=64);
        let logits: Vec<f64> = (0..k).map(|_| rng.random_range(-20.0..20.0)).collect();
        let noise: Vec<f64> = (0..k).map(|_| rng.random_range(-5.0..5.0)).collect();
        let tau = rng.random_range(0.05..5.0);
        let out = gumbel_softmax(&logits, tau, &noise).unwrap();
        assert!(out.iter().all(|&v| v >= 0.0));
        let sum: f64 = out.iter().sum();
        assert!((sum - 1.0).abs() < 1e-9, "sum {sum}");
    }
    for _ in 0..1_000 {
        let logits: Vec<f64> = (0..16).map(|_| rng.random_range(-10.0..10.0)).collect();
        let got = gumbel_softmax(&logits, 1.0, &[0.0; 16]).unwrap();
        // plain softmax oracle, direct definition
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = logits.iter().map(|l| (l - max).exp()).sum();
        for (g, l) in got.iter().zip(&logits) {
            assert!((g - (l - max).exp() / sum).abs() < 1e-12);
        }
    }
    println!("criterion 3 (gumbel-softmax correctness): pass");
}

// ---------------------------------------------------------------------------
// criterion 4: gradient fidelity
// ---------------------------------------------------------------------------

#[test]
fn criterion_4_gradient_fidelity() {
    let config = CodeConfig::new(4, 2, 8).unwrap();
    let mut model = CodecModel::new(config, Some(8), 400);
    let mut rng = ChaCha8Rng::seed_from_u64(401);
    let x = ContextVector::new(
        (0..8).map(|_| rng.random_range(-2.0..2.0)).collect(),
        "gc",
    )
    .unwrap();
    let mut noise_src = GumbelNoise::seeded(402);
    let mut noise = vec![0.0; config.code_units()];
    use codesam::codec::NoiseSource;
    noise_src.fill(&mut noise);

    // samples_per_tensor large enough to visit every one of the 288 weights
    let max_rel = model.gradient_check(&x, 1.0, &noise, 1_000).unwrap();
    assert!(max_rel < 1e-4, "max relative error {max_rel}");
    println!("criterion 4 (gradient fidelity): pass (max rel err {max_rel:.3e} over 288 weights)");
}

// ---------------------------------------------------------------------------
// criterion 5: SAM retrieval == brute-force 1-NN under hamming
// ---------------------------------------------------------------------------

#[test]
fn criterion_5_sam_one_nn_oracle_equivalence() {
    let mut rng = ChaCha8Rng::seed_from_u64(500);
    for trial in 0..1_000 {
        let k = if rng.random_bool(0.5) { 4 } else { 32 };
        let m = if rng.random_bool(0.5) { 4 } else { 32 };
        let config = CodeConfig::new(k, m, 4).unwrap();
        let n = rng.random_range(1..=200);
        let mut mem = SparseMemory::new(config);
        let mut codes = Vec::with_capacity(n);
        for i in 0..n {
            let indices: Vec<u16> = (0..m).map(|_| rng.random_range(0..k as u16)).collect();
            let code = CompositionalCode::new(indices, &config).unwrap();
            mem.store(
                &code,
                NodeMeta {
                    instance_id: format!("n{i}"),
                    lemma: "w".into(),
                    sense_key: "s".into(),
                },
            )
            .unwrap();
            codes.push(code);
        }
        let q_indices: Vec<u16> = (0..m).map(|_| rng.random_range(0..k as u16)).collect();
        let query = CompositionalCode::new(q_indices, &config).unwrap();
        let result = mem
            .retrieve(&QueryPattern::from_code(&query), true)
            .unwrap();

        // Brute-force hamming scan oracle.
        let distances: Vec<usize> = codes
            .iter()
            .map(|c| wsd::hamming(c, &query).unwrap())
            .collect();
        let best = *distances.iter().min().unwrap();
        let nearest: Vec<usize> = distances
            .iter()
            .enumerate()
            .filter(|(_, &d)| d == best)
            .map(|(i, _)| i)
            .collect();
        assert_eq!(result.winners, nearest, "trial {trial}");

        let scores = result.per_node_scores.unwrap();
        for (score, distance) in scores.iter().zip(&distances) {
            assert_eq!(*score as usize, m - distance);
        }
        assert!(mem.score_equivalence_check(&query).unwrap());
    }
    println!("criterion 5 (SAM/1-NN oracle equivalence): pass");
}

// ---------------------------------------------------------------------------
// criteria 6-8: synthetic end-to-end disambiguation
// ---------------------------------------------------------------------------

const DIM: usize = 32;
const LEMMAS: usize = 8;
const SENSES: usize = 4;
const PER_SENSE: usize = 50;
const FIXTURE_SEED: u64 = 600;

struct Fixture {
    train: Vec<LabeledInstance>,
    test: Vec<LabeledInstance>,
}

/// 32 Gaussian blobs (8 lemmas x 4 senses) with unit sigma and pairwise mean
/// separation >= 6, 50 train + 50 test instances each.
fn fixture() -> &'static Fixture {
    static FIXTURE: OnceLock<Fixture> = OnceLock::new();
    FIXTURE.get_or_init(|| {
        let mut rng = ChaCha8Rng::seed_from_u64(FIXTURE_SEED);
        let mut means: Vec<Vec<f32>> = Vec::new();
        while means.len() < LEMMAS * SENSES {
            let cand: Vec<f32> = (0..DIM).map(|_| rng.random_range(-10.0..10.0)).collect();
            let ok = means.iter().all(|m| {
                let d2: f32 = m
                    .iter()
                    .zip(&cand)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                d2.sqrt() >= 6.0
            });
            if ok {
                means.push(cand);
            }
        }
        let sample = |mean: &[f32], rng: &mut ChaCha8Rng| -> Vec<f32> {
            mean.iter()
                .map(|&m| {
                    let z: f64 = StandardNormal.sample(rng);
                    m + z as f32
                })
                .collect()
        };
        let mut train = Vec::new();
        let mut test = Vec::new();
        for lemma_i in 0..LEMMAS {
            for sense_i in 0..SENSES {
                let mean = &means[lemma_i * SENSES + sense_i];
                let lemma = format!("lemma{lemma_i}");
                let sense = format!("lemma{lemma_i}%{sense_i}");
                for inst_i in 0..PER_SENSE {
                    for (split, tag) in [(&mut train, "tr"), (&mut test, "te")] {
                        let id = format!("{tag}.{lemma_i}.{sense_i}.{inst_i}");
                        let v =
                            ContextVector::new(sample(mean, &mut rng), id.clone()).unwrap();
                        split.push(
                            LabeledInstance::new(id, lemma.clone(), sense.clone(), v).unwrap(),
                        );
                    }
                }
            }
        }
        Fixture { train, test }
    })
}

fn pipeline_train_config(seed: u64) -> TrainConfig {
    TrainConfig {
        learning_rate: 3e-3,
        batch_size: 32,
        epochs: 30,
        tau: 1.0,
        anneal: false,
        momentum: 0.9,
        seed,
        standardize: true,
    }
}

struct PipelineRun {
    trace: Vec<f64>,
    f1: f64,
    model_bytes: Vec<u8>,
    code_bytes: Vec<u8>,
    prediction_bytes: Vec<u8>,
}

/// Full pipeline: train codec (K=16, M=8), encode, build index, evaluate.
/// All artifacts are written through `io` and read back as bytes.
fn run_pipeline(dir: &Path, seed: u64) -> PipelineRun {
    let fx = fixture();
    let config = CodeConfig::new(16, 8, DIM).unwrap();
    let vectors: Vec<ContextVector> = fx.train.iter().map(|i| i.vector.clone()).collect();
    let mut model = CodecModel::new(config, None, seed);
    let trace = model.train(&vectors, &pipeline_train_config(seed)).unwrap();

    let model_path = dir.join("model.cmdl");
    io::write_model(&model_path, &model).unwrap();
    let model = io::read_model(&model_path).unwrap();

    let codes_path = dir.join("train.ccod");
    let entries: Vec<(String, Vec<u16>)> = vectors
        .iter()
        .map(|v| {
            (
                v.source_id().to_string(),
                model.encode_hard(v).unwrap().indices().to_vec(),
            )
        })
        .collect();
    io::write_codes(
        &codes_path,
        &io::CodeSet {
            k: 16,
            m: 8,
            entries,
        },
    )
    .unwrap();

    let index = wsd::build_index(&fx.train, &model).unwrap();
    let report = wsd::evaluate(&index, &model, &fx.test).unwrap();
    let pred_path = dir.join("predictions.tsv");
    io::write_predictions(&pred_path, &report.predictions).unwrap();

    PipelineRun {
        trace,
        f1: report.f1,
        model_bytes: std::fs::read(&model_path).unwrap(),
        code_bytes: std::fs::read(&codes_path).unwrap(),
        prediction_bytes: std::fs::read(&pred_path).unwrap(),
    }
}

/// Brute-force 1-NN on the raw vectors, per lemma, euclidean distance.
fn raw_one_nn_f1(fx: &Fixture) -> f64 {
    let mut correct = 0usize;
    for t in &fx.test {
        let mut best: Option<(f64, &LabeledInstance)> = None;
        for tr in fx.train.iter().filter(|i| i.lemma == t.lemma) {
            let d2: f64 = tr
                .vector
                .values()
                .iter()
                .zip(t.vector.values())
                .map(|(a, b)| {
                    let e = *a as f64 - *b as f64;
                    e * e
                })
                .sum();
            if best.map_or(true, |(bd, _)| d2 < bd) {
                best = Some((d2, tr));
            }
        }
        if best.unwrap().1.sense_key == t.sense_key {
            correct += 1;
        }
    }
    correct as f64 / fx.test.len() as f64
}

#[test]
fn criterion_6_end_to_end_synthetic_wsd() {
    let fx = fixture();
    let oracle_f1 = raw_one_nn_f1(fx);
    assert!(
        oracle_f1 >= 0.99,
        "raw 1-NN oracle reached only {oracle_f1:.4}; fixture is unsound"
    );
    let dir = TempDir::new().unwrap();
    let run = run_pipeline(dir.path(), FIXTURE_SEED);
    assert!(
        run.f1 >= 0.95,
        "pipeline micro-F1 {:.4} below 0.95 (oracle {oracle_f1:.4})",
        run.f1
    );
    println!(
        "criterion 6 (end-to-end synthetic WSD): pass (F1 {:.4}, oracle {:.4})",
        run.f1, oracle_f1
    );
}

#[test]
fn criterion_7_training_sanity() {
    let dir = TempDir::new().unwrap();
    let run = run_pipeline(dir.path(), FIXTURE_SEED);
    assert!(run.trace.iter().all(|l| l.is_finite()));
    let first = run.trace[0];
    let last = *run.trace.last().unwrap();
    assert!(
        last < 0.5 * first,
        "final loss {last} not below half of epoch-1 loss {first}"
    );
    println!("criterion 7 (training sanity): pass (loss {first:.4} -> {last:.4})");
}

#[test]
fn criterion_8_determinism() {
    let dir1 = TempDir::new().unwrap();
    let dir2 = TempDir::new().unwrap();
    let run1 = run_pipeline(dir1.path(), FIXTURE_SEED);
    let run2 = run_pipeline(dir2.path(), FIXTURE_SEED);
    assert_eq!(run1.model_bytes, run2.model_bytes);
    assert_eq!(run1.code_bytes, run2.code_bytes);
    assert_eq!(run1.prediction_bytes, run2.prediction_bytes);
    assert_eq!(run1.trace, run2.trace);
    println!("criterion 8 (determinism): pass");
}

// ---------------------------------------------------------------------------
// criterion 9: round-trip formats
// ---------------------------------------------------------------------------

#[test]
fn criterion_9_round_trip_formats() {
    let dir = TempDir::new().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(900);
    for cycle in 0..100 {
        let dim = rng.random_range(1..=16);
        let count = rng.random_range(1..=12);

        // vectors
        let vectors: Vec<ContextVector> = (0..count)
            .map(|i| {
                ContextVector::new(
                    (0..dim).map(|_| rng.random_range(-100.0..100.0)).collect(),
                    format!("v{cycle}.{i}"),
                )
                .unwrap()
            })
            .collect();
        let vpath = dir.path().join("v.ctxv");
        io::write_vectors(&vpath, &vectors).unwrap();
        let b1 = std::fs::read(&vpath).unwrap();
        let loaded = io::read_vectors(&vpath).unwrap();
        io::write_vectors(&vpath, &loaded).unwrap();
        assert_eq!(std::fs::read(&vpath).unwrap(), b1);

        // dataset
        let records: Vec<io::DatasetRecord> = (0..count)
            .map(|i| io::DatasetRecord {
                instance_id: format!("v{cycle}.{i}"),
                lemma: format!("lemma{}", rng.random_range(0..4)),
                sense_key: format!("s{}", rng.random_range(0..4)),
                vector_ref: format!("v{cycle}.{i}"),
            })
            .collect();
        let dpath = dir.path().join("d.tsv");
        io::write_dataset(&dpath, &records).unwrap();
        let b1 = std::fs::read(&dpath).unwrap();
        let loaded_records = io::read_dataset(&dpath).unwrap();
        io::write_dataset(&dpath, &loaded_records).unwrap();
        assert_eq!(std::fs::read(&dpath).unwrap(), b1);

        // codes
        let k = rng.random_range(2..=32) as u32;
        let m = rng.random_range(1..=8);
        let set = io::CodeSet {
            k,
            m: m as u32,
            entries: (0..count)
                .map(|i| {
                    (
                        format!("c{cycle}.{i}"),
                        (0..m).map(|_| rng.random_range(0..k as u16)).collect(),
                    )
                })
                .collect(),
        };
        let cpath = dir.path().join("c.ccod");
        io::write_codes(&cpath, &set).unwrap();
        let b1 = std::fs::read(&cpath).unwrap();
        let loaded_set = io::read_codes(&cpath).unwrap();
        io::write_codes(&cpath, &loaded_set).unwrap();
        assert_eq!(std::fs::read(&cpath).unwrap(), b1);

        // model
        let config = CodeConfig::new(k as usize, m, dim).unwrap();
        let model = CodecModel::new(config, None, rng.random());
        let mpath = dir.path().join("m.cmdl");
        io::write_model(&mpath, &model).unwrap();
        let b1 = std::fs::read(&mpath).unwrap();
        let loaded_model = io::read_model(&mpath).unwrap();
        io::write_model(&mpath, &loaded_model).unwrap();
        assert_eq!(std::fs::read(&mpath).unwrap(), b1);

        // memory bundle
        let instances: Vec<LabeledInstance> = records
            .iter()
            .zip(&vectors)
            .map(|(r, v)| {
                LabeledInstance::new(
                    r.instance_id.clone(),
                    r.lemma.clone(),
                    r.sense_key.clone(),
                    v.clone(),
                )
                .unwrap()
            })
            .collect();
        let index = wsd::build_index(&instances, &model).unwrap();
        let spath = dir.path().join("s.csam");
        io::write_memory_bundle(&spath, &index, dim).unwrap();
        let b1 = std::fs::read(&spath).unwrap();
        let loaded_index = io::read_memory_bundle(&spath).unwrap();
        io::write_memory_bundle(&spath, &loaded_index, dim).unwrap();
        assert_eq!(std::fs::read(&spath).unwrap(), b1);
    }

    // negative cases: magic, version, truncation, index bounds
    let vpath = dir.path().join("neg.ctxv");
    io::write_vectors(
        &vpath,
        &[ContextVector::new(vec![1.0, 2.0], "a").unwrap()],
    )
    .unwrap();
    let good = std::fs::read(&vpath).unwrap();

    let mut bad = good.clone();
    bad[0] = b'Z';
    std::fs::write(&vpath, &bad).unwrap();
    assert!(matches!(
        io::read_vectors(&vpath).unwrap_err(),
        io::FormatError::BadMagic { .. }
    ));

    let mut bad = good.clone();
    bad[4..8].copy_from_slice(&77u32.to_le_bytes());
    std::fs::write(&vpath, &bad).unwrap();
    assert!(matches!(
        io::read_vectors(&vpath).unwrap_err(),
        io::FormatError::UnsupportedVersion { found: 77 }
    ));

    let mut bad = good.clone();
    bad.truncate(good.len() - 1);
    std::fs::write(&vpath, &bad).unwrap();
    assert!(matches!(
        io::read_vectors(&vpath).unwrap_err(),
        io::FormatError::Corrupt { .. }
    ));

    let cpath = dir.path().join("neg.ccod");
    io::write_codes(
        &cpath,
        &io::CodeSet {
            k: 4,
            m: 2,
            entries: vec![("a".into(), vec![0, 1]), ("b".into(), vec![2, 3])],
        },
    )
    .unwrap();
    let mut bad = std::fs::read(&cpath).unwrap();
    // record 1 payload starts at offset 20 + 4
    bad[24..26].copy_from_slice(&9u16.to_le_bytes());
    std::fs::write(&cpath, &bad).unwrap();
    match io::read_codes(&cpath).unwrap_err() {
        io::FormatError::IndexOutOfRange { record, .. } => assert_eq!(record, 1),
        other => panic!("expected IndexOutOfRange, got {other:?}"),
    }

    println!("criterion 9 (round-trip formats): pass");
}
