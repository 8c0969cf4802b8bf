//! `codesam` command line: train the codec, encode vectors, build per-lemma
//! memories, evaluate disambiguation, and report compression/hamming stats.

use clap::{Args, Parser, Subcommand};
use codesam::codec::{CodecError, CodecModel, TrainConfig};
use codesam::core::CodeConfig;
use codesam::io::{self, CodeSet};
use codesam::wsd::{self, hamming, EvalReport, LemmaIndex, Prediction};
use codesam::CompositionalCode;
use std::path::PathBuf;
use std::process::ExitCode;

const EXIT_OK: u8 = 0;
const EXIT_INPUT: u8 = 2;
const EXIT_DIVERGED: u8 = 3;
const EXIT_USAGE: u8 = 64;

#[derive(Parser)]
#[command(name = "codesam", version, about = "Compositional codes + sparse associative memories for word sense disambiguation")]
struct Cli {
    /// RNG seed for every stochastic step.
    #[arg(long, global = true, default_value_t = 42)]
    seed: u64,
    /// Worker threads for evaluation.
    #[arg(long, global = true, default_value_t = 1)]
    threads: u32,
    /// Suppress progress output on stderr.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the discrete autoencoder on a vector file.
    Train(TrainArgs),
    /// Encode a vector file into compositional codes.
    Encode(EncodeArgs),
    /// Build per-lemma memories from a labeled dataset.
    Build(BuildArgs),
    /// Evaluate disambiguation on a labeled test set.
    Eval(EvalArgs),
    /// Compression-rate or hamming-distance diagnostics.
    Stats(StatsArgs),
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    vectors: PathBuf,
    #[arg(long)]
    k: usize,
    #[arg(long)]
    m: usize,
    /// Hidden width (default: max(M*K/2, D/2) rounded up).
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long, default_value_t = 50)]
    epochs: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 1.0)]
    tau: f64,
    /// Anneal tau exponentially down to 0.1 over training.
    #[arg(long)]
    anneal: bool,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    /// Standardize inputs per dimension (stats are stored in the model).
    #[arg(long)]
    standardize: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EncodeArgs {
    #[arg(long)]
    vectors: PathBuf,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Print the code table (one row per instance, M activated positions).
    #[arg(long)]
    print: bool,
}

#[derive(Args)]
struct BuildArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    vectors: PathBuf,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    memory: PathBuf,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    test_dataset: PathBuf,
    #[arg(long)]
    test_vectors: PathBuf,
    /// Write predictions as `instance_id<TAB>sense_key` lines.
    #[arg(long)]
    predictions: Option<PathBuf>,
}

#[derive(Args)]
struct StatsArgs {
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    m: Option<usize>,
    #[arg(long, default_value_t = 1024)]
    dim: usize,
    /// Baseline bits per dense scalar.
    #[arg(long, default_value_t = 32)]
    bits: usize,
    #[arg(long)]
    codes: Option<PathBuf>,
    /// Two instance ids, comma separated, to compare.
    #[arg(long)]
    pair: Option<String>,
}

enum CliError {
    Usage(String),
    Input(String),
    Diverged(usize),
}

impl From<io::FormatError> for CliError {
    fn from(e: io::FormatError) -> Self {
        CliError::Input(e.to_string())
    }
}

impl From<CodecError> for CliError {
    fn from(e: CodecError) -> Self {
        match e {
            CodecError::Diverged { epoch } => CliError::Diverged(epoch),
            other => CliError::Input(other.to_string()),
        }
    }
}

impl From<wsd::WsdError> for CliError {
    fn from(e: wsd::WsdError) -> Self {
        match e {
            wsd::WsdError::Codec(c) => c.into(),
            other => CliError::Input(other.to_string()),
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap prints --help/--version on stdout with success status
            if e.use_stderr() {
                eprint!("{e}");
                return ExitCode::from(EXIT_USAGE);
            }
            print!("{e}");
            return ExitCode::from(EXIT_OK);
        }
    };
    let mut logger = env_logger::Builder::from_env(
        env_logger::Env::new().filter_or("CODESAM_LOG", "warn"),
    );
    if cli.quiet {
        logger.filter_level(log::LevelFilter::Error);
    }
    logger.target(env_logger::Target::Stderr).init();

    let result = match &cli.command {
        Command::Train(args) => cmd_train(&cli, args),
        Command::Encode(args) => cmd_encode(args),
        Command::Build(args) => cmd_build(&cli, args),
        Command::Eval(args) => cmd_eval(&cli, args),
        Command::Stats(args) => cmd_stats(args),
    };
    match result {
        Ok(()) => ExitCode::from(EXIT_OK),
        Err(CliError::Usage(msg)) => {
            eprintln!("usage error: {msg}");
            ExitCode::from(EXIT_USAGE)
        }
        Err(CliError::Input(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_INPUT)
        }
        Err(CliError::Diverged(epoch)) => {
            eprintln!("error: training diverged at epoch {epoch}");
            ExitCode::from(EXIT_DIVERGED)
        }
    }
}

fn code_config(k: usize, m: usize, d: usize) -> Result<CodeConfig, CliError> {
    CodeConfig::new(k, m, d).map_err(|e| CliError::Usage(e.to_string()))
}

fn cmd_train(cli: &Cli, args: &TrainArgs) -> Result<(), CliError> {
    if args.epochs == 0 {
        return Err(CliError::Usage("epochs must be >= 1".into()));
    }
    if !(args.lr > 0.0) {
        return Err(CliError::Usage("lr must be > 0".into()));
    }
    if !(args.tau > 0.0) {
        return Err(CliError::Usage("tau must be > 0".into()));
    }
    if args.batch_size == 0 {
        return Err(CliError::Usage("batch-size must be >= 1".into()));
    }
    // Validate geometry before touching any file; D is checked after load.
    code_config(args.k, args.m, 1)?;

    let vectors = io::read_vectors(&args.vectors)?;
    let d = vectors[0].dim();
    let config = code_config(args.k, args.m, d)?;
    let mut model = CodecModel::new(config, args.hidden, cli.seed);
    let train_cfg = TrainConfig {
        learning_rate: args.lr,
        batch_size: args.batch_size,
        epochs: args.epochs,
        tau: args.tau,
        anneal: args.anneal,
        momentum: 0.9,
        seed: cli.seed,
        standardize: args.standardize,
    };
    log::info!("training on {} vectors of dimension {d}", vectors.len());
    let trace = model.train(&vectors, &train_cfg)?;
    io::write_model(&args.out, &model)?;
    let loss_path = args.out.with_extension(format!(
        "{}loss.csv",
        args.out
            .extension()
            .map(|e| format!("{}.", e.to_string_lossy()))
            .unwrap_or_default()
    ));
    io::write_loss_trace(&loss_path, &trace)?;
    log::info!(
        "initial loss {:.6}, final loss {:.6}, model written to {}",
        trace.first().copied().unwrap_or(f64::NAN),
        trace.last().copied().unwrap_or(f64::NAN),
        args.out.display()
    );
    Ok(())
}

fn cmd_encode(args: &EncodeArgs) -> Result<(), CliError> {
    if args.out.is_none() && !args.print {
        return Err(CliError::Usage("encode needs --out and/or --print".into()));
    }
    let vectors = io::read_vectors(&args.vectors)?;
    let model = io::read_model(&args.model)?;
    let mut entries = Vec::with_capacity(vectors.len());
    for v in &vectors {
        let code = model.encode_hard(v)?;
        entries.push((v.source_id().to_string(), code.indices().to_vec()));
    }
    if args.print {
        for (id, indices) in &entries {
            let row = indices
                .iter()
                .map(|i| i.to_string())
                .collect::<Vec<_>>()
                .join(" ");
            println!("{id}\t{row}");
        }
    }
    if let Some(out) = &args.out {
        let set = CodeSet {
            k: model.config().k() as u32,
            m: model.config().m() as u32,
            entries,
        };
        io::write_codes(out, &set)?;
    }
    Ok(())
}

fn load_instances(
    dataset: &PathBuf,
    vectors: &PathBuf,
) -> Result<Vec<codesam::LabeledInstance>, CliError> {
    let records = io::read_dataset(dataset)?;
    if records.is_empty() {
        return Err(CliError::Input(format!(
            "dataset {} is empty",
            dataset.display()
        )));
    }
    let vecs = io::read_vectors(vectors)?;
    Ok(io::resolve_dataset(&records, &vecs)?)
}

fn cmd_build(_cli: &Cli, args: &BuildArgs) -> Result<(), CliError> {
    let instances = load_instances(&args.dataset, &args.vectors)?;
    let model = io::read_model(&args.model)?;
    let index = wsd::build_index(&instances, &model)?;
    io::write_memory_bundle(&args.out, &index, model.config().d())?;

    let mut nodes = 0usize;
    let mut connections = 0usize;
    let mut bits = 0usize;
    for (lemma, mem) in index.memories() {
        let s = mem.stats();
        println!(
            "lemma={lemma} nodes={} connections={} bits_used={} density={:.6}",
            s.node_count, s.connection_count, s.bits_used, s.density
        );
        nodes += s.node_count;
        connections += s.connection_count;
        bits += s.bits_used;
    }
    let density = if bits == 0 {
        0.0
    } else {
        connections as f64 / bits as f64
    };
    println!(
        "total lemmas={} nodes={nodes} connections={connections} bits_used={bits} density={density:.6}",
        index.lemmas().count()
    );
    Ok(())
}

fn cmd_eval(cli: &Cli, args: &EvalArgs) -> Result<(), CliError> {
    let instances = load_instances(&args.test_dataset, &args.test_vectors)?;
    let model = io::read_model(&args.model)?;
    let index = io::read_memory_bundle(&args.memory)?;
    let report = evaluate_parallel(&index, &model, &instances, cli.threads.max(1) as usize)?;

    println!("f1={:.6}", report.f1);
    println!("precision={:.6}", report.precision);
    println!("recall={:.6}", report.recall);
    println!("total={}", report.total);
    println!("correct={}", report.correct);
    println!("retrieved={}", report.retrieved);
    println!("tie_majority={}", report.tie_majority);
    println!("lemma_fallback={}", report.lemma_fallback);
    println!("abstained={}", report.abstained);
    if let Some(path) = &args.predictions {
        io::write_predictions(path, &report.predictions)?;
    }
    Ok(())
}

/// Chunked read-only evaluation; prediction order is by instance regardless
/// of thread count.
fn evaluate_parallel(
    index: &LemmaIndex,
    model: &CodecModel,
    test: &[codesam::LabeledInstance],
    threads: usize,
) -> Result<EvalReport, CliError> {
    if threads <= 1 || test.len() < 2 {
        return Ok(wsd::evaluate(index, model, test)?);
    }
    let chunk = test.len().div_ceil(threads);
    let predictions: Vec<Vec<Result<Prediction, wsd::WsdError>>> = std::thread::scope(|scope| {
        let handles: Vec<_> = test
            .chunks(chunk)
            .map(|part| {
                scope.spawn(move || {
                    part.iter()
                        .map(|inst| {
                            wsd::classify(index, &inst.lemma, &inst.vector, model).map(|mut p| {
                                p.instance_id = inst.instance_id.clone();
                                p
                            })
                        })
                        .collect()
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().unwrap()).collect()
    });
    let flat: Result<Vec<Prediction>, wsd::WsdError> =
        predictions.into_iter().flatten().collect();
    Ok(wsd::tally_report(test, flat?))
}

fn cmd_stats(args: &StatsArgs) -> Result<(), CliError> {
    match (&args.codes, &args.pair, args.k, args.m) {
        (Some(codes_path), Some(pair), _, _) => {
            let (a, b) = pair
                .split_once(',')
                .ok_or_else(|| CliError::Usage("--pair wants two ids: A,B".into()))?;
            let set = io::read_codes(codes_path)?;
            let config = code_config(set.k as usize, set.m as usize, 1)?;
            let find = |id: &str| -> Result<CompositionalCode, CliError> {
                set.entries
                    .iter()
                    .find(|(eid, _)| eid == id)
                    .map(|(_, idx)| CompositionalCode::new(idx.clone(), &config).unwrap())
                    .ok_or_else(|| CliError::Input(format!("instance {id:?} not in code file")))
            };
            let distance = hamming(&find(a)?, &find(b)?)
                .map_err(|e| CliError::Input(e.to_string()))?;
            println!("{distance}");
            Ok(())
        }
        (None, None, Some(k), Some(m)) => {
            if args.bits == 0 {
                return Err(CliError::Usage("bits must be >= 1".into()));
            }
            let config = code_config(k, m, args.dim)?;
            println!("{:.1}x", config.compression_rate(args.bits));
            Ok(())
        }
        _ => Err(CliError::Usage(
            "stats wants either --k and --m, or --codes and --pair".into(),
        )),
    }
}
