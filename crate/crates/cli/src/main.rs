//! `grasp train | compress | evaluate`.
//!
//! Exit codes: 0 success, 2 configuration, 3 data, 4 numeric,
//! 5 infeasible compression target.

mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use grasp_core::attribution::ScoringMode;
use grasp_core::data::{sample_calibration, CalibrationSet, Corpus};
use grasp_core::evaluation::{perplexity, sensitivity_sweep_layer, throughput_benchmark, write_sensitivity_csv, ThroughputConfig};
use grasp_core::model::{init_model, Aggregation, Layer, TransformerModel};
use grasp_core::pipeline::{compensate, load_checkpoint, run_grasp, save_checkpoint, CompensationKind, Dtype, PruningMode};
use grasp_core::redundancy::layer_similarity_scores;
use grasp_core::train::train;
use grasp_core::{ErrorClass, GraspError};
use serde_json::json;

use config::RunConfigFile;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("cannot write {path}: {source}")]
    Output { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Core(#[from] GraspError),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Output { .. } => 3,
            CliError::Core(e) => match e.class() {
                ErrorClass::Config => 2,
                ErrorClass::Data => 3,
                ErrorClass::Numeric => 4,
                ErrorClass::Infeasible => 5,
            },
        }
    }
}

type CliResult<T = ()> = Result<T, CliError>;

#[derive(Parser)]
#[command(name = "grasp", version, about = "Replace redundant transformer blocks with gradient-selected low-rank factors")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Corpus text file; overrides `data.corpus`.
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Seed for every stage; beats GRASP_SEED, which beats the file.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for parallel inner loops.
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Train the dense toy model and write a checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
        /// Output checkpoint directory.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
        /// Also write the training report (JSON) here.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Select redundant blocks, replace them, optionally fine-tune factors.
    Compress {
        #[command(flatten)]
        common: Common,
        /// Dense input checkpoint directory.
        #[arg(long = "in")]
        input: PathBuf,
        /// Output checkpoint directory; the summary goes to `<out>/summary.json`.
        #[arg(long)]
        out: PathBuf,
        /// Target compression ratio.
        #[arg(long, conflicts_with = "layers")]
        ratio: Option<f64>,
        /// Explicit blocks to replace, comma separated.
        #[arg(long, value_delimiter = ',')]
        layers: Option<Vec<usize>>,
        /// Fraction of singular groups kept per matrix.
        #[arg(long)]
        retain: Option<f64>,
        #[arg(long, value_enum)]
        scoring: Option<ScoringArg>,
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        #[arg(long, value_enum)]
        aggregation: Option<AggregationArg>,
        /// Require the replaced blocks to be consecutive.
        #[arg(long)]
        contiguous: bool,
        /// Calibration windows.
        #[arg(long)]
        samples: Option<usize>,
        /// Factor fine-tuning steps after compression (0 disables).
        #[arg(long)]
        compensate_steps: Option<usize>,
    },
    /// Perplexity, throughput and sensitivity reports for a checkpoint.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// JSON report path (stdout when omitted).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        ppl: bool,
        #[arg(long)]
        throughput: bool,
        #[arg(long, value_delimiter = ',')]
        batch: Option<Vec<usize>>,
        #[arg(long, value_delimiter = ',')]
        seqlen: Option<Vec<usize>>,
        #[arg(long)]
        iters: Option<usize>,
        #[arg(long)]
        sensitivity: bool,
        /// Block to sweep, or `auto` for the most redundant dense block.
        #[arg(long, default_value = "auto")]
        layer: String,
        #[arg(long)]
        bucket: Option<usize>,
        /// Sensitivity CSV path (defaults to the JSON path with `.csv`).
        #[arg(long)]
        csv: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ScoringArg {
    Gradient,
    Magnitude,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    #[value(name = "one_shot", alias = "one-shot")]
    OneShot,
    Iterative,
}

#[derive(Clone, Copy, ValueEnum)]
enum AggregationArg {
    #[value(name = "mean_token_cosine")]
    MeanTokenCosine,
    #[value(name = "cosine_of_means")]
    CosineOfMeans,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn run(cli: Cli) -> CliResult {
    match cli.command {
        Command::Train { common, out, steps, report } => {
            let mut cfg = prepare(&common)?;
            if let Some(s) = steps {
                cfg.train.steps = s;
            }
            cmd_train(&cfg, &out, report.as_deref())
        }
        Command::Compress { common, input, out, ratio, layers, retain, scoring, mode, aggregation, contiguous, samples, compensate_steps } => {
            let mut cfg = prepare(&common)?;
            let c = &mut cfg.compress;
            if let Some(r) = ratio {
                c.target_ratio = Some(r);
                c.layers = None;
            }
            if let Some(ls) = layers {
                c.layers = Some(ls);
                c.target_ratio = None;
            }
            if let Some(r) = retain {
                c.retain_ratio = r;
            }
            if let Some(s) = scoring {
                c.scoring = match s {
                    ScoringArg::Gradient => ScoringMode::Gradient,
                    ScoringArg::Magnitude => ScoringMode::Magnitude,
                };
            }
            if let Some(m) = mode {
                c.mode = match m {
                    ModeArg::OneShot => PruningMode::OneShot,
                    ModeArg::Iterative => PruningMode::Iterative,
                };
            }
            if let Some(a) = aggregation {
                c.aggregation = match a {
                    AggregationArg::MeanTokenCosine => Aggregation::MeanTokenCosine,
                    AggregationArg::CosineOfMeans => Aggregation::CosineOfMeans,
                };
            }
            c.contiguous |= contiguous;
            if let Some(n) = samples {
                c.calibration.samples = n;
            }
            if let Some(s) = compensate_steps {
                c.compensation.steps = s;
                c.compensation.kind = if s > 0 { CompensationKind::FactorFinetune } else { CompensationKind::None };
            }
            cmd_compress(&cfg, &input, &out)
        }
        Command::Evaluate { common, checkpoint, out, ppl, throughput, batch, seqlen, iters, sensitivity, layer, bucket, csv } => {
            let mut cfg = prepare(&common)?;
            if let Some(b) = batch {
                cfg.eval.batch_sizes = b;
            }
            if let Some(s) = seqlen {
                cfg.eval.seq_lens = s;
            }
            if let Some(i) = iters {
                cfg.eval.iters = i;
            }
            if bucket.is_some() {
                cfg.eval.bucket_size = bucket;
            }
            let layer = match layer.as_str() {
                "auto" => None,
                s => Some(s.parse::<usize>().map_err(|_| CliError::Config(format!("--layer expects an index or `auto`, got `{s}`")))?),
            };
            let wants = Wants { ppl, throughput, sensitivity };
            cmd_evaluate(&cfg, &checkpoint, out.as_deref(), csv.as_deref(), wants, layer)
        }
    }
}

fn prepare(common: &Common) -> CliResult<RunConfigFile> {
    let mut cfg = RunConfigFile::load(common.config.as_deref())?;
    if let Some(c) = &common.corpus {
        cfg.data.corpus = Some(c.clone());
    }
    cfg.apply_seed(common.seed)?;
    if let Some(n) = common.threads {
        if n == 0 {
            return Err(CliError::Config("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(format!("thread pool: {e}")))?;
    }
    Ok(cfg)
}

fn load_corpus(cfg: &RunConfigFile) -> CliResult<(Corpus, Corpus)> {
    let path = cfg.data.corpus.as_ref().ok_or_else(|| CliError::Config("no corpus: pass --corpus or set data.corpus".into()))?;
    let corpus = Corpus::from_file(path)?;
    Ok(corpus.split(cfg.data.heldout_fraction)?)
}

fn write_json(path: &Path, value: &serde_json::Value) -> CliResult {
    let text = serde_json::to_string_pretty(value).expect("reports serialize");
    fs::write(path, text + "\n").map_err(|source| CliError::Output { path: path.to_path_buf(), source })
}

fn cmd_train(cfg: &RunConfigFile, out: &Path, report_path: Option<&Path>) -> CliResult {
    let (train_split, _) = load_corpus(cfg)?;
    let mut model = init_model(&cfg.model)?;
    let every = (cfg.train.steps / 20).max(1);
    let report = train(&mut model, &train_split, &cfg.train, |step, loss| {
        if step % every == 0 {
            eprintln!("step {step:>6}  loss {loss:.4}");
        }
    })?;
    save_checkpoint(&model, None, out, Dtype::F64)?;
    if let Some(p) = report_path {
        write_json(p, &json!({ "report": report, "effective_config": cfg, "model_checksum": model.checksum_hex() }))?;
    }
    println!("final_loss {:.6}", report.final_loss);
    Ok(())
}

fn calibration(cfg: &RunConfigFile, train_split: &Corpus, max_seq_len: usize) -> CliResult<CalibrationSet> {
    let spec = &cfg.compress.calibration;
    let seq_len = spec.seq_len.min(max_seq_len);
    Ok(sample_calibration(train_split, spec.samples, seq_len, spec.seed)?)
}

fn cmd_compress(cfg: &RunConfigFile, input: &Path, out: &Path) -> CliResult {
    let dense = load_checkpoint(input)?.model;
    let config = cfg.compress.to_config()?;
    config.validate(dense.layers.len())?;
    let (train_split, held_split) = load_corpus(cfg)?;
    let calib = calibration(cfg, &train_split, dense.config.max_seq_len)?;
    let mut compressed = run_grasp(&dense, &config, &calib)?;
    if config.compensation.kind == CompensationKind::FactorFinetune && config.compensation.steps > 0 {
        let seq_len = calib.samples[0].len();
        let held = sample_calibration(&held_split, cfg.compress.heldout_samples, seq_len, config.calibration.seed ^ 0x5eed)?;
        let c = &config.compensation;
        compressed = compensate(&compressed, &calib.samples, &held.samples, c.steps, c.learning_rate, c.batch_size)?.0;
    }
    save_checkpoint(&compressed.model, Some(&compressed.provenance), out, Dtype::F64)?;

    let retained: Vec<_> = compressed
        .model
        .layers
        .iter()
        .enumerate()
        .filter_map(|(l, layer)| match layer {
            Layer::LowRank(w) => Some((l, w)),
            Layer::Dense(_) => None,
        })
        .flat_map(|(l, w)| {
            w.factors.iter().zip(grasp_core::model::Slot::ALL).map(move |(f, slot)| {
                json!({
                    "layer": l,
                    "matrix": slot,
                    "rank": f.rank(),
                    "retained_indices": f.retained_indices,
                    "is_truncated_svd_prefix": f.retained_indices.iter().enumerate().all(|(i, &k)| i == k),
                })
            })
        })
        .collect();
    let p = &compressed.provenance;
    let summary = json!({
        "selected_layers": p.redundancy.selected,
        "processing_order": p.processed.iter().map(|s| s.layer).collect::<Vec<_>>(),
        "achieved_ratio": (p.achieved_ratio * 1e4).round() / 1e4,
        "achieved_ratio_exact": p.achieved_ratio,
        "dense_parameter_count": p.dense_parameter_count,
        "compressed_parameter_count": p.compressed_parameter_count,
        "scores": p.redundancy.scores,
        "aggregation": p.redundancy.aggregation,
        "retained": retained,
        "compensation": p.compensation,
        "model_checksum": compressed.model.checksum_hex(),
        "effective_config": cfg,
    });
    write_json(&out.join("summary.json"), &summary)?;
    println!("{}", serde_json::to_string_pretty(&summary).expect("summary serializes"));
    Ok(())
}

#[derive(Clone, Copy)]
struct Wants {
    ppl: bool,
    throughput: bool,
    sensitivity: bool,
}

fn most_redundant_dense_layer(model: &TransformerModel, calib: &CalibrationSet, cfg: &RunConfigFile) -> CliResult<usize> {
    let scores = layer_similarity_scores(model, calib, cfg.compress.aggregation, cfg.compress.calibration.batch_size.max(1))?;
    scores
        .iter()
        .filter(|s| model.layers[s.layer_index].is_dense())
        .max_by(|a, b| a.similarity.total_cmp(&b.similarity).then(a.layer_index.cmp(&b.layer_index)))
        .map(|s| s.layer_index)
        .ok_or_else(|| CliError::Core(GraspError::validation("no dense layer left to sweep")))
}

fn cmd_evaluate(cfg: &RunConfigFile, ckpt: &Path, out: Option<&Path>, csv: Option<&Path>, wants: Wants, layer: Option<usize>) -> CliResult {
    if !(wants.ppl || wants.throughput || wants.sensitivity) {
        return Err(CliError::Config("choose at least one of --ppl, --throughput, --sensitivity".into()));
    }
    let loaded = load_checkpoint(ckpt)?;
    let model = loaded.model;
    let mut report = serde_json::Map::new();
    report.insert("checkpoint".into(), json!(ckpt.display().to_string()));
    report.insert("model_checksum".into(), json!(model.checksum_hex()));
    report.insert("compression_ratio".into(), json!(model.compression_ratio()));
    report.insert("effective_config".into(), json!(cfg));

    let corpus = if wants.ppl || wants.sensitivity { Some(load_corpus(cfg)?) } else { None };
    if wants.ppl {
        let (_, held) = corpus.as_ref().expect("loaded above");
        let r = perplexity(&model, &held.documents, cfg.eval.batch_size)?;
        eprintln!("perplexity {:.6} over {} tokens", r.perplexity, r.token_count);
        report.insert("perplexity".into(), json!(r));
    }
    if wants.throughput {
        let tc = ThroughputConfig {
            batch_sizes: cfg.eval.batch_sizes.clone(),
            seq_lens: cfg.eval.seq_lens.clone(),
            warmup: cfg.eval.warmup,
            iters: cfg.eval.iters,
            seed: cfg.seed.unwrap_or(0),
        };
        let r = throughput_benchmark(&model, &tc)?;
        report.insert("throughput".into(), json!(r));
    }
    if wants.sensitivity {
        let (train_split, _) = corpus.as_ref().expect("loaded above");
        let mut spec_cfg = cfg.clone();
        spec_cfg.compress.calibration.samples = cfg.eval.sensitivity_samples;
        let calib = calibration(&spec_cfg, train_split, model.config.max_seq_len)?;
        let layer = match layer {
            Some(l) => l,
            None => most_redundant_dense_layer(&model, &calib, cfg)?,
        };
        let reps = sensitivity_sweep_layer(&model, layer, cfg.eval.bucket_size, &calib.samples, cfg.eval.batch_size)?;
        let csv_path = match (csv, out) {
            (Some(p), _) => Some(p.to_path_buf()),
            (None, Some(o)) => Some(o.with_extension("csv")),
            (None, None) => None,
        };
        if let Some(p) = &csv_path {
            let f = fs::File::create(p).map_err(|source| CliError::Output { path: p.clone(), source })?;
            write_sensitivity_csv(&reps, std::io::BufWriter::new(f)).map_err(|source| CliError::Output { path: p.clone(), source })?;
            report.insert("sensitivity_csv".into(), json!(p.display().to_string()));
        }
        report.insert("sensitivity_layer".into(), json!(layer));
        report.insert("sensitivity".into(), json!(reps));
    }
    let value = serde_json::Value::Object(report);
    match out {
        Some(p) => write_json(p, &value),
        None => {
            println!("{}", serde_json::to_string_pretty(&value).expect("report serializes"));
            Ok(())
        }
    }
}
