//! Command-line surface over the library, for batch use.
//!
//! Every command is deterministic given its inputs, seed, and flags;
//! `--parallel` changes timing only, never file contents. Errors exit
//! nonzero with a one-line `error: kind: detail` message on stderr.
//! `QAFLORA_THREADS` caps the parallel scoring fan-out (default: host
//! core count).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use crate::adapter::AdapterRegistry;
use crate::container::{load_adapter, load_model, save_adapter, save_model};
use crate::error::{Error, Result};
use crate::eval::{score_set_with, MatchMode, NumberConvention};
use crate::export::{
    export_profile, export_weights, load_centroids, save_centroids, ExportFormat,
};
use crate::fusion::{
    build_centroids, centroid_weights, divergence_profile_with, default_thread_cap,
    mean_normalized_profile, qa_flora_weights, static_weights, DivergenceProfile, FusionWeights,
    Measure, Pooling, ProfileOptions,
};
use crate::generation::{
    bench_latency, generate, generate_adaptive, AdaptiveSpec, BenchOptions, GenParams, Sampling,
};
use crate::math::NORM_EPSILON_DEFAULT;
use crate::model::{BaseModel, Granularity, ModelConfig, PositionEncoding};
use crate::tokenizer::ByteTokenizer;
use crate::toy::{make_toy_adapter, make_toy_model};

#[derive(Parser)]
#[command(name = "qaflora", version, about = "Query-adaptive LoRA fusion engine")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum MethodArg {
    /// qa weights from logit-lens KL divergence.
    Kl,
    /// Ablation: cosine distance on hidden states.
    Cosine,
    /// Ablation: euclidean distance on hidden states.
    Euclid,
    /// Equal weights 1/k for every adapter and layer.
    Static,
    /// Centroid-similarity baseline (needs --centroids).
    Centroid,
}

impl MethodArg {
    fn measure(self) -> Option<Measure> {
        match self {
            MethodArg::Kl => Some(Measure::Kl),
            MethodArg::Cosine => Some(Measure::Cosine),
            MethodArg::Euclid => Some(Measure::Euclidean),
            MethodArg::Static | MethodArg::Centroid => None,
        }
    }

    fn name(self) -> &'static str {
        match self {
            MethodArg::Kl => "kl",
            MethodArg::Cosine => "cosine",
            MethodArg::Euclid => "euclid",
            MethodArg::Static => "static",
            MethodArg::Centroid => "centroid",
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum GranularityArg {
    /// Divergence at the query's last token.
    Last,
    /// Mean divergence across all query positions.
    All,
}

impl From<GranularityArg> for Granularity {
    fn from(g: GranularityArg) -> Granularity {
        match g {
            GranularityArg::Last => Granularity::LastToken,
            GranularityArg::All => Granularity::AllTokens,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum MeasureArg {
    Kl,
    Cosine,
    Euclid,
}

impl From<MeasureArg> for Measure {
    fn from(m: MeasureArg) -> Measure {
        match m {
            MeasureArg::Kl => Measure::Kl,
            MeasureArg::Cosine => Measure::Cosine,
            MeasureArg::Euclid => Measure::Euclidean,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum PoolingArg {
    Mean,
    Last,
}

impl From<PoolingArg> for Pooling {
    fn from(p: PoolingArg) -> Pooling {
        match p {
            PoolingArg::Mean => Pooling::Mean,
            PoolingArg::Last => Pooling::LastToken,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ModeArg {
    String,
    Numeric,
    OptionLetter,
}

impl From<ModeArg> for MatchMode {
    fn from(m: ModeArg) -> MatchMode {
        match m {
            ModeArg::String => MatchMode::String,
            ModeArg::Numeric => MatchMode::Numeric,
            ModeArg::OptionLetter => MatchMode::OptionLetter,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum PositionsArg {
    Rope,
    Learned,
}

/// Model, adapters, and fusion-method selection shared by most commands.
#[derive(Args)]
struct RunConfig {
    /// Model container (.lmt).
    #[arg(long)]
    model: PathBuf,
    /// Adapter containers (.lat), repeatable; order fixes the adapter index.
    #[arg(long = "adapter", required = true)]
    adapters: Vec<PathBuf>,
    /// Fusion-weight method.
    #[arg(long, value_enum, default_value = "kl")]
    method: MethodArg,
    /// Token granularity for divergence methods (static/centroid ignore it).
    #[arg(long, value_enum, default_value = "last")]
    granularity: GranularityArg,
    /// Centroid set (.cen.json); required iff --method centroid.
    #[arg(long)]
    centroids: Option<PathBuf>,
    /// Softmax temperature for the centroid baseline.
    #[arg(long, default_value_t = 1.0)]
    temperature: f64,
    /// Degenerate-row threshold for weight normalization.
    #[arg(long, default_value_t = NORM_EPSILON_DEFAULT)]
    epsilon: f64,
    /// Fan adapter scoring out across threads (QAFLORA_THREADS caps it).
    #[arg(long)]
    parallel: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Emit a toy model and toy adapters.
    MakeToy {
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value_t = 2)]
        layers: usize,
        #[arg(long, default_value_t = 32)]
        dim: usize,
        #[arg(long, default_value_t = 4)]
        heads: usize,
        /// Feed-forward width (default 2·dim).
        #[arg(long)]
        ff: Option<usize>,
        #[arg(long, default_value_t = 259)]
        vocab: usize,
        #[arg(long = "max-seq", default_value_t = 256)]
        max_seq: usize,
        #[arg(long, value_enum, default_value = "rope")]
        positions: PositionsArg,
        /// Number of toy adapters to emit.
        #[arg(long, default_value_t = 2)]
        adapters: usize,
        #[arg(long, default_value_t = 4)]
        rank: usize,
        #[arg(long, default_value_t = 16.0)]
        scale: f64,
        /// Factor-entry magnitude (delta scales with its square).
        #[arg(long, default_value_t = 1.0)]
        magnitude: f64,
        #[arg(long = "out-dir", default_value = ".")]
        out_dir: PathBuf,
    },
    /// Compute fusion weights (and divergence profiles) for a query file.
    Weights {
        #[command(flatten)]
        run: RunConfig,
        /// UTF-8 query file, one query per line.
        #[arg(long)]
        queries: PathBuf,
        /// Divergence profile output (.csv or .json); divergence methods only.
        #[arg(long = "profile-out")]
        profile_out: Option<PathBuf>,
        /// Fusion weight output (.csv or .json).
        #[arg(long = "weights-out")]
        weights_out: Option<PathBuf>,
        /// Echo all results as one JSON document.
        #[arg(long = "json-out")]
        json_out: Option<PathBuf>,
    },
    /// Fused generation for a single prompt.
    Generate {
        #[command(flatten)]
        run: RunConfig,
        #[arg(long)]
        prompt: String,
        #[arg(long = "max-new-tokens", default_value_t = 64)]
        max_new_tokens: usize,
        /// Sampling temperature; greedy when absent.
        #[arg(long = "sample-temperature")]
        sample_temperature: Option<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Stop token id, repeatable.
        #[arg(long = "stop-token")]
        stop_tokens: Vec<u32>,
        /// Experimental: refresh weights every N generated tokens (0 = never).
        #[arg(long = "recompute-every", default_value_t = 0)]
        recompute_every: usize,
        /// Write the raw continuation bytes here as well as stdout.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long = "json-out")]
        json_out: Option<PathBuf>,
    },
    /// Mean normalized layer profile across a query file.
    Profile {
        /// Model container (.lmt).
        #[arg(long)]
        model: PathBuf,
        #[arg(long = "adapter", required = true)]
        adapters: Vec<PathBuf>,
        #[arg(long)]
        queries: PathBuf,
        #[arg(long, value_enum, default_value = "kl")]
        measure: MeasureArg,
        #[arg(long, value_enum, default_value = "last")]
        granularity: GranularityArg,
        /// Output path (.csv or .json).
        #[arg(long)]
        out: PathBuf,
        #[arg(long = "json-out")]
        json_out: Option<PathBuf>,
        #[arg(long)]
        parallel: bool,
    },
    /// Build a centroid set from per-adapter sample files.
    Centroids {
        #[arg(long)]
        model: PathBuf,
        #[arg(long = "adapter", required = true)]
        adapters: Vec<PathBuf>,
        /// Per-adapter sample file as id=path, repeatable (one per adapter).
        #[arg(long = "samples", required = true)]
        samples: Vec<String>,
        #[arg(long, value_enum, default_value = "mean")]
        pooling: PoolingArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Latency report over a query file (JSON).
    Bench {
        #[arg(long)]
        model: PathBuf,
        #[arg(long = "adapter", required = true)]
        adapters: Vec<PathBuf>,
        #[arg(long)]
        queries: PathBuf,
        #[arg(long)]
        parallel: bool,
        #[arg(long = "decode-tokens", default_value_t = 16)]
        decode_tokens: usize,
        #[arg(long = "json-out")]
        json_out: Option<PathBuf>,
    },
    /// Score predictions against gold answers (JSON ScoredSet).
    Score {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gold: PathBuf,
        #[arg(long, value_enum, default_value = "numeric")]
        mode: ModeArg,
        /// Use the first number in each text instead of the last.
        #[arg(long = "first-number")]
        first_number: bool,
        #[arg(long = "json-out")]
        json_out: Option<PathBuf>,
    },
}

/// Parse `argv` and run; returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            // clap renders --help/--version through the same path.
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn thread_cap() -> Result<usize> {
    match std::env::var("QAFLORA_THREADS") {
        Ok(v) => v.parse::<usize>().ok().filter(|&n| n > 0).ok_or(Error::Input {
            message: format!("QAFLORA_THREADS must be a positive integer, got {v:?}"),
        }),
        Err(_) => Ok(default_thread_cap()),
    }
}

fn read_query_lines(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, &e))?;
    let lines: Vec<String> = text.lines().map(str::to_string).collect();
    if lines.is_empty() {
        return Err(Error::Input {
            message: format!("{}: no queries", path.display()),
        });
    }
    Ok(lines)
}

fn load_registry(paths: &[PathBuf]) -> Result<AdapterRegistry> {
    let adapters = paths.iter().map(|p| load_adapter(p)).collect::<Result<Vec<_>>>()?;
    AdapterRegistry::new(adapters)
}

/// Insert `.q{index}` after the file stem when a run covers several queries.
fn per_query_path(path: &Path, index: usize, total: usize) -> PathBuf {
    if total == 1 {
        return path.to_path_buf();
    }
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("out");
    let tagged = match name.split_once('.') {
        Some((stem, rest)) => format!("{stem}.q{index}.{rest}"),
        None => format!("{name}.q{index}"),
    };
    path.with_file_name(tagged)
}

struct WeightOutcome {
    query_id: String,
    profile: Option<DivergenceProfile>,
    weights: FusionWeights,
}

fn weights_for_query(
    model: &BaseModel,
    registry: &AdapterRegistry,
    run: &RunConfig,
    tokens: &[u32],
    query_id: String,
    threads: usize,
) -> Result<WeightOutcome> {
    match run.method {
        MethodArg::Static => Ok(WeightOutcome {
            query_id,
            profile: None,
            weights: static_weights(model.config().n_layers, registry.ids())?,
        }),
        MethodArg::Centroid => {
            let path = run.centroids.as_ref().ok_or_else(|| Error::Input {
                message: "--method centroid requires --centroids".to_string(),
            })?;
            let set = load_centroids(path)?;
            Ok(WeightOutcome {
                query_id,
                profile: None,
                weights: centroid_weights(model, &set, tokens, run.temperature)?,
            })
        }
        method => {
            let options = ProfileOptions {
                parallel: run.parallel,
                max_threads: threads,
                query_id: Some(query_id.clone()),
            };
            let profile = divergence_profile_with(
                model,
                registry,
                tokens,
                method.measure().expect("divergence method"),
                run.granularity.into(),
                &options,
            )?;
            let weights = qa_flora_weights(&profile, run.epsilon)?;
            Ok(WeightOutcome {
                query_id,
                profile: Some(profile),
                weights,
            })
        }
    }
}

fn write_json_doc(path: &Path, value: &serde_json::Value) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Format {
        field: "json",
        message: e.to_string(),
    })?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, &e))
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::MakeToy {
            seed,
            layers,
            dim,
            heads,
            ff,
            vocab,
            max_seq,
            positions,
            adapters,
            rank,
            scale,
            magnitude,
            out_dir,
        } => {
            let config = ModelConfig {
                n_layers: layers,
                d_model: dim,
                n_heads: heads,
                d_ff: ff.unwrap_or(2 * dim),
                vocab_size: vocab,
                max_seq_len: max_seq,
                norm_eps: 1e-5,
                positions: match positions {
                    PositionsArg::Rope => PositionEncoding::Rope,
                    PositionsArg::Learned => PositionEncoding::Learned,
                },
                lens_apply_final_norm: true,
                adapter_stream_mode: crate::model::AdapterStreamMode::Merged,
            };
            let model = make_toy_model(seed, &config)?;
            std::fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, &e))?;
            let model_path = out_dir.join("toy.lmt");
            save_model(&model_path, &model)?;
            println!("{}", model_path.display());
            for j in 0..adapters {
                let adapter = make_toy_adapter(
                    format!("adapter{j}"),
                    seed + 1 + j as u64,
                    &model,
                    rank,
                    scale,
                    None,
                    magnitude,
                )?;
                let path = out_dir.join(format!("adapter{j}.lat"));
                save_adapter(&path, &adapter)?;
                println!("{}", path.display());
            }
            Ok(())
        }
        Command::Weights {
            run,
            queries,
            profile_out,
            weights_out,
            json_out,
        } => {
            let model = load_model(&run.model)?;
            let registry = load_registry(&run.adapters)?;
            let lines = read_query_lines(&queries)?;
            let threads = thread_cap()?;
            let tokenizer = ByteTokenizer::new();
            let mut outcomes = Vec::with_capacity(lines.len());
            for (i, line) in lines.iter().enumerate() {
                let tokens = tokenizer.encode_str(line);
                outcomes.push(weights_for_query(
                    &model,
                    &registry,
                    &run,
                    &tokens,
                    format!("q{i}"),
                    threads,
                )?);
            }
            for (i, outcome) in outcomes.iter().enumerate() {
                if let Some(base) = &profile_out {
                    match &outcome.profile {
                        Some(profile) => {
                            let path = per_query_path(base, i, outcomes.len());
                            export_profile(profile, &path, ExportFormat::from_path(&path)?)?;
                        }
                        None => {
                            return Err(Error::Input {
                                message: format!(
                                    "--profile-out is only available for divergence methods, not {}",
                                    run.method.name()
                                ),
                            })
                        }
                    }
                }
                if let Some(base) = &weights_out {
                    let path = per_query_path(base, i, outcomes.len());
                    export_weights(&outcome.weights, &path, ExportFormat::from_path(&path)?)?;
                }
            }
            if let Some(path) = &json_out {
                let doc = json!({
                    "command": "weights",
                    "method": run.method.name(),
                    "queries": outcomes.iter().map(|o| json!({
                        "query_id": o.query_id,
                        "profile": o.profile,
                        "weights": o.weights,
                    })).collect::<Vec<_>>(),
                });
                write_json_doc(path, &doc)?;
            }
            for outcome in &outcomes {
                println!(
                    "{}: {} layers x {} adapters",
                    outcome.query_id,
                    outcome.weights.n_layers(),
                    outcome.weights.k()
                );
            }
            Ok(())
        }
        Command::Generate {
            run,
            prompt,
            max_new_tokens,
            sample_temperature,
            seed,
            stop_tokens,
            recompute_every,
            out,
            json_out,
        } => {
            let model = load_model(&run.model)?;
            let registry = load_registry(&run.adapters)?;
            let threads = thread_cap()?;
            let tokenizer = ByteTokenizer::new();
            let tokens = tokenizer.encode_str(&prompt);
            let params = GenParams {
                max_new_tokens,
                sampling: match sample_temperature {
                    Some(t) => Sampling::Temperature(t),
                    None => Sampling::Greedy,
                },
                seed,
                stop_tokens,
            };
            let (continuation, weights) = match run.method {
                MethodArg::Kl | MethodArg::Cosine | MethodArg::Euclid => {
                    let spec = AdaptiveSpec {
                        measure: run.method.measure().expect("divergence method"),
                        granularity: run.granularity.into(),
                        epsilon: run.epsilon,
                        recompute_every,
                        parallel: run.parallel,
                        max_threads: threads,
                    };
                    generate_adaptive(&model, &registry, &tokens, &params, &spec)?
                }
                _ => {
                    if recompute_every != 0 {
                        return Err(Error::Input {
                            message: "--recompute-every needs a divergence method".to_string(),
                        });
                    }
                    let outcome = weights_for_query(
                        &model,
                        &registry,
                        &run,
                        &tokens,
                        "prompt".to_string(),
                        threads,
                    )?;
                    let text =
                        generate(&model, &registry, &outcome.weights, &tokens, &params)?;
                    (text, outcome.weights)
                }
            };
            let bytes = tokenizer.decode(&continuation);
            println!("{}", String::from_utf8_lossy(&bytes));
            if let Some(path) = &out {
                std::fs::write(path, &bytes).map_err(|e| Error::io(path, &e))?;
            }
            if let Some(path) = &json_out {
                let doc = json!({
                    "command": "generate",
                    "method": run.method.name(),
                    "prompt": prompt,
                    "weights": weights,
                    "tokens": continuation,
                    "text": String::from_utf8_lossy(&bytes),
                });
                write_json_doc(path, &doc)?;
            }
            Ok(())
        }
        Command::Profile {
            model,
            adapters,
            queries,
            measure,
            granularity,
            out,
            json_out,
            parallel,
        } => {
            let model = load_model(&model)?;
            let registry = load_registry(&adapters)?;
            let lines = read_query_lines(&queries)?;
            let threads = thread_cap()?;
            let tokenizer = ByteTokenizer::new();
            let mut profiles = Vec::with_capacity(lines.len());
            for (i, line) in lines.iter().enumerate() {
                let options = ProfileOptions {
                    parallel,
                    max_threads: threads,
                    query_id: Some(format!("q{i}")),
                };
                profiles.push(divergence_profile_with(
                    &model,
                    &registry,
                    &tokenizer.encode_str(line),
                    measure.into(),
                    granularity.into(),
                    &options,
                )?);
            }
            let mean = mean_normalized_profile(&profiles)?;
            export_profile(&mean, &out, ExportFormat::from_path(&out)?)?;
            if let Some(path) = &json_out {
                write_json_doc(path, &json!({ "command": "profile", "mean": mean }))?;
            }
            println!(
                "{}: {} layers x {} adapters over {} queries",
                mean.query_id,
                mean.n_layers(),
                mean.k(),
                lines.len()
            );
            Ok(())
        }
        Command::Centroids {
            model,
            adapters,
            samples,
            pooling,
            out,
        } => {
            let model = load_model(&model)?;
            let registry = load_registry(&adapters)?;
            let tokenizer = ByteTokenizer::new();
            let mut by_id: BTreeMap<String, Vec<Vec<u32>>> = BTreeMap::new();
            for spec in &samples {
                let (id, path) = spec.split_once('=').ok_or_else(|| Error::Input {
                    message: format!("--samples expects id=path, got {spec:?}"),
                })?;
                let lines = read_query_lines(Path::new(path))?;
                by_id.insert(
                    id.to_string(),
                    lines.iter().map(|l| tokenizer.encode_str(l)).collect(),
                );
            }
            let set = build_centroids(&model, &registry, &by_id, pooling.into())?;
            save_centroids(&out, &set)?;
            println!("{}", out.display());
            Ok(())
        }
        Command::Bench {
            model,
            adapters,
            queries,
            parallel,
            decode_tokens,
            json_out,
        } => {
            let model = load_model(&model)?;
            let registry = load_registry(&adapters)?;
            let lines = read_query_lines(&queries)?;
            let tokenizer = ByteTokenizer::new();
            let query_tokens: Vec<Vec<u32>> =
                lines.iter().map(|l| tokenizer.encode_str(l)).collect();
            let options = BenchOptions {
                parallel,
                max_threads: thread_cap()?,
                decode_tokens,
                ..BenchOptions::default()
            };
            let report = bench_latency(&model, &registry, &query_tokens, &options)?;
            let doc = serde_json::to_value(&report).map_err(|e| Error::Format {
                field: "json",
                message: e.to_string(),
            })?;
            println!(
                "{}",
                serde_json::to_string_pretty(&doc).expect("report serializes")
            );
            if let Some(path) = &json_out {
                write_json_doc(path, &doc)?;
            }
            Ok(())
        }
        Command::Score {
            pred,
            gold,
            mode,
            first_number,
            json_out,
        } => {
            let predictions = read_query_lines(&pred)?;
            let golds = read_query_lines(&gold)?;
            let convention = if first_number {
                NumberConvention::First
            } else {
                NumberConvention::Last
            };
            let scored = score_set_with(&predictions, &golds, mode.into(), convention)?;
            let doc = serde_json::to_value(&scored).map_err(|e| Error::Format {
                field: "json",
                message: e.to_string(),
            })?;
            println!(
                "{}",
                serde_json::to_string_pretty(&doc).expect("score serializes")
            );
            if let Some(path) = &json_out {
                write_json_doc(path, &doc)?;
            }
            Ok(())
        }
    }
}
