//! Command-line interface. Exit codes: 0 success, 1 usage error, 2 data
//! error (files, schemas, checkpoints), 3 runtime error.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use super::build::{render_prompt, Builder, Toggles};
use super::manifest::{ManifestRecord, Split, Task};
use super::run::{run_eval, run_train, EvalOptions, TrainOptions};
use super::sweep::{run_ablation_sweep, SweepAxis, SweepOptions};
use super::{HarnessError, RunConfig};
use crate::encoders::text::{FileTextEmbedder, HashTextEmbedder, TextEmbedder};
use crate::instructions::{sample_plot_rag_with, HistoryMode, Plot, RagAggregation};
use crate::lm::{generate, load_checkpoint};
use crate::rng::stream;
use crate::seqcore::{pack, pack_prefix, Vocabulary};

#[derive(Parser)]
#[command(
    name = "movieseq",
    about = "Interleaved multimodal instruction tuning for narrative video tasks",
    version
)]
struct Cli {
    /// Flat `key = value` config file; flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run seed override.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct CommonBuild {
    /// Dataset manifest (JSONL).
    #[arg(long)]
    manifest: PathBuf,
    /// Context sources to include: comma list of img,plot,sub,hist (default all).
    #[arg(long, default_value = "img,plot,sub,hist")]
    toggle: String,
    /// History narration source: oracle (annotations) or recurrent (model output).
    #[arg(long, default_value = "oracle")]
    mode: String,
    /// Preloaded predictions JSONL ({"id", "prediction"}) for recurrent mode.
    #[arg(long)]
    preload: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Construct instructions and dump rendered prompts as JSONL.
    BuildInstructions {
        #[command(flatten)]
        common: CommonBuild,
        /// Output JSONL path.
        #[arg(long)]
        out: PathBuf,
        /// Restrict to one split (train/val/test/all).
        #[arg(long, default_value = "all")]
        split: String,
    },
    /// Train on the manifest's train split, checkpointing each epoch.
    Train {
        #[command(flatten)]
        common: CommonBuild,
        /// Output directory for checkpoints, vocab, and the loss log.
        #[arg(long)]
        out_dir: PathBuf,
        /// Epoch count override.
        #[arg(long)]
        epochs: Option<usize>,
        /// Resume from the latest epoch checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Greedy-decode one record's answer.
    Generate {
        #[command(flatten)]
        common: CommonBuild,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Record id to generate for.
        #[arg(long)]
        id: String,
    },
    /// Evaluate a checkpoint on one task and write a report.
    Eval {
        #[command(flatten)]
        common: CommonBuild,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Task to evaluate: classify, identify, caption, retrieve, mcq, ad.
        #[arg(long)]
        task: String,
        #[arg(long)]
        out_dir: PathBuf,
        /// Split to evaluate (train/val/test/all).
        #[arg(long, default_value = "test")]
        split: String,
        /// Also dump every constructed prompt to prompts.jsonl.
        #[arg(long)]
        dump_prompts: bool,
        /// Comma-separated label set override for classification.
        #[arg(long)]
        labels: Option<String>,
    },
    /// Print the top-1 plot paragraph for a query.
    RetrievePlot {
        #[arg(long)]
        query: String,
        /// Plot file: one sentence per line, blank line between paragraphs.
        #[arg(long)]
        plot: PathBuf,
        /// Optional precomputed sentence embeddings (binary table).
        #[arg(long)]
        embeddings: Option<PathBuf>,
        /// Sentence sidecar for --embeddings (one sentence per line).
        #[arg(long)]
        sentences: Option<PathBuf>,
        /// Paragraph scoring: max or mean over sentence similarities.
        #[arg(long, default_value = "max")]
        agg: String,
    },
    /// Sweep a data-construction axis and emit a metric-vs-axis CSV.
    Sweep {
        #[command(flatten)]
        common: CommonBuild,
        /// Axis spec: history_n=0,2,4 or plot_tokens=0,64,512.
        #[arg(long)]
        axis: String,
        #[arg(long)]
        out_dir: PathBuf,
        /// Checkpoint to re-evaluate (omit with --retrain).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Retrain per axis value instead of re-evaluating.
        #[arg(long)]
        retrain: bool,
        #[arg(long)]
        task: String,
        #[arg(long, default_value = "test")]
        split: String,
    },
}

fn parse_mode(s: &str) -> Result<HistoryMode, HarnessError> {
    match s {
        "oracle" => Ok(HistoryMode::Oracle),
        "recurrent" => Ok(HistoryMode::Recurrent),
        other => Err(HarnessError::Config(format!("unknown mode {other:?}"))),
    }
}

fn parse_split(s: &str) -> Result<Option<Split>, HarnessError> {
    if s == "all" {
        return Ok(None);
    }
    Split::parse(s)
        .map(Some)
        .ok_or_else(|| HarnessError::Config(format!("unknown split {s:?}")))
}

fn parse_task(s: &str) -> Result<Task, HarnessError> {
    Task::parse(s).ok_or_else(|| HarnessError::Config(format!("unknown task {s:?}")))
}

fn load_preload(path: Option<&Path>) -> Result<BTreeMap<String, String>, HarnessError> {
    let Some(path) = path else {
        return Ok(BTreeMap::new());
    };
    let text = std::fs::read_to_string(path)
        .map_err(|e| HarnessError::Io(path.display().to_string(), e.to_string()))?;
    let mut map = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let v: serde_json::Value =
            serde_json::from_str(line).map_err(|e| HarnessError::ParseError {
                line: i + 1,
                msg: e.to_string(),
            })?;
        let id = v.get("id").and_then(|x| x.as_str()).ok_or_else(|| {
            HarnessError::ParseError {
                line: i + 1,
                msg: "missing id".into(),
            }
        })?;
        let pred = v
            .get("prediction")
            .and_then(|x| x.as_str())
            .ok_or_else(|| HarnessError::ParseError {
                line: i + 1,
                msg: "missing prediction".into(),
            })?;
        map.insert(id.to_string(), pred.to_string());
    }
    Ok(map)
}

fn load_config(cli_config: Option<&Path>, seed: Option<u64>) -> Result<RunConfig, HarnessError> {
    let mut config = match cli_config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = seed {
        config.seed = s;
    }
    Ok(config)
}

/// Order records the way evaluation walks them: group, then timestamp, then id.
fn eval_order(records: &mut [ManifestRecord]) {
    records.sort_by(|a, b| {
        let ga = a.group.as_deref().unwrap_or("");
        let gb = b.group.as_deref().unwrap_or("");
        ga.cmp(gb)
            .then(
                a.timestamp
                    .unwrap_or(0.0)
                    .partial_cmp(&b.timestamp.unwrap_or(0.0))
                    .unwrap(),
            )
            .then(a.id.cmp(&b.id))
    });
}

fn build_instructions(
    config: &RunConfig,
    common: &CommonBuild,
    out: &Path,
    split: Option<Split>,
) -> Result<(), HarnessError> {
    let records = load_manifest_with_config(config, &common.manifest)?;
    let vocab = super::build_vocab(config, &records, &common.manifest)?;
    let toggles = Toggles::parse(&common.toggle)?;
    let mode = parse_mode(&common.mode)?;
    let mut predictions = load_preload(common.preload.as_deref())?;
    let mut builder = Builder::new(config, &vocab, &records, &common.manifest, toggles, mode);
    builder.rephrase = config.rephrase;
    let mut selected: Vec<ManifestRecord> = records
        .iter()
        .filter(|r| split.map_or(true, |s| r.split == s))
        .cloned()
        .collect();
    eval_order(&mut selected);
    let mut dump = String::new();
    for record in &selected {
        let with_answer = record.answer.is_some()
            || record.task == Task::Identify
            || record.task == Task::Mcq;
        let sample = builder.build(record, &predictions, with_answer)?;
        let answer_text = vocab.decode(&sample.answer)?;
        let prefix = pack_prefix(&sample, &vocab, config.lm.max_len)?;
        let n_slots = if with_answer {
            pack(&sample, &vocab, config.lm.max_len)?.len()
        } else {
            prefix.len()
        };
        let row = serde_json::json!({
            "id": record.id,
            "prompt": render_prompt(&prefix, &vocab)?,
            "answer": answer_text,
            "n_slots": n_slots,
            "n_visual": prefix.visual_slots.len(),
        });
        dump.push_str(&serde_json::to_string(&row).expect("serializable"));
        dump.push('\n');
        // In recurrent mode downstream records see the oracle text here,
        // standing in for a model prediction.
        if record.task == Task::Ad {
            if let Some(a) = &record.answer {
                predictions.entry(record.id.clone()).or_insert_with(|| a.clone());
            }
        }
    }
    std::fs::write(out, dump).map_err(|e| HarnessError::Io(out.display().to_string(), e.to_string()))
}

fn load_manifest_with_config(
    config: &RunConfig,
    path: &Path,
) -> Result<Vec<ManifestRecord>, HarnessError> {
    super::manifest::load_manifest_with(
        path,
        config.paths.plots_dir.as_deref(),
        config.paths.subs_dir.as_deref(),
    )
}

fn generate_one(
    config: &RunConfig,
    common: &CommonBuild,
    checkpoint: &Path,
    id: &str,
) -> Result<String, HarnessError> {
    let records = load_manifest_with_config(config, &common.manifest)?;
    let record = records
        .iter()
        .find(|r| r.id == id)
        .ok_or_else(|| HarnessError::DanglingRef {
            id: id.to_string(),
            reference: "record id".into(),
        })?
        .clone();
    let vocab = {
        let beside = checkpoint.parent().map(|d| d.join("vocab.txt"));
        match beside.filter(|p| p.exists()) {
            Some(p) => Vocabulary::load(&p)?,
            None => super::build_vocab(config, &records, &common.manifest)?,
        }
    };
    let (state, _) = load_checkpoint(checkpoint, None)?;
    let encoder = match &config.paths.embeddings {
        Some(p) => crate::encoders::FrameEncoder::File(crate::encoders::EmbeddingTable::load(p)?),
        None => crate::encoders::FrameEncoder::Toy {
            seed: stream(state.seed, 0x746f79),
            d_v: state.proj_cfg().d_v,
        },
    };
    let toggles = Toggles::parse(&common.toggle)?;
    let mode = parse_mode(&common.mode)?;
    let predictions = load_preload(common.preload.as_deref())?;
    let mut builder = Builder::new(config, &vocab, &records, &common.manifest, toggles, mode);
    let sample = builder.build(&record, &predictions, false)?;
    let prefix = pack_prefix(&sample, &vocab, state.cfg.max_len)?;
    let budget = state
        .cfg
        .max_new_tokens
        .min(state.cfg.max_len.saturating_sub(prefix.len()));
    let tokens = generate(&state, &prefix, &encoder, budget)?;
    Ok(vocab.decode(&tokens)?)
}

fn retrieve_plot(
    config: &RunConfig,
    query: &str,
    plot_path: &Path,
    embeddings: Option<&Path>,
    sentences: Option<&Path>,
    agg: &str,
) -> Result<String, HarnessError> {
    let plot = Plot::load(plot_path)?;
    let agg = match agg {
        "max" => RagAggregation::MaxSentence,
        "mean" => RagAggregation::MeanSentence,
        other => {
            return Err(HarnessError::Config(format!(
                "unknown aggregation {other:?}"
            )))
        }
    };
    let text = match (embeddings, sentences) {
        (Some(e), Some(s)) => {
            let embedder = FileTextEmbedder::load(e, s)?;
            sample_plot_rag_with(&plot, query, &embedder, agg)?
        }
        (None, None) => {
            let embedder: HashTextEmbedder =
                HashTextEmbedder::new(config.embed_dim, stream(config.seed, 0x656d62));
            let _: &dyn TextEmbedder = &embedder;
            sample_plot_rag_with(&plot, query, &embedder, agg)?
        }
        _ => {
            return Err(HarnessError::Config(
                "--embeddings and --sentences go together".into(),
            ))
        }
    };
    Ok(text)
}

fn dispatch(cli: Cli) -> Result<(), HarnessError> {
    let config = load_config(cli.config.as_deref(), cli.seed)?;
    match cli.cmd {
        Cmd::BuildInstructions { common, out, split } => {
            let split = parse_split(&split)?;
            build_instructions(&config, &common, &out, split)
        }
        Cmd::Train {
            common,
            out_dir,
            epochs,
            resume,
        } => {
            let mut config = config;
            if let Some(e) = epochs {
                config.epochs = e;
            }
            let records = load_manifest_with_config(&config, &common.manifest)?;
            let mut opts = TrainOptions::new(out_dir);
            opts.toggles = Toggles::parse(&common.toggle)?;
            opts.resume = resume;
            let final_path = run_train(&config, &records, &common.manifest, &opts)?;
            println!("{}", final_path.display());
            Ok(())
        }
        Cmd::Generate {
            common,
            checkpoint,
            id,
        } => {
            let text = generate_one(&config, &common, &checkpoint, &id)?;
            println!("{text}");
            Ok(())
        }
        Cmd::Eval {
            common,
            checkpoint,
            task,
            out_dir,
            split,
            dump_prompts,
            labels,
        } => {
            let mut config = config;
            if let Some(l) = labels {
                config.labels = Some(l.split(',').map(|s| s.trim().to_string()).collect());
            }
            let records = load_manifest_with_config(&config, &common.manifest)?;
            let task = parse_task(&task)?;
            let mut opts = EvalOptions::new(out_dir);
            opts.toggles = Toggles::parse(&common.toggle)?;
            opts.mode = parse_mode(&common.mode)?;
            opts.split = parse_split(&split)?;
            opts.dump_prompts = dump_prompts;
            opts.preload = load_preload(common.preload.as_deref())?;
            let outcome = run_eval(&config, &checkpoint, &records, &common.manifest, task, &opts)?;
            for (k, v) in &outcome.metrics {
                println!("{k}\t{v:.6}");
            }
            Ok(())
        }
        Cmd::RetrievePlot {
            query,
            plot,
            embeddings,
            sentences,
            agg,
        } => {
            let text = retrieve_plot(
                &config,
                &query,
                &plot,
                embeddings.as_deref(),
                sentences.as_deref(),
                &agg,
            )?;
            println!("{text}");
            Ok(())
        }
        Cmd::Sweep {
            common,
            axis,
            out_dir,
            checkpoint,
            retrain,
            task,
            split,
        } => {
            let records = load_manifest_with_config(&config, &common.manifest)?;
            let axis = SweepAxis::parse(&axis)?;
            let opts = SweepOptions {
                task: parse_task(&task)?,
                toggles: Toggles::parse(&common.toggle)?,
                mode: parse_mode(&common.mode)?,
                split: parse_split(&split)?,
                out_dir,
                retrain,
            };
            let rows = run_ablation_sweep(
                &config,
                &records,
                &common.manifest,
                checkpoint.as_deref(),
                &axis,
                &opts,
            )?;
            for row in &rows {
                for (metric, value) in &row.metrics {
                    println!("{},{metric},{value:.6}", row.axis_value);
                }
            }
            Ok(())
        }
    }
}

/// Entry point used by the binary; returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            // clap prints help/version to stdout with success status.
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(err) => {
            eprintln!("error: {err}");
            err.exit_code()
        }
    }
}
