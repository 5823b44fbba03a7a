//! Training and evaluation runs: seeded epoch loops with per-epoch f32
//! checkpoints, and task-dispatched evaluation with prediction dumps and
//! deterministic JSON reports.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::build::{build_vocab, render_prompt, Builder, Toggles};
use super::config::RunConfig;
use super::manifest::{manifest_hash, ManifestRecord, Split, Task};
use super::HarnessError;
use crate::adapters::{
    answer_mcq, normalize, parse_identified_names, retrieve_from_captions, score_multilabel,
    LabelSet,
};
use crate::encoders::text::HashTextEmbedder;
use crate::encoders::{EmbeddingTable, FrameEncoder};
use crate::instructions::HistoryMode;
use crate::lm::{generate, load_checkpoint, save_checkpoint, train_step, LMConfig, TrainState};
use crate::metrics::{bleu4, cider, rouge_l_corpus, Corpus, ParagraphGroup};
use crate::rng::{hash_bytes, stream, Rng};
use crate::seqcore::{pack, pack_prefix, Vocabulary};

pub struct TrainOptions {
    pub toggles: Toggles,
    pub out_dir: PathBuf,
    pub resume: bool,
    /// Cap on history entries per sample (ablation axis); None keeps all.
    pub history_limit: Option<usize>,
    /// Override for the plot/subtitle token budget (ablation axis).
    pub context_budget: Option<usize>,
}

impl TrainOptions {
    pub fn new(out_dir: PathBuf) -> Self {
        Self {
            toggles: Toggles::all(),
            out_dir,
            resume: false,
            history_limit: None,
            context_budget: None,
        }
    }
}

fn toy_encoder(seed: u64, d_v: usize) -> FrameEncoder {
    FrameEncoder::Toy {
        seed: stream(seed, 0x746f79),
        d_v,
    }
}

fn encoder_for(config: &RunConfig, seed: u64) -> Result<FrameEncoder, HarnessError> {
    match &config.paths.embeddings {
        Some(p) => Ok(FrameEncoder::File(EmbeddingTable::load(p)?)),
        None => Ok(toy_encoder(seed, config.proj.d_v)),
    }
}

fn epoch_ckpt_path(out_dir: &Path, epoch: usize) -> PathBuf {
    out_dir.join(format!("epoch_{epoch:04}.ckpt"))
}

fn last_epoch_checkpoint(out_dir: &Path) -> Option<(usize, PathBuf)> {
    let mut best: Option<(usize, PathBuf)> = None;
    let entries = std::fs::read_dir(out_dir).ok()?;
    for entry in entries.flatten() {
        let name = entry.file_name().to_string_lossy().into_owned();
        if let Some(num) = name
            .strip_prefix("epoch_")
            .and_then(|s| s.strip_suffix(".ckpt"))
        {
            if let Ok(e) = num.parse::<usize>() {
                if best.as_ref().map_or(true, |(b, _)| e > *b) {
                    best = Some((e, entry.path()));
                }
            }
        }
    }
    best
}

/// Select training records: train split only, optionally capped per task
/// with a seeded sample, preserving manifest order.
fn select_train(records: &[ManifestRecord], config: &RunConfig) -> Vec<ManifestRecord> {
    let train: Vec<(usize, &ManifestRecord)> = records
        .iter()
        .enumerate()
        .filter(|(_, r)| r.split == Split::Train)
        .collect();
    let Some(limit) = config.per_task_limit else {
        return train.into_iter().map(|(_, r)| r.clone()).collect();
    };
    let mut keep: BTreeSet<usize> = BTreeSet::new();
    let tasks: BTreeSet<&str> = train.iter().map(|(_, r)| r.task.as_str()).collect();
    for task in tasks {
        let mut idx: Vec<usize> = train
            .iter()
            .filter(|(_, r)| r.task.as_str() == task)
            .map(|(i, _)| *i)
            .collect();
        let mut rng = Rng::new(stream(config.seed, hash_bytes(task.as_bytes())));
        rng.shuffle(&mut idx);
        keep.extend(idx.into_iter().take(limit));
    }
    records
        .iter()
        .enumerate()
        .filter(|(i, _)| keep.contains(i))
        .map(|(_, r)| r.clone())
        .collect()
}

/// Train for the configured number of epochs, checkpointing each epoch.
/// Parameters and optimizer moments are rounded to f32 at every epoch
/// boundary, so resuming from a checkpoint replays the uninterrupted
/// trajectory bit for bit. Returns the final checkpoint path.
pub fn run_train(
    config: &RunConfig,
    records: &[ManifestRecord],
    manifest_path: &Path,
    opts: &TrainOptions,
) -> Result<PathBuf, HarnessError> {
    let train = select_train(records, config);
    if train.is_empty() {
        return Err(HarnessError::NoTrainRecords);
    }
    std::fs::create_dir_all(&opts.out_dir)
        .map_err(|e| HarnessError::Io(opts.out_dir.display().to_string(), e.to_string()))?;
    let vocab_path = opts.out_dir.join("vocab.txt");

    let hash = manifest_hash(manifest_path)?;
    let mut extras: BTreeMap<String, String> = config.echo();
    extras.insert("manifest_hash".into(), hash.clone());
    extras.insert("toggles".into(), opts.toggles.to_string());

    let (mut state, vocab, start_epoch) = if opts.resume {
        let (epoch, path) = last_epoch_checkpoint(&opts.out_dir).ok_or_else(|| {
            HarnessError::Config(format!(
                "--resume found no epoch checkpoints in {}",
                opts.out_dir.display()
            ))
        })?;
        let vocab = Vocabulary::load(&vocab_path)?;
        let (state, old_extras) = load_checkpoint(&path, None)?;
        if old_extras.get("manifest_hash") != Some(&hash) {
            eprintln!("warning: manifest hash changed since the resumed checkpoint was written");
        }
        (state, vocab, epoch + 1)
    } else {
        let vocab = match &config.paths.vocab {
            Some(p) if p.exists() => Vocabulary::load(p)?,
            _ => build_vocab(config, &train, manifest_path)?,
        };
        vocab.save(&vocab_path)?;
        let lm_cfg = LMConfig {
            vocab_size: vocab.size(),
            ..config.lm
        };
        let state = TrainState::new(lm_cfg, config.proj, config.seed)?;
        (state, vocab, 0)
    };

    let encoder = encoder_for(config, state.seed)?;
    let mut builder = Builder::new(
        config,
        &vocab,
        records,
        manifest_path,
        opts.toggles,
        HistoryMode::Oracle,
    );
    builder.rephrase = config.rephrase;
    builder.history_limit = opts.history_limit;
    builder.context_budget = opts.context_budget;

    let loss_path = opts.out_dir.join("train_loss.csv");
    let mut loss_log = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&loss_path)
        .map_err(|e| HarnessError::Io(loss_path.display().to_string(), e.to_string()))?;
    if start_epoch == 0 {
        writeln!(loss_log, "step,loss")
            .map_err(|e| HarnessError::Io(loss_path.display().to_string(), e.to_string()))?;
    }

    let no_preds = BTreeMap::new();
    let mut last_path = epoch_ckpt_path(&opts.out_dir, start_epoch.saturating_sub(1));
    for epoch in start_epoch..config.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut rng = Rng::new(stream(state.seed, 0x65706f63 ^ epoch as u64));
        rng.shuffle(&mut order);
        for chunk in order.chunks(config.batch_size.max(1)) {
            let mut batch = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let sample = builder.build(&train[i], &no_preds, true)?;
                batch.push(pack(&sample, &vocab, state.cfg.max_len)?);
            }
            let loss = train_step(&mut state, &batch, &encoder)?;
            writeln!(loss_log, "{},{loss:.6}", state.step)
                .map_err(|e| HarnessError::Io(loss_path.display().to_string(), e.to_string()))?;
        }
        state.store.quantize_f32();
        let mut epoch_extras = extras.clone();
        epoch_extras.insert("epoch".into(), epoch.to_string());
        last_path = epoch_ckpt_path(&opts.out_dir, epoch);
        save_checkpoint(&state, &last_path, &epoch_extras)?;
    }

    let final_path = opts.out_dir.join("final.ckpt");
    let mut final_extras = extras;
    final_extras.insert("epoch".into(), config.epochs.saturating_sub(1).to_string());
    save_checkpoint(&state, &final_path, &final_extras)?;
    let _ = last_path;
    Ok(final_path)
}

pub struct EvalOptions {
    pub toggles: Toggles,
    pub mode: HistoryMode,
    pub split: Option<Split>,
    pub out_dir: PathBuf,
    pub dump_prompts: bool,
    pub preload: BTreeMap<String, String>,
    pub history_limit: Option<usize>,
    pub context_budget: Option<usize>,
}

impl EvalOptions {
    pub fn new(out_dir: PathBuf) -> Self {
        Self {
            toggles: Toggles::all(),
            mode: HistoryMode::Oracle,
            split: Some(Split::Test),
            out_dir,
            dump_prompts: false,
            preload: BTreeMap::new(),
            history_limit: None,
            context_budget: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct EvalOutcome {
    pub metrics: BTreeMap<String, f64>,
    pub predictions_path: PathBuf,
    pub report_path: PathBuf,
    pub n_records: usize,
}

#[derive(Serialize)]
struct PredictionRow<'a> {
    id: &'a str,
    task: &'a str,
    prediction: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    scores: Option<&'a [f64]>,
}

#[derive(Serialize)]
struct Report<'a> {
    task: &'a str,
    mode: &'a str,
    toggles: String,
    n_records: usize,
    config: &'a BTreeMap<String, String>,
    metrics: &'a BTreeMap<String, f64>,
    predictions: &'a str,
}

/// Locate the vocabulary for a checkpoint: vocab.txt beside it, else the
/// configured path.
fn vocab_for(checkpoint: &Path, config: &RunConfig) -> Result<Vocabulary, HarnessError> {
    let beside = checkpoint.parent().map(|d| d.join("vocab.txt"));
    if let Some(p) = beside.filter(|p| p.exists()) {
        return Ok(Vocabulary::load(&p)?);
    }
    match &config.paths.vocab {
        Some(p) => Ok(Vocabulary::load(p)?),
        None => Err(HarnessError::Config(
            "no vocabulary found beside the checkpoint and none configured".into(),
        )),
    }
}

/// Evaluate a checkpoint on records of one task, dispatching to the task
/// adapter. Recurrent mode walks records in (group, timestamp) order and
/// feeds each prediction back as history context for later clips.
pub fn run_eval(
    config: &RunConfig,
    checkpoint: &Path,
    records: &[ManifestRecord],
    manifest_path: &Path,
    task: Task,
    opts: &EvalOptions,
) -> Result<EvalOutcome, HarnessError> {
    let mut selected: Vec<ManifestRecord> = Vec::new();
    for r in records {
        if opts.split.is_some_and(|s| r.split != s) {
            continue;
        }
        if r.task != task {
            return Err(HarnessError::TaskMismatch {
                expected: task,
                got: r.task,
                id: r.id.clone(),
            });
        }
        selected.push(r.clone());
    }
    if selected.is_empty() {
        return Err(HarnessError::NoEvalRecords);
    }
    // Timestamped tasks evaluate oldest-first within each group, so
    // recurrent history can only ever see the past.
    selected.sort_by(|a, b| {
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

    std::fs::create_dir_all(&opts.out_dir)
        .map_err(|e| HarnessError::Io(opts.out_dir.display().to_string(), e.to_string()))?;
    let vocab = vocab_for(checkpoint, config)?;
    let (state, extras) = load_checkpoint(checkpoint, None)?;
    if let Some(h) = extras.get("manifest_hash") {
        if *h != manifest_hash(manifest_path)? {
            eprintln!("warning: evaluating against a different manifest than the checkpoint was trained on");
        }
    }
    let encoder = encoder_for(config, state.seed)?;
    let mut builder = Builder::new(config, &vocab, records, manifest_path, opts.toggles, opts.mode);
    builder.rephrase = false;
    builder.history_limit = opts.history_limit;
    builder.context_budget = opts.context_budget;

    let mut predictions: BTreeMap<String, String> = opts.preload.clone();
    let mut rows: Vec<(String, String, Option<Vec<f64>>)> = Vec::new();
    let mut prompts: Vec<(String, String)> = Vec::new();
    let mut metrics: BTreeMap<String, f64> = BTreeMap::new();

    let budget = |prefix_len: usize| {
        state
            .cfg
            .max_new_tokens
            .min(state.cfg.max_len.saturating_sub(prefix_len))
    };

    let generate_for = |builder: &mut Builder,
                            record: &ManifestRecord,
                            predictions: &BTreeMap<String, String>,
                            prompts: &mut Vec<(String, String)>|
     -> Result<String, HarnessError> {
        let sample = builder.build(record, predictions, false)?;
        let prefix = pack_prefix(&sample, &vocab, state.cfg.max_len)?;
        if opts.dump_prompts {
            prompts.push((record.id.clone(), render_prompt(&prefix, &vocab)?));
        }
        let tokens = generate(&state, &prefix, &encoder, budget(prefix.len()))?;
        Ok(vocab.decode(&tokens)?)
    };

    match task {
        Task::Classify => {
            let labels = match &config.labels {
                Some(l) => LabelSet::new(l.clone())?,
                None => {
                    let mut seen = Vec::new();
                    for r in &selected {
                        let a = r.answer.clone().ok_or_else(|| HarnessError::MissingAnswer {
                            id: r.id.clone(),
                        })?;
                        if !seen.iter().any(|s: &String| normalize(s) == normalize(&a)) {
                            seen.push(a);
                        }
                    }
                    LabelSet::new(seen)?
                }
            };
            let mut correct = 0usize;
            for record in &selected {
                let sample = builder.build(record, &predictions, false)?;
                if opts.dump_prompts {
                    let prefix = pack_prefix(&sample, &vocab, state.cfg.max_len)?;
                    prompts.push((record.id.clone(), render_prompt(&prefix, &vocab)?));
                }
                let label =
                    crate::adapters::classify(&state, &sample, &labels, &vocab, &encoder)?;
                let gold = record.answer.as_deref().unwrap_or("");
                if normalize(&label) == normalize(gold) {
                    correct += 1;
                }
                rows.push((record.id.clone(), label, None));
            }
            metrics.insert("accuracy".into(), correct as f64 / selected.len() as f64);
        }
        Task::Identify => {
            let mut pred_sets = Vec::new();
            let mut truth_sets = Vec::new();
            for record in &selected {
                let bank = Builder::bank(record)?.ok_or_else(|| HarnessError::DanglingRef {
                    id: record.id.clone(),
                    reference: "characters context".into(),
                })?;
                let text = generate_for(&mut builder, record, &predictions, &mut prompts)?;
                let names = parse_identified_names(&text, &bank);
                let truth: BTreeSet<String> = Builder::present_names(record)
                    .unwrap_or_default()
                    .into_iter()
                    .collect();
                let shown = if names.is_empty() {
                    crate::instructions::NONE_ANSWER.to_string()
                } else {
                    names.iter().cloned().collect::<Vec<_>>().join(", ")
                };
                rows.push((record.id.clone(), shown, None));
                pred_sets.push(names);
                truth_sets.push(truth);
            }
            let score = score_multilabel(&pred_sets, &truth_sets)?;
            metrics.insert("precision".into(), score.precision);
            metrics.insert("recall".into(), score.recall);
            metrics.insert("f1".into(), score.f1);
            let exact = pred_sets
                .iter()
                .zip(&truth_sets)
                .filter(|(p, t)| p == t)
                .count();
            metrics.insert("exact_match".into(), exact as f64 / pred_sets.len() as f64);
        }
        Task::Caption | Task::Ad => {
            let mut corpus = Corpus::new();
            let mut groups = ParagraphGroup::new();
            for record in &selected {
                let text = generate_for(&mut builder, record, &predictions, &mut prompts)?;
                let reference = record.answer.clone().ok_or_else(|| {
                    HarnessError::MissingAnswer {
                        id: record.id.clone(),
                    }
                })?;
                corpus.add(&record.id, &text, vec![reference])?;
                groups.push(record.group.as_deref().unwrap_or("all"), &text);
                predictions.insert(record.id.clone(), text.clone());
                rows.push((record.id.clone(), text, None));
            }
            metrics.insert("bleu4".into(), bleu4(&corpus));
            metrics.insert("rouge_l".into(), rouge_l_corpus(&corpus));
            if corpus.len() >= 2 {
                metrics.insert("cider".into(), cider(&corpus)?);
            }
            metrics.insert("rep4".into(), crate::metrics::rep4(&groups));
        }
        Task::Retrieve => {
            let mut captions = Vec::new();
            let mut queries = Vec::new();
            for record in &selected {
                let text = generate_for(&mut builder, record, &predictions, &mut prompts)?;
                queries.push(record.answer.clone().ok_or_else(|| {
                    HarnessError::MissingAnswer {
                        id: record.id.clone(),
                    }
                })?);
                rows.push((record.id.clone(), text.clone(), None));
                captions.push(text);
            }
            let embedder = HashTextEmbedder::new(config.embed_dim, stream(state.seed, 0x656d62));
            let r = retrieve_from_captions(&captions, &queries, &embedder)?;
            metrics.insert("r1".into(), r.r1);
            metrics.insert("r5".into(), r.r5);
            metrics.insert("r10".into(), r.r10);
            metrics.insert("geo_mean".into(), r.geometric_mean);
        }
        Task::Mcq => {
            let mut correct = 0usize;
            for record in &selected {
                let sample = builder.build(record, &predictions, false)?;
                if opts.dump_prompts {
                    let prefix = pack_prefix(&sample, &vocab, state.cfg.max_len)?;
                    prompts.push((record.id.clone(), render_prompt(&prefix, &vocab)?));
                }
                let choice = answer_mcq(&state, &sample, &record.options, &vocab, &encoder)?;
                if record.gold == Some(choice) {
                    correct += 1;
                }
                rows.push((record.id.clone(), record.options[choice].clone(), None));
            }
            metrics.insert("accuracy".into(), correct as f64 / selected.len() as f64);
        }
    }

    let predictions_path = opts.out_dir.join("predictions.jsonl");
    {
        let mut out = String::new();
        for (id, prediction, scores) in &rows {
            let row = PredictionRow {
                id,
                task: task.as_str(),
                prediction,
                scores: scores.as_deref(),
            };
            out.push_str(&serde_json::to_string(&row).expect("serializable"));
            out.push('\n');
        }
        std::fs::write(&predictions_path, out)
            .map_err(|e| HarnessError::Io(predictions_path.display().to_string(), e.to_string()))?;
    }
    if opts.dump_prompts {
        let prompts_path = opts.out_dir.join("prompts.jsonl");
        let mut out = String::new();
        for (id, prompt) in &prompts {
            out.push_str(
                &serde_json::to_string(&serde_json::json!({"id": id, "prompt": prompt}))
                    .expect("serializable"),
            );
            out.push('\n');
        }
        std::fs::write(&prompts_path, out)
            .map_err(|e| HarnessError::Io(prompts_path.display().to_string(), e.to_string()))?;
    }

    let mode_str = match opts.mode {
        HistoryMode::Oracle => "oracle",
        HistoryMode::Recurrent => "recurrent",
    };
    let config_echo = config.echo();
    let report = Report {
        task: task.as_str(),
        mode: mode_str,
        toggles: opts.toggles.to_string(),
        n_records: selected.len(),
        config: &config_echo,
        metrics: &metrics,
        predictions: "predictions.jsonl",
    };
    let report_path = opts.out_dir.join("report.json");
    std::fs::write(
        &report_path,
        serde_json::to_string_pretty(&report).expect("serializable") + "\n",
    )
    .map_err(|e| HarnessError::Io(report_path.display().to_string(), e.to_string()))?;

    let tsv_path = opts.out_dir.join("metrics.tsv");
    let mut tsv = String::new();
    for (k, v) in &metrics {
        tsv.push_str(&format!("{k}\t{v:.6}\n"));
    }
    std::fs::write(&tsv_path, tsv)
        .map_err(|e| HarnessError::Io(tsv_path.display().to_string(), e.to_string()))?;

    Ok(EvalOutcome {
        metrics,
        predictions_path,
        report_path,
        n_records: selected.len(),
    })
}
