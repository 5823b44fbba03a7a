//! Turn manifest records into interleaved samples: resolve side files,
//! apply context toggles and budgets, sample frames per task, and render
//! packed prompts for dumps.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use super::config::RunConfig;
use super::manifest::{payload_of, ContextRef, ManifestRecord, Task};
use super::HarnessError;
use crate::encoders::text::HashTextEmbedder;
use crate::encoders::VisualPayload;
use crate::instructions::{
    character_segments, history_segments, plot_segments, sample_plot_rag,
    sample_plot_temporal, subtitle_segments, CharacterBank, HistoryEntry, HistoryMode, Plot,
    SubtitleTrack, TemplateFamily, TemplateSpec, IDENTIFY_QUESTION, NONE_ANSWER,
};
use crate::rng::stream;
use crate::seqcore::{
    InterleavedSample, PackedSequence, Role, Segment, SegmentTag, Slot, Vocabulary,
};

/// Which context sources are allowed into prompts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Toggles {
    pub img: bool,
    pub plot: bool,
    pub sub: bool,
    pub hist: bool,
}

impl Toggles {
    pub fn all() -> Self {
        Self {
            img: true,
            plot: true,
            sub: true,
            hist: true,
        }
    }

    pub fn none() -> Self {
        Self {
            img: false,
            plot: false,
            sub: false,
            hist: false,
        }
    }

    /// Parse "img,plot,sub,hist" (any subset; empty or "none" disables all).
    pub fn parse(s: &str) -> Result<Self, HarnessError> {
        let mut t = Self::none();
        let s = s.trim();
        if s.is_empty() || s == "none" {
            return Ok(t);
        }
        for part in s.split(',') {
            match part.trim() {
                "img" => t.img = true,
                "plot" => t.plot = true,
                "sub" => t.sub = true,
                "hist" => t.hist = true,
                other => {
                    return Err(HarnessError::Config(format!(
                        "unknown context toggle {other:?}"
                    )))
                }
            }
        }
        Ok(t)
    }
}

impl std::fmt::Display for Toggles {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let mut parts = Vec::new();
        if self.img {
            parts.push("img");
        }
        if self.plot {
            parts.push("plot");
        }
        if self.sub {
            parts.push("sub");
        }
        if self.hist {
            parts.push("hist");
        }
        if parts.is_empty() {
            f.write_str("none")
        } else {
            f.write_str(&parts.join(","))
        }
    }
}

/// Everything needed to build instructions out of records: resolved side
/// files, toggles, budgets, history mode, and (for recurrent inference) the
/// predictions accumulated so far.
pub struct Builder<'a> {
    pub config: &'a RunConfig,
    pub vocab: &'a Vocabulary,
    pub toggles: Toggles,
    pub mode: HistoryMode,
    pub rephrase: bool,
    /// Cap on history entries per sample (ablation axis); None keeps all.
    pub history_limit: Option<usize>,
    /// Override for the plot/subtitle token budget (ablation axis).
    pub context_budget: Option<usize>,
    manifest_dir: PathBuf,
    by_id: HashMap<String, ManifestRecord>,
    plots: HashMap<String, Plot>,
    subs: HashMap<String, SubtitleTrack>,
    embedder: HashTextEmbedder,
    templates: BTreeMap<&'static str, TemplateSpec>,
}

impl<'a> Builder<'a> {
    pub fn new(
        config: &'a RunConfig,
        vocab: &'a Vocabulary,
        records: &[ManifestRecord],
        manifest_path: &Path,
        toggles: Toggles,
        mode: HistoryMode,
    ) -> Self {
        let by_id = records.iter().map(|r| (r.id.clone(), r.clone())).collect();
        let seed = config.seed;
        let mut templates = BTreeMap::new();
        for family in [
            TemplateFamily::Ia,
            TemplateFamily::Ib,
            TemplateFamily::II,
            TemplateFamily::III,
            TemplateFamily::IV,
        ] {
            let spec = match &config.paths.templates_dir {
                Some(dir) => {
                    let path = dir.join(format!("{}.txt", family.as_str()));
                    if path.exists() {
                        TemplateSpec::from_file(family, &path, stream(seed, 0x7061)).ok()
                    } else {
                        None
                    }
                }
                None => None,
            }
            .unwrap_or_else(|| TemplateSpec::builtin(family, stream(seed, 0x7061)));
            templates.insert(family.as_str(), spec);
        }
        Self {
            config,
            vocab,
            toggles,
            mode,
            rephrase: config.rephrase,
            history_limit: None,
            context_budget: None,
            manifest_dir: manifest_path
                .parent()
                .unwrap_or(Path::new("."))
                .to_path_buf(),
            by_id,
            plots: HashMap::new(),
            subs: HashMap::new(),
            embedder: HashTextEmbedder::new(config.embed_dim, stream(seed, 0x656d62)),
            templates,
        }
    }

    fn budget(&self) -> usize {
        self.context_budget.unwrap_or(self.config.context_budget)
    }

    fn plot(&mut self, file: &str) -> Result<Plot, HarnessError> {
        if !self.plots.contains_key(file) {
            let path = super::manifest::resolve(
                &self.manifest_dir,
                self.config.paths.plots_dir.as_deref(),
                file,
            );
            let plot = Plot::load(&path)?;
            self.plots.insert(file.to_string(), plot);
        }
        Ok(self.plots[file].clone())
    }

    fn subtitles(&mut self, file: &str) -> Result<SubtitleTrack, HarnessError> {
        if !self.subs.contains_key(file) {
            let path = super::manifest::resolve(
                &self.manifest_dir,
                self.config.paths.subs_dir.as_deref(),
                file,
            );
            let track = SubtitleTrack::load(&path)?;
            self.subs.insert(file.to_string(), track);
        }
        Ok(self.subs[file].clone())
    }

    fn clip_payload(&self, record: &ManifestRecord) -> VisualPayload {
        let payload = payload_of(&record.media);
        match self.config.frames_for(record.task) {
            Some(n) => payload.subsample(n),
            None => payload,
        }
    }

    fn bank_of(entries: &[super::manifest::BankEntry]) -> Result<CharacterBank, HarnessError> {
        let mut bank = CharacterBank::new();
        for e in entries {
            let payload = match (e.seed, e.rows) {
                (Some(seed), _) => VisualPayload::synthetic(seed, 1),
                (None, Some((a, _))) => VisualPayload::rows(a, a + 1), // photos are one frame
                _ => unreachable!("validated at load"),
            };
            bank.insert(&e.name, payload)?;
        }
        Ok(bank)
    }

    /// Ground-truth name set of a record's characters context, if any.
    pub fn present_names(record: &ManifestRecord) -> Option<Vec<String>> {
        record.contexts.iter().find_map(|c| match c {
            ContextRef::Characters { present, .. } => Some(present.clone()),
            _ => None,
        })
    }

    /// The character bank carried by a record, if any.
    pub fn bank(record: &ManifestRecord) -> Result<Option<CharacterBank>, HarnessError> {
        for c in &record.contexts {
            if let ContextRef::Characters { bank, .. } = c {
                return Ok(Some(Self::bank_of(bank)?));
            }
        }
        Ok(None)
    }

    fn history_entries(
        &self,
        ids: &[String],
        record_id: &str,
    ) -> Result<Vec<HistoryEntry>, HarnessError> {
        let mut entries = Vec::new();
        for id in ids {
            let target = self.by_id.get(id).ok_or_else(|| HarnessError::DanglingRef {
                id: record_id.to_string(),
                reference: id.clone(),
            })?;
            entries.push(HistoryEntry {
                id: target.id.clone(),
                clip: {
                    let p = payload_of(&target.media);
                    match self.config.frames_for(target.task) {
                        Some(n) => p.subsample(n),
                        None => p,
                    }
                },
                narration: target.answer.clone().unwrap_or_default(),
                timestamp: target.timestamp.unwrap_or(0.0),
            });
        }
        entries.sort_by(|a, b| a.timestamp.partial_cmp(&b.timestamp).unwrap());
        if let Some(limit) = self.history_limit {
            let skip = entries.len().saturating_sub(limit);
            entries.drain(..skip);
        }
        Ok(entries)
    }

    fn default_family(&self, record: &ManifestRecord) -> TemplateFamily {
        if record.task == Task::Identify {
            return TemplateFamily::Ia;
        }
        for c in &record.contexts {
            match c {
                ContextRef::History { .. }
                    if self.toggles.hist && self.history_limit != Some(0) =>
                {
                    return TemplateFamily::IV
                }
                ContextRef::Plot { .. } if self.toggles.plot => return TemplateFamily::II,
                ContextRef::Subtitle { .. } if self.toggles.sub => return TemplateFamily::III,
                ContextRef::Characters { .. } if self.toggles.img => return TemplateFamily::Ib,
                _ => {}
            }
        }
        TemplateFamily::Ib
    }

    /// Build the interleaved sample for one record, honoring the toggles.
    /// `predictions` feeds recurrent history narrations; `with_answer`
    /// controls whether the training answer is attached.
    pub fn build(
        &mut self,
        record: &ManifestRecord,
        predictions: &BTreeMap<String, String>,
        with_answer: bool,
    ) -> Result<InterleavedSample, HarnessError> {
        let budget = self.budget();
        let mut context: Vec<Segment> = Vec::new();
        let mut bank_names: Vec<String> = Vec::new();
        for ctx in &record.contexts {
            match ctx {
                ContextRef::Characters { bank, present } => {
                    if !self.toggles.img {
                        continue;
                    }
                    let cb = Self::bank_of(bank)?;
                    bank_names = cb.names().map(str::to_string).collect();
                    let pairs: Vec<(&str, &VisualPayload)> = if record.task == Task::Identify {
                        cb.iter().collect()
                    } else {
                        cb.iter()
                            .filter(|(n, _)| present.iter().any(|p| p == n))
                            .collect()
                    };
                    let preamble = if record.task == Task::Identify {
                        crate::instructions::IDENTIFY_PREAMBLE
                    } else {
                        crate::instructions::SUPPORT_PREAMBLE
                    };
                    context.extend(character_segments(&pairs, preamble, self.vocab)?);
                }
                ContextRef::Plot {
                    file,
                    query,
                    t,
                    duration,
                    w,
                } => {
                    if !self.toggles.plot || budget == 0 {
                        continue;
                    }
                    let w = w.unwrap_or(self.config.plot_window);
                    let (q, t, d) = (query.clone(), *t, *duration);
                    let plot = self.plot(file)?;
                    let text = match q {
                        Some(q) => sample_plot_rag(&plot, &q, &self.embedder)?,
                        None => sample_plot_temporal(&plot, t.unwrap(), d.unwrap(), w),
                    };
                    context.extend(plot_segments(&text, self.vocab, budget));
                }
                ContextRef::Subtitle { file, start, end } => {
                    if !self.toggles.sub || budget == 0 {
                        continue;
                    }
                    let (s, e) = (*start, *end);
                    let track = self.subtitles(file)?;
                    context.extend(subtitle_segments(&track, (s, e), self.vocab, budget));
                }
                ContextRef::History { ids } => {
                    if !self.toggles.hist {
                        continue;
                    }
                    let entries = self.history_entries(ids, &record.id)?;
                    if entries.is_empty() {
                        // A zero history budget drops the context entirely,
                        // matching the no-history variant.
                        continue;
                    }
                    context.extend(history_segments(&entries, self.mode, predictions, self.vocab)?);
                }
            }
        }
        context.push(Segment::video(
            Role::Context,
            SegmentTag::General,
            self.clip_payload(record),
        )?);

        let family = self.default_family(record);
        let question = match (&record.question, record.task) {
            (Some(q), _) => q.clone(),
            (None, Task::Identify) => IDENTIFY_QUESTION.to_string(),
            (None, _) => self.templates[family.as_str()].variants[0].clone(),
        };
        let answer: String = if !with_answer {
            String::new()
        } else {
            match record.task {
                Task::Identify => {
                    let present = Self::present_names(record).unwrap_or_default();
                    if bank_names.is_empty() {
                        // Image context toggled off: fall back to the raw set.
                        if present.is_empty() {
                            NONE_ANSWER.to_string()
                        } else {
                            present.join(", ")
                        }
                    } else {
                        let ordered: Vec<&str> = bank_names
                            .iter()
                            .map(String::as_str)
                            .filter(|n| present.iter().any(|p| p == n))
                            .collect();
                        if ordered.is_empty() {
                            NONE_ANSWER.to_string()
                        } else {
                            ordered.join(", ")
                        }
                    }
                }
                Task::Mcq => record.options[record.gold.expect("validated")].clone(),
                _ => record
                    .answer
                    .clone()
                    .ok_or_else(|| HarnessError::MissingAnswer {
                        id: record.id.clone(),
                    })?,
            }
        };

        let mut sample = InterleavedSample::new(
            record.id.clone(),
            context,
            self.vocab.tokenize(&question),
            self.vocab.tokenize(&answer),
        );
        if self.rephrase && with_answer && record.question.is_none() {
            sample = crate::instructions::rephrase(
                &self.templates[family.as_str()],
                &sample,
                self.vocab,
                &bank_names,
            )?;
        }
        Ok(sample)
    }
}

/// Deterministic vocabulary over everything the records and templates can
/// emit, in manifest order. Words missing at evaluation time fall back to
/// byte tokens, so this only affects granularity.
pub fn build_vocab(
    config: &RunConfig,
    records: &[ManifestRecord],
    manifest_path: &Path,
) -> Result<Vocabulary, HarnessError> {
    let mut texts: Vec<String> = vec![
        crate::instructions::IDENTIFY_PREAMBLE.into(),
        crate::instructions::SUPPORT_PREAMBLE.into(),
        IDENTIFY_QUESTION.into(),
        NONE_ANSWER.into(),
        "Yes No is and a video Based on the plot and the video".into(),
        crate::instructions::NO_DIALOGUE.into(),
        "There are video clips, ordered from the past to present:".into(),
    ];
    for family in ["ia", "ib", "ii", "iii", "iv"] {
        let spec = TemplateSpec::builtin(TemplateFamily::parse(family).unwrap(), 0);
        texts.extend(spec.variants.iter().cloned());
    }
    if let Some(dir) = &config.paths.templates_dir {
        for family in ["ia", "ib", "ii", "iii", "iv"] {
            let p = dir.join(format!("{family}.txt"));
            if p.exists() {
                let spec =
                    TemplateSpec::from_file(TemplateFamily::parse(family).unwrap(), &p, 0)?;
                texts.extend(spec.variants.iter().cloned());
            }
        }
    }
    // Counting numbers for plausible history sizes.
    texts.push((0..=32).map(|n| n.to_string()).collect::<Vec<_>>().join(" "));
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    for record in records {
        if let Some(q) = &record.question {
            texts.push(q.clone());
        }
        if let Some(a) = &record.answer {
            texts.push(a.clone());
        }
        texts.extend(record.options.iter().cloned());
        for ctx in &record.contexts {
            match ctx {
                ContextRef::Characters { bank, .. } => {
                    for e in bank {
                        texts.push(e.name.clone());
                        texts.push(format!("{} ,", e.name));
                    }
                    // Comma-joined identify answers introduce "name," words.
                    for e in bank {
                        texts.push(format!("{},", e.name));
                    }
                }
                ContextRef::Plot { file, query, .. } => {
                    if let Some(q) = query {
                        texts.push(q.clone());
                    }
                    let path =
                        super::manifest::resolve(base, config.paths.plots_dir.as_deref(), file);
                    texts.push(std::fs::read_to_string(&path).map_err(|e| {
                        HarnessError::Io(path.display().to_string(), e.to_string())
                    })?);
                }
                ContextRef::Subtitle { file, .. } => {
                    let path =
                        super::manifest::resolve(base, config.paths.subs_dir.as_deref(), file);
                    let track = SubtitleTrack::load(&path)?;
                    let all: Vec<&crate::instructions::SubtitleLine> = track.lines().iter().collect();
                    texts.push(SubtitleTrack::render(&all));
                }
                ContextRef::History { .. } => {}
            }
        }
    }
    if let Some(labels) = &config.labels {
        texts.extend(labels.iter().cloned());
    }
    Ok(Vocabulary::from_texts(texts.iter().map(String::as_str)))
}

/// Human-readable rendering of a packed sequence: decoded token runs with
/// `<vid>` markers at visual slots. Used for prompt dumps and toggle checks.
pub fn render_prompt(packed: &PackedSequence, vocab: &Vocabulary) -> Result<String, HarnessError> {
    let mut parts: Vec<String> = Vec::new();
    let mut run: Vec<u32> = Vec::new();
    for slot in &packed.slots {
        match slot {
            Slot::Token(t) => {
                if *t == crate::seqcore::EOS {
                    if !run.is_empty() {
                        parts.push(vocab.decode(&run)?);
                        run.clear();
                    }
                    parts.push("<eos>".to_string());
                } else {
                    run.push(*t);
                }
            }
            Slot::Visual(j) => {
                if !run.is_empty() {
                    parts.push(vocab.decode(&run)?);
                    run.clear();
                }
                parts.push(format!("<vid:{j}>"));
            }
        }
    }
    if !run.is_empty() {
        parts.push(vocab.decode(&run)?);
    }
    Ok(parts.join(" "))
}
