//! JSONL dataset manifests: one record per line binding media references,
//! typed context references, question, and answer (or options) for a sample.

use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::encoders::VisualPayload;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Classify,
    Identify,
    Caption,
    Retrieve,
    Mcq,
    Ad,
}

impl Task {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "classify" => Some(Self::Classify),
            "identify" => Some(Self::Identify),
            "caption" => Some(Self::Caption),
            "retrieve" => Some(Self::Retrieve),
            "mcq" => Some(Self::Mcq),
            "ad" => Some(Self::Ad),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Classify => "classify",
            Self::Identify => "identify",
            Self::Caption => "caption",
            Self::Retrieve => "retrieve",
            Self::Mcq => "mcq",
            Self::Ad => "ad",
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "train" => Some(Self::Train),
            "val" => Some(Self::Val),
            "test" => Some(Self::Test),
            _ => None,
        }
    }
}

/// A run of frames: a synthetic seed with a frame count, or a row span in
/// the embedding file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MediaRef {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frames: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rows: Option<(u64, u64)>,
}

impl MediaRef {
    pub fn payload(&self) -> VisualPayload {
        match (self.seed, self.rows) {
            (Some(seed), _) => VisualPayload::synthetic(seed, self.frames.unwrap_or(1)),
            (None, Some((a, b))) => VisualPayload::rows(a, b),
            _ => unreachable!("validated at load"),
        }
    }
}

pub fn payload_of(media: &[MediaRef]) -> VisualPayload {
    let mut frames = Vec::new();
    for m in media {
        frames.extend(m.payload().frames);
    }
    VisualPayload::new(frames)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BankEntry {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rows: Option<(u64, u64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase", deny_unknown_fields)]
pub enum ContextRef {
    /// Character photos with names; `present` is the training ground truth
    /// (identify) or the photos to attach (other tasks).
    Characters {
        bank: Vec<BankEntry>,
        #[serde(default)]
        present: Vec<String>,
    },
    /// A plot file plus either a retrieval query or a (t, duration) pair for
    /// temporal ratio sampling; `w` overrides the window size.
    Plot {
        file: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        query: Option<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        t: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        duration: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        w: Option<usize>,
    },
    /// A subtitle file and the clip span to pull overlapping lines from.
    Subtitle { file: String, start: f64, end: f64 },
    /// Past clips by record id, oldest first.
    History { ids: Vec<String> },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub id: String,
    pub task: Task,
    pub split: Split,
    pub media: Vec<MediaRef>,
    #[serde(default)]
    pub contexts: Vec<ContextRef>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub question: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub options: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timestamp: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group: Option<String>,
}

fn schema_err(line: usize, field: &str, msg: &str) -> HarnessError {
    HarnessError::SchemaError {
        line,
        field: field.to_string(),
        msg: msg.to_string(),
    }
}

fn validate_media(line: usize, field: &str, media: &[MediaRef]) -> Result<(), HarnessError> {
    if media.is_empty() {
        return Err(schema_err(line, field, "needs at least one media entry"));
    }
    for m in media {
        match (m.seed, m.rows) {
            (Some(_), Some(_)) | (None, None) => {
                return Err(schema_err(line, field, "exactly one of seed/rows per entry"))
            }
            (Some(_), None) => {
                if m.frames == Some(0) {
                    return Err(schema_err(line, field, "frames must be >= 1"));
                }
            }
            (None, Some((a, b))) => {
                if b <= a {
                    return Err(schema_err(line, field, "row span must be non-empty"));
                }
                if m.frames.is_some() {
                    return Err(schema_err(line, field, "frames only applies to seeds"));
                }
            }
        }
    }
    Ok(())
}

fn validate_record(record: &ManifestRecord, line: usize) -> Result<(), HarnessError> {
    if record.id.is_empty() {
        return Err(schema_err(line, "id", "must be nonempty"));
    }
    validate_media(line, "media", &record.media)?;
    match record.task {
        Task::Mcq => {
            if record.options.len() != 5 {
                return Err(schema_err(
                    line,
                    "options",
                    &format!("mcq needs exactly 5 options, got {}", record.options.len()),
                ));
            }
            match record.gold {
                Some(g) if g < 5 => {}
                Some(g) => return Err(schema_err(line, "gold", &format!("index {g} out of range"))),
                None => return Err(schema_err(line, "gold", "mcq needs a gold index")),
            }
        }
        _ => {
            if !record.options.is_empty() {
                return Err(schema_err(line, "options", "only mcq records carry options"));
            }
            if record.gold.is_some() {
                return Err(schema_err(line, "gold", "only mcq records carry a gold index"));
            }
        }
    }
    for (ci, ctx) in record.contexts.iter().enumerate() {
        let field = format!("contexts[{ci}]");
        match ctx {
            ContextRef::Characters { bank, present } => {
                if bank.is_empty() {
                    return Err(schema_err(line, &field, "bank must be nonempty"));
                }
                let mut names = BTreeSet::new();
                for e in bank {
                    match (e.seed, e.rows) {
                        (Some(_), None) | (None, Some(_)) => {}
                        _ => {
                            return Err(schema_err(line, &field, "bank entries need seed xor rows"))
                        }
                    }
                    if !names.insert(e.name.clone()) {
                        return Err(schema_err(line, &field, &format!("duplicate name {:?}", e.name)));
                    }
                }
                for p in present {
                    if !names.contains(p) {
                        return Err(schema_err(
                            line,
                            &field,
                            &format!("present name {p:?} not in bank"),
                        ));
                    }
                }
            }
            ContextRef::Plot {
                query, t, duration, ..
            } => {
                let temporal = t.is_some() && duration.is_some();
                if query.is_some() == temporal {
                    return Err(schema_err(
                        line,
                        &field,
                        "plot needs either a query or both t and duration",
                    ));
                }
                if let Some(d) = duration {
                    if *d <= 0.0 {
                        return Err(schema_err(line, &field, "duration must be positive"));
                    }
                }
            }
            ContextRef::Subtitle { start, end, .. } => {
                if start > end {
                    return Err(schema_err(line, &field, "span start after end"));
                }
            }
            ContextRef::History { ids } => {
                if ids.is_empty() {
                    return Err(schema_err(line, &field, "history needs at least one id"));
                }
            }
        }
    }
    Ok(())
}

/// Load and validate a JSONL manifest. Side files (plots, subtitles) resolve
/// relative to `plots_dir`/`subs_dir` when given, else the manifest's
/// directory; history ids must name records in the same manifest (with
/// timestamps).
pub fn load_manifest(path: &Path) -> Result<Vec<ManifestRecord>, HarnessError> {
    load_manifest_with(path, None, None)
}

pub fn load_manifest_with(
    path: &Path,
    plots_dir: Option<&Path>,
    subs_dir: Option<&Path>,
) -> Result<Vec<ManifestRecord>, HarnessError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| HarnessError::Io(path.display().to_string(), e.to_string()))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut records = Vec::new();
    let mut ids = BTreeSet::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let record: ManifestRecord =
            serde_json::from_str(raw).map_err(|e| HarnessError::ParseError {
                line,
                msg: e.to_string(),
            })?;
        validate_record(&record, line)?;
        if !ids.insert(record.id.clone()) {
            return Err(schema_err(line, "id", &format!("duplicate id {:?}", record.id)));
        }
        records.push(record);
    }
    // Cross-record and side-file resolution.
    for record in &records {
        for ctx in &record.contexts {
            match ctx {
                ContextRef::Plot { file, .. } => {
                    let p = resolve(base, plots_dir, file);
                    if !p.exists() {
                        return Err(HarnessError::DanglingRef {
                            id: record.id.clone(),
                            reference: p.display().to_string(),
                        });
                    }
                }
                ContextRef::Subtitle { file, .. } => {
                    let p = resolve(base, subs_dir, file);
                    if !p.exists() {
                        return Err(HarnessError::DanglingRef {
                            id: record.id.clone(),
                            reference: p.display().to_string(),
                        });
                    }
                }
                ContextRef::History { ids: hist } => {
                    for h in hist {
                        let Some(target) = records.iter().find(|r| &r.id == h) else {
                            return Err(HarnessError::DanglingRef {
                                id: record.id.clone(),
                                reference: h.clone(),
                            });
                        };
                        if target.timestamp.is_none() {
                            return Err(HarnessError::DanglingRef {
                                id: record.id.clone(),
                                reference: format!("{h} (no timestamp)"),
                            });
                        }
                    }
                }
                ContextRef::Characters { .. } => {}
            }
        }
    }
    Ok(records)
}

pub fn resolve(manifest_dir: &Path, override_dir: Option<&Path>, file: &str) -> PathBuf {
    let f = Path::new(file);
    if f.is_absolute() {
        return f.to_path_buf();
    }
    match override_dir {
        Some(d) => d.join(f),
        None => manifest_dir.join(f),
    }
}

/// FNV-1a hash of the manifest bytes, for checkpoint provenance warnings.
pub fn manifest_hash(path: &Path) -> Result<String, HarnessError> {
    let bytes = std::fs::read(path)
        .map_err(|e| HarnessError::Io(path.display().to_string(), e.to_string()))?;
    Ok(format!("{:016x}", crate::rng::hash_bytes(&bytes)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_manifest(dir: &Path, content: &str) -> PathBuf {
        let p = dir.join("m.jsonl");
        std::fs::write(&p, content).unwrap();
        p
    }

    #[test]
    fn empty_file_is_empty_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_manifest(dir.path(), "");
        assert!(load_manifest(&p).unwrap().is_empty());
    }

    #[test]
    fn minimal_record_parses() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_manifest(
            dir.path(),
            r#"{"id":"a","task":"caption","split":"train","media":[{"seed":3,"frames":8}],"question":"describe","answer":"a man walks"}"#,
        );
        let records = load_manifest(&p).unwrap();
        assert_eq!(records.len(), 1);
        assert_eq!(records[0].task, Task::Caption);
        assert_eq!(payload_of(&records[0].media).num_frames(), 8);
    }

    #[test]
    fn bad_json_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_manifest(
            dir.path(),
            "{\"id\":\"a\",\"task\":\"caption\",\"split\":\"train\",\"media\":[{\"seed\":1}]}\nnot json\n",
        );
        match load_manifest(&p) {
            Err(HarnessError::ParseError { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn four_option_mcq_names_options_field() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_manifest(
            dir.path(),
            r#"{"id":"q","task":"mcq","split":"test","media":[{"seed":1}],"question":"why","options":["a","b","c","d"],"gold":0}"#,
        );
        match load_manifest(&p) {
            Err(HarnessError::SchemaError { field, .. }) => assert_eq!(field, "options"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn missing_plot_file_is_a_dangling_ref() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_manifest(
            dir.path(),
            r#"{"id":"a","task":"caption","split":"train","media":[{"seed":1}],"contexts":[{"type":"plot","file":"nope.txt","query":"x"}],"answer":"y"}"#,
        );
        assert!(matches!(
            load_manifest(&p),
            Err(HarnessError::DanglingRef { .. })
        ));
    }

    #[test]
    fn history_ids_must_exist_and_have_timestamps() {
        let dir = tempfile::tempdir().unwrap();
        let good = r#"{"id":"h1","task":"ad","split":"train","media":[{"seed":1}],"answer":"x","timestamp":1.0}"#;
        let p = write_manifest(
            dir.path(),
            &format!(
                "{good}\n{}",
                r#"{"id":"c","task":"ad","split":"train","media":[{"seed":2}],"contexts":[{"type":"history","ids":["h2"]}],"answer":"y","timestamp":2.0}"#
            ),
        );
        assert!(matches!(
            load_manifest(&p),
            Err(HarnessError::DanglingRef { reference, .. }) if reference == "h2"
        ));
    }

    #[test]
    fn media_needs_exactly_one_source() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_manifest(
            dir.path(),
            r#"{"id":"a","task":"caption","split":"train","media":[{"seed":1,"rows":[0,4]}],"answer":"x"}"#,
        );
        assert!(matches!(
            load_manifest(&p),
            Err(HarnessError::SchemaError { field, .. }) if field == "media"
        ));
    }

    #[test]
    fn duplicate_ids_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let row = r#"{"id":"a","task":"caption","split":"train","media":[{"seed":1}],"answer":"x"}"#;
        let p = write_manifest(dir.path(), &format!("{row}\n{row}"));
        assert!(matches!(
            load_manifest(&p),
            Err(HarnessError::SchemaError { field, .. }) if field == "id"
        ));
    }

    #[test]
    fn plot_needs_query_xor_temporal() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("p.txt"), "a sentence\n").unwrap();
        let both = r#"{"id":"a","task":"caption","split":"train","media":[{"seed":1}],"contexts":[{"type":"plot","file":"p.txt","query":"x","t":1.0,"duration":2.0}],"answer":"y"}"#;
        let p = write_manifest(dir.path(), both);
        assert!(load_manifest(&p).is_err());
        let neither = r#"{"id":"a","task":"caption","split":"train","media":[{"seed":1}],"contexts":[{"type":"plot","file":"p.txt"}],"answer":"y"}"#;
        let p = write_manifest(dir.path(), neither);
        assert!(load_manifest(&p).is_err());
    }
}
