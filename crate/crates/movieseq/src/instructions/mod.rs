//! Interleaved-instruction construction from the four context sources:
//! character photos, plots, subtitles, and clip history.

mod plot;
mod templates;

pub use plot::{
    sample_plot_rag, sample_plot_rag_with, sample_plot_temporal, Plot, RagAggregation,
};
pub use templates::{rephrase, TemplateFamily, TemplateSpec};

use std::collections::BTreeMap;
use std::path::Path;

use thiserror::Error;

use crate::encoders::{EncError, VisualPayload};
use crate::seqcore::{
    truncate_context, InterleavedSample, Keep, Role, Segment, SegmentTag, SeqError, Vocabulary,
};

#[derive(Debug, Error)]
pub enum InstrError {
    #[error("name {0:?} is not in the character bank")]
    UnknownName(String),
    #[error("character bank already has an entry for {0:?}")]
    DuplicateName(String),
    #[error("invalid character name {0:?} (must be nonempty, without whitespace or commas)")]
    InvalidName(String),
    #[error("no prediction available for history entry {0:?}")]
    MissingPrediction(String),
    #[error("plot has no sentences")]
    EmptyPlot,
    #[error("bad paragraph bounds: {0}")]
    BadParagraphBounds(String),
    #[error("subtitle line {line}: {msg}")]
    SubtitleParse { line: usize, msg: String },
    #[error("history timestamps must strictly increase: {0}")]
    BadTimestamps(String),
    #[error("mode b needs a query")]
    MissingQuery,
    #[error("template pool is empty")]
    EmptyPool,
    #[error(transparent)]
    Enc(#[from] EncError),
    #[error(transparent)]
    Seq(#[from] SeqError),
    #[error("{0}: {1}")]
    Io(String, String),
}

/// Ordered name -> photo mapping. Answers are canonicalized in bank order,
/// so the order is part of the task definition.
#[derive(Debug, Clone, Default)]
pub struct CharacterBank {
    entries: Vec<(String, VisualPayload)>,
}

impl CharacterBank {
    pub fn new() -> Self {
        Self::default()
    }

    /// Insert one character photo. Names must be unique, nonempty, and free
    /// of whitespace and commas so predictions can be parsed back.
    pub fn insert(&mut self, name: &str, photo: VisualPayload) -> Result<(), InstrError> {
        if name.is_empty() || name.chars().any(|c| c.is_whitespace() || c == ',') {
            return Err(InstrError::InvalidName(name.to_string()));
        }
        if self.entries.iter().any(|(n, _)| n == name) {
            return Err(InstrError::DuplicateName(name.to_string()));
        }
        self.entries.push((name.to_string(), photo));
        Ok(())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn get(&self, name: &str) -> Option<&VisualPayload> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, p)| p)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.get(name).is_some()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &VisualPayload)> {
        self.entries.iter().map(|(n, p)| (n.as_str(), p))
    }
}

#[derive(Debug, Clone)]
pub struct SubtitleLine {
    pub start: f64,
    pub end: f64,
    pub speaker: Option<String>,
    pub text: String,
}

/// Temporally sorted subtitle lines. File format is tab-separated
/// `start<TAB>end<TAB>speaker<TAB>text` with seconds as decimals and an
/// empty speaker field allowed.
#[derive(Debug, Clone)]
pub struct SubtitleTrack {
    lines: Vec<SubtitleLine>,
}

impl SubtitleTrack {
    pub fn new(mut lines: Vec<SubtitleLine>) -> Result<Self, InstrError> {
        for (i, l) in lines.iter().enumerate() {
            if l.start > l.end {
                return Err(InstrError::SubtitleParse {
                    line: i + 1,
                    msg: format!("start {} after end {}", l.start, l.end),
                });
            }
        }
        lines.sort_by(|a, b| a.start.partial_cmp(&b.start).unwrap());
        Ok(Self { lines })
    }

    pub fn parse(text: &str) -> Result<Self, InstrError> {
        let mut lines = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            if raw.trim().is_empty() {
                continue;
            }
            let mut parts = raw.splitn(4, '\t');
            let err = |msg: &str| InstrError::SubtitleParse {
                line: i + 1,
                msg: msg.to_string(),
            };
            let start: f64 = parts
                .next()
                .ok_or_else(|| err("missing start"))?
                .trim()
                .parse()
                .map_err(|_| err("bad start time"))?;
            let end: f64 = parts
                .next()
                .ok_or_else(|| err("missing end"))?
                .trim()
                .parse()
                .map_err(|_| err("bad end time"))?;
            let speaker = parts.next().ok_or_else(|| err("missing speaker field"))?;
            let text = parts.next().ok_or_else(|| err("missing text field"))?;
            lines.push(SubtitleLine {
                start,
                end,
                speaker: (!speaker.is_empty()).then(|| speaker.to_string()),
                text: text.to_string(),
            });
        }
        Self::new(lines)
    }

    pub fn load(path: &Path) -> Result<Self, InstrError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| InstrError::Io(path.display().to_string(), e.to_string()))?;
        Self::parse(&text)
    }

    pub fn lines(&self) -> &[SubtitleLine] {
        &self.lines
    }

    /// Lines overlapping the closed span [start, end], in temporal order.
    pub fn overlapping(&self, start: f64, end: f64) -> Vec<&SubtitleLine> {
        self.lines
            .iter()
            .filter(|l| l.start <= end && l.end >= start)
            .collect()
    }

    /// Render lines as `speaker: text` (or bare text), space-joined.
    pub fn render(lines: &[&SubtitleLine]) -> String {
        if lines.is_empty() {
            return NO_DIALOGUE.to_string();
        }
        lines
            .iter()
            .map(|l| match &l.speaker {
                Some(s) => format!("{s}: {}", l.text),
                None => l.text.clone(),
            })
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// Marker emitted when a clip span overlaps no subtitle lines.
pub const NO_DIALOGUE: &str = "no dialogue";

/// One past clip with its narration.
#[derive(Debug, Clone)]
pub struct HistoryEntry {
    pub id: String,
    pub clip: VisualPayload,
    pub narration: String,
    pub timestamp: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HistoryMode {
    /// Narrations come from ground-truth annotations.
    Oracle,
    /// Narrations come from the model's own earlier predictions.
    Recurrent,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CharacterMode {
    /// (i_a): list every bank photo, ask who is present.
    Identify,
    /// (i_b): attach the given photos as support for a free-form query.
    Support,
}

pub const IDENTIFY_PREAMBLE: &str = "There are several character photos:";
pub const SUPPORT_PREAMBLE: &str = "There have character photos:";
pub const IDENTIFY_QUESTION: &str = "Who can be found in this video? If not, output None.";
pub const NONE_ANSWER: &str = "None";

/// Photo/name pairs as context segments: preamble, then `photo` `is name ,`
/// per entry, closed with `and a video`.
pub(crate) fn character_segments(
    pairs: &[(&str, &VisualPayload)],
    preamble: &str,
    vocab: &Vocabulary,
) -> Result<Vec<Segment>, InstrError> {
    let mut segs = vec![Segment::text(
        Role::Context,
        SegmentTag::Character,
        vocab.tokenize(preamble),
    )];
    for (i, (name, photo)) in pairs.iter().enumerate() {
        segs.push(Segment::image(
            Role::Context,
            SegmentTag::Character,
            (*photo).clone(),
        )?);
        let glue = if i + 1 == pairs.len() {
            format!("is {name}")
        } else {
            format!("is {name} ,")
        };
        segs.push(Segment::text(
            Role::Context,
            SegmentTag::Character,
            vocab.tokenize(&glue),
        ));
    }
    segs.push(Segment::text(
        Role::Context,
        SegmentTag::Character,
        vocab.tokenize("and a video"),
    ));
    Ok(segs)
}

/// Build a character instruction. In `Identify` mode the context lists every
/// bank photo with its name and the answer is the present names in bank
/// order (or "None"); in `Support` mode only the named photos are attached
/// and the question is the caller's query.
pub fn build_character_instruction(
    bank: &CharacterBank,
    clip: &VisualPayload,
    mode: CharacterMode,
    present: &[String],
    query: Option<&str>,
    vocab: &Vocabulary,
    id: &str,
) -> Result<InterleavedSample, InstrError> {
    for name in present {
        if !bank.contains(name) {
            return Err(InstrError::UnknownName(name.clone()));
        }
    }
    let (pairs, question, answer): (Vec<(&str, &VisualPayload)>, Vec<u32>, Vec<u32>) = match mode {
        CharacterMode::Identify => {
            let pairs: Vec<_> = bank.iter().collect();
            let in_bank_order: Vec<&str> = bank
                .names()
                .filter(|n| present.iter().any(|p| p == n))
                .collect();
            let answer = if in_bank_order.is_empty() {
                NONE_ANSWER.to_string()
            } else {
                in_bank_order.join(", ")
            };
            (pairs, vocab.tokenize(IDENTIFY_QUESTION), vocab.tokenize(&answer))
        }
        CharacterMode::Support => {
            let query = query.ok_or(InstrError::MissingQuery)?;
            let pairs: Vec<_> = bank
                .iter()
                .filter(|(n, _)| present.iter().any(|p| p == n))
                .collect();
            (pairs, vocab.tokenize(query), Vec::new())
        }
    };
    let mut context = character_segments(&pairs, mode_preamble(mode), vocab)?;
    context.push(Segment::video(Role::Context, SegmentTag::General, clip.clone())?);
    Ok(InterleavedSample::new(id, context, question, answer))
}

fn mode_preamble(mode: CharacterMode) -> &'static str {
    match mode {
        CharacterMode::Identify => IDENTIFY_PREAMBLE,
        CharacterMode::Support => SUPPORT_PREAMBLE,
    }
}

/// Subtitle context segments: `Based on the` sub-text `and the video`, with
/// the subtitle content truncated to `budget` tokens keeping the tail.
pub(crate) fn subtitle_segments(
    track: &SubtitleTrack,
    span: (f64, f64),
    vocab: &Vocabulary,
    budget: usize,
) -> Vec<Segment> {
    let rendered = SubtitleTrack::render(&track.overlapping(span.0, span.1));
    let tokens = truncate_context(&vocab.tokenize(&rendered), budget, Keep::Tail);
    vec![
        Segment::text(Role::Context, SegmentTag::General, vocab.tokenize("Based on the")),
        Segment::text(Role::Context, SegmentTag::Subtitle, tokens),
        Segment::text(Role::Context, SegmentTag::General, vocab.tokenize("and the video")),
    ]
}

/// Build a subtitle instruction: every line overlapping the span, rendered
/// `speaker: text` in temporal order, then the clip. An empty overlap yields
/// the literal "no dialogue" marker.
pub fn build_subtitle_instruction(
    track: &SubtitleTrack,
    clip: &VisualPayload,
    span: (f64, f64),
    query: &str,
    vocab: &Vocabulary,
    budget: usize,
    id: &str,
) -> Result<InterleavedSample, InstrError> {
    let mut context = subtitle_segments(track, span, vocab, budget);
    context.push(Segment::video(Role::Context, SegmentTag::General, clip.clone())?);
    Ok(InterleavedSample::new(id, context, vocab.tokenize(query), Vec::new()))
}

/// Plot context segments: `Based on the plot` plot-text `and the video`,
/// with the plot truncated to `budget` tokens keeping the head.
pub(crate) fn plot_segments(plot_text: &str, vocab: &Vocabulary, budget: usize) -> Vec<Segment> {
    let tokens = truncate_context(&vocab.tokenize(plot_text), budget, Keep::Head);
    vec![
        Segment::text(Role::Context, SegmentTag::General, vocab.tokenize("Based on the plot")),
        Segment::text(Role::Context, SegmentTag::Plot, tokens),
        Segment::text(Role::Context, SegmentTag::General, vocab.tokenize("and the video")),
    ]
}

/// Build a plot instruction from already-sampled plot text.
pub fn build_plot_instruction(
    plot_text: &str,
    clip: &VisualPayload,
    query: &str,
    vocab: &Vocabulary,
    budget: usize,
    id: &str,
) -> Result<InterleavedSample, InstrError> {
    let mut context = plot_segments(plot_text, vocab, budget);
    context.push(Segment::video(Role::Context, SegmentTag::General, clip.clone())?);
    Ok(InterleavedSample::new(id, context, vocab.tokenize(query), Vec::new()))
}

/// History context segments: the counting sentence, then (clip, narration)
/// pairs oldest-first. The current clip is appended by the caller.
pub(crate) fn history_segments(
    history: &[HistoryEntry],
    mode: HistoryMode,
    predictions: &BTreeMap<String, String>,
    vocab: &Vocabulary,
) -> Result<Vec<Segment>, InstrError> {
    for w in history.windows(2) {
        if w[0].timestamp >= w[1].timestamp {
            return Err(InstrError::BadTimestamps(format!(
                "{} at {} then {} at {}",
                w[0].id, w[0].timestamp, w[1].id, w[1].timestamp
            )));
        }
    }
    let counting = format!(
        "There are {} video clips, ordered from the past to present:",
        history.len() + 1
    );
    let mut segs = vec![Segment::text(
        Role::Context,
        SegmentTag::History,
        vocab.tokenize(&counting),
    )];
    for entry in history {
        let narration = match mode {
            HistoryMode::Oracle => entry.narration.clone(),
            HistoryMode::Recurrent => predictions
                .get(&entry.id)
                .cloned()
                .ok_or_else(|| InstrError::MissingPrediction(entry.id.clone()))?,
        };
        segs.push(Segment::video(Role::Context, SegmentTag::History, entry.clip.clone())?);
        segs.push(Segment::text(
            Role::Context,
            SegmentTag::History,
            vocab.tokenize(&narration),
        ));
    }
    Ok(segs)
}

/// Build a history instruction: n past (clip, narration) pairs oldest-first
/// followed by the current clip. Narrations come from annotations (oracle)
/// or from `predictions` keyed by entry id (recurrent).
pub fn build_history_instruction(
    history: &[HistoryEntry],
    current: &VisualPayload,
    mode: HistoryMode,
    predictions: &BTreeMap<String, String>,
    query: &str,
    vocab: &Vocabulary,
    id: &str,
) -> Result<InterleavedSample, InstrError> {
    let mut context = history_segments(history, mode, predictions, vocab)?;
    context.push(Segment::video(Role::Context, SegmentTag::General, current.clone())?);
    Ok(InterleavedSample::new(id, context, vocab.tokenize(query), Vec::new()))
}


#[cfg(test)]
mod tests {
    use super::*;
    use crate::seqcore::SegmentKind;

    fn vocab() -> Vocabulary {
        Vocabulary::from_texts([
            "There are several character photos: is and a video Who can be found in this \
             video? If not, output None. Max, Eve Max Eve no dialogue Based on the sub \
             describe clip",
        ])
    }

    fn bank() -> CharacterBank {
        let mut b = CharacterBank::new();
        b.insert("Max", VisualPayload::synthetic(1, 1)).unwrap();
        b.insert("Eve", VisualPayload::synthetic(2, 1)).unwrap();
        b
    }

    fn clip() -> VisualPayload {
        VisualPayload::synthetic(9, 4)
    }

    #[test]
    fn identify_with_nobody_present_answers_none() {
        let v = vocab();
        let s = build_character_instruction(
            &bank(),
            &clip(),
            CharacterMode::Identify,
            &[],
            None,
            &v,
            "t",
        )
        .unwrap();
        assert_eq!(v.decode(&s.answer).unwrap(), "None");
    }

    #[test]
    fn identify_canonicalizes_answer_in_bank_order() {
        let v = vocab();
        let s = build_character_instruction(
            &bank(),
            &clip(),
            CharacterMode::Identify,
            &["Eve".into(), "Max".into()],
            None,
            &v,
            "t",
        )
        .unwrap();
        assert_eq!(v.decode(&s.answer).unwrap(), "Max, Eve");
        assert_eq!(v.decode(&s.question).unwrap(), IDENTIFY_QUESTION);
    }

    #[test]
    fn unknown_present_name_is_rejected() {
        let v = vocab();
        let err = build_character_instruction(
            &bank(),
            &clip(),
            CharacterMode::Identify,
            &["Bob".into()],
            None,
            &v,
            "t",
        )
        .unwrap_err();
        assert!(matches!(err, InstrError::UnknownName(n) if n == "Bob"));
    }

    #[test]
    fn support_mode_attaches_only_named_photos() {
        let v = vocab();
        let s = build_character_instruction(
            &bank(),
            &clip(),
            CharacterMode::Support,
            &["Eve".into()],
            Some("describe this video"),
            &v,
            "t",
        )
        .unwrap();
        let images = s.context.iter().filter(|g| g.kind == SegmentKind::Image).count();
        let videos = s.context.iter().filter(|g| g.kind == SegmentKind::Video).count();
        assert_eq!(images, 1);
        assert_eq!(videos, 1);
        assert!(s.answer.is_empty());
    }

    #[test]
    fn bank_rejects_bad_names() {
        let mut b = CharacterBank::new();
        assert!(b.insert("", VisualPayload::synthetic(1, 1)).is_err());
        assert!(b.insert("two words", VisualPayload::synthetic(1, 1)).is_err());
        assert!(b.insert("a,b", VisualPayload::synthetic(1, 1)).is_err());
        b.insert("Ok", VisualPayload::synthetic(1, 1)).unwrap();
        assert!(matches!(
            b.insert("Ok", VisualPayload::synthetic(2, 1)),
            Err(InstrError::DuplicateName(_))
        ));
    }

    fn track() -> SubtitleTrack {
        SubtitleTrack::parse(
            "0.0\t2.0\tBeckett\thello there\n\
             1.5\t3.0\t\twho are you\n\
             5.0\t6.0\tMontgomery\tgoodbye\n\
             8.0\t9.5\tBeckett\tsee you\n",
        )
        .unwrap()
    }

    #[test]
    fn subtitle_overlap_rules() {
        let t = track();
        assert!(t.overlapping(10.0, 12.0).is_empty());
        // A line exactly spanning the clip is included once.
        assert_eq!(t.overlapping(5.0, 6.0).len(), 1);
        // 3 of 4 lines overlap [1.0, 7.0].
        let hits = t.overlapping(1.0, 7.0);
        assert_eq!(hits.len(), 3);
        assert!(hits.windows(2).all(|w| w[0].start <= w[1].start));
    }

    #[test]
    fn subtitle_overlap_matches_brute_force() {
        let t = track();
        for (lo, hi) in [(0.0, 0.5), (2.5, 5.5), (3.5, 4.5), (0.0, 10.0), (9.5, 9.5)] {
            let got: Vec<String> = t.overlapping(lo, hi).iter().map(|l| l.text.clone()).collect();
            let want: Vec<String> = t
                .lines()
                .iter()
                .filter(|l| l.start <= hi && l.end >= lo)
                .map(|l| l.text.clone())
                .collect();
            assert_eq!(got, want, "span ({lo}, {hi})");
        }
    }

    #[test]
    fn empty_overlap_emits_no_dialogue_marker() {
        let v = vocab();
        let s = build_subtitle_instruction(&track(), &clip(), (20.0, 30.0), "describe", &v, 512, "t")
            .unwrap();
        let texts: String = s
            .context
            .iter()
            .filter_map(|g| match &g.payload {
                crate::seqcore::SegmentPayload::Text(t) => Some(v.decode(t).unwrap()),
                _ => None,
            })
            .collect::<Vec<_>>()
            .join(" ");
        assert!(texts.contains(NO_DIALOGUE));
    }

    #[test]
    fn speaker_rendering() {
        let t = track();
        let lines = t.overlapping(0.0, 3.0);
        let rendered = SubtitleTrack::render(&lines);
        assert_eq!(rendered, "Beckett: hello there who are you");
    }

    #[test]
    fn subtitle_parse_errors_carry_line_numbers() {
        let err = SubtitleTrack::parse("1.0\t2.0\tA\tok\nbad line without tabs\n").unwrap_err();
        assert!(matches!(err, InstrError::SubtitleParse { line: 2, .. }));
        let err = SubtitleTrack::parse("3.0\t1.0\tA\tbackwards\n").unwrap_err();
        assert!(matches!(err, InstrError::SubtitleParse { line: 1, .. }));
    }

    fn history(n: usize) -> Vec<HistoryEntry> {
        (0..n)
            .map(|i| HistoryEntry {
                id: format!("h{i}"),
                clip: VisualPayload::synthetic(100 + i as u64, 2),
                narration: format!("narration {i}"),
                timestamp: i as f64 * 10.0,
            })
            .collect()
    }

    #[test]
    fn empty_history_is_current_clip_plus_counting_sentence() {
        let v = Vocabulary::from_texts(["There are 1 video clips, ordered from the past to present: describe"]);
        let s = build_history_instruction(
            &history(0),
            &clip(),
            HistoryMode::Oracle,
            &BTreeMap::new(),
            "describe",
            &v,
            "t",
        )
        .unwrap();
        assert_eq!(s.context.len(), 2); // counting sentence + current clip
        let first = match &s.context[0].payload {
            crate::seqcore::SegmentPayload::Text(t) => v.decode(t).unwrap(),
            _ => panic!("expected text"),
        };
        assert_eq!(first, "There are 1 video clips, ordered from the past to present:");
    }

    #[test]
    fn oracle_history_interleaves_pairs_before_current() {
        let v = Vocabulary::from_texts(["There are 3 video clips, ordered from the past to present: narration 0 1 describe"]);
        let s = build_history_instruction(
            &history(2),
            &clip(),
            HistoryMode::Oracle,
            &BTreeMap::new(),
            "describe",
            &v,
            "t",
        )
        .unwrap();
        // counting + 2 * (video, text) + current video
        assert_eq!(s.context.len(), 6);
        assert_eq!(s.context[1].kind, SegmentKind::Video);
        assert_eq!(s.context[2].kind, SegmentKind::Text);
        assert_eq!(s.context[5].kind, SegmentKind::Video);
    }

    #[test]
    fn recurrent_equals_oracle_when_predictions_match_annotations() {
        let v = Vocabulary::from_texts(["There are 3 video clips, ordered from the past to present: narration 0 1 describe"]);
        let h = history(2);
        let preds: BTreeMap<String, String> =
            h.iter().map(|e| (e.id.clone(), e.narration.clone())).collect();
        let a = build_history_instruction(&h, &clip(), HistoryMode::Oracle, &BTreeMap::new(), "describe", &v, "t").unwrap();
        let b = build_history_instruction(&h, &clip(), HistoryMode::Recurrent, &preds, "describe", &v, "t").unwrap();
        let to_tokens = |s: &InterleavedSample| -> Vec<Vec<u32>> {
            s.context
                .iter()
                .filter_map(|g| match &g.payload {
                    crate::seqcore::SegmentPayload::Text(t) => Some(t.clone()),
                    _ => None,
                })
                .collect()
        };
        assert_eq!(to_tokens(&a), to_tokens(&b));
    }

    #[test]
    fn recurrent_without_predictions_fails() {
        let v = vocab();
        let err = build_history_instruction(
            &history(1),
            &clip(),
            HistoryMode::Recurrent,
            &BTreeMap::new(),
            "describe",
            &v,
            "t",
        )
        .unwrap_err();
        assert!(matches!(err, InstrError::MissingPrediction(id) if id == "h0"));
    }

    #[test]
    fn unsorted_history_is_rejected() {
        let v = vocab();
        let mut h = history(2);
        h.swap(0, 1);
        assert!(matches!(
            build_history_instruction(&h, &clip(), HistoryMode::Oracle, &BTreeMap::new(), "q", &v, "t"),
            Err(InstrError::BadTimestamps(_))
        ));
    }
}
