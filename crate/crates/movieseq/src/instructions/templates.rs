//! Static question-variant pools standing in for learned paraphrases, plus
//! the seeded rephrase transform. Variant 0 of every pool is the canonical
//! phrasing; a variant containing `{name}` turns an identification question
//! into its boolean per-name form with a Yes/No answer.

use std::path::Path;

use super::InstrError;
use crate::rng::{hash_bytes, stream};
use crate::seqcore::{InterleavedSample, SegmentKind, Vocabulary};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TemplateFamily {
    /// Who is in the video (all bank photos listed).
    Ia,
    /// Free-form query supported by selected photos.
    Ib,
    /// Plot-conditioned query.
    II,
    /// Subtitle-conditioned query.
    III,
    /// History-conditioned query.
    IV,
}

impl TemplateFamily {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "ia" => Some(Self::Ia),
            "ib" => Some(Self::Ib),
            "ii" => Some(Self::II),
            "iii" => Some(Self::III),
            "iv" => Some(Self::IV),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Ia => "ia",
            Self::Ib => "ib",
            Self::II => "ii",
            Self::III => "iii",
            Self::IV => "iv",
        }
    }
}

#[derive(Debug, Clone)]
pub struct TemplateSpec {
    pub family: TemplateFamily,
    pub variants: Vec<String>,
    pub seed: u64,
}

impl TemplateSpec {
    /// Built-in pools; variant 0 is the canonical phrasing.
    pub fn builtin(family: TemplateFamily, seed: u64) -> Self {
        let variants: Vec<String> = match family {
            TemplateFamily::Ia => vec![
                super::IDENTIFY_QUESTION.into(),
                "Which of these characters can be seen in this video? If none, output None.".into(),
                "Does {name} appear in this video?".into(),
            ],
            TemplateFamily::Ib => vec![
                "Please briefly describe this video.".into(),
                "Give a short description of this video.".into(),
            ],
            TemplateFamily::II => vec![
                "Can you help me describe this video?".into(),
                "Describe what happens in this clip.".into(),
            ],
            TemplateFamily::III => vec![
                "Please describe this video.".into(),
                "What is happening in this video?".into(),
            ],
            TemplateFamily::IV => vec![
                "Please describe the current video clip.".into(),
                "What happens in the latest clip?".into(),
            ],
        };
        Self {
            family,
            variants,
            seed,
        }
    }

    /// One phrasing per line; `{name}` and `{n}` placeholders supported.
    pub fn from_file(family: TemplateFamily, path: &Path, seed: u64) -> Result<Self, InstrError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| InstrError::Io(path.display().to_string(), e.to_string()))?;
        let variants: Vec<String> = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(str::to_string)
            .collect();
        if variants.is_empty() {
            return Err(InstrError::EmptyPool);
        }
        Ok(Self {
            family,
            variants,
            seed,
        })
    }

    /// Seeded, per-sample variant pick.
    pub fn variant_index(&self, sample_id: &str) -> usize {
        let h = stream(self.seed, hash_bytes(sample_id.as_bytes()));
        (h % self.variants.len() as u64) as usize
    }
}

/// Deterministically rewrite a sample's question with a pool variant.
/// Variant 0 leaves the sample unchanged. A `{name}` variant picks a name
/// from `names` (falling back to the names in the answer) and rewrites the
/// answer to "Yes"/"No" according to whether that name is present.
pub fn rephrase(
    template: &TemplateSpec,
    sample: &InterleavedSample,
    vocab: &Vocabulary,
    names: &[String],
) -> Result<InterleavedSample, InstrError> {
    if template.variants.is_empty() {
        return Err(InstrError::EmptyPool);
    }
    let idx = template.variant_index(&sample.id);
    if idx == 0 {
        return Ok(sample.clone());
    }
    let variant = &template.variants[idx];
    let mut out = sample.clone();
    if variant.contains("{name}") {
        let present = present_names(sample, vocab)?;
        let candidates: Vec<String> = if names.is_empty() {
            present.clone()
        } else {
            names.to_vec()
        };
        if candidates.is_empty() {
            return Ok(sample.clone());
        }
        let pick = stream(template.seed, hash_bytes(sample.id.as_bytes()) ^ 0x6e616d65);
        let name = &candidates[(pick % candidates.len() as u64) as usize];
        out.question = vocab.tokenize(&variant.replace("{name}", name));
        let yes = present.iter().any(|p| p == name);
        out.answer = vocab.tokenize(if yes { "Yes" } else { "No" });
        return Ok(out);
    }
    let n_visual = sample
        .context
        .iter()
        .filter(|s| s.kind != SegmentKind::Text)
        .count();
    out.question = vocab.tokenize(&variant.replace("{n}", &n_visual.to_string()));
    Ok(out)
}

/// Names listed in an identification answer; "None" means nobody.
fn present_names(sample: &InterleavedSample, vocab: &Vocabulary) -> Result<Vec<String>, InstrError> {
    let text = vocab.decode(&sample.answer)?;
    if text.is_empty() || text == super::NONE_ANSWER {
        return Ok(Vec::new());
    }
    Ok(text.split(", ").map(str::to_string).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::VisualPayload;
    use crate::instructions::{build_character_instruction, CharacterBank, CharacterMode};

    fn setup() -> (CharacterBank, Vocabulary) {
        let mut bank = CharacterBank::new();
        bank.insert("Max", VisualPayload::synthetic(1, 1)).unwrap();
        bank.insert("Eve", VisualPayload::synthetic(2, 1)).unwrap();
        let vocab = Vocabulary::from_texts([
            "There are several character photos: is and a video Who can be found in this \
             video? If not, output None. Max Eve Yes No Does appear",
        ]);
        (bank, vocab)
    }

    fn sample(bank: &CharacterBank, vocab: &Vocabulary, present: &[&str], id: &str) -> InterleavedSample {
        build_character_instruction(
            bank,
            &VisualPayload::synthetic(9, 2),
            CharacterMode::Identify,
            &present.iter().map(|s| s.to_string()).collect::<Vec<_>>(),
            None,
            vocab,
            id,
        )
        .unwrap()
    }

    #[test]
    fn single_variant_pool_is_identity() {
        let (bank, vocab) = setup();
        let t = TemplateSpec {
            family: TemplateFamily::Ia,
            variants: vec![super::super::IDENTIFY_QUESTION.into()],
            seed: 3,
        };
        let s = sample(&bank, &vocab, &["Max"], "x1");
        let r = rephrase(&t, &s, &vocab, &[]).unwrap();
        assert_eq!(r.question, s.question);
        assert_eq!(r.answer, s.answer);
    }

    #[test]
    fn boolean_transform_answers_yes_when_present() {
        let (bank, vocab) = setup();
        let t = TemplateSpec {
            family: TemplateFamily::Ia,
            variants: vec!["unused".into(), "Does {name} appear in this video?".into()],
            seed: 0,
        };
        // Force variant 1 by trying ids until the pick lands there, then
        // check both presence outcomes deterministically.
        let names = vec!["Max".to_string(), "Eve".to_string()];
        let mut saw_yes = false;
        let mut saw_no = false;
        for i in 0..64 {
            let id = format!("s{i}");
            let s = sample(&bank, &vocab, &["Max"], &id);
            if t.variant_index(&id) != 1 {
                continue;
            }
            let r = rephrase(&t, &s, &vocab, &names).unwrap();
            let q = vocab.decode(&r.question).unwrap();
            let a = vocab.decode(&r.answer).unwrap();
            assert!(q.starts_with("Does ") && q.contains("appear in this video?"));
            if q.contains("Max") {
                assert_eq!(a, "Yes");
                saw_yes = true;
            } else {
                assert_eq!(a, "No");
                saw_no = true;
            }
        }
        assert!(saw_yes && saw_no, "both boolean outcomes should occur");
    }

    #[test]
    fn rephrase_is_deterministic_per_id() {
        let (bank, vocab) = setup();
        let t = TemplateSpec::builtin(TemplateFamily::Ia, 7);
        let s = sample(&bank, &vocab, &[], "fixed-id");
        let a = rephrase(&t, &s, &vocab, &["Max".into()]).unwrap();
        let b = rephrase(&t, &s, &vocab, &["Max".into()]).unwrap();
        assert_eq!(a.question, b.question);
        assert_eq!(a.answer, b.answer);
    }

    #[test]
    fn builtin_pools_have_canonical_variant_zero() {
        for fam in [
            TemplateFamily::Ia,
            TemplateFamily::Ib,
            TemplateFamily::II,
            TemplateFamily::III,
            TemplateFamily::IV,
        ] {
            let t = TemplateSpec::builtin(fam, 0);
            assert!(!t.variants.is_empty());
            assert!(!t.variants[0].contains("{name}"));
        }
        assert_eq!(
            TemplateSpec::builtin(TemplateFamily::Ia, 0).variants[0],
            super::super::IDENTIFY_QUESTION
        );
    }
}
