//! Word-level vocabulary with byte fallback.
//!
//! Layout is fixed: four specials (PAD, BOS, EOS, UNK), then the 256 byte
//! tokens, then word tokens. Any whitespace-delimited word missing from the
//! word table is spelled out as byte tokens, so tokenization is total and
//! `decode(tokenize(s))` reproduces `s` up to whitespace normalization.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use super::SeqError;

pub type TokenId = u32;

pub const PAD: TokenId = 0;
pub const BOS: TokenId = 1;
pub const EOS: TokenId = 2;
pub const UNK: TokenId = 3;

const SPECIALS: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];
const NUM_SPECIALS: u32 = 4;
const BYTE_BASE: u32 = NUM_SPECIALS;
const WORD_BASE: u32 = BYTE_BASE + 256;

/// Prompt scaffold words every vocabulary carries so packed layouts are
/// reproducible regardless of the training corpus.
pub const SCAFFOLD_USER: &str = "USER:";
pub const SCAFFOLD_ASSISTANT: &str = "MovieSeq:";

#[derive(Debug, Clone)]
pub struct Vocabulary {
    words: Vec<String>,
    word_ids: HashMap<String, TokenId>,
}

impl Vocabulary {
    /// Build a vocabulary from words in first-seen order. The scaffold words
    /// are always present; duplicates and whitespace-bearing entries are
    /// skipped.
    pub fn from_words<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut vocab = Self {
            words: Vec::new(),
            word_ids: HashMap::new(),
        };
        vocab.add_word(SCAFFOLD_USER);
        vocab.add_word(SCAFFOLD_ASSISTANT);
        for w in words {
            vocab.add_word(w.as_ref());
        }
        vocab
    }

    /// Build from whitespace-split words of the given texts.
    pub fn from_texts<'a, I: IntoIterator<Item = &'a str>>(texts: I) -> Self {
        Self::from_words(texts.into_iter().flat_map(str::split_whitespace))
    }

    fn add_word(&mut self, word: &str) {
        if word.is_empty() || word.chars().any(char::is_whitespace) {
            return;
        }
        if SPECIALS.contains(&word) || parse_byte_form(word).is_some() {
            return;
        }
        if !self.word_ids.contains_key(word) {
            let id = WORD_BASE + self.words.len() as u32;
            self.words.push(word.to_string());
            self.word_ids.insert(word.to_string(), id);
        }
    }

    pub fn size(&self) -> usize {
        WORD_BASE as usize + self.words.len()
    }

    /// Id of a word token, if the word is in the word table.
    pub fn word_id(&self, word: &str) -> Option<TokenId> {
        self.word_ids.get(word).copied()
    }

    /// Id of the byte-fallback token for one byte.
    pub fn byte_id(&self, byte: u8) -> TokenId {
        BYTE_BASE + byte as u32
    }

    pub fn is_byte(&self, id: TokenId) -> bool {
        (BYTE_BASE..WORD_BASE).contains(&id)
    }

    /// Textual form of a token id.
    pub fn token_str(&self, id: TokenId) -> Result<&str, SeqError> {
        if (id as usize) >= self.size() {
            return Err(SeqError::InvalidId(id));
        }
        Ok(match id {
            0..=3 => SPECIALS[id as usize],
            _ if id < WORD_BASE => "", // byte tokens have no standalone word form
            _ => &self.words[(id - WORD_BASE) as usize],
        })
    }

    /// Tokenize into whitespace-delimited word tokens, spelling unknown words
    /// as byte tokens. Total for any UTF-8 input.
    pub fn tokenize(&self, text: &str) -> Vec<TokenId> {
        let mut out = Vec::new();
        for word in text.split_whitespace() {
            match self.word_id(word) {
                Some(id) => out.push(id),
                None => out.extend(word.bytes().map(|b| self.byte_id(b))),
            }
        }
        out
    }

    /// Inverse of `tokenize` up to whitespace normalization. Rendering stops
    /// at the first EOS; PAD, BOS, and UNK render as nothing.
    pub fn decode(&self, tokens: &[TokenId]) -> Result<String, SeqError> {
        let mut words: Vec<String> = Vec::new();
        let mut pending: Vec<u8> = Vec::new();
        for &id in tokens {
            if (id as usize) >= self.size() {
                return Err(SeqError::InvalidId(id));
            }
            if id == EOS {
                break;
            }
            if self.is_byte(id) {
                pending.push((id - BYTE_BASE) as u8);
                continue;
            }
            if !pending.is_empty() {
                words.push(String::from_utf8_lossy(&pending).into_owned());
                pending.clear();
            }
            match id {
                PAD | BOS | UNK => {}
                _ => words.push(self.words[(id - WORD_BASE) as usize].clone()),
            }
        }
        if !pending.is_empty() {
            words.push(String::from_utf8_lossy(&pending).into_owned());
        }
        Ok(words.join(" "))
    }

    /// Serialize as one token per line: specials, byte tokens, then words.
    pub fn to_file_string(&self) -> String {
        let mut s = String::new();
        for sp in SPECIALS {
            s.push_str(sp);
            s.push('\n');
        }
        for b in 0u16..256 {
            let _ = writeln!(s, "<0x{b:02X}>");
        }
        for w in &self.words {
            s.push_str(w);
            s.push('\n');
        }
        s
    }

    pub fn save(&self, path: &Path) -> Result<(), SeqError> {
        std::fs::write(path, self.to_file_string())
            .map_err(|e| SeqError::Io(path.display().to_string(), e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, SeqError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| SeqError::Io(path.display().to_string(), e.to_string()))?;
        Self::from_file_string(&text)
    }

    pub fn from_file_string(text: &str) -> Result<Self, SeqError> {
        let lines: Vec<&str> = text.lines().collect();
        if lines.len() < WORD_BASE as usize {
            return Err(SeqError::BadVocabFile(format!(
                "expected at least {WORD_BASE} lines, got {}",
                lines.len()
            )));
        }
        for (i, sp) in SPECIALS.iter().enumerate() {
            if lines[i] != *sp {
                return Err(SeqError::BadVocabFile(format!(
                    "line {}: expected special {sp}, got {:?}",
                    i + 1,
                    lines[i]
                )));
            }
        }
        for b in 0..256usize {
            let line = lines[NUM_SPECIALS as usize + b];
            match parse_byte_form(line) {
                Some(v) if v as usize == b => {}
                _ => {
                    return Err(SeqError::BadVocabFile(format!(
                        "line {}: expected byte token <0x{b:02X}>, got {line:?}",
                        NUM_SPECIALS as usize + b + 1
                    )))
                }
            }
        }
        let mut vocab = Self {
            words: Vec::new(),
            word_ids: HashMap::new(),
        };
        for (i, line) in lines.iter().enumerate().skip(WORD_BASE as usize) {
            if line.is_empty() || line.chars().any(char::is_whitespace) {
                return Err(SeqError::BadVocabFile(format!(
                    "line {}: invalid word token {line:?}",
                    i + 1
                )));
            }
            let id = WORD_BASE + vocab.words.len() as u32;
            if vocab.word_ids.insert(line.to_string(), id).is_some() {
                return Err(SeqError::BadVocabFile(format!(
                    "line {}: duplicate token {line:?}",
                    i + 1
                )));
            }
            vocab.words.push(line.to_string());
        }
        if vocab.word_id(SCAFFOLD_USER).is_none() || vocab.word_id(SCAFFOLD_ASSISTANT).is_none() {
            return Err(SeqError::BadVocabFile(
                "vocabulary is missing the prompt scaffold words".into(),
            ));
        }
        Ok(vocab)
    }
}

fn parse_byte_form(s: &str) -> Option<u8> {
    let hex = s.strip_prefix("<0x")?.strip_suffix('>')?;
    if hex.len() != 2 {
        return None;
    }
    u8::from_str_radix(hex, 16).ok()
}
