//! GPT-2 byte-level BPE tokenizer, subject-span location and token-position
//! bucketization.
//!
//! The vocabulary is read from the published `vocab.json` / `merges.txt` pair.
//! Text is split with the GPT-2 pre-tokenizer pattern, each piece is mapped to
//! the printable byte alphabet, and merges are applied by rank.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TokenizerError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed vocab.json: {0}")]
    MalformedVocab(String),
    #[error("malformed merges.txt at line {line}: {reason}")]
    MalformedMerges { line: usize, reason: String },
    #[error("unknown token id {0}")]
    UnknownId(u32),
    #[error("subject {subject:?} not found in prompt {prompt:?}")]
    SubjectNotFound { subject: String, prompt: String },
}

/// Byte value -> printable unicode char used by the GPT-2 vocabulary.
fn byte_alphabet() -> &'static ([char; 256], HashMap<char, u8>) {
    static TABLE: OnceLock<([char; 256], HashMap<char, u8>)> = OnceLock::new();
    TABLE.get_or_init(|| {
        let mut printable: Vec<u32> = (u32::from('!')..=u32::from('~')).collect();
        printable.extend(u32::from('¡')..=u32::from('¬'));
        printable.extend(u32::from('®')..=u32::from('ÿ'));
        let mut forward = ['\0'; 256];
        let mut shifted = 0u32;
        for b in 0..256u32 {
            let c = if printable.contains(&b) {
                b
            } else {
                shifted += 1;
                255 + shifted
            };
            forward[b as usize] = char::from_u32(c).expect("valid scalar");
        }
        let inverse = forward.iter().enumerate().map(|(b, &c)| (c, b as u8)).collect();
        (forward, inverse)
    })
}

fn pretokenizer() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"'s|'t|'re|'ve|'m|'ll|'d| ?\p{L}+| ?\p{N}+| ?[^\s\p{L}\p{N}]+|\s+").expect("static pattern")
    })
}

/// Split text into GPT-2 pre-tokens.
///
/// The published pattern contains `\s+(?!\S)`, which the `regex` crate cannot
/// express. A whitespace run that is followed by non-whitespace gives up its
/// last character, which then starts the next piece.
pub fn pretokenize(text: &str) -> Vec<&str> {
    let re = pretokenizer();
    let mut pieces = Vec::new();
    let mut at = 0;
    while at < text.len() {
        let m = re.find_at(text, at).expect("pattern matches any char");
        debug_assert_eq!(m.start(), at);
        let mut end = m.end();
        let piece = m.as_str();
        if end < text.len() && piece.chars().all(char::is_whitespace) {
            let mut chars = piece.char_indices();
            if let (Some(_), Some(_)) = (chars.next(), chars.next()) {
                let last = piece.char_indices().last().map(|(i, _)| i).unwrap_or(0);
                end = m.start() + last;
            }
        }
        pieces.push(&text[at..end]);
        at = end;
    }
    pieces
}

/// Vocabulary and merge table of a GPT-2 style byte-level BPE.
pub struct Vocab {
    token_to_id: HashMap<String, u32>,
    id_to_token: Vec<String>,
    merges: Vec<(String, String)>,
    /// (left id, right id) -> (rank, merged id)
    merge_index: HashMap<(u32, u32), (u32, u32)>,
    byte_ids: [u32; 256],
}

impl fmt::Debug for Vocab {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Vocab")
            .field("size", &self.id_to_token.len())
            .field("merges", &self.merges.len())
            .finish()
    }
}

impl Vocab {
    pub fn from_files(vocab_json: &Path, merges_txt: &Path) -> Result<Self, TokenizerError> {
        let read = |p: &Path| {
            std::fs::read_to_string(p).map_err(|source| TokenizerError::Io {
                path: p.display().to_string(),
                source,
            })
        };
        Self::from_strs(&read(vocab_json)?, &read(merges_txt)?)
    }

    pub fn from_strs(vocab_json: &str, merges_txt: &str) -> Result<Self, TokenizerError> {
        let token_to_id: HashMap<String, u32> =
            serde_json::from_str(vocab_json).map_err(|e| TokenizerError::MalformedVocab(e.to_string()))?;
        let mut slots: Vec<Option<String>> = vec![None; token_to_id.len()];
        for (tok, &id) in &token_to_id {
            let slot = slots
                .get_mut(id as usize)
                .ok_or_else(|| TokenizerError::MalformedVocab(format!("id {id} out of dense range")))?;
            if slot.replace(tok.clone()).is_some() {
                return Err(TokenizerError::MalformedVocab(format!("duplicate id {id}")));
            }
        }
        let id_to_token: Vec<String> = slots.into_iter().map(|s| s.expect("dense")).collect();

        let (alphabet, _) = byte_alphabet();
        let mut byte_ids = [0u32; 256];
        for (b, c) in alphabet.iter().enumerate() {
            byte_ids[b] = *token_to_id
                .get(&c.to_string())
                .ok_or_else(|| TokenizerError::MalformedVocab(format!("byte token {c:?} missing")))?;
        }

        let mut merges = Vec::new();
        let mut merge_index = HashMap::new();
        for (lineno, line) in merges_txt.lines().enumerate() {
            if lineno == 0 && line.starts_with("#version") {
                continue;
            }
            if line.trim().is_empty() {
                continue;
            }
            let malformed = |reason: &str| TokenizerError::MalformedMerges {
                line: lineno + 1,
                reason: reason.to_string(),
            };
            let (left, right) = line.split_once(' ').ok_or_else(|| malformed("expected a pair"))?;
            let lid = *token_to_id
                .get(left)
                .ok_or_else(|| malformed("left token not in vocab"))?;
            let rid = *token_to_id
                .get(right)
                .ok_or_else(|| malformed("right token not in vocab"))?;
            let merged = format!("{left}{right}");
            let mid = *token_to_id
                .get(&merged)
                .ok_or_else(|| malformed("merge result not in vocab"))?;
            let rank = merges.len() as u32;
            if merge_index.insert((lid, rid), (rank, mid)).is_some() {
                return Err(malformed("duplicate merge"));
            }
            merges.push((left.to_string(), right.to_string()));
        }

        Ok(Self {
            token_to_id,
            id_to_token,
            merges,
            merge_index,
            byte_ids,
        })
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.is_empty()
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    pub fn token_id(&self, token: &str) -> Option<u32> {
        self.token_to_id.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.id_to_token.get(id as usize).map(String::as_str)
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        let mut ids = Vec::with_capacity(text.len() / 3 + 1);
        for piece in pretokenize(text) {
            self.bpe_into(piece.as_bytes(), &mut ids);
        }
        ids
    }

    fn bpe_into(&self, bytes: &[u8], out: &mut Vec<u32>) {
        let mut word: Vec<u32> = bytes.iter().map(|&b| self.byte_ids[b as usize]).collect();
        while word.len() > 1 {
            let best = word
                .windows(2)
                .filter_map(|w| self.merge_index.get(&(w[0], w[1])).map(|&(rank, _)| (rank, w[0], w[1])))
                .min();
            let Some((_, left, right)) = best else { break };
            let merged = self.merge_index[&(left, right)].1;
            let mut next = Vec::with_capacity(word.len());
            let mut i = 0;
            while i < word.len() {
                if i + 1 < word.len() && word[i] == left && word[i + 1] == right {
                    next.push(merged);
                    i += 2;
                } else {
                    next.push(word[i]);
                    i += 1;
                }
            }
            word = next;
        }
        out.extend(word);
    }

    /// Raw bytes of a token sequence.
    pub fn decode_bytes(&self, ids: &[u32]) -> Result<Vec<u8>, TokenizerError> {
        let (_, inverse) = byte_alphabet();
        let mut bytes = Vec::new();
        for &id in ids {
            let tok = self.token(id).ok_or(TokenizerError::UnknownId(id))?;
            bytes.extend(tok.chars().map(|c| inverse[&c]));
        }
        Ok(bytes)
    }

    /// Decode ids to text. Byte sequences that are not valid UTF-8 (only
    /// possible for id sequences that `encode` never produces) are replaced
    /// lossily.
    pub fn decode(&self, ids: &[u32]) -> Result<String, TokenizerError> {
        let bytes = self.decode_bytes(ids)?;
        Ok(match String::from_utf8(bytes) {
            Ok(s) => s,
            Err(e) => String::from_utf8_lossy(e.as_bytes()).into_owned(),
        })
    }

    /// Byte length of each token; used to map character ranges to tokens.
    fn token_byte_lengths(&self, ids: &[u32]) -> Vec<usize> {
        ids.iter()
            .map(|&id| self.token(id).map_or(0, |t| t.chars().count()))
            .collect()
    }
}

/// Inclusive token range covering the subject inside a tokenized prompt.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenSpan {
    pub start: usize,
    pub end: usize,
}

impl TokenSpan {
    pub fn new(start: usize, end: usize) -> Self {
        assert!(start <= end, "span start {start} after end {end}");
        Self { start, end }
    }

    pub fn len(&self) -> usize {
        self.end - self.start + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn contains(&self, pos: usize) -> bool {
        (self.start..=self.end).contains(&pos)
    }

    pub fn positions(&self) -> std::ops::RangeInclusive<usize> {
        self.start..=self.end
    }
}

/// Tokenize `prompt` and locate the last occurrence of `subject` in it.
///
/// Tokens that straddle either boundary of the occurrence are included.
pub fn locate_subject(prompt: &str, subject: &str, vocab: &Vocab) -> Result<(Vec<u32>, TokenSpan), TokenizerError> {
    let not_found = || TokenizerError::SubjectNotFound {
        subject: subject.to_string(),
        prompt: prompt.to_string(),
    };
    if subject.is_empty() {
        return Err(not_found());
    }
    let char_start = prompt.rfind(subject).ok_or_else(not_found)?;
    let char_end = char_start + subject.len();
    let ids = vocab.encode(prompt);
    let span = span_for_byte_range(&vocab.token_byte_lengths(&ids), char_start, char_end).ok_or_else(not_found)?;
    Ok((ids, span))
}

/// Tokens whose byte range intersects `[lo, hi)`.
fn span_for_byte_range(lengths: &[usize], lo: usize, hi: usize) -> Option<TokenSpan> {
    let mut offset = 0;
    let mut first = None;
    let mut last = None;
    for (i, &len) in lengths.iter().enumerate() {
        let (a, b) = (offset, offset + len);
        if a < hi && b > lo {
            first.get_or_insert(i);
            last = Some(i);
        }
        offset = b;
    }
    Some(TokenSpan::new(first?, last?))
}

/// Token-position stratum relative to the subject.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bucket {
    PreSubject,
    FirstSubject,
    MiddleSubject,
    LastSubject,
    FirstSubsequent,
    Further,
    LastToken,
}

impl Bucket {
    /// The six strata that are analyzed, in presentation order.
    pub const ANALYZED: [Bucket; 6] = [
        Bucket::FirstSubject,
        Bucket::MiddleSubject,
        Bucket::LastSubject,
        Bucket::FirstSubsequent,
        Bucket::Further,
        Bucket::LastToken,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Bucket::PreSubject => "pre_subject",
            Bucket::FirstSubject => "first_subject",
            Bucket::MiddleSubject => "middle_subject",
            Bucket::LastSubject => "last_subject",
            Bucket::FirstSubsequent => "first_subsequent",
            Bucket::Further => "further",
            Bucket::LastToken => "last_token",
        }
    }

    pub fn is_analyzed(self) -> bool {
        self != Bucket::PreSubject
    }
}

impl fmt::Display for Bucket {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Bucket {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm = s.trim().to_ascii_lowercase().replace('-', "_");
        [Bucket::PreSubject]
            .into_iter()
            .chain(Bucket::ANALYZED)
            .find(|b| b.as_str() == norm)
            .ok_or_else(|| format!("unknown bucket {s:?}"))
    }
}

/// Per-position bucket labels for one prompt.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PositionBuckets {
    pub assignment: Vec<Bucket>,
}

impl PositionBuckets {
    pub fn positions_of(&self, bucket: Bucket) -> impl Iterator<Item = usize> + '_ {
        self.assignment
            .iter()
            .enumerate()
            .filter(move |(_, &b)| b == bucket)
            .map(|(i, _)| i)
    }
}

/// Label every position of a `seq_len` prompt relative to the subject span.
pub fn bucketize(span: TokenSpan, seq_len: usize) -> PositionBuckets {
    assert!(span.end < seq_len, "span {span:?} outside sequence of {seq_len}");
    let last = seq_len - 1;
    let assignment = (0..seq_len)
        .map(|pos| {
            if pos < span.start {
                Bucket::PreSubject
            } else if pos == span.end {
                Bucket::LastSubject
            } else if pos == span.start {
                Bucket::FirstSubject
            } else if pos < span.end {
                Bucket::MiddleSubject
            } else if pos == last {
                Bucket::LastToken
            } else if pos == span.end + 1 {
                Bucket::FirstSubsequent
            } else {
                Bucket::Further
            }
        })
        .collect();
    PositionBuckets { assignment }
}
