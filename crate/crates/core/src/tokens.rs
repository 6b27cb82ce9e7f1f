//! Tokenizer contract, special-token registry, and the pre-training masking
//! strategies.
//!
//! The reference tokenizer is whitespace word-level with [UNK] for
//! out-of-vocabulary words; subword tokenizers can plug in behind the same
//! anchor-tracking contract.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{AnnotatedExample, AnnotatedText};
use crate::error::{Error, Result};

/// Fixed special-token order; line number = id in vocabulary files.
pub const SPECIAL_TOKENS: [&str; 9] = [
    "[PAD]", "[CLS]", "[SEP]", "[MASK]", "[E1]", "[/E1]", "[E2]", "[/E2]", "[UNK]",
];

pub const PAD_ID: u32 = 0;
pub const CLS_ID: u32 = 1;
pub const SEP_ID: u32 = 2;
pub const MASK_ID: u32 = 3;
pub const E1_ID: u32 = 4;
pub const E1_CLOSE_ID: u32 = 5;
pub const E2_ID: u32 = 6;
pub const E2_CLOSE_ID: u32 = 7;
pub const UNK_ID: u32 = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    id_to_token: Vec<String>,
    token_to_id: HashMap<String, u32>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::new()
    }
}

impl Vocabulary {
    /// Vocabulary holding only the special tokens.
    pub fn new() -> Self {
        let mut v = Vocabulary {
            id_to_token: Vec::new(),
            token_to_id: HashMap::new(),
        };
        for t in SPECIAL_TOKENS {
            v.push(t.to_string()).expect("specials are distinct");
        }
        v
    }

    fn push(&mut self, token: String) -> Result<u32> {
        if self.token_to_id.contains_key(&token) {
            return Err(Error::Vocab(format!("duplicate token {token:?}")));
        }
        let id = self.id_to_token.len() as u32;
        self.token_to_id.insert(token.clone(), id);
        self.id_to_token.push(token);
        Ok(id)
    }

    /// Insert a token if absent; returns its id either way.
    pub fn add(&mut self, token: &str) -> u32 {
        match self.token_to_id.get(token) {
            Some(&id) => id,
            None => self.push(token.to_string()).expect("checked absent"),
        }
    }

    /// Build from annotated texts, collecting words in first-appearance order.
    pub fn from_texts<'a>(texts: impl IntoIterator<Item = &'a AnnotatedText>) -> Self {
        let mut v = Vocabulary::new();
        for text in texts {
            for w in &text.words {
                v.add(w);
            }
        }
        v
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        false // the specials are always present
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.token_to_id.get(token).copied()
    }

    pub fn id_or_unk(&self, token: &str) -> u32 {
        self.id(token).unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.id_to_token.get(id as usize).map(|s| s.as_str())
    }

    pub fn is_special_id(&self, id: u32) -> bool {
        (id as usize) < SPECIAL_TOKENS.len()
    }

    pub fn tokens(&self) -> &[String] {
        &self.id_to_token
    }

    /// One token per line, line number = id; specials come first.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.id_to_token.join("\n") + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let content = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_lines(content.lines())
    }

    pub fn from_lines<'a>(lines: impl IntoIterator<Item = &'a str>) -> Result<Self> {
        let mut v = Vocabulary {
            id_to_token: Vec::new(),
            token_to_id: HashMap::new(),
        };
        for line in lines {
            v.push(line.to_string())?;
        }
        for (i, t) in SPECIAL_TOKENS.iter().enumerate() {
            if v.token(i as u32) != Some(t) {
                return Err(Error::Vocab(format!(
                    "special token {t:?} missing or out of order at id {i}"
                )));
            }
        }
        Ok(v)
    }
}

/// Token-id sequence with tracked anchor positions. `mlm_targets` maps a
/// corrupted position to the original id there; it is empty until
/// [`apply_mlm_masking`] runs.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedInput {
    pub ids: Vec<u32>,
    pub cls_pos: usize,
    pub e1_pos: usize,
    pub e1_close_pos: usize,
    pub e2_pos: usize,
    pub e2_close_pos: usize,
    pub mask_pos: usize,
    pub mlm_targets: BTreeMap<usize, u32>,
}

impl EncodedInput {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Token positions of the head entity words (between the E1 markers).
    pub fn head_token_range(&self) -> std::ops::Range<usize> {
        self.e1_pos + 1..self.e1_close_pos
    }

    pub fn tail_token_range(&self) -> std::ops::Range<usize> {
        self.e2_pos + 1..self.e2_close_pos
    }

    fn anchors(&self) -> [usize; 6] {
        [
            self.cls_pos,
            self.e1_pos,
            self.e1_close_pos,
            self.e2_pos,
            self.e2_close_pos,
            self.mask_pos,
        ]
    }

    pub fn validate(&self) -> Result<()> {
        let expect = [CLS_ID, E1_ID, E1_CLOSE_ID, E2_ID, E2_CLOSE_ID, MASK_ID];
        for (&pos, &id) in self.anchors().iter().zip(expect.iter()) {
            if pos >= self.ids.len() || self.ids[pos] != id {
                return Err(Error::Tokenize(format!(
                    "anchor position {pos} does not hold the expected special id {id}"
                )));
            }
        }
        if self.cls_pos != 0 {
            return Err(Error::Tokenize("cls position must be 0".into()));
        }
        Ok(())
    }
}

/// Which tokens the MLM objective corrupts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskingStrategy {
    pub kind: MaskingKind,
    pub rate: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskingKind {
    None,
    EntitySpans,
    EntitySpanHeads,
    RandomTokens,
}

impl Default for MaskingStrategy {
    fn default() -> Self {
        MaskingStrategy {
            kind: MaskingKind::RandomTokens,
            rate: 0.15,
        }
    }
}

impl MaskingStrategy {
    pub fn none() -> Self {
        MaskingStrategy {
            kind: MaskingKind::None,
            rate: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.rate) {
            return Err(Error::Config(format!(
                "masking rate {} outside [0,1]",
                self.rate
            )));
        }
        Ok(())
    }
}

impl std::str::FromStr for MaskingKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(MaskingKind::None),
            "entity-spans" => Ok(MaskingKind::EntitySpans),
            "entity-span-heads" => Ok(MaskingKind::EntitySpanHeads),
            "random-tokens" => Ok(MaskingKind::RandomTokens),
            other => Err(Error::Config(format!("unknown masking kind {other:?}"))),
        }
    }
}

impl std::fmt::Display for MaskingKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            MaskingKind::None => "none",
            MaskingKind::EntitySpans => "entity-spans",
            MaskingKind::EntitySpanHeads => "entity-span-heads",
            MaskingKind::RandomTokens => "random-tokens",
        };
        f.write_str(s)
    }
}

/// Map an annotated text to ids with [CLS] prepended. When the sequence
/// exceeds `max_len`, context words are dropped by decreasing distance to
/// the nearer entity span (ties toward the sentence end); markers, entity
/// words, and the prompt suffix always survive.
pub fn tokenize(text: &AnnotatedText, vocab: &Vocabulary, max_len: usize) -> Result<EncodedInput> {
    let n = text.words.len();
    let total = n + 1; // [CLS]
    let mut removed = vec![false; n];
    if total > max_len {
        let need = total - max_len;
        let suffix_start = text.suffix_start();
        let head = (text.e1_word_index, text.e1_close_word_index);
        let tail = (text.e2_word_index, text.e2_close_word_index);
        let dist = |i: usize, (lo, hi): (usize, usize)| -> usize {
            if i < lo {
                lo - i
            } else if i > hi {
                i - hi
            } else {
                0
            }
        };
        let mut removable: Vec<(usize, usize)> = (0..suffix_start)
            .filter(|&i| dist(i, head) > 0 && dist(i, tail) > 0)
            .map(|i| (i, dist(i, head).min(dist(i, tail))))
            .collect();
        if removable.len() < need {
            return Err(Error::Tokenize(format!(
                "max_len {max_len} too small: sequence needs {} mandatory tokens",
                total - removable.len()
            )));
        }
        removable.sort_by(|a, b| b.1.cmp(&a.1).then(b.0.cmp(&a.0)));
        for &(i, _) in removable.iter().take(need) {
            removed[i] = true;
        }
    }

    let mut ids = Vec::with_capacity(total.min(max_len));
    ids.push(CLS_ID);
    let mut new_pos = vec![usize::MAX; n];
    for (i, w) in text.words.iter().enumerate() {
        if removed[i] {
            continue;
        }
        new_pos[i] = ids.len();
        ids.push(vocab.id_or_unk(w));
    }

    let inp = EncodedInput {
        ids,
        cls_pos: 0,
        e1_pos: new_pos[text.e1_word_index],
        e1_close_pos: new_pos[text.e1_close_word_index],
        e2_pos: new_pos[text.e2_word_index],
        e2_close_pos: new_pos[text.e2_close_word_index],
        mask_pos: new_pos[text.mask_word_index],
        mlm_targets: BTreeMap::new(),
    };
    inp.validate()?;
    Ok(inp)
}

/// Apply one masking strategy, recording original ids of the selected
/// positions in `mlm_targets`. Of the selected positions 80% become [MASK],
/// 10% a random non-special vocabulary id, 10% stay unchanged. Special-token
/// positions (anchors included) are never candidates.
pub fn apply_mlm_masking(
    inp: &EncodedInput,
    ex: &AnnotatedExample,
    strat: MaskingStrategy,
    vocab: &Vocabulary,
    seed: u64,
) -> Result<EncodedInput> {
    strat.validate()?;
    inp.validate()?;
    if !inp.mlm_targets.is_empty() {
        return Err(Error::Tokenize("input already carries MLM corruption".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut selected: Vec<usize> = Vec::new();
    match strat.kind {
        MaskingKind::None => {}
        MaskingKind::EntitySpans => {
            for range in [inp.head_token_range(), inp.tail_token_range()] {
                if rng.random::<f64>() < strat.rate {
                    selected.extend(range);
                }
            }
        }
        MaskingKind::EntitySpanHeads => {
            let spans = [
                (inp.head_token_range(), ex.head_span, ex.head_span_head),
                (inp.tail_token_range(), ex.tail_span, ex.tail_span_head),
            ];
            for (range, span, head_word) in spans {
                if rng.random::<f64>() < strat.rate {
                    // fall back to the span's last word when unannotated
                    let pos = match head_word {
                        Some(w) => range.start + (w - span.start),
                        None => range.end - 1,
                    };
                    selected.push(pos);
                }
            }
        }
        MaskingKind::RandomTokens => {
            for (pos, &id) in inp.ids.iter().enumerate() {
                if !vocab.is_special_id(id) && rng.random::<f64>() < strat.rate {
                    selected.push(pos);
                }
            }
        }
    }

    let mut out = inp.clone();
    let vocab_len = vocab.len() as u32;
    let regular_tokens_exist = vocab_len > SPECIAL_TOKENS.len() as u32;
    for pos in selected {
        out.mlm_targets.insert(pos, inp.ids[pos]);
        let u: f64 = rng.random();
        if u < 0.8 {
            out.ids[pos] = MASK_ID;
        } else if u < 0.9 && regular_tokens_exist {
            out.ids[pos] = rng.random_range(SPECIAL_TOKENS.len() as u32..vocab_len);
        } // else: keep the original id
    }
    Ok(out)
}
