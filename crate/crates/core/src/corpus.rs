//! Data model, dataset ingestion, marker/prompt template construction, and
//! few-shot subsampling.
//!
//! The interchange format is JSONL: one record per line with fields
//! `id`, `tokens`, `head`, `tail`, `relation` and optional `doc_id`,
//! `head_span_head`, `tail_span_head` (word index of the syntactic head of
//! each entity span, used by the span-head masking strategy).

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Distinguished label for sentences expressing no inventory relation.
/// Treated as an ordinary classifier class; only metrics special-case it.
pub const NO_RELATION: &str = "no_relation";

pub const E1_OPEN: &str = "[E1]";
pub const E1_CLOSE: &str = "[/E1]";
pub const E2_OPEN: &str = "[E2]";
pub const E2_CLOSE: &str = "[/E2]";
pub const MASK_TOKEN: &str = "[MASK]";

/// Half-open word-index interval.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(from = "(usize, usize)", into = "(usize, usize)")]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn new(start: usize, end: usize) -> Self {
        Span { start, end }
    }

    pub fn len(&self) -> usize {
        self.end.saturating_sub(self.start)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn contains(&self, idx: usize) -> bool {
        idx >= self.start && idx < self.end
    }

    pub fn overlaps(&self, other: &Span) -> bool {
        self.start < other.end && other.start < self.end
    }
}

impl From<(usize, usize)> for Span {
    fn from(v: (usize, usize)) -> Self {
        Span::new(v.0, v.1)
    }
}

impl From<Span> for (usize, usize) {
    fn from(s: Span) -> Self {
        (s.start, s.end)
    }
}

/// One sentence with designated head and tail entity mentions; the unit of
/// all training and evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotatedExample {
    pub id: String,
    pub tokens: Vec<String>,
    #[serde(rename = "head")]
    pub head_span: Span,
    #[serde(rename = "tail")]
    pub tail_span: Span,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub relation: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub doc_id: Option<String>,
    /// Word index of the head span's syntactic head, when annotated.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub head_span_head: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tail_span_head: Option<usize>,
}

impl AnnotatedExample {
    pub fn validate(&self) -> Result<()> {
        let fail = |reason: String| Error::MalformedRecord {
            id: self.id.clone(),
            reason,
        };
        for (name, span) in [("head", self.head_span), ("tail", self.tail_span)] {
            if span.is_empty() {
                return Err(fail(format!("empty span: {name} [{},{})", span.start, span.end)));
            }
            if span.end > self.tokens.len() {
                return Err(fail(format!(
                    "{name} span [{},{}) exceeds sentence length {}",
                    span.start,
                    span.end,
                    self.tokens.len()
                )));
            }
        }
        if self.head_span.overlaps(&self.tail_span) {
            return Err(fail("head and tail spans overlap".into()));
        }
        for (name, head, span) in [
            ("head", self.head_span_head, self.head_span),
            ("tail", self.tail_span_head, self.tail_span),
        ] {
            if let Some(h) = head {
                if !span.contains(h) {
                    return Err(fail(format!("{name}_span_head {h} outside its span")));
                }
            }
        }
        for t in &self.tokens {
            if RESERVED.contains(&t.as_str()) {
                return Err(fail(format!("reserved token {t:?} in sentence")));
            }
        }
        Ok(())
    }

    pub fn head_words(&self) -> &[String] {
        &self.tokens[self.head_span.start..self.head_span.end]
    }

    pub fn tail_words(&self) -> &[String] {
        &self.tokens[self.tail_span.start..self.tail_span.end]
    }
}

const RESERVED: [&str; 5] = [E1_OPEN, E1_CLOSE, E2_OPEN, E2_CLOSE, MASK_TOKEN];

/// Ordered set of relation labels; the order fixes classifier output indices
/// and is preserved across save/load.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelInventory {
    labels: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl LabelInventory {
    pub fn from_labels(labels: Vec<String>) -> Result<Self> {
        let mut index = HashMap::new();
        for (i, l) in labels.iter().enumerate() {
            if index.insert(l.clone(), i).is_some() {
                return Err(Error::Config(format!("duplicate label {l:?} in inventory")));
            }
        }
        Ok(LabelInventory { labels, index })
    }

    /// Collect labels in first-appearance order.
    pub fn from_examples<'a>(examples: impl IntoIterator<Item = &'a AnnotatedExample>) -> Self {
        let mut inv = LabelInventory {
            labels: Vec::new(),
            index: HashMap::new(),
        };
        for ex in examples {
            if let Some(rel) = &ex.relation {
                if !inv.index.contains_key(rel) {
                    inv.index.insert(rel.clone(), inv.labels.len());
                    inv.labels.push(rel.clone());
                }
            }
        }
        inv
    }

    /// Rebuild the lookup index after deserialization.
    pub fn reindex(&mut self) {
        self.index = self
            .labels
            .iter()
            .enumerate()
            .map(|(i, l)| (l.clone(), i))
            .collect();
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.index.get(label).copied()
    }

    pub fn label(&self, idx: usize) -> Option<&str> {
        self.labels.get(idx).map(|s| s.as_str())
    }

    pub fn no_relation_index(&self) -> Option<usize> {
        self.index_of(NO_RELATION)
    }
}

/// Marker-annotated sentence plus the relation prompt, ready for encoding.
/// `mask_word_index` points at the prompt's `[MASK]`; the template closes
/// with a final period after it.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnotatedText {
    pub words: Vec<String>,
    pub e1_word_index: usize,
    pub e1_close_word_index: usize,
    pub e2_word_index: usize,
    pub e2_close_word_index: usize,
    pub mask_word_index: usize,
}

impl AnnotatedText {
    /// Index of the first prompt word ("The" of the appended phrase).
    pub fn suffix_start(&self) -> usize {
        let head_len = self.e1_close_word_index - self.e1_word_index - 1;
        let tail_len = self.e2_close_word_index - self.e2_word_index - 1;
        self.words.len() - (7 + head_len + tail_len)
    }
}

/// Wrap the head span in [E1]…[/E1] and the tail span in [E2]…[/E2], then
/// append "The relation between <head> and <tail> is [MASK] .". Markers are
/// inserted from the rightmost span leftward so earlier indices never shift.
pub fn build_annotated_text(ex: &AnnotatedExample) -> Result<AnnotatedText> {
    ex.validate()?;
    let mut words = ex.tokens.clone();
    let head_first = ex.head_span.start < ex.tail_span.start;
    let (later_span, later_open, later_close, earlier_span, earlier_open, earlier_close) =
        if head_first {
            (ex.tail_span, E2_OPEN, E2_CLOSE, ex.head_span, E1_OPEN, E1_CLOSE)
        } else {
            (ex.head_span, E1_OPEN, E1_CLOSE, ex.tail_span, E2_OPEN, E2_CLOSE)
        };
    words.insert(later_span.end, later_close.to_string());
    words.insert(later_span.start, later_open.to_string());
    words.insert(earlier_span.end, earlier_close.to_string());
    words.insert(earlier_span.start, earlier_open.to_string());

    let (e1, e1c, e2, e2c) = if head_first {
        (
            ex.head_span.start,
            ex.head_span.end + 1,
            ex.tail_span.start + 2,
            ex.tail_span.end + 3,
        )
    } else {
        (
            ex.head_span.start + 2,
            ex.head_span.end + 3,
            ex.tail_span.start,
            ex.tail_span.end + 1,
        )
    };
    debug_assert_eq!(words[e1], E1_OPEN);
    debug_assert_eq!(words[e1c], E1_CLOSE);
    debug_assert_eq!(words[e2], E2_OPEN);
    debug_assert_eq!(words[e2c], E2_CLOSE);

    words.push("The".into());
    words.push("relation".into());
    words.push("between".into());
    words.extend(ex.head_words().iter().cloned());
    words.push("and".into());
    words.extend(ex.tail_words().iter().cloned());
    words.push("is".into());
    let mask = words.len();
    words.push(MASK_TOKEN.into());
    words.push(".".into());

    Ok(AnnotatedText {
        words,
        e1_word_index: e1,
        e1_close_word_index: e1c,
        e2_word_index: e2,
        e2_close_word_index: e2c,
        mask_word_index: mask,
    })
}

/// Load a JSONL dataset. Every record must carry a relation label; records
/// violating the [`AnnotatedExample`] invariants are rejected with the record
/// id and the violated invariant. The inventory collects labels in
/// first-appearance order.
pub fn load_dataset(path: impl AsRef<Path>) -> Result<(Vec<AnnotatedExample>, LabelInventory)> {
    let path = path.as_ref();
    let content = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut examples = Vec::new();
    for (lineno, line) in content.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let ex: AnnotatedExample =
            serde_json::from_str(line).map_err(|e| Error::MalformedRecord {
                id: format!("{}:{}", path.display(), lineno + 1),
                reason: e.to_string(),
            })?;
        ex.validate()?;
        if ex.relation.is_none() {
            return Err(Error::MalformedRecord {
                id: ex.id.clone(),
                reason: "missing relation label".into(),
            });
        }
        examples.push(ex);
    }
    let inventory = LabelInventory::from_examples(&examples);
    Ok((examples, inventory))
}

/// Write examples as JSONL, one record per line.
pub fn save_dataset(examples: &[AnnotatedExample], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    for ex in examples {
        out.push_str(&serde_json::to_string(ex).expect("example serializes"));
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Per-label subsample: each label keeps min(k, class size) examples drawn
/// uniformly without replacement; deterministic under `seed`. Output keeps
/// the input order. Unlabeled examples are ignored.
pub fn few_shot_sample(
    examples: &[AnnotatedExample],
    k: usize,
    seed: u64,
) -> Result<Vec<AnnotatedExample>> {
    if k == 0 {
        return Err(Error::Config("few-shot k must be >= 1".into()));
    }
    let inventory = LabelInventory::from_examples(examples);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keep = vec![false; examples.len()];
    for label in inventory.labels() {
        let mut indices: Vec<usize> = examples
            .iter()
            .enumerate()
            .filter(|(_, ex)| ex.relation.as_deref() == Some(label))
            .map(|(i, _)| i)
            .collect();
        indices.shuffle(&mut rng);
        for &i in indices.iter().take(k) {
            keep[i] = true;
        }
    }
    Ok(examples
        .iter()
        .zip(&keep)
        .filter(|(_, &k)| k)
        .map(|(ex, _)| ex.clone())
        .collect())
}

/// Seeded holdout split over `n` items: (train indices, validation indices),
/// each in ascending order. The validation side gets ceil(fraction·n),
/// clamped so both sides stay nonempty.
pub fn holdout_split(n: usize, fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if n < 2 {
        return Err(Error::Config(format!(
            "cannot hold out a validation set from {n} item(s)"
        )));
    }
    if !(0.0..1.0).contains(&fraction) || fraction <= 0.0 {
        return Err(Error::Config(format!(
            "validation fraction {fraction} outside (0,1)"
        )));
    }
    let n_valid = ((n as f64 * fraction).ceil() as usize).clamp(1, n - 1);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut valid: Vec<usize> = order[..n_valid].to_vec();
    let mut train: Vec<usize> = order[n_valid..].to_vec();
    valid.sort_unstable();
    train.sort_unstable();
    Ok((train, valid))
}
