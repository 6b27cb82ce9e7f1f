//! Self-supervised positive-pair mining from dual-source coreference chains.
//!
//! Two sentences from the same document that each mention the same two
//! consensus entities form a positive pair. Consensus is taken at the
//! mention-pair level: a pair of mentions counts as co-referring only when
//! both annotation sources link them; connected components over those pairs
//! restore transitivity across the sources' differing chain segmentations.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{AnnotatedExample, Span};
use crate::error::{Error, Result};

/// One mention: a span inside one sentence of the document.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Mention {
    pub sentence: usize,
    pub span: Span,
}

/// A document with two independent coreference chain annotations.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorefDocument {
    pub doc_id: String,
    pub sentences: Vec<Vec<String>>,
    pub chains_a: Vec<Vec<Mention>>,
    pub chains_b: Vec<Vec<Mention>>,
}

impl CorefDocument {
    pub fn validate(&self) -> Result<()> {
        for (source, chains) in [("a", &self.chains_a), ("b", &self.chains_b)] {
            let mut seen: BTreeSet<Mention> = BTreeSet::new();
            for chain in chains {
                for m in chain {
                    let sent = self.sentences.get(m.sentence).ok_or_else(|| {
                        Error::Pairs(format!(
                            "doc {}: mention sentence {} out of range",
                            self.doc_id, m.sentence
                        ))
                    })?;
                    if m.span.is_empty() || m.span.end > sent.len() {
                        return Err(Error::Pairs(format!(
                            "doc {}: invalid mention span [{},{}) in sentence {}",
                            self.doc_id, m.span.start, m.span.end, m.sentence
                        )));
                    }
                    if !seen.insert(*m) {
                        return Err(Error::Pairs(format!(
                            "doc {}: source {source} repeats a mention across chains",
                            self.doc_id
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    fn surface(&self, m: &Mention) -> &[String] {
        &self.sentences[m.sentence][m.span.start..m.span.end]
    }
}

/// Anchor/positive sentence pair sharing a consensus entity pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MinedPair {
    pub anchor: AnnotatedExample,
    pub positive: AnnotatedExample,
    pub entity_pair_key: String,
}

impl MinedPair {
    pub fn validate(&self) -> Result<()> {
        self.anchor.validate()?;
        self.positive.validate()?;
        if self.anchor.doc_id != self.positive.doc_id || self.anchor.doc_id.is_none() {
            return Err(Error::Pairs(format!(
                "pair {} / {}: members must share a doc_id",
                self.anchor.id, self.positive.id
            )));
        }
        if self.anchor.id == self.positive.id {
            return Err(Error::Pairs(format!(
                "pair {}: anchor equals positive",
                self.anchor.id
            )));
        }
        Ok(())
    }
}

struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        UnionFind {
            parent: (0..n).collect(),
        }
    }

    fn find(&mut self, i: usize) -> usize {
        if self.parent[i] != i {
            let root = self.find(self.parent[i]);
            self.parent[i] = root;
        }
        self.parent[i]
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            self.parent[ra.max(rb)] = ra.min(rb);
        }
    }
}

/// Consensus chains: connected components of the "both sources link this
/// mention pair" relation. Chains are sorted by their first mention and the
/// mentions within a chain by document position.
pub fn intersect_chains(doc: &CorefDocument) -> Result<Vec<Vec<Mention>>> {
    doc.validate()?;
    let chain_index = |chains: &[Vec<Mention>]| -> BTreeMap<Mention, usize> {
        let mut m = BTreeMap::new();
        for (i, chain) in chains.iter().enumerate() {
            for mention in chain {
                m.insert(*mention, i);
            }
        }
        m
    };
    let in_a = chain_index(&doc.chains_a);
    let in_b = chain_index(&doc.chains_b);
    let shared: Vec<Mention> = in_a.keys().filter(|m| in_b.contains_key(m)).copied().collect();
    let index_of: BTreeMap<Mention, usize> =
        shared.iter().enumerate().map(|(i, m)| (*m, i)).collect();

    let mut uf = UnionFind::new(shared.len());
    let mut linked = vec![false; shared.len()];
    for (i, m1) in shared.iter().enumerate() {
        for m2 in shared.iter().skip(i + 1) {
            if in_a[m1] == in_a[m2] && in_b[m1] == in_b[m2] {
                let j = index_of[m2];
                uf.union(i, j);
                linked[i] = true;
                linked[j] = true;
            }
        }
    }

    let mut components: BTreeMap<usize, Vec<Mention>> = BTreeMap::new();
    for (i, m) in shared.iter().enumerate() {
        if linked[i] {
            components.entry(uf.find(i)).or_default().push(*m);
        }
    }
    let mut chains: Vec<Vec<Mention>> = components.into_values().collect();
    for c in &mut chains {
        c.sort();
    }
    chains.sort_by_key(|c| c[0]);
    Ok(chains)
}

/// Options for [`mine_pairs`].
#[derive(Debug, Clone, Copy)]
pub struct MinerConfig {
    /// Upper bound on pairs per entity-pair key per document; the excess is
    /// dropped by seeded sampling so long stories do not dominate.
    pub max_pairs_per_key: usize,
    pub seed: u64,
    /// Drop chains' pronoun mentions before forming sentence examples.
    pub drop_pronoun_mentions: bool,
}

impl Default for MinerConfig {
    fn default() -> Self {
        MinerConfig {
            max_pairs_per_key: 10,
            seed: 0,
            drop_pronoun_mentions: false,
        }
    }
}

const PRONOUNS: [&str; 24] = [
    "i", "me", "my", "mine", "you", "your", "yours", "he", "him", "his", "she", "her", "hers",
    "it", "its", "we", "us", "our", "ours", "they", "them", "their", "theirs", "who",
];

fn is_pronoun_mention(doc: &CorefDocument, m: &Mention) -> bool {
    let words = doc.surface(m);
    words.len() == 1 && PRONOUNS.contains(&words[0].to_lowercase().as_str())
}

/// Mine anchor/positive pairs from one document. For every unordered pair of
/// consensus chains and every pair of distinct sentences each mentioning
/// both chains, emit one pair; the chain whose first mention comes earlier
/// in the document takes the head role.
pub fn mine_pairs(doc: &CorefDocument, cfg: &MinerConfig) -> Result<Vec<MinedPair>> {
    let chains = intersect_chains(doc)?;
    let mut out: Vec<MinedPair> = Vec::new();
    for i in 0..chains.len() {
        for j in i + 1..chains.len() {
            let key = format!("{}#c{}-c{}", doc.doc_id, i, j);
            // earliest usable mention of each chain per sentence
            let per_sentence = |chain: &[Mention]| -> BTreeMap<usize, Mention> {
                let mut m: BTreeMap<usize, Mention> = BTreeMap::new();
                for mention in chain {
                    if cfg.drop_pronoun_mentions && is_pronoun_mention(doc, mention) {
                        continue;
                    }
                    m.entry(mention.sentence).or_insert(*mention);
                }
                m
            };
            let head_mentions = per_sentence(&chains[i]);
            let tail_mentions = per_sentence(&chains[j]);
            let mut sentence_examples: Vec<AnnotatedExample> = Vec::new();
            for (&sent, head) in &head_mentions {
                let Some(tail) = tail_mentions.get(&sent) else {
                    continue;
                };
                if head.span.overlaps(&tail.span) {
                    continue;
                }
                sentence_examples.push(AnnotatedExample {
                    id: format!(
                        "{}:s{}:h{}-{}:t{}-{}",
                        doc.doc_id, sent, head.span.start, head.span.end, tail.span.start,
                        tail.span.end
                    ),
                    tokens: doc.sentences[sent].clone(),
                    head_span: head.span,
                    tail_span: tail.span,
                    relation: None,
                    doc_id: Some(doc.doc_id.clone()),
                    head_span_head: None,
                    tail_span_head: None,
                });
            }
            let mut key_pairs: Vec<MinedPair> = Vec::new();
            for a in 0..sentence_examples.len() {
                for b in a + 1..sentence_examples.len() {
                    key_pairs.push(MinedPair {
                        anchor: sentence_examples[a].clone(),
                        positive: sentence_examples[b].clone(),
                        entity_pair_key: key.clone(),
                    });
                }
            }
            if key_pairs.len() > cfg.max_pairs_per_key {
                let mut rng = ChaCha8Rng::seed_from_u64(key_seed(cfg.seed, &key));
                key_pairs.shuffle(&mut rng);
                key_pairs.truncate(cfg.max_pairs_per_key);
                key_pairs.sort_by(|x, y| {
                    (&x.anchor.id, &x.positive.id).cmp(&(&y.anchor.id, &y.positive.id))
                });
            }
            out.extend(key_pairs);
        }
    }
    // canonical order + dedup over the whole document
    out.sort_by(|x, y| (&x.anchor.id, &x.positive.id).cmp(&(&y.anchor.id, &y.positive.id)));
    out.dedup_by(|x, y| x.anchor.id == y.anchor.id && x.positive.id == y.positive.id);
    for p in &out {
        p.validate()?;
    }
    Ok(out)
}

fn key_seed(seed: u64, key: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(key.as_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

/// Mine across documents; output ordered by doc_id regardless of input order.
pub fn mine_pairs_corpus(docs: &[CorefDocument], cfg: &MinerConfig) -> Result<Vec<MinedPair>> {
    let mut order: Vec<&CorefDocument> = docs.iter().collect();
    order.sort_by(|a, b| a.doc_id.cmp(&b.doc_id));
    let mut out = Vec::new();
    for doc in order {
        out.extend(mine_pairs(doc, cfg)?);
    }
    Ok(out)
}

/// Line-delimited records {anchor, positive, entity_pair_key}.
pub fn write_pairs(pairs: &[MinedPair], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    for p in pairs {
        out.push_str(&serde_json::to_string(p).expect("pair serializes"));
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_pairs(path: impl AsRef<Path>) -> Result<Vec<MinedPair>> {
    let path = path.as_ref();
    let content = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut pairs = Vec::new();
    for (lineno, line) in content.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let pair: MinedPair = serde_json::from_str(line).map_err(|e| {
            Error::Pairs(format!("{}:{}: {e}", path.display(), lineno + 1))
        })?;
        pair.validate()
            .map_err(|e| Error::Pairs(format!("{}:{}: {e}", path.display(), lineno + 1)))?;
        pairs.push(pair);
    }
    Ok(pairs)
}

/// Read line-delimited coreference documents.
pub fn read_documents(path: impl AsRef<Path>) -> Result<Vec<CorefDocument>> {
    let path = path.as_ref();
    let content = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut docs = Vec::new();
    for (lineno, line) in content.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let doc: CorefDocument = serde_json::from_str(line).map_err(|e| {
            Error::Pairs(format!("{}:{}: {e}", path.display(), lineno + 1))
        })?;
        doc.validate()?;
        docs.push(doc);
    }
    Ok(docs)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mention(sentence: usize, start: usize, end: usize) -> Mention {
        Mention {
            sentence,
            span: Span::new(start, end),
        }
    }

    fn sent(words: &[&str]) -> Vec<String> {
        words.iter().map(|s| s.to_string()).collect()
    }

    /// Two entities (alice, acme) co-mentioned in sentences 0 and 2.
    fn sample_doc() -> CorefDocument {
        CorefDocument {
            doc_id: "doc1".into(),
            sentences: vec![
                sent(&["alice", "runs", "acme", "daily"]),
                sent(&["the", "weather", "was", "fine"]),
                sent(&["alice", "also", "founded", "acme"]),
            ],
            chains_a: vec![
                vec![mention(0, 0, 1), mention(2, 0, 1)], // alice
                vec![mention(0, 2, 3), mention(2, 3, 4)], // acme
            ],
            chains_b: vec![
                vec![mention(0, 0, 1), mention(2, 0, 1)],
                vec![mention(0, 2, 3), mention(2, 3, 4)],
            ],
        }
    }

    #[test]
    fn empty_source_means_no_consensus() {
        let mut doc = sample_doc();
        doc.chains_b.clear();
        assert!(intersect_chains(&doc).unwrap().is_empty());
    }

    #[test]
    fn identical_sources_are_idempotent() {
        let doc = sample_doc();
        let consensus = intersect_chains(&doc).unwrap();
        assert_eq!(consensus, doc.chains_a);
    }

    #[test]
    fn partial_agreement_splits_components() {
        // A links {m1,m2,m3}; B links {m1,m2} and {m3} → consensus {m1,m2}
        let doc = CorefDocument {
            doc_id: "d".into(),
            sentences: vec![
                sent(&["bob", "x"]),
                sent(&["bob", "y"]),
                sent(&["bob", "z"]),
            ],
            chains_a: vec![vec![mention(0, 0, 1), mention(1, 0, 1), mention(2, 0, 1)]],
            chains_b: vec![vec![mention(0, 0, 1), mention(1, 0, 1)], vec![mention(2, 0, 1)]],
        };
        let consensus = intersect_chains(&doc).unwrap();
        assert_eq!(consensus, vec![vec![mention(0, 0, 1), mention(1, 0, 1)]]);
    }

    #[test]
    fn consensus_is_a_subset_of_each_source() {
        let doc = sample_doc();
        let consensus = intersect_chains(&doc).unwrap();
        let same_chain = |chains: &[Vec<Mention>], x: &Mention, y: &Mention| {
            chains.iter().any(|c| c.contains(x) && c.contains(y))
        };
        for chain in &consensus {
            for x in chain {
                for y in chain {
                    if x != y {
                        assert!(same_chain(&doc.chains_a, x, y));
                        assert!(same_chain(&doc.chains_b, x, y));
                    }
                }
            }
        }
    }

    #[test]
    fn two_shared_sentences_give_exactly_one_pair() {
        let pairs = mine_pairs(&sample_doc(), &MinerConfig::default()).unwrap();
        assert_eq!(pairs.len(), 1);
        let p = &pairs[0];
        assert_eq!(p.anchor.tokens, sent(&["alice", "runs", "acme", "daily"]));
        assert_eq!(p.positive.tokens, sent(&["alice", "also", "founded", "acme"]));
        assert_eq!(p.anchor.head_span, Span::new(0, 1));
        assert_eq!(p.anchor.tail_span, Span::new(2, 3));
        assert_eq!(p.positive.tail_span, Span::new(3, 4));
        assert_eq!(p.entity_pair_key, "doc1#c0-c1");
        assert!(p.anchor.id < p.positive.id);
    }

    #[test]
    fn single_shared_sentence_gives_no_pairs() {
        let mut doc = sample_doc();
        doc.sentences.truncate(2);
        for chains in [&mut doc.chains_a, &mut doc.chains_b] {
            for c in chains.iter_mut() {
                c.retain(|m| m.sentence < 2);
            }
        }
        assert!(mine_pairs(&doc, &MinerConfig::default()).unwrap().is_empty());
    }

    #[test]
    fn pairs_never_cross_documents() {
        let doc_a = sample_doc();
        let mut doc_b = sample_doc();
        doc_b.doc_id = "doc2".into();
        // remove one co-mention sentence from doc_b so it alone yields nothing
        doc_b.chains_a[0].retain(|m| m.sentence == 0);
        doc_b.chains_b[0].retain(|m| m.sentence == 0);
        let pairs = mine_pairs_corpus(&[doc_b, doc_a], &MinerConfig::default()).unwrap();
        assert_eq!(pairs.len(), 1);
        for p in &pairs {
            assert_eq!(p.anchor.doc_id, p.positive.doc_id);
        }
    }

    #[test]
    fn mining_is_deterministic_and_duplicate_free() {
        // 6 sentences sharing the same two entities → C(6,2)=15 pairs, capped
        let n = 6;
        let sentences: Vec<Vec<String>> = (0..n)
            .map(|i| sent(&["eve", "visited", "rome", &format!("day{i}")]))
            .collect();
        let chain_e: Vec<Mention> = (0..n).map(|s| mention(s, 0, 1)).collect();
        let chain_r: Vec<Mention> = (0..n).map(|s| mention(s, 2, 3)).collect();
        let doc = CorefDocument {
            doc_id: "big".into(),
            sentences,
            chains_a: vec![chain_e.clone(), chain_r.clone()],
            chains_b: vec![chain_e, chain_r],
        };
        let cfg = MinerConfig {
            max_pairs_per_key: 10,
            seed: 5,
            drop_pronoun_mentions: false,
        };
        let a = mine_pairs(&doc, &cfg).unwrap();
        let b = mine_pairs(&doc, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 10);
        let mut keys: Vec<(String, String)> = a
            .iter()
            .map(|p| (p.anchor.id.clone(), p.positive.id.clone()))
            .collect();
        keys.sort();
        keys.dedup();
        assert_eq!(keys.len(), 10);
    }

    #[test]
    fn pronoun_filter_drops_pronoun_mentions() {
        let doc = CorefDocument {
            doc_id: "pro".into(),
            sentences: vec![
                sent(&["carol", "joined", "initech"]),
                sent(&["she", "left", "initech"]),
                sent(&["carol", "rejoined", "initech"]),
            ],
            chains_a: vec![
                vec![mention(0, 0, 1), mention(1, 0, 1), mention(2, 0, 1)],
                vec![mention(0, 2, 3), mention(1, 2, 3), mention(2, 2, 3)],
            ],
            chains_b: vec![
                vec![mention(0, 0, 1), mention(1, 0, 1), mention(2, 0, 1)],
                vec![mention(0, 2, 3), mention(1, 2, 3), mention(2, 2, 3)],
            ],
        };
        let all = mine_pairs(&doc, &MinerConfig::default()).unwrap();
        assert_eq!(all.len(), 3); // sentences {0,1,2} choose 2
        let filtered = mine_pairs(
            &doc,
            &MinerConfig {
                drop_pronoun_mentions: true,
                ..MinerConfig::default()
            },
        )
        .unwrap();
        assert_eq!(filtered.len(), 1); // only sentences 0 and 2 remain
    }

    #[test]
    fn pairs_file_round_trips() {
        let pairs = mine_pairs(&sample_doc(), &MinerConfig::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pairs.jsonl");
        write_pairs(&pairs, &path).unwrap();
        let loaded = read_pairs(&path).unwrap();
        assert_eq!(pairs, loaded);
    }

    #[test]
    fn corrupt_pairs_line_errors_with_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pairs.jsonl");
        let pairs = mine_pairs(&sample_doc(), &MinerConfig::default()).unwrap();
        let good = serde_json::to_string(&pairs[0]).unwrap();
        std::fs::write(&path, format!("{good}\n{{not json\n")).unwrap();
        let err = read_pairs(&path).unwrap_err();
        assert!(err.to_string().contains(":2"), "{err}");
    }
}
