//! Evaluation metrics and analysis artifacts: micro-F1 with the TACRED
//! no_relation convention, per-relation precision@k, confusion matrices with
//! an "other" bucket, error comparison between two models, and MLM probing
//! of the prompt [MASK] position.

use std::collections::BTreeMap;

use crate::classifier::predict_index;
use crate::corpus::{build_annotated_text, AnnotatedExample, LabelInventory, NO_RELATION};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tokens::tokenize;
use crate::trainer::Checkpoint;

/// Micro-averaged precision/recall/F1 with no_relation excluded from TP
/// counting: TP when gold = pred ≠ no_relation; FP when pred ≠ no_relation
/// and pred ≠ gold; FN when gold ≠ no_relation and pred ≠ gold.
pub fn micro_f1(golds: &[String], preds: &[String]) -> Result<(f64, f64, f64)> {
    if golds.len() != preds.len() {
        return Err(Error::Metrics(format!(
            "{} golds vs {} predictions",
            golds.len(),
            preds.len()
        )));
    }
    let (mut tp, mut fp, mut fnn) = (0usize, 0usize, 0usize);
    for (g, p) in golds.iter().zip(preds) {
        if g == p {
            if g != NO_RELATION {
                tp += 1;
            }
            continue;
        }
        if p != NO_RELATION {
            fp += 1;
        }
        if g != NO_RELATION {
            fnn += 1;
        }
    }
    let precision = if tp + fp > 0 { tp as f64 / (tp + fp) as f64 } else { 0.0 };
    let recall = if tp + fnn > 0 { tp as f64 / (tp + fnn) as f64 } else { 0.0 };
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    Ok((precision, recall, f1))
}

/// Per-relation precision among the k highest-scored examples, macro-averaged
/// over the labels (no_relation excluded) with at least one gold instance.
/// `scores[i]` holds per-label probabilities aligned to the inventory; ranking
/// ties break toward the lower example index.
pub fn precision_at_k(
    scores: &[Vec<f64>],
    golds: &[String],
    k: usize,
    inventory: &LabelInventory,
) -> Result<f64> {
    if k == 0 {
        return Err(Error::Metrics("k must be >= 1".into()));
    }
    if scores.len() != golds.len() {
        return Err(Error::Metrics(format!(
            "{} score rows vs {} golds",
            scores.len(),
            golds.len()
        )));
    }
    for row in scores {
        if row.len() != inventory.len() {
            return Err(Error::Metrics(format!(
                "score row width {} vs inventory size {}",
                row.len(),
                inventory.len()
            )));
        }
    }
    let n = golds.len();
    let mut per_label = Vec::new();
    for (li, label) in inventory.labels().iter().enumerate() {
        if label == NO_RELATION {
            continue;
        }
        if !golds.iter().any(|g| g == label) {
            continue;
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| {
            scores[b][li]
                .partial_cmp(&scores[a][li])
                .expect("finite scores")
                .then(a.cmp(&b))
        });
        let top = k.min(n);
        let hits = order[..top].iter().filter(|&&i| &golds[i] == label).count();
        per_label.push(hits as f64 / top as f64);
    }
    if per_label.is_empty() {
        return Ok(0.0);
    }
    Ok(per_label.iter().sum::<f64>() / per_label.len() as f64)
}

/// Gold-by-predicted count matrix. With a `focus` subset, labels outside it
/// are aggregated into a trailing "other" row and column.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfusionMatrix {
    pub labels: Vec<String>,
    /// counts[gold][pred]
    pub counts: Vec<Vec<usize>>,
}

pub const OTHER_LABEL: &str = "other";

impl ConfusionMatrix {
    pub fn total(&self) -> usize {
        self.counts.iter().map(|r| r.iter().sum::<usize>()).sum()
    }

    pub fn diagonal(&self) -> usize {
        (0..self.labels.len()).map(|i| self.counts[i][i]).sum()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("gold\\pred");
        for l in &self.labels {
            out.push(',');
            out.push_str(l);
        }
        out.push('\n');
        for (l, row) in self.labels.iter().zip(&self.counts) {
            out.push_str(l);
            for c in row {
                out.push(',');
                out.push_str(&c.to_string());
            }
            out.push('\n');
        }
        out
    }
}

pub fn confusion_matrix(
    golds: &[String],
    preds: &[String],
    focus: Option<&[String]>,
) -> Result<ConfusionMatrix> {
    if golds.len() != preds.len() {
        return Err(Error::Metrics(format!(
            "{} golds vs {} predictions",
            golds.len(),
            preds.len()
        )));
    }
    let labels: Vec<String> = match focus {
        Some(f) => {
            let mut l = f.to_vec();
            l.push(OTHER_LABEL.to_string());
            l
        }
        None => {
            let mut l: Vec<String> = Vec::new();
            for s in golds.iter().chain(preds) {
                if !l.contains(s) {
                    l.push(s.clone());
                }
            }
            l
        }
    };
    let index_of = |s: &String| -> usize {
        labels
            .iter()
            .position(|l| l == s)
            .unwrap_or(labels.len() - 1) // "other"
    };
    let mut counts = vec![vec![0usize; labels.len()]; labels.len()];
    for (g, p) in golds.iter().zip(preds) {
        counts[index_of(g)][index_of(p)] += 1;
    }
    Ok(ConfusionMatrix { labels, counts })
}

/// (gold, predicted) for one example.
#[derive(Debug, Clone, PartialEq)]
pub struct PerExample {
    pub id: String,
    pub gold: String,
    pub predicted: String,
}

/// Everything the evaluation stage reports.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub micro_precision: f64,
    pub micro_recall: f64,
    pub micro_f1: f64,
    pub p_at_k: BTreeMap<usize, f64>,
    pub confusion: ConfusionMatrix,
    pub per_example: Vec<PerExample>,
}

pub fn evaluate_predictions(
    ids: &[String],
    golds: &[String],
    preds: &[String],
    scores: &[Vec<f64>],
    inventory: &LabelInventory,
    ks: &[usize],
) -> Result<EvalReport> {
    let (p, r, f1) = micro_f1(golds, preds)?;
    let mut p_at_k = BTreeMap::new();
    for &k in ks {
        p_at_k.insert(k, precision_at_k(scores, golds, k, inventory)?);
    }
    let confusion = confusion_matrix(golds, preds, None)?;
    let per_example = ids
        .iter()
        .zip(golds)
        .zip(preds)
        .map(|((id, g), pr)| PerExample {
            id: id.clone(),
            gold: g.clone(),
            predicted: pr.clone(),
        })
        .collect();
    Ok(EvalReport {
        micro_precision: p,
        micro_recall: r,
        micro_f1: f1,
        p_at_k,
        confusion,
        per_example,
    })
}

impl EvalReport {
    /// "key: value" lines; extra header entries (strategy, seed, …) first.
    pub fn render_text(&self, header: &[(String, String)]) -> String {
        let mut out = String::new();
        for (k, v) in header {
            out.push_str(&format!("{k}: {v}\n"));
        }
        out.push_str(&format!("examples: {}\n", self.per_example.len()));
        out.push_str(&format!("micro_precision: {:.6}\n", self.micro_precision));
        out.push_str(&format!("micro_recall: {:.6}\n", self.micro_recall));
        out.push_str(&format!("micro_f1: {:.6}\n", self.micro_f1));
        for (k, v) in &self.p_at_k {
            out.push_str(&format!("p_at_{k}: {v:.6}\n"));
        }
        out.push_str(
            "f1_convention: micro-averaged; no_relation excluded from TP counting\n",
        );
        out.push_str("p_at_k_convention: per-label ranking, ties by example index, macro mean over labels with gold instances\n");
        out
    }

    /// Machine-readable per-example table.
    pub fn per_example_tsv(&self) -> String {
        let mut out = String::from("id\tgold\tpredicted\n");
        for row in &self.per_example {
            out.push_str(&format!("{}\t{}\t{}\n", row.id, row.gold, row.predicted));
        }
        out
    }
}

/// Per-label disagreement counts between two models on the same examples.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorComparisonRow {
    pub label: String,
    /// A wrong while B right, among examples with this gold label.
    pub a_wrong_b_right: usize,
    pub b_wrong_a_right: usize,
}

pub fn error_comparison(a: &EvalReport, b: &EvalReport) -> Result<Vec<ErrorComparisonRow>> {
    error_comparison_tables(&a.per_example, &b.per_example)
}

/// Same comparison over bare per-example tables (e.g. parsed from disk).
pub fn error_comparison_tables(
    a: &[PerExample],
    b: &[PerExample],
) -> Result<Vec<ErrorComparisonRow>> {
    if a.len() != b.len() {
        return Err(Error::Metrics("reports cover different example counts".into()));
    }
    let b_by_id: BTreeMap<&str, &PerExample> = b.iter().map(|p| (p.id.as_str(), p)).collect();
    let mut rows: Vec<ErrorComparisonRow> = Vec::new();
    for pa in a {
        let pb = b_by_id.get(pa.id.as_str()).ok_or_else(|| {
            Error::Metrics(format!("example {} missing from the second report", pa.id))
        })?;
        if pa.gold != pb.gold {
            return Err(Error::Metrics(format!(
                "example {} has different gold labels across reports",
                pa.id
            )));
        }
        let row = match rows.iter_mut().find(|r| r.label == pa.gold) {
            Some(r) => r,
            None => {
                rows.push(ErrorComparisonRow {
                    label: pa.gold.clone(),
                    a_wrong_b_right: 0,
                    b_wrong_a_right: 0,
                });
                rows.last_mut().expect("just pushed")
            }
        };
        let a_right = pa.predicted == pa.gold;
        let b_right = pb.predicted == pb.gold;
        if !a_right && b_right {
            row.a_wrong_b_right += 1;
        }
        if !b_right && a_right {
            row.b_wrong_a_right += 1;
        }
    }
    Ok(rows)
}

pub fn error_comparison_csv(rows: &[ErrorComparisonRow]) -> String {
    let mut out = String::from("label,a_wrong_b_right,b_wrong_a_right\n");
    for r in rows {
        out.push_str(&format!("{},{},{}\n", r.label, r.a_wrong_b_right, r.b_wrong_a_right));
    }
    out
}

/// Top-k vocabulary tokens by MLM logit at the prompt [MASK] position,
/// descending; ties break by token id.
pub fn probe_mask_tokens<F: Scalar>(
    ck: &Checkpoint<F>,
    ex: &AnnotatedExample,
    top_k: usize,
) -> Result<Vec<(String, f64)>> {
    use crate::encoder::EncoderContract;
    let text = build_annotated_text(ex)?;
    let inp = tokenize(&text, &ck.vocab, ck.encoder.config().max_len)?;
    let hidden = ck.encoder.hidden_states(&inp.ids, None);
    let emb = ck.encoder.params().get("tok_emb");
    let bias = ck.encoder.params().get("mlm.bias");
    let state = hidden.row(inp.mask_pos);
    let mut scored: Vec<(u32, f64)> = (0..ck.vocab.len() as u32)
        .map(|id| {
            let row = emb.row(id as usize);
            let logit: F = state.iter().zip(row.iter()).map(|(&a, &b)| a * b).sum::<F>()
                + bias[(0, id as usize)];
            (id, logit.as_f64())
        })
        .collect();
    scored.sort_by(|a, b| b.1.partial_cmp(&a.1).expect("finite logits").then(a.0.cmp(&b.0)));
    scored.truncate(top_k);
    Ok(scored
        .into_iter()
        .map(|(id, s)| (ck.vocab.token(id).expect("id in vocab").to_string(), s))
        .collect())
}

/// Scores from classifier probabilities keyed by inventory order; the helper
/// the evaluation pipeline feeds into [`precision_at_k`].
pub fn predictions_to_labels<F: Scalar>(
    probs: &[Vec<F>],
    inventory: &LabelInventory,
) -> Result<Vec<String>> {
    let mut out = Vec::with_capacity(probs.len());
    for p in probs {
        if p.len() != inventory.len() {
            return Err(Error::Metrics("probability width vs inventory".into()));
        }
        out.push(
            inventory
                .label(predict_index(p))
                .expect("argmax in range")
                .to_string(),
        );
    }
    Ok(out)
}
