//! InfoNCE contrastive loss, MLM loss, their pre-training composition, and
//! positive/negative pair construction.
//!
//! The InfoNCE term for an anchor s with positives P and negatives N is
//!
//! ```text
//! −Σ_{p∈P} log( exp(cos(φ(s),φ(p))/τ) / Σ_{x∈N∪{p}} exp(cos(φ(s),φ(x))/τ) )
//! ```
//!
//! Each positive's denominator contains that positive and all negatives —
//! other positives are excluded. With no negatives the term is exactly 0.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::AnnotatedExample;
use crate::encoder::{extract_view_node, EncoderContract, Strategy, View};
use crate::error::{Error, Result};
use crate::graph::{Graph, InfoNceGroup, Mat, TensorId};
use crate::pairminer::{read_pairs, MinedPair};
use crate::scalar::Scalar;
use crate::tokens::EncodedInput;

/// Anchor with its positive and negative example ids.
#[derive(Debug, Clone, PartialEq)]
pub struct PairSet {
    pub anchor: String,
    pub positives: Vec<String>,
    pub negatives: Vec<String>,
}

impl PairSet {
    pub fn validate(&self) -> Result<()> {
        if self.positives.is_empty() {
            return Err(Error::Pairs(format!("anchor {} has no positives", self.anchor)));
        }
        if self.positives.contains(&self.anchor) || self.negatives.contains(&self.anchor) {
            return Err(Error::Pairs(format!(
                "anchor {} appears among its own positives/negatives",
                self.anchor
            )));
        }
        if self.positives.iter().any(|p| self.negatives.contains(p)) {
            return Err(Error::Pairs(format!(
                "anchor {}: positives and negatives intersect",
                self.anchor
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContrastiveConfig {
    pub temperature: f64,
    pub loss_mode: LossMode,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossMode {
    Single,
    Hybrid,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        ContrastiveConfig {
            temperature: 0.05,
            loss_mode: LossMode::Single,
        }
    }
}

impl ContrastiveConfig {
    pub fn for_strategy(strategy: Strategy, temperature: f64) -> Self {
        let loss_mode = match strategy {
            Strategy::HtPlusMask | Strategy::HtPlusCls => LossMode::Hybrid,
            _ => LossMode::Single,
        };
        ContrastiveConfig {
            temperature,
            loss_mode,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.temperature <= 0.0 {
            return Err(Error::Config(format!(
                "temperature {} must be positive",
                self.temperature
            )));
        }
        Ok(())
    }
}

fn check_vector<F: Scalar>(v: &[F], what: &str, width: usize) -> Result<()> {
    if v.len() != width {
        return Err(Error::Shape(format!(
            "{what} has width {} but expected {width}",
            v.len()
        )));
    }
    let norm = v.iter().map(|&x| x * x).sum::<F>().sqrt();
    if !(norm > F::zero()) {
        return Err(Error::Loss(format!("{what} has zero norm; cosine undefined")));
    }
    Ok(())
}

/// InfoNCE over explicit vectors, as a differentiable node. The gradient
/// flows to whatever produced `anchor`, `positives`, and `negatives`.
pub fn infonce_loss_node<F: Scalar>(
    g: &mut Graph<F>,
    anchor: TensorId,
    positives: &[TensorId],
    negatives: &[TensorId],
    temperature: f64,
) -> Result<TensorId> {
    if positives.is_empty() {
        return Err(Error::Loss("InfoNCE requires at least one positive".into()));
    }
    if temperature <= 0.0 {
        return Err(Error::Config(format!("temperature {temperature} must be positive")));
    }
    let width = g.value(anchor).ncols();
    for (&id, what) in std::iter::once(&anchor)
        .chain(positives)
        .chain(negatives)
        .zip(std::iter::repeat("vector"))
    {
        let v = g.value(id);
        if v.nrows() != 1 {
            return Err(Error::Shape("InfoNCE vectors must be [1,w] rows".into()));
        }
        check_vector(&v.row(0).to_vec(), what, width)?;
    }

    let mut rows = vec![anchor];
    rows.extend_from_slice(positives);
    rows.extend_from_slice(negatives);
    let stacked = g.concat_rows(&rows);
    let normed = g.normalize_rows(stacked);
    let sims = g.matmul_nt(normed, normed);
    let scaled = g.scale(sims, F::from_f64(1.0 / temperature));
    let np = positives.len();
    let group = InfoNceGroup {
        anchor_row: 0,
        positive_cols: (1..=np).collect(),
        negative_cols: (np + 1..rows.len()).collect(),
    };
    Ok(g.grouped_infonce(scaled, vec![group]))
}

/// Value-level InfoNCE over plain vectors.
pub fn infonce_loss<F: Scalar>(
    anchor: &[F],
    positives: &[Vec<F>],
    negatives: &[Vec<F>],
    temperature: f64,
) -> Result<F> {
    let mut g: Graph<F> = Graph::new();
    let a = g.input_row(anchor);
    let ps: Vec<TensorId> = positives.iter().map(|p| g.input_row(p)).collect();
    let ns: Vec<TensorId> = negatives.iter().map(|n| g.input_row(n)).collect();
    let loss = infonce_loss_node(&mut g, a, &ps, &ns, temperature)?;
    Ok(g.scalar(loss))
}

/// Batched InfoNCE: φ rows stacked to [B,w], cosine similarity matrix,
/// grouped log-softmax per anchor. `groups` use row indices into `phi_rows`.
pub fn infonce_batch_node<F: Scalar>(
    g: &mut Graph<F>,
    phi_rows: &[TensorId],
    groups: &[InfoNceGroup],
    temperature: f64,
) -> Result<TensorId> {
    if phi_rows.is_empty() {
        return Err(Error::Loss("empty batch".into()));
    }
    if temperature <= 0.0 {
        return Err(Error::Config(format!("temperature {temperature} must be positive")));
    }
    for grp in groups {
        if grp.positive_cols.is_empty() {
            return Err(Error::Loss("pair group without positives".into()));
        }
    }
    for &id in phi_rows {
        let v = g.value(id);
        let norm = v.row(0).iter().map(|&x| x * x).sum::<F>().sqrt();
        if !(norm > F::zero()) {
            return Err(Error::Loss("zero-norm relation embedding; cosine undefined".into()));
        }
    }
    let stacked = g.concat_rows(phi_rows);
    let normed = g.normalize_rows(stacked);
    let sims = g.matmul_nt(normed, normed);
    let scaled = g.scale(sims, F::from_f64(1.0 / temperature));
    Ok(g.grouped_infonce(scaled, groups.to_vec()))
}

/// Mean cross-entropy of MLM logits rows against the original ids, as a node.
pub fn mlm_loss_node<F: Scalar>(
    g: &mut Graph<F>,
    logits_at_targets: TensorId,
    original_ids: &[u32],
) -> Result<TensorId> {
    if original_ids.is_empty() {
        return Err(Error::Loss("mlm_loss_node needs at least one target".into()));
    }
    let v = g.value(logits_at_targets);
    if v.nrows() != original_ids.len() {
        return Err(Error::Shape(format!(
            "{} logits rows for {} targets",
            v.nrows(),
            original_ids.len()
        )));
    }
    Ok(g.cross_entropy_mean(
        logits_at_targets,
        original_ids.iter().map(|&t| t as usize).collect(),
    ))
}

/// Value-level MLM loss over full-sequence logits and a position→original-id
/// map. No masked positions means loss 0.
pub fn mlm_loss<F: Scalar>(logits: &Mat<F>, targets: &BTreeMap<usize, u32>) -> Result<F> {
    if targets.is_empty() {
        return Ok(F::zero());
    }
    let mut rows = Mat::zeros((targets.len(), logits.ncols()));
    let mut ids = Vec::with_capacity(targets.len());
    for (i, (&pos, &orig)) in targets.iter().enumerate() {
        if pos >= logits.nrows() {
            return Err(Error::Shape(format!("target position {pos} has no logits row")));
        }
        rows.row_mut(i).assign(&logits.row(pos));
        ids.push(orig);
    }
    let mut g: Graph<F> = Graph::new();
    let l = g.input(rows);
    let node = mlm_loss_node(&mut g, l, &ids)?;
    Ok(g.scalar(node))
}

/// In-batch supervised pairs: P_s = same-label batch members, N_s = all other
/// batch members; anchors with no in-batch positive are skipped.
pub fn build_pairs_supervised(
    examples: &[AnnotatedExample],
    batch: &[String],
) -> Result<Vec<PairSet>> {
    let by_id: BTreeMap<&str, &AnnotatedExample> =
        examples.iter().map(|e| (e.id.as_str(), e)).collect();
    let mut members = Vec::with_capacity(batch.len());
    for id in batch {
        let ex = by_id
            .get(id.as_str())
            .ok_or_else(|| Error::Pairs(format!("batch id {id:?} not among the examples")))?;
        let label = ex
            .relation
            .as_deref()
            .ok_or_else(|| Error::Pairs(format!("example {id:?} has no label")))?;
        members.push((id.clone(), label.to_string()));
    }
    let mut out = Vec::new();
    for (i, (anchor, label)) in members.iter().enumerate() {
        let mut positives = Vec::new();
        let mut negatives = Vec::new();
        for (j, (other, other_label)) in members.iter().enumerate() {
            if i == j {
                continue;
            }
            if other_label == label {
                positives.push(other.clone());
            } else {
                negatives.push(other.clone());
            }
        }
        if positives.is_empty() {
            continue;
        }
        let ps = PairSet {
            anchor: anchor.clone(),
            positives,
            negatives,
        };
        ps.validate()?;
        out.push(ps);
    }
    Ok(out)
}

/// Mined pairs with their examples, ready for batching.
#[derive(Debug, Clone)]
pub struct SelfSupervisedPairs {
    /// Deduplicated examples, in first appearance order over the file.
    pub examples: Vec<AnnotatedExample>,
    /// (anchor id, positive id, entity-pair key) triples.
    pub pairs: Vec<(String, String, String)>,
}

impl SelfSupervisedPairs {
    pub fn from_mined(pairs: &[MinedPair]) -> Result<Self> {
        let mut examples: Vec<AnnotatedExample> = Vec::new();
        let mut seen: BTreeMap<String, usize> = BTreeMap::new();
        let mut triples = Vec::new();
        for p in pairs {
            for ex in [&p.anchor, &p.positive] {
                match seen.get(&ex.id) {
                    None => {
                        seen.insert(ex.id.clone(), examples.len());
                        examples.push(ex.clone());
                    }
                    Some(&i) => {
                        if &examples[i] != ex {
                            return Err(Error::Pairs(format!(
                                "example id {:?} appears with conflicting content",
                                ex.id
                            )));
                        }
                    }
                }
            }
            triples.push((p.anchor.id.clone(), p.positive.id.clone(), p.entity_pair_key.clone()));
        }
        Ok(SelfSupervisedPairs {
            examples,
            pairs: triples,
        })
    }

    /// Entity-pair key of every example id.
    pub fn key_of(&self) -> BTreeMap<&str, &str> {
        let mut m = BTreeMap::new();
        for (a, p, key) in &self.pairs {
            m.insert(a.as_str(), key.as_str());
            m.insert(p.as_str(), key.as_str());
        }
        m
    }

    /// PairSets for a batch of pair indices: P_s comes from the file, N_s is
    /// the batch members belonging to other entity-pair groups. Members are
    /// listed in first-appearance order over the batch.
    pub fn batch_pairsets(&self, pair_indices: &[usize]) -> Result<BatchPairs> {
        let key_of = self.key_of();
        let mut member_ids: Vec<&str> = Vec::new();
        for &pi in pair_indices {
            let (a, p, _) = self
                .pairs
                .get(pi)
                .ok_or_else(|| Error::Pairs(format!("pair index {pi} out of range")))?;
            for id in [a.as_str(), p.as_str()] {
                if !member_ids.contains(&id) {
                    member_ids.push(id);
                }
            }
        }
        // merge positives per anchor
        let mut by_anchor: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
        let mut anchor_order: Vec<&str> = Vec::new();
        for &pi in pair_indices {
            let (a, p, _) = &self.pairs[pi];
            let entry = by_anchor.entry(a.as_str()).or_insert_with(|| {
                anchor_order.push(a.as_str());
                Vec::new()
            });
            if !entry.contains(&p.as_str()) {
                entry.push(p.as_str());
            }
        }
        let mut sets = Vec::new();
        for anchor in anchor_order {
            let anchor_key = key_of[anchor];
            let negatives: Vec<String> = member_ids
                .iter()
                .filter(|&&id| key_of[id] != anchor_key)
                .map(|&id| id.to_string())
                .collect();
            let ps = PairSet {
                anchor: anchor.to_string(),
                positives: by_anchor[anchor].iter().map(|s| s.to_string()).collect(),
                negatives,
            };
            ps.validate()?;
            sets.push(ps);
        }
        Ok(BatchPairs {
            members: member_ids.into_iter().map(|s| s.to_string()).collect(),
            sets,
        })
    }
}

/// Batch membership plus the pair sets over it.
#[derive(Debug, Clone)]
pub struct BatchPairs {
    pub members: Vec<String>,
    pub sets: Vec<PairSet>,
}

/// Read a pairs file and expand it into PairSets over the whole file taken
/// as one batch. Negatives for each anchor are the file's examples belonging
/// to other entity pairs.
pub fn load_pairs_selfsupervised(path: impl AsRef<Path>) -> Result<(SelfSupervisedPairs, Vec<PairSet>)> {
    let mined = read_pairs(path)?;
    let pairs = SelfSupervisedPairs::from_mined(&mined)?;
    let all: Vec<usize> = (0..pairs.pairs.len()).collect();
    let sets = pairs.batch_pairsets(&all)?.sets;
    Ok((pairs, sets))
}

/// One pre-assembled pre-training batch: clean inputs feed the contrastive
/// view, corrupted twins feed the MLM view, and groups index into `clean`.
pub struct PretrainBatch<'a> {
    pub clean: &'a [&'a EncodedInput],
    pub corrupted: &'a [&'a EncodedInput],
    pub groups: &'a [InfoNceGroup],
}

/// Differentiable loss components of one pre-training step.
#[derive(Debug)]
pub struct LossNodes {
    pub total: TensorId,
    pub info_terms: Vec<TensorId>,
    pub mlm: Option<TensorId>,
}

/// L_info (per strategy view; two terms for hybrid strategies) plus L_MLM,
/// unit weights, one shared encoder. The contrastive forward runs on the
/// clean inputs; the MLM forward runs on the corrupted twins.
pub fn combined_pretrain_loss<F: Scalar, E: EncoderContract<F>>(
    g: &mut Graph<F>,
    encoder: &E,
    batch: &PretrainBatch<'_>,
    strategy: Strategy,
    cfg: &ContrastiveConfig,
) -> Result<LossNodes> {
    cfg.validate()?;
    if batch.clean.is_empty() {
        return Err(Error::Loss("empty batch".into()));
    }
    if batch.clean.len() != batch.corrupted.len() {
        return Err(Error::Shape("clean/corrupted batch size mismatch".into()));
    }
    let views: Vec<View> = strategy.pretrain_views()?;
    match cfg.loss_mode {
        LossMode::Hybrid if views.len() != 2 => {
            return Err(Error::Strategy(format!(
                "hybrid loss requires a two-view strategy, got {strategy}"
            )));
        }
        LossMode::Single if views.len() != 1 => {
            return Err(Error::Strategy(format!(
                "strategy {strategy} pre-trains two views; use the hybrid loss mode"
            )));
        }
        _ => {}
    }

    // one clean forward per example, shared by all views
    let mut hidden_nodes = Vec::with_capacity(batch.clean.len());
    for inp in batch.clean {
        inp.validate()?;
        hidden_nodes.push(encoder.forward(g, &inp.ids, None));
    }

    let mut info_terms = Vec::new();
    let mut total: Option<TensorId> = None;
    if !batch.groups.is_empty() {
        for view in &views {
            let phi_rows: Vec<TensorId> = hidden_nodes
                .iter()
                .zip(batch.clean)
                .map(|(&h, inp)| extract_view_node(g, h, inp, *view))
                .collect();
            let term = infonce_batch_node(g, &phi_rows, batch.groups, cfg.temperature)?;
            info_terms.push(term);
            total = Some(match total {
                None => term,
                Some(t) => g.add(t, term),
            });
        }
    }

    // corrupted forwards; a single mean over every masked position in the batch
    let mut logit_blocks = Vec::new();
    let mut targets: Vec<u32> = Vec::new();
    for inp in batch.corrupted {
        if inp.mlm_targets.is_empty() {
            continue;
        }
        let h = encoder.forward(g, &inp.ids, None);
        let positions: Vec<usize> = inp.mlm_targets.keys().copied().collect();
        logit_blocks.push(encoder.mlm_logits(g, h, &positions));
        targets.extend(inp.mlm_targets.values().copied());
    }
    let mlm = if targets.is_empty() {
        None
    } else {
        let stacked = g.concat_rows(&logit_blocks);
        let node = mlm_loss_node(g, stacked, &targets)?;
        total = Some(match total {
            None => node,
            Some(t) => g.add(t, node),
        });
        Some(node)
    };

    let total = total.ok_or_else(|| {
        Error::Loss("batch has neither contrastive groups nor MLM targets".into())
    })?;
    Ok(LossNodes {
        total,
        info_terms,
        mlm,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Span;

    fn approx(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() < tol, "{a} vs {b}");
    }

    /// Independent oracle: textbook evaluation of the loss, no shared code
    /// with the graph path.
    fn infonce_oracle(anchor: &[f64], positives: &[Vec<f64>], negatives: &[Vec<f64>], tau: f64) -> f64 {
        fn cos(a: &[f64], b: &[f64]) -> f64 {
            let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
            dot / (na * nb)
        }
        let mut loss = 0.0;
        for p in positives {
            let num = (cos(anchor, p) / tau).exp();
            let mut den = num;
            for n in negatives {
                den += (cos(anchor, n) / tau).exp();
            }
            loss -= (num / den).ln();
        }
        loss
    }

    #[test]
    fn single_positive_no_negatives_is_exactly_zero() {
        let loss = infonce_loss::<f64>(&[1.0, 2.0], &[vec![0.5, -0.25]], &[], 0.05).unwrap();
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn closed_form_one_positive_one_negative() {
        // τ=1, cos(a,p)=1, cos(a,n)=0 → log(1 + e^{-1})
        let loss = infonce_loss::<f64>(
            &[1.0, 0.0],
            &[vec![2.0, 0.0]],
            &[vec![0.0, 3.0]],
            1.0,
        )
        .unwrap();
        approx(loss, (1.0 + (-1.0f64).exp()).ln(), 1e-12);
        approx(loss, 0.31326168751822286, 1e-10);
    }

    #[test]
    fn matches_brute_force_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(99);
        for case in 0..50 {
            let dim = rng.random_range(2..=8);
            let npos = rng.random_range(1..=4);
            let nneg = rng.random_range(0..=6);
            let tau = if case % 2 == 0 { 0.05 } else { 1.0 };
            let vec_of = |rng: &mut rand_chacha::ChaCha8Rng| -> Vec<f64> {
                (0..dim).map(|_| rng.random::<f64>() * 2.0 - 1.0 + 0.01).collect()
            };
            let anchor = vec_of(&mut rng);
            let positives: Vec<Vec<f64>> = (0..npos).map(|_| vec_of(&mut rng)).collect();
            let negatives: Vec<Vec<f64>> = (0..nneg).map(|_| vec_of(&mut rng)).collect();
            let got = infonce_loss::<f64>(&anchor, &positives, &negatives, tau).unwrap();
            let want = infonce_oracle(&anchor, &positives, &negatives, tau);
            assert!((got - want).abs() <= 1e-10 * want.abs().max(1.0), "{got} vs {want}");
            assert!(got >= 0.0);
        }
    }

    #[test]
    fn cosine_makes_the_loss_scale_invariant() {
        let anchor = vec![0.3, -0.7, 0.2];
        let positives = vec![vec![1.0, 0.1, 0.0], vec![-0.2, 0.5, 0.5]];
        let negatives = vec![vec![0.0, 1.0, -1.0]];
        let base = infonce_loss::<f64>(&anchor, &positives, &negatives, 0.05).unwrap();
        let scaled_anchor: Vec<f64> = anchor.iter().map(|x| x * 37.5).collect();
        let scaled_neg: Vec<Vec<f64>> = negatives
            .iter()
            .map(|n| n.iter().map(|x| x * 0.004).collect())
            .collect();
        let scaled = infonce_loss::<f64>(&scaled_anchor, &positives, &scaled_neg, 0.05).unwrap();
        approx(base, scaled, 1e-9);
    }

    #[test]
    fn increasing_positive_similarity_decreases_the_loss() {
        let negatives = vec![vec![0.0, 1.0]];
        let mut last = f64::INFINITY;
        for t in [0.0, 0.3, 0.6, 0.9] {
            let p = vec![1.0, 1.0 - t];
            let loss = infonce_loss::<f64>(&[1.0, 0.0], &[p], &negatives, 0.5).unwrap();
            assert!(loss < last, "loss must strictly decrease, got {loss} after {last}");
            last = loss;
        }
    }

    #[test]
    fn loss_is_nonincreasing_as_temperature_shrinks_when_positive_dominates() {
        let anchor = vec![1.0, 0.0];
        let positives = vec![vec![0.9, 0.1]];
        let negatives = vec![vec![0.1, 0.9], vec![-1.0, 0.3]];
        let mut last = f64::INFINITY;
        for tau in [2.0, 1.0, 0.5, 0.2, 0.1, 0.05] {
            let loss = infonce_loss::<f64>(&anchor, &positives, &negatives, tau).unwrap();
            assert!(loss <= last + 1e-15, "τ={tau}: {loss} > {last}");
            last = loss;
        }
    }

    #[test]
    fn zero_norm_vector_is_an_error() {
        let err = infonce_loss::<f64>(&[0.0, 0.0], &[vec![1.0, 0.0]], &[], 1.0).unwrap_err();
        assert!(err.to_string().contains("zero norm"), "{err}");
        let err = infonce_loss::<f64>(&[1.0, 0.0], &[], &[vec![1.0, 0.0]], 1.0).unwrap_err();
        assert!(err.to_string().contains("positive"), "{err}");
    }

    #[test]
    fn anchor_gradient_matches_finite_differences() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let dim = 8;
        let vec_of = |rng: &mut rand_chacha::ChaCha8Rng| -> Vec<f64> {
            (0..dim).map(|_| rng.random::<f64>() * 2.0 - 1.0 + 0.01).collect()
        };
        let anchor = vec_of(&mut rng);
        let positives: Vec<Vec<f64>> = (0..2).map(|_| vec_of(&mut rng)).collect();
        let negatives: Vec<Vec<f64>> = (0..3).map(|_| vec_of(&mut rng)).collect();
        let tau = 0.05;

        let mut g: Graph<f64> = Graph::new();
        let a = g.param("anchor", &Mat::from_shape_vec((1, dim), anchor.clone()).unwrap());
        let ps: Vec<TensorId> = positives.iter().map(|p| g.input_row(p)).collect();
        let ns: Vec<TensorId> = negatives.iter().map(|n| g.input_row(n)).collect();
        let loss = infonce_loss_node(&mut g, a, &ps, &ns, tau).unwrap();
        g.backward(loss);
        let grad = g.param_grad("anchor").unwrap().clone();

        let h = 1e-6;
        for i in 0..dim {
            let eval = |delta: f64| {
                let mut a2 = anchor.clone();
                a2[i] += delta;
                infonce_loss::<f64>(&a2, &positives, &negatives, tau).unwrap()
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let ad = grad[(0, i)];
            let denom = fd.abs().max(ad.abs()).max(1e-8);
            assert!((fd - ad).abs() / denom < 1e-4, "dim {i}: fd={fd} ad={ad}");
        }
    }

    #[test]
    fn mlm_loss_empty_targets_is_zero() {
        let logits = Mat::<f64>::zeros((5, 7));
        let loss = mlm_loss(&logits, &BTreeMap::new()).unwrap();
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn mlm_loss_uniform_logits_is_ln_v() {
        let logits = Mat::<f64>::from_elem((3, 4), 0.37);
        let targets: BTreeMap<usize, u32> = [(1, 2u32)].into_iter().collect();
        let loss = mlm_loss(&logits, &targets).unwrap();
        approx(loss, 4.0f64.ln(), 1e-12);
        approx(loss, 1.3862943611, 1e-9);
    }

    #[test]
    fn mlm_loss_vanishes_with_growing_margin() {
        let mut last = f64::INFINITY;
        for margin in [1.0, 5.0, 25.0] {
            let mut logits = Mat::<f64>::zeros((1, 6));
            logits[(0, 3)] = margin;
            let targets: BTreeMap<usize, u32> = [(0, 3u32)].into_iter().collect();
            let loss = mlm_loss(&logits, &targets).unwrap();
            assert!(loss < last);
            last = loss;
        }
        assert!(last < 1e-8);
    }

    fn labeled(id: &str, label: &str) -> AnnotatedExample {
        AnnotatedExample {
            id: id.into(),
            tokens: vec!["a".into(), "b".into()],
            head_span: Span::new(0, 1),
            tail_span: Span::new(1, 2),
            relation: Some(label.into()),
            doc_id: None,
            head_span_head: None,
            tail_span_head: None,
        }
    }

    #[test]
    fn supervised_pairs_hand_case() {
        let examples = vec![labeled("0", "r1"), labeled("1", "r1"), labeled("2", "r2")];
        let batch: Vec<String> = ["0", "1", "2"].iter().map(|s| s.to_string()).collect();
        let sets = build_pairs_supervised(&examples, &batch).unwrap();
        assert_eq!(sets.len(), 2); // anchor "2" has no positive
        assert_eq!(sets[0].anchor, "0");
        assert_eq!(sets[0].positives, vec!["1".to_string()]);
        assert_eq!(sets[0].negatives, vec!["2".to_string()]);
        assert_eq!(sets[1].anchor, "1");
    }

    #[test]
    fn supervised_pairs_all_distinct_labels_yield_nothing() {
        let examples = vec![labeled("0", "r1"), labeled("1", "r2"), labeled("2", "r3")];
        let batch: Vec<String> = ["0", "1", "2"].iter().map(|s| s.to_string()).collect();
        assert!(build_pairs_supervised(&examples, &batch).unwrap().is_empty());
    }

    fn mined_pair(a: &str, b: &str, key: &str) -> crate::pairminer::MinedPair {
        let ex = |id: &str| AnnotatedExample {
            id: id.into(),
            tokens: vec![id.into(), "near".into(), "x".into()],
            head_span: Span::new(0, 1),
            tail_span: Span::new(2, 3),
            relation: None,
            doc_id: Some("d".into()),
            head_span_head: None,
            tail_span_head: None,
        };
        crate::pairminer::MinedPair {
            anchor: ex(a),
            positive: ex(b),
            entity_pair_key: key.into(),
        }
    }

    #[test]
    fn single_pair_file_yields_one_pairset_without_negatives() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pairs.jsonl");
        crate::pairminer::write_pairs(&[mined_pair("a", "b", "k1")], &path).unwrap();
        let (_pairs, sets) = load_pairs_selfsupervised(&path).unwrap();
        assert_eq!(sets.len(), 1);
        assert_eq!(sets[0].anchor, "a");
        assert_eq!(sets[0].positives, vec!["b".to_string()]);
        assert!(sets[0].negatives.is_empty());
    }

    #[test]
    fn batch_negatives_come_from_other_entity_pair_groups() {
        // 4 pairs over 3 entity-pair groups
        let mined = vec![
            mined_pair("a1", "a2", "k1"),
            mined_pair("a1", "a3", "k1"),
            mined_pair("b1", "b2", "k2"),
            mined_pair("c1", "c2", "k3"),
        ];
        let pairs = SelfSupervisedPairs::from_mined(&mined).unwrap();
        let batch = pairs.batch_pairsets(&[0, 1, 2, 3]).unwrap();
        assert_eq!(
            batch.members,
            ["a1", "a2", "a3", "b1", "b2", "c1", "c2"].map(String::from).to_vec()
        );
        let k1 = &batch.sets[0];
        assert_eq!(k1.anchor, "a1");
        assert_eq!(k1.positives, ["a2", "a3"].map(String::from).to_vec());
        assert_eq!(
            k1.negatives,
            ["b1", "b2", "c1", "c2"].map(String::from).to_vec()
        );
        let k2 = batch.sets.iter().find(|s| s.anchor == "b1").unwrap();
        assert_eq!(
            k2.negatives,
            ["a1", "a2", "a3", "c1", "c2"].map(String::from).to_vec()
        );
    }

    #[test]
    fn supervised_pairs_all_same_label_have_empty_negatives_and_zero_loss() {
        let examples = vec![labeled("0", "r"), labeled("1", "r"), labeled("2", "r")];
        let batch: Vec<String> = ["0", "1", "2"].iter().map(|s| s.to_string()).collect();
        let sets = build_pairs_supervised(&examples, &batch).unwrap();
        assert_eq!(sets.len(), 3);
        for s in &sets {
            assert!(s.negatives.is_empty());
        }
        // composition with the zero-negative InfoNCE case
        let loss = infonce_loss::<f64>(
            &[1.0, 0.5],
            &[vec![0.2, 0.8], vec![0.5, 0.5]],
            &[],
            0.05,
        )
        .unwrap();
        assert_eq!(loss, 0.0);
    }

    mod combined {
        use super::*;
        use crate::corpus::build_annotated_text;
        use crate::encoder::{
            extract_embedding, EncoderConfig, EncoderContract, ReferenceEncoder, Strategy,
        };
        use crate::graph::InfoNceGroup;
        use crate::tokens::{apply_mlm_masking, tokenize, MaskingKind, MaskingStrategy, Vocabulary};

        struct Setup {
            encoder: ReferenceEncoder<f64>,
            vocab: Vocabulary,
            examples: Vec<AnnotatedExample>,
            inputs: Vec<crate::tokens::EncodedInput>,
        }

        fn setup() -> Setup {
            let mk = |id: &str, h: &str, verb: &str, t: &str, label: &str| AnnotatedExample {
                id: id.into(),
                tokens: vec![h.into(), verb.into(), t.into()],
                head_span: Span::new(0, 1),
                tail_span: Span::new(2, 3),
                relation: Some(label.into()),
                doc_id: None,
                head_span_head: None,
                tail_span_head: None,
            };
            let examples = vec![
                mk("0", "ada", "visited", "rome", "r1"),
                mk("1", "bob", "visited", "oslo", "r1"),
                mk("2", "cat", "founded", "acme", "r2"),
            ];
            let texts: Vec<_> = examples
                .iter()
                .map(|e| build_annotated_text(e).unwrap())
                .collect();
            let vocab = Vocabulary::from_texts(texts.iter());
            let inputs: Vec<_> = texts
                .iter()
                .map(|t| tokenize(t, &vocab, 64).unwrap())
                .collect();
            let cfg = EncoderConfig::new(1, 2, 16, vocab.len(), 64, 3);
            Setup {
                encoder: ReferenceEncoder::new(cfg).unwrap(),
                vocab,
                examples,
                inputs,
            }
        }

        fn groups() -> Vec<InfoNceGroup> {
            vec![
                InfoNceGroup {
                    anchor_row: 0,
                    positive_cols: vec![1],
                    negative_cols: vec![2],
                },
                InfoNceGroup {
                    anchor_row: 1,
                    positive_cols: vec![0],
                    negative_cols: vec![2],
                },
            ]
        }

        fn phi(s: &Setup, strategy: Strategy, i: usize) -> Vec<f64> {
            let hidden = s.encoder.hidden_states(&s.inputs[i].ids, None);
            extract_embedding(&hidden, &s.inputs[i], strategy, None, &s.examples[i].id)
                .unwrap()
                .vector
        }

        #[test]
        fn single_mode_without_mlm_reduces_to_infonce_alone() {
            let s = setup();
            let mut g: Graph<f64> = Graph::new();
            let clean: Vec<&crate::tokens::EncodedInput> = s.inputs.iter().collect();
            let batch = PretrainBatch {
                clean: &clean,
                corrupted: &clean,
                groups: &groups(),
            };
            let cfg = ContrastiveConfig::for_strategy(Strategy::Ht, 0.05);
            let nodes = combined_pretrain_loss(&mut g, &s.encoder, &batch, Strategy::Ht, &cfg).unwrap();
            assert!(nodes.mlm.is_none());
            assert_eq!(nodes.info_terms.len(), 1);
            let total = g.scalar(nodes.total);
            // reference: value-level InfoNCE over extracted [H,T] vectors
            let v: Vec<Vec<f64>> = (0..3).map(|i| phi(&s, Strategy::Ht, i)).collect();
            let want = infonce_loss::<f64>(&v[0], &[v[1].clone()], &[v[2].clone()], 0.05).unwrap()
                + infonce_loss::<f64>(&v[1], &[v[0].clone()], &[v[2].clone()], 0.05).unwrap();
            assert!((total - want).abs() < 1e-10, "{total} vs {want}");
        }

        #[test]
        fn hybrid_mode_sums_per_view_losses_on_one_forward() {
            let s = setup();
            let mut g: Graph<f64> = Graph::new();
            let clean: Vec<&crate::tokens::EncodedInput> = s.inputs.iter().collect();
            let batch = PretrainBatch {
                clean: &clean,
                corrupted: &clean,
                groups: &groups(),
            };
            let cfg = ContrastiveConfig::for_strategy(Strategy::HtPlusMask, 0.05);
            let nodes =
                combined_pretrain_loss(&mut g, &s.encoder, &batch, Strategy::HtPlusMask, &cfg)
                    .unwrap();
            assert_eq!(nodes.info_terms.len(), 2);
            let total = g.scalar(nodes.total);
            let mut want = 0.0;
            for strategy in [Strategy::Ht, Strategy::Mask] {
                let v: Vec<Vec<f64>> = (0..3).map(|i| phi(&s, strategy, i)).collect();
                want += infonce_loss::<f64>(&v[0], &[v[1].clone()], &[v[2].clone()], 0.05).unwrap()
                    + infonce_loss::<f64>(&v[1], &[v[0].clone()], &[v[2].clone()], 0.05).unwrap();
            }
            assert!((total - want).abs() < 1e-10, "{total} vs {want}");
        }

        #[test]
        fn hybrid_mode_rejects_single_view_strategies() {
            let s = setup();
            let mut g: Graph<f64> = Graph::new();
            let clean: Vec<&crate::tokens::EncodedInput> = s.inputs.iter().collect();
            let batch = PretrainBatch {
                clean: &clean,
                corrupted: &clean,
                groups: &groups(),
            };
            let cfg = ContrastiveConfig {
                temperature: 0.05,
                loss_mode: LossMode::Hybrid,
            };
            let err = combined_pretrain_loss(&mut g, &s.encoder, &batch, Strategy::Mask, &cfg)
                .unwrap_err();
            assert!(err.to_string().contains("hybrid"), "{err}");
        }

        #[test]
        fn adding_mlm_targets_changes_total_by_exactly_the_mlm_delta() {
            let s = setup();
            let strat = MaskingStrategy {
                kind: MaskingKind::RandomTokens,
                rate: 0.4,
            };
            let corrupted: Vec<_> = s
                .inputs
                .iter()
                .zip(&s.examples)
                .map(|(inp, ex)| apply_mlm_masking(inp, ex, strat, &s.vocab, 7).unwrap())
                .collect();
            let run = |corrupted_refs: &[&crate::tokens::EncodedInput]| -> (f64, f64) {
                let mut g: Graph<f64> = Graph::new();
                let clean: Vec<&crate::tokens::EncodedInput> = s.inputs.iter().collect();
                let batch = PretrainBatch {
                    clean: &clean,
                    corrupted: corrupted_refs,
                    groups: &groups(),
                };
                let cfg = ContrastiveConfig::for_strategy(Strategy::Ht, 0.05);
                let nodes =
                    combined_pretrain_loss(&mut g, &s.encoder, &batch, Strategy::Ht, &cfg).unwrap();
                let mlm = nodes.mlm.map(|m| g.scalar(m)).unwrap_or(0.0);
                (g.scalar(nodes.total), mlm)
            };
            let without: Vec<&crate::tokens::EncodedInput> = s.inputs.iter().collect();
            let with: Vec<&crate::tokens::EncodedInput> = corrupted.iter().collect();
            let (total_a, mlm_a) = run(&without);
            let (total_b, mlm_b) = run(&with);
            assert_eq!(mlm_a, 0.0);
            assert!(mlm_b > 0.0);
            assert!(
                ((total_b - total_a) - (mlm_b - mlm_a)).abs() < 1e-12,
                "unit weighting: {} vs {}",
                total_b - total_a,
                mlm_b - mlm_a
            );
        }
    }
}
