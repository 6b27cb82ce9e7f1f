//! Pre-training and fine-tuning loops, optimization configuration,
//! checkpointing, and checkpoint selection.
//!
//! Pre-training runs the combined InfoNCE + MLM objective and keeps the
//! minimum-validation-loss epoch; fine-tuning trains the classifier (and the
//! relation encoder, provider frozen) with cross-entropy and keeps the epoch
//! with the best validation score. All randomness flows from the config seed.

mod checkpoint;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{build_annotated_text, AnnotatedExample, LabelInventory};
use crate::encoder::{
    extract_embedding, extract_embedding_node, provider_embedding, EncoderConfig, EncoderContract,
    EntityEmbeddingProvider, ProviderEmbedding, ReferenceEncoder, Strategy,
};
use crate::error::{Error, Result};
use crate::graph::{Graph, InfoNceGroup, TensorId};
use crate::metrics;
use crate::objectives::{
    build_pairs_supervised, combined_pretrain_loss, infonce_batch_node, mlm_loss_node,
    ContrastiveConfig, PairSet, PretrainBatch, SelfSupervisedPairs,
};
use crate::optim::{AdamW, ParamStore};
use crate::scalar::Scalar;
use crate::tokens::{apply_mlm_masking, tokenize, EncodedInput, MaskingStrategy, Vocabulary};

/// Checkpoint-selection metric for fine-tuning.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SelectionMetric {
    MicroF1,
    /// Mean of P@10 and P@30, for ranking-evaluated corpora.
    MeanPrecisionAtK,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub max_len: usize,
    pub temperature: f64,
    /// Classifier hidden width; defaults to the encoder dim.
    pub hidden_dim: Option<usize>,
    pub selection: SelectionMetric,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 25,
            lr: 5e-4,
            weight_decay: 1e-5,
            batch_size: 32,
            seed: 0,
            max_len: 64,
            temperature: 0.05,
            hidden_dim: None,
            selection: SelectionMetric::MicroF1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.lr <= 0.0 {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        if self.temperature <= 0.0 {
            return Err(Error::Config("temperature must be positive".into()));
        }
        Ok(())
    }
}

/// splitmix64-based seed derivation: decorrelates the per-example masking
/// streams from the shuffling stream.
pub(crate) fn derive_seed(base: u64, salt1: u64, salt2: u64) -> u64 {
    let mut x = base
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(salt1)
        .rotate_left(23)
        .wrapping_add(salt2);
    x ^= x >> 30;
    x = x.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x ^= x >> 27;
    x = x.wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

const VALIDATION_MASK_SALT: u64 = 0xDEAD_BEEF_0BAD_F00D;
const CLASSIFIER_SEED_SALT: u64 = 0xC1A5_51F1;

/// Pre-training data: labeled examples (supervised pairs) or mined pairs.
pub enum PretrainData<'a> {
    Supervised(&'a [AnnotatedExample]),
    SelfSupervised(&'a SelfSupervisedPairs),
}

struct Prepared {
    examples: Vec<AnnotatedExample>,
    inputs: Vec<EncodedInput>,
    /// (anchor index, positive index, entity-pair key); empty for supervised.
    pairs: Vec<(usize, usize, String)>,
    supervised: bool,
}

impl Prepared {
    fn unit_count(&self) -> usize {
        if self.supervised {
            self.examples.len()
        } else {
            self.pairs.len()
        }
    }
}

fn prepare(data: &PretrainData<'_>, vocab: &Vocabulary, max_len: usize) -> Result<Prepared> {
    let (examples, pairs, supervised) = match data {
        PretrainData::Supervised(examples) => (examples.to_vec(), Vec::new(), true),
        PretrainData::SelfSupervised(p) => {
            let mut index_of = std::collections::HashMap::new();
            for (i, ex) in p.examples.iter().enumerate() {
                index_of.insert(ex.id.clone(), i);
            }
            let pairs = p
                .pairs
                .iter()
                .map(|(a, b, key)| {
                    let ai = *index_of
                        .get(a)
                        .ok_or_else(|| Error::Pairs(format!("dangling example id {a:?}")))?;
                    let bi = *index_of
                        .get(b)
                        .ok_or_else(|| Error::Pairs(format!("dangling example id {b:?}")))?;
                    Ok((ai, bi, key.clone()))
                })
                .collect::<Result<Vec<_>>>()?;
            (p.examples.clone(), pairs, false)
        }
    };
    let mut seen = std::collections::HashSet::new();
    for ex in &examples {
        if !seen.insert(ex.id.clone()) {
            return Err(Error::MalformedRecord {
                id: ex.id.clone(),
                reason: "duplicate example id".into(),
            });
        }
    }
    let inputs = examples
        .iter()
        .map(|ex| tokenize(&build_annotated_text(ex)?, vocab, max_len))
        .collect::<Result<Vec<_>>>()?;
    Ok(Prepared {
        examples,
        inputs,
        pairs,
        supervised,
    })
}

/// Batch = member example indices + contrastive groups over their rows.
fn batch_members_and_groups(prepared: &Prepared, unit_batch: &[usize]) -> Result<(Vec<usize>, Vec<InfoNceGroup>)> {
    if prepared.supervised {
        let members: Vec<usize> = unit_batch.to_vec();
        let ids: Vec<String> = members.iter().map(|&i| prepared.examples[i].id.clone()).collect();
        let sets = build_pairs_supervised(&prepared.examples, &ids)?;
        let groups = pairsets_to_groups(&sets, &ids);
        Ok((members, groups))
    } else {
        // first-appearance member order over the batch pairs
        let mut members: Vec<usize> = Vec::new();
        for &pi in unit_batch {
            let (a, b, _) = &prepared.pairs[pi];
            for &i in [a, b] {
                if !members.contains(&i) {
                    members.push(i);
                }
            }
        }
        let key_of = |i: usize| -> &str {
            prepared
                .pairs
                .iter()
                .find(|(a, b, _)| *a == i || *b == i)
                .map(|(_, _, k)| k.as_str())
                .expect("member comes from some pair")
        };
        let row_of = |i: usize| members.iter().position(|&m| m == i).expect("member row");
        // merge positives per anchor
        let mut groups: Vec<InfoNceGroup> = Vec::new();
        let mut anchor_rows: Vec<usize> = Vec::new();
        for &pi in unit_batch {
            let (a, b, _) = &prepared.pairs[pi];
            let arow = row_of(*a);
            let brow = row_of(*b);
            match anchor_rows.iter().position(|&r| r == arow) {
                Some(gi) => {
                    if !groups[gi].positive_cols.contains(&brow) {
                        groups[gi].positive_cols.push(brow);
                    }
                }
                None => {
                    anchor_rows.push(arow);
                    let akey = key_of(*a);
                    let negative_cols: Vec<usize> = members
                        .iter()
                        .enumerate()
                        .filter(|(_, &m)| key_of(m) != akey)
                        .map(|(r, _)| r)
                        .collect();
                    groups.push(InfoNceGroup {
                        anchor_row: arow,
                        positive_cols: vec![brow],
                        negative_cols,
                    });
                }
            }
        }
        Ok((members, groups))
    }
}

fn pairsets_to_groups(sets: &[PairSet], batch_ids: &[String]) -> Vec<InfoNceGroup> {
    let row_of = |id: &str| {
        batch_ids
            .iter()
            .position(|b| b == id)
            .expect("pair sets are built over the batch")
    };
    sets.iter()
        .map(|s| InfoNceGroup {
            anchor_row: row_of(&s.anchor),
            positive_cols: s.positives.iter().map(|p| row_of(p)).collect(),
            negative_cols: s.negatives.iter().map(|n| row_of(n)).collect(),
        })
        .collect()
}

/// Per-epoch pre-training statistics; epoch 0 is the untrained baseline and
/// has no training loss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_total: Option<f64>,
    pub val_total: f64,
    pub val_info: f64,
    pub val_mlm: f64,
}

#[derive(Debug)]
pub struct PretrainOutcome<F: Scalar> {
    pub checkpoint: Checkpoint<F>,
    pub log: Vec<EpochStats>,
}

enum PretrainObjective {
    Strategy(Strategy),
    /// Entity-typing proxy for the frozen provider: InfoNCE over [E1] states
    /// grouped by head surface form plus the same over [E2]/tail, plus MLM.
    EntityProvider,
}

impl PretrainObjective {
    fn tag(&self) -> String {
        match self {
            PretrainObjective::Strategy(s) => s.to_string(),
            PretrainObjective::EntityProvider => "entity-provider".to_string(),
        }
    }
}

/// Pre-train a fresh reference encoder; returns the minimum-validation-loss
/// checkpoint. EnCore strategies skip pre-training and are rejected here.
pub fn pretrain<F: Scalar>(
    train: PretrainData<'_>,
    valid: PretrainData<'_>,
    strategy: Strategy,
    enc_cfg: &EncoderConfig,
    cfg: &TrainConfig,
    masking: MaskingStrategy,
    vocab: &Vocabulary,
) -> Result<PretrainOutcome<F>> {
    if !strategy.pretrainable() {
        return Err(Error::Strategy(format!(
            "strategy {strategy} uses the frozen provider and skips pre-training"
        )));
    }
    run_pretrain(
        train,
        valid,
        PretrainObjective::Strategy(strategy),
        enc_cfg,
        cfg,
        masking,
        vocab,
    )
}

/// Train the reference entity-embedding provider on its typing proxy task.
/// The result is an ordinary encoder checkpoint tagged "entity-provider";
/// wrap it in a [`crate::encoder::FrozenEncoderProvider`] for fine-tuning.
pub fn train_entity_provider<F: Scalar>(
    train: &[AnnotatedExample],
    valid: &[AnnotatedExample],
    enc_cfg: &EncoderConfig,
    cfg: &TrainConfig,
    masking: MaskingStrategy,
    vocab: &Vocabulary,
) -> Result<PretrainOutcome<F>> {
    run_pretrain(
        PretrainData::Supervised(train),
        PretrainData::Supervised(valid),
        PretrainObjective::EntityProvider,
        enc_cfg,
        cfg,
        masking,
        vocab,
    )
}

fn run_pretrain<F: Scalar>(
    train: PretrainData<'_>,
    valid: PretrainData<'_>,
    objective: PretrainObjective,
    enc_cfg: &EncoderConfig,
    cfg: &TrainConfig,
    masking: MaskingStrategy,
    vocab: &Vocabulary,
) -> Result<PretrainOutcome<F>> {
    cfg.validate()?;
    masking.validate()?;
    if enc_cfg.vocab_size != vocab.len() {
        return Err(Error::Config(format!(
            "encoder vocab_size {} does not match vocabulary size {}",
            enc_cfg.vocab_size,
            vocab.len()
        )));
    }
    let train = prepare(&train, vocab, cfg.max_len)?;
    let valid = prepare(&valid, vocab, cfg.max_len)?;
    if train.examples.is_empty() {
        return Err(Error::Train("empty training set".into()));
    }

    let mut encoder: ReferenceEncoder<F> = ReferenceEncoder::new(enc_cfg.clone())?;
    let mut opt: AdamW<F> = AdamW::new(cfg.lr, cfg.weight_decay);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 0, 0));

    let mut log = Vec::new();
    let (v0_total, v0_info, v0_mlm) = eval_pretrain_loss(&encoder, &valid, &objective, cfg, masking, vocab)?;
    log.push(EpochStats {
        epoch: 0,
        train_total: None,
        val_total: v0_total,
        val_info: v0_info,
        val_mlm: v0_mlm,
    });

    let mut best: Option<(usize, f64, ParamStore<F>)> = None;
    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..train.unit_count()).collect();
        order.shuffle(&mut shuffle_rng);
        let mut epoch_total = 0.0;
        let mut batches = 0usize;
        for unit_batch in order.chunks(cfg.batch_size) {
            let Some(total) = pretrain_step(
                &mut encoder,
                &mut opt,
                &train,
                unit_batch,
                &objective,
                cfg,
                masking,
                vocab,
                epoch as u64,
            )?
            else {
                continue;
            };
            epoch_total += total;
            batches += 1;
        }
        let train_total = if batches > 0 { Some(epoch_total) } else { None };
        let (val_total, val_info, val_mlm) =
            eval_pretrain_loss(&encoder, &valid, &objective, cfg, masking, vocab)?;
        log.push(EpochStats {
            epoch,
            train_total,
            val_total,
            val_info,
            val_mlm,
        });
        let better = match &best {
            None => true,
            Some((_, best_val, _)) => val_total < *best_val,
        };
        if better {
            best = Some((epoch, val_total, encoder.params().clone()));
        }
    }

    let (epoch, validation_score, params) = best.expect("epochs >= 1");
    let encoder = ReferenceEncoder::from_parts(enc_cfg.clone(), params)?;
    let meta = CheckpointMeta {
        format_version: checkpoint::FORMAT_VERSION,
        strategy: objective.tag(),
        scalar: F::NAME.to_string(),
        epoch,
        validation_score,
        encoder: enc_cfg.clone(),
        train: cfg.clone(),
        masking: Some(masking),
        classifier: None,
        labels: None,
    };
    Ok(PretrainOutcome {
        checkpoint: Checkpoint {
            meta,
            vocab: vocab.clone(),
            encoder,
            classifier: None,
        },
        log,
    })
}

/// One optimization step; None when the batch contributes no loss terms.
#[allow(clippy::too_many_arguments)]
fn pretrain_step<F: Scalar>(
    encoder: &mut ReferenceEncoder<F>,
    opt: &mut AdamW<F>,
    data: &Prepared,
    unit_batch: &[usize],
    objective: &PretrainObjective,
    cfg: &TrainConfig,
    masking: MaskingStrategy,
    vocab: &Vocabulary,
    epoch: u64,
) -> Result<Option<f64>> {
    let mut g: Graph<F> = Graph::new();
    let total = batch_loss(
        &mut g,
        encoder,
        data,
        unit_batch,
        objective,
        cfg,
        masking,
        vocab,
        epoch,
    )?;
    let Some(total) = total else {
        return Ok(None);
    };
    let value = g.scalar(total).as_f64();
    g.backward(total);
    opt.step(&mut [encoder.params_mut()], g.param_grads());
    Ok(Some(value))
}

/// Validation loss: fixed batch order, masking seeds independent of epoch.
fn eval_pretrain_loss<F: Scalar>(
    encoder: &ReferenceEncoder<F>,
    data: &Prepared,
    objective: &PretrainObjective,
    cfg: &TrainConfig,
    masking: MaskingStrategy,
    vocab: &Vocabulary,
) -> Result<(f64, f64, f64)> {
    let order: Vec<usize> = (0..data.unit_count()).collect();
    let (mut total, mut info, mut mlm) = (0.0, 0.0, 0.0);
    for unit_batch in order.chunks(cfg.batch_size) {
        let mut g: Graph<F> = Graph::new();
        let parts = batch_loss_parts(
            &mut g,
            encoder,
            data,
            unit_batch,
            objective,
            cfg,
            masking,
            vocab,
            VALIDATION_MASK_SALT,
        )?;
        if let Some(nodes) = parts {
            total += g.scalar(nodes.total).as_f64();
            for t in &nodes.info_terms {
                info += g.scalar(*t).as_f64();
            }
            if let Some(m) = nodes.mlm {
                mlm += g.scalar(m).as_f64();
            }
        }
    }
    Ok((total, info, mlm))
}

#[allow(clippy::too_many_arguments)]
fn batch_loss<F: Scalar>(
    g: &mut Graph<F>,
    encoder: &ReferenceEncoder<F>,
    data: &Prepared,
    unit_batch: &[usize],
    objective: &PretrainObjective,
    cfg: &TrainConfig,
    masking: MaskingStrategy,
    vocab: &Vocabulary,
    epoch_salt: u64,
) -> Result<Option<TensorId>> {
    Ok(batch_loss_parts(
        g, encoder, data, unit_batch, objective, cfg, masking, vocab, epoch_salt,
    )?
    .map(|n| n.total))
}

#[allow(clippy::too_many_arguments)]
fn batch_loss_parts<F: Scalar>(
    g: &mut Graph<F>,
    encoder: &ReferenceEncoder<F>,
    data: &Prepared,
    unit_batch: &[usize],
    objective: &PretrainObjective,
    cfg: &TrainConfig,
    masking: MaskingStrategy,
    vocab: &Vocabulary,
    epoch_salt: u64,
) -> Result<Option<crate::objectives::LossNodes>> {
    let (members, groups) = batch_members_and_groups(data, unit_batch)?;
    let corrupted: Vec<EncodedInput> = members
        .iter()
        .map(|&i| {
            apply_mlm_masking(
                &data.inputs[i],
                &data.examples[i],
                masking,
                vocab,
                derive_seed(cfg.seed, epoch_salt, i as u64),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let has_mlm = corrupted.iter().any(|c| !c.mlm_targets.is_empty());

    match objective {
        PretrainObjective::Strategy(strategy) => {
            if groups.is_empty() && !has_mlm {
                return Ok(None);
            }
            let clean: Vec<&EncodedInput> = members.iter().map(|&i| &data.inputs[i]).collect();
            let corrupted_refs: Vec<&EncodedInput> = corrupted.iter().collect();
            let batch = PretrainBatch {
                clean: &clean,
                corrupted: &corrupted_refs,
                groups: &groups,
            };
            let ccfg = ContrastiveConfig::for_strategy(*strategy, cfg.temperature);
            combined_pretrain_loss(g, encoder, &batch, *strategy, &ccfg).map(Some)
        }
        PretrainObjective::EntityProvider => {
            let head_groups = surface_groups(data, &members, |ex| ex.head_words().join(" ").to_lowercase());
            let tail_groups = surface_groups(data, &members, |ex| ex.tail_words().join(" ").to_lowercase());
            if head_groups.is_empty() && tail_groups.is_empty() && !has_mlm {
                return Ok(None);
            }
            let mut hidden_nodes = Vec::with_capacity(members.len());
            for &i in &members {
                hidden_nodes.push(encoder.forward(g, &data.inputs[i].ids, None));
            }
            let mut info_terms = Vec::new();
            let mut total: Option<TensorId> = None;
            let views: [(&Vec<InfoNceGroup>, fn(&EncodedInput) -> usize); 2] = [
                (&head_groups, |inp| inp.e1_pos),
                (&tail_groups, |inp| inp.e2_pos),
            ];
            for (groups, anchor_of) in views {
                if groups.is_empty() {
                    continue;
                }
                let rows: Vec<TensorId> = members
                    .iter()
                    .zip(&hidden_nodes)
                    .map(|(&i, &h)| g.gather_rows(h, vec![anchor_of(&data.inputs[i])]))
                    .collect();
                let term = infonce_batch_node(g, &rows, groups, cfg.temperature)?;
                info_terms.push(term);
                total = Some(match total {
                    None => term,
                    Some(t) => g.add(t, term),
                });
            }
            let mut mlm_node = None;
            if has_mlm {
                let mut blocks = Vec::new();
                let mut targets = Vec::new();
                for c in &corrupted {
                    if c.mlm_targets.is_empty() {
                        continue;
                    }
                    let h = encoder.forward(g, &c.ids, None);
                    let positions: Vec<usize> = c.mlm_targets.keys().copied().collect();
                    blocks.push(encoder.mlm_logits(g, h, &positions));
                    targets.extend(c.mlm_targets.values().copied());
                }
                let stacked = g.concat_rows(&blocks);
                let node = mlm_loss_node(g, stacked, &targets)?;
                total = Some(match total {
                    None => node,
                    Some(t) => g.add(t, node),
                });
                mlm_node = Some(node);
            }
            Ok(total.map(|t| crate::objectives::LossNodes {
                total: t,
                info_terms,
                mlm: mlm_node,
            }))
        }
    }
}

/// In-batch groups keyed by a surface form; anchors without a same-key
/// partner are skipped, negatives are the other-key members.
fn surface_groups(
    data: &Prepared,
    members: &[usize],
    key: impl Fn(&AnnotatedExample) -> String,
) -> Vec<InfoNceGroup> {
    let keys: Vec<String> = members.iter().map(|&i| key(&data.examples[i])).collect();
    let mut groups = Vec::new();
    for (row, anchor_key) in keys.iter().enumerate() {
        let positive_cols: Vec<usize> = keys
            .iter()
            .enumerate()
            .filter(|(r, k)| *r != row && *k == anchor_key)
            .map(|(r, _)| r)
            .collect();
        if positive_cols.is_empty() {
            continue;
        }
        let negative_cols: Vec<usize> = keys
            .iter()
            .enumerate()
            .filter(|(_, k)| *k != anchor_key)
            .map(|(r, _)| r)
            .collect();
        groups.push(InfoNceGroup {
            anchor_row: row,
            positive_cols,
            negative_cols,
        });
    }
    groups
}

/// Starting point for fine-tuning: a pre-trained checkpoint or a fresh
/// encoder (the paper's "no pre-training" arm).
pub enum FinetuneFrom<F: Scalar> {
    Checkpoint(Box<Checkpoint<F>>),
    Fresh {
        encoder: EncoderConfig,
        vocab: Vocabulary,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneEpochStats {
    pub epoch: usize,
    pub train_loss: Option<f64>,
    pub val_score: f64,
}

#[derive(Debug)]
pub struct FinetuneOutcome<F: Scalar> {
    pub checkpoint: Checkpoint<F>,
    pub log: Vec<FinetuneEpochStats>,
}

struct EncodedForClassify<F: Scalar> {
    id: String,
    input: EncodedInput,
    gold: usize,
    provider: Option<ProviderEmbedding<F>>,
}

fn encode_for_classify<F: Scalar>(
    examples: &[AnnotatedExample],
    vocab: &Vocabulary,
    max_len: usize,
    inventory: &LabelInventory,
    strategy: Strategy,
    provider: Option<&dyn EntityEmbeddingProvider<F>>,
) -> Result<Vec<EncodedForClassify<F>>> {
    let mut out = Vec::with_capacity(examples.len());
    for ex in examples {
        let label = ex.relation.as_deref().ok_or_else(|| Error::MalformedRecord {
            id: ex.id.clone(),
            reason: "missing relation label".into(),
        })?;
        let gold = inventory
            .index_of(label)
            .ok_or_else(|| Error::Train(format!("label {label:?} absent from the training inventory")))?;
        let input = tokenize(&build_annotated_text(ex)?, vocab, max_len)?;
        let provider_emb = if strategy.uses_provider() {
            let p = provider.ok_or_else(|| {
                Error::Strategy(format!("strategy {strategy} requires an entity-embedding provider"))
            })?;
            Some(provider_embedding(p, &input)?)
        } else {
            None
        };
        out.push(EncodedForClassify {
            id: ex.id.clone(),
            input,
            gold,
            provider: provider_emb,
        });
    }
    Ok(out)
}

/// Fine-tune classifier + relation encoder (provider frozen) with
/// cross-entropy; selects the best-validation-score epoch, ties toward the
/// earlier epoch.
pub fn finetune<F: Scalar>(
    from: FinetuneFrom<F>,
    train: &[AnnotatedExample],
    valid: &[AnnotatedExample],
    strategy: Strategy,
    cfg: &TrainConfig,
    provider: Option<&dyn EntityEmbeddingProvider<F>>,
) -> Result<FinetuneOutcome<F>> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Train("empty training set".into()));
    }
    let inventory = LabelInventory::from_examples(train);
    if inventory.is_empty() {
        return Err(Error::Train("training set carries no labels".into()));
    }
    let (mut encoder, vocab) = match from {
        FinetuneFrom::Checkpoint(ck) => (ck.encoder, ck.vocab),
        FinetuneFrom::Fresh { encoder, vocab } => (ReferenceEncoder::new(encoder)?, vocab),
    };
    let d_e = if strategy.uses_provider() {
        Some(
            provider
                .ok_or_else(|| {
                    Error::Strategy(format!("strategy {strategy} requires an entity-embedding provider"))
                })?
                .dim(),
        )
    } else {
        None
    };
    let width = strategy.width(encoder.dim(), d_e)?;
    let clf_cfg = crate::classifier::ClassifierConfig {
        input_dim: width,
        hidden_dim: cfg.hidden_dim.unwrap_or_else(|| encoder.dim()),
        num_labels: inventory.len(),
        seed: derive_seed(cfg.seed, CLASSIFIER_SEED_SALT, 0),
    };
    let mut classifier = crate::classifier::ClassifierHead::<F>::new(clf_cfg.clone())?;

    let train_enc = encode_for_classify(train, &vocab, cfg.max_len, &inventory, strategy, provider)?;
    let valid_enc = encode_for_classify(valid, &vocab, cfg.max_len, &inventory, strategy, provider)?;

    let mut opt: AdamW<F> = AdamW::new(cfg.lr, cfg.weight_decay);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 1, 0));

    let mut log = Vec::new();
    let v0 = validation_score(&encoder, &classifier, &valid_enc, strategy, &inventory, cfg)?;
    log.push(FinetuneEpochStats {
        epoch: 0,
        train_loss: None,
        val_score: v0,
    });

    let mut best: Option<(usize, f64, ParamStore<F>, ParamStore<F>)> = None;
    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..train_enc.len()).collect();
        order.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            let mut g: Graph<F> = Graph::new();
            let mut phi_rows = Vec::with_capacity(batch.len());
            let mut golds = Vec::with_capacity(batch.len());
            for &i in batch {
                let item = &train_enc[i];
                let hidden = if strategy.uses_encoder() {
                    Some(encoder.forward(&mut g, &item.input.ids, None))
                } else {
                    None
                };
                phi_rows.push(extract_embedding_node(
                    &mut g,
                    hidden,
                    &item.input,
                    strategy,
                    item.provider.as_ref(),
                )?);
                golds.push(item.gold);
            }
            let phi = g.concat_rows(&phi_rows);
            let logits = classifier.logits_node(&mut g, phi)?;
            let loss = g.cross_entropy_mean(logits, golds);
            epoch_loss += g.scalar(loss).as_f64();
            batches += 1;
            g.backward(loss);
            opt.step(
                &mut [encoder.params_mut(), classifier.params_mut()],
                g.param_grads(),
            );
        }
        let val = validation_score(&encoder, &classifier, &valid_enc, strategy, &inventory, cfg)?;
        log.push(FinetuneEpochStats {
            epoch,
            train_loss: if batches > 0 { Some(epoch_loss) } else { None },
            val_score: val,
        });
        let better = match &best {
            None => true,
            Some((_, best_val, _, _)) => val > *best_val,
        };
        if better {
            best = Some((epoch, val, encoder.params().clone(), classifier.params().clone()));
        }
    }

    let (epoch, validation_score, enc_params, clf_params) = best.expect("epochs >= 1");
    let enc_cfg = encoder.config().clone();
    let encoder = ReferenceEncoder::from_parts(enc_cfg.clone(), enc_params)?;
    let classifier = crate::classifier::ClassifierHead::from_parts(clf_cfg.clone(), clf_params)?;
    let meta = CheckpointMeta {
        format_version: checkpoint::FORMAT_VERSION,
        strategy: strategy.to_string(),
        scalar: F::NAME.to_string(),
        epoch,
        validation_score,
        encoder: enc_cfg,
        train: cfg.clone(),
        masking: None,
        classifier: Some(clf_cfg),
        labels: Some(inventory.labels().to_vec()),
    };
    Ok(FinetuneOutcome {
        checkpoint: Checkpoint {
            meta,
            vocab,
            encoder,
            classifier: Some(classifier),
        },
        log,
    })
}

fn validation_score<F: Scalar>(
    encoder: &ReferenceEncoder<F>,
    classifier: &crate::classifier::ClassifierHead<F>,
    valid: &[EncodedForClassify<F>],
    strategy: Strategy,
    inventory: &LabelInventory,
    cfg: &TrainConfig,
) -> Result<f64> {
    if valid.is_empty() {
        return Ok(0.0);
    }
    let mut golds = Vec::with_capacity(valid.len());
    let mut preds = Vec::with_capacity(valid.len());
    let mut scores: Vec<Vec<f64>> = Vec::with_capacity(valid.len());
    for item in valid {
        let probs = classify_one(encoder, classifier, strategy, item)?;
        let idx = crate::classifier::predict_index(&probs);
        golds.push(inventory.label(item.gold).expect("gold in inventory").to_string());
        preds.push(inventory.label(idx).expect("argmax in inventory").to_string());
        scores.push(probs.iter().map(|p| p.as_f64()).collect());
    }
    match cfg.selection {
        SelectionMetric::MicroF1 => Ok(metrics::micro_f1(&golds, &preds)?.2),
        SelectionMetric::MeanPrecisionAtK => {
            let p10 = metrics::precision_at_k(&scores, &golds, 10, inventory)?;
            let p30 = metrics::precision_at_k(&scores, &golds, 30, inventory)?;
            Ok(0.5 * (p10 + p30))
        }
    }
}

fn classify_one<F: Scalar>(
    encoder: &ReferenceEncoder<F>,
    classifier: &crate::classifier::ClassifierHead<F>,
    strategy: Strategy,
    item: &EncodedForClassify<F>,
) -> Result<Vec<F>> {
    let emb = if strategy.uses_encoder() {
        let hidden = encoder.hidden_states(&item.input.ids, None);
        extract_embedding(&hidden, &item.input, strategy, item.provider.as_ref(), &item.id)?
    } else {
        extract_embedding(
            &crate::graph::Mat::<F>::zeros((item.input.len(), encoder.dim())),
            &item.input,
            strategy,
            item.provider.as_ref(),
            &item.id,
        )?
    };
    classifier.classify(&emb.vector)
}

/// One evaluated example: per-label probabilities in inventory order.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub id: String,
    pub probs: Vec<f64>,
    pub predicted_index: usize,
}

/// Run a fine-tuned checkpoint over examples. The checkpoint must carry a
/// classifier; EnCore strategies additionally need the provider.
pub fn predict_with_checkpoint<F: Scalar>(
    ck: &Checkpoint<F>,
    examples: &[AnnotatedExample],
    provider: Option<&dyn EntityEmbeddingProvider<F>>,
) -> Result<Vec<Prediction>> {
    let classifier = ck
        .classifier
        .as_ref()
        .ok_or_else(|| Error::Checkpoint("checkpoint carries no classifier".into()))?;
    let strategy: Strategy = ck.meta.strategy.parse()?;
    let mut out = Vec::with_capacity(examples.len());
    for ex in examples {
        let input = tokenize(&build_annotated_text(ex)?, &ck.vocab, ck.meta.train.max_len)?;
        let provider_emb = if strategy.uses_provider() {
            let p = provider.ok_or_else(|| {
                Error::Strategy(format!("strategy {strategy} requires an entity-embedding provider"))
            })?;
            Some(provider_embedding(p, &input)?)
        } else {
            None
        };
        let item = EncodedForClassify {
            id: ex.id.clone(),
            input,
            gold: 0,
            provider: provider_emb,
        };
        let probs = classify_one(&ck.encoder, classifier, strategy, &item)?;
        let probs: Vec<f64> = probs.iter().map(|p| p.as_f64()).collect();
        let predicted_index = {
            let mut best = 0;
            for (i, &p) in probs.iter().enumerate() {
                if p > probs[best] {
                    best = i;
                }
            }
            best
        };
        out.push(Prediction {
            id: ex.id.clone(),
            probs,
            predicted_index,
        });
    }
    Ok(out)
}

/// Relation embedding for one example under a checkpoint, inference mode.
pub fn embed_with_checkpoint<F: Scalar>(
    ck: &Checkpoint<F>,
    ex: &AnnotatedExample,
    provider: Option<&dyn EntityEmbeddingProvider<F>>,
) -> Result<crate::encoder::RelationEmbedding<F>> {
    let strategy: Strategy = ck.meta.strategy.parse()?;
    let input = tokenize(&build_annotated_text(ex)?, &ck.vocab, ck.meta.train.max_len)?;
    let provider_emb = if strategy.uses_provider() {
        let p = provider.ok_or_else(|| {
            Error::Strategy(format!("strategy {strategy} requires an entity-embedding provider"))
        })?;
        Some(provider_embedding(p, &input)?)
    } else {
        None
    };
    let hidden = ck.encoder.hidden_states(&input.ids, None);
    extract_embedding(&hidden, &input, strategy, provider_emb.as_ref(), &ex.id)
}
