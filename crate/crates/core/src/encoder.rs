//! Encoder contract, the reference desk-scale transformer, strategy-tagged
//! embedding extraction, and the frozen entity-embedding provider.
//!
//! The reference encoder is a small bidirectional self-attention stack with
//! learned position embeddings and a tied-weight MLM output head. It stands
//! behind [`EncoderContract`]; any encoder exposing final-layer states and an
//! MLM head can be dropped in.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Mat, TensorId};
use crate::optim::ParamStore;
use crate::scalar::Scalar;
use crate::tokens::EncodedInput;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub layers: usize,
    pub heads: usize,
    pub dim: usize,
    /// Feedforward width; defaults to 4*dim.
    pub ff_dim: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    pub seed: u64,
}

impl EncoderConfig {
    pub fn new(layers: usize, heads: usize, dim: usize, vocab_size: usize, max_len: usize, seed: u64) -> Self {
        EncoderConfig {
            layers,
            heads,
            dim,
            ff_dim: 4 * dim,
            vocab_size,
            max_len,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.heads == 0 || self.dim == 0 || self.ff_dim == 0 {
            return Err(Error::Config("encoder dimensions must be positive".into()));
        }
        if self.dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "dim {} not divisible by heads {}",
                self.dim, self.heads
            )));
        }
        if self.vocab_size < crate::tokens::SPECIAL_TOKENS.len() {
            return Err(Error::Config("vocab_size smaller than the special-token set".into()));
        }
        if self.max_len < 4 {
            return Err(Error::Config("max_len too small".into()));
        }
        Ok(())
    }
}

/// Anything that produces per-position final-layer states and MLM logits.
pub trait EncoderContract<F: Scalar> {
    fn dim(&self) -> usize;
    fn vocab_size(&self) -> usize;
    fn max_len(&self) -> usize;

    /// Final-layer states for `ids`: a [L, dim] node. `valid` marks real
    /// (non-pad) positions; `None` means all positions are real.
    fn forward(&self, g: &mut Graph<F>, ids: &[u32], valid: Option<&[bool]>) -> TensorId;

    /// MLM logits rows for the given positions of `hidden`: [len(positions), V].
    fn mlm_logits(&self, g: &mut Graph<F>, hidden: TensorId, positions: &[usize]) -> TensorId;

    fn params(&self) -> &ParamStore<F>;
    fn params_mut(&mut self) -> &mut ParamStore<F>;

    /// Inference convenience: forward on a throwaway graph, values only.
    fn hidden_states(&self, ids: &[u32], valid: Option<&[bool]>) -> Mat<F> {
        let mut g = Graph::new();
        let h = self.forward(&mut g, ids, valid);
        g.value(h).clone()
    }
}

/// Desk-scale bidirectional transformer with a tied MLM head.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceEncoder<F: Scalar> {
    cfg: EncoderConfig,
    params: ParamStore<F>,
}

impl<F: Scalar> ReferenceEncoder<F> {
    /// Seed-deterministic construction: same config, same bits.
    pub fn new(cfg: EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let std = 0.02;
        let mut params = ParamStore::new();
        let normal = |rows: usize, cols: usize, rng: &mut ChaCha8Rng| -> Mat<F> {
            Mat::from_shape_fn((rows, cols), |_| {
                F::standard_normal(rng) * F::from_f64(std)
            })
        };
        params.insert("tok_emb", normal(cfg.vocab_size, cfg.dim, &mut rng));
        params.insert("pos_emb", normal(cfg.max_len, cfg.dim, &mut rng));
        for l in 0..cfg.layers {
            let p = |name: &str| format!("l{l}.{name}");
            params.insert(&p("ln1.g"), Mat::from_elem((1, cfg.dim), F::one()));
            params.insert(&p("ln1.b"), Mat::zeros((1, cfg.dim)));
            for w in ["attn.wq", "attn.wk", "attn.wv", "attn.wo"] {
                params.insert(&p(w), normal(cfg.dim, cfg.dim, &mut rng));
            }
            for b in ["attn.bq", "attn.bk", "attn.bv", "attn.bo"] {
                params.insert(&p(b), Mat::zeros((1, cfg.dim)));
            }
            params.insert(&p("ln2.g"), Mat::from_elem((1, cfg.dim), F::one()));
            params.insert(&p("ln2.b"), Mat::zeros((1, cfg.dim)));
            params.insert(&p("ff.w1"), normal(cfg.dim, cfg.ff_dim, &mut rng));
            params.insert(&p("ff.b1"), Mat::zeros((1, cfg.ff_dim)));
            params.insert(&p("ff.w2"), normal(cfg.ff_dim, cfg.dim, &mut rng));
            params.insert(&p("ff.b2"), Mat::zeros((1, cfg.dim)));
        }
        params.insert("ln_f.g", Mat::from_elem((1, cfg.dim), F::one()));
        params.insert("ln_f.b", Mat::zeros((1, cfg.dim)));
        params.insert("mlm.bias", Mat::zeros((1, cfg.vocab_size)));
        Ok(ReferenceEncoder { cfg, params })
    }

    pub fn from_parts(cfg: EncoderConfig, params: ParamStore<F>) -> Result<Self> {
        cfg.validate()?;
        Ok(ReferenceEncoder { cfg, params })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }
}

impl<F: Scalar> EncoderContract<F> for ReferenceEncoder<F> {
    fn dim(&self) -> usize {
        self.cfg.dim
    }

    fn vocab_size(&self) -> usize {
        self.cfg.vocab_size
    }

    fn max_len(&self) -> usize {
        self.cfg.max_len
    }

    fn forward(&self, g: &mut Graph<F>, ids: &[u32], valid: Option<&[bool]>) -> TensorId {
        let len = ids.len();
        assert!(len > 0, "empty input");
        assert!(len <= self.cfg.max_len, "input length {len} exceeds max_len");
        if let Some(v) = valid {
            assert_eq!(v.len(), len, "mask length");
        }
        for &id in ids {
            assert!((id as usize) < self.cfg.vocab_size, "token id {id} out of vocabulary");
        }
        let dh = self.cfg.dim / self.cfg.heads;
        let scale = F::from_f64(1.0 / (dh as f64).sqrt());

        let tok = g.param("tok_emb", self.params.get("tok_emb"));
        let pos = g.param("pos_emb", self.params.get("pos_emb"));
        let tok_rows = g.gather_rows(tok, ids.iter().map(|&i| i as usize).collect());
        let pos_rows = g.gather_rows(pos, (0..len).collect());
        let mut x = g.add(tok_rows, pos_rows);

        for l in 0..self.cfg.layers {
            let p = |name: &str| format!("l{l}.{name}");
            let bind = |g: &mut Graph<F>, name: String| -> TensorId {
                g.param(&name, self.params.get(&name))
            };

            let ln1g = bind(g, p("ln1.g"));
            let ln1b = bind(g, p("ln1.b"));
            let n1 = g.layer_norm(x, ln1g, ln1b);

            let wq = bind(g, p("attn.wq"));
            let bq = bind(g, p("attn.bq"));
            let wk = bind(g, p("attn.wk"));
            let bk = bind(g, p("attn.bk"));
            let wv = bind(g, p("attn.wv"));
            let bv = bind(g, p("attn.bv"));
            let wo = bind(g, p("attn.wo"));
            let bo = bind(g, p("attn.bo"));

            let qm = g.matmul(n1, wq);
            let q = g.add_row(qm, bq);
            let km = g.matmul(n1, wk);
            let k = g.add_row(km, bk);
            let vm = g.matmul(n1, wv);
            let v = g.add_row(vm, bv);

            let mut head_ctx = Vec::with_capacity(self.cfg.heads);
            for h in 0..self.cfg.heads {
                let (lo, hi) = (h * dh, (h + 1) * dh);
                let qh = g.slice_cols(q, lo, hi);
                let kh = g.slice_cols(k, lo, hi);
                let vh = g.slice_cols(v, lo, hi);
                let scores = g.matmul_nt(qh, kh);
                let scaled = g.scale(scores, scale);
                let attn = g.row_softmax(scaled, valid.map(|m| m.to_vec()));
                head_ctx.push(g.matmul(attn, vh));
            }
            let ctx = g.concat_cols(&head_ctx);
            let om = g.matmul(ctx, wo);
            let o = g.add_row(om, bo);
            x = g.add(x, o);

            let ln2g = bind(g, p("ln2.g"));
            let ln2b = bind(g, p("ln2.b"));
            let n2 = g.layer_norm(x, ln2g, ln2b);
            let w1 = bind(g, p("ff.w1"));
            let b1 = bind(g, p("ff.b1"));
            let w2 = bind(g, p("ff.w2"));
            let b2 = bind(g, p("ff.b2"));
            let f1 = g.matmul(n2, w1);
            let f1b = g.add_row(f1, b1);
            let act = g.gelu(f1b);
            let f2 = g.matmul(act, w2);
            let f2b = g.add_row(f2, b2);
            x = g.add(x, f2b);
        }

        let lfg = g.param("ln_f.g", self.params.get("ln_f.g"));
        let lfb = g.param("ln_f.b", self.params.get("ln_f.b"));
        g.layer_norm(x, lfg, lfb)
    }

    fn mlm_logits(&self, g: &mut Graph<F>, hidden: TensorId, positions: &[usize]) -> TensorId {
        assert!(!positions.is_empty(), "mlm_logits needs positions");
        let sel = g.gather_rows(hidden, positions.to_vec());
        let tok = g.param("tok_emb", self.params.get("tok_emb"));
        let raw = g.matmul_nt(sel, tok);
        let bias = g.param("mlm.bias", self.params.get("mlm.bias"));
        g.add_row(raw, bias)
    }

    fn params(&self) -> &ParamStore<F> {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore<F> {
        &mut self.params
    }
}

/// The encoding strategies. Width is a pure function of the strategy, the
/// encoder dim `d`, and (for the EnCore family) the provider dim `d_e`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    Ht,
    Mask,
    HtMask,
    HtPlusMask,
    Cls,
    HtCls,
    HtPlusCls,
    Encore,
    EncoreMask,
    EncoreHtMask,
}

/// One representational view used during pre-training.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum View {
    Ht,
    Mask,
    Cls,
    HtMask,
    HtCls,
}

impl View {
    pub fn width(&self, d: usize) -> usize {
        match self {
            View::Ht => 2 * d,
            View::Mask | View::Cls => d,
            View::HtMask | View::HtCls => 3 * d,
        }
    }

    pub fn anchor_rows(&self, inp: &EncodedInput) -> Vec<usize> {
        match self {
            View::Ht => vec![inp.e1_pos, inp.e2_pos],
            View::Mask => vec![inp.mask_pos],
            View::Cls => vec![inp.cls_pos],
            View::HtMask => vec![inp.e1_pos, inp.e2_pos, inp.mask_pos],
            View::HtCls => vec![inp.e1_pos, inp.e2_pos, inp.cls_pos],
        }
    }
}

impl Strategy {
    pub const ALL: [Strategy; 10] = [
        Strategy::Ht,
        Strategy::Mask,
        Strategy::HtMask,
        Strategy::HtPlusMask,
        Strategy::Cls,
        Strategy::HtCls,
        Strategy::HtPlusCls,
        Strategy::Encore,
        Strategy::EncoreMask,
        Strategy::EncoreHtMask,
    ];

    pub fn uses_provider(&self) -> bool {
        matches!(self, Strategy::Encore | Strategy::EncoreMask | Strategy::EncoreHtMask)
    }

    /// EnCore-only strategies skip pre-training; everything else pre-trains.
    pub fn pretrainable(&self) -> bool {
        !self.uses_provider()
    }

    /// Whether the relation encoder contributes to φ at all.
    pub fn uses_encoder(&self) -> bool {
        !matches!(self, Strategy::Encore)
    }

    /// Views whose InfoNCE terms the pre-training loss sums. Hybrid
    /// strategies train two views on one shared forward pass.
    pub fn pretrain_views(&self) -> Result<Vec<View>> {
        match self {
            Strategy::Ht => Ok(vec![View::Ht]),
            Strategy::Mask => Ok(vec![View::Mask]),
            Strategy::HtMask => Ok(vec![View::HtMask]),
            Strategy::HtPlusMask => Ok(vec![View::Ht, View::Mask]),
            Strategy::Cls => Ok(vec![View::Cls]),
            Strategy::HtCls => Ok(vec![View::HtCls]),
            Strategy::HtPlusCls => Ok(vec![View::Ht, View::Cls]),
            _ => Err(Error::Strategy(format!(
                "{self} does not pre-train a relation encoder"
            ))),
        }
    }

    /// Encoder-state rows concatenated into φ (before provider parts).
    pub fn encoder_rows(&self, inp: &EncodedInput) -> Vec<usize> {
        match self {
            Strategy::Ht => vec![inp.e1_pos, inp.e2_pos],
            Strategy::Mask => vec![inp.mask_pos],
            Strategy::HtMask | Strategy::HtPlusMask => vec![inp.e1_pos, inp.e2_pos, inp.mask_pos],
            Strategy::Cls => vec![inp.cls_pos],
            Strategy::HtCls | Strategy::HtPlusCls => vec![inp.e1_pos, inp.e2_pos, inp.cls_pos],
            Strategy::Encore => vec![],
            Strategy::EncoreMask => vec![inp.mask_pos],
            Strategy::EncoreHtMask => vec![inp.e1_pos, inp.e2_pos, inp.mask_pos],
        }
    }

    pub fn width(&self, d: usize, d_e: Option<usize>) -> Result<usize> {
        let need_de = || {
            d_e.ok_or_else(|| Error::Strategy(format!("{self} requires a provider dimension")))
        };
        Ok(match self {
            Strategy::Ht => 2 * d,
            Strategy::Mask | Strategy::Cls => d,
            Strategy::HtMask | Strategy::HtPlusMask | Strategy::HtCls | Strategy::HtPlusCls => 3 * d,
            Strategy::Encore => 2 * need_de()?,
            Strategy::EncoreMask => d + 2 * need_de()?,
            Strategy::EncoreHtMask => 3 * d + 2 * need_de()?,
        })
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Strategy::Ht => "ht",
            Strategy::Mask => "mask",
            Strategy::HtMask => "ht-mask",
            Strategy::HtPlusMask => "ht+mask",
            Strategy::Cls => "cls",
            Strategy::HtCls => "ht-cls",
            Strategy::HtPlusCls => "ht+cls",
            Strategy::Encore => "encore",
            Strategy::EncoreMask => "encore+mask",
            Strategy::EncoreHtMask => "encore+ht+mask",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ht" => Ok(Strategy::Ht),
            "mask" => Ok(Strategy::Mask),
            "ht-mask" => Ok(Strategy::HtMask),
            "ht+mask" | "ht-plus-mask" => Ok(Strategy::HtPlusMask),
            "cls" => Ok(Strategy::Cls),
            "ht-cls" => Ok(Strategy::HtCls),
            "ht+cls" | "ht-plus-cls" => Ok(Strategy::HtPlusCls),
            "encore" => Ok(Strategy::Encore),
            "encore+mask" => Ok(Strategy::EncoreMask),
            "encore+ht+mask" => Ok(Strategy::EncoreHtMask),
            other => Err(Error::Strategy(format!("unknown strategy {other:?}"))),
        }
    }
}

/// Strategy-tagged relation embedding φ(s) for one example.
#[derive(Debug, Clone, PartialEq)]
pub struct RelationEmbedding<F> {
    pub vector: Vec<F>,
    pub strategy: Strategy,
    pub example_id: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EntityRole {
    Head,
    Tail,
}

/// Frozen source of type-bearing head/tail entity embeddings. Parameters
/// never receive gradient updates; identical input yields identical output.
pub trait EntityEmbeddingProvider<F: Scalar> {
    fn dim(&self) -> usize;
    fn embed(&self, inp: &EncodedInput, role: EntityRole) -> Result<Vec<F>>;
}

/// Reference provider: any encoder, frozen, serving its [E1]/[E2] states as
/// head/tail embeddings. No mutable access is exposed.
pub struct FrozenEncoderProvider<F: Scalar> {
    encoder: ReferenceEncoder<F>,
}

impl<F: Scalar> FrozenEncoderProvider<F> {
    pub fn new(encoder: ReferenceEncoder<F>) -> Self {
        FrozenEncoderProvider { encoder }
    }

    /// Read-only view for frozen-contract assertions.
    pub fn params(&self) -> &ParamStore<F> {
        self.encoder.params()
    }

    pub fn encoder(&self) -> &ReferenceEncoder<F> {
        &self.encoder
    }
}

impl<F: Scalar> EntityEmbeddingProvider<F> for FrozenEncoderProvider<F> {
    fn dim(&self) -> usize {
        self.encoder.dim()
    }

    fn embed(&self, inp: &EncodedInput, role: EntityRole) -> Result<Vec<F>> {
        inp.validate()?;
        let hidden = self.encoder.hidden_states(&inp.ids, None);
        let row = match role {
            EntityRole::Head => inp.e1_pos,
            EntityRole::Tail => inp.e2_pos,
        };
        Ok(hidden.row(row).to_vec())
    }
}

/// Provider embeddings for one example, precomputed since the provider is
/// frozen and deterministic.
#[derive(Debug, Clone, PartialEq)]
pub struct ProviderEmbedding<F> {
    pub head: Vec<F>,
    pub tail: Vec<F>,
}

pub fn provider_embedding<F: Scalar>(
    provider: &dyn EntityEmbeddingProvider<F>,
    inp: &EncodedInput,
) -> Result<ProviderEmbedding<F>> {
    Ok(ProviderEmbedding {
        head: provider.embed(inp, EntityRole::Head)?,
        tail: provider.embed(inp, EntityRole::Tail)?,
    })
}

/// Concatenate the strategy's anchor states (and provider embeddings, when
/// the strategy calls for them) out of a final-layer state matrix.
pub fn extract_embedding<F: Scalar>(
    outputs: &Mat<F>,
    inp: &EncodedInput,
    strategy: Strategy,
    provider: Option<&ProviderEmbedding<F>>,
    example_id: &str,
) -> Result<RelationEmbedding<F>> {
    let rows = strategy.encoder_rows(inp);
    for &r in &rows {
        if r >= outputs.nrows() {
            return Err(Error::Shape(format!(
                "anchor position {r} outside encoder output of {} rows",
                outputs.nrows()
            )));
        }
    }
    let mut vector: Vec<F> = Vec::new();
    for r in rows {
        vector.extend(outputs.row(r).iter().copied());
    }
    if strategy.uses_provider() {
        let p = provider.ok_or_else(|| {
            Error::Strategy(format!("strategy {strategy} requires an entity-embedding provider"))
        })?;
        vector.extend(p.head.iter().copied());
        vector.extend(p.tail.iter().copied());
    }
    let d_e = provider.map(|p| p.head.len());
    let want = strategy.width(outputs.ncols(), d_e)?;
    debug_assert_eq!(vector.len(), want, "strategy width formula");
    Ok(RelationEmbedding {
        vector,
        strategy,
        example_id: example_id.to_string(),
    })
}

/// Graph-side twin of [`extract_embedding`]: a [1, width] node wired for
/// backprop. Provider parts enter as constants, so they never receive
/// gradients. `hidden` may be absent only for strategies that read nothing
/// from the relation encoder.
pub fn extract_embedding_node<F: Scalar>(
    g: &mut Graph<F>,
    hidden: Option<TensorId>,
    inp: &EncodedInput,
    strategy: Strategy,
    provider: Option<&ProviderEmbedding<F>>,
) -> Result<TensorId> {
    let rows = strategy.encoder_rows(inp);
    let mut parts = Vec::new();
    if !rows.is_empty() {
        let hidden = hidden.ok_or_else(|| {
            Error::Strategy(format!("strategy {strategy} needs encoder states"))
        })?;
        for r in rows {
            parts.push(g.gather_rows(hidden, vec![r]));
        }
    }
    if strategy.uses_provider() {
        let p = provider.ok_or_else(|| {
            Error::Strategy(format!("strategy {strategy} requires an entity-embedding provider"))
        })?;
        parts.push(g.input_row(&p.head));
        parts.push(g.input_row(&p.tail));
    }
    if parts.is_empty() {
        return Err(Error::Strategy(format!("strategy {strategy} extracts nothing")));
    }
    Ok(g.concat_cols(&parts))
}

/// View extraction for pre-training: rows of `hidden` concatenated to [1, width].
pub fn extract_view_node<F: Scalar>(
    g: &mut Graph<F>,
    hidden: TensorId,
    inp: &EncodedInput,
    view: View,
) -> TensorId {
    let parts: Vec<TensorId> = view
        .anchor_rows(inp)
        .into_iter()
        .map(|r| g.gather_rows(hidden, vec![r]))
        .collect();
    g.concat_cols(&parts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_annotated_text, AnnotatedExample, Span};
    use crate::tokens::{tokenize, Vocabulary};

    fn tiny_cfg(seed: u64) -> EncoderConfig {
        EncoderConfig::new(2, 4, 64, 1000, 64, seed)
    }

    fn sample_input() -> (EncodedInput, Vocabulary) {
        let ex = AnnotatedExample {
            id: "x".into(),
            tokens: ["alice", "works", "at", "acme"].iter().map(|s| s.to_string()).collect(),
            head_span: Span::new(0, 1),
            tail_span: Span::new(3, 4),
            relation: Some("works_at".into()),
            doc_id: None,
            head_span_head: None,
            tail_span_head: None,
        };
        let text = build_annotated_text(&ex).unwrap();
        let vocab = Vocabulary::from_texts([&text]);
        (tokenize(&text, &vocab, 64).unwrap(), vocab)
    }

    #[test]
    fn forward_shape_contract() {
        let enc: ReferenceEncoder<f64> = ReferenceEncoder::new(tiny_cfg(0)).unwrap();
        let ids: Vec<u32> = (0..12).collect();
        let h = enc.hidden_states(&ids, None);
        assert_eq!(h.dim(), (12, 64));
    }

    #[test]
    fn same_seed_gives_bit_identical_parameters() {
        let a: ReferenceEncoder<f64> = ReferenceEncoder::new(tiny_cfg(7)).unwrap();
        let b: ReferenceEncoder<f64> = ReferenceEncoder::new(tiny_cfg(7)).unwrap();
        assert_eq!(a.params(), b.params());
        let c: ReferenceEncoder<f64> = ReferenceEncoder::new(tiny_cfg(8)).unwrap();
        assert_ne!(a.params(), c.params());
    }

    #[test]
    fn invalid_config_is_rejected() {
        let mut cfg = tiny_cfg(0);
        cfg.heads = 5; // 64 % 5 != 0
        assert!(ReferenceEncoder::<f64>::new(cfg).is_err());
    }

    #[test]
    fn pad_content_does_not_leak_through_attention_mask() {
        let enc: ReferenceEncoder<f64> = ReferenceEncoder::new(tiny_cfg(3)).unwrap();
        let real: Vec<u32> = vec![1, 50, 60, 70];
        let mut a = real.clone();
        a.extend([0, 0, 0]);
        let mut b = real.clone();
        b.extend([90, 91, 92]); // different junk in the padded tail
        let valid = vec![true, true, true, true, false, false, false];
        let ha = enc.hidden_states(&a, Some(&valid));
        let hb = enc.hidden_states(&b, Some(&valid));
        for r in 0..4 {
            for c in 0..enc.dim() {
                assert!(
                    (ha[(r, c)] - hb[(r, c)]).abs() < 1e-12,
                    "non-pad output changed at ({r},{c})"
                );
            }
        }
    }

    #[test]
    fn encoder_gradient_matches_finite_differences() {
        // 5-token input, full path through attention + MLM head, f64
        let mut cfg = EncoderConfig::new(1, 2, 8, 32, 16, 5);
        cfg.ff_dim = 16;
        let enc: ReferenceEncoder<f64> = ReferenceEncoder::new(cfg.clone()).unwrap();
        let ids: Vec<u32> = vec![1, 9, 10, 11, 3];

        let loss_of = |enc: &ReferenceEncoder<f64>| -> f64 {
            let mut g = Graph::new();
            let h = enc.forward(&mut g, &ids, None);
            let logits = enc.mlm_logits(&mut g, h, &[1, 3]);
            let l = g.cross_entropy_mean(logits, vec![10, 9]);
            g.scalar(l)
        };

        let mut g = Graph::new();
        let h = enc.forward(&mut g, &ids, None);
        let logits = enc.mlm_logits(&mut g, h, &[1, 3]);
        let l = g.cross_entropy_mean(logits, vec![10, 9]);
        g.backward(l);

        let eps = 1e-5;
        for (name, idx) in [
            ("l0.attn.wq", (2usize, 3usize)),
            ("l0.ff.w1", (1, 4)),
            ("tok_emb", (9, 2)),
            ("l0.ln1.g", (0, 5)),
            ("mlm.bias", (0, 10)),
        ] {
            let ad = g.param_grad(name).expect(name)[idx];
            let mut plus = enc.clone();
            plus.params_mut().get_mut(name)[idx] += eps;
            let mut minus = enc.clone();
            minus.params_mut().get_mut(name)[idx] -= eps;
            let fd = (loss_of(&plus) - loss_of(&minus)) / (2.0 * eps);
            let denom = fd.abs().max(ad.abs()).max(1e-10);
            assert!(
                (fd - ad).abs() / denom < 1e-4,
                "{name}{idx:?}: fd={fd} autograd={ad}"
            );
        }
    }

    #[test]
    fn strategy_widths_follow_the_formula() {
        let d = 64;
        let de = 32;
        let cases = [
            (Strategy::Ht, 128),
            (Strategy::Mask, 64),
            (Strategy::HtMask, 192),
            (Strategy::HtPlusMask, 192),
            (Strategy::Cls, 64),
            (Strategy::HtCls, 192),
            (Strategy::HtPlusCls, 192),
            (Strategy::Encore, 64),
            (Strategy::EncoreMask, 128),
            (Strategy::EncoreHtMask, 256),
        ];
        for (s, want) in cases {
            assert_eq!(s.width(d, Some(de)).unwrap(), want, "{s}");
        }
        assert!(Strategy::Encore.width(d, None).is_err());
    }

    #[test]
    fn strategy_names_round_trip() {
        for s in Strategy::ALL {
            let parsed: Strategy = s.to_string().parse().unwrap();
            assert_eq!(parsed, s);
        }
        assert!("mystery".parse::<Strategy>().is_err());
    }

    #[test]
    fn ht_mask_concatenates_ht_and_mask() {
        let (inp, _vocab) = sample_input();
        let cfg = EncoderConfig::new(1, 2, 16, 64, 64, 11);
        let enc: ReferenceEncoder<f64> = ReferenceEncoder::new(cfg).unwrap();
        let hidden = enc.hidden_states(&inp.ids, None);
        let ht = extract_embedding(&hidden, &inp, Strategy::Ht, None, "x").unwrap();
        let mask = extract_embedding(&hidden, &inp, Strategy::Mask, None, "x").unwrap();
        let htm = extract_embedding(&hidden, &inp, Strategy::HtMask, None, "x").unwrap();
        let hybrid = extract_embedding(&hidden, &inp, Strategy::HtPlusMask, None, "x").unwrap();
        let concat: Vec<f64> = ht.vector.iter().chain(mask.vector.iter()).copied().collect();
        assert_eq!(htm.vector, concat);
        // identical extraction from identical states; they differ only in pre-training
        assert_eq!(htm.vector, hybrid.vector);
    }

    #[test]
    fn extraction_is_linear_for_encoder_strategies() {
        let (inp, _vocab) = sample_input();
        let rows = inp.len();
        let a = Mat::from_shape_fn((rows, 8), |(r, c)| (r * 13 + c) as f64 * 0.1);
        let b = Mat::from_shape_fn((rows, 8), |(r, c)| ((r + 3) * 7 + 2 * c) as f64 * 0.05);
        let (alpha, beta) = (0.3, -1.7);
        for strategy in [Strategy::Ht, Strategy::Mask, Strategy::HtMask, Strategy::Cls] {
            let ea = extract_embedding(&a, &inp, strategy, None, "x").unwrap();
            let eb = extract_embedding(&b, &inp, strategy, None, "x").unwrap();
            let mixed: Mat<f64> = &a * alpha + &b * beta;
            let em = extract_embedding(&mixed, &inp, strategy, None, "x").unwrap();
            for i in 0..em.vector.len() {
                let want = alpha * ea.vector[i] + beta * eb.vector[i];
                assert!((em.vector[i] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn encore_widths_and_provider_requirement() {
        let (inp, _vocab) = sample_input();
        let hidden = Mat::<f64>::zeros((inp.len(), 64));
        let err = extract_embedding(&hidden, &inp, Strategy::EncoreMask, None, "x").unwrap_err();
        assert!(err.to_string().contains("provider"), "{err}");
        let pe = ProviderEmbedding {
            head: vec![0.5; 32],
            tail: vec![-0.5; 32],
        };
        let e = extract_embedding(&hidden, &inp, Strategy::EncoreMask, Some(&pe), "x").unwrap();
        assert_eq!(e.vector.len(), 128); // d=64 + 2*32
        let e2 = extract_embedding(&hidden, &inp, Strategy::Encore, Some(&pe), "x").unwrap();
        assert_eq!(e2.vector.len(), 64);
        assert_eq!(&e2.vector[..32], &e.vector[64..96]);
    }

    #[test]
    fn anchor_out_of_range_is_an_error() {
        let (mut inp, _vocab) = sample_input();
        let hidden = Mat::<f64>::zeros((inp.len(), 16));
        inp.mask_pos = inp.len() + 5;
        let err = extract_embedding(&hidden, &inp, Strategy::Mask, None, "x").unwrap_err();
        assert!(err.to_string().contains("anchor position"), "{err}");
    }

    #[test]
    fn frozen_provider_is_bit_stable_across_calls() {
        let (inp, _vocab) = sample_input();
        let cfg = EncoderConfig::new(1, 2, 16, 64, 64, 21);
        let provider = FrozenEncoderProvider::new(ReferenceEncoder::<f64>::new(cfg).unwrap());
        let a = provider.embed(&inp, EntityRole::Head).unwrap();
        let b = provider.embed(&inp, EntityRole::Head).unwrap();
        let t1 = provider.embed(&inp, EntityRole::Tail).unwrap();
        let t2 = provider.embed(&inp, EntityRole::Tail).unwrap();
        assert_eq!(a, b);
        assert_eq!(t1, t2);
        assert_eq!(a.len(), provider.dim());
        assert_ne!(a, t1);
    }

    #[test]
    fn graph_extraction_matches_pure_extraction() {
        let (inp, _vocab) = sample_input();
        let cfg = EncoderConfig::new(1, 2, 16, 64, 64, 31);
        let enc: ReferenceEncoder<f64> = ReferenceEncoder::new(cfg).unwrap();
        let pe = ProviderEmbedding {
            head: vec![0.25; 16],
            tail: vec![0.75; 16],
        };
        for strategy in Strategy::ALL {
            let mut g = Graph::new();
            let h = enc.forward(&mut g, &inp.ids, None);
            let node = extract_embedding_node(&mut g, Some(h), &inp, strategy, Some(&pe)).unwrap();
            let from_graph: Vec<f64> = g.value(node).row(0).to_vec();
            let hidden = enc.hidden_states(&inp.ids, None);
            let pure = extract_embedding(&hidden, &inp, strategy, Some(&pe), "x").unwrap();
            assert_eq!(from_graph, pure.vector, "{strategy}");
        }
    }
}
