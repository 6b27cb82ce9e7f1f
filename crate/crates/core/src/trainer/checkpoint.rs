//! Versioned binary checkpoint container.
//!
//! Layout: magic, format version, JSON manifest, vocabulary block, named
//! parameter blocks (64-bit floats), and a trailing SHA-256 digest of
//! everything before it. Loading verifies magic, version, and digest, so
//! truncation or bit rot surfaces as an explicit error rather than garbage
//! parameters.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::classifier::{ClassifierConfig, ClassifierHead};
use crate::corpus::LabelInventory;
use crate::encoder::{EncoderConfig, EncoderContract, ReferenceEncoder};
use crate::error::{Error, Result};
use crate::graph::Mat;
use crate::optim::ParamStore;
use crate::scalar::Scalar;
use crate::tokens::Vocabulary;
use crate::trainer::TrainConfig;
use crate::tokens::MaskingStrategy;

const MAGIC: &[u8; 8] = b"RELEMBCK";
pub(crate) const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    /// Strategy tag ("ht+mask", …, or "entity-provider" for the proxy-trained
    /// provider encoder).
    pub strategy: String,
    /// Scalar width the checkpoint was trained at (informational; blocks are
    /// always stored as f64).
    pub scalar: String,
    /// Selected epoch.
    pub epoch: usize,
    /// Validation loss (pre-training) or validation score (fine-tuning) of
    /// the selected epoch.
    pub validation_score: f64,
    pub encoder: EncoderConfig,
    pub train: TrainConfig,
    pub masking: Option<MaskingStrategy>,
    pub classifier: Option<ClassifierConfig>,
    pub labels: Option<Vec<String>>,
}

/// Serialized encoder (+ optional classifier) state with everything needed
/// for exact resume.
#[derive(Debug, Clone)]
pub struct Checkpoint<F: Scalar> {
    pub meta: CheckpointMeta,
    pub vocab: Vocabulary,
    pub encoder: ReferenceEncoder<F>,
    pub classifier: Option<ClassifierHead<F>>,
}

impl<F: Scalar> Checkpoint<F> {
    pub fn inventory(&self) -> Result<LabelInventory> {
        match &self.meta.labels {
            Some(labels) => LabelInventory::from_labels(labels.clone()),
            None => Err(Error::Checkpoint("checkpoint carries no label inventory".into())),
        }
    }
}

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn new() -> Self {
        Writer { buf: Vec::new() }
    }

    fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }

    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.bytes(s.as_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint("unexpected end of file".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let raw = self.take(n)?;
        String::from_utf8(raw.to_vec())
            .map_err(|_| Error::Checkpoint("non-UTF8 string field".into()))
    }
}

fn write_store<F: Scalar>(w: &mut Writer, store: &ParamStore<F>) {
    for (name, mat) in store.iter() {
        w.str(name);
        w.u32(mat.nrows() as u32);
        w.u32(mat.ncols() as u32);
        for &v in mat.iter() {
            w.f64(v.as_f64());
        }
    }
}

pub fn save_checkpoint<F: Scalar>(ck: &Checkpoint<F>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = Writer::new();
    w.bytes(MAGIC);
    w.u32(FORMAT_VERSION);
    let meta = serde_json::to_vec(&ck.meta).expect("meta serializes");
    w.u64(meta.len() as u64);
    w.bytes(&meta);

    w.u32(ck.vocab.len() as u32);
    for t in ck.vocab.tokens() {
        w.str(t);
    }

    let n_blocks = ck.encoder.params().len()
        + ck.classifier.as_ref().map_or(0, |c| c.params().len());
    w.u32(n_blocks as u32);
    write_store(&mut w, ck.encoder.params());
    if let Some(c) = &ck.classifier {
        write_store(&mut w, c.params());
    }

    let digest = Sha256::digest(&w.buf);
    w.bytes(&digest);
    fs::write(path, &w.buf).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<F: Scalar>(path: impl AsRef<Path>) -> Result<Checkpoint<F>> {
    let path = path.as_ref();
    let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
    if raw.len() < MAGIC.len() + 4 + 32 {
        return Err(Error::Checkpoint("file too short to be a checkpoint".into()));
    }
    let (body, stored_digest) = raw.split_at(raw.len() - 32);
    if &body[..MAGIC.len()] != MAGIC {
        return Err(Error::Checkpoint(
            "bad magic header: not a checkpoint or an unsupported version".into(),
        ));
    }
    let digest = Sha256::digest(body);
    if digest.as_slice() != stored_digest {
        return Err(Error::Checkpoint("digest mismatch: file is corrupt".into()));
    }

    let mut r = Reader::new(&body[MAGIC.len()..]);
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint format version {version}"
        )));
    }
    let meta_len = r.u64()? as usize;
    let meta: CheckpointMeta = serde_json::from_slice(r.take(meta_len)?)
        .map_err(|e| Error::Checkpoint(format!("manifest: {e}")))?;

    let vocab_len = r.u32()? as usize;
    let mut tokens = Vec::with_capacity(vocab_len);
    for _ in 0..vocab_len {
        tokens.push(r.str()?);
    }
    let vocab = Vocabulary::from_lines(tokens.iter().map(|s| s.as_str()))?;

    let n_blocks = r.u32()? as usize;
    let mut enc_params: ParamStore<F> = ParamStore::new();
    let mut clf_params: ParamStore<F> = ParamStore::new();
    for _ in 0..n_blocks {
        let name = r.str()?;
        let rows = r.u32()? as usize;
        let cols = r.u32()? as usize;
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            data.push(F::from_f64(r.f64()?));
        }
        let mat = Mat::from_shape_vec((rows, cols), data)
            .map_err(|e| Error::Checkpoint(format!("block {name}: {e}")))?;
        if name.starts_with("clf.") {
            clf_params.insert(&name, mat);
        } else {
            enc_params.insert(&name, mat);
        }
    }

    let encoder = build_encoder(&meta.encoder, enc_params)?;
    let classifier = match (&meta.classifier, clf_params.is_empty()) {
        (Some(cfg), false) => Some(build_classifier(cfg, clf_params)?),
        (None, true) => None,
        _ => {
            return Err(Error::Checkpoint(
                "classifier manifest and parameter blocks disagree".into(),
            ))
        }
    };
    Ok(Checkpoint {
        meta,
        vocab,
        encoder,
        classifier,
    })
}

fn build_encoder<F: Scalar>(cfg: &EncoderConfig, params: ParamStore<F>) -> Result<ReferenceEncoder<F>> {
    let reference: ReferenceEncoder<F> = ReferenceEncoder::new(cfg.clone())?;
    check_store_shape(reference.params(), &params, "encoder")?;
    ReferenceEncoder::from_parts(cfg.clone(), params)
}

fn build_classifier<F: Scalar>(cfg: &ClassifierConfig, params: ParamStore<F>) -> Result<ClassifierHead<F>> {
    let reference: ClassifierHead<F> = ClassifierHead::new(cfg.clone())?;
    check_store_shape(reference.params(), &params, "classifier")?;
    ClassifierHead::from_parts(cfg.clone(), params)
}

fn check_store_shape<F: Scalar>(
    expected: &ParamStore<F>,
    got: &ParamStore<F>,
    what: &str,
) -> Result<()> {
    for (name, mat) in expected.iter() {
        match got.maybe(name) {
            None => {
                return Err(Error::Checkpoint(format!("{what} block {name} missing")));
            }
            Some(g) if g.dim() != mat.dim() => {
                return Err(Error::Checkpoint(format!(
                    "{what} block {name} has shape {:?}, expected {:?}",
                    g.dim(),
                    mat.dim()
                )));
            }
            _ => {}
        }
    }
    if got.len() != expected.len() {
        return Err(Error::Checkpoint(format!(
            "{what} carries {} blocks, expected {}",
            got.len(),
            expected.len()
        )));
    }
    Ok(())
}
