//! Versioned model checkpoints.
//!
//! Layout (little-endian): magic `TACACKPT`, `u32` format version, `u64`
//! header length, a JSON header, then the `f32` payload of every tensor in
//! header order. The header records the model kind, training stage, config
//! hash, seed, tensor names and shapes, plus kind-specific metadata.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::context::ContextConfig;
use crate::error::{Error, Result};
use crate::featext::{SpeechFeatureExtractor, TextFeatureExtractor};
use crate::lmtts::{LmConfig, MelDecoder, SemanticTokenizer, TokenLM, TrainingStage};
use crate::nn::{ParamStore, Tensor};
use crate::styles::{SpeechEncoderConfig, SpeechStyleEncoder, TextEncoderConfig, TextStyleEncoder};
use crate::vq::Codebook;

pub const MAGIC: &[u8; 8] = b"TACACKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub kind: String,
    pub stage: Option<TrainingStage>,
    pub config_hash: String,
    pub seed: u64,
    pub tensors: Vec<TensorEntry>,
    pub extra: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub tensors: Vec<Tensor>,
}

impl Checkpoint {
    pub fn new(kind: &str, config_hash: &str, seed: u64) -> Self {
        Self {
            meta: CheckpointMeta {
                format_version: FORMAT_VERSION,
                kind: kind.to_string(),
                stage: None,
                config_hash: config_hash.to_string(),
                seed,
                tensors: Vec::new(),
                extra: serde_json::Value::Null,
            },
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) {
        self.meta.tensors.push(TensorEntry {
            name: name.into(),
            shape: t.shape().to_vec(),
        });
        self.tensors.push(t);
    }

    /// Adds every parameter of `store`, names prefixed with `prefix`.
    pub fn push_store(&mut self, prefix: &str, store: &ParamStore) {
        for (_, p) in store.iter() {
            self.push(format!("{prefix}{}", p.name), (*p.value).clone());
        }
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.meta
            .tensors
            .iter()
            .position(|e| e.name == name)
            .map(|i| &self.tensors[i])
            .ok_or_else(|| Error::Checkpoint(format!("{} checkpoint lacks tensor {name}", self.meta.kind)))
    }

    /// Overwrites every parameter of `store` with the tensor named
    /// `prefix + name`. Missing tensors and shape mismatches are errors.
    pub fn restore_store(&self, prefix: &str, store: &mut ParamStore) -> Result<()> {
        let ids: Vec<_> = store.iter().map(|(id, p)| (id, p.name.clone())).collect();
        for (id, name) in ids {
            let t = self.get(&format!("{prefix}{name}"))?;
            let dst = store.get_mut(id);
            if dst.shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor {prefix}{name} has shape {:?}, model expects {:?}",
                    t.shape(),
                    dst.shape()
                )));
            }
            *dst = t.clone();
        }
        Ok(())
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.meta.kind != kind {
            return Err(Error::Checkpoint(format!(
                "expected a {kind} checkpoint, found {}",
                self.meta.kind
            )));
        }
        Ok(())
    }

    fn extra<T: for<'de> Deserialize<'de>>(&self) -> Result<T> {
        serde_json::from_value(self.meta.extra.clone())
            .map_err(|e| Error::Checkpoint(format!("{} metadata: {e}", self.meta.kind)))
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.meta)?;
        let payload: usize = self.tensors.iter().map(|t| 4 * t.numel()).sum();
        let mut out = Vec::with_capacity(20 + header.len() + payload);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for t in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let bad = |m: String| Error::Checkpoint(m);
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint (bad magic)".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(bad(format!("unsupported checkpoint version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = &bytes[20..];
        if body.len() < hlen {
            return Err(bad("truncated header".into()));
        }
        let meta: CheckpointMeta =
            serde_json::from_slice(&body[..hlen]).map_err(|e| bad(format!("header: {e}")))?;
        let mut off = hlen;
        let mut tensors = Vec::with_capacity(meta.tensors.len());
        for e in &meta.tensors {
            let n: usize = e.shape.iter().product();
            let end = off + 4 * n;
            if body.len() < end {
                return Err(bad(format!("truncated payload at {}", e.name)));
            }
            let data = body[off..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            tensors.push(Tensor::from_vec(&e.shape, data));
            off = end;
        }
        if off != body.len() {
            return Err(bad("trailing bytes after payload".into()));
        }
        Ok(Self { meta, tensors })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.encode()?).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }
}

#[derive(Serialize, Deserialize)]
struct CodebookState {
    usage_counts: Vec<u64>,
    idle_steps: Vec<usize>,
    seed: u64,
    updates: u64,
}

fn push_codebook(ck: &mut Checkpoint, name: &str, cb: &Codebook) -> CodebookState {
    ck.push(name, cb.entries().clone());
    CodebookState {
        usage_counts: cb.usage_counts().to_vec(),
        idle_steps: cb.idle_steps().to_vec(),
        seed: cb.seed(),
        updates: cb.updates(),
    }
}

fn read_codebook(ck: &Checkpoint, name: &str, st: CodebookState) -> Result<Codebook> {
    Codebook::from_parts(ck.get(name)?.clone(), st.usage_counts, st.idle_steps, st.seed, st.updates)
}

// ---------------------------------------------------------------------------
// Style encoders

#[derive(Serialize, Deserialize)]
struct EncoderMeta<C> {
    encoder: C,
    extractor: String,
}

pub fn save_speech_encoder(enc: &SpeechStyleEncoder, config_hash: &str, seed: u64) -> Result<Checkpoint> {
    let mut ck = Checkpoint::new("speech_style", config_hash, seed);
    ck.push_store("", enc.store());
    ck.meta.extra = serde_json::to_value(EncoderMeta {
        encoder: enc.config().clone(),
        extractor: enc.extractor().name().to_string(),
    })?;
    Ok(ck)
}

pub fn load_speech_encoder(ck: &Checkpoint, extractor: Arc<dyn SpeechFeatureExtractor>) -> Result<SpeechStyleEncoder> {
    ck.expect_kind("speech_style")?;
    let m: EncoderMeta<SpeechEncoderConfig> = ck.extra()?;
    let mut enc = SpeechStyleEncoder::new(m.encoder, extractor, 0, 1.0);
    ck.restore_store("", enc.store_mut())?;
    Ok(enc)
}

pub fn save_text_encoder(enc: &TextStyleEncoder, config_hash: &str, seed: u64) -> Result<Checkpoint> {
    let mut ck = Checkpoint::new("text_style", config_hash, seed);
    ck.push_store("", enc.store());
    ck.meta.extra = serde_json::to_value(EncoderMeta {
        encoder: enc.config().clone(),
        extractor: enc.extractor().name().to_string(),
    })?;
    Ok(ck)
}

pub fn load_text_encoder(ck: &Checkpoint, extractor: Arc<dyn TextFeatureExtractor>) -> Result<TextStyleEncoder> {
    ck.expect_kind("text_style")?;
    let m: EncoderMeta<TextEncoderConfig> = ck.extra()?;
    let mut enc = TextStyleEncoder::new(m.encoder, extractor, 0, 1.0);
    ck.restore_store("", enc.store_mut())?;
    Ok(enc)
}

// ---------------------------------------------------------------------------
// Token LM

#[derive(Serialize, Deserialize)]
struct LmMeta {
    lm: LmConfig,
    context: ContextConfig,
    k_sem: usize,
    d_style: usize,
    max_new_tokens: usize,
    extractor: String,
    style_codebook: CodebookState,
}

pub fn save_token_lm(lm: &TokenLM, config_hash: &str, seed: u64) -> Result<Checkpoint> {
    let mut ck = Checkpoint::new("token_lm", config_hash, seed);
    ck.meta.stage = lm.stage();
    ck.push_store("lm/", lm.store());
    ck.push_store("ctx/", lm.context().store());
    let style_codebook = push_codebook(&mut ck, "ctx/style_codebook", lm.context().codebook());
    ck.meta.extra = serde_json::to_value(LmMeta {
        lm: lm.config().clone(),
        context: lm.context().config().clone(),
        k_sem: lm.vocab().k_sem,
        d_style: lm.context().d_style(),
        max_new_tokens: lm.max_new_tokens(),
        extractor: lm.context().extractor().name().to_string(),
        style_codebook,
    })?;
    Ok(ck)
}

pub fn load_token_lm(ck: &Checkpoint, extractor: Arc<dyn TextFeatureExtractor>) -> Result<TokenLM> {
    ck.expect_kind("token_lm")?;
    let m: LmMeta = ck.extra()?;
    let mut lm = TokenLM::new(m.lm, m.context, m.k_sem, m.d_style, extractor, 0)?;
    ck.restore_store("lm/", lm.store_mut())?;
    ck.restore_store("ctx/", lm.context_mut().store_mut())?;
    let cb = read_codebook(ck, "ctx/style_codebook", m.style_codebook)?;
    lm.context_mut().set_codebook(cb)?;
    lm.set_stage(ck.meta.stage);
    lm.set_max_new_tokens(m.max_new_tokens);
    Ok(lm)
}

// ---------------------------------------------------------------------------
// Semantic tokenizer and decoder

pub fn save_tokenizer(tok: &SemanticTokenizer, config_hash: &str, seed: u64) -> Result<Checkpoint> {
    let mut ck = Checkpoint::new("semantic_tokenizer", config_hash, seed);
    ck.push("mean", Tensor::from_vec(&[tok.mean().len()], tok.mean().to_vec()));
    ck.push("projection", tok.projection().clone());
    let st = push_codebook(&mut ck, "codebook", tok.codebook());
    ck.meta.extra = serde_json::to_value(st)?;
    Ok(ck)
}

pub fn load_tokenizer(ck: &Checkpoint) -> Result<SemanticTokenizer> {
    ck.expect_kind("semantic_tokenizer")?;
    let st: CodebookState = ck.extra()?;
    let cb = read_codebook(ck, "codebook", st)?;
    SemanticTokenizer::from_parts(ck.get("mean")?.data().to_vec(), ck.get("projection")?.clone(), cb)
}

#[derive(Serialize, Deserialize)]
struct DecoderMeta {
    k_sem: usize,
    n_mels: usize,
    hidden: usize,
}

pub fn save_decoder(dec: &MelDecoder, config_hash: &str, seed: u64) -> Result<Checkpoint> {
    let mut ck = Checkpoint::new("mel_decoder", config_hash, seed);
    ck.push_store("", dec.store());
    ck.meta.extra = serde_json::to_value(DecoderMeta {
        k_sem: dec.k_sem(),
        n_mels: dec.n_mels(),
        hidden: dec.hidden(),
    })?;
    Ok(ck)
}

pub fn load_decoder(ck: &Checkpoint) -> Result<MelDecoder> {
    ck.expect_kind("mel_decoder")?;
    let m: DecoderMeta = ck.extra()?;
    let mut dec = MelDecoder::new(m.k_sem, m.n_mels, m.hidden, 0);
    ck.restore_store("", dec.store_mut())?;
    Ok(dec)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::make_synthetic_corpus;
    use crate::featext::{HashedTextExtractor, IdentitySpeechExtractor};
    use crate::lmtts::{SemanticConfig, TrainingStage};

    #[test]
    fn encode_decode_round_trip() {
        let mut ck = Checkpoint::new("x", "hash", 3);
        ck.push("a", Tensor::from_vec(&[2, 2], vec![1.0, -2.0, 3.5, f32::MIN_POSITIVE]));
        ck.push("b", Tensor::from_vec(&[3], vec![0.0, 1.0, 2.0]));
        ck.meta.extra = serde_json::json!({"k": [1, 2]});
        let bytes = ck.encode().unwrap();
        assert_eq!(Checkpoint::decode(&bytes).unwrap(), ck);
        assert!(Checkpoint::decode(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Checkpoint::decode(&extra).is_err());
        assert!(Checkpoint::decode(b"TACACKPX").is_err());
    }

    #[test]
    fn models_round_trip_bit_exactly() {
        let c = make_synthetic_corpus(2, 4, 2, 1);
        let sx: Arc<dyn SpeechFeatureExtractor> = Arc::new(IdentitySpeechExtractor::new(c.feat_dim()));
        let tx: Arc<dyn TextFeatureExtractor> = Arc::new(HashedTextExtractor::default());

        let s = SpeechStyleEncoder::new(SpeechEncoderConfig { d_style: 8, hidden: 8 }, sx.clone(), 4, 0.07);
        let back = load_speech_encoder(&save_speech_encoder(&s, "h", 1).unwrap(), sx.clone()).unwrap();
        assert_eq!(back.fingerprint(), s.fingerprint());
        assert_eq!(back.encode(&c.utterances()[0]).unwrap(), s.encode(&c.utterances()[0]).unwrap());

        let t = TextStyleEncoder::new(TextEncoderConfig { d_style: 8, hidden: 8 }, tx.clone(), 5, 0.07);
        let back = load_text_encoder(&save_text_encoder(&t, "h", 1).unwrap(), tx.clone()).unwrap();
        assert_eq!(back.store().fingerprint(), t.store().fingerprint());
        assert!(load_text_encoder(&save_speech_encoder(&s, "h", 1).unwrap(), tx.clone()).is_err());

        let ctx = ContextConfig {
            h_cond: 8,
            heads: 2,
            layers: 1,
            max_positions: 64,
            style_codebook_size: 4,
            style_code_dim: 4,
            ..ContextConfig::default()
        };
        let lmc = LmConfig { layers: 1, heads: 2, d_model: 8, max_len: 64 };
        let mut lm = TokenLM::new(lmc, ctx, 6, 8, tx.clone(), 2).unwrap();
        lm.set_stage(Some(TrainingStage::Pretrain));
        lm.set_max_new_tokens(17);
        let ck = save_token_lm(&lm, "h", 1).unwrap();
        let back = load_token_lm(&Checkpoint::decode(&ck.encode().unwrap()).unwrap(), tx.clone()).unwrap();
        assert_eq!(back.store().fingerprint(), lm.store().fingerprint());
        assert_eq!(back.context().store().fingerprint(), lm.context().store().fingerprint());
        assert_eq!(back.context().codebook(), lm.context().codebook());
        assert_eq!(back.stage(), Some(TrainingStage::Pretrain));
        assert_eq!(back.max_new_tokens(), 17);

        let all: Vec<usize> = (0..c.len()).collect();
        let tok = SemanticTokenizer::fit(&c, &all, &SemanticConfig { codebook_size: 4, code_dim: 4, ..SemanticConfig::default() }).unwrap();
        let back = load_tokenizer(&save_tokenizer(&tok, "h", 1).unwrap()).unwrap();
        assert_eq!(back, tok);

        let dec = MelDecoder::new(4, c.n_mels(), 8, 3);
        let back = load_decoder(&save_decoder(&dec, "h", 1).unwrap()).unwrap();
        assert_eq!(back.store().fingerprint(), dec.store().fingerprint());
    }
}
