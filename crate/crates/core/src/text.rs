//! Question tokenization and the small BERT-style text encoder.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{init_layer_norm, Activation, Forward, Init, ParamStore, TransformerBlock, INIT_STD};
use crate::rng::CounterRng;
use crate::tape::Var;
use crate::tensor::Scalar;

pub const PAD_ID: usize = 0;
pub const CLS_ID: usize = 1;
pub const UNK_ID: usize = 2;
pub const PAD_TOKEN: &str = "[PAD]";
pub const CLS_TOKEN: &str = "[CLS]";
pub const UNK_TOKEN: &str = "[UNK]";

/// Token table; the line index of a token in the vocab file is its id.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Builds a vocabulary with the reserved `[PAD]`, `[CLS]`, `[UNK]`
    /// entries at ids 0, 1, 2 followed by `words`.
    pub fn with_words<S: AsRef<str>>(words: &[S]) -> Result<Self> {
        let mut tokens = vec![PAD_TOKEN.to_string(), CLS_TOKEN.to_string(), UNK_TOKEN.to_string()];
        tokens.extend(words.iter().map(|w| w.as_ref().to_string()));
        Self::from_tokens(tokens)
    }

    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        for (id, expect) in [(PAD_ID, PAD_TOKEN), (CLS_ID, CLS_TOKEN), (UNK_ID, UNK_TOKEN)] {
            if tokens.get(id).map(String::as_str) != Some(expect) {
                return Err(Error::Format(format!("vocab line {id} must be `{expect}`")));
            }
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() {
                return Err(Error::Format(format!("vocab line {i} is empty")));
            }
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Format(format!("vocab token `{t}` appears twice")));
            }
        }
        Ok(Self { tokens, index })
    }

    /// Parses the vocab file format: UTF-8, one token per line.
    pub fn parse(text: &str) -> Result<Self> {
        Self::from_tokens(text.lines().map(str::to_string).collect())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn to_file_string(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }
}

/// Lowercases and splits on whitespace; every punctuation character becomes
/// its own word.
pub fn split_words(text: &str) -> Vec<String> {
    let mut words = Vec::new();
    let mut cur = String::new();
    for ch in text.chars().flat_map(char::to_lowercase) {
        if ch.is_whitespace() {
            if !cur.is_empty() {
                words.push(std::mem::take(&mut cur));
            }
        } else if ch.is_ascii_punctuation() || (!ch.is_alphanumeric() && !ch.is_whitespace()) {
            if !cur.is_empty() {
                words.push(std::mem::take(&mut cur));
            }
            words.push(ch.to_string());
        } else {
            cur.push(ch);
        }
    }
    if !cur.is_empty() {
        words.push(cur);
    }
    words
}

/// Token ids of one question: `[CLS]` first, `[PAD]`-filled to a fixed length.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Positions that take part in attention (everything but `[PAD]`).
    pub fn key_valid(&self) -> impl Iterator<Item = bool> + '_ {
        self.ids.iter().map(|&i| i != PAD_ID)
    }

    /// Same sequence padded (or cut) to `len`.
    pub fn padded_to(&self, len: usize) -> Self {
        let mut ids = self.ids.clone();
        ids.resize(len, PAD_ID);
        Self { ids }
    }
}

/// Maps `question` to `[CLS] w1 w2 ... [PAD]...` of exactly `max_len` ids.
/// Unknown words map to `[UNK]`; long questions are truncated.
pub fn tokenize(question: &str, vocab: &Vocab, max_len: usize) -> Result<TokenSequence> {
    if max_len < 2 {
        return Err(Error::Parameter(format!("max_len must be >= 2, got {max_len}")));
    }
    let mut ids = Vec::with_capacity(max_len);
    ids.push(CLS_ID);
    ids.extend(
        split_words(question)
            .iter()
            .map(|w| vocab.id(w).unwrap_or(UNK_ID))
            .take(max_len - 1),
    );
    ids.resize(max_len, PAD_ID);
    Ok(TokenSequence { ids })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TextEncoderConfig {
    pub vocab_size: usize,
    pub max_len: usize,
    pub layers: usize,
    pub heads: usize,
    pub dim: usize,
    #[serde(default = "default_hidden_ratio")]
    pub hidden_ratio: usize,
}

fn default_hidden_ratio() -> usize {
    4
}

impl Default for TextEncoderConfig {
    /// BERT-Tiny shape.
    fn default() -> Self {
        Self {
            vocab_size: 30522,
            max_len: 128,
            layers: 2,
            heads: 2,
            dim: 128,
            hidden_ratio: 4,
        }
    }
}

impl TextEncoderConfig {
    pub fn validate(&self, section: &str) -> Result<()> {
        let f = |k: &str| format!("{section}.{k}");
        if self.vocab_size < 4 {
            return Err(Error::config(
                f("vocab_size"),
                "must hold [PAD], [CLS], [UNK] and at least one word",
            ));
        }
        if self.max_len < 2 {
            return Err(Error::config(f("max_len"), "must be >= 2 ([CLS] plus one token)"));
        }
        if self.dim == 0 {
            return Err(Error::config(f("dim"), "must be positive"));
        }
        if self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(Error::config(
                f("heads"),
                format!("dim {} is not divisible by heads {}", self.dim, self.heads),
            ));
        }
        if self.hidden_ratio == 0 {
            return Err(Error::config(f("hidden_ratio"), "must be positive"));
        }
        Ok(())
    }

    pub fn output_dim(&self) -> usize {
        self.dim
    }
}

/// Token + learned position embeddings, pre-norm transformer blocks with
/// `[PAD]` keys masked, final layer norm; the representation is the
/// `[CLS]` position.
#[derive(Debug, Clone, Copy)]
pub struct TextEncoder {
    pub cfg: TextEncoderConfig,
}

impl TextEncoder {
    pub fn new(cfg: TextEncoderConfig) -> Result<Self> {
        cfg.validate("text_encoder")?;
        Ok(Self { cfg })
    }

    fn block(&self) -> Result<TransformerBlock> {
        TransformerBlock::msa(self.cfg.dim, self.cfg.heads, self.cfg.hidden_ratio, Activation::Gelu)
    }

    pub fn init<T: Scalar>(&self, store: &mut ParamStore<T>, prefix: &str, rng: &mut CounterRng) -> Result<()> {
        let c = &self.cfg;
        store.add(
            format!("{prefix}.embed.tokens"),
            &[c.vocab_size, c.dim],
            Init::TruncNormal(INIT_STD),
            false,
            rng,
        )?;
        store.add(
            format!("{prefix}.embed.positions"),
            &[c.max_len, c.dim],
            Init::TruncNormal(INIT_STD),
            false,
            rng,
        )?;
        let block = self.block()?;
        for i in 0..c.layers {
            block.init(store, &format!("{prefix}.blocks.{i}"), rng)?;
        }
        init_layer_norm(store, &format!("{prefix}.norm"), c.dim, rng)
    }

    /// Encodes a batch of equal-length sequences to `[b, dim]`.
    pub fn forward<T: Scalar>(&self, fw: &mut Forward<'_, T>, prefix: &str, seqs: &[TokenSequence]) -> Result<Var> {
        let c = &self.cfg;
        let len = seqs.first().map(|s| s.len()).unwrap_or(0);
        if len == 0 || seqs.iter().any(|s| s.len() != len) {
            return Err(Error::Input(
                "text batch needs non-empty sequences of equal length".into(),
            ));
        }
        if len > c.max_len {
            return Err(Error::Input(format!(
                "sequence length {len} exceeds max_len {}",
                c.max_len
            )));
        }
        if let Some(bad) = seqs.iter().flat_map(|s| &s.ids).find(|&&i| i >= c.vocab_size) {
            return Err(Error::Input(format!(
                "token id {bad} out of range for vocab of {}",
                c.vocab_size
            )));
        }
        let b = seqs.len();
        let ids: Vec<usize> = seqs.iter().flat_map(|s| s.ids.iter().copied()).collect();
        let key_valid: Vec<bool> = seqs.iter().flat_map(|s| s.key_valid()).collect();

        let table = fw.p(&format!("{prefix}.embed.tokens"))?;
        let tok = fw.tape.embedding(table, &ids)?;
        let tok = fw.tape.reshape(tok, &[b, len, c.dim])?;
        let pos = fw.p(&format!("{prefix}.embed.positions"))?;
        let pos = fw.tape.narrow(pos, 0, 0, len)?;
        let mut x = fw.tape.add(tok, pos)?;
        let block = self.block()?;
        for i in 0..c.layers {
            x = block.forward(fw, &format!("{prefix}.blocks.{i}"), x, Some(&key_valid))?;
        }
        let cls = fw.tape.narrow(x, 1, 0, 1)?;
        let cls = fw.tape.reshape(cls, &[b, c.dim])?;
        fw.layer_norm(&format!("{prefix}.norm"), cls)
    }
}
