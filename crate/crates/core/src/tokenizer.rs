//! Word-level vocabulary and BERT-style input encoding: `[CLS]`/`[SEP]`
//! layout, padding, attention masks, and segment ids.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
pub const CLS_ID: u32 = 2;
pub const SEP_ID: u32 = 3;
pub const MASK_ID: u32 = 4;

pub const SPECIAL_TOKENS: [&str; 5] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"];
pub const NUM_SPECIAL_TOKENS: usize = SPECIAL_TOKENS.len();

pub fn is_special_id(id: u32) -> bool {
    (id as usize) < NUM_SPECIAL_TOKENS
}

/// Token vocabulary. Ids 0..=4 are the fixed special tokens; the rest are
/// corpus tokens ranked by frequency, ties broken lexicographically.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    token_to_id: HashMap<String, u32>,
    id_to_token: Vec<String>,
    lowercase: bool,
}

impl Vocab {
    /// Builds a vocabulary from token sequences.
    ///
    /// `max_size` bounds the total entry count (special tokens included);
    /// tokens seen fewer than `min_freq` times are dropped.
    pub fn build<S: AsRef<str>>(
        corpus: impl IntoIterator<Item = impl AsRef<[S]>>,
        max_size: usize,
        min_freq: usize,
        lowercase: bool,
    ) -> Result<Self> {
        if max_size <= NUM_SPECIAL_TOKENS {
            return Err(Error::Config(format!(
                "max_size must exceed {NUM_SPECIAL_TOKENS} (the special tokens)"
            )));
        }
        if min_freq == 0 {
            return Err(Error::Config("min_freq must be >= 1".into()));
        }
        let mut counts: HashMap<String, usize> = HashMap::new();
        let mut saw_any = false;
        for seq in corpus {
            for token in seq.as_ref() {
                saw_any = true;
                let token = normalize(token.as_ref(), lowercase);
                *counts.entry(token).or_insert(0) += 1;
            }
        }
        if !saw_any {
            return Err(Error::Data("cannot build a vocabulary from an empty corpus".into()));
        }
        let mut ranked: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(_, c)| *c >= min_freq)
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        ranked.truncate(max_size - NUM_SPECIAL_TOKENS);

        let mut id_to_token: Vec<String> =
            SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        id_to_token.extend(ranked.into_iter().map(|(t, _)| t));
        let token_to_id = id_to_token
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Ok(Self {
            token_to_id,
            id_to_token,
            lowercase,
        })
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        false // the special tokens are always present
    }

    pub fn lowercase(&self) -> bool {
        self.lowercase
    }

    /// Id for `token`, falling back to `[UNK]`.
    pub fn id(&self, token: &str) -> u32 {
        let token = normalize(token, self.lowercase);
        self.token_to_id.get(&token).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.id_to_token.get(id as usize).map(|s| s.as_str())
    }

    /// Writes the vocabulary as one token per line (line number = id).
    pub fn save(&self, path: &Path) -> Result<()> {
        let body = self.id_to_token.join("\n") + "\n";
        fs::write(path, body).map_err(|e| Error::io(path, e))
    }

    /// Loads a vocabulary file written by [`Vocab::save`].
    pub fn load(path: &Path, lowercase: bool) -> Result<Self> {
        let body = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let id_to_token: Vec<String> = body.lines().map(|l| l.to_string()).collect();
        for (i, special) in SPECIAL_TOKENS.iter().enumerate() {
            if id_to_token.get(i).map(|s| s.as_str()) != Some(*special) {
                return Err(Error::Data(format!(
                    "{}: entry {i} should be the special token {special}",
                    path.display()
                )));
            }
        }
        let token_to_id = id_to_token
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Ok(Self {
            token_to_id,
            id_to_token,
            lowercase,
        })
    }
}

fn normalize(token: &str, lowercase: bool) -> String {
    if lowercase {
        token.to_lowercase()
    } else {
        token.to_string()
    }
}

/// A fixed-length encoder input: padded token ids plus attention mask and
/// segment ids, with an optional class label.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedInput {
    pub ids: Vec<u32>,
    pub attention_mask: Vec<u8>,
    pub segment_ids: Vec<u8>,
    pub label: Option<u8>,
}

impl EncodedInput {
    pub fn max_len(&self) -> usize {
        self.ids.len()
    }

    /// Number of attended (non-`[PAD]`) positions.
    pub fn attended_len(&self) -> usize {
        self.attention_mask.iter().filter(|&&m| m == 1).count()
    }

    pub fn with_label(mut self, label: u8) -> Self {
        self.label = Some(label);
        self
    }
}

/// Encodes one sentence as `[CLS] tokens [SEP] [PAD]...`, truncating to the
/// first `max_len - 2` tokens.
pub fn encode(tokens: &[impl AsRef<str>], vocab: &Vocab, max_len: usize) -> Result<EncodedInput> {
    if max_len < 3 {
        return Err(Error::Config(format!("max_len {max_len} < 3 cannot hold [CLS] t [SEP]")));
    }
    let keep = tokens.len().min(max_len - 2);
    let mut ids = Vec::with_capacity(max_len);
    ids.push(CLS_ID);
    ids.extend(tokens[..keep].iter().map(|t| vocab.id(t.as_ref())));
    ids.push(SEP_ID);
    let attended = ids.len();
    ids.resize(max_len, PAD_ID);
    let mut attention_mask = vec![0u8; max_len];
    attention_mask[..attended].fill(1);
    Ok(EncodedInput {
        ids,
        attention_mask,
        segment_ids: vec![0u8; max_len],
        label: None,
    })
}

/// Encodes a sentence pair as `[CLS] A [SEP] B [SEP] [PAD]...` with segment
/// ids 0 over `[CLS] A [SEP]` and 1 over `B [SEP]`. Overlong pairs are
/// truncated longest-first (ties trim B) until they fit.
pub fn encode_pair(
    a_tokens: &[impl AsRef<str>],
    b_tokens: &[impl AsRef<str>],
    vocab: &Vocab,
    max_len: usize,
) -> Result<EncodedInput> {
    if max_len < 5 {
        return Err(Error::Config(format!(
            "max_len {max_len} < 5 cannot hold [CLS] a [SEP] b [SEP]"
        )));
    }
    if a_tokens.is_empty() || b_tokens.is_empty() {
        return Err(Error::Data("sentence pair requires two non-empty sentences".into()));
    }
    let budget = max_len - 3;
    let mut a_len = a_tokens.len();
    let mut b_len = b_tokens.len();
    while a_len + b_len > budget {
        if a_len > b_len {
            a_len -= 1;
        } else {
            b_len -= 1;
        }
    }
    let mut ids = Vec::with_capacity(max_len);
    let mut segment_ids = Vec::with_capacity(max_len);
    ids.push(CLS_ID);
    segment_ids.push(0);
    ids.extend(a_tokens[..a_len].iter().map(|t| vocab.id(t.as_ref())));
    segment_ids.resize(ids.len(), 0);
    ids.push(SEP_ID);
    segment_ids.push(0);
    ids.extend(b_tokens[..b_len].iter().map(|t| vocab.id(t.as_ref())));
    segment_ids.resize(ids.len(), 1);
    ids.push(SEP_ID);
    segment_ids.push(1);
    let attended = ids.len();
    ids.resize(max_len, PAD_ID);
    segment_ids.resize(max_len, 0);
    let mut attention_mask = vec![0u8; max_len];
    attention_mask[..attended].fill(1);
    Ok(EncodedInput {
        ids,
        attention_mask,
        segment_ids,
        label: None,
    })
}

/// Recovers the in-vocabulary tokens of an encoded input, stripping padding
/// and special tokens.
pub fn decode(input: &EncodedInput, vocab: &Vocab) -> Vec<String> {
    input
        .ids
        .iter()
        .zip(&input.attention_mask)
        .filter(|&(&id, &m)| m == 1 && !is_special_id(id))
        .filter_map(|(&id, _)| vocab.token(id).map(|t| t.to_string()))
        .collect()
}
