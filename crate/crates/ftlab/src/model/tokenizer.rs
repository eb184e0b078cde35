//! Byte-level tokenizer: ids 0..=255 are raw bytes, plus PAD and BOS
//! specials. No vocabulary files, fully deterministic.

pub const PAD: usize = 256;
pub const BOS: usize = 257;
pub const VOCAB_SIZE: usize = 258;

/// BOS followed by the text's bytes, truncated to `max_len`.
pub fn encode(text: &str, max_len: usize) -> Vec<usize> {
    let mut ids = Vec::with_capacity((text.len() + 1).min(max_len));
    ids.push(BOS);
    for &b in text.as_bytes() {
        if ids.len() >= max_len {
            break;
        }
        ids.push(b as usize);
    }
    ids.truncate(max_len);
    ids
}

/// Token batch in the flattened `[b*t]` layout the model consumes.
#[derive(Debug, Clone)]
pub struct Batch {
    pub token_ids: Vec<usize>,
    /// True at real positions, false at padding.
    pub mask: Vec<bool>,
    pub batch: usize,
    pub seq_len: usize,
}

/// Right-pad every text to the longest encoded length in the batch.
pub fn encode_batch(texts: &[String], max_seq_len: usize) -> Batch {
    let encoded: Vec<Vec<usize>> = texts.iter().map(|t| encode(t, max_seq_len)).collect();
    let seq_len = encoded.iter().map(Vec::len).max().unwrap_or(1).max(1);
    let mut token_ids = Vec::with_capacity(encoded.len() * seq_len);
    let mut mask = Vec::with_capacity(encoded.len() * seq_len);
    for ids in &encoded {
        token_ids.extend_from_slice(ids);
        mask.extend(std::iter::repeat(true).take(ids.len()));
        token_ids.extend(std::iter::repeat(PAD).take(seq_len - ids.len()));
        mask.extend(std::iter::repeat(false).take(seq_len - ids.len()));
    }
    Batch {
        token_ids,
        mask,
        batch: encoded.len(),
        seq_len,
    }
}
