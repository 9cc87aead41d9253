//! Byte-level tokenizer: 256 byte values plus BOS/EOS/PAD.
//!
//! A desk-scale stand-in for subword vocabularies; round-trip lossless on
//! arbitrary byte strings.

/// Beginning-of-sequence token id.
pub const BOS: u32 = 256;
/// End-of-sequence token id.
pub const EOS: u32 = 257;
/// Padding token id.
pub const PAD: u32 = 258;
/// Total vocabulary size (256 byte values + BOS + EOS + PAD).
pub const VOCAB_SIZE: usize = 259;

/// Stateless byte-level tokenizer.
#[derive(Debug, Clone, Copy, Default)]
pub struct ByteTokenizer;

impl ByteTokenizer {
    pub fn new() -> Self {
        ByteTokenizer
    }

    pub fn vocab_size(&self) -> usize {
        VOCAB_SIZE
    }

    /// Encode a byte string as `[BOS, b0, b1, ...]`.
    pub fn encode(&self, text: &[u8]) -> Vec<u32> {
        let mut out = Vec::with_capacity(text.len() + 1);
        out.push(BOS);
        out.extend(text.iter().map(|&b| u32::from(b)));
        out
    }

    pub fn encode_str(&self, text: &str) -> Vec<u32> {
        self.encode(text.as_bytes())
    }

    /// Decode token ids back to bytes, dropping BOS/EOS/PAD.
    pub fn decode(&self, tokens: &[u32]) -> Vec<u8> {
        tokens
            .iter()
            .filter(|&&t| t < 256)
            .map(|&t| t as u8)
            .collect()
    }

    pub fn is_special(&self, token: u32) -> bool {
        token >= 256 && (token as usize) < VOCAB_SIZE
    }
}
