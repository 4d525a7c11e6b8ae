//! Byte-level tokenizer.
//!
//! Token ids 0–255 are raw bytes; three specials follow. There is no
//! training, no merges, no normalization — the model reads and writes
//! bytes, which keeps the vocabulary closed over any trigger or target
//! string an attack might use.

/// Bytes 0–255 plus BOS/EOS/PAD.
pub const VOCAB_SIZE: usize = 259;
pub const BOS: u32 = 256;
pub const EOS: u32 = 257;
pub const PAD: u32 = 258;

/// Maps each byte to its token id.
pub fn tokenize(bytes: &[u8]) -> Vec<u32> {
    bytes.iter().map(|b| u32::from(*b)).collect()
}

/// Maps token ids back to bytes, dropping the special tokens.
pub fn detokenize(tokens: &[u32]) -> Vec<u8> {
    tokens
        .iter()
        .filter(|t| **t < 256)
        .map(|t| *t as u8)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips_every_byte_value() {
        let all: Vec<u8> = (0..=255).collect();
        assert_eq!(detokenize(&tokenize(&all)), all);
    }

    #[test]
    fn detokenize_drops_specials_anywhere_in_the_stream() {
        let toks = vec![BOS, 104, 105, EOS, PAD, 33];
        assert_eq!(detokenize(&toks), b"hi!");
    }

    #[test]
    fn specials_are_outside_the_byte_range() {
        assert!(BOS >= 256 && EOS >= 256 && PAD >= 256);
        assert_eq!(VOCAB_SIZE, 256 + 3);
    }

    #[test]
    fn empty_input_round_trips_to_empty() {
        assert!(tokenize(b"").is_empty());
        assert!(detokenize(&[]).is_empty());
    }
}
