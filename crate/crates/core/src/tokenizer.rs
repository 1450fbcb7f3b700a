//! Byte-level tokenizer: one token per byte plus begin/end markers.

use serde::{Deserialize, Serialize};

pub const BOS: u32 = 256;
pub const EOS: u32 = 257;
pub const VOCAB_SIZE: usize = 258;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence(pub Vec<u32>);

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[u32] {
        &self.0
    }

    pub fn max_token(&self) -> Option<u32> {
        self.0.iter().copied().max()
    }
}

/// `[BOS, bytes..., EOS]`.
pub fn tokenize(text: &str) -> TokenSequence {
    tokenize_bytes(text.as_bytes())
}

pub fn tokenize_bytes(bytes: &[u8]) -> TokenSequence {
    let mut tokens = Vec::with_capacity(bytes.len() + 2);
    tokens.push(BOS);
    tokens.extend(bytes.iter().map(|&b| u32::from(b)));
    tokens.push(EOS);
    TokenSequence(tokens)
}

/// Byte tokens of `seq`, with marker tokens dropped.
pub fn detokenize_bytes(seq: &TokenSequence) -> Vec<u8> {
    seq.0.iter().filter(|&&t| t < 256).map(|&t| t as u8).collect()
}

/// Inverse of [`tokenize`] on valid UTF-8. Byte runs that are not valid
/// UTF-8 (possible in sampled output) are replaced with U+FFFD.
pub fn detokenize(seq: &TokenSequence) -> String {
    String::from_utf8_lossy(&detokenize_bytes(seq)).into_owned()
}

/// Conditioning sequence for a prompt: `[BOS, bytes...]`.
pub fn prompt_tokens(prompt: &str) -> TokenSequence {
    let mut seq = tokenize(prompt);
    seq.0.pop();
    seq
}

/// Target sequence for a response: `[bytes..., EOS]`, so the model learns
/// where to stop.
pub fn response_tokens(response: &str) -> TokenSequence {
    let mut seq = tokenize(response);
    seq.0.remove(0);
    seq
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn empty_text_is_markers_only() {
        let seq = tokenize("");
        assert_eq!(seq.0, vec![BOS, EOS]);
        assert_eq!(detokenize(&seq), "");
    }

    #[test]
    fn ascii_maps_to_byte_values() {
        assert_eq!(tokenize("ab").0, vec![BOS, 97, 98, EOS]);
    }

    #[test]
    fn prompt_and_response_split() {
        assert_eq!(prompt_tokens("ab").0, vec![BOS, 97, 98]);
        assert_eq!(response_tokens("ab").0, vec![97, 98, EOS]);
        assert_eq!(response_tokens("").0, vec![EOS]);
    }

    proptest! {
        #[test]
        fn bytes_round_trip(bytes in proptest::collection::vec(any::<u8>(), 0..200)) {
            prop_assert_eq!(detokenize_bytes(&tokenize_bytes(&bytes)), bytes);
        }

        #[test]
        fn utf8_round_trip(text in "\\PC{0,80}") {
            prop_assert_eq!(detokenize(&tokenize(&text)), text);
        }
    }
}
