//! Reversible byte-level tokenizer.
//!
//! Four special tokens precede the 256 raw byte values, giving a fixed
//! vocabulary of 260 ids. Raw bytes map to `byte + BYTE_OFFSET`, so encoding
//! never fails and decoding drops specials and re-assembles the exact byte
//! sequence (lossless on valid UTF-8 input).

use thiserror::Error;

/// Padding token id.
pub const PAD: u32 = 0;
/// Beginning-of-sequence token id.
pub const BOS: u32 = 1;
/// End-of-sequence token id.
pub const EOS: u32 = 2;
/// Separator token id.
pub const SEP: u32 = 3;

/// Number of special tokens preceding the raw byte range.
pub const BYTE_OFFSET: u32 = 4;
/// Total vocabulary size: specials plus all 256 byte values.
pub const VOCAB_SIZE: usize = BYTE_OFFSET as usize + 256;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TokenizerError {
    /// A token id at or beyond the vocabulary size was passed to `decode`.
    #[error("unknown token id {id} (vocab size {vocab})")]
    UnknownToken { id: u32, vocab: usize },
}

/// Encodes UTF-8 text as token ids; with `add_specials` the body is wrapped
/// as `BOS ++ bytes ++ EOS`.
pub fn encode(text: &str, add_specials: bool) -> Vec<u32> {
    let body = text.bytes().map(|b| u32::from(b) + BYTE_OFFSET);
    if add_specials {
        std::iter::once(BOS)
            .chain(body)
            .chain(std::iter::once(EOS))
            .collect()
    } else {
        body.collect()
    }
}

/// Decodes token ids back to text. Special tokens are dropped; byte runs that
/// are not valid UTF-8 decode with U+FFFD replacement characters.
pub fn decode(tokens: &[u32]) -> Result<String, TokenizerError> {
    let mut bytes = Vec::with_capacity(tokens.len());
    for &id in tokens {
        if id as usize >= VOCAB_SIZE {
            return Err(TokenizerError::UnknownToken {
                id,
                vocab: VOCAB_SIZE,
            });
        }
        if id >= BYTE_OFFSET {
            bytes.push((id - BYTE_OFFSET) as u8);
        }
    }
    Ok(String::from_utf8_lossy(&bytes).into_owned())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_string_with_specials_is_bos_eos() {
        assert_eq!(encode("", true), vec![BOS, EOS]);
        assert_eq!(decode(&[BOS, EOS]).unwrap(), "");
    }

    #[test]
    fn hi_maps_to_offset_bytes() {
        // 'H' = 72, 'i' = 105; both shifted by the 4 specials.
        assert_eq!(encode("Hi", false), vec![76, 109]);
        assert_eq!(decode(&[76, 109]).unwrap(), "Hi");
    }

    #[test]
    fn vocab_size_is_260() {
        assert_eq!(VOCAB_SIZE, 260);
    }

    #[test]
    fn out_of_range_id_is_rejected() {
        assert_eq!(
            decode(&[999]),
            Err(TokenizerError::UnknownToken { id: 999, vocab: 260 })
        );
        // The last valid id decodes fine.
        assert!(decode(&[(VOCAB_SIZE - 1) as u32]).is_ok());
    }

    #[test]
    fn specials_are_dropped_on_decode() {
        let toks = encode("ab", true);
        assert_eq!(toks, vec![BOS, 101, 102, EOS]);
        assert_eq!(decode(&toks).unwrap(), "ab");
        assert_eq!(decode(&[PAD, SEP]).unwrap(), "");
    }

    #[test]
    fn invalid_utf8_run_decodes_with_replacement() {
        // 0xFF is never valid UTF-8.
        let s = decode(&[0xFF + BYTE_OFFSET]).unwrap();
        assert_eq!(s, "\u{FFFD}");
    }

    #[test]
    fn round_trip_multibyte() {
        let text = "Qué es el glaucoma? — 緑内障";
        assert_eq!(decode(&encode(text, true)).unwrap(), text);
        assert_eq!(decode(&encode(text, false)).unwrap(), text);
    }
}
