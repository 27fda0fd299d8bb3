//! Byte-level vocabulary: 256 byte values plus BOS/EOS/PAD.

pub const BOS: u32 = 256;
pub const EOS: u32 = 257;
pub const PAD: u32 = 258;
pub const VOCAB_SIZE: usize = 259;

/// Text to byte ids (no specials added).
pub fn encode_text(s: &str) -> Vec<u32> {
    s.bytes().map(|b| b as u32).collect()
}

/// Byte ids back to text; non-byte ids (BOS/EOS/PAD) are skipped and
/// invalid UTF-8 is replaced.
pub fn decode_bytes(ids: &[u32]) -> String {
    let bytes: Vec<u8> = ids
        .iter()
        .filter(|&&id| id < 256)
        .map(|&id| id as u8)
        .collect();
    String::from_utf8_lossy(&bytes).into_owned()
}
