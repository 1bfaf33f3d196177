//! Byte-level caption tokenizer: ids 0..=255 are raw bytes, then BOS/EOS/PAD.

pub const BOS: u32 = 256;
pub const EOS: u32 = 257;
pub const PAD: u32 = 258;
pub const VOCAB_SIZE: usize = 259;
pub const MAX_LEN: usize = 64;

/// `[BOS, bytes.., EOS]`, keeping at most `MAX_LEN - 2` bytes.
pub fn tokenize(text: &str) -> Vec<u32> {
    tokenize_bytes(text.as_bytes(), MAX_LEN)
}

pub fn tokenize_bytes(bytes: &[u8], max_len: usize) -> Vec<u32> {
    assert!(max_len >= 2, "max_len must leave room for BOS and EOS");
    let keep = bytes.len().min(max_len - 2);
    let mut ids = Vec::with_capacity(keep + 2);
    ids.push(BOS);
    ids.extend(bytes[..keep].iter().map(|&b| b as u32));
    ids.push(EOS);
    ids
}

/// Raw bytes up to the first EOS; BOS and PAD are skipped.
pub fn detokenize_bytes(ids: &[u32]) -> Vec<u8> {
    ids.iter()
        .take_while(|&&i| i != EOS)
        .filter(|&&i| i < 256)
        .map(|&i| i as u8)
        .collect()
}

pub fn detokenize(ids: &[u32]) -> String {
    String::from_utf8_lossy(&detokenize_bytes(ids)).into_owned()
}

/// Right-pads with PAD (or truncates) to exactly `len` ids.
pub fn pad_to(ids: &[u32], len: usize) -> Vec<u32> {
    let mut out: Vec<u32> = ids.iter().copied().take(len).collect();
    out.resize(len, PAD);
    out
}
