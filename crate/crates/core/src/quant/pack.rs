//! 4-bit code packing.
//!
//! Two codes per byte, low nibble first (even element index in the low
//! nibble). An odd trailing code is padded with a zero nibble. This layout is
//! part of the checkpoint format contract and must stay bit-exact.

/// Packs 4-bit codes (each `< 16`) into bytes, low nibble first.
pub fn pack_nibbles(codes: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(codes.len().div_ceil(2));
    for pair in codes.chunks(2) {
        debug_assert!(pair.iter().all(|&c| c < 16), "code out of 4-bit range");
        let lo = pair[0] & 0x0F;
        let hi = if pair.len() == 2 { pair[1] & 0x0F } else { 0 };
        out.push(lo | (hi << 4));
    }
    out
}

/// Unpacks `count` 4-bit codes from packed bytes.
pub fn unpack_nibbles(bytes: &[u8], count: usize) -> Vec<u8> {
    debug_assert!(count.div_ceil(2) <= bytes.len(), "not enough packed bytes");
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let b = bytes[i / 2];
        out.push(if i % 2 == 0 { b & 0x0F } else { b >> 4 });
    }
    out
}
