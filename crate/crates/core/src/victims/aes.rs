//! Byte-oriented AES-128 with the SubBytes table indices exposed, so the
//! victim can emit one memory access per table lookup.

pub const ROUNDS: usize = 10;

#[rustfmt::skip]
pub const SBOX: [u8; 256] = [
    0x63, 0x7c, 0x77, 0x7b, 0xf2, 0x6b, 0x6f, 0xc5, 0x30, 0x01, 0x67, 0x2b, 0xfe, 0xd7, 0xab, 0x76,
    0xca, 0x82, 0xc9, 0x7d, 0xfa, 0x59, 0x47, 0xf0, 0xad, 0xd4, 0xa2, 0xaf, 0x9c, 0xa4, 0x72, 0xc0,
    0xb7, 0xfd, 0x93, 0x26, 0x36, 0x3f, 0xf7, 0xcc, 0x34, 0xa5, 0xe5, 0xf1, 0x71, 0xd8, 0x31, 0x15,
    0x04, 0xc7, 0x23, 0xc3, 0x18, 0x96, 0x05, 0x9a, 0x07, 0x12, 0x80, 0xe2, 0xeb, 0x27, 0xb2, 0x75,
    0x09, 0x83, 0x2c, 0x1a, 0x1b, 0x6e, 0x5a, 0xa0, 0x52, 0x3b, 0xd6, 0xb3, 0x29, 0xe3, 0x2f, 0x84,
    0x53, 0xd1, 0x00, 0xed, 0x20, 0xfc, 0xb1, 0x5b, 0x6a, 0xcb, 0xbe, 0x39, 0x4a, 0x4c, 0x58, 0xcf,
    0xd0, 0xef, 0xaa, 0xfb, 0x43, 0x4d, 0x33, 0x85, 0x45, 0xf9, 0x02, 0x7f, 0x50, 0x3c, 0x9f, 0xa8,
    0x51, 0xa3, 0x40, 0x8f, 0x92, 0x9d, 0x38, 0xf5, 0xbc, 0xb6, 0xda, 0x21, 0x10, 0xff, 0xf3, 0xd2,
    0xcd, 0x0c, 0x13, 0xec, 0x5f, 0x97, 0x44, 0x17, 0xc4, 0xa7, 0x7e, 0x3d, 0x64, 0x5d, 0x19, 0x73,
    0x60, 0x81, 0x4f, 0xdc, 0x22, 0x2a, 0x90, 0x88, 0x46, 0xee, 0xb8, 0x14, 0xde, 0x5e, 0x0b, 0xdb,
    0xe0, 0x32, 0x3a, 0x0a, 0x49, 0x06, 0x24, 0x5c, 0xc2, 0xd3, 0xac, 0x62, 0x91, 0x95, 0xe4, 0x79,
    0xe7, 0xc8, 0x37, 0x6d, 0x8d, 0xd5, 0x4e, 0xa9, 0x6c, 0x56, 0xf4, 0xea, 0x65, 0x7a, 0xae, 0x08,
    0xba, 0x78, 0x25, 0x2e, 0x1c, 0xa6, 0xb4, 0xc6, 0xe8, 0xdd, 0x74, 0x1f, 0x4b, 0xbd, 0x8b, 0x8a,
    0x70, 0x3e, 0xb5, 0x66, 0x48, 0x03, 0xf6, 0x0e, 0x61, 0x35, 0x57, 0xb9, 0x86, 0xc1, 0x1d, 0x9e,
    0xe1, 0xf8, 0x98, 0x11, 0x69, 0xd9, 0x8e, 0x94, 0x9b, 0x1e, 0x87, 0xe9, 0xce, 0x55, 0x28, 0xdf,
    0x8c, 0xa1, 0x89, 0x0d, 0xbf, 0xe6, 0x42, 0x68, 0x41, 0x99, 0x2d, 0x0f, 0xb0, 0x54, 0xbb, 0x16,
];

const RCON: [u8; 10] = [0x01, 0x02, 0x04, 0x08, 0x10, 0x20, 0x40, 0x80, 0x1b, 0x36];

pub type Block = [u8; 16];
pub type RoundKeys = [[u8; 16]; ROUNDS + 1];

pub fn expand_key(key: &Block) -> RoundKeys {
    let mut w = [[0u8; 4]; 44];
    for i in 0..4 {
        w[i].copy_from_slice(&key[4 * i..4 * i + 4]);
    }
    for i in 4..44 {
        let mut t = w[i - 1];
        if i % 4 == 0 {
            t = [SBOX[t[1] as usize], SBOX[t[2] as usize], SBOX[t[3] as usize], SBOX[t[0] as usize]];
            t[0] ^= RCON[i / 4 - 1];
        }
        for j in 0..4 {
            w[i][j] = w[i - 4][j] ^ t[j];
        }
    }
    let mut rk = [[0u8; 16]; ROUNDS + 1];
    for (r, k) in rk.iter_mut().enumerate() {
        for c in 0..4 {
            k[4 * c..4 * c + 4].copy_from_slice(&w[4 * r + c]);
        }
    }
    rk
}

/// Inverts the key schedule from the last round key back to the cipher key.
pub fn master_key_from_last_round(last: &Block) -> Block {
    let mut w = [[0u8; 4]; 44];
    for c in 0..4 {
        w[40 + c].copy_from_slice(&last[4 * c..4 * c + 4]);
    }
    for i in (4..44).rev() {
        let mut t = w[i - 1];
        if i % 4 == 0 {
            t = [SBOX[t[1] as usize], SBOX[t[2] as usize], SBOX[t[3] as usize], SBOX[t[0] as usize]];
            t[0] ^= RCON[i / 4 - 1];
        }
        for j in 0..4 {
            w[i - 4][j] = w[i][j] ^ t[j];
        }
    }
    let mut key = [0u8; 16];
    for c in 0..4 {
        key[4 * c..4 * c + 4].copy_from_slice(&w[c]);
    }
    key
}

fn xtime(b: u8) -> u8 {
    (b << 1) ^ if b & 0x80 != 0 { 0x1b } else { 0 }
}

fn shift_rows(s: &mut Block) {
    let t = *s;
    for c in 0..4 {
        for r in 0..4 {
            s[4 * c + r] = t[4 * ((c + r) % 4) + r];
        }
    }
}

fn mix_columns(s: &mut Block) {
    for c in 0..4 {
        let col = [s[4 * c], s[4 * c + 1], s[4 * c + 2], s[4 * c + 3]];
        let all = col[0] ^ col[1] ^ col[2] ^ col[3];
        for r in 0..4 {
            s[4 * c + r] = col[r] ^ all ^ xtime(col[r] ^ col[(r + 1) % 4]);
        }
    }
}

fn add_round_key(s: &mut Block, k: &Block) {
    for (b, k) in s.iter_mut().zip(k) {
        *b ^= k;
    }
}

/// Ciphertext plus the 16 SubBytes table indices of every round, in
/// lookup order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TracedEncryption {
    pub ciphertext: Block,
    pub lookups: [[u8; 16]; ROUNDS],
}

pub fn encrypt_traced(rk: &RoundKeys, plaintext: &Block) -> TracedEncryption {
    let mut s = *plaintext;
    let mut lookups = [[0u8; 16]; ROUNDS];
    add_round_key(&mut s, &rk[0]);
    for round in 1..=ROUNDS {
        lookups[round - 1] = s;
        for b in s.iter_mut() {
            *b = SBOX[*b as usize];
        }
        shift_rows(&mut s);
        if round != ROUNDS {
            mix_columns(&mut s);
        }
        add_round_key(&mut s, &rk[round]);
    }
    TracedEncryption { ciphertext: s, lookups }
}

pub fn encrypt(key: &Block, plaintext: &Block) -> Block {
    encrypt_traced(&expand_key(key), plaintext).ciphertext
}

/// Position in the ciphertext of the byte produced by the `i`-th lookup of
/// the last round (ShiftRows moves bytes between columns).
pub fn last_round_output_position(lookup: usize) -> usize {
    let (c, r) = (lookup / 4, lookup % 4);
    4 * ((c + 4 - r) % 4) + r
}

pub fn parse_block(hex: &str) -> Option<Block> {
    let hex = hex.trim();
    if hex.len() != 32 {
        return None;
    }
    let mut out = [0u8; 16];
    for (i, b) in out.iter_mut().enumerate() {
        *b = u8::from_str_radix(hex.get(2 * i..2 * i + 2)?, 16).ok()?;
    }
    Some(out)
}

pub fn to_hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    /// SubBytes computed from the field inverse and the affine map.
    fn sbox_oracle(x: u8) -> u8 {
        fn mul(mut a: u8, mut b: u8) -> u8 {
            let mut p = 0;
            while b != 0 {
                if b & 1 != 0 {
                    p ^= a;
                }
                a = xtime(a);
                b >>= 1;
            }
            p
        }
        let inv = if x == 0 { 0 } else { (1..=255u8).find(|&y| mul(x, y) == 1).unwrap() };
        let mut out = 0x63;
        for i in 0..8 {
            let bit = (inv >> i) ^ (inv >> ((i + 4) % 8)) ^ (inv >> ((i + 5) % 8)) ^ (inv >> ((i + 6) % 8)) ^ (inv >> ((i + 7) % 8));
            out ^= (bit & 1) << i;
        }
        out
    }

    #[test]
    fn sbox_table_matches_field_construction() {
        for x in 0..=255u8 {
            assert_eq!(SBOX[x as usize], sbox_oracle(x), "x = {x:#04x}");
        }
    }

    #[test]
    fn fips197_appendix_c1() {
        let key = parse_block("000102030405060708090a0b0c0d0e0f").unwrap();
        let pt = parse_block("00112233445566778899aabbccddeeff").unwrap();
        assert_eq!(to_hex(&encrypt(&key, &pt)), "69c4e0d86a7b0430d8cdb78070b4c55a");
    }

    #[test]
    fn key_schedule_inverts() {
        let key = parse_block("2b7e151628aed2a6abf7158809cf4f3c").unwrap();
        let rk = expand_key(&key);
        assert_eq!(to_hex(&rk[10]), "d014f9a8c9ee2589e13f0cc8b6630ca6");
        assert_eq!(master_key_from_last_round(&rk[10]), key);
    }

    #[test]
    fn last_round_positions_follow_shift_rows() {
        let key = parse_block("2b7e151628aed2a6abf7158809cf4f3c").unwrap();
        let rk = expand_key(&key);
        let pt = parse_block("3243f6a8885a308d313198a2e0370734").unwrap();
        let t = encrypt_traced(&rk, &pt);
        for i in 0..16 {
            let pos = last_round_output_position(i);
            assert_eq!(t.ciphertext[pos], SBOX[t.lookups[9][i] as usize] ^ rk[10][pos]);
        }
    }
}
