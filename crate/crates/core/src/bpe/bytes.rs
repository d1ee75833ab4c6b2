//! Byte ↔ printable-char table used by byte-level BPE.
//!
//! This is the GPT-2 remap: printable Latin-1 bytes map to themselves and the
//! remaining 68 bytes are shifted to U+0100 onwards, in byte order. Published
//! byte-level tokenizer files store their vocabularies in this alphabet.

use std::collections::HashMap;
use std::sync::OnceLock;

#[derive(Debug)]
pub struct ByteTable {
    to_char: [char; 256],
    to_byte: HashMap<char, u8>,
}

impl ByteTable {
    fn build() -> Self {
        let mut printable = [false; 256];
        for b in (b'!'..=b'~').chain(0xA1..=0xAC).chain(0xAE..=0xFF) {
            printable[b as usize] = true;
        }
        let mut to_char = ['\0'; 256];
        let mut shift = 0u32;
        for b in 0..256usize {
            to_char[b] = if printable[b] {
                char::from_u32(b as u32).unwrap()
            } else {
                let c = char::from_u32(256 + shift).unwrap();
                shift += 1;
                c
            };
        }
        let to_byte = to_char
            .iter()
            .enumerate()
            .map(|(b, &c)| (c, b as u8))
            .collect();
        ByteTable { to_char, to_byte }
    }

    pub fn char_of(&self, byte: u8) -> char {
        self.to_char[byte as usize]
    }

    pub fn byte_of(&self, c: char) -> Option<u8> {
        self.to_byte.get(&c).copied()
    }

    /// Render raw bytes in the printable alphabet.
    pub fn encode(&self, bytes: &[u8]) -> String {
        bytes.iter().map(|&b| self.char_of(b)).collect()
    }

    /// Invert [`ByteTable::encode`]; `None` if a char is outside the table.
    pub fn decode(&self, s: &str) -> Option<Vec<u8>> {
        s.chars().map(|c| self.byte_of(c)).collect()
    }
}

pub fn byte_table() -> &'static ByteTable {
    static TABLE: OnceLock<ByteTable> = OnceLock::new();
    TABLE.get_or_init(ByteTable::build)
}
