use std::ops::Range;

#[derive(Clone, Copy, PartialEq, Eq)]
enum Class {
    Letter,
    Digit,
    Space,
    Punct,
}

fn class(b: u8) -> Class {
    match b {
        b'a'..=b'z' | b'A'..=b'Z' | b'_' | 0x80..=0xff => Class::Letter,
        b'0'..=b'9' => Class::Digit,
        b' ' | b'\t' | b'\n' | b'\r' | 0x0b | 0x0c => Class::Space,
        _ => Class::Punct,
    }
}

/// Splits raw bytes into pre-token chunks. BPE merges never cross a chunk
/// boundary.
///
/// A chunk is a run of letters, digits or punctuation, optionally preceded by
/// a single space, or a run of whitespace. A whitespace run that is followed
/// by a non-space byte gives up its final `' '` to the next chunk.
pub fn pre_tokenize(text: &[u8]) -> Vec<Range<usize>> {
    let mut chunks = Vec::new();
    let n = text.len();
    let mut i = 0;
    while i < n {
        let start = i;
        let c = class(text[i]);
        if c == Class::Space {
            if text[i] == b' ' && i + 1 < n && class(text[i + 1]) != Class::Space {
                let run = class(text[i + 1]);
                i += 1;
                while i < n && class(text[i]) == run {
                    i += 1;
                }
            } else {
                while i < n && class(text[i]) == Class::Space {
                    i += 1;
                }
                if i < n && i - start > 1 && text[i - 1] == b' ' {
                    i -= 1;
                }
            }
        } else {
            while i < n && class(text[i]) == c {
                i += 1;
            }
        }
        chunks.push(start..i);
    }
    chunks
}
