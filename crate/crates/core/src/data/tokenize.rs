use serde::{Deserialize, Serialize};

/// A lowercased token and the character span (`start..end`, in Unicode scalar
/// values) it occupies in the source text.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Token {
    pub text: String,
    pub start: usize,
    pub end: usize,
}

fn is_punct(c: char) -> bool {
    !c.is_alphanumeric() && !c.is_whitespace()
}

/// Splits on whitespace, then peels leading and trailing punctuation off each
/// chunk as single-character tokens. Punctuation inside a chunk stays put, so
/// `11:28`, `10-7` and `gano's` survive as one token.
pub fn tokenize(text: &str) -> Vec<Token> {
    let chars: Vec<char> = text.chars().collect();
    let mut tokens = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        if chars[i].is_whitespace() {
            i += 1;
            continue;
        }
        let chunk_start = i;
        while i < chars.len() && !chars[i].is_whitespace() {
            i += 1;
        }
        push_chunk(&chars, chunk_start, i, &mut tokens);
    }
    tokens
}

fn push_chunk(chars: &[char], start: usize, end: usize, out: &mut Vec<Token>) {
    let mut lo = start;
    let mut hi = end;
    while lo < hi && is_punct(chars[lo]) {
        lo += 1;
    }
    while hi > lo && is_punct(chars[hi - 1]) {
        hi -= 1;
    }
    let single = |i: usize| Token {
        text: chars[i].to_lowercase().collect(),
        start: i,
        end: i + 1,
    };
    out.extend((start..lo).map(single));
    if lo < hi {
        out.push(Token {
            text: chars[lo..hi].iter().collect::<String>().to_lowercase(),
            start: lo,
            end: hi,
        });
    }
    out.extend((hi..end).map(single));
}

/// Substring of `text` covering characters `start..end`.
pub fn char_slice(text: &str, start: usize, end: usize) -> &str {
    let mut indices = text.char_indices().map(|(b, _)| b).chain(std::iter::once(text.len()));
    let from = indices.nth(start).unwrap_or(text.len());
    let to = if end > start {
        indices.nth(end - start - 1).unwrap_or(text.len())
    } else {
        from
    };
    &text[from..to]
}
