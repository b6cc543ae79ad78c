//! Solidity tokenizer and vocabulary.
//!
//! The tokenizer is deliberately shallow: it recognises comments, string and
//! numeric literals, identifiers and operator symbols, and nothing of the
//! grammar. Every token keeps the byte span it came from so attribution can
//! highlight the original text.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::Corpus;

pub const NUM_TOKEN: &str = "<NUM>";
pub const STR_TOKEN: &str = "<STR>";
pub const PAD_TOKEN: &str = "<PAD>";
pub const UNK_TOKEN: &str = "<UNK>";
pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;

/// Multi-character operators, longest first so the first match is the
/// maximal munch.
const OPERATORS: &[&str] = &[
    ">>>=", ">>>", "<<=", ">>=", "**", "==", "!=", "<=", ">=", "&&", "||", "++", "--", "+=", "-=",
    "*=", "/=", "%=", "|=", "&=", "^=", "<<", ">>", "=>", "->", ":=",
];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Token {
    pub text: String,
    /// Byte range in the original source.
    pub span: Range<usize>,
}

impl Token {
    /// True when the token is made only of operator or punctuation characters.
    pub fn is_punctuation(&self) -> bool {
        is_punctuation(&self.text)
    }
}

pub fn is_punctuation(text: &str) -> bool {
    !text.is_empty() && text.chars().all(|c| c.is_ascii_punctuation())
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TokenSequence {
    tokens: Vec<Token>,
}

impl TokenSequence {
    pub fn tokens(&self) -> &[Token] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn texts(&self) -> Vec<&str> {
        self.tokens.iter().map(|t| t.text.as_str()).collect()
    }

    pub fn from_texts<S: AsRef<str>>(texts: &[S]) -> Self {
        let mut offset = 0;
        let tokens = texts
            .iter()
            .map(|t| {
                let t = t.as_ref();
                let span = offset..offset + t.len();
                offset += t.len() + 1;
                Token {
                    text: t.to_string(),
                    span,
                }
            })
            .collect();
        TokenSequence { tokens }
    }
}

fn is_ident_start(c: char) -> bool {
    c.is_alphabetic() || c == '_' || c == '$'
}

fn is_ident_continue(c: char) -> bool {
    c.is_alphanumeric() || c == '_' || c == '$'
}

pub fn tokenize(source: &str) -> Result<TokenSequence> {
    let bytes = source.as_bytes();
    let mut tokens = Vec::new();
    let mut pos = 0;
    let char_at = |p: usize| source[p..].chars().next();

    while let Some(c) = char_at(pos) {
        let start = pos;
        if c.is_whitespace() {
            pos += c.len_utf8();
            continue;
        }
        if source[pos..].starts_with("//") {
            pos = source[pos..].find('\n').map_or(source.len(), |i| pos + i);
            continue;
        }
        if source[pos..].starts_with("/*") {
            pos = source[pos + 2..].find("*/").map_or(source.len(), |i| pos + 2 + i + 2);
            continue;
        }
        let text = if c == '"' || c == '\'' {
            pos += 1;
            while pos < bytes.len() {
                let b = bytes[pos];
                if b == b'\\' {
                    pos += 1;
                    if let Some(esc) = char_at(pos) {
                        pos += esc.len_utf8();
                    }
                } else {
                    pos += char_at(pos).map_or(1, char::len_utf8);
                    if b == c as u8 {
                        break;
                    }
                }
            }
            STR_TOKEN.to_string()
        } else if c.is_ascii_digit() {
            pos = scan_number(bytes, pos);
            NUM_TOKEN.to_string()
        } else if is_ident_start(c) {
            pos += c.len_utf8();
            while let Some(n) = char_at(pos) {
                if !is_ident_continue(n) {
                    break;
                }
                pos += n.len_utf8();
            }
            source[start..pos].to_string()
        } else {
            let op = OPERATORS.iter().find(|op| source[pos..].starts_with(**op));
            pos += op.map_or(c.len_utf8(), |op| op.len());
            source[start..pos].to_string()
        };
        tokens.push(Token {
            text,
            span: start..pos,
        });
    }

    if tokens.is_empty() {
        return Err(Error::EmptyAfterNormalization);
    }
    Ok(TokenSequence { tokens })
}

fn scan_number(bytes: &[u8], mut pos: usize) -> usize {
    if bytes[pos] == b'0' && matches!(bytes.get(pos + 1), Some(b'x' | b'X')) {
        pos += 2;
        while pos < bytes.len() && (bytes[pos].is_ascii_hexdigit() || bytes[pos] == b'_') {
            pos += 1;
        }
        return pos;
    }
    let digits = |mut p: usize| {
        while p < bytes.len() && (bytes[p].is_ascii_digit() || bytes[p] == b'_') {
            p += 1;
        }
        p
    };
    pos = digits(pos);
    if bytes.get(pos) == Some(&b'.') && bytes.get(pos + 1).is_some_and(u8::is_ascii_digit) {
        pos = digits(pos + 1);
    }
    if matches!(bytes.get(pos), Some(b'e' | b'E')) {
        let mut p = pos + 1;
        if matches!(bytes.get(p), Some(b'-' | b'+')) {
            p += 1;
        }
        if bytes.get(p).is_some_and(u8::is_ascii_digit) {
            pos = digits(p);
        }
    }
    pos
}

/// Dense token-to-id mapping with `<PAD>` = 0 and `<UNK>` = 1.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, usize>,
}

impl Vocabulary {
    /// Builds a vocabulary from already-ordered tokens (specials are prepended).
    pub fn from_tokens<I, S>(tokens: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut all = vec![PAD_TOKEN.to_string(), UNK_TOKEN.to_string()];
        all.extend(tokens.into_iter().map(Into::into));
        Self::from_id_order(all)
    }

    fn from_id_order(tokens: Vec<String>) -> Result<Self> {
        if tokens.first().map(String::as_str) != Some(PAD_TOKEN)
            || tokens.get(1).map(String::as_str) != Some(UNK_TOKEN)
        {
            return Err(Error::Config("vocabulary must start with <PAD>, <UNK>".into()));
        }
        let mut ids = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if ids.insert(t.clone(), i).is_some() {
                return Err(Error::Config(format!("token `{t}` appears twice in vocabulary")));
            }
        }
        Ok(Vocabulary { tokens, ids })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.ids.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// Tokens in id order.
    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn to_json(&self) -> Result<String> {
        let map: BTreeMap<&str, usize> =
            self.tokens.iter().enumerate().map(|(i, t)| (t.as_str(), i)).collect();
        Ok(serde_json::to_string_pretty(&map)?)
    }

    pub fn from_json(json: &str) -> Result<Self> {
        let map: BTreeMap<String, usize> = serde_json::from_str(json)?;
        let mut tokens = vec![None; map.len()];
        for (t, id) in map {
            match tokens.get_mut(id) {
                Some(slot @ None) => *slot = Some(t),
                _ => return Err(Error::Config(format!("vocabulary ids are not dense (id {id})"))),
            }
        }
        Self::from_id_order(tokens.into_iter().map(Option::unwrap).collect())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

/// Counts tokens over `sequences` and keeps those seen at least `min_freq`
/// times, ordered by descending count then lexicographically.
pub fn vocab_from_sequences<'a, I>(sequences: I, min_freq: usize) -> Result<Vocabulary>
where
    I: IntoIterator<Item = &'a TokenSequence>,
{
    if min_freq == 0 {
        return Err(Error::Config("min_freq must be at least 1".into()));
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for seq in sequences {
        for t in seq.tokens() {
            *counts.entry(t.text.as_str()).or_default() += 1;
        }
    }
    let mut kept: Vec<(&str, usize)> = counts.into_iter().filter(|&(_, n)| n >= min_freq).collect();
    kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    Vocabulary::from_tokens(kept.into_iter().map(|(t, _)| t.to_string()))
}

/// Builds the vocabulary from the (training) corpus.
pub fn build_vocab(train_corpus: &Corpus, min_freq: usize) -> Result<Vocabulary> {
    if train_corpus.is_empty() {
        return Err(Error::Corpus("cannot build a vocabulary from an empty corpus".into()));
    }
    let seqs = train_corpus
        .iter()
        .map(|c| tokenize(&c.source))
        .collect::<Result<Vec<_>>>()?;
    vocab_from_sequences(&seqs, min_freq)
}

pub fn encode(seq: &TokenSequence, vocab: &Vocabulary) -> Vec<usize> {
    seq.tokens()
        .iter()
        .map(|t| vocab.id(&t.text).unwrap_or(UNK_ID))
        .collect()
}
