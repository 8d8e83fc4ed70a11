//! Word-level tokenizer with byte fallback and reserved ids for the answer
//! words and feature slots.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::dataset::{Slot, FEATURE_CLOSE, FEATURE_OPEN};
use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const YES: u32 = 3;
pub const NO: u32 = 4;
pub const USER_SLOT: u32 = 5;
pub const ITEM_SLOT: u32 = 6;
const BYTE_BASE: u32 = 7;
pub const FIRST_WORD: u32 = BYTE_BASE + 256;

const VOCAB_HEADER: &str = "# thinkrec-vocab v1";

/// Token ids plus the positions that hold feature slots.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Encoding {
    pub ids: Vec<u32>,
    pub slots: Vec<(usize, Slot)>,
}

impl Encoding {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn extend(&mut self, other: &Encoding) {
        let offset = self.ids.len();
        self.ids.extend_from_slice(&other.ids);
        self.slots
            .extend(other.slots.iter().map(|&(p, s)| (p + offset, s)));
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Piece<'a> {
    Word(&'a str),
    Symbol(&'a str),
    Slot(Slot),
}

/// Splits text into alphanumeric words, single symbols and slots.
fn pieces(text: &str) -> Vec<Piece<'_>> {
    let mut out = Vec::new();
    let mut iter = text.char_indices().peekable();
    while let Some((start, c)) = iter.next() {
        if c.is_whitespace() {
            continue;
        }
        if c == FEATURE_OPEN {
            let rest = &text[start + c.len_utf8()..];
            if let Some(close) = rest.find(FEATURE_CLOSE) {
                if let Some(slot) = Slot::parse_inner(&rest[..close]) {
                    let end = start + c.len_utf8() + close + FEATURE_CLOSE.len_utf8();
                    while iter.peek().is_some_and(|&(i, _)| i < end) {
                        iter.next();
                    }
                    out.push(Piece::Slot(slot));
                    continue;
                }
            }
        }
        if c.is_alphanumeric() {
            let mut end = start + c.len_utf8();
            while let Some(&(i, n)) = iter.peek() {
                if !n.is_alphanumeric() {
                    break;
                }
                end = i + n.len_utf8();
                iter.next();
            }
            out.push(Piece::Word(&text[start..end]));
        } else {
            out.push(Piece::Symbol(&text[start..start + c.len_utf8()]));
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tokenizer {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Tokenizer {
    fn reserved() -> Vec<String> {
        let mut tokens: Vec<String> = ["<pad>", "<bos>", "<eos>", "Yes", "No", "<user>", "<item>"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        tokens.extend((0..=255u8).map(|b| format!("<0x{b:02X}>")));
        tokens
    }

    fn from_words(words: Vec<String>) -> Self {
        let mut tokens = Self::reserved();
        tokens.extend(words);
        let index = tokens
            .iter()
            .enumerate()
            .skip(FIRST_WORD as usize)
            .map(|(n, t)| (t.clone(), n as u32))
            .collect();
        Self { tokens, index }
    }

    /// Vocabulary of the most frequent lowercased words and symbols in
    /// `texts`, capped at `max_vocab` total ids including the reserved block.
    pub fn build<'a, I: IntoIterator<Item = &'a str>>(
        texts: I,
        max_vocab: usize,
        min_count: usize,
    ) -> Self {
        let mut counts: HashMap<String, usize> = HashMap::new();
        for text in texts {
            for piece in pieces(text) {
                let key = match piece {
                    Piece::Word("Yes") | Piece::Word("No") | Piece::Slot(_) => continue,
                    Piece::Word(w) => w.to_lowercase(),
                    Piece::Symbol(s) => s.to_string(),
                };
                *counts.entry(key).or_default() += 1;
            }
        }
        let mut ranked: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(_, c)| *c >= min_count.max(1))
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let room = max_vocab.saturating_sub(FIRST_WORD as usize);
        Self::from_words(ranked.into_iter().take(room).map(|(w, _)| w).collect())
    }

    pub fn vocab_size(&self) -> usize {
        self.tokens.len()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn id_of(&self, word: &str) -> Option<u32> {
        match word {
            "Yes" => Some(YES),
            "No" => Some(NO),
            w => self.index.get(w).copied(),
        }
    }

    /// Lowercased word ids, `Yes`/`No` as reserved ids, slots as slot ids and
    /// anything outside the vocabulary as UTF-8 bytes. A byte-encoded word that
    /// directly follows another gets a leading space byte so decoding keeps
    /// the words apart.
    pub fn encode(&self, text: &str) -> Encoding {
        let mut enc = Encoding::default();
        let mut last_was_bytes = false;
        for piece in pieces(text) {
            let is_word = matches!(piece, Piece::Word(_));
            let (known, fallback) = match piece {
                Piece::Slot(slot) => {
                    enc.slots.push((enc.ids.len(), slot));
                    enc.ids.push(match slot {
                        Slot::User(_) => USER_SLOT,
                        Slot::Item(_) => ITEM_SLOT,
                    });
                    last_was_bytes = false;
                    continue;
                }
                Piece::Word("Yes") => (Some(YES), String::new()),
                Piece::Word("No") => (Some(NO), String::new()),
                Piece::Word(w) => {
                    let lw = w.to_lowercase();
                    (self.index.get(&lw).copied(), lw)
                }
                Piece::Symbol(s) => (self.index.get(s).copied(), s.to_string()),
            };
            match known {
                Some(id) => {
                    enc.ids.push(id);
                    last_was_bytes = false;
                }
                None => {
                    if last_was_bytes && is_word {
                        enc.ids.push(BYTE_BASE + u32::from(b' '));
                    }
                    enc.ids
                        .extend(fallback.bytes().map(|b| BYTE_BASE + u32::from(b)));
                    last_was_bytes = is_word;
                }
            }
        }
        enc
    }

    /// Inverse of [`encode`](Self::encode) up to whitespace and case: pieces
    /// are joined by single spaces, except around attaching punctuation.
    /// Special tokens other than `Yes`/`No` are dropped.
    pub fn decode(&self, ids: &[u32]) -> String {
        let mut pieces: Vec<String> = Vec::new();
        let mut bytes: Vec<u8> = Vec::new();
        let flush = |bytes: &mut Vec<u8>, pieces: &mut Vec<String>| {
            if !bytes.is_empty() {
                pieces.push(String::from_utf8_lossy(bytes).into_owned());
                bytes.clear();
            }
        };
        for &id in ids {
            if (BYTE_BASE..FIRST_WORD).contains(&id) {
                bytes.push((id - BYTE_BASE) as u8);
                continue;
            }
            flush(&mut bytes, &mut pieces);
            match id {
                PAD | BOS | EOS | USER_SLOT | ITEM_SLOT => {}
                _ => {
                    if let Some(tok) = self.token(id) {
                        pieces.push(tok.to_string());
                    }
                }
            }
        }
        flush(&mut bytes, &mut pieces);

        let mut out = String::new();
        let mut glue_next = true;
        for p in &pieces {
            let attaches_left = p.starts_with(['.', ',', ';', ':', '!', '?', ')', '\'']);
            if !glue_next && !attaches_left {
                out.push(' ');
            }
            out.push_str(p);
            glue_next = p.ends_with(['(', '\'']);
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = format!("{VOCAB_HEADER}\n");
        for tok in &self.tokens[FIRST_WORD as usize..] {
            text.push_str(tok);
            text.push('\n');
        }
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|_| {
            Error::Prerequisite(format!("vocabulary file {} is missing", path.display()))
        })?;
        let mut lines = text.lines();
        if lines.next() != Some(VOCAB_HEADER) {
            return Err(Error::Format(format!(
                "{}: unsupported vocabulary header",
                path.display()
            )));
        }
        Ok(Self::from_words(lines.map(str::to_string).collect()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tok() -> Tokenizer {
        Tokenizer::build(
            ["the user liked dune (label: yes) with description: desert, spice."],
            1000,
            1,
        )
    }

    #[test]
    fn reserved_answer_tokens() {
        let t = tok();
        assert_eq!(t.encode("Yes").ids, vec![YES]);
        assert_eq!(t.encode("No").ids, vec![NO]);
        assert_eq!(t.decode(&[YES]), "Yes");
        assert!(t.encode("").is_empty());
        // lowercase "yes" is an ordinary word
        assert_ne!(t.encode("yes").ids, vec![YES]);
    }

    #[test]
    fn slots_become_reserved_ids() {
        let t = tok();
        let enc = t.encode("dune with feature \u{3008}FEAT:12\u{3009} and \u{3008}USER:3\u{3009}.");
        let feat = enc.ids.iter().position(|&i| i == ITEM_SLOT).unwrap();
        let user = enc.ids.iter().position(|&i| i == USER_SLOT).unwrap();
        assert_eq!(
            enc.slots,
            vec![(feat, Slot::Item(12)), (user, Slot::User(3))]
        );
        // malformed slots are plain text
        let enc = t.encode("\u{3008}FEAT:x\u{3009}");
        assert!(enc.slots.is_empty());
        assert!(!enc.ids.contains(&ITEM_SLOT));
    }

    #[test]
    fn byte_fallback_round_trips_unknown_words() {
        let t = tok();
        let enc = t.encode("zyzzyva quokka dune");
        assert!(enc
            .ids
            .iter()
            .any(|&i| (BYTE_BASE..FIRST_WORD).contains(&i)));
        assert_eq!(t.decode(&enc.ids), "zyzzyva quokka dune");
        assert_eq!(t.decode(&t.encode("naïve café").ids), "naïve café");
    }

    #[test]
    fn thousand_word_round_trip() {
        let words: Vec<String> = (0..1000)
            .map(|n| {
                let mut s = String::new();
                let mut x = n + 1;
                while x > 0 {
                    s.push((b'a' + (x % 26) as u8) as char);
                    x /= 26;
                }
                format!("w{s}")
            })
            .collect();
        let corpus = words.join(" ");
        let t = Tokenizer::build([corpus.as_str()], 5000, 1);
        for w in &words {
            let enc = t.encode(w);
            assert_eq!(enc.ids.len(), 1, "{w} should be a single token");
            assert_eq!(t.decode(&enc.ids), *w);
        }
    }

    #[test]
    fn punctuation_spacing() {
        let t = tok();
        let text = "dune (label: yes) with description: desert, spice.";
        assert_eq!(t.decode(&t.encode(text).ids), text);
        assert_eq!(
            t.decode(&t.encode("Yes. the user's taste").ids),
            "Yes. the user's taste"
        );
    }

    #[test]
    fn deterministic_build_and_save_load() {
        let a = tok();
        let b = tok();
        assert_eq!(a, b);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        a.save(&path).unwrap();
        assert_eq!(Tokenizer::load(&path).unwrap(), a);
    }

    #[test]
    fn vocab_cap_is_respected() {
        let t = Tokenizer::build(["a b c d e f g h"], FIRST_WORD as usize + 3, 1);
        assert_eq!(t.vocab_size(), FIRST_WORD as usize + 3);
    }
}
