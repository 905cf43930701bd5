//! Closed word-level vocabulary with character-wise numbers.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::scene::Category;
use crate::{GeodeError, Result};

pub const PAD: &str = "<pad>";
pub const BOS: &str = "<bos>";
pub const EOS: &str = "<eos>";
pub const REG: &str = "<REG>";
pub const BBOX: &str = "<3DBBOX>";
pub const CONTROL_TOKENS: [&str; 2] = [REG, BBOX];

const NUMERIC: [&str; 12] = ["0", "1", "2", "3", "4", "5", "6", "7", "8", "9", ".", "-"];

/// Every template word other than category names.
const WORDS: &[&str] = &[
    ";", ",", "?", "A", "B", "C", "D", "ahead", "and", "answer", "appears", "are", "area", "at",
    "behind", "between", "by", "center", "closer", "depth", "dimension", "distance", "dx", "dy",
    "dz", "earliest", "first", "floor", "frame", "from", "front", "height", "how", "in", "is",
    "left", "longest", "many", "meters", "object", "objects", "of", "offset", "relative", "right",
    "room", "seen", "size", "the", "times", "to", "total", "video", "view", "what", "where",
    "which", "width", "yaw",
];

#[derive(Clone, Debug, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

fn is_numeric_char(c: char) -> bool {
    c.is_ascii_digit() || c == '.' || c == '-'
}

impl Vocab {
    /// Vocabulary without control tokens, used for LM pretraining.
    pub fn base() -> Self {
        let mut words: Vec<String> = WORDS.iter().map(|w| w.to_string()).collect();
        words.extend(Category::ALL.iter().map(|c| c.name().to_string()));
        words.sort();
        words.dedup();
        let mut tokens: Vec<String> = [PAD, BOS, EOS].iter().map(|s| s.to_string()).collect();
        tokens.extend(NUMERIC.iter().map(|s| s.to_string()));
        tokens.extend(words);
        Self::from_tokens(tokens).expect("built-in vocabulary is bijective")
    }

    /// Base vocabulary followed by the control tokens.
    pub fn extended() -> Self {
        Self::base().with_control_tokens()
    }

    pub fn with_control_tokens(&self) -> Self {
        let mut tokens = self.tokens.clone();
        for t in CONTROL_TOKENS {
            if !self.index.contains_key(t) {
                tokens.push(t.to_string());
            }
        }
        Self::from_tokens(tokens).expect("control tokens are new")
    }

    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(GeodeError::Dataset(format!("duplicate vocabulary token `{t}`")));
            }
        }
        for t in [PAD, BOS, EOS] {
            if !index.contains_key(t) {
                return Err(GeodeError::Dataset(format!("vocabulary lacks `{t}`")));
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn pad(&self) -> usize {
        self.index[PAD]
    }

    pub fn bos(&self) -> usize {
        self.index[BOS]
    }

    pub fn eos(&self) -> usize {
        self.index[EOS]
    }

    pub fn reg(&self) -> Option<usize> {
        self.id(REG)
    }

    pub fn bbox(&self) -> Option<usize> {
        self.id(BBOX)
    }

    pub fn is_control(&self, id: usize) -> bool {
        Some(id) == self.reg() || Some(id) == self.bbox()
    }

    pub fn tokenize(&self, text: &str) -> Result<Vec<usize>> {
        let mut ids = Vec::new();
        let mut oov: Vec<String> = Vec::new();
        for word in text.split_whitespace() {
            if let Some(id) = self.id(word) {
                ids.push(id);
            } else if word.chars().all(is_numeric_char) {
                ids.extend(word.chars().map(|c| self.index[c.to_string().as_str()]));
            } else if !oov.iter().any(|w| w == word) {
                oov.push(word.to_string());
            }
        }
        if oov.is_empty() {
            Ok(ids)
        } else {
            Err(GeodeError::Vocab(oov))
        }
    }

    /// Space-joined tokens with consecutive numeric characters glued together.
    /// Padding and sequence markers are dropped.
    pub fn detokenize(&self, ids: &[usize]) -> String {
        let mut out = String::new();
        let mut prev_numeric = false;
        for &id in ids {
            let Some(tok) = self.token(id) else { continue };
            if [PAD, BOS, EOS].contains(&tok) {
                prev_numeric = false;
                continue;
            }
            let numeric = tok.len() == 1 && tok.chars().all(is_numeric_char);
            if !out.is_empty() && !(numeric && prev_numeric) {
                out.push(' ');
            }
            out.push_str(tok);
            prev_numeric = numeric;
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut text = self.tokens.join("\n");
        text.push('\n');
        fs::write(path, text).map_err(|e| GeodeError::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| GeodeError::io(path, e))?;
        Self::from_tokens(text.lines().map(str::to_string).collect())
    }
}

/// Parses a number spelled as digit tokens, tolerating spaces between them.
pub fn parse_number(text: &str) -> Option<f64> {
    let glued: String = text.chars().filter(|c| !c.is_whitespace()).collect();
    if glued.is_empty() || !glued.chars().all(is_numeric_char) {
        return None;
    }
    glued.parse().ok().filter(|v: &f64| v.is_finite())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_and_control_tokens() {
        let v = Vocab::extended();
        assert_eq!(v.id(PAD), Some(0));
        assert_eq!(v.id("0"), Some(3));
        assert_eq!(v.id("-"), Some(14));
        assert_eq!(v.id(BBOX), Some(v.len() - 1));
        assert_eq!(v.id(REG), Some(v.len() - 2));
        assert!(Vocab::base().reg().is_none());
        assert_eq!(v.with_control_tokens(), v);
    }

    #[test]
    fn round_trip() {
        let v = Vocab::base();
        let t = "the distance is 5.0 meters";
        let ids = v.tokenize(t).unwrap();
        assert_eq!(ids.len(), 7);
        assert_eq!(v.detokenize(&ids), t);
        assert!(v.tokenize("").unwrap().is_empty());
        assert_eq!(v.detokenize(&[]), "");
    }

    #[test]
    fn oov_lists_words() {
        let err = Vocab::base().tokenize("the zebra and the yak and the zebra").unwrap_err();
        assert_eq!(err.to_string(), "out-of-vocabulary words: zebra, yak");
    }

    #[test]
    fn digit_parser() {
        assert_eq!(parse_number("5 . 0"), Some(5.0));
        assert_eq!(parse_number("1 2 . 5"), Some(12.5));
        assert_eq!(parse_number("- 0 . 3 5"), Some(-0.35));
        assert_eq!(parse_number("5 . ."), None);
        assert_eq!(parse_number("chair"), None);
        assert_eq!(parse_number(""), None);
    }
}
