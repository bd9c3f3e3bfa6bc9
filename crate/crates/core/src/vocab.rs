use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: &str = "<pad>";
pub const SOS: &str = "<s>";
pub const EOS: &str = "</s>";
pub const UNK: &str = "<unk>";
pub const ALIGN: &str = "<align>";

/// Reserved symbols, in id order.
pub const RESERVED: [&str; 5] = [PAD, SOS, EOS, UNK, ALIGN];

/// Token/id bijection shared by sources, drafts and references.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    pub const PAD_ID: usize = 0;
    pub const SOS_ID: usize = 1;
    pub const EOS_ID: usize = 2;
    pub const UNK_ID: usize = 3;
    pub const ALIGN_ID: usize = 4;

    /// Builds a vocabulary from ordinary tokens; reserved symbols are
    /// prepended and duplicates ignored.
    pub fn from_tokens<I, S>(tokens: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut v = Vocabulary {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        for t in RESERVED {
            v.insert(t.to_string());
        }
        for t in tokens {
            v.insert(t.into());
        }
        v
    }

    fn insert(&mut self, token: String) {
        if !self.index.contains_key(&token) {
            self.index.insert(token.clone(), self.tokens.len());
            self.tokens.push(token);
        }
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

    /// Id of `token`, or the UNK id when out of vocabulary.
    pub fn encode(&self, token: &str) -> usize {
        self.id(token).unwrap_or(Self::UNK_ID)
    }

    pub fn encode_all<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        tokens.iter().map(|t| self.encode(t.as_ref())).collect()
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn is_reserved(id: usize) -> bool {
        id < RESERVED.len()
    }

    /// One token per line; the id is the line number.
    pub fn to_text(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let tokens: Vec<&str> = text.lines().collect();
        if tokens.len() < RESERVED.len() || tokens[..RESERVED.len()] != RESERVED {
            return Err(Error::Parse {
                line: 1,
                msg: "vocabulary must start with the reserved symbols".into(),
            });
        }
        let mut v = Vocabulary {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.contains(char::is_whitespace) {
                return Err(Error::Parse {
                    line: i + 1,
                    msg: format!("invalid token {t:?}"),
                });
            }
            if v.index.contains_key(*t) {
                return Err(Error::Parse {
                    line: i + 1,
                    msg: format!("duplicate token {t:?}"),
                });
            }
            v.insert(t.to_string());
        }
        Ok(v)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reserved_ids_are_fixed_and_distinct() {
        let v = Vocabulary::from_tokens(["t001", "t000"]);
        assert_eq!(v.id(PAD), Some(Vocabulary::PAD_ID));
        assert_eq!(v.id(SOS), Some(Vocabulary::SOS_ID));
        assert_eq!(v.id(EOS), Some(Vocabulary::EOS_ID));
        assert_eq!(v.id(UNK), Some(Vocabulary::UNK_ID));
        assert_eq!(v.id(ALIGN), Some(Vocabulary::ALIGN_ID));
        assert_eq!(v.id("t001"), Some(5));
        assert_eq!(v.len(), 7);
    }

    #[test]
    fn unknown_tokens_map_to_unk() {
        let v = Vocabulary::from_tokens(["a"]);
        assert_eq!(v.encode("zzz"), Vocabulary::UNK_ID);
    }

    #[test]
    fn text_round_trip() {
        let v = Vocabulary::from_tokens(["t003", "t001", "t002"]);
        assert_eq!(Vocabulary::parse(&v.to_text()).unwrap(), v);
    }

    #[test]
    fn parse_rejects_duplicates_with_line() {
        let text = format!("{}\nx\nx\n", RESERVED.join("\n"));
        match Vocabulary::parse(&text) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 7),
            other => panic!("unexpected {other:?}"),
        }
    }
}
